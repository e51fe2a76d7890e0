//! Pose-indexed features `φ(I, p)` and their Jacobian `∂φ/∂p`.
//!
//! A feature is the blurred intensity at a reference point carried into the
//! image by the current pose (`Raw`), or the difference of two such
//! intensities (`Diff`). The Jacobian follows from the chain rule:
//! `∂φₖ/∂p = ∇I(x, y) · ∂(x, y)/∂p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::pose::{PoseKind, PoseModel, RefPoint};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Raw,
    Diff,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Raw => "raw",
            FeatureMode::Diff => "diff",
        }
    }
}

/// Where features are measured, and how.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub ref_points: Vec<RefPoint>,
    /// Index pairs `(i, j)` producing `raw_i − raw_j`; only read in `Diff` mode.
    pub pairs: Vec<(usize, usize)>,
    pub mode: FeatureMode,
    /// Gaussian pre-blur applied to every image before extraction. Zero
    /// disables blurring.
    pub blur_sigma: f64,
}

/// Knobs for [`FeatureSpec::random`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub num_points: usize,
    pub mode: FeatureMode,
    /// Number of difference pairs in `Diff` mode.
    pub num_pairs: usize,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            num_points: 64,
            mode: FeatureMode::Raw,
            num_pairs: 64,
            blur_sigma: 2.0,
            seed: 0,
        }
    }
}

impl FeatureSpec {
    /// Draws reference points uniformly from `[-1, 1]²`. Landmark anchors are
    /// assigned round-robin (`k mod L`).
    pub fn random(pose: &PoseModel, cfg: &FeatureConfig) -> Result<FeatureSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let landmarks = pose.kind.landmark_count().max(1);
        let ref_points = (0..cfg.num_points)
            .map(|k| {
                let u = rng.random_range(-1.0..=1.0);
                let v = rng.random_range(-1.0..=1.0);
                RefPoint::anchored(u, v, k % landmarks)
            })
            .collect::<Vec<_>>();
        let pairs = match cfg.mode {
            FeatureMode::Raw => Vec::new(),
            FeatureMode::Diff => {
                if cfg.num_points < 2 {
                    return Err(Error::Config(
                        "difference features need at least two points".into(),
                    ));
                }
                (0..cfg.num_pairs)
                    .map(|_| {
                        let i = rng.random_range(0..cfg.num_points);
                        let mut j = rng.random_range(0..cfg.num_points - 1);
                        if j >= i {
                            j += 1;
                        }
                        (i, j)
                    })
                    .collect()
            }
        };
        let spec = FeatureSpec {
            ref_points,
            pairs,
            mode: cfg.mode,
            blur_sigma: cfg.blur_sigma,
        };
        spec.validate(pose)?;
        Ok(spec)
    }

    /// Number of features `K`.
    pub fn len(&self) -> usize {
        match self.mode {
            FeatureMode::Raw => self.ref_points.len(),
            FeatureMode::Diff => self.pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, pose: &PoseModel) -> Result<()> {
        if self.ref_points.is_empty() {
            return Err(Error::Config("feature spec has no reference points".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "blur sigma must be >= 0, got {}",
                self.blur_sigma
            )));
        }
        for (k, r) in self.ref_points.iter().enumerate() {
            if !(-1.0..=1.0).contains(&r.u) || !(-1.0..=1.0).contains(&r.v) {
                return Err(Error::Config(format!(
                    "reference point {k} ({}, {}) outside [-1, 1]²",
                    r.u, r.v
                )));
            }
            if let PoseKind::Landmark { count } = pose.kind {
                if r.anchor >= count {
                    return Err(Error::dim(format!(
                        "reference point {k} anchored to landmark {} of {count}",
                        r.anchor
                    )));
                }
            }
        }
        if self.mode == FeatureMode::Diff {
            if self.pairs.is_empty() {
                return Err(Error::Config(
                    "difference mode needs at least one pair".into(),
                ));
            }
            let n = self.ref_points.len();
            for &(i, j) in &self.pairs {
                if i >= n || j >= n || i == j {
                    return Err(Error::Config(format!(
                        "invalid difference pair ({i}, {j}) over {n} points"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Blurs an image the way this spec expects it at extraction time.
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        if self.blur_sigma > 0.0 {
            img.gaussian_blur(self.blur_sigma)
        } else {
            Ok(img.clone())
        }
    }

    /// Image locations of every reference point under `p`.
    pub fn warped_points(&self, pose: &PoseModel, p: &[f64]) -> Result<Vec<(f64, f64)>> {
        pose.check_pose(p)?;
        Ok(self
            .ref_points
            .iter()
            .map(|r| pose.warp_unchecked(p, r))
            .collect())
    }
}

/// Feature vector at pose `p`. The image must already be blurred with
/// `spec.blur_sigma`.
pub fn extract(img: &Image, p: &[f64], pose: &PoseModel, spec: &FeatureSpec) -> Result<Vec<f64>> {
    pose.check_pose(p)?;
    let raw: Vec<f64> = spec
        .ref_points
        .iter()
        .map(|r| {
            let (x, y) = pose.warp_unchecked(p, r);
            img.sample_bilinear(x, y)
        })
        .collect();
    Ok(match spec.mode {
        FeatureMode::Raw => raw,
        FeatureMode::Diff => spec.pairs.iter().map(|&(i, j)| raw[i] - raw[j]).collect(),
    })
}

/// `∂φ/∂p`, a `K × d` matrix.
pub fn jacobian(img: &Image, p: &[f64], pose: &PoseModel, spec: &FeatureSpec) -> Result<Mat> {
    Ok(extract_with_jacobian(img, p, pose, spec)?.1)
}

/// Features and their Jacobian from a single pass over the reference points.
pub fn extract_with_jacobian(
    img: &Image,
    p: &[f64],
    pose: &PoseModel,
    spec: &FeatureSpec,
) -> Result<(Vec<f64>, Mat)> {
    pose.check_pose(p)?;
    let d = pose.dim();
    let n = spec.ref_points.len();
    let mut raw = Vec::with_capacity(n);
    let mut raw_jac = Mat::zeros(n, d);
    for (k, r) in spec.ref_points.iter().enumerate() {
        let (x, y) = pose.warp_unchecked(p, r);
        let (value, (gx, gy)) = img.sample_with_grad(x, y);
        raw.push(value);
        pose.jacobian_rows(p, r)
            .accumulate(gx, gy, 1.0, raw_jac.row_mut(k));
    }
    match spec.mode {
        FeatureMode::Raw => Ok((raw, raw_jac)),
        FeatureMode::Diff => {
            let k = spec.pairs.len();
            let mut phi = Vec::with_capacity(k);
            let mut jac = Mat::zeros(k, d);
            for (row, &(i, j)) in spec.pairs.iter().enumerate() {
                phi.push(raw[i] - raw[j]);
                let out = jac.row_mut(row);
                for c in 0..d {
                    out[c] = raw_jac.get(i, c) - raw_jac.get(j, c);
                }
            }
            Ok((phi, jac))
        }
    }
}
