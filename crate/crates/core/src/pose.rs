//! Pose parameterizations and the pose-indexing warp.
//!
//! A pose maps a point of the reference square `[-1, 1]²` into image
//! coordinates. Two families are supported:
//!
//! * **Similarity**, `p = (tx, ty, s, θ)`:
//!   `x = s·ρ·(cosθ·u − sinθ·v) + tx`, `y = s·ρ·(sinθ·u + cosθ·v) + ty`,
//!   with `ρ` the reference scale (half-extent of the square in pixels).
//!
//! * **Landmark**, `p = (x₁, y₁, …, x_L, y_L)`: a reference point is attached
//!   to one landmark and displaced by `ρ·(u, v)` without rotation.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Similarity scales are kept at or above this value during optimization.
pub const MIN_SCALE: f64 = 0.05;

/// Index of the scale parameter in a similarity pose.
pub const SCALE_INDEX: usize = 2;

/// Pose parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose(pub Vec<f64>);

impl Pose {
    pub fn zeros(d: usize) -> Pose {
        Pose(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Pose {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Pose {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Pose {
    fn from(v: Vec<f64>) -> Self {
        Pose(v)
    }
}

/// Which family of poses is being regressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseKind {
    Similarity,
    Landmark { count: usize },
}

impl PoseKind {
    pub fn dim(self) -> usize {
        match self {
            PoseKind::Similarity => 4,
            PoseKind::Landmark { count } => 2 * count,
        }
    }

    pub fn landmark_count(self) -> usize {
        match self {
            PoseKind::Similarity => 0,
            PoseKind::Landmark { count } => count,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoseKind::Similarity => "similarity",
            PoseKind::Landmark { .. } => "landmark",
        }
    }
}

/// A pose family together with the pixel half-extent of the reference square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseModel {
    pub kind: PoseKind,
    pub reference_scale: f64,
}

/// Anchor of one pose-indexed measurement in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    pub u: f64,
    pub v: f64,
    /// Landmark the point is attached to. Unused for similarity poses.
    pub anchor: usize,
}

impl RefPoint {
    pub fn new(u: f64, v: f64) -> Self {
        RefPoint { u, v, anchor: 0 }
    }

    pub fn anchored(u: f64, v: f64, anchor: usize) -> Self {
        RefPoint { u, v, anchor }
    }
}

/// Corners of the reference square, used by the similarity error metric.
pub const REFERENCE_CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

impl PoseModel {
    pub fn new(kind: PoseKind, reference_scale: f64) -> Result<Self> {
        if let PoseKind::Landmark { count: 0 } = kind {
            return Err(Error::Config(
                "landmark pose needs at least one landmark".into(),
            ));
        }
        if !(reference_scale > 0.0 && reference_scale.is_finite()) {
            return Err(Error::Config(format!(
                "reference scale must be > 0, got {reference_scale}"
            )));
        }
        Ok(PoseModel {
            kind,
            reference_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn check_pose(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::dim(format!(
                "{} pose needs {} parameters, got {}",
                self.kind.name(),
                self.dim(),
                p.len()
            )));
        }
        Ok(())
    }

    fn check_point(&self, r: &RefPoint) -> Result<()> {
        if let PoseKind::Landmark { count } = self.kind {
            if r.anchor >= count {
                return Err(Error::dim(format!(
                    "reference point anchored to landmark {} of {count}",
                    r.anchor
                )));
            }
        }
        Ok(())
    }

    /// Image coordinates of reference point `r` under pose `p`.
    pub fn warp_point(&self, p: &[f64], r: &RefPoint) -> Result<(f64, f64)> {
        self.check_pose(p)?;
        self.check_point(r)?;
        Ok(self.warp_unchecked(p, r))
    }

    #[inline]
    pub(crate) fn warp_unchecked(&self, p: &[f64], r: &RefPoint) -> (f64, f64) {
        let rho = self.reference_scale;
        match self.kind {
            PoseKind::Similarity => {
                let (sin, cos) = p[3].sin_cos();
                let k = p[2] * rho;
                (
                    k * (cos * r.u - sin * r.v) + p[0],
                    k * (sin * r.u + cos * r.v) + p[1],
                )
            }
            PoseKind::Landmark { .. } => {
                let a = 2 * r.anchor;
                (p[a] + rho * r.u, p[a + 1] + rho * r.v)
            }
        }
    }

    /// `∂(x, y)/∂p` as a `2 × d` matrix.
    pub fn warp_jacobian(&self, p: &[f64], r: &RefPoint) -> Result<Mat> {
        self.check_pose(p)?;
        self.check_point(r)?;
        let mut jac = Mat::zeros(2, self.dim());
        match self.jacobian_rows(p, r) {
            WarpJacobian::Similarity { ds, dtheta } => {
                jac.set(0, 0, 1.0);
                jac.set(1, 1, 1.0);
                jac.set(0, 2, ds.0);
                jac.set(1, 2, ds.1);
                jac.set(0, 3, dtheta.0);
                jac.set(1, 3, dtheta.1);
            }
            WarpJacobian::Landmark { column } => {
                jac.set(0, column, 1.0);
                jac.set(1, column + 1, 1.0);
            }
        }
        Ok(jac)
    }

    /// Compact form of the warp Jacobian used on hot paths.
    #[inline]
    pub(crate) fn jacobian_rows(&self, p: &[f64], r: &RefPoint) -> WarpJacobian {
        let rho = self.reference_scale;
        match self.kind {
            PoseKind::Similarity => {
                let (sin, cos) = p[3].sin_cos();
                let a = rho * (cos * r.u - sin * r.v);
                let b = rho * (sin * r.u + cos * r.v);
                WarpJacobian::Similarity {
                    ds: (a, b),
                    dtheta: (-p[2] * b, p[2] * a),
                }
            }
            PoseKind::Landmark { .. } => WarpJacobian::Landmark {
                column: 2 * r.anchor,
            },
        }
    }

    /// Clamps a similarity scale to [`MIN_SCALE`]. Returns whether the
    /// projection changed the pose. Landmark poses are left untouched.
    pub fn project(&self, p: &mut [f64]) -> bool {
        if self.kind == PoseKind::Similarity && !(p[SCALE_INDEX] >= MIN_SCALE) {
            p[SCALE_INDEX] = MIN_SCALE;
            true
        } else {
            false
        }
    }

    /// Image points that define the evaluation metric: the warped corners of
    /// the reference square, or the landmarks themselves.
    pub fn test_points(&self, p: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.check_pose(p)?;
        Ok(match self.kind {
            PoseKind::Similarity => REFERENCE_CORNERS
                .iter()
                .map(|&(u, v)| self.warp_unchecked(p, &RefPoint::new(u, v)))
                .collect(),
            PoseKind::Landmark { .. } => p.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    /// Mean distance between corresponding test points of `p` and `p_true`,
    /// divided by `norm_const`.
    pub fn normalized_error(&self, p: &[f64], p_true: &[f64], norm_const: f64) -> Result<f64> {
        if !(norm_const > 0.0) {
            return Err(Error::Config(format!(
                "normalization constant must be > 0, got {norm_const}"
            )));
        }
        let a = self.test_points(p)?;
        let b = self.test_points(p_true)?;
        let total: f64 = a
            .iter()
            .zip(&b)
            .map(|(pa, pb)| (pa.0 - pb.0).hypot(pa.1 - pb.1))
            .sum();
        Ok(total / a.len() as f64 / norm_const)
    }

    /// Diagonal of the bounding box of the ground-truth test points.
    ///
    /// A degenerate box (a single landmark) falls back to the diagonal of the
    /// reference square at unit scale.
    pub fn default_norm_const(&self, p_true: &[f64]) -> Result<f64> {
        let pts = self.test_points(p_true)?;
        let (mut x0, mut y0, mut x1, mut y1) = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in &pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let diag = (x1 - x0).hypot(y1 - y0);
        if diag > 1e-9 && diag.is_finite() {
            Ok(diag)
        } else {
            Ok(2.0 * std::f64::consts::SQRT_2 * self.reference_scale)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum WarpJacobian {
    /// Translation columns are the identity; these are the scale and angle
    /// columns.
    Similarity { ds: (f64, f64), dtheta: (f64, f64) },
    /// Identity block at `column, column + 1`.
    Landmark { column: usize },
}

impl WarpJacobian {
    /// Adds `w · [gx, gy] · ∂(x,y)/∂p` into `row`.
    #[inline]
    pub(crate) fn accumulate(&self, gx: f64, gy: f64, w: f64, row: &mut [f64]) {
        match *self {
            WarpJacobian::Similarity { ds, dtheta } => {
                row[0] += w * gx;
                row[1] += w * gy;
                row[2] += w * (gx * ds.0 + gy * ds.1);
                row[3] += w * (gx * dtheta.0 + gy * dtheta.1);
            }
            WarpJacobian::Landmark { column } => {
                row[column] += w * gx;
                row[column + 1] += w * gy;
            }
        }
    }
}
