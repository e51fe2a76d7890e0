//! Finite-difference verification of [`CascadeModel::loss_and_grads`].
//!
//! Each draw builds a random similarity cascade on a random blurred image and
//! compares every analytic gradient entry against the central difference
//! `(L(θ + h) − L(θ − h)) / 2h`. The bilinear sampler is only piecewise
//! smooth, so a draw is rejected and redrawn if any warped feature point sits
//! within `2h` of a lattice line, if any finite-difference evaluation moves a
//! point into a different cell, or if the scale projection fires.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cascade::{CascadeModel, GradientFault, Gradients, Stage};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMode, FeatureSpec};
use crate::numerics::Mat;
use crate::pose::{Pose, PoseKind, PoseModel, MIN_SCALE};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub draws: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Entries whose finite difference is below this are compared absolutely
    /// against the same bound.
    pub abs_tol: f64,
    /// Stage counts cycled over the draws.
    pub stage_counts: Vec<usize>,
    pub features: usize,
    pub image_size: usize,
    pub fault: Option<GradientFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            draws: 20,
            seed: 42,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            stage_counts: vec![1, 2, 3],
            features: 8,
            image_size: 32,
            fault: None,
        }
    }
}

/// Worst disagreement seen in one parameter block across all draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    /// Largest `|analytic − fd| / |fd|` over entries with `|fd| ≥ abs_tol`.
    pub worst_rel_err: f64,
    /// Largest `|analytic − fd|` over entries with `|fd| < abs_tol`.
    pub worst_abs_err: f64,
    pub entries: usize,
    pub failures: usize,
}

impl BlockReport {
    fn new(name: String) -> Self {
        BlockReport {
            name,
            worst_rel_err: 0.0,
            worst_abs_err: 0.0,
            entries: 0,
            failures: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub draws: usize,
    /// Draws discarded because they touched a non-smooth point.
    pub rejected: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockReport::passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed())
    }
}

/// One random test instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: CascadeModel,
    pub image: Image,
    pub p0: Pose,
    pub p_true: Pose,
}

/// Draws a random cascade, blurred image and pose pair.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    stages: usize,
    features: usize,
    size: usize,
) -> Result<Instance> {
    let rho = size as f64 / 4.0;
    let pose = PoseModel::new(PoseKind::Similarity, rho)?;
    let spec = FeatureSpec::random(
        &pose,
        &FeatureConfig {
            num_points: features,
            mode: FeatureMode::Raw,
            num_pairs: 0,
            blur_sigma: 2.0,
            seed: rng.random(),
        },
    )?;
    let image = spec.prepare(&Image::from_fn(size, size, |_, _| rng.random::<f64>())?)?;
    // Keep per-stage moves to a few pixels and a few hundredths in scale and
    // angle so the trajectory stays inside the image.
    let row_scale = [2.0, 2.0, 0.05, 0.05];
    let norm = 1.0 / (features as f64).sqrt();
    let mut gauss = || -> f64 { StandardNormal.sample(rng) };
    let stages = (0..stages)
        .map(|_| Stage {
            weights: Mat::from_fn(4, features, |r, _| row_scale[r] * norm * gauss()),
            bias: (0..4).map(|r| 0.25 * row_scale[r] * gauss()).collect(),
        })
        .collect();
    let c = (size as f64 - 1.0) / 2.0;
    let p0 = Pose(vec![
        c + rng.random_range(-2.0..2.0),
        c + rng.random_range(-2.0..2.0),
        rng.random_range(0.85..1.15),
        rng.random_range(-0.3..0.3),
    ]);
    let p_true = Pose(vec![
        p0[0] + rng.random_range(-3.0..3.0),
        p0[1] + rng.random_range(-3.0..3.0),
        p0[2] + rng.random_range(-0.1..0.1),
        p0[3] + rng.random_range(-0.1..0.1),
    ]);
    let model = CascadeModel::new(pose, spec, stages, p0.clone())?;
    Ok(Instance {
        model,
        image,
        p0,
        p_true,
    })
}

/// Loss of a forward pass plus the sampler cell of every warped point.
fn probe(
    model: &CascadeModel,
    img: &Image,
    p0: &[f64],
    p_true: &[f64],
) -> Result<(f64, Vec<(i64, i64)>, bool)> {
    let traj = model.forward(img, p0)?;
    let mut keys = Vec::new();
    let mut near_floor = false;
    for p in &traj.poses[..traj.poses.len() - 1] {
        for (x, y) in model.spec.warped_points(&model.pose, p)? {
            keys.push(img.cell_key(x, y));
        }
        near_floor |= p[2] < 2.0 * MIN_SCALE;
    }
    near_floor |= traj.projected.iter().any(|&b| b);
    let loss = 0.5
        * traj
            .final_pose()
            .iter()
            .zip(p_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    Ok((loss, keys, near_floor))
}

fn near_lattice(model: &CascadeModel, img: &Image, p0: &[f64], margin: f64) -> Result<bool> {
    let traj = model.forward(img, p0)?;
    for p in &traj.poses[..traj.poses.len() - 1] {
        for (x, y) in model.spec.warped_points(&model.pose, p)? {
            if (x - x.round()).abs() < margin || (y - y.round()).abs() < margin {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

enum Slot {
    Weight(usize, usize),
    Bias(usize, usize),
    Init(usize),
}

/// Central differences for every parameter, or `None` if some evaluation
/// crossed into a different smooth piece.
fn finite_differences(inst: &Instance, h: f64) -> Result<Option<Gradients>> {
    let base_model = &inst.model;
    let (_, base_keys, base_floor) = probe(base_model, &inst.image, &inst.p0, &inst.p_true)?;
    if base_floor {
        return Ok(None);
    }
    let d = base_model.dim();
    let k = base_model.num_features();
    let t_count = base_model.num_stages();
    let mut slots = Vec::new();
    for t in 0..t_count {
        for i in 0..d * k {
            slots.push(Slot::Weight(t, i));
        }
        for i in 0..d {
            slots.push(Slot::Bias(t, i));
        }
    }
    for i in 0..d {
        slots.push(Slot::Init(i));
    }

    let mut out = Gradients {
        loss: 0.0,
        weights: vec![Mat::zeros(d, k); t_count],
        bias: vec![vec![0.0; d]; t_count],
        init: Pose::zeros(d),
    };
    for slot in &slots {
        let mut vals = [0.0; 2];
        for (side, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut m = base_model.clone();
            let mut p0 = inst.p0.clone();
            match *slot {
                Slot::Weight(t, i) => m.stages[t].weights.as_mut_slice()[i] += sign * h,
                Slot::Bias(t, i) => m.stages[t].bias[i] += sign * h,
                Slot::Init(i) => p0[i] += sign * h,
            }
            let (loss, keys, floor) = probe(&m, &inst.image, &p0, &inst.p_true)?;
            if floor || keys != base_keys {
                return Ok(None);
            }
            vals[side] = loss;
        }
        let g = (vals[0] - vals[1]) / (2.0 * h);
        match *slot {
            Slot::Weight(t, i) => out.weights[t].as_mut_slice()[i] = g,
            Slot::Bias(t, i) => out.bias[t][i] = g,
            Slot::Init(i) => out.init[i] = g,
        }
    }
    Ok(Some(out))
}

fn compare(block: &mut BlockReport, analytic: &[f64], fd: &[f64], cfg: &GradcheckConfig) {
    for (&a, &f) in analytic.iter().zip(fd) {
        block.entries += 1;
        let diff = (a - f).abs();
        if f.abs() < cfg.abs_tol {
            block.worst_abs_err = block.worst_abs_err.max(diff);
            if !(diff <= cfg.abs_tol) {
                block.failures += 1;
            }
        } else {
            let rel = diff / f.abs();
            block.worst_rel_err = block.worst_rel_err.max(rel);
            if !(rel <= cfg.rel_tol) {
                block.failures += 1;
            }
        }
    }
}

/// Runs the full suite.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.stage_counts.is_empty() || cfg.stage_counts.contains(&0) {
        return Err(Error::Config(
            "gradient check needs positive stage counts".into(),
        ));
    }
    let max_t = *cfg.stage_counts.iter().max().expect("nonempty");
    let mut blocks: Vec<BlockReport> = Vec::new();
    for t in 1..=max_t {
        blocks.push(BlockReport::new(format!("W{t}")));
    }
    for t in 1..=max_t {
        blocks.push(BlockReport::new(format!("b{t}")));
    }
    blocks.push(BlockReport::new("p0".into()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rejected = 0;
    for draw in 0..cfg.draws {
        let t_count = cfg.stage_counts[draw % cfg.stage_counts.len()];
        let (inst, fd) = loop {
            let inst = random_instance(&mut rng, t_count, cfg.features, cfg.image_size)?;
            if near_lattice(&inst.model, &inst.image, &inst.p0, 2.0 * cfg.step)? {
                rejected += 1;
                continue;
            }
            match finite_differences(&inst, cfg.step)? {
                Some(fd) => break (inst, fd),
                None => rejected += 1,
            }
            if rejected > 100 * cfg.draws.max(1) {
                return Err(Error::Numerical(
                    "gradient check could not find smooth draws".into(),
                ));
            }
        };
        let mut analytic = inst
            .model
            .loss_and_grads(&inst.image, &inst.p0, &inst.p_true)?;
        if cfg.fault == Some(GradientFault::NegateBias) {
            analytic.bias.iter_mut().flatten().for_each(|v| *v = -*v);
        }
        for t in 0..t_count {
            compare(
                &mut blocks[t],
                analytic.weights[t].as_slice(),
                fd.weights[t].as_slice(),
                cfg,
            );
            compare(&mut blocks[max_t + t], &analytic.bias[t], &fd.bias[t], cfg);
        }
        compare(&mut blocks[2 * max_t], &analytic.init, &fd.init, cfg);
    }
    Ok(GradcheckReport {
        blocks,
        draws: cfg.draws,
        rejected,
    })
}
