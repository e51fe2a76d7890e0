//! The cascade: inference, greedy stage-wise fitting, reverse-mode gradients
//! of the end-to-end loss, and mini-batch SGD fine-tuning.
//!
//! Stage `t` refines the pose additively,
//!
//! ```text
//! p_t = proj(p_{t-1} + W_t · φ(I, p_{t-1}) + b_t)
//! ```
//!
//! where `proj` keeps a similarity scale at or above
//! [`MIN_SCALE`](crate::pose::MIN_SCALE). Because
//! `φ` depends on the pose it is evaluated at, every stage's output feeds the
//! next stage's features, and gradients reach early stages only by way of
//! the feature Jacobians `J_t = ∂φ/∂p` evaluated along the trajectory.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{extract, extract_with_jacobian, FeatureConfig, FeatureSpec};
use crate::numerics::{dot, mat_t_vec, ridge_fit, Mat};
use crate::pose::{Pose, PoseKind, PoseModel, SCALE_INDEX};
use crate::raster::Image;

/// Version written into and expected from model files.
pub const FORMAT_VERSION: u32 = 1;

/// One linear stage regressor `φ ↦ W·φ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// `d × K`.
    pub weights: Mat,
    /// Length `d`.
    pub bias: Vec<f64>,
}

impl Stage {
    pub fn zeros(d: usize, k: usize) -> Stage {
        Stage {
            weights: Mat::zeros(d, k),
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub pose: PoseModel,
    pub spec: FeatureSpec,
    pub stages: Vec<Stage>,
    /// Starting pose for inference.
    pub mean_pose: Pose,
    pub version: u32,
}

impl CascadeModel {
    /// Assembles a model after checking that every part agrees on `(d, K)`.
    pub fn new(
        pose: PoseModel,
        spec: FeatureSpec,
        stages: Vec<Stage>,
        mean_pose: Pose,
    ) -> Result<CascadeModel> {
        let model = CascadeModel {
            pose,
            spec,
            stages,
            mean_pose,
            version: FORMAT_VERSION,
        };
        model.validate()?;
        Ok(model)
    }

    /// A model with `stages` all-zero stages, i.e. the identity cascade.
    pub fn identity(
        pose: PoseModel,
        spec: FeatureSpec,
        stages: usize,
        mean_pose: Pose,
    ) -> Result<CascadeModel> {
        let (d, k) = (pose.dim(), spec.len());
        CascadeModel::new(pose, spec, vec![Stage::zeros(d, k); stages], mean_pose)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate(&self.pose)?;
        let (d, k) = (self.dim(), self.num_features());
        self.pose.check_pose(&self.mean_pose)?;
        for (t, s) in self.stages.iter().enumerate() {
            if s.weights.rows() != d || s.weights.cols() != k || s.bias.len() != d {
                return Err(Error::dim(format!(
                    "stage {} is {}x{} with bias {}, model expects {d}x{k}",
                    t + 1,
                    s.weights.rows(),
                    s.weights.cols(),
                    s.bias.len()
                )));
            }
            if !s.weights.is_finite() || s.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "stage {} has non-finite entries",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.pose.dim()
    }

    pub fn num_features(&self) -> usize {
        self.spec.len()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Applies stage `t` (0-based) at pose `p`. Returns the new pose and
    /// whether the scale projection fired.
    pub fn apply_stage(&self, t: usize, img: &Image, p: &[f64]) -> Result<(Pose, bool)> {
        let stage = &self.stages[t];
        let phi = extract(img, p, &self.pose, &self.spec)?;
        let mut next = p.to_vec();
        for (r, out) in next.iter_mut().enumerate() {
            *out += dot(stage.weights.row(r), &phi) + stage.bias[r];
        }
        let projected = self.pose.project(&mut next);
        Ok((Pose(next), projected))
    }

    /// Runs every stage from `p0` on a pre-blurred image.
    pub fn forward(&self, img: &Image, p0: &[f64]) -> Result<Trajectory> {
        self.pose.check_pose(p0)?;
        let mut poses = Vec::with_capacity(self.stages.len() + 1);
        let mut projected = Vec::with_capacity(self.stages.len());
        poses.push(Pose(p0.to_vec()));
        for t in 0..self.stages.len() {
            let (next, hit) = self.apply_stage(t, img, &poses[t])?;
            poses.push(next);
            projected.push(hit);
        }
        Ok(Trajectory { poses, projected })
    }

    /// Final pose reached from the mean pose.
    pub fn predict(&self, img: &Image) -> Result<Pose> {
        Ok(self.forward(img, &self.mean_pose)?.into_final())
    }

    /// `½‖p_T − p_true‖²` and its gradient with respect to every stage's
    /// weights and bias and to the starting pose.
    pub fn loss_and_grads(&self, img: &Image, p0: &[f64], p_true: &[f64]) -> Result<Gradients> {
        self.pose.check_pose(p_true)?;
        let traj = self.forward(img, p0)?;
        let d = self.dim();
        let last = traj.final_pose();
        let mut g: Vec<f64> = last.iter().zip(p_true).map(|(a, b)| a - b).collect();
        let loss = 0.5 * dot(&g, &g);

        let t_count = self.stages.len();
        let mut weights = Vec::with_capacity(t_count);
        let mut bias = Vec::with_capacity(t_count);
        for t in (0..t_count).rev() {
            if traj.projected[t] {
                g[SCALE_INDEX] = 0.0;
            }
            let (phi, jac) = extract_with_jacobian(img, &traj.poses[t], &self.pose, &self.spec)?;
            weights.push(Mat::from_fn(d, phi.len(), |r, c| g[r] * phi[c]));
            bias.push(g.clone());
            // g ← (I + W·J)ᵀ g = g + Jᵀ (Wᵀ g)
            let wt_g = mat_t_vec(&self.stages[t].weights, &g)?;
            let jt = mat_t_vec(&jac, &wt_g)?;
            for (gi, ji) in g.iter_mut().zip(&jt) {
                *gi += ji;
            }
        }
        weights.reverse();
        bias.reverse();
        Ok(Gradients {
            loss,
            weights,
            bias,
            init: Pose(g),
        })
    }
}

/// Poses visited by a forward pass: `poses[0]` is the start, `poses[t]` the
/// output of stage `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    /// Whether the scale projection fired at each stage.
    pub projected: Vec<bool>,
}

impl Trajectory {
    pub fn final_pose(&self) -> &Pose {
        self.poses
            .last()
            .expect("trajectory always holds the start pose")
    }

    pub fn into_final(mut self) -> Pose {
        self.poses
            .pop()
            .expect("trajectory always holds the start pose")
    }
}

/// Output of [`CascadeModel::loss_and_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// `∂L/∂W_t`, one per stage.
    pub weights: Vec<Mat>,
    /// `∂L/∂b_t`, one per stage.
    pub bias: Vec<Vec<f64>>,
    /// `∂L/∂p₀`.
    pub init: Pose,
}

/// Hyperparameters for greedy fitting and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stages: usize,
    pub lambda: f64,
    /// Starting poses drawn per sample.
    pub n_aug: usize,
    /// Multiplier on the default perturbation of starting poses; 0 starts
    /// every copy exactly at the mean pose.
    pub init_spread: f64,
    pub epochs: usize,
    /// Samples per SGD step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Per-block L2 bound on gradients; `f64::INFINITY` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: 10,
            lambda: 1.0,
            n_aug: 5,
            init_spread: 1.0,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            lr_decay: 0.97,
            grad_clip: 10.0,
            seed: 42,
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages < 1 {
            return bad("stage count must be at least 1".into());
        }
        if self.n_aug < 1 {
            return bad("n_aug must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr decay must be > 0, got {}", self.lr_decay));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("gradient clip must be > 0, got {}", self.grad_clip));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return bad(format!(
                "init spread must be >= 0, got {}",
                self.init_spread
            ));
        }
        Ok(())
    }
}

/// A sample with its image already blurred for feature extraction.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Image,
    pub p_true: Pose,
    pub norm_const: f64,
}

/// Blurs every image of the dataset once according to `spec`.
pub fn prepare_samples(dataset: &Dataset, spec: &FeatureSpec) -> Result<Vec<PreparedSample>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                image: spec.prepare(&s.image)?,
                p_true: s.p_true.clone(),
                norm_const: s.norm_const,
            })
        })
        .collect()
}

/// Component-wise mean of the ground-truth poses.
pub fn mean_pose(samples: &[PreparedSample], d: usize) -> Pose {
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.p_true.iter()) {
            *m += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Pose(mean)
}

/// Starting poses for training, `n_aug` per sample in sample-major order.
///
/// Each is the mean pose plus a uniform perturbation: ±15% of the sample's
/// normalization constant on translations (or on every landmark
/// coordinate), ±0.15 on scale, ±0.2 rad on angle, all multiplied by
/// `spread`.
pub fn initial_poses(
    pose: &PoseModel,
    mean: &[f64],
    norm_consts: &[f64],
    n_aug: usize,
    spread: f64,
    seed: u64,
) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(norm_consts.len() * n_aug);
    for &nc in norm_consts {
        for _ in 0..n_aug {
            let mut p = mean.to_vec();
            let mut jitter = |amp: f64| amp * spread * rng.random_range(-1.0..=1.0);
            match pose.kind {
                PoseKind::Similarity => {
                    p[0] += jitter(0.15 * nc);
                    p[1] += jitter(0.15 * nc);
                    p[2] += jitter(0.15);
                    p[3] += jitter(0.2);
                }
                PoseKind::Landmark { .. } => {
                    for v in p.iter_mut() {
                        *v += jitter(0.15 * nc);
                    }
                }
            }
            pose.project(&mut p);
            out.push(Pose(p));
        }
    }
    out
}

fn training_starts(
    pose: &PoseModel,
    mean: &[f64],
    samples: &[PreparedSample],
    cfg: &TrainConfig,
) -> Vec<Pose> {
    let nc: Vec<f64> = samples.iter().map(|s| s.norm_const).collect();
    initial_poses(pose, mean, &nc, cfg.n_aug, cfg.init_spread, cfg.seed)
}

fn squared_error(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Per-stage statistics recorded while fitting greedily.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyReport {
    /// Mean squared pose error over all training starts, before stage 1
    /// (index 0) and after each stage.
    pub stage_mse: Vec<f64>,
    /// Mean normalized error when starting from the mean pose, before stage 1
    /// (index 0) and after each stage.
    pub stage_nme: Vec<f64>,
}

/// Fits stages one at a time by ridge regression of the remaining pose
/// error on the features at the current poses.
pub fn train_greedy(dataset: &Dataset, cfg: &TrainConfig) -> Result<CascadeModel> {
    Ok(train_greedy_with_report(dataset, cfg)?.0)
}

pub fn train_greedy_with_report(
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(CascadeModel, GreedyReport)> {
    cfg.validate()?;
    dataset.validate()?;
    let pose = dataset.pose;
    let spec = FeatureSpec::random(&pose, &cfg.features)?;
    let samples = prepare_samples(dataset, &spec)?;
    let d = pose.dim();
    let k = spec.len();
    let mean = mean_pose(&samples, d);

    let mut model = CascadeModel::new(pose, spec, Vec::with_capacity(cfg.stages), mean.clone())?;
    let mut current = training_starts(&pose, &mean, &samples, cfg);
    let owner = |i: usize| &samples[i / cfg.n_aug];
    let mse = |poses: &[Pose]| {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| squared_error(p, &owner(i).p_true))
            .sum::<f64>()
            / poses.len() as f64
    };

    let mut from_mean: Vec<Pose> = vec![mean.clone(); samples.len()];
    let mut report = GreedyReport {
        stage_mse: vec![mse(&current)],
        stage_nme: vec![mean_normalized_error(&pose, &from_mean, &samples)?],
    };

    for t in 0..cfg.stages {
        let feats: Vec<Vec<f64>> = current
            .par_iter()
            .enumerate()
            .map(|(i, p)| extract(&owner(i).image, p, &model.pose, &model.spec))
            .collect::<Result<_>>()?;
        let n = current.len();
        let mut phi = Mat::zeros(n, k);
        let mut delta = Mat::zeros(n, d);
        for i in 0..n {
            phi.row_mut(i).copy_from_slice(&feats[i]);
            for (c, out) in delta.row_mut(i).iter_mut().enumerate() {
                *out = owner(i).p_true[c] - current[i][c];
            }
        }
        let fit = ridge_fit(&phi, &delta, cfg.lambda)?;
        model.stages.push(Stage {
            weights: fit.weights,
            bias: fit.bias,
        });

        current = current
            .par_iter()
            .enumerate()
            .map(|(i, p)| Ok(model.apply_stage(t, &owner(i).image, p)?.0))
            .collect::<Result<_>>()?;
        from_mean = from_mean
            .par_iter()
            .zip(samples.par_iter())
            .map(|(p, s)| Ok(model.apply_stage(t, &s.image, p)?.0))
            .collect::<Result<_>>()?;
        report.stage_mse.push(mse(&current));
        report
            .stage_nme
            .push(mean_normalized_error(&pose, &from_mean, &samples)?);
    }
    Ok((model, report))
}

fn mean_normalized_error(
    pose: &PoseModel,
    preds: &[Pose],
    samples: &[PreparedSample],
) -> Result<f64> {
    let errs = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| pose.normalized_error(p, &s.p_true, s.norm_const))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Normalized error of the prediction from the mean pose, per sample.
pub fn evaluate(model: &CascadeModel, samples: &[PreparedSample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            model.pose.normalized_error(&p, &s.p_true, s.norm_const)
        })
        .collect()
}

/// Result of [`finetune_bp`].
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: CascadeModel,
    /// Mean training loss of the input model.
    pub initial_loss: f64,
    /// Mean training loss after each epoch.
    pub history: Vec<f64>,
}

/// Mean of `½‖p_T − p_true‖²` over every (sample, start) pair.
pub fn mean_loss(model: &CascadeModel, samples: &[PreparedSample], starts: &[Pose]) -> Result<f64> {
    let n_aug = starts.len() / samples.len();
    let losses: Vec<f64> = starts
        .par_iter()
        .enumerate()
        .map(|(i, p0)| {
            let s = &samples[i / n_aug];
            let traj = model.forward(&s.image, p0)?;
            Ok(0.5 * squared_error(traj.final_pose(), &s.p_true))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Optional corruption applied to computed gradients; exists only to prove
/// that gradient checks catch errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFault {
    NegateBias,
}

/// Jointly tunes all stages by mini-batch SGD with momentum on the
/// end-to-end loss, starting from the same perturbed poses greedy fitting
/// uses for this seed.
pub fn finetune_bp(
    model: &CascadeModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    model.validate()?;
    if dataset.pose.kind != model.pose.kind {
        return Err(Error::dim(format!(
            "model regresses {} poses but dataset holds {} poses",
            model.pose.kind.name(),
            dataset.pose.kind.name()
        )));
    }
    let samples = prepare_samples(dataset, &model.spec)?;
    let starts = training_starts(&model.pose, &model.mean_pose, &samples, cfg);
    let mut model = model.clone();
    let initial_loss = mean_loss(&model, &samples, &starts)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: None,
        });
    }

    let t_count = model.num_stages();
    let mut vel_w: Vec<Mat> = model
        .stages
        .iter()
        .map(|s| Mat::zeros(s.weights.rows(), s.weights.cols()))
        .collect();
    let mut vel_b: Vec<Vec<f64>> = model
        .stages
        .iter()
        .map(|s| vec![0.0; s.bias.len()])
        .collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<usize> = batch
                .iter()
                .flat_map(|&s| (0..cfg.n_aug).map(move |a| s * cfg.n_aug + a))
                .collect();
            let grads: Vec<Gradients> = jobs
                .par_iter()
                .map(|&j| {
                    let s = &samples[j / cfg.n_aug];
                    model.loss_and_grads(&s.image, &starts[j], &s.p_true)
                })
                .collect::<Result<_>>()?;
            let mut avg = sum_gradients(&grads);
            let inv = 1.0 / grads.len() as f64;
            scale_gradients(&mut avg, inv);
            if !avg.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: Some(batch_idx + 1),
                });
            }
            for t in 0..t_count {
                clip_block(avg.weights[t].as_mut_slice(), cfg.grad_clip);
                clip_block(&mut avg.bias[t], cfg.grad_clip);
                momentum_step(
                    model.stages[t].weights.as_mut_slice(),
                    vel_w[t].as_mut_slice(),
                    avg.weights[t].as_slice(),
                    lr,
                    cfg.momentum,
                );
                momentum_step(
                    &mut model.stages[t].bias,
                    &mut vel_b[t],
                    &avg.bias[t],
                    lr,
                    cfg.momentum,
                );
            }
        }
        lr *= cfg.lr_decay;
        let loss = mean_loss(&model, &samples, &starts)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                batch: None,
            });
        }
        history.push(loss);
    }
    Ok(FinetuneOutcome {
        model,
        initial_loss,
        history,
    })
}

fn sum_gradients(grads: &[Gradients]) -> Gradients {
    let mut acc = grads[0].clone();
    for g in &grads[1..] {
        acc.loss += g.loss;
        for (a, b) in acc.weights.iter_mut().zip(&g.weights) {
            a.as_mut_slice()
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(x, y)| *x += y);
        }
        for (a, b) in acc.bias.iter_mut().zip(&g.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        acc.init
            .iter_mut()
            .zip(g.init.iter())
            .for_each(|(x, y)| *x += y);
    }
    acc
}

fn scale_gradients(g: &mut Gradients, s: f64) {
    g.loss *= s;
    for w in &mut g.weights {
        w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    }
    for b in &mut g.bias {
        b.iter_mut().for_each(|v| *v *= s);
    }
    g.init.iter_mut().for_each(|v| *v *= s);
}

/// Rescales `block` so its L2 norm does not exceed `max_norm`.
pub fn clip_block(block: &mut [f64], max_norm: f64) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        block.iter_mut().for_each(|v| *v *= s);
    }
}

/// `v ← μ·v − η·g`, then `θ ← θ + v`.
fn momentum_step(params: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        // Skipping zero steps keeps a stalled parameter bit-identical
        // (adding +0.0 would turn -0.0 into +0.0).
        if *v != 0.0 {
            *p += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Sample};
    use crate::features::FeatureMode;
    use crate::pose::{RefPoint, MIN_SCALE};

    fn sim_pose() -> PoseModel {
        PoseModel::new(PoseKind::Similarity, 4.0).unwrap()
    }

    fn small_spec(k: usize) -> FeatureSpec {
        FeatureSpec::random(
            &sim_pose(),
            &FeatureConfig {
                num_points: k,
                mode: FeatureMode::Raw,
                num_pairs: 0,
                blur_sigma: 0.0,
                seed: 1,
            },
        )
        .unwrap()
    }

    fn constant(c: f64) -> Image {
        Image::filled(16, 16, c).unwrap()
    }

    #[test]
    fn zero_cascade_is_identity() {
        let m =
            CascadeModel::identity(sim_pose(), small_spec(5), 3, Pose(vec![8.0, 8.0, 1.0, 0.0]))
                .unwrap();
        let p0 = [7.0, 9.0, 1.1, 0.2];
        let traj = m.forward(&constant(0.3), &p0).unwrap();
        assert_eq!(traj.poses.len(), 4);
        assert!(traj.poses.iter().all(|p| p.0 == p0));
    }

    #[test]
    fn pure_bias_step() {
        let mut m =
            CascadeModel::identity(sim_pose(), small_spec(5), 1, Pose(vec![8.0; 4])).unwrap();
        m.stages[0].bias = vec![1.0, -2.0, -0.5, 0.25];
        let out = m.forward(&constant(0.0), &[8.0, 8.0, 1.0, 0.0]).unwrap();
        assert_eq!(out.final_pose().0, vec![9.0, 6.0, 0.5, 0.25]);
        // scale projection after an over-large negative step
        m.stages[0].bias[2] = -3.0;
        let out = m.forward(&constant(0.0), &[8.0, 8.0, 1.0, 0.0]).unwrap();
        assert_eq!(out.final_pose()[2], MIN_SCALE);
        assert_eq!(out.projected, vec![true]);
    }

    #[test]
    fn two_stages_on_constant_image_compose_by_hand() {
        let c = 0.4;
        let k = 3;
        let mut m =
            CascadeModel::identity(sim_pose(), small_spec(k), 2, Pose(vec![8.0; 4])).unwrap();
        m.stages[0].weights = Mat::from_fn(4, k, |r, col| 0.1 * (r + col) as f64);
        m.stages[0].bias = vec![0.5, 0.0, 0.01, -0.02];
        m.stages[1].weights = Mat::from_fn(4, k, |r, col| -0.05 * (r as f64) + 0.02 * col as f64);
        m.stages[1].bias = vec![-1.0, 2.0, 0.0, 0.03];
        let p0 = [8.0, 7.5, 1.0, 0.1];
        let out = m.forward(&constant(c), &p0).unwrap();
        let mut expected = p0.to_vec();
        for s in &m.stages {
            for r in 0..4 {
                let row_sum: f64 = s.weights.row(r).iter().map(|w| w * c).sum();
                expected[r] += row_sum + s.bias[r];
            }
        }
        for (a, b) in out.final_pose().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_vanish_at_optimum() {
        let m = CascadeModel::identity(sim_pose(), small_spec(4), 2, Pose(vec![8.0; 4])).unwrap();
        let p = [8.0, 8.0, 1.0, 0.0];
        let g = m.loss_and_grads(&constant(0.2), &p, &p).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g
            .weights
            .iter()
            .all(|w| w.as_slice().iter().all(|&v| v == 0.0)));
        assert!(g.bias.iter().flatten().all(|&v| v == 0.0));
        assert!(g.init.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_zero_stage_gradient_collapses_to_residual() {
        let mut m =
            CascadeModel::identity(sim_pose(), small_spec(4), 1, Pose(vec![8.0; 4])).unwrap();
        m.stages[0].bias = vec![0.5, -0.5, 0.1, 0.0];
        let p0 = [8.0, 8.0, 1.0, 0.0];
        let truth = [7.0, 9.0, 1.3, 0.2];
        let g = m.loss_and_grads(&constant(0.7), &p0, &truth).unwrap();
        let p1 = m.forward(&constant(0.7), &p0).unwrap().into_final();
        let resid: Vec<f64> = p1.iter().zip(&truth).map(|(a, b)| a - b).collect();
        assert_eq!(g.bias[0], resid);
        assert_eq!(g.init.0, resid);
    }

    #[test]
    fn projection_blocks_scale_gradient() {
        let mut m =
            CascadeModel::identity(sim_pose(), small_spec(4), 1, Pose(vec![8.0; 4])).unwrap();
        m.stages[0].bias = vec![0.0, 0.0, -5.0, 0.0];
        let g = m
            .loss_and_grads(&constant(0.1), &[8.0, 8.0, 1.0, 0.0], &[8.0, 8.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(g.bias[0][2], 0.0);
        assert_eq!(g.init[2], 0.0);
    }

    #[test]
    fn dimension_errors() {
        let m = CascadeModel::identity(sim_pose(), small_spec(4), 1, Pose(vec![8.0; 4])).unwrap();
        assert!(matches!(
            m.forward(&constant(0.0), &[1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            m.loss_and_grads(&constant(0.0), &[1.0; 4], &[1.0; 2]),
            Err(Error::Dimension(_))
        ));
        let bad = CascadeModel::new(
            sim_pose(),
            small_spec(4),
            vec![Stage::zeros(4, 5)],
            Pose(vec![0.0; 4]),
        );
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                stages: 0,
                ..Default::default()
            },
            TrainConfig {
                n_aug: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn clip_bounds_norm() {
        let mut v = vec![3.0, 4.0];
        clip_block(&mut v, 1.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let mut w = vec![3.0, 4.0];
        clip_block(&mut w, f64::INFINITY);
        assert_eq!(w, vec![3.0, 4.0]);
    }

    #[test]
    fn starts_follow_spread() {
        let pose = sim_pose();
        let mean = [10.0, 10.0, 1.0, 0.0];
        let none = initial_poses(&pose, &mean, &[20.0, 30.0], 3, 0.0, 1);
        assert!(none.iter().all(|p| p.0 == mean));
        let some = initial_poses(&pose, &mean, &[20.0, 30.0], 3, 1.0, 1);
        assert_eq!(some.len(), 6);
        for (i, p) in some.iter().enumerate() {
            let nc = if i < 3 { 20.0 } else { 30.0 };
            assert!((p[0] - 10.0).abs() <= 0.15 * nc && (p[1] - 10.0).abs() <= 0.15 * nc);
            assert!((p[2] - 1.0).abs() <= 0.15 && p[3].abs() <= 0.2);
        }
        assert_eq!(some, initial_poses(&pose, &mean, &[20.0, 30.0], 3, 1.0, 1));
    }

    fn single_sample_dataset(image: Image, truth: Vec<f64>) -> Dataset {
        let pose = sim_pose();
        Dataset {
            pose,
            samples: vec![Sample {
                image,
                norm_const: pose.default_norm_const(&truth).unwrap(),
                p_true: Pose(truth),
            }],
            name: "one".into(),
        }
    }

    #[test]
    fn greedy_with_nothing_to_correct() {
        let ds = single_sample_dataset(constant(0.5), vec![8.0, 8.0, 1.0, 0.0]);
        let cfg = TrainConfig {
            stages: 3,
            n_aug: 1,
            init_spread: 0.0,
            features: FeatureConfig {
                num_points: 6,
                blur_sigma: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = train_greedy(&ds, &cfg).unwrap();
        assert_eq!(model.mean_pose.0, vec![8.0, 8.0, 1.0, 0.0]);
        for s in &model.stages {
            assert!(s.weights.frobenius_sq().sqrt() <= 1e-8);
            assert!(s.bias.iter().all(|b| b.abs() <= 1e-8));
        }
    }

    #[test]
    fn lr_zero_leaves_model_untouched() {
        let ds = single_sample_dataset(
            Image::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap(),
            vec![8.0, 8.0, 1.0, 0.0],
        );
        let cfg = TrainConfig {
            stages: 2,
            n_aug: 2,
            epochs: 3,
            lr: 0.0,
            features: FeatureConfig {
                num_points: 6,
                blur_sigma: 1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = train_greedy(&ds, &cfg).unwrap();
        let out = finetune_bp(&model, &ds, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.history.len(), 3);
        assert!(out.history.iter().all(|&h| h == out.initial_loss));
    }

    #[test]
    fn bias_only_problem_converges() {
        // Zero image ⇒ zero features ⇒ weights get no gradient and the loss is
        // a quadratic in the bias with optimum p_true − p0.
        let truth = vec![9.0, 6.5, 1.2, 0.3];
        let ds = single_sample_dataset(constant(0.0), truth.clone());
        let spec = FeatureSpec {
            ref_points: vec![RefPoint::new(0.0, 0.0), RefPoint::new(0.5, -0.5)],
            pairs: vec![],
            mode: FeatureMode::Raw,
            blur_sigma: 0.0,
        };
        let model =
            CascadeModel::identity(sim_pose(), spec, 1, Pose(vec![8.0, 8.0, 1.0, 0.0])).unwrap();
        let cfg = TrainConfig {
            n_aug: 1,
            init_spread: 0.0,
            epochs: 200,
            batch_size: 1,
            lr: 0.5,
            momentum: 0.0,
            lr_decay: 1.0,
            grad_clip: f64::INFINITY,
            ..Default::default()
        };
        let out = finetune_bp(&model, &ds, &cfg).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(*out.history.last().unwrap() <= 1e-6);
        let b = &out.model.stages[0].bias;
        for (bi, (t, p0)) in b.iter().zip(truth.iter().zip(&[8.0, 8.0, 1.0, 0.0])) {
            assert!((bi - (t - p0)).abs() < 1e-3);
        }
        assert!(out.model.stages[0]
            .weights
            .as_slice()
            .iter()
            .all(|&w| w == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = single_sample_dataset(
            Image::from_fn(16, 16, |x, y| (x + y) as f64).unwrap(),
            vec![8.0, 8.0, 1.0, 0.0],
        );
        let mut model =
            CascadeModel::identity(sim_pose(), small_spec(4), 2, Pose(vec![8.0, 8.0, 1.0, 0.0]))
                .unwrap();
        model.stages[0].weights = Mat::from_fn(4, 4, |_, _| 1e300);
        model.stages[1].weights = Mat::from_fn(4, 4, |_, _| 1e300);
        let cfg = TrainConfig {
            n_aug: 1,
            init_spread: 0.0,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            finetune_bp(&model, &ds, &cfg),
            Err(Error::Divergence { .. })
        ));
    }
}
