//! Datasets: synthetic generation, the on-disk directory layout, and the
//! binary model format.
//!
//! # Dataset directory
//!
//! ```text
//! manifest.txt
//! img_00000.pgm
//! img_00001.pgm
//! ...
//! ```
//!
//! `manifest.txt` holds a header line of `key=value` tokens describing the
//! pose kind and dimensions, a line with the sample count, then one line per
//! sample: `<image file> <norm_const> <pose values...>`. Reals are written
//! with 17 significant digits so they survive the round trip exactly.
//!
//! # Model file
//!
//! Little-endian throughout:
//!
//! | field | type |
//! |---|---|
//! | magic `CBP1` | 4 bytes |
//! | version (1) | u32 |
//! | kind (0 similarity, 1 landmark) | u8 |
//! | d, K₀, K, T, L | u32 × 5 |
//! | reference scale, blur sigma | f64 × 2 |
//! | mode (0 raw, 1 diff) | u8 |
//! | reference points `(u, v)` | f64 × 2K₀ |
//! | difference pairs (diff mode only) | u32 × 2K |
//! | mean pose | f64 × d |
//! | per stage: W row-major, then b | f64 × (dK + d) |
//!
//! Landmark anchors are not stored: reference point `k` is attached to
//! landmark `k mod L`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cascade::{CascadeModel, Stage, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureSpec};
use crate::numerics::Mat;
use crate::pose::{Pose, PoseKind, PoseModel, RefPoint};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Raw, unblurred observation.
    pub image: Image,
    pub p_true: Pose,
    pub norm_const: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pose: PoseModel,
    pub samples: Vec<Sample>,
    pub name: String,
}

impl Dataset {
    /// Checks that the dataset is nonempty and homogeneous.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Config(format!("dataset {:?} is empty", self.name)))?;
        let (w, h) = (first.image.width(), first.image.height());
        for (i, s) in self.samples.iter().enumerate() {
            self.pose.check_pose(&s.p_true)?;
            if !(s.norm_const > 0.0) {
                return Err(Error::Config(format!(
                    "sample {i} has non-positive norm constant {}",
                    s.norm_const
                )));
            }
            if s.image.width() != w || s.image.height() != h {
                return Err(Error::dim(format!(
                    "sample {i} is {}x{}, expected {w}x{h}",
                    s.image.width(),
                    s.image.height()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of the synthetic blob task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    /// Landmarks in the template.
    pub landmarks: usize,
    pub blob_sigma: f64,
    pub noise_sigma: f64,
    /// Half-width of the uniform translation range around the image centre.
    pub translation_range: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Half-width of the uniform angle range, radians.
    pub angle_range: f64,
    /// Pixel half-extent of the template at unit scale.
    pub object_scale: f64,
    /// Seed for the template layout; shared between splits.
    pub template_seed: u64,
    /// Seed for poses and noise of this split.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            width: 64,
            height: 64,
            landmarks: 5,
            blob_sigma: 1.5,
            noise_sigma: 0.02,
            translation_range: 12.0,
            scale_min: 0.8,
            scale_max: 1.25,
            angle_range: 0.4,
            object_scale: 16.0,
            template_seed: 7,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 1 {
            return bad("synthetic sample count must be at least 1".into());
        }
        if self.width < 2 || self.height < 2 {
            return bad(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            ));
        }
        if self.landmarks < 1 {
            return bad("template needs at least one landmark".into());
        }
        if !(self.blob_sigma > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("blob sigma must be > 0 and noise sigma >= 0".into());
        }
        if !(self.translation_range >= 0.0) || !(self.angle_range >= 0.0) {
            return bad("translation and angle ranges must be >= 0".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad(format!(
                "scale range [{}, {}] must be nonempty and positive",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.object_scale > 0.0) {
            return bad("object scale must be > 0".into());
        }
        Ok(())
    }

    /// Image centre in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Template landmarks in the reference square, at least 0.5 apart.
    pub fn template(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(self.landmarks);
        let mut min_sep: f64 = 0.5;
        let mut attempts = 0;
        while pts.len() < self.landmarks {
            let c = (rng.random_range(-0.9..=0.9), rng.random_range(-0.9..=0.9));
            if pts
                .iter()
                .all(|p: &(f64, f64)| (p.0 - c.0).hypot(p.1 - c.1) >= min_sep)
            {
                pts.push(c);
            }
            attempts += 1;
            if attempts % 10_000 == 0 {
                // too many landmarks for the separation; relax it
                min_sep *= 0.8;
            }
        }
        pts
    }
}

/// Renders a dataset of Gaussian-blob constellations under random
/// similarity poses.
pub fn gen_synthetic(cfg: &SynthConfig, pose: PoseModel) -> Result<Dataset> {
    cfg.validate()?;
    if let PoseKind::Landmark { count } = pose.kind {
        if count != cfg.landmarks {
            return Err(Error::Config(format!(
                "landmark pose with {count} points but template has {}",
                cfg.landmarks
            )));
        }
    }
    let template = cfg.template();
    let (cx, cy) = cfg.center();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let render_pose = PoseModel::new(PoseKind::Similarity, cfg.object_scale)?;
    let tr = cfg.translation_range;

    let mut samples = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let sim = [
            cx + rng.random_range(-tr..=tr),
            cy + rng.random_range(-tr..=tr),
            rng.random_range(cfg.scale_min..=cfg.scale_max),
            rng.random_range(-cfg.angle_range..=cfg.angle_range),
        ];
        let centers: Vec<(f64, f64)> = template
            .iter()
            .map(|&(u, v)| render_pose.warp_unchecked(&sim, &RefPoint::new(u, v)))
            .collect();
        let inv = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
        let mut image = Image::from_fn(cfg.width, cfg.height, |x, y| {
            let v: f64 = centers
                .iter()
                .map(|&(bx, by)| {
                    let dx = x as f64 - bx;
                    let dy = y as f64 - by;
                    (-(dx * dx + dy * dy) * inv).exp()
                })
                .sum();
            v.clamp(0.0, 1.0)
        })?;
        if cfg.noise_sigma > 0.0 {
            for px in image.pixels_mut() {
                *px = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let p_true = match pose.kind {
            PoseKind::Similarity => Pose(sim.to_vec()),
            PoseKind::Landmark { .. } => Pose(centers.iter().flat_map(|&(x, y)| [x, y]).collect()),
        };
        let norm_const = pose.default_norm_const(&p_true)?;
        samples.push(Sample {
            image,
            p_true,
            norm_const,
        });
    }
    Ok(Dataset {
        pose,
        samples,
        name: format!("synthetic-{}", cfg.seed),
    })
}

pub const MANIFEST: &str = "manifest.txt";

pub fn image_file_name(i: usize) -> String {
    format!("img_{i:05}.pgm")
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::Config("refusing to save an empty dataset".into()))?;
    let mut manifest = format!(
        "kind={} d={} landmarks={} reference_scale={} width={} height={} name={}\n{}\n",
        ds.pose.kind.name(),
        ds.pose.dim(),
        ds.pose.kind.landmark_count(),
        fmt_real(ds.pose.reference_scale),
        first.image.width(),
        first.image.height(),
        ds.name.replace(char::is_whitespace, "_"),
        ds.samples.len()
    );
    for (i, s) in ds.samples.iter().enumerate() {
        let name = image_file_name(i);
        s.image.write_pgm(dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push(' ');
        manifest.push_str(&fmt_real(s.norm_const));
        for v in s.p_true.iter() {
            manifest.push(' ');
            manifest.push_str(&fmt_real(*v));
        }
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !dir.is_dir() {
        return Err(Error::format(dir, "dataset directory does not exist"));
    }
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::format(&manifest_path, "missing manifest"))
        }
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let fail = |line: usize, m: String| Error::format(&manifest_path, format!("line {line}: {m}"));
    let mut lines = text.lines();

    let header = lines
        .next()
        .ok_or_else(|| fail(1, "empty manifest".into()))?;
    let mut kind = None;
    let mut d = None;
    let mut landmarks = None;
    let mut rho = None;
    let mut width = None;
    let mut height = None;
    let mut name = String::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| fail(1, format!("expected key=value, found {tok:?}")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| fail(1, format!("bad {k} {v:?}")))
        };
        match k {
            "kind" => kind = Some(v.to_string()),
            "d" => d = Some(num(v)?),
            "landmarks" => landmarks = Some(num(v)?),
            "reference_scale" => {
                rho = Some(
                    v.parse::<f64>()
                        .map_err(|_| fail(1, format!("bad reference_scale {v:?}")))?,
                )
            }
            "width" => width = Some(num(v)?),
            "height" => height = Some(num(v)?),
            "name" => name = v.to_string(),
            _ => return Err(fail(1, format!("unknown header key {k:?}"))),
        }
    }
    let missing = |k: &str| fail(1, format!("header lacks {k}"));
    let kind = match kind.ok_or_else(|| missing("kind"))?.as_str() {
        "similarity" => PoseKind::Similarity,
        "landmark" => PoseKind::Landmark {
            count: landmarks.ok_or_else(|| missing("landmarks"))?,
        },
        other => return Err(fail(1, format!("unknown pose kind {other:?}"))),
    };
    let pose = PoseModel::new(kind, rho.ok_or_else(|| missing("reference_scale"))?)
        .map_err(|e| fail(1, e.to_string()))?;
    let d = d.ok_or_else(|| missing("d"))?;
    if d != pose.dim() {
        return Err(fail(
            1,
            format!("{} pose has d={}, header says {d}", kind.name(), pose.dim()),
        ));
    }
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;

    let n: usize = lines
        .next()
        .ok_or_else(|| fail(2, "missing sample count".into()))?
        .trim()
        .parse()
        .map_err(|_| fail(2, "bad sample count".into()))?;

    let mut samples = Vec::with_capacity(n);
    let mut referenced = std::collections::HashSet::new();
    for i in 0..n {
        let lineno = i + 3;
        let line = lines.next().ok_or_else(|| {
            fail(
                lineno,
                format!("manifest declares {n} samples but lists {i}"),
            )
        })?;
        let mut toks = line.split_whitespace();
        let file = toks
            .next()
            .ok_or_else(|| fail(lineno, "empty sample line".into()))?;
        let reals = toks
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| fail(lineno, format!("bad number {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if reals.len() != d + 1 {
            return Err(fail(
                lineno,
                format!(
                    "expected norm constant and {d} pose values, found {} numbers",
                    reals.len()
                ),
            ));
        }
        let img_path = dir.join(file);
        if !img_path.is_file() {
            return Err(Error::format(
                &img_path,
                "image file listed in manifest is missing",
            ));
        }
        let image = Image::read_pgm(&img_path)?;
        if image.width() != width || image.height() != height {
            return Err(Error::format(
                &img_path,
                format!(
                    "image is {}x{}, manifest says {width}x{height}",
                    image.width(),
                    image.height()
                ),
            ));
        }
        if !(reals[0] > 0.0) {
            return Err(fail(
                lineno,
                format!("norm constant must be > 0, got {}", reals[0]),
            ));
        }
        referenced.insert(file.to_string());
        samples.push(Sample {
            image,
            norm_const: reals[0],
            p_true: Pose(reals[1..].to_vec()),
        });
    }
    if let Some((j, extra)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(fail(
            n + 3 + j,
            format!("unexpected line after {n} samples: {extra:?}"),
        ));
    }
    let mut extras: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "pgm")
                && !p
                    .file_name()
                    .and_then(|f| f.to_str())
                    .is_some_and(|f| referenced.contains(f))
        })
        .collect();
    extras.sort();
    if let Some(extra) = extras.first() {
        return Err(Error::format(extra, "image file not listed in manifest"));
    }
    Ok(Dataset {
        pose,
        samples,
        name,
    })
}

const MAGIC: &[u8; 4] = b"CBP1";

/// Serializes a model into the binary format described in the module docs.
pub fn encode_model(m: &CascadeModel) -> Result<Vec<u8>> {
    m.validate()?;
    let landmarks = m.pose.kind.landmark_count();
    if landmarks > 0 {
        if let Some((k, r)) = m
            .spec
            .ref_points
            .iter()
            .enumerate()
            .find(|(k, r)| r.anchor != k % landmarks)
        {
            return Err(Error::Config(format!(
                "reference point {k} anchored to landmark {} but the model format requires {}",
                r.anchor,
                k % landmarks
            )));
        }
    }
    let d = m.dim();
    let k = m.num_features();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&m.version.to_le_bytes());
    out.push(match m.pose.kind {
        PoseKind::Similarity => 0,
        PoseKind::Landmark { .. } => 1,
    });
    for v in [d, m.spec.ref_points.len(), k, m.num_stages(), landmarks] {
        out.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    out.extend_from_slice(&m.pose.reference_scale.to_le_bytes());
    out.extend_from_slice(&m.spec.blur_sigma.to_le_bytes());
    out.push(match m.spec.mode {
        FeatureMode::Raw => 0,
        FeatureMode::Diff => 1,
    });
    for r in &m.spec.ref_points {
        out.extend_from_slice(&r.u.to_le_bytes());
        out.extend_from_slice(&r.v.to_le_bytes());
    }
    if m.spec.mode == FeatureMode::Diff {
        for &(i, j) in &m.spec.pairs {
            out.extend_from_slice(&u32_of(i)?.to_le_bytes());
            out.extend_from_slice(&u32_of(j)?.to_le_bytes());
        }
    }
    for v in m.mean_pose.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &m.stages {
        for v in s.weights.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the model format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: expected at least {end} bytes, file has {}",
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

/// Parses the binary model format. `path` only labels errors.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<CascadeModel> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        path,
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind_tag = r.u8("kind")?;
    let d = r.u32("d")? as usize;
    let k0 = r.u32("K0")? as usize;
    let k = r.u32("K")? as usize;
    let t = r.u32("T")? as usize;
    let landmarks = r.u32("L")? as usize;
    let kind = match kind_tag {
        0 => PoseKind::Similarity,
        1 => PoseKind::Landmark { count: landmarks },
        other => return Err(bad(format!("unknown kind tag {other}"))),
    };
    if kind == PoseKind::Similarity && landmarks != 0 {
        return Err(bad(format!("similarity model with L={landmarks}")));
    }
    if kind.dim() != d {
        return Err(bad(format!(
            "{} model has d={}, header says {d}",
            kind.name(),
            kind.dim()
        )));
    }
    let rho = r.f64("reference scale")?;
    let blur_sigma = r.f64("blur sigma")?;
    let mode = match r.u8("mode")? {
        0 => FeatureMode::Raw,
        1 => FeatureMode::Diff,
        other => return Err(bad(format!("unknown feature mode tag {other}"))),
    };
    if mode == FeatureMode::Raw && k != k0 {
        return Err(bad(format!(
            "raw features need K = K0, header has K={k}, K0={k0}"
        )));
    }
    // Check the full length up front so truncation is reported in one place.
    let pair_bytes = if mode == FeatureMode::Diff { 8 * k } else { 0 };
    let expected = r.pos + 16 * k0 + pair_bytes + 8 * d + t * 8 * (d * k + d);
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for d={d}, K0={k0}, K={k}, T={t}, file has {}",
            bytes.len()
        )));
    }
    let lm = landmarks.max(1);
    let mut ref_points = Vec::with_capacity(k0);
    for i in 0..k0 {
        let u = r.f64("reference points")?;
        let v = r.f64("reference points")?;
        ref_points.push(RefPoint::anchored(u, v, i % lm));
    }
    let mut pairs = Vec::new();
    if mode == FeatureMode::Diff {
        for _ in 0..k {
            let i = r.u32("pairs")? as usize;
            let j = r.u32("pairs")? as usize;
            pairs.push((i, j));
        }
    }
    let mean_pose = Pose(r.f64s(d, "mean pose")?);
    let mut stages = Vec::with_capacity(t);
    for s in 0..t {
        let label = format!("stage {}", s + 1);
        let w = r.f64s(d * k, &label)?;
        let b = r.f64s(d, &label)?;
        stages.push(Stage {
            weights: Mat::new(d, k, w).map_err(|e| bad(format!("{label}: {e}")))?,
            bias: b,
        });
    }
    let pose = PoseModel::new(kind, rho).map_err(|e| bad(e.to_string()))?;
    let spec = FeatureSpec {
        ref_points,
        pairs,
        mode,
        blur_sigma,
    };
    let model = CascadeModel {
        pose,
        spec,
        stages,
        mean_pose,
        version,
    };
    model.validate().map_err(|e| bad(e.to_string()))?;
    Ok(model)
}

pub fn save_model(m: &CascadeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CascadeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "model file does not exist"),
        _ => Error::io(path, e),
    })?;
    decode_model(&bytes, path)
}
