//! Deterministic synthetic datasets.
//!
//! * Gaussian classes: class means live in a signal subspace while a
//!   class-independent nuisance subspace carries larger noise. The gap `g`
//!   rotates meta-validation and meta-test data by angle `g * max_angle` in
//!   fixed random (signal, nuisance) coordinate planes and shifts them by
//!   `g * shift` along a fixed random direction, so at larger `g` target
//!   classes differ along directions the source classes never used.
//! * Attribute switch: every instance has one class per attribute; split
//!   roles label instances by different attributes.
//! * Continuous pose: observations are a fixed nonlinear map of a latent
//!   pose and nuisance factors; labels are the poses.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{DatasetSplit, Label};
use crate::rng::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

fn normal(r: &mut Stream) -> f64 {
    StandardNormal.sample(r)
}

fn unit_vector(r: &mut Stream, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payload {
    /// Raw latent vectors of `signal_dim + nuisance_dim` features.
    Vector,
    /// Latents rendered as colored blob patterns on `3 x size x size` images.
    Image { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSpec {
    /// Classes of the meta-train, meta-validation and meta-test splits.
    pub classes: [usize; 3],
    pub per_class: usize,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    /// Noise standard deviation along signal coordinates.
    pub stddev: f64,
    /// Noise standard deviation along nuisance coordinates.
    pub nuisance_stddev: f64,
    /// Expected distance of a class mean from the origin.
    pub separation: f64,
    pub gap: f64,
    /// Rotation angle at `gap = 1`, in radians.
    pub max_angle: f64,
    /// Mean shift at `gap = 1`.
    pub shift: f64,
    pub payload: Payload,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            classes: [32, 8, 10],
            per_class: 40,
            signal_dim: 16,
            nuisance_dim: 16,
            stddev: 0.5,
            nuisance_stddev: 1.0,
            separation: 3.0,
            gap: 0.0,
            max_angle: std::f64::consts::FRAC_PI_2,
            shift: 1.0,
            payload: Payload::Vector,
            seed: 0,
        }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if !(self.stddev > 0.0) || !(self.nuisance_stddev > 0.0) || !(self.separation > 0.0) {
            return bad("stddevs and separation must be positive");
        }
        if !(0.0..=1.0).contains(&self.gap) {
            return bad("gap must lie in [0, 1]");
        }
        if self.signal_dim == 0 || self.per_class == 0 || self.classes.contains(&0) {
            return bad("dimensions and counts must be positive");
        }
        if let Payload::Image { size } = self.payload {
            if size < 4 {
                return bad("images must be at least 4x4");
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.signal_dim + self.nuisance_dim
    }

    pub fn item_shape(&self) -> Vec<usize> {
        match self.payload {
            Payload::Vector => vec![self.latent_dim()],
            Payload::Image { size } => vec![3, size, size],
        }
    }
}

/// Fixed random domain transform: Givens rotations in (signal, nuisance) planes plus a shift.
struct GapTransform {
    planes: Vec<(usize, usize)>,
    angle: f64,
    offset: Vec<f64>,
}

impl GapTransform {
    fn new(spec: &GaussianSpec, r: &mut Stream) -> Self {
        let mut nuisance: Vec<usize> = (spec.signal_dim..spec.latent_dim()).collect();
        let n = nuisance.len();
        rng::partial_shuffle(r, &mut nuisance, n);
        let planes = (0..spec.signal_dim).zip(nuisance).collect();
        let direction = unit_vector(r, spec.latent_dim());
        Self {
            planes,
            angle: spec.gap * spec.max_angle,
            offset: direction.iter().map(|d| d * spec.gap * spec.shift).collect(),
        }
    }

    fn apply(&self, v: &mut [f64]) {
        let (s, c) = self.angle.sin_cos();
        for &(i, j) in &self.planes {
            let (a, b) = (v[i], v[j]);
            v[i] = c * a - s * b;
            v[j] = s * a + c * b;
        }
        for (x, o) in v.iter_mut().zip(&self.offset) {
            *x += o;
        }
    }
}

/// Renders latents as images through fixed smooth color blobs, one per latent coordinate.
struct BlobRenderer {
    size: usize,
    /// Per latent coordinate: an image-sized pattern.
    bases: Vec<Vec<f64>>,
}

impl BlobRenderer {
    fn new(latent_dim: usize, size: usize, r: &mut Stream) -> Self {
        let s = size as f64;
        let bases = (0..latent_dim)
            .map(|_| {
                let cx = rng::below(r, size as u64) as f64;
                let cy = rng::below(r, size as u64) as f64;
                let radius = s * (0.1 + 0.15 * (rng::below(r, 1000) as f64 / 1000.0));
                let color: Vec<f64> = (0..3).map(|_| normal(r)).collect();
                let mut pattern = vec![0.0; 3 * size * size];
                for ch in 0..3 {
                    for y in 0..size {
                        for x in 0..size {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            pattern[(ch * size + y) * size + x] = color[ch] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
                pattern
            })
            .collect();
        Self { size, bases }
    }

    fn render(&self, latent: &[f64], out: &mut Vec<f32>) {
        let n = 3 * self.size * self.size;
        let scale = 1.0 / (latent.len() as f64).sqrt();
        for p in 0..n {
            let a: f64 = latent.iter().zip(&self.bases).map(|(z, b)| z * b[p]).sum();
            out.push((1.0 / (1.0 + (-a * scale).exp())) as f32);
        }
    }
}

/// Meta-train, meta-validation and meta-test splits with disjoint classes.
pub fn gen_gaussian(spec: &GaussianSpec) -> Result<[DatasetSplit; 3], SynthError> {
    spec.validate()?;
    let mut family = rng::stream(rng::substream(spec.seed, "family"));
    let transform = GapTransform::new(spec, &mut family);
    let renderer = match spec.payload {
        Payload::Image { size } => Some(BlobRenderer::new(spec.latent_dim(), size, &mut family)),
        Payload::Vector => None,
    };
    let names = ["meta_train", "meta_val", "meta_test"];
    let mut next_class = 0;
    let mut next_id = 0u64;
    let splits = std::array::from_fn(|s| {
        let mut r = rng::stream(rng::substream(spec.seed, names[s]));
        let mut split = DatasetSplit {
            name: names[s].into(),
            item_shape: spec.item_shape(),
            ids: Vec::new(),
            labels: Vec::new(),
            payload: Vec::new(),
            joint_dim: 1,
        };
        let mean_scale = spec.separation / (spec.signal_dim as f64).sqrt();
        for _ in 0..spec.classes[s] {
            let mean: Vec<f64> = (0..spec.signal_dim).map(|_| normal(&mut r) * mean_scale).collect();
            for _ in 0..spec.per_class {
                let mut v: Vec<f64> = (0..spec.latent_dim())
                    .map(|d| match mean.get(d) {
                        Some(m) => m + spec.stddev * normal(&mut r),
                        None => spec.nuisance_stddev * normal(&mut r),
                    })
                    .collect();
                if s > 0 {
                    transform.apply(&mut v);
                }
                match &renderer {
                    Some(rd) => rd.render(&v, &mut split.payload),
                    None => split.payload.extend(v.iter().map(|&x| x as f32)),
                }
                split.ids.push(next_id);
                split.labels.push(Label::Class(next_class));
                next_id += 1;
            }
            next_class += 1;
        }
        split
    });
    Ok(splits)
}

/// Mean payload of a split.
pub fn feature_mean(split: &DatasetSplit) -> Vec<f64> {
    let n = split.item_len();
    let mut m = vec![0.0; n];
    for i in 0..split.len() {
        for (a, x) in m.iter_mut().zip(split.item(i)) {
            *a += *x as f64;
        }
    }
    m.iter().map(|a| a / split.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeSwitchSpec {
    pub attributes: usize,
    pub classes_per_attribute: usize,
    pub factor_dim: usize,
    /// Instances labeled by each attribute.
    pub per_attribute: usize,
    pub stddev: f64,
    /// Split role per attribute: 0 meta-train, 1 meta-validation, 2 meta-test.
    pub roles: Vec<u8>,
    pub seed: u64,
}

impl Default for AttributeSwitchSpec {
    fn default() -> Self {
        Self {
            attributes: 6,
            classes_per_attribute: 6,
            factor_dim: 4,
            per_attribute: 120,
            stddev: 0.3,
            roles: vec![0, 0, 0, 1, 2, 2],
            seed: 0,
        }
    }
}

/// Instances with one class per attribute, and one split per role.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSwitchData {
    /// `labels[i][a]` is instance `i`'s class under attribute `a`.
    pub labels: Vec<Vec<usize>>,
    /// Attribute that labels instance `i` in its split.
    pub labeled_by: Vec<usize>,
    pub splits: [DatasetSplit; 3],
}

impl AttributeSwitchData {
    /// Instance pairs positive under attribute `a` and negative under `b`.
    pub fn switching_pairs(&self, a: usize, b: usize) -> usize {
        let n = self.labels.len();
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                let (li, lj) = (&self.labels[i], &self.labels[j]);
                if li[a] == lj[a] && li[b] != lj[b] {
                    count += 1;
                }
            }
        }
        count
    }
}

pub fn gen_attribute_switch(spec: &AttributeSwitchSpec) -> Result<AttributeSwitchData, SynthError> {
    let bad = |m: String| Err(SynthError::Spec(m));
    if spec.attributes < 2 || spec.classes_per_attribute < 2 || spec.factor_dim == 0 {
        return bad("need at least 2 attributes with at least 2 classes".into());
    }
    if spec.roles.len() != spec.attributes || spec.roles.iter().any(|&r| r > 2) {
        return bad(format!("roles must assign each of {} attributes to 0, 1 or 2", spec.attributes));
    }
    for role in 0..3u8 {
        if !spec.roles.contains(&role) {
            return bad(format!("no attribute has role {role}"));
        }
    }
    let mut r = rng::stream(rng::substream(spec.seed, "attributes"));
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.attributes)
        .map(|_| {
            (0..spec.classes_per_attribute)
                .map(|_| (0..spec.factor_dim).map(|_| normal(&mut r)).collect())
                .collect()
        })
        .collect();
    let dim = spec.attributes * spec.factor_dim;
    let names = ["meta_train", "meta_val", "meta_test"];
    let mut splits: [DatasetSplit; 3] = std::array::from_fn(|s| DatasetSplit {
        name: names[s].into(),
        item_shape: vec![dim],
        ids: Vec::new(),
        labels: Vec::new(),
        payload: Vec::new(),
        joint_dim: 1,
    });
    let mut labels = Vec::new();
    let mut labeled_by = Vec::new();
    for a in 0..spec.attributes {
        let split = &mut splits[spec.roles[a] as usize];
        for _ in 0..spec.per_attribute {
            let classes: Vec<usize> = (0..spec.attributes)
                .map(|_| rng::below(&mut r, spec.classes_per_attribute as u64) as usize)
                .collect();
            for (b, &c) in classes.iter().enumerate() {
                for &p in &prototypes[b][c] {
                    let v = p + spec.stddev * normal(&mut r);
                    split.payload.push(v as f32);
                }
            }
            split.ids.push(labels.len() as u64);
            split.labels.push(Label::Class(a * spec.classes_per_attribute + classes[a]));
            labels.push(classes);
            labeled_by.push(a);
        }
    }
    let data = AttributeSwitchData {
        labels,
        labeled_by,
        splits,
    };
    let train = spec.roles.iter().position(|&x| x == 0).expect("checked");
    let test = spec.roles.iter().position(|&x| x == 2).expect("checked");
    if data.switching_pairs(train, test) == 0 {
        return bad("no pair switches similarity between a meta-train and a meta-test attribute".into());
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousPoseSpec {
    /// Instances of the source, validation and target splits.
    pub instances: [usize; 3],
    pub joints: usize,
    pub joint_dim: usize,
    pub nuisance_dim: usize,
    pub observation_dim: usize,
    /// Nuisance factor scale of the source split and of the validation and target splits.
    pub nuisance_scale: [f64; 2],
    pub noise: f64,
    pub seed: u64,
}

impl Default for ContinuousPoseSpec {
    fn default() -> Self {
        Self {
            instances: [600, 200, 400],
            joints: 4,
            joint_dim: 2,
            nuisance_dim: 8,
            observation_dim: 32,
            nuisance_scale: [0.3, 1.0],
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Source (pre-training), validation and target splits with pose labels.
pub fn gen_continuous(spec: &ContinuousPoseSpec) -> Result<[DatasetSplit; 3], SynthError> {
    if spec.joints == 0 || spec.joint_dim == 0 || spec.observation_dim == 0 || spec.instances.contains(&0) {
        return Err(SynthError::Spec("dimensions and counts must be positive".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(SynthError::Spec("noise must be non-negative".into()));
    }
    let pose_dim = spec.joints * spec.joint_dim;
    let latent = pose_dim + spec.nuisance_dim;
    let mut family = rng::stream(rng::substream(spec.seed, "family"));
    let scale = 1.0 / (latent as f64).sqrt();
    let mixing: Vec<f64> = (0..spec.observation_dim * latent)
        .map(|_| normal(&mut family) * 2.0 * scale)
        .collect();
    let names = ["source", "validation", "target"];
    let mut next_id = 0u64;
    let splits = std::array::from_fn(|s| {
        let mut r = rng::stream(rng::substream(spec.seed, names[s]));
        let mut split = DatasetSplit {
            name: names[s].into(),
            item_shape: vec![spec.observation_dim],
            ids: Vec::new(),
            labels: Vec::new(),
            payload: Vec::new(),
            joint_dim: spec.joint_dim,
        };
        for _ in 0..spec.instances[s] {
            let pose: Vec<f64> = (0..pose_dim).map(|_| normal(&mut r)).collect();
            let z: Vec<f64> = pose
                .iter()
                .copied()
                .chain((0..spec.nuisance_dim).map(|_| spec.nuisance_scale[s.min(1)] * normal(&mut r)))
                .collect();
            for o in 0..spec.observation_dim {
                let a: f64 = mixing[o * latent..(o + 1) * latent].iter().zip(&z).map(|(m, v)| m * v).sum();
                split.payload.push((a.tanh() + spec.noise * normal(&mut r)) as f32);
            }
            split.labels.push(Label::Pose(pose.iter().map(|&p| p as f32).collect()));
            split.ids.push(next_id);
            next_id += 1;
        }
        split
    });
    Ok(splits)
}
