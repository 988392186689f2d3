//! Synthetic multi-domain Gaussian-cloud problems, the `#lacmfer-v1` text
//! format, and deterministic batching.
//!
//! A problem has `N` source domains (ids `0..N`) and one target domain (id
//! `N`). Class means sit evenly on a circle of radius 5 in the first two
//! coordinates. Each domain applies its own rotation, scale and translation,
//! whose magnitudes grow linearly with `shift_strength`; the target domain
//! additionally pulls configured class pairs toward their midpoint.
//!
//! Every random quantity is drawn in a fixed order from one seeded stream,
//! so the same seed gives the same noise for every `shift_strength`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_MAGIC: &str = "#lacmfer-v1";
pub const FILE_EXTENSION: &str = "lacmfer";
const TEMPLATE_RADIUS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityPair {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
}

/// Data-generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_sources: usize,
    pub samples_per_class: usize,
    pub eval_samples_per_class: usize,
    pub shift_strength: f64,
    /// Overlap of the class pair (0, 1) in the target domain, used when
    /// `ambiguity_pairs` is empty.
    pub ambiguity: f64,
    pub ambiguity_pairs: Vec<AmbiguityPair>,
    /// Standard deviation of every class cloud before the domain transform.
    pub class_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            num_sources: 3,
            samples_per_class: 100,
            eval_samples_per_class: 100,
            shift_strength: 0.7,
            ambiguity: 0.5,
            ambiguity_pairs: Vec::new(),
            class_std: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::config("arch.num_classes", "must be at least 2"));
        }
        if self.num_sources == 0 {
            return Err(Error::config("data.num_sources", "must be at least 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("data.samples_per_class", "must be at least 1"));
        }
        if self.eval_samples_per_class == 0 {
            return Err(Error::config(
                "data.eval_samples_per_class",
                "must be at least 1",
            ));
        }
        for (field, v) in [
            ("data.shift_strength", self.shift_strength),
            ("data.ambiguity", self.ambiguity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.class_std.is_finite() && self.class_std > 0.0) {
            return Err(Error::config("data.class_std", "must be positive"));
        }
        for p in &self.ambiguity_pairs {
            if p.a >= num_classes || p.b >= num_classes || p.a == p.b {
                return Err(Error::config(
                    "data.ambiguity_pairs",
                    format!("invalid class pair ({}, {})", p.a, p.b),
                ));
            }
            if !(0.0..=1.0).contains(&p.overlap) {
                return Err(Error::config("data.ambiguity_pairs", "overlap must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn resolved_pairs(&self) -> Vec<AmbiguityPair> {
        if !self.ambiguity_pairs.is_empty() {
            self.ambiguity_pairs.clone()
        } else if self.ambiguity > 0.0 {
            vec![AmbiguityPair {
                a: 0,
                b: 1,
                overlap: self.ambiguity,
            }]
        } else {
            Vec::new()
        }
    }
}

/// Generative description of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub role: Role,
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    /// Class means before the domain transform (ambiguity already applied).
    pub class_means: Vec<Vec<f64>>,
    pub class_std: f64,
    pub ambiguity_pairs: Vec<AmbiguityPair>,
}

impl DomainSpec {
    /// Applies rotation (first two coordinates), scale and translation.
    pub fn transform(&self, point: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = point.to_vec();
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (point[0], point[1]);
        out[0] = c * x - s * y;
        out[1] = s * x + c * y;
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o = self.scale * *o + t;
        }
        out
    }

    pub fn transformed_means(&self) -> Vec<Vec<f64>> {
        self.class_means.iter().map(|m| self.transform(m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub features: Vec<f64>,
}

/// Samples of one domain and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub domain_id: usize,
    pub role: Role,
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// Labeled view handed to the trainer for source domains.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub domain_id: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Feature-only view; the only form in which target training data reaches the trainer.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    pub domain_id: usize,
    pub features: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.features.as_slice()).collect();
        if rows.is_empty() {
            return Tensor::zeros(&[0, self.input_dim]);
        }
        Tensor::from_rows(&rows).expect("rows share input_dim")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Labeled view; refused for target training data.
    pub fn labeled(&self) -> Result<LabeledSet> {
        if self.role == Role::Target && self.split == Split::Train {
            return Err(Error::config(
                "dataset",
                format!(
                    "labels of target training domain {} are not available",
                    self.domain_id
                ),
            ));
        }
        Ok(LabeledSet {
            domain_id: self.domain_id,
            features: self.features(),
            labels: self.labels(),
        })
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            domain_id: self.domain_id,
            features: self.features(),
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "domain{}_{}.{FILE_EXTENSION}",
            self.domain_id,
            self.split.name()
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{FORMAT_MAGIC} input_dim={} K={} domain={} role={} split={}\n",
            self.input_dim,
            self.num_classes,
            self.domain_id,
            self.role.name(),
            self.split.name()
        );
        for sample in &self.samples {
            write!(s, "{}", sample.label).unwrap();
            for v in &sample.features {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Dataset> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(FORMAT_MAGIC) {
            return Err(perr(1, format!("expected `{FORMAT_MAGIC}` header")));
        }
        let (mut input_dim, mut k, mut domain, mut role, mut split) = (None, None, None, None, None);
        for kv in fields {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| perr(1, format!("malformed header field `{kv}`")))?;
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| perr(1, format!("`{key}` must be a non-negative integer")))
            };
            match key {
                "input_dim" => input_dim = Some(int()?),
                "K" => k = Some(int()?),
                "domain" => domain = Some(int()?),
                "role" => {
                    role = Some(match value {
                        "source" => Role::Source,
                        "target" => Role::Target,
                        _ => return Err(perr(1, format!("unknown role `{value}`"))),
                    })
                }
                "split" => {
                    split = Some(match value {
                        "train" => Split::Train,
                        "eval" => Split::Eval,
                        _ => return Err(perr(1, format!("unknown split `{value}`"))),
                    })
                }
                _ => return Err(perr(1, format!("unknown header field `{key}`"))),
            }
        }
        let missing = |name: &str| perr(1, format!("header lacks `{name}`"));
        let input_dim = input_dim.ok_or_else(|| missing("input_dim"))?;
        let num_classes = k.ok_or_else(|| missing("K"))?;
        let domain_id = domain.ok_or_else(|| missing("domain"))?;
        let role = role.ok_or_else(|| missing("role"))?;
        let split = split.ok_or_else(|| missing("split"))?;
        if input_dim == 0 || num_classes < 2 {
            return Err(perr(1, "input_dim must be positive and K at least 2".into()));
        }

        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let label: usize = parts
                .next()
                .and_then(|l| l.trim().parse().ok())
                .ok_or_else(|| perr(lineno, "missing or invalid label".into()))?;
            if label >= num_classes {
                return Err(perr(lineno, format!("label {label} not below K={num_classes}")));
            }
            let features: Vec<f64> = parts
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(lineno, format!("bad feature value: {e}")))?;
            if features.len() != input_dim {
                return Err(perr(
                    lineno,
                    format!("expected {input_dim} features, found {}", features.len()),
                ));
            }
            if features.iter().any(|v| !v.is_finite()) {
                return Err(perr(lineno, "non-finite feature value".into()));
            }
            samples.push(Sample { label, features });
        }
        Ok(Dataset {
            input_dim,
            num_classes,
            domain_id,
            role,
            split,
            samples,
        })
    }
}

/// Specs plus a train and an eval dataset for every domain.
#[derive(Clone, Debug)]
pub struct Problem {
    pub specs: Vec<DomainSpec>,
    pub datasets: Vec<Dataset>,
}

impl Problem {
    pub fn dataset(&self, domain_id: usize, split: Split) -> Option<&Dataset> {
        self.datasets
            .iter()
            .find(|d| d.domain_id == domain_id && d.split == split)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        save_dir(&self.datasets, dir)
    }
}

pub fn save_dir(datasets: &[Dataset], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(datasets.len());
    for d in datasets {
        let path = dir.join(d.file_name());
        d.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads every `*.lacmfer` file of a directory, ordered by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Dataset>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FILE_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(
            "data",
            format!("no .{FILE_EXTENSION} files in {}", dir.display()),
        ));
    }
    paths.iter().map(|p| Dataset::load(p)).collect()
}

fn rotate_template(num_classes: usize, phase: f64, input_dim: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let angle = phase + std::f64::consts::TAU * k as f64 / num_classes as f64;
            let mut m = vec![0.0; input_dim];
            m[0] = TEMPLATE_RADIUS * angle.cos();
            m[1] = TEMPLATE_RADIUS * angle.sin();
            m
        })
        .collect()
}

/// Generates a full problem. Domain ids `0..num_sources` are sources, the
/// last id is the target.
pub fn generate(cfg: &DataConfig, input_dim: usize, num_classes: usize) -> Result<Problem> {
    cfg.validate(num_classes)?;
    if input_dim < 2 {
        return Err(Error::config("arch.input_dim", "generator needs at least 2 dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let template = rotate_template(num_classes, phase, input_dim);
    let pairs = cfg.resolved_pairs();
    let s = cfg.shift_strength;

    let num_domains = cfg.num_sources + 1;
    let mut specs = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let u_rot: f64 = rng.random_range(-1.0..=1.0);
        let u_mag: f64 = rng.random();
        let direction: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let u_scale: f64 = rng.random_range(-1.0..=1.0);
        let role = if d == cfg.num_sources {
            Role::Target
        } else {
            Role::Source
        };
        let mut translation = vec![0.0; input_dim];
        translation[0] = s * 2.0 * u_mag * direction.cos();
        translation[1] = s * 2.0 * u_mag * direction.sin();
        let mut class_means = template.clone();
        let domain_pairs = if role == Role::Target {
            pairs.clone()
        } else {
            Vec::new()
        };
        for p in &domain_pairs {
            let mid: Vec<f64> = template[p.a]
                .iter()
                .zip(&template[p.b])
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            for c in [p.a, p.b] {
                for (m, (t, mv)) in class_means[c].iter_mut().zip(template[c].iter().zip(&mid)) {
                    *m = t + p.overlap * (mv - t);
                }
            }
        }
        specs.push(DomainSpec {
            domain_id: d,
            role,
            rotation: s * std::f64::consts::FRAC_PI_4 * u_rot,
            translation,
            scale: 1.0 + 0.3 * s * u_scale,
            class_means,
            class_std: cfg.class_std,
            ambiguity_pairs: domain_pairs,
        });
    }

    let mut datasets = Vec::with_capacity(2 * num_domains);
    for spec in &specs {
        for (split, per_class) in [
            (Split::Train, cfg.samples_per_class),
            (Split::Eval, cfg.eval_samples_per_class),
        ] {
            let mut samples = Vec::with_capacity(per_class * num_classes);
            for (label, mean) in spec.class_means.iter().enumerate() {
                for _ in 0..per_class {
                    let raw: Vec<f64> = mean
                        .iter()
                        .map(|m| m + cfg.class_std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    samples.push(Sample {
                        label,
                        features: spec.transform(&raw),
                    });
                }
            }
            datasets.push(Dataset {
                input_dim,
                num_classes,
                domain_id: spec.domain_id,
                role: spec.role,
                split,
                samples,
            });
        }
    }
    Ok(Problem { specs, datasets })
}

/// One batch drawn from a domain.
#[derive(Clone, Debug)]
pub struct Batch {
    pub domain_id: usize,
    pub features: Tensor,
    /// `None` for target batches.
    pub labels: Option<Vec<usize>>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled index chunks of one epoch; the last chunk may be short.
pub fn epoch_order(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("batch_size", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Labeled or unlabeled rows a batch iterator can draw from.
pub trait BatchSource {
    fn domain_id(&self) -> usize;
    fn features(&self) -> &Tensor;
    fn labels(&self) -> Option<&[usize]>;
}

impl BatchSource for LabeledSet {
    fn domain_id(&self) -> usize {
        self.domain_id
    }
    fn features(&self) -> &Tensor {
        &self.features
    }
    fn labels(&self) -> Option<&[usize]> {
        Some(&self.labels)
    }
}

impl BatchSource for UnlabeledSet {
    fn domain_id(&self) -> usize {
        self.domain_id
    }
    fn features(&self) -> &Tensor {
        &self.features
    }
    fn labels(&self) -> Option<&[usize]> {
        None
    }
}

fn make_batch<S: BatchSource + ?Sized>(source: &S, idx: &[usize]) -> Batch {
    Batch {
        domain_id: source.domain_id(),
        features: source.features().select_rows(idx),
        labels: source.labels().map(|l| idx.iter().map(|&i| l[i]).collect()),
    }
}

/// All batches of one epoch, in order.
pub fn batches<S: BatchSource + ?Sized>(
    source: &S,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    let order = epoch_order(source.features().rows(), batch_size, seed, epoch)?;
    Ok(order.iter().map(|idx| make_batch(source, idx)).collect())
}

/// Endless batch stream that reshuffles at every epoch boundary.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    seed: u64,
    batch_size: usize,
    len: usize,
    epoch: u64,
    order: Vec<Vec<usize>>,
    pos: usize,
}

impl BatchCycler {
    /// `seed` is the run seed; the domain id is mixed in so domains shuffle independently.
    pub fn new(len: usize, batch_size: usize, seed: u64, domain_id: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyBatch);
        }
        let seed = mix(seed, domain_id as u64 + 1);
        Ok(BatchCycler {
            seed,
            batch_size,
            len,
            epoch: 0,
            order: epoch_order(len, batch_size, seed, 0)?,
            pos: 0,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.len, self.batch_size, self.seed, self.epoch)
                .expect("batch size validated at construction");
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1].clone()
    }

    pub fn next_batch<S: BatchSource + ?Sized>(&mut self, source: &S) -> Batch {
        let idx = self.next_indices();
        make_batch(source, &idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            samples_per_class: 5,
            eval_samples_per_class: 3,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&small(), 2, 4).unwrap();
        let b = generate(&small(), 2, 4).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.specs, b.specs);
    }

    #[test]
    fn layout_has_train_and_eval_per_domain() {
        let p = generate(&small(), 2, 4).unwrap();
        assert_eq!(p.datasets.len(), 8);
        let target = p.dataset(3, Split::Train).unwrap();
        assert_eq!(target.role, Role::Target);
        assert_eq!(target.len(), 20);
        assert_eq!(p.dataset(3, Split::Eval).unwrap().len(), 12);
        for d in p.datasets.iter().filter(|d| d.role == Role::Source) {
            let labels = d.labels();
            assert!((0..4).all(|k| labels.contains(&k)));
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(generate(&small(), 2, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn full_overlap_makes_pair_coincide_in_target_only() {
        let cfg = DataConfig {
            ambiguity: 1.0,
            ..small()
        };
        let p = generate(&cfg, 2, 5).unwrap();
        let target = p.specs.last().unwrap();
        assert_eq!(target.class_means[0], target.class_means[1]);
        assert_ne!(p.specs[0].class_means[0], p.specs[0].class_means[1]);
    }

    #[test]
    fn zero_shift_means_identical_domains() {
        let cfg = DataConfig {
            shift_strength: 0.0,
            ambiguity: 0.0,
            ..small()
        };
        let p = generate(&cfg, 2, 3).unwrap();
        for s in &p.specs {
            assert_eq!(s.rotation, 0.0);
            assert_eq!(s.scale, 1.0);
            assert!(s.translation.iter().all(|t| *t == 0.0));
        }
    }

    #[test]
    fn target_train_labels_are_firewalled() {
        let p = generate(&small(), 2, 3).unwrap();
        let target = p.dataset(3, Split::Train).unwrap();
        assert!(target.labeled().is_err());
        assert!(p.dataset(3, Split::Eval).unwrap().labeled().is_ok());
        let b = batches(&target.unlabeled(), 4, 1, 0).unwrap();
        assert!(b.iter().all(|b| b.labels.is_none()));
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let set = UnlabeledSet {
            domain_id: 0,
            features: Tensor::zeros(&[10, 2]),
        };
        let sizes: Vec<usize> = batches(&set, 4, 3, 0)
            .unwrap()
            .iter()
            .map(|b| b.features.rows())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&set, 1, 3, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        let a = epoch_order(16, 4, 9, 0).unwrap();
        assert_eq!(a, epoch_order(16, 4, 9, 0).unwrap());
        let distinct = (1..100)
            .filter(|&e| epoch_order(16, 4, 9, e).unwrap() != a)
            .count();
        assert_eq!(distinct, 99);
    }

    #[test]
    fn cycler_covers_every_row_each_epoch() {
        let mut c = BatchCycler::new(10, 4, 5, 0).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_indices()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(c.next_indices().len(), 4);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_row = "#lacmfer-v1 input_dim=2 K=3 domain=0 role=source split=train\n0,1.0,2.0\n1,3.0\n";
        match Dataset::parse(bad_row, "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "#lacmfer-v1 input_dim=two K=3 domain=0 role=source split=train\n";
        assert!(matches!(
            Dataset::parse(bad_header, "x"),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad_label = "#lacmfer-v1 input_dim=1 K=3 domain=0 role=source split=train\n3,1.0\n";
        assert!(matches!(
            Dataset::parse(bad_label, "x"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Dataset::parse("lacmfer input_dim=1\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = generate(&small(), 3, 3).unwrap();
        for d in &p.datasets {
            let back = Dataset::parse(&d.to_text(), "mem").unwrap();
            assert_eq!(&back, d);
        }
    }
}
