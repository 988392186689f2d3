//! Accuracy, feature-geometry metrics, the ablation ladder and embedding export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::{PseudoMode, RunConfig};
use crate::consistency::ConsistencyMode;
use crate::data::{Dataset, LabeledSet, Role};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::training::{accuracy_on, train, TrainingData};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LACMFER_THREADS";

pub fn accuracy(params: &ModelParams, eval: &LabeledSet) -> Result<f64> {
    accuracy_on(params, &eval.features, &eval.labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryScope {
    SourcesPooled,
    Target,
}

/// Serializes `+inf` as the string `"inf"`, since JSON has no infinity.
mod inf_sentinel {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number, got `{t}`"))),
        }
    }
}

/// Cluster quality of unit-normalized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub intra_l2: f64,
    pub intra_var: f64,
    pub inter_l2: f64,
    /// `inter_l2 / intra_l2`, `+inf` when `intra_l2` is zero.
    #[serde(with = "inf_sentinel")]
    pub ratio_r: f64,
    pub scope: GeometryScope,
    /// Classes with fewer than two samples, left out of the intra terms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<usize>,
}

fn unit_rows(features: &Tensor) -> Vec<Vec<f64>> {
    (0..features.rows())
        .map(|i| {
            let r = features.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Centroid distances within and between classes of the row-normalized `features`.
pub fn geometry(features: &Tensor, labels: &[usize], scope: GeometryScope) -> Result<GeometryReport> {
    features.require_rank2("geometry")?;
    if features.rows() != labels.len() {
        return Err(Error::Shape {
            op: "geometry",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let rows = unit_rows(features);
    let d = features.cols();
    let mut classes: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (r, &y) in rows.iter().zip(labels) {
        classes.entry(y).or_default().push(r);
    }
    if classes.len() < 2 {
        return Err(Error::config("labels", "geometry needs at least two classes"));
    }
    let centroids: BTreeMap<usize, Vec<f64>> = classes
        .iter()
        .map(|(&c, members)| {
            let mut m = vec![0.0; d];
            for r in members {
                for (a, v) in m.iter_mut().zip(*r) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            (c, m)
        })
        .collect();

    let (mut intra_l2, mut intra_var, mut counted) = (0.0, 0.0, 0usize);
    let mut excluded = Vec::new();
    for (c, members) in &classes {
        if members.len() < 2 {
            excluded.push(*c);
            continue;
        }
        let mu = &centroids[c];
        let n = members.len() as f64;
        intra_l2 += members.iter().map(|r| dist(r, mu)).sum::<f64>() / n;
        let var: f64 = (0..d)
            .map(|j| members.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n)
            .sum::<f64>()
            / d.max(1) as f64;
        intra_var += var;
        counted += 1;
    }
    if counted > 0 {
        intra_l2 /= counted as f64;
        intra_var /= counted as f64;
    }

    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let (mut inter, mut pairs) = (0.0, 0usize);
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            inter += dist(cs[i], cs[j]);
            pairs += 1;
        }
    }
    let inter_l2 = inter / pairs as f64;
    let ratio_r = if intra_l2 > 0.0 {
        inter_l2 / intra_l2
    } else {
        f64::INFINITY
    };
    Ok(GeometryReport {
        intra_l2,
        intra_var,
        inter_l2,
        ratio_r,
        scope,
        excluded_classes: excluded,
    })
}

/// Geometry of the global-branch features of `set`.
pub fn feature_geometry(params: &ModelParams, set: &LabeledSet, scope: GeometryScope) -> Result<GeometryReport> {
    let out = params.forward(&set.features)?;
    geometry(&out.global_features, &set.labels, scope)
}

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::F => "F",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "supervised only",
            Variant::B => "+ plain MMD",
            Variant::C => "+ hardness weights",
            Variant::D => "+ cluster-level term and reliability filter",
            Variant::E => "+ consistency loss",
            Variant::F => "+ pseudo-label loss",
        }
    }

    /// The variant's configuration; `F` is `base` with all terms enabled.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let full = RunConfig {
            hardness_weighting: true,
            reliability_filter: true,
            ..base.clone()
        };
        match self {
            Variant::A => RunConfig {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
                ..full
            },
            Variant::B => RunConfig {
                lambda: 0.0,
                hardness_weighting: false,
                reliability_filter: false,
                beta: 0.0,
                gamma: 0.0,
                ..full
            },
            Variant::C => RunConfig {
                lambda: 0.0,
                reliability_filter: false,
                beta: 0.0,
                gamma: 0.0,
                ..full
            },
            Variant::D => RunConfig {
                beta: 0.0,
                gamma: 0.0,
                ..full
            },
            Variant::E => RunConfig { gamma: 0.0, ..full },
            Variant::F => full,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A labelled configuration trained once per seed.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub config: RunConfig,
}

impl Arm {
    pub fn variant(v: Variant, base: &RunConfig) -> Self {
        Arm {
            label: v.label().to_string(),
            config: v.apply(base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub accuracy: f64,
    pub target_geometry: GeometryReport,
    pub source_geometry: GeometryReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanGeometry {
    pub intra_l2: f64,
    pub intra_var: f64,
    pub inter_l2: f64,
    #[serde(with = "inf_sentinel")]
    pub ratio_r: f64,
}

impl MeanGeometry {
    fn of(reports: &[&GeometryReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&GeometryReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
        MeanGeometry {
            intra_l2: mean(|r| r.intra_l2),
            intra_var: mean(|r| r.intra_var),
            inter_l2: mean(|r| r.inter_l2),
            ratio_r: mean(|r| r.ratio_r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_accuracy: f64,
    pub target_geometry: MeanGeometry,
    pub source_geometry: MeanGeometry,
}

/// Per-(arm, seed) results and per-arm summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub seeds: Vec<u64>,
    /// Keyed by arm label, then by seed.
    pub runs: BTreeMap<String, BTreeMap<u64, SeedResult>>,
    pub summaries: Vec<ArmSummary>,
}

impl ArmReport {
    pub fn summary(&self, label: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker pool size from [`THREADS_ENV`]; `0` means machine parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Sizes the global worker pool from [`THREADS_ENV`]; later calls are no-ops.
pub fn configure_threads() {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build_global();
}

/// Pooled labeled source eval data for source-scope geometry.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub train: TrainingData,
    pub target_eval: LabeledSet,
    pub sources_pooled: LabeledSet,
}

impl EvalData {
    pub fn from_datasets(datasets: &[Dataset]) -> Result<Self> {
        let train = TrainingData::from_datasets(datasets)?;
        let target_eval = train
            .target_eval
            .clone()
            .ok_or_else(|| Error::config("data", "no target eval split"))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for d in datasets
            .iter()
            .filter(|d| d.role == Role::Source && d.split == crate::data::Split::Eval)
        {
            for s in &d.samples {
                rows.push(s.features.clone());
                labels.push(s.label);
            }
        }
        let sources_pooled = if rows.is_empty() {
            // Fall back to the training splits when no source eval split is given.
            let mut feats = Vec::new();
            for s in &train.sources {
                for i in 0..s.features.rows() {
                    feats.push(s.features.row(i).to_vec());
                }
                labels.extend_from_slice(&s.labels);
            }
            LabeledSet {
                domain_id: usize::MAX,
                features: Tensor::from_rows(&feats)?,
                labels,
            }
        } else {
            LabeledSet {
                domain_id: usize::MAX,
                features: Tensor::from_rows(&rows)?,
                labels,
            }
        };
        Ok(EvalData {
            train,
            target_eval,
            sources_pooled,
        })
    }
}

fn run_one(cfg: &RunConfig, data: &EvalData) -> Result<SeedResult> {
    let out = train(cfg, &data.train)?;
    Ok(SeedResult {
        accuracy: accuracy(&out.params, &data.target_eval)?,
        target_geometry: feature_geometry(&out.params, &data.target_eval, GeometryScope::Target)?,
        source_geometry: feature_geometry(&out.params, &data.sources_pooled, GeometryScope::SourcesPooled)?,
    })
}

/// Trains every arm once per seed, in parallel, and reduces by (arm, seed).
pub fn run_arms(arms: &[Arm], data: &EvalData, seeds: &[u64]) -> Result<ArmReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(a, seed)| {
                let cfg = RunConfig {
                    seed,
                    ..arms[a].config.clone()
                };
                run_one(&cfg, data).map(|r| (a, seed, r))
            })
            .collect::<Result<Vec<_>>>()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    let results = pool.install(work)?;

    let mut runs: BTreeMap<String, BTreeMap<u64, SeedResult>> = BTreeMap::new();
    for (a, seed, r) in results {
        runs.entry(arms[a].label.clone()).or_default().insert(seed, r);
    }
    let summaries = arms
        .iter()
        .map(|arm| {
            let per_seed: Vec<&SeedResult> = runs[&arm.label].values().collect();
            let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            let tg: Vec<&GeometryReport> = per_seed.iter().map(|r| &r.target_geometry).collect();
            let sg: Vec<&GeometryReport> = per_seed.iter().map(|r| &r.source_geometry).collect();
            ArmSummary {
                label: arm.label.clone(),
                mean_accuracy,
                std_accuracy,
                target_geometry: MeanGeometry::of(&tg),
                source_geometry: MeanGeometry::of(&sg),
            }
        })
        .collect();
    Ok(ArmReport {
        seeds: seeds.to_vec(),
        runs,
        summaries,
    })
}

/// Optional comparisons at the full-method rung.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sweeps {
    /// Separate pseudo labeling against voting.
    pub pseudo: bool,
    /// Every consistency mode.
    pub consistency: bool,
}

/// Label of a sweep arm derived from variant F.
pub fn sweep_label(what: &str, value: &str) -> String {
    format!("F:{what}={value}")
}

/// Arms of the ladder followed by the requested sweep arms.
pub fn ablation_arms(base: &RunConfig, sweeps: Sweeps) -> Vec<Arm> {
    let mut arms: Vec<Arm> = Variant::ALL.iter().map(|&v| Arm::variant(v, base)).collect();
    let full = Variant::F.apply(base);
    if sweeps.pseudo {
        for mode in [PseudoMode::Voting, PseudoMode::Spl] {
            let name = match mode {
                PseudoMode::Voting => "voting",
                PseudoMode::Spl => "spl",
            };
            arms.push(Arm {
                label: sweep_label("pseudo", name),
                config: RunConfig {
                    pseudo_mode: mode,
                    ..full.clone()
                },
            });
        }
    }
    if sweeps.consistency {
        for mode in ConsistencyMode::ALL {
            arms.push(Arm {
                label: sweep_label("consistency", mode.name()),
                config: RunConfig {
                    consistency_mode: mode,
                    ..full.clone()
                },
            });
        }
    }
    arms
}

/// Ladder A..F (plus sweeps) over at least three seeds.
pub fn run_ablation(base: &RunConfig, data: &EvalData, seeds: &[u64], sweeps: Sweeps) -> Result<ArmReport> {
    base.validate()?;
    if seeds.len() < 3 {
        return Err(Error::config("seeds", "the ablation ladder needs at least three seeds"));
    }
    run_arms(&ablation_arms(base, sweeps), data, seeds)
}

/// One exported row of global-branch features.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub label: usize,
    pub domain_id: usize,
    pub is_target: bool,
    pub features: Vec<f64>,
}

fn embedding_header(d: usize) -> String {
    let mut h = String::from("label,domain_id,is_target");
    for j in 1..=d {
        h.push_str(&format!(",f_{j}"));
    }
    h
}

/// CSV text of the global-branch features of every sample in `datasets`.
pub fn embeddings_csv(params: &ModelParams, datasets: &[Dataset]) -> Result<String> {
    let d = params.arch.global_hidden;
    let mut out = embedding_header(d);
    out.push('\n');
    for ds in datasets {
        if ds.is_empty() {
            continue;
        }
        let f = params.forward(&ds.features())?.global_features;
        for (i, s) in ds.samples.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}",
                s.label,
                ds.domain_id,
                u8::from(ds.role == Role::Target)
            ));
            for v in f.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_embeddings(params: &ModelParams, datasets: &[Dataset], path: &Path) -> Result<usize> {
    let text = embeddings_csv(params, datasets)?;
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().count() - 1)
}

pub fn parse_embeddings(text: &str, origin: &str) -> Result<Vec<EmbeddingRow>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["label", "domain_id", "is_target"] {
        return Err(perr(1, "bad header".into()));
    }
    let d = cols.len() - 3;
    if header != embedding_header(d) {
        return Err(perr(1, "bad feature column names".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(perr(n, format!("expected {} fields, found {}", d + 3, fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| perr(n, e.to_string()));
        let is_target = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(perr(n, format!("is_target must be 0 or 1, found `{other}`"))),
        };
        let features = fields[3..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| perr(n, e.to_string())))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            label: int(fields[0])?,
            domain_id: int(fields[1])?,
            is_target,
            features,
        });
    }
    Ok(rows)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_classes() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [3.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]]).unwrap();
        let g = geometry(&f, &[0, 0, 1, 1], GeometryScope::Target).unwrap();
        assert_eq!(g.intra_l2, 0.0);
        assert_eq!(g.intra_var, 0.0);
        assert_eq!(g.inter_l2, 2.0);
        assert_eq!(g.ratio_r, f64::INFINITY);
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"inf\""));
        let back: GeometryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn singleton_class_is_excluded() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let g = geometry(&f, &[0, 0, 1], GeometryScope::Target).unwrap();
        assert_eq!(g.excluded_classes, vec![1]);
        assert!((g.intra_l2 - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn one_class_is_rejected() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(geometry(&f, &[0, 0], GeometryScope::Target).is_err());
    }

    #[test]
    fn ladder_deltas() {
        let base = RunConfig::default();
        let a = Variant::A.apply(&base);
        assert_eq!((a.alpha, a.beta, a.gamma), (0.0, 0.0, 0.0));
        let b = Variant::B.apply(&base);
        assert_eq!((b.alpha, b.lambda, b.hardness_weighting, b.reliability_filter), (0.1, 0.0, false, false));
        let c = Variant::C.apply(&base);
        assert!(c.hardness_weighting && !c.reliability_filter);
        let d = Variant::D.apply(&base);
        assert_eq!((d.lambda, d.reliability_filter, d.beta), (0.02, true, 0.0));
        assert_eq!(Variant::E.apply(&base).gamma, 0.0);
        assert_eq!(Variant::F.apply(&base), base);
    }

    #[test]
    fn sample_stdev() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
