//! Data format, generator statistics and evaluation utilities.

use approx::assert_abs_diff_eq;
use lacmfer::alignment::{weighted_mmd, AlignmentSide, KernelConfig, WeightedBatchFeatures};
use lacmfer::data::{generate, load_dir, save_dir, Role, Split};
use lacmfer::eval::{
    accuracy, export_embeddings, geometry, load_embeddings, run_arms, Arm, EvalData, GeometryScope, Variant,
};
use lacmfer::training::train;
use lacmfer::{ArchConfig, DataConfig, Dataset, Error, LabeledSet, ModelParams, RunConfig, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn problem(cfg: &DataConfig) -> Vec<Dataset> {
    generate(cfg, 2, 5).unwrap().datasets
}

#[test]
fn directory_round_trip_is_exact() {
    let data = problem(&DataConfig::default());
    let dir = TempDir::new().unwrap();
    let written = save_dir(&data, dir.path()).unwrap();
    assert_eq!(written.len(), data.len());
    let mut loaded = load_dir(dir.path()).unwrap();
    let mut original = data.clone();
    let key = |d: &Dataset| (d.domain_id, d.split == Split::Eval);
    loaded.sort_by_key(key);
    original.sort_by_key(key);
    assert_eq!(loaded, original);
}

#[test]
fn malformed_files_name_the_line() {
    let header = "#lacmfer-v1 input_dim=2 K=3 domain=0 role=source split=train";
    let cases = [
        (format!("{header}\n0,1.0,2.0\n1,0.5\n"), 3),
        (format!("{header}\n0,1.0,2.0\n7,0.5,0.5\n"), 3),
        (format!("{header}\nx,1.0,2.0\n"), 2),
        (format!("{header}\n0,1.0,abc\n"), 2),
        ("#lacmfer-v2 input_dim=2 K=3 domain=0 role=source split=train\n".to_string(), 1),
        ("#lacmfer-v1 input_dim=2 K=3 domain=0 role=oracle split=train\n".to_string(), 1),
    ];
    for (text, line) in cases {
        match Dataset::parse(&text, "case") {
            Err(Error::Parse { line: l, path, .. }) => {
                assert_eq!(l, line, "{text:?}");
                assert_eq!(path, "case");
            }
            other => panic!("expected a parse error for {text:?}, got {other:?}"),
        }
    }
}

fn uniform(features: Tensor) -> WeightedBatchFeatures {
    let n = features.rows();
    WeightedBatchFeatures {
        side: AlignmentSide::new(vec![1.0; n], vec![true; n], vec![0; n]).unwrap(),
        features,
    }
}

/// Average plain MMD between each source and the target on raw features.
fn mean_source_target_mmd(shift: f64) -> f64 {
    let cfg = DataConfig {
        shift_strength: shift,
        samples_per_class: 60,
        ..DataConfig::default()
    };
    let data = problem(&cfg);
    let train: Vec<&Dataset> = data.iter().filter(|d| d.split == Split::Train).collect();
    let target = train.iter().find(|d| d.role == Role::Target).unwrap();
    let t = uniform(target.features());
    let sources: Vec<_> = train.iter().filter(|d| d.role == Role::Source).collect();
    let kernel = KernelConfig::fixed(4.0);
    sources
        .iter()
        .map(|s| weighted_mmd(&uniform(s.features()), &t, &kernel).unwrap().value())
        .sum::<f64>()
        / sources.len() as f64
}

#[test]
fn domain_gap_grows_with_shift_strength() {
    let gaps: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&s| mean_source_target_mmd(s)).collect();
    assert!(gaps[0] <= gaps[1] && gaps[1] <= gaps[2], "{gaps:?}");
}

#[test]
fn class_means_converge_to_the_template() {
    let n = 4000;
    let cfg = DataConfig {
        samples_per_class: n,
        eval_samples_per_class: 1,
        ..DataConfig::default()
    };
    let p = generate(&cfg, 2, 5).unwrap();
    for spec in &p.specs {
        let data = p.dataset(spec.domain_id, Split::Train).unwrap();
        // the transform scales the cloud by `spec.scale`
        let band = 3.0 * spec.scale * spec.class_std / (n as f64).sqrt();
        for (k, mean) in spec.transformed_means().iter().enumerate() {
            let members: Vec<&[f64]> = data
                .samples
                .iter()
                .filter(|s| s.label == k)
                .map(|s| s.features.as_slice())
                .collect();
            assert_eq!(members.len(), n);
            for (j, m) in mean.iter().enumerate() {
                let empirical = members.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                assert!((empirical - m).abs() < band, "domain {} class {k}: {empirical} vs {m}", spec.domain_id);
            }
        }
    }
}

fn balanced(k: usize, per_class: usize, rng: &mut ChaCha8Rng) -> LabeledSet {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..per_class {
            rows.push(vec![rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]);
            labels.push(c);
        }
    }
    LabeledSet {
        domain_id: 0,
        features: Tensor::from_rows(&rows).unwrap(),
        labels,
    }
}

#[test]
fn random_parameters_score_at_chance() {
    let arch = ArchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let set = balanced(5, 100, &mut rng);
    let accs: Vec<f64> = (0..10)
        .map(|seed| accuracy(&ModelParams::init(&arch, seed).unwrap(), &set).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.2).abs() <= 0.05, "{accs:?}");
}

#[test]
fn constant_predictor_on_two_balanced_classes_scores_half() {
    let arch = ArchConfig {
        num_classes: 2,
        ..ArchConfig::default()
    };
    let mut params = ModelParams::init(&arch, 1).unwrap();
    for lin in [&mut params.global_classifier, &mut params.local_classifier] {
        lin.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        lin.bias.data_mut().copy_from_slice(&[1.0, 0.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(accuracy(&params, &balanced(2, 50, &mut rng)).unwrap(), 0.5);
}

fn fixed(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(23),
        failure_persistence: None,
        ..Config::default()
    }
}

fn cloud(seed: u64, n: usize, d: usize, k: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                z + if j == c { 3.0 } else { 0.0 }
            })
            .collect();
        rows.push(row);
        labels.push(c);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn map_rows(t: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| f(t.row(i))).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(fixed(32))]

    #[test]
    fn geometry_distances_survive_rotation(seed in any::<u64>(), d in 2usize..6) {
        let (x, y) = cloud(seed, 40, d, 3);
        let q = orthogonal(d, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let rotated = map_rows(&x, |r| q.iter().map(|qi| qi.iter().zip(r).map(|(a, b)| a * b).sum()).collect());
        let a = geometry(&x, &y, GeometryScope::Target).unwrap();
        let b = geometry(&rotated, &y, GeometryScope::Target).unwrap();
        prop_assert!((a.intra_l2 - b.intra_l2).abs() < 1e-10);
        prop_assert!((a.inter_l2 - b.inter_l2).abs() < 1e-10);
        prop_assert!((a.ratio_r - b.ratio_r).abs() < 1e-8);
    }

    #[test]
    fn geometry_survives_dimension_permutation(seed in any::<u64>(), d in 2usize..6, shift in 1usize..6) {
        let (x, y) = cloud(seed, 40, d, 3);
        let permuted = map_rows(&x, |r| (0..d).map(|j| r[(j + shift) % d]).collect());
        let a = geometry(&x, &y, GeometryScope::Target).unwrap();
        let b = geometry(&permuted, &y, GeometryScope::Target).unwrap();
        prop_assert!((a.intra_var - b.intra_var).abs() < 1e-12);
        prop_assert!((a.intra_l2 - b.intra_l2).abs() < 1e-12);
        prop_assert!((a.inter_l2 - b.inter_l2).abs() < 1e-12);
    }

    #[test]
    fn geometry_ignores_duplication(seed in any::<u64>()) {
        let (x, y) = cloud(seed, 30, 3, 3);
        let doubled_rows: Vec<Vec<f64>> = (0..2).flat_map(|_| (0..x.rows()).map(|i| x.row(i).to_vec())).collect();
        let doubled = Tensor::from_rows(&doubled_rows).unwrap();
        let labels: Vec<usize> = y.iter().chain(&y).copied().collect();
        let a = geometry(&x, &y, GeometryScope::Target).unwrap();
        let b = geometry(&doubled, &labels, GeometryScope::Target).unwrap();
        prop_assert!((a.intra_l2 - b.intra_l2).abs() < 1e-12);
        prop_assert!((a.intra_var - b.intra_var).abs() < 1e-12);
        prop_assert!((a.inter_l2 - b.inter_l2).abs() < 1e-12);
    }
}

#[test]
fn randomly_split_gaussian_has_tight_centroids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4000;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal) + 2.0).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let r = geometry(&Tensor::from_rows(&rows).unwrap(), &labels, GeometryScope::Target).unwrap();
    assert!(r.inter_l2 < 0.1 * r.intra_l2, "{r:?}");
    assert!(r.ratio_r < 1.0);
}

fn small_eval_data(cfg: &RunConfig) -> (Vec<Dataset>, EvalData) {
    let datasets = generate(&cfg.data, cfg.arch.input_dim, cfg.arch.num_classes).unwrap().datasets;
    let eval = EvalData::from_datasets(&datasets).unwrap();
    (datasets, eval)
}

fn quick_config() -> RunConfig {
    RunConfig {
        total_iters: 120,
        data: DataConfig {
            samples_per_class: 40,
            eval_samples_per_class: 30,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn one_seed_arm_matches_a_direct_run() {
    let base = quick_config();
    let (_, data) = small_eval_data(&base);
    let arm = Arm::variant(Variant::F, &base);
    let report = run_arms(std::slice::from_ref(&arm), &data, &[5]).unwrap();
    let cfg = RunConfig { seed: 5, ..arm.config.clone() };
    let direct = train(&cfg, &data.train).unwrap();
    let got = report.runs["F"][&5].accuracy;
    assert_eq!(got.to_bits(), direct.final_accuracy.unwrap().to_bits());
    assert_eq!(got.to_bits(), accuracy(&direct.params, &data.target_eval).unwrap().to_bits());
}

#[test]
fn exported_embeddings_round_trip() {
    let cfg = quick_config();
    let (datasets, _) = small_eval_data(&cfg);
    let params = ModelParams::init(&cfg.arch, 3).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("emb.csv");
    let rows = export_embeddings(&params, &datasets, &path).unwrap();
    let total: usize = datasets.iter().map(Dataset::len).sum();
    assert_eq!(rows, total);
    let parsed = load_embeddings(&path).unwrap();
    assert_eq!(parsed.len(), total);
    assert!(parsed.iter().all(|r| r.features.len() == cfg.arch.global_hidden));
    let target_rows = parsed.iter().filter(|r| r.is_target).count();
    let target_total: usize = datasets.iter().filter(|d| d.role == Role::Target).map(Dataset::len).sum();
    assert_eq!(target_rows, target_total);

    // first exported row equals the forward pass of the first sample
    let first = &datasets[0];
    let out = params.forward(&first.features()).unwrap();
    for (a, b) in parsed[0].features.iter().zip(out.global_features.row(0)) {
        assert_abs_diff_eq!(*a, *b, epsilon = 0.0);
    }
}

#[test]
fn without_shift_target_accuracy_tracks_source_accuracy() {
    let cfg = RunConfig {
        data: DataConfig {
            shift_strength: 0.0,
            ambiguity: 0.0,
            ..DataConfig::default()
        },
        ..Variant::A.apply(&RunConfig::default())
    };
    let (datasets, data) = small_eval_data(&cfg);
    let out = train(&cfg, &data.train).unwrap();
    let source_eval = datasets
        .iter()
        .find(|d| d.role == Role::Source && d.split == Split::Eval)
        .unwrap()
        .labeled()
        .unwrap();
    let src = accuracy(&out.params, &source_eval).unwrap();
    let tgt = accuracy(&out.params, &data.target_eval).unwrap();
    assert!((src - tgt).abs() <= 0.02, "source {src} target {tgt}");
}
