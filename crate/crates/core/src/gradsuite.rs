//! Finite-difference checks of every loss with respect to the model parameters.
//!
//! Each instance draws random parameters and random batches, fixes the step
//! constants at the base point, and compares the tape gradient of one loss
//! against central differences of the same loss under those constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{Branch, Level};
use crate::config::RunConfig;
use crate::consistency::{consistency_node, mvv_node, spl_node, vote, ConsistencyMode, SplSelection};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{grad_check, max_value, argmax, GradCheckOptions, Graph, NodeId, Tensor};
use crate::training::{build_objective, forward_step, PseudoPlan, StepBatches, StepPlan};

/// Loss under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Supervised,
    SampleGlobal,
    SampleLocal,
    ClusterGlobal,
    ClusterLocal,
    Inter,
    Consistency(ConsistencyMode),
    Voting,
    Spl,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 13] = [
        LossKind::Supervised,
        LossKind::SampleGlobal,
        LossKind::SampleLocal,
        LossKind::ClusterGlobal,
        LossKind::ClusterLocal,
        LossKind::Inter,
        LossKind::Consistency(ConsistencyMode::Mcc),
        LossKind::Consistency(ConsistencyMode::Kl),
        LossKind::Consistency(ConsistencyMode::L1),
        LossKind::Consistency(ConsistencyMode::Mse),
        LossKind::Voting,
        LossKind::Spl,
        LossKind::Total,
    ];

    pub fn name(self) -> String {
        match self {
            LossKind::Supervised => "sup".into(),
            LossKind::SampleGlobal => "sid_global".into(),
            LossKind::SampleLocal => "sid_local".into(),
            LossKind::ClusterGlobal => "cid_global".into(),
            LossKind::ClusterLocal => "cid_local".into(),
            LossKind::Inter => "inter".into(),
            LossKind::Consistency(m) => m.name().into(),
            LossKind::Voting => "mvv".into(),
            LossKind::Spl => "spl".into(),
            LossKind::Total => "total".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub instances: usize,
    pub rows_per_domain: usize,
    pub num_sources: usize,
    pub seed: u64,
    pub check: GradCheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 10,
            rows_per_domain: 8,
            num_sources: 2,
            seed: 0,
            check: GradCheckOptions {
                max_entries_per_tensor: Some(6),
                // Differencing O(1) losses at step 1e-5 leaves about 1e-10 of
                // rounding noise, which must not count against zero gradients.
                denominator_floor: 1e-5,
                ..GradCheckOptions::default()
            },
        }
    }
}

/// Worst relative error of one loss across all instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub loss: String,
    pub instances: usize,
    pub entries: usize,
    pub skipped_at_kinks: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub rows: Vec<LossRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>8} {:>7} {:>12}  worst tensor\n",
            "loss", "instances", "entries", "kinks", "max_rel_err"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>9} {:>8} {:>7} {:>12.3e}  {}{}\n",
                r.loss,
                r.instances,
                r.entries,
                r.skipped_at_kinks,
                r.max_rel_err,
                r.worst_tensor,
                if r.passed { "" } else { "  FAIL" }
            ));
        }
        out
    }
}

/// Random parameters, batches and step constants for one check.
pub struct Instance {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub batches: StepBatches,
    pub plan: StepPlan,
    pub spl: SplSelection,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Threshold halfway between the two middle values, so the split is not at a sample.
fn mid_threshold(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n < 2 {
        return values.first().map(|v| v * 0.5).unwrap_or(0.5);
    }
    0.5 * (values[n / 2 - 1] + values[n / 2])
}

impl Instance {
    /// Draws instance `index`; `epsilon` and `tau` are set from the drawn
    /// predictions so the reliability mask and the votes are both mixed.
    /// Draws are repeated until every loss has at least one active term.
    pub fn draw(base: &RunConfig, opts: &SuiteOptions, index: usize) -> Result<Self> {
        const ATTEMPTS: u64 = 64;
        for attempt in 0..ATTEMPTS {
            if let Some(inst) = Self::try_draw(base, opts, index as u64 * ATTEMPTS + attempt)? {
                return Ok(inst);
            }
        }
        Err(Error::Numerical(format!(
            "instance {index}: no draw activates every loss term"
        )))
    }

    fn try_draw(base: &RunConfig, opts: &SuiteOptions, stream: u64) -> Result<Option<Self>> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(stream);
        let arch = base.arch.clone();
        let mut params = ModelParams::init(&arch, rng.random())?;
        // Non-zero biases so relu kinks are not hit by zero inputs.
        for t in params.tensors_mut() {
            if t.rows() == 1 {
                for v in t.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = 0.1 * z;
                }
            }
        }
        // Larger classifier weights spread the predictions out.
        for lin in [&mut params.global_classifier, &mut params.local_classifier] {
            for v in lin.weight.data_mut() {
                *v *= 4.0;
            }
        }
        let k = arch.num_classes;
        let rows = opts.rows_per_domain;
        let sources: Vec<Batch> = (0..opts.num_sources)
            .map(|n| Batch {
                domain_id: n,
                features: gaussian(&mut rng, rows, arch.input_dim, 2.0),
                labels: Some((0..rows).map(|i| (i + rng.random_range(0..2)) % k).collect()),
            })
            .collect();
        let target = Batch {
            domain_id: opts.num_sources,
            features: gaussian(&mut rng, rows, arch.input_dim, 2.0),
            labels: None,
        };
        let batches = StepBatches { sources, target };

        let out: Vec<_> = batches
            .sources
            .iter()
            .chain(std::iter::once(&batches.target))
            .map(|b| params.forward(&b.features))
            .collect::<Result<_>>()?;
        let maxima: Vec<f64> = out
            .iter()
            .flat_map(|o| {
                (0..o.global_probs.rows())
                    .flat_map(move |i| [max_value(o.global_probs.row(i)), max_value(o.local_probs.row(i))])
            })
            .collect();
        let epsilon = mid_threshold(maxima);
        let t = out.last().expect("target");
        let agreeing: Vec<f64> = (0..t.global_probs.rows())
            .filter(|&i| argmax(t.global_probs.row(i)) == argmax(t.local_probs.row(i)))
            .map(|i| max_value(t.global_probs.row(i)).max(max_value(t.local_probs.row(i))))
            .collect();
        if agreeing.is_empty() {
            return Ok(None);
        }
        let tau = mid_threshold(agreeing);
        let cfg = RunConfig {
            epsilon,
            tau,
            alpha: base.alpha.max(0.1),
            beta: base.beta.max(0.5),
            gamma: base.gamma.max(0.1),
            lambda: if base.lambda > 0.0 { base.lambda } else { 0.02 },
            reliability_filter: true,
            ..base.clone()
        };

        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let fwd = forward_step(&mut g, &arch, &ids, &batches)?;
        let plan = StepPlan::derive(&g, &fwd, &batches, &cfg)?;
        let (pg, pl) = (g.value(fwd.target.global_probs), g.value(fwd.target.local_probs));
        let spl = SplSelection::select(pg, pl, tau)?;
        let plan = StepPlan {
            pseudo: PseudoPlan::Voting(vote(pg, pl, tau)?),
            ..plan
        };
        let inst = Instance {
            cfg,
            params,
            batches,
            plan,
            spl,
        };
        let mut g = Graph::new();
        let ids = inst.params.register(&mut g);
        for kind in LossKind::ALL {
            if inst.loss_node(&mut g, &ids, kind).is_err() {
                return Ok(None);
            }
        }
        Ok(Some(inst))
    }

    /// Records `kind` on `g` given registered parameter nodes.
    pub fn loss_node(&self, g: &mut Graph, ids: &[NodeId], kind: LossKind) -> Result<NodeId> {
        let fwd = forward_step(g, &self.cfg.arch, ids, &self.batches)?;
        let obj = build_objective(g, &fwd, &self.batches, &self.plan, &self.cfg)?;
        let (pg, pl) = (fwd.target.global_probs, fwd.target.local_probs);
        let pick = |branch: Branch, level: Level| -> Vec<NodeId> {
            obj.inter
                .terms
                .iter()
                .filter(|t| t.branch == branch && t.level == level)
                .map(|t| t.node)
                .collect()
        };
        let sum_terms = |g: &mut Graph, nodes: Vec<NodeId>, what: &str| -> Result<NodeId> {
            let mut it = nodes.into_iter();
            let first = it
                .next()
                .ok_or_else(|| Error::Numerical(format!("no active {what} term")))?;
            it.try_fold(first, |acc, n| g.add(acc, n))
        };
        match kind {
            LossKind::Supervised => Ok(obj.supervised),
            LossKind::SampleGlobal => sum_terms(g, pick(Branch::Global, Level::Sample), "sid_global"),
            LossKind::SampleLocal => sum_terms(g, pick(Branch::Local, Level::Sample), "sid_local"),
            LossKind::ClusterGlobal => sum_terms(g, pick(Branch::Global, Level::Cluster), "cid_global"),
            LossKind::ClusterLocal => sum_terms(g, pick(Branch::Local, Level::Cluster), "cid_local"),
            LossKind::Inter => obj
                .inter
                .total
                .ok_or_else(|| Error::Numerical("every alignment term was skipped".into())),
            LossKind::Consistency(mode) => consistency_node(g, pg, pl, mode),
            LossKind::Voting => match &self.plan.pseudo {
                PseudoPlan::Voting(v) => mvv_node(g, pg, pl, v)?
                    .ok_or_else(|| Error::Numerical("no sample passed the vote".into())),
                PseudoPlan::Spl(_) => unreachable!("instances always vote"),
            },
            LossKind::Spl => spl_node(g, pg, pl, &self.spl)?
                .ok_or_else(|| Error::Numerical("no sample selected".into())),
            LossKind::Total => Ok(obj.total),
        }
    }
}

/// Checks every loss in `kinds` on `opts.instances` random instances.
pub fn run_suite(base: &RunConfig, kinds: &[LossKind], opts: &SuiteOptions) -> Result<SuiteReport> {
    base.arch.validate()?;
    let instances: Vec<Instance> = (0..opts.instances)
        .into_par_iter()
        .map(|i| Instance::draw(base, opts, i))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|k| (0..instances.len()).map(move |i| (k, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let inst = &instances[i];
            let check = GradCheckOptions {
                seed: opts.check.seed ^ (i as u64) << 8 ^ k as u64,
                ..opts.check.clone()
            };
            grad_check(
                |g, ids| inst.loss_node(g, ids, kinds[k]),
                &inst.params.to_named(),
                &check,
            )
            .map(|r| (k, r))
        })
        .collect::<Result<_>>()?;
    let rows = kinds
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let mine: Vec<_> = results.iter().filter(|(kk, _)| *kk == k).map(|(_, r)| r).collect();
            let mut worst = (0.0, String::new());
            let (mut entries, mut skipped) = (0, 0);
            for r in &mine {
                for t in &r.tensors {
                    entries += t.checked;
                    skipped += t.skipped_at_kinks;
                    if t.max_rel_err > worst.0 || worst.1.is_empty() {
                        worst = (t.max_rel_err, t.name.clone());
                    }
                }
            }
            LossRow {
                loss: kind.name(),
                instances: mine.len(),
                entries,
                skipped_at_kinks: skipped,
                max_rel_err: worst.0,
                worst_tensor: worst.1,
                passed: mine.iter().all(|r| r.passed()),
            }
        })
        .collect();
    Ok(SuiteReport {
        tolerance: opts.check.tolerance,
        rows,
    })
}
