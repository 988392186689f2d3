//! The joint objective and the training loop.
//!
//! One iteration draws a batch from every source and from the target,
//! records the forward passes on a single tape, derives the step constants
//! (masks, hardness weights, pseudo labels, votes, kernel bandwidths) from
//! the forward values, records all losses on top of the same forward nodes,
//! and takes one optimizer step on the gradient of the weighted total.

use serde::{Deserialize, Serialize};

use crate::alignment::{Branch, DomainView, BranchView, InterDomainNodes, InterDomainPlan, Level, SkipRecord};
use crate::config::{PseudoMode, RunConfig};
use crate::consistency::{
    consistency_node, cross_entropy_sum, mvv_node, spl_node, vote, SplSelection, VoteResult,
};
use crate::data::{Batch, BatchCycler, Dataset, LabeledSet, Role, Split, UnlabeledSet};
use crate::error::{Error, Result};
use crate::model::{forward_nodes, ArchConfig, BranchNodes, ModelParams};
use crate::numerics::{Graph, NodeId, Tensor};

/// Inverse-decay schedule `lr0 / (1 + a p)^b` with `p = iteration / total_iters`.
pub fn learning_rate(cfg: &RunConfig, iteration: usize) -> f64 {
    let p = if cfg.total_iters == 0 {
        0.0
    } else {
        iteration as f64 / cfg.total_iters as f64
    };
    cfg.lr0 / (1.0 + cfg.schedule_a * p).powf(cfg.schedule_b)
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    velocity: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(params: &ModelParams) -> Self {
        Optimizer {
            velocity: params
                .named_tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        iteration: usize,
        cfg: &RunConfig,
    ) -> Result<f64> {
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: vec![names.len()],
                rhs: vec![grads.len()],
            });
        }
        for (name, g) in names.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{name}` at iteration {iteration}"
                )));
            }
        }
        let lr = learning_rate(cfg, iteration);
        for ((p, g), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(lr)
    }
}

/// Single update from fresh momentum state.
pub fn optimizer_step(
    params: &ModelParams,
    grads: &[Tensor],
    iteration: usize,
    cfg: &RunConfig,
) -> Result<ModelParams> {
    let mut next = params.clone();
    Optimizer::new(params).step(&mut next, grads, iteration, cfg)?;
    Ok(next)
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Index { index: l, len: k });
        }
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}

/// `(1/N) sum_n mean_i [CE(P_L) + CE(P_G)]`; `probs[n]` is `(global, local)`.
pub fn supervised_node(
    g: &mut Graph,
    probs: &[(NodeId, NodeId)],
    labels: &[&[usize]],
) -> Result<NodeId> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::config("sources", "need one label set per source batch"));
    }
    let mut total: Option<NodeId> = None;
    for (&(pg, pl), y) in probs.iter().zip(labels) {
        let (rows, k) = (g.value(pg).rows(), g.value(pg).cols());
        if rows == 0 {
            return Err(Error::EmptyBatch);
        }
        let target = g.constant(one_hot(y, k)?);
        let cl = cross_entropy_sum(g, pl, target)?;
        let cg = cross_entropy_sum(g, pg, target)?;
        let both = g.add(cl, cg)?;
        let mean = g.scale(both, 1.0 / rows as f64);
        total = Some(match total {
            None => mean,
            Some(t) => g.add(t, mean)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, 1.0 / probs.len() as f64))
}

/// Value form of the supervised loss over `(global, local)` prediction pairs.
pub fn supervised_loss(probs: &[(&Tensor, &Tensor)], labels: &[&[usize]]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes: Vec<(NodeId, NodeId)> = probs
        .iter()
        .map(|(a, b)| (g.constant((*a).clone()), g.constant((*b).clone())))
        .collect();
    let l = supervised_node(&mut g, &nodes, labels)?;
    Ok(g.value(l).item())
}

/// Weighted objective from component values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub supervised: f64,
    pub inter: f64,
    pub consistency: f64,
    pub pseudo: f64,
}

impl LossComponents {
    pub fn total(&self, cfg: &RunConfig) -> f64 {
        self.supervised + cfg.alpha * self.inter + cfg.beta * self.consistency + cfg.gamma * self.pseudo
    }
}

pub fn total_loss(components: &LossComponents, cfg: &RunConfig) -> f64 {
    components.total(cfg)
}

/// Batches of one iteration.
#[derive(Clone, Debug)]
pub struct StepBatches {
    pub sources: Vec<Batch>,
    pub target: Batch,
}

/// Forward nodes of one iteration.
#[derive(Clone, Debug)]
pub struct StepForward {
    pub sources: Vec<BranchNodes>,
    pub target: BranchNodes,
}

pub fn forward_step(
    g: &mut Graph,
    arch: &ArchConfig,
    param_ids: &[NodeId],
    batches: &StepBatches,
) -> Result<StepForward> {
    let mut sources = Vec::with_capacity(batches.sources.len());
    for b in &batches.sources {
        let x = g.constant(b.features.clone());
        sources.push(forward_nodes(g, arch, param_ids, x)?);
    }
    let x = g.constant(batches.target.features.clone());
    let target = forward_nodes(g, arch, param_ids, x)?;
    Ok(StepForward { sources, target })
}

/// Pseudo-label constants of one step.
#[derive(Clone, Debug)]
pub enum PseudoPlan {
    Voting(VoteResult),
    Spl(SplSelection),
}

impl PseudoPlan {
    pub fn pass_count(&self) -> usize {
        match self {
            PseudoPlan::Voting(v) => v.pass_count(),
            PseudoPlan::Spl(s) => s.pass_count(),
        }
    }
}

/// Everything a step treats as constant.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub inter: InterDomainPlan,
    pub pseudo: PseudoPlan,
}

fn view<'a>(g: &'a Graph, nodes: &BranchNodes, labels: Option<&'a [usize]>) -> DomainView<'a> {
    DomainView {
        global: BranchView {
            features: g.value(nodes.global_features),
            probs: g.value(nodes.global_probs),
        },
        local: BranchView {
            features: g.value(nodes.local_features),
            probs: g.value(nodes.local_probs),
        },
        labels,
    }
}

impl StepPlan {
    pub fn derive(g: &Graph, fwd: &StepForward, batches: &StepBatches, cfg: &RunConfig) -> Result<Self> {
        let mut sources = Vec::with_capacity(fwd.sources.len());
        for (nodes, b) in fwd.sources.iter().zip(&batches.sources) {
            let labels = b
                .labels
                .as_deref()
                .ok_or_else(|| Error::config("sources", "source batch without labels"))?;
            sources.push(view(g, nodes, Some(labels)));
        }
        let target = view(g, &fwd.target, None);
        let inter = InterDomainPlan::derive(&sources, &target, &cfg.inter_domain())?;
        let (pg, pl) = (g.value(fwd.target.global_probs), g.value(fwd.target.local_probs));
        let pseudo = match cfg.pseudo_mode {
            PseudoMode::Voting => PseudoPlan::Voting(vote(pg, pl, cfg.tau)?),
            PseudoMode::Spl => PseudoPlan::Spl(SplSelection::select(pg, pl, cfg.tau)?),
        };
        Ok(StepPlan { inter, pseudo })
    }
}

/// Loss nodes of one step.
#[derive(Clone, Debug)]
pub struct ObjectiveNodes {
    pub supervised: NodeId,
    pub inter: InterDomainNodes,
    pub consistency: NodeId,
    pub pseudo: Option<NodeId>,
    /// Only terms with a non-zero weight are summed into this node.
    pub total: NodeId,
}

impl ObjectiveNodes {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            supervised: g.value(self.supervised).item(),
            inter: self.inter.total.map(|n| g.value(n).item()).unwrap_or(0.0),
            consistency: g.value(self.consistency).item(),
            pseudo: self.pseudo.map(|n| g.value(n).item()).unwrap_or(0.0),
        }
    }
}

pub fn build_objective(
    g: &mut Graph,
    fwd: &StepForward,
    batches: &StepBatches,
    plan: &StepPlan,
    cfg: &RunConfig,
) -> Result<ObjectiveNodes> {
    let probs: Vec<(NodeId, NodeId)> = fwd
        .sources
        .iter()
        .map(|n| (n.global_probs, n.local_probs))
        .collect();
    let labels: Vec<&[usize]> = batches
        .sources
        .iter()
        .map(|b| {
            b.labels
                .as_deref()
                .ok_or_else(|| Error::config("sources", "source batch without labels"))
        })
        .collect::<Result<_>>()?;
    let supervised = supervised_node(g, &probs, &labels)?;

    let src_feats: Vec<[NodeId; 2]> = fwd
        .sources
        .iter()
        .map(|n| [n.global_features, n.local_features])
        .collect();
    let tgt_feats = [fwd.target.global_features, fwd.target.local_features];
    let inter = plan.inter.build(g, &src_feats, tgt_feats)?;

    let (pg, pl) = (fwd.target.global_probs, fwd.target.local_probs);
    let consistency = consistency_node(g, pg, pl, cfg.consistency_mode)?;
    let pseudo = match &plan.pseudo {
        PseudoPlan::Voting(v) => mvv_node(g, pg, pl, v)?,
        PseudoPlan::Spl(s) => spl_node(g, pg, pl, s)?,
    };

    let mut total = supervised;
    let weighted = [
        (cfg.alpha, inter.total),
        (cfg.beta, Some(consistency)),
        (cfg.gamma, pseudo),
    ];
    for (weight, node) in weighted {
        if let (true, Some(node)) = (weight != 0.0, node) {
            let scaled = g.scale(node, weight);
            total = g.add(total, scaled)?;
        }
    }
    Ok(ObjectiveNodes {
        supervised,
        inter,
        consistency,
        pseudo,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivorCounts {
    /// `[global, local]` per source.
    pub sources: Vec<[usize; 2]>,
    pub target: [usize; 2],
}

/// One line of the diagnostics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iteration: usize,
    pub lr: f64,
    pub l_sup: f64,
    pub l_sid_global: f64,
    pub l_sid_local: f64,
    pub l_cid_global: f64,
    pub l_cid_local: f64,
    pub l_inter: f64,
    /// Value of the configured consistency loss.
    pub l_mcc: f64,
    /// Value of the configured pseudo-label loss.
    pub l_mvv: f64,
    pub l_total: f64,
    pub vote_passed: usize,
    pub survivors: SurvivorCounts,
    pub skipped: Vec<SkipRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_accuracy: Option<f64>,
}

impl StepDiagnostics {
    pub fn recomposed_total(&self, cfg: &RunConfig) -> f64 {
        LossComponents {
            supervised: self.l_sup,
            inter: self.l_inter,
            consistency: self.l_mcc,
            pseudo: self.l_mvv,
        }
        .total(cfg)
    }
}

/// Inputs of a training run. Target training data only exists as features.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub sources: Vec<LabeledSet>,
    pub target: UnlabeledSet,
    pub target_eval: Option<LabeledSet>,
}

impl TrainingData {
    /// Picks source train, target train and target eval splits.
    pub fn from_datasets(datasets: &[Dataset]) -> Result<Self> {
        let mut sources: Vec<&Dataset> = datasets
            .iter()
            .filter(|d| d.role == Role::Source && d.split == Split::Train)
            .collect();
        sources.sort_by_key(|d| d.domain_id);
        if sources.is_empty() {
            return Err(Error::config("data", "no source training split"));
        }
        let targets: Vec<&Dataset> = datasets
            .iter()
            .filter(|d| d.role == Role::Target && d.split == Split::Train)
            .collect();
        let target = match targets.as_slice() {
            [one] => one.unlabeled(),
            [] => return Err(Error::config("data", "no target training split")),
            _ => return Err(Error::config("data", "more than one target domain")),
        };
        let target_eval = datasets
            .iter()
            .find(|d| d.role == Role::Target && d.split == Split::Eval)
            .map(Dataset::labeled)
            .transpose()?;
        Ok(TrainingData {
            sources: sources
                .into_iter()
                .map(Dataset::labeled)
                .collect::<Result<_>>()?,
            target,
            target_eval,
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepDiagnostics>,
    pub final_accuracy: Option<f64>,
}

/// Fraction of correct [`ModelParams::infer`] labels.
pub fn accuracy_on(params: &ModelParams, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let predicted = params.infer(features)?;
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// State of a run in progress.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a TrainingData,
    params: ModelParams,
    optimizer: Optimizer,
    source_cyclers: Vec<BatchCycler>,
    target_cycler: BatchCycler,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a TrainingData) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.arch, cfg.seed)?;
        Self::with_params(cfg, data, params)
    }

    pub fn with_params(cfg: &'a RunConfig, data: &'a TrainingData, params: ModelParams) -> Result<Self> {
        if data.sources.is_empty() {
            return Err(Error::config("data", "no source training split"));
        }
        let source_cyclers = data
            .sources
            .iter()
            .map(|s| BatchCycler::new(s.features.rows(), cfg.batch_size, cfg.seed, s.domain_id))
            .collect::<Result<_>>()?;
        let target_cycler = BatchCycler::new(
            data.target.features.rows(),
            cfg.batch_size,
            cfg.seed,
            data.target.domain_id,
        )?;
        Ok(Trainer {
            cfg,
            data,
            optimizer: Optimizer::new(&params),
            params,
            source_cyclers,
            target_cycler,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn next_batches(&mut self) -> StepBatches {
        let sources = self
            .source_cyclers
            .iter_mut()
            .zip(&self.data.sources)
            .map(|(c, s)| c.next_batch(s))
            .collect();
        let target = self.target_cycler.next_batch(&self.data.target);
        StepBatches { sources, target }
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<StepDiagnostics> {
        let it = self.iteration;
        let batches = self.next_batches();
        let mut g = Graph::new();
        let ids = self.params.register(&mut g);
        let fwd = forward_step(&mut g, &self.cfg.arch, &ids, &batches)?;
        let plan = StepPlan::derive(&g, &fwd, &batches, self.cfg)?;
        let obj = build_objective(&mut g, &fwd, &batches, &plan, self.cfg)?;
        let total = g.value(obj.total).item();
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {it}")));
        }
        let grads = g.backward(obj.total)?;
        let grads: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();
        let lr = self.optimizer.step(&mut self.params, &grads, it, self.cfg)?;

        let comps = obj.components(&g);
        let (src_survivors, tgt_survivors) = plan.inter.survivors();
        self.iteration += 1;
        let mut diag = StepDiagnostics {
            iteration: it,
            lr,
            l_sup: comps.supervised,
            l_sid_global: obj.inter.component(&g, Branch::Global, Level::Sample),
            l_sid_local: obj.inter.component(&g, Branch::Local, Level::Sample),
            l_cid_global: obj.inter.component(&g, Branch::Global, Level::Cluster),
            l_cid_local: obj.inter.component(&g, Branch::Local, Level::Cluster),
            l_inter: comps.inter,
            l_mcc: comps.consistency,
            l_mvv: comps.pseudo,
            l_total: total,
            vote_passed: plan.pseudo.pass_count(),
            survivors: SurvivorCounts {
                sources: src_survivors,
                target: tgt_survivors,
            },
            skipped: obj.inter.skips.clone(),
            target_accuracy: None,
        };
        let eval_due = self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0;
        if eval_due || self.iteration == self.cfg.total_iters {
            if let Some(eval) = &self.data.target_eval {
                diag.target_accuracy =
                    Some(accuracy_on(&self.params, &eval.features, &eval.labels)?);
            }
        }
        Ok(diag)
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Runs `cfg.total_iters` iterations, reporting each step to `observer`.
pub fn train_with<F>(cfg: &RunConfig, data: &TrainingData, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepDiagnostics),
{
    let mut trainer = Trainer::new(cfg, data)?;
    let mut log = Vec::with_capacity(cfg.total_iters);
    while trainer.iteration() < cfg.total_iters {
        let it = trainer.iteration();
        let diag = trainer.step().map_err(|e| match e {
            Error::Numerical(m) if !m.contains("iteration") => {
                Error::Numerical(format!("{m} (iteration {it})"))
            }
            other => other,
        })?;
        observer(&diag);
        log.push(diag);
    }
    let params = trainer.into_params();
    let final_accuracy = match &data.target_eval {
        Some(eval) => Some(accuracy_on(&params, &eval.features, &eval.labels)?),
        None => None,
    };
    Ok(TrainOutcome {
        params,
        log,
        final_accuracy,
    })
}

pub fn train(cfg: &RunConfig, data: &TrainingData) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = RunConfig::default();
        assert_eq!(learning_rate(&cfg, 0), cfg.lr0);
        let end = learning_rate(&cfg, cfg.total_iters);
        assert!((end - 0.01 / 11f64.powf(0.75)).abs() < 1e-15);
        assert!((end - 0.001655).abs() < 1e-6);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let cfg = RunConfig {
            weight_decay: 0.0,
            ..RunConfig::default()
        };
        let p = ModelParams::init(&cfg.arch, 4).unwrap();
        let zeros: Vec<Tensor> = p
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        assert_eq!(optimizer_step(&p, &zeros, 3, &cfg).unwrap(), p);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_iteration() {
        let cfg = RunConfig::default();
        let p = ModelParams::init(&cfg.arch, 4).unwrap();
        let mut grads: Vec<Tensor> = p
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        grads[5].data_mut()[0] = f64::NAN;
        match optimizer_step(&p, &grads, 17, &cfg).unwrap_err() {
            Error::Numerical(m) => {
                assert!(m.contains("global_aligner.0.bias"), "{m}");
                assert!(m.contains("17"), "{m}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = RunConfig {
            weight_decay: 0.0,
            ..RunConfig::default()
        };
        let mut p = ModelParams::init(&cfg.arch, 1).unwrap();
        let start = p.clone();
        let ones: Vec<Tensor> = p
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::filled(t.shape(), 1.0))
            .collect();
        let mut opt = Optimizer::new(&p);
        opt.step(&mut p, &ones, 0, &cfg).unwrap();
        opt.step(&mut p, &ones, 0, &cfg).unwrap();
        let moved = start.encoder.first.weight.data()[0] - p.encoder.first.weight.data()[0];
        assert!((moved - cfg.lr0 * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn supervised_examples() {
        let half = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        let v = supervised_loss(&[(&half, &half)], &[&[0]]).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        let v2 = supervised_loss(&[(&half, &half), (&half, &half)], &[&[0], &[0]]).unwrap();
        assert_eq!(v, v2);
        let exact = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(supervised_loss(&[(&exact, &exact)], &[&[0, 1]]).unwrap(), 0.0);
        assert!(matches!(
            supervised_loss(&[(&half, &half)], &[&[2]]),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn weighted_total() {
        let c = LossComponents {
            supervised: 1.0,
            inter: 1.0,
            consistency: 1.0,
            pseudo: 1.0,
        };
        let cfg = RunConfig::default();
        assert!((total_loss(&c, &cfg) - 1.7).abs() < 1e-15);
        let baseline = RunConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(&c, &baseline), 1.0);
    }
}
