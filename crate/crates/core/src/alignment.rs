//! Hardness-weighted inter-domain alignment at sample and cluster level.
//!
//! All squared RKHS distances are evaluated through the kernel trick: with
//! `Z` the source rows stacked over the target rows and `w` the signed weight
//! vector (`+H` on the source side, `-H` on the target side),
//! `||mean_s - mean_t||^2 = w^T K(Z, Z) w`. Several such distances over one
//! batch pair share the kernel matrix and collapse to `sum(K * W)` with
//! `W = sum_t c_t w_t w_t^T`.
//!
//! Hardness weights, the reliability mask, class attributes and kernel
//! bandwidths are constants of a step: they are derived from forward values
//! before the differentiable part is recorded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, max_value, Axis, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Global,
    Local,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Global, Branch::Local];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
        }
    }
}

/// How per-sample alignment weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Relative hardness.
    Hardness,
    /// `1/|B|`, i.e. plain MMD.
    Uniform,
}

/// Mixture of Gaussian kernels `exp(-||a-b||^2 / (2 s))` averaged over
/// `s = base * m` for every multiplier `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth_multipliers: Vec<f64>,
    /// Fixed base bandwidth; `None` uses the median pairwise squared distance
    /// over the participating rows of both batches.
    #[serde(default)]
    pub base_bandwidth: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            base_bandwidth: None,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Self {
        KernelConfig {
            bandwidth_multipliers: vec![1.0],
            base_bandwidth: Some(bandwidth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_multipliers.is_empty() {
            return Err(Error::config(
                "kernel.bandwidth_multipliers",
                "needs at least one multiplier",
            ));
        }
        if self
            .bandwidth_multipliers
            .iter()
            .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(Error::config(
                "kernel.bandwidth_multipliers",
                "multipliers must be positive",
            ));
        }
        if let Some(b) = self.base_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::config("kernel.base_bandwidth", "must be positive"));
            }
        }
        Ok(())
    }

    /// Bandwidths for the given rows.
    pub fn resolve(&self, rows: &[&[f64]]) -> Vec<f64> {
        let base = self
            .base_bandwidth
            .unwrap_or_else(|| median_pairwise_sq_dist(rows));
        self.bandwidth_multipliers.iter().map(|m| base * m).collect()
    }
}

/// Median over distinct pairs; falls back to 1.0 when it is not positive.
pub fn median_pairwise_sq_dist(rows: &[&[f64]]) -> f64 {
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Instantaneous hardness of one prediction row.
///
/// Source rows drop the entry of their real class, target rows drop their
/// (first) maximum; the L2 norm of what is left is returned.
pub fn hardness(probs: &[f64], real_class: Option<usize>) -> Result<f64> {
    let dropped = match real_class {
        Some(c) if c >= probs.len() => {
            return Err(Error::Index {
                index: c,
                len: probs.len(),
            })
        }
        Some(c) => c,
        None => argmax(probs),
    };
    Ok(probs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != dropped)
        .map(|(_, p)| p * p)
        .sum::<f64>()
        .sqrt())
}

/// Normalizes hardness values onto the simplex; all-zero input gives uniform weights.
pub fn relative_weights(hardness: &[f64]) -> Result<Vec<f64>> {
    if hardness.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = hardness.iter().sum();
    if total > 0.0 {
        Ok(hardness.iter().map(|h| h / total).collect())
    } else {
        let u = 1.0 / hardness.len() as f64;
        Ok(vec![u; hardness.len()])
    }
}

/// Per-sample metadata of one side of an alignment: hardness, mask, class
/// attribute and the resulting simplex weights (zero where masked).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSide {
    pub hardness: Vec<f64>,
    pub mask: Vec<bool>,
    pub classes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AlignmentSide {
    pub fn new(hardness: Vec<f64>, mask: Vec<bool>, classes: Vec<usize>) -> Result<Self> {
        let n = hardness.len();
        if mask.len() != n || classes.len() != n {
            return Err(Error::Shape {
                op: "alignment_side",
                lhs: vec![n],
                rhs: vec![mask.len(), classes.len()],
            });
        }
        let weights = masked_weights(&hardness, &mask);
        Ok(AlignmentSide {
            hardness,
            mask,
            classes,
            weights,
        })
    }

    /// Builds a side from prediction rows.
    ///
    /// `labels` present marks a source batch (hardness drops the real class,
    /// labels become class attributes); otherwise the row argmax serves both
    /// purposes. `epsilon` keeps only rows whose max probability exceeds it.
    pub fn from_predictions(
        probs: &Tensor,
        labels: Option<&[usize]>,
        epsilon: Option<f64>,
        weighting: Weighting,
    ) -> Result<Self> {
        let n = probs.rows();
        let k = probs.cols();
        let mut hard = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let row = probs.row(i);
            let real = labels.map(|l| l[i]);
            if let Some(c) = real {
                if c >= k {
                    return Err(Error::Index { index: c, len: k });
                }
            }
            hard.push(match weighting {
                Weighting::Hardness => hardness(row, real)?,
                Weighting::Uniform => 1.0,
            });
            mask.push(epsilon.is_none_or(|eps| max_value(row) > eps));
            classes.push(real.unwrap_or_else(|| argmax(row)));
        }
        AlignmentSide::new(hard, mask, classes)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn survivors(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Weights renormalized over the unmasked samples accepted by `keep`.
    fn subset_weights(&self, keep: impl Fn(usize) -> bool) -> Option<Vec<f64>> {
        let mask: Vec<bool> = (0..self.len()).map(|i| self.mask[i] && keep(self.classes[i])).collect();
        if !mask.iter().any(|m| *m) {
            return None;
        }
        Some(masked_weights(&self.hardness, &mask))
    }
}

fn masked_weights(hardness: &[f64], mask: &[bool]) -> Vec<f64> {
    let kept: Vec<f64> = hardness
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(h, _)| *h)
        .collect();
    let mut out = vec![0.0; hardness.len()];
    if let Ok(w) = relative_weights(&kept) {
        let mut it = w.into_iter();
        for (o, m) in out.iter_mut().zip(mask) {
            if *m {
                *o = it.next().expect("one weight per kept sample");
            }
        }
    }
    out
}

/// Features of one batch together with their alignment metadata.
#[derive(Clone, Debug)]
pub struct WeightedBatchFeatures {
    pub features: Tensor,
    pub side: AlignmentSide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptySource,
    EmptyTarget,
    NoClusterTerms,
}

/// An alignment term that either contributes or was skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlignmentTerm<T> {
    Active(T),
    Skipped(SkipReason),
}

impl<T> AlignmentTerm<T> {
    pub fn active(self) -> Option<T> {
        match self {
            AlignmentTerm::Active(v) => Some(v),
            AlignmentTerm::Skipped(_) => None,
        }
    }
}

impl AlignmentTerm<f64> {
    /// Contribution to a loss: skipped terms count as zero.
    pub fn value(&self) -> f64 {
        match self {
            AlignmentTerm::Active(v) => *v,
            AlignmentTerm::Skipped(_) => 0.0,
        }
    }
}

/// Step constants for aligning one source batch with the target batch in one branch.
#[derive(Clone, Debug)]
pub struct PairPlan {
    pub source: AlignmentSide,
    pub target: AlignmentSide,
    pub bandwidths: Vec<f64>,
}

impl PairPlan {
    pub fn new(
        source: &WeightedBatchFeatures,
        target: &WeightedBatchFeatures,
        kernel: &KernelConfig,
    ) -> Result<Self> {
        if source.features.cols() != target.features.cols() {
            return Err(Error::Shape {
                op: "alignment",
                lhs: source.features.shape().to_vec(),
                rhs: target.features.shape().to_vec(),
            });
        }
        let mut rows: Vec<&[f64]> = Vec::new();
        for (wbf, _) in [(source, 0), (target, 1)] {
            for i in 0..wbf.side.len() {
                if wbf.side.mask[i] {
                    rows.push(wbf.features.row(i));
                }
            }
        }
        Ok(PairPlan {
            source: source.side.clone(),
            target: target.side.clone(),
            bandwidths: kernel.resolve(&rows),
        })
    }

    fn empty_side(&self) -> Option<SkipReason> {
        if self.source.survivors() == 0 {
            Some(SkipReason::EmptySource)
        } else if self.target.survivors() == 0 {
            Some(SkipReason::EmptyTarget)
        } else {
            None
        }
    }

    /// Mixture kernel over the stacked `[source; target]` rows.
    pub fn kernel_node(&self, g: &mut Graph, source: NodeId, target: NodeId) -> Result<NodeId> {
        let z = g.concat(&[source, target], Axis::Rows)?;
        let d = g.pairwise_sq_dists(z)?;
        let mut acc: Option<NodeId> = None;
        for &s in &self.bandwidths {
            let scaled = g.scale(d, -1.0 / (2.0 * s));
            let k = g.exp(scaled);
            acc = Some(match acc {
                None => k,
                Some(a) => g.add(a, k)?,
            });
        }
        let sum = acc.ok_or_else(|| Error::config("kernel.bandwidth_multipliers", "empty"))?;
        Ok(g.scale(sum, 1.0 / self.bandwidths.len() as f64))
    }

    fn signed(&self, src: &[f64], tgt: &[f64]) -> Vec<f64> {
        src.iter().copied().chain(tgt.iter().map(|w| -w)).collect()
    }

    /// Sample-level loss: squared distance between the weighted means.
    pub fn sample_level(&self, g: &mut Graph, kernel: NodeId) -> Result<AlignmentTerm<NodeId>> {
        if let Some(reason) = self.empty_side() {
            return Ok(AlignmentTerm::Skipped(reason));
        }
        let w = self.signed(&self.source.weights, &self.target.weights);
        let n = w.len();
        let mut outer = vec![0.0; n * n];
        add_outer(&mut outer, &w, 1.0);
        Ok(AlignmentTerm::Active(contract(g, kernel, outer, n)?))
    }

    /// Cluster-level loss: same-class distances minus different-class
    /// distances, averaged over contributing classes.
    pub fn cluster_level(
        &self,
        g: &mut Graph,
        kernel: NodeId,
        num_classes: usize,
    ) -> Result<AlignmentTerm<NodeId>> {
        if let Some(reason) = self.empty_side() {
            return Ok(AlignmentTerm::Skipped(reason));
        }
        let n = self.source.len() + self.target.len();
        let mut outer = vec![0.0; n * n];
        let mut contributing = 0usize;
        for k in 0..num_classes {
            let Some(src_k) = self.source.subset_weights(|c| c == k) else {
                continue;
            };
            let mut contributed = false;
            if let Some(same) = self.target.subset_weights(|c| c == k) {
                add_outer(&mut outer, &self.signed(&src_k, &same), 1.0);
                contributed = true;
            }
            if let Some(diff) = self.target.subset_weights(|c| c != k) {
                add_outer(&mut outer, &self.signed(&src_k, &diff), -1.0);
                contributed = true;
            }
            if contributed {
                contributing += 1;
            }
        }
        if contributing == 0 {
            return Ok(AlignmentTerm::Skipped(SkipReason::NoClusterTerms));
        }
        let inv = 1.0 / contributing as f64;
        outer.iter_mut().for_each(|v| *v *= inv);
        Ok(AlignmentTerm::Active(contract(g, kernel, outer, n)?))
    }
}

fn add_outer(acc: &mut [f64], w: &[f64], coef: f64) {
    let n = w.len();
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let wi = coef * w[i];
        for j in 0..n {
            acc[i * n + j] += wi * w[j];
        }
    }
}

fn contract(g: &mut Graph, kernel: NodeId, outer: Vec<f64>, n: usize) -> Result<NodeId> {
    let w = g.constant(Tensor::new(vec![n, n], outer)?);
    let prod = g.mul(kernel, w)?;
    Ok(g.sum(prod))
}

fn evaluate_pair<F>(
    source: &WeightedBatchFeatures,
    target: &WeightedBatchFeatures,
    kernel: &KernelConfig,
    term: F,
) -> Result<AlignmentTerm<f64>>
where
    F: FnOnce(&PairPlan, &mut Graph, NodeId) -> Result<AlignmentTerm<NodeId>>,
{
    kernel.validate()?;
    let plan = PairPlan::new(source, target, kernel)?;
    let mut g = Graph::new();
    let s = g.constant(source.features.clone());
    let t = g.constant(target.features.clone());
    let k = plan.kernel_node(&mut g, s, t)?;
    Ok(match term(&plan, &mut g, k)? {
        AlignmentTerm::Active(node) => AlignmentTerm::Active(g.value(node).item()),
        AlignmentTerm::Skipped(r) => AlignmentTerm::Skipped(r),
    })
}

/// Hardness-weighted MMD between two batches.
pub fn weighted_mmd(
    source: &WeightedBatchFeatures,
    target: &WeightedBatchFeatures,
    kernel: &KernelConfig,
) -> Result<AlignmentTerm<f64>> {
    evaluate_pair(source, target, kernel, |p, g, k| p.sample_level(g, k))
}

/// Class-conditional alignment between two batches.
pub fn cluster_alignment(
    source: &WeightedBatchFeatures,
    target: &WeightedBatchFeatures,
    kernel: &KernelConfig,
    num_classes: usize,
) -> Result<AlignmentTerm<f64>> {
    evaluate_pair(source, target, kernel, |p, g, k| {
        p.cluster_level(g, k, num_classes)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterDomainConfig {
    pub lambda: f64,
    /// Reliability threshold; `None` disables the filter.
    pub epsilon: Option<f64>,
    pub weighting: Weighting,
    pub kernel: KernelConfig,
    pub num_classes: usize,
}

/// Borrowed per-branch values of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchView<'a> {
    pub features: &'a Tensor,
    pub probs: &'a Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DomainView<'a> {
    pub global: BranchView<'a>,
    pub local: BranchView<'a>,
    /// Present for source batches only.
    pub labels: Option<&'a [usize]>,
}

impl<'a> DomainView<'a> {
    pub fn branch(&self, b: Branch) -> BranchView<'a> {
        match b {
            Branch::Global => self.global,
            Branch::Local => self.local,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Sample,
    Cluster,
}

/// A skipped alignment term, for step diagnostics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub source: usize,
    pub branch: Branch,
    pub level: Level,
    pub reason: SkipReason,
}

/// Step constants for the whole inter-domain loss.
#[derive(Clone, Debug)]
pub struct InterDomainPlan {
    /// `pairs[n][b]` aligns source `n` with the target in branch `b`.
    pub pairs: Vec<[PairPlan; 2]>,
    pub lambda: f64,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TermNode {
    pub source: usize,
    pub branch: Branch,
    pub level: Level,
    pub node: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct InterDomainNodes {
    /// `None` when every term was skipped.
    pub total: Option<NodeId>,
    pub terms: Vec<TermNode>,
    pub skips: Vec<SkipRecord>,
}

impl InterDomainNodes {
    /// Sum of active terms matching `branch` and `level`, across sources.
    pub fn component(&self, g: &Graph, branch: Branch, level: Level) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.branch == branch && t.level == level)
            .map(|t| g.value(t.node).item())
            .sum()
    }
}

impl InterDomainPlan {
    pub fn derive(
        sources: &[DomainView<'_>],
        target: &DomainView<'_>,
        cfg: &InterDomainConfig,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::config("sources", "need at least one source batch"));
        }
        cfg.kernel.validate()?;
        let target_sides: Vec<WeightedBatchFeatures> = Branch::BOTH
            .iter()
            .map(|&b| {
                let v = target.branch(b);
                Ok(WeightedBatchFeatures {
                    features: v.features.clone(),
                    side: AlignmentSide::from_predictions(v.probs, None, cfg.epsilon, cfg.weighting)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut pairs = Vec::with_capacity(sources.len());
        for src in sources {
            let labels = src
                .labels
                .ok_or_else(|| Error::config("sources", "source batches need labels"))?;
            let mut per_branch = Vec::with_capacity(2);
            for (bi, &b) in Branch::BOTH.iter().enumerate() {
                let v = src.branch(b);
                let wbf = WeightedBatchFeatures {
                    features: v.features.clone(),
                    side: AlignmentSide::from_predictions(
                        v.probs,
                        Some(labels),
                        cfg.epsilon,
                        cfg.weighting,
                    )?,
                };
                per_branch.push(PairPlan::new(&wbf, &target_sides[bi], &cfg.kernel)?);
            }
            let local = per_branch.pop().expect("two branches");
            let global = per_branch.pop().expect("two branches");
            pairs.push([global, local]);
        }
        Ok(InterDomainPlan {
            pairs,
            lambda: cfg.lambda,
            num_classes: cfg.num_classes,
        })
    }

    /// Records every term. `source_features[n][b]` and `target_features[b]`
    /// are the feature nodes, branches ordered global then local.
    pub fn build(
        &self,
        g: &mut Graph,
        source_features: &[[NodeId; 2]],
        target_features: [NodeId; 2],
    ) -> Result<InterDomainNodes> {
        let mut out = InterDomainNodes::default();
        let mut total: Option<NodeId> = None;
        let mut accumulate = |g: &mut Graph, node: NodeId, coef: f64| -> Result<()> {
            if coef == 0.0 {
                return Ok(());
            }
            let scaled = if coef == 1.0 { node } else { g.scale(node, coef) };
            total = Some(match total {
                None => scaled,
                Some(t) => g.add(t, scaled)?,
            });
            Ok(())
        };
        for (n, pair) in self.pairs.iter().enumerate() {
            for (bi, &branch) in Branch::BOTH.iter().enumerate() {
                let plan = &pair[bi];
                let k = plan.kernel_node(g, source_features[n][bi], target_features[bi])?;
                let levels = [
                    (Level::Sample, plan.sample_level(g, k)?, 1.0),
                    (Level::Cluster, plan.cluster_level(g, k, self.num_classes)?, self.lambda),
                ];
                for (level, term, coef) in levels {
                    match term {
                        AlignmentTerm::Active(node) => {
                            out.terms.push(TermNode {
                                source: n,
                                branch,
                                level,
                                node,
                            });
                            accumulate(g, node, coef)?;
                        }
                        AlignmentTerm::Skipped(reason) => out.skips.push(SkipRecord {
                            source: n,
                            branch,
                            level,
                            reason,
                        }),
                    }
                }
            }
        }
        out.total = total;
        Ok(out)
    }

    /// Unmasked sample counts as `(per source [global, local], target [global, local])`.
    pub fn survivors(&self) -> (Vec<[usize; 2]>, [usize; 2]) {
        let src = self
            .pairs
            .iter()
            .map(|p| [p[0].source.survivors(), p[1].source.survivors()])
            .collect();
        let tgt = self
            .pairs
            .first()
            .map(|p| [p[0].target.survivors(), p[1].target.survivors()])
            .unwrap_or([0, 0]);
        (src, tgt)
    }
}

/// Value of the inter-domain loss with its skip diagnostics.
#[derive(Clone, Debug)]
pub struct InterDomainValue {
    pub total: f64,
    pub skips: Vec<SkipRecord>,
}

pub fn inter_domain_loss(
    sources: &[DomainView<'_>],
    target: &DomainView<'_>,
    cfg: &InterDomainConfig,
) -> Result<InterDomainValue> {
    let plan = InterDomainPlan::derive(sources, target, cfg)?;
    let mut g = Graph::new();
    let src_nodes: Vec<[NodeId; 2]> = sources
        .iter()
        .map(|s| {
            [
                g.constant(s.global.features.clone()),
                g.constant(s.local.features.clone()),
            ]
        })
        .collect();
    let tgt_nodes = [
        g.constant(target.global.features.clone()),
        g.constant(target.local.features.clone()),
    ];
    let nodes = plan.build(&mut g, &src_nodes, tgt_nodes)?;
    Ok(InterDomainValue {
        total: nodes.total.map(|t| g.value(t).item()).unwrap_or(0.0),
        skips: nodes.skips,
    })
}
