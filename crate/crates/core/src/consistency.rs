//! Cross-branch agreement on the target batch: the prediction consistency
//! matrix, its clustering-consistency loss, voting-based pseudo labels and
//! the alternative consistency and pseudo-labeling modes used for ablations.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, max_value, Graph, NodeId, Tensor};

/// `ln` inputs are clamped at `e^-30` inside cross-entropy and KL terms.
pub const LOG_FLOOR: f64 = 9.357_622_968_840_175e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    Mcc,
    Kl,
    L1,
    Mse,
}

impl ConsistencyMode {
    pub const ALL: [ConsistencyMode; 4] = [
        ConsistencyMode::Mcc,
        ConsistencyMode::Kl,
        ConsistencyMode::L1,
        ConsistencyMode::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConsistencyMode::Mcc => "mcc",
            ConsistencyMode::Kl => "kl",
            ConsistencyMode::L1 => "l1",
            ConsistencyMode::Mse => "mse",
        }
    }
}

impl FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConsistencyMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("consistency_mode", format!("unknown mode `{s}`")))
    }
}

/// `K x K` product of the transposed global predictions with the local ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcMatrix {
    pub values: Tensor,
}

fn check_pair(global: &Tensor, local: &Tensor) -> Result<()> {
    global.require_rank2("consistency")?;
    local.require_rank2("consistency")?;
    if global.shape() != local.shape() {
        return Err(Error::Shape {
            op: "consistency",
            lhs: global.shape().to_vec(),
            rhs: local.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mpc_node(g: &mut Graph, global: NodeId, local: NodeId) -> Result<NodeId> {
    check_pair(g.value(global), g.value(local))?;
    let gt = g.transpose(global)?;
    g.matmul(gt, local)
}

pub fn mpc(global: &Tensor, local: &Tensor) -> Result<MpcMatrix> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(global.clone()), g.constant(local.clone()));
    let m = mpc_node(&mut g, a, b)?;
    Ok(MpcMatrix {
        values: g.value(m).clone(),
    })
}

/// `S(colnorm(|m|) - I)`; all-zero columns stay zero.
fn normalized_deviation(g: &mut Graph, m: NodeId) -> Result<NodeId> {
    let k = g.value(m).rows();
    let abs = g.abs(m);
    let colsum = g.col_sums(abs)?;
    let zero_cols: Vec<f64> = g
        .value(colsum)
        .data()
        .iter()
        .map(|&s| if s == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let guard = g.constant(Tensor::new(vec![1, k], zero_cols)?);
    let denom = g.add(colsum, guard)?;
    let log = g.log(denom);
    let neg = g.scale(log, -1.0);
    let recip = g.exp(neg);
    let ones = g.ones(k, 1);
    let spread = g.matmul(ones, recip)?;
    let normalized = g.mul(abs, spread)?;
    let mut eye = Tensor::zeros(&[k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = 1.0;
    }
    let eye = g.constant(eye);
    let diff = g.sub(normalized, eye)?;
    let a = g.abs(diff);
    Ok(g.sum(a))
}

pub fn mcc_node(g: &mut Graph, m: NodeId, num_classes: usize) -> Result<NodeId> {
    let (r, c) = g.value(m).require_rank2("mcc")?;
    if r != num_classes || c != num_classes {
        return Err(Error::Shape {
            op: "mcc",
            lhs: vec![r, c],
            rhs: vec![num_classes, num_classes],
        });
    }
    let direct = normalized_deviation(g, m)?;
    let mt = g.transpose(m)?;
    let transposed = normalized_deviation(g, mt)?;
    let total = g.add(direct, transposed)?;
    Ok(g.scale(total, 1.0 / (2.0 * num_classes as f64)))
}

pub fn mcc_loss(m: &MpcMatrix, num_classes: usize) -> Result<f64> {
    let mut g = Graph::new();
    let n = g.constant(m.values.clone());
    let l = mcc_node(&mut g, n, num_classes)?;
    Ok(g.value(l).item())
}

/// `-sum(Y * ln P)` summed over all rows.
pub fn cross_entropy_sum(g: &mut Graph, probs: NodeId, targets: NodeId) -> Result<NodeId> {
    let logp = g.log_floored(probs, LOG_FLOOR);
    let prod = g.mul(targets, logp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

/// Records the loss selected by `mode` for one target batch.
pub fn consistency_node(
    g: &mut Graph,
    global: NodeId,
    local: NodeId,
    mode: ConsistencyMode,
) -> Result<NodeId> {
    check_pair(g.value(global), g.value(local))?;
    let rows = g.value(global).rows() as f64;
    match mode {
        ConsistencyMode::Mcc => {
            let k = g.value(global).cols();
            let m = mpc_node(g, global, local)?;
            mcc_node(g, m, k)
        }
        ConsistencyMode::Kl => {
            let diff = g.sub(global, local)?;
            let lg = g.log_floored(global, LOG_FLOOR);
            let ll = g.log_floored(local, LOG_FLOOR);
            let ldiff = g.sub(lg, ll)?;
            let prod = g.mul(diff, ldiff)?;
            let s = g.sum(prod);
            Ok(g.scale(s, 1.0 / rows))
        }
        ConsistencyMode::L1 => {
            let diff = g.sub(global, local)?;
            let a = g.abs(diff);
            Ok(g.mean(a))
        }
        ConsistencyMode::Mse => {
            let diff = g.sub(global, local)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
    }
}

pub fn consistency_loss(global: &Tensor, local: &Tensor, mode: ConsistencyMode) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(global.clone()), g.constant(local.clone()));
    let l = consistency_node(&mut g, a, b, mode)?;
    Ok(g.value(l).item())
}

/// Outcome of multi-view voting on a target batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteResult {
    /// Agreed class for samples that pass, `None` otherwise.
    pub labels: Vec<Option<usize>>,
}

impl VoteResult {
    pub fn passed(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn pass_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Rows one-hot at the pseudo label, zero rows for failing samples.
    pub fn target_matrix(&self, num_classes: usize) -> Tensor {
        one_hot_rows(&self.labels, num_classes)
    }
}

fn one_hot_rows(labels: &[Option<usize>], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            t.data_mut()[i * k + c] = 1.0;
        }
    }
    t
}

/// A sample passes when both branches share an argmax and at least one
/// branch is more confident than `tau`.
pub fn vote(global: &Tensor, local: &Tensor, tau: f64) -> Result<VoteResult> {
    check_pair(global, local)?;
    let labels = (0..global.rows())
        .map(|i| {
            let (pg, pl) = (global.row(i), local.row(i));
            let class = argmax(pg);
            let agree = class == argmax(pl);
            let confident = max_value(pg) > tau || max_value(pl) > tau;
            (agree && confident).then_some(class)
        })
        .collect();
    Ok(VoteResult { labels })
}

/// Voting loss; `None` when no sample passed. Votes are constants.
pub fn mvv_node(
    g: &mut Graph,
    global: NodeId,
    local: NodeId,
    votes: &VoteResult,
) -> Result<Option<NodeId>> {
    check_pair(g.value(global), g.value(local))?;
    if votes.pass_count() == 0 {
        return Ok(None);
    }
    let (rows, k) = (g.value(global).rows(), g.value(global).cols());
    let y = g.constant(votes.target_matrix(k));
    let cg = cross_entropy_sum(g, global, y)?;
    let cl = cross_entropy_sum(g, local, y)?;
    let both = g.add(cg, cl)?;
    Ok(Some(g.scale(both, 1.0 / rows as f64)))
}

pub fn mvv_loss(global: &Tensor, local: &Tensor, votes: &VoteResult) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(global.clone()), g.constant(local.clone()));
    Ok(mvv_node(&mut g, a, b, votes)?
        .map(|n| g.value(n).item())
        .unwrap_or(0.0))
}

/// Per-branch confident argmax labels used by separate pseudo labeling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplSelection {
    pub global: Vec<Option<usize>>,
    pub local: Vec<Option<usize>>,
}

impl SplSelection {
    pub fn select(global: &Tensor, local: &Tensor, tau: f64) -> Result<Self> {
        check_pair(global, local)?;
        let pick = |p: &Tensor| -> Vec<Option<usize>> {
            (0..p.rows())
                .map(|i| (max_value(p.row(i)) > tau).then(|| argmax(p.row(i))))
                .collect()
        };
        Ok(SplSelection {
            global: pick(global),
            local: pick(local),
        })
    }

    pub fn pass_count(&self) -> usize {
        self.global.iter().chain(&self.local).filter(|l| l.is_some()).count()
    }
}

/// Separate pseudo-labeling loss; `None` when neither branch selected anything.
pub fn spl_node(
    g: &mut Graph,
    global: NodeId,
    local: NodeId,
    selection: &SplSelection,
) -> Result<Option<NodeId>> {
    check_pair(g.value(global), g.value(local))?;
    let (rows, k) = (g.value(global).rows(), g.value(global).cols());
    let mut total: Option<NodeId> = None;
    for (probs, labels) in [(global, &selection.global), (local, &selection.local)] {
        if labels.iter().all(Option::is_none) {
            continue;
        }
        let y = g.constant(one_hot_rows(labels, k));
        let ce = cross_entropy_sum(g, probs, y)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    Ok(total.map(|t| g.scale(t, 1.0 / rows as f64)))
}

pub fn spl_loss(global: &Tensor, local: &Tensor, tau: f64) -> Result<f64> {
    let selection = SplSelection::select(global, local, tau)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(global.clone()), g.constant(local.clone()));
    Ok(spl_node(&mut g, a, b, &selection)?
        .map(|n| g.value(n).item())
        .unwrap_or(0.0))
}
