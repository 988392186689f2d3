//! Helpers shared by integration test targets.
#![allow(dead_code)]

use lacmfer::data::BatchCycler;
use lacmfer::model::forward_nodes;
use lacmfer::training::{supervised_node, Optimizer};
use lacmfer::{Graph, ModelParams, RunConfig, Tensor, TrainingData};

/// A supervised-only loop written against the public building blocks:
/// source batches only, cross-entropy on both branches, momentum SGD.
pub fn supervised_only(cfg: &RunConfig, data: &TrainingData) -> (ModelParams, Vec<f64>) {
    let mut params = ModelParams::init(&cfg.arch, cfg.seed).unwrap();
    let mut opt = Optimizer::new(&params);
    let mut cyclers: Vec<BatchCycler> = data
        .sources
        .iter()
        .map(|s| BatchCycler::new(s.features.rows(), cfg.batch_size, cfg.seed, s.domain_id).unwrap())
        .collect();
    let mut losses = Vec::new();
    for it in 0..cfg.total_iters {
        let batches: Vec<_> = cyclers.iter_mut().zip(&data.sources).map(|(c, s)| c.next_batch(s)).collect();
        let mut g = Graph::new();
        let ids = params.register(&mut g);
        let mut probs = Vec::new();
        for b in &batches {
            let x = g.constant(b.features.clone());
            let n = forward_nodes(&mut g, &cfg.arch, &ids, x).unwrap();
            probs.push((n.global_probs, n.local_probs));
        }
        let labels: Vec<&[usize]> = batches.iter().map(|b| b.labels.as_deref().unwrap()).collect();
        let loss = supervised_node(&mut g, &probs, &labels).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let grads: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();
        opt.step(&mut params, &grads, it, cfg).unwrap();
    }
    (params, losses)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kernel(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d = sq_dist(a, b);
    bandwidths.iter().map(|s| (-d / (2.0 * s)).exp()).sum::<f64>() / bandwidths.len() as f64
}

/// `|| sum_i ws_i phi(s_i) - sum_j wt_j phi(t_j) ||^2` by explicit double sums.
pub fn brute_mmd(s: &[Vec<f64>], ws: &[f64], t: &[Vec<f64>], wt: &[f64], bw: &[f64]) -> f64 {
    let mut ss = 0.0;
    for (a, wa) in s.iter().zip(ws) {
        for (b, wb) in s.iter().zip(ws) {
            ss += wa * wb * kernel(a, b, bw);
        }
    }
    let mut tt = 0.0;
    for (a, wa) in t.iter().zip(wt) {
        for (b, wb) in t.iter().zip(wt) {
            tt += wa * wb * kernel(a, b, bw);
        }
    }
    let mut st = 0.0;
    for (a, wa) in s.iter().zip(ws) {
        for (b, wb) in t.iter().zip(wt) {
            st += wa * wb * kernel(a, b, bw);
        }
    }
    ss + tt - 2.0 * st
}

