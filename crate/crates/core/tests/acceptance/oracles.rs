//! Attention reduction chain and metric oracles on random instances.

use fpc_core::attention::{multi_head_attention, scalar_dot_attention, seq_self_attention, MhaWeights};
use fpc_core::graph::{Graph, NodeId};
use fpc_core::layers::init;
use fpc_core::metrics::{auc, confusion_matrix, precision_recall_f1, roc_auc, topk_accuracy};
use fpc_core::rng;
use fpc_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::Outcome;

const ATTENTION_CASES: u64 = 200;
const METRIC_CASES: u64 = 1000;

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

/// Runs one mechanism on `x: [1, L, d]` with the given projections.
enum Mech {
    Sda,
    Mha(usize),
    Ssa,
}

fn run(mech: &Mech, x: &Tensor<f64>, w: &[Tensor<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let ws: Vec<NodeId> = w.iter().map(|t| g.constant(t.clone())).collect();
    let a = match mech {
        Mech::Sda => scalar_dot_attention(&mut g, xn, xn, xn),
        Mech::Mha(heads) => multi_head_attention(
            &mut g,
            xn,
            xn,
            xn,
            &MhaWeights { wq: ws[0], wk: ws[1], wv: ws[2], wo: ws[3], heads: *heads },
        ),
        Mech::Ssa => seq_self_attention(&mut g, xn, ws[0], ws[1], ws[2]),
    }
    .expect("attention runs");
    (g.value(a.output).clone(), g.value(a.weights).clone())
}

/// Gathers token rows `[1, L, d]` in the order `perm`.
fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[2];
    let data: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn attention_reductions() -> Outcome {
    let (mut chain, mut stochastic, mut equivariance) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..ATTENTION_CASES {
        let mut r = rng::stream(case, "attention-case", 0);
        let l = r.random_range(1..9usize);
        let heads = r.random_range(1..4usize);
        let d = heads * r.random_range(1..4usize);
        let x = init::uniform::<f64>(&[1, l, d], case, 0).map(|v| 2.0 * v);

        let eye = Tensor::<f64>::eye(d);
        let ids = vec![eye.clone(), eye.clone(), eye.clone(), eye];
        let (sda, _) = run(&Mech::Sda, &x, &[]);
        let (mha, _) = run(&Mech::Mha(1), &x, &ids);
        let (ssa, _) = run(&Mech::Ssa, &x, &ids);
        chain = chain.max(max_diff(&mha, &sda)).max(max_diff(&ssa, &sda));

        let proj: Vec<Tensor<f64>> = (1..5).map(|i| init::uniform(&[d, d], case, i)).collect();
        let perm = {
            let mut p: Vec<usize> = (0..l).collect();
            p.shuffle(&mut r);
            p
        };
        let px = permute_tokens(&x, &perm);
        for mech in [Mech::Sda, Mech::Mha(heads), Mech::Ssa] {
            let (out, weights) = run(&mech, &x, &proj);
            for row in weights.data().chunks(l) {
                stochastic = stochastic.max((row.iter().sum::<f64>() - 1.0).abs());
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    stochastic = f64::INFINITY;
                }
            }
            let (pout, _) = run(&mech, &px, &proj);
            equivariance = equivariance.max(max_diff(&pout, &permute_tokens(&out, &perm)));
        }
    }
    let ok = chain <= 1e-6 && stochastic <= 1e-6 && equivariance <= 1e-6;
    crate::check(
        ok,
        format!(
            "{ATTENTION_CASES} cases: reduction chain {chain:.1e}, row sums {stochastic:.1e}, permutation {equivariance:.1e}"
        ),
    )
}

fn oracle_topk(probs: &[f64], k_classes: usize, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &l) in probs.chunks(k_classes).zip(labels) {
        let mut order: Vec<usize> = (0..k_classes).collect();
        // Stable sort: equal scores keep the lower index first.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        if order[..k].contains(&l) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn oracle_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut wins, mut ties, mut pairs) = (0.0, 0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    ties += 1.0;
                }
            }
        }
    }
    (pairs > 0.0).then(|| (wins + 0.5 * ties) / pairs)
}

pub fn metric_oracles() -> Outcome {
    let mut mismatches = Vec::new();
    for case in 0..METRIC_CASES {
        let mut r = rng::stream(case, "metric-case", 0);
        let k = r.random_range(2..6usize);
        let n = r.random_range(1..25usize);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        // Scores on a coarse grid so ties are common.
        let probs: Vec<f64> = (0..n * k).map(|_| r.random_range(0..8u32) as f64 / 8.0).collect();
        let pt = Tensor::new(&[n, k], probs.clone()).unwrap();
        for kk in 1..=k {
            let got = topk_accuracy(&pt, &labels, kk).unwrap();
            if got != oracle_topk(&probs, k, &labels, kk) {
                mismatches.push(format!("case {case}: top-{kk}"));
            }
        }

        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let cm = confusion_matrix(&labels, &pred, k).unwrap();
        let mut counts = vec![vec![0u64; k]; k];
        for (&t, &p) in labels.iter().zip(&pred) {
            counts[t][p] += 1;
        }
        if cm.counts != counts {
            mismatches.push(format!("case {case}: confusion"));
        }
        let prf = precision_recall_f1(&cm);
        for c in 0..k {
            let tp = labels.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = labels.iter().zip(&pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fneg = labels.iter().zip(&pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            let got = prf.per_class[c];
            if (got.precision, got.recall, got.f1) != (precision, recall, f1) {
                mismatches.push(format!("case {case}: P/R/F1 class {c}"));
            }
        }

        let aucs = roc_auc(&pt, &labels).unwrap();
        for (c, got) in aucs.iter().enumerate() {
            let scores: Vec<f64> = probs.iter().skip(c).step_by(k).copied().collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if *got != oracle_auc(&scores, &pos) {
                mismatches.push(format!("case {case}: auc class {c}"));
            }
            // Strictly increasing transforms leave the ranking, hence the AUC, unchanged.
            for f in [|v: f64| v.exp(), |v: f64| v * v * v + 3.0 * v - 7.0, |v: f64| 1.0 / (1.0 + (-4.0 * v).exp())] {
                let t: Vec<f64> = scores.iter().map(|&v| f(v)).collect();
                if auc(&t, &pos) != *got {
                    mismatches.push(format!("case {case}: auc monotone class {c}"));
                }
            }
        }
    }
    let detail = format!("{METRIC_CASES} random instances, {} mismatches", mismatches.len());
    if mismatches.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}: {}", mismatches.iter().take(5).cloned().collect::<Vec<_>>().join(", ")))
    }
}
