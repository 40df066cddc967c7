//! Accuracy, confusion matrices, precision/recall/F1 and one-vs-rest AUC.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::topk;
use crate::tensor::{Element, Tensor};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace() as f64, self.total() as f64)
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!("{} labels but {} predictions", truth.len(), pred.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::invalid(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

fn rows<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    match *probs.shape() {
        [n, k] if n == labels.len() => Ok(k),
        ref s => Err(Error::shape("metrics", format!("[{}, K]", labels.len()), format!("{s:?}"))),
    }
}

/// Fraction of rows whose true class is among the `k` most probable (ties
/// resolved toward lower class indices).
pub fn topk_accuracy<T: Element>(probs: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let classes = rows(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let mut hits = 0usize;
    for (row, &l) in probs.data().chunks(classes).zip(labels) {
        if topk(row, k)?.iter().any(|&(c, _)| c == l) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrfSummary {
    pub per_class: Vec<Prf>,
    /// Unweighted means of the per-class values.
    pub macro_avg: Prf,
    /// `f1_score(macro precision, macro recall)`.
    pub aggregate_f1: f64,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> PrfSummary {
    let k = cm.k;
    let per_class: Vec<Prf> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, cm.support(c) as f64);
            Prf {
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let mean = |f: fn(&Prf) -> f64| per_class.iter().map(f).sum::<f64>() / k.max(1) as f64;
    let macro_avg = Prf {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
    };
    PrfSummary {
        aggregate_f1: f1_score(macro_avg.precision, macro_avg.recall),
        per_class,
        macro_avg,
    }
}

/// Binary AUC by the rank-sum formula with average ranks for ties, i.e.
/// `P(pos > neg) + P(pos = neg) / 2`. `None` without both classes.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC per class; absent for classes lacking positives or
/// negatives.
pub fn roc_auc<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = rows(probs, labels)?;
    Ok((0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.data().iter().skip(c).step_by(k).map(|v| v.as_f64()).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(&scores, &pos)
        })
        .collect())
}

/// ROC points `(threshold, fpr, tpr)`, one per distinct score, starting at
/// `(inf, 0, 0)`.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count().max(1) as f64;
    let n_neg = positive.iter().filter(|&&p| !p).count().max(1) as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (n, &i) in idx.iter().enumerate() {
        if positive[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if n + 1 == idx.len() || scores[idx[n + 1]] != scores[i] {
            out.push((scores[i], fp / n_neg, tp / n_pos));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Harmonic combination of the macro precision and recall.
    pub aggregate_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top2: f64,
    pub per_class: Vec<ClassReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
    /// Per-class one-vs-rest AUC; `null` when undefined.
    pub auc: Vec<Option<f64>>,
    pub confusion_matrix: Vec<Vec<u64>>,
}

/// Builds the full report from `[N, K]` probabilities.
pub fn report_from_probs<T: Element>(probs: &Tensor<T>, labels: &[usize], names: &[String]) -> Result<MetricsReport> {
    let k = rows(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if names.len() != k {
        return Err(Error::invalid(format!("{} class names for {k} classes", names.len())));
    }
    let pred: Vec<usize> = probs.data().chunks(k).map(crate::training::argmax).collect();
    let cm = confusion_matrix(labels, &pred, k)?;
    let prf = precision_recall_f1(&cm);
    Ok(MetricsReport {
        top1: topk_accuracy(probs, labels, 1)?,
        top2: topk_accuracy(probs, labels, 2.min(k))?,
        per_class: prf
            .per_class
            .iter()
            .enumerate()
            .map(|(c, p)| ClassReport {
                label: names[c].clone(),
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                support: cm.support(c),
            })
            .collect(),
        macro_avg: MacroReport {
            precision: prf.macro_avg.precision,
            recall: prf.macro_avg.recall,
            f1: prf.macro_avg.f1,
            aggregate_f1: prf.aggregate_f1,
        },
        auc: roc_auc(probs, labels)?,
        confusion_matrix: cm.counts,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(9);
        let mut s = format!("top-1 accuracy  {:.4}\ntop-2 accuracy  {:.4}\n\n", self.top1, self.top2);
        s.push_str(&format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "class", "precision", "recall", "f1", "auc", "support"
        ));
        for (c, auc) in self.per_class.iter().zip(&self.auc) {
            let auc = auc.map_or("-".to_string(), |a| format!("{a:.4}"));
            s.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}  {:>7}\n",
                c.label, c.precision, c.recall, c.f1, auc, c.support
            ));
        }
        let m = &self.macro_avg;
        s.push_str(&format!(
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}\n",
            "macro", m.precision, m.recall, m.f1
        ));
        s.push_str(&format!("{:<width$}  {:>9}  {:>9}  {:>9.4}\n\nconfusion matrix (rows: true)\n", "aggregate", "", "", m.aggregate_f1));
        for (c, row) in self.per_class.iter().zip(&self.confusion_matrix) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            s.push_str(&format!("{:<width$}{}\n", c.label, cells.join("")));
        }
        s
    }
}

/// `class,threshold,fpr,tpr` rows for every class with a defined curve.
pub fn roc_csv<T: Element>(probs: &Tensor<T>, labels: &[usize], names: &[String]) -> Result<String> {
    let k = rows(probs, labels)?;
    let mut s = String::from("class,threshold,fpr,tpr\n");
    for c in 0..k {
        let scores: Vec<f64> = probs.data().iter().skip(c).step_by(k).map(|v| v.as_f64()).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if auc(&scores, &pos).is_none() {
            continue;
        }
        for (t, f, tp) in roc_curve(&scores, &pos) {
            s.push_str(&format!("{},{t},{f},{tp}\n", names.get(c).map_or("?", String::as_str)));
        }
    }
    Ok(s)
}
