//! Inference modes, accuracy bookkeeping and incremental metrics.

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, rotate90, Corruption, LabeledDataset, Rotation};
use crate::error::{Error, Result};
use crate::model::IncrementalModel;
use crate::prototype::PrototypeMemory;
use crate::tensor::{softmax_row, Tensor};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Equal-width confidence bins for calibration error.
pub const ECE_BINS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// View-0 logits only.
    Plain,
    /// Mean over the four rotations of each view's own logits.
    Ensemble,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Plain => "plain",
            InferenceMode::Ensemble => "ensemble",
        }
    }
}

fn rotate_batch(batch: &Tensor, rot: Rotation) -> Result<Tensor> {
    let shape = batch.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let mut out = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks(per) {
        out.extend(rotate90(img, c, h, w, rot)?);
    }
    Tensor::new(shape, out)
}

/// `B×S` class scores (logits) in head slot order.
pub fn class_scores(model: &IncrementalModel, batch: &Tensor, mode: InferenceMode) -> Result<Tensor> {
    let head = &model.head;
    let slots = head.class_ids().len();
    if slots == 0 {
        return Err(Error::Precondition("model has no classes yet".into()));
    }
    let b = batch.shape()[0];
    let gather = |logits: &Tensor, view: usize, acc: &mut [f64], scale: f64| {
        for i in 0..b {
            let row = logits.row(i);
            for s in 0..slots {
                acc[i * slots + s] += scale * row[head.node(s, view)];
            }
        }
    };
    let mut acc = vec![0.0; b * slots];
    match mode {
        InferenceMode::Plain => gather(&model.logits(batch)?, 0, &mut acc, 1.0),
        InferenceMode::Ensemble => {
            if head.views() != 4 {
                return Err(Error::Config(
                    "ensemble inference needs a model trained with rotation views".into(),
                ));
            }
            for rot in Rotation::ALL {
                let logits = model.logits(&rotate_batch(batch, rot)?)?;
                gather(&logits, rot.index(), &mut acc, 0.25);
            }
        }
    }
    Tensor::new(vec![b, slots], acc)
}

/// Arg-max over class scores; ties resolve to the lowest class id.
fn argmax(row: &[f64], ids: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || (v == row[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    best
}

/// Predicted original class ids together with the max softmax probability.
pub fn predict_with_confidence(
    model: &IncrementalModel,
    data: &LabeledDataset,
    mode: InferenceMode,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let ids = model.head.class_ids();
    let mut preds = Vec::with_capacity(data.len());
    let mut conf = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let scores = class_scores(model, &data.batch(chunk)?, mode)?;
        for i in 0..chunk.len() {
            let row = scores.row(i);
            let k = argmax(row, ids);
            let p = softmax_row(row);
            preds.push(ids[k]);
            conf.push(p[k]);
        }
    }
    Ok((preds, conf))
}

pub fn predict_plain(model: &IncrementalModel, data: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(predict_with_confidence(model, data, InferenceMode::Plain)?.0)
}

pub fn predict_ensemble(model: &IncrementalModel, data: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(predict_with_confidence(model, data, InferenceMode::Ensemble)?.0)
}

/// Nearest-class-mean prediction against the view-0 prototypes in memory.
pub fn ncm_predict(
    model: &IncrementalModel,
    memory: &PrototypeMemory,
    data: &LabeledDataset,
) -> Result<Vec<usize>> {
    let head = &model.head;
    if head.class_ids().is_empty() {
        return Err(Error::Precondition("model has no classes yet".into()));
    }
    let protos = head
        .class_ids()
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            memory
                .prototype(head.node(s, 0))
                .map(|p| (c, p))
                .ok_or_else(|| Error::Config(format!("no prototype stored for class {c}")))
        })
        .collect::<Result<Vec<(usize, &[f64])>>>()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let z = model.extractor.extract(&data.batch(chunk)?)?;
        for i in 0..chunk.len() {
            let f = z.row(i);
            let mut best = (f64::INFINITY, protos[0].0);
            for &(c, p) in &protos {
                let d: f64 = f.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 || (d == best.0 && c < best.1) {
                    best = (d, c);
                }
            }
            out.push(best.1);
        }
    }
    Ok(out)
}

/// `(correct, total)` on a labeled split.
pub fn accuracy_counts(model: &IncrementalModel, data: &LabeledDataset, mode: InferenceMode) -> Result<(usize, usize)> {
    let (preds, _) = predict_with_confidence(model, data, mode)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok((correct, data.len()))
}

/// Expected calibration error with `bins` equal-width confidence bins:
/// `Σ_b (n_b / n) |acc_b − conf_b|`.
pub fn compute_ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::Argument("confidences and outcomes differ in length".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    if confidences.is_empty() {
        return Err(Error::Argument("calibration error of an empty set".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&p, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("confidence {p} outside [0, 1]")));
        }
        // bin b covers (b/B, (b+1)/B]; zero joins the first bin
        let b = ((p * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        count[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += p;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

/// Evaluation of one model against the test splits of all seen tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub mode: InferenceMode,
    /// correct predictions per task, in task order
    pub task_correct: Vec<usize>,
    pub task_total: Vec<usize>,
    /// calibration error over the pooled seen-class test set
    pub ece: f64,
}

impl StageEval {
    pub fn task_accuracy(&self, i: usize) -> f64 {
        ratio(self.task_correct[i], self.task_total[i])
    }

    pub fn task_accuracies(&self) -> Vec<f64> {
        (0..self.task_total.len()).map(|i| self.task_accuracy(i)).collect()
    }

    /// Pooled accuracy over every seen class.
    pub fn all_seen(&self) -> f64 {
        ratio(self.task_correct.iter().sum(), self.task_total.iter().sum())
    }

    /// Accuracy on the most recent task.
    pub fn new_task(&self) -> f64 {
        self.task_accuracy(self.task_total.len() - 1)
    }

    /// Pooled accuracy on earlier tasks; `None` at the first stage.
    pub fn old_classes(&self) -> Option<f64> {
        let t = self.task_total.len();
        (t > 1).then(|| {
            ratio(
                self.task_correct[..t - 1].iter().sum(),
                self.task_total[..t - 1].iter().sum(),
            )
        })
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn evaluate_seen(model: &IncrementalModel, tests: &[&LabeledDataset], mode: InferenceMode) -> Result<StageEval> {
    let mut task_correct = Vec::with_capacity(tests.len());
    let mut task_total = Vec::with_capacity(tests.len());
    let mut confs = Vec::new();
    let mut hits = Vec::new();
    for t in tests {
        let (preds, conf) = predict_with_confidence(model, t, mode)?;
        let ok: Vec<bool> = preds.iter().zip(t.labels()).map(|(p, y)| p == y).collect();
        task_correct.push(ok.iter().filter(|&&b| b).count());
        task_total.push(t.len());
        confs.extend(conf);
        hits.extend(ok);
    }
    Ok(StageEval {
        mode,
        task_correct,
        task_total,
        ece: compute_ece(&confs, &hits, ECE_BINS)?,
    })
}

/// `A_t = (1/t) Σ_{i≤t} a_i` over the all-seen accuracies of stages 1..=t.
pub fn average_incremental_accuracy(stage_acc: &[f64]) -> f64 {
    stage_acc.iter().sum::<f64>() / stage_acc.len() as f64
}

/// Forgetting after stage `k` (1-based) from the accuracy matrix
/// `acc[t][i]` = accuracy on task `i` after stage `t` (both 0-based):
/// `F_k = 1/(k−1) Σ_{i<k} max_{i≤t<k} (a_{t,i} − a_{k,i})`.
/// Returns `(raw, clamped)` where the clamped form floors each term at
/// zero; `None` for `k = 1`.
pub fn forgetting(acc: &[Vec<f64>], k: usize) -> Option<(f64, f64)> {
    if k < 2 || k > acc.len() {
        return None;
    }
    let last = &acc[k - 1];
    let (mut raw, mut clamped) = (0.0, 0.0);
    for i in 0..k - 1 {
        let drop = (i..k - 1)
            .map(|t| acc[t][i] - last[i])
            .fold(f64::NEG_INFINITY, f64::max);
        raw += drop;
        clamped += drop.max(0.0);
    }
    let n = (k - 1) as f64;
    Some((raw / n, clamped / n))
}

/// Metrics row for one stage of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub n_seen_classes: usize,
    pub acc_all_seen: f64,
    pub acc_new_task: f64,
    pub acc_old_classes: Option<f64>,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub forgetting_clamped: Option<f64>,
    pub ece: f64,
}

/// Per-stage metrics from a sequence of evaluations (one per stage).
pub fn compute_metrics(evals: &[StageEval], classes_per_stage: &[usize]) -> Vec<StageMetrics> {
    let acc: Vec<Vec<f64>> = evals.iter().map(StageEval::task_accuracies).collect();
    let all_seen: Vec<f64> = evals.iter().map(StageEval::all_seen).collect();
    let mut seen = 0;
    evals
        .iter()
        .enumerate()
        .map(|(t, e)| {
            seen += classes_per_stage.get(t).copied().unwrap_or(0);
            let f = forgetting(&acc, t + 1);
            StageMetrics {
                stage: t + 1,
                n_seen_classes: seen,
                acc_all_seen: e.all_seen(),
                acc_new_task: e.new_task(),
                acc_old_classes: e.old_classes(),
                average_accuracy: average_incremental_accuracy(&all_seen[..=t]),
                forgetting: f.map(|f| f.0),
                forgetting_clamped: f.map(|f| f.1),
                ece: e.ece,
            }
        })
        .collect()
}

/// Two-dimensional features as CSV rows `feature_x,feature_y,label,stage`.
pub fn export_features_2d(model: &IncrementalModel, data: &LabeledDataset, stage: usize) -> Result<String> {
    if model.extractor.out_dim() != 2 {
        return Err(Error::Config(format!(
            "feature export needs a 2-dimensional extractor, got d = {}",
            model.extractor.out_dim()
        )));
    }
    let mut out = String::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let z = model.extractor.extract(&data.batch(chunk)?)?;
        for (i, &j) in chunk.iter().enumerate() {
            let f = z.row(i);
            out.push_str(&format!("{},{},{},{}\n", f[0], f[1], data.labels()[j], stage));
        }
    }
    Ok(out)
}

/// Accuracy on `test` after each corruption; `("clean", acc)` comes first.
pub fn evaluate_under_corruption(
    model: &IncrementalModel,
    test: &LabeledDataset,
    corruptions: &[Corruption],
    mode: InferenceMode,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let (c, n) = accuracy_counts(model, test, mode)?;
    let mut out = vec![("clean".to_string(), ratio(c, n))];
    for (i, &k) in corruptions.iter().enumerate() {
        let shifted = corrupt(test, k, seed.wrapping_add(i as u64))?;
        let (c, n) = accuracy_counts(model, &shifted, mode)?;
        out.push((k.name().to_string(), ratio(c, n)));
    }
    Ok(out)
}
