//! Training objectives.
//!
//! * new-class cross-entropy over every head node;
//! * explicit prototype augmentation: cross-entropy on pseudo-features
//!   `μ_k + r·e` sampled from memory;
//! * implicit prototype augmentation: the closed-form upper bound of the
//!   expected cross-entropy under `z ~ N(μ_k, γΣ_k)`, obtained by moving the
//!   expectation inside the log-sum-exp and applying the Gaussian
//!   moment-generating function. It is again a cross-entropy, on logits
//!   `φ_cᵀμ_k + b_c + (γ/2)(φ_c−φ_k)ᵀΣ_k(φ_c−φ_k)`;
//! * hardness-aware instances `λμ_k + (1−λ)z*` where `z*` is the new-class
//!   feature of the minibatch closest to `μ_k` in cosine distance;
//! * feature distillation against the frozen previous extractor.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{ClassifierHead, ModelSnapshot};
use crate::prototype::{CovarianceView, PrototypeMemory};
use crate::rng::standard_normal;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoSource {
    Gaussian,
    Hardness,
}

/// Pseudo-features of old class nodes with their (hard) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoBatch {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    sources: Vec<ProtoSource>,
}

impl ProtoBatch {
    pub fn empty(dim: usize) -> Self {
        ProtoBatch {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
        }
    }

    /// One row per listed node, placed exactly at its prototype.
    pub fn from_prototypes(mem: &PrototypeMemory, nodes: &[usize]) -> Result<Self> {
        let mut b = ProtoBatch::empty(mem.dim());
        for &k in nodes {
            let mu = mem
                .prototype(k)
                .ok_or_else(|| Error::Precondition(format!("no prototype for node {k}")))?;
            b.push(mu, k, ProtoSource::Gaussian);
        }
        Ok(b)
    }

    fn push(&mut self, row: &[f64], label: usize, source: ProtoSource) {
        debug_assert_eq!(row.len(), self.dim);
        self.features.extend_from_slice(row);
        self.labels.push(label);
        self.sources.push(source);
    }

    pub fn append(&mut self, other: ProtoBatch) {
        debug_assert_eq!(self.dim, other.dim);
        self.features.extend(other.features);
        self.labels.extend(other.labels);
        self.sources.extend(other.sources);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sources(&self) -> &[ProtoSource] {
        &self.sources
    }

    /// Rows as an `M×d` tensor; `None` when empty.
    pub fn tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| {
            Tensor::new(vec![self.len(), self.dim], self.features.clone())
                .expect("rows and dim agree")
        })
    }

    /// Keeps only rows from one source.
    pub fn filter(&self, source: ProtoSource) -> ProtoBatch {
        let mut b = ProtoBatch::empty(self.dim);
        for i in 0..self.len() {
            if self.sources[i] == source {
                b.push(self.row(i), self.labels[i], source);
            }
        }
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// prototype-augmentation weight
    pub alpha: f64,
    /// distillation weight
    pub beta: f64,
    /// implicit augmentation strength
    pub gamma: f64,
    /// hardness mix coefficient
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 10.0,
            gamma: 1.0,
            lambda: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(finite_nonneg(self.alpha) && finite_nonneg(self.beta) && finite_nonneg(self.gamma)) {
            return Err(Error::Config(format!(
                "alpha, beta and gamma must be >= 0: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor with growing jitter for PSD input.
fn cholesky(m: &[f64], d: usize) -> Vec<f64> {
    let mut jitter = 0.0;
    loop {
        let mut l = vec![0.0; d * d];
        let mut ok = true;
        'outer: for i in 0..d {
            for j in 0..=i {
                let mut s = m[i * d + j] + if i == j { jitter } else { 0.0 };
                for p in 0..j {
                    s -= l[i * d + p] * l[j * d + p];
                }
                if i == j {
                    if s <= 0.0 {
                        ok = false;
                        break 'outer;
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        if ok {
            return l;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
    }
}

/// `count` pseudo-features. Nodes are drawn uniformly with replacement from
/// `targets` (every stored node when `None`); each row is `μ_k` plus noise
/// shaped by the node's covariance (`r·e` in radius mode).
pub fn sample_proto_batch<R: Rng + ?Sized>(
    mem: &PrototypeMemory,
    count: usize,
    targets: Option<&[usize]>,
    rng: &mut R,
) -> Result<ProtoBatch> {
    if mem.is_empty() {
        return Err(Error::Precondition("prototype memory is empty".into()));
    }
    let all;
    let nodes = match targets {
        Some(t) if !t.is_empty() => t,
        Some(_) => return Err(Error::Precondition("no target nodes to sample".into())),
        None => {
            all = mem.nodes();
            &all[..]
        }
    };
    let d = mem.dim();
    let mut factors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut batch = ProtoBatch::empty(d);
    let mut row = vec![0.0; d];
    let mut e = vec![0.0; d];
    for _ in 0..count {
        let k = nodes[rng.gen_range(0..nodes.len())];
        let mu = mem
            .prototype(k)
            .ok_or_else(|| Error::Precondition(format!("no prototype for node {k}")))?;
        e.iter_mut().for_each(|x| *x = standard_normal(rng));
        match mem.covariance(k).expect("prototype exists") {
            CovarianceView::Isotropic(var) => {
                let r = var.sqrt();
                for j in 0..d {
                    row[j] = mu[j] + r * e[j];
                }
            }
            CovarianceView::Diag(s) => {
                for j in 0..d {
                    row[j] = mu[j] + s[j].sqrt() * e[j];
                }
            }
            CovarianceView::Full(m) => {
                let l = factors.entry(k).or_insert_with(|| cholesky(m, d));
                for i in 0..d {
                    row[i] = mu[i] + (0..=i).map(|j| l[i * d + j] * e[j]).sum::<f64>();
                }
            }
        }
        batch.push(&row, k, ProtoSource::Gaussian);
    }
    Ok(batch)
}

/// Cosine distance `1 − cos(a, b)`; `None` if either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(1.0 - dot / (na * nb))
}

/// Index of the row of `features` closest to `target` in cosine distance;
/// zero-norm rows are skipped and ties go to the lowest index.
pub fn nearest_by_cosine(target: &[f64], features: &Tensor) -> Option<usize> {
    let (n, _) = features.dims2().ok()?;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n {
        if let Some(d) = cosine_distance(target, features.row(i)) {
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// One hardness-aware instance per target node: `λμ_k + (1−λ)z*`, labeled
/// `k`. Returns an empty batch (with a warning) when no usable new feature
/// exists.
pub fn hardness_instances(
    mem: &PrototypeMemory,
    new_features: &Tensor,
    targets: &[usize],
    lambda: f64,
) -> Result<ProtoBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda {lambda} outside [0, 1]")));
    }
    let (b, d) = new_features.dims2()?;
    if d != mem.dim() {
        return Err(dim_err!("features of dim {d} for memory of dim {}", mem.dim()));
    }
    if b == 0 {
        return Err(Error::Precondition("empty minibatch".into()));
    }
    let mut out = ProtoBatch::empty(d);
    let zero_rows = (0..b)
        .filter(|&i| new_features.row(i).iter().all(|&v| v == 0.0))
        .count();
    if zero_rows == b {
        log::warn!("all new features have zero norm; no hardness instances");
        return Ok(out);
    }
    if zero_rows > 0 {
        log::debug!("{zero_rows} zero-norm feature rows excluded from nearest search");
    }
    let mut row = vec![0.0; d];
    for &k in targets {
        let mu = mem
            .prototype(k)
            .ok_or_else(|| Error::Precondition(format!("no prototype for node {k}")))?;
        let Some(i) = nearest_by_cosine(mu, new_features) else {
            log::debug!("prototype {k} has zero norm; skipped");
            continue;
        };
        let z = new_features.row(i);
        for j in 0..d {
            row[j] = lambda * mu[j] + (1.0 - lambda) * z[j];
        }
        out.push(&row, k, ProtoSource::Hardness);
    }
    Ok(out)
}

/// Cross-entropy of the head on real features against node labels.
pub fn new_class_loss(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    features: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = ClassifierHead::forward(tape, weight, bias, features)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean cross-entropy of the head over the pseudo-feature rows.
pub fn explicit_protoaug_loss(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    proto: &ProtoBatch,
) -> Result<Var> {
    let z = proto
        .tensor()
        .ok_or_else(|| Error::Precondition("empty prototype batch".into()))?;
    let z = tape.constant(z);
    new_class_loss(tape, weight, bias, z, proto.labels())
}

/// Closed-form bound on the expected cross-entropy over `N(μ_k, γΣ_k)` for
/// each target node, averaged over targets.
pub fn implicit_protoaug_loss(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    mem: &PrototypeMemory,
    targets: &[usize],
    gamma: f64,
) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("gamma must be >= 0, got {gamma}")));
    }
    if targets.is_empty() {
        return Err(Error::Precondition("no old class nodes".into()));
    }
    let (c, d) = tape.value(weight).dims2()?;
    if d != mem.dim() {
        return Err(dim_err!("head of dim {d} for memory of dim {}", mem.dim()));
    }
    if let Some(&k) = targets.iter().find(|&&k| k >= c) {
        return Err(Error::Index(format!("node {k} outside head of {c} nodes")));
    }
    let protos = ProtoBatch::from_prototypes(mem, targets)?;
    let mu = tape.constant(protos.tensor().expect("targets non-empty"));
    let base = ClassifierHead::forward(tape, weight, bias, mu)?;
    if gamma == 0.0 {
        return tape.softmax_cross_entropy(base, targets);
    }

    let mut quads = Vec::with_capacity(targets.len());
    for &k in targets {
        // v_c = φ_c − φ_k for every node c; the c = k row is exactly zero
        let anchor = tape.gather_rows(weight, &vec![k; c])?;
        let v = tape.sub(weight, anchor)?;
        let q = match mem.covariance(k).expect("prototype exists") {
            CovarianceView::Isotropic(var) => {
                let vv = tape.mul(v, v)?;
                let s = tape.row_sum(vv)?;
                tape.scale(s, var)?
            }
            CovarianceView::Diag(s) => {
                let tiled: Vec<f64> = s.iter().copied().cycle().take(c * d).collect();
                let sd = tape.constant(Tensor::new(vec![c, d], tiled)?);
                let vs = tape.mul(v, sd)?;
                let vsv = tape.mul(vs, v)?;
                tape.row_sum(vsv)?
            }
            CovarianceView::Full(m) => {
                let sigma = tape.constant(Tensor::new(vec![d, d], m.to_vec())?);
                let vs = tape.matmul(v, sigma)?;
                let vsv = tape.mul(vs, v)?;
                tape.row_sum(vsv)?
            }
        };
        quads.push(q);
    }
    let q = tape.concat_rows(&quads)?;
    let q = tape.scale(q, 0.5 * gamma)?;
    let logits = tape.add(base, q)?;
    tape.softmax_cross_entropy(logits, targets)
}

/// Batch mean of `‖f_old(x′) − f_new(x′)‖` (squared norm when `squared`).
/// The snapshot branch is a constant on the tape.
pub fn kd_feature_loss(
    tape: &mut Tape,
    current: Var,
    snapshot: Option<&ModelSnapshot>,
    batch: &Tensor,
    squared: bool,
) -> Result<Var> {
    let snap = snapshot.ok_or_else(|| {
        Error::Precondition("feature distillation needs a previous-stage snapshot".into())
    })?;
    let old = snap.extract(batch)?;
    kd_against_features(tape, current, old, squared)
}

/// Distillation term against precomputed snapshot features.
pub fn kd_against_features(tape: &mut Tape, current: Var, old: Tensor, squared: bool) -> Result<Var> {
    if tape.shape(current) != old.shape() {
        return Err(dim_err!(
            "current features {:?} vs snapshot features {:?}",
            tape.shape(current),
            old.shape()
        ));
    }
    let old = tape.constant(old);
    let diff = tape.sub(current, old)?;
    let per_row = if squared {
        let sq = tape.mul(diff, diff)?;
        tape.row_sum(sq)?
    } else {
        tape.row_l2_norm(diff)?
    };
    tape.mean(per_row)
}

/// The components of one stage's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub new: Var,
    pub old: Option<Var>,
    pub kd: Option<Var>,
}

/// `L_new + α·L_old + β·L_kd`. Stage 1 uses `L_new` alone.
pub fn total_loss(tape: &mut Tape, parts: LossParts, weights: &LossWeights, stage: usize) -> Result<Var> {
    let mut total = parts.new;
    if stage <= 1 {
        return Ok(total);
    }
    for (term, w) in [(parts.old, weights.alpha), (parts.kd, weights.beta)] {
        if let Some(t) = term {
            if w != 0.0 {
                let s = tape.scale(t, w)?;
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}
