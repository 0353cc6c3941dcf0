//! Per-class feature statistics kept in place of old training data.
//!
//! For every class node the memory stores the feature mean (prototype) and,
//! depending on [`CovarianceMode`], either nothing beyond one shared radius,
//! a per-class diagonal of variances, or a full per-class covariance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Shared isotropic `r²·I`.
    #[default]
    Radius,
    Diag,
    Full,
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(CovarianceMode::Radius),
            "diag" | "diagonal" => Ok(CovarianceMode::Diag),
            "full" => Ok(CovarianceMode::Full),
            _ => Err(Error::Argument(format!("unknown covariance mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassCovariance {
    /// Per-coordinate variances.
    Diag(Vec<f64>),
    /// Row-major `d×d`, symmetric PSD.
    Full(Vec<f64>),
}

/// Borrowed covariance of one class node, whatever the storage mode.
#[derive(Clone, Copy, Debug)]
pub enum CovarianceView<'a> {
    Isotropic(f64),
    Diag(&'a [f64]),
    Full(&'a [f64]),
}

impl CovarianceView<'_> {
    /// `vᵀ Σ v`.
    pub fn quadratic(&self, v: &[f64]) -> f64 {
        match *self {
            CovarianceView::Isotropic(var) => var * v.iter().map(|x| x * x).sum::<f64>(),
            CovarianceView::Diag(s) => v.iter().zip(s).map(|(x, s)| s * x * x).sum(),
            CovarianceView::Full(m) => {
                let d = v.len();
                (0..d)
                    .map(|i| v[i] * (0..d).map(|j| m[i * d + j] * v[j]).sum::<f64>())
                    .sum()
            }
        }
    }
}

/// Result of the first-task radius estimate. `degenerate` is set when every
/// class had a single sample, in which case `radius` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub degenerate: bool,
}

struct ClassStats {
    n: usize,
    /// biased (1/n) covariance, row-major d×d
    cov: Vec<f64>,
}

fn group_rows(features: &Tensor, labels: &[usize]) -> Result<(usize, BTreeMap<usize, Vec<usize>>)> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(dim_err!("{} labels for {n} feature rows", labels.len()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    Ok((d, groups))
}

fn class_mean(features: &Tensor, rows: &[usize], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, &x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn class_stats(features: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, ClassStats>> {
    let (d, groups) = group_rows(features, labels)?;
    let mut out = BTreeMap::new();
    for (y, rows) in groups {
        let mean = class_mean(features, &rows, d);
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for &i in &rows {
            for (c, (&x, &m)) in centered.iter_mut().zip(features.row(i).iter().zip(&mean)) {
                *c = x - m;
            }
            for a in 0..d {
                let ca = centered[a];
                for b in 0..d {
                    cov[a * d + b] += ca * centered[b];
                }
            }
        }
        let n = rows.len();
        cov.iter_mut().for_each(|c| *c /= n as f64);
        out.insert(y, ClassStats { n, cov });
    }
    Ok(out)
}

fn trace(cov: &[f64], d: usize) -> f64 {
    (0..d).map(|i| cov[i * d + i]).sum()
}

/// Arithmetic mean of the features of each class present in `labels`.
pub fn compute_prototypes(features: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let (d, groups) = group_rows(features, labels)?;
    Ok(groups
        .into_iter()
        .map(|(y, rows)| (y, class_mean(features, &rows, d)))
        .collect())
}

/// `r² = (1 / (|C|·d)) Σ_k tr(Σ_k)` over the classes present.
pub fn compute_radius_first_task(features: &Tensor, labels: &[usize]) -> Result<RadiusEstimate> {
    let stats = class_stats(features, labels)?;
    if stats.is_empty() {
        return Err(Error::Precondition("radius estimate needs at least one class".into()));
    }
    let d = features.dims2()?.1;
    let degenerate = stats.values().all(|s| s.n < 2);
    if degenerate {
        log::warn!("every class has a single sample; radius set to 0");
    }
    let total: f64 = stats.values().map(|s| trace(&s.cov, d)).sum();
    let r2 = total / (stats.len() * d) as f64;
    Ok(RadiusEstimate {
        radius: r2.max(0.0).sqrt(),
        degenerate,
    })
}

/// Running update `r_t² = (|C_old|·r_{t-1}² + (1/d) Σ_new tr(Σ_k)) / (|C_old| + |C_new|)`.
pub fn update_radius_running(
    r_prev: f64,
    old_classes: usize,
    features: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let stats = class_stats(features, labels)?;
    let d = features.dims2()?.1;
    let new_trace: f64 = stats.values().map(|s| trace(&s.cov, d)).sum::<f64>() / d as f64;
    let denom = (old_classes + stats.len()) as f64;
    if denom == 0.0 {
        return Ok(r_prev);
    }
    let r2 = (old_classes as f64 * r_prev * r_prev + new_trace) / denom;
    Ok(r2.max(0.0).sqrt())
}

/// Per-class covariance summaries for `Diag` and `Full` modes; `Radius`
/// returns an empty map since `Σ_k = r²·I` is implicit. Full mode needs at
/// least two samples per class and falls back to the diagonal otherwise.
pub fn estimate_covariance(
    features: &Tensor,
    labels: &[usize],
    mode: CovarianceMode,
) -> Result<BTreeMap<usize, ClassCovariance>> {
    if mode == CovarianceMode::Radius {
        return Ok(BTreeMap::new());
    }
    let d = features.dims2()?.1;
    let stats = class_stats(features, labels)?;
    let mut out = BTreeMap::new();
    for (y, s) in stats {
        let mut cov = s.cov;
        for a in 0..d {
            for b in a + 1..d {
                let m = 0.5 * (cov[a * d + b] + cov[b * d + a]);
                cov[a * d + b] = m;
                cov[b * d + a] = m;
            }
            cov[a * d + a] = cov[a * d + a].max(0.0);
        }
        let diag: Vec<f64> = (0..d).map(|i| cov[i * d + i]).collect();
        let entry = match mode {
            CovarianceMode::Full if s.n >= 2 => ClassCovariance::Full(cov),
            CovarianceMode::Full => {
                log::warn!("class {y} has {} sample(s); storing diagonal covariance", s.n);
                ClassCovariance::Diag(diag)
            }
            _ => ClassCovariance::Diag(diag),
        };
        out.insert(y, entry);
    }
    Ok(out)
}

/// Append-only store of class-node statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMemory {
    dim: usize,
    mode: CovarianceMode,
    radius: f64,
    prototypes: BTreeMap<usize, Vec<f64>>,
    covariances: BTreeMap<usize, ClassCovariance>,
}

impl PrototypeMemory {
    pub fn new(dim: usize, mode: CovarianceMode) -> Self {
        PrototypeMemory {
            dim,
            mode,
            radius: 0.0,
            prototypes: BTreeMap::new(),
            covariances: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn set_radius(&mut self, r: f64) -> Result<()> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Argument(format!("radius must be finite and >= 0, got {r}")));
        }
        self.radius = r;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Stored class-node ids in ascending order.
    pub fn nodes(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    pub fn prototype(&self, node: usize) -> Option<&[f64]> {
        self.prototypes.get(&node).map(Vec::as_slice)
    }

    pub fn prototypes(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.prototypes
    }

    pub fn covariances(&self) -> &BTreeMap<usize, ClassCovariance> {
        &self.covariances
    }

    pub fn covariance(&self, node: usize) -> Option<CovarianceView<'_>> {
        if !self.prototypes.contains_key(&node) {
            return None;
        }
        Some(match (self.mode, self.covariances.get(&node)) {
            (CovarianceMode::Radius, _) | (_, None) => CovarianceView::Isotropic(self.radius * self.radius),
            (_, Some(ClassCovariance::Diag(v))) => CovarianceView::Diag(v),
            (_, Some(ClassCovariance::Full(m))) => CovarianceView::Full(m),
        })
    }

    /// Stores statistics for every class node present in `labels`. Nodes
    /// already in memory are rejected: earlier stages are never rewritten.
    pub fn commit(&mut self, features: &Tensor, labels: &[usize]) -> Result<Vec<usize>> {
        let (_, d) = features.dims2()?;
        if d != self.dim {
            return Err(dim_err!("features of dim {d} for memory of dim {}", self.dim));
        }
        let protos = compute_prototypes(features, labels)?;
        if let Some(node) = protos.keys().find(|n| self.prototypes.contains_key(n)) {
            return Err(Error::Protocol(format!("class node {node} already has a prototype")));
        }
        let covs = estimate_covariance(features, labels, self.mode)?;
        let added: Vec<usize> = protos.keys().copied().collect();
        self.prototypes.extend(protos);
        self.covariances.extend(covs);
        Ok(added)
    }

    /// Raw insertion, used when restoring from a checkpoint.
    pub fn insert(&mut self, node: usize, prototype: Vec<f64>, cov: Option<ClassCovariance>) -> Result<()> {
        if prototype.len() != self.dim {
            return Err(dim_err!("prototype of length {} in memory of dim {}", prototype.len(), self.dim));
        }
        self.prototypes.insert(node, prototype);
        if let Some(c) = cov {
            self.covariances.insert(node, c);
        }
        Ok(())
    }

    /// Number of stored floats: prototypes plus the covariance summary.
    /// Radius mode counts one shared scalar.
    pub fn entry_count(&self) -> usize {
        let protos = self.prototypes.len() * self.dim;
        match self.mode {
            CovarianceMode::Radius => protos + 1,
            _ => {
                protos
                    + self
                        .covariances
                        .values()
                        .map(|c| match c {
                            ClassCovariance::Diag(v) => v.len(),
                            ClassCovariance::Full(m) => m.len(),
                        })
                        .sum::<usize>()
            }
        }
    }
}
