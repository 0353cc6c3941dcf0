//! Feature extractor, expandable linear head and frozen snapshots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::standard_normal;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// flatten → (dense → relu) per hidden width → dense to `out_dim`
    Mlp {
        channels: usize,
        size: usize,
        hidden: Vec<usize>,
        out_dim: usize,
    },
    /// (3×3 conv → relu → 2×2 avg pool) twice → dense to `out_dim`
    SmallConv {
        channels: usize,
        size: usize,
        filters: [usize; 2],
        out_dim: usize,
    },
}

impl Architecture {
    pub fn out_dim(&self) -> usize {
        match *self {
            Architecture::Mlp { out_dim, .. } | Architecture::SmallConv { out_dim, .. } => out_dim,
        }
    }

    pub fn input_geometry(&self) -> (usize, usize) {
        match *self {
            Architecture::Mlp { channels, size, .. }
            | Architecture::SmallConv { channels, size, .. } => (channels, size),
        }
    }

    /// Shapes of the parameter tensors, in registration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::Mlp {
                channels,
                size,
                hidden,
                out_dim,
            } => {
                let mut dims = vec![channels * size * size];
                dims.extend(hidden);
                dims.push(*out_dim);
                dims.windows(2)
                    .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                    .collect()
            }
            Architecture::SmallConv {
                channels,
                size,
                filters: [f1, f2],
                out_dim,
            } => {
                let flat = f2 * (size / 4) * (size / 4);
                vec![
                    vec![*f1, *channels, 3, 3],
                    vec![*f1],
                    vec![*f2, *f1, 3, 3],
                    vec![*f2],
                    vec![flat, *out_dim],
                    vec![*out_dim],
                ]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, s) = self.input_geometry();
        if self.out_dim() < 2 {
            return Err(Error::Config("feature dimension must be at least 2".into()));
        }
        if c == 0 || s == 0 {
            return Err(Error::Config("empty input geometry".into()));
        }
        match self {
            Architecture::Mlp { hidden, .. } if hidden.contains(&0) => {
                Err(Error::Config("zero-width hidden layer".into()))
            }
            Architecture::SmallConv { size, filters, .. } if *size < 4 || filters.contains(&0) => {
                Err(Error::Config("conv extractor needs size >= 4 and nonzero filters".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `f_θ`: maps a `B×C×H×W` batch to `B×d` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl FeatureExtractor {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(FeatureExtractor { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(dim_err!("parameters do not match architecture {arch:?}"));
        }
        Ok(FeatureExtractor { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn out_dim(&self) -> usize {
        self.arch.out_dim()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Puts every parameter on the tape, tracked or not.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass recorded on `tape` using previously registered params.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let (c, s) = self.arch.input_geometry();
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != [c, s, s] {
            return Err(dim_err!("extractor expects Bx{c}x{s}x{s} input, got {shape:?}"));
        }
        let b = shape[0];
        match &self.arch {
            Architecture::Mlp { .. } => {
                let mut h = tape.reshape(input, vec![b, c * s * s])?;
                let layers = params.len() / 2;
                for (i, wb) in params.chunks(2).enumerate() {
                    h = tape.matmul(h, wb[0])?;
                    h = tape.add_row_bias(h, wb[1])?;
                    if i + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::SmallConv { .. } => {
                let mut h = input;
                for wb in params[..4].chunks(2) {
                    h = tape.conv2d(h, wb[0], 1, 1)?;
                    h = tape.add_channel_bias(h, wb[1])?;
                    h = tape.relu(h)?;
                    h = tape.avg_pool2x2(h)?;
                }
                let flat = tape.value(h).numel() / b;
                let h = tape.reshape(h, vec![b, flat])?;
                let h = tape.matmul(h, params[4])?;
                tape.add_row_bias(h, params[5])
            }
        }
    }

    /// Tape-free convenience: features of a batch as a `B×d` tensor.
    pub fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let z = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(z).clone())
    }
}

/// Unified linear classifier over class nodes. Each original class owns
/// `views` consecutive nodes; node `views·slot + v` is view `v` of the
/// class that arrived `slot`-th.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    views: usize,
    class_ids: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(dim: usize, views: usize) -> Result<Self> {
        if views != 1 && views != 4 {
            return Err(Error::Config(format!("views must be 1 or 4, got {views}")));
        }
        Ok(ClassifierHead {
            dim,
            views,
            class_ids: Vec::new(),
            weight: Vec::new(),
            bias: Vec::new(),
        })
    }

    pub fn from_parts(
        dim: usize,
        views: usize,
        class_ids: Vec<usize>,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut head = ClassifierHead::new(dim, views)?;
        let nodes = class_ids.len() * views;
        if weight.len() != nodes * dim || bias.len() != nodes {
            return Err(dim_err!("head parameters do not match {nodes} nodes of dim {dim}"));
        }
        head.class_ids = class_ids;
        head.weight = weight;
        head.bias = bias;
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn nodes(&self) -> usize {
        self.class_ids.len() * self.views
    }

    /// Original class ids in slot order.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn node(&self, slot: usize, view: usize) -> usize {
        self.views * slot + view
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weight and bias, mutably, for one optimizer step.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    /// Row `node` of the weight matrix.
    pub fn weight_row(&self, node: usize) -> &[f64] {
        &self.weight[node * self.dim..(node + 1) * self.dim]
    }

    pub fn weight_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.nodes(), self.dim], self.weight.clone())
    }

    pub fn bias_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.nodes()], self.bias.clone())
    }

    /// Appends `views` rows per new class with weights from `N(0, 0.01²)`
    /// and zero bias. Existing rows are untouched.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_classes: &[usize], rng: &mut R) -> Result<()> {
        if new_classes.is_empty() {
            return Err(Error::Argument("expand needs at least one class".into()));
        }
        if let Some(c) = new_classes.iter().find(|c| self.class_ids.contains(c)) {
            return Err(Error::Protocol(format!("class {c} already has head rows")));
        }
        let rows = new_classes.len() * self.views;
        self.weight
            .extend((0..rows * self.dim).map(|_| 0.01 * standard_normal(rng)));
        self.bias.extend(std::iter::repeat_n(0.0, rows));
        self.class_ids.extend_from_slice(new_classes);
        Ok(())
    }

    /// `z·φᵀ + b` recorded on the tape.
    pub fn forward(tape: &mut Tape, weight: Var, bias: Var, features: Var) -> Result<Var> {
        let l = tape.matmul_nt(features, weight)?;
        tape.add_row_bias(l, bias)
    }

    /// Tape-free logits for a `B×d` feature matrix.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (b, d) = features.dims2()?;
        if d != self.dim {
            return Err(dim_err!("features of dim {d} for head of dim {}", self.dim));
        }
        let n = self.nodes();
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            let z = features.row(i);
            for node in 0..n {
                let w = self.weight_row(node);
                out.push(self.bias[node] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Tensor::new(vec![b, n], out)
    }
}

/// Extractor plus head; the unit that is trained stage after stage.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalModel {
    pub extractor: FeatureExtractor,
    pub head: ClassifierHead,
}

impl IncrementalModel {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, views: usize, rng: &mut R) -> Result<Self> {
        let extractor = FeatureExtractor::new(arch, rng)?;
        let head = ClassifierHead::new(extractor.out_dim(), views)?;
        Ok(IncrementalModel { extractor, head })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            extractor: self.extractor.clone(),
        }
    }

    /// Logits for every head node on a batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let z = self.extractor.extract(batch)?;
        self.head.logits(&z)
    }
}

/// Frozen copy of an extractor for feature distillation. It owns its
/// parameters, so later training of the source cannot reach it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    extractor: FeatureExtractor,
}

impl ModelSnapshot {
    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        self.extractor.extract(batch)
    }
}
