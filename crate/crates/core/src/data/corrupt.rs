use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};

/// Synthetic distribution shifts. Outputs are clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    /// Additive `N(0, sigma²)` noise, `sigma ∈ [0, 1]`.
    GaussianNoise { sigma: f64 },
    /// Additive constant, `delta ∈ [-1, 1]`.
    Brightness { delta: f64 },
    /// Mean over a `width×width` window with edge replication; `width` odd,
    /// between 1 and the image size.
    BoxBlur { width: usize },
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::GaussianNoise { .. } => "gaussian_noise",
            Corruption::Brightness { .. } => "brightness",
            Corruption::BoxBlur { .. } => "box_blur",
        }
    }

    /// Severity presets 1..=3 for each kind, mildest first.
    pub fn preset(kind: &str, severity: usize) -> Result<Corruption> {
        let i = severity
            .checked_sub(1)
            .filter(|&i| i < 3)
            .ok_or_else(|| Error::Argument(format!("severity {severity} not in 1..=3")))?;
        match kind {
            "gaussian_noise" => Ok(Corruption::GaussianNoise {
                sigma: [0.3, 0.45, 0.6][i],
            }),
            "brightness" => Ok(Corruption::Brightness {
                delta: [0.1, 0.2, 0.3][i],
            }),
            "box_blur" => Ok(Corruption::BoxBlur { width: [3, 5, 7][i] }),
            _ => Err(Error::Argument(format!("unknown corruption kind {kind:?}"))),
        }
    }

    pub fn kinds() -> [&'static str; 3] {
        ["gaussian_noise", "brightness", "box_blur"]
    }

    fn validate(&self, size: usize) -> Result<()> {
        let ok = match *self {
            Corruption::GaussianNoise { sigma } => (0.0..=1.0).contains(&sigma),
            Corruption::Brightness { delta } => (-1.0..=1.0).contains(&delta),
            Corruption::BoxBlur { width } => width % 2 == 1 && width <= size,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("corruption parameter out of range: {self:?}")))
        }
    }
}

pub fn corrupt(split: &LabeledDataset, kind: Corruption, seed: u64) -> Result<LabeledDataset> {
    kind.validate(split.size())?;
    let images = match kind {
        Corruption::GaussianNoise { sigma } => {
            let mut rng = seeded(seed);
            split
                .images()
                .iter()
                .map(|&p| (p + sigma * standard_normal(&mut rng)).clamp(0.0, 1.0))
                .collect()
        }
        Corruption::Brightness { delta } => split
            .images()
            .iter()
            .map(|&p| (p + delta).clamp(0.0, 1.0))
            .collect(),
        Corruption::BoxBlur { width } => box_blur(split.images(), split.size(), width),
    };
    Ok(split.map_images(images))
}

fn box_blur(images: &[f64], n: usize, width: usize) -> Vec<f64> {
    if width == 1 {
        return images.to_vec();
    }
    let r = (width / 2) as isize;
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let norm = (width * width) as f64;
    let mut out = vec![0.0; images.len()];
    for (src, dst) in images.chunks(n * n).zip(out.chunks_mut(n * n)) {
        for y in 0..n as isize {
            for x in 0..n as isize {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        s += src[clamp(y + dy) * n + clamp(x + dx)];
                    }
                }
                dst[y as usize * n + x as usize] = (s / norm).clamp(0.0, 1.0);
            }
        }
    }
    out
}
