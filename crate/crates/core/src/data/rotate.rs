use crate::error::{dim_err, Error, Result};

/// Counter-clockwise rotation by a multiple of 90°.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            _ => Err(Error::Argument(format!(
                "rotation must be one of 0, 90, 180, 270; got {deg}"
            ))),
        }
    }

    /// `δ / 90`, the view index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Rotation::ALL[i % 4]
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

/// Rotates a `C×H×W` image counter-clockwise in the (H, W) plane.
pub fn rotate90(image: &[f64], channels: usize, height: usize, width: usize, rot: Rotation) -> Result<Vec<f64>> {
    if height != width {
        return Err(dim_err!("rotation needs a square image, got {height}x{width}"));
    }
    if image.len() != channels * height * width {
        return Err(dim_err!(
            "image has {} values, expected {channels}x{height}x{width}",
            image.len()
        ));
    }
    let n = height;
    if rot == Rotation::R0 {
        return Ok(image.to_vec());
    }
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        let src = &image[c * n * n..(c + 1) * n * n];
        let dst = &mut out[c * n * n..(c + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match rot {
                    Rotation::R0 => (i, j),
                    Rotation::R90 => (j, n - 1 - i),
                    Rotation::R180 => (n - 1 - i, n - 1 - j),
                    Rotation::R270 => (n - 1 - j, i),
                };
                dst[i * n + j] = src[si * n + sj];
            }
        }
    }
    Ok(out)
}
