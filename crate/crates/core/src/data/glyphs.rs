//! Procedural stroke glyphs: a small rotation-sensitive image corpus.
//!
//! No glyph is invariant under any quarter turn and no two glyphs coincide
//! under any pair of rotations, so every (class, view) pair produced by the
//! rotation expansion is a distinct, learnable class.

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};

type Seg = ((f64, f64), (f64, f64));

struct Glyph {
    strokes: &'static [Seg],
    /// Stroke width as a fraction of the image side.
    width: f64,
}

// Coordinates are (x, y) in the unit square, y pointing down.
const ALPHABET: &[Glyph] = &[
    // L
    Glyph { strokes: &[((0.25, 0.15), (0.25, 0.85)), ((0.25, 0.85), (0.75, 0.85))], width: 0.12 },
    // F
    Glyph {
        strokes: &[((0.3, 0.15), (0.3, 0.85)), ((0.3, 0.15), (0.75, 0.15)), ((0.3, 0.5), (0.6, 0.5))],
        width: 0.11,
    },
    // T
    Glyph { strokes: &[((0.15, 0.2), (0.85, 0.2)), ((0.5, 0.2), (0.5, 0.85))], width: 0.13 },
    // diagonal with a foot
    Glyph { strokes: &[((0.2, 0.8), (0.8, 0.2)), ((0.2, 0.8), (0.55, 0.8))], width: 0.12 },
    // P
    Glyph {
        strokes: &[
            ((0.3, 0.15), (0.3, 0.85)),
            ((0.3, 0.15), (0.7, 0.15)),
            ((0.7, 0.15), (0.7, 0.5)),
            ((0.7, 0.5), (0.3, 0.5)),
        ],
        width: 0.10,
    },
    // 7
    Glyph { strokes: &[((0.2, 0.2), (0.8, 0.2)), ((0.8, 0.2), (0.4, 0.85))], width: 0.14 },
    // J
    Glyph {
        strokes: &[((0.65, 0.15), (0.65, 0.8)), ((0.65, 0.8), (0.3, 0.8)), ((0.3, 0.8), (0.3, 0.6))],
        width: 0.12,
    },
    // small top-left corner with a detached dot
    Glyph {
        strokes: &[((0.2, 0.2), (0.55, 0.2)), ((0.2, 0.2), (0.2, 0.55)), ((0.75, 0.75), (0.8, 0.8))],
        width: 0.15,
    },
    // dagger: cross with a high bar
    Glyph { strokes: &[((0.5, 0.12), (0.5, 0.88)), ((0.2, 0.35), (0.8, 0.35))], width: 0.11 },
    // Y
    Glyph {
        strokes: &[((0.5, 0.5), (0.5, 0.85)), ((0.5, 0.5), (0.2, 0.15)), ((0.5, 0.5), (0.8, 0.15))],
        width: 0.12,
    },
    // long diagonal with a parallel short stroke
    Glyph { strokes: &[((0.15, 0.15), (0.85, 0.85)), ((0.15, 0.5), (0.5, 0.85))], width: 0.10 },
    // right triangle
    Glyph {
        strokes: &[((0.2, 0.8), (0.8, 0.8)), ((0.8, 0.8), (0.8, 0.2)), ((0.2, 0.8), (0.8, 0.2))],
        width: 0.09,
    },
    // E
    Glyph {
        strokes: &[
            ((0.25, 0.15), (0.25, 0.85)),
            ((0.25, 0.15), (0.75, 0.15)),
            ((0.25, 0.5), (0.65, 0.5)),
            ((0.25, 0.85), (0.75, 0.85)),
        ],
        width: 0.09,
    },
    // 4
    Glyph {
        strokes: &[((0.6, 0.15), (0.6, 0.85)), ((0.6, 0.15), (0.2, 0.6)), ((0.2, 0.6), (0.8, 0.6))],
        width: 0.11,
    },
    // arrow
    Glyph {
        strokes: &[((0.2, 0.5), (0.8, 0.5)), ((0.8, 0.5), (0.6, 0.3)), ((0.8, 0.5), (0.6, 0.7))],
        width: 0.12,
    },
    // h
    Glyph {
        strokes: &[((0.3, 0.15), (0.3, 0.85)), ((0.3, 0.5), (0.7, 0.5)), ((0.7, 0.5), (0.7, 0.85))],
        width: 0.12,
    },
    // b
    Glyph {
        strokes: &[
            ((0.3, 0.15), (0.3, 0.85)),
            ((0.3, 0.85), (0.7, 0.85)),
            ((0.7, 0.85), (0.7, 0.55)),
            ((0.7, 0.55), (0.3, 0.55)),
        ],
        width: 0.10,
    },
    // lopsided V
    Glyph { strokes: &[((0.2, 0.2), (0.45, 0.8)), ((0.45, 0.8), (0.85, 0.35))], width: 0.13 },
    // K
    Glyph {
        strokes: &[((0.3, 0.15), (0.3, 0.85)), ((0.3, 0.5), (0.75, 0.15)), ((0.3, 0.5), (0.75, 0.85))],
        width: 0.10,
    },
    // r
    Glyph { strokes: &[((0.35, 0.35), (0.35, 0.85)), ((0.35, 0.5), (0.7, 0.35))], width: 0.14 },
];

pub fn glyph_alphabet_size() -> usize {
    ALPHABET.len()
}

fn seg_distance((px, py): (f64, f64), ((ax, ay), (bx, by)): Seg) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Anti-aliased rendering of one glyph as a `size×size` image.
pub(crate) fn render(class: usize, size: usize) -> Vec<f64> {
    let g = &ALPHABET[class];
    let s = size as f64;
    let half_width = 0.5 * g.width * s;
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let d = g
                .strokes
                .iter()
                .map(|&seg| seg_distance(p, seg) * s)
                .fold(f64::INFINITY, f64::min);
            // one-pixel linear ramp at the stroke edge
            img[y * size + x] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// `num_classes × samples_per_class` single-channel images; each is its
/// class glyph plus i.i.d. `N(0, noise_std²)` pixel noise clamped to
/// `[0, 1]`. Samples are class-major.
pub fn generate_glyphs(
    num_classes: usize,
    samples_per_class: usize,
    size: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || num_classes > ALPHABET.len() {
        return Err(Error::Config(format!(
            "glyph alphabet has {} shapes, {num_classes} classes requested",
            ALPHABET.len()
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("glyph size must be at least 8, got {size}")));
    }
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Argument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = seeded(seed);
    let mut images = Vec::with_capacity(num_classes * samples_per_class * size * size);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        let base = render(class, size);
        for _ in 0..samples_per_class {
            images.extend(
                base.iter()
                    .map(|&v| (v + noise_std * standard_normal(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, num_classes, 1, size, size)
}
