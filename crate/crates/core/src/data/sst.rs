use super::{rotate90, LabeledDataset, Rotation};
use crate::error::Result;

/// A split expanded by the four rotations. Sample `4i + v` is source sample
/// `i` rotated by `v · 90°` and labeled `4y + v`, so the four view classes
/// of one original class occupy contiguous label ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SstDataset {
    pub data: LabeledDataset,
    pub views: Vec<Rotation>,
}

impl SstDataset {
    pub fn label(original: usize, view: Rotation) -> usize {
        4 * original + view.index()
    }

    /// Inverse of [`SstDataset::label`].
    pub fn split_label(label: usize) -> (usize, Rotation) {
        (label / 4, Rotation::from_index(label % 4))
    }

    /// The unrotated samples with their original labels, in source order.
    pub fn view0(&self) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..self.data.len()).step_by(4).collect();
        let k = self.data.num_classes() / 4;
        self.data.subset(&idx).relabel(k, |y| y / 4)
    }
}

pub fn apply_sst(split: &LabeledDataset) -> Result<SstDataset> {
    let (n, c, h, w) = split.shape();
    let mut images = Vec::with_capacity(4 * split.images().len());
    let mut labels = Vec::with_capacity(4 * n);
    let mut views = Vec::with_capacity(4 * n);
    for i in 0..n {
        let img = split.image(i);
        for rot in Rotation::ALL {
            images.extend(rotate90(img, c, h, w, rot)?);
            labels.push(SstDataset::label(split.labels()[i], rot));
            views.push(rot);
        }
    }
    Ok(SstDataset {
        data: LabeledDataset::new(images, labels, 4 * split.num_classes(), c, h, w)?,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_split(n: usize, k: usize, size: usize, seed: u64) -> LabeledDataset {
        let mut rng = crate::rng::seeded(seed);
        let images = (0..n * size * size).map(|_| rng.gen()).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
        LabeledDataset::new(images, labels, k, 1, size, size).unwrap()
    }

    #[test]
    fn counts_and_label_formula() {
        let d = random_split(5, 2, 4, 1);
        let s = apply_sst(&d).unwrap();
        assert_eq!(s.data.len(), 20);
        assert_eq!(s.data.num_classes(), 8);
        assert!(s.data.labels().iter().all(|&y| y < 8));
        assert_eq!(SstDataset::label(3, Rotation::R270), 15);
        assert_eq!(SstDataset::split_label(15), (3, Rotation::R270));
    }

    #[test]
    fn histogram_is_fourfold_replication() {
        let d = random_split(40, 3, 3, 9);
        let s = apply_sst(&d).unwrap();
        // brute-force recount
        let src = d.class_histogram();
        let mut out = [0usize; 12];
        for &y in s.data.labels() {
            out[y] += 1;
        }
        for y in 0..3 {
            for v in 0..4 {
                assert_eq!(out[4 * y + v], src[y]);
            }
        }
    }

    #[test]
    fn label_map_is_bijection() {
        let mut seen = std::collections::HashSet::new();
        for y in 0..6 {
            for r in Rotation::ALL {
                let l = SstDataset::label(y, r);
                assert!(l < 24);
                assert!(seen.insert(l));
                assert_eq!(SstDataset::split_label(l), (y, r));
            }
        }
        assert_eq!(seen.len(), 24);
    }

    proptest! {
        #[test]
        fn view0_projection_recovers_input(n in 1usize..12, k in 1usize..4, size in 1usize..5, seed in any::<u64>()) {
            let d = random_split(n, k, size, seed);
            let s = apply_sst(&d).unwrap();
            prop_assert_eq!(s.view0().unwrap(), d);
        }
    }
}
