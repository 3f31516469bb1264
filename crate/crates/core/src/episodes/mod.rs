//! Class folds, N-way K-shot episode sampling and dataset access.

mod dataset;
mod sampler;
mod synth;

pub use dataset::{
    load_folder, read_mask, read_rgb, rgb_to_tensor, tensor_to_rgb, write_folder, write_mask, Dataset,
    DatasetIndex, IndexEntry, Sample,
};
pub use sampler::{
    read_manifest, sample_episode, write_manifest, Episode, EpisodeMode, ManifestRecord,
    DEFAULT_MAX_RETRIES,
};
pub use synth::{rasterize_mask, synth_shapes, ShapeKind, ShapeParams, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Dataset-level class label. `0` is reserved for background.
pub type ClassId = u8;

/// Integer label grid in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(height * width, labels.len(), "label grid size mismatch");
        LabelMask {
            height,
            width,
            labels,
        }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Sorted distinct labels, background included.
    pub fn distinct(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    /// Binary mask (1 = `label`) used for support annotation.
    pub fn binary(&self, label: u8) -> LabelMask {
        LabelMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| u8::from(l == label)).collect(),
        )
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMask {
        LabelMask::new(
            height,
            width,
            crate::spatial::resize_labels_nearest(&self.labels, self.height, self.width, height, width),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub dataset_name: String,
    pub fold_id: usize,
    pub num_folds: usize,
    pub train_classes: Vec<ClassId>,
    pub test_classes: Vec<ClassId>,
}

impl FoldSpec {
    pub fn classes(&self, side: SplitSide) -> &[ClassId] {
        match side {
            SplitSide::Train => &self.train_classes,
            SplitSide::Test => &self.test_classes,
        }
    }
}

/// Holds out the `fold_id`-th contiguous block of `class_ids` for testing.
pub fn build_fold_split(
    dataset_name: &str,
    class_ids: &[ClassId],
    fold_id: usize,
    num_folds: usize,
) -> Result<FoldSpec> {
    if num_folds == 0 || class_ids.is_empty() || !class_ids.len().is_multiple_of(num_folds) {
        return Err(config_err!(
            "{} classes cannot be divided into {num_folds} folds",
            class_ids.len()
        ));
    }
    if fold_id >= num_folds {
        return Err(config_err!("fold {fold_id} out of range for {num_folds} folds"));
    }
    let block = class_ids.len() / num_folds;
    let lo = fold_id * block;
    let hi = lo + block;
    Ok(FoldSpec {
        dataset_name: dataset_name.to_string(),
        fold_id,
        num_folds,
        train_classes: class_ids[..lo].iter().chain(&class_ids[hi..]).copied().collect(),
        test_classes: class_ids[lo..hi].to_vec(),
    })
}

/// Maps dataset labels to episode-local labels: the pixels of
/// `episode_classes[n - 1]` become `n`, everything else becomes background.
pub fn remap_labels(raw: &LabelMask, episode_classes: &[ClassId]) -> LabelMask {
    let mut table = [0u8; 256];
    for (i, &c) in episode_classes.iter().enumerate() {
        if c != 0 {
            table[c as usize] = (i + 1) as u8;
        }
    }
    LabelMask::new(
        raw.height,
        raw.width,
        raw.labels.iter().map(|&l| table[l as usize]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u8) -> Vec<ClassId> {
        (1..=n).collect()
    }

    #[test]
    fn pascal_fold_zero() {
        let f = build_fold_split("pascal", &ids(20), 0, 4).unwrap();
        assert_eq!(f.test_classes, ids(5));
        assert_eq!(f.train_classes, (6..=20).collect::<Vec<_>>());
    }

    #[test]
    fn coco_fold_three() {
        let f = build_fold_split("coco", &ids(80), 3, 4).unwrap();
        assert_eq!(f.test_classes, (61..=80).collect::<Vec<_>>());
        assert_eq!(f.train_classes.len(), 60);
    }

    #[test]
    fn minimal_split() {
        let f = build_fold_split("tiny", &ids(4), 0, 4).unwrap();
        assert_eq!(f.test_classes, vec![1]);
        assert_eq!(f.train_classes, vec![2, 3, 4]);
    }

    #[test]
    fn non_divisible_is_config_error() {
        assert!(matches!(
            build_fold_split("x", &ids(10), 0, 4),
            Err(crate::Error::Config(_))
        ));
        assert!(build_fold_split("x", &ids(8), 4, 4).is_err());
    }

    #[test]
    fn folds_are_disjoint_and_cover() {
        for (n, folds) in [(20u8, 4usize), (80, 4), (8, 4), (12, 3)] {
            for k in 0..folds {
                let f = build_fold_split("d", &ids(n), k, folds).unwrap();
                let mut all: Vec<_> = f.train_classes.iter().chain(&f.test_classes).copied().collect();
                all.sort();
                assert_eq!(all, ids(n));
                assert!(f.train_classes.iter().all(|c| !f.test_classes.contains(c)));
            }
        }
    }

    #[test]
    fn remap_single_class() {
        let m = LabelMask::new(1, 4, vec![12, 0, 12, 0]);
        assert_eq!(remap_labels(&m, &[12]).labels, vec![1, 0, 1, 0]);
    }

    #[test]
    fn remap_drops_off_episode_classes() {
        let m = LabelMask::new(1, 3, vec![7, 5, 0]);
        assert_eq!(remap_labels(&m, &[5]).labels, vec![0, 1, 0]);
    }

    #[test]
    fn remap_follows_class_order() {
        let m = LabelMask::new(1, 3, vec![9, 5, 3]);
        assert_eq!(remap_labels(&m, &[5, 9]).labels, vec![2, 1, 0]);
    }
}
