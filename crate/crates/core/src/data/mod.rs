//! Synthetic multiparametric studies, preprocessing, and the MDS1 dataset file.

mod format;
mod generate;
mod preprocess;

use std::collections::BTreeMap;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use generate::{generate, generate_study, GenConfig, GenModality, SiteEffect};
pub use preprocess::{center_offset, flip, interp_phases, pad_to, prepare, standardize, Placement};

use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

/// One synthetic patient: volumes in `[D, H, W, C]` layout keyed by modality
/// name, a binary label and free-form tags.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub id: String,
    pub label: u8,
    pub tags: BTreeMap<String, String>,
    pub volumes: Vec<(String, Tensor)>,
}

impl StudyRecord {
    pub fn volume(&self, modality: &str) -> Result<&Tensor> {
        self.volumes
            .iter()
            .find(|(n, _)| n == modality)
            .map(|(_, t)| t)
            .ok_or_else(|| MomeError::data(format!("study {} has no {modality} volume", self.id)))
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Records whose `split` tag equals `split`.
pub fn split<'a>(records: &'a [StudyRecord], split: &str) -> Vec<&'a StudyRecord> {
    records.iter().filter(|r| r.tag("split") == Some(split)).collect()
}

/// Whole-volume mean intensity of one modality (all voxels and channels):
/// the feature of the single-modality threshold classifier.
pub fn mean_intensity(record: &StudyRecord, modality: &str) -> Result<f64> {
    let v = record.volume(modality)?;
    Ok(crate::tensor::compensated_sum(v.data().iter().copied()) / v.numel() as f64)
}
