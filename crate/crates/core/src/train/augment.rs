use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ModalitySet, MomeConfig};
use crate::data::{prepare, Placement, StudyRecord};
use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Random placement within the canvas instead of centering.
    pub pad_jitter: bool,
    /// Random flip along at most two spatial axes.
    pub flips: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            pad_jitter: true,
            flips: true,
        }
    }
}

/// The seven flip masks with at most two axes set, identity first.
const FLIP_MASKS: [[bool; 3]; 7] = [
    [false, false, false],
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
];

/// Draw a training placement: one flip mask shared by all modalities and
/// an independent uniform offset per modality.
pub fn sample_placement<R: Rng + ?Sized>(
    record: &StudyRecord,
    config: &MomeConfig,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<Placement> {
    let flips = if aug.flips {
        FLIP_MASKS[rng.random_range(0..FLIP_MASKS.len())]
    } else {
        [false; 3]
    };
    let mut offsets = Vec::with_capacity(config.modalities.len());
    for m in &config.modalities {
        if !aug.pad_jitter {
            offsets.push(None);
            continue;
        }
        let shape = record.volume(&m.name)?.shape();
        let mut off = [0usize; 3];
        for a in 0..3 {
            let slack = m.dims[a].checked_sub(shape[a]).ok_or_else(|| {
                MomeError::data(format!(
                    "study {}: {} axis {a} is {} voxels, canvas {}",
                    record.id, m.name, shape[a], m.dims[a]
                ))
            })?;
            off[a] = rng.random_range(0..=slack);
        }
        offsets.push(Some(off));
    }
    Ok(Placement { flips, offsets })
}

/// Model-ready inputs for one augmented training pass over every
/// configured modality.
pub fn augment_train<R: Rng + ?Sized>(
    record: &StudyRecord,
    config: &MomeConfig,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let placement = sample_placement(record, config, aug, rng)?;
    prepare(record, config, ModalitySet::all(config.modalities.len()), &placement)
}
