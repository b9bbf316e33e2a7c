use rayon::prelude::*;

use crate::arch::{ModalitySet, ModelState, MomeConfig};
use crate::data::{center_offset, prepare, Placement, StudyRecord};
use crate::error::{MomeError, Result};
use crate::tensor::compensated_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Anchor {
    Start,
    Center,
    End,
}

impl Anchor {
    const ALL: [Anchor; 3] = [Anchor::Start, Anchor::Center, Anchor::End];

    fn offset(self, slack: usize) -> usize {
        match self {
            Anchor::Start => 0,
            Anchor::Center => slack / 2,
            Anchor::End => slack,
        }
    }
}

/// One test-time variant: placement anchors on the two in-plane axes (depth
/// stays centered) and a flip mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TtaVariant {
    pub anchors: [Anchor; 2],
    pub flips: [bool; 3],
}

const TTA_FLIPS: [[bool; 3]; 6] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
];

/// The 9 × 6 = 54 variants.
pub fn tta_variants() -> Vec<TtaVariant> {
    let mut out = Vec::with_capacity(54);
    for a0 in Anchor::ALL {
        for a1 in Anchor::ALL {
            for flips in TTA_FLIPS {
                out.push(TtaVariant {
                    anchors: [a0, a1],
                    flips,
                });
            }
        }
    }
    out
}

impl TtaVariant {
    pub fn placement(&self, record: &StudyRecord, config: &MomeConfig) -> Result<Placement> {
        let offsets = config
            .modalities
            .iter()
            .map(|m| {
                let Ok(v) = record.volume(&m.name) else {
                    return Ok(None);
                };
                let s = v.shape();
                let dims = [s[0], s[1], s[2]];
                let mut off = center_offset(dims, m.dims);
                for a in 0..2 {
                    let slack = m.dims[a].checked_sub(dims[a]).ok_or_else(|| {
                        MomeError::data(format!("study {}: {} exceeds its canvas", record.id, m.name))
                    })?;
                    off[a] = self.anchors[a].offset(slack);
                }
                Ok(Some(off))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Placement {
            flips: self.flips,
            offsets,
        })
    }
}

/// Positive-class score averaged over the 54 variants. Passes run in
/// parallel; the sum is taken in enumeration order.
pub fn tta_predict(state: &ModelState, record: &StudyRecord, present: ModalitySet) -> Result<f64> {
    let variants = tta_variants();
    let scores = variants
        .par_iter()
        .map(|v| {
            let inputs = prepare(record, &state.config, present, &v.placement(record, &state.config)?)?;
            Ok(state.predict(&inputs, present)?[1])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(scores.iter().copied()) / scores.len() as f64)
}
