use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};

/// One input sequence: its name, the canvas it is padded to, and its
/// channel count (time phases for DCE, 1 otherwise).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dims: [usize; 3],
    pub channels: usize,
}

impl ModalitySpec {
    pub fn new(name: &str, dims: [usize; 3], channels: usize) -> Self {
        ModalitySpec {
            name: name.to_string(),
            dims,
            channels,
        }
    }

    pub fn volume_shape(&self) -> [usize; 4] {
        [self.dims[0], self.dims[1], self.dims[2], self.channels]
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomeConfig {
    pub modalities: Vec<ModalitySpec>,
    pub d_model: usize,
    pub heads: usize,
    /// Stride-2 conv stages in each tokenizer; a stride-2 max pool follows.
    pub tokenizer_stages: usize,
    pub tokenizer_kernel: usize,
    /// Channels of the first conv stage; doubles per stage, last stage is `d_model`.
    pub tokenizer_base_channels: usize,
    pub n_blocks: usize,
    /// Leading blocks with per-modality sparse experts; the rest fuse with soft MoE.
    pub n_sparse_blocks: usize,
    pub soft_experts: usize,
    pub slots_per_expert: usize,
    pub adapter_hidden: usize,
    /// Width the soft-MoE operates at (down/up projections around it).
    pub soft_hidden: usize,
    pub ffn_hidden: usize,
    pub classifier_classes: usize,
    pub backbone_init_std: f64,
    pub init_seed: u64,
    /// Modality whose span carries the CLS token; falls back to the first
    /// present modality in config order when absent from the input. Unset
    /// when omitted from a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_host: Option<String>,
}

impl Default for MomeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MomeConfig {
    /// Laptop-scale default: 32 + 16 + 16 modality tokens plus CLS.
    pub fn desk() -> Self {
        MomeConfig {
            modalities: vec![
                ModalitySpec::new("dce", [32, 32, 16], 6),
                ModalitySpec::new("dwi", [32, 16, 16], 1),
                ModalitySpec::new("t2", [32, 32, 8], 1),
            ],
            d_model: 64,
            heads: 4,
            tokenizer_stages: 2,
            tokenizer_kernel: 3,
            tokenizer_base_channels: 32,
            n_blocks: 4,
            n_sparse_blocks: 3,
            soft_experts: 8,
            slots_per_expert: 1,
            adapter_hidden: 16,
            soft_hidden: 32,
            ffn_hidden: 256,
            classifier_classes: 2,
            backbone_init_std: 0.02,
            init_seed: 0,
            cls_host: Some("dce".to_string()),
        }
    }

    /// Full-size geometry: 12 blocks (9 sparse + 3 soft), 128 single-slot
    /// experts, width 768, three conv stages. Only practical for shape arithmetic.
    pub fn full_scale() -> Self {
        MomeConfig {
            modalities: vec![
                ModalitySpec::new("dce", [384, 256, 128], 6),
                ModalitySpec::new("dwi", [256, 128, 32], 1),
                ModalitySpec::new("t2", [384, 256, 48], 1),
            ],
            d_model: 768,
            heads: 12,
            tokenizer_stages: 3,
            tokenizer_kernel: 3,
            tokenizer_base_channels: 192,
            n_blocks: 12,
            n_sparse_blocks: 9,
            soft_experts: 128,
            slots_per_expert: 1,
            adapter_hidden: 192,
            soft_hidden: 384,
            ffn_hidden: 3072,
            classifier_classes: 2,
            backbone_init_std: 0.02,
            init_seed: 0,
            cls_host: Some("dce".to_string()),
        }
    }

    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        MomeConfig {
            modalities: vec![
                ModalitySpec::new("dce", [8, 4, 4], 2),
                ModalitySpec::new("dwi", [4, 4, 4], 1),
                ModalitySpec::new("t2", [4, 8, 4], 1),
            ],
            d_model: 8,
            heads: 2,
            tokenizer_stages: 1,
            tokenizer_kernel: 3,
            tokenizer_base_channels: 8,
            n_blocks: 2,
            n_sparse_blocks: 1,
            soft_experts: 3,
            slots_per_expert: 2,
            adapter_hidden: 4,
            soft_hidden: 4,
            ffn_hidden: 16,
            classifier_classes: 2,
            backbone_init_std: 0.02,
            init_seed: 0,
            cls_host: Some("dce".to_string()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MomeError::config(m));
        if self.modalities.is_empty() {
            return err("at least one modality is required".into());
        }
        if self.modalities.len() > 16 {
            return err("at most 16 modalities are supported".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.name.is_empty() || self.modalities[..i].iter().any(|o| o.name == m.name) {
                return err(format!("modality names must be unique and nonempty: {:?}", m.name));
            }
            if m.channels == 0 || m.dims.contains(&0) {
                return err(format!("modality {} has an empty axis", m.name));
            }
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.n_sparse_blocks < 1 || self.n_sparse_blocks > self.n_blocks {
            return err(format!(
                "need 1 <= n_sparse_blocks ({}) <= n_blocks ({})",
                self.n_sparse_blocks, self.n_blocks
            ));
        }
        if self.soft_experts == 0 || self.slots_per_expert == 0 {
            return err("soft_experts and slots_per_expert must be >= 1".into());
        }
        if self.tokenizer_stages == 0 || self.tokenizer_kernel == 0 || self.tokenizer_base_channels == 0 {
            return err("tokenizer stages, kernel and base channels must be >= 1".into());
        }
        if [
            self.adapter_hidden,
            self.soft_hidden,
            self.ffn_hidden,
            self.classifier_classes,
        ]
        .contains(&0)
        {
            return err("hidden widths and class count must be >= 1".into());
        }
        if self.classifier_classes < 2 {
            return err("classifier needs at least two classes".into());
        }
        if !(self.backbone_init_std.is_finite() && self.backbone_init_std >= 0.0) {
            return err("backbone_init_std must be finite and >= 0".into());
        }
        if let Some(host) = &self.cls_host {
            if self.modality_index(host).is_none() {
                return err(format!("cls_host {host:?} is not a configured modality"));
            }
        }
        for m in &self.modalities {
            for (axis, &d) in m.dims.iter().enumerate() {
                if d < 1 << (self.tokenizer_stages + 1) {
                    return err(format!(
                        "modality {} axis {axis} ({d}) vanishes after {} halvings",
                        m.name,
                        self.tokenizer_stages + 1
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Output channels of each conv stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        let s = self.tokenizer_stages;
        (0..s)
            .map(|i| {
                if i + 1 == s {
                    self.d_model
                } else {
                    (self.tokenizer_base_channels << i).min(self.d_model)
                }
            })
            .collect()
    }

    /// Spatial grid after all conv stages and the pool.
    pub fn token_grid(&self, modality: usize) -> [usize; 3] {
        let mut g = self.modalities[modality].dims;
        for _ in 0..=self.tokenizer_stages {
            for d in &mut g {
                *d = d.div_ceil(2);
            }
        }
        g
    }

    pub fn tokens_for(&self, modality: usize) -> usize {
        self.token_grid(modality).iter().product()
    }

    pub fn n_slots(&self) -> usize {
        self.soft_experts * self.slots_per_expert
    }
}
