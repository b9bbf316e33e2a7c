use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MomeConfig;
use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Every parameter of a model, each tagged frozen (backbone) or trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: MomeConfig,
    params: BTreeMap<String, Param>,
}

/// Parameter naming scheme. Block-level attention/FFN/norm weights are the
/// frozen backbone; everything else trains.
pub mod names {
    pub fn conv_w(m: &str, s: usize) -> String {
        format!("tok.{m}.conv{s}.w")
    }
    pub fn conv_b(m: &str, s: usize) -> String {
        format!("tok.{m}.conv{s}.b")
    }
    pub fn pos(m: &str) -> String {
        format!("tok.{m}.pos")
    }
    pub const CLS: &str = "cls.token";
    pub const CLS_POS: &str = "cls.pos";
    pub fn block(l: usize, rest: &str) -> String {
        format!("blk{l}.{rest}")
    }
    pub fn adapter(l: usize, m: &str, rest: &str) -> String {
        format!("blk{l}.adapter.{m}.{rest}")
    }
    pub fn soft(l: usize, rest: &str) -> String {
        format!("blk{l}.soft.{rest}")
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Param>,
}

impl Init<'_> {
    fn gauss(&mut self, name: String, shape: &[usize], std: f64, frozen: bool) {
        let tensor = Tensor::randn(shape, std, &mut self.rng);
        self.params.insert(name, Param { tensor, frozen });
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64, frozen: bool) {
        self.params.insert(
            name,
            Param {
                tensor: Tensor::full(shape, value),
                frozen,
            },
        );
    }

    fn linear(&mut self, prefix: String, din: usize, dout: usize, std: f64, frozen: bool) {
        self.gauss(format!("{prefix}.w"), &[din, dout], std, frozen);
        self.fill(format!("{prefix}.b"), &[dout], 0.0, frozen);
    }

    fn norm(&mut self, prefix: String, n: usize, gamma: f64, frozen: bool) {
        self.fill(format!("{prefix}.g"), &[n], gamma, frozen);
        self.fill(format!("{prefix}.b"), &[n], 0.0, frozen);
    }
}

impl ModelState {
    /// Seeded initialization. The backbone draws Gaussian weights with
    /// `backbone_init_std`; adapter output norms start at zero gain so the
    /// initial model equals its frozen backbone.
    pub fn init(config: &MomeConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            params: &mut params,
        };
        let d = config.d_model;
        let k = config.tokenizer_kernel;
        let std = config.backbone_init_std;

        for (mi, m) in config.modalities.iter().enumerate() {
            let mut cin = m.channels;
            for (s, &cout) in config.stage_channels().iter().enumerate() {
                let fan_in = (k * k * k * cin) as f64;
                init.gauss(
                    names::conv_w(&m.name, s),
                    &[k, k, k, cin, cout],
                    (2.0 / fan_in).sqrt(),
                    false,
                );
                init.fill(names::conv_b(&m.name, s), &[cout], 0.0, false);
                cin = cout;
            }
            init.gauss(names::pos(&m.name), &[config.tokens_for(mi), d], 0.02, false);
        }
        init.gauss(names::CLS.into(), &[1, d], 0.02, false);
        init.gauss(names::CLS_POS.into(), &[1, d], 0.02, false);

        for l in 0..config.n_blocks {
            init.norm(names::block(l, "ln1"), d, 1.0, true);
            for p in ["q", "k", "v", "o"] {
                init.linear(names::block(l, &format!("attn.{p}")), d, d, std, true);
            }
            init.norm(names::block(l, "ln2"), d, 1.0, true);
            init.linear(names::block(l, "ffn.up"), d, config.ffn_hidden, std, true);
            init.linear(names::block(l, "ffn.down"), config.ffn_hidden, d, std, true);

            if l < config.n_sparse_blocks {
                let h = config.adapter_hidden;
                for m in &config.modalities {
                    init.linear(names::adapter(l, &m.name, "down"), d, h, (1.0 / d as f64).sqrt(), false);
                    init.linear(names::adapter(l, &m.name, "up"), h, d, (1.0 / h as f64).sqrt(), false);
                    init.norm(names::adapter(l, &m.name, "ln"), d, 0.0, false);
                }
            } else {
                let h = config.soft_hidden;
                let hs = (1.0 / h as f64).sqrt();
                init.linear(names::soft(l, "down"), d, h, (1.0 / d as f64).sqrt(), false);
                init.gauss(names::soft(l, "phi"), &[h, config.n_slots()], hs, false);
                init.gauss(names::soft(l, "experts.w"), &[config.soft_experts, h, h], hs, false);
                init.fill(names::soft(l, "experts.b"), &[config.soft_experts, h], 0.0, false);
                init.linear(names::soft(l, "up"), h, d, hs, false);
                init.norm(names::soft(l, "ln"), d, 0.0, false);
            }
        }
        init.norm("head.ln".into(), d, 1.0, false);
        init.linear("head".into(), d, config.classifier_classes, 0.02, false);

        Ok(ModelState {
            config: config.clone(),
            params,
        })
    }

    /// Reassemble from stored parameters (e.g. a checkpoint). The name set,
    /// shapes, and frozen flags must match a fresh init of `config`.
    pub fn from_params(config: MomeConfig, params: BTreeMap<String, Param>) -> Result<Self> {
        let reference = ModelState::init(&config)?;
        if reference.params.len() != params.len() {
            return Err(MomeError::data(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, want) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| MomeError::data(format!("missing parameter {name}")))?;
            if got.tensor.shape() != want.tensor.shape() || got.frozen != want.frozen {
                return Err(MomeError::data(format!(
                    "parameter {name}: expected {:?} (frozen={}), found {:?} (frozen={})",
                    want.tensor.shape(),
                    want.frozen,
                    got.tensor.shape(),
                    got.frozen
                )));
            }
        }
        Ok(ModelState { config, params })
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| MomeError::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| MomeError::invalid(format!("unknown parameter {name}")))
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(|(_, p)| !p.frozen)
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(|(_, p)| p.frozen)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut().filter(|(_, p)| !p.frozen)
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen().map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Zero every adapter and soft-MoE output path (final projection and
    /// output norm affine), leaving only the frozen backbone contribution.
    pub fn zero_adapter_outputs(&mut self) {
        for (name, p) in self.params.iter_mut() {
            let is_adapter = name.contains(".adapter.") || name.contains(".soft.");
            let is_output = name.ends_with(".up.w")
                || name.ends_with(".up.b")
                || name.ends_with(".ln.g")
                || name.ends_with(".ln.b");
            if is_adapter && is_output {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_complete_and_disjoint() {
        let s = ModelState::init(&MomeConfig::tiny()).unwrap();
        let total: usize = s.params().values().map(|p| p.tensor.numel()).sum();
        assert_eq!(s.n_frozen() + s.n_trainable(), total);
        assert!(s.n_frozen() > 0 && s.n_trainable() > 0);
        for (name, p) in s.params() {
            let backbone = name.starts_with("blk") && !name.contains(".adapter.") && !name.contains(".soft.");
            assert_eq!(p.frozen, backbone, "{name}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(&MomeConfig::tiny()).unwrap();
        let b = ModelState::init(&MomeConfig::tiny()).unwrap();
        assert_eq!(a, b);
        let mut cfg = MomeConfig::tiny();
        cfg.init_seed = 1;
        let c = ModelState::init(&cfg).unwrap();
        assert_ne!(a, c);
    }
}
