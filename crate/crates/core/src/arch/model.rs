use std::collections::BTreeMap;
use std::fmt;

use super::config::MomeConfig;
use super::state::{names, ModelState};
use crate::error::{MomeError, Result};
use crate::tensor::nn::{self, AttentionParams, FeedForwardParams, LinearParams, NormParams, IN_EPS};
use crate::tensor::{Tape, Tensor, Var};

/// Subset of the configured modalities, as a bitmask over config order.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet(u16);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn all(n: usize) -> Self {
        assert!(n <= 16, "at most 16 modalities");
        ModalitySet(((1u32 << n) - 1) as u16)
    }

    pub fn single(i: usize) -> Self {
        ModalitySet(1 << i)
    }

    pub fn from_bits(bits: u16) -> Self {
        ModalitySet(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 16 && self.0 & (1 << i) != 0
    }

    pub fn with(self, i: usize) -> Self {
        ModalitySet(self.0 | (1 << i))
    }

    pub fn without(self, i: usize) -> Self {
        ModalitySet(self.0 & !(1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..16).filter(move |&i| self.contains(i))
    }

    /// Resolve modality names against a config.
    pub fn from_names<S: AsRef<str>>(config: &MomeConfig, names: &[S]) -> Result<Self> {
        let mut set = ModalitySet::EMPTY;
        for n in names {
            let i = config
                .modality_index(n.as_ref())
                .ok_or_else(|| MomeError::invalid(format!("unknown modality {:?}", n.as_ref())))?;
            set = set.with(i);
        }
        Ok(set)
    }

    pub fn names(self, config: &MomeConfig) -> Vec<String> {
        self.iter()
            .filter_map(|i| config.modalities.get(i).map(|m| m.name.clone()))
            .collect()
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub modality: usize,
    pub offset: usize,
    pub len: usize,
}

/// Layout of the fused token sequence: modality spans in config order, with
/// the CLS token directly after its host span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub spans: Vec<Span>,
    pub cls: usize,
    pub present: ModalitySet,
}

impl TokenSequence {
    pub fn new(config: &MomeConfig, present: ModalitySet) -> Result<Self> {
        let host = cls_host(config, present)?;
        let mut spans = Vec::new();
        let mut offset = 0;
        let mut cls = 0;
        for i in present.iter() {
            let len = config.tokens_for(i);
            spans.push(Span {
                modality: i,
                offset,
                len,
            });
            offset += len;
            if i == host {
                cls = offset;
                offset += 1;
            }
        }
        Ok(TokenSequence { spans, cls, present })
    }

    pub fn len(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum::<usize>() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span(&self, modality: usize) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.modality == modality)
    }
}

/// The modality whose span carries the CLS token.
pub fn cls_host(config: &MomeConfig, present: ModalitySet) -> Result<usize> {
    if present.is_empty() {
        return Err(MomeError::invalid("no modality present"));
    }
    if let Some(bad) = present.iter().find(|&i| i >= config.modalities.len()) {
        return Err(MomeError::invalid(format!("modality index {bad} is not configured")));
    }
    let preferred = config.cls_host.as_deref().and_then(|h| config.modality_index(h));
    Ok(match preferred {
        Some(h) if present.contains(h) => h,
        _ => present.iter().next().expect("nonempty"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Record trainable parameters as gradient-carrying leaves.
    pub param_grads: bool,
    /// Run the sparse adapters and soft-MoE branches; `false` gives the
    /// frozen-backbone-only path.
    pub adapters: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            param_grads: false,
            adapters: true,
        }
    }
}

/// Places parameters on a tape on first use, so a forward pass only ever
/// touches what it needs.
pub struct Binder<'s> {
    state: &'s ModelState,
    bound: BTreeMap<String, Var>,
    param_grads: bool,
}

impl<'s> Binder<'s> {
    pub fn new(state: &'s ModelState, param_grads: bool) -> Self {
        Binder {
            state,
            bound: BTreeMap::new(),
            param_grads,
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.state.get(name)?;
        let v = tape.leaf(p.tensor.clone(), self.param_grads && !p.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    fn linear(&mut self, tape: &mut Tape, prefix: &str) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.get(tape, &format!("{prefix}.w"))?,
            b: self.get(tape, &format!("{prefix}.b"))?,
        })
    }

    fn norm(&mut self, tape: &mut Tape, prefix: &str) -> Result<NormParams> {
        Ok(NormParams {
            gamma: self.get(tape, &format!("{prefix}.g"))?,
            beta: self.get(tape, &format!("{prefix}.b"))?,
        })
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Conv stages (conv, instance norm, ReLU) then a 2×2×2 max pool, flattened
/// to `[tokens × d_model]`.
pub fn tokenize(tape: &mut Tape, b: &mut Binder, modality: usize, volume: Var) -> Result<Var> {
    let cfg = &b.state.config;
    let spec = cfg
        .modalities
        .get(modality)
        .ok_or_else(|| MomeError::invalid(format!("modality index {modality} is not configured")))?;
    if tape.shape(volume) != spec.volume_shape() {
        return Err(MomeError::data(format!(
            "{} volume has shape {:?}, expected {:?}",
            spec.name,
            tape.shape(volume),
            spec.volume_shape()
        )));
    }
    let name = spec.name.clone();
    let (stages, tokens, d) = (cfg.tokenizer_stages, cfg.tokens_for(modality), cfg.d_model);
    let mut x = volume;
    for s in 0..stages {
        let w = b.get(tape, &names::conv_w(&name, s))?;
        let bias = b.get(tape, &names::conv_b(&name, s))?;
        x = tape.conv3d(x, w, bias, 2)?;
        x = tape.instance_norm(x, IN_EPS)?;
        x = tape.relu(x);
    }
    x = tape.maxpool3d(x, 2, 2)?;
    tape.reshape(x, &[tokens, d])
}

/// Attention half and normalized FFN input of a frozen block:
/// returns `(Z, LN2(Z), Z + FFN(LN2(Z)))`.
fn backbone_block(tape: &mut Tape, b: &mut Binder, l: usize, x: Var) -> Result<(Var, Var, Var)> {
    let heads = b.state.config.heads;
    let ln1 = b.norm(tape, &names::block(l, "ln1"))?;
    let attn = AttentionParams {
        q: b.linear(tape, &names::block(l, "attn.q"))?,
        k: b.linear(tape, &names::block(l, "attn.k"))?,
        v: b.linear(tape, &names::block(l, "attn.v"))?,
        o: b.linear(tape, &names::block(l, "attn.o"))?,
    };
    let ln2 = b.norm(tape, &names::block(l, "ln2"))?;
    let ffn = FeedForwardParams {
        up: b.linear(tape, &names::block(l, "ffn.up"))?,
        down: b.linear(tape, &names::block(l, "ffn.down"))?,
    };
    let h = ln1.apply(tape, x)?;
    let a = nn::multi_head_self_attention(tape, h, &attn, heads)?;
    let z = tape.add(x, a)?;
    let hz = ln2.apply(tape, z)?;
    let f = nn::feed_forward(tape, hz, &ffn)?;
    let out = tape.add(z, f)?;
    Ok((z, hz, out))
}

/// One sparse block over a single modality's tokens (plus CLS on the host).
pub fn sparse_block_forward(
    tape: &mut Tape,
    b: &mut Binder,
    l: usize,
    modality: usize,
    x: Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let cfg = &b.state.config;
    if l >= cfg.n_sparse_blocks {
        return Err(MomeError::invalid(format!("block {l} is not a sparse block")));
    }
    let name = cfg
        .modalities
        .get(modality)
        .ok_or_else(|| MomeError::invalid(format!("modality index {modality} is not configured")))?
        .name
        .clone();
    let (_, hz, out) = backbone_block(tape, b, l, x)?;
    if !opts.adapters {
        return Ok(out);
    }
    let down = b.linear(tape, &names::adapter(l, &name, "down"))?;
    let up = b.linear(tape, &names::adapter(l, &name, "up"))?;
    let ln = b.norm(tape, &names::adapter(l, &name, "ln"))?;
    let a = down.apply(tape, hz)?;
    let a = tape.gelu(a);
    let a = up.apply(tape, a)?;
    let a = ln.apply(tape, a)?;
    tape.add(out, a)
}

/// Intermediate nodes of one soft-MoE application.
#[derive(Clone, Copy, Debug)]
pub struct SoftMoe {
    pub dispatch: Var,
    pub slots: Var,
    pub expert_out: Var,
    pub combine: Var,
    pub output: Var,
}

/// Soft mixture of experts: `D = softmax₀(xΦ)`, slots `Dᵀx`, slot `j`
/// through expert `⌊j/p⌋`, `C = softmax₁(xΦ)`, output `C·Ỹ`.
pub fn soft_moe(
    tape: &mut Tape,
    x: Var,
    phi: Var,
    expert_w: Var,
    expert_b: Var,
    slots_per_expert: usize,
) -> Result<SoftMoe> {
    let logits = tape.matmul(x, phi)?;
    let dispatch = tape.softmax(logits, 0)?;
    let dt = tape.transpose(dispatch)?;
    let slots = tape.matmul(dt, x)?;
    let expert_out = tape.grouped_linear(slots, expert_w, expert_b, slots_per_expert)?;
    let combine = tape.softmax(logits, 1)?;
    let output = tape.matmul(combine, expert_out)?;
    Ok(SoftMoe {
        dispatch,
        slots,
        expert_out,
        combine,
        output,
    })
}

/// One fusion block over the full multimodal sequence.
pub fn soft_block_forward(tape: &mut Tape, b: &mut Binder, l: usize, x: Var, opts: ForwardOptions) -> Result<Var> {
    let cfg = &b.state.config;
    if l < cfg.n_sparse_blocks || l >= cfg.n_blocks {
        return Err(MomeError::invalid(format!("block {l} is not a soft block")));
    }
    if tape.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(MomeError::invalid("empty token sequence"));
    }
    let p = cfg.slots_per_expert;
    let (_, hz, out) = backbone_block(tape, b, l, x)?;
    if !opts.adapters {
        return Ok(out);
    }
    let down = b.linear(tape, &names::soft(l, "down"))?;
    let up = b.linear(tape, &names::soft(l, "up"))?;
    let ln = b.norm(tape, &names::soft(l, "ln"))?;
    let phi = b.get(tape, &names::soft(l, "phi"))?;
    let ew = b.get(tape, &names::soft(l, "experts.w"))?;
    let eb = b.get(tape, &names::soft(l, "experts.b"))?;
    let h = down.apply(tape, hz)?;
    let h = tape.gelu(h);
    let moe = soft_moe(tape, h, phi, ew, eb, p)?;
    let a = up.apply(tape, moe.output)?;
    let a = ln.apply(tape, a)?;
    tape.add(out, a)
}

/// Result of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Class logits, shape `[classes]`.
    pub logits: Var,
    /// Softmax of the logits.
    pub probs: Vec<f64>,
    /// Per configured modality: its tokens after the sparse stage (with CLS
    /// appended on the host), `None` when absent.
    pub sparse_tokens: Vec<Option<Var>>,
    /// Fused sequence after the last block.
    pub tokens: Var,
    pub layout: TokenSequence,
}

/// Forward pass over tape-resident volumes. `inputs[i]` must be `Some`
/// exactly for the present modalities; nothing belonging to an absent
/// modality is read or bound.
pub fn forward_on_tape(
    tape: &mut Tape,
    b: &mut Binder,
    inputs: &[Option<Var>],
    opts: ForwardOptions,
) -> Result<Forward> {
    let cfg = b.state.config.clone();
    if inputs.len() != cfg.modalities.len() {
        return Err(MomeError::invalid(format!(
            "{} input slots for {} configured modalities",
            inputs.len(),
            cfg.modalities.len()
        )));
    }
    let present = inputs
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_some())
        .fold(ModalitySet::EMPTY, |s, (i, _)| s.with(i));
    let layout = TokenSequence::new(&cfg, present)?;
    let host = cls_host(&cfg, present)?;

    let mut sparse_tokens = vec![None; cfg.modalities.len()];
    for i in present.iter() {
        let vol = inputs[i].expect("present");
        let t = tokenize(tape, b, i, vol)?;
        let pos = b.get(tape, &names::pos(&cfg.modalities[i].name))?;
        let mut x = tape.add(t, pos)?;
        if i == host {
            let cls = b.get(tape, names::CLS)?;
            let cls_pos = b.get(tape, names::CLS_POS)?;
            let c = tape.add(cls, cls_pos)?;
            x = tape.concat_rows(&[x, c])?;
        }
        for l in 0..cfg.n_sparse_blocks {
            x = sparse_block_forward(tape, b, l, i, x, opts)?;
        }
        sparse_tokens[i] = Some(x);
    }

    let parts: Vec<Var> = sparse_tokens.iter().flatten().copied().collect();
    let mut x = tape.concat_rows(&parts)?;
    for l in cfg.n_sparse_blocks..cfg.n_blocks {
        x = soft_block_forward(tape, b, l, x, opts)?;
    }

    let cls_row = tape.slice_rows(x, layout.cls, 1)?;
    let head_ln = b.norm(tape, "head.ln")?;
    let head = b.linear(tape, "head")?;
    let h = head_ln.apply(tape, cls_row)?;
    let logits = head.apply(tape, h)?;
    let logits = tape.reshape(logits, &[cfg.classifier_classes])?;
    let probs = tape.softmax(logits, 0)?;
    let probs = tape.value(probs).data().to_vec();
    Ok(Forward {
        logits,
        probs,
        sparse_tokens,
        tokens: x,
        layout,
    })
}

/// Check `volumes` against the config and place the present ones on `tape`.
pub fn bind_inputs(
    tape: &mut Tape,
    config: &MomeConfig,
    volumes: &[Tensor],
    present: ModalitySet,
    requires_grad: bool,
) -> Result<Vec<Option<Var>>> {
    if volumes.len() != config.modalities.len() {
        return Err(MomeError::data(format!(
            "{} volumes for {} configured modalities",
            volumes.len(),
            config.modalities.len()
        )));
    }
    if present.is_empty() {
        return Err(MomeError::invalid("no modality present"));
    }
    if present.iter().any(|i| i >= config.modalities.len()) {
        return Err(MomeError::invalid(format!(
            "present set {present:?} exceeds the configured modalities"
        )));
    }
    Ok((0..volumes.len())
        .map(|i| {
            present
                .contains(i)
                .then(|| tape.leaf(volumes[i].clone(), requires_grad))
        })
        .collect())
}

/// Per-parameter gradients and scalar loss for one weighted training example.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grads: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Class scores for one study using the modalities in `present`;
    /// volumes outside `present` are ignored.
    pub fn predict(&self, volumes: &[Tensor], present: ModalitySet) -> Result<Vec<f64>> {
        self.predict_with(volumes, present, ForwardOptions::default())
    }

    pub fn predict_with(&self, volumes: &[Tensor], present: ModalitySet, opts: ForwardOptions) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let inputs = bind_inputs(&mut tape, &self.config, volumes, present, false)?;
        let mut b = Binder::new(self, opts.param_grads);
        Ok(forward_on_tape(&mut tape, &mut b, &inputs, opts)?.probs)
    }

    /// Prediction using only the frozen backbone path (every adapter and
    /// soft-MoE branch skipped).
    pub fn predict_backbone_only(&self, volumes: &[Tensor], present: ModalitySet) -> Result<Vec<f64>> {
        self.predict_with(
            volumes,
            present,
            ForwardOptions {
                param_grads: false,
                adapters: false,
            },
        )
    }

    /// Weighted cross-entropy and its gradient with respect to every
    /// trainable parameter that the forward pass touched.
    pub fn loss_and_grads(
        &self,
        volumes: &[Tensor],
        present: ModalitySet,
        label: usize,
        weight: f64,
    ) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let inputs = bind_inputs(&mut tape, &self.config, volumes, present, false)?;
        let opts = ForwardOptions {
            param_grads: true,
            adapters: true,
        };
        let mut b = Binder::new(self, true);
        let f = forward_on_tape(&mut tape, &mut b, &inputs, opts)?;
        let loss = tape.softmax_nll(f.logits, label, weight)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(MomeError::Numeric(format!("non-finite loss {loss_value}")));
        }
        tape.backward(loss)?;
        Ok(LossGrad {
            loss: loss_value,
            probs: f.probs,
            grads: b.grads(&tape),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_set_basics() {
        let s = ModalitySet::all(3);
        assert_eq!(s.len(), 3);
        assert_eq!(s.without(1).iter().collect::<Vec<_>>(), vec![0, 2]);
        assert!(ModalitySet::EMPTY.is_empty());
        let cfg = MomeConfig::desk();
        assert_eq!(ModalitySet::from_names(&cfg, &["t2", "dce"]).unwrap().bits(), 0b101);
        assert!(ModalitySet::from_names(&cfg, &["flair"]).is_err());
    }

    #[test]
    fn layout_places_cls_after_host() {
        let cfg = MomeConfig::desk();
        let seq = TokenSequence::new(&cfg, ModalitySet::all(3)).unwrap();
        assert_eq!(seq.len(), 32 + 16 + 16 + 1);
        assert_eq!(seq.cls, 32);
        assert_eq!(seq.span(1).unwrap().offset, 33);
        let seq = TokenSequence::new(&cfg, ModalitySet::single(1).with(2)).unwrap();
        assert_eq!(seq.cls, 16);
        assert_eq!(seq.span(2).unwrap().offset, 17);
        assert!(TokenSequence::new(&cfg, ModalitySet::EMPTY).is_err());
    }
}
