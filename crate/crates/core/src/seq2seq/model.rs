use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_mask, dropout, log_softmax, Attention, AttnCache, FeedForward, FfnCache, LayerNorm,
    LnCache, Linear,
};
use super::params::{Init, ParamGroup, ParamStore, Slot};
use super::{ModelConfig, ModelError};
use crate::corpus::{TrainingPair, PAD_ID};
use crate::semtree::SemId;
use crate::vecmath::{axpy, dot_f64};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Decoder block for one output position (`θ_i`).
#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
}

/// Prefix-only block producing the weight-generator input (`θ'_i`).
#[derive(Debug, Clone)]
struct AdaptorBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: Slot,
    pos_emb: Slot,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    dec_tok: Slot,
    dec_pos: Slot,
    dec_blocks: Vec<DecoderBlock>,
    ada_tok: Slot,
    ada_pos: Slot,
    ada_blocks: Vec<AdaptorBlock>,
    w_gen: Linear,
}

impl Layout {
    fn new(cfg: &ModelConfig, ps: &mut ParamStore) -> Self {
        use ParamGroup::*;
        let h = cfg.hidden;
        let ha = cfg.adaptor_hidden;
        let n = Init::TruncNormal(INIT_STD);
        let tok_emb = ps.alloc("encoder.tok_emb", &[cfg.vocab_size, h], Encoder, n);
        let pos_emb = ps.alloc("encoder.pos_emb", &[cfg.max_query_len, h], Encoder, n);
        let enc_layers = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(ps, &format!("{p}.ln1"), h, Encoder),
                    attn: Attention::new(ps, &format!("{p}.attn"), h, cfg.heads, Encoder, n),
                    ln2: LayerNorm::new(ps, &format!("{p}.ln2"), h, Encoder),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), h, cfg.ffn_hidden, Encoder, n),
                }
            })
            .collect();
        let enc_ln = LayerNorm::new(ps, "encoder.ln_out", h, Encoder);

        let k = cfg.branching;
        let d = cfg.max_positions;
        let dec_tok = ps.alloc("decoder.tok_emb", &[k, h], Decoder, n);
        let dec_pos = ps.alloc("decoder.pos_emb", &[d, h], Decoder, n);
        let dec_blocks = (1..=d)
            .map(|i| {
                let p = format!("decoder.pos{i}");
                DecoderBlock {
                    ln1: LayerNorm::new(ps, &format!("{p}.ln1"), h, Decoder),
                    self_attn: Attention::new(ps, &format!("{p}.self_attn"), h, cfg.heads, Decoder, n),
                    ln2: LayerNorm::new(ps, &format!("{p}.ln2"), h, Decoder),
                    cross_attn: Attention::new(ps, &format!("{p}.cross_attn"), h, cfg.heads, Decoder, n),
                    ln3: LayerNorm::new(ps, &format!("{p}.ln3"), h, Decoder),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), h, cfg.ffn_hidden, Decoder, n),
                    ln_out: LayerNorm::new(ps, &format!("{p}.ln_out"), h, Decoder),
                }
            })
            .collect();

        let ada_tok = ps.alloc("adaptor.tok_emb", &[k, ha], Adaptor, n);
        let ada_pos = ps.alloc("adaptor.pos_emb", &[d, ha], Adaptor, n);
        let ada_blocks = (1..=d)
            .map(|i| {
                let p = format!("adaptor.pos{i}");
                AdaptorBlock {
                    ln1: LayerNorm::new(ps, &format!("{p}.ln1"), ha, Adaptor),
                    self_attn: Attention::new(ps, &format!("{p}.self_attn"), ha, cfg.adaptor_heads, Adaptor, n),
                    ln2: LayerNorm::new(ps, &format!("{p}.ln2"), ha, Adaptor),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), ha, cfg.adaptor_ffn_hidden, Adaptor, n),
                    ln_out: LayerNorm::new(ps, &format!("{p}.ln_out"), ha, Adaptor),
                }
            })
            .collect();
        // Zero-initialized: every W_i starts at zero, so initial predictions are uniform.
        let w_gen = Linear::new(ps, "adaptor.w_gen", ha, h * cfg.semid_vocab(), Adaptor, Init::Zeros);
        Self {
            tok_emb,
            pos_emb,
            enc_layers,
            enc_ln,
            dec_tok,
            dec_pos,
            dec_blocks,
            ada_tok,
            ada_pos,
            ada_blocks,
            w_gen,
        }
    }
}

/// Encoder output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// One `hidden`-vector per input position, row-major.
    pub states: Vec<f64>,
    pub len: usize,
    /// `false` at padding positions.
    pub mask: Vec<bool>,
    /// Mean of the states over non-padding positions (`f_t`).
    pub pooled: Vec<f64>,
    /// Set when the query has no non-padding token; `pooled` is then zero.
    pub degenerate: bool,
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    drop_a: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: FfnCache,
    drop_f: Option<Vec<f64>>,
}

struct EncCache {
    tokens: Vec<u32>,
    layers: Vec<EncLayerCache>,
    ln_out: LnCache,
}

struct DecCache {
    prefix_len: usize,
    ln1: LnCache,
    self_attn: AttnCache,
    drop_a: Option<Vec<f64>>,
    ln2: LnCache,
    cross: AttnCache,
    drop_c: Option<Vec<f64>>,
    ln3: LnCache,
    ffn: FfnCache,
    drop_f: Option<Vec<f64>>,
    ln_out: LnCache,
}

struct AdaCache {
    prefix_len: usize,
    ln1: LnCache,
    self_attn: AttnCache,
    drop_a: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: FfnCache,
    drop_f: Option<Vec<f64>>,
    ln_out: LnCache,
}

struct StepOutput {
    logits: Vec<f64>,
    e: Vec<f64>,
    e_ada: Vec<f64>,
    w: Vec<f64>,
    dec: DecCache,
    ada: AdaCache,
}

/// The PAWA generator: query encoder, per-position decoders, and the weight
/// adaptor.
#[derive(Debug, Clone)]
pub struct PawaModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for PawaModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl PawaModel {
    /// Fresh model initialized from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let mut model = Self::uninitialized(config)?;
        model.params.initialize(model.config.init_seed);
        Ok(model)
    }

    pub(super) fn uninitialized(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = Layout::new(&config, &mut params);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_query(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_query_len {
            return Err(ModelError::QueryTooLong {
                len: tokens.len(),
                max: self.config.max_query_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Checks a full target: root symbol, branch labels, END last, and a
    /// length that fits the decoding positions.
    fn check_target(&self, seq: &[u32], require_end: bool) -> Result<(), ModelError> {
        let end = self.config.end_token();
        let bad = |m: String| Err(ModelError::InvalidSemId(m));
        if seq.first() != Some(&0) {
            return bad("sequence must start with the root symbol 0".into());
        }
        let steps = seq.len() - 1;
        if steps == 0 {
            return bad("sequence has no generated token".into());
        }
        if steps > self.config.max_positions {
            return bad(format!(
                "{steps} generated tokens exceed {} positions",
                self.config.max_positions
            ));
        }
        for (i, &t) in seq.iter().enumerate().skip(1) {
            let last = i == seq.len() - 1;
            if t > end || (t == end && !last) {
                return bad(format!("token {t} at position {i} is not allowed"));
            }
        }
        if require_end && seq[seq.len() - 1] != end {
            return bad("sequence must end with END".into());
        }
        Ok(())
    }

    /// Target tokens followed by END.
    pub fn target_sequence(&self, id: &SemId) -> Vec<u32> {
        let mut seq = id.tokens().to_vec();
        seq.push(self.config.end_token());
        seq
    }

    fn encode_inner(
        &self,
        tokens: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Encoded, EncCache) {
        let p = &self.params.data;
        let l = &self.layout;
        let h = self.config.hidden;
        let n = tokens.len();
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        let mut x = vec![0.0; n * h];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * h..(t + 1) * h];
            row.copy_from_slice(l.tok_emb.row(p, tok as usize, h));
            axpy(1.0, l.pos_emb.row(p, t, h), row);
        }
        let rate = self.config.dropout;
        let mut layers = Vec::with_capacity(l.enc_layers.len());
        for layer in &l.enc_layers {
            let (z1, ln1) = layer.ln1.forward(p, &x, n);
            let (mut a, attn) = layer.attn.forward(p, &z1, n, &z1, n, Some(&mask));
            let drop_a = dropout(&mut a, rate, rng.as_deref_mut());
            axpy(1.0, &a, &mut x);
            let (z2, ln2) = layer.ln2.forward(p, &x, n);
            let (mut f, ffn) = layer.ffn.forward(p, &z2, n);
            let drop_f = dropout(&mut f, rate, rng.as_deref_mut());
            axpy(1.0, &f, &mut x);
            layers.push(EncLayerCache {
                ln1,
                attn,
                drop_a,
                ln2,
                ffn,
                drop_f,
            });
        }
        let (states, ln_out) = l.enc_ln.forward(p, &x, n);
        let real = mask.iter().filter(|&&m| m).count();
        let mut pooled = vec![0.0; h];
        for t in (0..n).filter(|&t| mask[t]) {
            axpy(1.0 / real as f64, &states[t * h..(t + 1) * h], &mut pooled);
        }
        (
            Encoded {
                states,
                len: n,
                mask,
                pooled,
                degenerate: real == 0,
            },
            EncCache {
                tokens: tokens.to_vec(),
                layers,
                ln_out,
            },
        )
    }

    fn encode_backward(&self, grad: &mut [f64], cache: &EncCache, dstates: &[f64]) {
        let p = &self.params.data;
        let l = &self.layout;
        let h = self.config.hidden;
        let n = cache.tokens.len();
        let mut dx = l.enc_ln.backward(p, grad, &cache.ln_out, dstates, n);
        for (layer, c) in l.enc_layers.iter().zip(&cache.layers).rev() {
            let df = apply_mask(&dx, &c.drop_f);
            let dz2 = layer.ffn.backward(p, grad, &c.ffn, &df, n);
            let dln2 = layer.ln2.backward(p, grad, &c.ln2, &dz2, n);
            axpy(1.0, &dln2, &mut dx);
            let da = apply_mask(&dx, &c.drop_a);
            let (dzq, dzkv) = layer.attn.backward(p, grad, &c.attn, &da);
            let mut dz1 = dzq;
            axpy(1.0, &dzkv, &mut dz1);
            let dln1 = layer.ln1.backward(p, grad, &c.ln1, &dz1, n);
            axpy(1.0, &dln1, &mut dx);
        }
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = &dx[t * h..(t + 1) * h];
            axpy(1.0, row, l.tok_emb.row_mut(grad, tok as usize, h));
            axpy(1.0, row, l.pos_emb.row_mut(grad, t, h));
        }
    }

    /// Runs the encoder in evaluation mode.
    pub fn encode(&self, tokens: &[u32]) -> Result<Encoded, ModelError> {
        self.check_query(tokens)?;
        Ok(self.encode_inner(tokens, None).0)
    }

    fn embed_prefix(&self, tok: Slot, pos: Slot, dim: usize, prefix: &[u32]) -> Vec<f64> {
        let p = &self.params.data;
        let mut e = vec![0.0; prefix.len() * dim];
        for (j, &t) in prefix.iter().enumerate() {
            let row = &mut e[j * dim..(j + 1) * dim];
            row.copy_from_slice(tok.row(p, t as usize, dim));
            axpy(1.0, pos.row(p, j, dim), row);
        }
        e
    }

    fn decoder_forward(
        &self,
        block: &DecoderBlock,
        enc: &Encoded,
        prefix: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, DecCache) {
        let p = &self.params.data;
        let h = self.config.hidden;
        let rate = self.config.dropout;
        let i = prefix.len();
        let e = self.embed_prefix(self.layout.dec_tok, self.layout.dec_pos, h, prefix);
        let (z1, ln1) = block.ln1.forward(p, &e, i);
        let (mut a, self_attn) = block.self_attn.forward(p, &z1[(i - 1) * h..], 1, &z1, i, None);
        let drop_a = dropout(&mut a, rate, rng.as_deref_mut());
        let mut h1 = e[(i - 1) * h..].to_vec();
        axpy(1.0, &a, &mut h1);
        let (z2, ln2) = block.ln2.forward(p, &h1, 1);
        let (mut c, cross) =
            block
                .cross_attn
                .forward(p, &z2, 1, &enc.states, enc.len, Some(&enc.mask));
        let drop_c = dropout(&mut c, rate, rng.as_deref_mut());
        axpy(1.0, &c, &mut h1);
        let (z3, ln3) = block.ln3.forward(p, &h1, 1);
        let (mut f, ffn) = block.ffn.forward(p, &z3, 1);
        let drop_f = dropout(&mut f, rate, rng.as_deref_mut());
        axpy(1.0, &f, &mut h1);
        let (out, ln_out) = block.ln_out.forward(p, &h1, 1);
        (
            out,
            DecCache {
                prefix_len: i,
                ln1,
                self_attn,
                drop_a,
                ln2,
                cross,
                drop_c,
                ln3,
                ffn,
                drop_f,
                ln_out,
            },
        )
    }

    /// Backpropagates `d_out` through one decoder block; adds the gradient
    /// with respect to the encoder states into `d_states`.
    fn decoder_backward(
        &self,
        block: &DecoderBlock,
        grad: &mut [f64],
        c: &DecCache,
        prefix: &[u32],
        d_out: &[f64],
        d_states: &mut [f64],
    ) {
        let p = &self.params.data;
        let h = self.config.hidden;
        let i = c.prefix_len;
        let mut dh = block.ln_out.backward(p, grad, &c.ln_out, d_out, 1);
        let df = apply_mask(&dh, &c.drop_f);
        let dz3 = block.ffn.backward(p, grad, &c.ffn, &df, 1);
        axpy(1.0, &block.ln3.backward(p, grad, &c.ln3, &dz3, 1), &mut dh);
        let dc = apply_mask(&dh, &c.drop_c);
        let (dz2, dstates) = block.cross_attn.backward(p, grad, &c.cross, &dc);
        axpy(1.0, &dstates, d_states);
        axpy(1.0, &block.ln2.backward(p, grad, &c.ln2, &dz2, 1), &mut dh);
        let da = apply_mask(&dh, &c.drop_a);
        let (dzq, mut dz1) = block.self_attn.backward(p, grad, &c.self_attn, &da);
        axpy(1.0, &dzq, &mut dz1[(i - 1) * h..]);
        let mut de = block.ln1.backward(p, grad, &c.ln1, &dz1, i);
        axpy(1.0, &dh, &mut de[(i - 1) * h..]);
        self.embed_backward(self.layout.dec_tok, self.layout.dec_pos, h, prefix, &de, grad);
    }

    fn adaptor_forward(
        &self,
        block: &AdaptorBlock,
        prefix: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, AdaCache) {
        let p = &self.params.data;
        let ha = self.config.adaptor_hidden;
        let rate = self.config.dropout;
        let i = prefix.len();
        let e = self.embed_prefix(self.layout.ada_tok, self.layout.ada_pos, ha, prefix);
        let (z1, ln1) = block.ln1.forward(p, &e, i);
        let (mut a, self_attn) = block.self_attn.forward(p, &z1[(i - 1) * ha..], 1, &z1, i, None);
        let drop_a = dropout(&mut a, rate, rng.as_deref_mut());
        let mut h1 = e[(i - 1) * ha..].to_vec();
        axpy(1.0, &a, &mut h1);
        let (z2, ln2) = block.ln2.forward(p, &h1, 1);
        let (mut f, ffn) = block.ffn.forward(p, &z2, 1);
        let drop_f = dropout(&mut f, rate, rng.as_deref_mut());
        axpy(1.0, &f, &mut h1);
        let (out, ln_out) = block.ln_out.forward(p, &h1, 1);
        (
            out,
            AdaCache {
                prefix_len: i,
                ln1,
                self_attn,
                drop_a,
                ln2,
                ffn,
                drop_f,
                ln_out,
            },
        )
    }

    fn adaptor_backward(
        &self,
        block: &AdaptorBlock,
        grad: &mut [f64],
        c: &AdaCache,
        prefix: &[u32],
        d_out: &[f64],
    ) {
        let p = &self.params.data;
        let ha = self.config.adaptor_hidden;
        let i = c.prefix_len;
        let mut dh = block.ln_out.backward(p, grad, &c.ln_out, d_out, 1);
        let df = apply_mask(&dh, &c.drop_f);
        let dz2 = block.ffn.backward(p, grad, &c.ffn, &df, 1);
        axpy(1.0, &block.ln2.backward(p, grad, &c.ln2, &dz2, 1), &mut dh);
        let da = apply_mask(&dh, &c.drop_a);
        let (dzq, mut dz1) = block.self_attn.backward(p, grad, &c.self_attn, &da);
        axpy(1.0, &dzq, &mut dz1[(i - 1) * ha..]);
        let mut de = block.ln1.backward(p, grad, &c.ln1, &dz1, i);
        axpy(1.0, &dh, &mut de[(i - 1) * ha..]);
        self.embed_backward(self.layout.ada_tok, self.layout.ada_pos, ha, prefix, &de, grad);
    }

    fn embed_backward(&self, tok: Slot, pos: Slot, dim: usize, prefix: &[u32], de: &[f64], grad: &mut [f64]) {
        for (j, &t) in prefix.iter().enumerate() {
            let row = &de[j * dim..(j + 1) * dim];
            axpy(1.0, row, tok.row_mut(grad, t as usize, dim));
            axpy(1.0, row, pos.row_mut(grad, j, dim));
        }
    }

    /// Logits for one step using decoder/adaptor block `block` (0-based).
    fn step(
        &self,
        enc: &Encoded,
        prefix: &[u32],
        block: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> StepOutput {
        let p = &self.params.data;
        let h = self.config.hidden;
        let vs = self.config.semid_vocab();
        let (e, dec) = self.decoder_forward(&self.layout.dec_blocks[block], enc, prefix, rng.as_deref_mut());
        let (e_ada, ada) = self.adaptor_forward(&self.layout.ada_blocks[block], prefix, rng);
        let w = self.layout.w_gen.forward(p, &e_ada, 1);
        let mut logits = vec![0.0; vs];
        for (hh, &eh) in e.iter().enumerate() {
            axpy(eh, &w[hh * vs..(hh + 1) * vs], &mut logits);
        }
        debug_assert_eq!(e.len(), h);
        StepOutput {
            logits,
            e,
            e_ada,
            w,
            dec,
            ada,
        }
    }

    fn step_backward(
        &self,
        out: &StepOutput,
        prefix: &[u32],
        block: usize,
        dlogits: &[f64],
        grad: &mut [f64],
        d_states: &mut [f64],
    ) {
        let p = &self.params.data;
        let h = self.config.hidden;
        let vs = self.config.semid_vocab();
        let mut de = vec![0.0; h];
        let mut dw = vec![0.0; h * vs];
        for hh in 0..h {
            let wrow = &out.w[hh * vs..(hh + 1) * vs];
            de[hh] = dot_f64(wrow, dlogits);
            axpy(out.e[hh], dlogits, &mut dw[hh * vs..(hh + 1) * vs]);
        }
        let de_ada = self.layout.w_gen.backward(p, grad, &out.e_ada, &dw, 1);
        self.adaptor_backward(&self.layout.ada_blocks[block], grad, &out.ada, prefix, &de_ada);
        self.decoder_backward(&self.layout.dec_blocks[block], grad, &out.dec, prefix, &de, d_states);
    }

    /// Logits over `branching + 1` output tokens for position `i` (1-based),
    /// given the prefix `l₀..l_{i-1}`.
    pub fn decoder_step(&self, enc: &Encoded, prefix: &[u32], i: usize) -> Result<Vec<f64>, ModelError> {
        if i == 0 || i > self.config.max_positions {
            return Err(ModelError::PositionOutOfRange {
                position: i,
                max: self.config.max_positions,
            });
        }
        if prefix.len() != i {
            return Err(ModelError::PrefixLengthMismatch {
                position: i,
                found: prefix.len(),
            });
        }
        if prefix[0] != 0 || prefix.iter().any(|&t| t as usize >= self.config.branching) {
            return Err(ModelError::InvalidSemId(format!("bad prefix {prefix:?}")));
        }
        Ok(self.step(enc, prefix, i - 1, None).logits)
    }

    /// Whether position `i` (1-based) is the last one. No SemId has more than
    /// `max_positions - 1` branch labels, so the last position can only emit
    /// END and its distribution is the point mass on END.
    pub fn is_final_position(&self, i: usize) -> bool {
        i == self.config.max_positions
    }

    fn final_log_probs(&self) -> Vec<f64> {
        let mut lp = vec![f64::NEG_INFINITY; self.config.semid_vocab()];
        lp[self.config.end_token() as usize] = 0.0;
        lp
    }

    /// Log-probabilities of the next token at position `i`: the log-softmax
    /// of [`decoder_step`](Self::decoder_step), except at the last position,
    /// which emits END with probability one.
    pub fn step_log_probs(&self, enc: &Encoded, prefix: &[u32], i: usize) -> Result<Vec<f64>, ModelError> {
        let logits = self.decoder_step(enc, prefix, i)?;
        if self.is_final_position(i) {
            return Ok(self.final_log_probs());
        }
        Ok(log_softmax(&logits))
    }

    fn log_probs_unchecked(&self, enc: &Encoded, prefix: &[u32]) -> Vec<f64> {
        let i = prefix.len();
        if self.is_final_position(i) {
            return self.final_log_probs();
        }
        log_softmax(&self.step(enc, prefix, i - 1, None).logits)
    }

    /// Runs the parameters of position `block + 1` on an arbitrary prefix.
    /// Only useful to probe position dependence.
    #[doc(hidden)]
    pub fn logits_with_block(&self, enc: &Encoded, prefix: &[u32], block: usize) -> Vec<f64> {
        self.step(enc, prefix, block, None).logits
    }

    /// Sum of per-step log-probabilities of `seq[1..]` given the query. The
    /// sequence need not end with END, which allows scoring prefixes.
    pub fn path_logprob(&self, query: &[u32], seq: &[u32]) -> Result<f64, ModelError> {
        self.check_query(query)?;
        self.check_target(seq, false)?;
        let enc = self.encode_inner(query, None).0;
        let mut total = 0.0;
        for i in 1..seq.len() {
            total += self.log_probs_unchecked(&enc, &seq[..i])[seq[i] as usize];
        }
        Ok(total)
    }

    /// `log p(l₁..l_L, END | query)`, the log of the product of step
    /// conditionals.
    pub fn sequence_logprob(&self, query: &[u32], seq_with_end: &[u32]) -> Result<f64, ModelError> {
        self.check_target(seq_with_end, true)?;
        self.path_logprob(query, seq_with_end)
    }

    /// Mean negative log-likelihood of the targets under teacher forcing.
    pub fn batch_loss(&self, batch: &[TrainingPair]) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        for pair in batch {
            total -= self.sequence_logprob(&pair.query_tokens, &self.target_sequence(&pair.target))?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and exact gradient of [`batch_loss`](Self::batch_loss) with
    /// dropout disabled.
    pub fn gradients(&self, batch: &[TrainingPair]) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_gradients(batch, &mut grad, |_| None)?;
        Ok((loss, grad))
    }

    /// Adds `∂ mean_loss / ∂θ` over `batch` into `grad` and returns the mean
    /// loss. `rng_for(i)` supplies the dropout stream of pair `i` (None turns
    /// dropout off).
    pub(super) fn accumulate_gradients<F>(
        &self,
        batch: &[TrainingPair],
        grad: &mut [f64],
        mut rng_for: F,
    ) -> Result<f64, ModelError>
    where
        F: FnMut(usize) -> Option<ChaCha8Rng>,
    {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (idx, pair) in batch.iter().enumerate() {
            let mut rng = rng_for(idx);
            total += self.pair_backward(pair, scale, grad, rng.as_mut())?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok(loss)
    }

    /// Forward and backward for one pair; returns its (unscaled) NLL.
    fn pair_backward(
        &self,
        pair: &TrainingPair,
        scale: f64,
        grad: &mut [f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        self.check_query(&pair.query_tokens)?;
        let seq = self.target_sequence(&pair.target);
        self.check_target(&seq, true)?;
        let (enc, cache) = self.encode_inner(&pair.query_tokens, rng.as_deref_mut());
        let mut d_states = vec![0.0; enc.states.len()];
        let mut nll = 0.0;
        for i in 1..seq.len() {
            if self.is_final_position(i) {
                // END is certain here: no loss, no gradient.
                break;
            }
            let prefix = &seq[..i];
            let out = self.step(&enc, prefix, i - 1, rng.as_deref_mut());
            let lp = log_softmax(&out.logits);
            let target = seq[i] as usize;
            nll -= lp[target];
            let mut dlogits: Vec<f64> = lp.iter().map(|&l| scale * l.exp()).collect();
            dlogits[target] -= scale;
            self.step_backward(&out, prefix, i - 1, &dlogits, grad, &mut d_states);
        }
        self.encode_backward(grad, &cache, &d_states);
        Ok(nll)
    }

    /// Unconstrained greedy decoding: the most likely token at every step
    /// until END. Returns the full sequence, root symbol and END included.
    pub fn greedy_decode(&self, query: &[u32]) -> Result<Vec<u32>, ModelError> {
        let enc = self.encode(query)?;
        let end = self.config.end_token();
        let mut seq = vec![0u32];
        for _ in 1..=self.config.max_positions {
            let lp = self.log_probs_unchecked(&enc, &seq);
            let best = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (t, &l)| if l > b.1 { (t, l) } else { b })
                .0 as u32;
            seq.push(best);
            if best == end {
                break;
            }
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            branching: 3,
            max_positions: 3,
            hidden: 8,
            encoder_layers: 2,
            heads: 2,
            ffn_hidden: 16,
            adaptor_hidden: 4,
            adaptor_heads: 2,
            adaptor_ffn_hidden: 8,
            max_query_len: 8,
            dropout: 0.0,
            init_seed: 1,
        }
    }

    fn pair(q: &[u32], t: &[u32]) -> TrainingPair {
        TrainingPair {
            query_tokens: q.to_vec(),
            target: SemId::new(t.to_vec()).unwrap(),
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_logits() {
        let model = PawaModel::new(micro_config()).unwrap();
        let enc = model.encode(&[3, 4, 5]).unwrap();
        let logits = model.decoder_step(&enc, &[0, 2], 2).unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
        // L steps at ln(V) each
        let loss = model.batch_loss(&[pair(&[3, 4], &[0, 1])]).unwrap();
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_query_is_degenerate() {
        let model = PawaModel::new(micro_config()).unwrap();
        let enc = model.encode(&[]).unwrap();
        assert!(enc.degenerate);
        assert!(enc.pooled.iter().all(|&v| v == 0.0));
        let padded = model.encode(&[PAD_ID, PAD_ID]).unwrap();
        assert!(padded.degenerate);
        let logits = model.decoder_step(&padded, &[0], 1).unwrap();
        assert!(logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn padding_tail_does_not_touch_real_positions() {
        let mut model = PawaModel::new(micro_config()).unwrap();
        model.params_mut().randomize(5, 0.3);
        let h = model.config().hidden;
        let a = model.encode(&[4, 7, 9]).unwrap();
        let b = model.encode(&[4, 7, 9, PAD_ID, PAD_ID]).unwrap();
        assert_eq!(&a.states[..3 * h], &b.states[..3 * h]);
        assert_eq!(a.pooled, b.pooled);
    }

    #[test]
    fn step_argument_errors() {
        let model = PawaModel::new(micro_config()).unwrap();
        let enc = model.encode(&[2]).unwrap();
        assert!(matches!(
            model.decoder_step(&enc, &[0, 1], 1),
            Err(ModelError::PrefixLengthMismatch { .. })
        ));
        assert!(matches!(
            model.decoder_step(&enc, &[0, 1, 1, 1], 4),
            Err(ModelError::PositionOutOfRange { .. })
        ));
        assert!(matches!(model.encode(&[25]), Err(ModelError::TokenOutOfRange { .. })));
        assert!(matches!(
            model.sequence_logprob(&[2], &[0, 1]),
            Err(ModelError::InvalidSemId(_))
        ));
        assert!(matches!(model.batch_loss(&[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn positions_use_distinct_parameters() {
        let mut model = PawaModel::new(micro_config()).unwrap();
        model.params_mut().randomize(9, 0.5);
        let enc = model.encode(&[2, 3]).unwrap();
        let l1 = model.logits_with_block(&enc, &[0], 0);
        let l2 = model.logits_with_block(&enc, &[0], 1);
        assert_ne!(l1, l2);

        // Tie position 2 to position 1 and the distributions coincide.
        let specs = model.params().specs.clone();
        for s in specs.iter().filter(|s| s.name.contains(".pos2.")) {
            let src = s.name.replace(".pos2.", ".pos1.");
            let v = model.params().tensor(&src).unwrap().to_vec();
            model.params_mut().tensor_mut(&s.name).unwrap().copy_from_slice(&v);
        }
        let l1 = model.logits_with_block(&enc, &[0], 0);
        let l2 = model.logits_with_block(&enc, &[0], 1);
        assert_eq!(l1, l2);
    }

    #[test]
    fn single_step_target_is_one_log_softmax() {
        let mut model = PawaModel::new(micro_config()).unwrap();
        model.params_mut().randomize(2, 0.4);
        let enc = model.encode(&[6, 2]).unwrap();
        let lp = log_softmax(&model.decoder_step(&enc, &[0], 1).unwrap());
        let end = model.config().end_token();
        let s = model.sequence_logprob(&[6, 2], &[0, end]).unwrap();
        assert_eq!(s, lp[end as usize]);
    }

    fn randomized() -> PawaModel {
        let mut model = PawaModel::new(micro_config()).unwrap();
        model.params_mut().randomize(17, 0.3);
        model
    }

    #[test]
    fn sequence_score_is_sum_of_step_log_softmax() {
        let model = randomized();
        let q = [5, 9, 2];
        let enc = model.encode(&q).unwrap();
        let seq = [0, 2, 1, 3];
        let mut expected = 1.0;
        for i in 1..seq.len() - 1 {
            let p: Vec<f64> = log_softmax(&model.decoder_step(&enc, &seq[..i], i).unwrap())
                .iter()
                .map(|l| l.exp())
                .collect();
            expected *= p[seq[i] as usize];
        }
        // the final position emits END with probability one
        assert_eq!(model.step_log_probs(&enc, &seq[..3], 3).unwrap()[3], 0.0);
        let got = model.sequence_logprob(&q, &seq).unwrap().exp();
        assert!((got - expected).abs() < 1e-10);
    }

    fn enumerate(model: &PawaModel, q: &[u32], seq: &mut Vec<u32>, out: &mut Vec<f64>) {
        let end = model.config().end_token();
        let d = model.config().max_positions;
        for t in 0..=end {
            seq.push(t);
            if t == end {
                out.push(model.sequence_logprob(q, seq).unwrap().exp());
            } else if seq.len() <= d {
                enumerate(model, q, seq, out);
            }
            seq.pop();
        }
    }

    #[test]
    fn full_sequence_tree_sums_to_one() {
        let model = randomized();
        for q in [&[3u32, 4][..], &[7], &[]] {
            let mut probs = Vec::new();
            enumerate(&model, q, &mut vec![0], &mut probs);
            // END after 0, 1 or 2 branch labels
            assert_eq!(probs.len(), 1 + 3 + 9);
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "{total}");
        }
    }

    fn tensor_errors(model: &PawaModel, batch: &[TrainingPair]) -> Vec<(String, f64, f64)> {
        let (_, analytic) = model.gradients(batch).unwrap();
        let h = 1e-4;
        let mut probe = model.clone();
        let mut out = Vec::new();
        for spec in model.params().specs.clone() {
            let mut diff = 0.0;
            let mut an = 0.0;
            let mut nn = 0.0;
            for i in spec.range() {
                let orig = probe.params.data[i];
                probe.params.data[i] = orig + h;
                let up = probe.batch_loss(batch).unwrap();
                probe.params.data[i] = orig - h;
                let down = probe.batch_loss(batch).unwrap();
                probe.params.data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                diff += (analytic[i] - numeric).powi(2);
                an += analytic[i].powi(2);
                nn += numeric.powi(2);
            }
            let denom = an.sqrt() + nn.sqrt();
            let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
            out.push((spec.name.clone(), rel, an.sqrt()));
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = randomized();
        let batch = [pair(&[3, 4, 5, PAD_ID], &[0, 2, 1]), pair(&[8, 1], &[0, 1])];
        for (name, rel, norm) in tensor_errors(&model, &batch) {
            if norm > 1e-9 {
                assert!(rel < 1e-5, "{name}: relative error {rel}");
            }
        }
    }

    fn position_grad(model: &PawaModel, g: &[f64], pos: usize) -> f64 {
        let tag = format!(".pos{pos}.");
        model
            .params()
            .specs
            .iter()
            .filter(|s| s.name.contains(&tag))
            .map(|s| g[s.range()].iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    #[test]
    fn unused_positions_get_zero_gradient() {
        let model = randomized();
        // END right after the root only uses position 1.
        let (_, g) = model.gradients(&[pair(&[3, 4], &[0])]).unwrap();
        assert!(position_grad(&model, &g, 1) > 0.0);
        assert_eq!(position_grad(&model, &g, 2), 0.0);
        assert_eq!(position_grad(&model, &g, 3), 0.0);
        let (_, g) = model.gradients(&[pair(&[3, 4], &[0, 1])]).unwrap();
        assert!(position_grad(&model, &g, 2) > 0.0);
        // The last position only ever emits END, with certainty.
        let (_, g) = model.gradients(&[pair(&[3, 4], &[0, 1, 2])]).unwrap();
        assert_eq!(position_grad(&model, &g, 3), 0.0);
    }

    #[test]
    fn duplicating_a_batch_changes_nothing() {
        let model = randomized();
        let a = [pair(&[3, 4], &[0, 1]), pair(&[6], &[0, 2, 2])];
        let b = [a[0].clone(), a[1].clone(), a[0].clone(), a[1].clone()];
        let (la, ga) = model.gradients(&a).unwrap();
        let (lb, gb) = model.gradients(&b).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn random_queries_give_finite_logits() {
        use rand::{Rng, SeedableRng};
        let model = randomized();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(0..=8);
            let q: Vec<u32> = (0..n).map(|_| rng.random_range(0..20)).collect();
            let enc = model.encode(&q).unwrap();
            let len = rng.random_range(1..=3);
            let mut prefix = vec![0];
            prefix.extend((1..len).map(|_| rng.random_range(0..3u32)));
            let logits = model.decoder_step(&enc, &prefix, len).unwrap();
            assert!(logits.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn greedy_stops_at_end_or_last_position() {
        let model = randomized();
        let seq = model.greedy_decode(&[2, 3]).unwrap();
        assert_eq!(seq[0], 0);
        assert!(seq.len() <= 4);
        assert!(seq.len() == 4 || *seq.last().unwrap() == 3);
    }

    #[test]
    fn two_step_hand_calculation() {
        let cfg = ModelConfig {
            vocab_size: 4,
            branching: 2,
            max_positions: 3,
            hidden: 2,
            encoder_layers: 1,
            heads: 1,
            ffn_hidden: 2,
            adaptor_hidden: 2,
            adaptor_heads: 1,
            adaptor_ffn_hidden: 2,
            max_query_len: 4,
            dropout: 0.0,
            init_seed: 0,
        };
        let mut model = PawaModel::new(cfg).unwrap();
        // With every gain at zero a layer norm outputs its bias, so E_i and
        // E'_i are set directly.
        let ps = model.params_mut();
        ps.data.fill(0.0);
        let mut set = |name: &str, v: &[f64]| ps.tensor_mut(name).unwrap().copy_from_slice(v);
        set("decoder.pos1.ln_out.bias", &[1.0, -0.5]);
        set("adaptor.pos1.ln_out.bias", &[0.2, 0.4]);
        set("decoder.pos2.ln_out.bias", &[0.3, 2.0]);
        set("adaptor.pos2.ln_out.bias", &[-1.0, 0.5]);
        set("adaptor.w_gen.weight", &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0, -1.0, 0.5, 0.5]);
        set("adaptor.w_gen.bias", &[0.1, 0.0, -0.1, 0.2, 0.0, 0.0]);

        // W_1 = [0.3, 0.4, 0.5 | 0.0, -0.4, 0.3], logits_1 = 1·W_1[0..3] - 0.5·W_1[3..6]
        // W_2 = [-0.9, 0.5, -0.6 | 1.2, -0.5, -0.25], logits_2 = 0.3·W_2[0..3] + 2·W_2[3..6]
        let enc = model.encode(&[2, 3]).unwrap();
        let l1 = model.decoder_step(&enc, &[0], 1).unwrap();
        let l2 = model.decoder_step(&enc, &[0, 1], 2).unwrap();
        for (a, b) in l1.iter().zip([0.3, 0.6, 0.35]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in l2.iter().zip([2.13, -0.85, -0.68]) {
            assert!((a - b).abs() < 1e-12);
        }
        let step1 = 0.6 - (0.3f64.exp() + 0.6f64.exp() + 0.35f64.exp()).ln();
        let step2 = -0.68 - (2.13f64.exp() + (-0.85f64).exp() + (-0.68f64).exp()).ln();
        let loss = model.batch_loss(&[pair(&[2, 3], &[0, 1])]).unwrap();
        assert!((loss + step1 + step2).abs() < 1e-8);
    }
}
