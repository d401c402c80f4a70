//! Encoder-decoder language model over mixed text/motion streams: byte-level
//! text vocabulary with special tokens, a frozen motion codebook mapped into
//! the model width by an affine adapter, a full-attention encoder over the
//! condition, a causal decoder over the target, and two disjoint output
//! heads selected by each position's expected modality.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::numerics::{
    grad_check, AttnMode, GradCheckReport, NumericsError, ParamId, ParamSet, Real, Tape, Tensor,
    Var,
};

// ── text vocabulary: 256 bytes plus specials ────────────────────────

pub const BYTE_VOCAB: u32 = 256;
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const MOPEN: u32 = 259;
pub const MCLOSE: u32 = 260;
/// Sentinel for "no history yet" in contextual task prompts.
pub const EMPTY_HISTORY: u32 = 261;
pub const TAG_BASE: u32 = 262;
pub const NUM_TASK_TAGS: u32 = 11;
/// Total text vocabulary size N.
pub const TEXT_VOCAB: usize = (TAG_BASE + NUM_TASK_TAGS) as usize; // 273

pub fn text_to_ids(s: &str) -> Vec<u32> {
    s.bytes().map(|b| b as u32).collect()
}

pub fn ids_to_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < BYTE_VOCAB).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Elem {
    Text(u32),
    Motion(u32),
}

impl Elem {
    pub fn modality(&self) -> Modality {
        match self {
            Elem::Text(_) => Modality::Text,
            Elem::Motion(_) => Modality::Motion,
        }
    }
}

#[derive(Debug, Error)]
pub enum LMError {
    #[error("id {id} out of range for {modality:?} vocab {vocab}")]
    OutOfRange { id: u32, modality: Modality, vocab: usize },
    #[error("unbalanced or misplaced motion-span markers at position {0}")]
    UnbalancedMarkers(usize),
    #[error("sequence length {got} exceeds max {max}")]
    TooLong { got: usize, max: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Interleaved text/motion token stream. Motion ids appear only between a
/// motion-open and motion-close marker; markers balance and never nest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedStream {
    pub elems: Vec<Elem>,
}

impl MixedStream {
    pub fn new() -> Self {
        MixedStream { elems: Vec::new() }
    }

    pub fn push_text(&mut self, s: &str) {
        self.elems.extend(text_to_ids(s).into_iter().map(Elem::Text));
    }

    pub fn push_special(&mut self, id: u32) {
        self.elems.push(Elem::Text(id));
    }

    /// Append a delimited motion span.
    pub fn push_motion_span(&mut self, ids: &[usize]) {
        self.elems.push(Elem::Text(MOPEN));
        self.elems.extend(ids.iter().map(|&i| Elem::Motion(i as u32)));
        self.elems.push(Elem::Text(MCLOSE));
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn validate(&self, text_vocab: usize, motion_vocab: usize) -> Result<(), LMError> {
        let mut open = false;
        for (i, e) in self.elems.iter().enumerate() {
            match *e {
                Elem::Text(id) => {
                    if id as usize >= text_vocab {
                        return Err(LMError::OutOfRange {
                            id,
                            modality: Modality::Text,
                            vocab: text_vocab,
                        });
                    }
                    if id == MOPEN {
                        if open {
                            return Err(LMError::UnbalancedMarkers(i));
                        }
                        open = true;
                    } else if id == MCLOSE {
                        if !open {
                            return Err(LMError::UnbalancedMarkers(i));
                        }
                        open = false;
                    }
                }
                Elem::Motion(id) => {
                    if !open {
                        return Err(LMError::UnbalancedMarkers(i));
                    }
                    if id as usize >= motion_vocab {
                        return Err(LMError::OutOfRange {
                            id,
                            modality: Modality::Motion,
                            vocab: motion_vocab,
                        });
                    }
                }
            }
        }
        if open {
            return Err(LMError::UnbalancedMarkers(self.elems.len()));
        }
        Ok(())
    }

    /// Motion ids of every span, concatenated.
    pub fn motion_ids(&self) -> Vec<usize> {
        self.elems
            .iter()
            .filter_map(|e| match e {
                Elem::Motion(id) => Some(*id as usize),
                _ => None,
            })
            .collect()
    }

    /// Text content with specials stripped.
    pub fn text(&self) -> String {
        let ids: Vec<u32> = self
            .elems
            .iter()
            .filter_map(|e| match e {
                Elem::Text(id) => Some(*id),
                _ => None,
            })
            .collect();
        ids_to_text(&ids)
    }
}

// ── model ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMConfig {
    /// Hidden width D.
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Text vocab size N.
    pub text_vocab: usize,
    /// Motion vocab size M; must equal the tokenizer codebook size.
    pub motion_vocab: usize,
    /// Codebook row width d (adapter input).
    pub code_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn: 256,
            text_vocab: TEXT_VOCAB,
            motion_vocab: 512,
            code_dim: 128,
            max_len: 768,
            dropout: 0.0,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), LMError> {
        if self.dim % self.heads != 0 {
            return Err(LMError::InvalidConfig("dim not divisible by heads".into()));
        }
        if self.text_vocab < 2 || self.motion_vocab < 2 {
            return Err(LMError::InvalidConfig("vocab sizes must be >= 2".into()));
        }
        Ok(())
    }
}

pub struct LM<F: Real> {
    pub cfg: LMConfig,
    pub params: ParamSet<F>,
    index: HashMap<String, usize>,
}

impl<F: Real> LM<F> {
    pub fn new(cfg: LMConfig, seed: u64) -> Result<Self, LMError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut index = HashMap::new();
        let (dd, nv, mv, cd) = (cfg.dim, cfg.text_vocab, cfg.motion_vocab, cfg.code_dim);
        let std = 0.02;

        let add = |ps: &mut ParamSet<F>, idx: &mut HashMap<String, usize>, name: String, t: Tensor<F>, frozen: bool| {
            if frozen {
                ps.add_frozen(&name, t);
            } else {
                ps.add(&name, t);
            }
            idx.insert(name, ps.len() - 1);
        };
        macro_rules! p {
            ($name:expr, $t:expr) => {
                add(&mut params, &mut index, $name.to_string(), $t, false)
            };
        }

        p!("text_table", Tensor::randn(&[nv, dd], std, &mut rng));
        p!("adapter.w", Tensor::randn(&[cd, dd], std, &mut rng));
        p!("adapter.b", Tensor::zeros(&[dd]));
        p!("pos.enc", Tensor::randn(&[cfg.max_len, dd], std, &mut rng));
        p!("pos.dec", Tensor::randn(&[cfg.max_len, dd], std, &mut rng));

        let linear = |ps: &mut ParamSet<F>, idx: &mut HashMap<String, usize>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            add(ps, idx, format!("{name}.w"), Tensor::randn(&[i, o], std, rng), false);
            add(ps, idx, format!("{name}.b"), Tensor::zeros(&[o]), false);
        };
        let ln = |ps: &mut ParamSet<F>, idx: &mut HashMap<String, usize>, name: &str, d: usize| {
            add(ps, idx, format!("{name}.g"), Tensor::full(&[d], F::one()), false);
            add(ps, idx, format!("{name}.b"), Tensor::zeros(&[d]), false);
        };

        for l in 0..cfg.enc_layers {
            ln(&mut params, &mut index, &format!("enc{l}.ln1"), dd);
            for part in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut index, &mut rng, &format!("enc{l}.attn.{part}"), dd, dd);
            }
            ln(&mut params, &mut index, &format!("enc{l}.ln2"), dd);
            linear(&mut params, &mut index, &mut rng, &format!("enc{l}.ffn.l1"), dd, cfg.ffn);
            linear(&mut params, &mut index, &mut rng, &format!("enc{l}.ffn.l2"), cfg.ffn, dd);
        }
        ln(&mut params, &mut index, "enc.lnf", dd);
        for l in 0..cfg.dec_layers {
            ln(&mut params, &mut index, &format!("dec{l}.ln1"), dd);
            for part in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut index, &mut rng, &format!("dec{l}.attn.{part}"), dd, dd);
            }
            ln(&mut params, &mut index, &format!("dec{l}.ln2"), dd);
            for part in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut index, &mut rng, &format!("dec{l}.cross.{part}"), dd, dd);
            }
            ln(&mut params, &mut index, &format!("dec{l}.ln3"), dd);
            linear(&mut params, &mut index, &mut rng, &format!("dec{l}.ffn.l1"), dd, cfg.ffn);
            linear(&mut params, &mut index, &mut rng, &format!("dec{l}.ffn.l2"), cfg.ffn, dd);
        }
        ln(&mut params, &mut index, "dec.lnf", dd);
        linear(&mut params, &mut index, &mut rng, "head.text", dd, nv);
        linear(&mut params, &mut index, &mut rng, "head.motion", dd, mv);

        // frozen tokenizer codebook rides along so a checkpoint is
        // self-contained; set via set_codebook after tokenizer training
        add(&mut params, &mut index, "codebook.frozen".into(), Tensor::randn(&[mv, cd], std, &mut rng), true);

        Ok(LM { cfg, params, index })
    }

    pub fn set_codebook(&mut self, codebook: &Tensor<F>) {
        assert_eq!(codebook.rows(), self.cfg.motion_vocab, "codebook size != motion vocab");
        assert_eq!(codebook.cols(), self.cfg.code_dim, "codebook dim != adapter input");
        let id = ParamId(self.index["codebook.frozen"]);
        self.params.get_mut(id).tensor = codebook.clone();
    }

    fn leaf_all(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| tape.leaf(p.tensor.clone())).collect()
    }

    pub fn v(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn lin(&self, tape: &mut Tape<F>, vars: &[Var], name: &str, x: Var) -> Var {
        let w = self.v(vars, &format!("{name}.w"));
        let b = self.v(vars, &format!("{name}.b"));
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<F>, vars: &[Var], name: &str, x: Var) -> Var {
        let g = self.v(vars, &format!("{name}.g"));
        let b = self.v(vars, &format!("{name}.b"));
        tape.layer_norm(x, g, b, 1e-5)
    }

    /// Embed a mixed stream: text ids through the N x D table, motion ids as
    /// adapter(codebook row). No positional term here.
    pub fn embed_stream_graph(&self, tape: &mut Tape<F>, vars: &[Var], s: &MixedStream) -> Var {
        let len = s.len();
        assert!(len > 0, "empty stream");
        let mut text_ids = vec![0usize; len];
        let mut motion_ids = vec![0usize; len];
        let mut tmask = vec![F::zero(); len * self.cfg.dim];
        let mut mmask = vec![F::zero(); len * self.cfg.dim];
        for (i, e) in s.elems.iter().enumerate() {
            match *e {
                Elem::Text(id) => {
                    text_ids[i] = id as usize;
                    tmask[i * self.cfg.dim..(i + 1) * self.cfg.dim].fill(F::one());
                }
                Elem::Motion(id) => {
                    motion_ids[i] = id as usize;
                    mmask[i * self.cfg.dim..(i + 1) * self.cfg.dim].fill(F::one());
                }
            }
        }
        let et = tape.gather_rows(self.v(vars, "text_table"), &text_ids);
        let raw = tape.gather_rows(self.v(vars, "codebook.frozen"), &motion_ids);
        let w = self.v(vars, "adapter.w");
        let b = self.v(vars, "adapter.b");
        let em = tape.linear(raw, w, b);
        let shape = vec![len, self.cfg.dim];
        let et = tape.mul_const(et, &Tensor::new(shape.clone(), tmask));
        let em = tape.mul_const(em, &Tensor::new(shape, mmask));
        tape.add(et, em)
    }

    fn add_pos(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, table: &str, len: usize) -> Var {
        let idx: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(self.v(vars, table), &idx);
        tape.add(x, pos)
    }

    fn attn(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        prefix: &str,
        x: Var,
        kv: Var,
        sq: usize,
        skv: usize,
        mode: AttnMode,
    ) -> Var {
        let q = self.lin(tape, vars, &format!("{prefix}.wq"), x);
        let k = self.lin(tape, vars, &format!("{prefix}.wk"), kv);
        let v = self.lin(tape, vars, &format!("{prefix}.wv"), kv);
        let a = tape.attention(q, k, v, 1, sq, skv, self.cfg.heads, mode);
        self.lin(tape, vars, &format!("{prefix}.wo"), a)
    }

    fn ffn(&self, tape: &mut Tape<F>, vars: &[Var], prefix: &str, x: Var) -> Var {
        let h = self.lin(tape, vars, &format!("{prefix}.l1"), x);
        let h = tape.relu(h);
        self.lin(tape, vars, &format!("{prefix}.l2"), h)
    }

    /// Bidirectional encoder over the condition stream.
    pub fn encoder_graph(&self, tape: &mut Tape<F>, vars: &[Var], cond: &MixedStream) -> Var {
        let len = cond.len();
        let mut h = self.embed_stream_graph(tape, vars, cond);
        h = self.add_pos(tape, vars, h, "pos.enc", len);
        for l in 0..self.cfg.enc_layers {
            let n = self.norm(tape, vars, &format!("enc{l}.ln1"), h);
            let a = self.attn(
                tape,
                vars,
                &format!("enc{l}.attn"),
                n,
                n,
                len,
                len,
                AttnMode::Full { kv_valid: vec![len] },
            );
            h = tape.add(h, a);
            let n = self.norm(tape, vars, &format!("enc{l}.ln2"), h);
            let f = self.ffn(tape, vars, &format!("enc{l}.ffn"), n);
            h = tape.add(h, f);
        }
        self.norm(tape, vars, "enc.lnf", h)
    }

    /// Causal decoder over `input` (already BOS-shifted) with cross-attention
    /// to the encoder output. Returns final hidden states (len x D).
    pub fn decoder_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        enc: Var,
        enc_len: usize,
        input: &MixedStream,
    ) -> Var {
        let len = input.len();
        let mut h = self.embed_stream_graph(tape, vars, input);
        h = self.add_pos(tape, vars, h, "pos.dec", len);
        for l in 0..self.cfg.dec_layers {
            let n = self.norm(tape, vars, &format!("dec{l}.ln1"), h);
            let a = self.attn(tape, vars, &format!("dec{l}.attn"), n, n, len, len, AttnMode::Causal);
            h = tape.add(h, a);
            let n = self.norm(tape, vars, &format!("dec{l}.ln2"), h);
            let a = self.attn(
                tape,
                vars,
                &format!("dec{l}.cross"),
                n,
                enc,
                len,
                enc_len,
                AttnMode::Full { kv_valid: vec![enc_len] },
            );
            h = tape.add(h, a);
            let n = self.norm(tape, vars, &format!("dec{l}.ln3"), h);
            let f = self.ffn(tape, vars, &format!("dec{l}.ffn"), n);
            h = tape.add(h, f);
        }
        self.norm(tape, vars, "dec.lnf", h)
    }

    fn check_lengths(&self, cond: &MixedStream, target: &MixedStream) -> Result<(), LMError> {
        for s in [cond.len(), target.len() + 1] {
            if s > self.cfg.max_len {
                return Err(LMError::TooLong { got: s, max: self.cfg.max_len });
            }
        }
        Ok(())
    }

    /// Per-position logits for scoring `target` given `cond`. Position i's
    /// logits predict target[i] from targets < i; its head is chosen by
    /// target[i]'s modality.
    pub fn forward(
        &self,
        cond: &MixedStream,
        target: &MixedStream,
    ) -> Result<ForwardOut<F>, LMError> {
        self.check_lengths(cond, target)?;
        cond.validate(self.cfg.text_vocab, self.cfg.motion_vocab)?;
        let mut tape = Tape::new();
        let vars = self.leaf_all(&mut tape);
        let enc = self.encoder_graph(&mut tape, &vars, cond);
        let input = shift_right(target);
        let h = self.decoder_graph(&mut tape, &vars, enc, cond.len(), &input);
        let tl = self.lin(&mut tape, &vars, "head.text", h);
        let ml = self.lin(&mut tape, &vars, "head.motion", h);
        Ok(ForwardOut {
            text_logits: tape.value(tl).clone(),
            motion_logits: tape.value(ml).clone(),
            modalities: target.elems.iter().map(Elem::modality).collect(),
        })
    }

    /// Graph-level losses for one example: (text loss, text count, motion
    /// loss, motion count). PAD targets are masked to zero contribution.
    pub fn example_loss_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        cond: &MixedStream,
        target: &MixedStream,
    ) -> (Option<Var>, usize, Option<Var>, usize) {
        let enc = self.encoder_graph(tape, vars, cond);
        let input = shift_right(target);
        let h = self.decoder_graph(tape, vars, enc, cond.len(), &input);
        let len = target.len();
        let mut t_targets = vec![0usize; len];
        let mut t_mask = vec![false; len];
        let mut m_targets = vec![0usize; len];
        let mut m_mask = vec![false; len];
        for (i, e) in target.elems.iter().enumerate() {
            match *e {
                Elem::Text(id) => {
                    if id != PAD {
                        t_targets[i] = id as usize;
                        t_mask[i] = true;
                    }
                }
                Elem::Motion(id) => {
                    m_targets[i] = id as usize;
                    m_mask[i] = true;
                }
            }
        }
        let n_t = t_mask.iter().filter(|&&m| m).count();
        let n_m = m_mask.iter().filter(|&&m| m).count();
        let lt = (n_t > 0).then(|| {
            let logits = self.lin(tape, vars, "head.text", h);
            tape.softmax_xent(logits, &t_targets, &t_mask)
        });
        let lm = (n_m > 0).then(|| {
            let logits = self.lin(tape, vars, "head.motion", h);
            tape.softmax_xent(logits, &m_targets, &m_mask)
        });
        (lt, n_t, lm, n_m)
    }

    /// Batch loss: per-modality token-weighted means over the batch, plus
    /// the combined total L_t + L_m (unweighted sum). Returns the loss Var
    /// and the scalar (L_t, L_m) values.
    pub fn batch_loss_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        batch: &[(&MixedStream, &MixedStream)],
    ) -> (Var, f64, f64) {
        let mut t_parts: Vec<(Var, usize)> = Vec::new();
        let mut m_parts: Vec<(Var, usize)> = Vec::new();
        for (cond, target) in batch {
            let (lt, nt, lm, nm) = self.example_loss_graph(tape, vars, cond, target);
            if let Some(v) = lt {
                t_parts.push((v, nt));
            }
            if let Some(v) = lm {
                m_parts.push((v, nm));
            }
        }
        let combine = |tape: &mut Tape<F>, parts: &[(Var, usize)]| -> Option<Var> {
            if parts.is_empty() {
                return None;
            }
            let total: usize = parts.iter().map(|&(_, n)| n).sum();
            let mut acc: Option<Var> = None;
            for &(v, n) in parts {
                let w = tape.scale(v, F::of(n as f64 / total as f64));
                acc = Some(match acc {
                    None => w,
                    Some(a) => tape.add(a, w),
                });
            }
            acc
        };
        let lt = combine(tape, &t_parts);
        let lm = combine(tape, &m_parts);
        let lt_val = lt.map(|v| tape.value(v).item().f64()).unwrap_or(0.0);
        let lm_val = lm.map(|v| tape.value(v).item().f64()).unwrap_or(0.0);
        let total = match (lt, lm) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => panic!("batch with zero unmasked positions"),
        };
        (total, lt_val, lm_val)
    }

    /// Run the encoder once, value-level (for incremental decoding).
    pub fn encode_condition(&self, cond: &MixedStream) -> Result<Tensor<F>, LMError> {
        cond.validate(self.cfg.text_vocab, self.cfg.motion_vocab)?;
        if cond.len() > self.cfg.max_len {
            return Err(LMError::TooLong { got: cond.len(), max: self.cfg.max_len });
        }
        let mut tape = Tape::new();
        let vars = self.leaf_all(&mut tape);
        let enc = self.encoder_graph(&mut tape, &vars, cond);
        Ok(tape.value(enc).clone())
    }

    /// Next-token logits for both heads given the emitted prefix.
    fn next_logits(&self, enc: &Tensor<F>, emitted: &MixedStream) -> (Vec<F>, Vec<F>) {
        let mut tape = Tape::new();
        let vars = self.leaf_all(&mut tape);
        let enc_len = enc.rows();
        let encv = tape.leaf(enc.clone());
        let mut input = MixedStream::new();
        input.push_special(BOS);
        input.elems.extend_from_slice(&emitted.elems);
        let h = self.decoder_graph(&mut tape, &vars, encv, enc_len, &input);
        let tl = self.lin(&mut tape, &vars, "head.text", h);
        let ml = self.lin(&mut tape, &vars, "head.motion", h);
        let last = input.len() - 1;
        let tlv = tape.value(tl);
        let mlv = tape.value(ml);
        let n = tlv.cols();
        let m = mlv.cols();
        (
            tlv.data()[last * n..(last + 1) * n].to_vec(),
            mlv.data()[last * m..(last + 1) * m].to_vec(),
        )
    }

    /// Autoregressive generation following a modality plan. Motion spans are
    /// wrapped in forced open/close markers; every sampled id is drawn from
    /// the head matching the plan step's modality, so range membership holds
    /// by construction.
    pub fn generate(
        &self,
        cond: &MixedStream,
        plan: &[PlanStep],
        sampler: &mut Sampler,
    ) -> Result<GenOutput, LMError> {
        let enc = self.encode_condition(cond)?;
        let mut out = MixedStream::new();
        let mut truncated = false;
        for step in plan {
            match step.modality {
                Modality::Motion => {
                    out.push_special(MOPEN);
                    for _ in 0..step.max_tokens {
                        if out.len() + 2 > self.cfg.max_len {
                            truncated = true;
                            break;
                        }
                        let (_, ml) = self.next_logits(&enc, &out);
                        let id = sampler.sample(&ml);
                        out.elems.push(Elem::Motion(id as u32));
                    }
                    out.push_special(MCLOSE);
                }
                Modality::Text => {
                    let stop = step.stop_token.unwrap_or(EOS);
                    let mut stopped = false;
                    for _ in 0..step.max_tokens {
                        if out.len() + 1 > self.cfg.max_len {
                            break;
                        }
                        let (tl, _) = self.next_logits(&enc, &out);
                        let id = sampler.sample(&tl) as u32;
                        out.elems.push(Elem::Text(id));
                        if id == stop {
                            stopped = true;
                            break;
                        }
                    }
                    if !stopped {
                        truncated = true;
                    }
                }
            }
        }
        Ok(GenOutput { stream: out, truncated })
    }

    pub fn save(&self, path: &Path) -> Result<(), LMError> {
        let ckpt = Checkpoint::from_params("lm", &self.cfg, &self.params)?;
        checkpoint::save(path, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LMError> {
        let ckpt = checkpoint::load(path)?;
        ckpt.expect_kind("lm")?;
        let cfg: LMConfig = ckpt.config_as()?;
        let mut model = LM::new(cfg, 0)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Decoder input: BOS followed by all but the last target element.
fn shift_right(target: &MixedStream) -> MixedStream {
    let mut input = MixedStream::new();
    input.push_special(BOS);
    if target.len() > 1 {
        input.elems.extend_from_slice(&target.elems[..target.len() - 1]);
    }
    input
}

pub struct ForwardOut<F> {
    /// len x N; meaningful at text positions.
    pub text_logits: Tensor<F>,
    /// len x M; meaningful at motion positions.
    pub motion_logits: Tensor<F>,
    pub modalities: Vec<Modality>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlanStep {
    pub modality: Modality,
    pub max_tokens: usize,
    /// Text steps stop on this token (EOS by default); motion steps stop
    /// only on budget.
    pub stop_token: Option<u32>,
}

impl PlanStep {
    pub fn text(max_tokens: usize, stop_token: u32) -> Self {
        PlanStep { modality: Modality::Text, max_tokens, stop_token: Some(stop_token) }
    }

    pub fn motion(max_tokens: usize) -> Self {
        PlanStep { modality: Modality::Motion, max_tokens, stop_token: None }
    }
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub stream: MixedStream,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f64, rng: ChaCha8Rng },
}

impl Sampler {
    pub fn top_k(k: usize, temperature: f64, seed: u64) -> Self {
        Sampler::TopK { k, temperature, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample<F: Real>(&mut self, logits: &[F]) -> usize {
        match self {
            Sampler::Greedy => {
                let mut best = 0;
                let mut best_v = F::neg_infinity();
                for (i, &v) in logits.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best
            }
            Sampler::TopK { k, temperature, rng } => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
                idx.truncate((*k).max(1));
                let vals: Vec<f64> = idx.iter().map(|&i| logits[i].f64() / *temperature).collect();
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut u: f64 = rng.gen_range(0.0..1.0) * z;
                for (j, &e) in exps.iter().enumerate() {
                    if u < e || j == exps.len() - 1 {
                        return idx[j];
                    }
                    u -= e;
                }
                unreachable!()
            }
        }
    }
}

/// Gradient check of the LM loss on a tiny f64 model (token ids and masks
/// are discrete and fixed, so the training loss itself is smooth in the
/// parameters; no surrogate is needed here).
pub fn lm_grad_check(
    cfg: &LMConfig,
    cond: &MixedStream,
    target: &MixedStream,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, LMError> {
    let model = LM::<f64>::new(cfg.clone(), seed)?;
    let report = grad_check(&model.params, eps, tol, |tape, vars| {
        let (total, _, _) = model.batch_loss_graph(tape, vars, &[(cond, target)]);
        total
    })?;
    Ok(report)
}
