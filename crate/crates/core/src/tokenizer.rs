//! VQ-VAE motion tokenizer: strided temporal convolutional encoder, exact
//! nearest-neighbor quantizer over a learned codebook, mirrored decoder.
//! Trained standalone and then frozen; the language model never
//! backpropagates into it.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::corpus::{FeatureStats, MotionSequence};
use crate::numerics::{
    adam_step, grad_check, AdamConfig, GradCheckReport, NumericsError, OptimizerState, ParamSet,
    Real, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("sequence of {got} frames is shorter than downsample factor {r}")]
    TooShort { got: usize, r: usize },
    #[error("empty latent")]
    EmptyLatent,
    #[error("motion has {got} channels, model expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {0}; returning last good state")]
    Diverged(u64),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VQConfig {
    /// Codebook size M.
    pub codebook_size: usize,
    /// Code dimension d.
    pub code_dim: usize,
    /// Frames per token r; must be a power of two.
    pub downsample: usize,
    pub channels: usize,
    pub fps: u32,
    /// Hidden width of the conv stacks.
    pub width: usize,
    /// Residual units per stride stage.
    pub res_blocks: usize,
    /// Embedding-term weight β1.
    pub beta1: f64,
    /// Commitment weight β2.
    pub beta2: f64,
    /// Codes unselected for this many steps get re-seeded.
    pub reset_interval: u64,
}

impl Default for VQConfig {
    fn default() -> Self {
        VQConfig {
            codebook_size: 512,
            code_dim: 128,
            downsample: 4,
            channels: 16,
            fps: 20,
            width: 128,
            res_blocks: 1,
            beta1: 1.0,
            beta2: 0.02,
            reset_interval: 256,
        }
    }
}

impl VQConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.codebook_size < 2 {
            return Err(TokenizerError::InvalidConfig("codebook size must be >= 2".into()));
        }
        if self.downsample < 1 || !self.downsample.is_power_of_two() {
            return Err(TokenizerError::InvalidConfig(
                "downsample must be a power of two >= 1".into(),
            ));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(TokenizerError::InvalidConfig("beta weights must be >= 0".into()));
        }
        if self.width == 0 || self.code_dim == 0 || self.channels == 0 {
            return Err(TokenizerError::InvalidConfig("dims must be positive".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

pub struct VQVae<F: Real> {
    pub cfg: VQConfig,
    pub params: ParamSet<F>,
    index: HashMap<String, usize>,
}

impl<F: Real> VQVae<F> {
    pub fn new(cfg: VQConfig, seed: u64) -> Result<Self, TokenizerError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut index = HashMap::new();
        let add = |ps: &mut ParamSet<F>, idx: &mut HashMap<String, usize>, name: String, t: Tensor<F>, frozen: bool| {
            let id = if frozen { ps.add_frozen(&name, t) } else { ps.add(&name, t) };
            idx.insert(name, id.0);
        };
        let conv_pair = |ps: &mut ParamSet<F>, idx: &mut HashMap<String, usize>, rng: &mut ChaCha8Rng, name: &str, k: usize, cin: usize, cout: usize| {
            let std = (1.0 / (k * cin) as f64).sqrt();
            let w = Tensor::randn(&[k * cin, cout], std, rng);
            ps.add(&format!("{name}.w"), w);
            idx.insert(format!("{name}.w"), ps.len() - 1);
            ps.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
            idx.insert(format!("{name}.b"), ps.len() - 1);
        };

        let (c, w, d) = (cfg.channels, cfg.width, cfg.code_dim);
        conv_pair(&mut params, &mut index, &mut rng, "enc.in", 3, c, w);
        for s in 0..cfg.stages() {
            conv_pair(&mut params, &mut index, &mut rng, &format!("enc.down{s}"), 4, w, w);
            for r in 0..cfg.res_blocks {
                conv_pair(&mut params, &mut index, &mut rng, &format!("enc.res{s}_{r}.c1"), 3, w, w);
                conv_pair(&mut params, &mut index, &mut rng, &format!("enc.res{s}_{r}.c2"), 3, w, w);
            }
        }
        conv_pair(&mut params, &mut index, &mut rng, "enc.out", 3, w, d);

        add(
            &mut params,
            &mut index,
            "codebook".into(),
            Tensor::randn(&[cfg.codebook_size, d], 0.5, &mut rng),
            false,
        );

        conv_pair(&mut params, &mut index, &mut rng, "dec.in", 3, d, w);
        for s in 0..cfg.stages() {
            conv_pair(&mut params, &mut index, &mut rng, &format!("dec.up{s}"), 3, w, w);
            for r in 0..cfg.res_blocks {
                conv_pair(&mut params, &mut index, &mut rng, &format!("dec.res{s}_{r}.c1"), 3, w, w);
                conv_pair(&mut params, &mut index, &mut rng, &format!("dec.res{s}_{r}.c2"), 3, w, w);
            }
        }
        conv_pair(&mut params, &mut index, &mut rng, "dec.out", 3, w, c);

        // Normalization stats ride along as frozen parameters so a
        // checkpoint is self-contained.
        add(&mut params, &mut index, "stats.mean".into(), Tensor::zeros(&[c]), true);
        add(&mut params, &mut index, "stats.std".into(), Tensor::full(&[c], F::one()), true);

        Ok(VQVae { cfg, params, index })
    }

    pub fn set_stats(&mut self, stats: &FeatureStats) {
        let mean = Tensor::new(
            vec![self.cfg.channels],
            stats.mean.iter().map(|&v| F::of(v as f64)).collect(),
        );
        let std = Tensor::new(
            vec![self.cfg.channels],
            stats.std.iter().map(|&v| F::of(v as f64)).collect(),
        );
        let id = self.index["stats.mean"];
        self.params.get_mut(crate::numerics::ParamId(id)).tensor = mean;
        let id = self.index["stats.std"];
        self.params.get_mut(crate::numerics::ParamId(id)).tensor = std;
    }

    pub fn stats(&self) -> FeatureStats {
        FeatureStats {
            mean: self.param("stats.mean").data().iter().map(|&v| v.f64() as f32).collect(),
            std: self.param("stats.std").data().iter().map(|&v| v.f64() as f32).collect(),
        }
    }

    fn param(&self, name: &str) -> &Tensor<F> {
        &self.params.get(crate::numerics::ParamId(self.index[name])).tensor
    }

    pub fn codebook(&self) -> &Tensor<F> {
        self.param("codebook")
    }

    fn leaf_all(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.iter().map(|(_, p)| tape.leaf(p.tensor.clone())).collect()
    }

    fn v(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn conv(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        name: &str,
        x: Var,
        batch: usize,
        t: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> (Var, usize) {
        let w = self.v(vars, &format!("{name}.w"));
        let b = self.v(vars, &format!("{name}.b"));
        let out = tape.conv1d(x, w, b, batch, t, k, stride, pad);
        (out, (t + 2 * pad - k) / stride + 1)
    }

    fn res_unit(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        name: &str,
        x: Var,
        batch: usize,
        t: usize,
    ) -> Var {
        let (h, _) = self.conv(tape, vars, &format!("{name}.c1"), x, batch, t, 3, 1, 1);
        let h = tape.relu(h);
        let (h, _) = self.conv(tape, vars, &format!("{name}.c2"), h, batch, t, 3, 1, 1);
        tape.add(x, h)
    }

    /// Encoder graph: (batch*t, c) -> (batch*t_q, d) with t_q = floor(t/r).
    pub fn encode_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        batch: usize,
        t: usize,
    ) -> (Var, usize) {
        let (mut h, mut tc) = self.conv(tape, vars, "enc.in", x, batch, t, 3, 1, 1);
        h = tape.relu(h);
        for s in 0..self.cfg.stages() {
            let (hd, td) = self.conv(tape, vars, &format!("enc.down{s}"), h, batch, tc, 4, 2, 1);
            h = tape.relu(hd);
            tc = td;
            for r in 0..self.cfg.res_blocks {
                h = self.res_unit(tape, vars, &format!("enc.res{s}_{r}"), h, batch, tc);
            }
        }
        let (z, tz) = self.conv(tape, vars, "enc.out", h, batch, tc, 3, 1, 1);
        (z, tz)
    }

    /// Decoder graph: (batch*t_q, d) -> (batch*t_q*r, c).
    pub fn decode_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        zq: Var,
        batch: usize,
        t_q: usize,
    ) -> Var {
        let (mut h, mut tc) = self.conv(tape, vars, "dec.in", zq, batch, t_q, 3, 1, 1);
        h = tape.relu(h);
        for s in 0..self.cfg.stages() {
            h = tape.upsample2(h, batch, tc);
            tc *= 2;
            let (hc, _) = self.conv(tape, vars, &format!("dec.up{s}"), h, batch, tc, 3, 1, 1);
            h = tape.relu(hc);
            for r in 0..self.cfg.res_blocks {
                h = self.res_unit(tape, vars, &format!("dec.res{s}_{r}"), h, batch, tc);
            }
        }
        let (out, _) = self.conv(tape, vars, "dec.out", h, batch, tc, 3, 1, 1);
        out
    }

    fn check_input(&self, x: &MotionSequence) -> Result<(), TokenizerError> {
        if x.channels != self.cfg.channels {
            return Err(TokenizerError::ChannelMismatch {
                got: x.channels,
                expected: self.cfg.channels,
            });
        }
        if x.frames() < self.cfg.downsample {
            return Err(TokenizerError::TooShort { got: x.frames(), r: self.cfg.downsample });
        }
        Ok(())
    }

    fn normalized_input(&self, x: &MotionSequence) -> Tensor<F> {
        let stats = self.stats();
        let xn = stats.normalize(x);
        Tensor::new(
            vec![xn.frames(), xn.channels],
            xn.data.iter().map(|&v| F::of(v as f64)).collect(),
        )
    }

    /// Encode one sequence to its pre-quantization latent (T_q x d).
    pub fn encode(&self, x: &MotionSequence) -> Result<Tensor<F>, TokenizerError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.leaf_all(&mut tape);
        let xv = tape.leaf(self.normalized_input(x));
        let (z, _) = self.encode_graph(&mut tape, &vars, xv, 1, x.frames());
        Ok(tape.value(z).clone())
    }

    /// Nearest-neighbor quantization: per latent row, the id of the closest
    /// code (squared Euclidean, ties to the lowest index), plus the gathered
    /// code rows.
    pub fn quantize(&self, latent: &Tensor<F>) -> Result<(Vec<usize>, Tensor<F>), TokenizerError> {
        if latent.numel() == 0 {
            return Err(TokenizerError::EmptyLatent);
        }
        let cb = self.codebook();
        let ids = nearest_codes(latent, cb);
        let d = cb.cols();
        let mut zq = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            zq.extend_from_slice(&cb.data()[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        Ok((ids, Tensor::new(vec![n, d], zq)))
    }

    /// Decode quantized latents back to motion (t_q*r frames).
    pub fn decode(&self, zq: &Tensor<F>) -> MotionSequence {
        let t_q = zq.rows();
        let mut tape = Tape::new();
        let vars = self.leaf_all(&mut tape);
        let zv = tape.leaf(zq.clone());
        let out = self.decode_graph(&mut tape, &vars, zv, 1, t_q);
        let data: Vec<f32> = tape.value(out).data().iter().map(|&v| v.f64() as f32).collect();
        let m = MotionSequence {
            id: String::new(),
            fps: self.cfg.fps,
            channels: self.cfg.channels,
            data,
        };
        self.stats().denormalize(&m)
    }

    pub fn tokenize(&self, x: &MotionSequence) -> Result<Vec<usize>, TokenizerError> {
        let z = self.encode(x)?;
        Ok(self.quantize(&z)?.0)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<MotionSequence, TokenizerError> {
        if ids.is_empty() {
            return Err(TokenizerError::EmptyLatent);
        }
        let cb = self.codebook();
        let d = cb.cols();
        let mut zq = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < cb.rows(), "token id {id} outside codebook");
            zq.extend_from_slice(&cb.data()[id * d..(id + 1) * d]);
        }
        Ok(self.decode(&Tensor::new(vec![ids.len(), d], zq)))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let ckpt = Checkpoint::from_params("vqvae", &self.cfg, &self.params)?;
        checkpoint::save(path, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let ckpt = checkpoint::load(path)?;
        ckpt.expect_kind("vqvae")?;
        let cfg: VQConfig = ckpt.config_as()?;
        let mut model = VQVae::new(cfg, 0)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Argmin over codes of squared Euclidean distance, ties to the lowest
/// index. Distances via the expansion |z|^2 - 2 z.c + |c|^2 with a gemm for
/// the cross term.
pub fn nearest_codes<F: Real>(latent: &Tensor<F>, codebook: &Tensor<F>) -> Vec<usize> {
    let (n, d) = (latent.rows(), latent.cols());
    let m = codebook.rows();
    assert_eq!(codebook.cols(), d, "latent/codebook dim mismatch");
    let mut cross = vec![F::zero(); n * m];
    F::gemm_strided(
        n,
        d,
        m,
        F::one(),
        latent.data(),
        d as isize,
        1,
        codebook.data(),
        1,
        d as isize,
        F::zero(),
        &mut cross,
    );
    let code_sq: Vec<F> = codebook
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|&v| v * v).sum())
        .collect();
    let two = F::of(2.0);
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_d = F::infinity();
            for j in 0..m {
                let dist = code_sq[j] - two * cross[i * m + j];
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eq.-style three-term objective on an existing graph: reconstruction MSE
/// plus the stop-gradient embedding and commitment terms. Gradient routing:
/// the middle term reaches only the codebook, the last only the encoder, the
/// first both encoder and decoder when `x_tilde` was built through
/// `straight_through`.
pub fn vq_loss<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    x_tilde: Var,
    z: Var,
    z_q: Var,
    beta1: F,
    beta2: F,
) -> Var {
    let recon = tape.mse(x_tilde, x);
    let sg_z = tape.stop_gradient(z);
    let embed = tape.mse(sg_z, z_q);
    let sg_q = tape.stop_gradient(z_q);
    let commit = tape.mse(z, sg_q);
    let e = tape.scale(embed, beta1);
    let c = tape.scale(commit, beta2);
    let s = tape.add(recon, e);
    tape.add(s, c)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VQTrainReport {
    pub loss_curve: Vec<f64>,
    pub perplexity: f64,
    pub usage_histogram: Vec<u64>,
    pub diverged_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct VQTrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the codebook relative to `lr`.
    pub codebook_lr_mult: f64,
}

impl Default for VQTrainOptions {
    fn default() -> Self {
        VQTrainOptions { steps: 1500, batch: 16, crop: 64, lr: 3e-4, codebook_lr_mult: 25.0 }
    }
}

/// Train a tokenizer from scratch on the given motions. Deterministic in
/// (config, options, seed). On divergence, training stops and the last good
/// snapshot is returned with `diverged_at` set.
pub fn train_vqvae(
    motions: &[&MotionSequence],
    cfg: VQConfig,
    opt: &VQTrainOptions,
    seed: u64,
) -> Result<(VQVae<f32>, VQTrainReport), TokenizerError> {
    assert!(!motions.is_empty(), "empty corpus");
    let mut model = VQVae::<f32>::new(cfg.clone(), seed)?;
    model.set_stats(&FeatureStats::compute(motions));
    let stats = model.stats();
    let usable: Vec<&&MotionSequence> =
        motions.iter().filter(|m| m.frames() >= opt.crop).collect();
    assert!(!usable.is_empty(), "no motion long enough for crop {}", opt.crop);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xc0de));

    // Seed the codebook from actual encoder outputs so early assignments
    // start near the data manifold instead of churning from a random cloud.
    {
        let mut xb = Vec::new();
        let warm = opt.batch.max(8);
        for _ in 0..warm {
            let m = usable[rng.gen_range(0..usable.len())];
            let start = rng.gen_range(0..=m.frames() - opt.crop);
            for t in start..start + opt.crop {
                let frame = m.frame(t);
                for (c, &v) in frame.iter().enumerate() {
                    xb.push((v - stats.mean[c]) / stats.std[c]);
                }
            }
        }
        let mut tape = Tape::new();
        let vars = model.leaf_all(&mut tape);
        let xv = tape.leaf(Tensor::new(vec![warm * opt.crop, cfg.channels], xb));
        let (z, _) = model.encode_graph(&mut tape, &vars, xv, warm, opt.crop);
        let z_val = tape.value(z).clone();
        let rows = z_val.rows();
        let d = cfg.code_dim;
        let cb_id = crate::numerics::ParamId(model.index["codebook"]);
        let cb_data = model.params.get_mut(cb_id).tensor.data_mut();
        for code in 0..cfg.codebook_size {
            let r = rng.gen_range(0..rows);
            cb_data[code * d..(code + 1) * d]
                .copy_from_slice(&z_val.data()[r * d..(r + 1) * d]);
        }
    }

    let mut opt_state = OptimizerState::new(AdamConfig { lr: opt.lr, ..AdamConfig::default() }, &model.params);
    // Adam caps each scalar's step near lr, so the codebook gets its own
    // optimizer with a larger rate; otherwise codes cannot track encoder
    // drift and the quantization gap grows without bound.
    let mut cb_opt_state = OptimizerState::new(
        AdamConfig { lr: opt.lr * opt.codebook_lr_mult, clip_norm: None, ..AdamConfig::default() },
        &model.params,
    );
    let cb_slot = model.index["codebook"];
    let mut usage = vec![0u64; cfg.codebook_size];
    let mut curve = Vec::with_capacity(opt.steps as usize);
    let mut snapshot = Checkpoint::from_params("vqvae", &cfg, &model.params)?;
    let mut diverged_at = None;

    let t_q = opt.crop / cfg.downsample;
    for step in 0..opt.steps {
        // batch of normalized random crops
        let mut xb = Vec::with_capacity(opt.batch * opt.crop * cfg.channels);
        for _ in 0..opt.batch {
            let m = usable[rng.gen_range(0..usable.len())];
            let start = rng.gen_range(0..=m.frames() - opt.crop);
            for t in start..start + opt.crop {
                let frame = m.frame(t);
                for (c, &v) in frame.iter().enumerate() {
                    xb.push((v - stats.mean[c]) / stats.std[c]);
                }
            }
        }
        let mut tape = Tape::new();
        let vars = model.leaf_all(&mut tape);
        let xv = tape.leaf(Tensor::new(vec![opt.batch * opt.crop, cfg.channels], xb));
        let (z, _) = model.encode_graph(&mut tape, &vars, xv, opt.batch, opt.crop);
        let ids = nearest_codes(tape.value(z), model.codebook());
        let zq = tape.gather_rows(model.v(&vars, "codebook"), &ids);
        let st = tape.straight_through(z, zq);
        let xt = model.decode_graph(&mut tape, &vars, st, opt.batch, t_q);
        let loss = vq_loss(&mut tape, xv, xt, z, zq, cfg.beta1 as f32, cfg.beta2 as f32);
        let loss_val = tape.value(loss).item() as f64;
        if std::env::var("VQ_DEBUG").is_ok() && step % 25 == 0 {
            let r = tape.mse(xt, xv);
            let e = tape.mse(z, zq);
            eprintln!(
                "step {step}: total {loss_val:.4} recon {:.4} gap {:.4}",
                tape.value(r).item(),
                tape.value(e).item()
            );
        }

        if !loss_val.is_finite() {
            diverged_at = Some(step);
            let restored = snapshot.clone();
            restored.load_into(&mut model.params)?;
            break;
        }
        curve.push(loss_val);

        let mut grads = tape.backward(loss);
        let mut grad_vec: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
        let mut cb_grads: Vec<Option<Tensor<f32>>> = vec![None; grad_vec.len()];
        cb_grads[cb_slot] = grad_vec[cb_slot].take();
        adam_step(&mut opt_state, &mut model.params, &grad_vec, 1.0)?;
        adam_step(&mut cb_opt_state, &mut model.params, &cb_grads, 1.0)?;

        // dead-code bookkeeping and periodic reset
        for u in usage.iter_mut() {
            *u += 1;
        }
        for &id in &ids {
            usage[id] = 0;
        }
        if (step + 1) % cfg.reset_interval == 0 {
            let z_val = tape.value(z).clone();
            let rows = z_val.rows();
            let d = cfg.code_dim;
            let cb_id = crate::numerics::ParamId(model.index["codebook"]);
            let cb = &mut model.params.get_mut(cb_id).tensor;
            let cb_data = cb.data_mut();
            for (code, u) in usage.iter_mut().enumerate() {
                if *u >= cfg.reset_interval {
                    let r = rng.gen_range(0..rows);
                    let src = &z_val.data()[r * d..(r + 1) * d];
                    cb_data[code * d..(code + 1) * d].copy_from_slice(src);
                    *u = 0;
                }
            }
        }
        if (step + 1) % 50 == 0 {
            snapshot = Checkpoint::from_params("vqvae", &cfg, &model.params)?;
        }
    }

    // final usage histogram / perplexity over a tokenization pass
    let mut counts = vec![0u64; cfg.codebook_size];
    for m in usable.iter().take(200) {
        if let Ok(ids) = model.tokenize(m) {
            for id in ids {
                counts[id] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let perplexity = if total == 0 {
        0.0
    } else {
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        h.exp()
    };

    let report = VQTrainReport { loss_curve: curve, perplexity, usage_histogram: counts, diverged_at };
    if let Some(step) = report.diverged_at {
        // surface divergence but keep the restored model usable
        eprintln!("tokenizer training diverged at step {step}; restored last snapshot");
    }
    Ok((model, report))
}

/// Gradient check of the full training objective on a tiny f64 model.
///
/// Finite differences measure true derivatives, while stop-gradient and
/// straight-through deliberately deviate from them, so the check runs on the
/// smooth surrogate whose analytic gradient equals the training gradient at
/// the base point: token ids are frozen, each stop-gradient argument is
/// materialized as a constant from the base forward pass, and the
/// straight-through output z_q is rewritten as z + (z_q0 - z0).
pub fn vq_grad_check(
    cfg: &VQConfig,
    x: &MotionSequence,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TokenizerError> {
    let model = VQVae::<f64>::new(cfg.clone(), seed)?;
    let t = x.frames();
    let batch = 1;

    // base forward pass: fix ids and the sg'd constants
    let (ids, z0, zq0) = {
        let mut tape = Tape::new();
        let vars = model.leaf_all(&mut tape);
        let xv = tape.leaf(model.normalized_input(x));
        let (z, _) = model.encode_graph(&mut tape, &vars, xv, batch, t);
        let ids = nearest_codes(tape.value(z), model.codebook());
        let (_, zq) = model.quantize(tape.value(z))?;
        (ids, tape.value(z).clone(), zq)
    };
    let offset = {
        let mut data = zq0.data().to_vec();
        for (o, &z) in data.iter_mut().zip(z0.data()) {
            *o -= z;
        }
        Tensor::new(zq0.shape().to_vec(), data)
    };
    let t_q = z0.rows();
    let xin = model.normalized_input(x);
    let (b1, b2) = (cfg.beta1, cfg.beta2);

    let report = grad_check(&model.params, eps, tol, |tape, vars| {
        let xv = tape.leaf(xin.clone());
        let (z, _) = model.encode_graph(tape, vars, xv, batch, t);
        let zq = tape.gather_rows(model.v(vars, "codebook"), &ids);
        // straight-through surrogate: z + frozen offset
        let off = tape.leaf(offset.clone());
        let st = tape.add(z, off);
        let xt = model.decode_graph(tape, vars, st, batch, t_q);
        let recon = tape.mse(xt, xv);
        // sg[z] frozen at the base point
        let z0v = tape.leaf(z0.clone());
        let embed = tape.mse(z0v, zq);
        // sg[z_q] frozen at the base point
        let zq0v = tape.leaf(zq0.clone());
        let commit = tape.mse(z, zq0v);
        let e = tape.scale(embed, b1);
        let c = tape.scale(commit, b2);
        let s = tape.add(recon, e);
        tape.add(s, c)
    })?;
    Ok(report)
}
