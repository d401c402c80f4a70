//! Joint multitask instruction-tuning: batching, masked losses, Adam with
//! linear warmup, per-task loss logging, validation-driven checkpointing,
//! and the overfit capacity probe.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::lm::{Elem, LMError, Modality, PlanStep, Sampler, LM, PAD};
use crate::numerics::{adam_step, AdamConfig, NumericsError, OptimizerState, Tape, Var};
use crate::par;
use crate::tasks::{self, make_training_set, MixWeights, PromptInstance, TaskError};
use crate::tokenizer::{TokenizerError, VQVae};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Linear warmup over this many steps, then constant.
    pub warmup_steps: usize,
    pub seed: u64,
    pub mix: MixWeights,
    /// Validate (and checkpoint) every this many steps.
    pub eval_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            steps: 5000,
            lr: 3e-4,
            warmup_steps: 200,
            seed: 0,
            mix: MixWeights::default(),
            eval_interval: 250,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch < 1 {
            return Err(TrainError::InvalidConfig("batch must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(TrainError::InvalidConfig("eval interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(
        "non-finite loss at step {step} (L_t {lt}, L_m {lm}; batch tasks {tasks:?}); \
         aborting"
    )]
    NaNLoss { step: usize, lt: f64, lm: f64, tasks: Vec<String> },
    #[error("empty instance set")]
    EmptySet,
    #[error(transparent)]
    LM(#[from] LMError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-step text loss (token-weighted mean over the batch).
    pub lt_curve: Vec<f64>,
    /// Per-step motion loss.
    pub lm_curve: Vec<f64>,
    /// Per-step total (L_t + L_m).
    pub total_curve: Vec<f64>,
    /// Per-task running mean loss, one series per task, aligned with steps.
    /// A task's value carries forward between batches that contain it.
    pub per_task_curves: BTreeMap<String, Vec<f64>>,
    /// (step, validation total loss) at each eval interval.
    pub val_curve: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    /// Loss curves as CSV: step, L_t, L_m, total, then one column per task.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step,lt,lm,total");
        for name in self.per_task_curves.keys() {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for i in 0..self.total_curve.len() {
            s.push_str(&format!(
                "{},{},{},{}",
                i, self.lt_curve[i], self.lm_curve[i], self.total_curve[i]
            ));
            for series in self.per_task_curves.values() {
                s.push_str(&format!(",{}", series[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// Tokenize every corpus motion with a frozen tokenizer.
pub fn tokenize_corpus(
    vq: &VQVae<f32>,
    corpus: &Corpus,
) -> Result<HashMap<String, Vec<usize>>, TokenizerError> {
    let results = par::map_collect(&corpus.motions, |m| (m.id.clone(), vq.tokenize(m)));
    let mut map = HashMap::new();
    for (id, r) in results {
        map.insert(id, r?);
    }
    Ok(map)
}

/// Draw a deterministic instance set from the corpus through a frozen
/// tokenizer.
pub fn prepare_instances(
    corpus: &Corpus,
    vq: &VQVae<f32>,
    mix: &MixWeights,
    count: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>, TrainError> {
    let tokens = tokenize_corpus(vq, corpus)?;
    Ok(make_training_set(corpus, &tokens, mix, count, seed)?)
}

fn leaf_all(lm: &LM<f32>, tape: &mut Tape<f32>) -> Vec<Var> {
    lm.params.iter().map(|(_, p)| tape.leaf(p.tensor.clone())).collect()
}

/// One training batch's loss graph with per-example bookkeeping. Mirrors
/// `LM::batch_loss_graph` (token-weighted per-modality means, total =
/// L_t + L_m) while exposing each example's loss value for per-task logging.
fn batch_graph(
    lm: &LM<f32>,
    tape: &mut Tape<f32>,
    vars: &[Var],
    batch: &[&PromptInstance],
) -> (Var, f64, f64, Vec<f64>) {
    let mut t_parts: Vec<(Var, usize)> = Vec::new();
    let mut m_parts: Vec<(Var, usize)> = Vec::new();
    let mut per_example = Vec::with_capacity(batch.len());
    for inst in batch {
        let (lt, nt, lm_v, nm) =
            lm.example_loss_graph(tape, vars, &inst.condition, &inst.target);
        let mut ex = 0.0;
        if let Some(v) = lt {
            ex += tape.value(v).item() as f64;
            t_parts.push((v, nt));
        }
        if let Some(v) = lm_v {
            ex += tape.value(v).item() as f64;
            m_parts.push((v, nm));
        }
        per_example.push(ex);
    }
    let combine = |tape: &mut Tape<f32>, parts: &[(Var, usize)]| -> Option<Var> {
        if parts.is_empty() {
            return None;
        }
        let total: usize = parts.iter().map(|&(_, n)| n).sum();
        let mut acc: Option<Var> = None;
        for &(v, n) in parts {
            let w = tape.scale(v, (n as f64 / total as f64) as f32);
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w),
            });
        }
        acc
    };
    let lt = combine(tape, &t_parts);
    let lmv = combine(tape, &m_parts);
    let lt_val = lt.map(|v| tape.value(v).item() as f64).unwrap_or(0.0);
    let lm_val = lmv.map(|v| tape.value(v).item() as f64).unwrap_or(0.0);
    let total = match (lt, lmv) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => panic!("batch with zero unmasked positions"),
    };
    (total, lt_val, lm_val, per_example)
}

/// Mean total loss over an instance set, value-only (no optimizer step).
pub fn eval_loss(lm: &LM<f32>, instances: &[PromptInstance], batch: usize) -> f64 {
    assert!(!instances.is_empty(), "eval over empty set");
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in instances.chunks(batch) {
        let mut tape = Tape::new();
        let vars = leaf_all(lm, &mut tape);
        let pairs: Vec<(&crate::lm::MixedStream, &crate::lm::MixedStream)> =
            chunk.iter().map(|i| (&i.condition, &i.target)).collect();
        let (total, _, _) = lm.batch_loss_graph(&mut tape, &vars, &pairs);
        sum += tape.value(total).item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    sum / n as f64
}

fn warmup_scale(step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        1.0
    } else {
        (step + 1) as f64 / warmup as f64
    }
}

/// Joint multitask training over prepared instances. The tokenizer is
/// already frozen upstream: motions enter only as precomputed token ids and
/// the LM's codebook parameter is non-trainable. Deterministic in
/// `cfg.seed`. Non-finite losses abort with diagnostics.
/// Reject instances whose condition or shifted target exceed the model's
/// positional table; without this the tape would panic mid-training.
fn check_fits(lm: &LM<f32>, instances: &[PromptInstance]) -> Result<(), TrainError> {
    for inst in instances {
        for s in [inst.condition.len(), inst.target.len() + 1] {
            if s > lm.cfg.max_len {
                return Err(TrainError::LM(LMError::TooLong { got: s, max: lm.cfg.max_len }));
            }
        }
    }
    Ok(())
}

pub fn train(
    lm: &mut LM<f32>,
    train_set: &[PromptInstance],
    val_set: &[PromptInstance],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    check_fits(lm, train_set)?;
    check_fits(lm, val_set)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &lm.params,
    );

    let mut order: Vec<usize> = Vec::new();
    let mut next_batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(rng);
            }
            picked.push(order.pop().unwrap());
        }
        picked
    };

    let task_names: Vec<String> =
        tasks::ALL_TASKS.iter().map(|k| k.name().to_string()).collect();
    let mut run_mean: BTreeMap<String, (f64, usize)> =
        task_names.iter().map(|n| (n.clone(), (0.0, 0))).collect();
    let mut per_task_curves: BTreeMap<String, Vec<f64>> =
        task_names.iter().map(|n| (n.clone(), Vec::new())).collect();

    let mut lt_curve = Vec::with_capacity(cfg.steps);
    let mut lm_curve = Vec::with_capacity(cfg.steps);
    let mut total_curve = Vec::with_capacity(cfg.steps);
    let mut val_curve = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_path = None;

    for step in 0..cfg.steps {
        let idxs = next_batch(&mut rng);
        let batch: Vec<&PromptInstance> = idxs.iter().map(|&i| &train_set[i]).collect();
        let mut tape = Tape::new();
        let vars = leaf_all(lm, &mut tape);
        let (total, lt, lmv, per_example) = batch_graph(lm, &mut tape, &vars, &batch);
        let total_val = tape.value(total).item() as f64;
        if !total_val.is_finite() {
            return Err(TrainError::NaNLoss {
                step,
                lt,
                lm: lmv,
                tasks: batch.iter().map(|i| i.kind.name().to_string()).collect(),
            });
        }
        lt_curve.push(lt);
        lm_curve.push(lmv);
        total_curve.push(total_val);

        for (inst, &loss) in batch.iter().zip(&per_example) {
            let e = run_mean.get_mut(inst.kind.name()).unwrap();
            e.1 += 1;
            e.0 += (loss - e.0) / e.1 as f64;
        }
        for (name, series) in per_task_curves.iter_mut() {
            series.push(run_mean[name].0);
        }

        let mut grads = tape.backward(total);
        let grad_vec: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(&mut opt, &mut lm.params, &grad_vec, warmup_scale(step, cfg.warmup_steps))?;

        let at_eval = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps;
        if at_eval && !val_set.is_empty() {
            let vl = eval_loss(lm, val_set, cfg.batch);
            val_curve.push((step + 1, vl));
            let improved = best.map_or(true, |(_, b)| vl < b);
            if improved {
                best = Some((step + 1, vl));
                if let Some(dir) = &cfg.checkpoint_dir {
                    let path = dir.join(format!("lm_step{:06}.mlck", step + 1));
                    lm.save(&path)?;
                    best_path = Some(path);
                }
            }
        }
    }

    Ok(TrainReport {
        lt_curve,
        lm_curve,
        total_curve,
        per_task_curves,
        val_curve,
        best_step: best.map(|(s, _)| s),
        best_val_loss: best.map(|(_, l)| l),
        final_checkpoint: best_path,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-task mean validation loss (teacher-forced), one entry per task kind
/// present in the set.
pub fn per_task_eval(lm: &LM<f32>, instances: &[PromptInstance]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for inst in instances {
        let mut tape = Tape::new();
        let vars = leaf_all(lm, &mut tape);
        let (total, _, _, _) = batch_graph(lm, &mut tape, &vars, &[inst]);
        let v = tape.value(total).item() as f64;
        let e = sums.entry(inst.kind.name().to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub token_accuracy: f64,
    pub exact_matches: usize,
    pub instances: usize,
}

/// Teacher-forced per-token accuracy over an instance set.
pub fn token_accuracy(lm: &LM<f32>, instances: &[PromptInstance]) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in instances {
        let out = lm.forward(&inst.condition, &inst.target)?;
        let n = out.text_logits.cols();
        let m = out.motion_logits.cols();
        for (i, e) in inst.target.elems.iter().enumerate() {
            let (logits, width, want) = match *e {
                Elem::Text(id) => {
                    if id == PAD {
                        continue;
                    }
                    (out.text_logits.data(), n, id as usize)
                }
                Elem::Motion(id) => (out.motion_logits.data(), m, id as usize),
            };
            let row = &logits[i * width..(i + 1) * width];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            total += 1;
            if argmax == want {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Greedy-decode an instance's target shape and compare the parsed result
/// against the ground-truth target slot.
fn greedy_exact_match(lm: &LM<f32>, inst: &PromptInstance) -> Result<bool, TrainError> {
    let plan = match inst.kind.target_modality() {
        Modality::Motion => {
            let n = inst.target.motion_ids().len();
            vec![PlanStep::motion(n)]
        }
        Modality::Text => vec![PlanStep::text(inst.target.len() + 4, crate::lm::EOS)],
    };
    let gen = lm.generate(&inst.condition, &plan, &mut Sampler::Greedy)?;
    let got = tasks::parse_target(inst.kind, &gen.stream);
    let want = tasks::parse_target(inst.kind, &inst.target);
    Ok(matches!((got, want), (Ok(a), Ok(b)) if a == b))
}

/// Capacity sanity oracle: memorize a small fixed instance set, then report
/// teacher-forced token accuracy and greedy exact-match count.
pub fn overfit_probe(
    lm: &mut LM<f32>,
    instances: &[PromptInstance],
    steps: usize,
    seed: u64,
) -> Result<ProbeReport, TrainError> {
    if instances.is_empty() {
        return Err(TrainError::EmptySet);
    }
    if steps > 0 {
        let cfg = TrainConfig {
            batch: instances.len().min(16),
            steps,
            lr: 1e-3,
            warmup_steps: 50,
            seed,
            eval_interval: steps,
            checkpoint_dir: None,
            ..TrainConfig::default()
        };
        train(lm, instances, &[], &cfg)?;
    }
    let token_accuracy = token_accuracy(lm, instances)?;
    let mut exact = 0;
    for inst in instances {
        if greedy_exact_match(lm, inst)? {
            exact += 1;
        }
    }
    Ok(ProbeReport { token_accuracy, exact_matches: exact, instances: instances.len() })
}

/// Write report JSON and CSV curves next to the checkpoints.
pub fn write_report(dir: &Path, report: &TrainReport) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train_report.json"), report.to_json())?;
    std::fs::write(dir.join("loss_curves.csv"), report.curves_csv())?;
    Ok(())
}
