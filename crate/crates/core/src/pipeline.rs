//! Closed-loop orchestration. Forward path: scene → planned tasks →
//! decomposed steps → per-step motion segments → in-between transitions →
//! one long motion. Backward path: segment motion → step descriptions →
//! task summaries → scene estimate. Emits a fully reproducible trace with
//! per-call seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MotionSequence;
use crate::lm::{LMError, Modality, PlanStep, Sampler, EOS, LM};
use crate::metrics::{self, LmEmbedder};
use crate::tasks::{self, SlotValue, Slots, TaskError, TaskKind};
use crate::tokenizer::{TokenizerError, VQVae};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { top_k: 8, temperature: 0.8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Planning rounds (one task per round).
    pub rounds: usize,
    /// Hard cap on steps per task.
    pub max_steps_per_task: usize,
    /// Transition token budget per junction; None derives 25% of the mean
    /// segment token length.
    pub transition_budget: Option<usize>,
    /// Boundary context tokens taken from each side of a junction.
    pub boundary_context: usize,
    /// Transition candidates sampled per junction; the one whose decoded
    /// boundary window has the smallest max seam discontinuity is kept.
    pub transition_candidates: usize,
    pub sampler: SamplerConfig,
    /// Token budget for one generated motion segment.
    pub segment_tokens: usize,
    /// Token budget for one generated text field.
    pub text_tokens: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            rounds: 4,
            max_steps_per_task: 5,
            transition_budget: None,
            boundary_context: 8,
            transition_candidates: 8,
            sampler: SamplerConfig::default(),
            segment_tokens: 24,
            text_tokens: 64,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.rounds < 1 {
            return Err(PipelineError::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.max_steps_per_task < 1 || self.max_steps_per_task > 5 {
            return Err(PipelineError::InvalidConfig(
                "max steps per task must be in 1..=5".into(),
            ));
        }
        if self.segment_tokens < 1 || self.text_tokens < 1 {
            return Err(PipelineError::InvalidConfig("token budgets must be >= 1".into()));
        }
        if self.transition_candidates < 1 {
            return Err(PipelineError::InvalidConfig(
                "transition candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid loop config: {0}")]
    InvalidConfig(String),
    #[error("{stage} produced an empty generation after retry (seeds {seeds:?})")]
    EmptyGeneration { stage: String, seeds: Vec<u64> },
    #[error(transparent)]
    LM(#[from] LMError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentTrace {
    pub task_index: usize,
    pub step_index: usize,
    pub step_text: String,
    pub tokens: Vec<usize>,
    pub motion: MotionSequence,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransitionTrace {
    pub tokens: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PipelineTrace {
    pub scene: String,
    pub tasks: Vec<String>,
    /// Seed used by each planning round, aligned with `tasks`.
    pub task_seeds: Vec<u64>,
    /// Decomposed steps per task (1..=5 each).
    pub steps: Vec<Vec<String>>,
    pub step_seeds: Vec<u64>,
    pub segments: Vec<SegmentTrace>,
    pub transitions: Vec<TransitionTrace>,
    /// All tokens of the long motion in order:
    /// seg0 ⊕ tr0 ⊕ seg1 ⊕ … decoded jointly.
    pub long_tokens: Vec<usize>,
    pub long_motion: MotionSequence,
    /// Backward path: one description per segment.
    pub backward_steps: Vec<String>,
    pub backward_step_seeds: Vec<u64>,
    /// Backward path: one summarized task per forward task.
    pub backward_tasks: Vec<String>,
    pub backward_task_seeds: Vec<u64>,
    pub backward_scene: String,
    pub backward_scene_seed: u64,
    /// Step-level and task-level cycle-consistency scores by metric name.
    pub cycle_step: BTreeMap<String, f64>,
    pub cycle_task: BTreeMap<String, f64>,
    pub failures: Vec<StageFailure>,
    pub config: LoopConfig,
}

impl PartialEq for LoopConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).unwrap() == serde_json::to_string(other).unwrap()
    }
}

pub struct Pipeline<'a> {
    pub lm: &'a LM<f32>,
    pub vq: &'a VQVae<f32>,
}

fn join_texts(texts: &[String]) -> String {
    texts.join("; ")
}

impl<'a> Pipeline<'a> {
    pub fn new(lm: &'a LM<f32>, vq: &'a VQVae<f32>) -> Self {
        Pipeline { lm, vq }
    }

    fn gen_text(
        &self,
        kind: TaskKind,
        slots: &Slots,
        stage: &str,
        budget: usize,
        sampler_cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<String, PipelineError> {
        let (cond, _) = render_condition_only(kind, slots)?;
        let mut tried = Vec::new();
        for attempt in 0..2u64 {
            let call_seed = seed.wrapping_add(attempt);
            tried.push(call_seed);
            let mut sampler =
                Sampler::top_k(sampler_cfg.top_k, sampler_cfg.temperature, call_seed);
            let out = self.lm.generate(&cond, &[PlanStep::text(budget, EOS)], &mut sampler)?;
            if let Ok(SlotValue::Text(text)) = tasks::parse_target(kind, &out.stream) {
                let text = text.trim().to_string();
                if !text.is_empty() {
                    return Ok(text);
                }
            }
        }
        Err(PipelineError::EmptyGeneration { stage: stage.into(), seeds: tried })
    }

    fn gen_motion(
        &self,
        kind: TaskKind,
        slots: &Slots,
        budget: usize,
        sampler_cfg: &SamplerConfig,
        seed: u64,
    ) -> Result<Vec<usize>, PipelineError> {
        let (cond, _) = render_condition_only(kind, slots)?;
        let mut sampler = Sampler::top_k(sampler_cfg.top_k, sampler_cfg.temperature, seed);
        let out = self.lm.generate(&cond, &[PlanStep::motion(budget)], &mut sampler)?;
        match tasks::parse_target(kind, &out.stream)? {
            SlotValue::Motion(ids) => Ok(ids),
            SlotValue::Text(_) => unreachable!("motion plan yields a motion span"),
        }
    }

    /// One planning round: scene + task history → next task text. Empty
    /// generations retry once with a fresh seed, then error.
    pub fn plan_round(
        &self,
        scene: &str,
        history: &[String],
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<String, PipelineError> {
        let slots: Slots = vec![
            ("scene".into(), SlotValue::Text(scene.to_string())),
            ("history".into(), SlotValue::Text(join_texts(history))),
        ];
        self.gen_text(TaskKind::CT2T, &slots, "plan_round", cfg.text_tokens, &cfg.sampler, seed)
    }

    /// Scene-conditioned task decomposition into 1..=max steps (split on the
    /// step delimiter, truncated at the cap).
    pub fn decompose(
        &self,
        scene: &str,
        task: &str,
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<Vec<String>, PipelineError> {
        let slots: Slots = vec![
            ("scene".into(), SlotValue::Text(scene.to_string())),
            ("task".into(), SlotValue::Text(task.to_string())),
        ];
        let text =
            self.gen_text(TaskKind::CT2S, &slots, "decompose", cfg.text_tokens, &cfg.sampler, seed)?;
        let steps: Vec<String> = text
            .split(';')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .take(cfg.max_steps_per_task)
            .collect();
        if steps.is_empty() {
            return Err(PipelineError::EmptyGeneration {
                stage: "decompose".into(),
                seeds: vec![seed],
            });
        }
        Ok(steps)
    }

    /// Step text → motion tokens + decoded motion.
    pub fn synthesize_segment(
        &self,
        step_text: &str,
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<(Vec<usize>, MotionSequence), PipelineError> {
        let slots: Slots = vec![("text".into(), SlotValue::Text(step_text.to_string()))];
        let tokens =
            self.gen_motion(TaskKind::MG, &slots, cfg.segment_tokens, &cfg.sampler, seed)?;
        let motion = self.vq.detokenize(&tokens)?;
        Ok((tokens, motion))
    }

    /// Transition tokens between two segments given boundary context of k
    /// tokens per side. Budget 0 means pure concatenation (empty output).
    /// Samples `transition_candidates` sequences and keeps the one whose
    /// decoded boundary window has the smallest max seam discontinuity.
    pub fn in_between(
        &self,
        prev: &[usize],
        next: &[usize],
        budget: usize,
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<Vec<usize>, PipelineError> {
        if budget == 0 {
            return Ok(Vec::new());
        }
        let k = cfg.boundary_context;
        let prefix = &prev[prev.len().saturating_sub(k)..];
        let suffix = &next[..k.min(next.len())];
        let slots: Slots = vec![
            ("prefix".into(), SlotValue::Motion(prefix.to_vec())),
            ("suffix".into(), SlotValue::Motion(suffix.to_vec())),
        ];
        let ds = self.vq.cfg.downsample;
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut last_err = None;
        for c in 0..cfg.transition_candidates as u64 {
            let tr = match self.gen_motion(
                TaskKind::MiB,
                &slots,
                budget,
                &cfg.sampler,
                seed.wrapping_add(c),
            ) {
                Ok(tr) => tr,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            let window: Vec<usize> =
                prefix.iter().chain(&tr).chain(suffix).copied().collect();
            let motion = self.vq.detokenize(&window)?;
            let d1 = junction_discontinuity(&motion, prefix.len() * ds);
            let d2 = junction_discontinuity(&motion, (prefix.len() + tr.len()) * ds);
            let score = d1.max(d2);
            if best.as_ref().map_or(true, |(s, _)| score < *s) {
                best = Some((score, tr));
            }
        }
        match best {
            Some((_, tr)) => Ok(tr),
            None => Err(last_err.expect("at least one candidate attempted")),
        }
    }

    /// Backward: describe one motion segment (MU).
    pub fn describe_motion(
        &self,
        tokens: &[usize],
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<String, PipelineError> {
        let slots: Slots = vec![("motion".into(), SlotValue::Motion(tokens.to_vec()))];
        self.gen_text(TaskKind::MU, &slots, "describe_motion", cfg.text_tokens, &cfg.sampler, seed)
    }

    /// Backward: summarize step descriptions into one task (S2T).
    pub fn summarize_steps(
        &self,
        steps: &[String],
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<String, PipelineError> {
        let slots: Slots = vec![("steps".into(), SlotValue::Text(join_texts(steps)))];
        self.gen_text(TaskKind::S2T, &slots, "summarize_steps", cfg.text_tokens, &cfg.sampler, seed)
    }

    /// Backward: estimate the scene from summarized tasks (T2C).
    pub fn estimate_scene(
        &self,
        tasks_texts: &[String],
        cfg: &LoopConfig,
        seed: u64,
    ) -> Result<String, PipelineError> {
        let slots: Slots = vec![("task".into(), SlotValue::Text(join_texts(tasks_texts)))];
        self.gen_text(TaskKind::T2C, &slots, "estimate_scene", cfg.text_tokens, &cfg.sampler, seed)
    }

    /// Full closed loop. Stage failures are recorded in the trace and the
    /// loop continues with the remaining branches where possible.
    pub fn run_full(&self, scene: &str, cfg: &LoopConfig) -> Result<PipelineTrace, PipelineError> {
        cfg.validate()?;
        let mut seed_counter = cfg.seed;
        let mut next_seed = || {
            let s = seed_counter;
            seed_counter = seed_counter.wrapping_add(1);
            s
        };
        let mut failures: Vec<StageFailure> = Vec::new();

        // forward: plan rounds
        let mut tasks_texts: Vec<String> = Vec::new();
        let mut task_seeds = Vec::new();
        for _round in 0..cfg.rounds {
            let seed = next_seed();
            match self.plan_round(scene, &tasks_texts, cfg, seed) {
                Ok(t) => {
                    tasks_texts.push(t);
                    task_seeds.push(seed);
                }
                Err(e) => {
                    failures.push(StageFailure {
                        stage: "plan_round".into(),
                        message: e.to_string(),
                    });
                }
            }
        }

        // forward: decompose + synthesize
        let mut steps: Vec<Vec<String>> = Vec::new();
        let mut step_seeds = Vec::new();
        let mut segments: Vec<SegmentTrace> = Vec::new();
        for (ti, task) in tasks_texts.iter().enumerate() {
            let seed = next_seed();
            let task_steps = match self.decompose(scene, task, cfg, seed) {
                Ok(s) => {
                    step_seeds.push(seed);
                    s
                }
                Err(e) => {
                    failures.push(StageFailure {
                        stage: "decompose".into(),
                        message: e.to_string(),
                    });
                    steps.push(Vec::new());
                    continue;
                }
            };
            for (si, step_text) in task_steps.iter().enumerate() {
                let seg_seed = next_seed();
                match self.synthesize_segment(step_text, cfg, seg_seed) {
                    Ok((tokens, motion)) => segments.push(SegmentTrace {
                        task_index: ti,
                        step_index: si,
                        step_text: step_text.clone(),
                        tokens,
                        motion,
                        seed: seg_seed,
                    }),
                    Err(e) => failures.push(StageFailure {
                        stage: "synthesize_segment".into(),
                        message: e.to_string(),
                    }),
                }
            }
            steps.push(task_steps);
        }

        // transitions and the jointly decoded long motion
        let budget = cfg.transition_budget.unwrap_or_else(|| {
            let mean = segments.iter().map(|s| s.tokens.len()).sum::<usize>() as f64
                / segments.len().max(1) as f64;
            (mean * 0.25).round() as usize
        });
        let mut transitions: Vec<TransitionTrace> = Vec::new();
        for w in 0..segments.len().saturating_sub(1) {
            let seed = next_seed();
            match self.in_between(&segments[w].tokens, &segments[w + 1].tokens, budget, cfg, seed)
            {
                Ok(tokens) => transitions.push(TransitionTrace { tokens, seed }),
                Err(e) => {
                    failures.push(StageFailure {
                        stage: "in_between".into(),
                        message: e.to_string(),
                    });
                    transitions.push(TransitionTrace { tokens: Vec::new(), seed });
                }
            }
        }
        let mut long_tokens: Vec<usize> = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            long_tokens.extend_from_slice(&seg.tokens);
            if i < transitions.len() {
                long_tokens.extend_from_slice(&transitions[i].tokens);
            }
        }
        let long_motion = if long_tokens.is_empty() {
            // every segment failed; an empty long motion keeps the trace
            // well-formed so the failures stay inspectable
            MotionSequence {
                id: "long".into(),
                fps: self.vq.cfg.fps,
                channels: self.vq.cfg.channels,
                data: Vec::new(),
            }
        } else {
            self.vq.detokenize(&long_tokens)?
        };

        // backward path
        let mut backward_steps = Vec::new();
        let mut backward_step_seeds = Vec::new();
        for seg in &segments {
            let seed = next_seed();
            backward_step_seeds.push(seed);
            match self.describe_motion(&seg.tokens, cfg, seed) {
                Ok(t) => backward_steps.push(t),
                Err(e) => {
                    failures.push(StageFailure {
                        stage: "describe_motion".into(),
                        message: e.to_string(),
                    });
                    backward_steps.push(String::new());
                }
            }
        }
        let mut backward_tasks = Vec::new();
        let mut backward_task_seeds = Vec::new();
        for ti in 0..tasks_texts.len() {
            let group: Vec<String> = segments
                .iter()
                .zip(&backward_steps)
                .filter(|(s, _)| s.task_index == ti)
                .map(|(_, b)| b.clone())
                .collect();
            let seed = next_seed();
            backward_task_seeds.push(seed);
            if group.is_empty() {
                backward_tasks.push(String::new());
                continue;
            }
            match self.summarize_steps(&group, cfg, seed) {
                Ok(t) => backward_tasks.push(t),
                Err(e) => {
                    failures.push(StageFailure {
                        stage: "summarize_steps".into(),
                        message: e.to_string(),
                    });
                    backward_tasks.push(String::new());
                }
            }
        }
        let backward_scene_seed = next_seed();
        let backward_scene = match self.estimate_scene(&backward_tasks, cfg, backward_scene_seed)
        {
            Ok(t) => t,
            Err(e) => {
                failures.push(StageFailure {
                    stage: "estimate_scene".into(),
                    message: e.to_string(),
                });
                String::new()
            }
        };

        // cycle scores (step level: forward step text per segment vs its
        // backward description; task level: planned vs summarized tasks)
        let embedder = LmEmbedder(self.lm);
        let forward_steps: Vec<String> =
            segments.iter().map(|s| s.step_text.clone()).collect();
        let cycle_step = if forward_steps.is_empty() {
            BTreeMap::new()
        } else {
            metrics::cycle_scores(&forward_steps, &backward_steps, &embedder)
        };
        let cycle_task = if tasks_texts.is_empty() {
            BTreeMap::new()
        } else {
            metrics::cycle_scores(&tasks_texts, &backward_tasks, &embedder)
        };

        Ok(PipelineTrace {
            scene: scene.to_string(),
            tasks: tasks_texts,
            task_seeds,
            steps,
            step_seeds,
            segments,
            transitions,
            long_tokens,
            long_motion,
            backward_steps,
            backward_step_seeds,
            backward_tasks,
            backward_task_seeds,
            backward_scene,
            backward_scene_seed,
            cycle_step,
            cycle_task,
            failures,
            config: cfg.clone(),
        })
    }
}

/// Render a condition stream for generation: the target slot is filled with
/// a placeholder (it is what generation produces) and dropped.
fn render_condition_only(
    kind: TaskKind,
    slots: &Slots,
) -> Result<(crate::lm::MixedStream, ()), TaskError> {
    let mut full = slots.clone();
    let placeholder = match kind.target_modality() {
        Modality::Text => SlotValue::Text("x".into()),
        Modality::Motion => SlotValue::Motion(vec![0]),
    };
    full.push((kind.target_slot().to_string(), placeholder));
    let (cond, _target) = tasks::render(kind, &full)?;
    Ok((cond, ()))
}

impl PipelineTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn total_frames(&self) -> usize {
        self.long_motion.frames()
    }

    /// Structural invariants: transition count, frame additivity, and
    /// token-range membership.
    pub fn check_invariants(&self, motion_vocab: usize, downsample: usize) -> Result<(), String> {
        if !self.segments.is_empty() && self.transitions.len() != self.segments.len() - 1 {
            return Err(format!(
                "expected {} transitions, found {}",
                self.segments.len() - 1,
                self.transitions.len()
            ));
        }
        let seg_tokens: usize = self.segments.iter().map(|s| s.tokens.len()).sum();
        let tr_tokens: usize = self.transitions.iter().map(|t| t.tokens.len()).sum();
        if self.long_tokens.len() != seg_tokens + tr_tokens {
            return Err("long token count != segments + transitions".into());
        }
        let seg_frames: usize = self.segments.iter().map(|s| s.motion.frames()).sum();
        let tr_frames = tr_tokens * downsample;
        if self.long_motion.frames() != seg_frames + tr_frames {
            return Err(format!(
                "long motion frames {} != segment frames {} + transition frames {}",
                self.long_motion.frames(),
                seg_frames,
                tr_frames
            ));
        }
        if let Some(&bad) = self.long_tokens.iter().find(|&&t| t >= motion_vocab) {
            return Err(format!("out-of-vocabulary token {bad}"));
        }
        Ok(())
    }

    /// A one-line-per-stage human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("scene: {}\n", self.scene));
        s.push_str(&format!(
            "tasks: {} | steps: {} | segments: {} | transitions: {}\n",
            self.tasks.len(),
            self.steps.iter().map(|v| v.len()).sum::<usize>(),
            self.segments.len(),
            self.transitions.len()
        ));
        s.push_str(&format!(
            "long motion: {} tokens, {} frames\n",
            self.long_tokens.len(),
            self.long_motion.frames()
        ));
        for (name, v) in &self.cycle_step {
            s.push_str(&format!("cycle step {name}: {v:.4}\n"));
        }
        for (name, v) in &self.cycle_task {
            s.push_str(&format!("cycle task {name}: {v:.4}\n"));
        }
        s.push_str(&format!("failures: {}\n", self.failures.len()));
        s
    }
}

/// Mean of the per-channel maximum frame-to-frame jump at a junction,
/// measured over a window around the boundary frame.
pub fn junction_discontinuity(motion: &MotionSequence, boundary_frame: usize) -> f64 {
    let frames = motion.frames();
    if boundary_frame == 0 || boundary_frame >= frames {
        return 0.0;
    }
    let c = motion.channels;
    let a = motion.frame(boundary_frame - 1);
    let b = motion.frame(boundary_frame);
    (0..c).map(|i| (b[i] - a[i]).abs() as f64).fold(0.0, f64::max)
}
