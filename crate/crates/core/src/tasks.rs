//! The 11 instruction tasks: schemas, prompt rendering to (condition,
//! target) mixed streams, inverse parsing of model outputs, and training-set
//! assembly from an annotated corpus.
//!
//! Prompt wording lives in the versioned `templates.txt`; the task tag token
//! at the head of every condition carries task identity independently of
//! wording.

use std::collections::HashMap;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::lm::{Elem, MixedStream, Modality, EMPTY_HISTORY, EOS, MCLOSE, MOPEN, TAG_BASE};

pub const NUM_TASKS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    /// Motion generation: text -> motion.
    MG,
    /// Motion understanding: motion -> text.
    MU,
    /// Motion in-between: motion context -> motion gap.
    MiB,
    /// Contextual task planning: scene + task history -> next task.
    CT2T,
    /// Task decomposition: task -> steps.
    T2S,
    /// Step summarization: steps -> task.
    S2T,
    /// Scene estimation from a task.
    T2C,
    /// Contextual task decomposition: scene + task -> steps.
    CT2S,
    /// Contextual step summarization: scene + steps -> task.
    CS2T,
    /// Contextual step planning: scene + step history -> next step.
    CS2S,
    /// Scene estimation from steps.
    S2C,
}

pub const ALL_TASKS: [TaskKind; NUM_TASKS] = [
    TaskKind::MG,
    TaskKind::MU,
    TaskKind::MiB,
    TaskKind::CT2T,
    TaskKind::T2S,
    TaskKind::S2T,
    TaskKind::T2C,
    TaskKind::CT2S,
    TaskKind::CS2T,
    TaskKind::CS2S,
    TaskKind::S2C,
];

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::MG => "MG",
            TaskKind::MU => "MU",
            TaskKind::MiB => "MiB",
            TaskKind::CT2T => "CT2T",
            TaskKind::T2S => "T2S",
            TaskKind::S2T => "S2T",
            TaskKind::T2C => "T2C",
            TaskKind::CT2S => "CT2S",
            TaskKind::CS2T => "CS2T",
            TaskKind::CS2S => "CS2S",
            TaskKind::S2C => "S2C",
        }
    }

    pub fn index(&self) -> usize {
        ALL_TASKS.iter().position(|k| k == self).unwrap()
    }

    /// The task's tag token in the text vocabulary.
    pub fn tag(&self) -> u32 {
        TAG_BASE + self.index() as u32
    }

    /// Condition slots, in rendering order.
    pub fn cond_slots(&self) -> &'static [(&'static str, Modality)] {
        use Modality::*;
        match self {
            TaskKind::MG => &[("text", Text)],
            TaskKind::MU => &[("motion", Motion)],
            TaskKind::MiB => &[("prefix", Motion), ("suffix", Motion)],
            TaskKind::CT2T => &[("scene", Text), ("history", Text)],
            TaskKind::T2S => &[("task", Text)],
            TaskKind::S2T => &[("steps", Text)],
            TaskKind::T2C => &[("task", Text)],
            TaskKind::CT2S => &[("scene", Text), ("task", Text)],
            TaskKind::CS2T => &[("scene", Text), ("steps", Text)],
            TaskKind::CS2S => &[("scene", Text), ("history", Text)],
            TaskKind::S2C => &[("steps", Text)],
        }
    }

    pub fn target_modality(&self) -> Modality {
        match self {
            TaskKind::MG | TaskKind::MiB => Modality::Motion,
            _ => Modality::Text,
        }
    }

    pub fn target_slot(&self) -> &'static str {
        match self {
            TaskKind::MG | TaskKind::MiB => "motion",
            TaskKind::MU | TaskKind::CS2T | TaskKind::S2T => "task",
            TaskKind::CT2T => "next_task",
            TaskKind::T2S | TaskKind::CT2S => "steps",
            TaskKind::CS2S => "next_step",
            TaskKind::T2C | TaskKind::S2C => "scene",
        }
    }
}

static TEMPLATES: Lazy<(u32, HashMap<&'static str, &'static str>)> = Lazy::new(|| {
    let raw = include_str!("templates.txt");
    let mut lines = raw.lines();
    let version_line = lines.next().expect("empty template file");
    let version: u32 = version_line
        .strip_prefix("version ")
        .and_then(|v| v.parse().ok())
        .expect("template file must start with 'version N'");
    let mut map = HashMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (name, instr) = line.split_once('|').expect("template line missing '|'");
        map.insert(name.trim(), instr.trim().to_string().leak() as &'static str);
    }
    (version, map)
});

pub fn template_version() -> u32 {
    TEMPLATES.0
}

pub fn instruction(kind: TaskKind) -> &'static str {
    TEMPLATES.1[kind.name()]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotValue {
    Text(String),
    Motion(Vec<usize>),
}

impl SlotValue {
    pub fn modality(&self) -> Modality {
        match self {
            SlotValue::Text(_) => Modality::Text,
            SlotValue::Motion(_) => Modality::Motion,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            SlotValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_motion(&self) -> Option<&[usize]> {
        match self {
            SlotValue::Motion(ids) => Some(ids),
            _ => None,
        }
    }
}

pub type Slots = Vec<(String, SlotValue)>;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("missing slot '{0}'")]
    MissingSlot(String),
    #[error("slot '{slot}' expects {expected:?}, got {got:?}")]
    ModalityMismatch { slot: String, expected: Modality, got: Modality },
    #[error("slot '{0}' contains a newline; rendering would not be invertible")]
    NewlineInSlot(String),
    #[error("slot '{0}' holds an empty motion span")]
    EmptyMotionSlot(String),
    #[error("no eligible corpus records for task {0:?}")]
    Ineligible(TaskKind),
    #[error("parse error ({reason}) in stream of {len} elements")]
    Parse { reason: String, len: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptInstance {
    pub kind: TaskKind,
    pub slots: Slots,
    #[serde(skip)]
    pub condition: MixedStream,
    #[serde(skip)]
    pub target: MixedStream,
    /// Source motion id, when the instance derives from one.
    pub motion_id: Option<String>,
}

fn get_slot<'a>(slots: &'a Slots, name: &str) -> Result<&'a SlotValue, TaskError> {
    slots
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v)
        .ok_or_else(|| TaskError::MissingSlot(name.to_string()))
}

/// Render a task instance to (condition, target). Condition layout:
/// [tag token] instruction-bytes, then per slot "\n{name}: " followed by the
/// slot value (text bytes, the empty-history sentinel for an empty text, or
/// a delimited motion span). Text targets end with EOS; motion targets are a
/// single delimited span.
pub fn render(kind: TaskKind, slots: &Slots) -> Result<(MixedStream, MixedStream), TaskError> {
    let mut cond = MixedStream::new();
    cond.push_special(kind.tag());
    cond.push_text(instruction(kind));
    for &(name, expected) in kind.cond_slots() {
        let v = get_slot(slots, name)?;
        if v.modality() != expected {
            return Err(TaskError::ModalityMismatch {
                slot: name.to_string(),
                expected,
                got: v.modality(),
            });
        }
        cond.push_text(&format!("\n{name}: "));
        match v {
            SlotValue::Text(s) => {
                if s.contains('\n') {
                    return Err(TaskError::NewlineInSlot(name.to_string()));
                }
                if s.is_empty() {
                    cond.push_special(EMPTY_HISTORY);
                } else {
                    cond.push_text(s);
                }
            }
            SlotValue::Motion(ids) => {
                if ids.is_empty() {
                    return Err(TaskError::EmptyMotionSlot(name.to_string()));
                }
                cond.push_motion_span(ids);
            }
        }
    }

    let tname = kind.target_slot();
    let tv = get_slot(slots, tname)?;
    if tv.modality() != kind.target_modality() {
        return Err(TaskError::ModalityMismatch {
            slot: tname.to_string(),
            expected: kind.target_modality(),
            got: tv.modality(),
        });
    }
    let mut target = MixedStream::new();
    match tv {
        SlotValue::Text(s) => {
            if s.contains('\n') {
                return Err(TaskError::NewlineInSlot(tname.to_string()));
            }
            target.push_text(s);
            target.push_special(EOS);
        }
        SlotValue::Motion(ids) => {
            if ids.is_empty() {
                return Err(TaskError::EmptyMotionSlot(tname.to_string()));
            }
            target.push_motion_span(ids);
        }
    }
    Ok((cond, target))
}

/// Inverse of target rendering: extract the target slot from a model output
/// stream (markers and EOS stripped).
pub fn parse_target(kind: TaskKind, output: &MixedStream) -> Result<SlotValue, TaskError> {
    match kind.target_modality() {
        Modality::Motion => {
            let elems = &output.elems;
            if elems.first() != Some(&Elem::Text(MOPEN)) {
                return Err(TaskError::Parse {
                    reason: "expected motion-open marker".into(),
                    len: elems.len(),
                });
            }
            if elems.last() != Some(&Elem::Text(MCLOSE)) {
                return Err(TaskError::Parse {
                    reason: "missing motion-close marker".into(),
                    len: elems.len(),
                });
            }
            let mut ids = Vec::new();
            for e in &elems[1..elems.len() - 1] {
                match e {
                    Elem::Motion(id) => ids.push(*id as usize),
                    _ => {
                        return Err(TaskError::Parse {
                            reason: "text token inside motion span".into(),
                            len: elems.len(),
                        })
                    }
                }
            }
            Ok(SlotValue::Motion(ids))
        }
        Modality::Text => {
            let mut bytes = Vec::new();
            for e in &output.elems {
                match *e {
                    Elem::Text(id) if id < 256 => bytes.push(id as u8),
                    Elem::Text(id) if id == EOS => break,
                    Elem::Text(id) if id == EMPTY_HISTORY => {}
                    _ => {
                        return Err(TaskError::Parse {
                            reason: format!("unexpected element {e:?} in text target"),
                            len: output.elems.len(),
                        })
                    }
                }
            }
            Ok(SlotValue::Text(String::from_utf8_lossy(&bytes).into_owned()))
        }
    }
}

/// Inverse of condition rendering; used for round-trip checks and trace
/// inspection.
pub fn parse_condition(kind: TaskKind, cond: &MixedStream) -> Result<Slots, TaskError> {
    let elems = &cond.elems;
    let fail = |reason: &str| TaskError::Parse { reason: reason.to_string(), len: elems.len() };
    if elems.first() != Some(&Elem::Text(kind.tag())) {
        return Err(fail("condition does not start with the task tag"));
    }
    let mut pos = 1 + instruction(kind).len();
    if elems.len() < pos {
        return Err(fail("condition shorter than instruction"));
    }
    let mut slots = Slots::new();
    let schema = kind.cond_slots();
    for (si, &(name, modality)) in schema.iter().enumerate() {
        let header = format!("\n{name}: ");
        for b in header.bytes() {
            if elems.get(pos) != Some(&Elem::Text(b as u32)) {
                return Err(fail(&format!("missing slot header '{name}'")));
            }
            pos += 1;
        }
        match modality {
            Modality::Text => {
                if elems.get(pos) == Some(&Elem::Text(EMPTY_HISTORY)) {
                    slots.push((name.to_string(), SlotValue::Text(String::new())));
                    pos += 1;
                    continue;
                }
                let mut bytes = Vec::new();
                while pos < elems.len() {
                    match elems[pos] {
                        Elem::Text(b) if b < 256 && b != b'\n' as u32 => {
                            bytes.push(b as u8);
                            pos += 1;
                        }
                        _ => break,
                    }
                }
                // a following slot begins with '\n'; otherwise must be end
                if pos < elems.len() && si + 1 == schema.len() {
                    return Err(fail("trailing elements after final text slot"));
                }
                slots.push((
                    name.to_string(),
                    SlotValue::Text(String::from_utf8_lossy(&bytes).into_owned()),
                ));
            }
            Modality::Motion => {
                if elems.get(pos) != Some(&Elem::Text(MOPEN)) {
                    return Err(fail(&format!("slot '{name}' missing motion-open")));
                }
                pos += 1;
                let mut ids = Vec::new();
                loop {
                    match elems.get(pos) {
                        Some(Elem::Motion(id)) => {
                            ids.push(*id as usize);
                            pos += 1;
                        }
                        Some(Elem::Text(t)) if *t == MCLOSE => {
                            pos += 1;
                            break;
                        }
                        _ => return Err(fail(&format!("slot '{name}' has unterminated span"))),
                    }
                }
                slots.push((name.to_string(), SlotValue::Motion(ids)));
            }
        }
    }
    if pos != elems.len() {
        return Err(fail("unconsumed trailing elements"));
    }
    Ok(slots)
}

/// Full round-trip parse of a rendered pair back to the original slots.
pub fn parse(kind: TaskKind, cond: &MixedStream, target: &MixedStream) -> Result<Slots, TaskError> {
    let mut slots = parse_condition(kind, cond)?;
    slots.push((kind.target_slot().to_string(), parse_target(kind, target)?));
    Ok(slots)
}

// ── training-set assembly ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixWeights(pub Vec<(TaskKind, f64)>);

impl Default for MixWeights {
    fn default() -> Self {
        MixWeights(ALL_TASKS.iter().map(|&k| (k, 1.0)).collect())
    }
}

/// MiB context split: (prefix, gap, suffix) as fractions of the token count.
pub const MIB_SPLIT: (f64, f64) = (0.25, 0.75); // gap spans [25%, 75%)

fn joined_steps(steps: &[String]) -> String {
    steps.join("; ")
}

/// Token span covering a frame range, scaled by the tokenizer's
/// frames-per-token ratio.
fn step_token_span(t: &[usize], frames: usize, (a, b): (usize, usize)) -> &[usize] {
    let scale = t.len() as f64 / frames.max(1) as f64;
    let lo = ((a as f64 * scale).floor() as usize).min(t.len());
    let hi = ((b as f64 * scale).ceil() as usize).clamp(lo, t.len());
    &t[lo..hi]
}

/// Build one instance of `kind` from the corpus; `tokens` maps motion id to
/// its token sequence. Returns None when the sampled record is ineligible.
fn build_instance(
    kind: TaskKind,
    corpus: &Corpus,
    tokens: &HashMap<String, Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Option<PromptInstance> {
    let rec = &corpus.records[rng.gen_range(0..corpus.records.len())];
    let toks = tokens.get(&rec.motion_id);
    let mut slots: Slots = Vec::new();
    let motion_id = Some(rec.motion_id.clone());
    match kind {
        // MG and MU train at step granularity: one step's text paired with
        // the token span covering that step's frames, mirroring how the
        // pipeline invokes them (one segment per step).
        TaskKind::MG => {
            let t = toks?;
            let frames = corpus.motion(&rec.motion_id)?.frames();
            let si = rng.gen_range(0..rec.step_texts.len());
            let span = step_token_span(t, frames, rec.step_frame_ranges[si]);
            if span.len() < 2 {
                return None;
            }
            slots.push(("text".into(), SlotValue::Text(rec.step_texts[si].clone())));
            slots.push(("motion".into(), SlotValue::Motion(span.to_vec())));
        }
        TaskKind::MU => {
            let t = toks?;
            let frames = corpus.motion(&rec.motion_id)?.frames();
            let si = rng.gen_range(0..rec.step_texts.len());
            let span = step_token_span(t, frames, rec.step_frame_ranges[si]);
            if span.len() < 2 {
                return None;
            }
            slots.push(("motion".into(), SlotValue::Motion(span.to_vec())));
            slots.push(("task".into(), SlotValue::Text(rec.step_texts[si].clone())));
        }
        TaskKind::MiB => {
            let t = toks?;
            if t.len() < 4 {
                return None;
            }
            let a = (t.len() as f64 * MIB_SPLIT.0).round() as usize;
            let b = (t.len() as f64 * MIB_SPLIT.1).round() as usize;
            slots.push(("prefix".into(), SlotValue::Motion(t[..a].to_vec())));
            slots.push(("suffix".into(), SlotValue::Motion(t[b..].to_vec())));
            slots.push(("motion".into(), SlotValue::Motion(t[a..b].to_vec())));
        }
        TaskKind::CT2T => {
            let scene = corpus.records_for_scene(&rec.scene_id);
            let i = rec.segment_index;
            let history =
                joined_tasks(&scene.iter().take(i).map(|r| r.task_text.clone()).collect::<Vec<_>>());
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
            slots.push(("history".into(), SlotValue::Text(history)));
            slots.push(("next_task".into(), SlotValue::Text(rec.task_text.clone())));
        }
        TaskKind::T2S => {
            slots.push(("task".into(), SlotValue::Text(rec.task_text.clone())));
            slots.push(("steps".into(), SlotValue::Text(joined_steps(&rec.step_texts))));
        }
        TaskKind::S2T => {
            slots.push(("steps".into(), SlotValue::Text(joined_steps(&rec.step_texts))));
            slots.push(("task".into(), SlotValue::Text(rec.task_text.clone())));
        }
        TaskKind::T2C => {
            slots.push(("task".into(), SlotValue::Text(rec.task_text.clone())));
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
        }
        TaskKind::CT2S => {
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
            slots.push(("task".into(), SlotValue::Text(rec.task_text.clone())));
            slots.push(("steps".into(), SlotValue::Text(joined_steps(&rec.step_texts))));
        }
        TaskKind::CS2T => {
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
            slots.push(("steps".into(), SlotValue::Text(joined_steps(&rec.step_texts))));
            slots.push(("task".into(), SlotValue::Text(rec.task_text.clone())));
        }
        TaskKind::CS2S => {
            let k = rng.gen_range(0..rec.step_texts.len());
            let history = joined_steps(&rec.step_texts[..k]);
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
            slots.push(("history".into(), SlotValue::Text(history)));
            slots.push(("next_step".into(), SlotValue::Text(rec.step_texts[k].clone())));
        }
        TaskKind::S2C => {
            slots.push(("steps".into(), SlotValue::Text(joined_steps(&rec.step_texts))));
            slots.push(("scene".into(), SlotValue::Text(rec.scene_text.clone())));
        }
    }
    let (condition, target) = render(kind, &slots).ok()?;
    Some(PromptInstance { kind, slots, condition, target, motion_id })
}

fn joined_tasks(tasks: &[String]) -> String {
    tasks.join("; ")
}

/// Sample `count` instances per the mix weights. Deterministic in seed.
pub fn make_training_set(
    corpus: &Corpus,
    tokens: &HashMap<String, Vec<usize>>,
    mix: &MixWeights,
    count: usize,
    seed: u64,
) -> Result<Vec<PromptInstance>, TaskError> {
    assert!(!corpus.records.is_empty(), "empty corpus");
    let active: Vec<(TaskKind, f64)> =
        mix.0.iter().filter(|&&(_, w)| w > 0.0).copied().collect();
    assert!(!active.is_empty(), "all mix weights zero");
    let total_w: f64 = active.iter().map(|&(_, w)| w).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u = rng.gen_range(0.0..total_w);
        let mut kind = active[active.len() - 1].0;
        for &(k, w) in &active {
            if u < w {
                kind = k;
                break;
            }
            u -= w;
        }
        let mut made = None;
        for _ in 0..64 {
            if let Some(inst) = build_instance(kind, corpus, tokens, &mut rng) {
                made = Some(inst);
                break;
            }
        }
        out.push(made.ok_or(TaskError::Ineligible(kind))?);
    }
    Ok(out)
}

/// Serialize instance descriptors (kind + slots) as JSONL for reproducibility.
pub fn manifest_jsonl(instances: &[PromptInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        s.push_str(&serde_json::to_string(inst).unwrap());
        s.push('\n');
    }
    s
}
