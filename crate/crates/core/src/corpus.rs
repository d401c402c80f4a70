//! Synthetic motion-text corpus: parametric action families with
//! step/task/scene annotations, the on-disk AMOT motion format, and
//! scene-level splits. Externally converted data in the same formats loads
//! through the same reader.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

pub const AMOT_MAGIC: &[u8; 4] = b"AMOT";
pub const AMOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("bad magic: expected AMOT, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported AMOT version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("payload size mismatch: header says {expected} bytes, file has {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("non-finite value in motion payload")]
    NonFinite,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty split '{0}'")]
    EmptySplit(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Continuous motion features, T frames by `channels` columns, row-major f32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub id: String,
    pub fps: u32,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Root-mean-square energy per channel. Families drive disjoint channel
    /// sets, so this is the natural separating feature.
    pub fn channel_rms(&self) -> Vec<f32> {
        let c = self.channels;
        let t = self.frames();
        let mut out = vec![0.0f32; c];
        for frame in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(frame) {
                *o += v * v;
            }
        }
        for o in &mut out {
            *o = (*o / t as f32).sqrt();
        }
        out
    }
}

/// One annotated motion segment: the steps it performs, the task it belongs
/// to, and the scene shared by all segments of its scene.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub motion_id: String,
    pub step_texts: Vec<String>,
    pub task_text: String,
    pub scene_text: String,
    pub segment_index: usize,
    pub scene_id: String,
    /// Ground-truth action family name; used by oracle evaluations only.
    pub family: String,
    /// Frame span of each step inside the segment, half-open.
    pub step_frame_ranges: Vec<(usize, usize)>,
    /// True for records produced by the annotation pipeline with no motion.
    #[serde(default)]
    pub text_only: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum Waveform {
    Sin,
    Cos,
    Ramp,
    Impulse,
    Square,
}

impl Waveform {
    fn eval(&self, phase: f32) -> f32 {
        let two_pi = std::f32::consts::TAU;
        let frac = phase - phase.floor();
        match self {
            Waveform::Sin => (two_pi * phase).sin(),
            Waveform::Cos => (two_pi * phase).cos(),
            Waveform::Ramp => 2.0 * frac - 1.0,
            Waveform::Impulse => {
                if frac < 0.15 {
                    1.0
                } else {
                    0.0
                }
            }
            Waveform::Square => {
                if frac < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Parametric curve family producing motion segments plus templated texts.
/// Sampling is a deterministic function of (parameters, seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionFamily {
    pub name: String,
    pub amplitude: (f32, f32),
    pub frequency: (f32, f32),
    pub phase: (f32, f32),
    /// (channel index, waveform) pairs this family drives.
    pub channels: Vec<(usize, Waveform)>,
    pub step_templates: Vec<String>,
    pub task_templates: Vec<String>,
}

/// The default six families. Channel recipes are disjoint enough that
/// per-family feature centroids separate cleanly, which the oracle
/// evaluations rely on.
pub fn default_families() -> Vec<ActionFamily> {
    let fam = |name: &str,
               amp: (f32, f32),
               freq: (f32, f32),
               chans: Vec<(usize, Waveform)>,
               steps: Vec<&str>,
               tasks: Vec<&str>| ActionFamily {
        name: name.to_string(),
        amplitude: amp,
        frequency: freq,
        phase: (0.0, 1.0),
        channels: chans,
        step_templates: steps.into_iter().map(String::from).collect(),
        task_templates: tasks.into_iter().map(String::from).collect(),
    };
    vec![
        fam(
            "walk",
            (0.6, 1.2),
            (0.8, 1.6),
            vec![(0, Waveform::Sin), (1, Waveform::Cos), (2, Waveform::Sin)],
            vec![
                "a person walks forward at a steady pace",
                "the person walks ahead swinging both arms",
                "a person walks slowly across the floor",
            ],
            vec![
                "the person goes for a short walk",
                "a walk across the room",
            ],
        ),
        fam(
            "jump",
            (0.8, 1.5),
            (0.4, 0.9),
            vec![(3, Waveform::Impulse), (4, Waveform::Impulse), (5, Waveform::Sin)],
            vec![
                "a person jumps straight up with both feet",
                "the person jumps forward once",
                "a person jumps in place repeatedly",
            ],
            vec![
                "a set of jumps on the spot",
                "the person does some jump exercises",
            ],
        ),
        fam(
            "wave",
            (0.5, 1.0),
            (1.2, 2.4),
            vec![(6, Waveform::Sin), (7, Waveform::Cos)],
            vec![
                "a person waves the right arm twice",
                "the person waves a hand above the head",
                "a person waves to greet someone",
            ],
            vec![
                "the person waves hello",
                "a friendly wave at the camera",
            ],
        ),
        fam(
            "squat",
            (0.7, 1.3),
            (0.3, 0.8),
            vec![(8, Waveform::Square), (9, Waveform::Sin), (14, Waveform::Cos)],
            vec![
                "a person squats down and stands back up",
                "the person squats slowly keeping the back straight",
                "a person squats twice in a row",
            ],
            vec![
                "a few squat repetitions",
                "the person performs squat exercises",
            ],
        ),
        fam(
            "turn",
            (0.5, 1.1),
            (0.2, 0.6),
            vec![(10, Waveform::Ramp), (11, Waveform::Ramp)],
            vec![
                "a person turns around to the left",
                "the person turns in a full circle",
                "a person turns to face the other way",
            ],
            vec![
                "the person turns around",
                "a slow turn on the spot",
            ],
        ),
        fam(
            "sit",
            (0.6, 1.0),
            (0.1, 0.4),
            vec![(12, Waveform::Ramp), (13, Waveform::Cos), (15, Waveform::Sin)],
            vec![
                "a person sits down on a chair",
                "the person sits and rests for a moment",
                "a person sits down slowly",
            ],
            vec![
                "the person sits down to rest",
                "a short sit on the bench",
            ],
        ),
    ]
}

/// Corpus generation settings. Defaults: 16 channels at 20 fps, segments of
/// 40-200 frames, scenes of 2-6 tasks with 1-5 steps each.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub families: Vec<ActionFamily>,
    pub scenes: usize,
    pub channels: usize,
    pub fps: u32,
    pub tasks_per_scene: (usize, usize),
    pub steps_per_task: (usize, usize),
    pub segment_frames: (usize, usize),
    pub noise_std: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            families: default_families(),
            scenes: 120,
            channels: 16,
            fps: 20,
            tasks_per_scene: (2, 6),
            steps_per_task: (1, 5),
            segment_frames: (40, 200),
            noise_std: 0.01,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.families.len() < 4 {
            return Err(CorpusError::InvalidConfig(format!(
                "need at least 4 action families, got {}",
                self.families.len()
            )));
        }
        if self.channels == 0 || self.scenes == 0 {
            return Err(CorpusError::InvalidConfig("channels and scenes must be positive".into()));
        }
        if self.tasks_per_scene.0 < 1 || self.tasks_per_scene.1 > 6 || self.tasks_per_scene.0 > self.tasks_per_scene.1 {
            return Err(CorpusError::InvalidConfig("tasks_per_scene must lie in 1..=6".into()));
        }
        if self.steps_per_task.0 < 1 || self.steps_per_task.1 > 5 || self.steps_per_task.0 > self.steps_per_task.1 {
            return Err(CorpusError::InvalidConfig("steps_per_task must lie in 1..=5".into()));
        }
        for f in &self.families {
            for &(ch, _) in &f.channels {
                if ch >= self.channels {
                    return Err(CorpusError::InvalidConfig(format!(
                        "family '{}' drives channel {ch} outside 0..{}",
                        f.name, self.channels
                    )));
                }
            }
            if f.amplitude.0 > f.amplitude.1 || f.frequency.0 > f.frequency.1 {
                return Err(CorpusError::InvalidConfig(format!(
                    "family '{}' has inverted parameter ranges",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

/// In-memory corpus: motions plus annotations, indexable by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub motions: Vec<MotionSequence>,
    pub records: Vec<AnnotationRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn motion(&self, id: &str) -> Option<&MotionSequence> {
        self.by_id.get(id).map(|&i| &self.motions[i])
    }

    pub fn scene_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if seen.last() != Some(&r.scene_id) && !seen.contains(&r.scene_id) {
                seen.push(r.scene_id.clone());
            }
        }
        seen
    }

    pub fn records_for_scene(&self, scene_id: &str) -> Vec<&AnnotationRecord> {
        self.records.iter().filter(|r| r.scene_id == scene_id).collect()
    }
}

struct SceneDraft {
    motions: Vec<MotionSequence>,
    records: Vec<AnnotationRecord>,
}

/// Generate the full corpus under `out_dir`. Regeneration with identical
/// (config, seed) is byte-identical.
pub fn generate_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let scene_indices: Vec<usize> = (0..config.scenes).collect();
    let drafts = par::map_collect(&scene_indices, |&s| generate_scene(config, seed, s));

    fs::create_dir_all(out_dir.join("motions"))?;
    let cfg_echo = serde_json::json!({ "config": config, "seed": seed });
    write_atomic(&out_dir.join("config.json"), serde_json::to_string_pretty(&cfg_echo)?.as_bytes())?;

    let mut corpus = Corpus::default();
    let mut jsonl = String::new();
    for draft in drafts {
        for (m, r) in draft.motions.into_iter().zip(draft.records) {
            write_motion(&out_dir.join("motions").join(format!("{}.amot", m.id)), &m)?;
            jsonl.push_str(&serde_json::to_string(&r)?);
            jsonl.push('\n');
            corpus.by_id.insert(m.id.clone(), corpus.motions.len());
            corpus.motions.push(m);
            corpus.records.push(r);
        }
    }
    write_atomic(&out_dir.join("annotations.jsonl"), jsonl.as_bytes())?;
    Ok(corpus)
}

fn generate_scene(config: &CorpusConfig, seed: u64, scene_idx: usize) -> SceneDraft {
    // Per-scene stream keyed by (seed, scene index) so scenes are
    // independent and parallel generation stays deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5ce7e5 + scene_idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let scene_id = format!("scene{scene_idx:05}");
    let n_tasks = rng.gen_range(config.tasks_per_scene.0..=config.tasks_per_scene.1);

    struct TaskDraft {
        family: usize,
        task_text: String,
        steps: Vec<(String, Vec<f32>)>, // (text, frames)
        step_frames: Vec<usize>,
    }

    let mut tasks = Vec::new();
    for _ in 0..n_tasks {
        let fi = rng.gen_range(0..config.families.len());
        let fam = &config.families[fi];
        let n_steps = rng.gen_range(config.steps_per_task.0..=config.steps_per_task.1);
        let total = rng.gen_range(config.segment_frames.0..=config.segment_frames.1);
        let base = total / n_steps;
        let mut steps = Vec::new();
        let mut step_frames = Vec::new();
        for si in 0..n_steps {
            let frames = if si + 1 == n_steps { total - base * (n_steps - 1) } else { base };
            let text = fam.step_templates[rng.gen_range(0..fam.step_templates.len())].clone();
            let amp = rng.gen_range(fam.amplitude.0..=fam.amplitude.1);
            let freq = rng.gen_range(fam.frequency.0..=fam.frequency.1);
            let phase = rng.gen_range(fam.phase.0..=fam.phase.1);
            let mut data = vec![0.0f32; frames * config.channels];
            for t in 0..frames {
                for &(ch, wf) in &fam.channels {
                    let x = freq * t as f32 / config.fps as f32 + phase;
                    data[t * config.channels + ch] = amp * wf.eval(x);
                }
                for c in 0..config.channels {
                    let noise: f32 = rng.gen_range(-1.0..1.0);
                    data[t * config.channels + c] += config.noise_std * noise;
                }
            }
            steps.push((text, data));
            step_frames.push(frames);
        }
        let task_text = fam.task_templates[rng.gen_range(0..fam.task_templates.len())].clone();
        tasks.push(TaskDraft { family: fi, task_text, steps, step_frames });
    }

    let scene_text = {
        let parts: Vec<String> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let connector = if i == 0 { "first" } else { "then" };
                format!("{connector} {}", t.task_text)
            })
            .collect();
        format!("in one scene, {}", parts.join(", "))
    };

    let mut motions = Vec::new();
    let mut records = Vec::new();
    for (seg_idx, t) in tasks.iter().enumerate() {
        let id = format!("{scene_id}_{seg_idx:02}");
        let mut data = Vec::new();
        let mut ranges = Vec::new();
        let mut cursor = 0;
        for (_, step_data) in &t.steps {
            data.extend_from_slice(step_data);
            let frames = step_data.len() / config.channels;
            ranges.push((cursor, cursor + frames));
            cursor += frames;
        }
        debug_assert_eq!(ranges.len(), t.step_frames.len());
        motions.push(MotionSequence {
            id: id.clone(),
            fps: config.fps,
            channels: config.channels,
            data,
        });
        records.push(AnnotationRecord {
            motion_id: id,
            step_texts: t.steps.iter().map(|(s, _)| s.clone()).collect(),
            task_text: t.task_text.clone(),
            scene_text: scene_text.clone(),
            segment_index: seg_idx,
            scene_id: scene_id.clone(),
            family: config.families[t.family].name.clone(),
            step_frame_ranges: ranges,
            text_only: false,
        });
    }
    SceneDraft { motions, records }
}

// ── AMOT binary format ──────────────────────────────────────────────
// magic "AMOT", u32 version=1, u32 T, u32 c, u32 fps, then T*c LE f32.

pub fn write_motion(path: &Path, m: &MotionSequence) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(20 + m.data.len() * 4);
    buf.extend_from_slice(AMOT_MAGIC);
    buf.extend_from_slice(&AMOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.channels as u32).to_le_bytes());
    buf.extend_from_slice(&m.fps.to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, CorpusError> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 20];
    let got = read_up_to(&mut f, &mut header)?;
    if got < 4 {
        return Err(CorpusError::Truncated { expected: 20, got });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&header[0..4]);
    if &magic != AMOT_MAGIC {
        return Err(CorpusError::BadMagic(magic));
    }
    if got < 20 {
        return Err(CorpusError::Truncated { expected: 20, got });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != AMOT_VERSION {
        return Err(CorpusError::UnsupportedVersion(version));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let fps = u32::from_le_bytes(header[16..20].try_into().unwrap());
    let expected = frames * channels * 4;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(CorpusError::Truncated { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(CorpusError::SizeMismatch { expected, got: payload.len() });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CorpusError::NonFinite);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(MotionSequence { id, fps, channels, data })
}

fn read_up_to(f: &mut fs::File, buf: &mut [u8]) -> Result<usize, CorpusError> {
    let mut got = 0;
    while got < buf.len() {
        let n = f.read(&mut buf[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    Ok(got)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a corpus directory written by `generate_corpus` (or externally
/// converted data in the same formats).
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(dir.join("annotations.jsonl"))?;
    let mut corpus = Corpus::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line)?;
        if !rec.text_only {
            let m = read_motion(&dir.join("motions").join(format!("{}.amot", rec.motion_id)))?;
            corpus.by_id.insert(m.id.clone(), corpus.motions.len());
            corpus.motions.push(m);
        }
        corpus.records.push(rec);
    }
    Ok(corpus)
}

/// Scene-level train/val/test split: every segment of a scene lands in the
/// same split; splits are disjoint and exhaustive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_corpus(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit, CorpusError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidConfig(format!("ratios sum to {sum}, expected 1")));
    }
    let mut scenes = corpus.scene_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..scenes.len()).rev() {
        let j = rng.gen_range(0..=i);
        scenes.swap(i, j);
    }
    let n = scenes.len();
    let n_train = (n as f64 * ratios.0).round() as usize;
    let n_val = (n as f64 * ratios.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let split = CorpusSplit {
        train: scenes[..n_train].to_vec(),
        val: scenes[n_train..n_train + n_val].to_vec(),
        test: scenes[n_train + n_val..].to_vec(),
    };
    if split.train.is_empty() {
        return Err(CorpusError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(CorpusError::EmptySplit("val"));
    }
    if split.test.is_empty() {
        return Err(CorpusError::EmptySplit("test"));
    }
    Ok(split)
}

/// Per-channel normalization statistics (unit variance features).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn compute(motions: &[&MotionSequence]) -> FeatureStats {
        let c = motions[0].channels;
        let mut mean = vec![0.0f64; c];
        let mut count = 0usize;
        for m in motions {
            for frame in m.data.chunks(c) {
                for (acc, &v) in mean.iter_mut().zip(frame) {
                    *acc += v as f64;
                }
            }
            count += m.frames();
        }
        for v in &mut mean {
            *v /= count as f64;
        }
        let mut var = vec![0.0f64; c];
        for m in motions {
            for frame in m.data.chunks(c) {
                for ((acc, &v), &mu) in var.iter_mut().zip(frame).zip(&mean) {
                    let d = v as f64 - mu;
                    *acc += d * d;
                }
            }
        }
        for v in &mut var {
            *v = (*v / count as f64).sqrt().max(1e-6);
        }
        FeatureStats {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            std: var.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn normalize(&self, m: &MotionSequence) -> MotionSequence {
        let c = m.channels;
        let mut out = m.clone();
        for frame in out.data.chunks_mut(c) {
            for ((v, &mu), &sd) in frame.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn denormalize(&self, m: &MotionSequence) -> MotionSequence {
        let c = m.channels;
        let mut out = m.clone();
        for frame in out.data.chunks_mut(c) {
            for ((v, &mu), &sd) in frame.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }
}
