//! Automatic annotation pipeline: iterate fixed-length segments, acquire a
//! content description per segment (mock stand-in or a visual-LLM endpoint
//! speaking the chat wire shape), then hierarchically extract step, task,
//! and scene descriptions over multiple sampling rounds, and package the
//! result in the corpus annotation format.
//!
//! Mock mode is fully deterministic and offline: stand-in descriptions are
//! echoed verbatim, steps come from a sentence splitter, tasks from
//! first-step truncation, and scenes from an order-preserving
//! concatenation summary.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatClient, ChatError, ChatMessage};
use crate::corpus::AnnotationRecord;
use crate::par;

static TEMPLATES: Lazy<(u32, HashMap<&'static str, &'static str>)> = Lazy::new(|| {
    let raw = include_str!("annotate_templates.txt");
    let mut lines = raw.lines();
    let version: u32 = lines
        .next()
        .and_then(|l| l.strip_prefix("version "))
        .and_then(|v| v.parse().ok())
        .expect("template file must start with 'version N'");
    let mut map = HashMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (name, text) = line.split_once('|').expect("template line missing '|'");
        map.insert(name.trim(), text.trim().to_string().leak() as &'static str);
    }
    (version, map)
});

pub fn template_version() -> u32 {
    TEMPLATES.0
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("segment '{id}' description failed after retries: {message}")]
    DescribeFailed { id: String, message: String },
    #[error("segment '{0}' has empty content")]
    EmptyContent(String),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What a segment handle yields: a stand-in description (mock mode) or an
/// opaque media reference resolved by a visual-LLM endpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SegmentContent {
    Description(String),
    MediaRef(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentHandle {
    pub id: String,
    pub content: SegmentContent,
}

/// Ordered fixed-length segments of one video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentSource {
    pub video_id: String,
    pub segments: Vec<SegmentHandle>,
}

/// Fixed-length segmentation: 10-second chunks (the final chunk keeps the
/// remainder).
pub const SEGMENT_SECONDS: usize = 10;

pub fn segment_ranges(total_frames: usize, fps: u32) -> Vec<(usize, usize)> {
    let chunk = SEGMENT_SECONDS * fps as usize;
    let mut out = Vec::new();
    let mut start = 0;
    while start < total_frames {
        let end = (start + chunk).min(total_frames);
        out.push((start, end));
        start = end;
    }
    out
}

impl SegmentSource {
    /// Mock-mode source from pre-extracted stand-in descriptions.
    pub fn from_descriptions(video_id: &str, descriptions: &[String]) -> Self {
        SegmentSource {
            video_id: video_id.to_string(),
            segments: descriptions
                .iter()
                .enumerate()
                .map(|(i, d)| SegmentHandle {
                    id: format!("{video_id}_{i:02}"),
                    content: SegmentContent::Description(d.clone()),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotateConfig {
    pub client: ChatClient,
    /// Step-extraction rounds per segment.
    pub step_rounds: usize,
    /// Scene-estimation rounds per video.
    pub scene_rounds: usize,
    /// Word cap on content descriptions.
    pub max_words: usize,
    /// Concurrent segments.
    pub parallelism: usize,
}

impl AnnotateConfig {
    pub fn mock() -> Self {
        AnnotateConfig {
            client: ChatClient::mock(Default::default()),
            step_rounds: 6,
            scene_rounds: 20,
            max_words: 500,
            parallelism: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub segment_id: String,
    /// None when description acquisition failed (recorded in `failure`).
    pub content: Option<String>,
    pub failure: Option<String>,
    /// One step list per round; each round yields 1..=5 steps.
    pub step_rounds: Vec<Vec<String>>,
    /// One task description per round.
    pub task_rounds: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchicalAnnotation {
    pub video_id: String,
    pub segments: Vec<SegmentAnnotation>,
    /// One scene description per round, ordered.
    pub scenes: Vec<String>,
}

fn cap_words(text: &str, max_words: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max_words {
        text.trim().to_string()
    } else {
        words[..max_words].join(" ")
    }
}

/// Build the describe prompt (golden-testable).
pub fn describe_prompt(media_ref: &str, max_words: usize) -> Vec<ChatMessage> {
    let instr = TEMPLATES.1["DESCRIBE"].replace("{max_words}", &max_words.to_string());
    vec![
        ChatMessage::system("You describe human motion videos."),
        ChatMessage::user(format!("{instr}\nSegment: {media_ref}")),
    ]
}

/// Content description for one segment. Mock stand-ins are returned
/// verbatim (word-capped); media references go to the client with 2
/// attempts and exponential backoff.
pub fn describe_segment(
    handle: &SegmentHandle,
    cfg: &AnnotateConfig,
) -> Result<String, AnnotateError> {
    let text = match &handle.content {
        SegmentContent::Description(d) => d.clone(),
        SegmentContent::MediaRef(r) => cfg
            .client
            .complete_with_retry(
                &describe_prompt(r, cfg.max_words),
                2,
                Duration::from_millis(250),
            )
            .map_err(|e| AnnotateError::DescribeFailed {
                id: handle.id.clone(),
                message: e.to_string(),
            })?,
    };
    if text.trim().is_empty() {
        return Err(AnnotateError::EmptyContent(handle.id.clone()));
    }
    Ok(cap_words(&text, cfg.max_words))
}

fn split_sentences(content: &str) -> Vec<String> {
    content
        .split(|c| c == '.' || c == ';' || c == '\n')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Step prompt for one sampling round (golden-testable).
pub fn steps_prompt(content: &str, round: usize) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("You extract step-by-step motion descriptions."),
        ChatMessage::user(format!(
            "{}\nSampling round {round}.\nContent: {content}",
            TEMPLATES.1["STEPS"]
        )),
    ]
}

/// Step lists for `rounds` independent sampling rounds. Mock mode splits
/// the content into sentences deterministically.
pub fn extract_steps(
    content: &str,
    cfg: &AnnotateConfig,
    rounds: usize,
) -> Result<Vec<Vec<String>>, AnnotateError> {
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let steps = if cfg.client.is_mock() {
            split_sentences(content)
        } else {
            let reply = cfg.client.complete_with_retry(
                &steps_prompt(content, round),
                2,
                Duration::from_millis(250),
            )?;
            split_sentences(&reply)
        };
        let mut steps: Vec<String> = steps.into_iter().take(5).collect();
        if steps.is_empty() {
            steps.push(content.trim().to_string());
        }
        out.push(steps);
    }
    Ok(out)
}

/// Task summary of one round's steps. Mock mode truncates the first step.
pub fn summarize_task(steps: &[String], cfg: &AnnotateConfig) -> Result<String, AnnotateError> {
    assert!(!steps.is_empty(), "summarize_task over empty steps");
    if cfg.client.is_mock() {
        return Ok(cap_words(&steps[0], 12));
    }
    let messages = vec![
        ChatMessage::system("You summarize motion steps into one task."),
        ChatMessage::user(format!("{}\nSteps: {}", TEMPLATES.1["TASK"], steps.join("; "))),
    ];
    Ok(cfg.client.complete_with_retry(&messages, 2, Duration::from_millis(250))?)
}

/// Scene prompt: tasks appear in input order (golden-testable).
pub fn scene_prompt(tasks: &[String], round: usize) -> Vec<ChatMessage> {
    let listed: String = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    vec![
        ChatMessage::system("You summarize ordered tasks into a scene."),
        ChatMessage::user(format!(
            "{}\nSampling round {round}.\nTasks in order:\n{listed}",
            TEMPLATES.1["SCENE"]
        )),
    ]
}

/// Scene descriptions over `rounds` rounds, preserving task order. Mock
/// mode emits a deterministic concatenation summary.
pub fn estimate_scene(
    tasks: &[String],
    cfg: &AnnotateConfig,
    rounds: usize,
) -> Result<Vec<String>, AnnotateError> {
    assert!(!tasks.is_empty(), "estimate_scene over empty tasks");
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let scene = if cfg.client.is_mock() {
            format!("a scene where {}", tasks.join(", then "))
        } else {
            cfg.client.complete_with_retry(
                &scene_prompt(tasks, round),
                2,
                Duration::from_millis(250),
            )?
        };
        out.push(scene);
    }
    Ok(out)
}

/// Annotate one video: segments run concurrently (bounded), the per-video
/// scene estimation waits for all segments. Per-segment failures are
/// recorded and do not stop the remaining segments.
pub fn annotate_video(
    source: &SegmentSource,
    cfg: &AnnotateConfig,
) -> Result<HierarchicalAnnotation, AnnotateError> {
    let segments: Vec<SegmentAnnotation> =
        par::map_bounded(&source.segments, cfg.parallelism, |handle| {
            let content = match describe_segment(handle, cfg) {
                Ok(c) => c,
                Err(e) => {
                    return SegmentAnnotation {
                        segment_id: handle.id.clone(),
                        content: None,
                        failure: Some(e.to_string()),
                        step_rounds: Vec::new(),
                        task_rounds: Vec::new(),
                    }
                }
            };
            match extract_steps(&content, cfg, cfg.step_rounds) {
                Ok(step_rounds) => {
                    let task_rounds: Result<Vec<String>, AnnotateError> =
                        step_rounds.iter().map(|s| summarize_task(s, cfg)).collect();
                    match task_rounds {
                        Ok(task_rounds) => SegmentAnnotation {
                            segment_id: handle.id.clone(),
                            content: Some(content),
                            failure: None,
                            step_rounds,
                            task_rounds,
                        },
                        Err(e) => SegmentAnnotation {
                            segment_id: handle.id.clone(),
                            content: Some(content),
                            failure: Some(e.to_string()),
                            step_rounds: Vec::new(),
                            task_rounds: Vec::new(),
                        },
                    }
                }
                Err(e) => SegmentAnnotation {
                    segment_id: handle.id.clone(),
                    content: Some(content),
                    failure: Some(e.to_string()),
                    step_rounds: Vec::new(),
                    task_rounds: Vec::new(),
                },
            }
        });

    // barrier: scene estimation uses first-round tasks in segment order
    let ordered_tasks: Vec<String> = segments
        .iter()
        .filter_map(|s| s.task_rounds.first().cloned())
        .collect();
    let scenes = if ordered_tasks.is_empty() {
        Vec::new()
    } else {
        estimate_scene(&ordered_tasks, cfg, cfg.scene_rounds)?
    };

    Ok(HierarchicalAnnotation { video_id: source.video_id.clone(), segments, scenes })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template_version: u32,
    pub step_rounds: usize,
    pub scene_rounds: usize,
    pub mock: bool,
    pub videos: usize,
    pub records: usize,
}

/// Package annotations as corpus-compatible text-only records
/// (one record per segment × step round) plus a provenance manifest.
pub fn package_dataset(
    annotations: &[HierarchicalAnnotation],
    cfg: &AnnotateConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, AnnotateError> {
    std::fs::create_dir_all(out_dir)?;
    let mut lines = String::new();
    let mut records = 0usize;
    for ann in annotations {
        let scene_text = ann.scenes.first().cloned().unwrap_or_default();
        for (si, seg) in ann.segments.iter().enumerate() {
            for (round, steps) in seg.step_rounds.iter().enumerate() {
                let rec = AnnotationRecord {
                    motion_id: format!("{}_r{round}", seg.segment_id),
                    step_texts: steps.clone(),
                    task_text: seg.task_rounds.get(round).cloned().unwrap_or_default(),
                    scene_text: scene_text.clone(),
                    segment_index: si,
                    scene_id: ann.video_id.clone(),
                    family: String::new(),
                    step_frame_ranges: Vec::new(),
                    text_only: true,
                };
                lines.push_str(&serde_json::to_string(&rec)?);
                lines.push('\n');
                records += 1;
            }
        }
    }
    std::fs::write(out_dir.join("annotations.jsonl"), &lines)?;
    let manifest = DatasetManifest {
        template_version: template_version(),
        step_rounds: cfg.step_rounds,
        scene_rounds: cfg.scene_rounds,
        mock: cfg.client.is_mock(),
        videos: annotations.len(),
        records,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
