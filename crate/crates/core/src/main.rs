//! Command-line entry point wiring every module together: data generation,
//! tokenizer and language-model training, the closed-loop pipeline,
//! evaluation metrics, annotation, and gradient checks.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use motionlm::annotate::{annotate_video, package_dataset, AnnotateConfig, SegmentSource};
use motionlm::config::AppConfig;
use motionlm::corpus::{generate_corpus, load_corpus, split_corpus, Corpus, CorpusConfig};
use motionlm::lm::{lm_grad_check, LM};
use motionlm::metrics::{
    bleu, cider, diversity, fid, rouge_l, CiderStats, FeatureExtractor, Pooling,
};
use motionlm::pipeline::{junction_discontinuity, Pipeline};
use motionlm::tasks::MixWeights;
use motionlm::tokenizer::{train_vqvae, vq_grad_check, VQConfig, VQTrainOptions, VQVae};
use motionlm::trainer::{self, prepare_instances};

#[derive(Parser)]
#[command(
    name = "motionlm",
    about = "Desk-scale unified motion-language modeling toolkit",
    version
)]
struct Cli {
    /// Path to a TOML config file. Defaults apply when omitted; environment
    /// variables of the form MOTIONLM__section__field override leaves.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Emit machine-readable JSON on stdout instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,

    /// Output directory for artifacts (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic motion-language corpus.
    GenData {
        /// Number of scenes to generate.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train the motion tokenizer on the corpus.
    TrainVqvae {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Jointly train the language model over all instruction tasks.
    TrainLm {
        #[arg(long)]
        steps: Option<usize>,
        /// Number of training instances to draw from the corpus.
        #[arg(long, default_value_t = 2000)]
        instances: usize,
    },
    /// Run the closed-loop generation pipeline on a scene description.
    RunPipeline {
        /// Scene text; defaults to the first corpus scene.
        #[arg(long)]
        scene: Option<String>,
        /// Also export the stitched long motion as CSV for external plotting.
        #[arg(long)]
        dump_csv: bool,
    },
    /// Compute an evaluation metric.
    Eval {
        #[arg(long, value_parser = ["bleu1", "bleu4", "rouge-l", "cider", "fid", "div"])]
        metric: String,
        /// Candidate text (text metrics).
        #[arg(long)]
        candidate: Option<String>,
        /// Reference text(s) (text metrics); repeatable.
        #[arg(long)]
        reference: Vec<String>,
        /// Compare one feature set against itself (fid).
        #[arg(long = "self")]
        self_set: bool,
    },
    /// Run the hierarchical annotation pipeline (mock backend by default).
    Annotate {
        /// File with one segment description per line; defaults to corpus
        /// segment descriptions.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long, default_value = "video_00")]
        video_id: String,
    },
    /// Verify analytic gradients against finite differences (64-bit).
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successful outputs; everything else
            // is a usage error.
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out).unwrap());
            } else if let Some(text) = out.get("human").and_then(|v| v.as_str()) {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::from_toml("", std::env::vars())?,
    };
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    eprintln!("config hash: {}", cfg.hash());
    Ok(cfg)
}

fn load_corpus_at(cfg: &AppConfig) -> anyhow::Result<Corpus> {
    load_corpus(&cfg.paths.corpus_dir).map_err(|e| {
        anyhow::anyhow!(
            "failed to load corpus from {} (run gen-data first): {e}",
            cfg.paths.corpus_dir.display()
        )
    })
}

fn vq_path(cfg: &AppConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("vqvae.mlck")
}

fn lm_path(cfg: &AppConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("lm.mlck")
}

fn run(cli: &Cli) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenData { scenes } => {
            let mut ccfg = CorpusConfig::default();
            ccfg.channels = cfg.vq.channels;
            if let Some(n) = scenes {
                ccfg.scenes = *n;
            }
            let corpus = generate_corpus(&ccfg, cfg.seed, &cfg.paths.corpus_dir)?;
            Ok(json!({
                "config_hash": cfg.hash(),
                "scenes": ccfg.scenes,
                "motions": corpus.motions.len(),
                "records": corpus.records.len(),
                "out": cfg.paths.corpus_dir,
                "human": format!(
                    "generated {} motions / {} records across {} scenes into {}",
                    corpus.motions.len(), corpus.records.len(), ccfg.scenes,
                    cfg.paths.corpus_dir.display()
                ),
            }))
        }
        Cmd::TrainVqvae { steps } => {
            let corpus = load_corpus_at(&cfg)?;
            let split = split_corpus(&corpus, (0.8, 0.1, 0.1), cfg.seed)?;
            let train_refs = scene_motions(&corpus, &split.train);
            let mut opt = VQTrainOptions::default();
            if let Some(s) = steps {
                opt.steps = *s;
            }
            let (vq, report) = train_vqvae(&train_refs, cfg.vq.clone(), &opt, cfg.seed)?;
            std::fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
            let path = vq_path(&cfg);
            vq.save(&path)?;
            let held_out_mse = held_out_mse(&vq, &corpus, &split.val)?;
            Ok(json!({
                "config_hash": cfg.hash(),
                "steps": opt.steps,
                "final_loss": report.loss_curve.last(),
                "perplexity": report.perplexity,
                "held_out_mse": held_out_mse,
                "diverged_at": report.diverged_at,
                "checkpoint": path,
                "human": format!(
                    "tokenizer trained ({} steps): perplexity {:.2}, held-out MSE {:.5}, saved to {}",
                    opt.steps, report.perplexity, held_out_mse, path.display()
                ),
            }))
        }
        Cmd::TrainLm { steps, instances } => {
            let corpus = load_corpus_at(&cfg)?;
            let vq = VQVae::<f32>::load(&vq_path(&cfg))?;
            let mix = MixWeights::default();
            let all = prepare_instances(&corpus, &vq, &mix, *instances, cfg.seed)?;
            let n_val = (all.len() / 10).max(1);
            let (val, train) = all.split_at(n_val);
            // The motion head and adapter must match the tokenizer that
            // produced the training tokens, whatever the config file says.
            let mut lm_cfg = cfg.lm.clone();
            lm_cfg.motion_vocab = vq.cfg.codebook_size;
            lm_cfg.code_dim = vq.cfg.code_dim;
            let mut lm = LM::<f32>::new(lm_cfg, cfg.seed)?;
            lm.set_codebook(vq.codebook());
            let mut tcfg = cfg.train.clone();
            if let Some(s) = steps {
                tcfg.steps = *s;
            }
            tcfg.checkpoint_dir = Some(cfg.paths.checkpoint_dir.clone());
            let report = trainer::train(&mut lm, train, val, &tcfg)?;
            let path = lm_path(&cfg);
            lm.save(&path)?;
            std::fs::create_dir_all(&cfg.paths.out_dir)?;
            trainer::write_report(&cfg.paths.out_dir, &report)?;
            Ok(json!({
                "config_hash": cfg.hash(),
                "steps": tcfg.steps,
                "train_instances": train.len(),
                "val_instances": val.len(),
                "best_step": report.best_step,
                "best_val_loss": report.best_val_loss,
                "final_total_loss": report.total_curve.last(),
                "checkpoint": path,
                "human": format!(
                    "language model trained ({} steps): best val loss {} at step {}, saved to {}",
                    tcfg.steps,
                    report.best_val_loss.map(|v| format!("{v:.4}")).unwrap_or("n/a".into()),
                    report.best_step.map(|s| s.to_string()).unwrap_or("n/a".into()),
                    path.display()
                ),
            }))
        }
        Cmd::RunPipeline { scene, dump_csv } => {
            let vq = VQVae::<f32>::load(&vq_path(&cfg))?;
            let lm = LM::<f32>::load(&lm_path(&cfg))?;
            let scene_text = match scene {
                Some(s) => s.clone(),
                None => {
                    let corpus = load_corpus_at(&cfg)?;
                    let sid = corpus
                        .scene_ids()
                        .into_iter()
                        .next()
                        .ok_or_else(|| anyhow::anyhow!("corpus has no scenes"))?;
                    corpus
                        .records_for_scene(&sid)
                        .first()
                        .map(|r| r.scene_text.clone())
                        .ok_or_else(|| anyhow::anyhow!("scene {sid} has no records"))?
                }
            };
            let pipe = Pipeline::new(&lm, &vq);
            let trace = pipe.run_full(&scene_text, &cfg.pipeline)?;
            std::fs::create_dir_all(&cfg.paths.out_dir)?;
            let trace_path = cfg.paths.out_dir.join("trace.json");
            std::fs::write(&trace_path, trace.to_json())?;
            let mut csv_path = None;
            if *dump_csv {
                let p = cfg.paths.out_dir.join("long_motion.csv");
                write_motion_csv(&p, &trace.long_motion)?;
                csv_path = Some(p);
            }
            let junctions: Vec<f64> = trace
                .segments
                .windows(2)
                .enumerate()
                .map(|(i, _)| {
                    let boundary: usize =
                        trace.segments[..=i].iter().map(|s| s.motion.frames()).sum::<usize>()
                            + trace.transitions[..=i]
                                .iter()
                                .map(|t| t.tokens.len() * vq.cfg.downsample)
                                .sum::<usize>();
                    junction_discontinuity(&trace.long_motion, boundary) as f64
                })
                .collect();
            Ok(json!({
                "config_hash": cfg.hash(),
                "scene": scene_text,
                "tasks": trace.tasks.len(),
                "steps": trace.segments.len(),
                "transitions": trace.transitions.len(),
                "total_frames": trace.total_frames(),
                "failures": trace.failures.len(),
                "mean_junction_discontinuity":
                    junctions.iter().sum::<f64>() / junctions.len().max(1) as f64,
                "cycle_step": trace.cycle_step,
                "trace": trace_path,
                "csv": csv_path,
                "human": format!("{}\ntrace written to {}", trace.summary(), trace_path.display()),
            }))
        }
        Cmd::Eval { metric, candidate, reference, self_set } => {
            eval_cmd(&cfg, metric, candidate.as_deref(), reference, *self_set)
        }
        Cmd::Annotate { descriptions, video_id } => {
            let descs: Vec<String> = match descriptions {
                Some(p) => std::fs::read_to_string(p)?
                    .lines()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect(),
                None => {
                    let corpus = load_corpus_at(&cfg)?;
                    corpus.records.iter().take(20).map(|r| r.step_texts.join(". ")).collect()
                }
            };
            if descs.is_empty() {
                anyhow::bail!("no segment descriptions to annotate");
            }
            let source = SegmentSource::from_descriptions(video_id, &descs);
            let acfg = AnnotateConfig::mock();
            let ann = annotate_video(&source, &acfg)?;
            std::fs::create_dir_all(&cfg.paths.out_dir)?;
            let manifest = package_dataset(&[ann], &acfg, &cfg.paths.out_dir)?;
            Ok(json!({
                "config_hash": cfg.hash(),
                "video_id": video_id,
                "segments": descs.len(),
                "records": manifest.records,
                "mock": manifest.mock,
                "out": cfg.paths.out_dir,
                "human": format!(
                    "annotated {} segments into {} records ({}), packaged in {}",
                    descs.len(), manifest.records,
                    if manifest.mock { "mock backend" } else { "chat backend" },
                    cfg.paths.out_dir.display()
                ),
            }))
        }
        Cmd::Gradcheck => gradcheck_cmd(&cfg),
    }
}

fn scene_motions<'a>(
    corpus: &'a Corpus,
    scene_ids: &[String],
) -> Vec<&'a motionlm::corpus::MotionSequence> {
    scene_ids
        .iter()
        .flat_map(|sid| corpus.records_for_scene(sid))
        .filter(|r| !r.text_only)
        .filter_map(|r| corpus.motion(&r.motion_id))
        .collect()
}

fn held_out_mse(vq: &VQVae<f32>, corpus: &Corpus, scene_ids: &[String]) -> anyhow::Result<f64> {
    let stats = vq.stats();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for m in scene_motions(corpus, scene_ids) {
        let tokens = vq.tokenize(m)?;
        let recon = vq.detokenize(&tokens)?;
        let mn = stats.normalize(m);
        let rn = stats.normalize(&recon);
        let frames = mn.frames().min(rn.frames());
        for t in 0..frames {
            for (a, b) in mn.frame(t).iter().zip(rn.frame(t)) {
                total += ((a - b) as f64).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        anyhow::bail!("no held-out motions to score");
    }
    Ok(total / count as f64)
}

fn write_motion_csv(
    path: &Path,
    m: &motionlm::corpus::MotionSequence,
) -> anyhow::Result<()> {
    let mut out = String::new();
    out.push_str("frame");
    for c in 0..m.channels {
        out.push_str(&format!(",ch{c}"));
    }
    out.push('\n');
    for t in 0..m.frames() {
        out.push_str(&t.to_string());
        for v in m.frame(t) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn eval_cmd(
    cfg: &AppConfig,
    metric: &str,
    candidate: Option<&str>,
    reference: &[String],
    self_set: bool,
) -> anyhow::Result<serde_json::Value> {
    let text_metric = |name: &str, score: f64| {
        json!({
            "config_hash": cfg.hash(),
            "metric": name,
            "score": score,
            "human": format!("{name}: {score:.6}"),
        })
    };
    match metric {
        "bleu1" | "bleu4" | "rouge-l" | "cider" => {
            let cand = candidate
                .ok_or_else(|| anyhow::anyhow!("--candidate is required for {metric}"))?;
            if reference.is_empty() {
                anyhow::bail!("at least one --reference is required for {metric}");
            }
            let refs: Vec<&str> = reference.iter().map(|s| s.as_str()).collect();
            let score = match metric {
                "bleu1" => bleu(cand, &refs, 1)?,
                "bleu4" => bleu(cand, &refs, 4)?,
                "rouge-l" => rouge_l(cand, refs[0]),
                _ => {
                    let stats = CiderStats::from_corpus(&refs);
                    cider(cand, &refs, &stats)?
                }
            };
            Ok(text_metric(metric, score))
        }
        "fid" | "div" => {
            let corpus = load_corpus_at(cfg)?;
            let vq = match VQVae::<f32>::load(&vq_path(cfg)) {
                Ok(v) => v,
                // An untrained extractor still defines a valid feature space
                // for self-comparison and diversity.
                Err(_) => {
                    let mut v = VQVae::<f32>::new(cfg.vq.clone(), cfg.seed)?;
                    let refs: Vec<&_> = corpus.motions.iter().collect();
                    v.set_stats(&motionlm::corpus::FeatureStats::compute(&refs));
                    v
                }
            };
            let ex = FeatureExtractor { vq: &vq, pooling: Pooling::Mean };
            let refs: Vec<&_> = corpus.motions.iter().collect();
            let feats = ex.extract_all(&refs)?;
            if metric == "div" {
                let score = diversity(&feats, 100, cfg.seed)?;
                return Ok(text_metric("div", score));
            }
            let score = if self_set {
                fid(&feats, &feats)?
            } else {
                let half = feats.len() / 2;
                fid(&feats[..half], &feats[half..])?
            };
            Ok(text_metric("fid", score))
        }
        other => anyhow::bail!("unknown metric '{other}'"),
    }
}

fn gradcheck_cmd(cfg: &AppConfig) -> anyhow::Result<serde_json::Value> {
    use motionlm::corpus::MotionSequence;
    use motionlm::lm::{LMConfig, MixedStream, TEXT_VOCAB};

    let vq_cfg = VQConfig {
        channels: 4,
        code_dim: 5,
        downsample: 2,
        codebook_size: 8,
        res_blocks: 1,
        width: 6,
        ..cfg.vq.clone()
    };
    let frames = 8;
    let data: Vec<f32> = (0..frames * vq_cfg.channels)
        .map(|i| ((i as f32) * 0.37).sin())
        .collect();
    let motion = MotionSequence {
        id: "gradcheck".into(),
        fps: 20,
        channels: vq_cfg.channels,
        data,
    };
    let vq_report = vq_grad_check(&vq_cfg, &motion, cfg.seed, 1e-5, 1e-5)?;

    let lm_cfg = LMConfig {
        dim: 8,
        enc_layers: 1,
        dec_layers: 2,
        heads: 2,
        ffn: 16,
        text_vocab: TEXT_VOCAB,
        motion_vocab: 8,
        code_dim: 5,
        max_len: 32,
        dropout: 0.0,
    };
    let mut cond = MixedStream::new();
    cond.push_text("go");
    let mut target = MixedStream::new();
    target.push_motion_span(&[1, 3, 5]);
    target.push_text("ok");
    let lm_report = lm_grad_check(&lm_cfg, &cond, &target, cfg.seed, 1e-5, 1e-5)?;

    let ok = vq_report.passed() && lm_report.passed();
    let human = format!(
        "vq gradcheck: max rel err {:.2e} ({})\nlm gradcheck: max rel err {:.2e} ({})",
        vq_report.max_rel_err,
        if vq_report.passed() { "pass" } else { "FAIL" },
        lm_report.max_rel_err,
        if lm_report.passed() { "pass" } else { "FAIL" },
    );
    if !ok {
        anyhow::bail!("gradient check failed:\n{human}");
    }
    Ok(json!({
        "config_hash": cfg.hash(),
        "vq_max_rel_err": vq_report.max_rel_err,
        "lm_max_rel_err": lm_report.max_rel_err,
        "passed": true,
        "human": human,
    }))
}
