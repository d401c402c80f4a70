//! Evaluation metrics: linguistic (BLEU-1/4, ROUGE-L, CIDEr, embedding
//! cosine similarity), motion distribution (FID, Diversity, Multimodality)
//! over a pluggable feature extractor, the judge-based coherence score,
//! and the cycle-consistency scorer.
//!
//! Every metric is a pure function of its inputs plus an explicit seed
//! where sampling is involved. Degenerate inputs (empty texts, zero-norm
//! vectors) score a defined zero instead of erroring, so downstream
//! pipelines never fall over on an empty generation.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::{ChatClient, ChatError, ChatMessage};
use crate::corpus::MotionSequence;
use crate::lm::LM;
use crate::par;
use crate::tokenizer::{TokenizerError, VQVae};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("n-gram order must be >= 1")]
    InvalidOrder,
    #[error("corpus statistics are empty")]
    EmptyStats,
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("all judge replies were unparseable")]
    AllRepliesUnparseable,
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub count: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, count: usize, config: &str) -> Self {
        assert!(value.is_finite(), "metric value must be finite");
        assert!(count > 0, "metric sample count must be positive");
        let mut h = Sha256::new();
        h.update(config.as_bytes());
        let hash = format!("{:x}", h.finalize());
        MetricReport { name: name.into(), value, count, config_hash: hash[..16].to_string() }
    }
}

// ── text tokenization and n-grams ──────────────────────────────────

/// Lowercased whitespace tokens with punctuation trimmed from the edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ── BLEU ────────────────────────────────────────────────────────────

/// Clipped n-gram precision with geometric mean over orders 1..=n and the
/// closest-reference brevity penalty. Empty candidate scores zero.
pub fn bleu(candidate: &str, references: &[&str], n: usize) -> Result<f64, MetricError> {
    if n < 1 {
        return Err(MetricError::InvalidOrder);
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if cand.is_empty() || refs.iter().all(|r| r.is_empty()) {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand_counts = ngram_counts(&cand, order);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut clipped = 0usize;
        for (gram, &c) in &cand_counts {
            let max_ref = refs
                .iter()
                .map(|r| ngram_counts(r, order).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += c.min(max_ref);
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    // closest reference length; ties go to the shorter reference
    let c_len = cand.len();
    let r_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c_len as i64).abs(), l))
        .unwrap();
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * precision)
}

// ── ROUGE-L ─────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence. Degenerate inputs score
/// zero.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

// ── CIDEr ───────────────────────────────────────────────────────────

/// Document-frequency statistics for CIDEr IDF weighting, computed over the
/// evaluation corpus (one document per reference sentence).
#[derive(Clone, Debug, Default)]
pub struct CiderStats {
    df: HashMap<Vec<String>, f64>,
    n_docs: usize,
    max_order: usize,
}

impl CiderStats {
    pub fn from_corpus(docs: &[&str]) -> Self {
        Self::from_corpus_with_order(docs, 4)
    }

    pub fn from_corpus_with_order(docs: &[&str], max_order: usize) -> Self {
        let mut df = HashMap::new();
        for doc in docs {
            let toks = tokenize(doc);
            for order in 1..=max_order {
                for gram in ngram_counts(&toks, order).into_keys() {
                    *df.entry(gram).or_insert(0.0) += 1.0;
                }
            }
        }
        CiderStats { df, n_docs: docs.len(), max_order }
    }

    fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0.0).max(1.0);
        (self.n_docs as f64).ln() - df.ln()
    }
}

// BTreeMap keeps summation order deterministic: HashMap iteration order
// varies per instance, which would make repeated scoring runs disagree in
// the last float bits.
fn tfidf_vec(stats: &CiderStats, tokens: &[String], order: usize) -> BTreeMap<Vec<String>, f64> {
    ngram_counts(tokens, order)
        .into_iter()
        .map(|(g, c)| {
            let idf = stats.idf(&g);
            (g, c as f64 * idf)
        })
        .collect()
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: TF-IDF n-gram cosine averaged over orders 1..=4 and references,
/// with the standard ×10 scaling.
pub fn cider(candidate: &str, references: &[&str], stats: &CiderStats) -> Result<f64, MetricError> {
    if stats.n_docs == 0 || stats.df.is_empty() {
        return Err(MetricError::EmptyStats);
    }
    let cand = tokenize(candidate);
    if cand.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for order in 1..=stats.max_order {
        let cv = tfidf_vec(stats, &cand, order);
        let mut per_ref = 0.0;
        for r in references {
            let rv = tfidf_vec(stats, &tokenize(r), order);
            per_ref += cosine(&cv, &rv);
        }
        total += per_ref / references.len() as f64;
    }
    Ok(10.0 * total / stats.max_order as f64)
}

// ── embedding similarity ────────────────────────────────────────────

pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Deterministic per-word hashed Gaussian embeddings, mean-pooled. A
/// dependency-free embedder for tests and offline scoring.
#[derive(Clone, Debug)]
pub struct WordHashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for WordHashEmbedder {
    fn default() -> Self {
        WordHashEmbedder { dim: 32, seed: 0 }
    }
}

impl TextEmbedder for WordHashEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let words = tokenize(text);
        let mut acc = vec![0.0; self.dim];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(w.as_bytes());
            let digest = h.finalize();
            let word_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(word_seed);
            let v = crate::numerics::Tensor::<f64>::randn(&[self.dim], 1.0, &mut rng);
            for (a, x) in acc.iter_mut().zip(v.data()) {
                *a += x;
            }
        }
        for a in &mut acc {
            *a /= words.len() as f64;
        }
        acc
    }
}

/// Mean-pooled learned byte embeddings from a model's text table.
pub struct LmEmbedder<'a>(pub &'a LM<f32>);

impl TextEmbedder for LmEmbedder<'_> {
    fn embed(&self, text: &str) -> Vec<f64> {
        let table = self.0.params.by_name("text_table").expect("text table").tensor.clone();
        let d = table.cols();
        let bytes = text.as_bytes();
        let mut acc = vec![0.0f64; d];
        if bytes.is_empty() {
            return acc;
        }
        for &b in bytes {
            let row = &table.data()[b as usize * d..(b as usize + 1) * d];
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        for a in &mut acc {
            *a /= bytes.len() as f64;
        }
        acc
    }
}

/// Cosine similarity of mean-pooled embeddings, in [-1, 1]. Zero-norm
/// inputs (e.g. empty text) score the defined zero.
pub fn embed_sim(candidate: &str, reference: &str, embedder: &dyn TextEmbedder) -> f64 {
    let a = embedder.embed(candidate);
    let b = embedder.embed(reference);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

// ── motion feature extraction ───────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
}

/// Pluggable feature extractor: mean-pooled pre-quantization encoder
/// embeddings from a frozen tokenizer. Any FID comparison must use the same
/// extractor instance for both sides.
pub struct FeatureExtractor<'a> {
    pub vq: &'a VQVae<f32>,
    pub pooling: Pooling,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(vq: &'a VQVae<f32>) -> Self {
        FeatureExtractor { vq, pooling: Pooling::Mean }
    }

    pub fn extract(&self, motion: &MotionSequence) -> Result<Vec<f64>, MetricError> {
        let z = self.vq.encode(motion)?;
        let (rows, cols) = (z.rows(), z.cols());
        let mut acc = vec![0.0f64; cols];
        for i in 0..rows {
            for (a, &x) in acc.iter_mut().zip(&z.data()[i * cols..(i + 1) * cols]) {
                *a += x as f64;
            }
        }
        for a in &mut acc {
            *a /= rows as f64;
        }
        Ok(acc)
    }

    pub fn extract_all(&self, motions: &[&MotionSequence]) -> Result<Vec<Vec<f64>>, MetricError> {
        let results = par::map_collect(motions, |m| self.extract(m));
        results.into_iter().collect()
    }
}

// ── FID ─────────────────────────────────────────────────────────────

fn mean_cov(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, &x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    (mu, cov)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d×d).
/// Returns (eigenvalues, eigenvectors as columns of a row-major matrix).
pub fn sym_eig(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..d).map(|i| m[i * d + i]).collect();
    (vals, v)
}

/// Symmetric PSD square root via eigendecomposition with eigenvalue
/// clamping at zero.
fn sym_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = sym_eig(a, d);
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = vecs[i * d + k];
            for j in 0..d {
                out[i * d + j] += s * vik * vecs[j * d + k];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ‖μa−μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2}), computed through the
/// symmetric form (Σa^{1/2} Σb Σa^{1/2})^{1/2} with eigenvalue clamping.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64, MetricError> {
    if features_a.is_empty() || features_b.is_empty() {
        return Err(MetricError::InsufficientSamples { need: 2, got: 0 });
    }
    let d = features_a[0].len();
    if features_b[0].len() != d {
        return Err(MetricError::DimensionMismatch(d, features_b[0].len()));
    }
    for set in [features_a, features_b] {
        if set.len() < d + 1 {
            return Err(MetricError::InsufficientSamples { need: d + 1, got: set.len() });
        }
    }
    let (mu_a, cov_a) = mean_cov(features_a);
    let (mu_b, cov_b) = mean_cov(features_b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let sa = sym_sqrt(&cov_a, d);
    let inner = matmul_sq(&matmul_sq(&sa, &cov_b, d), &sa, d);
    // symmetrize against accumulated round-off before the second sqrt
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = sym_eig(&sym, d);
    let tr_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

// ── Diversity / Multimodality ───────────────────────────────────────

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over `pairs` random disjoint pairs. Pairs are
/// drawn by repeatedly shuffling the index set and pairing adjacent
/// entries, so no sample appears twice within a round.
pub fn diversity(features: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64, MetricError> {
    if features.len() < 2 {
        return Err(MetricError::InsufficientSamples { need: 2, got: features.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..features.len()).collect();
    let mut sum = 0.0;
    let mut done = 0usize;
    while done < pairs {
        idx.shuffle(&mut rng);
        let mut i = 0;
        while i + 1 < idx.len() && done < pairs {
            sum += euclid(&features[idx[i]], &features[idx[i + 1]]);
            i += 2;
            done += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Multimodality: the diversity statistic computed within each condition's
/// sample set, averaged over conditions.
pub fn multimodality(
    per_condition: &[Vec<Vec<f64>>],
    pairs: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if per_condition.is_empty() {
        return Err(MetricError::InsufficientSamples { need: 1, got: 0 });
    }
    let mut sum = 0.0;
    for (i, set) in per_condition.iter().enumerate() {
        sum += diversity(set, pairs, seed.wrapping_add(i as u64))?;
    }
    Ok(sum / per_condition.len() as f64)
}

// ── judge protocol ──────────────────────────────────────────────────

pub const JUDGE_TEMPLATE_ID: &str = "coherence-forced-choice-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum JudgeBackend {
    /// Chat-completions judge (mock or HTTP, per the client).
    Chat(ChatClient),
    /// Rule-based offline judge: coherent iff condition and generation
    /// share at least one of the listed keywords.
    Keyword { keywords: Vec<String> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeClient {
    pub backend: JudgeBackend,
    pub template_id: String,
    /// Cap on concurrent requests for HTTP backends.
    pub max_in_flight: usize,
}

impl JudgeClient {
    pub fn new(backend: JudgeBackend) -> Self {
        JudgeClient { backend, template_id: JUDGE_TEMPLATE_ID.into(), max_in_flight: 4 }
    }

    pub fn prompt(&self, condition: &str, generation: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(
                "You assess whether a generated description matches its condition.",
            ),
            ChatMessage::user(format!(
                "Condition:\n{condition}\n\nGeneration:\n{generation}\n\nDoes the \
                 generation logically match the condition? Answer exactly COHERENT \
                 or INCOHERENT."
            )),
        ]
    }

    /// One judged pair: Some(true/false) on a parsed verdict, None when the
    /// reply failed to parse after one retry.
    fn judge_pair(&self, condition: &str, generation: &str) -> Result<Option<bool>, ChatError> {
        match &self.backend {
            JudgeBackend::Keyword { keywords } => {
                let c = condition.to_lowercase();
                let g = generation.to_lowercase();
                Ok(Some(keywords.iter().any(|k| {
                    let k = k.to_lowercase();
                    c.contains(&k) && g.contains(&k)
                })))
            }
            JudgeBackend::Chat(client) => {
                let messages = self.prompt(condition, generation);
                for _attempt in 0..2 {
                    let reply = client.complete_with_retry(
                        &messages,
                        2,
                        Duration::from_millis(200),
                    )?;
                    match parse_verdict(&reply) {
                        Some(v) => return Ok(Some(v)),
                        None => continue,
                    }
                }
                Ok(None)
            }
        }
    }
}

fn parse_verdict(reply: &str) -> Option<bool> {
    match reply.trim().to_ascii_uppercase().as_str() {
        "COHERENT" => Some(true),
        "INCOHERENT" => Some(false),
        _ => None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LcsReport {
    /// Mean coherence indicator over successfully judged pairs.
    pub score: f64,
    pub judged: usize,
    /// Pairs whose replies failed to parse after retry (excluded from N).
    pub failures: usize,
}

/// Logical coherence score: mean of per-pair indicators from the judge.
pub fn lcs_score(pairs: &[(String, String)], judge: &JudgeClient) -> Result<LcsReport, MetricError> {
    assert!(!pairs.is_empty(), "lcs_score over empty pair set");
    let verdicts = par::map_bounded(pairs, judge.max_in_flight, |(c, g)| judge.judge_pair(c, g));
    let mut coherent = 0usize;
    let mut judged = 0usize;
    let mut failures = 0usize;
    for v in verdicts {
        match v? {
            Some(true) => {
                coherent += 1;
                judged += 1;
            }
            Some(false) => judged += 1,
            None => failures += 1,
        }
    }
    if judged == 0 {
        return Err(MetricError::AllRepliesUnparseable);
    }
    Ok(LcsReport { score: coherent as f64 / judged as f64, judged, failures })
}

// ── cycle consistency ───────────────────────────────────────────────

/// Score index-aligned forward/backward text pairs with the full linguistic
/// metric set. CIDEr IDF statistics come from the forward texts. Returns
/// mean scores keyed by metric name.
pub fn cycle_scores(
    forward: &[String],
    backward: &[String],
    embedder: &dyn TextEmbedder,
) -> BTreeMap<String, f64> {
    assert_eq!(forward.len(), backward.len(), "cycle pairs must align");
    assert!(!forward.is_empty(), "cycle scoring over empty pair set");
    let docs: Vec<&str> = forward.iter().map(|s| s.as_str()).collect();
    let stats = CiderStats::from_corpus(&docs);
    // degenerate forward texts (no n-grams at all) make CIDEr undefined;
    // score it the defined zero
    let cider_ok = !stats.df.is_empty();
    let n = forward.len() as f64;
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (f, b) in forward.iter().zip(backward) {
        let refs = [f.as_str()];
        *sums.entry("bleu1".into()).or_default() += bleu(b, &refs, 1).unwrap();
        *sums.entry("bleu4".into()).or_default() += bleu(b, &refs, 4).unwrap();
        *sums.entry("rouge_l".into()).or_default() += rouge_l(b, f);
        *sums.entry("cider".into()).or_default() +=
            if cider_ok { cider(b, &refs, &stats).unwrap() } else { 0.0 };
        *sums.entry("embed_sim".into()).or_default() += embed_sim(b, f, embedder);
    }
    sums.into_iter().map(|(k, v)| (k, v / n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::MockRules;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    // hand-computed oracle table for the linguistic metrics
    #[test]
    fn linguistic_oracle_table() {
        let e1 = (-1.0f64).exp();
        // (candidate, reference, order, expected, tolerance)
        let bleu_cases: Vec<(&str, &str, usize, f64)> = vec![
            // identical -> 1
            ("the cat sat", "the cat sat", 1, 1.0),
            // clipped counts: "the" appears once in the reference -> 1/3
            ("the the the", "the cat sat", 1, 1.0 / 3.0),
            // perfect unigram precision, brevity penalty exp(1 - 4/2)
            ("a b", "a b c d", 1, e1),
            ("a b c d e", "a b c d e", 4, 1.0),
            // 4-gram precision zero -> geometric mean zero
            ("a b c d", "a b c x", 4, 0.0),
            // no bigram matches -> zero
            ("a b c", "a c b", 2, 0.0),
            ("a b a b", "a b a b", 2, 1.0),
            // p1 = 2/3 with equal lengths, BP = 1
            ("a b x", "a b y", 1, 2.0 / 3.0),
            // bigrams: cand {ab, bb}, ref has ab -> 1/2; unigrams a:1,b:2
            // matched (ref has b twice) -> 3/3; sqrt(1 * 1/2)
            ("a b b", "b a b", 2, 0.5f64.sqrt()),
        ];
        for (c, r, n, want) in bleu_cases {
            let got = bleu(c, &[r], n).unwrap();
            assert!((got - want).abs() < 1e-9, "bleu({c:?},{r:?},{n}) = {got}, want {want}");
        }

        let rouge_cases: Vec<(&str, &str, f64)> = vec![
            ("a b c d", "a b c d", 1.0),
            // LCS("a b c d", "a c b d") = 3 -> P = R = 3/4
            ("a b c d", "a c b d", 0.75),
            ("", "a b", 0.0),
            ("x y", "a b", 0.0),
            // LCS("a b", "a b c d") = 2: P = 1, R = 1/2 -> F = 2/3
            ("a b", "a b c d", 2.0 / 3.0),
        ];
        for (c, r, want) in rouge_cases {
            let got = rouge_l(c, r);
            assert!((got - want).abs() < 1e-9, "rouge_l({c:?},{r:?}) = {got}, want {want}");
        }

        // CIDEr trivial cases
        let corpus = vec!["a b c d e", "f g h i j", "k l m n o"];
        let stats = CiderStats::from_corpus(&corpus);
        // identical to the sole reference, all n-grams unique in corpus ->
        // cosine 1 at every order -> maximal 10.0
        let max = cider("a b c d e", &["a b c d e"], &stats).unwrap();
        assert!((max - 10.0).abs() < 1e-9, "{max}");
        // no shared n-grams -> 0
        let zero = cider("p q r s", &["a b c d e"], &stats).unwrap();
        assert!(zero.abs() < 1e-12);
        assert!(matches!(
            cider("a", &["a"], &CiderStats::default()),
            Err(MetricError::EmptyStats)
        ));
    }

    #[test]
    fn bleu_matches_independent_implementation_on_fuzzed_pairs() {
        // naive second implementation, structured differently on purpose
        fn bleu_ref(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
            let mut geo = 1.0f64;
            for order in 1..=n {
                let mut cand_grams: Vec<&[String]> = Vec::new();
                if cand.len() >= order {
                    for i in 0..=cand.len() - order {
                        cand_grams.push(&cand[i..i + order]);
                    }
                }
                if cand_grams.is_empty() {
                    return 0.0;
                }
                let mut clipped = 0usize;
                let mut seen: Vec<&[String]> = Vec::new();
                for g in &cand_grams {
                    if seen.contains(g) {
                        continue;
                    }
                    seen.push(g);
                    let c_count = cand_grams.iter().filter(|x| x == &g).count();
                    let r_max = refs
                        .iter()
                        .map(|r| {
                            if r.len() < order {
                                return 0;
                            }
                            (0..=r.len() - order).filter(|&i| &r[i..i + order] == *g).count()
                        })
                        .max()
                        .unwrap_or(0);
                    clipped += c_count.min(r_max);
                }
                if clipped == 0 {
                    return 0.0;
                }
                geo *= (clipped as f64 / cand_grams.len() as f64).powf(1.0 / n as f64);
            }
            let c_len = cand.len() as i64;
            let r_len = refs
                .iter()
                .map(|r| r.len() as i64)
                .min_by_key(|&l| ((l - c_len).abs(), l))
                .unwrap();
            let bp = if c_len >= r_len {
                1.0
            } else {
                (1.0 - r_len as f64 / c_len as f64).exp()
            };
            bp * geo
        }

        let vocab = ["a", "b", "c", "d", "e"];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let len = rng.gen_range(1..10);
            let cand: Vec<String> =
                (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
            let n_refs = rng.gen_range(1..3);
            let refs: Vec<Vec<String>> = (0..n_refs)
                .map(|_| {
                    let rl = rng.gen_range(1..10);
                    (0..rl).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect()
                })
                .collect();
            let n = rng.gen_range(1..5);
            let cand_text = cand.join(" ");
            let ref_texts: Vec<String> = refs.iter().map(|r| r.join(" ")).collect();
            let ref_strs: Vec<&str> = ref_texts.iter().map(|s| s.as_str()).collect();
            let got = bleu(&cand_text, &ref_strs, n).unwrap();
            let want = bleu_ref(&cand, &refs, n);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn cider_matches_independent_implementation() {
        // second implementation: per-order explicit vectors over the union
        fn cider_ref(cand: &str, refs: &[&str], docs: &[&str]) -> f64 {
            let n_docs = docs.len() as f64;
            let mut total = 0.0;
            for order in 1..=4 {
                let df = {
                    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
                    for d in docs {
                        let t = tokenize(d);
                        let mut seen: Vec<Vec<String>> = Vec::new();
                        if t.len() >= order {
                            for w in t.windows(order) {
                                if !seen.contains(&w.to_vec()) {
                                    seen.push(w.to_vec());
                                    *df.entry(w.to_vec()).or_default() += 1.0;
                                }
                            }
                        }
                    }
                    df
                };
                let weight = |toks: &[String]| -> HashMap<Vec<String>, f64> {
                    let mut v: HashMap<Vec<String>, f64> = HashMap::new();
                    if toks.len() >= order {
                        for w in toks.windows(order) {
                            *v.entry(w.to_vec()).or_default() += 1.0;
                        }
                    }
                    for (g, val) in v.iter_mut() {
                        let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
                        *val *= n_docs.ln() - d.ln();
                    }
                    v
                };
                let cv = weight(&tokenize(cand));
                let mut acc = 0.0;
                for r in refs {
                    let rv = weight(&tokenize(r));
                    let dot: f64 =
                        cv.iter().filter_map(|(g, &x)| rv.get(g).map(|&y| x * y)).sum();
                    let na = cv.values().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        acc += dot / (na * nb);
                    }
                }
                total += acc / refs.len() as f64;
            }
            10.0 * total / 4.0
        }

        let vocab = ["walk", "run", "jump", "sit", "turn", "wave", "stop", "go"];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let docs: Vec<String> = (0..50)
            .map(|_| {
                let len = rng.gen_range(3..9);
                (0..len)
                    .map(|_| vocab[rng.gen_range(0..vocab.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let doc_refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let stats = CiderStats::from_corpus(&doc_refs);
        for i in 0..20 {
            let cand = &docs[i];
            let refs = [doc_refs[(i + 1) % 50], doc_refs[(i + 2) % 50]];
            let got = cider(cand, &refs, &stats).unwrap();
            let want = cider_ref(cand, &refs, &doc_refs);
            assert!((got - want).abs() < 1e-6, "case {i}: {got} vs {want}");
        }
    }

    #[test]
    fn embed_sim_identity_and_symmetry() {
        let e = WordHashEmbedder::default();
        let s = embed_sim("a person walks forward", "a person walks forward", &e);
        assert!((s - 1.0).abs() < 1e-6);
        let a = embed_sim("walk ahead", "jump high", &e);
        let b = embed_sim("jump high", "walk ahead", &e);
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a));
        assert_eq!(embed_sim("", "anything", &e), 0.0);
    }

    #[test]
    fn embed_sim_ranking_correlates_with_bleu1() {
        // paraphrase-ish pairs built from shared word pools, plus unrelated
        // pairs: the embedding ranking should track the BLEU-1 ranking
        let pool = ["person", "walks", "forward", "slowly", "jumps", "twice",
                    "sits", "down", "waves", "hand", "turns", "around"];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pairs: Vec<(String, String)> = Vec::new();
        for _ in 0..30 {
            let len = rng.gen_range(3..7);
            let base: Vec<&str> =
                (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            // paraphrase: keep a random subset, append fresh words
            let keep = rng.gen_range(0..=len);
            let mut para: Vec<&str> = base[..keep].to_vec();
            for _ in keep..len {
                para.push(pool[rng.gen_range(0..pool.len())]);
            }
            pairs.push((base.join(" "), para.join(" ")));
        }
        let e = WordHashEmbedder { dim: 64, seed: 5 };
        let bleu_scores: Vec<f64> =
            pairs.iter().map(|(a, b)| bleu(b, &[a.as_str()], 1).unwrap()).collect();
        let emb_scores: Vec<f64> = pairs.iter().map(|(a, b)| embed_sim(b, a, &e)).collect();
        let rank = |xs: &[f64]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
            let mut r = vec![0.0; xs.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let ra = rank(&bleu_scores);
        let rb = rank(&emb_scores);
        let n = ra.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - b) * (a - b)).sum();
        let spearman = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!(spearman > 0.5, "spearman {spearman}");
    }

    fn gaussian_samples(
        n: usize,
        mu: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                mu.iter()
                    .map(|&m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fid_self_is_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian_samples(200, &[0.0; 4], &mut rng);
        let b = gaussian_samples(220, &[1.0, 0.0, -1.0, 0.5], &mut rng);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
        assert!(matches!(
            fid(&a[..3], &b),
            Err(MetricError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn fid_analytic_gaussian_case() {
        // N(0, I) vs N((3,0), I) in 2-D: FID = |mu|^2 = 9
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian_samples(4000, &[0.0, 0.0], &mut rng);
        let b = gaussian_samples(4000, &[3.0, 0.0], &mut rng);
        let got = fid(&a, &b).unwrap();
        assert!((got - 9.0).abs() / 9.0 < 0.05, "{got}");
    }

    #[test]
    fn fid_matches_nalgebra_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..3 {
            let d = 8;
            // random anisotropic Gaussians via linear maps of N(0, I)
            let map_a: Vec<f64> =
                (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let map_b: Vec<f64> =
                (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let transform = |m: &[f64], shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..300)
                    .map(|_| {
                        let z: Vec<f64> = (0..d)
                            .map(|_| {
                                <StandardNormal as Distribution<f64>>::sample(
                                    &StandardNormal,
                                    rng,
                                )
                            })
                            .collect();
                        (0..d)
                            .map(|i| {
                                shift + (0..d).map(|j| m[i * d + j] * z[j]).sum::<f64>()
                            })
                            .collect()
                    })
                    .collect()
            };
            let a = transform(&map_a, 0.0, &mut rng);
            let b = transform(&map_b, 0.3, &mut rng);
            let got = fid(&a, &b).unwrap();

            // oracle: same formula through nalgebra's symmetric eigensolver
            let (mu_a, cov_a) = mean_cov(&a);
            let (mu_b, cov_b) = mean_cov(&b);
            let ca = DMatrix::from_row_slice(d, d, &cov_a);
            let cb = DMatrix::from_row_slice(d, d, &cov_b);
            let sqrtm = |m: &DMatrix<f64>| -> DMatrix<f64> {
                let eig = m.clone().symmetric_eigen();
                let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors
                    * DMatrix::from_diagonal(&vals)
                    * eig.eigenvectors.transpose()
            };
            let sa = sqrtm(&ca);
            let inner = &sa * &cb * &sa;
            let inner = DMatrix::from_fn(d, d, |i, j| 0.5 * (inner[(i, j)] + inner[(j, i)]));
            let tr_sqrt = inner
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .map(|&l: &f64| l.max(0.0).sqrt())
                .sum::<f64>();
            let mean_term: f64 =
                mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
            let want =
                (mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0);
            assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn diversity_trivial_cases() {
        let same = vec![vec![1.0, 2.0]; 10];
        assert_eq!(diversity(&same, 20, 0).unwrap(), 0.0);
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert!((diversity(&two, 10, 0).unwrap() - 5.0).abs() < 1e-12);
        assert!((multimodality(&[same.clone()], 5, 0).unwrap()).abs() < 1e-12);
        assert!(diversity(&same[..1], 5, 0).is_err());
    }

    #[test]
    fn diversity_matches_brute_force_within_sampling_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = gaussian_samples(100, &[0.0; 3], &mut rng);
        let mut all: Vec<f64> = Vec::new();
        for i in 0..feats.len() {
            for j in (i + 1)..feats.len() {
                all.push(euclid(&feats[i], &feats[j]));
            }
        }
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 =
            all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
        let pairs = 300;
        let se = (var / pairs as f64).sqrt();
        let got = diversity(&feats, pairs, 11).unwrap();
        assert!((got - mean).abs() < 3.0 * se, "{got} vs {mean} (se {se})");
    }

    #[test]
    fn judge_trivial_scores() {
        let always = JudgeClient::new(JudgeBackend::Chat(ChatClient::mock(MockRules {
            rules: vec![("Condition".into(), "COHERENT".into())],
        })));
        let pairs: Vec<(String, String)> =
            (0..4).map(|i| (format!("c{i}"), format!("g{i}"))).collect();
        let r = lcs_score(&pairs, &always).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.judged, 4);
        assert_eq!(r.failures, 0);

        // keyword judge: 3 coherent of 4 -> 0.75
        let judge = JudgeClient::new(JudgeBackend::Keyword {
            keywords: vec!["walk".into(), "jump".into()],
        });
        let pairs = vec![
            ("a walk in the park".to_string(), "someone walks ahead".to_string()),
            ("jump twice".to_string(), "a high jump".to_string()),
            ("walk then jump".to_string(), "jumping over".to_string()),
            ("walk away".to_string(), "sits quietly".to_string()),
        ];
        let r = lcs_score(&pairs, &judge).unwrap();
        assert!((r.score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn unparseable_replies_are_retried_then_excluded() {
        // mock echoes the prompt (never a verdict) -> every pair fails
        let echo = JudgeClient::new(JudgeBackend::Chat(ChatClient::mock(MockRules::default())));
        let pairs = vec![("c".to_string(), "g".to_string())];
        assert!(matches!(
            lcs_score(&pairs, &echo),
            Err(MetricError::AllRepliesUnparseable)
        ));

        // one parseable, one not: failure excluded from N
        let partial = JudgeClient::new(JudgeBackend::Chat(ChatClient::mock(MockRules {
            rules: vec![("good".into(), "coherent".into())],
        })));
        let pairs = vec![
            ("good case".to_string(), "text".to_string()),
            ("bad case".to_string(), "text".to_string()),
        ];
        let r = lcs_score(&pairs, &partial).unwrap();
        assert_eq!(r.judged, 1);
        assert_eq!(r.failures, 1);
        assert_eq!(r.score, 1.0);
    }

    #[test]
    fn cycle_scores_trivial_cases() {
        let forward = vec!["walk forward slowly".to_string(), "jump twice".to_string()];
        let e = WordHashEmbedder::default();
        let perfect = cycle_scores(&forward, &forward, &e);
        assert!((perfect["bleu1"] - 1.0).abs() < 1e-9);
        assert!((perfect["rouge_l"] - 1.0).abs() < 1e-9);
        assert!((perfect["embed_sim"] - 1.0).abs() < 1e-6);

        let empty_back = vec![String::new(), String::new()];
        let zeros = cycle_scores(&forward, &empty_back, &e);
        for (name, v) in &zeros {
            assert_eq!(*v, 0.0, "{name}");
        }
    }

    #[test]
    fn metric_report_hashes_config() {
        let r = MetricReport::new("fid", 1.25, 10, "extractor=vq,pool=mean");
        assert_eq!(r.config_hash.len(), 16);
        let r2 = MetricReport::new("fid", 1.25, 10, "extractor=vq,pool=mean");
        assert_eq!(r.config_hash, r2.config_hash);
    }

    #[test]
    fn feature_extractor_shapes() {
        use crate::corpus::{generate_corpus, CorpusConfig};
        use crate::tokenizer::VQConfig;
        let dir = tempfile::TempDir::new().unwrap();
        let corpus =
            generate_corpus(&CorpusConfig { scenes: 4, ..CorpusConfig::default() }, 1, dir.path())
                .unwrap();
        let cfg = VQConfig {
            channels: 16,
            code_dim: 6,
            downsample: 2,
            codebook_size: 16,
            res_blocks: 1,
            width: 8,
            ..VQConfig::default()
        };
        let motions: Vec<&MotionSequence> = corpus.motions.iter().take(4).collect();
        let vq = VQVae::<f32>::new(cfg, 0).unwrap();
        let fx = FeatureExtractor::new(&vq);
        let feats = fx.extract_all(&motions).unwrap();
        assert_eq!(feats.len(), 4);
        assert!(feats.iter().all(|f| f.len() == 6));
        assert!(feats.iter().flatten().all(|x| x.is_finite()));
    }
}
