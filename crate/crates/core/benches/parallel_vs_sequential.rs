//! Compares the rayon-backed data-parallel paths against explicit
//! sequential equivalents on the two hot loops that use them: corpus
//! tokenization and feature extraction. Run with
//! `cargo bench -p motionlm` (the `parallel` feature is required and on by
//! default).

use criterion::{criterion_group, criterion_main, Criterion};
use tempfile::TempDir;

use motionlm::corpus::{generate_corpus, CorpusConfig, FeatureStats, MotionSequence};
use motionlm::metrics::{FeatureExtractor, Pooling};
use motionlm::par;
use motionlm::tokenizer::{VQConfig, VQVae};

fn fixtures() -> (Vec<MotionSequence>, VQVae<f32>) {
    let dir = TempDir::new().unwrap();
    let cfg = CorpusConfig { scenes: 16, ..CorpusConfig::default() };
    let corpus = generate_corpus(&cfg, 3, dir.path()).unwrap();
    let mut vq = VQVae::<f32>::new(VQConfig::default(), 3).unwrap();
    let refs: Vec<&MotionSequence> = corpus.motions.iter().collect();
    vq.set_stats(&FeatureStats::compute(&refs));
    (corpus.motions, vq)
}

fn bench_tokenize(c: &mut Criterion) {
    let (motions, vq) = fixtures();
    let mut group = c.benchmark_group("tokenize_corpus");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_collect(&motions, |m| vq.tokenize(m).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| motions.iter().map(|m| vq.tokenize(m).unwrap()).collect::<Vec<_>>())
    });
    group.finish();
}

fn bench_feature_extraction(c: &mut Criterion) {
    let (motions, vq) = fixtures();
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let ex = FeatureExtractor { vq: &vq, pooling: Pooling::Mean };
    let mut group = c.benchmark_group("feature_extraction");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| ex.extract_all(&refs).unwrap()));
    group.bench_function("sequential", |b| {
        b.iter(|| refs.iter().map(|m| ex.extract(m).unwrap()).collect::<Vec<_>>())
    });
    group.finish();
}

criterion_group!(benches, bench_tokenize, bench_feature_extraction);
criterion_main!(benches);
