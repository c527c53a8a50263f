use mscl::motion_sampling::{mds_select, median, ClipScore};
use mscl::synth::{decode_video, encode_video, generate_corpus, Corpus, CorpusConfig, Split};
use mscl::training::{embed_videos, encoder_from_checkpoint, pretrain, MetricsLog, TrainConfig};
use mscl::encoders::Checkpoint;
use proptest::prelude::*;
use std::path::Path;

fn small() -> CorpusConfig {
    CorpusConfig {
        per_class: 3,
        frames: 12,
        height: 16,
        width: 16,
        ..CorpusConfig::default()
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        bank_size: 16,
        max_steps: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_reopens_with_the_same_videos() {
    let dir = tempfile::tempdir().unwrap();
    let made = generate_corpus(&small(), dir.path()).unwrap();
    let opened = Corpus::open(dir.path()).unwrap();
    assert_eq!(made.entries(), opened.entries());
    assert_eq!(made.checksum().unwrap(), opened.checksum().unwrap());
    let train = opened.load_split(Split::Train).unwrap();
    let test = opened.load_split(Split::Test).unwrap();
    assert_eq!(train.len() + test.len(), 4 * 3);
    for v in &train {
        let again = decode_video(&encode_video(v), Path::new("mem")).unwrap();
        assert_eq!(&again, v);
    }
}

#[test]
fn corpus_generation_is_seed_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = generate_corpus(&small(), a.path()).unwrap();
    let cb = generate_corpus(&small(), b.path()).unwrap();
    assert_eq!(ca.checksum().unwrap(), cb.checksum().unwrap());
    let other = CorpusConfig { seed: 9, ..small() };
    let c = tempfile::tempdir().unwrap();
    let cc = generate_corpus(&other, c.path()).unwrap();
    assert_ne!(ca.checksum().unwrap(), cc.checksum().unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_features() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small(), dir.path()).unwrap();
    let train = corpus.load_split(Split::Train).unwrap();
    let cfg = quick(5);
    let out = pretrain(&cfg, &train).unwrap();
    let path = dir.path().join("run.ckpt");
    out.checkpoint().save(&path).unwrap();
    let (echo, enc) = encoder_from_checkpoint(&Checkpoint::load(&path).unwrap(), "query").unwrap();
    assert_eq!(echo, cfg);
    let before = embed_videos(&out.pair.query, &train, cfg.clip_len, cfg.stride).unwrap();
    let after = embed_videos(&enc, &train, cfg.clip_len, cfg.stride).unwrap();
    for i in 0..before.len() {
        for (x, y) in before.row(i).iter().zip(after.row(i)) {
            // Parameters are stored as f32.
            assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }
}

#[test]
fn metrics_log_round_trips_through_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small(), dir.path()).unwrap();
    let train = corpus.load_split(Split::Train).unwrap();
    let log = pretrain(&quick(6), &train).unwrap().log;
    assert_eq!(log.records().len(), 2);
    let path = dir.path().join("metrics.tsv");
    log.save(&path).unwrap();
    assert_eq!(MetricsLog::load(&path).unwrap().to_tsv(), log.to_tsv());
}

#[test]
fn different_seeds_give_different_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small(), dir.path()).unwrap();
    let train = corpus.load_split(Split::Train).unwrap();
    let a = pretrain(&quick(1), &train).unwrap().log.to_tsv();
    let b = pretrain(&quick(2), &train).unwrap().log.to_tsv();
    assert_ne!(a, b);
}

proptest! {
    #[test]
    fn selection_is_a_nonempty_subset_above_the_median(values in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let scores: Vec<ClipScore> = values.iter().enumerate().map(|(i, &s)| ClipScore { start: i, score: s }).collect();
        let picked = mds_select(&scores);
        prop_assert!(!picked.is_empty());
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        let m = median(&values).unwrap();
        if picked.len() < values.len() {
            prop_assert!(picked.iter().all(|&i| values[i] > m));
            prop_assert!(picked.len() <= values.len() / 2);
        }
    }
}
