use std::path::Path;

use kws_core::audio::{write_wav_file, AudioBuffer};
use kws_core::data::{
    balance_unknown, batch_order, scan_dataset, segment_unlabeled, split_bucket, split_of, AudioSet, Batcher, FeatureSet,
    LabelMap, Split, NOISE_DIR,
};
use kws_core::prepare::{data_dir, manifest_path, prepare, PrepareConfig};
use kws_core::toygen::{generate, ToyConfig};
use kws_core::Error;
use proptest::prelude::*;

fn tone(seconds: f64) -> AudioBuffer {
    let n = (seconds * 16000.0) as usize;
    AudioBuffer::new((0..n).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect(), 16000).unwrap()
}

fn band_shares(n: usize) -> [f64; 3] {
    let mut c = [0usize; 3];
    for i in 0..n {
        c[split_of(&format!("word/{i:08x}_nohash_0")) as usize] += 1;
    }
    c.map(|v| v as f64 / n as f64)
}

#[test]
fn bucket_is_sha256_prefix_mod_100() {
    // first eight digest bytes, big-endian, reduced mod 100 (computed independently)
    assert_eq!(split_bucket("abc"), 74);
    assert_eq!(split_bucket("yes/0a7c2a8d_nohash_0"), 68);
    assert_eq!(split_bucket("speaker_17"), 21);
    assert_eq!(split_of("abc"), Split::Train);
}

#[test]
fn split_shares_within_three_points() {
    for n in [1000, 10_000] {
        let s = band_shares(n);
        assert!((s[0] - 0.8).abs() <= 0.03, "{n}: {s:?}");
        assert!((s[1] - 0.1).abs() <= 0.03, "{n}: {s:?}");
        assert!((s[2] - 0.1).abs() <= 0.03, "{n}: {s:?}");
    }
}

proptest! {
    #[test]
    fn speaker_clips_share_a_split(speaker in "[0-9a-f]{8}", a in 0u32..5, b in 0u32..5) {
        let x = split_of(&format!("yes/{speaker}_nohash_{a}"));
        let y = split_of(&format!("marvin/{speaker}_nohash_{b}"));
        prop_assert_eq!(x, y);
    }

    #[test]
    fn batches_partition_the_items(n in 1usize..300, batch in 1usize..64, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let batches = batch_order(&items, batch, seed, 0).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(batch));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, items);
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == batch));
    }
}

#[test]
fn odd_sized_source_gives_a_short_last_batch() {
    let items: Vec<usize> = (0..1005).collect();
    let batches = batch_order(&items, 200, 7, 0).unwrap();
    assert_eq!(batches.len(), 6);
    assert_eq!(batches[5].len(), 5);
    assert_eq!(batches, batch_order(&items, 200, 7, 0).unwrap());
    assert_ne!(batches, batch_order(&items, 200, 7, 1).unwrap());
    assert!(matches!(batch_order(&[], 200, 7, 0), Err(Error::Data(_))));
    assert!(matches!(batch_order(&items, 0, 7, 0), Err(Error::Param(_))));
}

#[test]
fn batcher_visits_every_item_each_epoch() {
    let mut b = Batcher::new(10, 4, 3).unwrap();
    for epoch in 0..3 {
        let mut seen = Vec::new();
        for _ in 0..3 {
            let (e, batch) = b.next_batch().unwrap();
            assert_eq!(e, epoch);
            seen.extend(batch);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

#[test]
fn unknown_share_is_capped() {
    // 90 known, 300 unknown; 10% target -> 10 unknown kept
    let labels: Vec<usize> = (0..390).map(|i| if i < 90 { i % 10 } else { 10 }).collect();
    let kept = balance_unknown(&labels, 10, 0.1, 1, 0);
    let unk = kept.iter().filter(|&&i| labels[i] == 10).count();
    assert_eq!(kept.len() - unk, 90);
    assert_eq!(unk, 10);
    assert_ne!(kept, balance_unknown(&labels, 10, 0.1, 1, 1));
}

#[test]
fn unlabeled_files_are_cut_into_whole_seconds() {
    let dir = tempfile::tempdir().unwrap();
    write_wav_file(&dir.path().join("long.wav"), &tone(10.5)).unwrap();
    write_wav_file(&dir.path().join("nested/short.wav"), &tone(0.8)).unwrap();
    write_wav_file(&dir.path().join("nested/exact.wav"), &tone(2.0)).unwrap();
    let corpus = segment_unlabeled(dir.path()).unwrap();
    assert_eq!(corpus.skipped, 1);
    let long: Vec<usize> = corpus.segments.iter().filter(|s| s.path.ends_with("long.wav")).map(|s| s.start).collect();
    assert_eq!(long, (0..10).map(|k| k * 16000).collect::<Vec<_>>());
    assert_eq!(corpus.segments.len(), 12);
    assert_eq!(corpus.segments[0].id(dir.path()), "long.wav@0");
}

#[test]
fn scan_reports_missing_and_foreign_layouts() {
    let labels = LabelMap::default();
    let missing = scan_dataset(Path::new("/definitely/not/here"), &labels, 0.1);
    assert!(matches!(missing, Err(Error::Data(_))));

    let dir = tempfile::tempdir().unwrap();
    write_wav_file(&dir.path().join("cat/a_nohash_0.wav"), &tone(1.0)).unwrap();
    match scan_dataset(dir.path(), &labels, 0.1) {
        Err(Error::Data(msg)) => assert!(msg.contains("cat") && msg.contains("yes"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn scan_assigns_labels_unknown_and_silence() {
    let dir = tempfile::tempdir().unwrap();
    for (word, n) in [("yes", 6), ("go", 2), ("marvin", 2)] {
        for k in 0..n {
            write_wav_file(&dir.path().join(format!("{word}/s{k}_nohash_0.wav")), &tone(1.0)).unwrap();
        }
    }
    write_wav_file(&dir.path().join(NOISE_DIR).join("hum.wav"), &tone(3.0)).unwrap();
    let ds = scan_dataset(dir.path(), &LabelMap::default(), 0.2).unwrap();
    let count = |label: usize| ds.records.iter().filter(|r| r.label == label).count();
    assert_eq!(count(0), 6);
    assert_eq!(count(9), 2);
    assert_eq!(count(10), 2);
    assert_eq!(count(11), 2);
    assert!(ds.records.iter().filter(|r| r.label == 11).all(|r| r.is_silence()));
}

#[test]
fn prepare_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = ToyConfig { clips_per_word: 12, speakers: 6, noise_seconds: 2.0, unlabeled_files: 2, unlabeled_seconds: 3.2, ..Default::default() };
    let layout = generate(&tmp.path().join("toy"), &toy).unwrap();
    let run = |out: &str| {
        let mut cfg = PrepareConfig::new(layout.speech.clone(), tmp.path().join(out));
        cfg.noise_root = Some(layout.noise.clone());
        cfg.unlabeled_root = Some(layout.unlabeled.clone());
        cfg.seed = 5;
        prepare(&cfg).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert_eq!(a.records, 48 + 5);
    assert_eq!(a.per_split.iter().sum::<usize>(), a.records);
    assert_eq!(a.unlabeled_segments, 6);
    for name in ["manifest.tsv", "features_train.kwsc", "features_dev.tsv", "audio_eval.kwsc", "audio_unlabeled.kwsc"] {
        let x = std::fs::read(data_dir(&tmp.path().join("a")).join(name)).unwrap();
        let y = std::fs::read(data_dir(&tmp.path().join("b")).join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let manifest = std::fs::read_to_string(manifest_path(&tmp.path().join("a"))).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "id\tpath\tlabel\tsplit");
    assert_eq!(manifest.lines().count(), a.records + 1);
    let row: Vec<&str> = manifest.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 4);
    assert!(Split::parse(row[3]).is_ok());

    let dir = data_dir(&tmp.path().join("a"));
    let train = FeatureSet::load(&dir, Split::Train).unwrap();
    assert_eq!(train.len(), a.per_split[0]);
    assert!(train.features.iter().all(|f| f.frames() == 123 && f.bins() == 40));
    let audio = AudioSet::load(&AudioSet::path(&dir, "train")).unwrap();
    assert_eq!(audio.ids, train.ids);
}

#[test]
fn corruption_without_noise_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = ToyConfig { clips_per_word: 2, speakers: 2, noise_seconds: 1.0, unlabeled_files: 0, ..Default::default() };
    let layout = generate(&tmp.path().join("toy"), &toy).unwrap();
    let cfg = PrepareConfig::new(layout.speech, tmp.path().join("out"));
    assert!(matches!(prepare(&cfg), Err(Error::Data(_))));
}
