use std::io::Write;

use sticker_core::data::{
    generate_corpus, generate_split, load_dataset, save_dataset, write_corpus, GeneratorConfig,
    Split,
};
use sticker_core::Error;

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        n_samples: 30,
        patch_grid: 2,
        patch_dim: 3,
        ..Default::default()
    }
}

#[test]
fn round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_split(&tiny(), 0..12).unwrap();
    let path = dir.path().join("s.jsonl");
    save_dataset(&path, &samples).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), samples);
}

#[test]
fn corpus_files_are_byte_identical_across_runs() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_corpus(&generate_corpus(&cfg).unwrap(), &cfg, &a.path().join("nested")).unwrap();
    let mb = write_corpus(&generate_corpus(&cfg).unwrap(), &cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    for s in Split::ALL {
        let fa = std::fs::read(a.path().join("nested").join(s.file_name())).unwrap();
        let fb = std::fs::read(b.path().join(s.file_name())).unwrap();
        assert_eq!(fa, fb);
    }
    assert_eq!(ma.files.iter().map(|f| f.1).sum::<usize>(), 30);
}

#[test]
fn schema_violations_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_split(&tiny(), 0..3).unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{}", serde_json::to_string(&samples[0]).unwrap()).unwrap();
    let mut two_pos = samples[1].clone();
    two_pos.labels = vec![1; two_pos.labels.len()];
    writeln!(f, "{}", serde_json::to_string(&two_pos).unwrap()).unwrap();
    drop(f);
    match load_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }

    std::fs::write(&path, "{\"sample_id\": 1}\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(
        load_dataset(&dir.path().join("missing.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn label_slots_are_uniform() {
    let cfg = GeneratorConfig {
        patch_grid: 1,
        patch_dim: 1,
        turns: (1, 1),
        turn_len: (1, 1),
        ..Default::default()
    };
    let n = 10_000u64;
    let mut counts = [0f64; 10];
    for s in generate_split(&cfg, 0..n).unwrap() {
        counts[s.positive()] += 1.0;
    }
    let expected = n as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
    // upper 1% point of chi-square with 9 degrees of freedom
    assert!(chi2 < 21.666, "chi2 = {chi2}, counts {counts:?}");
}
