use std::fs;
use std::time::Instant;

use pjfit::records::{load_records, load_vocab, save_records, save_synthetic, save_vocab, DataDir};
use pjfit::Error;
use pjfit_core::data::{generate_synthetic, CandidateRecord, GeneratorConfig, InteractionRecord};

fn small() -> GeneratorConfig {
    GeneratorConfig {
        users: 60,
        jobs: 150,
        positives: 200,
        categories: 6,
        vocab_size: 90,
        generic_terms: 10,
        ..Default::default()
    }
}

#[test]
fn synthetic_data_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small(), 4).unwrap();
    let written = save_synthetic(dir.path(), &data).unwrap();
    assert_eq!(written.len(), 4);
    let back = DataDir::load(dir.path()).unwrap();
    assert_eq!(back.candidates, data.candidates);
    assert_eq!(back.jobs, data.jobs);
    assert_eq!(back.interactions, data.interactions);
    assert_eq!(back.vocab.ordinary_tokens().collect::<Vec<_>>(), data.vocabulary);
    let names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 4, "{names:?}");
}

#[test]
fn malformed_lines_report_their_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("interactions.txt");
    fs::write(
        &path,
        "{\"user_id\":0,\"job_id\":1,\"label\":1,\"impression_id\":0,\"timestamp\":5}\n\n{\"user_id\":0,\"job_id\":1}\n",
    )
    .unwrap();
    match load_records::<InteractionRecord>(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "{\"user_id\":0,\"job_id\":1,\"label\":1,\"impression_id\":0,\"timestamp\":5,\"category\":3}\n").unwrap();
    let err = load_records::<InteractionRecord>(&path).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("category"), "{err}");
}

#[test]
fn vocabulary_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    save_vocab(&path, &["alpha".into(), "beta".into()]).unwrap();
    let vocab = load_vocab(&path).unwrap();
    assert_eq!(vocab.tokenize("beta alpha zeta"), vec![5, 4, pjfit_core::encoders::UNK]);
    for bad in ["alpha\n[PAD]\n", "alpha\nbe ta\n", "alpha\n\nbeta\n", "alpha\nalpha\n"] {
        fs::write(&path, bad).unwrap();
        let err = load_vocab(&path).unwrap_err();
        assert!(err.is_validation(), "{bad:?}: {err}");
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = DataDir::load(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("vocab.txt"));
}

#[test]
fn ten_thousand_records_load_within_a_second() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("candidates.txt");
    let data = generate_synthetic(
        &GeneratorConfig {
            users: 10_000,
            jobs: 2000,
            positives: 100,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    save_records(&path, &data.candidates).unwrap();
    let start = Instant::now();
    let back: Vec<CandidateRecord> = load_records(&path).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(back.len(), 10_000);
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
}
