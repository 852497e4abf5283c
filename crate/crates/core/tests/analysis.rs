mod common;

use pk_timellm::analyze::*;
use pk_timellm::data::{prepare, DataSource, PromptMode};
use pk_timellm::embed::{lexicon, Vocabulary};
use pk_timellm::matrix::Matrix;
use pk_timellm::synth::{gen_world, WorldConfig};
use pk_timellm::train::{train, TrainConfig};

fn trained(num_prototypes: usize) -> pk_timellm::train::TrainOutcome {
    let cfg = TrainConfig {
        input_len: 14,
        horizon: 1,
        vocab_size: 16,
        num_prototypes,
        llm_dim: 16,
        d_model: 8,
        n_heads: 2,
        ff_dim: 32,
        llm_heads: 2,
        max_epochs: 3,
        batch_size: 32,
        prompt_mode: PromptMode::Static,
        ..Default::default()
    };
    let world = gen_world(&WorldConfig {
        n_days: 150,
        ..Default::default()
    })
    .unwrap();
    let src = DataSource::new(world.ct.clone(), Some(world.port_context()), &world.config.port);
    let bundle = prepare(&src, cfg.window_spec()).unwrap();
    train(&cfg, &bundle).unwrap()
}

#[test]
fn single_prototype_alignment_is_all_ones() {
    let out = trained(1);
    let trace = alignment_trace(&out.alignment).unwrap();
    assert_eq!(trace.epochs, (1..=out.history.len()).collect::<Vec<_>>());
    for m in &trace.matrices {
        assert_eq!(m.cols(), 1);
        assert!(m.as_slice().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }
    assert!(alignment_trace(&[]).is_err());
}

#[test]
fn alignment_export_writes_one_file_per_epoch() {
    let out = trained(4);
    let trace = alignment_trace(&out.alignment).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = trace.export(dir.path(), true).unwrap();
    assert_eq!(paths.len(), out.history.len());
    for (p, m) in paths.iter().zip(&trace.matrices) {
        let back = read_heatmap_csv(p).unwrap();
        assert_eq!(back.matrix.shape(), m.shape());
        assert_eq!(back.col_labels[0], "proto_0");
        assert!(p.with_extension("svg").exists());
    }
}

#[test]
fn activation_report_on_a_trained_model() {
    let out = trained(8);
    let sets = lexicon::word_sets();
    let report = prototype_activations(
        out.model.prototypes.w_e.value(),
        &sets,
        &out.vocab,
        10,
        ActivationMode::Absolute,
    )
    .unwrap();
    let n_words: usize = sets.iter().map(|(_, w)| w.len()).sum();
    assert_eq!(report.words.len(), n_words);
    assert_eq!(report.k, 8);
    assert_eq!(report.grid.shape(), (report.prototypes.len(), n_words));
    assert!(report.grid.as_slice().iter().all(|v| v.is_finite()));
    // The vocabulary always contains the lexicon.
    assert!(report.words.iter().all(|w| !w.oov));
}

#[test]
fn activation_clamps_k_and_rejects_empty_sets() {
    let vocab = Vocabulary::from_tokens(vec!["<unk>".into(), "berth".into(), "vessel".into()]).unwrap();
    let w_e = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, -2.0, 3.0]]).unwrap();
    let r = prototype_activations(&w_e, &[("d", &["vessel"][..])], &vocab, 50, ActivationMode::Signed).unwrap();
    assert_eq!(r.words[0].top, vec![(1, 3.0), (0, 0.0)]);
    let abs = prototype_activations(&w_e, &[("d", &["berth"][..])], &vocab, 1, ActivationMode::Absolute).unwrap();
    assert_eq!(abs.words[0].top, vec![(1, 2.0)]);
    let empty: &[&str] = &[];
    assert!(prototype_activations(&w_e, &[("d", empty)], &vocab, 1, ActivationMode::Signed).is_err());
}

#[test]
fn heatmap_csv_layout_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = Matrix::from_rows(&[[0.1, -2.5], [3.0, 1e-17]]).unwrap();
    export_heatmap(&m, &path, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let grid: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(grid.len(), 3);
    assert!(grid.iter().all(|r| r.len() == 3));
    assert_eq!(grid[0], ["", "c0", "c1"]);
    assert_eq!(grid[2][0], "r1");
    assert_eq!(read_heatmap_csv(&path).unwrap().matrix, m);
    assert!(export_heatmap(&m, dir.path().join("missing/dir/m.csv"), None).is_err());
}

#[test]
fn regression_report_json() {
    let ct: Vec<f64> = (1..=200).map(|i| 100.0 + 7.0 * i as f64).collect();
    let tat: Vec<f64> = ct
        .iter()
        .enumerate()
        .map(|(i, c)| (3.476 + 0.367 * c.ln() + 0.05 * ((i * 7919 % 101) as f64 / 50.0 - 1.0)).exp())
        .collect();
    let r = loglog_regress(&ct, &tat).unwrap();
    assert!(r.ci_low < r.beta && r.beta < r.ci_high);
    assert!((r.ci_high - r.beta - 1.96 * r.std_error).abs() < 1e-12);
    assert!(r.p_value < 1e-6 && r.z > 5.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("regression.json");
    r.write_json(&path).unwrap();
    let back: RegressionResult = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
}
