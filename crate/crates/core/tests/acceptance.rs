//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; pass criterion numbers as arguments to run a
//! subset (`cargo test --test acceptance -- 3 5`).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pk_timellm::analyze::*;
use pk_timellm::backbone::DecoderConfig;
use pk_timellm::baselines::{run_baseline, BaselineKind};
use pk_timellm::checkpoint::Checkpoint;
use pk_timellm::data::*;
use pk_timellm::embed::{build_vocab, Vocabulary};
use pk_timellm::matrix::{grad_check, Matrix, Param, Parameters};
use pk_timellm::model::{ModelDims, PkTimeLlm, Sample};
use pk_timellm::series::*;
use pk_timellm::synth::{gen_world, WorldConfig};
use pk_timellm::train::*;

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn shape_eq(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<(), String> {
    ensure(got == want, || format!("{what} is {got:?}, expected {want:?}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn shape_conformance() -> Outcome {
    let t0 = Instant::now();
    let toy_d = 16;
    let prompt_words = "berth schedule vessels arrive with high operational volume on a working day";
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for &v_star in &[100usize, 1000] {
        let vocab = build_vocab(&[prompt_words]).vocab.padded_to(v_star);
        let tokens: Vec<&str> = prompt_words.split(' ').collect();
        for &n_heads in &[4usize, 8] {
            for &d_m in &[32usize, 64] {
                for &ff in &[128usize, 256] {
                    for &t in &[14usize, 21, 28] {
                        for &h in &[1usize, 7, 14] {
                            let dims = ModelDims {
                                input_len: t,
                                horizon: h,
                                patch_len: 7,
                                stride: 3,
                                vocab_size: vocab.len(),
                                num_prototypes: v_star,
                                d_model: d_m,
                                n_heads,
                                decoder: DecoderConfig {
                                    n_layers: 2,
                                    dim: toy_d,
                                    n_heads: 2,
                                    ff_dim: ff,
                                    attn_gain: 1.0,
                                    seed: 7,
                                },
                            };
                            let model = PkTimeLlm::new(dims, 11).map_err(|e| e.to_string())?;
                            let input: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
                            let patches = patch(&input, 7, 3).map_err(|e| e.to_string())?.patches;
                            let prompt = model.embed_tokens(&tokens, &vocab).map_err(|e| e.to_string())?;
                            let tr = model.forward_full(&prompt, &patches).map_err(|e| e.to_string())?;
                            let p = (t - 7) / 3 + 2;
                            let n_t = tokens.len();
                            shape_eq("E*", tr.e_star.shape(), (v_star, toy_d))?;
                            shape_eq("X_hat", tr.x_hat.shape(), (p, d_m))?;
                            shape_eq("Z", tr.z.shape(), (p, d_m))?;
                            shape_eq("patch embedding", tr.patch_emb.shape(), (p, toy_d))?;
                            shape_eq("R", tr.r.shape(), (n_t + p, toy_d))?;
                            shape_eq("decoder output", tr.hidden.shape(), (n_t + p, toy_d))?;
                            ensure(tr.y_hat.len() == h, || format!("y_hat has {} values, expected {h}", tr.y_hat.len()))?;
                            ensure(tr.y_hat.iter().all(|v| v.is_finite()), || "non-finite forecast".into())?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    ensure(elapsed <= Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} configurations conform in {:.1}s", elapsed.as_secs_f64()))
}

fn gradient_correctness() -> Outcome {
    let dims = ModelDims {
        input_len: 10,
        horizon: 2,
        patch_len: 4,
        stride: 2,
        vocab_size: 12,
        num_prototypes: 4,
        d_model: 8,
        n_heads: 2,
        decoder: DecoderConfig {
            n_layers: 2,
            dim: 8,
            n_heads: 2,
            ff_dim: 16,
            attn_gain: 1.0,
            seed: 9,
        },
    };
    let vocab = build_vocab(&["alpha beta gamma delta epsilon zeta eta theta iota kappa lambda"]).vocab;
    ensure(vocab.len() == 12, || format!("vocabulary has {} tokens", vocab.len()))?;
    let mut model = PkTimeLlm::new(dims, 4).map_err(|e| e.to_string())?;
    let prompt = model
        .embed_tokens(&["beta", "delta", "zeta", "unknown"], &vocab)
        .map_err(|e| e.to_string())?;
    let cache = model.prefill(&prompt).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut windows = Vec::new();
    for _ in 0..2 {
        let input: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let target: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        windows.push((patch(&input, 4, 2).unwrap().patches, target));
    }
    let report = grad_check(&mut model, 1e-6, |m| {
        m.zero_grads();
        let batch: Vec<Sample<'_>> = windows
            .iter()
            .map(|(p, t)| Sample {
                cache: &cache,
                patches: p,
                target: t,
            })
            .collect();
        m.loss_and_grad(&batch)
    })
    .map_err(|e| e.to_string())?;
    ensure(report.max_rel_error <= 1e-4, || format!("{report:?}"))?;
    ensure(report.frozen_grad_max == 0.0, || format!("frozen gradient {}", report.frozen_grad_max))?;
    Ok(format!(
        "max relative error {:.2e} over {} trainable scalars; frozen gradients exactly 0",
        report.max_rel_error, report.checked
    ))
}

fn patch_count_rule() -> Outcome {
    let mut cases = 0;
    for t in 1..=40usize {
        for lp in 1..=t {
            for s in 1..=lp {
                let formula = (t - lp) / s + 2;
                // Brute force: replicate the last value S times, slide by S.
                let padded = t + s;
                let mut brute = 0;
                let mut off = 0;
                while off + lp <= padded {
                    brute += 1;
                    off += s;
                }
                let input: Vec<f64> = (0..t).map(|i| i as f64).collect();
                let produced = patch(&input, lp, s).map_err(|e| e.to_string())?;
                ensure(
                    produced.count() == formula && brute == formula && patch_count(t, lp, s) == formula,
                    || format!("T={t} Lp={lp} S={s}: produced {}, brute {brute}, formula {formula}", produced.count()),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (T, Lp, S) combinations agree"))
}

fn protocol_fidelity() -> Outcome {
    for (n, want) in [(7, (3, 2, 2)), (10, (5, 3, 2)), (365, (182, 109, 74)), (730, (365, 219, 146)), (731, (365, 219, 147))] {
        ensure(split_lengths(n) == want, || format!("split_lengths({n}) = {:?}", split_lengths(n)))?;
    }
    let mut es = EarlyStopping::new(10);
    let script = [5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 3.0];
    let mut stopped = None;
    for (i, v) in script.iter().enumerate() {
        if es.update(*v).stop {
            stopped = Some(i + 1);
            break;
        }
    }
    ensure(stopped == Some(12) && es.best_epoch() == 2, || {
        format!("stopped at {stopped:?}, best epoch {}", es.best_epoch())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let mut sq = 0.0;
        let mut ab = 0.0;
        for i in (0..a.len()).rev() {
            let d = a[i] - b[i];
            sq += d * d;
            ab += if d < 0.0 { -d } else { d };
        }
        let m = Metrics::compute(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((m.mse - sq / 100.0).abs()).max((m.mae - ab / 100.0).abs());
    }
    ensure(worst <= 1e-12, || format!("metric deviation {worst:e}"))?;
    Ok(format!("splits, 10-epoch patience and metrics (max deviation {worst:.1e}) all match"))
}

fn prompt_golden() -> Outcome {
    let pk = render_golden_pk().text;
    let st = render_golden_static().text;
    let want_pk = std::fs::read_to_string(fixture_path("pk_prompt.txt")).map_err(|e| e.to_string())?;
    let want_st = std::fs::read_to_string(fixture_path("static_prompt.txt")).map_err(|e| e.to_string())?;
    ensure(pk == want_pk, || "PK prompt differs from fixture".into())?;
    ensure(st == want_st, || "static prompt differs from fixture".into())?;
    ensure(pk.contains("Estimated vessels to arrival are 5, Volumes are 4468"), || "summary totals".into())?;
    for label in ["a low operational", "a high operational", "a very high operational"] {
        ensure(pk.contains(label), || format!("missing bucket label {label:?}"))?;
    }
    Ok(format!("PK ({} bytes) and static ({} bytes) prompts byte-identical", pk.len(), st.len()))
}

fn ablation_direction() -> Outcome {
    let t0 = Instant::now();
    let world = gen_world(&WorldConfig::default()).map_err(|e| e.to_string())?;
    let src = DataSource::new(world.ct.clone(), Some(world.port_context()), &world.config.port);
    let mut lines = Vec::new();
    let mut all_ok = true;
    for &(t, h) in &[(14usize, 1usize), (14, 7), (28, 1), (28, 7)] {
        let spec = WindowSpec {
            input_len: t,
            horizon: h,
            patch_len: 7,
            stride: 3,
        };
        let bundle = prepare(&src, spec).map_err(|e| e.to_string())?;
        let mut medians = Vec::new();
        for mode in [PromptMode::None, PromptMode::Pk] {
            let base = TrainConfig {
                input_len: t,
                horizon: h,
                vocab_size: 32,
                num_prototypes: 32,
                llm_dim: 32,
                d_model: 32,
                n_heads: 4,
                ff_dim: 64,
                llm_heads: 4,
                learning_rate: 1e-3,
                max_epochs: 60,
                patience: 10,
                batch_size: 32,
                prompt_mode: mode,
                ..Default::default()
            };
            let run = prepare_run(&base, &bundle).map_err(|e| e.to_string())?;
            let mut mses = Vec::new();
            for seed in 0..5 {
                let cfg = TrainConfig { seed, ..base.clone() };
                let out = train_prepared(&cfg, &bundle, &run).map_err(|e| e.to_string())?;
                let ev = evaluate_windows(&out.model, &bundle.test, run.store(Split::Test), &bundle.scaler)
                    .map_err(|e| e.to_string())?;
                mses.push(ev.metrics.mse);
            }
            medians.push(median(mses));
        }
        let ok = medians[1] < medians[0];
        all_ok &= ok;
        lines.push(format!("T={t} H={h}: pk {:.4} vs none {:.4}", medians[1], medians[0]));
    }
    let elapsed = t0.elapsed();
    let summary = format!("{} ({:.0}s)", lines.join("; "), elapsed.as_secs_f64());
    ensure(all_ok, || summary.clone())?;
    ensure(elapsed <= Duration::from_secs(30 * 60), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn regression_recovery() -> Outcome {
    let ct: Vec<f64> = (0..730).map(|i| 300.0 + ((i * 37) % 1500) as f64).collect();
    let tat: Vec<f64> = ct.iter().map(|c| (3.476 + 0.367 * c.ln()).exp()).collect();
    let r = loglog_regress(&ct, &tat).map_err(|e| e.to_string())?;
    ensure((r.beta - 0.367).abs() <= 1e-9 && (r.intercept - 3.476).abs() <= 1e-9, || format!("{r:?}"))?;

    let exact = gen_world(&WorldConfig {
        tat_noise_std: 0.0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let r0 = loglog_regress(exact.ct.values(), &exact.tat).map_err(|e| e.to_string())?;
    ensure((r0.beta - 0.367).abs() <= 1e-9 && (r0.intercept - 3.476).abs() <= 1e-9, || format!("world: {r0:?}"))?;

    let mut inside = 0;
    for seed in 0..100 {
        let w = gen_world(&WorldConfig {
            seed,
            n_days: 730,
            tat_noise_std: 0.1,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let r = loglog_regress(w.ct.values(), &w.tat).map_err(|e| e.to_string())?;
        if (r.beta - 0.367).abs() <= 3.0 * r.std_error {
            inside += 1;
        }
    }
    if inside < 99 {
        return Err(format!("only {inside}/100 seeds within 3 SE; {}", calibration_note()));
    }
    Ok(format!(
        "exact recovery (|Δβ| {:.1e}, |Δa| {:.1e}); {inside}/100 noisy seeds within 3 SE",
        (r0.beta - 0.367).abs(),
        (r0.intercept - 3.476).abs()
    ))
}

/// Wider Monte Carlo over further seeds, reported when the 100-seed check
/// misses, to separate estimator bias from sampling noise.
fn calibration_note() -> String {
    let mut zs = Vec::new();
    for seed in 0..1000 {
        let Ok(w) = gen_world(&WorldConfig {
            seed,
            tat_noise_std: 0.1,
            ..Default::default()
        }) else {
            continue;
        };
        if let Ok(r) = loglog_regress(w.ct.values(), &w.tat) {
            zs.push((r.beta - 0.367) / r.std_error);
        }
    }
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let beyond = zs.iter().filter(|z| z.abs() > 3.0).count();
    format!(
        "over {} seeds the z-scores have mean {mean:.3}, variance {var:.3}, {beyond} beyond 3 SE ({:.1} expected)",
        zs.len(),
        n * 0.0027
    )
}

fn small_config(mode: PromptMode) -> TrainConfig {
    TrainConfig {
        input_len: 14,
        horizon: 2,
        patch_len: 7,
        stride: 3,
        vocab_size: 16,
        num_prototypes: 8,
        llm_dim: 16,
        d_model: 8,
        n_heads: 2,
        ff_dim: 32,
        llm_heads: 2,
        learning_rate: 3e-3,
        max_epochs: 6,
        batch_size: 16,
        seed: 5,
        prompt_mode: mode,
        ..Default::default()
    }
}

fn small_bundle(cfg: &TrainConfig) -> DataBundle {
    let world = gen_world(&WorldConfig {
        n_days: 200,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let src = DataSource::new(world.ct.clone(), Some(world.port_context()), &world.config.port);
    prepare(&src, cfg.window_spec()).unwrap()
}

fn interpretability_exports() -> Outcome {
    let cfg = small_config(PromptMode::None);
    let bundle = small_bundle(&cfg);
    let out = train(&cfg, &bundle).map_err(|e| e.to_string())?;
    let trace = alignment_trace(&out.alignment).map_err(|e| e.to_string())?;
    ensure(trace.matrices.len() == out.history.len(), || "trace length differs from epoch count".into())?;
    let mut worst: f64 = 0.0;
    for m in &trace.matrices {
        for r in 0..m.rows() {
            worst = worst.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("row sum deviation {worst:e}"))?;

    let vocab = Vocabulary::from_tokens(vec!["<unk>".into(), "berth".into(), "vessel".into()]).unwrap();
    let w_e = Matrix::from_rows(&[vec![0.5, 1.0, 0.0], vec![-0.1, 0.0, 2.0]]).unwrap();
    let report = prototype_activations(&w_e, &[("domain", &["berth", "vessel"][..])], &vocab, 1, ActivationMode::Signed)
        .map_err(|e| e.to_string())?;
    ensure(report.words[0].top == vec![(0, 1.0)] && report.words[1].top == vec![(1, 2.0)], || {
        format!("{:?}", report.words)
    })?;
    ensure(report.grid == Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(), || {
        format!("grid {:?}", report.grid)
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = Matrix::random_normal(5, 7, 3.0, &mut rng);
    let path = dir.path().join("heat.csv");
    export_heatmap(&m, &path, Some(&dir.path().join("heat.svg"))).map_err(|e| e.to_string())?;
    let back = read_heatmap_csv(&path).map_err(|e| e.to_string())?;
    ensure(back.matrix.shape() == m.shape(), || "heatmap shape changed".into())?;
    let diff = back.matrix.max_abs_diff(&m);
    ensure(diff <= 1e-12, || format!("heatmap round-trip error {diff:e}"))?;
    let svg = std::fs::read_to_string(dir.path().join("heat.svg")).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&svg).map_err(|e| e.to_string())?;
    let rects = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
    ensure(rects == 35, || format!("{rects} rectangles"))?;
    Ok(format!(
        "{} epochs with row sums within {worst:.1e}; hand grid exact; heatmap round-trip {diff:.1e}",
        trace.matrices.len()
    ))
}

fn frozen_values(model: &PkTimeLlm) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p: &Param| {
        if p.is_frozen() {
            out.push((name.to_string(), p.value().as_slice().iter().map(|v| v.to_bits()).collect()));
        }
    });
    out
}

fn persistence() -> Outcome {
    let cfg = small_config(PromptMode::Pk);
    let bundle = small_bundle(&cfg);
    let out = train(&cfg, &bundle).map_err(|e| e.to_string())?;
    let initial = PkTimeLlm::new(cfg.dims(out.vocab.len()), cfg.seed).map_err(|e| e.to_string())?;
    ensure(frozen_values(&initial) == frozen_values(&out.model), || "frozen weights changed".into())?;

    let before = evaluate(&out.model, &out.vocab, &bundle, Split::Test, cfg.prompt_mode).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_outcome(out, &bundle);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.pktc");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded.model, &loaded.vocab, &bundle, Split::Test, cfg.prompt_mode).map_err(|e| e.to_string())?;
    let bits = |e: &Evaluation| -> Vec<u64> { e.forecasts.iter().map(|r| r.pred_scaled.to_bits()).collect() };
    ensure(bits(&before) == bits(&after), || "forecasts differ after reload".into())?;
    ensure(
        before.metrics.mse.to_bits() == after.metrics.mse.to_bits() && before.metrics.mae.to_bits() == after.metrics.mae.to_bits(),
        || "metrics differ after reload".into(),
    )?;
    Ok(format!(
        "{} forecasts bit-identical after reload; frozen weights unchanged",
        before.forecasts.len()
    ))
}

fn baseline_sanity() -> Outcome {
    let week = [800.0, 950.0, 1010.0, 990.0, 870.0, 560.0, 480.0];
    let values: Vec<f64> = (0..210).map(|i| week[i % 7]).collect();
    let series = CtSeries::new(date(2022, 1, 1), values).unwrap();
    let spec = WindowSpec {
        input_len: 14,
        horizon: 7,
        patch_len: 7,
        stride: 3,
    };
    let bundle = prepare(&DataSource::new(series, None, "Test Port"), spec).map_err(|e| e.to_string())?;
    let naive = run_baseline(BaselineKind::SeasonalNaive, &bundle).map_err(|e| e.to_string())?;
    ensure(naive.mse == 0.0, || format!("seasonal naive MSE {}", naive.mse))?;

    let w = 2.0 * std::f64::consts::PI / 11.0;
    let values: Vec<f64> = (0..240).map(|i| 900.0 + 250.0 * (w * i as f64 + 0.4).cos()).collect();
    let series = CtSeries::new(date(2022, 1, 1), values).unwrap();
    let bundle = prepare(&DataSource::new(series, None, "Test Port"), spec).map_err(|e| e.to_string())?;
    let lin = run_baseline(BaselineKind::DlinearStyle, &bundle).map_err(|e| e.to_string())?;
    ensure(lin.mse <= 1e-10, || format!("dlinear_style MSE {:e}", lin.mse))?;
    Ok(format!("seasonal naive MSE 0; dlinear_style MSE {:.1e}", lin.mse))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "shape conformance", shape_conformance),
        (2, "gradient correctness", gradient_correctness),
        (3, "patch count", patch_count_rule),
        (4, "protocol fidelity", protocol_fidelity),
        (5, "prompt golden files", prompt_golden),
        (6, "prompt ablation direction", ablation_direction),
        (7, "log-log regression", regression_recovery),
        (8, "interpretability exports", interpretability_exports),
        (9, "persistence", persistence),
        (10, "baseline sanity", baseline_sanity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
