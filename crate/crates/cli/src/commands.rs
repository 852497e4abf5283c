use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pk_timellm::analyze::{alignment_trace, loglog_regress, prototype_activations, write_heatmap_csv, write_heatmap_svg};
use pk_timellm::checkpoint::Checkpoint;
use pk_timellm::context::PortContext;
use pk_timellm::data::{prepare, render_window_prompt, DataBundle, DataSource, PromptMode};
use pk_timellm::embed::lexicon;
use pk_timellm::matrix::Matrix;
use pk_timellm::series::{add_days, CtSeries};
use pk_timellm::synth::{gen_world, read_tat_csv};
use pk_timellm::train::{
    evaluate, forecast_window, grid_search, improvement_ratio, prepare_run, train, train_prepared, write_forecasts_csv,
    write_grid_csv, write_history_csv, Metrics, TrainConfig,
};

use crate::config::RunConfig;
use crate::failure::Failure;

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn data_dir(cfg: &RunConfig) -> &Path {
    cfg.data.dir.as_deref().expect("validated")
}

fn load_source(cfg: &RunConfig) -> Result<DataSource, Failure> {
    let dir = data_dir(cfg);
    let series = CtSeries::read_csv(dir.join("ct.csv"))?;
    let context = if cfg.data.context {
        Some(PortContext::read_dir(dir)?)
    } else {
        None
    };
    Ok(DataSource::new(series, context, &cfg.data.port))
}

fn load_bundle(cfg: &RunConfig, train: &TrainConfig) -> Result<(DataSource, DataBundle), Failure> {
    let src = load_source(cfg)?;
    let bundle = prepare(&src, train.window_spec())?;
    Ok((src, bundle))
}

/// A checkpoint together with the data it must be evaluated on.
fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, DataSource, DataBundle), Failure> {
    let ck = Checkpoint::load(path)?;
    let (src, bundle) = load_bundle(cfg, &ck.config)?;
    if bundle.scaler != ck.scaler {
        return Err(Failure::data(format!(
            "{} was trained on different data (scaler mean {} std {}, data gives mean {} std {})",
            path.display(),
            ck.scaler.mean,
            ck.scaler.std,
            bundle.scaler.mean,
            bundle.scaler.std
        )));
    }
    Ok((ck, src, bundle))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let world = gen_world(&cfg.world)?;
    world.write_dir(out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct AlignmentSnapshot {
    pub epoch: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (_, bundle) = load_bundle(cfg, &cfg.train)?;
    let outcome = train(&cfg.train, &bundle)?;
    write_history_csv(out.join("loss_trace.csv"), &outcome.history)?;
    let snapshots: Vec<AlignmentSnapshot> = outcome
        .alignment
        .iter()
        .enumerate()
        .map(|(i, m)| AlignmentSnapshot {
            epoch: i + 1,
            rows: m.rows(),
            cols: m.cols(),
            values: m.as_slice().to_vec(),
        })
        .collect();
    write_json(&out.join("alignment.json"), &snapshots)?;
    let best_epoch = outcome.best_epoch;
    let best_val = outcome.best_val_mse;
    Checkpoint::from_outcome(outcome, &bundle).save(out.join("checkpoint.pktc"))?;
    eprintln!("best epoch {best_epoch}, val mse {best_val:.6}");
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    prompt_mode: PromptMode,
    #[serde(flatten)]
    metrics: Metrics,
}

pub fn eval(cfg: &RunConfig, out: &Path) -> CmdResult {
    let path = cfg.eval.checkpoint.as_deref().expect("validated");
    let (ck, _, bundle) = load_checkpoint(cfg, path)?;
    let mode = cfg.eval.prompt_mode.unwrap_or(ck.config.prompt_mode);
    let ev = evaluate(&ck.model, &ck.vocab, &bundle, cfg.eval.split, mode)?;
    write_json(
        &out.join("metrics.json"),
        &EvalReport {
            split: cfg.eval.split.to_string(),
            prompt_mode: mode,
            metrics: ev.metrics,
        },
    )?;
    write_forecasts_csv(out.join("forecasts.csv"), &ev.forecasts)?;
    Ok(())
}

#[derive(Serialize)]
struct ForecastOut {
    anchor_date: chrono::NaiveDate,
    step: usize,
    date: chrono::NaiveDate,
    pred_scaled: f64,
    pred: f64,
}

pub fn forecast(cfg: &RunConfig, out: &Path) -> CmdResult {
    let path = cfg.forecast.checkpoint.as_deref().expect("validated");
    let (ck, src, _) = load_checkpoint(cfg, path)?;
    let mode = cfg.forecast.prompt_mode.unwrap_or(ck.config.prompt_mode);
    let series = &src.series;
    let anchor = cfg.forecast.anchor.unwrap_or_else(|| series.end_date());
    let end = series
        .index_of(anchor)
        .ok_or_else(|| Failure::data(format!("anchor {anchor} is outside the series")))?;
    let t = ck.config.input_len;
    let h = ck.config.horizon;
    if end + 1 < t {
        return Err(Failure::data(format!("anchor {anchor} leaves fewer than {t} input days")));
    }
    let raw = &series.values()[end + 1 - t..=end];
    let prompt = render_window_prompt(mode, &ck.meta, src.context.as_ref(), ck.buckets.as_ref(), raw, anchor, h)?;
    let scaled = ck.scaler.apply(raw);
    let y = forecast_window(&ck.model, &ck.vocab, prompt.as_ref(), &scaled, ck.config.patch_len, ck.config.stride)?;

    let path = out.join("forecast.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::data(e.to_string()))?;
    for (k, &p) in y.iter().enumerate() {
        w.serialize(ForecastOut {
            anchor_date: anchor,
            step: k + 1,
            date: add_days(anchor, k + 1),
            pred_scaled: p,
            pred: ck.scaler.invert_one(p),
        })
        .map_err(|e| Failure::data(e.to_string()))?;
    }
    w.flush().map_err(|e| io_failure(&path, e))
}

#[derive(Serialize)]
struct AblationRun {
    input_len: usize,
    horizon: usize,
    prompt_mode: PromptMode,
    seed: u64,
    best_epoch: usize,
    val_mse: f64,
    test_mse: f64,
    test_mae: f64,
}

#[derive(Serialize)]
struct AblationRow {
    input_len: usize,
    horizon: usize,
    prompt_mode: PromptMode,
    seeds: usize,
    mse: f64,
    mae: f64,
    /// Improvement of the pk row over this row, percent; empty on the pk row.
    imp_ratio_to_pk: Option<f64>,
}

#[derive(Serialize)]
struct AblationTableRow {
    input_len: usize,
    horizon: usize,
    none_mse: f64,
    none_mae: f64,
    static_mse: f64,
    static_mae: f64,
    pk_mse: f64,
    pk_mae: f64,
    imp_ratio_none_to_pk: f64,
    imp_ratio_static_to_pk: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let src = load_source(cfg)?;
    let modes = [PromptMode::None, PromptMode::Static, PromptMode::Pk];
    let mut runs_w = csv_writer(&out.join("ablation_runs.csv"))?;
    let mut long_w = csv_writer(&out.join("ablation.csv"))?;
    let mut table_w = csv_writer(&out.join("ablation_table.csv"))?;
    let csv_err = |e: csv::Error| Failure::data(e.to_string());

    for &t in &cfg.ablate.input_lens {
        for &h in &cfg.ablate.horizons {
            let base = TrainConfig {
                input_len: t,
                horizon: h,
                ..cfg.train.clone()
            };
            let bundle = prepare(&src, base.window_spec())?;
            let mut summary = Vec::new();
            for mode in modes {
                let mode_cfg = TrainConfig {
                    prompt_mode: mode,
                    ..base.clone()
                };
                let run = prepare_run(&mode_cfg, &bundle)?;
                let (mut mses, mut maes) = (Vec::new(), Vec::new());
                for &seed in &cfg.ablate.seeds {
                    let c = TrainConfig {
                        seed,
                        ..mode_cfg.clone()
                    };
                    let outcome = train_prepared(&c, &bundle, &run)?;
                    let ev = evaluate(&outcome.model, &run.vocab, &bundle, pk_timellm::series::Split::Test, mode)?;
                    runs_w
                        .serialize(AblationRun {
                            input_len: t,
                            horizon: h,
                            prompt_mode: mode,
                            seed,
                            best_epoch: outcome.best_epoch,
                            val_mse: outcome.best_val_mse,
                            test_mse: ev.metrics.mse,
                            test_mae: ev.metrics.mae,
                        })
                        .map_err(csv_err)?;
                    mses.push(ev.metrics.mse);
                    maes.push(ev.metrics.mae);
                }
                summary.push((mode, median(&mut mses), median(&mut maes)));
            }
            let pk_mse = summary[2].1;
            for &(mode, mse, mae) in &summary {
                long_w
                    .serialize(AblationRow {
                        input_len: t,
                        horizon: h,
                        prompt_mode: mode,
                        seeds: cfg.ablate.seeds.len(),
                        mse,
                        mae,
                        imp_ratio_to_pk: (mode != PromptMode::Pk).then(|| improvement_ratio(mse, pk_mse)),
                    })
                    .map_err(csv_err)?;
            }
            table_w
                .serialize(AblationTableRow {
                    input_len: t,
                    horizon: h,
                    none_mse: summary[0].1,
                    none_mae: summary[0].2,
                    static_mse: summary[1].1,
                    static_mae: summary[1].2,
                    pk_mse,
                    pk_mae: summary[2].2,
                    imp_ratio_none_to_pk: improvement_ratio(summary[0].1, pk_mse),
                    imp_ratio_static_to_pk: improvement_ratio(summary[1].1, pk_mse),
                })
                .map_err(csv_err)?;
            eprintln!(
                "T={t} H={h}: none {:.4}, static {:.4}, pk {:.4}",
                summary[0].1, summary[1].1, pk_mse
            );
        }
    }
    for w in [&mut runs_w, &mut long_w, &mut table_w] {
        w.flush().map_err(|e| Failure::data(e.to_string()))?;
    }
    Ok(())
}

pub fn gridsearch(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (_, bundle) = load_bundle(cfg, &cfg.train)?;
    let res = grid_search(&cfg.grid, &cfg.train, &bundle)?;
    write_grid_csv(out.join("grid.csv"), &res.rows)?;
    let (Some(best), Some(outcome)) = (res.best, res.best_outcome) else {
        return Err(Failure::numeric("no grid configuration produced a finite validation loss"));
    };
    write_json(&out.join("best_config.json"), &outcome.config)?;
    Checkpoint::from_outcome(outcome, &bundle).save(out.join("best.pktc"))?;
    eprintln!("best row {best} of {}", res.rows.len());
    Ok(())
}

fn read_alignment(path: &Path) -> Result<Vec<Matrix>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let snaps: Vec<AlignmentSnapshot> =
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    snaps
        .into_iter()
        .map(|s| Matrix::from_vec(s.rows, s.cols, s.values).map_err(Failure::from))
        .collect()
}

pub fn analyze(cfg: &RunConfig, out: &Path) -> CmdResult {
    let a = &cfg.analysis;
    let ck_path = a.checkpoint.as_deref().expect("validated");
    let ck = Checkpoint::load(ck_path)?;
    let sets = lexicon::word_sets();
    let report = prototype_activations(ck.model.prototypes.w_e.value(), &sets, &ck.vocab, a.top_k, a.mode)?;
    write_heatmap_csv(&report.grid, &report.row_labels(), &report.col_labels(), out.join("activations.csv"))?;
    if a.svg {
        write_heatmap_svg(&report.grid, out.join("activations.svg"))?;
    }
    write_json(&out.join("activations.json"), &report.words)?;

    let (run_dir, explicit) = match &a.run_dir {
        Some(d) => (d.clone(), true),
        None => (ck_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")), false),
    };
    let align_path = run_dir.join("alignment.json");
    if align_path.exists() || explicit {
        let trace = alignment_trace(&read_alignment(&align_path)?)?;
        trace.export(out.join("alignment"), a.svg)?;
    } else {
        eprintln!("no alignment.json next to the checkpoint; skipping alignment export");
    }
    Ok(())
}

pub fn regress(cfg: &RunConfig, out: &Path) -> CmdResult {
    let dir = data_dir(cfg);
    let series = CtSeries::read_csv(dir.join("ct.csv"))?;
    let (tat_start, tat) = read_tat_csv(dir.join("tat.csv"))?;
    let (mut ct_v, mut tat_v) = (Vec::new(), Vec::new());
    for (i, &v) in tat.iter().enumerate() {
        if let Some(j) = series.index_of(add_days(tat_start, i)) {
            ct_v.push(series.values()[j]);
            tat_v.push(v);
        }
    }
    let r = loglog_regress(&ct_v, &tat_v)?;
    r.write_json(out.join("regression.json"))?;
    eprintln!(
        "beta {:.4} [{:.4}, {:.4}], intercept {:.4}, n {}",
        r.beta, r.ci_low, r.ci_high, r.intercept, r.n
    );
    Ok(())
}
