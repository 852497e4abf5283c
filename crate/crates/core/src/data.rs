//! Turns a throughput series plus port context into scaled, patched windows
//! with their rendered prompts, split by time.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backbone::DecoderCache;
use crate::context::{
    fit_buckets_from_days, render_pk_prompt, render_static_prompt, window_stats, DatasetMeta, PortContext,
    PromptBundle, VolumeBuckets,
};
use crate::embed::{build_vocab, lexicon, tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::PkTimeLlm;
use crate::series::{add_days, make_windows, patch, split_with_min, CtSeries, CtWindow, ScalerParams, Split};

/// Which prompt is prepended to the patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    None,
    Static,
    Pk,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::None, PromptMode::Static, PromptMode::Pk];
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::None => "none",
            PromptMode::Static => "static",
            PromptMode::Pk => "pk",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptMode::None),
            "static" => Ok(PromptMode::Static),
            "pk" => Ok(PromptMode::Pk),
            other => Err(Error::InvalidConfig(format!("unknown prompt mode {other:?} (none|static|pk)"))),
        }
    }
}

/// Window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
}

/// Raw inputs: the series, optional port context and dataset description.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub series: CtSeries,
    pub context: Option<PortContext>,
    pub meta: DatasetMeta,
}

impl DataSource {
    pub fn new(series: CtSeries, context: Option<PortContext>, port: &str) -> Self {
        let meta = DatasetMeta {
            port: port.to_string(),
            period_start: series.start_date(),
            period_end: series.end_date(),
        };
        DataSource { series, context, meta }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedWindow {
    pub window: CtWindow,
    pub target_scaled: Vec<f64>,
    /// `P × L_p`, built from the scaled input.
    pub patches: Matrix,
    pub static_prompt: PromptBundle,
    /// Absent when no port context covers the horizon.
    pub pk_prompt: Option<PromptBundle>,
}

impl PreparedWindow {
    pub fn prompt(&self, mode: PromptMode) -> Result<PromptBundle> {
        match mode {
            PromptMode::None => Ok(PromptBundle::empty(self.window.target.len())),
            PromptMode::Static => Ok(self.static_prompt.clone()),
            PromptMode::Pk => self.pk_prompt.clone().ok_or(Error::MissingContext {
                step: 1,
                date: add_days(self.window.anchor_date, 1),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataBundle {
    pub spec: WindowSpec,
    pub scaler: ScalerParams,
    pub buckets: Option<VolumeBuckets>,
    pub meta: DatasetMeta,
    pub train: Vec<PreparedWindow>,
    pub val: Vec<PreparedWindow>,
    pub test: Vec<PreparedWindow>,
}

impl DataBundle {
    pub fn split(&self, which: Split) -> &[PreparedWindow] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Every static and port-knowledge prompt across all splits.
    pub fn prompt_corpus(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|w| std::iter::once(w.static_prompt.text.clone()).chain(w.pk_prompt.as_ref().map(|p| p.text.clone())))
            .collect()
    }
}

/// Splits 50:30:20, fits the scaler on train, windows each split separately,
/// and renders both prompts for every window.
pub fn prepare(source: &DataSource, spec: WindowSpec) -> Result<DataBundle> {
    let WindowSpec {
        input_len: t,
        horizon: h,
        patch_len,
        stride,
    } = spec;
    if t < 8 {
        return Err(Error::InvalidConfig(format!("input_len must be at least 8, got {t}")));
    }
    if h == 0 {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    if patch_len == 0 || stride == 0 || stride > patch_len || patch_len > t {
        return Err(Error::InvalidConfig(format!(
            "need 1 ≤ stride ≤ patch_len ≤ input_len, got {stride}, {patch_len}, {t}"
        )));
    }
    let splits = split_with_min(&source.series, t + h)?;
    let scaler = ScalerParams::fit(splits.train.values())?;

    let buckets = match &source.context {
        Some(ctx) => {
            let days = ctx.berth_days_between(splits.train.start_date(), splits.train.end_date());
            Some(fit_buckets_from_days(&days)?)
        }
        None => None,
    };

    let build = |seg: &CtSeries| -> Result<Vec<PreparedWindow>> {
        make_windows(seg.start_date(), seg.values(), t, h)
            .into_iter()
            .map(|w| {
                let input_scaled = scaler.apply(&w.input);
                let target_scaled = scaler.apply(&w.target);
                let patches = patch(&input_scaled, patch_len, stride)?.patches;
                let stats = window_stats(&w.input)?;
                let static_prompt = render_static_prompt(&source.meta, t, h, &stats);
                let pk_prompt = match (&source.context, &buckets) {
                    (Some(ctx), Some(b)) => match ctx.steps_after(w.anchor_date, h) {
                        Ok(steps) => Some(render_pk_prompt(&source.meta, t, h, w.anchor_date, &steps, b)?),
                        Err(_) => None,
                    },
                    _ => None,
                };
                Ok(PreparedWindow {
                    window: w,
                    target_scaled,
                    patches,
                    static_prompt,
                    pk_prompt,
                })
            })
            .collect()
    };

    Ok(DataBundle {
        spec,
        scaler,
        buckets,
        meta: source.meta.clone(),
        train: build(&splits.train)?,
        val: build(&splits.val)?,
        test: build(&splits.test)?,
    })
}

/// Renders the prompt for one window outside the prepared splits, such as a
/// forecast from the end of the series. `None` mode yields no prompt.
pub fn render_window_prompt(
    mode: PromptMode,
    meta: &DatasetMeta,
    context: Option<&PortContext>,
    buckets: Option<&VolumeBuckets>,
    input: &[f64],
    anchor_date: NaiveDate,
    horizon: usize,
) -> Result<Option<PromptBundle>> {
    match mode {
        PromptMode::None => Ok(None),
        PromptMode::Static => Ok(Some(render_static_prompt(meta, input.len(), horizon, &window_stats(input)?))),
        PromptMode::Pk => {
            let missing = Error::MissingContext {
                step: 1,
                date: add_days(anchor_date, 1),
            };
            let (Some(ctx), Some(b)) = (context, buckets) else {
                return Err(missing);
            };
            let steps = ctx.steps_after(anchor_date, horizon)?;
            render_pk_prompt(meta, input.len(), horizon, anchor_date, &steps, b).map(Some)
        }
    }
}

/// Vocabulary over every prompt of the bundle plus the analysis word lists
/// and the ten digits, padded with filler tokens up to `min_size`.
pub fn build_vocabulary(bundle: &DataBundle, min_size: usize) -> Vocabulary {
    let mut corpus = bundle.prompt_corpus();
    corpus.push(lexicon::all_words().join(" "));
    corpus.push("0 1 2 3 4 5 6 7 8 9".into());
    build_vocab(&corpus).vocab.padded_to(min_size)
}

/// Prompt prefixes for one split under one prompt mode.
#[derive(Clone, Debug)]
pub enum PromptStore {
    /// Decoded prefixes, one per window.
    Cached(Vec<Arc<DecoderCache>>),
    /// Embedded prompts, decoded on demand (used when caches would not fit
    /// the memory budget).
    OnDemand(Vec<Matrix>),
}

impl PromptStore {
    pub fn len(&self) -> usize {
        match self {
            PromptStore::Cached(v) => v.len(),
            PromptStore::OnDemand(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model: &PkTimeLlm, i: usize) -> Result<Arc<DecoderCache>> {
        match self {
            PromptStore::Cached(v) => Ok(Arc::clone(&v[i])),
            PromptStore::OnDemand(v) => Ok(Arc::new(model.prefill(&v[i])?)),
        }
    }
}

/// Default ceiling on decoded-prefix memory per split.
pub const CACHE_BUDGET_BYTES: usize = 1 << 30;

/// Embeds each window's prompt and, within `budget_bytes`, decodes the prefix once.
pub fn encode_prompts(
    model: &PkTimeLlm,
    vocab: &Vocabulary,
    windows: &[PreparedWindow],
    mode: PromptMode,
    budget_bytes: usize,
) -> Result<PromptStore> {
    if mode == PromptMode::None {
        let empty = Arc::new(model.empty_cache());
        return Ok(PromptStore::Cached(vec![empty; windows.len()]));
    }
    let mut embedded = Vec::with_capacity(windows.len());
    let mut total_rows = 0usize;
    for w in windows {
        let tokens = tokenize(&w.prompt(mode)?.text);
        total_rows += tokens.len();
        embedded.push(model.embed_tokens(&tokens, vocab)?);
    }
    let per_row = model.dims.decoder.n_layers * 2 * model.dims.llm_dim() * 8;
    if total_rows.saturating_mul(per_row) > budget_bytes {
        return Ok(PromptStore::OnDemand(embedded));
    }
    let caches = embedded
        .iter()
        .map(|e| model.prefill(e).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptStore::Cached(caches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_world, WorldConfig};

    fn source(days: usize) -> DataSource {
        let w = gen_world(&WorldConfig {
            n_days: days,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        DataSource::new(w.ct.clone(), Some(w.port_context()), "Busan Port")
    }

    const SPEC: WindowSpec = WindowSpec {
        input_len: 14,
        horizon: 7,
        patch_len: 7,
        stride: 3,
    };

    #[test]
    fn windows_stay_inside_their_split() {
        let src = source(200);
        let b = prepare(&src, SPEC).unwrap();
        // 100 / 60 / 40 days.
        assert_eq!(b.train.len(), 100 - 21 + 1);
        assert_eq!(b.val.len(), 60 - 21 + 1);
        assert_eq!(b.test.len(), 40 - 21 + 1);
        let last_train_day = add_days(src.series.start_date(), 99);
        assert!(b.train.iter().all(|w| add_days(w.window.anchor_date, 7) <= last_train_day));
        assert!(b.train.iter().all(|w| w.pk_prompt.is_some()));
        assert_eq!(b.train[0].patches.shape(), (4, 7));
    }

    #[test]
    fn scaler_uses_train_only() {
        let src = source(200);
        let b = prepare(&src, SPEC).unwrap();
        let fit = ScalerParams::fit(&src.series.values()[..100]).unwrap();
        assert_eq!(b.scaler, fit);
        let w = &b.val[0];
        assert!((b.scaler.apply_one(w.window.target[0]) - w.target_scaled[0]).abs() < 1e-12);
    }

    #[test]
    fn vocabulary_is_closed_under_rerendering() {
        let src = source(150);
        let a = build_vocabulary(&prepare(&src, SPEC).unwrap(), 10);
        let b = build_vocabulary(&prepare(&src, SPEC).unwrap(), 10);
        assert_eq!(a, b);
        let bundle = prepare(&src, SPEC).unwrap();
        for text in bundle.prompt_corpus() {
            assert!(tokenize(&text).iter().all(|t| a.contains(t)));
        }
    }

    #[test]
    fn pk_needs_context() {
        let src = source(150);
        let no_ctx = DataSource::new(src.series.clone(), None, "Busan Port");
        let b = prepare(&no_ctx, SPEC).unwrap();
        assert!(b.buckets.is_none());
        assert!(matches!(b.train[0].prompt(PromptMode::Pk), Err(Error::MissingContext { .. })));
        assert_eq!(b.train[0].prompt(PromptMode::None).unwrap().text, "");
    }

    #[test]
    fn prompt_mode_parse() {
        for m in PromptMode::ALL {
            assert_eq!(m.to_string().parse::<PromptMode>().unwrap(), m);
        }
        assert!("full".parse::<PromptMode>().is_err());
    }
}
