//! Run configuration: one JSON file with a block per command, plus flag
//! overrides applied before validation.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use pk_timellm::analyze::ActivationMode;
use pk_timellm::data::PromptMode;
use pk_timellm::series::Split;
use pk_timellm::synth::WorldConfig;
use pk_timellm::train::{GridSpace, TrainConfig};

use crate::failure::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub grid: GridSpace,
    pub ablate: AblateConfig,
    pub eval: EvalConfig,
    pub forecast: ForecastConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding ct.csv and, optionally, the context CSVs.
    pub dir: Option<PathBuf>,
    pub port: String,
    /// Load berth.csv, weather.csv and calendar.csv from `dir`.
    pub context: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            port: WorldConfig::default().port,
            context: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub input_lens: Vec<usize>,
    pub horizons: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2, 3, 4],
            input_lens: vec![14, 28],
            horizons: vec![1, 7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    /// Defaults to the mode the checkpoint was trained with.
    pub prompt_mode: Option<PromptMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            split: Split::Test,
            prompt_mode: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub checkpoint: Option<PathBuf>,
    /// Last observed day of the input window; defaults to the series end.
    pub anchor: Option<NaiveDate>,
    pub prompt_mode: Option<PromptMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub checkpoint: Option<PathBuf>,
    /// Training run directory holding alignment.json; defaults to the
    /// checkpoint's directory.
    pub run_dir: Option<PathBuf>,
    pub top_k: usize,
    pub mode: ActivationMode,
    pub svg: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            checkpoint: None,
            run_dir: None,
            top_k: 10,
            mode: ActivationMode::Absolute,
            svg: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Forecast,
    Ablate,
    Gridsearch,
    Analyze,
    Regress,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, cmd: Command) -> Result<(), Failure> {
        let need = |p: &Option<PathBuf>, what: &str| match p {
            Some(_) => Ok(()),
            None => Err(Failure::config(format!("{what} is not set"))),
        };
        match cmd {
            Command::Synth => self.world.validate()?,
            Command::Train | Command::Gridsearch => {
                need(&self.data.dir, "data.dir")?;
                self.train.validate()?;
                if cmd == Command::Gridsearch {
                    let g = &self.grid;
                    if g.num_prototypes.is_empty() || g.n_heads.is_empty() || g.d_model.is_empty() || g.ff_dim.is_empty() {
                        return Err(Failure::config("every grid axis needs at least one value"));
                    }
                }
            }
            Command::Eval => {
                need(&self.data.dir, "data.dir")?;
                need(&self.eval.checkpoint, "eval.checkpoint")?;
            }
            Command::Forecast => {
                need(&self.data.dir, "data.dir")?;
                need(&self.forecast.checkpoint, "forecast.checkpoint")?;
            }
            Command::Ablate => {
                need(&self.data.dir, "data.dir")?;
                let a = &self.ablate;
                if a.seeds.is_empty() || a.input_lens.is_empty() || a.horizons.is_empty() {
                    return Err(Failure::config("ablate.seeds, ablate.input_lens and ablate.horizons must be non-empty"));
                }
                for &t in &a.input_lens {
                    for &h in &a.horizons {
                        TrainConfig {
                            input_len: t,
                            horizon: h,
                            ..self.train.clone()
                        }
                        .validate()?;
                    }
                }
            }
            Command::Analyze => {
                need(&self.analysis.checkpoint, "analysis.checkpoint")?;
                if self.analysis.top_k == 0 {
                    return Err(Failure::config("analysis.top_k must be positive"));
                }
            }
            Command::Regress => need(&self.data.dir, "data.dir")?,
        }
        Ok(())
    }
}
