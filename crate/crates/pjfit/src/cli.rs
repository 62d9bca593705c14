//! The `pjfit` command line.
//!
//! Every setting is a flag with a default. Settings can also come from a
//! TOML file given with `--config`; its sections are named after the flag
//! groups (`generator`, `model`, `train`, `split`, `eval`, `ablate`,
//! `gradcheck`, `serve`, `plot`) and `seed` sits at the top level. Flags
//! given on the command line win over the file. A run manifest is accepted
//! as a config file too, so a run can be replayed from its manifest.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures (including a failed gradient check).
//!
//! Each subcommand's help lists every setting of its resolved config:
//!
//! ```
//! use pjfit::cli::{default_settings, flatten, flag_help, SUBCOMMANDS};
//!
//! for name in SUBCOMMANDS {
//!     let settings = flatten(&default_settings(name).unwrap());
//!     for key in settings.keys() {
//!         let help = flag_help(name, key).unwrap_or_else(|| panic!("{name} has no flag for {key}"));
//!         assert!(help.contains("[default:"), "{name} --{key}: {help}");
//!     }
//! }
//! ```
//!
//! and the flag defaults are the library defaults:
//!
//! ```
//! use pjfit::cli::{default_settings, flatten};
//! use pjfit_core::data::GeneratorConfig;
//! use pjfit_core::model::ModelConfig;
//! use pjfit_core::train::TrainConfig;
//!
//! fn table<T: serde::Serialize>(v: &T) -> toml::Table {
//!     toml::Table::try_from(v).unwrap()
//! }
//!
//! let train = default_settings("train").unwrap();
//! assert_eq!(flatten(&train["model"].as_table().unwrap()), flatten(&table(&ModelConfig::default())));
//! let mut train_cfg = table(&TrainConfig::default());
//! train_cfg.remove("seed");
//! assert_eq!(train["train"].as_table().unwrap(), &train_cfg);
//! let generate = default_settings("generate").unwrap();
//! assert_eq!(generate["generator"].as_table().unwrap(), &table(&GeneratorConfig::default()));
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use pjfit_core::ablation::{run_ablation, AblationData};
use pjfit_core::data::{generate_synthetic, temporal_split, Corpus, GeneratorConfig, ImpressionGroup, InteractionRecord, SplitConfig, SECONDS_PER_DAY};
use pjfit_core::encoders::{CrossEncoderConfig, Vocabulary};
use pjfit_core::intention::{ClusterAxis, QueryStreamValues};
use pjfit_core::metrics::GaucWeighting;
use pjfit_core::micro::micro_grad_check;
use pjfit_core::model::{Model, ModelConfig, Variant};
use pjfit_core::train::{self, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{save_cache, score_online, IntentionCache};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::manifest::{write_atomic, RunManifest};
use crate::plot::{write_plot, PlotPoint};
use crate::records::{save_synthetic, DataDir};

pub const DATA_ROOT_ENV: &str = "PJFIT_DATA_ROOT";
pub const SUBCOMMANDS: [&str; 7] = ["generate", "train", "evaluate", "ablate", "gradcheck", "serve-sim", "plot"];
const SECTIONS: [&str; 9] = ["generator", "model", "train", "split", "eval", "ablate", "gradcheck", "serve", "plot"];

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    toml::Value::String(s.to_string()).try_into().map_err(|e: toml::de::Error| e.message().to_string())
}

#[derive(Debug, Parser)]
#[command(name = "pjfit", version, about = "Person-job fit with search-history intention modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic data directory.
    Generate(GenerateCmd),
    /// Train a model and write its checkpoint.
    Train(TrainCmd),
    /// Score a data split with a checkpoint and write a metric report.
    Evaluate(EvaluateCmd),
    /// Train several variants over several seeds and tabulate test metrics.
    Ablate(AblateCmd),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckCmd),
    /// Replay the test window through the cached serving path.
    ServeSim(ServeSimCmd),
    /// Plot a metric against a hyperparameter from evaluation reports.
    Plot(PlotCmd),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArgs {
    #[arg(long, default_value_t = GeneratorConfig::default().users)]
    pub users: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().jobs)]
    pub jobs: usize,
    /// Impression groups, one positive each.
    #[arg(long, default_value_t = GeneratorConfig::default().positives)]
    pub positives: usize,
    /// Latent job categories.
    #[arg(long, default_value_t = GeneratorConfig::default().categories)]
    pub categories: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().vocab_size)]
    pub vocab_size: usize,
    /// Vocabulary terms shared by all categories.
    #[arg(long, default_value_t = GeneratorConfig::default().generic_terms)]
    pub generic_terms: usize,
    /// Negatives kept per positive.
    #[arg(long, default_value_t = GeneratorConfig::default().negative_ratio)]
    pub negative_ratio: usize,
    /// Jobs shown alongside each positive.
    #[arg(long, default_value_t = GeneratorConfig::default().exposure_size)]
    pub exposure_size: usize,
    /// Mean search-history length of users with history.
    #[arg(long, default_value_t = GeneratorConfig::default().mean_history)]
    pub mean_history: f64,
    /// Probabilities of 1, 2 and 3 word queries.
    #[arg(long, value_delimiter = ',', default_values_t = GeneratorConfig::default().query_length_probs)]
    pub query_length_probs: Vec<f64>,
    #[arg(long, default_value_t = GeneratorConfig::default().days)]
    pub days: u64,
    #[arg(long, default_value_t = GeneratorConfig::default().first_day)]
    pub first_day: u64,
    #[arg(long, default_value_t = GeneratorConfig::default().zero_history_fraction)]
    pub zero_history_fraction: f64,
    /// Share of users whose resume is a few generic terms.
    #[arg(long, default_value_t = GeneratorConfig::default().low_signal_resume_fraction)]
    pub low_signal_resume_fraction: f64,
    #[arg(long, default_value_t = GeneratorConfig::default().low_signal_resume_length)]
    pub low_signal_resume_length: usize,
    /// Probability that a positive comes from the user's intentions.
    #[arg(long, default_value_t = GeneratorConfig::default().intention_strength)]
    pub intention_strength: f64,
    #[arg(long, default_value_t = GeneratorConfig::default().max_intentions)]
    pub max_intentions: usize,
    /// Inclusive resume length range.
    #[arg(long, value_delimiter = ',', default_values_t = GeneratorConfig::default().resume_length)]
    pub resume_length: Vec<usize>,
    /// Inclusive job description length range.
    #[arg(long, value_delimiter = ',', default_values_t = GeneratorConfig::default().description_length)]
    pub description_length: Vec<usize>,
    /// Share of on-topic terms in descriptions and informative resumes.
    #[arg(long, default_value_t = GeneratorConfig::default().on_topic)]
    pub on_topic: f64,
}

fn fixed<const N: usize, T: Copy>(name: &str, v: &[T]) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| pjfit_core::Error::Config(format!("{name} takes {N} values, got {}", v.len())).into())
}

impl GeneratorArgs {
    pub fn to_config(&self) -> Result<GeneratorConfig> {
        Ok(GeneratorConfig {
            users: self.users,
            jobs: self.jobs,
            positives: self.positives,
            categories: self.categories,
            vocab_size: self.vocab_size,
            generic_terms: self.generic_terms,
            negative_ratio: self.negative_ratio,
            exposure_size: self.exposure_size,
            mean_history: self.mean_history,
            query_length_probs: fixed("query_length_probs", &self.query_length_probs)?,
            days: self.days,
            first_day: self.first_day,
            zero_history_fraction: self.zero_history_fraction,
            low_signal_resume_fraction: self.low_signal_resume_fraction,
            low_signal_resume_length: self.low_signal_resume_length,
            intention_strength: self.intention_strength,
            max_intentions: self.max_intentions,
            resume_length: fixed("resume_length", &self.resume_length)?,
            description_length: fixed("description_length", &self.description_length)?,
            on_topic: self.on_topic,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// Weight of the job-ID stream when fusing the two intention streams.
    #[arg(long, default_value_t = ModelConfig::default().lambda)]
    pub lambda: f64,
    /// Intention clusters.
    #[arg(long, default_value_t = ModelConfig::default().k)]
    pub k: usize,
    /// Attention heads of the intention readout.
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    /// ID embedding dimension.
    #[arg(long, default_value_t = ModelConfig::default().d_j)]
    pub d_j: usize,
    /// Word embedding and encoder width.
    #[arg(long, default_value_t = ModelConfig::default().d_w)]
    pub d_w: usize,
    #[arg(long, default_value_t = ModelConfig::default().dropout)]
    pub dropout: f64,
    /// Most recent history entries used per user.
    #[arg(long, default_value_t = ModelConfig::default().l_max)]
    pub l_max: usize,
    #[arg(long, default_value_t = ModelConfig::default().encoder.layers)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().encoder.heads)]
    pub encoder_heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().encoder.ff_width)]
    pub encoder_ff_width: usize,
    /// Joint resume/description length after truncation, specials included.
    #[arg(long, default_value_t = ModelConfig::default().encoder.max_tokens)]
    pub encoder_max_tokens: usize,
    /// Hidden widths of the intention MLP.
    #[arg(long, value_delimiter = ',', default_values_t = ModelConfig::default().intention_hidden)]
    pub intention_hidden: Vec<usize>,
    /// Output width of the intention MLP.
    #[arg(long, default_value_t = ModelConfig::default().d_o)]
    pub d_o: usize,
    /// Hidden widths of the prediction MLP.
    #[arg(long, value_delimiter = ',', default_values_t = ModelConfig::default().prediction_hidden)]
    pub prediction_hidden: Vec<usize>,
    /// full, no_q, no_j, no_c or text_only.
    #[arg(long, default_value_t = ModelConfig::default().variant)]
    pub variant: Variant,
    /// Softmax axis of the cluster assignment: clusters or history.
    #[arg(long, default_value = "clusters", value_parser = parse_serde::<ClusterAxis>)]
    pub cluster_softmax_axis: ClusterAxis,
    /// Query-stream attention values: cj_prime or cj.
    #[arg(long, default_value = "cj_prime", value_parser = parse_serde::<QueryStreamValues>)]
    pub query_stream_values: QueryStreamValues,
}

impl ModelArgs {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            lambda: self.lambda,
            k: self.k,
            heads: self.heads,
            d_j: self.d_j,
            d_w: self.d_w,
            dropout: self.dropout,
            l_max: self.l_max,
            encoder: CrossEncoderConfig {
                layers: self.encoder_layers,
                heads: self.encoder_heads,
                ff_width: self.encoder_ff_width,
                max_tokens: self.encoder_max_tokens,
            },
            intention_hidden: self.intention_hidden.clone(),
            d_o: self.d_o,
            prediction_hidden: self.prediction_hidden.clone(),
            variant: self.variant,
            cluster_softmax_axis: self.cluster_softmax_axis,
            query_stream_values: self.query_stream_values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Impression groups per mini-batch.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    pub max_epochs: usize,
    /// Epochs without validation GAUC improvement before stopping.
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    /// unweighted or impressions.
    #[arg(long, default_value = "unweighted", value_parser = parse_serde::<GaucWeighting>)]
    pub gauc_weighting: GaucWeighting,
}

impl TrainArgs {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            gauc_weighting: self.gauc_weighting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitArgs {
    /// Days held out for validation.
    #[arg(long, default_value_t = 1)]
    pub val_days: u64,
    /// Final days held out for testing.
    #[arg(long, default_value_t = 1)]
    pub test_days: u64,
    /// Day index of the first day of the log [default: inferred from the interactions]
    #[arg(long)]
    pub first_day: Option<u64>,
    /// Days covered by the log [default: inferred from the interactions]
    #[arg(long)]
    pub days: Option<u64>,
}

impl SplitArgs {
    /// Fills in the day span from the interaction timestamps where unset.
    pub fn resolve(&self, records: &[InteractionRecord]) -> Result<SplitConfig> {
        let (Some(lo), Some(hi)) = (records.iter().map(|r| r.timestamp).min(), records.iter().map(|r| r.timestamp).max()) else {
            return Err(pjfit_core::Error::Validation("no interactions to split".into()).into());
        };
        let first_day = self.first_day.unwrap_or(lo / SECONDS_PER_DAY);
        let days = match self.days {
            Some(d) => d,
            None => (hi / SECONDS_PER_DAY + 1).saturating_sub(first_day),
        };
        Ok(SplitConfig {
            first_day,
            days,
            val_days: self.val_days,
            test_days: self.test_days,
        })
    }

    fn resolved(cfg: &SplitConfig) -> Self {
        Self {
            val_days: cfg.val_days,
            test_days: cfg.test_days,
            first_day: Some(cfg.first_day),
            days: Some(cfg.days),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Split to score: val or test.
    #[arg(long, default_value = "test", value_parser = parse_serde::<EvalSet>)]
    pub set: EvalSet,
    /// unweighted or impressions.
    #[arg(long, default_value = "unweighted", value_parser = parse_serde::<GaucWeighting>)]
    pub gauc_weighting: GaucWeighting,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    /// Variants to train.
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
    pub variants: Vec<Variant>,
    /// One training run per seed and variant.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 2.5e-4)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    /// Hours between cache refreshes (a simulation knob, not a tuned value).
    #[arg(long, default_value_t = 6.0)]
    pub refresh_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotArgs {
    /// Hyperparameter on the x axis, e.g. lambda, k, d_j, learning_rate.
    #[arg(long, default_value = "lambda")]
    pub x: String,
    /// gauc, recall_at_1, recall_at_5 or mrr.
    #[arg(long, default_value = "gauc")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct GenerateCmd {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data directory to write.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data directory to read.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub data: PathBuf,
    /// Run directory for the checkpoint, log and manifest.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateCmd {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/evaluate")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ablate: AblateArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    /// Check the micro configuration (vocabulary 20, history 3, k 2, d_j 4, d_w 8, one encoder layer); currently required.
    #[arg(long)]
    pub micro: bool,
    #[arg(long, default_value_t = 21)]
    pub seed: u64,
    #[arg(long, default_value = "runs/gradcheck")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub gradcheck: GradcheckArgs,
}

#[derive(Debug, Args)]
pub struct ServeSimCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/serve")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub serve: ServeArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct PlotCmd {
    /// Evaluation reports (`report.jsonl` files or the directories holding them).
    #[arg(long, required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "runs/plot")]
    pub out: PathBuf,
    /// TOML settings file; flags given on the command line override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub plot: PlotArgs,
}

/// Merges a settings file under the command-line flags.
struct Resolver<'a> {
    matches: &'a ArgMatches,
    file: toml::Table,
    path: PathBuf,
    config: toml::Table,
}

fn explicit(matches: &ArgMatches, id: &str) -> bool {
    matches!(matches.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

impl<'a> Resolver<'a> {
    fn new(matches: &'a ArgMatches, path: Option<&Path>) -> Result<Self> {
        let mut file = toml::Table::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            file = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            // A run manifest carries its settings under `config`.
            if file.contains_key("subcommand") {
                file = match file.remove("config") {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::format(path, "manifest has no config table")),
                };
            }
            for key in file.keys() {
                if key != "seed" && !SECTIONS.contains(&key.as_str()) {
                    return Err(Error::format(path, format!("unknown section {key}")));
                }
            }
        }
        Ok(Self {
            matches,
            file,
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            config: toml::Table::new(),
        })
    }

    fn seed(&mut self, parsed: u64) -> Result<u64> {
        let mut seed = parsed;
        if let Some(v) = self.file.get("seed") {
            if !explicit(self.matches, "seed") {
                seed = v.clone().try_into().map_err(|e: toml::de::Error| Error::format(&self.path, format!("seed: {}", e.message())))?;
            }
        }
        self.config.insert("seed".into(), toml::Value::Integer(seed as i64));
        Ok(seed)
    }

    fn section<T: Args + Serialize + DeserializeOwned>(&mut self, name: &str, parsed: &T) -> Result<T> {
        let mut table = toml::Table::try_from(parsed).map_err(|e| pjfit_core::Error::Config(e.to_string()))?;
        if let Some(section) = self.file.get(name) {
            let Some(section) = section.as_table() else {
                return Err(Error::format(&self.path, format!("{name} must be a table")));
            };
            let known: BTreeSet<String> = T::augment_args(clap::Command::new("settings"))
                .get_arguments()
                .map(|a| a.get_id().to_string())
                .collect();
            for (key, value) in section {
                if !known.contains(key) {
                    return Err(Error::format(&self.path, format!("unknown setting {name}.{key}")));
                }
                if !explicit(self.matches, key) {
                    table.insert(key.clone(), value.clone());
                }
            }
        }
        let merged: T = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(&self.path, format!("{name}: {}", e.message())))?;
        self.record(name, &merged)?;
        Ok(merged)
    }

    fn record<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let table = toml::Table::try_from(value).map_err(|e| pjfit_core::Error::Config(e.to_string()))?;
        self.config.insert(name.into(), toml::Value::Table(table));
        Ok(())
    }
}

/// Nested tables joined into `outer_inner` keys.
pub fn flatten(table: &toml::Table) -> toml::Table {
    let mut out = toml::Table::new();
    for (key, value) in table {
        match value {
            toml::Value::Table(inner) => {
                for (k, v) in flatten(inner) {
                    out.insert(format!("{key}_{k}"), v);
                }
            }
            v => {
                out.insert(key.clone(), v.clone());
            }
        }
    }
    out
}

fn subcommand(name: &str) -> Option<clap::Command> {
    Cli::command().find_subcommand(name).cloned()
}

/// Resolved settings of a subcommand run with no flags and no file,
/// as they would appear in its manifest (before split inference).
pub fn default_settings(name: &str) -> Option<toml::Table> {
    let mut argv = vec!["pjfit".to_string(), name.to_string()];
    match name {
        "evaluate" | "serve-sim" => argv.extend(["--checkpoint".into(), "x".into()]),
        "plot" => argv.extend(["--reports".into(), "x".into()]),
        "gradcheck" => argv.push("--micro".into()),
        _ => {}
    }
    let matches = Cli::command().try_get_matches_from(argv).ok()?;
    let (_, sub) = matches.subcommand()?;
    let mut r = Resolver::new(sub, None).ok()?;
    let cli = Cli::from_arg_matches(&matches).ok()?;
    match cli.command {
        Command::Generate(c) => {
            r.seed(c.seed).ok()?;
            r.section("generator", &c.generator).ok()?;
        }
        Command::Train(c) => {
            r.seed(c.seed).ok()?;
            r.section("model", &c.model).ok()?;
            r.section("train", &c.train).ok()?;
            r.section("split", &c.split).ok()?;
        }
        Command::Evaluate(c) => {
            r.section("eval", &c.eval).ok()?;
            r.section("split", &c.split).ok()?;
        }
        Command::Ablate(c) => {
            r.section("ablate", &c.ablate).ok()?;
            r.section("model", &c.model).ok()?;
            r.section("train", &c.train).ok()?;
            r.section("split", &c.split).ok()?;
        }
        Command::Gradcheck(c) => {
            r.seed(c.seed).ok()?;
            r.section("gradcheck", &c.gradcheck).ok()?;
        }
        Command::ServeSim(c) => {
            r.section("serve", &c.serve).ok()?;
            r.section("split", &c.split).ok()?;
        }
        Command::Plot(c) => {
            r.section("plot", &c.plot).ok()?;
        }
    }
    Some(r.config)
}

/// The long help of one flag of a subcommand; `key` is a settings key
/// with the section prefix removed by [`flatten`] where it applies.
pub fn flag_help(name: &str, key: &str) -> Option<String> {
    let cmd = subcommand(name)?;
    let candidates: Vec<&str> = SECTIONS
        .iter()
        .filter_map(|s| key.strip_prefix(s).and_then(|k| k.strip_prefix('_')))
        .chain([key])
        .collect();
    for id in candidates {
        if let Some(arg) = cmd.get_arguments().find(|a| a.get_id() == id && a.get_long().is_some()) {
            let mut text = format!("--{} ", arg.get_long()?);
            if let Some(help) = arg.get_help() {
                let _ = write!(text, "{help} ");
            }
            let defaults: Vec<String> = arg.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect();
            if !defaults.is_empty() {
                let _ = write!(text, "[default: {}]", defaults.join(","));
            }
            return Some(text);
        }
    }
    None
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(matches: &ArgMatches) -> Result<i32> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| pjfit_core::Error::Validation(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match cli.command {
        Command::Generate(c) => generate(c, sub),
        Command::Train(c) => train_cmd(c, sub),
        Command::Evaluate(c) => evaluate(c, sub),
        Command::Ablate(c) => ablate(c, sub),
        Command::Gradcheck(c) => gradcheck(c, sub),
        Command::ServeSim(c) => serve_sim(c, sub),
        Command::Plot(c) => plot(c, sub),
    }
}

fn generate(c: GenerateCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let seed = r.seed(c.seed)?;
    let args = r.section("generator", &c.generator)?;
    let mut manifest = RunManifest::new("generate", Some(seed), r.config);
    let data = generate_synthetic(&args.to_config()?, seed)?;
    for path in save_synthetic(&c.out, &data)? {
        manifest.add_output(&c.out, &path)?;
    }
    println!(
        "wrote {} users, {} jobs, {} interactions to {}",
        data.candidates.len(),
        data.jobs.len(),
        data.interactions.len(),
        c.out.display()
    );
    manifest.finish(&c.out)?;
    Ok(0)
}

/// Data directory loaded and split.
struct Prepared {
    corpus: Corpus,
    candidates: Vec<pjfit_core::data::CandidateRecord>,
    jobs: Vec<pjfit_core::data::JobRecord>,
    vocab: Vocabulary,
    split_cfg: SplitConfig,
    split: pjfit_core::data::Split,
}

fn prepare(dir: &Path, split: &SplitArgs, manifest: &mut RunManifest) -> Result<Prepared> {
    for path in DataDir::files(dir) {
        manifest.add_input(&path)?;
    }
    let data = DataDir::load(dir)?;
    let split_cfg = split.resolve(&data.interactions)?;
    let parts = temporal_split(&data.interactions, &split_cfg)?;
    let corpus = Corpus::build(data.vocab.clone(), &data.candidates, &data.jobs, parts.history_cutoff)?;
    corpus.check_references(&data.interactions)?;
    Ok(Prepared {
        corpus,
        candidates: data.candidates,
        jobs: data.jobs,
        vocab: data.vocab,
        split_cfg,
        split: parts,
    })
}

fn groups(records: &[InteractionRecord], what: &str) -> Result<Vec<ImpressionGroup>> {
    let g = ImpressionGroup::collect(records)?;
    if g.is_empty() {
        return Err(pjfit_core::Error::Validation(format!("the {what} split is empty")).into());
    }
    Ok(g)
}

fn train_cmd(c: TrainCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let seed = r.seed(c.seed)?;
    let model_args = r.section("model", &c.model)?;
    let train_args = r.section("train", &c.train)?;
    let split_args = r.section("split", &c.split)?;
    let mut manifest = RunManifest::new("train", Some(seed), r.config);
    let data = prepare(&c.data, &split_args, &mut manifest)?;
    manifest.config.insert("split".into(), toml::Value::Table(toml::Table::try_from(SplitArgs::resolved(&data.split_cfg)).expect("plain table")));

    let train_cfg = train_args.to_config(seed);
    let mut model = Model::new(model_args.to_config(), data.corpus.dims(), seed)?;
    let (train_groups, val_groups) = (groups(&data.split.train, "training")?, groups(&data.split.val, "validation")?);
    let start = Instant::now();
    let outcome = train::train(&mut model, &data.corpus, &train_groups, &val_groups, &train_cfg, &mut || start.elapsed().as_secs_f64())?;

    let ckpt = c.out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, Some(&train_cfg))?;
    manifest.add_output(&c.out, &ckpt)?;
    let mut log = String::from("epoch\ttrain_loss\tval_gauc\telapsed_seconds\n");
    for e in &outcome.log {
        let _ = writeln!(log, "{}\t{}\t{}\t{:.3}", e.epoch, e.train_loss, e.val_gauc, e.elapsed_seconds);
    }
    let log_path = c.out.join("train_log.tsv");
    write_atomic(&log_path, log.as_bytes())?;
    manifest.add_untracked(&c.out, &log_path);
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_gauc": outcome.best_val_gauc,
        "epochs_run": outcome.epochs_run(),
        "train_loss": outcome.log.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
        "val_gauc": outcome.log.iter().map(|e| e.val_gauc).collect::<Vec<_>>(),
    });
    let summary_path = c.out.join("train_summary.json");
    write_atomic(&summary_path, format!("{summary:#}\n").as_bytes())?;
    manifest.add_output(&c.out, &summary_path)?;
    println!(
        "best epoch {} of {}: val GAUC {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.epochs_run(),
        outcome.best_val_gauc,
        ckpt.display()
    );
    manifest.finish(&c.out)?;
    Ok(0)
}

/// Hyperparameters attached to a report so `plot` can use them as x.
fn report_config(model: &ModelConfig, train: Option<&TrainConfig>) -> toml::Table {
    let mut table = flatten(&toml::Table::try_from(model).expect("plain table"));
    if let Some(t) = train {
        table.extend(toml::Table::try_from(t).expect("plain table"));
    }
    table
}

fn evaluate(c: EvaluateCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let eval = r.section("eval", &c.eval)?;
    let split_args = r.section("split", &c.split)?;
    let mut manifest = RunManifest::new("evaluate", None, r.config);
    manifest.add_input(&c.checkpoint)?;
    let ckpt = load_checkpoint(&c.checkpoint)?;
    let data = prepare(&c.data, &split_args, &mut manifest)?;
    manifest.config.insert("split".into(), toml::Value::Table(toml::Table::try_from(SplitArgs::resolved(&data.split_cfg)).expect("plain table")));
    if ckpt.model.dims() != data.corpus.dims() {
        return Err(pjfit_core::Error::Validation(format!(
            "checkpoint was built for {:?}, data has {:?}",
            ckpt.model.dims(),
            data.corpus.dims()
        ))
        .into());
    }
    let (records, set) = match eval.set {
        EvalSet::Val => (&data.split.val, "val"),
        EvalSet::Test => (&data.split.test, "test"),
    };
    let groups = groups(records, set)?;
    let report = train::evaluate(&ckpt.model, &data.corpus, &groups, eval.gauc_weighting)?;
    let config = report_config(ckpt.model.config(), ckpt.train.as_ref());
    let mut jsonl = serde_json::to_string(&json!({
        "kind": "summary",
        "set": set,
        "variant": ckpt.model.config().variant,
        "gauc": report.gauc,
        "recall_at_1": report.recall_at_1,
        "recall_at_5": report.recall_at_5,
        "mrr": report.mrr,
        "groups": groups.len(),
        "users": report.per_user_auc.len(),
        "skipped_users": report.skipped_users,
        "config": config,
    }))
    .expect("json");
    jsonl.push('\n');
    for (user, auc) in &report.per_user_auc {
        jsonl.push_str(&json!({"kind": "user", "user_id": user, "auc": auc}).to_string());
        jsonl.push('\n');
    }
    let text = format!(
        "set        {set}\nvariant    {}\ngroups     {}\nusers      {} ({} skipped)\nGAUC       {:.4}\nR@1        {:.4}\nR@5        {:.4}\nMRR        {:.4}\n",
        ckpt.model.config().variant,
        groups.len(),
        report.per_user_auc.len(),
        report.skipped_users,
        report.gauc,
        report.recall_at_1,
        report.recall_at_5,
        report.mrr
    );
    for (name, body) in [("report.jsonl", &jsonl), ("report.txt", &text)] {
        let path = c.out.join(name);
        write_atomic(&path, body.as_bytes())?;
        manifest.add_output(&c.out, &path)?;
    }
    print!("{text}");
    manifest.finish(&c.out)?;
    Ok(0)
}

fn ablate(c: AblateCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let ablate = r.section("ablate", &c.ablate)?;
    let model_args = r.section("model", &c.model)?;
    let train_args = r.section("train", &c.train)?;
    let split_args = r.section("split", &c.split)?;
    let mut manifest = RunManifest::new("ablate", None, r.config);
    let data = prepare(&c.data, &split_args, &mut manifest)?;
    manifest.config.insert("split".into(), toml::Value::Table(toml::Table::try_from(SplitArgs::resolved(&data.split_cfg)).expect("plain table")));
    let (tr, va, te) = (
        groups(&data.split.train, "training")?,
        groups(&data.split.val, "validation")?,
        groups(&data.split.test, "test")?,
    );
    let start = Instant::now();
    let table = run_ablation(
        &AblationData {
            corpus: &data.corpus,
            train: &tr,
            val: &va,
            test: &te,
        },
        &ablate.variants,
        &model_args.to_config(),
        &train_args.to_config(0),
        &ablate.seeds,
        &mut || start.elapsed().as_secs_f64(),
    )?;
    let mut jsonl = String::new();
    for row in &table.rows {
        jsonl.push_str(&serde_json::to_string(row).expect("json"));
        jsonl.push('\n');
    }
    let text = table.to_text();
    for (name, body) in [("ablation.jsonl", &jsonl), ("ablation.txt", &text)] {
        let path = c.out.join(name);
        write_atomic(&path, body.as_bytes())?;
        manifest.add_output(&c.out, &path)?;
    }
    print!("{text}");
    manifest.finish(&c.out)?;
    Ok(0)
}

fn gradcheck(c: GradcheckCmd, m: &ArgMatches) -> Result<i32> {
    if !c.micro {
        return Err(pjfit_core::Error::Validation("gradcheck needs --micro (the only supported configuration)".into()).into());
    }
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let seed = r.seed(c.seed)?;
    let args = r.section("gradcheck", &c.gradcheck)?;
    let mut manifest = RunManifest::new("gradcheck", Some(seed), r.config);
    let start = Instant::now();
    let report = micro_grad_check(seed, args.step)?;
    let passed = report.max_relative_error < args.tolerance;
    let worst = report.worst.as_ref().map(|(name, i)| format!("{name}[{i}]"));
    println!(
        "max relative error {:.3e} over {} entries (worst {}), {:.1}s: {}",
        report.max_relative_error,
        report.entries_checked,
        worst.as_deref().unwrap_or("none"),
        start.elapsed().as_secs_f64(),
        if passed { "ok" } else { "FAILED" }
    );
    let body = json!({
        "max_relative_error": report.max_relative_error,
        "max_tensor_relative_error": report.max_tensor_relative_error,
        "entries_checked": report.entries_checked,
        "worst": worst,
        "passed": passed,
    });
    let path = c.out.join("gradcheck.json");
    write_atomic(&path, format!("{body:#}\n").as_bytes())?;
    manifest.add_output(&c.out, &path)?;
    manifest.finish(&c.out)?;
    Ok(if passed { 0 } else { 2 })
}

fn serve_sim(c: ServeSimCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let serve = r.section("serve", &c.serve)?;
    let split_args = r.section("split", &c.split)?;
    let interval = (serve.refresh_hours * 3600.0).round();
    if !(interval >= 1.0 && interval.is_finite()) {
        return Err(pjfit_core::Error::Config(format!("refresh_hours {} must be at least one second", serve.refresh_hours)).into());
    }
    let interval = interval as u64;
    let mut manifest = RunManifest::new("serve-sim", None, r.config);
    manifest.add_input(&c.checkpoint)?;
    let model = load_checkpoint(&c.checkpoint)?.model;
    let data = prepare(&c.data, &split_args, &mut manifest)?;
    manifest.config.insert("split".into(), toml::Value::Table(toml::Table::try_from(SplitArgs::resolved(&data.split_cfg)).expect("plain table")));
    if model.dims() != data.corpus.dims() {
        return Err(pjfit_core::Error::Validation("checkpoint and data disagree on vocabulary, user or job counts".into()).into());
    }

    let stamps: BTreeMap<u64, u64> = data.split.test.iter().map(|r| (r.impression_id, r.timestamp)).collect();
    let mut window = groups(&data.split.test, "test")?;
    window.sort_by_key(|g| (stamps[&g.impression_id], g.impression_id));
    let window_start = data.split_cfg.test_start();

    let cache = IntentionCache::new(interval);
    let mut next_refresh = window_start;
    let mut corpus: Option<Corpus> = None;
    let (mut pairs, mut hits, mut misses, mut flops, mut refreshes) = (0usize, 0usize, 0usize, 0u64, 0usize);
    let mut max_diff = 0.0f64;
    let mut lines = String::new();
    for g in &window {
        let t = stamps[&g.impression_id];
        if t >= next_refresh {
            let at = next_refresh + (t - next_refresh) / interval * interval;
            next_refresh = at + interval;
            let fresh = Corpus::build(data.vocab.clone(), &data.candidates, &data.jobs, at)?;
            cache.refresh(&model, fresh.users(), at)?;
            corpus = Some(fresh);
            refreshes += 1;
        }
        let corpus = corpus.as_ref().expect("refreshed before the first impression");
        let snapshot = cache.snapshot();
        let user = corpus.user(g.user_id)?;
        let jobs = g.items.iter().map(|(j, _)| corpus.job(*j).cloned()).collect::<pjfit_core::Result<Vec<_>>>()?;
        let online = score_online(&model, &snapshot, user, &jobs)?;
        let mut diff = 0.0f64;
        for pair in &online.ranked {
            let full = model.score_pair(user, corpus.job(pair.job_id)?)?;
            diff = diff.max((full.y_hat - pair.y_hat).abs());
        }
        max_diff = max_diff.max(diff);
        pairs += jobs.len();
        flops += online.flops;
        if online.cache_hit {
            hits += 1;
        } else {
            misses += 1;
        }
        let ranked: Vec<_> = online.ranked.iter().map(|p| json!({"job_id": p.job_id, "y_hat": p.y_hat})).collect();
        lines.push_str(
            &json!({
                "impression_id": g.impression_id,
                "user_id": g.user_id,
                "timestamp": t,
                "generation": snapshot.generation,
                "cache_hit": online.cache_hit,
                "max_abs_diff": diff,
                "ranked": ranked,
            })
            .to_string(),
        );
        lines.push('\n');
    }
    let final_generation = cache.snapshot();
    let summary = json!({
        "impressions": window.len(),
        "pairs": pairs,
        "refreshes": refreshes,
        "final_generation": final_generation.generation,
        "refresh_seconds": interval,
        "window_start": window_start,
        "cache_hits": hits,
        "cache_misses": misses,
        "max_abs_diff": max_diff,
        "online_flops_per_pair": flops as f64 / pairs.max(1) as f64,
    });
    let scores = c.out.join("scores.jsonl");
    write_atomic(&scores, lines.as_bytes())?;
    let summary_path = c.out.join("summary.json");
    write_atomic(&summary_path, format!("{summary:#}\n").as_bytes())?;
    let dump = c.out.join("cache.bin");
    save_cache(&dump, &final_generation)?;
    for p in [&scores, &summary_path, &dump] {
        manifest.add_output(&c.out, p)?;
    }
    println!(
        "{} impressions, {} refreshes, max |cached - full| = {:.3e}, {:.0} flops per online pair",
        window.len(),
        refreshes,
        max_diff,
        flops as f64 / pairs.max(1) as f64
    );
    manifest.finish(&c.out)?;
    Ok(0)
}

#[derive(Deserialize)]
struct ReportSummary {
    kind: String,
    variant: Variant,
    #[serde(flatten)]
    fields: serde_json::Map<String, serde_json::Value>,
}

fn plot(c: PlotCmd, m: &ArgMatches) -> Result<i32> {
    let mut r = Resolver::new(m, c.config.as_deref())?;
    let args = r.section("plot", &c.plot)?;
    let mut manifest = RunManifest::new("plot", None, r.config);
    let mut points = Vec::new();
    for input in &c.reports {
        let path = if input.is_dir() { input.join("report.jsonl") } else { input.clone() };
        manifest.add_input(&path)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let first = text.lines().next().unwrap_or_default();
        let summary: ReportSummary = serde_json::from_str(first).map_err(|e| Error::Parse {
            path: path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        let missing = |what: &str| Error::format(&path, format!("report has no numeric {what}"));
        if summary.kind != "summary" {
            return Err(Error::format(&path, "first line is not a summary"));
        }
        let y = summary.fields.get(&args.metric).and_then(|v| v.as_f64()).ok_or_else(|| missing(&args.metric))?;
        let x = summary
            .fields
            .get("config")
            .and_then(|c| c.get(&args.x))
            .and_then(|v| v.as_f64())
            .ok_or_else(|| missing(&args.x))?;
        points.push(PlotPoint {
            series: summary.variant.to_string(),
            x,
            y,
        });
    }
    for path in write_plot(&c.out, &points, &args.x, &args.metric)? {
        manifest.add_output(&c.out, &path)?;
    }
    println!("plotted {} points to {}", points.len(), c.out.display());
    manifest.finish(&c.out)?;
    Ok(0)
}
