//! Command-line front end: run configuration, the `simulate`, `impute`,
//! `analyze` and `tipping` commands, and reproducibility manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{analyze_all, simulate_scenario_with, AnalysisSpec, PooledResult, SCENARIO_LATENT_SD};
use crate::controlled::{generate_imputations, tipping_grid_from_draws, Mechanism, TippingGrid};
use crate::data::{load_dataset, ColumnSchema, Dataset, VisitType};
use crate::design::Design;
use crate::family::FamilyKind;
use crate::fcs::{fcs_draws, FcsSpec, FcsVisit};
use crate::mda::{run_mda, Diagnostics, McmcConfig, ModelSpec, PosteriorDraw, PriorSpec, VisitModel};
use crate::skewt::SkewTHyper;
use crate::{Error, Result};

pub const SEED_ENV: &str = "MONOIMPUTE_SEED";
pub const OUT_ENV: &str = "MONOIMPUTE_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub schema: ColumnSchema,
}

/// Per-visit model; unset fields take the defaults for the visit type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisitModelConfig {
    pub family: Option<FamilyKind>,
    /// Terms such as `y0`, `g:y1` or `y2[3]`; all covariates and earlier visits by default.
    pub predictors: Option<Vec<String>>,
    pub prior: PriorSpec,
    pub skew: SkewTHyper,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcsVisitConfig {
    pub family: Option<FamilyKind>,
    /// All covariates and all other visits by default.
    pub predictors: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcsConfig {
    pub sweeps: usize,
    /// Visit names in sweep order.
    pub order: Vec<String>,
    pub visits: Vec<FcsVisitConfig>,
}

impl Default for FcsConfig {
    fn default() -> Self {
        FcsConfig { sweeps: 200, order: Vec::new(), visits: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Mda,
    Fcs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TippingConfig {
    pub delta0: Vec<f64>,
    pub delta1: Vec<f64>,
}

/// A complete run description; `mcmc.draws` is the number of imputations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: Vec<VisitModelConfig>,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default)]
    pub fcs: FcsConfig,
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub tipping: Option<TippingConfig>,
    #[serde(default)]
    pub analysis: Option<AnalysisSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Also write every imputation into one file with an `imputation` column.
    #[serde(default)]
    pub concatenated: bool,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        Ok(cfg)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        load_dataset(&self.data.path, &self.data.schema)
    }

    pub fn model_spec(&self, ds: &Dataset) -> Result<ModelSpec> {
        if self.model.is_empty() {
            return Ok(ModelSpec::default_for(ds));
        }
        if self.model.len() != ds.p() {
            return Err(Error::config(format!("model: {} entries for {} visits", self.model.len(), ds.p())));
        }
        let visits = self
            .model
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let design = match &m.predictors {
                    Some(t) => Design::parse(ds, t).map_err(|e| Error::config(format!("model[{j}].predictors: {e}")))?,
                    None => Design::main_effects(ds, j),
                };
                Ok(VisitModel {
                    family: m.family.unwrap_or_else(|| FamilyKind::default_for(ds.visit_types[j])),
                    design,
                    prior: m.prior.clone(),
                    skew: m.skew,
                })
            })
            .collect::<Result<_>>()?;
        let spec = ModelSpec { visits };
        spec.validate(ds).map_err(|e| Error::config(format!("model: {e}")))?;
        Ok(spec)
    }

    pub fn fcs_spec(&self, ds: &Dataset) -> Result<FcsSpec> {
        let mut spec = FcsSpec::default_for(ds);
        spec.sweeps = self.fcs.sweeps;
        if !self.fcs.visits.is_empty() {
            if self.fcs.visits.len() != ds.p() {
                return Err(Error::config(format!("fcs.visits: {} entries for {} visits", self.fcs.visits.len(), ds.p())));
            }
            for (j, v) in self.fcs.visits.iter().enumerate() {
                if let Some(f) = v.family {
                    spec.visits[j].family = f;
                }
                if let Some(t) = &v.predictors {
                    spec.visits[j] = FcsVisit {
                        family: spec.visits[j].family,
                        design: Design::parse(ds, t).map_err(|e| Error::config(format!("fcs.visits[{j}].predictors: {e}")))?,
                    };
                }
            }
        }
        spec.order = self
            .fcs
            .order
            .iter()
            .map(|n| {
                ds.visit_names.iter().position(|v| v == n).ok_or_else(|| Error::config(format!("fcs.order: unknown visit `{n}`")))
            })
            .collect::<Result<_>>()?;
        spec.validate(ds)?;
        Ok(spec)
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.mcmc.validate()?;
        self.model_spec(ds)?;
        if self.engine == Engine::Fcs {
            self.fcs_spec(ds)?;
        }
        self.mechanism.validate(ds)?;
        if let Some(a) = &self.analysis {
            a.validate(ds)?;
        }
        if let Some(t) = &self.tipping {
            if t.delta0.is_empty() || t.delta1.is_empty() {
                return Err(Error::config("tipping: delta0 and delta1 must be non-empty"));
            }
            if t.delta0.iter().chain(&t.delta1).any(|v| !v.is_finite()) {
                return Err(Error::config("tipping: non-finite shift"));
            }
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub max_rhat: Option<f64>,
    pub mean_abs_autocorr: Option<f64>,
    pub beta_acceptance: Vec<f64>,
    pub continuous_acceptance: Option<f64>,
}

impl From<&Diagnostics> for DiagnosticsSummary {
    fn from(d: &Diagnostics) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        let ac: Vec<f64> = d.autocorr.iter().copied().filter(|v| v.is_finite()).collect();
        DiagnosticsSummary {
            max_rhat: finite(d.max_rhat()),
            mean_abs_autocorr: (!ac.is_empty()).then(|| ac.iter().map(|v| v.abs()).sum::<f64>() / ac.len() as f64),
            beta_acceptance: d.beta_acceptance.iter().copied().filter(|v| v.is_finite()).collect(),
            continuous_acceptance: finite(d.continuous_acceptance),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub files: Vec<FileRecord>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileRecord> {
    fs::write(dir.join(name), bytes)?;
    Ok(FileRecord { name: name.into(), sha256: sha256_hex(bytes) })
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn dataset_csv(ds: &Dataset, token: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf, token)?;
    Ok(buf)
}

/// Dataset CSV plus truth manifest for one simulated scenario.
pub fn cmd_simulate(scenario: u8, n: usize, seed: u64, latent_sd: f64, out: &Path, full: Option<&Path>) -> Result<()> {
    let sc = simulate_scenario_with(scenario, n, seed, latent_sd)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    sc.observed.save_csv(out, "NA")?;
    if let Some(f) = full {
        sc.full.save_csv(f, "NA")?;
    }
    let y1 = if scenario == 1 {
        serde_json::json!({"family": "normal", "coef": {"(intercept)": 0.5, "y0": 0.5, "g": 1.0}, "precision": 1.0})
    } else {
        serde_json::json!({
            "family": "skew_t",
            "coef": {"(intercept)": 0.5 - 2.0 * (2.0 / std::f64::consts::PI).sqrt(), "y0": 0.5, "g": 1.0},
            "psi": crate::analysis::SCENARIO_SKEW_PSI, "precision": 1.0, "nu": crate::analysis::SCENARIO_SKEW_NU
        })
    };
    let truth = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "scenario": scenario,
        "n": n,
        "seed": seed,
        "data_sha256": sha256_hex(&fs::read(out)?),
        "schema": ColumnSchema::new(&["y0", "g"], &[("y1", VisitType::Continuous), ("y2", VisitType::Binary)]),
        "parameters": {
            "y0": "N(0, 1)",
            "y1": y1,
            "y2": {
                "family": "probit",
                "event_level": 1,
                "coef": {"(intercept)": -0.5, "y0": 0.25, "y1": 0.8},
                "latent_sd": latent_sd,
            },
        },
        "mechanism": {
            "arms": "first n/2 subjects g = 0, the rest g = 1",
            "dropout": {"pr_s0": "expit(0.3 y0 - 3)", "pr_s1_given_s_ge_1": "expit(0.3 y0 + y1 - 2)"},
            "intermittent": {"probability": 0.2, "cells": "visits before the last observed one"},
        },
    });
    let path = out.with_extension("truth.json");
    fs::write(path, serde_json::to_string_pretty(&truth)?)?;
    Ok(())
}

/// Posterior draws of the configured engine.
fn engine_draws(cfg: &RunConfig, ds: &Dataset, spec: &ModelSpec) -> Result<(Vec<PosteriorDraw>, Option<Diagnostics>)> {
    match cfg.engine {
        Engine::Mda => {
            let out = run_mda(ds, spec, &cfg.mcmc)?;
            Ok((out.draws, Some(out.diagnostics)))
        }
        Engine::Fcs => {
            let fspec = cfg.fcs_spec(ds)?;
            Ok((fcs_draws(ds, &fspec, spec, cfg.mcmc.draws, cfg.mcmc.seed)?, None))
        }
    }
}

pub struct ImputeOutput {
    pub datasets: Vec<Dataset>,
    pub manifest: Manifest,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.clone().ok_or_else(|| Error::config("output: no output directory given"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn cmd_impute(cfg: &RunConfig) -> Result<ImputeOutput> {
    let ds = cfg.load_data()?;
    cfg.validate(&ds)?;
    let spec = cfg.model_spec(&ds)?;
    let dir = out_dir(cfg)?;
    let (draws, diag) = engine_draws(cfg, &ds, &spec)?;
    let datasets = generate_imputations(&ds, &spec, &draws, &cfg.mechanism, cfg.mcmc.seed)?;
    let token = &cfg.data.schema.missing_token;
    let mut files = Vec::new();
    for (k, d) in datasets.iter().enumerate() {
        files.push(write_file(&dir, &format!("imp_{:04}.csv", k + 1), &dataset_csv(d, token)?)?);
    }
    if cfg.concatenated {
        let mut buf = Vec::new();
        for (k, d) in datasets.iter().enumerate() {
            let body = dataset_csv(d, token)?;
            let text = String::from_utf8(body).expect("csv is utf-8");
            for (r, line) in text.lines().enumerate() {
                if r == 0 && k == 0 {
                    writeln!(buf, "imputation,{line}")?;
                } else if r > 0 {
                    writeln!(buf, "{},{line}", k + 1)?;
                }
            }
        }
        files.push(write_file(&dir, "imputations.csv", &buf)?);
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        command: "impute".into(),
        seed: cfg.mcmc.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        diagnostics: diag.as_ref().map(DiagnosticsSummary::from),
        files,
    };
    write_manifest(&dir, &manifest)?;
    Ok(ImputeOutput { datasets, manifest })
}

/// Read `imp_*.csv` files of a directory in name order.
pub fn read_imputations(dir: &Path, schema: &ColumnSchema) -> Result<Vec<Dataset>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("imp_") && n.ends_with(".csv"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no imp_*.csv files in {}", dir.display()),
        )));
    }
    names.iter().map(|p| load_dataset(p, schema)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

pub fn cmd_analyze(dir: &Path, schema: &ColumnSchema, analysis: &AnalysisSpec) -> Result<PooledResult> {
    let sets = read_imputations(dir, schema)?;
    sets.iter().try_for_each(|d| {
        if d.missing_count() > 0 {
            Err(Error::domain("imputed dataset contains missing cells"))
        } else {
            Ok(())
        }
    })?;
    analyze_all(&sets, analysis)
}

pub fn cmd_tipping(cfg: &RunConfig) -> Result<TippingGrid> {
    let ds = cfg.load_data()?;
    cfg.validate(&ds)?;
    let t = cfg.tipping.as_ref().ok_or_else(|| Error::config("tipping: no grid given"))?;
    let analysis = cfg.analysis.as_ref().ok_or_else(|| Error::config("analysis: required for a tipping grid"))?;
    crate::controlled::Mechanism::Delta(Default::default()).validate(&ds)?;
    let spec = cfg.model_spec(&ds)?;
    let dir = out_dir(cfg)?;
    let (draws, diag) = engine_draws(cfg, &ds, &spec)?;
    let grid = tipping_grid_from_draws(&ds, &spec, &draws, cfg.mcmc.seed, &t.delta0, &t.delta1, analysis)?;
    let mut buf = Vec::new();
    grid.write_csv(&mut buf)?;
    let files = vec![write_file(&dir, "tipping.csv", &buf)?];
    write_manifest(
        &dir,
        &Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            command: "tipping".into(),
            seed: cfg.mcmc.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            diagnostics: diag.as_ref().map(DiagnosticsSummary::from),
            files,
        },
    )?;
    Ok(grid)
}

#[derive(Debug, Parser)]
#[command(name = "monoimpute", version, about = "Controlled multiple imputation for longitudinal data")]
struct Cli {
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one of the two validation scenarios.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        scenario: u8,
        #[arg(long)]
        n: usize,
        #[arg(long, env = SEED_ENV)]
        seed: u64,
        /// CSV path; the truth manifest is written next to it.
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        /// Also write the complete data before missingness.
        #[arg(long)]
        full: Option<PathBuf>,
        /// Noise sd of the visit-2 probit latent.
        #[arg(long, default_value_t = SCENARIO_LATENT_SD)]
        latent_sd: f64,
    },
    /// Impute and write one CSV per imputation plus a manifest.
    Impute(RunArgs),
    /// Fit the analysis model to each imputation and pool.
    Analyze {
        /// Directory holding `imp_*.csv`.
        #[arg(long)]
        dir: PathBuf,
        /// Run configuration; the directory's manifest is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Delta-adjusted tipping-point grid.
    Tipping(RunArgs),
}

fn resolve(args: &RunArgs, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.mcmc.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output = Some(o.clone());
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn set_workers(n: Option<usize>) {
    if let Some(n) = n.filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, n, seed, out, full, latent_sd } => {
            set_workers(cli.workers);
            cmd_simulate(scenario, n, seed, latent_sd, &out, full.as_deref())
        }
        Command::Impute(a) => {
            let cfg = resolve(&a, cli.workers)?;
            set_workers(cfg.workers);
            let out = cmd_impute(&cfg)?;
            println!("wrote {} imputations to {}", out.datasets.len(), cfg.output.unwrap().display());
            if let Some(r) = out.manifest.diagnostics.and_then(|d| d.max_rhat) {
                if r > 1.1 {
                    log::warn!("max split R-hat {r:.3} exceeds 1.1");
                }
            }
            Ok(())
        }
        Command::Analyze { dir, config, out, format } => {
            set_workers(cli.workers);
            let cfg = match config {
                Some(p) => RunConfig::from_path(&p)?,
                None => {
                    let text = fs::read_to_string(dir.join("manifest.json"))?;
                    serde_json::from_str::<Manifest>(&text)?.config
                }
            };
            let analysis = cfg.analysis.as_ref().ok_or_else(|| Error::config("analysis: not configured"))?;
            let pooled = cmd_analyze(&dir, &cfg.data.schema, analysis)?;
            let out_dir = out.unwrap_or_else(|| dir.clone());
            fs::create_dir_all(&out_dir)?;
            let mut csv_buf = Vec::new();
            pooled.write_csv(&mut csv_buf)?;
            fs::write(out_dir.join("pooled.csv"), &csv_buf)?;
            let json = serde_json::to_string_pretty(&pooled)?;
            fs::write(out_dir.join("pooled.json"), &json)?;
            match format {
                Format::Csv => print!("{}", String::from_utf8_lossy(&csv_buf)),
                Format::Json => println!("{json}"),
            }
            Ok(())
        }
        Command::Tipping(a) => {
            let cfg = resolve(&a, cli.workers)?;
            set_workers(cfg.workers);
            let grid = cmd_tipping(&cfg)?;
            let mut buf = Vec::new();
            grid.write_csv(&mut buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
            Ok(())
        }
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run(std::env::args_os())
}
