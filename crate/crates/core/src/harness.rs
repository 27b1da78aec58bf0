//! Experiment configuration, per-seed drivers and on-disk reports.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/<mode>/seed_<s>/history.csv
//!                      /rollouts.jsonl
//!                      /checkpoints/loop<k>_<phase>.ckpt
//!                      /final.ckpt
//! <out>/<mode>/summary.csv      one row per seed
//! <out>/<mode>/report.csv       per-phase mean and population std over seeds
//! ```
//!
//! A seed directory holding an `INCOMPLETE` file belongs to an aborted run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{config_err, DppoError, Result};
use crate::metaloop::{
    pretrain_base, run_baseline_with, run_metaloop_with, BaseConfig, BaselineMode, HistoryRow,
    LoopConfig, LoopHistory, PhaseObserver, RunHooks, SuiteSplit,
};
use crate::policy::{write_checkpoint, PolicyParams};
use crate::prefcheck::{run_checks, write_check_rows, CheckRow, PrefcheckConfig};
use crate::taskgen::{generate_suite, read_suite, write_suite, SampleSet, SuiteConfig};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dppo,
    RlOnly,
    SftOnly,
    Prefcheck,
}

impl Mode {
    /// Modes compared by [`cmd_report`].
    pub const TRAINING: [Mode; 3] = [Mode::Dppo, Mode::RlOnly, Mode::SftOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dppo => "dppo",
            Mode::RlOnly => "rl_only",
            Mode::SftOnly => "sft_only",
            Mode::Prefcheck => "prefcheck",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = DppoError;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Dppo, Mode::RlOnly, Mode::SftOnly, Mode::Prefcheck]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                config_err(format!(
                    "unknown mode `{s}` (expected dppo, rl_only, sft_only or prefcheck)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Pre-generated suite file; when absent the suite is generated from
    /// `[suite]`.
    pub suite_path: Option<PathBuf>,
    pub suite: SuiteConfig,
    pub base: BaseConfig,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub prefcheck: PrefcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dppo,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
            suite_path: None,
            suite: SuiteConfig::default(),
            base: BaseConfig::default(),
            loop_config: LoopConfig::default(),
            prefcheck: PrefcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            DppoError::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(config_err("seeds must be distinct"));
        }
        self.suite.validate()?;
        self.loop_config.validate()
    }

    pub fn load_suite(&self) -> Result<SampleSet> {
        match &self.suite_path {
            Some(path) => {
                let file = File::open(path).map_err(|e| {
                    config_err(format!("cannot open suite {}: {e}", path.display()))
                })?;
                read_suite(BufReader::new(file))
            }
            None => generate_suite(&self.suite, self.suite.seed),
        }
    }
}

/// Writes the configured suite to `out`.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<usize> {
    let suite = generate_suite(&config.suite, config.suite.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    write_suite(&suite, &mut w)?;
    w.flush()?;
    Ok(suite.len())
}

/// Result of one seed of one training mode.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub params: PolicyParams,
    pub history: LoopHistory,
}

impl SeedOutcome {
    pub fn summary(&self) -> SeedSummary {
        SeedSummary {
            seed: self.seed,
            initial_heldout: self.history.initial_heldout.overall,
            final_heldout: self.history.final_heldout(),
            general_before: self.history.initial_general,
            general_after: self.history.final_general(),
            retention: self.history.general_retention(),
            rollouts: self.history.budget().rollouts,
            grad_evals: self.history.budget().grad_evals,
            stops: self.history.stops().count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub general_before: f64,
    pub general_after: f64,
    /// `general_after - general_before`.
    pub retention: f64,
    pub rollouts: u64,
    pub grad_evals: u64,
    pub stops: usize,
}

/// Where a seed writes its artefacts.
struct SeedDir {
    dir: PathBuf,
}

impl SeedDir {
    fn create(dir: PathBuf) -> Result<Self> {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join(INCOMPLETE_MARKER), b"")?;
        Ok(Self { dir })
    }

    fn rollout_sink(&self) -> Result<Box<dyn Write + Send>> {
        Ok(Box::new(BufWriter::new(File::create(
            self.dir.join("rollouts.jsonl"),
        )?)))
    }

    fn finish(&self, outcome: &SeedOutcome) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join("history.csv"))?);
        outcome.history.write_csv(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(self.dir.join("final.ckpt"))?);
        write_checkpoint(&outcome.params, &mut w)?;
        w.flush()?;
        fs::remove_file(self.dir.join(INCOMPLETE_MARKER))?;
        Ok(())
    }
}

struct CheckpointWriter {
    dir: PathBuf,
}

impl PhaseObserver for CheckpointWriter {
    fn on_phase(&mut self, row: &HistoryRow, params: &PolicyParams) -> Result<()> {
        let name = format!(
            "loop{}_{}.ckpt",
            row.loop_index,
            row.phase.to_string().to_lowercase()
        );
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        write_checkpoint(params, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Base policy for a seed: pretrained on the seed's general training split.
pub fn base_policy(
    config: &ExperimentConfig,
    suite: &SampleSet,
    seed: u64,
) -> Result<PolicyParams> {
    let split = SuiteSplit::new(suite, config.loop_config.heldout_fraction, seed);
    pretrain_base(suite, &split, &config.base, seed)
}

/// Runs one training mode for one seed. With `out` set, artefacts go to
/// that seed directory; otherwise nothing is written.
///
/// Baselines get the budget consumed by the metaloop on the same seed.
pub fn run_seed(
    config: &ExperimentConfig,
    suite: &SampleSet,
    mode: Mode,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedOutcome> {
    let params = base_policy(config, suite, seed)?;
    let lc = &config.loop_config;
    let seed_dir = out.map(|d| SeedDir::create(d.to_path_buf())).transpose()?;
    let mut observer = seed_dir.as_ref().map(|d| CheckpointWriter {
        dir: d.dir.join("checkpoints"),
    });
    let hooks = RunHooks {
        rollout_sink: seed_dir.as_ref().map(|d| d.rollout_sink()).transpose()?,
        observer: observer.as_mut().map(|o| o as &mut dyn PhaseObserver),
    };

    let (params, history) = match mode {
        Mode::Dppo => run_metaloop_with(lc, suite, params, seed, hooks)?,
        Mode::RlOnly | Mode::SftOnly => {
            let (_, reference) =
                run_metaloop_with(lc, suite, params.clone(), seed, RunHooks::default())?;
            let baseline = if mode == Mode::RlOnly {
                BaselineMode::RlOnly
            } else {
                BaselineMode::SftOnly
            };
            run_baseline_with(
                baseline,
                lc,
                suite,
                params,
                seed,
                reference.budget().total(),
                hooks,
            )?
        }
        Mode::Prefcheck => return Err(config_err("prefcheck is not a training mode")),
    };
    let outcome = SeedOutcome {
        seed,
        params,
        history,
    };
    if let Some(d) = &seed_dir {
        d.finish(&outcome)?;
    }
    Ok(outcome)
}

/// Outcome of [`cmd_run`].
#[derive(Clone, Debug)]
pub enum RunOutput {
    Training { mode: Mode, seeds: Vec<SeedSummary> },
    Prefcheck(Vec<CheckRow>),
}

/// Runs the configured mode for every seed and writes per-seed outputs plus
/// the mode's aggregate report.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let mode_dir = config.out_dir.join(config.mode.name());
    fs::create_dir_all(&mode_dir)?;

    if config.mode == Mode::Prefcheck {
        let seed = config.seeds[0];
        let rows = run_checks(&config.prefcheck, &config.suite, seed)?;
        let mut w = BufWriter::new(File::create(mode_dir.join("report.csv"))?);
        write_check_rows(&rows, &mut w)?;
        w.flush()?;
        return Ok(RunOutput::Prefcheck(rows));
    }

    let suite = config.load_suite()?;
    let outcomes = config
        .seeds
        .par_iter()
        .map(|&seed| {
            info!(mode = %config.mode, seed, "starting seed");
            let dir = mode_dir.join(format!("seed_{seed}"));
            run_seed(config, &suite, config.mode, seed, Some(&dir)).inspect_err(|e| {
                warn!(mode = %config.mode, seed, error = %e, "seed aborted");
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let summaries: Vec<SeedSummary> = outcomes.iter().map(SeedOutcome::summary).collect();
    let mut w = csv::Writer::from_path(mode_dir.join("summary.csv"))?;
    for s in &summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    let histories: Vec<&LoopHistory> = outcomes.iter().map(|o| &o.history).collect();
    write_aggregate(&histories, File::create(mode_dir.join("report.csv"))?)?;
    Ok(RunOutput::Training {
        mode: config.mode,
        seeds: summaries,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    row: usize,
    #[serde(rename = "loop")]
    loop_index: usize,
    phase: &'a str,
    seeds: usize,
    heldout_mean: f64,
    heldout_std: f64,
    general_mean: f64,
    general_std: f64,
}

/// Per-phase cross-seed statistics; row 0 is the untrained base policy.
pub fn write_aggregate<W: Write>(histories: &[&LoopHistory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let initial_h: Vec<f64> = histories
        .iter()
        .map(|h| h.initial_heldout.overall)
        .collect();
    let initial_g: Vec<f64> = histories.iter().map(|h| h.initial_general).collect();
    let (hm, hs) = mean_std(&initial_h);
    let (gm, gs) = mean_std(&initial_g);
    w.serialize(AggregateRow {
        row: 0,
        loop_index: 0,
        phase: "base",
        seeds: histories.len(),
        heldout_mean: hm,
        heldout_std: hs,
        general_mean: gm,
        general_std: gs,
    })?;
    let n_rows = histories.iter().map(|h| h.rows.len()).max().unwrap_or(0);
    for i in 0..n_rows {
        let rows: Vec<&HistoryRow> = histories.iter().filter_map(|h| h.rows.get(i)).collect();
        let (hm, hs) = mean_std(&rows.iter().map(|r| r.heldout.overall).collect::<Vec<_>>());
        let (gm, gs) = mean_std(&rows.iter().map(|r| r.general).collect::<Vec<_>>());
        let phase = rows[0].phase.to_string();
        w.serialize(AggregateRow {
            row: i + 1,
            loop_index: rows[0].loop_index,
            phase: &phase,
            seeds: rows.len(),
            heldout_mean: hm,
            heldout_std: hs,
            general_mean: gm,
            general_std: gs,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub present: bool,
    pub seeds: usize,
    pub heldout_mean: Option<f64>,
    pub heldout_std: Option<f64>,
    pub general_before_mean: Option<f64>,
    pub general_after_mean: Option<f64>,
    pub retention_mean: Option<f64>,
    pub retention_std: Option<f64>,
}

/// One row of `curves.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: String,
    pub seed: u64,
    #[serde(rename = "loop")]
    pub loop_index: usize,
    pub phase: String,
    pub heldout: f64,
    pub general: f64,
}

#[derive(Deserialize)]
struct HistoryCurveRecord {
    #[serde(rename = "loop")]
    loop_index: usize,
    phase: String,
    heldout_embodied: f64,
    general_success: f64,
}

fn completed_seeds(mode_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !mode_dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(mode_dir)? {
        let path = entry?.path();
        let Some(seed) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if path.join(INCOMPLETE_MARKER).exists() || !path.join("history.csv").exists() {
            continue;
        }
        out.push((seed, path));
    }
    out.sort();
    Ok(out)
}

/// Reads every completed run under `run_dir` and writes `comparison.csv` and
/// `curves.csv` into it. Modes without runs get an absent row.
pub fn cmd_report(run_dir: &Path) -> Result<(Vec<ComparisonRow>, Vec<CurveRow>)> {
    if !run_dir.is_dir() {
        return Err(config_err(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    let mut comparison = Vec::new();
    let mut curves = Vec::new();
    for mode in Mode::TRAINING {
        let mode_dir = run_dir.join(mode.name());
        let seeds = completed_seeds(&mode_dir)?;
        let summaries: BTreeMap<u64, SeedSummary> = if mode_dir.join("summary.csv").exists() {
            csv::Reader::from_path(mode_dir.join("summary.csv"))?
                .deserialize::<SeedSummary>()
                .map(|r| r.map(|s| (s.seed, s)).map_err(DppoError::from))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let used: Vec<&SeedSummary> = seeds.iter().filter_map(|(s, _)| summaries.get(s)).collect();
        if used.is_empty() {
            comparison.push(ComparisonRow {
                mode: mode.name().into(),
                present: false,
                seeds: 0,
                heldout_mean: None,
                heldout_std: None,
                general_before_mean: None,
                general_after_mean: None,
                retention_mean: None,
                retention_std: None,
            });
            continue;
        }
        let pick = |f: fn(&SeedSummary) -> f64| used.iter().map(|s| f(s)).collect::<Vec<_>>();
        let (hm, hs) = mean_std(&pick(|s| s.final_heldout));
        let (rm, rs) = mean_std(&pick(|s| s.retention));
        comparison.push(ComparisonRow {
            mode: mode.name().into(),
            present: true,
            seeds: used.len(),
            heldout_mean: Some(hm),
            heldout_std: Some(hs),
            general_before_mean: Some(mean_std(&pick(|s| s.general_before)).0),
            general_after_mean: Some(mean_std(&pick(|s| s.general_after)).0),
            retention_mean: Some(rm),
            retention_std: Some(rs),
        });
        for (seed, dir) in &seeds {
            for rec in
                csv::Reader::from_path(dir.join("history.csv"))?.deserialize::<HistoryCurveRecord>()
            {
                let rec = rec?;
                curves.push(CurveRow {
                    mode: mode.name().into(),
                    seed: *seed,
                    loop_index: rec.loop_index,
                    phase: rec.phase,
                    heldout: rec.heldout_embodied,
                    general: rec.general_success,
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(run_dir.join("comparison.csv"))?;
    for r in &comparison {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(run_dir.join("curves.csv"))?;
    for r in &curves {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((comparison, curves))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_round_trip() {
        for m in [Mode::Dppo, Mode::RlOnly, Mode::SftOnly, Mode::Prefcheck] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("grpo".parse::<Mode>().is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = ExperimentConfig::from_toml(
            r#"
mode = "rl_only"
seeds = [3, 4]

[suite]
samples_per_skill = 20

[loop]
loops = 2

[loop.stagnation]
threshold = 0.8
"#,
        )
        .unwrap();
        assert_eq!(c.mode, Mode::RlOnly);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.suite.samples_per_skill, 20);
        assert_eq!(c.loop_config.loops, 2);
        assert_eq!(c.loop_config.stagnation.threshold, 0.8);
        assert_eq!(
            c.loop_config.rollouts_per_sample,
            LoopConfig::default().rollouts_per_sample
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[loop]\nloopz = 3\n").unwrap_err();
        assert!(matches!(err, DppoError::Config(_)));
        assert!(err.to_string().contains("loopz"), "{err}");
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
    }

    #[test]
    fn skill_count_overrides_parse() {
        let c = ExperimentConfig::from_toml("[suite.counts]\nTaskPlanning = 12\n").unwrap();
        assert_eq!(
            c.suite
                .count_for(crate::taskgen::SkillDimension::TaskPlanning),
            12
        );
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert!(mean_std(&[]).0.is_nan());
    }
}
