//! Declarative experiments and ablation sweeps over the proxy task.
//!
//! Reports are plain text and CSV. Everything in them is a function of the config, so
//! repeated runs produce byte-identical files; wall-clock time goes to `runtime.txt`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{build_bank, LayerStrategy};
use crate::bank_io::{
    avg_layer_index, export_heatmap, layer_histogram, roi_similarity, HeatmapGrid, HeatmapKind,
    Report, Table,
};
use crate::error::{Error, Result};
use crate::grounding::{AllocationMode, GroundingPosition};
use crate::proxy::{train, EvalMetrics, HeadConfig, ProxyConfig, TrainOutcome};

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_heatmaps() -> Vec<HeatmapKind> {
    vec![
        HeatmapKind::AvgLayerIndex,
        HeatmapKind::RoiSimilarity,
        HeatmapKind::LayerHistogram,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_heatmaps")]
    pub heatmaps: Vec<HeatmapKind>,
    #[serde(default)]
    pub task: ProxyConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ExperimentConfig {
    pub fn new(task: ProxyConfig, head: HeadConfig, seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            out_dir: default_out_dir(),
            heatmaps: default_heatmaps(),
            task,
            head,
        }
    }

    /// Parses and validates TOML; `origin` only labels error messages.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("`seeds` must list at least one seed"));
        }
        if self.head.top_k == 0 {
            return Err(Error::config("`head.top_k` must be >= 1"));
        }
        self.task.validate()
    }
}

/// Memoizes finished runs by `(task, head, seed)` so overlapping sweeps train once.
#[derive(Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, TrainOutcome>>,
}

impl RunCache {
    fn key(task: &ProxyConfig, head: HeadConfig, seed: u64) -> String {
        format!("{task:?}|{head:?}|{seed}")
    }

    pub fn train(&self, task: &ProxyConfig, head: HeadConfig, seed: u64) -> Result<TrainOutcome> {
        let key = Self::key(task, head, seed);
        if let Some(hit) = self.runs.lock().expect("run cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let out = train(task, head, seed)?;
        self.runs
            .lock()
            .expect("run cache poisoned")
            .insert(key, out.clone());
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.runs.lock().expect("run cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<(u64, TrainOutcome)>,
    pub heatmaps: Vec<HeatmapGrid>,
}

impl ExperimentResult {
    fn test(&self) -> Vec<&EvalMetrics> {
        self.runs.iter().map(|(_, o)| &o.test).collect()
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        mean(&self.test().iter().map(|m| m.accuracy).collect::<Vec<_>>())
    }

    pub fn mean_agreement(&self) -> f64 {
        mean(&self.test().iter().map(|m| m.agreement).collect::<Vec<_>>())
    }

    /// Per role, agreement averaged over seeds.
    pub fn mean_role_agreement(&self) -> Vec<f64> {
        let roles = self.config.task.num_roles;
        (0..roles)
            .map(|r| mean(&self.test().iter().map(|m| m.role_agreement[r]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn report(&self) -> Report {
        let task = &self.config.task;
        let head = self.config.head;
        let test: Vec<f64> = self.test().iter().map(|m| m.accuracy).collect();
        let loss: Vec<f64> = self.runs.iter().map(|(_, o)| o.train_loss_final()).collect();
        let mut r = Report::default();
        r.set("mode", head.mode.label());
        r.set("top_k", head.top_k);
        r.set("effective_top_k", effective_top_k(task, head));
        r.set("position", head.position.label());
        r.set("variant", format!("{:?}", task.variant));
        r.set("bank_strategy", task.bank_strategy.label());
        r.set("bank_layers", format!("{:?}", task.bank_layers().unwrap_or_default()));
        r.set("seeds", format!("{:?}", self.config.seeds));
        r.set("steps", task.steps);
        r.set("lr", task.lr);
        r.set("paper_lr", task.paper_lr);
        r.set("test_accuracy", f4(mean(&test)));
        r.set("test_accuracy_std", f4(std_dev(&test)));
        r.set(
            "train_accuracy",
            f4(mean(&self.runs.iter().map(|(_, o)| o.train.accuracy).collect::<Vec<_>>())),
        );
        r.set(
            "initial_test_accuracy",
            f4(mean(&self.runs.iter().map(|(_, o)| o.initial_test.accuracy).collect::<Vec<_>>())),
        );
        r.set("train_loss_final", f4(mean(&loss)));
        r.set("agreement", f4(self.mean_agreement()));
        let degenerate = self.test().iter().any(|m| m.degenerate());
        r.set("routing_degenerate", degenerate);

        let mut seeds = Table::new(
            "per_seed",
            &["seed", "test_accuracy", "train_accuracy", "train_loss_final", "agreement"],
        );
        for (seed, o) in &self.runs {
            seeds.push(vec![
                seed.to_string(),
                f4(o.test.accuracy),
                f4(o.train.accuracy),
                f4(o.train_loss_final()),
                f4(o.test.agreement),
            ]);
        }
        r.tables.push(seeds);

        let ids = task.bank_layers().unwrap_or_default();
        let mut freq = Table::new("selection_frequency", &["position", "layer_id", "frequency"]);
        for (l, id) in ids.iter().enumerate() {
            let f = mean(&self.test().iter().map(|m| m.selection_frequency[l]).collect::<Vec<_>>());
            freq.push(vec![l.to_string(), id.to_string(), f4(f)]);
        }
        r.tables.push(freq);

        let positions = task.signal_positions().unwrap_or_default();
        let mut roles = Table::new("role_agreement", &["role", "signal_positions", "agreement"]);
        for (role, a) in self.mean_role_agreement().iter().enumerate() {
            roles.push(vec![role.to_string(), format!("{:?}", positions[role]), f4(*a)]);
        }
        r.tables.push(roles);

        let mut header = vec!["step".to_string()];
        header.extend(self.runs.iter().map(|(s, _)| format!("seed_{s}")));
        let mut curve = Table {
            name: "train_loss".into(),
            header,
            rows: Vec::new(),
        };
        if let Some((_, first)) = self.runs.first() {
            for (i, p) in first.trace.iter().enumerate() {
                let mut row = vec![p.step.to_string()];
                row.extend(self.runs.iter().map(|(_, o)| f4(o.trace[i].train_loss)));
                curve.push(row);
            }
        }
        r.tables.push(curve);
        r
    }

    /// Writes `metrics.txt` and one CSV per heatmap under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join("metrics.txt");
        self.report().write(&metrics)?;
        let mut written = vec![metrics];
        for grid in &self.heatmaps {
            let (csv, meta) = export_heatmap(grid, &dir.join("heatmaps"), grid.kind.label())?;
            written.push(csv);
            written.push(meta);
        }
        Ok(written)
    }
}

fn effective_top_k(task: &ProxyConfig, head: HeadConfig) -> usize {
    match head.position.allocation(head.mode) {
        AllocationMode::TokenAdaptive if head.position == GroundingPosition::PreReasoning => {
            head.top_k.min(task.num_layers)
        }
        _ => task.num_layers,
    }
}

/// Heatmaps for the first test clip under the first seed's trained model.
fn heatmaps(config: &ExperimentConfig, outcome: &TrainOutcome) -> Result<Vec<HeatmapGrid>> {
    let task = &config.task;
    let clip = crate::proxy::generate_task(
        &ProxyConfig {
            train_samples: 1,
            test_samples: 1,
            ..task.clone()
        },
        config.seeds[0],
    )?;
    let sample = &clip.test[0];
    let f = outcome.model.forward(&outcome.store, sample)?;
    let ids = task.bank_layers()?;
    let (rows, cols) = task.shape().merged_shape();
    config
        .heatmaps
        .iter()
        .map(|kind| match kind {
            HeatmapKind::AvgLayerIndex => avg_layer_index(&f.routing, &ids, task.num_frames, rows, cols),
            HeatmapKind::LayerHistogram => layer_histogram(&f.routing, &ids),
            HeatmapKind::RoiSimilarity => {
                let bank = build_bank(&sample.raw, &outcome.model.bank, &outcome.store)?;
                roi_similarity(&bank, f.routing.top1()[0], 0, rows, cols)
            }
        })
        .collect()
}

/// Trains every seed (in parallel) and assembles metrics and heatmaps.
pub fn run_experiment(config: &ExperimentConfig, cache: &RunCache) -> Result<ExperimentResult> {
    config.validate()?;
    let runs: Vec<(u64, TrainOutcome)> = config
        .seeds
        .par_iter()
        .map(|&seed| Ok((seed, cache.train(&config.task, config.head, seed)?)))
        .collect::<Result<_>>()?;
    let heatmaps = heatmaps(config, &runs[0].1)?;
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        heatmaps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    BankConstruction,
    BankSize,
    Compactness,
    Allocation,
    Position,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::BankConstruction,
        AblationAxis::BankSize,
        AblationAxis::Compactness,
        AblationAxis::Allocation,
        AblationAxis::Position,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationAxis::BankConstruction => "bank_construction",
            AblationAxis::BankSize => "bank_size",
            AblationAxis::Compactness => "compactness",
            AblationAxis::Allocation => "allocation",
            AblationAxis::Position => "position",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation axis `{s}`; expected one of {}",
                    Self::ALL.map(|a| a.label()).join(", ")
                ))
            })
    }
}

/// One configured row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub task: ProxyConfig,
    pub head: HeadConfig,
}

/// The variant set of `axis`, in table order.
///
/// Bank axes pin the signal to the base config's source layers so only the bank moves.
pub fn ablation_variants(axis: AblationAxis, base: &ProxyConfig, head: HeadConfig) -> Result<Vec<Variant>> {
    base.validate()?;
    let s = base.num_layers;
    let pinned = ProxyConfig {
        signal_source_override: Some(base.signal_sources()?),
        ..base.clone()
    };
    let variant = |name: String, task: ProxyConfig, head: HeadConfig| Variant { name, task, head };
    let out = match axis {
        AblationAxis::BankConstruction => [LayerStrategy::FirstHalf, LayerStrategy::Uniform, LayerStrategy::LatterHalf]
            .into_iter()
            .map(|strategy| {
                variant(
                    strategy.label(),
                    ProxyConfig {
                        bank_strategy: strategy,
                        ..pinned.clone()
                    },
                    head,
                )
            })
            .collect(),
        AblationAxis::BankSize => {
            let mut sizes: Vec<usize> = [4, 8, 12, 16]
                .into_iter()
                .filter(|&n| n < base.encoder_layers)
                .collect();
            sizes.push(base.encoder_layers);
            sizes
                .into_iter()
                .map(|n| {
                    let name = if n == base.encoder_layers {
                        "all".to_string()
                    } else {
                        n.to_string()
                    };
                    variant(
                        name,
                        ProxyConfig {
                            num_layers: n,
                            bank_strategy: LayerStrategy::LatterHalf,
                            ..pinned.clone()
                        },
                        head,
                    )
                })
                .collect()
        }
        AblationAxis::Compactness => {
            let mut ks: Vec<usize> = [1, 2, 3, 4].into_iter().filter(|&k| k < s).collect();
            ks.push(s);
            ks.into_iter()
                .map(|k| {
                    let name = if k == s { format!("all_{s}") } else { k.to_string() };
                    variant(
                        name,
                        base.clone(),
                        HeadConfig {
                            mode: AllocationMode::TokenAdaptive,
                            top_k: k,
                            position: GroundingPosition::PreReasoning,
                        },
                    )
                })
                .collect()
        }
        AblationAxis::Allocation => [
            (AllocationMode::Uniform, s),
            (AllocationMode::Global, s),
            (AllocationMode::TokenAdaptive, head.top_k),
        ]
        .into_iter()
        .map(|(mode, top_k)| {
            variant(
                mode.label().to_string(),
                base.clone(),
                HeadConfig {
                    mode,
                    top_k,
                    position: GroundingPosition::PreReasoning,
                },
            )
        })
        .collect(),
        AblationAxis::Position => [
            GroundingPosition::InputFusion,
            GroundingPosition::DecoderFusion,
            GroundingPosition::PreReasoning,
        ]
        .into_iter()
        .map(|position| {
            variant(
                position.label().to_string(),
                base.clone(),
                HeadConfig {
                    mode: AllocationMode::TokenAdaptive,
                    top_k: head.top_k,
                    position,
                },
            )
        })
        .collect(),
    };
    Ok(out)
}

/// Why an ablation row has no numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per seed `(test accuracy, agreement)`, or the error that stopped the row.
    pub outcome: std::result::Result<Vec<(f64, f64)>, RowError>,
}

impl AblationRow {
    pub fn accuracies(&self) -> Option<Vec<f64>> {
        self.outcome.as_ref().ok().map(|v| v.iter().map(|p| p.0).collect())
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        self.accuracies().map(|a| mean(&a))
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.outcome.is_ok())
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn mean_accuracy(&self, name: &str) -> Option<f64> {
        self.row(name).and_then(AblationRow::mean_accuracy)
    }

    pub fn report(&self) -> Report {
        let mut r = Report::default();
        r.set("axis", self.axis);
        r.set("seeds", format!("{:?}", self.seeds));
        r.set("complete", self.complete());
        let mut header = vec!["variant", "mode", "top_k", "position", "bank", "mean", "std", "agreement"];
        let seed_cols: Vec<String> = self.seeds.iter().map(|s| format!("seed_{s}")).collect();
        header.extend(seed_cols.iter().map(String::as_str));
        let mut table = Table::new(format!("ablation.{}", self.axis), &header);
        for row in &self.rows {
            let v = &row.variant;
            let mut cells = vec![
                v.name.clone(),
                v.head.mode.label().to_string(),
                effective_top_k(&v.task, v.head).to_string(),
                v.head.position.label().to_string(),
                format!("{}:{}", v.task.bank_strategy.label(), v.task.num_layers),
            ];
            match &row.outcome {
                Ok(per_seed) => {
                    let acc: Vec<f64> = per_seed.iter().map(|p| p.0).collect();
                    let agree: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
                    cells.extend([f4(mean(&acc)), f4(std_dev(&acc)), f4(mean(&agree))]);
                    cells.extend(acc.iter().map(|&a| f4(a)));
                }
                Err(e) => {
                    cells.extend(["failed".to_string(), "-".into(), "-".into()]);
                    r.set(format!("error.{}", v.name), &e.message);
                }
            }
            table.push(cells);
        }
        r.tables.push(table);
        r
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean,std,agreement\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(per_seed) => {
                    let acc: Vec<f64> = per_seed.iter().map(|p| p.0).collect();
                    let agree: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
                    out.push_str(&format!(
                        "{},{:.6},{:.6},{:.6}\n",
                        row.variant.name,
                        mean(&acc),
                        std_dev(&acc),
                        mean(&agree)
                    ));
                }
                Err(_) => out.push_str(&format!("{},,,\n", row.variant.name)),
            }
        }
        out
    }

    /// Writes `ablation_<axis>.txt` and `.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("ablation_{}.txt", self.axis));
        let csv = dir.join(format!("ablation_{}.csv", self.axis));
        self.report().write(&txt)?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(vec![txt, csv])
    }

    /// First row error, if any.
    pub fn first_error(&self) -> Option<&RowError> {
        self.rows.iter().find_map(|r| r.outcome.as_ref().err())
    }
}

/// One training run per variant per seed; a failing row is recorded, not fatal.
pub fn run_ablation(axis: AblationAxis, base: &ExperimentConfig, cache: &RunCache) -> Result<AblationReport> {
    base.validate()?;
    let variants = ablation_variants(axis, &base.task, base.head)?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| base.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let o = cache.train(&variants[v].task, variants[v].head, seed)?;
            Ok((o.test.accuracy, o.test.agreement))
        })
        .collect();
    let mut rows = Vec::with_capacity(variants.len());
    let per = base.seeds.len();
    for (v, variant) in variants.into_iter().enumerate() {
        let outcome = results[v * per..(v + 1) * per]
            .iter()
            .map(|r| {
                r.as_ref().map(|p| *p).map_err(|e| RowError {
                    message: e.to_string(),
                    exit_code: e.exit_code(),
                })
            })
            .collect();
        rows.push(AblationRow { variant, outcome });
    }
    Ok(AblationReport {
        axis,
        seeds: base.seeds.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_seeds_named_in_error() {
        let err = ExperimentConfig::from_toml("seeds = []\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("`seeds`"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_field_reports_position() {
        let err = ExperimentConfig::from_toml("seeds = [1]\n[task]\nnum_layer = 3\n", Path::new("x.toml"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("num_layer") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::new(ProxyConfig::default(), HeadConfig::default(), vec![0, 1]);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn axis_variant_sets() {
        let base = ProxyConfig::default();
        let head = HeadConfig::default();
        let names = |axis| -> Vec<String> {
            ablation_variants(axis, &base, head)
                .unwrap()
                .into_iter()
                .map(|v| v.name)
                .collect()
        };
        assert_eq!(names(AblationAxis::Allocation), ["uniform", "global", "token_adaptive"]);
        assert_eq!(names(AblationAxis::Compactness), ["1", "2", "3", "4", "all_12"]);
        assert_eq!(
            names(AblationAxis::BankConstruction),
            ["first_half", "uniform", "latter_half"]
        );
        assert_eq!(names(AblationAxis::BankSize), ["4", "8", "12", "16", "all"]);
        assert_eq!(
            names(AblationAxis::Position),
            ["input_fusion", "decoder_fusion", "pre_reasoning"]
        );
    }

    #[test]
    fn bank_variants_validate_and_keep_signal_sources() {
        let base = ProxyConfig::default();
        for axis in [AblationAxis::BankConstruction, AblationAxis::BankSize] {
            for v in ablation_variants(axis, &base, HeadConfig::default()).unwrap() {
                v.task.validate().unwrap();
                assert_eq!(v.task.signal_sources().unwrap(), base.signal_sources().unwrap());
            }
        }
    }

    #[test]
    fn unknown_axis_is_config_error() {
        assert!(matches!("depth".parse::<AblationAxis>(), Err(Error::Config(_))));
        assert_eq!("bank_size".parse::<AblationAxis>().unwrap(), AblationAxis::BankSize);
    }
}
