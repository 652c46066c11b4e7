//! Seeded experiment grids and sweep reports.
//!
//! A spec is a flat `key = value` file (see [`KvConfig`]); list-valued keys
//! take comma-separated values and span the grid
//! `noise_rates × losses × margins × taus × select_ratios × ccd × repetitions`.
//! Each cell generates the dataset, splits it by identity, corrupts the
//! training split, trains with per-epoch validation and evaluates both the
//! final and the best-validation parameters on the test split. Cells run in
//! parallel (bounded by `RML_THREADS`) but the summary is assembled in grid
//! order, so reruns are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::division::write_audit;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, ModelEval};
use crate::losses::{LossConfig, LossVariant};
use crate::math::mix_seed;
use crate::synth_data::{generate, inject_noise, noise_seed, DatasetConfig, NoiseSpec, PairDataset, SplitFractions};
use crate::trainer::{train_with, EpochRecord, LrSchedule, TrainConfig, TrainState};

/// Flat `key = value` configuration. `#` starts a comment; blank lines are
/// ignored; later keys override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(n + 1, format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(n + 1, "empty key"));
            }
            out.entries.insert(k.to_string(), (n + 1, v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    /// Apply a `key=value` override; overrides carry line 0.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::parse(*line, format!("{key}: {e}"))),
        }
    }

    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::parse(*line, format!("{key}: {e}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got {s:?}"))),
    }
}

/// Dataset keys shared by every command that builds a dataset.
pub fn dataset_config(kv: &KvConfig) -> Result<DatasetConfig> {
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        num_identities: kv.get("identities")?.unwrap_or(d.num_identities),
        images_per_identity: kv.get("images_per_id")?.unwrap_or(d.images_per_identity),
        captions_per_image: kv.get("captions_per_image")?.unwrap_or(d.captions_per_image),
        raw_dim: kv.get("dim")?.unwrap_or(d.raw_dim),
        intra_identity_noise_std: kv.get("data_noise_std")?.unwrap_or(d.intra_identity_noise_std),
        prototype_offset: kv.get("prototype_offset")?.unwrap_or(d.prototype_offset),
        seed: kv.get("data_seed")?.unwrap_or(d.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Training keys. Grid keys (`margin`, `tau`, `select_ratio`, `loss`, `ccd`)
/// are read as scalars here.
pub fn train_config(kv: &KvConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let margin = kv.get("margin")?.unwrap_or(d.loss_cfg.margin);
    let tau = kv.get("tau")?.unwrap_or(d.loss_cfg.tau);
    let ccd = match kv.raw("ccd") {
        Some(s) => parse_switch(s)?,
        None => d.division,
    };
    let cfg = TrainConfig {
        epochs: kv.get("epochs")?.unwrap_or(d.epochs),
        batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
        learning_rate: kv.get("lr")?.unwrap_or(d.learning_rate),
        lr_schedule: kv.get::<LrSchedule>("lr_schedule")?.unwrap_or(d.lr_schedule),
        warmup_epochs: kv.get("warmup_epochs")?.unwrap_or(d.warmup_epochs),
        lr_warmup_epochs: kv.get("lr_warmup_epochs")?.unwrap_or(d.lr_warmup_epochs),
        loss_cfg: LossConfig::new(margin, tau)?,
        loss_variant: kv.get::<LossVariant>("loss")?.unwrap_or(d.loss_variant),
        embed_dim: kv.get("embed_dim")?.unwrap_or(d.embed_dim),
        num_tokens: kv.get("num_tokens")?.unwrap_or(d.num_tokens),
        select_ratio: kv.get("select_ratio")?.unwrap_or(d.select_ratio),
        division: ccd,
        threshold: kv.get("threshold")?.unwrap_or(d.threshold),
        adam: d.adam,
        seed: kv.get("seed")?.unwrap_or(d.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetConfig,
    /// Base training config; grid axes override its fields per cell.
    pub train: TrainConfig,
    pub noise_rates: Vec<f64>,
    pub variants: Vec<LossVariant>,
    pub margins: Vec<f64>,
    pub taus: Vec<f64>,
    pub select_ratios: Vec<f64>,
    pub ccd: Vec<bool>,
    pub repetitions: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

const GRID_KEYS: [&str; 7] = ["noise_rates", "losses", "margins", "taus", "select_ratios", "ccd", "repetitions"];

impl ExperimentSpec {
    /// Build from a key/value config. Missing grid keys default to a single
    /// value taken from the training defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut base_kv = kv.clone();
        // Grid keys are lists; keep them out of the scalar parsers.
        for k in ["margin", "tau", "select_ratio", "loss"] {
            if kv.raw(k).is_some() {
                return Err(Error::Config(format!(
                    "experiment specs use list keys; found scalar {k:?}"
                )));
            }
        }
        base_kv.entries.retain(|k, _| !GRID_KEYS.contains(&k.as_str()));
        let train = train_config(&base_kv)?;
        let ccd = match kv.get_list::<String>("ccd")? {
            Some(v) => v.iter().map(|s| parse_switch(s)).collect::<Result<_>>()?,
            None => vec![train.division],
        };
        let spec = Self {
            name: kv.raw("name").unwrap_or("experiment").to_string(),
            dataset: dataset_config(kv)?,
            noise_rates: kv.get_list("noise_rates")?.unwrap_or_else(|| vec![0.0]),
            variants: kv.get_list("losses")?.unwrap_or_else(|| vec![train.loss_variant]),
            margins: kv.get_list("margins")?.unwrap_or_else(|| vec![train.loss_cfg.margin]),
            taus: kv.get_list("taus")?.unwrap_or_else(|| vec![train.loss_cfg.tau]),
            select_ratios: kv.get_list("select_ratios")?.unwrap_or_else(|| vec![train.select_ratio]),
            ccd,
            repetitions: kv.get("repetitions")?.unwrap_or(1),
            seed: train.seed,
            out_dir: PathBuf::from(kv.raw("out_dir").unwrap_or("experiment-out")),
            train,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config(format!("noise rates must lie in [0, 1): {:?}", self.noise_rates)));
        }
        if self.num_cells() == 0 {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.noise_rates.len()
            * self.variants.len()
            * self.margins.len()
            * self.taus.len()
            * self.select_ratios.len()
            * self.ccd.len()
            * self.repetitions
    }

    /// Cells in grid order; repetition `r` uses seed `mix_seed(seed, r)`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.num_cells());
        for &noise_rate in &self.noise_rates {
            for &variant in &self.variants {
                for &margin in &self.margins {
                    for &tau in &self.taus {
                        for &select_ratio in &self.select_ratios {
                            for &ccd in &self.ccd {
                                for rep in 0..self.repetitions {
                                    out.push(Cell {
                                        index: out.len(),
                                        noise_rate,
                                        variant,
                                        margin,
                                        tau,
                                        select_ratio,
                                        ccd,
                                        rep,
                                        seed: mix_seed(self.seed, rep as u64),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn cell_train_config(&self, cell: &Cell) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            loss_cfg: LossConfig::new(cell.margin, cell.tau)?,
            loss_variant: cell.variant,
            select_ratio: cell.select_ratio,
            division: cell.ccd,
            seed: cell.seed,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub noise_rate: f64,
    pub variant: LossVariant,
    pub margin: f64,
    pub tau: f64,
    pub select_ratio: f64,
    pub ccd: bool,
    pub rep: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("cell-{:03}", self.index)
    }
}

/// Output of one training run on one split layout.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub last: ModelEval,
    pub best: Option<(usize, ModelEval)>,
}

impl RunOutcome {
    pub fn final_record(&self) -> &EpochRecord {
        self.state.history.last().expect("at least one epoch")
    }
}

/// File names written into a run directory.
pub mod files {
    pub const DATA: &str = "data.txt";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const BEST_CHECKPOINT: &str = "best.ckpt";
    pub const HISTORY: &str = "history.csv";
    pub const METRICS: &str = "metrics.json";
    pub const BEST_METRICS: &str = "best_metrics.json";
    pub const AUDIT: &str = "division.csv";
}

/// Header of `history.csv`.
pub const HISTORY_HEADER: [&str; 11] = [
    "epoch",
    "loss",
    "lr",
    "rank1",
    "mAP",
    "mINP",
    "num_clean",
    "num_noisy",
    "num_uncertain",
    "division_precision",
    "division_recall",
];

fn history_row(r: &EpochRecord) -> Vec<String> {
    let (r1, map, minp) = r.validation.as_ref().map_or((String::new(), String::new(), String::new()), |v| {
        (
            v.metrics.rank1.to_string(),
            v.metrics.map.to_string(),
            v.metrics.minp.to_string(),
        )
    });
    vec![
        r.epoch.to_string(),
        r.loss.to_string(),
        r.learning_rate.to_string(),
        r1,
        map,
        minp,
        r.num_clean.to_string(),
        r.num_noisy.to_string(),
        r.num_uncertain.to_string(),
        r.division_precision.to_string(),
        r.division_recall.to_string(),
    ]
}

/// Split `data` by identity, corrupt the training part with
/// `noise_seed(cfg.seed)`, train with per-epoch validation and write every
/// artefact into `out_dir`. With `audit` set, the per-epoch division log is
/// written as well.
pub fn run_training(
    data: &PairDataset,
    noise_rate: f64,
    cfg: &TrainConfig,
    out_dir: &Path,
    audit: bool,
) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let splits = data.split(SplitFractions::default())?;
    let train = inject_noise(
        &splits.train,
        &NoiseSpec {
            noise_rate,
            seed: noise_seed(cfg.seed),
        },
    )?;
    let hist_path = out_dir.join(files::HISTORY);
    let mut history = csv::Writer::from_path(&hist_path)?;
    history.write_record(HISTORY_HEADER)?;
    let mut audit_writer = if audit {
        let mut w = csv::Writer::from_path(out_dir.join(files::AUDIT))?;
        w.write_record(crate::division::AUDIT_HEADER)?;
        Some(w)
    } else {
        None
    };
    let state = train_with(&train, Some(&splits.val), cfg, |ev| {
        history.write_record(history_row(ev.record))?;
        if let Some(w) = audit_writer.as_mut() {
            write_audit(w, ev.record.epoch, &train, ev.losses, ev.division)?;
        }
        Ok(())
    })?;
    history.flush()?;
    if let Some(mut w) = audit_writer {
        w.flush()?;
    }
    state.params.save(out_dir.join(files::CHECKPOINT))?;
    let last = evaluate_model(&state.params, &splits.test)?;
    last.to_json().save(out_dir.join(files::METRICS))?;
    let best = match &state.best {
        Some((epoch, params)) => {
            params.save(out_dir.join(files::BEST_CHECKPOINT))?;
            let e = evaluate_model(params, &splits.test)?;
            e.to_json().save(out_dir.join(files::BEST_METRICS))?;
            Some((*epoch, e))
        }
        None => None,
    };
    Ok(RunOutcome { state, last, best })
}

/// Columns of the summary CSV.
pub const SUMMARY_HEADER: [&str; 22] = [
    "cell",
    "noise_rate",
    "loss",
    "margin",
    "tau",
    "select_ratio",
    "ccd",
    "rep",
    "seed",
    "status",
    "rank1",
    "rank5",
    "rank10",
    "mAP",
    "mINP",
    "best_epoch",
    "best_rank1",
    "best_mAP",
    "best_mINP",
    "division_precision",
    "division_recall",
    "similarity_std",
];

/// Summary metrics of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub best_epoch: usize,
    pub best_rank1: f64,
    pub best_map: f64,
    pub best_minp: f64,
    pub division_precision: f64,
    pub division_recall: f64,
    pub similarity_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: Cell,
    /// `Ok` on success, the error message otherwise.
    pub outcome: std::result::Result<CellMetrics, String>,
}

impl SummaryRow {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    fn record(&self) -> Vec<String> {
        let c = &self.cell;
        let mut row = vec![
            c.index.to_string(),
            c.noise_rate.to_string(),
            c.variant.to_string(),
            c.margin.to_string(),
            c.tau.to_string(),
            c.select_ratio.to_string(),
            if c.ccd { "on" } else { "off" }.to_string(),
            c.rep.to_string(),
            c.seed.to_string(),
        ];
        match &self.outcome {
            Ok(m) => {
                row.push("ok".into());
                row.extend(
                    [m.rank1, m.rank5, m.rank10, m.map, m.minp]
                        .iter()
                        .map(f64::to_string),
                );
                row.push(m.best_epoch.to_string());
                row.extend(
                    [
                        m.best_rank1,
                        m.best_map,
                        m.best_minp,
                        m.division_precision,
                        m.division_recall,
                        m.similarity_std,
                    ]
                    .iter()
                    .map(f64::to_string),
                );
            }
            Err(msg) => {
                row.push(format!("error: {}", msg.replace(['\n', '\r'], " ")));
                row.extend(std::iter::repeat_n(String::new(), SUMMARY_HEADER.len() - 10));
            }
        }
        row
    }
}

pub fn run_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<CellMetrics> {
    let cfg = spec.cell_train_config(cell)?;
    let dir = spec.out_dir.join(cell.dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let data = generate(&spec.dataset)?;
    data.save(dir.join(files::DATA))?;
    let out = run_training(&data, cell.noise_rate, &cfg, &dir, false)?;
    let rec = out.final_record();
    let (best_epoch, best) = match &out.best {
        Some((e, m)) => (*e, m.metrics.clone()),
        None => (rec.epoch, out.last.metrics.clone()),
    };
    Ok(CellMetrics {
        rank1: out.last.metrics.rank1,
        rank5: out.last.metrics.rank5,
        rank10: out.last.metrics.rank10,
        map: out.last.metrics.map,
        minp: out.last.metrics.minp,
        best_epoch,
        best_rank1: best.rank1,
        best_map: best.map,
        best_minp: best.minp,
        division_precision: rec.division_precision,
        division_recall: rec.division_recall,
        similarity_std: out.last.similarity_std,
    })
}

/// Number of parallel cells: `RML_THREADS` when set and positive, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("RML_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(SummaryRow::is_ok)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(SUMMARY_HEADER)?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run every cell and write `summary.csv` into the output directory. Cell
/// failures are recorded in the `status` column rather than aborting.
pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<Summary> {
    use rayon::prelude::*;
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::file(&spec.out_dir, e))?;
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SummaryRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| SummaryRow {
                cell: *cell,
                outcome: run_cell(spec, cell).map_err(|e| e.to_string()),
            })
            .collect()
    });
    let summary = Summary { rows };
    let path = spec.out_dir.join("summary.csv");
    let file = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
    summary.write_to(std::io::BufWriter::new(file))?;
    Ok(summary)
}

/// One row of the plot-ready long format.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    /// Swept parameter: `margin`, `tau` or `select_ratio`.
    pub axis: String,
    pub x: f64,
    /// Every other identifying column, `key=value` joined by `;`.
    pub series: String,
    pub metric: String,
    pub value: f64,
}

pub const LONG_HEADER: [&str; 5] = ["axis", "x", "series", "metric", "value"];

/// Sweep axes, in output order.
pub const SWEEP_AXES: [&str; 3] = ["margin", "tau", "select_ratio"];

/// Metrics carried into the long format.
pub const REPORT_METRICS: [&str; 12] = [
    "rank1",
    "rank5",
    "rank10",
    "mAP",
    "mINP",
    "best_epoch",
    "best_rank1",
    "best_mAP",
    "best_mINP",
    "division_precision",
    "division_recall",
    "similarity_std",
];

const SERIES_KEYS: [&str; 9] = ["cell", "noise_rate", "loss", "margin", "tau", "select_ratio", "ccd", "rep", "seed"];

/// A summary row as read back from CSV: identifying columns as text, metrics
/// as numbers. Failed cells are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRecord {
    pub keys: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

/// Read `summary.csv`, reporting the line of any malformed record.
pub fn read_summary(text: &str) -> Result<Vec<SummaryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    for required in SERIES_KEYS.iter().chain(["status"].iter()).chain(REPORT_METRICS.iter()) {
        if !header.iter().any(|h| h == required) {
            return Err(Error::parse(1, format!("missing column {required:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |name: &str| -> &str {
            let idx = header.iter().position(|h| h == name).expect("checked above");
            rec.get(idx).unwrap_or("")
        };
        if field("status") != "ok" {
            continue;
        }
        let keys = SERIES_KEYS
            .iter()
            .map(|k| (k.to_string(), field(k).to_string()))
            .collect();
        for k in ["noise_rate", "margin", "tau", "select_ratio"] {
            field(k)
                .parse::<f64>()
                .map_err(|_| Error::parse(line, format!("{k}: not a number: {:?}", field(k))))?;
        }
        let metrics = REPORT_METRICS
            .iter()
            .map(|m| {
                field(m)
                    .parse::<f64>()
                    .map(|v| (m.to_string(), v))
                    .map_err(|_| Error::parse(line, format!("{m}: not a number: {:?}", field(m))))
            })
            .collect::<Result<_>>()?;
        out.push(SummaryRecord { keys, metrics });
    }
    Ok(out)
}

/// Axes to report: those taking at least two values, or `margin` when the
/// summary sweeps nothing.
fn report_axes(records: &[SummaryRecord]) -> Vec<&'static str> {
    let varying: Vec<&str> = SWEEP_AXES
        .iter()
        .copied()
        .filter(|a| records.iter().map(|r| &r.keys[*a]).collect::<BTreeSet<_>>().len() > 1)
        .collect();
    if varying.is_empty() {
        vec![SWEEP_AXES[0]]
    } else {
        varying
    }
}

fn series_of(rec: &SummaryRecord, axis: &str) -> String {
    SERIES_KEYS
        .iter()
        .filter(|k| **k != axis && **k != "cell")
        .map(|k| format!("{k}={}", rec.keys[*k]))
        .collect::<Vec<_>>()
        .join(";")
}

/// Unpivot summary records into long rows, sorted by axis, series, `x`
/// ascending and metric.
pub fn to_long(records: &[SummaryRecord]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for axis in report_axes(records) {
        let mut rows: Vec<LongRow> = Vec::new();
        for rec in records {
            let x: f64 = rec.keys[axis].parse().expect("validated on read");
            let series = series_of(rec, axis);
            for m in REPORT_METRICS {
                rows.push(LongRow {
                    axis: axis.to_string(),
                    x,
                    series: series.clone(),
                    metric: m.to_string(),
                    value: rec.metrics[m],
                });
            }
        }
        let metric_pos = |m: &str| REPORT_METRICS.iter().position(|k| *k == m).unwrap();
        rows.sort_by(|a, b| {
            a.series
                .cmp(&b.series)
                .then(a.x.total_cmp(&b.x))
                .then(metric_pos(&a.metric).cmp(&metric_pos(&b.metric)))
        });
        out.extend(rows);
    }
    out
}

/// Pivot long rows of one axis back into summary records, ordered by series
/// then `x`. The `cell` column is not carried by the long format.
pub fn from_long(rows: &[LongRow], axis: &str) -> Result<Vec<SummaryRecord>> {
    let mut by_series: BTreeMap<(String, u64), SummaryRecord> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.axis == axis) {
        let key = (r.series.clone(), r.x.to_bits());
        let entry = by_series.entry(key).or_insert_with(|| {
            let mut keys: BTreeMap<String, String> = r
                .series
                .split(';')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            keys.insert(axis.to_string(), r.x.to_string());
            SummaryRecord {
                keys,
                metrics: BTreeMap::new(),
            }
        });
        if entry.metrics.insert(r.metric.clone(), r.value).is_some() {
            return Err(Error::Contract(format!(
                "duplicate metric {} for series {} at {axis}={}",
                r.metric, r.series, r.x
            )));
        }
    }
    let mut out: Vec<(String, f64, SummaryRecord)> = by_series
        .into_iter()
        .map(|((series, bits), rec)| (series, f64::from_bits(bits), rec))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(out.into_iter().map(|(_, _, r)| r).collect())
}

pub fn write_long<W: Write>(rows: &[LongRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(LONG_HEADER)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.x.to_string(),
            r.series.clone(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long(text: &str) -> Result<Vec<LongRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?;
    if header.iter().ne(LONG_HEADER.iter().copied()) {
        return Err(Error::parse(1, format!("expected header {}", LONG_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::parse(line, format!("not a number: {:?}", &rec[i])))
        };
        out.push(LongRow {
            axis: rec[0].to_string(),
            x: num(1)?,
            series: rec[2].to_string(),
            metric: rec[3].to_string(),
            value: num(4)?,
        });
    }
    Ok(out)
}

/// `summary.csv` text to long-format CSV text.
pub fn sweep_report(summary_csv: &str) -> Result<String> {
    let records = read_summary(summary_csv)?;
    let mut buf = Vec::new();
    write_long(&to_long(&records), &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing_and_errors() {
        let kv = KvConfig::parse("# c\nepochs = 3\n\nlosses = tal, trl # trailing\n").unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(
            kv.get_list::<LossVariant>("losses").unwrap(),
            Some(vec![LossVariant::Tal, LossVariant::Trl])
        );
        match KvConfig::parse("a = 1\nbroken\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let kv = KvConfig::parse("epochs = x").unwrap();
        assert!(matches!(kv.get::<usize>("epochs"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut kv = KvConfig::parse("epochs = 3").unwrap();
        kv.set_override("epochs=5").unwrap();
        assert_eq!(train_config(&kv).unwrap().epochs, 5);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let kv = KvConfig::parse("repetitions = 0").unwrap();
        assert!(matches!(ExperimentSpec::from_kv(&kv), Err(Error::Config(_))));
        let kv = KvConfig::parse("noise_rates = 1.0").unwrap();
        assert!(matches!(ExperimentSpec::from_kv(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn grid_cells_and_seeds() {
        let kv = KvConfig::parse("losses = tal,trl,trls\nnoise_rates = 0.2,0.5\nrepetitions = 2\nseed = 9").unwrap();
        let spec = ExperimentSpec::from_kv(&kv).unwrap();
        let cells = spec.cells();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].seed, cells[2].seed);
        assert_ne!(cells[0].seed, cells[1].seed);
        assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
    }
}
