//! Model runs, reports, population-change tables, difference masks, map
//! exports and the end-to-end `run_all` driver.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explain::{dependence_series, local_accuracy_error, tree_shap, ShapMatrix};
use crate::features::{
    attach_targets, build_feature_matrix, split_dataset, Dataset, FeatureMatrix, FeatureSidecar,
    Split, DEFAULT_FRACTIONS,
};
use crate::gbtree::{
    gain_importance, inverse_z, rmsle, to_z, top_k_share, train, Ensemble, EvalReport, FeatureGain,
    TrainConfig,
};
use crate::grid_geo::{parse_city_geojson, CityGrid, TileId, DEFAULT_ID_KEY};
use crate::popgrid::{downscale_population, DownscaleReport, Period, PopulationVector};
use crate::raster::CoarseRaster;
use crate::synth::{self, SynthConfig};
use crate::traffic::{
    discover_files, ingest_directory, Direction, GroupAggregate, IngestConfig, SlotAccumulator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Night,
    Day,
    DayGivenNight,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Night, ModelKind::Day, ModelKind::DayGivenNight];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Night => "night",
            ModelKind::Day => "day",
            ModelKind::DayGivenNight => "day-given-night",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

/// Populations available to a model run.
#[derive(Debug, Clone, Default)]
pub struct Targets {
    pub night: Option<PopulationVector>,
    pub day: Option<PopulationVector>,
}

/// Everything a single model run produces.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub dataset: Dataset,
    pub split: Split,
    pub ensemble: Ensemble,
    pub eval: EvalReport,
    pub importance: Vec<FeatureGain>,
    /// Attributions for the validation rows.
    pub shap: ShapMatrix,
    pub report: ModelReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: ModelKind,
    pub n_tiles: usize,
    pub n_features: usize,
    pub split_sizes: [usize; 3],
    pub train_rmsle: f64,
    pub test_rmsle: f64,
    pub validation_rmsle: f64,
    /// Validation RMSLE of predicting the mean training log-population.
    pub baseline_rmsle: f64,
    pub best_round: usize,
    pub rounds_run: usize,
    pub top_gain: Vec<FeatureGain>,
    pub top20_share: f64,
    pub top100_share: f64,
    pub shap_variant: String,
    pub shap_local_accuracy_max_error: f64,
    pub exports: Vec<String>,
    pub train_config: TrainConfig,
    pub split_config: SplitConfig,
}

pub const REPORT_TOP_K: usize = 20;

impl ModelReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# Model: {}\n", self.kind.name()).unwrap();
        writeln!(s, "| metric | value |\n|---|---|").unwrap();
        writeln!(s, "| tiles | {} |", self.n_tiles).unwrap();
        writeln!(s, "| features | {} |", self.n_features).unwrap();
        let [a, b, c] = self.split_sizes;
        writeln!(s, "| train / test / validation | {a} / {b} / {c} |").unwrap();
        writeln!(s, "| validation RMSLE | {:.4} |", self.validation_rmsle).unwrap();
        writeln!(s, "| test RMSLE | {:.4} |", self.test_rmsle).unwrap();
        writeln!(s, "| train RMSLE | {:.4} |", self.train_rmsle).unwrap();
        writeln!(
            s,
            "| mean-prediction baseline RMSLE | {:.4} |",
            self.baseline_rmsle
        )
        .unwrap();
        writeln!(
            s,
            "| trees kept / run | {} / {} |",
            self.best_round, self.rounds_run
        )
        .unwrap();
        writeln!(
            s,
            "| top-20 gain share | {:.1}% |",
            100.0 * self.top20_share
        )
        .unwrap();
        writeln!(
            s,
            "| top-100 gain share | {:.1}% |",
            100.0 * self.top100_share
        )
        .unwrap();
        writeln!(s, "| SHAP variant | {} |", self.shap_variant).unwrap();
        writeln!(
            s,
            "| SHAP local accuracy (max abs) | {:.2e} |\n",
            self.shap_local_accuracy_max_error
        )
        .unwrap();
        writeln!(s, "## Top features by gain\n").unwrap();
        writeln!(
            s,
            "| rank | feature | gain | cumulative share |\n|---|---|---|---|"
        )
        .unwrap();
        for (i, g) in self.top_gain.iter().enumerate() {
            writeln!(
                s,
                "| {} | {} | {:.4} | {:.1}% |",
                i + 1,
                g.name,
                g.gain,
                100.0 * g.cumulative_share
            )
            .unwrap();
        }
        if !self.exports.is_empty() {
            writeln!(s, "\n## Exports\n").unwrap();
            for e in &self.exports {
                writeln!(s, "- {e}").unwrap();
            }
        }
        writeln!(
            s,
            "\nSHAP values are in log-population space (ln(1 + P)); predictions are shown after the inverse transform."
        )
        .unwrap();
        s
    }
}

/// Training and split settings stored next to a trained ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

/// Dataset of a model: the day models share features, the conditioned one
/// adds the night population column.
pub fn model_dataset(kind: ModelKind, fm: &FeatureMatrix, targets: &Targets) -> Result<Dataset> {
    let need = |p: &Option<PopulationVector>, what: &str| {
        p.clone().ok_or_else(|| {
            Error::Invalid(format!("model {} needs the {what} population", kind.name()))
        })
    };
    match kind {
        ModelKind::Night => attach_targets(fm, &need(&targets.night, "night")?, None),
        ModelKind::Day => attach_targets(fm, &need(&targets.day, "day")?, None),
        ModelKind::DayGivenNight => attach_targets(
            fm,
            &need(&targets.day, "day")?,
            Some(&need(&targets.night, "night")?),
        ),
    }
}

/// Builds the model's dataset, splits, trains, and explains the validation rows.
pub fn run_model(
    kind: ModelKind,
    fm: &FeatureMatrix,
    targets: &Targets,
    split_cfg: &SplitConfig,
    train_cfg: &TrainConfig,
) -> Result<ModelRun> {
    let dataset = model_dataset(kind, fm, targets)?;
    let split = split_dataset(&dataset, split_cfg.fractions, split_cfg.seed)?;
    let (ensemble, eval) = train(&dataset, &split, train_cfg)?;
    let cfg = ModelConfig {
        kind,
        train: train_cfg.clone(),
        split: split_cfg.clone(),
    };
    assess_model(&cfg, dataset, split, ensemble, eval)
}

/// Gain importance, validation SHAP values and the report of a trained model.
pub fn assess_model(
    cfg: &ModelConfig,
    dataset: Dataset,
    split: Split,
    ensemble: Ensemble,
    eval: EvalReport,
) -> Result<ModelRun> {
    if dataset.has_night_column() != (cfg.kind == ModelKind::DayGivenNight) {
        return Err(Error::Invalid(format!(
            "dataset {} a night_population column but the model is {}",
            if dataset.has_night_column() {
                "has"
            } else {
                "lacks"
            },
            cfg.kind.name()
        )));
    }
    let importance = gain_importance(&ensemble);

    let mean_z = split
        .train
        .iter()
        .map(|&r| to_z(dataset.target[r]))
        .sum::<f64>()
        / split.train.len() as f64;
    let val_truth: Vec<f64> = split
        .validation
        .iter()
        .map(|&r| dataset.target[r])
        .collect();
    let baseline_rmsle = rmsle(&vec![inverse_z(mean_z); val_truth.len()], &val_truth)?;

    let shap = tree_shap(&ensemble, &dataset.features, &split.validation)?;
    let accuracy = local_accuracy_error(&ensemble, &shap, &dataset.features, &split.validation)?;

    let report = ModelReport {
        kind: cfg.kind,
        n_tiles: dataset.n_rows(),
        n_features: dataset.features.n_cols(),
        split_sizes: [split.train.len(), split.test.len(), split.validation.len()],
        train_rmsle: eval.train_rmsle,
        test_rmsle: eval.test_rmsle,
        validation_rmsle: eval.validation_rmsle,
        baseline_rmsle,
        best_round: eval.best_round,
        rounds_run: eval.rounds_run,
        top_gain: importance.iter().take(REPORT_TOP_K).cloned().collect(),
        top20_share: top_k_share(&importance, 20),
        top100_share: top_k_share(&importance, 100),
        shap_variant: "path-dependent TreeSHAP (cover-weighted)".into(),
        shap_local_accuracy_max_error: accuracy,
        exports: Vec::new(),
        train_config: cfg.train.clone(),
        split_config: cfg.split.clone(),
    };
    Ok(ModelRun {
        kind: cfg.kind,
        dataset,
        split,
        ensemble,
        eval,
        importance,
        shap,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub city: String,
    pub night: f64,
    pub day: f64,
    /// 100 (day − night) / night, rounded to one decimal.
    pub percent_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeTable {
    pub rows: Vec<ChangeRow>,
}

pub fn percent_change(night: f64, day: f64) -> Result<f64> {
    if !(night > 0.0) {
        return Err(Error::Invalid(format!(
            "night population {night} must be positive"
        )));
    }
    Ok((1000.0 * (day - night) / night).round() / 10.0)
}

pub fn change_table(populations: &[(String, f64, f64)]) -> Result<ChangeTable> {
    let rows = populations
        .iter()
        .map(|(city, night, day)| {
            Ok(ChangeRow {
                city: city.clone(),
                night: *night,
                day: *day,
                percent_change: percent_change(*night, *day)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ChangeTable { rows })
}

impl ChangeTable {
    /// Markdown table in thousands of persons.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| city | night (k) | day (k) | change |\n|---|---|---|---|\n");
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {:.0} | {:.0} | {:+.1}% |",
                r.city,
                r.night / 1000.0,
                r.day / 1000.0,
                r.percent_change
            )
            .unwrap();
        }
        s
    }
}

/// Night/day populations (thousands) of 20 French cities with their reported change.
pub const CITY_CHANGES: [(&str, f64, f64, f64); 20] = [
    ("Paris", 6974.0, 8064.0, 15.6),
    ("Lyon", 1290.0, 1445.0, 12.0),
    ("Lille", 1141.0, 1213.0, 6.3),
    ("Marseille", 836.0, 819.0, -2.1),
    ("Bordeaux", 716.0, 821.0, 14.6),
    ("Toulouse", 705.0, 786.0, 11.5),
    ("Nantes", 588.0, 631.0, 7.2),
    ("Strasbourg", 471.0, 488.0, 3.6),
    ("Nice", 455.0, 436.0, -4.2),
    ("Grenoble", 431.0, 442.0, 2.5),
    ("Montpellier", 419.0, 491.0, 17.1),
    ("Rennes", 407.0, 453.0, 11.3),
    ("Saint-Etienne", 397.0, 387.0, -2.6),
    ("Tours", 283.0, 315.0, 11.3),
    ("Clermont-Ferrand", 275.0, 300.0, 9.1),
    ("Orleans", 268.0, 289.0, 7.9),
    ("Nancy", 251.0, 270.0, 7.5),
    ("Dijon", 244.0, 271.0, 11.1),
    ("Metz", 223.0, 242.0, 8.7),
    ("Mans", 199.0, 236.0, 18.4),
];

/// The city populations in persons.
pub fn city_populations() -> Vec<(String, f64, f64)> {
    CITY_CHANGES
        .iter()
        .map(|(c, n, d, _)| (c.to_string(), n * 1000.0, d * 1000.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMap {
    pub tile_ids: Vec<TileId>,
    pub increase: Vec<bool>,
    pub decrease: Vec<bool>,
    pub tau: f64,
}

impl DiffMap {
    pub fn increase_ids(&self) -> BTreeSet<TileId> {
        self.ids(&self.increase)
    }

    pub fn decrease_ids(&self) -> BTreeSet<TileId> {
        self.ids(&self.decrease)
    }

    fn ids(&self, mask: &[bool]) -> BTreeSet<TileId> {
        self.tile_ids
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Tiles whose day population exceeds the night one by more than `tau`
/// persons, and the reverse. Rows follow `night`.
pub fn diff_map(night: &PopulationVector, day: &PopulationVector, tau: f64) -> Result<DiffMap> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau {tau} must be positive")));
    }
    let day_map = day.as_map();
    if day_map.len() != night.tile_ids.len() {
        return Err(Error::TileMismatch(
            "night and day cover different tiles".into(),
        ));
    }
    let mut increase = Vec::with_capacity(night.tile_ids.len());
    let mut decrease = Vec::with_capacity(night.tile_ids.len());
    for (id, n) in night.tile_ids.iter().zip(&night.values) {
        let d = day_map
            .get(id)
            .ok_or_else(|| Error::TileMismatch(format!("tile {id} missing from day population")))?;
        increase.push(d - n > tau);
        decrease.push(n - d > tau);
    }
    Ok(DiffMap {
        tile_ids: night.tile_ids.clone(),
        increase,
        decrease,
        tau,
    })
}

/// Intersection over union of two id sets; 1 when both are empty.
pub fn iou(a: &BTreeSet<TileId>, b: &BTreeSet<TileId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn tile_values(grid: &CityGrid, values: &PopulationVector) -> Result<Vec<f64>> {
    let map = values.as_map();
    grid.tiles
        .iter()
        .map(|t| {
            map.get(&t.id)
                .copied()
                .ok_or_else(|| Error::TileMismatch(format!("tile {} has no value", t.id)))
        })
        .collect()
}

/// GeoJSON with attribute `v` per tile and `v_log = ln(1 + v)` when requested.
pub fn heatmap_export(
    values: &PopulationVector,
    grid: &CityGrid,
    log_scale: bool,
) -> Result<Value> {
    let v = tile_values(grid, values)?;
    Ok(grid.to_geojson_with(DEFAULT_ID_KEY, |i| {
        let mut m = Map::new();
        m.insert("v".into(), json!(v[i]));
        if log_scale {
            m.insert("v_log".into(), json!(v[i].ln_1p()));
        }
        m
    }))
}

/// GeoJSON of the difference masks: `change` is "increase", "decrease" or "none".
pub fn diffmap_export(dm: &DiffMap, grid: &CityGrid) -> Value {
    let by_id: std::collections::HashMap<TileId, usize> = dm
        .tile_ids
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, i))
        .collect();
    grid.to_geojson_with(DEFAULT_ID_KEY, |i| {
        let label = match by_id.get(&grid.tiles[i].id) {
            Some(&k) if dm.increase[k] => "increase",
            Some(&k) if dm.decrease[k] => "decrease",
            _ => "none",
        };
        let mut m = Map::new();
        m.insert("change".into(), json!(label));
        m
    })
}

/// On-disk form of one (service, direction) accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub service: String,
    pub direction: Direction,
    pub days_read: usize,
    pub outage_dates: Vec<NaiveDate>,
    pub tile_ids: Vec<TileId>,
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl From<&GroupAggregate> for AggregateRecord {
    fn from(g: &GroupAggregate) -> Self {
        Self {
            service: g.service.clone(),
            direction: g.direction,
            days_read: g.days_read,
            outage_dates: g.outage_dates.iter().copied().collect(),
            tile_ids: g.accumulator.tile_ids.clone(),
            sum: g.accumulator.sum.clone(),
            count: g.accumulator.count.clone(),
        }
    }
}

impl AggregateRecord {
    pub fn into_aggregate(self) -> Result<GroupAggregate> {
        let mut acc = SlotAccumulator::new(self.tile_ids);
        if acc.sum.len() != self.sum.len() || acc.count.len() != self.count.len() {
            return Err(Error::Invalid(format!(
                "accumulator for {} {} has the wrong length",
                self.service, self.direction
            )));
        }
        acc.sum = self.sum;
        acc.count = self.count;
        Ok(GroupAggregate {
            service: self.service,
            direction: self.direction,
            accumulator: acc,
            days_read: self.days_read,
            outage_dates: self.outage_dates.into_iter().collect(),
        })
    }
}

pub fn write_aggregates(aggs: &[GroupAggregate], path: &Path) -> Result<()> {
    let recs: Vec<AggregateRecord> = aggs.iter().map(AggregateRecord::from).collect();
    std::fs::write(path, serde_json::to_string(&recs)?)?;
    Ok(())
}

pub fn read_aggregates(path: &Path) -> Result<Vec<GroupAggregate>> {
    let recs: Vec<AggregateRecord> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    recs.into_iter()
        .map(AggregateRecord::into_aggregate)
        .collect()
}

fn default_tau() -> f64 {
    5.0
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

/// Configuration of a full run. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// When present, the city is generated first and the input paths below
    /// default to the generated files.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub city: Option<String>,
    #[serde(default)]
    pub grid: Option<PathBuf>,
    #[serde(default)]
    pub tile_id_key: Option<String>,
    #[serde(default)]
    pub traffic_dir: Option<PathBuf>,
    #[serde(default)]
    pub night_raster: Option<PathBuf>,
    #[serde(default)]
    pub day_raster: Option<PathBuf>,
    /// Defaults to the generated service list when `synth` is set.
    #[serde(default)]
    pub services: Vec<String>,
    #[serde(default)]
    pub start: Option<NaiveDate>,
    #[serde(default)]
    pub end: Option<NaiveDate>,
    #[serde(default)]
    pub dst_date: Option<NaiveDate>,
    #[serde(default)]
    pub outage_theta: Option<f64>,
    #[serde(default)]
    pub conserve_mass: bool,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

/// Input paths and ingest settings after applying synth defaults.
#[derive(Debug, Clone)]
struct ResolvedInputs {
    grid: PathBuf,
    id_key: String,
    traffic_dir: PathBuf,
    night_raster: PathBuf,
    day_raster: PathBuf,
    ingest: IngestConfig,
}

fn resolve(cfg: &RunConfig, base: &Path, out: &Path) -> Result<ResolvedInputs> {
    let at = |p: &Option<PathBuf>, default: Option<PathBuf>, what: &str| -> Result<PathBuf> {
        match (p, default) {
            (Some(p), _) => Ok(base.join(p)),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::Config(format!("missing {what} path"))),
        }
    };
    let gen = cfg.synth.as_ref().map(|_| out.join("input"));
    let sub = |name: &str| gen.as_ref().map(|g| g.join(name));
    let services = match (&cfg.synth, cfg.services.is_empty()) {
        (Some(s), true) => s.service_names(),
        _ => cfg.services.clone(),
    };
    let city = cfg
        .city
        .clone()
        .or_else(|| cfg.synth.as_ref().map(|s| s.city.clone()))
        .ok_or_else(|| Error::Config("missing city".into()))?;
    let date = |d: Option<NaiveDate>, s: Option<NaiveDate>, what: &str| {
        d.or(s)
            .ok_or_else(|| Error::Config(format!("missing {what} date")))
    };
    let ingest = IngestConfig {
        city,
        services,
        start: date(cfg.start, cfg.synth.as_ref().map(|s| s.start), "start")?,
        end: date(cfg.end, cfg.synth.as_ref().map(|s| s.end), "end")?,
        dst_date: cfg
            .dst_date
            .unwrap_or(NaiveDate::from_ymd_opt(2019, 3, 31).unwrap()),
        outage_theta: cfg.outage_theta.unwrap_or(0.1),
    };
    ingest.validate()?;
    Ok(ResolvedInputs {
        grid: at(&cfg.grid, sub("city.geojson"), "grid")?,
        id_key: cfg
            .tile_id_key
            .clone()
            .unwrap_or_else(|| DEFAULT_ID_KEY.to_string()),
        traffic_dir: at(&cfg.traffic_dir, sub("traffic"), "traffic_dir")?,
        night_raster: at(&cfg.night_raster, sub("night.asc"), "night_raster")?,
        day_raster: at(&cfg.day_raster, sub("day.asc"), "day_raster")?,
        ingest,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub split_seed: u64,
    pub synth_seed: Option<u64>,
    /// (path relative to the config directory or output, sha256)
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub reports: Vec<ModelReport>,
    pub change: ChangeTable,
    pub manifest: Manifest,
}

struct OutputWriter {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputWriter {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(&path, bytes)?;
        self.written.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }
}

fn display_rel(path: &Path, roots: &[&Path]) -> String {
    for r in roots {
        if let Ok(p) = path.strip_prefix(r) {
            return p.to_string_lossy().into_owned();
        }
    }
    path.to_string_lossy().into_owned()
}

/// Writes a model's ensemble, report, SHAP and dependence exports under
/// `<kind>/` and returns the report with export paths filled in.
fn write_model(w: &mut OutputWriter, run: &ModelRun) -> Result<ModelReport> {
    let k = run.kind.name();
    let mut report = run.report.clone();
    report.exports.clear();
    let shap_rel = format!("{k}/shap_validation.csv");
    w.write(&shap_rel, run.shap.to_csv().as_bytes())?;
    report.exports.push(shap_rel);
    for g in run.importance.iter().take(3) {
        let dep = dependence_series(&run.shap, &run.dataset.features, &g.name)?;
        let rel = format!("{k}/dependence_{}.csv", g.name);
        w.write(&rel, dep.to_csv().as_bytes())?;
        report.exports.push(rel);
    }
    let ens_rel = format!("{k}/ensemble.json");
    w.write(&ens_rel, run.ensemble.to_json().as_bytes())?;
    report.exports.push(ens_rel);
    w.write(
        &format!("{k}/eval.json"),
        serde_json::to_string_pretty(&run.eval)?.as_bytes(),
    )?;
    w.write(
        &format!("{k}/split.json"),
        serde_json::to_string_pretty(&run.split)?.as_bytes(),
    )?;
    let model_cfg = ModelConfig {
        kind: run.kind,
        train: run.report.train_config.clone(),
        split: run.report.split_config.clone(),
    };
    w.write(
        &format!("{k}/config.json"),
        serde_json::to_string_pretty(&model_cfg)?.as_bytes(),
    )?;

    let preds: Vec<f64> = (0..run.dataset.n_rows())
        .map(|r| run.ensemble.predict(run.dataset.features.row(r)))
        .collect::<Result<_>>()?;
    let pv = PopulationVector::new(
        if run.kind == ModelKind::Night {
            Period::Night
        } else {
            Period::Day
        },
        run.dataset.features.tile_ids.clone(),
        preds,
    )?;
    w.write(&format!("{k}/predictions.csv"), pv.to_csv().as_bytes())?;

    w.write(
        &format!("{k}/report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    w.write(&format!("{k}/report.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}

/// Generates (optionally), ingests, downscales, trains every configured
/// model and writes all exports plus a manifest of input and output digests.
pub fn run_all(cfg: &RunConfig, base: &Path) -> Result<RunSummary> {
    cfg.train.validate()?;
    if !(cfg.tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let out = base.join(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    if let Some(s) = &cfg.synth {
        let (grid, truth) = synth::gen_city(s)?;
        synth::write_city(&truth, &grid, &out.join("input"), false)?;
    }
    let inputs = resolve(cfg, base, &out)?;
    let roots = [out.as_path(), base];

    let grid_bytes = std::fs::read(&inputs.grid)?;
    let grid = parse_city_geojson(&grid_bytes, &inputs.ingest.city, &inputs.id_key)?;
    let night_r = CoarseRaster::read(&inputs.night_raster)?;
    let day_r = CoarseRaster::read(&inputs.day_raster)?;

    let mut input_digests = vec![
        (display_rel(&inputs.grid, &roots), sha256_hex(&grid_bytes)),
        (
            display_rel(&inputs.night_raster, &roots),
            file_digest(&inputs.night_raster)?,
        ),
        (
            display_rel(&inputs.day_raster, &roots),
            file_digest(&inputs.day_raster)?,
        ),
    ];
    for files in discover_files(&inputs.traffic_dir, &inputs.ingest)?.values() {
        for (_, p) in files {
            input_digests.push((display_rel(p, &roots), file_digest(p)?));
        }
    }
    input_digests.sort();

    let mut w = OutputWriter {
        dir: out.join("results"),
        written: Vec::new(),
    };

    let (night, night_rep) =
        downscale_population(&night_r, &grid, Period::Night, cfg.conserve_mass)?;
    let (day, day_rep) = downscale_population(&day_r, &grid, Period::Day, cfg.conserve_mass)?;
    w.write("population/night.csv", night.to_csv().as_bytes())?;
    w.write("population/day.csv", day.to_csv().as_bytes())?;
    let reports: [(&str, &DownscaleReport); 2] = [("night", &night_rep), ("day", &day_rep)];
    w.write(
        "population/downscale_report.json",
        serde_json::to_string_pretty(
            &reports
                .iter()
                .map(|(k, r)| json!({"period": k, "report": r}))
                .collect::<Vec<_>>(),
        )?
        .as_bytes(),
    )?;

    let tile_ids = grid.tile_ids();
    let aggs = ingest_directory(&inputs.traffic_dir, &inputs.ingest, &tile_ids)?;
    let ingest_summary: Vec<Value> = aggs
        .iter()
        .map(|g| {
            json!({
                "service": g.service,
                "direction": g.direction,
                "days_read": g.days_read,
                "outage_dates": g.outage_dates,
            })
        })
        .collect();
    w.write(
        "ingest_summary.json",
        serde_json::to_string_pretty(&ingest_summary)?.as_bytes(),
    )?;
    let fm = build_feature_matrix(&aggs, &inputs.ingest.services, &tile_ids)?;
    w.write(
        "features_sidecar.json",
        serde_json::to_string_pretty(&FeatureSidecar::new(
            &fm,
            cfg.split.seed,
            cfg.split.fractions,
        ))?
        .as_bytes(),
    )?;

    let targets = Targets {
        night: Some(night.clone()),
        day: Some(day.clone()),
    };
    let mut model_reports = Vec::new();
    for kind in &cfg.models {
        let run = run_model(*kind, &fm, &targets, &cfg.split, &cfg.train)?;
        model_reports.push(write_model(&mut w, &run)?);
    }

    let dm = diff_map(&night, &day, cfg.tau)?;
    w.write(
        "maps/diffmap.geojson",
        serde_json::to_string(&diffmap_export(&dm, &grid))?.as_bytes(),
    )?;
    for (name, p) in [("night", &night), ("day", &day)] {
        let v = heatmap_export(p, &grid, true)?;
        w.write(
            &format!("maps/heatmap_{name}.geojson"),
            serde_json::to_string(&v)?.as_bytes(),
        )?;
    }
    let change = change_table(&[(inputs.ingest.city.clone(), night.total(), day.total())])?;
    w.write("change_table.md", change.to_markdown().as_bytes())?;
    w.write(
        "change_table.json",
        serde_json::to_string_pretty(&change)?.as_bytes(),
    )?;

    let mut summary_md = String::from("# Run summary\n\n| model | validation RMSLE | baseline RMSLE | top feature |\n|---|---|---|---|\n");
    for r in &model_reports {
        writeln!(
            summary_md,
            "| {} | {:.4} | {:.4} | {} |",
            r.kind.name(),
            r.validation_rmsle,
            r.baseline_rmsle,
            r.top_gain.first().map(|g| g.name.as_str()).unwrap_or("-")
        )
        .unwrap();
    }
    writeln!(
        summary_md,
        "\nDifference map: tiles changing by more than {} persons (a fixed per-tile threshold): {} increase, {} decrease.",
        cfg.tau,
        dm.increase.iter().filter(|b| **b).count(),
        dm.decrease.iter().filter(|b| **b).count()
    )
    .unwrap();
    w.write("summary.md", summary_md.as_bytes())?;

    let manifest = Manifest {
        config: cfg.clone(),
        split_seed: cfg.split.seed,
        synth_seed: cfg.synth.as_ref().map(|s| s.seed),
        inputs: input_digests,
        outputs: w.written.clone(),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(RunSummary {
        output_dir: out,
        reports: model_reports,
        change,
        manifest,
    })
}
