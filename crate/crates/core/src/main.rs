use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mobipop_core::explain::{dependence_series, tree_shap};
use mobipop_core::features::{build_feature_matrix, Dataset, FeatureMatrix, FeatureSidecar, Split};
use mobipop_core::gbtree::{train, Ensemble, EvalReport};
use mobipop_core::grid_geo::{parse_city_geojson, CityGrid, DEFAULT_ID_KEY};
use mobipop_core::pipeline::{
    assess_model, change_table, diff_map, diffmap_export, heatmap_export, read_aggregates, run_all,
    city_populations, write_aggregates, ModelConfig, ModelKind, RunConfig, SplitConfig,
};
use mobipop_core::popgrid::{downscale_population, Period, PopulationVector};
use mobipop_core::raster::CoarseRaster;
use mobipop_core::synth::{gen_city, write_city, SynthConfig};
use mobipop_core::traffic::{ingest_directory, IngestConfig};
use mobipop_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mobipop",
    version,
    about = "Day/night population estimation from mobile traffic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeriodArg {
    Night,
    Day,
}

impl From<PeriodArg> for Period {
    fn from(p: PeriodArg) -> Self {
        match p {
            PeriodArg::Night => Period::Night,
            PeriodArg::Day => Period::Day,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Night,
    Day,
    DayGivenNight,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Night => ModelKind::Night,
            ModelArg::Day => ModelKind::Day,
            ModelArg::DayGivenNight => ModelKind::DayGivenNight,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RowsArg {
    Validation,
    All,
}

#[derive(clap::Args)]
struct GridArgs {
    /// City GeoJSON
    #[arg(long)]
    grid: PathBuf,
    /// Property holding the tile id
    #[arg(long, default_value = DEFAULT_ID_KEY)]
    id_key: String,
    #[arg(long, default_value = "city")]
    city: String,
}

impl GridArgs {
    fn load(&self) -> Result<CityGrid> {
        parse_city_geojson(&std::fs::read(&self.grid)?, &self.city, &self.id_key)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Reduce traffic files to per-tile day-type/slot accumulators
    Aggregate {
        /// Ingest manifest: city, services, start, end, dst_date, outage_theta
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        traffic_dir: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = DEFAULT_ID_KEY)]
        id_key: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate a coarse raster onto the tile grid
    Downscale {
        #[arg(long)]
        raster: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_enum, default_value = "night")]
        period: PeriodArg,
        /// Rescale tiles so each coarse cell keeps its count
        #[arg(long)]
        conserve_mass: bool,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the downscale report (JSON)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the feature matrix and attach a target population
    Features {
        #[arg(long)]
        aggregates: PathBuf,
        /// Target population CSV
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "night")]
        target_period: PeriodArg,
        /// Night population appended as the night_population column
        #[arg(long)]
        night: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Imputation and split sidecar (JSON)
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model and write ensemble, evaluation and split to a directory
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        dataset: PathBuf,
        /// Run config supplying `train` and `split` settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// SHAP values of a trained model
    Explain {
        /// Directory written by `train`
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        rows: RowsArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the dependence series of this feature
        #[arg(long)]
        dependence: Option<String>,
        #[arg(long, requires = "dependence")]
        dependence_out: Option<PathBuf>,
    },
    /// Model report (JSON and markdown) or the population change table
    Report {
        /// Directory written by `train`; report.json and report.md go there
        #[arg(long, required_unless_present = "cities")]
        model_dir: Option<PathBuf>,
        #[arg(long, required_unless_present = "cities")]
        dataset: Option<PathBuf>,
        /// Print the change table of the reference city populations
        #[arg(long)]
        cities: bool,
    },
    /// Tiles whose population rises or falls by more than tau from night to day
    Diffmap {
        #[arg(long)]
        night: PathBuf,
        #[arg(long)]
        day: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Population concentration map as GeoJSON
    Heatmap {
        #[arg(long)]
        population: PathBuf,
        #[arg(long, value_enum, default_value = "night")]
        period: PeriodArg,
        #[command(flatten)]
        grid: GridArgs,
        /// Omit the log-scaled value
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic city with traffic files and rasters
    SynthGen {
        /// Generator settings (JSON); defaults otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gzip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline driven by one JSON config
    RunAll {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

struct SavedModel {
    config: ModelConfig,
    ensemble: Ensemble,
    eval: EvalReport,
    split: Split,
}

fn load_model(dir: &Path) -> Result<SavedModel> {
    Ok(SavedModel {
        config: read_json(&dir.join("config.json"))?,
        ensemble: Ensemble::from_json(&std::fs::read_to_string(dir.join("ensemble.json"))?)?,
        eval: read_json(&dir.join("eval.json"))?,
        split: read_json(&dir.join("split.json"))?,
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Aggregate {
            manifest,
            traffic_dir,
            grid,
            id_key,
            out,
        } => {
            let ingest: IngestConfig = read_config(&manifest)?;
            ingest.validate()?;
            let grid = parse_city_geojson(&std::fs::read(&grid)?, &ingest.city, &id_key)?;
            let aggs = ingest_directory(&traffic_dir, &ingest, &grid.tile_ids())?;
            if let Some(p) = out.parent() {
                std::fs::create_dir_all(p)?;
            }
            write_aggregates(&aggs, &out)?;
            for g in &aggs {
                eprintln!(
                    "{} {}: {} days, {} outage dates",
                    g.service,
                    g.direction,
                    g.days_read,
                    g.outage_dates.len()
                );
            }
        }
        Command::Downscale {
            raster,
            grid,
            period,
            conserve_mass,
            out,
            report,
        } => {
            let r = CoarseRaster::read(&raster)?;
            let (pv, rep) = downscale_population(&r, &grid.load()?, period.into(), conserve_mass)?;
            pv.write_csv(&out)?;
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
            eprintln!("{} tiles, total {:.1}", pv.values.len(), pv.total());
        }
        Command::Features {
            aggregates,
            target,
            target_period,
            night,
            out,
            sidecar,
            seed,
        } => {
            let aggs = read_aggregates(&aggregates)?;
            let first = aggs
                .first()
                .ok_or_else(|| Error::Invalid("aggregate file holds no groups".into()))?;
            let tile_ids = first.accumulator.tile_ids.clone();
            let mut services: Vec<String> = Vec::new();
            for g in &aggs {
                if !services.contains(&g.service) {
                    services.push(g.service.clone());
                }
            }
            let fm: FeatureMatrix = build_feature_matrix(&aggs, &services, &tile_ids)?;
            let target = PopulationVector::read_csv(&target, target_period.into())?;
            let night = night
                .map(|p| PopulationVector::read_csv(&p, Period::Night))
                .transpose()?;
            let ds = mobipop_core::features::attach_targets(&fm, &target, night.as_ref())?;
            write_text(&out, &ds.to_csv())?;
            if let Some(p) = sidecar {
                write_json(
                    &p,
                    &FeatureSidecar::new(&fm, seed, SplitConfig::default().fractions),
                )?;
            }
            eprintln!(
                "{} rows, {} features, {} imputed cells",
                ds.n_rows(),
                ds.features.n_cols(),
                fm.imputed.len()
            );
        }
        Command::Train {
            model,
            dataset,
            config,
            out,
        } => {
            let (train_cfg, split_cfg) = match config {
                Some(p) => {
                    let c = RunConfig::load(&p)?.0;
                    (c.train, c.split)
                }
                None => Default::default(),
            };
            train_cfg.validate()?;
            let ds = Dataset::read_csv(&dataset)?;
            let kind: ModelKind = model.into();
            if ds.has_night_column() != (kind == ModelKind::DayGivenNight) {
                return Err(Error::Invalid(format!(
                    "model {} does not match the dataset's night_population column",
                    kind.name()
                )));
            }
            let split =
                mobipop_core::features::split_dataset(&ds, split_cfg.fractions, split_cfg.seed)?;
            let (ens, eval) = train(&ds, &split, &train_cfg)?;
            std::fs::create_dir_all(&out)?;
            write_text(&out.join("ensemble.json"), &ens.to_json())?;
            write_json(&out.join("eval.json"), &eval)?;
            write_json(&out.join("split.json"), &split)?;
            write_json(
                &out.join("config.json"),
                &ModelConfig {
                    kind,
                    train: train_cfg,
                    split: split_cfg,
                },
            )?;
            eprintln!(
                "{}: {} trees, validation RMSLE {:.4}",
                kind.name(),
                eval.best_round,
                eval.validation_rmsle
            );
        }
        Command::Explain {
            model_dir,
            dataset,
            rows,
            out,
            dependence,
            dependence_out,
        } => {
            let m = load_model(&model_dir)?;
            let ds = Dataset::read_csv(&dataset)?;
            let rows: Vec<usize> = match rows {
                RowsArg::Validation => m.split.validation.clone(),
                RowsArg::All => (0..ds.n_rows()).collect(),
            };
            if let Some(r) = rows.iter().find(|&&r| r >= ds.n_rows()) {
                return Err(Error::Invalid(format!(
                    "split row {r} is outside the dataset"
                )));
            }
            let sm = tree_shap(&m.ensemble, &ds.features, &rows)?;
            write_text(&out, &sm.to_csv())?;
            if let Some(f) = dependence {
                let series = dependence_series(&sm, &ds.features, &f)?;
                let path = dependence_out
                    .unwrap_or_else(|| out.with_file_name(format!("dependence_{f}.csv")));
                write_text(&path, &series.to_csv())?;
            }
        }
        Command::Report {
            model_dir,
            dataset,
            cities,
        } => {
            if cities {
                print!("{}", change_table(&city_populations())?.to_markdown());
                return Ok(());
            }
            let (dir, dataset) = (model_dir.unwrap(), dataset.unwrap());
            let m = load_model(&dir)?;
            let ds = Dataset::read_csv(&dataset)?;
            let run = assess_model(&m.config, ds, m.split, m.ensemble, m.eval)?;
            write_json(&dir.join("report.json"), &run.report)?;
            let md = run.report.to_markdown();
            write_text(&dir.join("report.md"), &md)?;
            print!("{md}");
        }
        Command::Diffmap {
            night,
            day,
            grid,
            tau,
            out,
        } => {
            let n = PopulationVector::read_csv(&night, Period::Night)?;
            let d = PopulationVector::read_csv(&day, Period::Day)?;
            let dm = diff_map(&n, &d, tau)?;
            write_text(
                &out,
                &serde_json::to_string(&diffmap_export(&dm, &grid.load()?))?,
            )?;
            eprintln!(
                "{} increase, {} decrease (tau {tau})",
                dm.increase_ids().len(),
                dm.decrease_ids().len()
            );
        }
        Command::Heatmap {
            population,
            period,
            grid,
            linear,
            out,
        } => {
            let p = PopulationVector::read_csv(&population, period.into())?;
            let v = heatmap_export(&p, &grid.load()?, !linear)?;
            write_text(&out, &serde_json::to_string(&v)?)?;
        }
        Command::SynthGen {
            config,
            seed,
            gzip,
            out,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_config(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (grid, truth) = gen_city(&cfg)?;
            let n = write_city(&truth, &grid, &out, gzip)?;
            eprintln!(
                "{} tiles, {n} traffic files in {}",
                grid.len(),
                out.display()
            );
        }
        Command::RunAll { config } => {
            let (cfg, base) = RunConfig::load(&config)?;
            let summary = run_all(&cfg, &base)?;
            for r in &summary.reports {
                println!(
                    "{}: validation RMSLE {:.4} (baseline {:.4}), top feature {}",
                    r.kind.name(),
                    r.validation_rmsle,
                    r.baseline_rmsle,
                    r.top_gain.first().map(|g| g.name.as_str()).unwrap_or("-")
                );
            }
            println!("results in {}", summary.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
