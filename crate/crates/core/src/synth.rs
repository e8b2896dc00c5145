//! Synthetic cities with known night/day populations and per-service usage
//! profiles, emitted in the same formats the pipeline ingests.
//!
//! Tiles form a regular lattice; tile id = row * ncols + col with row 0 at
//! the north edge. Coarse cells are 10 x 10 tile blocks. When the coarse
//! grid is large enough to interpolate, the night population is the
//! mass-conserving downscale of a smooth latent coarse field, so the
//! pipeline's own downscale of the aggregated raster reproduces it.
//!
//! Commuter zones are whole coarse blocks: interior blocks form the centre,
//! border blocks the ring. A fixed number of persons is added to every
//! centre block and removed from every ring block; the day population is
//! the downscale of the shifted coarse field. On grids too small to
//! interpolate, each block's shift is spread over its tiles in proportion
//! to their night population.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureKey;
use crate::grid_geo::{CityGrid, Tile, TileId};
use crate::popgrid::{downscale_population, Period, PopulationVector, MIN_NODES};
use crate::raster::{CoarseRaster, DEFAULT_NODATA};
use crate::rng::derive_seed;
use crate::traffic::{
    accumulate_group, aggregate_to_slots, apply_dst_correction, default_dst, default_theta,
    DayType, Direction, GroupAggregate, IngestConfig, TrafficFileMeta, TrafficMatrix, DAY_TYPES,
    QUARTERS, QUARTERS_PER_SLOT, SLOTS,
};

pub const BLOCK: usize = 10;

const TAG_FIELD: u64 = 1;
const TAG_PROFILE: u64 = 2;
const TAG_PROPENSITY: u64 = 3;
const TAG_DECOY: u64 = 4;
const TAG_FILE: u64 = 5;

/// Day weight of each 2-hour slot: night 22:00-06:00, day 10:00-18:00,
/// linear in between.
pub const DAY_BLEND: [f64; SLOTS] = [
    0.0, 0.0, 0.0, 0.25, 0.75, 1.0, 1.0, 1.0, 1.0, 0.75, 0.25, 0.0,
];

/// Typical usage intensity by slot before per-service jitter.
const USAGE_SHAPE: [f64; SLOTS] = [
    0.3, 0.2, 0.15, 0.3, 0.6, 0.9, 1.0, 1.0, 0.95, 0.9, 0.8, 0.55,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub city: String,
    pub nrows: usize,
    pub ncols: usize,
    pub x0: f64,
    pub y0: f64,
    pub tile_size: f64,
    pub n_services: usize,
    /// The first `n_informative` services follow the population; the rest
    /// follow an unrelated spatial field.
    pub n_informative: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Mean night population per tile.
    pub mean_population: f64,
    /// Σ|day − night| / Σ night, measured over coarse blocks.
    pub commuter_flow: f64,
    /// Share of the flow that leaves the ring; the rest arrives in the centre.
    pub ring_share: f64,
    /// Quarter-hour multiplicative noise.
    pub sigma: f64,
    /// Persistent per-tile usage propensity shared by all services.
    pub sigma_tile: f64,
    /// Persistent per-(tile, service) usage propensity.
    pub sigma_service: f64,
    /// Day weight multiplier on Saturdays and Sundays.
    pub weekend_day_factor: f64,
    /// Dates whose volumes are scaled by `outage_scale` in every file.
    pub outage_dates: Vec<NaiveDate>,
    pub outage_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            city: "Synthville".into(),
            nrows: 50,
            ncols: 50,
            x0: 2.25,
            y0: 48.8,
            tile_size: 0.001,
            n_services: 8,
            n_informative: 5,
            start: NaiveDate::from_ymd_opt(2019, 3, 16).unwrap(),
            end: NaiveDate::from_ymd_opt(2019, 5, 31).unwrap(),
            mean_population: 400.0,
            commuter_flow: 0.2,
            ring_share: 0.8,
            sigma: 0.3,
            sigma_tile: 0.05,
            sigma_service: 0.25,
            weekend_day_factor: 0.3,
            outage_dates: Vec::new(),
            outage_scale: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nrows == 0 || self.ncols == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if !(self.tile_size > 0.0) {
            return bad("tile_size must be positive".into());
        }
        if self.n_services == 0 || self.n_informative > self.n_services {
            return bad("need at least one service and n_informative <= n_services".into());
        }
        if self.end < self.start {
            return bad("end date precedes start date".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("sigma_tile", self.sigma_tile),
            ("sigma_service", self.sigma_service),
            ("mean_population", self.mean_population),
            ("weekend_day_factor", self.weekend_day_factor),
            ("outage_scale", self.outage_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=2.0).contains(&self.commuter_flow) || !(0.0..=1.0).contains(&self.ring_share) {
            return bad("commuter_flow must be in [0, 2] and ring_share in [0, 1]".into());
        }
        Ok(())
    }

    pub fn service_names(&self) -> Vec<String> {
        (0..self.n_services).map(|a| format!("svc{a:02}")).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.start
            .iter_days()
            .take_while(|d| *d <= self.end)
            .collect()
    }

    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.nrows.div_ceil(BLOCK), self.ncols.div_ceil(BLOCK))
    }

    pub fn tile_block(&self, tile: usize) -> (usize, usize) {
        let (r, c) = (tile / self.ncols, tile % self.ncols);
        (r / BLOCK, c / BLOCK)
    }

    fn aligned(&self) -> bool {
        self.nrows.is_multiple_of(BLOCK) && self.ncols.is_multiple_of(BLOCK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Center,
    Ring,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub tile_ids: Vec<TileId>,
    pub night: Vec<f64>,
    pub day: Vec<f64>,
    pub zones: Vec<Zone>,
    pub services: Vec<String>,
    /// w[((service * 2 + direction) * 4 + day_type) * 12 + slot]
    pub profiles: Vec<f64>,
    /// Spatial driver of the uninformative services.
    pub decoy: Vec<f64>,
    /// Usage propensity per (service, tile): propensity[service * tiles + tile]
    pub propensity: Vec<f64>,
    /// Persons added to each centre block by day.
    pub center_shift: f64,
    /// Persons removed from each ring block by day.
    pub ring_shift: f64,
}

impl SynthTruth {
    pub fn n_tiles(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn profile(&self, service: usize, dir: Direction, day_type: DayType, slot: usize) -> f64 {
        self.profiles[((service * 2 + dir.index()) * DAY_TYPES + day_type.index()) * SLOTS + slot]
    }

    pub fn is_informative(&self, service: usize) -> bool {
        service < self.config.n_informative
    }

    /// Population driving usage at `slot` of a day of type `day_type`.
    pub fn present(&self, tile: usize, day_type: DayType, slot: usize) -> f64 {
        let mut b = DAY_BLEND[slot];
        if matches!(day_type, DayType::Saturday | DayType::Sunday) {
            b *= self.config.weekend_day_factor;
        }
        (1.0 - b) * self.night[tile] + b * self.day[tile]
    }

    /// Expected 2-hour slot volume (noise-free apart from the persistent
    /// propensity).
    pub fn expected_slot(
        &self,
        service: usize,
        dir: Direction,
        day_type: DayType,
        slot: usize,
        tile: usize,
    ) -> f64 {
        let driver = if self.is_informative(service) {
            self.present(tile, day_type, slot)
        } else {
            self.decoy[tile]
        };
        self.profile(service, dir, day_type, slot)
            * driver
            * self.propensity[service * self.n_tiles() + tile]
    }

    /// Feature keys of informative services on working days at slots where
    /// the day population dominates.
    pub fn informative_day_keys(&self) -> Vec<FeatureKey> {
        let mut keys = Vec::new();
        for s in self.services.iter().take(self.config.n_informative) {
            for direction in Direction::ALL {
                for day_type in [DayType::Friday, DayType::Weekday] {
                    for slot in (0..SLOTS).filter(|&t| DAY_BLEND[t] >= 0.5) {
                        keys.push(FeatureKey {
                            service: s.clone(),
                            direction,
                            day_type,
                            slot: slot as u8,
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn population(&self, period: Period) -> PopulationVector {
        let v = match period {
            Period::Night => &self.night,
            Period::Day => &self.day,
        };
        PopulationVector::new(period, self.tile_ids.clone(), v.clone())
            .expect("generated populations are valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Regular lattice of square tiles.
pub fn build_grid(cfg: &SynthConfig) -> Result<CityGrid> {
    let s = cfg.tile_size;
    let mut tiles = Vec::with_capacity(cfg.nrows * cfg.ncols);
    for r in 0..cfg.nrows {
        let top = cfg.y0 + (cfg.nrows - r) as f64 * s;
        let bottom = cfg.y0 + (cfg.nrows - r - 1) as f64 * s;
        for c in 0..cfg.ncols {
            let left = cfg.x0 + c as f64 * s;
            let right = cfg.x0 + (c + 1) as f64 * s;
            tiles.push(Tile {
                id: TileId((r * cfg.ncols + c) as u64),
                ring: vec![(left, bottom), (right, bottom), (right, top), (left, top)],
            });
        }
    }
    CityGrid::new(cfg.city.clone(), tiles)
}

/// Smooth positive field on the unit square: a central bump over a floor,
/// modulated by a few random low-frequency waves.
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
    peak: (f64, f64),
    width: f64,
    floor: f64,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, centred: bool) -> Self {
        let waves = (0..4)
            .map(|_| {
                let kx = rng.random_range(0.5..2.0) * std::f64::consts::PI;
                let ky = rng.random_range(0.5..2.0) * std::f64::consts::PI;
                (
                    kx,
                    ky,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.02..0.08),
                )
            })
            .collect();
        let peak = if centred {
            (
                0.5 + rng.random_range(-0.05..0.05),
                0.5 + rng.random_range(-0.05..0.05),
            )
        } else {
            (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9))
        };
        Self {
            waves,
            peak,
            width: rng.random_range(0.25..0.35),
            floor: 1.0,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.peak.0, v - self.peak.1);
        let bump = (-(du * du + dv * dv) / (2.0 * self.width * self.width)).exp();
        let wave: f64 = self
            .waves
            .iter()
            .map(|(kx, ky, ph, a)| a * (kx * u + ky * v + ph).sin())
            .sum();
        (bump + self.floor) * wave.exp()
    }
}

/// Per-tile values of `field` at tile centres, scaled to `mean` per tile.
fn sample_field(cfg: &SynthConfig, field: &SmoothField, mean: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(cfg.nrows * cfg.ncols);
    for r in 0..cfg.nrows {
        for c in 0..cfg.ncols {
            let u = (c as f64 + 0.5) / cfg.ncols as f64;
            let w = (cfg.nrows as f64 - r as f64 - 0.5) / cfg.nrows as f64;
            v.push(field.at(u, w));
        }
    }
    let scale = mean * v.len() as f64 / v.iter().sum::<f64>();
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

fn zones(cfg: &SynthConfig) -> Vec<Zone> {
    let (br, bc) = cfg.coarse_dims();
    (0..cfg.nrows * cfg.ncols)
        .map(|t| {
            let (r, c) = cfg.tile_block(t);
            if br < 3 || bc < 3 {
                Zone::Neutral
            } else if r == 0 || c == 0 || r == br - 1 || c == bc - 1 {
                Zone::Ring
            } else {
                Zone::Center
            }
        })
        .collect()
}

pub fn gen_city(cfg: &SynthConfig) -> Result<(CityGrid, SynthTruth)> {
    cfg.validate()?;
    let grid = build_grid(cfg)?;
    let n = grid.len();
    let tile_ids = grid.tile_ids();

    let mut frng = rng_for(cfg.seed, &[TAG_FIELD]);
    let field = SmoothField::random(&mut frng, true);
    let raw = sample_field(cfg, &field, cfg.mean_population);
    let (br, bc) = cfg.coarse_dims();
    let smooth = cfg.aligned() && br >= MIN_NODES && bc >= MIN_NODES;
    let night = if smooth {
        downscale_population(&block_sum(cfg, &raw)?, &grid, Period::Night, true)?
            .0
            .values
    } else {
        raw
    };

    let zones = zones(cfg);
    let mut block_night = vec![0.0; br * bc];
    let mut block_zone = vec![Zone::Neutral; br * bc];
    for (t, (v, z)) in night.iter().zip(&zones).enumerate() {
        let (r, c) = cfg.tile_block(t);
        block_night[r * bc + c] += v;
        block_zone[r * bc + c] = *z;
    }
    let count = |z: Zone| block_zone.iter().filter(|b| **b == z).count() as f64;
    let (n_center, n_ring) = (count(Zone::Center), count(Zone::Ring));
    let (center_shift, ring_shift) = if n_center > 0.0 && n_ring > 0.0 {
        let moved = cfg.commuter_flow * night.iter().sum::<f64>();
        (
            (1.0 - cfg.ring_share) * moved / n_center,
            cfg.ring_share * moved / n_ring,
        )
    } else {
        (0.0, 0.0)
    };
    let block_day: Vec<f64> = block_night
        .iter()
        .zip(&block_zone)
        .map(|(&p, z)| match z {
            Zone::Center => p + center_shift,
            Zone::Ring => p - ring_shift,
            Zone::Neutral => p,
        })
        .collect();
    if let Some(p) = block_day.iter().find(|p| **p < 0.0) {
        return Err(Error::Config(format!(
            "commuter flow leaves a ring block with {p:.0} persons"
        )));
    }
    let day: Vec<f64> = if center_shift == 0.0 && ring_shift == 0.0 {
        night.clone()
    } else if smooth {
        let coarse = CoarseRaster::new(
            cfg.x0,
            cfg.y0,
            cfg.tile_size * BLOCK as f64,
            br,
            bc,
            block_day,
            DEFAULT_NODATA,
        )?;
        downscale_population(&coarse, &grid, Period::Day, true)?
            .0
            .values
    } else {
        night
            .iter()
            .enumerate()
            .map(|(t, &p)| {
                let (r, c) = cfg.tile_block(t);
                let b = r * bc + c;
                if block_night[b] > 0.0 {
                    p * block_day[b] / block_night[b]
                } else {
                    p
                }
            })
            .collect()
    };

    let mut prng = rng_for(cfg.seed, &[TAG_PROFILE]);
    let mut profiles = Vec::with_capacity(cfg.n_services * 2 * DAY_TYPES * SLOTS);
    for _ in 0..cfg.n_services {
        let level = 20.0 * (0.5 * normal(&mut prng)).exp();
        let curve: Vec<f64> = USAGE_SHAPE
            .iter()
            .map(|s| s * (0.15 * normal(&mut prng)).exp())
            .collect();
        let day_factor = [1.0, 0.9, 0.85, 1.0].map(|f| f * (0.05 * normal(&mut prng)).exp());
        for dir_factor in [0.2, 1.0] {
            for df in day_factor {
                for c in &curve {
                    profiles.push(level * dir_factor * df * c);
                }
            }
        }
    }

    let mut drng = rng_for(cfg.seed, &[TAG_DECOY]);
    let decoy_field = SmoothField::random(&mut drng, false);
    let decoy: Vec<f64> = sample_field(cfg, &decoy_field, cfg.mean_population)
        .into_iter()
        .zip(night.iter().zip(&day))
        .map(|(q, (a, b))| if *a > 0.0 || *b > 0.0 { q } else { 0.0 })
        .collect();

    let mut urng = rng_for(cfg.seed, &[TAG_PROPENSITY]);
    let shared: Vec<f64> = (0..n).map(|_| cfg.sigma_tile * normal(&mut urng)).collect();
    let mut propensity = Vec::with_capacity(cfg.n_services * n);
    for _ in 0..cfg.n_services {
        for s in &shared {
            propensity.push((s + cfg.sigma_service * normal(&mut urng)).exp());
        }
    }

    let truth = SynthTruth {
        config: cfg.clone(),
        tile_ids,
        night,
        day,
        zones,
        services: cfg.service_names(),
        profiles,
        decoy,
        propensity,
        center_shift,
        ring_shift,
    };
    Ok((grid, truth))
}

fn block_sum(cfg: &SynthConfig, values: &[f64]) -> Result<CoarseRaster> {
    if !cfg.aligned() {
        return Err(Error::Config(format!(
            "grid {}x{} is not a multiple of {BLOCK}",
            cfg.nrows, cfg.ncols
        )));
    }
    let (br, bc) = cfg.coarse_dims();
    let mut cells = vec![0.0; br * bc];
    for (t, v) in values.iter().enumerate() {
        let (r, c) = cfg.tile_block(t);
        cells[r * bc + c] += v;
    }
    CoarseRaster::new(
        cfg.x0,
        cfg.y0,
        cfg.tile_size * BLOCK as f64,
        br,
        bc,
        cells,
        DEFAULT_NODATA,
    )
}

/// Coarse raster whose cells sum the 10 x 10 tiles they cover.
pub fn gen_coarse_raster(truth: &SynthTruth, period: Period) -> Result<CoarseRaster> {
    let v = match period {
        Period::Night => &truth.night,
        Period::Day => &truth.day,
    };
    block_sum(&truth.config, v)
}

/// One day's quarter-hour volumes for a (service, direction). All 96
/// columns are emitted on every date, including the DST change.
pub fn gen_traffic_matrix(
    truth: &SynthTruth,
    service: usize,
    date: NaiveDate,
    dir: Direction,
) -> TrafficMatrix {
    let cfg = &truth.config;
    let n = truth.n_tiles();
    let dt = DayType::of(date);
    let mut rng = rng_for(
        cfg.seed,
        &[
            TAG_FILE,
            service as u64,
            date.num_days_from_ce() as u64,
            dir.index() as u64,
        ],
    );
    let outage = if cfg.outage_dates.contains(&date) {
        cfg.outage_scale
    } else {
        1.0
    };
    let mut values = Vec::with_capacity(n * QUARTERS);
    for i in 0..n {
        for t in 0..SLOTS {
            let base =
                truth.expected_slot(service, dir, dt, t, i) / QUARTERS_PER_SLOT as f64 * outage;
            for _ in 0..QUARTERS_PER_SLOT {
                let eps = if cfg.sigma > 0.0 {
                    (cfg.sigma * normal(&mut rng)).exp()
                } else {
                    1.0
                };
                values.push(base * eps);
            }
        }
    }
    let meta = TrafficFileMeta {
        city: cfg.city.clone(),
        service: truth.services[service].clone(),
        date,
        direction: dir,
    };
    TrafficMatrix::new(meta, truth.tile_ids.clone(), values)
        .expect("generated matrix has 96 columns per tile")
}

/// Writes every traffic file of the configured period; returns the count.
pub fn write_traffic_files(truth: &SynthTruth, dir: &Path, gzip: bool) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut jobs = Vec::new();
    for a in 0..truth.services.len() {
        for date in truth.config.dates() {
            for d in Direction::ALL {
                jobs.push((a, date, d));
            }
        }
    }
    jobs.par_iter()
        .try_for_each(|&(a, date, d)| -> Result<()> {
            let m = gen_traffic_matrix(truth, a, date, d);
            let path = dir.join(m.meta.file_name(gzip));
            let text = m.to_text();
            if gzip {
                use std::io::Write;
                let mut enc =
                    flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::new(6));
                enc.write_all(text.as_bytes())?;
                std::fs::write(path, enc.finish()?)?;
            } else {
                std::fs::write(path, text)?;
            }
            Ok(())
        })?;
    Ok(jobs.len())
}

/// Generates and aggregates every (service, direction) group in memory,
/// applying the same DST masking and outage rule as file ingestion.
pub fn aggregate_in_memory(
    truth: &SynthTruth,
    dst_date: NaiveDate,
    theta: f64,
) -> Result<Vec<GroupAggregate>> {
    let mut keys = Vec::new();
    for a in 0..truth.services.len() {
        for d in Direction::ALL {
            keys.push((a, d));
        }
    }
    let dates = truth.config.dates();
    keys.par_iter()
        .map(|&(a, d)| {
            let days = dates
                .iter()
                .map(|&date| {
                    aggregate_to_slots(&apply_dst_correction(
                        gen_traffic_matrix(truth, a, date, d),
                        dst_date,
                    ))
                })
                .collect();
            accumulate_group(&truth.services[a], d, days, &truth.tile_ids, theta)
        })
        .collect()
}

/// Writes the city GeoJSON, both coarse rasters, the truth JSON and every
/// traffic file under `out`.
pub fn write_city(truth: &SynthTruth, grid: &CityGrid, out: &Path, gzip: bool) -> Result<usize> {
    std::fs::create_dir_all(out)?;
    let gj = grid.to_geojson(crate::grid_geo::DEFAULT_ID_KEY);
    std::fs::write(out.join("city.geojson"), serde_json::to_string(&gj)?)?;
    gen_coarse_raster(truth, Period::Night)?.write(&out.join("night.asc"))?;
    gen_coarse_raster(truth, Period::Day)?.write(&out.join("day.asc"))?;
    std::fs::write(out.join("truth.json"), truth.to_json())?;
    let cfg = &truth.config;
    let manifest = IngestConfig {
        city: cfg.city.clone(),
        services: truth.services.clone(),
        start: cfg.start,
        end: cfg.end,
        dst_date: default_dst(),
        outage_theta: default_theta(),
    };
    std::fs::write(
        out.join("ingest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    write_traffic_files(truth, &out.join("traffic"), gzip)
}
