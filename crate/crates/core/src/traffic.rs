//! Traffic file ingestion: parsing, daylight-saving and outage cleaning,
//! 2-hour slot aggregation and day-type accumulation.
//!
//! One file holds one (city, service, date, direction) combination; each
//! line is a tile id followed by 96 quarter-hour volumes. Per-day slot
//! values are the sum of the slot's eight quarter-hours, and a slot with
//! any masked quarter-hour is dropped for that day.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Weekday};
use flate2::read::GzDecoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_geo::TileId;

pub const QUARTERS: usize = 96;
pub const SLOTS: usize = 12;
pub const QUARTERS_PER_SLOT: usize = 8;
pub const DAY_TYPES: usize = 4;

/// Quarter-hour columns covering the skipped 02:00–03:00 hour.
pub const DST_COLUMNS: std::ops::Range<usize> = 8..12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Upload, Direction::Download];

    pub fn code(self) -> &'static str {
        match self {
            Direction::Upload => "UL",
            Direction::Download => "DL",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "UL" => Some(Direction::Upload),
            "DL" => Some(Direction::Download),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Collapsed day of week. Monday to Thursday share one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DayType {
    Friday,
    Saturday,
    Sunday,
    Weekday,
}

impl DayType {
    pub const ALL: [DayType; DAY_TYPES] = [
        DayType::Friday,
        DayType::Saturday,
        DayType::Sunday,
        DayType::Weekday,
    ];

    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Fri => DayType::Friday,
            Weekday::Sat => DayType::Saturday,
            Weekday::Sun => DayType::Sunday,
            _ => DayType::Weekday,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DayType::Friday => "friday",
            DayType::Saturday => "saturday",
            DayType::Sunday => "sunday",
            DayType::Weekday => "weekday",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrafficFileMeta {
    pub city: String,
    pub service: String,
    pub date: NaiveDate,
    pub direction: Direction,
}

impl TrafficFileMeta {
    /// `{city}_{service}_{YYYYMMDD}_{UL|DL}.txt`
    pub fn file_name(&self, gzip: bool) -> String {
        format!(
            "{}_{}_{}_{}.txt{}",
            self.city,
            self.service,
            self.date.format("%Y%m%d"),
            self.direction.code(),
            if gzip { ".gz" } else { "" }
        )
    }

    /// Parses a file name of the form produced by [`Self::file_name`]. The
    /// city prefix must be known because service names may contain `_`.
    pub fn from_file_name(city: &str, name: &str) -> Option<Self> {
        let stem = name
            .strip_suffix(".txt.gz")
            .or_else(|| name.strip_suffix(".txt"))?;
        let rest = stem.strip_prefix(city)?.strip_prefix('_')?;
        let (rest, dir) = rest.rsplit_once('_')?;
        let (service, date) = rest.rsplit_once('_')?;
        if service.is_empty() {
            return None;
        }
        Some(Self {
            city: city.to_string(),
            service: service.to_string(),
            date: NaiveDate::parse_from_str(date, "%Y%m%d").ok()?,
            direction: Direction::from_code(dir)?,
        })
    }
}

/// Raw quarter-hour volumes of one file with a per-cell missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMatrix {
    pub meta: TrafficFileMeta,
    pub tile_ids: Vec<TileId>,
    /// tiles x 96, row-major
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TrafficMatrix {
    pub fn new(meta: TrafficFileMeta, tile_ids: Vec<TileId>, values: Vec<f64>) -> Result<Self> {
        if values.len() != tile_ids.len() * QUARTERS {
            return Err(Error::Invalid(format!(
                "{} values for {} tiles",
                values.len(),
                tile_ids.len()
            )));
        }
        let mask = vec![false; values.len()];
        Ok(Self {
            meta,
            tile_ids,
            values,
            mask,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * QUARTERS..(i + 1) * QUARTERS]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * QUARTERS..(i + 1) * QUARTERS]
    }

    /// Renders the matrix in the line-oriented text format. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8);
        for (i, id) in self.tile_ids.iter().enumerate() {
            out.push_str(&id.0.to_string());
            for v in self.row(i) {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-day 2-hour slot volumes of one file.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMatrix {
    pub meta: TrafficFileMeta,
    pub tile_ids: Vec<TileId>,
    /// tiles x 12, row-major
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl SlotMatrix {
    /// Network-wide volume over the non-missing slots, summed in row-major
    /// order. Used for outage detection.
    pub fn total(&self) -> f64 {
        let mut t = 0.0;
        for (v, &m) in self.values.iter().zip(&self.missing) {
            if !m {
                t += v;
            }
        }
        t
    }
}

#[inline]
fn slot_sum(quarters: &[f64]) -> f64 {
    let mut s = 0.0;
    for &q in quarters {
        s += q;
    }
    s
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric value {tok:?}"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("value {tok} is not a finite non-negative number"),
        });
    }
    Ok(v)
}

fn parse_tile(tok: &str, line: usize) -> Result<TileId> {
    tok.parse().map(TileId).map_err(|_| Error::Parse {
        line,
        message: format!("bad tile id {tok:?}"),
    })
}

/// Parses one line into `row` (96 values). Returns the tile id, or `None`
/// for a blank line.
fn parse_line(line: &str, lineno: usize, row: &mut [f64; QUARTERS]) -> Result<Option<TileId>> {
    let mut toks = line.split_ascii_whitespace();
    let Some(first) = toks.next() else {
        return Ok(None);
    };
    let id = parse_tile(first, lineno)?;
    let mut n = 0;
    for tok in toks {
        if n < QUARTERS {
            row[n] = parse_value(tok, lineno)?;
        }
        n += 1;
    }
    if n != QUARTERS {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected {QUARTERS} values, found {n}"),
        });
    }
    Ok(Some(id))
}

pub fn parse_traffic_file(bytes: &[u8], meta: TrafficFileMeta) -> Result<TrafficMatrix> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let mut tile_ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = BTreeSet::new();
    let mut row = [0.0; QUARTERS];
    for (i, line) in text.lines().enumerate() {
        let Some(id) = parse_line(line, i + 1, &mut row)? else {
            continue;
        };
        if !seen.insert(id) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate tile id {id}"),
            });
        }
        tile_ids.push(id);
        values.extend_from_slice(&row);
    }
    TrafficMatrix::new(meta, tile_ids, values)
}

/// Masks the four quarter-hours of the nonexistent 02:00–03:00 hour when
/// the file's date is the spring-forward date; identity otherwise.
pub fn apply_dst_correction(mut m: TrafficMatrix, dst_date: NaiveDate) -> TrafficMatrix {
    if m.meta.date == dst_date {
        for i in 0..m.n_tiles() {
            for c in DST_COLUMNS {
                m.mask[i * QUARTERS + c] = true;
            }
        }
    }
    m
}

pub fn aggregate_to_slots(m: &TrafficMatrix) -> SlotMatrix {
    let n = m.n_tiles();
    let mut values = Vec::with_capacity(n * SLOTS);
    let mut missing = Vec::with_capacity(n * SLOTS);
    for i in 0..n {
        let row = m.row(i);
        let mask = m.row_mask(i);
        for s in 0..SLOTS {
            let cols = s * QUARTERS_PER_SLOT..(s + 1) * QUARTERS_PER_SLOT;
            values.push(slot_sum(&row[cols.clone()]));
            missing.push(mask[cols].iter().any(|&b| b));
        }
    }
    SlotMatrix {
        meta: m.meta.clone(),
        tile_ids: m.tile_ids.clone(),
        values,
        missing,
    }
}

/// Single-pass equivalent of `aggregate_to_slots(apply_dst_correction(parse_traffic_file(..)))`
/// that never materialises the 96-column matrix.
pub fn parse_slots_fused(
    bytes: &[u8],
    meta: TrafficFileMeta,
    dst_date: NaiveDate,
) -> Result<SlotMatrix> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let dst = meta.date == dst_date;
    let mut tile_ids = Vec::new();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut seen = BTreeSet::new();
    let mut row = [0.0; QUARTERS];
    for (i, line) in text.lines().enumerate() {
        let Some(id) = parse_line(line, i + 1, &mut row)? else {
            continue;
        };
        if !seen.insert(id) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate tile id {id}"),
            });
        }
        tile_ids.push(id);
        for s in 0..SLOTS {
            let cols = s * QUARTERS_PER_SLOT..(s + 1) * QUARTERS_PER_SLOT;
            let masked = dst && cols.start < DST_COLUMNS.end && DST_COLUMNS.start < cols.end;
            values.push(slot_sum(&row[cols]));
            missing.push(masked);
        }
    }
    Ok(SlotMatrix {
        meta,
        tile_ids,
        values,
        missing,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flags dates whose network-wide total falls below `theta` times the
/// median total of the dates sharing its day type.
pub fn detect_outage(totals: &[(NaiveDate, f64)], theta: f64) -> BTreeSet<NaiveDate> {
    let mut by_type: BTreeMap<DayType, Vec<f64>> = BTreeMap::new();
    for &(d, t) in totals {
        by_type.entry(DayType::of(d)).or_default().push(t);
    }
    let medians: BTreeMap<DayType, f64> = by_type
        .into_iter()
        .map(|(k, mut v)| (k, median(&mut v)))
        .collect();
    totals
        .iter()
        .filter(|(d, t)| *t < theta * medians[&DayType::of(*d)])
        .map(|&(d, _)| d)
        .collect()
}

/// Running per (tile, day type, slot) sums and counts of non-missing
/// per-day slot volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotAccumulator {
    pub tile_ids: Vec<TileId>,
    index: HashMap<TileId, usize>,
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl SlotAccumulator {
    pub fn new(tile_ids: Vec<TileId>) -> Self {
        let index = tile_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let n = tile_ids.len() * DAY_TYPES * SLOTS;
        Self {
            tile_ids,
            index,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    #[inline]
    pub fn offset(row: usize, day_type: DayType, slot: usize) -> usize {
        (row * DAY_TYPES + day_type.index()) * SLOTS + slot
    }

    pub fn row_of(&self, id: TileId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn mean(&self, row: usize, day_type: DayType, slot: usize) -> Option<f64> {
        let k = Self::offset(row, day_type, slot);
        (self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64)
    }

    /// Adds another accumulator over the same tiles cell by cell.
    pub fn merge(&mut self, other: &SlotAccumulator) -> Result<()> {
        if self.tile_ids != other.tile_ids {
            return Err(Error::TileMismatch(
                "accumulators cover different tiles".into(),
            ));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        Ok(())
    }
}

/// Folds one day's slot volumes into the accumulator under the date's day type.
pub fn accumulate_day(
    slots: &SlotMatrix,
    date: NaiveDate,
    acc: &mut SlotAccumulator,
) -> Result<()> {
    let dt = DayType::of(date);
    for (i, id) in slots.tile_ids.iter().enumerate() {
        let row = acc
            .row_of(*id)
            .ok_or_else(|| Error::TileMismatch(format!("tile {id} not in accumulator")))?;
        for s in 0..SLOTS {
            let k = i * SLOTS + s;
            if !slots.missing[k] {
                let o = SlotAccumulator::offset(row, dt, s);
                acc.sum[o] += slots.values[k];
                acc.count[o] += 1;
            }
        }
    }
    Ok(())
}

pub fn default_dst() -> NaiveDate {
    NaiveDate::from_ymd_opt(2019, 3, 31).unwrap()
}

pub fn default_theta() -> f64 {
    0.1
}

/// Ingestion manifest: which services and dates to read and how to clean them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub city: String,
    pub services: Vec<String>,
    pub start: NaiveDate,
    pub end: NaiveDate,
    #[serde(default = "default_dst")]
    pub dst_date: NaiveDate,
    #[serde(default = "default_theta")]
    pub outage_theta: f64,
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.services.is_empty() {
            return Err(Error::Config("empty service list".into()));
        }
        if self.end < self.start {
            return Err(Error::Config("end date precedes start date".into()));
        }
        if !(self.outage_theta >= 0.0 && self.outage_theta < 1.0) {
            return Err(Error::Config(format!(
                "outage_theta {} not in [0, 1)",
                self.outage_theta
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.services {
            if !seen.insert(s) {
                return Err(Error::Config(format!("service {s} listed twice")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

/// Result of ingesting one (service, direction) group.
#[derive(Debug, Clone)]
pub struct GroupAggregate {
    pub service: String,
    pub direction: Direction,
    pub accumulator: SlotAccumulator,
    pub days_read: usize,
    pub outage_dates: BTreeSet<NaiveDate>,
}

/// Cleans and accumulates a group's per-day slot matrices. Days are folded
/// in ascending date order whatever order they arrive in.
pub fn accumulate_group(
    service: &str,
    direction: Direction,
    mut days: Vec<SlotMatrix>,
    tile_ids: &[TileId],
    theta: f64,
) -> Result<GroupAggregate> {
    days.sort_by_key(|d| d.meta.date);
    let totals: Vec<(NaiveDate, f64)> = days.iter().map(|d| (d.meta.date, d.total())).collect();
    let outage_dates = if totals.len() >= 7 {
        detect_outage(&totals, theta)
    } else {
        BTreeSet::new()
    };
    let mut accumulator = SlotAccumulator::new(tile_ids.to_vec());
    for d in &days {
        if !outage_dates.contains(&d.meta.date) {
            accumulate_day(d, d.meta.date, &mut accumulator)?;
        }
    }
    Ok(GroupAggregate {
        service: service.to_string(),
        direction,
        accumulator,
        days_read: days.len(),
        outage_dates,
    })
}

pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Lists the traffic files of `dir` that belong to the configured city,
/// services and date window, grouped by (service index, direction).
pub fn discover_files(
    dir: &Path,
    cfg: &IngestConfig,
) -> Result<BTreeMap<(usize, Direction), Vec<(TrafficFileMeta, PathBuf)>>> {
    let service_index: HashMap<&str, usize> = cfg
        .services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut groups: BTreeMap<(usize, Direction), Vec<(TrafficFileMeta, PathBuf)>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(meta) = TrafficFileMeta::from_file_name(&cfg.city, name) else {
            continue;
        };
        let Some(&si) = service_index.get(meta.service.as_str()) else {
            continue;
        };
        if !cfg.contains(meta.date) {
            continue;
        }
        groups
            .entry((si, meta.direction))
            .or_default()
            .push((meta, path));
    }
    Ok(groups)
}

/// Reads every configured traffic file of a directory and returns one
/// aggregate per (service, direction), in (service order, UL, DL) order.
/// Groups are processed in parallel; each group folds its days in date
/// order, so the result does not depend on scheduling.
pub fn ingest_directory(
    dir: &Path,
    cfg: &IngestConfig,
    tile_ids: &[TileId],
) -> Result<Vec<GroupAggregate>> {
    cfg.validate()?;
    let groups = discover_files(dir, cfg)?;
    let mut keys = Vec::new();
    for si in 0..cfg.services.len() {
        for d in Direction::ALL {
            keys.push((si, d));
        }
    }
    keys.par_iter()
        .map(|key| {
            let files = groups.get(key).map(Vec::as_slice).unwrap_or(&[]);
            let mut days = Vec::with_capacity(files.len());
            for (meta, path) in files {
                let bytes = read_maybe_gz(path)?;
                let slots =
                    parse_slots_fused(&bytes, meta.clone(), cfg.dst_date).map_err(|e| match e {
                        Error::Parse { line, message } => Error::Parse {
                            line,
                            message: format!("{}: {message}", path.display()),
                        },
                        other => other,
                    })?;
                days.push(slots);
            }
            accumulate_group(
                &cfg.services[key.0],
                key.1,
                days,
                tile_ids,
                cfg.outage_theta,
            )
        })
        .collect()
}
