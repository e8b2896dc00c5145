//! Wide feature matrix assembly, target attachment and the train/test/
//! validation split.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_geo::TileId;
use crate::popgrid::PopulationVector;
use crate::rng;
use crate::traffic::{DayType, Direction, GroupAggregate, DAY_TYPES, SLOTS};

pub const NIGHT_COLUMN: &str = "night_population";

/// Number of wide features for the given service, day-type, direction and
/// slot counts.
pub fn feature_count(
    n_services: usize,
    n_day_types: usize,
    n_directions: usize,
    n_slots: usize,
) -> usize {
    n_services * n_day_types * n_directions * n_slots
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub service: String,
    pub direction: Direction,
    pub day_type: DayType,
    pub slot: u8,
}

impl FeatureKey {
    pub fn name(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.service,
            self.direction.code(),
            self.day_type.name(),
            self.slot
        )
    }

    pub fn parse(name: &str) -> Option<Self> {
        let (rest, slot) = name.rsplit_once('_')?;
        let (rest, day) = rest.rsplit_once('_')?;
        let (service, dir) = rest.rsplit_once('_')?;
        let slot: u8 = slot.parse().ok()?;
        if service.is_empty() || slot as usize >= SLOTS {
            return None;
        }
        Some(Self {
            service: service.to_string(),
            direction: Direction::from_code(dir)?,
            day_type: DayType::from_name(day)?,
            slot,
        })
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Keys in canonical order: service (as configured), direction, day type, slot.
pub fn canonical_keys(services: &[String]) -> Vec<FeatureKey> {
    let mut keys = Vec::with_capacity(feature_count(services.len(), DAY_TYPES, 2, SLOTS));
    for s in services {
        for direction in Direction::ALL {
            for day_type in DayType::ALL {
                for slot in 0..SLOTS as u8 {
                    keys.push(FeatureKey {
                        service: s.clone(),
                        direction,
                        day_type,
                        slot,
                    });
                }
            }
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    Traffic(FeatureKey),
    NightPopulation,
}

impl Column {
    pub fn name(&self) -> String {
        match self {
            Column::Traffic(k) => k.name(),
            Column::NightPopulation => NIGHT_COLUMN.to_string(),
        }
    }
}

/// Tiles x features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub tile_ids: Vec<TileId>,
    pub columns: Vec<Column>,
    pub values: Vec<f64>,
    /// (row, column) cells whose accumulator had no observation; stored as 0
    pub imputed: Vec<(usize, usize)>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(Column::name).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    /// Appends one column, aligned by position.
    fn push_column(&mut self, column: Column, values: &[f64]) {
        let old = self.n_cols();
        let mut out = Vec::with_capacity(self.n_rows() * (old + 1));
        for (r, v) in values.iter().enumerate() {
            out.extend_from_slice(&self.values[r * old..(r + 1) * old]);
            out.push(*v);
        }
        self.values = out;
        self.columns.push(column);
    }
}

/// Builds the wide matrix from per (service, direction) aggregates. Rows
/// follow `tile_ids`; columns follow [`canonical_keys`]. Cells with no
/// observation are imputed as 0 and recorded.
pub fn build_feature_matrix(
    aggregates: &[GroupAggregate],
    services: &[String],
    tile_ids: &[TileId],
) -> Result<FeatureMatrix> {
    let keys = canonical_keys(services);
    let n_cols = keys.len();
    let mut values = vec![0.0; tile_ids.len() * n_cols];
    let mut imputed = Vec::new();

    let by_group: HashMap<(&str, Direction), &GroupAggregate> = aggregates
        .iter()
        .map(|g| ((g.service.as_str(), g.direction), g))
        .collect();
    let mut wanted: Vec<TileId> = tile_ids.to_vec();
    wanted.sort_unstable();

    for (si, service) in services.iter().enumerate() {
        for direction in Direction::ALL {
            let group = by_group
                .get(&(service.as_str(), direction))
                .ok_or_else(|| {
                    Error::Invalid(format!("no aggregate for service {service} {direction}"))
                })?;
            let acc = &group.accumulator;
            let mut have = acc.tile_ids.clone();
            have.sort_unstable();
            if have != wanted {
                return Err(Error::TileMismatch(format!(
                    "aggregate {service} {direction} covers {} tiles, grid has {}",
                    have.len(),
                    wanted.len()
                )));
            }
            let base = (si * 2 + direction.index()) * DAY_TYPES * SLOTS;
            for (r, id) in tile_ids.iter().enumerate() {
                let ar = acc.row_of(*id).expect("tile sets checked equal");
                for dt in DayType::ALL {
                    for s in 0..SLOTS {
                        let c = base + dt.index() * SLOTS + s;
                        match acc.mean(ar, dt, s) {
                            Some(m) => values[r * n_cols + c] = m,
                            None => imputed.push((r, c)),
                        }
                    }
                }
            }
        }
    }
    imputed.sort_unstable();
    Ok(FeatureMatrix {
        tile_ids: tile_ids.to_vec(),
        columns: keys.into_iter().map(Column::Traffic).collect(),
        values,
        imputed,
    })
}

/// Features plus an aligned target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub target: Vec<f64>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    pub fn has_night_column(&self) -> bool {
        self.features.columns.last() == Some(&Column::NightPopulation)
    }

    /// `tile_id,<features...>,target[,night_population]`
    pub fn to_csv(&self) -> String {
        let fm = &self.features;
        let night = self.has_night_column();
        let n_traffic = fm.n_cols() - night as usize;
        let mut s = String::from("tile_id");
        for c in &fm.columns[..n_traffic] {
            s.push(',');
            s.push_str(&c.name());
        }
        s.push_str(",target");
        if night {
            s.push(',');
            s.push_str(NIGHT_COLUMN);
        }
        s.push('\n');
        for r in 0..fm.n_rows() {
            let row = fm.row(r);
            s.push_str(&fm.tile_ids[r].to_string());
            for v in &row[..n_traffic] {
                s.push(',');
                s.push_str(&format!("{v}"));
            }
            s.push_str(&format!(",{}", self.target[r]));
            if night {
                s.push_str(&format!(",{}", row[n_traffic]));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, h)| h).unwrap_or_default();
        let names: Vec<&str> = header.split(',').collect();
        if names.first() != Some(&"tile_id") {
            return Err(Error::Parse {
                line: 1,
                message: "header must start with tile_id".into(),
            });
        }
        let target_at = names
            .iter()
            .position(|n| *n == "target")
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "header lacks a target column".into(),
            })?;
        let night = match &names[target_at + 1..] {
            [] => false,
            [n] if *n == NIGHT_COLUMN => true,
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "unexpected columns after target".into(),
                })
            }
        };
        let mut columns = Vec::new();
        for n in &names[1..target_at] {
            let key = FeatureKey::parse(n).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("bad feature column {n:?}"),
            })?;
            columns.push(Column::Traffic(key));
        }
        if night {
            columns.push(Column::NightPopulation);
        }
        let mut tile_ids = Vec::new();
        let mut values = Vec::new();
        let mut target = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != names.len() {
                return Err(bad(format!(
                    "{} fields, header has {}",
                    fields.len(),
                    names.len()
                )));
            }
            tile_ids.push(TileId(
                fields[0].parse().map_err(|_| bad("bad tile id".into()))?,
            ));
            let num = |k: usize| -> Result<f64> {
                fields[k]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number {:?}", fields[k])))
            };
            for k in 1..target_at {
                values.push(num(k)?);
            }
            target.push(num(target_at)?);
            if night {
                values.push(num(target_at + 1)?);
            }
        }
        Ok(Dataset {
            features: FeatureMatrix {
                tile_ids,
                columns,
                values,
                imputed: Vec::new(),
            },
            target,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

fn align(p: &PopulationVector, tile_ids: &[TileId], what: &str) -> Result<Vec<f64>> {
    let map: BTreeMap<TileId, f64> = p.as_map();
    if map.len() != tile_ids.len() {
        return Err(Error::TileMismatch(format!(
            "{what} has {} tiles, features have {}",
            map.len(),
            tile_ids.len()
        )));
    }
    tile_ids
        .iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::TileMismatch(format!("tile {id} missing from {what}")))
        })
        .collect()
}

/// Aligns a target (by tile id) with the feature rows. With `night_extra`,
/// the night population is appended as the last feature column.
pub fn attach_targets(
    fm: &FeatureMatrix,
    target: &PopulationVector,
    night_extra: Option<&PopulationVector>,
) -> Result<Dataset> {
    let y = align(target, &fm.tile_ids, "target")?;
    let mut features = fm.clone();
    if let Some(night) = night_extra {
        let col = align(night, &fm.tile_ids, "night population")?;
        features.push_column(Column::NightPopulation, &col);
    }
    Ok(Dataset {
        features,
        target: y,
    })
}

/// Train/test/validation partition of dataset rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.4, 0.4, 0.2];

/// Shuffles row indices with a seeded SplitMix64 Fisher–Yates permutation
/// and cuts at the rounded cumulative fractions.
pub fn split_rows(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if n < 3 {
        return Err(Error::Dataset(format!(
            "{n} tiles; need at least 3 to split"
        )));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, seed);
    let cut = |cum: f64| ((cum * n as f64) + 0.5).floor().min(n as f64) as usize;
    let a = cut(fractions[0]);
    let b = cut(fractions[0] + fractions[1]).max(a);
    let mut train = order[..a].to_vec();
    let mut test = order[a..b].to_vec();
    let mut validation = order[b..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    validation.sort_unstable();
    Ok(Split {
        train,
        test,
        validation,
        fractions,
        seed,
    })
}

pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    split_rows(ds.n_rows(), fractions, seed)
}

/// Audit sidecar written next to a feature CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub imputed: Vec<(TileId, String)>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl FeatureSidecar {
    pub fn new(fm: &FeatureMatrix, seed: u64, fractions: [f64; 3]) -> Self {
        Self {
            imputed: fm
                .imputed
                .iter()
                .map(|&(r, c)| (fm.tile_ids[r], fm.columns[c].name()))
                .collect(),
            seed,
            fractions,
        }
    }
}
