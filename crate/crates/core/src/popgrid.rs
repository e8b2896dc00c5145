//! Downscaling of a coarse population raster onto the 100 m tile grid.
//!
//! The surface through the coarse cell centres is built from 1-D Akima
//! splines: each raster row is interpolated along x, and the resulting
//! column of row values is interpolated along y with a second Akima spline.
//! Akima slopes come from five consecutive nodes, which keeps the surface
//! local: a node only influences the three cells on either side of it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_geo::{locate, CellIndex, CityGrid, TileId};
use crate::raster::CoarseRaster;

pub const MIN_NODES: usize = 5;

/// One-dimensional Akima spline over strictly increasing abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct Akima1D {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl Akima1D {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::Interpolation("x and y lengths differ".into()));
        }
        if n < 3 {
            return Err(Error::Interpolation(format!("{n} nodes, need at least 3")));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Interpolation(
                "abscissae not strictly increasing".into(),
            ));
        }
        // secants padded with two extrapolated values at each end:
        // m[k + 2] is the secant of segment k
        let mut m = vec![0.0; n + 3];
        for k in 0..n - 1 {
            m[k + 2] = (y[k + 1] - y[k]) / (x[k + 1] - x[k]);
        }
        m[1] = 2.0 * m[2] - m[3];
        m[0] = 2.0 * m[1] - m[2];
        m[n + 1] = 2.0 * m[n] - m[n - 1];
        m[n + 2] = 2.0 * m[n + 1] - m[n];

        let slopes = (0..n)
            .map(|i| {
                // node i sits between secants m[i + 1] (left) and m[i + 2] (right)
                let w_left = (m[i + 3] - m[i + 2]).abs();
                let w_right = (m[i + 1] - m[i]).abs();
                if w_left + w_right == 0.0 {
                    0.5 * (m[i + 1] + m[i + 2])
                } else {
                    (w_left * m[i + 1] + w_right * m[i + 2]) / (w_left + w_right)
                }
            })
            .collect();
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            slopes,
        })
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Segment used for `v`: the one whose left node is the last node at or
    /// before `v`, clamped to the first/last segment outside the node range.
    fn segment(&self, v: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xi| xi <= v) {
            0 => 0,
            k => (k - 1).min(n - 2),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        let n = self.x.len();
        if v == self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.segment(v);
        let h = self.x[i + 1] - self.x[i];
        let secant = (self.y[i + 1] - self.y[i]) / h;
        let (t0, t1) = (self.slopes[i], self.slopes[i + 1]);
        let c2 = (3.0 * secant - 2.0 * t0 - t1) / h;
        let c3 = (t0 + t1 - 2.0 * secant) / (h * h);
        let s = v - self.x[i];
        self.y[i] + s * (t0 + s * (c2 + s * c3))
    }

    pub fn contains(&self, v: f64) -> bool {
        self.x[0] <= v && v <= self.x[self.x.len() - 1]
    }
}

/// Fitted surface over the centres of a coarse raster.
#[derive(Debug, Clone)]
pub struct Interpolant {
    xs: Vec<f64>,
    /// y coordinates of rows, ascending (south to north)
    ys: Vec<f64>,
    /// one spline along x per row, south to north
    rows: Vec<Akima1D>,
    pub nodata_filled: usize,
}

/// A point evaluation, flagged when the point lies outside the hull of the
/// coarse cell centres and the value is an extrapolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub outside: bool,
}

/// Fits the Akima surface. No-data cells are treated as zero population.
pub fn fit_akima(raster: &CoarseRaster) -> Result<Interpolant> {
    if raster.nrows < MIN_NODES || raster.ncols < MIN_NODES {
        return Err(Error::Interpolation(format!(
            "grid too small: {}x{} (need at least {MIN_NODES}x{MIN_NODES})",
            raster.nrows, raster.ncols
        )));
    }
    let nodata_filled = raster.nodata_count();
    if nodata_filled == raster.values.len() {
        return Err(Error::Interpolation("raster is entirely no-data".into()));
    }
    let filled = raster.filled(0.0);
    let xs: Vec<f64> = (0..raster.ncols)
        .map(|c| raster.cell_center(0, c).0)
        .collect();
    let mut ys = Vec::with_capacity(raster.nrows);
    let mut rows = Vec::with_capacity(raster.nrows);
    for row in (0..raster.nrows).rev() {
        ys.push(raster.cell_center(row, 0).1);
        let vals = &filled.values[row * raster.ncols..(row + 1) * raster.ncols];
        rows.push(Akima1D::new(&xs, vals)?);
    }
    Ok(Interpolant {
        xs,
        ys,
        rows,
        nodata_filled,
    })
}

impl Interpolant {
    pub fn eval(&self, x: f64, y: f64) -> Evaluation {
        let n = self.ys.len();
        let j = match self.ys.partition_point(|&v| v <= y) {
            0 => 0,
            k => (k - 1).min(n - 2),
        };
        // Rows j-2..=j+3 determine the column spline on segment j exactly.
        let lo = j.saturating_sub(2);
        let hi = (j + 3).min(n - 1);
        let col: Vec<f64> = self.rows[lo..=hi].iter().map(|r| r.eval(x)).collect();
        // at least MIN_NODES rows, so the window always holds >= 4 nodes
        let value = Akima1D::new(&self.ys[lo..=hi], &col)
            .expect("row window has increasing coordinates")
            .eval(y);
        let outside = !(self.rows[0].contains(x) && self.ys[0] <= y && y <= self.ys[n - 1]);
        Evaluation { value, outside }
    }

    pub fn node_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn node_y(&self) -> &[f64] {
        &self.ys
    }
}

pub fn interpolate_at(interp: &Interpolant, points: &[(f64, f64)]) -> Vec<Evaluation> {
    points.iter().map(|&(x, y)| interp.eval(x, y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Night,
    Day,
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Period::Night => "night",
            Period::Day => "day",
        })
    }
}

/// Persons per tile for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationVector {
    pub period: Period,
    pub tile_ids: Vec<TileId>,
    pub values: Vec<f64>,
}

impl PopulationVector {
    pub fn new(period: Period, tile_ids: Vec<TileId>, values: Vec<f64>) -> Result<Self> {
        if tile_ids.len() != values.len() {
            return Err(Error::Invalid(
                "tile ids and values differ in length".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!(
                "population value {v} is not finite and non-negative"
            )));
        }
        Ok(Self {
            period,
            tile_ids,
            values,
        })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn as_map(&self) -> BTreeMap<TileId, f64> {
        self.tile_ids
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile_id,population\n");
        for (id, v) in self.tile_ids.iter().zip(&self.values) {
            s.push_str(&format!("{id},{v}\n"));
        }
        s
    }

    pub fn parse_csv(text: &str, period: Period) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "tile_id,population" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header tile_id,population".into(),
                })
            }
        }
        let mut ids = Vec::new();
        let mut vals = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| bad("expected two fields"))?;
            ids.push(TileId(a.trim().parse().map_err(|_| bad("bad tile id"))?));
            vals.push(b.trim().parse().map_err(|_| bad("bad population"))?);
        }
        Self::new(period, ids, vals)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, period: Period) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?, period)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DownscaleReport {
    pub conserve_mass: bool,
    pub nodata_filled: usize,
    pub tiles_outside_hull: usize,
    pub tiles_clamped: usize,
    pub cells_split_uniformly: usize,
}

/// Interpolates the raster at every tile centroid and converts the density
/// to persons per tile by the tile/cell area ratio. Negative spline values
/// are clamped to zero. With `conserve_mass`, tiles sharing a coarse cell
/// are rescaled so that they sum to that cell's count.
pub fn downscale_population(
    raster: &CoarseRaster,
    grid: &CityGrid,
    period: Period,
    conserve_mass: bool,
) -> Result<(PopulationVector, DownscaleReport)> {
    let interp = fit_akima(raster)?;
    let mut report = DownscaleReport {
        conserve_mass,
        nodata_filled: interp.nodata_filled,
        ..Default::default()
    };
    let cell_area = raster.cell_area();
    let mut cells: Vec<CellIndex> = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len());
    for tile in &grid.tiles {
        let (x, y) = tile.centroid()?;
        let cell = locate(raster, x, y).ok_or_else(|| {
            Error::Invalid(format!(
                "tile {} centroid ({x}, {y}) outside the raster",
                tile.id
            ))
        })?;
        let e = interp.eval(x, y);
        if e.outside {
            report.tiles_outside_hull += 1;
        }
        if e.value < 0.0 {
            report.tiles_clamped += 1;
        }
        cells.push(cell);
        values.push(e.value.max(0.0) * (tile.area() / cell_area));
    }

    if conserve_mass {
        let filled = raster.filled(0.0);
        let mut members: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
        for (i, c) in cells.iter().enumerate() {
            members.entry(*c).or_default().push(i);
        }
        for (cell, idx) in members {
            let target = filled.get(cell.row, cell.col);
            let sum: f64 = idx.iter().map(|&i| values[i]).sum();
            if sum > 0.0 {
                let k = target / sum;
                for &i in &idx {
                    values[i] *= k;
                }
            } else {
                report.cells_split_uniformly += 1;
                let share = target / idx.len() as f64;
                for &i in &idx {
                    values[i] = share;
                }
            }
        }
    }
    Ok((
        PopulationVector::new(period, grid.tile_ids(), values)?,
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_geo::Tile;

    fn raster_from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> CoarseRaster {
        let mut r = CoarseRaster::new(0.0, 0.0, 1.0, n, n, vec![0.0; n * n], -9999.0).unwrap();
        for row in 0..n {
            for col in 0..n {
                let (x, y) = r.cell_center(row, col);
                r.values[row * n + col] = f(x, y);
            }
        }
        r
    }

    #[test]
    fn akima_1d_reproduces_nodes_and_lines() {
        let x = [0.0, 1.0, 2.5, 3.0, 4.0, 6.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let a = Akima1D::new(&x, &y).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(a.eval(*xi), *yi);
        }
        for v in [0.3, 1.7, 2.9, 5.5, -1.0, 7.0] {
            assert!((a.eval(v) - (3.0 * v - 1.0)).abs() < 1e-12);
        }
        assert!(a.slopes().iter().all(|s| (s - 3.0).abs() < 1e-12));
    }

    #[test]
    fn akima_1d_flat_then_step_does_not_overshoot() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let a = Akima1D::new(&x, &y).unwrap();
        for k in 0..=50 {
            let v = a.eval(k as f64 * 0.1);
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{v}");
        }
        // flat runs stay flat
        assert_eq!(a.eval(0.5), 0.0);
        assert_eq!(a.eval(4.5), 1.0);
    }

    #[test]
    fn akima_1d_rejects_bad_input() {
        assert!(Akima1D::new(&[0.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(Akima1D::new(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn grid_too_small() {
        let r = raster_from_fn(4, |_, _| 1.0);
        assert!(matches!(fit_akima(&r), Err(Error::Interpolation(_))));
    }

    #[test]
    fn all_nodata() {
        let r = raster_from_fn(5, |_, _| -9999.0);
        assert!(fit_akima(&r).is_err());
    }

    #[test]
    fn constant_surface() {
        let r = raster_from_fn(6, |_, _| 7.25);
        let i = fit_akima(&r).unwrap();
        for &(x, y) in &[(0.1, 0.2), (3.3, 2.7), (5.9, 5.9), (-1.0, 8.0)] {
            assert!((i.eval(x, y).value - 7.25).abs() <= 1e-12 * 7.25);
        }
    }

    #[test]
    fn outside_flag() {
        let r = raster_from_fn(5, |x, y| x + y);
        let i = fit_akima(&r).unwrap();
        assert!(!i.eval(2.5, 2.5).outside);
        assert!(!i.eval(0.5, 4.5).outside);
        assert!(i.eval(0.2, 2.5).outside);
        assert!(i.eval(2.5, 4.9).outside);
        let e = interpolate_at(&i, &[(0.2, 2.5)]);
        assert!(e[0].outside && e[0].value.is_finite());
    }

    fn unit_grid(n: usize, step: f64) -> CityGrid {
        let mut tiles = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 * step, r as f64 * step);
                tiles.push(Tile {
                    id: TileId((r * n + c) as u64),
                    ring: vec![(x, y), (x + step, y), (x + step, y + step), (x, y + step)],
                });
            }
        }
        CityGrid::new("t", tiles).unwrap()
    }

    #[test]
    fn constant_raster_splits_evenly() {
        let r = raster_from_fn(5, |_, _| 100.0);
        let g = unit_grid(50, 0.1);
        let (p, rep) = downscale_population(&r, &g, Period::Night, false).unwrap();
        for v in &p.values {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
        assert_eq!(rep.tiles_clamped, 0);
    }

    #[test]
    fn conserve_mass_matches_cells() {
        let r = raster_from_fn(5, |x, y| {
            50.0 + 40.0 * (x * 1.3).sin() * (y * 0.7).cos() + 5.0 * x
        });
        let g = unit_grid(50, 0.1);
        let (p, _) = downscale_population(&r, &g, Period::Day, true).unwrap();
        let cells = crate::grid_geo::map_fine_to_coarse(&g, &r).unwrap();
        let mut sums: BTreeMap<CellIndex, f64> = BTreeMap::new();
        for (c, v) in cells.iter().zip(&p.values) {
            *sums.entry(c.unwrap()).or_default() += v;
        }
        for (c, s) in sums {
            let want = r.get(c.row, c.col);
            assert!((s - want).abs() <= 1e-6 * want, "{c:?}: {s} vs {want}");
        }
        assert!((p.total() - r.total()).abs() <= 1e-6 * r.total());
    }

    #[test]
    fn zero_cells_split_uniformly() {
        let mut r = raster_from_fn(5, |_, _| 0.0);
        r.values[12] = 10.0;
        let g = unit_grid(50, 0.1);
        let (p, _) = downscale_population(&r, &g, Period::Night, true).unwrap();
        assert!((p.total() - 10.0).abs() < 1e-9);
        let cells = crate::grid_geo::map_fine_to_coarse(&g, &r).unwrap();
        for (c, v) in cells.iter().zip(&p.values) {
            let c = c.unwrap();
            if (c.row, c.col) != (2, 2) {
                assert_eq!(*v, 0.0);
            }
        }
        // a flat zero surface gives every cell a zero interpolated sum
        let (_, rep) =
            downscale_population(&raster_from_fn(5, |_, _| 0.0), &g, Period::Night, true).unwrap();
        assert_eq!(rep.cells_split_uniformly, 25);
    }

    #[test]
    fn uncovered_grid_errors() {
        let r = raster_from_fn(5, |_, _| 1.0);
        let g = unit_grid(6, 1.0);
        assert!(downscale_population(&r, &g, Period::Night, false).is_err());
    }

    #[test]
    fn population_csv_round_trip() {
        let p = PopulationVector::new(
            Period::Night,
            vec![TileId(3), TileId(1)],
            vec![0.5, 1.0 / 3.0],
        )
        .unwrap();
        let back = PopulationVector::parse_csv(&p.to_csv(), Period::Night).unwrap();
        assert_eq!(p, back);
        assert!(PopulationVector::new(Period::Night, vec![TileId(1)], vec![-1.0]).is_err());
    }
}
