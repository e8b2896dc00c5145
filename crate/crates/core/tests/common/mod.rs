//! Independent oracles and builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use mobipop_core::features::{Column, Dataset, FeatureKey, FeatureMatrix, Split};
use mobipop_core::gbtree::{train, Ensemble, Node, SplitMethod, TrainConfig, Tree};
use mobipop_core::grid_geo::{CityGrid, Tile, TileId};
use mobipop_core::raster::CoarseRaster;
use mobipop_core::traffic::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn column(j: usize) -> Column {
    Column::Traffic(FeatureKey {
        service: format!("f{j}"),
        direction: Direction::Upload,
        day_type: DayType::Weekday,
        slot: 0,
    })
}

/// Dataset from row-major values.
pub fn dataset(n_cols: usize, values: Vec<f64>, target: Vec<f64>) -> Dataset {
    let n = target.len();
    assert_eq!(values.len(), n * n_cols);
    Dataset {
        features: FeatureMatrix {
            tile_ids: (0..n as u64).map(TileId).collect(),
            columns: (0..n_cols).map(column).collect(),
            values,
            imputed: Vec::new(),
        },
        target,
    }
}

pub fn all_train(n: usize) -> Split {
    Split {
        train: (0..n).collect(),
        test: Vec::new(),
        validation: Vec::new(),
        fractions: [1.0, 0.0, 0.0],
        seed: 0,
    }
}

/// Random dataset whose features take at most `levels` distinct values;
/// the target is a noisy nonlinear function of the first columns.
pub fn random_dataset(seed: u64, n: usize, n_cols: usize, levels: u32) -> Dataset {
    let mut r = rng(seed);
    let mut values = Vec::with_capacity(n * n_cols);
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n_cols)
            .map(|_| r.random_range(0..levels) as f64 * 0.5 - 3.0)
            .collect();
        let signal = row[0] * row[0] + 2.0 * row.get(1).copied().unwrap_or(0.0).max(0.0);
        target.push((signal + r.random_range(0.0..2.0)).exp() * 3.0);
        values.extend(row);
    }
    dataset(n_cols, values, target)
}

pub fn z(p: f64) -> f64 {
    p.ln_1p()
}

/// Rows (indices into `ds`) reaching each node of `tree` when routed from
/// the root.
pub fn node_rows(tree: &Tree, ds: &Dataset, rows: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); tree.nodes.len()];
    for &r in rows {
        let x = ds.features.row(r);
        let mut i = 0;
        loop {
            out[i].push(r);
            match &tree.nodes[i] {
                Node::Leaf { .. } => break,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
    out
}

pub fn node_depths(tree: &Tree) -> Vec<usize> {
    let mut d = vec![0; tree.nodes.len()];
    for i in 0..tree.nodes.len() {
        if let Node::Split { left, right, .. } = tree.nodes[i] {
            d[left] = d[i] + 1;
            d[right] = d[i] + 1;
        }
    }
    d
}

/// Best split gain over every feature and every boundary between distinct
/// values, enumerated directly from the rows. Returns None when no split
/// satisfies the child-weight limit.
pub fn brute_force_best_gain(
    ds: &Dataset,
    rows: &[usize],
    grad: &BTreeMap<usize, f64>,
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
) -> Option<f64> {
    let g_all: f64 = rows.iter().map(|r| grad[r]).sum();
    let h_all = rows.len() as f64;
    let parent = g_all * g_all / (h_all + lambda);
    let mut best: Option<f64> = None;
    for f in 0..ds.features.n_cols() {
        let mut vals: Vec<f64> = rows.iter().map(|&r| ds.features.get(r, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let (mut gl, mut hl) = (0.0, 0.0);
            for &r in rows {
                if ds.features.get(r, f) <= w[0] {
                    gl += grad[&r];
                    hl += 1.0;
                }
            }
            let (gr, hr) = (g_all - gl, h_all - hl);
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent) - gamma;
            best = Some(best.map_or(gain, |b: f64| b.max(gain)));
        }
    }
    best
}

/// Random tree of depth at most `max_depth` over `n_features` features
/// with positive, consistent covers.
pub fn random_tree(r: &mut ChaCha8Rng, n_features: usize, max_depth: usize) -> Tree {
    fn grow(
        r: &mut ChaCha8Rng,
        nodes: &mut Vec<Node>,
        nf: usize,
        depth: usize,
        max_depth: usize,
        cover: f64,
    ) -> usize {
        let id = nodes.len();
        if depth == max_depth || (depth > 0 && r.random_bool(0.25)) {
            nodes.push(Node::Leaf {
                weight: r.random_range(-2.0..2.0),
                cover,
            });
            return id;
        }
        nodes.push(Node::Leaf { weight: 0.0, cover });
        let share = r.random_range(0.1..0.9);
        let left = grow(r, nodes, nf, depth + 1, max_depth, cover * share);
        let right = grow(r, nodes, nf, depth + 1, max_depth, cover * (1.0 - share));
        nodes[id] = Node::Split {
            feature: r.random_range(0..nf),
            threshold: r.random_range(-1.0..1.0),
            left,
            right,
            default_left: true,
            gain: 1.0,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    let cover = r.random_range(10.0..100.0);
    grow(r, &mut nodes, n_features, 0, max_depth, cover);
    Tree { nodes }
}

/// Cover-weighted conditional expectation of the tree output when only the
/// features in `known` are observed.
fn conditional(tree: &Tree, i: usize, x: &[f64], known: &[bool]) -> f64 {
    match &tree.nodes[i] {
        Node::Leaf { weight, .. } => *weight,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            if known[*feature] {
                let next = if x[*feature] < *threshold {
                    *left
                } else {
                    *right
                };
                conditional(tree, next, x, known)
            } else {
                let (cl, cr) = (tree.nodes[*left].cover(), tree.nodes[*right].cover());
                (cl * conditional(tree, *left, x, known) + cr * conditional(tree, *right, x, known))
                    / (cl + cr)
            }
        }
    }
}

/// Shapley values by enumerating every subset of all `n_features` players.
pub fn shapley_oracle(tree: &Tree, x: &[f64], n_features: usize) -> Vec<f64> {
    let m = n_features;
    let fact: Vec<f64> = (0..=m)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let mut phi = vec![0.0; m];
    let mut known = vec![false; m];
    for mask in 0u32..(1 << m) {
        for (j, k) in known.iter_mut().enumerate() {
            *k = mask & (1 << j) != 0;
        }
        let s = mask.count_ones() as usize;
        let without = conditional(tree, 0, x, &known);
        for i in 0..m {
            if known[i] {
                continue;
            }
            known[i] = true;
            let with = conditional(tree, 0, x, &known);
            known[i] = false;
            phi[i] += fact[s] * fact[m - s - 1] / fact[m] * (with - without);
        }
    }
    phi
}

/// Margin of an ensemble on a row, summed tree by tree in order.
pub fn margin(e: &Ensemble, x: &[f64]) -> f64 {
    e.base_score
        + e.trees
            .iter()
            .map(|t| e.learning_rate * t.eval(x))
            .sum::<f64>()
}

/// Akima node slopes from the original five-point formula with the usual
/// two extrapolated secants at each end.
pub fn akima_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m: Vec<f64> = (0..n - 1)
        .map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k]))
        .collect();
    let (a, b) = (m[0], m[1]);
    let lead1 = 2.0 * a - b;
    let lead0 = 2.0 * lead1 - a;
    let (c, d) = (m[n - 2], m[n - 3]);
    let tail0 = 2.0 * c - d;
    let tail1 = 2.0 * tail0 - c;
    m.insert(0, lead1);
    m.insert(0, lead0);
    m.push(tail0);
    m.push(tail1);
    (0..n)
        .map(|i| {
            let (m1, m2, m3, m4) = (m[i], m[i + 1], m[i + 2], m[i + 3]);
            let (w1, w2) = ((m4 - m3).abs(), (m2 - m1).abs());
            if w1 + w2 == 0.0 {
                (m2 + m3) / 2.0
            } else {
                (w1 * m2 + w2 * m3) / (w1 + w2)
            }
        })
        .collect()
}

/// Hermite cubic between two nodes with the given end slopes.
pub fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, t0: f64, t1: f64, v: f64) -> f64 {
    let h = x1 - x0;
    let s = (v - x0) / h;
    let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
    let h10 = s.powi(3) - 2.0 * s * s + s;
    let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
    let h11 = s.powi(3) - s * s;
    h00 * y0 + h10 * h * t0 + h01 * y1 + h11 * h * t1
}

/// Per (tile, day type, slot) mean of the given per-day slot values, by a
/// straight group-by over (date, tile, slot, value) records.
pub fn group_by_means(
    records: &[(NaiveDate, usize, usize, f64)],
) -> BTreeMap<(usize, DayType, usize), f64> {
    let mut acc: BTreeMap<(usize, DayType, usize), Vec<f64>> = BTreeMap::new();
    for &(d, tile, slot, v) in records {
        assert!(slot < SLOTS);
        acc.entry((tile, DayType::of(d), slot)).or_default().push(v);
    }
    acc.into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

pub fn train_all(ds: &Dataset, cfg: &TrainConfig) -> Ensemble {
    train(ds, &all_train(ds.n_rows()), cfg).unwrap().0
}

/// Mean squared error in z-space after each number of trees.
fn loss_curve(e: &Ensemble, ds: &Dataset) -> Vec<f64> {
    (0..=e.trees.len())
        .map(|k| {
            let t = e.truncated(k);
            (0..ds.n_rows())
                .map(|r| (margin(&t, ds.features.row(r)) - z(ds.target[r])).powi(2))
                .sum::<f64>()
                / ds.n_rows() as f64
        })
        .collect()
}

pub fn assert_loss_non_increasing(ds: &Dataset, cfg: &TrainConfig) {
    let e = train_all(ds, cfg);
    let curve = loss_curve(&e, ds);
    for w in curve.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{w:?}");
    }
}

/// Checks every split node of every tree against exhaustive threshold
/// enumeration over the rows that reach it.
pub fn assert_gain_maximal(ds: &Dataset, cfg: &TrainConfig) {
    let e = train_all(ds, cfg);
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    for k in 0..e.trees.len() {
        let prefix = e.truncated(k);
        let grad: BTreeMap<usize, f64> = rows
            .iter()
            .map(|&r| (r, margin(&prefix, ds.features.row(r)) - z(ds.target[r])))
            .collect();
        let tree = &e.trees[k];
        let reach = node_rows(tree, ds, &rows);
        let depth = node_depths(tree);
        for (i, node) in tree.nodes.iter().enumerate() {
            let best = brute_force_best_gain(
                ds,
                &reach[i],
                &grad,
                cfg.lambda,
                cfg.gamma,
                cfg.min_child_weight,
            );
            match node {
                Node::Split { gain, .. } => {
                    let b = best.expect("a split node has a valid split");
                    assert!(
                        (gain - b).abs() <= 1e-9 * b.abs().max(1.0),
                        "tree {k} node {i}: {gain} vs {b}"
                    );
                }
                Node::Leaf { .. } if depth[i] < cfg.max_depth => {
                    if let Some(b) = best {
                        assert!(b <= 1e-9, "tree {k} leaf {i} left gain {b} unused");
                    }
                }
                Node::Leaf { .. } => {}
            }
        }
    }
}

pub fn assert_histogram_matches_exact(ds: &Dataset, cfg: &TrainConfig) {
    let ex = train_all(ds, cfg);
    let hist = train_all(
        ds,
        &TrainConfig {
            split_method: SplitMethod::Histogram,
            ..cfg.clone()
        },
    );
    assert_eq!(ex.to_json(), hist.to_json());
}

/// Exact-split training without early stopping.
pub fn exact(rounds: usize, depth: usize) -> TrainConfig {
    TrainConfig {
        n_rounds: rounds,
        max_depth: depth,
        early_stopping_rounds: 0,
        split_method: SplitMethod::Exact,
        ..Default::default()
    }
}

/// `per_cell` x `per_cell` square tiles inside every cell of the raster.
pub fn tile_grid(r: &CoarseRaster, per_cell: usize) -> CityGrid {
    let s = r.cell_size / per_cell as f64;
    let (nr, nc) = (r.nrows * per_cell, r.ncols * per_cell);
    let mut tiles = Vec::with_capacity(nr * nc);
    for row in 0..nr {
        for col in 0..nc {
            let x = r.xll + col as f64 * s;
            let y = r.yll + (nr - 1 - row) as f64 * s;
            tiles.push(Tile {
                id: TileId((row * nc + col) as u64),
                ring: vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)],
            });
        }
    }
    CityGrid::new("t", tiles).unwrap()
}

pub fn raster(nrows: usize, ncols: usize, f: impl Fn(f64, f64) -> f64) -> CoarseRaster {
    let mut r = CoarseRaster::new(
        3.0,
        40.0,
        0.5,
        nrows,
        ncols,
        vec![0.0; nrows * ncols],
        -9999.0,
    )
    .unwrap();
    for row in 0..nrows {
        for col in 0..ncols {
            let (x, y) = r.cell_center(row, col);
            r.values[row * ncols + col] = f(x, y);
        }
    }
    r
}

pub fn random_raster(seed: u64, nrows: usize, ncols: usize) -> CoarseRaster {
    let mut g = rng(seed);
    let mut r = raster(nrows, ncols, |_, _| 0.0);
    for v in &mut r.values {
        *v = g.random_range(0.0..5000.0);
    }
    r
}

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn meta(d: NaiveDate) -> TrafficFileMeta {
    TrafficFileMeta {
        city: "Testopolis".into(),
        service: "web".into(),
        date: d,
        direction: Direction::Download,
    }
}

pub fn ids(n: usize) -> Vec<TileId> {
    (0..n as u64).map(|i| TileId(1000 + i * 7)).collect()
}

/// Random quarter-hour volumes, integers and decimals mixed, scaled by `level`.
pub fn random_matrix(
    g: &mut rand_chacha::ChaCha8Rng,
    d: NaiveDate,
    n: usize,
    level: f64,
) -> TrafficMatrix {
    let values = (0..n * QUARTERS)
        .map(|_| {
            if g.random_bool(0.3) {
                g.random_range(0..50) as f64
            } else {
                g.random_range(0.0..100.0) * level
            }
        })
        .collect();
    TrafficMatrix::new(meta(d), ids(n), values).unwrap()
}

pub fn batch(m: &TrafficMatrix, dst: NaiveDate) -> SlotMatrix {
    let parsed = parse_traffic_file(m.to_text().as_bytes(), m.meta.clone()).unwrap();
    aggregate_to_slots(&apply_dst_correction(parsed, dst))
}

pub fn days_from(start: NaiveDate, n: u64) -> Vec<NaiveDate> {
    (0..n)
        .map(|k| start.checked_add_days(Days::new(k)).unwrap())
        .collect()
}
