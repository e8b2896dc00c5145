//! Path-dependent TreeSHAP attributions in z-space, with a subset-enumeration
//! Shapley oracle and dependence-series export.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gbtree::{Ensemble, Node, Tree};
use crate::grid_geo::TileId;

pub const MAX_BRUTE_FORCE_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix {
    pub feature_names: Vec<String>,
    pub tile_ids: Vec<TileId>,
    pub base_value: f64,
    /// rows x features, row-major
    pub phi: Vec<f64>,
}

impl ShapMatrix {
    pub fn n_rows(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.feature_names.len();
        &self.phi[i * c..(i + 1) * c]
    }

    /// `tile_id,base,phi_<col>...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile_id,base");
        for n in &self.feature_names {
            s.push_str(",phi_");
            s.push_str(n);
        }
        s.push('\n');
        for (i, id) in self.tile_ids.iter().enumerate() {
            write!(s, "{id},{}", self.base_value).unwrap();
            for v in self.row(i) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let d = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if d == 0 { 1.0 } else { 0.0 },
    });
    let dp1 = (d + 1) as f64;
    for i in (0..d).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / dp1;
        path[i].weight = zero * path[i].weight * (d - i) as f64 / dp1;
    }
}

fn unwind(path: &mut Vec<PathElem>, at: usize) {
    let d = path.len() - 1;
    let PathElem { one, zero, .. } = path[at];
    let dp1 = (d + 1) as f64;
    let mut next = path[d].weight;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * dp1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (d - i) as f64 / dp1;
        } else {
            path[i].weight = path[i].weight * dp1 / (zero * (d - i) as f64);
        }
    }
    for i in at..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

/// Total path weight with element `at` removed.
fn unwound_sum(path: &[PathElem], at: usize) -> f64 {
    let d = path.len() - 1;
    let PathElem { one, zero, .. } = path[at];
    let dp1 = (d + 1) as f64;
    let mut next = path[d].weight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = next * dp1 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i) as f64 / dp1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((d - i) as f64 / dp1);
        }
    }
    total
}

fn recurse(
    tree: &Tree,
    node: usize,
    row: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend(&mut path, zero, one, feature);
    match &tree.nodes[node] {
        Node::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                phi[e.feature.expect("only the root element lacks a feature")] +=
                    w * (e.one - e.zero) * weight;
            }
        }
        Node::Split {
            feature: f,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            let (hot, cold) = if row[*f] < *threshold {
                (*left, *right)
            } else {
                (*right, *left)
            };
            let hot_zero = tree.nodes[hot].cover() / cover;
            let cold_zero = tree.nodes[cold].cover() / cover;
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == Some(*f)) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind(&mut path, k);
            }
            recurse(
                tree,
                hot,
                row,
                phi,
                path.clone(),
                hot_zero * in_zero,
                in_one,
                Some(*f),
            );
            recurse(
                tree,
                cold,
                row,
                phi,
                path,
                cold_zero * in_zero,
                0.0,
                Some(*f),
            );
        }
    }
}

/// Unscaled attributions of one tree for one row; length `n_features`.
pub fn tree_shap_single(tree: &Tree, row: &[f64], n_features: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n_features];
    recurse(
        tree,
        0,
        row,
        &mut phi,
        Vec::with_capacity(16),
        1.0,
        1.0,
        None,
    );
    phi
}

fn check_covers(e: &Ensemble) -> Result<()> {
    for (t, tree) in e.trees.iter().enumerate() {
        if tree
            .nodes
            .iter()
            .any(|n| !(n.cover() > 0.0 && n.cover().is_finite()))
        {
            return Err(Error::Explain(format!(
                "tree {t} lacks positive cover counts"
            )));
        }
    }
    Ok(())
}

/// base_score + η·Σ cover-weighted tree means.
pub fn expected_value(e: &Ensemble) -> f64 {
    e.base_score + e.learning_rate * e.trees.iter().map(Tree::expected_value).sum::<f64>()
}

/// Attributions for the given matrix rows, in row order.
pub fn tree_shap(e: &Ensemble, fm: &FeatureMatrix, rows: &[usize]) -> Result<ShapMatrix> {
    check_covers(e)?;
    let nf = e.n_features();
    if fm.n_cols() != nf {
        return Err(Error::FeatureCount {
            expected: nf,
            got: fm.n_cols(),
        });
    }
    let per_row: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|&r| {
            let x = fm.row(r);
            let mut phi = vec![0.0; nf];
            for t in &e.trees {
                for (p, v) in phi.iter_mut().zip(tree_shap_single(t, x, nf)) {
                    *p += v;
                }
            }
            phi.iter_mut().for_each(|p| *p *= e.learning_rate);
            phi
        })
        .collect();
    Ok(ShapMatrix {
        feature_names: e.feature_names.clone(),
        tile_ids: rows.iter().map(|&r| fm.tile_ids[r]).collect(),
        base_value: expected_value(e),
        phi: per_row.concat(),
    })
}

/// Largest |base + Σφ − margin| over the explained rows.
pub fn local_accuracy_error(
    e: &Ensemble,
    sm: &ShapMatrix,
    fm: &FeatureMatrix,
    rows: &[usize],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        let m = e.predict_margin(fm.row(r))?;
        let s: f64 = sm.base_value + sm.row(i).iter().sum::<f64>();
        worst = worst.max((s - m).abs());
    }
    Ok(worst)
}

/// Expected tree output with features in `known` following `row` and the
/// rest averaged by cover.
fn conditional_expectation(tree: &Tree, node: usize, row: &[f64], known: &[bool]) -> f64 {
    match &tree.nodes[node] {
        Node::Leaf { weight, .. } => *weight,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            if known[*feature] {
                let next = if row[*feature] < *threshold {
                    *left
                } else {
                    *right
                };
                conditional_expectation(tree, next, row, known)
            } else {
                let (cl, cr) = (tree.nodes[*left].cover(), tree.nodes[*right].cover());
                (cl * conditional_expectation(tree, *left, row, known)
                    + cr * conditional_expectation(tree, *right, row, known))
                    / cover
            }
        }
    }
}

/// Exact Shapley values of one tree (unscaled) by enumerating every subset
/// of the features it splits on.
pub fn brute_force_shap(tree: &Tree, row: &[f64], n_features: usize) -> Result<Vec<f64>> {
    let mut used: Vec<usize> = tree
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
        .collect();
    used.sort_unstable();
    used.dedup();
    let k = used.len();
    if k > MAX_BRUTE_FORCE_FEATURES {
        return Err(Error::Explain(format!(
            "tree uses {k} features; enumeration is limited to {MAX_BRUTE_FORCE_FEATURES}"
        )));
    }
    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut values = vec![0.0; 1 << k];
    let mut known = vec![false; n_features];
    for (mask, v) in values.iter_mut().enumerate() {
        for (j, &f) in used.iter().enumerate() {
            known[f] = mask >> j & 1 == 1;
        }
        *v = conditional_expectation(tree, 0, row, &known);
    }
    let mut phi = vec![0.0; n_features];
    for (j, &f) in used.iter().enumerate() {
        let bit = 1usize << j;
        for mask in 0..1usize << k {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[k - s - 1] / fact[k];
            phi[f] += w * (values[mask | bit] - values[mask]);
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceSeries {
    pub feature: String,
    /// (tile, feature value, phi), ascending by feature value
    pub points: Vec<(TileId, f64, f64)>,
}

impl DependenceSeries {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile_id,feature_value,phi\n");
        for (id, x, p) in &self.points {
            writeln!(s, "{id},{x},{p}").unwrap();
        }
        s
    }
}

pub fn dependence_series(
    sm: &ShapMatrix,
    fm: &FeatureMatrix,
    feature: &str,
) -> Result<DependenceSeries> {
    let unknown = || Error::Explain(format!("unknown feature {feature:?}"));
    let sc = sm
        .feature_names
        .iter()
        .position(|n| n == feature)
        .ok_or_else(unknown)?;
    let fc = fm.column_index(feature).ok_or_else(unknown)?;
    let rows: HashMap<TileId, usize> = fm
        .tile_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut points = Vec::with_capacity(sm.n_rows());
    for (i, id) in sm.tile_ids.iter().enumerate() {
        let r = *rows
            .get(id)
            .ok_or_else(|| Error::Explain(format!("tile {id} not in feature matrix")))?;
        points.push((*id, fm.get(r, fc), sm.row(i)[sc]));
    }
    points.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(DependenceSeries {
        feature: feature.to_string(),
        points,
    })
}
