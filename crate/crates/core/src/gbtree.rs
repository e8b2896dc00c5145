//! Second-order gradient-boosted regression trees on z = ln(1 + P).
//!
//! The objective is squared error in z-space, so every row has hessian 1
//! and node hessian sums are row counts. Exact mode is histogram mode with
//! one bin per distinct training value; both place thresholds at midpoints
//! between adjacent values and send a row left when `x < threshold`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, Split};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Exact,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_depth: usize,
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub n_bins: usize,
    /// 0 disables early stopping
    pub early_stopping_rounds: usize,
    pub split_method: SplitMethod,
    /// Reserved; training has no random component.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            n_rounds: 400,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            n_bins: 256,
            early_stopping_rounds: 30,
            split_method: SplitMethod::Histogram,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.n_rounds == 0 {
            return bad("n_rounds must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0 && self.min_child_weight >= 0.0) {
            return bad("lambda, gamma and min_child_weight must be non-negative");
        }
        if self.n_bins < 2 || self.n_bins > u32::MAX as usize {
            return bad("n_bins must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        default_left: bool,
        gain: f64,
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Nodes in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { weight, cover }],
        }
    }

    /// Raw (unshrunk) output for one row.
    pub fn eval(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight, .. } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    /// Cover-weighted mean leaf weight.
    pub fn expected_value(&self) -> f64 {
        fn rec(t: &Tree, i: usize) -> f64 {
            match &t.nodes[i] {
                Node::Leaf { weight, .. } => *weight,
                Node::Split { left, right, .. } => {
                    let (cl, cr) = (t.nodes[*left].cover(), t.nodes[*right].cover());
                    (cl * rec(t, *left) + cr * rec(t, *right)) / (cl + cr)
                }
            }
        }
        rec(self, 0)
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + rec(t, *left).max(rec(t, *right)),
            }
        }
        rec(self, 0)
    }

    /// Checks child links, preorder layout, finite thresholds and covers.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("malformed tree: {m}")));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } = n
            {
                if *feature >= n_features {
                    return bad(format!("node {i} uses feature {feature} of {n_features}"));
                }
                if !threshold.is_finite() {
                    return bad(format!("node {i} threshold is not finite"));
                }
                if *left != i + 1 || *right <= *left || *right >= self.nodes.len() {
                    return bad(format!("node {i} has bad children"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format_version: u32,
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// z-space output: base_score + η·Σ trees.
    pub fn predict_margin(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.n_features() {
            return Err(Error::FeatureCount {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        Ok(self.margin_unchecked(row))
    }

    fn margin_unchecked(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.eval(row)).sum();
        self.base_score + self.learning_rate * s
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        self.predict_margin(row).map(inverse_z)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Ensemble = serde_json::from_str(text)?;
        if e.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "ensemble format version {} (expected {FORMAT_VERSION})",
                e.format_version
            )));
        }
        for t in &e.trees {
            t.validate(e.n_features())?;
        }
        Ok(e)
    }

    /// First `n` trees.
    pub fn truncated(&self, n: usize) -> Self {
        let mut e = self.clone();
        e.trees.truncate(n);
        e
    }
}

pub fn to_z(p: f64) -> f64 {
    p.ln_1p()
}

pub fn inverse_z(z: f64) -> f64 {
    z.exp_m1().max(0.0)
}

pub fn rmsle(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "rmsle on {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid("rmsle needs non-negative inputs".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p.ln_1p() - t.ln_1p()).powi(2))
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_rmsle: f64,
    pub test_rmsle: f64,
    pub validation_rmsle: f64,
    /// Number of trees kept.
    pub best_round: usize,
    pub rounds_run: usize,
    /// Entry 0 is the base score alone.
    pub curve: Vec<RoundMetrics>,
}

/// Per-feature bin edges learned from the training rows.
#[derive(Debug, Clone)]
struct Binned {
    cuts: Vec<Vec<f64>>,
    /// Column-major: bins[f][local row]
    bins: Vec<Vec<u32>>,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m > a && m <= b {
        m
    } else {
        b
    }
}

/// Thresholds for one feature. With at most `n_bins` distinct values every
/// gap gets a cut; otherwise cuts follow cumulative row-count quantiles.
fn feature_cuts(values: &mut [f64], n_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for &v in values.iter() {
        match distinct.last_mut() {
            Some((d, c)) if *d == v => *c += 1,
            _ => distinct.push((v, 1)),
        }
    }
    if distinct.len() <= n_bins {
        return distinct
            .windows(2)
            .map(|w| midpoint(w[0].0, w[1].0))
            .collect();
    }
    let n = values.len() as f64;
    let mut cuts = Vec::with_capacity(n_bins - 1);
    let mut cum = 0usize;
    let mut next = 1;
    for w in distinct.windows(2) {
        cum += w[0].1;
        if next < n_bins && cum as f64 >= next as f64 * n / n_bins as f64 {
            cuts.push(midpoint(w[0].0, w[1].0));
            while next < n_bins && cum as f64 >= next as f64 * n / n_bins as f64 {
                next += 1;
            }
        }
    }
    cuts
}

fn bin_of(cuts: &[f64], x: f64) -> u32 {
    cuts.partition_point(|&c| c <= x) as u32
}

fn bin_features(ds: &Dataset, rows: &[usize], cfg: &TrainConfig) -> Binned {
    let fm = &ds.features;
    let n_bins = match cfg.split_method {
        SplitMethod::Exact => usize::MAX,
        SplitMethod::Histogram => cfg.n_bins,
    };
    let (cuts, bins) = (0..fm.n_cols())
        .into_par_iter()
        .map(|f| {
            let mut vals: Vec<f64> = rows.iter().map(|&r| fm.get(r, f)).collect();
            let cuts = feature_cuts(&mut vals, n_bins);
            let bins = rows.iter().map(|&r| bin_of(&cuts, fm.get(r, f))).collect();
            (cuts, bins)
        })
        .unzip();
    Binned { cuts, bins }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    bin: u32,
    gain: f64,
}

struct Builder<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    cfg: &'a TrainConfig,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

impl Builder<'_> {
    fn best_for_feature(&self, f: usize, rows: &[u32], g_tot: f64) -> Option<Candidate> {
        let cuts = &self.binned.cuts[f];
        if cuts.is_empty() {
            return None;
        }
        let bins = &self.binned.bins[f];
        let n = rows.len();
        let lambda = self.cfg.lambda;
        let h_tot = n as f64;
        let parent = score(g_tot, h_tot, lambda);

        // (bin, G, count) for non-empty bins, ascending; sums follow row order
        let mut hist: Vec<(u32, f64, u32)> = Vec::new();
        if n * 4 < cuts.len() + 1 {
            let mut pairs: Vec<(u32, u32)> = rows
                .iter()
                .enumerate()
                .map(|(k, &r)| (bins[r as usize], k as u32))
                .collect();
            pairs.sort_unstable();
            for (b, k) in pairs {
                let g = self.grad[rows[k as usize] as usize];
                match hist.last_mut() {
                    Some((lb, lg, lc)) if *lb == b => {
                        *lg += g;
                        *lc += 1;
                    }
                    _ => hist.push((b, g, 1)),
                }
            }
        } else {
            let nb = cuts.len() + 1;
            let mut gs = vec![0.0; nb];
            let mut cs = vec![0u32; nb];
            for &r in rows {
                let b = bins[r as usize] as usize;
                gs[b] += self.grad[r as usize];
                cs[b] += 1;
            }
            hist.extend(
                (0..nb)
                    .filter(|&b| cs[b] > 0)
                    .map(|b| (b as u32, gs[b], cs[b])),
            );
        }

        let mut best: Option<Candidate> = None;
        let (mut gl, mut cl) = (0.0, 0u32);
        for &(b, g, c) in &hist[..hist.len().saturating_sub(1)] {
            gl += g;
            cl += c;
            let hl = cl as f64;
            let hr = h_tot - hl;
            if hl < self.cfg.min_child_weight || hr < self.cfg.min_child_weight {
                continue;
            }
            let gr = g_tot - gl;
            let gain =
                0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - parent) - self.cfg.gamma;
            if gain > 0.0 && best.is_none_or(|bc| gain > bc.gain) {
                best = Some(Candidate {
                    feature: f,
                    bin: b,
                    gain,
                });
            }
        }
        best
    }

    fn best_split(&self, rows: &[u32], g_tot: f64) -> Option<Candidate> {
        let nf = self.binned.cuts.len();
        let per_feature: Vec<Option<Candidate>> = if rows.len() * nf > 1 << 16 {
            (0..nf)
                .into_par_iter()
                .map(|f| self.best_for_feature(f, rows, g_tot))
                .collect()
        } else {
            (0..nf)
                .map(|f| self.best_for_feature(f, rows, g_tot))
                .collect()
        };
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        best
    }

    fn build(&self, rows: &[u32], depth: usize, nodes: &mut Vec<Node>) {
        let g_tot: f64 = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let cover = rows.len() as f64;
        let split = if depth < self.cfg.max_depth && rows.len() >= 2 {
            self.best_split(rows, g_tot)
        } else {
            None
        };
        let Some(c) = split else {
            nodes.push(Node::Leaf {
                weight: -g_tot / (cover + self.cfg.lambda),
                cover,
            });
            return;
        };
        let bins = &self.binned.bins[c.feature];
        let (left, right): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| bins[r as usize] <= c.bin);
        let at = nodes.len();
        nodes.push(Node::Leaf { weight: 0.0, cover });
        self.build(&left, depth + 1, nodes);
        let right_at = nodes.len();
        self.build(&right, depth + 1, nodes);
        nodes[at] = Node::Split {
            feature: c.feature,
            threshold: self.binned.cuts[c.feature][c.bin as usize],
            left: at + 1,
            right: right_at,
            default_left: true,
            gain: c.gain,
            cover,
        };
    }
}

/// Fits one tree to the gradients of the given local rows.
fn fit_tree(binned: &Binned, grad: &[f64], cfg: &TrainConfig) -> Tree {
    let builder = Builder { binned, grad, cfg };
    let rows: Vec<u32> = (0..grad.len() as u32).collect();
    let mut nodes = Vec::new();
    builder.build(&rows, 0, &mut nodes);
    Tree { nodes }
}

fn split_rmsle(margins: &[f64], z: &[f64]) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    // ln(1 + inverse_z(m)) = max(m, 0)
    let s: f64 = margins
        .iter()
        .zip(z)
        .map(|(m, t)| (m.max(0.0) - t).powi(2))
        .sum();
    (s / margins.len() as f64).sqrt()
}

pub fn train(ds: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<(Ensemble, EvalReport)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let n = ds.n_rows();
    if ds.target.len() != n {
        return Err(Error::Training(
            "target length differs from feature rows".into(),
        ));
    }
    if let Some(i) = split
        .train
        .iter()
        .chain(&split.test)
        .chain(&split.validation)
        .find(|&&i| i >= n)
    {
        return Err(Error::Training(format!("split references row {i} of {n}")));
    }
    if let Some(t) = ds.target.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::Training(format!(
            "target {t} is not a finite non-negative number"
        )));
    }
    if ds.features.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite feature value".into()));
    }

    let fm = &ds.features;
    let z: Vec<f64> = ds.target.iter().map(|&p| to_z(p)).collect();
    let z_of = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&r| z[r]).collect() };
    let (z_train, z_test) = (z_of(&split.train), z_of(&split.test));
    let base_score = z_train.iter().sum::<f64>() / z_train.len() as f64;
    let eta = cfg.learning_rate;

    let binned = bin_features(ds, &split.train, cfg);
    let mut m_train = vec![base_score; split.train.len()];
    let mut m_test = vec![base_score; split.test.len()];
    let mut trees = Vec::new();
    let mut curve = vec![RoundMetrics {
        round: 0,
        train: split_rmsle(&m_train, &z_train),
        test: split_rmsle(&m_test, &z_test),
    }];
    let mut best = (curve[0].test, 0usize);
    let stopping = cfg.early_stopping_rounds > 0 && !split.test.is_empty();

    for round in 1..=cfg.n_rounds {
        let grad: Vec<f64> = m_train.iter().zip(&z_train).map(|(m, t)| m - t).collect();
        let tree = fit_tree(&binned, &grad, cfg);
        for (m, &r) in m_train.iter_mut().zip(&split.train) {
            *m += eta * tree.eval(fm.row(r));
        }
        for (m, &r) in m_test.iter_mut().zip(&split.test) {
            *m += eta * tree.eval(fm.row(r));
        }
        trees.push(tree);
        let rm = RoundMetrics {
            round,
            train: split_rmsle(&m_train, &z_train),
            test: split_rmsle(&m_test, &z_test),
        };
        curve.push(rm);
        if rm.test < best.0 {
            best = (rm.test, round);
        }
        if stopping && round - best.1 >= cfg.early_stopping_rounds {
            break;
        }
    }

    let rounds_run = trees.len();
    let keep = if stopping { best.1 } else { rounds_run };
    trees.truncate(keep);
    let ensemble = Ensemble {
        format_version: FORMAT_VERSION,
        base_score,
        learning_rate: eta,
        feature_names: fm.column_names(),
        trees,
    };
    let eval = |rows: &[usize]| -> f64 {
        let m: Vec<f64> = rows
            .iter()
            .map(|&r| ensemble.margin_unchecked(fm.row(r)))
            .collect();
        split_rmsle(&m, &z_of(rows))
    };
    let report = EvalReport {
        train_rmsle: eval(&split.train),
        test_rmsle: eval(&split.test),
        validation_rmsle: eval(&split.validation),
        best_round: keep,
        rounds_run,
        curve,
    };
    Ok((ensemble, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGain {
    pub feature: usize,
    pub name: String,
    pub gain: f64,
    /// Share of total gain held by this and all higher-ranked features.
    pub cumulative_share: f64,
}

/// Total split gain per used feature, highest first (ties by feature index).
pub fn gain_importance(e: &Ensemble) -> Vec<FeatureGain> {
    let mut totals = vec![0.0; e.n_features()];
    let mut used = vec![false; e.n_features()];
    for t in &e.trees {
        for n in &t.nodes {
            if let Node::Split { feature, gain, .. } = n {
                totals[*feature] += gain;
                used[*feature] = true;
            }
        }
    }
    let mut order: Vec<usize> = (0..totals.len()).filter(|&f| used[f]).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&f| totals[f]).sum();
    let mut cum = 0.0;
    let n = order.len();
    order
        .into_iter()
        .enumerate()
        .map(|(k, f)| {
            cum += totals[f];
            FeatureGain {
                feature: f,
                name: e.feature_names[f].clone(),
                gain: totals[f],
                cumulative_share: if k + 1 == n { 1.0 } else { cum / total },
            }
        })
        .collect()
}

/// Cumulative gain share of the top `k` features.
pub fn top_k_share(importance: &[FeatureGain], k: usize) -> f64 {
    match k.min(importance.len()) {
        0 => 0.0,
        k => importance[k - 1].cumulative_share,
    }
}
