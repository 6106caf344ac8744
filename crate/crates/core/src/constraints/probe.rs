use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use nalgebra::{DMatrix, DVector};

use crate::linalg::{least_squares, linspace, median};

use super::ConstraintError;

/// Summary of the training data used to instantiate probe grids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataStats {
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub medians: BTreeMap<String, f64>,
    /// Largest absolute training target; scale for relative tolerances.
    pub target_max_abs: f64,
    /// Noise standard deviation in target units, used by statistical mode.
    pub noise_sigma: f64,
    /// Stable equilibrium of a one-variable rate law, when the data shows one.
    pub equilibrium: Option<f64>,
}

impl DataStats {
    pub fn from_dataset(d: &Dataset) -> DataStats {
        let train = d.view(Split::Train);
        let mut stats = DataStats {
            target_max_abs: train.target.iter().fold(0.0, |m, y| f64::max(m, y.abs())),
            noise_sigma: 0.0,
            ..DataStats::default()
        };
        for (name, col) in train.names.iter().zip(&train.columns) {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi.is_finite() {
                stats.ranges.insert(name.clone(), (lo, hi));
                stats.medians.insert(name.clone(), median(col));
            }
        }
        if train.columns.len() == 1 {
            stats.equilibrium = stable_crossing(&train.columns[0], &train.target);
        }
        stats
    }

    /// Stats for statistical mode: the noise level is estimated from the
    /// data and the equilibrium comes from an inverse fit that tolerates
    /// noisy inputs.
    pub fn statistical(d: &Dataset) -> DataStats {
        let mut stats = DataStats::from_dataset(d).with_noise(estimate_noise(d));
        let train = d.view(Split::Train);
        if let (1, Some(split)) = (train.columns.len(), stats.equilibrium) {
            stats.equilibrium = inverse_crossing(&train.columns[0], &train.target, split).or(Some(split));
        }
        stats
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub(crate) fn range(&self, var: &str) -> Result<(f64, f64), ConstraintError> {
        self.ranges.get(var).copied().ok_or_else(|| ConstraintError::MissingStat(format!("range of `{var}`")))
    }

    pub(crate) fn median(&self, var: &str) -> Result<f64, ConstraintError> {
        self.medians.get(var).copied().ok_or_else(|| ConstraintError::MissingStat(format!("median of `{var}`")))
    }

    pub(crate) fn equilibrium(&self) -> Result<f64, ConstraintError> {
        self.equilibrium.ok_or_else(|| ConstraintError::MissingStat("equilibrium".into()))
    }
}

/// Stable `+ -> -` crossing of `y` against `x > 0`: the split point that
/// agrees with the most observed signs, interpolated between the bracketing
/// samples. Jitter in `x` moves it far less than the first sign change.
fn stable_crossing(x: &[f64], y: &[f64]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    if idx.len() < 2 {
        return None;
    }
    // score(k) = positives before k + non-positives from k on
    let mut score: i64 = idx.iter().filter(|&&i| y[i] <= 0.0).count() as i64;
    let mut best: Option<(i64, usize)> = None;
    for k in 1..idx.len() {
        score += if y[idx[k - 1]] > 0.0 { 1 } else { -1 };
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, k));
        }
    }
    let (_, k) = best?;
    let (below, above) = (&idx[..k], &idx[k..]);
    if !below.iter().any(|&i| y[i] > 0.0) || !above.iter().any(|&i| y[i] <= 0.0) {
        return None;
    }
    let (i0, i1) = (idx[k - 1], idx[k]);
    let (x0, y0, x1, y1) = (x[i0], y[i0], x[i1], y[i1]);
    Some(if y0 > 0.0 && y1 <= 0.0 && y0 != y1 { x0 + (x1 - x0) * y0 / (y0 - y1) } else { 0.5 * (x0 + x1) })
}

/// Root of `y(x)` near `guess`, from a quadratic least-squares fit of `x`
/// on `y` over a window of 15% of the positive range. Unbiased when the noise
/// sits on `x` and `y` is exact.
fn inverse_crossing(x: &[f64], y: &[f64], guess: f64) -> Option<f64> {
    let pos: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let hi = pos.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let half = 0.15 * hi;
    let win: Vec<usize> = pos.into_iter().filter(|&i| (x[i] - guess).abs() <= half).collect();
    if win.len() < 3 || !win.iter().any(|&i| y[i] > 0.0) || !win.iter().any(|&i| y[i] < 0.0) {
        return None;
    }
    let design = DMatrix::from_fn(win.len(), 3, |r, c| y[win[r]].powi(c as i32));
    let rhs = DVector::from_iterator(win.len(), win.iter().map(|&i| x[i]));
    let (coef, _) = least_squares(&design, &rhs)?;
    let root = coef[0];
    (root.is_finite() && (root - guess).abs() <= half).then_some(root)
}

/// Target-unit noise level from nearest-neighbour differences in
/// standardized input space: `median |y_i - y_nn(i)| / (0.6745 * sqrt 2)`.
pub fn estimate_noise(d: &Dataset) -> f64 {
    let train = d.view(Split::Train);
    let n = train.len();
    if n < 2 {
        return 0.0;
    }
    let cols: Vec<Vec<f64>> = train
        .columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            c.iter().map(|v| (v - m) / sd).collect()
        })
        .collect();
    let diffs: Vec<f64> = (0..n)
        .map(|i| {
            let nn = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da: f64 = cols.iter().map(|c| (c[a] - c[i]).powi(2)).sum();
                    let db: f64 = cols.iter().map(|c| (c[b] - c[i]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("n >= 2");
            (train.target[i] - train.target[nn]).abs()
        })
        .collect();
    median(&diffs) / (0.6745 * std::f64::consts::SQRT_2)
}

/// Values taken by one variable in a probe grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum Axis {
    Fixed {
        value: f64,
    },
    /// Training median of the variable.
    Median,
    /// Evenly spaced points over a fraction of the training range; `from`
    /// and `to` are positions relative to `[min, max]` and may exceed it.
    Train {
        #[serde(default)]
        from: f64,
        #[serde(default = "one")]
        to: f64,
        points: usize,
    },
    Range {
        lo: f64,
        hi: f64,
        points: usize,
    },
    Values {
        values: Vec<f64>,
    },
    /// The equilibrium from [`DataStats`].
    Equilibrium,
}

fn one() -> f64 {
    1.0
}

impl Axis {
    pub fn train(points: usize) -> Axis {
        Axis::Train { from: 0.0, to: 1.0, points }
    }

    fn values(&self, var: &str, stats: &DataStats) -> Result<Vec<f64>, ConstraintError> {
        let v = match self {
            Axis::Fixed { value } => vec![*value],
            Axis::Median => vec![stats.median(var)?],
            Axis::Train { from, to, points } => {
                let (lo, hi) = stats.range(var)?;
                let span = hi - lo;
                linspace(lo + from * span, lo + to * span, *points)
            }
            Axis::Range { lo, hi, points } => linspace(*lo, *hi, *points),
            Axis::Values { values } => values.clone(),
            Axis::Equilibrium => vec![stats.equilibrium()?],
        };
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(ConstraintError::InvalidProbe(format!("axis for `{var}` is empty or non-finite")));
        }
        Ok(v)
    }
}

/// Cross product of per-variable axes. Variables without an axis sit at
/// their training median.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Grid {
    pub axes: BTreeMap<String, Axis>,
}

impl Grid {
    pub fn new() -> Self {
        Grid::default()
    }

    pub fn with(mut self, var: &str, axis: Axis) -> Self {
        self.axes.insert(var.to_string(), axis);
        self
    }
}

/// Instantiated probe points, one column per system variable.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Points {
    pub columns: Vec<Vec<f64>>,
    /// Length of contiguous runs along the innermost variable.
    pub line: usize,
}

impl Points {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }
}

const MAX_POINTS: usize = 1 << 20;

/// Expands `grid` over `vars`. When `inner` is given, that variable varies
/// fastest so consecutive runs of `line` points form 1-D slices along it.
pub(crate) fn instantiate(
    grid: &Grid,
    vars: &[String],
    stats: &DataStats,
    inner: Option<&str>,
) -> Result<Points, ConstraintError> {
    for name in grid.axes.keys() {
        if !vars.iter().any(|v| v == name) {
            return Err(ConstraintError::InvalidProbe(format!("unknown variable `{name}`")));
        }
    }
    let mut per_var = Vec::with_capacity(vars.len());
    for v in vars {
        let vals = match grid.axes.get(v) {
            Some(a) => a.values(v, stats)?,
            None => Axis::Median.values(v, stats)?,
        };
        per_var.push(vals);
    }
    // iteration order: outer variables first, `inner` last
    let mut order: Vec<usize> = (0..vars.len()).filter(|&i| Some(vars[i].as_str()) != inner).collect();
    let inner_idx = inner.and_then(|n| vars.iter().position(|v| v == n));
    if let Some(i) = inner_idx {
        order.push(i);
    } else if let Some(n) = inner {
        return Err(ConstraintError::InvalidProbe(format!("unknown variable `{n}`")));
    }
    let total = per_var.iter().try_fold(1usize, |acc, v| acc.checked_mul(v.len()));
    let total = match total {
        Some(t) if t <= MAX_POINTS => t,
        _ => return Err(ConstraintError::InvalidProbe("probe grid too large".into())),
    };
    let mut columns = vec![Vec::with_capacity(total); vars.len()];
    let mut counter = vec![0usize; order.len()];
    for _ in 0..total {
        for (slot, &vi) in order.iter().enumerate() {
            columns[vi].push(per_var[vi][counter[slot]]);
        }
        for slot in (0..order.len()).rev() {
            counter[slot] += 1;
            if counter[slot] < per_var[order[slot]].len() {
                break;
            }
            counter[slot] = 0;
        }
    }
    let line = inner_idx.map_or(1, |i| per_var[i].len());
    Ok(Points { columns, line })
}
