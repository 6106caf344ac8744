use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::expr::{parse, Expression, Program, MAX_PARAMS};
use crate::linalg::linspace;

use super::{
    csvio::read_table, find_root, integrate_ode, integrate_scalar, DataError, Dataset, Provenance, Schema, Split,
    SystemId, Variable,
};

const NO_PARAMS: [f64; MAX_PARAMS] = [0.0; MAX_PARAMS];

/// Growth-model coefficients for the E. coli system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcoliParams {
    pub mu_max: f64,
    pub ks: f64,
    pub k: f64,
    pub x0: f64,
    pub c: f64,
    pub x_decay: f64,
    pub ph_opt: f64,
    pub ph_min: f64,
    pub ph_max: f64,
}

impl Default for EcoliParams {
    fn default() -> Self {
        EcoliParams {
            mu_max: 0.8,
            ks: 0.5,
            k: 0.5,
            x0: 30.0,
            c: 1e-3,
            x_decay: 37.0,
            ph_opt: 7.0,
            ph_min: 4.0,
            ph_max: 10.0,
        }
    }
}

impl EcoliParams {
    pub fn expression(&self) -> Expression {
        let p = self;
        let src = format!(
            "{mu}*B*(S/({ks} + S))*tanh({k}*(T - {x0}))/(1 + {c}*(T - {xd})^4)\
             *exp(-abs(pH - {opt}))*sin((pH - {lo})*pi/{span})^2",
            mu = p.mu_max,
            ks = p.ks,
            k = p.k,
            x0 = p.x0,
            c = p.c,
            xd = p.x_decay,
            opt = p.ph_opt,
            lo = p.ph_min,
            span = p.ph_max - p.ph_min,
        );
        parse(&src).expect("generated growth expression parses")
    }
}

/// How rows are produced for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Full factorial grid in the training box plus an outer shell for OOD.
    Ecoli {
        params: EcoliParams,
        b: (f64, f64, usize),
        s: (f64, f64, usize),
        t: (f64, f64, usize),
        ph: (f64, f64, usize),
        ood_b: Vec<f64>,
        ood_s: Vec<f64>,
        ood_t: Vec<f64>,
        ood_ph: Vec<f64>,
    },
    /// Concentration trajectories plus a uniform grid, with OOD above `grid.1`.
    Crk {
        starts: Vec<f64>,
        t_end: f64,
        dt: f64,
        grid: (f64, f64, usize),
        ood: (f64, f64, usize),
    },
    /// One RK4 trajectory; samples before `ood_before` are held out.
    Oscillator {
        x0: f64,
        v0: f64,
        t_end: f64,
        dt: f64,
        ood_before: f64,
        id_stride: usize,
    },
    StressCsv {
        path: PathBuf,
        ood_temperature: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: SystemId,
    pub variables: Vec<Variable>,
    pub target: Variable,
    /// Known generating equation, absent for measured data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Expression>,
    pub sampling: Sampling,
}

const ID_STRIDE: usize = 5;

fn stride_split(k: usize, stride: usize) -> Split {
    if stride > 0 && k % stride == stride - 1 {
        Split::IdVal
    } else {
        Split::Train
    }
}

impl SystemSpec {
    /// Default configuration. The stress system reads `stress.csv` from the
    /// working directory unless the path is changed.
    pub fn default_for(id: SystemId) -> SystemSpec {
        match id {
            SystemId::Ecoli => {
                let params = EcoliParams::default();
                SystemSpec {
                    id,
                    variables: vec![
                        Variable::new("B", "population density", "OD600"),
                        Variable::new("S", "substrate concentration", "g/L"),
                        Variable::new("T", "temperature", "degC"),
                        Variable::new("pH", "acidity", ""),
                    ],
                    target: Variable::new("dB_dt", "population growth rate", "OD600/h"),
                    ground_truth: Some(params.expression()),
                    sampling: Sampling::Ecoli {
                        params,
                        b: (0.0, 2.0, 6),
                        s: (0.0, 4.0, 6),
                        t: (30.0, 45.0, 7),
                        ph: (4.5, 9.5, 6),
                        ood_b: vec![0.5, 1.5, 2.5],
                        ood_s: vec![1.0, 3.0, 5.0],
                        ood_t: vec![26.0, 28.0, 37.0, 47.0, 49.0],
                        ood_ph: vec![4.0, 7.0, 10.0],
                    },
                }
            }
            SystemId::Crk => SystemSpec {
                id,
                variables: vec![Variable::new("A", "species concentration", "mol/L")],
                target: Variable::new("dA_dt", "rate of change of concentration", "mol/(L s)"),
                ground_truth: Some(parse("-0.1899*A^2 + 0.4598*A^2/(0.7498*A^4 + 1)").expect("valid")),
                sampling: Sampling::Crk {
                    starts: vec![0.2, 2.0],
                    t_end: 50.0,
                    dt: 0.1,
                    grid: (0.0, 2.0, 201),
                    ood: (2.05, 3.0, 50),
                },
            },
            SystemId::Osc1 | SystemId::Osc2 => SystemSpec {
                id,
                variables: vec![
                    Variable::new("t", "time", "s"),
                    Variable::new("x", "position", "m"),
                    Variable::new("v", "velocity", "m/s"),
                ],
                target: Variable::new("a", "acceleration", "m/s^2"),
                ground_truth: Some(
                    parse(if id == SystemId::Osc1 {
                        "0.8*sin(x) - 0.5*v^3 - 0.2*x^3 - 0.5*x*v - x*cos(x)"
                    } else {
                        "0.3*sin(t) - 0.5*v^3 - x*v - 5.0*x*exp(0.5*x)"
                    })
                    .expect("valid"),
                ),
                sampling: Sampling::Oscillator {
                    x0: 0.5,
                    v0: 0.5,
                    t_end: 50.0,
                    dt: 0.02,
                    ood_before: 20.0,
                    id_stride: ID_STRIDE,
                },
            },
            SystemId::StressCsv => SystemSpec {
                id,
                variables: stress_schema().variables,
                target: stress_schema().target,
                ground_truth: None,
                sampling: Sampling::StressCsv { path: PathBuf::from("stress.csv"), ood_temperature: 200.0 },
            },
        }
    }

    pub fn schema(&self) -> Schema {
        Schema { variables: self.variables.clone(), target: self.target.clone() }
    }
}

fn stress_schema() -> Schema {
    Schema {
        variables: vec![Variable::new("eps", "strain", ""), Variable::new("T", "temperature", "degC")],
        target: Variable::new("sigma", "stress", "MPa"),
    }
}

fn grid(spec: (f64, f64, usize), what: &str) -> Result<Vec<f64>, DataError> {
    let (lo, hi, n) = spec;
    if n == 0 || !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(DataError::InvalidGrid(format!("{what}: ({lo}, {hi}, {n})")));
    }
    Ok(linspace(lo, hi, n))
}

struct Rows {
    cols: Vec<Vec<f64>>,
    split: Vec<Split>,
}

impl Rows {
    fn new(nvars: usize) -> Self {
        Rows { cols: vec![Vec::new(); nvars], split: Vec::new() }
    }

    fn push(&mut self, point: &[f64], split: Split) {
        for (c, v) in self.cols.iter_mut().zip(point) {
            c.push(*v);
        }
        self.split.push(split);
    }
}

fn label(spec: &SystemSpec, rows: Rows) -> Result<Dataset, DataError> {
    let gt =
        spec.ground_truth.as_ref().ok_or_else(|| DataError::Shape("synthetic system without a ground truth".into()))?;
    let names: Vec<&str> = spec.variables.iter().map(|v| v.name.as_str()).collect();
    let prog = Program::compile(gt, &names).map_err(|source| DataError::Integration { step: 0, source })?;
    let n = rows.split.len();
    let mut y = Vec::with_capacity(n);
    let mut point = vec![0.0; names.len()];
    let mut stack = Vec::new();
    for i in 0..n {
        for (p, c) in point.iter_mut().zip(&rows.cols) {
            *p = c[i];
        }
        y.push(prog.eval_point_with(&point, &NO_PARAMS, &mut stack));
    }
    Dataset::new(
        spec.variables.clone(),
        spec.target.clone(),
        rows.cols,
        y,
        rows.split,
        Provenance {
            system: Some(spec.id),
            config: serde_json::to_string(&spec.sampling).unwrap_or_default(),
            noise: None,
            fraction: None,
        },
    )
}

/// Stable positive equilibrium of the CRK rate law, found by bisection on
/// the first `+ -> -` sign change above zero.
pub fn crk_equilibrium(rhs: &Expression) -> Option<f64> {
    let prog = Program::compile(rhs, &["A"]).ok()?;
    let f = |a: f64| prog.eval_point(&[a], &NO_PARAMS);
    let xs = linspace(1e-3, 10.0, 10_000);
    xs.windows(2).find(|w| f(w[0]) > 0.0 && f(w[1]) <= 0.0).and_then(|w| find_root(f, w[0], w[1], 1e-15))
}

/// Builds the dataset described by `spec`.
pub fn make_dataset(spec: &SystemSpec) -> Result<Dataset, DataError> {
    match &spec.sampling {
        Sampling::Ecoli { b, s, t, ph, ood_b, ood_s, ood_t, ood_ph, .. } => {
            let axes = [grid(*b, "B")?, grid(*s, "S")?, grid(*t, "T")?, grid(*ph, "pH")?];
            let mut rows = Rows::new(4);
            let mut k = 0;
            for &bv in &axes[0] {
                for &sv in &axes[1] {
                    for &tv in &axes[2] {
                        for &pv in &axes[3] {
                            rows.push(&[bv, sv, tv, pv], stride_split(k, ID_STRIDE));
                            k += 1;
                        }
                    }
                }
            }
            let inside = |v: f64, r: (f64, f64, usize)| v >= r.0 && v <= r.1;
            for &bv in ood_b {
                for &sv in ood_s {
                    for &tv in ood_t {
                        for &pv in ood_ph {
                            let in_box = inside(bv, *b) && inside(sv, *s) && inside(tv, *t) && inside(pv, *ph);
                            if !in_box {
                                rows.push(&[bv, sv, tv, pv], Split::OodVal);
                            }
                        }
                    }
                }
            }
            label(spec, rows)
        }
        Sampling::Crk { starts, t_end, dt, grid: g, ood } => {
            let gt = spec.ground_truth.as_ref().ok_or_else(|| DataError::Shape("CRK needs a rate law".into()))?;
            let mut in_range = Vec::new();
            if let Some(eq) = crk_equilibrium(gt) {
                in_range.push(eq);
            }
            in_range.extend(grid(*g, "A")?);
            for &a0 in starts {
                let tr = integrate_scalar(gt, "A", &NO_PARAMS, a0, (0.0, *t_end), *dt)?;
                in_range.extend(tr.into_iter().map(|(_, a)| a));
            }
            let mut rows = Rows::new(1);
            for (k, a) in in_range.into_iter().enumerate() {
                rows.push(&[a], stride_split(k, ID_STRIDE));
            }
            for a in grid(*ood, "A (ood)")? {
                rows.push(&[a], Split::OodVal);
            }
            label(spec, rows)
        }
        Sampling::Oscillator { x0, v0, t_end, dt, ood_before, id_stride } => {
            let gt = spec
                .ground_truth
                .as_ref()
                .ok_or_else(|| DataError::Shape("oscillator needs a right-hand side".into()))?;
            let tr = integrate_ode(gt, &NO_PARAMS, *x0, *v0, (0.0, *t_end), *dt)?;
            let mut rows = Rows::new(3);
            let mut k = 0;
            for i in 0..tr.len() {
                let split = if tr.t[i] < *ood_before {
                    Split::OodVal
                } else {
                    k += 1;
                    stride_split(k - 1, *id_stride)
                };
                rows.push(&[tr.t[i], tr.x[i], tr.v[i]], split);
            }
            let mut d = label(spec, rows)?;
            // keep the integrator's own acceleration values, bit for bit
            d = Dataset::new(
                d.variables().to_vec(),
                d.target().clone(),
                d.columns().to_vec(),
                tr.a,
                d.splits().to_vec(),
                d.provenance.clone(),
            )?;
            Ok(d)
        }
        Sampling::StressCsv { path, ood_temperature } => {
            let (mut d, tagged) = read_table(path, Some(&spec.schema()))?;
            if !tagged {
                let temps = d.column("T").map(|c| c.to_vec()).unwrap_or_default();
                let mut k = 0;
                let split = temps
                    .iter()
                    .map(|&t| {
                        if t == *ood_temperature {
                            Split::OodVal
                        } else {
                            k += 1;
                            stride_split(k - 1, ID_STRIDE)
                        }
                    })
                    .collect();
                d = Dataset::new(
                    d.variables().to_vec(),
                    d.target().clone(),
                    d.columns().to_vec(),
                    d.targets().to_vec(),
                    split,
                    Provenance::default(),
                )?;
            }
            d.provenance.system = Some(SystemId::StressCsv);
            d.provenance.config = path.display().to_string();
            Ok(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oscillator_rows_and_split_ratio() {
        for id in [SystemId::Osc1, SystemId::Osc2] {
            let d = make_dataset(&SystemSpec::default_for(id)).unwrap();
            assert_eq!(d.len(), 2501);
            let ood = d.count(Split::OodVal);
            assert_eq!(ood, 1000);
            let train = d.count(Split::Train) as f64;
            let id_val = d.count(Split::IdVal) as f64;
            assert!((train / (train + id_val) - 0.8).abs() < 0.01);
            let t = d.column("t").unwrap();
            for (i, s) in d.splits().iter().enumerate() {
                assert_eq!(*s == Split::OodVal, t[i] < 20.0);
            }
        }
    }

    #[test]
    fn crk_equilibrium_matches_closed_form() {
        let spec = SystemSpec::default_for(SystemId::Crk);
        let eq = crk_equilibrium(spec.ground_truth.as_ref().unwrap()).unwrap();
        // A^2 (0.7498 A^4 + 1) * 0.1899 = 0.4598 A^2  =>  A^4 = (0.4598/0.1899 - 1)/0.7498
        let closed = ((0.4598 / 0.1899 - 1.0) / 0.7498f64).powf(0.25);
        assert!((eq - closed).abs() < 1e-12, "{eq} vs {closed}");
        let d = make_dataset(&spec).unwrap();
        assert_eq!(d.splits()[0], Split::Train);
        assert!((d.columns()[0][0] - closed).abs() < 1e-12);
        let a = d.column("A").unwrap();
        for (i, s) in d.splits().iter().enumerate() {
            assert_eq!(*s == Split::OodVal, a[i] > 2.0 + 1e-12, "row {i}");
        }
    }

    #[test]
    fn ecoli_ood_rows_lie_outside_train_box() {
        let d = make_dataset(&SystemSpec::default_for(SystemId::Ecoli)).unwrap();
        assert_eq!(d.count(Split::Train) + d.count(Split::IdVal), 6 * 6 * 7 * 6);
        assert_eq!(d.count(Split::OodVal), 131);
        let zero_b = d.column("B").unwrap().iter().zip(d.targets()).filter(|(b, _)| **b == 0.0);
        for (_, y) in zero_b {
            assert_eq!(*y, 0.0);
        }
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let mut spec = SystemSpec::default_for(SystemId::Crk);
        if let Sampling::Crk { grid, .. } = &mut spec.sampling {
            *grid = (1.0, 0.0, 10);
        }
        assert!(matches!(make_dataset(&spec), Err(DataError::InvalidGrid(_))));
    }
}
