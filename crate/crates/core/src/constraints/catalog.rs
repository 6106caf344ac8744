use crate::datagen::{SystemId, SystemSpec};

use super::{
    Anchor, AsymmetryForm, Axis, Check, CheckKind, ConstraintError, ConstraintSet, Grid, Mode, Reference, Sign,
    Tolerance,
};

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn dependence(name: &str, required: &[&str], forbidden: &[&str], grid: Grid) -> Check {
    Check::new(
        name,
        CheckKind::Dependence { required: strings(required), forbidden: strings(forbidden) },
        Tolerance::abs(1e-8),
    )
    .probe(grid)
}

/// `(f(p) - f(p | var = 0)) * sign(p[var]) < 0`.
fn opposes(name: &str, var: &str, grid: Grid) -> Check {
    Check::new(
        name,
        CheckKind::SignAt {
            sign: Sign::Negative,
            reference: Some(Reference { var: var.into(), anchor: Anchor::Value(0.0), subtract: true }),
        },
        Tolerance::abs(0.0),
    )
    .probe(grid)
}

fn nonlinearity(grid: Grid) -> Check {
    Check::new("nonlinearity", CheckKind::Nonlinearity, Tolerance::abs(1e-3)).probe(grid)
}

fn bounded_trajectory() -> Check {
    Check::new(
        "bounded trajectory",
        CheckKind::BoundedTrajectory { x0: 0.5, v0: 0.5, t_end: 50.0, dt: 0.02 },
        Tolerance::abs(10.0),
    )
}

fn ecoli() -> Vec<Check> {
    let box4 = |n: usize| {
        Grid::new()
            .with("B", Axis::train(n))
            .with("S", Axis::train(n))
            .with("T", Axis::train(n))
            .with("pH", Axis::train(n))
    };
    let lethal = |grid: Grid| grid.with("B", Axis::train(4)).with("S", Axis::train(4));
    vec![
        dependence("multivariate dynamics", &["B", "S", "T", "pH"], &[], box4(5)),
        Check::new("no growth without population", CheckKind::ValueAt { target: 0.0 }, Tolerance::abs(1e-6))
            .probe(box4(8).with("B", Axis::Fixed { value: 0.0 })),
        Check::new(
            "no growth at lethal conditions",
            CheckKind::SignAt { sign: Sign::NonPositive, reference: None },
            Tolerance::of_target(0.05),
        )
        .probe(lethal(Grid::new().with("T", Axis::Range { lo: 50.0, hi: 60.0, points: 5 }).with("pH", Axis::train(6))))
        .probe(lethal(Grid::new().with("T", Axis::train(6)).with("pH", Axis::Values { values: vec![2.0, 2.5, 3.0] })))
        .probe(lethal(
            Grid::new().with("T", Axis::train(6)).with("pH", Axis::Values { values: vec![11.0, 11.5, 12.0] }),
        )),
        Check::new(
            "unimodal in temperature and pH",
            CheckKind::AllOf {
                parts: vec![
                    Check::new("unimodal in T", CheckKind::UnimodalOn { var: "T".into() }, Tolerance::abs(0.0))
                        .probe(Grid::new().with("T", Axis::train(64))),
                    Check::new("unimodal in pH", CheckKind::UnimodalOn { var: "pH".into() }, Tolerance::abs(0.0))
                        .probe(Grid::new().with("pH", Axis::train(64))),
                ],
            },
            Tolerance::abs(0.0),
        ),
        Check::new(
            "sharper decay above optimal temperature",
            CheckKind::Asymmetry { var: "T".into(), form: AsymmetryForm::SharperAbovePeak { level: 0.5 } },
            Tolerance::abs(1e-3),
        )
        .probe(Grid::new().with("T", Axis::train(512))),
    ]
}

fn stress() -> Vec<Check> {
    vec![
        dependence(
            "thermo-mechanical coupling",
            &["eps", "T"],
            &[],
            Grid::new().with("eps", Axis::train(8)).with("T", Axis::train(8)),
        ),
        Check::new("near-zero stress at small strain", CheckKind::ValueAt { target: 0.0 }, Tolerance::of_target(0.05))
            .probe(Grid::new().with("eps", Axis::Fixed { value: 0.0 }).with("T", Axis::train(8))),
        Check::new(
            "monotone growth through elastic and early plastic range",
            CheckKind::MonotoneOn { var: "eps".into(), increasing: true, aggregate: false },
            Tolerance::abs(0.0),
        )
        .probe(Grid::new().with("eps", Axis::Train { from: 0.0, to: 0.5, points: 64 }).with("T", Axis::train(8))),
        Check::new(
            "thermal softening",
            CheckKind::MonotoneOn { var: "T".into(), increasing: false, aggregate: true },
            Tolerance::abs(0.0),
        )
        .probe(Grid::new().with("T", Axis::train(2)).with("eps", Axis::train(16))),
        Check::new("bounded and finite", CheckKind::BoundedOn, Tolerance::of_target(10.0))
            .probe(Grid::new().with("eps", Axis::Train { from: 0.0, to: 1.5, points: 32 }).with("T", Axis::train(8))),
    ]
}

fn crk() -> Vec<Check> {
    let a_band = Grid::new().with("A", Axis::Train { from: 0.025, to: 1.0, points: 64 });
    vec![
        dependence("rate depends on concentration", &["A"], &[], Grid::new().with("A", Axis::train(16))),
        Check::new("equilibrium consistency", CheckKind::Equilibrium { var: "A".into() }, Tolerance::abs(1e-2)),
        Check::new(
            "global stability toward equilibrium",
            CheckKind::SignAt {
                sign: Sign::Negative,
                reference: Some(Reference { var: "A".into(), anchor: Anchor::Equilibrium, subtract: false }),
            },
            Tolerance::abs(0.0),
        )
        .probe(a_band.clone()),
        Check::new(
            "non-negative rate at zero concentration",
            CheckKind::SignAt { sign: Sign::NonNegative, reference: None },
            Tolerance::abs(1e-9),
        )
        .probe(Grid::new().with("A", Axis::Fixed { value: 0.0 })),
        nonlinearity(a_band),
    ]
}

fn osc1() -> Vec<Check> {
    vec![
        dependence(
            "state-dependent dynamics",
            &["x", "v"],
            &["t"],
            Grid::new().with("t", Axis::train(6)).with("x", Axis::train(6)).with("v", Axis::train(6)),
        ),
        opposes("restoring force", "x", Grid::new().with("x", Axis::train(64)).with("v", Axis::Fixed { value: 0.0 })),
        opposes(
            "damping opposes velocity",
            "v",
            Grid::new().with("v", Axis::train(64)).with("x", Axis::Fixed { value: 0.0 }),
        ),
        nonlinearity(Grid::new().with("x", Axis::train(16)).with("v", Axis::train(16))),
        bounded_trajectory(),
    ]
}

fn osc2() -> Vec<Check> {
    let restoring_grid =
        Grid::new().with("x", Axis::train(64)).with("v", Axis::Fixed { value: 0.0 }).with("t", Axis::train(4));
    vec![
        dependence(
            "non-autonomous dynamics",
            &["t", "x", "v"],
            &[],
            Grid::new().with("t", Axis::train(6)).with("x", Axis::train(6)).with("v", Axis::train(6)),
        ),
        Check::new(
            "asymmetric restoring force",
            CheckKind::AllOf {
                parts: vec![
                    opposes("restoring force", "x", restoring_grid.clone()),
                    Check::new(
                        "asymmetry in x",
                        CheckKind::Asymmetry { var: "x".into(), form: AsymmetryForm::AboutAnchor { anchor: 0.0 } },
                        Tolerance::abs(1e-3),
                    )
                    .probe(restoring_grid),
                ],
            },
            Tolerance::abs(0.0),
        ),
        opposes(
            "damping opposes velocity",
            "v",
            Grid::new().with("v", Axis::train(64)).with("x", Axis::Fixed { value: 0.0 }).with("t", Axis::train(4)),
        ),
        Check::new("bounded driving term", CheckKind::BoundedOn, Tolerance::of_target(2.0)).probe(
            Grid::new()
                .with("t", Axis::Range { lo: 0.0, hi: 200.0, points: 401 })
                .with("x", Axis::Fixed { value: 0.0 })
                .with("v", Axis::Fixed { value: 0.0 }),
        ),
        nonlinearity(Grid::new().with("x", Axis::train(16)).with("v", Axis::train(16))),
        bounded_trajectory(),
    ]
}

/// Catalog of prior checks for `id`. The stress catalog runs in statistical
/// mode because that data is measured; the others are pointwise.
pub fn catalog(id: SystemId) -> ConstraintSet {
    let spec = SystemSpec::default_for(id);
    let (checks, mode) = match id {
        SystemId::Ecoli => (ecoli(), Mode::Pointwise),
        SystemId::StressCsv => (stress(), Mode::Statistical),
        SystemId::Crk => (crk(), Mode::Pointwise),
        SystemId::Osc1 => (osc1(), Mode::Pointwise),
        SystemId::Osc2 => (osc2(), Mode::Pointwise),
    };
    ConstraintSet { system: id, variables: spec.variables.iter().map(|v| v.name.clone()).collect(), checks }
        .with_mode(mode)
}

pub fn catalog_by_name(name: &str) -> Result<ConstraintSet, ConstraintError> {
    name.parse::<SystemId>().map(catalog).map_err(|_| ConstraintError::UnknownSystem(name.to_string()))
}
