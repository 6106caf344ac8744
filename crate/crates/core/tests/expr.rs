use priorsr::expr::{BinaryOp, EvalGuard, ExprError, Node, Program, UnaryOp};
use priorsr::{parse, Expression};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Node> {
    prop_oneof![
        prop::sample::select(vec!["x", "y"]).prop_map(Node::var),
        (-5.0f64..5.0).prop_map(|c| Node::Const((c * 100.0).round() / 100.0)),
        prop::sample::select(vec![0.5, 1.0, 2.0, 3.0, 1e-3, 2.5e7]).prop_map(Node::Const),
        (0u8..4).prop_map(Node::Param),
    ]
}

fn node() -> impl Strategy<Value = Node> {
    leaf().prop_recursive(5, 40, 2, |inner| {
        prop_oneof![
            (prop::sample::select(UnaryOp::ALL.to_vec()), inner.clone()).prop_map(|(op, c)| Node::unary(op, c)),
            (prop::sample::select(BinaryOp::ALL.to_vec()), inner.clone(), inner)
                .prop_map(|(op, l, r)| Node::binary(op, l, r)),
        ]
    })
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

const XS: [f64; 6] = [-2.0, -0.5, 0.0, 0.3, 1.0, 4.0];
const YS: [f64; 6] = [1.5, 2.0, -1.0, 0.0, 7.0, -3.0];
const PS: [f64; 10] = [0.7, 1.3, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn printing_round_trips(n in node()) {
        let e = Expression::new(n);
        let text = e.serialize();
        let back = parse(&text).unwrap();
        prop_assert_eq!(back.serialize(), text.clone());
        let (pa, pb) = (
            Program::compile(&e, &["x", "y"]).unwrap(),
            Program::compile(&back, &["x", "y"]).unwrap(),
        );
        for (x, y) in XS.iter().zip(&YS) {
            let (a, b) = (pa.eval_point(&[*x, *y], &PS), pb.eval_point(&[*x, *y], &PS));
            prop_assert!(same(a, b), "{} at ({}, {}): {} vs {}", text, x, y, a, b);
        }
    }

    #[test]
    fn columnar_matches_pointwise(n in node()) {
        let e = Expression::new(n);
        let p = Program::compile(&e, &["x", "y"]).unwrap();
        let cols: [&[f64]; 2] = [&XS, &YS];
        let points: Vec<f64> = XS.iter().zip(&YS).map(|(x, y)| p.eval_point(&[*x, *y], &PS)).collect();
        match p.eval_columns(&cols, XS.len(), &PS, &EvalGuard::default()) {
            Ok(col) => {
                for (a, b) in col.iter().zip(&points) {
                    prop_assert!(same(*a, *b), "{}: {} vs {}", e.serialize(), a, b);
                }
            }
            Err(ExprError::NonFinite { row }) => {
                prop_assert!(!points[row].is_finite());
                prop_assert!(points[..row].iter().all(|v| v.is_finite()));
            }
            Err(other) => prop_assert!(false, "unexpected error {other}"),
        }
    }

    #[test]
    fn tree_measures_are_consistent(n in node()) {
        let mut count = 0;
        n.walk(&mut |_| count += 1);
        prop_assert_eq!(count, n.len());
        prop_assert!(n.depth() <= n.len());
        prop_assert_eq!(n.subtree(0), Some(&n));
        prop_assert!(n.subtree(n.len()).is_none());
        let last = n.len() - 1;
        let cut = n.subtree(last).unwrap().len();
        let replaced = n.replace_subtree(last, &Node::Const(1.0));
        prop_assert_eq!(replaced.len(), n.len() - cut + 1);
    }

    #[test]
    fn renumbering_is_dense_and_idempotent(n in node()) {
        let e = Expression::new(n).renumber_params();
        let used: Vec<usize> = e.params_used().into_iter().collect();
        prop_assert_eq!(used.clone(), (0..used.len()).collect::<Vec<_>>());
        prop_assert_eq!(e.renumber_params(), e);
    }
}

#[test]
fn integer_powers_agree_with_repeated_multiplication() {
    let e = parse("x^3").unwrap();
    let p = Program::compile(&e, &["x"]).unwrap();
    for x in [-2.5, -1.0, 0.0, 0.1, 3.0] {
        assert_eq!(p.eval_point(&[x], &PS), x * x * x);
    }
    let neg = parse("x^0.5").unwrap();
    assert!(Program::compile(&neg, &["x"]).unwrap().eval_point(&[-1.0], &PS).is_nan());
}

#[test]
fn scalar_only_program_fills_every_row() {
    let e = parse("cos(p0^2) + 1").unwrap();
    let p = Program::compile(&e, &["x"]).unwrap();
    let out = p.eval_columns(&[&[1.0, 2.0, 3.0]], 3, &PS, &EvalGuard::default()).unwrap();
    assert_eq!(out, vec![0.49f64.cos() + 1.0; 3]);
}
