use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;

use crate::expr::{BinaryOp, Expression, Node, UnaryOp, MAX_PARAMS};
use crate::seeds::{self, Rng};

use super::{extract_expressions, GenError, Generator, GeneratorOutput, PromptContext, PromptKind, Usage};

const TAG: u64 = 0x6772_616d;

/// Sampling weights and size limits of the tree grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarConfig {
    /// Depth cap for freshly grown trees.
    pub max_depth: usize,
    /// Depth cap for subtrees grown by mutation.
    pub mutation_depth: usize,
    /// Proposals larger than this are resampled.
    pub max_nodes: usize,
    /// Weights in `UnaryOp::ALL` order.
    pub unary_weights: [f64; 9],
    /// Weights in `BinaryOp::ALL` order.
    pub binary_weights: [f64; 7],
    /// Probabilities of mutation, crossover, operator substitution and a
    /// fresh tree when exemplars are available.
    pub operator_probs: [f64; 4],
    /// Chance that an interior position becomes a leaf before the cap.
    pub leaf_prob: f64,
    /// Chance that an interior node is unary rather than binary.
    pub unary_prob: f64,
    /// Chance that a fresh tree is a signed sum of parameter-scaled terms.
    pub term_sum_prob: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            max_depth: 6,
            mutation_depth: 3,
            max_nodes: 40,
            unary_weights: [1.0; 9],
            binary_weights: [3.0, 3.0, 3.0, 1.5, 1.0, 0.5, 0.5],
            operator_probs: [0.4, 0.3, 0.2, 0.1],
            leaf_prob: 0.3,
            unary_prob: 0.3,
            term_sum_prob: 0.5,
        }
    }
}

/// Offline generator; each call draws from a fresh sub-stream of `seed`.
#[derive(Debug, Clone)]
pub struct GrammarGenerator {
    pub cfg: GrammarConfig,
    seed: u64,
    calls: u64,
}

impl GrammarGenerator {
    pub fn new(seed: u64) -> Self {
        GrammarGenerator { cfg: GrammarConfig::default(), seed, calls: 0 }
    }

    pub fn with_config(seed: u64, cfg: GrammarConfig) -> Self {
        GrammarGenerator { cfg, seed, calls: 0 }
    }

    fn next_seed(&mut self) -> u64 {
        let s = seeds::derive(self.seed, TAG, self.calls);
        self.calls += 1;
        s
    }
}

impl Generator for GrammarGenerator {
    fn propose(&mut self, ctx: &PromptContext) -> Result<GeneratorOutput, GenError> {
        let seed = self.next_seed();
        propose_with(ctx, seed, &self.cfg)
    }

    fn analyze(&mut self, ctx: &PromptContext) -> Result<String, GenError> {
        ctx.validate()?;
        Ok(summarize(ctx))
    }

    fn cursor(&self) -> u64 {
        self.calls
    }

    fn set_cursor(&mut self, cursor: u64) {
        self.calls = cursor;
    }
}

/// One grammar call with default weights.
pub fn grammar_propose(ctx: &PromptContext, seed: u64) -> Result<GeneratorOutput, GenError> {
    propose_with(ctx, seed, &GrammarConfig::default())
}

fn propose_with(ctx: &PromptContext, seed: u64, cfg: &GrammarConfig) -> Result<GeneratorOutput, GenError> {
    ctx.validate()?;
    let mut rng = seeds::rng(seed);
    let vars: Vec<String> = ctx.variables.iter().map(|v| v.name.clone()).collect();
    let g = Grammar { cfg, vars: &vars };
    let mut text = String::new();
    for _ in 0..ctx.samples_per_prompt {
        let (tree, how) = g.propose_one(&ctx.exemplars.iter().map(|e| e.expr.root()).collect::<Vec<_>>(), &mut rng);
        let _ = writeln!(text, "{how}\nEXPR: {}", Expression::new(tree).renumber_params().serialize());
    }
    let (extracted, dropped) = extract_expressions(&text, &ctx.variable_names(), ctx.samples_per_prompt);
    if extracted.is_empty() {
        return Err(GenError::NoValidExpression { dropped });
    }
    Ok(GeneratorOutput { raw_text: text, extracted, dropped, usage: Usage::default() })
}

struct Grammar<'a> {
    cfg: &'a GrammarConfig,
    vars: &'a [String],
}

fn pick(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl Grammar<'_> {
    fn leaf(&self, rng: &mut Rng) -> Node {
        let u: f64 = rng.random();
        if u < 0.5 && !self.vars.is_empty() {
            Node::var(&self.vars[rng.random_range(0..self.vars.len())])
        } else if u < 0.9 {
            Node::Param(rng.random_range(0..MAX_PARAMS as u8))
        } else {
            Node::Const([0.5, 1.0, 2.0, 3.0][rng.random_range(0..4)])
        }
    }

    fn binary(&self, op: BinaryOp, depth: usize, rng: &mut Rng) -> Node {
        let left = self.grow(depth - 1, rng);
        let right = if op == BinaryOp::Pow {
            Node::Const([2.0, 3.0, 4.0][rng.random_range(0..3)])
        } else {
            self.grow(depth - 1, rng)
        };
        Node::binary(op, left, right)
    }

    /// Random tree of depth at most `depth`.
    fn grow(&self, depth: usize, rng: &mut Rng) -> Node {
        if depth <= 1 || rng.random::<f64>() < self.cfg.leaf_prob {
            return self.leaf(rng);
        }
        if rng.random::<f64>() < self.cfg.unary_prob {
            let op = UnaryOp::ALL[pick(&self.cfg.unary_weights, rng)];
            Node::unary(op, self.grow(depth - 1, rng))
        } else {
            let op = BinaryOp::ALL[pick(&self.cfg.binary_weights, rng)];
            self.binary(op, depth, rng)
        }
    }

    /// `±p*t1 ± p*t2 ...` with up to three terms, or a plain grown tree.
    fn fresh(&self, rng: &mut Rng) -> Node {
        let d = self.cfg.max_depth;
        if d >= 5 && rng.random::<f64>() < self.cfg.term_sum_prob {
            let terms = rng.random_range(1..=3usize);
            let term_depth = d - 1 - terms;
            let mut acc: Option<Node> = None;
            for i in 0..terms {
                let t = Node::binary(BinaryOp::Mul, Node::Param(i as u8), self.grow(term_depth, rng));
                acc = Some(match acc {
                    None => t,
                    Some(a) => {
                        let op = if rng.random::<bool>() { BinaryOp::Add } else { BinaryOp::Sub };
                        Node::binary(op, a, t)
                    }
                });
            }
            return acc.expect("at least one term");
        }
        self.grow(d, rng)
    }

    fn substitute(&self, tree: &Node, rng: &mut Rng) -> Node {
        let mut ops = Vec::new();
        let mut i = 0;
        tree.walk(&mut |n| {
            if matches!(n, Node::Unary(..) | Node::Binary(..)) {
                ops.push(i);
            }
            i += 1;
        });
        if ops.is_empty() {
            return self.leaf(rng);
        }
        let idx = ops[rng.random_range(0..ops.len())];
        let swapped = match tree.subtree(idx).expect("index from walk") {
            Node::Unary(op, c) => {
                let mut w = self.cfg.unary_weights;
                w[UnaryOp::ALL.iter().position(|o| o == op).expect("known op")] = 0.0;
                if w.iter().sum::<f64>() <= 0.0 {
                    return tree.clone();
                }
                Node::Unary(UnaryOp::ALL[pick(&w, rng)], c.clone())
            }
            Node::Binary(op, l, r) => {
                let mut w = self.cfg.binary_weights;
                w[BinaryOp::ALL.iter().position(|o| o == op).expect("known op")] = 0.0;
                // keep exponents numeric: never turn an operator into pow here
                w[4] = 0.0;
                if w.iter().sum::<f64>() <= 0.0 {
                    return tree.clone();
                }
                Node::Binary(BinaryOp::ALL[pick(&w, rng)], l.clone(), r.clone())
            }
            _ => unreachable!("only operator nodes collected"),
        };
        tree.replace_subtree(idx, &swapped)
    }

    fn propose_one(&self, parents: &[&Node], rng: &mut Rng) -> (Node, String) {
        for _ in 0..20 {
            let (tree, how) = if parents.is_empty() {
                (self.fresh(rng), "fresh tree".to_string())
            } else {
                let a = rng.random_range(0..parents.len());
                let pa = parents[a];
                match pick(&self.cfg.operator_probs, rng) {
                    0 => {
                        let idx = rng.random_range(0..pa.len());
                        let sub = self.grow(self.cfg.mutation_depth, rng);
                        (pa.replace_subtree(idx, &sub), format!("subtree mutation of v{a}"))
                    }
                    1 => {
                        let b = rng.random_range(0..parents.len());
                        let pb = parents[b];
                        let donor = pb.subtree(rng.random_range(0..pb.len())).expect("in range").clone();
                        let idx = rng.random_range(0..pa.len());
                        (pa.replace_subtree(idx, &donor), format!("crossover of v{a} with v{b}"))
                    }
                    2 => (self.substitute(pa, rng), format!("operator substitution in v{a}")),
                    _ => (self.fresh(rng), "fresh tree".to_string()),
                }
            };
            if tree.len() <= self.cfg.max_nodes {
                return (tree, how);
            }
        }
        (self.grow(self.cfg.max_depth, rng), "fresh tree".to_string())
    }
}

fn op_counts(e: &Expression) -> BTreeMap<&'static str, i64> {
    let mut m = BTreeMap::new();
    e.root().walk(&mut |n| {
        let name = match n {
            Node::Unary(op, _) => op.name(),
            Node::Binary(op, ..) => op.name(),
            _ => return,
        };
        *m.entry(name).or_insert(0) += 1;
    });
    m
}

/// Operators gained and lost going from `a` to `b`.
fn structural_diff(a: &Expression, b: &Expression) -> (Vec<String>, Vec<String>) {
    let (ca, cb) = (op_counts(a), op_counts(b));
    let mut gained = Vec::new();
    let mut lost = Vec::new();
    for k in ca.keys().chain(cb.keys()).collect::<std::collections::BTreeSet<_>>() {
        let d = cb.get(k).copied().unwrap_or(0) - ca.get(k).copied().unwrap_or(0);
        if d > 0 {
            gained.push(format!("{k} x{d}"));
        } else if d < 0 {
            lost.push(format!("{k} x{}", -d));
        }
    }
    (gained, lost)
}

fn list(v: &[String]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.join(", ")
    }
}

/// Deterministic stand-in for the prose a language model would return.
fn summarize(ctx: &PromptContext) -> String {
    match ctx.kind {
        PromptKind::ImprovementAnalysis => {
            let (a, b) = (&ctx.exemplars[0], &ctx.exemplars[1]);
            let (gained, lost) = structural_diff(&a.expr, &b.expr);
            format!(
                "Rewriting {} as {} raised the score from {:.6e} to {:.6e}; operators added: {}; removed: {}.",
                a.expr.serialize(),
                b.expr.serialize(),
                a.score,
                b.score,
                list(&gained),
                list(&lost)
            )
        }
        PromptKind::Reflection => {
            let orig = &ctx.exemplars[0];
            let invalid: Vec<String> = ctx.attempts.iter().filter(|a| !a.valid).map(|a| a.expr.serialize()).collect();
            let flat: Vec<String> =
                ctx.attempts.iter().filter(|a| a.valid && !a.improved).map(|a| a.expr.serialize()).collect();
            format!(
                "No refinement of {} improved its score {:.6e}. Constraint violations: {}. Valid but not better: {}.",
                orig.expr.serialize(),
                orig.score,
                list(&invalid),
                list(&flat)
            )
        }
        _ => {
            let mut s = format!(
                "Residual analysis for {}",
                ctx.exemplars.first().map_or_else(String::new, |e| e.expr.serialize())
            );
            if let Some(v) = &ctx.defect_var {
                let _ = write!(s, "; largest error variation along {v}");
            }
            s.push('.');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Variable;
    use crate::generator::{Attempt, Exemplar};
    use crate::parse;

    fn ctx(names: &[&str]) -> PromptContext {
        let mut c = PromptContext::new(
            PromptKind::Warmup,
            names.iter().map(|n| Variable::new(n, "", "")).collect(),
            Variable::new("y", "", ""),
        );
        c.analysis = "-".into();
        c.hard_rules = "-".into();
        c
    }

    #[test]
    fn depth_cap_one_gives_leaves() {
        let cfg = GrammarConfig { max_depth: 1, ..GrammarConfig::default() };
        let mut g = GrammarGenerator::with_config(3, cfg);
        for _ in 0..50 {
            for p in g.propose(&ctx(&["x", "t"])).unwrap().extracted {
                assert_eq!(p.expr.len(), 1);
            }
        }
    }

    #[test]
    fn seeded_output_is_stable() {
        let c = ctx(&["x"]);
        assert_eq!(grammar_propose(&c, 11).unwrap(), grammar_propose(&c, 11).unwrap());
        let mut g = GrammarGenerator::new(11);
        let first = g.propose(&c).unwrap();
        g.set_cursor(0);
        assert_eq!(g.propose(&c).unwrap(), first);
        assert_eq!(g.cursor(), 1);
    }

    #[test]
    fn improvement_summary_lists_operator_changes() {
        let mut c = ctx(&["x"]);
        c.kind = PromptKind::ImprovementAnalysis;
        c.exemplars = vec![
            Exemplar { expr: parse("p0*x").unwrap(), score: -2.0, valid: true },
            Exemplar { expr: parse("p0*x/(p1 + x)").unwrap(), score: -1.0, valid: true },
        ];
        let s = GrammarGenerator::new(0).analyze(&c).unwrap();
        assert!(s.contains("operators added: add x1, div x1"), "{s}");
        c.kind = PromptKind::Reflection;
        c.exemplars.truncate(1);
        c.attempts = vec![Attempt { expr: parse("x").unwrap(), score: Some(-3.0), valid: false, improved: false }];
        let s = GrammarGenerator::new(0).analyze(&c).unwrap();
        assert!(s.contains("Constraint violations: x"), "{s}");
    }
}
