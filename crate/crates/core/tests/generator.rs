use std::collections::BTreeSet;

use priorsr::datagen::Variable;
use priorsr::expr::{Node, UnaryOp};
use priorsr::generator::{
    extract_expressions, grammar_propose, render_prompt, EndpointConfig, Exemplar, FixtureTransport, GenError,
    Generator, GrammarConfig, GrammarGenerator, HttpReply, LlmGenerator, PromptContext, PromptKind, TransportError,
};
use priorsr::{parse, Expression};
use proptest::prelude::*;

fn fixture(name: &str) -> Result<HttpReply, TransportError> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    Ok(HttpReply { status: 200, body: std::fs::read_to_string(path).unwrap() })
}

fn status(code: u16) -> Result<HttpReply, TransportError> {
    Ok(HttpReply { status: code, body: "{}".into() })
}

fn crk_ctx(kind: PromptKind) -> PromptContext {
    let mut ctx = PromptContext::new(
        kind,
        vec![Variable::new("A", "species concentration", "mol/L")],
        Variable::new("dA_dt", "rate of change", "mol/(L s)"),
    );
    ctx.domain = "chemical kinetics".into();
    ctx.problem = "Find the rate law.".into();
    ctx.analysis = "A ranges over [0, 2].".into();
    ctx.hard_rules = "1. equilibrium consistency: the rate vanishes at the observed equilibrium".into();
    ctx
}

fn evolution_ctx() -> PromptContext {
    let mut ctx = crk_ctx(PromptKind::Evolution);
    ctx.exemplars = vec![
        Exemplar { expr: parse("p0*A").unwrap(), score: -0.3, valid: false },
        Exemplar { expr: parse("p0*A^2 - p1*A").unwrap(), score: -0.01, valid: true },
    ];
    ctx.insights = vec!["Saturating denominators helped on this island.".into()];
    ctx
}

fn llm(replies: Vec<Result<HttpReply, TransportError>>) -> LlmGenerator {
    let cfg = EndpointConfig { backoff_ms: 0, ..EndpointConfig::default() };
    LlmGenerator::with_transport(cfg, Box::new(FixtureTransport::new(replies)), Some("test-key".into()))
}

#[test]
fn four_expression_lines_give_four_skeletons() {
    let out = llm(vec![fixture("four_expressions.json")]).propose(&evolution_ctx()).unwrap();
    assert_eq!(out.extracted.len(), 4);
    assert_eq!(out.dropped, 0);
    assert_eq!(out.extracted[0].expr.serialize(), "-p0*A^2 + p1*A^2/(p2*A^4 + 1)");
    assert_eq!(out.usage.prompt_tokens, 812);
    assert!(out.extracted[0].rationale.contains("saturation"));
}

#[test]
fn fenced_lines_are_extracted() {
    let out = llm(vec![fixture("fenced_expressions.json")]).propose(&evolution_ctx()).unwrap();
    let got: Vec<String> = out.extracted.iter().map(|p| p.expr.serialize()).collect();
    assert_eq!(got, ["p0*A/(p1 + A) - p2*A^2", "p0*A^2 - p1*A^3"]);
}

#[test]
fn unparseable_reply_is_an_empty_result() {
    let err = llm(vec![fixture("unparseable.json")]).propose(&evolution_ctx()).unwrap_err();
    assert!(matches!(err, GenError::NoValidExpression { dropped: 2 }));
}

#[test]
fn server_errors_are_retried_then_surfaced() {
    let err = llm(vec![status(500), status(500), status(500), fixture("four_expressions.json")])
        .propose(&evolution_ctx())
        .unwrap_err();
    assert!(matches!(err, GenError::Transport { attempts: 3, .. }), "{err}");
    let ok = llm(vec![status(503), Err(TransportError("reset".into())), fixture("four_expressions.json")])
        .propose(&evolution_ctx())
        .unwrap();
    assert_eq!(ok.extracted.len(), 4);
}

#[test]
fn auth_failures_are_not_retried() {
    let err = llm(vec![status(401), fixture("four_expressions.json")]).propose(&evolution_ctx()).unwrap_err();
    assert!(matches!(err, GenError::Auth { status: 401 }));
}

#[test]
fn request_carries_model_messages_and_prompt() {
    let transport = std::sync::Arc::new(FixtureTransport::new(vec![fixture("four_expressions.json")]));
    struct Shared(std::sync::Arc<FixtureTransport>);
    impl priorsr::generator::Transport for Shared {
        fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, TransportError> {
            assert!(headers.iter().any(|(k, v)| k == "Authorization" && v == "Bearer test-key"));
            self.0.post(url, headers, body)
        }
    }
    let mut gen = LlmGenerator::with_transport(
        EndpointConfig::default(),
        Box::new(Shared(transport.clone())),
        Some("test-key".into()),
    );
    let ctx = evolution_ctx();
    gen.propose(&ctx).unwrap();
    let sent = transport.requests.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&sent[0]).unwrap();
    assert_eq!(body["model"], "gpt-4o-mini");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], render_prompt(&ctx).unwrap());
}

#[test]
fn rendering_is_deterministic_and_complete() {
    let ctx = evolution_ctx();
    let text = render_prompt(&ctx).unwrap();
    assert_eq!(text, render_prompt(&ctx.clone()).unwrap());
    assert!(text.contains("p0*A") && text.contains("p0*A^2 - p1*A"));
    assert!(text.contains("Saturating denominators helped"));
    assert!(text.find("v0").unwrap() < text.find("v1").unwrap());
    let warm = render_prompt(&crk_ctx(PromptKind::Warmup)).unwrap();
    assert!(warm.contains("A ranges over [0, 2]."));
    assert!(warm.contains("equilibrium consistency"));
    assert!(warm.contains("EXPR:"));
}

#[test]
fn missing_slots_are_rejected() {
    let mut ctx = crk_ctx(PromptKind::Warmup);
    ctx.analysis.clear();
    assert!(matches!(render_prompt(&ctx), Err(GenError::MissingSlot(_))));
    let mut ctx = evolution_ctx();
    ctx.exemplars.clear();
    assert!(matches!(render_prompt(&ctx), Err(GenError::ExemplarCount { .. })));
}

#[test]
fn grammar_generator_is_deterministic() {
    let ctx = evolution_ctx();
    let a = GrammarGenerator::new(11).propose(&ctx).unwrap();
    let b = GrammarGenerator::new(11).propose(&ctx).unwrap();
    assert_eq!(a.raw_text, b.raw_text);
    assert_eq!(a.usage.prompt_tokens + a.usage.completion_tokens, 0);
    let mut g = GrammarGenerator::new(11);
    g.propose(&ctx).unwrap();
    let cursor = g.cursor();
    let next = g.propose(&ctx).unwrap();
    let mut h = GrammarGenerator::new(11);
    h.set_cursor(cursor);
    assert_eq!(h.propose(&ctx).unwrap().raw_text, next.raw_text);
}

#[test]
fn depth_cap_one_yields_single_nodes() {
    let cfg = GrammarConfig { max_depth: 1, term_sum_prob: 0.0, ..GrammarConfig::default() };
    let mut g = GrammarGenerator::with_config(3, cfg);
    let ctx = crk_ctx(PromptKind::Warmup);
    for _ in 0..50 {
        for p in g.propose(&ctx).unwrap().extracted {
            assert_eq!(p.expr.len(), 1, "{}", p.expr.serialize());
        }
    }
}

/// Every child obtainable by swapping one subtree of a parent for a subtree of a parent.
fn crossover_children(parents: &[Node]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for pa in parents {
        for pb in parents {
            for i in 0..pa.len() {
                for j in 0..pb.len() {
                    out.insert(Expression::new(pa.replace_subtree(i, pb.subtree(j).unwrap())).serialize());
                }
            }
        }
    }
    out
}

#[test]
fn crossover_only_splices_parent_material() {
    let cfg = GrammarConfig { operator_probs: [0.0, 1.0, 0.0, 0.0], ..GrammarConfig::default() };
    let mut ctx = crk_ctx(PromptKind::Evolution);
    ctx.variables.push(Variable::new("t", "time", "s"));
    ctx.exemplars = vec![
        Exemplar { expr: parse("p0*A").unwrap(), score: -1.0, valid: true },
        Exemplar { expr: parse("sin(t)").unwrap(), score: -0.5, valid: true },
    ];
    let parents: Vec<Node> = ctx.exemplars.iter().map(|e| e.expr.root().clone()).collect();
    let allowed = crossover_children(&parents);
    let mut g = GrammarGenerator::with_config(5, cfg);
    for _ in 0..40 {
        for p in g.propose(&ctx).unwrap().extracted {
            assert!(allowed.contains(&p.expr.serialize()), "{} is not a crossover child", p.expr.serialize());
        }
    }
}

#[test]
fn uniform_unary_weights_cover_every_operator() {
    let mut seen = BTreeSet::new();
    let ctx = crk_ctx(PromptKind::Warmup);
    let mut g = GrammarGenerator::new(17);
    let mut total = 0;
    while total < 1000 {
        for p in g.propose(&ctx).unwrap().extracted {
            total += 1;
            p.expr.root().walk(&mut |n| {
                if let Node::Unary(op, _) = n {
                    seen.insert(*op);
                }
            });
        }
    }
    assert_eq!(seen.len(), UnaryOp::ALL.len(), "{seen:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grammar_proposals_stay_closed(seed: u64, evolve: bool) {
        let ctx = if evolve { evolution_ctx() } else { crk_ctx(PromptKind::Warmup) };
        let out = grammar_propose(&ctx, seed).unwrap();
        prop_assert!(!out.extracted.is_empty() && out.extracted.len() <= ctx.samples_per_prompt);
        let allowed = ctx.variable_names();
        for p in &out.extracted {
            prop_assert!(p.expr.free_vars().is_subset(&allowed));
            prop_assert_eq!(parse(&p.expr.serialize()).unwrap().serialize(), p.expr.serialize());
            prop_assert!(p.expr.depth() <= GrammarConfig::default().max_depth + 1);
        }
        let (again, dropped) = extract_expressions(&out.raw_text, &allowed, ctx.samples_per_prompt);
        prop_assert_eq!(dropped, 0);
        prop_assert_eq!(again, out.extracted);
    }
}
