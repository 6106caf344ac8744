use std::fmt::Write as _;

use crate::constraints::{Anchor, AsymmetryForm, Check, CheckKind, ConstraintSet, Sign};

use super::{Exemplar, GenError, PromptContext, PromptKind};

/// Closing instruction shared by every expression-yielding template.
pub const OUTPUT_PROTOCOL: &str = "\
[Output Format]
Write one or two sentences of reasoning, then give each candidate on its own line in the form
EXPR: <expression>
Expressions use infix notation over the listed variables and parameter slots p0..p9 \
(at most 10 slots, each fitted later and kept non-negative, so write subtractions explicitly). \
Allowed operators: + - * / ^. Allowed functions: sin, cos, tanh, exp, log, sqrt, abs, step, max(a, b), min(a, b). \
Do not write code, assignments or other text on an EXPR line.";

pub fn system_message(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::Warmup | PromptKind::Evolution | PromptKind::Refine | PromptKind::Repair => {
            "You propose closed-form equations for scientific data. Respect physical meaning, \
             keep parameters non-negative with explicit minus signs, and follow the requested output format exactly."
        }
        _ => "You review candidate equations from a symbolic regression search and report concise, structural lessons.",
    }
}

fn score(s: f64) -> String {
    format!("{s:.6e}")
}

fn variables_block(ctx: &PromptContext) -> String {
    let mut s = String::new();
    for v in &ctx.variables {
        let _ = writeln!(s, "- {}: {}{}", v.name, v.description, units(&v.units));
    }
    let t = &ctx.target;
    let _ = write!(s, "- {} (output): {}{}", t.name, t.description, units(&t.units));
    s
}

fn units(u: &str) -> String {
    if u.is_empty() {
        String::new()
    } else {
        format!(" [{u}]")
    }
}

fn insights_block(ctx: &PromptContext) -> String {
    if ctx.insights.is_empty() {
        return "(no lessons recorded yet)".into();
    }
    ctx.insights.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}

fn exemplar_line(e: &Exemplar) -> String {
    format!(
        "{}   (score {}, {})",
        e.expr.serialize(),
        score(e.score),
        if e.valid { "passes priors" } else { "violates priors" }
    )
}

fn heading(out: &mut String, title: &str) {
    let _ = write!(out, "\n[{title}]\n");
}

fn role(ctx: &PromptContext, what: &str) -> String {
    let domain = if ctx.domain.is_empty() { "a scientific system" } else { &ctx.domain };
    format!("Role: you are {what} for {domain}.\n")
}

/// Renders the template for `ctx.kind`. Pure: identical contexts give
/// byte-identical text.
pub fn render_prompt(ctx: &PromptContext) -> Result<String, GenError> {
    ctx.validate()?;
    let mut s = String::new();
    let n = ctx.samples_per_prompt;
    match ctx.kind {
        PromptKind::Warmup => {
            s.push_str("[Task: Propose Hypotheses From Data]\n");
            s.push_str(&role(ctx, "an assistant that drafts candidate equation structures"));
            let _ = writeln!(
                s,
                "Goal: study the data summary, the variables and the hard rules, then write EXACTLY {n} distinct candidate equations for {}.",
                ctx.target.name
            );
            push_problem(&mut s, ctx);
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Analysis Report");
            s.push_str(&ctx.analysis);
            heading(&mut s, "Hard Rules");
            s.push_str(&ctx.hard_rules);
            s.push_str("\n\nThink through the physics before each formula and keep the reasoning short.\n");
        }
        PromptKind::Evolution => {
            push_problem(&mut s, ctx);
            heading(&mut s, "Learnings from Recent Attempts");
            s.push_str(&insights_block(ctx));
            s.push_str(
                "\n\nLet these lessons and the versions below steer the next proposal. \
                 A completely different structure is welcome when it promises a better score.\n",
            );
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Previous Versions (lower score first)");
            let k = ctx.exemplars.len();
            for (i, e) in ctx.exemplars.iter().enumerate() {
                let tag = if i + 1 == k { "best so far" } else { "weaker" };
                let _ = writeln!(s, "v{i} ({tag}): {}", exemplar_line(e));
            }
            let _ = writeln!(
                s,
                "\nWrite {n} improved version(s) of v{} as v{k}, keeping what works and fixing what does not.",
                k - 1
            );
        }
        PromptKind::Refine => {
            s.push_str("[Task: Residual-Guided Equation Refinement]\n");
            s.push_str(&role(ctx, "an assistant that refines equation structures"));
            let _ = writeln!(
                s,
                "Goal: use the residual diagnostics to write EXACTLY {n} refined versions of the current best equation."
            );
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Current Best Equation");
            s.push_str(&exemplar_line(&ctx.exemplars[0]));
            heading(&mut s, "Experience Hints");
            if ctx.refinements.is_empty() && ctx.insights.is_empty() {
                s.push_str("(none retrieved)");
            }
            for r in &ctx.refinements {
                let _ = writeln!(
                    s,
                    "- before: {}\n  after: {}\n  why: {}",
                    r.original.serialize(),
                    r.improved.serialize(),
                    r.explanation
                );
            }
            if !ctx.insights.is_empty() {
                s.push_str(&insights_block(ctx));
            }
            heading(&mut s, "Residual Diagnostic Report");
            s.push_str(&ctx.analysis);
            heading(&mut s, "Refinement Instructions");
            s.push_str(
                "- Fix the main structural deficiency the diagnostics point to.\n\
                 - Concentrate on the regions where the error is largest.\n",
            );
            if let Some(v) = &ctx.defect_var {
                let _ = writeln!(s, "- The variable {v} accounts for the largest share of the error.");
            }
            s.push_str("- If the current form looks fundamentally limited, try a different family of equations.\n");
            heading(&mut s, "Hard Rules");
            s.push_str(&ctx.hard_rules);
            s.push('\n');
        }
        PromptKind::Repair => {
            s.push_str("[Task: Repair an Equation That Broke a Prior Constraint]\n");
            s.push_str(&role(ctx, "an assistant that repairs equation structures"));
            let _ = writeln!(
                s,
                "Goal: change the structure of the failed equation so that it satisfies the prior constraints; write EXACTLY {n} repaired variant(s)."
            );
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Prior Constraints");
            s.push_str(&ctx.hard_rules);
            heading(&mut s, "Residual Diagnostic Report");
            s.push_str(&ctx.analysis);
            if let Some(v) = &ctx.defect_var {
                let _ = write!(s, "\nResidual patterns involving {v} deserve the most attention.");
            }
            heading(&mut s, "Good Examples");
            if ctx.good_examples.is_empty() {
                s.push_str("(none yet)");
            }
            for e in ctx.good_examples.iter().take(3) {
                let _ = writeln!(s, "- {}", exemplar_line(e));
            }
            heading(&mut s, "Original Best Equation");
            s.push_str(&exemplar_line(&ctx.exemplars[0]));
            heading(&mut s, "Failed Equation");
            s.push_str(&ctx.exemplars[1].expr.serialize());
            heading(&mut s, "Failure Reason");
            s.push_str(ctx.failure_reason.as_deref().unwrap_or_default());
            heading(&mut s, "Suggested Fix");
            s.push_str(ctx.fix_hint.as_deref().unwrap_or("(no hint)"));
            heading(&mut s, "Previous Failed Attempts");
            let shown = &ctx.history[ctx.history.len().saturating_sub(3)..];
            if shown.is_empty() {
                s.push_str("(first attempt)");
            }
            for r in shown {
                let _ = writeln!(s, "- attempt {}: {} -> {}", r.attempt, r.failed.serialize(), r.failure_reason);
            }
            heading(&mut s, "Repair Instructions");
            s.push_str("1. Work out which term causes the violation.\n");
            if shown.is_empty() {
                s.push_str("2. Change only what is needed to satisfy the constraint.\n");
            } else {
                s.push_str("2. Do not repeat the structures listed under previous attempts.\n");
            }
            s.push_str("3. Use at most 10 parameter slots.\n");
        }
        PromptKind::ResidualAnalysis => {
            s.push_str("[Task: Analyze Residual Patterns]\n");
            s.push_str(&role(ctx, "a diagnostician for symbolic regression fits"));
            s.push_str("Goal: explain from the residual statistics why the current equation falls short.\n");
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Current Equation");
            s.push_str(&exemplar_line(&ctx.exemplars[0]));
            heading(&mut s, "Raw Residual Statistics");
            s.push_str(&ctx.analysis);
            heading(&mut s, "Analysis Instructions");
            s.push_str(
                "Name the main missing or wrong structure, the input regions with the largest errors, \
                 how each input appears to drive the output, and which structural changes would help. \
                 Answer as JSON with keys primary_deficiency, problematic_regions, variable_relationships and suggested_modifications.\n",
            );
        }
        PromptKind::ImprovementAnalysis => {
            let (a, b) = (&ctx.exemplars[0], &ctx.exemplars[1]);
            s.push_str("[Task: Analyze Equation Improvement]\n");
            s.push_str(&role(ctx, "a scientist reviewing equation revisions"));
            s.push_str("Goal: explain why the revised equation beats the original and distil one reusable lesson.\n");
            heading(&mut s, "Score Explanation");
            s.push_str("Scores are negative training mean squared error; higher is better.");
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            heading(&mut s, "Original Equation");
            s.push_str(&exemplar_line(a));
            heading(&mut s, "Residual Summary of the Original");
            s.push_str(if ctx.analysis.is_empty() { "(not available)" } else { &ctx.analysis });
            heading(&mut s, "Improved Equation");
            s.push_str(&exemplar_line(b));
            let gain = b.score - a.score;
            let pct = if a.score != 0.0 { 100.0 * gain / a.score.abs() } else { 0.0 };
            let _ = write!(s, "\n\n[Score Improvement]: {} ({pct:.2}%)\n", score(gain));
            heading(&mut s, "Analysis Instructions");
            s.push_str(
                "Describe the structural change, relate it to the residual pattern it removed, \
                 and finish with a JSON object {\"insight\": \"...\"} holding the lesson.\n",
            );
        }
        PromptKind::Reflection => {
            s.push_str("[Task: Reflection Analysis]\n");
            s.push_str(&role(ctx, "an expert in equation discovery"));
            heading(&mut s, "Variable Definitions");
            s.push_str(&variables_block(ctx));
            let _ = write!(s, "\n\n{} refined candidates were tried against the original below.", ctx.attempts.len());
            heading(&mut s, "Original Equation");
            s.push_str(&exemplar_line(&ctx.exemplars[0]));
            heading(&mut s, "Refined Candidates");
            for a in &ctx.attempts {
                let _ = writeln!(
                    s,
                    "- {} | score {} | {} | {}",
                    a.expr.serialize(),
                    a.score.map_or_else(|| "unfitted".into(), score),
                    if a.improved { "Improved" } else { "NotImproved" },
                    if a.valid { "Valid" } else { "Invalid" }
                );
            }
            s.push_str(
                "\nSummarise briefly under these headings:\n\
                 What Worked Well\n\
                 What Didn't Work (constraint violations, then valid but not better)\n\
                 Recommendations for Future Evolution\n\
                 Stay at the level of structural patterns rather than parameter values.\n",
            );
        }
    }
    if ctx.kind.yields_expressions() {
        s.push('\n');
        s.push_str(OUTPUT_PROTOCOL);
        s.push('\n');
    }
    Ok(s)
}

fn push_problem(s: &mut String, ctx: &PromptContext) {
    if !ctx.problem.is_empty() {
        heading(s, "Problem");
        s.push_str(&ctx.problem);
        s.push('\n');
    }
}

fn describe(c: &Check) -> String {
    match &c.kind {
        CheckKind::Dependence { required, forbidden } => {
            let mut s = format!("must depend on {}", required.join(", "));
            if !forbidden.is_empty() {
                let _ = write!(s, " and must not depend on {}", forbidden.join(", "));
            }
            s
        }
        CheckKind::ValueAt { target } => format!("must equal {target} on the probe set"),
        CheckKind::SignAt { sign, reference } => {
            let sign = match sign {
                Sign::Positive => "positive",
                Sign::Negative => "negative",
                Sign::NonNegative => "non-negative",
                Sign::NonPositive => "non-positive",
            };
            match reference {
                None => format!("must be {sign} on the probe set"),
                Some(r) => {
                    let at = match r.anchor {
                        Anchor::Value(v) => format!("{} = {v}", r.var),
                        Anchor::Equilibrium => format!("the equilibrium of {}", r.var),
                    };
                    format!("must push against displacement of {} away from {at}", r.var)
                }
            }
        }
        CheckKind::MonotoneOn { var, increasing, .. } => {
            format!("must {} with {var}", if *increasing { "increase" } else { "decrease" })
        }
        CheckKind::UnimodalOn { var } => format!("must rise then fall along {var}"),
        CheckKind::BoundedOn => "must stay bounded and finite".into(),
        CheckKind::Nonlinearity => "must not be linear in its inputs".into(),
        CheckKind::Equilibrium { var } => format!("must vanish at the observed equilibrium of {var}"),
        CheckKind::BoundedTrajectory { .. } => "simulated trajectories must stay bounded".into(),
        CheckKind::Asymmetry { var, form } => match form {
            AsymmetryForm::AboutAnchor { anchor } => {
                format!("response must differ for equal displacements either side of {var} = {anchor}")
            }
            AsymmetryForm::SharperAbovePeak { .. } => {
                format!("must fall off faster above the optimum of {var} than below it")
            }
        },
        CheckKind::AllOf { parts } => parts.iter().map(describe).collect::<Vec<_>>().join("; "),
    }
}

/// One line per check of the catalog, for the hard-rules slot.
pub fn render_hard_rules(cs: &ConstraintSet) -> String {
    cs.checks
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}: {}", i + 1, c.name, describe(c)))
        .collect::<Vec<_>>()
        .join("\n")
}
