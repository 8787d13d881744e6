use std::path::PathBuf;
use std::time::{Duration, Instant};

use conductor_core::cache::{CachePolicy, SemanticCache};
use conductor_core::config::{load_config, PlatformConfig};
use conductor_core::decomposer::decompose;
use conductor_core::graph::{FilterOp, KGQuery};
use conductor_core::model::{Prompt, Scalar, UserContext};
use conductor_core::orchestrator::{count_steps, plan, Orchestrator, RetrievalMode, StepMode};

const CASE_PROMPT: &str =
    "Transferring funds from my savings account to a Fixed Deposit, what are the limits and applicable fees?";

// Verbatim from the case study.
const R1_XXX: &str = "Customer XXX has greater than ₹100,000 in his saving account";
const R2: &str =
    "There are 2 FDs offered with a minimum deposit amount of ₹100,000 for 366 days and 444 days with an interest rate of 8.65%";
const R3: &str = "Charges for transfer of amount from Saving account to FD is 1% for NEFT/RTGS";
const FINAL_RESULT: &str = "You have sufficient balance for the FD transfer. The daily limit is ₹100,000, with a 1% fee for NEFT/RTGS transfers. Proceed with the transfer, and the applicable charges will be automatically deducted.";

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/banking/platform.toml")
}

fn config() -> PlatformConfig {
    load_config(config_path()).expect("banking fixture loads")
}

fn orchestrator() -> Orchestrator {
    config().build_orchestrator().expect("banking fixture builds")
}

fn retail(user: &str) -> UserContext {
    UserContext::new(user, "retail-customer", [("account-type".to_string(), Scalar::from("saving"))].into()).unwrap()
}

fn prompt(user: &str, text: &str) -> Prompt {
    Prompt::new(text, retail(user)).unwrap()
}

fn cache() -> SemanticCache {
    SemanticCache::new(CachePolicy::default())
}

#[test]
fn fixture_declares_three_of_each() {
    let cfg = config();
    assert_eq!(cfg.kg_sources.len(), 3);
    assert_eq!(cfg.services.len(), 3);
    assert_eq!(cfg.rules.rules().len(), 3);
    let graphs = cfg.load_graphs().unwrap();
    assert_eq!(graphs.ids(), ["KG1", "KG2", "KG3"]);
}

#[test]
fn kg2_holds_the_case_study_fds() {
    let kg2 = config().load_graphs().unwrap().get("KG2").unwrap();
    let tenure_rate = |status: &str| -> Vec<(f64, f64)> {
        kg2.query(&KGQuery::kind("fd-product").filter("status", FilterOp::Eq, status))
            .unwrap()
            .matched_nodes
            .iter()
            .map(|n| {
                (
                    n.attributes["tenure_days"].as_f64().unwrap(),
                    n.attributes["interest_rate_percent"].as_f64().unwrap(),
                )
            })
            .collect()
    };
    assert_eq!(tenure_rate("active"), [(366.0, 8.65), (444.0, 8.65)]);
    assert_eq!(tenure_rate("inactive"), [(270.0, 8.25), (500.0, 9.0)]);
}

#[test]
fn kg3_within_bank_policy() {
    let kg3 = config().load_graphs().unwrap().get("KG3").unwrap();
    let bundle = kg3
        .query(&KGQuery::kind("policy").filter("scope", FilterOp::Eq, "within-bank"))
        .unwrap();
    assert_eq!(bundle.matched_nodes.len(), 1);
    let node = &bundle.matched_nodes[0];
    assert_eq!(node.attributes["rtgs_fee_percent"], Scalar::Number(1.0));
    assert_eq!(node.attributes["neft_fee_percent"], Scalar::Number(1.0));
}

#[test]
fn case_prompt_decomposes_and_plans_sequentially() {
    let orch = orchestrator();
    let p = prompt("XXX", CASE_PROMPT);
    let subs = decompose(&p, orch.catalog()).unwrap();
    let texts: Vec<&str> = subs.iter().map(|s| s.text_template()).collect();
    assert_eq!(
        texts,
        [
            "Fetch Customer Banking summary",
            "What are the active FD offered and its details + {R1}",
            "Banks policy for limits, charges and others + {R2}",
        ]
    );
    let plan = plan(&subs, p.context(), orch.rules(), orch.services()).unwrap();
    assert_eq!(plan.stages, vec![vec![1], vec![2], vec![3]]);
    let rules: Vec<&str> = plan.bindings.values().map(|b| b.rule.rule_id.as_str()).collect();
    assert_eq!(rules, ["Rule1", "Rule2", "Rule3"]);
}

#[tokio::test]
async fn golden_case_study_cold_then_warm() {
    let orch = orchestrator();
    let cache = cache();
    let p = prompt("XXX", CASE_PROMPT);

    let started = Instant::now();
    let cold = orch.handle(&p, Some(&cache), RetrievalMode::Rules).await.unwrap();
    assert!(started.elapsed() < Duration::from_secs(1));
    let texts: Vec<&str> = cold.parts.iter().map(|r| r.text.as_str()).collect();
    assert_eq!(texts, [R1_XXX, R2, R3]);
    assert_eq!(cold.final_text, format!("{R1_XXX}. {R2}. {R3}. {FINAL_RESULT}"));
    assert_eq!(cold.prompt_echo, CASE_PROMPT);
    assert_eq!(cold.trace.step_count, 4);
    assert_eq!(cold.trace.service_invocations(), 3);
    assert_eq!(cold.trace.kg_queries(), 3);
    assert_eq!(cold.trace.stage_count(), 3);
    assert!(cold.parts.iter().all(|r| !r.from_cache));

    let warm = orch.handle(&p, Some(&cache), RetrievalMode::Rules).await.unwrap();
    assert!(warm.parts.iter().all(|r| r.from_cache));
    assert_eq!(warm.trace.service_invocations(), 0);
    assert_eq!(warm.trace.kg_queries(), 0);
    assert_eq!(warm.trace.step_count, 3);
    assert_eq!(warm.final_text, cold.final_text);
    let warm_texts: Vec<&str> = warm.parts.iter().map(|r| r.text.as_str()).collect();
    assert_eq!(warm_texts, texts);
}

#[tokio::test]
async fn baseline_emulation_takes_seven_steps() {
    let orch = orchestrator();
    let p = prompt("XXX", CASE_PROMPT);
    let baseline = orch.handle_baseline(&p).await.unwrap();
    assert_eq!(baseline.trace.step_count, 7);
    assert_eq!(count_steps(&baseline.trace, StepMode::Baseline, &Default::default()), 7);
    assert_eq!(baseline.parts.len(), 3);
    // Whole-graph context cannot single out XXX's account or the active FDs.
    assert_ne!(baseline.parts[0].text, R1_XXX);
    assert_ne!(baseline.parts[1].text, R2);
}

#[tokio::test]
async fn balance_below_minimum_takes_other_conclusion() {
    let orch = orchestrator();
    let r = orch.handle(&prompt("YYY", CASE_PROMPT), None, RetrievalMode::Rules).await.unwrap();
    assert_eq!(r.parts[0].text, "Customer YYY has ₹45,000 in the saving account");
    assert!(r.final_text.ends_with(
        "Your balance is below the minimum FD deposit of ₹100,000. The daily limit is ₹100,000, with a 1% fee for NEFT/RTGS transfers."
    ));
}

#[tokio::test]
async fn single_intent_has_one_part_and_no_conclusion() {
    let orch = orchestrator();
    let r = orch.handle(&prompt("AAA", "What is my balance?"), None, RetrievalMode::Rules).await.unwrap();
    assert_eq!(r.parts.len(), 1);
    assert_eq!(r.final_text, "Customer AAA has ₹80,000 in the saving account.");
}

#[tokio::test]
async fn chained_text_reaches_later_sub_prompts() {
    let orch = orchestrator();
    let cache = cache();
    orch.handle(&prompt("XXX", CASE_PROMPT), Some(&cache), RetrievalMode::Rules)
        .await
        .unwrap();
    let keys: Vec<String> = cache.entries().iter().map(|e| e.key.normalized_text().to_string()).collect();
    assert!(keys.iter().any(|k| k.starts_with("what are the active fd offered and its details customer xxx has greater than")));
    assert!(keys.iter().any(|k| k.starts_with("banks policy for limits charges and others there are 2 fds offered")));
}

#[tokio::test]
async fn users_are_isolated_in_the_cache() {
    let orch = orchestrator();
    let cache = cache();
    let xxx = orch.handle(&prompt("XXX", "What is my balance?"), Some(&cache), RetrievalMode::Rules).await.unwrap();
    let yyy = orch.handle(&prompt("YYY", "What is my balance?"), Some(&cache), RetrievalMode::Rules).await.unwrap();
    assert!(!yyy.parts[0].from_cache);
    assert_ne!(xxx.final_text, yyy.final_text);
}

#[tokio::test]
async fn missing_attribute_means_no_rule() {
    let orch = orchestrator();
    let ctx = UserContext::new("XXX", "retail-customer", Default::default()).unwrap();
    let err = orch
        .handle(&Prompt::new(CASE_PROMPT, ctx).unwrap(), None, RetrievalMode::Rules)
        .await
        .unwrap_err();
    assert_eq!(err.code, "no-rule-matched");
    assert_eq!(err.stage, "plan");
}

#[tokio::test]
async fn out_of_domain_prompt() {
    let err = orchestrator()
        .handle(&prompt("XXX", "what is the weather"), None, RetrievalMode::Rules)
        .await
        .unwrap_err();
    assert_eq!(err.code, "no-intent-matched");
}

#[tokio::test]
async fn whole_domain_retrieval_loses_precision() {
    let orch = orchestrator();
    let r = orch.handle(&prompt("XXX", CASE_PROMPT), None, RetrievalMode::WholeDomain).await.unwrap();
    assert_ne!(r.parts[1].text, R2);
}
