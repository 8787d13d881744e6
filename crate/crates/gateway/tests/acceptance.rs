//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use conductor_core::cache::{similarity, CacheKey, CachePolicy, ManualClock, SemanticCache, TokenJaccard};
use conductor_core::config::load_config;
use conductor_core::graph::{
    AttributeFilter, Direction, FilterOp, GraphDocument, KGEdge, KGNode, KGQuery, KnowledgeGraph, NodeFilter,
    RelationConstraint,
};
use conductor_core::model::{Prompt, Scalar, ServiceResponse, SubPrompt, SubPromptId, UserContext};
use conductor_core::orchestrator::{layer, Orchestrator, RetrievalMode};
use conductor_gateway::bench::{load_fixtures, normalized_match, run_bench, BenchQuery, Scenario};
use conductor_gateway::platform::{Platform, QueryRequest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASE_PROMPT: &str =
    "Transferring funds from my savings account to a Fixed Deposit, what are the limits and applicable fees?";
const R1: &str = "Customer XXX has greater than ₹100,000 in his saving account";
const R2: &str = "There are 2 FDs offered with a minimum deposit amount of ₹100,000 for 366 days and 444 days with an interest rate of 8.65%";
const R3: &str = "Charges for transfer of amount from Saving account to FD is 1% for NEFT/RTGS";
const FINAL_RESULT: &str = "You have sufficient balance for the FD transfer. The daily limit is ₹100,000, with a 1% fee for NEFT/RTGS transfers. Proceed with the transfer, and the applicable charges will be automatically deducted.";
const LOAN_ANSWER: &str = "There are 2 loans available: home loan and personal loan, with interest from 8.4%.";

type Outcome = Result<String, String>;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn banking() -> Orchestrator {
    load_config(fixture("banking/platform.toml")).unwrap().build_orchestrator().unwrap()
}

fn prompt(user: &str, text: &str) -> Prompt {
    let ctx = UserContext::new(user, "retail-customer", [("account-type".to_string(), Scalar::from("saving"))].into()).unwrap();
    Prompt::new(text, ctx).unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

async fn golden_end_to_end() -> Outcome {
    let orch = banking();
    let started = Instant::now();
    let r = orch.handle(&prompt("XXX", CASE_PROMPT), None, RetrievalMode::Rules).await.map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let texts: Vec<&str> = r.parts.iter().map(|p| p.text.as_str()).collect();
    for (got, want) in texts.iter().zip([R1, R2, R3]) {
        check(normalized_match(got, want), || format!("part `{got}` != `{want}`"))?;
    }
    check(texts.len() == 3, || format!("{} parts", texts.len()))?;
    for needle in ["sufficient balance", "₹100,000", "1%"] {
        check(r.final_text.contains(needle), || format!("final text lacks `{needle}`"))?;
    }
    check(r.final_text.ends_with(FINAL_RESULT), || format!("final text `{}`", r.final_text))?;
    check(elapsed < Duration::from_secs(1), || format!("cold run took {elapsed:?}"))?;
    Ok(format!("R1-R3 and final result match, cold run {:.1} ms", elapsed.as_secs_f64() * 1000.0))
}

async fn step_counts() -> Outcome {
    let orch = banking();
    let p = prompt("XXX", CASE_PROMPT);
    let cache = SemanticCache::new(CachePolicy::default());
    let baseline = orch.handle_baseline(&p).await.map_err(|e| e.to_string())?.trace.step_count;
    let cold = orch.handle(&p, Some(&cache), RetrievalMode::Rules).await.map_err(|e| e.to_string())?.trace.step_count;
    let warm = orch.handle(&p, Some(&cache), RetrievalMode::Rules).await.map_err(|e| e.to_string())?.trace.step_count;
    check((baseline, cold, warm) == (7, 4, 3), || format!("baseline {baseline}, cold {cold}, warm {warm}"))?;
    Ok("baseline 7, cold 4, warm 3".into())
}

async fn caching_claim(queries: &[BenchQuery]) -> Outcome {
    let orch = banking();
    let policy = CachePolicy::default();
    let (mut baseline, mut cached, mut warm_all) = (Vec::new(), Vec::new(), Vec::new());
    let mut worst_reduction = f64::MAX;
    for (i, q) in queries.iter().enumerate() {
        let single = std::slice::from_ref(q);
        let full = run_bench(&orch, Scenario::CacheAndRules, single, 2, policy).await.map_err(|e| e.to_string())?;
        let cold = full.outcome(0, 0).unwrap().latency_ms;
        let warm = full.outcome(0, 1).unwrap().latency_ms;
        let reduction = 1.0 - warm / cold;
        check(reduction > 0.8, || format!("query {i}: cold {cold:.2} ms, warm {warm:.2} ms"))?;
        check(warm < 10.0, || format!("query {i}: warm {warm:.2} ms"))?;
        worst_reduction = worst_reduction.min(reduction);
        warm_all.push(warm);
        let c = run_bench(&orch, Scenario::Cache, single, 2, policy).await.map_err(|e| e.to_string())?;
        cached.push(c.mean_latency_ms);
        let b = run_bench(&orch, Scenario::Baseline, single, 1, policy).await.map_err(|e| e.to_string())?;
        baseline.push(b.mean_latency_ms);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, c, w) = (mean(&baseline), mean(&cached), mean(&warm_all));
    check(b > c && c > w, || format!("ordering broken: baseline {b:.2}, cache {c:.2}, warm {w:.2}"))?;
    Ok(format!(
        "{} queries, min reduction {:.1}%, max warm {:.2} ms; baseline {b:.1} > cache {c:.1} > warm {w:.2} ms",
        queries.len(),
        worst_reduction * 100.0,
        warm_all.iter().copied().fold(0.0, f64::max)
    ))
}

async fn accuracy(queries: &[BenchQuery]) -> Outcome {
    check(queries.len() >= 20, || format!("only {} fixture queries", queries.len()))?;
    let orch = banking();
    let mut acc = BTreeMap::new();
    for scenario in Scenario::ALL {
        let report = run_bench(&orch, scenario, queries, 2, CachePolicy::default()).await.map_err(|e| e.to_string())?;
        acc.insert(scenario, report.accuracy);
    }
    let (b, c, f) = (acc[&Scenario::Baseline], acc[&Scenario::Cache], acc[&Scenario::CacheAndRules]);
    check(f == 1.0, || format!("cache_and_rules accuracy {f}"))?;
    check(b < f, || format!("baseline {b} not below full {f}"))?;
    check(b <= c && c <= f, || format!("not monotone: {b} / {c} / {f}"))?;
    Ok(format!(
        "{} queries: baseline {:.1}%, cache {:.1}%, cache_and_rules {:.1}%",
        queries.len(),
        b * 100.0,
        c * 100.0,
        f * 100.0
    ))
}

fn response(text: String) -> ServiceResponse {
    ServiceResponse::new(1, text, BTreeMap::new(), "svc", Duration::ZERO).unwrap()
}

/// Replays random operations against the cache and a plain LRU list.
fn cache_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let capacity = 16;
    let policy = CachePolicy::new(capacity, 1.0, None).unwrap();
    let cache = SemanticCache::with_parts(policy, Box::new(TokenJaccard), Arc::new(ManualClock::new()));
    let contexts = ["ctx-a", "ctx-b", "ctx-c"];
    // Most recently used at the back.
    let mut model: VecDeque<((String, &str), String)> = VecDeque::new();
    let (mut hits, mut evictions) = (0, 0);

    for op in 0..10_000 {
        let key_text = format!("key{}", rng.random_range(0..40));
        let ctx = contexts[rng.random_range(0..contexts.len())];
        let key = CacheKey::new(&key_text, ctx);
        let id = (key_text.clone(), ctx);
        if rng.random_bool(0.5) {
            let value = format!("value {op}");
            cache.put(key.clone(), response(value.clone()));
            model.retain(|(k, _)| k != &id);
            model.push_back((id.clone(), value.clone()));
            if model.len() > capacity {
                model.pop_front();
                evictions += 1;
            }
            let read = cache.get(&key).map(|r| r.text);
            check(read.as_deref() == Some(value.as_str()), || format!("op {op}: read-your-write failed"))?;
            let pos = model.iter().position(|(k, _)| k == &id).unwrap();
            let entry = model.remove(pos).unwrap();
            model.push_back(entry);
        } else {
            let got = cache.get(&key);
            let want = model.iter().position(|(k, _)| k == &id);
            match (got, want) {
                (Some(r), Some(pos)) => {
                    check(r.text == model[pos].1, || format!("op {op}: stale or foreign value"))?;
                    let entry = model.remove(pos).unwrap();
                    model.push_back(entry);
                    hits += 1;
                }
                (None, None) => {}
                (got, want) => return Err(format!("op {op}: cache {:?} vs model {:?}", got.map(|r| r.text), want)),
            }
        }
        check(cache.len() <= capacity, || format!("op {op}: size {} over capacity", cache.len()))?;
        if op % 97 == 0 {
            let order: Vec<(String, String)> = cache
                .entries()
                .into_iter()
                .map(|e| (e.key.normalized_text().to_string(), e.key.context_fingerprint().to_string()))
                .collect();
            let expected: Vec<(String, String)> = model.iter().map(|((t, c), _)| (t.clone(), c.to_string())).collect();
            check(order == expected, || format!("op {op}: LRU order differs"))?;
        }
    }

    let stats = cache.stats();
    check(stats.evictions == evictions, || format!("{} evictions, model {evictions}", stats.evictions))?;

    let vocab = ["fd", "balance", "limit", "fee", "saving", "account", "transfer", "rate"];
    for pair in 0..1_000 {
        let words = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            let n = rng.random_range(0..6);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect()
        };
        let (wa, wb) = (words(&mut rng), words(&mut rng));
        let same_ctx = rng.random_bool(0.8);
        let a = CacheKey::new(&wa.join(" "), "ctx");
        let b = CacheKey::new(&wb.join(" "), if same_ctx { "ctx" } else { "other" });
        let (sa, sb): (BTreeSet<&str>, BTreeSet<&str>) = (wa.iter().copied().collect(), wb.iter().copied().collect());
        let union = sa.union(&sb).count();
        let oracle = if !same_ctx {
            0.0
        } else if union == 0 {
            1.0
        } else {
            sa.intersection(&sb).count() as f64 / union as f64
        };
        let s = similarity(&a, &b);
        check((s - oracle).abs() < 1e-12, || format!("pair {pair}: {s} vs oracle {oracle}"))?;
        check(s == similarity(&b, &a), || format!("pair {pair}: asymmetric"))?;
        check((0.0..=1.0).contains(&s), || format!("pair {pair}: out of bounds"))?;
        check(similarity(&a, &a) == 1.0, || format!("pair {pair}: not reflexive"))?;
    }
    Ok(format!(
        "10000 ops match the reference model ({hits} hits, {evictions} evictions); 1000 similarity pairs"
    ))
}

const KINDS: [&str; 3] = ["k0", "k1", "k2"];
const RELATIONS: [&str; 2] = ["r0", "r1"];
const WORDS: [&str; 4] = ["x", "y", "xy", "yx"];

fn random_scalar(rng: &mut ChaCha8Rng) -> Scalar {
    match rng.random_range(0..3) {
        0 => Scalar::Number(f64::from(rng.random_range(0..10))),
        1 => Scalar::from(WORDS[rng.random_range(0..WORDS.len())]),
        _ => Scalar::Bool(rng.random_bool(0.5)),
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> GraphDocument {
    let n = rng.random_range(1..=200);
    let nodes: Vec<KGNode> = (0..n)
        .map(|i| {
            let mut attributes = BTreeMap::new();
            for key in ["a", "b", "c"] {
                if rng.random_bool(0.7) {
                    attributes.insert(key.to_string(), random_scalar(rng));
                }
            }
            KGNode {
                node_id: format!("n{i:03}"),
                kind: KINDS[rng.random_range(0..KINDS.len())].into(),
                attributes,
            }
        })
        .collect();
    let edges = (0..rng.random_range(0..n * 2))
        .map(|_| KGEdge {
            from: format!("n{:03}", rng.random_range(0..n)),
            to: format!("n{:03}", rng.random_range(0..n)),
            relation: RELATIONS[rng.random_range(0..RELATIONS.len())].into(),
        })
        .collect();
    GraphDocument {
        hierarchy_relations: Some(Vec::new()),
        nodes,
        edges,
        facts: Vec::new(),
    }
}

fn random_filter(rng: &mut ChaCha8Rng) -> AttributeFilter {
    let op = [FilterOp::Eq, FilterOp::Lt, FilterOp::Gt, FilterOp::Contains][rng.random_range(0..4)];
    AttributeFilter::new(["a", "b", "c"][rng.random_range(0..3)], op, random_scalar(rng))
}

fn random_query(rng: &mut ChaCha8Rng) -> KGQuery {
    let mut q = KGQuery {
        node_kind: rng.random_bool(0.7).then(|| KINDS[rng.random_range(0..KINDS.len())].to_string()),
        attribute_filters: (0..rng.random_range(0..3)).map(|_| random_filter(rng)).collect(),
        relation_constraints: (0..rng.random_range(0..3))
            .map(|_| RelationConstraint {
                relation: RELATIONS[rng.random_range(0..RELATIONS.len())].into(),
                direction: [Direction::Out, Direction::In, Direction::Any][rng.random_range(0..3)],
                related: NodeFilter {
                    kind: rng.random_bool(0.5).then(|| KINDS[rng.random_range(0..KINDS.len())].to_string()),
                    attribute_filters: (0..rng.random_range(0..2)).map(|_| random_filter(rng)).collect(),
                },
            })
            .collect(),
        limit: rng.random_bool(0.2).then(|| rng.random_range(1..20)),
    };
    if q.node_kind.is_none() && q.attribute_filters.is_empty() && q.relation_constraints.is_empty() {
        q.node_kind = Some(KINDS[0].into());
    }
    q
}

fn oracle_filter(f: &AttributeFilter, node: &KGNode) -> bool {
    match (node.attributes.get(&f.key), &f.value) {
        (None, _) => false,
        (Some(a), b) => match f.op {
            FilterOp::Eq => a == b,
            FilterOp::Lt | FilterOp::Gt => match (a, b) {
                (Scalar::Number(x), Scalar::Number(y)) => {
                    if f.op == FilterOp::Lt {
                        x < y
                    } else {
                        x > y
                    }
                }
                _ => false,
            },
            FilterOp::Contains => match (a, b) {
                (Scalar::Text(x), Scalar::Text(y)) => x.contains(y.as_str()),
                _ => false,
            },
        },
    }
}

fn oracle_node(filter: &NodeFilter, node: &KGNode) -> bool {
    filter.kind.as_ref().is_none_or(|k| *k == node.kind) && filter.attribute_filters.iter().all(|f| oracle_filter(f, node))
}

/// Scans every node and every edge, no indexes.
fn brute_force(doc: &GraphDocument, q: &KGQuery) -> Vec<String> {
    let by_id: HashMap<&str, &KGNode> = doc.nodes.iter().map(|n| (n.node_id.as_str(), n)).collect();
    let mut ids: Vec<String> = doc
        .nodes
        .iter()
        .filter(|n| q.node_kind.as_ref().is_none_or(|k| *k == n.kind))
        .filter(|n| q.attribute_filters.iter().all(|f| oracle_filter(f, n)))
        .filter(|n| {
            q.relation_constraints.iter().all(|c| {
                doc.edges.iter().any(|e| {
                    e.relation == c.relation
                        && ((e.from == n.node_id
                            && c.direction != Direction::In
                            && oracle_node(&c.related, by_id[e.to.as_str()]))
                            || (e.to == n.node_id
                                && c.direction != Direction::Out
                                && oracle_node(&c.related, by_id[e.from.as_str()])))
                })
            })
        })
        .map(|n| n.node_id.clone())
        .collect();
    ids.sort();
    if let Some(limit) = q.limit {
        ids.truncate(limit);
    }
    ids
}

fn graph_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut non_empty = 0;
    for i in 0..100 {
        let doc = random_graph(&mut rng);
        let graph = KnowledgeGraph::from_document("G", doc.clone(), None).map_err(|e| e.to_string())?;
        let q = random_query(&mut rng);
        let got: Vec<String> = graph.query(&q).map_err(|e| e.to_string())?.matched_nodes.into_iter().map(|n| n.node_id).collect();
        let want = brute_force(&doc, &q);
        check(got == want, || format!("query {i}: {q:?}\n got {got:?}\n want {want:?}"))?;
        non_empty += usize::from(!want.is_empty());
    }
    Ok(format!("100 random queries equal brute-force scans ({non_empty} non-empty)"))
}

fn random_decomposition(rng: &mut ChaCha8Rng) -> Vec<SubPrompt> {
    let n = rng.random_range(1..=12);
    let mut ids: Vec<SubPromptId> = (1..=40).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    let p = rng.random_range(0.0..0.6);
    let mut subs = Vec::with_capacity(n);
    for i in 0..n {
        let deps: BTreeSet<SubPromptId> = (0..i).filter(|_| rng.random_bool(p)).map(|j| ids[j]).collect();
        subs.push(SubPrompt::new(ids[i], format!("intent-{i}"), format!("sub {i}"), deps, "d").unwrap());
    }
    subs.shuffle(rng);
    subs
}

fn depth(id: SubPromptId, by_id: &HashMap<SubPromptId, &SubPrompt>, memo: &mut HashMap<SubPromptId, usize>) -> usize {
    if let Some(d) = memo.get(&id) {
        return *d;
    }
    let d = by_id[&id].depends_on().iter().map(|dep| depth(*dep, by_id, memo) + 1).max().unwrap_or(0);
    memo.insert(id, d);
    d
}

async fn plan_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let subs = random_decomposition(&mut rng);
        let stages = layer(&subs).map_err(|e| e.to_string())?;
        let stage_of: HashMap<SubPromptId, usize> =
            stages.iter().enumerate().flat_map(|(s, ids)| ids.iter().map(move |id| (*id, s))).collect();
        check(stage_of.len() == subs.len(), || format!("case {case}: not every sub-prompt staged once"))?;
        for sub in &subs {
            for dep in sub.depends_on() {
                check(stage_of[dep] < stage_of[&sub.id()], || format!("case {case}: {dep} not before {}", sub.id()))?;
            }
        }
        let by_id: HashMap<SubPromptId, &SubPrompt> = subs.iter().map(|s| (s.id(), s)).collect();
        let mut memo = HashMap::new();
        let longest = subs.iter().map(|s| depth(s.id(), &by_id, &mut memo)).max().unwrap_or(0) + 1;
        check(stages.len() == longest, || format!("case {case}: {} stages, oracle {longest}", stages.len()))?;
    }

    let cfg = load_config(fixture("extension/platform.toml")).map_err(|e| e.to_string())?;
    let p = prompt(
        "XXX",
        "Transferring funds from my savings account to a Fixed Deposit, what are the limits, fees and loans?",
    );
    let mut reference: Option<String> = None;
    for run in 0..10 {
        let mut cfg = cfg.clone();
        for svc in &mut cfg.services {
            svc.simulated_latency_ms = Some(rng.random_range(0..30));
        }
        let orch = cfg.build_orchestrator().map_err(|e| e.to_string())?;
        let json = orch.handle(&p, None, RetrievalMode::Rules).await.map_err(|e| e.to_string())?.canonical_json();
        match &reference {
            None => reference = Some(json),
            Some(r) => check(*r == json, || format!("run {run} differs"))?,
        }
    }
    Ok("500 random DAGs staged minimally; 10 runs with random service delays byte-identical".into())
}

async fn runtime_extension(queries: &[BenchQuery]) -> Outcome {
    let platform = Platform::load(fixture("banking/platform.toml")).map_err(|e| format!("{e}"))?;
    let request = |user: &str, text: &str, attributes: BTreeMap<String, Scalar>| QueryRequest {
        user_id: user.into(),
        role: "retail-customer".into(),
        attributes,
        prompt: text.into(),
        verbose: false,
    };
    let saving: BTreeMap<String, Scalar> = [("account-type".to_string(), Scalar::from("saving"))].into();
    let loans = request("XXX", "Which loans can I get?", saving.clone());
    let before = platform.handle_query(&loans).await;
    check(
        before.as_ref().is_err_and(|e| e.code == "no-intent-matched"),
        || format!("loan query answered before reload: {before:?}"),
    )?;

    let summary = platform.reload(Some(&fixture("extension/platform.toml"))).map_err(|e| e.to_string())?;
    check(summary.kgs.len() == 4 && summary.services.len() == 4, || format!("{summary:?}"))?;
    check(summary.intents.len() == 4 && summary.rules.len() == 4, || format!("{summary:?}"))?;
    let answer = platform.handle_query(&loans).await.map_err(|e| format!("{e:?}"))?;
    check(answer.final_text == LOAN_ANSWER, || format!("loan answer `{}`", answer.final_text))?;

    for (i, q) in queries.iter().enumerate() {
        let c = &q.user_context;
        let r = platform
            .handle_query(&request(&c.user_id, &q.prompt, c.attributes.clone()))
            .await
            .map_err(|e| format!("query {i}: {e:?}"))?;
        let golden = q.golden_final_text.as_deref().unwrap_or_default();
        check(normalized_match(&r.final_text, golden), || format!("query {i}: `{}`", r.final_text))?;
    }
    Ok(format!("reload to {} answers the loan query; {} fixtures still pass", summary.version, queries.len()))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let queries = load_fixtures(fixture("banking/bench.toml")).expect("bench fixtures");
    let results: Vec<(&str, Outcome)> = vec![
        ("golden end-to-end", rt.block_on(golden_end_to_end())),
        ("step counts", rt.block_on(step_counts())),
        ("caching latency", rt.block_on(caching_claim(&queries))),
        ("accuracy ordering", rt.block_on(accuracy(&queries))),
        ("cache properties", cache_properties()),
        ("graph oracle", graph_oracle()),
        ("plan properties", rt.block_on(plan_properties())),
        ("runtime extension", rt.block_on(runtime_extension(&queries))),
    ];
    let mut failed = false;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(why) => {
                failed = true;
                println!("criterion {} ({name}): FAIL - {why}", i + 1);
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
