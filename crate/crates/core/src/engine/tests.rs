use super::*;
use crate::agent_loop::parse_final_answer;
use crate::providers::mock::{ScriptedGenerator, ScriptedJudge};
use crate::providers::sim::gold_answer;
use crate::providers::{Role, SamplingParams};
use proptest::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

fn user_of(m: &[ChatMessage]) -> String {
    m.iter().find(|m| m.role == Role::User).map(|m| m.content.clone()).unwrap_or_default()
}

fn question_of(m: &[ChatMessage]) -> String {
    let u = user_of(m);
    let start = u.find("<question>\n").map(|i| i + 11).unwrap_or(0);
    let end = u.find("\n</question>").unwrap_or(u.len());
    u[start..end].to_string()
}

/// Refiner that appends one sentence and answers in one round.
fn appending_refiner() -> ScriptedGenerator {
    ScriptedGenerator::new("refiner", |m, _| {
        let v = extract_json_object(&question_of(m)).unwrap();
        let q = format!("{} Also consider one more constraint.", v["question"].as_str().unwrap());
        let out = serde_json::json!({"question": q, "answer": gold_answer(&q), "dimensions": ["knowledge_expansion", "bogus"]});
        Ok(format!("refined\nFinal Answer: {out}"))
    })
}

/// Solver that is right iff `rule(question)`.
fn rule_solver(name: &str, rule: impl Fn(&str) -> bool + Send + Sync + 'static) -> ScriptedGenerator {
    ScriptedGenerator::new(name, move |m, _| {
        let q = question_of(m);
        let a = if rule(&q) { gold_answer(&q) } else { "wrong".to_string() };
        Ok(format!("Final Answer: {a}"))
    })
}

fn models(lkp: ScriptedGenerator, mko: ScriptedGenerator) -> Models {
    Models {
        lkp: Arc::new(lkp),
        mko: Arc::new(mko),
        refiner: Arc::new(appending_refiner()),
        tools: Arc::new(RefusalStub),
        chunk_with_llm: false,
        ..Models::sim(0)
    }
}

fn engine(models: Models) -> Engine {
    Engine::new(EngineConfig::default(), models).unwrap().with_retry(RetryPolicy {
        max_retries: 2,
        base_delay_ms: 0,
        factor: 1.0,
    })
}

fn seed(question: &str) -> QaPair {
    QaPair {
        qa_id: seed_qa_id("u", question),
        question: question.into(),
        answer: gold_answer(question),
        lineage: Lineage {
            seed_unit: "a+b+c".into(),
            iteration: 0,
            parent: None,
        },
        dimension_tags: BTreeSet::new(),
    }
}

fn unit(ids: [&str; 3]) -> CompositeUnit {
    CompositeUnit {
        chunk_ids: ids.map(String::from),
        pairwise_sims: [0.9; 3],
    }
}

fn templated_seed_writer() -> ScriptedGenerator {
    ScriptedGenerator::new("seed-writer", |m, _| {
        let u = user_of(m);
        let h = crate::text::hash_u64(&u);
        Ok(format!("{{\"question\": \"What links item {h:x}?\", \"answer\": \"{}\"}}", h % 97))
    })
}

#[test]
fn seed_generation_is_deterministic_and_bound_to_unit() {
    let m = Models {
        generator: Arc::new(templated_seed_writer()),
        ..Models::sim(0)
    };
    let e = engine(m);
    let texts: HashMap<String, String> = ["a", "b", "c"].iter().map(|k| (k.to_string(), format!("text {k}"))).collect();
    let u = unit(["a", "b", "c"]);
    let r1 = e.generate_seed(&u, &texts).unwrap();
    let r2 = e.generate_seed(&u, &texts).unwrap();
    assert_eq!(r1, r2);
    let qa = r1.qa.unwrap();
    assert_eq!(qa.lineage.iteration, 0);
    assert_eq!(qa.lineage.seed_unit, "a+b+c");
    assert!(qa.lineage.parent.is_none());
    assert_eq!(r1.usage.llm_calls, 1);
}

#[test]
fn seed_prompt_includes_all_three_chunks() {
    let m = Models {
        generator: Arc::new(ScriptedGenerator::new("check", |m, _| {
            let u = user_of(m);
            assert!(u.contains("alpha") && u.contains("beta") && u.contains("gamma"));
            Ok("{\"question\": \"q?\", \"answer\": \"a\"}".into())
        })),
        ..Models::sim(0)
    };
    let texts: HashMap<String, String> =
        [("a", "alpha"), ("b", "beta"), ("c", "gamma")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    assert!(engine(m).generate_seed(&unit(["a", "b", "c"]), &texts).unwrap().qa.is_some());
}

#[test]
fn seed_generation_names_missing_chunk() {
    let e = engine(Models::sim(0));
    let texts: HashMap<String, String> = [("a".to_string(), "x".to_string())].into_iter().collect();
    match e.generate_seed(&unit(["a", "gone", "c"]), &texts) {
        Err(EngineError::MissingChunk(id)) => assert_eq!(id, "gone"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ten_units_ten_distinct_ids() {
    let m = Models {
        generator: Arc::new(templated_seed_writer()),
        ..Models::sim(0)
    };
    let e = engine(m);
    let mut texts = HashMap::new();
    let mut ids = BTreeSet::new();
    for i in 0..10 {
        let names = [format!("x{i}"), format!("y{i}"), format!("z{i}")];
        for n in &names {
            texts.insert(n.clone(), format!("content of {n}"));
        }
        let u = unit([names[0].as_str(), names[1].as_str(), names[2].as_str()]);
        ids.insert(e.generate_seed(&u, &texts).unwrap().qa.unwrap().qa_id);
    }
    assert_eq!(ids.len(), 10);
}

#[test]
fn unusable_seed_reply_skips_unit() {
    let m = Models {
        generator: Arc::new(ScriptedGenerator::new("junk", |_, _| Ok("no json here".into()))),
        ..Models::sim(0)
    };
    let texts: HashMap<String, String> = ["a", "b", "c"].iter().map(|k| (k.to_string(), "t".to_string())).collect();
    let r = engine(m).generate_seed(&unit(["a", "b", "c"]), &texts).unwrap();
    assert!(r.qa.is_none());
    assert!(r.error.is_some());
    assert_eq!(r.usage.llm_calls, 2);
}

#[test]
fn escalation_appends_and_links_lineage() {
    let e = engine(models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true)));
    let s = seed("What is the base fact?");
    let step = e.escalate_once(&s, 0).unwrap();
    assert!(step.child.question.len() > s.question.len());
    assert!(step.child.question.starts_with(&s.question));
    assert_eq!(step.child.lineage.iteration, 1);
    assert_eq!(step.child.lineage.parent.as_deref(), Some(s.qa_id.as_str()));
    assert_eq!(step.child.dimension_tags, [Dimension::KnowledgeExpansion].into_iter().collect());
}

#[test]
fn escalation_parse_failure_twice_is_step_error() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let m = Models {
        refiner: Arc::new(ScriptedGenerator::new("bad", move |_, _| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok("Final Answer: not json".into())
        })),
        ..models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true))
    };
    let s = seed("q?");
    let err = engine(m).escalate_once(&s, 0).unwrap_err();
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    assert_eq!(err.trajectories.len(), 2);
    assert!(err.reason.contains("unparseable"));
}

#[test]
fn solvable_probe_cases() {
    let e = engine(models(rule_solver("lkp", |_| true), rule_solver("mko", |_| false)));
    let s = seed("q?");
    assert!(e.is_solvable_by(Solver::Lkp, &s, 1).unwrap().solved());
    assert!(!e.is_solvable_by(Solver::Mko, &s, 1).unwrap().solved());

    let aborting = ScriptedGenerator::new("abort", |_, _| Err(ProviderError::Malformed("x".into())));
    let e = engine(models(aborting, rule_solver("mko", |_| true)));
    let p = e.is_solvable_by(Solver::Lkp, &s, 1).unwrap();
    assert!(p.trajectory.aborted);
    assert_eq!(p.outcome, ProbeOutcome::Incorrect);
}

#[test]
fn same_model_differs_only_by_tools() {
    let dual = ScriptedGenerator::new("dual", |m, _| {
        let sys = &m[0].content;
        let q = question_of(m);
        Ok(if sys.contains(crate::prompts::NO_TOOL_PROTOCOL) {
            "Final Answer: guess".to_string()
        } else {
            format!("Final Answer: {}", gold_answer(&q))
        })
    });
    let e = engine(models(dual.clone(), dual));
    let s = seed("dual?");
    assert!(!e.is_solvable_by(Solver::Lkp, &s, 3).unwrap().solved());
    assert!(e.is_solvable_by(Solver::Mko, &s, 3).unwrap().solved());
}

#[test]
fn frontier_when_seed_already_unsolvable() {
    let e = engine(models(rule_solver("lkp", |_| false), rule_solver("mko", |_| true)));
    let out = e.refine_until_frontier(&seed("hard?")).unwrap();
    assert_eq!(out.iterations, 0);
    assert_eq!(out.stop_reason, StopReason::LkpFailed);
    assert_eq!(out.frontier, seed("hard?"));
}

#[test]
fn frontier_capped_at_k_max() {
    let e = engine(models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true)));
    let out = e.refine_until_frontier(&seed("easy?")).unwrap();
    assert_eq!(out.iterations, 30);
    assert_eq!(out.stop_reason, StopReason::KMax);
    assert_eq!(out.chain.len(), 31);
    assert_eq!(out.lkp_probes.len(), 30);
}

#[test]
fn frontier_at_iteration_three() {
    let base = "Base question?";
    let threshold = base.len() + 3 * " Also consider one more constraint.".len();
    let e = engine(models(rule_solver("lkp", move |q| q.len() < threshold), rule_solver("mko", |_| true)));
    let out = e.refine_until_frontier(&seed(base)).unwrap();
    assert_eq!(out.iterations, 3);
    assert_eq!(out.stop_reason, StopReason::LkpFailed);
    let f = &out.frontier;
    assert_eq!(f.lineage.iteration, 3);
    // child-of-child-of-child
    let mut cur = f;
    for _ in 0..3 {
        let parent = cur.lineage.parent.as_ref().unwrap();
        cur = out.chain.iter().find(|q| &q.qa_id == parent).unwrap();
    }
    assert_eq!(cur.lineage.iteration, 0);
    assert_eq!(cur.qa_id, out.chain[0].qa_id);
}

#[test]
fn repeated_escalation_failure_quarantines() {
    let m = Models {
        refiner: Arc::new(ScriptedGenerator::new("bad", |_, _| Ok("Final Answer: nope".into()))),
        ..models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true))
    };
    let out = engine(m).refine_until_frontier(&seed("q?")).unwrap();
    assert_eq!(out.stop_reason, StopReason::Quarantined);
    assert_eq!(out.iterations, 0);
    assert_eq!(out.refine_trajectories.len(), 6);
    assert!(out.failure.unwrap().contains("3 times"));
}

#[test]
fn non_seed_rejected() {
    let e = engine(Models::sim(0));
    let mut q = seed("q?");
    q.lineage.iteration = 1;
    q.lineage.parent = Some("p".into());
    assert!(matches!(e.refine_until_frontier(&q), Err(EngineError::Precondition(_))));
}

#[test]
fn calibrate_pretrain_when_peer_solves() {
    let e = engine(models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true)));
    let v = e.calibrate(&seed("q?")).unwrap();
    assert_eq!(v.outcome, VerifyOutcome::Pretrain);
    assert!(v.mko_attempts.is_empty());
}

/// MKO right only on its second attempt; attempts are told apart by the
/// order in which they are made.
fn second_attempt_mko() -> (ScriptedGenerator, Arc<AtomicUsize>) {
    let n = Arc::new(AtomicUsize::new(0));
    let n2 = n.clone();
    let g = ScriptedGenerator::new("mko2", move |m, _| {
        let i = n2.fetch_add(1, Ordering::SeqCst);
        let q = question_of(m);
        Ok(format!("Final Answer: {}", if i == 1 { gold_answer(&q) } else { "no".into() }))
    });
    (g, n)
}

#[test]
fn bon_short_circuits_on_second_attempt() {
    let (mko, _) = second_attempt_mko();
    let e = engine(models(rule_solver("lkp", |_| false), mko));
    let v = e.calibrate(&seed("q?")).unwrap();
    assert_eq!(v.outcome, VerifyOutcome::Verified);
    assert_eq!(v.mko_attempts.len(), 2);

    let (mko, _) = second_attempt_mko();
    let mut e = engine(models(rule_solver("lkp", |_| false), mko));
    e.cfg.force_all_bon = true;
    let v = e.calibrate(&seed("q?")).unwrap();
    assert_eq!(v.outcome, VerifyOutcome::Verified);
    assert_eq!(v.mko_attempts.len(), 3);
}

#[test]
fn all_attempts_wrong_goes_to_human() {
    let e = engine(models(rule_solver("lkp", |_| false), rule_solver("mko", |_| false)));
    let v = e.calibrate(&seed("q?")).unwrap();
    assert_eq!(v.outcome, VerifyOutcome::Human);
    assert_eq!(v.mko_attempts.len(), 3);
    assert!(v.mko_attempts.iter().all(|a| a.outcome == ProbeOutcome::Incorrect));
}

#[test]
fn undecidable_judge_quarantines() {
    let judge = ScriptedJudge::new(|_, resp, gold| {
        if resp == gold {
            Err(ProviderError::JudgeParse {
                message: "missing 'correct:' field".into(),
                raw: "garbled".into(),
            })
        } else {
            Ok(ScriptedJudge::verdict(false))
        }
    });
    let m = Models {
        judge: Arc::new(judge),
        ..models(rule_solver("lkp", |_| false), rule_solver("mko", |_| true))
    };
    let v = engine(m).calibrate(&seed("q?")).unwrap();
    assert_eq!(v.outcome, VerifyOutcome::Quarantine);
    assert_eq!(v.mko_attempts.len(), 3);
    assert!(v.mko_attempts.iter().all(|a| a.outcome == ProbeOutcome::Indeterminate));
}

#[test]
fn judge_is_retried_before_giving_up() {
    let n = Arc::new(AtomicUsize::new(0));
    let n2 = n.clone();
    let judge = ScriptedJudge::new(move |_, _, _| {
        if n2.fetch_add(1, Ordering::SeqCst) == 0 {
            Err(ProviderError::Transport("reset".into()))
        } else {
            Ok(ScriptedJudge::verdict(true))
        }
    });
    let m = Models {
        judge: Arc::new(judge),
        ..models(rule_solver("lkp", |_| true), rule_solver("mko", |_| true))
    };
    let p = engine(m).is_solvable_by(Solver::Lkp, &seed("q?"), 0).unwrap();
    assert!(p.solved());
    assert_eq!(n.load(Ordering::SeqCst), 2);
}

#[test]
fn admission_first_and_duplicate() {
    let e = engine(Models::sim(0));
    let mut store = ZpdStore::default();
    let a = e.admit_with_dedup(&seed("what year was the bridge opened"), &mut store).unwrap();
    assert_eq!(a.label, PartitionLabel::Zpd);
    assert_eq!(a.max_sim, None);
    let b = e.admit_with_dedup(&seed("what year was the bridge opened"), &mut store).unwrap();
    assert_eq!(b.label, PartitionLabel::RejectedDuplicate);
    assert_eq!(b.max_sim, Some(1.0));
    assert_eq!(store.len(), 1);
}

fn words(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn admission_boundary_is_inclusive() {
    let e = engine(Models::sim(0));
    let reference = words("w", 100);
    // 69 and 70 shared words out of 100 distinct on each side.
    let q69 = format!("{} {}", words("w", 69), words("p", 31));
    let q70 = format!("{} {}", words("w", 70), words("r", 30));
    assert_eq!(crate::providers::mock::overlap_coefficient(&q69, &reference), 0.69);
    assert_eq!(crate::providers::mock::overlap_coefficient(&q70, &reference), 0.70);

    let mut store = ZpdStore::default();
    e.admit_with_dedup(&seed(&reference), &mut store).unwrap();
    let mut s1 = store.clone();
    assert_eq!(e.admit_with_dedup(&seed(&q69), &mut s1).unwrap().label, PartitionLabel::Zpd);
    let mut s2 = store.clone();
    assert_eq!(e.admit_with_dedup(&seed(&q70), &mut s2).unwrap().label, PartitionLabel::RejectedDuplicate);
    assert_eq!(s2, store);
}

#[test]
fn rerank_failure_surfaces_without_touching_store() {
    struct Broken;
    impl Reranker for Broken {
        fn score(&self, _: &str, _: &str) -> Result<f64, ProviderError> {
            Err(ProviderError::Transport("down".into()))
        }
        fn identity(&self) -> String {
            "broken".into()
        }
    }
    let e = engine(Models {
        reranker: Arc::new(Broken),
        ..Models::sim(0)
    });
    let mut store = ZpdStore::default();
    e.admit_with_dedup(&seed("a b c"), &mut store).unwrap();
    assert!(e.admit_with_dedup(&seed("d e f"), &mut store).is_err());
    assert_eq!(store.len(), 1);
}

#[test]
fn config_validation() {
    let mut c = EngineConfig::default();
    assert!(c.validate().is_ok());
    c.lkp.tools_enabled = true;
    assert!(c.validate().is_err());
    let c = EngineConfig {
        epsilon: 1.5,
        ..EngineConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn sim_probe_matches_sim_rules() {
    let e = engine(Models::sim(0));
    let q = seed("Which single detail connects the accounts beginning \"x\"?");
    let p = e.is_solvable_by(Solver::Lkp, &q, 11).unwrap();
    let answer = parse_final_answer(&p.trajectory.rounds[0].report).unwrap();
    assert_eq!(p.solved(), answer == q.answer);
    let _ = SamplingParams::default();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sequential_admission_is_sound(seed_v in 0u64..10_000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_v);
        let e = engine(Models::sim(0));
        let vocab: Vec<String> = (0..25).map(|i| format!("t{i}")).collect();
        let mut store = ZpdStore::default();
        for i in 0..40 {
            let n = rng.gen_range(3..8);
            let q: Vec<&str> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
            let mut qa = self::seed(&q.join(" "));
            qa.qa_id = format!("c{i}");
            e.admit_with_dedup(&qa, &mut store).unwrap();
        }
        for (j, later) in store.entries.iter().enumerate() {
            for earlier in &store.entries[..j] {
                prop_assert!(crate::providers::mock::overlap_coefficient(&later.question, &earlier.question) < 0.7);
            }
        }
    }
}
