use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentvae::corpus::{generate_corpus, GrammarSpec, DEFAULT_MAX_LEN};
use sentvae::evaldis::{
    aggregate_influence, diff_external, diff_statistics, parse_roles, read_external_couples, run_influence_experiment,
    summarize, top_influencers, AlterPayload, DiffRecord, Metric, OieRole, ParseStatus, WiredGenerator, DEFAULT_WIRING,
};
use sentvae::evaldis::wired_decoder_check;
use sentvae::manipulate::LatentAssignment;
use sentvae::Error;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn labels(items: &[&str]) -> AlterPayload {
    AlterPayload::Labels(items.iter().map(|s| s.to_string()).collect())
}

fn diff(a: &str, b: &str) -> DiffRecord {
    let spec = GrammarSpec::default_grammar();
    let (a, b) = (words(a), words(b));
    diff_statistics(&parse_roles(&a, &spec), &parse_roles(&b, &spec), &a, &b)
}

#[test]
fn transitive_sentence_parses_into_roles() {
    let spec = GrammarSpec::default_grammar();
    let p = parse_roles(&words("a dog is chasing a ball"), &spec);
    assert_eq!(p.status, ParseStatus::Parsed);
    assert_eq!(p.root_label.as_deref(), Some("VERB-TRANS"));
    assert!(p.root_children.is_superset(&set(&["nsubj", "aux", "dobj"])));
    assert_eq!(p.all_labels, ["det", "nsubj", "aux", "root", "det", "dobj"]);
    let spans: BTreeMap<OieRole, (usize, usize)> =
        [(OieRole::Arg0, (0, 2)), (OieRole::V, (2, 4)), (OieRole::Arg1, (4, 6))].into_iter().collect();
    assert_eq!(p.role_spans, spans);
}

#[test]
fn prepositional_phrase_is_arg2() {
    let spec = GrammarSpec::default_grammar();
    let p = parse_roles(&words("the cat is sleeping in the park"), &spec);
    assert!(p.is_parsed());
    assert_eq!(p.role_spans.get(&OieRole::Arg2), Some(&(4, 7)));
    assert_eq!(p.all_labels, ["det", "nsubj", "aux", "root", "prep", "det", "pobj"]);
    assert!(p.root_children.contains("prep"));
}

#[test]
fn unknown_words_and_word_salad_are_unparsed() {
    let spec = GrammarSpec::default_grammar();
    for s in ["a dog is chasing a zeppelin", "", "dog a is chasing", "a dog is", "a dog is chasing a ball ball"] {
        let p = parse_roles(&words(s), &spec);
        assert_eq!(p.status, ParseStatus::Unparsed, "{s:?}");
        assert!(p.role_spans.is_empty() && p.all_labels.is_empty());
    }
}

#[test]
fn every_generated_sentence_parses_back_to_its_annotation() {
    let spec = GrammarSpec::default_grammar();
    let corpus = generate_corpus(&spec, 5000, 3, DEFAULT_MAX_LEN).unwrap();
    for s in &corpus {
        let p = parse_roles(&s.tokens, &spec);
        assert!(p.is_parsed(), "{}", s.text());
        let want: BTreeMap<OieRole, (usize, usize)> = s
            .role_spans
            .iter()
            .filter_map(|(&r, &span)| OieRole::from_role(r).map(|o| (o, span)))
            .collect();
        assert_eq!(p.role_spans, want, "{}", s.text());
    }
}

#[test]
fn swapped_subject_alters_only_arg0() {
    let r = diff("a dog is chasing a ball", "a cat is chasing a ball");
    assert_eq!(r.dep_alter, labels(&["nsubj"]));
    assert_eq!(r.oie_alter, labels(&["ARG0"]));
    assert!(r.root_dep_appear.is_empty() && r.dep_appear.is_empty() && r.oie_appear.is_empty());
    assert!(!r.structure_broken);
}

#[test]
fn identical_sentences_give_empty_diffs() {
    let r = diff("the boy is reading a book", "the boy is reading a book");
    assert_eq!(r.dep_alter, labels(&[]));
    assert_eq!(r.oie_alter, labels(&[]));
    assert!(r.root_dep_appear.is_empty() && r.dep_appear.is_empty() && r.oie_appear.is_empty());
}

#[test]
fn different_templates_abstain_from_alter_metrics() {
    let r = diff("a dog is chasing a ball", "a dog is running");
    assert!(r.dep_alter.is_abstain());
    assert!(r.oie_alter.is_abstain());
    assert!(r.dep_appear.is_superset(&set(&["dobj"])));
    assert!(r.oie_appear.is_superset(&set(&["ARG1"])));
    assert!(r.root_dep_appear.contains("dobj"));

    // Equal lengths, different predicate structure.
    let r = diff("a dog is running in the park", "a big dog is chasing a ball");
    assert!(!r.dep_alter.is_abstain());
    assert!(r.oie_alter.is_abstain());
    assert_eq!(r.oie_appear, set(&["ARG1", "ARG2"]));

    // Same structure, different lengths.
    let r = diff("a dog is chasing a ball", "a big dog is chasing a ball");
    assert!(r.dep_alter.is_abstain());
    assert_eq!(r.oie_alter, labels(&["ARG0"]));
    assert_eq!(r.dep_appear, set(&["amod"]));
}

#[test]
fn appear_sets_are_symmetric() {
    let spec = GrammarSpec::default_grammar();
    let corpus = generate_corpus(&spec, 60, 9, DEFAULT_MAX_LEN).unwrap();
    for pair in corpus.windows(2) {
        let (a, b) = (pair[0].text(), pair[1].text());
        let (ab, ba) = (diff(&a, &b), diff(&b, &a));
        assert_eq!(ab.root_dep_appear, ba.root_dep_appear);
        assert_eq!(ab.dep_appear, ba.dep_appear);
        assert_eq!(ab.oie_appear, ba.oie_appear);
        assert_eq!(ab.dep_alter.is_abstain(), ba.dep_alter.is_abstain());
    }
}

#[test]
fn unparsed_side_marks_structure_broken() {
    let r = diff("a dog is chasing a ball", "ball ball ball");
    assert!(r.structure_broken);
    assert!(r.dep_alter.is_abstain() && r.oie_alter.is_abstain());
    assert!(r.root_dep_appear.is_empty() && r.dep_appear.is_empty() && r.oie_appear.is_empty());
}

fn record(lv: usize, oie: AlterPayload, dep: AlterPayload) -> DiffRecord {
    DiffRecord {
        couple_id: 0,
        lv_index: lv,
        root_dep_appear: BTreeSet::new(),
        dep_appear: BTreeSet::new(),
        oie_appear: BTreeSet::new(),
        dep_alter: dep,
        oie_alter: oie,
        structure_broken: false,
        original: String::new(),
        modified: String::new(),
    }
}

#[test]
fn constructed_records_aggregate_exactly() {
    let mut records = Vec::new();
    for lv in 0..6 {
        for _ in 0..10 {
            let oie = if lv == 3 { labels(&["ARG0"]) } else { labels(&[]) };
            records.push(record(lv, oie, AlterPayload::ABSTAIN));
        }
    }
    let ms = aggregate_influence(&records, 6);
    assert_eq!(ms.len(), 5);
    let oie = ms.iter().find(|m| m.metric == Metric::OieAlter).unwrap();
    for lv in 0..6 {
        assert_eq!(oie.trials[lv], 10);
        assert_eq!(oie.valid[lv], 10);
        for (li, l) in oie.labels.iter().enumerate() {
            let want = if lv == 3 && l == "ARG0" { 1.0 } else { 0.0 };
            assert_eq!(oie.probability(lv, li), want);
        }
    }
    let top = top_influencers(&ms);
    let arg0 = top.iter().find(|t| t.metric == Metric::OieAlter && t.label == "ARG0").unwrap();
    assert_eq!((arg0.lv, arg0.probability), (3, 1.0));
    // Ties at zero go to LV 0.
    let v = top.iter().find(|t| t.metric == Metric::OieAlter && t.label == "V").unwrap();
    assert_eq!((v.lv, v.probability), (0, 0.0));

    let dep = ms.iter().find(|m| m.metric == Metric::DepAlter).unwrap();
    assert_eq!(dep.flagged(), (0..6).collect::<Vec<_>>());
    assert!(dep.valid.iter().all(|&v| v == 0));
    assert!((0..6).all(|lv| (0..dep.labels.len()).all(|li| dep.probability(lv, li) == 0.0)));
    let summary = summarize(&records, &ms);
    assert_eq!(summary.flagged.get("dep_alter").map(Vec::len), Some(6));
    assert!(!summary.flagged.contains_key("oie_alter"));
    assert_eq!(summary.records, 60);
}

#[test]
fn random_records_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let roles = ["ARG0", "V", "ARG1", "ARG2"];
    let records: Vec<DiffRecord> = (0..2000)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng| -> AlterPayload {
                if rng.gen_bool(0.3) {
                    AlterPayload::ABSTAIN
                } else {
                    labels(&roles.iter().copied().filter(|_| rng.gen_bool(0.4)).collect::<Vec<_>>())
                }
            };
            let mut r = record(rng.gen_range(0..7), pick(&mut rng), pick(&mut rng));
            r.oie_appear = roles.iter().filter(|_| rng.gen_bool(0.2)).map(|s| s.to_string()).collect();
            r
        })
        .collect();
    for m in aggregate_influence(&records, 7) {
        for lv in 0..7 {
            assert!(m.valid[lv] <= m.trials[lv]);
            for li in 0..m.labels.len() {
                assert!((0.0..=1.0).contains(&m.probability(lv, li)));
                assert!(m.hits[lv][li] <= m.valid[lv]);
            }
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("lv,"));
    }
}

#[test]
fn experiment_counts_and_determinism() {
    let spec = GrammarSpec::default_grammar();
    let g = WiredGenerator::new(&spec, [2, 2, 2], 2, &[(OieRole::Arg0, 1)]).unwrap();
    let r = run_influence_experiment(&g, &spec, 1, 1, 0).unwrap();
    assert_eq!(r.len(), 6);
    let a = run_influence_experiment(&g, &spec, 7, 3, 42).unwrap();
    let b = run_influence_experiment(&g, &spec, 7, 3, 42).unwrap();
    assert_eq!(a.len(), 7 * 3 * 6);
    assert_eq!(a, b);
    assert_ne!(a, run_influence_experiment(&g, &spec, 7, 3, 43).unwrap());
    for (i, rec) in a.iter().enumerate() {
        assert_eq!(rec.couple_id, i as u64);
        assert_eq!(rec.lv_index, (i / 3) % 6);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let spec = GrammarSpec::default_grammar();
    let g = WiredGenerator::new(&spec, [3, 3, 3], 4, &[(OieRole::V, 4)]).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_influence_experiment(&g, &spec, 12, 2, 5).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn wired_check_recovers_the_planted_roles() {
    let spec = GrammarSpec::default_grammar();
    let report = wired_decoder_check(&spec, [16, 16, 16], &DEFAULT_WIRING, 30, 10, 1).unwrap();
    assert!(report.passed, "{report:?}");
    for r in &report.roles {
        assert_eq!(Some(r.top_lv), r.planted_lv);
    }
    assert_eq!(report.max_inert_probability, 0.0);
    assert_eq!(report.records, 30 * 10 * 48);
}

#[test]
fn inert_generator_has_no_influence() {
    let spec = GrammarSpec::default_grammar();
    let report = wired_decoder_check(&spec, [2, 2, 2], &[], 10, 5, 3).unwrap();
    assert_eq!(report.max_inert_probability, 0.0);
    let g = WiredGenerator::new(&spec, [2, 2, 2], 3, &[]).unwrap();
    let records = run_influence_experiment(&g, &spec, 10, 5, 3).unwrap();
    for m in aggregate_influence(&records, 6) {
        for lv in 0..6 {
            assert!((0..m.labels.len()).all(|li| m.probability(lv, li) == 0.0));
        }
    }
}

#[test]
fn one_lv_can_drive_two_roles() {
    let spec = GrammarSpec::default_grammar();
    let wiring = [(OieRole::Arg0, 4), (OieRole::Arg1, 4)];
    let report = wired_decoder_check(&spec, [2, 2, 2], &wiring, 40, 10, 8).unwrap();
    for r in report.roles.iter().filter(|r| r.planted_lv.is_some()) {
        assert_eq!(r.top_lv, 4, "{r:?}");
        assert!(r.probability >= 0.9);
    }
    assert!(report.passed);
}

#[test]
fn wiring_outside_the_layout_is_rejected() {
    let spec = GrammarSpec::default_grammar();
    assert!(matches!(
        WiredGenerator::new(&spec, [2, 2, 2], 2, &[(OieRole::V, 6)]),
        Err(Error::Index { index: 6, limit: 6, .. })
    ));
}

#[test]
fn wired_bins_cover_every_word() {
    let k = 16;
    let mut seen = vec![false; k];
    for i in -400..=400 {
        let b = WiredGenerator::bin(i as f64 / 100.0, k);
        assert!(b < k);
        seen[b] = true;
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(WiredGenerator::bin(f64::INFINITY, k), k - 1);
    assert_eq!(WiredGenerator::bin(0.0, 2), 1);

    let spec = GrammarSpec::default_grammar();
    let g = WiredGenerator::new(&spec, [1, 1, 1], 1, &[(OieRole::Arg0, 0)]).unwrap();
    let a = LatentAssignment::from_json_str(
        r#"{"levels":[1,1,1],"z_size":1,"values":[-9,0,0],"provenance":["resampled","resampled","resampled"]}"#,
    )
    .unwrap();
    let s = g.sentence(&a);
    assert_eq!(s[1], spec.words(sentvae::corpus::WordClass::NounSubj)[0]);
    assert!(parse_roles(&s, &spec).is_parsed());
}

const EXTERNAL: &str = r#"{"couple_id":7,"lv_index":2,"original_tokens":["a","dog","runs"],"modified_tokens":["a","cat","runs"],"original":{"status":"PARSED","root_label":"VERB","root_children":["nsubj"],"all_labels":["det","nsubj","root"],"role_spans":{"ARG0":[0,2],"V":[2,3]}},"modified":{"status":"PARSED","root_label":"VERB","root_children":["nsubj"],"all_labels":["det","nsubj","root"],"role_spans":{"ARG0":[0,2],"V":[2,3]}}}"#;

#[test]
fn external_parses_are_diffed_like_internal_ones() {
    let text = format!("{EXTERNAL}\n\n{}\n", EXTERNAL.replace("\"couple_id\":7", "\"couple_id\":8"));
    let couples = read_external_couples(text.as_bytes()).unwrap();
    assert_eq!(couples.len(), 2);
    let recs = diff_external(&couples);
    assert_eq!((recs[0].couple_id, recs[0].lv_index), (7, 2));
    assert_eq!(recs[1].couple_id, 8);
    assert_eq!(recs[0].oie_alter, labels(&["ARG0"]));
    assert_eq!(recs[0].dep_alter, labels(&["nsubj"]));
}

#[test]
fn malformed_external_parses_report_their_line() {
    let missing_v = EXTERNAL.replacen(r#","V":[2,3]"#, "", 1);
    let overlapping = EXTERNAL.replacen(r#""V":[2,3]"#, r#""V":[1,3]"#, 1);
    let unknown_field = EXTERNAL.replacen("{\"couple_id\"", "{\"extra\":1,\"couple_id\"", 1);
    for bad in [missing_v, overlapping, unknown_field, "{".to_string(), "[]".to_string()] {
        let text = format!("{EXTERNAL}\n{bad}\n");
        match read_external_couples(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
            other => panic!("{bad}: {:?}", other.map(|c| c.len())),
        }
    }
}

#[test]
fn diff_records_round_trip_through_json() {
    let r = diff("a dog is chasing a ball", "a dog is running");
    let text = serde_json::to_string(&r).unwrap();
    assert!(text.contains("\"ABSTAIN\""));
    assert_eq!(serde_json::from_str::<DiffRecord>(&text).unwrap(), r);
}
