use std::collections::{BTreeSet, VecDeque};

use chrono::NaiveDate;

use super::*;
use crate::providers::{HashedEmbedder, TfIdfAnnotator};

fn date(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 5, day).unwrap()
}

fn bank(sessions: &[(&str, &[&str])]) -> MemoryBank {
    MemoryBank::from_texts(
        "test",
        sessions
            .iter()
            .enumerate()
            .map(|(i, (id, texts))| (id.to_string(), date(i as u32 + 1), texts.to_vec())),
    )
    .unwrap()
}

fn raw_cosine(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    let na: f64 = a.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn clue(embedder: &HashedEmbedder, id: &str, text: &str, members: &[&str]) -> Clue {
    Clue {
        id: id.into(),
        text: text.into(),
        embedding: embedder.embed(text).unwrap(),
        member_utterances: members.iter().map(|m| m.to_string()).collect(),
        merged_from: vec![id.into()],
    }
}

fn words(range: std::ops::Range<usize>) -> String {
    range.map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn one_clue_per_session() {
    let b = bank(&[
        ("s1", &["booked flights to Lisbon", "window seat please"]),
        ("s2", &["sourdough starter smells odd"]),
        ("s3", &["marathon training week four", "knee feels sore", "new shoes"]),
    ]);
    let e = HashedEmbedder::default();
    let clues = build_clues(&b, &TfIdfAnnotator::from_bank(&b), &e).unwrap();
    assert_eq!(clues.len(), 3);
    for (c, s) in clues.iter().zip(&b.sessions) {
        assert_eq!(c.id, clue_id(&s.id));
        let members: BTreeSet<String> = s.utterances.iter().map(|u| u.id.clone()).collect();
        assert_eq!(c.member_utterances, members);
        assert_eq!(c.embedding, e.embed(&c.text).unwrap());
        assert_eq!(c.merged_from, vec![c.id.clone()]);
    }
}

#[test]
fn delta_one_never_merges_distinct_clues() {
    let e = HashedEmbedder::default();
    let clues = vec![
        clue(&e, "clue:b", "alpha beta gamma", &["b:0"]),
        clue(&e, "clue:a", "alpha beta", &["a:0"]),
    ];
    let merged = merge_clues(&clues, 1.0, &e).unwrap();
    let mut expected = clues.clone();
    expected.sort_by(|a, b| a.id.cmp(&b.id));
    assert_eq!(merged, expected);
    assert!(merge_clues(&clues, 1.0 + 1e-9, &e).is_err());
    assert!(merge_clues(&clues, 0.0, &e).is_err());
}

#[test]
fn identical_clues_merge() {
    let e = HashedEmbedder::default();
    let clues = vec![
        clue(&e, "clue:s2", "ski trip aspen", &["s2:0", "s2:1"]),
        clue(&e, "clue:s1", "ski trip aspen", &["s1:0"]),
    ];
    let merged = merge_clues(&clues, 0.9, &e).unwrap();
    assert_eq!(merged.len(), 1);
    let m = &merged[0];
    assert_eq!(m.id, "clue:s1");
    assert_eq!(m.text, "ski trip aspen ski trip aspen");
    assert_eq!(m.merged_from, ["clue:s1", "clue:s2"]);
    let members: Vec<&str> = m.member_utterances.iter().map(String::as_str).collect();
    assert_eq!(members, ["s1:0", "s2:0", "s2:1"]);
    assert_eq!(m.embedding, e.embed(&m.text).unwrap());
}

/// Components by breadth-first search over the thresholded similarity graph.
fn component_oracle(clues: &[Clue], delta: f64) -> BTreeSet<BTreeSet<String>> {
    let n = clues.len();
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.insert(clues[i].id.clone());
            for j in 0..n {
                if !seen[j] && raw_cosine(&clues[i].embedding, &clues[j].embedding) > delta {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.insert(comp);
    }
    out
}

#[test]
fn merging_is_transitive() {
    // A = w0..w39, B = A + w40..w47, C = B - w0..w7.
    // Roughly cos(A,B) = cos(B,C) = 0.91 and cos(A,C) = 0.8; exact values
    // move a little with bucket collisions.
    let e = HashedEmbedder::default();
    let a = clue(&e, "clue:a", &words(0..40), &["a:0"]);
    let b = clue(&e, "clue:b", &words(0..48), &["b:0"]);
    let c = clue(&e, "clue:c", &words(8..48), &["c:0"]);
    let ab = raw_cosine(&a.embedding, &b.embedding);
    let bc = raw_cosine(&b.embedding, &c.embedding);
    let ac = raw_cosine(&a.embedding, &c.embedding);
    assert!(ab > 0.9 && bc > 0.9 && ac < 0.85, "{ab} {bc} {ac}");

    let clues = vec![a, b, c];
    let oracle = component_oracle(&clues, 0.9);
    assert_eq!(oracle.len(), 1);
    let merged = merge_clues(&clues, 0.9, &e).unwrap();
    let got: BTreeSet<BTreeSet<String>> = merged
        .iter()
        .map(|m| m.merged_from.iter().cloned().collect())
        .collect();
    assert_eq!(got, oracle);
    assert_eq!(merged[0].member_utterances.len(), 3);

    // Without B the bridge is gone.
    let split = merge_clues(&[clues[0].clone(), clues[2].clone()], 0.9, &e).unwrap();
    assert_eq!(split.len(), 2);
}

#[test]
fn merge_ignores_input_order() {
    let e = HashedEmbedder::default();
    let clues = vec![
        clue(&e, "clue:a", &words(0..40), &["a:0"]),
        clue(&e, "clue:b", &words(0..48), &["b:0"]),
        clue(&e, "clue:c", "unrelated words entirely", &["c:0"]),
        clue(&e, "clue:d", &words(8..48), &["d:0"]),
    ];
    let forward = merge_clues(&clues, 0.9, &e).unwrap();
    let mut reversed = clues.clone();
    reversed.reverse();
    assert_eq!(merge_clues(&reversed, 0.9, &e).unwrap(), forward);
    let mut rotated = clues.clone();
    rotated.rotate_left(1);
    assert_eq!(merge_clues(&rotated, 0.9, &e).unwrap(), forward);
}

fn simple_graph(sessions: &[(&str, &[&str])], gamma: f64) -> (MemoryBank, MemoryGraph) {
    let b = bank(sessions);
    let e = HashedEmbedder::default();
    let config = GraphConfig {
        gamma,
        ..GraphConfig::default()
    };
    let g = build_memory_graph(&b, &TfIdfAnnotator::from_bank(&b), &e, &config).unwrap();
    (b, g)
}

#[test]
fn high_gamma_leaves_only_ownership() {
    let (b, g) = simple_graph(
        &[
            ("s1", &["pasta carbonara recipe", "guanciale is hard to find"]),
            ("s2", &["dentist appointment moved", "bring insurance card"]),
        ],
        0.999,
    );
    assert!(g.edges().iter().all(|e| e.kind == EdgeKind::Ownership));
    assert_eq!(g.edges().len(), b.utterance_count());
}

#[test]
fn identical_utterances_get_unit_weight_edge() {
    let (_, g) = simple_graph(
        &[
            ("s1", &["see you at the gym", "leg day today"]),
            ("s2", &["see you at the gym", "reading a novel"]),
        ],
        0.95,
    );
    let sim: Vec<&Edge> = g.edges().iter().filter(|e| e.kind == EdgeKind::UttSim).collect();
    assert_eq!(sim.len(), 1);
    assert_eq!((sim[0].src.as_str(), sim[0].dst.as_str()), ("s1:0", "s2:0"));
    assert!((sim[0].weight - 1.0).abs() < 1e-12);
}

#[test]
fn five_utterance_edge_set_matches_brute_force() {
    let texts = [
        "we hiked the ridge trail at dawn",
        "the ridge trail at dawn was foggy",
        "booked a table for two at luigi",
        "a table for two at luigi on friday",
        "tax forms are due next month",
    ];
    let (_, g) = simple_graph(&[("s1", &texts[..3]), ("s2", &texts[3..])], 0.5);
    let e = HashedEmbedder::default();
    let ids = ["s1:0", "s1:1", "s1:2", "s2:0", "s2:1"];
    let mut expected = BTreeSet::new();
    for i in 0..5 {
        for j in (i + 1)..5 {
            let c = raw_cosine(&e.embed(texts[i]).unwrap(), &e.embed(texts[j]).unwrap());
            if c > 0.5 {
                expected.insert((ids[i].to_string(), ids[j].to_string()));
            }
        }
    }
    let got: BTreeSet<(String, String)> = g
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::UttSim)
        .map(|e| (e.src.clone(), e.dst.clone()))
        .collect();
    assert_eq!(
        expected,
        BTreeSet::from([
            ("s1:0".to_string(), "s1:1".to_string()),
            ("s1:2".to_string(), "s2:0".to_string())
        ])
    );
    assert_eq!(got, expected);
    for edge in g.edges().iter().filter(|e| e.kind == EdgeKind::UttSim) {
        let a = &g.utterance(&edge.src).unwrap().embedding;
        let b = &g.utterance(&edge.dst).unwrap().embedding;
        assert!((edge.weight - raw_cosine(a, b)).abs() < 1e-12);
    }
}

#[test]
fn ownership_edges_are_unique_per_utterance() {
    let (b, g) = simple_graph(
        &[("s1", &["a b c", "d e f"]), ("s2", &["a b c", "x y z"])],
        0.8,
    );
    for u in b.utterances() {
        let owners: Vec<&Edge> = g
            .edges()
            .iter()
            .filter(|e| e.kind == EdgeKind::Ownership && (e.src == u.id || e.dst == u.id))
            .collect();
        assert_eq!(owners.len(), 1, "{}", u.id);
        assert_eq!(g.owner_of(&u.id), Some(clue_id(&u.session_id).as_str()));
    }
    assert!(g.edges().iter().all(|e| e.src < e.dst));
}

#[test]
fn round_trip_is_identical() {
    let (_, g) = simple_graph(
        &[("s1", &["one fish", "two fish"]), ("s2", &["red fish", "blue fish"])],
        0.3,
    );
    let json = g.to_canonical_json();
    let back = MemoryGraph::from_json(&json, "mem").unwrap();
    assert_eq!(back, g);
    assert_eq!(back.to_canonical_json(), json);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    save_graph(&g, &path).unwrap();
    assert_eq!(load_graph(&path).unwrap(), g);
    assert!(json.starts_with(r#"{"schema":1,"params":{"delta":0.85,"gamma":0.3,"#));
}

#[test]
fn corrupted_edge_kind_is_named() {
    let (_, g) = simple_graph(&[("s1", &["hello world"])], 0.5);
    let bad = g.to_canonical_json().replace("\"ownership\"", "\"owner_ship\"");
    let err = MemoryGraph::from_json(&bad, "g.json").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("edge #0") && msg.contains("owner_ship"), "{msg}");
}

#[test]
fn embedder_fingerprint_is_enforced() {
    let (b, g) = simple_graph(&[("s1", &["hello world"])], 0.5);
    assert!(g.ensure_embedder(&HashedEmbedder::default()).is_ok());
    let err = g.ensure_embedder(&HashedEmbedder::new(512)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(g.ensure_bank(&b).is_ok());
    let other = bank(&[("s9", &["different"])]);
    assert!(g.ensure_bank(&other).is_err());
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let b = bank(&[("s1", &["hello world"])]);
    let small = HashedEmbedder::new(64);
    let clues = build_clues(&b, &TfIdfAnnotator::from_bank(&b), &small).unwrap();
    let err = build_graph(&b, clues, &GraphConfig::default(), &HashedEmbedder::new(128)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn clues_must_partition_the_bank() {
    let b = bank(&[("s1", &["a"]), ("s2", &["b"])]);
    let e = HashedEmbedder::default();
    let mut clues = build_clues(&b, &TfIdfAnnotator::from_bank(&b), &e).unwrap();
    clues.pop();
    let err = build_graph(&b, clues, &GraphConfig::default(), &e).unwrap_err();
    assert!(err.to_string().contains("partition"), "{err}");
}

#[test]
fn node_ceiling_refuses_large_banks() {
    let b = bank(&[("s1", &["a", "b", "c"])]);
    let config = GraphConfig {
        node_ceiling: 2,
        ..GraphConfig::default()
    };
    let e = HashedEmbedder::default();
    let err = build_memory_graph(&b, &TfIdfAnnotator::from_bank(&b), &e, &config).unwrap_err();
    assert!(err.to_string().contains("ceiling"), "{err}");
}

#[test]
fn node_index_orders_clues_first() {
    let (_, g) = simple_graph(&[("s1", &["x1 y1", "x2 y2"]), ("s2", &["x3 y3"])], 0.9);
    let idx = g.index();
    assert_eq!(idx.len(), 5);
    assert_eq!(idx.id(0), "clue:s1");
    assert!(idx.is_clue(1) && !idx.is_clue(2));
    assert_eq!(idx.id(2), "s1:0");
    let clue = idx.position("clue:s1").unwrap();
    let ns: Vec<usize> = idx.neighbours(clue).iter().map(|(n, _)| *n).collect();
    assert_eq!(ns, vec![2, 3]);
}
