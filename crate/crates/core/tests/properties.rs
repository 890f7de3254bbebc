//! Property tests over randomly generated memory banks.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use proptest::prelude::*;

use assomem::corpus::{parse_memory_bank, BankFormat, EvalRecord, MemoryBank, QuestionType};
use assomem::eval::{ndcg_at_k, recall_at_k, run_benchmark};
use assomem::fusion::FusionModel;
use assomem::graph::{build_clues, build_graph, build_memory_graph, merge_clues, GraphConfig, MemoryGraph};
use assomem::providers::{HashedEmbedder, ReferenceTemporalResolver, TextEmbedder, TfIdfAnnotator};
use assomem::ranker::RankerConfig;
use assomem::retrieval::{expand_candidates, RetrievalConfig, RetrievalFlag, Retriever};

const EMBEDDER: HashedEmbedder = HashedEmbedder::new(assomem::providers::DEFAULT_DIM);

const VOCAB: [&str; 14] = [
    "kayak", "river", "paddle", "camp", "tent", "stove", "map", "trail", "rain", "boots", "fire", "lake", "yesterday",
    "march",
];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&VOCAB[..]), 1..6).prop_map(|w| w.join(" "))
}

fn bank() -> impl Strategy<Value = MemoryBank> {
    prop::collection::vec((prop::collection::vec(sentence(), 1..5), 0u64..200), 1..7).prop_map(|sessions| {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        MemoryBank::from_texts(
            "prop",
            sessions
                .into_iter()
                .enumerate()
                .map(|(i, (texts, offset))| (format!("s{i}"), start + chrono::Days::new(offset), texts)),
        )
        .unwrap()
    })
}

fn graph_of(bank: &MemoryBank, config: &GraphConfig) -> MemoryGraph {
    build_memory_graph(bank, &TfIdfAnnotator::from_bank(bank), &EMBEDDER, config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clues_partition_utterances(bank in bank(), delta in 0.3f64..1.0) {
        let clues = build_clues(&bank, &TfIdfAnnotator::from_bank(&bank), &EMBEDDER).unwrap();
        let merged = merge_clues(&clues, delta, &EMBEDDER).unwrap();
        let mut owned = BTreeSet::new();
        for c in &merged {
            for u in &c.member_utterances {
                prop_assert!(owned.insert(u.clone()));
            }
        }
        let all: BTreeSet<String> = bank.utterances().map(|u| u.id.clone()).collect();
        prop_assert_eq!(owned, all);
        let per_session: usize = bank.sessions.iter().map(|s| s.utterances.len()).sum();
        prop_assert_eq!(bank.utterance_count(), per_session);
    }

    #[test]
    fn merging_ignores_clue_order(bank in bank(), delta in 0.3f64..1.0, seed in any::<u64>()) {
        let clues = build_clues(&bank, &TfIdfAnnotator::from_bank(&bank), &EMBEDDER).unwrap();
        let mut shuffled = clues.clone();
        // Deterministic shuffle driven by the generated seed.
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(
            merge_clues(&clues, delta, &EMBEDDER).unwrap(),
            merge_clues(&shuffled, delta, &EMBEDDER).unwrap()
        );
    }

    #[test]
    fn similarity_edges_clear_gamma_and_shrink_as_it_rises(bank in bank(), g1 in 0.3f64..0.95, dg in 0.0f64..0.3) {
        let clues = build_clues(&bank, &TfIdfAnnotator::from_bank(&bank), &EMBEDDER).unwrap();
        let merged = merge_clues(&clues, 0.85, &EMBEDDER).unwrap();
        let g2 = (g1 + dg).min(0.999);
        let loose = build_graph(&bank, merged.clone(), &GraphConfig { gamma: g1, ..GraphConfig::default() }, &EMBEDDER).unwrap();
        let strict = build_graph(&bank, merged, &GraphConfig { gamma: g2, ..GraphConfig::default() }, &EMBEDDER).unwrap();
        let embedding = |id: &str| match loose.utterance(id) {
            Some(u) => u.embedding.clone(),
            None => loose.clue(id).unwrap().embedding.clone(),
        };
        for (a, b) in loose.similarity_pairs() {
            prop_assert!(embedding(&a).cosine(&embedding(&b)) > g1);
        }
        prop_assert!(strict.similarity_pairs().is_subset(&loose.similarity_pairs()));
    }

    #[test]
    fn builds_are_byte_identical(bank in bank()) {
        let config = GraphConfig::default();
        prop_assert_eq!(graph_of(&bank, &config).to_canonical_json(), graph_of(&bank, &config).to_canonical_json());
    }

    #[test]
    fn canonical_bank_round_trips(bank in bank()) {
        let text = bank.to_canonical_json();
        let once = parse_memory_bank(&text, BankFormat::Canonical, "a").unwrap();
        let twice = parse_memory_bank(&text, BankFormat::Canonical, "b").unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(&once, &bank);
        prop_assert_eq!(once.to_canonical_json(), text);
    }

    #[test]
    fn embeddings_are_unit_and_cosine_is_dot(a in sentence(), b in sentence()) {
        let ea = EMBEDDER.embed(&a).unwrap();
        let eb = EMBEDDER.embed(&b).unwrap();
        let norm: f64 = ea.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        let dot: f64 = ea.values().iter().zip(eb.values()).map(|(x, y)| x * y).sum();
        prop_assert!((ea.cosine(&eb) - dot).abs() < 1e-9);
        prop_assert!((ea.cosine(&eb) - eb.cosine(&ea)).abs() < 1e-15);
        prop_assert_eq!(EMBEDDER.embed(&a).unwrap(), ea);
    }

    #[test]
    fn retrieval_contracts(bank in bank(), question in sentence(), k in 1usize..8, fallback in any::<bool>()) {
        let graph = graph_of(&bank, &GraphConfig::default());
        let model = FusionModel::uniform();
        let config = RetrievalConfig { k_clues: 2, k_evidence: k, fallback_global: fallback };
        let r = Retriever::new(&graph, &model, &EMBEDDER, &ReferenceTemporalResolver, RankerConfig::default(), config).unwrap();
        let date = NaiveDate::from_ymd_opt(2023, 8, 1).unwrap();
        let q = r.query(&question, date, QuestionType::Unknown).unwrap();
        let result = r.retrieve(&q).unwrap();
        prop_assert!(result.evidence.len() <= k);

        if !result.flags.contains(&RetrievalFlag::ClueFallback) {
            let candidates: BTreeSet<String> = expand_candidates(&result.clue_trace, &graph).unwrap().into_iter().collect();
            prop_assert_eq!(candidates.len(), result.candidate_count);
            for e in &result.evidence {
                prop_assert!(candidates.contains(&e.utterance_id));
            }
        }
        for e in &result.evidence {
            let w = &e.weights;
            let mut expected = w.rel * e.normalized.rel + w.imp * e.normalized.imp;
            if let (Some(wt), Some(st)) = (w.temp, e.normalized.temp) {
                expected += wt * st;
            }
            prop_assert!((e.score - expected).abs() < 1e-12);
        }
        for pair in result.evidence.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }

        prop_assert_eq!(&r.retrieve(&q).unwrap(), &result);
        let longer = r.retrieve_top(&q, k + 3).unwrap();
        prop_assert_eq!(&longer.ids()[..result.evidence.len()], &result.ids()[..]);
    }

    #[test]
    fn full_depth_recall_and_report_aggregation(bank in bank(), questions in prop::collection::vec((sentence(), 0usize..3), 1..6)) {
        let graph = graph_of(&bank, &GraphConfig::default());
        let model = FusionModel::uniform();
        let config = RetrievalConfig { k_clues: 100, ..RetrievalConfig::default() };
        let r = Retriever::new(&graph, &model, &EMBEDDER, &ReferenceTemporalResolver, RankerConfig::default(), config).unwrap();
        let ids: Vec<String> = bank.utterances().map(|u| u.id.clone()).collect();
        let types = [QuestionType::MultiSession, QuestionType::KnowledgeUpdate, QuestionType::TemporalReasoning];
        let records: Vec<EvalRecord> = questions
            .iter()
            .enumerate()
            .map(|(i, (text, t))| EvalRecord {
                id: format!("q{i}"),
                question: text.clone(),
                answer: "a".into(),
                question_date: NaiveDate::from_ymd_opt(2023, 8, 1).unwrap(),
                question_type: types[*t],
                evidence_labels: ids.iter().enumerate().map(|(j, id)| (id.clone(), u8::from((i + j) % 3 == 0))).collect(),
                unlabeled: false,
            })
            .collect();
        let n = ids.len();
        let (report, outcomes) = run_benchmark(&bank, &records, &r, &[1, 3, n]).unwrap();
        for o in &outcomes {
            let rec = records.iter().find(|r| r.id == o.record_id).unwrap();
            let candidates = expand_candidates(&o.result.clue_trace, &graph).unwrap();
            let covered = rec.positives().iter().all(|p| candidates.iter().any(|c| c == p));
            if covered && !o.result.flags.contains(&RetrievalFlag::ClueFallback) {
                prop_assert_eq!(o.recall_at[&n], 1.0);
            }
        }
        for k in [1, 3, n] {
            let mut weighted = 0.0;
            let mut count = 0;
            for m in report.per_type.values() {
                weighted += m.recall_at[&k] * m.query_count as f64;
                count += m.query_count;
            }
            prop_assert_eq!(count, report.overall.query_count);
            prop_assert!((weighted / count as f64 - report.overall.recall_at[&k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_is_one_exactly_when_positives_lead(labels in prop::collection::vec(any::<bool>(), 1..20), k in 1usize..25) {
        prop_assume!(labels.iter().any(|x| *x));
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("u{i}")).collect();
        let ranked: Vec<&str> = ids.iter().map(String::as_str).collect();
        let positives: BTreeSet<&str> = ranked.iter().zip(&labels).filter(|p| *p.1).map(|p| *p.0).collect();
        // Ideal order fills the first min(|P|, k) slots with positives.
        let slots = positives.len().min(k);
        let leading = labels[..slots].iter().all(|x| *x);
        let ndcg = ndcg_at_k(&ranked, &positives, k).unwrap();
        prop_assert_eq!((ndcg - 1.0).abs() < 1e-12, leading);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));
        let r = recall_at_k(&ranked, &positives, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
