//! Generator for the bundled 20-session retrieval fixture.
//!
//! Vocabulary is pseudo-words so that overlap between texts is fully
//! controlled. Each topic owns a query, planted evidence and lexical
//! distractors that outscore the evidence on relevance alone:
//!
//! - preference topics repeat one evidence utterance in five sessions, so the
//!   copies form a similarity clique;
//! - temporal topics place the evidence in one session and an identical twin
//!   in a session far away in time.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use assomem::corpus::{EvalRecord, MemoryBank, QuestionType};
use assomem::providers::HashedEmbedder;

pub const SEED: u64 = 20_240_611;
pub const SESSIONS: usize = 20;
pub const TEST_PER_TYPE: usize = 5;
pub const TRAIN_PER_TYPE: usize = 10;
const COPIES: usize = 5;
const DISTRACTORS: usize = 7;
const CONTEXTS: usize = 3;
/// Copy sessions that also hold the distractors of a preference topic.
const PREF_DISTRACTOR_HOMES: usize = 2;
const NOISE_WORDS: usize = 40;
/// Minimum distance, in sessions, between a temporal target and its twin.
const FAR_SESSIONS: usize = 6;
const SESSION_STEP_DAYS: u64 = 21;

pub struct Fixture {
    pub bank: MemoryBank,
    pub train: Vec<EvalRecord>,
    pub test: Vec<EvalRecord>,
}

/// Pseudo-word source. Words never share an embedding bucket with each other
/// or with the query frame tokens, so overlaps are exactly the planted ones.
struct Words {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
    buckets: BTreeSet<usize>,
    embedder: HashedEmbedder,
}

impl Words {
    fn next(&mut self) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let w: String = (0..3)
                .flat_map(|_| {
                    let c = C[self.rng.gen_range(0..C.len())] as char;
                    let v = V[self.rng.gen_range(0..V.len())] as char;
                    [c, v]
                })
                .collect();
            let b = self.embedder.bucket(&w);
            if !self.used.contains(&w) && self.buckets.insert(b) {
                self.used.insert(w.clone());
                return w;
            }
        }
    }

    fn many(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.next()).collect()
    }
}

fn session_date(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 1, 9).unwrap() + Days::new(SESSION_STEP_DAYS * i as u64)
}

struct Topic {
    query: Vec<String>,
    evidence: String,
}

struct Gen {
    words: Words,
    noise: Vec<String>,
    rng: ChaCha8Rng,
}

impl Gen {
    /// `n` distinct filler words from the shared pool.
    fn filler(&mut self, n: usize) -> Vec<String> {
        self.noise.choose_multiple(&mut self.rng, n).cloned().collect()
    }

    fn topic(&mut self) -> Topic {
        let query = self.words.many(4);
        let evidence = format!("{} {} {}", query[0], query[1], self.words.many(4).join(" "));
        Topic { query, evidence }
    }

    /// Shares three query words, rotating which one is left out.
    fn distractor(&mut self, t: &Topic, k: usize) -> String {
        let shared: Vec<&str> = (0..4).filter(|i| *i != k % 4).map(|i| t.query[i].as_str()).collect();
        format!("{} {}", shared.join(" "), self.filler(3).join(" "))
    }

    /// Mentions the query words the evidence lacks; no better a match than the evidence.
    fn context(&mut self, t: &Topic) -> String {
        format!("{} {} {}", t.query[2], t.query[3], self.filler(4).join(" "))
    }
}

/// Session indices ordered by load, ties broken randomly.
fn least_loaded(load: &[usize], allowed: impl Fn(usize) -> bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..load.len()).filter(|i| allowed(*i)).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|i| load[*i]);
    idx
}

pub fn generate() -> Fixture {
    let embedder = HashedEmbedder::default();
    let frame = ["what", "suits", "me", "best", "came", "up", "yesterday", "days", "ago", "on", "3", "2023", "2024"];
    let buckets = frame
        .iter()
        .map(|t| t.to_string())
        .chain((1..=31).map(|d| format!("{d:02}")))
        .map(|t| embedder.bucket(&t))
        .collect();
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(SEED ^ 0xabcd),
        used: BTreeSet::new(),
        buckets,
        embedder,
    };
    let noise = words.many(NOISE_WORDS);
    let mut g = Gen {
        words,
        noise,
        rng: ChaCha8Rng::seed_from_u64(SEED),
    };
    let per_type = TEST_PER_TYPE + TRAIN_PER_TYPE;
    let mut sessions: Vec<Vec<(String, Option<String>)>> = vec![Vec::new(); SESSIONS];
    let mut records = Vec::new();

    let mut targets: Vec<usize> = (0..SESSIONS).collect();
    targets.shuffle(&mut g.rng);
    let mut far_load = vec![0usize; SESSIONS];
    for (j, &target) in targets.iter().take(per_type).enumerate() {
        let t = g.topic();
        let tag = format!("temp{j:02}");
        sessions[target].push((t.evidence.clone(), Some(tag.clone())));
        for _ in 0..CONTEXTS {
            let c = g.context(&t);
            sessions[target].push((c, None));
        }
        // Twins and distractors go to sessions that are nobody's target.
        let spare = &targets[per_type..];
        let far = least_loaded(&far_load, |s| spare.contains(&s) && s.abs_diff(target) >= FAR_SESSIONS, &mut g.rng)
            .first()
            .copied()
            .unwrap_or_else(|| least_loaded(&far_load, |s| s.abs_diff(target) >= FAR_SESSIONS, &mut g.rng)[0]);
        far_load[far] += 1;
        sessions[far].push((t.evidence.clone(), None));
        for k in 0..DISTRACTORS {
            let d = g.distractor(&t, k);
            sessions[far].push((d, None));
        }
        let date = session_date(target);
        let (expr, asked) = match j % 3 {
            0 => ("yesterday".to_string(), date + Days::new(1)),
            1 => ("3 days ago".to_string(), date + Days::new(3)),
            _ => (format!("on {date}"), date + Days::new(10)),
        };
        records.push((tag, QuestionType::TemporalReasoning, format!("what {} came up {expr}", t.query.join(" ")), asked, t.evidence));
    }

    let mut pref_load = vec![0usize; SESSIONS];
    let mut home_load = vec![0usize; SESSIONS];
    for j in 0..per_type {
        let t = g.topic();
        let tag = format!("pref{j:02}");
        let busy = &targets[..per_type];
        let mut homes: Vec<usize> = least_loaded(&home_load, |s| busy.contains(&s), &mut g.rng)
            .into_iter()
            .take(PREF_DISTRACTOR_HOMES)
            .collect();
        for &h in &homes {
            home_load[h] += 1;
        }
        homes.extend(
            least_loaded(&pref_load, |s| !homes.contains(&s), &mut g.rng)
                .into_iter()
                .take(COPIES - PREF_DISTRACTOR_HOMES),
        );
        for &s in &homes {
            pref_load[s] += 1;
            sessions[s].push((t.evidence.clone(), Some(tag.clone())));
        }
        for k in 0..DISTRACTORS {
            let d = g.distractor(&t, k);
            sessions[homes[k % PREF_DISTRACTOR_HOMES]].push((d, None));
        }
        records.push((tag, QuestionType::SingleSessionPreference, format!("what {} suits me best", t.query.join(" ")), session_date(SESSIONS + 2), t.evidence));
    }

    let mut bank_sessions = Vec::new();
    let mut labels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, mut utts) in sessions.into_iter().enumerate() {
        utts.shuffle(&mut g.rng);
        let sid = format!("s{i:02}");
        for (ord, (_, tag)) in utts.iter().enumerate() {
            if let Some(tag) = tag {
                labels.entry(tag.clone()).or_default().push(format!("{sid}:{ord}"));
            }
        }
        bank_sessions.push((sid, session_date(i), utts.into_iter().map(|u| u.0).collect::<Vec<_>>()));
    }
    let bank = MemoryBank::from_texts("synthetic", bank_sessions).unwrap();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (tag, qt, question, date, answer) in records {
        let record = EvalRecord {
            id: tag.clone(),
            question,
            answer,
            question_date: date,
            question_type: qt,
            evidence_labels: labels[&tag].iter().map(|id| (id.clone(), 1)).collect(),
            unlabeled: false,
        };
        let index: usize = tag[4..].parse().unwrap();
        if index < TEST_PER_TYPE {
            test.push(record);
        } else {
            train.push(record);
        }
    }
    Fixture { bank, train, test }
}

/// QA file body in the interchange format accepted by the loader.
pub fn qa_json(records: &[EvalRecord]) -> String {
    let rows: Vec<Value> = records
        .iter()
        .map(|r| {
            json!({
                "question_id": r.id,
                "question": r.question,
                "answer": r.answer,
                "question_date": r.question_date.to_string(),
                "question_type": r.question_type.as_str(),
                "evidence": r.positives().into_iter().collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string_pretty(&rows).unwrap() + "\n"
}
