use std::collections::{BTreeMap, HashMap, HashSet};

use tracing::warn;

use crate::corpus::{MemoryBank, Session};
use crate::error::{Error, Result};
use crate::text::{is_stopword, tokenize};

use super::ClueAnnotator;

pub const TOPIC_PROMPT: &str = include_str!("../../prompts/topic.txt");

/// Number of terms in a reference clue.
pub const CLUE_TERMS: usize = 5;

pub fn render_topic_prompt(template: &str, session: &Session) -> String {
    template.replace("{session}", &session.text())
}

/// Reference annotator: the session's top TF-IDF terms.
///
/// Document frequencies are frozen from the bank at construction, with one
/// document per session. Weights use raw term counts and the smoothed idf
/// `ln((1 + N) / (1 + df)) + 1`; stopwords and one-character tokens are
/// skipped. Terms are emitted by descending weight, ties alphabetical.
#[derive(Debug, Clone)]
pub struct TfIdfAnnotator {
    doc_freq: HashMap<String, usize>,
    docs: usize,
}

impl TfIdfAnnotator {
    pub fn from_bank(bank: &MemoryBank) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for session in &bank.sessions {
            let terms: HashSet<String> = session_terms(session).into_iter().collect();
            for t in terms {
                *doc_freq.entry(t).or_default() += 1;
            }
        }
        TfIdfAnnotator {
            doc_freq,
            docs: bank.sessions.len(),
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((1.0 + self.docs as f64) / (1.0 + df)).ln() + 1.0
    }

    /// All candidate terms with weights, best first.
    pub fn weighted_terms(&self, session: &Session) -> Vec<(String, f64)> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in session_terms(session) {
            *tf.entry(t).or_default() += 1;
        }
        let mut weighted: Vec<(String, f64)> = tf
            .into_iter()
            .map(|(t, n)| {
                let w = n as f64 * self.idf(&t);
                (t, w)
            })
            .collect();
        weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        weighted
    }
}

fn session_terms(session: &Session) -> Vec<String> {
    session
        .utterances
        .iter()
        .flat_map(|u| tokenize(&u.text))
        .filter(|t| t.chars().count() > 1 && !is_stopword(t))
        .collect()
}

impl ClueAnnotator for TfIdfAnnotator {
    fn annotate(&self, session: &Session) -> Result<String> {
        if session.utterances.is_empty() {
            return Err(Error::Argument(format!("session `{}` is empty", session.id)));
        }
        let terms: Vec<String> = self
            .weighted_terms(session)
            .into_iter()
            .take(CLUE_TERMS)
            .map(|(t, _)| t)
            .collect();
        if terms.is_empty() {
            // Nothing but stopwords; the raw text is the best clue available.
            return Ok(session.text());
        }
        Ok(terms.join(" "))
    }
}

/// Tries the primary annotator and, on failure, logs and uses the fallback.
pub struct FallbackAnnotator {
    primary: Box<dyn ClueAnnotator>,
    fallback: Box<dyn ClueAnnotator>,
}

impl FallbackAnnotator {
    pub fn new(primary: Box<dyn ClueAnnotator>, fallback: Box<dyn ClueAnnotator>) -> Self {
        FallbackAnnotator { primary, fallback }
    }
}

impl ClueAnnotator for FallbackAnnotator {
    fn annotate(&self, session: &Session) -> Result<String> {
        match self.primary.annotate(session) {
            Ok(clue) => Ok(clue),
            Err(err) => {
                warn!(session = %session.id, error = %err, "clue service failed, using reference annotator");
                self.fallback.annotate(session)
            }
        }
    }
}
