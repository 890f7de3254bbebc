//! Retrieval metrics, benchmark runs and fine-tuning data export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{EvalRecord, MemoryBank, QuestionType};
use crate::error::{Error, Result};
use crate::graph::MemoryGraph;
use crate::retrieval::{RetrievalResult, Retriever};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const FINETUNE_SYSTEM_PROMPT: &str = include_str!("../prompts/finetune_system.txt");
/// Separator between memory items in an exported context.
pub const MEMORY_SEPARATOR: &str = ";";

/// Fraction of positives among the first `k` ids; `None` without positives.
pub fn recall_at_k(ranked: &[&str], positives: &BTreeSet<&str>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|id| positives.contains(*id)).count();
    Some(hits as f64 / positives.len() as f64)
}

/// Binary-gain nDCG with a `1 / log2(rank + 1)` discount; `None` without
/// positives.
pub fn ndcg_at_k(ranked: &[&str], positives: &BTreeSet<&str>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| positives.contains(*id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(positives.len())).map(discount).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub query_count: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub flags_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub ks: Vec<usize>,
    /// Keyed by question type name.
    pub per_type: BTreeMap<String, StratumMetrics>,
    pub overall: StratumMetrics,
    /// Records without any positive label.
    pub skipped: Vec<String>,
}

/// Per-record retrieval outcome kept alongside the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: String,
    pub question_type: QuestionType,
    pub result: RetrievalResult,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
}

fn aggregate<'a>(outcomes: impl Iterator<Item = &'a RecordOutcome>, ks: &[usize]) -> StratumMetrics {
    let mut m = StratumMetrics::default();
    let mut recall: BTreeMap<usize, f64> = ks.iter().map(|k| (*k, 0.0)).collect();
    let mut ndcg = recall.clone();
    for o in outcomes {
        m.query_count += 1;
        for k in ks {
            *recall.get_mut(k).expect("k present") += o.recall_at[k];
            *ndcg.get_mut(k).expect("k present") += o.ndcg_at[k];
        }
        for flag in &o.result.flags {
            *m.flags_histogram.entry(flag.as_str().to_string()).or_default() += 1;
        }
    }
    if m.query_count > 0 {
        let n = m.query_count as f64;
        m.recall_at = recall.into_iter().map(|(k, v)| (k, v / n)).collect();
        m.ndcg_at = ndcg.into_iter().map(|(k, v)| (k, v / n)).collect();
    }
    m
}

/// Retrieves evidence for every labeled record and aggregates recall and
/// nDCG at each `k`, per question type and overall.
pub fn run_benchmark(
    bank: &MemoryBank,
    records: &[EvalRecord],
    retriever: &Retriever<'_>,
    ks: &[usize],
) -> Result<(MetricsReport, Vec<RecordOutcome>)> {
    retriever.graph().ensure_bank(bank)?;
    let ks: Vec<usize> = ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let Some(&max_k) = ks.last() else {
        return Err(Error::Argument("at least one cutoff k is required".into()));
    };
    if ks[0] == 0 {
        return Err(Error::Argument("cutoffs must be at least 1".into()));
    }
    let mut skipped = Vec::new();
    let mut labeled = Vec::new();
    for r in records {
        if r.positives().is_empty() {
            warn!(record = %r.id, "record has no positive labels; skipped");
            skipped.push(r.id.clone());
        } else {
            labeled.push(r);
        }
    }
    let outcomes: Vec<RecordOutcome> = labeled
        .par_iter()
        .map(|r| {
            let query = retriever.query(&r.question, r.question_date, r.question_type)?;
            let result = retriever.retrieve_top(&query, max_k)?;
            let ranked = result.ids();
            let positives = r.positives();
            let metric = |f: fn(&[&str], &BTreeSet<&str>, usize) -> Option<f64>| {
                ks.iter()
                    .map(|&k| (k, f(&ranked, &positives, k).expect("labeled record")))
                    .collect::<BTreeMap<_, _>>()
            };
            Ok(RecordOutcome {
                record_id: r.id.clone(),
                question_type: r.question_type,
                recall_at: metric(recall_at_k),
                ndcg_at: metric(ndcg_at_k),
                result,
            })
        })
        .collect::<Result<_>>()?;

    let types: BTreeSet<QuestionType> = outcomes.iter().map(|o| o.question_type).collect();
    let per_type = types
        .into_iter()
        .map(|t| {
            let m = aggregate(outcomes.iter().filter(|o| o.question_type == t), &ks);
            (t.as_str().to_string(), m)
        })
        .collect();
    let report = MetricsReport {
        schema: REPORT_SCHEMA_VERSION,
        overall: aggregate(outcomes.iter(), &ks),
        ks,
        per_type,
        skipped,
    };
    Ok((report, outcomes))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        s.push('\n');
        s
    }

    /// Aligned text table: one row per stratum, recall and nDCG per cutoff.
    pub fn to_table(&self) -> String {
        let mut header = vec!["type".to_string(), "n".to_string()];
        header.extend(self.ks.iter().map(|k| format!("R@{k}")));
        header.extend(self.ks.iter().map(|k| format!("nDCG@{k}")));
        let row = |name: &str, m: &StratumMetrics| {
            let mut cells = vec![name.to_string(), m.query_count.to_string()];
            let fmt = |v: Option<&f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            cells.extend(self.ks.iter().map(|k| fmt(m.recall_at.get(k))));
            cells.extend(self.ks.iter().map(|k| fmt(m.ndcg_at.get(k))));
            cells
        };
        let mut rows = vec![header];
        rows.extend(self.per_type.iter().map(|(t, m)| row(t, m)));
        rows.push(row("overall", &self.overall));
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStrategy {
    Mixed,
    NegativeOnly,
}

impl std::str::FromStr for FinetuneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(FinetuneStrategy::Mixed),
            "negative_only" | "negative-only" => Ok(FinetuneStrategy::NegativeOnly),
            other => Err(Error::Argument(format!(
                "unknown strategy `{other}` (expected mixed or negative_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub id: String,
    pub question: String,
    pub memory_context: Vec<String>,
    pub answer: String,
    pub question_type: QuestionType,
    pub strategy: FinetuneStrategy,
    pub system: String,
    pub prompt: String,
    pub completion: String,
}

/// The user turn of the sample layout, ending where the answer begins.
pub fn render_finetune_prompt(question: &str, memory: &[String]) -> String {
    format!(
        "### The user query is:\n{question}\n### The memory is:\n{}\n\n### The answer is:",
        memory.join(MEMORY_SEPARATOR)
    )
}

/// Context ids for one record: the retrieved prefix (mixed), or the
/// retrieved order with positives removed (negative_only).
pub fn select_context<'a>(
    ranked: &[&'a str],
    positives: &BTreeSet<&str>,
    strategy: FinetuneStrategy,
    size: usize,
) -> Vec<&'a str> {
    match strategy {
        FinetuneStrategy::Mixed => ranked.iter().take(size).copied().collect(),
        FinetuneStrategy::NegativeOnly => ranked
            .iter()
            .filter(|id| !positives.contains(*id))
            .take(size)
            .copied()
            .collect(),
    }
}

/// One example per record with a retrieval result, in record order.
/// `results` pairs with `records` by record id; a record without a result,
/// or without any retrieved negative under negative_only, is skipped.
pub fn export_finetune_dataset(
    records: &[EvalRecord],
    results: &BTreeMap<String, RetrievalResult>,
    graph: &MemoryGraph,
    strategy: FinetuneStrategy,
    context_size: usize,
) -> Result<Vec<FinetuneExample>> {
    if context_size == 0 {
        return Err(Error::Argument("context size must be at least 1".into()));
    }
    let mut out = Vec::new();
    for r in records {
        let Some(result) = results.get(&r.id) else {
            warn!(record = %r.id, "no retrieval result; skipped");
            continue;
        };
        let ranked = result.ids();
        let positives = r.positives();
        let ids = select_context(&ranked, &positives, strategy, context_size);
        if strategy == FinetuneStrategy::NegativeOnly && ids.is_empty() {
            warn!(record = %r.id, "no negatives among retrieved memories; skipped");
            continue;
        }
        let memory_context = ids
            .iter()
            .map(|id| {
                graph
                    .utterance(id)
                    .map(|u| u.utterance.text.clone())
                    .ok_or_else(|| Error::Lookup {
                        kind: "utterance",
                        id: id.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FinetuneExample {
            id: r.id.clone(),
            prompt: render_finetune_prompt(&r.question, &memory_context),
            question: r.question.clone(),
            memory_context,
            answer: r.answer.clone(),
            question_type: r.question_type,
            strategy,
            system: FINETUNE_SYSTEM_PROMPT.trim_end().to_string(),
            completion: r.answer.clone(),
        });
    }
    Ok(out)
}

/// Line-delimited JSON, one example per line.
pub fn to_jsonl(examples: &[FinetuneExample]) -> String {
    examples
        .iter()
        .map(|e| serde_json::to_string(e).expect("example serialization is infallible") + "\n")
        .collect()
}
