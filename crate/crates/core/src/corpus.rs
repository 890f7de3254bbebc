//! Memory-bank data model and dataset loaders.
//!
//! Two benchmark layouts are understood:
//!
//! * LongMemEval style: a record (or array of records) with `question`,
//!   `answer`, `question_date` and a `sessions` list whose entries carry
//!   `session_id`, `date` and `utterance`. An entry's `utterance` may be a
//!   single string or an array; entries sharing a `session_id` are grouped
//!   into one session in order of appearance.
//! * MeetingQA style: meetings holding `messages` with `message_id`,
//!   `session_id`, `speaker` and `text`.
//!
//! Loaded banks can be written to and read back from a canonical JSON form
//! carrying `"schema": 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};

pub const BANK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub session_id: String,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    pub ordinal: usize,
    /// Carried through from datasets that name speakers; never used for scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub date: NaiveDate,
    pub utterances: Vec<Utterance>,
}

impl Session {
    /// All utterance texts joined with newlines.
    pub fn text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub sessions: Vec<Session>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BankFormat {
    LongMemEval,
    MeetingQa,
    Canonical,
}

impl FromStr for BankFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "longmemeval" => Ok(BankFormat::LongMemEval),
            "meetingqa" => Ok(BankFormat::MeetingQa),
            "canonical" => Ok(BankFormat::Canonical),
            other => Err(Error::Argument(format!(
                "unknown bank format `{other}` (expected longmemeval, meetingqa or canonical)"
            ))),
        }
    }
}

/// Benchmark question categories. Anything unrecognised maps to `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QuestionType {
    SingleSessionUser,
    SingleSessionAssistant,
    SingleSessionPreference,
    MultiSession,
    KnowledgeUpdate,
    TemporalReasoning,
    #[default]
    Unknown,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::SingleSessionUser,
        QuestionType::SingleSessionAssistant,
        QuestionType::SingleSessionPreference,
        QuestionType::MultiSession,
        QuestionType::KnowledgeUpdate,
        QuestionType::TemporalReasoning,
        QuestionType::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::SingleSessionUser => "single-session-user",
            QuestionType::SingleSessionAssistant => "single-session-assistant",
            QuestionType::SingleSessionPreference => "single-session-preference",
            QuestionType::MultiSession => "multi-session",
            QuestionType::KnowledgeUpdate => "knowledge-update",
            QuestionType::TemporalReasoning => "temporal-reasoning",
            QuestionType::Unknown => "unknown",
        }
    }

    /// Lenient parse: accepts the canonical names plus a few short aliases.
    pub fn parse(s: &str) -> QuestionType {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "single-session-user" | "user" => QuestionType::SingleSessionUser,
            "single-session-assistant" | "assistant" => QuestionType::SingleSessionAssistant,
            "single-session-preference" | "preference" => QuestionType::SingleSessionPreference,
            "multi-session" | "multi" => QuestionType::MultiSession,
            "knowledge-update" => QuestionType::KnowledgeUpdate,
            "temporal-reasoning" | "temporal" => QuestionType::TemporalReasoning,
            _ => QuestionType::Unknown,
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for QuestionType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for QuestionType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(QuestionType::parse(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub question_date: NaiveDate,
    pub question_type: QuestionType,
    /// Utterance id -> usefulness label (0 or 1).
    pub evidence_labels: BTreeMap<String, u8>,
    /// Set when the record carries no positive label.
    #[serde(default)]
    pub unlabeled: bool,
}

impl EvalRecord {
    pub fn positives(&self) -> BTreeSet<&str> {
        self.evidence_labels
            .iter()
            .filter(|(_, &l)| l == 1)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Anything that can answer "does this utterance id exist".
pub trait UtteranceLookup {
    fn contains_utterance(&self, id: &str) -> bool;
}

impl UtteranceLookup for MemoryBank {
    fn contains_utterance(&self, id: &str) -> bool {
        self.utterances().any(|u| u.id == id)
    }
}

impl MemoryBank {
    /// Builds and validates a bank from `(session id, date, texts)` triples,
    /// synthesizing `<session_id>:<ordinal>` utterance ids.
    pub fn from_texts<I, T>(source: &str, sessions: I) -> Result<MemoryBank>
    where
        I: IntoIterator<Item = (String, NaiveDate, Vec<T>)>,
        T: Into<String>,
    {
        let sessions = sessions
            .into_iter()
            .map(|(id, date, texts)| {
                let stamp = Utc.from_utc_datetime(&date.and_time(NaiveTime::MIN));
                let utterances = texts
                    .into_iter()
                    .enumerate()
                    .map(|(ordinal, text)| Utterance {
                        id: format!("{id}:{ordinal}"),
                        session_id: id.clone(),
                        text: text.into(),
                        timestamp: stamp,
                        ordinal,
                        speaker: None,
                    })
                    .collect();
                Session {
                    id,
                    date,
                    utterances,
                }
            })
            .collect();
        let bank = MemoryBank {
            sessions,
            source: source.to_string(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.sessions.iter().flat_map(|s| s.utterances.iter())
    }

    pub fn utterance_count(&self) -> usize {
        self.sessions.iter().map(|s| s.utterances.len()).sum()
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.id == id)
    }

    /// Checks every structural invariant of a bank.
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Validation(format!(
                "memory bank `{}` has no sessions",
                self.source
            )));
        }
        let mut session_ids = HashSet::new();
        let mut utt_ids = HashSet::new();
        for session in &self.sessions {
            if !session_ids.insert(session.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate session id `{}`",
                    session.id
                )));
            }
            if session.utterances.is_empty() {
                return Err(Error::Validation(format!(
                    "session `{}` has no utterances",
                    session.id
                )));
            }
            for (i, u) in session.utterances.iter().enumerate() {
                if u.session_id != session.id {
                    return Err(Error::Validation(format!(
                        "utterance `{}` claims session `{}` but is stored in `{}`",
                        u.id, u.session_id, session.id
                    )));
                }
                if u.ordinal != i {
                    return Err(Error::Validation(format!(
                        "utterance `{}` has ordinal {} at position {}",
                        u.id, u.ordinal, i
                    )));
                }
                if u.text.trim().is_empty() {
                    return Err(Error::Validation(format!("utterance `{}` has empty text", u.id)));
                }
                if !utt_ids.insert(u.id.as_str()) {
                    return Err(Error::Validation(format!("duplicate utterance id `{}`", u.id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            schema: u32,
            source: &'a str,
            sessions: &'a [Session],
        }
        serde_json::to_string_pretty(&Canonical {
            schema: BANK_SCHEMA_VERSION,
            source: &self.source,
            sessions: &self.sessions,
        })
        .expect("bank serialization is infallible")
    }

    /// Hex SHA-256 of the canonical serialization; graphs record it so that
    /// evaluation can refuse a mismatched bank.
    pub fn digest(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save_canonical(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_memory_bank(path: &Path, format: BankFormat) -> Result<MemoryBank> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_memory_bank(&text, format, &path.display().to_string())
}

/// Parses bank text that was read from `source` (used in messages and as provenance).
pub fn parse_memory_bank(text: &str, format: BankFormat, source: &str) -> Result<MemoryBank> {
    let bank = match format {
        BankFormat::LongMemEval => {
            let records: Vec<RawLmeRecord> = parse_one_or_many(text, source)?;
            let mut entries = Vec::new();
            let mut seen_sessions = HashSet::new();
            for record in records {
                // Sessions shared by several records describe the same
                // conversation; the first record to mention one wins.
                let ids: HashSet<String> = record
                    .sessions
                    .iter()
                    .map(|e| e.session_id.0.clone())
                    .collect();
                entries.extend(
                    record
                        .sessions
                        .into_iter()
                        .filter(|e| !seen_sessions.contains(&e.session_id.0)),
                );
                seen_sessions.extend(ids);
            }
            group_lme_sessions(entries, source)?.0
        }
        BankFormat::MeetingQa => parse_meetings(text, source)?,
        BankFormat::Canonical => {
            #[derive(Deserialize)]
            struct Canonical {
                schema: u32,
                source: String,
                sessions: Vec<Session>,
            }
            let c: Canonical = serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
            if c.schema != BANK_SCHEMA_VERSION {
                return Err(Error::Validation(format!(
                    "unsupported bank schema {} (expected {BANK_SCHEMA_VERSION})",
                    c.schema
                )));
            }
            MemoryBank {
                sessions: c.sessions,
                source: c.source,
            }
        }
    };
    bank.validate()?;
    Ok(bank)
}

/// Loads a QA set and cross-checks every label against `known`.
pub fn load_qa_set(path: &Path, known: &dyn UtteranceLookup) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qa_set(&text, &path.display().to_string(), known)
}

pub fn parse_qa_set(text: &str, source: &str, known: &dyn UtteranceLookup) -> Result<Vec<EvalRecord>> {
    let trimmed = text.trim_start();
    let raw: Vec<RawQaRecord> = if trimmed.starts_with('{') {
        // Either a `{"questions": [...]}` wrapper or a single record.
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
        if value.get("questions").is_some() {
            #[derive(Deserialize)]
            struct Wrapper {
                questions: Vec<RawQaRecord>,
            }
            let w: Wrapper = serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
            w.questions
        } else {
            vec![serde_json::from_str(text).map_err(|e| Error::format(source, &e))?]
        }
    } else {
        serde_json::from_str(text).map_err(|e| Error::format(source, &e))?
    };

    let mut records = Vec::with_capacity(raw.len());
    let mut missing = BTreeSet::new();
    for (index, r) in raw.into_iter().enumerate() {
        let id = r.question_id.map(|v| v.0).unwrap_or_else(|| format!("q{index}"));
        let question_date = parse_date_field(&r.question_date).ok_or_else(|| {
            Error::Validation(format!(
                "record `{id}`: unparseable question_date `{}`",
                r.question_date
            ))
        })?;
        let mut labels = BTreeMap::new();
        for (uid, label) in r.evidence_labels.unwrap_or_default() {
            if label > 1 {
                return Err(Error::Validation(format!(
                    "record `{id}`: label for `{uid}` must be 0 or 1, got {label}"
                )));
            }
            labels.insert(uid, label);
        }
        for uid in r.evidence.unwrap_or_default() {
            labels.insert(uid, 1);
        }
        if let Some(sessions) = r.sessions {
            let (_, flagged) = group_lme_sessions(sessions, source)?;
            for uid in flagged {
                labels.insert(uid, 1);
            }
        }
        for uid in labels.keys() {
            if !known.contains_utterance(uid) {
                missing.insert(uid.clone());
            }
        }
        let unlabeled = !labels.values().any(|&l| l == 1);
        if unlabeled {
            warn!(record = %id, "QA record has no positive evidence label");
        }
        records.push(EvalRecord {
            id,
            question: r.question,
            answer: r.answer.0,
            question_date,
            question_type: r.question_type.map(|t| QuestionType::parse(&t)).unwrap_or_default(),
            evidence_labels: labels,
            unlabeled,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "labels reference unknown utterance ids: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(records)
}

/// Accepts `2023-05-01`, `2023/05/01`, RFC 3339, `2023-05-01 12:30[:00]` and
/// the `2023/05/20 (Sat) 02:21` form used by LongMemEval. Date-only values
/// land at midnight UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&d.and_time(NaiveTime::MIN)));
        }
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
        "%Y/%m/%d (%a) %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&dt));
        }
    }
    None
}

fn parse_date_field(s: &str) -> Option<NaiveDate> {
    parse_timestamp(s).map(|t| t.date_naive())
}

fn parse_one_or_many<T: DeserializeOwned>(text: &str, source: &str) -> Result<Vec<T>> {
    if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| Error::format(source, &e))
    } else {
        Ok(vec![serde_json::from_str(text).map_err(|e| Error::format(source, &e))?])
    }
}

/// A string or a number, stringified (datasets use both for ids).
#[derive(Debug, Clone)]
struct IdField(String);

impl<'de> Deserialize<'de> for IdField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(IdField(s)),
            serde_json::Value::Number(n) => Ok(IdField(n.to_string())),
            other => Err(serde::de::Error::custom(format!(
                "expected string or number id, got {other}"
            ))),
        }
    }
}

/// Answers are occasionally numeric in the benchmarks.
#[derive(Debug, Clone, Default)]
struct AnswerField(String);

impl<'de> Deserialize<'de> for AnswerField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(AnswerField(s)),
            serde_json::Value::Null => Ok(AnswerField(String::new())),
            other => Ok(AnswerField(other.to_string())),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawLmeRecord {
    #[serde(default)]
    sessions: Vec<RawLmeEntry>,
}

#[derive(Debug, Deserialize)]
struct RawLmeEntry {
    session_id: IdField,
    date: String,
    #[serde(alias = "utterances")]
    utterance: RawUtteranceField,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawUtteranceField {
    One(RawUtterance),
    Many(Vec<RawUtterance>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawUtterance {
    Text(String),
    Turn {
        #[serde(alias = "content")]
        text: String,
        #[serde(default, alias = "utterance_id")]
        id: Option<IdField>,
        #[serde(default, alias = "role")]
        speaker: Option<String>,
        #[serde(default)]
        has_answer: bool,
    },
}

/// Groups flattened or nested LongMemEval entries by session id.
/// Also returns the ids of utterances flagged `has_answer`.
fn group_lme_sessions(entries: Vec<RawLmeEntry>, source: &str) -> Result<(MemoryBank, Vec<String>)> {
    let mut order: Vec<String> = Vec::new();
    let mut sessions: HashMap<String, Session> = HashMap::new();
    let mut flagged = Vec::new();
    for entry in entries {
        let session_id = entry.session_id.0;
        let stamp = parse_timestamp(&entry.date).ok_or_else(|| {
            Error::Validation(format!(
                "session `{session_id}`: unparseable date `{}`",
                entry.date
            ))
        })?;
        let session = sessions.entry(session_id.clone()).or_insert_with(|| {
            order.push(session_id.clone());
            Session {
                id: session_id.clone(),
                date: stamp.date_naive(),
                utterances: Vec::new(),
            }
        });
        let turns = match entry.utterance {
            RawUtteranceField::One(u) => vec![u],
            RawUtteranceField::Many(us) => us,
        };
        for turn in turns {
            let ordinal = session.utterances.len();
            let (text, id, speaker, has_answer) = match turn {
                RawUtterance::Text(t) => (t, None, None, false),
                RawUtterance::Turn {
                    text,
                    id,
                    speaker,
                    has_answer,
                } => (text, id.map(|i| i.0), speaker, has_answer),
            };
            let id = id.unwrap_or_else(|| format!("{session_id}:{ordinal}"));
            if has_answer {
                flagged.push(id.clone());
            }
            session.utterances.push(Utterance {
                id,
                session_id: session_id.clone(),
                text,
                timestamp: stamp,
                ordinal,
                speaker,
            });
        }
    }
    let sessions = order
        .into_iter()
        .map(|id| sessions.remove(&id).expect("grouped session"))
        .collect();
    Ok((
        MemoryBank {
            sessions,
            source: source.to_string(),
        },
        flagged,
    ))
}

#[derive(Debug, Deserialize)]
struct RawMeeting {
    #[serde(default, alias = "meeting_id")]
    session_id: Option<IdField>,
    #[serde(default)]
    date: Option<String>,
    messages: Vec<RawMessage>,
}

#[derive(Debug, Deserialize)]
struct RawMessage {
    #[serde(default)]
    message_id: Option<IdField>,
    #[serde(default)]
    session_id: Option<IdField>,
    #[serde(default)]
    speaker: Option<String>,
    text: String,
    #[serde(default, alias = "date")]
    timestamp: Option<String>,
}

fn parse_meetings(text: &str, source: &str) -> Result<MemoryBank> {
    let meetings: Vec<RawMeeting> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(|e| Error::format(source, &e))?
    } else {
        #[derive(Deserialize)]
        struct Wrapper {
            meetings: Vec<RawMeeting>,
        }
        let w: Wrapper = serde_json::from_str(text).map_err(|e| Error::format(source, &e))?;
        w.meetings
    };

    let mut order: Vec<String> = Vec::new();
    let mut sessions: HashMap<String, Session> = HashMap::new();
    for (mi, meeting) in meetings.into_iter().enumerate() {
        let meeting_stamp = meeting.date.as_deref().map(|d| {
            parse_timestamp(d)
                .ok_or_else(|| Error::Validation(format!("meeting {mi}: unparseable date `{d}`")))
        });
        let meeting_stamp = meeting_stamp.transpose()?;
        let meeting_id = meeting.session_id.map(|i| i.0);
        for msg in meeting.messages {
            let session_id = msg
                .session_id
                .map(|i| i.0)
                .or_else(|| meeting_id.clone())
                .ok_or_else(|| {
                    Error::Validation(format!("meeting {mi}: message without a session id"))
                })?;
            let stamp = match msg.timestamp.as_deref() {
                Some(t) => parse_timestamp(t).ok_or_else(|| {
                    Error::Validation(format!("session `{session_id}`: unparseable timestamp `{t}`"))
                })?,
                None => meeting_stamp.ok_or_else(|| {
                    Error::Validation(format!("session `{session_id}`: no date on meeting or message"))
                })?,
            };
            let session = sessions.entry(session_id.clone()).or_insert_with(|| {
                order.push(session_id.clone());
                Session {
                    id: session_id.clone(),
                    date: stamp.date_naive(),
                    utterances: Vec::new(),
                }
            });
            let ordinal = session.utterances.len();
            session.utterances.push(Utterance {
                id: msg
                    .message_id
                    .map(|i| i.0)
                    .unwrap_or_else(|| format!("{session_id}:{ordinal}")),
                session_id: session_id.clone(),
                text: msg.text,
                timestamp: stamp,
                ordinal,
                speaker: msg.speaker,
            });
        }
    }
    Ok(MemoryBank {
        sessions: order
            .into_iter()
            .map(|id| sessions.remove(&id).expect("grouped session"))
            .collect(),
        source: source.to_string(),
    })
}

#[derive(Debug, Deserialize)]
struct RawQaRecord {
    #[serde(default)]
    question_id: Option<IdField>,
    question: String,
    #[serde(default)]
    answer: AnswerField,
    question_date: String,
    #[serde(default)]
    question_type: Option<String>,
    #[serde(default)]
    evidence_labels: Option<BTreeMap<String, u8>>,
    #[serde(default)]
    evidence: Option<Vec<String>>,
    #[serde(default)]
    sessions: Option<Vec<RawLmeEntry>>,
}
