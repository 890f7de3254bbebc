use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;

use crate::providers::{resolve_token, TemporalRepr};

pub const DEFAULT_TAU_DAYS: f64 = 30.0;

const MONTH: &str = "(?:january|february|march|april|may|june|july|august|september|october|november|december|jan|feb|mar|apr|jun|jul|aug|sept|sep|oct|nov|dec)";
const COUNT: &str = "(?:\\d+|an?|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)";
const WEEKDAY: &str = "(?:monday|tuesday|wednesday|thursday|friday|saturday|sunday)";

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let ordinal = "\\d{1,2}(?:st|nd|rd|th)?";
        let patterns = [
            "the day before yesterday".to_string(),
            "yesterday|today|tomorrow".to_string(),
            "last weekend".to_string(),
            "(?:last|this|next|past) (?:week|month|year)".to_string(),
            format!("last {WEEKDAY}"),
            format!("{COUNT} (?:day|week|month|year)s? ago"),
            "\\d{4}[-/]\\d{1,2}[-/]\\d{1,2}".to_string(),
            format!("{MONTH}\\.? {ordinal}(?:,? \\d{{4}})?"),
            format!("{ordinal} (?:of )?{MONTH}(?:,? \\d{{4}})?"),
            format!("{MONTH},? \\d{{4}}"),
            "(?:19|20)\\d{2}".to_string(),
        ];
        let alternation = patterns.join("|");
        Regex::new(&format!("(?i)\\b(?:{alternation})\\b")).expect("temporal grammar compiles")
    })
}

/// Temporal expressions in `text`, in order of appearance.
///
/// Ordering words ("first", "before", "after") are not extracted. Spans that
/// cannot name a real date in any year (e.g. "February 31") are dropped.
pub fn extract_temporal_tokens(text: &str) -> Vec<String> {
    // A leap-year reference keeps "February 29" resolvable.
    let probe = NaiveDate::from_ymd_opt(2024, 12, 31).expect("valid date");
    grammar()
        .find_iter(text)
        .map(|m| m.as_str().replace(" of ", " "))
        .filter(|t| resolve_token(t, probe).is_some())
        .collect()
}

/// The session day widened to cover every resolvable in-text mention.
pub fn candidate_interval(text: &str, session_date: NaiveDate) -> TemporalRepr {
    extract_temporal_tokens(text)
        .iter()
        .filter_map(|t| resolve_token(t, session_date))
        .fold(TemporalRepr::day(session_date), |acc, (s, e)| {
            acc.hull(&TemporalRepr::day(s)).hull(&TemporalRepr::day(e))
        })
}

/// Interval Jaccard when the intervals share a day, else
/// `exp(-gap_days / tau)` where the gap counts calendar days from the end of
/// the earlier interval to the start of the later one.
///
/// Both intervals are taken at day granularity with inclusive ends.
pub fn interval_affinity(a: &TemporalRepr, b: &TemporalRepr, tau_days: f64) -> f64 {
    let span = |r: &TemporalRepr| (r.start.date_naive(), r.end.date_naive());
    let ((a0, a1), (b0, b1)) = (span(a), span(b));
    let days = |from: NaiveDate, to: NaiveDate| (to - from).num_days() as f64;
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if lo <= hi {
        let inter = days(lo, hi) + 1.0;
        let union = days(a0, a1) + days(b0, b1) + 2.0 - inter;
        return inter / union;
    }
    (-days(hi, lo) / tau_days).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn question_examples() {
        assert_eq!(extract_temporal_tokens("Where did I have dinner yesterday?"), ["yesterday"]);
        assert!(extract_temporal_tokens("What do I usually say at work?").is_empty());
        assert_eq!(extract_temporal_tokens("Most visited coffee shop last month?"), ["last month"]);
    }

    #[test]
    fn grammar_coverage() {
        let cases: &[(&str, &[&str])] = &[
            ("What did I cook 3 days ago", &["3 days ago"]),
            ("a week ago I ran", &["a week ago"]),
            ("on 2023-05-01 and 2023/06/02", &["2023-05-01", "2023/06/02"]),
            ("trip in May 2023", &["May 2023"]),
            ("since March 3rd, 2022", &["March 3rd, 2022"]),
            ("on the 4th of July", &["4th July"]),
            ("last Friday at the bar", &["last Friday"]),
            ("the day before yesterday", &["the day before yesterday"]),
            ("back in 1999", &["1999"]),
            ("Sept. 9", &["Sept. 9"]),
        ];
        for (text, want) in cases {
            assert_eq!(&extract_temporal_tokens(text), want, "{text}");
        }
    }

    #[test]
    fn ignores_ordering_words_and_modal_may() {
        assert!(extract_temporal_tokens("Which show did I watch first?").is_empty());
        assert!(extract_temporal_tokens("May I ask what I said before the trip?").is_empty());
        assert!(extract_temporal_tokens("I will march on").is_empty());
        assert!(extract_temporal_tokens("February 31").is_empty());
        assert!(extract_temporal_tokens("room 20233").is_empty());
    }

    #[test]
    fn extracted_tokens_resolve() {
        let r = d(2023, 5, 2);
        for t in extract_temporal_tokens("yesterday, last week, 2 months ago, June 5, 2021") {
            assert!(resolve_token(&t, r).is_some(), "{t}");
        }
    }

    #[test]
    fn identical_intervals_score_one() {
        let a = TemporalRepr::day(d(2023, 5, 1));
        assert_eq!(interval_affinity(&a, &a, 30.0), 1.0);
    }

    #[test]
    fn thirty_day_gap_is_inverse_e() {
        let a = TemporalRepr::day(d(2023, 1, 1));
        let b = TemporalRepr::day(d(2023, 1, 31));
        assert!((interval_affinity(&a, &b, 30.0) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((interval_affinity(&b, &a, 30.0) - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn adjacent_days_are_one_day_apart() {
        let a = TemporalRepr::day(d(2023, 1, 1));
        let b = TemporalRepr::day(d(2023, 1, 2));
        assert!((interval_affinity(&a, &b, 30.0) - (-1.0f64 / 30.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn partial_overlap_is_jaccard() {
        // Day 1 against days 1..=4: 1 day of 4.
        let day = TemporalRepr::day(d(2023, 1, 1));
        let span = day.hull(&TemporalRepr::day(d(2023, 1, 4)));
        assert!((interval_affinity(&day, &span, 30.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mentions_widen_the_candidate_interval() {
        let repr = candidate_interval("we met yesterday and again today", d(2023, 5, 10));
        assert_eq!(repr, TemporalRepr::day(d(2023, 5, 9)).hull(&TemporalRepr::day(d(2023, 5, 10))));
        assert_eq!(candidate_interval("no dates", d(2023, 5, 10)), TemporalRepr::day(d(2023, 5, 10)));
    }
}
