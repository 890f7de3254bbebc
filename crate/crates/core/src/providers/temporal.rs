use chrono::{Datelike, Days, Months, NaiveDate, NaiveTime, TimeZone, Utc, Weekday};

use crate::error::{Error, Result};

use super::{TemporalEmbedder, TemporalRepr};

/// Calendar-arithmetic resolver for temporal expressions.
///
/// Several tokens resolve to the hull of their intervals.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTemporalResolver;

impl TemporalEmbedder for ReferenceTemporalResolver {
    fn temporal_embed(&self, tokens: &[String], reference: NaiveDate) -> Result<TemporalRepr> {
        resolve_tokens(tokens, reference)
    }
}

pub(super) fn resolve_tokens(tokens: &[String], reference: NaiveDate) -> Result<TemporalRepr> {
    if tokens.is_empty() {
        return Err(Error::Argument("no temporal tokens to resolve".into()));
    }
    let mut unresolved = Vec::new();
    let mut hull: Option<(NaiveDate, NaiveDate)> = None;
    for token in tokens {
        match resolve_token(token, reference) {
            Some((s, e)) => {
                hull = Some(match hull {
                    Some((hs, he)) => (hs.min(s), he.max(e)),
                    None => (s, e),
                })
            }
            None => unresolved.push(token.clone()),
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::TemporalResolution { tokens: unresolved });
    }
    let (start, end) = hull.expect("non-empty tokens");
    Ok(days_interval(start, end))
}

pub(super) fn day_interval(date: NaiveDate) -> TemporalRepr {
    days_interval(date, date)
}

fn days_interval(first: NaiveDate, last: NaiveDate) -> TemporalRepr {
    let end_of_day = NaiveTime::from_hms_opt(23, 59, 59).expect("valid time");
    TemporalRepr {
        start: Utc.from_utc_datetime(&first.and_time(NaiveTime::MIN)),
        end: Utc.from_utc_datetime(&last.and_time(end_of_day)),
        embedding: None,
    }
}

/// Resolves one expression to an inclusive day range relative to `reference`.
///
/// Understood forms: today / yesterday / tomorrow / the day before yesterday;
/// last|this|next|past week|month|year; last weekend; last <weekday>;
/// `N days|weeks|months|years ago` (digits, number words, `a`/`an`);
/// ISO `2023-05-01` or `2023/05/01`; `May 1[st][, 2023]`, `1 May [2023]`;
/// `May 2023`; a bare four-digit year. Month-day forms without a year take
/// the most recent such date not after the reference.
pub fn resolve_token(token: &str, reference: NaiveDate) -> Option<(NaiveDate, NaiveDate)> {
    let norm: String = token
        .to_lowercase()
        .replace([',', '.'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let words: Vec<&str> = norm.split(' ').collect();
    let day = |d: NaiveDate| Some((d, d));

    match words.as_slice() {
        ["today"] => return day(reference),
        ["yesterday"] => return day(reference - Days::new(1)),
        ["tomorrow"] => return day(reference + Days::new(1)),
        ["the", "day", "before", "yesterday"] => return day(reference - Days::new(2)),
        ["last", "weekend"] => {
            let monday = week_start(reference) - Days::new(7);
            return Some((monday + Days::new(5), monday + Days::new(6)));
        }
        [rel @ ("last" | "this" | "next" | "past"), unit @ ("week" | "month" | "year")] => {
            return relative_period(rel, unit, reference);
        }
        ["last", wd] => {
            let target = weekday(wd)?;
            let mut d = reference - Days::new(1);
            while d.weekday() != target {
                d = d - Days::new(1);
            }
            return day(d);
        }
        [n, unit, "ago"] => {
            let n = count(n)?;
            let unit = unit.strip_suffix('s').unwrap_or(unit);
            return match unit {
                "day" => day(reference.checked_sub_days(Days::new(n))?),
                "week" => {
                    let d = reference.checked_sub_days(Days::new(7 * n))?;
                    let s = week_start(d);
                    Some((s, s + Days::new(6)))
                }
                "month" => month_range(reference.checked_sub_months(Months::new(n as u32))?),
                "year" => year_range(reference.year() - n as i32),
                _ => None,
            };
        }
        _ => {}
    }

    if let Some(d) = iso_date(&norm) {
        return day(d);
    }
    match words.as_slice() {
        [y] if y.len() == 4 => year_range(y.parse().ok()?),
        [m, y] if month(m).is_some() && y.len() == 4 => {
            month_range(NaiveDate::from_ymd_opt(y.parse().ok()?, month(m)?, 1)?)
        }
        [m, d] if month(m).is_some() => day(recent_month_day(month(m)?, ordinal_day(d)?, reference)?),
        [d, m] if month(m).is_some() => day(recent_month_day(month(m)?, ordinal_day(d)?, reference)?),
        [m, d, y] if month(m).is_some() => day(NaiveDate::from_ymd_opt(
            y.parse().ok()?,
            month(m)?,
            ordinal_day(d)?,
        )?),
        [d, m, y] if month(m).is_some() => day(NaiveDate::from_ymd_opt(
            y.parse().ok()?,
            month(m)?,
            ordinal_day(d)?,
        )?),
        _ => None,
    }
}

fn relative_period(rel: &str, unit: &str, reference: NaiveDate) -> Option<(NaiveDate, NaiveDate)> {
    if rel == "past" {
        let back = match unit {
            "week" => 7,
            "month" => 30,
            "year" => 365,
            _ => return None,
        };
        return Some((reference - Days::new(back), reference - Days::new(1)));
    }
    let shift: i32 = match rel {
        "last" => -1,
        "next" => 1,
        _ => 0,
    };
    match unit {
        "week" => {
            let s = week_start(reference);
            let s = if shift < 0 {
                s - Days::new(7)
            } else {
                s + Days::new(7 * shift as u64)
            };
            Some((s, s + Days::new(6)))
        }
        "month" => {
            let first = reference.with_day(1)?;
            let first = if shift < 0 {
                first.checked_sub_months(Months::new(1))?
            } else {
                first.checked_add_months(Months::new(shift as u32))?
            };
            month_range(first)
        }
        "year" => year_range(reference.year() + shift),
        _ => None,
    }
}

fn week_start(d: NaiveDate) -> NaiveDate {
    d - Days::new(u64::from(d.weekday().num_days_from_monday()))
}

fn month_range(any_day: NaiveDate) -> Option<(NaiveDate, NaiveDate)> {
    let first = any_day.with_day(1)?;
    let last = first.checked_add_months(Months::new(1))? - Days::new(1);
    Some((first, last))
}

fn year_range(year: i32) -> Option<(NaiveDate, NaiveDate)> {
    Some((
        NaiveDate::from_ymd_opt(year, 1, 1)?,
        NaiveDate::from_ymd_opt(year, 12, 31)?,
    ))
}

fn recent_month_day(month: u32, day: u32, reference: NaiveDate) -> Option<NaiveDate> {
    let this_year = NaiveDate::from_ymd_opt(reference.year(), month, day);
    match this_year {
        Some(d) if d <= reference => Some(d),
        _ => NaiveDate::from_ymd_opt(reference.year() - 1, month, day),
    }
}

fn iso_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y/%m/%d"))
        .ok()
}

pub(crate) fn month(word: &str) -> Option<u32> {
    const NAMES: [&str; 12] = [
        "january", "february", "march", "april", "may", "june", "july", "august", "september",
        "october", "november", "december",
    ];
    if word == "sept" {
        return Some(9);
    }
    NAMES
        .iter()
        .position(|n| *n == word || (word.len() == 3 && n.starts_with(word)))
        .map(|i| i as u32 + 1)
}

fn weekday(word: &str) -> Option<Weekday> {
    word.parse().ok()
}

fn ordinal_day(word: &str) -> Option<u32> {
    let digits = word.trim_end_matches(|c: char| c.is_ascii_alphabetic());
    let d: u32 = digits.parse().ok()?;
    (1..=31).contains(&d).then_some(d)
}

fn count(word: &str) -> Option<u64> {
    const WORDS: [&str; 12] = [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
        "twelve",
    ];
    match word {
        "a" | "an" => Some(1),
        w => w
            .parse()
            .ok()
            .or_else(|| WORDS.iter().position(|n| *n == w).map(|i| i as u64 + 1)),
    }
}
