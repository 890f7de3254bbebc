use crate::error::{Error, Result};

use super::AnswerGenerator;

pub const GENERATION_PROMPT: &str = include_str!("../../prompts/generation.txt");

/// What the reference answerer says when it has no evidence.
pub const NO_ANSWER: &str = "IDK";

pub fn render_generation_prompt(template: &str, question: &str, evidence: &[&str], separator: &str) -> String {
    template
        .replace("{memory}", &evidence.join(separator))
        .replace("{question}", question)
}

/// Offline echo baseline: returns the top-ranked evidence text verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceAnswerer;

impl AnswerGenerator for ReferenceAnswerer {
    fn generate_answer(&self, question: &str, evidence: &[&str]) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::Argument("question is empty".into()));
        }
        Ok(evidence.first().map_or(NO_ANSWER, |e| *e).to_string())
    }
}
