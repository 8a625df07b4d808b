//! Strict answer judging: prompt rendering and reply parsing.

use std::sync::Arc;

use super::{ChatMessage, Generator, Judge, JudgeVerdict, ProviderError, SamplingParams};
use crate::prompts::{fill, JUDGE_PROMPT};

pub fn judge_prompt(question: &str, response: &str, correct_answer: &str) -> String {
    fill(
        JUDGE_PROMPT,
        &[
            ("question", question),
            ("response", response),
            ("correct_answer", correct_answer),
        ],
    )
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Extracted,
    CorrectAnswer,
    Reasoning,
    Correct,
    Confidence,
}

fn field_start(line: &str) -> Option<(Field, &str)> {
    let trimmed = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '-' | '#' | '`'));
    let (key, rest) = trimmed.split_once(':')?;
    let key = key
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '`'))
        .to_ascii_lowercase();
    let field = match key.as_str() {
        "extracted_final_answer" => Field::Extracted,
        "[correct_answer]" | "correct_answer" => Field::CorrectAnswer,
        "reasoning" => Field::Reasoning,
        "correct" => Field::Correct,
        "confidence" => Field::Confidence,
        _ => return None,
    };
    Some((field, rest))
}

fn clean(value: &str) -> String {
    value
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '`' | '\'' | '"'))
        .trim()
        .to_string()
}

/// Parse a judge reply laid out as `field: value` lines. Values may wrap
/// onto following lines until the next recognized field.
pub fn parse_judge_reply(raw: &str) -> Result<JudgeVerdict, ProviderError> {
    let mut fields: Vec<(Field, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((field, rest)) = field_start(line) {
            fields.push((field, rest.to_string()));
        } else if let Some((_, value)) = fields.last_mut() {
            value.push('\n');
            value.push_str(line);
        }
    }
    let get = |f: Field| {
        fields
            .iter()
            .rev()
            .find(|(k, _)| *k == f)
            .map(|(_, v)| clean(v))
    };
    let parse_err = |message: &str| ProviderError::JudgeParse {
        message: message.to_string(),
        raw: raw.to_string(),
    };

    let correct_raw = get(Field::Correct).ok_or_else(|| parse_err("missing 'correct:' field"))?;
    let correct = match correct_raw
        .trim_end_matches(['.', '!'])
        .to_ascii_lowercase()
        .as_str()
    {
        "yes" => true,
        "no" => false,
        other => return Err(parse_err(&format!("'correct:' must be yes or no, got '{other}'"))),
    };

    let confidence = match get(Field::Confidence) {
        None => 100,
        Some(v) => {
            let digits: String = v
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            if digits.is_empty() {
                100
            } else {
                digits.parse::<u64>().map_or(100, |n| n.min(100) as u8)
            }
        }
    };

    let extracted_final_answer = get(Field::Extracted).filter(|v| !v.eq_ignore_ascii_case("none") && !v.is_empty());

    Ok(JudgeVerdict {
        extracted_final_answer,
        reasoning: get(Field::Reasoning).unwrap_or_default(),
        correct,
        confidence,
    })
}

/// Render a verdict in the reply layout that [`parse_judge_reply`] reads.
pub fn render_judge_reply(v: &JudgeVerdict) -> String {
    format!(
        "extracted_final_answer: {}\n\nreasoning: {}\n\ncorrect: {}\n\nconfidence: {}%\n",
        v.extracted_final_answer.as_deref().unwrap_or("None"),
        v.reasoning,
        if v.correct { "yes" } else { "no" },
        v.confidence
    )
}

/// Judge backed by a chat model prompted with the strict judging template.
pub struct GeneratorJudge {
    generator: Arc<dyn Generator>,
    params: SamplingParams,
}

impl GeneratorJudge {
    pub fn new(generator: Arc<dyn Generator>) -> Self {
        Self {
            generator,
            params: SamplingParams {
                temperature: 0.0,
                max_tokens: 2048,
                ..SamplingParams::default()
            },
        }
    }
}

impl Judge for GeneratorJudge {
    fn judge_raw(
        &self,
        question: &str,
        response: &str,
        correct_answer: &str,
    ) -> Result<JudgeVerdict, ProviderError> {
        let prompt = judge_prompt(question, response, correct_answer);
        let out = self.generator.generate(&[ChatMessage::user(prompt)], &self.params)?;
        parse_judge_reply(&out.text)
    }

    fn identity(&self) -> String {
        format!("llm-judge({})", self.generator.identity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_fields_from_hand_written_reply() {
        let reply = "extracted_final_answer: 1912\n\
                     reasoning: The response gives 1912, matching\nthe correct answer.\n\
                     correct: yes\n\
                     confidence: 80%\n";
        let v = parse_judge_reply(reply).unwrap();
        assert!(v.correct);
        assert_eq!(v.confidence, 80);
        assert_eq!(v.extracted_final_answer.as_deref(), Some("1912"));
        assert!(v.reasoning.contains("matching\nthe correct"));
    }

    #[test]
    fn markdown_decorations_and_defaults() {
        let reply = "**extracted_final_answer:** None\n**correct:** no\n";
        let v = parse_judge_reply(reply).unwrap();
        assert!(!v.correct);
        assert_eq!(v.extracted_final_answer, None);
        assert_eq!(v.confidence, 100);
    }

    #[test]
    fn missing_correct_field_keeps_raw_text() {
        let reply = "extracted_final_answer: 3\nreasoning: fine";
        match parse_judge_reply(reply) {
            Err(ProviderError::JudgeParse { raw, .. }) => assert_eq!(raw, reply),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn correct_must_be_yes_or_no() {
        assert!(parse_judge_reply("correct: probably").is_err());
        assert!(parse_judge_reply("correct: 'yes'").unwrap().correct);
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            answer in proptest::option::of("[a-zA-Z0-9][a-zA-Z0-9 .,]{0,20}[a-zA-Z0-9]"),
            reasoning in "[a-zA-Z0-9][a-zA-Z0-9 .,]{0,40}[a-zA-Z0-9]",
            correct in any::<bool>(),
            confidence in 0u8..=100,
        ) {
            prop_assume!(answer.as_deref().is_none_or(|a| !a.eq_ignore_ascii_case("none")));
            let v = JudgeVerdict { extracted_final_answer: answer, reasoning, correct, confidence };
            prop_assert_eq!(parse_judge_reply(&render_judge_reply(&v)).unwrap(), v);
        }
    }
}
