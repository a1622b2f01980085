//! Zero-shot evaluation: greedy generation per question, numeric answer
//! extraction, exact-match accuracy.

use anyhow::{bail, Result};
use dlab_core::model::{Decode, Transformer};
use dlab_core::tokenizer;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::dataset::EvalItem;

/// Appended to every question at evaluation time. Any text that steers
/// the model into the extraction grammar works; override via config.
pub const DEFAULT_OUTPUT_MODIFIER: &str =
    " End your response with 'The final answer is: <number>'.";

/// Pull a numeric answer out of free text. If "final answer is" occurs
/// (case-insensitive, optional colon), the first number after its last
/// occurrence wins; otherwise the last number in the text. Currency
/// symbols, digit-grouping commas, and trailing periods are stripped.
pub fn extract_answer(response: &str) -> Option<f64> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let marker = MARKER.get_or_init(|| Regex::new(r"(?i)final answer is:?").unwrap());
    let number = NUMBER.get_or_init(|| Regex::new(r"-?\$?-?\d[\d,]*(?:\.\d+)?").unwrap());

    if let Some(m) = marker.find_iter(response).last() {
        if let Some(n) = number.find(&response[m.end()..]) {
            return parse_number(n.as_str());
        }
    }
    let last = number.find_iter(response).last()?;
    parse_number(last.as_str())
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s.chars().filter(|c| *c != '$' && *c != ',').collect();
    cleaned.parse().ok()
}

fn answers_match(extracted: f64, gold: f64) -> bool {
    if gold.fract() == 0.0 && extracted.fract() == 0.0 {
        extracted == gold
    } else {
        (extracted - gold).abs() <= 1e-6 * gold.abs().max(1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: u64,
    pub extracted: Option<f64>,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub outcomes: Vec<ItemOutcome>,
    pub correct: usize,
    pub incorrect: usize,
    pub extraction_failures: usize,
    pub accuracy: f64,
}

/// Evaluate with greedy decoding; extraction failures and generation
/// faults count as incorrect.
pub fn evaluate(
    model: &Transformer,
    items: &[EvalItem],
    max_new_tokens: usize,
    output_modifier: &str,
    label: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        bail!("empty evaluation set");
    }
    let mut outcomes = Vec::with_capacity(items.len());
    let mut correct = 0;
    let mut failures = 0;
    for item in items {
        let prompt_text = format!("{}{}\n", item.question, output_modifier);
        let prompt = tokenizer::encode(&prompt_text);
        let extracted = model
            .generate(&prompt, max_new_tokens, Decode::Greedy)
            .ok()
            .map(|tokens| tokenizer::decode(&tokens))
            .and_then(|text| extract_answer(&text));
        let ok = extracted.map(|v| answers_match(v, item.answer)).unwrap_or(false);
        if ok {
            correct += 1;
        }
        if extracted.is_none() {
            failures += 1;
        }
        outcomes.push(ItemOutcome {
            id: item.id,
            extracted,
            correct: ok,
        });
    }
    Ok(EvalReport {
        label: label.to_string(),
        correct,
        incorrect: items.len() - correct,
        extraction_failures: failures,
        accuracy: correct as f64 / items.len() as f64,
        outcomes,
    })
}

/// Next-token accuracy over response positions of held-out examples.
/// Question positions are excluded: their tokens (names, operands) are
/// irreducibly unpredictable and would measure dataset entropy.
pub fn response_token_accuracy(model: &Transformer, items: &[EvalItem]) -> Result<f64> {
    if items.is_empty() {
        bail!("empty evaluation set");
    }
    let vocab = model.config.vocab_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for item in items {
        let response = crate::dataset::gold_response(item)?;
        let mut seq = tokenizer::encode(&format!("{}\n{}", item.question, response));
        seq.push(tokenizer::EOS);
        let prompt_len = tokenizer::encode(&item.question).len() + 1;
        let mut cache = model.new_cache();
        let logits = model
            .infer_extend(&seq[..seq.len() - 1], &mut cache)
            .map_err(|e| anyhow::anyhow!("forward pass: {e:?}"))?;
        for pos in prompt_len - 1..seq.len() - 1 {
            let row = &logits[pos * vocab..(pos + 1) * vocab];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            if pred == seq[pos + 1] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
