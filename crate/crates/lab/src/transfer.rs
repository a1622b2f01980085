//! Transfer-set construction and its file format: run the teacher over
//! prompt-modified queries, keep its response tokens and per-position
//! logits as the student's training corpus.

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dlab_core::model::{Decode, Transformer};
use dlab_core::tokenizer;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::dataset::EvalItem;

pub const TEACHER_TEMPLATE: &str = "As a teacher, guide your student through solving the question below. Provide a clear, simple explanation for someone unfamiliar with the problem.";
pub const GROUND_TRUTH_TEMPLATE: &str = "As a smart language model, provide a detailed answer that is clear and feasible for smaller models to understand and learn from without losing too much detail. ";
pub const CONFIDENCE_TEMPLATE: &str =
    "Briefly double-check that your answer is correct once done.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    None,
    Teacher,
    GroundTruth,
    Confidence,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::None,
        PromptStrategy::Teacher,
        PromptStrategy::GroundTruth,
        PromptStrategy::Confidence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptStrategy::None => "none",
            PromptStrategy::Teacher => "teacher",
            PromptStrategy::GroundTruth => "ground-truth",
            PromptStrategy::Confidence => "confidence",
        }
    }

    pub fn parse(s: &str) -> Option<PromptStrategy> {
        match s {
            "none" => Some(PromptStrategy::None),
            "teacher" => Some(PromptStrategy::Teacher),
            "ground-truth" | "ground_truth" => Some(PromptStrategy::GroundTruth),
            "confidence" => Some(PromptStrategy::Confidence),
            _ => None,
        }
    }

    fn template(&self) -> &'static str {
        match self {
            PromptStrategy::None => "",
            PromptStrategy::Teacher => TEACHER_TEMPLATE,
            PromptStrategy::GroundTruth => GROUND_TRUTH_TEMPLATE,
            PromptStrategy::Confidence => CONFIDENCE_TEMPLATE,
        }
    }
}

/// Prefix strategies put the template before the query on its own line;
/// the confidence strategy appends its sentence after the question.
pub fn apply_strategy(strategy: PromptStrategy, query: &str) -> String {
    match strategy {
        PromptStrategy::None => query.to_string(),
        PromptStrategy::Teacher | PromptStrategy::GroundTruth => {
            format!("{}\n{query}", strategy.template())
        }
        PromptStrategy::Confidence => format!("{query} {}", strategy.template()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub record_id: u64,
    pub strategy: PromptStrategy,
    pub raw_query: String,
    pub modified_prompt: String,
    pub prompt_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    /// Row-major response-length x vocab, teacher logits at temperature 1.
    pub teacher_logits: Vec<f32>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct TransferSet {
    pub format_version: u32,
    pub teacher_config_hash: String,
    pub strategy: PromptStrategy,
    pub degenerate_count: usize,
    pub records: Vec<TransferRecord>,
}

pub const FORMAT_VERSION: u32 = 1;

/// One record per query, in dataset order. Queries whose generation
/// fails or yields zero response tokens are excluded and counted.
pub fn build_transfer_set(
    teacher: &Transformer,
    items: &[EvalItem],
    strategy: PromptStrategy,
    max_new_tokens: usize,
    workers: usize,
) -> Result<TransferSet> {
    if items.is_empty() {
        bail!("dataset is empty");
    }
    let hash = crate::checkpoint::base_weight_hash(teacher);
    let chunks = partition(items, workers.max(1));
    let mut per_chunk: Vec<Vec<Option<TransferRecord>>> = Vec::new();
    if chunks.len() == 1 {
        per_chunk.push(build_chunk(teacher, chunks[0], strategy, max_new_tokens));
    } else {
        // The model graph is not shareable across threads; each worker
        // rebuilds its own copy from a plain-data snapshot. Greedy
        // decoding keeps the output independent of the worker count.
        let snapshot = ModelSnapshot::of(teacher);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in &chunks {
                let snap = &snapshot;
                handles.push(scope.spawn(move || {
                    let model = snap.rebuild();
                    build_chunk(&model, chunk, strategy, max_new_tokens)
                }));
            }
            for h in handles {
                per_chunk.push(h.join().expect("worker panicked"));
            }
        });
    }
    let mut records = Vec::with_capacity(items.len());
    let mut degenerate = 0usize;
    for rec in per_chunk.into_iter().flatten() {
        match rec {
            Some(r) => records.push(r),
            None => degenerate += 1,
        }
    }
    Ok(TransferSet {
        format_version: FORMAT_VERSION,
        teacher_config_hash: hash,
        strategy,
        degenerate_count: degenerate,
        records,
    })
}

/// Send-safe copy of a model's configuration and weights.
struct ModelSnapshot {
    config: dlab_core::model::ModelConfig,
    values: Vec<Vec<f64>>,
}

impl ModelSnapshot {
    fn of(model: &Transformer) -> ModelSnapshot {
        assert!(
            model.lora_spec().is_none(),
            "teacher models carry no adapters"
        );
        ModelSnapshot {
            config: model.config,
            values: model.named_tensors().iter().map(|(_, t)| t.to_vec()).collect(),
        }
    }

    fn rebuild(&self) -> Transformer {
        let out = Transformer::new(self.config).expect("config was validated");
        for ((_, dst), src) in out.named_tensors().iter().zip(&self.values) {
            dst.with_data_mut(|d| d.copy_from_slice(src));
        }
        out
    }
}

fn partition(items: &[EvalItem], workers: usize) -> Vec<&[EvalItem]> {
    let per = items.len().div_ceil(workers);
    items.chunks(per).collect()
}

fn build_chunk(
    teacher: &Transformer,
    items: &[EvalItem],
    strategy: PromptStrategy,
    max_new_tokens: usize,
) -> Vec<Option<TransferRecord>> {
    items
        .iter()
        .map(|item| build_record(teacher, item, strategy, max_new_tokens))
        .collect()
}

fn build_record(
    teacher: &Transformer,
    item: &EvalItem,
    strategy: PromptStrategy,
    max_new_tokens: usize,
) -> Option<TransferRecord> {
    let template = strategy.template();
    if !template.is_empty() {
        assert!(
            !item.question.contains(template),
            "strategy template already present in query {}",
            item.id
        );
    }
    let modified = apply_strategy(strategy, &item.question);
    let prompt_tokens = tokenizer::encode(&format!("{modified}\n"));
    let (response_tokens, logits) = teacher
        .generate_with_logits(&prompt_tokens, max_new_tokens, Decode::Greedy)
        .ok()?;
    if response_tokens.is_empty() {
        return None;
    }
    Some(TransferRecord {
        record_id: item.id,
        strategy,
        raw_query: item.question.clone(),
        modified_prompt: modified,
        prompt_tokens,
        response_tokens,
        teacher_logits: logits.iter().map(|&v| v as f32).collect(),
        vocab_size: teacher.config.vocab_size,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    teacher_config_hash: String,
    strategy: PromptStrategy,
    degenerate_count: usize,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    record_id: u64,
    strategy: PromptStrategy,
    raw_query: String,
    modified_prompt: String,
    prompt_tokens: Vec<u32>,
    response_tokens: Vec<u32>,
    logits_b64: String,
}

fn encode_logits(rows: usize, cols: usize, data: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(8 + data.len() * 4);
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_logits(b64: &str) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = B64.decode(b64).context("invalid base64 logit blob")?;
    if bytes.len() < 8 {
        bail!("logit blob shorter than its dimension header");
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        bail!("logit blob length {} does not match {rows}x{cols}", body.len());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn save_transfer_set(path: &Path, set: &TransferSet) -> Result<()> {
    let vocab = set.records.first().map(|r| r.vocab_size).unwrap_or(0);
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&Header {
        format_version: set.format_version,
        teacher_config_hash: set.teacher_config_hash.clone(),
        strategy: set.strategy,
        degenerate_count: set.degenerate_count,
        vocab_size: vocab,
    })?);
    out.push('\n');
    for r in &set.records {
        let line = RecordLine {
            record_id: r.record_id,
            strategy: r.strategy,
            raw_query: r.raw_query.clone(),
            modified_prompt: r.modified_prompt.clone(),
            prompt_tokens: r.prompt_tokens.clone(),
            response_tokens: r.response_tokens.clone(),
            logits_b64: encode_logits(r.response_tokens.len(), r.vocab_size, &r.teacher_logits),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_transfer_set(path: &Path) -> Result<TransferSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header = serde_json::from_str(lines.next().context("missing header line")?)
        .context("malformed header line")?;
    if header.format_version != FORMAT_VERSION {
        bail!("unsupported transfer-set format version {}", header.format_version);
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let rec: RecordLine =
            serde_json::from_str(line).with_context(|| format!("record {} malformed", i + 1))?;
        let (rows, cols, data) = decode_logits(&rec.logits_b64)?;
        if rows != rec.response_tokens.len() {
            bail!(
                "record {}: {} logit rows for {} response tokens",
                rec.record_id,
                rows,
                rec.response_tokens.len()
            );
        }
        records.push(TransferRecord {
            record_id: rec.record_id,
            strategy: rec.strategy,
            raw_query: rec.raw_query,
            modified_prompt: rec.modified_prompt,
            prompt_tokens: rec.prompt_tokens,
            response_tokens: rec.response_tokens,
            teacher_logits: data,
            vocab_size: cols,
        });
    }
    Ok(TransferSet {
        format_version: header.format_version,
        teacher_config_hash: header.teacher_config_hash,
        strategy: header.strategy,
        degenerate_count: header.degenerate_count,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_strategy_is_identity() {
        assert_eq!(apply_strategy(PromptStrategy::None, "2+2?"), "2+2?");
    }

    #[test]
    fn confidence_appends_after_question() {
        let got = apply_strategy(PromptStrategy::Confidence, "how many?");
        assert_eq!(
            got,
            "how many? Briefly double-check that your answer is correct once done."
        );
    }

    #[test]
    fn teacher_prefixes_template() {
        let got = apply_strategy(PromptStrategy::Teacher, "Q");
        assert_eq!(got, format!("{TEACHER_TEMPLATE}\nQ"));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in PromptStrategy::ALL {
            assert_eq!(PromptStrategy::parse(s.as_str()), Some(s));
        }
        assert_eq!(PromptStrategy::parse("bogus"), None);
    }

    #[test]
    fn logit_blob_roundtrip_is_exact() {
        let data: Vec<f32> = (0..12).map(|i| (i as f32) * 0.37 - 2.0).collect();
        let b64 = encode_logits(3, 4, &data);
        let (rows, cols, back) = decode_logits(&b64).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let data = vec![1.0f32; 8];
        let b64 = encode_logits(3, 4, &data);
        assert!(decode_logits(&b64).is_err());
    }
}
