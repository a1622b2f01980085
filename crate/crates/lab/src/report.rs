//! Attention-metric comparison across models and merged run reports.

use anyhow::{bail, Result};
use dlab_core::attention::{
    attention_entropy, attention_similarity, self_attention_focus, LayerSeries,
};
use dlab_core::model::Transformer;
use dlab_core::tokenizer;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::eval::EvalReport;

/// Default analysis prompt (the math question the interpretability
/// figures are computed on).
pub const ATTENTION_PROMPT: &str = "Janet\u{2019}s ducks lay 16 eggs per day. She eats three for breakfast every morning and bakes muffins for her friends every day with four. She sells the remainder at the farmers' market daily for $2 per fresh duck egg. How much in dollars does she make every day at the farmers' market?";

/// One captured forward pass per model, then entropy, focus, and
/// similarity per layer.
pub fn compare_models(models: &[(String, &Transformer)], prompt: &str) -> Result<Vec<LayerSeries>> {
    if models.is_empty() {
        bail!("no models to compare");
    }
    let tokens = tokenizer::encode(prompt);
    let mut all = Vec::with_capacity(models.len() * 3);
    for (label, model) in models {
        let (_, attn) = model
            .infer_full_with_attention(&tokens)
            .map_err(|e| anyhow::anyhow!("forward pass for {label}: {e:?}"))?;
        all.push(attention_entropy(&attn, label).map_err(|e| anyhow::anyhow!("{label}: {e:?}"))?);
        all.push(self_attention_focus(&attn, label).map_err(|e| anyhow::anyhow!("{label}: {e:?}"))?);
        all.push(
            attention_similarity(&attn, label).map_err(|e| anyhow::anyhow!("{label}: {e:?}"))?,
        );
    }
    Ok(all)
}

/// Long-format CSV: model,layer,metric,value.
pub fn series_csv(series: &[LayerSeries]) -> String {
    let mut out = String::from("model,layer,metric,value\n");
    for s in series {
        for (layer, v) in s.values.iter().enumerate() {
            writeln!(out, "{},{},{},{}", s.label, layer, s.metric.as_str(), v).unwrap();
        }
    }
    out
}

/// Merge evaluation reports into one accuracy table keyed by label.
pub fn merged_accuracy_csv(reports: &[EvalReport]) -> Result<String> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for r in reports {
        if !seen.insert(r.label.clone()) {
            dups.insert(r.label.clone());
        }
    }
    if !dups.is_empty() {
        bail!(
            "duplicate run labels: {}",
            dups.into_iter().collect::<Vec<_>>().join(", ")
        );
    }
    let mut out = String::from("label,accuracy,correct,incorrect,extraction_failures\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label, r.accuracy, r.correct, r.incorrect, r.extraction_failures
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ItemOutcome;
    use dlab_core::model::ModelConfig;

    fn tiny(seed: u64) -> Transformer {
        Transformer::new(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            vocab_size: 64,
            max_seq_len: 380,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn same_model_twice_gives_identical_series() {
        let m = tiny(3);
        let series = compare_models(&[("a".into(), &m), ("b".into(), &m)], "some words here").unwrap();
        assert_eq!(series.len(), 6);
        for k in 0..3 {
            assert_eq!(series[k].values, series[k + 3].values);
        }
    }

    #[test]
    fn csv_row_counts_match_layer_counts() {
        let m = tiny(1);
        let series = compare_models(&[("m".into(), &m)], "count the rows").unwrap();
        let csv = series_csv(&series);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        // L entropy + L focus + (L-1) similarity
        assert_eq!(rows.len(), 2 + 2 + 1);
        for row in rows {
            assert_eq!(row.split(',').count(), 4);
        }
    }

    #[test]
    fn duplicate_labels_rejected() {
        let r = EvalReport {
            label: "x".into(),
            outcomes: vec![ItemOutcome { id: 0, extracted: Some(1.0), correct: true }],
            correct: 1,
            incorrect: 0,
            extraction_failures: 0,
            accuracy: 1.0,
        };
        let err = merged_accuracy_csv(&[r.clone(), r]).unwrap_err();
        assert!(err.to_string().contains("x"));
    }

    #[test]
    fn default_prompt_fits_context_window() {
        let tokens = tokenizer::encode(ATTENTION_PROMPT);
        assert!(tokens.len() <= 384, "{} tokens", tokens.len());
        assert!(tokens.iter().all(|&t| t != tokenizer::UNK));
    }
}
