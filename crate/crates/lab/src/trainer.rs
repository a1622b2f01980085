//! Training loops: plain-LM pretraining for the base models and LoRA
//! fine-tuning on a transfer set with the combined distillation loss.

use anyhow::{bail, Result};
use dlab_core::loss::{combined_loss, LogitSequence, LossConfig, Reduction};
use dlab_core::model::Transformer;
use dlab_core::optim::{Optimizer, OptimizerKind};
use dlab_core::rng;
use dlab_core::tokenizer;
use dlab_core::Tensor;
use serde::Serialize;
use std::time::Instant;

use crate::dataset::{self, EvalItem};
use crate::transfer::TransferRecord;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam_default(),
            alpha: 0.61,
            temperature: 5.9,
            seed: 42,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(self.alpha, self.temperature, Reduction::MeanOverPositions)
            .map_err(|e| anyhow::anyhow!("invalid loss settings: {e:?}"))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": match self.optimizer {
                OptimizerKind::Sgd => "sgd".to_string(),
                OptimizerKind::Adam { beta1, beta2, eps } => format!("adam({beta1},{beta2},{eps})"),
            },
            "alpha": self.alpha,
            "temperature": self.temperature,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_val_losses: Vec<f64>,
    pub final_val_loss: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub config: serde_json::Value,
}

/// Loss over response positions only: the student's logits rows that
/// predict each response token, against the teacher logits (soft term)
/// and the response tokens themselves (hard term).
fn sequence_loss(
    model: &Transformer,
    prompt: &[u32],
    response: &[u32],
    teacher_logits: Option<&[f32]>,
    vocab: usize,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let mut full = prompt.to_vec();
    full.extend_from_slice(response);
    let input = &full[..full.len() - 1];
    let (logits, _) = model
        .forward(input, false)
        .map_err(|e| anyhow::anyhow!("forward pass failed: {e:?}"))?;
    let plen = prompt.len();
    let rlen = response.len();
    let rows = logits.slice_rows(plen - 1, plen - 1 + rlen);
    let student = LogitSequence::new(response.to_vec(), vocab, rows)
        .map_err(|e| anyhow::anyhow!("student logits: {e:?}"))?;
    let teacher = match teacher_logits {
        Some(raw) => {
            let vals: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let t = Tensor::from_vec(vals, &[rlen, vocab])
                .map_err(|e| anyhow::anyhow!("teacher logits: {e:?}"))?;
            LogitSequence::new(response.to_vec(), vocab, t)
                .map_err(|e| anyhow::anyhow!("teacher logits: {e:?}"))?
        }
        // Hard-only training never reads the teacher distribution; reuse
        // the student rows to satisfy the shape contract.
        None => LogitSequence::new(response.to_vec(), vocab, student.logits.detach())
            .map_err(|e| anyhow::anyhow!("teacher logits: {e:?}"))?,
    };
    combined_loss(&teacher, &student, response, cfg)
        .map_err(|e| anyhow::anyhow!("loss: {e:?}"))
}

fn scalar(t: &Tensor) -> f64 {
    t.to_vec()[0]
}

/// Mean combined loss over records, computed without building graphs.
pub fn validation_loss(model: &Transformer, records: &[TransferRecord], cfg: &LossConfig) -> Result<f64> {
    if records.is_empty() {
        bail!("no validation records");
    }
    let mut total = 0.0;
    for rec in records {
        let mut full = rec.prompt_tokens.clone();
        full.extend_from_slice(&rec.response_tokens);
        let input = &full[..full.len() - 1];
        let mut cache = model.new_cache();
        let flat = model
            .infer_extend(input, &mut cache)
            .map_err(|e| anyhow::anyhow!("inference failed: {e:?}"))?;
        let vocab = rec.vocab_size;
        let plen = rec.prompt_tokens.len();
        let rlen = rec.response_tokens.len();
        let rows = flat[(plen - 1) * vocab..(plen - 1 + rlen) * vocab].to_vec();
        let student = LogitSequence::new(
            rec.response_tokens.clone(),
            vocab,
            Tensor::from_vec(rows, &[rlen, vocab]).map_err(|e| anyhow::anyhow!("{e:?}"))?,
        )
        .map_err(|e| anyhow::anyhow!("{e:?}"))?;
        let tvals: Vec<f64> = rec.teacher_logits.iter().map(|&v| v as f64).collect();
        let teacher = LogitSequence::new(
            rec.response_tokens.clone(),
            vocab,
            Tensor::from_vec(tvals, &[rlen, vocab]).map_err(|e| anyhow::anyhow!("{e:?}"))?,
        )
        .map_err(|e| anyhow::anyhow!("{e:?}"))?;
        let loss = combined_loss(&teacher, &student, &rec.response_tokens, cfg)
            .map_err(|e| anyhow::anyhow!("{e:?}"))?;
        total += scalar(&loss);
    }
    Ok(total / records.len() as f64)
}

/// Fine-tune the attached adapters on the transfer set. Base weights
/// stay frozen; the validation slice is the tail of the record list and
/// never enters training.
pub fn train(
    model: &mut Transformer,
    records: &[TransferRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !model.has_lora() {
        bail!("attach adapters before fine-tuning");
    }
    if records.is_empty() {
        bail!("empty transfer set");
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        bail!("validation_fraction must be in [0, 1)");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        bail!("epochs and batch_size must be >= 1");
    }
    let vocab = model.config.vocab_size;
    for rec in records {
        if rec.vocab_size != vocab {
            bail!(
                "transfer-set vocab {} does not match model vocab {vocab}",
                rec.vocab_size
            );
        }
    }
    let loss_cfg = cfg.loss_config()?;
    let n_val = ((records.len() as f64) * cfg.validation_fraction).ceil() as usize;
    let split = records.len() - n_val;
    let (train_recs, val_recs) = records.split_at(split);
    if train_recs.is_empty() {
        bail!("validation fraction leaves no training records");
    }

    let start = Instant::now();
    let params = model.trainable_tensors();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut rng = rng::seeded(cfg.seed);
    let mut step_losses = Vec::new();
    let mut epoch_val_losses = Vec::new();
    let mut step = 0usize;
    let needs_teacher = cfg.alpha < 1.0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_recs.len()).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            for &i in chunk {
                let rec = &train_recs[i];
                let loss = sequence_loss(
                    model,
                    &rec.prompt_tokens,
                    &rec.response_tokens,
                    needs_teacher.then_some(rec.teacher_logits.as_slice()),
                    vocab,
                    &loss_cfg,
                )?;
                let v = scalar(&loss);
                if !v.is_finite() {
                    bail!("non-finite loss at step {step} (record {})", rec.record_id);
                }
                batch_loss += v / chunk.len() as f64;
                loss.scale(1.0 / chunk.len() as f64)
                    .backward()
                    .map_err(|e| anyhow::anyhow!("backward: {e:?}"))?;
            }
            opt.step(&params);
            step_losses.push(batch_loss);
            step += 1;
        }
        let val = if val_recs.is_empty() { train_recs } else { val_recs };
        epoch_val_losses.push(validation_loss(model, val, &loss_cfg)?);
    }

    Ok(TrainReport {
        final_val_loss: *epoch_val_losses.last().unwrap(),
        step_losses,
        epoch_val_losses,
        steps: step,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: cfg.echo(),
    })
}

fn shuffle(order: &mut [usize], rng: &mut rng::ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = (rng::uniform(rng) * (i + 1) as f64) as usize;
        order.swap(i, j);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub epoch_cap: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once held-out response-token accuracy reaches this level.
    pub target_accuracy: Option<f64>,
    pub max_steps: Option<usize>,
    pub validation_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epoch_cap: 8,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 42,
            target_accuracy: Some(0.92),
            max_steps: None,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    pub held_out_accuracy: f64,
    pub wall_seconds: f64,
}

/// Plain next-token cross-entropy on question + worked solution, loss on
/// solution positions only. Stops at the accuracy target, the step cap,
/// or the epoch cap, whichever comes first.
pub fn pretrain(model: &mut Transformer, items: &[EvalItem], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if items.is_empty() {
        bail!("empty pretraining dataset");
    }
    let n = items.len();
    let n_val = (((n as f64) * cfg.validation_fraction).ceil() as usize).min(n - 1);
    let (train_items, val_items) = items.split_at(n - n_val);
    let val_items = if val_items.is_empty() { train_items } else { val_items };
    let probe: Vec<EvalItem> = val_items.iter().take(48).cloned().collect();

    let vocab = model.config.vocab_size;
    let hard_only = LossConfig::new(1.0, 1.0, Reduction::MeanOverPositions)
        .map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let sequences: Vec<(Vec<u32>, Vec<u32>)> = train_items
        .iter()
        .map(|item| {
            let prompt = tokenizer::encode(&format!("{}\n", item.question));
            let mut response = tokenizer::encode(&dataset::gold_response(item)?);
            response.push(tokenizer::EOS);
            Ok((prompt, response))
        })
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let params = model.trainable_tensors();
    let mut opt = Optimizer::new(OptimizerKind::adam_default(), cfg.learning_rate, &params);
    let mut rng = rng::seeded(cfg.seed);
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let check_every = 100;

    'outer: for _epoch in 0..cfg.epoch_cap {
        epochs_run += 1;
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            for &i in chunk {
                let (prompt, response) = &sequences[i];
                let loss = sequence_loss(model, prompt, response, None, vocab, &hard_only)?;
                if !scalar(&loss).is_finite() {
                    bail!("non-finite loss at step {step}");
                }
                loss.scale(1.0 / chunk.len() as f64)
                    .backward()
                    .map_err(|e| anyhow::anyhow!("backward: {e:?}"))?;
            }
            opt.step(&params);
            step += 1;
            if let Some(cap) = cfg.max_steps {
                if step >= cap {
                    break 'outer;
                }
            }
            if step.is_multiple_of(check_every) {
                if let Some(target) = cfg.target_accuracy {
                    if crate::eval::response_token_accuracy(model, &probe)? >= target {
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(PretrainReport {
        steps: step,
        epochs_run,
        held_out_accuracy: crate::eval::response_token_accuracy(model, val_items)?,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::{PromptStrategy, TransferRecord};
    use dlab_core::model::{ModelConfig, ProjTarget};

    fn tiny_model(seed: u64) -> Transformer {
        Transformer::new(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            vocab_size: 64,
            max_seq_len: 64,
            seed,
        })
        .unwrap()
    }

    fn fake_record(id: u64, seed: u64) -> TransferRecord {
        let teacher = tiny_model(seed);
        let prompt = tokenizer::encode("3 + 4?\n");
        let (resp, logits) = teacher
            .generate_with_logits(&prompt, 6, dlab_core::model::Decode::Greedy)
            .unwrap();
        TransferRecord {
            record_id: id,
            strategy: PromptStrategy::None,
            raw_query: "3 + 4?".into(),
            modified_prompt: "3 + 4?".into(),
            prompt_tokens: prompt,
            response_tokens: resp,
            teacher_logits: logits.iter().map(|&v| v as f32).collect(),
            vocab_size: 64,
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = tiny_model(1);
        m.attach_lora(2, 4.0, &ProjTarget::ALL, 7).unwrap();
        let before = crate::checkpoint::base_weight_hash(&m);
        let adapters_before: Vec<Vec<f64>> =
            m.named_lora_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let records: Vec<_> = (0..4).map(|i| fake_record(i, 99)).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &records, &cfg).unwrap();
        assert_eq!(crate::checkpoint::base_weight_hash(&m), before);
        let adapters_after: Vec<Vec<f64>> =
            m.named_lora_tensors().iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(adapters_before, adapters_after);
        let first = report.step_losses[0];
        for v in &report.step_losses {
            assert!((v - first).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_report_and_adapters() {
        let records: Vec<_> = (0..6).map(|i| fake_record(i, 3)).collect();
        let run = || {
            let mut m = tiny_model(1);
            m.attach_lora(2, 4.0, &ProjTarget::ALL, 7).unwrap();
            let cfg = TrainConfig {
                epochs: 1,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            };
            let report = train(&mut m, &records, &cfg).unwrap();
            let adapters: Vec<Vec<f64>> =
                m.named_lora_tensors().iter().map(|(_, t)| t.to_vec()).collect();
            (report, adapters)
        };
        let (r1, a1) = run();
        let (r2, a2) = run();
        assert_eq!(r1.step_losses, r2.step_losses);
        assert_eq!(r1.final_val_loss, r2.final_val_loss);
        assert_eq!(a1, a2);
    }

    #[test]
    fn base_weights_frozen_during_training() {
        let mut m = tiny_model(2);
        m.attach_lora(2, 4.0, &ProjTarget::ALL, 7).unwrap();
        let before = crate::checkpoint::base_weight_hash(&m);
        let records: Vec<_> = (0..6).map(|i| fake_record(i, 5)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut m, &records, &cfg).unwrap();
        assert_eq!(crate::checkpoint::base_weight_hash(&m), before);
        let changed = m
            .named_lora_tensors()
            .iter()
            .any(|(name, t)| name.ends_with("lora_b") && t.to_vec().iter().any(|v| *v != 0.0));
        assert!(changed, "adapters did not move");
    }

    #[test]
    fn untrained_model_rejected() {
        let mut m = tiny_model(3);
        let records = vec![fake_record(0, 1)];
        assert!(train(&mut m, &records, &TrainConfig::default()).is_err());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let mut m = tiny_model(3);
        m.attach_lora(2, 4.0, &ProjTarget::ALL, 7).unwrap();
        let mut rec = fake_record(0, 1);
        rec.vocab_size = 32;
        assert!(train(&mut m, &[rec], &TrainConfig::default()).is_err());
    }
}
