//! Hyperparameter search over (alpha, temperature): Gaussian-process
//! Bayesian optimization of a full train run's validation loss per trial.

use anyhow::{bail, Result};
use dlab_core::bayesopt;
use dlab_core::model::{ProjTarget, Transformer};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::trainer::{self, TrainConfig};
use crate::transfer::TransferRecord;

#[derive(Debug, Clone, Copy)]
pub struct SearchSpace {
    pub alpha_range: (f64, f64),
    pub temp_range: (f64, f64),
    pub iterations: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            alpha_range: (0.0, 1.0),
            temp_range: (1.0, 11.0),
            iterations: 50,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_range.1 <= self.alpha_range.0 || self.temp_range.1 <= self.temp_range.0 {
            bail!("search ranges must be non-degenerate");
        }
        if self.iterations < 2 {
            bail!("iterations must be >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Run the search; the objective returns None for a failed trial.
/// Exactly `space.iterations` objective evaluations are made.
pub fn optimize(
    mut objective: impl FnMut(f64, f64) -> Option<f64>,
    space: &SearchSpace,
    seed: u64,
) -> Result<(TrialRecord, Vec<TrialRecord>)> {
    space.validate()?;
    let mut durations = Vec::with_capacity(space.iterations);
    let mut wrapped = |x: &[f64]| {
        let start = Instant::now();
        let out = objective(x[0], x[1]);
        durations.push(start.elapsed().as_secs_f64());
        out
    };
    let bounds = [space.alpha_range, space.temp_range];
    let result = bayesopt::minimize(&mut wrapped, &bounds, space.iterations, seed)
        .map_err(|e| anyhow::anyhow!("search failed: {e}"))?;
    let trials: Vec<TrialRecord> = result
        .observations
        .iter()
        .zip(&durations)
        .enumerate()
        .map(|(i, (o, &secs))| TrialRecord {
            trial: i,
            alpha: o.x[0],
            temperature: o.x[1],
            val_loss: o.y,
            seconds: secs,
        })
        .collect();
    Ok((trials[result.best_index].clone(), trials))
}

/// The full per-trial protocol: re-initialize the student and adapters
/// identically, train at the proposed (alpha, temperature), score by
/// final validation loss.
pub fn tune_kd(
    base_student: &Transformer,
    records: &[TransferRecord],
    template: &TrainConfig,
    lora_rank: usize,
    lora_alpha: f64,
    space: &SearchSpace,
    seed: u64,
) -> Result<(TrialRecord, Vec<TrialRecord>)> {
    if base_student.has_lora() {
        bail!("pass the pristine student; adapters are attached per trial");
    }
    optimize(
        |alpha, temperature| {
            let mut student = base_student.deep_clone();
            student
                .attach_lora(lora_rank, lora_alpha, &ProjTarget::ALL, template.seed)
                .ok()?;
            let cfg = TrainConfig {
                alpha,
                temperature,
                ..*template
            };
            trainer::train(&mut student, records, &cfg)
                .ok()
                .map(|r| r.final_val_loss)
        },
        space,
        seed,
    )
}

pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from("trial,alpha,temperature,val_loss,seconds\n");
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.trial, t.alpha, t.temperature, t.val_loss, t.seconds
        )
        .unwrap();
    }
    out
}

pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    std::fs::write(path, trials_csv(trials))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_objective_and_exact_budget() {
        let mut calls = 0;
        let space = SearchSpace {
            iterations: 9,
            ..SearchSpace::default()
        };
        let (best, trials) = optimize(
            |_, _| {
                calls += 1;
                Some(2.5)
            },
            &space,
            4,
        )
        .unwrap();
        assert_eq!(calls, 9);
        assert_eq!(trials.len(), 9);
        assert_eq!(best.val_loss, 2.5);
    }

    #[test]
    fn quadratic_objective_found() {
        let space = SearchSpace::default();
        let (best, _) = optimize(
            |a, t| {
                let x = a - 0.5;
                let y = (t - 6.0) / 10.0;
                Some(x * x + y * y)
            },
            &space,
            11,
        )
        .unwrap();
        assert!((best.alpha - 0.5).abs() < 0.1, "alpha {}", best.alpha);
        assert!((best.temperature - 6.0).abs() < 1.0, "temp {}", best.temperature);
    }

    #[test]
    fn fixed_seed_reproducible() {
        let space = SearchSpace {
            iterations: 12,
            ..SearchSpace::default()
        };
        let f = |a: f64, t: f64| Some((a - 0.3) * (a - 0.3) + 0.01 * (t - 2.0) * (t - 2.0));
        let (b1, t1) = optimize(f, &space, 8).unwrap();
        let (b2, t2) = optimize(f, &space, 8).unwrap();
        assert_eq!(b1.alpha, b2.alpha);
        assert_eq!(b1.temperature, b2.temperature);
        assert_eq!(t1.len(), t2.len());
    }

    #[test]
    fn degenerate_space_rejected() {
        let space = SearchSpace {
            alpha_range: (0.5, 0.5),
            ..SearchSpace::default()
        };
        assert!(optimize(|_, _| Some(1.0), &space, 1).is_err());
    }

    #[test]
    fn csv_schema() {
        let trials = vec![TrialRecord {
            trial: 0,
            alpha: 0.5,
            temperature: 6.0,
            val_loss: 1.25,
            seconds: 0.1,
        }];
        let csv = trials_csv(&trials);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("trial,alpha,temperature,val_loss,seconds"));
        assert_eq!(lines.next(), Some("0,0.5,6,1.25,0.1"));
    }
}
