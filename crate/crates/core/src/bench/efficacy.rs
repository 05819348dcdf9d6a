//! Full training pipeline per seed with paired held-out evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::data::{gen_dialogues, DataConfig, Dataset};
use crate::bench::eval::{evaluate_baseline, evaluate_rxt, EvalResult, MemoryMode, Scope};
use crate::bench::report::EvalRow;
use crate::error::{Error, Result};
use crate::model::checkpoint::load_expecting;
use crate::model::{Baseline, Rxt};
use crate::training::curriculum::{run_curriculum, train_baseline, Stage, TrainConfig, BASELINE_CHECKPOINT};
use crate::training::memattn_cosine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Mean cosine between updated memory and its self-supervised target on
    /// the test split, measured on the stage-3 checkpoint.
    pub stage3_cosine: f64,
    pub rxt_fact: EvalResult,
    pub rxt_fact_zeroed: EvalResult,
    pub baseline_fact: EvalResult,
    pub rxt_answers: EvalResult,
    pub baseline_answers: EvalResult,
    pub train_seconds: f64,
}

impl SeedResult {
    pub fn eval_rows(&self) -> Vec<EvalRow> {
        let row = |arch: &str, scope: &str, memory: &str, r: &EvalResult| EvalRow {
            seed: self.seed,
            arch: arch.into(),
            scope: scope.into(),
            memory: memory.into(),
            ppl: r.ppl(),
            accuracy: r.accuracy(),
            tokens: r.tokens,
        };
        vec![
            row("rxt", "fact_tokens", "teacher_forced", &self.rxt_fact),
            row("rxt", "fact_tokens", "zeroed", &self.rxt_fact_zeroed),
            row("stateless_llm", "fact_tokens", "none", &self.baseline_fact),
            row("rxt", "all_answers", "teacher_forced", &self.rxt_answers),
            row("stateless_llm", "all_answers", "none", &self.baseline_answers),
        ]
    }
}

/// Same config with every seed replaced by `seed`.
pub fn reseed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.model.seed = seed;
    c
}

/// Trains all four stages and the baseline into `out_dir`, then evaluates
/// both on the test split.
pub fn run_seed(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<SeedResult> {
    if data.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let summaries = run_curriculum(cfg, data, out_dir, &Stage::ALL)?;
    let base_summary = train_baseline(cfg, data, out_dir)?;
    let train_seconds = summaries.iter().map(|s| s.seconds).sum::<f64>() + base_summary.seconds;
    let (s3, _) = load_expecting::<Rxt>(&out_dir.join(Stage::MemAttn.checkpoint_name()), &cfg.model)?;
    let stage3_cosine = memattn_cosine(&s3, &data.test, &cfg.memattn)?;
    let (rxt, _) = load_expecting::<Rxt>(&out_dir.join(Stage::MemoryAware.checkpoint_name()), &cfg.model)?;
    let (base, _) = load_expecting::<Baseline>(&out_dir.join(BASELINE_CHECKPOINT), &cfg.model)?;
    Ok(SeedResult {
        seed: cfg.seed,
        stage3_cosine,
        rxt_fact: evaluate_rxt(&rxt, &data.test, Scope::FactTokens, MemoryMode::TeacherForced)?,
        rxt_fact_zeroed: evaluate_rxt(&rxt, &data.test, Scope::FactTokens, MemoryMode::Zeroed)?,
        baseline_fact: evaluate_baseline(&base, &data.test, Scope::FactTokens)?,
        rxt_answers: evaluate_rxt(&rxt, &data.test, Scope::AllAnswers, MemoryMode::TeacherForced)?,
        baseline_answers: evaluate_baseline(&base, &data.test, Scope::AllAnswers)?,
        train_seconds,
    })
}

/// One [`run_seed`] per seed on a shared dataset, each in `out_dir/seed{n}`.
pub fn run_seeds(cfg: &TrainConfig, data_cfg: &DataConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<SeedResult>> {
    let data = gen_dialogues(data_cfg, cfg.model.vocab_size)?;
    seeds
        .iter()
        .map(|&s| {
            let r = run_seed(&reseed(cfg, s), &data, &out_dir.join(format!("seed{s}")))?;
            log::info!(
                "seed {s}: fact ppl rxt {:.3} vs baseline {:.3}, stage-3 cosine {:.4}",
                r.rxt_fact.ppl(),
                r.baseline_fact.ppl(),
                r.stage3_cosine
            );
            Ok(r)
        })
        .collect()
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// The paired perplexity comparison across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    pub sd_rxt: f64,
    pub sd_baseline: f64,
}

impl GapReport {
    pub fn new(results: &[SeedResult]) -> Self {
        let rxt: Vec<f64> = results.iter().map(|r| r.rxt_fact.ppl()).collect();
        let base: Vec<f64> = results.iter().map(|r| r.baseline_fact.ppl()).collect();
        let gaps: Vec<f64> = base.iter().zip(&rxt).map(|(b, r)| b - r).collect();
        Self {
            mean_gap: gaps.iter().sum::<f64>() / gaps.len().max(1) as f64,
            gaps,
            sd_rxt: sample_sd(&rxt),
            sd_baseline: sample_sd(&base),
        }
    }

    /// Every seed favours the reactive model and the mean gap exceeds three
    /// run-to-run standard deviations of either model.
    pub fn passes(&self) -> bool {
        !self.gaps.is_empty() && self.gaps.iter().all(|&g| g > 0.0) && self.mean_gap > 3.0 * self.sd_rxt.max(self.sd_baseline)
    }
}

/// Relative drop in fact-token accuracy when memory is zeroed.
pub fn ablation_drop(r: &SeedResult) -> f64 {
    let full = r.rxt_fact.accuracy();
    if full == 0.0 {
        return 0.0;
    }
    (full - r.rxt_fact_zeroed.accuracy()) / full
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd_matches_hand_computation() {
        assert_eq!(sample_sd(&[5.0]), 0.0);
        assert!((sample_sd(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gap_rule() {
        let mk = |rxt_nll: f64, base_nll: f64| SeedResult {
            seed: 0,
            stage3_cosine: 0.0,
            rxt_fact: EvalResult {
                nll_sum: rxt_nll,
                tokens: 1,
                correct: 0,
            },
            rxt_fact_zeroed: EvalResult::default(),
            baseline_fact: EvalResult {
                nll_sum: base_nll,
                tokens: 1,
                correct: 0,
            },
            rxt_answers: EvalResult::default(),
            baseline_answers: EvalResult::default(),
            train_seconds: 0.0,
        };
        let good = GapReport::new(&[mk(1.0, 2.3), mk(1.05, 2.3), mk(0.95, 2.31)]);
        assert!(good.passes());
        let noisy = GapReport::new(&[mk(1.0, 2.3), mk(2.2, 2.3), mk(0.1, 2.3)]);
        assert!(!noisy.passes());
        let flipped = GapReport::new(&[mk(1.0, 2.3), mk(2.4, 2.3)]);
        assert!(!flipped.passes());
    }
}
