//! Per-turn latency over a scripted dialogue: the reactive model reads only
//! the current query, the stateless baseline re-reads the whole history.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::KvCache;
use crate::error::{Error, Result};
use crate::model::tokenizer::{ANSWER, N_SPECIAL, QUERY};
use crate::model::{Baseline, Rxt};
use crate::numcore::{Graph, Tape};
use crate::runtime::{Engine, GenerationSettings, UpdateMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub n_turns: usize,
    /// Prompt tokens per turn, `[Query]` and `[Answer]` included.
    pub t_query: usize,
    /// Generated tokens per turn.
    pub t_answer: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            n_turns: 8,
            t_query: 24,
            t_answer: 24,
            repeats: 20,
            warmup: 3,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_turns == 0 || self.t_query < 3 || self.t_answer == 0 || self.repeats == 0 {
            return Err(Error::Config("latency bench needs turns, repeats, t_answer > 0 and t_query >= 3".into()));
        }
        Ok(())
    }
}

/// One CSV row. Times are medians over repeats; an overflowing baseline
/// turn has status `overflow` and no timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub turn: usize,
    pub arch: String,
    pub prompt_s: Option<f64>,
    pub per_token_s: Option<f64>,
    pub update_s: Option<f64>,
    pub prompt_tokens: usize,
    pub prompt_flops: u64,
    pub status: String,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Query bytes for turn `k`, `t_query − 2` long.
fn scripted_query(k: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| b'a' as usize + (k * 7 + i) % 26).collect()
}

fn settings(cfg: &LatencyConfig) -> GenerationSettings {
    GenerationSettings {
        max_new_tokens: cfg.t_answer,
        force_length: true,
        ..Default::default()
    }
}

struct Sample {
    prompt_s: f64,
    per_token_s: f64,
    update_s: Option<f64>,
    prompt_tokens: usize,
    prompt_flops: u64,
}

fn rxt_dialogue(model: &Arc<Rxt>, cfg: &LatencyConfig) -> Result<Vec<Sample>> {
    let mut engine = Engine::new(model.clone(), UpdateMode::Inline)?;
    let s = settings(cfg);
    let mut out = Vec::with_capacity(cfg.n_turns);
    for k in 0..cfg.n_turns {
        let rec = engine.interact(&scripted_query(k, cfg.t_query - 2), &s)?;
        let update = engine.update_timings().last().map(|u| u.seconds());
        out.push(Sample {
            prompt_s: rec.prompt_s,
            per_token_s: rec.per_token_s,
            update_s: update,
            prompt_tokens: rec.prompt_tokens,
            prompt_flops: rec.prompt_flops,
        });
    }
    Ok(out)
}

fn argmax_regular(row: &[f64]) -> usize {
    (N_SPECIAL..row.len()).fold(N_SPECIAL, |b, i| if row[i] > row[b] { i } else { b })
}

/// Baseline turns; `None` once the history no longer fits.
fn baseline_dialogue(model: &Baseline, cfg: &LatencyConfig) -> Result<Vec<Option<Sample>>> {
    let limit = model.config.baseline_context;
    let mut history: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(cfg.n_turns);
    for k in 0..cfg.n_turns {
        let mut prompt = history.clone();
        prompt.push(QUERY);
        prompt.extend(scripted_query(k, cfg.t_query - 2));
        prompt.push(ANSWER);
        if prompt.len() + cfg.t_answer > limit {
            out.push(None);
            continue;
        }
        let mut caches = KvCache::new(model.config.n_layers, model.config.model_dim, limit);
        let t0 = Instant::now();
        let mut g = Graph::with_tape(&model.params, Tape::no_grad());
        let o = model.forward(&mut g, &prompt, 0, Some(&mut caches))?;
        let mut next = argmax_regular(g.value(o.logits).row(prompt.len() - 1));
        let prompt_flops = g.tape().flops();
        drop(g);
        let prompt_s = t0.elapsed().as_secs_f64();
        let mut answer = vec![next];
        let g0 = Instant::now();
        while answer.len() < cfg.t_answer {
            let pos = prompt.len() + answer.len() - 1;
            let mut g = Graph::with_tape(&model.params, Tape::no_grad());
            let o = model.forward(&mut g, &[next], pos, Some(&mut caches))?;
            next = argmax_regular(g.value(o.logits).row(0));
            answer.push(next);
        }
        let per_token_s = g0.elapsed().as_secs_f64() / cfg.t_answer as f64;
        out.push(Some(Sample {
            prompt_s,
            per_token_s,
            update_s: None,
            prompt_tokens: prompt.len(),
            prompt_flops,
        }));
        history = prompt;
        history.extend(answer);
    }
    Ok(out)
}

fn summarise(arch: &str, runs: Vec<Vec<Option<Sample>>>, n_turns: usize) -> Vec<LatencyRow> {
    (0..n_turns)
        .map(|k| {
            let samples: Vec<&Sample> = runs.iter().filter_map(|r| r[k].as_ref()).collect();
            if samples.is_empty() {
                return LatencyRow {
                    turn: k + 1,
                    arch: arch.into(),
                    prompt_s: None,
                    per_token_s: None,
                    update_s: None,
                    prompt_tokens: 0,
                    prompt_flops: 0,
                    status: "overflow".into(),
                };
            }
            let mut p: Vec<f64> = samples.iter().map(|s| s.prompt_s).collect();
            let mut t: Vec<f64> = samples.iter().map(|s| s.per_token_s).collect();
            let mut u: Vec<f64> = samples.iter().filter_map(|s| s.update_s).collect();
            LatencyRow {
                turn: k + 1,
                arch: arch.into(),
                prompt_s: Some(median(&mut p)),
                per_token_s: Some(median(&mut t)),
                update_s: (!u.is_empty()).then(|| median(&mut u)),
                prompt_tokens: samples[0].prompt_tokens,
                prompt_flops: samples[0].prompt_flops,
                status: "ok".into(),
            }
        })
        .collect()
}

/// Median per-turn timings for both models after `warmup` discarded
/// dialogues. Dialogues alternate between the two models.
pub fn latency_bench(rxt: Arc<Rxt>, baseline: &Baseline, cfg: &LatencyConfig) -> Result<Vec<LatencyRow>> {
    cfg.validate()?;
    if cfg.t_query + cfg.t_answer + 1 > rxt.config.max_interaction_len {
        return Err(Error::Config(format!(
            "a {}+{} token interaction exceeds max_interaction_len {}",
            cfg.t_query,
            cfg.t_answer,
            rxt.config.max_interaction_len
        )));
    }
    for _ in 0..cfg.warmup {
        rxt_dialogue(&rxt, cfg)?;
        baseline_dialogue(baseline, cfg)?;
    }
    let mut rxt_runs = Vec::with_capacity(cfg.repeats);
    let mut base_runs = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        rxt_runs.push(rxt_dialogue(&rxt, cfg)?.into_iter().map(Some).collect());
        base_runs.push(baseline_dialogue(baseline, cfg)?);
    }
    let mut rows = summarise("rxt", rxt_runs, cfg.n_turns);
    rows.extend(summarise("stateless_llm", base_runs, cfg.n_turns));
    Ok(rows)
}

/// Ratio of turn `b` to turn `a` median prompt time for `arch`.
pub fn prompt_ratio(rows: &[LatencyRow], arch: &str, a: usize, b: usize) -> Option<f64> {
    let get = |t: usize| rows.iter().find(|r| r.arch == arch && r.turn == t)?.prompt_s;
    Some(get(b)? / get(a)?)
}
