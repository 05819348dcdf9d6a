//! Teacher-forced perplexity and accuracy on answer tokens, plus a
//! reference-based coherence proxy.

use serde::{Deserialize, Serialize};

use crate::abms::{MemorySource, ShortTermMemory};
use crate::bench::data::Dialogue;
use crate::error::{Error, Result};
use crate::model::{Baseline, Rxt};
use crate::numcore::{cosine_similarity, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every answer token and the closing `[EOS]`.
    AllAnswers,
    /// Only answer tokens that depend on an earlier turn.
    FactTokens,
}

/// How the reactive model's memory is treated during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Memory is updated after every turn from the reference interaction.
    TeacherForced,
    /// Every turn reads an all-zero memory.
    Zeroed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nll_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl EvalResult {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn ppl(&self) -> f64 {
        self.mean_nll().exp()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens as f64
    }

    fn merge(&mut self, o: EvalResult) {
        self.nll_sum += o.nll_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }
}

/// Answer-token indices (into the interaction's token ids) that `scope`
/// selects for turn `t`.
fn scored_positions(d: &Dialogue, t: usize, scope: Scope) -> Result<Vec<usize>> {
    let q = d.turns[t].query_tokens()?.len();
    let a = d.turns[t].answer_tokens()?.len();
    let first = q + 2;
    Ok(match scope {
        Scope::AllAnswers => (first..=first + a).collect(),
        Scope::FactTokens => d.fact_positions(t).map(|j| first + j).collect(),
    })
}

/// Scores `positions` of `tokens` under next-token `logits` (row `p − 1`
/// predicts token `p`).
fn score(logits: &Tensor, tokens: &[usize], positions: &[usize]) -> EvalResult {
    let mut r = EvalResult::default();
    for &p in positions {
        let row = logits.row(p - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        r.nll_sum += lse - row[tokens[p]];
        r.tokens += 1;
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        r.correct += usize::from(arg == tokens[p]);
    }
    r
}

fn zero_memory(model: &Rxt) -> Result<ShortTermMemory> {
    let c = &model.config;
    ShortTermMemory::new(vec![Tensor::zeros(&[c.stm_slots, c.model_dim]); c.n_layers])
}

/// Reactive model over whole dialogues, one turn at a time.
pub fn evaluate_rxt(model: &Rxt, dialogues: &[Dialogue], scope: Scope, mode: MemoryMode) -> Result<EvalResult> {
    let mut total = EvalResult::default();
    for d in dialogues {
        let mut stm = match mode {
            MemoryMode::TeacherForced => model.initial_stm()?,
            MemoryMode::Zeroed => zero_memory(model)?,
        };
        for t in 0..d.turns.len() {
            let positions = scored_positions(d, t, scope)?;
            let toks = d.turns[t].tokens()?;
            if !positions.is_empty() {
                let mut g = Graph::no_grad(&model.params);
                let mem = stm.bind(&mut g);
                let src: Vec<MemorySource> = mem.into_iter().map(MemorySource::Slots).collect();
                let out = model.decode(&mut g, &toks[..toks.len() - 1], 0, &src, None)?;
                total.merge(score(g.value(out.logits), &toks, &positions));
            }
            if mode == MemoryMode::TeacherForced && t + 1 < d.turns.len() {
                stm = model.update_memory(&stm, &toks)?;
            }
        }
    }
    if total.tokens == 0 {
        return Err(Error::Data("no tokens in evaluation scope".into()));
    }
    Ok(total)
}

/// Stateless baseline shown only the current turn.
pub fn evaluate_baseline(model: &Baseline, dialogues: &[Dialogue], scope: Scope) -> Result<EvalResult> {
    let mut total = EvalResult::default();
    for d in dialogues {
        for t in 0..d.turns.len() {
            let positions = scored_positions(d, t, scope)?;
            if positions.is_empty() {
                continue;
            }
            let toks = d.turns[t].tokens()?;
            let mut g = Graph::no_grad(&model.params);
            let out = model.forward(&mut g, &toks[..toks.len() - 1], 0, None)?;
            total.merge(score(g.value(out.logits), &toks, &positions));
        }
    }
    if total.tokens == 0 {
        return Err(Error::Data("no tokens in evaluation scope".into()));
    }
    Ok(total)
}

fn ngrams(tokens: &[usize], n: usize) -> std::collections::HashMap<&[usize], usize> {
    let mut m = std::collections::HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4 with add-one smoothing on every n-gram precision and the
/// usual brevity penalty. Empty candidates score 0.
pub fn bleu4(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let refs = ngrams(reference, n);
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        log_p += ((matched as f64 + 1.0) / (total as f64 + 1.0)).ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

/// Mean of the encoder's final-layer hidden states.
pub fn sentence_embedding(model: &Rxt, tokens: &[usize]) -> Result<Tensor> {
    let ed = model.encode_data(tokens)?;
    let last = ed.layers.last().ok_or_else(|| Error::Config("model has no encoder layers".into()))?;
    let d = last.cols();
    let mut m = vec![0.0; d];
    for r in 0..last.rows() {
        for (a, v) in m.iter_mut().zip(last.row(r)) {
            *a += v;
        }
    }
    let inv = 1.0 / last.rows() as f64;
    Tensor::vector(m.into_iter().map(|v| v * inv).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoherenceWeights {
    pub bleu: f64,
    pub reference: f64,
    pub history: f64,
}

impl Default for CoherenceWeights {
    fn default() -> Self {
        Self {
            bleu: 0.4,
            reference: 0.4,
            history: 0.2,
        }
    }
}

impl CoherenceWeights {
    /// Non-negative weights summing to one keep the score in [0, 10].
    pub fn validate(&self) -> Result<()> {
        let w = [self.bleu, self.reference, self.history];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("coherence weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// `10·(w_b·bleu + w_r·max(0, cos_ref) + w_h·max(0, cos_hist))`.
    pub fn combine(&self, bleu: f64, cos_reference: f64, cos_history: f64) -> f64 {
        10.0 * (self.bleu * bleu + self.reference * cos_reference.max(0.0) + self.history * cos_history.max(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceScore {
    pub bleu: f64,
    pub cos_reference: f64,
    pub cos_history: f64,
    pub score: f64,
    /// Set when the response was empty and scored 0.
    pub empty: bool,
}

/// Reference-based coherence proxy for one response. The history embedding
/// is the mean of the embeddings of every earlier reference interaction;
/// with no history that term is 0.
pub fn coherence_proxy(
    model: &Rxt,
    response: &[usize],
    reference: &[usize],
    history: &[Vec<usize>],
    weights: &CoherenceWeights,
) -> Result<CoherenceScore> {
    weights.validate()?;
    if response.is_empty() {
        return Ok(CoherenceScore {
            bleu: 0.0,
            cos_reference: 0.0,
            cos_history: 0.0,
            score: 0.0,
            empty: true,
        });
    }
    let bleu = bleu4(response, reference);
    let e = sentence_embedding(model, response)?;
    let cos_reference = if reference.is_empty() {
        0.0
    } else {
        cosine_similarity(&e, &sentence_embedding(model, reference)?)?
    };
    let cos_history = if history.is_empty() {
        0.0
    } else {
        let mut mean = vec![0.0; e.numel()];
        for h in history {
            for (m, v) in mean.iter_mut().zip(sentence_embedding(model, h)?.data()) {
                *m += v / history.len() as f64;
            }
        }
        cosine_similarity(&e, &Tensor::vector(mean)?)?
    };
    Ok(CoherenceScore {
        bleu,
        cos_reference,
        cos_history,
        score: weights.combine(bleu, cos_reference, cos_history),
        empty: false,
    })
}

/// Mean proxy score over aligned response/reference/history lists.
pub fn coherence_batch(
    model: &Rxt,
    responses: &[Vec<usize>],
    references: &[Vec<usize>],
    histories: &[Vec<Vec<usize>>],
    weights: &CoherenceWeights,
) -> Result<f64> {
    if responses.len() != references.len() || responses.len() != histories.len() || responses.is_empty() {
        return Err(Error::Data("coherence inputs must be aligned and non-empty".into()));
    }
    let mut sum = 0.0;
    for ((r, f), h) in responses.iter().zip(references).zip(histories) {
        sum += coherence_proxy(model, r, f, h, weights)?.score;
    }
    Ok(sum / responses.len() as f64)
}
