//! Exact per-turn token counts for a conversation of `N` equal-shaped turns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    pub n_turns: usize,
    pub t_query: usize,
    pub t_answer: usize,
    pub s_mem: usize,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            n_turns: 8,
            t_query: 50,
            t_answer: 50,
            s_mem: 16,
        }
    }
}

impl CostModelParams {
    pub fn t(&self) -> usize {
        self.t_query + self.t_answer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Decoder-only model that re-reads the whole history.
    StatelessLlm,
    Rxt,
    /// Memory read and written before decoding, with the previous answer
    /// re-fed alongside each query.
    SyncMat,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::StatelessLlm, Arch::Rxt, Arch::SyncMat];

    pub fn name(self) -> &'static str {
        match self {
            Arch::StatelessLlm => "stateless_llm",
            Arch::Rxt => "rxt",
            Arch::SyncMat => "sync_mat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCost {
    pub turn: usize,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    /// Memory slots read during the turn.
    pub memory_slots: usize,
    /// Prompt plus generated tokens summed over turns `1..=turn`.
    pub cumulative_tokens: usize,
}

impl TurnCost {
    pub fn tokens(&self) -> usize {
        self.prompt_tokens + self.generated_tokens
    }
}

/// Per-turn counts for `arch`. Turn `k` of the stateless model reads a
/// prompt of `(k−1)·T + T_query`; the reactive model reads `T_query` and
/// its fixed memory; the synchronous variant also re-reads the previous
/// answer.
pub fn conversation_token_cost(p: &CostModelParams, arch: Arch) -> Result<Vec<TurnCost>> {
    if p.n_turns == 0 || p.t_query == 0 || p.t_answer == 0 || p.s_mem == 0 {
        return Err(Error::invalid("conversation_token_cost", "all parameters must be positive"));
    }
    let mut cumulative = 0;
    Ok((1..=p.n_turns)
        .map(|k| {
            let (prompt, slots) = match arch {
                Arch::StatelessLlm => ((k - 1) * p.t() + p.t_query, 0),
                Arch::Rxt => (p.t_query, p.s_mem),
                Arch::SyncMat => (p.t_query + if k > 1 { p.t_answer } else { 0 }, p.s_mem),
            };
            cumulative += prompt + p.t_answer;
            TurnCost {
                turn: k,
                prompt_tokens: prompt,
                generated_tokens: p.t_answer,
                memory_slots: slots,
                cumulative_tokens: cumulative,
            }
        })
        .collect())
}

pub fn cumulative_tokens(p: &CostModelParams, arch: Arch) -> Result<usize> {
    Ok(conversation_token_cost(p, arch)?.last().map_or(0, |t| t.cumulative_tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(n: usize, q: usize, a: usize) -> CostModelParams {
        CostModelParams {
            n_turns: n,
            t_query: q,
            t_answer: a,
            s_mem: 16,
        }
    }

    #[test]
    fn first_turn_is_the_same_for_every_architecture() {
        let costs: Vec<_> = Arch::ALL.iter().map(|&a| conversation_token_cost(&p(1, 7, 9), a).unwrap()[0].tokens()).collect();
        assert!(costs.iter().all(|&c| c == 16));
    }

    #[test]
    fn eight_turns_of_fifty_and_fifty() {
        let brute = |k: usize| (k - 1) * 100 + 50 + 50;
        let oracle: usize = (1..=8).map(brute).sum();
        assert_eq!(oracle, 3600);
        assert_eq!(cumulative_tokens(&p(8, 50, 50), Arch::StatelessLlm).unwrap(), 3600);
        assert_eq!(cumulative_tokens(&p(8, 50, 50), Arch::Rxt).unwrap(), 800);
        assert_eq!(cumulative_tokens(&p(8, 50, 50), Arch::SyncMat).unwrap(), 800 + 7 * 50);
    }

    #[test]
    fn rejects_zero_params() {
        assert!(conversation_token_cost(&p(0, 1, 1), Arch::Rxt).is_err());
        assert!(conversation_token_cost(&p(1, 0, 1), Arch::Rxt).is_err());
    }

    proptest! {
        #[test]
        fn ratio_is_affine_in_turns(n in 1usize..=32, t in 1usize..60) {
            let ratio = |n| cumulative_tokens(&p(n, t, t), Arch::StatelessLlm).unwrap() as f64
                / cumulative_tokens(&p(n, t, t), Arch::Rxt).unwrap() as f64;
            prop_assert!((ratio(n) - (n as f64 + 1.0) / 2.0).abs() < 1e-12);
        }

        #[test]
        fn prompt_is_constant_for_rxt_and_affine_for_the_llm(n in 2usize..=32, q in 1usize..40, a in 1usize..40) {
            let rxt = conversation_token_cost(&p(n, q, a), Arch::Rxt).unwrap();
            let llm = conversation_token_cost(&p(n, q, a), Arch::StatelessLlm).unwrap();
            for k in 1..n {
                prop_assert_eq!(rxt[k].prompt_tokens, rxt[0].prompt_tokens);
                prop_assert_eq!(llm[k].prompt_tokens - llm[k - 1].prompt_tokens, q + a);
            }
        }
    }
}
