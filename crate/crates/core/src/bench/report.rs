//! CSV emission and the plain-text summary derived from it.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::cost::{conversation_token_cost, Arch, CostModelParams};
use crate::bench::latency::{prompt_ratio, LatencyRow};
use crate::error::{Error, Result};

pub const LATENCY_COLUMNS: [&str; 8] = [
    "turn",
    "arch",
    "prompt_s",
    "per_token_s",
    "update_s",
    "prompt_tokens",
    "prompt_flops",
    "status",
];
pub const COST_COLUMNS: [&str; 6] = ["turn", "arch", "prompt_tokens", "generated_tokens", "memory_slots", "cumulative_tokens"];
pub const EVAL_COLUMNS: [&str; 7] = ["seed", "arch", "scope", "memory", "ppl", "accuracy", "tokens"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub turn: usize,
    pub arch: String,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub memory_slots: usize,
    pub cumulative_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub arch: String,
    pub scope: String,
    /// `teacher_forced`, `zeroed`, or `none` for the baseline.
    pub memory: String,
    pub ppl: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn cost_rows(p: &CostModelParams) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for arch in Arch::ALL {
        for c in conversation_token_cost(p, arch)? {
            rows.push(CostRow {
                turn: c.turn,
                arch: arch.name().into(),
                prompt_tokens: c.prompt_tokens,
                generated_tokens: c.generated_tokens,
                memory_slots: c.memory_slots,
                cumulative_tokens: c.cumulative_tokens,
            });
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by this module, refusing any other header.
fn read_csv<T: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != columns {
        return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_latency_csv(path: &Path) -> Result<Vec<LatencyRow>> {
    read_csv(path, &LATENCY_COLUMNS)
}

pub fn read_cost_csv(path: &Path) -> Result<Vec<CostRow>> {
    read_csv(path, &COST_COLUMNS)
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    read_csv(path, &EVAL_COLUMNS)
}

/// Headline numbers, all recomputable from the CSVs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub last_turn: usize,
    /// Prompt latency at the last turn over the first, per architecture.
    pub prompt_ratios: Vec<(String, Option<f64>)>,
    /// Cumulative tokens at the last turn, per architecture.
    pub cumulative_tokens: Vec<(String, usize)>,
    /// Mean PPL over seeds per `(arch, scope, memory)`.
    pub mean_ppl: Vec<(String, f64)>,
}

fn distinct<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

pub fn summarize(latency: &[LatencyRow], cost: &[CostRow], eval: &[EvalRow]) -> Summary {
    let last_turn = latency.iter().map(|r| r.turn).max().unwrap_or(0);
    let prompt_ratios = distinct(latency.iter().map(|r| r.arch.as_str()))
        .into_iter()
        .map(|a| {
            let r = prompt_ratio(latency, &a, 1, last_turn);
            (a, r)
        })
        .collect();
    let cumulative_tokens = distinct(cost.iter().map(|r| r.arch.as_str()))
        .into_iter()
        .map(|a| {
            let c = cost.iter().filter(|r| r.arch == a).max_by_key(|r| r.turn).map_or(0, |r| r.cumulative_tokens);
            (a, c)
        })
        .collect();
    let keys = distinct(eval.iter().map(|r| r.arch.as_str()));
    let mut mean_ppl = Vec::new();
    for arch in keys {
        for scope in distinct(eval.iter().filter(|r| r.arch == arch).map(|r| r.scope.as_str())) {
            for mem in distinct(eval.iter().filter(|r| r.arch == arch && r.scope == scope).map(|r| r.memory.as_str())) {
                let v: Vec<f64> = eval
                    .iter()
                    .filter(|r| r.arch == arch && r.scope == scope && r.memory == mem)
                    .map(|r| r.ppl)
                    .collect();
                mean_ppl.push((format!("{arch}/{scope}/{mem}"), v.iter().sum::<f64>() / v.len() as f64));
            }
        }
    }
    Summary {
        last_turn,
        prompt_ratios,
        cumulative_tokens,
        mean_ppl,
    }
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.last_turn > 0 {
            let _ = writeln!(s, "prompt latency, turn {} / turn 1:", self.last_turn);
            for (a, r) in &self.prompt_ratios {
                match r {
                    Some(r) => writeln!(s, "  {a}: {r}"),
                    None => writeln!(s, "  {a}: n/a (overflow)"),
                }
                .expect("write to string");
            }
        }
        if !self.cumulative_tokens.is_empty() {
            let _ = writeln!(s, "cumulative tokens processed:");
            for (a, c) in &self.cumulative_tokens {
                let _ = writeln!(s, "  {a}: {c}");
            }
        }
        if !self.mean_ppl.is_empty() {
            let _ = writeln!(s, "mean perplexity over seeds:");
            for (k, p) in &self.mean_ppl {
                let _ = writeln!(s, "  {k}: {p}");
            }
        }
        s
    }
}

/// Writes `latency.csv`, `cost.csv`, `eval.csv`, and `summary.txt` into
/// `dir`. Empty inputs still get a header-only file.
pub fn emit_report(dir: &Path, latency: &[LatencyRow], cost: &[CostRow], eval: &[EvalRow]) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("latency.csv"), &LATENCY_COLUMNS, latency)?;
    write_csv(&dir.join("cost.csv"), &COST_COLUMNS, cost)?;
    write_csv(&dir.join("eval.csv"), &EVAL_COLUMNS, eval)?;
    let summary = summarize(latency, cost, eval);
    let path = dir.join("summary.txt");
    std::fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
