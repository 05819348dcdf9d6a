//! Seeded fact-recall dialogues.
//!
//! Turn 1 states a fact (`k=483` / `ok`), the middle turns are small sums
//! whose answer is computable from the query alone, and the last turn asks
//! for the fact back (`k?` / `483`).

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer;
use crate::numcore::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub answer: String,
}

impl Turn {
    /// `[Query] X [Answer] Y [EOS]` token ids.
    pub fn tokens(&self) -> Result<Vec<usize>> {
        Ok(tokenizer::interaction(&tokenizer::encode(&self.query)?, &tokenizer::encode(&self.answer)?))
    }

    pub fn query_tokens(&self) -> Result<Vec<usize>> {
        tokenizer::encode(&self.query)
    }

    pub fn answer_tokens(&self) -> Result<Vec<usize>> {
        tokenizer::encode(&self.answer)
    }
}

/// Where a turn's answer comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactLink {
    /// Earlier turn that states the fact.
    pub source_turn: usize,
    /// Byte range of the answer that can only be known from that turn.
    pub answer_start: usize,
    pub answer_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: u64,
    pub seed: u64,
    pub turns: Vec<Turn>,
    /// One entry per turn.
    pub fact_map: Vec<Option<FactLink>>,
}

impl Dialogue {
    /// Positions within turn `t`'s answer tokens that depend on an earlier turn.
    pub fn fact_positions(&self, t: usize) -> std::ops::Range<usize> {
        match &self.fact_map[t] {
            Some(f) => f.answer_start..f.answer_end,
            None => 0..0,
        }
    }

    /// Every fact-bearing answer must be absent from its own query and
    /// present in its source turn.
    pub fn check_fact_dependency(&self) -> Result<()> {
        if self.fact_map.len() != self.turns.len() {
            return Err(Error::Data(format!("dialogue {}: fact_map length", self.id)));
        }
        for (t, link) in self.fact_map.iter().enumerate() {
            let Some(link) = link else { continue };
            let fact = self.turns[t]
                .answer
                .get(link.answer_start..link.answer_end)
                .filter(|f| !f.is_empty())
                .ok_or_else(|| Error::Data(format!("dialogue {}: bad fact span", self.id)))?;
            if link.source_turn >= t {
                return Err(Error::Data(format!("dialogue {}: fact source is not earlier", self.id)));
            }
            if self.turns[t].query.contains(fact) {
                return Err(Error::Data(format!("dialogue {}: turn {t} query leaks its fact", self.id)));
            }
            if !self.turns[link.source_turn].query.contains(fact) {
                return Err(Error::Data(format!("dialogue {}: fact missing from source turn", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_dialogues: usize,
    pub n_turns: usize,
    /// Digits in each remembered value.
    pub value_len: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_dialogues: 2000,
            n_turns: 3,
            value_len: 3,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

const KEYS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn one_dialogue(id: u64, seed: u64, cfg: &DataConfig) -> Dialogue {
    let mut rng = Rng::new(seed);
    let key = KEYS[rng.below(KEYS.len())] as char;
    let value: String = (0..cfg.value_len).map(|_| char::from(b'0' + rng.below(10) as u8)).collect();
    let mut turns = vec![Turn {
        query: format!("{key}={value}"),
        answer: "ok".into(),
    }];
    for _ in 2..cfg.n_turns {
        let a = rng.below(5);
        let b = rng.below(5);
        turns.push(Turn {
            query: format!("{a}+{b}"),
            answer: format!("{}", a + b),
        });
    }
    turns.push(Turn {
        query: format!("{key}?"),
        answer: value.clone(),
    });
    let mut fact_map = vec![None; turns.len()];
    fact_map[turns.len() - 1] = Some(FactLink {
        source_turn: 0,
        answer_start: 0,
        answer_end: value.len(),
    });
    Dialogue {
        id,
        seed,
        turns,
        fact_map,
    }
}

/// Deterministic, duplicate-free generation split into train/val/test.
pub fn gen_dialogues(cfg: &DataConfig, vocab_size: usize) -> Result<Dataset> {
    if cfg.n_turns < 2 {
        return Err(Error::Data("dialogues need at least two turns".into()));
    }
    if cfg.value_len == 0 {
        return Err(Error::Data("value_len must be positive".into()));
    }
    if vocab_size <= b'z' as usize {
        return Err(Error::Data(format!("vocab of {vocab_size} cannot hold the dialogue alphabet")));
    }
    if !(cfg.val_fraction >= 0.0 && cfg.test_fraction >= 0.0 && cfg.val_fraction + cfg.test_fraction < 1.0) {
        return Err(Error::Data("split fractions must be non-negative and leave a train split".into()));
    }
    let capacity = 26.0 * 10f64.powi(cfg.value_len as i32) * 25f64.powi(cfg.n_turns as i32 - 2);
    if (cfg.n_dialogues as f64) > capacity / 2.0 {
        return Err(Error::Data(format!("{} unique dialogues requested, too close to the {capacity} possible", cfg.n_dialogues)));
    }
    let mut root = Rng::new(cfg.seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(cfg.n_dialogues);
    while all.len() < cfg.n_dialogues {
        let seed = root.next_u64();
        let d = one_dialogue(all.len() as u64, seed, cfg);
        if seen.insert(d.turns.clone()) {
            d.check_fact_dependency()?;
            all.push(d);
        }
    }
    let n_test = (cfg.n_dialogues as f64 * cfg.test_fraction).round() as usize;
    let n_val = (cfg.n_dialogues as f64 * cfg.val_fraction).round() as usize;
    let test = all.split_off(all.len() - n_test);
    let val = all.split_off(all.len() - n_val);
    Ok(Dataset { train: all, val, test })
}

pub fn write_jsonl(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Dialogue>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        d.check_fact_dependency()?;
        out.push(d);
    }
    Ok(out)
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, rows) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        write_jsonl(&dir.join(format!("{name}.jsonl")), rows)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let read = |n: &str| read_jsonl(&dir.join(format!("{n}.jsonl")));
    Ok(Dataset {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    })
}
