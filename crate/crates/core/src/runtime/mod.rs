//! Event-driven inference: answer against the committed memory, then fold
//! the finished interaction into memory off the user-facing path.
//!
//! A new query blocks until the previous interaction's memory update has
//! committed, so interaction `t + 1` always reads `STM_t`.

pub mod repl;

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::abms::{MemoryKv, MemorySource, ShortTermMemory};
use crate::attention::KvCache;
use crate::error::{Error, Result};
use crate::model::tokenizer::{self, EOS};
use crate::model::Rxt;
use crate::numcore::{Graph, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub stop_token: usize,
    /// Ignore the stop token and never emit special tokens, so every answer
    /// has exactly `max_new_tokens` tokens. Used by benchmarks.
    pub force_length: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            sampling: Sampling::Greedy,
            stop_token: EOS,
            force_length: false,
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if let Sampling::Temperature { tau, .. } = self.sampling {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid("generation", "temperature must be positive"));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("generation", "max_new_tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Query,
    Response,
}

/// Seconds are measured from engine creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub tokens: Vec<usize>,
    pub interaction: usize,
    pub received_s: f64,
    pub first_token_s: Option<f64>,
    pub last_token_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    /// 1-based interaction index.
    pub t: usize,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub stm_version_used: u64,
    pub stm_version_produced: u64,
    pub events: [Event; 2],
    /// Time spent waiting for the previous update to commit.
    pub blocked_s: f64,
    pub prompt_s: f64,
    pub per_token_s: f64,
    pub prompt_tokens: usize,
    pub prompt_flops: u64,
    pub generation_flops: u64,
    /// Largest self-attention span plus memory slots seen by any token.
    pub max_attention_span: usize,
    /// Peak of live tape elements plus cached keys/values during the turn.
    pub peak_live_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub version_produced: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub flops: u64,
    pub committed: bool,
}

impl UpdateTiming {
    pub fn seconds(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    Background,
    /// Runs the update synchronously after the answer is produced.
    Inline,
}

/// Fault injection for tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct EngineHooks {
    pub update_delay: Option<Duration>,
    pub fail_updates: bool,
}

struct Committed {
    stm: Arc<ShortTermMemory>,
    kv: Arc<Vec<MemoryKv>>,
}

struct MemState {
    current: Committed,
    pending: bool,
    last_error: Option<String>,
    timings: Vec<UpdateTiming>,
}

struct Shared {
    state: Mutex<MemState>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, MemState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub interactions: usize,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub prompt_flops: u64,
    pub generation_flops: u64,
}

pub struct Engine {
    model: Arc<Rxt>,
    shared: Arc<Shared>,
    mode: UpdateMode,
    hooks: EngineHooks,
    clock: Instant,
    records: Vec<InteractionRecord>,
    worker: Option<JoinHandle<()>>,
    counters: Counters,
}

fn commit_for(model: &Rxt, stm: ShortTermMemory) -> Result<Committed> {
    let kv = model.precompute_memory_kv(&stm)?;
    Ok(Committed {
        stm: Arc::new(stm),
        kv: Arc::new(kv),
    })
}

/// Encodes `[Query] X [Answer] Y [EOS]` and applies memory attention,
/// returning the new state and the operation count.
pub fn memory_update(model: &Rxt, stm: &ShortTermMemory, interaction: &[usize]) -> Result<(ShortTermMemory, u64)> {
    let mut g = Graph::no_grad(&model.params);
    let ed = model.encode(&mut g, interaction)?;
    let prev = stm.bind(&mut g);
    let next = model.memory.update(&mut g, &prev, &ed)?;
    let slots = next.iter().map(|&v| g.value(v).clone()).collect();
    Ok((stm.successor(slots)?, g.tape().flops()))
}

fn pick(logits: &[f64], settings: &GenerationSettings, rng: &mut Rng) -> usize {
    let allowed = |i: usize| !settings.force_length || !tokenizer::is_special(i);
    match settings.sampling {
        Sampling::Greedy => {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (i, &v) in logits.iter().enumerate() {
                if allowed(i) && v > best.1 {
                    best = (i, v);
                }
            }
            best.0
        }
        Sampling::Temperature { tau, .. } => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &v)| if allowed(i) { ((v - max) / tau).exp() } else { 0.0 })
                .collect();
            let mut u = rng.uniform() * w.iter().sum::<f64>();
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
        }
    }
}

impl Engine {
    pub fn new(model: Arc<Rxt>, mode: UpdateMode) -> Result<Self> {
        let stm = model.initial_stm()?;
        Self::with_stm(model, mode, stm)
    }

    /// Starts from a saved memory state instead of the learned initial one.
    pub fn with_stm(model: Arc<Rxt>, mode: UpdateMode, stm: ShortTermMemory) -> Result<Self> {
        let c = &model.config;
        if stm.n_layers() != c.n_layers || stm.slots_per_layer() != c.stm_slots || stm.dim() != c.model_dim {
            return Err(Error::Config("memory state does not match the model".into()));
        }
        let current = commit_for(&model, stm)?;
        Ok(Self {
            model,
            shared: Arc::new(Shared {
                state: Mutex::new(MemState {
                    current,
                    pending: false,
                    last_error: None,
                    timings: Vec::new(),
                }),
                cv: Condvar::new(),
            }),
            mode,
            hooks: EngineHooks::default(),
            clock: Instant::now(),
            records: Vec::new(),
            worker: None,
            counters: Counters::default(),
        })
    }

    pub fn with_hooks(mut self, hooks: EngineHooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn model(&self) -> &Rxt {
        &self.model
    }

    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    fn wait_committed(&self) -> MutexGuard<'_, MemState> {
        let mut st = self.shared.lock();
        while st.pending {
            st = self.shared.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        st
    }

    /// Blocks until no update is in flight.
    pub fn wait_idle(&mut self) {
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
        drop(self.wait_committed());
    }

    /// The committed memory state, waiting for any in-flight update.
    pub fn stm(&self) -> Arc<ShortTermMemory> {
        self.wait_committed().current.stm.clone()
    }

    /// Version visible right now, without waiting.
    pub fn committed_version(&self) -> u64 {
        self.shared.lock().current.stm.version()
    }

    pub fn update_pending(&self) -> bool {
        self.shared.lock().pending
    }

    /// Error from the most recent failed update, cleared on read.
    pub fn take_update_error(&self) -> Option<String> {
        self.shared.lock().last_error.take()
    }

    pub fn update_timings(&self) -> Vec<UpdateTiming> {
        self.shared.lock().timings.clone()
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Back to the learned initial memory.
    pub fn reset(&mut self) -> Result<()> {
        self.wait_idle();
        let fresh = commit_for(&self.model, self.model.initial_stm()?)?;
        self.shared.lock().current = fresh;
        Ok(())
    }

    pub fn interact_text(&mut self, query: &str, settings: &GenerationSettings) -> Result<(String, InteractionRecord)> {
        let ids = tokenizer::encode(query)?;
        let rec = self.interact(&ids, settings)?;
        Ok((tokenizer::decode(&rec.answer), rec))
    }

    /// Answers `query` against the committed memory and schedules the
    /// memory update. Returns as soon as the last answer token exists.
    pub fn interact(&mut self, query: &[usize], settings: &GenerationSettings) -> Result<InteractionRecord> {
        settings.validate()?;
        if query.is_empty() {
            return Err(Error::invalid("interact", "query is empty"));
        }
        let received = self.now();
        let t = self.records.len() + 1;
        let committed = {
            let st = self.wait_committed();
            Committed {
                stm: st.current.stm.clone(),
                kv: st.current.kv.clone(),
            }
        };
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
        let blocked_s = self.now() - received;
        let version = committed.stm.version();

        let prompt = tokenizer::prompt(query);
        let limit = self.model.config.max_interaction_len;
        if prompt.len() + 1 > limit {
            return Err(Error::LengthOverflow {
                len: prompt.len() + 1,
                limit,
            });
        }
        let max_new = settings.max_new_tokens.min(limit - prompt.len() - 1);
        let sources: Vec<MemorySource> = committed.kv.iter().map(MemorySource::Precomputed).collect();
        let mut caches = KvCache::new(self.model.config.n_layers, self.model.config.model_dim, limit);
        let kv_elements: usize = committed.kv.iter().map(|m| m.elements()).sum();
        let mut rng = match settings.sampling {
            Sampling::Temperature { seed, .. } => Rng::new(seed).split(version),
            Sampling::Greedy => Rng::new(0),
        };

        let t0 = Instant::now();
        let mut g = Graph::with_tape(&self.model.params, Tape::no_grad());
        let out = self.model.decode(&mut g, &prompt, 0, &sources, Some(&mut caches))?;
        let mut logits = g.value(out.logits).row(prompt.len() - 1).to_vec();
        let prompt_flops = g.tape().flops();
        let mut peak = g.tape().live_elements() + caches.elements() + kv_elements;
        drop(g);
        let prompt_s = t0.elapsed().as_secs_f64();

        let mut answer = Vec::new();
        let mut generation_flops = 0;
        let mut first_token_s = None;
        let gen0 = Instant::now();
        let mut steps = 0usize;
        while answer.len() < max_new {
            let next = pick(&logits, settings, &mut rng);
            steps += 1;
            if !settings.force_length && next == settings.stop_token {
                break;
            }
            answer.push(next);
            first_token_s.get_or_insert_with(|| self.now());
            if answer.len() == max_new {
                break;
            }
            let pos = prompt.len() + answer.len() - 1;
            let mut g = Graph::with_tape(&self.model.params, Tape::no_grad());
            let out = self.model.decode(&mut g, &[next], pos, &sources, Some(&mut caches))?;
            logits = g.value(out.logits).row(0).to_vec();
            generation_flops += g.tape().flops();
            peak = peak.max(g.tape().live_elements() + caches.elements() + kv_elements);
        }
        let per_token_s = gen0.elapsed().as_secs_f64() / steps.max(1) as f64;
        let last_token_s = self.now();
        let max_attention_span = caches.len() + self.model.config.stm_slots;

        let record = InteractionRecord {
            t,
            query: query.to_vec(),
            answer: answer.clone(),
            stm_version_used: version,
            stm_version_produced: version + 1,
            events: [
                Event {
                    kind: EventKind::Query,
                    tokens: query.to_vec(),
                    interaction: t,
                    received_s: received,
                    first_token_s: None,
                    last_token_s: None,
                },
                Event {
                    kind: EventKind::Response,
                    tokens: answer.clone(),
                    interaction: t,
                    received_s: received,
                    first_token_s,
                    last_token_s: Some(last_token_s),
                },
            ],
            blocked_s,
            prompt_s,
            per_token_s,
            prompt_tokens: prompt.len(),
            prompt_flops,
            generation_flops,
            max_attention_span,
            peak_live_elements: peak,
        };
        self.counters.interactions += 1;
        self.counters.prompt_tokens += prompt.len();
        self.counters.generated_tokens += answer.len();
        self.counters.prompt_flops += prompt_flops;
        self.counters.generation_flops += generation_flops;
        self.records.push(record.clone());

        let full = tokenizer::interaction(query, &answer);
        self.schedule_update(committed.stm, full);
        Ok(record)
    }

    fn schedule_update(&mut self, stm: Arc<ShortTermMemory>, interaction: Vec<usize>) {
        self.shared.lock().pending = true;
        let model = self.model.clone();
        let shared = self.shared.clone();
        let hooks = self.hooks;
        let clock = self.clock;
        let job = move || {
            if let Some(d) = hooks.update_delay {
                std::thread::sleep(d);
            }
            let start_s = clock.elapsed().as_secs_f64();
            let result = if hooks.fail_updates {
                Err(Error::Curriculum("injected update failure".into()))
            } else {
                memory_update(&model, &stm, &interaction).and_then(|(next, flops)| Ok((commit_for(&model, next)?, flops)))
            };
            let end_s = clock.elapsed().as_secs_f64();
            let mut st = shared.lock();
            let version_produced = stm.version() + 1;
            match result {
                Ok((committed, flops)) => {
                    st.current = committed;
                    st.timings.push(UpdateTiming {
                        version_produced,
                        start_s,
                        end_s,
                        flops,
                        committed: true,
                    });
                }
                Err(e) => {
                    log::warn!("memory update failed, keeping version {}: {e}", stm.version());
                    st.last_error = Some(e.to_string());
                    st.timings.push(UpdateTiming {
                        version_produced,
                        start_s,
                        end_s,
                        flops: 0,
                        committed: false,
                    });
                }
            }
            st.pending = false;
            shared.cv.notify_all();
        };
        match self.mode {
            UpdateMode::Inline => job(),
            UpdateMode::Background => self.worker = Some(std::thread::spawn(job)),
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

/// Memory state persisted between processes, tied to one model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub config_hash: u64,
    pub stm: ShortTermMemory,
}

pub fn save_session(path: &std::path::Path, model: &Rxt, stm: &ShortTermMemory) -> Result<()> {
    let s = SessionFile {
        config_hash: model.config.hash(),
        stm: stm.clone(),
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&s)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_session(path: &std::path::Path, model: &Rxt) -> Result<ShortTermMemory> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let s: SessionFile = serde_json::from_slice(&bytes)?;
    if s.config_hash != model.config.hash() {
        return Err(Error::Checkpoint("session was saved for a different model config".into()));
    }
    Ok(s.stm)
}

/// All-zero memory with the model's shape, version 0.
pub fn zero_stm(model: &Rxt) -> Result<ShortTermMemory> {
    let c = &model.config;
    ShortTermMemory::new(vec![Tensor::zeros(&[c.stm_slots, c.model_dim]); c.n_layers])
}

#[cfg(test)]
mod tests;
