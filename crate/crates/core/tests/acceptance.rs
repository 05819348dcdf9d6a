//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 2 7`.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rxt::abms::{memory_read, MemoryAttentionVariant, MemorySource, ShortTermMemory};
use rxt::attention::KvCache;
use rxt::bench::cost::{conversation_token_cost, cumulative_tokens, Arch, CostModelParams};
use rxt::bench::data::{gen_dialogues, read_jsonl, write_jsonl, DataConfig};
use rxt::bench::efficacy::{ablation_drop, run_seeds, GapReport};
use rxt::bench::eval::EvalResult;
use rxt::bench::latency::{latency_bench, LatencyConfig, LatencyRow};
use rxt::bench::report::{cost_rows, emit_report, read_cost_csv, read_eval_csv, read_latency_csv, EvalRow};
use rxt::model::tokenizer::{self, interaction, N_SPECIAL};
use rxt::model::{checkpoint, Baseline, ModelConfig, Rxt};
use rxt::numcore::gradcheck::{self, GradCheckReport};
use rxt::numcore::{cross_entropy, GateMix, Graph, Mask, ParamId, Rng, Tape, Tensor, Var, NORM_EPS};
use rxt::runtime::{Engine, GenerationSettings, UpdateMode};
use rxt::training::curriculum::TrainConfig;
use rxt::training::{
    dialogue_loss, joint_loss, mask_tokens, mem_loss, memattn_target, noisy_initial_memory, stage3_memattn_step,
    stage4_memory_aware_step, w_schedule, Adam, AdamConfig, JointTrainConfig, MemAttnPretrainConfig, Stage4Config,
};
use rxt::Result;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        n_heads: 2,
        stm_slots: 4,
        ffn_hidden: 24,
        moe_experts: 2,
        max_interaction_len: 40,
        seed,
        ..Default::default()
    }
}

fn turn(q: &str, a: &str) -> Vec<usize> {
    interaction(&tokenizer::encode(q).unwrap(), &tokenizer::encode(a).unwrap())
}

fn logits_with_stm(m: &Rxt, toks: &[usize], stm: &ShortTermMemory) -> Result<Tensor> {
    let mut g = Graph::no_grad(&m.params);
    let slots = stm.bind(&mut g);
    let src: Vec<MemorySource> = slots.into_iter().map(MemorySource::Slots).collect();
    let out = m.decode(&mut g, toks, 0, &src, None)?;
    Ok(g.value(out.logits).clone())
}

fn set_write_gates(m: &mut Rxt, bias: f64) {
    let ids: Vec<ParamId> = m.params.ids().collect();
    for id in ids {
        let name = m.params.name(id).to_string();
        if !name.contains(".write.gate.") {
            continue;
        }
        let shape = m.params.get(id).shape().to_vec();
        let v = if name.ends_with(".b") { Tensor::full(&shape, bias) } else { Tensor::zeros(&shape) };
        m.params.set(id, v).unwrap();
    }
}

fn snapshot(m: &Rxt, prefix: &str) -> Vec<Tensor> {
    m.params
        .ids()
        .filter(|&id| m.params.name(id).starts_with(prefix))
        .map(|id| m.params.get(id).clone())
        .collect()
}

// ---------------------------------------------------------------- 1

type Probe = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn weighted(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 5 + 2) % 13) as f64 / 6.0 - 1.0).collect();
    let shape = t.shape(v).to_vec();
    let wv = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(v, wv)?;
    t.sum(p)
}

fn op_probes() -> Vec<Probe> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted(t, o)
        })),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], Box::new(|t, v| {
            let o = t.matmul_t(v[0], v[1])?;
            weighted(t, o)
        })),
        ("elementwise", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.scale(c, 1.3)?;
            weighted(t, d)
        })),
        ("broadcast", vec![vec![3, 4], vec![4], vec![3]], Box::new(|t, v| {
            let a = t.add_row(v[0], v[1])?;
            let b = t.mul_col(a, v[2])?;
            weighted(t, b)
        })),
        ("activations", vec![vec![2, 5]], Box::new(|t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.tanh(v[0])?;
            let c = t.silu(v[0])?;
            let s = t.add_n(&[a, b, c])?;
            weighted(t, s)
        })),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let s = t.add(a, b)?;
            weighted(t, s)
        })),
        ("rms_norm", vec![vec![3, 6], vec![6]], Box::new(|t, v| {
            let s = t.rms_norm(v[0], v[1], NORM_EPS)?;
            weighted(t, s)
        })),
        ("embedding_gather", vec![vec![5, 3]], Box::new(|t, v| {
            let e = t.embedding(v[0], &[4, 0, 4, 2])?;
            let g = t.gather_rows(e, &[3, 1, 1])?;
            weighted(t, g)
        })),
        ("scatter_select", vec![vec![2, 3], vec![1, 3], vec![3, 2]], Box::new(|t, v| {
            let s = t.scatter_add_rows(vec![(v[0], vec![0, 2]), (v[1], vec![2])], 3, 3)?;
            let c = t.select_col(v[2], 1, &[2, 0, 0])?;
            let m = t.mul_col(s, c)?;
            weighted(t, m)
        })),
        ("rows", vec![vec![2, 3], vec![3, 3]], Box::new(|t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let s = t.slice_rows(c, 1, 3)?;
            let m = t.mean_rows(s)?;
            let r = t.reshape(m, &[1, 3])?;
            weighted(t, r)
        })),
        ("attention", vec![vec![2, 4], vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let o = t.attention(v[0], v[1], v[2], 2, &Mask::None)?;
            weighted(t, o)
        })),
        ("causal_attention", vec![vec![3, 4], vec![4, 4], vec![4, 4]], Box::new(|t, v| {
            let o = t.attention(v[0], v[1], v[2], 2, &Mask::Causal { offset: 1 })?;
            weighted(t, o)
        })),
        ("rope", vec![vec![3, 8]], Box::new(|t, v| {
            let o = t.rope(v[0], &[1, 4, 30], 4, 10000.0)?;
            weighted(t, o)
        })),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|t, v| t.cross_entropy(v[0], &[2, 0, 9, 4], 9))),
        ("cosine_rows", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.cosine_rows(v[0], v[1], false))),
        ("mean", vec![vec![2, 3]], Box::new(|t, v| {
            let m = t.mul(v[0], v[0])?;
            t.mean(m)
        })),
        ("topk_renorm", vec![vec![3, 4]], Box::new(|t, v| {
            let p = t.softmax(v[0], 1)?;
            let (w, _) = t.topk_renorm(p, 2)?;
            weighted(t, w)
        })),
        ("sigmoid_gate", vec![vec![2, 3], vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let g = t.sigmoid(v[2])?;
            let o = t.gate_mix(v[0], v[1], g, GateMix::Convex)?;
            weighted(t, o)
        })),
        ("tanh_gate", vec![vec![2, 3], vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let g = t.tanh(v[2])?;
            let o = t.gate_mix(v[0], v[1], g, GateMix::Tanh)?;
            weighted(t, o)
        })),
    ]
}

/// Parameters whose names pass `keep`, probed at a few random coordinates.
fn model_check(m: &Rxt, seed: u64, keep: fn(&str) -> bool, f: impl Fn(&mut Graph) -> Result<Var>) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = m.params.ids().filter(|&id| keep(m.params.name(id))).collect();
    gradcheck::check_params(&m.params, &ids, 1e-5, Some(3), &mut Rng::new(seed), f)
}

fn all(_: &str) -> bool {
    true
}

/// The decoder reads encoder states through a stop-gradient, so the
/// encoder and the shared embedding reach the AR term only through a path
/// the defined gradient excludes. Finite differences would see it.
fn downstream_of_detach(name: &str) -> bool {
    !name.starts_with("encoder.") && name != "embed"
}

fn criterion_1() -> Outcome {
    let mut worst = GradCheckReport::default();
    let mut cases = 0usize;
    for seed in 0..3u64 {
        for (name, shapes, f) in op_probes() {
            let mut rng = Rng::new(77 + seed).split(cases as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let r = ok(gradcheck::check(&inputs, 1e-5, |t, v| f(t, v)))?;
            ensure!(r.passes(1e-4), "{name} (seed {seed}): rel err {:.3e}", r.max_rel_err);
            worst.merge(&r);
            cases += 1;
        }
    }
    let seq = turn("k=42", "ok");
    let two = [turn("q=7", "ok"), turn("q?", "7")];
    for seed in 0..3u64 {
        let m = ok(Rxt::new(small(seed)))?;
        let jc = JointTrainConfig {
            alpha: 0.8,
            beta: 1.2,
            noise_std: 0.05,
            ..Default::default()
        };
        type Pick = fn(&rxt::training::JointTerms) -> Var;
        let parts: [(&str, Pick, fn(&str) -> bool); 3] = [
            ("L_AR", |t| t.ar, downstream_of_detach),
            ("L_MLM", |t| t.mlm, all),
            ("L_Joint", |t| t.joint, downstream_of_detach),
        ];
        for (name, pick, keep) in parts {
            let r = ok(model_check(&m, seed, keep, |g| {
                let t = joint_loss(g, &m, &seq, &jc, &mut Rng::new(seed + 100))?;
                Ok(pick(&t))
            }))?;
            ensure!(r.passes(1e-4), "{name} (seed {seed}): rel err {:.3e}", r.max_rel_err);
            worst.merge(&r);
            cases += 1;
        }
        let r = ok(model_check(&m, seed, all, |g| {
            let stm = m.initial_stm()?;
            let prev = stm.bind(g);
            let ed = m.encode(g, &seq)?;
            let data = m.encode_data(&seq)?;
            let targets = stm
                .layers()
                .iter()
                .zip(&data.layers)
                .map(|(p, e)| Ok(g.constant(memattn_target(p, e, 0.9)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(mem_loss(g, &m, &prev, &ed, &targets)?.0)
        }))?;
        ensure!(r.passes(1e-4), "L_Mem (seed {seed}): rel err {:.3e}", r.max_rel_err);
        worst.merge(&r);
        let r = ok(model_check(&m, seed, all, |g| {
            let stm0 = noisy_initial_memory(g, &m, 0.0, &mut Rng::new(0))?;
            Ok(dialogue_loss(g, &m, &two, stm0, false)?.total)
        }))?;
        ensure!(r.passes(1e-4), "Stage-4 L_total (seed {seed}): rel err {:.3e}", r.max_rel_err);
        worst.merge(&r);
        cases += 2;
    }
    ensure!(cases >= 50, "only {cases} cases");
    Ok(format!(
        "{cases} cases, {} coordinates, max rel err {:.2e}, max abs err {:.2e}",
        worst.coords_checked, worst.max_rel_err, worst.max_abs_err
    ))
}

// ---------------------------------------------------------------- 2

fn permuted(stm: &ShortTermMemory, perm: &[usize]) -> Result<ShortTermMemory> {
    let layers = stm
        .layers()
        .iter()
        .map(|t| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    ShortTermMemory::new(layers)
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig {
        max_interaction_len: 40,
        ..ModelConfig::default()
    };
    let perm: Vec<usize> = (0..cfg.stm_slots).rev().collect();

    // slot-permutation invariance of the read, directly and through the model
    let mut worst_perm = 0.0f64;
    for seed in 0..5u64 {
        let m = ok(Rxt::new(ModelConfig { seed, ..cfg.clone() }))?;
        let mut rng = Rng::new(seed);
        let stm = ok(ShortTermMemory::new((0..cfg.n_layers).map(|_| Tensor::randn(&[cfg.stm_slots, cfg.model_dim], 1.0, &mut rng)).collect()))?;
        let p = ok(permuted(&stm, &perm))?;
        let toks = turn("k=5", "ok");
        let a = ok(logits_with_stm(&m, &toks, &stm))?;
        let b = ok(logits_with_stm(&m, &toks, &p))?;
        worst_perm = worst_perm.max(a.max_abs_diff(&b));
        let (_, read) = m.decoder.layers[0].cross.as_ref().unwrap();
        let mut g = Graph::no_grad(&m.params);
        let h = g.constant(Tensor::randn(&[5, cfg.model_dim], 1.0, &mut rng));
        let (s1, s2) = (g.constant(stm.layer(0).clone()), g.constant(p.layer(0).clone()));
        let pos = [2, 3, 4, 5, 6];
        let r1 = ok(memory_read(&mut g, read, 0, h, &pos, MemorySource::Slots(s1)))?;
        let r2 = ok(memory_read(&mut g, read, 0, h, &pos, MemorySource::Slots(s2)))?;
        worst_perm = worst_perm.max(g.value(r1).max_abs_diff(g.value(r2)));
    }
    ensure!(worst_perm <= 1e-10, "read changed by {worst_perm:.3e} under slot permutation");

    // sigmoid gate keeps every element between its previous and update values
    let mut updates = 0;
    for variant in MemoryAttentionVariant::ALL {
        let m = ok(Rxt::new(ModelConfig { variant, seed: 3, ..cfg.clone() }))?;
        let mut stm = ok(m.initial_stm())?;
        let mut rng = Rng::new(9);
        for t in 0..50 {
            let x = format!("{}={}", (b'a' + rng.below(26) as u8) as char, rng.below(1000));
            let ed = ok(m.encode_data(&turn(&x, "ok")))?;
            let mut g = Graph::no_grad(&m.params);
            let prev = stm.bind(&mut g);
            let edv = ed.bind(&mut g);
            let parts = ok(m.memory.update_with_parts(&mut g, &prev, &edv))?;
            for (l, &(upd, next)) in parts.iter().enumerate() {
                let (p, u, n) = (g.value(prev[l]), g.value(upd), g.value(next));
                for i in 0..p.numel() {
                    let (a, b) = (p.data()[i], u.data()[i]);
                    let x = n.data()[i];
                    ensure!(
                        x >= a.min(b) && x <= a.max(b),
                        "{variant:?} update {t} layer {l}: {x} outside [{}, {}]",
                        a.min(b),
                        a.max(b)
                    );
                }
            }
            let slots = parts.iter().map(|&(_, n)| g.value(n).clone()).collect();
            stm = ok(stm.successor(slots))?;
            updates += 1;
        }
    }

    // gate boundary identities
    let toks = turn("k=123", "ok");
    for variant in MemoryAttentionVariant::ALL {
        let mut m = ok(Rxt::new(ModelConfig { variant, seed: 4, ..cfg.clone() }))?;
        let prev = ok(m.initial_stm())?;
        let ed = ok(m.encode_data(&toks))?;
        set_write_gates(&mut m, -1e4);
        let closed = ok(m.memory.update_memory(&m.params, &prev, &ed))?;
        ensure!(closed.layers() == prev.layers(), "{variant:?}: closed gate changed the memory");
        set_write_gates(&mut m, 1e4);
        let mut g = Graph::no_grad(&m.params);
        let p = prev.bind(&mut g);
        let e = ed.bind(&mut g);
        for (l, (upd, next)) in ok(m.memory.update_with_parts(&mut g, &p, &e))?.into_iter().enumerate() {
            ensure!(g.value(upd) == g.value(next), "{variant:?} layer {l}: open gate is not the update");
        }
    }

    // shape constancy over a 50-turn conversation
    let m = Arc::new(ok(Rxt::new(cfg.clone()))?);
    let mut e = ok(Engine::new(m.clone(), UpdateMode::Background))?;
    let settings = GenerationSettings {
        max_new_tokens: 8,
        ..Default::default()
    };
    for t in 0..50 {
        ok(e.interact(&tokenizer::encode(&format!("turn {t}")).unwrap(), &settings))?;
        let s = e.stm();
        ensure!(s.n_layers() == cfg.n_layers, "turn {t}: {} layers", s.n_layers());
        for l in s.layers() {
            ensure!(l.shape() == [cfg.stm_slots, cfg.model_dim], "turn {t}: layer shape {:?}", l.shape());
        }
    }
    e.wait_idle();
    ensure!(e.stm().version() == 50, "version {} after 50 turns", e.stm().version());
    Ok(format!(
        "permutation diff {worst_perm:.1e}, {updates} bounded updates, gate identities exact, shape fixed over 50 turns"
    ))
}

// ---------------------------------------------------------------- 3

fn argmax_regular(row: &[f64]) -> usize {
    (N_SPECIAL..row.len()).fold(N_SPECIAL, |b, i| if row[i] > row[b] { i } else { b })
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::default();
    let m = Arc::new(ok(Rxt::new(cfg.clone()))?);
    let stm = ok(m.update_memory(&ok(m.initial_stm())?, &turn("z=908", "ok")))?;
    let toks = turn("what is z", "it is 908");
    let split = toks.iter().position(|&t| t == tokenizer::ANSWER).unwrap() + 1;

    // incremental decoding against full forward, reactive decoder
    let full = ok(logits_with_stm(&m, &toks, &stm))?;
    let mut worst = 0.0f64;
    let mut cache = KvCache::new(cfg.n_layers, cfg.model_dim, cfg.max_interaction_len);
    for t in 0..toks.len() {
        let mut g = Graph::no_grad(&m.params);
        let mem = stm.bind(&mut g);
        let src: Vec<MemorySource> = mem.into_iter().map(MemorySource::Slots).collect();
        let out = ok(m.decode(&mut g, &toks[t..t + 1], t, &src, Some(&mut cache)))?;
        worst = worst.max(g.value(out.logits).max_abs_diff(&full.slice_rows(t, 1).unwrap()));
    }
    // stateless decoder, prompt chunk then single tokens
    let b = ok(Baseline::new(cfg.clone()))?;
    let mut g = Graph::no_grad(&b.params);
    let o = ok(b.forward(&mut g, &toks, 0, None))?;
    let bfull = g.value(o.logits).clone();
    let mut cache = KvCache::new(cfg.n_layers, cfg.model_dim, cfg.baseline_context);
    let mut g = Graph::no_grad(&b.params);
    let o = ok(b.forward(&mut g, &toks[..split], 0, Some(&mut cache)))?;
    worst = worst.max(g.value(o.logits).max_abs_diff(&bfull.slice_rows(0, split).unwrap()));
    for t in split..toks.len() {
        let mut g = Graph::no_grad(&b.params);
        let o = ok(b.forward(&mut g, &toks[t..t + 1], t, Some(&mut cache)))?;
        worst = worst.max(g.value(o.logits).max_abs_diff(&bfull.slice_rows(t, 1).unwrap()));
    }
    ensure!(worst <= 1e-8, "cached decoding differs by {worst:.3e}");

    // pre-cached memory projections against recomputing them every token
    let kv = ok(m.precompute_memory_kv(&stm))?;
    let query = tokenizer::encode("what is z").unwrap();
    let prompt = tokenizer::prompt(&query);
    let n_new = 12;
    let mut caches = [
        KvCache::new(cfg.n_layers, cfg.model_dim, cfg.max_interaction_len),
        KvCache::new(cfg.n_layers, cfg.model_dim, cfg.max_interaction_len),
    ];
    let mut chunk = prompt.clone();
    let mut pos = 0;
    let mut answer = Vec::new();
    while answer.len() < n_new {
        let mut logits = Vec::new();
        for (precomputed, cache) in [true, false].into_iter().zip(caches.iter_mut()) {
            let mut g = Graph::no_grad(&m.params);
            let src: Vec<MemorySource> = if precomputed {
                kv.iter().map(MemorySource::Precomputed).collect()
            } else {
                stm.bind(&mut g).into_iter().map(MemorySource::Slots).collect()
            };
            let out = ok(m.decode(&mut g, &chunk, pos, &src, Some(cache)))?;
            logits.push(g.value(out.logits).clone());
        }
        ensure!(logits[0] == logits[1], "token {}: pre-cached memory logits differ", answer.len());
        let next = argmax_regular(logits[0].row(logits[0].rows() - 1));
        answer.push(next);
        pos += chunk.len();
        chunk = vec![next];
    }
    // the runtime's generation path produces the same tokens
    let mut e = ok(Engine::with_stm(m.clone(), UpdateMode::Inline, stm.clone()))?;
    let rec = ok(e.interact(
        &query,
        &GenerationSettings {
            max_new_tokens: n_new,
            force_length: true,
            ..Default::default()
        },
    ))?;
    ensure!(rec.answer == answer, "engine answer {:?} != recomputed {:?}", rec.answer, answer);
    Ok(format!("cache diff {worst:.1e}; {n_new} pre-cached steps bit-identical"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let p = CostModelParams {
        n_turns: 8,
        t_query: 50,
        t_answer: 50,
        s_mem: 16,
    };
    let stateless = ok(cumulative_tokens(&p, Arch::StatelessLlm))?;
    let reactive = ok(cumulative_tokens(&p, Arch::Rxt))?;
    // closed forms: Σ_k k·(Tq+Ta) and N·(Tq+Ta)
    let t = p.t_query + p.t_answer;
    let closed_stateless = t * p.n_turns * (p.n_turns + 1) / 2;
    ensure!(
        (stateless, reactive) == (3600, 800) && closed_stateless == 3600 && p.n_turns * t == 800,
        "analytic model gives {stateless}/{reactive}"
    );

    // instrumented counters from real runs
    let cfg = ModelConfig {
        model_dim: 16,
        n_heads: 2,
        ffn_hidden: 24,
        moe_experts: 2,
        max_interaction_len: 101,
        ..ModelConfig::default()
    };
    let rxt = Arc::new(ok(Rxt::new(cfg.clone()))?);
    let base = ok(Baseline::new(cfg))?;
    let lc = LatencyConfig {
        n_turns: 8,
        t_query: 50,
        t_answer: 50,
        repeats: 1,
        warmup: 0,
    };
    let rows = ok(latency_bench(rxt.clone(), &base, &lc))?;
    ensure!(rows.iter().all(|r| r.status == "ok"), "a turn overflowed");
    let measured = |arch: &str| rows.iter().filter(|r| r.arch == arch).map(|r| r.prompt_tokens + lc.t_answer).sum::<usize>();
    let mut e = ok(Engine::new(rxt, UpdateMode::Inline))?;
    let gs = GenerationSettings {
        max_new_tokens: 50,
        force_length: true,
        ..Default::default()
    };
    for k in 0..8 {
        ok(e.interact(&vec![b'a' as usize + k; 48], &gs))?;
    }
    let c = e.counters();
    let engine_total = c.prompt_tokens + c.generated_tokens;
    ensure!(
        measured("stateless_llm") == 3600 && measured("rxt") == 800 && engine_total == 800,
        "counters give {} / {} (engine {engine_total})",
        measured("stateless_llm"),
        measured("rxt")
    );
    for (arch, name) in [(Arch::StatelessLlm, "stateless_llm"), (Arch::Rxt, "rxt")] {
        let model = ok(conversation_token_cost(&p, arch))?;
        for r in rows.iter().filter(|r| r.arch == name) {
            ensure!(r.prompt_tokens == model[r.turn - 1].prompt_tokens, "{name} turn {}: prompt tokens disagree", r.turn);
        }
    }

    // growth: 2·stateless = (N+1)·reactive, i.e. the ratio is affine in N
    let mut ratios = Vec::new();
    for n in 1..=32 {
        let q = CostModelParams { n_turns: n, ..p };
        let (s, r) = (ok(cumulative_tokens(&q, Arch::StatelessLlm))?, ok(cumulative_tokens(&q, Arch::Rxt))?);
        ensure!(2 * s == (n + 1) * r, "N={n}: {s} vs {r}");
        ensure!(r == n * t, "N={n}: reactive cost {r} is not linear");
        ratios.push(s as f64 / r as f64);
    }
    let second_diff = ratios.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).fold(0.0, f64::max);
    ensure!(second_diff < 1e-12, "ratio curvature {second_diff}");
    Ok(format!("3600 vs 800 from model and counters; ratio (N+1)/2 for N = 1..32"))
}

// ---------------------------------------------------------------- 5

fn turn_row<'a>(rows: &'a [LatencyRow], arch: &str, turn: usize) -> &'a LatencyRow {
    rows.iter().find(|r| r.arch == arch && r.turn == turn).expect("row exists")
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let rxt = Arc::new(ok(Rxt::new(cfg.clone()))?);
    let base = ok(Baseline::new(cfg))?;
    let lc = LatencyConfig {
        n_turns: 8,
        t_query: 24,
        t_answer: 24,
        repeats: 20,
        warmup: 3,
    };
    let rows = ok(latency_bench(rxt, &base, &lc))?;
    let (r1, r8) = (turn_row(&rows, "rxt", 1), turn_row(&rows, "rxt", 8));
    let (b1, b8) = (turn_row(&rows, "stateless_llm", 1), turn_row(&rows, "stateless_llm", 8));
    ensure!(b8.status == "ok", "baseline overflowed at turn 8");

    // op counters, exact
    for k in 1..=8 {
        let r = turn_row(&rows, "rxt", k);
        ensure!(r.prompt_tokens == lc.t_query && r.prompt_flops == r1.prompt_flops, "rxt turn {k} prompt work differs");
        let b = turn_row(&rows, "stateless_llm", k);
        ensure!(b.prompt_tokens == (k - 1) * (lc.t_query + lc.t_answer) + lc.t_query, "baseline turn {k}: {} tokens", b.prompt_tokens);
    }
    ensure!(b8.prompt_tokens == 7 * (lc.t_query + lc.t_answer) + lc.t_query, "baseline turn-8 token count");
    let flop_ratio = b8.prompt_flops as f64 / b1.prompt_flops as f64;
    ensure!(flop_ratio >= 2.0, "baseline prompt FLOP ratio {flop_ratio}");

    // wall clock
    let rxt_ratio = r8.prompt_s.unwrap() / r1.prompt_s.unwrap();
    let base_ratio = b8.prompt_s.unwrap() / b1.prompt_s.unwrap();
    ensure!(rxt_ratio <= 1.25, "rxt turn 8 / turn 1 prompt latency {rxt_ratio:.3}");
    ensure!(base_ratio >= 2.0, "baseline turn 8 / turn 1 prompt latency {base_ratio:.3}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "prompt latency t8/t1: rxt {rxt_ratio:.3}, baseline {base_ratio:.2}; tokens {}→{} (×{}), FLOPs ×{flop_ratio:.2}; {:.1}s",
        b1.prompt_tokens,
        b8.prompt_tokens,
        b8.prompt_tokens / b1.prompt_tokens,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let results = ok(run_seeds(&TrainConfig::default(), &DataConfig::default(), &[0, 1, 2], dir.path()))?;
    let elapsed = start.elapsed();
    for r in &results {
        println!(
            "    seed {}: stage-3 cosine {:.4}; fact PPL rxt {:.3} vs baseline {:.3}; fact accuracy {:.3} -> {:.3} with zeroed memory",
            r.seed,
            r.stage3_cosine,
            r.rxt_fact.ppl(),
            r.baseline_fact.ppl(),
            r.rxt_fact.accuracy(),
            r.rxt_fact_zeroed.accuracy()
        );
    }
    let gap = GapReport::new(&results);
    let min_cos = results.iter().map(|r| r.stage3_cosine).fold(f64::INFINITY, f64::min);
    let min_drop = results.iter().map(ablation_drop).fold(f64::INFINITY, f64::min);
    ensure!(min_cos >= 0.9, "(a) stage-3 held-out cosine {min_cos:.4} < 0.9");
    ensure!(
        gap.passes(),
        "(b) gaps {:?}, mean {:.3}, sd rxt {:.3}, sd baseline {:.3}",
        gap.gaps,
        gap.mean_gap,
        gap.sd_rxt,
        gap.sd_baseline
    );
    ensure!(min_drop >= 0.2, "(c) smallest relative accuracy drop {min_drop:.3} < 0.2");
    ensure!(elapsed < Duration::from_secs(3600), "pipeline took {elapsed:?}");
    Ok(format!(
        "(a) min cosine {min_cos:.4}; (b) mean PPL gap {:.3} > 3×{:.3}; (c) min accuracy drop {:.1}%; {:.0}s",
        gap.mean_gap,
        gap.sd_rxt.max(gap.sd_baseline),
        100.0 * min_drop,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let m = ok(Rxt::new(small(5)))?;
    let seq = turn("k=123", "ok");

    // detach boundary
    let cfg = JointTrainConfig {
        alpha: 1.0,
        beta: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new(&m.params);
    let t = ok(joint_loss(&mut g, &m, &seq, &cfg, &mut Rng::new(1)))?;
    let grads = ok(g.backward(t.objective))?;
    let mut encoder_tensors = 0;
    for (id, grad) in g.param_grads(&grads) {
        let name = m.params.name(id);
        if name.starts_with("encoder.") || name.starts_with("mlm.") {
            ensure!(grad.max_abs() == 0.0, "{name} got gradient {:e} with beta = 0", grad.max_abs());
            encoder_tensors += 1;
        }
    }

    // L_Joint against independently computed terms
    let cfg = JointTrainConfig {
        alpha: 0.7,
        beta: 1.3,
        noise_std: 0.0,
        ..Default::default()
    };
    let mut rng = Rng::new(2);
    let mut replay = rng.clone();
    let mut g = Graph::no_grad(&m.params);
    let t = ok(joint_loss(&mut g, &m, &seq, &cfg, &mut rng))?;
    let (ar, mlm, joint) = (g.value(t.ar).item(), g.value(t.mlm).item(), g.value(t.joint).item());
    ensure!(joint == 0.7 * ar + 1.3 * mlm, "joint {joint} != 0.7·{ar} + 1.3·{mlm}");
    let (masked, positions) = ok(mask_tokens(&seq, cfg.mask_prob, &mut replay))?;
    let ed = ok(m.encode_data(&masked))?;
    let mut h = Graph::no_grad(&m.params);
    let last = h.constant(ed.layers.last().unwrap().clone());
    let logits = ok(m.mlm_logits(&mut h, last))?;
    let mut targets = vec![tokenizer::PAD; seq.len()];
    for p in positions {
        targets[p] = seq[p];
    }
    let mlm_ref = ok(cross_entropy(h.value(logits), &targets, tokenizer::PAD))?;
    let mem = ed.bind(&mut h);
    let src: Vec<MemorySource> = mem.into_iter().map(MemorySource::Slots).collect();
    let out = ok(m.decode(&mut h, &seq[..seq.len() - 1], 0, &src, None))?;
    let ar_ref = ok(cross_entropy(h.value(out.logits), &seq[1..], tokenizer::PAD))?;
    let identity_err = (joint - (0.7 * ar_ref + 1.3 * mlm_ref)).abs().max((ar - ar_ref).abs()).max((mlm - mlm_ref).abs());
    ensure!(identity_err <= 1e-12, "joint loss differs from the oracle by {identity_err:e}");

    // w schedule
    let w = MemAttnPretrainConfig::default();
    ensure!(ok(w_schedule(1, &w))? == 0.9, "w_1 = {}", ok(w_schedule(1, &w))?);
    for t in [w.n_curriculum_steps, w.n_curriculum_steps + 1, 100] {
        ensure!(ok(w_schedule(t, &w))? == w.w_end, "w_{t} = {} is not clamped at w_end", ok(w_schedule(t, &w))?);
    }

    // freeze plans
    let mut m3 = ok(Rxt::new(small(6)))?;
    let keep: Vec<(&str, Vec<Tensor>)> = ["embed", "decoder.", "encoder.", "mlm.", "stm_init."]
        .into_iter()
        .map(|p| (p, snapshot(&m3, p)))
        .collect();
    let stm = ok(m3.initial_stm())?;
    let mut opt = Adam::new(AdamConfig::default());
    ok(stage3_memattn_step(&mut m3, &mut opt, &stm, &seq, 0.9, 1e-2))?;
    for (p, before) in &keep {
        ensure!(&snapshot(&m3, p) == before, "stage 3 changed frozen {p}");
    }
    let data = ok(gen_dialogues(
        &DataConfig {
            n_dialogues: 20,
            ..Default::default()
        },
        256,
    ))?;
    let mut m4 = ok(Rxt::new(small(7)))?;
    let s4 = Stage4Config::default();
    let frozen = [("encoder.", snapshot(&m4, "encoder.")), ("memory.", snapshot(&m4, "memory."))];
    let dec = snapshot(&m4, "decoder.");
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = Rng::new(3);
    for step in 0..2 {
        ok(stage4_memory_aware_step(&mut m4, &mut opt, &data.train[..2], &s4, step, 10, 1e-2, &mut rng))?;
    }
    for (p, before) in &frozen {
        ensure!(&snapshot(&m4, p) == before, "stage 4 changed frozen {p}");
    }
    ensure!(snapshot(&m4, "decoder.") != dec, "stage 4 did not train the decoder");
    Ok(format!(
        "{encoder_tensors} encoder tensors with exactly zero gradient; joint identity exact; w_1 = 0.9, clamp at {}; frozen tensors bit-identical",
        w.w_end
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();

    // checkpoint
    let mut m = ok(Rxt::new(ModelConfig::default()))?;
    m.params.get_mut(m.stm_init[1]).data_mut()[3] = 0.321;
    let rng = Rng::new(5).split(1).state();
    ok(checkpoint::save(&m, Some(&rng), &d.join("m.ckpt")))?;
    let (back, r): (Rxt, _) = ok(checkpoint::load(&d.join("m.ckpt")))?;
    ensure!(r == Some(rng), "rng state not restored");
    let toks = turn("k=77", "ok");
    let stm = ok(m.update_memory(&ok(m.initial_stm())?, &toks))?;
    let stm_back = ok(back.update_memory(&ok(back.initial_stm())?, &toks))?;
    ensure!(stm == stm_back, "memory update differs after reload");
    ensure!(
        ok(logits_with_stm(&m, &toks, &stm))? == ok(logits_with_stm(&back, &toks, &stm_back))?,
        "reactive forward differs after reload"
    );
    let b = ok(Baseline::new(ModelConfig::default()))?;
    ok(checkpoint::save(&b, None, &d.join("b.ckpt")))?;
    let (bb, _): (Baseline, _) = ok(checkpoint::load(&d.join("b.ckpt")))?;
    let mut g1 = Graph::no_grad(&b.params);
    let mut g2 = Graph::no_grad(&bb.params);
    let o1 = ok(b.forward(&mut g1, &toks, 0, None))?;
    let o2 = ok(bb.forward(&mut g2, &toks, 0, None))?;
    ensure!(g1.value(o1.logits) == g2.value(o2.logits), "baseline forward differs after reload");

    // dataset determinism
    let dc = DataConfig {
        n_dialogues: 200,
        seed: 11,
        ..Default::default()
    };
    let a = ok(gen_dialogues(&dc, 256))?;
    ensure!(a == ok(gen_dialogues(&dc, 256))?, "same seed gave different datasets");
    ensure!(a != ok(gen_dialogues(&DataConfig { seed: 12, ..dc.clone() }, 256))?, "seed is ignored");
    ok(write_jsonl(&d.join("train.jsonl"), &a.train))?;
    ensure!(ok(read_jsonl(&d.join("train.jsonl")))? == a.train, "jsonl round trip");

    // CSV schemas
    let lat = vec![LatencyRow {
        turn: 1,
        arch: "rxt".into(),
        prompt_s: Some(0.001234567890123),
        per_token_s: Some(1e-4),
        update_s: None,
        prompt_tokens: 24,
        prompt_flops: 123456,
        status: "ok".into(),
    }];
    let cost = ok(cost_rows(&CostModelParams {
        n_turns: 8,
        t_query: 50,
        t_answer: 50,
        s_mem: 16,
    }))?;
    let eval = vec![EvalRow {
        seed: 0,
        arch: "rxt".into(),
        scope: "fact_tokens".into(),
        memory: "teacher_forced".into(),
        ppl: EvalResult {
            nll_sum: 1.7,
            tokens: 3,
            correct: 2,
        }
        .ppl(),
        accuracy: 2.0 / 3.0,
        tokens: 3,
    }];
    let out: &Path = &d.join("report");
    ok(emit_report(out, &lat, &cost, &eval))?;
    ensure!(ok(read_latency_csv(&out.join("latency.csv")))? == lat, "latency.csv round trip");
    ensure!(ok(read_cost_csv(&out.join("cost.csv")))? == cost, "cost.csv round trip");
    ensure!(ok(read_eval_csv(&out.join("eval.csv")))? == eval, "eval.csv round trip");
    Ok("checkpoints bit-exact, datasets deterministic per seed, CSVs round-trip".into())
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "memory-system invariants", criterion_2),
        (3, "cache equivalences", criterion_3),
        (4, "cost-model reproduction", criterion_4),
        (5, "latency shape", criterion_5),
        (6, "curriculum efficacy", criterion_6),
        (7, "training contract", criterion_7),
        (8, "round trips", criterion_8),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
