use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn rxt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rxt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const TINY: &str = "seed = 3
[model]
model_dim = 16
n_heads = 2
stm_slots = 4
ffn_hidden = 24
moe_experts = 2
[joint]
steps = 4
batch_size = 2
[sft]
steps = 4
batch_size = 2
[memattn]
steps = 4
batch_size = 2
[stage4]
steps = 4
batch_size = 2
[baseline]
steps = 4
batch_size = 2
";

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&rxt(&["gen-data", "--seed", "7", "--turns", "4", "--dialogues", "50", "--out", out], d));
    }
    ok(&rxt(&["gen-data", "--seed", "8", "--turns", "4", "--dialogues", "50", "--out", "c"], d));
    let read = |p: &str| std::fs::read(d.join(p).join("train.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let first = String::from_utf8(read("a")).unwrap();
    assert_eq!(first.lines().next().unwrap().matches("\"query\"").count(), 4);
    assert!(!rxt(&["gen-data", "--turns", "1", "--out", "x"], d).status.success());
}

#[test]
fn train_chat_and_bench_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&rxt(&["gen-data", "--dialogues", "60", "--out", "data"], d));

    let early = rxt(&["train", "--stage", "2", "--config", "tiny.toml", "--data", "data", "--out", "run"], d);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("run stage 1 first"));

    let out = ok(&rxt(&["train", "--stage", "all", "--config", "tiny.toml", "--data", "data", "--out", "run"], d));
    assert_eq!(out.lines().count(), 5, "{out}");
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage4.ckpt", "baseline.ckpt", "metrics.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,stage,L_AR,L_MLM,L_Mem,L_total,ppl");

    // two chat processes share memory through the session file
    let chat = |input: &str| {
        let mut child = Command::new(env!("CARGO_BIN_EXE_rxt"))
            .args(["chat", "--checkpoint", "run/stage4.ckpt", "--session", "s.json", "--log", "chat.jsonl", "--max-new-tokens", "4"])
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        ok(&child.wait_with_output().unwrap())
    };
    chat("k=123\n1+2\n");
    let session = std::fs::read_to_string(d.join("s.json")).unwrap();
    chat("k?\n/quit\nnever sent\n");
    assert_ne!(std::fs::read_to_string(d.join("s.json")).unwrap(), session);
    let log = std::fs::read_to_string(d.join("chat.jsonl")).unwrap();
    let versions: Vec<u64> = log
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["stm_version_used"].as_u64().unwrap()
        })
        .collect();
    assert_eq!(versions, vec![0, 1, 2]);

    std::fs::write(
        d.join("bench.toml"),
        "rxt_checkpoint = \"run/stage4.ckpt\"\nbaseline_checkpoint = \"run/baseline.ckpt\"\n[latency]\nrepeats = 2\nwarmup = 0\nt_query = 10\nt_answer = 10\n",
    )
    .unwrap();
    let cost = ok(&rxt(&["bench", "cost", "--config", "bench.toml", "--out", "rep"], d));
    assert!(cost.contains("stateless_llm: 3600") && cost.contains("rxt: 800"), "{cost}");
    let lat = ok(&rxt(&["bench", "latency", "--config", "bench.toml", "--out", "rep"], d));
    // the cost results survive the latency run
    assert!(lat.contains("prompt latency") && lat.contains("stateless_llm: 3600"), "{lat}");
    let csv = std::fs::read_to_string(d.join("rep/latency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(std::fs::read_to_string(d.join("rep/summary.txt")).unwrap().contains("rxt: 800"));
}
