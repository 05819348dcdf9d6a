use std::path::Path;

use rxt::bench::BenchConfig;
use rxt::training::curriculum::TrainConfig;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_training_config_is_the_default() {
    assert_eq!(TrainConfig::load(&configs().join("desk.toml")).unwrap(), TrainConfig::default());
}

#[test]
fn shipped_bench_config_is_the_default() {
    assert_eq!(BenchConfig::load(&configs().join("bench.toml")).unwrap(), BenchConfig::default());
}
