//! Stage runner: one checkpoint per stage, metrics appended to a CSV.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    baseline_step, lr_at, shorten, stage1_joint_step, stage2_sft_step, stage3_batch_step, stage4_memory_aware_step, Adam,
    AdamConfig, JointLosses, JointTrainConfig, MemAttnPretrainConfig, Stage4Config,
};
use crate::bench::data::{Dataset, Dialogue};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_expecting, save};
use crate::model::{tokenizer, Baseline, ModelConfig, Rxt};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub answer_only: bool,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            steps: 600,
            batch_size: 8,
            answer_only: false,
        }
    }
}

/// Everything a training run needs, loadable from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Drives masking, noise, and batch sampling. Model init uses `model.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub joint: JointTrainConfig,
    pub sft: JointTrainConfig,
    pub memattn: MemAttnPretrainConfig,
    pub stage4: Stage4Config,
    pub baseline: BaselineTrainConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.joint.validate()?;
        self.sft.validate()?;
        self.memattn.validate()?;
        let batches = [
            self.joint.batch_size,
            self.sft.batch_size,
            self.memattn.batch_size,
            self.stage4.batch_size,
            self.baseline.batch_size,
        ];
        if batches.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Joint = 1,
    Sft = 2,
    MemAttn = 3,
    MemoryAware = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Joint, Stage::Sft, Stage::MemAttn, Stage::MemoryAware];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn from_number(n: usize) -> Result<Self> {
        Stage::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Curriculum(format!("no stage {n}; stages are 1 to 4")))
    }

    pub fn checkpoint_name(self) -> String {
        format!("stage{}.ckpt", self.number())
    }
}

pub const BASELINE_CHECKPOINT: &str = "baseline.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// One CSV row. Columns a stage does not produce are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: String,
    #[serde(rename = "L_AR")]
    pub l_ar: Option<f64>,
    #[serde(rename = "L_MLM")]
    pub l_mlm: Option<f64>,
    #[serde(rename = "L_Mem")]
    pub l_mem: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: Option<f64>,
    pub ppl: Option<f64>,
}

struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let fresh = !path.exists() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { path, writer })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join(METRICS_FILE);
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: String,
    pub steps: usize,
    /// Mean of the stage's headline loss over its last tenth of steps.
    pub final_loss: f64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

fn stage_rng(cfg: &TrainConfig, stream: u64) -> Rng {
    Rng::new(cfg.seed).split(stream)
}

fn sample<'a, T>(items: &'a [T], n: usize, rng: &mut Rng) -> Vec<&'a T> {
    (0..n).map(|_| &items[rng.below(items.len())]).collect()
}

fn plain_texts(dialogues: &[Dialogue]) -> Result<Vec<Vec<usize>>> {
    dialogues
        .iter()
        .flat_map(|d| &d.turns)
        .map(|t| tokenizer::encode(&format!("{} {}", t.query, t.answer)))
        .collect()
}

fn interactions(dialogues: &[Dialogue]) -> Result<Vec<Vec<usize>>> {
    dialogues.iter().flat_map(|d| &d.turns).map(|t| t.tokens()).collect()
}

fn tail_mean(xs: &[f64]) -> f64 {
    let k = (xs.len() / 10).max(1).min(xs.len());
    xs[xs.len() - k..].iter().sum::<f64>() / k.max(1) as f64
}

fn load_prerequisite(cfg: &TrainConfig, out_dir: &Path, stage: Stage) -> Result<Rxt> {
    let prev = Stage::from_number(stage.number() - 1)?;
    let path = out_dir.join(prev.checkpoint_name());
    if !path.exists() {
        return Err(Error::Curriculum(format!(
            "stage {} needs {} in {}; run stage {} first",
            stage.number(),
            prev.checkpoint_name(),
            out_dir.display(),
            prev.number()
        )));
    }
    Ok(load_expecting::<Rxt>(&path, &cfg.model)?.0)
}

fn joint_row(step: usize, stage: Stage, l: &JointLosses) -> MetricsRow {
    MetricsRow {
        step,
        stage: stage.number().to_string(),
        l_ar: Some(l.ar),
        l_mlm: Some(l.mlm),
        l_mem: None,
        l_total: Some(l.joint),
        ppl: Some(l.ar.exp()),
    }
}

/// Runs one stage from the previous stage's checkpoint in `out_dir` (or
/// from fresh weights for stage 1) and writes this stage's checkpoint.
pub fn run_stage(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, stage: Stage) -> Result<StageSummary> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut model = match stage {
        Stage::Joint => Rxt::new(cfg.model.clone())?,
        _ => load_prerequisite(cfg, out_dir, stage)?,
    };
    let mut rng = stage_rng(cfg, stage.number() as u64);
    let mut opt = Adam::new(cfg.optim);
    let mut log = MetricsLog::open(out_dir)?;
    let started = Instant::now();
    let mut history = Vec::new();
    let steps = match stage {
        Stage::Joint | Stage::Sft => {
            let (tc, seqs) = if stage == Stage::Joint {
                (&cfg.joint, plain_texts(&data.train)?)
            } else {
                (&cfg.sft, interactions(&data.train)?)
            };
            for step in 0..tc.steps {
                let batch: Vec<Vec<usize>> = sample(&seqs, tc.batch_size, &mut rng).into_iter().cloned().collect();
                let lr = lr_at(step, tc.steps, tc.lr);
                let l = if stage == Stage::Joint {
                    stage1_joint_step(&mut model, &mut opt, &batch, tc, lr, &mut rng)?
                } else {
                    stage2_sft_step(&mut model, &mut opt, &batch, tc, lr, &mut rng)?
                };
                log.write(&joint_row(step, stage, &l))?;
                history.push(l.joint);
                if step % 50 == 0 {
                    log::info!("stage {} step {step}: L_AR {:.4} L_MLM {:.4}", stage.number(), l.ar, l.mlm);
                }
            }
            tc.steps
        }
        Stage::MemAttn => {
            let tc = &cfg.memattn;
            for step in 0..tc.steps {
                let batch: Vec<Dialogue> = sample(&data.train, tc.batch_size, &mut rng).into_iter().cloned().collect();
                let loss = stage3_batch_step(&mut model, &mut opt, &batch, tc, lr_at(step, tc.steps, tc.lr), &mut rng)?;
                log.write(&MetricsRow {
                    step,
                    stage: "3".into(),
                    l_mem: Some(loss),
                    l_total: Some(loss),
                    ..Default::default()
                })?;
                history.push(loss);
                if step % 50 == 0 {
                    log::info!("stage 3 step {step}: L_Mem {loss:.4}");
                }
            }
            tc.steps
        }
        Stage::MemoryAware => {
            let tc = &cfg.stage4;
            for step in 0..tc.steps {
                let batch: Vec<Dialogue> = sample(&data.train, tc.batch_size, &mut rng)
                    .into_iter()
                    .map(|d| shorten(d, tc.turns_at(step, tc.steps, d.turns.len())))
                    .collect();
                let l = stage4_memory_aware_step(&mut model, &mut opt, &batch, tc, step, tc.steps, lr_at(step, tc.steps, tc.lr), &mut rng)?;
                log.write(&MetricsRow {
                    step,
                    stage: "4".into(),
                    l_ar: Some(l.mean_turn),
                    l_total: Some(l.total),
                    ppl: Some(l.mean_turn.exp()),
                    ..Default::default()
                })?;
                history.push(l.mean_turn);
                if step % 50 == 0 {
                    log::info!("stage 4 step {step}: mean turn loss {:.4}", l.mean_turn);
                }
            }
            tc.steps
        }
    };
    log.finish()?;
    let checkpoint = out_dir.join(stage.checkpoint_name());
    save(&model, Some(&rng.state()), &checkpoint)?;
    Ok(StageSummary {
        stage: stage.number().to_string(),
        steps,
        final_loss: if history.is_empty() { f64::NAN } else { tail_mean(&history) },
        seconds: started.elapsed().as_secs_f64(),
        checkpoint,
    })
}

/// Runs `stages` in order; each must follow its predecessor or find its
/// checkpoint already in `out_dir`.
pub fn run_curriculum(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, stages: &[Stage]) -> Result<Vec<StageSummary>> {
    stages.iter().map(|&s| run_stage(cfg, data, out_dir, s)).collect()
}

/// Trains the stateless baseline on single interactions from the same
/// training split and writes `baseline.ckpt`.
pub fn train_baseline(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<StageSummary> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tc = &cfg.baseline;
    let mut model = Baseline::new(cfg.model.clone())?;
    let mut rng = stage_rng(cfg, 0xba5e);
    let mut opt = Adam::new(cfg.optim);
    let mut log = MetricsLog::open(out_dir)?;
    let started = Instant::now();
    let seqs = interactions(&data.train)?;
    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<Vec<usize>> = sample(&seqs, tc.batch_size, &mut rng).into_iter().cloned().collect();
        let loss = baseline_step(&mut model, &mut opt, &batch, tc.answer_only, lr_at(step, tc.steps, tc.lr))?;
        log.write(&MetricsRow {
            step,
            stage: "baseline".into(),
            l_ar: Some(loss),
            l_total: Some(loss),
            ppl: Some(loss.exp()),
            ..Default::default()
        })?;
        history.push(loss);
    }
    log.finish()?;
    let checkpoint = out_dir.join(BASELINE_CHECKPOINT);
    save(&model, Some(&rng.state()), &checkpoint)?;
    Ok(StageSummary {
        stage: "baseline".into(),
        steps: tc.steps,
        final_loss: if history.is_empty() { f64::NAN } else { tail_mean(&history) },
        seconds: started.elapsed().as_secs_f64(),
        checkpoint,
    })
}
