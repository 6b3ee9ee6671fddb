//! One training stage.
//!
//! Stage 1 trains the head and the ArcFace weights directly on the feature
//! set; the backbone is never run or updated. Stage 2 starts from a stage-1
//! checkpoint, treats the data as raw backbone inputs, raises the margin and
//! trains every parameter.
//!
//! A nominal epoch runs `floor(N / batch / divisor)` optimizer steps (at
//! least one). Batches are cut from a seeded permutation of the data;
//! a fresh permutation is drawn only when the previous one is used up, so
//! `divisor` nominal epochs make exactly one full pass when `N / batch` is
//! a multiple of `divisor`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arcface::{eval_loss, loss_and_grad, ArcFaceParams, LossOptions};
use crate::dataio::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{init_head, HeadMode, Model, TinyBackbone};
use crate::numerics::{streams, Rng, RngState};

use super::adam::Optimizer;
use super::checkpoint::{load_checkpoint, Checkpoint, CheckpointMeta, RngStates};
use super::config::TrainConfig;
use super::schedule::lr_at;

/// Step bookkeeping for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub batch_size: usize,
    /// Full batches in one pass over the data (remainder dropped).
    pub batches_per_pass: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl EpochPlan {
    pub fn new(n: usize, batch_size: usize, divisor: usize, epochs: usize) -> Result<Self> {
        if n == 0 || batch_size == 0 || divisor == 0 || epochs == 0 {
            return Err(Error::invalid(
                "epoch plan needs n, batch_size, divisor, epochs >= 1",
            ));
        }
        let batch = batch_size.min(n);
        let batches_per_pass = n / batch;
        let raw = batches_per_pass / divisor;
        if raw == 0 {
            log::warn!(
                "divisor {divisor} >= {batches_per_pass} batches per pass; running 1 step per epoch"
            );
        }
        let steps_per_epoch = raw.max(1);
        Ok(EpochPlan {
            batch_size: batch,
            batches_per_pass,
            steps_per_epoch,
            total_steps: steps_per_epoch * epochs,
        })
    }

    /// Data passes the whole stage amounts to.
    pub fn full_passes(&self) -> f64 {
        self.total_steps as f64 / self.batches_per_pass as f64
    }
}

/// Endless stream of batches over shuffled row ids.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch: usize,
    batches_per_pass: usize,
    perm: Vec<usize>,
    cursor: usize,
    passes_started: usize,
    rng: Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let batch = batch.min(n).max(1);
        BatchStream {
            n,
            batch,
            batches_per_pass: n / batch,
            perm: Vec::new(),
            cursor: 0,
            passes_started: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.perm.is_empty() || self.cursor == self.batches_per_pass {
            self.perm = self.rng.permutation(self.n);
            self.cursor = 0;
            self.passes_started += 1;
        }
        let start = self.cursor * self.batch;
        self.cursor += 1;
        &self.perm[start..start + self.batch]
    }

    pub fn passes_started(&self) -> usize {
        self.passes_started
    }

    /// RNG state after the permutations drawn so far.
    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub config: TrainConfig,
    pub num_samples: usize,
    pub plan: EpochPlan,
    pub full_passes: f64,
    pub permutations_drawn: usize,
    /// Eval-mode loss on the stage-1 margin before stage 2 changes it.
    pub handoff_eval_loss: Option<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub epochs: Vec<EpochReport>,
    pub step_max_abs_update: Vec<f64>,
    pub param_delta_norms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub model: Model,
    pub report: TrainReport,
    pub rng: RngStates,
    pub wall_clock_secs: f64,
}

impl StageOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                stage: self.report.stage,
                num_classes: self.model.arcface.num_classes,
                margin: self.model.arcface.margin,
                backbone_frozen: self.model.backbone.frozen,
                config: self.report.config.clone(),
            },
            model: self.model.clone(),
            rng: self.rng.clone(),
        }
    }
}

pub enum StageStart {
    /// Fresh parameters (stage 1 only).
    Fresh,
    CheckpointPath(PathBuf),
    Checkpoint(Box<Checkpoint>),
}

/// Stage-1 model: identity backbone (frozen), head and ArcFace from the
/// config's init seed.
pub fn init_model(cfg: &TrainConfig, in_dim: usize, num_classes: usize) -> Result<Model> {
    cfg.validate()?;
    Ok(Model {
        backbone: TinyBackbone::identity(in_dim, true),
        head: init_head(
            in_dim,
            cfg.num_branches,
            cfg.embed_dim,
            &cfg.dropout_rates(),
            cfg.init_seed,
        )?,
        arcface: ArcFaceParams::init(num_classes, cfg.embed_dim, cfg.margin(), cfg.init_seed)?,
    })
}

fn param_snapshot(model: &Model) -> Vec<(String, Vec<f64>)> {
    model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.to_vec()))
        .collect()
}

pub fn run_stage(cfg: &TrainConfig, data: &FeatureSet, start: StageStart) -> Result<StageOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let through_backbone = cfg.stage == 2;

    let loaded = match start {
        StageStart::Fresh => None,
        StageStart::CheckpointPath(p) => Some(load_checkpoint(&p)?),
        StageStart::Checkpoint(ck) => Some(*ck),
    };
    let (mut model, mut data_rng, mut dropout_rngs, handoff_eval_loss) = match (cfg.stage, loaded) {
        (1, None) => {
            let model = init_model(cfg, data.dim(), data.num_classes() as usize)?;
            let dropout = model.head.dropout_rngs(cfg.dropout_seed);
            (model, Rng::new(cfg.data_seed, streams::DATA), dropout, None)
        }
        (1, Some(ck)) => {
            // resume stage 1; backbone stays frozen
            let rngs = ck
                .rng
                .dropout
                .iter()
                .copied()
                .map(Rng::from_state)
                .collect();
            (ck.model, Rng::from_state(ck.rng.data), rngs, None)
        }
        (_, None) => {
            return Err(Error::invalid(
                "stage 2 must start from a stage-1 checkpoint",
            ))
        }
        (_, Some(ck)) => {
            let mut model = ck.model;
            let labels = data.labels_usize();
            let handoff = eval_loss(&model, data.features(), &labels, true)?;
            if cfg.arcface_subcenters != model.arcface.subcenters() {
                return Err(Error::Config(format!(
                    "config asks for {} subcenters, checkpoint has {}",
                    cfg.arcface_subcenters,
                    model.arcface.subcenters()
                )));
            }
            model.arcface.margin = cfg.margin();
            model.backbone.frozen = false;
            let rngs = ck
                .rng
                .dropout
                .iter()
                .copied()
                .map(Rng::from_state)
                .collect();
            (model, Rng::from_state(ck.rng.data), rngs, Some(handoff))
        }
    };
    if cfg.stage == 1 {
        model.backbone.frozen = true;
    }

    if model.arcface.num_classes != data.num_classes() as usize {
        return Err(Error::DimensionMismatch {
            context: "run_stage class count",
            expected: model.arcface.num_classes,
            found: data.num_classes() as usize,
        });
    }
    let in_dim = if through_backbone {
        model.backbone.raw_dim()
    } else {
        model.head.in_dim()
    };
    if data.dim() != in_dim {
        return Err(Error::DimensionMismatch {
            context: "run_stage input width",
            expected: in_dim,
            found: data.dim(),
        });
    }
    if dropout_rngs.len() != model.head.num_branches() {
        return Err(Error::invalid(
            "dropout stream count does not match branch count",
        ));
    }

    let plan = EpochPlan::new(
        data.len(),
        cfg.batch_size,
        cfg.steps_per_epoch_divisor,
        cfg.epochs,
    )?;
    let schedule = cfg.schedule(plan.total_steps as u64);
    let labels_all = data.labels_usize();
    let initial_eval_loss = eval_loss(&model, data.features(), &labels_all, through_backbone)?;
    let before = param_snapshot(&model);

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.adam);
    let mut stream = BatchStream::new(data.len(), plan.batch_size, data_rng.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_max_abs_update = Vec::with_capacity(plan.total_steps);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..plan.steps_per_epoch {
            let idx = stream.next_batch().to_vec();
            let x = data.features().select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            let out = loss_and_grad(
                &model,
                &x,
                &y,
                LossOptions {
                    through_backbone,
                    head_mode: HeadMode::Train(Some(&mut dropout_rngs)),
                },
            )?;
            step += 1;
            lr = lr_at(&schedule, step);
            let grads = out.grads.named(through_backbone);
            let mut params = model.named_params_mut(through_backbone);
            let stats = optimizer.step(&mut params, &grads, lr)?;
            step_max_abs_update.push(stats.max_abs_update);
            loss_sum += out.loss;
        }
        let mean_loss = loss_sum / plan.steps_per_epoch as f64;
        log::debug!(
            "stage {} epoch {epoch}: loss {mean_loss:.6} lr {lr:e}",
            cfg.stage
        );
        epochs.push(EpochReport {
            epoch,
            mean_loss,
            last_lr: lr,
        });
    }
    data_rng = Rng::from_state(stream.rng_state());

    let final_eval_loss = eval_loss(&model, data.features(), &labels_all, through_backbone)?;
    let param_delta_norms = before
        .iter()
        .zip(model.named_params())
        .map(|((name, old), (_, new))| {
            let d = old
                .iter()
                .zip(new)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (name.clone(), d)
        })
        .collect();

    let report = TrainReport {
        stage: cfg.stage,
        config: cfg.clone(),
        num_samples: data.len(),
        plan,
        full_passes: plan.full_passes(),
        permutations_drawn: stream.passes_started(),
        handoff_eval_loss,
        initial_eval_loss,
        final_eval_loss,
        epochs,
        step_max_abs_update,
        param_delta_norms,
    };
    let wall_clock_secs = started.elapsed().as_secs_f64();
    log::info!(
        "stage {} done: {} steps, eval loss {:.6} -> {:.6}, {:.2}s",
        cfg.stage,
        plan.total_steps,
        initial_eval_loss,
        final_eval_loss,
        wall_clock_secs
    );
    Ok(StageOutput {
        model,
        report,
        rng: RngStates {
            data: data_rng.state(),
            dropout: dropout_rngs.iter().map(Rng::state).collect(),
        },
        wall_clock_secs,
    })
}
