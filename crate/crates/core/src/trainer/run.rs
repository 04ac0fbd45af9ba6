use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, Moments};
use super::checkpoint::{Checkpoint, CheckpointKind, ResumeState};
use super::eval::argmax;
use super::{Regime, Schedule, TrainConfig};
use crate::data::{child_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::home_loss::record_frobenius_loss;
use crate::models::{BoundModel, Model, ModelConfig, Trainable};
use crate::tensor::{Graph, Tensor, Var};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: Option<f64>,
    pub regime: String,
    pub seed: u64,
    pub wallclock_ms: u64,
    /// Where a frozen encoder came from, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_source: Option<String>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// What a [`Trainer`] optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Frobenius loss on the encoder and VN stack.
    Pretrain,
    /// Cross-entropy on the auxiliary corpus, producing a Sup-TL encoder.
    SupervisedAux,
    Train(Regime),
}

impl Task {
    fn code(self) -> u64 {
        match self {
            Task::Pretrain => 100,
            Task::SupervisedAux => 101,
            Task::Train(r) => Regime::ALL.iter().position(|&x| x == r).unwrap() as u64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::SupervisedAux => "supervised-aux",
            Task::Train(r) => r.name(),
        }
    }

    fn output_kind(self) -> CheckpointKind {
        match self {
            Task::Pretrain => CheckpointKind::Pretrain,
            Task::SupervisedAux => CheckpointKind::SupervisedAux,
            Task::Train(_) => CheckpointKind::Classifier,
        }
    }

    fn trainable(self) -> Trainable {
        let t = |encoder, vn, decoder| Trainable {
            encoder,
            vn,
            decoder,
        };
        match self {
            Task::Pretrain => t(true, true, false),
            Task::SupervisedAux | Task::Train(Regime::Sup) | Task::Train(Regime::HomeJo) => {
                Trainable::ALL
            }
            Task::Train(Regime::SupTl) | Task::Train(Regime::HomeTl) => t(false, false, true),
            Task::Train(Regime::Home) => t(true, false, true),
        }
    }

    /// Weight on the classifier and Frobenius terms.
    fn objective(self, alpha: f64) -> Objective {
        match self {
            Task::Pretrain => Objective {
                ce: false,
                alpha: Some(1.0),
            },
            Task::Train(Regime::HomeJo) => Objective {
                ce: true,
                alpha: Some(alpha),
            },
            _ => Objective {
                ce: true,
                alpha: None,
            },
        }
    }

    fn schedule(self, config: &TrainConfig) -> Schedule {
        match self {
            Task::Train(Regime::SupTl)
            | Task::Train(Regime::HomeTl)
            | Task::Train(Regime::Home) => config.finetune_schedule(),
            _ => config.main_schedule(),
        }
    }

    fn accepts(self, kind: CheckpointKind) -> bool {
        use CheckpointKind::*;
        match self {
            Task::Train(Regime::SupTl) => matches!(kind, SupervisedAux | Random),
            Task::Train(Regime::HomeTl) | Task::Train(Regime::Home) => {
                matches!(kind, Pretrain | Random)
            }
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Objective {
    ce: bool,
    alpha: Option<f64>,
}

/// Initial weights for a run with `config` on `dataset`: the untrained model
/// that from-scratch regimes and pretraining start from.
pub fn initial_model(dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let mc = config.model_config(dataset.input_dim(), dataset.n_classes());
    init_with(&mc, config.seed)
}

fn init_with(mc: &ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, INIT_STREAM));
    Model::init(mc, &mut rng)
}

impl Checkpoint {
    /// The frozen-random control: [`initial_model`] tagged as untrained.
    pub fn random(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint::from_model(
            &initial_model(dataset, config)?,
            CheckpointKind::Random,
        ))
    }
}

/// Lexicographic, larger is better.
type Score = (f64, f64);

fn better(new: Score, old: Option<Score>) -> bool {
    match old {
        None => true,
        Some(old) => new.0 > old.0 || (new.0 == old.0 && new.1 > old.1),
    }
}

fn view_batch(dataset: &Dataset, idx: &[usize], view: usize) -> Tensor {
    let p = dataset.input_dim();
    let mut data = Vec::with_capacity(idx.len() * p);
    for &i in idx {
        data.extend_from_slice(dataset.samples[i].views[view].pixels());
    }
    Tensor::from_parts(vec![idx.len(), p], data)
}

struct BatchOut {
    /// Mean cross-entropy over classifier rows.
    ce: Option<Var>,
    /// Frobenius loss summed over the batch.
    fr_sum: Option<Var>,
    logits: Option<Var>,
    labels: Vec<usize>,
}

fn record_batch(
    g: &mut Graph,
    bound: &BoundModel,
    dataset: &Dataset,
    idx: &[usize],
    obj: Objective,
    all_views: bool,
) -> Result<BatchOut> {
    let n_views = dataset.n_views();
    let mut z_views = Vec::new();
    if obj.alpha.is_some() {
        for v in 0..n_views {
            let x = g.constant(view_batch(dataset, idx, v));
            z_views.push(bound.encoder.forward(g, x)?);
        }
    }
    let mut out = BatchOut {
        ce: None,
        fr_sum: None,
        logits: None,
        labels: Vec::new(),
    };
    if obj.ce {
        let z = if all_views {
            let mut data = Vec::new();
            for v in 0..n_views {
                data.extend(view_batch(dataset, idx, v).into_data());
                out.labels
                    .extend(idx.iter().map(|&i| dataset.samples[i].label));
            }
            let x = g.constant(Tensor::from_parts(
                vec![idx.len() * n_views, dataset.input_dim()],
                data,
            ));
            bound.encoder.forward(g, x)?
        } else if let Some(&z) = z_views.first() {
            out.labels
                .extend(idx.iter().map(|&i| dataset.samples[i].label));
            z
        } else {
            out.labels
                .extend(idx.iter().map(|&i| dataset.samples[i].label));
            let x = g.constant(view_batch(dataset, idx, 0));
            bound.encoder.forward(g, x)?
        };
        let logits = bound.decoder.forward(g, z)?;
        out.ce = Some(g.cross_entropy_loss(logits, &out.labels)?);
        out.logits = Some(logits);
    }
    if obj.alpha.is_some() {
        let reps = z_views
            .iter()
            .map(|&z| bound.vn.forward(g, z))
            .collect::<Result<Vec<_>>>()?;
        out.fr_sum = Some(record_frobenius_loss(g, &reps, &dataset.graph)?);
    }
    Ok(out)
}

/// Scalar training objective for a batch of `b` samples.
fn batch_objective(g: &mut Graph, out: &BatchOut, obj: Objective, b: usize) -> Result<Var> {
    let fr_mean = out.fr_sum.map(|f| g.scale(f, 1.0 / b as f64));
    match (out.ce, fr_mean, obj.alpha) {
        (Some(ce), Some(fr), Some(alpha)) => crate::home_loss::record_total_loss(g, ce, fr, alpha),
        (Some(ce), None, _) => Ok(ce),
        (None, Some(fr), _) => Ok(fr),
        _ => Err(Error::BadConfig("empty objective".into())),
    }
}

/// Epoch-by-epoch optimizer. Everything an epoch depends on is either the
/// model and moments or derived from `(seed, epoch)`, so stopping after any
/// epoch and resuming from [`Trainer::checkpoint`] is bit-exact.
pub struct Trainer<'a> {
    task: Task,
    dataset: &'a Dataset,
    config: TrainConfig,
    trainable: Trainable,
    objective: Objective,
    schedule: Schedule,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model: Model,
    best: Model,
    best_score: Option<Score>,
    best_epoch: usize,
    moments: Moments,
    epoch: usize,
    encoder_source: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        task: Task,
        dataset: &'a Dataset,
        config: &TrainConfig,
        from: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        let needs = matches!(task, Task::Train(r) if r.needs_checkpoint());
        let mut encoder_source = None;
        let model = match (needs, from) {
            (true, None) => {
                return Err(Error::MissingCheckpoint(format!(
                    "regime {} needs a pretrained checkpoint",
                    task.name()
                )))
            }
            (false, Some(_)) => {
                return Err(Error::RegimePrereqViolation(format!(
                    "{} trains from scratch and takes no checkpoint",
                    task.name()
                )))
            }
            (false, None) => initial_model(dataset, config)?,
            (true, Some(ck)) => {
                let kind = ck.kind()?;
                if !task.accepts(kind) {
                    return Err(Error::RegimePrereqViolation(format!(
                        "regime {} cannot start from a {} checkpoint",
                        task.name(),
                        kind.name()
                    )));
                }
                let pre = ck.model()?;
                if pre.input_dim() != dataset.input_dim() {
                    return Err(Error::RegimePrereqViolation(format!(
                        "checkpoint expects {} inputs, dataset has {}",
                        pre.input_dim(),
                        dataset.input_dim()
                    )));
                }
                let widths: Vec<usize> =
                    pre.encoder.0.layers().iter().map(|l| l.w.cols()).collect();
                let mc = ModelConfig {
                    input_dim: dataset.input_dim(),
                    encoder_hidden: widths[..widths.len() - 1].to_vec(),
                    n_dim: pre.n_dim(),
                    decoder_hidden: config.decoder_hidden,
                    classes: dataset.n_classes(),
                    vn: pre.has_vn_layers(),
                };
                let mut m = init_with(&mc, config.seed)?;
                m.encoder = pre.encoder;
                m.vn = pre.vn;
                encoder_source = Some(kind.name().to_string());
                m
            }
        };
        let train_idx = dataset.split_indices(Split::Train);
        let val_idx = dataset.split_indices(Split::Val);
        if train_idx.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        if val_idx.is_empty() {
            return Err(Error::EmptySplit("val".into()));
        }
        let moments = Moments::zeros_like(model.named_params().into_iter().map(|(_, t)| t));
        Ok(Self {
            task,
            dataset,
            config: config.clone(),
            trainable: task.trainable(),
            objective: task.objective(config.alpha),
            schedule: task.schedule(config),
            train_idx,
            val_idx,
            best: model.clone(),
            model,
            best_score: None,
            best_epoch: 0,
            moments,
            epoch: 0,
            encoder_source,
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(
        task: Task,
        dataset: &'a Dataset,
        config: &TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let state = ck.resume_state()?;
        if state.task_code != task.code() {
            return Err(Error::RegimePrereqViolation(format!(
                "checkpoint was written by a different task than {}",
                task.name()
            )));
        }
        if state.config_hash != config.hash() {
            return Err(Error::BadConfig(
                "config differs from the one the checkpoint was trained with".into(),
            ));
        }
        config.validate()?;
        let best = ck.model()?;
        if best.input_dim() != dataset.input_dim() || best.classes() != dataset.n_classes() {
            return Err(Error::RegimePrereqViolation(
                "checkpoint does not match dataset".into(),
            ));
        }
        let encoder_source = match task {
            Task::Train(r) if r.needs_checkpoint() => {
                ck.archive().get("meta/encoder_source").map(|t| {
                    match t.item() as u8 {
                        0 => CheckpointKind::Pretrain,
                        1 => CheckpointKind::SupervisedAux,
                        _ => CheckpointKind::Random,
                    }
                    .name()
                    .to_string()
                })
            }
            _ => None,
        };
        Ok(Self {
            task,
            dataset,
            config: config.clone(),
            trainable: task.trainable(),
            objective: task.objective(config.alpha),
            schedule: task.schedule(config),
            train_idx: dataset.split_indices(Split::Train),
            val_idx: dataset.split_indices(Split::Val),
            model: state.current,
            best,
            best_score: state.best_score,
            best_epoch: state.best_epoch,
            moments: state.moments,
            epoch: state.epoch,
            encoder_source,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.epochs
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.schedule.epochs
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn best_model(&self) -> &Model {
        &self.best
    }

    /// Mean training objective over `idx` at the current weights, in batches.
    pub fn loss_on(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.measure(idx)?.0)
    }

    /// (loss, accuracy) on `idx` using the current weights.
    fn measure(&self, idx: &[usize]) -> Result<(f64, Option<f64>)> {
        let mut ce_sum = 0.0;
        let mut fr_sum = 0.0;
        let mut correct = 0usize;
        let mut rows = 0usize;
        for chunk in idx.chunks(self.config.batch_size) {
            let mut g = Graph::new();
            let none = Trainable {
                encoder: false,
                vn: false,
                decoder: false,
            };
            let bound = self.model.bind(&mut g, none);
            let out = record_batch(
                &mut g,
                &bound,
                self.dataset,
                chunk,
                self.objective,
                self.config.all_views,
            )?;
            if let (Some(ce), Some(logits)) = (out.ce, out.logits) {
                ce_sum += g.value(ce).item() * out.labels.len() as f64;
                let lv = g.value(logits);
                for (r, &label) in out.labels.iter().enumerate() {
                    let row = &lv.data()[r * lv.cols()..(r + 1) * lv.cols()];
                    correct += usize::from(argmax(row) == label);
                }
                rows += out.labels.len();
            }
            if let Some(fr) = out.fr_sum {
                fr_sum += g.value(fr).item();
            }
        }
        let n = idx.len() as f64;
        let fr_mean = fr_sum / n;
        Ok(match (self.objective.ce, self.objective.alpha) {
            (false, _) => (fr_mean, None),
            (true, alpha) => {
                let ce_mean = ce_sum / rows as f64;
                let loss = match alpha {
                    Some(a) => ce_mean + a * fr_mean,
                    None => ce_mean,
                };
                (loss, Some(correct as f64 / rows as f64))
            }
        })
    }

    fn permutation(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
            child_seed(self.config.seed, SHUFFLE_STREAM),
            self.epoch as u64,
        ));
        let mut idx = self.train_idx.clone();
        idx.shuffle(&mut rng);
        idx
    }

    fn step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, self.trainable);
        let out = record_batch(
            &mut g,
            &bound,
            self.dataset,
            batch,
            self.objective,
            self.config.all_views,
        )?;
        let loss = batch_objective(&mut g, &out, self.objective, batch.len())?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut grads = g.backward(loss)?;
        let mask = self.model.trainable_mask(self.trainable);
        let grads: Vec<Option<Tensor>> = bound
            .vars()
            .into_iter()
            .zip(mask)
            .map(|(v, on)| on.then(|| grads.take(v)))
            .collect();
        let mut params = self.model.params_mut();
        adam_step(
            &mut params,
            &grads,
            &mut self.moments,
            lr,
            &self.config.adam,
        )?;
        Ok(value)
    }

    /// Runs one epoch and updates the best-validation model.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let lr = self.schedule.lr_at(self.epoch);
        let perm = self.permutation();
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in perm.chunks(self.config.batch_size) {
            total += self.step(batch, lr)?;
            batches += 1;
        }
        let (val_loss, val_acc) = self.measure(&self.val_idx)?;
        let score = match val_acc {
            Some(acc) => (acc, -val_loss),
            None => (-val_loss, 0.0),
        };
        if better(score, self.best_score) {
            self.best_score = Some(score);
            self.best_epoch = self.epoch;
            self.best = self.model.clone();
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: total / batches as f64,
            val_loss,
            val_acc,
            regime: self.task.name().to_string(),
            seed: self.config.seed,
            wallclock_ms: start.elapsed().as_millis() as u64,
            encoder_source: self.encoder_source.clone(),
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs until done, or until `stop_after` total epochs have completed.
    pub fn run(
        &mut self,
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let limit = stop_after.map_or(self.schedule.epochs, |s| s.min(self.schedule.epochs));
        let mut history = Vec::new();
        while self.epoch < limit {
            let m = self.run_epoch()?;
            on_epoch(&m);
            history.push(m);
        }
        Ok(history)
    }

    /// Best weights plus everything needed to resume.
    pub fn checkpoint(&self) -> Checkpoint {
        let state = ResumeState {
            current: self.model.clone(),
            moments: self.moments.clone(),
            epoch: self.epoch,
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            task_code: self.task.code(),
            config_hash: self.config.hash(),
        };
        let mut ck = Checkpoint::with_state(&self.best, self.task.output_kind(), &state);
        if let Some(src) = &self.encoder_source {
            let code = match src.as_str() {
                "pretrain" => 0.0,
                "supervised-aux" => 1.0,
                _ => 3.0,
            };
            ck.insert_meta("meta/encoder_source", code);
        }
        ck
    }
}

fn run_to_end(mut t: Trainer<'_>) -> Result<TrainOutcome> {
    let history = t.run(None, |_| {})?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        history,
    })
}

/// Frobenius-loss pretraining of the encoder and VN stack.
pub fn pretrain(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run_to_end(Trainer::new(Task::Pretrain, dataset, config, None)?)
}

/// Supervised encoder pretraining on `dataset.auxiliary()`, for Sup-TL.
pub fn pretrain_supervised_aux(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let aux = dataset.auxiliary()?;
    run_to_end(Trainer::new(Task::SupervisedAux, &aux, config, None)?)
}

pub fn train(
    regime: Regime,
    dataset: &Dataset,
    config: &TrainConfig,
    from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    run_to_end(Trainer::new(Task::Train(regime), dataset, config, from)?)
}

/// `CE(g(f(x_C))) + α · Fr / b` for one batch given as per-view `[b, P]`
/// inputs, with the classifier reading view 0.
pub fn record_joint_loss(
    g: &mut Graph,
    bound: &BoundModel,
    views: &[Tensor],
    labels: &[usize],
    graph: &crate::home_loss::NeighborGraph,
    alpha: f64,
) -> Result<Var> {
    let b = labels.len();
    let mut reps = Vec::with_capacity(views.len());
    let mut z0 = None;
    for x in views {
        let xv = g.constant(x.clone());
        let z = bound.encoder.forward(g, xv)?;
        z0.get_or_insert(z);
        reps.push(bound.vn.forward(g, z)?);
    }
    let z0 = z0.ok_or_else(|| Error::InconsistentShapes("no views".into()))?;
    let logits = bound.decoder.forward(g, z0)?;
    let ce = g.cross_entropy_loss(logits, labels)?;
    let fr = record_frobenius_loss(g, &reps, graph)?;
    let fr = g.scale(fr, 1.0 / b as f64);
    crate::home_loss::record_total_loss(g, ce, fr, alpha)
}
