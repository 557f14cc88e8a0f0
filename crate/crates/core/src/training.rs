//! Warm-up, joint optimization, evaluation, transfer and K sweeps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneKind};
use crate::controller::{AdaFsController, Gating, MvfsController, Phase, Scoring, SelectionOutput, SelectionVars};
use crate::data::{Dataset, FieldSchema, GroundTruth, Vocabulary};
use crate::embedding::EmbeddingTable;
use crate::metrics::{self, EpochRecord, RunReport};
use crate::numeric::{adam_step, ParamGroup, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mvfs,
    AdafsStyle,
    None,
    NoIsm,
    NoGate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Mvfs => "mvfs",
            Mode::AdafsStyle => "adafs_style",
            Mode::None => "none",
            Mode::NoIsm => "no_ism",
            Mode::NoGate => "no_gate",
        }
    }

    /// Label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Mode::AdafsStyle => "AdaFS-style",
            other => other.name(),
        }
    }

    fn multi_view(self) -> Option<(Gating, Scoring)> {
        match self {
            Mode::Mvfs => Some((Gating::Learned, Scoring::Annealed)),
            Mode::NoIsm => Some((Gating::Learned, Scoring::Raw)),
            Mode::NoGate => Some((Gating::Uniform, Scoring::Annealed)),
            Mode::AdafsStyle | Mode::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub dim: usize,
    pub k: usize,
    pub threshold: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub backbone: BackboneKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            l2: 1e-6,
            batch_size: 4096,
            dim: 16,
            k: 3,
            threshold: 0.2,
            warmup_epochs: 3,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            mode: Mode::Mvfs,
            backbone: BackboneKind::Mlp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Passthrough,
    MultiView(MvfsController),
    AdaFs(AdaFsController),
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_sizes: Vec<usize>,
    #[serde(default)]
    pub vocabulary: Option<Vocabulary>,
    /// Joint-phase optimizer steps.
    pub t: u64,
    pub transferred: bool,
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
}

/// Embeddings, controller and backbone sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: TrainConfig,
    schema: FieldSchema,
    store: ParamStore,
    embedding: EmbeddingTable,
    /// Tables read only by a transferred controller.
    selector: Option<EmbeddingTable>,
    controller: Controller,
    backbone: Backbone,
    t: u64,
    transferred: bool,
    history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pass {
    /// Controller skipped, all scores one.
    Bypass,
    Controlled(Phase),
}

struct Forward {
    probs: Var,
    selection: Option<SelectionVars>,
}

const EMBEDDING: &str = "emb";
const SELECTOR_EMBEDDING: &str = "sel.emb";

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Model {
    /// Fresh parameters for `schema`, drawn from the config seed.
    pub fn new(config: TrainConfig, schema: FieldSchema) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed);
        let mut store = ParamStore::new();
        let n = schema.field_count();
        let embedding = EmbeddingTable::init(&mut store, &schema, config.dim, EMBEDDING, ParamGroup::Rs, &mut rng)?;
        let controller = match (config.mode, config.mode.multi_view()) {
            (_, Some((gating, scoring))) => Controller::MultiView(MvfsController::init(
                &mut store,
                n,
                config.dim,
                config.k,
                config.threshold,
                gating,
                scoring,
                &mut rng,
            )?),
            (Mode::AdafsStyle, None) => Controller::AdaFs(AdaFsController::init(&mut store, n, config.dim, &mut rng)?),
            _ => Controller::Passthrough,
        };
        let backbone = Backbone::init(&mut store, config.backbone, &schema, config.dim, &mut rng)?;
        Ok(Self {
            config,
            schema,
            store,
            embedding,
            selector: None,
            controller,
            backbone,
            t: 0,
            transferred: false,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config;
        config.validate()?;
        let schema = FieldSchema::new(ckpt.vocab_sizes)?;
        let store = ckpt.params;
        let n = schema.field_count();
        let embedding = EmbeddingTable::attach(&store, &schema, config.dim, EMBEDDING)?;
        let selector = if ckpt.transferred {
            Some(EmbeddingTable::attach(&store, &schema, config.dim, SELECTOR_EMBEDDING)?)
        } else {
            None
        };
        let controller = match (config.mode, config.mode.multi_view()) {
            (_, Some((gating, scoring))) => Controller::MultiView(MvfsController::attach(
                &store,
                n,
                config.dim,
                config.k,
                config.threshold,
                gating,
                scoring,
            )?),
            (Mode::AdafsStyle, None) => Controller::AdaFs(AdaFsController::attach(&store)?),
            _ => Controller::Passthrough,
        };
        let backbone = Backbone::attach(&store, config.backbone, &schema, config.dim)?;
        Ok(Self {
            config,
            schema,
            store,
            embedding,
            selector,
            controller,
            backbone,
            t: ckpt.t,
            transferred: ckpt.transferred,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab_sizes: self.schema.vocab_sizes().to_vec(),
            vocabulary: None,
            t: self.t,
            transferred: self.transferred,
            params: self.store.clone(),
            history: self.history.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn is_transferred(&self) -> bool {
        self.transferred
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.schema() != &self.schema {
            return Err(Error::Schema(format!(
                "dataset vocabulary sizes {:?} differ from the model's {:?}",
                ds.schema().vocab_sizes(),
                self.schema.vocab_sizes()
            )));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape<'_>, indices: &[usize], pass: Pass) -> Result<Forward> {
        let e = self.embedding.lookup_batch(tape, indices)?;
        let phase = match pass {
            Pass::Bypass => {
                let z = self.backbone.logit(tape, e, None, indices)?;
                return Ok(Forward {
                    probs: tape.sigmoid(z),
                    selection: None,
                });
            }
            // A transferred controller is fixed, so it always selects hard.
            Pass::Controlled(_) if self.transferred => Phase::Eval,
            Pass::Controlled(phase) => phase,
        };
        let ctrl_input = match &self.selector {
            Some(sel) => sel.lookup_batch(tape, indices)?,
            None => e,
        };
        let (scores, selection) = match &self.controller {
            Controller::Passthrough => (None, None),
            Controller::MultiView(c) => {
                let vars = c.forward(tape, ctrl_input, self.t, phase)?;
                (Some(vars.scores), Some(vars))
            }
            Controller::AdaFs(c) => (Some(c.forward(tape, ctrl_input)?), None),
        };
        let h = match scores {
            Some(s) => tape.block_scale(s, e)?,
            None => e,
        };
        let z = self.backbone.logit(tape, h, scores, indices)?;
        Ok(Forward {
            probs: tape.sigmoid(z),
            selection,
        })
    }

    /// Records the mean batch loss on `tape`. Parameter values come from the
    /// tape's store, which may be a perturbed copy of [`Model::store`].
    pub fn loss_var(&self, tape: &mut Tape<'_>, ds: &Dataset, rows: &[usize], phase: Phase) -> Result<Var> {
        let fwd = self.forward(tape, &ds.batch_indices(rows), Pass::Controlled(phase))?;
        tape.bce_mean(fwd.probs, &ds.batch_labels(rows))
    }

    /// Mean loss of one batch, without updating.
    pub fn batch_loss(&self, ds: &Dataset, rows: &[usize], phase: Phase) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let loss = self.loss_var(&mut tape, ds, rows, phase)?;
        Ok(tape.scalar(loss))
    }

    fn step(&mut self, ds: &Dataset, rows: &[usize], pass: Pass) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::new(&self.store);
            let fwd = self.forward(&mut tape, &ds.batch_indices(rows), pass)?;
            let loss = tape.bce_mean(fwd.probs, &ds.batch_labels(rows))?;
            (tape.scalar(loss), tape.backward(loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.store.step(),
                loss,
            });
        }
        self.store.accumulate(&grads);
        let train_controller = pass != Pass::Bypass && !self.transferred;
        adam_step(&mut self.store, self.config.lr, self.config.l2, |p| {
            p.group == ParamGroup::Rs || (train_controller && p.group == ParamGroup::Controller)
        })?;
        if pass != Pass::Bypass {
            self.t += 1;
        }
        Ok(loss)
    }

    fn epoch(&mut self, ds: &Dataset, rng: &mut ChaCha8Rng, pass: Pass) -> Result<f64> {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for rows in order.chunks(self.config.batch_size) {
            total += self.step(ds, rows, pass)? * rows.len() as f64;
        }
        Ok(total / ds.len() as f64)
    }

    /// Eval-phase predictions.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        Ok(self.inspect(ds, false)?.0)
    }

    /// Eval-phase predictions plus, for multi-view controllers, the
    /// per-instance controller outputs.
    pub fn inspect(&self, ds: &Dataset, with_selection: bool) -> Result<(Vec<f64>, Option<Vec<SelectionOutput>>)> {
        self.check_dataset(ds)?;
        if ds.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
        }
        let keep = with_selection && matches!(self.controller, Controller::MultiView(_));
        let mut preds = Vec::with_capacity(ds.len());
        let mut selections = keep.then(|| Vec::with_capacity(ds.len()));
        let all: Vec<usize> = (0..ds.len()).collect();
        for rows in all.chunks(self.config.batch_size) {
            let mut tape = Tape::new(&self.store);
            let fwd = self.forward(&mut tape, &ds.batch_indices(rows), Pass::Controlled(Phase::Eval))?;
            preds.extend_from_slice(tape.value(fwd.probs).as_slice());
            if let (Some(out), Some(vars)) = (selections.as_mut(), fwd.selection.as_ref()) {
                out.extend(SelectionOutput::rows(&tape, vars));
            }
        }
        Ok((preds, selections))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

/// AUC and log loss of eval-phase predictions. Does not touch parameters.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Metrics> {
    let preds = model.predict(ds)?;
    let labels = ds.labels();
    Ok(Metrics {
        auc: metrics::auc(&preds, &labels)?,
        logloss: metrics::logloss(&preds, &labels)?,
        n: ds.len(),
    })
}

/// Trains embeddings and backbone with every score fixed to one. The
/// controller is neither evaluated nor updated.
pub fn warmup(model: &mut Model, train: &Dataset) -> Result<()> {
    model.check_dataset(train)?;
    let mut rng = shuffle_rng(model.config.seed);
    warmup_with(model, train, &mut rng)
}

fn warmup_with(model: &mut Model, train: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
    for epoch in 0..model.config.warmup_epochs {
        let loss = model.epoch(train, rng, Pass::Bypass)?;
        model.history.push(EpochRecord {
            epoch,
            phase: "warmup".into(),
            train_loss: loss,
            valid_auc: None,
            valid_logloss: None,
            steps: model.store.step(),
        });
    }
    Ok(())
}

/// Validation key for early stopping: AUC, or negated log loss when the
/// validation set holds a single class.
fn stopping_key(m: &(Option<f64>, f64)) -> f64 {
    m.0.unwrap_or(-m.1)
}

fn validation(model: &Model, valid: &Dataset) -> Result<(Option<f64>, f64)> {
    let preds = model.predict(valid)?;
    let labels = valid.labels();
    Ok((metrics::auc(&preds, &labels).ok(), metrics::logloss(&preds, &labels)?))
}

/// Joint optimization with early stopping; returns the best-validation model.
pub fn joint_train(model: Model, train: &Dataset, valid: &Dataset) -> Result<Model> {
    let mut rng = shuffle_rng(model.config.seed);
    joint_train_with(model, train, valid, &mut rng)
}

fn joint_train_with(mut model: Model, train: &Dataset, valid: &Dataset, rng: &mut ChaCha8Rng) -> Result<Model> {
    model.check_dataset(train)?;
    model.check_dataset(valid)?;
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    for epoch in 0..model.config.max_epochs {
        let loss = model.epoch(train, rng, Pass::Controlled(Phase::Train))?;
        let v = validation(&model, valid)?;
        model.history.push(EpochRecord {
            epoch,
            phase: "joint".into(),
            train_loss: loss,
            valid_auc: v.0,
            valid_logloss: Some(v.1),
            steps: model.store.step(),
        });
        let key = stopping_key(&v);
        match &best {
            Some((b, _)) if key <= *b => stale += 1,
            _ => {
                best = Some((key, model.clone()));
                stale = 0;
            }
        }
        if stale >= model.config.patience {
            break;
        }
    }
    Ok(match best {
        Some((_, mut m)) => {
            m.history = model.history;
            m
        }
        None => model,
    })
}

/// Full procedure: fresh model, warm-up, joint optimization.
pub fn train(config: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<Model> {
    let mut model = Model::new(config.clone(), train.schema().clone())?;
    model.check_dataset(valid)?;
    let mut rng = shuffle_rng(config.seed);
    warmup_with(&mut model, train, &mut rng)?;
    joint_train_with(model, train, valid, &mut rng)
}

/// Trains a fresh backbone under `source`'s controller, which is frozen and
/// reads its own copy of the source embeddings.
pub fn transfer(source: &Model, target: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<Model> {
    if matches!(source.controller, Controller::Passthrough) {
        return Err(Error::InvalidInput("source model has no controller to transfer".into()));
    }
    if train.schema() != &source.schema || valid.schema() != &source.schema {
        return Err(Error::Schema(format!(
            "target data vocabulary sizes {:?} differ from the source controller's {:?}",
            train.schema().vocab_sizes(),
            source.schema.vocab_sizes()
        )));
    }
    if target.dim != source.config.dim {
        return Err(Error::Schema(format!(
            "target embedding dimension {} differs from the source's {}",
            target.dim, source.config.dim
        )));
    }
    let mut config = target.clone();
    config.mode = source.config.mode;
    config.k = source.config.k;
    config.threshold = source.config.threshold;
    let mut model = Model::new(config, source.schema.clone())?;

    let mut rng = init_rng(model.config.seed);
    rng.set_stream(2);
    let selector = EmbeddingTable::init(
        &mut model.store,
        &source.schema,
        model.config.dim,
        SELECTOR_EMBEDDING,
        ParamGroup::SelectorEmbedding,
        &mut rng,
    )?;
    for (dst, src) in selector.tables().iter().zip(source.embedding.tables()) {
        *model.store.value_mut(*dst) = source.store.value(*src).clone();
    }
    model.store.copy_group_from(&source.store, ParamGroup::Controller)?;
    model.selector = Some(selector);
    model.t = source.t;
    model.transferred = true;

    let mut rng = shuffle_rng(model.config.seed);
    warmup_with(&mut model, train, &mut rng)?;
    joint_train_with(model, train, valid, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub auc: f64,
    pub logloss: f64,
}

/// One independent run per `K`, evaluated on `test`.
pub fn k_sweep(
    base: &TrainConfig,
    ks: &[usize],
    train_ds: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(Error::InvalidInput("k sweep needs at least one value".into()));
    }
    ks.iter()
        .map(|&k| sweep_point(base, k, train_ds, valid, test))
        .collect()
}

/// A single sweep entry.
pub fn sweep_point(
    base: &TrainConfig,
    k: usize,
    train_ds: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<SweepRow> {
    let config = TrainConfig { k, ..base.clone() };
    let model = train(&config, train_ds, valid)?;
    let m = evaluate(&model, test)?;
    Ok(SweepRow {
        k,
        auc: m.auc,
        logloss: m.logloss,
    })
}

/// Metrics plus every analysis the model supports.
pub fn report(model: &Model, ds: &Dataset, truth: Option<&GroundTruth>) -> Result<RunReport> {
    let (preds, selections) = model.inspect(ds, true)?;
    let labels = ds.labels();
    let fields: Vec<usize> = (0..ds.field_count()).collect();
    let threshold = model.config.threshold;
    let (profile, rates, quality) = match &selections {
        Some(sel) => (
            Some(metrics::subnet_profile(sel)?),
            Some(metrics::selection_rates(sel, threshold)),
            truth
                .map(|t| metrics::selection_quality(sel, ds, t, threshold))
                .transpose()?,
        ),
        None => (None, None, None),
    };
    Ok(RunReport {
        mode: model.config.mode.label().into(),
        backbone: match model.config.backbone {
            BackboneKind::Mlp => "mlp",
            BackboneKind::DeepFm => "deepfm",
        }
        .into(),
        transferred: model.transferred,
        n: ds.len(),
        auc: metrics::auc(&preds, &labels)?,
        logloss: metrics::logloss(&preds, &labels)?,
        group_auc: metrics::group_auc(&preds, ds, &fields)?,
        subnet_profile: profile,
        selection_rates: rates,
        selection_quality: quality,
        history: model.history.clone(),
    })
}

/// Names of the parameters the optimizer may update in a joint step.
pub fn trainable_names(model: &Model) -> Vec<String> {
    let mut names = model.store.names(ParamGroup::Rs);
    if !model.transferred {
        names.extend(model.store.names(ParamGroup::Controller));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FieldSchema, Instance};
    use alloc::vec;

    fn toy() -> Dataset {
        let schema = FieldSchema::new(vec![4, 3, 5]).unwrap();
        let instances = (0..64)
            .map(|i| Instance {
                values: vec![i % 4, (i / 4) % 3, (i * 7) % 5],
                label: u8::from(i % 4 >= 2),
            })
            .collect();
        Dataset::new(schema, instances).unwrap()
    }

    #[test]
    fn passthrough_joint_step_equals_bypass_step() {
        let ds = toy();
        for backbone in [BackboneKind::Mlp, BackboneKind::DeepFm] {
            let config = TrainConfig {
                mode: Mode::None,
                backbone,
                dim: 3,
                batch_size: 16,
                ..TrainConfig::default()
            };
            let mut a = Model::new(config.clone(), ds.schema().clone()).unwrap();
            let mut b = a.clone();
            let mut ra = shuffle_rng(1);
            let mut rb = shuffle_rng(1);
            a.epoch(&ds, &mut ra, Pass::Bypass).unwrap();
            b.epoch(&ds, &mut rb, Pass::Controlled(Phase::Train)).unwrap();
            assert_eq!(a.store, b.store);
        }
    }

    #[test]
    fn warmup_never_reads_the_controller() {
        let ds = toy();
        let config = TrainConfig {
            dim: 2,
            batch_size: 16,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let mut model = Model::new(config, ds.schema().clone()).unwrap();
        // Poisoned controller weights would turn any read into a NaN loss.
        let ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Controller)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            model.store.value_mut(id).fill(f64::NAN);
        }
        warmup(&mut model, &ds).unwrap();
        assert_eq!(model.t, 0);
        for (_, p) in model.store.iter() {
            match p.group {
                ParamGroup::Controller => assert!(p.value.as_slice().iter().all(|v| v.is_nan())),
                _ => assert!(p.value.is_finite(), "{}", p.name),
            }
        }
    }
}
