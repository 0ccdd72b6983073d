//! End-to-end training over weekly snapshots of the expanding network.

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ModelCheckpoint;
use crate::data::{expected_demand, DateWindow, DemandTable, Station, DAYS_PER_WEEK};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::CategorySimilarity;
use crate::model::{loss_on_tape, DemandModel, ModelConfig, SnapshotInput};
use crate::scalar::Scalar;
use crate::spatial::{DEFAULT_LAYERS, DEFAULT_WIDTH};
use crate::temporal::{StaticFeatureScaler, DEFAULT_HIDDEN, DEFAULT_WINDOW};
use crate::tensor::{clip_grad_norm, sgd_step, Adam, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainingConfig {
    pub hidden: usize,
    pub gcn_layers: usize,
    pub gcn_width: usize,
    pub head_hidden: usize,
    pub per_graph_weights: bool,
    /// Days of history fed to the encoder.
    pub history_window: usize,
    /// Days after a snapshot over which its target expected demand is taken.
    pub target_window: usize,
    /// Trailing days of the dataset never read by training.
    pub holdout_days: usize,
    pub snapshot_stride: usize,
    /// Days from the dataset start to the first snapshot.
    pub first_snapshot_offset: usize,
    /// Explicit snapshot dates; overrides the stride schedule when set.
    pub snapshot_dates: Option<Vec<NaiveDate>>,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            hidden: DEFAULT_HIDDEN,
            gcn_layers: DEFAULT_LAYERS,
            gcn_width: DEFAULT_WIDTH,
            head_hidden: crate::model::DEFAULT_HEAD_HIDDEN,
            per_graph_weights: false,
            history_window: DEFAULT_WINDOW,
            target_window: 28,
            holdout_days: 56,
            snapshot_stride: 7,
            first_snapshot_offset: 27,
            snapshot_dates: None,
            lr: 3e-3,
            epochs: 60,
            seed: 42,
            clip_norm: 5.0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_window < DAYS_PER_WEEK {
            return Err(Error::Config(format!(
                "target_window must cover every weekday (>= 7), got {}",
                self.target_window
            )));
        }
        if self.history_window == 0 || self.snapshot_stride == 0 {
            return Err(Error::Config("history_window and snapshot_stride must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, categories: usize) -> ModelConfig {
        ModelConfig {
            categories,
            hidden: self.hidden,
            gcn_layers: self.gcn_layers,
            gcn_width: self.gcn_width,
            head_hidden: self.head_hidden,
            per_graph_weights: self.per_graph_weights,
        }
    }

    /// Last day whose demand training may read: the day before the holdout.
    pub fn cutoff(&self, span: DateWindow) -> Result<NaiveDate> {
        let last = span.end - Days::new(1);
        last.checked_sub_days(Days::new(self.holdout_days as u64))
            .filter(|d| *d >= span.start)
            .ok_or_else(|| Error::Config("holdout covers the whole dataset".into()))
    }

    /// Snapshot dates whose target window ends on or before the cutoff.
    pub fn snapshots(&self, span: DateWindow) -> Result<Vec<NaiveDate>> {
        let cutoff = self.cutoff(span)?;
        let fits = |t: &NaiveDate| *t + Days::new(self.target_window as u64) <= cutoff;
        let dates: Vec<NaiveDate> = match &self.snapshot_dates {
            Some(d) => {
                if let Some(bad) = d.iter().find(|t| !fits(t) || **t < span.start) {
                    return Err(Error::Config(format!(
                        "snapshot {bad} has no observable target window before {cutoff}"
                    )));
                }
                d.clone()
            }
            None => {
                let mut t = span.start + Days::new(self.first_snapshot_offset as u64);
                let mut out = Vec::new();
                while fits(&t) {
                    out.push(t);
                    t = t + Days::new(self.snapshot_stride as u64);
                }
                out
            }
        };
        if dates.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 snapshot dates with observable targets, found {}",
                dates.len()
            )));
        }
        Ok(dates)
    }
}

/// One training example: a snapshot and its supervised targets.
#[derive(Clone, Debug)]
pub struct TrainingSnapshot<T> {
    pub input: SnapshotInput<T>,
    pub truth: Tensor<T>,
    /// Rows whose target window observes every weekday.
    pub supervised: Vec<bool>,
}

/// Stations alive at `t` plus those deploying within `(t, t + window]`, the
/// latter with empty history.
pub fn snapshot_stations(stations: &[Station], t: NaiveDate, window: usize) -> Vec<&Station> {
    let horizon = t + Days::new(window as u64);
    stations
        .iter()
        .filter(|s| s.is_alive(t) || (s.deployed_on > t && s.deployed_on <= horizon))
        .collect()
}

pub fn build_training_snapshots<T: Scalar>(
    dataset: &Dataset,
    table: &DemandTable,
    config: &TrainingConfig,
    scaler: &StaticFeatureScaler,
    sim: &CategorySimilarity<T>,
) -> Result<Vec<TrainingSnapshot<T>>> {
    let mut out = Vec::new();
    for t in config.snapshots(dataset.weather.span())? {
        let stations = snapshot_stations(&dataset.stations, t, config.target_window);
        if stations.is_empty() {
            continue;
        }
        let input = SnapshotInput::assemble(t, &stations, table, &dataset.weather, scaler, sim, config.history_window)?;
        let target = DateWindow::following(t, config.target_window as u64);
        let mut truth = Vec::with_capacity(stations.len() * DAYS_PER_WEEK);
        let mut supervised = Vec::with_capacity(stations.len());
        for s in &stations {
            let e = table
                .get(&s.id)
                .map(|series| expected_demand(series, target))
                .transpose()
                .or_else(|e| match e {
                    Error::EmptyWindow => Ok(None),
                    other => Err(other),
                })?;
            match e {
                Some(e) if e.is_complete() => {
                    truth.extend(e.values.iter().map(|&v| T::lit(v)));
                    supervised.push(true);
                }
                _ => {
                    truth.extend(std::iter::repeat_n(T::zero(), DAYS_PER_WEEK));
                    supervised.push(false);
                }
            }
        }
        if supervised.iter().any(|&s| s) {
            out.push(TrainingSnapshot {
                input,
                truth: Tensor::matrix(stations.len(), DAYS_PER_WEEK, truth)?,
                supervised,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("supervised training snapshots"));
    }
    Ok(out)
}

/// Stations deployed on or before the cutoff define the static feature scale.
pub fn fit_scaler(dataset: &Dataset, cutoff: NaiveDate) -> Result<StaticFeatureScaler> {
    let reference: Vec<&Station> = dataset
        .stations
        .iter()
        .filter(|s| s.deployed_on <= cutoff)
        .collect();
    StaticFeatureScaler::fit(&reference)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: ModelCheckpoint<T>,
    /// Mean snapshot loss per epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
    pub snapshots: usize,
}

/// Everything training derives from the data before the first step.
pub struct TrainingSetup<T> {
    pub initial: ModelCheckpoint<T>,
    pub snapshots: Vec<TrainingSnapshot<T>>,
}

/// Builds the training snapshots and the initial model. Demand is read only
/// through a copy of `table` truncated at the cutoff.
pub fn prepare<T: Scalar>(
    dataset: &Dataset,
    table: &DemandTable,
    config: &TrainingConfig,
    sim: CategorySimilarity<T>,
) -> Result<TrainingSetup<T>> {
    config.validate()?;
    if sim.categories() != dataset.poi_categories().max(1) {
        return Err(Error::Config(format!(
            "similarity matrix is {}×{}, dataset has {} categories",
            sim.categories(),
            sim.categories(),
            dataset.poi_categories()
        )));
    }
    let cutoff = config.cutoff(dataset.weather.span())?;
    let dates = config.snapshots(dataset.weather.span())?;
    let through = *dates.last().expect("at least two snapshots") + Days::new(config.target_window as u64);
    let visible = table.truncated_through(through);
    let scaler = fit_scaler(dataset, cutoff)?;
    let snapshots = build_training_snapshots(dataset, &visible, config, &scaler, &sim)?;

    let mut model = DemandModel::init(config.model_config(dataset.poi_categories()), config.seed)?;
    let (sum, count) = snapshots
        .iter()
        .flat_map(|s| {
            s.supervised
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .flat_map(move |(i, _)| s.truth.row(i).iter())
        })
        .fold((0.0, 0usize), |(a, n), v| (a + v.as_f64(), n + 1));
    model.set_output_level(sum / count.max(1) as f64);
    Ok(TrainingSetup {
        initial: ModelCheckpoint {
            model,
            categories: dataset.categories.clone(),
            scaler,
            similarity: sim,
            history_window: config.history_window,
            trained_through: Some(through),
        },
        snapshots,
    })
}

pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainingConfig) -> Result<TrainOutcome<T>> {
    let sim = CategorySimilarity::identity(dataset.poi_categories());
    train_with(dataset, &dataset.demand_table(), config, sim)
}

/// Trains from `setup`-style preparation, then runs `config.epochs` passes
/// over the snapshots in a seeded order, one optimizer step per snapshot.
pub fn train_with<T: Scalar>(
    dataset: &Dataset,
    table: &DemandTable,
    config: &TrainingConfig,
    sim: CategorySimilarity<T>,
) -> Result<TrainOutcome<T>> {
    let TrainingSetup { initial, snapshots } = prepare(dataset, table, config, sim)?;
    let mut checkpoint = initial;
    let epoch_losses = run_epochs(&mut checkpoint.model, &snapshots, config, |_, _| {})?;
    Ok(TrainOutcome {
        checkpoint,
        epoch_losses,
        snapshots: snapshots.len(),
    })
}

/// The optimization loop. `on_epoch(epoch, loss)` observes progress.
pub fn run_epochs<T: Scalar>(
    model: &mut DemandModel<T>,
    snapshots: &[TrainingSnapshot<T>],
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let lr = T::lit(config.lr);
    let clip = T::lit(config.clip_norm);
    let mut adam = Adam::new(&model.params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_0de5);
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let snap = &snapshots[k];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let pred = model.forward(&mut tape, &bound, &snap.input)?;
            let loss = loss_on_tape(&mut tape, pred, &snap.truth, &snap.supervised)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {value} at epoch {epoch}, snapshot {}; lower the learning rate (lr = {})",
                    snap.input.as_of, config.lr
                )));
            }
            total += value;
            tape.backward(loss)?;
            model.params.absorb_grads(&tape, &bound.all);
            clip_grad_norm(&mut model.params, clip);
            match config.optimizer {
                Optimizer::Adam => adam.step(&mut model.params)?,
                Optimizer::Sgd => sgd_step(&mut model.params, lr)?,
            }
        }
        let mean = total / snapshots.len() as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

/// Mean masked loss over `snapshots` at the current parameters, without
/// taking a step.
pub fn mean_snapshot_loss<T: Scalar>(model: &DemandModel<T>, snapshots: &[TrainingSnapshot<T>]) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(Error::EmptyInput("training snapshots"));
    }
    let mut total = 0.0;
    for snap in snapshots {
        let pred = model.predict(&snap.input)?;
        let rows: Vec<usize> = (0..snap.supervised.len()).filter(|&i| snap.supervised[i]).collect();
        let sse: f64 = rows
            .iter()
            .flat_map(|&i| pred.row(i).iter().zip(snap.truth.row(i)))
            .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
            .sum();
        total += sse / (DAYS_PER_WEEK * rows.len().max(1)) as f64;
    }
    Ok(total / snapshots.len() as f64)
}
