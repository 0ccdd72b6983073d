//! Pooled RMSE and error rate over existing, planned and all stations.

use std::io::Write;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::Serialize;

use crate::baseline::{
    baseline_features, forest_baseline, knn_baseline, ForestConfig, KnnQuery, LabeledStation,
};
use crate::checkpoint::ModelCheckpoint;
use crate::data::{expected_demand, Dataset, DateWindow, DemandTable, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::model::SnapshotInput;
use crate::scalar::Scalar;
use crate::temporal::StaticFeatureScaler;
use crate::train::{fit_scaler, snapshot_stations};

pub const WEEKDAY_NAMES: [&str; DAYS_PER_WEEK] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];
pub const POOLING: &str = "pooled over every (station, weekday) entry of the group";

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("metric input"));
    }
    if pred.len() != truth.len() {
        return Err(Error::dim("metric", &[pred.len()], &[truth.len()]));
    }
    Ok(())
}

/// `√(N⁻¹ Σ (ẑ − z)²)`
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `Σ|ẑ − z| / Σ z`
pub fn error_rate(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let total: f64 = truth.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("error rate needs positive total truth"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Existing,
    Planned,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Existing => "existing",
            Group::Planned => "planned",
        }
    }
}

/// A station scored by the evaluation: its group and realized expected
/// demand over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalStation {
    pub id: String,
    pub group: Group,
    pub truth: [f64; DAYS_PER_WEEK],
}

/// The stations an evaluation scores and the snapshot predictions are made on.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub eval_date: NaiveDate,
    pub horizon_days: usize,
    /// Existing at `eval_date` or deploying within the horizon; the model
    /// sees all of them, in dataset order.
    pub network: Vec<String>,
    pub scored: Vec<EvalStation>,
    /// Stations in the network whose horizon does not observe every weekday.
    pub unscored: usize,
}

impl EvalSet {
    /// Existing stations are alive on `eval_date`; planned stations deploy in
    /// `(eval_date, eval_date + horizon]`. Either is scored only when its
    /// service within the horizon covers every weekday.
    pub fn build(dataset: &Dataset, table: &DemandTable, eval_date: NaiveDate, horizon_days: usize) -> Result<Self> {
        if horizon_days < DAYS_PER_WEEK {
            return Err(Error::Config(format!(
                "horizon must cover a full week, got {horizon_days} days"
            )));
        }
        let target = DateWindow::following(eval_date, horizon_days as u64);
        if target.end > dataset.weather.span().end {
            return Err(Error::Config(format!(
                "horizon ending {} runs past the dataset end {}",
                target.end - Days::new(1),
                dataset.weather.end()
            )));
        }
        let network = snapshot_stations(&dataset.stations, eval_date, horizon_days);
        let mut scored = Vec::new();
        for s in &network {
            let group = if s.deployed_on <= eval_date {
                Group::Existing
            } else {
                Group::Planned
            };
            let Some(series) = table.get(&s.id) else {
                continue;
            };
            match expected_demand(series, target) {
                Ok(e) if e.is_complete() => scored.push(EvalStation {
                    id: s.id.clone(),
                    group,
                    truth: e.values,
                }),
                Ok(_) | Err(Error::EmptyWindow) => {}
                Err(e) => return Err(e),
            }
        }
        if scored.is_empty() {
            return Err(Error::EmptyInput("scored evaluation stations"));
        }
        Ok(EvalSet {
            eval_date,
            horizon_days,
            unscored: network.len() - scored.len(),
            network: network.into_iter().map(|s| s.id.clone()).collect(),
            scored,
        })
    }

    pub fn target(&self) -> DateWindow {
        DateWindow::following(self.eval_date, self.horizon_days as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeekdayMetrics {
    pub weekday: &'static str,
    pub rmse: f64,
    /// Absent when the group's truth sums to zero on this weekday.
    pub er: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub stations: usize,
    pub entries: usize,
    pub rmse: f64,
    pub er: Option<f64>,
    pub squared_error: f64,
    pub absolute_error: f64,
    pub truth_total: f64,
    pub per_weekday: Vec<WeekdayMetrics>,
}

impl GroupMetrics {
    /// `None` when no station falls in the group.
    fn compute<'a>(rows: impl Iterator<Item = (&'a [f64; DAYS_PER_WEEK], &'a [f64; DAYS_PER_WEEK])> + Clone) -> Option<Self> {
        let stations = rows.clone().count();
        if stations == 0 {
            return None;
        }
        let flat = |w: Option<usize>| -> (Vec<f64>, Vec<f64>) {
            rows.clone()
                .flat_map(|(p, t)| {
                    (0..DAYS_PER_WEEK)
                        .filter(move |d| w.is_none_or(|w| w == *d))
                        .map(move |d| (p[d], t[d]))
                })
                .unzip()
        };
        let (p, t) = flat(None);
        let per_weekday = (0..DAYS_PER_WEEK)
            .map(|w| {
                let (p, t) = flat(Some(w));
                WeekdayMetrics {
                    weekday: WEEKDAY_NAMES[w],
                    rmse: rmse(&p, &t).expect("non-empty group"),
                    er: error_rate(&p, &t).ok(),
                }
            })
            .collect();
        Some(GroupMetrics {
            stations,
            entries: p.len(),
            rmse: rmse(&p, &t).expect("non-empty group"),
            er: error_rate(&p, &t).ok(),
            squared_error: p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum(),
            absolute_error: p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum(),
            truth_total: t.iter().sum(),
            per_weekday,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationPrediction {
    pub id: String,
    pub group: Group,
    pub predicted: [f64; DAYS_PER_WEEK],
    pub truth: [f64; DAYS_PER_WEEK],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub method: String,
    pub eval_date: NaiveDate,
    pub horizon_days: usize,
    pub pooling: &'static str,
    pub unscored_stations: usize,
    pub existing: Option<GroupMetrics>,
    pub planned: Option<GroupMetrics>,
    pub all: GroupMetrics,
    pub config: serde_json::Value,
    pub stations: Vec<StationPrediction>,
}

impl EvaluationReport {
    /// `predictions[k]` belongs to `set.scored[k]`.
    pub fn new(
        method: impl Into<String>,
        set: &EvalSet,
        predictions: &[[f64; DAYS_PER_WEEK]],
        config: serde_json::Value,
    ) -> Result<Self> {
        if predictions.len() != set.scored.len() {
            return Err(Error::dim("evaluation", &[predictions.len()], &[set.scored.len()]));
        }
        let stations: Vec<StationPrediction> = set
            .scored
            .iter()
            .zip(predictions)
            .map(|(s, p)| StationPrediction {
                id: s.id.clone(),
                group: s.group,
                predicted: *p,
                truth: s.truth,
            })
            .collect();
        let group = |g: Option<Group>| {
            GroupMetrics::compute(
                stations
                    .iter()
                    .filter(move |s| g.is_none_or(|g| s.group == g))
                    .map(|s| (&s.predicted, &s.truth)),
            )
        };
        Ok(EvaluationReport {
            method: method.into(),
            eval_date: set.eval_date,
            horizon_days: set.horizon_days,
            pooling: POOLING,
            unscored_stations: set.unscored,
            existing: group(Some(Group::Existing)),
            planned: group(Some(Group::Planned)),
            all: group(None).expect("eval set is non-empty"),
            config,
            stations,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("report serialization: {e}")))
    }

    /// `group,weekday,rmse,er` with one `all` weekday row per group.
    pub fn to_plot_csv(&self) -> String {
        let mut out = String::from("group,weekday,rmse,er\n");
        let er = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (name, g) in [
            ("existing", self.existing.as_ref()),
            ("planned", self.planned.as_ref()),
            ("all", Some(&self.all)),
        ] {
            let Some(g) = g else { continue };
            for w in &g.per_weekday {
                out.push_str(&format!("{name},{},{},{}\n", w.weekday, w.rmse, er(w.er)));
            }
            out.push_str(&format!("{name},all,{},{}\n", g.rmse, er(g.er)));
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let write = |path: &Path, body: &str| {
            std::fs::File::create(path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(path, e))
        };
        write(json_path, &(self.to_json()? + "\n"))?;
        write(csv_path, &self.to_plot_csv())
    }
}

/// Model predictions on `as_of` for the stations alive then and those
/// deploying within `horizon_days`, in dataset order. Demand after `as_of` is
/// never read.
pub fn predict_network<T: Scalar>(
    checkpoint: &ModelCheckpoint<T>,
    dataset: &Dataset,
    table: &DemandTable,
    as_of: NaiveDate,
    horizon_days: usize,
) -> Result<Vec<StationForecast>> {
    checkpoint.check_categories(&dataset.categories)?;
    let network = snapshot_stations(&dataset.stations, as_of, horizon_days);
    if network.is_empty() {
        return Err(Error::EmptyInput("stations alive or planned at the prediction date"));
    }
    let input = SnapshotInput::assemble(
        as_of,
        &network,
        table,
        &dataset.weather,
        &checkpoint.scaler,
        &checkpoint.similarity,
        checkpoint.history_window,
    )?;
    let pred = checkpoint.model.predict(&input)?;
    Ok(network
        .iter()
        .enumerate()
        .map(|(i, s)| StationForecast {
            id: s.id.clone(),
            group: if s.deployed_on <= as_of {
                Group::Existing
            } else {
                Group::Planned
            },
            expected: std::array::from_fn(|w| pred.get(i, w).as_f64()),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationForecast {
    pub id: String,
    pub group: Group,
    pub expected: [f64; DAYS_PER_WEEK],
}

/// `station_id,group,mon,...,sun`
pub fn forecasts_csv(forecasts: &[StationForecast]) -> String {
    let mut out = format!("station_id,group,{}\n", WEEKDAY_NAMES.join(","));
    for f in forecasts {
        let values: Vec<String> = f.expected.iter().map(f64::to_string).collect();
        out.push_str(&format!("{},{},{}\n", f.id, f.group.name(), values.join(",")));
    }
    out
}

/// Model predictions for every scored station of `set`.
pub fn predict_set<T: Scalar>(
    checkpoint: &ModelCheckpoint<T>,
    dataset: &Dataset,
    table: &DemandTable,
    set: &EvalSet,
) -> Result<Vec<[f64; DAYS_PER_WEEK]>> {
    let forecasts = predict_network(checkpoint, dataset, table, set.eval_date, set.horizon_days)?;
    let row_of = |id: &str| {
        forecasts
            .iter()
            .find(|f| f.id == id)
            .expect("scored stations belong to the network")
    };
    Ok(set.scored.iter().map(|s| row_of(&s.id).expected).collect())
}

pub fn evaluate<T: Scalar>(
    checkpoint: &ModelCheckpoint<T>,
    dataset: &Dataset,
    eval_date: NaiveDate,
    horizon_days: usize,
    config: serde_json::Value,
) -> Result<EvaluationReport> {
    let table = dataset.demand_table();
    let set = EvalSet::build(dataset, &table, eval_date, horizon_days)?;
    let pred = predict_set(checkpoint, dataset, &table, &set)?;
    EvaluationReport::new("model", &set, &pred, config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineMethod {
    Knn { k: usize },
    Forest(ForestConfig),
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Knn { .. } => "knn",
            BaselineMethod::Forest(_) => "forest",
        }
    }
}

/// Stations in service for the whole `history_days` before `eval_date`,
/// labeled with their expected demand over that stretch.
pub fn baseline_training_set(
    dataset: &Dataset,
    table: &DemandTable,
    scaler: &StaticFeatureScaler,
    eval_date: NaiveDate,
    history_days: usize,
) -> Result<Vec<LabeledStation>> {
    let window = DateWindow::ending_on(eval_date, history_days as u64);
    let mut out = Vec::new();
    for s in dataset.stations.iter().filter(|s| s.is_alive(eval_date)) {
        let Some(series) = table.get(&s.id) else { continue };
        match expected_demand(series, window) {
            Ok(e) if e.is_complete() => out.push(LabeledStation {
                features: baseline_features(s, scaler)?,
                expected: e.values,
            }),
            Ok(_) | Err(Error::EmptyWindow) => {}
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("baseline training stations"));
    }
    Ok(out)
}

/// Baseline predictions for every scored station. Only demand up to
/// `eval_date` is read.
pub fn baseline_predictions(
    method: &BaselineMethod,
    dataset: &Dataset,
    table: &DemandTable,
    set: &EvalSet,
    history_days: usize,
) -> Result<Vec<[f64; DAYS_PER_WEEK]>> {
    let visible = table.truncated_through(set.eval_date);
    let scaler = fit_scaler(dataset, set.eval_date)?;
    let train = baseline_training_set(dataset, &visible, &scaler, set.eval_date, history_days)?;
    let station = |id: &str| dataset.station(id).expect("scored stations come from the dataset");
    match method {
        BaselineMethod::Knn { k } => {
            let history = DateWindow::ending_on(set.eval_date, history_days as u64);
            let queries = set
                .scored
                .iter()
                .map(|s| {
                    Ok(match s.group {
                        Group::Planned => KnnQuery::Planned {
                            features: baseline_features(station(&s.id), &scaler)?,
                        },
                        Group::Existing => KnnQuery::Existing {
                            history: visible
                                .get(&s.id)
                                .map(|series| series.slice(history).collect())
                                .unwrap_or_default(),
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            knn_baseline(&train, &queries, *k, set.target())
        }
        BaselineMethod::Forest(cfg) => {
            let queries = set
                .scored
                .iter()
                .map(|s| baseline_features(station(&s.id), &scaler))
                .collect::<Result<Vec<_>>>()?;
            forest_baseline(&train, &queries, cfg)
        }
    }
}

pub fn evaluate_baseline(
    method: &BaselineMethod,
    dataset: &Dataset,
    eval_date: NaiveDate,
    horizon_days: usize,
    history_days: usize,
    config: serde_json::Value,
) -> Result<EvaluationReport> {
    let table = dataset.demand_table();
    let set = EvalSet::build(dataset, &table, eval_date, horizon_days)?;
    let pred = baseline_predictions(method, dataset, &table, &set, history_days)?;
    EvaluationReport::new(method.name(), &set, &pred, config)
}
