//! Flat `key = value` run configuration with `#` comments.
//!
//! Every key names one field of the scenario, training or evaluation
//! settings. `seed` seeds all three. Lists are comma separated; the weather
//! transition matrix separates rows with `;`.

use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::Serialize;

use crate::baseline::ForestConfig;
use crate::error::{Error, Result};
use crate::synth::ScenarioConfig;
use crate::train::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Defaults to the training cutoff, so the horizon is the held-out tail.
    pub eval_date: Option<NaiveDate>,
    /// Defaults to `holdout_days`.
    pub horizon_days: Option<usize>,
    /// Days before the evaluation date the baselines learn from.
    pub baseline_history_days: usize,
    pub knn_k: usize,
    pub forest: ForestConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_date: None,
            horizon_days: None,
            baseline_history_days: 56,
            knn_k: 5,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

/// `(line, key, value)` triples in file order. Duplicate keys are rejected.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(u64, String, String)>> {
    let mut out: Vec<(u64, String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n as u64 + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|(_, k, _)| k == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| scalar(s.trim())).collect()
}

fn array<const N: usize>(v: &str) -> std::result::Result<[f64; N], String> {
    let xs: Vec<f64> = list(v)?;
    xs.try_into().map_err(|xs: Vec<f64>| format!("expected {N} values, got {}", xs.len()))
}

fn optional<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match v {
        "" | "none" | "auto" => Ok(None),
        _ => scalar(v).map(Some),
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_pairs(text, origin)? {
            cfg.set(&key, &value).map_err(|msg| Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg,
            })?;
        }
        Ok(cfg)
    }

    /// Seeds the scenario, training and forest alike.
    pub fn set_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.training.seed = seed;
        self.eval.forest.seed = seed;
    }

    /// Applies one setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (s, t, e) = (&mut self.scenario, &mut self.training, &mut self.eval);
        match key {
            "seed" => {
                let seed = scalar(v)?;
                self.set_seed(seed);
            }
            "realization" => s.realization = scalar(v)?,
            "initial_stations" => s.initial_stations = scalar(v)?,
            "final_stations" => s.final_stations = scalar(v)?,
            "span_days" => s.span_days = scalar(v)?,
            "start_date" => s.start_date = scalar(v)?,
            "lat_min" => s.lat_min = scalar(v)?,
            "lat_max" => s.lat_max = scalar(v)?,
            "lon_min" => s.lon_min = scalar(v)?,
            "lon_max" => s.lon_max = scalar(v)?,
            "min_spacing_km" => s.min_spacing_km = scalar(v)?,
            "categories" => s.categories = scalar(v)?,
            "clusters" => s.clusters = scalar(v)?,
            "zone_types" => s.zone_types = scalar(v)?,
            "cluster_spread_km" => s.cluster_spread_km = scalar(v)?,
            "pois_per_station" => s.pois_per_station = scalar(v)?,
            "poi_purity" => s.poi_purity = scalar(v)?,
            "weather_transition" => {
                let rows: Vec<[f64; 4]> = v.split(';').map(|r| array(r.trim())).collect::<std::result::Result<_, _>>()?;
                s.weather_transition = rows
                    .try_into()
                    .map_err(|r: Vec<[f64; 4]>| format!("expected 4 rows, got {}", r.len()))?;
            }
            "weather_factors" => s.weather_factors = array(v)?,
            "holiday_rate" => s.holiday_rate = scalar(v)?,
            "demand_amplitude" => s.demand_amplitude = scalar(v)?,
            "base_mean" => s.base_mean = scalar(v)?,
            "base_sigma" => s.base_sigma = scalar(v)?,
            "cluster_level_spread" => s.cluster_level_spread = scalar(v)?,
            "weekend_boost" => s.weekend_boost = scalar(v)?,
            "dow_jitter" => s.dow_jitter = scalar(v)?,
            "neighborhood_floor" => s.neighborhood_floor = scalar(v)?,
            "neighborhood_scale_km" => s.neighborhood_scale_km = scalar(v)?,
            "utc_offset_hours" => s.utc_offset_hours = scalar(v)?,

            "hidden" => t.hidden = scalar(v)?,
            "gcn_layers" => t.gcn_layers = scalar(v)?,
            "gcn_width" => t.gcn_width = scalar(v)?,
            "head_hidden" => t.head_hidden = scalar(v)?,
            "per_graph_weights" => t.per_graph_weights = boolean(v)?,
            "history_window" => t.history_window = scalar(v)?,
            "target_window" => t.target_window = scalar(v)?,
            "holdout_days" => t.holdout_days = scalar(v)?,
            "snapshot_stride" => t.snapshot_stride = scalar(v)?,
            "first_snapshot_offset" => t.first_snapshot_offset = scalar(v)?,
            "snapshot_dates" => {
                t.snapshot_dates = match v {
                    "" | "auto" | "none" => None,
                    _ => Some(list(v)?),
                }
            }
            "lr" => t.lr = scalar(v)?,
            "epochs" => t.epochs = scalar(v)?,
            "clip_norm" => t.clip_norm = scalar(v)?,
            "optimizer" => t.optimizer = v.parse().map_err(|e: Error| e.to_string())?,

            "eval_date" => e.eval_date = optional(v)?,
            "horizon_days" => e.horizon_days = optional(v)?,
            "baseline_history_days" => e.baseline_history_days = scalar(v)?,
            "knn_k" => e.knn_k = scalar(v)?,
            "forest_trees" => e.forest.trees = scalar(v)?,
            "forest_max_depth" => e.forest.max_depth = scalar(v)?,
            "forest_min_leaf" => e.forest.min_leaf = scalar(v)?,
            "forest_bootstrap" => e.forest.bootstrap = boolean(v)?,
            "forest_max_features" => e.forest.max_features = optional(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// The evaluation date and horizon for a dataset spanning `span`.
    pub fn eval_window(&self, span: crate::data::DateWindow) -> Result<(NaiveDate, usize)> {
        let date = match self.eval.eval_date {
            Some(d) => d,
            None => self.training.cutoff(span)?,
        };
        Ok((date, self.eval.horizon_days.unwrap_or(self.training.holdout_days)))
    }
}
