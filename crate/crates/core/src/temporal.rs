//! Shared-weight LSTM over each station's recent demand and calendar inputs,
//! and the static station descriptor it is conditioned on.

use chrono::NaiveDate;
use rand::Rng;

use crate::data::{
    weekday_index, DateWindow, DayConditions, DemandSeries, Station, WeatherCalendar,
    WeatherCategory, DAYS_PER_WEEK, ROAD_FEATURES,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

const WEATHER_CATEGORIES: usize = WeatherCategory::ALL.len();
/// demand, weather one-hot, weekday one-hot, holiday flag
pub const INPUT_SIZE: usize = 1 + WEATHER_CATEGORIES + DAYS_PER_WEEK + 1;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_WINDOW: usize = 56;
/// Gates are laid out in this order along the columns of the fused weights.
const GATES: usize = 4;

/// One day of encoder input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalInputStep {
    /// `ln(1 + count)`
    pub demand: f64,
    pub weather: WeatherCategory,
    /// Monday = 0.
    pub weekday: usize,
    pub holiday: bool,
}

impl TemporalInputStep {
    pub fn new(count: u32, date: NaiveDate, conditions: DayConditions) -> Self {
        TemporalInputStep {
            demand: f64::from(count).ln_1p(),
            weather: conditions.weather,
            weekday: weekday_index(date),
            holiday: conditions.holiday,
        }
    }

    pub fn to_vector(&self) -> [f64; INPUT_SIZE] {
        let mut v = [0.0; INPUT_SIZE];
        self.write_into(&mut v);
        v
    }

    fn write_into<T: Scalar>(&self, out: &mut [T]) {
        out.fill(T::zero());
        out[0] = T::lit(self.demand);
        out[1 + self.weather.index()] = T::one();
        out[1 + WEATHER_CATEGORIES + self.weekday] = T::one();
        if self.holiday {
            out[INPUT_SIZE - 1] = T::one();
        }
    }

    /// Inverse of [`to_vector`](Self::to_vector). Rejects vectors whose
    /// one-hot blocks do not hold exactly one 1.
    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() != INPUT_SIZE {
            return Err(Error::dim("temporal step", &[v.len()], &[INPUT_SIZE]));
        }
        if !v[0].is_finite() || v[0] < 0.0 {
            return Err(Error::Invalid(format!("step demand {} is not a log count", v[0])));
        }
        let one_hot = |block: &[f64], what: &str| -> Result<usize> {
            let ones: Vec<usize> = (0..block.len()).filter(|&i| block[i] == 1.0).collect();
            let zeros = block.iter().filter(|&&x| x == 0.0).count();
            match ones.as_slice() {
                [i] if zeros == block.len() - 1 => Ok(*i),
                _ => Err(Error::Invalid(format!("{what} block is not one-hot: {block:?}"))),
            }
        };
        let weather = one_hot(&v[1..1 + WEATHER_CATEGORIES], "weather")?;
        let weekday = one_hot(&v[1 + WEATHER_CATEGORIES..INPUT_SIZE - 1], "weekday")?;
        let holiday = match v[INPUT_SIZE - 1] {
            0.0 => false,
            1.0 => true,
            h => return Err(Error::Invalid(format!("holiday flag {h} is not 0 or 1"))),
        };
        Ok(TemporalInputStep {
            demand: v[0],
            weather: WeatherCategory::from_index(weather).expect("index below category count"),
            weekday,
            holiday,
        })
    }
}

/// Steps for the `window` days ending on `as_of` inclusive, restricted to the
/// days the series covers. Never reads a count after `as_of`.
pub fn station_history(
    series: &DemandSeries,
    calendar: &WeatherCalendar,
    as_of: NaiveDate,
    window: usize,
) -> Result<Vec<TemporalInputStep>> {
    series
        .slice(DateWindow::ending_on(as_of, window as u64))
        .map(|(date, count)| {
            let cond = calendar
                .get(date)
                .ok_or_else(|| Error::Invalid(format!("no weather record for {date}")))?;
            Ok(TemporalInputStep::new(count, date, cond))
        })
        .collect()
}

/// Last `min(window, len)` steps.
pub fn truncate_history(history: &[TemporalInputStep], window: usize) -> &[TemporalInputStep] {
    &history[history.len().saturating_sub(window)..]
}

/// `[scaled docks ‖ POI distribution ‖ normalized road features]`
#[derive(Clone, Debug, PartialEq)]
pub struct StaticStationFeature {
    values: Vec<f64>,
}

impl StaticStationFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        StaticStationFeature { values }
    }
}

/// Static feature length for `categories` POI categories.
pub fn static_feature_len(categories: usize) -> usize {
    1 + categories + ROAD_FEATURES
}

/// Dock and road scaling fitted on a reference station set, so stations that
/// appear later are described on the same scale.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatureScaler {
    pub docks_max: f64,
    pub road_min: [f64; ROAD_FEATURES],
    pub road_max: [f64; ROAD_FEATURES],
}

impl StaticFeatureScaler {
    pub fn fit(stations: &[&Station]) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::EmptyInput("static feature reference stations"));
        }
        let mut road_min = [f64::INFINITY; ROAD_FEATURES];
        let mut road_max = [f64::NEG_INFINITY; ROAD_FEATURES];
        let mut docks_max = 0.0f64;
        for s in stations {
            let r = s
                .road_features
                .ok_or_else(|| Error::MissingRoadFeatures(s.id.clone()))?;
            for k in 0..ROAD_FEATURES {
                road_min[k] = road_min[k].min(r[k]);
                road_max[k] = road_max[k].max(r[k]);
            }
            docks_max = docks_max.max(f64::from(s.docks));
        }
        Ok(StaticFeatureScaler {
            docks_max,
            road_min,
            road_max,
        })
    }

    /// Scaled road features; a component without spread in the reference set
    /// maps to 0.5.
    pub fn road(&self, raw: &[f64; ROAD_FEATURES]) -> [f64; ROAD_FEATURES] {
        std::array::from_fn(|k| {
            let span = self.road_max[k] - self.road_min[k];
            if span > 0.0 {
                (raw[k] - self.road_min[k]) / span
            } else {
                0.5
            }
        })
    }

    pub fn transform(&self, station: &Station) -> Result<StaticStationFeature> {
        let r = station
            .road_features
            .ok_or_else(|| Error::MissingRoadFeatures(station.id.clone()))?;
        let mut values = Vec::with_capacity(static_feature_len(station.poi_distribution.len()));
        values.push(f64::from(station.docks) / self.docks_max);
        values.extend_from_slice(&station.poi_distribution);
        values.extend_from_slice(&self.road(&r));
        Ok(StaticStationFeature { values })
    }
}

/// `[f ‖ c]`
pub fn condition<T: Scalar>(f: &Tensor<T>, c: &StaticStationFeature, expected_len: usize) -> Result<Tensor<T>> {
    if c.len() != expected_len {
        return Err(Error::dim("condition", &[c.len()], &[expected_len]));
    }
    let mut data = f.data().to_vec();
    data.extend(c.values.iter().map(|&x| T::lit(x)));
    Tensor::vector(data)
}

/// Fused LSTM weights; gate column blocks are input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParameters<T> {
    /// `INPUT_SIZE × 4U`
    pub w_x: Tensor<T>,
    /// `U × 4U`
    pub w_h: Tensor<T>,
    /// `1 × 4U`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmParameters<T> {
    pub const NAMES: [&'static str; 3] = ["lstm.w_x", "lstm.w_h", "lstm.bias"];

    /// Uniform in `±1/√U`, forget-gate bias 1.
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
        };
        let w_x = Tensor::matrix(INPUT_SIZE, GATES * hidden, uniform(INPUT_SIZE * GATES * hidden))
            .expect("nonzero shape");
        let w_h = Tensor::matrix(hidden, GATES * hidden, uniform(hidden * GATES * hidden))
            .expect("nonzero shape");
        let mut b = uniform(GATES * hidden);
        for v in &mut b[hidden..2 * hidden] {
            *v = T::one();
        }
        let bias = Tensor::matrix(1, GATES * hidden, b).expect("nonzero shape");
        LstmParameters { w_x, w_h, bias }
    }

    pub fn zeros(hidden: usize) -> Self {
        LstmParameters {
            w_x: Tensor::zeros(&[INPUT_SIZE, GATES * hidden]),
            w_h: Tensor::zeros(&[hidden, GATES * hidden]),
            bias: Tensor::zeros(&[1, GATES * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn push_into(self, params: &mut ParamSet<T>) {
        let [a, b, c] = Self::NAMES;
        params.push(a, self.w_x);
        params.push(b, self.w_h);
        params.push(c, self.bias);
    }

    /// Records the weights on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> LstmVars {
        LstmVars {
            w_x: tape.var(self.w_x.clone().with_grad()),
            w_h: tape.var(self.w_h.clone().with_grad()),
            bias: tape.var(self.bias.clone().with_grad()),
            hidden: self.hidden(),
        }
    }
}

/// LSTM weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmVars {
    /// Looks up the weights by name among `vars` bound from `params`.
    pub fn from_bound<T: Scalar>(params: &ParamSet<T>, vars: &[Var]) -> Result<Self> {
        let find = |name: &str| {
            params
                .index_of(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let [a, b, c] = LstmParameters::<T>::NAMES;
        let w_h = params.get(b).ok_or_else(|| Error::Checkpoint(format!("missing parameter {b}")))?;
        Ok(LstmVars {
            w_x: find(a)?,
            w_h: find(b)?,
            bias: find(c)?,
            hidden: w_h.rows(),
        })
    }
}

/// Final hidden state for one station; the zero vector for an empty history.
pub fn encode_station<T: Scalar>(
    history: &[TemporalInputStep],
    params: &LstmParameters<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = encode_batch(&mut tape, &vars, &[history])?;
    let out = tape.value(h).data().to_vec();
    Tensor::vector(out)
}

/// Runs the LSTM over every station at once. Histories are right-aligned so
/// all end on the same step; rows are held at zero state until their first
/// step. Returns an `N × U` node.
pub fn encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &LstmVars,
    histories: &[&[TemporalInputStep]],
) -> Result<Var> {
    let n = histories.len();
    if n == 0 {
        return Err(Error::EmptyInput("station histories"));
    }
    let u = vars.hidden;
    let steps = histories.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    for s in 0..steps {
        let mut x = vec![T::zero(); n * INPUT_SIZE];
        let mut active = vec![false; n];
        for (row, hist) in histories.iter().enumerate() {
            let offset = steps - hist.len();
            if s >= offset {
                hist[s - offset].write_into(&mut x[row * INPUT_SIZE..(row + 1) * INPUT_SIZE]);
                active[row] = true;
            }
        }
        let x = tape.constant(Tensor::matrix(n, INPUT_SIZE, x)?);
        let mut pre = tape.matmul(x, vars.w_x)?;
        if let Some(h) = h {
            let rec = tape.matmul(h, vars.w_h)?;
            pre = tape.add(pre, rec)?;
        }
        let pre = tape.add_row(pre, vars.bias)?;
        let gate = |tape: &mut Tape<T>, k: usize| tape.slice_cols(pre, k * u, (k + 1) * u);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let g = gate(tape, 2)?;
        let g = tape.tanh(g);
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o);

        let mut c_new = tape.mul(i, g)?;
        if let Some(c) = c {
            let kept = tape.mul(f, c)?;
            c_new = tape.add(c_new, kept)?;
        }
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;

        if active.iter().all(|&a| a) {
            c = Some(c_new);
            h = Some(h_new);
        } else {
            let mask_data: Vec<T> = active
                .iter()
                .flat_map(|&a| std::iter::repeat_n(if a { T::one() } else { T::zero() }, u))
                .collect();
            let keep_data: Vec<T> = mask_data.iter().map(|&m| T::one() - m).collect();
            let mask = tape.constant(Tensor::matrix(n, u, mask_data)?);
            let keep = tape.constant(Tensor::matrix(n, u, keep_data)?);
            let blend = |tape: &mut Tape<T>, new: Var, old: Option<Var>| -> Result<Var> {
                let fresh = tape.mul(mask, new)?;
                match old {
                    Some(old) => {
                        let held = tape.mul(keep, old)?;
                        tape.add(fresh, held)
                    }
                    None => Ok(fresh),
                }
            };
            c = Some(blend(tape, c_new, c)?);
            h = Some(blend(tape, h_new, h)?);
        }
    }
    match h {
        Some(h) => Ok(h),
        None => Ok(tape.constant(Tensor::zeros(&[n, u]))),
    }
}
