//! The expected-demand network: shared LSTM per station, conditioned on the
//! static descriptor, multi-graph convolution over the snapshot, and a
//! two-layer head with a softplus output.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DemandTable, Station, WeatherCalendar, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::graph::{CategorySimilarity, NetworkSnapshot};
use crate::scalar::Scalar;
use crate::spatial::{
    encode_network_on_tape, GcnLayerParameters, GraphVars, DEFAULT_LAYERS, DEFAULT_WIDTH,
    GRAPH_COUNT,
};
use crate::temporal::{
    encode_batch, static_feature_len, station_history, LstmParameters, LstmVars,
    StaticFeatureScaler, TemporalInputStep, DEFAULT_HIDDEN,
};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const DEFAULT_HEAD_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// POI category count of the dataset the model is built for.
    pub categories: usize,
    pub hidden: usize,
    pub gcn_layers: usize,
    pub gcn_width: usize,
    pub head_hidden: usize,
    /// One transform per graph instead of one shared across the three.
    pub per_graph_weights: bool,
}

impl ModelConfig {
    pub fn new(categories: usize) -> Self {
        ModelConfig {
            categories,
            hidden: DEFAULT_HIDDEN,
            gcn_layers: DEFAULT_LAYERS,
            gcn_width: DEFAULT_WIDTH,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            per_graph_weights: false,
        }
    }

    pub fn static_len(&self) -> usize {
        static_feature_len(self.categories)
    }

    /// Width of a row of `H⁽⁰⁾`.
    pub fn input_width(&self) -> usize {
        self.hidden + self.static_len()
    }

    /// Width of `H_t`.
    pub fn context_width(&self) -> usize {
        if self.gcn_layers == 0 {
            self.input_width()
        } else {
            self.gcn_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.head_hidden == 0 || (self.gcn_layers > 0 && self.gcn_width == 0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the network reads for one snapshot date.
#[derive(Clone, Debug)]
pub struct SnapshotInput<T> {
    pub as_of: NaiveDate,
    pub station_ids: Vec<String>,
    /// `[f(A_dist), f(A_func), f(A_road)]`
    pub graphs: [Tensor<T>; GRAPH_COUNT],
    /// One per station; empty for stations without service before `as_of`.
    pub histories: Vec<Vec<TemporalInputStep>>,
    /// `N × (P + 5)`
    pub statics: Tensor<T>,
}

impl<T: Scalar> SnapshotInput<T> {
    /// Builds the snapshot over `stations`. Histories cover the `window` days
    /// ending on `as_of`; nothing after `as_of` is read.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        as_of: NaiveDate,
        stations: &[&Station],
        table: &DemandTable,
        calendar: &WeatherCalendar,
        scaler: &StaticFeatureScaler,
        sim: &CategorySimilarity<T>,
        window: usize,
    ) -> Result<Self> {
        let snapshot = NetworkSnapshot::build(as_of, stations, sim)?;
        let graphs = snapshot.normalized()?;
        let histories = stations
            .iter()
            .map(|s| match table.get(&s.id) {
                Some(series) => station_history(series, calendar, as_of, window),
                None => Ok(Vec::new()),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut statics = Vec::new();
        for s in stations {
            statics.extend(scaler.transform(s)?.values().iter().map(|&v| T::lit(v)));
        }
        let width = statics.len() / stations.len();
        Ok(SnapshotInput {
            as_of,
            station_ids: snapshot.station_ids,
            graphs,
            histories,
            statics: Tensor::matrix(stations.len(), width, statics)?,
        })
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }

    /// Reorders stations; `perm[k]` is the old index of the new row `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        SnapshotInput {
            as_of: self.as_of,
            station_ids: perm.iter().map(|&i| self.station_ids[i].clone()).collect(),
            graphs: self.graphs.clone().map(|g| g.permute_symmetric(perm)),
            histories: perm.iter().map(|&i| self.histories[i].clone()).collect(),
            statics: self.statics.permute_rows(perm),
        }
    }
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub all: Vec<Var>,
    pub lstm: LstmVars,
    pub gcn: Vec<Vec<Var>>,
    pub head: [Var; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

const HEAD_NAMES: [&str; 4] = ["head.w1", "head.b1", "head.w2", "head.b2"];

fn glorot<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("nonzero shape")
}

impl<T: Scalar> DemandModel<T> {
    /// Random initialization drawn from a stream seeded by `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        LstmParameters::<T>::init(config.hidden, &mut rng).push_into(&mut params);
        let mut width = config.input_width();
        for l in 0..config.gcn_layers {
            GcnLayerParameters::<T>::init(width, config.gcn_width, config.per_graph_weights, &mut rng)
                .push_into(l, &mut params);
            width = config.gcn_width;
        }
        params.push(HEAD_NAMES[0], glorot(width, config.head_hidden, &mut rng));
        params.push(HEAD_NAMES[1], Tensor::zeros(&[1, config.head_hidden]));
        params.push(HEAD_NAMES[2], glorot(config.head_hidden, DAYS_PER_WEEK, &mut rng));
        params.push(HEAD_NAMES[3], Tensor::zeros(&[1, DAYS_PER_WEEK]));
        Ok(DemandModel { config, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        for (_, t) in model.params.iter_mut() {
            t.data_mut().fill(T::zero());
        }
        Ok(model)
    }

    /// Sets the output bias so the untrained head predicts `level` per day.
    pub fn set_output_level(&mut self, level: f64) {
        // inverse softplus
        let level = level.max(1e-6);
        let b = if level > 30.0 { level } else { level.exp_m1().ln() };
        if let Some(t) = self.params.get_mut(HEAD_NAMES[3]) {
            t.data_mut().fill(T::lit(b));
        }
    }

    /// Expected parameter names and shapes, in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let h = config.hidden;
        let mut out = vec![
            (LstmParameters::<T>::NAMES[0].to_owned(), vec![crate::temporal::INPUT_SIZE, 4 * h]),
            (LstmParameters::<T>::NAMES[1].to_owned(), vec![h, 4 * h]),
            (LstmParameters::<T>::NAMES[2].to_owned(), vec![1, 4 * h]),
        ];
        let mut width = config.input_width();
        for l in 0..config.gcn_layers {
            for name in GcnLayerParameters::<T>::names(l, config.per_graph_weights) {
                out.push((name, vec![width, config.gcn_width]));
            }
            width = config.gcn_width;
        }
        out.push((HEAD_NAMES[0].into(), vec![width, config.head_hidden]));
        out.push((HEAD_NAMES[1].into(), vec![1, config.head_hidden]));
        out.push((HEAD_NAMES[2].into(), vec![config.head_hidden, DAYS_PER_WEEK]));
        out.push((HEAD_NAMES[3].into(), vec![1, DAYS_PER_WEEK]));
        out
    }

    /// Assembles a model from named parameters, checking them against the
    /// layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(DemandModel { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundModel> {
        let all = self.params.bind(tape);
        self.bound_from(all)
    }

    /// Records the parameters as constants, for inference.
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<BoundModel> {
        let all = self
            .params
            .iter()
            .map(|(_, t)| {
                let mut c = t.clone();
                c.grad = None;
                tape.constant(c)
            })
            .collect();
        self.bound_from(all)
    }

    fn bound_from(&self, all: Vec<Var>) -> Result<BoundModel> {
        let lstm = LstmVars::from_bound(&self.params, &all)?;
        let idx = |name: &str| {
            self.params
                .index_of(name)
                .map(|i| all[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let gcn = (0..self.config.gcn_layers)
            .map(|l| {
                GcnLayerParameters::<T>::names(l, self.config.per_graph_weights)
                    .iter()
                    .map(|n| idx(n))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let head = [
            idx(HEAD_NAMES[0])?,
            idx(HEAD_NAMES[1])?,
            idx(HEAD_NAMES[2])?,
            idx(HEAD_NAMES[3])?,
        ];
        Ok(BoundModel {
            all,
            lstm,
            gcn,
            head,
        })
    }

    /// Records the forward pass; returns the `N × 7` prediction node.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundModel, input: &SnapshotInput<T>) -> Result<Var> {
        let n = input.len();
        if input.statics.shape() != [n, self.config.static_len()] {
            return Err(Error::Checkpoint(format!(
                "static features {:?} do not match the model's {} columns",
                input.statics.shape(),
                self.config.static_len()
            )));
        }
        let refs: Vec<&[TemporalInputStep]> = input.histories.iter().map(Vec::as_slice).collect();
        let f = encode_batch(tape, &bound.lstm, &refs)?;
        let c = tape.constant(input.statics.clone());
        let h0 = tape.concat_cols(f, c)?;
        let graphs = GraphVars::record(tape, &input.graphs, self.config.per_graph_weights);
        let h = encode_network_on_tape(tape, h0, &graphs, &bound.gcn)?;
        let [w1, b1, w2, b2] = bound.head;
        let z = tape.matmul(h, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z);
        let out = tape.matmul(z, w2)?;
        let out = tape.add_row(out, b2)?;
        Ok(tape.softplus(out))
    }

    /// `N × 7` expected demand per station, Monday first.
    pub fn predict(&self, input: &SnapshotInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean over stations of `(1/7)·‖pred_i − truth_i‖²`.
pub fn loss_expected<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<T> {
    if pred.shape() != truth.shape() || !pred.is_matrix() || pred.cols() != DAYS_PER_WEEK {
        return Err(Error::dim("loss_expected", pred.shape(), truth.shape()));
    }
    let sq: T = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sq / T::from_usize_lossy(pred.numel()))
}

/// Tape version of [`loss_expected`] restricted to rows with `mask[i]`.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: &Tensor<T>,
    mask: &[bool],
) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != truth.shape() || mask.len() != shape[0] {
        return Err(Error::dim("loss_expected", &shape, truth.shape()));
    }
    let rows = mask.iter().filter(|&&m| m).count();
    if rows == 0 {
        return Err(Error::EmptyInput("supervised stations"));
    }
    let t = tape.constant(truth.clone());
    let diff = tape.sub(pred, t)?;
    let diff = if rows == mask.len() {
        diff
    } else {
        let m: Vec<T> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, shape[1]))
            .collect();
        let m = tape.constant(Tensor::new(shape.clone(), m)?);
        tape.mul(diff, m)?
    };
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / T::from_usize_lossy(rows * shape[1])))
}
