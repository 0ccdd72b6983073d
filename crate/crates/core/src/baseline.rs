//! Reference predictors: nearest neighbours in static-feature space for
//! planned stations, per-weekday linear trends for existing ones, and a
//! bagged regression forest.

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{weekday_index, DateWindow, Station, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::temporal::StaticFeatureScaler;

/// `[p ‖ normalized r ‖ scaled m]`
pub fn baseline_features(station: &Station, scaler: &StaticFeatureScaler) -> Result<Vec<f64>> {
    let r = station
        .road_features
        .ok_or_else(|| Error::MissingRoadFeatures(station.id.clone()))?;
    let mut f = station.poi_distribution.clone();
    f.extend_from_slice(&scaler.road(&r));
    f.push(f64::from(station.docks) / scaler.docks_max);
    Ok(f)
}

/// A station with known features and expected demand.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStation {
    pub features: Vec<f64>,
    pub expected: [f64; DAYS_PER_WEEK],
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean expected demand of the `k` training stations nearest each query in
/// Euclidean feature distance. Ties keep the earlier training station.
pub fn knn_predict(
    train: &[LabeledStation],
    queries: &[Vec<f64>],
    k: usize,
) -> Result<Vec<[f64; DAYS_PER_WEEK]>> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    if k > train.len() {
        return Err(Error::Invalid(format!(
            "k = {k} exceeds the {} training stations",
            train.len()
        )));
    }
    queries
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (squared_distance(q, &t.features), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut mean = [0.0; DAYS_PER_WEEK];
            for &(_, i) in &order[..k] {
                for (m, v) in mean.iter_mut().zip(&train[i].expected) {
                    *m += v / k as f64;
                }
            }
            Ok(mean)
        })
        .collect()
}

/// Per weekday, fits `count = a + b·day` by least squares on `history` and
/// averages the fit over the days of `target` on that weekday. Clamped at
/// zero; a weekday with a single observation predicts that value and one
/// with none predicts 0.
pub fn weekday_trend(history: &[(NaiveDate, u32)], target: DateWindow) -> [f64; DAYS_PER_WEEK] {
    let Some(&(origin, _)) = history.first() else {
        return [0.0; DAYS_PER_WEEK];
    };
    let day = |d: NaiveDate| (d - origin).num_days() as f64;
    std::array::from_fn(|w| {
        let pts: Vec<(f64, f64)> = history
            .iter()
            .filter(|(d, _)| weekday_index(*d) == w)
            .map(|&(d, c)| (day(d), f64::from(c)))
            .collect();
        let targets: Vec<f64> = target.iter().filter(|d| weekday_index(*d) == w).map(day).collect();
        if pts.is_empty() || targets.is_empty() {
            return 0.0;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = if sxx > 0.0 {
            pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
        } else {
            0.0
        };
        let tx = targets.iter().sum::<f64>() / targets.len() as f64;
        (my + slope * (tx - mx)).max(0.0)
    })
}

/// A station the KNN baseline predicts for.
#[derive(Clone, Debug)]
pub enum KnnQuery {
    /// No history: nearest-neighbour average.
    Planned { features: Vec<f64> },
    /// Own daily history: per-weekday linear regression.
    Existing { history: Vec<(NaiveDate, u32)> },
}

pub fn knn_baseline(
    train: &[LabeledStation],
    queries: &[KnnQuery],
    k: usize,
    target: DateWindow,
) -> Result<Vec<[f64; DAYS_PER_WEEK]>> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    queries
        .iter()
        .map(|q| match q {
            KnnQuery::Planned { features } => {
                Ok(knn_predict(train, std::slice::from_ref(features), k)?[0])
            }
            KnnQuery::Existing { history } => Ok(weekday_trend(history, target)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Train each tree on a bootstrap resample.
    pub bootstrap: bool,
    /// Features tried per split; `None` means `⌈√F⌉`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 8,
            min_leaf: 2,
            bootstrap: true,
            max_features: None,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

/// Regression tree grown by exhaustive variance-reduction splits over a
/// random feature subset at each node.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    root: Node,
}

/// Best `(feature, threshold, sse)` over `features`, splitting at midpoints
/// between consecutive distinct values. `None` when no split leaves
/// `min_leaf` samples on both sides.
fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    let n = rows.len();
    for &f in features {
        let mut sorted: Vec<usize> = rows.to_vec();
        sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let total: f64 = sorted.iter().map(|&r| y[r]).sum();
        let total_sq: f64 = sorted.iter().map(|&r| y[r] * y[r]).sum();
        let (mut ls, mut lsq) = (0.0, 0.0);
        for i in 0..n - 1 {
            let v = y[sorted[i]];
            ls += v;
            lsq += v * v;
            let (a, b) = (x[sorted[i]][f], x[sorted[i + 1]][f]);
            let nl = i + 1;
            let nr = n - nl;
            if a == b || nl < min_leaf || nr < min_leaf {
                continue;
            }
            let rs = total - ls;
            let rsq = total_sq - lsq;
            let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
            if best.is_none_or(|(_, _, s)| sse < s) {
                best = Some((f, (a + b) / 2.0, sse));
            }
        }
    }
    best
}

impl RegressionTree {
    pub fn fit<R: Rng>(
        x: &[Vec<f64>],
        y: &[f64],
        rows: &[usize],
        config: &ForestConfig,
        rng: &mut R,
    ) -> Self {
        let width = x.first().map_or(0, Vec::len);
        let try_features = config
            .max_features
            .unwrap_or_else(|| (width as f64).sqrt().ceil() as usize)
            .clamp(1, width.max(1));
        RegressionTree {
            root: Self::grow(x, y, rows, 0, width, try_features, config, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn grow<R: Rng>(
        x: &[Vec<f64>],
        y: &[f64],
        rows: &[usize],
        depth: usize,
        width: usize,
        try_features: usize,
        config: &ForestConfig,
        rng: &mut R,
    ) -> Node {
        let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
        if depth >= config.max_depth || rows.len() < 2 * config.min_leaf.max(1) || width == 0 {
            return Node::Leaf(mean);
        }
        let mut features = sample(rng, width, try_features).into_vec();
        features.sort_unstable();
        let parent_sse: f64 = rows.iter().map(|&r| (y[r] - mean).powi(2)).sum();
        match best_split(x, y, rows, &features, config.min_leaf.max(1)) {
            Some((feature, threshold, sse)) if sse < parent_sse => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x[i][feature] <= threshold);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(Self::grow(x, y, &l, depth + 1, width, try_features, config, rng)),
                    right: Box::new(Self::grow(x, y, &r, depth + 1, width, try_features, config, rng)),
                }
            }
            _ => Node::Leaf(mean),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.root.predict(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], config: &ForestConfig) -> Result<Self> {
        Self::fit_stream(x, y, config, 0)
    }

    fn fit_stream(x: &[Vec<f64>], y: &[f64], config: &ForestConfig, stream: u64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::EmptyInput("forest training set"));
        }
        if config.trees == 0 {
            return Err(Error::Invalid("forest needs at least one tree".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let n = x.len();
        let trees = (0..config.trees)
            .map(|_| {
                let rows: Vec<usize> = if config.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                RegressionTree::fit(x, y, &rows, config, &mut rng)
            })
            .collect();
        Ok(RandomForest { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// One forest per weekday over the training stations' features.
pub fn forest_baseline(
    train: &[LabeledStation],
    queries: &[Vec<f64>],
    config: &ForestConfig,
) -> Result<Vec<[f64; DAYS_PER_WEEK]>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("forest training set"));
    }
    let x: Vec<Vec<f64>> = train.iter().map(|t| t.features.clone()).collect();
    let forests = (0..DAYS_PER_WEEK)
        .map(|w| {
            let y: Vec<f64> = train.iter().map(|t| t.expected[w]).collect();
            RandomForest::fit_stream(&x, &y, config, w as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(queries
        .iter()
        .map(|q| std::array::from_fn(|w| forests[w].predict(q)))
        .collect())
}
