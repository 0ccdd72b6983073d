//! Inter-station adjacency matrices and the normalized graph operator applied
//! before convolution.
//!
//! All three adjacencies are dense, symmetric, non-negative and carry a unit
//! diagonal. Each off-diagonal pair is computed once and mirrored, so the
//! matrices are bitwise symmetric.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use crate::data::{Station, ROAD_FEATURES};
use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Distances below this are clamped before taking the reciprocal.
pub const DISTANCE_FLOOR_KM: f64 = 0.01;

/// Reciprocal haversine distance, clamped at [`DISTANCE_FLOOR_KM`], with a
/// unit diagonal.
pub fn distance_graph<T: Scalar>(stations: &[&Station]) -> Tensor<T> {
    let n = stations.len().max(1);
    let mut a = Tensor::identity(n);
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            let d = haversine_km(stations[i].location(), stations[j].location());
            let w = T::lit(1.0 / d.max(DISTANCE_FLOOR_KM));
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    a
}

/// Category-to-category similarity used by the soft cosine.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySimilarity<T> {
    matrix: Tensor<T>,
}

impl<T: Scalar> CategorySimilarity<T> {
    pub fn identity(categories: usize) -> Self {
        CategorySimilarity {
            matrix: Tensor::identity(categories.max(1)),
        }
    }

    /// Validates symmetry, unit diagonal and positive semi-definiteness via
    /// diagonal dominance (Gershgorin).
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        let p = matrix.rows();
        if !matrix.is_matrix() || matrix.cols() != p {
            return Err(Error::Invalid(format!(
                "category similarity must be square, got {:?}",
                matrix.shape()
            )));
        }
        let tol = T::lit(1e-12);
        for i in 0..p {
            if (matrix.get(i, i) - T::one()).abs() > tol {
                return Err(Error::Invalid(format!(
                    "category similarity diagonal entry {i} is not 1"
                )));
            }
            let mut off = T::zero();
            for j in 0..p {
                if (matrix.get(i, j) - matrix.get(j, i)).abs() > tol {
                    return Err(Error::Asymmetric { row: i, col: j });
                }
                if i != j {
                    off += matrix.get(i, j).abs();
                }
            }
            if off > T::one() + tol {
                return Err(Error::Invalid(format!(
                    "category similarity row {i} fails the Gershgorin PSD check"
                )));
            }
        }
        Ok(CategorySimilarity { matrix })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn categories(&self) -> usize {
        self.matrix.rows()
    }

    /// Reads a P×P matrix whose header row and first column carry category
    /// names, reordered to match `categories`.
    pub fn load_csv(path: &Path, categories: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let parse = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| parse(1, e.to_string()))?
            .iter()
            .skip(1)
            .map(str::to_owned)
            .collect();
        let p = categories.len();
        let position = |name: &str, line: u64| {
            categories
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| parse(line, format!("unknown category `{name}`")))
        };
        if header.len() != p {
            return Err(parse(1, format!("expected {p} categories, found {}", header.len())));
        }
        let cols: Vec<usize> = header
            .iter()
            .map(|h| position(h, 1))
            .collect::<Result<_>>()?;
        let mut m = Tensor::<T>::zeros(&[p, p]);
        let mut seen = vec![false; p];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse(0, e.to_string()))?;
            let line = rec.position().map_or(0, |pos| pos.line());
            let row = position(rec.get(0).unwrap_or(""), line)?;
            if std::mem::replace(&mut seen[row], true) {
                return Err(parse(line, "duplicate row".into()));
            }
            if rec.len() != p + 1 {
                return Err(parse(line, format!("expected {} fields", p + 1)));
            }
            for (k, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse(line, format!("bad number `{field}`")))?;
                m.set(row, cols[k], T::lit(v));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(parse(0, "matrix is missing rows".into()));
        }
        Self::new(m)
    }
}

/// `Σᵢⱼ Sᵢⱼuᵢvⱼ / (√(uᵀSu) · √(vᵀSv))`, clamped to `[0, 1]`. Zero when either
/// vector carries no mass.
pub fn soft_cosine<T: Scalar>(u: &[T], v: &[T], s: &Tensor<T>) -> Result<T> {
    let p = u.len();
    if v.len() != p || s.rows() != p || s.cols() != p {
        return Err(Error::dim("soft_cosine", &[u.len(), v.len()], s.shape()));
    }
    let quad = |a: &[T], b: &[T]| -> T {
        let mut acc = T::zero();
        for i in 0..p {
            let row = s.row(i);
            let mut inner = T::zero();
            for j in 0..p {
                inner += row[j] * b[j];
            }
            acc += a[i] * inner;
        }
        acc
    };
    let uu = quad(u, u);
    let vv = quad(v, v);
    if uu <= T::zero() || vv <= T::zero() {
        return Ok(T::zero());
    }
    let sim = quad(u, v) / (uu.sqrt() * vv.sqrt());
    Ok(sim.max(T::zero()).min(T::one()))
}

/// Pairwise soft cosine over POI distributions.
pub fn functional_graph<T: Scalar>(
    stations: &[&Station],
    sim: &CategorySimilarity<T>,
) -> Result<Tensor<T>> {
    let n = stations.len().max(1);
    // without POI categories there is no functional evidence: self-loops only
    if stations.iter().all(|s| s.poi_distribution.is_empty()) {
        return Ok(Tensor::identity(n));
    }
    let vecs: Vec<Vec<T>> = stations
        .iter()
        .map(|s| s.poi_distribution.iter().map(|&x| T::lit(x)).collect())
        .collect();
    let mut a = Tensor::identity(n);
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            let w = soft_cosine(&vecs[i], &vecs[j], sim.matrix())?;
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    Ok(a)
}

/// Road features min-max scaled per component over `stations`. A component
/// with no spread maps to 0.5.
pub fn normalized_road_features(stations: &[&Station]) -> Result<Vec<[f64; ROAD_FEATURES]>> {
    let raw: Vec<[f64; ROAD_FEATURES]> = stations
        .iter()
        .map(|s| {
            s.road_features
                .ok_or_else(|| Error::MissingRoadFeatures(s.id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut lo = [f64::INFINITY; ROAD_FEATURES];
    let mut hi = [f64::NEG_INFINITY; ROAD_FEATURES];
    for r in &raw {
        for k in 0..ROAD_FEATURES {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    Ok(raw
        .iter()
        .map(|r| {
            let mut out = [0.0; ROAD_FEATURES];
            for k in 0..ROAD_FEATURES {
                out[k] = if hi[k] > lo[k] {
                    (r[k] - lo[k]) / (hi[k] - lo[k])
                } else {
                    0.5
                };
            }
            out
        })
        .collect())
}

/// Cosine similarity of min-max normalized road features.
pub fn road_graph<T: Scalar>(stations: &[&Station]) -> Result<Tensor<T>> {
    let feats = normalized_road_features(stations)?;
    let vecs: Vec<Vec<T>> = feats
        .iter()
        .map(|f| f.iter().map(|&x| T::lit(x)).collect())
        .collect();
    let eye = Tensor::identity(ROAD_FEATURES);
    let n = stations.len().max(1);
    let mut a = Tensor::identity(n);
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            let w = soft_cosine(&vecs[i], &vecs[j], &eye)?;
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    Ok(a)
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}` with `D = diag(row sums)`.
pub fn graph_function<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.rows();
    if !a.is_matrix() || a.cols() != n {
        return Err(Error::dim("graph_function", a.shape(), a.shape()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a.get(i, j), a.get(j, i));
            if (x - y).abs() > T::lit(1e-12) * T::one().max(x.abs()) {
                return Err(Error::Asymmetric { row: i, col: j });
            }
        }
    }
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let d: T = a.row(i).iter().copied().sum();
            if d > T::zero() {
                Ok(T::one() / d.sqrt())
            } else {
                Err(Error::Invalid(format!("row {i} of the adjacency sums to zero")))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// The station set at a date and its three adjacencies.
#[derive(Clone, Debug)]
pub struct NetworkSnapshot<T> {
    pub as_of: NaiveDate,
    pub station_ids: Vec<String>,
    pub distance: Tensor<T>,
    pub functional: Tensor<T>,
    pub road: Tensor<T>,
}

impl<T: Scalar> NetworkSnapshot<T> {
    /// Builds the graphs over exactly `stations`, in the given order.
    pub fn build(
        as_of: NaiveDate,
        stations: &[&Station],
        sim: &CategorySimilarity<T>,
    ) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::EmptyInput("network snapshot"));
        }
        Ok(NetworkSnapshot {
            as_of,
            station_ids: stations.iter().map(|s| s.id.clone()).collect(),
            distance: distance_graph(stations),
            functional: functional_graph(stations, sim)?,
            road: road_graph(stations)?,
        })
    }

    /// Stations alive at `as_of`, in input order.
    pub fn alive(as_of: NaiveDate, stations: &[Station], sim: &CategorySimilarity<T>) -> Result<Self> {
        let alive: Vec<&Station> = stations.iter().filter(|s| s.is_alive(as_of)).collect();
        Self::build(as_of, &alive, sim)
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }

    /// `[f(A_dist), f(A_func), f(A_road)]`
    pub fn normalized(&self) -> Result<[Tensor<T>; 3]> {
        Ok([
            graph_function(&self.distance)?,
            graph_function(&self.functional)?,
            graph_function(&self.road)?,
        ])
    }

    /// Writes `distance.csv`, `functional.csv` and `road.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("distance.csv", &self.distance),
            ("functional.csv", &self.functional),
            ("road.csv", &self.road),
        ] {
            let path = dir.join(name);
            let mut out = String::from("station_id");
            for id in &self.station_ids {
                out.push(',');
                out.push_str(id);
            }
            out.push('\n');
            for (i, id) in self.station_ids.iter().enumerate() {
                out.push_str(id);
                for v in m.row(i) {
                    out.push(',');
                    out.push_str(&v.as_f64().to_string());
                }
                out.push('\n');
            }
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(out.as_bytes()))
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
