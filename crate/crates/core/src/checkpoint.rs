//! Self-describing model file: a UTF-8 header of `key value` lines, then the
//! declared arrays as little-endian `f64` in header order.
//!
//! ```text
//! demandnet-checkpoint
//! version 1
//! categories ["food","school"]
//! features input=13 static=7
//! model {"categories":2,...}
//! history_window 56
//! trained_through 2017-10-29
//! array param lstm.w_x 13 128
//! ...
//! array aux similarity 2 2
//! checksum 5c1d2e3f4a5b6c7d
//! payload
//! <bytes>
//! ```
//!
//! `checksum` is the CRC-64/XZ of the payload bytes.

use std::path::Path;

use chrono::NaiveDate;
use crc::{Crc, CRC_64_XZ};

use crate::data::ROAD_FEATURES;
use crate::error::{Error, Result};
use crate::graph::CategorySimilarity;
use crate::model::{DemandModel, ModelConfig};
use crate::scalar::Scalar;
use crate::temporal::{StaticFeatureScaler, INPUT_SIZE};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "demandnet-checkpoint";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// A trained model together with everything needed to apply it to new
/// snapshots of the same dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub model: DemandModel<T>,
    /// POI category names, in feature order.
    pub categories: Vec<String>,
    pub scaler: StaticFeatureScaler,
    pub similarity: CategorySimilarity<T>,
    pub history_window: usize,
    /// Latest date whose demand training could have read.
    pub trained_through: Option<NaiveDate>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> ModelCheckpoint<T> {
    /// Fails when the dataset's POI categories differ from the model's.
    pub fn check_categories(&self, categories: &[String]) -> Result<()> {
        if categories.len() != self.categories.len() {
            return Err(bad(format!(
                "model expects {} POI categories, dataset has {}",
                self.categories.len(),
                categories.len()
            )));
        }
        if categories != self.categories.as_slice() {
            return Err(bad(format!(
                "POI categories differ: model {:?}, dataset {:?}",
                self.categories, categories
            )));
        }
        Ok(())
    }

    fn aux_arrays(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let p = self.similarity.categories();
        vec![
            ("scaler.docks_max", vec![1], vec![self.scaler.docks_max]),
            ("scaler.road_min", vec![ROAD_FEATURES], self.scaler.road_min.to_vec()),
            ("scaler.road_max", vec![ROAD_FEATURES], self.scaler.road_max.to_vec()),
            (
                "similarity",
                vec![p, p],
                self.similarity.matrix().data().iter().map(|v| v.as_f64()).collect(),
            ),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut header = format!("{MAGIC}\nversion {FORMAT_VERSION}\n");
        header += &format!(
            "categories {}\n",
            serde_json::to_string(&self.categories).map_err(|e| bad(e.to_string()))?
        );
        header += &format!(
            "features input={INPUT_SIZE} static={}\n",
            self.model.config.static_len()
        );
        header += &format!(
            "model {}\n",
            serde_json::to_string(&self.model.config).map_err(|e| bad(e.to_string()))?
        );
        header += &format!("history_window {}\n", self.history_window);
        match self.trained_through {
            Some(d) => header += &format!("trained_through {d}\n"),
            None => header += "trained_through none\n",
        }
        let dims = |shape: &[usize]| shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ");
        for (name, t) in self.model.params.iter() {
            header += &format!("array param {name} {}\n", dims(t.shape()));
            for v in t.data() {
                payload.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        for (name, shape, data) in self.aux_arrays() {
            header += &format!("array aux {name} {}\n", dims(&shape));
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header += &format!("checksum {:016x}\npayload\n", CRC64.checksum(&payload));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const END: &[u8] = b"\npayload\n";
        let split = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| bad("no payload marker"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[split + END.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a demandnet checkpoint"));
        }

        let mut version = None;
        let mut categories: Option<Vec<String>> = None;
        let mut features = None;
        let mut config: Option<ModelConfig> = None;
        let mut window = None;
        let mut through = None;
        let mut arrays: Vec<(bool, String, Vec<usize>)> = Vec::new();
        let mut checksum = None;
        for line in lines {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            match key {
                "version" => version = rest.parse::<u32>().ok(),
                "categories" => categories = serde_json::from_str(rest).ok(),
                "features" => features = Some(rest.to_owned()),
                "model" => config = serde_json::from_str(rest).ok(),
                "history_window" => window = rest.parse::<usize>().ok(),
                "trained_through" => {
                    through = Some(if rest == "none" {
                        None
                    } else {
                        Some(rest.parse::<NaiveDate>().map_err(|e| bad(e.to_string()))?)
                    })
                }
                "array" => {
                    let mut parts = rest.split(' ');
                    let kind = parts.next().unwrap_or_default();
                    let name = parts.next().ok_or_else(|| bad("array without name"))?;
                    let shape = parts
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension `{d}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    arrays.push((kind == "param", name.to_owned(), shape));
                }
                "checksum" => checksum = u64::from_str_radix(rest, 16).ok(),
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        match version {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(bad(format!("unsupported format version {v}"))),
            None => return Err(bad("missing version")),
        }
        let categories = categories.ok_or_else(|| bad("missing categories"))?;
        let config = config.ok_or_else(|| bad("missing model config"))?;
        let history_window = window.ok_or_else(|| bad("missing history_window"))?;
        let trained_through = through.ok_or_else(|| bad("missing trained_through"))?;
        let want = format!("input={INPUT_SIZE} static={}", config.static_len());
        if features.as_deref() != Some(want.as_str()) {
            return Err(bad(format!("feature sizes {features:?} do not match {want}")));
        }
        if config.categories != categories.len() {
            return Err(bad("model category count disagrees with category list"));
        }
        let expected = checksum.ok_or_else(|| bad("missing checksum"))?;
        if CRC64.checksum(payload) != expected {
            return Err(bad("payload checksum mismatch; file is corrupt"));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let declared: usize = arrays.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        if payload.len() != declared * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, header declares {}",
                payload.len(),
                declared * 8
            )));
        }
        let mut params = ParamSet::new();
        let mut aux: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (is_param, name, shape) in arrays {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if is_param {
                params.push(name, Tensor::new(shape, data.into_iter().map(T::lit).collect())?);
            } else {
                aux.push((name, shape, data));
            }
        }
        let take_aux = |name: &str| {
            aux.iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, d)| (s.clone(), d.clone()))
                .ok_or_else(|| bad(format!("missing array {name}")))
        };
        let road = |name: &str| -> Result<[f64; ROAD_FEATURES]> {
            take_aux(name)?
                .1
                .try_into()
                .map_err(|_| bad(format!("{name} must hold {ROAD_FEATURES} values")))
        };
        let scaler = StaticFeatureScaler {
            docks_max: take_aux("scaler.docks_max")?.1.first().copied().ok_or_else(|| bad("empty docks scale"))?,
            road_min: road("scaler.road_min")?,
            road_max: road("scaler.road_max")?,
        };
        let (sim_shape, sim) = take_aux("similarity")?;
        let similarity =
            CategorySimilarity::new(Tensor::new(sim_shape, sim.into_iter().map(T::lit).collect())?)?;
        Ok(ModelCheckpoint {
            model: DemandModel::from_params(config, params)?,
            categories,
            scaler,
            similarity,
            history_window,
            trained_through,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint<f64> {
        let mut config = ModelConfig::new(2);
        config.hidden = 3;
        config.gcn_width = 4;
        config.head_hidden = 2;
        ModelCheckpoint {
            model: DemandModel::init(config, 11).unwrap(),
            categories: vec!["food".into(), "school, primary".into()],
            scaler: StaticFeatureScaler {
                docks_max: 30.0,
                road_min: [0.0, 1.0, 2.0, 0.001],
                road_max: [5.0, 40.0, 4.5, 0.2],
            },
            similarity: CategorySimilarity::identity(2),
            history_window: 56,
            trained_through: NaiveDate::from_ymd_opt(2017, 10, 29),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = ModelCheckpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        let err = ModelCheckpoint::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = sample().to_bytes().unwrap();
        assert!(ModelCheckpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(ModelCheckpoint::<f64>::from_bytes(b"hello").is_err());
    }

    #[test]
    fn category_mismatch_fails_fast() {
        let ck = sample();
        assert!(ck.check_categories(&ck.categories.clone()).is_ok());
        let err = ck.check_categories(&["food".to_string()]).unwrap_err();
        assert!(err.to_string().contains("2 POI categories"));
        assert!(ck.check_categories(&["food".into(), "park".into()]).is_err());
    }

    #[test]
    fn f32_checkpoint_loads() {
        let bytes = sample().to_bytes().unwrap();
        let narrow = ModelCheckpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(narrow.model.params.len(), sample().model.params.len());
    }
}
