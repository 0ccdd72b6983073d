use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeZone};
use serde::Deserialize;

use super::{
    DayConditions, Dataset, Order, Poi, RejectionReport, RoadRecord, Station, WeatherCalendar,
    WeatherCategory, NEIGHBORHOOD_RADIUS_KM,
};
use crate::error::{Error, Result};
use crate::geo::haversine_km;

pub const STATIONS_FILE: &str = "stations.csv";
pub const ORDERS_FILE: &str = "orders.csv";
pub const POI_FILE: &str = "poi.csv";
pub const ROAD_FILE: &str = "road_features.csv";
pub const WEATHER_FILE: &str = "weather.csv";

#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub stations: PathBuf,
    pub orders: PathBuf,
    pub poi: PathBuf,
    pub road_features: PathBuf,
    pub weather: PathBuf,
}

impl DatasetPaths {
    /// The conventional file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DatasetPaths {
            stations: dir.join(STATIONS_FILE),
            orders: dir.join(ORDERS_FILE),
            poi: dir.join(POI_FILE),
            road_features: dir.join(ROAD_FILE),
            weather: dir.join(WEATHER_FILE),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Local time zone used to assign orders to days.
    pub utc_offset: FixedOffset,
    pub radius_km: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            utc_offset: FixedOffset::east_opt(8 * 3600).expect("valid offset"),
            radius_km: NEIGHBORHOOD_RADIUS_KM,
        }
    }
}

#[derive(Deserialize)]
struct StationRow {
    id: String,
    lat: f64,
    lon: f64,
    docks: u32,
    deployed_on: String,
    closed_on: String,
}

#[derive(Deserialize)]
struct OrderRow {
    order_id: String,
    pickup_station: String,
    return_station: String,
    start_ts: String,
    end_ts: String,
}

#[derive(Deserialize)]
struct PoiRow {
    lat: f64,
    lon: f64,
    category: String,
}

#[derive(Deserialize)]
struct RoadRow {
    station_id: String,
    seg_length_km: f64,
    junction_count: f64,
    mean_degree: f64,
    mean_centrality: f64,
}

#[derive(Deserialize)]
struct WeatherRow {
    date: String,
    category: String,
    holiday: u8,
}

/// Reads every row of a headed CSV file, handing each deserialized row and
/// its line number to `f`.
fn read_rows<R, F>(path: &Path, mut f: F) -> Result<()>
where
    R: for<'de> Deserialize<'de>,
    F: FnMut(R, u64) -> Result<()>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_err(path, 1, "missing header row"));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: R = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        f(row, line)?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date `{s}`: {e}"))
}

/// RFC 3339 timestamps keep their own offset; naive timestamps are taken as
/// local time at `offset`.
fn parse_timestamp(s: &str, offset: FixedOffset) -> std::result::Result<DateTime<FixedOffset>, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return offset
                .from_local_datetime(&naive)
                .single()
                .ok_or_else(|| format!("ambiguous local time `{s}`"));
        }
    }
    Err(format!("bad timestamp `{s}`"))
}

pub fn load_dataset(paths: &DatasetPaths, opts: &LoadOptions) -> Result<Dataset> {
    let mut stations = Vec::new();
    let mut seen = HashSet::new();
    read_rows(&paths.stations, |r: StationRow, line| {
        let bad = |m: String| parse_err(&paths.stations, line, m);
        let closed_on = match r.closed_on.trim() {
            "" => None,
            s => Some(parse_date(s).map_err(bad)?),
        };
        let st = Station {
            deployed_on: parse_date(&r.deployed_on).map_err(bad)?,
            id: r.id,
            lat: r.lat,
            lon: r.lon,
            docks: r.docks,
            closed_on,
            poi_distribution: Vec::new(),
            road_features: None,
        };
        st.validate().map_err(|e| bad(e.to_string()))?;
        if !seen.insert(st.id.clone()) {
            return Err(bad(format!("duplicate station id `{}`", st.id)));
        }
        stations.push(st);
        Ok(())
    })?;

    let mut weather_entries = Vec::new();
    read_rows(&paths.weather, |r: WeatherRow, line| {
        let bad = |m: String| parse_err(&paths.weather, line, m);
        let date = parse_date(&r.date).map_err(bad)?;
        let weather: WeatherCategory = r.category.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
        let holiday = match r.holiday {
            0 => false,
            1 => true,
            h => return Err(bad(format!("holiday must be 0 or 1, got {h}"))),
        };
        weather_entries.push((date, DayConditions { weather, holiday }));
        Ok(())
    })?;
    let weather = WeatherCalendar::from_entries(weather_entries)
        .map_err(|e| parse_err(&paths.weather, 0, e.to_string()))?;

    let mut pois = Vec::new();
    read_rows(&paths.poi, |r: PoiRow, line| {
        if !(-90.0..=90.0).contains(&r.lat) || !(-180.0..=180.0).contains(&r.lon) {
            return Err(parse_err(&paths.poi, line, "coordinates out of range"));
        }
        pois.push(Poi {
            lat: r.lat,
            lon: r.lon,
            category: r.category,
        });
        Ok(())
    })?;
    let categories: Vec<String> = pois
        .iter()
        .map(|p| p.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let index: HashMap<String, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();

    let mut roads = Vec::new();
    read_rows(&paths.road_features, |r: RoadRow, line| {
        let bad = |m: String| parse_err(&paths.road_features, line, m);
        let Some(&i) = index.get(&r.station_id) else {
            return Err(bad(format!("unknown station `{}`", r.station_id)));
        };
        let rec = RoadRecord {
            station_id: r.station_id,
            seg_length_km: r.seg_length_km,
            junction_count: r.junction_count,
            mean_degree: r.mean_degree,
            mean_centrality: r.mean_centrality,
        };
        let feats = rec.features();
        if feats.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad("road features must be finite and non-negative".into()));
        }
        if stations[i].road_features.replace(feats).is_some() {
            return Err(bad(format!("duplicate road features for `{}`", rec.station_id)));
        }
        roads.push(rec);
        Ok(())
    })?;

    for st in &mut stations {
        st.poi_distribution = poi_distribution(st.location(), &pois, &categories, opts.radius_km);
    }

    let span = weather.span();
    let mut orders = Vec::new();
    let mut rejections = RejectionReport::default();
    read_rows(&paths.orders, |r: OrderRow, line| {
        let bad = |m: String| parse_err(&paths.orders, line, m);
        let start = parse_timestamp(&r.start_ts, opts.utc_offset).map_err(bad)?;
        let end = parse_timestamp(&r.end_ts, opts.utc_offset).map_err(bad)?;
        if end < start {
            return Err(bad(format!("order {} ends before it starts", r.order_id)));
        }
        let reason = match (index.get(&r.pickup_station), index.get(&r.return_station)) {
            (None, _) => Some(&mut rejections.unknown_pickup),
            (_, None) => Some(&mut rejections.unknown_return),
            (Some(&p), Some(_)) => {
                let day = start.with_timezone(&opts.utc_offset).date_naive();
                if stations[p].is_alive(day) && span.contains(day) {
                    None
                } else {
                    Some(&mut rejections.outside_service)
                }
            }
        };
        match reason {
            Some(counter) => {
                *counter += 1;
                if rejections.sample_ids.len() < 10 {
                    rejections.sample_ids.push(r.order_id);
                }
            }
            None => orders.push(Order {
                id: r.order_id,
                pickup_station: r.pickup_station,
                return_station: r.return_station,
                start,
                end,
            }),
        }
        Ok(())
    })?;

    Ok(Dataset {
        stations,
        orders,
        pois,
        roads,
        weather,
        categories,
        rejections,
        utc_offset: opts.utc_offset,
    })
}

/// Category shares of the POIs within `radius_km`; all zero if none.
pub(crate) fn poi_distribution(
    at: (f64, f64),
    pois: &[Poi],
    categories: &[String],
    radius_km: f64,
) -> Vec<f64> {
    let mut counts = vec![0.0; categories.len()];
    let mut total = 0.0;
    for p in pois {
        if haversine_km(at, (p.lat, p.lon)) <= radius_km {
            if let Ok(k) = categories.binary_search(&p.category) {
                counts[k] += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes the five input files into `dir` in the same schemas `load_dataset`
/// reads. Accepted orders only.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);

    let p = &paths.stations;
    let mut w = writer(p)?;
    w.write_record(["id", "lat", "lon", "docks", "deployed_on", "closed_on"])
        .map_err(|e| csv_err(p, e))?;
    for s in &ds.stations {
        w.write_record([
            s.id.clone(),
            s.lat.to_string(),
            s.lon.to_string(),
            s.docks.to_string(),
            s.deployed_on.to_string(),
            s.closed_on.map(|d| d.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &paths.orders;
    let mut w = writer(p)?;
    w.write_record(["order_id", "pickup_station", "return_station", "start_ts", "end_ts"])
        .map_err(|e| csv_err(p, e))?;
    for o in &ds.orders {
        w.write_record([
            o.id.as_str(),
            &o.pickup_station,
            &o.return_station,
            &o.start.to_rfc3339(),
            &o.end.to_rfc3339(),
        ])
        .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &paths.poi;
    let mut w = writer(p)?;
    w.write_record(["lat", "lon", "category"]).map_err(|e| csv_err(p, e))?;
    for poi in &ds.pois {
        w.write_record([poi.lat.to_string(), poi.lon.to_string(), poi.category.clone()])
            .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &paths.road_features;
    let mut w = writer(p)?;
    w.write_record([
        "station_id",
        "seg_length_km",
        "junction_count",
        "mean_degree",
        "mean_centrality",
    ])
    .map_err(|e| csv_err(p, e))?;
    for r in &ds.roads {
        w.write_record([
            r.station_id.clone(),
            r.seg_length_km.to_string(),
            r.junction_count.to_string(),
            r.mean_degree.to_string(),
            r.mean_centrality.to_string(),
        ])
        .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &paths.weather;
    let mut w = writer(p)?;
    w.write_record(["date", "category", "holiday"]).map_err(|e| csv_err(p, e))?;
    for (date, c) in ds.weather.iter() {
        w.write_record([
            date.to_string(),
            c.weather.token().to_string(),
            u8::from(c.holiday).to_string(),
        ])
        .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;
    Ok(())
}
