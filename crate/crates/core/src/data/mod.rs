//! Station, order, POI, road and weather records, and the demand series
//! derived from them.

mod demand;
mod io;

pub use demand::{daily_demand, expected_demand, DateWindow, DemandSeries, DemandTable, ExpectedDemand};
pub use io::{export_dataset, load_dataset, DatasetPaths, LoadOptions};
pub(crate) use io::poi_distribution;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate};

use crate::error::{Error, Result};

/// Radius for POI counting and local road features.
pub const NEIGHBORHOOD_RADIUS_KM: f64 = 1.0;
/// segment density, junction count, mean junction degree, mean centrality
pub const ROAD_FEATURES: usize = 4;
pub const DAYS_PER_WEEK: usize = 7;

/// Monday = 0 … Sunday = 6.
pub fn weekday_index(date: NaiveDate) -> usize {
    date.weekday().num_days_from_monday() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub docks: u32,
    pub deployed_on: NaiveDate,
    /// First day the station is no longer in service.
    pub closed_on: Option<NaiveDate>,
    /// Share of each POI category within the neighborhood radius; all zero
    /// when no POI is nearby.
    pub poi_distribution: Vec<f64>,
    pub road_features: Option<[f64; ROAD_FEATURES]>,
}

impl Station {
    pub fn location(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }

    /// `deployed_on <= date < closed_on`
    pub fn is_alive(&self, date: NaiveDate) -> bool {
        self.deployed_on <= date && self.closed_on.is_none_or(|c| date < c)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Invalid(format!(
                "station {}: coordinates ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        if self.docks == 0 {
            return Err(Error::Invalid(format!("station {}: zero docks", self.id)));
        }
        if let Some(c) = self.closed_on {
            if c <= self.deployed_on {
                return Err(Error::Invalid(format!(
                    "station {}: closed_on {c} not after deployed_on {}",
                    self.id, self.deployed_on
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Order {
    pub id: String,
    pub pickup_station: String,
    pub return_station: String,
    pub start: DateTime<FixedOffset>,
    pub end: DateTime<FixedOffset>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Poi {
    pub lat: f64,
    pub lon: f64,
    pub category: String,
}

/// Precomputed local road-network statistics for one station.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadRecord {
    pub station_id: String,
    pub seg_length_km: f64,
    pub junction_count: f64,
    pub mean_degree: f64,
    pub mean_centrality: f64,
}

impl RoadRecord {
    /// `[segment density (km/km²), junction count, mean degree, mean centrality]`
    pub fn features(&self) -> [f64; ROAD_FEATURES] {
        let area = std::f64::consts::PI * NEIGHBORHOOD_RADIUS_KM * NEIGHBORHOOD_RADIUS_KM;
        [
            self.seg_length_km / area,
            self.junction_count,
            self.mean_degree,
            self.mean_centrality,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherCategory {
    Sunny,
    OvercastFoggy,
    DrizzleLightSnow,
    HeavyRainSnow,
}

impl WeatherCategory {
    pub const ALL: [WeatherCategory; 4] = [
        WeatherCategory::Sunny,
        WeatherCategory::OvercastFoggy,
        WeatherCategory::DrizzleLightSnow,
        WeatherCategory::HeavyRainSnow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            WeatherCategory::Sunny => "sunny",
            WeatherCategory::OvercastFoggy => "overcast_foggy",
            WeatherCategory::DrizzleLightSnow => "drizzle_lightsnow",
            WeatherCategory::HeavyRainSnow => "heavy_rain_snow",
        }
    }
}

impl fmt::Display for WeatherCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for WeatherCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.token() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown weather category `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DayConditions {
    pub weather: WeatherCategory,
    pub holiday: bool,
}

/// Contiguous daily weather and holiday record covering the dataset span.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherCalendar {
    start: NaiveDate,
    days: Vec<DayConditions>,
}

impl WeatherCalendar {
    /// Builds a calendar from unordered entries. Every date between the first
    /// and last must appear exactly once.
    pub fn from_entries(entries: Vec<(NaiveDate, DayConditions)>) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by_key(|(d, _)| *d);
        let Some(&(start, _)) = entries.first() else {
            return Err(Error::Invalid("weather calendar is empty".into()));
        };
        let mut days = Vec::with_capacity(entries.len());
        for (i, (date, cond)) in entries.into_iter().enumerate() {
            let expected = start + chrono::Days::new(i as u64);
            if date != expected {
                return Err(Error::Invalid(if date < expected {
                    format!("weather calendar lists {date} more than once")
                } else {
                    format!("weather calendar is missing {expected}")
                }));
            }
            days.push(cond);
        }
        Ok(WeatherCalendar { start, days })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    /// Last covered date (inclusive).
    pub fn end(&self) -> NaiveDate {
        self.start + chrono::Days::new(self.days.len() as u64 - 1)
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn span(&self) -> DateWindow {
        DateWindow::new(self.start, self.end() + chrono::Days::new(1))
    }

    pub fn get(&self, date: NaiveDate) -> Option<DayConditions> {
        let off = (date - self.start).num_days();
        if off < 0 {
            return None;
        }
        self.days.get(off as usize).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, DayConditions)> + '_ {
        self.days
            .iter()
            .enumerate()
            .map(|(i, c)| (self.start + chrono::Days::new(i as u64), *c))
    }
}

/// Orders dropped during loading, by reason.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct RejectionReport {
    pub unknown_pickup: usize,
    pub unknown_return: usize,
    pub outside_service: usize,
    /// First few rejected order ids, for diagnostics.
    pub sample_ids: Vec<String>,
}

impl RejectionReport {
    pub fn total(&self) -> usize {
        self.unknown_pickup + self.unknown_return + self.outside_service
    }
}

/// Everything the pipeline needs from the five input files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub stations: Vec<Station>,
    pub orders: Vec<Order>,
    pub pois: Vec<Poi>,
    pub roads: Vec<RoadRecord>,
    pub weather: WeatherCalendar,
    /// Sorted distinct POI categories; defines the order of `poi_distribution`.
    pub categories: Vec<String>,
    pub rejections: RejectionReport,
    pub utc_offset: FixedOffset,
}

impl Dataset {
    pub fn station(&self, id: &str) -> Option<&Station> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn station_index(&self) -> HashMap<&str, usize> {
        self.stations
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn poi_categories(&self) -> usize {
        self.categories.len()
    }

    /// Per-station daily pickup counts over the dataset span.
    pub fn demand_table(&self) -> DemandTable {
        DemandTable::build(&self.stations, &self.orders, self.weather.span(), self.utc_offset)
    }

    pub fn alive_at(&self, date: NaiveDate) -> Vec<&Station> {
        self.stations.iter().filter(|s| s.is_alive(date)).collect()
    }
}
