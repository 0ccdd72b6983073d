//! Synthetic expanding station networks with known demand structure.
//!
//! Station `i` on day `t` has Poisson demand with rate
//! `amplitude · base_i · dow(cluster_i, weekday(t)) · weather(w_t) · nbhd_i`,
//! where `nbhd_i` decays with the station's distance to its cluster center.
//! The layout is drawn from stream 0 of a ChaCha8 generator seeded with
//! `seed`; realization `r` (weather, holidays, counts, orders) uses stream
//! `r + 1`, so the same layout can be re-realized independently.

use std::path::Path;

use chrono::{Days, FixedOffset, NaiveDate, NaiveTime, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::Serialize;

use crate::data::{
    export_dataset, poi_distribution, weekday_index, Dataset, DayConditions, Order, Poi, RejectionReport,
    RoadRecord, Station, WeatherCalendar, WeatherCategory, DAYS_PER_WEEK, NEIGHBORHOOD_RADIUS_KM,
};
use crate::error::{Error, Result};
use crate::geo::{haversine_km, offset_km};

pub const TRUTH_FILE: &str = "scenario_truth.json";
const WEATHER_STATES: usize = 4;
const CATEGORY_NAMES: [&str; 8] = [
    "catering", "shopping", "education", "office", "residence", "leisure", "transport", "medical",
];
/// Relative spread of each cluster's weekend excess around the configured mean.
const WEEKEND_SPREAD: f64 = 0.15;
const MAX_PLACEMENT_TRIES: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Which independent realization of the layout to draw.
    pub realization: u64,
    pub initial_stations: usize,
    pub final_stations: usize,
    pub span_days: usize,
    pub start_date: NaiveDate,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub min_spacing_km: f64,
    pub categories: usize,
    pub clusters: usize,
    /// Distinct POI and road profiles; cluster `c` uses profile
    /// `c % zone_types`, so clusters sharing a profile differ only in where
    /// they are.
    pub zone_types: usize,
    /// Standard deviation of station scatter around a cluster center.
    pub cluster_spread_km: f64,
    pub pois_per_station: f64,
    /// Share of a station's POIs drawn from its cluster profile; the rest are
    /// uniform over categories.
    pub poi_purity: f64,
    /// Row-stochastic, rows and columns in weather-category order.
    pub weather_transition: [[f64; WEATHER_STATES]; WEATHER_STATES],
    pub weather_factors: [f64; WEATHER_STATES],
    pub holiday_rate: f64,
    /// Global multiplier on every rate; zero silences all demand.
    pub demand_amplitude: f64,
    pub base_mean: f64,
    /// Log-normal sigma of the per-station base rate.
    pub base_sigma: f64,
    /// Cluster base levels are drawn from `1 ± cluster_level_spread`.
    pub cluster_level_spread: f64,
    /// Mean weekend-to-weekday ratio across clusters.
    pub weekend_boost: f64,
    /// Per-day relative jitter of the weekday profile.
    pub dow_jitter: f64,
    /// Neighborhood factor far from the cluster center; 1 disables the effect.
    pub neighborhood_floor: f64,
    pub neighborhood_scale_km: f64,
    pub utc_offset_hours: i32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 42,
            realization: 0,
            initial_stations: 60,
            final_stations: 110,
            span_days: 364,
            start_date: NaiveDate::from_ymd_opt(2017, 1, 2).expect("valid date"),
            lat_min: 31.15,
            lat_max: 31.30,
            lon_min: 121.38,
            lon_max: 121.56,
            min_spacing_km: 0.25,
            categories: 6,
            clusters: 4,
            zone_types: 2,
            cluster_spread_km: 1.0,
            pois_per_station: 30.0,
            poi_purity: 1.0,
            weather_transition: [
                [0.70, 0.20, 0.08, 0.02],
                [0.35, 0.45, 0.15, 0.05],
                [0.30, 0.35, 0.25, 0.10],
                [0.25, 0.30, 0.30, 0.15],
            ],
            weather_factors: [1.0, 0.9, 0.7, 0.45],
            holiday_rate: 0.03,
            demand_amplitude: 1.0,
            base_mean: 4.0,
            base_sigma: 0.03,
            cluster_level_spread: 0.5,
            weekend_boost: 1.6,
            dow_jitter: 0.1,
            neighborhood_floor: 0.3,
            neighborhood_scale_km: 3.0,
            utc_offset_hours: 8,
        }
    }
}

fn infeasible(msg: impl Into<String>) -> Error {
    Error::InfeasibleScenario(msg.into())
}

impl ScenarioConfig {
    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Days::new(self.span_days as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_stations == 0 || self.final_stations < self.initial_stations {
            return Err(infeasible(format!(
                "need 1 <= initial_stations <= final_stations, got {} and {}",
                self.initial_stations, self.final_stations
            )));
        }
        if self.span_days < 84 {
            return Err(infeasible(format!("span_days must be >= 84, got {}", self.span_days)));
        }
        if !(self.lat_min < self.lat_max && self.lon_min < self.lon_max) {
            return Err(infeasible("empty bounding box"));
        }
        if self.categories == 0 || self.clusters == 0 || self.zone_types == 0 {
            return Err(infeasible("categories, clusters and zone_types must be >= 1"));
        }
        for (r, row) in self.weather_transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
                return Err(infeasible(format!("weather transition row {r} is not a distribution")));
            }
        }
        let non_negative = [
            self.demand_amplitude,
            self.base_mean,
            self.base_sigma,
            self.dow_jitter,
            self.holiday_rate,
            self.pois_per_station,
            self.cluster_spread_km,
            self.min_spacing_km,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || self.weather_factors.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(infeasible("rates, factors and spreads must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.cluster_level_spread) || !(0.0..1.0).contains(&self.dow_jitter) {
            return Err(infeasible("cluster_level_spread and dow_jitter must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.poi_purity) {
            return Err(infeasible("poi_purity must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.neighborhood_floor) || self.neighborhood_scale_km <= 0.0 {
            return Err(infeasible("neighborhood_floor must lie in [0, 1] and scale be > 0"));
        }
        let lowest_weekend =
            (1.0 + (self.weekend_boost - 1.0) * (1.0 - WEEKEND_SPREAD)) * (1.0 - self.dow_jitter);
        let highest_weekday = 1.0 + self.dow_jitter;
        if lowest_weekend < highest_weekday && !(self.weekend_boost == 1.0 && self.dow_jitter == 0.0) {
            return Err(infeasible(format!(
                "weekend_boost {} cannot keep every weekend factor above the weekday factors",
                self.weekend_boost
            )));
        }
        let (h, w) = self.box_size_km();
        let needed = self.final_stations as f64 * self.min_spacing_km.powi(2) * 3f64.sqrt() / 2.0;
        if needed > h * w {
            return Err(infeasible(format!(
                "{} stations at {} km spacing need {needed:.1} km², bounding box has {:.1} km²",
                self.final_stations,
                self.min_spacing_km,
                h * w
            )));
        }
        Ok(())
    }

    fn box_size_km(&self) -> (f64, f64) {
        let mid = (self.lat_min + self.lat_max) / 2.0;
        let h = haversine_km((self.lat_min, self.lon_min), (self.lat_max, self.lon_min));
        let w = haversine_km((mid, self.lon_min), (mid, self.lon_max));
        (h, w)
    }

    fn in_box(&self, (lat, lon): (f64, f64)) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    fn category_names(&self) -> Vec<String> {
        (0..self.categories)
            .map(|k| match CATEGORY_NAMES.get(k) {
                Some(n) => (*n).to_owned(),
                None => format!("category_{k}"),
            })
            .collect()
    }

    /// Stationary distribution of the weather chain (power iteration).
    pub fn weather_stationary(&self) -> [f64; WEATHER_STATES] {
        let mut pi = [1.0 / WEATHER_STATES as f64; WEATHER_STATES];
        for _ in 0..10_000 {
            let mut next = [0.0; WEATHER_STATES];
            for (i, p) in pi.iter().enumerate() {
                for (j, n) in next.iter_mut().enumerate() {
                    *n += p * self.weather_transition[i][j];
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// `E_π[weather factor]`
    pub fn mean_weather_factor(&self) -> f64 {
        self.weather_stationary()
            .iter()
            .zip(&self.weather_factors)
            .map(|(p, f)| p * f)
            .sum()
    }
}

/// Latent structure of one station.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationTruth {
    pub id: String,
    pub cluster: usize,
    pub deployed_on: NaiveDate,
    pub base: f64,
    pub center_distance_km: f64,
    pub neighborhood_factor: f64,
    /// `E[λ]` per weekday with weather at its stationary distribution.
    pub expected: [f64; DAYS_PER_WEEK],
}

/// Everything needed to compute analytic expectations, as written to
/// `scenario_truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioTruth {
    pub seed: u64,
    pub realization: u64,
    pub demand_amplitude: f64,
    pub weather_factors: [f64; WEATHER_STATES],
    pub weather_stationary: [f64; WEATHER_STATES],
    pub mean_weather_factor: f64,
    /// Weekday factors per cluster, Monday first.
    pub dow_factors: Vec<[f64; DAYS_PER_WEEK]>,
    pub cluster_centers: Vec<(f64, f64)>,
    pub stations: Vec<StationTruth>,
}

impl ScenarioTruth {
    pub fn station(&self, id: &str) -> Option<&StationTruth> {
        self.stations.iter().find(|s| s.id == id)
    }

    /// Rate on `date` given the realized weather.
    pub fn rate(&self, station: &StationTruth, date: NaiveDate, weather: WeatherCategory) -> f64 {
        self.demand_amplitude
            * station.base
            * self.dow_factors[station.cluster][weekday_index(date)]
            * self.weather_factors[weather.index()]
            * station.neighborhood_factor
    }

    /// Analytic per-weekday expected demand of `station` over the in-service
    /// days of `[window.start, window.end)`. Weekdays without such a day are
    /// reported as 0 with `false` coverage.
    pub fn ground_truth_expected(
        &self,
        station_id: &str,
        window: crate::data::DateWindow,
    ) -> Result<([f64; DAYS_PER_WEEK], [bool; DAYS_PER_WEEK])> {
        let s = self
            .station(station_id)
            .ok_or_else(|| Error::Invalid(format!("station {station_id} is not in the scenario")))?;
        let mut covered = [false; DAYS_PER_WEEK];
        for d in window.iter().filter(|d| *d >= s.deployed_on) {
            covered[weekday_index(d)] = true;
        }
        let mut values = [0.0; DAYS_PER_WEEK];
        for w in 0..DAYS_PER_WEEK {
            if covered[w] {
                values[w] = s.expected[w];
            }
        }
        Ok((values, covered))
    }
}

/// Generator output before it is written out.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub dataset: Dataset,
    pub truth: ScenarioTruth,
    /// Realized daily counts per station over the whole span (zero before
    /// deployment).
    pub counts: Vec<Vec<u32>>,
}

struct Layout {
    categories: Vec<String>,
    centers: Vec<(f64, f64)>,
    dow: Vec<[f64; DAYS_PER_WEEK]>,
    stations: Vec<Station>,
    truths: Vec<StationTruth>,
    pois: Vec<Poi>,
    roads: Vec<RoadRecord>,
}

fn unit<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-1.0..1.0)
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

fn build_layout(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let categories = config.category_names();
    let p = config.categories;
    let k = config.clusters;
    let (box_h, box_w) = config.box_size_km();
    let inset = (2.0f64).min(box_h / 4.0).min(box_w / 4.0);

    // cluster centers, kept apart so clusters stay distinguishable
    let separation = (box_h * box_w / k as f64).sqrt() * 0.6;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k);
    let origin = (config.lat_min, config.lon_min);
    let mut tries = 0;
    while centers.len() < k {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES {
            return Err(infeasible(format!("cannot separate {k} cluster centers in the bounding box")));
        }
        let c = offset_km(
            origin,
            rng.random_range(inset..box_h - inset),
            rng.random_range(inset..box_w - inset),
        );
        if centers.iter().all(|&o| haversine_km(o, c) >= separation) {
            centers.push(c);
        }
    }

    let dow: Vec<[f64; DAYS_PER_WEEK]> = (0..k)
        .map(|_| {
            let boost = 1.0 + (config.weekend_boost - 1.0) * (1.0 + WEEKEND_SPREAD * unit(rng));
            std::array::from_fn(|w| {
                let jitter = 1.0 + config.dow_jitter * unit(rng);
                if w >= 5 {
                    boost * jitter
                } else {
                    jitter
                }
            })
        })
        .collect();
    let levels: Vec<f64> = (0..k)
        .map(|_| 1.0 + config.cluster_level_spread * unit(rng))
        .collect();
    let zones = config.zone_types;
    let profiles: Vec<Vec<f64>> = (0..zones)
        .map(|_| {
            let raw: Vec<f64> = (0..p).map(|_| (2.0 * gaussian(rng, 1.0)).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    // segment length (km), junction count, mean degree, mean centrality
    let road_means: Vec<[f64; 4]> = (0..zones)
        .map(|_| {
            [
                rng.random_range(6.0..24.0),
                rng.random_range(10.0..70.0f64).round(),
                rng.random_range(2.6..4.4),
                rng.random_range(0.002..0.08),
            ]
        })
        .collect();

    // deployment days: the first `initial` on day 0, the rest increasingly
    // dense towards the end; every station observes at least 8 days
    let extra = config.final_stations - config.initial_stations;
    let last_day = (config.span_days - 8) as f64;
    let mut days: Vec<u64> = vec![0; config.initial_stations];
    days.extend((0..extra).map(|j| {
        let q = (j as f64 + 0.5) / extra as f64;
        (1.0 + (last_day - 1.0) * q.sqrt()).floor() as u64
    }));

    let mut stations = Vec::with_capacity(config.final_stations);
    let mut truths = Vec::with_capacity(config.final_stations);
    let mut pois = Vec::new();
    let mut roads = Vec::with_capacity(config.final_stations);
    let mut placed: Vec<(f64, f64)> = Vec::new();
    for (i, &day) in days.iter().enumerate() {
        let cluster = rng.random_range(0..k);
        let center = centers[cluster];
        let mut tries = 0;
        let loc = loop {
            tries += 1;
            if tries > MAX_PLACEMENT_TRIES {
                return Err(infeasible(format!(
                    "cannot place station {} at {} km spacing",
                    i + 1,
                    config.min_spacing_km
                )));
            }
            let c = offset_km(
                center,
                gaussian(rng, config.cluster_spread_km),
                gaussian(rng, config.cluster_spread_km),
            );
            if config.in_box(c) && placed.iter().all(|&o| haversine_km(o, c) >= config.min_spacing_km) {
                break c;
            }
        };
        placed.push(loc);
        let id = format!("S{:04}", i + 1);
        let distance = haversine_km(loc, center);
        let nbhd = config.neighborhood_floor
            + (1.0 - config.neighborhood_floor)
                * (-(distance * distance) / (2.0 * config.neighborhood_scale_km.powi(2))).exp();
        // docks follow the station's own rate, not its cluster's level
        let own = gaussian(rng, config.base_sigma).exp();
        let base = config.base_mean * levels[cluster] * own;
        let docks = (12.0 * own + gaussian(rng, 2.0))
            .round()
            .clamp(5.0, 40.0) as u32;

        let n_poi = if config.pois_per_station > 0.0 {
            Poisson::new(config.pois_per_station).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        for _ in 0..n_poi {
            let r = 0.9 * rng.random_range(0.0..1.0f64).sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let at = offset_km(loc, r * theta.sin(), r * theta.cos());
            let cat = if rng.random_bool(1.0 - config.poi_purity) {
                rng.random_range(0..p)
            } else {
                let mut u = rng.random_range(0.0..1.0);
                let mut chosen = p - 1;
                for (c, w) in profiles[cluster % zones].iter().enumerate() {
                    if u < *w {
                        chosen = c;
                        break;
                    }
                    u -= w;
                }
                chosen
            };
            pois.push(Poi {
                lat: at.0,
                lon: at.1,
                category: categories[cat].clone(),
            });
        }

        let m = road_means[cluster % zones];
        roads.push(RoadRecord {
            station_id: id.clone(),
            seg_length_km: (m[0] * (1.0 + 0.1 * unit(rng))).max(0.1),
            junction_count: (m[1] * (1.0 + 0.1 * unit(rng))).round().max(1.0),
            mean_degree: m[2] * (1.0 + 0.05 * unit(rng)),
            mean_centrality: m[3] * (1.0 + 0.2 * unit(rng)),
        });
        let deployed_on = config.start_date + Days::new(day);
        stations.push(Station {
            id: id.clone(),
            lat: loc.0,
            lon: loc.1,
            docks,
            deployed_on,
            closed_on: None,
            poi_distribution: Vec::new(),
            road_features: None,
        });
        let mean_weather = config.mean_weather_factor();
        let expected = std::array::from_fn(|w| {
            config.demand_amplitude * base * dow[cluster][w] * mean_weather * nbhd
        });
        truths.push(StationTruth {
            id,
            cluster,
            deployed_on,
            base,
            center_distance_km: distance,
            neighborhood_factor: nbhd,
            expected,
        });
    }
    Ok(Layout {
        categories,
        centers,
        dow,
        stations,
        truths,
        pois,
        roads,
    })
}

fn sample_poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        0
    } else {
        Poisson::new(lambda).expect("positive finite rate").sample(rng) as u32
    }
}

fn sample_weather<R: Rng>(rng: &mut R, dist: &[f64; WEATHER_STATES]) -> usize {
    let mut u = rng.random_range(0.0..1.0);
    for (i, p) in dist.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    WEATHER_STATES - 1
}

/// Draws the layout and one realization of it.
pub fn simulate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = build_layout(config, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.realization + 1);

    let pi = config.weather_stationary();
    let mut state = sample_weather(&mut rng, &pi);
    let mut calendar = Vec::with_capacity(config.span_days);
    for day in 0..config.span_days {
        if day > 0 {
            state = sample_weather(&mut rng, &config.weather_transition[state]);
        }
        let holiday = rng.random_bool(config.holiday_rate.min(1.0));
        calendar.push((
            config.start_date + Days::new(day as u64),
            DayConditions {
                weather: WeatherCategory::from_index(state).expect("state below 4"),
                holiday,
            },
        ));
    }

    let truth = ScenarioTruth {
        seed: config.seed,
        realization: config.realization,
        demand_amplitude: config.demand_amplitude,
        weather_factors: config.weather_factors,
        weather_stationary: pi,
        mean_weather_factor: config.mean_weather_factor(),
        dow_factors: layout.dow.clone(),
        cluster_centers: layout.centers.clone(),
        stations: layout.truths.clone(),
    };

    let offset = FixedOffset::east_opt(config.utc_offset_hours * 3600)
        .ok_or_else(|| infeasible(format!("bad utc offset {}", config.utc_offset_hours)))?;
    let mut counts = vec![vec![0u32; config.span_days]; layout.stations.len()];
    let mut orders = Vec::new();
    for (day, (date, cond)) in calendar.iter().enumerate() {
        let alive: Vec<usize> = (0..layout.stations.len())
            .filter(|&i| layout.stations[i].deployed_on <= *date)
            .collect();
        for &i in &alive {
            let lambda = truth.rate(&truth.stations[i], *date, cond.weather);
            let k = sample_poisson(&mut rng, lambda);
            counts[i][day] = k;
            for _ in 0..k {
                let start_s = rng.random_range(6 * 3600..23 * 3600);
                let ride_s = rng.random_range(5 * 60..60 * 60);
                let dest = alive[rng.random_range(0..alive.len())];
                let t0 = NaiveTime::from_num_seconds_from_midnight_opt(start_s, 0).expect("in day");
                let start = offset
                    .from_local_datetime(&date.and_time(t0))
                    .single()
                    .expect("fixed offsets are unambiguous");
                orders.push(Order {
                    id: format!("o{:07}", orders.len() + 1),
                    pickup_station: layout.stations[i].id.clone(),
                    return_station: layout.stations[dest].id.clone(),
                    start,
                    end: start + chrono::Duration::seconds(i64::from(ride_s)),
                });
            }
        }
    }

    // loaded datasets order categories by name
    let mut categories = layout.categories;
    categories.sort();
    let mut stations = layout.stations;
    for (s, r) in stations.iter_mut().zip(&layout.roads) {
        s.poi_distribution =
            poi_distribution(s.location(), &layout.pois, &categories, NEIGHBORHOOD_RADIUS_KM);
        s.road_features = Some(r.features());
    }

    let dataset = Dataset {
        stations,
        orders,
        pois: layout.pois,
        roads: layout.roads,
        weather: WeatherCalendar::from_entries(calendar)?,
        categories,
        rejections: RejectionReport::default(),
        utc_offset: offset,
    };
    Ok(Scenario {
        dataset,
        truth,
        counts,
    })
}

/// Writes the five input CSVs and `scenario_truth.json` into `dir`.
pub fn generate(config: &ScenarioConfig, dir: &Path) -> Result<Scenario> {
    let scenario = simulate(config)?;
    export_dataset(&scenario.dataset, dir)?;
    let path = dir.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&scenario.truth)
        .map_err(|e| Error::Invalid(format!("cannot serialize scenario truth: {e}")))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(scenario)
}
