use std::collections::HashMap;

use chrono::{Days, FixedOffset, NaiveDate};

use super::{weekday_index, Order, Station, DAYS_PER_WEEK};
use crate::error::{Error, Result};

/// Half-open date range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateWindow { start, end }
    }

    /// The `days` days strictly after `date`: `(date, date + days]`.
    pub fn following(date: NaiveDate, days: u64) -> Self {
        let start = date + Days::new(1);
        DateWindow::new(start, start + Days::new(days))
    }

    /// The `days` days ending on `date` inclusive.
    pub fn ending_on(date: NaiveDate, days: u64) -> Self {
        let end = date + Days::new(1);
        DateWindow::new(end - Days::new(days), end)
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days().max(0)
    }

    pub fn is_empty(&self) -> bool {
        self.days() == 0
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date < self.end
    }

    pub fn intersect(&self, other: &DateWindow) -> DateWindow {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end).max(start);
        DateWindow::new(start, end)
    }

    pub fn iter(&self) -> impl Iterator<Item = NaiveDate> {
        let start = self.start;
        (0..self.days() as u64).map(move |i| start + Days::new(i))
    }
}

/// Daily pickup counts of one station over its service period within the
/// dataset span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemandSeries {
    pub station_id: String,
    pub start_date: NaiveDate,
    pub counts: Vec<u32>,
}

impl DemandSeries {
    pub fn window(&self) -> DateWindow {
        DateWindow::new(
            self.start_date,
            self.start_date + Days::new(self.counts.len() as u64),
        )
    }

    pub fn count_on(&self, date: NaiveDate) -> Option<u32> {
        let off = (date - self.start_date).num_days();
        if off < 0 {
            return None;
        }
        self.counts.get(off as usize).copied()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// `(date, count)` pairs inside `window`, oldest first.
    pub fn slice(&self, window: DateWindow) -> impl Iterator<Item = (NaiveDate, u32)> + '_ {
        let w = self.window().intersect(&window);
        w.iter().map(move |d| (d, self.count_on(d).unwrap_or(0)))
    }
}

/// Per-weekday mean demand, Monday first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectedDemand {
    pub values: [f64; DAYS_PER_WEEK],
    /// Number of observed days per weekday; 0 marks an uncovered weekday
    /// whose value is reported as 0.
    pub coverage: [u32; DAYS_PER_WEEK],
}

impl ExpectedDemand {
    pub fn is_complete(&self) -> bool {
        self.coverage.iter().all(|&c| c > 0)
    }
}

fn service_window(station: &Station, span: DateWindow) -> DateWindow {
    let end = station.closed_on.map_or(span.end, |c| c.min(span.end));
    let start = station.deployed_on.max(span.start);
    DateWindow::new(start, end.max(start))
}

/// Counts pickups at `station` for each day of its service period.
pub fn daily_demand(
    orders: &[Order],
    station: &Station,
    span: DateWindow,
    offset: FixedOffset,
) -> DemandSeries {
    let window = service_window(station, span);
    let mut counts = vec![0u32; window.days() as usize];
    for o in orders.iter().filter(|o| o.pickup_station == station.id) {
        let day = o.start.with_timezone(&offset).date_naive();
        if window.contains(day) {
            counts[(day - window.start).num_days() as usize] += 1;
        }
    }
    DemandSeries {
        station_id: station.id.clone(),
        start_date: window.start,
        counts,
    }
}

/// Mean demand per weekday over the part of `window` the series covers.
pub fn expected_demand(series: &DemandSeries, window: DateWindow) -> Result<ExpectedDemand> {
    let covered = series.window().intersect(&window);
    if covered.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut sums = [0u64; DAYS_PER_WEEK];
    let mut coverage = [0u32; DAYS_PER_WEEK];
    for (date, c) in series.slice(covered) {
        let w = weekday_index(date);
        sums[w] += c as u64;
        coverage[w] += 1;
    }
    let mut values = [0.0; DAYS_PER_WEEK];
    for w in 0..DAYS_PER_WEEK {
        if coverage[w] > 0 {
            values[w] = sums[w] as f64 / coverage[w] as f64;
        }
    }
    Ok(ExpectedDemand { values, coverage })
}

/// Demand series for every station, built in one pass over the orders.
#[derive(Clone, Debug, Default)]
pub struct DemandTable {
    series: Vec<DemandSeries>,
    index: HashMap<String, usize>,
}

impl DemandTable {
    pub fn build(
        stations: &[Station],
        orders: &[Order],
        span: DateWindow,
        offset: FixedOffset,
    ) -> Self {
        let mut series: Vec<DemandSeries> = stations
            .iter()
            .map(|s| {
                let w = service_window(s, span);
                DemandSeries {
                    station_id: s.id.clone(),
                    start_date: w.start,
                    counts: vec![0; w.days() as usize],
                }
            })
            .collect();
        let index: HashMap<String, usize> = stations
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        for o in orders {
            let Some(&i) = index.get(&o.pickup_station) else {
                continue;
            };
            let day = o.start.with_timezone(&offset).date_naive();
            let s = &mut series[i];
            let off = (day - s.start_date).num_days();
            if off >= 0 && (off as usize) < s.counts.len() {
                s.counts[off as usize] += 1;
            }
        }
        DemandTable { series, index }
    }

    pub fn get(&self, station_id: &str) -> Option<&DemandSeries> {
        self.index.get(station_id).map(|&i| &self.series[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &DemandSeries> {
        self.series.iter()
    }

    pub fn total(&self) -> u64 {
        self.series.iter().map(DemandSeries::total).sum()
    }

    /// Copy holding only counts dated on or before `last`.
    pub fn truncated_through(&self, last: NaiveDate) -> Self {
        let series = self
            .series
            .iter()
            .map(|s| {
                let keep = (last - s.start_date).num_days() + 1;
                let keep = keep.clamp(0, s.counts.len() as i64) as usize;
                DemandSeries {
                    station_id: s.station_id.clone(),
                    start_date: s.start_date,
                    counts: s.counts[..keep].to_vec(),
                }
            })
            .collect();
        DemandTable {
            series,
            index: self.index.clone(),
        }
    }

    /// Replaces every count on or after `from` with `value`. Used to check that
    /// consumers never read past a cutoff.
    pub fn overwrite_from(&mut self, from: NaiveDate, value: u32) {
        for s in &mut self.series {
            for (i, c) in s.counts.iter_mut().enumerate() {
                if s.start_date + Days::new(i as u64) >= from {
                    *c = value;
                }
            }
        }
    }
}
