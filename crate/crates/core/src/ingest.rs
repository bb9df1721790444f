//! Transit count panels, scooter GPS streams and zone feature tables.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use geo::Coord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{TimedPoint, Trajectory, ZoneSet};
use crate::warning::Warning;

const DAY_S: f64 = 86_400.0;

fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

macro_rules! labelled_enum {
    ($name:ident, $field:literal, [$($variant:ident => $label:literal),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }

            pub fn parse_label(s: &str) -> Option<Self> {
                let key = normalize_label(s);
                $(if key == normalize_label($label) || key == normalize_label(stringify!($variant)) {
                    return Some($name::$variant);
                })+
                None
            }

            fn parse_at(s: &str, line: usize) -> Result<Self> {
                Self::parse_label(s).ok_or_else(|| Error::UnknownLabel {
                    field: $field,
                    value: s.to_string(),
                    line,
                })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::parse_at(s, 0)
            }
        }
    };
}

labelled_enum!(TimeBlock, "time_block", [
    MorningPeak => "morning_peak",
    MorningValley => "morning_valley",
    Lunch => "lunch",
    AfternoonValley => "afternoon_valley",
    AfternoonPeak => "afternoon_peak",
    NightValley => "night_valley",
    Night => "night",
]);

labelled_enum!(DayType, "day_type", [
    MonThu => "mon_thu",
    Friday => "friday",
    Saturday => "saturday",
    Sunday => "sunday",
]);

labelled_enum!(Period, "period", [Pre => "pre", Post => "post"]);

labelled_enum!(Mode, "mode", [Bus => "bus", Metro => "metro", BusOrMetro => "bus_or_metro"]);

labelled_enum!(Direction, "direction", [Boarding => "boarding", Alighting => "alighting"]);

impl TimeBlock {
    /// Start of the block in seconds after midnight; each block runs up to the next start.
    pub fn start_s(self) -> u32 {
        let hm = |h: u32, m: u32| h * 3600 + m * 60;
        match self {
            TimeBlock::MorningPeak => hm(6, 1),
            TimeBlock::MorningValley => hm(9, 1),
            TimeBlock::Lunch => hm(12, 1),
            TimeBlock::AfternoonValley => hm(14, 1),
            TimeBlock::AfternoonPeak => hm(17, 31),
            TimeBlock::NightValley => hm(20, 31),
            TimeBlock::Night => hm(23, 1),
        }
    }

    /// Last second covered by the block (inclusive).
    pub fn end_s(self) -> u32 {
        let next = match self {
            TimeBlock::MorningPeak => TimeBlock::MorningValley,
            TimeBlock::MorningValley => TimeBlock::Lunch,
            TimeBlock::Lunch => TimeBlock::AfternoonValley,
            TimeBlock::AfternoonValley => TimeBlock::AfternoonPeak,
            TimeBlock::AfternoonPeak => TimeBlock::NightValley,
            TimeBlock::NightValley => TimeBlock::Night,
            TimeBlock::Night => TimeBlock::MorningPeak,
        };
        (next.start_s() + 86_400 - 1) % 86_400
    }

    pub fn duration_hours(self) -> f64 {
        let span = (self.end_s() + 86_400 - self.start_s()) % 86_400 + 1;
        span as f64 / 3600.0
    }

    pub fn of_second(second_of_day: u32) -> TimeBlock {
        let s = second_of_day % 86_400;
        TimeBlock::ALL
            .iter()
            .copied()
            .filter(|b| *b != TimeBlock::Night)
            .find(|b| s >= b.start_s() && s <= b.end_s())
            .unwrap_or(TimeBlock::Night)
    }

    pub fn of_time(t: NaiveTime) -> TimeBlock {
        TimeBlock::of_second(t.num_seconds_from_midnight())
    }
}

impl DayType {
    pub fn of_date(d: NaiveDate) -> DayType {
        use chrono::Datelike;
        match d.weekday() {
            chrono::Weekday::Fri => DayType::Friday,
            chrono::Weekday::Sat => DayType::Saturday,
            chrono::Weekday::Sun => DayType::Sunday,
            _ => DayType::MonThu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub zone_id: String,
    pub period: Period,
    pub day_type: DayType,
    pub time_block: TimeBlock,
    pub mode: Mode,
    pub direction: Direction,
    /// Trips per hour in the cell, averaged over matching days.
    pub count: u64,
    pub exposure_hours: f64,
}

pub type PanelKey = (String, Period, DayType, TimeBlock, Mode, Direction);

impl CountRecord {
    pub fn key(&self) -> PanelKey {
        (
            self.zone_id.clone(),
            self.period,
            self.day_type,
            self.time_block,
            self.mode,
            self.direction,
        )
    }

    pub fn rate(&self) -> f64 {
        self.count as f64 / self.exposure_hours
    }
}

fn describe_key(k: &PanelKey) -> String {
    format!("({}, {}, {}, {}, {}, {})", k.0, k.1, k.2, k.3, k.4, k.5)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationPanel {
    records: Vec<CountRecord>,
}

impl ObservationPanel {
    pub fn new(records: Vec<CountRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !(r.exposure_hours > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "exposure_hours must be positive for {}",
                    describe_key(&r.key())
                )));
            }
            let key = r.key();
            if !seen.insert(key.clone()) {
                return Err(Error::DuplicateKey(describe_key(&key)));
            }
        }
        Ok(ObservationPanel { records })
    }

    pub fn records(&self) -> &[CountRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<CountRecord> {
        self.records
    }

    /// Checks every record names a zone of `zones`.
    pub fn check_zones(&self, zones: &ZoneSet) -> Result<()> {
        match self
            .records
            .iter()
            .find(|r| zones.index_of(&r.zone_id).is_none())
        {
            Some(r) => Err(Error::InvalidInput(format!(
                "panel zone {:?} is not in the zone set",
                r.zone_id
            ))),
            None => Ok(()),
        }
    }
}

pub const PANEL_HEADER: [&str; 7] = [
    "zone_id",
    "period",
    "day_type",
    "time_block",
    "mode",
    "direction",
    "count",
];

pub fn load_count_panel(path: &Path) -> Result<ObservationPanel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_count_panel(file, path)
}

pub fn read_count_panel<R: Read>(reader: R, origin: &Path) -> Result<ObservationPanel> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_exposure = match names.as_slice() {
        n if n == PANEL_HEADER => false,
        n if n.len() == 8 && n[..7] == PANEL_HEADER && n[7] == "exposure_hours" => true,
        _ => {
            return Err(Error::InvalidInput(format!(
                "{}: panel header must be `{}`",
                origin.display(),
                PANEL_HEADER.join(",")
            )))
        }
    };
    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::csv(origin, e))?;
        let count: i64 = row[6]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {line}: bad count {:?}", &row[6])))?;
        if count < 0 {
            return Err(Error::NegativeCount { line, count });
        }
        let exposure_hours = if has_exposure {
            row[7].trim().parse().map_err(|_| {
                Error::InvalidInput(format!("line {line}: bad exposure {:?}", &row[7]))
            })?
        } else {
            1.0
        };
        records.push(CountRecord {
            zone_id: row[0].to_string(),
            period: Period::parse_at(&row[1], line)?,
            day_type: DayType::parse_at(&row[2], line)?,
            time_block: TimeBlock::parse_at(&row[3], line)?,
            mode: Mode::parse_at(&row[4], line)?,
            direction: Direction::parse_at(&row[5], line)?,
            count: count as u64,
            exposure_hours,
        });
    }
    ObservationPanel::new(records)
}

pub fn write_count_panel<W: Write>(panel: &ObservationPanel, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = PANEL_HEADER.to_vec();
    header.push("exposure_hours");
    w.write_record(&header)?;
    for r in panel.records() {
        w.write_record([
            r.zone_id.as_str(),
            r.period.label(),
            r.day_type.label(),
            r.time_block.label(),
            r.mode.label(),
            r.direction.label(),
            &r.count.to_string(),
            &r.exposure_hours.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Seconds since the epoch of the wall-clock time as written, so that
/// `floor(t / 86400)` is the local calendar day.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    let naive = match DateTime::parse_from_rfc3339(s) {
        Ok(dt) => dt.naive_local(),
        Err(_) => NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
            .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f"))
            .ok()?,
    };
    let utc = naive.and_utc();
    Some(utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9)
}

pub fn format_timestamp(t: f64) -> String {
    let secs = t.floor() as i64;
    let nanos = ((t - secs as f64) * 1e9).round() as u32;
    DateTime::from_timestamp(secs, nanos.min(999_999_999))
        .map(|dt| dt.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_default()
}

fn day_of(t: f64) -> i64 {
    (t / DAY_S).floor() as i64
}

/// GPS fixes grouped per device, in file order within each device.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpsStreams {
    pub devices: BTreeMap<String, Vec<TimedPoint>>,
}

pub fn load_gps(path: &Path) -> Result<GpsStreams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_gps(file, path)
}

pub fn read_gps<R: Read>(reader: R, origin: &Path) -> Result<GpsStreams> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["device_id", "timestamp_iso8601", "x_m", "y_m"] {
        return Err(Error::InvalidInput(format!(
            "{}: GPS header must be `device_id,timestamp_iso8601,x_m,y_m`",
            origin.display()
        )));
    }
    let mut devices: BTreeMap<String, Vec<TimedPoint>> = BTreeMap::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::csv(origin, e))?;
        let t = parse_timestamp(&row[1]).ok_or_else(|| {
            Error::InvalidInput(format!("line {line}: bad timestamp {:?}", &row[1]))
        })?;
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("line {line}: bad coordinate {s:?}")))
        };
        devices
            .entry(row[0].to_string())
            .or_default()
            .push(TimedPoint {
                x: num(&row[2])?,
                y: num(&row[3])?,
                t,
            });
    }
    Ok(GpsStreams { devices })
}

pub fn write_gps<W: Write>(streams: &GpsStreams, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["device_id", "timestamp_iso8601", "x_m", "y_m"])?;
    for (device, pts) in &streams.devices {
        for p in pts {
            w.write_record([
                device.as_str(),
                &format_timestamp(p.t),
                &format!("{:.3}", p.x),
                &format!("{:.3}", p.y),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripParams {
    /// A stationary episode at least this long ends a trip.
    pub stop_gap_s: f64,
    /// Displacement below this is stationary; shorter trips are dropped.
    pub min_move_m: f64,
    /// Trips with any faster hop are treated as relocation and dropped.
    pub max_speed_mps: f64,
}

impl Default for TripParams {
    fn default() -> Self {
        TripParams {
            stop_gap_s: 300.0,
            min_move_m: 50.0,
            max_speed_mps: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScooterTrip {
    pub device_id: String,
    pub trip_id: String,
    pub origin: Coord<f64>,
    pub destination: Coord<f64>,
    pub start: f64,
    pub end: f64,
    pub distance_m: f64,
    pub path: Vec<TimedPoint>,
}

impl ScooterTrip {
    pub fn day(&self) -> i64 {
        day_of(self.start)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.trip_id.clone(), self.path.clone())
            .expect("extracted trips have at least two strictly increasing timestamps")
    }
}

/// Splits each device stream into trips at stationary episodes and drops
/// relocation runs and sub-threshold movements.
pub fn extract_trips(streams: &GpsStreams, params: &TripParams) -> Result<Vec<ScooterTrip>> {
    let per_device: Vec<Result<Vec<ScooterTrip>>> = streams
        .devices
        .par_iter()
        .map(|(device, pts)| extract_device_trips(device, pts, params))
        .collect();
    let mut trips = Vec::new();
    for r in per_device {
        trips.extend(r?);
    }
    Ok(trips)
}

pub fn extract_device_trips(
    device: &str,
    pts: &[TimedPoint],
    params: &TripParams,
) -> Result<Vec<ScooterTrip>> {
    if let Some(k) = pts.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(Error::UnsortedStream {
            device: device.to_string(),
            index: k + 1,
        });
    }
    // Stationary episodes: maximal runs staying within min_move of their first point.
    let mut stops: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        let mut j = i + 1;
        while j < pts.len() && pts[j].dist(&pts[i]) < params.min_move_m {
            j += 1;
        }
        let last = j - 1;
        if last > i && pts[last].t - pts[i].t >= params.stop_gap_s {
            stops.push((i, last));
            i = last;
        } else {
            i += 1;
        }
    }

    let mut spans = Vec::new();
    let mut cursor = 0;
    for &(a, b) in &stops {
        if a > cursor {
            spans.push((cursor, a));
        }
        cursor = b;
    }
    if cursor + 1 < pts.len() {
        spans.push((cursor, pts.len() - 1));
    }

    let mut trips = Vec::new();
    for (a, b) in spans {
        let path = &pts[a..=b];
        let distance: f64 = path.windows(2).map(|w| w[0].dist(&w[1])).sum();
        if distance < params.min_move_m {
            continue;
        }
        let relocation = path.windows(2).any(|w| {
            let dt = w[1].t - w[0].t;
            let d = w[0].dist(&w[1]);
            if dt <= 0.0 {
                d > 0.0
            } else {
                d / dt > params.max_speed_mps
            }
        });
        if relocation {
            continue;
        }
        // drop repeated timestamps so the path is a valid trajectory
        let mut clean: Vec<TimedPoint> = Vec::with_capacity(path.len());
        for p in path {
            if clean.last().is_none_or(|q: &TimedPoint| p.t > q.t) {
                clean.push(*p);
            }
        }
        if clean.len() < 2 {
            continue;
        }
        trips.push(ScooterTrip {
            device_id: device.to_string(),
            trip_id: format!("{device}#{}", trips.len()),
            origin: path[0].coord(),
            destination: path[path.len() - 1].coord(),
            start: path[0].t,
            end: path[path.len() - 1].t,
            distance_m: distance,
            path: clean,
        });
    }
    Ok(trips)
}

/// Mean scooter trips per day starting (origins) and ending (destinations) in each zone.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneFlows {
    pub origin_counts: Vec<u64>,
    pub destination_counts: Vec<u64>,
    pub origin_mean: Vec<f64>,
    pub destination_mean: Vec<f64>,
    pub n_days: usize,
    pub outside_origins: usize,
    pub outside_destinations: usize,
}

impl ZoneFlows {
    pub fn any_activity(&self, zone: usize) -> bool {
        self.origin_counts[zone] > 0 || self.destination_counts[zone] > 0
    }
}

/// Per-zone daily means over the distinct days on which any trip started.
/// Points on shared boundaries go to the lowest zone index.
pub fn scooter_zone_flows(trips: &[ScooterTrip], zones: &ZoneSet) -> (ZoneFlows, Vec<Warning>) {
    let n = zones.len();
    let mut origin_counts = vec![0u64; n];
    let mut destination_counts = vec![0u64; n];
    let (mut outside_o, mut outside_d) = (0, 0);
    let located: Vec<(Option<usize>, Option<usize>)> = trips
        .par_iter()
        .map(|t| (zones.locate(t.origin), zones.locate(t.destination)))
        .collect();
    for (o, d) in located {
        match o {
            Some(i) => origin_counts[i] += 1,
            None => outside_o += 1,
        }
        match d {
            Some(i) => destination_counts[i] += 1,
            None => outside_d += 1,
        }
    }
    let days: BTreeSet<i64> = trips.iter().map(ScooterTrip::day).collect();
    let n_days = days.len();
    let per_day = |c: &Vec<u64>| -> Vec<f64> {
        c.iter()
            .map(|&k| {
                if n_days == 0 {
                    0.0
                } else {
                    k as f64 / n_days as f64
                }
            })
            .collect()
    };
    let mut warnings = Vec::new();
    if outside_o + outside_d > 0 {
        warnings.push(Warning::OutsideAllZones {
            count: outside_o + outside_d,
        });
    }
    (
        ZoneFlows {
            origin_mean: per_day(&origin_counts),
            destination_mean: per_day(&destination_counts),
            origin_counts,
            destination_counts,
            n_days,
            outside_origins: outside_o,
            outside_destinations: outside_d,
        },
        warnings,
    )
}

/// The twelve zone clustering variables, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    UnderAgePop,
    WorkingPop,
    RetiredPop,
    FemalePop,
    AvgEducYears,
    BusStops,
    BusStopDensity,
    BusStopsPer1000,
    PopDensity,
    AvgTripsPerPerson,
    AvgFirstTripHour,
    AvgTripDistanceM,
}

impl Feature {
    pub const ALL: [Feature; 12] = [
        Feature::UnderAgePop,
        Feature::WorkingPop,
        Feature::RetiredPop,
        Feature::FemalePop,
        Feature::AvgEducYears,
        Feature::BusStops,
        Feature::BusStopDensity,
        Feature::BusStopsPer1000,
        Feature::PopDensity,
        Feature::AvgTripsPerPerson,
        Feature::AvgFirstTripHour,
        Feature::AvgTripDistanceM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::UnderAgePop => "under_age_pop",
            Feature::WorkingPop => "working_pop",
            Feature::RetiredPop => "retired_pop",
            Feature::FemalePop => "female_pop",
            Feature::AvgEducYears => "avg_educ_years",
            Feature::BusStops => "bus_stops",
            Feature::BusStopDensity => "bus_stop_density",
            Feature::BusStopsPer1000 => "bus_stops_per_1000",
            Feature::PopDensity => "pop_density",
            Feature::AvgTripsPerPerson => "avg_trips_per_person",
            Feature::AvgFirstTripHour => "avg_first_trip_hour",
            Feature::AvgTripDistanceM => "avg_trip_distance_m",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRecord {
    pub zone_id: String,
    pub population: f64,
    pub under_age: f64,
    pub working_age: f64,
    pub retired: f64,
    pub female: f64,
    pub avg_educ_years: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub stop_id: String,
    pub x_m: f64,
    pub y_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetroStation {
    pub station_id: String,
    pub line: String,
    pub x_m: f64,
    pub y_m: f64,
}

/// One public-transport trip of one card holder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonTrip {
    pub person_id: String,
    pub origin_zone: String,
    pub date: NaiveDate,
    /// `HH:MM` or `HH:MM:SS`.
    pub boarding_time: String,
    pub distance_m: f64,
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::csv(path, e),
    })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn load_census(path: &Path) -> Result<Vec<CensusRecord>> {
    read_csv_rows(path)
}

pub fn load_stops(path: &Path) -> Result<Vec<StopRecord>> {
    read_csv_rows(path)
}

pub fn load_metro(path: &Path) -> Result<Vec<MetroStation>> {
    read_csv_rows(path)
}

pub fn load_person_trips(path: &Path) -> Result<Vec<PersonTrip>> {
    read_csv_rows(path)
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_clock(s: &str) -> Option<f64> {
    let t = NaiveTime::parse_from_str(s.trim(), "%H:%M:%S")
        .or_else(|_| NaiveTime::parse_from_str(s.trim(), "%H:%M"))
        .ok()?;
    Some(t.num_seconds_from_midnight() as f64 / 3600.0)
}

/// Per-zone clustering variables plus the raw covariates the regression needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub zone_ids: Vec<String>,
    pub rows: Vec<[f64; 12]>,
    pub population: Vec<f64>,
    pub working_population: Vec<f64>,
}

impl FeatureTable {
    pub fn column(&self, f: Feature) -> Vec<f64> {
        self.rows.iter().map(|r| r[f.index()]).collect()
    }

    pub fn get(&self, zone: usize, f: Feature) -> f64 {
        self.rows[zone][f.index()]
    }

    /// Zones with every column defined.
    pub fn complete(&self, zone: usize) -> bool {
        self.rows[zone].iter().all(|v| v.is_finite())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["zone_id"];
        header.extend(Feature::ALL.iter().map(|f| f.name()));
        header.extend(["population", "working_population"]);
        w.write_record(&header)?;
        for (k, id) in self.zone_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.rows[k].iter().map(|v| fmt_float(*v)));
            rec.push(fmt_float(self.population[k]));
            rec.push(fmt_float(self.working_population[k]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

/// Builds the twelve clustering variables for every zone.
pub fn build_features(
    zones: &ZoneSet,
    census: &[CensusRecord],
    bus_stops: &[StopRecord],
    person_trips: &[PersonTrip],
) -> Result<(FeatureTable, Vec<Warning>)> {
    let n = zones.len();
    let by_zone: HashMap<&str, &CensusRecord> =
        census.iter().map(|c| (c.zone_id.as_str(), c)).collect();

    let mut stop_counts = vec![0usize; n];
    for s in bus_stops {
        if let Some(i) = zones.locate(Coord { x: s.x_m, y: s.y_m }) {
            stop_counts[i] += 1;
        }
    }

    // person-days are attributed to the zone of that day's first boarding
    let mut person_days: BTreeMap<(&str, NaiveDate), Vec<(f64, &PersonTrip)>> = BTreeMap::new();
    for t in person_trips {
        let hour = parse_clock(&t.boarding_time).ok_or_else(|| {
            Error::InvalidInput(format!("bad boarding_time {:?}", t.boarding_time))
        })?;
        person_days
            .entry((t.person_id.as_str(), t.date))
            .or_default()
            .push((hour, t));
    }
    let mut trip_counts = vec![(0.0f64, 0usize); n];
    let mut first_hours = vec![(0.0f64, 0usize); n];
    let mut distances = vec![(0.0f64, 0usize); n];
    for trips in person_days.values_mut() {
        trips.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (first_hour, first) = trips[0];
        if let Some(z) = zones.index_of(&first.origin_zone) {
            trip_counts[z].0 += trips.len() as f64;
            trip_counts[z].1 += 1;
            first_hours[z].0 += first_hour;
            first_hours[z].1 += 1;
        }
        for (_, t) in trips.iter() {
            if let Some(z) = zones.index_of(&t.origin_zone) {
                distances[z].0 += t.distance_m;
                distances[z].1 += 1;
            }
        }
    }
    let mean = |(s, k): (f64, usize)| if k == 0 { f64::NAN } else { s / k as f64 };

    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(n);
    let mut population = Vec::with_capacity(n);
    let mut working_population = Vec::with_capacity(n);
    for (i, zone) in zones.zones().iter().enumerate() {
        let c = by_zone
            .get(zone.id.as_str())
            .ok_or_else(|| Error::MissingZone(zone.id.clone()))?;
        let pop = c.population;
        let pct = |v: f64| if pop > 0.0 { 100.0 * v / pop } else { f64::NAN };
        if !(pop > 0.0) {
            warnings.push(Warning::ZeroPopulation {
                zone: zone.id.clone(),
            });
        }
        let stops = stop_counts[i] as f64;
        let mut row = [0.0; 12];
        row[Feature::UnderAgePop.index()] = pct(c.under_age);
        row[Feature::WorkingPop.index()] = pct(c.working_age);
        row[Feature::RetiredPop.index()] = pct(c.retired);
        row[Feature::FemalePop.index()] = pct(c.female);
        row[Feature::AvgEducYears.index()] = c.avg_educ_years;
        row[Feature::BusStops.index()] = stops;
        row[Feature::BusStopDensity.index()] = stops / zone.area_km2;
        row[Feature::BusStopsPer1000.index()] = if pop > 0.0 {
            1000.0 * stops / pop
        } else {
            f64::NAN
        };
        row[Feature::PopDensity.index()] = pop / zone.area_km2;
        row[Feature::AvgTripsPerPerson.index()] = mean(trip_counts[i]);
        row[Feature::AvgFirstTripHour.index()] = mean(first_hours[i]);
        row[Feature::AvgTripDistanceM.index()] = mean(distances[i]);
        rows.push(row);
        population.push(pop);
        working_population.push(c.working_age);
    }
    Ok((
        FeatureTable {
            zone_ids: zones.ids().map(str::to_string).collect(),
            rows,
            population,
            working_population,
        },
        warnings,
    ))
}

/// Number of distinct metro lines with a station within `radius_m` of each zone centroid.
pub fn metro_lines_within(zones: &ZoneSet, stations: &[MetroStation], radius_m: f64) -> Vec<f64> {
    zones
        .zones()
        .iter()
        .map(|z| {
            let lines: BTreeSet<&str> = stations
                .iter()
                .filter(|s| (s.x_m - z.centroid.x).hypot(s.y_m - z.centroid.y) <= radius_m)
                .map(|s| s.line.as_str())
                .collect();
            lines.len() as f64
        })
        .collect()
}
