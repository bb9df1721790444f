//! Study configuration and the staged pipeline behind the command line:
//! ingest, features, screen, regionalize, design, fit, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::design::{buffer_contact, build_design, DesignAssignment, RegionPanel, Role};
use crate::error::{Error, Result};
use crate::geodata::{
    contiguity_weights, knn_connectivity, load_zones, zones_to_geojson, BufferMode, Contiguity,
    ZoneSet,
};
use crate::ingest::{
    build_features, extract_trips, fmt_float, load_census, load_count_panel, load_gps, load_metro,
    load_person_trips, load_stops, metro_lines_within, scooter_zone_flows, write_count_panel,
    write_gps, write_rows, Feature, FeatureTable, Mode, ObservationPanel, ScooterTrip, TripParams,
    ZoneFlows,
};
use crate::nbdid::{
    build_design_matrix, cluster_robust_cov, coef_stars, did_effect, did_stars, fit_nb, p_value,
    BaselineTable, CovarianceKind, DidEffect, FitOptions, FitResult, ModelSpec, ZoneCovariates,
    INTERACTION,
};
use crate::regionalize::{
    select_regionalization, standardize, RegionAssignment, RegionalizeConfig, ScoreCell,
};
use crate::spatial_stats::{screen_variables, selected_features, ScreenConfig, ScreenRow, Tail};
use crate::synthetic::{generate_city, SynthConfig, SyntheticCity};
use crate::warning::{log_all, Warning};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub zones: PathBuf,
    pub panel: PathBuf,
    pub gps: PathBuf,
    pub census: PathBuf,
    pub bus_stops: PathBuf,
    pub metro: PathBuf,
    pub person_trips: PathBuf,
}

impl InputPaths {
    fn standard() -> Self {
        InputPaths {
            zones: "zones.geojson".into(),
            panel: "panel.csv".into(),
            gps: "gps.csv".into(),
            census: "census.csv".into(),
            bus_stops: "bus_stops.csv".into(),
            metro: "metro.csv".into(),
            person_trips: "person_trips.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub moran_i_min: f64,
    pub p_max: f64,
    pub buffer_m: f64,
    pub trips_per_day: f64,
    pub metro_radius_m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            moran_i_min: 0.25,
            p_max: 0.05,
            buffer_m: 1440.0,
            trips_per_day: 5.0,
            metro_radius_m: 750.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub inputs: InputPaths,
    pub thresholds: Thresholds,
    pub k_range: (usize, usize),
    pub knn_k: usize,
    pub n_perm: u64,
    pub tail: Tail,
    pub contiguity: Contiguity,
    pub buffer_mode: BufferMode,
    pub trip_params: TripParams,
    pub models: Vec<ModelSpec>,
    pub roles: Vec<Role>,
    pub modes: Vec<Mode>,
    pub fit: FitOptions,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            inputs: InputPaths::standard(),
            thresholds: Thresholds::default(),
            k_range: (3, 10),
            knn_k: 6,
            n_perm: 999,
            tail: Tail::Upper,
            contiguity: Contiguity::Queen,
            buffer_mode: BufferMode::Polyline,
            trip_params: TripParams::default(),
            models: vec![
                ModelSpec::headline(),
                ModelSpec::model1(),
                ModelSpec::model2(),
            ],
            roles: Role::ALL.to_vec(),
            modes: vec![Mode::BusOrMetro, Mode::Bus, Mode::Metro],
            fit: FitOptions::default(),
            seed: 0,
            out_dir: "out".into(),
        }
    }
}

impl StudyConfig {
    /// Reads a config; relative input and output paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        for p in [
            &mut i.zones,
            &mut i.panel,
            &mut i.gps,
            &mut i.census,
            &mut i.bus_stops,
            &mut i.metro,
            &mut i.person_trips,
            &mut self.out_dir,
        ] {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        let positive = [
            ("moran_i_min", t.moran_i_min),
            ("p_max", t.p_max),
            ("buffer_m", t.buffer_m),
            ("trips_per_day", t.trips_per_day),
            ("metro_radius_m", t.metro_radius_m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "threshold {name} must be positive"
            )));
        }
        if self.k_range.0 < 2 || self.k_range.0 > self.k_range.1 {
            return Err(Error::InvalidInput(format!(
                "bad k_range {:?}",
                self.k_range
            )));
        }
        if self.n_perm == 0 || self.knn_k == 0 {
            return Err(Error::InvalidInput(
                "n_perm and knn_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Files written by a stage, kept for the manifest.
#[derive(Debug, Default)]
pub struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e| Error::csv(self.dir.join(name), e);
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(self.dir.join(name), e.into_error()))?;
        self.write(name, &bytes)
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| Error::json(self.dir.join(name), e))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn with_writer(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::csv(self.dir.join(name), e))?;
        self.write(name, &buf)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// `manifest.json` listing every artifact with its SHA-256.
    pub fn write_manifest(&mut self, extra: Map<String, Value>) -> Result<()> {
        let mut m = extra;
        m.insert(
            "artifacts".into(),
            Value::Array(
                self.files
                    .iter()
                    .map(|(p, h)| json!({"path": p, "sha256": h}))
                    .collect(),
            ),
        );
        let value = Value::Object(m);
        let mut bytes = serde_json::to_vec_pretty(&value)
            .map_err(|e| Error::json(self.dir.join("manifest.json"), e))?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn report_warnings(stage: &str, warnings: &[Warning]) {
    if !warnings.is_empty() {
        log::info!("{stage}: {} warning(s)", warnings.len());
    }
    log_all(warnings);
}

pub struct Ingested {
    pub zones: ZoneSet,
    pub trips: Vec<ScooterTrip>,
    pub flows: ZoneFlows,
}

pub fn ingest(cfg: &StudyConfig, out: &mut Artifacts) -> Result<Ingested> {
    let zones = stage("ingest", load_zones(&cfg.inputs.zones))?;
    let gps = stage("ingest", load_gps(&cfg.inputs.gps))?;
    let trips = stage("ingest", extract_trips(&gps, &cfg.trip_params))?;
    let (flows, warnings) = scooter_zone_flows(&trips, &zones);
    report_warnings("ingest", &warnings);
    let rows: Vec<Vec<String>> = trips
        .iter()
        .map(|t| {
            vec![
                t.device_id.clone(),
                t.trip_id.clone(),
                crate::ingest::format_timestamp(t.start),
                crate::ingest::format_timestamp(t.end),
                format!("{:.3}", t.origin.x),
                format!("{:.3}", t.origin.y),
                format!("{:.3}", t.destination.x),
                format!("{:.3}", t.destination.y),
                format!("{:.3}", t.distance_m),
            ]
        })
        .collect();
    out.csv(
        "trips.csv",
        &[
            "device_id",
            "trip_id",
            "start",
            "end",
            "origin_x",
            "origin_y",
            "dest_x",
            "dest_y",
            "distance_m",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = zones
        .ids()
        .enumerate()
        .map(|(i, id)| {
            vec![
                id.to_string(),
                flows.origin_counts[i].to_string(),
                flows.destination_counts[i].to_string(),
                fmt_float(flows.origin_mean[i]),
                fmt_float(flows.destination_mean[i]),
            ]
        })
        .collect();
    out.csv(
        "flows.csv",
        &[
            "zone_id",
            "origin_trips",
            "destination_trips",
            "origin_mean",
            "destination_mean",
        ],
        &rows,
    )?;
    Ok(Ingested {
        zones,
        trips,
        flows,
    })
}

pub struct Features {
    pub table: FeatureTable,
    pub metro_lines: Vec<f64>,
}

pub fn features(cfg: &StudyConfig, zones: &ZoneSet, out: &mut Artifacts) -> Result<Features> {
    let census = stage("features", load_census(&cfg.inputs.census))?;
    let stops = stage("features", load_stops(&cfg.inputs.bus_stops))?;
    let metro = stage("features", load_metro(&cfg.inputs.metro))?;
    let person_trips = stage("features", load_person_trips(&cfg.inputs.person_trips))?;
    let (table, warnings) = stage(
        "features",
        build_features(zones, &census, &stops, &person_trips),
    )?;
    report_warnings("features", &warnings);
    let metro_lines = metro_lines_within(zones, &metro, cfg.thresholds.metro_radius_m);
    out.with_writer("features.csv", |w| table.write_csv(w))?;
    let rows: Vec<Vec<String>> = zones
        .ids()
        .zip(&metro_lines)
        .map(|(id, m)| vec![id.to_string(), format!("{m}")])
        .collect();
    out.csv("metro_lines.csv", &["zone_id", "metro_lines"], &rows)?;
    Ok(Features { table, metro_lines })
}

pub fn screen(
    cfg: &StudyConfig,
    zones: &ZoneSet,
    feats: &Features,
    out: &mut Artifacts,
) -> Result<Vec<ScreenRow>> {
    let (w, mut warnings) = stage("screen", contiguity_weights(zones, cfg.contiguity, true))?;
    let scfg = ScreenConfig {
        i_min: cfg.thresholds.moran_i_min,
        p_max: cfg.thresholds.p_max,
        n_perm: cfg.n_perm,
        seed: cfg.seed,
        tail: cfg.tail,
    };
    let (rows, w2) = stage("screen", screen_variables(&feats.table, &w, &scfg))?;
    warnings.extend(w2);
    report_warnings("screen", &warnings);
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variable.name().to_string(),
                fmt_float(r.i),
                fmt_float(r.p),
                r.selected.to_string(),
            ]
        })
        .collect();
    out.csv("screen.csv", &["variable", "i", "p", "selected"], &csv_rows)?;
    Ok(rows)
}

pub struct Regions {
    pub assignment: RegionAssignment,
    /// Region label per zone; `None` for zones left out (incomplete features).
    pub zone_region: Vec<Option<usize>>,
    pub grid: Vec<ScoreCell>,
}

impl Regions {
    pub fn name(&self, label: usize) -> String {
        self.assignment.name(label)
    }
}

/// Regionalizes the zones with complete features on the selected columns;
/// no files are written.
pub fn compute_regions(
    cfg: &StudyConfig,
    zones: &ZoneSet,
    table: &FeatureTable,
    selected: &[Feature],
) -> Result<(Regions, Vec<Warning>)> {
    if selected.is_empty() {
        return Err(Error::InvalidInput(
            "no variable passed the Moran's I screen".into(),
        ));
    }
    let keep: Vec<usize> = (0..zones.len()).filter(|&z| table.complete(z)).collect();
    let raw: Vec<Vec<f64>> = keep
        .iter()
        .map(|&z| selected.iter().map(|&f| table.get(z, f)).collect())
        .collect();
    let x = standardize(&raw)?;
    let centroids: Vec<_> = keep.iter().map(|&z| zones.get(z).centroid).collect();
    let (knn, mut warnings) =
        knn_connectivity(&centroids, cfg.knn_k.min(keep.len().saturating_sub(1)))?;
    let (contig, w2) = contiguity_weights(zones, cfg.contiguity, false)?;
    warnings.extend(w2);
    let sparse = contig.subset(&keep);
    let rcfg = RegionalizeConfig {
        k_min: cfg.k_range.0,
        k_max: cfg.k_range.1,
        knn_k: cfg.knn_k,
        ..RegionalizeConfig::default()
    };
    let (mut assignment, grid, w3) = select_regionalization(&x, &knn, &sparse, &rcfg, cfg.seed)?;
    warnings.extend(w3);
    assignment.name_by_radius(&centroids);
    let mut zone_region = vec![None; zones.len()];
    for (&z, &l) in keep.iter().zip(&assignment.labels) {
        zone_region[z] = Some(l);
    }
    Ok((
        Regions {
            assignment,
            zone_region,
            grid,
        },
        warnings,
    ))
}

pub fn regionalize(
    cfg: &StudyConfig,
    zones: &ZoneSet,
    feats: &Features,
    selected: &[Feature],
    out: &mut Artifacts,
) -> Result<Regions> {
    let (regions, warnings) = stage(
        "regionalize",
        compute_regions(cfg, zones, &feats.table, selected),
    )?;
    report_warnings("regionalize", &warnings);
    let Regions {
        assignment,
        zone_region,
        grid,
    } = &regions;
    let label = |r: Option<usize>| r.map_or("NA".to_string(), |l| assignment.name(l));
    let rows: Vec<Vec<String>> = zones
        .ids()
        .zip(zone_region)
        .map(|(id, r)| vec![id.to_string(), label(*r)])
        .collect();
    out.csv("regions.csv", &["zone_id", "region_label"], &rows)?;
    let rows: Vec<Vec<String>> = grid
        .iter()
        .map(|c| {
            vec![
                c.method.label().to_string(),
                c.k.to_string(),
                fmt_float(c.ch),
            ]
        })
        .collect();
    out.csv("ch_grid.csv", &["method", "k", "ch"], &rows)?;
    let gj = zones_to_geojson(zones, |i| {
        let mut m = Map::new();
        m.insert("region_label".into(), Value::String(label(zone_region[i])));
        m
    });
    out.json("regions.geojson", &gj)?;
    log::info!(
        "regionalize: {} with k = {} (CH {:.3})",
        assignment.method,
        assignment.k,
        assignment.ch_score
    );
    Ok(regions)
}

pub struct Design {
    pub contact: Vec<bool>,
    pub by_role: Vec<(DesignAssignment, Vec<RegionPanel>)>,
}

pub fn design(
    cfg: &StudyConfig,
    ing: &Ingested,
    panel: &ObservationPanel,
    regions: &Regions,
    out: &mut Artifacts,
) -> Result<Design> {
    let trajectories: Vec<_> = ing.trips.iter().map(|t| t.trajectory()).collect();
    let contact = stage(
        "design",
        buffer_contact(
            &ing.zones,
            &trajectories,
            cfg.thresholds.buffer_m,
            cfg.buffer_mode,
        ),
    )?;
    let mut by_role = Vec::new();
    let mut count_rows = Vec::new();
    for &role in &cfg.roles {
        let d = DesignAssignment::new(
            role,
            &ing.flows,
            &contact,
            regions.zone_region.clone(),
            cfg.thresholds.trips_per_day,
        );
        let (panels, warnings) = stage(
            "design",
            build_design(panel, &ing.zones, &d, regions.assignment.k, |r| {
                regions.name(r)
            }),
        )?;
        report_warnings("design", &warnings);
        let rows: Vec<Vec<String>> = ing
            .zones
            .ids()
            .enumerate()
            .map(|(i, id)| {
                vec![
                    id.to_string(),
                    d.region[i].map_or("NA".to_string(), |l| regions.name(l)),
                    d.status[i].label().to_string(),
                    fmt_float(d.flow_mean[i]),
                ]
            })
            .collect();
        out.csv(
            &format!("design_{}.csv", role.label()),
            &["zone_id", "region", "status", "flow_mean"],
            &rows,
        )?;
        let gj = zones_to_geojson(&ing.zones, |i| {
            let mut m = Map::new();
            m.insert("status".into(), Value::String(d.status[i].label().into()));
            m.insert("buffer_contact".into(), Value::Bool(contact[i]));
            m
        });
        out.json(&format!("design_{}.geojson", role.label()), &gj)?;
        for r in 0..regions.assignment.k {
            let (c, t) = d.counts(r);
            count_rows.push(vec![
                role.label().into(),
                regions.name(r),
                c.to_string(),
                t.to_string(),
            ]);
        }
        by_role.push((d, panels));
    }
    out.csv(
        "design_counts.csv",
        &["role", "region", "control", "treatment"],
        &count_rows,
    )?;
    Ok(Design { contact, by_role })
}

/// One requested (model, role, region, mode) cell.
#[derive(Debug, Clone)]
pub struct CellFit {
    pub model: String,
    pub role: Role,
    pub region: usize,
    pub mode: Mode,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone)]
pub enum CellOutcome {
    /// No estimable contrast for this cell; rendered "--".
    Undefined(String),
    Failed(String),
    Fitted {
        fit: Box<FitResult>,
        cov: nalgebra::DMatrix<f64>,
        ame: Vec<(f64, f64)>,
        effect: Option<DidEffect>,
    },
}

impl CellFit {
    pub fn ok(&self) -> bool {
        match &self.outcome {
            CellOutcome::Undefined(_) => true,
            CellOutcome::Failed(_) => false,
            CellOutcome::Fitted { fit, .. } => fit.converged,
        }
    }
}

fn fit_cell(
    panel: &RegionPanel,
    mode: Mode,
    spec: &ModelSpec,
    cov: &ZoneCovariates,
    baseline: Option<f64>,
    opts: &FitOptions,
    cell: &str,
) -> CellOutcome {
    let in_mode = panel.records.iter().filter(|r| r.record.mode == mode);
    let (mut treated, mut control) = (false, false);
    for r in in_mode {
        treated |= r.treatment;
        control |= !r.treatment;
    }
    if !(treated && control) {
        return CellOutcome::Undefined(format!("no {} records with both groups", mode.label()));
    }
    let (dm, warnings) = match build_design_matrix(panel, mode, spec, cov) {
        Ok(v) => v,
        Err(e) => return CellOutcome::Failed(e.to_string()),
    };
    if !warnings.is_empty() {
        log::debug!(
            "{cell}: {}",
            warnings
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        );
    }
    let fit = match fit_nb(&dm, opts) {
        Ok(f) => f,
        Err(e) => return CellOutcome::Failed(e.to_string()),
    };
    log_all(&fit.warnings);
    let cov = match spec.covariance {
        CovarianceKind::Observed => fit.cov.clone(),
        CovarianceKind::Clustered => match cluster_robust_cov(&fit, &dm) {
            Ok(c) => c,
            Err(e) => return CellOutcome::Failed(e.to_string()),
        },
    };
    let ame = (0..dm.n_cols())
        .map(|k| crate::nbdid::average_marginal_effect(&fit, &dm, k, &cov, spec.ame))
        .collect();
    let effect = did_effect(&fit, &dm, &cov, spec.ame, baseline, cell).ok();
    CellOutcome::Fitted {
        fit: Box::new(fit),
        cov,
        ame,
        effect,
    }
}

pub fn fit(
    cfg: &StudyConfig,
    zones: &ZoneSet,
    panel: &ObservationPanel,
    feats: &Features,
    regions: &Regions,
    design: &Design,
) -> Result<(Vec<CellFit>, BaselineTable)> {
    let cov = ZoneCovariates::from_features(&feats.table, feats.metro_lines.clone());
    let baselines = match design.by_role.first() {
        Some((d, _)) => BaselineTable::compute(panel, zones, d),
        None => BaselineTable::default(),
    };
    let mut jobs = Vec::new();
    for spec in &cfg.models {
        for (d, panels) in &design.by_role {
            for region in 0..regions.assignment.k {
                for &mode in &cfg.modes {
                    jobs.push((
                        spec,
                        d.role,
                        region,
                        mode,
                        panels.iter().find(|p| p.region == region),
                    ));
                }
            }
        }
    }
    let cells: Vec<CellFit> = jobs
        .par_iter()
        .map(|&(spec, role, region, mode, panel)| {
            let name = format!("{}/{}/{}/{}", spec.name, role, regions.name(region), mode);
            let outcome = match panel {
                None => CellOutcome::Undefined("region lacks treatment or control zones".into()),
                Some(p) => fit_cell(
                    p,
                    mode,
                    spec,
                    &cov,
                    baselines.get(region, mode, role.direction()),
                    &cfg.fit,
                    &name,
                ),
            };
            if let CellOutcome::Failed(e) = &outcome {
                log::error!("{name}: {e}");
            }
            CellFit {
                model: spec.name.clone(),
                role,
                region,
                mode,
                outcome,
            }
        })
        .collect();
    Ok((cells, baselines))
}

fn f6(v: f64) -> String {
    fmt_float(v)
}

/// Coefficient, marginal-effect, DiD summary, baseline and status tables.
pub fn report(
    cfg: &StudyConfig,
    cells: &[CellFit],
    baselines: &BaselineTable,
    regions: &Regions,
    out: &mut Artifacts,
) -> Result<()> {
    for spec in &cfg.models {
        let mine: Vec<&CellFit> = cells.iter().filter(|c| c.model == spec.name).collect();
        let mut coef = Vec::new();
        let mut me = Vec::new();
        let mut summary = Vec::new();
        for c in &mine {
            let head = vec![
                c.role.label().to_string(),
                regions.name(c.region),
                c.mode.label().to_string(),
            ];
            match &c.outcome {
                CellOutcome::Fitted {
                    fit,
                    cov,
                    ame,
                    effect,
                } => {
                    for (k, name) in fit.names.iter().enumerate() {
                        let z = fit.beta[k] / cov[(k, k)].sqrt();
                        let mut row = head.clone();
                        row.extend([
                            name.clone(),
                            f6(fit.beta[k]),
                            format!("{z:.3}"),
                            coef_stars(p_value(z)).to_string(),
                            format!("{:.4}", fit.loglik),
                            fit.n_obs.to_string(),
                        ]);
                        coef.push(row);
                        let (a, se) = ame[k];
                        let za = a / se;
                        let mut row = head.clone();
                        row.extend([
                            name.clone(),
                            format!("{a:.4}"),
                            format!("{za:.3}"),
                            coef_stars(p_value(za)).to_string(),
                        ]);
                        me.push(row);
                    }
                    let mut row = head.clone();
                    let alpha_z = fit
                        .alpha_se
                        .map_or("NA".to_string(), |s| format!("{:.3}", fit.alpha / s));
                    row.extend([
                        "alpha".to_string(),
                        f6(fit.alpha),
                        alpha_z,
                        String::new(),
                        format!("{:.4}", fit.loglik),
                        fit.n_obs.to_string(),
                    ]);
                    coef.push(row);
                    let mut row = head.clone();
                    match effect {
                        Some(e) => row.extend([
                            format!("{:.2}", e.ame),
                            format!("{:.2}", e.percent),
                            did_stars(e.p).to_string(),
                            e.cell(),
                        ]),
                        None => {
                            let (a, se) = ame[INTERACTION];
                            row.extend([
                                format!("{a:.2}"),
                                "--".into(),
                                did_stars(p_value(a / se)).to_string(),
                                "--".into(),
                            ])
                        }
                    }
                    summary.push(row);
                }
                CellOutcome::Undefined(_) | CellOutcome::Failed(_) => {
                    let mut row = head.clone();
                    row.extend(["--".to_string(), "--".into(), String::new(), "--".into()]);
                    summary.push(row);
                }
            }
        }
        out.csv(
            &format!("coefficients_{}.csv", spec.name),
            &[
                "role",
                "region",
                "mode",
                "parameter",
                "estimate",
                "z",
                "stars",
                "loglik",
                "n",
            ],
            &coef,
        )?;
        out.csv(
            &format!("marginal_effects_{}.csv", spec.name),
            &["role", "region", "mode", "parameter", "ame", "z", "stars"],
            &me,
        )?;
        out.csv(
            &format!("did_summary_{}.csv", spec.name),
            &[
                "role",
                "region",
                "mode",
                "ame",
                "percent",
                "significance",
                "cell",
            ],
            &summary,
        )?;
    }
    let rows: Vec<Vec<String>> = baselines
        .cells()
        .map(|((r, m, d), v)| {
            vec![
                regions.name(r),
                m.label().into(),
                d.label().into(),
                format!("{v:.2}"),
            ]
        })
        .collect();
    out.csv(
        "baselines.csv",
        &["region", "mode", "direction", "baseline"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (status, detail, alpha, n, iters) = match &c.outcome {
                CellOutcome::Undefined(why) => (
                    "undefined",
                    why.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                ),
                CellOutcome::Failed(why) => (
                    "failed",
                    why.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                ),
                CellOutcome::Fitted { fit, .. } => (
                    if fit.converged {
                        "converged"
                    } else {
                        "not_converged"
                    },
                    if fit.at_boundary {
                        "poisson boundary".into()
                    } else {
                        String::new()
                    },
                    f6(fit.alpha),
                    fit.n_obs.to_string(),
                    fit.iterations.to_string(),
                ),
            };
            vec![
                c.model.clone(),
                c.role.label().into(),
                regions.name(c.region),
                c.mode.label().into(),
                status.into(),
                detail,
                alpha,
                n,
                iters,
            ]
        })
        .collect();
    out.csv(
        "fit_status.csv",
        &[
            "model",
            "role",
            "region",
            "mode",
            "status",
            "detail",
            "alpha",
            "n",
            "iterations",
        ],
        &rows,
    )?;
    Ok(())
}

/// How far `run_study` goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Features,
    Screen,
    Regionalize,
    Design,
    Fit,
    Report,
}

#[derive(Debug, Default)]
pub struct StudySummary {
    pub cells: Vec<CellFit>,
    pub all_converged: bool,
    pub artifacts: BTreeMap<String, String>,
}

/// Runs every stage up to `until`, writing each stage's artifacts; the
/// report stage also writes the manifest.
pub fn run_study(cfg: &StudyConfig, until: Stage) -> Result<StudySummary> {
    cfg.validate()?;
    let mut out = Artifacts::new(&cfg.out_dir)?;
    let ing = ingest(cfg, &mut out)?;
    let mut summary = StudySummary {
        all_converged: true,
        ..StudySummary::default()
    };
    if until <= Stage::Ingest {
        summary.artifacts = out.files().clone();
        return Ok(summary);
    }
    let feats = features(cfg, &ing.zones, &mut out)?;
    if until <= Stage::Features {
        summary.artifacts = out.files().clone();
        return Ok(summary);
    }
    let rows = screen(cfg, &ing.zones, &feats, &mut out)?;
    if until <= Stage::Screen {
        summary.artifacts = out.files().clone();
        return Ok(summary);
    }
    let regions = regionalize(cfg, &ing.zones, &feats, &selected_features(&rows), &mut out)?;
    if until <= Stage::Regionalize {
        summary.artifacts = out.files().clone();
        return Ok(summary);
    }
    let panel = stage("design", load_count_panel(&cfg.inputs.panel))?;
    let design = design(cfg, &ing, &panel, &regions, &mut out)?;
    if until <= Stage::Design {
        summary.artifacts = out.files().clone();
        return Ok(summary);
    }
    let (cells, baselines) = fit(cfg, &ing.zones, &panel, &feats, &regions, &design)?;
    report(cfg, &cells, &baselines, &regions, &mut out)?;
    summary.all_converged = cells.iter().all(CellFit::ok);
    if until >= Stage::Report {
        let mut extra = Map::new();
        extra.insert("seed".into(), json!(cfg.seed));
        extra.insert("all_converged".into(), json!(summary.all_converged));
        extra.insert(
            "regionalization".into(),
            json!({"method": regions.assignment.method.label(), "k": regions.assignment.k}),
        );
        out.write_manifest(extra)?;
    }
    summary.cells = cells;
    summary.artifacts = out.files().clone();
    Ok(summary)
}

/// Writes a synthetic city as study inputs plus a `study.json` pointing at them.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<(SyntheticCity, PathBuf)> {
    let city = generate_city(cfg)?;
    let mut out = Artifacts::new(dir)?;
    let gj = zones_to_geojson(&city.zones, |_| Map::new());
    out.json("zones.geojson", &gj)?;
    out.with_writer("panel.csv", |w| write_count_panel(&city.panel, w))?;
    out.with_writer("gps.csv", |w| write_gps(&city.gps, w))?;
    out.with_writer("census.csv", |w| write_rows(&city.census, w))?;
    out.with_writer("bus_stops.csv", |w| write_rows(&city.bus_stops, w))?;
    out.with_writer("metro.csv", |w| write_rows(&city.metro_stations, w))?;
    out.with_writer("person_trips.csv", |w| write_rows(&city.person_trips, w))?;
    let study = StudyConfig {
        seed: cfg.seed,
        ..StudyConfig::default()
    };
    let mut value =
        serde_json::to_value(&study).map_err(|e| Error::json(dir.join("study.json"), e))?;
    value["synthetic"] =
        serde_json::to_value(cfg).map_err(|e| Error::json(dir.join("study.json"), e))?;
    out.json("study.json", &value)?;
    let path = dir.join("study.json");
    Ok((city, path))
}
