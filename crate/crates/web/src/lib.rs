//! Browser bindings: Moran's I on a painted grid, regionalization of a
//! small synthetic city, and the exclusion-ring design with a DiD estimate
//! for an injected effect. Results cross the boundary as JSON strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use transit_did::design::{buffer_contact, build_design, DesignAssignment, Role, Status};
use transit_did::geodata::{contiguity_weights, BufferMode, Contiguity, Zone, ZoneSet};
use transit_did::ingest::{build_features, scooter_zone_flows, FeatureTable, Mode};
use transit_did::nbdid::{
    build_design_matrix, cluster_robust_cov, did_effect, fit_nb, BaselineTable, FitOptions,
    ModelSpec, ZoneCovariates, INTERACTION,
};
use transit_did::pipeline::{compute_regions, StudyConfig};
use transit_did::spatial_stats::{
    morans_perm_test, screen_variables, selected_features, ScreenConfig,
};
use transit_did::synthetic::{generate_city, SynthConfig, SyntheticCity};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Moran's I with queen contiguity on a `size × size` grid, row-major values.
pub fn grid_moran(
    values: &[f64],
    size: usize,
    n_perm: u64,
    seed: u64,
) -> transit_did::Result<Value> {
    let zones = (0..size * size)
        .map(|k| Zone::square(format!("c{k}"), (k % size) as f64, (k / size) as f64, 1.0))
        .collect::<transit_did::Result<Vec<_>>>()?;
    let zones = ZoneSet::new(zones, "grid")?;
    let (w, _) = contiguity_weights(&zones, Contiguity::Queen, true)?;
    let r = morans_perm_test(values, &w, n_perm, seed)?;
    Ok(json!({"i": r.i_value, "expected": r.expected_i, "p": r.p_perm}))
}

#[wasm_bindgen(js_name = gridMoran)]
pub fn grid_moran_js(
    values: &[f64],
    size: usize,
    n_perm: u32,
    seed: u32,
) -> Result<String, JsError> {
    grid_moran(values, size, n_perm as u64, seed as u64)
        .map(|v| v.to_string())
        .map_err(js)
}

#[wasm_bindgen]
pub struct Demo {
    city: SyntheticCity,
    features: FeatureTable,
    study: StudyConfig,
}

impl Demo {
    pub fn build(seed: u64) -> transit_did::Result<Demo> {
        let city = generate_city(&SynthConfig::small(seed))?;
        let (features, _) = build_features(
            &city.zones,
            &city.census,
            &city.bus_stops,
            &city.person_trips,
        )?;
        let study = StudyConfig {
            seed,
            n_perm: 199,
            ..StudyConfig::default()
        };
        Ok(Demo {
            city,
            features,
            study,
        })
    }

    pub fn regions(&self, k_min: usize, k_max: usize) -> transit_did::Result<Value> {
        let (w, _) = contiguity_weights(&self.city.zones, self.study.contiguity, true)?;
        let screen_cfg = ScreenConfig {
            n_perm: self.study.n_perm,
            seed: self.study.seed,
            ..ScreenConfig::default()
        };
        let (rows, _) = screen_variables(&self.features, &w, &screen_cfg)?;
        let cfg = StudyConfig {
            k_range: (k_min, k_max),
            ..self.study.clone()
        };
        let (regions, _) = compute_regions(
            &cfg,
            &self.city.zones,
            &self.features,
            &selected_features(&rows),
        )?;
        let a = &regions.assignment;
        Ok(json!({
            "method": a.method.label(),
            "k": a.k,
            "ch": a.ch_score,
            "labels": regions.zone_region,
            "names": (0..a.k).map(|l| a.name(l)).collect::<Vec<_>>(),
            "selected": rows.iter().filter(|r| r.selected).map(|r| r.variable.name()).collect::<Vec<_>>(),
            "grid": regions.grid.iter().map(|c| json!([c.method.label(), c.k, c.ch])).collect::<Vec<_>>(),
        }))
    }

    /// Design with every zone in one region, then Model 2 on bus boardings
    /// after injecting `delta` into treated post-period counts.
    pub fn estimate(
        &self,
        delta: f64,
        buffer_m: f64,
        trips_per_day: f64,
    ) -> transit_did::Result<Value> {
        let city = &self.city;
        let (flows, _) = scooter_zone_flows(&city.trips, &city.zones);
        let trajectories: Vec<_> = city.trips.iter().map(|t| t.trajectory()).collect();
        let contact = buffer_contact(&city.zones, &trajectories, buffer_m, BufferMode::Polyline)?;
        let d = DesignAssignment::new(
            Role::Generation,
            &flows,
            &contact,
            vec![Some(0); city.zones.len()],
            trips_per_day,
        );
        let status: Vec<&str> = d.status.iter().map(|s| s.label()).collect();
        let (control, treatment) = d.counts(0);
        let mut out = json!({"status": status, "control": control, "treatment": treatment});
        if control == 0 || treatment == 0 {
            out["error"] = json!("the design has no treatment or no control zones");
            return Ok(out);
        }
        let treated: Vec<bool> = d.status.iter().map(|s| *s == Status::Treatment).collect();
        let panel = city.inject_effect(&city.panel, &treated, delta)?;
        let (panels, _) = build_design(&panel, &city.zones, &d, 1, |_| "all".into())?;
        let cov = ZoneCovariates::from_features(&self.features, city.metro_lines());
        let (dm, _) = build_design_matrix(&panels[0], Mode::Bus, &ModelSpec::model2(), &cov)?;
        let fit = fit_nb(&dm, &FitOptions::default())?;
        let v = cluster_robust_cov(&fit, &dm)?;
        let baseline = BaselineTable::compute(&panel, &city.zones, &d).get(
            0,
            Mode::Bus,
            Role::Generation.direction(),
        );
        let effect = did_effect(&fit, &dm, &v, ModelSpec::model2().ame, baseline, "all/bus")?;
        let se = v[(INTERACTION, INTERACTION)].sqrt();
        out["fit"] = json!({
            "n": fit.n_obs,
            "beta": fit.beta[INTERACTION],
            "se": se,
            "alpha": fit.alpha,
            "ame": effect.ame,
            "percent": effect.percent,
            "p": effect.p,
            "cell": effect.cell(),
        });
        Ok(out)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Demo::build(seed as u64).map_err(js)
    }

    #[wasm_bindgen(js_name = gridSize)]
    pub fn grid_size(&self) -> usize {
        self.city.config.grid_size
    }

    #[wasm_bindgen(js_name = regionalize)]
    pub fn regionalize_js(&self, k_min: usize, k_max: usize) -> Result<String, JsError> {
        self.regions(k_min, k_max)
            .map(|v| v.to_string())
            .map_err(js)
    }

    #[wasm_bindgen(js_name = estimate)]
    pub fn estimate_js(
        &self,
        delta: f64,
        buffer_m: f64,
        trips_per_day: f64,
    ) -> Result<String, JsError> {
        self.estimate(delta, buffer_m, trips_per_day)
            .map(|v| v.to_string())
            .map_err(js)
    }
}
