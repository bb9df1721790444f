//! Treatment / control / exclusion assignment and per-region DiD panels.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geodata::{buffer_trajectory_with, Buffer, BufferMode, Region, Trajectory, ZoneSet};
use crate::ingest::{CountRecord, Direction, ObservationPanel, Period, ZoneFlows};
use crate::warning::Warning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Treatment,
    Control,
    Excluded,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Treatment => "treatment",
            Status::Control => "control",
            Status::Excluded => "excluded",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Generation models transit boardings against scooter trips ending in the
/// zone; attraction models alightings against trips starting there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generation,
    Attraction,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Generation, Role::Attraction];

    pub fn label(self) -> &'static str {
        match self {
            Role::Generation => "generation",
            Role::Attraction => "attraction",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Role::Generation => Direction::Boarding,
            Role::Attraction => Direction::Alighting,
        }
    }

    pub fn flows(self, flows: &ZoneFlows) -> &[f64] {
        match self {
            Role::Generation => &flows.destination_mean,
            Role::Attraction => &flows.origin_mean,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Zones whose mean daily flow reaches the threshold.
pub fn assign_treatment(flow_means: &[f64], threshold: f64) -> Vec<bool> {
    flow_means.iter().map(|&m| m >= threshold).collect()
}

/// Zones touching the union of trajectory buffers, minus zones with any
/// scooter activity (those are treatment candidates).
pub fn exclusion_ring(
    zones: &ZoneSet,
    trajectories: &[Trajectory],
    radius_m: f64,
    mode: BufferMode,
    flows: &ZoneFlows,
) -> Result<Vec<bool>> {
    let touched = buffer_contact(zones, trajectories, radius_m, mode)?;
    Ok(touched
        .into_iter()
        .enumerate()
        .map(|(i, t)| t && !flows.any_activity(i))
        .collect())
}

/// Per zone: does it meet any trajectory buffer?
pub fn buffer_contact(
    zones: &ZoneSet,
    trajectories: &[Trajectory],
    radius_m: f64,
    mode: BufferMode,
) -> Result<Vec<bool>> {
    let buffer = trajectories
        .iter()
        .map(|t| buffer_trajectory_with(t, radius_m, mode))
        .try_fold(Buffer::empty(), |acc, b| b.map(|b| acc.merge(b)))?;
    Ok(zones
        .zones()
        .par_iter()
        .map(|z| buffer.touches_polygon(&z.boundary))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignAssignment {
    pub role: Role,
    pub status: Vec<Status>,
    pub region: Vec<Option<usize>>,
    pub flow_mean: Vec<f64>,
}

impl DesignAssignment {
    /// Precedence Treatment > Excluded > Control. Sub-threshold activity and
    /// buffer contact both exclude; zones without a region are excluded.
    pub fn new(
        role: Role,
        flows: &ZoneFlows,
        buffer_contact: &[bool],
        region: Vec<Option<usize>>,
        threshold: f64,
    ) -> Self {
        let flow_mean = role.flows(flows).to_vec();
        let treated = assign_treatment(&flow_mean, threshold);
        let status = (0..flow_mean.len())
            .map(|i| {
                if region[i].is_none() {
                    Status::Excluded
                } else if treated[i] {
                    Status::Treatment
                } else if buffer_contact[i] || flows.any_activity(i) {
                    Status::Excluded
                } else {
                    Status::Control
                }
            })
            .collect();
        DesignAssignment {
            role,
            status,
            region,
            flow_mean,
        }
    }

    /// (control, treatment) zone counts for a region.
    pub fn counts(&self, region: usize) -> (usize, usize) {
        let mut c = (0, 0);
        for (s, r) in self.status.iter().zip(&self.region) {
            if *r == Some(region) {
                match s {
                    Status::Control => c.0 += 1,
                    Status::Treatment => c.1 += 1,
                    Status::Excluded => {}
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidRecord {
    pub zone: usize,
    pub treatment: bool,
    pub post: bool,
    pub record: CountRecord,
}

impl DidRecord {
    pub fn interaction(&self) -> bool {
        self.treatment && self.post
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPanel {
    pub region: usize,
    pub role: Role,
    pub records: Vec<DidRecord>,
}

/// One panel per region holding its treatment and control zones' records
/// for the role's direction. Regions missing either group are skipped.
pub fn build_design(
    panel: &ObservationPanel,
    zones: &ZoneSet,
    design: &DesignAssignment,
    n_regions: usize,
    region_name: impl Fn(usize) -> String,
) -> Result<(Vec<RegionPanel>, Vec<Warning>)> {
    panel.check_zones(zones)?;
    let direction = design.role.direction();
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for region in 0..n_regions {
        let (controls, treated) = design.counts(region);
        if treated == 0 || controls == 0 {
            warnings.push(Warning::EmptyCell {
                region: region_name(region),
                missing: if treated == 0 { "treatment" } else { "control" },
            });
            continue;
        }
        let records = panel
            .records()
            .iter()
            .filter(|r| r.direction == direction)
            .filter_map(|r| {
                let z = zones.index_of(&r.zone_id)?;
                if design.region[z] != Some(region) || design.status[z] == Status::Excluded {
                    return None;
                }
                Some(DidRecord {
                    zone: z,
                    treatment: design.status[z] == Status::Treatment,
                    post: r.period == Period::Post,
                    record: r.clone(),
                })
            })
            .collect();
        out.push(RegionPanel {
            region,
            role: design.role,
            records,
        });
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{TimedPoint, Zone};
    use crate::ingest::{DayType, Mode, TimeBlock};

    fn flows(origin: Vec<f64>, dest: Vec<f64>) -> ZoneFlows {
        ZoneFlows {
            origin_counts: origin.iter().map(|v| (*v * 10.0) as u64).collect(),
            destination_counts: dest.iter().map(|v| (*v * 10.0) as u64).collect(),
            origin_mean: origin,
            destination_mean: dest,
            n_days: 10,
            outside_origins: 0,
            outside_destinations: 0,
        }
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(
            assign_treatment(&[8.0, 3.0, 5.0], 5.0),
            vec![true, false, true]
        );
    }

    fn row_of_zones() -> ZoneSet {
        // five 1 km squares in a row
        ZoneSet::new(
            (0..5)
                .map(|k| Zone::square(format!("z{k}"), 1000.0 * k as f64, 0.0, 1000.0).unwrap())
                .collect(),
            "",
        )
        .unwrap()
    }

    fn traj_in_first_zone() -> Trajectory {
        Trajectory::new(
            "t",
            vec![
                TimedPoint {
                    x: 200.0,
                    y: 500.0,
                    t: 0.0,
                },
                TimedPoint {
                    x: 600.0,
                    y: 500.0,
                    t: 100.0,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn corner_touching_buffer_edge_is_excluded() {
        let zones = row_of_zones();
        // right cap reaches x = 600 + 1400 = 2000, exactly the left edge of z2
        let contact = buffer_contact(
            &zones,
            &[traj_in_first_zone()],
            1400.0,
            BufferMode::Polyline,
        )
        .unwrap();
        assert_eq!(contact, vec![true, true, true, false, false]);
        let f = flows(vec![8.0, 0.0, 0.0, 0.0, 0.0], vec![8.0, 0.0, 0.0, 0.0, 0.0]);
        let ring = exclusion_ring(
            &zones,
            &[traj_in_first_zone()],
            1400.0,
            BufferMode::Polyline,
            &f,
        )
        .unwrap();
        assert_eq!(ring, vec![false, true, true, false, false]);
    }

    #[test]
    fn precedence_treatment_excluded_control() {
        let zones = row_of_zones();
        let contact = buffer_contact(
            &zones,
            &[traj_in_first_zone()],
            1400.0,
            BufferMode::Polyline,
        )
        .unwrap();
        // z0 busy, z1 sporadic activity, z2 buffer only, z3/z4 untouched
        let f = flows(vec![8.0, 3.0, 0.0, 0.0, 0.0], vec![8.0, 3.0, 0.0, 0.0, 0.0]);
        let d = DesignAssignment::new(Role::Generation, &f, &contact, vec![Some(0); 5], 5.0);
        assert_eq!(
            d.status,
            vec![
                Status::Treatment,
                Status::Excluded,
                Status::Excluded,
                Status::Control,
                Status::Control
            ]
        );
        assert_eq!(d.counts(0), (2, 1));
    }

    #[test]
    fn role_switch_only_changes_threshold_column() {
        let zones = row_of_zones();
        let contact =
            buffer_contact(&zones, &[traj_in_first_zone()], 100.0, BufferMode::Polyline).unwrap();
        let f = flows(vec![6.0, 0.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0, 0.0]);
        let gen = DesignAssignment::new(Role::Generation, &f, &contact, vec![Some(0); 5], 5.0);
        let att = DesignAssignment::new(Role::Attraction, &f, &contact, vec![Some(0); 5], 5.0);
        assert_eq!(gen.status[0], Status::Excluded);
        assert_eq!(att.status[0], Status::Treatment);
        assert_eq!(gen.status[1..], att.status[1..]);
    }

    fn record(zone: &str, period: Period, direction: Direction) -> CountRecord {
        CountRecord {
            zone_id: zone.into(),
            period,
            day_type: DayType::MonThu,
            time_block: TimeBlock::MorningValley,
            mode: Mode::Bus,
            direction,
            count: 10,
            exposure_hours: 1.0,
        }
    }

    #[test]
    fn panels_drop_excluded_and_empty_regions() {
        let zones = row_of_zones();
        let mut recs = Vec::new();
        for k in 0..5 {
            for p in [Period::Pre, Period::Post] {
                for d in [Direction::Boarding, Direction::Alighting] {
                    recs.push(record(&format!("z{k}"), p, d));
                }
            }
        }
        let panel = ObservationPanel::new(recs).unwrap();
        let contact = vec![true, true, false, false, false];
        let f = flows(vec![0.0; 5], vec![9.0, 1.0, 0.0, 0.0, 0.0]);
        let regions = vec![Some(0), Some(0), Some(0), Some(1), Some(1)];
        let d = DesignAssignment::new(Role::Generation, &f, &contact, regions, 5.0);
        let (panels, warnings) = build_design(&panel, &zones, &d, 2, |r| format!("r{r}")).unwrap();
        assert_eq!(panels.len(), 1);
        assert_eq!(
            warnings,
            vec![Warning::EmptyCell {
                region: "r1".into(),
                missing: "treatment"
            }]
        );
        let p = &panels[0];
        assert!(p
            .records
            .iter()
            .all(|r| r.zone != 1 && r.record.direction == Direction::Boarding));
        assert_eq!(p.records.len(), 4);
        assert_eq!(p.records.iter().filter(|r| r.interaction()).count(), 1);
    }
}
