use std::fmt;

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    IslandZone {
        zone: String,
    },
    DegenerateDistance {
        first: usize,
        second: usize,
    },
    ConstantColumn {
        column: String,
    },
    DisconnectedGraph {
        components: usize,
    },
    ZeroPopulation {
        zone: String,
    },
    OutsideAllZones {
        count: usize,
    },
    EmptyCell {
        region: String,
        missing: &'static str,
    },
    NotConverged {
        iterations: usize,
    },
    Separation,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::IslandZone { zone } => write!(f, "zone {zone} has no neighbours"),
            Warning::DegenerateDistance { first, second } => write!(
                f,
                "zones {first} and {second} share a centroid; neighbours tie-broken by index"
            ),
            Warning::ConstantColumn { column } => {
                write!(f, "column {column} is constant and was not tested")
            }
            Warning::DisconnectedGraph { components } => write!(
                f,
                "connectivity graph has {components} components; merging within components first"
            ),
            Warning::ZeroPopulation { zone } => {
                write!(
                    f,
                    "zone {zone} has zero population; per-capita columns set to NaN"
                )
            }
            Warning::OutsideAllZones { count } => {
                write!(f, "{count} trip endpoints fell outside every zone")
            }
            Warning::EmptyCell { region, missing } => {
                write!(f, "region {region} has no {missing} zones; skipped")
            }
            Warning::NotConverged { iterations } => {
                write!(f, "fit did not converge after {iterations} iterations")
            }
            Warning::Separation => write!(f, "fitted means under- or overflowed"),
        }
    }
}

pub(crate) fn log_all(warnings: &[Warning]) {
    for w in warnings {
        log::warn!("{w}");
    }
}
