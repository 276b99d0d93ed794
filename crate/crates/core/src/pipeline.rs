//! Screening followed by design construction.

use crate::error::{Error, Result};
use crate::iblt::{CovariateSpec, DesignBuilder, ExpectationConfig, ProcessedRider};
use crate::panel::{screen_riders, PanelDataset, ScreeningConfig, ScreeningReport, ScreeningStatus};

#[derive(Debug, Clone)]
pub struct Prepared {
    pub riders: Vec<ProcessedRider>,
    pub report: ScreeningReport,
}

/// Screens `data` and builds the design of every surviving rider.
pub fn prepare(
    data: &PanelDataset,
    screening: &ScreeningConfig,
    spec: &CovariateSpec,
    expectation: ExpectationConfig,
) -> Result<Prepared> {
    let (kept, report) = screen_riders(data, screening);
    if report.status == ScreeningStatus::Empty || kept.riders.is_empty() {
        return Err(Error::Validation("no riders survive screening".into()));
    }
    let builder = DesignBuilder::new(&kept.attribute_names, spec, expectation, screening.init_rule())?
        .with_min_model_occasions(screening.min_model_occasions);
    Ok(Prepared {
        riders: builder.build_all(&kept)?,
        report,
    })
}

/// Screening for simulated panels: every rider is kept and the
/// initialisation phase has the simulated length.
pub fn simulated_screening(t_init: usize) -> ScreeningConfig {
    ScreeningConfig {
        drop_low_switching: false,
        init_occasions: Some(t_init),
        ..ScreeningConfig::default()
    }
}
