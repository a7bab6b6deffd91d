//! Two-node speaker identification run on an in-process grid.

use edgrid_core::demand::Context;
use edgrid_core::marf::{build_marf_geer, run_local, MarfParams, ResultSet, ToneSynth, DEFAULT_SUBJECTS};
use edgrid_core::tiers::{Configuration, Gmt, GmtOptions, NodeAction, TierError, TierKind, DEFAULT_INSTANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoCase {
    pub subject: i64,
    pub freq: f64,
    pub grid: ResultSet,
    pub local: ResultSet,
}

impl DemoCase {
    pub fn correct(&self) -> bool {
        self.grid.best() == Some(self.subject)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub cases: Vec<DemoCase>,
}

impl DemoReport {
    pub fn correct(&self) -> usize {
        self.cases.iter().filter(|c| c.correct()).count()
    }

    /// Grid and in-process rankings agree for every case.
    pub fn consistent(&self) -> bool {
        self.cases.iter().all(|c| c.grid == c.local)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error("{0}")]
    Marf(String),
}

/// Node one holds the store and generator, node two the workers. Each
/// subject is trained on `instances` noisy tones and then classified from a
/// fresh one.
pub fn run_demo(seed: u64, instances: usize) -> Result<DemoReport, DemoError> {
    let gmt = Gmt::new(GmtOptions::default());
    let none = Configuration::new();
    let a = gmt.register_node("alpha", "127.0.0.1:7001", "#ff0000", DEFAULT_INSTANCE)?.node_id;
    let b = gmt.register_node("beta", "127.0.0.1:7002", "#0000ff", DEFAULT_INSTANCE)?.node_id;
    gmt.node_lifecycle(&a, NodeAction::Start)?;
    gmt.node_lifecycle(&b, NodeAction::Start)?;
    gmt.allocate_tier(&a, TierKind::Dst, 1, &none)?;
    let dgt = gmt.allocate_tier(&a, TierKind::Dgt, 1, &none)?.tier_id;
    gmt.allocate_tier(&b, TierKind::Dwt, 1, &none)?;

    let params = MarfParams::default();
    let mut synth = ToneSynth::new(seed);
    let training = synth
        .train(&params, &DEFAULT_SUBJECTS, instances)
        .map_err(|e| DemoError::Marf(e.to_string()))?;
    let geer = build_marf_geer(&params, &training).map_err(|e| DemoError::Marf(e.to_string()))?;
    let mut cases = Vec::new();
    for (subject, freq) in DEFAULT_SUBJECTS {
        let source = synth.tone(freq);
        let input = source.to_value().map_err(|e| DemoError::Marf(e.to_string()))?;
        let ev = gmt.evaluate(&dgt, &geer, &Context::new(), input)?;
        let grid = ResultSet::from_value(ev.value()).map_err(|e| DemoError::Marf(e.to_string()))?;
        let local = run_local(&params, &training, &source).map_err(|e| DemoError::Marf(e.to_string()))?;
        cases.push(DemoCase {
            subject,
            freq,
            grid,
            local,
        });
    }
    gmt.shutdown();
    Ok(DemoReport { cases })
}
