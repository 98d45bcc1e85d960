//! Module, component and wiring ablation grids.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use hypca::{Components, Modules, Wiring};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::synth::SyntheticDataset;
use crate::train::{train, ExperimentResult};

/// `{rala, hysfa, mmmua}` switches, one row per subset.
pub const MODULE_GRID: [&str; 8] = ["000", "001", "010", "011", "100", "101", "110", "111"];

/// Component switches in the order MSHC, CHIA, SHIA, FCIF, SMIF, MCBI, TFSI, FDCA.
pub const COMPONENT_GRID: [&str; 8] = [
    "00000000", "10010010", "11010010", "00110010", "11110010", "10011110", "11111110", "11111111",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Module,
    Component,
    Wiring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub grid: Grid,
    pub modules: Modules,
    pub components: Components,
    pub wiring: Wiring,
}

fn bits<const N: usize>(s: &str) -> [bool; N] {
    let mut out = [false; N];
    for (o, c) in out.iter_mut().zip(s.bytes()) {
        *o = c == b'1';
    }
    out
}

pub fn bit_string(b: &[bool]) -> String {
    b.iter().map(|&v| if v { '1' } else { '0' }).collect()
}

impl AblationRow {
    pub fn module_bits(&self) -> String {
        let m = self.modules;
        bit_string(&[m.rala, m.hysfa, m.mmmua])
    }

    pub fn component_bits(&self) -> String {
        bit_string(&self.components.bits())
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.modules = self.modules;
        cfg.model.components = self.components;
        cfg.model.wiring = self.wiring;
        cfg
    }
}

/// The 8 + 8 + 2 rows in a fixed order. Module rows keep every component,
/// component rows keep every module, and the wiring rows run the full model.
pub fn grid_rows() -> Vec<AblationRow> {
    let full_c = Components::default();
    let full_m = Modules::default();
    let modules = MODULE_GRID.iter().map(|s| AblationRow {
        id: format!("module-{s}"),
        grid: Grid::Module,
        modules: Modules::from_bits(bits(s)),
        components: full_c,
        wiring: Wiring::Hybrid,
    });
    let components = COMPONENT_GRID.iter().map(|s| AblationRow {
        id: format!("component-{s}"),
        grid: Grid::Component,
        modules: full_m,
        components: Components::from_bits(bits(s)),
        wiring: Wiring::Hybrid,
    });
    let wiring = [("hybrid", Wiring::Hybrid), ("cascaded", Wiring::Cascaded)]
        .into_iter()
        .map(|(n, w)| AblationRow {
            id: format!("wiring-{n}"),
            grid: Grid::Wiring,
            modules: full_m,
            components: full_c,
            wiring: w,
        });
    modules.chain(components).chain(wiring).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRecord {
    pub row: AblationRow,
    pub result: Option<ExperimentResult>,
    /// Set when the row could not be run; the other rows still are.
    pub error: Option<String>,
}

/// Trains every row on `threads` worker threads. Each worker builds its own
/// network from the row's config, so the records do not depend on the
/// thread count or scheduling.
pub fn run_ablation(base: &ExperimentConfig, ds: &SyntheticDataset, threads: usize) -> Vec<AblationRecord> {
    let rows = grid_rows();
    let slots: Mutex<Vec<Option<AblationRecord>>> = Mutex::new((0..rows.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, rows.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(row) = rows.get(i) else { break };
                let outcome = train(&row.apply(base), ds);
                let record = match outcome {
                    Ok(t) => AblationRecord {
                        row: row.clone(),
                        result: Some(t.result),
                        error: None,
                    },
                    Err(e) => AblationRecord {
                        row: row.clone(),
                        result: None,
                        error: Some(e.to_string()),
                    },
                };
                slots.lock().expect("no worker panicked")[i] = Some(record);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every row ran"))
        .collect()
}
