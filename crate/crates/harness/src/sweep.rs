//! Parameter sweeps over tau, K, k and W.

use std::fmt::Write as _;

use kvfreeze_core::controller::run_generation;
use kvfreeze_core::{replay, Model, PolicyEvent, PolicyParams, RecoveryAction, ScoreTrace};
use rayon::prelude::*;

use crate::config::{RunConfig, SweepSection};
use crate::error::Result;

/// What each cell runs.
#[derive(Debug, Clone, Copy)]
pub enum SweepSource<'a> {
    Replay(&'a ScoreTrace),
    Generate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub params: PolicyParams,
    pub mean_compression: f64,
    pub max_absence: u64,
    pub recoveries: usize,
}

/// Cartesian product of the grid, axes varying slowest-first in the order
/// tau, window, softness, history window.
pub fn grid_cells(base: &PolicyParams, grid: &SweepSection) -> Vec<PolicyParams> {
    fn or<T: Copy>(axis: &[T], base: T) -> Vec<T> {
        if axis.is_empty() {
            vec![base]
        } else {
            axis.to_vec()
        }
    }
    let mut cells = Vec::new();
    for &tau in &or(&grid.tau, base.tau) {
        for &window_size in &or(&grid.window_size, base.window_size) {
            for &softness in &or(&grid.softness, base.softness) {
                for &history_window in &or(&grid.history_window, base.history_window) {
                    cells.push(PolicyParams {
                        tau,
                        window_size,
                        softness,
                        history_window,
                        ..*base
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(
    cfg: &RunConfig,
    model: Option<&Model>,
    source: SweepSource,
    params: PolicyParams,
) -> Result<SweepRow> {
    match source {
        SweepSource::Replay(trace) => {
            let stats = replay(trace, &params)?;
            Ok(SweepRow {
                params,
                mean_compression: stats.mean_compression(),
                max_absence: stats.max_absence(),
                recoveries: 0,
            })
        }
        SweepSource::Generate => {
            let prompt = crate::cli::default_prompt(cfg);
            let session = kvfreeze_core::SessionConfig {
                policy: params,
                ..cfg.session()
            };
            let g = run_generation(
                model.expect("model for generation"),
                &prompt,
                cfg.run.steps,
                session,
            )?;
            let max_absence = g
                .events
                .iter()
                .filter_map(|e| match e {
                    PolicyEvent::Restore { absent, .. } => Some(*absent),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            Ok(SweepRow {
                params,
                mean_compression: g.metrics.iter().map(|m| m.compression).sum::<f64>()
                    / g.metrics.len() as f64,
                max_absence,
                recoveries: g
                    .metrics
                    .iter()
                    .filter(|m| m.recovery != RecoveryAction::None)
                    .count(),
            })
        }
    }
}

/// Runs every cell, in parallel, returning rows in grid order.
pub fn run_sweep(cfg: &RunConfig, source: SweepSource) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let cells = grid_cells(&cfg.policy, &cfg.sweep);
    for c in &cells {
        c.validate()?;
    }
    let model = match source {
        SweepSource::Generate => Some(Model::new(cfg.model)?),
        SweepSource::Replay(_) => None,
    };
    cells
        .into_par_iter()
        .map(|p| run_cell(cfg, model.as_ref(), source, p))
        .collect()
}

fn history(w: u64) -> String {
    if w == u64::MAX {
        "inf".into()
    } else {
        w.to_string()
    }
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "tau,window,softness,history_window,mean_compression,max_absence,recoveries\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.6},{},{}",
            r.params.tau,
            r.params.window_size,
            r.params.softness,
            history(r.params.history_window),
            r.mean_compression,
            r.max_absence,
            r.recoveries
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_and_defaults() {
        let grid = SweepSection {
            tau: vec![0.1, 0.2],
            softness: vec![1.0, 2.0, 3.0],
            ..Default::default()
        };
        let cells = grid_cells(&PolicyParams::default(), &grid);
        assert_eq!(cells.len(), 6);
        assert_eq!((cells[0].tau, cells[0].softness), (0.1, 1.0));
        assert_eq!((cells[5].tau, cells[5].softness), (0.2, 3.0));
        assert!(cells.iter().all(|c| c.window_size == 32));
        assert_eq!(
            grid_cells(&PolicyParams::default(), &SweepSection::default()).len(),
            1
        );
    }
}
