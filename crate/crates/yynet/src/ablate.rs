//! Fusion-formula ablation: train R runs per formula with derived seeds
//! and report mean/std final test accuracy.

use std::io::Write;
use std::path::Path;

use yynet_core::blocks::FusionFormula;

use crate::checkpoint::TrainState;
use crate::config::FileConfig;
use crate::data::{ChannelStats, DatasetSplit};
use crate::error::{AppError, AppResult};
use crate::train;

pub struct AblationRow {
    pub formula: FusionFormula,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Seed for (formula, run) derived from the base seed.
pub fn ablation_seed(base: u64, formula: FusionFormula, run: usize) -> u64 {
    base + formula.index() as u64 * 1000 + run as u64
}

pub fn ablate(
    base: &FileConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    stats: &ChannelStats,
    out_dir: &Path,
    runs: usize,
    verbose: bool,
) -> AppResult<Vec<AblationRow>> {
    if runs == 0 {
        return Err(AppError::Config("ablation needs at least one run".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut rows = Vec::with_capacity(FusionFormula::ALL.len());
    for formula in FusionFormula::ALL {
        let mut accuracies = Vec::with_capacity(runs);
        for run in 0..runs {
            let mut cfg = base.clone();
            cfg.model.fusion = formula;
            cfg.train.seed = ablation_seed(base.train.seed, formula, run);
            let run_dir = out_dir.join(format!("{}_run{run}", formula.name()));
            let mut state = TrainState::new(cfg)?;
            let outcome =
                train::train(&mut state, train_split, test_split, stats, &run_dir, false)?;
            if verbose {
                eprintln!(
                    "{} run {run}: {:.2}%",
                    formula.formula(),
                    outcome.final_accuracy * 100.0
                );
            }
            accuracies.push(outcome.final_accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / runs as f64;
        let std = if runs > 1 {
            (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (runs - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(AblationRow { formula, accuracies, mean, std });
    }
    write_report(&out_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

fn write_report(path: &Path, rows: &[AblationRow]) -> AppResult<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| AppError::Io(format!("cannot create {}: {e}", path.display())))?;
    writeln!(file, "formula,runs,mean_accuracy,std_accuracy")
        .map_err(|e| AppError::Io(e.to_string()))?;
    for r in rows {
        writeln!(file, "{},{},{},{}", r.formula.name(), r.accuracies.len(), r.mean, r.std)
            .map_err(|e| AppError::Io(e.to_string()))?;
    }
    Ok(())
}
