//! Grid sweep over the two asynchrony knobs. Each cell is a complete
//! training run in its own subdirectory; the matrix CSV collects one row per
//! cell for offline plotting.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::metrics::EventLog;
use crate::run::train_once;

pub const SWEEP_HEADER: &str = "mak,muf,epochs_to_target,wall_s_to_target,inst_per_s";

pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let grid = cfg.sweep.clone().unwrap_or_default();
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let csv_path = out_dir.join("sweep.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "{SWEEP_HEADER}")?;
    let mut events = EventLog::create(&out_dir.join("events.jsonl"))?;

    let mut cells = 0;
    for &mak in &grid.max_active_keys {
        for &muf in &grid.min_update_frequency {
            let mut c = cfg.clone();
            c.train.max_active_keys = mak;
            c.train.min_update_frequency = muf;
            c.sweep = None;
            println!("=== mak {mak}, muf {muf} ===");
            let s = train_once(&c, &out_dir.join(format!("mak{mak}-muf{muf}")))?;
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                csv,
                "{mak},{muf},{},{},{}",
                opt(s.epochs_to_target.map(|e| e.to_string())),
                opt(s.wall_s_to_target.map(|w| w.to_string())),
                s.inst_per_s
            )?;
            csv.flush()?;
            events.emit(
                "cell",
                json!({
                    "mak": mak,
                    "muf": muf,
                    "epochs_to_target": s.epochs_to_target,
                    "wall_s_to_target": s.wall_s_to_target,
                    "inst_per_s": s.inst_per_s,
                    "final_valid_acc": s.final_valid_acc,
                }),
            )?;
            cells += 1;
        }
    }
    println!("swept {cells} cells into {}", csv_path.display());
    Ok(())
}
