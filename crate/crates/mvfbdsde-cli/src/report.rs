//! CSV and text outputs. Floats carry 17 significant digits; lines end in LF.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mvfbdsde::model::{Block, EnsembleState};
use mvfbdsde::solver::{Rung, SolveReport};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rows of already formatted cells under `header`.
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s += &r.join(",");
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> io::Result<PathBuf> {
        fs::write(path, self.render())?;
        Ok(path.to_path_buf())
    }
}

/// One row per node: `t`, component means of `y` and `Y`, RMS of `z` and
/// `Z`, and the cross-particle spread of `y` and `Y` (root of the summed
/// component variances).
pub fn trajectory_csv(state: &EnsembleState) -> Csv {
    let d = state.dims.d;
    let label = |base: &str, i: usize| if d == 1 { base.to_string() } else { format!("{base}[{i}]") };
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| label("mean_y", i)));
    header.extend((0..d).map(|i| label("mean_Y", i)));
    header.extend(["rms_z", "rms_Z", "std_y", "std_Y"].map(String::from));
    let mut csv = Csv { header, rows: vec![] };
    let (ry0, ry1) = (state.dims.range(Block::Y0), state.dims.range(Block::Y1));
    for k in 0..=state.grid.steps() {
        let mean = state.mean(k);
        let sd = state.std(k);
        let spread = |r: std::ops::Range<usize>| sd[r].iter().map(|s| s * s).sum::<f64>().sqrt();
        let mut row = vec![num(state.grid.t(k))];
        row.extend(mean[ry0.clone()].iter().map(|v| num(*v)));
        row.extend(mean[ry1.clone()].iter().map(|v| num(*v)));
        row.push(num(state.rms(k, Block::Z0)));
        row.push(num(state.rms(k, Block::Z1)));
        row.push(num(spread(ry0.clone())));
        row.push(num(spread(ry1.clone())));
        csv.push(row);
    }
    csv
}

pub fn ladder_csv(ladder: &[Rung]) -> Csv {
    let mut csv = Csv::new(&["alpha", "iterations", "final_D", "median_ratio"]);
    for r in ladder {
        csv.push(vec![num(r.alpha), r.iterations.to_string(), num(r.final_d()), num(r.median_ratio())]);
    }
    csv
}

/// Trajectory and ladder CSVs for a solve, written into `dir`.
pub fn emit_report(report: &SolveReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    Ok(vec![
        trajectory_csv(&report.final_state).write(&dir.join("trajectory.csv"))?,
        ladder_csv(&report.alpha_ladder).write(&dir.join("ladder.csv"))?,
    ])
}
