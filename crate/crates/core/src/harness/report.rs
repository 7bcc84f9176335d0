use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{HarnessError, Mode};

/// One trial: a test pose of one phantom solved in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub patient: u64,
    pub pose_id: usize,
    pub mode: Mode,
    pub translation_error_mm: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    /// Translation error along the ground-truth camera axes.
    pub ex_mm: Option<f64>,
    pub ey_mm: Option<f64>,
    pub ez_mm: Option<f64>,
    pub tre_mm: Option<f64>,
    pub n_detected: usize,
    pub success: bool,
    /// `ok`, or the reason the trial produced no pose.
    pub status: String,
}

impl TrialRow {
    pub fn is_ok(&self) -> bool {
        self.translation_error_mm.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub trials: usize,
    pub solved: usize,
    pub success_rate: f64,
    pub translation_mean_mm: f64,
    pub translation_std_mm: f64,
    pub rotation_mean_deg: f64,
    pub rotation_std_deg: f64,
    pub tre_mean_mm: f64,
    pub tre_std_mm: f64,
    pub abs_ex_mean_mm: f64,
    pub abs_ey_mean_mm: f64,
    pub abs_ez_mean_mm: f64,
}

/// Paired comparison of a mode against UNWEIGHTED on translation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mode: Mode,
    pub pairs: usize,
    /// `100 · (mean_unweighted − mean_mode) / mean_unweighted` over the pairs.
    pub improvement_pct: f64,
    /// Two-sided paired t-test p-value.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub modes: Vec<ModeSummary>,
    pub versus_unweighted: Vec<PairedComparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<TrialRow>,
    pub summary: Summary,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Two-sided paired t-test on `a − b`; returns `(mean difference, p-value)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n < 2 {
        return (d.first().copied().unwrap_or(f64::NAN), f64::NAN);
    }
    let m = d.iter().sum::<f64>() / n as f64;
    let s = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if s == 0.0 {
        return (m, if m == 0.0 { 1.0 } else { 0.0 });
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    (m, 2.0 * dist.sf(t.abs()))
}

/// Recomputes the summary from trial rows.
pub fn summarize(rows: &[TrialRow]) -> Summary {
    let mut by_mode: BTreeMap<Mode, Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        by_mode.entry(r.mode).or_default().push(r);
    }
    let modes = by_mode
        .iter()
        .map(|(&mode, rs)| {
            let col = |f: fn(&TrialRow) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let (tm, ts) = mean_std(&col(|r| r.translation_error_mm));
            let (rm, rsd) = mean_std(&col(|r| r.rotation_error_deg));
            let (em, es) = mean_std(&col(|r| r.tre_mm));
            let abs_mean = |f: fn(&TrialRow) -> Option<f64>| mean_std(&col(f).iter().map(|x| x.abs()).collect::<Vec<_>>()).0;
            ModeSummary {
                mode,
                trials: rs.len(),
                solved: rs.iter().filter(|r| r.is_ok()).count(),
                success_rate: rs.iter().filter(|r| r.success).count() as f64 / rs.len() as f64,
                translation_mean_mm: tm,
                translation_std_mm: ts,
                rotation_mean_deg: rm,
                rotation_std_deg: rsd,
                tre_mean_mm: em,
                tre_std_mm: es,
                abs_ex_mean_mm: abs_mean(|r| r.ex_mm),
                abs_ey_mean_mm: abs_mean(|r| r.ey_mm),
                abs_ez_mean_mm: abs_mean(|r| r.ez_mm),
            }
        })
        .collect();

    let key = |r: &TrialRow| (r.patient, r.pose_id);
    let unweighted: BTreeMap<(u64, usize), f64> = rows
        .iter()
        .filter(|r| r.mode == Mode::Unweighted)
        .filter_map(|r| r.translation_error_mm.map(|t| (key(r), t)))
        .collect();
    let versus_unweighted = by_mode
        .iter()
        .filter(|(m, _)| !unweighted.is_empty() && !matches!(m, Mode::Unweighted | Mode::Registered))
        .map(|(&mode, rs)| {
            let (a, b): (Vec<f64>, Vec<f64>) = rs
                .iter()
                .filter_map(|r| Some((*unweighted.get(&key(r))?, r.translation_error_mm?)))
                .unzip();
            let (_, p) = paired_t_test(&a, &b);
            let ma = mean_std(&a).0;
            let mb = mean_std(&b).0;
            PairedComparison {
                mode,
                pairs: a.len(),
                improvement_pct: 100.0 * (ma - mb) / ma,
                p_value: p,
            }
        })
        .collect();
    Summary {
        schema_version: crate::SCHEMA_VERSION,
        modes,
        versus_unweighted,
    }
}

impl RunReport {
    pub fn from_rows(rows: Vec<TrialRow>) -> Self {
        let summary = summarize(&rows);
        Self { rows, summary }
    }

    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summary.modes.iter().find(|m| m.mode == mode)
    }

    pub fn comparison(&self, mode: Mode) -> Option<&PairedComparison> {
        self.summary.versus_unweighted.iter().find(|m| m.mode == mode)
    }

    pub fn rows_csv(&self) -> Result<String, HarnessError> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            wr.serialize(r).map_err(|e| HarnessError::Io(e.to_string()))?;
        }
        let bytes = wr.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf8"))
    }

    pub fn read_rows_csv(text: &str) -> Result<Vec<TrialRow>, HarnessError> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<Vec<TrialRow>, _>>()
            .map_err(|e| HarnessError::Io(e.to_string()))
    }

    /// Writes `report.csv` (rows) and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        let io = |e: std::io::Error| HarnessError::Io(e.to_string());
        std::fs::write(dir.join("report.csv"), self.rows_csv()?).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(dir.join("summary.json"), json).map_err(io)?;
        Ok(())
    }
}
