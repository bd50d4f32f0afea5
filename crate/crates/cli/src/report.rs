//! Report documents written by `eval` and `compare`. Each report goes out
//! twice: a JSON summary for programs and a flat CSV for spreadsheets. Both
//! are deterministic byte-for-byte given the same inputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use longflow_core::metrics::DriftPoint;
use longflow_core::Real;

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub window: usize,
    pub skip: usize,
    pub clip_episodes: usize,
    pub reference_episodes: usize,
    pub flicker_median: Option<Real>,
    /// Per-clip flicker, in episode order.
    pub flicker: Vec<Real>,
    pub drift: Vec<DriftPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Fréchet value of the final horizon bucket, the headline number.
    pub last_bucket_frechet: Option<Real>,
    pub flicker_median: Option<Real>,
    pub flicker: Vec<Real>,
    pub drift: Vec<DriftPoint>,
}

#[derive(Debug, Serialize)]
pub struct StrategyReport {
    pub strategy: String,
    /// Median over seeds; absent if any seed's last bucket was invalid.
    pub median_last_bucket_frechet: Option<Real>,
    pub median_flicker: Option<Real>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub window: usize,
    pub clips_per_seed: usize,
    pub strategies: Vec<StrategyReport>,
}

/// Median of an unordered sample; even counts average the middle pair.
pub fn median(values: &[Real]) -> Option<Real> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}

pub fn write_json<T: Serialize>(path: &Path, report: &T) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()
}

fn opt(value: Option<Real>) -> String {
    value.map_or(String::new(), |v| v.to_string())
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "metric,start,end,value,generated_samples,reference_samples,seed"
    )?;
    for p in &report.drift {
        writeln!(
            w,
            "frechet_drift,{},{},{},{},{},{}",
            p.start_frame,
            p.end_frame,
            opt(p.value),
            p.generated_samples,
            p.reference_samples,
            report.seed
        )?;
    }
    for (i, f) in report.flicker.iter().enumerate() {
        writeln!(w, "flicker,{i},{i},{f},,,{}", report.seed)?;
    }
    writeln!(
        w,
        "flicker_median,,,{},{},,{}",
        opt(report.flicker_median),
        report.clip_episodes,
        report.seed
    )?;
    w.flush()
}

pub fn write_compare_csv(path: &Path, report: &CompareReport) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "strategy,seed,metric,start,end,value,generated_samples,reference_samples"
    )?;
    for s in &report.strategies {
        for r in &s.seeds {
            for p in &r.drift {
                writeln!(
                    w,
                    "{},{},frechet_drift,{},{},{},{},{}",
                    s.strategy,
                    r.seed,
                    p.start_frame,
                    p.end_frame,
                    opt(p.value),
                    p.generated_samples,
                    p.reference_samples
                )?;
            }
            writeln!(
                w,
                "{},{},flicker_median,0,{},{},{},",
                s.strategy,
                r.seed,
                report.horizon,
                opt(r.flicker_median),
                r.flicker.len()
            )?;
        }
        writeln!(
            w,
            "{},median,last_bucket_frechet,,,{},{},",
            s.strategy,
            opt(s.median_last_bucket_frechet),
            s.seeds.len()
        )?;
        writeln!(
            w,
            "{},median,flicker,,,{},{},",
            s.strategy,
            opt(s.median_flicker),
            s.seeds.len()
        )?;
    }
    w.flush()
}
