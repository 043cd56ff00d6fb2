//! Simulation-run ingestion, normalization, windowing, and splits.
//!
//! Runs arrive as long-format CSV (`run_id,state_id,sample,ch_0,...`),
//! grouped by run and ordered by sample. Standard-score statistics are fit
//! on training runs only and applied identically everywhere. Windows are
//! labeled by the state at their last sample, so the pre-change segment of a
//! faulty run contributes normal-class windows.

pub mod synth;

pub use synth::{FaultKind, FaultSpec, SynthSpec};

use crate::tensor::rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// TEP records samples every 3 minutes; synthetic runs reuse the metadata.
pub const SAMPLE_PERIOD_MINUTES: f64 = 3.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty {what}")]
    Empty { what: &'static str },
    #[error("{0}")]
    Inconsistent(String),
    #[error("ground-truth matrix is unstable: spectral radius {radius:.4} >= 1")]
    UnstableGroundTruth { radius: f64 },
}

/// One recorded process simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub run_id: u32,
    /// 0 is the normal state; faults are 1-based.
    pub state_id: usize,
    /// Sample index where the fault begins; 0 (unused) for normal runs.
    pub change_point: usize,
    pub n_channels: usize,
    /// T x N, row-major by time sample.
    pub samples: Vec<f64>,
    pub sample_period_min: f64,
}

impl SimulationRun {
    pub fn t_len(&self) -> usize {
        if self.n_channels == 0 {
            0
        } else {
            self.samples.len() / self.n_channels
        }
    }

    pub fn sample(&self, t: usize) -> &[f64] {
        &self.samples[t * self.n_channels..(t + 1) * self.n_channels]
    }
}

/// One classifier input: an N x m slice of channels ending at `end_index`.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// N x m row-major; row i is channel i's m consecutive values.
    pub features: Vec<f64>,
    pub label: usize,
    pub run_id: u32,
    pub end_index: usize,
}

/// Per-channel standard-score statistics, fit on training runs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Content hash over the exact f64 bits; used to detect evaluating a
    /// checkpoint against the wrong normalization.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything needed to rebuild a dataset view deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_channels: usize,
    pub n_states: usize,
    pub window: usize,
    pub stride: usize,
    pub change_point: usize,
    pub norm_stats: NormStats,
    pub split_seed: u64,
    pub split_fraction: f64,
    pub train_fraction: f64,
}

/// Loads long-format CSV: header `run_id,state_id,sample,ch_0,...,ch_{N-1}`,
/// rows grouped by run and ordered by sample (0,1,2,...). Faulty runs get
/// `change_point`; normal runs get 0.
pub fn load_runs_csv(path: &Path, change_point: usize) -> Result<Vec<SimulationRun>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or(DataError::Empty { what: "csv file" })??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[0] != "run_id" || cols[1] != "state_id" || cols[2] != "sample" {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("expected header run_id,state_id,sample,ch_0,..., got '{header}'"),
        });
    }
    let n_channels = cols.len() - 3;
    for (i, name) in cols[3..].iter().enumerate() {
        if *name != format!("ch_{i}") {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("channel column {} named '{name}', expected 'ch_{i}'", i + 3),
            });
        }
    }

    let mut runs: Vec<SimulationRun> = Vec::new();
    let mut seen: std::collections::HashSet<u32> = std::collections::HashSet::new();
    let mut current: Option<SimulationRun> = None;

    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != n_channels + 3 {
            return Err(parse_err(format!(
                "expected {} fields, got {}",
                n_channels + 3,
                fields.len()
            )));
        }
        let run_id: u32 = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("run_id: {e}")))?;
        let state_id: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(format!("state_id: {e}")))?;
        let sample: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("sample: {e}")))?;
        let mut values = Vec::with_capacity(n_channels);
        for (ci, cell) in fields[3..].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|e| parse_err(format!("ch_{ci}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("ch_{ci}: non-finite value")));
            }
            values.push(v);
        }

        let start_new = match &current {
            None => true,
            Some(run) => run.run_id != run_id,
        };
        if start_new {
            if let Some(run) = current.take() {
                runs.push(run);
            }
            if !seen.insert(run_id) {
                return Err(parse_err(format!("run {run_id} appears in two groups")));
            }
            if sample != 0 {
                return Err(parse_err(format!("run {run_id} starts at sample {sample}, expected 0")));
            }
            current = Some(SimulationRun {
                run_id,
                state_id,
                change_point: if state_id == 0 { 0 } else { change_point },
                n_channels,
                samples: values,
                sample_period_min: SAMPLE_PERIOD_MINUTES,
            });
        } else {
            let run = current.as_mut().expect("current run exists");
            if run.state_id != state_id {
                return Err(parse_err(format!(
                    "run {run_id} changes state from {} to {state_id}",
                    run.state_id
                )));
            }
            let expected = run.t_len();
            if sample != expected {
                return Err(parse_err(format!(
                    "run {run_id} sample index {sample} out of order, expected {expected}"
                )));
            }
            run.samples.extend_from_slice(&values);
        }
    }
    if let Some(run) = current.take() {
        runs.push(run);
    }
    if runs.is_empty() {
        return Err(DataError::Empty { what: "csv file" });
    }
    Ok(runs)
}

/// Writes runs in the `load_runs_csv` format. Values print in shortest
/// round-trip form, so reloading reproduces them bit-exactly.
pub fn write_runs_csv(path: &Path, runs: &[SimulationRun]) -> Result<(), DataError> {
    let n = runs.first().map(|r| r.n_channels).unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let channels: Vec<String> = (0..n).map(|i| format!("ch_{i}")).collect();
    writeln!(out, "run_id,state_id,sample,{}", channels.join(","))?;
    for run in runs {
        for t in 0..run.t_len() {
            let row: Vec<String> = run.sample(t).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{},{}", run.run_id, run.state_id, t, row.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-channel mean/std over all samples of the given (training) runs.
/// Zero-variance channels get std = 1 with a warning.
pub fn fit_norm(runs: &[SimulationRun]) -> Result<NormStats, DataError> {
    let n = runs.first().ok_or(DataError::Empty { what: "runs" })?.n_channels;
    let total: usize = runs.iter().map(|r| r.t_len()).sum();
    if total < 2 {
        return Err(DataError::Inconsistent(format!(
            "need at least 2 samples to fit statistics, got {total}"
        )));
    }
    let mut mean = vec![0.0; n];
    for run in runs {
        if run.n_channels != n {
            return Err(DataError::Inconsistent(format!(
                "run {} has {} channels, expected {n}",
                run.run_id, run.n_channels
            )));
        }
        for t in 0..run.t_len() {
            for (m, v) in mean.iter_mut().zip(run.sample(t)) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }
    let mut var = vec![0.0; n];
    for run in runs {
        for t in 0..run.t_len() {
            for ((s, v), m) in var.iter_mut().zip(run.sample(t)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = (s / total as f64).sqrt();
            if sd == 0.0 {
                log::warn!("channel {i} has zero variance; std clamped to 1");
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Applies z = (x - mean) / std in place.
pub fn apply_norm(runs: &mut [SimulationRun], stats: &NormStats) -> Result<(), DataError> {
    for run in runs {
        if run.n_channels != stats.mean.len() {
            return Err(DataError::Inconsistent(format!(
                "run {} has {} channels, stats have {}",
                run.run_id,
                run.n_channels,
                stats.mean.len()
            )));
        }
        let n = run.n_channels;
        for row in run.samples.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.mean[j]) / stats.std[j];
            }
        }
    }
    Ok(())
}

/// Slices a run into windows ending at m-1, m-1+stride, ... The label is the
/// run state if the window's last sample is at or past the change point,
/// otherwise 0.
pub fn make_windows(run: &SimulationRun, m: usize, stride: usize) -> Vec<WindowSample> {
    assert!(m >= 1 && stride >= 1, "window and stride must be positive");
    let t_len = run.t_len();
    if t_len < m {
        log::warn!(
            "run {} has {} samples, shorter than window {m}; no windows",
            run.run_id,
            t_len
        );
        return Vec::new();
    }
    let n = run.n_channels;
    let mut windows = Vec::with_capacity((t_len - m) / stride + 1);
    let mut end = m - 1;
    while end < t_len {
        let start = end + 1 - m;
        let mut features = vec![0.0; n * m];
        for t in 0..m {
            let row = run.sample(start + t);
            for ch in 0..n {
                features[ch * m + t] = row[ch];
            }
        }
        let label = if run.state_id != 0 && end >= run.change_point {
            run.state_id
        } else {
            0
        };
        windows.push(WindowSample {
            features,
            label,
            run_id: run.run_id,
            end_index: end,
        });
        end += stride;
    }
    windows
}

/// Splits by run (never by window), stratified per state, deterministic for
/// a given seed. A state with a single run goes to train with a warning.
pub fn split_runs(
    runs: Vec<SimulationRun>,
    train_fraction: f64,
    seed: u64,
) -> (Vec<SimulationRun>, Vec<SimulationRun>) {
    use rand::seq::SliceRandom;
    let mut by_state: std::collections::BTreeMap<usize, Vec<SimulationRun>> =
        std::collections::BTreeMap::new();
    for run in runs {
        by_state.entry(run.state_id).or_default().push(run);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (state, mut group) in by_state {
        group.sort_by_key(|r| r.run_id);
        if group.len() == 1 {
            log::warn!("state {state} has a single run; assigning it to train");
            train.extend(group);
            continue;
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng = rng::seeded(rng::derive_seed(seed, state as u64));
        order.shuffle(&mut rng);
        let n_train = ((group.len() as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, group.len());
        // drain in shuffled order; relative order within splits is by position
        let mut chosen: Vec<(usize, bool)> = order
            .iter()
            .enumerate()
            .map(|(pos, &idx)| (idx, pos < n_train))
            .collect();
        chosen.sort_by_key(|(idx, _)| *idx);
        for ((_, to_train), run) in chosen.into_iter().zip(group) {
            if to_train {
                train.push(run);
            } else {
                test.push(run);
            }
        }
    }
    if test.is_empty() {
        log::warn!("test split is empty (train fraction too high)");
    }
    (train, test)
}

/// Keeps a stratified fraction of the runs; used to reproduce the
/// reduced-dataset protocol (e.g. 10% of the training simulations).
pub fn subsample_runs(runs: Vec<SimulationRun>, fraction: f64, seed: u64) -> Vec<SimulationRun> {
    if fraction >= 1.0 {
        return runs;
    }
    use rand::seq::SliceRandom;
    let mut by_state: std::collections::BTreeMap<usize, Vec<SimulationRun>> =
        std::collections::BTreeMap::new();
    for run in runs {
        by_state.entry(run.state_id).or_default().push(run);
    }
    let mut kept = Vec::new();
    for (state, mut group) in by_state {
        group.sort_by_key(|r| r.run_id);
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng = rng::seeded(rng::derive_seed(seed.wrapping_add(0x5u64), state as u64));
        order.shuffle(&mut rng);
        let n_keep = (((group.len() as f64) * fraction).round() as usize).clamp(1, group.len());
        let keep: std::collections::HashSet<usize> = order.into_iter().take(n_keep).collect();
        for (idx, run) in group.into_iter().enumerate() {
            if keep.contains(&idx) {
                kept.push(run);
            }
        }
    }
    kept
}

/// Windows all runs with the given window/stride.
pub fn windows_of(runs: &[SimulationRun], m: usize, stride: usize) -> Vec<WindowSample> {
    runs.iter().flat_map(|r| make_windows(r, m, stride)).collect()
}

/// Number of classes implied by a run set (max state id + 1).
pub fn n_classes(runs: &[SimulationRun]) -> usize {
    runs.iter().map(|r| r.state_id).max().map_or(0, |m| m + 1)
}
