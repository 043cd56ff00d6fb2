//! Evaluation protocol: per-fault TPR/FPR, detection TPR/FPR, average
//! detection delay, node importance, and graph-recovery scoring.
//!
//! Streams are produced at stride 1 regardless of the training stride, so
//! detection delay is resolved to single sample points. True-normal windows
//! include whole normal runs and the pre-change segment of faulty runs; the
//! report declares that convention in its header.

use crate::data::SimulationRun;
use crate::graph::AdjacencyMatrix;
use crate::models::{Model, ModelError};
use crate::tensor::rng;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: &str = "fddreport-v1";
pub const FPR_CONVENTION: &str =
    "true-normal windows = normal runs plus pre-change windows of faulty runs";

/// Windows per inference batch when streaming a run through a model.
const STREAM_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ground truth has no nonzero off-diagonal edges")]
    EmptyTruth,
    #[error("k = {k} exceeds the {available} available edges")]
    KTooLarge { k: usize, available: usize },
    #[error("adjacency has {a} nodes, ground truth has {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One evaluated window: position, model output, true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub end_index: usize,
    pub predicted: usize,
    pub actual: usize,
}

/// Stride-1 predictions over one test run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionStream {
    pub run_id: u32,
    pub state_id: usize,
    pub change_point: usize,
    pub t_len: usize,
    pub entries: Vec<StreamEntry>,
}

/// Slides a stride-1 window over the run (already normalized with training
/// statistics) and records the argmax class per window.
pub fn classify_stream(model: &Model, run: &SimulationRun, m: usize) -> Result<PredictionStream, EvalError> {
    let t_len = run.t_len();
    let mut entries = Vec::new();
    if t_len < m {
        log::warn!(
            "run {} shorter ({t_len}) than window ({m}); empty prediction stream",
            run.run_id
        );
    } else {
        let windows = crate::data::make_windows(run, m, 1);
        for chunk in windows.chunks(STREAM_CHUNK) {
            let views: Vec<&[f64]> = chunk.iter().map(|w| w.features.as_slice()).collect();
            let preds = model.predict(&views)?;
            for (w, p) in chunk.iter().zip(preds) {
                entries.push(StreamEntry {
                    end_index: w.end_index,
                    predicted: p,
                    actual: w.label,
                });
            }
        }
    }
    Ok(PredictionStream {
        run_id: run.run_id,
        state_id: run.state_id,
        change_point: run.change_point,
        t_len,
        entries,
    })
}

/// Streams every run, optionally in parallel worker threads. Results are
/// ordered like the input regardless of scheduling.
pub fn classify_runs(
    model: &Model,
    runs: &[SimulationRun],
    m: usize,
    threads: usize,
) -> Result<Vec<PredictionStream>, EvalError> {
    let threads = threads.max(1).min(runs.len().max(1));
    if threads <= 1 || runs.len() <= 1 {
        return runs.iter().map(|r| classify_stream(model, r, m)).collect();
    }
    let mut slots: Vec<Option<Result<PredictionStream, EvalError>>> = Vec::new();
    slots.resize_with(runs.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= runs.len() {
                    break;
                }
                let result = classify_stream(model, &runs[idx], m);
                slot_refs.lock().expect("no poisoned workers")[idx] = Some(result);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// TPR/FPR for one fault class; `None` marks an undefined rate (no windows
/// of that class were observed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultRow {
    pub state_id: usize,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Per-class TPR/FPR (one-vs-rest). For class c:
/// TPR_c = P(predicted c | actually c), over faulty windows of class c;
/// FPR_c = P(predicted c | actually normal), over all true-normal windows.
pub fn per_fault_metrics(streams: &[PredictionStream], n_classes: usize) -> Vec<FaultRow> {
    let mut class_windows = vec![0u64; n_classes];
    let mut class_hits = vec![0u64; n_classes];
    let mut normal_windows = 0u64;
    let mut false_flags = vec![0u64; n_classes];
    for stream in streams {
        for e in &stream.entries {
            if e.actual == 0 {
                normal_windows += 1;
                if e.predicted != 0 && e.predicted < n_classes {
                    false_flags[e.predicted] += 1;
                }
            } else if e.actual < n_classes {
                class_windows[e.actual] += 1;
                if e.predicted == e.actual {
                    class_hits[e.actual] += 1;
                }
            }
        }
    }
    (1..n_classes)
        .map(|c| FaultRow {
            state_id: c,
            tpr: if class_windows[c] > 0 {
                Some(class_hits[c] as f64 / class_windows[c] as f64)
            } else {
                None
            },
            fpr: if normal_windows > 0 {
                Some(false_flags[c] as f64 / normal_windows as f64)
            } else {
                None
            },
        })
        .collect()
}

/// Binarized rates, irrespective of which fault was predicted:
/// detection TPR = faulty windows flagged as any fault / faulty windows;
/// detection FPR = true-normal windows flagged as any fault / normal windows.
pub fn detection_metrics(streams: &[PredictionStream]) -> (Option<f64>, Option<f64>) {
    let mut faulty = 0u64;
    let mut flagged_faulty = 0u64;
    let mut normal = 0u64;
    let mut flagged_normal = 0u64;
    for stream in streams {
        for e in &stream.entries {
            if e.actual == 0 {
                normal += 1;
                if e.predicted != 0 {
                    flagged_normal += 1;
                }
            } else {
                faulty += 1;
                if e.predicted != 0 {
                    flagged_faulty += 1;
                }
            }
        }
    }
    let tpr = (faulty > 0).then(|| flagged_faulty as f64 / faulty as f64);
    let fpr = (normal > 0).then(|| flagged_normal as f64 / normal as f64);
    (tpr, fpr)
}

/// Average detection delay in sample points and minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionDelay {
    pub points: f64,
    pub minutes: f64,
}

/// Mean delay between each faulty run's change point and its first fault
/// flag at or after it. Runs never flagged contribute their maximal
/// observable delay, T - change_point; predictions before the change point
/// do not enter the accounting.
pub fn average_detection_delay(
    streams: &[PredictionStream],
    sample_period_min: f64,
) -> Option<DetectionDelay> {
    let mut total = 0.0;
    let mut count = 0usize;
    for stream in streams {
        if stream.state_id == 0 {
            continue;
        }
        let cp = stream.change_point;
        let delay = stream
            .entries
            .iter()
            .find(|e| e.end_index >= cp && e.predicted != 0)
            .map(|e| (e.end_index - cp) as f64)
            .unwrap_or((stream.t_len - cp) as f64);
        total += delay;
        count += 1;
    }
    (count > 0).then(|| {
        let points = total / count as f64;
        DetectionDelay {
            points,
            minutes: points * sample_period_min,
        }
    })
}

/// Per-node sum of absolute outgoing edge weights, diagonal excluded.
pub fn node_importance(a: &AdjacencyMatrix) -> Vec<f64> {
    let n = a.n_nodes();
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| a.get(i, j).abs()).sum())
        .collect()
}

/// Fraction of the k largest-|weight| learned off-diagonal edges that are
/// nonzero in the ground truth (row-major N x N).
pub fn graph_recovery_precision(
    a: &AdjacencyMatrix,
    truth: &[f64],
    k: usize,
) -> Result<f64, EvalError> {
    let n = a.n_nodes();
    if truth.len() != n * n {
        return Err(EvalError::DimensionMismatch {
            a: n,
            b: (truth.len() as f64).sqrt() as usize,
        });
    }
    let true_edges: usize = off_diagonal(n).filter(|&(i, j)| truth[i * n + j] != 0.0).count();
    if true_edges == 0 {
        return Err(EvalError::EmptyTruth);
    }
    if k > true_edges {
        return Err(EvalError::KTooLarge {
            k,
            available: true_edges,
        });
    }
    let mut learned: Vec<(usize, usize, f64)> = off_diagonal(n)
        .map(|(i, j)| (i, j, a.get(i, j).abs()))
        .filter(|&(_, _, w)| w > 0.0)
        .collect();
    if k > learned.len() {
        return Err(EvalError::KTooLarge {
            k,
            available: learned.len(),
        });
    }
    learned.sort_by(|x, y| y.2.partial_cmp(&x.2).expect("finite weights").then((x.0, x.1).cmp(&(y.0, y.1))));
    let hits = learned
        .iter()
        .take(k)
        .filter(|&&(i, j, _)| truth[i * n + j] != 0.0)
        .count();
    Ok(hits as f64 / k as f64)
}

/// Monte-Carlo expectation of recovery precision when k off-diagonal slots
/// are chosen uniformly at random without replacement.
pub fn expected_random_precision(truth: &[f64], n: usize, k: usize, trials: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let slots: Vec<(usize, usize)> = off_diagonal(n).collect();
    let mut rng = rng::seeded(seed);
    let mut total = 0.0;
    let mut pool: Vec<usize> = (0..slots.len()).collect();
    for _ in 0..trials {
        pool.shuffle(&mut rng);
        let hits = pool
            .iter()
            .take(k)
            .filter(|&&s| {
                let (i, j) = slots[s];
                truth[i * n + j] != 0.0
            })
            .count();
        total += hits as f64 / k as f64;
    }
    total / trials as f64
}

fn off_diagonal(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Window counts backing the report's rates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub n_runs: usize,
    pub n_windows: u64,
    pub n_faulty_windows: u64,
    pub n_normal_windows: u64,
    pub per_class_windows: Vec<u64>,
}

/// Evaluation output: detection rates, delay, per-fault rows, confusion
/// counts, and (when the model has a graph) node importance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FddReport {
    pub version: String,
    pub fpr_convention: String,
    pub detection_tpr: Option<f64>,
    pub detection_fpr: Option<f64>,
    pub add_points: Option<f64>,
    pub add_minutes: Option<f64>,
    pub per_fault: Vec<FaultRow>,
    /// confusion[actual][predicted]
    pub confusion: Vec<Vec<u64>>,
    pub totals: ReportTotals,
    pub node_importance: Option<Vec<f64>>,
}

pub fn build_report(
    streams: &[PredictionStream],
    n_classes: usize,
    sample_period_min: f64,
    node_importance: Option<Vec<f64>>,
) -> FddReport {
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut per_class = vec![0u64; n_classes];
    let mut n_windows = 0u64;
    for stream in streams {
        for e in &stream.entries {
            confusion[e.actual][e.predicted.min(n_classes - 1)] += 1;
            per_class[e.actual] += 1;
            n_windows += 1;
        }
    }
    let (detection_tpr, detection_fpr) = detection_metrics(streams);
    let add = average_detection_delay(streams, sample_period_min);
    FddReport {
        version: REPORT_VERSION.to_string(),
        fpr_convention: FPR_CONVENTION.to_string(),
        detection_tpr,
        detection_fpr,
        add_points: add.map(|d| d.points),
        add_minutes: add.map(|d| d.minutes),
        per_fault: per_fault_metrics(streams, n_classes),
        confusion,
        totals: ReportTotals {
            n_runs: streams.len(),
            n_windows,
            n_faulty_windows: per_class.iter().skip(1).sum(),
            n_normal_windows: per_class[0],
            per_class_windows: per_class,
        },
        node_importance,
    }
}

impl FddReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text tables mirroring the detection-summary and per-fault
    /// layouts.
    pub fn to_text(&self, model_name: &str) -> String {
        let fmt_rate = |r: Option<f64>| match r {
            Some(v) => format!("{v:.4}"),
            None => "undef".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("# Detection summary ({})\n", self.fpr_convention));
        out.push_str("Model | Detection TPR | Detection FPR | ADD (points) | ADD (minutes)\n");
        out.push_str(&format!(
            "{model_name} | {} | {} | {} | {}\n\n",
            fmt_rate(self.detection_tpr),
            fmt_rate(self.detection_fpr),
            fmt_rate(self.add_points),
            fmt_rate(self.add_minutes),
        ));
        out.push_str("# Per-fault results (TPR/FPR)\n");
        out.push_str("Fault ID | TPR | FPR\n");
        for row in &self.per_fault {
            out.push_str(&format!(
                "{} | {} | {}\n",
                row.state_id,
                fmt_rate(row.tpr),
                fmt_rate(row.fpr)
            ));
        }
        out
    }
}

/// `node,importance` CSV.
pub fn node_importance_csv(importance: &[f64]) -> String {
    let mut out = String::from("node,importance\n");
    for (i, v) in importance.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Long-format `i,j,weight` CSV for external heat-map plotting.
pub fn adjacency_heatmap_csv(a: &AdjacencyMatrix) -> String {
    let mut out = String::from("i,j,weight\n");
    let n = a.n_nodes();
    for i in 0..n {
        for j in 0..n {
            out.push_str(&format!("{i},{j},{}\n", a.get(i, j)));
        }
    }
    out
}
