//! Weighted adjacency matrices over sensor nodes.
//!
//! Matrices come from a trainable constructor ([`GraphLearner`]), from the
//! Pearson-correlation baseline, or from an imported file. All of them can be
//! sparsified per node ([`topk_sparsify`]) and degree-normalized with added
//! self-connections ([`normalize_adjacency`]) before entering a GCN layer.

pub mod learner;

pub use learner::{normalize_on_tape, GraphLearner};

use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("{variant} invariant violated: {msg}")]
    VariantInvariant { variant: GraphVariant, msg: String },
    #[error("unknown graph variant '{0}'")]
    UnknownVariant(String),
    #[error("variant {0} has no trainable parameters")]
    NotTrainable(GraphVariant),
    #[error("alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("top-k requires k >= 1")]
    InvalidTopK,
    #[error("correlation needs at least {needed} {what}, got {got}")]
    InsufficientData {
        needed: usize,
        got: usize,
        what: &'static str,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Tag of the method that produced an adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    ReluW,
    UniDirected,
    Undirected,
    Directed,
    TanhW,
    Correlation,
    Imported,
}

impl GraphVariant {
    pub const TRAINABLE: [GraphVariant; 5] = [
        GraphVariant::ReluW,
        GraphVariant::UniDirected,
        GraphVariant::Undirected,
        GraphVariant::Directed,
        GraphVariant::TanhW,
    ];

    pub fn is_trainable(self) -> bool {
        Self::TRAINABLE.contains(&self)
    }

    fn tag(self) -> &'static str {
        match self {
            GraphVariant::ReluW => "relu_w",
            GraphVariant::UniDirected => "uni_directed",
            GraphVariant::Undirected => "undirected",
            GraphVariant::Directed => "directed",
            GraphVariant::TanhW => "tanh_w",
            GraphVariant::Correlation => "correlation",
            GraphVariant::Imported => "imported",
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for GraphVariant {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s {
            "relu_w" => Ok(GraphVariant::ReluW),
            "uni_directed" => Ok(GraphVariant::UniDirected),
            "undirected" => Ok(GraphVariant::Undirected),
            "directed" => Ok(GraphVariant::Directed),
            "tanh_w" => Ok(GraphVariant::TanhW),
            "correlation" => Ok(GraphVariant::Correlation),
            "imported" => Ok(GraphVariant::Imported),
            other => Err(GraphError::UnknownVariant(other.to_string())),
        }
    }
}

/// N x N weighted graph over sensors, with the producing method and the
/// optional per-node out-edge limit recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    n: usize,
    variant: GraphVariant,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
}

impl AdjacencyMatrix {
    pub fn new(n: usize, variant: GraphVariant, weights: Vec<f64>) -> Result<Self, GraphError> {
        if weights.len() != n * n {
            let cols = if n == 0 { 0 } else { weights.len() / n };
            return Err(GraphError::NotSquare { rows: n, cols });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(GraphError::Tensor(TensorError::NonFinite { op: "adjacency" }));
        }
        Ok(AdjacencyMatrix {
            n,
            variant,
            weights,
            top_k: None,
        })
    }

    pub fn zeros(n: usize, variant: GraphVariant) -> Self {
        AdjacencyMatrix {
            n,
            variant,
            weights: vec![0.0; n * n],
            top_k: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, GraphVariant::Imported);
        for i in 0..n {
            m.weights[i * n + i] = 1.0;
        }
        m
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn variant(&self) -> GraphVariant {
        self.variant
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn top_k(&self) -> Option<usize> {
        self.top_k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    /// Checks the variant-specific invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        let fail = |msg: String| {
            Err(GraphError::VariantInvariant {
                variant: self.variant,
                msg,
            })
        };
        let n = self.n;
        match self.variant {
            GraphVariant::Undirected => {
                for i in 0..n {
                    for j in 0..n {
                        let d = (self.get(i, j) - self.get(j, i)).abs();
                        if d > 1e-9 {
                            return fail(format!("asymmetry {d:e} at ({i},{j})"));
                        }
                    }
                }
            }
            GraphVariant::UniDirected => {
                for i in 0..n {
                    if self.get(i, i) != 0.0 {
                        return fail(format!("nonzero diagonal at {i}"));
                    }
                    for j in 0..n {
                        if self.get(i, j) > 0.0 && self.get(j, i) != 0.0 {
                            return fail(format!("both directions present at ({i},{j})"));
                        }
                    }
                }
            }
            _ => {}
        }
        match self.variant {
            GraphVariant::TanhW => {
                if self.weights.iter().any(|&w| w <= -1.0 || w >= 1.0) {
                    return fail("weight outside (-1, 1)".into());
                }
            }
            GraphVariant::Imported => {}
            _ => {
                if self.weights.iter().any(|&w| w < 0.0) {
                    return fail("negative weight".into());
                }
            }
        }
        if let Some(k) = self.top_k {
            for i in 0..n {
                let nz = (0..n).filter(|&j| self.get(i, j) != 0.0).count();
                if nz > k {
                    return fail(format!("row {i} has {nz} nonzeros > k = {k}"));
                }
            }
        }
        Ok(())
    }

    /// Per-node count of nonzero entries, row-wise.
    pub fn row_nonzeros(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j) != 0.0).count()
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let m: AdjacencyMatrix = serde_json::from_str(s)?;
        if m.weights.len() != m.n * m.n {
            return Err(GraphError::NotSquare {
                rows: m.n,
                cols: if m.n == 0 { 0 } else { m.weights.len() / m.n },
            });
        }
        Ok(m)
    }

    /// N rows of N comma-separated weights.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for row in self.weights.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the CSV form; the result carries the `imported` variant.
    pub fn from_csv_str(s: &str) -> Result<Self, GraphError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| GraphError::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        let n = rows.len();
        for (idx, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::Parse {
                    line: idx + 1,
                    msg: format!("expected {n} columns, got {}", row.len()),
                });
            }
        }
        AdjacencyMatrix::new(n, GraphVariant::Imported, rows.concat())
    }

    pub fn read_file(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_csv_str(&text)
        }
    }
}

/// Per row, keeps the k largest-weight entries (largest magnitude for the
/// signed tanh variant) and zeroes the rest. Retained entries keep their
/// exact values, so the operation is idempotent; ties keep the lowest index.
pub fn topk_sparsify(a: &AdjacencyMatrix, k: usize) -> Result<AdjacencyMatrix, GraphError> {
    if k == 0 {
        return Err(GraphError::InvalidTopK);
    }
    let n = a.n;
    let by_abs = a.variant == GraphVariant::TanhW;
    let mut weights = vec![0.0; n * n];
    if k >= n {
        weights.copy_from_slice(&a.weights);
    } else {
        for i in 0..n {
            let row = &a.weights[i * n..(i + 1) * n];
            let key = |v: f64| if by_abs { v.abs() } else { v };
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&x, &y| key(row[y]).partial_cmp(&key(row[x])).unwrap().then(x.cmp(&y)));
            for &j in idx.iter().take(k) {
                weights[i * n + j] = row[j];
            }
        }
    }
    Ok(AdjacencyMatrix {
        n,
        variant: a.variant,
        weights,
        top_k: Some(k),
    })
}

/// Adjacency with self-connections, degree-normalized on both sides.
///
/// Degrees are sums of absolute values, which coincides with the plain row
/// sum for nonnegative variants and keeps the inverse square root defined
/// when weights are signed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    a_hat: Vec<f64>,
    degrees: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn a_hat(&self) -> &[f64] {
        &self.a_hat
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }
}

pub fn normalize_adjacency(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    let n = a.n;
    let mut tilde = a.weights.clone();
    for i in 0..n {
        tilde[i * n + i] += 1.0;
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| tilde[i * n..(i + 1) * n].iter().map(|w| w.abs()).sum())
        .collect();
    let mut a_hat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a_hat[i * n + j] = tilde[i * n + j] / (degrees[i] * degrees[j]).sqrt();
        }
    }
    NormalizedAdjacency { n, a_hat, degrees }
}

/// Pearson-correlation adjacency over pooled training samples.
///
/// `rows` are time samples of length `n_channels`. Signed coefficients below
/// `threshold` are removed (so strong negative correlations drop out), the
/// diagonal is zeroed, and zero-variance channels get a zeroed row/column
/// with a warning.
pub fn correlation_adjacency(
    rows: &[&[f64]],
    n_channels: usize,
    threshold: f64,
) -> Result<AdjacencyMatrix, GraphError> {
    let t = rows.len();
    if t < 2 {
        return Err(GraphError::InsufficientData {
            needed: 2,
            got: t,
            what: "samples",
        });
    }
    if n_channels < 2 {
        return Err(GraphError::InsufficientData {
            needed: 2,
            got: n_channels,
            what: "channels",
        });
    }
    let n = n_channels;
    let mut mean = vec![0.0; n];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(*row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    // centered second moments
    let mut cov = vec![0.0; n * n];
    let mut centered = vec![0.0; n];
    for row in rows {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..n {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..n {
                cov[i * n + j] += ci * centered[j];
            }
        }
    }
    let var: Vec<f64> = (0..n).map(|i| cov[i * n + i]).collect();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        if var[i] == 0.0 {
            log::warn!("channel {i} has zero variance; correlation row/column zeroed");
            continue;
        }
        for j in 0..n {
            if i == j || var[j] == 0.0 {
                continue;
            }
            let r = cov[i * n + j] / (var[i].sqrt() * var[j].sqrt());
            if r >= threshold {
                weights[i * n + j] = r;
            }
        }
    }
    AdjacencyMatrix::new(n, GraphVariant::Correlation, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;
    use rand::Rng as _;

    #[test]
    fn normalize_zero_matrix_is_identity() {
        let a = AdjacencyMatrix::zeros(2, GraphVariant::Imported);
        let norm = normalize_adjacency(&a);
        assert_eq!(norm.a_hat(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(norm.degrees(), &[1.0, 1.0]);
    }

    #[test]
    fn normalize_symmetric_pair_is_all_half() {
        let a = AdjacencyMatrix::new(2, GraphVariant::Imported, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let norm = normalize_adjacency(&a);
        assert_eq!(norm.a_hat(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(norm.degrees(), &[2.0, 2.0]);
    }

    #[test]
    fn normalize_signed_pair_keeps_signs() {
        // absolute degrees keep the normalization defined for signed weights
        let a = AdjacencyMatrix::new(2, GraphVariant::TanhW, vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        let norm = normalize_adjacency(&a);
        assert_eq!(norm.a_hat(), &[0.5, -0.5, -0.5, 0.5]);
        assert_eq!(norm.degrees(), &[2.0, 2.0]);
    }

    #[test]
    fn topk_examples() {
        let a = AdjacencyMatrix::new(3, GraphVariant::Imported, vec![
            0.5, 0.2, 0.9, //
            0.5, 0.5, 0.5, //
            0.1, 0.3, 0.2,
        ])
        .unwrap();
        let k2 = topk_sparsify(&a, 2).unwrap();
        assert_eq!(&k2.weights()[0..3], &[0.5, 0.0, 0.9]);
        assert_eq!(k2.top_k(), Some(2));

        let k1 = topk_sparsify(&a, 1).unwrap();
        // tie row keeps the lowest index
        assert_eq!(&k1.weights()[3..6], &[0.5, 0.0, 0.0]);

        let k3 = topk_sparsify(&a, 3).unwrap();
        assert_eq!(k3.weights(), a.weights());

        // idempotence
        let again = topk_sparsify(&k2, 2).unwrap();
        assert_eq!(again.weights(), k2.weights());
    }

    #[test]
    fn topk_rejects_zero() {
        let a = AdjacencyMatrix::zeros(2, GraphVariant::Imported);
        assert!(matches!(topk_sparsify(&a, 0), Err(GraphError::InvalidTopK)));
    }

    #[test]
    fn topk_on_tanh_ranks_by_magnitude() {
        let a = AdjacencyMatrix::new(2, GraphVariant::TanhW, vec![-0.9, 0.1, 0.2, -0.05]).unwrap();
        let k1 = topk_sparsify(&a, 1).unwrap();
        assert_eq!(k1.weights(), &[-0.9, 0.0, 0.2, 0.0]);
    }

    #[test]
    fn correlation_copy_and_negation() {
        let mut rng = rng::seeded(3);
        let mut rows = Vec::new();
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..1.0);
            rows.push(vec![x, x, -x]);
        }
        let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = correlation_adjacency(&views, 3, 0.3).unwrap();
        assert!((a.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((a.get(1, 0) - 1.0).abs() < 1e-12);
        // perfectly negative correlation is below the signed threshold
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.get(2, 0), 0.0);
        assert_eq!(a.get(0, 0), 0.0);
        a.validate().unwrap();
    }

    #[test]
    fn correlation_independent_noise_is_disconnected() {
        let mut rng = rng::seeded(8);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = correlation_adjacency(&views, 2, 0.3).unwrap();
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.get(1, 0), 0.0);
    }

    #[test]
    fn correlation_zero_variance_channel_is_zeroed() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 5.0, i as f64 * 2.0]).collect();
        let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = correlation_adjacency(&views, 3, 0.3).unwrap();
        for j in 0..3 {
            assert_eq!(a.get(1, j), 0.0);
            assert_eq!(a.get(j, 1), 0.0);
        }
        // the two informative channels stay connected
        assert!(a.get(0, 2) > 0.99);
    }

    #[test]
    fn correlation_affine_invariance() {
        let mut rng = rng::seeded(5);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = 0.7 * x + 0.3 * rng.random_range(-1.0..1.0);
                vec![x, y]
            })
            .collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| vec![3.0 * r[0] + 100.0, 0.5 * r[1] - 7.0]).collect();
        let v1: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let v2: Vec<&[f64]> = scaled.iter().map(|r| r.as_slice()).collect();
        let a1 = correlation_adjacency(&v1, 2, 0.3).unwrap();
        let a2 = correlation_adjacency(&v2, 2, 0.3).unwrap();
        for (w1, w2) in a1.weights().iter().zip(a2.weights()) {
            assert!((w1 - w2).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = rng::seeded(17);
        let weights: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = AdjacencyMatrix::new(4, GraphVariant::TanhW, weights).unwrap();
        let json = a.to_json().unwrap();
        let back = AdjacencyMatrix::from_json(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn csv_round_trip_preserves_weights() {
        let mut rng = rng::seeded(23);
        let weights: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = AdjacencyMatrix::new(3, GraphVariant::Directed, weights).unwrap();
        let csv = a.to_csv_string();
        let back = AdjacencyMatrix::from_csv_str(&csv).unwrap();
        assert_eq!(back.weights(), a.weights());
        assert_eq!(back.variant(), GraphVariant::Imported);
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        let err = AdjacencyMatrix::from_csv_str("1.0,2.0\n3.0,oops\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let ragged = AdjacencyMatrix::from_csv_str("1.0,2.0\n3.0\n").unwrap_err();
        assert!(ragged.to_string().contains("line 2"), "{ragged}");
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in [
            GraphVariant::ReluW,
            GraphVariant::UniDirected,
            GraphVariant::Undirected,
            GraphVariant::Directed,
            GraphVariant::TanhW,
            GraphVariant::Correlation,
            GraphVariant::Imported,
        ] {
            assert_eq!(v.to_string().parse::<GraphVariant>().unwrap(), v);
        }
        assert!("banana".parse::<GraphVariant>().is_err());
    }
}
