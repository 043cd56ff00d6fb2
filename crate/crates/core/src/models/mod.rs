//! Classifier architectures.
//!
//! The GNN classifier runs a graph-structure-learning layer (or a frozen
//! imported adjacency) through two GCN layers. Each layer's node
//! representations are batch-normalized and reduced with a column-wise min
//! read-out; the two read-outs are added (skip connection) and a single
//! dense head maps the result to class logits. The ensemble trains several
//! such trunks in parallel and concatenates their read-outs before a shared
//! head. MLP and 1-d CNN baselines operate on the flattened window.

pub mod checkpoint;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use train::{train, TrainConfig, TrainHistory};

use crate::graph::{
    normalize_adjacency, normalize_on_tape, AdjacencyMatrix, GraphError, GraphLearner,
    GraphVariant,
};
use crate::tensor::rng::Rng;
use crate::tensor::{Mode, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Config(String),
    #[error("train mode requested through the inference api")]
    TrainModeInInference,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("window has {got} values, expected {channels} channels x {window}")]
    WindowShape {
        got: usize,
        channels: usize,
        window: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dense layer with bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            weight: Tensor::glorot(in_dim, out_dim, rng).with_grad(),
            bias: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        w: TensorId,
        b: TensorId,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let z = tape.matmul(x, w)?;
        tape.add_row_vec(z, b)
    }
}

/// GCN layer weight; the layer applies sigma(A^ H W) with no additive bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcnLayer {
    pub weight: Tensor,
}

impl GcnLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        GcnLayer {
            weight: Tensor::glorot(in_dim, out_dim, rng).with_grad(),
        }
    }
}

/// Batch normalization state: learnable scale/shift plus running statistics
/// updated by exponential moving average during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(d: usize) -> Self {
        BatchNorm {
            scale: Tensor::from_vec(vec![d], vec![1.0; d]).expect("ones").with_grad(),
            shift: Tensor::zeros(vec![d]).with_grad(),
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        }
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - Self::MOMENTUM) * *r + Self::MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - Self::MOMENTUM) * *r + Self::MOMENTUM * v;
        }
    }
}

/// Where the adjacency comes from: learned jointly with the model, or a
/// frozen imported matrix that training never touches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GraphSource {
    Learned(GraphLearner),
    Frozen(AdjacencyMatrix),
}

impl GraphSource {
    pub fn n_nodes(&self) -> usize {
        match self {
            GraphSource::Learned(l) => l.n_nodes(),
            GraphSource::Frozen(a) => a.n_nodes(),
        }
    }
}

/// The head-less GNN module: graph source, two GCN layers, two batch norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnnTrunk {
    pub graph: GraphSource,
    pub top_k: Option<usize>,
    pub gcn1: GcnLayer,
    pub gcn2: GcnLayer,
    pub bn1: BatchNorm,
    pub bn2: BatchNorm,
    pub n_nodes: usize,
    pub window: usize,
    pub hidden: usize,
}

impl GnnTrunk {
    pub fn init(
        graph: GraphSource,
        top_k: Option<usize>,
        window: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        let n_nodes = graph.n_nodes();
        // a frozen matrix with a top-k limit is sparsified once, up front
        let graph = match (graph, top_k) {
            (GraphSource::Frozen(a), Some(k)) => {
                GraphSource::Frozen(crate::graph::topk_sparsify(&a, k)?)
            }
            (g, _) => g,
        };
        Ok(GnnTrunk {
            graph,
            top_k,
            gcn1: GcnLayer::init(window, hidden, rng),
            gcn2: GcnLayer::init(hidden, hidden, rng),
            bn1: BatchNorm::new(hidden),
            bn2: BatchNorm::new(hidden),
            n_nodes,
            window,
            hidden,
        })
    }

    fn graph_param_count(&self) -> usize {
        match &self.graph {
            GraphSource::Learned(l) => l.params().len(),
            GraphSource::Frozen(_) => 0,
        }
    }

    /// Trainable tensors: graph params, gcn weights, bn scale/shift pairs.
    fn params(&self) -> Vec<&Tensor> {
        let mut out = match &self.graph {
            GraphSource::Learned(l) => l.params(),
            GraphSource::Frozen(_) => Vec::new(),
        };
        out.push(&self.gcn1.weight);
        out.push(&self.gcn2.weight);
        out.push(&self.bn1.scale);
        out.push(&self.bn1.shift);
        out.push(&self.bn2.scale);
        out.push(&self.bn2.shift);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = match &mut self.graph {
            GraphSource::Learned(l) => l.params_mut(),
            GraphSource::Frozen(_) => Vec::new(),
        };
        out.push(&mut self.gcn1.weight);
        out.push(&mut self.gcn2.weight);
        out.push(&mut self.bn1.scale);
        out.push(&mut self.bn1.shift);
        out.push(&mut self.bn2.scale);
        out.push(&mut self.bn2.shift);
        out
    }

    fn param_count(&self) -> usize {
        self.graph_param_count() + 6
    }
}

/// Batch statistics produced by one trunk forward in train mode.
struct TrunkBnBatch {
    bn1: (Vec<f64>, Vec<f64>),
    bn2: (Vec<f64>, Vec<f64>),
}

/// Runs one trunk over stacked windows. `ids` follows the trunk's canonical
/// parameter order; in inference they may be plain inputs. Returns the B x h
/// read-out sum and, in train mode, the batch-norm statistics to fold into
/// the running estimates.
fn trunk_forward(
    trunk: &GnnTrunk,
    tape: &mut Tape,
    ids: &[TensorId],
    x_stacked: TensorId,
    mode: Mode,
) -> Result<(TensorId, Option<TrunkBnBatch>), ModelError> {
    let n = trunk.n_nodes;
    let gp = trunk.graph_param_count();
    let a_hat = match &trunk.graph {
        GraphSource::Learned(learner) => {
            let a = learner.build_on_tape(tape, &ids[..gp])?;
            let a = match trunk.top_k {
                Some(k) => tape.row_topk(a, k, learner.variant() == GraphVariant::TanhW)?,
                None => a,
            };
            normalize_on_tape(tape, a)?
        }
        GraphSource::Frozen(matrix) => {
            let norm = normalize_adjacency(matrix);
            tape.input(vec![n, n], norm.a_hat())?
        }
    };
    let (w1, w2) = (ids[gp], ids[gp + 1]);
    let (bn1_scale, bn1_shift) = (ids[gp + 2], ids[gp + 3]);
    let (bn2_scale, bn2_shift) = (ids[gp + 4], ids[gp + 5]);

    let g1 = tape.segment_matmul(a_hat, x_stacked, n)?;
    let z1 = tape.matmul(g1, w1)?;
    let h1 = tape.relu(z1)?;
    let (b1, bn1_stats) = bn_apply(tape, h1, bn1_scale, bn1_shift, &trunk.bn1, mode)?;
    let r1 = tape.segment_min(b1, n)?;

    let g2 = tape.segment_matmul(a_hat, h1, n)?;
    let z2 = tape.matmul(g2, w2)?;
    let h2 = tape.relu(z2)?;
    let (b2, bn2_stats) = bn_apply(tape, h2, bn2_scale, bn2_shift, &trunk.bn2, mode)?;
    let r2 = tape.segment_min(b2, n)?;

    let r = tape.add(r1, r2)?;
    let batch = match (bn1_stats, bn2_stats) {
        (Some(bn1), Some(bn2)) => Some(TrunkBnBatch { bn1, bn2 }),
        _ => None,
    };
    Ok((r, batch))
}

#[allow(clippy::type_complexity)]
fn bn_apply(
    tape: &mut Tape,
    x: TensorId,
    scale: TensorId,
    shift: TensorId,
    bn: &BatchNorm,
    mode: Mode,
) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>), ModelError> {
    match mode {
        Mode::Train => {
            let (out, mean, var) = tape.batch_norm_train(x, scale, shift, BatchNorm::EPS)?;
            Ok((out, Some((mean, var))))
        }
        Mode::Infer => {
            let out = tape.batch_norm_infer(
                x,
                scale,
                shift,
                &bn.running_mean,
                &bn.running_var,
                BatchNorm::EPS,
            )?;
            Ok((out, None))
        }
    }
}

/// Single-trunk GNN classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FddGnnModel {
    pub trunk: GnnTrunk,
    pub head: DenseLayer,
    pub n_classes: usize,
}

/// Several independent trunks; read-outs are concatenated into one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub trunks: Vec<GnnTrunk>,
    pub head: DenseLayer,
    pub n_classes: usize,
}

/// Two hidden dense layers over the flattened window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub l1: DenseLayer,
    pub l2: DenseLayer,
    pub head: DenseLayer,
    pub n_channels: usize,
    pub window: usize,
    pub n_classes: usize,
}

/// Convolution layer over the time axis, channels = sensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn init(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        ConvLayer {
            weight: Tensor::uniform(vec![c_out, c_in, kernel], -bound, bound, rng).with_grad(),
            bias: Tensor::zeros(vec![c_out]).with_grad(),
        }
    }
}

pub const CNN_KERNEL: usize = 5;
pub const CNN_CHANNELS_1: usize = 32;
pub const CNN_CHANNELS_2: usize = 64;

/// Two conv + max-pool blocks, then a dense head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cnn1dModel {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: DenseLayer,
    pub n_channels: usize,
    pub window: usize,
    pub n_classes: usize,
}

impl Cnn1dModel {
    fn pooled_len(&self) -> usize {
        self.window / 2 / 2
    }
}

/// Configuration for the GNN variants.
#[derive(Debug, Clone)]
pub struct GnnConfig {
    pub n_nodes: usize,
    pub window: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub variant: GraphVariant,
    pub alpha: f64,
    pub embed_dim: usize,
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Gnn(FddGnnModel),
    Ensemble(EnsembleModel),
    Mlp(MlpModel),
    Cnn1d(Cnn1dModel),
}

/// Parameter-to-tape binding for one training step. Ids follow the model's
/// canonical parameter order.
pub struct Binding {
    pub ids: Vec<TensorId>,
}

impl Model {
    pub fn new_gnn(cfg: &GnnConfig, rng: &mut Rng) -> Result<Model, ModelError> {
        let learner = GraphLearner::init(cfg.variant, cfg.n_nodes, cfg.embed_dim, cfg.alpha, rng)?;
        let trunk = GnnTrunk::init(
            GraphSource::Learned(learner),
            cfg.top_k,
            cfg.window,
            cfg.hidden,
            rng,
        )?;
        Ok(Model::Gnn(FddGnnModel {
            head: DenseLayer::init(cfg.hidden, cfg.n_classes, rng),
            trunk,
            n_classes: cfg.n_classes,
        }))
    }

    /// GNN with a frozen imported adjacency instead of a learner.
    pub fn new_gnn_frozen(
        adjacency: AdjacencyMatrix,
        top_k: Option<usize>,
        window: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<Model, ModelError> {
        let trunk = GnnTrunk::init(GraphSource::Frozen(adjacency), top_k, window, hidden, rng)?;
        Ok(Model::Gnn(FddGnnModel {
            head: DenseLayer::init(hidden, n_classes, rng),
            trunk,
            n_classes,
        }))
    }

    pub fn new_ensemble(cfg: &GnnConfig, modules: usize, rng: &mut Rng) -> Result<Model, ModelError> {
        if modules == 0 {
            return Err(ModelError::Config("ensemble needs at least one module".into()));
        }
        let mut trunks = Vec::with_capacity(modules);
        for _ in 0..modules {
            let learner =
                GraphLearner::init(cfg.variant, cfg.n_nodes, cfg.embed_dim, cfg.alpha, rng)?;
            trunks.push(GnnTrunk::init(
                GraphSource::Learned(learner),
                cfg.top_k,
                cfg.window,
                cfg.hidden,
                rng,
            )?);
        }
        Ok(Model::Ensemble(EnsembleModel {
            head: DenseLayer::init(modules * cfg.hidden, cfg.n_classes, rng),
            trunks,
            n_classes: cfg.n_classes,
        }))
    }

    pub fn new_mlp(
        n_channels: usize,
        window: usize,
        h1: usize,
        h2: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Model {
        Model::Mlp(MlpModel {
            l1: DenseLayer::init(n_channels * window, h1, rng),
            l2: DenseLayer::init(h1, h2, rng),
            head: DenseLayer::init(h2, n_classes, rng),
            n_channels,
            window,
            n_classes,
        })
    }

    pub fn new_cnn1d(
        n_channels: usize,
        window: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<Model, ModelError> {
        if window < 4 {
            return Err(ModelError::Config(format!(
                "1d cnn needs window >= 4 for two pooling stages, got {window}"
            )));
        }
        let pooled = window / 2 / 2;
        Ok(Model::Cnn1d(Cnn1dModel {
            conv1: ConvLayer::init(n_channels, CNN_CHANNELS_1, CNN_KERNEL, rng),
            conv2: ConvLayer::init(CNN_CHANNELS_1, CNN_CHANNELS_2, CNN_KERNEL, rng),
            head: DenseLayer::init(CNN_CHANNELS_2 * pooled, n_classes, rng),
            n_channels,
            window,
            n_classes,
        }))
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Gnn(m) => m.n_classes,
            Model::Ensemble(m) => m.n_classes,
            Model::Mlp(m) => m.n_classes,
            Model::Cnn1d(m) => m.n_classes,
        }
    }

    pub fn n_channels(&self) -> usize {
        match self {
            Model::Gnn(m) => m.trunk.n_nodes,
            Model::Ensemble(m) => m.trunks[0].n_nodes,
            Model::Mlp(m) => m.n_channels,
            Model::Cnn1d(m) => m.n_channels,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Model::Gnn(m) => m.trunk.window,
            Model::Ensemble(m) => m.trunks[0].window,
            Model::Mlp(m) => m.window,
            Model::Cnn1d(m) => m.window,
        }
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Gnn(m) => {
                let mut out = m.trunk.params();
                out.push(&m.head.weight);
                out.push(&m.head.bias);
                out
            }
            Model::Ensemble(m) => {
                let mut out = Vec::new();
                for trunk in &m.trunks {
                    out.extend(trunk.params());
                }
                out.push(&m.head.weight);
                out.push(&m.head.bias);
                out
            }
            Model::Mlp(m) => vec![
                &m.l1.weight,
                &m.l1.bias,
                &m.l2.weight,
                &m.l2.bias,
                &m.head.weight,
                &m.head.bias,
            ],
            Model::Cnn1d(m) => vec![
                &m.conv1.weight,
                &m.conv1.bias,
                &m.conv2.weight,
                &m.conv2.bias,
                &m.head.weight,
                &m.head.bias,
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Gnn(m) => {
                let mut out = m.trunk.params_mut();
                out.push(&mut m.head.weight);
                out.push(&mut m.head.bias);
                out
            }
            Model::Ensemble(m) => {
                let mut out = Vec::new();
                for trunk in &mut m.trunks {
                    out.extend(trunk.params_mut());
                }
                out.push(&mut m.head.weight);
                out.push(&mut m.head.bias);
                out
            }
            Model::Mlp(m) => vec![
                &mut m.l1.weight,
                &mut m.l1.bias,
                &mut m.l2.weight,
                &mut m.l2.bias,
                &mut m.head.weight,
                &mut m.head.bias,
            ],
            Model::Cnn1d(m) => vec![
                &mut m.conv1.weight,
                &mut m.conv1.bias,
                &mut m.conv2.weight,
                &mut m.conv2.bias,
                &mut m.head.weight,
                &mut m.head.bias,
            ],
        }
    }

    /// Total trainable scalars, including graph-learner parameters,
    /// batch-norm scale/shift, and biases.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers all parameters on the tape for one training step.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self.params().into_iter().map(|p| tape.param(p)).collect(),
        }
    }

    fn check_windows(&self, windows: &[&[f64]]) -> Result<(), ModelError> {
        let expect = self.n_channels() * self.window();
        for w in windows {
            if w.len() != expect {
                return Err(ModelError::WindowShape {
                    got: w.len(),
                    channels: self.n_channels(),
                    window: self.window(),
                });
            }
        }
        if windows.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        Ok(())
    }

    fn stacked_input(&self, tape: &mut Tape, windows: &[&[f64]]) -> Result<TensorId, TensorError> {
        let (n, m) = (self.n_channels(), self.window());
        let mut data = Vec::with_capacity(windows.len() * n * m);
        for w in windows {
            data.extend_from_slice(w);
        }
        tape.input(vec![windows.len() * n, m], &data)
    }

    /// Training forward pass over a window batch; updates batch-norm running
    /// statistics. The binding must come from [`Model::bind`] on this tape.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        windows: &[&[f64]],
    ) -> Result<TensorId, ModelError> {
        self.check_windows(windows)?;
        match self {
            Model::Gnn(m) => {
                let x = {
                    let (n, mm) = (m.trunk.n_nodes, m.trunk.window);
                    let mut data = Vec::with_capacity(windows.len() * n * mm);
                    for w in windows {
                        data.extend_from_slice(w);
                    }
                    tape.input(vec![windows.len() * n, mm], &data)?
                };
                let tp = m.trunk.param_count();
                let (r, stats) = trunk_forward(&m.trunk, tape, &binding.ids[..tp], x, Mode::Train)?;
                if let Some(stats) = stats {
                    m.trunk.bn1.update_running(&stats.bn1.0, &stats.bn1.1);
                    m.trunk.bn2.update_running(&stats.bn2.0, &stats.bn2.1);
                }
                let logits = m.head.forward(tape, binding.ids[tp], binding.ids[tp + 1], r)?;
                Ok(logits)
            }
            Model::Ensemble(m) => {
                let x = {
                    let (n, mm) = (m.trunks[0].n_nodes, m.trunks[0].window);
                    let mut data = Vec::with_capacity(windows.len() * n * mm);
                    for w in windows {
                        data.extend_from_slice(w);
                    }
                    tape.input(vec![windows.len() * n, mm], &data)?
                };
                let mut offset = 0;
                let mut readouts = Vec::with_capacity(m.trunks.len());
                for trunk in &mut m.trunks {
                    let tp = trunk.param_count();
                    let (r, stats) =
                        trunk_forward(trunk, tape, &binding.ids[offset..offset + tp], x, Mode::Train)?;
                    if let Some(stats) = stats {
                        trunk.bn1.update_running(&stats.bn1.0, &stats.bn1.1);
                        trunk.bn2.update_running(&stats.bn2.0, &stats.bn2.1);
                    }
                    readouts.push(r);
                    offset += tp;
                }
                let cat = tape.concat_cols(&readouts)?;
                let logits = m
                    .head
                    .forward(tape, binding.ids[offset], binding.ids[offset + 1], cat)?;
                Ok(logits)
            }
            Model::Mlp(m) => {
                let x = {
                    let mut data = Vec::new();
                    for w in windows {
                        data.extend_from_slice(w);
                    }
                    tape.input(vec![windows.len(), m.n_channels * m.window], &data)?
                };
                mlp_pipeline(m, tape, &binding.ids, x)
            }
            Model::Cnn1d(m) => {
                let x = {
                    let mut data = Vec::new();
                    for w in windows {
                        data.extend_from_slice(w);
                    }
                    tape.input(vec![windows.len(), m.n_channels, m.window], &data)?
                };
                cnn_pipeline(m, tape, &binding.ids, x)
            }
        }
    }

    /// Inference logits for a window batch. Rejects train mode: training goes
    /// through [`Model::forward_train`] with a parameter binding.
    pub fn infer_logits(&self, windows: &[&[f64]], mode: Mode) -> Result<Vec<Vec<f64>>, ModelError> {
        if mode == Mode::Train {
            return Err(ModelError::TrainModeInInference);
        }
        self.check_windows(windows)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = self.params().into_iter().map(|p| tape.input_tensor(p)).collect();
        let logits = match self {
            Model::Gnn(m) => {
                let x = self.stacked_input(&mut tape, windows)?;
                let tp = m.trunk.param_count();
                let (r, _) = trunk_forward(&m.trunk, &mut tape, &ids[..tp], x, Mode::Infer)?;
                m.head.forward(&mut tape, ids[tp], ids[tp + 1], r)?
            }
            Model::Ensemble(m) => {
                let x = self.stacked_input(&mut tape, windows)?;
                let mut offset = 0;
                let mut readouts = Vec::with_capacity(m.trunks.len());
                for trunk in &m.trunks {
                    let tp = trunk.param_count();
                    let (r, _) =
                        trunk_forward(trunk, &mut tape, &ids[offset..offset + tp], x, Mode::Infer)?;
                    readouts.push(r);
                    offset += tp;
                }
                let cat = tape.concat_cols(&readouts)?;
                m.head.forward(&mut tape, ids[offset], ids[offset + 1], cat)?
            }
            Model::Mlp(m) => {
                let mut data = Vec::new();
                for w in windows {
                    data.extend_from_slice(w);
                }
                let x = tape.input(vec![windows.len(), m.n_channels * m.window], &data)?;
                mlp_pipeline(m, &mut tape, &ids, x)?
            }
            Model::Cnn1d(m) => {
                let mut data = Vec::new();
                for w in windows {
                    data.extend_from_slice(w);
                }
                let x = tape.input(vec![windows.len(), m.n_channels, m.window], &data)?;
                cnn_pipeline(m, &mut tape, &ids, x)?
            }
        };
        let c = self.n_classes();
        Ok(tape.value(logits).chunks(c).map(|r| r.to_vec()).collect())
    }

    /// Argmax class per window, inference mode.
    pub fn predict(&self, windows: &[&[f64]]) -> Result<Vec<usize>, ModelError> {
        let logits = self.infer_logits(windows, Mode::Infer)?;
        Ok(logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty logits")
            })
            .collect())
    }

    /// Copies gradients from the tape back into the parameter tensors.
    pub fn apply_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<(), ModelError> {
        let mut params = self.params_mut();
        if params.len() != binding.ids.len() {
            return Err(ModelError::Config(format!(
                "binding has {} ids for {} parameters",
                binding.ids.len(),
                params.len()
            )));
        }
        for (param, &id) in params.iter_mut().zip(&binding.ids) {
            let grad = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param.numel()],
            };
            param.set_grad(grad)?;
        }
        Ok(())
    }

    /// Current adjacency matrices: one per GNN module (post top-k).
    /// Baselines have none.
    pub fn graph_matrices(&self) -> Result<Vec<AdjacencyMatrix>, ModelError> {
        let from_trunk = |t: &GnnTrunk| -> Result<AdjacencyMatrix, ModelError> {
            match &t.graph {
                GraphSource::Learned(l) => Ok(l.build_matrix(t.top_k)?),
                GraphSource::Frozen(a) => Ok(a.clone()),
            }
        };
        match self {
            Model::Gnn(m) => Ok(vec![from_trunk(&m.trunk)?]),
            Model::Ensemble(m) => m.trunks.iter().map(from_trunk).collect(),
            _ => Err(ModelError::Config(
                "this model kind has no graph structure learning layer".into(),
            )),
        }
    }
}

fn mlp_pipeline(
    m: &MlpModel,
    tape: &mut Tape,
    ids: &[TensorId],
    x: TensorId,
) -> Result<TensorId, ModelError> {
    let z1 = m.l1.forward(tape, ids[0], ids[1], x)?;
    let a1 = tape.relu(z1)?;
    let z2 = m.l2.forward(tape, ids[2], ids[3], a1)?;
    let a2 = tape.relu(z2)?;
    Ok(m.head.forward(tape, ids[4], ids[5], a2)?)
}

fn cnn_pipeline(
    m: &Cnn1dModel,
    tape: &mut Tape,
    ids: &[TensorId],
    x: TensorId,
) -> Result<TensorId, ModelError> {
    let c1 = tape.conv1d_same(x, ids[0], ids[1])?;
    let a1 = tape.relu(c1)?;
    let p1 = tape.max_pool1d_2(a1)?;
    let c2 = tape.conv1d_same(p1, ids[2], ids[3])?;
    let a2 = tape.relu(c2)?;
    let p2 = tape.max_pool1d_2(a2)?;
    let batch = tape.shape(p2)[0];
    let flat = tape.reshape(p2, vec![batch, CNN_CHANNELS_2 * m.pooled_len()])?;
    Ok(m.head.forward(tape, ids[4], ids[5], flat)?)
}
