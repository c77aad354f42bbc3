//! Edge classifier: graph encoder, directional edge embedding, MLP head and
//! the four training losses.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::TransactionGraph;
use crate::params::ModelParams;
use crate::tensor::{SparseMatrix, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub edge_feature_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub membership_clusters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 16,
            input_dim: crate::features::NODE_FEATURE_DIM,
            edge_feature_dim: crate::features::EDGE_FEATURE_DIM,
            mlp_hidden: vec![32],
            membership_clusters: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 || self.mlp_hidden.contains(&0) {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if self.membership_clusters < 2 {
            return Err(Error::InvalidConfig("membership head needs at least 2 clusters".into()));
        }
        Ok(())
    }

    /// Width of `[H⁰‖…‖Hᴸ]`.
    pub fn embedding_dim(&self) -> usize {
        self.input_dim + self.layers * self.hidden_dim
    }

    pub fn edge_embedding_dim(&self) -> usize {
        2 * self.embedding_dim() + self.edge_feature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    #[default]
    Focal,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub classification: Classification,
    pub alpha: f64,
    pub gamma_focal: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            classification: Classification::Focal,
            alpha: 0.25,
            gamma_focal: 2.0,
            beta: 1e-4,
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma_focal >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma {} must be non-negative", self.gamma_focal)));
        }
        for (name, v) in [("beta", self.beta), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

fn enc_name(l: usize) -> String {
    format!("enc.w{l}")
}

fn head_names(i: usize) -> (String, String) {
    (format!("head.w{i}"), format!("head.b{i}"))
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &EncoderConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    config.validate()?;
    let mut glorot = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let mut p = ModelParams::new();
    let mut width = config.input_dim;
    for l in 0..config.layers {
        p.push(enc_name(l), glorot(width, config.hidden_dim)?);
        width = config.hidden_dim;
    }
    let mut width = config.edge_embedding_dim();
    for (i, &h) in config.mlp_hidden.iter().chain(std::iter::once(&1)).enumerate() {
        let (w, b) = head_names(i);
        p.push(w, glorot(width, h)?);
        p.push(b, Tensor::zeros(&[1, h]));
        width = h;
    }
    p.push("member.w", glorot(config.embedding_dim(), config.membership_clusters)?);
    p.push("member.b", Tensor::zeros(&[1, config.membership_clusters]));
    Ok(p)
}

/// Everything the forward pass needs from one graph, detached from it so it can
/// move to a worker thread.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub propagation: SparseMatrix,
    /// Binary symmetric adjacency without self-loops, used by the cut loss.
    pub cut_adjacency: SparseMatrix,
    pub node_features: Tensor,
    pub edge_features: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub labels: Vec<f64>,
}

impl ModelInput {
    pub fn from_graph(graph: &TransactionGraph) -> Self {
        let n = graph.node_count();
        let mut trip = Vec::new();
        for (u, list) in graph.undirected_neighbors().into_iter().enumerate() {
            trip.extend(list.into_iter().filter(|&v| v != u).map(|v| (u, v, 1.0)));
        }
        Self {
            propagation: graph.encoder_adjacency(),
            cut_adjacency: SparseMatrix::from_triplets(n, n, trip).expect("indices in range"),
            node_features: graph.node_features.clone(),
            edge_features: graph.edge_features.clone(),
            src: graph.edges.iter().map(|e| e.0).collect(),
            dst: graph.edges.iter().map(|e| e.1).collect(),
            labels: graph.edge_labels.iter().map(|&y| y as f64).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.propagation.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    fn check(&self, config: &EncoderConfig) -> Result<()> {
        let n = self.node_count();
        if self.node_features.shape() != [n, config.input_dim] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: self.node_features.shape().to_vec(),
                right: vec![n, config.input_dim],
            });
        }
        let m = self.edge_count();
        if self.edge_features.shape() != [m, config.edge_feature_dim] {
            return Err(Error::ShapeMismatch {
                op: "edge_embed",
                left: self.edge_features.shape().to_vec(),
                right: vec![m, config.edge_feature_dim],
            });
        }
        Ok(())
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn trainable(tape: &'t Tape, params: &ModelParams) -> Self {
        Self::bind(tape, params, true)
    }

    pub fn frozen(tape: &'t Tape, params: &ModelParams) -> Self {
        Self::bind(tape, params, false)
    }

    fn bind(tape: &'t Tape, params: &ModelParams, grad: bool) -> Self {
        let (names, vars) = params
            .iter()
            .map(|(n, t)| {
                let v = if grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (n.to_string(), v)
            })
            .unzip();
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::ParamMismatch(format!("missing tensor `{name}`")))
    }

    /// Gradients gathered into a `ModelParams` aligned with the bound params.
    /// Tensors that received no gradient get zeros.
    pub fn gradients(&self, grads: &Gradients) -> ModelParams {
        let mut out = ModelParams::new();
        for (n, v) in self.names.iter().zip(&self.vars) {
            let g = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()));
            out.push(n.clone(), g);
        }
        out
    }
}

pub struct Forward<'t> {
    pub embeddings: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

pub fn encode_var<'t>(tape: &'t Tape, input: &ModelInput, bound: &Bound<'t>, config: &EncoderConfig) -> Result<Var<'t>> {
    input.check(config)?;
    let a = Rc::new(input.propagation.clone());
    let mut h = tape.constant(input.node_features.clone());
    let mut layers = vec![h];
    for l in 0..config.layers {
        h = Var::spmm(a.clone(), &h.matmul(&bound.get(&enc_name(l))?)?)?.relu()?;
        layers.push(h);
    }
    Var::concat(&layers)
}

pub fn edge_embed_var<'t>(tape: &'t Tape, h: &Var<'t>, input: &ModelInput) -> Result<Var<'t>> {
    let hi = h.gather_rows(Rc::new(input.src.clone()))?;
    let hj = h.gather_rows(Rc::new(input.dst.clone()))?;
    Var::concat(&[hi, hj.sub(&hi)?, tape.constant(input.edge_features.clone())])
}

pub fn head_var<'t>(z: &Var<'t>, bound: &Bound<'t>, config: &EncoderConfig) -> Result<Var<'t>> {
    let mut x = *z;
    let depth = config.mlp_hidden.len() + 1;
    for i in 0..depth {
        let (w, b) = head_names(i);
        x = x.matmul(&bound.get(&w)?)?.add_row_bias(&bound.get(&b)?)?;
        if i + 1 < depth {
            x = x.relu()?;
        }
    }
    Ok(x)
}

pub fn forward<'t>(tape: &'t Tape, input: &ModelInput, bound: &Bound<'t>, config: &EncoderConfig) -> Result<Forward<'t>> {
    let embeddings = encode_var(tape, input, bound, config)?;
    let z = edge_embed_var(tape, &embeddings, input)?;
    let logits = head_var(&z, bound, config)?;
    let probs = logits.sigmoid()?;
    Ok(Forward {
        embeddings,
        logits,
        probs,
    })
}

/// Row-softmax soft cluster membership from node embeddings.
pub fn membership_var<'t>(h: &Var<'t>, bound: &Bound<'t>) -> Result<Var<'t>> {
    h.matmul(&bound.get("member.w")?)?
        .add_row_bias(&bound.get("member.b")?)?
        .softmax()
}

/// Node embeddings `[H⁰‖…‖Hᴸ]`.
pub fn encode(input: &ModelInput, params: &ModelParams, config: &EncoderConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, params);
    Ok(encode_var(&tape, input, &bound, config)?.value())
}

/// `[h_i ‖ h_j − h_i ‖ x_e]` for a single edge.
pub fn edge_embed(h: &Tensor, i: usize, j: usize, edge_features: &[f64]) -> Result<Vec<f64>> {
    if i >= h.rows() || j >= h.rows() {
        return Err(Error::InvalidInput(format!("edge ({i}, {j}) outside {} nodes", h.rows())));
    }
    let (hi, hj) = (h.row(i), h.row(j));
    let mut z = hi.to_vec();
    z.extend(hj.iter().zip(hi).map(|(b, a)| b - a));
    z.extend_from_slice(edge_features);
    Ok(z)
}

/// Illicit probability for every edge of the graph.
pub fn predict_edges(input: &ModelInput, params: &ModelParams, config: &EncoderConfig) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, params);
    let f = forward(&tape, input, &bound, config)?;
    Ok(f.probs.value().into_data())
}

fn check_pairs(pred: &[f64], y: &[f64]) -> Result<()> {
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: vec![pred.len()],
            right: vec![y.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("loss over zero edges".into()));
    }
    Ok(())
}

fn column(v: &[f64]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).expect("column shape")
}

/// Mean binary cross-entropy on the tape.
pub fn bce_var<'t>(tape: &'t Tape, pred: &Var<'t>, y: &[f64]) -> Result<Var<'t>> {
    let p = pred.clamp(EPS, 1.0 - EPS)?;
    let y_pos = tape.constant(column(y));
    let y_neg = tape.constant(column(&y.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
    let pos = y_pos.mul(&p.log()?)?;
    let neg = y_neg.mul(&p.one_minus()?.log()?)?;
    pos.add(&neg)?.mean()?.scale(-1.0)
}

/// Mean focal loss on the tape.
pub fn focal_var<'t>(tape: &'t Tape, pred: &Var<'t>, y: &[f64], alpha: f64, gamma: f64) -> Result<Var<'t>> {
    let p = pred.clamp(EPS, 1.0 - EPS)?;
    let q = p.one_minus()?;
    let y_pos = tape.constant(column(&y.iter().map(|v| alpha * v).collect::<Vec<_>>()));
    let y_neg = tape.constant(column(&y.iter().map(|v| (1.0 - alpha) * (1.0 - v)).collect::<Vec<_>>()));
    let pos = y_pos.mul(&q.pow(gamma)?)?.mul(&p.log()?)?;
    let neg = y_neg.mul(&p.pow(gamma)?)?.mul(&q.log()?)?;
    pos.add(&neg)?.mean()?.scale(-1.0)
}

/// `−tr(MᵀAM)/tr(MᵀDM) + β‖MᵀM − I‖²_F` on the tape.
pub fn graph_cut_var<'t>(tape: &'t Tape, adjacency: &SparseMatrix, m: &Var<'t>, beta: f64) -> Result<Var<'t>> {
    let deg = adjacency.row_sums();
    if deg.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateDegree);
    }
    let n = adjacency.nrows();
    let d = SparseMatrix::from_triplets(n, n, deg.iter().enumerate().map(|(i, &v)| (i, i, v)))?;
    let am = Var::spmm(Rc::new(adjacency.clone()), m)?;
    let dm = Var::spmm(Rc::new(d), m)?;
    let num = m.mul(&am)?.sum()?;
    let den = m.mul(&dm)?.sum()?;
    let ratio = num.div(&den)?.scale(-1.0)?;
    if beta == 0.0 {
        return Ok(ratio);
    }
    let c = m.shape()[1];
    let gram = m.transpose()?.matmul(m)?;
    let penalty = gram.sub(&tape.constant(Tensor::identity(c)))?.frobenius_norm_sq()?;
    ratio.add(&penalty.scale(beta)?)
}

/// `Σ‖local_r − foreign_r‖²` where `foreign` is a fixed received matrix.
pub fn self_consistency_var<'t>(tape: &'t Tape, local: &Var<'t>, foreign: &Tensor) -> Result<Var<'t>> {
    local.sub(&tape.constant(foreign.clone()))?.frobenius_norm_sq()
}

pub fn bce_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(pred, y)?;
    let tape = Tape::new();
    let p = tape.constant(column(pred));
    Ok(bce_var(&tape, &p, y)?.item())
}

pub fn focal_loss(pred: &[f64], y: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_pairs(pred, y)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidInput(format!("gamma {gamma} must be non-negative")));
    }
    let tape = Tape::new();
    let p = tape.constant(column(pred));
    Ok(focal_var(&tape, &p, y, alpha, gamma)?.item())
}

pub fn graph_cut_loss(adjacency: &SparseMatrix, membership: &Tensor, beta: f64) -> Result<f64> {
    if membership.rank() != 2 || membership.rows() != adjacency.nrows() {
        return Err(Error::ShapeMismatch {
            op: "graph_cut_loss",
            left: membership.shape().to_vec(),
            right: vec![adjacency.nrows(), 0],
        });
    }
    let tape = Tape::new();
    let m = tape.constant(membership.clone());
    Ok(graph_cut_var(&tape, adjacency, &m, beta)?.item())
}

/// Sum of squared distances between each entry's home-side neighbor mean and
/// the vector received for its mirror; every home entry must have a partner.
pub fn self_consistency_loss(home: &[(usize, Vec<f64>)], foreign: &std::collections::HashMap<usize, Vec<f64>>) -> Result<f64> {
    let mut total = 0.0;
    for (idx, h) in home {
        let f = foreign
            .get(idx)
            .ok_or_else(|| Error::InvalidInput(format!("super-node entry {idx} has no foreign-side embedding")))?;
        if f.len() != h.len() {
            return Err(Error::ShapeMismatch {
                op: "self_consistency_loss",
                left: vec![h.len()],
                right: vec![f.len()],
            });
        }
        total += h.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Fixed foreign-side targets for the self-consistency term: row `r` of
/// `operator · H` is pulled toward row `r` of `targets`.
#[derive(Debug, Clone)]
pub struct ConsistencyTargets {
    pub operator: SparseMatrix,
    pub targets: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub classification: f64,
    pub graph_cut: f64,
    pub self_consistency: f64,
    pub total: f64,
}

/// Builds `L = L_cls + λ₁·L_cut + λ₂·L_sc` on the tape. `train` selects the
/// labelled edges (all when `None`); an empty selection drops the
/// classification term.
pub fn total_loss_var<'t>(
    tape: &'t Tape,
    input: &ModelInput,
    bound: &Bound<'t>,
    enc: &EncoderConfig,
    loss: &LossConfig,
    train: Option<&[usize]>,
    consistency: Option<&ConsistencyTargets>,
) -> Result<(Var<'t>, LossParts)> {
    let f = forward(tape, input, bound, enc)?;
    let mut parts = LossParts::default();
    let mut total = tape.constant(Tensor::scalar(0.0));

    let (probs, labels) = match train {
        None => (Some(f.probs), input.labels.clone()),
        Some([]) => (None, Vec::new()),
        Some(idx) => (
            Some(f.probs.gather_rows(Rc::new(idx.to_vec()))?),
            idx.iter().map(|&i| input.labels[i]).collect(),
        ),
    };
    if let Some(p) = probs {
        let cls = match loss.classification {
            Classification::Focal => focal_var(tape, &p, &labels, loss.alpha, loss.gamma_focal)?,
            Classification::Bce => bce_var(tape, &p, &labels)?,
        };
        parts.classification = cls.item();
        total = total.add(&cls)?;
    }
    if loss.lambda1 > 0.0 {
        let m = membership_var(&f.embeddings, bound)?;
        let cut = graph_cut_var(tape, &input.cut_adjacency, &m, loss.beta)?;
        parts.graph_cut = cut.item();
        total = total.add(&cut.scale(loss.lambda1)?)?;
    }
    if let Some(c) = consistency.filter(|c| loss.lambda2 > 0.0 && c.operator.nrows() > 0) {
        let local = Var::spmm(Rc::new(c.operator.clone()), &f.embeddings)?;
        let sc = self_consistency_var(tape, &local, &c.targets)?;
        parts.self_consistency = sc.item();
        total = total.add(&sc.scale(loss.lambda2)?)?;
    }
    parts.total = total.item();
    Ok((total, parts))
}

/// Loss value and gradient with respect to every parameter tensor.
pub fn loss_and_gradients(
    input: &ModelInput,
    params: &ModelParams,
    enc: &EncoderConfig,
    loss: &LossConfig,
    train: Option<&[usize]>,
    consistency: Option<&ConsistencyTargets>,
) -> Result<(LossParts, ModelParams)> {
    let tape = Tape::new();
    let bound = Bound::trainable(&tape, params);
    let (total, parts) = total_loss_var(&tape, input, &bound, enc, loss, train, consistency)?;
    let grads = tape.backward(total)?;
    Ok((parts, bound.gradients(&grads)))
}

/// Loss value only.
pub fn total_loss(
    input: &ModelInput,
    params: &ModelParams,
    enc: &EncoderConfig,
    loss: &LossConfig,
    train: Option<&[usize]>,
    consistency: Option<&ConsistencyTargets>,
) -> Result<LossParts> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, params);
    Ok(total_loss_var(&tape, input, &bound, enc, loss, train, consistency)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            hidden_dim: 2,
            input_dim: 2,
            edge_feature_dim: 1,
            mlp_hidden: vec![3],
            membership_clusters: 2,
        }
    }

    fn input_from(n: usize, edges: &[(usize, usize)], x: Vec<f64>, xe: Vec<f64>, labels: Vec<f64>) -> ModelInput {
        let mut trip = Vec::new();
        let mut cut = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for &(s, d) in edges {
            if s != d {
                seen.insert((s, d));
                seen.insert((d, s));
            }
        }
        for &(s, d) in &seen {
            trip.push((s, d, 1.0));
            cut.push((s, d, 1.0));
        }
        trip.extend((0..n).map(|i| (i, i, 1.0)));
        let xdim = x.len() / n;
        let edim = xe.len() / edges.len().max(1);
        ModelInput {
            propagation: SparseMatrix::from_triplets(n, n, trip).unwrap(),
            cut_adjacency: SparseMatrix::from_triplets(n, n, cut).unwrap(),
            node_features: Tensor::matrix(n, xdim, x).unwrap(),
            edge_features: Tensor::matrix(edges.len(), edim, xe).unwrap(),
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            labels,
        }
    }

    fn zero_params(cfg: &EncoderConfig) -> ModelParams {
        let mut p = init_params(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        p
    }

    #[test]
    fn zero_encoder_weights_keep_only_inputs() {
        let cfg = tiny_config(2);
        let inp = input_from(2, &[(0, 1)], vec![1.0, 2.0, 3.0, 4.0], vec![0.5], vec![0.0]);
        let h = encode(&inp, &zero_params(&cfg), &cfg).unwrap();
        assert_eq!(h.shape(), &[2, 6]);
        assert_eq!(h.row(0), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_weights_on_self_loop_is_fixed_point() {
        let cfg = EncoderConfig {
            layers: 1,
            ..tiny_config(1)
        };
        let mut inp = input_from(1, &[(0, 0)], vec![0.7, 1.5], vec![0.0], vec![0.0]);
        inp.propagation = SparseMatrix::from_triplets(1, 1, [(0, 0, 1.0)]).unwrap();
        let mut p = zero_params(&cfg);
        *p.get_mut("enc.w0").unwrap() = Tensor::identity(2);
        let h = encode(&inp, &p, &cfg).unwrap();
        assert_eq!(h.row(0), &[0.7, 1.5, 0.7, 1.5]);
    }

    #[test]
    fn two_node_layer_matches_hand_product() {
        let cfg = tiny_config(1);
        let inp = input_from(2, &[(0, 1)], vec![1.0, 0.0, 0.0, 2.0], vec![0.0], vec![0.0]);
        let mut p = zero_params(&cfg);
        *p.get_mut("enc.w0").unwrap() = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let h = encode(&inp, &p, &cfg).unwrap();
        // (A+I) = all ones; (A+I)X = [[1,2],[1,2]]; ·W = [[2, 3], [2, 3]]
        assert_eq!(h.row(1), &[0.0, 2.0, 2.0, 3.0]);
        assert_eq!(h.row(0), &[1.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn edge_embedding_blocks() {
        let h = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(edge_embed(&h, 0, 1, &[7.0]).unwrap(), vec![1.0, 2.0, 7.0]);
        assert_eq!(edge_embed(&h, 1, 0, &[7.0]).unwrap(), vec![3.0, -2.0, 7.0]);
        assert_eq!(edge_embed(&h, 0, 0, &[7.0]).unwrap()[1], 0.0);
        assert!(edge_embed(&h, 0, 2, &[]).is_err());
    }

    fn toy() -> (EncoderConfig, ModelInput) {
        let cfg = tiny_config(1);
        let inp = input_from(
            3,
            &[(0, 1), (1, 2), (2, 0)],
            vec![0.5, 1.0, -0.3, 0.8, 1.2, 0.1],
            vec![0.2, -0.4, 0.9],
            vec![1.0, 0.0, 0.0],
        );
        (cfg, inp)
    }

    #[test]
    fn zero_head_predicts_half() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut p2 = p.clone();
        for n in ["head.w1", "head.b1"] {
            p2.get_mut(n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        assert!(predict_edges(&inp, &p2, &cfg).unwrap().iter().all(|&y| y == 0.5));
    }

    #[test]
    fn final_bias_is_monotone() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let base = predict_edges(&inp, &p, &cfg).unwrap();
        let mut q = p.clone();
        q.get_mut("head.b1").unwrap().data_mut()[0] += 0.5;
        let up = predict_edges(&inp, &q, &cfg).unwrap();
        assert!(base.iter().zip(&up).all(|(a, b)| b > a));
    }

    #[test]
    fn forward_matches_hand_rolled_pass() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let got = predict_edges(&inp, &p, &cfg).unwrap();
        // Independent dense loops.
        let w0 = p.get("enc.w0").unwrap();
        let x = &inp.node_features;
        let n = 3;
        let a = |i: usize, j: usize| if i == j || inp.src.iter().zip(&inp.dst).any(|(&s, &d)| (s, d) == (i, j) || (s, d) == (j, i)) { 1.0 } else { 0.0 };
        let mut h = vec![vec![0.0; 4]; n];
        for i in 0..n {
            h[i][0] = x.get(i, 0);
            h[i][1] = x.get(i, 1);
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..2 {
                        s += a(i, j) * x.get(j, k) * w0.get(k, c);
                    }
                }
                h[i][2 + c] = s.max(0.0);
            }
        }
        let (w0h, b0h, w1h, b1h) = (p.get("head.w0").unwrap(), p.get("head.b0").unwrap(), p.get("head.w1").unwrap(), p.get("head.b1").unwrap());
        for e in 0..3 {
            let (i, j) = (inp.src[e], inp.dst[e]);
            let mut z: Vec<f64> = h[i].clone();
            z.extend((0..4).map(|k| h[j][k] - h[i][k]));
            z.push(inp.edge_features.get(e, 0));
            let mut out = b1h.get(0, 0);
            for u in 0..3 {
                let mut s = b0h.get(0, u);
                for (k, zk) in z.iter().enumerate() {
                    s += zk * w0h.get(k, u);
                }
                out += s.max(0.0) * w1h.get(u, 0);
            }
            let y = 1.0 / (1.0 + (-out).exp());
            assert!((got[e] - y).abs() < 1e-13, "edge {e}: {} vs {y}", got[e]);
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&[0.9], &[1.0]).unwrap() - 0.10536051565782628).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        assert!(bce_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn focal_examples() {
        let v = focal_loss(&[0.9], &[1.0], 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.01 * 0.10536051565782628).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
        let easy = focal_loss(&[0.95], &[1.0], 0.25, 2.0).unwrap();
        let hard = focal_loss(&[0.6], &[1.0], 0.25, 2.0).unwrap();
        assert!(easy < hard);
        assert!(focal_loss(&[0.5], &[1.0], 0.25, -1.0).is_err());
    }

    fn two_cliques() -> SparseMatrix {
        let mut t = Vec::new();
        for block in [[0, 1, 2], [3, 4, 5]] {
            for &i in &block {
                for &j in &block {
                    if i != j {
                        t.push((i, j, 1.0));
                    }
                }
            }
        }
        SparseMatrix::from_triplets(6, 6, t).unwrap()
    }

    #[test]
    fn cut_on_disconnected_cliques() {
        let m = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        assert!((graph_cut_loss(&two_cliques(), &m, 0.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_membership_has_no_penalty() {
        let a = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let m = Tensor::identity(2);
        let with = graph_cut_loss(&a, &m, 5.0).unwrap();
        let without = graph_cut_loss(&a, &m, 0.0).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn uniform_membership_matches_brute_force_traces() {
        // 4-node path 0-1-2-3 with a chord 0-2.
        let pairs = [(0, 1), (1, 2), (2, 3), (0, 2)];
        let mut t = Vec::new();
        for &(i, j) in &pairs {
            t.push((i, j, 1.0));
            t.push((j, i, 1.0));
        }
        let a = SparseMatrix::from_triplets(4, 4, t).unwrap();
        let c = 3;
        let m = Tensor::full(&[4, c], 1.0 / c as f64);
        let dense = a.to_dense();
        let deg: Vec<f64> = (0..4).map(|i| dense.row(i).iter().sum()).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..c {
            for i in 0..4 {
                den += m.get(i, k) * deg[i] * m.get(i, k);
                for j in 0..4 {
                    num += m.get(i, k) * dense.get(i, j) * m.get(j, k);
                }
            }
        }
        let mut pen = 0.0;
        for p in 0..c {
            for q in 0..c {
                let g: f64 = (0..4).map(|i| m.get(i, p) * m.get(i, q)).sum();
                let target = if p == q { 1.0 } else { 0.0 };
                pen += (g - target).powi(2);
            }
        }
        let beta = 0.3;
        let got = graph_cut_loss(&a, &m, beta).unwrap();
        assert!((got - (-num / den + beta * pen)).abs() < 1e-14);
    }

    #[test]
    fn isolated_graph_is_degenerate() {
        let a = SparseMatrix::from_triplets(3, 3, std::iter::empty()).unwrap();
        let err = graph_cut_loss(&a, &Tensor::full(&[3, 2], 0.5), 0.0).unwrap_err();
        assert_eq!(err.to_string(), "degenerate degree matrix");
    }

    #[test]
    fn self_consistency_examples() {
        use std::collections::HashMap;
        let home = vec![(0usize, vec![0.0, 0.0])];
        let foreign: HashMap<usize, Vec<f64>> = [(0, vec![1.0, 1.0])].into();
        assert_eq!(self_consistency_loss(&home, &foreign).unwrap(), 2.0);
        let same: HashMap<usize, Vec<f64>> = [(0, vec![0.0, 0.0])].into();
        assert_eq!(self_consistency_loss(&home, &same).unwrap(), 0.0);
        let home2 = vec![(0usize, vec![0.5, -1.0])];
        let f2: HashMap<usize, Vec<f64>> = [(0, vec![2.0, 1.0])].into();
        let base = self_consistency_loss(&home2, &f2).unwrap();
        let dbl = vec![(0usize, vec![1.0, -2.0])];
        let fd: HashMap<usize, Vec<f64>> = [(0, vec![4.0, 2.0])].into();
        assert!((self_consistency_loss(&dbl, &fd).unwrap() - 4.0 * base).abs() < 1e-12);
        assert!(self_consistency_loss(&home, &HashMap::new()).is_err());
    }

    #[test]
    fn total_reduces_to_focal_without_regularizers() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let loss = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let parts = total_loss(&inp, &p, &cfg, &loss, None, None).unwrap();
        let probs = predict_edges(&inp, &p, &cfg).unwrap();
        let fl = focal_loss(&probs, &inp.labels, 0.25, 2.0).unwrap();
        assert!((parts.total - fl).abs() < 1e-15);
    }

    #[test]
    fn total_is_additive_in_cut_term() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let loss = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let parts = total_loss(&inp, &p, &cfg, &loss, None, None).unwrap();
        let h = encode(&inp, &p, &cfg).unwrap();
        let logits = h.matmul(p.get("member.w").unwrap()).unwrap();
        let b = p.get("member.b").unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let z: Vec<f64> = (0..2).map(|k| logits.get(i, k) + b.get(0, k)).collect();
                let mx = z.iter().cloned().fold(f64::MIN, f64::max);
                let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                z.iter().map(|v| (v - mx).exp() / s).collect()
            })
            .collect();
        let cut = graph_cut_loss(&inp.cut_adjacency, &Tensor::from_rows(&rows).unwrap(), loss.beta).unwrap();
        let fl = focal_loss(&predict_edges(&inp, &p, &cfg).unwrap(), &inp.labels, 0.25, 2.0).unwrap();
        assert!((parts.total - (fl + cut)).abs() < 1e-12);
    }

    #[test]
    fn empty_train_selection_drops_classification() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let loss = LossConfig::default();
        let parts = total_loss(&inp, &p, &cfg, &loss, Some(&[]), None).unwrap();
        assert_eq!(parts.classification, 0.0);
        assert!((parts.total - 0.1 * parts.graph_cut).abs() < 1e-15);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (cfg, inp) = toy();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let loss = LossConfig {
            lambda1: 0.7,
            lambda2: 0.4,
            beta: 0.05,
            ..Default::default()
        };
        let consistency = ConsistencyTargets {
            operator: SparseMatrix::from_triplets(1, 3, [(0, 1, 0.5), (0, 2, 0.5)]).unwrap(),
            targets: Tensor::matrix(1, 4, vec![0.1, -0.2, 0.3, 0.05]).unwrap(),
        };
        let (_, grads) = loss_and_gradients(&inp, &p, &cfg, &loss, Some(&[0, 2]), Some(&consistency)).unwrap();
        let f = |q: &ModelParams| total_loss(&inp, q, &cfg, &loss, Some(&[0, 2]), Some(&consistency)).unwrap().total;
        let h = 1e-5;
        for (name, t) in p.iter() {
            for k in 0..t.len() {
                let mut plus = p.clone();
                plus.get_mut(name).unwrap().data_mut()[k] += h;
                let mut minus = p.clone();
                minus.get_mut(name).unwrap().data_mut()[k] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.get(name).unwrap().data()[k];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-4 || (fd - an).abs() < 1e-8, "{name}[{k}]: fd {fd} vs {an}");
            }
        }
    }
}
