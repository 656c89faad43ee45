//! Forward-only MLP partitioned at a cut layer.
//!
//! Parameters are stored flat, layer after layer. Each dense layer contributes
//! its weights (row-major, `out_dim x in_dim`) followed by its biases. The
//! activation of a dense layer is fused into it, so a cut always falls between
//! two dense layers and the client embedding is the post-activation output of
//! layer `cut`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("cut layer {cut} outside the admissible range 1..={max}")]
    InvalidCut { cut: usize, max: usize },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("unbalanced update ratio must be at least 1")]
    InvalidTau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    fn forward(&self, params: &[f64], input: &Matrix) -> Matrix {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.cols(), self.in_dim);
        let (weights, bias) = params.split_at(self.out_dim * self.in_dim);
        let mut out = Matrix::zeros(input.rows(), self.out_dim);
        for r in 0..input.rows() {
            let x = input.row(r);
            for (o, y) in out.row_mut(r).iter_mut().enumerate() {
                let w = &weights[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *y = self.activation.apply(acc);
            }
        }
        out
    }
}

/// Ordered list of dense layers with matching widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layers: Vec<DenseLayer>,
}

impl Architecture {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidArchitecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(ModelError::InvalidArchitecture(format!("layer {} has a zero dimension", i + 1)));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(ModelError::InvalidArchitecture(format!(
                    "layer {} outputs {} features but layer {} expects {}",
                    i + 1,
                    pair[0].out_dim,
                    i + 2,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Architecture { layers })
    }

    /// `widths = [input, hidden.., classes]`; hidden layers use `hidden`, the
    /// output layer is linear (logits).
    pub fn from_widths(widths: &[usize], hidden: Activation) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::InvalidArchitecture("need at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        Architecture::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters held by layers `0..cut`.
    pub fn params_before(&self, cut: usize) -> usize {
        self.layers[..cut].iter().map(DenseLayer::param_count).sum()
    }

    /// Scaled uniform init: every weight and bias of a layer drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            params.extend((0..l.param_count()).map(|_| rng.random_range(-bound..=bound)));
        }
        params
    }

    /// Runs `layers[range]` with `params` covering exactly those layers.
    pub fn forward_range(&self, range: Range<usize>, params: &[f64], input: &Matrix) -> Result<Matrix, ModelError> {
        let layers = &self.layers[range];
        let expected: usize = layers.iter().map(DenseLayer::param_count).sum();
        if params.len() != expected {
            return Err(ModelError::DimensionMismatch { what: "parameter vector", expected, found: params.len() });
        }
        if input.cols() != layers[0].in_dim {
            return Err(ModelError::DimensionMismatch {
                what: "input width",
                expected: layers[0].in_dim,
                found: input.cols(),
            });
        }
        let mut offset = 0;
        let mut current = None::<Matrix>;
        for l in layers {
            let p = &params[offset..offset + l.param_count()];
            offset += l.param_count();
            current = Some(l.forward(p, current.as_ref().unwrap_or(input)));
        }
        Ok(current.expect("at least one layer"))
    }

    /// Logits of the unsplit network.
    pub fn forward(&self, params: &[f64], input: &Matrix) -> Result<Matrix, ModelError> {
        self.forward_range(0..self.layers.len(), params, input)
    }

    /// Mean cross-entropy of the unsplit network.
    pub fn loss(&self, params: &[f64], inputs: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
        let logits = self.forward(params, inputs)?;
        cross_entropy(&logits, labels)
    }
}

/// Mean softmax cross-entropy over the rows of `logits`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
    if logits.rows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if labels.len() != logits.rows() {
        return Err(ModelError::DimensionMismatch { what: "label count", expected: logits.rows(), found: labels.len() });
    }
    if !logits.is_finite() {
        return Err(ModelError::NonFinite("logits"));
    }
    let classes = logits.cols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(ModelError::LabelOutOfRange { label: y, num_classes: classes });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let loss = total / labels.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFinite("loss"))
    }
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Minibatch: one row of `inputs` per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.rows() != labels.len() {
            return Err(ModelError::DimensionMismatch { what: "batch rows", expected: labels.len(), found: inputs.rows() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::LabelOutOfRange { label, num_classes });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameter counts on each side of the cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub total: usize,
    pub client: usize,
    pub server: usize,
}

/// The two halves of a split network, as seen by the protocol.
pub trait SplitNetwork: Sync {
    fn client_dim(&self) -> usize;
    fn server_dim(&self) -> usize;
    /// Cut-layer activations for `inputs` under client parameters `params`.
    fn forward_client(&self, params: &[f64], inputs: &Matrix) -> Result<Matrix, ModelError>;
    /// Mean loss of the server half on a cut-layer embedding.
    fn server_loss(&self, params: &[f64], embedding: &Matrix, labels: &[usize]) -> Result<f64, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitModel {
    arch: Architecture,
    cut: usize,
}

impl SplitModel {
    pub fn new(arch: Architecture, cut: usize) -> Result<Self, ModelError> {
        let max = arch.num_layers().saturating_sub(1);
        if arch.num_layers() < 2 {
            return Err(ModelError::InvalidArchitecture("a split needs at least two dense layers".into()));
        }
        if cut == 0 || cut > max {
            return Err(ModelError::InvalidCut { cut, max });
        }
        Ok(SplitModel { arch, cut })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn cut_width(&self) -> usize {
        self.arch.layers()[self.cut - 1].out_dim
    }

    pub fn dims(&self) -> Dims {
        let total = self.arch.param_count();
        let client = self.arch.params_before(self.cut);
        Dims { total, client, server: total - client }
    }

    /// Splits a full parameter vector into `(client, server)` halves.
    pub fn split_params(&self, full: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let dims = self.dims();
        if full.len() != dims.total {
            return Err(ModelError::DimensionMismatch { what: "parameter vector", expected: dims.total, found: full.len() });
        }
        let (c, s) = full.split_at(dims.client);
        Ok((c.to_vec(), s.to_vec()))
    }

    pub fn join_params(client: &[f64], server: &[f64]) -> Vec<f64> {
        [client, server].concat()
    }

    pub fn forward_server_logits(&self, params: &[f64], embedding: &Matrix) -> Result<Matrix, ModelError> {
        if !embedding.is_finite() {
            return Err(ModelError::NonFinite("embedding"));
        }
        self.arch.forward_range(self.cut..self.arch.num_layers(), params, embedding)
    }

    /// Fraction of rows classified correctly by the split network.
    pub fn accuracy(&self, client: &[f64], server: &[f64], inputs: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let h = self.forward_client(client, inputs)?;
        let logits = self.forward_server_logits(server, &h)?;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

impl SplitNetwork for SplitModel {
    fn client_dim(&self) -> usize {
        self.dims().client
    }

    fn server_dim(&self) -> usize {
        self.dims().server
    }

    fn forward_client(&self, params: &[f64], inputs: &Matrix) -> Result<Matrix, ModelError> {
        self.arch.forward_range(0..self.cut, params, inputs)
    }

    fn server_loss(&self, params: &[f64], embedding: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
        let logits = self.forward_server_logits(params, embedding)?;
        cross_entropy(&logits, labels)
    }
}

/// Cut whose client parameter count is closest to `sqrt(d / tau)`; ties go to
/// the shallower cut.
pub fn recommend_cut(arch: &Architecture, tau: usize) -> Result<usize, ModelError> {
    if tau == 0 {
        return Err(ModelError::InvalidTau);
    }
    if arch.num_layers() < 2 {
        return Err(ModelError::InvalidArchitecture("a split needs at least two dense layers".into()));
    }
    let target = (arch.param_count() as f64 / tau as f64).sqrt();
    let mut best = (1, f64::INFINITY);
    for cut in 1..arch.num_layers() {
        let gap = (arch.params_before(cut) as f64 - target).abs();
        if gap < best.1 {
            best = (cut, gap);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use proptest::prelude::*;

    fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> DenseLayer {
        DenseLayer { in_dim, out_dim, activation }
    }

    #[test]
    fn mismatched_layers_rejected() {
        let err = Architecture::new(vec![dense(4, 8, Activation::Relu), dense(7, 3, Activation::Identity)]);
        assert!(matches!(err, Err(ModelError::InvalidArchitecture(_))));
    }

    #[test]
    fn cut_range_enforced() {
        let arch = Architecture::from_widths(&[4, 8, 3], Activation::Relu).unwrap();
        assert!(matches!(SplitModel::new(arch.clone(), 0), Err(ModelError::InvalidCut { .. })));
        assert!(matches!(SplitModel::new(arch.clone(), 2), Err(ModelError::InvalidCut { .. })));
        assert!(SplitModel::new(arch, 1).is_ok());
        let single = Architecture::from_widths(&[4, 3], Activation::Relu).unwrap();
        assert!(matches!(SplitModel::new(single, 1), Err(ModelError::InvalidArchitecture(_))));
    }

    #[test]
    fn identity_client_passes_input_through() {
        let arch = Architecture::new(vec![dense(2, 2, Activation::Identity), dense(2, 2, Activation::Identity)]).unwrap();
        let model = SplitModel::new(arch, 1).unwrap();
        let client = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let h = model.forward_client(&client, &Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(h.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let arch = Architecture::new(vec![dense(3, 2, Activation::Identity), dense(2, 2, Activation::Identity)]).unwrap();
        let model = SplitModel::new(arch, 1).unwrap();
        let mut client = vec![0.0; 8];
        client[6] = 0.25;
        client[7] = -1.5;
        let inputs = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.5]]).unwrap();
        let h = model.forward_client(&client, &inputs).unwrap();
        for r in 0..2 {
            assert_eq!(h.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn client_forward_matches_first_layer_of_unsplit() {
        let arch = Architecture::from_widths(&[4, 8, 3], Activation::Tanh).unwrap();
        let model = SplitModel::new(arch.clone(), 1).unwrap();
        let params = arch.init_params(&mut stream(1, Role::Init, 0, 0));
        let (client, _) = model.split_params(&params).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.4], vec![1.0, 0.0, -1.0, 2.0]]).unwrap();
        let h = model.forward_client(&client, &inputs).unwrap();
        let first = arch.forward_range(0..1, &params[..40], &inputs).unwrap();
        assert_eq!(h, first);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Matrix::from_rows(&[vec![0.3; 5], vec![-2.0; 5]]).unwrap();
        let loss = cross_entropy(&logits, &[0, 4]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_give_small_loss() {
        let logits = Matrix::from_rows(&[vec![100.0, 0.0, 0.0], vec![0.0, 0.0, 100.0]]).unwrap();
        assert!(cross_entropy(&logits, &[0, 2]).unwrap() < 1e-3);
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let a = vec![0.2, -1.0, 0.7];
        let b = vec![1.5, 0.1, -0.3];
        let la = cross_entropy(&Matrix::from_rows(std::slice::from_ref(&a)).unwrap(), &[2]).unwrap();
        let lb = cross_entropy(&Matrix::from_rows(std::slice::from_ref(&b)).unwrap(), &[0]).unwrap();
        let both = cross_entropy(&Matrix::from_rows(&[a, b]).unwrap(), &[2, 0]).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_inputs_reported() {
        let logits = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert_eq!(cross_entropy(&logits, &[0]), Err(ModelError::NonFinite("logits")));
        let arch = Architecture::from_widths(&[2, 2, 2], Activation::Relu).unwrap();
        let model = SplitModel::new(arch, 1).unwrap();
        let emb = Matrix::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert_eq!(model.server_loss(&[0.0; 6], &emb, &[0]), Err(ModelError::NonFinite("embedding")));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let arch = Architecture::from_widths(&[4, 8, 3], Activation::Relu).unwrap();
        let model = SplitModel::new(arch, 1).unwrap();
        let inputs = Matrix::from_rows(&[vec![0.0; 4]]).unwrap();
        assert!(matches!(model.forward_client(&[0.0; 39], &inputs), Err(ModelError::DimensionMismatch { .. })));
        let wide = Matrix::from_rows(&[vec![0.0; 9]]).unwrap();
        assert!(matches!(model.server_loss(&[0.0; 27], &wide, &[0]), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn dims_count_weights_and_biases() {
        let arch = Architecture::from_widths(&[4, 8, 3], Activation::Relu).unwrap();
        let d = SplitModel::new(arch, 1).unwrap().dims();
        assert_eq!(d, Dims { total: 67, client: 40, server: 27 });

        let twins = Architecture::from_widths(&[5, 5, 5], Activation::Relu).unwrap();
        let d = SplitModel::new(twins, 1).unwrap().dims();
        assert_eq!(d.client, d.server);

        let deep = Architecture::from_widths(&[3, 6, 4, 2], Activation::Relu).unwrap();
        let d = SplitModel::new(deep, 2).unwrap().dims();
        assert_eq!(d.server, 2 * 5);
        assert_eq!(d.client, 6 * 4 + 4 * 7);
    }

    fn brute_force_cut(arch: &Architecture, tau: usize) -> usize {
        let target = (arch.param_count() as f64 / tau as f64).sqrt();
        let gaps: Vec<f64> = (1..arch.num_layers()).map(|c| (arch.params_before(c) as f64 - target).abs()).collect();
        let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        gaps.iter().position(|&g| g == min).unwrap() + 1
    }

    #[test]
    fn recommend_cut_examples() {
        let balanced = Architecture::from_widths(&[5, 5, 5], Activation::Relu).unwrap();
        assert_eq!(recommend_cut(&balanced, 1).unwrap(), 1);

        // d = 10000, client counts per cut: 27, 1507
        let arch = Architecture::from_widths(&[2, 9, 148, 57], Activation::Relu).unwrap();
        assert_eq!(arch.param_count(), 10_000);
        assert_eq!(recommend_cut(&arch, 4).unwrap(), 1);
        assert_eq!(recommend_cut(&arch, 4).unwrap(), brute_force_cut(&arch, 4));

        let single = Architecture::from_widths(&[4, 3], Activation::Relu).unwrap();
        assert!(recommend_cut(&single, 2).is_err());
        assert!(recommend_cut(&balanced, 0).is_err());
    }

    #[test]
    fn recommend_cut_exact_tie_goes_shallow() {
        // cumulative client counts 6, 18, 22; d = 144 so tau = 1 targets exactly 12
        let arch = Architecture::new(vec![
            dense(1, 3, Activation::Relu),
            dense(3, 3, Activation::Relu),
            dense(3, 1, Activation::Relu),
            dense(1, 61, Activation::Identity),
        ])
        .unwrap();
        assert_eq!(arch.param_count(), 144);
        assert_eq!((arch.params_before(1), arch.params_before(2)), (6, 18));
        assert_eq!(recommend_cut(&arch, 1).unwrap(), 1);
    }

    fn arb_arch() -> impl Strategy<Value = Architecture> {
        prop::collection::vec(1usize..12, 3..7)
            .prop_map(|w| Architecture::from_widths(&w, Activation::Relu).unwrap())
    }

    proptest! {
        #[test]
        fn recommend_cut_matches_brute_force(arch in arb_arch(), tau in 1usize..64) {
            prop_assert_eq!(recommend_cut(&arch, tau).unwrap(), brute_force_cut(&arch, tau));
        }

        #[test]
        fn larger_tau_never_grows_client(arch in arb_arch(), tau in 1usize..64) {
            let small = arch.params_before(recommend_cut(&arch, tau).unwrap());
            let large = arch.params_before(recommend_cut(&arch, tau + 1).unwrap());
            prop_assert!(large <= small);
        }

        #[test]
        fn dims_conserve_parameters(arch in arb_arch()) {
            for cut in 1..arch.num_layers() {
                let d = SplitModel::new(arch.clone(), cut).unwrap().dims();
                prop_assert_eq!(d.client + d.server, d.total);
            }
        }
    }
}
