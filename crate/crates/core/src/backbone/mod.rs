//! Deterministic time-conditioned MLP velocity field.
//!
//! Every linear layer sees its feature input concatenated with a sinusoidal
//! embedding of `t`. Weights are stored `in x out` with the feature rows
//! first and the embedding rows last, so a batch of inputs (one per row)
//! multiplies on the left.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{flops, matmul, silu, silu_grad, Matrix, RngStream};

/// Architecture of the velocity backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of linear layers (hidden layers plus the output layer).
    pub depth: usize,
    /// Sine/cosine frequency count `F`; the embedding has `2F` channels.
    pub embed_freqs: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 512,
            depth: 4,
            embed_freqs: 32,
        }
    }
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        2 * self.embed_freqs
    }

    /// Width of the feature part of layer `l`'s input.
    pub fn feature_in(&self, l: usize) -> usize {
        if l == 0 {
            self.data_dim
        } else {
            self.hidden
        }
    }

    pub fn layer_in(&self, l: usize) -> usize {
        self.feature_in(l) + self.embed_dim()
    }

    pub fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.depth {
            self.data_dim
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.depth == 0 || self.embed_freqs == 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal time features with geometric frequencies from 1 to 1000.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(count: usize) -> Self {
        let freqs = if count <= 1 {
            vec![1.0; count]
        } else {
            (0..count)
                .map(|k| 1000f64.powf(k as f64 / (count - 1) as f64))
                .collect()
        };
        Self { freqs }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let f = self.freqs.len();
        for (k, w) in self.freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            out[k] = s;
            out[k + f] = c;
        }
        flops::charge(3 * f as u64);
        Ok(())
    }

    pub fn embed(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(t, &mut out)?;
        Ok(out)
    }

    /// One embedding row per time.
    pub fn embed_batch(&self, times: &[f64]) -> Result<Matrix> {
        let mut m = Matrix::zeros(times.len(), self.dim());
        for (i, &t) in times.iter().enumerate() {
            self.embed_into(t, m.row_mut(i))?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut u = |_, _| bound * (2.0 * rng.uniform() - 1.0);
        let weight = Matrix::from_fn(inputs, outputs, &mut u);
        let bias = (0..outputs).map(|j| u(0, j)).collect();
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    /// `x * W + b` for a batch of rows.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = matmul(x.view(), self.weight.view())?;
        z.add_row_vector(&self.bias);
        Ok(z)
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Parameters that can be handed to the optimizer as flat slices.
pub trait ParamSet {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_lengths(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }
}

/// The velocity field `v_t(x)`.
#[derive(Clone, Debug)]
pub struct MlpBackbone {
    config: BackboneConfig,
    embedding: TimeEmbedding,
    pub(crate) layers: Vec<Linear>,
    revision: u64,
}

/// Multiplicative Bernoulli masks on hidden activations, already scaled
/// by `1 / (1 - p)`; one `batch x hidden` matrix per hidden layer.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub masks: Vec<Matrix>,
}

impl DropoutMasks {
    /// Draws masks for `rows` samples, each row from its own stream.
    pub fn draw(config: &BackboneConfig, p: f64, rngs: &mut [RngStream]) -> Self {
        let keep = 1.0 - p;
        let hidden_layers = config.depth.saturating_sub(1);
        let mut masks = vec![Matrix::zeros(rngs.len(), config.hidden); hidden_layers];
        for (r, rng) in rngs.iter_mut().enumerate() {
            for mask in masks.iter_mut() {
                for v in mask.row_mut(r) {
                    *v = if rng.uniform() < keep { 1.0 / keep } else { 0.0 };
                }
            }
        }
        Self { masks }
    }

    /// Masks for `rows` samples drawn from a single stream.
    pub fn draw_block(config: &BackboneConfig, p: f64, rows: usize, rng: &mut RngStream) -> Self {
        let keep = 1.0 - p;
        let hidden_layers = config.depth.saturating_sub(1);
        let mut masks = vec![Matrix::zeros(rows, config.hidden); hidden_layers];
        for mask in masks.iter_mut() {
            for v in mask.as_mut_slice() {
                *v = if rng.uniform() < keep { 1.0 / keep } else { 0.0 };
            }
        }
        Self { masks }
    }
}

/// Activations kept by [`MlpBackbone::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    revision: u64,
    /// Full layer inputs (features then embedding), `batch x in_l`.
    pub inputs: Vec<Matrix>,
    /// Pre-activations, `batch x out_l`.
    pub preacts: Vec<Matrix>,
    masks: Option<DropoutMasks>,
}

/// Gradient of a scalar loss with respect to every backbone parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(net: &MlpBackbone) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.inputs(), l.outputs()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.outputs()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(1.0, b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl MlpBackbone {
    pub fn new(config: BackboneConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.depth)
            .map(|l| Linear::init(config.layer_in(l), config.layer_out(l), rng))
            .collect();
        Ok(Self::from_layers(config, layers))
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.depth)
            .map(|l| Linear::zeros(config.layer_in(l), config.layer_out(l)))
            .collect();
        Ok(Self::from_layers(config, layers))
    }

    pub(crate) fn from_layers(config: BackboneConfig, layers: Vec<Linear>) -> Self {
        Self {
            embedding: TimeEmbedding::new(config.embed_freqs),
            config,
            layers,
            revision: 0,
        }
    }

    /// Builds a network from explicit layers, checking the shape chain.
    pub fn with_layers(config: BackboneConfig, layers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.depth {
            return Err(Error::shape("MlpBackbone layers", config.depth, layers.len()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = (config.layer_in(l), config.layer_out(l));
            if layer.weight.shape() != want || layer.bias.len() != want.1 {
                return Err(Error::shape(
                    "MlpBackbone layer",
                    format!("{want:?}"),
                    format!("{:?} bias {}", layer.weight.shape(), layer.bias.len()),
                ));
            }
        }
        Ok(Self::from_layers(config, layers))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embedding
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Linear] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Velocities for a batch of states (`batch x data_dim`) at per-row times.
    pub fn forward(&self, x: &Matrix, times: &[f64]) -> Result<Matrix> {
        Ok(self.forward_cached(x, times, None)?.0)
    }

    /// Velocity of a single state.
    pub fn forward_one(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m, &[t])?.into_vec())
    }

    /// Forward pass that keeps every layer input and pre-activation.
    pub fn forward_cached(
        &self,
        x: &Matrix,
        times: &[f64],
        dropout: Option<DropoutMasks>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_batch(x, times)?;
        if let Some(d) = &dropout {
            if d.masks.len() != self.config.depth - 1
                || d.masks.iter().any(|m| m.shape() != (x.rows(), self.config.hidden))
            {
                return Err(Error::shape(
                    "dropout masks",
                    format!("{} x ({} x {})", self.config.depth - 1, x.rows(), self.config.hidden),
                    format!("{} masks", d.masks.len()),
                ));
            }
        }
        let emb = self.embedding.embed_batch(times)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let input = h.hcat(&emb)?;
            let z = layer.apply(&input)?;
            if !z.all_finite() {
                return Err(Error::NonFinite(format!("backbone layer {l} pre-activation")));
            }
            inputs.push(input);
            if l + 1 < self.layers.len() {
                h = z.map(flops::SILU, silu);
                if let Some(d) = &dropout {
                    flops::charge(h.as_slice().len() as u64);
                    for (v, m) in h.as_mut_slice().iter_mut().zip(d.masks[l].as_slice()) {
                        *v *= m;
                    }
                }
            } else {
                h = z.clone();
            }
            preacts.push(z);
        }
        let cache = ForwardCache {
            revision: self.revision,
            inputs,
            preacts,
            masks: dropout,
        };
        Ok((h, cache))
    }

    /// Reverse-mode gradients given `dL/dv` for every row of the batch.
    pub fn backward(&self, cache: &ForwardCache, dv: &Matrix) -> Result<GradientBundle> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache {
                cached: cache.revision,
                current: self.revision,
            });
        }
        let rows = cache.inputs.first().map_or(0, |m| m.rows());
        if dv.shape() != (rows, self.config.data_dim) {
            return Err(Error::shape(
                "backward dL/dv",
                format!("{rows}x{}", self.config.data_dim),
                format!("{:?}", dv.shape()),
            ));
        }
        let depth = self.layers.len();
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut dz = dv.clone();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            weights.push(matmul(cache.inputs[l].t(), dz.view())?);
            biases.push(dz.column_sums());
            if l == 0 {
                break;
            }
            // Only the feature block of the input carries gradient further;
            // the embedding rows end here.
            let feat = self.config.feature_in(l);
            let w_feat = layer.weight.top_rows(feat);
            let mut dh = matmul(dz.view(), w_feat.t())?;
            if let Some(m) = &cache.masks {
                for (g, s) in dh.as_mut_slice().iter_mut().zip(m.masks[l - 1].as_slice()) {
                    *g *= s;
                }
                flops::charge(dh.as_slice().len() as u64);
            }
            let pre = &cache.preacts[l - 1];
            flops::charge((flops::SILU_WITH_GRAD + 1) * dh.as_slice().len() as u64);
            for (g, &z) in dh.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= silu_grad(z);
            }
            dz = dh;
        }
        weights.reverse();
        biases.reverse();
        Ok(GradientBundle { weights, biases })
    }

    fn check_batch(&self, x: &Matrix, times: &[f64]) -> Result<()> {
        if x.cols() != self.config.data_dim || x.rows() != times.len() {
            return Err(Error::shape(
                "backbone input",
                format!("{} rows x {}", times.len(), self.config.data_dim),
                format!("{:?}", x.shape()),
            ));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("backbone input state".into()));
        }
        Ok(())
    }
}

impl ParamSet for MlpBackbone {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            data_dim: 2,
            hidden: 6,
            depth: 3,
            embed_freqs: 3,
        }
    }

    #[test]
    fn embedding_at_zero_and_half() {
        let e = TimeEmbedding::new(32);
        assert_eq!(e.dim(), 64);
        let z = e.embed(0.0).unwrap();
        assert!(z[..32].iter().all(|&v| v == 0.0));
        assert!(z[32..].iter().all(|&v| v == 1.0));
        let h = e.embed(0.5).unwrap();
        assert_eq!(e.frequencies()[0], 1.0);
        assert!((e.frequencies()[31] - 1000.0).abs() < 1e-9);
        assert!((h[0] - 0.479_425_538_604_203).abs() < 1e-12);
        assert!(h.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(e.embed(1.2).is_err());
        assert!(e.embed(-0.1).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpBackbone::zeros(BackboneConfig::default()).unwrap();
        let v = net.forward_one(&[0.3, -1.2], 0.7).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_identity_layer_returns_input() {
        let cfg = BackboneConfig { depth: 1, ..small() };
        let mut layer = Linear::zeros(cfg.layer_in(0), 2);
        layer.weight.set(0, 0, 1.0);
        layer.weight.set(1, 1, 1.0);
        let net = MlpBackbone::with_layers(cfg, vec![layer]).unwrap();
        let v = net.forward_one(&[0.25, -3.5], 0.4).unwrap();
        assert_eq!(v, vec![0.25, -3.5]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = RngStream::new(1, "init");
        let net = MlpBackbone::new(small(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 0.5]]).unwrap();
        let a = net.forward(&x, &[0.3, 0.9]).unwrap();
        let b = net.forward(&x, &[0.3, 0.9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_bundle() {
        let mut rng = RngStream::new(2, "init");
        let net = MlpBackbone::new(small(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let (_, cache) = net.forward_cached(&x, &[0.5], None).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn linear_only_gradient_is_outer_product() {
        let cfg = BackboneConfig { depth: 1, ..small() };
        let mut rng = RngStream::new(3, "init");
        let net = MlpBackbone::new(cfg, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.7, -0.4]]).unwrap();
        let (_, cache) = net.forward_cached(&x, &[0.25], None).unwrap();
        let dv = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let g = net.backward(&cache, &dv).unwrap();
        let input = &cache.inputs[0];
        for i in 0..input.cols() {
            for j in 0..2 {
                assert_eq!(g.weights[0].get(i, j), input.get(0, i) * dv.get(0, j));
            }
        }
        assert_eq!(g.biases[0], vec![1.5, -2.0]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = RngStream::new(4, "init");
        let mut net = MlpBackbone::new(small(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let (_, cache) = net.forward_cached(&x, &[0.5], None).unwrap();
        net.param_slices_mut()[0][0] += 1.0;
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(1, 2)),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let net = MlpBackbone::zeros(small()).unwrap();
        let x = Matrix::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(net.forward(&x, &[0.5]).is_err());
    }
}
