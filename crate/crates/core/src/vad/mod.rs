//! Variational adaptive dropout over the backbone weights.
//!
//! Each weight of layer `l` is `N(theta, alpha^2 theta^2)` where the
//! per-output-channel scale `alpha_l(x, t)` comes from a small inference
//! network fed with the layer's input. Sampling uses the local
//! reparameterization: the pre-activation of output `j` is Gaussian with
//! mean `sum_i x_i theta_ij + b_j` and variance
//! `alpha_j^2 sum_i x_i^2 theta_ij^2`.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DropoutMasks, GradientBundle, Linear, MlpBackbone, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{flops, matmul, silu, silu_grad, Matrix, RngStream};

/// Lower clamp of the raw log-scale; `alpha >= exp(-7)`.
pub const LOG_ALPHA_MIN: f64 = -7.0;
/// Upper clamp of the raw log-scale; `alpha <= 1`.
pub const LOG_ALPHA_MAX: f64 = 0.0;

/// Smallest attainable dropout scale.
pub fn alpha_floor() -> f64 {
    LOG_ALPHA_MIN.exp()
}

/// Two-layer SiLU MLP mapping a layer input to raw log-scales.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet {
    pub hidden: Linear,
    pub out: Linear,
}

/// Intermediate values of an inference-net evaluation.
#[derive(Clone, Debug)]
pub struct InferenceCache {
    input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    raw: Matrix,
    alpha: Matrix,
}

impl InferenceCache {
    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }
}

impl InferenceNet {
    pub fn zeros(inputs: usize, outputs: usize, width: usize) -> Self {
        Self {
            hidden: Linear::zeros(inputs, width),
            out: Linear::zeros(width, outputs),
        }
    }

    /// Default initialization with the output bias set to `init_log_alpha`
    /// and output weights shrunk so the initial scales are nearly constant.
    pub fn init(inputs: usize, outputs: usize, width: usize, init_log_alpha: f64, rng: &mut RngStream) -> Self {
        let hidden = Linear::init(inputs, width, rng);
        let mut out = Linear::init(width, outputs, rng);
        out.weight.as_mut_slice().iter_mut().for_each(|w| *w *= 0.1);
        out.bias.iter_mut().for_each(|b| *b = init_log_alpha);
        Self { hidden, out }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.out.outputs()
    }

    pub fn width(&self) -> usize {
        self.hidden.outputs()
    }

    /// `alpha = exp(clamp(raw, -7, 0))` for every row of `input`.
    pub fn infer_alpha(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.infer_alpha_cached(input)?.alpha)
    }

    pub fn infer_alpha_cached(&self, input: &Matrix) -> Result<InferenceCache> {
        if input.cols() != self.inputs() {
            return Err(Error::shape("inference net input", self.inputs(), input.cols()));
        }
        if !input.all_finite() {
            return Err(Error::NonFinite("inference net input".into()));
        }
        let hidden_pre = self.hidden.apply(input)?;
        let hidden = hidden_pre.map(flops::SILU, silu);
        let raw = self.out.apply(&hidden)?;
        if !raw.all_finite() {
            return Err(Error::NonFinite("inference net output".into()));
        }
        // clamp (2) + exp (1)
        let alpha = raw.map(3, |r| r.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX).exp());
        Ok(InferenceCache {
            input: input.clone(),
            hidden_pre,
            hidden,
            raw,
            alpha,
        })
    }

    /// Gradients with respect to the net's parameters and its input, given
    /// `dL/d alpha`.
    pub fn backward(&self, cache: &InferenceCache, d_alpha: &Matrix) -> Result<(GradientBundle, Matrix)> {
        if d_alpha.shape() != cache.alpha.shape() {
            return Err(Error::shape(
                "inference net dL/dalpha",
                format!("{:?}", cache.alpha.shape()),
                format!("{:?}", d_alpha.shape()),
            ));
        }
        let mut d_raw = d_alpha.clone();
        flops::charge(2 * d_raw.as_slice().len() as u64);
        for ((g, &r), &a) in d_raw
            .as_mut_slice()
            .iter_mut()
            .zip(cache.raw.as_slice())
            .zip(cache.alpha.as_slice())
        {
            *g = if r > LOG_ALPHA_MIN && r < LOG_ALPHA_MAX {
                *g * a
            } else {
                0.0
            };
        }
        let w_out = matmul(cache.hidden.t(), d_raw.view())?;
        let b_out = d_raw.column_sums();
        let mut d_hidden = matmul(d_raw.view(), self.out.weight.t())?;
        flops::charge((flops::SILU_WITH_GRAD + 1) * d_hidden.as_slice().len() as u64);
        for (g, &z) in d_hidden.as_mut_slice().iter_mut().zip(cache.hidden_pre.as_slice()) {
            *g *= silu_grad(z);
        }
        let w_hid = matmul(cache.input.t(), d_hidden.view())?;
        let b_hid = d_hidden.column_sums();
        let d_input = matmul(d_hidden.view(), self.hidden.weight.t())?;
        Ok((
            GradientBundle {
                weights: vec![w_hid, w_out],
                biases: vec![b_hid, b_out],
            },
            d_input,
        ))
    }

    fn param_slices(&self) -> [&[f64]; 4] {
        [
            self.hidden.weight.as_slice(),
            self.hidden.bias.as_slice(),
            self.out.weight.as_slice(),
            self.out.bias.as_slice(),
        ]
    }

    fn param_slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.hidden.weight.as_mut_slice(),
            self.hidden.bias.as_mut_slice(),
            self.out.weight.as_mut_slice(),
            self.out.bias.as_mut_slice(),
        ]
    }
}

/// Where the dropout scales come from.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaSource {
    /// One inference net per backbone layer.
    Learned(Vec<InferenceNet>),
    /// The same scale everywhere; `0` is the deterministic backbone.
    Fixed(f64),
}

/// The weight posterior: backbone means plus the scale model.
#[derive(Clone, Debug)]
pub struct VadPosterior {
    backbone: MlpBackbone,
    alpha: AlphaSource,
    prior_rate: f64,
}

/// Gradient with respect to every posterior parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGradient {
    pub backbone: GradientBundle,
    pub inference: Vec<GradientBundle>,
}

impl PosteriorGradient {
    pub fn add_assign(&mut self, other: &PosteriorGradient) -> Result<()> {
        self.backbone.add_assign(&other.backbone)?;
        for (a, b) in self.inference.iter_mut().zip(&other.inference) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        self.inference.iter_mut().for_each(|g| g.scale(s));
    }

    /// Flat slices in the order of [`VadPosterior::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.slices();
        for g in &self.inference {
            out.extend(g.slices());
        }
        out
    }
}

/// One pre-activation draw `z = m + s * eps`.
#[derive(Clone, Debug)]
pub struct Preactivation {
    pub z: Matrix,
    pub mean: Matrix,
    pub std: Matrix,
    pub eps: Matrix,
    /// `sqrt(sum_i x_i^2 theta_ij^2)`, i.e. `std / alpha`.
    pub weight_scale: Matrix,
}

/// Samples a layer's pre-activations with fresh `N(0, 1)` noise, row `r`
/// drawing from `rngs[r]`.
pub fn sample_preactivation(
    x: &Matrix,
    layer: &Linear,
    alpha: &Matrix,
    rngs: &mut [RngStream],
) -> Result<Preactivation> {
    if rngs.len() != x.rows() {
        return Err(Error::shape("sample_preactivation streams", x.rows(), rngs.len()));
    }
    let mut eps = Matrix::zeros(x.rows(), layer.outputs());
    for (r, rng) in rngs.iter_mut().enumerate() {
        rng.fill_normal(eps.row_mut(r));
    }
    preactivation_with_noise(x, layer, alpha, eps)
}

/// Local reparameterization with caller-supplied noise.
pub fn preactivation_with_noise(x: &Matrix, layer: &Linear, alpha: &Matrix, eps: Matrix) -> Result<Preactivation> {
    let out = layer.outputs();
    if alpha.shape() != (x.rows(), out) || eps.shape() != (x.rows(), out) {
        return Err(Error::shape(
            "preactivation alpha/eps",
            format!("{}x{out}", x.rows()),
            format!("{:?} / {:?}", alpha.shape(), eps.shape()),
        ));
    }
    let mean = layer.apply(x)?;
    let q = matmul(x.square().view(), layer.weight.square().view())?;
    let weight_scale = q.map(1, f64::sqrt);
    let mut std = weight_scale.clone();
    let mut z = mean.clone();
    flops::charge(3 * z.as_slice().len() as u64);
    for (((zv, sv), &a), &e) in z
        .as_mut_slice()
        .iter_mut()
        .zip(std.as_mut_slice())
        .zip(alpha.as_slice())
        .zip(eps.as_slice())
    {
        *sv *= a;
        *zv += *sv * e;
    }
    Ok(Preactivation {
        z,
        mean,
        std,
        eps,
        weight_scale,
    })
}

/// Closed-form regularizer summed over every scale:
/// `(alpha + 1)(1 - p)/p + log(p/(1 - p)) - log(alpha) - 1`.
pub fn kl_regularizer<'a>(alphas: impl IntoIterator<Item = &'a [f64]>, p: f64) -> Result<f64> {
    check_prior_rate(p)?;
    let ratio = (1.0 - p) / p;
    let log_odds = (p / (1.0 - p)).ln();
    let mut total = 0.0;
    for block in alphas {
        for &a in block {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(format!("dropout scale {a} must be > 0")));
            }
            total += (a + 1.0) * ratio + log_odds - a.ln() - 1.0;
        }
    }
    Ok(total)
}

/// Derivative of one regularizer term: `(1 - p)/p - 1/alpha`.
pub fn kl_gradient(alpha: f64, p: f64) -> f64 {
    (1.0 - p) / p - 1.0 / alpha
}

/// Textbook `KL(N(theta, alpha^2 theta^2) || N(0, p/(1-p) theta^2))`
/// summed over every scale; reported next to [`kl_regularizer`].
pub fn kl_gaussian<'a>(alphas: impl IntoIterator<Item = &'a [f64]>, p: f64) -> Result<f64> {
    check_prior_rate(p)?;
    let prior_var = p / (1.0 - p);
    let mut total = 0.0;
    for block in alphas {
        for &a in block {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(format!("dropout scale {a} must be > 0")));
            }
            let q = a * a;
            total += 0.5 * ((prior_var / q).ln() + (q + 1.0) / prior_var - 1.0);
        }
    }
    Ok(total)
}

fn check_prior_rate(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("prior rate {p} must be in (0, 1)")));
    }
    Ok(())
}

/// Per-layer values kept by a sampled forward pass.
#[derive(Clone, Debug)]
pub struct SampledLayer {
    pub input: Matrix,
    pub alpha: Matrix,
    pub inference: Option<InferenceCache>,
    pub pre: Preactivation,
}

#[derive(Clone, Debug)]
pub struct SampledCache {
    revision: u64,
    pub layers: Vec<SampledLayer>,
}

impl SampledCache {
    /// Every scale used in the pass, layer by layer.
    pub fn alphas(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().map(|l| l.alpha.as_slice())
    }
}

impl VadPosterior {
    pub fn new(backbone: MlpBackbone, alpha: AlphaSource, prior_rate: f64) -> Result<Self> {
        check_prior_rate(prior_rate)?;
        if let AlphaSource::Learned(nets) = &alpha {
            let cfg = backbone.config();
            if nets.len() != cfg.depth {
                return Err(Error::shape("inference nets", cfg.depth, nets.len()));
            }
            for (l, n) in nets.iter().enumerate() {
                if n.inputs() != cfg.layer_in(l) || n.outputs() != cfg.layer_out(l) {
                    return Err(Error::shape(
                        "inference net",
                        format!("{} -> {}", cfg.layer_in(l), cfg.layer_out(l)),
                        format!("{} -> {}", n.inputs(), n.outputs()),
                    ));
                }
            }
        }
        if let AlphaSource::Fixed(a) = alpha {
            if !(a >= 0.0 && a <= 1.0) {
                return Err(Error::InvalidArgument(format!("fixed dropout scale {a}")));
            }
        }
        Ok(Self {
            backbone,
            alpha,
            prior_rate,
        })
    }

    /// Freshly initialized posterior with one inference net per layer.
    pub fn init(
        config: BackboneConfig,
        inference_width: usize,
        init_log_alpha: f64,
        prior_rate: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let backbone = MlpBackbone::new(config.clone(), rng)?;
        let nets = (0..config.depth)
            .map(|l| {
                InferenceNet::init(
                    config.layer_in(l),
                    config.layer_out(l),
                    inference_width,
                    init_log_alpha,
                    rng,
                )
            })
            .collect();
        Self::new(backbone, AlphaSource::Learned(nets), prior_rate)
    }

    /// The deterministic backbone viewed as a posterior with zero spread.
    pub fn deterministic(backbone: MlpBackbone, prior_rate: f64) -> Result<Self> {
        Self::new(backbone, AlphaSource::Fixed(0.0), prior_rate)
    }

    pub fn backbone(&self) -> &MlpBackbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut MlpBackbone {
        &mut self.backbone
    }

    pub fn alpha_source(&self) -> &AlphaSource {
        &self.alpha
    }

    pub fn set_alpha_source(&mut self, alpha: AlphaSource) -> Result<()> {
        let rebuilt = Self::new(self.backbone.clone(), alpha, self.prior_rate)?;
        self.alpha = rebuilt.alpha;
        Ok(())
    }

    pub fn inference_nets(&self) -> Option<&[InferenceNet]> {
        match &self.alpha {
            AlphaSource::Learned(n) => Some(n),
            AlphaSource::Fixed(_) => None,
        }
    }

    pub fn prior_rate(&self) -> f64 {
        self.prior_rate
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    /// Scales for layer `l` evaluated on `input` (one row per sample).
    pub fn layer_alpha(&self, l: usize, input: &Matrix) -> Result<Matrix> {
        match &self.alpha {
            AlphaSource::Learned(nets) => nets[l].infer_alpha(input),
            AlphaSource::Fixed(a) => Ok(Matrix::filled(input.rows(), self.backbone.config().layer_out(l), *a)),
        }
    }

    fn layer_alpha_cached(&self, l: usize, input: &Matrix) -> Result<(Matrix, Option<InferenceCache>)> {
        match &self.alpha {
            AlphaSource::Learned(nets) => {
                let c = nets[l].infer_alpha_cached(input)?;
                Ok((c.alpha.clone(), Some(c)))
            }
            AlphaSource::Fixed(a) => Ok((
                Matrix::filled(input.rows(), self.backbone.config().layer_out(l), *a),
                None,
            )),
        }
    }

    /// Standard-normal noise for every layer, row `r` drawn from `rngs[r]`.
    pub fn draw_noise(&self, rngs: &mut [RngStream]) -> Vec<Matrix> {
        let cfg = self.backbone.config();
        let mut noise: Vec<Matrix> = (0..cfg.depth)
            .map(|l| Matrix::zeros(rngs.len(), cfg.layer_out(l)))
            .collect();
        for (r, rng) in rngs.iter_mut().enumerate() {
            for m in noise.iter_mut() {
                rng.fill_normal(m.row_mut(r));
            }
        }
        noise
    }

    /// Standard-normal noise for `rows` samples drawn from a single stream.
    pub fn draw_noise_block(&self, rows: usize, rng: &mut RngStream) -> Vec<Matrix> {
        let cfg = self.backbone.config();
        (0..cfg.depth)
            .map(|l| {
                let mut m = Matrix::zeros(rows, cfg.layer_out(l));
                rng.fill_normal(m.as_mut_slice());
                m
            })
            .collect()
    }

    /// One stochastic forward pass, every layer sampled with the given noise.
    pub fn forward_sampled(&self, x: &Matrix, times: &[f64], noise: &[Matrix]) -> Result<(Matrix, SampledCache)> {
        let cfg = self.backbone.config();
        if x.cols() != cfg.data_dim || x.rows() != times.len() || noise.len() != cfg.depth {
            return Err(Error::shape(
                "forward_sampled",
                format!("{} rows x {}, {} noise blocks", times.len(), cfg.data_dim, cfg.depth),
                format!("{:?}, {} noise blocks", x.shape(), noise.len()),
            ));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("sampled forward input state".into()));
        }
        let emb = self.backbone.embedding().embed_batch(times)?;
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut h = x.clone();
        for (l, layer) in self.backbone.layers().iter().enumerate() {
            let input = h.hcat(&emb)?;
            let (alpha, inference) = self.layer_alpha_cached(l, &input)?;
            let pre = preactivation_with_noise(&input, layer, &alpha, noise[l].clone())?;
            if !pre.z.all_finite() {
                return Err(Error::NonFinite(format!("sampled layer {l} pre-activation")));
            }
            h = if l + 1 < cfg.depth {
                pre.z.map(flops::SILU, silu)
            } else {
                pre.z.clone()
            };
            layers.push(SampledLayer {
                input,
                alpha,
                inference,
                pre,
            });
        }
        Ok((
            h,
            SampledCache {
                revision: self.backbone.revision(),
                layers,
            },
        ))
    }

    /// Reverse pass of [`Self::forward_sampled`]. `kl_weight` multiplies
    /// the regularizer of every scale used in the pass (pass `beta_t / B`
    /// for the training objective, `0` for the regression term alone).
    pub fn backward_sampled(&self, cache: &SampledCache, dv: &Matrix, kl_weight: f64) -> Result<PosteriorGradient> {
        if cache.revision != self.backbone.revision() {
            return Err(Error::StaleCache {
                cached: cache.revision,
                current: self.backbone.revision(),
            });
        }
        let cfg = self.backbone.config();
        let depth = cfg.depth;
        let p = self.prior_rate;
        let mut bb_w = Vec::with_capacity(depth);
        let mut bb_b = Vec::with_capacity(depth);
        let mut inf_grads = Vec::with_capacity(depth);
        let mut dz = dv.clone();
        for l in (0..depth).rev() {
            let layer = &self.backbone.layers()[l];
            let rec = &cache.layers[l];
            let x = &rec.input;
            let pre = &rec.pre;

            // z = m + alpha * r * eps with r = sqrt(q), q = x^2 . W^2
            let n = dz.as_slice().len();
            let mut d_q = Matrix::zeros(dz.rows(), dz.cols());
            let mut d_alpha = Matrix::zeros(dz.rows(), dz.cols());
            flops::charge(8 * n as u64);
            for k in 0..n {
                let g = dz.as_slice()[k];
                let e = pre.eps.as_slice()[k];
                let r = pre.weight_scale.as_slice()[k];
                let a = rec.alpha.as_slice()[k];
                let ds = g * e;
                d_alpha.as_mut_slice()[k] = ds * r;
                d_q.as_mut_slice()[k] = if r > 0.0 { ds * a / (2.0 * r) } else { 0.0 };
            }

            // Mean path.
            let mut g_w = matmul(x.t(), dz.view())?;
            let g_b = dz.column_sums();
            // Variance path: dW_ij += 2 W_ij (x^2' dq)_ij.
            let x2 = x.square();
            let x2_dq = matmul(x2.t(), d_q.view())?;
            flops::charge(3 * g_w.as_slice().len() as u64);
            for ((g, &w), &s) in g_w
                .as_mut_slice()
                .iter_mut()
                .zip(layer.weight.as_slice())
                .zip(x2_dq.as_slice())
            {
                *g += 2.0 * w * s;
            }
            bb_w.push(g_w);
            bb_b.push(g_b);

            let mut d_input_inf: Option<Matrix> = None;
            if let (AlphaSource::Learned(nets), Some(inf)) = (&self.alpha, &rec.inference) {
                if kl_weight != 0.0 {
                    flops::charge(3 * n as u64);
                    for (g, &a) in d_alpha.as_mut_slice().iter_mut().zip(rec.alpha.as_slice()) {
                        *g += kl_weight * kl_gradient(a, p);
                    }
                }
                let (g_inf, d_in) = nets[l].backward(inf, &d_alpha)?;
                inf_grads.push(g_inf);
                d_input_inf = Some(d_in);
            }

            if l == 0 {
                break;
            }
            let feat = cfg.feature_in(l);
            let mut dh = matmul(dz.view(), layer.weight.top_rows(feat).t())?;
            let w2 = layer.weight.square();
            let dq_w2 = matmul(d_q.view(), w2.top_rows(feat).t())?;
            flops::charge(3 * dh.as_slice().len() as u64);
            for b in 0..dh.rows() {
                let xr = &x.row(b)[..feat];
                let qr = dq_w2.row(b);
                for ((g, &xi), &s) in dh.row_mut(b).iter_mut().zip(xr).zip(qr) {
                    *g += 2.0 * xi * s;
                }
            }
            if let Some(d_in) = &d_input_inf {
                flops::charge(dh.as_slice().len() as u64);
                for b in 0..dh.rows() {
                    for (g, &s) in dh.row_mut(b).iter_mut().zip(&d_in.row(b)[..feat]) {
                        *g += s;
                    }
                }
            }
            let z_prev = &cache.layers[l - 1].pre.z;
            flops::charge((flops::SILU_WITH_GRAD + 1) * dh.as_slice().len() as u64);
            for (g, &z) in dh.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                *g *= silu_grad(z);
            }
            dz = dh;
        }
        bb_w.reverse();
        bb_b.reverse();
        inf_grads.reverse();
        Ok(PosteriorGradient {
            backbone: GradientBundle {
                weights: bb_w,
                biases: bb_b,
            },
            inference: inf_grads,
        })
    }

    /// Zero gradient shaped like this posterior.
    pub fn zero_gradient(&self) -> PosteriorGradient {
        let inference = match &self.alpha {
            AlphaSource::Learned(nets) => nets
                .iter()
                .map(|n| GradientBundle {
                    weights: vec![
                        Matrix::zeros(n.hidden.inputs(), n.hidden.outputs()),
                        Matrix::zeros(n.out.inputs(), n.out.outputs()),
                    ],
                    biases: vec![vec![0.0; n.hidden.outputs()], vec![0.0; n.out.outputs()]],
                })
                .collect(),
            AlphaSource::Fixed(_) => Vec::new(),
        };
        PosteriorGradient {
            backbone: GradientBundle::zeros_like(&self.backbone),
            inference,
        }
    }

    /// Deterministic backbone forward with optional dropout masks
    /// (used by the MC-dropout baseline).
    pub fn forward_dropout(&self, x: &Matrix, times: &[f64], masks: DropoutMasks) -> Result<Matrix> {
        Ok(self.backbone.forward_cached(x, times, Some(masks))?.0)
    }
}

impl ParamSet for VadPosterior {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.param_slices();
        if let AlphaSource::Learned(nets) = &self.alpha {
            for n in nets {
                out.extend(n.param_slices());
            }
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.param_slices_mut();
        if let AlphaSource::Learned(nets) = &mut self.alpha {
            for n in nets.iter_mut() {
                out.extend(n.param_slices_mut());
            }
        }
        out
    }
}

/// Serializable summary of the scale model, for reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub layer: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-layer statistics of the scales a sampled pass used.
pub fn summarize_alphas(cache: &SampledCache) -> Vec<AlphaSummary> {
    cache
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let s = l.alpha.as_slice();
            let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
            let min = s.iter().copied().fold(f64::INFINITY, f64::min);
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            AlphaSummary { layer, mean, min, max }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_floor_and_zero_net() {
        let mut net = InferenceNet::zeros(3, 2, 4);
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(net.infer_alpha(&x).unwrap().as_slice(), &[1.0, 1.0]);
        net.out.bias = vec![-50.0, 3.0];
        let a = net.infer_alpha(&x).unwrap();
        assert_eq!(a.as_slice()[0], (-7.0f64).exp());
        assert!((a.as_slice()[0] - 9.1188e-4).abs() < 1e-7);
        assert_eq!(a.as_slice()[1], 1.0);
        assert_eq!(net.infer_alpha(&x).unwrap(), a);
    }

    #[test]
    fn kl_hand_values() {
        assert!((kl_regularizer([[1.0].as_slice()], 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(kl_gradient(1.0, 0.5), 0.0);
        assert!(kl_gradient(0.01, 0.5) < 0.0);
        assert!(kl_regularizer([[0.0].as_slice()], 0.5).is_err());
        assert!(kl_regularizer([[0.5].as_slice()], 1.0).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        for &p in &[0.1, 0.3, 0.5, 0.8] {
            for &a in &[0.001, 0.05, 0.3, 0.9] {
                let h = 1e-6 * a;
                let f = |x: f64| kl_regularizer([[x].as_slice()], p).unwrap();
                let fd = (f(a + h) - f(a - h)) / (2.0 * h);
                let g = kl_gradient(a, p);
                assert!((fd - g).abs() <= 1e-8 * g.abs().max(1.0), "p={p} a={a}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn printed_kl_is_twice_gaussian_kl_at_squared_scale() {
        // KL_gauss(sqrt(a)) * 2 == printed(a)
        for &a in &[0.01, 0.2, 0.7] {
            let printed = kl_regularizer([[a].as_slice()], 0.3).unwrap();
            let gauss = kl_gaussian([[a.sqrt()].as_slice()], 0.3).unwrap();
            assert!((printed - 2.0 * gauss).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_gives_the_mean() {
        let layer = Linear {
            weight: Matrix::from_rows(&[[2.0, -1.0]]).unwrap(),
            bias: vec![0.5, 0.0],
        };
        let x = Matrix::from_rows(&[[1.5]]).unwrap();
        let mut rngs = vec![RngStream::new(1, "eps")];
        let pre = sample_preactivation(&x, &layer, &Matrix::zeros(1, 2), &mut rngs).unwrap();
        assert_eq!(pre.z.as_slice(), &[3.5, -1.5]);
    }

    #[test]
    fn variance_ignores_weight_sign() {
        let mk = |w: f64| Linear {
            weight: Matrix::from_rows(&[[w]]).unwrap(),
            bias: vec![0.0],
        };
        let x = Matrix::from_rows(&[[0.7]]).unwrap();
        let a = Matrix::filled(1, 1, 0.4);
        let eps = Matrix::filled(1, 1, 1.0);
        let p = preactivation_with_noise(&x, &mk(1.3), &a, eps.clone()).unwrap();
        let n = preactivation_with_noise(&x, &mk(-1.3), &a, eps).unwrap();
        assert_eq!(p.std, n.std);
    }
}
