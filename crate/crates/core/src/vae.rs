//! Pressure-conditioned β-VAE: convolutional encoder, deconvolutional
//! decoder, the annealed loss and the stage-1 training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::NormalizationStats;
use crate::nn::ops::{self, conv2d, conv2d_backward, deconv2d, deconv2d_backward, dense, dense_backward, relu, relu_backward};
use crate::nn::{
    adam_step, kl_divergence, reparameterize_backward, reparameterize_with_noise, AdamConfig, Grads,
    ParamId, ParamStore, Real, Tensor, LOGVAR_CLAMP,
};
use crate::rng::substream;
use crate::wake::SampledSeries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeArchitecture {
    pub enc_channels: Vec<usize>,
    pub enc_kernels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    /// Channels of the dense-projected seed map the decoder starts from.
    pub dec_seed_channels: usize,
    pub dec_channels: Vec<usize>,
    pub dec_kernel: usize,
    pub dec_stride: usize,
    pub latent_dim: usize,
    pub pressure_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        Self {
            enc_channels: vec![4, 8, 16, 16, 32],
            enc_kernels: vec![3; 5],
            enc_strides: vec![2; 5],
            dec_seed_channels: 16,
            dec_channels: vec![16, 8, 4],
            dec_kernel: 4,
            dec_stride: 2,
            latent_dim: 16,
            pressure_dim: 30,
            grid_h: 64,
            grid_w: 64,
        }
    }
}

fn conv_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|r| r / s + 1)
}

fn deconv_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    ((n - 1) * s + k).checked_sub(2 * p).filter(|&r| r > 0)
}

impl VaeArchitecture {
    pub fn validate(&self) -> Result<()> {
        let n = self.enc_channels.len();
        if n == 0 {
            return Err(Error::config("enc_channels", "need at least one conv layer"));
        }
        if self.enc_kernels.len() != n || self.enc_strides.len() != n {
            return Err(Error::config(
                "enc_kernels",
                format!(
                    "{n} channels but {} kernels and {} strides",
                    self.enc_kernels.len(),
                    self.enc_strides.len()
                ),
            ));
        }
        if self.dec_channels.is_empty() {
            return Err(Error::config("dec_channels", "need at least one deconv layer"));
        }
        let positive = [
            ("latent_dim", self.latent_dim),
            ("pressure_dim", self.pressure_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dec_seed_channels", self.dec_seed_channels),
            ("dec_kernel", self.dec_kernel),
            ("dec_stride", self.dec_stride),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self
            .enc_channels
            .iter()
            .chain(&self.enc_kernels)
            .chain(&self.enc_strides)
            .chain(&self.dec_channels)
            .any(|&v| v == 0)
        {
            return Err(Error::config("enc_channels", "channel, kernel and stride entries must be at least 1"));
        }
        if self.dec_kernel < self.dec_stride {
            return Err(Error::config("dec_kernel", "must be at least dec_stride"));
        }
        self.encoder_dims()?;
        Ok(())
    }

    /// Spatial size after each encoder layer.
    pub fn encoder_dims(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.grid_h, self.grid_w);
        let mut out = Vec::new();
        for (i, (&k, &s)) in self.enc_kernels.iter().zip(&self.enc_strides).enumerate() {
            let p = k / 2;
            match (conv_len(h, k, s, p), conv_len(w, k, s, p)) {
                (Some(a), Some(b)) => {
                    h = a;
                    w = b;
                }
                _ => {
                    return Err(Error::config(
                        "enc_kernels",
                        format!("layer {i} kernel {k} does not fit a {h}x{w} input"),
                    ))
                }
            }
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> usize {
        let (h, w) = *self.encoder_dims().unwrap().last().unwrap();
        h * w * self.enc_channels.last().unwrap()
    }

    fn dec_padding(&self) -> usize {
        (self.dec_kernel - self.dec_stride) / 2
    }

    fn decoder_out(&self, n: usize) -> usize {
        let p = self.dec_padding();
        self.dec_channels
            .iter()
            .fold(n, |n, _| deconv_len(n, self.dec_kernel, self.dec_stride, p).unwrap_or(0))
    }

    /// Smallest seed map whose deconvolved size covers the output grid.
    pub fn seed_dims(&self) -> (usize, usize) {
        let fit = |target: usize| (1..).find(|&n| self.decoder_out(n) >= target).unwrap();
        (fit(self.grid_h), fit(self.grid_w))
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

/// Layer wiring for a [`VaeArchitecture`]. Parameter values live in a
/// separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PcBetaVae {
    arch: VaeArchitecture,
    enc: Vec<Layer>,
    mu_head: Layer,
    logvar_head: Layer,
    seed: Layer,
    dec: Vec<Layer>,
    out: Layer,
    seed_hw: (usize, usize),
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn add_layer<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    bias_len: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.add(&format!("{name}.w"), kaiming_uniform(shape, fan_in, rng));
    let b = store.add(&format!("{name}.b"), Tensor::zeros(&[bias_len]));
    (w, b)
}

/// Saved activations of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    head_in: Tensor<T>,
}

/// Saved activations of one decoder pass.
#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    input: Tensor<T>,
    seed: Tensor<T>,
    deconv_in: Vec<Tensor<T>>,
    deconv_out: Vec<Tensor<T>>,
    pre_resize: (usize, usize),
}

fn grads_for<'a, T: Real>(grads: &'a mut Option<&mut Grads<T>>, l: &Layer) -> Option<ops::LayerGrads<'a, T>> {
    grads.as_deref_mut().map(|g| g.pair_mut(l.w, l.b))
}

impl PcBetaVae {
    /// Registers freshly initialised encoder (`enc.*`) and decoder (`dec.*`)
    /// parameters in `store`.
    pub fn build<T: Real, R: Rng + ?Sized>(arch: &VaeArchitecture, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut enc = Vec::new();
        let mut c_in = 2;
        for (i, ((&c, &k), &s)) in arch
            .enc_channels
            .iter()
            .zip(&arch.enc_kernels)
            .zip(&arch.enc_strides)
            .enumerate()
        {
            let (w, b) = add_layer(store, &format!("enc.conv{i}"), &[c, c_in, k, k], c_in * k * k, c, rng);
            enc.push(Layer { w, b, stride: s, pad: k / 2 });
            c_in = c;
        }
        let head_in = arch.feature_dim() + arch.pressure_dim;
        let d = arch.latent_dim;
        let dense_layer = |store: &mut ParamStore<T>, rng: &mut R, name: &str, o: usize, i: usize| {
            let (w, b) = add_layer(store, name, &[o, i], i, o, rng);
            Layer { w, b, stride: 1, pad: 0 }
        };
        let mu_head = dense_layer(store, rng, "enc.mu", d, head_in);
        let logvar_head = dense_layer(store, rng, "enc.logvar", d, head_in);

        let seed_hw = arch.seed_dims();
        let c0 = arch.dec_seed_channels;
        let seed = dense_layer(store, rng, "dec.seed", c0 * seed_hw.0 * seed_hw.1, d + arch.pressure_dim);
        let (k, s) = (arch.dec_kernel, arch.dec_stride);
        let mut dec = Vec::new();
        let mut c_in = c0;
        for (i, &c) in arch.dec_channels.iter().enumerate() {
            // Each output pixel of a strided deconvolution sees about (k/s)² input taps per channel.
            let fan_in = (c_in * k * k / (s * s)).max(1);
            let (w, b) = add_layer(store, &format!("dec.deconv{i}"), &[c_in, c, k, k], fan_in, c, rng);
            dec.push(Layer { w, b, stride: s, pad: arch.dec_padding() });
            c_in = c;
        }
        let (w, b) = add_layer(store, "dec.out", &[2, c_in, 1, 1], c_in, 2, rng);
        let out = Layer { w, b, stride: 1, pad: 0 };
        Ok(Self {
            arch: arch.clone(),
            enc,
            mu_head,
            logvar_head,
            seed,
            dec,
            out,
            seed_hw,
        })
    }

    pub fn arch(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_input<T: Real>(&self, u: &Tensor<T>, p: &[T]) -> Result<()> {
        let want = [2, self.arch.grid_h, self.arch.grid_w];
        if u.shape() != want {
            return Err(Error::shape("encode", format!("field {:?}, architecture expects {want:?}", u.shape())));
        }
        self.check_pressure("encode", p)
    }

    fn check_pressure<T>(&self, op: &'static str, p: &[T]) -> Result<()> {
        if p.len() != self.arch.pressure_dim {
            return Err(Error::shape(
                op,
                format!("pressure length {}, architecture expects {}", p.len(), self.arch.pressure_dim),
            ));
        }
        Ok(())
    }

    /// One sample: standardised field `[2, H, W]` and raw `Cp` to `(mu, raw logvar)`.
    pub fn encode_sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        u: &Tensor<T>,
        p: &[T],
    ) -> Result<(Vec<T>, Vec<T>, EncodeCache<T>)> {
        self.check_input(u, p)?;
        let mut inputs = Vec::with_capacity(self.enc.len());
        let mut outputs = Vec::with_capacity(self.enc.len());
        let mut x = u.clone();
        for l in &self.enc {
            let y = relu(&conv2d(&x, store.get(l.w), Some(store.get(l.b)), l.stride, l.pad)?);
            inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        let mut feat = x.into_data();
        feat.extend_from_slice(p);
        let head_in = Tensor::from_vec(feat);
        let mu = dense(&head_in, store.get(self.mu_head.w), store.get(self.mu_head.b))?;
        let lv = dense(&head_in, store.get(self.logvar_head.w), store.get(self.logvar_head.b))?;
        Ok((mu.into_data(), lv.into_data(), EncodeCache { inputs, outputs, head_in }))
    }

    /// Back-propagates `dmu` and `dlogvar` (w.r.t. the raw head output).
    /// Returns the gradient w.r.t. the field input.
    pub fn encode_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &EncodeCache<T>,
        dmu: &[T],
        dlogvar: &[T],
        mut grads: Option<&mut Grads<T>>,
    ) -> Result<Tensor<T>> {
        let h = &self.mu_head;
        let mut dfeat = dense_backward(
            &cache.head_in,
            store.get(h.w),
            &Tensor::from_vec(dmu.to_vec()),
            grads_for(&mut grads, h),
        )?;
        let h = &self.logvar_head;
        dfeat.add_assign(&dense_backward(
            &cache.head_in,
            store.get(h.w),
            &Tensor::from_vec(dlogvar.to_vec()),
            grads_for(&mut grads, h),
        )?);
        let last = cache.outputs.last().unwrap();
        let mut g = Tensor::new(last.shape().to_vec(), dfeat.data()[..last.len()].to_vec())?;
        for (i, l) in self.enc.iter().enumerate().rev() {
            let gr = relu_backward(&cache.outputs[i], &g);
            g = conv2d_backward(&cache.inputs[i], store.get(l.w), l.stride, l.pad, &gr, grads_for(&mut grads, l))?;
        }
        Ok(g)
    }

    /// Batch form of [`encode_sample`](Self::encode_sample): `[B, d]` mean and raw log-variance.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        fields: &[Tensor<T>],
        pressures: &[Vec<T>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if fields.len() != pressures.len() || fields.is_empty() {
            return Err(Error::InvalidBatch(format!(
                "{} fields and {} pressure vectors",
                fields.len(),
                pressures.len()
            )));
        }
        let (mut mu, mut lv) = (Vec::new(), Vec::new());
        for (u, p) in fields.iter().zip(pressures) {
            let (m, l, _) = self.encode_sample(store, u, p)?;
            mu.extend(m);
            lv.extend(l);
        }
        let shape = vec![fields.len(), self.arch.latent_dim];
        Ok((Tensor::new(shape.clone(), mu)?, Tensor::new(shape, lv)?))
    }

    /// `[z; P]` to a standardised field `[2, H, W]`.
    pub fn decode_sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &[T],
        p: &[T],
    ) -> Result<(Tensor<T>, DecodeCache<T>)> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("latent length {}, architecture expects {}", z.len(), self.arch.latent_dim),
            ));
        }
        self.check_pressure("decode", p)?;
        let mut x = z.to_vec();
        x.extend_from_slice(p);
        let input = Tensor::from_vec(x);
        let seed = relu(&dense(&input, store.get(self.seed.w), store.get(self.seed.b))?).reshape(&[
            self.arch.dec_seed_channels,
            self.seed_hw.0,
            self.seed_hw.1,
        ])?;
        let mut deconv_in = Vec::with_capacity(self.dec.len());
        let mut deconv_out = Vec::with_capacity(self.dec.len());
        let mut x = seed.clone();
        for l in &self.dec {
            let y = relu(&deconv2d(&x, store.get(l.w), Some(store.get(l.b)), l.stride, l.pad)?);
            deconv_in.push(x);
            x = y.clone();
            deconv_out.push(y);
        }
        let y = conv2d(&x, store.get(self.out.w), Some(store.get(self.out.b)), 1, 0)?;
        let (_, h, w) = y.dims3("decode")?;
        let out = ops::resize_bilinear(&y, self.arch.grid_h, self.arch.grid_w)?;
        Ok((
            out,
            DecodeCache {
                input,
                seed,
                deconv_in,
                deconv_out,
                pre_resize: (h, w),
            },
        ))
    }

    /// Returns the gradient w.r.t. the decoder input `[z; P]`. With `grads`
    /// set to `None` no parameter gradient is formed.
    pub fn decode_backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DecodeCache<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Result<Vec<T>> {
        let g = ops::resize_bilinear_backward(grad_out, cache.pre_resize.0, cache.pre_resize.1)?;
        let last = cache.deconv_out.last().unwrap();
        let mut g = conv2d_backward(last, store.get(self.out.w), 1, 0, &g, grads_for(&mut grads, &self.out))?;
        for (i, l) in self.dec.iter().enumerate().rev() {
            let gr = relu_backward(&cache.deconv_out[i], &g);
            g = deconv2d_backward(&cache.deconv_in[i], store.get(l.w), l.stride, l.pad, &gr, grads_for(&mut grads, l))?;
        }
        let g = relu_backward(&cache.seed, &g).reshape(&[cache.seed.len()])?;
        let dx = dense_backward(&cache.input, store.get(self.seed.w), &g, grads_for(&mut grads, &self.seed))?;
        Ok(dx.into_data())
    }

    pub fn decode<T: Real>(&self, store: &ParamStore<T>, z: &[T], p: &[T]) -> Result<Tensor<T>> {
        Ok(self.decode_sample(store, z, p)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossReport {
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

impl VaeLossReport {
    pub fn new(recon: f64, kl: f64, beta: f64) -> Self {
        Self {
            recon,
            kl,
            beta,
            total: recon + beta * kl,
        }
    }
}

/// Mean squared difference over every element.
pub fn mse<T: Real>(a: &[T], b: &[T]) -> f64 {
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap();
            d * d
        })
        .sum();
    sq / a.len() as f64
}

/// Linear ramp `β_end · epo / epochs`.
pub fn beta_schedule(epo: usize, epochs: usize, beta_end: f64) -> Result<f64> {
    linear_ramp("epochs", epo, epochs, beta_end)
}

pub(crate) fn linear_ramp(key: &str, epo: usize, epochs: usize, end: f64) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::config(key, "must be at least 1"));
    }
    if epo > epochs {
        return Err(Error::Range {
            what: "epoch",
            msg: format!("{epo} exceeds {epochs}"),
        });
    }
    Ok(end * (epo as f64 / epochs as f64))
}

/// The schedule value used in training epoch `e` of `epochs`: the ramp is
/// stretched over `epochs − 1` steps so the final epoch runs at `end`.
pub(crate) fn epoch_ramp(key: &str, e: usize, epochs: usize, end: f64) -> Result<f64> {
    linear_ramp(key, e, epochs.saturating_sub(1).max(1), end)
}

/// β-VAE loss over a batch with caller-supplied reparameterisation noise.
/// Accumulates encoder and decoder gradients of `total` into `grads` if given.
pub fn vae_loss<T: Real>(
    model: &PcBetaVae,
    store: &ParamStore<T>,
    fields: &[Tensor<T>],
    pressures: &[Vec<T>],
    noise: &[Vec<T>],
    beta: f64,
    mut grads: Option<&mut Grads<T>>,
) -> Result<VaeLossReport> {
    let batch = fields.len();
    if batch == 0 || pressures.len() != batch || noise.len() != batch {
        return Err(Error::InvalidBatch(format!(
            "{batch} fields, {} pressure vectors, {} noise vectors",
            pressures.len(),
            noise.len()
        )));
    }
    let d = model.latent_dim();
    let grid = fields[0].len();
    let recon_scale = T::lit(2.0 / (batch * grid) as f64);
    let kl_scale = T::lit(beta / batch as f64);
    let half = T::lit(0.5);
    let clamp = T::lit(LOGVAR_CLAMP);
    let (mut sq, mut kl) = (0.0f64, 0.0f64);
    for ((u, p), eps) in fields.iter().zip(pressures).zip(noise) {
        let (mu, raw_lv, enc_cache) = model.encode_sample(store, u, p)?;
        let code = reparameterize_with_noise(&mu, &raw_lv, eps.clone())?;
        kl += kl_divergence(&code.mu, &code.logvar, d)?.to_f64().unwrap();
        let (u_hat, dec_cache) = model.decode_sample(store, &code.z, p)?;
        sq += mse(u_hat.data(), u.data()) * grid as f64;
        if let Some(g) = grads.as_deref_mut() {
            let mut dout = u_hat.clone();
            for (o, &t) in dout.data_mut().iter_mut().zip(u.data()) {
                *o = (*o - t) * recon_scale;
            }
            let dinput = model.decode_backward(store, &dec_cache, &dout, Some(&mut *g))?;
            let (mut dmu, mut dlv) = reparameterize_backward(&code, &raw_lv, &dinput[..d]);
            for j in 0..d {
                dmu[j] += kl_scale * code.mu[j];
                if raw_lv[j] >= -clamp && raw_lv[j] <= clamp {
                    dlv[j] += kl_scale * half * (code.logvar[j].exp() - T::one());
                }
            }
            model.encode_backward(store, &enc_cache, &dmu, &dlv, Some(&mut *g))?;
        }
    }
    let report = VaeLossReport::new(sq / (batch * grid) as f64, kl / batch as f64, beta);
    if !report.total.is_finite() {
        return Err(Error::NonFinite("VAE loss".into()));
    }
    Ok(report)
}

pub fn standard_normal_vec<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(e)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta_end: f64,
    pub val_fraction: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 1e-4,
            beta_end: 0.001,
            val_fraction: 0.1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_vae", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr_vae", "must be positive"));
        }
        if !(self.beta_end.is_finite() && self.beta_end >= 0.0) {
            return Err(Error::config("beta_end", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Epoch-mean training losses plus the validation reconstruction error (posterior mean, no sampling).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub beta: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub val_recon: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub model: PcBetaVae,
    pub params: ParamStore<f32>,
    pub stats: NormalizationStats,
    pub trace: Vec<Stage1Epoch>,
    pub n_train: usize,
}

/// Contiguous split: the first `n − n_val` samples train, the rest validate.
pub fn split_train_val(n: usize, val_fraction: f64) -> (usize, usize) {
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    (n - n_val, n_val)
}

/// Network-ready data: standardised fields and raw `Cp` in `f32`.
pub fn prepare_inputs(series: &SampledSeries, stats: &NormalizationStats) -> (Vec<Tensor<f32>>, Vec<Vec<f32>>) {
    let fields = series.snapshots.iter().map(|s| stats.standardize(s)).collect();
    let pressures = series
        .pressures
        .iter()
        .map(|p| p.cp.iter().map(|&c| c as f32).collect())
        .collect();
    (fields, pressures)
}

pub(crate) fn check_pressure_dim(series: &SampledSeries, n: usize) -> Result<()> {
    for (k, p) in series.pressures.iter().enumerate() {
        if p.cp.len() != n {
            return Err(Error::Dimension(format!(
                "pressure sample {k} has {} taps, the model expects {n}",
                p.cp.len()
            )));
        }
    }
    Ok(())
}

/// Fresh parameters for `arch`, drawn from the `vae-init` substream.
pub fn init_vae(arch: &VaeArchitecture, seed: u64) -> Result<(PcBetaVae, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = PcBetaVae::build(arch, &mut store, &mut substream(seed, "vae-init", 0))?;
    Ok((model, store))
}

/// Validation reconstruction MSE decoding the posterior mean.
pub fn eval_recon(model: &PcBetaVae, store: &ParamStore<f32>, fields: &[Tensor<f32>], pressures: &[Vec<f32>]) -> Result<f64> {
    if fields.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for (u, p) in fields.iter().zip(pressures) {
        let (mu, _, _) = model.encode_sample(store, u, p)?;
        acc += mse(model.decode(store, &mu, p)?.data(), u.data());
    }
    Ok(acc / fields.len() as f64)
}

pub fn train_stage1(
    low: &SampledSeries,
    arch: &VaeArchitecture,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Output> {
    cfg.validate()?;
    low.validate()?;
    if low.snapshots.len() < 10 || low.pressures.len() != low.snapshots.len() {
        return Err(Error::InsufficientData(format!(
            "stage 1 needs at least 10 field/pressure pairs, got {} fields and {} pressure samples",
            low.snapshots.len(),
            low.pressures.len()
        )));
    }
    check_pressure_dim(low, arch.pressure_dim)?;
    let s0 = &low.snapshots[0];
    if (s0.h, s0.w) != (arch.grid_h, arch.grid_w) {
        return Err(Error::Dimension(format!(
            "fields are {}x{}, architecture expects {}x{}",
            s0.h, s0.w, arch.grid_h, arch.grid_w
        )));
    }
    let (n_train, _) = split_train_val(low.len(), cfg.val_fraction);
    let stats = NormalizationStats::from_snapshots(&low.snapshots[..n_train])?;
    let (fields, pressures) = prepare_inputs(low, &stats);
    let (model, mut store) = init_vae(arch, seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut grads = store.zero_grads();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let d = arch.latent_dim;
    for epoch in 0..cfg.epochs {
        let beta = epoch_ramp("epochs", epoch, cfg.epochs, cfg.beta_end)?;
        order.shuffle(&mut substream(seed, "vae-shuffle", epoch as u64));
        let mut noise_rng = substream(seed, "vae-noise", epoch as u64);
        let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bf: Vec<Tensor<f32>> = chunk.iter().map(|&i| fields[i].clone()).collect();
            let bp: Vec<Vec<f32>> = chunk.iter().map(|&i| pressures[i].clone()).collect();
            let noise: Vec<Vec<f32>> = chunk.iter().map(|_| standard_normal_vec(d, &mut noise_rng)).collect();
            grads.clear();
            let report = vae_loss(&model, &store, &bf, &bp, &noise, beta, Some(&mut grads)).map_err(|e| {
                Error::Diverged {
                    epoch,
                    what: e.to_string(),
                }
            })?;
            adam_step(&mut store, &grads, &adam).map_err(|e| Error::Diverged {
                epoch,
                what: e.to_string(),
            })?;
            recon += report.recon;
            kl += report.kl;
            total += report.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let val_recon = eval_recon(&model, &store, &fields[n_train..], &pressures[n_train..])?;
        trace.push(Stage1Epoch {
            epoch,
            beta,
            recon: recon / n,
            kl: kl / n,
            total: total / n,
            val_recon,
        });
    }
    Ok(Stage1Output {
        model,
        params: store,
        stats,
        trace,
        n_train,
    })
}
