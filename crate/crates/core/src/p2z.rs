//! Pressure-to-latent mapper, its stage-2 training against a frozen VAE, and
//! high-rate field inference.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::NormalizationStats;
use crate::nn::ops::{self, batchnorm, batchnorm_backward, dense, dense_backward, dropout, dropout_backward, relu};
use crate::nn::{adam_step, AdamConfig, Grads, Mode, ParamId, ParamStore, Real, Tensor};
use crate::rng::substream;
use crate::vae::{self, check_pressure_dim, epoch_ramp, linear_ramp, mse, split_train_val, PcBetaVae};
use crate::wake::{FlowSnapshot, SampledSeries};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct P2zArchitecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl Default for P2zArchitecture {
    fn default() -> Self {
        Self {
            input_dim: 30,
            hidden: 256,
            blocks: 3,
            output_dim: 16,
            dropout: 0.2,
        }
    }
}

/// Dense layers per residual block.
pub const LAYERS_PER_BLOCK: usize = 3;

impl P2zArchitecture {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    dense: Vec<(ParamId, ParamId)>,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

fn dense_pair<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    o: usize,
    i: usize,
) -> (ParamId, ParamId) {
    let w = store.add(&format!("{name}.w"), vae::kaiming_uniform(&[o, i], i, rng));
    let b = store.add(&format!("{name}.b"), Tensor::zeros(&[o]));
    (w, b)
}

#[derive(Clone, Debug)]
pub struct P2zNet {
    arch: P2zArchitecture,
    input: (ParamId, ParamId),
    blocks: Vec<Block>,
    output: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    /// Input of each dense layer.
    xs: Vec<Tensor<T>>,
    /// Output of each hidden ReLU (all but the last dense layer).
    hidden: Vec<Tensor<T>>,
    bn: ops::BatchNormCache<T>,
    act: Tensor<T>,
    mask: Option<Vec<T>>,
}

/// Saved activations of one forward pass, plus the running-statistics
/// updates a train-mode pass produced.
#[derive(Clone, Debug)]
pub struct P2zCache<T> {
    input: Tensor<T>,
    hidden_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    running: Vec<(ParamId, Tensor<T>)>,
}

impl P2zNet {
    /// Registers `p2z.*` parameters and batch-norm buffers in `store`.
    pub fn build<T: Real, R: Rng + ?Sized>(arch: &P2zArchitecture, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let h = arch.hidden;
        let input = dense_pair(store, rng, "p2z.in", h, arch.input_dim);
        let mut blocks = Vec::with_capacity(arch.blocks);
        for blk in 0..arch.blocks {
            let name = format!("p2z.block{blk}");
            let dense = (0..LAYERS_PER_BLOCK)
                .map(|l| dense_pair(store, rng, &format!("{name}.{l}.dense"), h, h))
                .collect();
            blocks.push(Block {
                dense,
                gamma: store.add(&format!("{name}.bn.gamma"), Tensor::from_vec(vec![T::one(); h])),
                beta: store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[h])),
                mean: store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[h])),
                var: store.add_buffer(&format!("{name}.bn.running_var"), Tensor::from_vec(vec![T::one(); h])),
            });
        }
        let output = dense_pair(store, rng, "p2z.out", arch.output_dim, h);
        Ok(Self {
            arch: arch.clone(),
            input,
            blocks,
            output,
        })
    }

    pub fn arch(&self) -> &P2zArchitecture {
        &self.arch
    }

    /// `[B, n]` pressures to `[B, d]` latents. Train mode draws dropout masks
    /// from `rng` and records running-statistics updates in the cache; apply
    /// them with [`commit_running`](Self::commit_running).
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, P2zCache<T>)> {
        let (_, n) = input.dims2("p2z_forward")?;
        if n != self.arch.input_dim {
            return Err(Error::shape(
                "p2z_forward",
                format!("input {:?}, architecture expects {} taps", input.shape(), self.arch.input_dim),
            ));
        }
        let mut h = dense(input, store.get(self.input.0), store.get(self.input.1))?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut running = Vec::new();
        for block in &self.blocks {
            let mut xs = Vec::with_capacity(LAYERS_PER_BLOCK);
            let mut hidden = Vec::with_capacity(LAYERS_PER_BLOCK - 1);
            let mut x = h.clone();
            for (l, &(w, b)) in block.dense.iter().enumerate() {
                let y = dense(&x, store.get(w), store.get(b))?;
                xs.push(std::mem::replace(&mut x, y));
                if l + 1 < block.dense.len() {
                    x = relu(&x);
                    hidden.push(x.clone());
                }
            }
            let mut rm = store.get(block.mean).clone();
            let mut rv = store.get(block.var).clone();
            let (y, bn) = batchnorm(&x, store.get(block.gamma), store.get(block.beta), &mut rm, &mut rv, mode)?;
            if mode == Mode::Train {
                running.push((block.mean, rm));
                running.push((block.var, rv));
            }
            let act = relu(&y);
            let (out, mask) = dropout(&act, self.arch.dropout, mode, rng)?;
            h.add_assign(&out);
            caches.push(BlockCache { xs, hidden, bn, act, mask });
        }
        let z = dense(&h, store.get(self.output.0), store.get(self.output.1))?;
        Ok((
            z,
            P2zCache {
                input: input.clone(),
                hidden_out: h,
                blocks: caches,
                running,
            },
        ))
    }

    pub fn commit_running<T: Real>(&self, store: &mut ParamStore<T>, cache: &P2zCache<T>) {
        for (id, t) in &cache.running {
            *store.get_mut(*id) = t.clone();
        }
    }

    /// Eval-mode forward of a single pressure vector.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, p: &[T]) -> Result<Vec<T>> {
        let input = Tensor::new(vec![1, p.len()], p.to_vec())?;
        // Eval mode draws nothing from the generator.
        let mut rng = substream(0, "unused", 0);
        Ok(self.forward(store, &input, Mode::Eval, &mut rng)?.0.into_data())
    }

    /// Returns the gradient w.r.t. the input and accumulates parameter gradients.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &P2zCache<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Result<Tensor<T>> {
        let mut dh = dense_backward(
            &cache.hidden_out,
            store.get(self.output.0),
            grad_out,
            grads.as_deref_mut().map(|g| g.pair_mut(self.output.0, self.output.1)),
        )?;
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gd = dropout_backward(c.mask.as_deref(), &dh);
            let gr = ops::relu_backward(&c.act, &gd);
            let mut g = batchnorm_backward(
                &c.bn,
                store.get(block.gamma),
                &gr,
                grads.as_deref_mut().map(|g| g.pair_mut(block.gamma, block.beta)),
            )?;
            for (l, &(w, b)) in block.dense.iter().enumerate().rev() {
                if l + 1 < block.dense.len() {
                    g = ops::relu_backward(&c.hidden[l], &g);
                }
                g = dense_backward(&c.xs[l], store.get(w), &g, grads.as_deref_mut().map(|gs| gs.pair_mut(w, b)))?;
            }
            dh.add_assign(&g);
        }
        dense_backward(
            &cache.input,
            store.get(self.input.0),
            &dh,
            grads.map(|g| g.pair_mut(self.input.0, self.input.1)),
        )
    }
}

/// Linear ramp `α_end · epo / epos_p2z`.
pub fn alpha_schedule(epo: usize, epos_p2z: usize, alpha_end: f64) -> Result<f64> {
    linear_ramp("epos_p2z", epo, epos_p2z, alpha_end)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct P2zLossReport {
    pub latent_mse: f64,
    pub recon_mse: f64,
    pub alpha: f64,
    pub total: f64,
}

impl P2zLossReport {
    pub fn new(latent_mse: f64, recon_mse: f64, alpha: f64) -> Self {
        Self {
            latent_mse,
            recon_mse,
            alpha,
            total: latent_mse + alpha * recon_mse,
        }
    }
}

/// Posterior means of the frozen encoder, the stage-2 regression targets.
pub fn latent_targets<T: Real>(
    vae: &PcBetaVae,
    vae_store: &ParamStore<T>,
    fields: &[Tensor<T>],
    pressures: &[Vec<T>],
) -> Result<Vec<Vec<T>>> {
    fields
        .iter()
        .zip(pressures)
        .map(|(u, p)| Ok(vae.encode_sample(vae_store, u, p)?.0))
        .collect()
}

/// One stage-2 batch. The latent term is `(1/d)‖μ − ẑ‖²` averaged over the
/// batch, the reconstruction term decodes `ẑ` with the frozen decoder.
/// Gradients reach only the mapper's parameters.
#[allow(clippy::too_many_arguments)]
pub fn p2z_loss<T: Real, R: Rng + ?Sized>(
    net: &P2zNet,
    store: &ParamStore<T>,
    vae: &PcBetaVae,
    vae_store: &ParamStore<T>,
    pressures: &[Vec<T>],
    fields: &[Tensor<T>],
    targets: &[Vec<T>],
    alpha: f64,
    mode: Mode,
    rng: &mut R,
    grads: Option<&mut Grads<T>>,
) -> Result<(P2zLossReport, P2zCache<T>)> {
    let batch = pressures.len();
    if batch == 0 || fields.len() != batch || targets.len() != batch {
        return Err(Error::InvalidBatch(format!(
            "{batch} pressure vectors, {} fields, {} targets",
            fields.len(),
            targets.len()
        )));
    }
    let n = net.arch.input_dim;
    let d = net.arch.output_dim;
    if vae.latent_dim() != d {
        return Err(Error::Dimension(format!("mapper emits {d} latents, decoder expects {}", vae.latent_dim())));
    }
    let flat: Vec<T> = pressures.iter().flatten().copied().collect();
    if flat.len() != batch * n {
        return Err(Error::Dimension(format!("pressure vectors must all have {n} taps")));
    }
    let input = Tensor::new(vec![batch, n], flat)?;
    let (z_hat, cache) = net.forward(store, &input, mode, rng)?;
    let grid = fields[0].len();
    let lat_scale = T::lit(2.0 / (batch * d) as f64);
    let rec_scale = T::lit(2.0 * alpha / (batch * grid) as f64);
    let mut latent = 0.0;
    let mut recon = 0.0;
    let mut dz = vec![T::zero(); batch * d];
    for b in 0..batch {
        let zb = &z_hat.data()[b * d..(b + 1) * d];
        if targets[b].len() != d {
            return Err(Error::Dimension(format!("target {b} has length {}, expected {d}", targets[b].len())));
        }
        latent += mse(zb, &targets[b]);
        let (u_hat, dec_cache) = vae.decode_sample(vae_store, zb, &pressures[b])?;
        recon += mse(u_hat.data(), fields[b].data());
        if grads.is_some() {
            for j in 0..d {
                dz[b * d + j] = lat_scale * (zb[j] - targets[b][j]);
            }
            if alpha != 0.0 {
                let mut dout = u_hat;
                for (o, &t) in dout.data_mut().iter_mut().zip(fields[b].data()) {
                    *o = (*o - t) * rec_scale;
                }
                let dinput = vae.decode_backward(vae_store, &dec_cache, &dout, None)?;
                for j in 0..d {
                    dz[b * d + j] += dinput[j];
                }
            }
        }
    }
    let report = P2zLossReport::new(latent / batch as f64, recon / batch as f64, alpha);
    if !report.total.is_finite() {
        return Err(Error::NonFinite("p2z loss".into()));
    }
    if let Some(g) = grads {
        net.backward(store, &cache, &Tensor::new(vec![batch, d], dz)?, Some(g))?;
    }
    Ok((report, cache))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha_end: f64,
    pub val_fraction: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 1e-3,
            alpha_end: 0.01,
            val_fraction: 0.1,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_p2z", "batch normalisation needs at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr_p2z", "must be positive"));
        }
        if !(self.alpha_end.is_finite() && self.alpha_end >= 0.0) {
            return Err(Error::config("alpha_end", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub alpha: f64,
    pub latent_mse: f64,
    pub recon_mse: f64,
    pub total: f64,
    /// Eval-mode latent error on the held-out block.
    pub val_latent_mse: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub net: P2zNet,
    pub params: ParamStore<f32>,
    pub trace: Vec<Stage2Epoch>,
}

pub fn init_p2z(arch: &P2zArchitecture, seed: u64) -> Result<(P2zNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = P2zNet::build(arch, &mut store, &mut substream(seed, "p2z-init", 0))?;
    Ok((net, store))
}

/// Trains the mapper against a frozen stage-1 model. The VAE parameters are
/// only ever borrowed immutably.
pub fn train_stage2(
    low: &SampledSeries,
    vae: &PcBetaVae,
    vae_store: &ParamStore<f32>,
    stats: &NormalizationStats,
    arch: &P2zArchitecture,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Output> {
    cfg.validate()?;
    low.validate()?;
    if low.snapshots.len() < 10 || low.pressures.len() != low.snapshots.len() {
        return Err(Error::InsufficientData(format!(
            "stage 2 needs at least 10 field/pressure pairs, got {} fields and {} pressure samples",
            low.snapshots.len(),
            low.pressures.len()
        )));
    }
    check_pressure_dim(low, arch.input_dim)?;
    let (fields, pressures) = vae::prepare_inputs(low, stats);
    let targets = latent_targets(vae, vae_store, &fields, &pressures)?;
    let (n_train, _) = split_train_val(low.len(), cfg.val_fraction);
    let (net, mut store) = init_p2z(arch, seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut grads = store.zero_grads();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let alpha = epoch_ramp("epos_p2z", epoch, cfg.epochs, cfg.alpha_end)?;
        order.shuffle(&mut substream(seed, "p2z-shuffle", epoch as u64));
        let mut drop_rng = substream(seed, "p2z-dropout", epoch as u64);
        let (mut latent, mut recon, mut total) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        // A trailing single-sample batch cannot be batch-normalised and is dropped.
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let bp: Vec<Vec<f32>> = chunk.iter().map(|&i| pressures[i].clone()).collect();
            let bf: Vec<Tensor<f32>> = chunk.iter().map(|&i| fields[i].clone()).collect();
            let bt: Vec<Vec<f32>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            grads.clear();
            let diverged = |e: Error| Error::Diverged {
                epoch,
                what: e.to_string(),
            };
            let (report, cache) = p2z_loss(
                &net,
                &store,
                vae,
                vae_store,
                &bp,
                &bf,
                &bt,
                alpha,
                Mode::Train,
                &mut drop_rng,
                Some(&mut grads),
            )
            .map_err(diverged)?;
            adam_step(&mut store, &grads, &adam).map_err(diverged)?;
            net.commit_running(&mut store, &cache);
            latent += report.latent_mse;
            recon += report.recon_mse;
            total += report.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mut val = 0.0;
        for i in n_train..low.len() {
            val += mse(&net.predict(&store, &pressures[i])?, &targets[i]);
        }
        let val_latent_mse = if n_train < low.len() {
            val / (low.len() - n_train) as f64
        } else {
            f64::NAN
        };
        trace.push(Stage2Epoch {
            epoch,
            alpha,
            latent_mse: latent / n,
            recon_mse: recon / n,
            total: total / n,
            val_latent_mse,
        });
    }
    Ok(Stage2Output {
        net,
        params: store,
        trace,
    })
}

/// `U_h = F_φ(H_ψ(P_h), P_h)` for every high-rate pressure sample, in eval
/// mode and de-standardised. Runs on the current rayon pool; every sample is
/// independent so the result does not depend on the thread count.
pub fn infer_high_frequency(
    high: &SampledSeries,
    net: &P2zNet,
    p2z_store: &ParamStore<f32>,
    vae: &PcBetaVae,
    vae_store: &ParamStore<f32>,
    stats: &NormalizationStats,
) -> Result<SampledSeries> {
    check_pressure_dim(high, net.arch.input_dim)?;
    if vae.arch().pressure_dim != net.arch.input_dim {
        return Err(Error::Dimension(format!(
            "decoder expects {} taps, mapper {}",
            vae.arch().pressure_dim,
            net.arch.input_dim
        )));
    }
    let snapshots: Vec<FlowSnapshot> = high
        .pressures
        .par_iter()
        .map(|s| {
            let p: Vec<f32> = s.cp.iter().map(|&c| c as f32).collect();
            let z = net.predict(p2z_store, &p)?;
            let field = vae.decode(vae_store, &z, &p)?;
            stats.destandardize(&field, s.t)
        })
        .collect::<Result<_>>()?;
    Ok(SampledSeries {
        rate: high.rate,
        snapshots,
        pressures: high.pressures.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_piecewise;
    use crate::vae::{standard_normal_vec, VaeArchitecture};
    use crate::wake::{build_dataset, WakeConfig};

    fn mini() -> P2zArchitecture {
        P2zArchitecture {
            input_dim: 4,
            hidden: 6,
            blocks: 3,
            output_dim: 3,
            dropout: 0.2,
        }
    }

    fn mini_vae() -> VaeArchitecture {
        VaeArchitecture {
            enc_channels: vec![2, 2, 2, 2, 2],
            dec_seed_channels: 2,
            dec_channels: vec![2, 2, 2],
            latent_dim: 3,
            pressure_dim: 4,
            grid_h: 16,
            grid_w: 16,
            ..VaeArchitecture::default()
        }
    }

    fn batch_input<T: Real>(b: usize, n: usize, seed: u64) -> Tensor<T> {
        Tensor::new(vec![b, n], standard_normal_vec(b * n, &mut substream(seed, "in", 0))).unwrap()
    }

    #[test]
    fn forward_contracts() {
        let arch = P2zArchitecture::default();
        let (net, store) = init_p2z(&arch, 1).unwrap();
        let x = batch_input::<f32>(1, 30, 2);
        let a = net.predict(&store, x.data()).unwrap();
        let b = net.predict(&store, x.data()).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        let (z, _) = net.forward(&store, &batch_input(5, 30, 3), Mode::Train, &mut substream(0, "d", 0)).unwrap();
        assert_eq!(z.shape(), &[5, 16]);
        assert!(net.predict(&store, &[0.0; 29]).is_err());
        let single = batch_input::<f32>(1, 30, 4);
        assert!(matches!(
            net.forward(&store, &single, Mode::Train, &mut substream(0, "d", 0)),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn zero_output_layer_returns_bias() {
        let arch = mini();
        let (net, mut store) = init_p2z(&arch, 5).unwrap();
        let w = store.id("p2z.out.w").unwrap();
        let b = store.id("p2z.out.b").unwrap();
        store.get_mut(w).fill(0.0);
        store.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.5, 2.0]);
        for seed in 0..4 {
            let p = batch_input::<f32>(1, 4, seed);
            assert_eq!(net.predict(&store, p.data()).unwrap(), vec![0.5, -1.5, 2.0]);
        }
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_schedule(0, 1000, 0.01).unwrap(), 0.0);
        assert_eq!(alpha_schedule(1000, 1000, 0.01).unwrap(), 0.01);
        assert_eq!(alpha_schedule(250, 1000, 0.01).unwrap(), 0.0025);
        assert!(matches!(alpha_schedule(0, 0, 0.01), Err(Error::Config { .. })));
    }

    #[test]
    fn running_stats_commit_in_train_mode_only() {
        let (net, mut store) = init_p2z(&mini(), 2).unwrap();
        let before = store.checksum();
        let x = batch_input::<f32>(4, 4, 1);
        let (_, cache) = net.forward(&store, &x, Mode::Eval, &mut substream(0, "d", 0)).unwrap();
        net.commit_running(&mut store, &cache);
        assert_eq!(store.checksum(), before);
        let (_, cache) = net.forward(&store, &x, Mode::Train, &mut substream(0, "d", 0)).unwrap();
        net.commit_running(&mut store, &cache);
        assert_ne!(store.checksum(), before);
    }

    fn setup(seed: u64) -> (P2zNet, ParamStore<f64>, PcBetaVae, ParamStore<f64>) {
        let mut ps = ParamStore::<f64>::new();
        let net = P2zNet::build(&mini(), &mut ps, &mut substream(seed, "p2z", 0)).unwrap();
        let mut vs = ParamStore::<f64>::new();
        let vae = PcBetaVae::build(&mini_vae(), &mut vs, &mut substream(seed, "vae", 0)).unwrap();
        (net, ps, vae, vs)
    }

    #[test]
    fn mapper_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (net, store, vae, vs) = setup(seed);
            let p: Vec<Vec<f64>> = (0..3).map(|i| standard_normal_vec(4, &mut substream(seed, "p", i))).collect();
            let f: Vec<Tensor<f64>> = (0..3)
                .map(|i| Tensor::new(vec![2, 16, 16], standard_normal_vec(512, &mut substream(seed, "f", i))).unwrap())
                .collect();
            let t: Vec<Vec<f64>> = (0..3).map(|i| standard_normal_vec(3, &mut substream(seed, "t", i))).collect();
            let vae_before = vs.checksum();
            let mut grads = store.zero_grads();
            p2z_loss(&net, &store, &vae, &vs, &p, &f, &t, 0.5, Mode::Train, &mut substream(seed, "drop", 0), Some(&mut grads))
                .unwrap();
            let analytic = grads.flatten();
            let flat = store.flatten();
            let names: Vec<(String, usize)> = store.params().iter().map(|p| (p.name.clone(), p.value.len())).collect();
            let trainable: Vec<usize> = {
                let mut off = 0;
                let mut idx = Vec::new();
                for p in store.params() {
                    if p.trainable {
                        idx.extend((off..off + p.value.len()).step_by(3));
                    }
                    off += p.value.len();
                }
                idx
            };
            let mut probe = store.clone();
            let report = grad_check_piecewise(
                |x| {
                    let mut off = 0;
                    for (name, n) in &names {
                        let id = probe.id(name).unwrap();
                        probe.get_mut(id).data_mut().copy_from_slice(&x[off..off + n]);
                        off += n;
                    }
                    let (r, _) = p2z_loss(
                        &net,
                        &probe,
                        &vae,
                        &vs,
                        &p,
                        &f,
                        &t,
                        0.5,
                        Mode::Train,
                        &mut substream(seed, "drop", 0),
                        None,
                    )
                    .unwrap();
                    (r.total, analytic.clone())
                },
                &flat,
                &trainable,
                1e-3,
            );
            assert!(report.passed(), "seed {seed}: {report:?}");
            assert!(report.kinks * 20 <= trainable.len(), "seed {seed}: {report:?}");
            assert_eq!(vs.checksum(), vae_before);
        }
    }

    #[test]
    fn loss_identities() {
        let (net, store, vae, vs) = setup(7);
        let p: Vec<Vec<f64>> = (0..2).map(|i| standard_normal_vec(4, &mut substream(7, "p", i))).collect();
        let f: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::zeros(&[2, 16, 16])).collect();
        let input = Tensor::new(vec![2, 4], p.concat()).unwrap();
        let (z, _) = net.forward(&store, &input, Mode::Eval, &mut substream(0, "d", 0)).unwrap();
        let exact: Vec<Vec<f64>> = z.data().chunks(3).map(|c| c.to_vec()).collect();
        let (r, _) = p2z_loss(&net, &store, &vae, &vs, &p, &f, &exact, 0.0, Mode::Eval, &mut substream(0, "d", 0), None).unwrap();
        assert_eq!(r.latent_mse, 0.0);
        assert_eq!(r.total, r.latent_mse);
        let (r, _) = p2z_loss(&net, &store, &vae, &vs, &p, &f, &exact, 0.3, Mode::Eval, &mut substream(0, "d", 0), None).unwrap();
        assert_eq!(r.total, r.latent_mse + r.alpha * r.recon_mse);
        assert!(r.recon_mse > 0.0);
    }

    fn tiny_run(epochs: usize) -> (SampledSeries, SampledSeries, vae::Stage1Output, Stage2Output) {
        let cfg = WakeConfig {
            grid_h: 16,
            grid_w: 16,
            n_taps: 4,
            ..WakeConfig::default()
        };
        let (low, high) = build_dataset(&cfg, 1.0, 64.0, 20, 8, 3).unwrap();
        let va = VaeArchitecture {
            latent_dim: 3,
            ..mini_vae()
        };
        let s1 = vae::train_stage1(
            &low,
            &va,
            &vae::Stage1Config {
                epochs: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let cfg2 = Stage2Config {
            epochs,
            ..Default::default()
        };
        let s2 = train_stage2(&low, &s1.model, &s1.params, &s1.stats, &mini(), &cfg2, 4).unwrap();
        (low, high, s1, s2)
    }

    #[test]
    fn stage2_trace_and_frozen_vae() {
        let (low, _, s1, s2) = tiny_run(3);
        let before = s1.params.checksum();
        let again = train_stage2(&low, &s1.model, &s1.params, &s1.stats, &mini(), &Stage2Config { epochs: 3, ..Default::default() }, 4).unwrap();
        assert_eq!(s1.params.checksum(), before);
        assert_eq!(again.trace, s2.trace);
        assert_eq!(s2.trace.first().unwrap().alpha, 0.0);
        assert_eq!(s2.trace.last().unwrap().alpha, 0.01);
        for e in &s2.trace {
            assert!((e.total - (e.latent_mse + e.alpha * e.recon_mse)).abs() <= 1e-12 * e.total.abs().max(1.0));
        }
        let (_, _, _, zero) = tiny_run(0);
        let (_, fresh) = init_p2z(&mini(), 4).unwrap();
        assert_eq!(zero.params.flatten(), fresh.flatten());
    }

    #[test]
    fn inference_contracts() {
        let (_, high, s1, s2) = tiny_run(1);
        let mut dup = high.clone();
        dup.pressures[1] = dup.pressures[0].clone();
        dup.pressures[1].t = high.pressures[1].t;
        let out = infer_high_frequency(&dup, &s2.net, &s2.params, &s1.model, &s1.params, &s1.stats).unwrap();
        assert_eq!(out.snapshots.len(), high.pressures.len());
        assert_eq!(out.snapshots[0].u, out.snapshots[1].u);
        assert_eq!(out.timestamps(), high.timestamps());
        let again = infer_high_frequency(&dup, &s2.net, &s2.params, &s1.model, &s1.params, &s1.stats).unwrap();
        assert_eq!(again, out);

        let mut bad = high.clone();
        bad.pressures[3].cp.push(0.0);
        assert!(matches!(
            infer_high_frequency(&bad, &s2.net, &s2.params, &s1.model, &s1.params, &s1.stats),
            Err(Error::Dimension(_))
        ));
    }
}
