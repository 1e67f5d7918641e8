//! Finite-difference gradient suite shared by the integration tests and the
//! acceptance runner.

#![allow(dead_code)]

use latentflow::nn::ops::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, deconv2d, deconv2d_backward, dense,
    dense_backward, dropout, dropout_backward, relu, relu_backward, resize_bilinear, resize_bilinear_backward,
    LayerGrads,
};
use latentflow::nn::{
    grad_check, grad_check_piecewise, kl_divergence, kl_divergence_backward, reparameterize_backward,
    reparameterize_with_noise, GradCheckReport, Grads, Mode, ParamStore, Tensor,
};
use latentflow::p2z::{p2z_loss, P2zArchitecture, P2zNet};
use latentflow::rng::substream;
use latentflow::vae::{standard_normal_vec, vae_loss, PcBetaVae, VaeArchitecture};

pub const LAYER_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
/// Largest share of probed coordinates a composite check may skip as kinks.
pub const KINK_SHARE: f64 = 0.05;

pub struct Check {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
    pub probed: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.kinks as f64 <= KINK_SHARE * self.probed as f64 && self.report.checked > 0
    }
}

fn randn(n: usize, seed: u64, name: &str) -> Vec<f64> {
    standard_normal_vec(n, &mut substream(seed, name, 0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer(name: &str, seed: u64, x0: Vec<f64>, op: impl FnMut(&[f64]) -> (f64, Vec<f64>)) -> Check {
    let probed = x0.len();
    Check {
        name: name.into(),
        seed,
        report: grad_check(op, &x0, LAYER_TOL),
        probed,
    }
}

/// Conv/deconv with input, weight and bias all differentiated.
fn conv_like(seed: u64, transposed: bool) -> Check {
    let (c_in, c_out, h, w, k, s, p) = (2, 3, 7, 6, 3, 2, 1);
    let wshape = if transposed { [c_in, c_out, k, k] } else { [c_out, c_in, k, k] };
    let (nx, nw) = (c_in * h * w, c_in * c_out * k * k);
    let x0 = randn(nx + nw + c_out, seed, "conv-x");
    let out_len = if transposed {
        c_out * ((h - 1) * s + k - 2 * p) * ((w - 1) * s + k - 2 * p)
    } else {
        c_out * ((h + 2 * p - k) / s + 1) * ((w + 2 * p - k) / s + 1)
    };
    let r = randn(out_len, seed, "conv-r");
    let name = if transposed { "deconv2d" } else { "conv2d" };
    layer(name, seed, x0, |x| {
        let input = t(&[c_in, h, w], &x[..nx]);
        let weight = t(&wshape, &x[nx..nx + nw]);
        let bias = t(&[c_out], &x[nx + nw..]);
        let y = if transposed {
            deconv2d(&input, &weight, Some(&bias), s, p).unwrap()
        } else {
            conv2d(&input, &weight, Some(&bias), s, p).unwrap()
        };
        let g = Tensor::new(y.shape().to_vec(), r.clone()).unwrap();
        let mut gw = Tensor::zeros(&wshape);
        let mut gb = Tensor::zeros(&[c_out]);
        let acc = Some(LayerGrads {
            weight: &mut gw,
            bias: &mut gb,
        });
        let dx = if transposed {
            deconv2d_backward(&input, &weight, s, p, &g, acc).unwrap()
        } else {
            conv2d_backward(&input, &weight, s, p, &g, acc).unwrap()
        };
        let mut grad = dx.into_data();
        grad.extend_from_slice(gw.data());
        grad.extend_from_slice(gb.data());
        (dot(y.data(), &r), grad)
    })
}

fn dense_check(seed: u64) -> Check {
    let (b, a, o) = (3, 5, 4);
    let x0 = randn(b * a + o * a + o, seed, "dense-x");
    let r = randn(b * o, seed, "dense-r");
    layer("dense", seed, x0, |x| {
        let input = t(&[b, a], &x[..b * a]);
        let weight = t(&[o, a], &x[b * a..b * a + o * a]);
        let bias = t(&[o], &x[b * a + o * a..]);
        let y = dense(&input, &weight, &bias).unwrap();
        let mut gw = Tensor::zeros(&[o, a]);
        let mut gb = Tensor::zeros(&[o]);
        let dx = dense_backward(
            &input,
            &weight,
            &t(&[b, o], &r),
            Some(LayerGrads {
                weight: &mut gw,
                bias: &mut gb,
            }),
        )
        .unwrap();
        let mut grad = dx.into_data();
        grad.extend_from_slice(gw.data());
        grad.extend_from_slice(gb.data());
        (dot(y.data(), &r), grad)
    })
}

fn relu_check(seed: u64) -> Check {
    let x0 = randn(40, seed, "relu-x");
    let r = randn(40, seed, "relu-r");
    let op = |x: &[f64]| {
        let y = relu(&t(&[40], x));
        (dot(y.data(), &r), relu_backward(&y, &t(&[40], &r)).into_data())
    };
    let idx: Vec<usize> = (0..40).collect();
    Check {
        name: "relu".into(),
        seed,
        report: grad_check_piecewise(op, &x0, &idx, LAYER_TOL),
        probed: 40,
    }
}

fn batchnorm_check(seed: u64, mode: Mode) -> Check {
    let (b, f) = (4, 3);
    let x0 = randn(b * f + 2 * f, seed, "bn-x");
    let r = randn(b * f, seed, "bn-r");
    let rm = randn(f, seed, "bn-rm");
    let rv: Vec<f64> = randn(f, seed, "bn-rv").iter().map(|v| 0.5 + v * v).collect();
    let name = if mode == Mode::Train { "batchnorm/train" } else { "batchnorm/eval" };
    layer(name, seed, x0, |x| {
        let input = t(&[b, f], &x[..b * f]);
        let gamma = t(&[f], &x[b * f..b * f + f]);
        let beta = t(&[f], &x[b * f + f..]);
        let (mut m, mut v) = (t(&[f], &rm), t(&[f], &rv));
        let (y, cache) = batchnorm(&input, &gamma, &beta, &mut m, &mut v, mode).unwrap();
        let mut gg = Tensor::zeros(&[f]);
        let mut gb = Tensor::zeros(&[f]);
        let dx = batchnorm_backward(
            &cache,
            &gamma,
            &t(&[b, f], &r),
            Some(LayerGrads {
                weight: &mut gg,
                bias: &mut gb,
            }),
        )
        .unwrap();
        let mut grad = dx.into_data();
        grad.extend_from_slice(gg.data());
        grad.extend_from_slice(gb.data());
        (dot(y.data(), &r), grad)
    })
}

fn dropout_check(seed: u64) -> Check {
    let x0 = randn(30, seed, "drop-x");
    let r = randn(30, seed, "drop-r");
    layer("dropout", seed, x0, |x| {
        // Same substream each call: a fixed mask.
        let (y, mask) = dropout(&t(&[3, 10], x), 0.2, Mode::Train, &mut substream(seed, "drop-mask", 0)).unwrap();
        (dot(y.data(), &r), dropout_backward(mask.as_deref(), &t(&[3, 10], &r)).into_data())
    })
}

fn resize_check(seed: u64) -> Check {
    let (c, h, w, ho, wo) = (2, 5, 4, 8, 7);
    let x0 = randn(c * h * w, seed, "resize-x");
    let r = randn(c * ho * wo, seed, "resize-r");
    layer("resize_bilinear", seed, x0, |x| {
        let y = resize_bilinear(&t(&[c, h, w], x), ho, wo).unwrap();
        (dot(y.data(), &r), resize_bilinear_backward(&t(&[c, ho, wo], &r), h, w).unwrap().into_data())
    })
}

fn reparameterize_check(seed: u64) -> Check {
    let d = 6;
    let x0 = randn(2 * d, seed, "rep-x");
    let eps = randn(d, seed, "rep-eps");
    let r = randn(d, seed, "rep-r");
    layer("reparameterize", seed, x0, |x| {
        let code = reparameterize_with_noise(&x[..d], &x[d..], eps.clone()).unwrap();
        let (dmu, mut dlv) = reparameterize_backward(&code, &x[d..], &r);
        let mut grad = dmu;
        grad.append(&mut dlv);
        (dot(&code.z, &r), grad)
    })
}

fn kl_check(seed: u64) -> Check {
    let d = 5;
    let x0 = randn(2 * 2 * d, seed, "kl-x");
    layer("kl_divergence", seed, x0, |x| {
        let n = x.len() / 2;
        let (mu, lv) = (&x[..n], &x[n..]);
        let (mut dmu, mut dlv) = kl_divergence_backward(mu, lv, d);
        dmu.append(&mut dlv);
        (kl_divergence(mu, lv, d).unwrap(), dmu)
    })
}

/// Every layer-level op at one seed.
pub fn layer_suite(seed: u64) -> Vec<Check> {
    vec![
        conv_like(seed, false),
        conv_like(seed, true),
        dense_check(seed),
        relu_check(seed),
        batchnorm_check(seed, Mode::Train),
        batchnorm_check(seed, Mode::Eval),
        dropout_check(seed),
        resize_check(seed),
        reparameterize_check(seed),
        kl_check(seed),
    ]
}

pub fn mini_vae() -> VaeArchitecture {
    VaeArchitecture {
        enc_channels: vec![2, 3, 4, 4, 4],
        dec_seed_channels: 3,
        dec_channels: vec![3, 2, 2],
        latent_dim: 3,
        pressure_dim: 4,
        grid_h: 16,
        grid_w: 16,
        ..VaeArchitecture::default()
    }
}

pub fn mini_p2z() -> P2zArchitecture {
    P2zArchitecture {
        input_dim: 4,
        hidden: 6,
        blocks: 2,
        output_dim: 3,
        dropout: 0.2,
    }
}

/// Zero biases place dead ReLU units exactly on the kink; move off it.
pub fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = substream(seed, "bias-jitter", 0);
    let names: Vec<String> = store.params().iter().filter(|p| p.name.ends_with(".b")).map(|p| p.name.clone()).collect();
    for n in names {
        let id = store.id(&n).unwrap();
        for b in store.get_mut(id).data_mut() {
            *b = 0.1 * standard_normal_vec::<f64, _>(1, &mut rng)[0];
        }
    }
}

fn set_flat(store: &mut ParamStore<f64>, x: &[f64]) {
    let mut off = 0;
    for (name, v) in store.named_values() {
        let id = store.id(&name).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(&x[off..off + v.len()]);
        off += v.len();
    }
}

/// Flat indices of trainable parameters whose names start with `prefix`, every `step`-th.
fn probe_indices(store: &ParamStore<f64>, prefix: &str, step: usize) -> Vec<usize> {
    let mut off = 0;
    let mut idx = Vec::new();
    for p in store.params() {
        if p.trainable && p.name.starts_with(prefix) {
            idx.extend((off..off + p.value.len()).step_by(step));
        }
        off += p.value.len();
    }
    idx
}

fn composite(name: &str, seed: u64, store: &ParamStore<f64>, indices: Vec<usize>, analytic: Vec<f64>, mut loss: impl FnMut(&ParamStore<f64>) -> f64) -> Check {
    let mut probe = store.clone();
    let report = grad_check_piecewise(
        |x| {
            set_flat(&mut probe, x);
            (loss(&probe), analytic.clone())
        },
        &store.flatten(),
        &indices,
        COMPOSITE_TOL,
    );
    Check {
        name: name.into(),
        seed,
        report,
        probed: indices.len(),
    }
}

fn vae_fixture(seed: u64) -> (PcBetaVae, ParamStore<f64>, Vec<Tensor<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    vae_fixture_batch(seed, 2)
}

fn vae_fixture_batch(seed: u64, batch: u64) -> (PcBetaVae, ParamStore<f64>, Vec<Tensor<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let arch = mini_vae();
    let mut store = ParamStore::<f64>::new();
    let model = PcBetaVae::build(&arch, &mut store, &mut substream(seed, "gc-vae-init", 0)).unwrap();
    jitter_biases(&mut store, seed);
    let n = 2 * arch.grid_h * arch.grid_w;
    let fields = (0..batch).map(|i| t(&[2, arch.grid_h, arch.grid_w], &randn(n, seed + 100 * i, "gc-field"))).collect();
    let pressures = (0..batch).map(|i| randn(arch.pressure_dim, seed + 100 * i, "gc-p")).collect();
    let noise = (0..batch).map(|i| randn(arch.latent_dim, seed + 100 * i, "gc-eps")).collect();
    (model, store, fields, pressures, noise)
}

/// Encoder alone: projection of (μ, raw log-variance).
fn encoder_check(seed: u64) -> Check {
    let (model, store, fields, pressures, _) = vae_fixture(seed);
    let d = model.latent_dim();
    let r = randn(2 * d, seed, "gc-enc-r");
    let loss = |s: &ParamStore<f64>| {
        let (mu, lv, _) = model.encode_sample(s, &fields[0], &pressures[0]).unwrap();
        dot(&mu, &r[..d]) + dot(&lv, &r[d..])
    };
    let mut grads = store.zero_grads();
    let (_, _, cache) = model.encode_sample(&store, &fields[0], &pressures[0]).unwrap();
    model.encode_backward(&store, &cache, &r[..d], &r[d..], Some(&mut grads)).unwrap();
    composite("encoder", seed, &store, probe_indices(&store, "enc.", 2), grads.flatten(), loss)
}

/// Decoder alone: projection of the reconstructed field.
fn decoder_check(seed: u64) -> Check {
    let (model, store, _, pressures, noise) = vae_fixture(seed);
    let arch = mini_vae();
    let r = t(&[2, arch.grid_h, arch.grid_w], &randn(2 * arch.grid_h * arch.grid_w, seed, "gc-dec-r"));
    let loss = |s: &ParamStore<f64>| dot(model.decode(s, &noise[0], &pressures[0]).unwrap().data(), r.data());
    let mut grads = store.zero_grads();
    let (_, cache) = model.decode_sample(&store, &noise[0], &pressures[0]).unwrap();
    model.decode_backward(&store, &cache, &r, Some(&mut grads)).unwrap();
    composite("decoder", seed, &store, probe_indices(&store, "dec.", 2), grads.flatten(), loss)
}

/// Encode → reparameterise → decode → β-VAE loss.
fn vae_check(seed: u64) -> Check {
    let (model, store, fields, pressures, noise) = vae_fixture(seed);
    let mut grads = store.zero_grads();
    vae_loss(&model, &store, &fields, &pressures, &noise, 0.5, Some(&mut grads)).unwrap();
    let loss = |s: &ParamStore<f64>| vae_loss(&model, s, &fields, &pressures, &noise, 0.5, None).unwrap().total;
    composite("vae", seed, &store, probe_indices(&store, "", 5), grads.flatten(), loss)
}

/// Mapper loss through the frozen decoder, differentiated w.r.t. ψ only. A
/// batch of two makes batch norm nearly singular when the pair is close, so
/// this uses four.
fn p2z_check(seed: u64) -> Check {
    let (vae, vs, fields, pressures, targets) = vae_fixture_batch(seed, 4);
    let mut ps = ParamStore::<f64>::new();
    let net = P2zNet::build(&mini_p2z(), &mut ps, &mut substream(seed, "gc-p2z-init", 0)).unwrap();
    jitter_biases(&mut ps, seed + 1);
    let run = |s: &ParamStore<f64>, grads: Option<&mut Grads<f64>>| {
        p2z_loss(&net, s, &vae, &vs, &pressures, &fields, &targets, 0.5, Mode::Train, &mut substream(seed, "gc-drop", 0), grads)
            .unwrap()
            .0
            .total
    };
    let mut grads = ps.zero_grads();
    run(&ps, Some(&mut grads));
    composite("p2z", seed, &ps, probe_indices(&ps, "", 2), grads.flatten(), |s| run(s, None))
}

/// Encoder, decoder, full VAE and mapper composites at one seed.
pub fn composite_suite(seed: u64) -> Vec<Check> {
    vec![encoder_check(seed), decoder_check(seed), vae_check(seed), p2z_check(seed)]
}
pub mod oracles;
