//! On-disk formats: binary field files, pressure CSV and checkpoints.
//!
//! Field file layout, all little-endian:
//!
//! | offset | size | content                 |
//! |--------|------|-------------------------|
//! | 0      | 4    | magic `LFF1`            |
//! | 4      | 16   | `u32` T, N, H, W        |
//! | 20     | 16   | `f64` dt, t0            |
//! | 36     | 4·T·N·H·W | `f32` `[t][channel][row][col]` |
//!
//! Snapshot `k` is stamped `t0 + k · dt` on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_digest, RunConfig};
use crate::error::{Error, Result};
use crate::eval::NormalizationStats;
use crate::nn::{ParamStore, Tensor};
use crate::wake::{FlowSnapshot, PressureSample};

pub const FIELD_MAGIC: &[u8; 4] = b"LFF1";
pub const FIELD_HEADER_LEN: usize = 36;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// A uniformly sampled run of snapshots as stored in a field file.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    pub dt: f64,
    pub t0: f64,
    pub snapshots: Vec<FlowSnapshot>,
}

impl FieldSeries {
    /// Takes `t0` from the first snapshot. Timestamps must sit on the
    /// `t0 + k · dt` lattice, since that is all the file keeps.
    pub fn new(snapshots: Vec<FlowSnapshot>, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        let t0 = snapshots.first().map_or(0.0, |s| s.t);
        for (k, s) in snapshots.iter().enumerate() {
            let t = t0 + k as f64 * dt;
            if (s.t - t).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(Error::Dimension(format!(
                    "snapshot {k} at t={} is off the uniform grid (expected {t})",
                    s.t
                )));
            }
        }
        Ok(Self { dt, t0, snapshots })
    }
}

pub fn encode_fields(series: &FieldSeries) -> Result<Vec<u8>> {
    let (h, w) = series.snapshots.first().map_or((0, 0), |s| (s.h, s.w));
    let n_ch = FlowSnapshot::CHANNELS;
    let count = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Dimension(format!("{what} {v} does not fit a field file")))
    };
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN + 4 * series.snapshots.len() * n_ch * h * w);
    out.extend_from_slice(FIELD_MAGIC);
    for (v, what) in [(series.snapshots.len(), "T"), (n_ch, "N"), (h, "H"), (w, "W")] {
        out.extend_from_slice(&count(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&series.dt.to_le_bytes());
    out.extend_from_slice(&series.t0.to_le_bytes());
    for (k, s) in series.snapshots.iter().enumerate() {
        if (s.h, s.w) != (h, w) || s.u.len() != h * w || s.v.len() != h * w {
            return Err(Error::Dimension(format!("snapshot {k} is {}x{}, series is {h}x{w}", s.h, s.w)));
        }
        for x in s.u.iter().chain(&s.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn decode_fields(bytes: &[u8]) -> Result<FieldSeries> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < FIELD_HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header: {} of {FIELD_HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[..4] != FIELD_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let [t, n, h, w] = [4, 8, 12, 16].map(|o| u32_at(bytes, o) as usize);
    if n != FlowSnapshot::CHANNELS {
        return Err(fail(8, format!("expected {} channels, found {n}", FlowSnapshot::CHANNELS)));
    }
    let dt = f64_at(bytes, 20);
    let t0 = f64_at(bytes, 28);
    if !(dt.is_finite() && dt > 0.0) {
        return Err(fail(20, format!("dt must be positive, found {dt}")));
    }
    if !t0.is_finite() {
        return Err(fail(28, format!("t0 must be finite, found {t0}")));
    }
    let expected = t
        .checked_mul(n)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(FIELD_HEADER_LEN))
        .ok_or_else(|| fail(4, "payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let plane = h * w;
    let mut snapshots = Vec::with_capacity(t);
    let mut off = FIELD_HEADER_LEN;
    for k in 0..t {
        let mut s = FlowSnapshot::zeros(t0 + k as f64 * dt, h, w);
        for c in 0..n {
            for x in s.channel_mut(c).iter_mut() {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(fail(off, format!("non-finite value {v} in snapshot {k}, channel {c}")));
                }
                *x = v;
                off += 4;
            }
        }
        debug_assert_eq!(s.u.len(), plane);
        snapshots.push(s);
    }
    Ok(FieldSeries { dt, t0, snapshots })
}

pub fn write_field_file(path: &Path, series: &FieldSeries) -> Result<()> {
    write_bytes(path, &encode_fields(series)?)
}

pub fn read_field_file(path: &Path) -> Result<FieldSeries> {
    decode_fields(&read_bytes(path)?)
}

/// CSV with header `t,cp_0,...,cp_{n-1}`; values use the shortest decimal
/// that parses back to the same `f64`.
pub fn encode_pressures(samples: &[PressureSample]) -> Result<Vec<u8>> {
    let n = samples.first().map_or(0, |s| s.cp.len());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..n).map(|i| format!("cp_{i}"))).collect();
    wtr.write_record(&header).expect("in-memory csv write");
    for (k, s) in samples.iter().enumerate() {
        if s.cp.len() != n {
            return Err(Error::Dimension(format!("pressure sample {k} has {} taps, expected {n}", s.cp.len())));
        }
        let row: Vec<String> = std::iter::once(s.t).chain(s.cp.iter().copied()).map(|v| v.to_string()).collect();
        wtr.write_record(&row).expect("in-memory csv write");
    }
    Ok(wtr.into_inner().expect("in-memory csv flush"))
}

pub fn decode_pressures(bytes: &[u8]) -> Result<Vec<PressureSample>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let line_err = |line: u64, msg: String| Error::FormatLine { line, msg };
    let header = rdr.headers().map_err(|e| line_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("t") {
        return Err(line_err(1, "header must start with `t`".into()));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("cp_{i}") {
            return Err(line_err(1, format!("column {} is `{name}`, expected `cp_{i}`", i + 1)));
        }
    }
    let n = header.len() - 1;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            line_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n + 1 {
            return Err(line_err(line, format!("{} fields, header has {}", rec.len(), n + 1)));
        }
        let vals = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| line_err(line, format!("`{f}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(PressureSample {
            t: vals[0],
            cp: vals[1..].to_vec(),
        });
    }
    Ok(out)
}

pub fn write_pressure_file(path: &Path, samples: &[PressureSample]) -> Result<()> {
    write_bytes(path, &encode_pressures(samples)?)
}

pub fn read_pressure_file(path: &Path) -> Result<Vec<PressureSample>> {
    decode_pressures(&read_bytes(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    P2z,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Vae => 0,
            Stage::P2z => 1,
        }
    }
}

/// Trained parameters with everything needed to rebuild and check them.
///
/// Layout: magic `LFCK`, `u32` version, `u8` stage, `u32`-prefixed config
/// TOML, six `f64` statistics (means, stds, ρ, u_ref), `u32` blob count,
/// then per blob a `u32`-prefixed name, `u32` rank, `u32` dims and `f32`
/// values; finally the SHA-256 of everything before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: RunConfig,
    pub stats: NormalizationStats,
    pub params: Vec<(String, Tensor<f32>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.off < n {
            return Err(Error::Format {
                offset: self.off as u64,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.off;
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

impl Checkpoint {
    pub fn new(stage: Stage, config: &RunConfig, stats: NormalizationStats, store: &ParamStore<f32>) -> Self {
        Self {
            stage,
            config: config.identity(),
            stats,
            params: store.named_values(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage.tag());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config.to_toml());
        let s = &self.stats;
        for v in [s.mean[0], s.mean[1], s.std[0], s.std[1], s.rho, s.u_ref] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 4 + 4 + 1 + 32 {
            return Err(fail(bytes.len(), "truncated checkpoint".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let body_len = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
            return Err(fail(body_len, "checksum mismatch".into()));
        }
        let mut c = Cursor {
            bytes: &bytes[..body_len],
            off: 4,
        };
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let stage = match c.take(1, "stage")?[0] {
            0 => Stage::Vae,
            1 => Stage::P2z,
            other => return Err(fail(8, format!("unknown stage tag {other}"))),
        };
        let cfg_at = c.off;
        let config = RunConfig::from_toml(&c.string("config")?).map_err(|e| fail(cfg_at, e.to_string()))?;
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = c.f64("statistics")?;
        }
        let stats = NormalizationStats {
            mean: [v[0], v[1]],
            std: [v[2], v[3]],
            rho: v[4],
            u_ref: v[5],
        };
        let count = c.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string("parameter name")?;
            let rank = c.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(c.u32("shape")? as usize);
            }
            let len: usize = shape.iter().product();
            let at = c.off;
            let raw = c.take(len.checked_mul(4).ok_or_else(|| fail(at, "blob too large".into()))?, "parameter data")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data).map_err(|e| fail(at, e.to_string()))?));
        }
        if c.off != body_len {
            return Err(fail(c.off, format!("{} trailing bytes", body_len - c.off)));
        }
        Ok(Self {
            stage,
            config,
            stats,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    /// Reads a checkpoint; a missing file is a dependency error naming it.
    pub fn load(path: &Path, stage: Stage) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(path.to_path_buf()));
        }
        let ck = Self::from_bytes(&read_bytes(path)?)?;
        if ck.stage != stage {
            return Err(Error::CheckpointMismatch(format!(
                "{} holds a {:?} checkpoint, expected {stage:?}",
                path.display(),
                ck.stage
            )));
        }
        Ok(ck)
    }

    /// The stored architecture must match the one the caller will build.
    pub fn check_architecture(&self, cfg: &RunConfig) -> Result<()> {
        if self.config.vae != cfg.vae {
            return Err(Error::CheckpointMismatch("VAE architecture differs from the loading config".into()));
        }
        if self.stage == Stage::P2z && self.config.p2z != cfg.p2z {
            return Err(Error::CheckpointMismatch("p2z architecture differs from the loading config".into()));
        }
        Ok(())
    }

    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        store.load_values(&self.params)
    }
}

/// SHA-256 of a file's contents, lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&read_bytes(path)?))
}
