//! Small trainable MLP denoiser.
//!
//! Architecture: input is the noisy state concatenated with 8 sinusoidal
//! features of log σ_t; three SiLU hidden layers feed a linear output head
//! predicting ε̂. Gradients (for both training and input VJPs) come from a
//! hand-written backward pass through this fixed feed-forward graph.
//!
//! Weights serialize to a little-endian binary format with a magic header;
//! round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::error::{ensure, ensure_len, Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::schedule::{NoiseSchedule, DEFAULT_RHO};

const MAGIC: &[u8; 8] = b"VPMLP001";
const FORMAT_VERSION: u32 = 1;
const TIME_FREQS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
const N_TIME_FEATURES: usize = 2 * TIME_FREQS.len();
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    schedule: NoiseSchedule,
    dim: usize,
    /// Layer widths from input (dim + time features) to output (dim).
    layer_dims: Vec<usize>,
    /// All weights and biases, flattened layer by layer (W row-major, then b).
    params: Vec<f64>,
    seed: u64,
}

/// Forward-pass intermediates needed by the backward pass.
struct Cache {
    /// Activations entering each layer; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl MlpDenoiser {
    /// Fresh network with the default three hidden layers of width 128.
    pub fn new(dim: usize, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        Self::with_hidden(dim, schedule, &DEFAULT_HIDDEN, seed)
    }

    pub fn with_hidden(
        dim: usize,
        schedule: NoiseSchedule,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        ensure!(dim > 0, "denoiser dimension must be positive");
        ensure!(!hidden.is_empty(), "need at least one hidden layer");
        ensure!(
            hidden.iter().all(|&h| h > 0),
            "hidden widths must be positive"
        );
        let mut layer_dims = Vec::with_capacity(hidden.len() + 2);
        layer_dims.push(dim + N_TIME_FEATURES);
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(dim);

        let n_params: usize = layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let mut params = vec![0.0; n_params];
        let mut r = rng::stream(seed, "mlp-init");
        let mut off = 0;
        for w in layer_dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let scale = (2.0 / n_in as f64).sqrt();
            for p in params.iter_mut().skip(off).take(n_in * n_out) {
                *p = scale * rng::normal_vec(&mut r, 1)[0];
            }
            off += n_in * n_out + n_out; // biases stay zero
        }
        Ok(MlpDenoiser {
            schedule,
            dim,
            layer_dims,
            params,
            seed,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// (weight offset, bias offset, n_in, n_out) of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for i in 0..l {
            off += self.layer_dims[i] * self.layer_dims[i + 1] + self.layer_dims[i + 1];
        }
        let n_in = self.layer_dims[l];
        let n_out = self.layer_dims[l + 1];
        (off, off + n_in * n_out, n_in, n_out)
    }

    fn time_features(&self, t: f64) -> Result<[f64; N_TIME_FEATURES]> {
        let u = self.schedule.sigma_of_t(t)?.ln();
        let mut f = [0.0; N_TIME_FEATURES];
        for (i, freq) in TIME_FREQS.iter().enumerate() {
            f[2 * i] = (freq * u).sin();
            f[2 * i + 1] = (freq * u).cos();
        }
        Ok(f)
    }

    fn forward(&self, z: &[f64], t: f64, cache: Option<&mut Cache>) -> Result<Vec<f64>> {
        ensure_len!("denoiser input", self.dim, z.len());
        let feats = self.time_features(t)?;
        let mut a: Vec<f64> = z.iter().cloned().chain(feats).collect();
        let mut caches = cache;
        if let Some(c) = caches.as_deref_mut() {
            c.acts.clear();
            c.pre.clear();
            c.acts.push(a.clone());
        }
        for l in 0..self.n_layers() {
            let (w_off, b_off, n_in, n_out) = self.layer_offsets(l);
            let mut h = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                h[o] = self.params[b_off + o]
                    + row.iter().zip(&a).map(|(wv, av)| wv * av).sum::<f64>();
            }
            if let Some(c) = caches.as_deref_mut() {
                c.pre.push(h.clone());
            }
            let last = l == self.n_layers() - 1;
            a = if last {
                h
            } else {
                h.iter().map(|&x| silu(x)).collect()
            };
            if let Some(c) = caches.as_deref_mut() {
                if !last {
                    c.acts.push(a.clone());
                }
            }
        }
        Ok(a)
    }

    /// Backpropagate `dout` to the network input only (no parameter grads).
    fn backward_input(&self, cache: &Cache, dout: &[f64]) -> Vec<f64> {
        let mut d = dout.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w_off, _, n_in, n_out) = self.layer_offsets(l);
            if l < self.n_layers() - 1 {
                for (o, dv) in d.iter_mut().enumerate() {
                    *dv *= silu_prime(cache.pre[l][o]);
                }
            }
            let mut din = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (i, wv) in row.iter().enumerate() {
                    din[i] += wv * d[o];
                }
            }
            d = din;
        }
        d
    }

    /// Backpropagate `dout`, accumulating parameter gradients into `grads`.
    fn backward_params(&self, cache: &Cache, dout: &[f64], grads: &mut [f64]) {
        let mut d = dout.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w_off, b_off, n_in, n_out) = self.layer_offsets(l);
            if l < self.n_layers() - 1 {
                for (o, dv) in d.iter_mut().enumerate() {
                    *dv *= silu_prime(cache.pre[l][o]);
                }
            }
            let a = &cache.acts[l];
            for o in 0..n_out {
                grads[b_off + o] += d[o];
                let row = &mut grads[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (i, g) in row.iter_mut().enumerate() {
                    *g += d[o] * a[i];
                }
            }
            let mut din = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (i, wv) in row.iter().enumerate() {
                    din[i] += wv * d[o];
                }
            }
            d = din;
        }
    }

    /// Train by Adam on the noise-prediction loss E‖ε − ε̂(α_t·x + σ_t·ε, t)‖²
    /// with t drawn uniformly from a 64-point power-law grid. Returns the
    /// per-step loss trace.
    pub fn train(
        &mut self,
        data: &[Vec<f64>],
        steps: usize,
        lr: f64,
        batch: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        ensure!(!data.is_empty(), "training data must be nonempty");
        ensure!(batch > 0, "batch size must be positive");
        for x in data {
            ensure_len!("training point", self.dim, x.len());
        }
        let grid = self.schedule.edm_grid(
            64,
            self.schedule.t_floor(),
            self.schedule.t_max(),
            DEFAULT_RHO,
        )?;
        let mut r = rng::stream(seed, "mlp-train");
        let mut adam = Adam::new(self.params.len(), lr);
        let mut grads = vec![0.0; self.params.len()];
        let mut cache = Cache {
            acts: Vec::new(),
            pre: Vec::new(),
        };
        let mut trace = Vec::with_capacity(steps);
        for step in 0..steps {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..batch {
                let x = &data[r.random_range(0..data.len())];
                let t = grid.points()[r.random_range(0..grid.len())];
                let (a, s) = self.schedule.alpha_sigma(t)?;
                let eps = rng::normal_vec(&mut r, self.dim);
                let z: Vec<f64> = x
                    .iter()
                    .zip(&eps)
                    .map(|(xi, ei)| a * xi + s * ei)
                    .collect();
                let pred = self.forward(&z, t, Some(&mut cache))?;
                let dout: Vec<f64> = pred
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| 2.0 * (p - e) / batch as f64)
                    .collect();
                loss += pred
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| (p - e) * (p - e))
                    .sum::<f64>();
                self.backward_params(&cache, &dout, &mut grads);
            }
            loss /= batch as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: "mlp training loss".into(),
                });
            }
            adam.step(&mut self.params, &grads)?;
            if !self.params.iter().all(|p| p.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    term: "mlp parameters".into(),
                });
            }
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Write weights and metadata in the versioned binary format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let (kind, p1, p2, p3) = match self.schedule {
            NoiseSchedule::Ve {
                sigma_min,
                sigma_max,
            } => (0u8, sigma_min, sigma_max, 0.0),
            NoiseSchedule::Vp {
                sigma2_min,
                sigma2_max,
                t_max,
            } => (1u8, sigma2_min, sigma2_max, t_max),
        };
        buf.push(kind);
        for p in [p1, p2, p3] {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for d in &self.layer_dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Read weights written by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut pos = 0usize;

        if take(&buf, &mut pos, 8)? != MAGIC {
            return Err(Error::FileFormat("bad magic in mlp weight file".into()));
        }
        let version = read_u32(&buf, &mut pos)?;
        if version != FORMAT_VERSION {
            return Err(Error::FileFormat(format!(
                "unsupported mlp weight format version {version}"
            )));
        }
        let kind = take(&buf, &mut pos, 1)?[0];
        let p1 = read_f64(&buf, &mut pos)?;
        let p2 = read_f64(&buf, &mut pos)?;
        let p3 = read_f64(&buf, &mut pos)?;
        let schedule = match kind {
            0 => NoiseSchedule::ve(p1, p2)?,
            1 => NoiseSchedule::vp(p1, p2, p3)?,
            k => {
                return Err(Error::FileFormat(format!(
                    "unknown schedule kind {k} in mlp weight file"
                )))
            }
        };
        let seed = read_u64(&buf, &mut pos)?;
        let dim = read_u32(&buf, &mut pos)? as usize;
        let n_dims = read_u32(&buf, &mut pos)? as usize;
        let mut layer_dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            layer_dims.push(read_u32(&buf, &mut pos)? as usize);
        }
        let n_params = read_u64(&buf, &mut pos)? as usize;
        let expected: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if n_params != expected || layer_dims.first() != Some(&(dim + N_TIME_FEATURES)) {
            return Err(Error::FileFormat(
                "inconsistent layer dimensions in mlp weight file".into(),
            ));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(read_f64(&buf, &mut pos)?);
        }
        if pos != buf.len() {
            return Err(Error::FileFormat("trailing bytes in mlp weight file".into()));
        }
        Ok(MlpDenoiser {
            schedule,
            dim,
            layer_dims,
            params,
            seed,
        })
    }
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > buf.len() {
        return Err(Error::FileFormat("truncated mlp weight file".into()));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap()))
}

fn read_f64(buf: &[u8], pos: &mut usize) -> Result<f64> {
    Ok(f64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap()))
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps_hat(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(z, t, None)
    }

    fn eps_vjp(&self, z: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        ensure_len!("cotangent", self.dim, cotangent.len());
        let mut cache = Cache {
            acts: Vec::new(),
            pre: Vec::new(),
        };
        self.forward(z, t, Some(&mut cache))?;
        let din = self.backward_input(&cache, cotangent);
        Ok(din[..self.dim].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ve() -> NoiseSchedule {
        NoiseSchedule::ve(0.002, 50.0).unwrap()
    }

    fn small(seed: u64) -> MlpDenoiser {
        MlpDenoiser::with_hidden(2, ve(), &[32, 32, 32], seed).unwrap()
    }

    #[test]
    fn deterministic_construction() {
        let a = small(1);
        let b = small(1);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), small(2).params());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let den = small(3);
        let mut r = rng::stream(4, "fd");
        for t in [0.01, 0.9, 30.0] {
            let z = rng::normal_vec(&mut r, 2);
            let w = rng::normal_vec(&mut r, 2);
            let dvec = rng::normal_vec(&mut r, 2);
            let jt_w = den.eps_vjp(&z, t, &w).unwrap();
            let analytic: f64 = jt_w.iter().zip(&dvec).map(|(a, b)| a * b).sum();
            let h = 1e-5;
            let zp: Vec<f64> = z.iter().zip(&dvec).map(|(a, b)| a + h * b).collect();
            let zm: Vec<f64> = z.iter().zip(&dvec).map(|(a, b)| a - h * b).collect();
            let ep = den.eps_hat(&zp, t).unwrap();
            let em = den.eps_hat(&zm, t).unwrap();
            let fd: f64 = ep
                .iter()
                .zip(&em)
                .zip(&w)
                .map(|((p, m), wi)| wi * (p - m) / (2.0 * h))
                .sum();
            assert!(
                (analytic - fd).abs() / fd.abs().max(1e-4) < 1e-5,
                "t={t}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut den = small(5);
        let before = den.params().to_vec();
        let trace = den.train(&[vec![0.0, 0.0]], 0, 1e-3, 8, 1).unwrap();
        assert!(trace.is_empty());
        assert_eq!(den.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = vec![vec![0.5, -0.25]];
        let mut a = small(6);
        let mut b = small(6);
        a.train(&data, 20, 1e-3, 8, 9).unwrap();
        b.train(&data, 20, 1e-3, 8, 9).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn point_mass_training_reduces_loss() {
        let x0 = vec![0.8, -0.3];
        let mut den = small(7);
        let trace = den.train(&[x0.clone()], 800, 2e-3, 16, 11).unwrap();
        let head: f64 = trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = trace[trace.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < 0.5 * head,
            "loss did not drop: head {head}, tail {tail}"
        );
        // Smoothed trace decreases from start to end (allowing local noise).
        let mid: f64 = trace[trace.len() / 2..trace.len() / 2 + 50]
            .iter()
            .sum::<f64>()
            / 50.0;
        assert!(mid < head * 1.05);
        // Against the closed-form optimum ε̂* = (z − α_t·x₀)/σ_t.
        let sched = ve();
        let mut r = rng::stream(13, "probe");
        let mut err = 0.0;
        let mut count = 0;
        for t in [0.5, 2.0, 10.0] {
            let (a, s) = sched.alpha_sigma(t).unwrap();
            for _ in 0..20 {
                let eps = rng::normal_vec(&mut r, 2);
                let z: Vec<f64> = x0
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| a * x + s * e)
                    .collect();
                let pred = den.eps_hat(&z, t).unwrap();
                for i in 0..2 {
                    let opt = (z[i] - a * x0[i]) / s;
                    err += (pred[i] - opt).powi(2);
                    count += 1;
                }
            }
        }
        let mse = err / count as f64;
        assert!(mse < 0.35, "probe mse vs closed form too high: {mse}");
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut den = small(8);
        den.train(&[vec![0.1, 0.2]], 30, 1e-3, 8, 2).unwrap();
        let dir = std::env::temp_dir().join("vipaint-mlp-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.bin");
        den.save(&path).unwrap();
        let loaded = MlpDenoiser::load(&path).unwrap();
        assert_eq!(den.params().len(), loaded.params().len());
        for (a, b) in den.params().iter().zip(loaded.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.seed(), den.seed());
        assert_eq!(loaded.schedule(), den.schedule());
        let z = [0.3, -0.7];
        assert_eq!(
            den.eps_hat(&z, 1.5).unwrap(),
            loaded.eps_hat(&z, 1.5).unwrap()
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn load_rejects_corrupted_files() {
        let den = small(9);
        let dir = std::env::temp_dir().join("vipaint-mlp-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights-corrupt.bin");
        den.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(MlpDenoiser::load(&path).is_err());
        // Truncation is also rejected.
        den.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(MlpDenoiser::load(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
