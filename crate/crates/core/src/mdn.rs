//! Conditional mixture-density network `q(theta | x)` with diagonal Gaussian
//! components, and the affine standardization of its inputs and outputs.
//!
//! Gradients are written out by hand: the network is a small tanh MLP whose
//! final layer emits mixture logits, component means and log-scales.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{bail, Error, Result};
use crate::exec::rng_from;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const LOG_SCALE_BOUND: f64 = 7.0;
const VARIANCE_FLOOR: f64 = 1e-12;
const FORMAT_TAG: &str = "cohort-sbi-estimator";
const FORMAT_VERSION: u32 = 1;

/// Per-dimension affine maps fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub theta_shift: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
}

fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    // dimensions that never vary pass through unscaled
    let scale = var
        .iter()
        .map(|s| {
            let v = s / n;
            if v < VARIANCE_FLOOR {
                1.0
            } else {
                v.sqrt()
            }
        })
        .collect();
    (mean, scale)
}

impl Standardizer {
    pub fn fit(thetas: &[Vec<f64>], xs: &[Vec<f64>]) -> Result<Self> {
        if thetas.is_empty() || thetas.len() != xs.len() {
            bail!(Contract, "standardizer needs a non-empty paired dataset");
        }
        let (theta_shift, theta_scale) = column_moments(thetas);
        let (x_shift, x_scale) = column_moments(xs);
        Ok(Standardizer {
            theta_shift,
            theta_scale,
            x_shift,
            x_scale,
        })
    }

    pub fn identity(theta_dim: usize, x_dim: usize) -> Self {
        Standardizer {
            theta_shift: vec![0.0; theta_dim],
            theta_scale: vec![1.0; theta_dim],
            x_shift: vec![0.0; x_dim],
            x_scale: vec![1.0; x_dim],
        }
    }

    pub fn theta_forward(&self, theta: &[f64]) -> Vec<f64> {
        affine(theta, &self.theta_shift, &self.theta_scale)
    }

    pub fn theta_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.theta_shift)
            .zip(&self.theta_scale)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    pub fn x_forward(&self, x: &[f64]) -> Vec<f64> {
        affine(x, &self.x_shift, &self.x_scale)
    }

    pub fn x_inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.x_shift)
            .zip(&self.x_scale)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// Log-determinant of d z / d theta.
    pub fn theta_log_jacobian(&self) -> f64 {
        -self.theta_scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

fn affine(v: &[f64], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(shift)
        .zip(scale)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// Layer sizes and mixture size of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub x_dim: usize,
    pub theta_dim: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
}

impl Architecture {
    pub fn new(x_dim: usize, theta_dim: usize) -> Self {
        Architecture {
            x_dim,
            theta_dim,
            hidden: vec![64, 64],
            components: 10,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.components * (1 + 2 * self.theta_dim)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.x_dim];
        s.extend(&self.hidden);
        s.push(self.output_dim());
        s
    }

    pub fn n_params(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Mixture parameters produced by the network for one conditioning input.
#[derive(Debug, Clone)]
pub struct MixtureHead {
    pub log_weights: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    clamped: Vec<bool>,
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MixtureHead {
    fn from_output(out: &[f64], k: usize, d: usize) -> Self {
        let logits = &out[..k];
        let lse = log_sum_exp(logits);
        let raw_ls = &out[k + k * d..];
        MixtureHead {
            log_weights: logits.iter().map(|l| l - lse).collect(),
            means: out[k..k + k * d].to_vec(),
            log_scales: raw_ls
                .iter()
                .map(|v| v.clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND))
                .collect(),
            clamped: raw_ls.iter().map(|v| v.abs() > LOG_SCALE_BOUND).collect(),
        }
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    fn component_log_densities(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..self.components())
            .map(|k| {
                let mut c = self.log_weights[k];
                for (i, &zi) in z.iter().enumerate() {
                    let ls = self.log_scales[k * d + i];
                    let u = (zi - self.means[k * d + i]) * (-ls).exp();
                    c -= 0.5 * u * u + ls + 0.5 * LN_2PI;
                }
                c
            })
            .collect()
    }

    /// Log mixture density at standardized `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(z))
    }

    /// Adds `scale * d log_density(z) / d output` into `d_out`, returning
    /// the log density.
    pub(crate) fn accumulate_grad(&self, z: &[f64], scale: f64, d_out: &mut [f64]) -> f64 {
        let k_n = self.components();
        let d = z.len();
        let c = self.component_log_densities(z);
        let lse = log_sum_exp(&c);
        for k in 0..k_n {
            let r = (c[k] - lse).exp();
            d_out[k] += scale * (r - self.log_weights[k].exp());
            for i in 0..d {
                let idx = k * d + i;
                let inv_var = (-2.0 * self.log_scales[idx]).exp();
                let diff = z[i] - self.means[idx];
                d_out[k_n + idx] += scale * r * diff * inv_var;
                if !self.clamped[idx] {
                    d_out[k_n + k_n * d + idx] += scale * r * (diff * diff * inv_var - 1.0);
                }
            }
        }
        lse
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.means.len() / self.components();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        (0..d)
            .map(|i| {
                let e: f64 = StandardNormal.sample(rng);
                self.means[k * d + i] + self.log_scales[k * d + i].exp() * e
            })
            .collect()
    }
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct Forward {
    acts: Vec<Vec<f64>>,
    pub(crate) head: MixtureHead,
}

/// A tanh MLP emitting mixture parameters. Weights are stored flat, layer by
/// layer, each as a row-major `out x in` matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensityNetwork {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

impl MixtureDensityNetwork {
    /// Glorot-uniform weights, zero biases, with component means spread out
    /// so components start distinguishable.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let sizes = arch.sizes();
        let mut params = Vec::with_capacity(arch.n_params());
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut limit = (6.0 / (n_in + n_out) as f64).sqrt();
            if l + 1 == n_layers {
                limit *= 0.1;
            }
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
            params.extend((0..n_in * n_out).map(|_| dist.sample(&mut rng)));
            if l + 1 == n_layers {
                let k = arch.components;
                let d = arch.theta_dim;
                let mut bias = vec![0.0; n_out];
                for b in &mut bias[k..k + k * d] {
                    *b = StandardNormal.sample(&mut rng);
                }
                params.extend(bias);
            } else {
                params.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        MixtureDensityNetwork { arch, params }
    }

    /// Offsets of the weight matrix and bias of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let sizes = self.arch.sizes();
        let mut off = 0;
        for w in sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + sizes[l] * sizes[l + 1])
    }

    pub(crate) fn forward_with(&self, params: &[f64], z_x: &[f64]) -> Forward {
        let sizes = self.arch.sizes();
        let n_layers = sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(z_x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let input = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        let head = MixtureHead::from_output(
            acts.last().unwrap(),
            self.arch.components,
            self.arch.theta_dim,
        );
        Forward { acts, head }
    }

    pub fn head(&self, z_x: &[f64]) -> MixtureHead {
        self.forward_with(&self.params, z_x).head
    }

    /// Backpropagates `d_out` (gradient w.r.t. the raw output layer) and adds
    /// the parameter gradient into `grad`.
    pub(crate) fn backward(&self, params: &[f64], fwd: &Forward, d_out: &[f64], grad: &mut [f64]) {
        let sizes = self.arch.sizes();
        let n_layers = sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += sizes[l] * sizes[l + 1] + sizes[l + 1];
        }
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let o = offsets[l];
            let input = &fwd.acts[l];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let g = &mut grad[o + j * n_in..o + (j + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += dj * xi;
                }
                grad[o + n_in * n_out + j] += dj;
            }
            if l == 0 {
                break;
            }
            let w = &params[o..o + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (p, wij) in prev.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *p += dj * wij;
                }
            }
            // tanh' = 1 - a^2
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// Gradient of the log mixture density at standardized `(z_theta, z_x)`.
    pub fn log_density_and_grad(&self, z_theta: &[f64], z_x: &[f64]) -> (f64, Vec<f64>) {
        let fwd = self.forward_with(&self.params, z_x);
        let mut d_out = vec![0.0; self.arch.output_dim()];
        let lp = fwd.head.accumulate_grad(z_theta, 1.0, &mut d_out);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&self.params, &fwd, &d_out, &mut grad);
        (lp, grad)
    }
}

/// A trained conditional density estimator over raw parameters and raw
/// summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub net: MixtureDensityNetwork,
    pub standardizer: Standardizer,
}

impl Estimator {
    pub fn new(net: MixtureDensityNetwork, standardizer: Standardizer) -> Result<Self> {
        if standardizer.theta_shift.len() != net.arch.theta_dim
            || standardizer.x_shift.len() != net.arch.x_dim
        {
            bail!(Contract, "standardizer dimensions do not match the network");
        }
        Ok(Estimator { net, standardizer })
    }

    fn check_dims(&self, theta: Option<&[f64]>, x: &[f64]) -> Result<()> {
        if x.len() != self.net.arch.x_dim {
            bail!(
                Contract,
                "summary has {} dimensions, estimator expects {}",
                x.len(),
                self.net.arch.x_dim
            );
        }
        if let Some(t) = theta {
            if t.len() != self.net.arch.theta_dim {
                bail!(
                    Contract,
                    "parameter vector has {} dimensions, estimator expects {}",
                    t.len(),
                    self.net.arch.theta_dim
                );
            }
        }
        Ok(())
    }

    /// Log density of raw `theta` given raw `x`.
    pub fn log_prob(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_dims(Some(theta), x)?;
        let head = self.net.head(&self.standardizer.x_forward(x));
        Ok(head.log_density(&self.standardizer.theta_forward(theta))
            + self.standardizer.theta_log_jacobian())
    }

    pub fn head(&self, x: &[f64]) -> Result<MixtureHead> {
        self.check_dims(None, x)?;
        Ok(self.net.head(&self.standardizer.x_forward(x)))
    }

    /// Unconstrained draws from `q(theta | x)` in raw units.
    pub fn sample_raw<R: Rng + ?Sized>(&self, x: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let head = self.head(x)?;
        Ok((0..n)
            .map(|_| self.standardizer.theta_inverse(&head.sample(rng)))
            .collect())
    }

    /// Self-describing text form; floats use shortest round-trip notation.
    pub fn to_text(&self) -> String {
        let a = &self.net.arch;
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut s = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        s.push_str(&format!("x_dim {}\ntheta_dim {}\ncomponents {}\n", a.x_dim, a.theta_dim, a.components));
        s.push_str(&format!(
            "hidden {}\n",
            a.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ")
        ));
        let sizes = a.sizes();
        for (l, w) in sizes.windows(2).enumerate() {
            s.push_str(&format!("layer {l} {} {}\n", w[1], w[0]));
        }
        s.push_str(&format!("theta_shift {}\n", row(&self.standardizer.theta_shift)));
        s.push_str(&format!("theta_scale {}\n", row(&self.standardizer.theta_scale)));
        s.push_str(&format!("x_shift {}\n", row(&self.standardizer.x_shift)));
        s.push_str(&format!("x_scale {}\n", row(&self.standardizer.x_scale)));
        s.push_str(&format!("params {}\n", self.net.params.len()));
        for p in &self.net.params {
            s.push_str(&format!("{p:e}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| -> Result<Vec<&str>> {
            lines
                .next()
                .map(|l| l.split_whitespace().collect())
                .ok_or_else(|| Error::Format(format!("estimator file truncated before {what}")))
        };
        let fmt_err = |what: &str| Error::Format(format!("estimator file: malformed {what}"));
        let header = next("header")?;
        if header.first() != Some(&FORMAT_TAG) {
            bail!(Format, "not an estimator file");
        }
        if header.get(1) != Some(&"1") {
            bail!(Format, "unsupported estimator version {:?}", header.get(1));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let l = next(name)?;
            if l.first() != Some(&name) {
                return Err(fmt_err(name));
            }
            Ok(l[1..].iter().map(|s| s.to_string()).collect())
        };
        let one = |v: Vec<String>, name: &str| -> Result<usize> {
            v.first().and_then(|s| s.parse().ok()).ok_or_else(|| fmt_err(name))
        };
        let floats = |v: Vec<String>, name: &str| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|_| fmt_err(name)))
                .collect()
        };
        let x_dim = one(field("x_dim")?, "x_dim")?;
        let theta_dim = one(field("theta_dim")?, "theta_dim")?;
        let components = one(field("components")?, "components")?;
        let hidden = field("hidden")?
            .iter()
            .map(|s| s.parse().map_err(|_| fmt_err("hidden")))
            .collect::<Result<Vec<usize>>>()?;
        let arch = Architecture {
            x_dim,
            theta_dim,
            hidden,
            components,
        };
        for (l, w) in arch.sizes().windows(2).enumerate() {
            let f = field("layer")?;
            if f != [l.to_string(), w[1].to_string(), w[0].to_string()] {
                return Err(fmt_err("layer shape"));
            }
        }
        let standardizer = Standardizer {
            theta_shift: floats(field("theta_shift")?, "theta_shift")?,
            theta_scale: floats(field("theta_scale")?, "theta_scale")?,
            x_shift: floats(field("x_shift")?, "x_shift")?,
            x_scale: floats(field("x_scale")?, "x_scale")?,
        };
        let n = one(field("params")?, "params")?;
        if n != arch.n_params() {
            bail!(Format, "estimator file declares {n} weights, architecture needs {}", arch.n_params());
        }
        let params = lines
            .by_ref()
            .take(n)
            .map(|l| l.trim().parse::<f64>().map_err(|_| fmt_err("weight")))
            .collect::<Result<Vec<f64>>>()?;
        if params.len() != n {
            bail!(Format, "estimator file truncated: {} of {n} weights", params.len());
        }
        Estimator::new(MixtureDensityNetwork { arch, params }, standardizer)
    }
}

/// Analytic diagonal-Gaussian log density, used to cross-check the
/// single-component path.
pub fn diag_gaussian_log_density(x: &[f64], mean: &[f64], sd: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(sd)
        .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
        .sum()
}
