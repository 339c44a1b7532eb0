//! Atomic (contrastive) posterior-transformation loss and the training loop
//! for [`Estimator`].
//!
//! For a sample `(theta_j, x_j)` the proposal is taken to be uniform over a
//! set of atoms: `theta_j` plus `M - 1` other parameters from the same batch.
//! The transformed posterior over atoms is then a softmax of
//! `log q(theta_m | x_j) - log p(theta_m)`, and the loss is the negative log
//! of its entry at `theta_j`. Its normalizer is the softmax denominator.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::exec::{rng_from, Execution};
use crate::mdn::{log_sum_exp, Estimator, MixtureDensityNetwork};
use crate::prior::Prior;

/// Paired simulations: parameters and their summaries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub thetas: Vec<Vec<f64>>,
    pub xs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn push(&mut self, theta: Vec<f64>, x: Vec<f64>) {
        self.thetas.push(theta);
        self.xs.push(x);
    }

    pub fn extend(&mut self, other: Dataset) {
        self.thetas.extend(other.thetas);
        self.xs.extend(other.xs);
    }
}

/// What the network is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Contrastive loss over atoms; valid for any proposal.
    #[default]
    Atomic,
    /// Plain negative log density of the true parameter. Only correct when
    /// every row was proposed from the prior.
    Likelihood,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Atomic => "atomic",
            Objective::Likelihood => "likelihood",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "atomic" => Ok(Objective::Atomic),
            "likelihood" => Ok(Objective::Likelihood),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOptions {
    pub batch_size: usize,
    /// Atoms per contrastive set, including the true parameter.
    pub atoms: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub objective: Objective,
    pub exec: Execution,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            batch_size: 256,
            atoms: 10,
            learning_rate: 5e-4,
            validation_fraction: 0.1,
            patience: 20,
            max_epochs: 500,
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            objective: Objective::Atomic,
            exec: Execution::default(),
        }
    }
}

impl TrainingOptions {
    pub fn validate(&self) -> Result<()> {
        if self.atoms < 2 || self.atoms > self.batch_size {
            bail!(Config, "atoms must satisfy 2 <= atoms <= batch size");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bail!(Config, "validation fraction must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || self.max_epochs == 0 {
            bail!(Config, "learning rate, clip norm and max epochs must be positive");
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Dataset in standardized coordinates with prior log densities attached.
struct Prepared {
    z_theta: Vec<Vec<f64>>,
    z_x: Vec<Vec<f64>>,
    log_prior: Vec<f64>,
}

fn prepare(est: &Estimator, thetas: &[Vec<f64>], xs: &[Vec<f64>], prior: &Prior) -> Result<Prepared> {
    let arch = &est.net.arch;
    if thetas.len() != xs.len() {
        bail!(Contract, "parameters and summaries differ in count");
    }
    if prior.dim() != arch.theta_dim {
        bail!(Contract, "prior dimension {} does not match estimator {}", prior.dim(), arch.theta_dim);
    }
    let mut log_prior = Vec::with_capacity(thetas.len());
    for (i, (t, x)) in thetas.iter().zip(xs).enumerate() {
        if t.len() != arch.theta_dim || x.len() != arch.x_dim {
            bail!(Contract, "row {i} has dimensions ({}, {}), expected ({}, {})", t.len(), x.len(), arch.theta_dim, arch.x_dim);
        }
        let lp = prior.log_density(t);
        if !lp.is_finite() {
            bail!(Contract, "row {i} parameters lie outside the prior support");
        }
        log_prior.push(lp);
    }
    Ok(Prepared {
        z_theta: thetas.iter().map(|t| est.standardizer.theta_forward(t)).collect(),
        z_x: xs.iter().map(|x| est.standardizer.x_forward(x)).collect(),
        log_prior,
    })
}

/// For each member, its own index followed by `m - 1` distinct others drawn
/// uniformly from the rest of `members`.
fn draw_atoms<R: Rng + ?Sized>(members: &[usize], m: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n = members.len();
    let m = m.min(n);
    members
        .iter()
        .enumerate()
        .map(|(pos, &own)| {
            let mut set = Vec::with_capacity(m);
            set.push(own);
            if m > 1 {
                for k in index::sample(rng, n - 1, m - 1) {
                    let k = if k >= pos { k + 1 } else { k };
                    set.push(members[k]);
                }
            }
            set
        })
        .collect()
}

const CHUNK: usize = 16;

/// Mean atomic loss over `atom_sets` (one set per sample, true atom first)
/// and, optionally, its gradient. Chunks are reduced in index order so the
/// result does not depend on the thread count.
fn loss_and_grad(
    net: &MixtureDensityNetwork,
    data: &Prepared,
    atom_sets: &[Vec<usize>],
    objective: Objective,
    want_grad: bool,
    exec: Execution,
) -> (f64, Option<Vec<f64>>) {
    let n = atom_sets.len();
    if n == 0 {
        return (0.0, want_grad.then(|| vec![0.0; net.params.len()]));
    }
    let inv_n = 1.0 / n as f64;
    let n_chunks = n.div_ceil(CHUNK);
    let parts = exec.map(n_chunks, |c| {
        let mut grad = want_grad.then(|| vec![0.0; net.params.len()]);
        let mut d_out = vec![0.0; net.arch.output_dim()];
        let mut loss = 0.0;
        for set in &atom_sets[c * CHUNK..((c + 1) * CHUNK).min(n)] {
            let own = set[0];
            let fwd = net.forward_with(&net.params, &data.z_x[own]);
            if objective == Objective::Likelihood {
                loss -= fwd.head.log_density(&data.z_theta[own]);
                if let Some(g) = grad.as_mut() {
                    d_out.iter_mut().for_each(|v| *v = 0.0);
                    fwd.head.accumulate_grad(&data.z_theta[own], -inv_n, &mut d_out);
                    net.backward(&net.params, &fwd, &d_out, g);
                }
                continue;
            }
            let logits: Vec<f64> = set
                .iter()
                .map(|&a| fwd.head.log_density(&data.z_theta[a]) - data.log_prior[a])
                .collect();
            let lse = log_sum_exp(&logits);
            loss += lse - logits[0];
            if let Some(g) = grad.as_mut() {
                d_out.iter_mut().for_each(|v| *v = 0.0);
                for (m, &a) in set.iter().enumerate() {
                    let soft = (logits[m] - lse).exp();
                    let coeff = if m == 0 { soft - 1.0 } else { soft };
                    if coeff != 0.0 {
                        // loss = lse - logit_0, so d loss / d logit_m = softmax_m - [m == 0]
                        fwd.head.accumulate_grad(&data.z_theta[a], coeff * inv_n, &mut d_out);
                    }
                }
                net.backward(&net.params, &fwd, &d_out, g);
            }
        }
        (loss, grad)
    });
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; net.params.len()]);
    for (l, g) in parts {
        total += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    (total * inv_n, grad)
}

/// Atomic APT loss on one batch, with its gradient w.r.t. the network
/// weights.
pub fn atomic_apt_loss<R: Rng + ?Sized>(
    est: &Estimator,
    thetas: &[Vec<f64>],
    xs: &[Vec<f64>],
    prior: &Prior,
    atoms: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if atoms == 0 || atoms > thetas.len() {
        bail!(Contract, "atoms ({atoms}) must be between 1 and the batch size ({})", thetas.len());
    }
    let data = prepare(est, thetas, xs, prior)?;
    let members: Vec<usize> = (0..thetas.len()).collect();
    let sets = draw_atoms(&members, atoms, rng);
    let (loss, grad) = loss_and_grad(&est.net, &data, &sets, Objective::Atomic, true, Execution::Sequential);
    Ok((loss, grad.expect("gradient requested")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training (index 0) and after each epoch.
    pub val_loss: Vec<f64>,
    pub best_val_loss: f64,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
}

/// Fits the network weights of `est` on `data` by minimizing the atomic loss,
/// holding out a validation split and keeping the best-validation weights.
/// The standardizer of `est` is left as is.
pub fn train(
    est: &mut Estimator,
    data: &Dataset,
    prior: &Prior,
    opts: &TrainingOptions,
    seed: u64,
) -> Result<TrainingReport> {
    opts.validate()?;
    if data.is_empty() {
        bail!(Contract, "cannot train on an empty dataset");
    }
    let prepared = prepare(est, &data.thetas, &data.xs, prior)?;
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * opts.validation_fraction).round() as usize)
        .min(data.len().saturating_sub(2));
    let (val, train_idx) = order.split_at(if n_val >= 2 { n_val } else { 0 });
    let mut train_idx = train_idx.to_vec();
    let atoms = match opts.objective {
        Objective::Atomic => opts.atoms,
        Objective::Likelihood => 1,
    };
    let val_sets = draw_atoms(val, atoms, &mut rng);

    let eval_val = |net: &MixtureDensityNetwork, rng: &mut rand_chacha::ChaCha8Rng, train_idx: &[usize]| {
        if val_sets.is_empty() {
            let sets = draw_atoms(train_idx, atoms, rng);
            loss_and_grad(net, &prepared, &sets, opts.objective, false, opts.exec).0
        } else {
            loss_and_grad(net, &prepared, &val_sets, opts.objective, false, opts.exec).0
        }
    };

    let initial = eval_val(&est.net, &mut rng, &train_idx);
    if !initial.is_finite() {
        bail!(Numeric, "non-finite initial validation loss");
    }
    let mut report = TrainingReport {
        train_loss: Vec::new(),
        val_loss: vec![initial],
        best_val_loss: initial,
        best_epoch: 0,
    };
    let mut best_params = est.net.params.clone();
    let mut adam = Adam::new(est.net.params.len(), opts.learning_rate, opts.adam_beta1, opts.adam_beta2);
    let mut stale = 0;

    for epoch in 1..=opts.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, batch) in train_idx.chunks(opts.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let sets = draw_atoms(batch, atoms, &mut rng);
            let (loss, grad) = loss_and_grad(&est.net, &prepared, &sets, opts.objective, true, opts.exec);
            let mut grad = grad.expect("gradient requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > opts.clip_norm {
                let s = opts.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.update(&mut est.net.params, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        report.train_loss.push(epoch_loss / batches.max(1) as f64);
        let v = eval_val(&est.net, &mut rng, &train_idx);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        report.val_loss.push(v);
        if v < report.best_val_loss {
            report.best_val_loss = v;
            report.best_epoch = epoch;
            best_params.clone_from(&est.net.params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }
    est.net.params = best_params;
    Ok(report)
}

/// Draws from `q(theta | x_o)` restricted to the prior support by rejection.
/// Returns the draws and the fraction of proposals rejected.
pub fn sample_posterior<R: Rng + ?Sized>(
    est: &Estimator,
    x_o: &[f64],
    n: usize,
    prior: &Prior,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, f64)> {
    const PROBE: usize = 100_000;
    const MIN_ACCEPTANCE: f64 = 1e-4;
    let head = est.head(x_o)?;
    let mut accepted = Vec::with_capacity(n);
    let mut proposed = 0usize;
    while accepted.len() < n {
        let theta = est.standardizer.theta_inverse(&head.sample(rng));
        proposed += 1;
        if prior.in_support(&theta) {
            accepted.push(theta);
        }
        if proposed >= PROBE && proposed % PROBE == 0 {
            let rate = accepted.len() as f64 / proposed as f64;
            if rate < MIN_ACCEPTANCE {
                bail!(
                    Leakage,
                    "posterior acceptance rate {rate:.2e} over {proposed} proposals; estimator places almost no mass on the prior support"
                );
            }
        }
    }
    let leakage = if proposed == 0 {
        0.0
    } else {
        (proposed - accepted.len()) as f64 / proposed as f64
    };
    Ok((accepted, leakage))
}
