use crate::error::{bail, Result};

/// Normalized histogram on explicit bin edges. The last edge may be
/// `f64::INFINITY` for an overflow bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    /// Number of underlying events; zero marks an empty histogram whose
    /// masses are all zero.
    pub events: u64,
}

impl Histogram {
    /// Builds a histogram from raw (non-negative) weights, normalizing them.
    pub fn from_weights(edges: Vec<f64>, weights: Vec<f64>, events: u64) -> Result<Self> {
        if edges.len() != weights.len() + 1 || weights.is_empty() {
            bail!(
                Format,
                "histogram needs one more edge than bins, got {} edges for {} bins",
                edges.len(),
                weights.len()
            );
        }
        if edges.windows(2).any(|w| !(w[0] < w[1]) || w[0].is_nan()) {
            bail!(Format, "histogram edges must be strictly increasing");
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            bail!(Format, "histogram mass {w} is negative or non-finite");
        }
        let total: f64 = weights.iter().sum();
        let masses = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else if events == 0 {
            weights
        } else {
            bail!(Format, "histogram masses sum to zero");
        };
        Ok(Histogram {
            edges,
            masses,
            events,
        })
    }

    /// Unit-width bins `[lo + i, lo + i + 1)` with an optional overflow bin.
    pub(crate) fn from_integer_counts(lo: i64, counts: &[u64], overflow: Option<u64>) -> Self {
        let mut edges: Vec<f64> = (0..=counts.len()).map(|i| (lo + i as i64) as f64).collect();
        let mut weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        if let Some(c) = overflow {
            edges.push(f64::INFINITY);
            weights.push(c as f64);
        }
        let events = weights.iter().sum::<f64>() as u64;
        Self::from_weights(edges, weights, events).expect("integer bins are well formed")
    }

    /// Equal-width histogram spanning the sample range.
    pub fn from_samples(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() || n_bins == 0 {
            bail!(Contract, "histogram of an empty sample");
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            bail!(Numeric, "non-finite value in sample");
        }
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let pad = 1e-9 * lo.abs().max(1.0);
            (lo - pad, hi + pad)
        };
        let width = (hi - lo) / n_bins as f64;
        let mut counts = vec![0.0; n_bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[k] += 1.0;
        }
        let mut edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
        edges[n_bins] = hi;
        Self::from_weights(edges, counts, values.len() as u64)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events == 0
    }

    pub fn mean(&self) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.masses)
            .map(|(e, m)| m * 0.5 * (e[0] + bounded_hi(e[0], e[1])))
            .sum()
    }

    /// Redistributes mass onto `grid` by interval overlap. Returns the
    /// rebinned (renormalized) histogram and the mass that fell outside
    /// the grid. Mass in an unbounded bin goes to the first grid bin whose
    /// upper edge exceeds the bin's lower edge.
    pub fn rebin_onto(&self, grid: &[f64]) -> Result<(Histogram, f64)> {
        if grid.len() < 2 {
            bail!(Contract, "target grid needs at least one bin");
        }
        let mut out = vec![0.0; grid.len() - 1];
        for (e, &m) in self.edges.windows(2).zip(&self.masses) {
            if m == 0.0 {
                continue;
            }
            let (lo, hi) = (e[0], e[1]);
            if hi.is_infinite() {
                if let Some(k) = grid.windows(2).position(|g| g[1] > lo) {
                    out[k] += m;
                }
                continue;
            }
            for (k, g) in grid.windows(2).enumerate() {
                let overlap = hi.min(g[1]) - lo.max(g[0]);
                if overlap > 0.0 {
                    out[k] += m * overlap / (hi - lo);
                }
            }
        }
        let kept: f64 = out.iter().sum();
        let dropped = (self.masses.iter().sum::<f64>() - kept).max(0.0);
        let rebinned = Histogram::from_weights(grid.to_vec(), out, self.events)
            .or_else(|_| Histogram::from_weights(grid.to_vec(), vec![0.0; grid.len() - 1], 0))?;
        Ok((rebinned, dropped))
    }
}

fn bounded_hi(lo: f64, hi: f64) -> f64 {
    if hi.is_finite() {
        hi
    } else {
        lo + 1.0
    }
}
