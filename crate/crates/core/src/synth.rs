//! Synthetic inhomogeneous Poisson data on a regular grid, with an optional
//! shared sampling-effort field, and direct double-loop loss oracles.
//!
//! Sites sit at the cell centres of a `G × G` grid over the unit square.
//! Each covariate is a z-scored sum of three random low-frequency plane
//! waves. Species `j` has log-intensity `β*_j · x`. Presence-only counts are
//! Poisson with mean `E · λ̃*_j(x) s(x) / Σ λ̃*_j s`, where the effort field is
//! `s(x) = exp(−‖x − c‖ / ℓ)` around a random focal point `c`. Presence-absence
//! surveys are drawn without bias on a random subset of sites with presence
//! probability `1 − exp(−a_j λ̃*_j(x))`, `a_j` tuned to a target prevalence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::{OccurrenceMatrix, PaRecord, PaTable, SiteTable};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::matrix::Matrix;
use crate::model::normalize_columns;

const WAVES_PER_COVARIATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `G`; the grid holds `G²` sites.
    pub grid_side: usize,
    pub n_covariates: usize,
    pub n_species: usize,
    /// Expected number of presence-only records per species.
    pub expected_occurrences: f64,
    /// Standard deviation of each true coefficient.
    pub coefficient_scale: f64,
    /// Decay length `ℓ` of the effort field in unit-square coordinates;
    /// `None` means uniform effort.
    pub bias_scale: Option<f64>,
    /// Share of sites carrying a presence-absence survey.
    pub pa_fraction: f64,
    /// Target mean presence probability over surveyed sites.
    pub prevalence: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid_side: 20,
            n_covariates: 4,
            n_species: 5,
            expected_occurrences: 500.0,
            coefficient_scale: 1.0,
            bias_scale: None,
            pa_fraction: 0.5,
            prevalence: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_sites(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid_side < 2 {
            return bad(format!("grid side must be at least 2, got {}", self.grid_side));
        }
        if self.n_covariates == 0 || self.n_species == 0 {
            return bad("at least one covariate and one species are required".into());
        }
        if !(self.expected_occurrences > 0.0 && self.expected_occurrences.is_finite()) {
            return bad(format!(
                "expected occurrences must be positive, got {}",
                self.expected_occurrences
            ));
        }
        if !(self.coefficient_scale >= 0.0 && self.coefficient_scale.is_finite()) {
            return bad(format!(
                "coefficient scale must be nonnegative, got {}",
                self.coefficient_scale
            ));
        }
        if let Some(l) = self.bias_scale {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("bias scale must be positive, got {l}"));
            }
        }
        if !(self.pa_fraction > 0.0 && self.pa_fraction <= 1.0) {
            return bad(format!("pa fraction must be in (0, 1], got {}", self.pa_fraction));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence must be in (0, 1), got {}", self.prevalence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub sites: SiteTable,
    /// Presence-only counts, drawn under the effort field.
    pub occurrences: OccurrenceMatrix,
    pub pa: PaTable,
    /// Rows of `sites` carrying a survey, in increasing order.
    pub pa_sites: Vec<usize>,
    /// `λ̃*`, `K × N`, each column summing to one.
    pub true_normalized: Matrix,
    /// Mean of each presence-only count, `K × N`.
    pub expected_counts: Matrix,
    /// `s(x)` at every site.
    pub sampling_bias: Vec<f64>,
    /// `β*`, `N × P`.
    pub coefficients: Matrix,
}

impl SynthDataset {
    /// Share of sites whose effort is below `threshold`.
    pub fn bias_fraction_below(&self, threshold: f64) -> f64 {
        let below = self.sampling_bias.iter().filter(|&&s| s < threshold).count();
        below as f64 / self.sampling_bias.len() as f64
    }

    /// The true normalized intensities as a `site_id,<species>...` table.
    pub fn write_truth_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        write!(w, "site_id")?;
        for id in self.occurrences.species_ids() {
            write!(w, ",{id}")?;
        }
        writeln!(w)?;
        for (i, id) in self.sites.site_ids().iter().enumerate() {
            write!(w, "{id}")?;
            for v in self.true_normalized.row(i) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.grid_side;
    let k = spec.n_sites();
    let p = spec.n_covariates;
    let n = spec.n_species;

    let coords: Vec<[f64; 2]> = (0..k)
        .map(|i| {
            let (r, c) = (i / g, i % g);
            [(c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64]
        })
        .collect();
    let site_ids: Vec<String> = (0..k).map(|i| format!("s{i:05}")).collect();
    let covariate_names: Vec<String> = (1..=p).map(|c| format!("cov{c}")).collect();
    let species_ids: Vec<String> = (1..=n).map(|j| format!("sp{j}")).collect();

    let mut covariates = Matrix::zeros(k, p);
    for c in 0..p {
        let field = smooth_field(&coords, &mut rng);
        for (i, v) in field.into_iter().enumerate() {
            covariates.set(i, c, v);
        }
    }

    let coef_dist = Normal::new(0.0, spec.coefficient_scale.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let coefficients = if spec.coefficient_scale == 0.0 {
        Matrix::zeros(n, p)
    } else {
        Matrix::from_vec(n, p, (0..n * p).map(|_| coef_dist.sample(&mut rng)).collect())?
    };
    let mut log_intensity = Matrix::zeros(k, n);
    for i in 0..k {
        for j in 0..n {
            let z: f64 = covariates
                .row(i)
                .iter()
                .zip(coefficients.row(j))
                .map(|(x, b)| x * b)
                .sum();
            log_intensity.set(i, j, z);
        }
    }
    let true_normalized = normalize_columns(&log_intensity);

    let focal = [rng.random::<f64>(), rng.random::<f64>()];
    let sampling_bias: Vec<f64> = match spec.bias_scale {
        None => vec![1.0; k],
        Some(scale) => coords
            .iter()
            .map(|c| {
                let d = ((c[0] - focal[0]).powi(2) + (c[1] - focal[1]).powi(2)).sqrt();
                (-d / scale).exp()
            })
            .collect(),
    };

    let mut expected_counts = Matrix::zeros(k, n);
    for j in 0..n {
        let total: f64 = (0..k)
            .map(|i| true_normalized.get(i, j) * sampling_bias[i])
            .sum();
        for i in 0..k {
            let mu =
                spec.expected_occurrences * true_normalized.get(i, j) * sampling_bias[i] / total;
            expected_counts.set(i, j, mu);
        }
    }
    let mut counts = Matrix::zeros(k, n);
    for i in 0..k {
        for j in 0..n {
            counts.set(i, j, poisson_draw(expected_counts.get(i, j), &mut rng)?);
        }
    }

    let n_pa = ((spec.pa_fraction * k as f64).round() as usize).clamp(1, k);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut pa_sites = order[..n_pa].to_vec();
    pa_sites.sort_unstable();
    let mut records = Vec::with_capacity(n_pa * n);
    let rates: Vec<f64> = (0..n)
        .map(|j| {
            let lam: Vec<f64> = pa_sites.iter().map(|&i| true_normalized.get(i, j)).collect();
            prevalence_rate(&lam, spec.prevalence)
        })
        .collect();
    for &i in &pa_sites {
        for (j, a) in rates.iter().enumerate() {
            let prob = 1.0 - (-a * true_normalized.get(i, j)).exp();
            records.push(PaRecord {
                site_id: site_ids[i].clone(),
                species_id: species_ids[j].clone(),
                present: rng.random::<f64>() < prob,
            });
        }
    }

    Ok(SynthDataset {
        sites: SiteTable::new(site_ids, coords, covariate_names, covariates)?,
        occurrences: OccurrenceMatrix::new(species_ids, counts)?,
        pa: PaTable { records },
        pa_sites,
        true_normalized,
        expected_counts,
        sampling_bias,
        coefficients,
    })
}

/// Sum of random plane waves, z-scored over the supplied points.
fn smooth_field(coords: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES_PER_COVARIATE)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let freq = rng.random_range(0.5..2.0);
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let amp = rng.random_range(0.5..1.0);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let raw: Vec<f64> = coords
        .iter()
        .map(|c| {
            waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * c[0] + fy * c[1]) + ph).sin())
                .sum()
        })
        .collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    raw.into_iter().map(|v| (v - mean) / sd).collect()
}

fn poisson_draw(mean: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::Numerical(format!("poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng))
}

/// `a` such that the mean of `1 − exp(−a λ)` over `lam` equals `target`.
fn prevalence_rate(lam: &[f64], target: f64) -> f64 {
    let mean_prob = |a: f64| {
        lam.iter().map(|l| 1.0 - (-a * l).exp()).sum::<f64>() / lam.len() as f64
    };
    // bisection on log a; the mean is increasing in a
    let (mut lo, mut hi) = (-30.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Direct evaluation of a loss over the full site set from intensities
/// `λ = exp(logit)` and raw counts, written as explicit loops over sites and
/// species. `delta` is the pseudo-count of the unweighted normalized loss.
pub fn oracle_full_loss(lambda: &Matrix, y: &Matrix, kind: LossKind, delta: f64) -> Result<f64> {
    if lambda.shape() != y.shape() {
        return Err(Error::dim(
            "oracle_full_loss",
            format!("intensities {:?} vs counts {:?}", lambda.shape(), y.shape()),
        ));
    }
    if lambda.data().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Validation("intensities must be positive and finite".into()));
    }
    let (k, n) = lambda.shape();
    let kn = (k * n) as f64;
    match kind {
        LossKind::Poisson => {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..n {
                    let l = lambda.get(i, j);
                    s += l - y.get(i, j) * l.ln();
                }
            }
            Ok(s / kn)
        }
        LossKind::DeepMaxentWeighted | LossKind::DeepMaxentUnweighted => {
            if k < 2 {
                return Err(Error::DegenerateBatch(
                    "normalization over a single site is degenerate".into(),
                ));
            }
            let weighted = kind == LossKind::DeepMaxentWeighted;
            let mut s = 0.0;
            for j in 0..n {
                let mut lam_total = 0.0;
                let mut y_total = 0.0;
                for i in 0..k {
                    lam_total += lambda.get(i, j);
                    y_total += y.get(i, j) + delta;
                }
                if !weighted && y_total <= 0.0 {
                    return Err(Error::DegenerateBatch(format!(
                        "species {j} has no occurrences and no pseudo-count"
                    )));
                }
                for i in 0..k {
                    let target = if weighted {
                        y.get(i, j)
                    } else {
                        (y.get(i, j) + delta) / y_total
                    };
                    s += target * (lambda.get(i, j) / lam_total).ln();
                }
            }
            Ok(-s / kn)
        }
        LossKind::CrossEntropySpecies => {
            let mut s = 0.0;
            let mut retained = 0usize;
            for i in 0..k {
                let y_total: f64 = (0..n).map(|j| y.get(i, j)).sum();
                if y_total <= 0.0 {
                    continue;
                }
                retained += 1;
                let lam_total: f64 = (0..n).map(|j| lambda.get(i, j)).sum();
                for j in 0..n {
                    s += y.get(i, j) / y_total * (lambda.get(i, j) / lam_total).ln();
                }
            }
            if retained == 0 {
                return Err(Error::DegenerateBatch(
                    "no site has any occurrence".into(),
                ));
            }
            Ok(-s / retained as f64)
        }
        LossKind::BinaryCrossEntropy => {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..n {
                    let l = lambda.get(i, j);
                    let p = l / (1.0 + l);
                    s += if y.get(i, j) > 0.0 {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    };
                }
            }
            Ok(-s / kn)
        }
    }
}
