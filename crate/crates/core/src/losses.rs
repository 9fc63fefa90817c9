//! Training objectives over a batch of sites.
//!
//! All losses take log-intensities (`logits`, `B × N`) rather than
//! intensities. Each objective is available both as a recorder that appends
//! the loss to a [`Tape`] and as a plain value function.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Batch-normalized cross-entropy with raw counts as labels, so each
    /// species weighs in proportionally to its number of occurrences.
    DeepMaxentWeighted,
    /// Batch-normalized cross-entropy with per-species normalized labels.
    DeepMaxentUnweighted,
    Poisson,
    CrossEntropySpecies,
    BinaryCrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::DeepMaxentWeighted,
        LossKind::DeepMaxentUnweighted,
        LossKind::Poisson,
        LossKind::CrossEntropySpecies,
        LossKind::BinaryCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::DeepMaxentWeighted => "deepmaxent",
            LossKind::DeepMaxentUnweighted => "deepmaxent-unweighted",
            LossKind::Poisson => "poisson",
            LossKind::CrossEntropySpecies => "ce",
            LossKind::BinaryCrossEntropy => "bce",
        }
    }

    pub fn is_deepmaxent(self) -> bool {
        matches!(
            self,
            LossKind::DeepMaxentWeighted | LossKind::DeepMaxentUnweighted
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss `{s}` (expected one of: deepmaxent, deepmaxent-unweighted, poisson, ce, bce)"
                ))
            })
    }
}

/// Occurrence labels for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    counts: Matrix,
    presence: Matrix,
    delta: f64,
}

impl BatchLabels {
    /// `counts` are raw nonnegative occurrence counts; `delta` is the
    /// pseudo-count added wherever a loss needs strictly positive totals.
    pub fn new(counts: Matrix, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!(
                "pseudo-count must be finite and nonnegative, got {delta}"
            )));
        }
        if counts.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(
                "occurrence counts must be finite and nonnegative".into(),
            ));
        }
        let presence = counts.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        Ok(BatchLabels {
            counts,
            presence,
            delta,
        })
    }

    pub fn counts(&self) -> &Matrix {
        &self.counts
    }

    pub fn presence(&self) -> &Matrix {
        &self.presence
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn shape(&self) -> (usize, usize) {
        self.counts.shape()
    }

    /// Counts with the pseudo-count applied.
    pub fn adjusted_counts(&self) -> Matrix {
        let d = self.delta;
        self.counts.map(|v| v + d)
    }

    /// Per-species batch totals of the adjusted counts.
    pub fn species_totals(&self) -> Vec<f64> {
        self.adjusted_counts().column_sums()
    }

    /// Adjusted counts divided by their per-species batch total.
    pub fn normalized_per_species(&self) -> Result<Matrix> {
        let mut y = self.adjusted_counts();
        let totals = y.column_sums();
        if let Some(j) = totals.iter().position(|t| *t <= 0.0) {
            return Err(Error::DegenerateBatch(format!(
                "species column {j} has no occurrences in the batch and the pseudo-count is zero"
            )));
        }
        for r in 0..y.rows() {
            for (v, t) in y.row_mut(r).iter_mut().zip(&totals) {
                *v /= t;
            }
        }
        Ok(y)
    }
}

fn check_shape(logits: &Matrix, labels: &BatchLabels, op: &'static str) -> Result<()> {
    if logits.shape() != labels.shape() {
        return Err(Error::dim(
            op,
            format!(
                "logits {:?} vs labels {:?}",
                logits.shape(),
                labels.shape()
            ),
        ));
    }
    Ok(())
}

fn mean_scale(shape: (usize, usize)) -> f64 {
    1.0 / (shape.0 * shape.1) as f64
}

/// `(1/BN) Σ (λ − y·log λ)` with `λ = exp(logits)`.
pub fn record_poisson(tape: &mut Tape, logits: NodeId, labels: &BatchLabels) -> Result<NodeId> {
    check_shape(tape.value(logits), labels, "poisson_loss")?;
    let scale = mean_scale(labels.shape());
    tape.poisson_nll(logits, labels.counts().clone(), scale)
}

/// Cross-entropy between labels and intensities normalized over the sites
/// of the batch, averaged over `B·N`.
pub fn record_deepmaxent(
    tape: &mut Tape,
    logits: NodeId,
    labels: &BatchLabels,
    weighted: bool,
) -> Result<NodeId> {
    check_shape(tape.value(logits), labels, "deepmaxent_loss")?;
    let (b, _) = labels.shape();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch-normalized loss needs at least 2 sites, got {b}"
        )));
    }
    let targets = if weighted {
        labels.counts().clone()
    } else {
        labels.normalized_per_species()?
    };
    let log_probs = tape.log_softmax_over_sites(logits)?;
    tape.weighted_sum(log_probs, targets, -mean_scale(labels.shape()))
}

/// Cross-entropy over species at each site. Sites whose counts are all zero
/// carry no label distribution and are skipped.
pub fn record_ce_species(tape: &mut Tape, logits: NodeId, labels: &BatchLabels) -> Result<NodeId> {
    check_shape(tape.value(logits), labels, "ce_species_loss")?;
    let mut targets = labels.counts().clone();
    let totals = targets.row_sums();
    let mut retained = 0usize;
    for (r, total) in totals.iter().enumerate() {
        if *total > 0.0 {
            retained += 1;
            for v in targets.row_mut(r) {
                *v /= total;
            }
        }
    }
    if retained == 0 {
        return Err(Error::DegenerateBatch(
            "no site in the batch has any occurrence".into(),
        ));
    }
    let log_probs = tape.log_softmax_over_species(logits);
    tape.weighted_sum(log_probs, targets, -1.0 / retained as f64)
}

/// Binary cross-entropy of presence against `σ(logit)`; every site without
/// a record of species `j` counts as a pseudo-absence of `j`.
pub fn record_bce(tape: &mut Tape, logits: NodeId, labels: &BatchLabels) -> Result<NodeId> {
    check_shape(tape.value(logits), labels, "bce_loss")?;
    let scale = mean_scale(labels.shape());
    tape.bce_with_logits(logits, labels.presence().clone(), scale)
}

pub fn record_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &BatchLabels,
    kind: LossKind,
) -> Result<NodeId> {
    match kind {
        LossKind::DeepMaxentWeighted => record_deepmaxent(tape, logits, labels, true),
        LossKind::DeepMaxentUnweighted => record_deepmaxent(tape, logits, labels, false),
        LossKind::Poisson => record_poisson(tape, logits, labels),
        LossKind::CrossEntropySpecies => record_ce_species(tape, logits, labels),
        LossKind::BinaryCrossEntropy => record_bce(tape, logits, labels),
    }
}

/// `(τ/2) Σ ‖w‖²` over the given weight nodes.
pub fn record_l2(tape: &mut Tape, weights: &[NodeId], tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    Ok(tape.sum_squares(weights, 0.5 * tau))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "weight decay must be finite and nonnegative, got {tau}"
        )));
    }
    Ok(())
}

fn evaluate(
    logits: &Matrix,
    labels: &BatchLabels,
    record: impl FnOnce(&mut Tape, NodeId, &BatchLabels) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = record(&mut tape, z, labels)?;
    tape.scalar(loss)
}

pub fn poisson_loss(logits: &Matrix, labels: &BatchLabels) -> Result<f64> {
    evaluate(logits, labels, record_poisson)
}

pub fn deepmaxent_loss(logits: &Matrix, labels: &BatchLabels, weighted: bool) -> Result<f64> {
    evaluate(logits, labels, |t, z, l| record_deepmaxent(t, z, l, weighted))
}

pub fn ce_species_loss(logits: &Matrix, labels: &BatchLabels) -> Result<f64> {
    evaluate(logits, labels, record_ce_species)
}

pub fn bce_loss(logits: &Matrix, labels: &BatchLabels) -> Result<f64> {
    evaluate(logits, labels, record_bce)
}

pub fn loss_value(logits: &Matrix, labels: &BatchLabels, kind: LossKind) -> Result<f64> {
    evaluate(logits, labels, |t, z, l| record_loss(t, z, l, kind))
}

/// `(τ/2)(‖θ‖² + ‖γ‖²)`; biases are not penalized.
pub fn l2_penalty(params: &ModelParams, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(0.5 * tau * params.penalized_sum_squares())
}

/// Returns `L_P(λ̃, ỹ) − L_H(λ, y) − 1/K`, which vanishes identically for
/// strictly positive intensities and counts.
pub fn verify_poisson_maxent_equivalence(intensities: &Matrix, counts: &Matrix) -> Result<f64> {
    if intensities.shape() != counts.shape() {
        return Err(Error::dim(
            "poisson_maxent_equivalence",
            format!("{:?} vs {:?}", intensities.shape(), counts.shape()),
        ));
    }
    let positive = |m: &Matrix| m.data().iter().all(|v| *v > 0.0 && v.is_finite());
    if !positive(intensities) || !positive(counts) {
        return Err(Error::Validation(
            "intensities and counts must be strictly positive".into(),
        ));
    }
    let k = intensities.rows();
    let logits = intensities.map(f64::ln);
    let labels = BatchLabels::new(counts.clone(), 0.0)?;
    let maxent = deepmaxent_loss(&logits, &labels, false)?;

    let normalized_logits = crate::matrix::log_softmax_cols(&logits)?;
    let normalized_labels = BatchLabels::new(labels.normalized_per_species()?, 0.0)?;
    let poisson = poisson_loss(&normalized_logits, &normalized_labels)?;
    Ok(poisson - maxent - 1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn labels(rows: &[&[f64]], delta: f64) -> BatchLabels {
        BatchLabels::new(Matrix::from_rows(rows).unwrap(), delta).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn poisson_examples() {
        let y = labels(&[&[1.0], &[2.0]], 0.0);
        let z = m(&[&[0.0], &[2f64.ln()]]);
        let expected = (3.0 - 2.0 * LN_2) / 2.0;
        assert!((poisson_loss(&z, &y).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.80685).abs() < 1e-5);

        let y = labels(&[&[0.0, 0.0], &[0.0, 0.0]], 0.0);
        let z = Matrix::zeros(2, 2);
        assert_eq!(poisson_loss(&z, &y).unwrap(), 1.0);
    }

    #[test]
    fn poisson_gradient_is_residual_over_bn() {
        let y = labels(&[&[1.0, 0.0], &[3.0, 2.0]], 0.0);
        let z = m(&[&[0.2, -0.4], &[1.0, 0.1]]);
        let mut tape = Tape::new();
        let zn = tape.param(z.clone());
        let loss = record_poisson(&mut tape, zn, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(zn).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expected = (z.get(r, c).exp() - y.counts().get(r, c)) / 4.0;
                assert!((g.get(r, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deepmaxent_two_site_example() {
        let y = labels(&[&[1.0], &[1.0]], 0.0);
        let z = Matrix::zeros(2, 1);
        let loss = deepmaxent_loss(&z, &y, false).unwrap();
        assert!((loss - LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn deepmaxent_rejects_degenerate_batches() {
        let y = labels(&[&[1.0]], 0.0);
        assert!(matches!(
            deepmaxent_loss(&Matrix::zeros(1, 1), &y, false),
            Err(Error::DegenerateBatch(_))
        ));
        let y = labels(&[&[1.0, 0.0], &[2.0, 0.0]], 0.0);
        assert!(matches!(
            deepmaxent_loss(&Matrix::zeros(2, 2), &y, false),
            Err(Error::DegenerateBatch(_))
        ));
        // the pseudo-count makes the same batch usable
        let y = labels(&[&[1.0, 0.0], &[2.0, 0.0]], 1e-6);
        assert!(deepmaxent_loss(&Matrix::zeros(2, 2), &y, false).is_ok());
        // weighted labels do not need positive totals
        let y = labels(&[&[1.0, 0.0], &[2.0, 0.0]], 0.0);
        assert!(deepmaxent_loss(&Matrix::zeros(2, 2), &y, true).is_ok());
    }

    #[test]
    fn weighted_equals_totals_times_unweighted_terms() {
        let counts = m(&[&[1.0, 4.0], &[2.0, 0.0], &[3.0, 1.0]]);
        let z = m(&[&[0.1, -0.3], &[0.7, 0.2], &[-1.2, 0.9]]);
        let y = BatchLabels::new(counts.clone(), 0.0).unwrap();
        let weighted = deepmaxent_loss(&z, &y, true).unwrap();
        // Σ_j w_j · (per-species unweighted term)
        let mut combined = 0.0;
        for j in 0..2 {
            let col_z = Matrix::from_vec(3, 1, z.column(j)).unwrap();
            let col_y = BatchLabels::new(Matrix::from_vec(3, 1, counts.column(j)).unwrap(), 0.0)
                .unwrap();
            let w: f64 = counts.column(j).iter().sum();
            // per-species loss is averaged over B·1; rescale to B·N
            combined += w * deepmaxent_loss(&col_z, &col_y, false).unwrap() / 2.0;
        }
        assert!((weighted - combined).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let y = labels(&[&[1.0, 0.0]], 0.0);
        let loss = ce_species_loss(&Matrix::zeros(1, 2), &y).unwrap();
        assert!((loss - LN_2).abs() < 1e-15);

        // softmax matches label proportions: loss equals label entropy
        let y = labels(&[&[1.0, 3.0]], 0.0);
        let z = m(&[&[0.0, 3f64.ln()]]);
        let entropy = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((ce_species_loss(&z, &y).unwrap() - entropy).abs() < 1e-15);
    }

    #[test]
    fn ce_skips_empty_sites() {
        let y = labels(&[&[1.0, 0.0], &[0.0, 0.0]], 0.0);
        let z = m(&[&[0.0, 0.0], &[5.0, -3.0]]);
        assert!((ce_species_loss(&z, &y).unwrap() - LN_2).abs() < 1e-15);
        let y = labels(&[&[0.0, 0.0], &[0.0, 0.0]], 1.0);
        assert!(matches!(
            ce_species_loss(&Matrix::zeros(2, 2), &y),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let y = labels(&[&[1.0, 3.0]], 0.0);
        assert!((bce_loss(&Matrix::zeros(1, 2), &y).unwrap() - LN_2).abs() < 1e-15);

        let y = labels(&[&[1.0], &[0.0]], 0.0);
        let z = m(&[&[50.0], &[-50.0]]);
        assert!(bce_loss(&z, &y).unwrap() < 1e-20);
    }

    #[test]
    fn bce_gradient_is_sigmoid_residual() {
        let y = labels(&[&[2.0, 0.0], &[0.0, 1.0]], 0.0);
        let z = m(&[&[0.5, -1.0], &[3.0, 0.0]]);
        let mut tape = Tape::new();
        let zn = tape.param(z.clone());
        let loss = record_bce(&mut tape, zn, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(zn).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let s = 1.0 / (1.0 + (-z.get(r, c)).exp());
                let expected = (s - y.presence().get(r, c)) / 4.0;
                assert!((g.get(r, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn l2_examples() {
        use crate::model::{Architecture, ModelParams};
        let mut p = ModelParams::init(Architecture::new(1, 1, 0), 1, 0).unwrap();
        p.head_weights = Matrix::from_rows(&[[2.0]]).unwrap();
        p.head_bias = vec![100.0];
        assert_eq!(l2_penalty(&p, 0.0).unwrap(), 0.0);
        assert_eq!(l2_penalty(&p, 1.0).unwrap(), 2.0);
        assert_eq!(l2_penalty(&p, 2.0).unwrap(), 4.0);
        assert!(matches!(l2_penalty(&p, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn equivalence_examples() {
        let lam = m(&[&[5.0], &[5.0]]);
        let y = m(&[&[1.0], &[1.0]]);
        assert!(verify_poisson_maxent_equivalence(&lam, &y).unwrap().abs() < 1e-12);
        let lam = m(&[&[0.3, 2.0], &[1.7, 0.01], &[4.0, 1.0]]);
        let y = m(&[&[1.0, 2.0], &[0.5, 3.0], &[7.0, 0.1]]);
        let r1 = verify_poisson_maxent_equivalence(&lam, &y).unwrap();
        let r2 = verify_poisson_maxent_equivalence(&lam.map(|v| v * 123.0), &y).unwrap();
        assert!(r1.abs() < 1e-12 && r2.abs() < 1e-12);
        let ones = m(&[&[1.0], &[1.0]]);
        assert!(verify_poisson_maxent_equivalence(&m(&[&[0.0], &[1.0]]), &ones).is_err());
        assert!(verify_poisson_maxent_equivalence(&ones, &m(&[&[0.0], &[1.0]])).is_err());
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("maxent".parse::<LossKind>().is_err());
    }

    #[test]
    fn labels_validate_inputs() {
        assert!(BatchLabels::new(m(&[&[-1.0]]), 0.0).is_err());
        assert!(BatchLabels::new(m(&[&[1.0]]), -1e-6).is_err());
        let y = labels(&[&[0.0, 2.0]], 1e-6);
        assert_eq!(y.presence().data(), &[0.0, 1.0]);
        assert!(y.species_totals().iter().all(|t| *t > 0.0));
    }
}
