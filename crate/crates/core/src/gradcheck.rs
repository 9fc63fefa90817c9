//! Central finite-difference check of tape gradients against the plain
//! forward evaluation of model, loss and penalty. The five-point stencil
//! keeps truncation error at `O(h⁴)`, which matters for the Poisson loss
//! whose `exp` term can make the objective large and steep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{self, BatchLabels, LossKind};
use crate::matrix::{self, Matrix};
use crate::model::{Architecture, ModelParams};
use crate::tape::Tape;

/// Finite-difference step for an objective of magnitude at most 1; larger
/// objectives get `STEP · |f|^{1/4}` so rounding stays below truncation.
pub const STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

/// A pre-activation must sit at least this many (step × activation scale)
/// away from zero, or the stencil could straddle a ReLU kink.
const KINK_MARGIN: f64 = 4.0;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceShape {
    pub arch: Architecture,
    pub batch: usize,
    pub n_species: usize,
}

impl InstanceShape {
    /// `P ≤ 6`, `C ≤ 16`, `L ≤ 3`, `2 ≤ B ≤ 12`, `N ≤ 5`.
    pub fn random(rng: &mut impl Rng) -> Self {
        InstanceShape {
            arch: Architecture::new(
                rng.random_range(1..=6),
                rng.random_range(1..=16),
                rng.random_range(0..=3),
            ),
            batch: rng.random_range(2..=12),
            n_species: rng.random_range(1..=5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub shape: InstanceShape,
    /// Largest relative error over entries whose absolute error exceeds the
    /// floor; zero when every entry is under the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

struct Instance {
    model: ModelParams,
    x: Matrix,
    labels: BatchLabels,
}

fn draw_instance(shape: &InstanceShape, kind: LossKind, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut model = ModelParams::init(shape.arch, shape.n_species, rng.random())?;
    // nonzero biases so the check also covers their gradients
    for s in model.param_slices_mut() {
        for v in s.iter_mut() {
            if *v == 0.0 {
                let noise: f64 = StandardNormal.sample(rng);
                *v = 0.1 * noise;
            }
        }
    }
    let (b, p, n) = (shape.batch, shape.arch.input_dim, shape.n_species);
    let x = Matrix::from_vec(b, p, (0..b * p).map(|_| StandardNormal.sample(rng)).collect())?;
    let mut counts =
        Matrix::from_vec(b, n, (0..b * n).map(|_| rng.random_range(0..4) as f64).collect())?;
    if kind == LossKind::CrossEntropySpecies && counts.sum() == 0.0 {
        counts.set(0, 0, 1.0);
    }
    Ok(Instance {
        model,
        x,
        labels: BatchLabels::new(counts, 1e-6)?,
    })
}

/// Smallest `|pre-activation|` over all hidden units and batch rows, and the
/// largest magnitude of any layer input.
fn kink_distance(model: &ModelParams, x: &Matrix) -> Result<(f64, f64)> {
    let mut h = x.clone();
    let mut closest = f64::INFINITY;
    let mut scale: f64 = 1.0;
    for (l, layer) in model.layers.iter().enumerate() {
        scale = h.data().iter().fold(scale, |m, v| m.max(v.abs()));
        let z = matrix::affine(&h, &layer.weights, &Matrix::row_vector(&layer.bias))?;
        closest = z.data().iter().fold(closest, |m, v| m.min(v.abs()));
        let a = matrix::relu(&z);
        h = if l == 0 { a } else { matrix::add(&h, &a)? };
    }
    Ok((closest, scale))
}

fn step_for(model: &ModelParams, x: &Matrix, labels: &BatchLabels, kind: LossKind, tau: f64) -> Result<f64> {
    let f = objective(model, x, labels, kind, tau)?;
    Ok(STEP * f.abs().max(1.0).powf(0.25))
}

fn objective(model: &ModelParams, x: &Matrix, labels: &BatchLabels, kind: LossKind, tau: f64) -> Result<f64> {
    let z = model.logits(x)?;
    Ok(losses::loss_value(&z, labels, kind)? + losses::l2_penalty(model, tau)?)
}

/// Checks every parameter gradient of `loss + l2` on one random instance of
/// the given shape. Inputs are redrawn until no ReLU sits near its kink.
pub fn check_instance(
    shape: InstanceShape,
    kind: LossKind,
    tau: f64,
    seed: u64,
) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut redraws = 0;
    let (inst, step) = loop {
        let inst = draw_instance(&shape, kind, &mut rng)?;
        let step = step_for(&inst.model, &inst.x, &inst.labels, kind, tau)?;
        let (closest, scale) = kink_distance(&inst.model, &inst.x)?;
        if closest > KINK_MARGIN * step * scale {
            break (inst, step);
        }
        redraws += 1;
        if redraws > MAX_REDRAWS {
            return Err(Error::Numerical(
                "could not draw an instance away from ReLU kinks".into(),
            ));
        }
    };
    let Instance { mut model, x, labels } = inst;

    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let (params, logits) = model.record(&mut tape, xn)?;
    let data = losses::record_loss(&mut tape, logits, &labels, kind)?;
    let pen = losses::record_l2(&mut tape, &params.penalized, tau)?;
    let total = tape.add(data, pen)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<Vec<f64>> = params
        .leaves
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .map(|g| g.data().to_vec())
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))
        })
        .collect::<Result<_>>()?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut n_checked = 0;
    for (a, grad) in analytic.iter().enumerate() {
        for (e, &g) in grad.iter().enumerate() {
            let orig = model.param_slices()[a][e];
            let mut at = |offset: f64| {
                model.param_slices_mut()[a][e] = orig + offset;
                objective(&model, &x, &labels, kind, tau)
            };
            let (up, down) = (at(step)?, at(-step)?);
            let (up2, down2) = (at(2.0 * step)?, at(-2.0 * step)?);
            model.param_slices_mut()[a][e] = orig;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let abs = (g - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs >= ABS_FLOOR {
                max_rel = max_rel.max(abs / g.abs().max(numeric.abs()));
            }
            n_checked += 1;
        }
    }
    Ok(GradCheckOutcome {
        shape,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        n_checked,
    })
}

/// `instances` random shapes for one loss, each with a random penalty.
pub fn check_loss(kind: LossKind, instances: usize, seed: u64) -> Result<Vec<GradCheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let shape = InstanceShape::random(&mut rng);
            let tau = rng.random_range(0.0..0.01);
            check_instance(shape, kind, tau, rng.random())
        })
        .collect()
}
