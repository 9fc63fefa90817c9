//! Training loop, spatial cross-validation and the saturated-model check of
//! batch-wise minimization.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{self, OccurrenceMatrix, SiteTable};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::losses::{self, BatchLabels, LossKind};
use crate::matrix::Matrix;
use crate::model::{normalize_columns, Architecture, ModelParams, Standardizer};
use crate::optim::{Adam, DEFAULT_LEARNING_RATE};
use crate::tape::Tape;

pub const DEFAULT_BATCH_SIZE: usize = 250;
pub const DEFAULT_HIDDEN_LAYERS: usize = 2;
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
pub const DEFAULT_WEIGHT_DECAY: f64 = 3e-4;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Restrict training to target-group background sites.
    pub tgb: bool,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::DeepMaxentWeighted,
            tgb: false,
            batch_size: DEFAULT_BATCH_SIZE,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            delta: DEFAULT_DELTA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "loss",
        "tgb",
        "batch_size",
        "layers",
        "hidden_width",
        "weight_decay",
        "learning_rate",
        "epochs",
        "delta",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be nonnegative, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "loss" => self.loss = value.parse()?,
            "tgb" => self.tgb = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "layers" => self.hidden_layers = parse(key, value)?,
            "hidden_width" => self.hidden_width = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` document; blank lines and `#` comments are
    /// ignored. Keys not present keep their current value.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// All fields as `key=value` lines, in [`TrainConfig::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "loss={}", self.loss);
        let _ = writeln!(s, "tgb={}", self.tgb);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "layers={}", self.hidden_layers);
        let _ = writeln!(s, "hidden_width={}", self.hidden_width);
        let _ = writeln!(s, "weight_decay={:e}", self.weight_decay);
        let _ = writeln!(s, "learning_rate={:e}", self.learning_rate);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "delta={:e}", self.delta);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over batches of data loss plus penalty.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch,loss,seconds`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.loss, e.seconds)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn train(
    config: &TrainConfig,
    sites: &SiteTable,
    occ: &OccurrenceMatrix,
) -> Result<(ModelParams, TrainHistory)> {
    let all: Vec<usize> = (0..sites.len()).collect();
    train_on_sites(config, sites, occ, &all)
}

/// Trains on a subset of site rows (further restricted to target-group
/// background sites when `config.tgb` is set).
pub fn train_on_sites(
    config: &TrainConfig,
    sites: &SiteTable,
    occ: &OccurrenceMatrix,
    candidates: &[usize],
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if sites.len() != occ.n_sites() {
        return Err(Error::dim(
            "train",
            format!("{} sites but {} occurrence rows", sites.len(), occ.n_sites()),
        ));
    }
    let training_sites = if config.tgb {
        data::tgb_subset(occ, candidates)?
    } else {
        candidates.to_vec()
    };
    if training_sites.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "{} training site(s); at least 2 are required",
            training_sites.len()
        )));
    }

    let arch = Architecture::new(sites.n_covariates(), config.hidden_width, config.hidden_layers);
    let mut model = ModelParams::init(arch, occ.n_species(), config.seed)?;
    model.standardizer = Standardizer::fit(sites.covariates(), &training_sites)?;
    model.covariate_names = sites.covariate_names().to_vec();
    model.species_ids = occ.species_ids().to_vec();

    let x_all = model.standardize(sites.covariates())?;
    let mut adam = Adam::for_slices(&model.param_slices(), config.learning_rate)?;
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = data::make_batches(
            &training_sites,
            config.batch_size,
            config.seed,
            epoch as u64,
        )?;
        let mut total = 0.0;
        let mut used = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let x = x_all.select_rows(batch);
            let labels = BatchLabels::new(occ.counts().select_rows(batch), config.delta)?;
            match sgd_step(&mut model, &mut adam, config, &x, &labels) {
                Ok(loss) => {
                    total += loss;
                    used += 1;
                }
                Err(Error::DegenerateBatch(msg))
                    if config.loss == LossKind::CrossEntropySpecies =>
                {
                    log::debug!("epoch {} batch {}: skipped ({msg})", epoch + 1, b + 1);
                }
                Err(Error::Numerical(msg)) => {
                    return Err(Error::Numerical(format!(
                        "epoch {} batch {}: {msg}",
                        epoch + 1,
                        b + 1
                    )))
                }
                Err(e) => return Err(e),
            }
        }
        let loss = if used > 0 { total / used as f64 } else { f64::NAN };
        if used == 0 {
            log::warn!("epoch {}: no usable batch", epoch + 1);
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// Forward, backward and one Adam update on a single batch; returns the
/// penalized loss before the update.
fn sgd_step(
    model: &mut ModelParams,
    adam: &mut Adam,
    config: &TrainConfig,
    x: &Matrix,
    labels: &BatchLabels,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let (params, logits) = model.record(&mut tape, xn)?;
    let data_loss = losses::record_loss(&mut tape, logits, labels, config.loss)?;
    let objective = if config.weight_decay > 0.0 {
        let penalty = losses::record_l2(&mut tape, &params.penalized, config.weight_decay)?;
        tape.add(data_loss, penalty)?
    } else {
        data_loss
    };
    let value = tape.scalar(objective)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    let mut grads = tape.backward(objective)?;
    let grads: Vec<Matrix> = params
        .leaves
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))
        })
        .collect::<Result<_>>()?;
    let grad_slices: Vec<&[f64]> = grads.iter().map(Matrix::data).collect();
    adam.step(&mut model.param_slices_mut(), &grad_slices)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// 1-based.
    pub fold: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub species_scored: usize,
    /// Mean held-out AUC over species with both classes present.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_auc: Option<f64>,
}

impl CvReport {
    /// `fold,n_train,n_valid,species_scored,auc` followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "fold,n_train,n_valid,species_scored,auc")?;
        let fmt = |a: Option<f64>| a.map_or_else(|| "NA".to_owned(), |v| v.to_string());
        for f in &self.folds {
            writeln!(
                w,
                "{},{},{},{},{}",
                f.fold,
                f.n_train,
                f.n_valid,
                f.species_scored,
                fmt(f.auc)
            )?;
        }
        writeln!(w, "mean,,,,{}", fmt(self.mean_auc))?;
        w.flush()?;
        Ok(())
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Spatially blocked cross-validation on presence-only data. Held-out sites
/// with a record of a species are its positives, the remaining held-out
/// sites its negatives.
pub fn cross_validate(
    config: &TrainConfig,
    sites: &SiteTable,
    occ: &OccurrenceMatrix,
    grid_side: usize,
    folds: usize,
) -> Result<CvReport> {
    config.validate()?;
    let blocks = data::assign_blocks(sites, &occ.site_totals(), grid_side, folds, config.seed)?;
    let results: Vec<Result<FoldResult>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let valid = blocks.fold_sites(f);
            let train_sites: Vec<usize> = (0..sites.len())
                .filter(|&i| blocks.site_fold(i) != f)
                .collect();
            let cfg = TrainConfig {
                seed: fold_seed(config.seed, f),
                ..config.clone()
            };
            let (model, _) = train_on_sites(&cfg, sites, occ, &train_sites)?;
            let x = model.standardize(&sites.covariates().select_rows(&valid))?;
            let logits = model.logits(&x)?;
            let aucs: Vec<f64> = (0..occ.n_species())
                .filter_map(|j| {
                    let labels: Vec<bool> =
                        valid.iter().map(|&i| occ.counts().get(i, j) > 0.0).collect();
                    auc(&logits.column(j), &labels)
                })
                .collect();
            let mean = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
            if mean.is_none() {
                log::warn!("fold {}: no species has both presences and absences; skipped", f + 1);
            }
            Ok(FoldResult {
                fold: f + 1,
                n_train: train_sites.len(),
                n_valid: valid.len(),
                species_scored: aucs.len(),
                auc: mean,
            })
        })
        .collect();
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let mean_auc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(CvReport {
        folds,
        mean_auc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPropertyReport {
    /// `max_i |λ̃_i − ỹ_i|` over all sites.
    pub max_deviation: f64,
    pub steps: usize,
    pub converged: bool,
}

const SATURATED_TOLERANCE: f64 = 1e-10;
const SATURATED_STEP_BUDGET: usize = 2_000_000;

/// Fits a saturated single-species model (one free log-intensity per site)
/// by SGD on batch-normalized losses of size-`batch_size` batches, then
/// measures how far the fully normalized intensities are from `ỹ`.
///
/// For up to 8 sites every subset of size `batch_size` is a batch and all of
/// them are visited each epoch in a shuffled order; for more sites each
/// epoch is a shuffled partition.
pub fn verify_batch_property(
    n_sites: usize,
    batch_size: usize,
    counts: &[f64],
    seed: u64,
) -> Result<BatchPropertyReport> {
    if !(1 < batch_size && batch_size < n_sites) {
        return Err(Error::Config(format!(
            "need 1 < batch size < sites, got batch {batch_size} for {n_sites} sites"
        )));
    }
    if counts.len() != n_sites {
        return Err(Error::dim(
            "verify_batch_property",
            format!("{} counts for {n_sites} sites", counts.len()),
        ));
    }
    if counts.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Validation(
            "counts must be strictly positive (apply the pseudo-count)".into(),
        ));
    }
    let total: f64 = counts.iter().sum();
    let target: Vec<f64> = counts.iter().map(|c| c / total).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits: Vec<f64> = (0..n_sites).map(|_| StandardNormal.sample(&mut rng)).collect();
    let exhaustive = n_sites <= 8;
    let mut all_subsets = if exhaustive {
        combinations(n_sites, batch_size)
    } else {
        Vec::new()
    };
    let all: Vec<usize> = (0..n_sites).collect();

    let deviation = |logits: &[f64]| {
        let z = Matrix::from_vec(n_sites, 1, logits.to_vec()).expect("column shape");
        let p = normalize_columns(&z);
        p.data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };

    // step on the batch cross-entropy in softmax coordinates; the 1/|B| in
    // the loss is undone by the learning rate
    let learning_rate = batch_size as f64;
    let mut steps = 0;
    let mut epoch = 0u64;
    let mut dev = deviation(&logits);
    while dev > SATURATED_TOLERANCE && steps < SATURATED_STEP_BUDGET {
        let batches = if exhaustive {
            all_subsets.shuffle(&mut rng);
            all_subsets.clone()
        } else {
            data::make_batches(&all, batch_size, seed, epoch)?
        };
        for batch in &batches {
            let z = Matrix::from_vec(batch.len(), 1, batch.iter().map(|&i| logits[i]).collect())?;
            let y = Matrix::from_vec(batch.len(), 1, batch.iter().map(|&i| counts[i]).collect())?;
            let labels = BatchLabels::new(y, 0.0)?;
            let mut tape = Tape::new();
            let zn = tape.param(z);
            let loss = losses::record_deepmaxent(&mut tape, zn, &labels, false)?;
            let grads = tape.backward(loss)?;
            let g = grads
                .get(zn)
                .ok_or_else(|| Error::Contract("missing logit gradient".into()))?;
            for (k, &i) in batch.iter().enumerate() {
                logits[i] -= learning_rate * g.data()[k];
            }
            steps += 1;
        }
        epoch += 1;
        dev = deviation(&logits);
    }
    let converged = dev <= SATURATED_TOLERANCE;
    if !converged {
        log::warn!("saturated model did not converge within {steps} steps; deviation {dev:e}");
    }
    Ok(BatchPropertyReport {
        max_deviation: dev,
        steps,
        converged,
    })
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}
