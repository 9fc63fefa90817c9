//! Residual MLP feature extractor with log-linear species heads.
//!
//! For a standardized covariate row `x`, the shared features are
//! `h_1 = relu(x W_1 + c_1)` and `h_l = h_{l-1} + relu(h_{l-1} W_l + c_l)` for
//! `l = 2..L`, and species `j` has log-intensity `γ_j · h_L + b_j`. With
//! `L = 0` the features are the standardized covariates themselves, which is
//! the classic log-linear Maxent form on linear features.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};
use crate::tape::{NodeId, Tape};

pub const FORMAT_HEADER: &str = "deepmaxent-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_width: usize, hidden_layers: usize) -> Self {
        Architecture {
            input_dim,
            hidden_width,
            hidden_layers,
        }
    }

    /// Width of the representation fed to the species heads.
    pub fn feature_dim(&self) -> usize {
        if self.hidden_layers == 0 {
            self.input_dim
        } else {
            self.hidden_width
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be at least 1".into()));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Per-covariate z-score constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and population standard deviation over the given rows.
    /// Constant covariates get a standard deviation of 1.
    pub fn fit(raw: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation(
                "cannot standardize over an empty site set".into(),
            ));
        }
        let p = raw.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(raw.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(raw.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.mean.len() {
            return Err(Error::dim(
                "standardize",
                format!("{} covariates, model expects {}", raw.cols(), self.mean.len()),
            ));
        }
        let mut out = raw.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layers: Vec<DenseLayer>,
    /// `γ`, one row per species.
    pub head_weights: Matrix,
    /// `b`, one entry per species.
    pub head_bias: Vec<f64>,
    pub standardizer: Standardizer,
    pub covariate_names: Vec<String>,
    pub species_ids: Vec<String>,
}

/// Tape handles for one recorded forward pass.
#[derive(Debug, Clone)]
pub struct RecordedParams {
    /// Leaves in [`ModelParams::param_slices_mut`] order.
    pub leaves: Vec<NodeId>,
    /// The subset of leaves covered by the L2 penalty.
    pub penalized: Vec<NodeId>,
}

impl ModelParams {
    /// Random initialization: hidden weights `N(0, 2/fan_in)`, species head
    /// `N(0, 1/feature_dim)`, all biases zero.
    pub fn init(arch: Architecture, n_species: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if n_species == 0 {
            return Err(Error::Config("at least one species is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.hidden_layers);
        let mut fan_in = arch.input_dim;
        for _ in 0..arch.hidden_layers {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let data = (0..fan_in * arch.hidden_width)
                .map(|_| normal.sample(&mut rng))
                .collect();
            layers.push(DenseLayer {
                weights: Matrix::from_vec(fan_in, arch.hidden_width, data)?,
                bias: vec![0.0; arch.hidden_width],
            });
            fan_in = arch.hidden_width;
        }
        let feature_dim = arch.feature_dim();
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let head = (0..n_species * feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(ModelParams {
            arch,
            layers,
            head_weights: Matrix::from_vec(n_species, feature_dim, head)?,
            head_bias: vec![0.0; n_species],
            standardizer: Standardizer::identity(arch.input_dim),
            covariate_names: (1..=arch.input_dim).map(|i| format!("x{i}")).collect(),
            species_ids: (1..=n_species).map(|j| format!("sp{j}")).collect(),
        })
    }

    pub fn n_species(&self) -> usize {
        self.head_bias.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::dim(
                "features",
                format!(
                    "{} covariates supplied, model expects {}",
                    x.cols(),
                    self.arch.input_dim
                ),
            ));
        }
        Ok(())
    }

    /// Shared latent features for already-standardized covariates.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = matrix::affine(&h, &layer.weights, &Matrix::row_vector(&layer.bias))?;
            let a = matrix::relu(&z);
            h = if l == 0 { a } else { matrix::add(&h, &a)? };
        }
        Ok(h)
    }

    /// Log-intensities `log λ_j(x_i)`, one column per species.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let g = self.features(x)?;
        matrix::affine(
            &g,
            &self.head_weights.transpose(),
            &Matrix::row_vector(&self.head_bias),
        )
    }

    /// Intensities normalized per species over the supplied site set.
    pub fn predict_normalized(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() == 0 {
            return Err(Error::Validation("prediction over an empty site set".into()));
        }
        Ok(normalize_columns(&self.logits(x)?))
    }

    /// Standardizes raw covariates with this model's constants.
    pub fn standardize(&self, raw: &Matrix) -> Result<Matrix> {
        self.standardizer.apply(raw)
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn record(&self, tape: &mut Tape, x: NodeId) -> Result<(RecordedParams, NodeId)> {
        self.check_input(tape.value(x))?;
        let mut leaves = Vec::with_capacity(2 * self.layers.len() + 2);
        let mut penalized = Vec::with_capacity(self.layers.len() + 1);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weights.clone());
            let b = tape.param(Matrix::row_vector(&layer.bias));
            leaves.extend([w, b]);
            penalized.push(w);
            let z = tape.affine(h, w, b)?;
            let a = tape.relu(z);
            h = if l == 0 { a } else { tape.residual_add(h, a)? };
        }
        let gamma = tape.param(self.head_weights.clone());
        let bias = tape.param(Matrix::row_vector(&self.head_bias));
        leaves.extend([gamma, bias]);
        penalized.push(gamma);
        let gamma_t = tape.transpose(gamma);
        let logits = tape.affine(h, gamma_t, bias)?;
        Ok((RecordedParams { leaves, penalized }, logits))
    }

    /// Mutable views of every trainable array, in a fixed order: each hidden
    /// layer's weights then bias, then `γ`, then `b`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push(layer.weights.data_mut());
            out.push(&mut layer.bias);
        }
        out.push(self.head_weights.data_mut());
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &self.layers {
            out.push(layer.weights.data());
            out.push(&layer.bias);
        }
        out.push(self.head_weights.data());
        out.push(&self.head_bias);
        out
    }

    /// Sum of squares of the penalized arrays (hidden weights and `γ`).
    pub fn penalized_sum_squares(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.sum_squares())
            .sum::<f64>()
            + self.head_weights.sum_squares()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Serializes to the versioned text document.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER} {FORMAT_VERSION}");
        let _ = writeln!(s, "input_dim {}", self.arch.input_dim);
        let _ = writeln!(s, "hidden_width {}", self.arch.hidden_width);
        let _ = writeln!(s, "hidden_layers {}", self.arch.hidden_layers);
        let _ = writeln!(s, "n_species {}", self.n_species());
        for name in &self.covariate_names {
            let _ = writeln!(s, "covariate {name}");
        }
        for id in &self.species_ids {
            let _ = writeln!(s, "species {id}");
        }
        write_values(&mut s, "standardize_mean", &self.standardizer.mean);
        write_values(&mut s, "standardize_std", &self.standardizer.std);
        for (l, layer) in self.layers.iter().enumerate() {
            write_matrix(&mut s, &format!("layer {l} weights"), &layer.weights);
            write_values(&mut s, &format!("layer {l} bias"), &layer.bias);
        }
        write_matrix(&mut s, "head_weights", &self.head_weights);
        write_values(&mut s, "head_bias", &self.head_bias);
        s.push_str("end\n");
        s
    }

    pub fn from_document(doc: &str) -> Result<Self> {
        let mut r = DocReader::new(doc);
        let (line, header) = r.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_HEADER) {
            return Err(format_err(line, "missing model header"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format_err(line, "missing format version"))?;
        if version != FORMAT_VERSION {
            return Err(format_err(
                line,
                format!("unsupported format version {version}"),
            ));
        }
        let input_dim = r.count("input_dim")?;
        let hidden_width = r.count("hidden_width")?;
        let hidden_layers = r.count("hidden_layers")?;
        let n_species = r.count("n_species")?;
        let arch = Architecture::new(input_dim, hidden_width, hidden_layers);
        arch.validate()
            .map_err(|e| format_err(r.line, e.to_string()))?;
        let covariate_names = (0..input_dim)
            .map(|_| r.named("covariate"))
            .collect::<Result<Vec<_>>>()?;
        let species_ids = (0..n_species)
            .map(|_| r.named("species"))
            .collect::<Result<Vec<_>>>()?;
        let mean = r.values("standardize_mean", input_dim)?;
        let std = r.values("standardize_std", input_dim)?;
        if std.iter().any(|s| *s <= 0.0) {
            return Err(format_err(r.line, "standard deviations must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden_layers);
        let mut fan_in = input_dim;
        for l in 0..hidden_layers {
            let weights = r.matrix(&format!("layer {l} weights"), fan_in, hidden_width)?;
            let bias = r.values(&format!("layer {l} bias"), hidden_width)?;
            layers.push(DenseLayer { weights, bias });
            fan_in = hidden_width;
        }
        let head_weights = r.matrix("head_weights", n_species, arch.feature_dim())?;
        let head_bias = r.values("head_bias", n_species)?;
        let (line, end) = r.next_line()?;
        if end.trim() != "end" {
            return Err(format_err(line, "expected `end`"));
        }
        let params = ModelParams {
            arch,
            layers,
            head_weights,
            head_bias,
            standardizer: Standardizer { mean, std },
            covariate_names,
            species_ids,
        };
        if !params.is_finite() {
            return Err(format_err(line, "non-finite parameter value"));
        }
        Ok(params)
    }
}

/// Column-wise softmax over rows; each column sums to one. Works for a
/// single row as well.
pub fn normalize_columns(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for c in 0..logits.cols() {
        let lse = matrix::logsumexp((0..logits.rows()).map(|r| logits.get(r, c)));
        for r in 0..logits.rows() {
            out.set(r, c, (logits.get(r, c) - lse).exp());
        }
    }
    out
}

fn write_values(s: &mut String, label: &str, values: &[f64]) {
    let _ = writeln!(s, "{label}");
    push_row(s, values);
}

fn write_matrix(s: &mut String, label: &str, m: &Matrix) {
    let _ = writeln!(s, "{label} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        push_row(s, m.row(r));
    }
}

fn push_row(s: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        // `{:e}` is the shortest representation that parses back to the same bits.
        let _ = write!(s, "{v:e}");
    }
    s.push('\n');
}

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::ModelFormat {
        line,
        msg: msg.into(),
    }
}

struct DocReader<'a> {
    lines: std::str::Lines<'a>,
    line: usize,
}

impl<'a> DocReader<'a> {
    fn new(doc: &'a str) -> Self {
        DocReader {
            lines: doc.lines(),
            line: 0,
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.line += 1;
        self.lines
            .next()
            .map(|l| (self.line, l))
            .ok_or_else(|| format_err(self.line, "unexpected end of document"))
    }

    fn named(&mut self, key: &str) -> Result<String> {
        let (line, text) = self.next_line()?;
        text.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| format_err(line, format!("expected `{key} <value>`")))
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let line = self.line + 1;
        self.named(key)?
            .trim()
            .parse()
            .map_err(|_| format_err(line, format!("`{key}` is not a count")))
    }

    fn row(&mut self, expected: usize) -> Result<Vec<f64>> {
        let (line, text) = self.next_line()?;
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| format_err(line, format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(format_err(
                line,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }

    fn values(&mut self, label: &str, expected: usize) -> Result<Vec<f64>> {
        let (line, text) = self.next_line()?;
        if text.trim() != label {
            return Err(format_err(line, format!("expected `{label}`")));
        }
        self.row(expected)
    }

    fn matrix(&mut self, label: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let (line, text) = self.next_line()?;
        if text.trim() != format!("{label} {rows} {cols}") {
            return Err(format_err(line, format!("expected `{label} {rows} {cols}`")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row(cols)?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}
