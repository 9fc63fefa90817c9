use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use deepmaxent::data::{self, Grouping, SiteTable};
use deepmaxent::eval;
use deepmaxent::synth::{self, SynthSpec};
use deepmaxent::train::{self, TrainConfig};
use deepmaxent::verify::{self, VerifyOptions};
use deepmaxent::{Error, LossKind, ModelParams};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "deepmaxent", version, about = "Multi-species presence-only intensity models")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on presence-only data.
    Train(TrainArgs),
    /// Write per-site normalized intensities (and optional heatmaps).
    Predict(PredictArgs),
    /// Score a model against presence-absence surveys.
    Eval(EvalArgs),
    /// Spatially blocked cross-validation on presence-only data.
    Cv(CvArgs),
    /// Run gradient, identity, batch-property and oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    grid_side: usize,
    #[arg(long, default_value_t = 4)]
    covariates: usize,
    #[arg(long, default_value_t = 5)]
    species: usize,
    /// Expected presence-only records per species.
    #[arg(long, default_value_t = 500.0)]
    occurrences: f64,
    #[arg(long, default_value_t = 1.0)]
    coefficient_scale: f64,
    /// Decay length of the sampling-effort field; omit for uniform effort.
    #[arg(long)]
    bias_scale: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pa_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    prevalence: f64,
}

/// Training options; each overrides the same key of `--config`.
#[derive(Args, Default)]
struct TrainFlags {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// deepmaxent, deepmaxent-unweighted, poisson, ce or bce.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Use per-species normalized labels with the deepmaxent loss.
    #[arg(long)]
    unweighted: bool,
    /// Train on target-group background sites only.
    #[arg(long)]
    tgb: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    occurrences: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write one grayscale PGM image per species.
    #[arg(long)]
    heatmap: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    pa: PathBuf,
    /// `species_id,group,region`; species not listed fall into `all`/`all`.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    occurrences: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    grid_side: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer random instances per check.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 1,
        Some(Error::Numerical(_) | Error::Contract(_)) => 3,
        Some(_) => 2,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

/// Writes through a temporary sibling file and renames it into place, so an
/// interrupted run never leaves a truncated output behind.
fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> deepmaxent::Result<()>,
) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Run record written next to every output. Metadata lines are `#`
/// comments, so the file can be passed back as `--config`.
fn write_manifest(
    dir: &Path,
    command: &str,
    inputs: &[&Path],
    settings: &str,
) -> anyhow::Result<()> {
    let mut text = format!("# deepmaxent {VERSION}\n# command {command}\n");
    for input in inputs {
        text.push_str(&format!("# input {} sha256 {}\n", input.display(), sha256_file(input)?));
    }
    text.push_str(settings);
    write_text(&dir.join("manifest.txt"), &text)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_sites(path: &Path) -> anyhow::Result<SiteTable> {
    Ok(data::load_sites(path)?)
}

fn resolve_config(flags: &TrainFlags) -> anyhow::Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config
            .apply_kv(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(v) = flags.loss {
        config.loss = v;
    }
    if flags.unweighted {
        if !config.loss.is_deepmaxent() {
            return Err(Error::Config(format!(
                "--unweighted applies to the deepmaxent loss, not {}",
                config.loss
            ))
            .into());
        }
        config.loss = LossKind::DeepMaxentUnweighted;
    }
    if flags.tgb {
        config.tgb = true;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.layers {
        config.hidden_layers = v;
    }
    if let Some(v) = flags.hidden_width {
        config.hidden_width = v;
    }
    if let Some(v) = flags.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = flags.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = flags.epochs {
        config.epochs = v;
    }
    if let Some(v) = flags.delta {
        config.delta = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        grid_side: a.grid_side,
        n_covariates: a.covariates,
        n_species: a.species,
        expected_occurrences: a.occurrences,
        coefficient_scale: a.coefficient_scale,
        bias_scale: a.bias_scale,
        pa_fraction: a.pa_fraction,
        prevalence: a.prevalence,
        seed: a.seed,
    };
    let d = synth::generate(&spec)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("sites.csv"), |w| d.sites.write_csv(w))?;
    write_atomic(&a.out.join("occurrences.csv"), |w| {
        d.occurrences.write_long_csv(&d.sites, w)
    })?;
    write_atomic(&a.out.join("pa.csv"), |w| d.pa.write_csv(w))?;
    write_atomic(&a.out.join("truth.csv"), |w| d.write_truth_csv(w))?;
    let bias = spec.bias_scale.map_or_else(|| "none".to_owned(), |v| v.to_string());
    let settings = format!(
        "grid_side={}\ncovariates={}\nspecies={}\noccurrences={}\ncoefficient_scale={}\nbias_scale={bias}\npa_fraction={}\nprevalence={}\nseed={}\n",
        spec.grid_side,
        spec.n_covariates,
        spec.n_species,
        spec.expected_occurrences,
        spec.coefficient_scale,
        spec.pa_fraction,
        spec.prevalence,
        spec.seed
    );
    // synth settings are not training keys; keep them out of --config reach
    let settings: String = settings.lines().map(|l| format!("# {l}\n")).collect();
    write_manifest(&a.out, "synth", &[], &settings)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let config = resolve_config(&a.flags)?;
    let sites = load_sites(&a.sites)?;
    let occ = data::load_occurrences(&a.occurrences, &sites)?;
    log::info!(
        "training {} on {} sites, {} species",
        config.loss,
        sites.len(),
        occ.n_species()
    );
    let (model, history) = train::train(&config, &sites, &occ)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("model.txt"), &model.to_document())?;
    write_atomic(&a.out.join("history.csv"), |w| history.write_csv(w))?;
    write_manifest(&a.out, "train", &[&a.sites, &a.occurrences], &config.to_kv())
}

fn load_model(path: &Path) -> anyhow::Result<ModelParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ModelParams::from_document(&text).with_context(|| format!("in {}", path.display()))
}

fn check_covariates(model: &ModelParams, sites: &SiteTable) -> anyhow::Result<()> {
    if model.covariate_names != sites.covariate_names() {
        return Err(Error::Validation(format!(
            "site covariates {:?} do not match the model's {:?}",
            sites.covariate_names(),
            model.covariate_names
        ))
        .into());
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let sites = load_sites(&a.sites)?;
    check_covariates(&model, &sites)?;
    let x = model.standardize(sites.covariates())?;
    let pred = model.predict_normalized(&x)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("predictions.csv"), |w| {
        write!(w, "site_id")?;
        for id in &model.species_ids {
            write!(w, ",{id}")?;
        }
        writeln!(w)?;
        for (i, id) in sites.site_ids().iter().enumerate() {
            write!(w, "{id}")?;
            for v in pred.row(i) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    if a.heatmap {
        let raster = Raster::from_coords(sites.coords());
        let dir = a.out.join("heatmaps");
        create_dir(&dir)?;
        for (j, id) in model.species_ids.iter().enumerate() {
            let pixels = raster.render(&pred.column(j));
            let header = format!("P5\n{} {}\n255\n", raster.width, raster.height);
            write_atomic(&dir.join(format!("{}.pgm", file_stem(id))), |w| {
                w.write_all(header.as_bytes())?;
                w.write_all(&pixels)?;
                Ok(())
            })?;
        }
    }
    write_manifest(&a.out, "predict", &[&a.model, &a.sites], "")
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Pixel grid spanned by the distinct site coordinates, north up.
struct Raster {
    width: usize,
    height: usize,
    pixel: Vec<usize>,
}

impl Raster {
    fn from_coords(coords: &[[f64; 2]]) -> Self {
        let distinct = |axis: usize| {
            let mut v: Vec<f64> = coords.iter().map(|c| c[axis]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let xs = distinct(0);
        let ys = distinct(1);
        let locate = |v: &[f64], x: f64| v.partition_point(|p| *p < x);
        let pixel = coords
            .iter()
            .map(|c| {
                let col = locate(&xs, c[0]);
                let row = ys.len() - 1 - locate(&ys, c[1]);
                row * xs.len() + col
            })
            .collect();
        Raster {
            width: xs.len(),
            height: ys.len(),
            pixel,
        }
    }

    /// Affine rescale of `values` to 0..=255; pixels without a site stay 0.
    fn render(&self, values: &[f64]) -> Vec<u8> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0u8; self.width * self.height];
        for (&p, &v) in self.pixel.iter().zip(values) {
            out[p] = if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                0
            };
        }
        out
    }
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let sites = load_sites(&a.sites)?;
    check_covariates(&model, &sites)?;
    let pa = data::load_pa(&a.pa)?;
    let grouping = match &a.groups {
        Some(p) => data::load_grouping(p)?,
        None => Grouping::default(),
    };
    let report = eval::evaluate(&model, &sites, &pa, &grouping)?;
    if report.skipped_species > 0 {
        log::warn!(
            "{} species without both presences and absences were skipped",
            report.skipped_species
        );
    }
    create_dir(&a.out)?;
    write_atomic(&a.out.join("metrics.csv"), |w| report.write_metrics_csv(w))?;
    write_atomic(&a.out.join("summary.csv"), |w| report.write_summary_csv(w))?;
    match report.general_average {
        Some(v) => println!("general average AUC {v:.4}"),
        None => println!("general average AUC undefined"),
    }
    let mut inputs: Vec<&Path> = vec![&a.model, &a.sites, &a.pa];
    if let Some(g) = &a.groups {
        inputs.push(g);
    }
    write_manifest(&a.out, "eval", &inputs, "")
}

fn cv_cmd(a: CvArgs) -> anyhow::Result<()> {
    let config = resolve_config(&a.flags)?;
    let sites = load_sites(&a.sites)?;
    let occ = data::load_occurrences(&a.occurrences, &sites)?;
    let report = train::cross_validate(&config, &sites, &occ, a.grid_side, a.folds)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("cv.csv"), |w| report.write_csv(w))?;
    match report.mean_auc {
        Some(v) => println!("mean cross-validated AUC {v:.4}"),
        None => println!("mean cross-validated AUC undefined"),
    }
    let settings = format!(
        "{}# grid_side {}\n# folds {}\n",
        config.to_kv(),
        a.grid_side,
        a.folds
    );
    write_manifest(&a.out, "cv", &[&a.sites, &a.occurrences], &settings)
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<()> {
    let opts = if a.quick {
        VerifyOptions {
            gradient_instances: 5,
            identity_instances: 100,
            oracle_instances: 100,
            seed: a.seed,
        }
    } else {
        VerifyOptions {
            seed: a.seed,
            ..VerifyOptions::default()
        }
    };
    let results = verify::run(&opts)?;
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!(Error::Numerical(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
