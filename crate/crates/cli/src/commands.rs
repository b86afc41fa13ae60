//! Subcommand implementations. Each writes into its own output directory,
//! guarded by a lockfile, and echoes the resolved configuration there.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nanoseg::eval::{self, predict_particle_probs, ThresholdChoice};
use nanoseg::models::{self, export_kernels, Network};
use nanoseg::nn::Real;
use nanoseg::particles::{connected_components, measure, particles_csv, size_distribution, ParticleRecord};
use nanoseg::pgm::{self, BitDepth};
use nanoseg::pseudolabel::{generate_label, overlay};
use nanoseg::synth::{self, DatasetSplit, Sample};
use nanoseg::train::{self, fit, load_model, prepare_inputs, GridEntry};
use nanoseg::filters::correlation_report;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};

pub const LOCK_FILE: &str = ".nanoseg.lock";

/// Exclusive ownership of an output directory for one invocation.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is in use by another run (remove {} if stale)", dir.display(), LOCK_FILE))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Which part of a dataset `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Suffixes of files this tool writes next to images; never treated as inputs.
const DERIVED_SUFFIXES: [&str; 6] = ["_mask", "_overlay", "_softmax", "_background", "_particle", "_label"];

/// Input images of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let is_pgm = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if is_pgm && !DERIVED_SUFFIXES.iter().any(|s| stem.ends_with(s)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// A synth directory (with `manifest.csv`) keeps its recorded split; any
/// other directory of `<stem>.pgm` / `<stem>_mask.pgm` pairs is split 70/30
/// with `seed`.
pub fn load_data(dir: &Path, seed: u64) -> Result<DatasetSplit> {
    if dir.join("manifest.csv").exists() {
        return synth::load_dataset(dir, seed).with_context(|| format!("loading dataset {}", dir.display()));
    }
    let images = list_images(dir)?;
    if images.is_empty() {
        bail!("no input images in {}", dir.display());
    }
    let mut samples = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let mask_path = dir.join(format!("{}_mask.pgm", stem(path)));
        if !mask_path.exists() {
            bail!("missing mask {} for {}", mask_path.display(), path.display());
        }
        let image = pgm::read_pgm(path).with_context(|| format!("reading {}", path.display()))?;
        let mask = pgm::read_mask(&mask_path).with_context(|| format!("reading {}", mask_path.display()))?;
        if image.dims() != mask.dims() {
            bail!("{}: image and mask sizes differ", path.display());
        }
        samples.push(Sample {
            image,
            mask,
            seed: i as u64,
            particles: Vec::new(),
        });
    }
    Ok(synth::split_samples(samples, seed))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?)
}

pub fn synth_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    let split = synth::make_dataset(&cfg.synth, cfg.count, cfg.seed)?;
    synth::save_dataset(out, &split, &cfg.synth)?;
    eprintln!("wrote {} scenes ({} train / {} test) to {}", split.len(), split.train.len(), split.test.len(), out.display());
    Ok(())
}

pub fn label_cmd(cfg: &RunConfig, input: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let images = list_images(input)?;
    if images.is_empty() {
        bail!("no input images in {}", input.display());
    }
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    let label_one = |path: &PathBuf| -> Result<(f64, u32)> {
        let img = pgm::read_pgm(path)?;
        let mask = generate_label(&img, &cfg.label)?;
        let s = stem(path);
        fs::copy(path, out.join(format!("{s}.pgm")))?;
        pgm::write_mask(&mask, out.join(format!("{s}_mask.pgm")))?;
        pgm::write_pgm(&overlay(&img, &mask)?, out.join(format!("{s}_overlay.pgm")), BitDepth::Eight)?;
        Ok((mask.fraction(), connected_components(&mask, cfg.eval.connectivity).count()))
    };
    let results: Vec<Result<(f64, u32)>> = thread_pool(threads)?.install(|| images.par_iter().map(label_one).collect());

    let mut manifest = String::from("file,particle_fraction,components,status\n");
    let mut failed = 0;
    for (path, r) in images.iter().zip(&results) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        match r {
            Ok((f, n)) => {
                let _ = writeln!(manifest, "{name},{f:?},{n},ok");
            }
            Err(e) => {
                failed += 1;
                eprintln!("{name}: {e:#}");
                let _ = writeln!(manifest, "{name},,,error");
            }
        }
    }
    fs::write(out.join("label_manifest.csv"), manifest)?;
    if failed > 0 {
        bail!("{failed} of {} images failed", images.len());
    }
    eprintln!("labelled {} images into {}", images.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path, precision: Precision, plot: bool) -> Result<()> {
    let data = load_data(data_dir, cfg.seed)?;
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    let net_seed = cfg.train.seed;
    let log = match precision {
        Precision::F64 => fit(models::build::<f64>(&cfg.model, net_seed)?, &data, &cfg.train, Some(out))?.1,
        Precision::F32 => fit(models::build::<f32>(&cfg.model, net_seed)?, &data, &cfg.train, Some(out))?.1,
    };
    if plot {
        let points = |f: &dyn Fn(&train::EpochRecord) -> Option<f64>| {
            log.epochs.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect()
        };
        let svg = line_chart(
            "Loss vs epoch",
            "epoch",
            "cross-entropy",
            &[
                Series { name: "train", points: points(&|r| Some(r.train_loss)) },
                Series { name: "held-out", points: points(&|r| r.heldout_loss) },
            ],
        );
        fs::write(out.join("loss.svg"), svg)?;
    }
    if let Some(l) = log.final_train_loss() {
        eprintln!("trained {} epochs; final training loss {l:.6}", log.epochs.len());
    }
    Ok(())
}

pub fn grid_cmd(cfg: &RunConfig, data_dir: &Path, grid_file: Option<&Path>, out: &Path) -> Result<()> {
    let grid: Vec<GridEntry> = match (grid_file, &cfg.grid) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(g)) => g.clone(),
        (None, None) => {
            let base = match &cfg.model {
                models::ModelSpec::Unet(u) => u.clone(),
                models::ModelSpec::Shallow(_) => bail!("the default ablation grid needs a unet model"),
            };
            train::paper_ablation_grid(&base, &cfg.train)
        }
    };
    let data = load_data(data_dir, cfg.seed)?;
    let _lock = OutputLock::acquire(out)?;
    let mut echo = cfg.clone();
    echo.grid = Some(grid.clone());
    echo.write_echo(out)?;
    let results = train::run_ablation_grid(&data, &grid, out)?;
    let failed: Vec<_> = results.iter().filter(|r| r.outcome.is_err()).collect();
    for r in &failed {
        eprintln!("{}: {}", r.id, r.outcome.as_ref().err().map(String::as_str).unwrap_or(""));
    }
    eprintln!("grid of {} runs written to {}", results.len(), out.display());
    if !failed.is_empty() {
        bail!("{} of {} grid runs failed", failed.len(), results.len());
    }
    Ok(())
}

struct InferOutcome {
    threshold: f64,
    particles: Vec<ParticleRecord>,
}

fn infer_one<T: Real>(
    net: &mut Network<T>,
    path: &Path,
    blur: f64,
    choice: ThresholdChoice,
    cfg: &RunConfig,
    out: &Path,
) -> Result<InferOutcome> {
    let raw = pgm::read_pgm(path)?;
    let d = net.divisor();
    if raw.width() % d != 0 || raw.height() % d != 0 {
        bail!("{}x{} is not divisible by {d}", raw.width(), raw.height());
    }
    let input = if blur > 0.0 { nanoseg::filters::gaussian_blur(&raw, blur)? } else { raw };
    let acts = eval::export_activations(net, &input)?;
    let s = stem(path);
    acts.write(out, &s)?;
    let threshold = choice.resolve(&acts.softmax)?;
    let mask = eval::apply_threshold(&acts.softmax, threshold)?;
    pgm::write_mask(&mask, out.join(format!("{s}_mask.pgm")))?;
    let particles = measure(&connected_components(&mask, cfg.eval.connectivity));
    fs::write(out.join(format!("{s}_particles.csv")), particles_csv(&particles))?;
    Ok(InferOutcome { threshold, particles })
}

pub fn infer_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let choice = cfg.eval.threshold_choice()?;
    let model = load_model::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let images = list_images(input)?;
    if images.is_empty() {
        bail!("no input images in {}", input.display());
    }
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    let results: Vec<Result<InferOutcome>> = thread_pool(threads)?.install(|| {
        images
            .par_iter()
            .map_init(|| model.net.clone(), |net, p| infer_one(net, p, model.blur_sigma, choice, cfg, out))
            .collect()
    });

    let mut manifest = String::from("file,threshold,particles,status\n");
    let mut all = Vec::new();
    let mut failed = 0;
    for (path, r) in images.iter().zip(results) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        match r {
            Ok(o) => {
                let _ = writeln!(manifest, "{name},{:?},{},ok", o.threshold, o.particles.len());
                all.extend(o.particles);
            }
            Err(e) => {
                failed += 1;
                eprintln!("{name}: {e:#}");
                let _ = writeln!(manifest, "{name},,,error");
            }
        }
    }
    fs::write(out.join("infer_manifest.csv"), manifest)?;
    let hist = size_distribution(&all, cfg.eval.size_bin_width).map_err(anyhow::Error::msg)?;
    fs::write(out.join("size_distribution.csv"), hist.to_csv())?;
    if failed > 0 {
        bail!("{failed} of {} images failed", images.len());
    }
    eprintln!("segmented {} images, {} particles", images.len(), all.len());
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, split: SplitChoice, out: &Path, plot: bool) -> Result<String> {
    let mut model = load_model::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_data(data_dir, cfg.seed)?;
    let samples: Vec<Sample> = match split {
        SplitChoice::Train => data.train,
        SplitChoice::Test => data.test,
        SplitChoice::All => data.train.into_iter().chain(data.test).collect(),
    };
    if samples.is_empty() {
        bail!("the selected split of {} is empty", data_dir.display());
    }
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    let inputs = prepare_inputs(&samples, model.blur_sigma)?;
    let probs = predict_particle_probs(&mut model.net, &inputs)?;
    let truths: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    let sweep = eval::pooled_sweep(&probs, &truths, &cfg.eval.thresholds)?;
    fs::write(out.join("sweep.csv"), sweep.to_csv())?;
    let (t, m) = sweep.best_f1().context("empty threshold list")?;
    let summary = format!(
        "best F1 {:.6} at threshold {t} (precision {:.6}, recall {:.6}) over {} images",
        m.f1,
        m.precision,
        m.recall,
        samples.len()
    );
    fs::write(out.join("summary.txt"), format!("{summary}\n"))?;
    if plot {
        let col = |f: fn(&eval::PixelMetrics) -> f64| {
            sweep.thresholds.iter().zip(&sweep.metrics).map(|(&t, m)| (t, f(m))).collect()
        };
        let svg = line_chart(
            "Pixel metrics vs threshold",
            "threshold",
            "score",
            &[
                Series { name: "precision", points: col(|m| m.precision) },
                Series { name: "recall", points: col(|m| m.recall) },
                Series { name: "F1", points: col(|m| m.f1) },
            ],
        );
        fs::write(out.join("sweep.svg"), svg)?;
    }
    Ok(summary)
}

pub fn kernels_cmd(cfg: &RunConfig, checkpoint: &Path, first_layer: bool, out: &Path) -> Result<()> {
    let model = load_model::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let export = export_kernels(&model.net, first_layer)?;
    let _lock = OutputLock::acquire(out)?;
    cfg.write_echo(out)?;
    for (i, k) in export.kernels.iter().enumerate() {
        k.write_csv(out.join(format!("kernel_{i:02}.csv")))?;
        k.write_pgm(out.join(format!("kernel_{i:02}.pgm")))?;
    }
    export.mean.write_csv(out.join("mean_kernel.csv"))?;
    export.mean.write_pgm(out.join("mean_kernel.pgm"))?;
    let mut report = String::from("reference,pearson_r\n");
    for (name, r) in correlation_report(&export.mean)? {
        let _ = writeln!(report, "{name},{r:?}");
    }
    fs::write(out.join("correlations.csv"), report)?;
    eprintln!("exported {} kernels and their mean to {}", export.kernels.len(), out.display());
    Ok(())
}
