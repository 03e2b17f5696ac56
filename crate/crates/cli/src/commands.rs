use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::Args;
use image::RgbImage;
use usgan::data::{
    generate_toy_corpus, load_image, save_png, split, tensor_to_rgb, Dataset, DatasetManifest, ManifestRecord,
    SpriteSpec,
};
use usgan::evaluation::{acd_batch, mean_std, CriticClassifier, ExpressionClassifier, PixelStatsEmbedder, VerificationClient};
use usgan::model::{count_parameters, generator_forward, ExpressionVector, ImageBatch};
use usgan::training::{resume, CheckpointKind, RunDirectory, TrainError, TrainState};

use crate::run_config::RunConfigFile;
use crate::Failure;

#[derive(Args)]
pub struct MakeToyDataArgs {
    /// Number of sprite identities.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub identities: u64,
    /// Number of expression classes (2 to 7).
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(2..=7))]
    pub classes: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed for the identity and expression parameters
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn make_toy_data(a: MakeToyDataArgs) -> Result<(), Failure> {
    let spec = SpriteSpec::new(a.size, a.classes as usize, a.seed)?;
    let manifest = generate_toy_corpus(&spec, a.identities as usize, &a.out)?;
    println!("wrote {} images to {}", manifest.len(), a.out.display());
    for (name, n) in manifest.class_names.iter().zip(manifest.class_counts()) {
        println!("  {name}\t{n}");
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration file (see `usgan default-config`).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides `out` from the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Disable the input-to-output skip connection.
    #[arg(long)]
    pub no_ultimate_skip: bool,
    /// Override the number of generator residual blocks.
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Override the step cap (0 = none).
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from the newest periodic checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

/// Records with absolute paths, so a split manifest can live anywhere.
fn absolutized(m: &DatasetManifest) -> DatasetManifest {
    let records = m
        .records
        .iter()
        .map(|r| {
            let p = m.resolve(r);
            let p = std::path::absolute(&p).unwrap_or(p);
            ManifestRecord { image_path: p, ..r.clone() }
        })
        .collect();
    DatasetManifest { class_names: m.class_names.clone(), records, base_dir: m.base_dir.clone() }
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let (file, text) = RunConfigFile::load(&a.config)?;
    let mut cfg = file.train_config()?;
    if a.no_ultimate_skip {
        cfg.model.use_ultimate_skip = false;
    }
    if let Some(r) = a.residual_blocks {
        cfg.model.num_residual_blocks = r;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    cfg.validate()?;
    let out = a.out.or(file.out.clone()).ok_or_else(|| anyhow!("no run directory: pass --out or set `out`"))?;
    let manifest_path = file.manifest.clone().ok_or_else(|| anyhow!("the config does not name a `manifest`"))?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    if manifest.num_classes() != cfg.model.num_classes {
        return Err(anyhow!("manifest has {} classes, config expects {}", manifest.num_classes(), cfg.model.num_classes).into());
    }

    let mut run = RunDirectory::open(&out)?;
    fs::write(out.join("run.toml"), &text).with_context(|| format!("cannot write {}", out.join("run.toml").display()))?;
    fs::write(out.join("effective_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let (train_split, test_split) = if file.train_fraction < 1.0 {
        split(&manifest, file.train_fraction, file.split_seed, file.split_mode)?
    } else {
        (manifest.clone(), DatasetManifest { records: Vec::new(), ..manifest.clone() })
    };
    absolutized(&train_split).save(&out.join("train_manifest.csv"))?;
    absolutized(&test_split).save(&out.join("test_manifest.csv"))?;
    let dataset = Dataset::load(&train_split, cfg.model.image_size)?;

    let state = match (a.resume, run.latest_checkpoint()?) {
        (true, Some(path)) => {
            let mut s = TrainState::load(&path)?;
            if s.config.model != cfg.model {
                return Err(anyhow!("checkpoint {} was trained with a different architecture", path.display()).into());
            }
            s.config.epochs = cfg.epochs;
            s.config.max_steps = cfg.max_steps;
            println!("resuming from {} at step {}", path.display(), s.step);
            s
        }
        (true, None) => return Err(anyhow!("--resume given but {} holds no checkpoint", out.display()).into()),
        (false, _) => TrainState::new(cfg)?,
    };
    println!(
        "training on {} images; generator {} parameters, critic {} parameters",
        dataset.len(),
        count_parameters(&state.generator),
        count_parameters(&state.discriminator)
    );
    match resume(state, &dataset, &mut run) {
        Ok(done) => {
            println!("finished at step {} ({})", done.step, run.checkpoint_path(done.step, CheckpointKind::Final).display());
            Ok(())
        }
        Err(e @ TrainError::Diverged { .. }) => {
            let crash = run.checkpoint_path(0, CheckpointKind::Crash);
            Err(Failure::Numerical(anyhow!("{e}; last finite state saved to {}", crash.display())))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Trained checkpoint file
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input images; one grid row each.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory for grid.png (and residuals.png).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the generator's residual images before the skip is added.
    #[arg(long)]
    pub residuals: bool,
}

fn paste_row(grid: &mut RgbImage, row: usize, cells: &[&ImageBatch]) {
    for (col, cell) in cells.iter().enumerate() {
        let d = cell.image_size();
        image::imageops::replace(grid, &tensor_to_rgb(cell.tensor(), 0), (col * d) as i64, (row * d) as i64);
    }
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let state = TrainState::load(&a.checkpoint)?;
    let model = &state.config.model;
    let (d, c) = (model.image_size, model.num_classes);
    let mut grid = RgbImage::new(((c + 1) * d) as u32, (a.input.len() * d) as u32);
    let mut residuals = grid.clone();
    for (row, path) in a.input.iter().enumerate() {
        let x = load_image(path, d)?;
        let mut outputs = Vec::with_capacity(c);
        let mut res = Vec::with_capacity(c);
        for target in 0..c {
            let g = generator_forward(&state.generator, &x, &[ExpressionVector::one_hot(target, c)], model)?;
            outputs.push(g.output);
            res.push(g.residual);
        }
        paste_row(&mut grid, row, &std::iter::once(&x).chain(&outputs).collect::<Vec<_>>());
        paste_row(&mut residuals, row, &std::iter::once(&x).chain(&res).collect::<Vec<_>>());
    }
    save_png(&grid, &a.out.join("grid.png"))?;
    println!("wrote {}", a.out.join("grid.png").display());
    if a.residuals {
        save_png(&residuals, &a.out.join("residuals.png"))?;
        println!("wrote {}", a.out.join("residuals.png").display());
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained checkpoint file
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of test images (e.g. the run's test_manifest.csv).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for report.tsv and summary.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Verification backend URL; credentials are read from USGAN_VERIFY_TOKEN.
    #[arg(long)]
    pub verify_endpoint: Option<String>,
    /// Fail instead of skipping the verification score when the backend is unreachable.
    #[arg(long)]
    pub strict: bool,
    /// Concurrent verification requests.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Per-request verification timeout in seconds.
    #[arg(long, default_value_t = 10)]
    pub timeout_secs: u64,
}

struct Row {
    path: String,
    source: usize,
    target: usize,
    acd: f64,
    fvs: Option<f64>,
    predicted: usize,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let state = TrainState::load(&a.checkpoint)?;
    let model = &state.config.model;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if manifest.is_empty() {
        return Err(anyhow!("manifest {} lists no images", a.manifest.display()).into());
    }
    let dataset = Dataset::load(&manifest, model.image_size)?;
    let embedder = PixelStatsEmbedder::default();
    let classifier = CriticClassifier { params: &state.discriminator, config: model };
    let mut client = a
        .verify_endpoint
        .as_ref()
        .map(|url| VerificationClient::from_env(url.clone(), Duration::from_secs(a.timeout_secs)));

    let mut rows = Vec::new();
    for (i, record) in manifest.records.iter().enumerate() {
        let x = dataset.image(i);
        let source = dataset.labels()[i];
        let targets: Vec<usize> = (0..model.num_classes).filter(|&t| t != source).collect();
        let xs = ImageBatch::concat(&vec![x.clone(); targets.len()])?;
        let codes: Vec<_> = targets.iter().map(|&t| ExpressionVector::one_hot(t, model.num_classes)).collect();
        let y = generator_forward(&state.generator, &xs, &codes, model)?.output;
        let acds = acd_batch(&embedder, &xs, &y)?;
        let predicted = classifier.predict(&y)?;
        let mut fvs = vec![None; targets.len()];
        if let Some(c) = &client {
            let mut scores = Vec::with_capacity(targets.len());
            for r in c.score_all(&xs, &y, a.max_in_flight) {
                match r {
                    Ok(s) => scores.push(Some(s)),
                    Err(e) if a.strict => return Err(anyhow!("verification backend: {e}").into()),
                    Err(e) => {
                        eprintln!("warning: verification score skipped: {e}");
                        scores.clear();
                        break;
                    }
                }
            }
            if scores.is_empty() {
                client = None;
            } else {
                fvs = scores;
            }
        }
        for (k, &t) in targets.iter().enumerate() {
            rows.push(Row {
                path: record.image_path.display().to_string(),
                source,
                target: t,
                acd: acds[k],
                fvs: fvs[k],
                predicted: predicted[k],
            });
        }
    }
    let (report, summary) = render_report(&rows);
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    fs::write(a.out.join("report.tsv"), report)?;
    fs::write(a.out.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn render_report(rows: &[Row]) -> (String, String) {
    let mut report = String::from("image\tsource\ttarget\tacd\tfvs\tpredicted\tcorrect\n");
    for r in rows {
        let fvs = r.fvs.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let correct = (r.predicted == r.target) as u8;
        let _ = writeln!(report, "{}\t{}\t{}\t{:.6}\t{fvs}\t{}\t{correct}", r.path, r.source, r.target, r.acd, r.predicted);
    }
    let mut summary = String::from("metric\tmean\tstd\tn\tformatted\n");
    let acd: Vec<f64> = rows.iter().map(|r| r.acd).collect();
    let fvs: Vec<f64> = rows.iter().filter_map(|r| r.fvs).collect();
    let acc: Vec<f64> = rows.iter().map(|r| (r.predicted == r.target) as u8 as f64).collect();
    for (name, v) in [("acd", &acd), ("fvs", &fvs), ("expression_accuracy", &acc)] {
        if v.is_empty() {
            let _ = writeln!(summary, "{name}\tNA\tNA\t0\tNA");
            continue;
        }
        let (m, s) = mean_std(v);
        let _ = writeln!(summary, "{name}\t{m:.6}\t{s:.6}\t{}\t{m:.4} ± {s:.4}", v.len());
    }
    (report, summary)
}

