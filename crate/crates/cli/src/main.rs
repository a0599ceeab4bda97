use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use fiberfill::config::RunConfig;
use fiberfill::dataset::{make_split, DatasetSplit};
use fiberfill::eval::evaluate_cohort;
use fiberfill::field::VectorVolume;
use fiberfill::gan::checkpoint::{self, VERSION};
use fiberfill::gan::{EpochMetrics, TrainConfig, Trainer, TrainingData};
use fiberfill::gradcheck::{run_suite, Perturbation};
use fiberfill::io::{manifest_text, parse_manifest, render_slice, scan_name, VolumeFile, MANIFEST_FILE};
use fiberfill::phantom::RegionLabels;
use fiberfill::{Error, Result};

const LATEST: &str = "latest.ck";
const METRICS: &str = "metrics.tsv";

#[derive(Parser)]
#[command(name = "fiberfill", version, about = "Inpainting of 3D fiber-orientation fields with per-voxel uncertainty")]
struct Cli {
    /// Run configuration (`key = value` lines); keys not given keep their defaults.
    #[arg(long, global = true, env = "FIBERFILL_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohort, its region labels and the split manifest.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated cohort, writing checkpoints and a metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/latest.ck.
        #[arg(long)]
        resume: bool,
    },
    /// Complexity maps and calibration summary for the test scans.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one slice of a volume file as a binary graymap.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Scale one case's analytic gradient (detector self-test).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    X,
    Y,
    Z,
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(format!("Configuration keys and defaults:\n{}", RunConfig::documentation()));
    let cli = match cmd.try_get_matches().and_then(|m: ArgMatches| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Contract("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Contract(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::PhantomGen { out } => phantom_gen(&cfg, &out),
        Command::Train { data, out, resume } => train(&cfg, &data, &out, resume),
        Command::Eval { checkpoint, data, out } => eval(&cfg, &checkpoint, &data, &out),
        Command::Render { map, axis, slice, out } => render(&map, axis, slice, &out),
        Command::Gradcheck { perturb } => gradcheck(perturb),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn phantom_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let split = make_split(cfg.cohort.num_scans, cfg.split, cfg.seed)?;
    let cohort = cfg.cohort.generate(cfg.seed)?;
    create_dir(out)?;
    for (i, (vol, labels)) in cohort.iter().enumerate() {
        VolumeFile::from_field(vol).write(&out.join(format!("{}.mdav", scan_name(i))))?;
        VolumeFile::from_labels(labels).write(&out.join(format!("{}.labels.mdav", scan_name(i))))?;
    }
    write_file(&out.join(MANIFEST_FILE), manifest_text(&split).as_bytes())?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let (a, b, c) = split.sizes();
    println!("wrote {} scans to {} (train {a}, validation {b}, test {c})", cohort.len(), out.display());
    Ok(())
}

fn read_split(data: &Path) -> Result<DatasetSplit> {
    let path = data.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    parse_manifest(&text, &path)
}

fn read_volumes(data: &Path, split: &DatasetSplit) -> Result<Vec<VectorVolume>> {
    (0..split.num_scans())
        .map(|i| {
            let path = data.join(format!("{}.mdav", scan_name(i)));
            VolumeFile::read(&path)?.into_field(&path)
        })
        .collect()
}

fn read_labels(data: &Path, split: &DatasetSplit) -> Result<Vec<RegionLabels>> {
    (0..split.num_scans())
        .map(|i| {
            let path = data.join(format!("{}.labels.mdav", scan_name(i)));
            VolumeFile::read(&path)?.into_labels(&path)
        })
        .collect()
}

fn mismatch(msg: String) -> Error {
    Error::CheckpointMismatch { version: VERSION, msg }
}

/// Keeps the header and every line up to `epoch`.
fn truncate_metrics(path: &Path, epoch: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut kept = String::new();
    for line in text.lines() {
        let keep = match line.split('\t').next().map(str::parse::<u64>) {
            Some(Ok(e)) => e <= epoch,
            _ => line.starts_with('#'),
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_file(path, kept.as_bytes())
}

fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let split = read_split(data_dir)?;
    let data = TrainingData::prepare(read_volumes(data_dir, &split)?, split, cfg.arch.n, cfg.mask_fraction)?;
    create_dir(out)?;
    let latest = out.join(LATEST);
    let metrics = out.join(METRICS);
    let echo = cfg.to_text();
    let train_cfg = cfg.train_config();

    let mut trainer = if resume {
        let mut trainer = checkpoint::load(&latest)?.trainer;
        if trainer.model.arch != cfg.arch {
            return Err(mismatch(format!("{} was trained with {:?}, config has {:?}", latest.display(), trainer.model.arch, cfg.arch)));
        }
        let same = |c: &TrainConfig| TrainConfig { epochs: 0, ..c.clone() };
        if same(&trainer.cfg) != same(&train_cfg) {
            return Err(mismatch(format!("{} was trained with different training settings", latest.display())));
        }
        if trainer.normalizer != data.normalizer {
            return Err(mismatch(format!("{} was trained on different data", latest.display())));
        }
        truncate_metrics(&metrics, trainer.epoch)?;
        trainer.cfg.epochs = train_cfg.epochs;
        trainer
    } else {
        let trainer = Trainer::new(cfg.arch.clone(), train_cfg.clone(), &data)?;
        write_file(&metrics, format!("{}\n", EpochMetrics::header()).as_bytes())?;
        checkpoint::save(&latest, &trainer, &echo)?;
        trainer
    };

    let mut log = OpenOptions::new().append(true).open(&metrics).map_err(|e| Error::Io { path: metrics.clone(), source: e })?;
    while trainer.epoch < train_cfg.epochs {
        let m = trainer.run_epoch(&data)?;
        writeln!(log, "{}", m.to_line()).map_err(|e| Error::Io { path: metrics.clone(), source: e })?;
        checkpoint::save(&latest, &trainer, &echo)?;
        if cfg.checkpoint_every > 0 && m.epoch % cfg.checkpoint_every == 0 {
            checkpoint::save(&out.join(format!("epoch_{:04}.ck", m.epoch)), &trainer, &echo)?;
        }
    }
    println!("trained to epoch {}", trainer.epoch);
    Ok(())
}

fn eval(cfg: &RunConfig, ck_path: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let trainer = checkpoint::load(ck_path)?.trainer;
    let split = read_split(data_dir)?;
    let labels = read_labels(data_dir, &split)?;
    let raw = read_volumes(data_dir, &split)?;
    let test = split.test.clone();
    let data =
        TrainingData::prepare_with_normalizer(raw, split, trainer.model.arch.n, cfg.mask_fraction, Some(trainer.normalizer))?;
    let thresholds = match cfg.eval.threshold {
        Some(t) => vec![t; data.volumes.len()],
        None => data.thresholds.clone(),
    };
    let report = evaluate_cohort(
        &trainer.model,
        &data.volumes,
        &labels,
        &data.masks,
        &thresholds,
        &test,
        cfg.eval.stride,
        cfg.eval.batch_size,
    )?;
    create_dir(out)?;
    for (scan, map) in &report.maps {
        for (kind, values) in [("variance", &map.variance), ("error", &map.error), ("cov", &map.cov)] {
            let path = out.join(format!("{}.{kind}.mdav", scan_name(*scan)));
            VolumeFile::new(map.dims, 1, values.clone())?.write(&path)?;
        }
    }
    let summary = report.summary_text();
    write_file(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn render(map: &Path, axis: Axis, slice: usize, out: &Path) -> Result<()> {
    let vol = VolumeFile::read(map)?;
    let image = render_slice(&vol, axis as usize, slice)?;
    let mut f = File::create(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    f.write_all(&image.to_pgm()).map_err(|e| Error::Io { path: out.into(), source: e })
}

fn gradcheck(perturb: Option<String>) -> Result<()> {
    let perturbation = perturb.map(|case| Perturbation { case, factor: 0.01 });
    let results = run_suite(perturbation.as_ref())?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<32} elements {:>4}  max_abs {:.3e}  max_rel {:.3e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.checked,
            r.max_abs_error,
            r.max_rel_error
        );
        if !r.passed {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", results.len());
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}
