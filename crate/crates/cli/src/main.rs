use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fhseg::data::{
    generate_patches, load_split, make_splits, write_manifest, write_sample, write_split_file,
    ManifestEntry, Split,
};
use fhseg::net::{audit, build_model, GateMode};
use fhseg::persist::{Checkpoint, RunConfig};
use fhseg::tensor::OpKind;
use fhseg::train::verify::{gradient_suite, render_rows, GRAD_EPS};
use fhseg::train::{evaluate, run_ablation, thread_budget, LossRecord, Trainer};
use fhseg::Error;

const EXIT_THRESHOLD: u8 = 5;

#[derive(Parser)]
#[command(name = "fhseg", version, about = "Vessel segmentation with full-scale skips and soft attention gates")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic samples, a manifest and a split file.
    GenData(Common),
    /// Train a model on the manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the config's manifest, then the checkpoint's directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train and evaluate the Base, w/HSA, w/FS and Total variants.
    Ablation(Common),
    /// Finite-difference check of every differentiable op and the model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at --seed (default 0).
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Test hook: corrupt one op's backward rule.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Compare analytic and allocated parameter counts.
    Params(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        if let Some(o) = &self.out {
            c.out_dir = Some(o.clone());
        }
        Ok(c)
    }
}

enum Failure {
    Core(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::GenData(c) => gen_data(&c),
        Cmd::Train { common, checkpoint } => train(&common, checkpoint.as_deref()),
        Cmd::Eval {
            common,
            checkpoint,
            split,
            manifest,
        } => eval(&common, &checkpoint, &split, manifest),
        Cmd::Ablation(c) => ablation(&c),
        Cmd::Gradcheck {
            common,
            seeds,
            corrupt,
        } => gradcheck(&common, seeds, corrupt.as_deref()),
        Cmd::Params(c) => params(&c),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Threshold(m)) => {
            eprintln!("failed: {m}");
            ExitCode::from(EXIT_THRESHOLD)
        }
    }
}

fn create_dir(p: &Path) -> Result<(), Error> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<(), Error> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = c.load()?;
    cfg.generator.validate()?;
    let seed = cfg.require_seed()?;
    let out = cfg.require_out_dir()?;
    let samples = generate_patches(&cfg.generator, cfg.samples, seed)?;
    let splits = make_splits(samples.len(), seed)?;
    let assignment = splits.assignment();
    let dir = out.join("samples");
    create_dir(&dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, &split)) in samples.iter().zip(&assignment).enumerate() {
        let file = format!("samples/{i:05}.fhs");
        write_sample(&out.join(&file), s)?;
        entries.push(ManifestEntry {
            file,
            seed: s.meta.seed,
            split,
        });
    }
    write_manifest(&out.join("manifest.tsv"), &entries)?;
    write_split_file(&out.join("splits.tsv"), &splits)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        samples.len(),
        out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn append_log(path: &Path, records: &[LossRecord]) -> Result<(), Error> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text: String = records.iter().map(|r| r.line() + "\n").collect();
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps log lines up to and including `iteration`.
fn truncate_log(path: &Path, iteration: u64) -> Result<(), Error> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split('\t')
                .nth(1)
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|it| it <= iteration)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_text(path, &kept)
}

fn train(c: &Common, resume: Option<&Path>) -> Outcome {
    let cfg = c.load()?;
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let out = cfg.require_out_dir()?.to_path_buf();
    let data = load_split(&cfg.manifest_path()?, Split::Train)?;
    create_dir(&out)?;
    let log_path = out.join("loss.log");
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            truncate_log(&log_path, ck.iteration)?;
            ck.into_trainer(cfg.train.clone())?
        }
        None => {
            write_text(&log_path, "")?;
            Trainer::new(cfg.train.clone())?
        }
    };
    write_text(&out.join("run.cfg"), &cfg.to_text())?;
    let ckpt_dir = out.join("checkpoints");
    let interval = cfg.train.checkpoint_interval;
    trainer.fit(&data, |t, records| {
        append_log(&log_path, records)?;
        let last = records.last().map_or(f64::NAN, |r| r.loss);
        println!("epoch {} iteration {} loss {last:.6}", t.epoch, t.iteration);
        if interval > 0 && t.epoch % interval == 0 {
            Checkpoint::of(t).save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    })?;
    let final_path = out.join("final.ckpt");
    Checkpoint::of(&trainer).save(&final_path)?;
    println!("seed {seed}: saved {}", final_path.display());
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path, split: &str, manifest: Option<PathBuf>) -> Outcome {
    let split = Split::parse(split)?;
    let ck = Checkpoint::load(checkpoint)?;
    let ck_dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg = match &c.config {
        Some(_) => {
            let cfg = c.load()?;
            ck.check_model(&cfg.train.model)?;
            Some(cfg)
        }
        None => None,
    };
    let manifest = match (manifest, &cfg) {
        (Some(m), _) => m,
        (None, Some(cfg)) if cfg.manifest.is_some() || cfg.out_dir.is_some() => cfg.manifest_path()?,
        _ => ck_dir.join("manifest.tsv"),
    };
    let data = load_split(&manifest, split)?;
    let report = evaluate(&ck.model, &data, GateMode::Learned)?;
    let out = c.out.clone().unwrap_or(ck_dir);
    create_dir(&out)?;
    let table = report.to_table();
    write_text(&out.join(format!("metrics_{}.txt", split.name())), &table)?;
    write_text(&out.join(format!("metrics_{}.kv", split.name())), &report.to_kv())?;
    print!("{table}");
    Ok(())
}

fn ablation(c: &Common) -> Outcome {
    let cfg = c.load()?;
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let out = cfg.require_out_dir()?;
    let manifest = cfg.manifest_path()?;
    let train = load_split(&manifest, Split::Train)?;
    let test = load_split(&manifest, Split::Test)?;
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|i| seed + i).collect();
    let report = run_ablation(&cfg.train, &train, &test, &seeds, thread_budget())?;
    create_dir(out)?;
    let table = report.to_table();
    write_text(&out.join("ablation.txt"), &table)?;
    let mut kv = String::new();
    for row in &report.rows {
        for line in row.mean.to_kv().lines() {
            kv.push_str(&format!("{}.{line}\n", row.variant.label()));
        }
    }
    write_text(&out.join("ablation.kv"), &kv)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(c: &Common, seeds: u64, corrupt: Option<&str>) -> Outcome {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| OpKind::DIFFERENTIABLE.contains(k))
                .ok_or_else(|| Error::Config(format!("unknown differentiable op {name:?}")))?,
        ),
    };
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()).into());
    }
    let base = c.load()?.seed.unwrap_or(0);
    let seeds: Vec<u64> = (base..base + seeds).collect();
    let rows = gradient_suite(&seeds, GRAD_EPS, fault)?;
    print!("{}", render_rows(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn params(c: &Common) -> Outcome {
    let cfg = c.load()?;
    let model = build_model(&cfg.train.model, cfg.seed.unwrap_or(0))?;
    let a = audit(&model)?;
    print!("{}", a.render());
    if cfg.train.model.skip_mode.is_full_scale() {
        let branch: u64 = a
            .stage_terms
            .iter()
            .flat_map(|s| &s.terms)
            .filter(|(n, _)| *n == "branch_convs")
            .map(|(_, v)| v)
            .sum();
        println!("fullscale branch convs total {branch}");
    }
    if a.ok() {
        Ok(())
    } else {
        Err(Failure::Threshold("analytic and allocated counts differ".into()))
    }
}
