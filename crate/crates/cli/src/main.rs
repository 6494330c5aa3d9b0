use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ledcnet::checkpoint::load_checkpoint;
use ledcnet::config::{self, RunConfig};
use ledcnet::data::{load_split, DatasetManifest, LabelPalette, Split, TilingSpec};
use ledcnet::model::Model;
use ledcnet::profiler::{measure_fps, EfficiencyReport};
use ledcnet::train::{self, ablation_table, run_ablation, TrainOutputs};
use ledcnet::Error;

#[derive(Parser)]
#[command(name = "ledcnet", version, about = "Dense-backbone segmentation of aerial imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the manifest's train split, validating on val.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval(Common),
    /// Predict masks for whole images.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Image to segment; repeatable.
        #[arg(long = "input", value_name = "PATH")]
        inputs: Vec<PathBuf>,
    },
    /// Report parameters, size, MACs and throughput.
    Profile(Common),
    /// Train and evaluate the four ASPP/OCR decoder combinations.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; the effective config is written here.
    #[arg(long, default_value = "ledcnet-out")]
    out: PathBuf,
    /// Seed for initialization, data order and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Model preset: base, large or toy.
    #[arg(long)]
    preset: Option<String>,
}

enum Failure {
    /// Bad arguments or configuration; exit 1.
    Invalid(String),
    /// Anything that failed while running; exit 2.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string().replace('\n', " ");
        match e {
            Error::Config(_) | Error::Param(_) => Failure::Invalid(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid<T>(reason: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(reason.into()))
}

fn require<'a>(p: &'a Option<PathBuf>, name: &str) -> Outcome<&'a Path> {
    match p {
        None => invalid(format!("missing {name}")),
        Some(p) if !p.exists() => invalid(format!("{name} does not exist: {}", p.display())),
        Some(p) => Ok(p),
    }
}

impl Common {
    fn config(&self) -> Outcome<RunConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".into(), seed.to_string()));
        }
        if self.config.is_some() {
            require(&self.config, "config_path")?;
        }
        let cfg = config::build(self.preset.as_deref(), self.config.as_deref(), &overrides)?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let echo = self.out.join("effective.cfg");
        std::fs::write(&echo, cfg.to_text()?).map_err(|e| Error::io(&echo, e))?;
        Ok(cfg)
    }

    fn manifest(&self) -> Outcome<DatasetManifest> {
        Ok(DatasetManifest::load(require(&self.manifest, "manifest_path")?)?)
    }

    fn checkpoint(&self) -> Outcome<Model> {
        Ok(load_checkpoint(require(&self.checkpoint, "checkpoint_path")?)?)
    }

    fn write(&self, name: &str, text: &str) -> Outcome {
        let p = self.out.join(name);
        std::fs::write(&p, text).map_err(|e| Failure::from(Error::io(&p, e)))
    }
}

fn cmd_train(c: &Common) -> Outcome {
    let manifest = c.manifest()?;
    let cfg = c.config()?;
    let mut model = match &c.checkpoint {
        Some(_) => c.checkpoint()?,
        None => Model::new(&cfg.model, cfg.train.seed)?,
    };
    let out = TrainOutputs { dir: c.out.clone() };
    let summary = train::train(&mut model, &manifest, &cfg.data, &cfg.train, Some(&out))?;
    for row in &summary.epochs {
        println!("{}", row.csv_line());
    }
    println!(
        "best epoch {} with val mIoU {:.2}; checkpoints in {}",
        summary.best_epoch,
        100.0 * summary.best_miou,
        c.out.display()
    );
    Ok(())
}

fn cmd_eval(c: &Common) -> Outcome {
    let model = c.checkpoint()?;
    let manifest = c.manifest()?;
    let cfg = c.config()?;
    let report = train::evaluate(&model, &manifest, cfg.eval.split, &cfg.data, cfg.eval.batch_size)?;
    let text = report.to_text();
    print!("{text}");
    c.write("metrics.txt", &text)?;
    c.write("metrics.json", &serde_json::to_string_pretty(&report).map_err(Error::from)?)
}

fn cmd_predict(c: &Common, inputs: &[PathBuf]) -> Outcome {
    let model = c.checkpoint()?;
    if inputs.is_empty() {
        return invalid("missing input");
    }
    let cfg = c.config()?;
    let palette = match &c.manifest {
        Some(_) => c.manifest()?.palette,
        None => LabelPalette::default(),
    };
    let tiling = TilingSpec {
        overlap: cfg.predict.overlap,
        ..cfg.data.tiling
    };
    for input in inputs {
        let files = train::predict_file(
            &model,
            input,
            &c.out,
            &palette,
            &tiling,
            &cfg.data.normalization,
            cfg.predict.blend,
        )?;
        println!("{} -> {} {}", input.display(), files.rgb.display(), files.index.display());
    }
    Ok(())
}

fn cmd_profile(c: &Common) -> Outcome {
    let cfg = c.config()?;
    let model = match &c.checkpoint {
        Some(_) => c.checkpoint()?,
        None => Model::new(&cfg.model, cfg.train.seed)?,
    };
    let p = cfg.profile;
    let shape = [p.batch, 3, p.input_size, p.input_size];
    let mut report = EfficiencyReport::new(&model, shape, p.element_bytes)?;
    if p.iters > 0 {
        report = report.with_fps(measure_fps(&model, shape, p.warmup, p.iters)?);
    }
    let json = report.to_json()?;
    let label = c.preset.as_deref().unwrap_or("model");
    println!("{json}");
    print!("{}", report.to_table(label));
    c.write("profile.json", &json)
}

fn cmd_ablate(c: &Common) -> Outcome {
    let manifest = c.manifest()?;
    let cfg = c.config()?;
    if cfg.model.num_classes != manifest.palette.len() {
        return invalid(format!(
            "model.num_classes is {} but the manifest palette has {} classes",
            cfg.model.num_classes,
            manifest.palette.len()
        ));
    }
    let d = &cfg.data;
    let tr = load_split(&manifest, Split::Train, &d.tiling, d.ignore_index)?;
    let va = load_split(&manifest, Split::Val, &d.tiling, d.ignore_index)?;
    let rows = run_ablation(&cfg.model, &tr.samples, &va.samples, d, &cfg.train, &manifest.palette.names())?;
    let table = ablation_table(&rows);
    print!("{table}");
    c.write("ablation.txt", &table)?;
    c.write("ablation.json", &serde_json::to_string_pretty(&rows).map_err(Error::from)?)
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Predict { common, inputs } => cmd_predict(common, inputs),
        Command::Profile(c) => cmd_profile(c),
        Command::Ablate(c) => cmd_ablate(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(reason)) => {
            eprintln!("error: {reason}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(reason)) => {
            eprintln!("error: {reason}");
            ExitCode::from(2)
        }
    }
}
