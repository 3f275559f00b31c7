use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use z2fsl::backbones::{Backbone, BackboneKind};
use z2fsl::config::{preset, Config, Head, SeenSource, Stage};
use z2fsl::data::{convert_export, make_toy_dataset, oracle_accuracy, ConvertOptions, Dataset, Mode, ToySpec};
use z2fsl::fsl::ProtoNet;
use z2fsl::nn::Checkpoint;
use z2fsl::pipeline::{self, IterationLog};
use z2fsl::{Error, ErrorKind, Result};

const SEED_ENV: &str = "Z2FSL_SEED";

#[derive(Parser, Debug)]
#[command(name = "z2fsl", version, about = "Zero-shot learning with a few-shot classifier in the loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a known linear attribute-to-feature map.
    MakeToy(MakeToyArgs),
    /// Import a benchmark export into a dataset directory.
    Convert(ConvertArgs),
    /// Episodic pre-training of the Prototypical Network on real seen samples.
    Pretrain(PretrainArgs),
    /// Joint training of the backbone and the Prototypical Network.
    Train(TrainArgs),
    /// Build the test support and score the test set.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    seen: usize,
    #[arg(long, default_value_t = 5)]
    unseen: usize,
    #[arg(long, default_value_t = 16)]
    attr_dim: usize,
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value = "zsl")]
    mode: Mode,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Directory holding the exported matrix files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "zsl")]
    mode: Mode,
    /// Base of the sample indices in the split files.
    #[arg(long, default_value_t = 1)]
    index_base: u32,
    /// Base of the class labels.
    #[arg(long, default_value_t = 1)]
    label_base: u32,
    /// Features are stored one column per sample.
    #[arg(long)]
    transpose_features: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Shipped configuration name or path to a config file.
    #[arg(long)]
    config: Option<String>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pre-trained network checkpoint.
    #[arg(long)]
    protonet: Option<PathBuf>,
    /// Start from a freshly initialized network.
    #[arg(long, conflicts_with = "protonet")]
    no_pretrain: bool,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Test-time head; `linear` with a zero gamma trains the backbone alone.
    #[arg(long)]
    head: Option<Head>,
    /// Fine-tune the network on generated unseen-class episodes afterwards.
    #[arg(long)]
    finetune: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    head: Option<Head>,
    /// Generated support per unseen class.
    #[arg(long)]
    test_shot: Option<usize>,
    /// Support per seen class in the generalized setting.
    #[arg(long)]
    seen_shot: Option<usize>,
    #[arg(long)]
    seen_source: Option<SeenSource>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then overrides, then dedicated flags. The seed comes from
/// `--seed`, else the environment, else the config.
fn resolve(run: &RunArgs, stage: Stage, flags: &[(&str, String)]) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(name) = &run.config {
        match preset(name) {
            Some(text) => cfg.apply_text(text, name, stage)?,
            None => {
                let path = Path::new(name);
                let text = fs::read_to_string(path).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        Error::Config(format!("`{name}` is neither a shipped config nor a file"))
                    } else {
                        Error::Io {
                            path: path.into(),
                            source: e,
                        }
                    }
                })?;
                cfg.apply_text(&text, name, stage)?;
            }
        }
    }
    cfg.apply_overrides(&run.overrides)?;
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    if let Some(seed) = run.seed.or(env_seed()?) {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn start_run(run: &RunArgs, cfg: &Config) -> Result<Dataset> {
    let ds = Dataset::load(&run.data)?;
    create_dir(&run.out)?;
    write(&run.out.join("resolved-config.txt"), &cfg.to_text())?;
    Ok(ds)
}

fn make_toy(a: &MakeToyArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(ToySpec::default().seed),
    };
    let spec = ToySpec {
        seen: a.seen,
        unseen: a.unseen,
        attr_dim: a.attr_dim,
        feat_dim: a.feat_dim,
        per_class: a.per_class,
        noise: a.noise,
        mode: a.mode,
        seed,
    };
    let mut ds = make_toy_dataset(&spec)?;
    let oracle = oracle_accuracy(&ds)?;
    ds.set_metadata("oracle_accuracy", oracle.to_string());
    ds.set_metadata("seed", seed.to_string());
    ds.save(&a.out)?;
    println!("classes = {}", ds.num_classes());
    println!("samples = {}", ds.num_samples());
    println!("oracle_accuracy = {oracle}");
    Ok(())
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let opts = ConvertOptions {
        name: a.name.clone(),
        mode: a.mode,
        index_base: a.index_base,
        label_base: a.label_base,
        transpose_features: a.transpose_features,
    };
    let ds = convert_export(&a.input, &opts)?;
    ds.save(&a.out)?;
    println!("classes = {}", ds.num_classes());
    println!("samples = {}", ds.num_samples());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = resolve(&a.run, Stage::Pretrain, &[])?;
    let ds = start_run(&a.run, &cfg)?;
    let (pn, losses) = pipeline::pretrain(&ds, &cfg)?;
    pn.to_checkpoint().save(&a.run.out.join("protonet.z2fm"))?;
    let mut log = String::from("episode,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
    }
    write(&a.run.out.join("pretrain-loss.csv"), &log)?;
    if let Some(last) = losses.last() {
        println!("final_loss = {last}");
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(b) = a.backbone {
        flags.push(("backbone", b.to_string()));
    }
    if let Some(g) = a.gamma {
        flags.push(("gamma", format!("{g:?}")));
    }
    if let Some(h) = a.head {
        flags.push(("head", h.to_string()));
    }
    if a.finetune {
        flags.push(("finetune", "true".into()));
    }
    if a.no_pretrain {
        flags.push(("pretrain", "false".into()));
    }
    let cfg = resolve(&a.run, Stage::Train, &flags)?;
    let uses_protonet = cfg.head == Head::Pn || cfg.gamma > 0.0;
    if uses_protonet && cfg.pretrain && a.protonet.is_none() {
        return Err(Error::Config(
            "a pre-trained network is required: pass --protonet or --no-pretrain".into(),
        ));
    }
    let ds = start_run(&a.run, &cfg)?;
    let mut backbone = Backbone::new(cfg.backbone, ds.attr_dim(), ds.feat_dim(), &cfg.architecture(), cfg.seed);
    let mut log = format!("{}\n", IterationLog::CSV_HEADER);
    let mut on_iteration = |l: &IterationLog| {
        log.push_str(&l.csv_row());
        log.push('\n');
    };
    if uses_protonet {
        let mut pn = match (&a.protonet, cfg.pretrain) {
            (Some(path), true) => ProtoNet::from_checkpoint(&Checkpoint::load(path)?)?,
            _ => pipeline::new_protonet(&ds, &cfg),
        };
        pipeline::train_z2fsl(&mut backbone, &mut pn, &ds, &cfg, &mut on_iteration)?;
        if cfg.finetune {
            let losses = pipeline::finetune(&mut pn, &backbone, &ds, &cfg)?;
            let mut ft = String::from("episode,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(ft, "{i},{l}");
            }
            write(&a.run.out.join("finetune-loss.csv"), &ft)?;
        }
        pn.to_checkpoint().save(&a.run.out.join("protonet.z2fm"))?;
    } else {
        pipeline::train_backbone(&mut backbone, &ds, &cfg, &mut on_iteration)?;
    }
    backbone.to_checkpoint().save(&a.run.out.join("backbone.z2fm"))?;
    write(&a.run.out.join("train-log.csv"), &log)?;
    println!("iterations = {}", cfg.iterations);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(h) = a.head {
        flags.push(("head", h.to_string()));
    }
    if let Some(n) = a.test_shot {
        flags.push(("n_S_test", n.to_string()));
    }
    if let Some(n) = a.seen_shot {
        flags.push(("m_S", n.to_string()));
    }
    if let Some(s) = a.seen_source {
        flags.push(("seen_source", s.to_string()));
    }
    let cfg = resolve(&a.run, Stage::Eval, &flags)?;
    let ds = start_run(&a.run, &cfg)?;
    let backbone = Backbone::from_checkpoint(&Checkpoint::load(&a.model.join("backbone.z2fm"))?)?;
    let report = match cfg.head {
        Head::Pn => {
            let pn = ProtoNet::from_checkpoint(&Checkpoint::load(&a.model.join("protonet.z2fm"))?)?;
            pipeline::evaluate_protonet(&pn, &backbone, &ds, &cfg)?
        }
        Head::Linear => {
            let (report, clf) = pipeline::evaluate_linear(&backbone, &ds, &cfg)?;
            clf.to_checkpoint().save(&a.run.out.join("linear.z2fm"))?;
            report
        }
    };
    let text = report.to_text();
    write(&a.run.out.join("report.txt"), &text)?;
    write(&a.run.out.join("per-class.csv"), &report.per_class_csv())?;
    write(&a.run.out.join("confusion.csv"), &report.confusion_csv())?;
    for line in text.lines().filter(|l| !l.starts_with("per_class.")) {
        println!("{line}");
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeToy(a) => make_toy(a),
        Command::Convert(a) => convert(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
