//! `tmoe`: dataset generation, training, evaluation and introspection for
//! tree-gated mixture-of-experts landmark cascades.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use tmoe::cascade::{train, CascadeModel, PoseSource, TrainConfig};
use tmoe::checkpoint::{load_model, load_pose, save_model, save_pose};
use tmoe::gates::GateWeights;
use tmoe::metrics::{bucket_label, evaluate, fmt_sig9, EvalReport, SampleEval};
use tmoe::moe::{expert_usage, variant_param_count, Dims, Variant};
use tmoe::pose::{train_pose, PoseNet, PoseTrainConfig};
use tmoe::synthdata::{generate_dataset, read_dataset, DatasetConfig, GenConfig, Sample, Template3D};
use tmoe::Error;

#[derive(Parser)]
#[command(name = "tmoe", version, about = "Tree-gated MoE cascaded landmark regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face dataset.
    GenData(GenDataArgs),
    /// Train the head pose estimator.
    TrainPose(TrainPoseArgs),
    /// Train a landmark cascade.
    Train(TrainArgs),
    /// Evaluate a cascade checkpoint.
    Eval(EvalArgs),
    /// Dump gate assignments and cumulative expert usage.
    Introspect(IntrospectArgs),
    /// Report parameter counts of every variant.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples in the training split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 90.0)]
    yaw_max_deg: f64,
    #[arg(long, default_value_t = 96)]
    image_size: usize,
}

#[derive(Args)]
struct TrainPoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs per stage.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Pose checkpoint used to gate pose variants.
    #[arg(long, conflicts_with = "pose_oracle")]
    pose_model: Option<PathBuf>,
    /// Gate pose variants with ground-truth pose.
    #[arg(long)]
    pose_oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Directory for eval.csv and eval_summary.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IntrospectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Directory for clusters.csv and cumulative_usage.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = Scale::Paper)]
    dims: Scale,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainPose(a) => cmd_train_pose(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Introspect(a) => cmd_introspect(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), Error> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = DatasetConfig {
        n: a.n,
        seed: a.seed,
        split: a.split,
        yaw_max_deg: a.yaw_max_deg,
        gen: GenConfig {
            image_size: a.image_size,
            ..GenConfig::default()
        },
        ..Default::default()
    };
    let (train, test) = generate_dataset(&a.out, &cfg)?;
    println!("wrote {train} train and {test} test samples to {}", a.out.display());
    Ok(())
}

fn cmd_train_pose(a: TrainPoseArgs) -> CmdResult {
    let (train_set, test_set) = read_dataset(&a.data)?;
    let mut net = PoseNet::new(a.seed)?;
    let cfg = PoseTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
    };
    let losses = train_pose(&mut net, &train_set, &cfg)?;
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            stage: 0,
            step: losses.iter().position(|x| x == l).unwrap_or(0),
        }
        .into());
    }
    save_pose(&net, &a.out)?;
    if !test_set.is_empty() {
        let errs = test_set
            .par_iter()
            .map(|s| {
                let p = net.forward(&s.image)?;
                let g = s.pose.ok_or(Error::MissingPose)?;
                Ok([(p.yaw - g.yaw).abs(), (p.pitch - g.pitch).abs(), (p.roll - g.roll).abs()])
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let n = errs.len() as f64;
        let mae = |i: usize| errs.iter().map(|e| e[i]).sum::<f64>() / n;
        println!(
            "held-out MAE (rad): yaw {:.4}, pitch {:.4}, roll {:.4}",
            mae(0),
            mae(1),
            mae(2)
        );
    }
    println!("saved pose model to {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let pose = if a.variant.uses_pose() {
        match (&a.pose_model, a.pose_oracle) {
            (Some(p), _) => PoseSource::Model(Box::new(load_pose(p)?)),
            (None, true) => PoseSource::Oracle,
            (None, false) => {
                return Err(Failure::Usage(format!(
                    "variant {} is pose-gated; pass --pose-model or --pose-oracle",
                    a.variant
                )))
            }
        }
    } else {
        if a.pose_model.is_some() || a.pose_oracle {
            eprintln!("note: variant {} ignores pose", a.variant);
        }
        PoseSource::None
    };
    let (train_set, _) = read_dataset(&a.data)?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
    let dims = Dims {
        landmarks: first.gt.landmarks(),
        image_size: first.image.width(),
        ..Dims::desk()
    };
    let mut model = CascadeModel::new(a.variant, dims, a.stages, a.seed, pose)?;
    let cfg = TrainConfig {
        stages: a.stages,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let history = train(&mut model, &train_set, &cfg, |r| {
        eprintln!("stage {} epoch {} loss {}", r.stage, r.epoch, fmt_sig9(r.mean_loss));
    })?;
    save_model(&model, &a.out)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let rows: Vec<String> = history
        .iter()
        .map(|r| format!("{},{},{}", r.stage, r.epoch, fmt_sig9(r.mean_loss)))
        .collect();
    let csv = dir.join("loss_history.csv");
    write_csv(&csv, "stage,epoch,mean_loss", &rows)?;
    println!("saved {} to {} and {}", a.variant, a.out.display(), csv.display());
    Ok(())
}

fn select(data: &Path, split: Split) -> Result<Vec<Sample>, Error> {
    let (train, test) = read_dataset(data)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
        Split::All => {
            let mut all = train;
            all.extend(test);
            all.sort_by_key(|s| s.id);
            all
        }
    })
}

/// Loads a checkpoint and the samples it will run on, rejecting
/// incompatible pairs.
fn model_and_data(model: &Path, data: &Path, split: Split) -> Result<(CascadeModel, Vec<Sample>), Error> {
    let m = load_model(model)?;
    let samples = select(data, split)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("selected split is empty".into()));
    }
    for s in &samples {
        if s.gt.landmarks() != m.dims.landmarks {
            return Err(Error::InvalidArgument(format!(
                "landmark count mismatch: checkpoint P={}, sample {} has P={}",
                m.dims.landmarks,
                s.id,
                s.gt.landmarks()
            )));
        }
        let side = s.image.width().min(s.image.height());
        if s.image.width() != m.dims.image_size || m.dims.patch > side {
            return Err(Error::InvalidArgument(format!(
                "image/patch mismatch: checkpoint image {} patch {}, sample {} image {}x{}",
                m.dims.image_size,
                m.dims.patch,
                s.id,
                s.image.width(),
                s.image.height()
            )));
        }
    }
    Ok((m, samples))
}

fn summary_rows(r: &EvalReport) -> Vec<String> {
    let mut rows = vec![format!("all,{},{},{}", r.count, fmt_sig9(r.nme_bbox), opt(r.nme_interpupil))];
    for (i, b) in r.buckets.iter().enumerate() {
        rows.push(format!(
            "{},{},{},{}",
            bucket_label(i),
            b.count,
            opt(b.nme_bbox),
            opt(b.nme_interpupil)
        ));
    }
    let nonempty = r.buckets.iter().filter(|b| b.count > 0).count();
    rows.push(format!(
        "bucket_mean,{},{},{}",
        nonempty,
        fmt_sig9(r.bucket_mean_bbox),
        opt(r.bucket_mean_interpupil)
    ));
    rows
}

fn print_report(variant: Variant, r: &EvalReport) {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.3}", 100.0 * v));
    println!("{variant}: {} samples, NME in %", r.count);
    println!("  {:<12} {:>6} {:>10} {:>12}", "yaw", "n", "bbox", "interpupil");
    println!("  {:<12} {:>6} {:>10} {:>12}", "all", r.count, pct(Some(r.nme_bbox)), pct(r.nme_interpupil));
    for (i, b) in r.buckets.iter().enumerate() {
        println!(
            "  {:<12} {:>6} {:>10} {:>12}",
            bucket_label(i),
            b.count,
            pct(b.nme_bbox),
            pct(b.nme_interpupil)
        );
    }
    println!(
        "  {:<12} {:>6} {:>10} {:>12}",
        "bucket mean",
        "",
        pct(Some(r.bucket_mean_bbox)),
        pct(r.bucket_mean_interpupil)
    );
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, samples) = model_and_data(&a.model, &a.data, a.split)?;
    let (rows, report) = evaluate(&model, &samples, Template3D::standard().pupils)?;
    create_dir(&a.out_dir)?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r: &SampleEval| {
            format!("{},{},{},{}", r.id, fmt_sig9(r.yaw_deg), fmt_sig9(r.nme_bbox), opt(r.nme_interpupil))
        })
        .collect();
    write_csv(&a.out_dir.join("eval.csv"), "sample_id,yaw_deg,nme_bbox,nme_interpupil", &lines)?;
    write_csv(
        &a.out_dir.join("eval_summary.csv"),
        "group,count,nme_bbox,nme_interpupil",
        &summary_rows(&report),
    )?;
    print_report(model.variant, &report);
    Ok(())
}

fn cmd_introspect(a: IntrospectArgs) -> CmdResult {
    let (model, samples) = model_and_data(&a.model, &a.data, a.split)?;
    let stage = &model.stages[0];
    let layers = [
        ("representation", stage.representation.gate.is_learned()),
        ("regression", stage.regression.gate.is_learned()),
    ];
    if layers.iter().all(|(_, learned)| !learned) {
        return Err(Error::InvalidArgument(format!(
            "variant {} has no learned gate to introspect",
            model.variant
        ))
        .into());
    }
    let gates = samples
        .par_iter()
        .map(|s| {
            let t = model.predict(s)?;
            Ok((t.representation_gates[0].clone(), t.regression_gates[0].clone()))
        })
        .collect::<Result<Vec<(GateWeights, GateWeights)>, Error>>()?;
    create_dir(&a.out_dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, (rg, gg)) in samples.iter().zip(&gates) {
        let p = s.pose.ok_or(Error::MissingPose)?;
        let mut line = String::new();
        write!(
            line,
            "{},{},{},{},{},{},{}",
            s.id,
            fmt_sig9(p.yaw.to_degrees()),
            fmt_sig9(p.pitch.to_degrees()),
            fmt_sig9(p.roll.to_degrees()),
            rg.argmax() + 1,
            gg.argmax() + 1,
            fmt_sig9(rg.max())
        )
        .expect("string write");
        rows.push(line);
    }
    write_csv(
        &a.out_dir.join("clusters.csv"),
        "sample_id,yaw,pitch,roll,argmax_leaf_representation,argmax_leaf_regression,max_weight",
        &rows,
    )?;
    let mut usage_rows = Vec::new();
    for (i, (name, learned)) in layers.iter().enumerate() {
        if !learned {
            continue;
        }
        let g: Vec<GateWeights> = gates.iter().map(|p| if i == 0 { p.0.clone() } else { p.1.clone() }).collect();
        for (rank, v) in expert_usage(&g)?.iter().enumerate() {
            usage_rows.push(format!("{name},{},{}", rank + 1, fmt_sig9(*v)));
        }
    }
    write_csv(
        &a.out_dir.join("cumulative_usage.csv"),
        "layer,rank,mean_cumulative_weight",
        &usage_rows,
    )?;
    println!("wrote clusters.csv and cumulative_usage.csv to {}", a.out_dir.display());
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> CmdResult {
    let dims = match a.dims {
        Scale::Desk => Dims::desk(),
        Scale::Paper => Dims::paper(),
    };
    dims.validate()?;
    println!("variant,representation,representation_gate,regression,regression_gate,weights,biases,total");
    let mut totals = Vec::new();
    for v in Variant::ALL {
        let c = variant_param_count(v, &dims);
        let parts = [c.representation, c.representation_gate, c.regression, c.regression_gate];
        let weights: usize = parts.iter().map(|p| p.weights).sum();
        let biases: usize = parts.iter().map(|p| p.biases).sum();
        println!(
            "{},{},{},{},{},{weights},{biases},{}",
            v,
            c.representation.total(),
            c.representation_gate.total(),
            c.regression.total(),
            c.regression_gate.total(),
            c.total()
        );
        totals.push(c.total());
    }
    let lo = *totals.iter().min().expect("six variants") as f64;
    let hi = *totals.iter().max().expect("six variants") as f64;
    let base = variant_param_count(Variant::Baseline, &dims).total() as f64;
    eprintln!(
        "per stage; spread around baseline: {:+.2}% .. {:+.2}%",
        100.0 * (lo / base - 1.0),
        100.0 * (hi / base - 1.0)
    );
    Ok(())
}
