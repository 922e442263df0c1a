use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use acenet_core::config::RunConfig;
use acenet_core::data::{
    load_case, load_cases, load_raw_volume, load_volume, normalize_intensity, save_case, save_raw_volume,
    stack_input, synth_phantom, LabeledCase, Volume, LABELS_FILE, MASK_FILE,
};
use acenet_core::eval::{
    build_report, compare_reports, emit_report, export_attention, segment_volume, write_comparisons, StructureReport,
};
use acenet_core::gradcheck::{model_check, op_suite, CheckOutcome};
use acenet_core::train::{init_stage2, run_training, Checkpoint, Stage, TrainObserver};
use acenet_core::{build_model, count_params, AcenetConfig, Error, Variant};

#[derive(Parser)]
#[command(name = "acenet", version, about = "Brain-structure segmentation on slice stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    E2e,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled phantoms as raw volumes, one directory per case.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// Edge length of the cubic volume.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of foreground structures (labels 1..=n).
        #[arg(long, default_value_t = 4)]
        structures: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Train a model; writes the resolved config, checkpoint and loss history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override one config key, e.g. `train.epochs=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Segment one volume (raw header or .nii).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction directory (labels.toml, optional mask.toml) or a root of them.
        #[arg(long)]
        pred: PathBuf,
        /// Case directory or a root of case directories.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Second prediction set for paired Wilcoxon tests.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        full: bool,
    },
    /// Parameter counts of the seven architecture variants.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export per-block attention maps of one slice as PGM images.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Training(_) | Error::Diverged { .. }) => 3,
            Failure::Core(_) => 2,
            Failure::Gradcheck(_) => 3,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Gradcheck(m) => m.clone(),
                Failure::Core(e) => e.to_string(),
            };
            eprintln!("acenet: {}", msg.lines().next().unwrap_or(""));
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Synth {
            seed,
            out,
            cases,
            size,
            structures,
            noise,
        } => synth(seed, &out, cases, size, structures, noise),
        Command::Train {
            config,
            data,
            validation,
            out,
            stage,
            init,
            overrides,
        } => train(config, data, validation, out, stage, init, overrides),
        Command::Infer { ckpt, volume, out } => infer(&ckpt, &volume, &out),
        Command::Eval {
            pred,
            truth,
            report,
            compare,
        } => eval(&pred, &truth, &report, compare.as_deref()),
        Command::Gradcheck { full } => gradcheck(full),
        Command::Params { config } => params(config.as_deref()),
        Command::DumpAttn {
            ckpt,
            volume,
            slice,
            out_dir,
        } => dump_attn(&ckpt, &volume, slice, &out_dir),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(seed: u64, out: &Path, cases: usize, size: usize, structures: usize, noise: f64) -> CmdResult {
    if cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    for i in 0..cases {
        let case = synth_phantom(seed.wrapping_add(i as u64), [size; 3], structures, noise)?;
        let dir = out.join(format!("case_{i:03}"));
        save_case(&case, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

struct Progress(Instant);

impl TrainObserver for Progress {
    fn on_epoch(&mut self, epoch: usize, mean_loss: f64, val_dice: Option<f64>) {
        let val = val_dice.map(|d| format!(" val_dice {d:.4}")).unwrap_or_default();
        eprintln!("epoch {epoch:4} loss {mean_loss:.6}{val} ({:.0}s)", self.0.elapsed().as_secs_f64());
    }
}

fn cases_of(dir: &Path) -> Result<Vec<LabeledCase>, Failure> {
    Ok(load_cases(dir)?.into_iter().map(|(_, c)| c).collect())
}

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    validation: Option<PathBuf>,
    out: Option<PathBuf>,
    stage: Option<StageArg>,
    init: Option<PathBuf>,
    mut overrides: Vec<String>,
) -> CmdResult {
    let base = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let quote = |p: &Path| format!("'{}'", p.display().to_string().replace('\\', "\\\\").replace('\'', "\\'"));
    let mut flags = Vec::new();
    if let Some(d) = &data {
        flags.push(format!("paths.data={}", quote(d)));
    }
    if let Some(v) = &validation {
        flags.push(format!("paths.validation={}", quote(v)));
    }
    if let Some(o) = &out {
        flags.push(format!("paths.out={}", quote(o)));
    }
    match stage {
        Some(StageArg::One) => flags.extend(["train.stage='stage1'".into(), "model.skull_module=false".into()]),
        Some(StageArg::Two) => flags.extend(["train.stage='stage2'".into(), "model.skull_module=true".into()]),
        Some(StageArg::E2e) => flags.push("train.stage='end_to_end'".into()),
        None => {}
    }
    flags.append(&mut overrides);
    let cfg = base.with_overrides(&flags)?;

    let data_dir = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set paths.data".into()))?;
    let out_dir = PathBuf::from(
        cfg.paths
            .out
            .clone()
            .ok_or_else(|| Failure::Usage("no output directory: pass --out or set paths.out".into()))?,
    );
    let mut model = match (cfg.train.stage, &init) {
        (Stage::Stage2, Some(p)) => init_stage2(&Checkpoint::load(p)?, &cfg.model, cfg.train.seed)?,
        (Stage::Stage2, None) => return Err(Failure::Usage("stage 2 needs --init <stage-1 checkpoint>".into())),
        (_, Some(_)) => return Err(Failure::Usage("--init is only used by stage 2".into())),
        (_, None) => build_model(&cfg.model, cfg.train.seed)?,
    };
    let cases = cases_of(Path::new(&data_dir))?;
    let val = cfg.paths.validation.as_deref().map(|v| cases_of(Path::new(v))).transpose()?;

    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let resolved = out_dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(io_err(&resolved))?;

    let mut progress = Progress(Instant::now());
    let ck = match run_training(&mut model, &cases, val.as_deref(), &cfg.train, &mut progress) {
        Ok(ck) => ck,
        Err(Error::Diverged { iter, loss, last_good }) => {
            let path = out_dir.join("last_good.bin");
            last_good.save(&path)?;
            return Err(Failure::Core(Error::Training(format!(
                "diverged at iteration {iter} (loss {loss}); last good state in {}",
                path.display()
            ))));
        }
        Err(e) => return Err(e.into()),
    };
    ck.save(&out_dir.join("checkpoint.bin"))?;
    write_loss_history(&ck, &out_dir.join("loss_history.csv"))?;
    println!("{}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn write_loss_history(ck: &Checkpoint, path: &Path) -> CmdResult {
    let mut text = String::from("epoch,loss,val_dice\n");
    for (i, loss) in ck.loss_history.iter().enumerate() {
        let val = ck.val_history.get(i).map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(text, "{i},{loss:?},{val}");
    }
    fs::write(path, text).map_err(io_err(path))
}

fn infer(ckpt: &Path, volume: &Path, out: &Path) -> CmdResult {
    let model = Checkpoint::load(ckpt)?.into_model()?;
    let vol = load_volume(volume)?;
    let seg = segment_volume(&model, &vol)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    save_raw_volume(&seg.labels, &out.join(LABELS_FILE))?;
    save_raw_volume(&seg.brain_mask, &out.join(MASK_FILE))?;
    println!("{}", out.display());
    Ok(())
}

/// Predicted labels and, when present, the predicted brain mask.
fn load_prediction(dir: &Path) -> Result<(Volume, Option<Volume>), Failure> {
    let labels = load_raw_volume(&dir.join(LABELS_FILE))?;
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.is_file() { Some(load_raw_volume(&mask_path)?) } else { None };
    Ok((labels, mask))
}

fn max_label(v: &Volume) -> Result<usize, Failure> {
    Ok(v.labels()?.into_iter().max().unwrap_or(0))
}

fn score(pred_dir: &Path, truth: &LabeledCase) -> Result<StructureReport, Failure> {
    let (labels, mask) = load_prediction(pred_dir)?;
    let top = max_label(&truth.labels)?.max(max_label(&labels)?);
    let structures: Vec<usize> = (1..=top).collect();
    let masks = mask.as_ref().map(|m| (m, &truth.brain_mask));
    Ok(build_report(&labels, &truth.labels, &structures, masks)?)
}

fn eval(pred: &Path, truth: &Path, report: &Path, compare: Option<&Path>) -> CmdResult {
    let single = truth.join(LABELS_FILE).is_file();
    let truths: Vec<(String, LabeledCase)> = if single {
        vec![(String::new(), load_case(truth)?)]
    } else {
        load_cases(truth)?
    };
    let dir_of = |root: &Path, name: &str| if single { root.to_path_buf() } else { root.join(name) };
    let mut reports = Vec::with_capacity(truths.len());
    let mut others = Vec::new();
    for (name, case) in &truths {
        reports.push(score(&dir_of(pred, name), case)?);
        if let Some(c) = compare {
            others.push(score(&dir_of(c, name), case)?);
        }
    }
    let comparisons = compare_reports(&reports, compare.map(|_| others.as_slice()))?;
    if single {
        emit_report(&reports[0], Some(&comparisons), report)?;
    } else {
        let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for ((name, _), r) in truths.iter().zip(&reports) {
            emit_report(r, None, &report.with_file_name(format!("{stem}.{name}.csv")))?;
        }
        write_comparisons(&comparisons, &report.with_extension("json"))?;
    }
    println!("{}", report.with_extension("json").display());
    Ok(())
}

fn gradcheck(full: bool) -> CmdResult {
    let mut outcomes: Vec<CheckOutcome> = op_suite()?;
    outcomes.push(model_check(if full { 16 } else { 2 })?);
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!("{:28} {:>4}  max rel err {:.3e} < {:.0e} ({} probes)", o.name, verdict, o.max_rel_err, o.tolerance, o.comparisons);
        if !o.passed() {
            failed.push(o.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn params(config: Option<&Path>) -> CmdResult {
    let base: AcenetConfig = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => AcenetConfig::default(),
    };
    println!("variant,params");
    for v in Variant::ALL {
        println!("{},{}", v.label(), count_params(&v.apply(&base)));
    }
    Ok(())
}

fn dump_attn(ckpt: &Path, volume: &Path, slice: usize, out_dir: &Path) -> CmdResult {
    let model = Checkpoint::load(ckpt)?.into_model()?;
    let vol = normalize_intensity(&load_volume(volume)?);
    let (input, _) = stack_input(&vol, slice, model.config.s)?;
    let (paths, _) = export_attention(&model, &input, out_dir)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
