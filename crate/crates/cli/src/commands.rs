use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tnet_core::attention::{attention_map, AttentionKind, MapStatus};
use tnet_core::gradcheck::{self, CheckConfig};
use tnet_core::mask::write_pgm_bytes;
use tnet_core::synth::{self, Sample, SynthSpec};
use tnet_core::trainer::{
    self, default_grid, AblationTable, EncoderCache, ExperimentSpec, Mode, RunRecord, RunStatus, Split,
    Supervision, Task,
};
use tnet_core::{checkpoint, tns, Metric, ShapeFamily, Tensor};

use crate::{
    AblationArgs, Cli, Command, EvalArgs, ExperimentArgs, Family, GenmapsArgs, GlobalArgs, GradcheckArgs, MapKind,
    MetricArg, ModeArg, SplitArg, SupervisionArg, SynthArgs, TaskArg, TrainArgs,
};

/// A failed command: usage errors exit with 1, runtime failures with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<tnet_core::Error> for Failure {
    fn from(e: tnet_core::Error) -> Self {
        match e {
            tnet_core::Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Defaults a `--config` file may supply; command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: SynthSpec,
    experiment: ExperimentSpec,
    threads: Option<usize>,
}

struct Context {
    workspace: PathBuf,
    seed: Option<u64>,
    config: FileConfig,
    threads: usize,
    force: bool,
    quiet: bool,
}

impl Context {
    fn new(g: GlobalArgs) -> Result<Self, Failure> {
        let config = match &g.config {
            Some(p) => {
                let path = resolve(&g.workspace, p);
                let text = fs::read_to_string(&path)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let threads = g.threads.or(config.threads).unwrap_or(1);
        if threads == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        Ok(Self {
            workspace: g.workspace,
            seed: g.seed,
            config,
            threads,
            force: g.force,
            quiet: g.quiet,
        })
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.workspace, p)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn resolve(workspace: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workspace.join(p)
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let ctx = Context::new(cli.global)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Genmaps(a) => cmd_genmaps(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablation(a) => cmd_ablation(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
    }
}

/// Refuses to write into a non-empty directory unless `--force` is given.
fn prepare_output(ctx: &Context, dir: &Path) -> CmdResult {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !ctx.force {
            return Err(Failure::Usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_synth(ctx: &Context, a: SynthArgs) -> CmdResult {
    let mut spec = ctx.config.synth.clone();
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(s) = a.size {
        spec.size = s;
    }
    if let Some(f) = a.family {
        spec.family = match f {
            Family::Ellipse => ShapeFamily::Ellipse,
            Family::Rectangle => ShapeFamily::Rectangle,
            Family::Blob => ShapeFamily::Blob,
        };
    }
    if let Some(r) = a.radius_min {
        spec.radius.0 = r;
    }
    if let Some(r) = a.radius_max {
        spec.radius.1 = r;
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    spec.validate()?;
    let out = ctx.path(&a.out);
    prepare_output(ctx, &out)?;
    let samples = synth::generate(&spec)?;
    synth::save_dataset(&out, &spec, &samples)?;
    ctx.progress(format!("wrote {} samples to {}", samples.len(), out.display()));
    Ok(())
}

/// Configuration echoed next to generated maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapsManifest {
    dataset: String,
    kind: AttentionKind,
    factor: usize,
    count: usize,
    /// Samples whose down-sampled mask had no foreground.
    empty: Vec<usize>,
}

fn map_file(index: usize) -> String {
    format!("{index:04}_map.tns")
}

fn load_dataset(ctx: &Context, dir: &Path) -> Result<(SynthSpec, Vec<Sample>), Failure> {
    let path = ctx.path(dir);
    if !path.join("spec.json").exists() {
        return Err(Failure::Usage(format!(
            "no dataset at {}; create one with `tnet synth`",
            path.display()
        )));
    }
    let (spec, samples) = synth::load_dataset(&path)?;
    if samples.is_empty() {
        return Err(Failure::Usage(format!("dataset {} is empty", path.display())));
    }
    Ok((spec, samples))
}

fn attention_kind(kind: MapKind, sigma: f64, metric: MetricArg) -> AttentionKind {
    match kind {
        MapKind::Shape => AttentionKind::Shape,
        MapKind::Contour => AttentionKind::Contour { sigma },
        MapKind::Center => AttentionKind::Center {
            metric: match metric {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Chebyshev => Metric::Chebyshev,
            },
        },
    }
}

fn cmd_genmaps(ctx: &Context, a: GenmapsArgs) -> CmdResult {
    let (_, samples) = load_dataset(ctx, &a.data)?;
    let kind = attention_kind(a.kind, a.sigma, a.metric);
    if a.sigma.is_nan() || a.sigma <= 0.0 {
        return Err(Failure::Usage(format!("--sigma {} must be positive", a.sigma)));
    }
    let maps = samples
        .iter()
        .map(|s| attention_map::<f32>(&s.mask, kind, a.factor))
        .collect::<tnet_core::Result<Vec<_>>>()?;
    let out = ctx.path(&a.out.clone().unwrap_or_else(|| Path::new("maps").join(kind.name())));
    prepare_output(ctx, &out)?;
    let mut empty = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        if map.status == MapStatus::EmptyForeground {
            empty.push(i);
        }
        tns::save(&map.to_tensor(), out.join(map_file(i)))?;
        if a.previews {
            let f = fs::File::create(out.join(format!("{i:04}_map.pgm")))?;
            write_pgm_bytes(BufWriter::new(f), map.width, map.height, &map.preview_bytes())?;
        }
    }
    let manifest = MapsManifest {
        dataset: a.data.display().to_string(),
        kind,
        factor: a.factor,
        count: samples.len(),
        empty,
    };
    write_json(&out.join("maps.json"), &manifest)?;
    ctx.progress(format!("wrote {} {} maps to {}", samples.len(), kind.name(), out.display()));
    Ok(())
}

fn apply_experiment_args(spec: &mut ExperimentSpec, a: &ExperimentArgs) {
    if let Some(e) = a.epochs {
        spec.encoder_epochs = e;
        spec.posterior_epochs = e;
    }
    if let Some(e) = a.encoder_epochs {
        spec.encoder_epochs = e;
    }
    if let Some(e) = a.posterior_epochs {
        spec.posterior_epochs = e;
    }
    if let Some(b) = a.batch_size {
        spec.batch_size = b;
    }
    if let Some(lr) = a.lr {
        spec.adam.lr = lr;
    }
}

fn task(t: TaskArg) -> Task {
    match t {
        TaskArg::Segmentation => Task::Segmentation,
        TaskArg::Localization => Task::Localization,
    }
}

/// Splits `samples` exactly as [`trainer::prepare_data`] does, returning
/// the sample indices of each side.
fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let all: Vec<usize> = (0..n).collect();
    Ok(synth::split(&all, fraction, seed)?)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn load_maps(ctx: &Context, dir: &Path, spec: &ExperimentSpec, count: usize) -> Result<Vec<Tensor<f32>>, Failure> {
    let kind = spec.attention_kind().expect("tnet mode has a supervision kind");
    let path = ctx.path(dir);
    let manifest_path = path.join("maps.json");
    if !manifest_path.exists() {
        return Err(Failure::Usage(format!(
            "tnet mode needs attention maps, but {} has none; run `tnet genmaps --kind {}` first",
            path.display(),
            kind.name()
        )));
    }
    let manifest: MapsManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.kind != kind || manifest.factor != spec.factor || manifest.count != count {
        return Err(Failure::Usage(format!(
            "maps in {} are {:?} at factor {} for {} samples, but the run needs {:?} at factor {} for {}; \
             regenerate them with `tnet genmaps`",
            path.display(),
            manifest.kind,
            manifest.factor,
            manifest.count,
            kind,
            spec.factor,
            count
        )));
    }
    (0..count)
        .map(|i| {
            let t: Tensor<f32> = tns::load(path.join(map_file(i)))?;
            let (h, w) = (t.shape()[1], t.shape()[2]);
            Ok(t.reshape(&[1, 1, h, w])?)
        })
        .collect()
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> CmdResult {
    let (data_spec, samples) = load_dataset(ctx, &a.data)?;
    let mut spec = ctx.config.experiment.clone();
    spec.data = data_spec;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if let Some(m) = a.mode {
        spec.mode = match m {
            ModeArg::Tnet => Mode::Tnet,
            ModeArg::Baseline => Mode::Baseline,
        };
    }
    match a.supervision {
        Some(s) => {
            spec.supervision = match s {
                SupervisionArg::Shape => Supervision::Shape,
                SupervisionArg::Contour => Supervision::Contour,
                SupervisionArg::Center => Supervision::Center,
                SupervisionArg::None => Supervision::None,
            }
        }
        None if spec.mode == Mode::Baseline => spec.supervision = Supervision::None,
        None => {}
    }
    if let Some(t) = a.task {
        spec.task = task(t);
    }
    apply_experiment_args(&mut spec, &a.experiment);
    spec.validate()?;

    let (train_idx, test_idx) = split_indices(samples.len(), spec.train_fraction, spec.data.seed)?;
    let data = Split {
        train: pick(&samples, &train_idx),
        test: pick(&samples, &test_idx),
    };
    let targets = match spec.mode {
        Mode::Tnet => {
            let dir = a.maps.clone().unwrap_or_else(|| Path::new("maps").join(spec.supervision.as_str()));
            Some(pick(&load_maps(ctx, &dir, &spec, samples.len())?, &train_idx))
        }
        Mode::Baseline => None,
    };

    ctx.progress(format!(
        "training {} on {} samples ({} test)",
        spec.label(),
        data.train.len(),
        data.test.len()
    ));
    let (record, model) =
        trainer::run_experiment(&spec, &data, targets.as_deref(), &mut EncoderCache::new(), ctx.threads)?;
    let out = ctx.path(&a.out.clone().unwrap_or_else(|| Path::new("runs").join(spec.label())));
    fs::create_dir_all(&out)?;
    if let Some(model) = &model {
        checkpoint::save(&out, &spec, model)?;
    }
    write_json(&out.join("record.json"), &record)?;
    trainer::append_record(&ctx.workspace.join("runs.jsonl"), &record)?;
    match &record.status {
        RunStatus::Completed => {
            if let Some(report) = &record.report {
                print!("{}", report.table());
            }
            ctx.progress(format!("checkpoint written to {}", out.display()));
            Ok(())
        }
        RunStatus::Diverged { epoch, loss } => Err(Failure::Runtime(format!(
            "training diverged at epoch {epoch} (loss {loss}); record written to {}",
            out.display()
        ))),
        RunStatus::Failed { message } => Err(Failure::Runtime(message.clone())),
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    dataset: String,
    split: &'a str,
    spec: &'a ExperimentSpec,
    report: &'a tnet_core::EvalReport,
}

fn cmd_eval(ctx: &Context, a: EvalArgs) -> CmdResult {
    let dir = ctx.path(&a.checkpoint);
    let (spec, model) = checkpoint::load(&dir)?;
    let (data_spec, samples) = load_dataset(ctx, &a.data)?;
    let (train_idx, test_idx) = split_indices(samples.len(), spec.train_fraction, data_spec.seed)
        .unwrap_or_else(|_| ((0..samples.len()).collect(), Vec::new()));
    let (name, chosen) = match a.split {
        SplitArg::Train => ("train", pick(&samples, &train_idx)),
        SplitArg::Test => ("test", pick(&samples, &test_idx)),
        SplitArg::All => ("all", samples),
    };
    if chosen.is_empty() {
        return Err(Failure::Usage(format!("the {name} split of the dataset is empty")));
    }
    let report = trainer::evaluate(&model, &chosen, spec.batch_size, ctx.threads)?;
    let output = EvalOutput {
        checkpoint: a.checkpoint.display().to_string(),
        dataset: a.data.display().to_string(),
        split: name,
        spec: &spec,
        report: &report,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&output)?);
    } else {
        print!("{}", report.table());
    }
    if let Some(path) = &a.out {
        write_json(&ctx.path(path), &output)?;
    }
    Ok(())
}

fn cmd_ablation(ctx: &Context, a: AblationArgs) -> CmdResult {
    let mut base = ctx.config.experiment.clone();
    if let Some(s) = ctx.seed {
        base.seed = s;
    }
    apply_experiment_args(&mut base, &a.experiment);
    let mut tasks: Vec<Task> = Vec::new();
    for t in a.tasks.iter().copied().map(task) {
        if !tasks.contains(&t) {
            tasks.push(t);
        }
    }
    let grid = default_grid(&base, &tasks);
    for spec in &grid {
        spec.validate()?;
    }
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out)?;
    write_json(&out.join("grid.json"), &grid)?;
    ctx.progress(format!("running {} ablation cells into {}", grid.len(), out.display()));
    let records = trainer::run_ablation(&grid, Some(&out), ctx.threads)?;
    let table = AblationTable::from_records(&records, &tasks);
    fs::write(out.join("summary.csv"), table.to_csv())?;
    fs::write(out.join("summary.txt"), table.to_text())?;
    print!("{}", table.to_text());
    let failed: Vec<&RunRecord> = records.iter().filter(|r| !r.is_completed()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        let labels: Vec<&str> = failed.iter().map(|r| r.label.as_str()).collect();
        Err(Failure::Runtime(format!("{} cell(s) failed: {}", failed.len(), labels.join(", "))))
    }
}

fn cmd_gradcheck(ctx: &Context, a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let config = CheckConfig {
        seeds: a.seeds,
        first_seed: ctx.seed.unwrap_or(0),
        inject_fault: a.inject_fault,
        ..CheckConfig::default()
    };
    let report = gradcheck::run(&config, a.filter.as_deref());
    if report.cases.is_empty() {
        return Err(Failure::Usage(format!(
            "no gradient check matches `{}`",
            a.filter.unwrap_or_default()
        )));
    }
    print!("{}", report.table());
    if let Some(path) = &a.out {
        write_json(&ctx.path(path), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}
