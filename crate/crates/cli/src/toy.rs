use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rpfem_core::rpkg::load_rpkg;
use rpfem_core::tensor::checkpoint;
use rpfem_core::tensor::rng::SeedStream;
use rpfem_core::toy::{
    config_hash, evaluate, final_metrics, fmt_f64, generate_corpus, generate_scenes,
    merge_ablation_csv, metrics_csv, run_ablation, standard_grid, timings_csv, Metrics,
    ModelConfig, ToyModel, ToyTaskSpec, TrainConfig,
};
use rpfem_core::Rpkg64;
use serde::{Deserialize, Serialize};

use crate::{create_dir, parse_relations, require_paths, write_file, Internal, TaskArgs};

#[derive(Args)]
pub struct GenerateArgs {
    /// Directory receiving annotations.jsonl, labelmap.json and embeddings.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    task: TaskArgs,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    if a.images == 0 {
        bail!("--images must be positive");
    }
    let spec = a.task.spec();
    let g = generate_corpus(&spec, a.images, SeedStream::new(a.seed))?;
    create_dir(&a.out)?;
    write_file(&a.out.join("annotations.jsonl"), &g.annotations)?;
    write_file(&a.out.join("labelmap.json"), &g.labelmap)?;
    write_file(&a.out.join("embeddings.json"), &g.embeddings)?;
    println!("wrote {} images to {}", a.images, a.out.display());
    Ok(())
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Attention, value, edge and adjacency widths as "d_a,d_v,F_e,F_a";
    /// each defaults to the feature width.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long, default_value = "cooccurrence,orientation,distance")]
    relations: String,
}

impl ModelArgs {
    fn config(&self, spec: &ToyTaskSpec, baseline: bool) -> Result<ModelConfig> {
        let mut m = ModelConfig::enhanced(spec.feature_width);
        m.baseline = baseline;
        m.heads = self.heads;
        m.layers = self.layers;
        m.relations = parse_relations(&self.relations)?;
        if let Some(d) = &self.dims {
            let dims: Vec<usize> = d
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .ok()
                .filter(|v: &Vec<usize>| v.len() == 4 && v.iter().all(|&x| x > 0))
                .with_context(|| format!("--dims expects four positive integers, got {d:?}"))?;
            (m.attn_width, m.value_width, m.edge_width, m.adj_width) =
                (dims[0], dims[1], dims[2], dims[3]);
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args, Clone)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Scenes per training step.
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    eval_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().eval_scenes)]
    eval_scenes: usize,
}

impl TrainingArgs {
    fn config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_scenes: self.eval_scenes,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Prior graph; required unless --baseline.
    #[arg(long)]
    rpkg: Option<PathBuf>,
    /// Train the classifier on proposal features alone.
    #[arg(long)]
    baseline: bool,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    task: TaskArgs,
}

/// `config.json` of a run directory.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    config_hash: String,
    spec: ToyTaskSpec,
    model: ModelConfig,
    train: TrainConfig,
}

fn load_graph(path: Option<&Path>, baseline: bool) -> Result<Option<Rpkg64>> {
    match path {
        _ if baseline => Ok(None),
        Some(p) => {
            require_paths([("rpkg", p)])?;
            Ok(Some(load_rpkg(p)?))
        }
        None => bail!("--rpkg is required unless --baseline is given"),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let spec = a.task.spec();
    let model = a.model.config(&spec, a.baseline)?;
    let config = a.training.config()?;
    let rpkg = load_graph(a.rpkg.as_deref(), a.baseline)?;
    let hash = config_hash(&spec, &model, &config, rpkg.as_ref())?;
    let dir = a.out.join(&hash);
    if dir.join("summary.json").exists() {
        println!("cached run {hash}, nothing to train");
        println!("{}", dir.display());
        return Ok(());
    }

    let (trained, log) =
        rpfem_core::toy::train(&spec, rpkg.as_ref(), &model, &config).map_err(|e| match e {
            rpfem_core::Error::Divergence { .. } => anyhow::Error::new(Internal(e.to_string())),
            e => e.into(),
        })?;
    let summary = final_metrics(&log).expect("last step is evaluated");

    create_dir(&dir)?;
    let record = RunRecord {
        config_hash: hash.clone(),
        spec,
        model,
        train: config,
    };
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&log))?;
    checkpoint::save(trained.store(), &dir.join("model.json"))?;
    // written last: its presence marks a complete run
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;

    println!(
        "run {hash}: overall_acc {}, ambiguous_acc {}",
        fmt_f64(summary.overall_acc),
        opt(summary.ambiguous_acc)
    );
    println!("{}", dir.display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_paths([("run file", path)])?;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

#[derive(Args)]
pub struct EvalArgs {
    /// Run directory written by train-toy.
    #[arg(long)]
    run: PathBuf,
    /// The prior graph the run was trained with (enhanced runs only).
    #[arg(long)]
    rpkg: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().eval_scenes)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    require_paths([("run directory", a.run.as_path())])?;
    if a.scenes == 0 {
        bail!("--scenes must be positive");
    }
    let rec: RunRecord = read_json(&a.run.join("config.json"))?;
    let rpkg = load_graph(a.rpkg.as_deref(), rec.model.baseline)?;
    if config_hash(&rec.spec, &rec.model, &rec.train, rpkg.as_ref())? != rec.config_hash {
        bail!(
            "{} does not match the configuration this run was trained with",
            a.rpkg
                .as_deref()
                .map_or("the run".into(), |p| p.display().to_string())
        );
    }
    let selected = match &rpkg {
        Some(g) => Some(g.select_relations(&rec.model.relations)?),
        None => None,
    };
    let mut model = ToyModel::new(
        &rec.model,
        rec.spec.num_classes,
        rec.spec.feature_width,
        selected.as_ref(),
        SeedStream::new(rec.train.seed),
    )?;
    model
        .store_mut()
        .copy_from(&checkpoint::load(&a.run.join("model.json"))?)?;
    let scenes = generate_scenes(
        &rec.spec,
        SeedStream::new(a.seed).split("eval-toy"),
        a.scenes,
    );
    let metrics = evaluate(&model, selected.as_ref(), &scenes)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    write_file(
        &a.run
            .join(format!("eval-seed{}-scenes{}.json", a.seed, a.scenes)),
        &json,
    )?;
    println!("{json}");
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Run directory of the context-free model.
    #[arg(long)]
    baseline: PathBuf,
    /// Run directory of the enhanced model.
    #[arg(long)]
    enhanced: PathBuf,
    /// Also write the comparison to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

const COMPARE_HEADER: &str = "baseline_hash,enhanced_hash,baseline_overall_acc,enhanced_overall_acc,overall_gain,baseline_ambiguous_acc,enhanced_ambiguous_acc,ambiguous_gain,baseline_duplicate_detection_rate,enhanced_duplicate_detection_rate";

pub fn compare(a: CompareArgs) -> Result<()> {
    require_paths([
        ("baseline run", a.baseline.as_path()),
        ("enhanced run", a.enhanced.as_path()),
    ])?;
    let rb: RunRecord = read_json(&a.baseline.join("config.json"))?;
    let re: RunRecord = read_json(&a.enhanced.join("config.json"))?;
    if !rb.model.baseline || re.model.baseline {
        bail!("--baseline must name a baseline run and --enhanced an enhanced one");
    }
    if rb.spec != re.spec || rb.train != re.train {
        bail!("runs are not paired: task or training settings differ");
    }
    let mb: Metrics = read_json(&a.baseline.join("summary.json"))?;
    let me: Metrics = read_json(&a.enhanced.join("summary.json"))?;
    let gain = |e: Option<f64>, b: Option<f64>| e.zip(b).map(|(e, b)| e - b);
    let mut out = format!("{COMPARE_HEADER}\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        rb.config_hash,
        re.config_hash,
        fmt_f64(mb.overall_acc),
        fmt_f64(me.overall_acc),
        fmt_f64(me.overall_acc - mb.overall_acc),
        opt(mb.ambiguous_acc),
        opt(me.ambiguous_acc),
        opt(gain(me.ambiguous_acc, mb.ambiguous_acc)),
        opt(mb.duplicate_detection_rate),
        opt(me.duplicate_detection_rate),
    );
    if let Some(p) = &a.out {
        write_file(p, &out)?;
    }
    print!("{out}");
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    rpkg: PathBuf,
    /// Directory holding ablation.csv and ablation_timings.csv.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    task: TaskArgs,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    require_paths([("rpkg", a.rpkg.as_path())])?;
    let spec = a.task.spec();
    let base = a.model.config(&spec, false)?;
    let config = a.training.config()?;
    let rpkg: Rpkg64 = load_rpkg(&a.rpkg)?;
    let rows = run_ablation(&standard_grid(&base), &spec, &rpkg, &config).map_err(|e| match e {
        rpfem_core::Error::Divergence { .. } => anyhow::Error::new(Internal(e.to_string())),
        e => e.into(),
    })?;
    create_dir(&a.out)?;
    let table = a.out.join("ablation.csv");
    let existing = match std::fs::read_to_string(&table) {
        Ok(t) => Some(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => bail!("cannot read {}: {e}", table.display()),
    };
    let merged = merge_ablation_csv(existing.as_deref(), &rows)?;
    write_file(&table, &merged)?;
    write_file(&a.out.join("ablation_timings.csv"), timings_csv(&rows))?;
    print!("{merged}");
    Ok(())
}
