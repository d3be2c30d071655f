// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cloom_core::attribution::{export_graph, import_graph, trace_prompt, PruneConfig};
use cloom_core::features::{graph_scope, inject_curated, ActivationStore, Dataset, ScanConfig, Scope};
use cloom_core::intervention::{apply, DonorRun, InterventionPlan, WatchedFeature};
use cloom_core::rollout::{export_heatmaps, rollout, token_heatmaps, Geometry, RolloutConfig};
use cloom_core::transcoder::{evaluate_bank, harvest_pairs, load_bank, save_bank, train_bank, TcTrainConfig};
use cloom_core::vlm::data::{self, read_jsonl, read_split, DatasetManifest, ImageRecord, Split};
use cloom_core::vlm::{load_checkpoint, save_checkpoint, train_model, ImageGrid, ModelConfig, SyntheticSample, Task, TrainConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "cloom", version, about = "Circuit tracing for a toy vision-language model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic train/held-out dataset.
    MakeData(MakeData),
    /// Train the toy VLM.
    TrainModel(TrainModel),
    /// Train one transcoder per decoder MLP.
    TrainTc(TrainTc),
    /// Per-layer FVU and dead-latent table.
    EvalTc(EvalTc),
    /// Build an attribution graph for one prompt.
    Trace(Trace),
    /// Vision-encoder attention rollout heatmaps.
    Rollout(Rollout),
    /// Scan a dataset into a feature store.
    Features(Features),
    /// Apply an intervention plan and write a report.
    Intervene(Intervene),
    /// Run the workbench HTTP service.
    Serve(Serve),
}

#[derive(Args)]
struct MakeData {
    #[arg(long, default_value = "color,shape,count,addition")]
    tasks: String,
    /// Training samples.
    #[arg(long, default_value_t = 20000)]
    n: usize,
    /// Held-out samples; defaults to a tenth of `--n`.
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainModel {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTc {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    expansion: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on text-token activations only.
    #[arg(long)]
    text_only: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training curve as JSON lines; defaults next to `--out`.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct EvalTc {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "heldout")]
    split: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Trace {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Image JSON, sample JSON, or `file.jsonl:N`.
    #[arg(long)]
    image: String,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    node_threshold: f64,
    #[arg(long, default_value_t = 0.98)]
    edge_threshold: f64,
    /// Keep every node and edge.
    #[arg(long)]
    unpruned: bool,
}

#[derive(Args)]
struct Rollout {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: String,
    #[arg(long = "K", default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    #[arg(long, default_value_t = 1)]
    b: usize,
    /// Side of the square output maps; defaults to the patch grid.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Features {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Restrict the scan to this graph's features.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "heldout")]
    split: String,
    /// Curated `.jsonl` file or directory of them, merged into the store.
    #[arg(long)]
    inject: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Intervene {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Sample JSON or `file.jsonl:N`.
    #[arg(long)]
    input: String,
    #[arg(long)]
    plan: PathBuf,
    /// Donor sample for plans that copy activations.
    #[arg(long)]
    donor: Option<String>,
    /// JSON list of `{layer, feature, pos?}`.
    #[arg(long)]
    watch: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value = "cloom-serve.toml")]
    config: PathBuf,
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// `file.jsonl:N` or a JSON file holding one sample record.
fn load_sample(spec: &str) -> Result<SyntheticSample> {
    if let Some((file, idx)) = spec.rsplit_once(':') {
        if let Ok(i) = idx.parse::<usize>() {
            let all = read_jsonl(Path::new(file))?;
            return all.into_iter().nth(i).with_context(|| format!("{file} has no sample {i}"));
        }
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
    Ok(SyntheticSample::from_json_line(text.trim())?)
}

/// Like [`load_sample`], also accepting a bare image record.
fn load_image(spec: &str) -> Result<ImageGrid> {
    if let Ok(s) = load_sample(spec) {
        return Ok(s.image);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
    let rec: ImageRecord = serde_json::from_str(&text).context("not an image or sample record")?;
    Ok(rec.decode()?)
}

fn jsonl_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    out.sort();
    Ok(out)
}

fn make_data(a: MakeData) -> Result<()> {
    let tasks = Task::parse_list(&a.tasks)?;
    if a.n == 0 {
        bail!("--n must be positive");
    }
    let n_heldout = a.heldout.unwrap_or((a.n / 10).max(1));
    let grid = ModelConfig::default().patch_grid;
    let (train, heldout) = data::make_splits(&tasks, a.n, n_heldout, grid, a.seed)?;
    let manifest = DatasetManifest {
        tasks,
        seed: a.seed,
        grid,
        n_train: a.n,
        n_heldout,
    };
    data::write_dataset_dir(&a.out, &manifest, &train, &heldout)?;
    println!("wrote {} train and {} held-out samples to {}", a.n, n_heldout, a.out.display());
    Ok(())
}

fn train_model_cmd(a: TrainModel) -> Result<()> {
    let mut rc: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    let train = read_split(&a.data, Split::Train)?;
    let heldout = read_split(&a.data, Split::Heldout)?;
    let ck = train_model(rc.model, &train, &heldout, &rc.train)?;
    save_checkpoint(&ck, &a.out)?;
    for (task, acc) in &ck.meta.accuracy {
        println!("{task:>10}  {acc:.4}");
    }
    println!("saved {} ({})", a.out.display(), &ck.hash()?[..12]);
    Ok(())
}

fn train_tc_cmd(a: TrainTc) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut cfg = TcTrainConfig {
        k: a.k,
        expansion: a.expansion,
        text_only: a.text_only,
        ..TcTrainConfig::default()
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let train = read_split(&a.data, Split::Train)?;
    let heldout = read_split(&a.data, Split::Heldout)?;
    let bank = train_bank(&ck, &train, &heldout, &cfg)?;
    save_bank(&bank, &a.out)?;
    let stats = a.stats.unwrap_or_else(|| a.out.with_extension("stats.jsonl"));
    fs::write(&stats, bank.stats_jsonl()?)?;
    for s in &bank.stats {
        if let Some(p) = s.last() {
            println!("layer {}  fvu {:.4}  dead {:.2}%", s.layer, p.fvu, p.dead_pct.unwrap_or(0.0));
        }
    }
    println!("saved {} and {}", a.out.display(), stats.display());
    Ok(())
}

fn eval_tc_cmd(a: EvalTc) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let bank = load_bank(&a.bank)?;
    bank.check_matches(&ck.model)?;
    let samples = read_split(&a.data, a.split.parse()?)?;
    let pairs = harvest_pairs(&ck, &samples, false)?;
    let all = evaluate_bank(&bank, &pairs, None)?;
    let img = evaluate_bank(&bank, &pairs, Some(true))?;
    let txt = evaluate_bank(&bank, &pairs, Some(false))?;
    let rows: Vec<serde_json::Value> = (0..bank.n_layers())
        .map(|l| {
            let dead = bank.stats.get(l).and_then(|s| s.last()).and_then(|p| p.dead_pct);
            serde_json::json!({"layer": l, "fvu": all[l], "fvu_image": img[l], "fvu_text": txt[l], "dead_pct": dead})
        })
        .collect();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:>5}  {:>8}  {:>9}  {:>8}  {:>7}", "layer", "fvu", "fvu_image", "fvu_text", "dead%");
    for (l, r) in rows.iter().enumerate() {
        let dead = r["dead_pct"].as_f64().map_or("-".to_string(), |d| format!("{d:.2}"));
        println!("{l:>5}  {:>8.4}  {:>9.4}  {:>8.4}  {dead:>7}", all[l], img[l], txt[l]);
    }
    Ok(())
}

fn trace_cmd(a: Trace) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let bank = load_bank(&a.bank)?;
    let image = load_image(&a.image)?;
    let cfg = if a.unpruned {
        PruneConfig::unpruned()
    } else {
        PruneConfig {
            node_threshold: a.node_threshold,
            edge_threshold: a.edge_threshold,
            ..PruneConfig::default()
        }
    };
    let (g, _) = trace_prompt(&ck, &bank, &image, &a.prompt, &cfg)?;
    export_graph(&g, &a.out)?;
    println!(
        "{} nodes ({} features), {} edges; max residual {:.2e}; retained influence {:.3}",
        g.nodes.len(),
        g.n_features(),
        g.edges.len(),
        g.meta.additivity.max_rel_residual,
        g.meta.retained_influence
    );
    Ok(())
}

fn rollout_cmd(a: Rollout) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let image = load_image(&a.image)?;
    let tokens = cloom_core::vlm::vocab::encode_prompt("the color is")?;
    let (_, trace) = ck.model.forward(&image, &tokens, true)?;
    let trace = trace.context("forward pass returned no trace")?;
    let cfg = RolloutConfig {
        k: a.k,
        q: a.q,
        b: a.b,
        output: a.size.map(|s| (s, s)),
    };
    let r = rollout(&trace.vision, &cfg)?;
    let maps = token_heatmaps(&r.matrix, &Geometry::from_trace(&trace.vision), &cfg)?;
    let index = export_heatmaps(&maps, &a.out)?;
    println!("wrote {} heatmaps to {}; heads per layer {:?}", index.len(), a.out.display(), r.heads);
    Ok(())
}

fn features_cmd(a: Features) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let bank = load_bank(&a.bank)?;
    let existing = a.out.join(cloom_core::features::STORE_MANIFEST).exists();
    let mut store = if existing && a.data.is_none() {
        ActivationStore::load(&a.out)?
    } else {
        let scope = match &a.graph {
            Some(p) => graph_scope(&import_graph(p)?),
            None => Scope::All,
        };
        ActivationStore::new(&ck, &bank, scope, ScanConfig::default())?
    };
    if let Some(dir) = &a.data {
        let split: Split = a.split.parse()?;
        let file = dir.join(match split {
            Split::Train => data::TRAIN_FILE,
            Split::Heldout => data::HELDOUT_FILE,
        });
        let ds = Dataset::new(file.display().to_string(), read_jsonl(&file)?)?;
        store.scan_dataset(&ck, &bank, &ds)?;
    }
    if let Some(inj) = &a.inject {
        for f in jsonl_files(inj)? {
            let ds = Dataset::new(f.display().to_string(), read_jsonl(&f)?)?;
            inject_curated(&mut store, &ck, &bank, &ds)?;
        }
    }
    if store.manifest.datasets.is_empty() {
        bail!("nothing scanned: pass --data and/or --inject");
    }
    store.save(&a.out)?;
    println!(
        "{} features over {} samples ({} tokens) in {}",
        store.stats.len(),
        store.manifest.n_samples,
        store.manifest.n_tokens,
        a.out.display()
    );
    Ok(())
}

fn intervene_cmd(a: Intervene) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let bank = load_bank(&a.bank)?;
    let input = load_sample(&a.input)?;
    let plan = InterventionPlan::from_json(&fs::read_to_string(&a.plan)?)?;
    let donor = match &a.donor {
        Some(spec) => {
            let d = load_sample(spec)?;
            Some(DonorRun::capture(&ck.model, &bank, &d.image, &d.prompt)?)
        }
        None => None,
    };
    let watch: Vec<WatchedFeature> = match &a.watch {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let report = apply(&ck.model, &bank, &input.image, &input.prompt, &plan, donor.as_ref(), &watch)?;
    write_json(&a.out, &report)?;
    println!(
        "baseline {} ({:.3}) -> intervened {} ({:.3})",
        report.baseline.top[0].word, report.baseline.top[0].prob, report.intervened.top[0].word, report.intervened.top[0].prob
    );
    Ok(())
}

fn serve_cmd(a: Serve) -> Result<()> {
    let mut cfg = cloom_serve::ServeConfig::load(&a.config)?;
    if let Some(p) = a.port {
        cfg.port = p;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(cloom_serve::serve(cfg))?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::MakeData(a) => make_data(a),
        Cmd::TrainModel(a) => train_model_cmd(a),
        Cmd::TrainTc(a) => train_tc_cmd(a),
        Cmd::EvalTc(a) => eval_tc_cmd(a),
        Cmd::Trace(a) => trace_cmd(a),
        Cmd::Rollout(a) => rollout_cmd(a),
        Cmd::Features(a) => features_cmd(a),
        Cmd::Intervene(a) => intervene_cmd(a),
        Cmd::Serve(a) => serve_cmd(a),
    }
}
