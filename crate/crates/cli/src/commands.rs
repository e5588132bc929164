use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use rbvl::checkpoint::{load_checkpoint, save_checkpoint};
use rbvl::corpus::{generate, load_corpus, save_corpus, Corpus, GeneratorConfig, Modality, SplitName};
use rbvl::experiments::{
    ablation_variants, imbalance_probe, metric_variants, run_matrix, sweep_variants, ComparisonTable, RunOutcome, Variant, Workbench,
};
use rbvl::metrics::{EvalContext, LambdaSummary, MetricsReport};
use rbvl::models::{pretrain_teacher, TeacherConfig, TeacherModel};
use rbvl::train::{run_steps, RunState, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Command, GenerateArgs, MatrixArgs, ParamSweepArgs, ProbeArgs, TeacherArgs, TrainFlags};

const IMAGE_TEACHER: &str = "image_teacher.json";
const TEXT_TEACHER: &str = "text_teacher.json";
const TEACHER_CONFIG: &str = "teacher_config.json";

/// Caps the global rayon pool at `RBVL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RBVL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("RBVL_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn dispatch(command: Command) -> Result<()> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (name, out) = match command {
        Command::Generate(a) => ("generate", cmd_generate(a)?),
        Command::PretrainTeachers(a) => ("pretrain-teachers", cmd_pretrain_teachers(a)?),
        Command::Train(a) => ("train", cmd_train(a.train)?),
        Command::Eval(a) => ("eval", cmd_eval(&a.checkpoint, &a.corpus, &a.out)?),
        Command::Ablate(a) => ("ablate", cmd_matrix(a, "Ablation", ablation_variants)?),
        Command::MetricSweep(a) => ("metric-sweep", cmd_matrix(a, "Structure metric", metric_variants)?),
        Command::ParamSweep(a) => ("param-sweep", cmd_param_sweep(a)?),
        Command::ImbalanceProbe(a) => ("imbalance-probe", cmd_imbalance_probe(a)?),
    };
    write_run_meta(&out, name, started, clock.elapsed().as_secs_f64())
}

/// Timestamps live only here so every other output is byte-reproducible.
fn write_run_meta(out: &Path, command: &str, started: SystemTime, elapsed: f64) -> Result<()> {
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let meta = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": unix(started),
        "elapsed_secs": elapsed,
        "threads": rayon::current_num_threads(),
    });
    write_json(&out.join("run_meta.json"), &meta)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Overlays the JSON object in `path` onto `base`, recursing into nested
/// objects so a file can override a single field of `dims`.
fn layered<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let overlay: Value = read_json(path)?;
    if !overlay.is_object() {
        bail!("{} must hold a JSON object", path.display());
    }
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, overlay);
    serde_json::from_value(merged).with_context(|| format!("applying {}", path.display()))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<PathBuf> {
    let base = match a.preset.to_ascii_lowercase().as_str() {
        "imbalanced" => GeneratorConfig::imbalanced(2000, 0),
        "balanced" => GeneratorConfig::balanced(2000, 0),
        other => bail!("unknown preset {other:?} (imbalanced or balanced)"),
    };
    let mut cfg = layered(base, a.config.as_deref())?;
    if let Some(n) = a.n_instances {
        cfg.n_instances = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = generate(&cfg)?;
    save_corpus(&corpus, &a.out)?;
    println!("wrote {} instances to {}", corpus.instances.len(), a.out.display());
    Ok(a.out)
}

fn cmd_pretrain_teachers(a: TeacherArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus)?;
    let mut cfg = layered(TeacherConfig::default(), a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (image, text) = rayon::join(
        || pretrain_teacher(&corpus, Modality::Image, &cfg),
        || pretrain_teacher(&corpus, Modality::Text, &cfg),
    );
    let (image, text) = (image?, text?);
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(IMAGE_TEACHER), &image)?;
    write_json(&a.out.join(TEXT_TEACHER), &text)?;
    write_json(&a.out.join(TEACHER_CONFIG), &cfg)?;
    println!("image teacher {}", image.param_hash());
    println!("text teacher {}", text.param_hash());
    Ok(a.out)
}

fn load_bench(corpus: &Path, teachers: &Path) -> Result<Workbench> {
    let corpus = load_corpus(corpus)?;
    let image: TeacherModel = read_json(&teachers.join(IMAGE_TEACHER))?;
    let text: TeacherModel = read_json(&teachers.join(TEXT_TEACHER))?;
    Ok(Workbench::new(corpus, image, text)?)
}

fn train_config(f: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = layered(TrainConfig::default(), f.config.as_deref())?;
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(m) = f.metric {
        cfg.metric = m;
    }
    if let Some(a) = f.ablate {
        cfg.ablations = a;
    }
    if let Some(e) = f.epochs {
        cfg.epochs = e;
    }
    if let Some(j) = f.batch_size {
        cfg.batch_size = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(state: &RunState, config: &TrainConfig, eval: &EvalContext, corpus: &Corpus) -> Result<MetricsReport> {
    let results = eval.evaluate_model(&state.model, corpus, &[Modality::Image, Modality::Text])?;
    Ok(MetricsReport::new(
        results,
        &config.hash(),
        config.seed,
        "test",
        LambdaSummary::from_trajectory(&state.lambda_trajectory),
    )?)
}

fn cmd_train(f: TrainFlags) -> Result<PathBuf> {
    let cfg = train_config(&f)?;
    let bench = load_bench(&f.corpus, &f.teachers)?;
    let mut state = RunState::new(&cfg)?;
    let mut log = Vec::new();
    run_steps(&mut state, &bench.corpus, &bench.cache, &cfg, None, Some(&mut log))?;

    fs::create_dir_all(&f.out)?;
    fs::write(f.out.join("train_log.jsonl"), log)?;
    write_json(&f.out.join("train_config.json"), &cfg)?;
    save_checkpoint(&state, &cfg, &f.out.join("checkpoint.rbvc"))?;
    let r = report(&state, &cfg, &bench.eval, &bench.corpus)?;
    r.write(&f.out)?;
    print!("{}", r.to_markdown());
    Ok(f.out)
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<PathBuf> {
    let (state, cfg) = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    let eval = EvalContext::new(&corpus, SplitName::Test)?;
    let r = report(&state, &cfg, &eval, &corpus)?;
    r.write(out)?;
    print!("{}", r.to_markdown());
    Ok(out.to_path_buf())
}

/// One line per run so every table cell traces back to a config hash and seed.
fn runs_csv(runs: &[RunOutcome]) -> String {
    let mut s = String::from("variant,seed,config_hash,final_lambda,final_loss\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.label, r.seed, r.config_hash, r.final_lambda, r.final_loss);
    }
    s
}

fn write_table(out: &Path, table: &ComparisonTable, runs: &[RunOutcome]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("table.json"), table)?;
    fs::write(out.join("table.csv"), table.to_csv())?;
    fs::write(out.join("table.md"), table.to_markdown())?;
    if !runs.is_empty() {
        fs::write(out.join("runs.csv"), runs_csv(runs))?;
    }
    print!("{}", table.to_markdown());
    Ok(())
}

fn run_variants(m: &MatrixArgs, title: &str, variants: &[Variant], base: &TrainConfig) -> Result<PathBuf> {
    let bench = load_bench(&m.train.corpus, &m.train.teachers)?;
    let (table, runs) = run_matrix(&bench, title, variants, base.seed, m.seeds)?;
    write_table(&m.train.out, &table, &runs)?;
    Ok(m.train.out.clone())
}

fn cmd_matrix(m: MatrixArgs, title: &str, make: fn(&TrainConfig) -> Vec<Variant>) -> Result<PathBuf> {
    let base = train_config(&m.train)?;
    run_variants(&m, title, &make(&base), &base)
}

fn cmd_param_sweep(a: ParamSweepArgs) -> Result<PathBuf> {
    let base = train_config(&a.matrix.train)?;
    let values = if a.values.is_empty() { a.axis.default_values() } else { a.values };
    let variants = sweep_variants(&base, a.axis, &values)?;
    run_variants(&a.matrix, &format!("{:?} sweep", a.axis), &variants, &base)
}

fn cmd_imbalance_probe(a: ProbeArgs) -> Result<PathBuf> {
    let bench = load_bench(&a.corpus, &a.teachers)?;
    let stored = a.teachers.join(TEACHER_CONFIG);
    let base = if stored.exists() { read_json(&stored)? } else { TeacherConfig::default() };
    let mut cfg = layered(base, a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let table = imbalance_probe(&bench, &cfg, cfg.seed, a.seeds)?;
    write_table(&a.out, &table, &[])?;
    Ok(a.out)
}
