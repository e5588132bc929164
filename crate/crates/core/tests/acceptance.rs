//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A failing criterion is
//! reported but only fails the process when `RBVL_ACCEPTANCE_STRICT=1`, so
//! the directional experiments can be inspected without breaking the suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbvl::autodiff::gradcheck;
use rbvl::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use rbvl::corpus::{generate, GeneratorConfig, Modality};
use rbvl::experiments::{run_matrix, run_seed, Variant, Workbench};
use rbvl::losses::{
    fuse_teachers, itc_loss, itm_loss, relational_matrix, repr_distill_loss, sa_loss, sa_loss_value,
    itc_probabilities, sample_itm_negatives, total_loss, Ablations, Batch, LambdaMode, LossConfig, LossName, Metric,
    Role, SimilarityMatrix, Source,
};
use rbvl::metrics::{
    ndcg_summary, recall_at_k, rouge_l, tokenize, IndexEntry, RelevanceMatrix, RetrievalIndex, Task,
};
use rbvl::models::{ModelDims, StudentModel, StudentVars, TeacherConfig};
use rbvl::train::{run_steps, train_run, RunState, TrainConfig};
use rbvl::{Tape, Tensor};

type Outcome = rbvl::Result<(bool, String)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng(seed)).normalize_rows().unwrap()
}

// ---------------------------------------------------------------- criterion 1

const GRAD_TOL: f64 = 1e-4;

/// (J, d, seed): every J ∈ {2,4,8} with d ∈ {8,16}, four seeds each.
fn grad_configs() -> Vec<(usize, usize, u64)> {
    let mut v = Vec::new();
    for j in [2, 4, 8] {
        for d in [8, 16] {
            for s in 0..4 {
                v.push((j, d, 1000 * j as u64 + 10 * d as u64 + s));
            }
        }
    }
    v
}

fn tiny_dims(d: usize) -> ModelDims {
    ModelDims {
        d_feat: 4,
        d,
        d_proj: 4,
        heads: 2,
    }
}

const L_I: usize = 3;
const L_T: usize = 2;

fn tiny_batch(j: usize, seed: u64) -> Batch {
    let mut r = rng(seed ^ 0xBA7C);
    Batch {
        ids: (0..j).collect(),
        image_feats: Tensor::randn(&[j * L_I, 4], 1.0, &mut r),
        text_feats: Tensor::randn(&[j * L_T, 4], 1.0, &mut r),
        teacher_image: unit_rows(j, 4, seed + 1),
        teacher_text: unit_rows(j, 4, seed + 2),
    }
}

/// Model parameters with a non-trivial λ so its gradient is exercised away
/// from the symmetric point.
fn tiny_model(d: usize, seed: u64) -> StudentModel {
    let mut m = StudentModel::init(tiny_dims(d), seed).unwrap();
    m.lambda_logit = Tensor::scalar(rng(seed).random_range(-1.5..1.5)).unwrap();
    m
}

fn model_inputs(m: &StudentModel) -> Vec<Tensor> {
    m.params().into_iter().cloned().collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let configs = grad_configs();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut note = |name: &str, err: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(err),
        None => worst.push((name.to_string(), err)),
    };

    for &(j, d, seed) in &configs {
        let mut r = rng(seed);
        let a = Tensor::randn(&[j, d], 1.0, &mut r);
        let b = Tensor::randn(&[j, d], 1.0, &mut r);
        note("itc", gradcheck::check(|t, v| Ok(itc_loss(t, v[0], v[1], 0.1)?.loss), &[a.clone(), b.clone()])?);

        let teacher_i = unit_rows(j, d, seed + 5);
        let teacher_t = unit_rows(j, d, seed + 6);
        note(
            "iic",
            gradcheck::check(
                |t, v| {
                    let k = t.constant(teacher_i.clone());
                    repr_distill_loss(t, v[0], k, 0.1)
                },
                std::slice::from_ref(&a),
            )?,
        );
        note(
            "ttc",
            gradcheck::check(
                |t, v| {
                    let k = t.constant(teacher_t.clone());
                    repr_distill_loss(t, v[0], k, 0.1)
                },
                std::slice::from_ref(&b),
            )?,
        );

        let s_i = relational_matrix(&teacher_i, Role::SI, Source::Teacher)?.values;
        let s_t = relational_matrix(&teacher_t, Role::ST, Source::Teacher)?.values;
        let logit = Tensor::scalar(r.random_range(-2.0..2.0))?;
        for metric in Metric::ALL {
            let err = gradcheck::check(
                |t, v| {
                    let si = t.constant(s_i.clone());
                    let st = t.constant(s_t.clone());
                    let lambda = t.sigmoid(v[1]);
                    let s_o = rbvl::losses::fuse_teachers_var(t, si, st, lambda)?;
                    let s_it = t.cosine_matrix(v[0], v[0])?;
                    sa_loss(t, s_o, s_it, metric)
                },
                &[a.clone(), logit.clone()],
            )?;
            note(&format!("sa/{metric}"), err);
        }

        // ITM through the whole student; negatives are drawn once so the
        // finite differences see a fixed sampling outcome.
        let model = tiny_model(d, seed);
        let batch = tiny_batch(j, seed);
        let dims = model.dims;
        let negatives = {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let fw = vars.forward_batch(&mut tape, &batch.image_feats, &batch.text_feats, j)?;
            let (_, p_t2i) = itc_probabilities(tape.value(fw.i_proj), tape.value(fw.t_proj), 0.1)?;
            sample_itm_negatives(&p_t2i, &mut rng(seed + 9))?
        };
        note(
            "itm",
            gradcheck::check(
                |t, v| {
                    let vars = StudentVars::from_vars(dims, v)?;
                    let fw = vars.forward_batch(t, &batch.image_feats, &batch.text_feats, j)?;
                    Ok(itm_loss(t, &vars, &fw, &negatives)?.0)
                },
                &model_inputs(&model),
            )?,
        );

        // Full objective L, including the λ logit.
        let cfg = LossConfig {
            metric: Metric::ALL[seed as usize % 4],
            ..LossConfig::default()
        };
        note(
            "L",
            gradcheck::check(
                |t, v| {
                    let vars = StudentVars::from_vars(dims, v)?;
                    Ok(total_loss(t, &vars, &batch, &cfg, &mut rng(seed + 11))?.total)
                },
                &model_inputs(&model),
            )?,
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        max < GRAD_TOL && elapsed < 120.0 && configs.len() >= 20,
        format!("{} configs, max rel err {max:.1e} [{detail}], {elapsed:.1}s", configs.len()),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn itc_value(i: &Tensor, t: &Tensor, tau: f64) -> rbvl::Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(i.clone());
    let b = tape.constant(t.clone());
    let out = itc_loss(&mut tape, a, b, tau)?;
    Ok(tape.scalar_value(out.loss))
}

fn criterion_2() -> Outcome {
    let mut uniform_err: f64 = 0.0;
    let mut ortho_err: f64 = 0.0;
    for j in [2usize, 3, 4, 8, 16] {
        let row: Vec<f64> = (0..8).map(|k| (k as f64 * 0.7).sin()).collect();
        let same = Tensor::from_rows(&vec![row; j])?;
        uniform_err = uniform_err.max((itc_value(&same, &same, 0.1)? - (j as f64).ln()).abs());

        let eye = Tensor::eye(j);
        let e = std::f64::consts::E;
        let expected = -(e / (e + (j as f64 - 1.0))).ln();
        ortho_err = ortho_err.max((itc_value(&eye, &eye, 1.0)? - expected).abs());
    }
    Ok((
        uniform_err < 1e-9 && ortho_err < 1e-6,
        format!("uniform |ITC - ln J| ≤ {uniform_err:.1e}, orthonormal |ITC - ref| ≤ {ortho_err:.1e} (J ∈ 2..16)"),
    ))
}

// ---------------------------------------------------------------- criterion 3

fn matrix(rows: &[Vec<f64>], role: Role) -> SimilarityMatrix {
    SimilarityMatrix {
        role,
        source: Source::Teacher,
        values: Tensor::from_rows(rows).unwrap(),
    }
}

fn criterion_3() -> Outcome {
    let s_o = matrix(&[vec![1.0, 0.5], vec![0.5, 1.0]], Role::SO);
    let s_it = matrix(&[vec![1.0, 0.1], vec![0.1, 1.0]], Role::SIT);
    let hand = sa_loss_value(&s_o, &s_it, Metric::Mae)?;

    let mut worst: f64 = 0.0;
    let mut r = rng(33);
    for case in 0..50u64 {
        let j = r.random_range(2..10);
        let s_i = relational_matrix(&Tensor::randn(&[j, 6], 1.0, &mut r), Role::SI, Source::Teacher)?;
        let s_t = relational_matrix(&Tensor::randn(&[j, 6], 1.0, &mut r), Role::ST, Source::Teacher)?;
        let logit: f64 = r.random_range(-4.0..4.0);
        let lambda = 1.0 / (1.0 + (-logit).exp());
        let combo: Vec<f64> = s_i
            .values
            .data()
            .iter()
            .zip(s_t.values.data())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let student = SimilarityMatrix {
            role: Role::SIT,
            source: Source::Student,
            values: Tensor::new(vec![j, j], combo)?,
        };
        let fused = fuse_teachers(&s_i, &s_t, logit)?;
        let v = sa_loss_value(&fused, &student, Metric::Mae)?;
        worst = worst.max(v.abs());
        let _ = case;
    }
    Ok((
        hand == 0.4 && worst < 1e-12,
        format!("J=2 hand case = {hand} (expected 0.4 exactly); fused-target loss ≤ {worst:.1e} over 50 random λ"),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn random_unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Reference NDCG@k written independently of the library: explicit
/// pairwise ranks and selection of the ideal order.
fn brute_ndcg(db: &[IndexEntry], queries: &[IndexEntry], rel: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0.0;
    for (qi, q) in queries.iter().enumerate() {
        let cands: Vec<usize> = (0..db.len())
            .filter(|&c| !(db[c].id == q.id && db[c].modality == q.modality))
            .collect();
        let score = |c: usize| -> f64 { q.embedding.iter().zip(&db[c].embedding).map(|(x, y)| x * y).sum() };
        let mut by_rank = vec![0usize; cands.len()];
        for &c in &cands {
            let ahead = cands
                .iter()
                .filter(|&&o| score(o) > score(c) || (score(o) == score(c) && o < c))
                .count();
            by_rank[ahead] = c;
        }
        let rels: Vec<f64> = by_rank.iter().map(|&c| rel[qi][c]).collect();
        let mut dcg = 0.0;
        for (r, v) in rels.iter().take(k).enumerate() {
            dcg += v / ((r + 2) as f64).log2();
        }
        let mut pool = rels.clone();
        let mut idcg = 0.0;
        for r in 0..k.min(pool.len()) {
            let (best, _) = pool
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
            idcg += pool[best] / ((r + 2) as f64).log2();
            pool.swap_remove(best);
        }
        total += if idcg == 0.0 { 1.0 } else { dcg / idcg };
    }
    total / queries.len() as f64
}

fn criterion_4() -> Outcome {
    let mut r = rng(44);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = r.random_range(3..30);
        let d = r.random_range(2..6);
        let db: Vec<IndexEntry> = (0..n)
            .map(|id| IndexEntry {
                id,
                modality: Modality::Image,
                embedding: random_unit(&mut r, d),
                captions: Vec::new(),
            })
            .collect();
        let rel: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if r.random_bool(0.3) { 0.0 } else { (r.random_range(0..5) as f64) / 4.0 })
                    .collect()
            })
            .collect();
        let k = r.random_range(1..=n);
        let index = RetrievalIndex::new(Task::I2I, db.clone())?;
        let matrix = RelevanceMatrix::from_rows(rel.clone(), "random")?;
        let lib = ndcg_summary(&index, &db, &matrix, k)?.mean;
        if lib != brute_ndcg(&db, &db, &rel, k) {
            mismatches += 1;
        }
    }

    let rouge = rouge_l(&tokenize("a b c d"), &tokenize("a c d e"))?;

    let n = 25;
    let mut entries = Vec::new();
    for id in 0..n {
        for m in [Modality::Image, Modality::Text] {
            entries.push(IndexEntry {
                id,
                modality: m,
                embedding: random_unit(&mut r, 3),
                captions: Vec::new(),
            });
        }
    }
    let texts: Vec<IndexEntry> = entries.iter().filter(|e| e.modality == Modality::Text).cloned().collect();
    let images: Vec<IndexEntry> = entries.iter().filter(|e| e.modality == Modality::Image).cloned().collect();
    let index = RetrievalIndex::new(Task::I2T, texts)?;
    let full = recall_at_k(&index, &images, index.len())?;

    Ok((
        mismatches == 0 && (rouge - 0.75).abs() < 1e-9 && full == 1.0,
        format!("NDCG brute-force mismatches {mismatches}/100, ROUGE-L = {rouge}, R@full = {full}"),
    ))
}

// ------------------------------------------------------------ criteria 5 – 8

const N_SEEDS: usize = 3;

struct Experiments {
    bench: Workbench,
    teacher_t2t: f64,
    setup_secs: f64,
}

fn setup() -> rbvl::Result<Experiments> {
    let start = Instant::now();
    let corpus = generate(&GeneratorConfig::imbalanced(2000, 0))?;
    let bench = Workbench::pretrained(corpus, &TeacherConfig::default())?;
    let teacher_t2t = bench
        .teacher_results()?
        .get(Task::T2T, "NDCG@10")
        .expect("text teacher reports T2T");
    Ok(Experiments {
        bench,
        teacher_t2t,
        setup_secs: start.elapsed().as_secs_f64(),
    })
}

struct Column {
    label: &'static str,
    runs: Vec<rbvl::experiments::RunOutcome>,
}

impl Column {
    fn mean(&self, key: &str) -> f64 {
        self.runs.iter().map(|r| r.value(key).unwrap()).sum::<f64>() / self.runs.len() as f64
    }
}

fn train(x: &Experiments, label: &'static str, config: TrainConfig) -> rbvl::Result<Column> {
    let (_, runs) = run_matrix(&x.bench, label, &[Variant::new(label, config)], 0, N_SEEDS)?;
    Ok(Column { label, runs })
}

const T2T: &str = "T2T NDCG@10";
const I2T: &str = "I2T R@1";

fn fmt(c: &Column) -> String {
    format!("{} T2T {:.4} / I2T {:.4}", c.label, c.mean(T2T), c.mean(I2T))
}

fn criterion_5(x: &Experiments, cr: &Column, secs: f64) -> Outcome {
    let gap = x.teacher_t2t - cr.mean(T2T);
    let total = x.setup_secs + secs;
    Ok((
        gap >= 0.02 && total < 600.0,
        format!(
            "text teacher T2T {:.4}, {} → gap {gap:.4} (need ≥ 0.02), {total:.0}s",
            x.teacher_t2t,
            fmt(cr)
        ),
    ))
}

fn criterion_6(full: &Column, cr: &Column, wo_sa: &Column) -> Outcome {
    let gain = full.mean(T2T) - cr.mean(T2T);
    let i2t_drop = cr.mean(I2T) - full.mean(I2T);
    let sa_below = wo_sa.mean(T2T) < full.mean(T2T);
    Ok((
        gain >= 0.01 && i2t_drop <= 0.02 && sa_below,
        format!(
            "T2T gain {gain:+.4} (need ≥ 0.01), I2T drop {i2t_drop:+.4} (≤ 0.02), {} vs {}",
            fmt(wo_sa),
            fmt(full)
        ),
    ))
}

fn criterion_7(mae: &Column, kl: &Column) -> Outcome {
    let t2t = kl.mean(T2T) < mae.mean(T2T);
    let i2t = kl.mean(I2T) < mae.mean(I2T);
    Ok((
        t2t && i2t,
        format!(
            "{} vs {}: T2T {}, I2T {}",
            fmt(kl),
            fmt(mae),
            if t2t { "below" } else { "not below" },
            if i2t { "below" } else { "not below" }
        ),
    ))
}

fn criterion_8(learned: &Column, fixed: &[Column]) -> Outcome {
    let lambdas: Vec<f64> = learned.runs.iter().map(|r| r.final_lambda).collect();
    let below = lambdas.iter().all(|l| *l < 0.5);
    let mut loss_ok = true;
    let mut parts = Vec::new();
    for (s, run) in learned.runs.iter().enumerate() {
        let best = fixed.iter().map(|c| c.runs[s].final_loss).fold(f64::INFINITY, f64::min);
        loss_ok &= run.final_loss <= best * 1.05;
        parts.push(format!("{:.3}≤{:.3}", run.final_loss, best * 1.05));
    }
    Ok((
        below && loss_ok,
        format!(
            "final λ per seed {:?} (need < 0.5); learned loss vs 1.05·min fixed: {}",
            lambdas.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            parts.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(x: &Experiments) -> Outcome {
    let cfg = TrainConfig {
        epochs: 2,
        seed: run_seed(9, 0),
        ..TrainConfig::default()
    };
    let a = train_run(&x.bench.corpus, &x.bench.cache, &cfg)?;
    let b = train_run(&x.bench.corpus, &x.bench.cache, &cfg)?;
    let same_ckpt = checkpoint_bytes(&a, &cfg)? == checkpoint_bytes(&b, &cfg)?;

    let dir = tempfile::tempdir().map_err(rbvl::Error::from)?;
    let mut reports = Vec::new();
    for name in ["r1", "r2"] {
        let outcome = x.bench.run("det", &cfg)?;
        let out = dir.path().join(name);
        x.bench.report(&outcome)?.write(&out)?;
        let files: Vec<Vec<u8>> = ["metrics.json", "metrics.csv", "metrics.md"]
            .iter()
            .map(|f| std::fs::read(out.join(f)))
            .collect::<std::io::Result<_>>()
            .map_err(rbvl::Error::from)?;
        reports.push(files);
    }
    let same_report = reports[0] == reports[1];

    let mut part = RunState::new(&cfg)?;
    run_steps(&mut part, &x.bench.corpus, &x.bench.cache, &cfg, Some(17), None)?;
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&part, &cfg, &path)?;
    let (mut resumed, cfg2) = load_checkpoint(&path)?;
    run_steps(&mut resumed, &x.bench.corpus, &x.bench.cache, &cfg2, None, None)?;
    let resumed_ok = resumed == a && checkpoint_bytes(&resumed, &cfg2)? == checkpoint_bytes(&a, &cfg)?;

    Ok((
        same_ckpt && same_report && resumed_ok,
        format!(
            "identical checkpoints {same_ckpt}, identical reports {same_report}, resume after step 17 bit-identical {resumed_ok}"
        ),
    ))
}

// ---------------------------------------------------------------------- main

struct Gate {
    failures: usize,
}

impl Gate {
    fn report(&mut self, n: usize, name: &str, outcome: Outcome) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failures += 1;
        }
        println!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn variant(ablations: Ablations, metric: Metric, lambda_mode: LambdaMode) -> TrainConfig {
    TrainConfig {
        ablations,
        metric,
        lambda_mode,
        ..TrainConfig::default()
    }
}

struct Matrix {
    cr: Column,
    cr_secs: f64,
    full: Column,
    wo_sa: Column,
    kl: Column,
    fixed: Vec<Column>,
}

fn train_matrix(x: &Experiments) -> rbvl::Result<Matrix> {
    let learnable = LambdaMode::Learnable;
    let t = Instant::now();
    let cr = train(x, "cr only", variant(Ablations::cr_only(), Metric::Mae, learnable))?;
    let cr_secs = t.elapsed().as_secs_f64();
    let fixed = [("λ=0", 0.0), ("λ=0.5", 0.5), ("λ=1", 1.0)]
        .into_iter()
        .map(|(label, l)| train(x, label, variant(Ablations::none(), Metric::Mae, LambdaMode::Fixed(l))))
        .collect::<rbvl::Result<_>>()?;
    Ok(Matrix {
        cr,
        cr_secs,
        full: train(x, "full", variant(Ablations::none(), Metric::Mae, learnable))?,
        wo_sa: train(x, "w/o sa", variant(Ablations::without(LossName::Sa), Metric::Mae, learnable))?,
        kl: train(x, "KL", variant(Ablations::none(), Metric::Kl, learnable))?,
        fixed,
    })
}

const EXPERIMENTS: [(usize, &str); 5] = [
    (5, "imbalance phenomenon"),
    (6, "rebalancing"),
    (7, "metric-variant direction"),
    (8, "learnable λ"),
    (9, "determinism and persistence"),
];

fn main() {
    let mut gate = Gate { failures: 0 };
    gate.report(1, "gradient correctness", criterion_1());
    gate.report(2, "closed-form contrastive values", criterion_2());
    gate.report(3, "structure loss fidelity", criterion_3());
    gate.report(4, "metric oracles", criterion_4());

    match setup().and_then(|x| train_matrix(&x).map(|m| (x, m))) {
        Ok((x, m)) => {
            let [c5, c6, c7, c8, c9] = EXPERIMENTS;
            gate.report(c5.0, c5.1, criterion_5(&x, &m.cr, m.cr_secs));
            gate.report(c6.0, c6.1, criterion_6(&m.full, &m.cr, &m.wo_sa));
            gate.report(c7.0, c7.1, criterion_7(&m.full, &m.kl));
            gate.report(c8.0, c8.1, criterion_8(&m.full, &m.fixed));
            gate.report(c9.0, c9.1, criterion_9(&x));
        }
        Err(e) => {
            for (n, name) in EXPERIMENTS {
                gate.report(n, name, Err(rbvl::Error::Contract(e.to_string())));
            }
        }
    }

    println!("acceptance: {} of 9 criteria failed", gate.failures);
    if gate.failures > 0 && std::env::var("RBVL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
