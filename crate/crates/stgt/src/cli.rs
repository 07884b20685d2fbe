//! Command-line front end: config resolution (defaults < file < env <
//! flags), the seven subcommands, and dual human/machine reports. Exit
//! codes: 0 success, 2 config error, 3 numeric failure, 4 tolerance breach.

use crate::bench::{run_bench, BenchReport};
use crate::config::{Precision, RunConfig};
use crate::data::{gen_corpus, SyntheticCorpus};
use crate::error::{Result, StgtError};
use crate::eval::{evaluate_retrieval, RetrievalReport, RetrievalResult};
use crate::graph::dump_graph;
use crate::loss::{csal_loss_with_weights, csal_weights, vtc_loss, EmbeddingPair, TAU_INIT};
use crate::model::Model;
use crate::param::{finite_diff_grad, segment_relative_errors, ParamVector, ParamVectorBuilder};
use crate::report::{full, human_report, machine_report, write_report_pair, write_text, Table};
use crate::tensor::{l2_norm, l2_normalize_rows, Scalar, Tensor};
use crate::train::{curve_header, load_checkpoint, train, TrainOutcome};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "stgt",
    version,
    about = "Spatio-temporal graph transformer: toy video-text alignment, gradient checks, and sparse-vs-dense attention benchmarks"
)]
pub struct Cli {
    /// TOML config file; omitted means built-in defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// overrides the config seed (and the STGT_SEED env var)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// overrides the output directory (and the STGT_OUT_DIR env var)
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// numeric precision: f64 (verification) or f32 (benchmark)
    #[arg(long, global = true)]
    pub precision: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and write its summary
    GenData(GenDataArgs),
    /// Run gen-data, two-stage training, and retrieval evaluation
    Train(TrainArgs),
    /// Evaluate retrieval from a saved checkpoint
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Time and count sparse vs dense graph attention over a threshold sweep
    Bench,
    /// Write one item's spatio-temporal graph as neighbor lists
    DumpGraph(DumpArgs),
    /// Write one item's kept-attention probabilities per head and row
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// corpus size override
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage1_steps: Option<usize>,
    #[arg(long)]
    pub stage2_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub stage2_alpha: Option<f64>,
    /// comma-separated edge thresholds to sweep (each trains a fresh model)
    #[arg(long, value_delimiter = ',')]
    pub sweep_threshold: Vec<f64>,
    /// comma-separated gamma values to sweep
    #[arg(long, value_delimiter = ',')]
    pub sweep_gamma: Vec<f64>,
    /// additionally train with stage 2 kept contrastive and report the delta
    #[arg(long)]
    pub ablate_alpha: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// checkpoint to load; defaults to <out_dir>/final.ckpt
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// edge threshold for evaluation; defaults to the config choice
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// number of consecutive seeds to check, starting at the config seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// batch size for the loss and composition checks
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    /// corpus item index
    #[arg(long, default_value_t = 0)]
    pub item: usize,
    /// edge threshold override
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Resolves the run config: defaults, then file, then env, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(p) = &cli.precision {
        cfg.precision = match p.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => {
                return Err(StgtError::Config(format!(
                    "precision must be f64 or f32, got {other:?}"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenData(args) => {
            if let Some(count) = args.count {
                cfg.data.count = count;
                cfg.validate()?;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train(args) => cmd_train(cfg, &args),
        Command::Eval(args) => cmd_eval(&cfg, &args),
        Command::Gradcheck(args) => cmd_gradcheck(&cfg, &args),
        Command::Bench => cmd_bench(&cfg),
        Command::DumpGraph(args) => cmd_dump_graph(&cfg, &args),
        Command::DumpAttention(args) => cmd_dump_attention(&cfg, &args),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let corpus = gen_corpus(&cfg.corpus_config())?;
    // the corpus itself is never stored: this file regenerates it exactly
    write_text(&cfg.out_dir.join("corpus.toml"), &cfg.to_toml())?;
    let mut table = Table::new(vec!["item", "latent_norm", "patch_mean", "text_norm"]);
    for (i, item) in corpus.items.iter().enumerate() {
        let pm = item.video_patches.data().iter().sum::<f64>()
            / item.video_patches.data().len() as f64;
        table.push_row(vec![
            i.to_string(),
            full(l2_norm(&item.latent)),
            full(pm),
            full(l2_norm(&item.text_features)),
        ]);
    }
    let human = human_report(
        "synthetic corpus",
        &cfg.to_toml(),
        &[("items", table.render())],
    );
    let machine = machine_report(&cfg.to_toml(), &table);
    let (txt, _) = write_report_pair(&cfg.out_dir, "corpus", &human, &machine)?;
    println!(
        "generated {} items (seed {}); summary at {}",
        corpus.items.len(),
        cfg.seed,
        txt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / experiment
// ---------------------------------------------------------------------------

fn embed_corpus(model: &Model, corpus: &SyntheticCorpus) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let b = corpus.items.len();
    let e = model.cfg.embed_dim;
    let mut video = Tensor::zeros(&[b, e]);
    let mut text = Tensor::zeros(&[b, e]);
    for (i, item) in corpus.items.iter().enumerate() {
        let (ve, _) = model.encode_video(&item.video_patches)?;
        let (te, _) = model.encode_text(&item.text_features)?;
        video.row_mut(i).copy_from_slice(&ve);
        text.row_mut(i).copy_from_slice(&te);
    }
    Ok((video, text))
}

/// Trains under `cfg` and evaluates retrieval at the configured evaluation
/// threshold. The returned outcome owns the trained model and loss curve.
pub fn run_experiment(cfg: &RunConfig) -> Result<(TrainOutcome, RetrievalReport)> {
    let corpus = gen_corpus(&cfg.corpus_config())?;
    let model = Model::new(cfg.model_config(cfg.model.threshold_train), cfg.seed)?;
    let outcome = train(model, &corpus, &cfg.train_config(Some(cfg.out_dir.clone())))?;
    let mut eval_model = outcome.model.clone();
    eval_model.cfg.threshold = cfg.eval_threshold();
    let (video, text) = embed_corpus(&eval_model, &corpus)?;
    let retrieval = evaluate_retrieval(&video, &text, &cfg.eval.ks)?;
    Ok((outcome, retrieval))
}

fn retrieval_cells(r: &RetrievalResult, ks: &[usize]) -> Vec<String> {
    let mut cells: Vec<String> = ks.iter().map(|k| full(r.r_at[k])).collect();
    cells.push(full(r.med_r));
    cells.push(full(r.r_mean));
    cells
}

fn retrieval_headers(prefix: &str, ks: &[usize]) -> Vec<String> {
    let p = if prefix.is_empty() {
        String::new()
    } else {
        format!("{prefix}_")
    };
    let mut h: Vec<String> = ks.iter().map(|k| format!("{p}r@{k}")).collect();
    h.push(format!("{p}medr"));
    h.push(format!("{p}rmean"));
    h
}

fn experiment_table(ks: &[usize]) -> Table {
    let mut headers = vec![
        "seed".to_string(),
        "threshold_train".to_string(),
        "threshold_eval".to_string(),
        "gamma".to_string(),
        "stage2_alpha".to_string(),
        "final_total".to_string(),
        "tau".to_string(),
    ];
    headers.extend(retrieval_headers("v2t", ks));
    headers.extend(retrieval_headers("t2v", ks));
    Table::new(headers)
}

fn push_experiment_row(
    table: &mut Table,
    cfg: &RunConfig,
    outcome: &TrainOutcome,
    retrieval: &RetrievalReport,
) {
    let last = outcome.curve.last().expect("nonempty curve");
    let mut cells = vec![
        cfg.seed.to_string(),
        full(cfg.model.threshold_train),
        full(cfg.eval_threshold()),
        full(cfg.train.gamma),
        full(cfg.train.stage2_alpha),
        full(last.total),
        full(last.tau),
    ];
    cells.extend(retrieval_cells(&retrieval.v2t, &cfg.eval.ks));
    cells.extend(retrieval_cells(&retrieval.t2v, &cfg.eval.ks));
    table.push_row(cells);
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.stage1_steps {
        cfg.train.stage1_steps = v;
    }
    if let Some(v) = args.stage2_steps {
        cfg.train.stage2_steps = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.gamma {
        cfg.train.gamma = v;
    }
    if let Some(v) = args.stage2_alpha {
        cfg.train.stage2_alpha = v;
    }
    cfg.validate()?;

    let thresholds = if args.sweep_threshold.is_empty() {
        vec![cfg.model.threshold_train]
    } else {
        args.sweep_threshold.clone()
    };
    let gammas = if args.sweep_gamma.is_empty() {
        vec![cfg.train.gamma]
    } else {
        args.sweep_gamma.clone()
    };
    let alphas = if args.ablate_alpha {
        vec![cfg.train.stage2_alpha, 1.0 - cfg.train.stage2_alpha]
    } else {
        vec![cfg.train.stage2_alpha]
    };

    let mut table = experiment_table(&cfg.eval.ks);
    let mut rmeans = Vec::new();
    for &threshold in &thresholds {
        for &gamma in &gammas {
            for &alpha in &alphas {
                let mut run_cfg = cfg.clone();
                run_cfg.model.threshold_train = threshold;
                run_cfg.train.gamma = gamma;
                run_cfg.train.stage2_alpha = alpha;
                run_cfg.validate()?;
                let (outcome, retrieval) = run_experiment(&run_cfg)?;
                push_experiment_row(&mut table, &run_cfg, &outcome, &retrieval);
                rmeans.push((retrieval.v2t.r_mean + retrieval.t2v.r_mean) / 2.0);

                // loss curve for the base run only
                if threshold == cfg.model.threshold_train
                    && gamma == cfg.train.gamma
                    && alpha == cfg.train.stage2_alpha
                {
                    let mut curve = String::from(curve_header());
                    curve.push('\n');
                    for rec in &outcome.curve {
                        curve.push_str(&rec.to_line());
                        curve.push('\n');
                    }
                    write_text(
                        &cfg.out_dir.join("curve.tsv"),
                        &machine_curve(&run_cfg, &curve),
                    )?;
                }
            }
        }
    }

    let mut sections = vec![("results", table.render())];
    let delta = if args.ablate_alpha && alphas.len() == 2 {
        let mut d = Table::new(vec!["pair", "rmean_base", "rmean_flipped", "delta"]);
        for pair in rmeans.chunks(2) {
            if let [base, flipped] = pair {
                d.push_row(vec![
                    "stage2_alpha".to_string(),
                    full(*base),
                    full(*flipped),
                    full(base - flipped),
                ]);
            }
        }
        Some(d)
    } else {
        None
    };
    let delta_render = delta.as_ref().map(|d| d.render());
    if let Some(r) = &delta_render {
        sections.push(("stage-2 loss ablation (mean R-Mean delta)", r.clone()));
    }
    let human = human_report("experiment", &cfg.to_toml(), &sections);
    let machine = machine_report(&cfg.to_toml(), &table);
    let (txt, tsv) = write_report_pair(&cfg.out_dir, "experiment", &human, &machine)?;
    println!("experiment report at {} (machine: {})", txt.display(), tsv.display());
    Ok(())
}

fn machine_curve(cfg: &RunConfig, curve: &str) -> String {
    let mut out = String::new();
    for line in cfg.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(curve);
    out
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Rebuilds a model from config + checkpoint; segment layout must match.
pub fn model_from_checkpoint(cfg: &RunConfig, path: &PathBuf, threshold: f64) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(threshold), cfg.seed)?;
    let loaded = load_checkpoint(path)?;
    let expect: Vec<(&str, &[usize])> = model
        .params
        .segments()
        .iter()
        .map(|s| (s.name.as_str(), s.shape.as_slice()))
        .collect();
    let got: Vec<(&str, &[usize])> = loaded
        .segments()
        .iter()
        .map(|s| (s.name.as_str(), s.shape.as_slice()))
        .collect();
    if expect != got {
        return Err(StgtError::Checkpoint(format!(
            "checkpoint layout does not match the configured model: expected {expect:?}, got {got:?}"
        )));
    }
    model.params = loaded;
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
    let threshold = args.threshold.unwrap_or_else(|| cfg.eval_threshold());
    let model = model_from_checkpoint(cfg, &path, threshold)?;
    let corpus = gen_corpus(&cfg.corpus_config())?;
    let (video, text) = embed_corpus(&model, &corpus)?;
    let retrieval = evaluate_retrieval(&video, &text, &cfg.eval.ks)?;

    let mut headers = vec!["direction".to_string()];
    headers.extend(retrieval_headers("", &cfg.eval.ks));
    let mut table = Table::new(headers);
    let mut row = vec!["v2t".to_string()];
    row.extend(retrieval_cells(&retrieval.v2t, &cfg.eval.ks));
    table.push_row(row);
    let mut row = vec!["t2v".to_string()];
    row.extend(retrieval_cells(&retrieval.t2v, &cfg.eval.ks));
    table.push_row(row);

    let human = human_report(
        &format!("retrieval at threshold {threshold}"),
        &cfg.to_toml(),
        &[("retrieval", table.render())],
    );
    let machine = machine_report(&cfg.to_toml(), &table);
    let (txt, _) = write_report_pair(&cfg.out_dir, "eval", &human, &machine)?;
    println!(
        "v2t R@1 {:.3}  t2v R@1 {:.3}  (report at {})",
        retrieval.v2t.r_at[&cfg.eval.ks[0]],
        retrieval.t2v.r_at[&cfg.eval.ks[0]],
        txt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub seed: u64,
    pub check: String,
    pub segment: String,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
    pub max_err: f64,
    pub precision: Precision,
}

fn random_pair_params(b: usize, e: usize, seed: u64) -> ParamVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(11).wrapping_add(5));
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let video = l2_normalize_rows(&Tensor::new(draw(b * e), vec![b, e]).unwrap());
    let text = l2_normalize_rows(&Tensor::new(draw(b * e), vec![b, e]).unwrap());
    let mut builder = ParamVectorBuilder::new();
    builder.push("video", &[b, e], video.data().to_vec());
    builder.push("text", &[b, e], text.data().to_vec());
    builder.push("log_tau", &[1], vec![TAU_INIT.ln()]);
    builder.build()
}

fn pair_of<T: Scalar>(pv: &ParamVector<T>, b: usize, e: usize) -> EmbeddingPair<T> {
    EmbeddingPair {
        video: Tensor::new(pv.slice("video").to_vec(), vec![b, e]).unwrap(),
        text: Tensor::new(pv.slice("text").to_vec(), vec![b, e]).unwrap(),
        log_tau: pv.scalar("log_tau"),
    }
}

fn loss_grad_flat<T: Scalar>(
    d_video: &Tensor<T>,
    d_text: &Tensor<T>,
    d_log_tau: T,
) -> Vec<T> {
    let mut flat = d_video.data().to_vec();
    flat.extend_from_slice(d_text.data());
    flat.push(d_log_tau);
    flat
}

/// One loss-level check in the requested precision: FD in `T`, errors
/// reported against the f64 segment layout.
fn loss_check<T: Scalar>(
    theta64: &ParamVector<f64>,
    b: usize,
    e: usize,
    gamma: f64,
    eps: f64,
    check: &str,
) -> Result<Vec<(String, f64)>> {
    let theta: ParamVector<T> = theta64.cast();
    let base = pair_of(&theta, b, e);
    let (analytic, f): (Vec<T>, Box<dyn Fn(&ParamVector<T>) -> T>) = match check {
        "contrastive" => {
            let (_, _, _, g) = vtc_loss(&base)?;
            (
                loss_grad_flat(&g.d_video, &g.d_text, g.d_log_tau),
                Box::new(move |pv: &ParamVector<T>| vtc_loss(&pair_of(pv, b, e)).unwrap().0),
            )
        }
        "soft-target" => {
            let w = csal_weights(&base, T::from_f64(gamma))?;
            let (_, _, _, g) = csal_loss_with_weights(&base, &w)?;
            let wc = w.clone();
            (
                loss_grad_flat(&g.d_video, &g.d_text, g.d_log_tau),
                Box::new(move |pv: &ParamVector<T>| {
                    csal_loss_with_weights(&pair_of(pv, b, e), &wc).unwrap().0
                }),
            )
        }
        other => return Err(StgtError::Config(format!("unknown check {other}"))),
    };
    let fd = finite_diff_grad(&f, &theta, T::from_f64(eps))?;
    let analytic64: Vec<f64> = analytic.iter().map(|v| v.to_f64_lossy()).collect();
    let fd64: Vec<f64> = fd.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(segment_relative_errors(theta64, &analytic64, &fd64))
}

/// Full tower + loss composition check; always f64 (the training pipeline
/// is f64-only).
fn composition_check(
    cfg: &RunConfig,
    seed: u64,
    batch: usize,
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    let mut ccfg = cfg.corpus_config();
    ccfg.count = batch.max(2);
    ccfg.seed = seed;
    let corpus = gen_corpus(&ccfg)?;
    let model = Model::new(cfg.model_config(cfg.model.threshold_train), seed)?;
    let (_report, grads) = crate::train::corpus_step(&model, &corpus, 1.0, cfg.train.gamma)?;
    let f = |pv: &ParamVector<f64>| {
        let mut m = model.clone();
        m.params = pv.clone();
        crate::train::corpus_step(&m, &corpus, 1.0, cfg.train.gamma)
            .expect("corpus step")
            .0
            .total
    };
    let fd = finite_diff_grad(f, &model.params, eps)?;
    Ok(segment_relative_errors(&model.params, grads.data(), &fd))
}

pub fn run_gradcheck(cfg: &RunConfig, seeds: u64, batch: usize) -> Result<GradcheckReport> {
    let (tolerance, eps) = match cfg.precision {
        Precision::F64 => (1e-4, 1e-5),
        Precision::F32 => (1e-2, 1e-3),
    };
    let e = cfg.model.embed_dim;
    let mut rows = Vec::new();
    let push = |seed: u64, check: &str, errs: Vec<(String, f64)>, rows: &mut Vec<GradcheckRow>| {
        for (segment, err) in errs {
            rows.push(GradcheckRow {
                seed,
                check: check.to_string(),
                segment,
                err,
            });
        }
    };
    for i in 0..seeds {
        let seed = cfg.seed.wrapping_add(i);
        let theta = random_pair_params(batch, e, seed);
        for check in ["contrastive", "soft-target"] {
            let errs = match cfg.precision {
                Precision::F64 => loss_check::<f64>(&theta, batch, e, cfg.train.gamma, eps, check)?,
                Precision::F32 => loss_check::<f32>(&theta, batch, e, cfg.train.gamma, eps, check)?,
            };
            push(seed, check, errs, &mut rows);
        }
        // tower composition always runs in f64: it is the training path
        let errs = composition_check(cfg, seed, batch, 1e-5)?;
        push(seed, "composition", errs, &mut rows);
    }
    let max_err = rows.iter().map(|r| r.err).fold(0.0f64, f64::max);
    Ok(GradcheckReport {
        rows,
        tolerance,
        max_err,
        precision: cfg.precision,
    })
}

fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(cfg, args.seeds, args.batch)?;
    let mut table = Table::new(vec!["seed", "check", "segment", "rel_err"]);
    for r in &report.rows {
        table.push_row(vec![
            r.seed.to_string(),
            r.check.clone(),
            r.segment.clone(),
            full(r.err),
        ]);
    }
    let mode_note = match report.precision {
        Precision::F64 => String::new(),
        Precision::F32 => "\nreduced-precision mode: f32 losses, tolerance relaxed to 1e-2; \
                           the composition check stays f64\n"
            .to_string(),
    };
    let summary = format!(
        "max relative error {} against tolerance {}{}\n",
        full(report.max_err),
        full(report.tolerance),
        mode_note
    );
    let human = human_report(
        "gradient check",
        &cfg.to_toml(),
        &[("summary", summary), ("segments", table.render())],
    );
    let machine = machine_report(&cfg.to_toml(), &table);
    let (txt, _) = write_report_pair(&cfg.out_dir, "gradcheck", &human, &machine)?;
    println!(
        "gradcheck max rel err {:.3e} (tolerance {:.0e}); report at {}",
        report.max_err,
        report.tolerance,
        txt.display()
    );
    if report.max_err > report.tolerance {
        let worst = report
            .rows
            .iter()
            .max_by(|a, b| a.err.total_cmp(&b.err))
            .expect("nonempty rows");
        return Err(StgtError::ToleranceBreach {
            segment: format!("{}:{}", worst.check, worst.segment),
            got: worst.err,
            limit: report.tolerance,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn bench_table(report: &BenchReport) -> Table {
    let mut table = Table::new(vec![
        "threshold",
        "density",
        "mask_density",
        "edges",
        "sparse_flops",
        "dense_flops",
        "sparse_ms",
        "dense_ms",
    ]);
    for r in &report.rows {
        table.push_row(vec![
            full(r.threshold),
            full(r.density),
            full(r.mask_density),
            r.edges.to_string(),
            r.sparse_flops.to_string(),
            r.dense_flops.to_string(),
            format!("{:.3}", r.sparse_ns as f64 / 1e6),
            format!("{:.3}", r.dense_ns as f64 / 1e6),
        ]);
    }
    table
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let report = run_bench(cfg)?;
    let table = bench_table(&report);
    let note = format!(
        "{} nodes, d={}, {} heads, precision {}, best of {} repeats.\n\
         FLOP counts and densities are deterministic; wall times are measurements\n\
         and excluded from the bit-identical-report guarantee.\n",
        report.node_count, report.dim, report.heads, report.precision, report.repeats
    );
    let human = human_report(
        "sparse vs dense graph attention",
        &cfg.to_toml(),
        &[("setup", note), ("sweep", table.render())],
    );
    let machine = machine_report(&cfg.to_toml(), &table);
    let (txt, _) = write_report_pair(&cfg.out_dir, "bench", &human, &machine)?;
    println!("bench report at {}", txt.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-graph / dump-attention
// ---------------------------------------------------------------------------

fn item_cache(cfg: &RunConfig, args: &DumpArgs) -> Result<(Model, crate::model::VideoCache)> {
    let corpus = gen_corpus(&cfg.corpus_config())?;
    let item = corpus.items.get(args.item).ok_or(StgtError::IndexOutOfRange {
        what: "corpus item",
        got: args.item,
        max: corpus.items.len(),
    })?;
    let threshold = args.threshold.unwrap_or(cfg.model.threshold_train);
    let model = Model::new(cfg.model_config(threshold), cfg.seed)?;
    let (_, cache) = model.encode_video(&item.video_patches)?;
    Ok((model, cache))
}

fn cmd_dump_graph(cfg: &RunConfig, args: &DumpArgs) -> Result<()> {
    let (_, cache) = item_cache(cfg, args)?;
    let mut buf = Vec::new();
    dump_graph(&cache.graph, &mut buf)?;
    let path = cfg.out_dir.join(format!("graph-item{}.txt", args.item));
    write_text(&path, std::str::from_utf8(&buf).expect("ascii dump"))?;
    println!(
        "graph with {} nodes written to {}",
        cache.graph.node_count,
        path.display()
    );
    Ok(())
}

fn cmd_dump_attention(cfg: &RunConfig, args: &DumpArgs) -> Result<()> {
    let (model, cache) = item_cache(cfg, args)?;
    let records = model.video_attention_records(&cache);
    let mut table = Table::new(vec!["head", "row", "neighbor", "prob"]);
    for rec in &records {
        for (j, p) in rec.kept.iter().zip(&rec.probs) {
            table.push_row(vec![
                rec.head.to_string(),
                rec.row.to_string(),
                j.to_string(),
                full(*p),
            ]);
        }
    }
    let path = cfg.out_dir.join(format!("attention-item{}.tsv", args.item));
    write_text(&path, &machine_report(&cfg.to_toml(), &table))?;
    println!("{} attention rows written to {}", table.rows.len(), path.display());
    Ok(())
}
