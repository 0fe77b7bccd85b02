use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use cdl_core::cluster::init_filters_kmeans;
use cdl_core::conv::{estimate_lipschitz, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use cdl_core::encoder::{encode_batch, EncoderConfig, EncoderMode};
use cdl_core::eval::{match_filters, score_sorting, spike_sort};
use cdl_core::grads::{fd_gradient, lambda_init, FdTarget, GammaPrior, GradInstance, GRAD_H_TOLERANCE, GRAD_LAMBDA_TOLERANCE};
use cdl_core::io::{self, FilterFile};
use cdl_core::sim::{simulate_with, Dataset, SimConfig};
use cdl_core::train::{init_filters_perturbed, train_with_progress, TrainConfig};
use cdl_core::{Error, Execution, FilterBank};

use crate::args::*;

pub enum Failure {
    Usage(String),
    Core(Error),
    /// A check ran but did not pass; the verdict is already printed.
    CheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Prior half-width used when no prior file is given.
const DEFAULT_PRIOR_DELTA: f64 = 50.0;
const DEFAULT_ITERATIONS: usize = 120;
const DEFAULT_THRESHOLD_COUNT: usize = 20;

/// Encoder settings as written in a config file. Anything left out is filled
/// in from the filters (L), the data (sigma) or the initial lambda.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderFile {
    #[serde(rename = "T", default = "default_iterations")]
    iterations: usize,
    #[serde(rename = "L")]
    lipschitz: Option<f64>,
    lambda: Option<f64>,
    sigma: Option<f64>,
    #[serde(default)]
    mode: EncoderMode,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl Default for EncoderFile {
    fn default() -> Self {
        EncoderFile {
            iterations: DEFAULT_ITERATIONS,
            lipschitz: None,
            lambda: None,
            sigma: None,
            mode: EncoderMode::Fista,
        }
    }
}

fn load_encoder(path: Option<&Path>) -> Result<EncoderFile, Failure> {
    Ok(match path {
        Some(p) => io::read_json(p)?,
        None => EncoderFile::default(),
    })
}

pub fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        configure_threads(n as usize)?;
    }
    let ctx = Context {
        deterministic: cli.deterministic,
        exec: if cli.threads == Some(1) {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Encode(a) => encode(&ctx, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::EvalFilters(a) => eval_filters(&ctx, a),
        Command::Sort(a) => sort(&ctx, a),
        Command::Report(a) => report(a),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(n: usize) -> Outcome {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot configure {n} threads: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_: usize) -> Outcome {
    Ok(())
}

struct Context {
    deterministic: bool,
    exec: Execution,
    quiet: bool,
}

impl Context {
    fn say(&self, msg: std::fmt::Arguments<'_>) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn load_input(input: &InputArgs, raw: &RawArgs) -> Result<Dataset, Failure> {
    if let Some(p) = &input.dataset {
        return Ok(io::read_dataset(p)?);
    }
    let path = input.raw.as_ref().expect("clap enforces one input");
    let samples = io::read_raw(path, raw.dtype)?;
    let (fs, n) = (
        raw.fs.expect("clap enforces --fs"),
        raw.window_len.expect("clap enforces --window-len"),
    );
    Ok(Dataset::from_recording(&samples, n, fs, raw.sigma)?)
}

fn simulate(ctx: &Context, a: SimulateArgs) -> Outcome {
    let mut cfg: SimConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.snr_db.is_some() {
        cfg.snr_db = a.snr_db;
    }
    cfg.validate()?;
    let ds = simulate_with(&cfg, ctx.exec)?;
    io::write_dataset(&a.out, &ds)?;
    let events = ds.truth.as_ref().map_or(0, |t| t.event_count());
    ctx.say(format_args!(
        "wrote {} windows x {} samples, {events} events, sigma {:.6}",
        ds.n_windows(),
        ds.window_len(),
        ds.sigma
    ));
    Ok(())
}

fn train(ctx: &Context, a: TrainArgs) -> Outcome {
    let data = load_input(&a.input, &a.raw)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e as usize;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= ctx.deterministic;
    if ctx.exec == Execution::Sequential {
        cfg.parallel = false;
    }
    cfg.validate()?;
    let enc_file = load_encoder(a.encoder.as_deref())?;
    let n = data.window_len();

    let mut init_lambda = None;
    let h0 = if let Some(p) = &a.init {
        let f = io::read_filters(p)?;
        init_lambda = Some(f.lambda);
        f.filters.normalized()?
    } else if let Some(db) = a.init_err_db {
        let truth = data
            .truth
            .as_ref()
            .ok_or_else(|| usage("--init-err-db needs a simulated dataset with ground truth"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_filters_perturbed(&truth.filters, db, &mut rng)?
    } else {
        let truth = data.truth.as_ref().map(|t| &t.filters);
        let c = a
            .filters
            .or(truth.map(FilterBank::n_filters))
            .ok_or_else(|| usage("--filters is required without ground truth or --init"))?;
        let k = a
            .filter_len
            .or(truth.map(FilterBank::filter_len))
            .ok_or_else(|| usage("--filter-len is required without ground truth or --init"))?;
        init_filters_kmeans(&data, c, k, a.threshold * data.max_abs(), cfg.seed)?
    };
    let code_len = h0.code_len(n)?;
    let sigma = enc_file.sigma.unwrap_or(data.sigma);
    let lambda0 = enc_file
        .lambda
        .or(init_lambda)
        .unwrap_or_else(|| lambda_init(h0.n_filters(), code_len, sigma));
    let lipschitz = match enc_file.lipschitz {
        Some(l) => l,
        None => estimate_lipschitz(&h0, n, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)?.lipschitz,
    };
    let enc = EncoderConfig::new(enc_file.iterations, lipschitz, lambda0, sigma).with_mode(enc_file.mode);
    let prior: GammaPrior = match &a.prior {
        Some(p) => io::read_json(p)?,
        None => GammaPrior::centered(lambda0, DEFAULT_PRIOR_DELTA)?,
    };
    ctx.say(format_args!(
        "training C={} K={} on {} windows: T={} L={lipschitz:.6} lambda0={lambda0:.6} sigma={sigma:.6}",
        h0.n_filters(),
        h0.filter_len(),
        data.n_windows(),
        enc.iterations
    ));

    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let mut ck_err = None;
    let out = train_with_progress(&data, &h0, lambda0, &cfg, &enc, &prior, |r, h| {
        let errs: Vec<String> = r.filter_err_db.iter().map(|e| format!("{e:.2}")).collect();
        let time = if ctx.deterministic {
            String::new()
        } else {
            format!(" {:.1}s", r.seconds)
        };
        ctx.say(format_args!(
            "epoch {:>3} train {:.6} val {:.6} lambda {:.4}{}{time}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lambda,
            if errs.is_empty() {
                String::new()
            } else {
                format!(" err [{}]", errs.join(", "))
            }
        ));
        if let (Some(dir), None) = (&a.checkpoint_dir, &ck_err) {
            let ck = FilterFile {
                filters: h.clone(),
                lambda: r.lambda,
                lipschitz,
                sigma,
            };
            ck_err = io::write_filters(dir.join(format!("epoch_{:03}.crsf", r.epoch)), &ck).err();
        }
    })?;
    if let Some(e) = ck_err {
        return Err(e.into());
    }
    for w in &out.history.warnings {
        log::warn!("{w}");
    }
    let file = FilterFile {
        filters: out.filters.clone(),
        lambda: out.lambda,
        lipschitz: out.lipschitz,
        sigma,
    };
    io::write_filters(&a.out, &file)?;
    if let Some(p) = &a.history {
        io::write_history(io::create_file(p)?, &out.history, !ctx.deterministic)?;
    }
    ctx.say(format_args!("best epoch {}, lambda {:.4}", out.history.best_epoch, out.lambda));
    Ok(())
}

/// Encoder for already trained filters: file values unless overridden.
fn trained_encoder(enc_file: EncoderFile, f: &FilterFile) -> EncoderConfig {
    EncoderConfig::new(
        enc_file.iterations,
        enc_file.lipschitz.unwrap_or(f.lipschitz),
        enc_file.lambda.unwrap_or(f.lambda),
        enc_file.sigma.unwrap_or(f.sigma),
    )
    .with_mode(enc_file.mode)
}

fn encode(ctx: &Context, a: EncodeArgs) -> Outcome {
    let data = load_input(&a.input, &a.raw)?;
    let f = io::read_filters(&a.filters)?;
    let enc = trained_encoder(load_encoder(a.encoder.as_deref())?, &f);
    enc.validate_for(&f.filters, data.window_len())?;
    let codes = encode_batch(&data.windows().collect::<Vec<_>>(), &f.filters, &enc, ctx.exec)?;
    io::write_codes(io::create_file(&a.out)?, &codes)?;
    let nnz: usize = codes.iter().map(|x| x.l0_norm()).sum();
    ctx.say(format_args!("encoded {} windows, {nnz} nonzero code entries", codes.len()));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut worst_h = 0.0_f64;
    let mut worst_l = 0.0_f64;
    let mut kinks = 0;
    let mut last = None;
    for seed in a.seed..a.seed + a.instances {
        let inst = GradInstance::random(seed)?;
        let r = fd_gradient(&inst.problem(), FdTarget::Both, a.step)?;
        worst_h = worst_h.max(r.max_rel_err_filters().unwrap_or(0.0));
        worst_l = worst_l.max(r.max_rel_err_lambda().unwrap_or(0.0));
        kinks += r.kink_count();
        last = Some(r);
    }
    if let (Some(p), Some(r)) = (&a.out, &last) {
        io::write_grad_report(io::create_file(p)?, r)?;
    }
    let pass = worst_h <= GRAD_H_TOLERANCE && worst_l <= GRAD_LAMBDA_TOLERANCE;
    // The verdict line is the command's result, so it is printed even with --quiet.
    println!(
        "max_rel_err grad_h {worst_h:.3e} (<= {GRAD_H_TOLERANCE:e}) grad_lambda {worst_l:.3e} (<= {GRAD_LAMBDA_TOLERANCE:e}) kink_excluded {kinks} {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::CheckFailed)
    }
}

/// Reference filters from either a filter file or a dataset's ground truth.
fn reference_filters(path: &Path) -> Result<FilterBank, Failure> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        std::fs::File::open(path)
            .map_err(Error::from)?
            .read_exact(&mut magic)
            .map_err(Error::from)?;
    }
    if magic == io::DATASET_MAGIC {
        io::read_dataset(path)?
            .truth
            .map(|t| t.filters)
            .ok_or_else(|| usage(format!("{} has no ground truth", path.display())))
    } else {
        Ok(io::read_filters(path)?.filters)
    }
}

fn eval_filters(ctx: &Context, a: EvalFiltersArgs) -> Outcome {
    let learned = io::read_filters(&a.filters)?.filters;
    let truth = reference_filters(&a.truth)?;
    let m = match_filters(&truth, &learned, a.max_shift.unwrap_or(truth.filter_len() / 2))?;
    for c in 0..m.permutation.len() {
        ctx.say(format_args!(
            "learned {c} -> true {} shift {:+} sign {:+} err {:.2} dB",
            m.permutation[c], m.shifts[c], m.signs[c], m.err_db[c]
        ));
    }
    ctx.say(format_args!("median {:.2} dB, worst {:.2} dB", m.median_err(), m.max_err()));
    if let Some(p) = &a.out {
        io::write_match_result(io::create_file(p)?, &m)?;
    }
    Ok(())
}

fn sort(ctx: &Context, a: SortArgs) -> Outcome {
    let data = io::read_dataset(&a.dataset)?;
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| usage("sort scores against ground truth; the dataset has none (use encode for raw data)"))?;
    let f = io::read_filters(&a.filters)?;
    let enc = trained_encoder(load_encoder(a.encoder.as_deref())?, &f);
    let thresholds = if a.thresholds.is_empty() {
        let codes = encode_batch(&data.windows().collect::<Vec<_>>(), &f.filters, &enc, ctx.exec)?;
        let top = codes.iter().flat_map(|x| x.as_slice().iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        (1..=DEFAULT_THRESHOLD_COUNT)
            .map(|i| top * i as f64 / (DEFAULT_THRESHOLD_COUNT + 1) as f64)
            .collect()
    } else {
        a.thresholds.clone()
    };
    let m = match_filters(&truth.filters, &f.filters, truth.filters.filter_len() / 2)?;
    let det = spike_sort(&data, &f.filters, &enc, &thresholds, None, ctx.exec)?;
    let rep = score_sorting(&det, &truth.events, &m, a.tolerance)?;
    io::write_sort_report(io::create_file(&a.out)?, &rep)?;
    if let Some(i) = rep.best_index() {
        ctx.say(format_args!(
            "best threshold {:.6}: true_miss {:.4} false_alarm {:.4}",
            rep.thresholds[i], rep.true_miss[i], rep.false_alarm[i]
        ));
    }
    for v in &rep.monotonicity_violations {
        log::warn!("detection count rises with threshold at index {v}");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    if a.dataset.is_none() && a.filters.is_none() && a.history.is_none() {
        return Err(usage("give at least one of --dataset, --filters, --history"));
    }
    if let Some(p) = &a.dataset {
        let d = io::read_dataset(p)?;
        println!(
            "dataset: {} windows x {} samples, fs {} Hz, sigma {:.6}, scale {:.6}",
            d.n_windows(),
            d.window_len(),
            d.fs_hz,
            d.sigma,
            d.normalization_scale
        );
        if let Some(t) = &d.truth {
            println!(
                "  truth: {} filters of length {}, {} events",
                t.filters.n_filters(),
                t.filters.filter_len(),
                t.event_count()
            );
        }
    }
    if let Some(p) = &a.filters {
        let f = io::read_filters(p)?;
        println!(
            "filters: C={} K={} lambda {:.6} L {:.6} sigma {:.6}, max |norm - 1| {:.2e}",
            f.filters.n_filters(),
            f.filters.filter_len(),
            f.lambda,
            f.lipschitz,
            f.sigma,
            f.filters.unit_norm_deviation()
        );
    }
    if let Some(p) = &a.history {
        let text = std::fs::read_to_string(p).map_err(Error::from)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let (Some(ep), Some(val), Some(lam)) = (col("epoch"), col("val_loss"), col("lambda")) else {
            return Err(usage(format!("{} is not a history CSV", p.display())));
        };
        println!("history: {} epochs", rows.len());
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            println!("  lambda {} -> {}", first[lam], last[lam]);
            let best = rows
                .iter()
                .filter_map(|r| r[val].parse::<f64>().ok().filter(|v| !v.is_nan()).map(|v| (r[ep], v)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((e, v)) = best {
                println!("  best validation loss {v} at epoch {e}");
            }
            let errs: Vec<String> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with("err_"))
                .map(|(i, h)| format!("{h} {}", last[i]))
                .collect();
            if !errs.is_empty() {
                println!("  final {}", errs.join(", "));
            }
        }
    }
    Ok(())
}
