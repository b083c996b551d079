//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. Where a command
//! takes `--config`, keys in that file override the matching flags, which
//! override built-in defaults.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dtf::{self, DtfConfig, TieBreak};
use crate::error::{Error, Result};
use crate::imagegrid::{self, Image};
use crate::infotheory::{self, DiscreteJoint, RateDistortionQuery};
use crate::labbench::{self, data, ExperimentKind, ExperimentSpec};
use crate::nanonet::checkpoint::Checkpoint;
use crate::nanonet::ModelConfig;
use crate::pipeline::config::KeyValues;
use crate::pipeline::train::{self, Optimizer};
use crate::pipeline::{Lambdas, LossReport, Selection, TokenStream, Tokenizer, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "infotok", version, about = "Adaptive image tokenizer with entropy-driven token filtering")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode an image into a token stream.
    Tokenize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_epsilon)]
        epsilon: Option<f64>,
        #[arg(long, value_parser = parse_alpha)]
        alpha: Option<f64>,
        /// key = value file: epsilon, alpha, d0, sigma2, reference_rate, score_floor.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Reconstruct an image from a token stream.
    Detokenize {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a loss-trace CSV.
    Train {
        /// Directory of PGM/PPM images.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data_dir: Option<PathBuf>,
        /// Number of procedural toy images to train on.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace path; defaults to the checkpoint path with `.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// key = value file; see the README for the keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a lab bench experiment and write its CSV.
    Lab {
        #[arg(long, value_parser = parse_experiment)]
        experiment: ExperimentKind,
        /// key = value experiment spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in correctness checks.
    Verify {
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("epsilon must lie in [0, 1), got {v}"))
    }
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("alpha must lie in (0, 1), got {v}"))
    }
}

fn parse_experiment(s: &str) -> std::result::Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Tokenize {
            image,
            model,
            out: path,
            epsilon,
            alpha,
            config,
        } => {
            let img = imagegrid::load_image(image)?;
            let ck = Checkpoint::load(model)?;
            let mut cfg = DtfConfig::new(ck.params.config.layout()?.pixel_count());
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            if let Some(c) = config {
                let kv = KeyValues::load(c, &["epsilon", "alpha", "d0", "sigma2", "reference_rate", "score_floor"])?;
                kv.apply("epsilon", &mut cfg.epsilon)?;
                kv.apply("alpha", &mut cfg.alpha)?;
                kv.apply("d0", &mut cfg.d0)?;
                kv.apply("sigma2", &mut cfg.sigma2)?;
                kv.apply("score_floor", &mut cfg.score_floor)?;
                if let Some(r) = kv.get("reference_rate")? {
                    cfg.reference_rate = Some(r);
                }
            }
            cfg.validate()?;
            let tok = Tokenizer::new(&ck);
            let enc = tok.encode(&img, &Selection::Dtf(cfg))?;
            write_file(path, &enc.stream.to_bytes()?)?;
            let m = &ck.params.config;
            let (n, k) = (enc.stream.num_patch(), enc.stream.num_global());
            let n0 = m.layout()?.patch_count();
            let rate = infotheory::code_rate(n + k, m.codebook_size, m.image_height, m.image_width, m.channels)?;
            let s = &enc.stream.summary;
            writeln!(out, "N = {n}").ok();
            writeln!(out, "k = {k}").ok();
            writeln!(out, "tau = {}", s.threshold).ok();
            writeln!(out, "H_total = {}", s.h_total).ok();
            writeln!(out, "code_rate_bpp = {rate}").ok();
            writeln!(out, "compression_ratio = {}", (n0 + k) as f64 / (n + k).max(1) as f64).ok();
            if s.infeasible || s.capped {
                writeln!(out, "note = threshold {}", if s.capped { "capped by decoder slots" } else { "not reachable" }).ok();
            }
            Ok(EXIT_OK)
        }
        Command::Detokenize { stream, model, out: path } => {
            let bytes = std::fs::read(stream).map_err(|e| Error::io(stream, e))?;
            let ts = TokenStream::from_bytes(&bytes)?;
            let ck = Checkpoint::load(model)?;
            let img = Tokenizer::new(&ck).decode(&ts)?;
            imagegrid::save_image(&img, path)?;
            let (h, w, c) = img.dims();
            writeln!(out, "wrote {}x{}x{} image to {}", h, w, c, path.display()).ok();
            Ok(EXIT_OK)
        }
        Command::Train {
            data_dir,
            synthetic,
            steps,
            lr,
            out: path,
            trace,
            config,
        } => {
            let kv = match config {
                Some(c) => KeyValues::load(c, TRAIN_KEYS)?,
                None => KeyValues::default(),
            };
            let (model, mut tc) = train_settings(cli.seed, *steps, *lr, &kv)?;
            let images = match (data_dir, synthetic) {
                (Some(dir), _) => load_dir(dir)?,
                (None, Some(n)) => {
                    if model.image_height != model.image_width || model.channels != 1 {
                        return Err(Error::Config("synthetic data is square and grayscale".into()));
                    }
                    data::toy_dataset(*n, model.image_height, cli.seed)?
                }
                (None, None) => return Err(Error::Config("no training data".into())),
            };
            let n0 = model.layout()?.patch_count();
            if matches!(tc.selection, Selection::TopRanked(usize::MAX)) {
                tc.selection = Selection::TopRanked(n0 - model.num_global.min(n0));
            }
            let outcome = train::train(&images, Checkpoint::init(&model)?, &tc)?;
            outcome.checkpoint.save(path)?;
            let trace_path = trace.clone().unwrap_or_else(|| path.with_extension("trace.csv"));
            save_trace(&outcome.trace, &trace_path)?;
            match outcome.trace.last() {
                Some(r) => {
                    writeln!(
                        out,
                        "rec = {} commit = {} glob = {} total = {} (lambda1 = {}, lambda2 = {})",
                        r.rec, r.commit, r.glob, r.total, r.lambda1, r.lambda2
                    )
                    .ok();
                }
                None => {
                    writeln!(out, "no steps run; checkpoint is the initialization").ok();
                }
            }
            Ok(EXIT_OK)
        }
        Command::Lab {
            experiment,
            spec: spec_path,
            model,
            out: csv,
        } => {
            let mut spec = ExperimentSpec::new(*experiment);
            spec.seeds = vec![cli.seed];
            spec.model = model.clone();
            spec.output = csv.clone();
            if let Some(p) = spec_path {
                let kv = KeyValues::load(p, labbench::SPEC_KEYS)?;
                if let Some(k) = kv.get::<ExperimentKind>("kind")? {
                    if k != *experiment {
                        return Err(Error::Config(format!("spec file is for `{k}` but `{experiment}` was requested")));
                    }
                }
                spec.apply(&kv)?;
            }
            let rows = labbench::run(&spec)?;
            if spec.output.is_none() {
                labbench::write_csv(&rows, &mut *out)?;
            } else {
                writeln!(out, "{} rows", rows.len()).ok();
            }
            Ok(EXIT_OK)
        }
        Command::Verify { json, inject_fault } => {
            let checks = verify(*inject_fault);
            let passed = checks.iter().all(|c| c.passed);
            if *json {
                let report = VerifyReport { passed, checks };
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(out, "{text}").ok();
            } else {
                for c in &checks {
                    writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).ok();
                }
            }
            Ok(if passed { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "learning_rate",
    "batch_size",
    "optimizer",
    "commit_weight",
    "glob_weight",
    "ema_decay",
    "patch_dropout",
    "restart_patience",
    "image_size",
    "channels",
    "token_dim",
    "num_global",
    "depth",
    "patch_size",
    "overlap_rate",
    "codebook_size",
];

/// Model and training settings for `train`: defaults, then flags, then the
/// config file.
pub fn train_settings(seed: u64, steps: Option<usize>, lr: Option<f64>, kv: &KeyValues) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig { seed, ..ModelConfig::default() };
    let mut tc = TrainConfig::new(Selection::TopRanked(usize::MAX));
    tc.seed = seed;
    tc.steps = steps.unwrap_or(tc.steps);
    tc.learning_rate = lr.unwrap_or(tc.learning_rate);
    kv.apply("steps", &mut tc.steps)?;
    kv.apply("learning_rate", &mut tc.learning_rate)?;
    kv.apply("batch_size", &mut tc.batch_size)?;
    kv.apply("ema_decay", &mut tc.ema_decay)?;
    kv.apply("patch_dropout", &mut tc.patch_dropout)?;
    kv.apply("commit_weight", &mut tc.lambdas.commit)?;
    kv.apply("glob_weight", &mut tc.lambdas.glob)?;
    if let Some(p) = kv.get::<usize>("restart_patience")? {
        tc.restart_patience = (p > 0).then_some(p);
    }
    match kv.raw("optimizer") {
        None | Some("gd") => {}
        Some("adam") => tc.optimizer = Optimizer::adam(),
        Some(o) => return Err(Error::Config(format!("unknown optimizer `{o}` (expected gd or adam)"))),
    }
    if let Some(s) = kv.get::<usize>("image_size")? {
        model.image_height = s;
        model.image_width = s;
    }
    kv.apply("channels", &mut model.channels)?;
    kv.apply("token_dim", &mut model.token_dim)?;
    kv.apply("num_global", &mut model.num_global)?;
    kv.apply("depth", &mut model.depth)?;
    kv.apply("patch_size", &mut model.patch_size)?;
    kv.apply("overlap_rate", &mut model.overlap_rate)?;
    kv.apply("codebook_size", &mut model.codebook_size)?;
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images in {}", dir.display())));
    }
    paths.iter().map(imagegrid::load_image).collect()
}

fn save_trace(trace: &[LossReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let fail = |e: csv::Error| Error::Config(format!("cannot write {}: {e}", path.display()));
    w.write_record(["step", "rec", "commit", "glob", "total"]).map_err(fail)?;
    for (i, r) in trace.iter().enumerate() {
        w.write_record([i.to_string(), r.rec.to_string(), r.commit.to_string(), r.glob.to_string(), r.total.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
struct VerifyReport {
    passed: bool,
    checks: Vec<Check>,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_joint(rng: &mut ChaCha8Rng, vars: usize) -> Result<DiscreteJoint> {
    let dims: Vec<usize> = (0..vars).map(|_| rng.gen_range(2..=4)).collect();
    let cells = dims.iter().product();
    DiscreteJoint::from_weights(dims, (0..cells).map(|_| rng.gen::<f64>()).collect())
}

/// Runs the built-in correctness checks. `inject_fault` reverses the DTF tie-break so the
/// oracle comparison must fail.
pub fn verify(inject_fault: bool) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();

    out.push(check("chain_rule", (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let j = random_joint(&mut rng, 3)?;
            let lhs = infotheory::exact_mi(&j, &[0], &[1, 2], &[])?;
            let rhs = infotheory::exact_mi(&j, &[0], &[1], &[])? + infotheory::exact_mi(&j, &[0], &[2], &[1])?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok((worst <= 1e-12, format!("200 joints, max |I(x;z,g) - I(x;z) - I(x;g|z)| = {worst:.2e}")))
    })()));

    out.push(check("data_processing", (|| {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..200 {
            let j = random_joint(&mut rng, 2)?;
            let out_size = rng.gen_range(1..=4);
            let f: Vec<usize> = (0..j.dims()[1]).map(|_| rng.gen_range(0..out_size)).collect();
            let before = infotheory::exact_mi(&j, &[0], &[1], &[])?;
            let after = infotheory::exact_mi(&j.push_forward(1, out_size, &f)?, &[0], &[1], &[])?;
            worst = worst.max(after - before);
        }
        Ok((worst <= 1e-12, format!("200 joints, max I(A;f(B)) - I(A;B) = {worst:.2e}")))
    })()));

    out.push(check("rate_distortion", (|| {
        let r = |d0: f64| {
            infotheory::rate_distortion(RateDistortionQuery {
                sigma2: 1.0,
                d0,
                pixel_count: 1,
            })
        };
        let one = r(0.25)?;
        let zero = r(1.0)?;
        Ok((one == 1.0 && zero == 0.0, format!("R(0.25) = {one}, R(1) = {zero}")))
    })()));

    out.push(check("rate_gain_distortion_bound", (|| {
        let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let values = grid.iter().map(|&r| infotheory::rate_gain_distortion_bound(1.0, r)).collect::<Result<Vec<_>>>()?;
        let decreasing = values.windows(2).all(|w| w[1] < w[0]);
        let half = infotheory::rate_gain_distortion_bound(0.8, 0.5)?;
        Ok((decreasing && half == 0.4, format!("strictly decreasing: {decreasing}, bound(0.8, 0.5) = {half}")))
    })()));

    let tie = if inject_fault {
        TieBreak::HigherIndexFirst
    } else {
        TieBreak::LowerIndexFirst
    };
    out.push(check("dtf_oracle", (|| {
        let cases = 500;
        let mut mismatches = 0;
        for _ in 0..cases {
            let m = rng.gen_range(1..=12);
            let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..4) as f64).collect();
            let total: f64 = scores.iter().sum();
            let tau = rng.gen_range(0.0..=total + 1.0);
            let order = dtf::rank_tokens_with(&scores, tie)?;
            let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
            let prefix = dtf::select_min_prefix(&sorted, tau)?;
            let mut chosen = order[..prefix.count].to_vec();
            chosen.sort_unstable();
            let expected = dtf::brute_force_canonical_subset(&scores, tau)?;
            let agrees = match expected {
                None => prefix.infeasible,
                Some(e) => !prefix.infeasible && e == chosen,
            };
            mismatches += usize::from(!agrees);
        }
        Ok((mismatches == 0, format!("{cases} cases, {mismatches} disagree with exhaustive search")))
    })()));

    out.push(check("gradient_check", (|| {
        let (ck, img, sel) = gradient_check_fixture()?;
        let r = train::grad_check(&ck, &img, &sel, Lambdas::default(), 1e-5)?;
        Ok((
            r.max_relative_error < 1e-4,
            format!("{} parameters, max relative error {:.2e} at {}[{}]", r.checked, r.max_relative_error, r.worst.0, r.worst.1),
        ))
    })()));
    out
}

/// Two-by-two patch model on a 4×4 image used by the gradient check.
pub fn gradient_check_fixture() -> Result<(Checkpoint, Image, Selection)> {
    let cfg = ModelConfig {
        image_height: 4,
        image_width: 4,
        channels: 1,
        token_dim: 8,
        num_global: 1,
        depth: 1,
        patch_size: 2,
        overlap_rate: 0.0,
        codebook_size: 16,
        patch_code_dim: 4,
        global_code_dim: 6,
        seed: 9,
    };
    let ck = Checkpoint::init(&cfg)?;
    let px = (0..16).map(|i| ((i * 7 % 16) as f64) / 15.0).collect();
    Ok((ck, Image::new(4, 4, 1, px)?, Selection::Explicit(vec![3, 0])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("infotok").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["tokenize", "--image", "a", "--model", "b", "--out", "c", "--epsilon", "1.5"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["lab", "--experiment", "nope"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train", "--out", "x"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["verify", "--unknown"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn verify_passes_and_detects_fault() {
        let checks = verify(false);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        let broken = verify(true);
        let oracle = broken.iter().find(|c| c.name == "dtf_oracle").unwrap();
        assert!(!oracle.passed);
        assert!(broken.iter().filter(|c| c.name != "dtf_oracle").all(|c| c.passed));
    }

    #[test]
    fn train_settings_precedence() {
        let kv = KeyValues::parse("steps = 7\noptimizer = adam\ntoken_dim = 24", TRAIN_KEYS).unwrap();
        let (m, t) = train_settings(3, Some(50), Some(0.5), &kv).unwrap();
        assert_eq!(t.steps, 7);
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.optimizer, Optimizer::adam());
        assert_eq!((m.token_dim, m.seed, t.seed), (24, 3, 3));
        let bad = KeyValues::parse("optimizer = sgdm", TRAIN_KEYS).unwrap();
        assert!(train_settings(0, None, None, &bad).is_err());
    }
}
