//! Desk-scale experiment protocols: the global-token sweep, truncation
//! curves, selection baselines, the epsilon sweep and the edge statistic.
//!
//! Every experiment yields [`MetricRow`]s, written as CSV with the column
//! order of [`CSV_COLUMNS`].

pub mod data;
pub mod experiments;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dtf::DEFAULT_EPSILON;
use crate::error::{Error, Result};
use crate::imagegrid::{self, Image};
use crate::nanonet::ModelConfig;
use crate::pipeline::config::KeyValues;
use crate::pipeline::train::{DropoutPattern, Optimizer};
use crate::pipeline::{Lambdas, Selection, TrainConfig};

pub use experiments::{
    edge_bias, edge_fraction, exp_baselines, exp_edge_bias, exp_epsilon_sweep, exp_global_sweep, exp_truncation,
    mean_mse, run, spread, train_reference, Baseline, RowSummary, Truncation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    GlobalSweep,
    Truncation,
    Baselines,
    EpsilonSweep,
    EdgeBias,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::GlobalSweep,
        ExperimentKind::Truncation,
        ExperimentKind::Baselines,
        ExperimentKind::EpsilonSweep,
        ExperimentKind::EdgeBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GlobalSweep => "global_sweep",
            ExperimentKind::Truncation => "truncation",
            ExperimentKind::Baselines => "baselines",
            ExperimentKind::EpsilonSweep => "epsilon_sweep",
            ExperimentKind::EdgeBias => "edge_bias",
        }
    }

    /// Whether the experiment evaluates an existing checkpoint rather than
    /// training its own models.
    pub fn needs_model(self) -> bool {
        !matches!(self, ExperimentKind::GlobalSweep)
    }

    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            ExperimentKind::GlobalSweep => vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            ExperimentKind::Truncation => vec![0.0, 8.0, 16.0, 24.0, 30.0, 40.0, 48.0, 56.0, 63.0],
            ExperimentKind::Baselines | ExperimentKind::EdgeBias => vec![DEFAULT_EPSILON],
            ExperimentKind::EpsilonSweep => vec![0.05, 0.10, 0.15],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Training and data settings shared by the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    /// Architecture used for every model the bench trains; `num_global` and
    /// `seed` are overridden per sweep point.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        let mut train = TrainConfig::new(Selection::TopRanked(usize::MAX));
        train.steps = 3000;
        train.learning_rate = 3e-3;
        train.batch_size = 4;
        train.lambdas = Lambdas { commit: 0.001, glob: 0.001 };
        train.optimizer = Optimizer::adam();
        train.patch_dropout = 0.5;
        train.dropout_pattern = DropoutPattern::Mixed;
        Self {
            model: ModelConfig::default(),
            train,
            train_images: 256,
            test_images: 32,
        }
    }
}

impl Protocol {
    /// The default protocol with the schedule used for `kind`. Global-sweep
    /// models train longer at a lower rate.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let mut p = Self::default();
        if kind == ExperimentKind::GlobalSweep {
            p.train.steps = 6000;
            p.train.learning_rate = 1e-3;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::Config("train and test image counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Image files. Empty means the procedural toy set generated per seed.
    pub dataset: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub protocol: Protocol,
}

pub const SPEC_KEYS: &[&str] = &[
    "kind",
    "dataset",
    "model",
    "sweep",
    "seeds",
    "output",
    "steps",
    "learning_rate",
    "batch_size",
    "patch_dropout",
    "train_images",
    "test_images",
    "token_dim",
    "depth",
];

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            dataset: Vec::new(),
            model: None,
            sweep: kind.default_sweep(),
            seeds: vec![0],
            output: None,
            protocol: Protocol::for_kind(kind),
        }
    }

    /// Reads a `key = value` spec. `kind` may be omitted when `fallback`
    /// names the experiment; a `kind` that disagrees with it is an error.
    pub fn from_key_values(kv: &KeyValues, fallback: Option<ExperimentKind>) -> Result<Self> {
        let kind = match (kv.get::<ExperimentKind>("kind")?, fallback) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("spec file is for `{a}` but `{b}` was requested")));
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("spec names no experiment kind".into())),
        };
        let mut spec = Self::new(kind);
        spec.apply(kv)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Overwrites every field named in `kv` except `kind`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(paths) = kv.list::<String>("dataset")? {
            self.dataset = paths.into_iter().map(PathBuf::from).collect();
        }
        if let Some(m) = kv.raw("model") {
            self.model = Some(PathBuf::from(m));
        }
        if let Some(o) = kv.raw("output") {
            self.output = Some(PathBuf::from(o));
        }
        if let Some(v) = kv.list("sweep")? {
            self.sweep = v;
        }
        if let Some(v) = kv.list("seeds")? {
            self.seeds = v;
        }
        let p = &mut self.protocol;
        kv.apply("steps", &mut p.train.steps)?;
        kv.apply("learning_rate", &mut p.train.learning_rate)?;
        kv.apply("batch_size", &mut p.train.batch_size)?;
        kv.apply("patch_dropout", &mut p.train.patch_dropout)?;
        kv.apply("train_images", &mut p.train_images)?;
        kv.apply("test_images", &mut p.test_images)?;
        kv.apply("token_dim", &mut p.model.token_dim)?;
        kv.apply("depth", &mut p.model.depth)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, fallback: Option<ExperimentKind>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path, SPEC_KEYS)?, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.sweep.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep and seed lists must be nonempty".into()));
        }
        if self.sweep.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sweep values must be finite".into()));
        }
        let n0 = self.protocol.model.layout()?.patch_count();
        let whole = |v: f64| v >= 0.0 && v.fract() == 0.0;
        match self.kind {
            ExperimentKind::GlobalSweep => {
                let k_max = self.sweep.iter().cloned().fold(0.0, f64::max);
                if !self.sweep.iter().all(|&v| whole(v)) || k_max as usize >= n0 {
                    return Err(Error::Config(format!(
                        "global counts must be whole numbers below the patch count {n0}"
                    )));
                }
            }
            ExperimentKind::Truncation => {
                if !self.sweep.iter().all(|&v| whole(v) && (v as usize) < n0) {
                    return Err(Error::Config(format!("deletion counts must be whole numbers in [0, {n0})")));
                }
            }
            _ => {
                if !self.sweep.iter().all(|&v| (0.0..1.0).contains(&v)) {
                    return Err(Error::Config("epsilon values must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Evaluation images for `seed`: the listed files, or a held-out
    /// procedural set.
    pub fn images(&self, seed: u64) -> Result<Vec<Image>> {
        if self.dataset.is_empty() {
            let size = self.protocol.model.image_height;
            data::toy_dataset(self.protocol.test_images, size, test_seed(seed))
        } else {
            self.dataset.iter().map(imagegrid::load_image).collect()
        }
    }
}

/// Generator seed of the held-out set, disjoint from training seeds.
pub(crate) fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7e57_0000_0000
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment: ExperimentKind,
    /// Setting, strategy or image class the row measures.
    pub label: String,
    /// The sweep value: global count, deletions or epsilon.
    pub param: f64,
    pub seed: u64,
    /// Image index for per-image rows.
    pub image: Option<usize>,
    pub mse: f64,
    pub psnr: f64,
    pub tokens_used: usize,
    /// Gaussian redundancy between consecutive selected patch codes, `NaN`
    /// when too few samples were available.
    pub redundancy_estimate: f64,
    /// Experiment-specific value: the edge fraction for edge rows.
    pub statistic: f64,
    pub seconds: f64,
    /// `false` when training diverged for this row.
    pub valid: bool,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "experiment",
    "label",
    "param",
    "seed",
    "image",
    "mse",
    "psnr",
    "tokens_used",
    "redundancy_estimate",
    "statistic",
    "seconds",
    "valid",
    "note",
];

/// `10·log₁₀(1/mse)` for pixels in `[0, 1]`; infinite at zero error.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

impl MetricRow {
    pub fn new(experiment: ExperimentKind, label: impl Into<String>, param: f64, seed: u64, mse: f64, tokens_used: usize) -> Self {
        Self {
            experiment,
            label: label.into(),
            param,
            seed,
            image: None,
            mse,
            psnr: psnr(mse),
            tokens_used,
            redundancy_estimate: f64::NAN,
            statistic: f64::NAN,
            seconds: 0.0,
            valid: true,
        }
    }

    /// A row for a sweep point whose training failed.
    pub fn invalid(experiment: ExperimentKind, label: impl Into<String>, param: f64, seed: u64) -> Self {
        let mut r = Self::new(experiment, label, param, seed, f64::NAN, 0);
        r.valid = false;
        r
    }

    fn record(&self, note: &str) -> Vec<String> {
        let num = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        vec![
            self.experiment.name().to_string(),
            self.label.clone(),
            format!("{}", self.param),
            self.seed.to_string(),
            self.image.map(|i| i.to_string()).unwrap_or_default(),
            num(self.mse),
            num(self.psnr),
            self.tokens_used.to_string(),
            num(self.redundancy_estimate),
            num(self.statistic),
            format!("{:.3}", self.seconds),
            self.valid.to_string(),
            note.to_string(),
        ]
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| Error::Config(format!("cannot write CSV: {e}"));
    w.write_record(CSV_COLUMNS).map_err(fail)?;
    for r in rows {
        let note = if r.valid { "" } else { "training diverged" };
        w.write_record(r.record(note)).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::Config(format!("cannot write CSV: {e}")))?;
    Ok(())
}

pub fn save_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_matches_mse() {
        assert_eq!(psnr(0.01), 20.0);
        assert_eq!(psnr(1.0), 0.0);
        assert_eq!(psnr(0.0), f64::INFINITY);
        let r = MetricRow::new(ExperimentKind::Truncation, "start", 3.0, 1, 1e-3, 61);
        assert!((r.psnr - 30.0).abs() < 1e-12);
    }

    #[test]
    fn kinds_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("sweep".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn spec_parsing_and_validation() {
        let kv = KeyValues::parse("kind = truncation\nmodel = m.ckpt\nsweep = 0, 10, 63\nseeds = 1,2\nsteps = 5", SPEC_KEYS).unwrap();
        let spec = ExperimentSpec::from_key_values(&kv, None).unwrap();
        assert_eq!(spec.kind, ExperimentKind::Truncation);
        assert_eq!(spec.sweep, vec![0.0, 10.0, 63.0]);
        assert_eq!(spec.seeds, vec![1, 2]);
        assert_eq!(spec.protocol.train.steps, 5);
        assert!(ExperimentSpec::from_key_values(&kv, Some(ExperimentKind::Baselines)).is_err());

        let bad = KeyValues::parse("kind = truncation\nmodel = m\nsweep = 64", SPEC_KEYS).unwrap();
        assert!(ExperimentSpec::from_key_values(&bad, None).is_err());
        let bad = KeyValues::parse("sweep = 1.5", SPEC_KEYS).unwrap();
        assert!(ExperimentSpec::from_key_values(&bad, Some(ExperimentKind::EpsilonSweep)).is_err());
        let ok = KeyValues::parse("sweep = 0, 16", SPEC_KEYS).unwrap();
        assert!(ExperimentSpec::from_key_values(&ok, Some(ExperimentKind::GlobalSweep)).is_ok());
        let bad = KeyValues::parse("sweep = 1.5", SPEC_KEYS).unwrap();
        assert!(ExperimentSpec::from_key_values(&bad, Some(ExperimentKind::GlobalSweep)).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut rows = vec![MetricRow::new(ExperimentKind::EpsilonSweep, "dtf", 0.1, 3, 0.01, 40)];
        rows[0].image = Some(7);
        rows.push(MetricRow::invalid(ExperimentKind::GlobalSweep, "setting1", 16.0, 0));
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("epsilon_sweep,dtf,0.1,3,7,0.01,20,40,,,"));
        assert!(lines[2].ends_with("false,training diverged"));
        assert_eq!(lines.len(), 3);
    }
}
