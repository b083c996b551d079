use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{data, save_csv, test_seed, ExperimentKind, ExperimentSpec, MetricRow, Protocol};
use crate::dtf::DtfConfig;
use crate::error::{Error, Result};
use crate::imagegrid::{patch_count, Image};
use crate::infotheory;
use crate::nanonet::checkpoint::Checkpoint;
use crate::nanonet::Origin;
use crate::pipeline::{train, Encoded, Selection, TokenStream, Tokenizer};

/// `n` positions spread evenly over `0..n0`.
pub fn spread(n: usize, n0: usize) -> Vec<usize> {
    let n = n.min(n0);
    (0..n).map(|i| i * n0 / n).collect()
}

/// Trains a model of the protocol's architecture with `num_global` globals on
/// the procedural training set for `seed`.
pub fn train_reference(protocol: &Protocol, num_global: usize, selection: Selection, seed: u64) -> Result<Checkpoint> {
    let mut model = protocol.model.clone();
    model.num_global = num_global;
    model.seed = seed;
    let init = Checkpoint::init(&model)?;
    let data = data::toy_dataset(protocol.train_images, model.image_height, seed)?;
    let mut cfg = protocol.train.clone();
    cfg.selection = selection;
    cfg.seed = seed;
    Ok(train(&data, init, &cfg)?.checkpoint)
}

/// Mean MSE of the valid rows accepted by `keep`.
pub fn mean_mse(rows: &[MetricRow], keep: impl Fn(&MetricRow) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.valid && keep(r)).map(|r| r.mse).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregate of one selection rule over an image set.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub mse: f64,
    pub tokens_used: usize,
    pub redundancy: f64,
}

/// Gaussian redundancy between grid-consecutive selected patch projections,
/// pooled over images. `NaN` when there are too few pairs.
fn pair_redundancy(encoded: &[&Encoded]) -> f64 {
    let mut pairs: Vec<(Array1<f64>, Array1<f64>)> = Vec::new();
    for e in encoded {
        let Some(q) = &e.quantized else { continue };
        let mut patches: Vec<(usize, &Array1<f64>)> = q
            .origin
            .iter()
            .zip(&q.projections)
            .filter_map(|(o, p)| match o {
                Origin::Patch(i) => Some((*i, p)),
                _ => None,
            })
            .collect();
        patches.sort_by_key(|(i, _)| *i);
        pairs.extend(patches.windows(2).map(|w| (w[0].1.clone(), w[1].1.clone())));
    }
    let Some(d) = pairs.first().map(|(a, _)| a.len()) else {
        return f64::NAN;
    };
    let samples = Array3::from_shape_fn((pairs.len(), 2, d), |(s, t, c)| if t == 0 { pairs[s].0[c] } else { pairs[s].1[c] });
    infotheory::redundancy(&samples).unwrap_or(f64::NAN)
}

fn evaluate(tok: &Tokenizer, images: &[Image], mut selection: impl FnMut(usize, &Image) -> Selection) -> Result<RowSummary> {
    let mut mse = 0.0;
    let mut tokens = 0;
    let mut encoded = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (out, enc) = tok.round_trip(img, &selection(i, img))?;
        mse += out.mse(img)?;
        tokens += enc.stream.num_global() + enc.stream.num_patch();
        encoded.push(enc);
    }
    let n = images.len().max(1);
    Ok(RowSummary {
        mse: mse / n as f64,
        tokens_used: tokens / n,
        redundancy: pair_redundancy(&encoded.iter().collect::<Vec<_>>()),
    })
}

fn row(kind: ExperimentKind, label: &str, param: f64, seed: u64, s: &RowSummary, started: Instant) -> MetricRow {
    let mut r = MetricRow::new(kind, label, param, seed, s.mse, s.tokens_used);
    r.redundancy_estimate = s.redundancy;
    r.seconds = started.elapsed().as_secs_f64();
    r
}

/// Retrains the model for every global count `k` in the sweep. Setting 1
/// keeps `N₀ − k_max` evenly spread patches and adds `k` globals; setting 2
/// keeps the total fixed at `N₀ − k_max` and gives `k` of those slots to
/// globals.
pub fn exp_global_sweep(spec: &ExperimentSpec) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let kind = ExperimentKind::GlobalSweep;
    let n0 = spec.protocol.model.layout()?.patch_count();
    let k_max = spec.sweep.iter().cloned().fold(0.0, f64::max) as usize;
    let fixed = n0 - k_max;
    let mut protocol = spec.protocol.clone();
    protocol.train.patch_dropout = 0.0;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let images = spec.images(seed)?;
        for &kv in &spec.sweep {
            let k = kv as usize;
            let settings = [("setting1", spread(fixed, n0)), ("setting2", spread(fixed - k, n0))];
            let mut shared: Option<MetricRow> = None;
            for (label, patches) in settings {
                if let (Some(r), 0) = (&shared, k) {
                    let mut r = r.clone();
                    r.label = label.into();
                    rows.push(r);
                    continue;
                }
                let started = Instant::now();
                let sel = Selection::Explicit(patches);
                let r = match train_reference(&protocol, k, sel.clone(), seed) {
                    Ok(ck) => {
                        let s = evaluate(&Tokenizer::new(&ck), &images, |_, _| sel.clone())?;
                        row(kind, label, kv, seed, &s, started)
                    }
                    Err(Error::TrainingDiverged { .. }) => MetricRow::invalid(kind, label, kv, seed),
                    Err(e) => return Err(e),
                };
                shared = Some(r.clone());
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    Start,
    End,
    Random,
}

impl Truncation {
    pub const ALL: [Truncation; 3] = [Truncation::Start, Truncation::End, Truncation::Random];

    pub fn name(self) -> &'static str {
        match self {
            Truncation::Start => "start",
            Truncation::End => "end",
            Truncation::Random => "random",
        }
    }

    /// Positions kept after deleting `deleted` of `n0` patches.
    pub fn kept(self, n0: usize, deleted: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let deleted = deleted.min(n0);
        match self {
            Truncation::Start => (deleted..n0).collect(),
            Truncation::End => (0..n0 - deleted).collect(),
            Truncation::Random => {
                let mut v = sample(rng, n0, n0 - deleted).into_vec();
                v.sort_unstable();
                v
            }
        }
    }
}

fn row_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9e37_79b9).wrapping_add(b));
    rng
}

/// Deletes patches from the start, the end or at random positions, masking
/// them in the decoder input. Needs a model without globals.
pub fn exp_truncation(spec: &ExperimentSpec, ck: &Checkpoint) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let kind = ExperimentKind::Truncation;
    if ck.params.config.num_global != 0 {
        return Err(Error::Config("truncation runs on a model without global tokens".into()));
    }
    let tok = Tokenizer::new(ck);
    let n0 = ck.params.config.layout()?.patch_count();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let images = spec.images(seed)?;
        for &dv in &spec.sweep {
            let deleted = dv as usize;
            if deleted >= n0 {
                return Err(Error::Config(format!("cannot delete {deleted} of {n0} patches")));
            }
            for strategy in Truncation::ALL {
                let started = Instant::now();
                let mut rng = row_rng(seed, deleted as u64, strategy as u64);
                let s = evaluate(&tok, &images, |_, _| Selection::Explicit(strategy.kept(n0, deleted, &mut rng)))?;
                rows.push(row(kind, strategy.name(), dv, seed, &s, started));
            }
        }
    }
    Ok(rows)
}

/// Selection rules compared against DTF at its own per-image budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Ex1
    Random,
    /// Ex2
    Uniform,
    /// Ex3
    First,
    /// Ex4
    Last,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Random, Baseline::Uniform, Baseline::First, Baseline::Last];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Random => "ex1_random",
            Baseline::Uniform => "ex2_uniform",
            Baseline::First => "ex3_first",
            Baseline::Last => "ex4_last",
        }
    }

    pub fn pick(self, n: usize, n0: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = n.min(n0);
        match self {
            Baseline::Random => {
                let mut v = sample(rng, n0, n).into_vec();
                v.sort_unstable();
                v
            }
            Baseline::Uniform => spread(n, n0),
            Baseline::First => (0..n).collect(),
            Baseline::Last => (n0 - n..n0).collect(),
        }
    }
}

/// Per-image rows for DTF and the four baselines at DTF's token count.
pub fn exp_baselines(spec: &ExperimentSpec, ck: &Checkpoint) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let kind = ExperimentKind::Baselines;
    let tok = Tokenizer::new(ck);
    let layout = ck.params.config.layout()?;
    let n0 = layout.patch_count();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let images = spec.images(seed)?;
        for &eps in &spec.sweep {
            let dtf = Selection::Dtf(DtfConfig::new(layout.pixel_count()).with_epsilon(eps));
            for (i, img) in images.iter().enumerate() {
                let started = Instant::now();
                let reference = evaluate(&tok, std::slice::from_ref(img), |_, _| dtf.clone())?;
                let budget = reference.tokens_used - ck.params.config.num_global;
                let mut r = row(kind, "dtf", eps, seed, &reference, started);
                r.image = Some(i);
                rows.push(r);
                for b in Baseline::ALL {
                    let started = Instant::now();
                    let mut rng = row_rng(seed, i as u64, b as u64);
                    let sel = Selection::Explicit(b.pick(budget, n0, &mut rng));
                    let s = evaluate(&tok, std::slice::from_ref(img), |_, _| sel.clone())?;
                    let mut r = row(kind, b.name(), eps, seed, &s, started);
                    r.image = Some(i);
                    rows.push(r);
                }
            }
        }
    }
    Ok(rows)
}

/// Per-image token count and MSE for each epsilon.
pub fn exp_epsilon_sweep(spec: &ExperimentSpec, ck: &Checkpoint) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let kind = ExperimentKind::EpsilonSweep;
    let tok = Tokenizer::new(ck);
    let pixels = ck.params.config.layout()?.pixel_count();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let images = spec.images(seed)?;
        for (i, img) in images.iter().enumerate() {
            for &eps in &spec.sweep {
                let started = Instant::now();
                let sel = Selection::Dtf(DtfConfig::new(pixels).with_epsilon(eps));
                let s = evaluate(&tok, std::slice::from_ref(img), |_, _| sel.clone())?;
                let mut r = row(kind, "dtf", eps, seed, &s, started);
                r.image = Some(i);
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

/// Fraction of `positions` (row-major) that fall in the first or last grid
/// column. `NaN` for an empty selection.
pub fn edge_fraction(positions: &[usize], cols: usize) -> f64 {
    if positions.is_empty() || cols == 0 {
        return f64::NAN;
    }
    let edge = positions.iter().filter(|&&p| p % cols == 0 || p % cols == cols - 1).count();
    edge as f64 / positions.len() as f64
}

/// Edge fraction over all patch entries of a set of streams.
pub fn edge_bias(streams: &[TokenStream]) -> Result<f64> {
    let (mut edge, mut total) = (0usize, 0usize);
    for s in streams {
        let h = &s.header;
        let (_, cols) = patch_count(h.height as usize, h.width as usize, h.patch_size as usize, h.overlap_rate)?;
        let pos: Vec<usize> = s.patch_entries.iter().map(|e| e.position as usize).collect();
        if !pos.is_empty() {
            edge += (edge_fraction(&pos, cols) * pos.len() as f64).round() as usize;
            total += pos.len();
        }
    }
    Ok(if total == 0 { f64::NAN } else { edge as f64 / total as f64 })
}

/// Edge fraction of DTF selections on the evaluation set and on flat white,
/// flat black and noise images, next to the uniform expectation `2/cols`.
pub fn exp_edge_bias(spec: &ExperimentSpec, ck: &Checkpoint) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let kind = ExperimentKind::EdgeBias;
    let cfg = &ck.params.config;
    let tok = Tokenizer::new(ck);
    let layout = cfg.layout()?;
    let (_, cols) = patch_count(cfg.image_height, cfg.image_width, cfg.patch_size, cfg.overlap_rate)?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let mut sets = vec![("dataset".to_string(), spec.images(seed)?)];
        for (name, img) in data::reference_images(cfg.image_height, cfg.image_width, cfg.channels, test_seed(seed))? {
            sets.push((name.to_string(), vec![img]));
        }
        for &eps in &spec.sweep {
            let sel = Selection::Dtf(DtfConfig::new(layout.pixel_count()).with_epsilon(eps));
            for (name, images) in &sets {
                let started = Instant::now();
                let mut streams = Vec::with_capacity(images.len());
                let mut mse = 0.0;
                for img in images {
                    let (out, enc) = tok.round_trip(img, &sel)?;
                    mse += out.mse(img)?;
                    streams.push(enc.stream);
                }
                let used = streams.iter().map(|s| s.num_global() + s.num_patch()).sum::<usize>() / images.len().max(1);
                let mut r = MetricRow::new(kind, name.clone(), eps, seed, mse / images.len().max(1) as f64, used);
                r.statistic = edge_bias(&streams)?;
                r.seconds = started.elapsed().as_secs_f64();
                rows.push(r);
            }
            let mut r = MetricRow::new(kind, "uniform", eps, seed, f64::NAN, 0);
            r.psnr = f64::NAN;
            r.statistic = 2.0 / cols as f64;
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Runs the experiment named by `spec`, loading its checkpoint when needed,
/// and writes the CSV when the spec has an output path.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<MetricRow>> {
    spec.validate()?;
    let model = match (&spec.model, spec.kind.needs_model()) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        (None, true) => {
            return Err(Error::Config(format!("experiment `{}` needs a model checkpoint", spec.kind)));
        }
        _ => None,
    };
    let adopted;
    let spec = match &model {
        Some(m) => {
            let mut s = spec.clone();
            s.protocol.model = m.params.config;
            adopted = s;
            &adopted
        }
        None => spec,
    };
    let ck = || model.as_ref().ok_or_else(|| Error::Config("no checkpoint".into()));
    let rows = match spec.kind {
        ExperimentKind::GlobalSweep => exp_global_sweep(spec)?,
        ExperimentKind::Truncation => exp_truncation(spec, ck()?)?,
        ExperimentKind::Baselines => exp_baselines(spec, ck()?)?,
        ExperimentKind::EpsilonSweep => exp_epsilon_sweep(spec, ck()?)?,
        ExperimentKind::EdgeBias => exp_edge_bias(spec, ck()?)?,
    };
    if let Some(out) = &spec.output {
        save_csv(&rows, out)?;
    }
    Ok(rows)
}
