//! Training: the differentiable forward pass, plain gradient descent with
//! EMA codebook updates, and a finite-difference gradient checker.
//!
//! Token selection and code assignment are decided on forward values and held
//! fixed for the backward pass. Gradients cross the quantizer with the
//! straight-through estimator.

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{holistic_target, select, Lambdas, LossReport, Selected, Selection};
use crate::error::{Error, Result};
use crate::imagegrid::{Image, PatchGrid};
use crate::nanonet::checkpoint::Checkpoint;
use crate::nanonet::{self, Mat, Origin, Slot, Tape, Var, Weights};
use crate::quantizer::{self, Codebook};

/// How the decoder sees quantized tokens during a differentiable pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerPath {
    /// Forward uses the code entry, backward copies the gradient around it.
    StraightThrough,
    /// Forward and backward both use the unsnapped projection; used by the
    /// gradient checker so the forward function matches its gradient.
    Continuous,
}

/// Discrete choices made on a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Decisions {
    pub selected: Selected,
    /// Code index per row of the augmented sequence.
    pub codes: Vec<usize>,
    pub glob_target: Option<Array1<f64>>,
}

pub(crate) struct Forward {
    pub total: Var,
    pub rec: Var,
    pub commit: Var,
    pub glob: Var,
    pub decisions: Decisions,
    /// Head projections per augmented row, for the codebook update.
    pub projections: Vec<(Origin, Array1<f64>)>,
}

struct Part {
    z: Var,
    decoded: Var,
    commit: Var,
}

#[allow(clippy::too_many_arguments)]
fn quantize_part(
    tape: &mut Tape,
    z: Var,
    head: Var,
    inv: Var,
    cb: &Codebook,
    frozen: Option<&[usize]>,
    path: QuantizerPath,
    origin: Origin,
    codes: &mut Vec<usize>,
    projections: &mut Vec<(Origin, Array1<f64>)>,
) -> Part {
    let proj = tape.matmul(z, head);
    let pv = tape.value(proj).clone();
    let idx: Vec<usize> = match frozen {
        Some(f) => f.to_vec(),
        None => pv.rows().into_iter().map(|r| cb.nearest(r)).collect(),
    };
    let entries = Mat::from_shape_fn((idx.len(), cb.dim()), |(i, j)| cb.entries[(idx[i], j)]);
    let fed = match path {
        QuantizerPath::StraightThrough => tape.straight_through(proj, entries.clone()),
        QuantizerPath::Continuous => proj,
    };
    let decoded = tape.matmul(fed, inv);
    let e = tape.leaf(entries);
    let diff = tape.sub(proj, e);
    let commit = tape.sum_squares(diff);
    codes.extend(&idx);
    projections.extend(pv.rows().into_iter().map(|r| (origin, r.to_owned())));
    Part { z, decoded, commit }
}

/// Where training-time patch dropout removes patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutPattern {
    /// A random subset.
    #[default]
    Scattered,
    /// A random subset, the first or the last patches in grid order, chosen
    /// uniformly.
    Mixed,
}

/// Random deletion applied to a training pass: a fraction drawn uniformly
/// from `[0, max_fraction]` of the selected patches is masked.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dropout {
    pub max_fraction: f64,
    pub pattern: DropoutPattern,
    pub seed: u64,
}

impl Dropout {
    fn apply(&self, selected: &mut Selected) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = selected.count();
        let m = ((rng.gen_range(0.0..=self.max_fraction) * n as f64).floor() as usize).min(n);
        let shape = match self.pattern {
            DropoutPattern::Scattered => 0,
            DropoutPattern::Mixed => rng.gen_range(0..3),
        };
        let mut gone = vec![false; n];
        match shape {
            0 => {
                for i in rand::seq::index::sample(&mut rng, n, m) {
                    gone[i] = true;
                }
            }
            lead => {
                let mut by_position: Vec<usize> = (0..n).collect();
                by_position.sort_by_key(|&i| selected.indices[i]);
                if lead == 2 {
                    by_position.reverse();
                }
                for &i in &by_position[..m] {
                    gone[i] = true;
                }
            }
        }
        let mut slot = 0;
        selected.indices.retain(|_| {
            slot += 1;
            !gone[slot - 1]
        });
    }
}

/// Builds the loss graph for one image. `frozen` replays earlier decisions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    tape: &mut Tape,
    w: &Weights<Var>,
    ck: &Checkpoint,
    img: &Image,
    grid: &PatchGrid,
    selection: &Selection,
    lambdas: Lambdas,
    path: QuantizerPath,
    frozen: Option<&Decisions>,
    dropout: Option<Dropout>,
) -> Result<Forward> {
    let cfg = &ck.params.config;
    let (k, n0) = (cfg.num_global, grid.patches.len());
    let patches = tape.leaf(nanonet::patch_matrix(grid));
    let enc = nanonet::encoder_graph(tape, w, patches);
    if tape.value(enc).iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite encoder output".into()));
    }
    let (selected, glob_target) = match frozen {
        Some(d) => (d.selected.clone(), d.glob_target.clone()),
        None => {
            let v = tape.value(enc);
            let (g, p) = v.view().split_at(Axis(0), k);
            let mut selected = select(g, p, grid, selection)?;
            if let Some(d) = dropout {
                d.apply(&mut selected);
            }
            let target = if k > 0 { Some(holistic_target(p)?) } else { None };
            (selected, target)
        }
    };
    let n = selected.count();
    let mut codes = Vec::with_capacity(k + n);
    let mut projections = Vec::with_capacity(k + n);
    let frozen_codes = frozen.map(|d| d.codes.as_slice());

    let globals = (k > 0).then(|| {
        let z = tape.rows(enc, 0..k);
        quantize_part(
            tape,
            z,
            w.global_head,
            w.global_head_inv,
            &ck.codebooks.global,
            frozen_codes.map(|c| &c[..k]),
            path,
            Origin::Global,
            &mut codes,
            &mut projections,
        )
    });
    let chosen = (n > 0).then(|| {
        let z = tape.assemble(selected.indices.iter().map(|&i| (enc, k + i)).collect());
        quantize_part(
            tape,
            z,
            w.patch_head,
            w.patch_head_inv,
            &ck.codebooks.patch,
            frozen_codes.map(|c| &c[k..]),
            path,
            Origin::Patch(0),
            &mut codes,
            &mut projections,
        )
    });

    let origin: Vec<Origin> = std::iter::repeat(Origin::Global)
        .take(k)
        .chain(selected.indices.iter().map(|&i| Origin::Patch(i)))
        .collect();
    let rows = nanonet::decoder_slots(&origin, n0)?
        .into_iter()
        .map(|slot| match slot {
            Slot::Token(r) if r < k => (globals.as_ref().expect("k > 0").decoded, r),
            Slot::Token(r) => (chosen.as_ref().expect("n > 0").decoded, r - k),
            Slot::Mask => (w.mask_token, 0),
        })
        .collect();
    let input = tape.assemble(rows);
    let out = nanonet::decoder_graph(tape, w, input);
    let rec = tape.reconstruction(out, grid.layout, img.data());

    let commit = match (&globals, &chosen) {
        (Some(g), Some(c)) => tape.add(g.commit, c.commit),
        (Some(p), None) | (None, Some(p)) => p.commit,
        (None, None) => tape.leaf(Mat::zeros((1, 1))),
    };
    let commit = tape.scale(commit, 1.0 / (k + n).max(1) as f64);
    let glob = match (&globals, &glob_target) {
        (Some(g), Some(t)) => {
            let pooled = tape.mean_rows(g.z);
            let t = tape.leaf(t.clone().insert_axis(Axis(0)));
            let diff = tape.sub(pooled, t);
            tape.sum_squares(diff)
        }
        _ => tape.leaf(Mat::zeros((1, 1))),
    };
    let weighted_commit = tape.scale(commit, lambdas.commit);
    let weighted_glob = tape.scale(glob, lambdas.glob);
    let total = tape.add(rec, weighted_commit);
    let total = tape.add(total, weighted_glob);

    for (slot, (o, _)) in projections.iter_mut().enumerate() {
        *o = origin[slot];
    }
    Ok(Forward {
        total,
        rec,
        commit,
        glob,
        decisions: Decisions {
            selected,
            codes,
            glob_target,
        },
        projections,
    })
}

fn report(tape: &Tape, f: &Forward, lambdas: Lambdas) -> Result<LossReport> {
    let total = tape.scalar(f.total);
    if !total.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {total}")));
    }
    let mut r = LossReport::new(tape.scalar(f.rec), tape.scalar(f.commit), tape.scalar(f.glob), lambdas)?;
    r.total = total;
    Ok(r)
}

/// Loss of one image under the training objective, without updating anything.
pub fn evaluate_loss(ck: &Checkpoint, img: &Image, selection: &Selection, lambdas: Lambdas) -> Result<LossReport> {
    let grid = super::Tokenizer { checkpoint: ck, checksum: 0 }.grid(img)?;
    let mut tape = Tape::new();
    let w = nanonet::weights_on(&mut tape, &ck.params.weights);
    let f = forward(&mut tape, &w, ck, img, &grid, selection, lambdas, QuantizerPath::StraightThrough, None, None)?;
    report(&tape, &f, lambdas)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `w ← w − lr·g`
    GradientDescent,
    /// Bias-corrected Adam moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    first: Weights<Mat>,
    second: Weights<Mat>,
    steps: i32,
}

impl Optimizer {
    fn apply(&self, weights: &mut Weights<Mat>, grad: &Weights<Mat>, lr: f64, moments: &mut Option<Moments>) {
        match *self {
            Optimizer::GradientDescent => {
                for (w, g) in weights.tensors_mut().into_iter().zip(grad.tensors()) {
                    w.scaled_add(-lr, g);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let m = moments.get_or_insert_with(|| Moments {
                    first: grad.map(|g| Mat::zeros(g.dim())),
                    second: grad.map(|g| Mat::zeros(g.dim())),
                    steps: 0,
                });
                m.steps += 1;
                let c1 = 1.0 - beta1.powi(m.steps);
                let c2 = 1.0 - beta2.powi(m.steps);
                let tensors = weights
                    .tensors_mut()
                    .into_iter()
                    .zip(m.first.tensors_mut())
                    .zip(m.second.tensors_mut())
                    .zip(grad.tensors());
                for (((w, m1), m2), g) in tensors {
                    ndarray::Zip::from(w).and(m1).and(m2).and(g).for_each(|w, m1, m2, &g| {
                        *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                        *w -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambdas: Lambdas,
    pub ema_decay: f64,
    pub selection: Selection,
    /// Seeds the order in which images are visited.
    pub seed: u64,
    pub quantizer: QuantizerPath,
    pub optimizer: Optimizer,
    /// Codebook entries unused for this many steps are reseeded from the
    /// current batch's projections. `None` disables restarts.
    pub restart_patience: Option<usize>,
    /// Upper bound of the fraction of selected patches masked at random in
    /// each training pass.
    pub patch_dropout: f64,
    pub dropout_pattern: DropoutPattern,
}

impl TrainConfig {
    pub fn new(selection: Selection) -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
            batch_size: 1,
            lambdas: Lambdas::default(),
            ema_decay: 0.99,
            selection,
            seed: 0,
            quantizer: QuantizerPath::StraightThrough,
            optimizer: Optimizer::GradientDescent,
            restart_patience: Some(20),
            patch_dropout: 0.0,
            dropout_pattern: DropoutPattern::Scattered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.patch_dropout) {
            return Err(Error::Config(format!("patch dropout {} outside [0, 1]", self.patch_dropout)));
        }
        if self.restart_patience == Some(0) {
            return Err(Error::Config("restart patience must be at least 1".into()));
        }
        if !(self.lambdas.commit >= 0.0 && self.lambdas.glob >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss over each step's batch, before that step's update.
    pub trace: Vec<LossReport>,
}

/// Gradient of the batch-mean loss and the per-image decisions.
fn batch_gradient(
    ck: &Checkpoint,
    batch: &[(&Image, &PatchGrid, u64)],
    cfg: &TrainConfig,
) -> Result<(Weights<Mat>, LossReport, Vec<(Origin, usize, Array1<f64>)>)> {
    let mut grad = ck.params.weights.map(|m| Mat::zeros(m.dim()));
    let mut reports = Vec::with_capacity(batch.len());
    let mut assignments = Vec::new();
    for &(img, grid, seed) in batch {
        let dropout = (cfg.patch_dropout > 0.0).then_some(Dropout {
            max_fraction: cfg.patch_dropout,
            pattern: cfg.dropout_pattern,
            seed,
        });
        let mut tape = Tape::new();
        let w = nanonet::weights_on(&mut tape, &ck.params.weights);
        let f = forward(&mut tape, &w, ck, img, grid, &cfg.selection, cfg.lambdas, cfg.quantizer, None, dropout)?;
        reports.push(report(&tape, &f, cfg.lambdas)?);
        let g = tape.backward(f.total);
        for (acc, (v, like)) in grad.tensors_mut().into_iter().zip(w.tensors().into_iter().zip(ck.params.weights.tensors())) {
            *acc += &g.get(*v, like);
        }
        for ((o, p), &c) in f.projections.into_iter().zip(&f.decisions.codes) {
            assignments.push((o, c, p));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in grad.tensors_mut() {
        *t *= scale;
    }
    let mean = LossReport::mean(&reports).expect("nonempty batch");
    Ok((grad, mean, assignments))
}

/// Plain gradient descent on the total loss. Deterministic given the
/// checkpoint, data and configuration.
pub fn train(dataset: &[Image], init: Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, init, cfg, 0, &mut |_, _| Ok(()))
}

/// [`train`], calling `observe(step, checkpoint)` after every `every`-th
/// update (never when `every` is 0). An error from `observe` stops training.
pub fn train_observed(
    dataset: &[Image],
    init: Checkpoint,
    cfg: &TrainConfig,
    every: usize,
    observe: &mut dyn FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one image".into()));
    }
    let tok = super::Tokenizer { checkpoint: &init, checksum: 0 };
    let grids = dataset.iter().map(|img| tok.grid(img)).collect::<Result<Vec<_>>>()?;
    let mut ck = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut moments = None;
    let k = init.params.config.codebook_size;
    let mut last_hit = [vec![0usize; k], vec![0usize; k]];
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            batch.push((&dataset[i], &grids[i], rng.gen()));
        }
        let (grad, rep, assignments) = match batch_gradient(&ck, &batch, cfg) {
            Ok(x) => x,
            Err(Error::Domain(_)) => {
                return Err(Error::TrainingDiverged { step, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        if !rep.total.is_finite() || !grad.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: rep.total });
        }
        trace.push(rep);
        cfg.optimizer
            .apply(&mut ck.params.weights, &grad, cfg.learning_rate, &mut moments);
        if !ck.params.weights.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: rep.total });
        }
        for (kind, last_hit) in [Origin::Global, Origin::Patch(0)].into_iter().zip(&mut last_hit) {
            let hits: Vec<_> = assignments
                .iter()
                .filter(|(o, _, _)| (*o == Origin::Global) == (kind == Origin::Global))
                .map(|(_, c, p)| (*c, p.view()))
                .collect();
            if hits.is_empty() {
                continue;
            }
            let cb = match kind {
                Origin::Global => &mut ck.codebooks.global,
                _ => &mut ck.codebooks.patch,
            };
            quantizer::ema_update(cb, &hits, cfg.ema_decay);
            for &(c, _) in &hits {
                last_hit[c] = step;
            }
            if let Some(patience) = cfg.restart_patience {
                let pool: Vec<_> = hits.iter().map(|(_, p)| *p).collect();
                quantizer::restart_dead(cb, last_hit, step, patience, &pool, &mut rng);
            }
        }
        if every > 0 && (step + 1) % every == 0 {
            observe(step + 1, &ck)?;
        }
    }
    Ok(TrainOutcome { checkpoint: ck, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat element index of the worst entry.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Largest relative disagreement between the analytic gradient of the total
/// loss and central differences with step `h`, over every weight. Selection,
/// code assignment and the global-loss target are frozen at their values at
/// the unperturbed point, and the quantizer is bypassed.
pub fn grad_check(ck: &Checkpoint, img: &Image, selection: &Selection, lambdas: Lambdas, h: f64) -> Result<GradCheckReport> {
    let grid = super::Tokenizer { checkpoint: ck, checksum: 0 }.grid(img)?;
    let eval = |weights: &Weights<Mat>, frozen: Option<&Decisions>| -> Result<(Tape, Weights<Var>, Forward)> {
        let mut tape = Tape::new();
        let w = nanonet::weights_on(&mut tape, weights);
        let f = forward(&mut tape, &w, ck, img, &grid, selection, lambdas, QuantizerPath::Continuous, frozen, None)?;
        Ok((tape, w, f))
    };
    let (tape, w, f) = eval(&ck.params.weights, None)?;
    let grads = tape.backward(f.total);
    let decisions = f.decisions;
    let names = Weights::<Mat>::names(ck.params.config.depth);
    let mut weights = ck.params.weights.clone();
    let mut out = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let vars = w.tensors();
    for t in 0..vars.len() {
        let analytic = grads.get(*vars[t], ck.params.weights.tensors()[t]);
        for (e, &a) in analytic.iter().enumerate() {
            let original = weights.tensors()[t].as_slice().expect("standard layout")[e];
            let mut at = |v: f64| -> Result<f64> {
                weights.tensors_mut()[t].as_slice_mut().expect("standard layout")[e] = v;
                let (tape, _, f) = eval(&weights, Some(&decisions))?;
                Ok(tape.scalar(f.total))
            };
            let plus = at(original + h)?;
            let minus = at(original - h)?;
            at(original)?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.checked += 1;
            if rel > out.max_relative_error || out.checked == 1 {
                out.max_relative_error = rel;
                out.worst = (names[t].clone(), e);
                out.analytic = a;
                out.numeric = numeric;
            }
        }
    }
    Ok(out)
}
