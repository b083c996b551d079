//! Dual vector-quantization codebooks.
//!
//! Global and patch tokens are projected by their own learnable heads into
//! separate code spaces (12 and 8 dimensions by default), snapped to the
//! Euclidean-nearest codebook entry, and mapped back to token width by the
//! inverse head.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nanonet::{Mat, ModelConfig, Origin, Params, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    Patch,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K×d`
    pub entries: Mat,
    pub kind: CodebookKind,
}

impl Codebook {
    pub fn new(entries: Mat, kind: CodebookKind) -> Result<Self> {
        if entries.nrows() < 2 || entries.ncols() == 0 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 entries of positive width, got {:?}",
                entries.dim()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook entry is not finite".into()));
        }
        Ok(Self { entries, kind })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Index of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, v: ArrayView1<f64>) -> usize {
        let v: Vec<f64> = v.iter().copied().collect();
        let entries = self.entries.as_standard_layout();
        let flat = entries.as_slice().expect("standard layout");
        let mut best = (0, f64::INFINITY);
        for (j, e) in flat.chunks_exact(v.len()).enumerate() {
            let mut dist = 0.0;
            for (a, b) in e.iter().zip(&v) {
                let t = a - b;
                dist += t * t;
            }
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best.0
    }
}

/// The patch and global codebooks of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub patch: Codebook,
    pub global: Codebook,
}

impl Codebooks {
    pub fn for_origin(&self, o: Origin) -> &Codebook {
        match o {
            Origin::Global => &self.global,
            _ => &self.patch,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = self.patch.kind == CodebookKind::Patch
            && self.global.kind == CodebookKind::Global
            && self.patch.entries.dim() == (cfg.codebook_size, cfg.patch_code_dim)
            && self.global.entries.dim() == (cfg.codebook_size, cfg.global_code_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("codebook shapes do not match the model configuration".into()))
        }
    }
}

/// Seeded codebooks with entries uniform on `[-1, 1]`.
pub fn init_codebooks(cfg: &ModelConfig) -> Result<Codebooks> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let k = cfg.codebook_size;
    let patch = crate::nanonet::uniform(&mut rng, k, cfg.patch_code_dim, 1);
    let global = crate::nanonet::uniform(&mut rng, k, cfg.global_code_dim, 1);
    Ok(Codebooks {
        patch: Codebook::new(patch, CodebookKind::Patch)?,
        global: Codebook::new(global, CodebookKind::Global)?,
    })
}

/// Result of quantizing an augmented token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSequence {
    pub indices: Vec<usize>,
    /// Head projections before snapping, one per token.
    pub projections: Vec<Array1<f64>>,
    /// The selected codebook entries (code space).
    pub codes: Vec<Array1<f64>>,
    /// Codes mapped back to token width (`(k+N)×D`).
    pub vectors: Mat,
    pub origin: Vec<Origin>,
}

fn heads(params: &Params, o: Origin) -> (&Mat, &Mat) {
    let w = &params.weights;
    match o {
        Origin::Global => (&w.global_head, &w.global_head_inv),
        _ => (&w.patch_head, &w.patch_head_inv),
    }
}

/// Looks up codebook indices and maps them back to token width. Used by the
/// decoder side, which only sees indices.
pub fn dequantize(
    indices: &[usize],
    origin: &[Origin],
    codebooks: &Codebooks,
    params: &Params,
) -> Result<TokenSequence> {
    let d = params.config.token_dim;
    let mut vectors = Mat::zeros((indices.len(), d));
    for (i, (&idx, &o)) in indices.iter().zip(origin).enumerate() {
        let cb = codebooks.for_origin(o);
        if idx >= cb.size() {
            return Err(Error::Domain(format!("code index {idx} outside codebook of size {}", cb.size())));
        }
        let (_, inv) = heads(params, o);
        vectors.row_mut(i).assign(&cb.entries.row(idx).dot(inv));
    }
    TokenSequence::new(vectors, origin.to_vec())
}

/// Projects, snaps and maps back every token of `z_aug`.
pub fn quantize(z_aug: &TokenSequence, codebooks: &Codebooks, params: &Params) -> Result<QuantizedSequence> {
    if z_aug.is_empty() {
        return Err(Error::Domain("cannot quantize an empty sequence".into()));
    }
    codebooks.validate(&params.config)?;
    let d = params.config.token_dim;
    if z_aug.tokens.ncols() != d {
        return Err(Error::Config(format!("token width {} != {d}", z_aug.tokens.ncols())));
    }
    let mut out = QuantizedSequence {
        indices: Vec::with_capacity(z_aug.len()),
        projections: Vec::with_capacity(z_aug.len()),
        codes: Vec::with_capacity(z_aug.len()),
        vectors: Mat::zeros((z_aug.len(), d)),
        origin: z_aug.origin.clone(),
    };
    for (i, &o) in z_aug.origin.iter().enumerate() {
        if o == Origin::Mask {
            return Err(Error::Domain("mask tokens are not quantized".into()));
        }
        let (head, inv) = heads(params, o);
        let cb = codebooks.for_origin(o);
        let proj = z_aug.tokens.row(i).dot(head);
        let idx = cb.nearest(proj.view());
        let code = cb.entries.row(idx).to_owned();
        out.vectors.row_mut(i).assign(&code.dot(inv));
        out.indices.push(idx);
        out.projections.push(proj);
        out.codes.push(code);
    }
    Ok(out)
}

/// Mean over tokens of `‖head(z) − e‖²`, the squared distance between each
/// token's head projection and its assigned entry in code space.
pub fn commit_loss(z_aug: &TokenSequence, q_aug: &QuantizedSequence) -> Result<f64> {
    let n = z_aug.len();
    if q_aug.projections.len() != n || q_aug.codes.len() != n {
        return Err(Error::Domain(format!(
            "commit loss over {n} tokens vs {} quantized",
            q_aug.codes.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, e) in q_aug.projections.iter().zip(&q_aug.codes) {
        if p.len() != e.len() {
            return Err(Error::Domain("projection and code widths differ".into()));
        }
        sum += p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / n as f64)
}

/// Moves each used entry toward the mean of the projections assigned to it:
/// `e ← decay·e + (1 − decay)·mean`.
pub fn ema_update(cb: &mut Codebook, assignments: &[(usize, ArrayView1<f64>)], decay: f64) {
    let (k, d) = cb.entries.dim();
    let mut sums = Mat::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (idx, v) in assignments {
        let mut row = sums.row_mut(*idx);
        row += v;
        counts[*idx] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let mean = sums.row(j).mapv(|v| v / c as f64);
        let mut e = cb.entries.row_mut(j);
        e.zip_mut_with(&mean, |e, m| *e = decay * *e + (1.0 - decay) * m);
    }
}

/// Reseeds entries not hit within the last `patience` steps with projections
/// drawn from `pool`. `last_hit[j]` is the step entry `j` was last assigned.
/// Returns the number of entries replaced.
pub fn restart_dead<R: rand::Rng>(
    cb: &mut Codebook,
    last_hit: &mut [usize],
    step: usize,
    patience: usize,
    pool: &[ArrayView1<f64>],
    rng: &mut R,
) -> usize {
    if pool.is_empty() {
        return 0;
    }
    let mut replaced = 0;
    for (j, hit) in last_hit.iter_mut().enumerate() {
        if step.saturating_sub(*hit) < patience {
            continue;
        }
        let src = pool[rng.gen_range(0..pool.len())];
        cb.entries.row_mut(j).assign(&src);
        *hit = step;
        replaced += 1;
    }
    replaced
}

#[derive(Debug, Clone, PartialEq)]
pub struct Usage {
    pub counts: Vec<usize>,
    /// Fraction of entries used at least once.
    pub utilization: f64,
}

/// Per-entry hit counts over a history of index lists.
pub fn codebook_usage(history: &[Vec<usize>], codebook_size: usize) -> Usage {
    let mut counts = vec![0usize; codebook_size];
    for &i in history.iter().flatten() {
        if let Some(c) = counts.get_mut(i) {
            *c += 1;
        }
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    Usage {
        utilization: if codebook_size == 0 { 0.0 } else { used as f64 / codebook_size as f64 },
        counts,
    }
}
