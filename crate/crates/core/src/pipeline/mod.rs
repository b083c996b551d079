//! End-to-end tokenization: partition, encode, filter, quantize, serialize,
//! and the inverse path back to pixels. Training lives in [`train`].

pub mod config;
pub mod stream;
pub mod train;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::dtf::{self, DtfConfig, DtfResult};
use crate::error::{Error, Result};
use crate::imagegrid::{self, Image, PatchGrid};
use crate::nanonet::checkpoint::Checkpoint;
use crate::nanonet::{self, Origin, TokenSequence};
use crate::quantizer::{self, QuantizedSequence};

pub use stream::{DtfSummary, PatchEntry, StreamHeader, TokenStream};
pub use train::{grad_check, train, GradCheckReport, TrainConfig, TrainOutcome};

/// Which patch tokens join the global tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Dtf(DtfConfig),
    /// The `n` highest-scoring patches.
    TopRanked(usize),
    /// These grid positions, in this order.
    Explicit(Vec<usize>),
}

/// Outcome of applying a [`Selection`] to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    /// Grid positions in sequence order.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub epsilon: f64,
    pub threshold: f64,
    pub h_total: f64,
    pub infeasible: bool,
    /// The selection was cut to the `N₀ − k` slots the decoder has left.
    pub capped: bool,
    pub dtf: Option<DtfResult>,
}

impl Selected {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// Applies `selection` to the encoder output of one image.
pub fn select(
    globals: ArrayView2<f64>,
    patch_tokens: ArrayView2<f64>,
    grid: &PatchGrid,
    selection: &Selection,
) -> Result<Selected> {
    let n0 = patch_tokens.nrows();
    let scores = dtf::score_tokens(globals, patch_tokens, &grid.patches)?;
    let h_total: f64 = scores.iter().sum();
    let mut out = match selection {
        Selection::Dtf(cfg) => {
            let r = dtf::filter_scores(scores, cfg)?;
            Selected {
                indices: r.selected_indices.clone(),
                scores: r.scores.clone(),
                epsilon: cfg.epsilon,
                threshold: r.threshold,
                h_total: r.h_total,
                infeasible: r.infeasible,
                capped: false,
                dtf: Some(r),
            }
        }
        Selection::TopRanked(n) => {
            let order = dtf::rank_tokens(&scores)?;
            Selected {
                indices: order[..(*n).min(n0)].to_vec(),
                scores,
                epsilon: 0.0,
                threshold: 0.0,
                h_total,
                infeasible: *n > n0,
                capped: false,
                dtf: None,
            }
        }
        Selection::Explicit(list) => {
            let mut seen = vec![false; n0];
            for &i in list {
                if i >= n0 || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("explicit selection position {i} out of range or repeated")));
                }
            }
            Selected {
                indices: list.clone(),
                scores,
                epsilon: 0.0,
                threshold: 0.0,
                h_total,
                infeasible: false,
                capped: false,
                dtf: None,
            }
        }
    };
    let room = n0.saturating_sub(globals.nrows());
    if out.indices.len() > room {
        out.indices.truncate(room);
        out.capped = true;
    }
    Ok(out)
}

/// Everything produced while tokenizing one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub stream: TokenStream,
    pub selected: Selected,
    /// `None` when the augmented sequence is empty.
    pub quantized: Option<QuantizedSequence>,
}

/// A checkpoint with its checksum computed once.
#[derive(Debug, Clone, Copy)]
pub struct Tokenizer<'a> {
    pub checkpoint: &'a Checkpoint,
    pub checksum: u32,
}

impl<'a> Tokenizer<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Self {
        Self {
            checkpoint,
            checksum: checkpoint.checksum(),
        }
    }

    pub fn grid(&self, img: &Image) -> Result<PatchGrid> {
        let cfg = &self.checkpoint.params.config;
        if img.dims() != (cfg.image_height, cfg.image_width, cfg.channels) {
            return Err(Error::Config(format!(
                "image is {:?} but the model expects {:?}",
                img.dims(),
                (cfg.image_height, cfg.image_width, cfg.channels)
            )));
        }
        imagegrid::partition(img, cfg.patch_size, cfg.overlap_rate)
    }

    pub fn encode(&self, img: &Image, selection: &Selection) -> Result<Encoded> {
        let ck = self.checkpoint;
        let cfg = &ck.params.config;
        let grid = self.grid(img)?;
        let (globals, patches) = nanonet::encode(&ck.params, &grid)?;
        let selected = select(globals.tokens.view(), patches.tokens.view(), &grid, selection)?;
        let z_aug = dtf::augment(globals.tokens.view(), patches.tokens.view(), &selected.indices)?;
        let quantized = if z_aug.is_empty() {
            None
        } else {
            Some(quantizer::quantize(&z_aug, &ck.codebooks, &ck.params)?)
        };
        let k = cfg.num_global;
        let indices = quantized.as_ref().map_or(&[][..], |q| &q.indices[..]);
        let global_indices = indices[..k].iter().map(|&i| i as u16).collect();
        let mut patch_entries: Vec<PatchEntry> = selected
            .indices
            .iter()
            .zip(&indices[k..])
            .map(|(&p, &i)| PatchEntry {
                position: p as u16,
                index: i as u16,
            })
            .collect();
        patch_entries.sort_by_key(|e| e.position);
        let stream = TokenStream {
            header: StreamHeader {
                height: cfg.image_height as u32,
                width: cfg.image_width as u32,
                channels: cfg.channels as u32,
                patch_size: cfg.patch_size as u32,
                overlap_rate: cfg.overlap_rate,
                codebook_size: cfg.codebook_size as u32,
                model_checksum: self.checksum,
            },
            global_indices,
            patch_entries,
            summary: DtfSummary {
                epsilon: selected.epsilon,
                threshold: selected.threshold,
                h_total: selected.h_total,
                infeasible: selected.infeasible,
                capped: selected.capped,
            },
        };
        stream.validate()?;
        Ok(Encoded {
            stream,
            selected,
            quantized,
        })
    }

    pub fn decode(&self, stream: &TokenStream) -> Result<Image> {
        let ck = self.checkpoint;
        let cfg = &ck.params.config;
        let h = &stream.header;
        if h.model_checksum != self.checksum {
            return Err(Error::ModelMismatch {
                stream: h.model_checksum,
                model: self.checksum,
            });
        }
        let expected = (
            cfg.image_height,
            cfg.image_width,
            cfg.channels,
            cfg.patch_size,
            cfg.codebook_size,
        );
        let found = (
            h.height as usize,
            h.width as usize,
            h.channels as usize,
            h.patch_size as usize,
            h.codebook_size as usize,
        );
        if found != expected || h.overlap_rate != cfg.overlap_rate || stream.num_global() != cfg.num_global {
            return Err(Error::Parse(format!(
                "stream geometry {found:?} (r={}, k={}) does not match the model {expected:?} (r={}, k={})",
                h.overlap_rate,
                stream.num_global(),
                cfg.overlap_rate,
                cfg.num_global
            )));
        }
        let layout = cfg.layout()?;
        let indices: Vec<usize> = stream
            .global_indices
            .iter()
            .map(|&i| i as usize)
            .chain(stream.patch_entries.iter().map(|e| e.index as usize))
            .collect();
        let origin: Vec<Origin> = std::iter::repeat(Origin::Global)
            .take(cfg.num_global)
            .chain(stream.patch_entries.iter().map(|e| Origin::Patch(e.position as usize)))
            .collect();
        let q_aug = if indices.is_empty() {
            TokenSequence::new(nanonet::Mat::zeros((0, cfg.token_dim)), vec![])?
        } else {
            quantizer::dequantize(&indices, &origin, &ck.codebooks, &ck.params)?
        };
        let input = nanonet::build_decoder_input(&q_aug, &ck.params, layout.patch_count())?;
        nanonet::decode(&ck.params, &input, &layout)
    }

    /// Encode then decode through the serialized stream.
    pub fn round_trip(&self, img: &Image, selection: &Selection) -> Result<(Image, Encoded)> {
        let encoded = self.encode(img, selection)?;
        let bytes = encoded.stream.to_bytes()?;
        let out = self.decode(&TokenStream::from_bytes(&bytes)?)?;
        Ok((out, encoded))
    }
}

/// Tokenizes one image with dynamic token filtering.
pub fn tokenize(img: &Image, checkpoint: &Checkpoint, cfg: &DtfConfig) -> Result<TokenStream> {
    Ok(Tokenizer::new(checkpoint).encode(img, &Selection::Dtf(*cfg))?.stream)
}

pub fn detokenize(stream: &TokenStream, checkpoint: &Checkpoint) -> Result<Image> {
    Tokenizer::new(checkpoint).decode(stream)
}

/// Weights of the commitment and global-token terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub commit: f64,
    pub glob: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { commit: 1.0, glob: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub commit: f64,
    pub glob: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossReport {
    pub fn new(rec: f64, commit: f64, glob: f64, lambdas: Lambdas) -> Result<Self> {
        for (name, v) in [("rec", rec), ("commit", commit), ("glob", glob)] {
            if !(v >= 0.0) {
                return Err(Error::Domain(format!("{name} loss is {v}, expected nonnegative")));
            }
        }
        Ok(Self {
            rec,
            commit,
            glob,
            total: rec + lambdas.commit * commit + lambdas.glob * glob,
            lambda1: lambdas.commit,
            lambda2: lambdas.glob,
        })
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            rec: avg(|r| r.rec),
            commit: avg(|r| r.commit),
            glob: avg(|r| r.glob),
            total: avg(|r| r.total),
            lambda1: first.lambda1,
            lambda2: first.lambda2,
        })
    }
}

/// Holistic feature the pooled global tokens are pulled toward: the mean of
/// all patch tokens before filtering.
pub fn holistic_target(patch_tokens: ArrayView2<f64>) -> Result<Array1<f64>> {
    patch_tokens
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Domain("no patch tokens to pool".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobLoss {
    pub value: f64,
    /// No global tokens, so the term is zero.
    pub skipped: bool,
}

/// `‖mean(globals) − target‖²`.
pub fn glob_loss(globals: ArrayView2<f64>, target: ArrayView1<f64>) -> Result<GlobLoss> {
    if globals.nrows() == 0 {
        return Ok(GlobLoss { value: 0.0, skipped: true });
    }
    if globals.ncols() != target.len() {
        return Err(Error::Config(format!(
            "global width {} vs target width {}",
            globals.ncols(),
            target.len()
        )));
    }
    let pooled = globals.mean_axis(Axis(0)).expect("nonempty");
    Ok(GlobLoss {
        value: (&pooled - &target).iter().map(|v| v * v).sum(),
        skipped: false,
    })
}
