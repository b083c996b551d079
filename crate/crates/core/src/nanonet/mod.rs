//! Miniature encoder/decoder transformer.
//!
//! The encoder embeds each patch, adds a learned positional encoding, prepends
//! the `k` learnable global tokens and runs `depth` pre-norm blocks of
//! single-head softmax attention and a GELU FFN. The decoder runs the same
//! block stack over a full-length `N₀` sequence and unembeds every token back
//! into a patch.

pub mod checkpoint;
mod params;
pub mod tape;

pub(crate) use params::uniform;
pub use params::{init_params, init_shapes, Block, ModelConfig, Norm, Params, Weights};
pub use tape::{Mat, Tape, Var};

use crate::error::{Error, Result};
use crate::imagegrid::{self, Image, PatchGrid, PatchLayout};

/// Where a token in a sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Global,
    /// Row-major index of the source patch.
    Patch(usize),
    Mask,
}

/// A `n×D` token matrix with one origin tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub origin: Vec<Origin>,
}

impl TokenSequence {
    pub fn new(tokens: Mat, origin: Vec<Origin>) -> Result<Self> {
        if tokens.nrows() != origin.len() {
            return Err(Error::Config(format!(
                "{} tokens but {} origin tags",
                tokens.nrows(),
                origin.len()
            )));
        }
        Ok(Self { tokens, origin })
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }
}

/// Puts every weight on the tape as a leaf.
pub fn weights_on(tape: &mut Tape, w: &Weights<Mat>) -> Weights<Var> {
    w.map(|m| tape.leaf(m.clone()))
}

fn block(tape: &mut Tape, b: &Block<Var>, x: Var, d: usize) -> Var {
    let h = tape.layer_norm(x, b.attn_norm.gain, b.attn_norm.bias);
    let q = tape.matmul(h, b.query);
    let k = tape.matmul(h, b.key);
    let v = tape.matmul(h, b.value);
    let scores = tape.matmul_t(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let mixed = tape.matmul(attn, v);
    let out = tape.matmul(mixed, b.output);
    let x = tape.add(x, out);

    let h = tape.layer_norm(x, b.ffn_norm.gain, b.ffn_norm.bias);
    let f = tape.matmul(h, b.ffn_in);
    let f = tape.add_row(f, b.ffn_in_bias);
    let f = tape.gelu(f);
    let f = tape.matmul(f, b.ffn_out);
    let f = tape.add_row(f, b.ffn_out_bias);
    tape.add(x, f)
}

/// Encoder over a `N₀×s²C` patch matrix; returns the `(k+N₀)×D` output with
/// the global tokens first.
pub fn encoder_graph(tape: &mut Tape, w: &Weights<Var>, patches: Var) -> Var {
    let d = tape.value(w.embed).ncols();
    let k = tape.value(w.global_tokens).nrows();
    let e = tape.matmul(patches, w.embed);
    let e = tape.add_row(e, w.embed_bias);
    let e = tape.add(e, w.positional);
    let n0 = tape.value(e).nrows();
    let mut x = if k == 0 {
        e
    } else {
        let rows = (0..k)
            .map(|r| (w.global_tokens, r))
            .chain((0..n0).map(|r| (e, r)))
            .collect();
        tape.assemble(rows)
    };
    for b in &w.encoder {
        x = block(tape, b, x, d);
    }
    tape.layer_norm(x, w.encoder_norm.gain, w.encoder_norm.bias)
}

/// Decoder over a full `N₀×D` input; returns `N₀×s²C` patch predictions
/// (unclamped).
pub fn decoder_graph(tape: &mut Tape, w: &Weights<Var>, input: Var) -> Var {
    let d = tape.value(w.embed).ncols();
    let mut x = tape.add(input, w.positional);
    for b in &w.decoder {
        x = block(tape, b, x, d);
    }
    let x = tape.layer_norm(x, w.decoder_norm.gain, w.decoder_norm.bias);
    let out = tape.matmul(x, w.unembed);
    tape.add_row(out, w.unembed_bias)
}

pub fn patch_matrix(grid: &PatchGrid) -> Mat {
    let len = grid.layout.patch_len();
    Mat::from_shape_fn((grid.patches.len(), len), |(i, j)| grid.patches[i][j])
}

pub(crate) fn check_grid(params: &Params, layout: &PatchLayout) -> Result<()> {
    let cfg = &params.config;
    let expected = cfg.layout()?;
    if expected != *layout {
        return Err(Error::Config(format!(
            "grid layout {}x{} (s={}, r={}) does not match model layout {}x{} (s={}, r={})",
            layout.rows,
            layout.cols,
            layout.patch_size,
            layout.overlap_rate,
            expected.rows,
            expected.cols,
            expected.patch_size,
            expected.overlap_rate
        )));
    }
    Ok(())
}

/// Runs the encoder and splits its output into `(globals k×D, patches N₀×D)`.
pub fn encode(params: &Params, grid: &PatchGrid) -> Result<(TokenSequence, TokenSequence)> {
    check_grid(params, &grid.layout)?;
    let mut tape = Tape::new();
    let w = weights_on(&mut tape, &params.weights);
    let patches = tape.leaf(patch_matrix(grid));
    let out = encoder_graph(&mut tape, &w, patches);
    let k = params.config.num_global;
    let n0 = grid.patches.len();
    let all = tape.value(out);
    let globals = all.slice(ndarray::s![..k, ..]).to_owned();
    let patch_tokens = all.slice(ndarray::s![k.., ..]).to_owned();
    Ok((
        TokenSequence::new(globals, vec![Origin::Global; k])?,
        TokenSequence::new(patch_tokens, (0..n0).map(Origin::Patch).collect())?,
    ))
}

/// Which token fills each decoder slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Row of the quantized augmented sequence.
    Token(usize),
    Mask,
}

/// Slot assignment for a `N₀`-long decoder input: patch tokens return to their
/// grid position, global tokens take the lowest-index free slots in order, and
/// the rest are mask slots.
pub fn decoder_slots(origin: &[Origin], n0: usize) -> Result<Vec<Slot>> {
    if origin.len() > n0 {
        return Err(Error::Capacity {
            needed: origin.len(),
            slots: n0,
        });
    }
    let mut slots = vec![Slot::Mask; n0];
    for (row, o) in origin.iter().enumerate() {
        match *o {
            Origin::Patch(p) if p < n0 && slots[p] == Slot::Mask => slots[p] = Slot::Token(row),
            Origin::Patch(p) => {
                return Err(Error::Config(format!("patch position {p} out of range or repeated")))
            }
            Origin::Global => {}
            Origin::Mask => return Err(Error::Config("mask token inside a quantized sequence".into())),
        }
    }
    let mut free = (0..n0).filter(|&i| slots[i] == Slot::Mask).collect::<Vec<_>>().into_iter();
    for (row, o) in origin.iter().enumerate() {
        if *o == Origin::Global {
            let slot = free.next().expect("capacity checked above");
            slots[slot] = Slot::Token(row);
        }
    }
    Ok(slots)
}

/// Pads the quantized augmented sequence to `N₀` tokens with copies of the
/// learnable mask token.
pub fn build_decoder_input(q_aug: &TokenSequence, params: &Params, n0: usize) -> Result<TokenSequence> {
    let d = params.config.token_dim;
    if q_aug.tokens.ncols() != d {
        return Err(Error::Config(format!(
            "token width {} does not match model width {d}",
            q_aug.tokens.ncols()
        )));
    }
    let slots = decoder_slots(&q_aug.origin, n0)?;
    let mask = params.weights.mask_token.row(0);
    let mut tokens = Mat::zeros((n0, d));
    let mut origin = Vec::with_capacity(n0);
    for (i, slot) in slots.iter().enumerate() {
        match *slot {
            Slot::Token(r) => {
                tokens.row_mut(i).assign(&q_aug.tokens.row(r));
                origin.push(q_aug.origin[r]);
            }
            Slot::Mask => {
                tokens.row_mut(i).assign(&mask);
                origin.push(Origin::Mask);
            }
        }
    }
    TokenSequence::new(tokens, origin)
}

/// Decodes a full-length input into an image clamped to `[0, 1]`.
pub fn decode(params: &Params, input: &TokenSequence, layout: &PatchLayout) -> Result<Image> {
    check_grid(params, layout)?;
    let n0 = layout.patch_count();
    if input.len() != n0 || input.tokens.ncols() != params.config.token_dim {
        return Err(Error::Config(format!(
            "decoder input is {}x{}, expected {n0}x{}",
            input.len(),
            input.tokens.ncols(),
            params.config.token_dim
        )));
    }
    let mut tape = Tape::new();
    let w = weights_on(&mut tape, &params.weights);
    let x = tape.leaf(input.tokens.clone());
    let out = decoder_graph(&mut tape, &w, x);
    let patches = tape
        .value(out)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    imagegrid::reassemble(&PatchGrid {
        layout: *layout,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagegrid::partition;

    fn small_cfg(k: usize) -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            token_dim: 12,
            num_global: k,
            depth: 2,
            patch_size: 4,
            codebook_size: 16,
            patch_code_dim: 4,
            global_code_dim: 6,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| (i as f64 * 0.61).sin() * 0.5 + 0.5).collect();
        Image::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let params = init_params(&small_cfg(2)).unwrap();
        let grid = partition(&ramp(8, 8), 4, 0.0).unwrap();
        let (g, p) = encode(&params, &grid).unwrap();
        assert_eq!(g.tokens.dim(), (2, 12));
        assert_eq!(p.tokens.dim(), (4, 12));
        assert_eq!(encode(&params, &grid).unwrap(), (g, p));

        let params = init_params(&small_cfg(0)).unwrap();
        let (g, p) = encode(&params, &grid).unwrap();
        assert!(g.is_empty());
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let params = init_params(&small_cfg(2)).unwrap();
        let grid = partition(&ramp(8, 8), 4, 0.0).unwrap();
        let mut swapped = grid.clone();
        swapped.patches.swap(0, 3);
        let (_, a) = encode(&params, &grid).unwrap();
        let (_, b) = encode(&params, &swapped).unwrap();
        assert_ne!(a.tokens.row(0), b.tokens.row(3));
        assert_ne!(a.tokens.row(3), b.tokens.row(0));
    }

    #[test]
    fn encode_rejects_foreign_layout() {
        let params = init_params(&small_cfg(2)).unwrap();
        let grid = partition(&ramp(12, 8), 4, 0.0).unwrap();
        assert!(matches!(encode(&params, &grid), Err(Error::Config(_))));
    }

    #[test]
    fn decoder_input_placement() {
        let cfg = ModelConfig {
            image_height: 12,
            image_width: 12,
            ..small_cfg(2)
        };
        let params = init_params(&cfg).unwrap();
        let q = TokenSequence::new(
            Mat::from_shape_fn((5, 12), |(i, _)| i as f64 + 10.0),
            vec![
                Origin::Global,
                Origin::Global,
                Origin::Patch(0),
                Origin::Patch(4),
                Origin::Patch(8),
            ],
        )
        .unwrap();
        let s = build_decoder_input(&q, &params, 9).unwrap();
        assert_eq!(s.len(), 9);
        for (slot, row) in [(0, 2), (4, 3), (8, 4), (1, 0), (2, 1)] {
            assert_eq!(s.tokens.row(slot), q.tokens.row(row));
        }
        for slot in [3, 5, 6, 7] {
            assert_eq!(s.tokens.row(slot), params.weights.mask_token.row(0));
            assert_eq!(s.origin[slot], Origin::Mask);
        }
    }

    #[test]
    fn decoder_input_capacity() {
        let params = init_params(&small_cfg(2)).unwrap();
        let full = TokenSequence::new(
            Mat::zeros((4, 12)),
            vec![Origin::Global, Origin::Global, Origin::Patch(0), Origin::Patch(1)],
        )
        .unwrap();
        let s = build_decoder_input(&full, &params, 4).unwrap();
        assert!(s.origin.iter().all(|o| *o != Origin::Mask));

        let empty = TokenSequence::new(Mat::zeros((0, 12)), vec![]).unwrap();
        let s = build_decoder_input(&empty, &params, 4).unwrap();
        assert!(s.origin.iter().all(|o| *o == Origin::Mask));

        let over = TokenSequence::new(Mat::zeros((5, 12)), vec![Origin::Global; 5]).unwrap();
        assert!(matches!(
            build_decoder_input(&over, &params, 4),
            Err(Error::Capacity { needed: 5, slots: 4 })
        ));
    }

    #[test]
    fn decode_shape_and_untrained_error() {
        let params = init_params(&small_cfg(2)).unwrap();
        let img = ramp(8, 8);
        let grid = partition(&img, 4, 0.0).unwrap();
        let (_, p) = encode(&params, &grid).unwrap();
        let out = decode(&params, &p, &grid.layout).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert_eq!(decode(&params, &p, &grid.layout).unwrap(), out);
        assert!(out.mse(&img).unwrap() > 0.0);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
