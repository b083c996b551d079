use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Mat;
use crate::error::{Error, Result};
use crate::imagegrid::PatchLayout;

/// Shape and seed of a tokenizer model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Token width `D`.
    pub token_dim: usize,
    /// Number of learnable global tokens `k`.
    pub num_global: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub overlap_rate: f64,
    /// Entries per codebook `K`.
    pub codebook_size: usize,
    pub patch_code_dim: usize,
    pub global_code_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 1,
            token_dim: 32,
            num_global: 16,
            depth: 3,
            patch_size: 4,
            overlap_rate: 0.0,
            codebook_size: 4096,
            patch_code_dim: 8,
            global_code_dim: 12,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim < self.patch_code_dim.max(self.global_code_dim) {
            return Err(Error::Config(format!(
                "token_dim {} smaller than code dims {}/{}",
                self.token_dim, self.patch_code_dim, self.global_code_dim
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.patch_code_dim == 0 || self.global_code_dim == 0 {
            return Err(Error::Config("code dims must be positive".into()));
        }
        if !(2..=1 << 16).contains(&self.codebook_size) {
            return Err(Error::Config(format!(
                "codebook size {} outside [2, 65536]",
                self.codebook_size
            )));
        }
        let n0 = self.layout()?.patch_count();
        if n0 > 1 << 16 {
            return Err(Error::Config(format!("{n0} patches exceed the 16-bit position range")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<PatchLayout> {
        PatchLayout::new(
            self.image_height,
            self.image_width,
            self.channels,
            self.patch_size,
            self.overlap_rate,
        )
    }

    /// `N₀` for this configuration's image size.
    pub fn patch_count(&self) -> usize {
        self.layout().map(|l| l.patch_count()).unwrap_or(0)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// One pre-norm transformer block: single-head attention then a GELU FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Norm<T>,
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub ffn_norm: Norm<T>,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
}

/// Every learnable tensor of the model. Generic so the same structure can hold
/// values, tape handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub embed: T,
    pub embed_bias: T,
    pub positional: T,
    pub global_tokens: T,
    pub encoder: Vec<Block<T>>,
    pub encoder_norm: Norm<T>,
    pub mask_token: T,
    pub decoder: Vec<Block<T>>,
    pub decoder_norm: Norm<T>,
    pub unembed: T,
    pub unembed_bias: T,
    pub patch_head: T,
    pub patch_head_inv: T,
    pub global_head: T,
    pub global_head_inv: T,
}

const BLOCK_FIELDS: [&str; 12] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "query",
    "key",
    "value",
    "output",
    "ffn_norm.gain",
    "ffn_norm.bias",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
];

impl<T> Block<T> {
    fn tensors(&self) -> [&T; 12] {
        [
            &self.attn_norm.gain,
            &self.attn_norm.bias,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ffn_norm.gain,
            &self.ffn_norm.bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            attn_norm: Norm {
                gain: it.next()?,
                bias: it.next()?,
            },
            query: it.next()?,
            key: it.next()?,
            value: it.next()?,
            output: it.next()?,
            ffn_norm: Norm {
                gain: it.next()?,
                bias: it.next()?,
            },
            ffn_in: it.next()?,
            ffn_in_bias: it.next()?,
            ffn_out: it.next()?,
            ffn_out_bias: it.next()?,
        })
    }
}

impl<T> Weights<T> {
    /// All tensors in the fixed checkpoint order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.embed, &self.embed_bias, &self.positional, &self.global_tokens];
        for b in &self.encoder {
            out.extend(b.tensors());
        }
        out.extend([&self.encoder_norm.gain, &self.encoder_norm.bias, &self.mask_token]);
        for b in &self.decoder {
            out.extend(b.tensors());
        }
        out.extend([
            &self.decoder_norm.gain,
            &self.decoder_norm.bias,
            &self.unembed,
            &self.unembed_bias,
            &self.patch_head,
            &self.patch_head_inv,
            &self.global_head,
            &self.global_head_inv,
        ]);
        out
    }

    /// Names matching [`Weights::tensors`].
    pub fn names(depth: usize) -> Vec<String> {
        let mut out: Vec<String> = ["embed", "embed_bias", "positional", "global_tokens"]
            .map(String::from)
            .to_vec();
        let block = |prefix: &str, out: &mut Vec<String>| {
            for l in 0..depth {
                out.extend(BLOCK_FIELDS.iter().map(|f| format!("{prefix}[{l}].{f}")));
            }
        };
        block("encoder", &mut out);
        out.extend(["encoder_norm.gain", "encoder_norm.bias", "mask_token"].map(String::from));
        block("decoder", &mut out);
        out.extend(
            [
                "decoder_norm.gain",
                "decoder_norm.bias",
                "unembed",
                "unembed_bias",
                "patch_head",
                "patch_head_inv",
                "global_head",
                "global_head_inv",
            ]
            .map(String::from),
        );
        out
    }

    pub fn tensor_count(depth: usize) -> usize {
        4 + 12 * depth + 3 + 12 * depth + 8
    }

    /// Rebuilds from tensors in [`Weights::tensors`] order.
    pub fn from_tensors(depth: usize, tensors: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = tensors.into_iter();
        let embed = it.next()?;
        let embed_bias = it.next()?;
        let positional = it.next()?;
        let global_tokens = it.next()?;
        let encoder = (0..depth)
            .map(|_| Block::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let encoder_norm = Norm {
            gain: it.next()?,
            bias: it.next()?,
        };
        let mask_token = it.next()?;
        let decoder = (0..depth)
            .map(|_| Block::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let w = Self {
            embed,
            embed_bias,
            positional,
            global_tokens,
            encoder,
            encoder_norm,
            mask_token,
            decoder,
            decoder_norm: Norm {
                gain: it.next()?,
                bias: it.next()?,
            },
            unembed: it.next()?,
            unembed_bias: it.next()?,
            patch_head: it.next()?,
            patch_head_inv: it.next()?,
            global_head: it.next()?,
            global_head_inv: it.next()?,
        };
        it.next().is_none().then_some(w)
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let mapped: Vec<U> = self.tensors().into_iter().map(&mut f).collect();
        Weights::from_tensors(self.depth(), mapped).expect("same structure")
    }

    pub fn zip_map<U, V>(&self, other: &Weights<U>, mut f: impl FnMut(&T, &U) -> V) -> Weights<V> {
        let mapped: Vec<V> = self
            .tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|(a, b)| f(a, b))
            .collect();
        Weights::from_tensors(self.depth(), mapped).expect("same structure")
    }
}

impl Weights<Mat> {
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![
            &mut self.embed,
            &mut self.embed_bias,
            &mut self.positional,
            &mut self.global_tokens,
        ];
        for b in &mut self.encoder {
            out.extend(block_mut(b));
        }
        out.extend([
            &mut self.encoder_norm.gain,
            &mut self.encoder_norm.bias,
            &mut self.mask_token,
        ]);
        for b in &mut self.decoder {
            out.extend(block_mut(b));
        }
        out.extend([
            &mut self.decoder_norm.gain,
            &mut self.decoder_norm.bias,
            &mut self.unembed,
            &mut self.unembed_bias,
            &mut self.patch_head,
            &mut self.patch_head_inv,
            &mut self.global_head,
            &mut self.global_head_inv,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn block_mut(b: &mut Block<Mat>) -> [&mut Mat; 12] {
    [
        &mut b.attn_norm.gain,
        &mut b.attn_norm.bias,
        &mut b.query,
        &mut b.key,
        &mut b.value,
        &mut b.output,
        &mut b.ffn_norm.gain,
        &mut b.ffn_norm.bias,
        &mut b.ffn_in,
        &mut b.ffn_in_bias,
        &mut b.ffn_out,
        &mut b.ffn_out_bias,
    ]
}

/// Model configuration plus its learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub weights: Weights<Mat>,
}

/// Uniform draw on `[-1/√fan_in, 1/√fan_in]`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

fn init_block(rng: &mut ChaCha8Rng, d: usize) -> Block<Mat> {
    let norm = || Norm {
        gain: Mat::ones((1, d)),
        bias: Mat::zeros((1, d)),
    };
    Block {
        attn_norm: norm(),
        query: uniform(rng, d, d, d),
        key: uniform(rng, d, d, d),
        value: uniform(rng, d, d, d),
        output: uniform(rng, d, d, d),
        ffn_norm: norm(),
        ffn_in: uniform(rng, d, 4 * d, d),
        ffn_in_bias: Mat::zeros((1, 4 * d)),
        ffn_out: uniform(rng, 4 * d, d, 4 * d),
        ffn_out_bias: Mat::zeros((1, d)),
    }
}

/// Seeded initialization. Matrices are uniform on `±1/√fan_in`, norm gains
/// start at one, biases at zero, and the output bias at mid-gray.
pub fn init_params(cfg: &ModelConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.token_dim;
    let p = cfg.patch_len();
    let n0 = cfg.patch_count();
    let embed = uniform(&mut rng, p, d, p);
    let positional = uniform(&mut rng, n0, d, d);
    let global_tokens = uniform(&mut rng, cfg.num_global, d, d);
    let encoder = (0..cfg.depth).map(|_| init_block(&mut rng, d)).collect();
    let mask_token = uniform(&mut rng, 1, d, d);
    let decoder = (0..cfg.depth).map(|_| init_block(&mut rng, d)).collect();
    let unembed = uniform(&mut rng, d, p, d);
    let weights = Weights {
        embed,
        embed_bias: Mat::zeros((1, d)),
        positional,
        global_tokens,
        encoder,
        encoder_norm: Norm {
            gain: Mat::ones((1, d)),
            bias: Mat::zeros((1, d)),
        },
        mask_token,
        decoder,
        decoder_norm: Norm {
            gain: Mat::ones((1, d)),
            bias: Mat::zeros((1, d)),
        },
        unembed,
        unembed_bias: Mat::from_elem((1, p), 0.5),
        patch_head: uniform(&mut rng, d, cfg.patch_code_dim, d),
        patch_head_inv: uniform(&mut rng, cfg.patch_code_dim, d, cfg.patch_code_dim),
        global_head: uniform(&mut rng, d, cfg.global_code_dim, d),
        global_head_inv: uniform(&mut rng, cfg.global_code_dim, d, cfg.global_code_dim),
    };
    Ok(Params {
        config: *cfg,
        weights,
    })
}

impl Params {
    /// Checks every tensor's shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = init_shapes(&self.config);
        let actual: Vec<(usize, usize)> = self.weights.tensors().iter().map(|t| t.dim()).collect();
        if expected != actual {
            return Err(Error::Config("tensor shapes do not match the model configuration".into()));
        }
        if !self.weights.all_finite() {
            return Err(Error::Config("non-finite weight".into()));
        }
        Ok(())
    }
}

/// Tensor shapes implied by a configuration, in checkpoint order.
pub fn init_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, p, n0, k) = (cfg.token_dim, cfg.patch_len(), cfg.patch_count(), cfg.num_global);
    let block = [
        (1, d),
        (1, d),
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (1, d),
        (1, d),
        (d, 4 * d),
        (1, 4 * d),
        (4 * d, d),
        (1, d),
    ];
    let mut out = vec![(p, d), (1, d), (n0, d), (k, d)];
    for _ in 0..cfg.depth {
        out.extend(block);
    }
    out.extend([(1, d), (1, d), (1, d)]);
    for _ in 0..cfg.depth {
        out.extend(block);
    }
    out.extend([
        (1, d),
        (1, d),
        (d, p),
        (1, p),
        (d, cfg.patch_code_dim),
        (cfg.patch_code_dim, d),
        (d, cfg.global_code_dim),
        (cfg.global_code_dim, d),
    ]);
    out
}
