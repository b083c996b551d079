//! Dynamic token filtering: score each patch token by how much it adds beyond
//! the global tokens, rank, and keep the shortest prefix whose cumulative
//! score reaches the threshold `τ = max(T, (1 − ε)·H_total)`.

use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::imagegrid::{Image, PatchGrid};
use crate::infotheory::{self, RateDistortionQuery};
use crate::nanonet::{Origin, TokenSequence};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtfConfig {
    /// Fraction of the total score the filter may discard, in `[0, 1)`.
    pub epsilon: f64,
    /// Share of `R(D₀)` attributed to the global tokens, in `(0, 1)`.
    pub alpha: f64,
    /// Target distortion (MSE).
    pub d0: f64,
    /// Pixel variance of the source.
    pub sigma2: f64,
    /// `H·W·C`
    pub pixel_count: usize,
    /// Bit budget `R_ref` used to move the requirement `T` into score units.
    /// `None` disables `T` so that `ε` alone sets the threshold.
    pub reference_rate: Option<f64>,
    /// Scores below this are treated as zero.
    pub score_floor: f64,
}

impl DtfConfig {
    pub fn new(pixel_count: usize) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            d0: 1e-3,
            sigma2: 1.0 / 12.0,
            pixel_count,
            reference_rate: None,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.d0 > 0.0) || !(self.sigma2 > 0.0) || self.pixel_count == 0 {
            return Err(Error::Config(format!(
                "D0 ({}), sigma2 ({}) and pixel count ({}) must be positive",
                self.d0, self.sigma2, self.pixel_count
            )));
        }
        if !(self.score_floor >= 0.0) {
            return Err(Error::Config(format!("score floor must be nonnegative, got {}", self.score_floor)));
        }
        if let Some(r) = self.reference_rate {
            if !(r > 0.0) {
                return Err(Error::Config(format!("reference rate must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// `T` in score units: `(1 − α)·H_total·min(1, R(D₀)/R_ref)`, or 0 when no
    /// reference rate is configured.
    pub fn requirement(&self, h_total: f64) -> Result<f64> {
        let Some(r_ref) = self.reference_rate else {
            return Ok(0.0);
        };
        let rd0 = infotheory::rate_distortion(RateDistortionQuery {
            sigma2: self.sigma2,
            d0: self.d0,
            pixel_count: self.pixel_count,
        })?;
        let t_bits = infotheory::supplement_requirement(self.alpha, rd0)?;
        Ok((t_bits / r_ref).min(1.0 - self.alpha) * h_total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtfResult {
    /// Proxy score per patch in grid order, after the floor.
    pub scores: Vec<f64>,
    /// Patch indices by descending score.
    pub order: Vec<usize>,
    /// `cumulative[i]` is the sum of the `i + 1` highest scores.
    pub cumulative: Vec<f64>,
    pub h_total: f64,
    /// Requirement `T` in score units.
    pub requirement: f64,
    pub threshold: f64,
    pub selected_count: usize,
    pub selected_indices: Vec<usize>,
    /// Even the full set misses the threshold.
    pub infeasible: bool,
}

/// How equal scores are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    LowerIndexFirst,
    /// Reversed order; only used to check that the verification harness
    /// notices a broken ranking.
    #[doc(hidden)]
    HigherIndexFirst,
}

/// Stable descending order; equal scores keep ascending index order.
pub fn rank_tokens(scores: &[f64]) -> Result<Vec<usize>> {
    rank_tokens_with(scores, TieBreak::LowerIndexFirst)
}

pub fn rank_tokens_with(scores: &[f64], tie: TieBreak) -> Result<Vec<usize>> {
    if let Some((i, s)) = scores.iter().enumerate().find(|(_, s)| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("score {i} is {s}, expected nonnegative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match tie {
        TieBreak::LowerIndexFirst => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        TieBreak::HigherIndexFirst => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a))),
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prefix {
    pub count: usize,
    pub infeasible: bool,
}

/// Length of the shortest prefix of `sorted` (descending) whose sum reaches
/// `tau`. If the full sum falls short, returns the full length flagged
/// infeasible.
pub fn select_min_prefix(sorted: &[f64], tau: f64) -> Result<Prefix> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("threshold must be nonnegative, got {tau}")));
    }
    if sorted.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Domain("scores must be nonnegative".into()));
    }
    if sorted.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Domain("scores must be sorted in descending order".into()));
    }
    let mut sum = 0.0;
    for (k, s) in std::iter::once(&0.0).chain(sorted).enumerate() {
        sum += s;
        if sum >= tau {
            return Ok(Prefix { count: k, infeasible: false });
        }
    }
    Ok(Prefix { count: sorted.len(), infeasible: true })
}

pub const ORACLE_LIMIT: usize = 20;

/// Smallest subset size whose sum reaches `tau`, by enumerating every subset.
/// Returns `None` when no subset reaches it.
pub fn brute_force_min_subset(scores: &[f64], tau: f64) -> Result<Option<usize>> {
    let m = scores.len();
    if m > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge(m));
    }
    let mut best: Option<usize> = None;
    for mask in 0u32..(1 << m) {
        let size = mask.count_ones() as usize;
        if best.is_some_and(|b| size >= b) {
            continue;
        }
        let sum: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| scores[i]).sum();
        if sum >= tau {
            best = Some(size);
        }
    }
    Ok(best)
}

/// The subset the greedy filter should pick: minimal size, then maximal sum,
/// then the lexicographically smallest index list. Enumerates every subset.
pub fn brute_force_canonical_subset(scores: &[f64], tau: f64) -> Result<Option<Vec<usize>>> {
    let m = scores.len();
    if m > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge(m));
    }
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << m) {
        let members: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let sum: f64 = members.iter().map(|&i| scores[i]).sum();
        if sum < tau {
            continue;
        }
        let better = match &best {
            None => true,
            Some((size, best_sum, best_members)) => {
                (members.len(), -sum, &members) < (*size, -best_sum, best_members)
            }
        };
        if better {
            best = Some((members.len(), sum, members));
        }
    }
    Ok(best.map(|(_, _, members)| members))
}

/// Proxy scores for every patch token given the globals.
pub fn score_tokens(globals: ArrayView2<f64>, patch_tokens: ArrayView2<f64>, raw_patches: &[Vec<f64>]) -> Result<Vec<f64>> {
    if patch_tokens.nrows() != raw_patches.len() {
        return Err(Error::Config(format!(
            "{} patch tokens for {} raw patches",
            patch_tokens.nrows(),
            raw_patches.len()
        )));
    }
    if globals.ncols() != patch_tokens.ncols() {
        return Err(Error::Config(format!(
            "global width {} differs from patch token width {}",
            globals.ncols(),
            patch_tokens.ncols()
        )));
    }
    let projector = infotheory::RowProjector::new(globals)?;
    patch_tokens
        .rows()
        .into_iter()
        .zip(raw_patches)
        .map(|(t, raw)| infotheory::proxy_with(&projector, t, raw))
        .collect()
}

/// Ranking, threshold and prefix selection on precomputed scores.
pub fn filter_scores(mut scores: Vec<f64>, cfg: &DtfConfig) -> Result<DtfResult> {
    cfg.validate()?;
    for s in &mut scores {
        if *s < cfg.score_floor {
            *s = 0.0;
        }
    }
    let order = rank_tokens(&scores)?;
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let cumulative: Vec<f64> = sorted
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    let h_total = cumulative.last().copied().unwrap_or(0.0);
    let requirement = cfg.requirement(h_total)?;
    let threshold = infotheory::dtf_threshold(h_total, cfg.epsilon, requirement)?;
    let prefix = select_min_prefix(&sorted, threshold)?;
    let selected_indices = order[..prefix.count].to_vec();
    Ok(DtfResult {
        scores,
        order,
        cumulative,
        h_total,
        requirement,
        threshold,
        selected_count: prefix.count,
        selected_indices,
        infeasible: prefix.infeasible,
    })
}

/// Full filter for one image: score, rank, threshold, select.
pub fn run_dtf(globals: ArrayView2<f64>, patch_tokens: ArrayView2<f64>, grid: &PatchGrid, cfg: &DtfConfig) -> Result<DtfResult> {
    let scores = score_tokens(globals, patch_tokens, &grid.patches)?;
    filter_scores(scores, cfg)
}

/// `[globals; selected patch tokens in ranked order]`, each patch row tagged
/// with its grid index.
pub fn augment(globals: ArrayView2<f64>, patch_tokens: ArrayView2<f64>, selected: &[usize]) -> Result<TokenSequence> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= patch_tokens.nrows()) {
        return Err(Error::Config(format!(
            "selected patch {bad} out of range for {} tokens",
            patch_tokens.nrows()
        )));
    }
    let k = globals.nrows();
    let rows: Vec<_> = globals
        .rows()
        .into_iter()
        .chain(selected.iter().map(|&i| patch_tokens.row(i)))
        .collect();
    let d = patch_tokens.ncols();
    let tokens = if rows.is_empty() {
        crate::nanonet::Mat::zeros((0, d))
    } else {
        ndarray::stack(Axis(0), &rows).map_err(|e| Error::Config(e.to_string()))?
    };
    let origin = std::iter::repeat(Origin::Global)
        .take(k)
        .chain(selected.iter().map(|&i| Origin::Patch(i)))
        .collect();
    TokenSequence::new(tokens, origin)
}

/// Channel means of an image.
pub fn pool_image(img: &Image) -> Vec<f64> {
    let c = img.channels();
    let mut sums = vec![0.0; c];
    for (i, v) in img.data().iter().enumerate() {
        sums[i % c] += v;
    }
    let n = (img.height() * img.width()) as f64;
    sums.iter().map(|s| s / n).collect()
}

/// Estimates `α = I(X; G)/R(D₀)` from pooled pixels (`m×C`) and pooled global
/// tokens (`m×D`) with the Gaussian MI estimator, clamped to `[0.05, 0.95]`.
pub fn calibrate_alpha(pooled_pixels: ArrayView2<f64>, pooled_globals: ArrayView2<f64>, rd0: f64) -> Result<f64> {
    if !(rd0 > 0.0) {
        return Err(Error::Estimation(format!("R(D0) must be positive to calibrate alpha, got {rd0}")));
    }
    let mi = infotheory::gaussian_mutual_information(pooled_pixels, pooled_globals)?;
    Ok((mi / rd0).clamp(0.05, 0.95))
}
