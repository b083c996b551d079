//! Raster images, overlapping patch partitioning and its inverse.
//!
//! Patches are ordered row-major (top-left to bottom-right) and each patch is
//! flattened in `(row, col, channel)` order. Boundary patches are clamped
//! inward so every patch is drawn entirely from real pixels.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// A dense `H×W×C` raster with values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidLayout(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidLayout(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Image filled with a single value.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `H·W·C`.
    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidLayout(format!(
                "cannot compare {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Geometry of a patch partition, including the source image dimensions so the
/// grid can be reassembled on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub overlap_rate: f64,
    pub rows: usize,
    pub cols: usize,
    /// Distance in pixels between consecutive patch origins before boundary clamping.
    pub stride: f64,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, channels: usize, s: usize, r: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidLayout("channels must be positive".into()));
        }
        let (rows, cols) = patch_count(height, width, s, r)?;
        let stride = if r == 0.0 { s as f64 } else { s as f64 * r };
        Ok(Self {
            height,
            width,
            channels,
            patch_size: s,
            overlap_rate: r,
            rows,
            cols,
            stride,
        })
    }

    /// Total number of patches before any filtering.
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// `H·W·C`
    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Length of one flattened patch, `s²·C`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn offset(&self, index: usize, extent: usize) -> usize {
        let raw = (index as f64 * self.stride + 1e-9).floor() as usize;
        raw.min(extent - self.patch_size)
    }

    /// Top-left pixel of the patch at grid cell `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (self.offset(row, self.height), self.offset(col, self.width))
    }

    /// Grid column of a row-major patch index.
    pub fn column_of(&self, index: usize) -> usize {
        index % self.cols
    }
}

/// Ordered patch vectors plus the layout needed to put them back together.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub layout: PatchLayout,
    pub patches: Vec<Vec<f64>>,
}

/// Number of patch rows and columns for an `H×W` image with patch size `s` and
/// overlap rate `r`.
///
/// For `r > 0` this is `⌈(H − s(1−r))/(s·r)⌉ × ⌈(W − s(1−r))/(s·r)⌉`. At
/// `r = 0` that expression is undefined and plain tiling `⌈H/s⌉ × ⌈W/s⌉` is used.
pub fn patch_count(height: usize, width: usize, s: usize, r: f64) -> Result<(usize, usize)> {
    if s == 0 {
        return Err(Error::InvalidLayout("patch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::InvalidLayout(format!("overlap rate {r} outside [0, 1)")));
    }
    if s > height || s > width {
        return Err(Error::InvalidLayout(format!(
            "patch size {s} exceeds image {height}x{width}"
        )));
    }
    let count = |extent: usize| -> usize {
        if r == 0.0 {
            extent.div_ceil(s)
        } else {
            let s = s as f64;
            let x = (extent as f64 - s * (1.0 - r)) / (s * r);
            (x - 1e-9).ceil().max(1.0) as usize
        }
    };
    Ok((count(height), count(width)))
}

/// Splits an image into its patch grid.
pub fn partition(img: &Image, s: usize, r: f64) -> Result<PatchGrid> {
    let layout = PatchLayout::new(img.height, img.width, img.channels, s, r)?;
    let c = img.channels;
    let mut patches = Vec::with_capacity(layout.patch_count());
    for row in 0..layout.rows {
        for col in 0..layout.cols {
            let (y0, x0) = layout.origin(row, col);
            let mut patch = Vec::with_capacity(layout.patch_len());
            for dy in 0..s {
                let start = ((y0 + dy) * img.width + x0) * c;
                patch.extend_from_slice(&img.data[start..start + s * c]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid { layout, patches })
}

/// Inverse of [`partition`]: pixels covered by several patches receive the mean
/// of their contributions.
pub fn reassemble(grid: &PatchGrid) -> Result<Image> {
    let layout = &grid.layout;
    let expected = PatchLayout::new(
        layout.height,
        layout.width,
        layout.channels,
        layout.patch_size,
        layout.overlap_rate,
    )?;
    if expected.rows != layout.rows || expected.cols != layout.cols {
        return Err(Error::InvalidLayout(format!(
            "layout claims {}x{} patches, geometry gives {}x{}",
            layout.rows, layout.cols, expected.rows, expected.cols
        )));
    }
    if grid.patches.len() != layout.patch_count() {
        return Err(Error::InvalidLayout(format!(
            "expected {} patches, got {}",
            layout.patch_count(),
            grid.patches.len()
        )));
    }
    let (h, w, c, s) = (layout.height, layout.width, layout.channels, layout.patch_size);
    let mut sum = vec![0.0; h * w * c];
    let mut hits = vec![0u32; h * w];
    for (idx, patch) in grid.patches.iter().enumerate() {
        if patch.len() != layout.patch_len() {
            return Err(Error::InvalidLayout(format!(
                "patch {idx} has length {}, expected {}",
                patch.len(),
                layout.patch_len()
            )));
        }
        let (y0, x0) = layout.origin(idx / layout.cols, idx % layout.cols);
        for dy in 0..s {
            for dx in 0..s {
                let pix = (y0 + dy) * w + x0 + dx;
                hits[pix] += 1;
                let src = (dy * s + dx) * c;
                for ch in 0..c {
                    sum[pix * c + ch] += patch[src + ch];
                }
            }
        }
    }
    for (pix, &n) in hits.iter().enumerate() {
        if n == 0 {
            return Err(Error::InvalidLayout(format!("pixel {pix} not covered by any patch")));
        }
        if n > 1 {
            for v in &mut sum[pix * c..(pix + 1) * c] {
                *v /= n as f64;
            }
        }
    }
    // Decoder outputs may stray slightly outside [0, 1]; callers clamp first.
    Image::new(h, w, c, sum)
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) file with maxval 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

/// Parses an in-memory binary PGM/PPM.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Parse("missing P5/P6 magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(Error::UnsupportedFormat(format!(
                "netpbm variant P{} (only binary P5/P6 are supported)",
                bytes[1] as char
            )))
        }
        _ => return Err(Error::Parse("missing P5/P6 magic".into())),
    };
    pos += 2;

    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("expected integer at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("header integer too large at byte {start}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("degenerate dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255 is supported)")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Parse(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Encodes as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::UnsupportedFormat(format!(
                "{c}-channel images cannot be written as PGM/PPM"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pnm(img)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pgm(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn load_examples() {
        let img = decode_pnm(&pgm(1, 1, &[0])).unwrap();
        assert_eq!(img.dims(), (1, 1, 1));
        assert_eq!(img.data(), &[0.0]);

        let mut ppm = b"P6 1 1 255\n".to_vec();
        ppm.extend([255, 255, 255]);
        let img = decode_pnm(&ppm).unwrap();
        assert_eq!(img.dims(), (1, 1, 3));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);

        let img = decode_pnm(&pgm(2, 2, &[0, 51, 102, 204])).unwrap();
        assert_eq!(img.data(), &[0.0, 0.2, 0.4, 0.8]);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(decode_pnm(b"P5\n2 x\n255\n"), Err(Error::Parse(_))));
        assert!(matches!(decode_pnm(b"Q5"), Err(Error::Parse(_))));
        assert!(matches!(decode_pnm(&pgm(2, 2, &[1, 2, 3])), Err(Error::Parse(_))));
        assert!(matches!(
            decode_pnm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn comments_in_header() {
        let img = decode_pnm(b"P5\n# made by hand\n1 1\n255\n\x33").unwrap();
        assert_eq!(img.data(), &[0.2]);
    }

    #[test]
    fn pnm_write_read() {
        let img = decode_pnm(&pgm(2, 2, &[0, 51, 102, 204])).unwrap();
        assert_eq!(decode_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn patch_count_examples() {
        assert_eq!(patch_count(256, 256, 16, 0.0).unwrap(), (16, 16));
        assert_eq!(patch_count(336, 336, 16, 0.0).unwrap(), (21, 21));
        assert_eq!(patch_count(256, 256, 16, 0.5).unwrap(), (31, 31));
        assert!(matches!(patch_count(8, 32, 16, 0.0), Err(Error::InvalidLayout(_))));
        assert!(matches!(patch_count(32, 32, 16, 1.0), Err(Error::InvalidLayout(_))));
    }

    /// Counts patch origins `i·s·r` that still leave room for `s(1−r)` pixels.
    fn loop_count(extent: usize, s: usize, r: f64) -> usize {
        if r == 0.0 {
            let mut n = 0;
            while n * s < extent {
                n += 1;
            }
            return n;
        }
        let (s, e) = (s as f64, extent as f64);
        let mut n = 0;
        while (n as f64) * s * r < e - s * (1.0 - r) {
            n += 1;
        }
        n
    }

    #[test]
    fn patch_count_matches_loop_oracle() {
        for r in [0.0, 0.25, 0.5] {
            for s in 1..=32 {
                for h in s..=64 {
                    for w in [s, 33.max(s), 64] {
                        let got = patch_count(h, w, s, r).unwrap();
                        assert_eq!(got, (loop_count(h, s, r), loop_count(w, s, r)), "h={h} w={w} s={s} r={r}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_patch_is_whole_image() {
        let data: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        let img = Image::new(16, 16, 1, data.clone()).unwrap();
        let grid = partition(&img, 16, 0.0).unwrap();
        assert_eq!(grid.patches, vec![data]);
    }

    #[test]
    fn ramp_quadrant_means_increase() {
        let data: Vec<f64> = (0..32 * 32).map(|i| i as f64 / 1023.0).collect();
        let img = Image::new(32, 32, 1, data).unwrap();
        let grid = partition(&img, 16, 0.0).unwrap();
        let means: Vec<f64> = grid
            .patches
            .iter()
            .map(|p| p.iter().sum::<f64>() / p.len() as f64)
            .collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    #[test]
    fn overlap_average_of_two() {
        // 1x3 strips of width 2 at r=0.5: origins 0 and 1 share the middle pixel.
        let layout = PatchLayout::new(2, 3, 1, 2, 0.5).unwrap();
        assert_eq!((layout.rows, layout.cols), (1, 2));
        let grid = PatchGrid {
            layout,
            patches: vec![vec![0.0; 4], vec![1.0; 4]],
        };
        let img = reassemble(&grid).unwrap();
        assert_eq!(img.get(0, 1, 0), 0.5);
        assert_eq!(img.get(1, 0, 0), 0.0);
        assert_eq!(img.get(1, 2, 0), 1.0);
    }

    #[test]
    fn reassemble_rejects_bad_grid() {
        let img = Image::constant(8, 8, 1, 0.5).unwrap();
        let mut grid = partition(&img, 4, 0.0).unwrap();
        grid.patches.pop();
        assert!(matches!(reassemble(&grid), Err(Error::InvalidLayout(_))));
        let mut grid = partition(&img, 4, 0.0).unwrap();
        grid.patches[1].push(0.0);
        assert!(matches!(reassemble(&grid), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn constant_image_stays_constant() {
        for (s, r) in [(4, 0.0), (4, 0.5), (5, 0.25), (3, 0.5)] {
            let img = Image::constant(13, 11, 2, 0.5).unwrap();
            let grid = partition(&img, s, r).unwrap();
            assert!(grid.patches.iter().flatten().all(|&v| v == 0.5));
            assert_eq!(reassemble(&grid).unwrap(), img);
        }
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..20, 1usize..20, 1usize..4).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * c)
                .prop_map(move |d| Image::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn tiling_round_trip_is_exact(img in arb_image(), s in 1usize..8) {
            let s = s.min(img.height()).min(img.width());
            let grid = partition(&img, s, 0.0).unwrap();
            prop_assert_eq!(grid.patches.len(), grid.layout.rows * grid.layout.cols);
            prop_assert_eq!(reassemble(&grid).unwrap(), img);
        }

        #[test]
        fn overlapping_round_trip(img in arb_image(), s in 1usize..8, r in prop::sample::select(vec![0.25, 0.5, 0.75])) {
            let s = s.min(img.height()).min(img.width());
            let back = reassemble(&partition(&img, s, r).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
