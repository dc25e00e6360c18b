//! Grayscale preprocessing: center crop, CLAHE, bilinear resize, and binary
//! PGM I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(
                "image",
                "pixel count",
                format!("{width}x{height} needs {} pixels, got {}", width * height, pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[inline]
fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Keeps the central `out_w × out_h` window; odd margins leave the extra
/// row/column on the bottom/right.
pub fn center_crop(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w > img.width || out_h > img.height {
        return Err(Error::invalid(format!(
            "crop {out_w}x{out_h} larger than source {}x{}",
            img.width, img.height
        )));
    }
    let top = (img.height - out_h) / 2;
    let left = (img.width - out_w) / 2;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in top..top + out_h {
        pixels.extend_from_slice(&img.pixels[y * img.width + left..y * img.width + left + out_w]);
    }
    GrayImage::new(out_w, out_h, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Bin ceiling as a multiple of the uniform bin height (`tile_pixels / 256`).
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
        }
    }
}

/// Clips every bin at `limit` and spreads the removed mass evenly over all
/// 256 bins; the `excess % 256` leftover counts go to the lowest bins.
pub fn clip_histogram(hist: &[u32; 256], limit: u32) -> [u32; 256] {
    let mut out = *hist;
    let mut excess: u64 = 0;
    for h in &mut out {
        if *h > limit {
            excess += u64::from(*h - limit);
            *h = limit;
        }
    }
    let add = (excess / 256) as u32;
    let rem = (excess % 256) as usize;
    for (i, h) in out.iter_mut().enumerate() {
        *h += add + u32::from(i < rem);
    }
    out
}

/// Equalization lookup table for one tile.
pub fn tile_mapping(hist: &[u32; 256], tile_pixels: u32, clip_limit: f64) -> [u8; 256] {
    let limit = ((clip_limit * f64::from(tile_pixels) / 256.0).floor() as u32).max(1);
    let clipped = clip_histogram(hist, limit);
    let mut cdf = [0u32; 256];
    let mut acc = 0u32;
    for (c, &h) in cdf.iter_mut().zip(&clipped) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let mut map = [0u8; 256];
    let denom = tile_pixels.saturating_sub(cdf_min);
    for v in 0..256 {
        map[v] = if denom == 0 {
            v as u8
        } else {
            let num = f64::from(cdf[v]) - f64::from(cdf_min);
            round_half_up(num / f64::from(denom) * 255.0)
        };
    }
    map
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Contrast limited adaptive histogram equalization.
///
/// Images whose size is not a multiple of the tile grid are padded by
/// reflection on the right/bottom, equalized, and cropped back.
pub fn clahe(img: &GrayImage, params: ClaheParams) -> Result<GrayImage> {
    let ClaheParams { tiles_x, tiles_y, clip_limit } = params;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::invalid("CLAHE tile grid must be at least 1x1"));
    }
    if !(clip_limit >= 1.0) {
        return Err(Error::invalid(format!("CLAHE clip limit must be >= 1, got {clip_limit}")));
    }
    let pw = img.width.div_ceil(tiles_x) * tiles_x;
    let ph = img.height.div_ceil(tiles_y) * tiles_y;
    let padded: Vec<u8> = (0..ph)
        .flat_map(|y| (0..pw).map(move |x| (x, y)))
        .map(|(x, y)| img.get(reflect(x, img.width), reflect(y, img.height)))
        .collect();
    let (tw, th) = (pw / tiles_x, ph / tiles_y);
    let tile_pixels = (tw * th) as u32;

    let mut maps = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; 256];
            for y in ty * th..(ty + 1) * th {
                for &p in &padded[y * pw + tx * tw..y * pw + (tx + 1) * tw] {
                    hist[p as usize] += 1;
                }
            }
            maps.push(tile_mapping(&hist, tile_pixels, clip_limit));
        }
    }

    // neighbouring tile indices and the weight of the second one
    let axis = |pos: usize, size: usize, tiles: usize| -> (usize, usize, f64) {
        let g = (pos as f64 + 0.5) / size as f64 - 0.5;
        let lo = g.floor();
        let w = g - lo;
        let clamp = |t: f64| t.clamp(0.0, (tiles - 1) as f64) as usize;
        (clamp(lo), clamp(lo + 1.0), w)
    };
    let xs: Vec<_> = (0..img.width).map(|x| axis(x, tw, tiles_x)).collect();
    let mut out = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        let (ty0, ty1, wy) = axis(y, th, tiles_y);
        for (x, &(tx0, tx1, wx)) in xs.iter().enumerate() {
            let v = padded[y * pw + x] as usize;
            let m = |ty: usize, tx: usize| f64::from(maps[ty * tiles_x + tx][v]);
            let top = (1.0 - wx) * m(ty0, tx0) + wx * m(ty0, tx1);
            let bottom = (1.0 - wx) * m(ty1, tx0) + wx * m(ty1, tx1);
            out.push(round_half_up((1.0 - wy) * top + wy * bottom));
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Bilinear resize with half-pixel-centre sampling.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let src = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| src(x, img.width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, img.height, out_h);
        for &(x0, x1, fx) in &xs {
            let p = |xx: usize, yy: usize| f64::from(img.get(xx, yy));
            let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
            let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
            out.push(round_half_up((1.0 - fy) * top + fy * bottom));
        }
    }
    GrayImage::new(out_w, out_h, out)
}

/// `[1, size, size]` tensor with intensities divided by 255.
pub fn to_model_input(img: &GrayImage, size: usize) -> Result<Tensor<f32>> {
    if img.width != size || img.height != size {
        return Err(Error::shape(
            "to_model_input",
            "image size",
            format!("expected {size}x{size}, got {}x{}", img.width, img.height),
        ));
    }
    let data = img.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Tensor::new(vec![1, size, size], data)
}

/// A step of the preprocessing chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStep {
    CenterCrop,
    Clahe,
    Resize,
}

/// Crop → CLAHE → resize, as recorded in every dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub crop_width: usize,
    pub crop_height: usize,
    pub clahe: ClaheParams,
    pub output_size: usize,
    pub order: Vec<PipelineStep>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop_width: 256,
            crop_height: 256,
            clahe: ClaheParams::default(),
            output_size: 256,
            order: Self::ORDER.to_vec(),
        }
    }
}

impl PreprocessConfig {
    pub const ORDER: [PipelineStep; 3] = [PipelineStep::CenterCrop, PipelineStep::Clahe, PipelineStep::Resize];

    pub fn with_output_size(size: usize) -> Self {
        Self {
            output_size: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != Self::ORDER {
            return Err(Error::invalid(format!(
                "preprocessing order must be crop, clahe, resize; got {:?}",
                self.order
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        self.validate()?;
        let cropped = center_crop(img, self.crop_width, self.crop_height)?;
        let equalized = clahe(&cropped, self.clahe)?;
        resize_bilinear(&equalized, self.output_size, self.output_size)
    }

    pub fn to_tensor(&self, img: &GrayImage) -> Result<Tensor<f32>> {
        to_model_input(&self.apply(img)?, self.output_size)
    }
}

fn pgm_error(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "PGM",
        detail: detail.into(),
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary (`P5`) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_error("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| pgm_error("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(pgm_error(format!("expected P5 magic, got {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| pgm_error(format!("bad header number {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(pgm_error(format!("only maxval 255 is supported, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| pgm_error(format!("expected {} pixel bytes", w * h)))?;
    GrayImage::new(w, h, data.to_vec())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { kind, detail } => Error::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, px: &[u8]) -> GrayImage {
        GrayImage::new(w, h, px.to_vec()).unwrap()
    }

    fn ramp(w: usize, h: usize) -> GrayImage {
        let px = (0..w * h).map(|i| ((i * 37 + i / w * 11) % 256) as u8).collect();
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn crop_300_to_256_keeps_offset_22() {
        let src = ramp(300, 300);
        let out = center_crop(&src, 256, 256).unwrap();
        assert_eq!(out.get(0, 0), src.get(22, 22));
        assert_eq!(out.get(255, 255), src.get(277, 277));
    }

    #[test]
    fn crop_identity_and_center_pixel() {
        let src = ramp(7, 5);
        assert_eq!(center_crop(&src, 7, 5).unwrap(), src);
        let three = img(3, 3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(center_crop(&three, 1, 1).unwrap().pixels(), &[5]);
        assert!(center_crop(&three, 4, 1).is_err());
    }

    #[test]
    fn clahe_constant_image_stays_constant() {
        for v in [0u8, 77, 255] {
            let src = GrayImage::filled(64, 48, v).unwrap();
            let out = clahe(&src, ClaheParams::default()).unwrap();
            let first = out.pixels()[0];
            assert!(out.pixels().iter().all(|&p| p == first));
        }
    }

    /// Straight evaluation of m(v) for one tile with no clipping.
    fn scalar_mapping(pixels: &[u8], v: u8) -> u8 {
        let n = pixels.len() as f64;
        let cdf = |x: u8| pixels.iter().filter(|&&p| p <= x).count() as f64;
        let cdf_min = (0..=255u8).map(cdf).find(|&c| c > 0.0).unwrap();
        let m = (cdf(v) - cdf_min) / (n - cdf_min) * 255.0;
        (m + 0.5).floor() as u8
    }

    #[test]
    fn clahe_single_tile_without_clipping_worked_example() {
        let src = img(2, 2, &[0, 0, 128, 255]);
        let params = ClaheParams { tiles_x: 1, tiles_y: 1, clip_limit: 256.0 };
        let out = clahe(&src, params).unwrap();
        let oracle: Vec<u8> = src.pixels().iter().map(|&v| scalar_mapping(src.pixels(), v)).collect();
        assert_eq!(oracle, vec![0, 0, 128, 255]);
        assert_eq!(out.pixels(), oracle.as_slice());
    }

    #[test]
    fn clahe_single_tile_matches_scalar_oracle() {
        let src = ramp(16, 16);
        let params = ClaheParams { tiles_x: 1, tiles_y: 1, clip_limit: 256.0 };
        let out = clahe(&src, params).unwrap();
        for (&o, &v) in out.pixels().iter().zip(src.pixels()) {
            assert_eq!(o, scalar_mapping(src.pixels(), v));
        }
    }

    #[test]
    fn clahe_handles_non_divisible_sizes() {
        let src = ramp(37, 29);
        let out = clahe(&src, ClaheParams::default()).unwrap();
        assert_eq!((out.width(), out.height()), (37, 29));
    }

    #[test]
    fn resize_worked_example() {
        let src = img(2, 1, &[0, 255]);
        assert_eq!(resize_bilinear(&src, 4, 1).unwrap().pixels(), &[0, 64, 191, 255]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let src = ramp(13, 9);
        assert_eq!(resize_bilinear(&src, 13, 9).unwrap(), src);
        let c = GrayImage::filled(10, 6, 200).unwrap();
        let out = resize_bilinear(&c, 3, 17).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 200));
    }

    #[test]
    fn model_input_scaling() {
        let src = img(2, 2, &[0, 255, 128, 0]);
        let t = to_model_input(&src, 2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
        assert!(to_model_input(&src, 3).is_err());
    }

    #[test]
    fn pipeline_rejects_reordered_steps() {
        let mut cfg = PreprocessConfig::with_output_size(32);
        cfg.order = vec![PipelineStep::Clahe, PipelineStep::CenterCrop, PipelineStep::Resize];
        assert!(cfg.apply(&ramp(300, 300)).is_err());
    }

    #[test]
    fn pgm_round_trip_with_comment() {
        let src = ramp(5, 3);
        let bytes = encode_pgm(&src);
        assert_eq!(decode_pgm(&bytes).unwrap(), src);
        let mut commented = b"P5\n# made by hand\n5 3\n255\n".to_vec();
        commented.extend_from_slice(src.pixels());
        assert_eq!(decode_pgm(&commented).unwrap(), src);
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn clipping_conserves_mass(hist in prop::array::uniform32(0u32..500), tail in prop::collection::vec(0u32..500, 224), limit in 1u32..400) {
            let mut full = [0u32; 256];
            full[..32].copy_from_slice(&hist);
            full[32..].copy_from_slice(&tail);
            let total: u64 = full.iter().map(|&h| u64::from(h)).sum();
            let clipped = clip_histogram(&full, limit);
            prop_assert_eq!(clipped.iter().map(|&h| u64::from(h)).sum::<u64>(), total);
        }

        #[test]
        fn tile_mapping_is_monotone(px in prop::collection::vec(any::<u8>(), 1..300), clip in 1.0f64..8.0) {
            let mut hist = [0u32; 256];
            for &p in &px { hist[p as usize] += 1; }
            let map = tile_mapping(&hist, px.len() as u32, clip);
            prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
