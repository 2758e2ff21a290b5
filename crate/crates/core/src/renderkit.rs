//! Deterministic text rendering and a reference visual feature extractor.
//!
//! Text is laid out with an embedded 8×8 bitmap font scaled by an integer
//! factor, black ink on a white square canvas. The reference encoder pools a
//! 16×16 grid of patch intensities and applies a fixed seeded projection.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const SUPPORTED_CANVASES: [usize; 3] = [256, 512, 1024];
pub const BACKGROUND: u8 = 255;
pub const INK: u8 = 0;
pub const PATCH_GRID: usize = 16;

const ELLIPSIS: [u8; 8] = [0x00, 0x00, 0x00, 0x00, 0x00, 0x49, 0x49, 0x00];
const REPLACEMENT: [u8; 8] = [0x7F, 0x41, 0x55, 0x49, 0x55, 0x41, 0x7F, 0x00];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Glyph cell side in pixels; a multiple of the 8-pixel base font.
    pub glyph_size: usize,
    pub margin: usize,
    /// Characters per line.
    pub wrap: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            canvas: 1024,
            glyph_size: 16,
            margin: 32,
            wrap: 60,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_CANVASES.contains(&self.canvas) {
            return Err(Error::Config(format!(
                "canvas {} not in {:?}",
                self.canvas, SUPPORTED_CANVASES
            )));
        }
        if self.glyph_size == 0 || self.glyph_size % 8 != 0 {
            return Err(Error::Config(format!(
                "glyph size {} must be a positive multiple of 8",
                self.glyph_size
            )));
        }
        if self.wrap == 0 {
            return Err(Error::Config("wrap must be >= 1".into()));
        }
        if 2 * self.margin + self.wrap * self.glyph_size > self.canvas {
            return Err(Error::Config(format!(
                "{} glyphs of {}px plus margins exceed the {}px canvas",
                self.wrap, self.glyph_size, self.canvas
            )));
        }
        Ok(())
    }

    pub fn max_lines(&self) -> usize {
        (self.canvas - 2 * self.margin) / self.glyph_size
    }
}

/// Square 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub source_hash: String,
}

impl TextImage {
    pub fn uniform(side: usize, value: u8) -> Self {
        TextImage {
            width: side,
            height: side,
            pixels: vec![value; side * side],
            source_hash: String::new(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != BACKGROUND).count()
    }

    /// Whether the glyph cell at (`line`, `col`) holds exactly the ellipsis glyph.
    pub fn has_ellipsis_at(&self, cfg: &RenderConfig, line: usize, col: usize) -> bool {
        let scale = cfg.glyph_size / 8;
        let x0 = cfg.margin + col * cfg.glyph_size;
        let y0 = cfg.margin + line * cfg.glyph_size;
        (0..cfg.glyph_size).all(|dy| {
            (0..cfg.glyph_size).all(|dx| {
                let on = ELLIPSIS[dy / scale] >> (dx / scale) & 1 == 1;
                let expect = if on { INK } else { BACKGROUND };
                self.pixel(x0 + dx, y0 + dy) == expect
            })
        })
    }

    /// 8-bit grayscale PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Data(format!("png: {e}")))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Data(format!("png: {e}")))?;
        Ok(())
    }
}

enum Glyph {
    Char(char),
    Ellipsis,
}

fn bitmap(g: &Glyph) -> [u8; 8] {
    match g {
        Glyph::Ellipsis => ELLIPSIS,
        Glyph::Char(' ') => [0; 8],
        Glyph::Char(c) if c.is_ascii_graphic() => BASIC_LEGACY[*c as usize],
        Glyph::Char(_) => REPLACEMENT,
    }
}

fn layout(text: &str, cfg: &RenderConfig) -> Vec<Vec<Glyph>> {
    let chars: Vec<char> = text.chars().collect();
    let mut lines: Vec<Vec<Glyph>> = chars
        .chunks(cfg.wrap)
        .map(|c| c.iter().map(|&ch| Glyph::Char(ch)).collect())
        .collect();
    let max = cfg.max_lines();
    if lines.len() > max {
        lines.truncate(max);
        if let Some(last) = lines.last_mut() {
            if last.len() == cfg.wrap {
                last.pop();
            }
            last.push(Glyph::Ellipsis);
        }
    }
    lines
}

pub fn normalize_whitespace(t: &str) -> String {
    t.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders `t` top-left aligned, hard-wrapped at `cfg.wrap` characters and
/// truncated with an ellipsis glyph when it overflows the canvas.
pub fn render_text(t: &str, cfg: &RenderConfig) -> Result<TextImage> {
    cfg.validate()?;
    let text = normalize_whitespace(t);
    if text.is_empty() {
        return Err(Error::Data("cannot render empty text".into()));
    }
    let side = cfg.canvas;
    let scale = cfg.glyph_size / 8;
    let mut pixels = vec![BACKGROUND; side * side];
    for (li, line) in layout(&text, cfg).iter().enumerate() {
        let y0 = cfg.margin + li * cfg.glyph_size;
        for (ci, glyph) in line.iter().enumerate() {
            let x0 = cfg.margin + ci * cfg.glyph_size;
            let bits = bitmap(glyph);
            for (ry, row) in bits.iter().enumerate() {
                for rx in 0..8 {
                    if row >> rx & 1 == 0 {
                        continue;
                    }
                    for sy in 0..scale {
                        let y = y0 + ry * scale + sy;
                        let start = y * side + x0 + rx * scale;
                        pixels[start..start + scale].fill(INK);
                    }
                }
            }
        }
    }
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(serde_json::to_vec(cfg)?);
    Ok(TextImage {
        width: side,
        height: side,
        pixels,
        source_hash: hex::encode(h.finalize()),
    })
}

/// Box-filter average pooling to `target × target`.
pub fn downsample(img: &TextImage, target: usize) -> Result<TextImage> {
    if target == 0 || img.width % target != 0 || img.height != img.width {
        return Err(Error::Config(format!(
            "target {target} does not divide image width {}",
            img.width
        )));
    }
    let f = img.width / target;
    let n = (f * f) as u32;
    let mut pixels = Vec::with_capacity(target * target);
    for ty in 0..target {
        for tx in 0..target {
            let mut sum = 0u32;
            for y in ty * f..(ty + 1) * f {
                let row = &img.pixels[y * img.width + tx * f..y * img.width + (tx + 1) * f];
                sum += row.iter().map(|&p| p as u32).sum::<u32>();
            }
            pixels.push(((sum + n / 2) / n) as u8);
        }
    }
    Ok(TextImage {
        width: target,
        height: target,
        pixels,
        source_hash: img.source_hash.clone(),
    })
}

/// Mean intensity of each cell of a 16×16 grid, mapped to [-1, 1].
pub fn patch_features(img: &TextImage) -> Result<Vec<f64>> {
    if img.width != img.height || img.width % PATCH_GRID != 0 {
        return Err(Error::Config(format!(
            "image side {} must be a multiple of {PATCH_GRID}",
            img.width
        )));
    }
    let cell = img.width / PATCH_GRID;
    let denom = (cell * cell) as f64 * 255.0;
    let mut out = Vec::with_capacity(PATCH_GRID * PATCH_GRID);
    for gy in 0..PATCH_GRID {
        for gx in 0..PATCH_GRID {
            let mut sum = 0u64;
            for y in gy * cell..(gy + 1) * cell {
                let start = y * img.width + gx * cell;
                sum += img.pixels[start..start + cell]
                    .iter()
                    .map(|&p| p as u64)
                    .sum::<u64>();
            }
            out.push(2.0 * sum as f64 / denom - 1.0);
        }
    }
    Ok(out)
}

/// Seeded Gaussian projection from the 256 patch features to `out_dim`.
pub fn reference_projection(out_dim: usize, seed: u64) -> Matrix {
    let n = PATCH_GRID * PATCH_GRID;
    Matrix::randn(
        out_dim,
        n,
        1.0 / (n as f64).sqrt(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Reference stand-in for a pretrained OCR encoder: patch pooling, fixed
/// random projection, ℓ₂ normalisation.
pub fn reference_visual_encode(img: &TextImage, out_dim: usize, seed: u64) -> Result<Vec<f64>> {
    if out_dim < 8 {
        return Err(Error::Config(format!("out_dim {out_dim} must be >= 8")));
    }
    encode_with(img, &reference_projection(out_dim, seed))
}

/// [`reference_visual_encode`] with a prebuilt projection, for batch encoding.
pub fn encode_with(img: &TextImage, projection: &Matrix) -> Result<Vec<f64>> {
    let feats = patch_features(img)?;
    let mut v: Vec<f64> = (0..projection.rows)
        .map(|r| dot(projection.row(r), &feats))
        .collect();
    let n = dot(&v, &v).sqrt();
    if !(n > 0.0) {
        return Err(Error::Degenerate(
            "patch features project to the zero vector".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    #[test]
    fn rendering_is_deterministic() {
        let cfg = RenderConfig::default();
        let a = render_text("Wireless Mouse, 2.4G, 1600DPI", &cfg).unwrap();
        let b = render_text("Wireless  Mouse,\n2.4G, 1600DPI ", &cfg).unwrap();
        assert_eq!(a, b);
        let c = render_text("Wireless Mouse, 2.4G, 1600DPl", &cfg).unwrap();
        assert_ne!(a.source_hash, c.source_hash);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn single_glyph_ink_bound() {
        let img = render_text("A", &RenderConfig::default()).unwrap();
        let ink = img.ink_count();
        assert!(ink > 0);
        assert!((ink as f64) < 0.01 * (1024.0 * 1024.0));
    }

    #[test]
    fn long_text_is_truncated_with_ellipsis() {
        let cfg = RenderConfig {
            canvas: 1024,
            glyph_size: 8,
            margin: 16,
            wrap: 80,
        };
        let text: String = (0..10_000).map(|i| (b'a' + (i % 26) as u8) as char).collect();
        let img = render_text(&text, &cfg).unwrap();
        assert!(img.has_ellipsis_at(&cfg, cfg.max_lines() - 1, cfg.wrap - 1));
        let short = render_text("abc", &cfg).unwrap();
        assert!(!short.has_ellipsis_at(&cfg, 0, 2));
    }

    #[test]
    fn unknown_glyph_uses_replacement() {
        let cfg = RenderConfig::default();
        let a = render_text("é", &cfg).unwrap();
        let b = render_text("ü", &cfg).unwrap();
        assert!(a.ink_count() > 0);
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn empty_text_and_bad_config() {
        let cfg = RenderConfig::default();
        assert!(matches!(render_text(" \n\t", &cfg), Err(Error::Data(_))));
        let bad = RenderConfig {
            canvas: 300,
            ..cfg.clone()
        };
        assert!(matches!(render_text("x", &bad), Err(Error::Config(_))));
        let bad = RenderConfig {
            canvas: 256,
            ..cfg
        };
        assert!(matches!(render_text("x", &bad), Err(Error::Config(_))));
    }

    #[test]
    fn downsample_shapes_and_constants() {
        let img = render_text("Resolution", &RenderConfig::default()).unwrap();
        let small = downsample(&img, 256).unwrap();
        assert_eq!((small.width, small.height), (256, 256));
        assert_eq!(downsample(&img, 1024).unwrap(), img);
        let gray = TextImage::uniform(512, 137);
        let g = downsample(&gray, 128).unwrap();
        assert!(g.pixels.iter().all(|&p| p == 137));
        assert!(matches!(downsample(&img, 300), Err(Error::Config(_))));
    }

    #[test]
    fn reference_encoder_contract() {
        let img = render_text("USB Receiver, Black", &RenderConfig::default()).unwrap();
        let a = reference_visual_encode(&img, 64, 7).unwrap();
        let b = reference_visual_encode(&img, 64, 7).unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-6);
        assert!(matches!(
            reference_visual_encode(&img, 4, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn white_and_black_encode_differently() {
        // white maps every patch to +1, black to -1, so the projections are antipodal
        let w = reference_visual_encode(&TextImage::uniform(256, 255), 32, 1).unwrap();
        let b = reference_visual_encode(&TextImage::uniform(256, 0), 32, 1).unwrap();
        let c = cosine(&w, &b);
        assert!((c + 1.0).abs() < 1e-12, "cosine {c}");
    }

    #[test]
    fn png_export() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_text("png", &RenderConfig::default()).unwrap();
        let path = dir.path().join("x.png");
        img.write_png(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
