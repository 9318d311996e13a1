//! Procedural two-style digit corpus rendered from a 5×7 stencil font.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainDataset, Split};
use crate::nets::mix_seed;

/// Side length of the square single-channel canvas.
pub const CANVAS: usize = 16;
const SCALE: usize = 2;
const OFFSET_X: usize = (CANVAS - 5 * SCALE) / 2;
const OFFSET_Y: usize = (CANVAS - 7 * SCALE) / 2;

pub const FONT: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineJitter {
    /// Maximum translation in pixels along each axis.
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    /// Maximum relative scale change, e.g. `0.1` for ±10%.
    pub max_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphStyle {
    /// Strokes drawn at -1 instead of +1.
    pub invert: bool,
    /// 3×3 max-filter passes applied to the ink map (0 or 1).
    pub stroke_dilate: u8,
    pub noise_sigma: f64,
    pub affine_jitter: AffineJitter,
    /// Pixel value where there is no ink.
    pub background_level: f64,
}

impl GlyphStyle {
    /// Crisp, centred, un-jittered glyphs: white strokes on black.
    pub fn identity() -> Self {
        GlyphStyle {
            invert: false,
            stroke_dilate: 0,
            noise_sigma: 0.0,
            affine_jitter: AffineJitter::default(),
            background_level: -1.0,
        }
    }

    /// Default source domain: clean strokes with pose jitter.
    pub fn source_default() -> Self {
        GlyphStyle {
            affine_jitter: DEFAULT_JITTER,
            ..Self::identity()
        }
    }

    /// Default target domain: inverted, dilated, noisy strokes with the same
    /// pose jitter as the source.
    pub fn target_default() -> Self {
        GlyphStyle {
            invert: true,
            stroke_dilate: 1,
            noise_sigma: 0.15,
            affine_jitter: DEFAULT_JITTER,
            background_level: 1.0,
        }
    }
}

const DEFAULT_JITTER: AffineJitter = AffineJitter {
    max_shift: 3.0,
    max_rotation_deg: 25.0,
    max_scale: 0.2,
};

fn base_ink(digit: usize) -> [f64; CANVAS * CANVAS] {
    let mut ink = [0.0; CANVAS * CANVAS];
    for (r, row) in FONT[digit].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    let y = OFFSET_Y + r * SCALE + dy;
                    let x = OFFSET_X + c * SCALE + dx;
                    ink[y * CANVAS + x] = 1.0;
                }
            }
        }
    }
    ink
}

fn bilinear(src: &[f64; CANVAS * CANVAS], x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= CANVAS as f64 || yi >= CANVAS as f64 {
            0.0
        } else {
            src[yi as usize * CANVAS + xi as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Renders one `16×16` glyph. The same `(digit, style, seed)` always yields
/// the same pixels.
pub fn render_glyph(digit: usize, style: &GlyphStyle, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = base_ink(digit % 10);
    let j = style.affine_jitter;
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let dx = sym(&mut rng, j.max_shift);
    let dy = sym(&mut rng, j.max_shift);
    let theta = sym(&mut rng, j.max_rotation_deg).to_radians();
    let scale = 1.0 + sym(&mut rng, j.max_scale);

    let mut ink = [0.0; CANVAS * CANVAS];
    if dx == 0.0 && dy == 0.0 && theta == 0.0 && scale == 1.0 {
        ink = base;
    } else {
        let c = (CANVAS as f64 - 1.0) / 2.0;
        let (s, co) = theta.sin_cos();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let px = (x as f64 - c - dx) / scale;
                let py = (y as f64 - c - dy) / scale;
                let sx = co * px + s * py + c;
                let sy = -s * px + co * py + c;
                ink[y * CANVAS + x] = bilinear(&base, sx, sy);
            }
        }
    }
    for _ in 0..style.stroke_dilate {
        let prev = ink;
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let mut m: f64 = 0.0;
                for yy in y.saturating_sub(1)..=(y + 1).min(CANVAS - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(CANVAS - 1) {
                        m = m.max(prev[yy * CANVAS + xx]);
                    }
                }
                ink[y * CANVAS + x] = m;
            }
        }
    }

    let stroke = if style.invert { -1.0 } else { 1.0 };
    let noise = (style.noise_sigma > 0.0).then(|| Normal::new(0.0, style.noise_sigma).expect("sigma"));
    ink.iter()
        .map(|&a| {
            let mut v = stroke * a + style.background_level * (1.0 - a);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            v.clamp(-1.0, 1.0)
        })
        .collect()
}

/// Renders `n_per_class` glyphs of each digit, interleaved by class
/// (`index = i·10 + digit`), fully labeled. Each split draws from its own
/// seed stream.
pub fn gen_glyph_domain(
    style: &GlyphStyle,
    n_per_class: usize,
    seed: u64,
    split: Split,
) -> Result<DomainDataset, DataError> {
    if n_per_class == 0 {
        return Err(DataError::Empty);
    }
    let mut pixels = Vec::with_capacity(n_per_class * 10 * CANVAS * CANVAS);
    let mut labels = Vec::with_capacity(n_per_class * 10);
    for i in 0..n_per_class {
        for digit in 0..10 {
            let index = i * 10 + digit;
            let s = mix_seed(seed, &format!("glyph/{}/{index}", split.as_str()));
            pixels.extend(render_glyph(digit, style, s));
            labels.push(Some(digit));
        }
    }
    let id = if style.invert { "glyph-inverted" } else { "glyph" };
    DomainDataset::new(id, [1, CANVAS, CANVAS], pixels, labels, 10, split)
}
