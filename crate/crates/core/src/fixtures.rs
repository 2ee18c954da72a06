//! Deterministic synthetic corpora: smoothed noise textures with simple
//! procedural shapes, plus (target, base) pairs where the target carries a
//! procedural "A"-like glyph composited onto the base.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlyphSpec {
    /// Glyph box center, relative to image size.
    pub center_x: f32,
    pub center_y: f32,
    /// Glyph height as a fraction of the min image side.
    pub size: f32,
    /// Stroke thickness as a fraction of the min image side.
    pub thickness: f32,
    pub color: [f32; 3],
    /// Composite opacity on the stroke mask.
    pub alpha: f32,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            center_x: 0.42,
            center_y: 0.5,
            size: 0.68,
            thickness: 0.1,
            color: [0.95, 0.06, 0.08],
            alpha: 0.9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub height: usize,
    pub width: usize,
    pub corpus_count: usize,
    pub triple_count: usize,
    pub texture_seed: u64,
    pub glyph: GlyphSpec,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            height: 64,
            width: 64,
            corpus_count: 128,
            triple_count: 10,
            texture_seed: 7,
            glyph: GlyphSpec::default(),
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.corpus_count < 1 || self.triple_count < 1 {
            return Err(Error::contract("corpus and triple counts must be >= 1".to_string()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::contract(format!("image size {}x{} too small", self.height, self.width)));
        }
        let g = &self.glyph;
        if !(g.size > 0.0 && g.thickness > 0.0 && g.alpha > 0.0 && g.alpha <= 1.0) {
            return Err(Error::contract("glyph size, thickness and alpha must be positive (alpha <= 1)".to_string()));
        }
        // Glyph strokes (legs reach 0.38 * size sideways) must stay inside
        // the image, soft edge included.
        let side = self.height.min(self.width) as f32;
        let margin = (0.5 * g.thickness * side + 1.0) / side;
        let half_w = (0.38 * g.size * side) / side + margin;
        let half_h = 0.5 * g.size + margin;
        let cx_px = g.center_x * self.width as f32 / side;
        let cy_px = g.center_y * self.height as f32 / side;
        let w_rel = self.width as f32 / side;
        let h_rel = self.height as f32 / side;
        if cx_px - half_w < 0.0 || cx_px + half_w > w_rel || cy_px - half_h < 0.0 || cy_px + half_h > h_rel {
            return Err(Error::contract(format!(
                "glyph exceeds image bounds (center {},{} size {} thickness {})",
                g.center_x, g.center_y, g.size, g.thickness
            )));
        }
        if g.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::contract("glyph color channels must lie in [0,1]".to_string()));
        }
        Ok(())
    }
}

fn mix_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-image generators independent.
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plain uniform-noise image; test helper.
pub fn uniform_image(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, c], |_| rng.random::<f32>())
}

/// One corpus texture: bilinearly smoothed coarse noise, one or two
/// procedural shapes, light fine-grain noise, clamped to [0,1].
fn texture(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const G: usize = 6;
    let coarse: Vec<f32> = (0..G * G * 3).map(|_| rng.random::<f32>()).collect();

    let mut img = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        let fy = y as f32 / (h - 1) as f32 * (G - 1) as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        let y1 = (y0 + 1).min(G - 1);
        for x in 0..w {
            let fx = x as f32 / (w - 1) as f32 * (G - 1) as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let x1 = (x0 + 1).min(G - 1);
            for ch in 0..3 {
                let c00 = coarse[(y0 * G + x0) * 3 + ch];
                let c01 = coarse[(y0 * G + x1) * 3 + ch];
                let c10 = coarse[(y1 * G + x0) * 3 + ch];
                let c11 = coarse[(y1 * G + x1) * 3 + ch];
                let top = c00 + (c01 - c00) * tx;
                let bot = c10 + (c11 - c10) * tx;
                img.data_mut()[(y * w + x) * 3 + ch] = top + (bot - top) * ty;
            }
        }
    }

    let shapes = 1 + (rng.random::<u32>() % 2) as usize;
    for _ in 0..shapes {
        let kind = rng.random::<u32>() % 3;
        let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let alpha = 0.45 + 0.45 * rng.random::<f32>();
        match kind {
            0 => {
                // axis-aligned rectangle
                let x0 = (rng.random::<f32>() * 0.7 * w as f32) as usize;
                let y0 = (rng.random::<f32>() * 0.7 * h as f32) as usize;
                let bw = 2 + (rng.random::<f32>() * 0.3 * w as f32) as usize;
                let bh = 2 + (rng.random::<f32>() * 0.3 * h as f32) as usize;
                for y in y0..(y0 + bh).min(h) {
                    for x in x0..(x0 + bw).min(w) {
                        blend(&mut img, y, x, w, &color, alpha);
                    }
                }
            }
            1 => {
                // disc
                let cx = rng.random::<f32>() * w as f32;
                let cy = rng.random::<f32>() * h as f32;
                let r = 2.0 + rng.random::<f32>() * 0.2 * w.min(h) as f32;
                for y in 0..h {
                    for x in 0..w {
                        let dx = x as f32 + 0.5 - cx;
                        let dy = y as f32 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            blend(&mut img, y, x, w, &color, alpha);
                        }
                    }
                }
            }
            _ => {
                // stroke segment
                let a = (rng.random::<f32>() * w as f32, rng.random::<f32>() * h as f32);
                let b = (rng.random::<f32>() * w as f32, rng.random::<f32>() * h as f32);
                let t = 1.0 + rng.random::<f32>() * 0.05 * w.min(h) as f32;
                for y in 0..h {
                    for x in 0..w {
                        let p = (x as f32 + 0.5, y as f32 + 0.5);
                        if segment_distance(p, a, b) <= t {
                            blend(&mut img, y, x, w, &color, alpha);
                        }
                    }
                }
            }
        }
    }

    for v in img.data_mut() {
        *v += 0.04 * (rng.random::<f32>() - 0.5);
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn blend(img: &mut Tensor, y: usize, x: usize, w: usize, color: &[f32; 3], alpha: f32) {
    for ch in 0..3 {
        let idx = (y * w + x) * 3 + ch;
        let base = img.data()[idx];
        img.data_mut()[idx] = base + alpha * (color[ch] - base);
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((px * vx + py * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (px - t * vx, py - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Deterministic clean corpus; bit-identical for a given spec.
pub fn make_clean_corpus(spec: &FixtureSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    Ok(par::map_range(spec.corpus_count, |i| {
        texture(mix_seed(spec.texture_seed, i as u64), spec.height, spec.width)
    }))
}

/// Soft stroke mask of an "A"-like glyph: two legs from the apex plus a
/// crossbar, each a thick segment with a ~0.75 px soft edge.
pub fn glyph_mask(spec: &FixtureSpec) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let g = &spec.glyph;
    let side = h.min(w) as f32;
    let size = g.size * side;
    let half_t = 0.5 * g.thickness * side;
    let cx = g.center_x * w as f32;
    let cy = g.center_y * h as f32;

    let apex = (cx, cy - 0.5 * size);
    let bl = (cx - 0.38 * size, cy + 0.5 * size);
    let br = (cx + 0.38 * size, cy + 0.5 * size);
    let lerp = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
    let bar_l = lerp(apex, bl, 0.62);
    let bar_r = lerp(apex, br, 0.62);
    let segments = [(apex, bl), (apex, br), (bar_l, bar_r)];

    const EDGE: f32 = 0.75;
    Tensor::from_fn(&[h, w, 1], |i| {
        let y = i / w;
        let x = i % w;
        let p = (x as f32 + 0.5, y as f32 + 0.5);
        let mut m = 0.0f32;
        for &(a, b) in &segments {
            let d = segment_distance(p, a, b);
            let v = ((half_t + EDGE - d) / EDGE).clamp(0.0, 1.0);
            m = m.max(v);
        }
        m
    })
}

/// (target, base) pairs: bases are distinct corpus images, targets are the
/// same images with the glyph composited on top.
pub fn make_triples(spec: &FixtureSpec, corpus: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
    spec.validate()?;
    if corpus.len() < spec.triple_count {
        return Err(Error::contract(format!(
            "corpus has {} images, need {} for disjoint triples",
            corpus.len(),
            spec.triple_count
        )));
    }
    let mask = glyph_mask(spec);
    Ok((0..spec.triple_count)
        .map(|i| {
            let x_b = corpus[i].clone();
            let x_c = composite_glyph(&x_b, &mask, &spec.glyph);
            (x_c, x_b)
        })
        .collect())
}

/// Alpha-composites the glyph color over the base wherever the mask is
/// positive; pixels outside the mask are untouched bit-for-bit.
pub fn composite_glyph(x_b: &Tensor, mask: &Tensor, glyph: &GlyphSpec) -> Tensor {
    let (h, w) = (x_b.h(), x_b.w());
    let mut out = x_b.clone();
    for y in 0..h {
        for x in 0..w {
            let m = mask.at3(y, x, 0) * glyph.alpha;
            if m > 0.0 {
                for ch in 0..3 {
                    let idx = (y * w + x) * 3 + ch;
                    let base = out.data()[idx];
                    out.data_mut()[idx] = base + m * (glyph.color[ch] - base);
                }
            }
        }
    }
    out
}
