//! Procedural image dataset with a controlled cloud/edge domain gap.
//!
//! Real photo corpora would swamp a desk-scale study, so the subjects here
//! are rendered: each [`SubjectSpec`] names a silhouette category plus three
//! appearance attributes, and [`render`] rasterises it into a 32x32
//! grayscale image.  The geometry is jittered per image seed, so repeated
//! renders of one spec form a distribution rather than a single bitmap.
//!
//! The cloud/edge knowledge gap is modelled by [`StyleParams`]: the two
//! sides draw the *same* subjects with different stroke weight, brightness,
//! and jitter, which is exactly the kind of distribution shift the
//! alignment stages are supposed to bridge.

use gsc_core::deka::derive_seed;
use gsc_core::genmodel::Prompt;
use gsc_core::nn::{tokenize, Vocab};
use gsc_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Silhouette family of a rendered subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectCategory {
    /// Disc head on a slab body with limbs.
    Figure,
    /// Horizontal ellipse body with a snout disc and four legs.
    Creature,
    /// Tall block with a window grid.
    Tower,
}

impl SubjectCategory {
    fn word(self) -> &'static str {
        match self {
            SubjectCategory::Figure => "figure",
            SubjectCategory::Creature => "creature",
            SubjectCategory::Tower => "tower",
        }
    }
}

/// Subject brightness attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tone {
    Bright,
    Dark,
}

impl Tone {
    fn word(self) -> &'static str {
        match self {
            Tone::Bright => "bright",
            Tone::Dark => "dark",
        }
    }

    fn level(self) -> f64 {
        match self {
            Tone::Bright => 0.85,
            Tone::Dark => 0.55,
        }
    }
}

/// Subject fill pattern attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TexturePattern {
    Plain,
    Striped,
}

impl TexturePattern {
    fn word(self) -> &'static str {
        match self {
            TexturePattern::Plain => "plain",
            TexturePattern::Striped => "striped",
        }
    }
}

/// Scene background attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    /// Vertical brightness gradient.
    Field,
    /// Near-black flat backdrop.
    Void,
}

impl Background {
    fn word(self) -> &'static str {
        match self {
            Background::Field => "field",
            Background::Void => "void",
        }
    }
}

/// A fully specified procedural subject.  Its prompt is the four attribute
/// words in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectSpec {
    pub category: SubjectCategory,
    pub tone: Tone,
    pub texture: TexturePattern,
    pub background: Background,
}

impl SubjectSpec {
    /// The prompt text, e.g. `"figure bright plain field"`.
    pub fn prompt_text(&self) -> String {
        format!(
            "{} {} {} {}",
            self.category.word(),
            self.tone.word(),
            self.texture.word(),
            self.background.word()
        )
    }

    /// Tokenised prompt under `vocab`.
    pub fn prompt(&self, vocab: &Vocab) -> Result<Prompt> {
        Ok(Prompt::new(tokenize(&self.prompt_text(), vocab)?))
    }
}

/// The nine words every prompt is built from.
pub fn prompt_vocab() -> Vocab {
    Vocab::new(&[
        "figure", "creature", "tower", "bright", "dark", "plain", "striped", "field", "void",
    ])
}

/// The default three-subject roster used throughout the experiments.
pub fn desk_subjects() -> Vec<SubjectSpec> {
    vec![
        SubjectSpec {
            category: SubjectCategory::Figure,
            tone: Tone::Bright,
            texture: TexturePattern::Plain,
            background: Background::Field,
        },
        SubjectSpec {
            category: SubjectCategory::Creature,
            tone: Tone::Dark,
            texture: TexturePattern::Striped,
            background: Background::Void,
        },
        SubjectSpec {
            category: SubjectCategory::Tower,
            tone: Tone::Bright,
            texture: TexturePattern::Striped,
            background: Background::Field,
        },
    ]
}

/// Rendering style knobs.  A style is what separates the cloud and edge
/// domains: same subjects, different drawing conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleParams {
    /// Half-width added to limbs and outlines, in pixels.
    pub stroke: f64,
    /// Additive shift applied to the subject intensity.
    pub intensity_shift: f64,
    /// Amplitude of the uniform positional jitter, in pixels.
    pub jitter: f64,
}

impl StyleParams {
    /// Thin, bright, steady renders: the cloud's native look.
    pub fn cloud_style() -> StyleParams {
        StyleParams {
            stroke: 0.6,
            intensity_shift: 0.0,
            jitter: 0.8,
        }
    }

    /// Heavier stroke, slightly dimmer, shakier placement: the edge's look.
    pub fn edge_style() -> StyleParams {
        StyleParams {
            stroke: 1.7,
            intensity_shift: -0.08,
            jitter: 1.6,
        }
    }
}

struct Canvas {
    size: usize,
    /// Background layer.
    base: Vec<f64>,
    /// Subject mask: >0 where the subject covers the pixel.
    mask: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Canvas {
        Canvas {
            size,
            base: vec![0.0; size * size],
            mask: vec![0.0; size * size],
        }
    }

    fn paint_disc(&mut self, cx: f64, cy: f64, r: f64) {
        let n = self.size as isize;
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.mask[(y * n + x) as usize] = 1.0;
                }
            }
        }
    }

    fn paint_ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64) {
        let n = self.size as isize;
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - cx) / a;
                let dy = (y as f64 - cy) / b;
                if dx * dx + dy * dy <= 1.0 {
                    self.mask[(y * n + x) as usize] = 1.0;
                }
            }
        }
    }

    fn paint_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let n = self.size as isize;
        for y in 0..n {
            for x in 0..n {
                let fx = x as f64;
                let fy = y as f64;
                if fx >= x0 && fx <= x1 && fy >= y0 && fy <= y1 {
                    self.mask[(y * n + x) as usize] = 1.0;
                }
            }
        }
    }

    /// Punch a hole in the subject mask (used for windows).
    fn clear_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let n = self.size as isize;
        for y in 0..n {
            for x in 0..n {
                let fx = x as f64;
                let fy = y as f64;
                if fx >= x0 && fx <= x1 && fy >= y0 && fy <= y1 {
                    self.mask[(y * n + x) as usize] = 0.0;
                }
            }
        }
    }
}

/// Rasterise one subject under a style.  Deterministic in `(spec, style,
/// size, seed)`; the seed drives positional jitter and a faint pixel-noise
/// film so repeated renders are similar but never identical.
pub fn render(spec: &SubjectSpec, style: &StyleParams, size: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas::new(size);
    let s = size as f64;

    // Uniform jitter in [-jitter, jitter]; drawn even when the amplitude is
    // zero so the noise film below sees the same RNG stream across styles.
    let jx = (rng.gen::<f64>() * 2.0 - 1.0) * style.jitter;
    let jy = (rng.gen::<f64>() * 2.0 - 1.0) * style.jitter;
    let cx = s / 2.0 + jx;
    let cy = s / 2.0 + jy;
    let w = style.stroke;

    match spec.background {
        Background::Field => {
            for y in 0..size {
                let v = 0.12 + 0.22 * (y as f64 / (s - 1.0));
                for x in 0..size {
                    canvas.base[y * size + x] = v;
                }
            }
        }
        Background::Void => {
            for v in canvas.base.iter_mut() {
                *v = 0.03;
            }
        }
    }

    let unit = s / 32.0; // geometry is authored at 32x32 and scaled
    match spec.category {
        SubjectCategory::Figure => {
            canvas.paint_disc(cx, cy - 7.0 * unit, 3.2 * unit + w);
            canvas.paint_rect(
                cx - 2.5 * unit - w,
                cy - 3.0 * unit,
                cx + 2.5 * unit + w,
                cy + 5.0 * unit,
            );
            // Arms.
            canvas.paint_rect(
                cx - 6.5 * unit - w,
                cy - 2.5 * unit - w,
                cx + 6.5 * unit + w,
                cy - 1.0 * unit + w,
            );
            // Legs.
            canvas.paint_rect(
                cx - 2.2 * unit - w,
                cy + 5.0 * unit,
                cx - 0.7 * unit + w,
                cy + 10.0 * unit,
            );
            canvas.paint_rect(
                cx + 0.7 * unit - w,
                cy + 5.0 * unit,
                cx + 2.2 * unit + w,
                cy + 10.0 * unit,
            );
        }
        SubjectCategory::Creature => {
            canvas.paint_ellipse(cx, cy, 7.0 * unit + w, 3.8 * unit + w);
            canvas.paint_disc(cx + 7.5 * unit, cy - 2.5 * unit, 2.4 * unit + w);
            for (i, leg) in [-5.0f64, -1.7, 1.7, 5.0].iter().enumerate() {
                let _ = i;
                canvas.paint_rect(
                    cx + leg * unit - 0.6 * unit - w,
                    cy + 3.0 * unit,
                    cx + leg * unit + 0.6 * unit + w,
                    cy + 8.0 * unit,
                );
            }
        }
        SubjectCategory::Tower => {
            canvas.paint_rect(
                cx - 4.0 * unit - w,
                cy - 11.0 * unit,
                cx + 4.0 * unit + w,
                cy + 11.0 * unit,
            );
            for row in 0..4 {
                for col in 0..2 {
                    let wx = cx - 2.2 * unit + col as f64 * 4.4 * unit;
                    let wy = cy - 8.0 * unit + row as f64 * 5.0 * unit;
                    canvas.clear_rect(
                        wx - 0.8 * unit,
                        wy - 0.8 * unit,
                        wx + 0.8 * unit,
                        wy + 0.8 * unit,
                    );
                }
            }
        }
    }

    let level = (spec.tone.level() + style.intensity_shift).clamp(0.0, 1.0);
    let mut pixels = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut v = canvas.base[i];
            if canvas.mask[i] > 0.0 {
                v = level;
                if spec.texture == TexturePattern::Striped && (y / 2) % 2 == 0 {
                    v *= 0.55;
                }
            }
            // Faint film grain keeps renders of one spec distinct.
            v += (rng.gen::<f64>() - 0.5) * 0.04;
            pixels[i] = v.clamp(0.0, 1.0);
        }
    }

    Tensor::new(pixels, &[1, size, size])
}

/// Render `count` images cycling through `specs`, pairing each with its
/// prompt.  Image `i` uses the seed derived from `(seed, i)`, so any single
/// image can be regenerated without replaying the whole set.
pub fn synth_dataset(
    specs: &[SubjectSpec],
    style: &StyleParams,
    vocab: &Vocab,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(Tensor, Prompt)>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let spec = &specs[i % specs.len()];
        let img = render(spec, style, size, derive_seed(seed, i as u64))?;
        out.push((img, spec.prompt(vocab)?));
    }
    Ok(out)
}
