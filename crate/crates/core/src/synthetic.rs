//! Procedural cartoon clips: flat-shaded shapes moving over a flat
//! background. Used for the bundled test clip and for toy training sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasmith::{synthesize_lineart, LineArtParams};
use crate::error::Result;
use crate::raster::ColorImage;
use crate::trainer::TrainingPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Diamond,
}

/// A shape whose center moves with constant velocity and bounces off the
/// frame edges. Coordinates are in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub center: (f32, f32),
    pub radius: f32,
    pub velocity: (f32, f32),
}

impl Sprite {
    fn position(&self, t: f32, h: usize, w: usize) -> (f32, f32) {
        let bounce = |p: f32, v: f32, lo: f32, hi: f32| {
            let span = (hi - lo).max(1e-3);
            let u = (p - lo + v * t).rem_euclid(2.0 * span);
            lo + if u > span { 2.0 * span - u } else { u }
        };
        (
            bounce(self.center.0, self.velocity.0, self.radius, h as f32 - self.radius),
            bounce(self.center.1, self.velocity.1, self.radius, w as f32 - self.radius),
        )
    }

    /// Antialiased coverage of pixel center `(py, px)`.
    fn coverage(&self, cy: f32, cx: f32, py: f32, px: f32) -> f32 {
        let (dy, dx) = (py - cy, px - cx);
        let dist = match self.kind {
            ShapeKind::Disc => (dy * dy + dx * dx).sqrt(),
            ShapeKind::Square => dy.abs().max(dx.abs()),
            ShapeKind::Diamond => (dy.abs() + dx.abs()) / std::f32::consts::SQRT_2,
        };
        (self.radius - dist + 0.5).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: [f32; 3],
    pub sprites: Vec<Sprite>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Scene {
    /// `count` sprites with speeds (pixels per frame) up to `max_speed`.
    pub fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize, max_speed: f32) -> Self {
        let background = random_color(rng);
        let side = h.min(w) as f32;
        let sprites = (0..count)
            .map(|_| {
                let kind = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Diamond][rng.gen_range(0..3)];
                // keep sprites visually distinct from the background
                let mut color = random_color(rng);
                while color.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.6 {
                    color = random_color(rng);
                }
                let radius = rng.gen_range(0.12..0.22) * side;
                let angle = rng.gen_range(0.0..std::f32::consts::TAU);
                let speed = rng.gen_range(0.5..1.0) * max_speed;
                Sprite {
                    kind,
                    color,
                    center: (rng.gen_range(radius..h as f32 - radius), rng.gen_range(radius..w as f32 - radius)),
                    radius,
                    velocity: (speed * angle.sin(), speed * angle.cos()),
                }
            })
            .collect();
        Self { background, sprites }
    }

    /// Frame at time `t` (in frames).
    pub fn render(&self, t: f32, h: usize, w: usize) -> ColorImage {
        let centers: Vec<(f32, f32)> = self.sprites.iter().map(|s| s.position(t, h, w)).collect();
        ColorImage::from_fn(h, w, |y, x| {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut c = self.background;
            for (s, &(cy, cx)) in self.sprites.iter().zip(&centers) {
                let a = s.coverage(cy, cx, py, px);
                if a > 0.0 {
                    for k in 0..3 {
                        c[k] = c[k] * (1.0 - a) + s.color[k] * a;
                    }
                }
            }
            c
        })
        .expect("blended colors stay in range")
    }
}

/// Concatenated shots, one random scene each.
pub fn clip(seed: u64, shot_lengths: &[usize], h: usize, w: usize, sprites: usize, max_speed: f32) -> Vec<ColorImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    for &len in shot_lengths {
        let scene = Scene::random(&mut rng, h, w, sprites, max_speed);
        frames.extend((0..len).map(|t| scene.render(t as f32, h, w)));
    }
    frames
}

/// `count` training pairs, each from its own scene, `gap` frames apart.
pub fn pairs(seed: u64, count: usize, side: usize, sprites: usize, max_speed: f32, gap: usize) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LineArtParams::default();
    (0..count)
        .map(|_| {
            let scene = Scene::random(&mut rng, side, side, sprites, max_speed);
            let a = scene.render(0.0, side, side);
            let b = scene.render(gap as f32, side, side);
            Ok(TrainingPair {
                prev_sketch: synthesize_lineart(&a, &params),
                next_sketch: synthesize_lineart(&b, &params),
                prev_color: a,
                next_color: b,
            })
        })
        .collect()
}
