//! Procedural CIFAR-format dataset used when the real batches are not present.
//!
//! Every image holds one centered object drawn from its class's shape family
//! over a textured background. Like natural photo classes, each class also
//! has typical colors: a background palette with a dominant texture
//! orientation, and an object hue. Those cues are noisy and sometimes taken
//! from another class, so shape stays necessary for high accuracy. Each
//! class has two variants (filled, outlined) to give the per-class feature
//! distribution more than one mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ImageRecord, CHANNELS, IMAGE_SIDE, NUM_CLASSES, PIXEL_COUNT, PLANE};

/// Seed offset separating the synthetic test split from the training split.
pub const TEST_SEED_OFFSET: u64 = 0x5eed_7e57;

/// Background color, texture orientation (radians) and object color per class.
const STYLES: [([f64; 3], f64, [f64; 3]); NUM_CLASSES] = [
    ([110.0, 160.0, 215.0], 0.0, [200.0, 200.0, 205.0]),
    ([120.0, 120.0, 125.0], 0.3, [210.0, 70.0, 60.0]),
    ([115.0, 160.0, 90.0], 0.6, [190.0, 150.0, 100.0]),
    ([170.0, 140.0, 110.0], 0.9, [200.0, 120.0, 170.0]),
    ([100.0, 140.0, 90.0], 1.2, [230.0, 190.0, 130.0]),
    ([190.0, 180.0, 160.0], 1.5, [140.0, 110.0, 90.0]),
    ([90.0, 120.0, 80.0], 1.8, [150.0, 210.0, 90.0]),
    ([150.0, 180.0, 120.0], 2.1, [170.0, 110.0, 70.0]),
    ([90.0, 140.0, 190.0], 2.4, [235.0, 235.0, 235.0]),
    ([160.0, 160.0, 170.0], 2.7, [230.0, 190.0, 60.0]),
];

#[derive(Debug, Clone, Copy)]
pub struct SyntheticShapes {
    pub seed: u64,
    /// Object radius range in pixels.
    pub radius: (f64, f64),
    /// Maximum center offset from the image center, in pixels.
    pub jitter: f64,
    pub noise_sigma: f64,
    /// Per-channel spread of background and object colors around the class means.
    pub color_sigma: f64,
    /// Probability that the background comes from a random class.
    pub context_swap: f64,
}

impl SyntheticShapes {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            radius: (10.0, 14.0),
            jitter: 2.0,
            noise_sigma: 8.0,
            color_sigma: 30.0,
            context_swap: 0.3,
        }
    }

    /// Image `index` depends only on the seed and the index, so any prefix of
    /// a larger set is identical to a smaller set.
    pub fn image(&self, index: usize) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let label = (index % NUM_CLASSES) as u8;
        let outlined = rng.random_bool(0.5);
        let context = if rng.random_bool(self.context_swap) {
            rng.random_range(0..NUM_CLASSES)
        } else {
            label as usize
        };

        let color = Normal::new(0.0, self.color_sigma.max(1e-9)).expect("finite sigma");
        let mut canvas = background(&mut rng, context, &color);

        let cy = IMAGE_SIDE as f64 / 2.0 - 0.5 + rng.random_range(-self.jitter..=self.jitter);
        let cx = IMAGE_SIDE as f64 / 2.0 - 0.5 + rng.random_range(-self.jitter..=self.jitter);
        let r = rng.random_range(self.radius.0..=self.radius.1);
        let angle: f64 = rng.random_range(-0.25..0.25);
        let (sin, cos) = angle.sin_cos();
        let fg = object_color(&mut rng, &canvas, cy, cx, STYLES[label as usize].2, &color);
        let shade: f64 = rng.random_range(-0.25..0.25);

        for row in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                // 2x2 supersampled coverage
                let mut cover = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        let dy = (row as f64 + sy - 0.5 - cy) / r;
                        let dx = (col as f64 + sx - 0.5 - cx) / r;
                        let u = cos * dx - sin * dy;
                        let v = sin * dx + cos * dy;
                        if inside(label, outlined, u, v) {
                            cover += 0.25;
                        }
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let gradient = 1.0 + shade * ((row as f64 - cy) / r);
                for c in 0..CHANNELS {
                    let px = &mut canvas[c * PLANE + row * IMAGE_SIDE + col];
                    *px = (1.0 - cover) * *px + cover * fg[c] * gradient;
                }
            }
        }

        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let pixels = canvas
            .iter()
            .map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageRecord::new(label, pixels).expect("synthetic image is well formed")
    }

    pub fn generate(&self, count: usize) -> Vec<ImageRecord> {
        (0..count).map(|i| self.image(i)).collect()
    }

    pub fn test_split(&self) -> Self {
        Self {
            seed: self.seed.wrapping_add(TEST_SEED_OFFSET),
            ..*self
        }
    }
}

fn background(rng: &mut ChaCha8Rng, class: usize, color: &Normal<f64>) -> Vec<f64> {
    let (base, orientation, _) = STYLES[class];
    let c0: [f64; 3] = std::array::from_fn(|c| base[c] + color.sample(rng));
    let c1: [f64; 3] = std::array::from_fn(|c| c0[c] + 0.5 * color.sample(rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    // one wave along the class orientation, one random
    let waves = [
        (
            rng.random_range(0.5..0.9),
            orientation + rng.random_range(-0.2..0.2),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(12.0..25.0),
        ),
        (
            rng.random_range(0.15..0.6),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(4.0..12.0),
        ),
    ];

    let mut canvas = vec![0.0; PIXEL_COUNT];
    let half = IMAGE_SIDE as f64 / 2.0;
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let y = row as f64 - half;
            let x = col as f64 - half;
            let t = ((y * dy + x * dx) / IMAGE_SIDE as f64 + 0.5).clamp(0.0, 1.0);
            let texture: f64 = waves
                .iter()
                .map(|&(freq, dir, phase, amp)| {
                    amp * (freq * (x * dir.cos() + y * dir.sin()) + phase).sin()
                })
                .sum();
            for c in 0..CHANNELS {
                canvas[c * PLANE + row * IMAGE_SIDE + col] =
                    (1.0 - t) * c0[c] + t * c1[c] + texture;
            }
        }
    }
    canvas
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Class object color with jitter, pushed away from the local background
/// luminance when the two are too close.
fn object_color(
    rng: &mut ChaCha8Rng,
    canvas: &[f64],
    cy: f64,
    cx: f64,
    mean: [f64; 3],
    color: &Normal<f64>,
) -> [f64; 3] {
    let row = cy.round().clamp(0.0, 31.0) as usize;
    let col = cx.round().clamp(0.0, 31.0) as usize;
    let bg = luminance(std::array::from_fn(|c| {
        canvas[c * PLANE + row * IMAGE_SIDE + col]
    }));
    let fg: [f64; 3] = std::array::from_fn(|c| (mean[c] + color.sample(rng)).clamp(0.0, 255.0));
    let gap = luminance(fg) - bg;
    if gap.abs() >= 50.0 {
        return fg;
    }
    let shift = if gap >= 0.0 { 50.0 - gap } else { -50.0 - gap };
    std::array::from_fn(|c| (fg[c] + shift).clamp(0.0, 255.0))
}

fn filled(label: u8, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let rho = (u * u + v * v).sqrt();
    match label {
        0 => rho <= 1.0,
        1 => au.max(av) <= 0.85,
        2 => (-0.9..=0.8).contains(&v) && au <= (v + 0.9) / 1.7 * 0.95,
        3 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        4 => (0.55..=1.0).contains(&rho),
        5 => au <= 1.0 && ((v - 0.45).abs() <= 0.22 || (v + 0.45).abs() <= 0.22),
        6 => av <= 1.0 && ((u - 0.45).abs() <= 0.22 || (u + 0.45).abs() <= 0.22),
        7 => au + av <= 1.0,
        8 => ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && au.max(av) <= 0.9,
        _ => rho <= 1.0 && v <= 0.1,
    }
}

fn inside(label: u8, outlined: bool, u: f64, v: f64) -> bool {
    if !filled(label, u, v) {
        return false;
    }
    !outlined || !filled(label, u / 0.6, v / 0.6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_prefix_stable() {
        let g = SyntheticShapes::new(7);
        let a = g.generate(30);
        let b = g.generate(12);
        assert_eq!(&a[..12], &b[..]);
        assert_eq!(g.generate(30), a);
        assert_ne!(g.test_split().image(0), a[0]);
    }

    #[test]
    fn balanced_labels() {
        let imgs = SyntheticShapes::new(1).generate(100);
        assert_eq!(super::super::label_histogram(&imgs), [10; NUM_CLASSES]);
    }

    #[test]
    fn object_sits_in_the_center() {
        // The 50% occluder covers [4, 27); most object pixels must fall inside it.
        for label in 0..NUM_CLASSES as u8 {
            let mut inner = 0;
            let mut total = 0;
            for row in 0..32 {
                for col in 0..32 {
                    let u = (row as f64 - 15.5) / 11.0;
                    let v = (col as f64 - 15.5) / 11.0;
                    if filled(label, u, v) {
                        total += 1;
                        if (4..27).contains(&row) && (4..27).contains(&col) {
                            inner += 1;
                        }
                    }
                }
            }
            assert!(inner as f64 / total as f64 > 0.8, "class {label}");
        }
    }
}
