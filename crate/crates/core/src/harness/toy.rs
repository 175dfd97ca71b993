//! Two-class mixture in two dimensions for studying imputation in isolation.
//!
//! Points are classified by the nearest class mean (the mean of that class's
//! cluster means), which gives a straight class boundary. A distortion adds
//! an offset to one attribute; imputation merges the distorted point with
//! its nearest cluster center, `(x + alpha c) / (1 + alpha)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyCluster {
    pub mean: Point,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyWorld {
    pub clusters: Vec<ToyCluster>,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// Attribute the distortion offsets (0 or 1).
    pub attribute: usize,
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

impl ToyWorld {
    pub fn new(clusters: Vec<ToyCluster>, sigma: f64, attribute: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if attribute > 1 {
            return Err(Error::Config(format!(
                "attribute must be 0 or 1, got {attribute}"
            )));
        }
        for class in 0..2u8 {
            if !clusters.iter().any(|c| c.class == class) {
                return Err(Error::Config(format!("class {class} has no cluster")));
            }
        }
        if let Some(c) = clusters.iter().find(|c| c.class > 1) {
            return Err(Error::Config(format!(
                "class {} is outside the two toy classes",
                c.class
            )));
        }
        for (i, a) in clusters.iter().enumerate() {
            if clusters[i + 1..].iter().any(|b| a.mean == b.mean) {
                return Err(Error::Config(format!(
                    "cluster mean {:?} appears twice",
                    a.mean
                )));
            }
        }
        Ok(Self {
            clusters,
            sigma,
            attribute,
        })
    }

    /// Two clusters per class. The inner clusters sit close to the class
    /// boundary, so a push along attribute 0 crosses it while the nearest
    /// cluster can still be the right one.
    pub fn two_cluster_classes() -> Self {
        let c = |x, y, class| ToyCluster {
            mean: [x, y],
            class,
        };
        Self::new(
            vec![
                c(0.0, 0.0, 0),
                c(2.0, 4.0, 0),
                c(4.0, 0.0, 1),
                c(6.0, 4.0, 1),
            ],
            0.7,
            0,
        )
        .expect("valid toy world")
    }

    pub fn class_means(&self) -> [Point; 2] {
        std::array::from_fn(|class| {
            let members: Vec<Point> = self
                .clusters
                .iter()
                .filter(|c| c.class as usize == class)
                .map(|c| c.mean)
                .collect();
            let n = members.len() as f64;
            [
                members.iter().map(|p| p[0]).sum::<f64>() / n,
                members.iter().map(|p| p[1]).sum::<f64>() / n,
            ]
        })
    }

    /// Nearest class mean; ties go to class 0.
    pub fn classify(&self, x: Point) -> u8 {
        let [m0, m1] = self.class_means();
        u8::from(dist2(x, m1) < dist2(x, m0))
    }

    pub fn nearest_cluster(&self, x: Point) -> usize {
        self.nearest_where(x, |_| true).expect("world has clusters")
    }

    fn nearest_where(&self, x: Point, keep: impl Fn(&ToyCluster) -> bool) -> Option<usize> {
        self.clusters
            .iter()
            .enumerate()
            .filter(|(_, c)| keep(c))
            .min_by(|a, b| dist2(x, a.1.mean).total_cmp(&dist2(x, b.1.mean)))
            .map(|(i, _)| i)
    }

    pub fn distort(&self, x: Point, magnitude: f64) -> Point {
        let mut out = x;
        out[self.attribute] += magnitude;
        out
    }

    /// Merge with the nearest cluster center; `alpha = inf` lands on it.
    pub fn impute(&self, x: Point, alpha: f64) -> Point {
        let c = self.clusters[self.nearest_cluster(x)].mean;
        if alpha.is_infinite() {
            return c;
        }
        [
            (x[0] + alpha * c[0]) / (1.0 + alpha),
            (x[1] + alpha * c[1]) / (1.0 + alpha),
        ]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (u8, Point) {
        let class = rng.random_range(0..2u8);
        let members: Vec<&ToyCluster> = self.clusters.iter().filter(|c| c.class == class).collect();
        let c = members[rng.random_range(0..members.len())];
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        (
            class,
            [c.mean[0] + self.sigma * nx, c.mean[1] + self.sigma * ny],
        )
    }
}

/// `|x - mu1|^2 / |x - mu2|^2`.
pub fn likelihood_ratio(x: Point, mu1: Point, mu2: Point) -> f64 {
    dist2(x, mu1) / dist2(x, mu2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyOutcome {
    pub trials: usize,
    pub distortion: f64,
    pub alpha: f64,
    pub error_before: f64,
    pub error_after: f64,
    /// Among points misclassified before imputation, the share classified correctly after.
    pub correction_rate: f64,
    /// Among points classified correctly before imputation, the share misclassified after.
    pub damage_rate: f64,
    /// Ratio with `mu1` the nearest true-class cluster and `mu2` the nearest
    /// other-class cluster to the distorted point.
    pub median_ratio_before: f64,
    pub median_ratio_after: f64,
    /// Share of trials where imputation lowered the ratio.
    pub ratio_decreased: f64,
}

/// Monte Carlo over `trials` points: distort, classify, impute, classify again.
pub fn toy_oracle(
    world: &ToyWorld,
    trials: usize,
    distortion: f64,
    alpha: f64,
    seed: u64,
) -> Result<ToyOutcome> {
    if trials == 0 {
        return Err(Error::Config("toy oracle needs at least one trial".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wrong_before, mut wrong_after, mut corrected, mut damaged) =
        (0usize, 0usize, 0usize, 0usize);
    let (mut ratio_before, mut ratio_after, mut decreased) = (
        Vec::with_capacity(trials),
        Vec::with_capacity(trials),
        0usize,
    );
    for _ in 0..trials {
        let (class, x) = world.sample(&mut rng);
        let xd = world.distort(x, distortion);
        let xa = world.impute(xd, alpha);
        let before_ok = world.classify(xd) == class;
        let after_ok = world.classify(xa) == class;
        wrong_before += usize::from(!before_ok);
        wrong_after += usize::from(!after_ok);
        corrected += usize::from(!before_ok && after_ok);
        damaged += usize::from(before_ok && !after_ok);

        let mu1 = world.clusters[world.nearest_where(xd, |c| c.class == class).unwrap()].mean;
        let mu2 = world.clusters[world.nearest_where(xd, |c| c.class != class).unwrap()].mean;
        let rb = likelihood_ratio(xd, mu1, mu2);
        let ra = likelihood_ratio(xa, mu1, mu2);
        ratio_before.push(rb);
        ratio_after.push(ra);
        decreased += usize::from(ra < rb);
    }
    let n = trials as f64;
    let share = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ToyOutcome {
        trials,
        distortion,
        alpha,
        error_before: wrong_before as f64 / n,
        error_after: wrong_after as f64 / n,
        correction_rate: share(corrected, wrong_before),
        damage_rate: share(damaged, trials - wrong_before),
        median_ratio_before: median(&mut ratio_before),
        median_ratio_after: median(&mut ratio_after),
        ratio_decreased: decreased as f64 / n,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Misclassification before and after imputation, by summing the mixture
/// density over a square grid of spacing `step` covering `extent` standard
/// deviations around every cluster.
pub fn toy_exact(
    world: &ToyWorld,
    distortion: f64,
    alpha: f64,
    step: f64,
    extent: f64,
) -> (f64, f64) {
    let n_class = |class: u8| world.clusters.iter().filter(|c| c.class == class).count() as f64;
    let half = (extent * world.sigma / step).ceil() as i64;
    let norm = step * step / (2.0 * std::f64::consts::PI * world.sigma * world.sigma);
    let (mut before, mut after) = (0.0, 0.0);
    for c in &world.clusters {
        let weight = 0.5 / n_class(c.class) * norm;
        for i in -half..=half {
            for j in -half..=half {
                let off = [i as f64 * step, j as f64 * step];
                let density = (-(off[0] * off[0] + off[1] * off[1])
                    / (2.0 * world.sigma * world.sigma))
                    .exp();
                let xd = world.distort([c.mean[0] + off[0], c.mean[1] + off[1]], distortion);
                if world.classify(xd) != c.class {
                    before += weight * density;
                }
                if world.classify(world.impute(xd, alpha)) != c.class {
                    after += weight * density;
                }
            }
        }
    }
    (before, after)
}
