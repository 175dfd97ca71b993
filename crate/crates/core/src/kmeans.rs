//! Euclidean K-means with k-means++ seeding, and exact nearest-center lookup.
//!
//! Assignment uses the expansion `|x|^2 - 2 x.c + |c|^2` through a matrix
//! product; the reported inertia is recomputed exactly from the chosen
//! assignment.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia decrease drops below this value.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            tol: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Array2<f64>,
    pub labels: Vec<usize>,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// True when the last update left every assignment unchanged.
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest row of `centers`; ties go to
/// the lowest index.
pub fn nearest_center(query: ArrayView1<f64>, centers: ArrayView2<f64>) -> Result<(usize, f64)> {
    if centers.nrows() == 0 {
        return Err(Error::EmptyCenters);
    }
    if centers.ncols() != query.len() {
        return Err(Error::Dimension(format!(
            "query has {} dims, centers have {}",
            query.len(),
            centers.ncols()
        )));
    }
    let q = query.to_vec();
    let mut best = (0, f64::INFINITY);
    for (i, row) in centers.outer_iter().enumerate() {
        let d = match row.as_slice() {
            Some(r) => squared_distance(&q, r),
            None => row.iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum(),
        };
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

fn seed_plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut min_d2: Vec<f64> = data
        .outer_iter()
        .map(|x| squared_distance(x.as_slice().unwrap(), data.row(first).as_slice().unwrap()))
        .collect();

    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        let center = centers.row(c).to_vec();
        for (i, x) in data.outer_iter().enumerate() {
            let d = squared_distance(x.as_slice().unwrap(), &center);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    centers
}

/// Nearest-center labels for every row plus the exact inertia of that assignment.
pub fn assign(data: ArrayView2<f64>, centers: ArrayView2<f64>) -> (Vec<usize>, f64) {
    let center_norms: Array1<f64> = centers.map_axis(Axis(1), |c| c.dot(&c));
    let cross = data.dot(&centers.t());
    let mut labels = Vec::with_capacity(data.nrows());
    let mut inertia = 0.0;
    for (i, row) in cross.outer_iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (j, &dot) in row.iter().enumerate() {
            let d = center_norms[j] - 2.0 * dot;
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        inertia += squared_distance(
            data.row(i).as_slice().unwrap(),
            centers.row(best.0).as_slice().unwrap(),
        );
    }
    (labels, inertia)
}

fn update_centers(data: ArrayView2<f64>, labels: &[usize], centers: &mut Array2<f64>) {
    let k = centers.nrows();
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros(centers.raw_dim());
    for (row, &l) in data.outer_iter().zip(labels) {
        counts[l] += 1;
        let mut s = sums.row_mut(l);
        s += &row;
    }
    let mut empty = Vec::new();
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            empty.push(j);
        } else {
            let mean = &sums.row(j) / count as f64;
            centers.row_mut(j).assign(&mean);
        }
    }
    // An empty cluster takes over the row farthest from its own center.
    for j in empty {
        let mut far = (0, -1.0);
        for (i, row) in data.outer_iter().enumerate() {
            let d = squared_distance(
                row.as_slice().unwrap(),
                centers.row(labels[i]).as_slice().unwrap(),
            );
            if d > far.1 {
                far = (i, d);
            }
        }
        centers.row_mut(j).assign(&data.row(far.0));
    }
}

/// Lloyd iterations from a k-means++ start. `data` must be in standard
/// (row-major) layout.
pub fn kmeans(data: ArrayView2<f64>, params: &KMeansParams) -> Result<KMeansFit> {
    let n = data.nrows();
    if params.k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if n < params.k {
        return Err(Error::Config(format!(
            "k-means with k = {} needs at least that many rows, got {n}",
            params.k
        )));
    }
    let data = data.as_standard_layout();
    let data = data.view();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers = seed_plus_plus(data, params.k, &mut rng);
    let (mut labels, mut inertia) = assign(data, centers.view());
    let mut history = vec![inertia];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        update_centers(data, &labels, &mut centers);
        let (next_labels, next_inertia) = assign(data, centers.view());
        history.push(next_inertia);
        let unchanged = next_labels == labels;
        let rel = if inertia > 0.0 {
            (inertia - next_inertia) / inertia
        } else {
            0.0
        };
        labels = next_labels;
        inertia = next_inertia;
        if unchanged {
            converged = true;
            break;
        }
        if rel < params.tol {
            break;
        }
    }

    Ok(KMeansFit {
        centers,
        labels,
        inertia_history: history,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_force(query: &[f64], centers: &Array2<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..centers.nrows() {
            let mut d = 0.0;
            for j in 0..query.len() {
                let diff = query[j] - centers[[i, j]];
                d += diff * diff;
            }
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn exact_match_has_zero_distance() {
        let centers = random_matrix(20, 8, 1);
        let (idx, d) = nearest_center(centers.row(7), centers.view()).unwrap();
        assert_eq!((idx, d), (7, 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let centers = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let (idx, _) = nearest_center(array![0.0, 0.0].view(), centers.view()).unwrap();
        assert_eq!(idx, 0);
        let (idx, _) =
            nearest_center(array![0.0, 0.5].view(), centers.slice(ndarray::s![1.., ..])).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn empty_center_set_is_an_error() {
        let centers = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            nearest_center(array![1.0, 2.0, 3.0].view(), centers.view()),
            Err(Error::EmptyCenters)
        ));
    }

    #[test]
    fn thousand_centers_match_exhaustive_scan() {
        let centers = random_matrix(1000, 16, 2);
        let queries = random_matrix(50, 16, 3);
        for q in queries.outer_iter() {
            let got = nearest_center(q, centers.view()).unwrap();
            let want = brute_force(q.as_slice().unwrap(), &centers);
            assert_eq!(got.0, want.0);
            assert_eq!(got.1, want.1);
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = random_matrix(37, 5, 4);
        let fit = kmeans(data.view(), &KMeansParams::new(1, 0)).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        for (a, b) in fit.centers.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Brute force over all 2-partitions of the four corners of a 2 x 1 rectangle.
    #[test]
    fn square_corners_split_into_nearest_pairs() {
        let pts = array![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0], [2.0, 1.0]];
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..7 {
            let mut groups = [vec![], vec![]];
            for i in 0..4 {
                groups[((mask >> i) & 1) as usize].push(i);
            }
            let mut cost = 0.0;
            let mut centers = vec![];
            for g in &groups {
                let cx = g.iter().map(|&i| pts[[i, 0]]).sum::<f64>() / g.len() as f64;
                let cy = g.iter().map(|&i| pts[[i, 1]]).sum::<f64>() / g.len() as f64;
                cost += g
                    .iter()
                    .map(|&i| (pts[[i, 0]] - cx).powi(2) + (pts[[i, 1]] - cy).powi(2))
                    .sum::<f64>();
                centers.push((cx, cy));
            }
            if cost < best.0 {
                best = (cost, centers);
            }
        }
        let mut want = best.1.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(want, vec![(0.0, 0.5), (2.0, 0.5)]);

        for seed in 0..10 {
            let fit = kmeans(pts.view(), &KMeansParams::new(2, seed)).unwrap();
            let mut got: Vec<(f64, f64)> = fit.centers.outer_iter().map(|c| (c[0], c[1])).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want, "seed {seed}");
            assert!((fit.inertia() - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reproducible_given_seed() {
        let data = random_matrix(200, 6, 5);
        let a = kmeans(data.view(), &KMeansParams::new(7, 11)).unwrap();
        let b = kmeans(data.view(), &KMeansParams::new(7, 11)).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn too_few_rows_is_config_error() {
        let data = random_matrix(3, 2, 0);
        assert!(matches!(
            kmeans(data.view(), &KMeansParams::new(4, 0)),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn inertia_never_increases(seed in 0u64..1000, k in 1usize..8) {
            let data = random_matrix(120, 4, seed);
            let fit = kmeans(data.view(), &KMeansParams { tol: 0.0, ..KMeansParams::new(k, seed) }).unwrap();
            for w in fit.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_history);
            }
        }

        #[test]
        fn converged_centers_are_cell_means(seed in 0u64..1000, k in 1usize..6) {
            let data = random_matrix(80, 3, seed);
            let fit = kmeans(data.view(), &KMeansParams { tol: 0.0, max_iters: 500, ..KMeansParams::new(k, seed) }).unwrap();
            prop_assert!(fit.converged);
            let (labels, _) = assign(data.view(), fit.centers.view());
            for j in 0..k {
                let members: Vec<usize> = (0..data.nrows()).filter(|&i| labels[i] == j).collect();
                prop_assert!(!members.is_empty());
                for d in 0..3 {
                    let mean = members.iter().map(|&i| data[[i, d]]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mean - fit.centers[[j, d]]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn nearest_center_agrees_with_scan(seed in 0u64..10_000) {
            let centers = random_matrix(64, 10, seed);
            let q = random_matrix(1, 10, seed + 1);
            let got = nearest_center(q.row(0), centers.view()).unwrap();
            let want = brute_force(q.row(0).as_slice().unwrap(), &centers);
            prop_assert_eq!(got.0, want.0);
        }
    }
}
