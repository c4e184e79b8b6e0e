//! Class-to-prompt assignment: cluster per-class CLS means with k-means
//! and map every class to its cluster's prompt.
//!
//! One assignment is shared by all guided layers and refreshed once per
//! epoch, warm-started from the previous centroids.

use crate::streams::{rng, Stream};
use rand::Rng;
use thiserror::Error;

pub const MAX_KMEANS_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("cannot form {k} clusters from {points} points")]
    TooManyClusters { k: usize, points: usize },
    #[error("k must be >= 1")]
    ZeroClusters,
    #[error("point vectors have inconsistent length: {len} not a multiple of dim {dim}")]
    DimMismatch { len: usize, dim: usize },
    #[error("warm-start centroids hold {got} values, expected {expected}")]
    WarmShape { expected: usize, got: usize },
}

/// Mean representation per class from per-sample rows. `rows` is
/// `[n, dim]` flat; every class in `0..num_classes` must appear.
pub fn collect_class_representations(
    rows: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>, MappingError> {
    assert!(dim > 0 && rows.len() == labels.len() * dim);
    let mut sums = vec![0.0; num_classes * dim];
    let mut counts = vec![0usize; num_classes];
    for (row, &class) in rows.chunks(dim).zip(labels) {
        assert!(class < num_classes, "label {class} out of range");
        counts[class] += 1;
        for (s, v) in sums[class * dim..(class + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(MappingError::EmptyClass { class });
        }
        for s in sums[class * dim..(class + 1) * dim].iter_mut() {
            *s /= count as f64;
        }
    }
    Ok(sums)
}

#[derive(Debug, Clone)]
pub enum KmeansInit {
    /// k-means++ seeding from the clustering stream of this seed.
    PlusPlus { seed: u64 },
    /// Start from given `[k, dim]` centroids.
    Warm { centroids: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Final `[k, dim]` centroids.
    pub centroids: Vec<f64>,
    /// Cluster index per input point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to assigned centroids, recorded after the
    /// initial assignment and after every iteration. Non-increasing.
    pub objective: Vec<f64>,
    /// Update-reassign iterations until the assignment stopped changing.
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn objective_of(points: &[f64], dim: usize, centroids: &[f64], assignment: &[usize]) -> f64 {
    points
        .chunks(dim)
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c * dim..(c + 1) * dim]))
        .sum()
}

/// Greedy k-means++: each round samples a handful of candidates by squared
/// distance and keeps the one that shrinks the total potential the most.
/// Ties keep the earliest candidate, so the result is a pure function of
/// (points, k, seed).
fn plus_plus_seed(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let mut r = rng(seed, Stream::Kmeans);
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = r.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All remaining mass is zero (duplicate points); any choice
            // yields the same clustering.
            let pick = r.gen_range(0..n);
            centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let mut t = r.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            let cand = &points[chosen * dim..(chosen + 1) * dim];
            let next_d2: Vec<f64> = points
                .chunks(dim)
                .zip(&d2)
                .map(|(p, &w)| w.min(sq_dist(p, cand)))
                .collect();
            let potential: f64 = next_d2.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, chosen, next_d2));
            }
        }
        let (_, chosen, next_d2) = best.expect("trials >= 2 always yields a candidate");
        centroids.extend_from_slice(&points[chosen * dim..(chosen + 1) * dim]);
        d2 = next_d2;
    }
    centroids
}

/// Lloyd's algorithm with squared-Euclidean distance on unnormalized
/// points, run to a fixed point or [`MAX_KMEANS_ITERS`]. Ties in the
/// nearest-centroid choice go to the lowest index. A cluster left empty
/// after reassignment seizes the point farthest from its own centroid
/// (donors keep at least one point), which keeps the objective
/// non-increasing.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    init: KmeansInit,
) -> Result<KmeansResult, MappingError> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(MappingError::DimMismatch { len: points.len(), dim });
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(MappingError::ZeroClusters);
    }
    if k > n {
        return Err(MappingError::TooManyClusters { k, points: n });
    }

    let mut centroids = match init {
        KmeansInit::PlusPlus { seed } => plus_plus_seed(points, dim, k, seed),
        KmeansInit::Warm { centroids } => {
            if centroids.len() != k * dim {
                return Err(MappingError::WarmShape { expected: k * dim, got: centroids.len() });
            }
            centroids
        }
    };

    let mut assignment: Vec<usize> =
        points.chunks(dim).map(|p| nearest(p, &centroids, dim)).collect();
    let mut objective = vec![objective_of(points, dim, &centroids, &assignment)];
    let mut iterations = 0;

    while iterations < MAX_KMEANS_ITERS {
        iterations += 1;

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k * dim];
        for (p, &c) in points.chunks(dim).zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                *dst = s / counts[c] as f64;
            }
        }
        let mut seized_any = false;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.chunks(dim).enumerate() {
                let owner = assignment[i];
                if counts[owner] < 2 {
                    continue;
                }
                let d = sq_dist(p, &centroids[owner * dim..(owner + 1) * dim]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            let seized = far.expect("k <= n guarantees a multi-member donor");
            counts[assignment[seized]] -= 1;
            assignment[seized] = c;
            counts[c] = 1;
            centroids[c * dim..(c + 1) * dim]
                .copy_from_slice(&points[seized * dim..(seized + 1) * dim]);
            seized_any = true;
        }

        let next: Vec<usize> = points.chunks(dim).map(|p| nearest(p, &centroids, dim)).collect();
        objective.push(objective_of(points, dim, &centroids, &next));
        // A seizure leaves donor centroids stale, so converge only on a
        // clean pass where the assignment reproduced itself.
        let converged = !seized_any && next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }

    Ok(KmeansResult { centroids, assignment, objective, iterations })
}

/// How a requested prompt bank splits into guided rows and padding. With
/// fewer than five classes every class gets its own guided prompt and the
/// remainder of the request pads the bank; otherwise the guided count is
/// capped by the class count and nothing pads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptBudget {
    pub guided: usize,
    pub padding: usize,
}

impl PromptBudget {
    pub fn total(self) -> usize {
        self.guided + self.padding
    }
}

pub fn pad_prompts(num_classes: usize, requested: usize) -> PromptBudget {
    if num_classes < 5 {
        PromptBudget { guided: num_classes, padding: requested.saturating_sub(num_classes) }
    } else {
        PromptBudget { guided: requested.min(num_classes), padding: 0 }
    }
}

/// A class-to-prompt assignment with the centroids that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssignment {
    /// Prompt index per class, values in `0..guided_prompts`.
    pub class_to_prompt: Vec<usize>,
    /// Final `[guided_prompts, dim]` centroids, kept for warm starts.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub guided_prompts: usize,
}

impl PromptAssignment {
    /// One `class<TAB>prompt` line per class, then the centroid block.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (class, &prompt) in self.class_to_prompt.iter().enumerate() {
            out.push_str(&format!("{class}\t{prompt}\n"));
        }
        out.push_str(&format!("# centroids {} x {}\n", self.guided_prompts, self.dim));
        for row in self.centroids.chunks(self.dim) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Cluster class representations into `guided_prompts` groups. Warm-starts
/// from `previous` centroids when given (the per-epoch refresh path);
/// otherwise seeds with k-means++ from `seed`.
pub fn update_mapping(
    class_reps: &[f64],
    dim: usize,
    guided_prompts: usize,
    previous: Option<&PromptAssignment>,
    seed: u64,
) -> Result<PromptAssignment, MappingError> {
    let init = match previous {
        Some(prev) => KmeansInit::Warm { centroids: prev.centroids.clone() },
        None => KmeansInit::PlusPlus { seed },
    };
    let result = kmeans(class_reps, dim, guided_prompts, init)?;
    Ok(PromptAssignment {
        class_to_prompt: result.assignment,
        centroids: result.centroids,
        dim,
        guided_prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_non_increasing(objective: &[f64]) {
        for w in objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    /// Points around centers `sep * e_c` (one axis per cluster, so every
    /// pair of centers is `sep * sqrt(2)` apart); returns (points, truth).
    /// Needs `dim >= k`.
    fn blobs(k: usize, per: usize, dim: usize, sep: f64, std: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
        use rand_distr::{Distribution, Normal};
        assert!(dim >= k);
        let mut r = rng(seed, Stream::Kmeans);
        let noise = Normal::new(0.0, std).unwrap();
        let mut points = Vec::with_capacity(k * per * dim);
        let mut truth = Vec::with_capacity(k * per);
        for c in 0..k {
            for _ in 0..per {
                for d in 0..dim {
                    let center = if d == c { sep } else { 0.0 };
                    points.push(center + noise.sample(&mut r));
                }
                truth.push(c);
            }
        }
        (points, truth)
    }

    fn partitions_match(a: &[usize], b: &[usize], k: usize) -> bool {
        let mut map = vec![usize::MAX; k];
        for (&x, &y) in a.iter().zip(b) {
            if map[x] == usize::MAX {
                map[x] = y;
            } else if map[x] != y {
                return false;
            }
        }
        let mut seen = vec![false; k];
        for &m in &map {
            if m != usize::MAX {
                if seen[m] {
                    return false;
                }
                seen[m] = true;
            }
        }
        true
    }

    #[test]
    fn recovers_well_separated_clusters_for_every_seed() {
        for (k, per, dim) in [(3, 10, 3), (4, 8, 4), (2, 20, 4), (5, 6, 6)] {
            for seed in 0..20u64 {
                let (points, truth) = blobs(k, per, dim, 10.0, 0.35, seed);
                let result =
                    kmeans(&points, dim, k, KmeansInit::PlusPlus { seed }).unwrap();
                assert!(
                    partitions_match(&result.assignment, &truth, k),
                    "k={k} seed={seed}: {:?}",
                    result.assignment
                );
                assert_non_increasing(&result.objective);
            }
        }
    }

    #[test]
    fn objective_never_increases_on_unstructured_data() {
        use rand::Rng as _;
        for seed in 0..10u64 {
            let mut r = rng(seed, Stream::Kmeans);
            let n = r.gen_range(6..30);
            let dim = r.gen_range(1..5);
            let k = r.gen_range(1..=n.min(6));
            let points: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            let result = kmeans(&points, dim, k, KmeansInit::PlusPlus { seed }).unwrap();
            assert_non_increasing(&result.objective);
            assert!(result.iterations <= MAX_KMEANS_ITERS);
            assert_eq!(result.assignment.len(), n);
        }
    }

    #[test]
    fn warm_start_from_a_fixed_point_converges_in_one_iteration() {
        let (points, _) = blobs(3, 10, 3, 10.0, 1.0, 4);
        let first = kmeans(&points, 3, 3, KmeansInit::PlusPlus { seed: 4 }).unwrap();
        let again =
            kmeans(&points, 3, 3, KmeansInit::Warm { centroids: first.centroids.clone() })
                .unwrap();
        assert_eq!(again.iterations, 1);
        assert_eq!(again.assignment, first.assignment);
        assert_eq!(again.centroids, first.centroids);
    }

    #[test]
    fn equidistant_points_pick_the_lowest_centroid() {
        // Point 1.0 ties between warm centroids 0.0 and 2.0.
        let points = [0.0, 1.0, 2.0];
        let result =
            kmeans(&points, 1, 2, KmeansInit::Warm { centroids: vec![0.0, 2.0] }).unwrap();
        assert_eq!(result.assignment, vec![0, 0, 1]);
    }

    #[test]
    fn an_empty_cluster_seizes_the_farthest_point() {
        // Warm centroids crowd near zero, so cluster 1 starts empty; it
        // must seize 90.0, the point farthest from its centroid.
        let points = [0.0, 40.0, 50.0, 90.0];
        let result = kmeans(
            &points,
            1,
            3,
            KmeansInit::Warm { centroids: vec![0.0, 0.01, 0.02] },
        )
        .unwrap();
        assert_eq!(result.assignment, vec![0, 2, 2, 1]);
        let mut centroids = result.centroids.clone();
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centroids, vec![0.0, 45.0, 90.0]);
        assert_non_increasing(&result.objective);
    }

    #[test]
    fn cluster_count_must_fit_the_points() {
        let points = [0.0, 1.0, 2.0];
        let err = kmeans(&points, 1, 4, KmeansInit::PlusPlus { seed: 0 }).unwrap_err();
        assert!(matches!(err, MappingError::TooManyClusters { k: 4, points: 3 }));
        let err = kmeans(&points, 1, 0, KmeansInit::PlusPlus { seed: 0 }).unwrap_err();
        assert!(matches!(err, MappingError::ZeroClusters));
        let err = kmeans(&points, 2, 1, KmeansInit::PlusPlus { seed: 0 }).unwrap_err();
        assert!(matches!(err, MappingError::DimMismatch { len: 3, dim: 2 }));
        let err = kmeans(&points, 1, 2, KmeansInit::Warm { centroids: vec![0.0] }).unwrap_err();
        assert!(matches!(err, MappingError::WarmShape { expected: 2, got: 1 }));
    }

    #[test]
    fn class_representations_are_per_class_means() {
        let rows = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let reps = collect_class_representations(&rows, 2, &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(reps, vec![(3.0 + 7.0) / 2.0, (4.0 + 8.0) / 2.0, 3.0, 4.0]);

        let err = collect_class_representations(&rows, 2, &[0, 0, 0, 2], 3).unwrap_err();
        assert!(matches!(err, MappingError::EmptyClass { class: 1 }));
    }

    #[test]
    fn prompt_budget_pads_only_below_five_classes() {
        assert_eq!(pad_prompts(3, 8), PromptBudget { guided: 3, padding: 5 });
        assert_eq!(pad_prompts(4, 2), PromptBudget { guided: 4, padding: 0 });
        assert_eq!(pad_prompts(2, 2), PromptBudget { guided: 2, padding: 0 });
        assert_eq!(pad_prompts(5, 8), PromptBudget { guided: 5, padding: 0 });
        assert_eq!(pad_prompts(8, 8), PromptBudget { guided: 8, padding: 0 });
        assert_eq!(pad_prompts(20, 8), PromptBudget { guided: 8, padding: 0 });
        assert_eq!(pad_prompts(3, 8).total(), 8);
    }

    #[test]
    fn update_mapping_warm_starts_from_the_previous_assignment() {
        let (reps, _) = blobs(4, 1, 4, 10.0, 0.0, 0);
        let first = update_mapping(&reps, 4, 4, None, 9).unwrap();
        assert_eq!(first.class_to_prompt.len(), 4);
        assert!(first.class_to_prompt.iter().all(|&p| p < 4));

        let second = update_mapping(&reps, 4, 4, Some(&first), 12345).unwrap();
        assert_eq!(second.class_to_prompt, first.class_to_prompt);
        assert_eq!(second.centroids, first.centroids);

        let err = update_mapping(&reps, 4, 5, None, 0).unwrap_err();
        assert!(matches!(err, MappingError::TooManyClusters { k: 5, points: 4 }));
    }

    #[test]
    fn dump_lists_classes_then_centroids() {
        let assignment = PromptAssignment {
            class_to_prompt: vec![1, 0, 1],
            centroids: vec![0.5, -1.0, 2.25, 0.0],
            dim: 2,
            guided_prompts: 2,
        };
        assert_eq!(
            assignment.dump(),
            "0\t1\n1\t0\n2\t1\n# centroids 2 x 2\n0.5 -1\n2.25 0\n"
        );
    }
}
