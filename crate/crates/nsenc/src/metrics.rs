//! Cluster assignment from programs and external clustering metrics
//! (purity, NMI, Rand index), plus a deterministic k-means for baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::dsl::{evaluate_logit, Architecture, DslError, ParameterStore};
use crate::nets::StandinSet;
use crate::num::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("need at least two items, got {0}")]
    TooFew(usize),
    #[error("length mismatch: {0} cluster ids vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("k = {k} exceeds the number of points {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error(transparent)]
    Dsl(#[from] DslError),
}

/// Per-item cluster ids in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub ids: Vec<usize>,
    pub k: usize,
}

impl Clustering {
    pub fn new(ids: Vec<usize>, k: usize) -> Self {
        debug_assert!(ids.iter().all(|&c| c < k));
        Clustering { ids, k }
    }
}

/// External metrics plus the contingency table (clusters x labels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub purity: f64,
    pub nmi: f64,
    pub ri: f64,
    pub n: usize,
    pub k_clusters: usize,
    pub contingency: Vec<Vec<usize>>,
}

/// Cluster id from k binary programs: `sum_i bit_i * 2^i`, bit order =
/// program learning order.
pub fn assign_clusters<F: Real>(
    programs: &[(Architecture, ParameterStore<F>)],
    dataset: &Dataset<F>,
    ite_temperature: F,
) -> Result<Clustering, MetricsError> {
    let empty = StandinSet::empty();
    let mut ids = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let mut id = 0usize;
        for (i, (arch, params)) in programs.iter().enumerate() {
            let logit = evaluate_logit(arch, params, &empty, item, &dataset.schema, ite_temperature)?;
            if logit > F::zero() {
                id += 1 << i;
            }
        }
        ids.push(id);
    }
    Ok(Clustering::new(ids, 1 << programs.len()))
}

fn contingency(clustering: &Clustering, labels: &[u32]) -> (Vec<Vec<usize>>, usize) {
    let n_labels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut table = vec![vec![0usize; n_labels]; clustering.k];
    for (&c, &l) in clustering.ids.iter().zip(labels) {
        table[c][l as usize] += 1;
    }
    (table, n_labels)
}

fn checked(clustering: &Clustering, labels: &[u32]) -> Result<(), MetricsError> {
    if clustering.ids.is_empty() || labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if clustering.ids.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(
            clustering.ids.len(),
            labels.len(),
        ));
    }
    Ok(())
}

/// Fraction of items in the majority label of their cluster.
pub fn purity(clustering: &Clustering, labels: &[u32]) -> Result<f64, MetricsError> {
    checked(clustering, labels)?;
    let (table, _) = contingency(clustering, labels);
    let correct: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(correct as f64 / labels.len() as f64)
}

/// Normalized mutual information:
/// `sum |u∩v| ln(n|u∩v| / (|u||v|)) / sqrt(sum |u| ln(|u|/n) * sum |v| ln(|v|/n))`,
/// 0 when either partition has a single block.
pub fn nmi(clustering: &Clustering, labels: &[u32]) -> Result<f64, MetricsError> {
    checked(clustering, labels)?;
    let n = labels.len() as f64;
    let (table, n_labels) = contingency(clustering, labels);
    let cluster_sizes: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();
    let mut label_sizes = vec![0usize; n_labels];
    for row in &table {
        for (s, &c) in label_sizes.iter_mut().zip(row) {
            *s += c;
        }
    }

    let mut numer = 0.0;
    for (ci, row) in table.iter().enumerate() {
        for (li, &joint) in row.iter().enumerate() {
            if joint == 0 {
                continue;
            }
            let joint = joint as f64;
            numer += joint
                * (n * joint / (cluster_sizes[ci] as f64 * label_sizes[li] as f64)).ln();
        }
    }
    let h = |sizes: &[usize]| -> f64 {
        sizes
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let s = s as f64;
                s * (s / n).ln()
            })
            .sum::<f64>()
    };
    let (hc, hl) = (h(&cluster_sizes), h(&label_sizes));
    // A single-block partition has zero entropy; call the ratio 0 there.
    if hc == 0.0 || hl == 0.0 {
        return Ok(0.0);
    }
    Ok(numer / (hc * hl).sqrt())
}

/// Rand index: agreeing pairs over all pairs.
pub fn rand_index(clustering: &Clustering, labels: &[u32]) -> Result<f64, MetricsError> {
    checked(clustering, labels)?;
    let n = labels.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_cluster = clustering.ids[i] == clustering.ids[j];
            let same_label = labels[i] == labels[j];
            if same_cluster == same_label {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

pub fn report(clustering: &Clustering, labels: &[u32]) -> Result<MetricsReport, MetricsError> {
    let (table, _) = contingency(clustering, labels);
    Ok(MetricsReport {
        purity: purity(clustering, labels)?,
        nmi: nmi(clustering, labels)?,
        ri: rand_index(clustering, labels)?,
        n: labels.len(),
        k_clusters: clustering.k,
        contingency: table,
    })
}

/// Uniform random cluster ids; the paper-style chance baseline.
pub fn random_assignment(n: usize, k: usize, seed: u64) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Clustering::new((0..n).map(|_| rng.random_range(0..k)).collect(), k)
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed;
/// empty clusters are reseeded to the point farthest from its centroid.
pub fn kmeans<F: Real>(
    points: &[Vec<F>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Clustering, MetricsError> {
    let n = points.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if k > n {
        return Err(MetricsError::TooManyClusters { k, n });
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[F], b: &[F]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum()
    };

    // k-means++ seeding.
    let mut centroids: Vec<Vec<F>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = f64::uniform_01(&mut rng) * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centroids.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist2(p, centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![F::zero(); dim]; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(p) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[assign[a]])
                            .partial_cmp(&dist2(&points[b], &centroids[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            } else {
                let inv = F::one() / F::of(counts[c] as f64);
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = *s * inv;
                }
            }
        }
    }
    Ok(Clustering::new(assign, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn clustering(ids: &[usize]) -> Clustering {
        let k = ids.iter().max().map_or(1, |m| m + 1);
        Clustering::new(ids.to_vec(), k)
    }

    // Brute-force oracles computed straight from set definitions.
    fn purity_oracle(ids: &[usize], labels: &[u32]) -> f64 {
        let clusters: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
        let mut correct = 0usize;
        for c in clusters {
            let mut by_label: HashMap<u32, usize> = HashMap::new();
            for (i, &l) in labels.iter().enumerate() {
                if ids[i] == c {
                    *by_label.entry(l).or_insert(0) += 1;
                }
            }
            correct += by_label.values().copied().max().unwrap_or(0);
        }
        correct as f64 / labels.len() as f64
    }

    fn nmi_oracle(ids: &[usize], labels: &[u32]) -> f64 {
        let n = labels.len() as f64;
        let us: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
        let vs: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
        let size_u = |u: u32| labels.iter().filter(|&&l| l == u).count() as f64;
        let size_v = |v: usize| ids.iter().filter(|&&c| c == v).count() as f64;
        let mut numer = 0.0;
        for &u in &us {
            for &v in &vs {
                let joint = labels
                    .iter()
                    .zip(ids)
                    .filter(|(&l, &c)| l == u && c == v)
                    .count() as f64;
                if joint > 0.0 {
                    numer += joint * ((n * joint) / (size_u(u) * size_v(v))).ln();
                }
            }
        }
        let hu: f64 = us.iter().map(|&u| size_u(u) * (size_u(u) / n).ln()).sum();
        let hv: f64 = vs.iter().map(|&v| size_v(v) * (size_v(v) / n).ln()).sum();
        if hu == 0.0 || hv == 0.0 {
            return 0.0;
        }
        numer / (hu * hv).sqrt()
    }

    fn ri_oracle(ids: &[usize], labels: &[u32]) -> f64 {
        let n = labels.len();
        let (mut tp, mut tn) = (0usize, 0usize);
        for i in 0..n {
            for j in (i + 1)..n {
                match (ids[i] == ids[j], labels[i] == labels[j]) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    _ => {}
                }
            }
        }
        (tp + tn) as f64 / (n * (n - 1) / 2) as f64
    }

    #[test]
    fn purity_spot_values() {
        let labels = [0u32, 0, 1, 1, 1, 2];
        let ids = [0usize, 0, 0, 1, 1, 1];
        let p = purity(&clustering(&ids), &labels).unwrap();
        assert!((p - 4.0 / 6.0).abs() < 1e-12);

        let perfect = purity(&clustering(&[0, 0, 1, 1, 2, 2]), &[5, 5, 7, 7, 9, 9]).unwrap();
        assert_eq!(perfect, 1.0);

        // A single cluster scores the majority-class fraction.
        let single = purity(&Clustering::new(vec![0; 6], 1), &labels).unwrap();
        assert!((single - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_spot_values() {
        let ids = [0usize, 0, 1, 1];
        let labels = [3u32, 3, 8, 8];
        assert!((nmi(&clustering(&ids), &labels).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&Clustering::new(vec![0; 4], 1), &labels).unwrap(), 0.0);
    }

    #[test]
    fn rand_index_spot_values() {
        let labels = [0u32, 0, 1, 1];
        let ids = [0usize, 1, 0, 1];
        let ri = rand_index(&clustering(&ids), &labels).unwrap();
        assert!((ri - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(
            rand_index(&clustering(&[0, 0, 1, 1]), &labels).unwrap(),
            1.0
        );
        assert!(matches!(
            rand_index(&clustering(&[0]), &[1u32]),
            Err(MetricsError::TooFew(1))
        ));
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let kc = rng.random_range(1..=4);
            let kl = rng.random_range(1..=4);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..kc)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..kl as u32)).collect();
            let c = Clustering::new(ids.clone(), kc);
            assert!((purity(&c, &labels).unwrap() - purity_oracle(&ids, &labels)).abs() < 1e-9);
            assert!((nmi(&c, &labels).unwrap() - nmi_oracle(&ids, &labels)).abs() < 1e-9);
            assert!(
                (rand_index(&c, &labels).unwrap() - ri_oracle(&ids, &labels)).abs() < 1e-9
            );
        }
    }

    #[test]
    fn metrics_are_invariant_under_cluster_relabeling() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(4..=12);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let permuted: Vec<usize> = ids.iter().map(|&c| [2, 0, 1][c]).collect();
            let a = Clustering::new(ids, 3);
            let b = Clustering::new(permuted, 3);
            assert!((purity(&a, &labels).unwrap() - purity(&b, &labels).unwrap()).abs() < 1e-12);
            assert!((nmi(&a, &labels).unwrap() - nmi(&b, &labels).unwrap()).abs() < 1e-12);
            assert!(
                (rand_index(&a, &labels).unwrap() - rand_index(&b, &labels).unwrap()).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn purity_never_decreases_under_refinement() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.random_range(4..=12);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            // Split cluster 0 into two arbitrary halves.
            let refined: Vec<usize> = ids
                .iter()
                .enumerate()
                .map(|(i, &c)| if c == 0 && i % 2 == 0 { 3 } else { c })
                .collect();
            let before = purity(&Clustering::new(ids, 3), &labels).unwrap();
            let after = purity(&Clustering::new(refined, 4), &labels).unwrap();
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..30 {
            points.push(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            truth.push(0u32);
        }
        for _ in 0..30 {
            points.push(vec![
                10.0 + rng.random_range(-0.5..0.5),
                10.0 + rng.random_range(-0.5..0.5),
            ]);
            truth.push(1u32);
        }
        let c = kmeans(&points, 2, 3, 100).unwrap();
        // Nearest-centroid oracle: the gap dwarfs the spread, so purity 1.
        assert_eq!(purity(&c, &truth).unwrap(), 1.0);
    }

    #[test]
    fn kmeans_with_k_equals_n_isolates_every_point() {
        let points: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 2.0, 0.0]).collect();
        let c = kmeans(&points, 6, 1, 50).unwrap();
        let unique: std::collections::BTreeSet<usize> = c.ids.iter().copied().collect();
        assert_eq!(unique.len(), 6);
        assert!(matches!(
            kmeans(&points, 7, 1, 50),
            Err(MetricsError::TooManyClusters { .. })
        ));
    }

    #[test]
    fn kmeans_inertia_is_nonincreasing_over_lloyd_iterations() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let inertia = |iters: usize| -> f64 {
            let c = kmeans(&points, 4, 2, iters).unwrap();
            // Recompute centroids from the assignment and sum squared dists.
            let mut sums = vec![vec![0.0f64; 2]; 4];
            let mut counts = vec![0usize; 4];
            for (p, &a) in points.iter().zip(&c.ids) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            points
                .iter()
                .zip(&c.ids)
                .map(|(p, &a)| {
                    p.iter()
                        .zip(&sums[a])
                        .map(|(v, s)| {
                            let m = s / counts[a].max(1) as f64;
                            (v - m) * (v - m)
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let mut last = f64::INFINITY;
        for iters in [1, 2, 4, 8, 32] {
            let v = inertia(iters);
            assert!(v <= last + 1e-9, "inertia went up: {last} -> {v}");
            last = v;
        }
    }

    #[test]
    fn cluster_ids_follow_bit_convention() {
        use crate::dsl::{Node, NodeKind};
        // Two constant programs: program 0 fires (bit0 = 1), program 1 does
        // not; cluster id must be 1.
        let make = |cut: f64| {
            let arch = Architecture::new(Node::new(
                NodeKind::Threshold,
                vec![Node::new(
                    NodeKind::MapAverage,
                    vec![Node::leaf(NodeKind::AffineLib { channels: vec![0] })],
                )],
            ));
            let mut params = ParameterStore::<f64>::default();
            params.set(0, vec![cut]);
            params.set(2, vec![0.0, 0.0]);
            (arch, params)
        };
        let schema = crate::dsl::FeatureSchema::new(vec!["x".into()], 2).unwrap();
        let ds = Dataset {
            schema,
            raw_dim: 1,
            items: vec![crate::data::Trajectory {
                features: vec![0.3, 0.4],
                label: Some(0),
                meta: None,
            }],
        };
        let programs = vec![make(-1.0), make(1.0)]; // logits +1 and -1
        let c = assign_clusters(&programs, &ds, 4.0).unwrap();
        assert_eq!(c.ids, vec![1]);
        assert_eq!(c.k, 4);
        // Stable under re-evaluation.
        assert_eq!(assign_clusters(&programs, &ds, 4.0).unwrap().ids, c.ids);
        // One program yields two clusters.
        let c1 = assign_clusters(&programs[..1], &ds, 4.0).unwrap();
        assert_eq!(c1.k, 2);
    }

    #[test]
    fn random_assignment_is_roughly_uniform() {
        let c = random_assignment(4000, 4, 9);
        let mut counts = [0usize; 4];
        for &id in &c.ids {
            counts[id] += 1;
        }
        for count in counts {
            assert!((count as f64 / 4000.0 - 0.25).abs() < 0.05);
        }
        assert_eq!(random_assignment(4000, 4, 9).ids, c.ids);
    }
}
