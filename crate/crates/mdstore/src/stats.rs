//! Segment overlap statistics: the quality metric for segmentation schemes.

use uuid::Uuid;

use crate::geom::Hyperrectangle;

/// Per-segment overlap counts with mean and population standard deviation.
#[derive(Debug, Clone)]
pub struct OverlapReport {
    /// For each segment, how many other segments' hyperrectangles intersect
    /// it (closed intervals, all dimensions).
    pub per_segment: Vec<(Uuid, u64)>,
    pub mean: f64,
    pub stddev: f64,
}

impl OverlapReport {
    pub fn segment_count(&self) -> usize {
        self.per_segment.len()
    }
}

/// Count pairwise bounding-box intersections over all indexing dimensions.
/// O(n^2); segment counts at operator scale keep this cheap.
pub fn overlap_stats(rects: &[(Uuid, Hyperrectangle)]) -> OverlapReport {
    let n = rects.len();
    let mut counts = vec![0u64; n];
    for i in 0..n {
        for j in i + 1..n {
            if rects[i].1.intersects(&rects[j].1) {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    let mean = if n == 0 {
        0.0
    } else {
        counts.iter().sum::<u64>() as f64 / n as f64
    };
    let var = if n == 0 {
        0.0
    } else {
        counts
            .iter()
            .map(|&c| {
                let d = c as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64
    };
    OverlapReport {
        per_segment: rects.iter().map(|(u, _)| *u).zip(counts).collect(),
        mean,
        stddev: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::DimValue;

    fn rect(lo: [i64; 2], hi: [i64; 2]) -> Hyperrectangle {
        Hyperrectangle::from_bounds(
            lo.iter().map(|&v| DimValue::Int64(v)).collect(),
            hi.iter().map(|&v| DimValue::Int64(v)).collect(),
        )
    }

    #[test]
    fn disjoint_and_identical() {
        let a = (Uuid::new_v4(), rect([0, 0], [1, 1]));
        let b = (Uuid::new_v4(), rect([5, 5], [6, 6]));
        let rep = overlap_stats(&[a.clone(), b.clone()]);
        assert_eq!(rep.per_segment[0].1, 0);
        assert_eq!(rep.per_segment[1].1, 0);
        assert_eq!(rep.mean, 0.0);

        let c = (Uuid::new_v4(), rect([0, 0], [1, 1]));
        let rep = overlap_stats(&[a, c]);
        assert_eq!(rep.per_segment[0].1, 1);
        assert_eq!(rep.per_segment[1].1, 1);
        assert_eq!(rep.mean, 1.0);
        assert_eq!(rep.stddev, 0.0);
    }

    #[test]
    fn counts_match_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let rects: Vec<(Uuid, Hyperrectangle)> = (0..60)
            .map(|_| {
                let lx = rng.random_range(-50..50);
                let ly = rng.random_range(-50..50);
                (
                    Uuid::new_v4(),
                    rect(
                        [lx, ly],
                        [lx + rng.random_range(0..30), ly + rng.random_range(0..30)],
                    ),
                )
            })
            .collect();
        let rep = overlap_stats(&rects);
        // Symmetry oracle: A counts B iff B counts A; recompute per pair.
        for (i, (_, ri)) in rects.iter().enumerate() {
            let expect = rects
                .iter()
                .enumerate()
                .filter(|(j, (_, rj))| i != *j && ri.intersects(rj))
                .count() as u64;
            assert_eq!(rep.per_segment[i].1, expect);
        }
        // Mean and stddev recomputable from the counts.
        let mean =
            rep.per_segment.iter().map(|(_, c)| *c as f64).sum::<f64>() / rects.len() as f64;
        assert!((rep.mean - mean).abs() < 1e-12);
    }
}
