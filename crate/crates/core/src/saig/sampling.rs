use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AllocationMatrix;
use crate::error::{Error, Result};

/// Slack when comparing the cumulative nucleus mass against `p`, so that
/// round-off in the renormalized masses cannot push the cut one step further.
pub const NUCLEUS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub box_index: usize,
    pub phrase_index: usize,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub assignments: Vec<Assignment>,
    /// Log-probability of the draws under the truncated distributions.
    pub sample_logprob: f64,
}

/// Draws up to `max_pairs` box/phrase assignments from the flattened joint.
///
/// Each draw keeps the smallest descending-probability prefix of the remaining
/// candidates whose mass reaches `p`, renormalizes it and samples one cell;
/// every candidate on the drawn box is then removed. Phrases may repeat.
pub fn sample_layout(
    alloc: &AllocationMatrix,
    phrases: &[String],
    p: f64,
    max_pairs: usize,
    seed: u64,
) -> Result<Layout> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("nucleus mass {p} outside (0, 1]")));
    }
    if max_pairs == 0 {
        return Err(Error::InvalidArgument("max_pairs must be at least 1".into()));
    }
    if phrases.len() != alloc.phrases() {
        return Err(Error::DimensionMismatch {
            expected: alloc.phrases(),
            got: phrases.len(),
            context: "layout phrases",
        });
    }
    let m = alloc.phrases();
    let mut candidates: Vec<(usize, f64)> = alloc
        .joint
        .data()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, w)| w > 0.0)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout { assignments: Vec::new(), sample_logprob: 0.0 };
    while layout.assignments.len() < max_pairs && !candidates.is_empty() {
        let total: f64 = candidates.iter().map(|c| c.1).sum();
        let mut cum = 0.0;
        let mut cut = candidates.len();
        for (i, c) in candidates.iter().enumerate() {
            cum += c.1 / total;
            if cum >= p - NUCLEUS_TOLERANCE {
                cut = i + 1;
                break;
            }
        }
        let nucleus = &candidates[..cut];
        let mass: f64 = nucleus.iter().map(|c| c.1).sum();
        let u = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = cut - 1;
        for (i, c) in nucleus.iter().enumerate() {
            acc += c.1;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (cell, w) = nucleus[pick];
        layout.sample_logprob += (w / mass).ln();
        let (n, j) = (cell / m, cell % m);
        layout.assignments.push(Assignment {
            box_index: n,
            phrase_index: j,
            phrase: phrases[j].clone(),
        });
        candidates.retain(|c| c.0 / m != n);
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::Tensor2D;
    use proptest::prelude::*;

    fn column(masses: &[f64]) -> AllocationMatrix {
        AllocationMatrix::new(Tensor2D::filled(masses.len(), 1, 1.0), masses.to_vec()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn concentrated_joint_is_deterministic() {
        let probs = Tensor2D::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let alloc = AllocationMatrix::new(probs, vec![1.0, 0.0]).unwrap();
        for seed in 0..50 {
            let l = sample_layout(&alloc, &names(2), 0.9, 3, seed).unwrap();
            assert_eq!(l.assignments.len(), 1);
            assert_eq!((l.assignments[0].box_index, l.assignments[0].phrase_index), (0, 1));
            assert_eq!(l.sample_logprob, 0.0);
        }
    }

    #[test]
    fn zero_joint_gives_empty_layout() {
        let l = sample_layout(&column(&[0.0, 0.0]), &names(1), 0.9, 3, 0).unwrap();
        assert!(l.assignments.is_empty());
    }

    #[test]
    fn truncation_frequencies() {
        let alloc = column(&[0.5, 0.3, 0.2]);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for seed in 0..draws {
            let l = sample_layout(&alloc, &names(1), 0.7, 1, seed).unwrap();
            counts[l.assignments[0].box_index] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!((counts[0] as f64 / draws as f64 - 0.625).abs() < 0.01);
        assert!((counts[1] as f64 / draws as f64 - 0.375).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_arguments() {
        let alloc = column(&[1.0]);
        assert!(sample_layout(&alloc, &names(1), 0.0, 1, 0).is_err());
        assert!(sample_layout(&alloc, &names(1), 1.1, 1, 0).is_err());
        assert!(sample_layout(&alloc, &names(1), 0.5, 0, 0).is_err());
        assert!(sample_layout(&alloc, &names(2), 0.5, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn boxes_are_never_reused(
            raw in prop::collection::vec(0.0f64..1.0, 12),
            priors in prop::collection::vec(0.0f64..=1.0, 4),
            p in 0.05f64..=1.0,
            max_pairs in 1usize..6,
            seed in any::<u64>(),
        ) {
            let probs = Tensor2D::new(4, 3, raw).unwrap();
            let alloc = AllocationMatrix::new(probs, priors).unwrap();
            let l = sample_layout(&alloc, &names(3), p, max_pairs, seed).unwrap();
            prop_assert!(l.assignments.len() <= max_pairs.min(4));
            let mut seen = std::collections::HashSet::new();
            for a in &l.assignments {
                prop_assert!(seen.insert(a.box_index));
                prop_assert!(alloc.joint.get(a.box_index, a.phrase_index) > 0.0);
            }
            prop_assert_eq!(&l, &sample_layout(&alloc, &names(3), p, max_pairs, seed).unwrap());
        }
    }
}
