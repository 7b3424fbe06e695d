//! Central finite-difference checks for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, ParamSet};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Maximum tolerated relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// A seeded random subset of at most `count` scalars.
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences over the parameters.
pub fn check_params<F>(params: &ParamSet, coverage: Coverage, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let root = build(&mut g)?;
        g.backward(root)?.into_params()
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(ps);
        let root = build(&mut g)?;
        Ok(g.value(root).get(0, 0))
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |j| (id.index(), j)))
        .collect();
    let chosen: Vec<usize> = match coverage {
        Coverage::All => (0..coords.len()).collect(),
        Coverage::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, coords.len(), count.min(coords.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let ids: Vec<_> = params.ids().collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for k in chosen {
        let (pi, j) = coords[k];
        let id = ids[pi];
        let x0 = params.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = x0 + FD_STEP;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[j] = x0 - FD_STEP;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic.get(id).data()[j], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_owned(), j));
        }
    }
    Ok(report)
}
