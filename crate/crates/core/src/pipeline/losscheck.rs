use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::BBox;
use crate::lart::{lart_loss, Adjacent, Anchor, LartBatch, LartConfig, LartOutput, TextQueue};
use crate::saig::{LabeledScene, SaigConfig, SaigModel, SceneInput};
use crate::tinynn::gradcheck::{central_difference, check_params, relative_error, Coverage, GradCheckReport, FD_STEP};
use crate::tinynn::TransformerConfig;

/// Worst-case finite-difference agreement of the two trained losses.
#[derive(Debug, Clone, Serialize)]
pub struct LossCheckReport {
    pub instances: usize,
    /// Scalars compared.
    pub lart_checked: usize,
    pub lart_max_rel_error: f64,
    pub saig_checked: usize,
    pub saig_max_rel_error: f64,
}

impl LossCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.lart_max_rel_error.max(self.saig_max_rel_error)
    }

    pub fn passed(&self) -> bool {
        GradCheckReport { checked: 0, max_rel_error: self.max_rel_error(), worst: None }.passed()
    }
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn lart_instance(rng: &mut impl Rng) -> Result<(usize, f64)> {
    let d = rng.random_range(3..8);
    let anchors = rng.random_range(1..4);
    let batch = LartBatch {
        anchors: (0..anchors)
            .map(|i| Anchor {
                region: unit(rng, d).into_iter().map(|v| v * rng.random_range(0.5..2.0)).collect(),
                text: format!("text {i}"),
                text_embedding: unit(rng, d),
                adjacents: (0..rng.random_range(0..4))
                    .map(|_| Adjacent { region: unit(rng, d), iou: rng.random_range(0.0..1.0) })
                    .collect(),
            })
            .collect(),
    };
    let mut queue = TextQueue::new(8)?;
    for i in 0..rng.random_range(0..6) {
        queue.push(format!("queued {i}"), unit(rng, d))?;
    }
    let cfg = LartConfig { tau: rng.random_range(1.0..10.0), ..LartConfig::default() };

    let flat: Vec<f64> = batch
        .anchors
        .iter()
        .flat_map(|a| a.region.iter().chain(a.adjacents.iter().flat_map(|r| r.region.iter())).copied())
        .collect();
    let rebuild = |x: &[f64]| {
        let mut b = batch.clone();
        let mut it = x.iter().copied();
        for a in &mut b.anchors {
            a.region.iter_mut().for_each(|v| *v = it.next().expect("sized"));
            for r in &mut a.adjacents {
                r.region.iter_mut().for_each(|v| *v = it.next().expect("sized"));
            }
        }
        b
    };
    let flat_grads = |o: &LartOutput| -> Vec<f64> {
        o.anchor_grads
            .iter()
            .zip(&o.adjacent_grads)
            .flat_map(|(a, adj)| a.iter().chain(adj.iter().flatten()).copied())
            .collect()
    };
    let analytic = flat_grads(&lart_loss(&batch, &queue, &cfg)?);
    let numeric = central_difference(
        |x| lart_loss(&rebuild(x), &queue, &cfg).map(|o| o.loss).unwrap_or(f64::NAN),
        &flat,
        FD_STEP,
    );
    let worst = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
    Ok((analytic.len(), worst))
}

fn saig_instance(rng: &mut impl Rng) -> Result<GradCheckReport> {
    let d = 8;
    let mut model = SaigModel::new(SaigConfig {
        transformer: TransformerConfig { layers: 1, heads: 2, dim: d, mlp_ratio: 2, ln_eps: 1e-5 },
        frequencies: 2,
        seed: rng.random(),
    })?;
    // Move weights off the small init so every path carries gradient.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (m, n) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut boxes = Vec::with_capacity(n);
    while boxes.len() < n {
        let b = BBox::new(
            rng.random_range(0.0..0.6),
            rng.random_range(0.0..0.6),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        )?;
        boxes.push(b);
    }
    let scene = LabeledScene {
        input: SceneInput {
            caption: unit(rng, d),
            canvas: unit(rng, d),
            phrases: (0..m).map(|_| unit(rng, d)).collect(),
            boxes,
        },
        gold: (0..n).map(|_| rng.random_range(0..m)).collect(),
    };
    let batch = [scene];
    check_params(&model.params, Coverage::All, |g| model.loss_graph(g, &batch))
}

/// Checks analytic gradients of the LART loss and the guider loss against
/// central differences on `instances` random small problems each.
pub fn loss_check(instances: usize, seed: u64) -> Result<LossCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LossCheckReport {
        instances,
        lart_checked: 0,
        lart_max_rel_error: 0.0,
        saig_checked: 0,
        saig_max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let (checked, worst) = lart_instance(&mut rng)?;
        report.lart_checked += checked;
        report.lart_max_rel_error = report.lart_max_rel_error.max(worst);
        let s = saig_instance(&mut rng)?;
        report.saig_checked += s.checked;
        report.saig_max_rel_error = report.saig_max_rel_error.max(s.max_rel_error);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = loss_check(3, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.lart_checked > 0 && r.saig_checked > 0);
    }
}
