use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, ParamId, ParamSet};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Weight init: normal(0, 0.02) truncated at two standard deviations.
pub const INIT_STD: f64 = 0.02;

pub fn trunc_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor2D {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor2D::new(rows, cols, data).expect("finite init")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    /// Full-scale guider depth; token width follows a ViT-L/14 text tower.
    pub fn full_scale() -> Self {
        Self {
            layers: 32,
            heads: 12,
            dim: 768,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be ≥ 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `y = x·W + b`, with `W` stored `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ps.add(format!("{name}.weight"), trunc_normal(rng, fan_in, fan_out, INIT_STD)),
            bias: ps.add(format!("{name}.bias"), Tensor2D::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor2D::filled(1, dim, 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor2D::zeros(1, dim)),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// One pre-norm encoder layer:
/// `x + Attn(LN(x))`, then `x + MLP(LN(x))` with a SiLU hidden activation.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Outputs of a layer forward, including per-head attention weights.
pub struct LayerTrace {
    pub output: NodeId,
    pub attention: Vec<NodeId>,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamSet, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d, cfg.ln_eps),
            qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), d, d, rng),
            ln_mlp: LayerNorm::new(ps, &format!("{name}.ln_mlp"), d, cfg.ln_eps),
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d, rng),
            heads: cfg.heads,
            dim: d,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(g, x)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph<'_>, x: NodeId) -> Result<LayerTrace> {
        let cols = g.value(x).cols();
        if cols != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: cols,
                context: "encoder layer input",
            });
        }
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let h = self.ln_attn.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.cols(qkv, head * hd, hd)?;
            let k = g.cols(qkv, self.dim + head * hd, hd)?;
            let v = g.cols(qkv, 2 * self.dim + head * hd, hd)?;
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            attention.push(weights);
            outs.push(g.matmul(weights, v)?);
        }
        let merged = g.concat_cols(&outs)?;
        let attn_out = self.proj.forward(g, merged)?;
        let x = g.add(x, attn_out)?;

        let h = self.ln_mlp.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, h)?;
        let output = g.add(x, h)?;
        Ok(LayerTrace { output, attention })
    }

    /// Runs the layer on a token matrix outside of any training graph.
    pub fn apply(&self, params: &ParamSet, tokens: &Tensor2D) -> Result<Tensor2D> {
        let mut g = Graph::new(params);
        let x = g.input(tokens.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// A stack of encoder layers followed by a final LayerNorm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub config: TransformerConfig,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(ps, &format!("{name}.final_norm"), cfg.dim, cfg.ln_eps),
            config: *cfg,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        self.final_norm.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::tensor::{silu, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            heads: 2,
            dim: 4,
            mlp_ratio: 2,
            ln_eps: 1e-5,
        }
    }

    fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            for v in ps.get_mut(id).data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig { dim: 10, heads: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TransformerConfig { layers: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TransformerConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let layer = EncoderLayer::new(&mut ps, "l", &small_cfg(), &mut rng);
        randomize(&mut ps, &mut rng);
        for id in [layer.proj.weight, layer.proj.bias, layer.fc2.weight, layer.fc2.bias] {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor2D::new(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        assert_eq!(layer.apply(&ps, &x).unwrap(), x);
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let layer = EncoderLayer::new(&mut ps, "l", &small_cfg(), &mut rng);
        randomize(&mut ps, &mut rng);
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor2D::row_vector(&[0.3, -0.1, 0.7, 0.2]));
        let trace = layer.forward_traced(&mut g, x).unwrap();
        for a in trace.attention {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let layer = EncoderLayer::new(&mut ps, "l", &small_cfg(), &mut rng);
        randomize(&mut ps, &mut rng);
        let mut g = Graph::new(&ps);
        let x = g.input(trunc_normal(&mut rng, 5, 4, 1.0));
        let trace = layer.forward_traced(&mut g, x).unwrap();
        for a in trace.attention {
            for r in 0..5 {
                assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let layer = EncoderLayer::new(&mut ps, "l", &small_cfg(), &mut rng);
        assert!(matches!(
            layer.apply(&ps, &Tensor2D::zeros(2, 5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Straight-line evaluation of one pre-norm layer with plain loops.
    fn reference_layer(x: &[Vec<f64>], p: &ParamSet, layer: &EncoderLayer) -> Vec<Vec<f64>> {
        let get = |id: ParamId| p.get(id).clone();
        let ln = |row: &[f64], n: &LayerNorm| -> Vec<f64> {
            let (gm, bt) = (get(n.gamma), get(n.beta));
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / row.len() as f64;
            row.iter()
                .enumerate()
                .map(|(j, a)| (a - m) / (v + n.eps).sqrt() * gm.data()[j] + bt.data()[j])
                .collect()
        };
        let lin = |row: &[f64], l: &Linear| -> Vec<f64> {
            let (w, b) = (get(l.weight), get(l.bias));
            (0..w.cols())
                .map(|o| b.data()[o] + (0..w.rows()).map(|i| row[i] * w.get(i, o)).sum::<f64>())
                .collect()
        };
        let d = layer.dim;
        let hd = d / layer.heads;
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &layer.ln_attn)).collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &layer.qkv)).collect();
        let n = x.len();
        let mut merged = vec![vec![0.0; d]; n];
        for head in 0..layer.heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..hd)
                            .map(|t| qkv[i][head * hd + t] * qkv[j][d + head * hd + t])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for t in 0..hd {
                    merged[i][head * hd + t] =
                        (0..n).map(|j| w[j] * qkv[j][2 * d + head * hd + t]).sum();
                }
            }
        }
        let mut out = Vec::new();
        for i in 0..n {
            let a = lin(&merged[i], &layer.proj);
            let x1: Vec<f64> = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
            let m = lin(&ln(&x1, &layer.ln_mlp), &layer.fc1);
            let m: Vec<f64> = m.into_iter().map(silu).collect();
            let m = lin(&m, &layer.fc2);
            out.push(x1.iter().zip(&m).map(|(u, v)| u + v).collect());
        }
        out
    }

    #[test]
    fn layer_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let layer = EncoderLayer::new(&mut ps, "l", &small_cfg(), &mut rng);
        randomize(&mut ps, &mut rng);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = layer.apply(&ps, &Tensor2D::from_rows(&rows)).unwrap();
        let want = reference_layer(&rows, &ps, &layer);
        for (i, w) in want.iter().enumerate() {
            for (g, e) in got.row(i).iter().zip(w) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn trunc_normal_is_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = trunc_normal(&mut rng, 50, 50, INIT_STD);
        assert!(t.max_abs() <= 2.0 * INIT_STD);
    }
}
