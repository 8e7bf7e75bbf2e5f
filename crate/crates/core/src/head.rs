//! Sentence-embedding head: pooling over per-token states, optional `tanh`
//! MLP layers, then L2 normalization. The same head is used for code and
//! documents.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerGrads, LayerStates};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolerType {
    /// Last-layer state at the leading `[CLS]` position.
    Cls,
    /// Masked mean of last-layer states.
    Avg,
    /// Masked mean of the elementwise average of first and last layer.
    AvgFirstLast,
}

impl PoolerType {
    pub const ALL: [PoolerType; 3] = [PoolerType::Cls, PoolerType::Avg, PoolerType::AvgFirstLast];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolerType::Cls => "cls",
            PoolerType::Avg => "avg",
            PoolerType::AvgFirstLast => "avg_first_last",
        }
    }
}

impl fmt::Display for PoolerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolerType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pooler type {s:?}")))
    }
}

/// One `v ← tanh(W v + b)` layer; `weight` is out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub pooler: PoolerType,
    pub layers: Vec<MlpLayer>,
}

pub const MAX_MLP_LAYERS: usize = 2;

impl Head {
    /// `mlp_layers` h→h layers initialized uniformly in `[-scale, scale]`
    /// (single-precision draws, see [`crate::encoder::TinyEncoderParams::init`]).
    pub fn init(pooler: PoolerType, mlp_layers: usize, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        if mlp_layers > MAX_MLP_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "mlp_layers must be 0, 1 or 2, got {mlp_layers}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = scale as f32;
        let layers = (0..mlp_layers)
            .map(|_| MlpLayer {
                weight: Array2::from_shape_simple_fn((hidden, hidden), || {
                    f64::from(rng.random_range(-scale..=scale))
                }),
                bias: Array1::from_shape_simple_fn(hidden, || f64::from(rng.random_range(-scale..=scale))),
            })
            .collect();
        Ok(Self { pooler, layers })
    }

    pub fn mlp_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pooler: self.pooler,
            layers: self
                .layers
                .iter()
                .map(|l| MlpLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check(&self, states: &LayerStates) -> Result<()> {
        let h = states.hidden();
        for (k, l) in self.layers.iter().enumerate() {
            if l.weight.dim() != (h, h) || l.bias.len() != h {
                return Err(Error::ShapeMismatch(format!(
                    "mlp layer {k} is {:?}, hidden size is {h}",
                    l.weight.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate values of one head evaluation.
struct HeadTrace {
    /// Per-row count of real positions.
    counts: Vec<usize>,
    /// Input to each MLP layer followed by the final pre-normalization
    /// vector: `layers + 1` matrices of n × h.
    activations: Vec<Array2<f64>>,
    norms: Array1<f64>,
    output: Array2<f64>,
}

fn pool(states: &LayerStates, pooler: PoolerType) -> Result<(Array2<f64>, Vec<usize>)> {
    let (n, len, h) = states.first.dim();
    let mut pooled = Array2::zeros((n, h));
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let real: Vec<usize> = (0..len).filter(|&t| states.mask[[i, t]]).collect();
        if real.is_empty() {
            return Err(Error::EmptySequence(i));
        }
        let mut row = pooled.row_mut(i);
        match pooler {
            PoolerType::Cls => {
                if !states.mask[[i, 0]] {
                    return Err(Error::EmptySequence(i));
                }
                row.assign(&states.last.slice(s![i, 0, ..]));
            }
            PoolerType::Avg => {
                for &t in &real {
                    row += &states.last.slice(s![i, t, ..]);
                }
                row /= real.len() as f64;
            }
            PoolerType::AvgFirstLast => {
                for &t in &real {
                    let first = states.first.slice(s![i, t, ..]);
                    let last = states.last.slice(s![i, t, ..]);
                    row.zip_mut_with(&(&first + &last), |o, v| *o += v / 2.0);
                }
                row /= real.len() as f64;
            }
        }
        counts.push(real.len());
    }
    Ok((pooled, counts))
}

fn trace(states: &LayerStates, head: &Head) -> Result<HeadTrace> {
    head.check(states)?;
    let (pooled, counts) = pool(states, head.pooler)?;
    let mut activations = vec![pooled];
    for layer in &head.layers {
        let input = activations.last().unwrap();
        let mut out = input.dot(&layer.weight.t());
        out += &layer.bias;
        out.mapv_inplace(f64::tanh);
        activations.push(out);
    }
    let v = activations.last().unwrap();
    let mut norms = Array1::zeros(v.nrows());
    let mut output = v.clone();
    for (i, mut row) in output.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroNorm(i));
        }
        norms[i] = norm;
        row /= norm;
    }
    Ok(HeadTrace {
        counts,
        activations,
        norms,
        output,
    })
}

/// Pools, applies the MLP layers and normalizes: one unit row per input.
pub fn embed(states: &LayerStates, head: &Head) -> Result<Array2<f64>> {
    trace(states, head).map(|t| t.output)
}

/// Gradients of a scalar objective with respect to the head's MLP parameters
/// and to the layer states, given its gradient on the unit embeddings.
pub fn head_backward(states: &LayerStates, head: &Head, upstream: &Array2<f64>) -> Result<(Head, LayerGrads)> {
    let tr = trace(states, head)?;
    let (n, len, h) = states.first.dim();
    if upstream.dim() != (n, h) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?}, embeddings {:?}",
            upstream.dim(),
            (n, h)
        )));
    }

    // d(v/‖v‖) = (I - e eᵀ) dv / ‖v‖
    let mut grad = upstream.clone();
    for i in 0..n {
        let e = tr.output.row(i);
        let radial = e.dot(&upstream.row(i));
        let mut g = grad.row_mut(i);
        g.scaled_add(-radial, &e);
        g /= tr.norms[i];
    }

    let mut head_grads = head.zeros_like();
    for (k, layer) in head.layers.iter().enumerate().rev() {
        let out = &tr.activations[k + 1];
        let input = &tr.activations[k];
        let d_pre = &grad * &out.mapv(|y| 1.0 - y * y);
        head_grads.layers[k].weight = d_pre.t().dot(input);
        head_grads.layers[k].bias = d_pre.sum_axis(Axis(0));
        grad = d_pre.dot(&layer.weight);
    }

    let mut state_grads = LayerGrads::zeros(n, len, h);
    for i in 0..n {
        let g = grad.row(i);
        match head.pooler {
            PoolerType::Cls => state_grads.last.slice_mut(s![i, 0, ..]).assign(&g),
            PoolerType::Avg => {
                let share = &g / tr.counts[i] as f64;
                for t in (0..len).filter(|&t| states.mask[[i, t]]) {
                    state_grads.last.slice_mut(s![i, t, ..]).assign(&share);
                }
            }
            PoolerType::AvgFirstLast => {
                let share = &g / (2.0 * tr.counts[i] as f64);
                for t in (0..len).filter(|&t| states.mask[[i, t]]) {
                    state_grads.first.slice_mut(s![i, t, ..]).assign(&share);
                    state_grads.last.slice_mut(s![i, t, ..]).assign(&share);
                }
            }
        }
    }
    Ok((head_grads, state_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn random_states(n: usize, len: usize, h: usize, reals: &[usize], seed: u64) -> LayerStates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = LayerStates::zeros(n, len, h);
        for i in 0..n {
            for t in 0..reals[i] {
                s.mask[[i, t]] = true;
                for k in 0..h {
                    s.first[[i, t, k]] = rng.random_range(-1.0..1.0);
                    s.last[[i, t, k]] = rng.random_range(-1.0..1.0);
                }
            }
        }
        s
    }

    #[test]
    fn avg_of_constant_rows_is_that_direction() {
        let mut s = LayerStates::zeros(1, 4, 2);
        for t in 0..3 {
            s.mask[[0, t]] = true;
            s.last.slice_mut(s![0, t, ..]).assign(&ndarray::array![3.0, 4.0]);
        }
        let head = Head::init(PoolerType::Avg, 0, 2, 0.1, 0).unwrap();
        let e = embed(&s, &head).unwrap();
        assert!((e[[0, 0]] - 0.6).abs() < 1e-15 && (e[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn avg_first_last_equals_avg_when_layers_coincide() {
        let mut s = random_states(3, 5, 4, &[5, 2, 3], 1);
        s.first = s.last.clone();
        let avg = embed(&s, &Head::init(PoolerType::Avg, 0, 4, 0.1, 0).unwrap()).unwrap();
        let afl = embed(&s, &Head::init(PoolerType::AvgFirstLast, 0, 4, 0.1, 0).unwrap()).unwrap();
        for (a, b) in avg.iter().zip(afl.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cls_selects_position_zero() {
        let s = random_states(2, 4, 3, &[4, 2], 2);
        let e = embed(&s, &Head::init(PoolerType::Cls, 0, 3, 0.1, 0).unwrap()).unwrap();
        for i in 0..2 {
            let v = s.last.slice(s![i, 0, ..]);
            let n = crate::linalg::norm(v);
            for k in 0..3 {
                assert!((e[[i, k]] - v[k] / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_pad_row_is_fatal() {
        let s = random_states(2, 3, 2, &[3, 0], 3);
        let err = embed(&s, &Head::init(PoolerType::Avg, 1, 2, 0.1, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptySequence(1)));
        assert!(err.to_string().starts_with("empty sequence"));
    }

    #[test]
    fn bad_mlp_count_is_rejected() {
        assert!(Head::init(PoolerType::Cls, 3, 4, 0.1, 0).is_err());
        assert!("max".parse::<PoolerType>().is_err());
        assert_eq!("avg_first_last".parse::<PoolerType>().unwrap(), PoolerType::AvgFirstLast);
    }

    #[test]
    fn cls_adjoint_touches_only_cls_positions() {
        let s = random_states(3, 4, 3, &[4, 3, 2], 4);
        let head = Head::init(PoolerType::Cls, 0, 3, 0.1, 0).unwrap();
        let up = Array2::from_shape_fn((3, 3), |(i, k)| (i * 3 + k) as f64 - 4.0);
        let (_, g) = head_backward(&s, &head, &up).unwrap();
        assert!(g.first.iter().all(|&v| v == 0.0));
        for i in 0..3 {
            assert!(g.last.slice(s![i, 0, ..]).iter().any(|&v| v != 0.0));
            assert!(g.last.slice(s![i, 1.., ..]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn normalization_adjoint_is_orthogonal_to_output() {
        let s = random_states(4, 3, 5, &[3, 3, 1, 2], 5);
        let head = Head::init(PoolerType::Avg, 0, 5, 0.1, 0).unwrap();
        let e = embed(&s, &head).unwrap();
        let up = Array2::from_shape_fn((4, 5), |(i, k)| ((i * 7 + k * 3) % 5) as f64 - 2.0);
        let (_, g) = head_backward(&s, &head, &up).unwrap();
        // pooled gradient = count * gradient on each real last-layer row
        for i in 0..4 {
            let pooled_grad = g.last.slice(s![i, 0, ..]).to_owned() * s.mask.row(i).iter().filter(|m| **m).count() as f64;
            assert!(crate::linalg::dot(pooled_grad.view(), e.row(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_positions_get_no_gradient() {
        let s = random_states(2, 5, 3, &[2, 4], 6);
        let head = Head::init(PoolerType::AvgFirstLast, 2, 3, 0.5, 1).unwrap();
        let up = Array2::from_elem((2, 3), 0.3);
        let (_, g) = head_backward(&s, &head, &up).unwrap();
        for i in 0..2 {
            for t in 0..5 {
                if !s.mask[[i, t]] {
                    assert!(g.first.slice(s![i, t, ..]).iter().all(|&v| v == 0.0));
                    assert!(g.last.slice(s![i, t, ..]).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    fn objective(s: &LayerStates, head: &Head, w: &Array2<f64>) -> f64 {
        (&embed(s, head).unwrap() * w).sum()
    }

    #[test]
    fn finite_difference_agreement_for_every_config() {
        for pooler in PoolerType::ALL {
            for mlp in 0..=2 {
                let s = random_states(3, 4, 3, &[4, 2, 3], 7);
                let head = Head::init(pooler, mlp, 3, 0.8, 9).unwrap();
                let w = Array2::from_shape_fn((3, 3), |(i, k)| ((i + 2 * k) % 4) as f64 * 0.5 - 0.7);
                let (hg, sg) = head_backward(&s, &head, &w).unwrap();
                let eps = 1e-4;
                let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                let mut worst: f64 = 0.0;

                let analytic: Vec<f64> = hg.values().copied().collect();
                for k in 0..head.num_params() {
                    let mut p = head.clone();
                    *p.values_mut().nth(k).unwrap() += eps;
                    let mut m = head.clone();
                    *m.values_mut().nth(k).unwrap() -= eps;
                    let fd = (objective(&s, &p, &w) - objective(&s, &m, &w)) / (2.0 * eps);
                    worst = worst.max(rel(fd, analytic[k]));
                }
                for (which, grads) in [(0, &sg.first), (1, &sg.last)] {
                    for idx in ndarray::indices(grads.dim()) {
                        let (i, t, _) = idx;
                        if !s.mask[[i, t]] {
                            continue;
                        }
                        let bump = |d: f64| {
                            let mut q = s.clone();
                            let target: &mut Array3<f64> = if which == 0 { &mut q.first } else { &mut q.last };
                            target[idx] += d;
                            objective(&q, &head, &w)
                        };
                        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                        worst = worst.max(rel(fd, grads[idx]));
                    }
                }
                assert!(worst < 1e-4, "{pooler} mlp{mlp}: {worst}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn outputs_are_unit_and_scale_invariant(seed in 0u64..1000, mlp in 0usize..3, p in 0usize..3, scale in 0.1f64..10.0) {
                let pooler = PoolerType::ALL[p];
                let s = random_states(3, 4, 5, &[4, 1, 3], seed);
                let head = Head::init(pooler, mlp, 5, 0.5, seed + 1).unwrap();
                let e = embed(&s, &head).unwrap();
                for r in e.rows() {
                    prop_assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
                }
                if mlp == 0 {
                    let mut scaled = s.clone();
                    scaled.first *= scale;
                    scaled.last *= scale;
                    let e2 = embed(&scaled, &head).unwrap();
                    for (a, b) in e.iter().zip(e2.iter()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
