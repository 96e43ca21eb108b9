//! MLP feature extractor with L2-normalised output.
//!
//! Hidden layers are affine + ReLU, the last layer is affine followed by
//! `u / max(|u|, 1e-12)`. Gradients are derived by hand; [`ForwardCache`]
//! carries what [`EncoderState::backward`] needs and is tied to the
//! parameter version it was produced with.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const NORM_EPS: f64 = 1e-12;
const MAGIC: &[u8; 4] = b"UPCL";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    layer_sizes: Vec<usize>,
    /// `weights[l]` has shape `(layer_sizes[l + 1], layer_sizes[l])`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    version: u64,
}

/// Activations recorded by [`EncoderState::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    /// Input to each affine layer; `layer_inputs[0]` is the raw batch.
    layer_inputs: Vec<Array2<f64>>,
    /// Affine outputs of every hidden layer, before ReLU.
    hidden_pre: Vec<Array2<f64>>,
    /// Final affine output before normalisation.
    raw: Array2<f64>,
    /// Normalised output.
    feats: Array2<f64>,
}

impl ForwardCache {
    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn into_feats(self) -> Array2<f64> {
        self.feats
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(state: &EncoderState) -> Self {
        Self {
            weights: state
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: state
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    /// Flat view in the same order as [`EncoderState::param`].
    pub fn flat(&self, index: usize) -> f64 {
        let mut i = index;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if i < w.len() {
                return w.as_slice().expect("standard layout")[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index {index} out of range")
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

impl EncoderState {
    /// Scaled-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(layer_sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            version: 0,
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument(
                "need one bias per weight matrix".into(),
            ));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            let expected = *sizes.last().expect("non-empty");
            if w.ncols() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: w.ncols(),
                });
            }
            if b.len() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w.nrows(),
                    got: b.len(),
                });
            }
            sizes.push(w.nrows());
        }
        Ok(Self {
            layer_sizes: sizes,
            weights: weights
                .into_iter()
                .map(|w| w.as_standard_layout().to_owned())
                .collect(),
            biases,
            version: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn param(&self, index: usize) -> f64 {
        let (layer, offset, is_bias) = self.locate(index);
        if is_bias {
            self.biases[layer][offset]
        } else {
            self.weights[layer].as_slice().expect("standard layout")[offset]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (layer, offset, is_bias) = self.locate(index);
        if is_bias {
            self.biases[layer][offset] = value;
        } else {
            self.weights[layer].as_slice_mut().expect("standard layout")[offset] = value;
        }
        self.version += 1;
    }

    fn locate(&self, index: usize) -> (usize, usize, bool) {
        let mut i = index;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if i < w.len() {
                return (l, i, false);
            }
            i -= w.len();
            if i < b.len() {
                return (l, i, true);
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range")
    }

    /// Normalised features only.
    pub fn encode(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(inputs).map(ForwardCache::into_feats)
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let last = self.weights.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut act = inputs.to_owned();
        for l in 0..last {
            let pre = act.dot(&self.weights[l].t()) + &self.biases[l];
            layer_inputs.push(act);
            act = pre.mapv(|x| x.max(0.0));
            hidden_pre.push(pre);
        }
        let raw = act.dot(&self.weights[last].t()) + &self.biases[last];
        layer_inputs.push(act);
        let mut feats = raw.clone();
        for mut row in feats.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / norm);
        }
        Ok(ForwardCache {
            version: self.version,
            layer_inputs,
            hidden_pre,
            raw,
            feats,
        })
    }

    /// Chain rule from `d loss / d feats` back to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_feats: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        if cache.version != self.version || cache.layer_inputs.len() != self.weights.len() {
            return Err(Error::StaleCache);
        }
        if grad_feats.dim() != cache.feats.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.feats.len(),
                got: grad_feats.len(),
            });
        }
        // Normalisation Jacobian (I - v v^T) / |u|.
        let mut delta = grad_feats.to_owned();
        for ((mut g, v), u) in delta
            .rows_mut()
            .into_iter()
            .zip(cache.feats.rows())
            .zip(cache.raw.rows())
        {
            let norm = u.dot(&u).sqrt();
            if norm > NORM_EPS {
                let radial = v.dot(&g);
                g.scaled_add(-radial, &v);
                g.mapv_inplace(|x| x / norm);
            } else {
                g.mapv_inplace(|x| x / NORM_EPS);
            }
        }

        let layers = self.weights.len();
        let mut weights = vec![Array2::zeros((0, 0)); layers];
        let mut biases = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            weights[l] = delta.t().dot(&cache.layer_inputs[l]);
            biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.weights[l]);
                ndarray::Zip::from(&mut upstream)
                    .and(&cache.hidden_pre[l - 1])
                    .for_each(|g, &pre| {
                        if pre <= 0.0 {
                            *g = 0.0;
                        }
                    });
                delta = upstream;
            }
        }
        Ok(Gradients { weights, biases })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for x in w.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for x in b.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
            });
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported parameter file version {version}"
            )));
        }
        let count = cursor.u32()? as usize;
        let sizes = (0..count)
            .map(|_| cursor.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = (0..fan_in * fan_out)
                .map(|_| cursor.f64())
                .collect::<Result<Vec<_>>>()?;
            weights.push(Array2::from_shape_vec((fan_out, fan_in), w).expect("sized above"));
            let b = (0..fan_out)
                .map(|_| cursor.f64())
                .collect::<Result<Vec<_>>>()?;
            biases.push(Array1::from(b));
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            version: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes {sizes:?} need at least two positive entries"
        )));
    }
    Ok(())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedFile {
                needed: end,
                have: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// SGD with momentum, coupled weight decay and a milestone schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_gamma: f64,
    #[serde(skip)]
    decayed: BTreeSet<usize>,
    #[serde(skip)]
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        milestones: Vec<usize>,
        decay_gamma: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            milestones,
            decay_gamma,
            decayed: BTreeSet::new(),
            velocity: Vec::new(),
        })
    }

    /// `v <- momentum * v + g + wd * p; p <- p - lr * v` for each tensor.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per tensor");
        let fresh = self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.len());
        if fresh {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(param.len(), grad.len(), "gradient shape");
            for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.learning_rate * *v;
            }
        }
    }

    /// Decays the learning rate once when `epoch` is a milestone.
    pub fn schedule_epoch(&mut self, epoch: usize) {
        if self.milestones.contains(&epoch) && self.decayed.insert(epoch) {
            self.learning_rate *= self.decay_gamma;
        }
    }
}

/// One SGD step on every encoder parameter.
pub fn sgd_step(
    state: &mut EncoderState,
    opt: &mut OptimizerState,
    grads: &Gradients,
) -> Result<()> {
    if grads.weights.len() != state.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: state.weights.len(),
            got: grads.weights.len(),
        });
    }
    for (p, g) in state.weights.iter().zip(&grads.weights) {
        if p.dim() != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    for (p, g) in state.biases.iter().zip(&grads.biases) {
        if p.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    let grads_std: Vec<Array2<f64>> = grads
        .weights
        .iter()
        .map(|g| g.as_standard_layout().to_owned())
        .collect();
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut flat_grads: Vec<&[f64]> = Vec::new();
    for ((w, b), (gw, gb)) in state
        .weights
        .iter_mut()
        .zip(state.biases.iter_mut())
        .zip(grads_std.iter().zip(&grads.biases))
    {
        params.push(w.as_slice_mut().expect("standard layout"));
        flat_grads.push(gw.as_slice().expect("standard layout"));
        params.push(b.as_slice_mut().expect("contiguous"));
        flat_grads.push(gb.as_slice().expect("contiguous"));
    }
    opt.step_tensors(&mut params, &flat_grads);
    state.version += 1;
    Ok(())
}

/// A frozen copy of the encoder used as the distillation teacher.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    state: EncoderState,
}

impl TeacherSnapshot {
    pub fn encode(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.state.encode(inputs)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        self.state.layer_sizes()
    }
}

pub fn snapshot_teacher(state: &EncoderState) -> TeacherSnapshot {
    TeacherSnapshot {
        state: state.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn identity_layer(d: usize) -> EncoderState {
        EncoderState::from_parts(vec![Array2::eye(d)], vec![Array1::zeros(d)]).unwrap()
    }

    #[test]
    fn identity_layer_passes_unit_input() {
        let enc = identity_layer(3);
        let x = array![[0.6, 0.0, 0.8]];
        assert_eq!(enc.encode(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_preactivation_is_guarded() {
        let enc = identity_layer(2);
        let out = enc.encode(array![[0.0, 0.0]].view()).unwrap();
        assert!(out.iter().all(|x| x.is_finite()));
        assert!(out.row(0).dot(&out.row(0)).sqrt() <= 1.0);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let enc = identity_layer(2);
        assert!(matches!(
            enc.forward(array![[1.0, 0.0, 0.0]].view()),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn output_is_normalised_and_idempotent() {
        let enc = EncoderState::new(&[5, 7, 4], &mut seeded(3)).unwrap();
        let x = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let feats = enc.encode(x.view()).unwrap();
        for row in feats.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for x in row.iter() {
                assert!((x / norm - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let enc = EncoderState::new(&[4, 6, 3], &mut seeded(1)).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let cache = enc.forward(x.view()).unwrap();
        let g = enc.backward(&cache, Array2::zeros((5, 3)).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let enc = identity_layer(2);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        // Tangent upstream gradients pass the normalisation Jacobian unchanged.
        let g = array![[0.0, 0.5], [-2.0, 0.0]];
        let cache = enc.forward(x.view()).unwrap();
        let grads = enc.backward(&cache, g.view()).unwrap();
        assert_eq!(grads.weights[0], g.t().dot(&x));
        assert_eq!(grads.biases[0], array![-2.0, 0.5]);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut enc = EncoderState::new(&[3, 2], &mut seeded(0)).unwrap();
        let cache = enc.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, vec![], 0.1).unwrap();
        let grads = Gradients::zeros_like(&enc);
        sgd_step(&mut enc, &mut opt, &grads).unwrap();
        assert!(matches!(
            enc.backward(&cache, array![[1.0, 0.0]].view()),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn sgd_plain_step() {
        let mut enc = identity_layer(2);
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, vec![], 0.1).unwrap();
        let mut grads = Gradients::zeros_like(&enc);
        grads.weights[0] = array![[1.0, 2.0], [3.0, 4.0]];
        grads.biases[0] = array![1.0, -1.0];
        sgd_step(&mut enc, &mut opt, &grads).unwrap();
        let want = array![[0.9, -0.2], [-0.3, 0.6]];
        assert!((&enc.weights()[0] - &want).iter().all(|e| e.abs() < 1e-15));
        assert!((&enc.biases()[0] - &array![-0.1, 0.1])
            .iter()
            .all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn sgd_weight_decay_shrinks() {
        let mut enc = identity_layer(2);
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0002, vec![], 0.1).unwrap();
        let zeros = Gradients::zeros_like(&enc);
        sgd_step(&mut enc, &mut opt, &zeros).unwrap();
        assert_eq!(enc.weights()[0][[0, 0]], 1.0 - 0.1 * 0.0002);
        assert_eq!(enc.weights()[0][[0, 1]], 0.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut enc = identity_layer(1);
        let mut opt = OptimizerState::new(1.0, 0.9, 0.0, vec![], 0.1).unwrap();
        let mut grads = Gradients::zeros_like(&enc);
        grads.weights[0] = array![[1.0]];
        sgd_step(&mut enc, &mut opt, &grads).unwrap();
        sgd_step(&mut enc, &mut opt, &grads).unwrap();
        assert!((enc.weights()[0][[0, 0]] - (1.0 - 2.9)).abs() < 1e-15);
    }

    #[test]
    fn milestone_schedule() {
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, vec![3, 5], 0.1).unwrap();
        opt.schedule_epoch(2);
        assert_eq!(opt.learning_rate, 0.1);
        opt.schedule_epoch(3);
        assert!((opt.learning_rate - 0.01).abs() < 1e-15);
        opt.schedule_epoch(3);
        assert!((opt.learning_rate - 0.01).abs() < 1e-15);
    }

    #[test]
    fn teacher_is_frozen() {
        let mut enc = EncoderState::new(&[3, 4, 2], &mut seeded(5)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let before = enc.encode(x.view()).unwrap();
        let teacher = snapshot_teacher(&enc);
        assert_eq!(teacher.encode(x.view()).unwrap(), before);
        let mut opt = OptimizerState::new(0.5, 0.0, 0.0, vec![], 0.1).unwrap();
        let cache = enc.forward(x.view()).unwrap();
        let g = enc
            .backward(&cache, array![[1.0, 0.0], [0.0, 1.0]].view())
            .unwrap();
        sgd_step(&mut enc, &mut opt, &g).unwrap();
        assert_ne!(enc.encode(x.view()).unwrap(), before);
        assert_eq!(teacher.encode(x.view()).unwrap(), before);
    }

    #[test]
    fn binary_format_round_trip() {
        let enc = EncoderState::new(&[3, 5, 2], &mut seeded(8)).unwrap();
        let bytes = enc.to_bytes();
        assert_eq!(&bytes[..4], b"UPCL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 3 * 4 + 8 * enc.param_count());
        assert_eq!(EncoderState::from_bytes(&bytes).unwrap(), enc);
        assert!(matches!(
            EncoderState::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            EncoderState::from_bytes(b"NOPE\x01\0\0\0"),
            Err(Error::BadMagic { .. })
        ));
    }
}
