//! Configurable convolutional trunk shared by the attribute and relation
//! networks.
//!
//! A [`NetworkSpec`] lists the layer sequence. Convolutional layers operate on
//! `[C, H, W]` maps; the first fully-connected layer flattens the map and
//! appends the bridging descriptor (`bridge_dim` extra inputs) before the
//! affine map. Everything after the first fully-connected layer is a flat
//! vector.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LrnParams};
use crate::params::{ParamKind, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { kernel: usize, filters: usize, stride: usize },
    Maxpool { kernel: usize, stride: usize },
    Lrn(LrnParams),
    Fc { out_dim: usize },
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]` of the face crop.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Length of the bridging descriptor appended at the first FC layer.
    pub bridge_dim: usize,
}

/// Resolved tensor geometry of a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    /// Input shape of every layer.
    pub layer_inputs: Vec<Vec<usize>>,
    /// Flattened convolutional feature length (before the bridge columns).
    pub flat_dim: usize,
    pub feature_dim: usize,
}

impl NetworkSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("input {:?} has a zero extent", self.input)));
        }
        let mut shape = vec![c, h, w];
        let mut flat_dim = None;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(shape.clone());
            let spatial = shape.len() == 3;
            let bad = |what: &str| Error::InvalidShape(format!("layer {i} ({what}) cannot follow shape {shape:?}"));
            shape = match *layer {
                LayerSpec::Conv { kernel, filters, stride } => {
                    if !spatial {
                        return Err(bad("conv"));
                    }
                    if kernel == 0 || filters == 0 || stride == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: conv extents must be >= 1")));
                    }
                    if kernel > shape[1] || kernel > shape[2] {
                        return Err(Error::ShapeMismatch { axis: "conv kernel", expected: kernel, actual: shape[1].min(shape[2]) });
                    }
                    vec![filters, (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1]
                }
                LayerSpec::Maxpool { kernel, stride } => {
                    if !spatial {
                        return Err(bad("maxpool"));
                    }
                    if kernel == 0 || stride == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: pool extents must be >= 1")));
                    }
                    if kernel > shape[1] || kernel > shape[2] {
                        return Err(Error::ShapeMismatch { axis: "pool kernel", expected: kernel, actual: shape[1].min(shape[2]) });
                    }
                    vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1]
                }
                LayerSpec::Lrn(p) => {
                    if !spatial {
                        return Err(bad("lrn"));
                    }
                    if p.n == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: LRN depth must be >= 1")));
                    }
                    shape
                }
                LayerSpec::Fc { out_dim } => {
                    if out_dim == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: fc out_dim must be >= 1")));
                    }
                    if flat_dim.is_none() {
                        flat_dim = Some(shape.iter().product::<usize>());
                    }
                    vec![out_dim]
                }
                LayerSpec::Relu => shape,
            };
        }
        let flat_dim = flat_dim.ok_or_else(|| Error::InvalidArgument("network has no fully-connected layer".to_string()))?;
        if shape.len() != 1 {
            return Err(Error::InvalidShape("network must end in a flat feature vector".to_string()));
        }
        Ok(Geometry {
            layer_inputs,
            flat_dim,
            feature_dim: shape[0],
        })
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.geometry()?.feature_dim)
    }

    /// Parameter names of layer `i`, if it is parameterized.
    fn layer_param_names(&self, i: usize) -> Option<(String, String)> {
        let (prefix, ordinal) = match self.layers[i] {
            LayerSpec::Conv { .. } => ("conv", self.layers[..=i].iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()),
            LayerSpec::Fc { .. } => ("fc", self.layers[..=i].iter().filter(|l| matches!(l, LayerSpec::Fc { .. })).count()),
            _ => return None,
        };
        Some((format!("trunk.{prefix}{ordinal}.weight"), format!("trunk.{prefix}{ordinal}.bias")))
    }

    /// Adds He-initialized trunk parameters (zero biases) to `params`.
    pub fn init_params(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let geo = self.geometry()?;
        let mut first_fc = true;
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((wname, bname)) = self.layer_param_names(i) else { continue };
            let input = &geo.layer_inputs[i];
            let (wshape, n_out, fan_in) = match *layer {
                LayerSpec::Conv { kernel, filters, .. } => (vec![filters, input[0], kernel, kernel], filters, input[0] * kernel * kernel),
                LayerSpec::Fc { out_dim } => {
                    let n_in = if first_fc {
                        first_fc = false;
                        geo.flat_dim + self.bridge_dim
                    } else {
                        input[0]
                    };
                    (vec![n_in, out_dim], out_dim, n_in)
                }
                _ => unreachable!(),
            };
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let w = Tensor::from_fn(&wshape, |_| normal.sample(rng));
            params.insert(&wname, ParamKind::Weight, w)?;
            params.insert(&bname, ParamKind::Bias, Tensor::zeros(&[n_out]))?;
        }
        Ok(())
    }

    /// Checks that `params` holds exactly the tensors this spec requires.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let geo = self.geometry()?;
        let mut first_fc = true;
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((wname, bname)) = self.layer_param_names(i) else { continue };
            let input = &geo.layer_inputs[i];
            let (wshape, n_out) = match *layer {
                LayerSpec::Conv { kernel, filters, .. } => (vec![filters, input[0], kernel, kernel], filters),
                LayerSpec::Fc { out_dim } => {
                    let n_in = if first_fc {
                        first_fc = false;
                        geo.flat_dim + self.bridge_dim
                    } else {
                        input[0]
                    };
                    (vec![n_in, out_dim], out_dim)
                }
                _ => unreachable!(),
            };
            for (name, shape) in [(&wname, wshape), (&bname, vec![n_out])] {
                let t = params.get(name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Field-level differences between two specs, empty when identical.
    pub fn diff(&self, other: &NetworkSpec) -> Vec<String> {
        let mut out = Vec::new();
        if self.input != other.input {
            out.push(format!("input: {:?} != {:?}", self.input, other.input));
        }
        if self.bridge_dim != other.bridge_dim {
            out.push(format!("bridge_dim: {} != {}", self.bridge_dim, other.bridge_dim));
        }
        if self.layers.len() != other.layers.len() {
            out.push(format!("layers.len: {} != {}", self.layers.len(), other.layers.len()));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a != b {
                out.push(format!("layers[{i}]: {a:?} != {b:?}"));
            }
        }
        out
    }

    pub fn forward(&self, params: &ParameterSet, image: &Tensor, bridge: &[f64]) -> Result<(Vec<f64>, TrunkTrace)> {
        if image.shape() != self.input.as_slice() {
            return Err(Error::InvalidShape(format!(
                "image shape {:?} does not match network input {:?}",
                image.shape(),
                self.input
            )));
        }
        if bridge.len() != self.bridge_dim {
            return Err(Error::ShapeMismatch {
                axis: "bridge descriptor",
                expected: self.bridge_dim,
                actual: bridge.len(),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut map = Some(image.clone());
        let mut flat: Vec<f64> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { stride, .. } => {
                    let (wn, bn) = self.layer_param_names(i).unwrap();
                    let x = map.take().ok_or_else(|| Error::InvalidShape("conv after flatten".to_string()))?;
                    let y = layers::conv_forward(&x, params.get(&wn)?, params.get(&bn)?, *stride)?;
                    caches.push(LayerCache::Conv { input: x });
                    map = Some(y);
                }
                LayerSpec::Maxpool { kernel, stride } => {
                    let x = map.take().ok_or_else(|| Error::InvalidShape("pool after flatten".to_string()))?;
                    let (y, argmax) = layers::maxpool_forward(&x, *kernel, *stride)?;
                    caches.push(LayerCache::Pool { argmax, input_len: x.len() });
                    map = Some(y);
                }
                LayerSpec::Lrn(p) => {
                    let x = map.take().ok_or_else(|| Error::InvalidShape("lrn after flatten".to_string()))?;
                    let (y, scale) = layers::lrn_forward(&x, p)?;
                    caches.push(LayerCache::Lrn { input: x, scale });
                    map = Some(y);
                }
                LayerSpec::Relu => {
                    if let Some(x) = map.as_mut() {
                        let pre = x.data().to_vec();
                        x.data_mut().iter_mut().for_each(|v| {
                            if !(*v > 0.0) {
                                *v = 0.0
                            }
                        });
                        caches.push(LayerCache::Relu { pre });
                    } else {
                        let pre = flat.clone();
                        flat = layers::relu(&pre);
                        caches.push(LayerCache::Relu { pre });
                    }
                }
                LayerSpec::Fc { .. } => {
                    let (wn, bn) = self.layer_param_names(i).unwrap();
                    let input = match map.take() {
                        Some(x) => {
                            let mut v = x.into_data();
                            v.extend_from_slice(bridge);
                            v
                        }
                        None => core::mem::take(&mut flat),
                    };
                    flat = layers::fc_forward(&input, params.get(&wn)?, params.get(&bn)?)?;
                    caches.push(LayerCache::Fc { input });
                }
            }
        }
        Ok((flat, TrunkTrace { caches }))
    }

    /// Accumulates parameter gradients of the trunk given `upstream`, the
    /// gradient with respect to the feature vector returned by `forward`.
    pub fn backward(&self, params: &mut ParameterSet, trace: &TrunkTrace, upstream: &[f64]) -> Result<()> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::MissingContext(format!(
                "trace holds {} layers, network has {}",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        let geo = self.geometry()?;
        if upstream.len() != geo.feature_dim {
            return Err(Error::ShapeMismatch {
                axis: "feature gradient",
                expected: geo.feature_dim,
                actual: upstream.len(),
            });
        }
        // index of the first parameterized layer: it needs no input gradient
        let first_param = self.layers.iter().position(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Fc { .. }));
        let mut grad = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let need_input = first_param.is_some_and(|f| i > f);
            let in_shape = &geo.layer_inputs[i];
            match (&self.layers[i], &trace.caches[i]) {
                (LayerSpec::Conv { stride, .. }, LayerCache::Conv { input }) => {
                    let (wn, bn) = self.layer_param_names(i).unwrap();
                    let up = Tensor::new(self.output_shape(&geo, i), core::mem::take(&mut grad))?;
                    let mut dx = if need_input { vec![0.0; input.len()] } else { Vec::new() };
                    let mut db = params.get_mut(&bn)?.take_grad();
                    let wt = params.get_mut(&wn)?;
                    let mut dw = wt.take_grad();
                    let res = layers::conv_backward_into(input, wt, *stride, &up, need_input.then_some(dx.as_mut_slice()), &mut dw, &mut db);
                    wt.set_grad(dw)?;
                    params.get_mut(&bn)?.set_grad(db)?;
                    res?;
                    grad = dx;
                }
                (LayerSpec::Maxpool { .. }, LayerCache::Pool { argmax, input_len }) => {
                    grad = layers::maxpool_backward(argmax, &grad, *input_len)?;
                }
                (LayerSpec::Lrn(p), LayerCache::Lrn { input, scale }) => {
                    grad = layers::lrn_backward(input, scale, p, &grad)?;
                }
                (LayerSpec::Relu, LayerCache::Relu { pre }) => {
                    for (g, x) in grad.iter_mut().zip(pre) {
                        if !(*x > 0.0) {
                            *g = 0.0;
                        }
                    }
                }
                (LayerSpec::Fc { .. }, LayerCache::Fc { input }) => {
                    let (wn, bn) = self.layer_param_names(i).unwrap();
                    let mut dx = if need_input { vec![0.0; input.len()] } else { Vec::new() };
                    let mut db = params.get_mut(&bn)?.take_grad();
                    let wt = params.get_mut(&wn)?;
                    let mut dw = wt.take_grad();
                    let res = layers::fc_backward_into(input, wt, &grad, need_input.then_some(dx.as_mut_slice()), &mut dw, &mut db);
                    wt.set_grad(dw)?;
                    params.get_mut(&bn)?.set_grad(db)?;
                    res?;
                    // drop the bridge columns: the descriptor is an input, not a parameter
                    if need_input && in_shape.len() == 3 {
                        dx.truncate(in_shape.iter().product());
                    }
                    grad = dx;
                }
                _ => return Err(Error::MissingContext(format!("trace entry {i} does not match layer kind"))),
            }
            if !need_input && first_param == Some(i) {
                break;
            }
        }
        Ok(())
    }

    fn output_shape(&self, geo: &Geometry, i: usize) -> Vec<usize> {
        geo.layer_inputs.get(i + 1).cloned().unwrap_or_else(|| vec![geo.feature_dim])
    }
}

/// Per-layer forward context consumed by [`NetworkSpec::backward`].
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Pool { argmax: Vec<usize>, input_len: usize },
    Lrn { input: Tensor, scale: Vec<f64> },
    Relu { pre: Vec<f64> },
    Fc { input: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct TrunkTrace {
    pub caches: Vec<LayerCache>,
}

/// Named network configurations. The layer sequence is fixed (four
/// convolutions, three max-pools, two LRN layers, two FC layers); only the
/// widths differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub network: NetworkSpec,
    /// Output width of the relation projection applied to `[x_l; x_r]`.
    pub projection_dim: usize,
}

impl Profile {
    pub fn by_name(name: &str, bridge_dim: usize) -> Result<Self> {
        let (filters, fc, projection_dim) = match name {
            "desk" => ([16, 32, 64, 64], [2048, 2048], 256),
            "desk-small" => ([4, 8, 16, 16], [64, 32], 16),
            _ => return Err(Error::InvalidArgument(format!("unknown network profile `{name}` (expected desk or desk-small)"))),
        };
        let lrn = LayerSpec::Lrn(LrnParams::default());
        let conv = |kernel, filters| LayerSpec::Conv { kernel, filters, stride: 1 };
        let pool = LayerSpec::Maxpool { kernel: 2, stride: 2 };
        let layers = vec![
            conv(5, filters[0]),
            LayerSpec::Relu,
            pool.clone(),
            lrn.clone(),
            conv(5, filters[1]),
            LayerSpec::Relu,
            pool.clone(),
            lrn,
            conv(3, filters[2]),
            LayerSpec::Relu,
            conv(3, filters[3]),
            LayerSpec::Relu,
            // overlapping window so the last row and column of the 5x5 map are pooled
            LayerSpec::Maxpool { kernel: 3, stride: 2 },
            LayerSpec::Fc { out_dim: fc[0] },
            LayerSpec::Relu,
            LayerSpec::Fc { out_dim: fc[1] },
            LayerSpec::Relu,
        ];
        let network = NetworkSpec {
            name: name.to_string(),
            input: [1, 48, 48],
            layers,
            bridge_dim,
        };
        network.geometry()?;
        Ok(Self { network, projection_dim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_geometry() {
        let p = Profile::by_name("desk", 210).unwrap();
        let g = p.network.geometry().unwrap();
        assert_eq!(g.flat_dim, 64 * 2 * 2);
        assert_eq!(g.feature_dim, 2048);
        assert_eq!(2 * g.feature_dim, 4096);
        assert_eq!(p.projection_dim, 256);
        let convs = p.network.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
        let pools = p.network.layers.iter().filter(|l| matches!(l, LayerSpec::Maxpool { .. })).count();
        let lrns = p.network.layers.iter().filter(|l| matches!(l, LayerSpec::Lrn(_))).count();
        let fcs = p.network.layers.iter().filter(|l| matches!(l, LayerSpec::Fc { .. })).count();
        assert_eq!((convs, pools, lrns, fcs), (4, 3, 2, 2));
        assert!(Profile::by_name("huge", 0).is_err());
    }

    #[test]
    fn params_validate_and_forward_runs() {
        let p = Profile::by_name("desk-small", 7).unwrap();
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.network.init_params(&mut ps, &mut rng).unwrap();
        p.network.check_params(&ps).unwrap();
        let img = Tensor::from_fn(&[1, 48, 48], |i| (i % 7) as f64 / 7.0);
        let (x, trace) = p.network.forward(&ps, &img, &[0.5; 7]).unwrap();
        assert_eq!(x.len(), 32);
        assert!(p.network.forward(&ps, &img, &[0.5; 6]).is_err());
        let mut ps2 = ps.clone();
        p.network.backward(&mut ps2, &trace, &vec![0.0; 32]).unwrap();
        for prm in ps2.iter() {
            assert!(prm.tensor.grad().unwrap().iter().all(|&g| g == 0.0));
        }
        let bad = TrunkTrace { caches: Vec::new() };
        assert!(matches!(p.network.backward(&mut ps2, &bad, &vec![0.0; 32]), Err(Error::MissingContext(_))));
    }

    #[test]
    fn diff_reports_fields() {
        let a = Profile::by_name("desk-small", 10).unwrap().network;
        let mut b = a.clone();
        b.bridge_dim = 3;
        b.layers[0] = LayerSpec::Conv { kernel: 3, filters: 4, stride: 1 };
        let d = a.diff(&b);
        assert_eq!(d.len(), 2);
        assert!(d[0].starts_with("bridge_dim"));
        assert!(d[1].starts_with("layers[0]"));
    }
}
