//! Toy feature extractor standing in for a CNN backbone.
//!
//! Layout: trunk → final block (optionally duplicated into two pathways) →
//! feature maps → dual-pooling head → batch norm → LeakyReLU → embedding.
//! Vector inputs use dense layers whose last output is reshaped into a
//! `d × h × w` map; image inputs use 3×3 convolutions with the final block at
//! stride 1.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, RngState};
use crate::losses::CenterBank;
use crate::pooling::{avg_pool, fuse, max_pool, FeatureMap};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub input: InputShape,
    /// Dense widths (vector input) or conv channels (image input) of the trunk.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub embed_dim: usize,
    /// Spatial size of the pre-pooling map for vector inputs.
    pub map_height: usize,
    pub map_width: usize,
    /// Duplicate the final block so the two pooling branches see separate
    /// pathways.
    pub split_pathways: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input: InputShape::Vector { dim: 32 },
            hidden: vec![64, 64],
            leaky_slope: 0.1,
            embed_dim: 32,
            map_height: 2,
            map_width: 2,
            split_pathways: false,
        }
    }
}

impl ExtractorConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input.flat_len() == 0 {
            v.push("extractor input must be non-empty".to_string());
        }
        if self.embed_dim == 0 {
            v.push("embed_dim must be positive".to_string());
        }
        if self.hidden.contains(&0) {
            v.push("hidden widths must be positive".to_string());
        }
        if self.map_height * self.map_width == 0 {
            v.push("map_height and map_width must be positive".to_string());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            v.push("leaky_slope must be finite and >= 0".to_string());
        }
        v
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    stride: usize,
}

impl ConvGeom {
    fn out_h(&self) -> usize {
        (self.in_h - 1) / self.stride + 1
    }
    fn out_w(&self) -> usize {
        (self.in_w - 1) / self.stride + 1
    }
    fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Dense { w: usize, b: usize, inp: usize, out: usize },
    Conv { w: usize, b: usize, geom: ConvGeom },
    Leaky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub config: ExtractorConfig,
    params: Vec<Param>,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    bn_gamma: usize,
    bn_beta: usize,
    pub bn: BatchNormState,
    map_shape: (usize, usize, usize),
}

fn he_init(rng: &mut RngState, n: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.normal() * std).collect()
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut RngState,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Layer {
        let data = he_init(self.rng, out * inp, inp);
        let w = self.push(format!("{name}.weight"), vec![out, inp], data);
        let b = self.push(format!("{name}.bias"), vec![out], vec![0.0; out]);
        Layer::Dense { w, b, inp, out }
    }

    fn conv(&mut self, name: &str, geom: ConvGeom) -> Layer {
        let fan_in = geom.in_c * 9;
        let data = he_init(self.rng, geom.out_c * fan_in, fan_in);
        let w = self.push(format!("{name}.weight"), vec![geom.out_c, geom.in_c, 3, 3], data);
        let b = self.push(format!("{name}.bias"), vec![geom.out_c], vec![0.0; geom.out_c]);
        Layer::Conv { w, b, geom }
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Cached activations from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    trunk_inputs: Vec<Matrix>,
    head_inputs: Vec<Vec<Matrix>>,
    /// One `B × (d·h·w)` map matrix per pathway.
    pub maps: Vec<Matrix>,
    bn_xhat: Matrix,
    bn_inv_std: Vec<f64>,
    bn_out: Matrix,
    output: Matrix,
}

impl Extractor {
    pub fn new(config: ExtractorConfig, rng: &mut RngState) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(crate::Error::InvalidConfig(problems.join("; ")));
        }
        let mut b = Builder { params: Vec::new(), rng };
        let mut trunk = Vec::new();
        let d = config.embed_dim;
        let (heads, map_shape) = match config.input {
            InputShape::Vector { dim } => {
                let mut width = dim;
                for (i, &h) in config.hidden.iter().enumerate() {
                    trunk.push(b.dense(&format!("trunk.{i}"), width, h));
                    trunk.push(Layer::Leaky);
                    width = h;
                }
                let out = d * config.map_height * config.map_width;
                let paths = if config.split_pathways { 2 } else { 1 };
                let heads = (0..paths)
                    .map(|p| vec![b.dense(&format!("head.{p}"), width, out), Layer::Leaky])
                    .collect();
                (heads, (d, config.map_height, config.map_width))
            }
            InputShape::Image { channels, height, width } => {
                let (mut c, mut h, mut w) = (channels, height, width);
                for (i, &oc) in config.hidden.iter().enumerate() {
                    let geom = ConvGeom { in_c: c, in_h: h, in_w: w, out_c: oc, stride: 2 };
                    trunk.push(b.conv(&format!("trunk.{i}"), geom));
                    trunk.push(Layer::Leaky);
                    (c, h, w) = (oc, geom.out_h(), geom.out_w());
                }
                let geom = ConvGeom { in_c: c, in_h: h, in_w: w, out_c: d, stride: 1 };
                let paths = if config.split_pathways { 2 } else { 1 };
                let heads = (0..paths)
                    .map(|p| vec![b.conv(&format!("head.{p}"), geom), Layer::Leaky])
                    .collect();
                (heads, (d, geom.out_h(), geom.out_w()))
            }
        };
        let bn_gamma = b.push("bn.gamma".into(), vec![d], vec![1.0; d]);
        let bn_beta = b.push("bn.beta".into(), vec![d], vec![0.0; d]);
        Ok(Self {
            params: b.params,
            trunk,
            heads,
            bn_gamma,
            bn_beta,
            bn: BatchNormState { running_mean: vec![0.0; d], running_var: vec![1.0; d] },
            map_shape,
            config,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn map_shape(&self) -> (usize, usize, usize) {
        self.map_shape
    }

    pub fn pathways(&self) -> usize {
        self.heads.len()
    }

    fn layer_forward(&self, layer: &Layer, x: &Matrix) -> Matrix {
        let slope = self.config.leaky_slope;
        match *layer {
            Layer::Leaky => {
                let data = x.as_slice().iter().map(|&v| leaky(v, slope)).collect();
                Matrix::from_raw(x.rows(), x.cols(), data)
            }
            Layer::Dense { w, b, inp, out } => {
                let wt = &self.params[w].data;
                let bias = &self.params[b].data;
                let mut y = Matrix::zeros(x.rows(), out);
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let yr = y.row_mut(r);
                    for o in 0..out {
                        let wrow = &wt[o * inp..(o + 1) * inp];
                        yr[o] = bias[o] + crate::linalg::dot(wrow, xr);
                    }
                }
                y
            }
            Layer::Conv { w, b, geom } => {
                let wt = &self.params[w].data;
                let bias = &self.params[b].data;
                let mut y = Matrix::zeros(x.rows(), geom.out_len());
                for r in 0..x.rows() {
                    conv_forward(&geom, wt, bias, x.row(r), y.row_mut(r));
                }
                y
            }
        }
    }

    /// Returns the input gradient and accumulates parameter gradients.
    fn layer_backward(&self, layer: &Layer, x: &Matrix, gy: &Matrix, grads: &mut [Vec<f64>]) -> Matrix {
        let slope = self.config.leaky_slope;
        match *layer {
            Layer::Leaky => {
                let data = x
                    .as_slice()
                    .iter()
                    .zip(gy.as_slice())
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                Matrix::from_raw(x.rows(), x.cols(), data)
            }
            Layer::Dense { w, b, inp, out } => {
                let wt = &self.params[w].data;
                let mut gx = Matrix::zeros(x.rows(), inp);
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gyr = gy.row(r);
                    let gxr = gx.row_mut(r);
                    for o in 0..out {
                        let g = gyr[o];
                        if g == 0.0 {
                            continue;
                        }
                        grads[b][o] += g;
                        let gw = &mut grads[w][o * inp..(o + 1) * inp];
                        let wrow = &wt[o * inp..(o + 1) * inp];
                        for i in 0..inp {
                            gw[i] += g * xr[i];
                            gxr[i] += g * wrow[i];
                        }
                    }
                }
                gx
            }
            Layer::Conv { w, b, geom } => {
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                let (gw, gb) = split_two(grads, w, b);
                for r in 0..x.rows() {
                    conv_backward(&geom, &self.params[w].data, x.row(r), gy.row(r), gx.row_mut(r), gw, gb);
                }
                gx
            }
        }
    }

    /// Pre-pooling feature maps for each pathway.
    fn maps_forward(&self, x: &Matrix, mut cache: Option<(&mut Vec<Matrix>, &mut Vec<Vec<Matrix>>)>) -> Vec<Matrix> {
        let mut h = x.clone();
        for layer in &self.trunk {
            let next = self.layer_forward(layer, &h);
            if let Some((trunk_in, _)) = cache.as_mut() {
                trunk_in.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        self.heads
            .iter()
            .map(|head| {
                let mut z = h.clone();
                let mut inputs = Vec::new();
                for layer in head {
                    let next = self.layer_forward(layer, &z);
                    inputs.push(std::mem::replace(&mut z, next));
                }
                if let Some((_, head_in)) = cache.as_mut() {
                    head_in.push(inputs);
                }
                z
            })
            .collect()
    }

    pub fn to_feature_maps(&self, maps: &Matrix) -> Vec<FeatureMap> {
        let (c, h, w) = self.map_shape;
        (0..maps.rows())
            .map(|i| FeatureMap { channels: c, height: h, width: w, data: maps.row(i).to_vec() })
            .collect()
    }

    /// Training-mode forward up to the feature maps.
    pub fn forward_maps(&self, x: &Matrix) -> Result<(Vec<Matrix>, ForwardCacheBuilder)> {
        self.check_input(x)?;
        let mut trunk_inputs = Vec::new();
        let mut head_inputs = Vec::new();
        let maps = self.maps_forward(x, Some((&mut trunk_inputs, &mut head_inputs)));
        Ok((maps, ForwardCacheBuilder { trunk_inputs, head_inputs }))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input.flat_len() {
            return Err(invalid(format!(
                "extractor expects {} input features, got {}",
                self.config.input.flat_len(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Batch norm over the fused embeddings in training mode followed by
    /// LeakyReLU. Updates running statistics.
    pub fn bn_forward_train(&mut self, fused: &Matrix, builder: ForwardCacheBuilder, maps: Vec<Matrix>) -> ForwardCache {
        let (b, d) = fused.shape();
        let gamma = &self.params[self.bn_gamma].data;
        let beta = &self.params[self.bn_beta].data;
        let mut xhat = Matrix::zeros(b, d);
        let mut out = Matrix::zeros(b, d);
        let mut inv_std = vec![0.0; d];
        for k in 0..d {
            let mean = (0..b).map(|i| fused.get(i, k)).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (fused.get(i, k) - mean).powi(2)).sum::<f64>() / b as f64;
            inv_std[k] = 1.0 / (var + BN_EPS).sqrt();
            for i in 0..b {
                let xh = (fused.get(i, k) - mean) * inv_std[k];
                xhat.set(i, k, xh);
                out.set(i, k, gamma[k] * xh + beta[k]);
            }
            let unbiased = if b > 1 { var * b as f64 / (b - 1) as f64 } else { var };
            self.bn.running_mean[k] = (1.0 - BN_MOMENTUM) * self.bn.running_mean[k] + BN_MOMENTUM * mean;
            self.bn.running_var[k] = (1.0 - BN_MOMENTUM) * self.bn.running_var[k] + BN_MOMENTUM * unbiased;
        }
        let slope = self.config.leaky_slope;
        let bn_out = out.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = leaky(*v, slope));
        ForwardCache {
            trunk_inputs: builder.trunk_inputs,
            head_inputs: builder.head_inputs,
            maps,
            bn_xhat: xhat,
            bn_inv_std: inv_std,
            bn_out,
            output: out,
        }
    }

    /// Gradient of the embedding-layer output back to the fused features.
    pub fn bn_backward(&self, cache: &ForwardCache, grad_out: &Matrix, grads: &mut [Vec<f64>]) -> Matrix {
        let (b, d) = grad_out.shape();
        let slope = self.config.leaky_slope;
        let gamma = &self.params[self.bn_gamma].data;
        let mut gx = Matrix::zeros(b, d);
        for k in 0..d {
            let gy: Vec<f64> = (0..b)
                .map(|i| {
                    let g = grad_out.get(i, k);
                    if cache.bn_out.get(i, k) > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                })
                .collect();
            let sum_g: f64 = gy.iter().sum();
            let sum_gx: f64 = gy.iter().enumerate().map(|(i, g)| g * cache.bn_xhat.get(i, k)).sum();
            grads[self.bn_beta][k] += sum_g;
            grads[self.bn_gamma][k] += sum_gx;
            let n = b as f64;
            for i in 0..b {
                let xh = cache.bn_xhat.get(i, k);
                gx.set(i, k, gamma[k] * cache.bn_inv_std[k] / n * (n * gy[i] - sum_g - xh * sum_gx));
            }
        }
        gx
    }

    /// Backprop from per-pathway map gradients into the parameters.
    pub fn maps_backward(&self, cache: &ForwardCache, grad_maps: &[Matrix], grads: &mut [Vec<f64>]) {
        let mut g_trunk: Option<Matrix> = None;
        for (p, head) in self.heads.iter().enumerate() {
            let mut g = grad_maps[p].clone();
            for (layer, x) in head.iter().zip(&cache.head_inputs[p]).rev() {
                g = self.layer_backward(layer, x, &g, grads);
            }
            match g_trunk.as_mut() {
                Some(acc) => acc.axpy(1.0, &g),
                None => g_trunk = Some(g),
            }
        }
        let mut g = g_trunk.expect("at least one pathway");
        for (layer, x) in self.trunk.iter().zip(&cache.trunk_inputs).rev() {
            g = self.layer_backward(layer, x, &g, grads);
        }
    }

    /// Inference-mode embeddings: pooling, fusion, frozen batch-norm
    /// statistics, LeakyReLU.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let maps = self.maps_forward(x, None);
        let fused = self.pool_and_fuse(&maps)?;
        let gamma = &self.params[self.bn_gamma].data;
        let beta = &self.params[self.bn_beta].data;
        let slope = self.config.leaky_slope;
        let mut out = fused;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for k in 0..row.len() {
                let xh = (row[k] - self.bn.running_mean[k]) / (self.bn.running_var[k] + BN_EPS).sqrt();
                row[k] = leaky(gamma[k] * xh + beta[k], slope);
            }
        }
        if !out.is_finite() {
            return Err(invalid("embedding produced non-finite values"));
        }
        Ok(out)
    }

    fn pool_and_fuse(&self, maps: &[Matrix]) -> Result<Matrix> {
        let ap_maps = self.to_feature_maps(&maps[0]);
        let mp_maps = self.to_feature_maps(maps.last().expect("pathway"));
        let d = self.embed_dim();
        let mut fused = Matrix::zeros(ap_maps.len(), d);
        for (i, (a, m)) in ap_maps.iter().zip(&mp_maps).enumerate() {
            let v = fuse(avg_pool(a).as_slice(), max_pool(m).0.as_slice())?;
            fused.row_mut(i).copy_from_slice(&v);
        }
        Ok(fused)
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }
}

/// Trunk and head activations recorded before the pooling head runs.
#[derive(Debug, Clone)]
pub struct ForwardCacheBuilder {
    trunk_inputs: Vec<Matrix>,
    head_inputs: Vec<Vec<Matrix>>,
}

impl ForwardCache {
    /// Training-mode embeddings (batch norm + LeakyReLU output).
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

fn split_two(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn conv_forward(g: &ConvGeom, w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oc in 0..g.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..g.in_c {
                    for ky in 0..3 {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let xi = (ic * g.in_h + iy as usize) * g.in_w + ix as usize;
                            acc += w[((oc * g.in_c + ic) * 3 + ky) * 3 + kx] * x[xi];
                        }
                    }
                }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

fn conv_backward(g: &ConvGeom, w: &[f64], x: &[f64], gy: &[f64], gx: &mut [f64], gw: &mut [f64], gb: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oc in 0..g.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gy[(oc * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                gb[oc] += go;
                for ic in 0..g.in_c {
                    for ky in 0..3 {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let xi = (ic * g.in_h + iy as usize) * g.in_w + ix as usize;
                            let wi = ((oc * g.in_c + ic) * 3 + ky) * 3 + kx;
                            gw[wi] += go * x[xi];
                            gx[xi] += go * w[wi];
                        }
                    }
                }
            }
        }
    }
}

/// Extractor plus the center bank: every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: Extractor,
    pub bank: CenterBank,
}

/// Standard deviation of the initial center entries.
pub const CENTER_INIT_STD: f64 = 0.1;

impl Model {
    pub fn new(config: ExtractorConfig, num_classes: usize, rng: &mut RngState) -> Result<Self> {
        if num_classes == 0 {
            return Err(crate::Error::InvalidConfig("num_classes must be positive".into()));
        }
        let extractor = Extractor::new(config, rng)?;
        let d = extractor.embed_dim();
        let w = (0..d * num_classes).map(|_| rng.normal() * CENTER_INIT_STD).collect();
        let bank = CenterBank::new(Matrix::new(d, num_classes, w)?);
        Ok(Self { extractor, bank })
    }

    /// Names of every trainable tensor, centers last.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.extractor.params().iter().map(|p| p.name.clone()).collect();
        names.push("centers".into());
        names
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            self.extractor.params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
        out.push(self.bank.weights.as_mut_slice());
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.extractor.params.iter().map(|p| p.data.as_slice()).collect();
        out.push(self.bank.weights.as_slice());
        out
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.param_slices().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;

    fn tiny(input: InputShape, split: bool) -> Extractor {
        let cfg = ExtractorConfig {
            input,
            hidden: vec![5, 4],
            embed_dim: 3,
            map_height: 2,
            map_width: 2,
            split_pathways: split,
            ..Default::default()
        };
        Extractor::new(cfg, &mut RngState::new(7)).unwrap()
    }

    /// Training-mode scalar objective: a fixed linear read-out of the
    /// embedding layer output.
    fn objective(ext: &Extractor, x: &Matrix, proj: &Matrix) -> f64 {
        let mut e = ext.clone();
        let (maps, builder) = e.forward_maps(x).unwrap();
        let fused = e.pool_and_fuse(&maps).unwrap();
        let cache = e.bn_forward_train(&fused, builder, maps);
        cache.output().as_slice().iter().zip(proj.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn analytic_grads(ext: &Extractor, x: &Matrix, proj: &Matrix) -> Vec<Vec<f64>> {
        let mut e = ext.clone();
        let (maps, builder) = e.forward_maps(x).unwrap();
        let ap = e.to_feature_maps(&maps[0]);
        let mp = e.to_feature_maps(maps.last().unwrap());
        let labels: Vec<usize> = (0..x.rows()).map(|i| i % 2).collect();
        let head = crate::pooling::head_forward(&ap, &mp, &labels, 0.3).unwrap();
        let cache = e.bn_forward_train(&head.fused.features, builder, maps);
        let mut grads = e.zero_grads();
        let g_fused = e.bn_backward(&cache, proj, &mut grads);
        let (gap, gmp) = head.backward(0.0, Some(&g_fused));
        let flat = |v: Vec<FeatureMap>| {
            let cols = v[0].data.len();
            Matrix::new(v.len(), cols, v.into_iter().flat_map(|m| m.data).collect()).unwrap()
        };
        let grad_maps = if e.pathways() == 2 {
            vec![flat(gap), flat(gmp)]
        } else {
            let mut a = flat(gap);
            a.axpy(1.0, &flat(gmp));
            vec![a]
        };
        e.maps_backward(&cache, &grad_maps, &mut grads);
        grads
    }

    fn check(input: InputShape, split: bool) {
        let ext = tiny(input, split);
        let mut rng = RngState::new(8);
        let n = input.flat_len();
        let x = Matrix::new(4, n, (0..4 * n).map(|_| rng.normal()).collect()).unwrap();
        let proj = Matrix::new(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let grads = analytic_grads(&ext, &x, &proj);
        for (pi, p) in ext.params().iter().enumerate() {
            let base = Matrix::new(1, p.data.len(), p.data.clone()).unwrap();
            let numeric = crate::gradcheck::central_diff(&base, 1e-5, |m| {
                let mut e = ext.clone();
                e.params_mut()[pi].data.copy_from_slice(m.as_slice());
                objective(&e, &x, &proj)
            });
            let analytic = Matrix::new(1, p.data.len(), grads[pi].clone()).unwrap();
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{} rel err {err}", p.name);
        }
    }

    #[test]
    fn dense_backprop_matches_finite_differences() {
        check(InputShape::Vector { dim: 6 }, false);
    }

    #[test]
    fn split_pathway_backprop_matches_finite_differences() {
        check(InputShape::Vector { dim: 6 }, true);
    }

    #[test]
    fn conv_backprop_matches_finite_differences() {
        check(InputShape::Image { channels: 2, height: 5, width: 4 }, false);
    }

    #[test]
    fn conv_shapes() {
        let ext = tiny(InputShape::Image { channels: 1, height: 8, width: 6 }, false);
        // two stride-2 blocks: 8x6 -> 4x3 -> 2x2, final block keeps 2x2
        assert_eq!(ext.map_shape(), (3, 2, 2));
        let x = Matrix::zeros(2, 48);
        assert_eq!(ext.embed(&x).unwrap().shape(), (2, 3));
        assert!(ext.embed(&Matrix::zeros(2, 47)).is_err());
    }

    #[test]
    fn model_parameter_layout() {
        let model = Model::new(ExtractorConfig::default(), 10, &mut RngState::new(1)).unwrap();
        let names = model.param_names();
        assert_eq!(names.last().unwrap(), "centers");
        assert_eq!(names.len(), model.param_slices().len());
        assert_eq!(model.bank.weights.shape(), (32, 10));
    }
}
