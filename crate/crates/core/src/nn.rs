//! Small convolutional Q-network with hand-written backpropagation.
//!
//! Tensors are per-sample `(C, D, H, W)` blocks, batch-major in memory. A
//! 2-D image is a volume with `D = 1` and depth-1 kernels.
//!
//! Stored parameters are always float32-representable so that the params
//! file round-trips bit-exactly; arithmetic is carried out in f64.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VregError};
use crate::volume::Observation;

const BN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"VPOL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Stride-1 convolution with "same" zero padding; kernel is `(kd, kh, kw)`.
    Conv {
        out_channels: usize,
        kernel: [usize; 3],
    },
    BatchNorm,
    Relu,
    /// Non-overlapping max pooling, window `(pd, ph, pw)`.
    MaxPool {
        size: [usize; 3],
    },
    /// Fully connected; flattens its input.
    Dense {
        out: usize,
    },
}

/// Architecture descriptor: input shape `(C, D, H, W)` and layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
}

fn conv_block(out: usize, is_2d: bool, batch_norm: bool, pool: bool) -> Vec<LayerSpec> {
    let kernel = if is_2d { [1, 3, 3] } else { [3, 3, 3] };
    let mut v = vec![LayerSpec::Conv {
        out_channels: out,
        kernel,
    }];
    if batch_norm {
        v.push(LayerSpec::BatchNorm);
    }
    v.push(LayerSpec::Relu);
    if pool {
        v.push(LayerSpec::MaxPool {
            size: if is_2d { [1, 2, 2] } else { [2, 2, 2] },
        });
    }
    v
}

impl ArchSpec {
    /// Input shape for a volume of dims `[nx, ny, nz]`.
    pub fn input_for(dims: [usize; 3]) -> [usize; 4] {
        [1, dims[2], dims[1], dims[0]]
    }

    fn stack(
        dims: [usize; 3],
        channels: &[usize],
        fc: &[usize],
        arity: usize,
        batch_norm: bool,
    ) -> Self {
        let is_2d = dims[2] == 1;
        let mut layers = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            layers.extend(conv_block(c, is_2d, batch_norm, i < 2));
        }
        for &n in fc {
            layers.push(LayerSpec::Dense { out: n });
            if batch_norm {
                layers.push(LayerSpec::BatchNorm);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { out: arity });
        ArchSpec {
            input: Self::input_for(dims),
            layers,
        }
    }

    /// Desk-scale network: conv 4, 8, 16 then dense 64 and the output layer.
    pub fn desk(dims: [usize; 3], arity: usize, batch_norm: bool) -> Self {
        Self::stack(dims, &[4, 8, 16], &[64], arity, batch_norm)
    }

    /// Full-size network: conv 8, 32, 32, 128, 128 then dense 512, 512, 64.
    pub fn full(dims: [usize; 3], arity: usize) -> Self {
        Self::stack(dims, &[8, 32, 32, 128, 128], &[512, 512, 64], arity, true)
    }

    /// Single dense layer `y = W d + b`.
    pub fn linear(dims: [usize; 3], arity: usize) -> Self {
        ArchSpec {
            input: Self::input_for(dims),
            layers: vec![LayerSpec::Dense { out: arity }],
        }
    }

    /// Per-layer input shapes followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 4]>> {
        let mut shapes = vec![self.input];
        let mut s = self.input;
        if s.iter().any(|&d| d == 0) {
            return Err(VregError::Config(format!("empty input shape {s:?}")));
        }
        for layer in &self.layers {
            s = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    if out_channels == 0 || kernel.iter().any(|k| k % 2 == 0) {
                        return Err(VregError::Config(format!(
                            "conv needs odd kernels and channels > 0, got {kernel:?}/{out_channels}"
                        )));
                    }
                    [out_channels, s[1], s[2], s[3]]
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => s,
                LayerSpec::MaxPool { size } => {
                    let out = [s[0], s[1] / size[0], s[2] / size[1], s[3] / size[2]];
                    if size.contains(&0) || out.contains(&0) {
                        return Err(VregError::Config(format!(
                            "pool {size:?} too large for {s:?}"
                        )));
                    }
                    out
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(VregError::Config("dense layer with zero outputs".into()));
                    }
                    [out, 1, 1, 1]
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn arity(&self) -> Result<usize> {
        Ok(numel(self.shapes()?.last().expect("nonempty")))
    }
}

fn numel(s: &[usize; 4]) -> usize {
    s.iter().product()
}

/// Whether batch normalisation uses batch statistics or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Gradient (or optimiser state) with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn sq_norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum()
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Pool(Vec<usize>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    n: usize,
    mode: NormMode,
    inputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchSpec,
    shapes: Vec<[usize; 4]>,
    tensors: Vec<Vec<f64>>,
    learnable: Vec<bool>,
    first_tensor: Vec<usize>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Network {
    /// All weights zero, normalisation identity.
    pub fn zeros(spec: ArchSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut tensors = Vec::new();
        let mut learnable = Vec::new();
        let mut first_tensor = Vec::new();
        for (l, layer) in spec.layers.iter().enumerate() {
            first_tensor.push(tensors.len());
            let s = shapes[l];
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    tensors.push(vec![
                        0.0;
                        out_channels * s[0] * kernel.iter().product::<usize>()
                    ]);
                    tensors.push(vec![0.0; out_channels]);
                    learnable.extend([true, true]);
                }
                LayerSpec::BatchNorm => {
                    let c = s[0];
                    tensors.push(vec![1.0; c]);
                    tensors.push(vec![0.0; c]);
                    tensors.push(vec![0.0; c]);
                    tensors.push(vec![1.0; c]);
                    learnable.extend([true, true, false, false]);
                }
                LayerSpec::Dense { out } => {
                    tensors.push(vec![0.0; out * numel(&s)]);
                    tensors.push(vec![0.0; out]);
                    learnable.extend([true, true]);
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
            }
        }
        Ok(Network {
            spec,
            shapes,
            tensors,
            learnable,
            first_tensor,
        })
    }

    /// He-uniform weights (`±√(6 / fan_in)`), zero biases.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, layer) in net.spec.layers.clone().iter().enumerate() {
            let s = net.shapes[l];
            let fan_in = match *layer {
                LayerSpec::Conv { kernel, .. } => s[0] * kernel.iter().product::<usize>(),
                LayerSpec::Dense { .. } => numel(&s),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = &mut net.tensors[net.first_tensor[l]];
            for x in w.iter_mut() {
                *x = round_f32(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn arity(&self) -> usize {
        numel(self.shapes.last().expect("nonempty"))
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.spec.input
    }

    pub fn input_len(&self) -> usize {
        numel(&self.spec.input)
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn is_learnable(&self, tensor: usize) -> bool {
        self.learnable[tensor]
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    /// Index of the output layer's bias tensor.
    pub fn output_bias_index(&self) -> Option<usize> {
        match self.spec.layers.last()? {
            LayerSpec::Dense { .. } => Some(self.tensors.len() - 1),
            _ => None,
        }
    }

    /// Re-rounds every stored value to float32 precision.
    pub fn quantize(&mut self) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x = round_f32(*x);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    /// Flattens an observation in `(D, H, W)` order after checking its shape.
    pub fn observation_input(&self, obs: &Observation) -> Result<Vec<f64>> {
        let want = self.spec.input;
        let got = ArchSpec::input_for(obs.dims());
        if want != got {
            return Err(VregError::ShapeMismatch(format!(
                "network expects {want:?}, observation is {got:?}"
            )));
        }
        // Volume data is x-fastest, which is exactly (D, H, W) row-major.
        Ok(obs.data().to_vec())
    }

    /// Inference on one observation.
    pub fn predict(&self, obs: &Observation) -> Result<Vec<f64>> {
        let x = self.observation_input(obs)?;
        Ok(self.forward(&x, 1, NormMode::Running)?.0)
    }

    /// Forward pass on `n` stacked inputs.
    pub fn forward(&self, input: &[f64], n: usize, mode: NormMode) -> Result<(Vec<f64>, Cache)> {
        if n == 0 || input.len() != n * self.input_len() {
            return Err(VregError::ShapeMismatch(format!(
                "expected {} x {} inputs, got {}",
                n,
                self.input_len(),
                input.len()
            )));
        }
        let mut cache = Cache {
            n,
            mode,
            inputs: Vec::with_capacity(self.spec.layers.len()),
            aux: Vec::with_capacity(self.spec.layers.len()),
        };
        let mut x = input.to_vec();
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let (si, so) = (self.shapes[l], self.shapes[l + 1]);
            let t0 = self.first_tensor[l];
            let (y, aux) = match *layer {
                LayerSpec::Conv { kernel, .. } => (
                    conv_forward(
                        &x,
                        n,
                        si,
                        so[0],
                        kernel,
                        &self.tensors[t0],
                        &self.tensors[t0 + 1],
                    ),
                    Aux::None,
                ),
                LayerSpec::BatchNorm => {
                    let p = &self.tensors[t0..t0 + 4];
                    norm_forward(&x, n, si, mode, &p[0], &p[1], &p[2], &p[3])
                }
                LayerSpec::Relu => (x.iter().map(|v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::MaxPool { size } => {
                    let (y, idx) = pool_forward(&x, n, si, so, size);
                    (y, Aux::Pool(idx))
                }
                LayerSpec::Dense { out } => (
                    dense_forward(
                        &x,
                        n,
                        numel(&si),
                        out,
                        &self.tensors[t0],
                        &self.tensors[t0 + 1],
                    ),
                    Aux::None,
                ),
            };
            cache.inputs.push(x);
            cache.aux.push(aux);
            x = y;
        }
        Ok((x, cache))
    }

    /// Backpropagates `grad_out` (same layout as the forward output).
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &Cache, grad_out: &[f64]) -> (Grads, Vec<f64>) {
        let n = cache.n;
        let mut grads = self.zero_grads();
        let mut g = grad_out.to_vec();
        for l in (0..self.spec.layers.len()).rev() {
            let (si, so) = (self.shapes[l], self.shapes[l + 1]);
            let t0 = self.first_tensor[l];
            let x = &cache.inputs[l];
            g = match self.spec.layers[l] {
                LayerSpec::Conv { kernel, .. } => {
                    let (gw, rest) = grads.0[t0..].split_at_mut(1);
                    conv_backward(
                        x,
                        &g,
                        n,
                        si,
                        so[0],
                        kernel,
                        &self.tensors[t0],
                        &mut gw[0],
                        &mut rest[0],
                    )
                }
                LayerSpec::BatchNorm => {
                    let Aux::Norm { xhat, inv_std, .. } = &cache.aux[l] else {
                        unreachable!("norm layer without norm cache")
                    };
                    let (gg, rest) = grads.0[t0..].split_at_mut(1);
                    norm_backward(
                        &g,
                        n,
                        si,
                        cache.mode,
                        xhat,
                        inv_std,
                        &self.tensors[t0],
                        &mut gg[0],
                        &mut rest[0],
                    )
                }
                LayerSpec::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect(),
                LayerSpec::MaxPool { .. } => {
                    let Aux::Pool(idx) = &cache.aux[l] else {
                        unreachable!("pool layer without indices")
                    };
                    let mut dx = vec![0.0; x.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        dx[i] += g[o];
                    }
                    dx
                }
                LayerSpec::Dense { out } => {
                    let (gw, rest) = grads.0[t0..].split_at_mut(1);
                    dense_backward(
                        x,
                        &g,
                        n,
                        numel(&si),
                        out,
                        &self.tensors[t0],
                        &mut gw[0],
                        &mut rest[0],
                    )
                }
            };
        }
        (grads, g)
    }

    /// Moves running statistics toward the batch statistics in `cache`.
    pub fn update_running_stats(&mut self, cache: &Cache, momentum: f64) {
        for (l, layer) in self.spec.layers.iter().enumerate() {
            if let (LayerSpec::BatchNorm, Aux::Norm { mean, var, .. }) = (layer, &cache.aux[l]) {
                let t0 = self.first_tensor[l];
                for c in 0..mean.len() {
                    let rm = &mut self.tensors[t0 + 2][c];
                    *rm = round_f32((1.0 - momentum) * *rm + momentum * mean[c]);
                    let rv = &mut self.tensors[t0 + 3][c];
                    *rv = round_f32((1.0 - momentum) * *rv + momentum * var[c]);
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&self.spec).expect("descriptor serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        for x in self.tensors.iter().flatten() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(VregError::format(path, "missing VPOL header"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let desc = bytes
            .get(8..8 + len)
            .ok_or_else(|| VregError::format(path, "truncated descriptor"))?;
        let spec: ArchSpec =
            serde_json::from_slice(desc).map_err(|e| VregError::format(path, e.to_string()))?;
        let mut net = Network::zeros(spec).map_err(|e| VregError::format(path, e.to_string()))?;
        let payload = &bytes[8 + len..];
        let total: usize = net.tensors.iter().map(Vec::len).sum();
        if payload.len() != 4 * total {
            return Err(VregError::format(
                path,
                format!(
                    "expected {} weight bytes, found {}",
                    4 * total,
                    payload.len()
                ),
            ));
        }
        let mut vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        for t in &mut net.tensors {
            for x in t.iter_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        if !net.all_finite() {
            return Err(VregError::format(path, "non-finite weights"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| VregError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| VregError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn conv_forward(
    x: &[f64],
    n: usize,
    si: [usize; 4],
    cout: usize,
    k: [usize; 3],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let [cin, d, h, wd] = si;
    let sp = d * h * wd;
    let mut y = vec![0.0; n * cout * sp];
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    for s in 0..n {
        let xs = &x[s * cin * sp..(s + 1) * cin * sp];
        let ys = &mut y[s * cout * sp..(s + 1) * cout * sp];
        for co in 0..cout {
            let yc = &mut ys[co * sp..(co + 1) * sp];
            yc.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                let xc = &xs[ci * sp..(ci + 1) * sp];
                for kz in 0..k[0] {
                    for ky in 0..k[1] {
                        for kx in 0..k[2] {
                            let wv = w[(((co * cin + ci) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (z0, z1) = valid_range(kz, pad[0], d);
                            let (y0, y1) = valid_range(ky, pad[1], h);
                            let (x0, x1) = valid_range(kx, pad[2], wd);
                            for z in z0..z1 {
                                let zi = z + kz - pad[0];
                                for yy in y0..y1 {
                                    let yi = yy + ky - pad[1];
                                    let orow = (z * h + yy) * wd;
                                    let irow = (zi * h + yi) * wd + kx;
                                    let out = &mut yc[orow + x0..orow + x1];
                                    let inp = &xc[irow + x0 - pad[2]..irow + x1 - pad[2]];
                                    for (o, i) in out.iter_mut().zip(inp) {
                                        *o += wv * i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Output positions `o` for which `o + k − pad` lies in `0..len`.
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    g: &[f64],
    n: usize,
    si: [usize; 4],
    cout: usize,
    k: [usize; 3],
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let [cin, d, h, wd] = si;
    let sp = d * h * wd;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut dx = vec![0.0; x.len()];
    for s in 0..n {
        let xs = &x[s * cin * sp..(s + 1) * cin * sp];
        let dxs = &mut dx[s * cin * sp..(s + 1) * cin * sp];
        let gs = &g[s * cout * sp..(s + 1) * cout * sp];
        for co in 0..cout {
            let gc = &gs[co * sp..(co + 1) * sp];
            gb[co] += gc.iter().sum::<f64>();
            for ci in 0..cin {
                let xc = &xs[ci * sp..(ci + 1) * sp];
                let dxc = &mut dxs[ci * sp..(ci + 1) * sp];
                for kz in 0..k[0] {
                    for ky in 0..k[1] {
                        for kx in 0..k[2] {
                            let wi = (((co * cin + ci) * k[0] + kz) * k[1] + ky) * k[2] + kx;
                            let wv = w[wi];
                            let (z0, z1) = valid_range(kz, pad[0], d);
                            let (y0, y1) = valid_range(ky, pad[1], h);
                            let (x0, x1) = valid_range(kx, pad[2], wd);
                            let mut acc = 0.0;
                            for z in z0..z1 {
                                let zi = z + kz - pad[0];
                                for yy in y0..y1 {
                                    let yi = yy + ky - pad[1];
                                    let orow = (z * h + yy) * wd;
                                    let irow = (zi * h + yi) * wd + kx;
                                    for xx in x0..x1 {
                                        let go = gc[orow + xx];
                                        acc += go * xc[irow + xx - pad[2]];
                                        dxc[irow + xx - pad[2]] += wv * go;
                                    }
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn norm_forward(
    x: &[f64],
    n: usize,
    si: [usize; 4],
    mode: NormMode,
    gamma: &[f64],
    beta: &[f64],
    rmean: &[f64],
    rvar: &[f64],
) -> (Vec<f64>, Aux) {
    let c = si[0];
    let sp = si[1] * si[2] * si[3];
    let m = (n * sp) as f64;
    let (mean, var) = match mode {
        NormMode::Batch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|s| &x[(s * c + ch) * sp..(s * c + ch + 1) * sp]);
                mean[ch] = vals.clone().sum::<f64>() / m;
                var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
            }
            (mean, var)
        }
        NormMode::Running => (rmean.to_vec(), rvar.to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * sp..(s * c + ch + 1) * sp {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (
        y,
        Aux::Norm {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn norm_backward(
    g: &[f64],
    n: usize,
    si: [usize; 4],
    mode: NormMode,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) -> Vec<f64> {
    let c = si[0];
    let sp = si[1] * si[2] * si[3];
    let m = (n * sp) as f64;
    let mut dx = vec![0.0; g.len()];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| (s * c + ch) * sp..(s * c + ch + 1) * sp);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in idx() {
            sum_g += g[i];
            sum_gx += g[i] * xhat[i];
        }
        ggamma[ch] += sum_gx;
        gbeta[ch] += sum_g;
        let scale = gamma[ch] * inv_std[ch];
        match mode {
            NormMode::Running => {
                for i in idx() {
                    dx[i] = g[i] * scale;
                }
            }
            NormMode::Batch => {
                for i in idx() {
                    dx[i] = scale * (g[i] - sum_g / m - xhat[i] * sum_gx / m);
                }
            }
        }
    }
    dx
}

fn pool_forward(
    x: &[f64],
    n: usize,
    si: [usize; 4],
    so: [usize; 4],
    size: [usize; 3],
) -> (Vec<f64>, Vec<usize>) {
    let [c, d, h, w] = si;
    let [_, od, oh, ow] = so;
    let mut y = Vec::with_capacity(n * numel(&so));
    let mut idx = Vec::with_capacity(n * numel(&so));
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * d * h * w;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dz in 0..size[0] {
                            for dy in 0..size[1] {
                                for dx in 0..size[2] {
                                    let i = base
                                        + ((z * size[0] + dz) * h + yy * size[1] + dy) * w
                                        + xx * size[2]
                                        + dx;
                                    if x[i] > best {
                                        best = x[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        idx.push(bi);
                    }
                }
            }
        }
    }
    (y, idx)
}

fn dense_forward(x: &[f64], n: usize, nin: usize, nout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * nout);
    for s in 0..n {
        let xs = &x[s * nin..(s + 1) * nin];
        for o in 0..nout {
            let row = &w[o * nin..(o + 1) * nin];
            y.push(b[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    g: &[f64],
    n: usize,
    nin: usize,
    nout: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * nin];
    for s in 0..n {
        let xs = &x[s * nin..(s + 1) * nin];
        let dxs = &mut dx[s * nin..(s + 1) * nin];
        for o in 0..nout {
            let go = g[s * nout + o];
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            let row = &w[o * nin..(o + 1) * nin];
            let grow = &mut gw[o * nin..(o + 1) * nin];
            for i in 0..nin {
                grow[i] += go * xs[i];
                dxs[i] += go * row[i];
            }
        }
    }
    dx
}

/// RMSprop without momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    cache: Grads,
}

impl RmsProp {
    pub fn new(net: &Network, rho: f64, eps: f64) -> Self {
        RmsProp {
            rho,
            eps,
            cache: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64) {
        for (t, g) in grads.0.iter().enumerate() {
            if !net.is_learnable(t) {
                continue;
            }
            let s = &mut self.cache.0[t];
            let w = &mut net.tensors_mut()[t];
            for i in 0..g.len() {
                s[i] = self.rho * s[i] + (1.0 - self.rho) * g[i] * g[i];
                w[i] = round_f32(w[i] - lr * g[i] / (s[i].sqrt() + self.eps));
            }
        }
    }
}

impl Network {
    /// Side of every non-differentiable point taken by a forward pass:
    /// ReLU input signs and max-pool winners.
    fn branches(&self, cache: &Cache) -> Vec<usize> {
        let mut out = Vec::new();
        for (l, layer) in self.spec.layers.iter().enumerate() {
            match (layer, &cache.aux[l]) {
                (LayerSpec::Relu, _) => {
                    out.extend(cache.inputs[l].iter().map(|v| (*v > 0.0) as usize))
                }
                (_, Aux::Pool(idx)) => out.extend_from_slice(idx),
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose ±h passes crossed a ReLU or max-pool switch, where
    /// central differences do not estimate the derivative.
    pub skipped_kinks: usize,
}

/// Compares analytic and central-difference gradients of `Σ c·y` for random
/// `c`, over up to `per_tensor` entries of every learnable tensor and of the
/// input.
pub fn gradient_check(
    net: &Network,
    input: &[f64],
    n: usize,
    mode: NormMode,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, cache) = net.forward(input, n, mode)?;
    let base = net.branches(&cache);
    let c: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |net: &Network, x: &[f64]| -> Result<(f64, bool)> {
        let (y, cache) = net.forward(x, n, mode)?;
        let smooth = net.branches(&cache) == base;
        Ok((y.iter().zip(&c).map(|(a, b)| a * b).sum(), smooth))
    };
    let (grads, dx) = net.backward(&cache, &c);
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |analytic: f64, up: (f64, bool), down: (f64, bool)| {
        if up.1 && down.1 {
            report.checked += 1;
            report.max_rel_error = report
                .max_rel_error
                .max(rel(analytic, (up.0 - down.0) / (2.0 * H)));
        } else {
            report.skipped_kinks += 1;
        }
    };
    let mut probe = net.clone();
    for t in 0..net.tensors.len() {
        if !net.learnable[t] {
            continue;
        }
        let len = net.tensors[t].len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.random_range(0..len);
            let w = net.tensors[t][i];
            probe.tensors[t][i] = w + H;
            let up = objective(&probe, input)?;
            probe.tensors[t][i] = w - H;
            let down = objective(&probe, input)?;
            probe.tensors[t][i] = w;
            record(grads.0[t][i], up, down);
        }
    }
    let mut x = input.to_vec();
    for _ in 0..per_tensor.min(x.len()) {
        let i = rng.random_range(0..x.len());
        let v = x[i];
        x[i] = v + H;
        let up = objective(net, &x)?;
        x[i] = v - H;
        let down = objective(net, &x)?;
        x[i] = v;
        record(dx[i], up, down);
    }
    Ok(report)
}
