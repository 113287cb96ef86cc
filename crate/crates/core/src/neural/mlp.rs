//! Fully connected network with SELU hidden layers and a linear output.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::fmt17;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

const FORMAT_HEADER: &str = "ppa-deephedge-mlp v1";

/// Rows per block in batched evaluation. Blocks are fixed, so results do not
/// depend on the thread count.
const ROW_BLOCK: usize = 4096;

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_prime(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Affine layer `y = x W + b` with `W` of shape `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Weight(usize, usize),
    Bias(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Network with all parameters zero. `dims` lists the input width, the
    /// hidden widths and the output width.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("layer_dims", format!("invalid dimensions {dims:?}")));
        }
        Ok(Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// LeCun-normal weights (variance `1 / fan_in`) and zero biases.
    pub fn lecun_normal(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let normal = Normal::new(0.0, (1.0 / layer.weight.nrows() as f64).sqrt())
                .expect("positive standard deviation");
            layer.weight.mapv_inplace(|_| normal.sample(&mut rng));
        }
        Ok(net)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.nrows()];
        d.extend(self.layers.iter().map(|l| l.weight.ncols()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, Slot) {
        for (i, layer) in self.layers.iter().enumerate() {
            let nw = layer.weight.len();
            if index < nw {
                let cols = layer.weight.ncols();
                return (i, Slot::Weight(index / cols, index % cols));
            }
            index -= nw;
            if index < layer.bias.len() {
                return (i, Slot::Bias(index));
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `index` in the order weights-then-bias, layer by layer,
    /// row-major within a tensor.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let (i, slot) = self.locate(index);
        let layer = &mut self.layers[i];
        match slot {
            Slot::Weight(r, c) => &mut layer.weight[[r, c]],
            Slot::Bias(j) => &mut layer.bias[j],
        }
    }

    pub fn param(&self, index: usize) -> f64 {
        let (i, slot) = self.locate(index);
        let layer = &self.layers[i];
        match slot {
            Slot::Weight(r, c) => layer.weight[[r, c]],
            Slot::Bias(j) => layer.bias[j],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Output for a single input row.
    pub fn forward_one(&self, x: &[f64]) -> f64 {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous input");
        self.forward_block(row)[0]
    }

    fn forward_block(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(selu);
            }
            a = z;
        }
        a.column(0).to_owned()
    }

    /// Outputs for every row of `x` (first output unit).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let n = x.nrows();
        let blocks: Vec<Array1<f64>> = (0..n.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let hi = ((b + 1) * ROW_BLOCK).min(n);
                self.forward_block(x.slice(s![b * ROW_BLOCK..hi, ..]))
            })
            .collect();
        let mut out = Array1::zeros(n);
        for (b, block) in blocks.into_iter().enumerate() {
            out.slice_mut(s![b * ROW_BLOCK..b * ROW_BLOCK + block.len()]).assign(&block);
        }
        out
    }

    /// Forward pass keeping what [`Mlp::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array1<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(a);
            if i < last {
                a = z.mapv(selu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        (a.column(0).to_owned(), ForwardCache { inputs, pre })
    }

    /// Signs of every hidden pre-activation over the rows of `x`; two
    /// networks with equal patterns lie on the same smooth piece of SELU.
    pub fn sign_pattern(&self, x: ArrayView2<'_, f64>) -> Vec<bool> {
        let (_, cache) = self.forward_cached(x);
        cache.pre.iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect()
    }

    /// Parameter gradients given `∂L/∂output` per row, returned as a
    /// network of the same shape.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView1<'_, f64>) -> Mlp {
        let n_layers = self.layers.len();
        let rows = upstream.len();
        let mut delta = Array2::zeros((rows, self.layers[n_layers - 1].weight.ncols()));
        delta.column_mut(0).assign(&upstream);
        let mut grads: Vec<Dense> = Vec::with_capacity(n_layers);
        for i in (0..n_layers).rev() {
            let input = &cache.inputs[i];
            let weight = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight.t());
                Zip::from(&mut back)
                    .and(&cache.pre[i - 1])
                    .for_each(|d, &z| *d *= selu_prime(z));
                delta = back;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    /// Gradients of `Σ_r upstream[r] · net(x[r])` accumulated over fixed row
    /// blocks in block order.
    pub fn gradient(&self, x: ArrayView2<'_, f64>, upstream: ArrayView1<'_, f64>) -> Mlp {
        let n = x.nrows();
        let parts: Vec<Mlp> = (0..n.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let hi = ((b + 1) * ROW_BLOCK).min(n);
                let (_, cache) = self.forward_cached(x.slice(s![b * ROW_BLOCK..hi, ..]));
                self.backward(&cache, upstream.slice(s![b * ROW_BLOCK..hi]))
            })
            .collect();
        let mut total = Mlp::zeros(&self.dims()).expect("valid dims");
        for part in parts {
            total.add_assign(&part);
        }
        total
    }

    fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Versioned text serialisation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        for (i, layer) in self.layers.iter().enumerate() {
            let (r, c) = layer.weight.dim();
            write!(out, "W{i} {r}x{c}").unwrap();
            for v in layer.weight.iter() {
                write!(out, " {}", fmt17(*v)).unwrap();
            }
            writeln!(out).unwrap();
            write!(out, "b{i} {}", layer.bias.len()).unwrap();
            for v in layer.bias.iter() {
                write!(out, " {}", fmt17(*v)).unwrap();
            }
            writeln!(out).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::WeightFormat(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        if lines.next().map(str::trim) != Some(FORMAT_HEADER) {
            return Err(bad(format!("missing header `{FORMAT_HEADER}`")));
        }
        let dims_line = lines.next().ok_or_else(|| bad("missing dims line".into()))?;
        let mut it = dims_line.split_whitespace();
        if it.next() != Some("dims") {
            return Err(bad("expected `dims` line".into()));
        }
        let dims: Vec<usize> = it
            .map(|t| t.parse().map_err(|_| bad(format!("bad dimension `{t}`"))))
            .collect::<Result<_>>()?;
        let mut net = Mlp::zeros(&dims).map_err(|e| bad(e.to_string()))?;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (r, c) = layer.weight.dim();
            let w = parse_tensor(lines.next(), &format!("W{i}"), &format!("{r}x{c}"), r * c)?;
            layer.weight = Array2::from_shape_vec((r, c), w).expect("length checked");
            let b = parse_tensor(lines.next(), &format!("b{i}"), &c.to_string(), c)?;
            layer.bias = Array1::from(b);
        }
        if let Some(extra) = lines.next() {
            return Err(bad(format!("unexpected trailing line `{}`", extra.chars().take(40).collect::<String>())));
        }
        Ok(net)
    }
}

fn parse_tensor(line: Option<&str>, name: &str, shape: &str, len: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))?;
    let mut it = line.split_whitespace();
    if it.next() != Some(name) {
        return Err(Error::WeightFormat(format!("expected tensor {name}")));
    }
    let got_shape = it.next().unwrap_or("");
    if got_shape != shape {
        return Err(Error::WeightFormat(format!(
            "tensor {name} has shape {got_shape}, expected {shape}"
        )));
    }
    let values: Vec<f64> = it
        .map(|t| {
            t.parse()
                .map_err(|_| Error::WeightFormat(format!("bad value `{t}` in {name}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != len {
        return Err(Error::WeightFormat(format!(
            "tensor {name} has {} values, expected {len}",
            values.len()
        )));
    }
    Ok(values)
}
