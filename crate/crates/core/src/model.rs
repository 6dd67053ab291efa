//! Feedforward softmax classifier with tanh hidden layers, plus exact
//! input-output Jacobian extraction and Gaussian input-noise injection.
//!
//! tanh is the fixed hidden activation: it is smooth everywhere, so
//! second-order gradients and the Taylor-order checks in the verification
//! suite are well defined at every point.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numcore::{self, Graph, NodeId, Tensor};

const CHECKPOINT_TAG: &str = "mlp-checkpoint-v1";

/// Classifier parameters: per-layer weight matrices and bias vectors.
/// `dims = [n, h1, ..., m]` with m ≥ 2 output classes.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for one bound copy of the parameters.
pub struct ModelBinding {
    weight_ids: Vec<NodeId>,
    bias_ids: Vec<NodeId>,
}

impl MlpClassifier {
    /// Fresh model with per-layer uniform init in ±√(6/(fan_in + fan_out)).
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::validate_dims(dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::matrix(fan_out, fan_in, w)?);
            biases.push(Tensor::vector(vec![0.0; fan_out])?);
        }
        Ok(MlpClassifier {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Model from an explicit flat parameter vector (layer-major, weights
    /// row-major then bias, per layer).
    pub fn from_params(dims: &[usize], flat: &[f64]) -> Result<Self> {
        Self::validate_dims(dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut pos = 0;
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let wn = fan_in * fan_out;
            if pos + wn + fan_out > flat.len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter vector too short for dims {dims:?}"
                )));
            }
            weights.push(Tensor::matrix(
                fan_out,
                fan_in,
                flat[pos..pos + wn].to_vec(),
            )?);
            pos += wn;
            biases.push(Tensor::vector(flat[pos..pos + fan_out].to_vec())?);
            pos += fan_out;
        }
        if pos != flat.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has {} entries, dims {dims:?} expect {pos}",
                flat.len()
            )));
        }
        Ok(MlpClassifier {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    fn validate_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero layer width in {dims:?}"
            )));
        }
        if dims[dims.len() - 1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 output classes, got {}",
                dims[dims.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn class_count(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Θ as a flat vector, in the layout `from_params` expects.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b.values());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let rebuilt = Self::from_params(&self.dims, flat)?;
        self.weights = rebuilt.weights;
        self.biases = rebuilt.biases;
        Ok(())
    }

    /// Posterior f_Θ(x) without building a graph. Shares the numeric kernels
    /// with the graph path, so both produce bitwise-identical posteriors.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "input has {} features, model expects {}",
                    x.len(),
                    self.input_dim()
                ),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("forward input at index {i}"),
            });
        }
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let mut z = numcore::matvec(w.rows(), w.cols(), w.values(), &h);
            for (zi, bi) in z.iter_mut().zip(b.values()) {
                *zi += bi;
            }
            h = if l == last {
                numcore::softmax(&z)?
            } else {
                numcore::tanh_vec(&z)
            };
        }
        Ok(h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(numcore::argmax(&self.forward(x)?))
    }

    /// Bind Θ into a graph, as trainable parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelBinding {
        let mut weight_ids = Vec::new();
        let mut bias_ids = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            if trainable {
                weight_ids.push(g.param(w.clone()));
                bias_ids.push(g.param(b.clone()));
            } else {
                weight_ids.push(g.constant(w.clone()));
                bias_ids.push(g.constant(b.clone()));
            }
        }
        ModelBinding {
            weight_ids,
            bias_ids,
        }
    }

    /// One forward pass on the graph: tanh hidden layers, softmax head.
    /// Counts toward the graph's forward-pass tally.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let z = g.matvec(binding.weight_ids[l], h)?;
            let zb = g.add(z, binding.bias_ids[l])?;
            h = if l == last {
                g.softmax(zb)?
            } else {
                g.tanh(zb)?
            };
        }
        g.note_forward_pass();
        Ok(h)
    }

    /// Exact input-output Jacobian J_ij = ∂f_i/∂x_j via one backward pass per
    /// posterior component.
    pub fn input_output_jacobian(&self, x: &[f64]) -> Result<JacobianMatrix> {
        let mut g = Graph::new();
        let xn = g.input(Tensor::vector(x.to_vec())?);
        let binding = self.bind(&mut g, false);
        let p = self.forward_bound(&mut g, &binding, xn)?;
        let (m, n) = (self.class_count(), self.input_dim());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let pi = g.pick(p, i)?;
            g.backward(pi)?;
            data.extend_from_slice(g.grad_or_zeros(xn).values());
        }
        Ok(JacobianMatrix {
            rows: m,
            cols: n,
            data,
            point: x.to_vec(),
        })
    }

    /// ∇_x of a scalar loss functional of the posterior.
    pub fn input_gradient<F>(&self, x: &[f64], loss: F) -> Result<Vec<f64>>
    where
        F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let xn = g.input(Tensor::vector(x.to_vec())?);
        let binding = self.bind(&mut g, false);
        let p = self.forward_bound(&mut g, &binding, xn)?;
        let scalar = loss(&mut g, p)?;
        g.backward(scalar)?;
        Ok(g.grad_or_zeros(xn).values().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_TAG}").unwrap();
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        for v in self.params_flat() {
            writeln!(out, "{v:?}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(tag) if tag == CHECKPOINT_TAG => {}
            Some(tag) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint tag `{tag}`, expected `{CHECKPOINT_TAG}`"
                )))
            }
            None => return Err(Error::Checkpoint("empty checkpoint file".into())),
        }
        let dims_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing dims line".into()))?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Checkpoint(format!("bad dims line `{dims_line}`")))?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad dimension `{t}`")))
            })
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad parameter `{l}`")))
            })
            .collect::<Result<_>>()?;
        Self::from_params(&dims, &flat)
    }
}

impl ModelBinding {
    /// Flatten gradients from the graph's last backward pass into the Θ
    /// layout. Parameters the pass did not reach contribute zeros.
    pub fn theta_grad(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        for (&w, &b) in self.weight_ids.iter().zip(self.bias_ids.iter()) {
            out.extend_from_slice(g.grad_or_zeros(w).values());
            out.extend_from_slice(g.grad_or_zeros(b).values());
        }
        out
    }
}

/// The m×n Jacobian of the posterior at a point, rows indexed by class.
#[derive(Debug, Clone)]
pub struct JacobianMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    point: Vec<f64>,
}

impl JacobianMatrix {
    pub fn from_parts(rows: usize, cols: usize, data: Vec<f64>, point: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "jacobian",
                detail: format!(
                    "{rows}×{cols} expects {} entries, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        Ok(JacobianMatrix {
            rows,
            cols,
            data,
            point,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn point(&self) -> &[f64] {
        &self.point
    }

    /// ‖J‖²_F = Σ_ij J_ij².
    pub fn frobenius_sq(&self) -> f64 {
        numcore::norm_sq(&self.data)
    }

    /// J·v.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        numcore::matvec(self.rows, self.cols, &self.data, v)
    }

    /// Column sums Σ_i J_ij. Because the posterior sums to one, every column
    /// sums to zero up to rounding.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += self.entry(i, j);
            }
        }
        sums
    }

    pub fn max_abs_column_sum(&self) -> f64 {
        self.column_sums()
            .iter()
            .fold(0.0, |m, &v| f64::max(m, v.abs()))
    }
}

/// Isotropic Gaussian input-noise scale (standard deviation per coordinate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub scale: f64,
}

impl NoiseSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be ≥ 0, got {scale}"
            )));
        }
        Ok(NoiseSpec { scale })
    }
}

/// x̂ = x + ε with ε ~ N(0, c²I). A zero scale returns x bitwise and draws
/// nothing from the stream.
pub fn perturb_input(x: &[f64], noise: &NoiseSpec, rng: &mut impl Rng) -> Vec<f64> {
    if noise.scale == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|&v| v + noise.scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
