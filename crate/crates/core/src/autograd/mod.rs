//! Tape-based reverse-mode differentiation over real and complex tensors.
//!
//! Forward calls on a [`Tape`] compute values eagerly and record the
//! primitive; [`Tape::backward`] walks the tape in reverse.
//!
//! # Gradient convention
//!
//! Internally every complex entry z = x + iy carries the *real-pair*
//! gradient ∂L/∂x + i·∂L/∂y, which makes each adjoint the ordinary
//! Hermitian transpose of the forward Jacobian. [`Gradients::cogradient`]
//! reports the Wirtinger cogradient ∂L/∂z̄, which is half the real-pair
//! value. Optimizers use [`Gradients::real_pair`], i.e. treat real and
//! imaginary parts as two independent reals.
//!
//! FFT convention: `fft` is the unnormalized DFT F, `ifft` is F⁻¹ = F^H/N.
//! The adjoint of `fft` is therefore N·ifft and the adjoint of `ifft` is
//! fft/N.

mod check;
mod tensor;

use std::sync::Arc;

pub use check::{gradient_check, GradCheckReport};
pub use tensor::{Data, Tensor};

use crate::error::{Error, Result};
use crate::fft;
use crate::rp::{apply_kerr, kerr_adjoint};
use crate::signal::C64;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A primitive with a hand-written adjoint, recorded via [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Real-pair gradients for each input given the output gradient.
    /// Returning `None` for an input means it receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleComplex(Var, C64),
    Mul(Var, Var),
    MulScalar(Var, Var),
    MulBroadcast(Var, Var),
    AddBroadcast(Var, Var),
    Conj(Var),
    AbsSq(Var),
    Re(Var),
    Im(Var),
    Pack(Var),
    Unpack(Var),
    Kerr(Var, C64),
    MatMul(Var, Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Fft(Var),
    Ifft(Var),
    CircConv(Var, Arc<Vec<C64>>),
    Upsample(Var, usize, f64),
    Decimate(Var, usize, f64),
    Sum(Var),
    Mean(Var),
    Powf(Var, f64),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn err(primitive: &'static str, detail: impl Into<String>) -> Error {
    Error::Autograd {
        primitive,
        detail: detail.into(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn matrix_dims(t: &Tensor, primitive: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(err(primitive, format!("expected a 2-d tensor, got shape {s:?}"))),
    }
}

fn real_of<'a>(t: &'a Tensor, primitive: &'static str) -> Result<&'a [f64]> {
    t.as_real().ok_or_else(|| err(primitive, "expected a real tensor"))
}

fn complex_of<'a>(t: &'a Tensor, primitive: &'static str) -> Result<&'a [C64]> {
    t.as_complex().ok_or_else(|| err(primitive, "expected a complex tensor"))
}

fn map_data(t: &Tensor, fr: impl Fn(f64) -> f64, fc: impl Fn(C64) -> C64) -> Tensor {
    match t.data() {
        Data::Real(v) => Tensor::real(t.shape(), v.iter().map(|&x| fr(x)).collect()),
        Data::Complex(v) => Tensor::complex(t.shape(), v.iter().map(|&x| fc(x)).collect()),
    }
    .expect("shape preserved")
}

fn zip_data(
    a: &Tensor,
    b: &Tensor,
    fr: impl Fn(f64, f64) -> f64,
    fc: impl Fn(C64, C64) -> C64,
) -> Option<Tensor> {
    match (a.data(), b.data()) {
        (Data::Real(x), Data::Real(y)) => {
            Tensor::real(a.shape(), x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect()).ok()
        }
        (Data::Complex(x), Data::Complex(y)) => {
            Tensor::complex(a.shape(), x.iter().zip(y).map(|(&p, &q)| fc(p, q)).collect()).ok()
        }
        _ => None,
    }
}

/// Applies `f` to each row (last axis) of `b` together with the matching
/// entries of the broadcast vector.
fn broadcast_rows(
    a: &Tensor,
    b: &Tensor,
    fr: impl Fn(f64, f64) -> f64,
    fc: impl Fn(C64, C64) -> C64,
) -> Option<Tensor> {
    let n = b.len();
    match (a.data(), b.data()) {
        (Data::Real(x), Data::Real(y)) => Tensor::real(
            a.shape(),
            x.chunks_exact(n)
                .flat_map(|row| row.iter().zip(y).map(|(&p, &q)| fr(p, q)))
                .collect(),
        )
        .ok(),
        (Data::Complex(x), Data::Complex(y)) => Tensor::complex(
            a.shape(),
            x.chunks_exact(n)
                .flat_map(|row| row.iter().zip(y).map(|(&p, &q)| fc(p, q)))
                .collect(),
        )
        .ok(),
        _ => None,
    }
}

/// Sums over rows (all axes but the last) into a vector of length `n`.
fn reduce_rows(t: &Tensor, n: usize) -> Tensor {
    match t.data() {
        Data::Real(v) => {
            let mut out = vec![0.0; n];
            for row in v.chunks_exact(n) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            Tensor::real_vec(out)
        }
        Data::Complex(v) => {
            let mut out = vec![C64::new(0.0, 0.0); n];
            for row in v.chunks_exact(n) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            Tensor::complex_vec(out)
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // strides for optional transposition of stored operands
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn fft_rows_of(t: &Tensor, inverse: bool, primitive: &'static str) -> Result<Tensor> {
    let mut v = complex_of(t, primitive)?.to_vec();
    let n = last_dim(t);
    if inverse {
        fft::inverse_rows(&mut v, n);
    } else {
        fft::forward_rows(&mut v, n);
    }
    Tensor::complex(t.shape(), v)
}

fn filter_rows_of(t: &Tensor, response: &[C64], conj: bool) -> Tensor {
    let mut v = t.as_complex().expect("complex").to_vec();
    let n = response.len();
    for row in v.chunks_exact_mut(n) {
        fft::forward(row);
        for (x, h) in row.iter_mut().zip(response) {
            *x *= if conj { h.conj() } else { *h };
        }
        fft::inverse(row);
    }
    Tensor::complex(t.shape(), v).expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient (data, noise samples).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_layout(&self, a: Var, b: Var, primitive: &'static str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() || x.is_complex() != y.is_complex() {
            return Err(err(
                primitive,
                format!("operands differ: {:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_layout(a, b, "add")?;
        let v = zip_data(self.value(a), self.value(b), |x, y| x + y, |x, y| x + y).unwrap();
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_layout(a, b, "sub")?;
        let v = zip_data(self.value(a), self.value(b), |x, y| x - y, |x, y| x - y).unwrap();
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map_data(self.value(a), |x| c * x, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn scale_complex(&mut self, a: Var, c: C64) -> Result<Var> {
        complex_of(self.value(a), "scale_complex")?;
        let v = map_data(self.value(a), |x| x, |x| x * c);
        Ok(self.push(v, Op::ScaleComplex(a, c), &[a]))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_layout(a, b, "mul")?;
        let v = zip_data(self.value(a), self.value(b), |x, y| x * y, |x, y| x * y).unwrap();
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every entry of `a` by the one-element real tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self
            .value(s)
            .item()
            .ok_or_else(|| err("mul_scalar", "scale must be a one-element real tensor"))?;
        let v = map_data(self.value(a), |x| c * x, |x| x * c);
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s]))
    }

    /// Multiplies each row (last axis) of `a` by the vector `b`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.shape().len() != 1 || last_dim(x) != y.len() || x.is_complex() != y.is_complex() {
            return Err(err(
                "mul_broadcast",
                format!("cannot broadcast {:?} over {:?}", y.shape(), x.shape()),
            ));
        }
        let v = broadcast_rows(x, y, |p, q| p * q, |p, q| p * q).unwrap();
        Ok(self.push(v, Op::MulBroadcast(a, b), &[a, b]))
    }

    /// Adds the vector `b` to each row of `a` (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.shape().len() != 1 || last_dim(x) != y.len() || x.is_complex() != y.is_complex() {
            return Err(err(
                "add_broadcast",
                format!("cannot broadcast {:?} over {:?}", y.shape(), x.shape()),
            ));
        }
        let v = broadcast_rows(x, y, |p, q| p + q, |p, q| p + q).unwrap();
        Ok(self.push(v, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        complex_of(self.value(a), "conj")?;
        let v = map_data(self.value(a), |x| x, |x| x.conj());
        Ok(self.push(v, Op::Conj(a), &[a]))
    }

    /// |z|² elementwise; real output.
    pub fn abs_sq(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let vals = match t.data() {
            Data::Real(v) => v.iter().map(|x| x * x).collect(),
            Data::Complex(v) => v.iter().map(|x| x.norm_sqr()).collect(),
        };
        let v = Tensor::real(t.shape(), vals).unwrap();
        self.push(v, Op::AbsSq(a), &[a])
    }

    pub fn re(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::real(t.shape(), complex_of(t, "re")?.iter().map(|z| z.re).collect())?;
        Ok(self.push(v, Op::Re(a), &[a]))
    }

    pub fn im(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::real(t.shape(), complex_of(t, "im")?.iter().map(|z| z.im).collect())?;
        Ok(self.push(v, Op::Im(a), &[a]))
    }

    /// Real `[.., 2]` → complex `[..]`.
    pub fn pack(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if last_dim(t) != 2 {
            return Err(err("pack", format!("last axis must be 2, shape {:?}", t.shape())));
        }
        let vals = real_of(t, "pack")?
            .chunks_exact(2)
            .map(|p| C64::new(p[0], p[1]))
            .collect();
        let shape = &t.shape()[..t.shape().len() - 1];
        let v = Tensor::complex(shape, vals)?;
        Ok(self.push(v, Op::Pack(a), &[a]))
    }

    /// Complex `[..]` → real `[.., 2]`.
    pub fn unpack(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let vals = complex_of(t, "unpack")?
            .iter()
            .flat_map(|z| [z.re, z.im])
            .collect();
        let mut shape = t.shape().to_vec();
        shape.push(2);
        let v = Tensor::real(&shape, vals)?;
        Ok(self.push(v, Op::Unpack(a), &[a]))
    }

    /// Dual-pol Kerr term coeff·(|u_h|²+|u_v|²)·u on a complex `[2, n]` tensor.
    pub fn kerr(&mut self, a: Var, coeff: C64) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[0] != 2 {
            return Err(err("kerr", format!("expected shape [2, n], got {:?}", t.shape())));
        }
        let mut vals = complex_of(t, "kerr")?.to_vec();
        apply_kerr(&mut vals, t.shape()[1], coeff);
        let v = Tensor::complex(t.shape(), vals)?;
        Ok(self.push(v, Op::Kerr(a, coeff), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let c = matmul_raw(
            real_of(self.value(a), "matmul")?,
            real_of(self.value(b), "matmul")?,
            m,
            k,
            n,
            false,
            false,
        );
        let v = Tensor::real(&[m, n], c)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        real_of(self.value(a), "relu")?;
        let v = map_data(self.value(a), |x| x.max(0.0), |x| x);
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::real(t.shape(), softmax_rows(real_of(t, "softmax")?, last_dim(t)))?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        real_of(self.value(a), "log")?;
        let v = map_data(self.value(a), f64::ln, |x| x);
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    /// Numerically stable log(softmax(a)) over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::real(t.shape(), log_softmax_rows(real_of(t, "log_softmax")?, last_dim(t)))?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    /// Selects `a[i, labels[i]]` from a real `[rows, classes]` tensor.
    pub fn pick(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(a), "pick")?;
        if labels.len() != rows {
            return Err(err("pick", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(err("pick", format!("label {bad} out of range for {cols} classes")));
        }
        let x = real_of(self.value(a), "pick")?;
        let v = Tensor::real_vec(labels.iter().enumerate().map(|(i, &l)| x[i * cols + l]).collect());
        Ok(self.push(v, Op::Pick(a, labels.to_vec()), &[a]))
    }

    /// Table lookup `out[j] = table[idx[j]]` on a 1-d tensor.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 1 {
            return Err(err("gather", "table must be 1-d"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(err("gather", format!("index {bad} out of range for {}", t.len())));
        }
        let v = match t.data() {
            Data::Real(x) => Tensor::real_vec(idx.iter().map(|&i| x[i]).collect()),
            Data::Complex(x) => Tensor::complex_vec(idx.iter().map(|&i| x[i]).collect()),
        };
        Ok(self.push(v, Op::Gather(table, idx.to_vec()), &[table]))
    }

    /// Unnormalized DFT along the last axis.
    pub fn fft(&mut self, a: Var) -> Result<Var> {
        let v = fft_rows_of(self.value(a), false, "fft")?;
        Ok(self.push(v, Op::Fft(a), &[a]))
    }

    /// Inverse DFT (1/N normalized) along the last axis.
    pub fn ifft(&mut self, a: Var) -> Result<Var> {
        let v = fft_rows_of(self.value(a), true, "ifft")?;
        Ok(self.push(v, Op::Ifft(a), &[a]))
    }

    /// Circular filtering of each row by a fixed frequency response, i.e.
    /// circular convolution with the corresponding kernel.
    pub fn circ_conv(&mut self, a: Var, response: Arc<Vec<C64>>) -> Result<Var> {
        let t = self.value(a);
        complex_of(t, "circ_conv")?;
        if last_dim(t) != response.len() {
            return Err(err(
                "circ_conv",
                format!("response length {} vs row length {}", response.len(), last_dim(t)),
            ));
        }
        let v = filter_rows_of(t, &response, false);
        Ok(self.push(v, Op::CircConv(a, response), &[a]))
    }

    /// Zero-stuffing by `factor` along the last axis with amplitude `gain`.
    pub fn upsample(&mut self, a: Var, factor: usize, gain: f64) -> Result<Var> {
        let t = self.value(a);
        let x = complex_of(t, "upsample")?;
        let mut shape = t.shape().to_vec();
        let last = shape.len() - 1;
        shape[last] *= factor;
        let mut out = vec![C64::new(0.0, 0.0); x.len() * factor];
        for (i, s) in x.iter().enumerate() {
            out[i * factor] = s * gain;
        }
        let v = Tensor::complex(&shape, out)?;
        Ok(self.push(v, Op::Upsample(a, factor, gain), &[a]))
    }

    /// Keeps every `factor`-th sample of the last axis, scaled by `gain`.
    pub fn decimate(&mut self, a: Var, factor: usize, gain: f64) -> Result<Var> {
        let t = self.value(a);
        let x = complex_of(t, "decimate")?;
        if last_dim(t) % factor != 0 {
            return Err(err("decimate", "row length not divisible by factor"));
        }
        let mut shape = t.shape().to_vec();
        let last = shape.len() - 1;
        shape[last] /= factor;
        let out = x.iter().step_by(factor).map(|s| s * gain).collect();
        let v = Tensor::complex(&shape, out)?;
        Ok(self.push(v, Op::Decimate(a, factor, gain), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = match self.value(a).data() {
            Data::Real(x) => Tensor::scalar(x.iter().sum()),
            Data::Complex(x) => Tensor::complex_vec(vec![x.iter().sum()]),
        };
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let v = match self.value(a).data() {
            Data::Real(x) => Tensor::scalar(x.iter().sum::<f64>() / n),
            Data::Complex(x) => Tensor::complex_vec(vec![x.iter().sum::<C64>() / n]),
        };
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        real_of(self.value(a), "powf")?;
        let v = map_data(self.value(a), |x| x.powf(p), |x| x);
        Ok(self.push(v, Op::Powf(a, p), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", t.shape()),
            ));
        }
        let v = t.clone().reshaped(shape);
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Records a custom primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a one-element real `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.item().is_none() {
            return Err(err("backward", "loss must be a one-element real tensor"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0).reshaped(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.adjoint(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map_data(g, |x| -x, |x| -x))],
            Op::Scale(a, c) => vec![(*a, map_data(g, |x| c * x, |x| x * c))],
            Op::ScaleComplex(a, c) => vec![(*a, map_data(g, |x| x, |x| x * c.conj()))],
            Op::Mul(a, b) => vec![
                (*a, zip_data(g, val(*b), |p, q| p * q, |p, q| p * q.conj()).unwrap()),
                (*b, zip_data(g, val(*a), |p, q| p * q, |p, q| p * q.conj()).unwrap()),
            ],
            Op::MulScalar(a, s) => {
                let c = val(*s).item().unwrap();
                let ds: f64 = match (val(*a).data(), g.data()) {
                    (Data::Real(x), Data::Real(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
                    (Data::Complex(x), Data::Complex(y)) => {
                        x.iter().zip(y).map(|(p, q)| (p.conj() * q).re).sum()
                    }
                    _ => unreachable!(),
                };
                vec![
                    (*a, map_data(g, |x| c * x, |x| x * c)),
                    (*s, Tensor::scalar(ds).reshaped(val(*s).shape())),
                ]
            }
            Op::MulBroadcast(a, b) => {
                let n = val(*b).len();
                let ga = broadcast_rows(g, val(*b), |p, q| p * q, |p, q| p * q.conj()).unwrap();
                let prod = zip_data(g, val(*a), |p, q| p * q, |p, q| p * q.conj()).unwrap();
                vec![(*a, ga), (*b, reduce_rows(&prod, n).reshaped(val(*b).shape()))]
            }
            Op::AddBroadcast(a, b) => {
                let n = val(*b).len();
                vec![(*a, g.clone()), (*b, reduce_rows(g, n).reshaped(val(*b).shape()))]
            }
            Op::Conj(a) => vec![(*a, map_data(g, |x| x, |x| x.conj()))],
            Op::AbsSq(a) => {
                let x = val(*a);
                let gr = g.as_real().unwrap();
                let out = match x.data() {
                    Data::Real(v) => {
                        Tensor::real(x.shape(), v.iter().zip(gr).map(|(p, q)| 2.0 * p * q).collect())
                    }
                    Data::Complex(v) => {
                        Tensor::complex(x.shape(), v.iter().zip(gr).map(|(p, q)| p * (2.0 * q)).collect())
                    }
                };
                vec![(*a, out.unwrap())]
            }
            Op::Re(a) => {
                let gr = g.as_real().unwrap();
                let out = Tensor::complex(g.shape(), gr.iter().map(|&x| C64::new(x, 0.0)).collect());
                vec![(*a, out.unwrap())]
            }
            Op::Im(a) => {
                let gr = g.as_real().unwrap();
                let out = Tensor::complex(g.shape(), gr.iter().map(|&x| C64::new(0.0, x)).collect());
                vec![(*a, out.unwrap())]
            }
            Op::Pack(a) => {
                let gc = g.as_complex().unwrap();
                let out = Tensor::real(val(*a).shape(), gc.iter().flat_map(|z| [z.re, z.im]).collect());
                vec![(*a, out.unwrap())]
            }
            Op::Unpack(a) => {
                let gr = g.as_real().unwrap();
                let out = Tensor::complex(
                    val(*a).shape(),
                    gr.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect(),
                );
                vec![(*a, out.unwrap())]
            }
            Op::Kerr(a, coeff) => {
                let x = val(*a);
                let n = x.shape()[1];
                let out = kerr_adjoint(x.as_complex().unwrap(), g.as_complex().unwrap(), n, *coeff);
                vec![(*a, Tensor::complex(x.shape(), out).unwrap())]
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(val(*a), "matmul").unwrap();
                let n = val(*b).shape()[1];
                let (av, bv, gv) = (
                    val(*a).as_real().unwrap(),
                    val(*b).as_real().unwrap(),
                    g.as_real().unwrap(),
                );
                // G_A = G Bᵀ, G_B = Aᵀ G
                let ga = matmul_raw(gv, bv, m, n, k, false, true);
                let gb = matmul_raw(av, gv, k, m, n, true, false);
                vec![
                    (*a, Tensor::real(&[m, k], ga).unwrap()),
                    (*b, Tensor::real(&[k, n], gb).unwrap()),
                ]
            }
            Op::Relu(a) => {
                let out = zip_data(g, val(*a), |p, q| if q > 0.0 { p } else { 0.0 }, |p, _| p);
                vec![(*a, out.unwrap())]
            }
            Op::Softmax(a) => {
                let y = node.value.as_real().unwrap();
                let gv = g.as_real().unwrap();
                let n = last_dim(g);
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(gv.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                vec![(*a, Tensor::real(g.shape(), out).unwrap())]
            }
            Op::Log(a) => vec![(*a, zip_data(g, val(*a), |p, q| p / q, |p, _| p).unwrap())],
            Op::LogSoftmax(a) => {
                let y = node.value.as_real().unwrap();
                let gv = g.as_real().unwrap();
                let n = last_dim(g);
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(gv.chunks_exact(n)) {
                    let total: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| q - p.exp() * total));
                }
                vec![(*a, Tensor::real(g.shape(), out).unwrap())]
            }
            Op::Pick(a, labels) => {
                let (rows, cols) = matrix_dims(val(*a), "pick").unwrap();
                let gv = g.as_real().unwrap();
                let mut out = vec![0.0; rows * cols];
                for (i, &l) in labels.iter().enumerate() {
                    out[i * cols + l] = gv[i];
                }
                vec![(*a, Tensor::real(&[rows, cols], out).unwrap())]
            }
            Op::Gather(t, idx) => {
                let mut out = val(*t).zeros_like();
                match (out.as_complex_mut(), g.as_complex()) {
                    (Some(o), Some(gc)) => idx.iter().zip(gc).for_each(|(&i, v)| o[i] += v),
                    _ => {
                        let o = out.as_real_mut().unwrap();
                        let gr = g.as_real().unwrap();
                        idx.iter().zip(gr).for_each(|(&i, v)| o[i] += v);
                    }
                }
                vec![(*t, out)]
            }
            Op::Fft(a) => {
                let n = last_dim(g) as f64;
                let t = fft_rows_of(g, true, "fft").unwrap();
                vec![(*a, map_data(&t, |x| x, |x| x * n))]
            }
            Op::Ifft(a) => {
                let n = last_dim(g) as f64;
                let t = fft_rows_of(g, false, "ifft").unwrap();
                vec![(*a, map_data(&t, |x| x, |x| x / n))]
            }
            Op::CircConv(a, response) => vec![(*a, filter_rows_of(g, response, true))],
            Op::Upsample(a, factor, gain) => {
                let gc = g.as_complex().unwrap();
                let out = gc.iter().step_by(*factor).map(|s| s * *gain).collect();
                vec![(*a, Tensor::complex(val(*a).shape(), out).unwrap())]
            }
            Op::Decimate(a, factor, gain) => {
                let gc = g.as_complex().unwrap();
                let mut out = vec![C64::new(0.0, 0.0); val(*a).len()];
                for (i, s) in gc.iter().enumerate() {
                    out[i * factor] = s * *gain;
                }
                vec![(*a, Tensor::complex(val(*a).shape(), out).unwrap())]
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = val(*a);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    1.0 / x.len().max(1) as f64
                } else {
                    1.0
                };
                let out = match g.data() {
                    Data::Real(v) => Tensor::real(x.shape(), vec![v[0] * scale; x.len()]),
                    Data::Complex(v) => Tensor::complex(x.shape(), vec![v[0] * scale; x.len()]),
                };
                vec![(*a, out.unwrap())]
            }
            Op::Powf(a, p) => {
                let out = zip_data(g, val(*a), |gg, x| gg * p * x.powf(p - 1.0), |gg, _| gg);
                vec![(*a, out.unwrap())]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape()))],
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs
                    .iter()
                    .zip(op.backward(&ins, &node.value, g))
                    .filter_map(|(v, t)| t.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// ∂L/∂Re + i·∂L/∂Im for complex nodes, ∂L/∂x for real ones.
    pub fn real_pair(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Wirtinger cogradient ∂L/∂z̄ for complex nodes; ∂L/∂x for real ones.
    pub fn cogradient(&self, v: Var) -> Option<Tensor> {
        self.real_pair(v)
            .map(|g| map_data(g, |x| x, |x| x * 0.5))
    }

    /// Real-pair gradient, zero-filled when the loss does not depend on `v`.
    pub fn real_pair_or_zero(&self, v: Var, like: &Tensor) -> Tensor {
        self.real_pair(v).cloned().unwrap_or_else(|| like.zeros_like())
    }
}
