//! Dense row-major `f64` arrays and the small kernels the tape is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of doubles.
///
/// A tensor with exactly one element behaves as a scalar for broadcasting,
/// regardless of its rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TensorRepr", try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("from_rows", &[c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, &self.shape, &[])),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        let c = self.shape.last().copied().unwrap_or(1).max(1);
        self.data.chunks(c).map(<[f64]>::to_vec).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul(&self.data, &other.data, m, k, n),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Serialized form: the shape plus values nested one array level per axis.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Nested,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Nested {
    Value(f64),
    List(Vec<Nested>),
}

fn nest(shape: &[usize], data: &[f64]) -> Nested {
    match shape {
        [] => Nested::Value(data[0]),
        [_, rest @ ..] => {
            let stride: usize = rest.iter().product();
            if stride == 0 {
                return Nested::List(Vec::new());
            }
            Nested::List(data.chunks(stride).map(|c| nest(rest, c)).collect())
        }
    }
}

fn flatten(shape: &[usize], nested: Nested, out: &mut Vec<f64>) -> std::result::Result<(), String> {
    match (shape, nested) {
        ([], Nested::Value(v)) => {
            out.push(v);
            Ok(())
        }
        ([n, rest @ ..], Nested::List(items)) if items.len() == *n => {
            items.into_iter().try_for_each(|i| flatten(rest, i, out))
        }
        _ => Err(format!("values do not match shape {shape:?}")),
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            values: nest(&t.shape, &t.data),
            shape: t.shape,
        }
    }
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = String;

    fn try_from(r: TensorRepr) -> std::result::Result<Self, String> {
        let mut data = Vec::with_capacity(r.shape.iter().product());
        flatten(&r.shape, r.values, &mut data)?;
        Ok(Tensor {
            shape: r.shape,
            data,
        })
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (g_row, out_row) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&aik, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &gij) in out_row.iter_mut().zip(g_row) {
                *o += aik * gij;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
