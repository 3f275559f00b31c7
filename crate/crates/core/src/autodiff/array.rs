use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// The shape is fixed at construction; the element count always equals the
/// product of the extents. A rank-0 array holds one element.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Array {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single element of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Copies the selected rows of a matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Array {
            shape: vec![indices.len(), c],
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Array]) -> Result<Array> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: vec![rows, cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Array {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Array> {
        Array::from_vec(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    // ---- kernels ------------------------------------------------------

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Array> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Array {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Elementwise binary op under trailing-axis broadcasting.
    pub fn zip_broadcast(
        &self,
        other: &Array,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Array {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::Shape {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let ia = broadcast_index(&self.shape, &shape);
        let ib = broadcast_index(&other.shape, &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(self.data[i], other.data[j]))
            .collect();
        Ok(Array { shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Array> {
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "broadcast_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let idx = broadcast_index(&self.shape, shape);
        Ok(Array {
            shape: shape.to_vec(),
            data: idx.iter().map(|&i| self.data[i]).collect(),
        })
    }

    /// Sums over broadcast axes so the result has `shape`; the inverse of
    /// [`Array::broadcast_to`]. Accumulation runs in increasing flat index order.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Array> {
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "sum_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let idx = broadcast_index(shape, &self.shape);
        let mut data = vec![0.0; shape.iter().product()];
        for (k, &i) in idx.iter().enumerate() {
            data[i] += self.data[k];
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums a matrix along `axis`, keeping the reduced axis with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Array> {
        let (m, n) = self.require_matrix("sum_axis")?;
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, &x) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                Ok(Array {
                    shape: vec![1, n],
                    data: out,
                })
            }
            1 => {
                let out = (0..m)
                    .map(|i| self.data[i * n..(i + 1) * n].iter().fold(0.0, |a, &x| a + x))
                    .collect();
                Ok(Array {
                    shape: vec![m, 1],
                    data: out,
                })
            }
            _ => Err(Error::invalid(format!("sum_axis: axis {axis} out of range"))),
        }
    }
}

/// Broadcast result shape of two operands, aligning trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For every flat index of `target`, the flat index into an operand of
/// `shape` that broadcasts to it.
fn broadcast_index(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = target.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        out.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < target[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}
