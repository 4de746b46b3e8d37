//! Dense loops behind the differentiable ops. Every reduction runs in a
//! fixed sequential order so results are bitwise reproducible.

use super::Real;
use crate::error::{shape_err, Result};

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `m×n` matrix.
pub(crate) fn transpose<T: Real>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let at = transpose(k, m, a);
    gemm_nn(m, k, n, &at, b, c);
}

/// Geometry of one 3-D convolution over a single batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("conv stride must be at least 1"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if kernel[a] == 0 || kernel[a] > padded {
                return Err(shape_err!(
                    "kernel {:?} does not fit padded input {:?} (padding {pad}) on axis {a}",
                    kernel,
                    input
                ));
            }
            output[a] = (padded - kernel[a]) / stride + 1;
        }
        Ok(Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    /// Input coordinate touched by output index `o` and kernel tap `k` on one axis.
    #[inline]
    fn source(&self, o: usize, k: usize, axis: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < self.input[axis] {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Unfolds `x[C,D,H,W]` into `cols[C·kd·kh·kw, D'·H'·W']`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for zd in 0..od {
                            let sd = self.source(zd, a, 0);
                            for zh in 0..oh {
                                let sh = self.source(zh, b, 1);
                                for zw in 0..ow {
                                    dst[q] = match (sd, sh, self.source(zw, e, 2)) {
                                        (Some(d), Some(h), Some(w)) => xc[(d * ih + h) * iw + w],
                                        _ => T::zero(),
                                    };
                                    q += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters `cols` back, accumulating into `x`.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut q = 0;
                        for zd in 0..od {
                            let sd = self.source(zd, a, 0);
                            for zh in 0..oh {
                                let sh = self.source(zh, b, 1);
                                for zw in 0..ow {
                                    if let (Some(d), Some(h), Some(w)) =
                                        (sd, sh, self.source(zw, e, 2))
                                    {
                                        xc[(d * ih + h) * iw + w] += src[q];
                                    }
                                    q += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat index into a tensor of shape
/// `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + offset] = in_strides[i];
        }
    }
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f32; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let mut c2 = [0.0f32; 4];
        gemm_nt(2, 3, 2, &a, &transpose(3, 2, &b), &mut c2);
        assert_eq!(c2, c);
        let mut c3 = [0.0f32; 4];
        gemm_tn(2, 3, 2, &transpose(2, 3, &a), &b, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(1, [16, 16, 16], [3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [8, 8, 8]);
        assert!(ConvGeom::new(1, [2, 2, 2], [5, 5, 5], 1, 1).is_err());
        assert!(ConvGeom::new(1, [2, 2, 2], [1, 1, 1], 0, 0).is_err());
    }
}
