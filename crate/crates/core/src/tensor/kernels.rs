//! Raw numeric kernels shared by the tape primitives.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the declared strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one convolution: input extent, kernel, stride, padding per axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] || stride[a] == 0 {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// Unfold `x` (`channels x D x H x W`) into a `(C*kd*kh*kw) x (od*oh*ow)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut j = 0;
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        let z_ok = iz >= 0 && (iz as usize) < id;
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            let y_ok = z_ok && iy >= 0 && (iy as usize) < ih;
                            for xx in 0..ow {
                                let ix = (xx * g.stride[2] + e) as isize - g.pad[2] as isize;
                                dst[j] = if y_ok && ix >= 0 && (ix as usize) < iw {
                                    xc[(iz as usize * ih + iy as usize) * iw + ix as usize]
                                } else {
                                    0.0
                                };
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back onto `x`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut j = 0;
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        let z_ok = iz >= 0 && (iz as usize) < id;
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            let y_ok = z_ok && iy >= 0 && (iy as usize) < ih;
                            for xx in 0..ow {
                                let ix = (xx * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if y_ok && ix >= 0 && (ix as usize) < iw {
                                    xc[(iz as usize * ih + iy as usize) * iw + ix as usize] +=
                                        src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Right-aligned numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into `in_shape`
/// under broadcasting.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        // a^T (3x2) * a (2x3)
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, true, &a, false, &mut c, 0.0);
        assert_eq!(c[0], 1.0 + 16.0);
        assert_eq!(c[5], 2.0 * 3.0 + 5.0 * 6.0);
    }

    #[test]
    fn broadcast_map_channels() {
        let map = broadcast_index_map(&[2, 1], &[2, 3]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_index_map(&[3], &[2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }
}
