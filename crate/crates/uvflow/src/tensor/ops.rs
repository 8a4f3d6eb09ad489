//! Differentiable ops. Each constructor computes the forward value eagerly and
//! registers a closure producing one gradient array per parent.

use super::{Scalar, Tensor};
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use std::sync::Arc;

fn as2<S: Scalar>(a: &ArrayD<S>) -> ArrayView2<'_, S> {
    a.view().into_dimensionality().expect("expected rank-2 array")
}

fn dyn2<S: Scalar>(a: Array2<S>) -> ArrayD<S> {
    a.into_dyn()
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let out = self.data() + rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let out = self.data() - rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![g.clone(), g.mapv(|v| -v)]),
        )
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let a = self.data_arc();
        let b = rhs.data_arc();
        let out = self.data() * rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![g * &*b, g * &*a]),
        )
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out = self.data().mapv(|v| v * c);
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| vec![g.mapv(|v| v * c)]))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let out = self.data().mapv(|v| v + c);
        Tensor::from_op(out, vec![self.clone()], Box::new(|g| vec![g.clone()]))
    }

    /// Row-broadcast add: [m, n] + [n].
    pub fn add_rowvec(&self, b: &Tensor<S>) -> Tensor<S> {
        let (m, n) = {
            let s = self.shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        assert_eq!(b.shape(), [n], "add_rowvec: width mismatch");
        let bv = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = as2(self.data()).to_owned();
        for mut row in out.rows_mut() {
            row += &bv;
        }
        let _ = m;
        Tensor::from_op(
            dyn2(out),
            vec![self.clone(), b.clone()],
            Box::new(|g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    /// Row-broadcast multiply: [m, n] * [n].
    pub fn mul_rowvec(&self, w: &Tensor<S>) -> Tensor<S> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let n = s[1];
        assert_eq!(w.shape(), [n], "mul_rowvec: width mismatch");
        let a = self.data_arc();
        let wv = w.data_arc();
        let wv1 = wv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = as2(self.data()).to_owned();
        for mut row in out.rows_mut() {
            row *= &wv1;
        }
        Tensor::from_op(
            dyn2(out),
            vec![self.clone(), w.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let a2 = as2(&a);
                let wv1 = wv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = g2.to_owned();
                for mut row in gx.rows_mut() {
                    row *= &wv1;
                }
                let gw = (&g2 * &a2).sum_axis(Axis(0));
                vec![dyn2(gx), gw.into_dyn()]
            }),
        )
    }

    /// Column-broadcast add: [m, n] + [m] (one bias per row).
    pub fn add_colvec(&self, b: &Tensor<S>) -> Tensor<S> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        let m = s[0];
        assert_eq!(b.shape(), [m], "add_colvec: height mismatch");
        let bv = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = as2(self.data()).to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + bv[i]);
        }
        Tensor::from_op(
            dyn2(out),
            vec![self.clone(), b.clone()],
            Box::new(|g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(1)).into_dyn()]
            }),
        )
    }

    /// [m, k] x [k, n] -> [m, n].
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        let a = self.data_arc();
        let b = rhs.data_arc();
        assert_eq!(a.shape()[1], b.shape()[0], "matmul: inner dim mismatch");
        let out = as2(&a).dot(&as2(&b));
        Tensor::from_op(
            dyn2(out),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&b).t());
                let db = as2(&a).t().dot(&g2);
                vec![dyn2(da), dyn2(db)]
            }),
        )
    }

    /// [m, k] x [n, k]^T -> [m, n].
    pub fn matmul_t(&self, rhs: &Tensor<S>) -> Tensor<S> {
        let a = self.data_arc();
        let b = rhs.data_arc();
        assert_eq!(a.shape()[1], b.shape()[1], "matmul_t: inner dim mismatch");
        let out = as2(&a).dot(&as2(&b).t());
        Tensor::from_op(
            dyn2(out),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&b));
                let db = g2.t().dot(&as2(&a));
                vec![dyn2(da), dyn2(db)]
            }),
        )
    }

    /// Row-wise softmax of a [m, n] matrix. Rows sum to one exactly up to
    /// float rounding; subtracting the row max keeps exp in range.
    pub fn softmax_rows(&self) -> Tensor<S> {
        let x = as2(self.data());
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let out = Arc::new(dyn2(out));
        let y = Arc::clone(&out);
        Tensor::from_op_arc(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let y2 = as2(&y);
                let mut gx = (&g2 * &y2).to_owned();
                let dot = gx.sum_axis(Axis(1));
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let d = dot[i];
                    let yr = y2.row(i);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v - d * yr[j];
                    }
                }
                vec![dyn2(gx)]
            }),
        )
    }

    /// Row-wise log-softmax of a [m, n] matrix.
    pub fn log_softmax_rows(&self) -> Tensor<S> {
        let x = as2(self.data());
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).fold(S::zero(), |a, b| a + b).ln() + mx;
            row.mapv_inplace(|v| v - lse);
        }
        let out = Arc::new(dyn2(out));
        let y = Arc::clone(&out);
        Tensor::from_op_arc(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let y2 = as2(&y);
                let rowsum = g2.sum_axis(Axis(1));
                let mut gx = g2.to_owned();
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let rs = rowsum[i];
                    let yr = y2.row(i);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v - rs * yr[j].exp();
                    }
                }
                vec![dyn2(gx)]
            }),
        )
    }

    /// Row-wise layer norm without affine parameters (compose with
    /// `mul_rowvec` and `add_rowvec` for scale and shift).
    pub fn layernorm_rows(&self, eps: S) -> Tensor<S> {
        let x = as2(self.data());
        let n = S::from_f64(x.ncols() as f64);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::<S>::zeros(x.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(S::zero(), |a, b| a + b) / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let out = Arc::new(dyn2(xhat));
        let y = Arc::clone(&out);
        Tensor::from_op_arc(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let y2 = as2(&y);
                let n = S::from_f64(g2.ncols() as f64);
                let mut gx = g2.to_owned();
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let yr = y2.row(i);
                    let gmean = row.sum() / n;
                    let gy = row
                        .iter()
                        .zip(yr.iter())
                        .map(|(&a, &b)| a * b)
                        .fold(S::zero(), |a, b| a + b)
                        / n;
                    let is = inv_std[i];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - gmean - yr[j] * gy) * is;
                    }
                }
                vec![dyn2(gx)]
            }),
        )
    }

    pub fn silu(&self) -> Tensor<S> {
        let x = self.data_arc();
        let out = x.mapv(|v| v / (S::one() + (-v).exp()));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| {
                    let s = S::one() / (S::one() + (-xv).exp());
                    *gv = *gv * (s * (S::one() + xv * (S::one() - s)));
                });
                vec![gx]
            }),
        )
    }

    pub fn tanh_act(&self) -> Tensor<S> {
        let out = Arc::new(self.data().mapv(|v| v.tanh()));
        let y = Arc::clone(&out);
        Tensor::from_op_arc(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&*y).for_each(|gv, &yv| {
                    *gv = *gv * (S::one() - yv * yv);
                });
                vec![gx]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let shape: Vec<usize> = self.shape().to_vec();
        let s = self.data().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = g[[0]];
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.data().len() as f64);
        self.sum_all().scale(S::one() / n)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<S> {
        let x = as2(self.data());
        let (m, n) = (x.nrows(), x.ncols());
        assert!(start + len <= n);
        let out = x.slice(ndarray::s![.., start..start + len]).to_owned();
        Tensor::from_op(
            dyn2(out),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Array2::<S>::zeros((m, n));
                gx.slice_mut(ndarray::s![.., start..start + len]).assign(&as2(g));
                vec![dyn2(gx)]
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<S> {
        let x = as2(self.data());
        let (m, n) = (x.nrows(), x.ncols());
        assert!(start + len <= m);
        let out = x.slice(ndarray::s![start..start + len, ..]).to_owned();
        Tensor::from_op(
            dyn2(out),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Array2::<S>::zeros((m, n));
                gx.slice_mut(ndarray::s![start..start + len, ..]).assign(&as2(g));
                vec![dyn2(gx)]
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<S>> = parts.iter().map(|p| as2(p.data())).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        Tensor::from_op(
            dyn2(out),
            parts.to_vec(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut offs = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let part = g2.slice(ndarray::s![.., offs..offs + w]).to_owned();
                        offs += w;
                        dyn2(part)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<S>> = parts.iter().map(|p| as2(p.data())).collect();
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        Tensor::from_op(
            dyn2(out),
            parts.to_vec(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut offs = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let part = g2.slice(ndarray::s![offs..offs + h, ..]).to_owned();
                        offs += h;
                        dyn2(part)
                    })
                    .collect()
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        let old: Vec<usize> = self.shape().to_vec();
        assert_eq!(self.data().len(), shape.iter().product::<usize>(), "reshape: size mismatch");
        let out = self
            .data()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g.to_owned().into_shape_with_order(IxDyn(&old)).expect("reshape back")]
            }),
        )
    }

    /// out_flat[i] = in_flat[table[i]]. Covers patchify, unpatchify and im2col
    /// (duplicate indices allowed; backward scatter-adds).
    pub fn gather(&self, table: Arc<Vec<u32>>, out_shape: &[usize]) -> Tensor<S> {
        let n_out: usize = out_shape.iter().product();
        assert_eq!(table.len(), n_out, "gather: table/out size mismatch");
        let in_shape: Vec<usize> = self.shape().to_vec();
        let src = self.data().as_slice().expect("gather: standard layout");
        let mut out = Vec::with_capacity(n_out);
        for &idx in table.iter() {
            out.push(src[idx as usize]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(out_shape), out).unwrap();
        let tb = Arc::clone(&table);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let gs = g.as_slice().expect("gather grad layout");
                let mut gx = vec![S::zero(); in_shape.iter().product()];
                for (i, &idx) in tb.iter().enumerate() {
                    gx[idx as usize] = gx[idx as usize] + gs[i];
                }
                vec![ArrayD::from_shape_vec(IxDyn(&in_shape), gx).unwrap()]
            }),
        )
    }

    /// Mean squared error between two same-shape tensors, as a scalar.
    pub fn mse(&self, target: &Tensor<S>) -> Tensor<S> {
        let d = self.sub(target);
        d.mul(&d).mean_all()
    }
}

/// Index table turning a [c_in, h, w] image into im2col columns
/// [c_in*kh*kw, oh*ow] with replicate (edge-clamp) padding.
pub fn gather_table_conv2d(
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Arc<Vec<u32>>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut table = Vec::with_capacity(c_in * k * k * oh * ow);
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let iy = iy.clamp(0, h as isize - 1) as usize;
                        let ix = ix.clamp(0, w as isize - 1) as usize;
                        table.push((ci * h * w + iy * w + ix) as u32);
                    }
                }
            }
        }
    }
    (Arc::new(table), oh, ow)
}
