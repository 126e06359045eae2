//! Reverse-mode automatic differentiation over dynamically shaped f64 arrays.
//!
//! The tape records one forward graph per training step. Every operation
//! captures what it needs for the backward pass by value; `backward` walks
//! the node list in reverse and accumulates gradients into the leaves.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Dimension, IxDyn};
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Arr,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix3>().unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.nodes.push(Node { value, back: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input; gradients reaching it are simply dropped.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Arr, back: BackFn) -> Var {
        self.nodes.push(Node {
            value,
            back: Some(back),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of a scalar `root` with respect to every node that still
    /// holds one after the sweep (leaves always do).
    pub fn backward(&self, root: Var) -> Vec<Option<Arr>> {
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].back.is_none() {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let back = self.nodes[i].back.as_ref().unwrap();
            back(&g, &mut |j, contrib| match &mut grads[j] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            });
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            v,
            Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            v,
            Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g.clone());
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = &av * &bv;
        self.push(
            v,
            Box::new(move |g, sink| {
                sink(a.0, g * &bv);
                sink(b.0, g * &av);
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Box::new(move |g, sink| sink(a.0, g * c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Box::new(move |g, sink| sink(a.0, g.clone())))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let vc = v.clone();
        self.push(v, Box::new(move |g, sink| sink(a.0, g * &vc)))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let v = av.mapv(f64::ln);
        self.push(v, Box::new(move |g, sink| sink(a.0, g / &av)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let v = av.mapv(f64::abs);
        self.push(
            v,
            Box::new(move |g, sink| sink(a.0, g * &av.mapv(f64::signum))),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let vc = v.clone();
        self.push(
            v,
            Box::new(move |g, sink| sink(a.0, g * &(&vc * &vc.mapv(|y| 1.0 - y)))),
        )
    }

    /// Tanh-approximated GELU; smooth everywhere, which keeps finite
    /// difference checks well behaved.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let av = self.nodes[a.0].value.clone();
        let v = av.mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        self.push(
            v,
            Box::new(move |g, sink| {
                let d = av.mapv(|x| {
                    let t = (C * (x + K * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
                });
                sink(a.0, g * &d);
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].value.raw_dim();
        let s = self.nodes[a.0].value.sum();
        self.push(
            Arr::from_elem(IxDyn(&[1]), s),
            Box::new(move |g, sink| {
                sink(a.0, Arr::from_elem(shape.clone(), g[[0]]));
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of a 2-D array: [m, n] -> [n].
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let (m, n) = (av.nrows(), av.ncols());
        let v = av.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(
            v,
            Box::new(move |g, sink| {
                let mut out = Array2::<f64>::zeros((m, n));
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                for mut row in out.rows_mut() {
                    row.assign(&(&gv / m as f64));
                }
                sink(a.0, out.into_dyn());
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        // into_shape follows raw memory order, so force standard layout
        // first; transposed inputs would otherwise be silently scrambled
        let old = self.nodes[a.0].value.raw_dim();
        let v = self
            .nodes[a.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            Box::new(move |g, sink| {
                sink(
                    a.0,
                    g.as_standard_layout().into_owned().into_shape(old.clone()).unwrap(),
                );
            }),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(&self.nodes[a.0].value)
            .t()
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        self.push(
            v,
            Box::new(move |g, sink| {
                sink(
                    a.0,
                    as2(g).t().as_standard_layout().into_owned().into_dyn(),
                );
            }),
        )
    }

    /// Flat gather: out[k] = a.flat[idx[k]], reshaped to `out_shape`.
    /// Backward scatter-adds, so repeated indices are fine.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let src_shape = self.nodes[a.0].value.raw_dim();
        let flat: Vec<f64> = {
            let src = self.nodes[a.0].value.as_slice().unwrap();
            idx.iter().map(|&i| src[i]).collect()
        };
        let v = Arr::from_shape_vec(IxDyn(out_shape), flat).unwrap();
        self.push(
            v,
            Box::new(move |g, sink| {
                let mut acc = vec![0.0; src_shape.size()];
                for (k, &i) in idx.iter().enumerate() {
                    acc[i] += g.as_slice().unwrap()[k];
                }
                sink(a.0, Arr::from_shape_vec(src_shape.clone(), acc).unwrap());
            }),
        )
    }

    /// Gather whole rows of a 2-D array: out[r, :] = a[idx[r], :].
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let (m, n) = (av.nrows(), av.ncols());
        let mut out = Array2::<f64>::zeros((idx.len(), n));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gv = as2(g);
                let mut acc = Array2::<f64>::zeros((m, n));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = acc.row_mut(i);
                    dst += &gv.row(r);
                }
                sink(a.0, acc.into_dyn());
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let (m, n) = (av.nrows(), av.ncols());
        let v = av.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            v.into_dyn(),
            Box::new(move |g, sink| {
                let mut acc = Array2::<f64>::zeros((m, n));
                acc.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                sink(a.0, acc.into_dyn());
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(&self.nodes[v.0].value)).collect();
        let m = views[0].nrows();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            Box::new(move |g, sink| {
                let gv = as2(g);
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let slice = gv.slice(ndarray::s![.., off..off + w]).to_owned();
                    sink(*p, slice.into_dyn());
                    off += w;
                }
                let _ = m;
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(&self.nodes[v.0].value)).collect();
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            Box::new(move |g, sink| {
                let gv = as2(g);
                let mut off = 0;
                for (p, &h) in parts.iter().zip(&heights) {
                    let slice = gv.slice(ndarray::s![off..off + h, ..]).to_owned();
                    sink(*p, slice.into_dyn());
                    off += h;
                }
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = as2(&self.nodes[b.0].value).to_owned();
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            Box::new(move |g, sink| {
                let gv = as2(g);
                sink(a.0, gv.dot(&bv.t()).into_dyn());
                sink(b.0, av.t().dot(&gv).into_dyn());
            }),
        )
    }

    /// a: [m, n] plus a bias vector b: [n] broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = self.nodes[b.0].value.clone();
        let bview = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &bview).into_dyn();
        self.push(
            v,
            Box::new(move |g, sink| {
                let gv = as2(g);
                sink(a.0, gv.to_owned().into_dyn());
                sink(b.0, gv.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Row-wise softmax on a 2-D array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = out.clone();
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gv = as2(g);
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yi = y.row(i);
                    let gi = gv.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    let mut d = dx.row_mut(i);
                    for j in 0..yi.len() {
                        d[j] = yi[j] * (gi[j] - dot);
                    }
                }
                sink(a.0, dx.into_dyn());
            }),
        )
    }

    /// Layer normalization over the last axis of a 2-D array with per-feature
    /// gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let (m, n) = (xv.nrows(), xv.ncols());
        let mut xhat = Array2::<f64>::zeros((m, n));
        let mut inv_std = Array1::<f64>::zeros(m);
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat[[i, j]] = (row[j] - mu) * istd;
            }
        }
        let mut out = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                out[[i, j]] = xhat[[i, j]] * gv[j] + bv[j];
            }
        }
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gy = as2(g);
                let mut dx = Array2::<f64>::zeros((m, n));
                let mut dgamma = Array1::<f64>::zeros(n);
                let mut dbeta = Array1::<f64>::zeros(n);
                for i in 0..m {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = gy[[i, j]] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[i, j]];
                        dgamma[j] += gy[[i, j]] * xhat[[i, j]];
                        dbeta[j] += gy[[i, j]];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = gy[[i, j]] * gv[j];
                        dx[[i, j]] =
                            inv_std[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                    }
                }
                sink(x.0, dx.into_dyn());
                sink(gamma.0, dgamma.into_dyn());
                sink(beta.0, dbeta.into_dyn());
            }),
        )
    }

    /// L2 normalization of a 1-D vector.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let norm = av.dot(&av).sqrt().max(1e-12);
        let y = (&av / norm).into_dyn();
        let yc = y
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        self.push(
            y,
            Box::new(move |g, sink| {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let proj = yc.dot(&gv);
                let dx = (&gv.to_owned() - &(&yc * proj)) / norm;
                sink(a.0, dx.into_dyn());
            }),
        )
    }

    // ---- spatial ops on [C, H, W] ----

    /// Same-padded 2-D convolution; kernel [Cout, Cin, kh, kw], odd kernel sides.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value).to_owned();
        let kv = self.nodes[kernel.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let bv = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let (cin, h, w) = xv.dim();
        let (cout, cin2, kh, kw) = kv.dim();
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = Array3::<f64>::zeros((cout, h, w));
        for co in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for di in 0..kh {
                            let ii = i as isize + di as isize - ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = j as isize + dj as isize - pw as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += xv[[ci, ii as usize, jj as usize]] * kv[[co, ci, di, dj]];
                            }
                        }
                    }
                    out[[co, i, j]] = acc;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gv = as3(g);
                let mut dx = Array3::<f64>::zeros((cin, h, w));
                let mut dk = ndarray::Array4::<f64>::zeros((cout, cin, kh, kw));
                let mut db = Array1::<f64>::zeros(cout);
                for co in 0..cout {
                    for i in 0..h {
                        for j in 0..w {
                            let go = gv[[co, i, j]];
                            db[co] += go;
                            for ci in 0..cin {
                                for di in 0..kh {
                                    let ii = i as isize + di as isize - ph as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..kw {
                                        let jj = j as isize + dj as isize - pw as isize;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        dx[[ci, ii as usize, jj as usize]] +=
                                            go * kv[[co, ci, di, dj]];
                                        dk[[co, ci, di, dj]] +=
                                            go * xv[[ci, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(x.0, dx.into_dyn());
                sink(kernel.0, dk.into_dyn());
                sink(bias.0, db.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of [C, H, W].
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[[ci, i, j]] = xv[[ci, i / 2, j / 2]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gv = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[[ci, i / 2, j / 2]] += gv[[ci, i, j]];
                        }
                    }
                }
                sink(x.0, dx.into_dyn());
            }),
        )
    }

    /// 2x average pooling of [C, H, W] (H, W even).
    pub fn avgpool2x(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value).to_owned();
        let (c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x: odd spatial size");
        let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    out[[ci, i, j]] = (xv[[ci, 2 * i, 2 * j]]
                        + xv[[ci, 2 * i, 2 * j + 1]]
                        + xv[[ci, 2 * i + 1, 2 * j]]
                        + xv[[ci, 2 * i + 1, 2 * j + 1]])
                        * 0.25;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Box::new(move |g, sink| {
                let gv = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            let q = gv[[ci, i, j]] * 0.25;
                            dx[[ci, 2 * i, 2 * j]] += q;
                            dx[[ci, 2 * i, 2 * j + 1]] += q;
                            dx[[ci, 2 * i + 1, 2 * j]] += q;
                            dx[[ci, 2 * i + 1, 2 * j + 1]] += q;
                        }
                    }
                }
                sink(x.0, dx.into_dyn());
            }),
        )
    }

    /// Dot product of two 1-D vectors -> [1].
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(scalar fn)/d(input leaf).
    fn fd_check<F>(input: Arr, f: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = f(&mut tape, x);
        assert_eq!(tape.value(out).len(), 1, "fd_check needs a scalar output");
        let grads = tape.backward(out);
        let analytic = grads[x.0].clone().expect("no gradient reached the input");

        let eps = 1e-6;
        for k in 0..input.len() {
            let mut plus = input.clone();
            plus.as_slice_mut().unwrap()[k] += eps;
            let mut tp = Tape::new();
            let xp = tp.leaf(plus);
            let op = f(&mut tp, xp);
            let fp = tp.scalar(op);

            let mut minus = input.clone();
            minus.as_slice_mut().unwrap()[k] -= eps;
            let mut tm = Tape::new();
            let xm = tm.leaf(minus);
            let om = f(&mut tm, xm);
            let fm = tm.scalar(om);

            let num = (fp - fm) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[k];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < tol,
                "component {k}: numeric {num} vs analytic {ana}"
            );
        }
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&[3, 4], &mut rng);
        fd_check(a.clone(), |t, x| {
            let e = t.exp(x);
            let s = t.sigmoid(e);
            let g = t.gelu(s);
            t.sum_all(g)
        }, 1e-5);
        let b = rand_arr(&[5], &mut rng).mapv(|v| v + 2.0); // positive for ln
        fd_check(b, |t, x| {
            let l = t.ln(x);
            t.mean_all(l)
        }, 1e-5);
    }

    #[test]
    fn matmul_softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_arr(&[4, 3], &mut rng);
        fd_check(rand_arr(&[2, 4], &mut rng), |t, x| {
            let wv = t.leaf(w.clone());
            let y = t.matmul(x, wv);
            let s = t.softmax_rows(y);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        }, 1e-5);

        let gamma = arr1(&[1.3, 0.7, 2.0]).into_dyn();
        let beta = arr1(&[0.1, -0.2, 0.4]).into_dyn();
        fd_check(rand_arr(&[3, 3], &mut rng), |t, x| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let e = t.exp(y);
            t.mean_all(e)
        }, 1e-5);
    }

    #[test]
    fn conv_pool_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);
        fd_check(rand_arr(&[2, 4, 4], &mut rng), |t, x| {
            let kv = t.leaf(k.clone());
            let bv = t.leaf(b.clone());
            let u = t.upsample2x(x);
            let c = t.conv2d(u, kv, bv);
            let p = t.avgpool2x(c);
            let s = t.sigmoid(p);
            t.sum_all(s)
        }, 1e-5);
    }

    #[test]
    fn gather_concat_slice_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx = Rc::new(vec![0usize, 2, 2, 5, 1]);
        fd_check(rand_arr(&[6], &mut rng), |t, x| {
            let g = t.gather(x, idx.clone(), &[5, 1]);
            let sq = t.mul(g, g);
            t.sum_all(sq)
        }, 1e-5);

        let ridx = Rc::new(vec![1usize, 0, 1]);
        fd_check(rand_arr(&[2, 3], &mut rng), |t, x| {
            let g = t.gather_rows(x, ridx.clone());
            let s1 = t.slice_cols(g, 1, 2);
            let c = t.concat_cols(&[s1, g]);
            let r = t.concat_rows(&[c, c]);
            let e = t.exp(r);
            t.mean_all(e)
        }, 1e-5);
    }

    #[test]
    fn l2_normalize_unit_norm_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_arr(&[6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone());
        let y = tape.l2_normalize(x);
        let norm: f64 = tape.value(y).iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let probe = rand_arr(&[6], &mut rng);
        fd_check(v, |t, x| {
            let y = t.l2_normalize(x);
            let p = t.leaf(probe.clone());
            t.dot(y, p)
        }, 1e-5);
    }

    #[test]
    fn value_semantics() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.transpose2(a);
        assert_eq!(as2(t.value(b))[[0, 1]], 3.0);
        let r = t.reshape(b, &[4]);
        assert_eq!(t.value(r).len(), 4);
        let m = t.mean_rows(a);
        assert_eq!(t.value(m).as_slice().unwrap(), &[2.0, 3.0]);
    }
}
