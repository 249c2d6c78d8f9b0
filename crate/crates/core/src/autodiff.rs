//! Reverse-mode automatic differentiation over f64 `ndarray` tensors.
//!
//! A `Tape` records operations as they execute; `Tape::backward` walks the
//! record in reverse and accumulates gradients. Everything is f64 so analytic
//! gradients can be held to central finite differences at 1e-4 relative
//! error.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Operation record. Create one per forward pass; it owns all intermediates.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros if the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> ArrayD<f64> {
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().shape().to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    /// Insert a leaf tensor (parameter or constant input).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn leaf1(&self, value: Array1<f64>) -> Var<'_> {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var<'_> {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Backpropagate from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.index].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.index] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=root.index).rev() {
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            // Accumulation can leave non-standard layouts (e.g. transposed
            // views); backward closures may reshape, so normalize first.
            let grad_out = if grad_out.is_standard_layout() {
                grad_out
            } else {
                grad_out.as_standard_layout().to_owned()
            };
            if let Some(backward) = &nodes[i].backward {
                let parent_grads = backward(&grad_out);
                debug_assert_eq!(parent_grads.len(), nodes[i].parents.len());
                for (p, g) in nodes[i].parents.iter().zip(parent_grads) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(grad_out);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.index].value)
    }

    pub fn tape_of(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a scalar variable.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        v[[0]]
    }

    fn unary(
        &self,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var<'t> {
        self.tape.push(
            value,
            vec![self.index],
            Some(Box::new(move |g| vec![backward(g)])),
        )
    }

    fn binary(
        &self,
        other: Var<'t>,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var<'t> {
        self.tape.push(
            value,
            vec![self.index, other.index],
            Some(Box::new(move |g| {
                let (ga, gb) = backward(g);
                vec![ga, gb]
            })),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value();
        let w = other.value();
        assert_eq!(v.shape(), w.shape(), "add shape mismatch");
        self.binary(other, &*v + &*w, |g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value();
        let w = other.value();
        assert_eq!(v.shape(), w.shape(), "sub shape mismatch");
        self.binary(other, &*v - &*w, |g| (g.clone(), -g))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value();
        let w = other.value();
        assert_eq!(v.shape(), w.shape(), "mul shape mismatch");
        let (vc, wc) = (Rc::clone(&v), Rc::clone(&w));
        self.binary(other, &*v * &*w, move |g| (g * &*wc, g * &*vc))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value();
        self.unary(&*v + c, |g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value();
        self.unary(&*v * c, move |g| g * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// Multiply by a single-element variable (a learnable scalar).
    pub fn mul_scalar_var(&self, s: Var<'t>) -> Var<'t> {
        let v = self.value();
        let sv = s.value();
        assert_eq!(sv.len(), 1, "mul_scalar_var needs a scalar");
        let c = sv[[0]];
        let vc = Rc::clone(&v);
        self.binary(s, &*v * c, move |g| {
            let gs = (g * &*vc).sum();
            (g * c, ArrayD::from_elem(IxDyn(&[1]), gs))
        })
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(|x| x.max(0.0));
        let vc = Rc::clone(&v);
        self.unary(out, move |g| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx).and(&*vc).for_each(|gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0;
                }
            });
            gx
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let oc = out.clone();
        self.unary(out, move |g| g * &(&oc * &oc.mapv(|y| 1.0 - y)))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(f64::exp);
        let oc = out.clone();
        self.unary(out, move |g| g * &oc)
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(f64::ln);
        let vc = Rc::clone(&v);
        self.unary(out, move |g| g / &*vc)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value();
        let out = v.mapv(f64::sqrt);
        let oc = out.clone();
        self.unary(out, move |g| g / &(oc.mapv(|y| 2.0 * y)))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[1]), v.sum());
        self.unary(out, move |g| ArrayD::from_elem(IxDyn(&shape), g[[0]]))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old_shape = v.shape().to_vec();
        let out = v
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.unary(out, move |g| {
            g.to_shape(IxDyn(&old_shape)).unwrap().to_owned()
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let b = other.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let out = a.dot(&b);
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let ga = g2.dot(&bc.t());
            let gb = ac.t().dot(&g2);
            (ga.into_dyn(), gb.into_dyn())
        })
    }

    /// Transpose a 2-D variable.
    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let out = v.t().to_owned();
        self.unary(out.into_dyn(), |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            g2.t().to_owned().into_dyn()
        })
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let full_shape = v.shape().to_vec();
        let out = v
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(out, move |g| {
            let mut gx = ArrayD::<f64>::zeros(IxDyn(&full_shape));
            gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                .assign(g);
            gx
        })
    }

    /// Add a row vector to every row of a 2-D variable.
    pub fn add_row_vec(&self, row: Var<'t>) -> Var<'t> {
        let a = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let b = row.value().as_ref().clone().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(a.ncols(), b.len(), "add_row_vec width mismatch");
        let out = &a + &b;
        self.binary(row, out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let gb = g2.sum_axis(Axis(0));
            (g2.into_dyn(), gb.into_dyn())
        })
    }

    /// Per-channel scale of a CxHxW map by a length-C vector of gates.
    pub fn scale_channels(&self, gates: Var<'t>) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let s = gates.value().as_ref().clone().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x.shape()[0], s.len(), "scale_channels channel mismatch");
        let mut out = x.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v * s[c]);
        }
        let (xc, sc) = (x.clone(), s.clone());
        self.binary(gates, out.into_dyn(), move |g| {
            let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
            let mut gx = g3.clone();
            for (c, mut plane) in gx.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v * sc[c]);
            }
            let gs: Array1<f64> = g3
                .outer_iter()
                .zip(xc.outer_iter())
                .map(|(gp, xp)| (&gp * &xp).sum())
                .collect();
            (gx.into_dyn(), gs.into_dyn())
        })
    }

    /// Broadcast-multiply a CxHxW map by an HxW mask.
    pub fn scale_spatial(&self, mask: Var<'t>) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let m = mask.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(&x.shape()[1..], m.shape(), "scale_spatial extent mismatch");
        let mut out = x.clone();
        for mut plane in out.outer_iter_mut() {
            plane.zip_mut_with(&m, |v, &mv| *v *= mv);
        }
        let (xc, mc) = (x.clone(), m.clone());
        self.binary(mask, out.into_dyn(), move |g| {
            let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
            let mut gx = g3.clone();
            for mut plane in gx.outer_iter_mut() {
                plane.zip_mut_with(&mc, |v, &mv| *v *= mv);
            }
            let mut gm = Array2::<f64>::zeros(mc.raw_dim());
            for (gp, xp) in g3.outer_iter().zip(xc.outer_iter()) {
                gm += &(&gp * &xp);
            }
            (gx.into_dyn(), gm.into_dyn())
        })
    }

    /// Row-wise softmax of a 2-D variable.
    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let oc = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(g2.raw_dim());
            for ((mut gx_row, g_row), y_row) in
                gx.rows_mut().into_iter().zip(g2.rows()).zip(oc.rows())
            {
                let dot = g_row.dot(&y_row);
                for ((gxi, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                    *gxi = yi * (gi - dot);
                }
            }
            gx.into_dyn()
        })
    }

    /// Row-wise log-softmax of a 2-D variable.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.clone();
        let mut soft = x.clone();
        for (mut row, mut srow) in out.rows_mut().into_iter().zip(soft.rows_mut()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
            srow.mapv_inplace(|v| (v - lse).exp());
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(g2.raw_dim());
            for ((mut gx_row, g_row), s_row) in
                gx.rows_mut().into_iter().zip(g2.rows()).zip(soft.rows())
            {
                let gsum = g_row.sum();
                for ((gxi, &gi), &si) in gx_row.iter_mut().zip(g_row).zip(s_row) {
                    *gxi = gi - si * gsum;
                }
            }
            gx.into_dyn()
        })
    }

    /// Normalize each row of a 2-D variable to unit Euclidean norm.
    /// Rows with norm below `eps` pass through unscaled with zero gradient.
    pub fn l2_normalize_rows(&self, eps: f64) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.clone();
        let mut norms = Array1::<f64>::zeros(x.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            norms[i] = n;
            if n > eps {
                row.mapv_inplace(|v| v / n);
            }
        }
        let oc = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(g2.raw_dim());
            for (i, (mut gx_row, g_row)) in
                gx.rows_mut().into_iter().zip(g2.rows()).enumerate()
            {
                let n = norms[i];
                if n <= eps {
                    continue;
                }
                let y_row = oc.row(i);
                let dot = g_row.dot(&y_row);
                for ((gxi, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                    *gxi = (gi - yi * dot) / n;
                }
            }
            gx.into_dyn()
        })
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix2>().unwrap();
        let gamma = gain.value().as_ref().clone().into_dimensionality::<Ix1>().unwrap();
        let beta = bias.value().as_ref().clone().into_dimensionality::<Ix1>().unwrap();
        let d = x.ncols();
        assert_eq!(gamma.len(), d, "layer_norm gain width");
        assert_eq!(beta.len(), d, "layer_norm bias width");

        let mut normalized = Array2::<f64>::zeros(x.raw_dim());
        let mut inv_std = Array1::<f64>::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for (j, &v) in row.iter().enumerate() {
                normalized[(i, j)] = (v - mean) * istd;
            }
        }
        let mut out = normalized.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[j] + beta[j];
            }
        }

        let tape = self.tape;
        let (nc, gc) = (normalized, gamma.clone());
        tape.push(
            out.into_dyn(),
            vec![self.index, gain.index, bias.index],
            Some(Box::new(move |g| {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let d = g2.ncols() as f64;
                let mut gx = Array2::<f64>::zeros(g2.raw_dim());
                let mut ggain = Array1::<f64>::zeros(gc.len());
                let mut gbias = Array1::<f64>::zeros(gc.len());
                for (i, g_row) in g2.rows().into_iter().enumerate() {
                    let n_row = nc.row(i);
                    // dL/dn = g * gamma; standard layer-norm input gradient.
                    let gn: Array1<f64> = g_row
                        .iter()
                        .zip(&gc)
                        .map(|(&gi, &gam)| gi * gam)
                        .collect();
                    let gn_sum = gn.sum();
                    let gn_dot_n = gn.dot(&n_row);
                    let istd = inv_std[i];
                    for (j, gxi) in gx.row_mut(i).iter_mut().enumerate() {
                        *gxi = istd * (gn[j] - gn_sum / d - n_row[j] * gn_dot_n / d);
                    }
                    for j in 0..gc.len() {
                        ggain[j] += g_row[j] * n_row[j];
                        gbias[j] += g_row[j];
                    }
                }
                vec![gx.into_dyn(), ggain.into_dyn(), gbias.into_dyn()]
            })),
        )
    }

    /// 2x nearest-neighbor upsampling of a CxHxW map.
    pub fn upsample_nearest_2x(&self) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let mut out = ndarray::Array3::<f64>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ci, y, xx)];
                    out[(ci, 2 * y, 2 * xx)] = v;
                    out[(ci, 2 * y + 1, 2 * xx)] = v;
                    out[(ci, 2 * y, 2 * xx + 1)] = v;
                    out[(ci, 2 * y + 1, 2 * xx + 1)] = v;
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
            let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(ci, y, xx)] = g3[(ci, 2 * y, 2 * xx)]
                            + g3[(ci, 2 * y + 1, 2 * xx)]
                            + g3[(ci, 2 * y, 2 * xx + 1)]
                            + g3[(ci, 2 * y + 1, 2 * xx + 1)];
                    }
                }
            }
            gx.into_dyn()
        })
    }

    /// Bilinear sampling of a CxHxW map at constant (x, y) points, one row per
    /// point. Points are clamped to the map border; gradients flow into the map.
    pub fn bilinear_sample(&self, points: &[(f64, f64)]) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((points.len(), c));
        // (x0, y0, fx, fy) per point after clamping.
        let mut coords = Vec::with_capacity(points.len());
        for (k, &(px, py)) in points.iter().enumerate() {
            let cx = px.clamp(0.0, (w - 1) as f64);
            let cy = py.clamp(0.0, (h - 1) as f64);
            if cx != px || cy != py {
                log::warn!("sample point ({px:.2},{py:.2}) clamped to map border");
            }
            let x0 = (cx.floor() as usize).min(w - 1);
            let y0 = (cy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;
            coords.push((x0, y0, x1, y1, fx, fy));
            for ci in 0..c {
                out[(k, ci)] = (1.0 - fx) * (1.0 - fy) * x[(ci, y0, x0)]
                    + fx * (1.0 - fy) * x[(ci, y0, x1)]
                    + (1.0 - fx) * fy * x[(ci, y1, x0)]
                    + fx * fy * x[(ci, y1, x1)];
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
            for (k, &(x0, y0, x1, y1, fx, fy)) in coords.iter().enumerate() {
                for ci in 0..c {
                    let gi = g2[(k, ci)];
                    gx[(ci, y0, x0)] += (1.0 - fx) * (1.0 - fy) * gi;
                    gx[(ci, y0, x1)] += fx * (1.0 - fy) * gi;
                    gx[(ci, y1, x0)] += (1.0 - fx) * fy * gi;
                    gx[(ci, y1, x1)] += fx * fy * gi;
                }
            }
            gx.into_dyn()
        })
    }

    /// Map of cosine similarities between every pixel feature of a CxHxW map
    /// and a length-C vector. Zero-norm pixels (or a zero-norm vector) score 0
    /// with zero gradient at the degenerate side.
    pub fn cosine_map(&self, reference: Var<'t>) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let f = reference
            .value()
            .as_ref()
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let (c, h, w) = x.dim();
        assert_eq!(c, f.len(), "cosine_map channel mismatch");
        let f_norm = f.dot(&f).sqrt();
        let mut out = Array2::<f64>::zeros((h, w));
        let mut pix_norms = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for xx in 0..w {
                let mut dot = 0.0;
                let mut nn = 0.0;
                for ci in 0..c {
                    let v = x[(ci, y, xx)];
                    dot += v * f[ci];
                    nn += v * v;
                }
                let n = nn.sqrt();
                pix_norms[(y, xx)] = n;
                if n > 0.0 && f_norm > 0.0 {
                    out[(y, xx)] = dot / (n * f_norm);
                }
            }
        }
        let (xc, fc, outc) = (x.clone(), f.clone(), out.clone());
        self.binary(reference, out.into_dyn(), move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
            let mut gf = Array1::<f64>::zeros(c);
            if f_norm == 0.0 {
                return (gx.into_dyn(), gf.into_dyn());
            }
            for y in 0..h {
                for xx in 0..w {
                    let n = pix_norms[(y, xx)];
                    if n == 0.0 {
                        continue;
                    }
                    let s = outc[(y, xx)];
                    let gi = g2[(y, xx)];
                    for ci in 0..c {
                        let u = xc[(ci, y, xx)];
                        // d cos / du = f/( |u||f| ) - s u / |u|^2
                        gx[(ci, y, xx)] += gi * (fc[ci] / (n * f_norm) - s * u / (n * n));
                        gf[ci] += gi * (u / (n * f_norm) - s * fc[ci] / (f_norm * f_norm));
                    }
                }
            }
            (gx.into_dyn(), gf.into_dyn())
        })
    }

    /// Concatenate along an axis.
    pub fn concat(axis: usize, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tape = parts[0].tape;
        let values: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        tape.push(
            out,
            parts.iter().map(|p| p.index).collect(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut start = 0;
                for &len in &lens {
                    grads.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned(),
                    );
                    start += len;
                }
                grads
            })),
        )
    }

    /// 2-D convolution of a CinxHxW input with OxCinxKhxKw weights.
    /// Zero padding `pad`, square stride `stride`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value().as_ref().clone().into_dimensionality::<Ix3>().unwrap();
        let w4 = weight.value();
        let b = bias.value().as_ref().clone().into_dimensionality::<Ix1>().unwrap();
        let wshape = w4.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be OxCxKhxKw");
        let (out_ch, in_ch, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let (c, h, w) = x.dim();
        assert_eq!(c, in_ch, "conv2d input channel mismatch");
        assert_eq!(b.len(), out_ch, "conv2d bias mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x, kh, kw, stride, pad, oh, ow);
        let w_mat = w4
            .to_shape((out_ch, in_ch * kh * kw))
            .unwrap()
            .to_owned();
        let mut out_mat = w_mat.dot(&cols);
        for (o, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + b[o]);
        }
        let out = out_mat
            .into_shape_with_order((out_ch, oh, ow))
            .unwrap()
            .into_dyn();

        let tape = self.tape;
        tape.push(
            out,
            vec![self.index, weight.index, bias.index],
            Some(Box::new(move |g| {
                let g_mat = g
                    .to_shape((out_ch, oh * ow))
                    .unwrap()
                    .to_owned();
                let grad_w = g_mat.dot(&cols.t());
                let grad_b = g_mat.sum_axis(Axis(1));
                let grad_cols = w_mat.t().dot(&g_mat);
                let grad_x = col2im(&grad_cols, c, h, w, kh, kw, stride, pad, oh, ow);
                vec![
                    grad_x.into_dyn(),
                    grad_w
                        .into_shape_with_order((out_ch, in_ch, kh, kw))
                        .unwrap()
                        .into_dyn(),
                    grad_b.into_dyn(),
                ]
            })),
        )
    }

    /// Penalty-reduced focal loss against a constant target heatmap.
    ///
    /// Positions with target exactly 1 contribute `(1-p)^alpha ln p`; all
    /// others contribute `(1-h)^beta p^alpha ln(1-p)`. The sum is negated and
    /// divided by the number of target-1 positions (floored at 1).
    /// Predictions are clamped to [eps, 1-eps] before the math.
    pub fn focal_loss(&self, target: &ArrayD<f64>, alpha: f64, beta: f64) -> Var<'t> {
        const EPS: f64 = 1e-7;
        let p = self.value();
        assert_eq!(p.shape(), target.shape(), "focal_loss shape mismatch");
        let n_pos = target.iter().filter(|&&h| h == 1.0).count().max(1) as f64;
        let mut total = 0.0;
        for (&pv_raw, &hv) in p.iter().zip(target.iter()) {
            let pv = pv_raw.clamp(EPS, 1.0 - EPS);
            if hv == 1.0 {
                total += (1.0 - pv).powf(alpha) * pv.ln();
            } else {
                total += (1.0 - hv).powf(beta) * pv.powf(alpha) * (1.0 - pv).ln();
            }
        }
        let loss = -total / n_pos;
        let pc = Rc::clone(&p);
        let tc = target.clone();
        self.unary(ArrayD::from_elem(IxDyn(&[1]), loss), move |g| {
            let gscale = g[[0]] / n_pos;
            let mut gp = ArrayD::<f64>::zeros(pc.raw_dim());
            for ((gpi, &pv_raw), &hv) in gp.iter_mut().zip(pc.iter()).zip(tc.iter()) {
                if !(EPS..=1.0 - EPS).contains(&pv_raw) {
                    continue;
                }
                let pv = pv_raw;
                let d = if hv == 1.0 {
                    -alpha * (1.0 - pv).powf(alpha - 1.0) * pv.ln() + (1.0 - pv).powf(alpha) / pv
                } else {
                    (1.0 - hv).powf(beta)
                        * (alpha * pv.powf(alpha - 1.0) * (1.0 - pv).ln()
                            - pv.powf(alpha) / (1.0 - pv))
                };
                *gpi = -gscale * d;
            }
            gp
        })
    }
}

fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Stack K same-shape variables along a new leading axis.
pub fn stack_new_axis<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "stack of zero parts");
    let reshaped: Vec<Var<'t>> = parts
        .iter()
        .map(|p| {
            let mut shape = p.shape();
            shape.insert(0, 1);
            p.reshape(&shape)
        })
        .collect();
    Var::concat(0, &reshaped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_check;
    use ndarray::{arr1, arr2, Array3, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_fd<F>(leaves: &[ArrayD<f64>], probe: F, tol: f64)
    where
        F: Fn(&[ArrayD<f64>], bool) -> (f64, Vec<ArrayD<f64>>),
    {
        let report = central_diff_check(leaves, &probe, 1e-5, usize::MAX);
        assert!(
            report.max_rel_err < tol,
            "rel err {} over {} coords",
            report.max_rel_err,
            report.coords_checked
        );
    }

    #[test]
    fn add_mul_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![rand_array(&[3, 4], &mut rng), rand_array(&[3, 4], &mut rng)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let b = tape.leaf(ls[1].clone());
                let root = a.mul(b).add(a).sub(b.square()).sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a), g.wrt(b)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-7,
        );
    }

    #[test]
    fn activations_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_array(&[2, 5], &mut rng)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let root = a
                    .sigmoid()
                    .mul(a.exp())
                    .add(a.mul_scalar(0.3).add_scalar(2.0).ln())
                    .add(a.add_scalar(3.0).sqrt())
                    .sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn relu_matches_fd_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut leaf = rand_array(&[4, 4], &mut rng);
        leaf.mapv_inplace(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        assert_fd(
            &[leaf],
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let root = a.relu().square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_transpose_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_array(&[3, 4], &mut rng), rand_array(&[4, 2], &mut rng)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let b = tape.leaf(ls[1].clone());
                let root = a.matmul(b).transpose().square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a), g.wrt(b)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_and_log_softmax_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_array(&[3, 5], &mut rng), rand_array(&[3, 5], &mut rng)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let w = tape.leaf(ls[1].clone());
                let root = a
                    .softmax_rows()
                    .mul(w)
                    .add(a.log_softmax_rows().mul(w))
                    .sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a), g.wrt(w)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            rand_array(&[3, 6], &mut rng),
            rand_array(&[6], &mut rng),
            rand_array(&[6], &mut rng),
            rand_array(&[3, 6], &mut rng),
        ];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let x = tape.leaf(ls[0].clone());
                let gain = tape.leaf(ls[1].clone());
                let bias = tape.leaf(ls[2].clone());
                let w = tape.leaf(ls[3].clone());
                let root = x.layer_norm_rows(gain, bias, 1e-5).mul(w).sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(x), g.wrt(gain), g.wrt(bias), g.wrt(w)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn l2_normalize_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut leaf = rand_array(&[4, 5], &mut rng);
        leaf.mapv_inplace(|v| v + 0.5);
        let w = rand_array(&[4, 5], &mut rng);
        assert_fd(
            &[leaf, w],
            |ls, wants_grad| {
                let tape = Tape::new();
                let x = tape.leaf(ls[0].clone());
                let w = tape.leaf(ls[1].clone());
                let root = x.l2_normalize_rows(1e-12).mul(w).sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(x), g.wrt(w)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[3.0, 4.0], [0.0, 0.5]]));
        let y = x.l2_normalize_rows(1e-12);
        let v = y.value();
        assert!((v[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.8).abs() < 1e-12);
        let n1 = (v[[1, 0]].powi(2) + v[[1, 1]].powi(2)).sqrt();
        assert!((n1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![
            rand_array(&[2, 5, 6], &mut rng),
            rand_array(&[3, 2, 3, 3], &mut rng),
            rand_array(&[3], &mut rng),
        ];
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            assert_fd(
                &leaves,
                |ls, wants_grad| {
                    let tape = Tape::new();
                    let x = tape.leaf(ls[0].clone());
                    let w = tape.leaf(ls[1].clone());
                    let b = tape.leaf(ls[2].clone());
                    let root = x.conv2d(w, b, stride, pad).square().sum_all();
                    let loss = root.scalar_value();
                    let grads = if wants_grad {
                        let g = tape.backward(root);
                        vec![g.wrt(x), g.wrt(w), g.wrt(b)]
                    } else {
                        vec![]
                    };
                    (loss, grads)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let tape = Tape::new();
        let x = Array3::from_shape_fn((1, 3, 3), |(_, y, xx)| (y * 3 + xx) as f64);
        let xv = tape.leaf(x.clone().into_dyn());
        let mut w = ndarray::Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let wv = tape.leaf(w.into_dyn());
        let bv = tape.leaf1(arr1(&[0.0]));
        let y = xv.conv2d(wv, bv, 1, 1);
        assert_eq!(*y.value(), x.into_dyn());
    }

    #[test]
    fn upsample_concat_narrow_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let leaves = vec![
            rand_array(&[2, 3, 3], &mut rng),
            rand_array(&[1, 6, 6], &mut rng),
        ];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let b = tape.leaf(ls[1].clone());
                let up = a.upsample_nearest_2x();
                let cat = Var::concat(0, &[up, b]);
                let left = cat.narrow(0, 0, 2);
                let right = cat.narrow(0, 1, 2);
                let root = left.mul(right).sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a), g.wrt(b)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn bilinear_sample_matches_fd_and_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![rand_array(&[3, 4, 4], &mut rng)];
        let points = [(1.0, 2.0), (0.5, 1.0), (2.25, 2.75)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let x = tape.leaf(ls[0].clone());
                let root = x.bilinear_sample(&points).square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(x)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );

        let tape = Tape::new();
        let x = tape.leaf(leaves[0].clone());
        let s = x.bilinear_sample(&[(1.0, 2.0), (0.5, 1.0)]);
        let sv = s.value();
        let xv = x.value();
        for c in 0..3 {
            assert!((sv[[0, c]] - xv[[c, 2, 1]]).abs() < 1e-12);
            let mid = 0.5 * (xv[[c, 1, 0]] + xv[[c, 1, 1]]);
            assert!((sv[[1, c]] - mid).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_map_matches_fd_and_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut feat = rand_array(&[3, 3, 3], &mut rng);
        feat.mapv_inplace(|v| v + 1.5);
        let mut refv = rand_array(&[3], &mut rng);
        refv.mapv_inplace(|v| v + 1.5);
        assert_fd(
            &[feat, refv],
            |ls, wants_grad| {
                let tape = Tape::new();
                let x = tape.leaf(ls[0].clone());
                let f = tape.leaf(ls[1].clone());
                let root = x.cosine_map(f).square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(x), g.wrt(f)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );

        let tape = Tape::new();
        let mut x = Array3::<f64>::zeros((2, 1, 3));
        x[(0, 0, 0)] = 2.0;
        x[(1, 0, 1)] = 3.0;
        x[(0, 0, 2)] = -1.0;
        let xv = tape.leaf(x.into_dyn());
        let f = tape.leaf1(arr1(&[1.0, 0.0]));
        let cos = xv.cosine_map(f);
        let cv = cos.value();
        assert!((cv[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(cv[[0, 1]].abs() < 1e-12);
        assert!((cv[[0, 2]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_map_zero_norm_pixel_scores_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Array3::<f64>::zeros((2, 2, 2)).into_dyn());
        let f = tape.leaf1(arr1(&[1.0, 1.0]));
        let cos = x.cosine_map(f);
        assert!(cos.value().iter().all(|&v| v == 0.0));
        let root = cos.sum_all();
        let grads = tape.backward(root);
        assert!(grads.wrt(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_channels_and_spatial_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let leaves = vec![
            rand_array(&[3, 4, 4], &mut rng),
            rand_array(&[3], &mut rng),
            rand_array(&[4, 4], &mut rng),
        ];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let x = tape.leaf(ls[0].clone());
                let s = tape.leaf(ls[1].clone());
                let m = tape.leaf(ls[2].clone());
                let root = x.scale_channels(s).scale_spatial(m).square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(x), g.wrt(s), g.wrt(m)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn focal_loss_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = rand_array(&[2, 4, 4], &mut rng);
        p.mapv_inplace(|v| 0.2 + 0.3 * (v + 1.0));
        let mut target = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 4]));
        target[[0, 1, 1]] = 1.0;
        target[[1, 2, 3]] = 1.0;
        target[[0, 1, 2]] = 0.6065;
        assert_fd(
            &[p],
            |ls, wants_grad| {
                let tape = Tape::new();
                let p = tape.leaf(ls[0].clone());
                let root = p.focal_loss(&target, 2.0, 4.0);
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(p)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-6,
        );
    }

    #[test]
    fn add_row_vec_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let leaves = vec![rand_array(&[3, 4], &mut rng), rand_array(&[4], &mut rng)];
        assert_fd(
            &leaves,
            |ls, wants_grad| {
                let tape = Tape::new();
                let a = tape.leaf(ls[0].clone());
                let b = tape.leaf(ls[1].clone());
                let root = a.add_row_vec(b).square().sum_all();
                let loss = root.scalar_value();
                let grads = if wants_grad {
                    let g = tape.backward(root);
                    vec![g.wrt(a), g.wrt(b)]
                } else {
                    vec![]
                };
                (loss, grads)
            },
            1e-7,
        );
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[2.0]]));
        let y = x.mul(x).add(x.mul_scalar(3.0));
        let grads = tape.backward(y.sum_all());
        assert!((grads.wrt(x)[[0, 0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn stack_new_axis_collects_parts() {
        let tape = Tape::new();
        let a = tape.leaf2(arr2(&[[1.0, 2.0]]));
        let b = tape.leaf2(arr2(&[[3.0, 4.0]]));
        let s = stack_new_axis(&[a, b]);
        assert_eq!(s.shape(), vec![2, 1, 2]);
        assert_eq!(s.value()[[1, 0, 1]], 4.0);
    }
}
