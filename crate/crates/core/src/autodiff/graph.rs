//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an arena of nodes appended in evaluation order, so the
//! reverse of insertion order is a valid reverse topological order. Each
//! node owns its forward value and, when any parent requires a gradient, a
//! closure mapping the upstream gradient to one contribution per parent.
//! Contributions accumulate additively at fan-out.

use std::rc::Rc;
use std::sync::Arc;

use super::gemm::{gemm_acc, View};
use super::tensor::Tensor;
use crate::error::{invalid, Result};
use crate::so3::RepLayout;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> crate::Error {
    invalid(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One degree's worth of channel mixing between two layouts.
#[derive(Clone, Debug)]
struct DegreeMix {
    n: usize,
    in_off: usize,
    c_in: usize,
    out_off: usize,
    c_out: usize,
    weight: usize,
}

fn degree_mixes(
    in_layout: &RepLayout,
    out_layout: &RepLayout,
    degrees: &[usize],
    expect: impl Fn(usize, usize, usize) -> Vec<usize>,
    shapes: &[&[usize]],
    op: &str,
) -> Result<Vec<DegreeMix>> {
    let mut mixes = Vec::with_capacity(degrees.len());
    for (wi, &l) in degrees.iter().enumerate() {
        let (Some(in_off), Some(out_off)) = (in_layout.degree_offset(l), out_layout.degree_offset(l)) else {
            return Err(invalid(format!(
                "{op}: degree {l} must appear in both {in_layout} and {out_layout}"
            )));
        };
        let c_in = in_layout.multiplicity(l);
        let c_out = out_layout.multiplicity(l);
        let want = expect(l, c_in, c_out);
        if shapes[wi] != want.as_slice() {
            return Err(shape_err(op, shapes[wi], &want));
        }
        mixes.push(DegreeMix { n: 2 * l + 1, in_off, c_in, out_off, c_out, weight: wi });
    }
    Ok(mixes)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, parents: parents.iter().map(|p| p.0).collect(), backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros_like(lv);
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let contribs = bw(&g, &needs);
            for ((&p, c), need) in node.parents.iter().zip(contribs).zip(&needs) {
                let (Some(c), true) = (c, *need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ----------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], |g, _| {
            let mut n = g.clone();
            n.scale_in_place(-1.0);
            vec![Some(g.clone()), Some(n)]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.record(out, &[a], move |g, _| {
            let mut r = g.clone();
            r.scale_in_place(s);
            vec![Some(r)]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                Tensor::new(g.shape().to_vec(), d).unwrap()
            });
            let gb = needs[1].then(|| {
                let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                Tensor::new(g.shape().to_vec(), d).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.record(out, &[a], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(gi, &x)| {
                    let s = sigmoid(x);
                    gi * (s + x * s * (1.0 - s))
                })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data.clone()).unwrap();
        self.record(out, &[a], move |g, _| {
            let d = g.data().iter().zip(&data).map(|(gi, s)| gi * s * (1.0 - s)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        })
    }

    /// `a / b` where `b > eps`, and `0` (with zero gradient) elsewhere.
    pub fn div_guarded(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape() != vb.shape() {
            return Err(shape_err("div_guarded", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| if y > eps { x / y } else { 0.0 }).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], move |g, _| {
            let n = g.len();
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let (x, y) = (va.data()[i], vb.data()[i]);
                if y > eps {
                    ga[i] = g.data()[i] / y;
                    gb[i] = -g.data()[i] * x / (y * y);
                }
            }
            let s = g.shape().to_vec();
            vec![Some(Tensor::new(s.clone(), ga).unwrap()), Some(Tensor::new(s, gb).unwrap())]
        }))
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let orig = va.shape().to_vec();
        let out = va.clone().reshaped(shape)?;
        Ok(self.record(out, &[a], move |g, _| vec![Some(g.clone().reshaped(orig.clone()).unwrap())]))
    }

    /// Inserts an axis of length `t` before the last axis: `[.., D] → [.., t, D]`.
    pub fn expand_time(&mut self, a: Var, t: usize) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let rows = va.rows();
        let mut shape = va.shape().to_vec();
        let last = shape.pop().unwrap_or(1);
        shape.push(t);
        shape.push(last);
        let mut data = Vec::with_capacity(rows * t * d);
        for r in 0..rows {
            let src = &va.data()[r * d..(r + 1) * d];
            for _ in 0..t {
                data.extend_from_slice(src);
            }
        }
        let in_shape = va.shape().to_vec();
        let out = Tensor::new(shape, data).unwrap();
        self.record(out, &[a], move |g, _| {
            let mut acc = vec![0.0; rows * d];
            for r in 0..rows {
                for k in 0..t {
                    let src = &g.data()[(r * t + k) * d..(r * t + k + 1) * d];
                    for (a, b) in acc[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), acc).unwrap())]
        })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat_last: no inputs"));
        }
        let lead: Vec<usize> = {
            let s = self.shape(xs[0]);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last", self.shape(xs[0]), s));
            }
            dims.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &d) in xs.iter().zip(&dims) {
                data.extend_from_slice(&self.value(x).data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, xs, move |g, needs| {
            let mut off = 0;
            let mut res = Vec::with_capacity(dims.len());
            for (k, &d) in dims.iter().enumerate() {
                if needs[k] {
                    let mut part = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * total + off..r * total + off + d]);
                    }
                    let mut s = lead.clone();
                    s.push(d);
                    res.push(Some(Tensor::new(s, part).unwrap()));
                } else {
                    res.push(None);
                }
                off += d;
            }
            res
        }))
    }

    /// `out[.., k] = x[.., idx[k]]`.
    pub fn gather_last(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(invalid(format!("gather_last: index {bad} out of range for last axis {d}")));
        }
        let rows = vx.rows();
        let n = idx.len();
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            data.extend(idx.iter().map(|&i| src[i]));
        }
        let in_shape = vx.shape().to_vec();
        let mut shape = in_shape.clone();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let mut acc = vec![0.0; rows * d];
            for r in 0..rows {
                for (k, &i) in idx.iter().enumerate() {
                    acc[r * d + i] += g.data()[r * n + k];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), acc).unwrap())]
        }))
    }

    // ----------------------------------------------------------------- reductions

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let s = va.data().iter().map(|v| v * v).sum();
        self.record(Tensor::scalar(s), &[a], move |g, _| {
            let k = 2.0 * g.item();
            let d = va.data().iter().map(|v| k * v).collect();
            vec![Some(Tensor::new(va.shape().to_vec(), d).unwrap())]
        })
    }

    pub fn mean_squares(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_squares(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ a·b` over all entries.
    pub fn dot_all(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        let v = self.value(p);
        let s: f64 = v.data().iter().sum();
        let shape = v.shape().to_vec();
        Ok(self.record(Tensor::scalar(s), &[p], move |g, _| {
            let n = shape.iter().product();
            vec![Some(Tensor::new(shape.clone(), vec![g.item(); n]).unwrap())]
        }))
    }

    // ----------------------------------------------------------------- dense

    /// `[.., K] × [K, M] → [.., M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if vb.shape().len() != 2 || va.last_dim() != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (k, m) = (vb.shape()[0], vb.shape()[1]);
        let rows = va.rows();
        let mut data = vec![0.0; rows * m];
        for r in 0..rows {
            let ar = &va.data()[r * k..(r + 1) * k];
            let or = &mut data[r * m..(r + 1) * m];
            for (i, &x) in ar.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let br = &vb.data()[i * m..(i + 1) * m];
                for (o, w) in or.iter_mut().zip(br) {
                    *o += x * w;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; rows * k];
                for r in 0..rows {
                    let gr = &g.data()[r * m..(r + 1) * m];
                    for i in 0..k {
                        let br = &vb.data()[i * m..(i + 1) * m];
                        d[r * k + i] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                    }
                }
                Tensor::new(va.shape().to_vec(), d).unwrap()
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * m];
                for r in 0..rows {
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let ar = &va.data()[r * k..(r + 1) * k];
                    for i in 0..k {
                        let x = ar[i];
                        for (o, gv) in d[i * m..(i + 1) * m].iter_mut().zip(gr) {
                            *o += x * gv;
                        }
                    }
                }
                Tensor::new(vec![k, m], d).unwrap()
            });
            vec![ga, gb]
        }))
    }

    // ----------------------------------------------------------------- spherical

    /// Per-degree channel mixing. `weights[i]` is the `[c_out, c_in]` matrix
    /// for `degrees[i]`; output degrees without a weight are zero. `bias`
    /// (shape `[c_out(0)]`) is added to the degree-0 block only.
    pub fn sph_linear(
        &mut self,
        x: Var,
        degrees: &[usize],
        weights: &[Var],
        bias: Option<Var>,
        in_layout: &RepLayout,
        out_layout: &RepLayout,
    ) -> Result<Var> {
        let vx = self.value(x).clone();
        if vx.last_dim() != in_layout.total_dim() {
            return Err(invalid(format!(
                "sph_linear: input last axis {} does not match layout {in_layout}",
                vx.last_dim()
            )));
        }
        let shapes: Vec<&[usize]> = weights.iter().map(|&w| self.shape(w)).collect();
        let mixes = degree_mixes(in_layout, out_layout, degrees, |_, ci, co| vec![co, ci], &shapes, "sph_linear")?;
        let c0 = out_layout.multiplicity(0);
        if let Some(b) = bias {
            if c0 == 0 || self.shape(b) != [c0] {
                return Err(shape_err("sph_linear bias", self.shape(b), &[c0]));
            }
        }
        let wv: Vec<Tensor> = weights.iter().map(|&w| self.value(w).clone()).collect();
        let bv = bias.map(|b| self.value(b).clone());
        let din = in_layout.total_dim();
        let dout = out_layout.total_dim();
        let rows = vx.rows();
        let mut data = vec![0.0; rows * dout];
        if let Some(b) = &bv {
            for or in data.chunks_mut(dout) {
                or[..c0].copy_from_slice(b.data());
            }
        }
        for mx in &mixes {
            let w = wv[mx.weight].data();
            for m in 0..mx.n {
                let a = View { data: vx.data(), off: mx.in_off + m, rs: din, cs: mx.n };
                let b = View { data: w, off: 0, rs: 1, cs: mx.c_in };
                gemm_acc(rows, mx.c_in, mx.c_out, a, b, &mut data, mx.out_off + m, dout, mx.n);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        let mut parents = vec![x];
        parents.extend_from_slice(weights);
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.record(out, &parents, move |g, needs| {
            let gd = g.data();
            let mut res: Vec<Option<Tensor>> = Vec::with_capacity(needs.len());
            let gx = needs[0].then(|| {
                let mut d = vec![0.0; rows * din];
                for mx in &mixes {
                    let w = wv[mx.weight].data();
                    for m in 0..mx.n {
                        let a = View { data: gd, off: mx.out_off + m, rs: dout, cs: mx.n };
                        let b = View { data: w, off: 0, rs: mx.c_in, cs: 1 };
                        gemm_acc(rows, mx.c_out, mx.c_in, a, b, &mut d, mx.in_off + m, din, mx.n);
                    }
                }
                Tensor::new(vx.shape().to_vec(), d).unwrap()
            });
            res.push(gx);
            for (k, mx) in mixes.iter().enumerate() {
                if !needs[1 + k] {
                    res.push(None);
                    continue;
                }
                let mut d = vec![0.0; mx.c_out * mx.c_in];
                for m in 0..mx.n {
                    let a = View { data: gd, off: mx.out_off + m, rs: mx.n, cs: dout };
                    let b = View { data: vx.data(), off: mx.in_off + m, rs: din, cs: mx.n };
                    gemm_acc(mx.c_out, rows, mx.c_in, a, b, &mut d, 0, mx.c_in, 1);
                }
                res.push(Some(Tensor::new(vec![mx.c_out, mx.c_in], d).unwrap()));
            }
            if has_bias {
                let gb = needs[needs.len() - 1].then(|| {
                    let mut d = vec![0.0; c0];
                    for r in 0..rows {
                        for (a, b) in d.iter_mut().zip(&gd[r * dout..r * dout + c0]) {
                            *a += b;
                        }
                    }
                    Tensor::new(vec![c0], d).unwrap()
                });
                res.push(gb);
            }
            res
        }))
    }

    /// Mixing-channel temporal cross-correlation over `[.., T, D_in]`.
    ///
    /// `out[t'] = Σ_tap Σ_i W_l[tap, i, o] · x[stride·t' + tap − pad]` per degree,
    /// zero outside `0..T`, `pad = (K − 1)/2`, `T' = ⌈T / stride⌉`.
    /// Weights are `[K, c_in, c_out]` per degree, shared across orders `m`.
    #[allow(clippy::too_many_arguments)]
    pub fn temporal_conv(
        &mut self,
        x: Var,
        degrees: &[usize],
        weights: &[Var],
        bias: Option<Var>,
        in_layout: &RepLayout,
        out_layout: &RepLayout,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        self.conv_impl(x, degrees, weights, bias, in_layout, out_layout, kernel, stride, false)
    }

    /// Adjoint of [`Graph::temporal_conv`] (plus optional degree-0 bias):
    /// `[.., T', D_in] → [.., T'·stride, D_out]`. Weights are `[K, c_out, c_in]`,
    /// i.e. the layout of the forward convolution this is the adjoint of.
    #[allow(clippy::too_many_arguments)]
    pub fn temporal_conv_transposed(
        &mut self,
        x: Var,
        degrees: &[usize],
        weights: &[Var],
        bias: Option<Var>,
        in_layout: &RepLayout,
        out_layout: &RepLayout,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        self.conv_impl(x, degrees, weights, bias, in_layout, out_layout, kernel, stride, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        x: Var,
        degrees: &[usize],
        weights: &[Var],
        bias: Option<Var>,
        in_layout: &RepLayout,
        out_layout: &RepLayout,
        kernel: usize,
        stride: usize,
        transposed: bool,
    ) -> Result<Var> {
        let op = if transposed { "temporal_conv_transposed" } else { "temporal_conv" };
        if kernel == 0 || kernel % 2 == 0 || stride == 0 {
            return Err(invalid(format!("{op}: kernel must be odd and stride positive")));
        }
        let vx = self.value(x).clone();
        let s = vx.shape();
        if s.len() < 2 || s[s.len() - 1] != in_layout.total_dim() {
            return Err(invalid(format!("{op}: input shape {s:?} does not match [.., T, {in_layout}]")));
        }
        let t_in = s[s.len() - 2];
        let batch: usize = s[..s.len() - 2].iter().product();
        let t_out = if transposed { t_in * stride } else { t_in.div_ceil(stride) };
        let shapes: Vec<&[usize]> = weights.iter().map(|&w| self.shape(w)).collect();
        let mixes = if transposed {
            degree_mixes(in_layout, out_layout, degrees, |_, ci, co| vec![kernel, co, ci], &shapes, op)?
        } else {
            degree_mixes(in_layout, out_layout, degrees, |_, ci, co| vec![kernel, ci, co], &shapes, op)?
        };
        let c0 = out_layout.multiplicity(0);
        if let Some(b) = bias {
            if c0 == 0 || self.shape(b) != [c0] {
                return Err(shape_err(op, self.shape(b), &[c0]));
            }
        }
        let wv: Vec<Tensor> = weights.iter().map(|&w| self.value(w).clone()).collect();
        let bv = bias.map(|b| self.value(b).clone());
        let din = in_layout.total_dim();
        let dout = out_layout.total_dim();
        let pad = (kernel - 1) / 2;
        let geo = ConvGeometry { batch, t_in, t_out, din, dout, kernel, stride, pad, transposed };

        let mut data = vec![0.0; batch * t_out * dout];
        if let Some(b) = &bv {
            for row in data.chunks_mut(dout) {
                row[..c0].copy_from_slice(b.data());
            }
        }
        geo.forward(vx.data(), &mixes, &wv, &mut data);

        let mut shape = s.to_vec();
        let nd = shape.len();
        shape[nd - 2] = t_out;
        shape[nd - 1] = dout;
        let out = Tensor::new(shape, data)?;
        let mut parents = vec![x];
        parents.extend_from_slice(weights);
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.record(out, &parents, move |g, needs| {
            let mut res: Vec<Option<Tensor>> = Vec::with_capacity(needs.len());
            res.push(needs[0].then(|| {
                let mut d = vec![0.0; vx.len()];
                geo.backward_input(g.data(), &mixes, &wv, &mut d);
                Tensor::new(vx.shape().to_vec(), d).unwrap()
            }));
            for (k, mx) in mixes.iter().enumerate() {
                if !needs[1 + k] {
                    res.push(None);
                    continue;
                }
                let mut d = vec![0.0; kernel * mx.c_in * mx.c_out];
                geo.backward_weight(vx.data(), g.data(), mx, &mut d);
                res.push(Some(Tensor::new(wv[k].shape().to_vec(), d).unwrap()));
            }
            if has_bias {
                res.push(needs[needs.len() - 1].then(|| {
                    let mut d = vec![0.0; c0];
                    for row in g.data().chunks(dout) {
                        for (a, b) in d.iter_mut().zip(&row[..c0]) {
                            *a += b;
                        }
                    }
                    Tensor::new(vec![c0], d).unwrap()
                }));
            }
            res
        }))
    }

    /// Per-slice dot products `⟨a_{l,c}, b_{l,c}⟩` → `[.., n_slices]`.
    pub fn slice_dot(&mut self, a: Var, b: Var, layout: &RepLayout) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        if va.shape() != vb.shape() || va.last_dim() != layout.total_dim() {
            return Err(shape_err("slice_dot", va.shape(), vb.shape()));
        }
        let sl: Rc<Vec<(usize, usize)>> = Rc::new(layout.slices().map(|(l, _, off)| (off, 2 * l + 1)).collect());
        let (rows, d, ns) = (va.rows(), va.last_dim(), sl.len());
        let mut data = Vec::with_capacity(rows * ns);
        for r in 0..rows {
            let (ar, br) = (&va.data()[r * d..(r + 1) * d], &vb.data()[r * d..(r + 1) * d]);
            data.extend(sl.iter().map(|&(o, n)| (o..o + n).map(|i| ar[i] * br[i]).sum::<f64>()));
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = ns;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, &[a, b], move |g, needs| {
            let fill = |src: &Tensor| {
                let mut d_out = vec![0.0; rows * d];
                for r in 0..rows {
                    for (k, &(o, n)) in sl.iter().enumerate() {
                        let gv = g.data()[r * ns + k];
                        for i in o..o + n {
                            d_out[r * d + i] = gv * src.data()[r * d + i];
                        }
                    }
                }
                Tensor::new(src.shape().to_vec(), d_out).unwrap()
            };
            vec![needs[0].then(|| fill(&vb)), needs[1].then(|| fill(&va))]
        }))
    }

    /// Per-slice Euclidean norms → `[.., n_slices]`; the gradient at a zero
    /// slice is defined as zero.
    pub fn slice_norm(&mut self, a: Var, layout: &RepLayout) -> Result<Var> {
        let va = self.value(a).clone();
        if va.last_dim() != layout.total_dim() {
            return Err(invalid(format!("slice_norm: shape {:?} does not match {layout}", va.shape())));
        }
        let sl: Vec<(usize, usize)> = layout.slices().map(|(l, _, off)| (off, 2 * l + 1)).collect();
        let (rows, d, ns) = (va.rows(), va.last_dim(), sl.len());
        let mut data = Vec::with_capacity(rows * ns);
        for r in 0..rows {
            let ar = &va.data()[r * d..(r + 1) * d];
            data.extend(sl.iter().map(|&(o, n)| ar[o..o + n].iter().map(|v| v * v).sum::<f64>().sqrt()));
        }
        let norms = data.clone();
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = ns;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, &[a], move |g, _| {
            let mut d_out = vec![0.0; rows * d];
            for r in 0..rows {
                for (k, &(o, n)) in sl.iter().enumerate() {
                    let nv = norms[r * ns + k];
                    if nv > 0.0 {
                        let s = g.data()[r * ns + k] / nv;
                        for i in o..o + n {
                            d_out[r * d + i] = s * va.data()[r * d + i];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(va.shape().to_vec(), d_out).unwrap())]
        }))
    }

    /// Multiplies every slice of `x` by the matching entry of `s` (`[.., n_slices]`).
    pub fn slice_scale(&mut self, x: Var, s: Var, layout: &RepLayout) -> Result<Var> {
        let (vx, vs) = (self.value(x).clone(), self.value(s).clone());
        let ns = layout.num_slices();
        if vx.last_dim() != layout.total_dim() || vs.last_dim() != ns || vx.rows() != vs.rows() {
            return Err(shape_err("slice_scale", vx.shape(), vs.shape()));
        }
        let sl: Vec<(usize, usize)> = layout.slices().map(|(l, _, off)| (off, 2 * l + 1)).collect();
        let (rows, d) = (vx.rows(), vx.last_dim());
        let mut data = vx.data().to_vec();
        for r in 0..rows {
            for (k, &(o, n)) in sl.iter().enumerate() {
                let f = vs.data()[r * ns + k];
                for v in &mut data[r * d + o..r * d + o + n] {
                    *v *= f;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, &[x, s], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut dd = g.data().to_vec();
                for r in 0..rows {
                    for (k, &(o, n)) in sl.iter().enumerate() {
                        let f = vs.data()[r * ns + k];
                        for v in &mut dd[r * d + o..r * d + o + n] {
                            *v *= f;
                        }
                    }
                }
                Tensor::new(vx.shape().to_vec(), dd).unwrap()
            });
            let gs = needs[1].then(|| {
                let mut dd = vec![0.0; rows * ns];
                for r in 0..rows {
                    for (k, &(o, n)) in sl.iter().enumerate() {
                        dd[r * ns + k] = (o..o + n).map(|i| g.data()[r * d + i] * vx.data()[r * d + i]).sum();
                    }
                }
                Tensor::new(vs.shape().to_vec(), dd).unwrap()
            });
            vec![gx, gs]
        }))
    }

    /// Gated nonlinearity: degree-0 channels pass through `x·σ(x)`; slice
    /// `(l ≥ 1, c)` is scaled by `σ(x_{0, c mod c0})`.
    pub fn gate(&mut self, x: Var, layout: &RepLayout) -> Result<Var> {
        let vx = self.value(x).clone();
        let c0 = layout.multiplicity(0);
        if c0 == 0 {
            return Err(invalid(format!("gate: layout {layout} has no degree-0 gate channels")));
        }
        if vx.last_dim() != layout.total_dim() {
            return Err(invalid(format!("gate: shape {:?} does not match {layout}", vx.shape())));
        }
        let sl: Vec<(usize, usize, usize)> =
            layout.slices().filter(|s| s.0 > 0).map(|(l, c, off)| (off, 2 * l + 1, c % c0)).collect();
        let (rows, d) = (vx.rows(), vx.last_dim());
        let mut data = vx.data().to_vec();
        for r in 0..rows {
            let xr = &vx.data()[r * d..(r + 1) * d];
            let or = &mut data[r * d..(r + 1) * d];
            for c in 0..c0 {
                or[c] = xr[c] * sigmoid(xr[c]);
            }
            for &(o, n, gc) in &sl {
                let s = sigmoid(xr[gc]);
                for v in &mut or[o..o + n] {
                    *v *= s;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let mut dd = vec![0.0; rows * d];
            for r in 0..rows {
                let xr = &vx.data()[r * d..(r + 1) * d];
                let gr = &g.data()[r * d..(r + 1) * d];
                let dr = &mut dd[r * d..(r + 1) * d];
                for c in 0..c0 {
                    let s = sigmoid(xr[c]);
                    dr[c] += gr[c] * (s + xr[c] * s * (1.0 - s));
                }
                for &(o, n, gc) in &sl {
                    let s = sigmoid(xr[gc]);
                    let mut dot = 0.0;
                    for i in o..o + n {
                        dr[i] += s * gr[i];
                        dot += gr[i] * xr[i];
                    }
                    dr[gc] += dot * s * (1.0 - s);
                }
            }
            vec![Some(Tensor::new(vx.shape().to_vec(), dd).unwrap())]
        }))
    }

    /// Divides each degree block of each row by `sqrt(mean_c ‖x_{l,c}‖² + eps)`.
    pub fn degree_norm(&mut self, x: Var, layout: &RepLayout, eps: f64) -> Result<Var> {
        let vx = self.value(x).clone();
        if vx.last_dim() != layout.total_dim() {
            return Err(invalid(format!("degree_norm: shape {:?} does not match {layout}", vx.shape())));
        }
        let blocks: Vec<(usize, usize, usize)> = layout
            .entries()
            .iter()
            .map(|&(l, c)| (layout.degree_offset(l).unwrap(), c * (2 * l + 1), c))
            .collect();
        let (rows, d) = (vx.rows(), vx.last_dim());
        let mut data = vx.data().to_vec();
        let mut scales = Vec::with_capacity(rows * blocks.len());
        for r in 0..rows {
            for &(o, len, c) in &blocks {
                let seg = &mut data[r * d + o..r * d + o + len];
                let ms = seg.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let s = 1.0 / (ms + eps).sqrt();
                for v in seg.iter_mut() {
                    *v *= s;
                }
                scales.push(s);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, &[x], move |g, _| {
            let mut dd = vec![0.0; rows * d];
            let nb = blocks.len();
            for r in 0..rows {
                for (bi, &(o, len, c)) in blocks.iter().enumerate() {
                    let s = scales[r * nb + bi];
                    let base = r * d + o;
                    let xg: f64 = (0..len).map(|i| vx.data()[base + i] * g.data()[base + i]).sum();
                    let k = s * s * s / c as f64 * xg;
                    for i in 0..len {
                        dd[base + i] = s * g.data()[base + i] - k * vx.data()[base + i];
                    }
                }
            }
            vec![Some(Tensor::new(vx.shape().to_vec(), dd).unwrap())]
        }))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    t_in: usize,
    t_out: usize,
    din: usize,
    dout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    transposed: bool,
}

/// `c[r] += a[r + delta] · B` over every row `r` with both rows in `0..rows`;
/// `a` has `ka` columns, `c` has `kc`.
fn shifted_gemm(rows: usize, delta: isize, a: &[f64], ka: usize, b: View<'_>, c: &mut [f64], kc: usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (rows as isize - delta.max(0)) as usize;
    if lo >= hi {
        return;
    }
    let av = View { data: a, off: (lo as isize + delta) as usize * ka, rs: ka, cs: 1 };
    gemm_acc(hi - lo, ka, kc, av, b, c, lo * kc, kc, 1);
}

/// `gw += Σ_r a[r + delta]ᵀ c[r]` with `gw[i, j] = gw[off + i·rs + j·cs]`.
#[allow(clippy::too_many_arguments)]
fn shifted_gemm_wt(rows: usize, delta: isize, a: &[f64], ka: usize, c: &[f64], kc: usize, gw: &mut [f64], off: usize, rs: usize, cs: usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (rows as isize - delta.max(0)) as usize;
    if lo >= hi {
        return;
    }
    let av = View { data: a, off: (lo as isize + delta) as usize * ka, rs: 1, cs: ka };
    let cv = View { data: c, off: lo * kc, rs: kc, cs: 1 };
    gemm_acc(ka, hi - lo, kc, av, cv, gw, off, rs, cs);
}

/// The convolution runs on one degree at a time in a scratch layout
/// `[batch, long_len + 2·pad, n, channels]`: zero-padded in time with the
/// channel axis innermost, so every tap is a single GEMM over all rows. The
/// short axis is placed at padded step `pad + stride·t`.
impl ConvGeometry {
    fn long_len(&self) -> usize {
        if self.transposed {
            self.t_out
        } else {
            self.t_in
        }
    }

    fn padded_rows(&self, n: usize) -> usize {
        self.batch * (self.long_len() + 2 * self.pad) * n
    }

    fn delta(&self, tap: usize, n: usize) -> isize {
        (tap as isize - self.pad as isize) * n as isize
    }

    /// Copies the degree block at `off` (`c` channels of `n` orders) of every
    /// `[batch, t, d]` row into scratch rows at padded step `pad + step·t`.
    #[allow(clippy::too_many_arguments)]
    fn pack(&self, src: &[f64], t: usize, d: usize, off: usize, c: usize, n: usize, step: usize) -> Vec<f64> {
        let tp = self.long_len() + 2 * self.pad;
        let mut buf = vec![0.0; self.padded_rows(n) * c];
        for b in 0..self.batch {
            for ti in 0..t {
                let row = &src[(b * t + ti) * d + off..][..c * n];
                let base = (b * tp + self.pad + ti * step) * n * c;
                for ch in 0..c {
                    for m in 0..n {
                        buf[base + m * c + ch] = row[ch * n + m];
                    }
                }
            }
        }
        buf
    }

    /// Inverse placement of [`ConvGeometry::pack`], accumulating into `dst`.
    #[allow(clippy::too_many_arguments)]
    fn unpack_add(&self, buf: &[f64], dst: &mut [f64], t: usize, d: usize, off: usize, c: usize, n: usize, step: usize) {
        let tp = self.long_len() + 2 * self.pad;
        for b in 0..self.batch {
            for ti in 0..t {
                let row = &mut dst[(b * t + ti) * d + off..][..c * n];
                let base = (b * tp + self.pad + ti * step) * n * c;
                for ch in 0..c {
                    for m in 0..n {
                        row[ch * n + m] += buf[base + m * c + ch];
                    }
                }
            }
        }
    }

    /// `W_tap` as a `[c_in, c_out]` view and its transpose.
    fn wviews<'a>(&self, w: &'a [f64], mx: &DegreeMix, tap: usize) -> (View<'a>, View<'a>) {
        let off = tap * mx.c_in * mx.c_out;
        if self.transposed {
            // [K, c_out, c_in]
            (View { data: w, off, rs: 1, cs: mx.c_in }, View { data: w, off, rs: mx.c_in, cs: 1 })
        } else {
            // [K, c_in, c_out]
            (View { data: w, off, rs: mx.c_out, cs: 1 }, View { data: w, off, rs: 1, cs: mx.c_out })
        }
    }

    fn forward(&self, x: &[f64], mixes: &[DegreeMix], wv: &[Tensor], out: &mut [f64]) {
        let s = self.stride;
        for mx in mixes {
            let (n, rows) = (mx.n, self.padded_rows(mx.n));
            let w = wv[mx.weight].data();
            let mut y = vec![0.0; rows * mx.c_out];
            if self.transposed {
                let xin = self.pack(x, self.t_in, self.din, mx.in_off, mx.c_in, n, s);
                for tap in 0..self.kernel {
                    let (wio, _) = self.wviews(w, mx, tap);
                    shifted_gemm(rows, -self.delta(tap, n), &xin, mx.c_in, wio, &mut y, mx.c_out);
                }
                self.unpack_add(&y, out, self.t_out, self.dout, mx.out_off, mx.c_out, n, 1);
            } else {
                let xin = self.pack(x, self.t_in, self.din, mx.in_off, mx.c_in, n, 1);
                for tap in 0..self.kernel {
                    let (wio, _) = self.wviews(w, mx, tap);
                    shifted_gemm(rows, self.delta(tap, n), &xin, mx.c_in, wio, &mut y, mx.c_out);
                }
                self.unpack_add(&y, out, self.t_out, self.dout, mx.out_off, mx.c_out, n, s);
            }
        }
    }

    fn backward_input(&self, g: &[f64], mixes: &[DegreeMix], wv: &[Tensor], gx: &mut [f64]) {
        let s = self.stride;
        for mx in mixes {
            let (n, rows) = (mx.n, self.padded_rows(mx.n));
            let w = wv[mx.weight].data();
            let mut d = vec![0.0; rows * mx.c_in];
            if self.transposed {
                let gy = self.pack(g, self.t_out, self.dout, mx.out_off, mx.c_out, n, 1);
                for tap in 0..self.kernel {
                    let (_, woi) = self.wviews(w, mx, tap);
                    shifted_gemm(rows, self.delta(tap, n), &gy, mx.c_out, woi, &mut d, mx.c_in);
                }
                self.unpack_add(&d, gx, self.t_in, self.din, mx.in_off, mx.c_in, n, s);
            } else {
                let gy = self.pack(g, self.t_out, self.dout, mx.out_off, mx.c_out, n, s);
                for tap in 0..self.kernel {
                    let (_, woi) = self.wviews(w, mx, tap);
                    shifted_gemm(rows, -self.delta(tap, n), &gy, mx.c_out, woi, &mut d, mx.c_in);
                }
                self.unpack_add(&d, gx, self.t_in, self.din, mx.in_off, mx.c_in, n, 1);
            }
        }
    }

    fn backward_weight(&self, x: &[f64], g: &[f64], mx: &DegreeMix, gw: &mut [f64]) {
        let (n, rows, s) = (mx.n, self.padded_rows(mx.n), self.stride);
        let (xstep, gstep) = if self.transposed { (s, 1) } else { (1, s) };
        let xin = self.pack(x, self.t_in, self.din, mx.in_off, mx.c_in, n, xstep);
        let gy = self.pack(g, self.t_out, self.dout, mx.out_off, mx.c_out, n, gstep);
        for tap in 0..self.kernel {
            let off = tap * mx.c_in * mx.c_out;
            let delta = self.delta(tap, n);
            if self.transposed {
                // gW[o, i] += Σ gy[r + δ]ᵀ xin[r]
                shifted_gemm_wt(rows, delta, &gy, mx.c_out, &xin, mx.c_in, gw, off, mx.c_in, 1);
            } else {
                // gW[i, o] += Σ xin[r + δ]ᵀ gy[r]
                shifted_gemm_wt(rows, delta, &xin, mx.c_in, &gy, mx.c_out, gw, off, mx.c_out, 1);
            }
        }
    }
}
