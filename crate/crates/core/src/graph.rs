//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value and a closure that maps the
//! output gradient to parent gradients. Node indices are a topological order, so
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: Backward<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output seeded with gradient one.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = bw(&g, &parent_vals, &node.value);
            grads[idx] = Some(g);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------- elementwise

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(p[1], |g, y| g * y)), Some(g.zip_map(p[0], |g, x| g * x))]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, &[a], Box::new(move |g, _, _| vec![Some(g.map(|x| x * c))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(
            v,
            &[a],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(p[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(
            v,
            &[a],
            Box::new(move |g, p, _| {
                vec![Some(g.zip_map(p[0], |g, x| if x > T::zero() { g } else { g * slope }))]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        let v = self.value(a).map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(
            v,
            &[a],
            Box::new(move |g, p, _| {
                vec![Some(g.zip_map(p[0], |g, x| {
                    let u = k * (x + c * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + three * c * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(
            v,
            &[a],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (T::one() - s)))]),
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: T) -> Var {
        let v = self.value(a).clone();
        self.push(v, &[a], Box::new(move |g, _, _| vec![Some(g.map(|x| -lambda * x))]))
    }

    /// Replaces entries at or above the median of all entries with 1. Gradient
    /// flows only through the kept entries; the median itself is treated as a
    /// constant.
    pub fn median_gate(&mut self, m: Var) -> Var {
        let src = self.value(m);
        let tau = median(src.data());
        let v = src.map(|x| if x >= tau { T::one() } else { x });
        self.push(
            v,
            &[m],
            Box::new(move |g, p, _| {
                vec![Some(g.zip_map(p[0], |g, x| if x >= tau { T::zero() } else { g }))]
            }),
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            &[a],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len().max(1) as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `sum(a * w)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        if self.shape(a) != w.shape() {
            return invalid("weighted_sum: shape mismatch");
        }
        let v = Tensor::scalar(
            self.value(a).data().iter().zip(w.data()).map(|(&x, &y)| x * y).sum(),
        );
        Ok(self.push(v, &[a], Box::new(move |g, _, _| vec![Some(w.map(|x| x * g.item()))])))
    }

    /// `[H, W, C] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 3 {
            return invalid("global_avg_pool expects [H, W, C]");
        }
        let c = x.last_dim();
        let n = x.rows();
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::from_vec(&[c], out)?;
        Ok(self.push(
            v,
            &[a],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for row in gx.data_mut().chunks_exact_mut(c) {
                    for (r, &gv) in row.iter_mut().zip(g.data()) {
                        *r = gv * inv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---------------------------------------------------------------- channel ops

    /// Slice of the last axis, `[start, end)`.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        if start >= end || end > d {
            return invalid(format!("slice [{start}, {end}) out of last dim {d}"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows() * w);
        for row in x.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            v,
            &[a],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for (row, grow) in gx.data_mut().chunks_exact_mut(d).zip(g.data().chunks_exact(w)) {
                    row[start..end].copy_from_slice(grow);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of zero tensors");
        }
        let lead = &self.shape(parts[0])[..self.shape(parts[0]).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return invalid("concat: leading dims differ");
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(parts[0]).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::from_vec(&shape, data)?;
        let widths2 = widths.clone();
        Ok(self.push(
            v,
            parts,
            Box::new(move |g, p, _| {
                let mut out: Vec<Vec<T>> =
                    widths2.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for grow in g.data().chunks_exact(total) {
                    let mut off = 0;
                    for (o, &w) in out.iter_mut().zip(&widths2) {
                        o.extend_from_slice(&grow[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter()
                    .zip(p)
                    .map(|(d, pv)| Some(Tensor::from_vec(pv.shape(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    // ---------------------------------------------------------------- dense layers

    /// `x [.., din] @ w [din, dout] + b [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.last_dim() != ws.shape()[0] {
            return invalid(format!("linear: x {:?} vs w {:?}", xs.shape(), ws.shape()));
        }
        let (din, dout) = (ws.shape()[0], ws.shape()[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return invalid("linear: bias shape");
            }
        }
        let rows = xs.rows();
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(xs.data(), ws.data(), &mut out, rows, din, dout);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let v = Tensor::from_vec(&shape, out)?;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        let has_bias = b.is_some();
        Ok(self.push(
            v,
            &parents,
            Box::new(move |g, p, _| {
                let (xv, wv) = (p[0], p[1]);
                let gx = matmul_bt(g.data(), wv.data(), rows, din, dout);
                let mut gw = vec![T::zero(); din * dout];
                matmul_at_acc(xv.data(), g.data(), &mut gw, rows, din, dout);
                let mut res = vec![
                    Some(Tensor::from_vec(xv.shape(), gx).unwrap()),
                    Some(Tensor::from_vec(wv.shape(), gw).unwrap()),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks_exact(dout) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    res.push(Some(Tensor::from_vec(&[dout], gb).unwrap()));
                }
                res
            }),
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.value(x);
        let d = xs.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return invalid("layer_norm: affine shape");
        }
        let rows = xs.rows();
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mu) * is;
            }
        }
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = vec![T::zero(); rows * d];
        for (orow, hrow) in out.chunks_exact_mut(d).zip(xhat.chunks_exact(d)) {
            for c in 0..d {
                orow[c] = hrow[c] * gv[c] + bv[c];
            }
        }
        let v = Tensor::from_vec(xs.shape(), out)?;
        Ok(self.push(
            v,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let gam = p[1].data();
                let mut gx = vec![T::zero(); rows * d];
                let mut ggam = vec![T::zero(); d];
                let mut gbet = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..d {
                        ggam[c] += grow[c] * hrow[c];
                        gbet[c] += grow[c];
                        let dh = grow[c] * gam[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for c in 0..d {
                        let dh = grow[c] * gam[c];
                        gx[r * d + c] = inv_std[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(&[d], ggam).unwrap()),
                    Some(Tensor::from_vec(&[d], gbet).unwrap()),
                ]
            }),
        ))
    }

    // ---------------------------------------------------------------- spatial ops

    /// 2-D convolution on `[H, W, Cin]` with weights `[K, K, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.shape().len() != 3 || ws.shape().len() != 4 {
            return invalid("conv2d expects x [H,W,C] and w [K,K,Cin,Cout]");
        }
        let (h, wd, cin) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let (k, k2, wcin, cout) = (ws.shape()[0], ws.shape()[1], ws.shape()[2], ws.shape()[3]);
        if k != k2 || wcin != cin || self.shape(b) != [cout] || stride == 0 {
            return invalid(format!("conv2d: x {:?} w {:?}", xs.shape(), ws.shape()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return invalid("conv2d: kernel larger than padded input");
        }
        let geo = ConvGeom { h, w: wd, cin, k, cout, stride, pad };
        let (ho, wo) = geo.out_dims();
        let mut out = vec![T::zero(); ho * wo * cout];
        let bv = self.value(b).data();
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(bv);
        }
        geo.forward(xs.data(), ws.data(), &mut out);
        let v = Tensor::from_vec(&[ho, wo, cout], out)?;
        Ok(self.push(
            v,
            &[x, w, b],
            Box::new(move |g, p, _| {
                let mut gx = vec![T::zero(); h * wd * cin];
                let mut gw = vec![T::zero(); k * k * cin * cout];
                let mut gb = vec![T::zero(); cout];
                for px in g.data().chunks_exact(cout) {
                    for (o, &v) in gb.iter_mut().zip(px) {
                        *o += v;
                    }
                }
                geo.backward(p[0].data(), p[1].data(), g.data(), &mut gx, &mut gw);
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gw).unwrap()),
                    Some(Tensor::from_vec(&[cout], gb).unwrap()),
                ]
            }),
        ))
    }

    /// Nearest-neighbour resize of `[h, w, C]` to `[out_h, out_w, C]`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 3 || out_h == 0 || out_w == 0 {
            return invalid("upsample expects [H,W,C] and nonzero output size");
        }
        let (h, w, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let src = move |i: usize, j: usize| ((i * h / out_h) * w + j * w / out_w) * c;
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for i in 0..out_h {
            for j in 0..out_w {
                let s = src(i, j);
                out.extend_from_slice(&xs.data()[s..s + c]);
            }
        }
        let v = Tensor::from_vec(&[out_h, out_w, c], out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for i in 0..out_h {
                    for j in 0..out_w {
                        let s = src(i, j);
                        let o = (i * out_w + j) * c;
                        for cc in 0..c {
                            gx.data_mut()[s + cc] += g.data()[o + cc];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scatters rows of `x [n, C]` into cells of a zero `[H, W, C]` grid.
    pub fn scatter_cells(&mut self, x: Var, cells: Vec<usize>, h: usize, w: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if xs.rows() != cells.len() || cells.iter().any(|&i| i >= h * w) {
            return invalid("scatter_cells: index/row mismatch");
        }
        let mut out = vec![T::zero(); h * w * c];
        for (row, &cell) in xs.data().chunks_exact(c).zip(&cells) {
            out[cell * c..(cell + 1) * c].copy_from_slice(row);
        }
        let v = Tensor::from_vec(&[h, w, c], out)?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |g, p, _| {
                let mut gx = Vec::with_capacity(cells.len() * c);
                for &cell in &cells {
                    gx.extend_from_slice(&g.data()[cell * c..(cell + 1) * c]);
                }
                vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
            }),
        ))
    }

    // ---------------------------------------------------------------- attention

    /// Multi-head scaled dot-product attention restricted to token groups.
    ///
    /// `q`, `k`, `v` are `[.., D]` with tokens along the leading axes; head `j`
    /// owns channels `[j*D/heads, (j+1)*D/heads)`. Each group lists the token
    /// indices that attend to one another; tokens not in any group get zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<Vec<usize>>,
        heads: usize,
    ) -> Result<Var> {
        self.check_same(q, k, "attention")?;
        self.check_same(q, v, "attention")?;
        let d = self.value(q).last_dim();
        if heads == 0 || d % heads != 0 {
            return invalid(format!("attention: {d} channels not divisible by {heads} heads"));
        }
        let n = self.value(q).rows();
        if groups.iter().flatten().any(|&t| t >= n) {
            return invalid("attention: token index out of range");
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &groups,
            heads,
        );
        let shape = self.shape(q).to_vec();
        let val = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            val,
            &[q, k, v],
            Box::new(move |g, p, _| {
                let (gq, gk, gv) = attention_backward(
                    p[0].data(),
                    p[1].data(),
                    p[2].data(),
                    g.data(),
                    d,
                    &groups,
                    heads,
                    &probs,
                );
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gq).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gk).unwrap()),
                    Some(Tensor::from_vec(p[2].shape(), gv).unwrap()),
                ]
            }),
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() || labels.is_empty() {
            return invalid("bce: logits/labels length mismatch or empty");
        }
        let n = T::lit(labels.len() as f64);
        let loss = x
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<T>()
            / n;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, p, _| {
                let gi = g.item() / n;
                let data = p[0].data().iter().zip(&labels).map(|(&z, &y)| (sigmoid(z) - y) * gi);
                vec![Some(Tensor::from_vec(p[0].shape(), data.collect()).unwrap())]
            }),
        ))
    }

    /// Summed sigmoid focal loss on logits; `targets` are 0/1.
    pub fn focal_with_logits(
        &mut self,
        logits: Var,
        targets: &[bool],
        alpha: T,
        gamma: T,
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return invalid("focal: logits/targets length mismatch");
        }
        let terms = move |z: T, y: bool| {
            let (zt, at) = if y { (z, alpha) } else { (-z, T::one() - alpha) };
            (zt, at)
        };
        let loss = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let (zt, at) = terms(z, y);
                let q = sigmoid(-zt);
                at * q.powf(gamma) * softplus(-zt)
            })
            .sum::<T>();
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, p, _| {
                let gi = g.item();
                let data = p[0].data().iter().zip(&targets).map(|(&z, &y)| {
                    let (zt, at) = terms(z, y);
                    let pt = sigmoid(zt);
                    let q = sigmoid(-zt);
                    let dz = -at * q.powf(gamma) * (gamma * pt * softplus(-zt) + q);
                    let dx = if y { dz } else { -dz };
                    dx * gi
                });
                vec![Some(Tensor::from_vec(p[0].shape(), data.collect()).unwrap())]
            }),
        ))
    }

    /// `sum(weight * smooth_l1(pred - target))` with constant target and weights.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
        beta: T,
    ) -> Result<Var> {
        let x = self.value(pred);
        if x.shape() != target.shape() || x.shape() != weight.shape() {
            return invalid("smooth_l1: shape mismatch");
        }
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&p, &t), &w)| w * smooth_l1(p - t, beta))
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred],
            Box::new(move |g, p, _| {
                let gi = g.item();
                let data = p[0].data().iter().zip(target.data()).zip(weight.data()).map(
                    |((&pv, &t), &w)| {
                        let r = pv - t;
                        let d = if r.abs() < beta { r / beta } else { r.signum() };
                        w * d * gi
                    },
                );
                vec![Some(Tensor::from_vec(p[0].shape(), data.collect()).unwrap())]
            }),
        ))
    }
}

// -------------------------------------------------------------------- kernels

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn smooth_l1<T: Scalar>(r: T, beta: T) -> T {
    let a = r.abs();
    if a < beta {
        T::lit(0.5) * r * r / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

/// Median of a slice: mean of the two middle values for even lengths.
pub fn median<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// `out[n, m] += a[n, k] @ b[k, m]`
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// `g[n, m] @ w[k, m]^T -> [n, k]`
fn matmul_bt<T: Scalar>(g: &[T], w: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(grow, &w[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `out[k, m] += x[n, k]^T @ g[n, m]`
fn matmul_at_acc<T: Scalar>(x: &[T], g: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += xv * gv;
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Input pixel under kernel tap `(ki, kj)` of output `(oi, oj)`, if in bounds.
    #[inline]
    fn tap(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            None
        } else {
            Some(i as usize * self.w + j as usize)
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (ho, wo) = self.out_dims();
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        for oi in 0..ho {
            for oj in 0..wo {
                let o = &mut out[(oi * wo + oj) * cout..(oi * wo + oj + 1) * cout];
                for ki in 0..k {
                    for kj in 0..k {
                        let Some(px) = self.tap(oi, oj, ki, kj) else { continue };
                        let xin = &x[px * cin..(px + 1) * cin];
                        let wbase = (ki * k + kj) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (ov, &wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward<T: Scalar>(&self, x: &[T], w: &[T], g: &[T], gx: &mut [T], gw: &mut [T]) {
        let (ho, wo) = self.out_dims();
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        for oi in 0..ho {
            for oj in 0..wo {
                let go = &g[(oi * wo + oj) * cout..(oi * wo + oj + 1) * cout];
                for ki in 0..k {
                    for kj in 0..k {
                        let Some(px) = self.tap(oi, oj, ki, kj) else { continue };
                        let wbase = (ki * k + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[px * cin + ci];
                            let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            gx[px * cin + ci] += dot(go, wrow);
                            if xv != T::zero() {
                                let gwrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (gwv, &gv) in gwrow.iter_mut().zip(go) {
                                    *gwv += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Attention probabilities per `(group, head)`, each row-major `n_g x n_g`.
pub type AttentionProbs<T> = Vec<Vec<T>>;

/// Head `off..off+dh` of the group's tokens, transposed to `[dh, n]`.
fn gather_t<T: Scalar>(x: &[T], grp: &[usize], d: usize, off: usize, dh: usize) -> Vec<T> {
    let n = grp.len();
    let mut t = vec![T::zero(); dh * n];
    for (b, &tb) in grp.iter().enumerate() {
        for (c, &val) in x[tb * d + off..tb * d + off + dh].iter().enumerate() {
            t[c * n + b] = val;
        }
    }
    t
}

fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Grouped multi-head attention forward pass. Returns the output token matrix and
/// the softmax weights in group-major, head-minor order.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    groups: &[Vec<usize>],
    heads: usize,
) -> (Vec<T>, AttentionProbs<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for grp in groups {
        let n = grp.len();
        for hd in 0..heads {
            let off = hd * dh;
            let kt = gather_t(k, grp, d, off, dh);
            let vt = gather_t(v, grp, d, off, dh);
            let mut p = vec![T::zero(); n * n];
            for (a, &ta) in grp.iter().enumerate() {
                let row = &mut p[a * n..(a + 1) * n];
                for (c, &qc) in q[ta * d + off..ta * d + off + dh].iter().enumerate() {
                    axpy(row, qc * scale, &kt[c * n..(c + 1) * n]);
                }
                let mx = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let inv = T::one() / z;
                for s in row.iter_mut() {
                    *s *= inv;
                }
                let oa = &mut out[ta * d + off..ta * d + off + dh];
                for (c, o) in oa.iter_mut().enumerate() {
                    *o = dot(row, &vt[c * n..(c + 1) * n]);
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    d: usize,
    groups: &[Vec<usize>],
    heads: usize,
    probs: &AttentionProbs<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut pi = 0;
    for grp in groups {
        let n = grp.len();
        for hd in 0..heads {
            let off = hd * dh;
            let p = &probs[pi];
            pi += 1;
            let kt = gather_t(k, grp, d, off, dh);
            let vt = gather_t(v, grp, d, off, dh);
            // transposed accumulators for dK and dV
            let mut gkt = vec![T::zero(); dh * n];
            let mut gvt = vec![T::zero(); dh * n];
            let mut ds = vec![T::zero(); n];
            for (a, &ta) in grp.iter().enumerate() {
                let ga = &g[ta * d + off..ta * d + off + dh];
                let qa = &q[ta * d + off..ta * d + off + dh];
                let prow = &p[a * n..(a + 1) * n];
                // dP[a,b] = g_a . v_b ; dS = P * (dP - sum_b P dP)
                ds.iter_mut().for_each(|x| *x = T::zero());
                for (c, &gc) in ga.iter().enumerate() {
                    axpy(&mut ds, gc, &vt[c * n..(c + 1) * n]);
                    axpy(&mut gvt[c * n..(c + 1) * n], gc, prow);
                }
                let acc = dot(prow, &ds);
                for (x, &pb) in ds.iter_mut().zip(prow) {
                    *x = pb * (*x - acc) * scale;
                }
                let gqa = &mut gq[ta * d + off..ta * d + off + dh];
                for (c, o) in gqa.iter_mut().enumerate() {
                    *o += dot(&ds, &kt[c * n..(c + 1) * n]);
                    axpy(&mut gkt[c * n..(c + 1) * n], qa[c], &ds);
                }
            }
            for (b, &tb) in grp.iter().enumerate() {
                for c in 0..dh {
                    gk[tb * d + off + c] += gkt[c * n + b];
                    gv[tb * d + off + c] += gvt[c * n + b];
                }
            }
        }
    }
    (gq, gk, gv)
}
