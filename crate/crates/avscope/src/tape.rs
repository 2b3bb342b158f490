//! Reverse-mode autodiff over axis-tagged tensors.
//!
//! Ops append nodes to a tape; `backward` replays the graph in reverse and
//! accumulates gradients per parameter name. Recording is single-threaded;
//! batch items each get their own tape and merge gradients afterwards.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::axis::AxisRole;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{self, AxisTaggedTensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Gradient of each parent given (output grad, own value, parent values).
type GradFn =
    Box<dyn Fn(&AxisTaggedTensor, &AxisTaggedTensor, &[&AxisTaggedTensor]) -> Result<Vec<AxisTaggedTensor>>>;

struct Node {
    value: AxisTaggedTensor,
    parents: Vec<ValueId>,
    grad_fn: Option<GradFn>,
}

/// Parameter-name to gradient map produced by [`Tape::backward`].
pub type GradientMap = BTreeMap<String, AxisTaggedTensor>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_ids: HashMap<String, ValueId>,
}

/// Sum `g` down to exactly `target` axes: reduces axes absent from `target`,
/// then reorders. Used to push gradients through broadcasts.
fn reduce_to(g: &AxisTaggedTensor, target: &[(AxisRole, usize)]) -> Result<AxisTaggedTensor> {
    let target_roles: Vec<AxisRole> = target.iter().map(|&(r, _)| r).collect();
    let extra: Vec<AxisRole> = g
        .axes()
        .iter()
        .map(|&(r, _)| r)
        .filter(|r| !target_roles.contains(r))
        .collect();
    let summed = if extra.is_empty() { g.clone() } else { tensor::sum_over_axes(g, &extra)? };
    summed.transpose_to(&target_roles)
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

    pub fn value(&self, id: ValueId) -> &AxisTaggedTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: AxisTaggedTensor, parents: Vec<ValueId>, grad_fn: Option<GradFn>) -> ValueId {
        self.nodes.push(Node { value, parents, grad_fn });
        ValueId(self.nodes.len() - 1)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: AxisTaggedTensor) -> ValueId {
        self.push(t, vec![], None)
    }

    /// Parameter leaf; repeated requests for the same name return the same
    /// node so gradients accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?.clone();
        let id = self.push(t, vec![], None);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    // ── elementwise and structural ops ───────────────────────────────────────

    /// `a + b` where `b`'s axes are a subset of `a`'s (broadcast on the rest).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::zip_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        let b_axes = self.value(b).axes().to_vec();
        let grad: GradFn = Box::new(move |g, _, _| Ok(vec![g.clone(), reduce_to(g, &b_axes)?]));
        Ok(self.push(out, vec![a, b], Some(grad)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::zip_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        let b_axes = self.value(b).axes().to_vec();
        let grad: GradFn = Box::new(move |g, _, _| {
            Ok(vec![g.clone(), reduce_to(g, &b_axes)?.map(|x| -x)])
        });
        Ok(self.push(out, vec![a, b], Some(grad)))
    }

    /// `a * b` elementwise where `b`'s axes are a subset of `a`'s.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = tensor::zip_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        let b_axes = self.value(b).axes().to_vec();
        let grad: GradFn = Box::new(move |g, _, parents| {
            let da = tensor::zip_broadcast(g, parents[1], |x, y| x * y)?;
            let gb_full = tensor::zip_broadcast(g, parents[0], |x, y| x * y)?;
            Ok(vec![da, reduce_to(&gb_full, &b_axes)?])
        });
        Ok(self.push(out, vec![a, b], Some(grad)))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let out = self.value(a).map(|x| x * c);
        let grad: GradFn = Box::new(move |g, _, _| Ok(vec![g.map(|x| x * c)]));
        self.push(out, vec![a], Some(grad))
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let out = self.value(a).map(|x| x + c);
        let grad: GradFn = Box::new(|g, _, _| Ok(vec![g.clone()]));
        self.push(out, vec![a], Some(grad))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(|x| x.max(0.0));
        let grad: GradFn = Box::new(|g, _, parents| {
            let mut d = g.clone();
            for (dv, &x) in d.data_mut().iter_mut().zip(parents[0].data()) {
                if x <= 0.0 {
                    *dv = 0.0;
                }
            }
            Ok(vec![d])
        });
        self.push(out, vec![a], Some(grad))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(stable_sigmoid);
        let grad: GradFn = Box::new(|g, own, _| {
            let mut d = g.clone();
            for (dv, &y) in d.data_mut().iter_mut().zip(own.data()) {
                *dv *= y * (1.0 - y);
            }
            Ok(vec![d])
        });
        self.push(out, vec![a], Some(grad))
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&mut self, a: ValueId) -> Result<ValueId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("ln of non-positive value".to_string()));
        }
        let out = self.value(a).map(f64::ln);
        let grad: GradFn = Box::new(|g, _, parents| {
            let mut d = g.clone();
            for (dv, &x) in d.data_mut().iter_mut().zip(parents[0].data()) {
                *dv /= x;
            }
            Ok(vec![d])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Inverted dropout. With `training == false` this is the identity and
    /// records nothing. The mask comes entirely from `rng`.
    pub fn dropout(&mut self, a: ValueId, rate: f64, rng: &mut ChaCha8Rng, training: bool) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(a).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let grad: GradFn = Box::new(move |g, _, _| {
            let mut d = g.clone();
            for (dv, &m) in d.data_mut().iter_mut().zip(&mask) {
                *dv *= m;
            }
            Ok(vec![d])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    pub fn concat(&mut self, parts: &[ValueId], role: AxisRole) -> Result<ValueId> {
        let tensors: Vec<&AxisTaggedTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = AxisTaggedTensor::concat_axis(role, &tensors)?;
        let extents: Vec<usize> = tensors.iter().map(|t| t.extent(role)).collect::<Result<_>>()?;
        let grad: GradFn = Box::new(move |g, _, _| {
            let mut grads = Vec::with_capacity(extents.len());
            let mut start = 0;
            for &e in &extents {
                grads.push(g.slice_axis(role, start, e)?);
                start += e;
            }
            Ok(grads)
        });
        Ok(self.push(out, parts.to_vec(), Some(grad)))
    }

    pub fn slice(&mut self, a: ValueId, role: AxisRole, start: usize, len: usize) -> Result<ValueId> {
        let out = self.value(a).slice_axis(role, start, len)?;
        let grad: GradFn = Box::new(move |g, _, parents| {
            // Scatter the slice gradient back into a zero tensor.
            let mut full = AxisTaggedTensor::zeros(parents[0].axes())?;
            let p = parents[0].axis_pos(role)?;
            let extent = parents[0].axes()[p].1;
            let inner: usize = parents[0].axes()[p + 1..].iter().map(|&(_, e)| e).product();
            let outer: usize = parents[0].axes()[..p].iter().map(|&(_, e)| e).product();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * extent * inner + start * inner;
                full.data_mut()[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[src..src + len * inner]);
            }
            Ok(vec![full])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    pub fn relabel(&mut self, a: ValueId, from: AxisRole, to: AxisRole) -> Result<ValueId> {
        let out = self.value(a).clone().relabel(from, to)?;
        let grad: GradFn = Box::new(move |g, _, _| Ok(vec![g.clone().relabel(to, from)?]));
        Ok(self.push(out, vec![a], Some(grad)))
    }

    pub fn sum_over(&mut self, a: ValueId, axes: &[AxisRole]) -> Result<ValueId> {
        let out = tensor::sum_over_axes(self.value(a), axes)?;
        let grad: GradFn = Box::new(|g, _, parents| {
            Ok(vec![tensor::zip_broadcast(parents[0], g, |_, y| y)?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.value(a).numel() as f64;
        let roles: Vec<AxisRole> = self.value(a).roles();
        let total = tensor::sum_over_axes(self.value(a), &roles)?;
        let out = AxisTaggedTensor::scalar(total.item()? / n);
        let grad: GradFn = Box::new(move |g, _, parents| {
            let gv = g.item()? / n;
            Ok(vec![parents[0].map(|_| gv)])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Drop an extent-1 axis.
    pub fn squeeze(&mut self, a: ValueId, role: AxisRole) -> Result<ValueId> {
        let t = self.value(a);
        let p = t.axis_pos(role)?;
        if t.axes()[p].1 != 1 {
            return Err(Error::shape(format!("squeeze on {role:?} with extent {}", t.axes()[p].1)));
        }
        let mut axes = t.axes().to_vec();
        axes.remove(p);
        let out = AxisTaggedTensor::from_vec(&axes, t.data().to_vec())?;
        let grad: GradFn = Box::new(|g, _, parents| {
            Ok(vec![AxisTaggedTensor::from_vec(parents[0].axes(), g.data().to_vec())?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Split a trailing sample axis `[.., Time(n*win)]` into frames
    /// `[.., Time(n), Depth(win)]`. Pure reshape; strides are unchanged.
    pub fn frame(&mut self, a: ValueId, win: usize) -> Result<ValueId> {
        let t = self.value(a);
        let (last, rest) =
            t.axes().split_last().ok_or_else(|| Error::shape("frame on rank-0 tensor"))?;
        if last.0 != AxisRole::Time || last.1 % win != 0 {
            return Err(Error::shape(format!(
                "frame wants trailing Time axis divisible by {win}, got {:?}",
                t.axes()
            )));
        }
        if t.has_axis(AxisRole::Depth) {
            return Err(Error::shape("frame target already has a Depth axis"));
        }
        let mut axes = rest.to_vec();
        axes.push((AxisRole::Time, last.1 / win));
        axes.push((AxisRole::Depth, win));
        let out = AxisTaggedTensor::from_vec(&axes, t.data().to_vec())?;
        let grad: GradFn = Box::new(|g, _, parents| {
            Ok(vec![AxisTaggedTensor::from_vec(parents[0].axes(), g.data().to_vec())?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Inverse of [`Tape::frame`]: `[.., Time(n), Depth(win)] -> [.., Time(n*win)]`.
    pub fn unframe(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a);
        let r = t.rank();
        if r < 2 || t.axes()[r - 2].0 != AxisRole::Time || t.axes()[r - 1].0 != AxisRole::Depth {
            return Err(Error::shape(format!("unframe wants trailing (Time, Depth), got {:?}", t.axes())));
        }
        let mut axes = t.axes()[..r - 2].to_vec();
        axes.push((AxisRole::Time, t.axes()[r - 2].1 * t.axes()[r - 1].1));
        let out = AxisTaggedTensor::from_vec(&axes, t.data().to_vec())?;
        let grad: GradFn = Box::new(|g, _, parents| {
            Ok(vec![AxisTaggedTensor::from_vec(parents[0].axes(), g.data().to_vec())?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Split the Depth axis `[.., Depth(count*d)]` into a leading role:
    /// `[role(count), .., Depth(d)]` with `out[r, .., k] = in[.., r*d + k]`.
    pub fn unflatten_depth(&mut self, a: ValueId, role: AxisRole, count: usize) -> Result<ValueId> {
        let t = self.value(a);
        let r = t.rank();
        if r == 0 || t.axes()[r - 1].0 != AxisRole::Depth || t.axes()[r - 1].1 % count != 0 {
            return Err(Error::shape(format!(
                "unflatten_depth wants trailing Depth divisible by {count}, got {:?}",
                t.axes()
            )));
        }
        if t.has_axis(role) {
            return Err(Error::shape(format!("unflatten_depth target role {role:?} already present")));
        }
        let d = t.axes()[r - 1].1 / count;
        let rows: usize = t.numel() / (count * d);
        let mut axes = vec![(role, count)];
        axes.extend_from_slice(&t.axes()[..r - 1]);
        axes.push((AxisRole::Depth, d));
        let mut data = vec![0.0; t.numel()];
        for c in 0..count {
            for row in 0..rows {
                let src = row * count * d + c * d;
                let dst = c * rows * d + row * d;
                data[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
            }
        }
        let out = AxisTaggedTensor::from_vec(&axes, data)?;
        let grad: GradFn = Box::new(move |g, _, parents| {
            let mut dg = vec![0.0; parents[0].numel()];
            for c in 0..count {
                for row in 0..rows {
                    let src = c * rows * d + row * d;
                    let dst = row * count * d + c * d;
                    dg[dst..dst + d].copy_from_slice(&g.data()[src..src + d]);
                }
            }
            Ok(vec![AxisTaggedTensor::from_vec(parents[0].axes(), dg)?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    // ── contractions and network layers ──────────────────────────────────────

    /// Generalized inner product; see [`tensor::inner_product`].
    pub fn inner_product(&mut self, a: ValueId, b: ValueId, reduce: &[AxisRole]) -> Result<ValueId> {
        let out = tensor::inner_product(self.value(a), self.value(b), reduce)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let a_axes = ta.axes().to_vec();
        let b_axes = tb.axes().to_vec();
        // Roles private to each operand become the reduce set of the
        // adjoint contractions.
        let a_only: Vec<AxisRole> = ta
            .axes()
            .iter()
            .map(|&(r, _)| r)
            .filter(|r| !reduce.contains(r) && !tb.has_axis(*r))
            .collect();
        let b_only: Vec<AxisRole> = tb
            .axes()
            .iter()
            .map(|&(r, _)| r)
            .filter(|r| !reduce.contains(r) && !ta.has_axis(*r))
            .collect();
        let grad: GradFn = Box::new(move |g, _, parents| {
            let da = tensor::inner_product(g, parents[1], &b_only)?;
            let db = tensor::inner_product(g, parents[0], &a_only)?;
            Ok(vec![reduce_to(&da, &a_axes)?, reduce_to(&db, &b_axes)?])
        });
        Ok(self.push(out, vec![a, b], Some(grad)))
    }

    /// Affine map over the Depth axis using parameters `{name}/w` (and
    /// `{name}/b` when `bias`). Registers the parameters on first use.
    pub fn dense(
        &mut self,
        store: &mut ParameterStore,
        name: &str,
        a: ValueId,
        d_out: usize,
        bias: bool,
    ) -> Result<ValueId> {
        self.dense_scaled(store, name, a, d_out, bias, 1.0)
    }

    /// `dense` with the weight init shrunk by `gain`; layers feeding a
    /// residual sum use a small gain so the block starts near identity.
    pub fn dense_scaled(
        &mut self,
        store: &mut ParameterStore,
        name: &str,
        a: ValueId,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Result<ValueId> {
        let d_in = self.value(a).extent(AxisRole::Depth)?;
        let w_name = format!("{name}/w");
        store.ensure_uniform_scaled(&w_name, &[d_in, d_out], d_in, gain)?;
        let w = self.param(store, &w_name)?;
        let b = if bias {
            let b_name = format!("{name}/b");
            store.ensure_const(&b_name, &[d_out], 0.0)?;
            Some(self.param(store, &b_name)?)
        } else {
            None
        };
        self.dense_with(a, w, b, d_out)
    }

    fn dense_with(&mut self, a: ValueId, w: ValueId, b: Option<ValueId>, d_out: usize) -> Result<ValueId> {
        // Fast path wants Depth trailing; transpose around the op otherwise.
        let depth_last = {
            let t = self.value(a);
            t.axis_pos(AxisRole::Depth)? == t.rank() - 1
        };
        if !depth_last {
            let t = self.value(a);
            let mut order = t.roles();
            let p = t.axis_pos(AxisRole::Depth)?;
            order.remove(p);
            let original = t.roles();
            order.push(AxisRole::Depth);
            let moved = self.transpose(a, &order)?;
            let out = self.dense_with(moved, w, b, d_out)?;
            return self.transpose(out, &original);
        }

        let t = self.value(a);
        let d_in = t.extent(AxisRole::Depth)?;
        let rows = t.numel() / d_in;
        let wt = self.value(w);
        if wt.numel() != d_in * d_out {
            return Err(Error::shape(format!(
                "dense weight has {} scalars, expected {}x{}",
                wt.numel(),
                d_in,
                d_out
            )));
        }
        let mut out_data = match b {
            Some(bid) => {
                let bv = self.value(bid).data();
                let mut v = Vec::with_capacity(rows * d_out);
                for _ in 0..rows {
                    v.extend_from_slice(bv);
                }
                v
            }
            None => vec![0.0; rows * d_out],
        };
        gemm_acc(self.value(a).data(), self.value(w).data(), &mut out_data, rows, d_in, d_out);
        let mut out_axes = self.value(a).axes().to_vec();
        let r = out_axes.len();
        out_axes[r - 1].1 = d_out;
        let out = AxisTaggedTensor::from_vec(&out_axes, out_data)?;

        let has_bias = b.is_some();
        let grad: GradFn = Box::new(move |g, _, parents| {
            let x = parents[0];
            let w = parents[1];
            let rows = x.numel() / d_in;
            // dX = G . W^T : row i of dX = per-row dots with rows of W.
            let mut dx = vec![0.0; x.numel()];
            for row in 0..rows {
                let grow = &g.data()[row * d_out..(row + 1) * d_out];
                let dxrow = &mut dx[row * d_in..(row + 1) * d_in];
                for (i, slot) in dxrow.iter_mut().enumerate() {
                    let wrow = &w.data()[i * d_out..(i + 1) * d_out];
                    let mut acc = 0.0;
                    for (gv, wv) in grow.iter().zip(wrow) {
                        acc += gv * wv;
                    }
                    *slot = acc;
                }
            }
            // dW = X^T . G accumulated row by row.
            let mut dw = vec![0.0; d_in * d_out];
            for row in 0..rows {
                let xrow = &x.data()[row * d_in..(row + 1) * d_in];
                let grow = &g.data()[row * d_out..(row + 1) * d_out];
                for (i, &xv) in xrow.iter().enumerate() {
                    let dwrow = &mut dw[i * d_out..(i + 1) * d_out];
                    for (slot, &gv) in dwrow.iter_mut().zip(grow) {
                        *slot += xv * gv;
                    }
                }
            }
            let mut grads = vec![
                AxisTaggedTensor::from_vec(x.axes(), dx)?,
                AxisTaggedTensor::from_vec(w.axes(), dw)?,
            ];
            if has_bias {
                let mut db = vec![0.0; d_out];
                for row in 0..rows {
                    let grow = &g.data()[row * d_out..(row + 1) * d_out];
                    for (slot, &gv) in db.iter_mut().zip(grow) {
                        *slot += gv;
                    }
                }
                grads.push(AxisTaggedTensor::from_vec(parents[2].axes(), db)?);
            }
            Ok(grads)
        });
        let mut parents = vec![a, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        Ok(self.push(out, parents, Some(grad)))
    }

    pub fn transpose(&mut self, a: ValueId, order: &[AxisRole]) -> Result<ValueId> {
        let out = self.value(a).transpose_to(order)?;
        let original: Vec<AxisRole> = self.value(a).roles();
        let grad: GradFn = Box::new(move |g, _, _| Ok(vec![g.transpose_to(&original)?]));
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Layer normalization over the Depth axis with learned gain and bias
    /// (`{name}/gain`, `{name}/bias`), epsilon 1e-6, population variance.
    pub fn layer_norm(&mut self, store: &mut ParameterStore, name: &str, a: ValueId) -> Result<ValueId> {
        const EPS: f64 = 1e-6;
        let t = self.value(a);
        let p = t.axis_pos(AxisRole::Depth)?;
        if p != t.rank() - 1 {
            let mut order = t.roles();
            let original = order.clone();
            order.remove(p);
            order.push(AxisRole::Depth);
            let moved = self.transpose(a, &order)?;
            let out = self.layer_norm(store, name, moved)?;
            return self.transpose(out, &original);
        }
        let d = t.extent(AxisRole::Depth)?;
        store.ensure_const(&format!("{name}/gain"), &[d], 1.0)?;
        store.ensure_const(&format!("{name}/bias"), &[d], 0.0)?;
        let gain = self.param(store, &format!("{name}/gain"))?;
        let bias = self.param(store, &format!("{name}/bias"))?;

        let x = self.value(a);
        let rows = x.numel() / d;
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out_data = vec![0.0; x.numel()];
        for row in 0..rows {
            let xr = &x.data()[row * d..(row + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            let or = &mut out_data[row * d..(row + 1) * d];
            for i in 0..d {
                or[i] = (xr[i] - mean) * istd * gv[i] + bv[i];
            }
        }
        let out = AxisTaggedTensor::from_vec(x.axes(), out_data)?;
        let grad: GradFn = Box::new(move |g, _, parents| {
            let x = parents[0];
            let gain = parents[1].data();
            let rows = x.numel() / d;
            let mut dx = vec![0.0; x.numel()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for row in 0..rows {
                let xr = &x.data()[row * d..(row + 1) * d];
                let gr = &g.data()[row * d..(row + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + EPS).sqrt();
                // xhat = (x - mean) * istd; dxhat = g * gain
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for i in 0..d {
                    let xhat = (xr[i] - mean) * istd;
                    let dxhat = gr[i] * gain[i];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    dgain[i] += gr[i] * xhat;
                    dbias[i] += gr[i];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                let dxr = &mut dx[row * d..(row + 1) * d];
                for i in 0..d {
                    let xhat = (xr[i] - mean) * istd;
                    let dxhat = gr[i] * gain[i];
                    dxr[i] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            Ok(vec![
                AxisTaggedTensor::from_vec(x.axes(), dx)?,
                AxisTaggedTensor::from_vec(parents[1].axes(), dgain)?,
                AxisTaggedTensor::from_vec(parents[2].axes(), dbias)?,
            ])
        });
        Ok(self.push(out, vec![a, gain, bias], Some(grad)))
    }

    pub fn softmax(&mut self, a: ValueId, axes: &[AxisRole]) -> Result<ValueId> {
        let out = tensor::softmax_over_axes(self.value(a), axes)?;
        let axes = axes.to_vec();
        let grad: GradFn = Box::new(move |g, own, _| {
            // ds = y * (g - sum_axes(g * y))
            let gy = tensor::zip_broadcast(g, own, |a, b| a * b)?;
            let s = tensor::sum_over_axes(&gy, &axes)?;
            let centered = tensor::zip_broadcast(g, &s, |a, b| a - b)?;
            Ok(vec![tensor::zip_broadcast(&centered, own, |a, b| a * b)?])
        });
        Ok(self.push(out, vec![a], Some(grad)))
    }

    /// Dilated 1-D convolution over the trailing (Time, Depth) axes with
    /// zero padding keeping the frame count ("same"). Kernel `{name}/w` has
    /// extents [taps, c_in, c_out]; bias `{name}/b`.
    pub fn conv1d(
        &mut self,
        store: &mut ParameterStore,
        name: &str,
        a: ValueId,
        taps: usize,
        dilation: usize,
        c_out: usize,
    ) -> Result<ValueId> {
        let t = self.value(a);
        let r = t.rank();
        if r < 2 || t.axes()[r - 2].0 != AxisRole::Time || t.axes()[r - 1].0 != AxisRole::Depth {
            return Err(Error::shape(format!("conv1d wants trailing (Time, Depth), got {:?}", t.axes())));
        }
        let c_in = t.axes()[r - 1].1;
        let frames = t.axes()[r - 2].1;
        let batch = t.numel() / (frames * c_in);
        store.ensure_uniform(&format!("{name}/w"), &[taps, c_in, c_out], taps * c_in)?;
        store.ensure_const(&format!("{name}/b"), &[c_out], 0.0)?;
        let w = self.param(store, &format!("{name}/w"))?;
        let b = self.param(store, &format!("{name}/b"))?;
        let center = (taps / 2) * dilation;

        let x = self.value(a);
        let wv = self.value(w).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let mut out_data = vec![0.0; batch * frames * c_out];
        for bi in 0..batch {
            let xoff = bi * frames * c_in;
            let ooff = bi * frames * c_out;
            for f in 0..frames {
                let orow = &mut out_data[ooff + f * c_out..ooff + (f + 1) * c_out];
                orow.copy_from_slice(&bv);
                for k in 0..taps {
                    let src = f as isize + (k * dilation) as isize - center as isize;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    let xrow = &x.data()[xoff + src as usize * c_in..xoff + (src as usize + 1) * c_in];
                    let wk = &wv[k * c_in * c_out..(k + 1) * c_in * c_out];
                    for (i, &xv) in xrow.iter().enumerate() {
                        let wrow = &wk[i * c_out..(i + 1) * c_out];
                        for (slot, &wvv) in orow.iter_mut().zip(wrow) {
                            *slot += xv * wvv;
                        }
                    }
                }
            }
        }
        let mut out_axes = x.axes().to_vec();
        out_axes[r - 1].1 = c_out;
        let out = AxisTaggedTensor::from_vec(&out_axes, out_data)?;
        let grad: GradFn = Box::new(move |g, _, parents| {
            let x = parents[0];
            let w = parents[1].data();
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; taps * c_in * c_out];
            let mut db = vec![0.0; c_out];
            for bi in 0..batch {
                let xoff = bi * frames * c_in;
                let goff = bi * frames * c_out;
                for f in 0..frames {
                    let grow = &g.data()[goff + f * c_out..goff + (f + 1) * c_out];
                    for (slot, &gv) in db.iter_mut().zip(grow) {
                        *slot += gv;
                    }
                    for k in 0..taps {
                        let src = f as isize + (k * dilation) as isize - center as isize;
                        if src < 0 || src >= frames as isize {
                            continue;
                        }
                        let s = src as usize;
                        let xrow = &x.data()[xoff + s * c_in..xoff + (s + 1) * c_in];
                        let dxrow = &mut dx[xoff + s * c_in..xoff + (s + 1) * c_in];
                        for i in 0..c_in {
                            let wrow = &w[(k * c_in + i) * c_out..(k * c_in + i + 1) * c_out];
                            let dwrow = &mut dw[(k * c_in + i) * c_out..(k * c_in + i + 1) * c_out];
                            let xv = xrow[i];
                            let mut acc = 0.0;
                            for j in 0..c_out {
                                acc += grow[j] * wrow[j];
                                dwrow[j] += xv * grow[j];
                            }
                            dxrow[i] += acc;
                        }
                    }
                }
            }
            Ok(vec![
                AxisTaggedTensor::from_vec(x.axes(), dx)?,
                AxisTaggedTensor::from_vec(parents[1].axes(), dw)?,
                AxisTaggedTensor::from_vec(parents[2].axes(), db)?,
            ])
        });
        Ok(self.push(out, vec![a, w, b], Some(grad)))
    }

    /// Mean sigmoid cross-entropy from logits, computed in the stable
    /// `max(l, 0) - y*l + ln(1 + e^{-|l|})` form.
    pub fn sigmoid_ce(&mut self, logits: ValueId, labels: &AxisTaggedTensor) -> Result<ValueId> {
        let l = self.value(logits);
        if l.axes() != labels.axes() {
            return Err(Error::shape(format!(
                "sigmoid_ce axes mismatch: {:?} vs {:?}",
                l.axes(),
                labels.axes()
            )));
        }
        let n = l.numel() as f64;
        let mut total = 0.0;
        for (&lv, &y) in l.data().iter().zip(labels.data()) {
            total += lv.max(0.0) - y * lv + (-lv.abs()).exp().ln_1p();
        }
        let out = AxisTaggedTensor::scalar(total / n);
        let labels = labels.clone();
        let grad: GradFn = Box::new(move |g, _, parents| {
            let gv = g.item()? / n;
            let mut d = parents[0].clone();
            for (dv, (&lv, &y)) in d.data_mut().iter_mut().zip(parents[0].data().iter().zip(labels.data())) {
                *dv = gv * (stable_sigmoid(lv) - y);
            }
            Ok(vec![d])
        });
        Ok(self.push(out, vec![logits], Some(grad)))
    }

    // ── backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient for every
    /// parameter registered on this tape; parameters the loss does not reach
    /// get zero gradients. Deterministic: replaying yields identical maps.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {} elements",
                self.nodes[loss.0].value.numel()
            )));
        }
        let mut grads: Vec<Option<AxisTaggedTensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(self.nodes[loss.0].value.map(|_| 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(gfn) = &node.grad_fn else { continue };
            let Some(g) = grads[i].clone() else { continue };
            let parent_vals: Vec<&AxisTaggedTensor> =
                node.parents.iter().map(|&p| &self.nodes[p.0].value).collect();
            let pgs = gfn(&g, &node.value, &parent_vals)?;
            debug_assert_eq!(pgs.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(pgs) {
                let aligned = if pg.axes() == self.nodes[pid.0].value.axes() {
                    pg
                } else {
                    pg.transpose_to(&self.nodes[pid.0].value.roles())?
                };
                match &mut grads[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(aligned.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(aligned),
                }
            }
        }
        let mut map = GradientMap::new();
        for (name, id) in &self.param_ids {
            let g = match &grads[id.0] {
                Some(g) => g.clone(),
                None => self.nodes[id.0].value.map(|_| 0.0),
            };
            map.insert(name.clone(), g);
        }
        Ok(map)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[m, n] += a[m, k] . w[k, n], row-major, accumulating into `out`.
fn gemm_acc(a: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let wrow = &w[kk * n..(kk + 1) * n];
            for (slot, &wv) in orow.iter_mut().zip(wrow) {
                *slot += av * wv;
            }
        }
    }
}
