//! Dense row-major f64 tensors with role-tagged axes.
//!
//! Ops align operands by axis role, not position: shared roles iterate in
//! lockstep, roles private to one operand become free output axes. The
//! generalized inner product reduces over an explicit role set, which is the
//! primitive behind every attention contraction in this crate.

use crate::axis::AxisRole;
use crate::error::{Error, Result};

/// Dense tensor; `axes` is the ordered list of (role, extent), data row-major.
/// Roles are unique within one tensor. A rank-0 tensor holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaggedTensor {
    axes: Vec<(AxisRole, usize)>,
    data: Vec<f64>,
}

impl AxisTaggedTensor {
    pub fn zeros(axes: &[(AxisRole, usize)]) -> Result<Self> {
        Self::validate_axes(axes)?;
        let n = axes.iter().map(|&(_, e)| e).product();
        Ok(Self { axes: axes.to_vec(), data: vec![0.0; n] })
    }

    pub fn from_vec(axes: &[(AxisRole, usize)], data: Vec<f64>) -> Result<Self> {
        Self::validate_axes(axes)?;
        let n: usize = axes.iter().map(|&(_, e)| e).product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match axes {:?} (numel {})",
                data.len(),
                axes,
                n
            )));
        }
        Ok(Self { axes: axes.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { axes: Vec::new(), data: vec![v] }
    }

    pub fn fill(axes: &[(AxisRole, usize)], v: f64) -> Result<Self> {
        let mut t = Self::zeros(axes)?;
        t.data.iter_mut().for_each(|x| *x = v);
        Ok(t)
    }

    fn validate_axes(axes: &[(AxisRole, usize)]) -> Result<()> {
        for (i, &(r, e)) in axes.iter().enumerate() {
            if e == 0 {
                return Err(Error::shape(format!("axis {r:?} has extent 0")));
            }
            if axes.iter().skip(i + 1).any(|&(r2, _)| r2 == r) {
                return Err(Error::shape(format!("duplicate axis role {r:?} in {axes:?}")));
            }
        }
        Ok(())
    }

    pub fn axes(&self) -> &[(AxisRole, usize)] {
        &self.axes
    }

    pub fn roles(&self) -> Vec<AxisRole> {
        self.axes.iter().map(|&(r, _)| r).collect()
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn has_axis(&self, role: AxisRole) -> bool {
        self.axes.iter().any(|&(r, _)| r == role)
    }

    pub fn axis_pos(&self, role: AxisRole) -> Result<usize> {
        self.axes
            .iter()
            .position(|&(r, _)| r == role)
            .ok_or(Error::MissingAxis { role, axes: self.roles() })
    }

    pub fn extent(&self, role: AxisRole) -> Result<usize> {
        Ok(self.axes[self.axis_pos(role)?].1)
    }

    /// Scalar value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on tensor with {} elements", self.numel())));
        }
        Ok(self.data[0])
    }

    /// Row-major strides, one per axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.axes[i + 1].1;
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rename one axis role; extent and layout unchanged.
    pub fn relabel(mut self, from: AxisRole, to: AxisRole) -> Result<Self> {
        if from == to {
            return Ok(self);
        }
        if self.has_axis(to) {
            return Err(Error::shape(format!("relabel target {to:?} already present")));
        }
        let i = self.axis_pos(from)?;
        self.axes[i].0 = to;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { axes: self.axes.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Reorder axes to `order` (must be a permutation of this tensor's roles).
    pub fn transpose_to(&self, order: &[AxisRole]) -> Result<Self> {
        if order.len() != self.axes.len() {
            return Err(Error::shape(format!(
                "transpose order {:?} has wrong rank for axes {:?}",
                order, self.axes
            )));
        }
        if order
            .iter()
            .zip(self.axes.iter())
            .all(|(&r, &(r2, _))| r == r2)
        {
            return Ok(self.clone());
        }
        let src_strides = self.strides();
        let mut out_axes = Vec::with_capacity(order.len());
        let mut walk = Vec::with_capacity(order.len());
        for &role in order {
            let p = self.axis_pos(role)?;
            out_axes.push(self.axes[p]);
            walk.push((self.axes[p].1, src_strides[p]));
        }
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; walk.len()];
        let mut src = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src];
            for k in (0..walk.len()).rev() {
                idx[k] += 1;
                src += walk[k].1;
                if idx[k] < walk[k].0 {
                    break;
                }
                idx[k] = 0;
                src -= walk[k].0 * walk[k].1;
            }
        }
        Ok(Self { axes: out_axes, data: out })
    }

    /// Contiguous sub-range along one axis.
    pub fn slice_axis(&self, role: AxisRole, start: usize, len: usize) -> Result<Self> {
        let p = self.axis_pos(role)?;
        let extent = self.axes[p].1;
        if start + len > extent || len == 0 {
            return Err(Error::shape(format!(
                "slice {start}..{} out of bounds for {role:?} extent {extent}",
                start + len
            )));
        }
        let strides = self.strides();
        let outer: usize = self.axes[..p].iter().map(|&(_, e)| e).product();
        let inner = strides[p];
        let mut out_axes = self.axes.clone();
        out_axes[p].1 = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Self::from_vec(&out_axes, out)
    }

    /// Concatenate along `role`; all parts must agree on every other axis.
    pub fn concat_axis(role: AxisRole, parts: &[&AxisTaggedTensor]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let first = parts[0];
        let p = first.axis_pos(role)?;
        let mut total = 0usize;
        for t in parts {
            if t.axes.len() != first.axes.len() {
                return Err(Error::shape("concat rank mismatch".to_string()));
            }
            for (i, (&(r1, e1), &(r2, e2))) in first.axes.iter().zip(t.axes.iter()).enumerate() {
                if r1 != r2 || (i != p && e1 != e2) {
                    return Err(Error::shape(format!(
                        "concat axis mismatch at {i}: {:?} vs {:?}",
                        first.axes, t.axes
                    )));
                }
            }
            total += t.axes[p].1;
        }
        let mut out_axes = first.axes.clone();
        out_axes[p].1 = total;
        let outer: usize = first.axes[..p].iter().map(|&(_, e)| e).product();
        let inner: usize = first.axes[p + 1..].iter().map(|&(_, e)| e).product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in parts {
                let chunk = t.axes[p].1 * inner;
                out.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self::from_vec(&out_axes, out)
    }
}

// ── role-aligned elementwise ops ─────────────────────────────────────────────

/// Per-axis walk info for iterating `lhs` while tracking an offset into a
/// second tensor that holds a subset of `lhs`'s axes (stride 0 when absent).
fn subset_strides(lhs: &AxisTaggedTensor, rhs: &AxisTaggedTensor) -> Result<Vec<usize>> {
    for &(r, e) in rhs.axes() {
        let p = lhs.axis_pos(r).map_err(|_| {
            Error::shape(format!(
                "rhs axis {r:?} not present in lhs axes {:?}",
                lhs.roles()
            ))
        })?;
        if lhs.axes[p].1 != e {
            return Err(Error::shape(format!(
                "extent mismatch on {r:?}: {} vs {}",
                lhs.axes[p].1, e
            )));
        }
    }
    let rstr = rhs.strides();
    Ok(lhs
        .axes
        .iter()
        .map(|&(r, _)| rhs.axis_pos(r).map(|p| rstr[p]).unwrap_or(0))
        .collect())
}

/// Elementwise combine where `rhs`'s axes are a subset of `lhs`'s; `rhs` is
/// broadcast along the missing axes. Output takes `lhs`'s axes.
pub fn zip_broadcast(
    lhs: &AxisTaggedTensor,
    rhs: &AxisTaggedTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<AxisTaggedTensor> {
    let rstrides = subset_strides(lhs, rhs)?;
    let extents: Vec<usize> = lhs.axes.iter().map(|&(_, e)| e).collect();
    let mut out = Vec::with_capacity(lhs.numel());
    let mut idx = vec![0usize; extents.len()];
    let mut ro = 0usize;
    for &a in lhs.data.iter() {
        out.push(f(a, rhs.data[ro]));
        for k in (0..extents.len()).rev() {
            idx[k] += 1;
            ro += rstrides[k];
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
            ro -= extents[k] * rstrides[k];
        }
    }
    AxisTaggedTensor::from_vec(&lhs.axes, out)
}

/// Sum over `axes`, keeping the remaining axes in their current order.
pub fn sum_over_axes(t: &AxisTaggedTensor, axes: &[AxisRole]) -> Result<AxisTaggedTensor> {
    for &r in axes {
        t.axis_pos(r)?;
    }
    let kept: Vec<(AxisRole, usize)> =
        t.axes.iter().filter(|&&(r, _)| !axes.contains(&r)).copied().collect();
    let strides = t.strides();
    let kept_walk: Vec<(usize, usize)> = t
        .axes
        .iter()
        .zip(strides.iter())
        .filter(|(&(r, _), _)| !axes.contains(&r))
        .map(|(&(_, e), &s)| (e, s))
        .collect();
    let red_walk: Vec<(usize, usize)> = t
        .axes
        .iter()
        .zip(strides.iter())
        .filter(|(&(r, _), _)| axes.contains(&r))
        .map(|(&(_, e), &s)| (e, s))
        .collect();
    let mut out = AxisTaggedTensor::zeros(&kept)?;
    let n_out = out.numel();
    let mut kept_idx = vec![0usize; kept_walk.len()];
    let mut base = 0usize;
    for slot in 0..n_out {
        let mut acc = 0.0;
        let mut red_idx = vec![0usize; red_walk.len()];
        let mut off = 0usize;
        loop {
            acc += t.data[base + off];
            let mut done = true;
            for k in (0..red_walk.len()).rev() {
                red_idx[k] += 1;
                off += red_walk[k].1;
                if red_idx[k] < red_walk[k].0 {
                    done = false;
                    break;
                }
                red_idx[k] = 0;
                off -= red_walk[k].0 * red_walk[k].1;
            }
            if done {
                break;
            }
        }
        out.data[slot] = acc;
        for k in (0..kept_walk.len()).rev() {
            kept_idx[k] += 1;
            base += kept_walk[k].1;
            if kept_idx[k] < kept_walk[k].0 {
                break;
            }
            kept_idx[k] = 0;
            base -= kept_walk[k].0 * kept_walk[k].1;
        }
    }
    Ok(out)
}

// ── generalized inner product ────────────────────────────────────────────────

struct ContractionPlan {
    out_axes: Vec<(AxisRole, usize)>,
    /// Per output axis: (extent, stride into a, stride into b); 0 when absent.
    out_walk: Vec<(usize, usize, usize)>,
    /// Per reduce axis: (extent, stride into a, stride into b).
    red_walk: Vec<(usize, usize, usize)>,
    /// Reduce block is the trailing contiguous block of both operands.
    reduce_trailing: bool,
}

fn plan_contraction(
    a: &AxisTaggedTensor,
    b: &AxisTaggedTensor,
    reduce: &[AxisRole],
) -> Result<ContractionPlan> {
    for &r in reduce {
        let ea = a.extent(r)?;
        let eb = b.extent(r)?;
        if ea != eb {
            return Err(Error::shape(format!("reduce axis {r:?} extent {ea} vs {eb}")));
        }
    }
    // Shared non-reduced roles must agree in extent.
    for &(r, e) in a.axes() {
        if !reduce.contains(&r) {
            if let Ok(eb) = b.extent(r) {
                if eb != e {
                    return Err(Error::shape(format!("aligned axis {r:?} extent {e} vs {eb}")));
                }
            }
        }
    }

    let sa = a.strides();
    let sb = b.strides();
    let mut out_axes = Vec::new();
    let mut out_walk = Vec::new();
    for (i, &(r, e)) in a.axes().iter().enumerate() {
        if reduce.contains(&r) {
            continue;
        }
        let bs = b.axis_pos(r).map(|p| sb[p]).unwrap_or(0);
        out_axes.push((r, e));
        out_walk.push((e, sa[i], bs));
    }
    for (i, &(r, e)) in b.axes().iter().enumerate() {
        if reduce.contains(&r) || a.has_axis(r) {
            continue;
        }
        out_axes.push((r, e));
        out_walk.push((e, 0, sb[i]));
    }
    let mut red_walk = Vec::new();
    for &r in reduce {
        let pa = a.axis_pos(r)?;
        let pb = b.axis_pos(r)?;
        red_walk.push((a.axes()[pa].1, sa[pa], sb[pb]));
    }
    // Trailing check: reduce roles are exactly the last axes of both operands,
    // in the same order, so each reduce block is one contiguous run.
    let k = reduce.len();
    let reduce_trailing = k > 0
        && a.rank() >= k
        && b.rank() >= k
        && a.axes()[a.rank() - k..]
            .iter()
            .zip(reduce.iter())
            .all(|(&(r, _), &rr)| r == rr)
        && b.axes()[b.rank() - k..]
            .iter()
            .zip(reduce.iter())
            .all(|(&(r, _), &rr)| r == rr);
    Ok(ContractionPlan { out_axes, out_walk, red_walk, reduce_trailing })
}

/// Generalized tensor inner product: reduces over `reduce` (present in both
/// operands), iterates shared non-reduced roles in lockstep and takes the
/// outer product over roles private to one operand. Output axes are `a`'s
/// non-reduced axes followed by `b`'s axes private to `b`.
///
/// With `reduce` empty this degenerates to a role-aligned outer product.
pub fn inner_product(
    a: &AxisTaggedTensor,
    b: &AxisTaggedTensor,
    reduce: &[AxisRole],
) -> Result<AxisTaggedTensor> {
    let plan = plan_contraction(a, b, reduce)?;
    let n_red: usize = plan.red_walk.iter().map(|&(e, _, _)| e).product::<usize>().max(1);
    let mut out = AxisTaggedTensor::zeros(&plan.out_axes).unwrap_or_else(|_| {
        // Rank-0 output: plain scalar accumulator.
        AxisTaggedTensor::scalar(0.0)
    });

    if plan.reduce_trailing {
        // Each output element is a dot over one contiguous run in a and b.
        let n_out = out.numel();
        let mut idx = vec![0usize; plan.out_walk.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        for slot in 0..n_out {
            out.data[slot] = dot(&a.data[oa..oa + n_red], &b.data[ob..ob + n_red]);
            for k in (0..plan.out_walk.len()).rev() {
                idx[k] += 1;
                oa += plan.out_walk[k].1;
                ob += plan.out_walk[k].2;
                if idx[k] < plan.out_walk[k].0 {
                    break;
                }
                idx[k] = 0;
                oa -= plan.out_walk[k].0 * plan.out_walk[k].1;
                ob -= plan.out_walk[k].0 * plan.out_walk[k].2;
            }
        }
        return Ok(out);
    }

    // General path: reduce odometer outermost, role-aligned sweep of the
    // output inside. The innermost output axis keeps its b-stride run
    // contiguous in the common attention-apply layout.
    let mut red_idx = vec![0usize; plan.red_walk.len()];
    let (mut ra, mut rb) = (0usize, 0usize);
    loop {
        let mut idx = vec![0usize; plan.out_walk.len()];
        let (mut oa, mut ob) = (ra, rb);
        let n_out = out.numel();
        if let Some(&(e_last, sa_last, sb_last)) = plan.out_walk.last() {
            // Sweep the trailing output axis as an inner loop.
            let chunk = e_last;
            let outer = n_out / chunk;
            for o in 0..outer {
                let base = o * chunk;
                if sa_last == 0 && sb_last == 1 {
                    let av = a.data[oa];
                    let bs = &b.data[ob..ob + chunk];
                    let orow = &mut out.data[base..base + chunk];
                    for (x, &bv) in orow.iter_mut().zip(bs) {
                        *x += av * bv;
                    }
                } else {
                    let (mut ia, mut ib) = (oa, ob);
                    for x in out.data[base..base + chunk].iter_mut() {
                        *x += a.data[ia] * b.data[ib];
                        ia += sa_last;
                        ib += sb_last;
                    }
                }
                // Advance the non-trailing axes.
                for k in (0..plan.out_walk.len() - 1).rev() {
                    idx[k] += 1;
                    oa += plan.out_walk[k].1;
                    ob += plan.out_walk[k].2;
                    if idx[k] < plan.out_walk[k].0 {
                        break;
                    }
                    idx[k] = 0;
                    oa -= plan.out_walk[k].0 * plan.out_walk[k].1;
                    ob -= plan.out_walk[k].0 * plan.out_walk[k].2;
                }
            }
        } else {
            out.data[0] += a.data[oa] * b.data[ob];
            let _ = (&mut oa, &mut ob, &mut idx);
        }
        // Next reduce offset.
        let mut done = true;
        for k in (0..plan.red_walk.len()).rev() {
            red_idx[k] += 1;
            ra += plan.red_walk[k].1;
            rb += plan.red_walk[k].2;
            if red_idx[k] < plan.red_walk[k].0 {
                done = false;
                break;
            }
            red_idx[k] = 0;
            ra -= plan.red_walk[k].0 * plan.red_walk[k].1;
            rb -= plan.red_walk[k].0 * plan.red_walk[k].2;
        }
        if done {
            break;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulation lanes so the reduction vectorizes.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

// ── softmax ──────────────────────────────────────────────────────────────────

/// Numerically stable softmax normalizing jointly over `axes`; every slice
/// over the remaining axes sums to 1. Large negative logits may underflow to
/// exactly 0.0, which is accepted.
pub fn softmax_over_axes(t: &AxisTaggedTensor, axes: &[AxisRole]) -> Result<AxisTaggedTensor> {
    if axes.is_empty() {
        return Err(Error::shape("softmax over empty axis set".to_string()));
    }
    for &r in axes {
        t.axis_pos(r)?;
    }
    let strides = t.strides();
    let kept_walk: Vec<(usize, usize)> = t
        .axes
        .iter()
        .zip(strides.iter())
        .filter(|(&(r, _), _)| !axes.contains(&r))
        .map(|(&(_, e), &s)| (e, s))
        .collect();
    let red_walk: Vec<(usize, usize)> = t
        .axes
        .iter()
        .zip(strides.iter())
        .filter(|(&(r, _), _)| axes.contains(&r))
        .map(|(&(_, e), &s)| (e, s))
        .collect();
    let n_slices: usize = kept_walk.iter().map(|&(e, _)| e).product::<usize>().max(1);
    let mut out = t.clone();
    let mut kept_idx = vec![0usize; kept_walk.len()];
    let mut base = 0usize;
    let mut offsets = Vec::new();
    {
        // Slice offsets are identical for every slice; precompute once.
        let mut red_idx = vec![0usize; red_walk.len()];
        let mut off = 0usize;
        loop {
            offsets.push(off);
            let mut done = true;
            for k in (0..red_walk.len()).rev() {
                red_idx[k] += 1;
                off += red_walk[k].1;
                if red_idx[k] < red_walk[k].0 {
                    done = false;
                    break;
                }
                red_idx[k] = 0;
                off -= red_walk[k].0 * red_walk[k].1;
            }
            if done {
                break;
            }
        }
    }
    for _ in 0..n_slices {
        let mut mx = f64::NEG_INFINITY;
        for &off in &offsets {
            mx = mx.max(t.data[base + off]);
        }
        let mut sum = 0.0;
        for &off in &offsets {
            let e = (t.data[base + off] - mx).exp();
            out.data[base + off] = e;
            sum += e;
        }
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::Numeric(format!("softmax slice sum {sum}")));
        }
        for &off in &offsets {
            out.data[base + off] /= sum;
        }
        for k in (0..kept_walk.len()).rev() {
            kept_idx[k] += 1;
            base += kept_walk[k].1;
            if kept_idx[k] < kept_walk[k].0 {
                break;
            }
            kept_idx[k] = 0;
            base -= kept_walk[k].0 * kept_walk[k].1;
        }
    }
    Ok(out)
}
