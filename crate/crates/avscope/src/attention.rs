//! Generalized attention over axis-tagged tensors.
//!
//! The core operator attends over an arbitrary set of axis roles instead of
//! a fixed sequence dimension: scores contract queries and keys over Depth,
//! softmax runs over the attended roles, and the result modulates the
//! values. Query axes that collide with attended roles are relabeled to
//! their `Query` counterpart for the duration of the op.

use std::cell::RefCell;

use crate::axis::AxisRole;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tape::{Tape, ValueId};

#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub depth: usize,
    pub heads: usize,
    pub attended: Vec<AxisRole>,
    pub dropout: f64,
    /// Project keys separately from values. Off by default: keys and values
    /// are the same tensor and share the value projection.
    pub key_projection: bool,
}

impl AttentionConfig {
    pub fn new(depth: usize, heads: usize, attended: &[AxisRole]) -> Self {
        Self { depth, heads, attended: attended.to_vec(), dropout: 0.0, key_projection: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.depth % self.heads != 0 {
            return Err(Error::Config(format!(
                "depth {} must be divisible by heads {}",
                self.depth, self.heads
            )));
        }
        if self.attended.is_empty() {
            return Err(Error::Config("attended axis set is empty".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_depth(&self) -> usize {
        self.depth / self.heads
    }
}

// ── attention-tensor memory meter ────────────────────────────────────────────

/// Thread-local accounting of attention-tensor sizes. Every score tensor
/// reports its element count; multi-head calls group their heads into one
/// call total, and encoders close stages at block-phase boundaries.
pub mod meter {
    use std::cell::RefCell;

    #[derive(Default)]
    struct MeterState {
        calls: Vec<usize>,
        stages: Vec<(String, usize)>,
        open_call: Option<usize>,
        stage_start: usize,
    }

    thread_local! {
        static METER: RefCell<MeterState> = RefCell::new(MeterState::default());
    }

    #[derive(Clone, Debug, Default)]
    pub struct MeterReport {
        /// Score-tensor elements per attention call, in call order.
        pub calls: Vec<usize>,
        /// Labeled sums of the calls between stage boundaries.
        pub stages: Vec<(String, usize)>,
    }

    impl MeterReport {
        /// Largest single call.
        pub fn peak_call(&self) -> usize {
            self.calls.iter().copied().max().unwrap_or(0)
        }

        /// Largest stage sum; calls never assigned to a stage count as one
        /// trailing stage.
        pub fn peak_stage(&self) -> usize {
            self.stages.iter().map(|&(_, n)| n).max().unwrap_or(0)
        }

        pub fn stage(&self, label: &str) -> Option<usize> {
            self.stages.iter().find(|(l, _)| l == label).map(|&(_, n)| n)
        }
    }

    pub fn reset() {
        METER.with(|m| *m.borrow_mut() = MeterState::default());
    }

    /// Add score-tensor elements to the open call, or as a standalone call.
    pub fn record(elems: usize) {
        METER.with(|m| {
            let s = &mut *m.borrow_mut();
            match &mut s.open_call {
                Some(total) => *total += elems,
                None => s.calls.push(elems),
            }
        });
    }

    pub fn begin_call() {
        METER.with(|m| m.borrow_mut().open_call = Some(0));
    }

    pub fn end_call() {
        METER.with(|m| {
            let mut s = m.borrow_mut();
            if let Some(total) = s.open_call.take() {
                s.calls.push(total);
            }
        });
    }

    /// Close a stage: all calls since the previous boundary sum under `label`.
    pub fn end_stage(label: &str) {
        METER.with(|m| {
            let mut s = m.borrow_mut();
            let sum: usize = s.calls[s.stage_start..].iter().sum();
            s.stages.push((label.to_string(), sum));
            s.stage_start = s.calls.len();
        });
    }

    pub fn report() -> MeterReport {
        METER.with(|m| {
            let s = m.borrow();
            let mut stages = s.stages.clone();
            if s.stage_start < s.calls.len() {
                let sum: usize = s.calls[s.stage_start..].iter().sum();
                stages.push(("(open)".to_string(), sum));
            }
            MeterReport { calls: s.calls.clone(), stages }
        })
    }
}

// ── core operator ────────────────────────────────────────────────────────────

thread_local! {
    static SIN_TABLE_CACHE: RefCell<Option<((usize, usize), Vec<f64>)>> = const { RefCell::new(None) };
}

/// Attended roles present in `q` collide with key positions; relabel them to
/// their query counterparts and return the (from, to) pairs for undoing.
fn query_collisions(tape: &Tape, q: ValueId, axes: &[AxisRole]) -> Vec<(AxisRole, AxisRole)> {
    axes.iter()
        .filter(|&&r| tape.value(q).has_axis(r))
        .map(|&r| (r, r.as_query()))
        .collect()
}

/// Score tensor α of the generalized attention operator: softmax over
/// `axes` of the Depth contraction of keys and queries, scaled by 1/√D.
/// Query-side collisions appear as `Query` roles in the result.
pub fn attention_scores(tape: &mut Tape, q: ValueId, k: ValueId, axes: &[AxisRole]) -> Result<ValueId> {
    for &r in axes {
        if !tape.value(k).has_axis(r) {
            return Err(Error::MissingAxis { role: r, axes: tape.value(k).roles() });
        }
    }
    let d = tape.value(q).extent(AxisRole::Depth)?;
    if tape.value(k).extent(AxisRole::Depth)? != d {
        return Err(Error::shape("query and key Depth extents differ"));
    }
    let mut qq = q;
    for &(from, to) in &query_collisions(tape, q, axes) {
        qq = tape.relabel(qq, from, to)?;
    }
    let scores = tape.inner_product(k, qq, &[AxisRole::Depth])?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax(scaled, axes)?;
    meter::record(tape.value(alpha).numel());
    Ok(alpha)
}

/// Generalized attention: `⟨α, V⟩_axes` with α from [`attention_scores`].
/// Output carries Q's non-Depth axes plus V's Depth.
pub fn attention(tape: &mut Tape, q: ValueId, k: ValueId, v: ValueId, axes: &[AxisRole]) -> Result<ValueId> {
    {
        let (kt, vt) = (tape.value(k), tape.value(v));
        let mut kk = kt.roles();
        let mut vv = vt.roles();
        kk.sort_by_key(|r| r.code());
        vv.sort_by_key(|r| r.code());
        if kk != vv {
            return Err(Error::shape(format!(
                "keys and values must share axes, got {:?} vs {:?}",
                kt.axes(),
                vt.axes()
            )));
        }
    }
    let collisions = query_collisions(tape, q, axes);
    let alpha = attention_scores(tape, q, k, axes)?;
    let mut out = tape.inner_product(alpha, v, axes)?;
    for &(from, to) in &collisions {
        out = tape.relabel(out, to, from)?;
    }
    let order: Vec<AxisRole> = tape.value(q).roles();
    tape.transpose(out, &order)
}

/// Init gain for layers whose output feeds a residual sum (the attention
/// out-projection and the second feed-forward layer). Near-uniform attention
/// at init writes almost the same vector to every position; at full init
/// scale that common component compounds across blocks and the per-position
/// signal decays geometrically, so these layers start close to zero instead.
pub const RESIDUAL_INIT_GAIN: f64 = 0.05;

/// Multi-head attention with keys tied to values. Each head projects
/// queries and values to depth D/H, attends, and the concatenated heads map
/// back to depth D. Parameters live under
/// `{scope}/head{h}/{q|k|v}` and `{scope}/out`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &mut ParameterStore,
    cfg: &AttentionConfig,
    scope: &str,
    q: ValueId,
    v: ValueId,
    axes: &[AxisRole],
) -> Result<ValueId> {
    cfg.validate()?;
    let dh = cfg.head_depth();
    meter::begin_call();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.dense(store, &format!("{scope}/head{h}/q"), q, dh, true)?;
        let vh = tape.dense(store, &format!("{scope}/head{h}/v"), v, dh, true)?;
        let kh = if cfg.key_projection {
            tape.dense(store, &format!("{scope}/head{h}/k"), v, dh, true)?
        } else {
            vh
        };
        heads.push(attention(tape, qh, kh, vh, axes)?);
    }
    meter::end_call();
    let joined = tape.concat(&heads, AxisRole::Depth)?;
    tape.dense_scaled(store, &format!("{scope}/out"), joined, cfg.depth, true, RESIDUAL_INIT_GAIN)
}

/// Pools per-source frame embeddings M×T×D down to M×D. The query is the
/// time sum of the input (mean when `mean_query`), attended back over the
/// frames with a fresh MHA under `{scope}`.
pub fn attentional_pooling(
    tape: &mut Tape,
    store: &mut ParameterStore,
    cfg: &AttentionConfig,
    scope: &str,
    zhat: ValueId,
    mean_query: bool,
) -> Result<ValueId> {
    let t = tape.value(zhat).extent(AxisRole::Time)?;
    if t == 0 {
        return Err(Error::shape("attentional pooling over an empty time axis"));
    }
    let mut query = tape.sum_over(zhat, &[AxisRole::Time])?;
    if mean_query {
        query = tape.scale(query, 1.0 / t as f64);
    }
    let pool_cfg = AttentionConfig { attended: vec![AxisRole::Time], dropout: 0.0, ..cfg.clone() };
    multi_head_attention(tape, store, &pool_cfg, scope, query, zhat, &[AxisRole::Time])
}

/// Sinusoidal time-position table, T×D, for the optional positional flag.
/// Even depth slots carry sin, odd slots cos, wavelengths log-spaced from
/// 2π up to 10000·2π as is conventional.
pub fn sinusoidal_time_table(t: usize, d: usize) -> crate::tensor::AxisTaggedTensor {
    let cached = SIN_TABLE_CACHE.with(|c| {
        c.borrow().as_ref().and_then(|(key, data)| (*key == (t, d)).then(|| data.clone()))
    });
    let data = cached.unwrap_or_else(|| {
        let mut data = vec![0.0; t * d];
        for ti in 0..t {
            for i in 0..d {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = ti as f64 * rate;
                data[ti * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        SIN_TABLE_CACHE.with(|c| *c.borrow_mut() = Some(((t, d), data.clone())));
        data
    });
    crate::tensor::AxisTaggedTensor::from_vec(&[(AxisRole::Time, t), (AxisRole::Depth, d)], data)
        .expect("table axes are valid by construction")
}
