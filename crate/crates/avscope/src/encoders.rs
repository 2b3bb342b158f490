//! Audio-visual alignment encoders.
//!
//! Audio features (Source x Time x Depth) and video features
//! (Space x Time x Depth) are fused by one of four encoder variants: self
//! attention over the packed joint axis, its time/joint separable variant,
//! cross-modal attention between the two streams, or its separable variant.
//! Every variant ends with attentional pooling over time and yields one
//! Depth-vector per audio source, which the on-screen head turns into a
//! probability per source.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attentional_pooling, meter, multi_head_attention, sinusoidal_time_table, AttentionConfig,
    RESIDUAL_INIT_GAIN,
};
use crate::axis::AxisRole;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tape::{Tape, ValueId};
use crate::tensor::AxisTaggedTensor;

/// Paired per-clip features with a shared time axis.
#[derive(Clone, Debug)]
pub struct AvFeaturePair {
    /// Source x Time x Depth.
    pub audio: AxisTaggedTensor,
    /// Space x Time x Depth; the spatial grid arrives already flattened.
    pub video: AxisTaggedTensor,
}

impl AvFeaturePair {
    pub fn new(audio: AxisTaggedTensor, video: AxisTaggedTensor) -> Result<Self> {
        let pair = Self { audio, video };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        for (t, role, label) in [
            (&self.audio, AxisRole::Source, "audio"),
            (&self.video, AxisRole::Space, "video"),
        ] {
            if !t.has_axis(role) || !t.has_axis(AxisRole::Time) || !t.has_axis(AxisRole::Depth) {
                return Err(Error::shape(format!(
                    "{label} features need ({role:?}, Time, Depth), got {:?}",
                    t.axes()
                )));
            }
        }
        if self.audio.extent(AxisRole::Time)? != self.video.extent(AxisRole::Time)? {
            return Err(Error::shape("audio and video time extents differ"));
        }
        if self.audio.extent(AxisRole::Depth)? != self.video.extent(AxisRole::Depth)? {
            return Err(Error::shape("audio and video depth extents differ"));
        }
        Ok(())
    }

    pub fn sources(&self) -> usize {
        self.audio.extent(AxisRole::Source).expect("validated")
    }

    pub fn grid(&self) -> usize {
        self.video.extent(AxisRole::Space).expect("validated")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    JointSa,
    SeparableSa,
    JointCma,
    SeparableCma,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub blocks: usize,
    pub attention: AttentionConfig,
    /// Divide the pooling query by T (the printed form is a plain sum).
    pub mean_query_pooling: bool,
    /// Add a sinusoidal time table to both feature streams. Off by default;
    /// nothing in the attention stack is position-aware without it.
    pub time_encoding: bool,
}

impl EncoderConfig {
    pub fn new(variant: EncoderVariant, blocks: usize, attention: AttentionConfig) -> Self {
        Self { variant, blocks, attention, mean_query_pooling: false, time_encoding: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".to_string()));
        }
        self.attention.validate()
    }
}

/// Stack audio rows on top of video rows along the Joint axis:
/// (M x T x D, G x T x D) -> (M+G) x T x D. Slicing the first M rows
/// recovers the audio tensor bit-exact.
pub fn pack_av(pair: &AvFeaturePair) -> Result<AxisTaggedTensor> {
    pair.validate()?;
    let a = pair
        .audio
        .transpose_to(&[AxisRole::Source, AxisRole::Time, AxisRole::Depth])?
        .relabel(AxisRole::Source, AxisRole::Joint)?;
    let v = pair
        .video
        .transpose_to(&[AxisRole::Space, AxisRole::Time, AxisRole::Depth])?
        .relabel(AxisRole::Space, AxisRole::Joint)?;
    AxisTaggedTensor::concat_axis(AxisRole::Joint, &[&a, &v])
}

fn pack_av_tape(tape: &mut Tape, audio: ValueId, video: ValueId) -> Result<ValueId> {
    let order = [AxisRole::Source, AxisRole::Time, AxisRole::Depth];
    let a = tape.transpose(audio, &order)?;
    let a = tape.relabel(a, AxisRole::Source, AxisRole::Joint)?;
    let order = [AxisRole::Space, AxisRole::Time, AxisRole::Depth];
    let v = tape.transpose(video, &order)?;
    let v = tape.relabel(v, AxisRole::Space, AxisRole::Joint)?;
    tape.concat(&[a, v], AxisRole::Joint)
}

/// Self-attention block: r = LN(MHA(Z, Z) + Z); Z' = LN(f(Dropout(r))) + r.
/// The feed-forward f is dense-ReLU-dense at constant width. Parameters
/// live under `{scope}/{head*,out,ln1,ff1,ff2,ln2}`.
pub fn sa_block(
    tape: &mut Tape,
    store: &mut ParameterStore,
    att: &AttentionConfig,
    scope: &str,
    z: ValueId,
    axes: &[AxisRole],
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<ValueId> {
    let att = AttentionConfig { attended: axes.to_vec(), ..att.clone() };
    let mha = multi_head_attention(tape, store, &att, scope, z, z, axes)?;
    let sum = tape.add(mha, z)?;
    let r = tape.layer_norm(store, &format!("{scope}/ln1"), sum)?;
    let dropped = tape.dropout(r, att.dropout, rng, training)?;
    let h = tape.dense(store, &format!("{scope}/ff1"), dropped, att.depth, true)?;
    let h = tape.relu(h);
    let h = tape.dense_scaled(store, &format!("{scope}/ff2"), h, att.depth, true, RESIDUAL_INIT_GAIN)?;
    let normed = tape.layer_norm(store, &format!("{scope}/ln2"), h)?;
    tape.add(normed, r)
}

/// Cross-modal attention block. Audio queries attend into video over
/// `axes_on_video` and vice versa, then each side applies
/// a2 = LN(a1 + A); a3 = f(Dropout(a2)); A' = LN(a3 + A), with both
/// residuals taken from the block input. The two branches have their own
/// parameters under `{scope}/av` and `{scope}/va`.
#[allow(clippy::too_many_arguments)]
pub fn cma_block(
    tape: &mut Tape,
    store: &mut ParameterStore,
    att: &AttentionConfig,
    scope: &str,
    a: ValueId,
    v: ValueId,
    axes_on_video: &[AxisRole],
    axes_on_audio: &[AxisRole],
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<(ValueId, ValueId)> {
    let half = |tape: &mut Tape,
                store: &mut ParameterStore,
                rng: &mut ChaCha8Rng,
                branch: &str,
                input: ValueId,
                other: ValueId,
                axes: &[AxisRole]|
     -> Result<ValueId> {
        let cfg = AttentionConfig { attended: axes.to_vec(), ..att.clone() };
        let scope = format!("{scope}/{branch}");
        let x1 = multi_head_attention(tape, store, &cfg, &scope, input, other, axes)?;
        let sum = tape.add(x1, input)?;
        let x2 = tape.layer_norm(store, &format!("{scope}/ln1"), sum)?;
        let dropped = tape.dropout(x2, cfg.dropout, rng, training)?;
        let h = tape.dense(store, &format!("{scope}/ff1"), dropped, cfg.depth, true)?;
        let h = tape.relu(h);
        let x3 =
            tape.dense_scaled(store, &format!("{scope}/ff2"), h, cfg.depth, true, RESIDUAL_INIT_GAIN)?;
        let res = tape.add(x3, input)?;
        tape.layer_norm(store, &format!("{scope}/ln2"), res)
    };
    let a_out = half(tape, store, rng, "av", a, v, axes_on_video)?;
    let v_out = half(tape, store, rng, "va", v, a, axes_on_audio)?;
    Ok((a_out, v_out))
}

/// Run the configured encoder over on-tape features and pool to M x D.
/// `audio` is Source x Time x Depth, `video` Space x Time x Depth.
pub fn encode(
    tape: &mut Tape,
    store: &mut ParameterStore,
    cfg: &EncoderConfig,
    audio: ValueId,
    video: ValueId,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<ValueId> {
    cfg.validate()?;
    let m = tape.value(audio).extent(AxisRole::Source)?;
    let t = tape.value(audio).extent(AxisRole::Time)?;
    let d = tape.value(audio).extent(AxisRole::Depth)?;
    if tape.value(video).extent(AxisRole::Time)? != t || tape.value(video).extent(AxisRole::Depth)? != d {
        return Err(Error::shape("audio and video features disagree on Time or Depth"));
    }
    if d != cfg.attention.depth {
        return Err(Error::shape(format!(
            "feature depth {d} does not match configured depth {}",
            cfg.attention.depth
        )));
    }
    let (mut audio, mut video) = (audio, video);
    if cfg.time_encoding {
        let table = tape.constant(sinusoidal_time_table(t, d));
        audio = tape.add(audio, table)?;
        video = tape.add(video, table)?;
    }
    let att = &cfg.attention;
    let pooled_input = match cfg.variant {
        EncoderVariant::JointSa => {
            let mut z = pack_av_tape(tape, audio, video)?;
            for l in 0..cfg.blocks {
                let scope = format!("enc/layer{l}");
                z = sa_block(tape, store, att, &scope, z, &[AxisRole::Joint, AxisRole::Time], rng, training)?;
                meter::end_stage(&format!("layer{l}"));
            }
            let head = tape.slice(z, AxisRole::Joint, 0, m)?;
            tape.relabel(head, AxisRole::Joint, AxisRole::Source)?
        }
        EncoderVariant::SeparableSa => {
            let mut z = pack_av_tape(tape, audio, video)?;
            let g = tape.value(video).extent(AxisRole::Space)?;
            for l in 0..cfg.blocks {
                let a = tape.slice(z, AxisRole::Joint, 0, m)?;
                let a = tape.relabel(a, AxisRole::Joint, AxisRole::Source)?;
                let v = tape.slice(z, AxisRole::Joint, m, g)?;
                let v = tape.relabel(v, AxisRole::Joint, AxisRole::Space)?;
                let a = sa_block(tape, store, att, &format!("enc/layer{l}/time_a"), a, &[AxisRole::Time], rng, training)?;
                let v = sa_block(tape, store, att, &format!("enc/layer{l}/time_v"), v, &[AxisRole::Time], rng, training)?;
                meter::end_stage(&format!("layer{l}/time"));
                let a = tape.relabel(a, AxisRole::Source, AxisRole::Joint)?;
                let v = tape.relabel(v, AxisRole::Space, AxisRole::Joint)?;
                let packed = tape.concat(&[a, v], AxisRole::Joint)?;
                z = sa_block(tape, store, att, &format!("enc/layer{l}/joint"), packed, &[AxisRole::Joint], rng, training)?;
                meter::end_stage(&format!("layer{l}/joint"));
            }
            let head = tape.slice(z, AxisRole::Joint, 0, m)?;
            tape.relabel(head, AxisRole::Joint, AxisRole::Source)?
        }
        EncoderVariant::JointCma => {
            let (mut a, mut v) = (audio, video);
            for l in 0..cfg.blocks {
                let scope = format!("enc/layer{l}");
                (a, v) = cma_block(
                    tape,
                    store,
                    att,
                    &scope,
                    a,
                    v,
                    &[AxisRole::Space, AxisRole::Time],
                    &[AxisRole::Source, AxisRole::Time],
                    rng,
                    training,
                )?;
                meter::end_stage(&format!("layer{l}"));
            }
            a
        }
        EncoderVariant::SeparableCma => {
            let (mut a, mut v) = (audio, video);
            for l in 0..cfg.blocks {
                a = sa_block(tape, store, att, &format!("enc/layer{l}/time_a"), a, &[AxisRole::Time], rng, training)?;
                v = sa_block(tape, store, att, &format!("enc/layer{l}/time_v"), v, &[AxisRole::Time], rng, training)?;
                meter::end_stage(&format!("layer{l}/time"));
                (a, v) = cma_block(
                    tape,
                    store,
                    att,
                    &format!("enc/layer{l}"),
                    a,
                    v,
                    &[AxisRole::Space],
                    &[AxisRole::Source],
                    rng,
                    training,
                )?;
                meter::end_stage(&format!("layer{l}/cma"));
            }
            a
        }
    };
    let z = attentional_pooling(tape, store, att, "pool", pooled_input, cfg.mean_query_pooling)?;
    meter::end_stage("pool");
    tape.transpose(z, &[AxisRole::Source, AxisRole::Depth])
}

/// Per-source on-screen logits from pooled embeddings, `head/fz` dense.
pub fn onscreen_logits(tape: &mut Tape, store: &mut ParameterStore, z: ValueId) -> Result<ValueId> {
    let l = tape.dense(store, "head/fz", z, 1, true)?;
    tape.squeeze(l, AxisRole::Depth)
}

/// σ of the logits: one on-screen probability per source.
pub fn onscreen_probabilities(tape: &mut Tape, store: &mut ParameterStore, z: ValueId) -> Result<ValueId> {
    let l = onscreen_logits(tape, store, z)?;
    Ok(tape.sigmoid(l))
}

/// Soft on-screen waveform: x̂ = Σ_m ŷ_m ŝ_m.
pub fn onscreen_estimate(yhat: &[f64], sources: &[Vec<f64>]) -> Result<Vec<f64>> {
    if yhat.len() != sources.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} sources",
            yhat.len(),
            sources.len()
        )));
    }
    let n = sources.first().map(|s| s.len()).unwrap_or(0);
    let mut out = vec![0.0; n];
    for (w, s) in yhat.iter().zip(sources) {
        if s.len() != n {
            return Err(Error::shape("source waveform lengths differ"));
        }
        for (o, &x) in out.iter_mut().zip(s) {
            *o += w * x;
        }
    }
    Ok(out)
}
