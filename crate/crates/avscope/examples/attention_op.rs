//! The attention primitive over named axes.
//!
//! Scores contract query and key over Depth, scale by 1/sqrt(D) and
//! softmax over whatever axes the call attends to; the same op serves
//! time-only, position-only and joint attention. A counter tracks how many
//! score elements each configuration materializes.
//!
//!     cargo run --example attention_op

use avscope::attention::{attention, attention_scores, meter, multi_head_attention, AttentionConfig};
use avscope::axis::AxisRole::{Depth, Query, Source, Time};
use avscope::params::{rng_stream, ParameterStore};
use avscope::tape::Tape;
use avscope::tensor::AxisTaggedTensor;
use rand::Rng;

fn random(axes: &[(avscope::AxisRole, usize)], seed: u64) -> AxisTaggedTensor {
    let mut rng = rng_stream(seed, "attention_op");
    let n: usize = axes.iter().map(|&(_, e)| e).product();
    AxisTaggedTensor::from_vec(axes, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("valid shape")
}

fn main() -> avscope::Result<()> {
    let (m, t, d) = (3, 5, 8);
    let x = random(&[(Source, m), (Time, t), (Depth, d)], 1);

    // Single-head attention of x against itself over Time: each source
    // frame mixes the frames of the same source. Queries keep their own
    // copies of the attended axes under Query tags.
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    // attention_scores already applies the scaled softmax.
    let alpha = attention_scores(&mut tape, xid, xid, &[Time])?;
    println!("time-attention score axes: {:?}", tape.value(alpha).axes());

    // Every score slice is a distribution: sums over the attended axes are
    // 1 per query position.
    let sums = tape.sum_over(alpha, &[Time])?;
    let worst = tape
        .value(sums)
        .data()
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0f64, f64::max);
    println!("softmax row sums: 1 within {worst:.2e}");

    let out = attention(&mut tape, xid, xid, xid, &[Time])?;
    println!("attended output axes: {:?}", tape.value(out).axes());

    // The meter counts score elements; joint attention over both axes
    // pays (M*T)^2 while factorized attention pays M*T^2 then T*M^2.
    for axes in [vec![Time], vec![Source], vec![Source, Time]] {
        meter::reset();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        attention(&mut tape, xid, xid, xid, &axes)?;
        let elements = meter::report().peak_call();
        println!("attend over {axes:?}: {elements} score elements");
    }
    meter::reset();

    // Multi-head wraps the primitive: per-head projections to D/H, keys
    // tied to values by default, concat and a final output projection.
    let cfg = AttentionConfig::new(d, 2, &[Time]);
    let mut store = ParameterStore::new(9);
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let mha = multi_head_attention(&mut tape, &mut store, &cfg, "demo", xid, xid, &[Time])?;
    println!("multi-head output axes: {:?}", tape.value(mha).axes());
    println!("parameters registered: {}", store.names().count());

    // Queries address attended axes through Query-tagged twins, so a
    // query grid can differ from the key grid.
    let q = random(&[(Query(0), 2), (Depth, d)], 2);
    let k = random(&[(Time, t), (Depth, d)], 3);
    let mut tape = Tape::new();
    let qid = tape.constant(q);
    let kid = tape.constant(k);
    let cross = attention(&mut tape, qid, kid, kid, &[Time])?;
    println!("2 queries over {t} keys -> {:?}", tape.value(cross).axes());
    Ok(())
}
