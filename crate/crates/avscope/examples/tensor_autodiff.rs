//! Axis-tagged tensors and the reverse-mode tape.
//!
//! Axes carry roles instead of positions, so contractions name what they
//! reduce over and transposes are free of index bookkeeping. The tape
//! records every op and plays them backwards for gradients; a central
//! finite-difference pass double-checks one of them here.
//!
//!     cargo run --example tensor_autodiff

use avscope::axis::AxisRole::{Depth, Source, Time};
use avscope::fdiff::{agreement, finite_difference_gradient};
use avscope::params::ParameterStore;
use avscope::tape::Tape;
use avscope::tensor::{inner_product, AxisTaggedTensor};

fn main() -> avscope::Result<()> {
    // A 2 x 3 x 4 block of features: two sources, three frames, depth four.
    let x = AxisTaggedTensor::from_vec(
        &[(Source, 2), (Time, 3), (Depth, 4)],
        (0..24).map(|i| (i as f64) / 10.0).collect(),
    )?;
    println!("x axes: {:?}", x.axes());

    // Contractions reduce over named roles; the rest stay, order-free.
    let w = AxisTaggedTensor::from_vec(&[(Depth, 4)], vec![1.0, -1.0, 0.5, 2.0])?;
    let projected = inner_product(&x, &w, &[Depth])?;
    println!("x . w over Depth -> {:?}", projected.axes());

    // The same tensor addressed in a different axis order is the same data.
    let flipped = x.transpose_to(&[Depth, Time, Source])?;
    let back = flipped.transpose_to(&[Source, Time, Depth])?;
    assert_eq!(back.data(), x.data());

    // Now the tape: y = mean(relu(x . w) * s) with s a trained scalar-ish
    // parameter, then d y / d s by both backpropagation and finite
    // differences.
    let mut store = ParameterStore::new(7);
    store.ensure_uniform("demo/s", &[2], 2)?;

    let loss_of = |store: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(w.clone());
        let proj = tape.inner_product(xid, wid, &[Depth]).unwrap();
        let act = tape.relu(proj);
        let s = tape.param(store, "demo/s").unwrap();
        // "demo/s" has one generic axis of extent 2 == Source, so relabel
        // lines it up for the elementwise product.
        let s = tape.relabel(s, avscope::AxisRole::Generic(0), Source).unwrap();
        let scaled = tape.mul(act, s).unwrap();
        let loss = tape.mean_all(scaled).unwrap();
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let wid = tape.constant(w.clone());
    let proj = tape.inner_product(xid, wid, &[Depth])?;
    let act = tape.relu(proj);
    let s = tape.param(&store, "demo/s")?;
    let s = tape.relabel(s, avscope::AxisRole::Generic(0), Source)?;
    let scaled = tape.mul(act, s)?;
    let loss = tape.mean_all(scaled)?;
    let grads = tape.backward(loss)?;

    let analytic = grads.get("demo/s").expect("parameter gradient");
    let numeric = finite_difference_gradient(loss_of, &store, 1e-6)?;
    let (frac, worst) = agreement(analytic, &numeric["demo/s"], 1e-6, 1e-10);
    println!("loss = {:.6}", loss_of(&store));
    println!("d loss / d s (tape)  = {:?}", analytic.data());
    println!("d loss / d s (fdiff) = {:?}", numeric["demo/s"].data());
    println!("agreement: {:.0}% within 1e-6, worst rel err {worst:.2e}", frac * 100.0);
    assert!(frac == 1.0, "analytic and numeric gradients must agree");
    Ok(())
}
