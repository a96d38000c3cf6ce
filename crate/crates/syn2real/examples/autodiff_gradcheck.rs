//! Reverse-mode gradients of a small conv network checked against central
//! finite differences.
//!
//! Run with: cargo run --release --example autodiff_gradcheck

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syn2real::tensor::{Tape, Tensor, TensorId};

fn build(tape: &mut Tape, params: &[Tensor], x: &Tensor) -> (TensorId, Vec<TensorId>) {
    let ids: Vec<_> = params.iter().map(|t| tape.leaf(t)).collect();
    let xid = tape.constant(x.shape.clone(), x.data.clone());
    let h = tape.conv2d(xid, ids[0], ids[1], 1).unwrap();
    let h = tape.leaky_relu(h, 0.2);
    let h = tape.avg_pool2(h).unwrap();
    let h = tape.conv2d(h, ids[2], ids[3], 1).unwrap();
    let h = tape.upsample_nearest2(h).unwrap();
    let sq = tape.square(h);
    (tape.mean(sq), ids)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand_tensor = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
    };
    let params = vec![
        rand_tensor(vec![4, 3, 3, 3]),
        rand_tensor(vec![4]),
        rand_tensor(vec![2, 4, 3, 3]),
        rand_tensor(vec![2]),
    ];
    let x = rand_tensor(vec![1, 3, 8, 8]);

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let (loss, ids) = build(&mut tape, &params, &x);
    tape.backward(loss).unwrap();
    println!("loss = {:.6}", tape.value(loss));

    // Central finite differences over every parameter coordinate.
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in 0..params.len() {
        for c in 0..params[p].data.len() {
            let mut plus = params.clone();
            plus[p].data[c] += h;
            let mut tp = Tape::new();
            let (lp, _) = build(&mut tp, &plus, &x);
            let fp = tp.value(lp);

            let mut minus = params.clone();
            minus[p].data[c] -= h;
            let mut tm = Tape::new();
            let (lm, _) = build(&mut tm, &minus, &x);
            let fm = tm.value(lm);

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = tape.grad(ids[p]).unwrap()[c];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    println!("checked {} coordinates; worst relative error {:.3e}", checked, worst);
    assert!(worst < 1e-4, "gradient check failed");
    println!("analytic gradients agree with finite differences");
}
