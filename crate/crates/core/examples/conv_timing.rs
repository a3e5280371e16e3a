//! Times individual conv3d shapes of the default network.

use std::time::Instant;

use vnetseg::diffcore::{DiffTensor, Tape};

fn time(cin: usize, cout: usize, k: usize, e: usize, stride: usize, pad: usize) {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(
        DiffTensor::full(vec![2, cin, e, e, e], 0.5f32)
            .unwrap()
            .with_grad(),
    );
    let w = tape.leaf(
        DiffTensor::full(vec![cout, cin, k, k, k], 0.1f32)
            .unwrap()
            .with_grad(),
    );
    let b = tape.leaf(DiffTensor::full(vec![cout], 0.0f32).unwrap().with_grad());
    let t0 = Instant::now();
    let y = tape.conv3d(x, w, b, stride, pad).unwrap();
    let t1 = Instant::now();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let t2 = Instant::now();
    let out = tape.tensor(y).len() / cout;
    let gmac = (2 * out * cout * cin * k * k * k) as f64 / 2.0 / 1e9;
    println!(
        "{cin:>3}->{cout:<3} k{k} e{e}: fwd {:>8.2?} bwd {:>8.2?}  ({:.3} GMAC fwd, {:.2} GMAC/s)",
        t1 - t0,
        t2 - t1,
        gmac,
        gmac / (t1 - t0).as_secs_f64()
    );
}

fn main() {
    time(1, 8, 3, 32, 1, 1);
    time(8, 8, 3, 32, 1, 1);
    time(16, 8, 3, 32, 1, 1);
    time(16, 8, 1, 32, 1, 0);
    time(8, 16, 2, 32, 2, 0);
    time(16, 16, 3, 16, 1, 1);
    time(32, 32, 3, 8, 1, 1);
    time(64, 64, 3, 4, 1, 1);
}
