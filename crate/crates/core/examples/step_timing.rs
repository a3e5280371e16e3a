//! Times one forward/backward/update step of the default network.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnetseg::diffcore::Tape;
use vnetseg::losses::{tversky_loss, TverskyParams};
use vnetseg::optim::{AmsgradConfig, OptimizerState};
use vnetseg::vnet::{NetworkConfig, NetworkParameters};

fn main() {
    let config = NetworkConfig::default();
    let batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = NetworkParameters::<f32>::build(config, &mut rng).unwrap();
    let mut opt = OptimizerState::new(AmsgradConfig::default()).unwrap();
    let p = config.input_patch_size;
    let n = batch * p * p * p;
    let x: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    let g: Vec<f32> = (0..n).map(|_| f32::from(rng.random_bool(0.003))).collect();
    println!("parameters: {}", net.parameter_count());
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let input = tape.constant(vec![batch, 1, p, p, p], x.clone()).unwrap();
        let truth = tape.constant(vec![batch, 1, p, p, p], g.clone()).unwrap();
        let pred = net
            .forward(&mut tape, &bound, input, true, &mut rng)
            .unwrap();
        let t1 = Instant::now();
        let loss = tversky_loss(&mut tape, pred, truth, &TverskyParams::default()).unwrap();
        tape.backward(loss).unwrap();
        net.accumulate_grads(&tape, &bound).unwrap();
        opt.step(net.params_mut()).unwrap();
        let t2 = Instant::now();
        println!(
            "loss {:.5} forward {:?} backward+step {:?}",
            tape.value(loss)[0],
            t1 - t0,
            t2 - t1
        );
    }
}
