//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnetseg::data::Volume;
use vnetseg::diffcore::{DiffTensor, Tape, Var};
use vnetseg::losses::{tversky_loss, TverskyParams};
use vnetseg::postproc::Connectivity;
use vnetseg::vnet::{NetworkConfig, NetworkParameters};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffTensor<f64> {
    let n = shape.iter().product();
    DiffTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Direct seven-loop cross-correlation over `[N,C,D,H,W]` × `[K,C,kd,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_reference(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let [k, _, kd, kh, kw] = ws;
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * od * oh * ow];
    for b in 0..n {
        for o in 0..k {
            for z in 0..od {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride + a) as i64 - pad as i64;
                                        let iy = (y * stride + bb) as i64 - pad as i64;
                                        let ix = (x_ * stride + cc) as i64 - pad as i64;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as i64
                                            || iy >= h as i64
                                            || ix >= wd as i64
                                        {
                                            continue;
                                        }
                                        let xi = (((b * c + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize;
                                        let wi = (((o * c + ci) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * k + o) * od + z) * oh + y) * ow + x_] = acc;
                    }
                }
            }
        }
    }
    (out, [n, k, od, oh, ow])
}

/// Scatter-add transposed convolution with an `[C,K,s,s,s]` kernel.
pub fn conv_transposed_reference(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    k: usize,
    s: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let os = [n, k, d * s, h * s, wd * s];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..n {
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x_ in 0..wd {
                        let v = x[(((b * c + ci) * d + z) * h + y) * wd + x_];
                        for o in 0..k {
                            for a in 0..s {
                                for bb in 0..s {
                                    for cc in 0..s {
                                        let wv = w[(((ci * k + o) * s + a) * s + bb) * s + cc];
                                        let oi = (((b * k + o) * os[2] + z * s + a) * os[3]
                                            + y * s
                                            + bb)
                                            * os[4]
                                            + x_ * s
                                            + cc;
                                        out[oi] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, os)
}

/// Flood-fill labeling: each unvisited foreground voxel seeds a new label
/// that spreads to every reachable neighbour.
pub fn flood_fill(mask: &[u8], dims: [usize; 3], connectivity: Connectivity) -> Vec<u32> {
    let [dx, dy, dz] = dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
            for o in &offsets {
                let (nx, ny, nz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                if nx < 0
                    || ny < 0
                    || nz < 0
                    || nx >= dx as i64
                    || ny >= dy as i64
                    || nz >= dz as i64
                {
                    continue;
                }
                let j = nx as usize + dx * (ny as usize + dy * nz as usize);
                if mask[j] == 1 && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    labels
}

/// True when two labelings induce the same partition (0 ↔ 0).
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| {
            (x == 0) == (y == 0)
                && *fwd.entry(x).or_insert(y) == y
                && *back.entry(y).or_insert(x) == x
        })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference step. Small enough that a perturbation rarely moves
/// a SeLU input across zero, large enough to keep rounding below 1e-8.
fn step(v: f64) -> f64 {
    1e-7 * v.abs().max(1.0)
}

/// Largest per-input relative error between backward and central
/// differences of the scalar `f`.
pub fn grad_check<F>(inputs: &[DiffTensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |ins: &[DiffTensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o)[0]
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let orig = work[k].values()[i];
            let h = step(orig);
            work[k].values_mut()[i] = orig + h;
            let fp = eval(&work);
            work[k].values_mut()[i] = orig - h;
            let fm = eval(&work);
            work[k].values_mut()[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

/// `Σ w ⊙ y` with fixed random weights, turning a tensor into a scalar.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let mut r = rng(seed);
    let w = tape
        .constant(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn micro_config() -> NetworkConfig {
    NetworkConfig {
        stages: 1,
        base_channels: 4,
        convs_per_stage: 2,
        kernel_size: 3,
        dropout_rate: 0.3,
        input_patch_size: 8,
    }
}

/// Relative error of every parameter gradient of the Tversky loss of the
/// micro network (training mode, fixed dropout masks), name by name.
pub fn network_grad_check(seed: u64) -> Vec<(String, f64)> {
    let config = micro_config();
    let mut r = rng(seed);
    let mut net = NetworkParameters::<f64>::build(config, &mut r).unwrap();
    let p = config.input_patch_size;
    let batch = 2;
    let n = batch * p * p * p;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..n)
        .map(|_| f64::from(u8::from(r.random_bool(0.2))))
        .collect();
    let params = TverskyParams::default();
    let loss_of = |net: &NetworkParameters<f64>, with_grad: bool| {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, with_grad);
        let input = tape.constant(vec![batch, 1, p, p, p], x.clone()).unwrap();
        let truth = tape.constant(vec![batch, 1, p, p, p], g.clone()).unwrap();
        let pred = net
            .forward(&mut tape, &bound, input, true, &mut rng(seed ^ 0xd0))
            .unwrap();
        let loss = tversky_loss(&mut tape, pred, truth, &params).unwrap();
        (tape, bound, loss)
    };
    let (mut tape, bound, loss) = loss_of(&net, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::new();
    for (k, name) in names.into_iter().enumerate() {
        let len = net.params()[k].tensor.len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = net.params()[k].tensor.values()[i];
            let h = step(orig);
            net.params_mut()[k].tensor.values_mut()[i] = orig + h;
            let (t, _, l) = loss_of(&net, false);
            let fp = t.value(l)[0];
            net.params_mut()[k].tensor.values_mut()[i] = orig - h;
            let (t, _, l) = loss_of(&net, false);
            let fm = t.value(l)[0];
            net.params_mut()[k].tensor.values_mut()[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        out.push((name, relative_error(&analytic[k], &numeric)));
    }
    out
}

/// Random volume with the given dtype and dims.
pub fn random_volume(r: &mut ChaCha8Rng, dims: [usize; 3], mask: bool) -> Volume {
    let n = dims.iter().product();
    let spacing = [
        r.random_range(0.1..1.0),
        r.random_range(0.1..1.0),
        r.random_range(0.1..1.0),
    ];
    if mask {
        Volume::mask(
            dims,
            spacing,
            (0..n).map(|_| u8::from(r.random_bool(0.3))).collect(),
        )
        .unwrap()
    } else {
        Volume::gray(
            dims,
            spacing,
            (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }
}
