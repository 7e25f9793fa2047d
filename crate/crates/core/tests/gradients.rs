//! Autodiff gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srpl_core::tensor::{AttnSegment, Tape, Tensor, Var, IGNORE_INDEX};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Denominator floor so that gradients near zero are compared absolutely.
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Builds a scalar loss from `inputs` and compares every input gradient.
fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let e = rel_err(a, numeric);
            assert!(e < TOL, "input {i} element {j}: analytic {} numeric {numeric} rel err {e:e}", a);
        }
    }
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output element contributes a distinct coefficient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(&random(&mut rng, &shape));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_example_gradient() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(&a), tape.param(&b));
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(va).unwrap(), &[3.0, 4.0]);
    check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn softmax_example_gradient() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    check(&[x], |t, v| {
        let y = t.softmax_rows(v[0]).unwrap();
        weighted_sum(t, y, 11)
    });
}

#[test]
fn elementwise_and_reduction_ops() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let bias = random(&mut rng, &[4]);
        check(&[a.clone(), b], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let k = t.scale(m, -0.7).unwrap();
            weighted_sum(t, k, seed)
        });
        check(&[a.clone(), bias], |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        check(std::slice::from_ref(&a), |t, v| {
            let y = t.gelu(v[0]).unwrap();
            weighted_sum(t, y, seed)
        });
        check(&[a], |t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
            weighted_sum(t, g, seed)
        });
    }
}

#[test]
fn rms_norm_and_embedding() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, &[4, 6]);
        let gain = random(&mut rng, &[6]);
        check(&[x, gain], |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-5).unwrap();
            weighted_sum(t, y, seed)
        });
        let table = random(&mut rng, &[5, 3]);
        check(&[table], |t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn cross_entropy_with_ignored_rows() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let logits = random(&mut rng, &[5, 4]);
        check(&[logits], |t, v| t.cross_entropy(v[0], &[1, IGNORE_INDEX, 3, 0, IGNORE_INDEX]).unwrap());
    }
}

#[test]
fn rotation_gradients_for_every_input() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random(&mut rng, &[4, 8]);
        let omega = random(&mut rng, &[2]);
        let amp = random(&mut rng, &[2]);
        let phase = random(&mut rng, &[2]);
        check(&[x, omega, amp, phase], |t, v| {
            let y = t.rotate(v[0], &[0, 3, 7, 12], v[1], v[2], v[3]).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn packed_causal_attention() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let q = random(&mut rng, &[7, 8]);
        let k = random(&mut rng, &[7, 8]);
        let v = random(&mut rng, &[7, 8]);
        let segs = [AttnSegment::full(0, 3), AttnSegment::full(3, 4)];
        check(&[q.clone(), k.clone(), v.clone()], |t, x| {
            let y = t.causal_attention(x[0], x[1], x[2], 2, &segs).unwrap();
            weighted_sum(t, y, seed)
        });
        // Queries restricted to a subset of positions.
        let q_sub = random(&mut rng, &[3, 8]);
        let segs = [
            AttnSegment {
                key_start: 0,
                key_len: 3,
                query_start: 0,
                query_pos: vec![2],
            },
            AttnSegment {
                key_start: 3,
                key_len: 4,
                query_start: 1,
                query_pos: vec![1, 3],
            },
        ];
        check(&[q_sub, k, v], |t, x| {
            let y = t.causal_attention(x[0], x[1], x[2], 2, &segs).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn full_attention_block() {
    // Projections, rotation, attention, output projection, residual and norm.
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = random(&mut rng, &[5, 8]);
        let wq = random(&mut rng, &[8, 8]);
        let wk = random(&mut rng, &[8, 8]);
        let wv = random(&mut rng, &[8, 8]);
        let wo = random(&mut rng, &[8, 8]);
        let omega = random(&mut rng, &[2]);
        let amp = random(&mut rng, &[2]);
        let pq = random(&mut rng, &[2]);
        let pk = random(&mut rng, &[2]);
        let gain = random(&mut rng, &[8]);
        let pos = [0, 1, 2, 3, 4];
        check(&[x, wq, wk, wv, wo, omega, amp, pq, pk, gain], |t, p| {
            let h = t.rms_norm(p[0], p[9], 1e-5).unwrap();
            let q = t.matmul(h, p[1]).unwrap();
            let k = t.matmul(h, p[2]).unwrap();
            let v = t.matmul(h, p[3]).unwrap();
            let q = t.rotate(q, &pos, p[5], p[6], p[7]).unwrap();
            let k = t.rotate(k, &pos, p[5], p[6], p[8]).unwrap();
            let a = t.causal_attention(q, k, v, 2, &[AttnSegment::full(0, 5)]).unwrap();
            let o = t.matmul(a, p[4]).unwrap();
            let r = t.add(p[0], o).unwrap();
            weighted_sum(t, r, seed)
        });
    }
}

#[test]
fn aliased_inputs_accumulate() {
    // The same variable as query, key and value.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 4]);
    check(&[x], |t, v| {
        let y = t.causal_attention(v[0], v[0], v[0], 1, &[AttnSegment::full(0, 4)]).unwrap();
        weighted_sum(t, y, 1)
    });
}
