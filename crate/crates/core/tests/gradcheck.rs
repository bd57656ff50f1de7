//! Finite-difference verification of every differentiable operation.
//!
//! Central differences with step 1e-3. The division uses the actual f32
//! spacing between the two perturbed points, which removes the error from
//! the step itself not being exactly representable. Relative error must stay
//! below 1e-3; denominators are guarded so gradients smaller than the guard
//! are compared absolutely at guard * tolerance.

use micl_core::tensor::{NodeId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f32 = 1e-3;
const TOL: f64 = 1e-3;
// The loss leaves the tape as an f32, so a central difference carries noise
// of about ulp(loss) / (2 * step) = 1e-4 in absolute terms. The guard sits
// above that floor: gradients smaller than it are compared absolutely at
// GUARD * TOL = 2.5e-4, which noise alone cannot exceed.
const GUARD: f64 = 0.25;

/// Deterministic input values: exact multiples of 1/8 in [-0.75, 0.75],
/// shifted off zero so kinked ops are probed away from their kink.
fn test_values(len: usize, salt: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let v = ((i * 7 + salt * 5 + 3) % 13) as f32 - 6.0;
            if v == 0.0 {
                0.25
            } else {
                v / 8.0
            }
        })
        .collect()
}

/// Exact-fraction reduction weights, sign-alternating so nothing cancels to
/// zero structurally.
fn reduction_weights(len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let mag = 0.25 + 0.25 * ((i % 4) as f32);
            if i % 3 == 0 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

struct CheckReport {
    max_rel: f64,
    checked: usize,
}

/// Runs the oracle: analytic gradients from one backward sweep against a
/// central difference per input element.
fn check_gradients<F>(inputs: &[Tensor], build: F) -> CheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).data()[0] as f64
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids);
    tape.backward(root).expect("backward");
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            let up = orig + STEP;
            let down = orig - STEP;
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[j] = up;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[j] = down;
            let numeric = (eval(&plus) - eval(&minus)) / ((up - down) as f64);
            let ana = analytic[pi][j] as f64;
            let rel = (numeric - ana).abs() / ana.abs().max(numeric.abs()).max(GUARD);
            assert!(
                rel < TOL,
                "input {pi} element {j}: analytic {ana} vs numeric {numeric} (rel {rel:.2e})"
            );
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    CheckReport { max_rel, checked }
}

fn reduce(tape: &mut Tape, x: NodeId) -> NodeId {
    let w = reduction_weights(tape.value(x).len());
    tape.weighted_sum(x, &w).unwrap()
}

#[test]
fn matmul_gradients() {
    let a = Tensor::from_vec(vec![3, 4], test_values(12, 0)).unwrap();
    let b = Tensor::from_vec(vec![4, 2], test_values(8, 1)).unwrap();
    let r = check_gradients(&[a, b], |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        reduce(tape, y)
    });
    assert_eq!(r.checked, 20);
    println!("matmul max rel {:.2e}", r.max_rel);
}

#[test]
fn add_gradients() {
    let a = Tensor::from_vec(vec![2, 3], test_values(6, 0)).unwrap();
    let b = Tensor::from_vec(vec![2, 3], test_values(6, 2)).unwrap();
    let r = check_gradients(&[a, b], |tape, ids| {
        let y = tape.add(ids[0], ids[1]).unwrap();
        reduce(tape, y)
    });
    println!("add max rel {:.2e}", r.max_rel);
}

#[test]
fn add_bias_gradients() {
    let x = Tensor::from_vec(vec![3, 4], test_values(12, 3)).unwrap();
    let b = Tensor::from_vec(vec![4], test_values(4, 4)).unwrap();
    let r = check_gradients(&[x, b], |tape, ids| {
        let y = tape.add_bias(ids[0], ids[1]).unwrap();
        reduce(tape, y)
    });
    println!("add_bias max rel {:.2e}", r.max_rel);
}

#[test]
fn mul_gradients() {
    let a = Tensor::from_vec(vec![2, 3], test_values(6, 5)).unwrap();
    let b = Tensor::from_vec(vec![2, 3], test_values(6, 6)).unwrap();
    let r = check_gradients(&[a, b], |tape, ids| {
        let y = tape.mul(ids[0], ids[1]).unwrap();
        reduce(tape, y)
    });
    println!("mul max rel {:.2e}", r.max_rel);
}

#[test]
fn scale_gradients() {
    let x = Tensor::from_vec(vec![2, 4], test_values(8, 7)).unwrap();
    let r = check_gradients(&[x], |tape, ids| {
        let y = tape.scale(ids[0], 1.75);
        reduce(tape, y)
    });
    println!("scale max rel {:.2e}", r.max_rel);
}

#[test]
fn relu_gradients() {
    // test_values keeps every element at least 1/8 from the kink, far
    // beyond the finite-difference step.
    let x = Tensor::from_vec(vec![3, 4], test_values(12, 8)).unwrap();
    let r = check_gradients(&[x], |tape, ids| {
        let y = tape.relu(ids[0]);
        reduce(tape, y)
    });
    println!("relu max rel {:.2e}", r.max_rel);
}

#[test]
fn transpose_gradients() {
    let x = Tensor::from_vec(vec![3, 2], test_values(6, 9)).unwrap();
    let r = check_gradients(&[x], |tape, ids| {
        let y = tape.transpose(ids[0]).unwrap();
        reduce(tape, y)
    });
    println!("transpose max rel {:.2e}", r.max_rel);
}

#[test]
fn slice_cols_gradients() {
    let x = Tensor::from_vec(vec![3, 5], test_values(15, 10)).unwrap();
    let r = check_gradients(&[x.clone()], |tape, ids| {
        let y = tape.slice_cols(ids[0], 1, 3).unwrap();
        reduce(tape, y)
    });
    println!("slice_cols max rel {:.2e}", r.max_rel);

    // Elements outside the slice must receive exactly zero gradient.
    let mut tape = Tape::new();
    let id = tape.param(x);
    let y = tape.slice_cols(id, 1, 3).unwrap();
    let root = reduce(&mut tape, y);
    tape.backward(root).unwrap();
    let g = tape.grad(id).unwrap();
    for row in 0..3 {
        assert_eq!(g[row * 5], 0.0);
        assert_eq!(g[row * 5 + 4], 0.0);
    }
}

#[test]
fn concat_cols_gradients() {
    let a = Tensor::from_vec(vec![3, 2], test_values(6, 11)).unwrap();
    let b = Tensor::from_vec(vec![3, 3], test_values(9, 12)).unwrap();
    let c = Tensor::from_vec(vec![3, 1], test_values(3, 13)).unwrap();
    let r = check_gradients(&[a, b, c], |tape, ids| {
        let y = tape.concat_cols(ids).unwrap();
        reduce(tape, y)
    });
    println!("concat_cols max rel {:.2e}", r.max_rel);
}

#[test]
fn softmax_gradients() {
    let x = Tensor::from_vec(vec![2, 5], test_values(10, 14)).unwrap();
    let r = check_gradients(&[x], |tape, ids| {
        let y = tape.softmax(ids[0]);
        reduce(tape, y)
    });
    println!("softmax max rel {:.2e}", r.max_rel);
}

#[test]
fn layer_norm_gradients() {
    let x = Tensor::from_vec(vec![3, 6], test_values(18, 15)).unwrap();
    let gain = Tensor::from_vec(vec![6], test_values(6, 16)).unwrap();
    let bias = Tensor::from_vec(vec![6], test_values(6, 17)).unwrap();
    let r = check_gradients(&[x, gain, bias], |tape, ids| {
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        reduce(tape, y)
    });
    println!("layer_norm max rel {:.2e}", r.max_rel);
}

#[test]
fn embedding_gradients() {
    // Repeated id 2 checks that lookups accumulate into the same row.
    let table = Tensor::from_vec(vec![4, 3], test_values(12, 18)).unwrap();
    let r = check_gradients(&[table], |tape, ids| {
        let y = tape.embedding(ids[0], &[0, 2, 1, 2]).unwrap();
        reduce(tape, y)
    });
    println!("embedding max rel {:.2e}", r.max_rel);
}

#[test]
fn dropout_gradients() {
    // The closure reseeds the generator, so every evaluation sees the same
    // mask and the finite difference probes a fixed linear map.
    let x = Tensor::from_vec(vec![4, 4], test_values(16, 19)).unwrap();
    let r = check_gradients(&[x], |tape, ids| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = tape.dropout(ids[0], 0.3, &mut rng).unwrap();
        reduce(tape, y)
    });
    println!("dropout max rel {:.2e}", r.max_rel);
}

#[test]
fn cross_entropy_gradients() {
    // Row 2 is masked out; its logits must receive zero gradient.
    let logits = Tensor::from_vec(vec![4, 6], test_values(24, 20)).unwrap();
    let targets = [3usize, 0, 5, 1];
    let mask = [true, true, false, true];
    let r = check_gradients(&[logits.clone()], |tape, ids| {
        let (loss, _) = tape.masked_cross_entropy(ids[0], &targets, &mask).unwrap();
        loss
    });
    println!("cross_entropy max rel {:.2e}", r.max_rel);

    let mut tape = Tape::new();
    let id = tape.param(logits);
    let (loss, _) = tape.masked_cross_entropy(id, &targets, &mask).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(id).unwrap();
    assert!(g[12..18].iter().all(|&v| v == 0.0), "masked-out row leaked gradient");
}

#[test]
fn weighted_sum_gradients() {
    let x = Tensor::from_vec(vec![2, 3], test_values(6, 21)).unwrap();
    let w = [0.5f32, -1.0, 0.25, 0.75, -0.5, 1.0];
    let r = check_gradients(&[x], |tape, ids| tape.weighted_sum(ids[0], &w).unwrap());
    println!("weighted_sum max rel {:.2e}", r.max_rel);
}

#[test]
fn chained_ops_gradients() {
    // Two affine layers with relu and layer_norm feeding cross-entropy:
    // exercises gradient flow through a realistic op chain.
    let x = Tensor::from_vec(vec![3, 4], test_values(12, 22)).unwrap();
    let w1 = Tensor::from_vec(vec![4, 5], test_values(20, 23)).unwrap();
    let b1 = Tensor::from_vec(vec![5], test_values(5, 24)).unwrap();
    let w2 = Tensor::from_vec(vec![5, 4], test_values(20, 25)).unwrap();
    let gain = Tensor::from_vec(vec![4], test_values(4, 26)).unwrap();
    let bias = Tensor::from_vec(vec![4], test_values(4, 27)).unwrap();
    let targets = [1usize, 3, 0];
    let mask = [true, true, true];
    let r = check_gradients(&[x, w1, b1, w2, gain, bias], |tape, ids| {
        let h = tape.matmul(ids[0], ids[1]).unwrap();
        let h = tape.add_bias(h, ids[2]).unwrap();
        let h = tape.relu(h);
        let h = tape.matmul(h, ids[3]).unwrap();
        let h = tape.layer_norm(h, ids[4], ids[5], 1e-5).unwrap();
        let (loss, _) = tape.masked_cross_entropy(h, &targets, &mask).unwrap();
        loss
    });
    assert_eq!(r.checked, 12 + 20 + 5 + 20 + 4 + 4);
    println!("chained max rel {:.2e}", r.max_rel);
}
