use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t2(r: usize, c: usize, d: &[f64]) -> Tensor {
    Tensor::matrix(r, c, d.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences of a scalar function of several inputs,
/// evaluated without touching the tape's backward rules.
fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let h = 1e-6;
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Checks tape gradients of `build` against finite differences.
fn gradcheck(inputs: &[Tensor], build: &Build) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let numeric = numeric_grads(inputs, &eval);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    vars.iter()
        .zip(&numeric)
        .map(|(v, n)| rel_err(tape.grad(*v).unwrap(), n))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(Tensor::identity(2));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    let x = tape.constant(t2(1, 1, &[2.0]));
    let y = tape.constant(t2(1, 1, &[3.0]));
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.data(z), &[6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let b = rand_tensor(&mut rng, &[3, 3]);
    let err = gradcheck(&[a, b], &|t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let sa = tape.softmax_rows(a, None).unwrap();
    assert_eq!(tape.data(sa), &[0.5, 0.5]);

    let b = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]).unwrap());
    let sb = tape.softmax_rows(b, None).unwrap();
    assert!((tape.data(sb)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.data(sb)[1] - 1.0 / 3.0).abs() < 1e-15);

    let c = tape.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let sc = tape.softmax_rows(c, None).unwrap();
    assert!((tape.data(sc)[0] - 1.0).abs() < 1e-12);
    assert!(tape.data(sc)[1] < 1e-12);
    assert!(tape.value(sc).is_finite());
}

#[test]
fn softmax_mask_zeroes_and_degenerate_row_warns() {
    let ninf = f64::NEG_INFINITY;
    let mut tape = Tape::new();
    let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
    let mask = t2(2, 3, &[0.0, ninf, 0.0, ninf, ninf, ninf]);
    let y = tape.softmax_rows(x, Some(&mask)).unwrap();
    let d = tape.data(y);
    assert_eq!(d[1], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    assert_eq!(
        tape.warnings(),
        &[TapeWarning::DegenerateSoftmaxRow {
            record: y.index(),
            row: 1
        }]
    );

    let bad = t2(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(
        tape.softmax_rows(x, Some(&bad)),
        Err(GradError::Contract(_))
    ));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![2.0, 2.0, 2.0]).unwrap());
    let m = tape.mul(a, b).unwrap();
    assert_eq!(tape.data(m), &[2.0, 4.0, 6.0]);
    let neg = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.log(neg), Err(GradError::Domain { .. })));
}

#[test]
fn relu_squared_gradient() {
    for (x0, expected) in [(3.0, 6.0), (-1.0, 0.0), (0.0, 0.0)] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![x0]).unwrap().with_requires_grad(true));
        let r = tape.relu(x);
        let sq = tape.mul(r, r).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[expected]);
    }
}

#[test]
fn broadcast_is_leading_only() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::full(&[3], 1.0));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.data(c), &[1.0; 6]);
    let bad = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.add(a, bad).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let l = tape.cross_entropy_logits(u, 0).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    let s = tape.constant(Tensor::vector(vec![30.0, 0.0]).unwrap());
    let l = tape.cross_entropy_logits(s, 0).unwrap();
    assert!(tape.value(l).item() < 1e-12);
    assert!(matches!(
        tape.cross_entropy_logits(s, 2),
        Err(GradError::Index { index: 2, bound: 2, .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[5]);
        let target = rng.random_range(0..5);
        let err = gradcheck(&[x], &move |t, v| t.cross_entropy_logits(v[0], target).unwrap());
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn cosine_examples() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![0.3, -2.0, 1.0]).unwrap());
    let c = tape.cosine_similarity(v, v).unwrap();
    assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
    let e1 = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    let e2 = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
    let m1 = tape.constant(Tensor::vector(vec![-1.0, 0.0]).unwrap());
    let c = tape.cosine_similarity(e1, e2).unwrap();
    assert_eq!(tape.value(c).item(), 0.0);
    let c = tape.cosine_similarity(e1, m1).unwrap();
    assert_eq!(tape.value(c).item(), -1.0);
    assert!(tape.warnings().is_empty());
    let z = tape.constant(Tensor::zeros(&[2]));
    let c = tape.cosine_similarity(z, e1).unwrap();
    assert_eq!(tape.value(c).item(), 0.0);
    assert!(matches!(
        tape.warnings(),
        [TapeWarning::CosineEpsilonFloor { .. }]
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]).unwrap().with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(GradError::Contract(_))));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(GradError::Contract(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn unreached_leaf_gets_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0]).unwrap().with_requires_grad(true));
    let y = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
}

fn mlp(t: &mut Tape, v: &[Var]) -> Var {
    // v = [x, w1, b1, w2, b2]
    let h = t.matmul(v[0], v[1]).unwrap();
    let h = t.add(h, v[2]).unwrap();
    let h = t.relu(h);
    let o = t.matmul(h, v[3]).unwrap();
    let o = t.add(o, v[4]).unwrap();
    let sq = t.mul(o, o).unwrap();
    t.mean(sq)
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3, 5]),
        rand_tensor(&mut rng, &[5]),
        rand_tensor(&mut rng, &[5, 2]),
        rand_tensor(&mut rng, &[2]),
    ];
    let err = gradcheck(&inputs, &mlp);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn tape_replay_gives_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Tensor> = [[4usize, 3], [3, 5]]
        .iter()
        .map(|s| rand_tensor(&mut rng, s).with_requires_grad(true))
        .collect();
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let c = tape.matmul(vars[0], vars[1]).unwrap();
        let e = tape.exp(c);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        tape.grad(vars[1]).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_op_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ninf = f64::NEG_INFINITY;
    let mask = t2(3, 3, &[0.0, ninf, ninf, 0.0, 0.0, ninf, 0.0, 0.0, 0.0]);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let sq = rand_tensor(&mut rng, &[3, 3]);
        let pos = Tensor::new(vec![3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        let w = rand_tensor(&mut rng, &[3, 4]);
        let checks: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("transpose", vec![a.clone(), w.clone()], Box::new(|t, v| {
                let tr = t.transpose(v[0]).unwrap();
                let p = t.matmul(v[1], tr).unwrap();
                let p2 = t.mul(p, p).unwrap();
                t.sum(p2)
            })),
            ("add/sub/mul", vec![a.clone(), b.clone()], Box::new(|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[1]).unwrap();
                let m = t.mul(m, s).unwrap();
                t.sum(m)
            })),
            ("exp/log/scale", vec![pos.clone()], Box::new(|t, v| {
                let l = t.log(v[0]).unwrap();
                let e = t.exp(l);
                let e = t.mul(e, l).unwrap();
                let s = t.scale(e, -1.7);
                t.sum(s)
            })),
            ("relu", vec![a.clone(), w.clone()], Box::new(|t, v| {
                let r = t.relu(v[0]);
                let m = t.mul(r, v[1]).unwrap();
                t.sum(m)
            })),
            ("softmax_rows", vec![sq.clone(), sq.clone()], Box::new({ let mask2 = mask.clone(); move |t, v| {
                let s = t.softmax_rows(v[0], Some(&mask2)).unwrap();
                let m = t.mul(s, v[1]).unwrap();
                t.sum(m)
            }})),
            ("cosine", vec![b.clone(), rand_tensor(&mut rng, &[4])], Box::new(|t, v| {
                t.cosine_similarity(v[0], v[1]).unwrap()
            })),
            ("rms_norm", vec![a.clone(), b.clone(), w.clone()], Box::new(|t, v| {
                let n = t.rms_norm(v[0], v[1], 1e-6).unwrap();
                let m = t.mul(n, v[2]).unwrap();
                t.sum(m)
            })),
            ("gather/concat", vec![a.clone(), w.clone()], Box::new(|t, v| {
                let g = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
                let c = t.concat_rows(&[g, v[1]]).unwrap();
                let cc = t.concat_cols(&[c, c]).unwrap();
                let m = t.mul(cc, cc).unwrap();
                t.mean(m)
            })),
            ("slice/splice", vec![a.clone(), w.clone()], Box::new(|t, v| {
                let blk = t.slice2d(v[1], 1, 2, 1, 2).unwrap();
                let blk = t.exp(blk);
                let sp = t.splice2d(v[0], blk, 0, 2).unwrap();
                let m = t.mul(sp, v[1]).unwrap();
                t.sum(m)
            })),
            ("stack", vec![b.clone(), w.clone()], Box::new(|t, v| {
                let s1 = t.sum(v[0]);
                let s2 = t.mean(v[1]);
                let st = t.stack(&[s1, s2, s1]).unwrap();
                t.cross_entropy_logits(st, 1).unwrap()
            })),
            ("calibrate_rows", vec![pos.clone(), w.clone()], Box::new(|t, v| {
                let c = t.calibrate_rows(v[0], &[0, 2], 1, &[2.0, 0.5], true).unwrap();
                let c = t.calibrate_rows(c, &[1], 0, &[3.0, 0.1, 1.5], false).unwrap();
                let m = t.mul(c, v[1]).unwrap();
                t.sum(m)
            })),
        ];
        for (name, inputs, build) in checks {
            let err = gradcheck(&inputs, build.as_ref());
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn calibrate_rows_unit_weights_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let c = tape.calibrate_rows(v, &[0, 1, 2, 3], 0, &[1.0; 3], true).unwrap();
    assert_eq!(tape.data(c), x.data());
}

#[test]
fn adam_runs_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.insert("w", rand_tensor(&mut rng, &[3, 2]).with_requires_grad(true));
        ps.insert("b", rand_tensor(&mut rng, &[2]).with_requires_grad(true));
        let x = rand_tensor(&mut rng, &[4, 3]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..10 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w = tape.leaf(ps.get("w").unwrap().clone());
            let b = tape.leaf(ps.get("b").unwrap().clone());
            let h = tape.matmul(xv, w).unwrap();
            let h = tape.add(h, b).unwrap();
            let h = tape.mul(h, h).unwrap();
            let l = tape.mean(h);
            tape.backward(l).unwrap();
            ps.zero_grad();
            let (gw, gb) = (tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec());
            ps.get_mut("w").unwrap().accumulate_grad(&gw).unwrap();
            ps.get_mut("b").unwrap().accumulate_grad(&gb).unwrap();
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(adam.step_count(), 10);
        ps
    };
    let (a, b) = (run(), run());
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, data in prop::collection::vec(-50.0f64..50.0, 20)) {
        let cols = 4;
        let x = Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v, None).unwrap();
        for r in 0..rows {
            let row = &tape.data(s)[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
