use super::*;
use crate::rng::seeded;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    randn(shape.to_vec(), 1.0, &mut seeded(seed))
}

/// Contract an arbitrary-shaped output with fixed random weights so every
/// output entry contributes a distinct coefficient to the checked scalar.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let w = rand_t(tape.shape(out), seed ^ 0xABCD);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

fn assert_grad(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
) {
    let err = check_gradients(inputs, H, build).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn softmax_uniform_row() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 3]));
    let y = t.softmax_rows(x, 1.0).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_saturates_without_overflow() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = t.softmax_rows(x, 1.0).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
}

#[test]
fn softmax_closed_form() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let y = t.softmax_rows(x, 1.0).unwrap();
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    let d = t.value(y).data();
    assert!((d[0] - e1 / (e1 + e2)).abs() < 1e-15);
    assert!((d[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
    assert!((d[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(
        t.softmax_rows(x, 1.0),
        Err(crate::Error::NumericDomain { .. })
    ));
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(vec![1, 4], 1.0));
    let y = t.layer_norm_rows(c, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));

    let x = t.constant(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
    let y = t.layer_norm_rows(x, 0.0).unwrap();
    assert_eq!(t.value(y).data(), &[-1.0, 1.0]);

    let g = t.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
    let scaled = t.mul_channel(y, g).unwrap();
    let out = t.add_channel(scaled, b).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 5.0]);
}

#[test]
fn layer_norm_moments() {
    let mut t = Tape::new();
    let x = t.constant(rand_t(&[5, 12], 3));
    let y = t.layer_norm_rows(x, 1e-9).unwrap();
    for row in t.value(y).data().chunks(12) {
        let m = row.iter().sum::<f64>() / 12.0;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
        assert!(m.abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-5);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(rand_t(&[2, 2], 1), true);
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 4]);
}

#[test]
fn backward_of_matmul_sum() {
    let (a, b) = (rand_t(&[2, 3], 1), rand_t(&[3, 4], 2));
    let mut t = Tape::new();
    let av = t.leaf(a, true);
    let bv = t.leaf(b.clone(), true);
    let p = t.matmul(av, bv).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    // ones[2×4] · Bᵀ: every row equals the row sums of B.
    let expect: Vec<f64> = (0..2)
        .flat_map(|_| (0..3).map(|k| b.data()[k * 4..(k + 1) * 4].iter().sum::<f64>()))
        .collect();
    for (x, y) in g.wrt(av).unwrap().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(rand_t(&[2, 2], 1), true);
    assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn frozen_parameter_gets_no_gradient() {
    let mut p = Parameter::new("w", rand_t(&[3], 4));
    p.frozen = true;
    let mut t = Tape::new();
    let w = t.param(&p);
    let x = t.leaf(rand_t(&[3], 5), true);
    let y = t.mul(w, x).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(w).is_none());
    assert!(g.wrt(x).is_some());
    assert!(t.bindings().is_empty());
}

#[test]
fn finite_diff_of_square() {
    let g = finite_diff_gradient(|x| x.item() * x.item(), &Tensor::scalar(3.0), 1e-5);
    assert!((g.item() - 6.0).abs() < 1e-6);
}

#[test]
fn finite_diff_matches_softmax_backward() {
    let x = rand_t(&[2, 3], 9);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let y = t.softmax_rows(xv, 1.0).unwrap();
    let yt = t.transpose(y).unwrap();
    let col = t.slice_rows(yt, 0, 1).unwrap();
    let s = t.sum(col);
    let g = t.backward(s).unwrap();
    let fd = finite_diff_gradient(
        |p| {
            let mut t = Tape::new();
            let xv = t.constant(p.clone());
            let y = t.softmax_rows(xv, 1.0).unwrap();
            let d = t.value(y).data();
            d[0] + d[3]
        },
        &x,
        1e-5,
    );
    assert!(max_relative_error(g.wrt(xv).unwrap(), fd.data()) < 1e-5);
}

#[test]
fn gradients_elementwise() {
    let ins = [rand_t(&[3, 4], 1), rand_t(&[3, 4], 2)];
    assert_grad("add", &ins, |t, v| {
        let o = t.add(v[0], v[1])?;
        contract(t, o, 1)
    });
    assert_grad("sub", &ins, |t, v| {
        let o = t.sub(v[0], v[1])?;
        contract(t, o, 2)
    });
    assert_grad("mul", &ins, |t, v| {
        let o = t.mul(v[0], v[1])?;
        contract(t, o, 3)
    });
    assert_grad("maximum", &ins, |t, v| {
        let o = t.maximum(v[0], v[1])?;
        contract(t, o, 4)
    });
    assert_grad("scale+shift", &ins[..1], |t, v| {
        let o = t.scale(v[0], -1.7);
        let o = t.add_scalar(o, 0.3);
        contract(t, o, 5)
    });
    assert_grad("relu", &ins[..1], |t, v| {
        let o = t.relu(v[0]);
        contract(t, o, 6)
    });
    assert_grad("tanh", &ins[..1], |t, v| {
        let o = t.tanh(v[0]);
        contract(t, o, 7)
    });
    assert_grad("sigmoid", &ins[..1], |t, v| {
        let o = t.sigmoid(v[0]);
        contract(t, o, 8)
    });
}

#[test]
fn gradients_broadcast_and_linear() {
    let x = rand_t(&[3, 2, 2], 1);
    let b = rand_t(&[3], 2);
    assert_grad("add_channel", &[x.clone(), b.clone()], |t, v| {
        let o = t.add_channel(v[0], v[1])?;
        contract(t, o, 1)
    });
    assert_grad("mul_channel", &[x, b], |t, v| {
        let o = t.mul_channel(v[0], v[1])?;
        contract(t, o, 2)
    });
    assert_grad(
        "matmul",
        &[rand_t(&[4, 3], 3), rand_t(&[3, 5], 4)],
        |t, v| {
            let o = t.matmul(v[0], v[1])?;
            contract(t, o, 3)
        },
    );
    assert_grad("transpose+reshape+slice", &[rand_t(&[4, 6], 5)], |t, v| {
        let o = t.transpose(v[0])?;
        let o = t.reshape(o, &[4, 6])?;
        let o = t.slice_rows(o, 1, 2)?;
        contract(t, o, 4)
    });
    assert_grad(
        "batch_matmul",
        &[rand_t(&[2, 3, 2], 6), rand_t(&[2, 2, 4], 7)],
        |t, v| {
            let o = t.batch_matmul(v[0], v[1])?;
            contract(t, o, 5)
        },
    );
    assert_grad("repeat_channels", &[rand_t(&[2, 3], 8)], |t, v| {
        let o = t.repeat_channels(v[0], 3)?;
        contract(t, o, 6)
    });
}

#[test]
fn gradients_normalisation() {
    assert_grad("softmax_rows", &[rand_t(&[4, 5], 1)], |t, v| {
        let o = t.softmax_rows(v[0], 2.5)?;
        contract(t, o, 1)
    });
    assert_grad("layer_norm_rows", &[rand_t(&[3, 6], 2)], |t, v| {
        let o = t.layer_norm_rows(v[0], 1e-5)?;
        contract(t, o, 2)
    });
    assert_grad("l2_normalize_rows", &[rand_t(&[3, 5], 3)], |t, v| {
        let o = t.l2_normalize_rows(v[0])?;
        contract(t, o, 3)
    });
}

#[test]
fn gradients_spatial() {
    assert_grad(
        "conv3x3 s1",
        &[rand_t(&[2, 5, 6], 1), rand_t(&[3, 2, 3, 3], 2)],
        |t, v| {
            let o = t.conv2d(v[0], v[1], 1, 1)?;
            contract(t, o, 1)
        },
    );
    assert_grad(
        "conv3x3 s2",
        &[rand_t(&[2, 6, 5], 3), rand_t(&[3, 2, 3, 3], 4)],
        |t, v| {
            let o = t.conv2d(v[0], v[1], 2, 1)?;
            contract(t, o, 2)
        },
    );
    assert_grad(
        "conv1x1",
        &[rand_t(&[4, 3, 3], 5), rand_t(&[2, 4, 1, 1], 6)],
        |t, v| {
            let o = t.conv2d(v[0], v[1], 1, 0)?;
            contract(t, o, 3)
        },
    );
    assert_grad("max_pool", &[rand_t(&[2, 6, 4], 7)], |t, v| {
        let o = t.max_pool(v[0], 2)?;
        contract(t, o, 4)
    });
    let qkv = [
        rand_t(&[3, 5, 4], 8),
        rand_t(&[3, 5, 4], 9),
        rand_t(&[3, 5, 4], 10),
    ];
    for (axis, window) in [
        (Axis::Height, 2),
        (Axis::Height, 8),
        (Axis::Width, 3),
        (Axis::Width, 4),
    ] {
        assert_grad("axial_attention", &qkv, |t, v| {
            let o = t.axial_attention(v[0], v[1], v[2], axis, window)?;
            contract(t, o, 5)
        });
    }
}

#[test]
fn gradients_reductions_and_losses() {
    let x = rand_t(&[3, 6], 1);
    assert_grad("sum/mean", std::slice::from_ref(&x), |t, v| {
        let a = t.sum(v[0]);
        let b = t.mean(v[0]);
        let b = t.scale(b, 3.0);
        t.mul(a, b)
    });
    assert_grad("row_mean", std::slice::from_ref(&x), |t, v| {
        let o = t.row_mean(v[0])?;
        contract(t, o, 2)
    });
    assert_grad("row_std", std::slice::from_ref(&x), |t, v| {
        let o = t.row_std(v[0])?;
        contract(t, o, 3)
    });
    assert_grad("l2_norm", std::slice::from_ref(&x), |t, v| {
        Ok(t.l2_norm(v[0]))
    });
    let targets: Vec<f64> = (0..18).map(|i| (i % 3 == 0) as u8 as f64).collect();
    assert_grad("focal", std::slice::from_ref(&x), |t, v| {
        t.focal_loss(v[0], targets.clone(), 0.25, 2.0, 4.0)
    });
    let target = rand_t(&[3, 6], 4)
        .into_data()
        .iter()
        .map(|v| v * 0.2)
        .collect::<Vec<_>>();
    let weight: Vec<f64> = (0..18).map(|i| (i % 2) as f64).collect();
    assert_grad("smooth_l1", std::slice::from_ref(&x), |t, v| {
        t.smooth_l1(v[0], target.clone(), weight.clone(), 1.0 / 9.0, 3.0)
    });
    let labels: Vec<f64> = (0..18).map(|i| (i % 2) as f64).collect();
    assert_grad("bce", &[x], |t, v| t.bce_with_logits(v[0], labels.clone()));
}

#[test]
fn axial_weights_are_stochastic_and_windowed() {
    let mut t = Tape::new();
    let q = t.constant(rand_t(&[2, 6, 3], 1));
    let k = t.constant(rand_t(&[2, 6, 3], 2));
    let v = t.constant(rand_t(&[2, 6, 3], 3));
    let o = t.axial_attention(q, k, v, Axis::Height, 4).unwrap();
    let w = t.attention_weights(o).unwrap();
    for line in 0..3 {
        for i in 0..6 {
            let row = &w[line * 36 + i * 6..line * 36 + (i + 1) * 6];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, a) in row.iter().enumerate() {
                if i / 4 != j / 4 {
                    assert_eq!(*a, 0.0);
                }
            }
        }
    }
}

#[test]
fn maximum_ties_route_to_first_operand() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::full(vec![3], 1.0), true);
    let b = t.leaf(Tensor::full(vec![3], 1.0), true);
    let m = t.maximum(a, b).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[1.0; 3]);
    assert_eq!(g.wrt(b).unwrap(), &[0.0; 3]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), spread in 0.0f64..200.0) {
            let mut t = Tape::new();
            let x = t.constant(randn(vec![rows, cols], spread, &mut seeded(seed)));
            let y = t.softmax_rows(x, 1.0).unwrap();
            for row in t.value(y).data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>()) {
            let run = || {
                let mut t = Tape::new();
                let x = t.constant(randn(vec![2, 4, 4], 1.0, &mut seeded(seed)));
                let w = t.constant(randn(vec![3, 2, 3, 3], 1.0, &mut seeded(seed ^ 1)));
                let y = t.conv2d(x, w, 1, 1).unwrap();
                t.value(y).to_le_bytes()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
