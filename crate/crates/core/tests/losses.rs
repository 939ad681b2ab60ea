use std::f64::consts::LN_2;

use polyinter_core::interpreter::*;
use polyinter_core::losses::*;
use polyinter_core::numerics::{
    check_gradients, check_param_gradients, randn, ParamVisitor, Tape, Tensor,
};
use polyinter_core::rng::seeded;
use polyinter_core::training::{Adam, PolyInter};
use polyinter_core::Error;
use proptest::prelude::*;

fn style(f: &Tensor, g: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(f.clone()), t.constant(g.clone()));
    let l = style_loss(&mut t, a, b).unwrap();
    t.scalar(l)
}

#[test]
fn style_loss_closed_forms() {
    let f = randn(vec![5, 3, 4], 1.0, &mut seeded(1));
    assert_eq!(style(&f, &f), 0.0);
    let shifted = f.map(|v| v - 0.7);
    assert!((style(&shifted, &f) - 0.7 * 5f64.sqrt()).abs() < 1e-12);

    let mut z = f.clone();
    let mut stds = Vec::new();
    for c in 0..5 {
        let row = &mut z.data_mut()[c * 12..(c + 1) * 12];
        let mean = row.iter().sum::<f64>() / 12.0;
        row.iter_mut().for_each(|v| *v -= mean);
        stds.push((row.iter().map(|v| v * v).sum::<f64>() / 12.0).sqrt());
    }
    let norm = stds.iter().map(|s| s * s).sum::<f64>().sqrt();
    let scaled = z.map(|v| 1.8 * v);
    assert!((style(&scaled, &z) - 0.8 * norm).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn style_loss_depends_only_on_channel_moments(seed in 0u64..10_000, rot in 1usize..12) {
        let f = randn(vec![3, 3, 4], 1.0, &mut seeded(seed));
        let g = randn(vec![3, 3, 4], 1.3, &mut seeded(seed + 1));
        let mut p = f.clone();
        for c in 0..3 {
            p.data_mut()[c * 12..(c + 1) * 12].rotate_left((rot + c) % 12);
        }
        prop_assert!((style(&p, &g) - style(&f, &g)).abs() < 1e-12);
        prop_assert!(style(&f, &g) >= 0.0);
        prop_assert_eq!(style(&g, &g), 0.0);
    }
}

#[test]
fn style_loss_gradient() {
    let f = randn(vec![4, 3, 3], 1.0, &mut seeded(2));
    let g = randn(vec![4, 3, 3], 1.0, &mut seeded(3));
    let err = check_gradients(&[f, g], 1e-5, |t, v| style_loss(t, v[0], v[1])).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn silent_disc(c: usize) -> Discriminator {
    let mut d = Discriminator::new(c, 0);
    d.fc.tensor = Tensor::zeros(vec![DISC_CHANNELS, 1]);
    d
}

#[test]
fn adversarial_losses_at_uncertainty_and_saturation() {
    let f = randn(vec![4, 8, 8], 1.0, &mut seeded(1));
    let mut t = Tape::new();
    let (a, b) = (t.constant(f.clone()), t.constant(f.map(|v| v + 1.0)));
    let (ld, lg) = adversarial_losses(&mut t, &silent_disc(4), a, b).unwrap();
    assert!((t.scalar(ld) - 2.0 * LN_2).abs() < 1e-12);
    assert!((t.scalar(lg) - LN_2).abs() < 1e-12);

    // Positive weights: all-ones input gives a positive pooled response,
    // all-zeros gives exactly zero; rescale so the logits are ±20.
    let mut d = Discriminator::new(4, 0);
    d.conv1.tensor = d.conv1.tensor.map(|_| 0.1);
    d.conv2.tensor = d.conv2.tensor.map(|_| 0.1);
    d.fc.tensor = Tensor::full(vec![DISC_CHANNELS, 1], 1.0);
    let ego = Tensor::full(vec![4, 8, 8], 1.0);
    let fake = Tensor::zeros(vec![4, 8, 8]);
    let mut t = Tape::new();
    let e = t.constant(ego.clone());
    let z = d.forward(&mut t, e, true).unwrap();
    let z_ego = t.scalar(z);
    assert!(z_ego > 0.0);
    d.fc.tensor = d.fc.tensor.map(|_| 40.0 / z_ego);
    d.fc_bias.tensor = Tensor::full(vec![1, 1], -20.0);
    let mut t = Tape::new();
    let (e, g) = (t.constant(ego), t.constant(fake));
    let (ld, lg) = adversarial_losses(&mut t, &d, g, e).unwrap();
    assert!(t.scalar(ld) < 1e-6, "{}", t.scalar(ld));
    assert!((t.scalar(lg) - 20.0).abs() < 1e-6);
}

#[test]
fn adversarial_gradients() {
    let d = Discriminator::new(3, 5);
    let f_g = randn(vec![3, 4, 4], 1.0, &mut seeded(6));
    let f_e = randn(vec![3, 4, 4], 1.0, &mut seeded(7));
    let (err, names) = check_param_gradients(&d, 1e-5, |t, d| {
        let (g, e) = (t.constant(f_g.clone()), t.constant(f_e.clone()));
        discriminator_loss(t, d, g, e)
    })
    .unwrap();
    assert_eq!(names.len(), 6);
    assert!(err < 1e-4, "{err}");
    let err = check_gradients(std::slice::from_ref(&f_g), 1e-5, |t, v| {
        generator_loss(t, &d, v[0])
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
    // loss_d never reaches f_g; loss_gen never reaches D.
    let mut t = Tape::new();
    let g = t.leaf(f_g.clone(), true);
    let e = t.constant(f_e.clone());
    let ld = discriminator_loss(&mut t, &d, g, e).unwrap();
    assert!(t
        .backward(ld)
        .unwrap()
        .wrt(g)
        .is_none_or(|x| x.iter().all(|&v| v == 0.0)));
    let mut t = Tape::new();
    let g = t.constant(f_g);
    let lg = generator_loss(&mut t, &d, g).unwrap();
    let _ = lg;
    assert!(t.bindings().is_empty());
}

#[test]
fn training_only_d_on_identical_classes_stays_uncertain() {
    let mut d = Discriminator::new(4, 2);
    let mut opt = Adam::new(1e-3);
    let mut last = Vec::new();
    for step in 0..300 {
        let f = randn(vec![4, 8, 8], 1.0, &mut seeded(1000 + step as u64 % 10));
        let mut t = Tape::new();
        let (a, b) = (t.constant(f.clone()), t.constant(f));
        let ld = discriminator_loss(&mut t, &d, a, b).unwrap();
        if step >= 250 {
            last.push(t.scalar(ld));
        }
        let g = t.backward(ld).unwrap();
        opt.step(&t, &g, &mut [&mut d as &mut dyn ParamVisitor]);
    }
    let mean = last.iter().sum::<f64>() / last.len() as f64;
    assert!((mean - 2.0 * LN_2).abs() < 0.05, "{mean}");
    assert!(last.iter().all(|&l| l >= 2.0 * LN_2 - 0.05));
}

fn parts(t: &mut Tape, v: [f64; 5]) -> LossParts {
    let s: Vec<_> = v.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
    LossParts {
        collab: s[0],
        single: s[1],
        style_s: s[2],
        adv_gen: Some(s[3]),
        style_g: Some(s[4]),
    }
}

#[test]
fn composite_loss_arithmetic() {
    let w = LossWeights::default();
    assert_eq!((w.omega, w.lambda_s, w.lambda_g), (0.5, 1.0, 1.0));
    let mut t = Tape::new();
    let p = parts(&mut t, [0.0; 5]);
    let l = phase1_loss(&mut t, &p, &w, 0).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let p = parts(&mut t, [1.0; 5]);
    let l = phase1_loss(&mut t, &p, &w, 0).unwrap();
    assert!((t.scalar(l) - 4.0).abs() < 1e-15);
    let l = phase2_loss(&mut t, &p, &w, 0).unwrap();
    assert!((t.scalar(l) - 2.5).abs() < 1e-15);
    let p = parts(&mut t, [0.3, 1.7, 2.9, 0.4, 1.1]);
    let zero = LossWeights {
        lambda_s: 0.0,
        lambda_g: 0.0,
        ..w
    };
    let l = phase1_loss(&mut t, &p, &zero, 0).unwrap();
    assert_eq!(t.scalar(l), 0.3);
    let a = phase2_loss(&mut t, &p, &w, 0).unwrap();
    let b = phase1_loss(&mut t, &p, &LossWeights { lambda_g: 0.0, ..w }, 0).unwrap();
    assert_eq!(t.scalar(a), t.scalar(b));
}

#[test]
fn non_finite_term_is_named() {
    let mut t = Tape::new();
    let p = parts(&mut t, [1.0, 1.0, f64::NAN, 1.0, 1.0]);
    match phase1_loss(&mut t, &p, &LossWeights::default(), 7) {
        Err(Error::Divergence { step: 7, term }) => assert_eq!(term, "l_style_s"),
        other => panic!("{other:?}"),
    }
}

fn tiny() -> PolyInter {
    let mut net = InterpreterNet::new(
        InterpreterConfig {
            d_k: 8,
            window: 2,
            ..Default::default()
        },
        4,
        4,
        4,
        3,
    )
    .unwrap();
    net.add_resizer("n", 3, 0).unwrap();
    let mut prompts = PromptSet::new(randn(vec![4, 4, 4], 0.5, &mut seeded(6)));
    prompts
        .register(SpecificPrompt::dense("n", randn(vec![3, 4, 4], 0.5, &mut seeded(7))).unwrap())
        .unwrap();
    PolyInter {
        net,
        prompts,
        disc: Discriminator::new(4, 8),
    }
}

#[test]
fn composite_gradients() {
    let model = tiny();
    let e = randn(vec![4, 4, 4], 1.0, &mut seeded(1));
    let n = randn(vec![3, 4, 4], 1.0, &mut seeded(2));
    for phase1 in [true, false] {
        let (err, _) = check_param_gradients(&model, 1e-5, |t, m| {
            let (ev, nv) = (t.constant(e.clone()), t.constant(n.clone()));
            let it = interpret(t, &m.net, &m.prompts, "n", ev, nv)?;
            let collab = t.sum(it.out);
            let collab = t.scale(collab, 0.01);
            let single = t.mean(it.f_s);
            let style_s = style_loss(t, it.f_s, ev)?;
            let w = LossWeights::default();
            if phase1 {
                let adv_gen = generator_loss(t, &m.disc, it.f_g)?;
                let style_g = style_loss(t, it.f_g, ev)?;
                phase1_loss(
                    t,
                    &LossParts {
                        collab,
                        single,
                        style_s,
                        adv_gen: Some(adv_gen),
                        style_g: Some(style_g),
                    },
                    &w,
                    0,
                )
            } else {
                phase2_loss(
                    t,
                    &LossParts {
                        collab,
                        single,
                        style_s,
                        adv_gen: None,
                        style_g: None,
                    },
                    &w,
                    0,
                )
            }
        })
        .unwrap();
        assert!(err < 1e-4, "phase1={phase1}: {err}");
    }
}

#[test]
fn generator_step_moves_only_phi() {
    let mut model = tiny();
    let before = model.clone();
    let e = randn(vec![4, 4, 4], 1.0, &mut seeded(1));
    let n = randn(vec![3, 4, 4], 1.0, &mut seeded(2));
    let mut t = Tape::new();
    let (ev, nv) = (t.constant(e), t.constant(n));
    let it = interpret(&mut t, &model.net, &model.prompts, "n", ev, nv).unwrap();
    let lg = generator_loss(&mut t, &model.disc, it.f_g).unwrap();
    let g = t.backward(lg).unwrap();
    Adam::new(1e-2).step(&t, &g, &mut [&mut model as &mut dyn ParamVisitor]);
    let mut changed = Vec::new();
    let mut old = std::collections::BTreeMap::new();
    before.visit_params(&mut |p| {
        old.insert(p.name.clone(), p.tensor.clone());
    });
    model.visit_params(&mut |p| {
        if old[&p.name] != p.tensor {
            changed.push(p.name.clone());
        }
    });
    let phi = [
        "interpreter.channel.wq",
        "interpreter.channel.wk",
        "interpreter.ln_f.gain",
        "interpreter.ln_f.bias",
        GENERAL_NAME,
    ];
    assert!(
        changed.iter().all(|c| phi.contains(&c.as_str())),
        "{changed:?}"
    );
    assert!(
        changed.contains(&GENERAL_NAME.to_string())
            && changed.contains(&"interpreter.channel.wq".to_string())
    );
}
