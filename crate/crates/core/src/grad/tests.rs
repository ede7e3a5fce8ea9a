use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bigla::DEFAULT_CHUNK;
use crate::block::Mixer;
use crate::model::{vig_forward, ViGConfig, ViGParams};

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Reduce any output to a scalar through a fixed random weighting.
fn dot_out(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.value(y).shape().to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    tape.dot(y, w)
}

/// Inputs and a scalar-valued graph exercising `kind`.
fn case(kind: OpKind) -> (Vec<Tensor>, Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 1);
    let r = &mut rng;
    match kind {
        OpKind::Leaf | OpKind::Dot => (vec![randn(&[3, 2], 1.0, r)], Box::new(|t, v| dot_out(t, v[0], 1))),
        OpKind::MatMul => (vec![randn(&[3, 4], 1.0, r), randn(&[4, 2], 1.0, r)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            dot_out(t, y, 2)
        })),
        OpKind::Add => (vec![randn(&[3, 4], 1.0, r), randn(&[3, 4], 1.0, r)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            dot_out(t, y, 3)
        })),
        OpKind::Mul => (vec![randn(&[3, 4], 1.0, r), randn(&[3, 4], 1.0, r)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            dot_out(t, y, 4)
        })),
        OpKind::AddRow => (vec![randn(&[3, 4], 1.0, r), randn(&[1, 4], 1.0, r)], Box::new(|t, v| {
            let y = t.add_row(v[0], v[1])?;
            dot_out(t, y, 5)
        })),
        OpKind::Scale => (vec![randn(&[3, 4], 1.0, r)], Box::new(|t, v| {
            let y = t.scale(v[0], -0.7);
            dot_out(t, y, 6)
        })),
        OpKind::Sigmoid => (vec![randn(&[3, 4], 2.0, r)], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            dot_out(t, y, 7)
        })),
        OpKind::Silu => (vec![randn(&[3, 4], 2.0, r)], Box::new(|t, v| {
            let y = t.silu(v[0]);
            dot_out(t, y, 8)
        })),
        OpKind::Gate => (vec![randn(&[3, 4], 2.0, r)], Box::new(|t, v| {
            let y = t.gate(v[0], 16.0);
            dot_out(t, y, 9)
        })),
        OpKind::RmsNorm => (vec![randn(&[2, 3, 4], 1.0, r), randn(&[4], 1.0, r)], Box::new(|t, v| {
            let y = t.rmsnorm(v[0], v[1], 1e-6)?;
            dot_out(t, y, 10)
        })),
        OpKind::DwConv3x3 => (
            vec![randn(&[4, 5, 3], 1.0, r), randn(&[3, 3, 3], 1.0, r), randn(&[3], 1.0, r)],
            Box::new(|t, v| {
                let y = t.dwconv3x3(v[0], v[1], v[2])?;
                dot_out(t, y, 11)
            }),
        ),
        OpKind::Conv2d => (
            vec![randn(&[5, 6, 2], 1.0, r), randn(&[3, 3, 2, 3], 1.0, r), randn(&[3], 1.0, r)],
            Box::new(|t, v| {
                let g = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
                let y = t.conv2d(v[0], v[1], v[2], g)?;
                dot_out(t, y, 12)
            }),
        ),
        OpKind::Reshape => (vec![randn(&[2, 6], 1.0, r)], Box::new(|t, v| {
            let y = t.reshape(v[0], [3, 4])?;
            let y = t.sigmoid(y);
            dot_out(t, y, 13)
        })),
        OpKind::Blend => (
            vec![randn(&[3, 4], 1.0, r), randn(&[3, 4], 1.0, r), randn(&[3, 4], 1.0, r)],
            Box::new(|t, v| {
                let g = t.sigmoid(v[0]);
                let y = t.blend(g, v[1], v[2])?;
                dot_out(t, y, 14)
            }),
        ),
        OpKind::MeanRows => (vec![randn(&[2, 3, 4], 1.0, r)], Box::new(|t, v| {
            let y = t.mean_rows(v[0]);
            dot_out(t, y, 15)
        })),
        OpKind::GlaScan => (
            vec![randn(&[7, 4], 1.0, r), randn(&[7, 4], 1.0, r), randn(&[7, 4], 1.0, r), randn(&[7, 4], 1.0, r)],
            Box::new(|t, v| {
                let a = t.gate(v[3], 2.0);
                let y = t.gla_scan(v[0], v[1], v[2], a, 2, Direction::Backward, 3)?;
                dot_out(t, y, 16)
            }),
        ),
        OpKind::BiGlaScan => (
            vec![randn(&[7, 4], 1.0, r), randn(&[7, 4], 1.0, r), randn(&[7, 4], 1.0, r), randn(&[7, 8], 1.0, r)],
            Box::new(|t, v| {
                let a = t.gate(v[3], 2.0);
                let y = t.bigla_scan(v[0], v[1], v[2], a, 2, ScanImpl::Fused { chunk: 3 })?;
                dot_out(t, y, 17)
            }),
        ),
        OpKind::CrossEntropy => (vec![randn(&[5], 2.0, r)], Box::new(|t, v| t.cross_entropy(v[0], 3))),
    }
}

fn eval(inputs: &[Tensor], build: &Builder) -> Result<(f64, Vec<Tensor>, Vec<OpKind>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], vars.iter().map(|&v| g.wrt(v)).collect(), g.visited))
}

#[test]
fn every_op_has_a_checked_adjoint() {
    for kind in OpKind::ALL {
        let (inputs, build) = case(kind);
        let (_, analytic, visited) = eval(&inputs, &build).unwrap();
        assert!(visited.contains(&kind), "{kind:?} adjoint never ran");
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        let grad: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let f = |theta: &[f64]| {
            let mut off = 0;
            let ts: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    off += n;
                    Tensor::new(s.clone(), theta[off - n..off].to_vec()).unwrap()
                })
                .collect();
            Ok(eval(&ts, &build)?.0)
        };
        let coords: Vec<usize> = (0..flat.len()).collect();
        let r = finite_diff_check(f, &flat, &grad, 1e-5, &coords).unwrap();
        assert!(r.max_rel_err < 1e-6, "{kind:?}: {r:?}");
    }
}

#[test]
fn gate_gradient_near_unit_gate() {
    // z ≈ 8..12: sigmoid(z) ≈ 1 − e^{-z}, derivative ≈ e^{-z}/τ, the worst-conditioned regime.
    let z = Tensor::from_fn([2, 3], |i| 8.0 + i as f64 * 0.8);
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let a = tape.gate(zv, 16.0);
    let loss = tape.dot(a, Tensor::full([2, 3], 1.0)).unwrap();
    let g = tape.backward(loss).unwrap().wrt(zv);
    for (gi, &zi) in g.data().iter().zip(z.data()) {
        let s = 1.0 / (1.0 + (-zi).exp());
        let expected = s.powf(1.0 / 16.0) * (1.0 - s) / 16.0;
        assert!((gi - expected).abs() / expected < 1e-12);
    }
    let f = |t: &[f64]| Ok(t.iter().map(|&zi| gate_scalar(zi, 16.0)).sum());
    let r = finite_diff_check(f, z.data(), g.data(), 1e-5, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn cross_entropy_values() {
    let (l, g) = cross_entropy(&Tensor::zeros([4]), 2).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    assert!((g.data()[2] + 0.75).abs() < 1e-15 && (g.data()[0] - 0.25).abs() < 1e-15);
    let (l, _) = cross_entropy(&Tensor::new([3], vec![0.0, 800.0, 0.0]).unwrap(), 1).unwrap();
    assert!(l < 1e-300);
    assert!(cross_entropy(&Tensor::zeros([3]), 3).is_err());

    let logits = Tensor::new([3], vec![0.3, -1.1, 2.0]).unwrap();
    let (_, g) = cross_entropy(&logits, 0).unwrap();
    let f = |t: &[f64]| Ok(softmax_xent(t, 0)?.0);
    let r = finite_diff_check(f, logits.data(), g.data(), 1e-5, &[0, 1, 2]).unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([2], 1.0));
    let unused = tape.leaf(Tensor::full([3], 1.0));
    let loss = tape.dot(x, Tensor::full([2], 2.0)).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), Tensor::zeros([3]));
    assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
}

fn tiny_model(seed: u64, mixer: Mixer) -> (ViGConfig, ViGParams, Tensor) {
    let config = ViGConfig { mixer, ..ViGConfig::tiny(32, 32, 3) };
    let mut p = ViGParams::init(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
        }
    }
    let img = Tensor::uniform([32, 32, 3], 0.0, 1.0, &mut rng);
    (config, p, img)
}

#[test]
fn taped_forward_equals_plain_forward() {
    for mixer in [Mixer::Full, Mixer::LocalOnly] {
        let (config, p, img) = tiny_model(1, mixer);
        let mut tape = Tape::new();
        let g = vig_forward_taped(&mut tape, &img, &p, &config, ScanImpl::Fused { chunk: DEFAULT_CHUNK }).unwrap();
        assert_eq!(tape.value(g.logits), &vig_forward(&img, &p, &config).unwrap());
    }
}

#[test]
fn fused_and_two_pass_gradients_agree() {
    let (config, p, img) = tiny_model(2, Mixer::Full);
    let (la, ga) = loss_and_grad(&p, &config, &img, 1, ScanImpl::Fused { chunk: 3 }).unwrap();
    let (lb, gb) = loss_and_grad(&p, &config, &img, 1, ScanImpl::TwoPass).unwrap();
    assert!((la - lb).abs() <= 1e-12 * la.abs());
    for (a, b) in ga.iter().zip(&gb) {
        let scale = a.max_abs().max(b.max_abs()).max(1e-300);
        assert!(a.sub(b).unwrap().max_abs() / scale < 1e-9);
    }
}

#[test]
fn small_model_gradient_check() {
    let (config, p, img) = tiny_model(3, Mixer::Full);
    let imp = ScanImpl::Fused { chunk: 2 };
    let (_, grads) = loss_and_grad(&p, &config, &img, 2, imp).unwrap();
    let theta = flatten(&p);
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    let coords = sample_coordinates(theta.len(), 40, 9);
    let f = |t: &[f64]| {
        let q = unflatten(&p, t)?;
        let (loss, _) = softmax_xent(vig_forward(&img, &q, &config)?.data(), 2)?;
        Ok(loss)
    };
    let r = finite_diff_check(f, &theta, &analytic, 1e-5, &coords).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn flatten_round_trip() {
    let (_, p, _) = tiny_model(4, Mixer::Full);
    let flat = flatten(&p);
    assert_eq!(flat.len(), p.num_params());
    assert_eq!(unflatten(&p, &flat).unwrap(), p);
    assert!(unflatten(&p, &flat[1..]).is_err());
}
