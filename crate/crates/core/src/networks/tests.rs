use super::*;
use crate::imaging::{gaussian_kernel, BlurKernel, KERNEL_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, 3, (0..3 * h * w).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap()
}

fn tiny() -> NetworkConfig {
    NetworkConfig {
        sr_features: 8,
        sr_blocks: 1,
        kernel_hidden: 4,
        seg_widths: [2, 3, 4],
        kernel_embed: 3,
        blur_skip: true,
    }
}

fn kernel_tensor<T: Real>(k: &BlurKernel) -> Tensor<T> {
    Tensor::from_vec([1, KERNEL_LEN, 1, 1], k.values().iter().map(|&v| T::of(v)).collect()).unwrap()
}

#[test]
fn sr_shape_and_kernel_normalization() {
    let net = SrNet::new(&NetworkConfig::default(), 1);
    let (sr, k) = net.infer(&random_image(1, 28, 28)).unwrap();
    assert_eq!(sr.dims(), (112, 112));
    assert_eq!(sr.channels(), 3);
    assert!(sr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let sum: f64 = k.values().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(k.values().iter().all(|&v| v >= 0.0));
}

#[test]
fn sr_rejects_small_inputs() {
    let net = SrNet::new(&NetworkConfig::default(), 1);
    assert!(matches!(net.infer(&random_image(1, 12, 20)), Err(crate::Error::Param(_))));
}

#[test]
fn seg_shape_and_simplex() {
    let net = SegNet::new(&NetworkConfig::default(), 2);
    let probs = net.infer(&random_image(2, 112, 112), None).unwrap();
    assert_eq!(probs.dims(), (112, 112));
    let (bg, fg) = (probs.plane(0), probs.plane(1));
    assert!(bg.iter().zip(fg).all(|(a, b)| (a + b - 1.0).abs() < 1e-6));
    assert!(net.infer(&random_image(2, 30, 32), None).is_err());
}

#[test]
fn blur_skip_starts_as_identity() {
    let cfg = NetworkConfig { blur_skip: true, ..Default::default() };
    let net = SegNet::new(&cfg, 3);
    let mut g = Graph::<f32>::new();
    let p = net.params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(&[random_image(3, 16, 16)]).unwrap());
    let feats = net.features(&mut g, &p, x);
    let k = g.constant(kernel_tensor(&gaussian_kernel(1.2, 0.7, 0.3).unwrap()));
    let out = net.blur_skip.unwrap().forward(&mut g, &p, feats, k);
    assert_eq!(g.value(out).shape(), g.value(feats).shape());
    assert_eq!(g.value(out).data(), g.value(feats).data());
}

#[test]
fn enabling_blur_skip_keeps_initial_outputs() {
    let off = SegNet::new(&NetworkConfig::default(), 6);
    let on = SegNet::new(&NetworkConfig { blur_skip: true, ..Default::default() }, 6);
    let img = random_image(6, 16, 16);
    let k = gaussian_kernel(1.4, 0.6, 0.9).unwrap();
    assert_eq!(off.infer(&img, Some(&k)).unwrap(), on.infer(&img, Some(&k)).unwrap());
}

#[test]
fn disabled_blur_skip_ignores_kernel() {
    let net = SegNet::new(&NetworkConfig::default(), 4);
    assert!(!net.has_blur_skip());
    let img = random_image(4, 16, 16);
    let k = gaussian_kernel(1.0, 2.0, 0.5).unwrap();
    assert_eq!(net.infer(&img, Some(&k)).unwrap(), net.infer(&img, None).unwrap());
}

#[test]
fn one_step_makes_blur_skip_kernel_dependent() {
    let cfg = NetworkConfig { blur_skip: true, ..Default::default() };
    let mut net = SegNet::new(&cfg, 5);
    let img = random_image(5, 16, 16);
    let (ka, kb) = (gaussian_kernel(0.5, 0.5, 0.0).unwrap(), gaussian_kernel(1.9, 1.2, 1.0).unwrap());
    assert_eq!(net.infer(&img, Some(&ka)).unwrap(), net.infer(&img, Some(&kb)).unwrap());

    let mut g = Graph::<f32>::new();
    let p = net.params.bind(&mut g, true);
    let x = g.constant(images_to_tensor(std::slice::from_ref(&img)).unwrap());
    let k = g.constant(kernel_tensor(&ka));
    let out = net.forward(&mut g, &p, x, Some(k));
    let seed = Tensor::full(g.value(out).shape(), 0.1f32);
    let mut grads = g.backward(vec![(out, seed)]);
    let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|v| grads.take(*v)).collect();
    let mut opt = Adam::new(&net.params, 1e-2);
    opt.step(&mut net.params, &grads);
    assert_ne!(net.infer(&img, Some(&ka)).unwrap(), net.infer(&img, Some(&kb)).unwrap());
}

/// Names of SR parameters that receive a nonzero gradient from a random
/// seed on the segmentation output.
fn sr_params_reached(cfg: &NetworkConfig, perturb_seg: bool) -> (Vec<String>, Vec<String>) {
    let sr = SrNet::new(cfg, 6);
    let mut seg = SegNet::new(cfg, 7);
    if perturb_seg {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..seg.params.len() {
            for v in seg.params.get_mut(i).data_mut() {
                *v += rng.gen_range(-0.05f32..0.05);
            }
        }
    }
    let lrs = vec![random_image(8, 16, 16), random_image(9, 16, 16)];
    let (x, up) = SrNet::prepare_inputs::<f32>(&lrs).unwrap();
    let mut g = Graph::<f32>::new();
    let ps = sr.params.bind(&mut g, true);
    let pc = seg.params.bind(&mut g, false);
    let (xv, uv) = (g.constant(x), g.constant(up));
    let out = sr.forward(&mut g, &ps, xv, uv);
    let probs = seg.forward(&mut g, &pc, out.sr, Some(out.kernel));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = g.value(probs).len();
    let seed = Tensor::from_vec(g.value(probs).shape(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let grads = g.backward(vec![(probs, seed)]);
    for v in &pc {
        assert!(grads.get(*v).is_none());
    }
    sr.params
        .names()
        .iter()
        .zip(&ps)
        .map(|(name, v)| (name.clone(), grads.get(*v).map_or(0.0, |t| t.norm()) > 0.0))
        .fold((Vec::new(), Vec::new()), |(mut hit, mut miss), (name, ok)| {
            if ok {
                hit.push(name)
            } else {
                miss.push(name)
            }
            (hit, miss)
        })
}

#[test]
fn segmentation_gradient_reaches_sr_body() {
    // Without blur skip the kernel head is not connected to the segmenter.
    let (_, missed) = sr_params_reached(&NetworkConfig::default(), false);
    assert!(!missed.is_empty());
    assert!(missed.iter().all(|n| n.starts_with("kernel.")), "{missed:?}");
}

#[test]
fn segmentation_gradient_reaches_every_sr_parameter_through_blur_skip() {
    let cfg = NetworkConfig { blur_skip: true, ..Default::default() };
    // At its identity start the blur skip passes no gradient to the kernel.
    let (_, missed) = sr_params_reached(&cfg, false);
    assert!(missed.iter().all(|n| n.starts_with("kernel.")));
    let (_, missed) = sr_params_reached(&cfg, true);
    assert!(missed.is_empty(), "{missed:?}");
}

#[test]
fn stacked_networks_match_finite_differences_in_f64() {
    let cfg = tiny();
    let sr = SrNet::new(&cfg, 10);
    let mut seg = SegNet::new(&cfg, 11);
    // Move the blur skip away from its identity start so its weights matter.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..seg.params.len() {
        for v in seg.params.get_mut(i).data_mut() {
            *v += rng.gen_range(-0.1f32..0.1);
        }
    }
    let sr_p: ParamSet<f64> = sr.params.cast();
    let seg_p: ParamSet<f64> = seg.params.cast();
    let (x, up) = SrNet::prepare_inputs::<f64>(&[random_image(13, 16, 16)]).unwrap();

    let run = |sp: &ParamSet<f64>, cp: &ParamSet<f64>| {
        let mut g = Graph::<f64>::new();
        let ps = sp.bind(&mut g, true);
        let pc = cp.bind(&mut g, true);
        let (xv, uv) = (g.constant(x.clone()), g.constant(up.clone()));
        let out = sr.forward(&mut g, &ps, xv, uv);
        let probs = seg.forward(&mut g, &pc, out.sr, Some(out.kernel));
        (g, ps, pc, out, probs)
    };
    let (g, ps, pc, out, probs) = run(&sr_p, &seg_p);
    let mut prng = ChaCha8Rng::seed_from_u64(14);
    let mut proj = |shape: [usize; 4]| {
        let n = shape.iter().product();
        Tensor::<f64>::from_vec(shape, (0..n).map(|_| prng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let (r_sr, r_k, r_p) =
        (proj(g.value(out.sr).shape()), proj(g.value(out.kernel).shape()), proj(g.value(probs).shape()));
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let objective = |sp: &ParamSet<f64>, cp: &ParamSet<f64>| {
        let (g, _, _, out, probs) = run(sp, cp);
        dot(g.value(out.sr), &r_sr) + dot(g.value(out.kernel), &r_k) + dot(g.value(probs), &r_p)
    };
    let grads = g.backward(vec![(out.sr, r_sr.clone()), (out.kernel, r_k.clone()), (probs, r_p.clone())]);

    let h = 1e-6;
    let mut pick = ChaCha8Rng::seed_from_u64(15);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for which in 0..2 {
        let (set, vars) = if which == 0 { (&sr_p, &ps) } else { (&seg_p, &pc) };
        for (i, &var) in vars.iter().enumerate().take(set.len()) {
            let idx = pick.gen_range(0..set.get(i).len());
            analytic.push(grads.get(var).map_or(0.0, |t| t.data()[idx]));
            let mut probe = set.clone();
            let orig = probe.get(i).data()[idx];
            probe.get_mut(i).data_mut()[idx] = orig + h;
            let up_v = if which == 0 { objective(&probe, &seg_p) } else { objective(&sr_p, &probe) };
            probe.get_mut(i).data_mut()[idx] = orig - h;
            let down_v = if which == 0 { objective(&probe, &seg_p) } else { objective(&sr_p, &probe) };
            numeric.push((up_v - down_v) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-5, "relative error {}", diff / norm);
}

#[test]
fn forward_is_deterministic() {
    let cfg = NetworkConfig { blur_skip: true, ..Default::default() };
    let (a, b) = (SrNet::new(&cfg, 20), SrNet::new(&cfg, 20));
    assert_eq!(a.params, b.params);
    let img = random_image(21, 16, 16);
    assert_eq!(a.infer(&img).unwrap(), b.infer(&img).unwrap());
    assert_ne!(SrNet::new(&cfg, 21).params, a.params);
}

#[test]
#[ignore]
fn bench_joint_step() {
    let cfg = NetworkConfig { blur_skip: true, ..Default::default() };
    let sr = SrNet::new(&cfg, 6);
    let seg = SegNet::new(&cfg, 7);
    let lrs: Vec<Image> = (0..4).map(|i| random_image(i, 16, 16)).collect();
    let (x, up) = SrNet::prepare_inputs::<f32>(&lrs).unwrap();
    for (train_sr, train_seg) in [(true, true), (true, false), (false, true)] {
        let t = std::time::Instant::now();
        for _ in 0..10 {
            let mut g = Graph::<f32>::new();
            let ps = sr.params.bind(&mut g, train_sr);
            let pc = seg.params.bind(&mut g, train_seg);
            let (xv, uv) = (g.constant(x.clone()), g.constant(up.clone()));
            let out = sr.forward(&mut g, &ps, xv, uv);
            let probs = seg.forward(&mut g, &pc, out.sr, Some(out.kernel));
            let s1 = Tensor::full(g.value(out.sr).shape(), 0.01f32);
            let s2 = Tensor::full(g.value(probs).shape(), 0.01f32);
            let _ = g.backward(vec![(out.sr, s1), (probs, s2)]);
        }
        eprintln!("sr {train_sr} seg {train_seg}: {:?}", t.elapsed() / 10);
    }
}
