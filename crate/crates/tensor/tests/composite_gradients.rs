use maskarch_tensor::{ConvParams, PoolKind, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-scale..scale)).collect(), shape).unwrap()
}

/// conv → bn → relu → avg pool → upsample → concat → depthwise conv → loss.
fn graph(x: &Tensor, w: &Tensor, dw: &Tensor, gamma: &Tensor, mask: &[bool], target: &[f32]) -> Tensor {
    let y = x.conv2d(w, None, ConvParams::new(1, 1, 1, 1)).unwrap();
    let y = y.batch_norm_train(Some(gamma), None, 1e-5).unwrap().output.relu().unwrap();
    let p = y.pool2d(PoolKind::Avg, 3, 2, 1).unwrap().upsample_nearest(2).unwrap();
    let cat = Tensor::concat_channels(&[&y, &p]).unwrap();
    let z = cat.conv2d(dw, None, ConvParams::new(1, 2, 2, cat.shape()[1])).unwrap();
    let head = z.crop_spatial(0, 0).unwrap();
    head.masked_l1(target, mask).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn composite_graph_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, o, hw) = (2, 2, 3, 4);
        let x = random(&mut rng, &[n, c, hw, hw], 1.0);
        let w = random(&mut rng, &[o, c, 3, 3], 0.5);
        let dw = random(&mut rng, &[2 * o, 1, 3, 3], 0.5);
        let gamma = random(&mut rng, &[o], 1.0);
        let mut mask: Vec<bool> = (0..n * hw * hw).map(|_| rng.random_bool(0.5)).collect();
        mask[0] = true;
        let target: Vec<f32> = (0..n * 2 * o * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();

        let tape = Tape::new();
        let wl = tape.leaf(w.clone());
        let gl = tape.leaf(gamma.clone());
        let loss = graph(&x, &wl, &dw, &gl, &mask, &target);
        let grads = tape.backward(&loss).unwrap();
        let gw = grads.get(&wl).unwrap().to_vec();
        let gg = grads.get(&gl).unwrap().to_vec();

        let eval = |w: &Tensor, g: &Tensor| graph(&x, w, &dw, g, &mask, &target).data()[0] as f64;
        let h = 1e-2f32;
        for k in [0usize, 7, 20, w.len() - 1] {
            let mut plus = w.to_vec();
            plus[k] += h;
            let mut minus = w.to_vec();
            minus[k] -= h;
            let fd = (eval(&Tensor::from_vec(plus, w.shape()).unwrap(), &gamma)
                - eval(&Tensor::from_vec(minus, w.shape()).unwrap(), &gamma))
                / (2.0 * h as f64);
            // l1 and relu kinks make single probes noisy; the bound is loose.
            prop_assert!((fd - gw[k] as f64).abs() < 2e-2 + 0.1 * fd.abs(), "w[{k}]: fd {fd} vs {}", gw[k]);
        }
        for k in 0..o {
            let mut plus = gamma.to_vec();
            plus[k] += h;
            let mut minus = gamma.to_vec();
            minus[k] -= h;
            let fd = (eval(&w, &Tensor::from_vec(plus, &[o]).unwrap())
                - eval(&w, &Tensor::from_vec(minus, &[o]).unwrap()))
                / (2.0 * h as f64);
            prop_assert!((fd - gg[k] as f64).abs() < 2e-2 + 0.1 * fd.abs(), "gamma[{k}]: fd {fd} vs {}", gg[k]);
        }
    }
}
