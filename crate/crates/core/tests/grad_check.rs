//! Central finite-difference validation of every differentiable op, plus
//! an end-to-end check of the full network's BCE gradient.

use ftanet_core::model::{build_forward, collect_grads, init_params, register_vars, LayerCfg};
use ftanet_core::tensor::{Graph, Padding, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-3;
const OP_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_data(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..dims.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect()
}

/// Check d(loss)/d(input_i) for every input element of every input tensor
/// against a central finite difference, where `build` maps leaf nodes to a
/// scalar loss node.
fn check_op(
    name: &str,
    shapes: &[&[usize]],
    data: &[Vec<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[VarId]) -> VarId,
) {
    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<VarId> = shapes
            .iter()
            .zip(data)
            .map(|(dims, d)| g.constant(Tensor::new(dims.to_vec(), d.clone())))
            .collect();
        let loss = build(&mut g, &leaves);
        g.value(loss).item()
    };

    let mut g = Graph::<f64>::new();
    let leaves: Vec<VarId> = shapes
        .iter()
        .zip(data)
        .map(|(dims, d)| g.leaf(Tensor::new(dims.to_vec(), d.clone())))
        .collect();
    let loss = build(&mut g, &leaves);
    g.backward(loss);

    for (ti, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shapes[ti]));
        for i in 0..analytic.numel() {
            let mut plus = data.to_vec();
            plus[ti][i] += FD_STEP;
            let mut minus = data.to_vec();
            minus[ti][i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, fd) < OP_TOL,
                "{name}: tensor {ti} elem {i}: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// Project a tensor node to a scalar with fixed weights so the loss is a
/// generic linear functional of the op output.
fn project(g: &mut Graph<f64>, x: VarId, rng: &mut ChaCha8Rng) -> VarId {
    let dims = g.value(x).dims().to_vec();
    let w = g.constant(Tensor::new(
        dims.clone(),
        random_data(rng, &dims, -1.0, 1.0),
    ));
    let p = g.mul(x, w);
    g.sum(p)
}

#[test]
fn conv2d_same_padding_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..20 {
        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let (kh, kw) = ([1, 3, 5][i % 3], [1, 3][i % 2]);
        let xs = [h, w, cin];
        let ks = [kh, kw, cin, cout];
        let bs = [cout];
        let data = vec![
            random_data(&mut rng, &xs, -1.0, 1.0),
            random_data(&mut rng, &ks, -1.0, 1.0),
            random_data(&mut rng, &bs, -1.0, 1.0),
        ];
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("conv2d same", &[&xs, &ks, &bs], &data, &|g, l| {
            let y = g.conv2d(l[0], l[1], Some(l[2]), (1, 1), Padding::Same);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn conv2d_valid_strided_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..20 {
        let (kh, sh) = ([4, 5, 2][i % 3], [4, 5, 2][i % 3]);
        let h = kh * rng.gen_range(2..4);
        let w = rng.gen_range(2..5);
        let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let xs = [h, w, cin];
        let ks = [kh, 1, cin, cout];
        let bs = [cout];
        let data = vec![
            random_data(&mut rng, &xs, -1.0, 1.0),
            random_data(&mut rng, &ks, -1.0, 1.0),
            random_data(&mut rng, &bs, -1.0, 1.0),
        ];
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("conv2d valid", &[&xs, &ks, &bs], &data, &|g, l| {
            let y = g.conv2d(l[0], l[1], Some(l[2]), (sh, 1), Padding::Valid);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for i in 0..20 {
        let len = rng.gen_range(3..9);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][i % 3];
        let xs = [len, cin];
        let ks = [k, cin, cout];
        let bs = [cout];
        let data = vec![
            random_data(&mut rng, &xs, -1.0, 1.0),
            random_data(&mut rng, &ks, -1.0, 1.0),
            random_data(&mut rng, &bs, -1.0, 1.0),
        ];
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("conv1d", &[&xs, &ks, &bs], &data, &|g, l| {
            let y = g.conv1d(l[0], l[1], Some(l[2]));
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for i in 0..20 {
        let (cin, cout) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let xs = [cin];
        let ws = [cin, cout];
        let bs = [cout];
        let data = vec![
            random_data(&mut rng, &xs, -1.0, 1.0),
            random_data(&mut rng, &ws, -1.0, 1.0),
            random_data(&mut rng, &bs, -1.0, 1.0),
        ];
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("linear", &[&xs, &ws, &bs], &data, &|g, l| {
            let y = g.linear(l[0], l[1], l[2]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for i in 0..20 {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..5)];
        // keep inputs away from the kink so the finite difference is valid
        let data: Vec<f64> = random_data(&mut rng, &dims, 0.05, 1.0)
            .into_iter()
            .map(|v| if rng.gen_bool(0.5) { v } else { -v })
            .collect();
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("relu", &[&dims], &[data], &|g, l| {
            let y = g.relu(l[0]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn sigmoid_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for i in 0..20 {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..5)];
        let data = random_data(&mut rng, &dims, -3.0, 3.0);
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("sigmoid", &[&dims], &[data], &|g, l| {
            let y = g.sigmoid(l[0]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for i in 0..20 {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..4)];
        let axis = i % 3;
        let data = random_data(&mut rng, &dims, -2.0, 2.0);
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("softmax", &[&dims], &[data], &|g, l| {
            let y = g.softmax(l[0], axis);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn add_mul_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let shape_pairs: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[3, 4]),
        (&[3, 1, 2], &[4, 2]),
        (&[5, 1], &[1, 3]),
        (&[2, 3, 2], &[2]),
    ];
    for i in 0..20 {
        let (sa, sb) = shape_pairs[i % shape_pairs.len()];
        let data = vec![
            random_data(&mut rng, sa, -1.0, 1.0),
            random_data(&mut rng, sb, -1.0, 1.0),
        ];
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("add", &[sa, sb], &data, &|g, l| {
            let y = g.add(l[0], l[1]);
            project(g, y, &mut prng.clone())
        });
        let prng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        check_op("mul", &[sa, sb], &data, &|g, l| {
            let y = g.mul(l[0], l[1]);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn scale_mean_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for i in 0..20 {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..5), 2];
        let data = random_data(&mut rng, &dims, -1.0, 1.0);
        let c = rng.gen_range(-2.0..2.0);
        let axes: &[usize] = [&[0][..], &[1][..], &[0, 1][..]][i % 3];
        let flat = dims.iter().product::<usize>();
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("scale+mean+reshape", &[&dims], &[data], &|g, l| {
            let y = g.scale(l[0], c);
            let y = g.mean_axes(y, axes);
            let n = g.value(y).numel();
            let y = g.reshape(y, &[n]);
            let _ = flat;
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn concat_narrow_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for i in 0..20 {
        let rows_a = rng.gen_range(1..4);
        let rows_b = rng.gen_range(1..4);
        let cols = rng.gen_range(2..5);
        let sa = [rows_a, cols];
        let sb = [rows_b, cols];
        let data = vec![
            random_data(&mut rng, &sa, -1.0, 1.0),
            random_data(&mut rng, &sb, -1.0, 1.0),
        ];
        let start = rng.gen_range(0..rows_a + rows_b);
        let len = rng.gen_range(1..=(rows_a + rows_b - start));
        let prng = ChaCha8Rng::seed_from_u64(i as u64);
        check_op("concat+narrow", &[&sa, &sb], &data, &|g, l| {
            let y = g.concat(&[l[0], l[1]], 0);
            let y = g.narrow(y, 0, start, len);
            project(g, y, &mut prng.clone())
        });
    }
}

#[test]
fn bce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for _ in 0..20 {
        let dims = [rng.gen_range(2..5), rng.gen_range(2..6)];
        // keep predictions clear of the clamp edges
        let pred = random_data(&mut rng, &dims, 0.05, 0.95);
        let target: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let tdims = dims;
        check_op("bce", &[&dims], &[pred.clone()], &|g, l| {
            let t = g.constant(Tensor::new(tdims.to_vec(), target.clone()));
            g.bce_loss(l[0], t)
        });
    }
}

#[test]
fn sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for _ in 0..20 {
        let dims = [rng.gen_range(2..6), rng.gen_range(2..6)];
        let data = random_data(&mut rng, &dims, -1.0, 1.0);
        check_op("sum", &[&dims], &[data], &|g, l| g.sum(l[0]));
    }
}

/// Analytic f32 gradient of the full network vs an f64 finite difference
/// over 50 random parameter coordinates.
#[test]
fn end_to_end_bce_gradient() {
    let cfg = LayerCfg {
        n_blocks: 3,
        widths: vec![4, 4, 4],
        reduction: 4,
        attn_kernel: 5,
        mdb_widths: [4, 4, 4, 1],
    };
    let params = init_params(&cfg, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let t = 8;
    let input_data: Vec<f64> = (0..320 * t * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut target = Tensor::<f64>::zeros(&[321, t]);
    for ti in 0..t {
        let r = rng.gen_range(0..321);
        target.set(&[r, ti], 1.0);
    }

    // analytic gradient on the f32 training path
    let mut g32 = Graph::<f32>::new();
    let vars = register_vars(&mut g32, &params);
    let input32 = g32.constant(Tensor::new(
        vec![320, t, 3],
        input_data.iter().map(|&v| v as f32).collect(),
    ));
    let sal = build_forward(&mut g32, input32, &vars, &cfg);
    let tgt32 = g32.constant(target.cast::<f32>());
    let loss32 = g32.bce_loss(sal, tgt32);
    g32.backward(loss32);
    let analytic = collect_grads(&g32, &vars);

    // exact analytic gradient from an f64 instantiation of the same net
    let mut g64 = Graph::<f64>::new();
    let vars64: indexmap::IndexMap<String, VarId> = params
        .iter()
        .map(|(n, tens)| (n.clone(), g64.leaf(tens.cast::<f64>())))
        .collect();
    let input64 = g64.constant(Tensor::new(vec![320, t, 3], input_data.clone()));
    let sal64 = build_forward(&mut g64, input64, &vars64, &cfg);
    let tgt64 = g64.constant(target.clone());
    let loss64 = g64.bce_loss(sal64, tgt64);
    g64.backward(loss64);
    let analytic64 = collect_grads(&g64, &vars64);

    // f64 loss as a function of one perturbed parameter value
    let eval = |name: &str, idx: usize, delta: f64| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: indexmap::IndexMap<String, VarId> = params
            .iter()
            .map(|(n, tens)| {
                let mut t64 = tens.cast::<f64>();
                if n == name {
                    t64.data_mut()[idx] += delta;
                }
                (n.clone(), g.constant(t64))
            })
            .collect();
        let input = g.constant(Tensor::new(vec![320, t, 3], input_data.clone()));
        let sal = build_forward(&mut g, input, &vars, &cfg);
        let tgt = g.constant(target.clone());
        let loss = g.bce_loss(sal, tgt);
        g.value(loss).item()
    };

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 50 && attempts < 200 {
        attempts += 1;
        let name = &names[rng.gen_range(0..names.len())];
        let n = params.get(name).numel();
        let idx = rng.gen_range(0..n);
        let a32 = f64::from(analytic[name].data()[idx]);
        let a64 = analytic64[name].data()[idx];
        // the f32 training path must track the exact gradient to 1e-3
        // relative, modulo the f32 accumulation noise floor
        assert!(
            rel_err(a32, a64) < 1e-3 || (a32 - a64).abs() < 1e-5,
            "{name}[{idx}]: analytic(f32) {a32} vs analytic(f64) {a64}"
        );
        // a single bias perturbation shifts thousands of relu inputs, so a
        // fixed step often straddles a kink; shrink until the quotient is
        // sampled from one smooth piece
        let mut fd = f64::NAN;
        let mut ok = false;
        for h in [1e-6, 1e-7, 1e-8] {
            fd = (eval(name, idx, h) - eval(name, idx, -h)) / (2.0 * h);
            if rel_err(a64, fd) < 1e-3 {
                ok = true;
                break;
            }
        }
        assert!(ok, "{name}[{idx}]: analytic(f64) {a64} vs fd {fd}");
        checked += 1;
    }
    assert!(checked >= 50, "only {checked} live coordinates found");
}
