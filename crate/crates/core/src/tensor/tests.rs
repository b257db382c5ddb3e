use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Max mixed relative error between the analytic gradient and central
/// differences of `f` with respect to every element of every input.
fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f32 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t)).collect();
        let l = f(&mut g, &vars).unwrap();
        f64::from(g.value(l)[0])
    };
    let h = 1e-3f32;
    let mut worst = 0.0f32;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.of(*var);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = ((eval(&plus) - eval(&minus)) / (2.0 * f64::from(h))) as f32;
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

const GRAD_FLOOR: f32 = 1.0;

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let n: usize = g.shape(x).iter().product();
    let w: Vec<f32> = (0..n).map(|i| ((i * 7919) % 13) as f32 / 6.5 - 1.0 + 0.1).collect();
    let w = g.constant_from(g.shape(x).to_vec(), w)?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = g.constant(&Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[19., 22., 43., 50.]);

    let eye = g.constant(&Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
    let ai = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(ai), g.value(a));

    let bad = g.constant(&Tensor::zeros(vec![2, 3]));
    let err = g.matmul(bad, b).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (5, 7, 3);
    let a = rand_tensor(&mut rng, &[m, k]);
    let b = rand_tensor(&mut rng, &[k, n]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(&a), g.constant(&b));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            assert!((g.value(c)[i * n + j] - s).abs() < 1e-5);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(&Tensor::zeros(vec![1, 10]));
    let l = g.softmax_cross_entropy(uniform, &[3]).unwrap();
    assert!((g.value(l)[0] - 10f32.ln()).abs() < 1e-6);

    let mut peaked = vec![0.0; 5];
    peaked[2] = 1000.0;
    let p = g.constant_from(vec![1, 5], peaked).unwrap();
    let l = g.softmax_cross_entropy(p, &[2]).unwrap();
    assert!(g.value(l)[0].abs() < 1e-6);

    // ln(1 + e) - 1 is the loss of the larger logit; the smaller one costs ln(1 + e).
    let two = g.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let l = g.softmax_cross_entropy(two, &[1]).unwrap();
    let expected = (1.0f64 + 1f64.exp()).ln() - 1.0;
    assert!((f64::from(g.value(l)[0]) - expected).abs() < 1e-6);
    assert!((expected - 0.313_262).abs() < 1e-6);
    let l = g.softmax_cross_entropy(two, &[0]).unwrap();
    assert!((f64::from(g.value(l)[0]) - (1.0f64 + 1f64.exp()).ln()).abs() < 1e-6);

    let err = g.softmax_cross_entropy(two, &[2]).unwrap_err();
    assert_eq!(err, TensorError::TargetOutOfRange { index: 2, classes: 2 });
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::full(vec![2, 3, 4], 0.7));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.of(x).iter().all(|&v| v == 1.0));
}

#[test]
fn detached_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store
        .add("used", Tensor::full(vec![3], 2.0).with_requires_grad(true))
        .unwrap();
    let unused = store
        .add("unused", Tensor::full(vec![2], 1.0).with_requires_grad(true))
        .unwrap();
    let grads = {
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap()
    };
    grads.accumulate_into(&mut store);
    assert_eq!(store.get(used).grad().unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(&Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn non_finite_values_are_errors() {
    assert!(matches!(
        Tensor::new(vec![2], vec![1.0, f32::NAN]),
        Err(TensorError::NonFinite { .. })
    ));
    let mut g = Graph::new();
    let x = g.constant(&Tensor::full(vec![2], 3.0e38));
    assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
}

#[test]
fn tensor_shape_invariants() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    let mut t = Tensor::zeros(vec![2, 2]);
    assert!(t.set_grad(vec![0.0; 3]).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[6, 9]);
    let mut g = Graph::new();
    let v = g.constant(&x);
    let v = g.scale(v, 30.0).unwrap();
    let y = g.softmax(v).unwrap();
    for row in g.value(y).chunks(9) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut p = Tensor::full(vec![3], 0.25).with_requires_grad(true);
    p.set_grad(vec![0.0; 3]).unwrap();
    let mut st = AdamState::new(3, cfg);
    adam_step(&mut p, &mut st).unwrap();
    assert_eq!(p.data(), &[0.25; 3]);
    assert_eq!(st.t, 1);

    let mut p = Tensor::full(vec![1], 1.0);
    p.set_grad(vec![0.5]).unwrap();
    let mut st = AdamState::new(1, cfg);
    adam_step(&mut p, &mut st).unwrap();
    let expected = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8));
    assert!((f64::from(p.data()[0]) - expected).abs() < 1e-7);

    let mut p = Tensor::full(vec![1], 1.0);
    p.set_grad(vec![0.0]).unwrap();
    let mut st = AdamState::new(1, AdamConfig::default());
    adam_step(&mut p, &mut st).unwrap();
    assert!((p.data()[0] - 0.999_999).abs() < 1e-7);

    let mut p = Tensor::full(vec![1], 1.0);
    let mut st = AdamState::new(1, cfg);
    assert!(matches!(
        adam_step(&mut p, &mut st),
        Err(TensorError::MissingGradient { .. })
    ));
}

#[test]
fn gradcheck_elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    type F = fn(&mut Graph, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Tensor>, F)> = vec![
        ("add", vec![a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("add_broadcast", vec![a.clone(), row.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sub", vec![a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul", vec![a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("scale", vec![a.clone()], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y)
        }),
        ("gelu", vec![a.clone()], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y)
        }),
        ("relu", vec![a.clone()], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![a.clone()], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        ("abs", vec![a.clone()], |g, v| {
            let y = g.abs(v[0])?;
            weighted_sum(g, y)
        }),
        ("mean", vec![a.clone()], |g, v| g.mean(v[0])),
    ];
    for (name, inputs, f) in cases {
        let err = gradcheck(&inputs, &f);
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn gradcheck_structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    let m = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let gain = rand_tensor(&mut rng, &[4]);
    let bias = rand_tensor(&mut rng, &[4]);
    type F = fn(&mut Graph, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Tensor>, F)> = vec![
        ("matmul", vec![a.clone(), w.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("layer_norm", vec![a.clone(), gain.clone(), bias.clone()], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y)
        }),
        ("softmax", vec![a.clone()], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y)
        }),
        ("transpose", vec![m.clone()], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y)
        }),
        ("reshape", vec![a.clone()], |g, v| {
            let y = g.reshape(v[0], vec![6, 4])?;
            let y = g.softmax(y)?;
            weighted_sum(g, y)
        }),
        ("concat", vec![a.clone(), b.clone()], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y)
        }),
        ("narrow", vec![a.clone()], |g, v| {
            let y = g.narrow(v[0], 1, 1, 2)?;
            weighted_sum(g, y)
        }),
        ("index_select", vec![m.clone()], |g, v| {
            let y = g.index_select(v[0], &[2, 0, 2, 1])?;
            weighted_sum(g, y)
        }),
        ("softmax_cross_entropy", vec![m.clone()], |g, v| {
            g.softmax_cross_entropy(v[0], &[4, 0, 2])
        }),
        ("bce_with_logits", vec![m.clone()], |g, v| {
            let t: Vec<f32> = (0..15).map(|i| (i % 3) as f32 / 2.0).collect();
            g.bce_with_logits(v[0], &t)
        }),
    ];
    for (name, inputs, f) in cases {
        let err = gradcheck(&inputs, &f);
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn gradcheck_attention_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = rand_tensor(&mut rng, &[2, 3, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 4]);
    let v = rand_tensor(&mut rng, &[2, 3, 4]);
    let kx = rand_tensor(&mut rng, &[2, 5, 4]);
    let vx = rand_tensor(&mut rng, &[2, 5, 4]);
    for mask in [AttnMask::None, AttnMask::Causal, AttnMask::Prefix(2)] {
        let f = move |g: &mut Graph, x: &[Var]| {
            let y = g.attention(x[0], x[1], x[2], 2, mask)?;
            weighted_sum(g, y)
        };
        let err = gradcheck(&[q.clone(), k.clone(), v.clone()], &f);
        assert!(err < 1e-3, "{mask:?}: relative error {err}");
    }
    let f = |g: &mut Graph, x: &[Var]| {
        let y = g.attention(x[0], x[1], x[2], 1, AttnMask::None)?;
        weighted_sum(g, y)
    };
    let err = gradcheck(&[q, kx, vx], &f);
    assert!(err < 1e-3, "cross attention: relative error {err}");
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let q = rand_tensor(&mut rng, &[1, 4, 4]);
    let k = rand_tensor(&mut rng, &[1, 4, 4]);
    let v = rand_tensor(&mut rng, &[1, 4, 4]);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 12..16 {
        k2.data_mut()[j] += 0.5;
        v2.data_mut()[j] -= 0.5;
    }
    let run = |k: &Tensor, v: &Tensor| {
        let mut g = Graph::no_grad();
        let (a, b, c) = (g.constant(&q), g.constant(k), g.constant(v));
        let y = g.attention(a, b, c, 2, AttnMask::Causal).unwrap();
        g.value(y).to_vec()
    };
    let (y1, y2) = (run(&k, &v), run(&k2, &v2));
    assert_eq!(y1[..12], y2[..12]);
    assert_ne!(y1[12..], y2[12..]);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let w1 = rand_tensor(&mut rng, &[5, 6]);
    let b1 = rand_tensor(&mut rng, &[6]);
    let w2 = rand_tensor(&mut rng, &[6, 3]);
    let b2 = rand_tensor(&mut rng, &[3]);
    let f = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, v[3])?;
        let o = g.add(o, v[4])?;
        g.softmax_cross_entropy(o, &[0, 2, 1, 2])
    };
    let err = gradcheck(&[x, w1, b1, w2, b2], &f);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn adam_zero_grad_without_decay_is_identity_on_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store
        .add("w", rand_tensor(&mut rng, &[3, 3]).with_requires_grad(true))
        .unwrap();
    let before = store.checksum();
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    for _ in 0..3 {
        adam.step(&mut store).unwrap();
    }
    assert_eq!(store.checksum(), before);
    assert_eq!(adam.steps(), 3);
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[3, 8, 8]);
        let w = normal_init(&[8, 8], 0.02, &mut rng);
        let mut g = Graph::no_grad();
        let (xv, wv) = (g.constant(&x), g.constant(&w));
        let h = g.matmul(xv, wv).unwrap();
        let y = g.attention(h, h, h, 2, AttnMask::None).unwrap();
        g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn param_store_rejects_duplicates_and_counts_reads() {
    let mut store = ParamStore::new();
    let id = store.add("a", Tensor::zeros(vec![1])).unwrap();
    assert!(matches!(
        store.add("a", Tensor::zeros(vec![1])),
        Err(TensorError::DuplicateParam(_))
    ));
    assert_eq!(store.read_count(id), 0);
    let _ = store.read(id);
    assert_eq!(store.reads_with_prefix("a"), 1);
    store.reset_read_counts();
    assert_eq!(store.read_count(id), 0);
}
