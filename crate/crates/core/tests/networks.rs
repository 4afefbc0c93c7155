use exbridge::networks::{exemplar_attention, DenoiserConfig, Forward, NetworkWeights};
use exbridge::tensor::Graph;
use exbridge::{RngStream, Tensor};
use proptest::prelude::*;

fn randomized(cfg: &DenoiserConfig, seed: u64) -> NetworkWeights {
    perturbed(cfg, seed, 0.4)
}

fn perturbed(cfg: &DenoiserConfig, seed: u64, scale: f64) -> NetworkWeights {
    let mut rng = RngStream::new(seed);
    let mut w = NetworkWeights::init(cfg, &mut rng).unwrap();
    for (_, t) in w.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
    w
}

fn tiny(h: usize, w: usize, hidden: usize, heads: usize) -> DenoiserConfig {
    DenoiserConfig {
        height: h,
        width: w,
        channels: 1,
        hidden,
        blocks: 1,
        heads,
        token_dim: 2,
        time_dim: 2,
        enc_dim: 2,
        patch: 1,
        stem_kernel: 1,
    }
}

/// Straight-line exemplar attention over `[C, H, W]` inputs, written without
/// the tape: concatenate along width, per-head softmax attention with
/// `1/√d_head`, output projection, residual, keep the right half.
fn naive_exemplar_attention(w: &NetworkWeights, heads: usize, f1: &Tensor, f2: &Tensor) -> Tensor {
    let (c, h, wd) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let dh = c / heads;
    let at = |t: &Tensor, ch: usize, i: usize, j: usize| t.data()[(ch * h + i) * wd + j];
    let mut tokens = Vec::new();
    for i in 0..h {
        for j in 0..2 * wd {
            let src = if j < wd { f1 } else { f2 };
            tokens.push(
                (0..c)
                    .map(|ch| at(src, ch, i, j % wd))
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let proj = |name: &str, x: &[f64]| -> Vec<f64> {
        let m = w.get(&format!("denoiser.blocks.0.ea.{name}.w")).unwrap();
        let bias = w.get(&format!("denoiser.blocks.0.ea.{name}.b")).ok();
        (0..c)
            .map(|o| {
                let mut s: f64 = (0..c).map(|k| x[k] * m.data()[k * c + o]).sum();
                if let Some(b) = bias {
                    s += b.data()[o];
                }
                s
            })
            .collect()
    };
    let q: Vec<_> = tokens.iter().map(|x| proj("q", x)).collect();
    let k: Vec<_> = tokens.iter().map(|x| proj("k", x)).collect();
    let v: Vec<_> = tokens.iter().map(|x| proj("v", x)).collect();
    let n = tokens.len();
    let mut out = vec![0.0; c * h * wd];
    for i in 0..h {
        for j in wd..2 * wd {
            let row = i * 2 * wd + j;
            let mut attended = vec![0.0; c];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|col| {
                        r.clone().map(|e| q[row][e] * k[col][e]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in r.clone() {
                    attended[e] = (0..n).map(|col| exps[col] / z * v[col][e]).sum();
                }
            }
            let wo = w.get("denoiser.blocks.0.ea.out.w").unwrap();
            for o in 0..c {
                let mixed: f64 = (0..c).map(|kk| attended[kk] * wo.data()[kk * c + o]).sum();
                out[(o * h + i) * wd + (j - wd)] = mixed + tokens[row][o];
            }
        }
    }
    Tensor::new(vec![c, h, wd], out).unwrap()
}

#[test]
fn single_position_two_token_attention_oracle() {
    let cfg = tiny(1, 1, 2, 1);
    let mut w = NetworkWeights::init(&cfg, &mut RngStream::new(0)).unwrap();
    let set = |w: &mut NetworkWeights, name: &str, vals: &[f64]| {
        w.get_mut(name).unwrap().data_mut().copy_from_slice(vals);
    };
    set(&mut w, "denoiser.blocks.0.ea.q.w", &[1.0, 0.5, -0.5, 2.0]);
    set(&mut w, "denoiser.blocks.0.ea.k.w", &[0.3, -1.0, 1.0, 0.2]);
    set(&mut w, "denoiser.blocks.0.ea.v.w", &[2.0, 0.0, 0.0, -1.0]);
    set(&mut w, "denoiser.blocks.0.ea.q.b", &[0.1, 0.0]);
    set(&mut w, "denoiser.blocks.0.ea.k.b", &[0.0, -0.2]);
    set(&mut w, "denoiser.blocks.0.ea.v.b", &[0.5, 0.5]);
    set(&mut w, "denoiser.blocks.0.ea.out.w", &[1.0, 1.0, 0.0, 1.0]);
    let f1 = Tensor::new(vec![2, 1, 1], vec![1.0, -1.0]).unwrap();
    let f2 = Tensor::new(vec![2, 1, 1], vec![0.5, 2.0]).unwrap();
    let got = exemplar_attention(&w, &cfg, 0, &f1, &f2).unwrap();

    // Tokens a = f1, b = f2; query from b.
    let lin = |x: [f64; 2], m: [f64; 4], b: [f64; 2]| {
        [
            x[0] * m[0] + x[1] * m[2] + b[0],
            x[0] * m[1] + x[1] * m[3] + b[1],
        ]
    };
    let (a, b) = ([1.0, -1.0], [0.5, 2.0]);
    let q = lin(b, [1.0, 0.5, -0.5, 2.0], [0.1, 0.0]);
    let ka = lin(a, [0.3, -1.0, 1.0, 0.2], [0.0, -0.2]);
    let kb = lin(b, [0.3, -1.0, 1.0, 0.2], [0.0, -0.2]);
    let va = lin(a, [2.0, 0.0, 0.0, -1.0], [0.5, 0.5]);
    let vb = lin(b, [2.0, 0.0, 0.0, -1.0], [0.5, 0.5]);
    let sa = (q[0] * ka[0] + q[1] * ka[1]) / 2f64.sqrt();
    let sb = (q[0] * kb[0] + q[1] * kb[1]) / 2f64.sqrt();
    let pa = 1.0 / (1.0 + (sb - sa).exp());
    let pb = 1.0 - pa;
    let att = [pa * va[0] + pb * vb[0], pa * va[1] + pb * vb[1]];
    let want = [
        att[0] * 1.0 + att[1] * 0.0 + b[0],
        att[0] * 1.0 + att[1] * 1.0 + b[1],
    ];
    assert!(
        (got.data()[0] - want[0]).abs() < 1e-12,
        "{:?} vs {want:?}",
        got.data()
    );
    assert!(
        (got.data()[1] - want[1]).abs() < 1e-12,
        "{:?} vs {want:?}",
        got.data()
    );
}

#[test]
fn matches_straight_line_attention_on_larger_grids() {
    for (h, wd, hidden, heads, seed) in [(2, 3, 4, 2, 1), (3, 3, 6, 3, 2), (4, 2, 4, 1, 3)] {
        let cfg = tiny(h, wd, hidden, heads);
        let w = randomized(&cfg, seed);
        let mut rng = RngStream::new(seed + 100);
        let f1 = Tensor::randn(&[hidden, h, wd], &mut rng);
        let f2 = Tensor::randn(&[hidden, h, wd], &mut rng);
        let got = exemplar_attention(&w, &cfg, 0, &f1, &f2).unwrap();
        let want = naive_exemplar_attention(&w, heads, &f1, &f2);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn identical_branches_reduce_to_self_attention() {
    // With F1 = F2 every key appears twice, which leaves the softmax weights
    // of each distinct key unchanged, so both halves see plain self-attention.
    let cfg = tiny(2, 2, 4, 2);
    let w = randomized(&cfg, 7);
    let f = Tensor::randn(&[4, 2, 2], &mut RngStream::new(8));
    let both = exemplar_attention(&w, &cfg, 0, &f, &f).unwrap();
    let naive = naive_exemplar_attention(&w, 2, &f, &f);
    assert!(both.max_abs_diff(&naive).unwrap() < 1e-12);
    let other = Tensor::randn(&[4, 2, 2], &mut RngStream::new(9));
    let mixed = exemplar_attention(&w, &cfg, 0, &other, &f).unwrap();
    assert!(mixed.max_abs_diff(&both).unwrap() > 1e-6);
}

#[test]
fn zeroed_projections_are_bit_exact_identity() {
    let cfg = DenoiserConfig::default();
    let mut w = randomized(&cfg, 11);
    for (n, t) in w.iter_mut() {
        if n.contains(".ea.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = RngStream::new(12);
    for l in 0..cfg.blocks {
        let f1 = Tensor::randn(&[cfg.hidden, cfg.height, cfg.width], &mut rng);
        let f2 = Tensor::randn(&[cfg.hidden, cfg.height, cfg.width], &mut rng);
        let out = exemplar_attention(&w, &cfg, l, &f1, &f2).unwrap();
        assert_eq!(out.data(), f2.data());
    }
}

#[test]
fn output_depends_on_exemplar_features() {
    let cfg = DenoiserConfig {
        height: 4,
        width: 4,
        ..DenoiserConfig::default()
    };
    // Moderate weights keep the attention away from one-hot saturation,
    // where the exemplar half receives vanishing gradient.
    let w = perturbed(&cfg, 13, 0.1);
    let mut rng = RngStream::new(14);
    let x = Tensor::randn(&cfg.input_shape(), &mut rng);
    let tok = Tensor::randn(&[cfg.token_dim], &mut rng);
    let mut f = Forward::inference(&w, &cfg);
    f.graph = Graph::new();
    let xv = f.graph.constant(x);
    let tv = f.graph.constant(tok);
    let feats: Vec<_> = (0..cfg.blocks)
        .map(|_| {
            f.graph
                .param(Tensor::randn(&[cfg.positions(), cfg.hidden], &mut rng))
        })
        .collect();
    let out = f.denoise(xv, 5, tv, Some(&feats)).unwrap();
    let total = f.graph.sum(out);
    let grads = f.graph.backward(total).unwrap();
    for (l, v) in feats.iter().enumerate() {
        let norm = grads.get(*v).map_or(0.0, |g| g.sq_norm().sqrt());
        assert!(norm > 1e-6, "block {l}: {norm}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.1f64..80.0,
        seed in any::<u64>(),
    ) {
        let mut g = Graph::no_grad();
        let x = Tensor::randn(&[rows, cols], &mut RngStream::new(seed)).map(|v| v * scale);
        let xv = g.constant(x);
        for axis in 0..2 {
            let s = g.softmax(xv, axis).unwrap();
            let v = g.value(s).clone();
            let (outer, len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
            for o in 0..outer {
                let sum: f64 = (0..len)
                    .map(|i| if axis == 1 { v.data()[o * cols + i] } else { v.data()[i * cols + o] })
                    .sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
            prop_assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
