use lmmir::cloud::FEATURES;
use lmmir::model::{miniature_config, Ablation, Head, LmmModel, ModelConfig, ModelInput};
use lmmir::tensor::{attention, Tape, Tensor};
use lmmir::train::Adam;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dm(t: &Tensor<f64>) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "[{i}] {x} vs {y}");
    }
}

fn row_data(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        let mx = r.max();
        r.apply(|v| *v = (*v - mx).exp());
        let s = r.sum();
        r /= s;
    }
    out
}

fn dense_attention(xq: &DMatrix<f64>, xkv: &DMatrix<f64>, wq: &DMatrix<f64>, wk: &DMatrix<f64>, wv: &DMatrix<f64>) -> DMatrix<f64> {
    let logits = (xq * wq) * (xkv * wk).transpose() / (wq.ncols() as f64).sqrt();
    softmax_rows(&logits) * (xkv * wv)
}

/// Random model with nonzero biases and non-unit norm gains.
fn random_model(cfg: ModelConfig, seed: u64) -> LmmModel<f64> {
    let mut m = LmmModel::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    m
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, FEATURES], |_| rng.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_a_row_shift(row in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0) {
        let n = row.len();
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, n], row.clone()).unwrap()).softmax(1).unwrap();
        let b = tape.constant(Tensor::new(&[1, n], row.iter().map(|v| v + c).collect()).unwrap()).softmax(1).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[n, 4]);
        let (wq, wk, wv) = (rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4, 5]));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let px = Tensor::from_fn(&[n, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let tape = Tape::new();
        let (wq, wk, wv) = (tape.constant(wq), tape.constant(wk), tape.constant(wv));
        let run = |x: Tensor<f64>| {
            let v = tape.constant(x);
            attention(&v, &v, &wq, &wk, &wv, None).unwrap().value().data().to_vec()
        };
        let (y, py) = (run(x), run(px));
        for i in 0..n {
            for k in 0..5 {
                prop_assert!((py[i * 5 + k] - y[perm[i] * 5 + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (xq, xkv) = (rand_t(&mut rng, &[5, 6]), rand_t(&mut rng, &[7, 4]));
    let (wq, wk, wv) = (rand_t(&mut rng, &[6, 3]), rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4, 2]));
    let want = dense_attention(&dm(&xq), &dm(&xkv), &dm(&wq), &dm(&wk), &dm(&wv));
    let tape = Tape::new();
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let got = attention(&c(&xq), &c(&xkv), &c(&wq), &c(&wk), &c(&wv), None).unwrap();
    close(got.value().data(), &row_data(&want), 1e-12);
}

#[test]
fn conv_kernels_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, h, w, o) = (2, 3, 6, 5, 4);
    let x = rand_t(&mut rng, &[n, c, h, w]);
    let wt = rand_t(&mut rng, &[o, c, 3, 3]);
    let b = rand_t(&mut rng, &[o]);
    let xi = |ni: usize, ci: usize, r: i64, q: i64| -> f64 {
        if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
            0.0
        } else {
            x.data()[((ni * c + ci) * h + r as usize) * w + q as usize]
        }
    };
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let (oh, ow) = ((h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1);
        let mut want = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for r in 0..oh {
                    for q in 0..ow {
                        let mut s = b.data()[oi];
                        for ci in 0..c {
                            for a in 0..3 {
                                for e in 0..3 {
                                    let (rr, qq) = ((r * stride + a) as i64 - pad as i64, (q * stride + e) as i64 - pad as i64);
                                    s += wt.data()[((oi * c + ci) * 3 + a) * 3 + e] * xi(ni, ci, rr, qq);
                                }
                            }
                        }
                        want[((ni * o + oi) * oh + r) * ow + q] = s;
                    }
                }
            }
        }
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(&tape.constant(wt.clone()), Some(&tape.constant(b.clone())), stride, pad).unwrap();
        assert_eq!(y.shape(), vec![n, o, oh, ow]);
        close(y.value().data(), &want, 1e-12);
    }

    let wt = rand_t(&mut rng, &[c, o, 2, 2]);
    let mut want = vec![0.0; n * o * 2 * h * 2 * w];
    for ni in 0..n {
        for oi in 0..o {
            for r in 0..2 * h {
                for q in 0..2 * w {
                    let mut s = b.data()[oi];
                    for ci in 0..c {
                        s += xi(ni, ci, (r / 2) as i64, (q / 2) as i64) * wt.data()[((ci * o + oi) * 2 + r % 2) * 2 + q % 2];
                    }
                    want[((ni * o + oi) * 2 * h + r) * 2 * w + q] = s;
                }
            }
        }
    }
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv_transpose2d(&tape.constant(wt), Some(&tape.constant(b))).unwrap();
    close(y.value().data(), &want, 1e-12);
}

fn layer_norm(m: &DMatrix<f64>, g: &[f64], b: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        let n = r.len() as f64;
        let mean = r.sum() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (k, v) in r.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[k] + b[k];
        }
    }
    out
}

fn add_row(m: DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    let mut m = m;
    for mut r in m.row_iter_mut() {
        for (k, v) in r.iter_mut().enumerate() {
            *v += b[k];
        }
    }
    m
}

#[test]
fn lnt_two_points_match_unfused_reference() {
    let cfg = ModelConfig { lnt_embed_dim: 6, lnt_heads: 2, lnt_layers: 2, pool_grid: 4, ..miniature_config() };
    let model = random_model(cfg, 9);
    let p = model.params.clone();
    let get = |n: &str| p.get(n).unwrap();
    let mut pts = Tensor::<f64>::zeros(&[2, FEATURES]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    pts.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    // bins (col 0, row 0) and (col 3, row 2)
    pts.data_mut()[..2].copy_from_slice(&[0.1, 0.2]);
    pts.data_mut()[FEATURES..FEATURES + 2].copy_from_slice(&[0.9, 0.6]);
    let mut e = add_row(dm(&pts) * dm(get("lnt.embed.w")), get("lnt.embed.b").data());
    for i in 0..cfg.lnt_layers {
        let g = |n: &str| get(&format!("lnt{i}.{n}"));
        let heads: Vec<DMatrix<f64>> = (0..cfg.lnt_heads)
            .map(|h| dense_attention(&e, &e, &dm(g(&format!("h{h}.wq"))), &dm(g(&format!("h{h}.wk"))), &dm(g(&format!("h{h}.wv")))))
            .collect();
        let cat = DMatrix::from_fn(2, cfg.lnt_embed_dim, |r, k| heads[k / 3][(r, k % 3)]);
        let h1 = layer_norm(&(&e + cat * dm(g("wo"))), g("ln1.g").data(), g("ln1.b").data());
        let ff = add_row(add_row(&h1 * dm(g("ff1.w")), g("ff1.b").data()).map(|v| v.max(0.0)) * dm(g("ff2.w")), g("ff2.b").data());
        e = layer_norm(&(h1 + ff), g("ln2.g").data(), g("ln2.b").data());
    }
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let (tokens, presence) = model.lnt_encode(&b, &pts).unwrap();
    let d = cfg.lnt_embed_dim;
    let tok = tokens.value();
    assert_eq!(presence.iter().filter(|&&p| p).count(), 2);
    for (bin, row) in [(0usize, 0usize), (2 * 4 + 3, 1)] {
        assert!(presence[bin]);
        close(&tok.data()[bin * d..(bin + 1) * d], &row_data(&e)[row * d..(row + 1) * d], 1e-10);
    }
    let nonzero_rows = (0..16).filter(|r| tok.data()[r * d..(r + 1) * d].iter().any(|v| *v != 0.0)).count();
    assert_eq!(nonzero_rows, 2);
}

#[test]
fn lnt_tokens_ignore_point_order() {
    let model = random_model(miniature_config(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = points(&mut rng, 20);
    let order: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
    let shuffled = Tensor::from_fn(&[20, FEATURES], |i| pts.data()[order[i / FEATURES] * FEATURES + i % FEATURES]);
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let (a, pa) = model.lnt_encode(&b, &pts).unwrap();
    let (s, ps) = model.lnt_encode(&b, &shuffled).unwrap();
    assert_eq!(pa, ps);
    close(s.value().data(), a.value().data(), 1e-10);
}

#[test]
fn fusion_cases() {
    let cfg = miniature_config();
    let mut model = random_model(cfg, 3);
    let cb = cfg.bottleneck_channels();
    let (nq, m) = (cfg.bottleneck_side().pow(2), cfg.pool_grid.pow(2));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_t(&mut rng, &[nq, cb]);
    let tokens = rand_t(&mut rng, &[m, cfg.lnt_embed_dim]);
    let presence = vec![true, false, true, true];
    let fused = |model: &LmmModel<f64>, t: &Tensor<f64>, pres: &[bool]| {
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        model.fuse(&b, tape.constant(x.clone()), tape.constant(t.clone()), pres).unwrap().value().data().to_vec()
    };

    // dense reference with the empty bin dropped
    let p = &model.params;
    let keep: Vec<usize> = (0..m).filter(|&i| presence[i]).collect();
    let tk = DMatrix::from_fn(keep.len(), cfg.lnt_embed_dim, |r, k| tokens.data()[keep[r] * cfg.lnt_embed_dim + k]);
    let v = add_row(&tk * dm(p.get("fuse.wv").unwrap()), p.get("fuse.bv").unwrap().data());
    let logits = (dm(&x) * dm(p.get("fuse.wq").unwrap())) * (&tk * dm(p.get("fuse.wk").unwrap())).transpose() / (cb as f64).sqrt();
    let want = dm(&x) + softmax_rows(&logits) * v;
    close(&fused(&model, &tokens, &presence), &row_data(&want), 1e-10);

    // a single token gets weight one
    let one = Tensor::from_fn(&[m, cfg.lnt_embed_dim], |i| if i < cfg.lnt_embed_dim { tokens.data()[i] } else { 0.0 });
    let only = [true, false, false, false];
    let t0 = DMatrix::from_row_slice(1, cfg.lnt_embed_dim, &tokens.data()[..cfg.lnt_embed_dim]);
    let v0 = add_row(t0 * dm(p.get("fuse.wv").unwrap()), p.get("fuse.bv").unwrap().data());
    let want = DMatrix::from_fn(nq, cb, |r, k| x.data()[r * cb + k] + v0[(0, k)]);
    close(&fused(&model, &one, &only), &row_data(&want), 1e-10);

    // zero tokens and zero value bias leave the bottleneck unchanged
    model.params.get_mut("fuse.bv").unwrap().data_mut().fill(0.0);
    let zero = Tensor::zeros(&[m, cfg.lnt_embed_dim]);
    assert_eq!(fused(&model, &zero, &[true; 4]), x.data().to_vec());
}

#[test]
fn attention_gate_matches_pixel_loop() {
    let cfg = miniature_config();
    let mut model = random_model(cfg, 12);
    let level = 1;
    let (c, cg) = (cfg.stage_channels(level), cfg.stage_channels(level + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_t(&mut rng, &[1, c, 8, 8]);
    let g = rand_t(&mut rng, &[1, cg, 4, 4]);
    let run = |model: &LmmModel<f64>| {
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        model.attention_gate(&b, level, tape.constant(x.clone()), tape.constant(g.clone())).unwrap().value().data().to_vec()
    };
    let p = &model.params;
    let (wx, wg) = (p.get("gate1.wx").unwrap(), p.get("gate1.wg").unwrap());
    let (psi, psib) = (p.get("gate1.psi.w").unwrap(), p.get("gate1.psi.b").unwrap().data()[0]);
    let ci = wx.shape()[0];
    let mut want = vec![0.0; c * 64];
    for r in 0..8 {
        for q in 0..8 {
            let mut logit = psib;
            for k in 0..ci {
                let mut s = 0.0;
                for j in 0..c {
                    s += wx.data()[k * c + j] * x.data()[(j * 8 + r) * 8 + q];
                }
                for j in 0..cg {
                    s += wg.data()[k * cg + j] * g.data()[(j * 4 + r / 2) * 4 + q / 2];
                }
                logit += psi.data()[k] * s.max(0.0);
            }
            let alpha = 1.0 / (1.0 + (-logit).exp());
            for j in 0..c {
                want[(j * 8 + r) * 8 + q] = alpha * x.data()[(j * 8 + r) * 8 + q];
            }
        }
    }
    close(&run(&model), &want, 1e-12);

    model.params.get_mut("gate1.psi.b").unwrap().data_mut()[0] = 60.0;
    close(&run(&model), x.data(), 1e-9);
    model.params.get_mut("gate1.psi.b").unwrap().data_mut()[0] = -60.0;
    assert!(run(&model).iter().all(|v| v.abs() < 1e-9));
}

fn sample(cfg: &ModelConfig, seed: u64) -> ModelInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.out_side;
    ModelInput { stack: rand_t(&mut rng, &[1, cfg.in_channels, s, s]), points: points(&mut rng, 16) }
}

#[test]
fn forward_contracts() {
    let cfg = miniature_config();
    let input = sample(&cfg, 1);
    let model = random_model(cfg, 4);
    let y = model.forward(&input).unwrap();
    assert_eq!(y.shape(), &[1, 1, 32, 32]);
    assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    assert_eq!(model.forward(&input).unwrap(), y);
    assert_eq!(model.reconstruct(&input).unwrap().shape(), &[1, cfg.in_channels, 32, 32]);

    let zero = LmmModel::<f64>::zeros(cfg).unwrap();
    assert!(zero.forward(&input).unwrap().data().iter().all(|&v| v == 0.0));

    for ablation in [
        Ablation { disable_lnt: true, ..Ablation::default() },
        Ablation { disable_attention_gates: true, ..Ablation::default() },
        Ablation { encoder_decoder_only: true, ..Ablation::default() },
    ] {
        let m = LmmModel::<f64>::new(ModelConfig { ablation, ..cfg }, 4).unwrap();
        let y = m.forward(&input).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0), "{}", ablation.label());
    }

    let wide = ModelConfig { base_channels: 4, ..cfg };
    assert_eq!((0..4).map(|l| wide.stage_channels(l)).collect::<Vec<_>>(), (0..4).map(|l| 2 * cfg.stage_channels(l)).collect::<Vec<_>>());
}

fn ir_loss(model: &LmmModel<f64>, input: &ModelInput<f64>, target: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
    let tape = Tape::new();
    let b = model.bind(&tape, true);
    let loss = model.run(&b, input, Head::IrMap).unwrap().mse_loss(&tape.constant(target.clone())).unwrap();
    let g = tape.backward(loss);
    (loss.value().item(), b.gradients(&g))
}

#[test]
fn one_gradient_step_lowers_mse() {
    let cfg = miniature_config();
    let input = sample(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let target = Tensor::from_fn(&[1, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let mut model = random_model(cfg, 23);
    let (before, grads) = ir_loss(&model, &input, &target);
    for (p, g) in model.params.tensors_mut().iter_mut().zip(&grads) {
        p.data_mut().iter_mut().zip(g.data()).for_each(|(v, d)| *v -= 1e-3 * d);
    }
    let (after, _) = ir_loss(&model, &input, &target);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn reconstruction_overfits_a_constant_stack() {
    let cfg = miniature_config();
    let s = cfg.out_side;
    let c = cfg.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let input = ModelInput {
        stack: Tensor::<f32>::from_fn(&[1, c, s, s], |i| 0.25 * (i / (s * s)) as f32 - 0.5),
        points: Tensor::from_fn(&[16, FEATURES], |_| rng.random_range(0.0..1.0)),
    };
    let mut model = LmmModel::<f32>::new(cfg, 31).unwrap();
    let mut adam = Adam::new(model.params.tensors(), 1e-2, 0.9, 0.999, 1e-8);
    for _ in 0..200 {
        let tape = Tape::new();
        let b = model.bind(&tape, true);
        let loss = model.run(&b, &input, Head::Reconstruct).unwrap().mse_loss(&tape.constant(input.stack.clone())).unwrap();
        let g = b.gradients(&tape.backward(loss));
        adam.step(model.params.tensors_mut(), &g);
    }
    let out = model.reconstruct(&input).unwrap();
    for ch in 0..c {
        let range = ch * s * s..(ch + 1) * s * s;
        let mse = out.data()[range.clone()]
            .iter()
            .zip(&input.stack.data()[range])
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / (s * s) as f64;
        assert!(mse < 1e-4, "channel {ch}: {mse}");
    }
}
