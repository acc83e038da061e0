use super::*;
use crate::autodiff::softmax;
use crate::params::grad_check_block_report;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store(
    cfg: &SidNetConfig,
    input: [usize; 3],
    classes: usize,
    ms: bool,
    seed: u64,
) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    init_params(&mut p, cfg, input, classes, ms, &mut rng(seed)).unwrap();
    p
}

fn micro(widths: &[usize], strides: &[usize], convs: usize, emb: usize) -> SidNetConfig {
    SidNetConfig {
        blocks: widths
            .iter()
            .zip(strides)
            .map(|(&w, &s)| SidBlockSpec {
                channels: vec![w; convs],
                stride: s,
            })
            .collect(),
        embedding_dim: emb,
    }
}

#[test]
fn reference_trace() {
    let t = trace_shapes(&SidNetConfig::default(), [300, 257, 1], true).unwrap();
    let spatial: Vec<[usize; 2]> = t.blocks.iter().map(|s| [s[0], s[1]]).collect();
    assert_eq!(
        spatial,
        vec![
            [150, 129],
            [75, 65],
            [75, 65],
            [38, 33],
            [38, 33],
            [38, 33],
            [38, 33],
            [19, 17]
        ]
    );
    let widths: Vec<usize> = t.blocks.iter().map(|s| s[2]).collect();
    assert_eq!(widths, vec![64, 128, 128, 256, 256, 256, 256, 512]);
    assert_eq!(t.pooled, [1, 17, 512]);
    assert_eq!(t.embedding, 512);
    SidNetConfig::default().validate_layout().unwrap();
}

#[test]
fn narrow_projection_trace() {
    let cfg = SidNetConfig::narrow_projection();
    cfg.validate_layout().unwrap();
    let t = trace_shapes(&cfg, [300, 257, 1], true).unwrap();
    assert_eq!(t.blocks[3], [38, 33, 128]);
    assert_eq!(t.blocks[7], [19, 17, 128]);
    assert_eq!(t.pooled, [1, 17, 128]);
}

#[test]
fn layout_validation() {
    let mut cfg = SidNetConfig::scaled([4; 8], [2, 2, 1, 2, 1, 1, 1, 1], 16);
    cfg.validate_layout().unwrap();
    cfg.blocks[2].channels.push(4);
    assert!(cfg.validate_layout().is_err());
    assert!(micro(&[4, 4], &[2, 1], 2, 8).validate_layout().is_err());
    assert!(micro(&[4, 4], &[2, 0], 2, 8).validate().is_err());
}

#[test]
fn attention_needs_room() {
    let cfg = micro(&[2, 2], &[2, 2], 1, 4);
    assert!(trace_shapes(&cfg, [20, 17, 1], true).is_err());
    assert!(trace_shapes(&cfg, [20, 17, 1], false).is_ok());
}

#[test]
fn forward_matches_trace_and_softmax_normalises() {
    let cfg = micro(&[3, 4, 4], &[2, 1, 2], 2, 6);
    let input = [30, 29, 1];
    let trace = trace_shapes(&cfg, input, true).unwrap();
    let p = store(&cfg, input, 5, true, 1);
    let x = Tensor::uniform(&input, 0.0, 1.0, &mut rng(2)).unwrap();
    let mut s = Session::inference(&p);
    let xv = s.tape.constant(x);
    let out = forward(&mut s, &cfg, xv, true, true).unwrap();
    let shapes: Vec<[usize; 3]> = out
        .block_outputs
        .iter()
        .map(|&v| <[usize; 3]>::try_from(s.tape.shape(v)).unwrap())
        .collect();
    assert_eq!(shapes, trace.blocks);
    assert_eq!(out.attention.len(), 3);
    let logits = s.tape.value(out.logits.unwrap());
    assert_eq!(logits.shape(), &[1, 5]);
    let total: f64 = softmax(logits.data()).iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert_eq!(s.tape.shape(out.embedding), &[1, 6]);
}

#[test]
fn zero_weights_reduce_blocks_to_skip_path() {
    let cfg = micro(&[1, 2], &[1, 1], 2, 3);
    let input = [6, 5, 1];
    let mut p = store(&cfg, input, 2, false, 3);
    let names: Vec<String> = p
        .names()
        .filter(|n| n.contains(".conv"))
        .map(String::from)
        .collect();
    for n in names {
        let shape = p.get(&n).unwrap().shape().to_vec();
        p.insert(n, Tensor::zeros(&shape).unwrap());
    }
    let x = Tensor::uniform(&input, -1.0, 1.0, &mut rng(4)).unwrap();
    let mut s = Session::inference(&p);
    let xv = s.tape.constant(x.clone());
    let out = forward(&mut s, &cfg, xv, false, true).unwrap();
    let b1 = s.tape.value(out.block_outputs[0]);
    for (o, i) in b1.data().iter().zip(x.data()) {
        assert_eq!(*o, i.max(0.0));
    }
    // block 2 widens 1 -> 2 channels, so its output is the projected input
    let k = p.get("sid.b2.proj.kernel").unwrap().data().to_vec();
    let b2 = s.tape.value(out.block_outputs[1]);
    for (pos, h) in b1.data().iter().enumerate() {
        for c in 0..2 {
            assert!((b2.data()[pos * 2 + c] - (h * k[c]).max(0.0)).abs() < 1e-15);
        }
    }
    assert!(s.tape.value(out.logits.unwrap()).is_finite());
}

/// Straight-line reference for a network without attention.
mod oracle {
    pub struct Map {
        pub t: usize,
        pub f: usize,
        pub c: usize,
        pub v: Vec<f64>,
    }

    impl Map {
        fn at(&self, t: isize, f: isize, c: usize) -> f64 {
            if t < 0 || f < 0 || t as usize >= self.t || f as usize >= self.f {
                0.0
            } else {
                self.v[(t as usize * self.f + f as usize) * self.c + c]
            }
        }
    }

    /// Same-padded convolution written directly from the definition.
    pub fn conv(x: &Map, k: &[f64], ks: usize, cout: usize, bias: &[f64], stride: usize) -> Map {
        let out_t = x.t.div_ceil(stride);
        let out_f = x.f.div_ceil(stride);
        let pad = |n: usize, o: usize| (((o - 1) * stride + ks).saturating_sub(n) / 2) as isize;
        let (pt, pf) = (pad(x.t, out_t), pad(x.f, out_f));
        let mut v = vec![0.0; out_t * out_f * cout];
        for t in 0..out_t {
            for f in 0..out_f {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for a in 0..ks {
                        for b in 0..ks {
                            for ci in 0..x.c {
                                let xv = x.at(
                                    (t * stride + a) as isize - pt,
                                    (f * stride + b) as isize - pf,
                                    ci,
                                );
                                acc += xv * k[((a * ks + b) * x.c + ci) * cout + co];
                            }
                        }
                    }
                    v[(t * out_f + f) * cout + co] = acc;
                }
            }
        }
        Map {
            t: out_t,
            f: out_f,
            c: cout,
            v,
        }
    }

    pub fn relu(mut m: Map) -> Map {
        m.v.iter_mut().for_each(|x| *x = x.max(0.0));
        m
    }

    pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let dout = b.len();
        (0..dout)
            .map(|o| {
                b[o] + x
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| xi * w[i * dout + o])
                    .sum::<f64>()
            })
            .collect()
    }
}

#[test]
fn plain_network_matches_reference_resnet() {
    use oracle::Map;
    let cfg = micro(&[3, 3, 5], &[2, 1, 2], 2, 4);
    let input = [11, 9, 1];
    for seed in 0..3 {
        let mut p = store(&cfg, input, 3, false, seed);
        // non-zero biases exercise the bias paths
        let names: Vec<String> = p
            .names()
            .filter(|n| n.ends_with("bias") || n.ends_with(".b"))
            .map(String::from)
            .collect();
        for n in names {
            let shape = p.get(&n).unwrap().shape().to_vec();
            p.insert(
                n,
                Tensor::uniform(&shape, -0.2, 0.2, &mut rng(seed + 50)).unwrap(),
            );
        }
        let x = Tensor::uniform(&input, 0.0, 1.0, &mut rng(seed + 10)).unwrap();
        let d = |n: &str| p.get(n).unwrap().data().to_vec();

        let mut h = Map {
            t: 11,
            f: 9,
            c: 1,
            v: x.data().to_vec(),
        };
        for (i, b) in cfg.blocks.iter().enumerate() {
            let bi = i + 1;
            let mut y = Map {
                t: h.t,
                f: h.f,
                c: h.c,
                v: h.v.clone(),
            };
            for (j, &c) in b.channels.iter().enumerate() {
                let stride = if j == 0 { b.stride } else { 1 };
                let k = d(&format!("sid.b{bi}.conv{}.kernel", j + 1));
                let bias = d(&format!("sid.b{bi}.conv{}.bias", j + 1));
                y = oracle::relu(oracle::conv(&y, &k, 3, c, &bias, stride));
            }
            let skip = if p.contains(&format!("sid.b{bi}.proj.kernel")) {
                let k = d(&format!("sid.b{bi}.proj.kernel"));
                oracle::conv(
                    &h,
                    &k,
                    1,
                    y.c,
                    &d(&format!("sid.b{bi}.proj.bias")),
                    b.stride,
                )
            } else {
                h
            };
            let v =
                y.v.iter()
                    .zip(&skip.v)
                    .map(|(a, b)| (a + b).max(0.0))
                    .collect();
            h = Map {
                t: y.t,
                f: y.f,
                c: y.c,
                v,
            };
        }
        let mut pooled = vec![0.0; h.f * h.c];
        for t in 0..h.t {
            for (i, p) in pooled.iter_mut().enumerate() {
                *p += h.v[t * h.f * h.c + i] / h.t as f64;
            }
        }
        let emb = oracle::linear(&pooled, &d("sid.fc.w"), &d("sid.fc.b"));
        let act: Vec<f64> = emb.iter().map(|v| v.max(0.0)).collect();
        let want = oracle::linear(&act, &d("sid.cls.w"), &d("sid.cls.b"));

        let mut s = Session::inference(&p);
        let xv = s.tape.constant(x);
        let out = forward(&mut s, &cfg, xv, false, true).unwrap();
        let got = s.tape.value(out.logits.unwrap()).data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "seed {seed}: {g} vs {w}");
        }
        let e = s.tape.value(out.embedding).data();
        for (g, w) in e.iter().zip(&emb) {
            assert!((g - w).abs() < 1e-10);
        }
    }
}

#[test]
fn micro_network_gradients_match_finite_differences() {
    let cfg = micro(&[8, 8], &[2, 1], 2, 6);
    let input = [20, 17, 1];
    let p = store(&cfg, input, 4, true, 7);
    let x = Tensor::uniform(&input, 0.0, 1.0, &mut rng(8)).unwrap();
    let w = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng(9)).unwrap();
    let (name, r) = grad_check_block_report(&p, &x, &w, &[1e-5], |s, xv| {
        Ok(forward(s, &cfg, xv, true, true)?
            .logits
            .expect("classifier"))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
}

#[test]
fn embeddings_are_deterministic_and_scale_sensitive() {
    let cfg = micro(&[3, 3], &[2, 1], 2, 5);
    let input = [16, 15, 1];
    let p = store(&cfg, input, 2, true, 11);
    let x = Tensor::uniform(&input, 0.0, 1.0, &mut rng(12)).unwrap();
    let a = extract_embedding(&p, &cfg, &x, true).unwrap();
    let b = extract_embedding(&p, &cfg, &x, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    let c = extract_embedding(&p, &cfg, &x.map(|v| 3.0 * v), true).unwrap();
    assert_ne!(a, c);
    assert!(extract_embedding(&p, &cfg, &Tensor::zeros(&[16, 14, 1]).unwrap(), true).is_err());
}

#[test]
fn cosine_examples() {
    let x = [0.3, -1.2, 4.0];
    assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    let v = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 2.0, 1.0]).unwrap();
    assert!((v - 8.0 / 9.0).abs() < 1e-15);
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
}
