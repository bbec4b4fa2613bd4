use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotbench_core::optim::AdamConfig;
use slotbench_core::scene::{render, sample_scene, Image, SimConfig};
use slotbench_core::slot::{SlotConfig, SlotModel};
use slotbench_core::train::{train_reconstruction, TrainConfig};
use slotbench_core::{Graph, ParamStore};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image { height: h, width: w, data: (0..3 * h * w).map(|_| r.random::<f32>()).collect() }
}

/// Jitter every parameter so unit gains and zero biases do not hide bugs.
fn perturb<T: slotbench_core::Real>(store: &mut ParamStore<T>, r: &mut ChaCha8Rng) {
    for t in store.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += T::c(r.random_range(-0.2..0.2)));
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn values<T: slotbench_core::Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Dense f64 reference implementation reading parameters by name.
struct Oracle<'a> {
    store: &'a ParamStore<f64>,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> &[f64] {
        &self.store.get(self.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).data
    }

    fn shape(&self, name: &str) -> Vec<usize> {
        self.store.get(self.store.find(name).unwrap()).shape.clone()
    }

    /// Direct convolution of one `[c, h, w]` image, zero padding `k / 2`.
    fn conv(&self, name: &str, x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
        let ws = self.shape(&format!("{name}.w"));
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c);
        let (wt, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        let pad = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (w + 2 * (k / 2) - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad;
                                let ix = (xx * stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((o * c + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = s;
                }
            }
        }
        (out, ho, wo)
    }

    fn linear(&self, name: &str, x: &[f64], fan_in: usize) -> Vec<f64> {
        let w = self.p(&format!("{name}.w"));
        let fan_out = w.len() / fan_in;
        let b = self.store.find(&format!("{name}.b")).map(|id| &self.store.get(id).data);
        x.chunks(fan_in)
            .flat_map(|row| {
                (0..fan_out).map(move |j| {
                    let s: f64 = (0..fan_in).map(|i| row[i] * w[i * fan_out + j]).sum();
                    s + b.map_or(0.0, |b| b[j])
                })
            })
            .collect()
    }

    fn layer_norm(&self, name: &str, x: &[f64], d: usize) -> Vec<f64> {
        let (g, b) = (self.p(&format!("{name}.gain")), self.p(&format!("{name}.bias")));
        x.chunks(d)
            .flat_map(|row| {
                let m = row.iter().sum::<f64>() / d as f64;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
                let r = 1.0 / (v + 1e-5).sqrt();
                row.iter().enumerate().map(move |(i, a)| (a - m) * r * g[i] + b[i]).collect::<Vec<_>>()
            })
            .collect()
    }

    fn mlp(&self, name: &str, x: &[f64], widths: &[usize]) -> Vec<f64> {
        let mut h = x.to_vec();
        for i in 0..widths.len() - 1 {
            h = self.linear(&format!("{name}.{i}"), &h, widths[i]);
            if i + 2 < widths.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// `[channels, h, w]` positional embedding.
    fn position(&self, name: &str, channels: usize, h: usize, w: usize) -> Vec<f64> {
        let lin = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let mut grid = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (lin(i, h), lin(j, w));
                grid.extend([y, x, 1.0 - y, 1.0 - x]);
            }
        }
        let e = self.linear(name, &grid, 4); // [h*w, channels]
        let mut out = vec![0.0; channels * h * w];
        for n in 0..h * w {
            for c in 0..channels {
                out[c * h * w + n] = e[n * channels + c];
            }
        }
        out
    }

    fn encode(&self, cfg: &SlotConfig, img: &[f64]) -> (Vec<f64>, usize, usize) {
        let (mut x, mut c, mut h, mut w) = (img.to_vec(), 3, cfg.height, cfg.width);
        for (i, s) in cfg.encoder.iter().enumerate() {
            let (y, ho, wo) = self.conv(&format!("enc.conv{i}"), &x, c, h, w, s.stride);
            x = y.into_iter().map(|v| v.max(0.0)).collect();
            (c, h, w) = (s.channels, ho, wo);
        }
        let pos = self.position("enc.pos", c, h, w);
        (x.iter().zip(&pos).map(|(a, b)| a + b).collect(), h, w)
    }

    fn gru(&self, x: &[f64], h: &[f64], d: usize) -> Vec<f64> {
        let gi = self.linear("sa.gru.ih", x, d);
        let gh = self.linear("sa.gru.hh", h, d);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = Vec::with_capacity(h.len());
        for row in 0..h.len() / d {
            let (a, b) = (&gi[row * 3 * d..(row + 1) * 3 * d], &gh[row * 3 * d..(row + 1) * 3 * d]);
            for j in 0..d {
                let r = sig(a[j] + b[j]);
                let z = sig(a[d + j] + b[d + j]);
                let n = (a[2 * d + j] + r * b[2 * d + j]).tanh();
                out.push((1.0 - z) * n + z * h[row * d + j]);
            }
        }
        out
    }

    /// Slots `[K, D]` and final attention `[N, K]` for one `[C, N]` grid.
    /// Also returns the first iteration's aggregated updates.
    fn slot_attention(&self, cfg: &SlotConfig, feat: &[f64], c: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (k, d) = (cfg.num_slots, cfg.slot_dim);
        let mut x = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                x[i * c + ch] = feat[ch * n + i];
            }
        }
        let x = self.layer_norm("feat_norm", &x, c);
        let x = self.mlp("feat_mlp", &x, &[c, d, d]);
        let x = self.layer_norm("sa.norm_in", &x, d);
        let keys = self.linear("sa.k", &x, d);
        let vals = self.linear("sa.v", &x, d);
        let mut slots = self.p("sa.slot_init").to_vec();
        let mut attn = vec![0.0; n * k];
        let mut first_updates = Vec::new();
        for _ in 0..cfg.iters {
            let q = self.linear("sa.q", &self.layer_norm("sa.norm_slots", &slots, d), d);
            for i in 0..n {
                let logits: Vec<f64> =
                    (0..k).map(|s| (0..d).map(|j| keys[i * d + j] * q[s * d + j]).sum::<f64>() / (d as f64).sqrt()).collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for s in 0..k {
                    attn[i * k + s] = (logits[s] - mx).exp() / z;
                }
            }
            let mut updates = vec![0.0; k * d];
            for s in 0..k {
                let total: f64 = (0..n).map(|i| attn[i * k + s] + 1e-8).sum();
                for i in 0..n {
                    let wgt = (attn[i * k + s] + 1e-8) / total;
                    for j in 0..d {
                        updates[s * d + j] += wgt * vals[i * d + j];
                    }
                }
            }
            if first_updates.is_empty() {
                first_updates = updates.clone();
            }
            let h = self.gru(&updates, &slots, d);
            let r = self.mlp("sa.mlp", &self.layer_norm("sa.norm_mlp", &h, d), &[d, cfg.mlp_hidden, d]);
            slots = h.iter().zip(&r).map(|(a, b)| a + b).collect();
        }
        (slots, attn, first_updates)
    }
}

fn micro_model(cfg: SlotConfig, seed: u64) -> (SlotModel, ParamStore<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let m = SlotModel::new(cfg, &mut store, &mut r).unwrap();
    perturb(&mut store, &mut r);
    (m, store)
}

#[test]
fn micro_encoder_matches_direct_convolution() {
    let cfg = SlotConfig::micro(3, 8, 2);
    let (m, store64) = micro_model(cfg.clone(), 1);
    let store32: ParamStore<f32> = store64.cast();
    let img = random_image(8, 8, &mut rng(2));
    let mut g = Graph::new(&store32);
    let x = m.input(&mut g, &[&img]).unwrap();
    let f = m.encode(&mut g, x);
    assert_eq!(g.shape(f), [1, 4, 4, 4]);
    let oracle = Oracle { store: &store64 };
    let (want, _, _) = oracle.encode(&cfg, &values(&img.data));
    assert!(max_abs(&values(g.value(f)), &want) < 1e-5);
}

#[test]
fn pointwise_and_strided_convolutions_match_direct_loops() {
    let mut r = rng(3);
    for (k, stride) in [(1, 1), (1, 2), (3, 2), (5, 1)] {
        let mut store = ParamStore::<f64>::new();
        let conv = slotbench_core::nn::Conv2d::new(&mut store, "c", 3, 5, k, stride, true, &mut r);
        perturb(&mut store, &mut r);
        let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new(&store);
        let xv = g.input(&[2, 3, 7, 6], x.clone());
        let y = conv.forward(&mut g, xv);
        let oracle = Oracle { store: &store };
        let per = g.value(y).len() / 2;
        for b in 0..2 {
            let (want, _, _) = oracle.conv("c", &x[b * 126..(b + 1) * 126], 3, 7, 6, stride);
            assert!(max_abs(&g.value(y)[b * per..(b + 1) * per], &want) < 1e-12, "k={k} stride={stride}");
        }
    }
}

#[test]
fn identical_images_encode_identically_and_zero_input_is_positional() {
    let cfg = SlotConfig::micro(3, 8, 2);
    let mut store = ParamStore::<f32>::new();
    let m = SlotModel::new(cfg, &mut store, &mut rng(4)).unwrap();
    let img = random_image(8, 8, &mut rng(5));
    let zero = Image::zeros(8, 8);
    let mut g = Graph::new(&store);
    let x = m.input(&mut g, &[&img, &img, &zero]).unwrap();
    let f = m.encode(&mut g, x);
    let v = g.value(f).to_vec();
    let per = v.len() / 3;
    assert_eq!(v[..per], v[per..2 * per]);
    // Encoder biases start at zero, so the trunk maps a black image to zero.
    let pos = m.encoder.pos.embedding(&mut g, 4, 4);
    assert_eq!(&v[2 * per..], g.value(pos));
}

fn random_features(b: usize, c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..b * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn slot_attention_matches_dense_iteration() {
    let cfg = SlotConfig::micro(3, 8, 2);
    let (m, store) = micro_model(cfg.clone(), 6);
    let feats = random_features(2, 4, 4, 4, &mut rng(7));
    let mut g = Graph::new(&store);
    let f = g.input(&[2, 4, 4, 4], feats.clone());
    let sv = m.slot_attention(&mut g, f);
    let oracle = Oracle { store: &store };
    for b in 0..2 {
        let (slots, attn, _) = oracle.slot_attention(&cfg, &feats[b * 64..(b + 1) * 64], 4, 16);
        assert!(max_abs(&g.value(sv.slots)[b * 24..(b + 1) * 24], &slots) < 1e-5);
        assert!(max_abs(&g.value(sv.attention)[b * 48..(b + 1) * 48], &attn) < 1e-5);
    }
}

#[test]
fn single_slot_attends_everywhere_and_averages_values() {
    let cfg = SlotConfig::micro(1, 8, 1);
    let (m, store) = micro_model(cfg.clone(), 8);
    let feats = random_features(1, 4, 4, 4, &mut rng(9));
    let mut g = Graph::new(&store);
    let f = g.input(&[1, 4, 4, 4], feats.clone());
    let sv = m.slot_attention(&mut g, f);
    assert!(g.value(sv.attention).iter().all(|&a| a == 1.0));
    let oracle = Oracle { store: &store };
    let (slots, _, updates) = oracle.slot_attention(&cfg, &feats, 4, 16);
    // The renormalized weights are uniform, so the update is the plain mean.
    let x = oracle.layer_norm("sa.norm_in", &oracle.mlp("feat_mlp", &oracle.layer_norm("feat_norm", &transpose(&feats, 4, 16), 4), &[4, 8, 8]), 8);
    let vals = oracle.linear("sa.v", &x, 8);
    let mean: Vec<f64> = (0..8).map(|j| (0..16).map(|i| vals[i * 8 + j]).sum::<f64>() / 16.0).collect();
    assert!(max_abs(&updates, &mean) < 1e-12);
    assert!(max_abs(g.value(sv.slots), &slots) < 1e-10);
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols).flat_map(|j| (0..rows).map(move |i| x[i * cols + j])).collect()
}

#[test]
fn combined_image_is_mask_weighted_sum() {
    let cfg = SlotConfig::micro(4, 8, 2);
    let (m, store) = micro_model(cfg, 10);
    let imgs: Vec<Image> = (0..2).map(|i| random_image(8, 8, &mut rng(20 + i))).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    for ms in m.extract_masks(&store, &refs).unwrap() {
        let p = 64;
        for px in 0..p {
            let total: f32 = (0..4).map(|k| ms.masks[k * p + px]).sum();
            assert!((total - 1.0).abs() < 1e-5);
            for c in 0..3 {
                let want: f64 = (0..4).map(|k| ms.masks[k * p + px] as f64 * ms.recons[(k * 3 + c) * p + px] as f64).sum();
                assert!((ms.combined[c * p + px] as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identical_slots_decode_to_uniform_masks() {
    let cfg = SlotConfig::micro(5, 8, 1);
    let (m, store) = micro_model(cfg, 11);
    let slot: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut g = Graph::new(&store);
    let s = g.input(&[1, 5, 8], slot.repeat(5));
    let dec = m.decode(&mut g, s);
    assert!(g.value(dec.masks).iter().all(|&v| (v - 0.2).abs() < 1e-12));
    let r = g.value(dec.recons);
    let per = r.len() / 5;
    for k in 1..5 {
        assert_eq!(r[..per], r[k * per..(k + 1) * per]);
    }
}

#[test]
fn loss_convention_is_per_pixel_mean() {
    let store = ParamStore::<f64>::new();
    let mut r = rng(12);
    let img: Vec<f64> = (0..2 * 3 * 64).map(|_| r.random()).collect();
    let mut g = Graph::new(&store);
    let a = g.input(&[2, 3, 64], img.clone());
    let same = g.input(&[2, 3, 64], img.clone());
    let zero = g.mse(a, same);
    assert_eq!(g.scalar(zero), 0.0);
    let c = 0.3;
    let off = g.input(&[2, 3, 64], img.iter().map(|v| v + c).collect());
    let l = g.mse(off, a);
    assert!((g.scalar(l) - c * c).abs() < 1e-12);
}

#[test]
fn batch_loss_matches_double_loop() {
    let cfg = SlotConfig::micro(3, 8, 2);
    let (m, store) = micro_model(cfg, 13);
    let imgs: Vec<Image> = (0..2).map(|i| random_image(8, 8, &mut rng(30 + i))).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let loss = m.reconstruction_loss(&store, &refs).unwrap();
    // Recompute with the model's own forward values in f64.
    let mut g = Graph::new(&store);
    let x = m.input(&mut g, &refs).unwrap();
    let (_, dec) = m.forward(&mut g, x);
    let comb = g.value(dec.combined);
    let mut total = 0.0;
    for (i, img) in imgs.iter().enumerate() {
        let mut per_image = 0.0;
        for c in 0..3 {
            for px in 0..64 {
                per_image += (img.data[c * 64 + px] as f64 - comb[(i * 3 + c) * 64 + px]).powi(2);
            }
        }
        total += per_image / (3.0 * 64.0);
    }
    assert!((loss - total / 2.0).abs() < 1e-6);
}

#[test]
fn permuting_slot_init_permutes_everything() {
    let cfg = SlotConfig::micro(4, 8, 3);
    let (m, store) = micro_model(cfg, 14);
    let perm = [2usize, 0, 3, 1];
    let mut permuted = store.clone();
    let id = permuted.find("sa.slot_init").unwrap();
    let orig = store.get(id).data.clone();
    permuted.get_mut(id).data = perm.iter().flat_map(|&p| orig[p * 8..(p + 1) * 8].to_vec()).collect();
    let imgs: Vec<Image> = (0..3).map(|i| random_image(8, 8, &mut rng(40 + i))).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let run = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let x = m.input(&mut g, &refs).unwrap();
        let (sv, dec) = m.forward(&mut g, x);
        let out = [sv.slots, sv.attention, dec.masks, dec.recons, dec.combined].map(|v| g.value(v).to_vec());
        let l = m.loss(&mut g, x);
        (out, g.scalar(l))
    };
    let ([s0, a0, m0, r0, c0], l0) = run(&store);
    let ([s1, a1, m1, r1, c1], l1) = run(&permuted);
    for b in 0..3 {
        for (new, &old) in perm.iter().enumerate() {
            let row = |v: &[f64], width: usize, k: usize| v[(b * 4 + k) * width..(b * 4 + k + 1) * width].to_vec();
            assert!(max_abs(&row(&s1, 8, new), &row(&s0, 8, old)) < 1e-12);
            assert!(max_abs(&row(&m1, 64, new), &row(&m0, 64, old)) < 1e-12);
            assert!(max_abs(&row(&r1, 192, new), &row(&r0, 192, old)) < 1e-12);
            for n in 0..16 {
                assert!((a1[(b * 16 + n) * 4 + new] - a0[(b * 16 + n) * 4 + old]).abs() < 1e-12);
            }
        }
    }
    assert!(max_abs(&c0, &c1) < 1e-5);
    assert!((l0 - l1).abs() < 1e-5);
}

#[test]
fn micro_model_overfits_one_image() {
    let mut store = ParamStore::<f32>::new();
    let m = SlotModel::new(SlotConfig::micro(3, 16, 2), &mut store, &mut rng(15)).unwrap();
    let sim = SimConfig::default();
    let img = render(&sample_scene(16, 4, &sim).unwrap(), 8, 8, &sim);
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 1,
        adam: AdamConfig { lr: 3e-3, warmup_steps: 50, ..Default::default() },
        checkpoint_every: 100,
        seed: 0,
    };
    let report = train_reconstruction(&mut store, std::slice::from_ref(&img), &cfg, |g, x| m.loss(g, x), |_, _| Ok(())).unwrap();
    assert!(report.losses.iter().all(|&l| l >= 0.0));
    let final_loss = m.reconstruction_loss(&store, &[&img]).unwrap();
    assert!(final_loss < 0.1 * report.losses[0], "{final_loss} vs {}", report.losses[0]);
}

#[test]
fn fixed_seed_gives_bit_stable_loss_curve() {
    let imgs: Vec<Image> = (0..4).map(|i| random_image(8, 8, &mut rng(50 + i))).collect();
    let curve = || {
        let mut store = ParamStore::<f32>::new();
        let m = SlotModel::new(SlotConfig::micro(3, 8, 2), &mut store, &mut rng(17)).unwrap();
        let cfg = TrainConfig { steps: 30, batch_size: 2, checkpoint_every: 10, ..Default::default() };
        train_reconstruction(&mut store, &imgs, &cfg, |g, x| m.loss(g, x), |_, _| Ok(())).unwrap().losses
    };
    assert_eq!(curve(), curve());
}

#[test]
fn bilevel_gradient_is_last_iteration_gradient() {
    let cfg = SlotConfig { bilevel: true, ..SlotConfig::micro(3, 8, 3) };
    let (m, store) = micro_model(cfg.clone(), 21);
    let build = |iters, bilevel| SlotModel::new(SlotConfig { iters, bilevel, ..cfg.clone() }, &mut ParamStore::<f64>::new(), &mut rng(0)).unwrap();
    let (plain, first_two, last_only) = (build(3, false), build(2, false), build(1, false));
    let img = render(&sample_scene(4, 3, &SimConfig::default()).unwrap(), 8, 8, &SimConfig::default());

    let run = |model: &SlotModel, st: &ParamStore<f64>| {
        let mut g = Graph::new(st);
        let x = model.input(&mut g, &[&img]).unwrap();
        let (sv, dec) = model.forward(&mut g, x);
        let t = g.reshape(x, &[1, 3, 64]);
        let l = g.mse(dec.combined, t);
        (values(g.value(sv.slots)), g.scalar(l), g.backward(l))
    };
    let (slots, loss, grads) = run(&m, &store);
    let (slots_plain, loss_plain, grads_plain) = run(&plain, &store);
    assert_eq!((&slots, loss), (&slots_plain, loss_plain));

    // One plain iteration started from the state after two iterations.
    let (after_two, _, _) = run(&first_two, &store);
    let mut restarted = store.clone();
    restarted.get_mut(m.slot_init).data.copy_from_slice(&after_two);
    let (_, _, want) = run(&last_only, &restarted);
    let mut differs = false;
    for (i, t) in store.iter().enumerate() {
        let id = slotbench_core::ParamId(i);
        let (got, exp) = (grads.get(id).unwrap_or(&[]), want.get(id).unwrap_or(&[]));
        assert!(max_abs(got, exp) < 1e-12 || (got.is_empty() && exp.iter().all(|&v| v == 0.0)), "{}", t.name);
        differs |= grads_plain.get(id).is_some_and(|p| max_abs(p, got) > 1e-9);
    }
    assert!(differs, "bilevel gradients should differ from full backpropagation");
}
