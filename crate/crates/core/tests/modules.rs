mod common;

use common::*;
use fan_autograd::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor, TensorError};
use fan_core::config::{ModelConfig, VpmMode};
use fan_core::l2v::L2vDecoder;
use fan_core::nn::ParamBuilder;
use fan_core::text::{tokenize, TokenSequence, Vocabulary, EOS, PAD, SOS, UNK};
use fan_core::v2l::{fpn_fuse, positional_embedding};
use fan_core::vision::Image;
use fan_core::{FanError, FanModel};
use rand::Rng;

fn model(cfg: &ModelConfig, seed: u64) -> FanModel {
    FanModel::new(cfg, seed).unwrap()
}

/// Replaces every parameter with random values so zero biases and unit
/// gains do not hide mistakes.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.entry(id).name.ends_with("gamma");
        for v in store.tensor_mut(id).data_mut() {
            *v = r.gen_range(-0.5..0.5) + if gain { 1.0 } else { 0.0 };
        }
    }
}

fn image(seed: u64, size: usize) -> Image {
    let mut r = rng(seed);
    let px = (0..size * size * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    Image::new(Tensor::new(vec![size, size, 3], px).unwrap()).unwrap()
}

fn vocab() -> Vocabulary {
    Vocabulary::synthetic()
}

// ---- text encoder ----

#[test]
fn tokenize_small_and_empty() {
    let v = vocab();
    let t = tokenize("red circle", &v, 6).unwrap();
    let (red, circle) = (v.id("red").unwrap(), v.id("circle").unwrap());
    assert_eq!(t.ids, vec![SOS, red, circle, EOS, PAD, PAD]);
    assert_eq!(t.true_length, 4);
    let e = tokenize("", &v, 4).unwrap();
    assert_eq!(e.ids, vec![SOS, EOS, PAD, PAD]);
    assert_eq!(e.true_length, 2);
}

#[test]
fn tokenize_lowercases_and_maps_unknown() {
    let v = vocab();
    let t = tokenize("  The RED   zebra ", &v, 8).unwrap();
    assert_eq!(t.ids[1], v.id("the").unwrap());
    assert_eq!(t.ids[2], v.id("red").unwrap());
    assert_eq!(t.ids[3], UNK);
    assert_eq!(t.ids[4], EOS);
}

#[test]
fn tokenize_truncates_long_sentences() {
    let v = vocab();
    let text = vec!["red"; 30].join(" ");
    let t = tokenize(&text, &v, 17).unwrap();
    assert_eq!(t.ids.len(), 17);
    assert_eq!(t.true_length, 17);
    assert_eq!(t.ids[16], EOS);
    assert_eq!(t.ids[1..16].iter().filter(|&&i| i == v.id("red").unwrap()).count(), 15);
    assert!(tokenize("red", &v, 2).is_err());
}

#[test]
fn vocabulary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = vocab();
    v.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), v);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("[PAD]"));
    assert_eq!(text.lines().count(), v.len());
}

#[test]
fn text_shapes_and_eos_row() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 3);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let t = tokenize("the red circle", &vocab(), cfg.max_len).unwrap();
    let f = m.text.encode(&mut g, &p, &t).unwrap();
    assert_eq!(g.shape(f.f_w), &[cfg.max_len, cfg.text_dim]);
    assert_eq!(g.shape(f.f_s), &[1, cfg.text_dim]);
    let fw = g.value(f.f_w);
    assert_eq!(g.value(f.f_s).data(), fw.row(t.true_length - 1));
    assert_eq!(f.padding_mask, t.padding_mask());
    assert_eq!(f.padding_mask.iter().filter(|&&m| !m).count(), t.true_length);
}

#[test]
fn text_padding_region_has_no_influence() {
    let cfg = ModelConfig::default();
    let mut m = model(&cfg, 4);
    randomize(&mut m.params, 40);
    let t = tokenize("the blue square", &vocab(), cfg.max_len).unwrap();
    let mut junk = t.ids.clone();
    for (i, id) in junk.iter_mut().enumerate().skip(t.true_length) {
        *id = 4 + i % 10;
    }
    let run = |ids: &[usize]| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let f = m.text.encode_ids(&mut g, &p, ids, t.true_length).unwrap();
        (g.value(f.f_w).clone(), g.value(f.f_s).clone())
    };
    let (wa, sa) = run(&t.ids);
    let (wb, sb) = run(&junk);
    for i in 0..t.true_length {
        let d: f64 = wa.row(i).iter().zip(wb.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-10, "row {i} differs by {d}");
    }
    assert!(sa.max_abs_diff(&sb) < 1e-10);
}

#[test]
fn text_is_order_sensitive_and_deterministic() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 5);
    let v = vocab();
    let encode = |s: &str| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let f = m.text.encode(&mut g, &p, &tokenize(s, &v, cfg.max_len).unwrap()).unwrap();
        g.value(f.f_s).clone()
    };
    let a = encode("red circle");
    let b = encode("circle red");
    assert!(a.max_abs_diff(&b) > 1e-6);
    assert_eq!(a.data(), encode("red circle").data());
}

#[test]
fn text_rejects_out_of_vocabulary_ids() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 6);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let mut ids = vec![PAD; cfg.max_len];
    ids[0] = SOS;
    ids[1] = cfg.vocab_size + 3;
    ids[2] = EOS;
    let err = m.text.encode_ids(&mut g, &p, &ids, 3).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(TokenSequence::from_ids(vec![SOS, PAD, EOS]).is_err());
}

// ---- vision encoder ----

fn level_dims(m: &FanModel, img: &Image) -> Vec<Vec<usize>> {
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let pyr = m.vision.encode(&mut g, &p, img).unwrap();
    pyr.levels.iter().map(|&l| g.shape(l).to_vec()).collect()
}

#[test]
fn pyramid_shapes_at_64_and_416() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 7);
    let c = cfg.vision_channels;
    assert_eq!(level_dims(&m, &image(1, 64)), vec![vec![16, 16, c[0]], vec![8, 8, c[1]], vec![4, 4, c[2]], vec![2, 2, c[3]]]);
    let big = level_dims(&m, &image(2, 416));
    let spatial: Vec<_> = big.iter().map(|d| (d[0], d[1])).collect();
    assert_eq!(spatial, vec![(104, 104), (52, 52), (26, 26), (13, 13)]);
}

#[test]
fn zero_image_gives_zero_features() {
    let m = model(&ModelConfig::default(), 8);
    let img = Image::new(Tensor::zeros(vec![64, 64, 3])).unwrap();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let pyr = m.vision.encode(&mut g, &p, &img).unwrap();
    for l in pyr.levels {
        assert!(g.value(l).all_finite());
        assert_eq!(g.value(l).max_abs_diff(&Tensor::zeros(g.shape(l).to_vec())), 0.0);
    }
}

#[test]
fn image_sides_must_divide_by_32() {
    let img = Image::new(Tensor::zeros(vec![48, 64, 3])).unwrap();
    let m = model(&ModelConfig::default(), 9);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let err = m.vision.encode(&mut g, &p, &img).unwrap_err();
    assert!(err.to_string().contains("32"), "{err}");
    assert!(Image::new(Tensor::full(vec![32, 32, 3], 1.5)).is_err());
}

#[test]
fn translation_by_32_px_shifts_level5_by_one_cell() {
    let m = model(&ModelConfig::default(), 10);
    let size = 256;
    let base = image(11, size);
    let mut shifted = base.pixels().clone();
    let mut r = rng(12);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = if x >= 32 { base.pixels().at(&[y, x - 32, c]) } else { r.gen_range(0.0..1.0) };
                shifted.set(&[y, x, c], v);
            }
        }
    }
    let shifted = Image::new(shifted).unwrap();
    let top = |img: &Image| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let pyr = m.vision.encode(&mut g, &p, img).unwrap();
        g.value(pyr.levels[3]).clone()
    };
    let (a, b) = (top(&base), top(&shifted));
    let c = a.shape()[2];
    for y in 0..8 {
        for x in 2..=5 {
            for ch in 0..c {
                let d = (a.at(&[y, x, ch]) - b.at(&[y, x + 1, ch])).abs();
                assert!(d < 1e-12, "cell ({y},{x}) channel {ch} differs by {d}");
            }
        }
    }
}

#[test]
fn backbone_parameters_are_tagged() {
    let m = model(&ModelConfig::default(), 13);
    for e in m.params.entries() {
        let backbone = e.group == fan_autograd::ParamGroup::Backbone;
        assert_eq!(backbone, e.name.starts_with("vision."), "{}", e.name);
    }
}

// ---- activation module ----

fn words(seed: u64, l: usize, c: usize) -> Tensor {
    random(&mut rng(seed), &[l, c], 1.0)
}

#[test]
fn activation_matches_step_by_step_reference() {
    let cfg = ModelConfig::default();
    let mut m = model(&cfg, 14);
    randomize(&mut m.params, 140);
    let scale = m.activation.scales[1];
    let fv = random(&mut rng(15), &[8, 8, cfg.vision_channels[1]], 1.0);
    let fw = words(16, 6, cfg.text_dim);
    let mask = [false, false, false, false, true, true];

    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let (fv_v, fw_v) = (g.constant(fv.clone()), g.constant(fw.clone()));
    let out = scale.forward(&mut g, &p, fv_v, fw_v, Some(&mask), true, "t").unwrap();
    assert_eq!(g.shape(out), &[8, 8, cfg.d_model]);

    let s = &m.params;
    let tokens = rows(&fv.reshape(vec![64, cfg.vision_channels[1]]).unwrap());
    let pv = linear(s, &scale.vis_proj, &tokens);
    let pw = linear(s, &scale.word_proj, &rows(&fw));
    let (_, a) = attention(s, &scale.attn, &pv, &pw, Some(&mask));
    let want = add(&pv, &a);
    let got = rows(&g.value(out).reshape(vec![64, cfg.d_model]).unwrap());
    assert!(max_diff(&got, &want) < 1e-10);
}

#[test]
fn activation_with_zero_words_passes_visual_projection_through() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 17);
    let scale = m.activation.scales[0];
    let fv = random(&mut rng(18), &[16, 16, cfg.vision_channels[0]], 1.0);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let fv_v = g.constant(fv.clone());
    let zero = g.constant(Tensor::zeros(vec![5, cfg.text_dim]));
    let out = scale.forward(&mut g, &p, fv_v, zero, None, true, "t").unwrap();
    let pv = linear(&m.params, &scale.vis_proj, &rows(&fv.reshape(vec![256, cfg.vision_channels[0]]).unwrap()));
    let got = rows(&g.value(out).reshape(vec![256, cfg.d_model]).unwrap());
    assert!(max_diff(&got, &pv) < 1e-12);
}

#[test]
fn single_word_gets_all_attention() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 19);
    let mut g = Graph::new();
    g.record_attention();
    let p = m.params.bind(&mut g, false);
    let fv = g.constant(random(&mut rng(20), &[4, 4, cfg.vision_channels[2]], 1.0));
    let w = g.constant(words(21, 1, cfg.text_dim));
    m.activation.scales[2].forward(&mut g, &p, fv, w, None, true, "single").unwrap();
    let log = g.attention_log();
    assert_eq!(log.len(), cfg.activation_heads);
    for rec in log {
        assert!(rec.weights.data().iter().all(|&x| x == 1.0));
    }
}

#[test]
fn activation_pyramid_shapes_toggle_and_sensitivity() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 22);
    let off = {
        let mut c = cfg.clone();
        c.use_activation = false;
        FanModel::with_params(&c, m.params.clone()).unwrap()
    };
    let img = image(23, 64);
    let v = vocab();
    let run = |model: &FanModel, text: &str| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let out = model.forward(&mut g, &p, &img, &tokenize(text, &v, cfg.max_len).unwrap()).unwrap();
        let act: Vec<Tensor> = out.activated.iter().map(|&a| g.value(a).clone()).collect();
        (act, g.value(out.aligned).clone())
    };
    let (a, _) = run(&m, "the red circle");
    let dims: Vec<_> = a.iter().map(|t| t.shape().to_vec()).collect();
    let d = cfg.d_model;
    assert_eq!(dims, vec![vec![16, 16, d], vec![8, 8, d], vec![4, 4, d], vec![2, 2, d]]);
    let (b, _) = run(&m, "the blue square");
    assert!(a.iter().zip(&b).all(|(x, y)| x.max_abs_diff(y) > 1e-6));

    let (plain, aligned) = run(&off, "the red circle");
    assert_eq!(aligned.shape(), &[16, 16, d]);
    let mut g = Graph::new();
    let p = off.params.bind(&mut g, false);
    let pyr = off.vision.encode(&mut g, &p, &img).unwrap();
    for (i, scale) in off.activation.scales.iter().enumerate() {
        let t = g.value(pyr.levels[i]).clone();
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let want = linear(&off.params, &scale.vis_proj, &rows(&t.reshape(vec![h * w, c]).unwrap()));
        let got = rows(&plain[i].reshape(vec![h * w, d]).unwrap());
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn fully_masked_words_are_rejected() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 24);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let fv = g.constant(random(&mut rng(25), &[2, 2, cfg.vision_channels[3]], 1.0));
    let w = g.constant(words(26, 3, cfg.text_dim));
    let err = m.activation.scales[3].forward(&mut g, &p, fv, w, Some(&[true, true, true]), true, "x").unwrap_err();
    assert!(matches!(err, FanError::Tensor(TensorError::DegenerateMask)), "{err}");
}

// ---- vision-to-language decoder ----

#[test]
fn positional_embedding_properties() {
    let d = 16;
    let pe = positional_embedding(8, 8, d).unwrap();
    assert_eq!(pe.shape(), &[64, d]);
    for (j, &v) in pe.row(0).iter().enumerate() {
        assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for a in 0..64 {
        for b in a + 1..64 {
            let dist: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(dist > 0.0, "rows {a} and {b} coincide");
        }
    }
    assert_eq!(positional_embedding(8, 8, d).unwrap(), pe);
    for bad in [0, 6, 18] {
        assert!(matches!(positional_embedding(2, 2, bad), Err(FanError::Config(_))));
    }
}

#[test]
fn vision_projection_matches_reference() {
    let cfg = ModelConfig::default();
    let mut m = model(&cfg, 27);
    randomize(&mut m.params, 270);
    let vpm = m.v2l.vpm[1].unwrap();
    let d = cfg.d_model;
    let fc = random(&mut rng(28), &[8, 8, d], 1.0);
    let pw = words(29, 5, d);
    let mask = [false, false, false, true, true];

    for self_attention in [true, false] {
        let mut block = vpm;
        block.use_self_attention = self_attention;
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let (fc_v, pw_v) = (g.constant(fc.clone()), g.constant(pw.clone()));
        let out = block.forward(&mut g, &p, fc_v, pw_v, Some(&mask), "t").unwrap();
        assert_eq!(g.shape(out), &[8, 8, d]);

        let s = &m.params;
        let pos = rows(&positional_embedding(8, 8, d).unwrap());
        let mut x = add(&rows(&fc.reshape(vec![64, d]).unwrap()), &pos);
        let w = rows(&pw);
        if self_attention {
            let all: Mat = x.iter().chain(&w).cloned().collect();
            let n = layer_norm(s, &block.norm_self, &all);
            let key_mask: Vec<bool> = std::iter::repeat_n(false, 64).chain(mask).collect();
            let (_, a) = attention(s, &block.self_attn, &n, &n, Some(&key_mask));
            x = add(&x, &a[..64].to_vec());
        }
        let (_, c) = attention(s, &block.cross_attn, &layer_norm(s, &block.norm_cross, &x), &w, Some(&mask));
        x = add(&x, &c);
        x = add(&x, &ffn(s, &block.ffn, &layer_norm(s, &block.norm_ffn, &x)));
        let got = rows(&g.value(out).reshape(vec![64, d]).unwrap());
        assert!(max_diff(&got, &x) < 1e-10, "self_attention={self_attention}");
    }
}

#[test]
fn vpm_attention_ignores_padding_in_both_stages() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 30);
    let vpm = m.v2l.vpm[2].unwrap();
    let d = cfg.d_model;
    let mask = [false, false, true, true];
    let mut g = Graph::new();
    g.record_attention();
    let p = m.params.bind(&mut g, false);
    let fc = g.constant(random(&mut rng(31), &[4, 4, d], 1.0));
    let w = g.constant(words(32, 4, d));
    vpm.forward(&mut g, &p, fc, w, Some(&mask), "vpm").unwrap();
    let mut sites: Vec<&str> = g.attention_log().iter().map(|r| r.site.as_str()).collect();
    sites.dedup();
    assert_eq!(sites, vec!["vpm/self", "vpm/cross"]);
    for rec in g.attention_log() {
        let km = rec.key_padding_mask.as_ref().unwrap();
        let keys = rec.weights.shape()[1];
        assert_eq!(rec.weights.shape()[0], 16);
        for q in 0..16 {
            let row = &rec.weights.data()[q * keys..(q + 1) * keys];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for (k, &masked) in km.iter().enumerate() {
                if masked {
                    assert_eq!(row[k], 0.0);
                }
            }
        }
    }
}

#[test]
fn fpn_matches_chain_reference_and_maps_zero_to_zero() {
    let cfg = ModelConfig::default();
    let mut m = model(&cfg, 33);
    let d = cfg.d_model;
    let sizes = [16, 8, 4, 2];
    let mut r = rng(34);
    let levels: Vec<Tensor> = sizes.iter().map(|&s| random(&mut r, &[s, s, d], 1.0)).collect();

    let fused = |m: &FanModel, levels: &[Tensor]| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let vars = [0, 1, 2, 3].map(|i| g.constant(levels[i].clone()));
        let out = fpn_fuse(&mut g, &p, &vars, &m.v2l.smooth).unwrap();
        g.value(out).clone()
    };
    let zeros: Vec<Tensor> = sizes.iter().map(|&s| Tensor::zeros(vec![s, s, d])).collect();
    assert_eq!(fused(&m, &zeros), Tensor::zeros(vec![16, 16, d]));

    randomize(&mut m.params, 330);
    let got = fused(&m, &levels);
    assert_eq!(got.shape(), &[16, 16, d]);
    let mut top = levels[3].clone();
    for i in (0..3).rev() {
        let s = sizes[i];
        let up = bilinear(&top, s, s);
        let sum = Tensor::new(vec![s, s, d], up.data().iter().zip(levels[i].data()).map(|(a, b)| a + b).collect()).unwrap();
        let smooth = m.v2l.smooth[i];
        let conv = conv3x3(&sum, m.params.tensor(smooth.kernel), 1);
        let bias = m.params.tensor(smooth.bias).data();
        top = Tensor::new(vec![s, s, d], conv.data().iter().enumerate().map(|(j, v)| v + bias[j % d]).collect()).unwrap();
    }
    assert!(got.max_abs_diff(&top) < 1e-10);
}

#[test]
fn fpn_rejects_mismatched_levels() {
    let cfg = ModelConfig::default();
    let m = model(&cfg, 35);
    let d = cfg.d_model;
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let vars = [16, 8, 5, 2].map(|s| g.constant(Tensor::zeros(vec![s, s, d])));
    assert!(fpn_fuse(&mut g, &p, &vars, &m.v2l.smooth).is_err());
}

#[test]
fn every_vpm_mode_keeps_the_output_shape() {
    for (vpm, self_attn) in [(VpmMode::Off, true), (VpmMode::Single, true), (VpmMode::Multi, true), (VpmMode::Multi, false)] {
        let cfg = ModelConfig { vpm, vpm_self_attention: self_attn, ..ModelConfig::default() };
        let m = model(&cfg, 36);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let out = m.forward(&mut g, &p, &image(37, 64), &tokenize("green square", &vocab(), cfg.max_len).unwrap()).unwrap();
        assert_eq!(g.shape(out.aligned), &[16, 16, cfg.d_model], "{vpm:?}");
        let active = m.v2l.vpm.iter().filter(|v| v.is_some()).count();
        assert_eq!(active, match vpm { VpmMode::Off => 0, VpmMode::Single => 1, VpmMode::Multi => 4 });
    }
}

// ---- language-to-vision decoder ----

fn l2v(d: usize, layers: usize, heads: usize, hidden: usize, seed: u64) -> (ParamStore, L2vDecoder) {
    let mut store = ParamStore::new();
    let dec = {
        let mut pb = ParamBuilder::new(&mut store, seed);
        L2vDecoder::new(&mut pb, 16, d, layers, 0, heads, hidden, 1e-5).unwrap()
    };
    (store, dec)
}

#[test]
fn paper_scale_decoder_is_accepted() {
    let cfg = ModelConfig::paper();
    assert_eq!((cfg.l2v_layers, cfg.l2v_heads, cfg.l2v_ffn), (6, 8, 2048));
    cfg.validate().unwrap();
    let (store, dec) = l2v(cfg.d_model, 6, 8, 2048, 38);
    assert_eq!(dec.layers.len(), 6);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let fs = g.constant(random(&mut rng(39), &[1, 16], 1.0));
    let mem = g.constant(random(&mut rng(40), &[4, cfg.d_model], 1.0));
    let out = dec.decode(&mut g, &p, fs, mem).unwrap();
    assert_eq!(g.shape(out), &[1, cfg.d_model]);
}

#[test]
fn uniform_memory_yields_its_value_projection() {
    let d = 16;
    let (mut store, dec) = l2v(d, 1, 4, 32, 41);
    randomize(&mut store, 410);
    let cross = dec.layers[0].cross_attn;
    let row: Vec<f64> = random(&mut rng(42), &[1, d], 1.0).into_data();
    let memory = Tensor::new(vec![5, d], row.repeat(5)).unwrap();
    let want = linear(&store, &cross.o, &linear(&store, &cross.v, &vec![row.clone()]));
    for seed in [43, 44] {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let q = g.constant(random(&mut rng(seed), &[1, d], 1.0));
        let mem = g.constant(memory.clone());
        let out = cross.forward(&mut g, &p, q, mem, mem, None, "x").unwrap();
        assert!(max_diff(&rows(g.value(out)), &want) < 1e-12);
    }
}

#[test]
fn decoder_depth_matters_and_both_depths_pass_gradient_checks() {
    let d = 8;
    let memory = random(&mut rng(45), &[6, d], 1.0);
    let fs = random(&mut rng(46), &[1, 16], 1.0);
    let readout = random(&mut rng(47), &[1, d], 1.0);
    let mut outs = Vec::new();
    for layers in [1, 3] {
        let (mut store, dec) = l2v(d, layers, 2, 16, 48);
        randomize(&mut store, 480);
        let f = |g: &mut Graph, p: &fan_autograd::BoundParams| -> fan_core::Result<fan_autograd::Var> {
            let (s, m, w) = (g.constant(fs.clone()), g.constant(memory.clone()), g.constant(readout.clone()));
            let out = dec.decode(g, p, s, m)?;
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        };
        let report = grad_check(&store, &GradCheckOptions { coords_per_param: 4, floor: 1e-5, ..Default::default() }, f).unwrap();
        assert!(report.passes(1e-4), "{layers} layers: {:?}", report.worst());
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (s, m) = (g.constant(fs.clone()), g.constant(memory.clone()));
        let out = dec.decode(&mut g, &p, s, m).unwrap();
        outs.push(g.value(out).clone());
    }
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
}

#[test]
fn single_query_self_attention_is_the_identity_distribution() {
    let d = 16;
    let (store, dec) = l2v(d, 3, 4, 32, 49);
    for m_len in [1, 7, 30] {
        let mut g = Graph::new();
        g.record_attention();
        let p = store.bind(&mut g, false);
        let fs = g.constant(random(&mut rng(50), &[1, 16], 1.0));
        let mem = g.constant(random(&mut rng(51), &[m_len, d], 1.0));
        let out = dec.decode(&mut g, &p, fs, mem).unwrap();
        assert_eq!(g.shape(out), &[1, d]);
        for rec in g.attention_log().iter().filter(|r| r.site.ends_with("/self")) {
            assert_eq!(rec.weights.data(), &[1.0]);
        }
    }
}

#[test]
fn decoder_contract_errors() {
    let d = 16;
    let (store, dec) = l2v(d, 2, 4, 32, 52);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let fs = g.constant(random(&mut rng(53), &[1, 16], 1.0));
    let empty = g.constant(Tensor::zeros(vec![0, d]));
    let err = dec.decode(&mut g, &p, fs, empty).unwrap_err();
    assert!(matches!(err, FanError::Tensor(TensorError::Contract(_))), "{err}");

    let (store0, none) = l2v(d, 0, 4, 32, 54);
    let mut g = Graph::new();
    let p = store0.bind(&mut g, false);
    let fs = g.constant(random(&mut rng(55), &[1, 16], 1.0));
    let mem = g.constant(random(&mut rng(56), &[3, d], 1.0));
    assert!(none.decode(&mut g, &p, fs, mem).is_err());
}
