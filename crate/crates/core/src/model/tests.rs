use std::collections::BTreeMap;

use super::*;
use crate::autodiff::{AdamState, Tape, Tensor};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq: 64, k_latent: 2, seed, ..ModelConfig::default() }
}

fn grid3() -> PatchGrid {
    let mut g = PatchGrid::zeros(3, 3, 10);
    for r in 0..3 {
        for c in 0..3 {
            g.cell_mut(r, c)[(r + c) % 4] = 1.0;
        }
    }
    g
}

fn prompt() -> SequenceLayout {
    let tk = Tokenizer::standard();
    let mut l = SequenceLayout::default();
    l.push_patches(&grid3());
    l.push_text(&tk.encode("<reason> right down ?").unwrap(), LossMask::None);
    l
}

/// Biases the head so `<vstart>` is favoured, giving decodes with latent spans.
fn rig_for_latents(model: &mut Model<f64>, strength: f64) {
    let d = model.config.d_model;
    let v = model.config.vocab_size;
    let bias: Vec<f64> = (0..d).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
    model.params.get_mut("ln_f.bias").unwrap().data_mut().copy_from_slice(&bias);
    let head = model.params.get_mut("head").unwrap().data_mut();
    for (i, b) in bias.iter().enumerate() {
        head[i * v + tok::VSTART] += strength * b / d as f64;
    }
}

#[test]
fn init_is_seeded() {
    let a = Model::<f64>::init(tiny(1)).unwrap();
    let b = Model::<f64>::init(tiny(1)).unwrap();
    let c = Model::<f64>::init(tiny(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
    assert_eq!(ModelConfig::default().head_dim(), 32);
    assert_eq!(a.params.get("layer0.attn.bq").unwrap().data(), &[0.0; 16]);
    assert_eq!(a.params.get("ln_f.gain").unwrap().data(), &[1.0; 16]);
}

#[test]
fn config_rejects_indivisible_heads() {
    let cfg = ModelConfig { n_heads: 3, ..tiny(0) };
    let err = Model::<f64>::init(cfg).unwrap_err().to_string();
    assert!(err.contains("n_heads"), "{err}");
}

#[test]
fn tokenizer_round_trips() {
    let tk = Tokenizer::standard();
    let text = "<think> moving right to ( 0 , 1 ) ice . </think> the answer is \\boxed{ A } . <eos>";
    assert_eq!(tk.decode(&tk.encode(text).unwrap()), text);
    assert_eq!(tk.id("<vstart>").unwrap(), tok::VSTART);
    assert_eq!(tk.id("<vend>").unwrap(), tok::VEND);
    assert_eq!(tk.id("\\boxed{").unwrap(), tok::BOXED);
    assert!(tk.encode("hello").is_err());
}

#[test]
fn embed_paths() {
    let model = Model::<f64>::init(tiny(3)).unwrap();
    let tape = Tape::new();
    let net = model.bind_frozen(&tape).unwrap();
    let d = 16;

    let text = SequenceLayout { elements: vec![SequenceElement::text(7, LossMask::None)], ..Default::default() };
    let e = net.embed_chunk(&text.elements, 0, &[]).unwrap().to_vec();
    let tok_row = &model.params.get("tok_emb").unwrap().data()[7 * d..8 * d];
    let pos_row = &model.params.get("pos_emb").unwrap().data()[..d];
    let expect: Vec<f64> = tok_row.iter().zip(pos_row).map(|(a, b)| a + b).collect();
    assert_eq!(e, expect);

    let mut patches = SequenceLayout::default();
    patches.push_patches(&grid3());
    let e = net.embed_chunk(&patches.elements, 0, &[]).unwrap();
    assert_eq!(e.shape(), vec![9, d]);
    let rows: Vec<Vec<f64>> = (0..9).map(|i| e.to_vec()[i * d..(i + 1) * d].to_vec()).collect();
    for i in 0..9 {
        for j in i + 1..9 {
            assert_ne!(rows[i], rows[j]);
        }
    }

    let mut lat = SequenceLayout::default();
    lat.push_latent_span(2, LossMask::None, LossMask::None);
    let v: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 0.7).collect();
    let w: Vec<f64> = (0..d).map(|i| (i as f64).cos()).collect();
    let vv = tape.constant(vec![1, d], v.clone()).unwrap();
    let wv = tape.constant(vec![1, d], w).unwrap();
    let e = net.embed_chunk(&lat.elements, 5, &[vv, wv]).unwrap().to_vec();
    let pos6 = &model.params.get("pos_emb").unwrap().data()[6 * d..7 * d];
    let expect: Vec<f64> = v.iter().zip(pos6).map(|(a, b)| a + b).collect();
    assert_eq!(&e[d..2 * d], expect.as_slice());

    assert!(net.embed_chunk(&lat.elements, 0, &[vv]).is_err());
    assert!(matches!(net.embed_chunk(&text.elements, 64, &[]), Err(crate::Error::TooLong { .. })));
}

#[test]
fn forward_shapes_and_causality() {
    let model = Model::<f64>::init(tiny(4)).unwrap();
    let layout = prompt();
    let t = layout.len();
    let tape = Tape::new();
    let net = model.bind_frozen(&tape).unwrap();
    let (h, logits) = net.forward(&layout, &[]).unwrap();
    assert_eq!(logits.shape(), vec![t, model.config.vocab_size]);
    let h = h.to_vec();

    let mut changed = layout.clone();
    changed.elements[t - 2] = SequenceElement::text(tok::EOS, LossMask::None);
    let (h2, _) = net.forward(&changed, &[]).unwrap();
    let h2 = h2.to_vec();
    let d = 16;
    assert_eq!(&h[..(t - 2) * d], &h2[..(t - 2) * d]);
    assert_ne!(&h[(t - 2) * d..], &h2[(t - 2) * d..]);

    let mut longer = layout.clone();
    longer.push_text(&[tok::THINK, 20, 21], LossMask::None);
    let (h3, _) = net.forward(&longer, &[]).unwrap();
    for (a, b) in h.iter().zip(h3.to_vec()) {
        assert!((a - b).abs() <= 1e-12);
    }

    let too_long = SequenceLayout { elements: vec![SequenceElement::text(1, LossMask::None); 65], ..Default::default() };
    assert!(matches!(net.forward(&too_long, &[]), Err(crate::Error::TooLong { len: 65, max: 64 })));
}

#[test]
fn future_latent_inputs_get_zero_gradient() {
    let model = Model::<f64>::init(tiny(5)).unwrap();
    let mut layout = prompt();
    layout.push_latent_span(2, LossMask::None, LossMask::None);
    layout.push_text(&[20, 21], LossMask::None);
    let tape = Tape::new();
    let net = model.bind_frozen(&tape).unwrap();
    let l0 = tape.leaf(&Tensor::new(vec![1, 16], vec![0.3; 16]).unwrap().with_grad()).unwrap();
    let l1 = tape.leaf(&Tensor::new(vec![1, 16], vec![-0.2; 16]).unwrap().with_grad()).unwrap();
    let (h, _) = net.forward(&layout, &[l0, l1]).unwrap();
    let first_slot = layout.latent_positions()[0];
    let root = h.rows(first_slot, 1).unwrap().sum().unwrap();
    let g = tape.backward(root).unwrap();
    assert!(g.wrt(l0).iter().any(|&x| x != 0.0));
    assert!(g.wrt(l1).iter().all(|&x| x == 0.0));
}

#[test]
fn chunked_self_generated_matches_single_pass() {
    let model = Model::<f64>::init(tiny(6)).unwrap();
    let mut layout = prompt();
    layout.push_latent_span(2, LossMask::None, LossMask::None);
    layout.push_text(&[20, 21, tok::EOS], LossMask::None);
    let tape = Tape::new();
    let net = model.bind_frozen(&tape).unwrap();
    let chunked = net.run(&layout, LatentSource::SelfGenerated).unwrap();
    assert_eq!(chunked.latent_inputs.len(), 2);
    let slots = layout.latent_positions();
    let hv = chunked.hidden.to_vec();
    for (j, &s) in slots.iter().enumerate() {
        assert_eq!(chunked.latent_inputs[j].to_vec(), hv[(s - 1) * 16..s * 16].to_vec());
    }
    let full = net.run(&layout, LatentSource::Provided(&chunked.latent_inputs)).unwrap();
    for (a, b) in hv.iter().zip(full.hidden.to_vec()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn latent_feedback_is_identity() {
    let tape = Tape::new();
    let v = tape.constant(vec![1, 3], vec![1.5, -2.0, 1e-300]).unwrap();
    let out = latent_feedback(v);
    assert_eq!(out.to_vec(), vec![1.5, -2.0, 1e-300]);
    assert_eq!(out.id(), v.id());
}

#[test]
fn greedy_decode_is_deterministic() {
    let model = Model::<f64>::init(tiny(7)).unwrap();
    let opts = DecodeOptions::greedy(20);
    let a = decode(&model, &prompt(), &opts).unwrap();
    let b = decode(&model, &prompt(), &opts).unwrap();
    assert_eq!(a.layout, b.layout);
    assert_eq!(a.text_logprobs(), b.text_logprobs());
    assert!(a.hit_eos || a.truncated);
}

#[test]
fn decode_latent_spans_are_well_formed() {
    let mut model = Model::<f64>::init(tiny(8)).unwrap();
    rig_for_latents(&mut model, 40.0);
    let k = model.config.k_latent;
    let mut spans = 0;
    for seed in 0..10 {
        let opts = DecodeOptions { max_new: 30, mode: DecodeMode::Sample { temperature: 1.0 }, seed };
        let tr = decode(&model, &prompt(), &opts).unwrap();
        tr.layout.validate(k).unwrap_or_else(|e| {
            // a span cut by max_new is the only allowed break
            assert!(tr.truncated, "{e}");
        });
        assert_eq!(tr.latent_vocab_projections, 0);
        assert_eq!(tr.latent_inputs, tr.latent_sources);
        let logps = tr.text_logprobs().len();
        let texts = tr.layout.elements[tr.prompt_len..].iter().filter(|e| !e.is_latent()).count();
        let forced = tr.steps.iter().filter(|s| **s == DecodeStep::ForcedEnd).count();
        assert_eq!(logps + forced, texts);
        spans += forced;
    }
    assert!(spans > 5, "rigged model produced only {spans} spans");
}

#[test]
fn decode_replay_reproduces_hidden_states() {
    let mut model = Model::<f64>::init(tiny(9)).unwrap();
    rig_for_latents(&mut model, 40.0);
    let tr = decode(&model, &prompt(), &DecodeOptions::greedy(12)).unwrap();
    assert!(!tr.latent_inputs.is_empty());
    let tape = Tape::new();
    let net = model.bind_frozen(&tape).unwrap();
    let out = net.run(&tr.layout, LatentSource::SelfGenerated).unwrap();
    for (j, v) in out.latent_inputs.iter().enumerate() {
        for (a, b) in v.to_vec().iter().zip(&tr.latent_sources[j]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn decode_rejects_bad_prompts() {
    let model = Model::<f64>::init(tiny(10)).unwrap();
    let mut p = prompt();
    p.push_latent_span(2, LossMask::None, LossMask::None);
    p.elements.pop();
    assert!(decode(&model, &p, &DecodeOptions::greedy(5)).is_err());
    let opts = DecodeOptions { max_new: 5, mode: DecodeMode::Sample { temperature: 0.0 }, seed: 0 };
    assert!(decode(&model, &prompt(), &opts).is_err());
}

#[test]
fn greedy_tie_break_prefers_lowest_id() {
    assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax_lowest(&[0.0; 4]), 0);
    let lp = scaled_log_softmax(&[0.0, 0.0], 0.5);
    assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::<f64>::init(tiny(11)).unwrap();
    let mut adam = AdamState::new(&model.params);
    adam.t = 7;
    adam.m[0][3] = 0.125;
    adam.v[2][1] = 1e-300;
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), "1".to_string());
    let ck = Checkpoint::from_model(&model, Some(&adam), meta);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"MRGE");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.model::<f64>().unwrap(), model);

    let plain = Checkpoint::from_model(&model, None, BTreeMap::new());
    assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn layout_validation() {
    let mut l = prompt();
    l.push_latent_span(2, LossMask::Text, LossMask::Latent);
    l.validate(2).unwrap();
    assert!(l.validate(3).is_err());
    assert_eq!(l.latent_prediction_rows(), vec![l.len() - 4, l.len() - 3]);
    let mut broken = l.clone();
    broken.elements.pop();
    assert!(broken.validate(2).is_err());
    let mut shuffled = prompt();
    shuffled.elements.swap(1, 2);
    assert!(shuffled.validate(2).is_err());
}

#[test]
fn f32_model_runs() {
    let model = Model::<f32>::init(tiny(12)).unwrap();
    let tr = decode(&model, &prompt(), &DecodeOptions::greedy(5)).unwrap();
    assert_eq!(tr.steps.len(), tr.layout.len() - tr.prompt_len);
}
