use super::model::{bilinear_matrix, patchify};
use super::*;
use crate::rng::RngState;
use proptest::prelude::*;

fn micro_params(seed: u64) -> (EncoderConfig, ParamSet<f64>) {
    let cfg = EncoderConfig::micro();
    let p = init_params(&cfg, &mut RngState::new(seed).stream("init", 0));
    (cfg, p)
}

fn image(side: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed;
    let data = (0..side * side * c)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect();
    Tensor::from_vec(&[side, side, c], data).unwrap()
}

#[test]
fn eight_pixel_image_gives_four_tokens() {
    let (cfg, p) = micro_params(1);
    let seq = tokenize(&cfg, &p, &image(8, 3, 2)).unwrap();
    assert_eq!(seq.n, 4);
    assert_eq!(seq.tokens.shape(), &[5, 8]);
    assert_eq!(seq.tokens.row(0), p["cls_token"].data());
}

#[test]
fn wrong_channel_count_is_a_config_error() {
    let (cfg, p) = micro_params(1);
    let err = tokenize(&cfg, &p, &image(8, 1, 2)).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}

#[test]
fn patch_embedding_is_a_pixel_permutation_under_identity_weights() {
    let cfg = EncoderConfig {
        embed_dim: 48,
        heads: 1,
        ..EncoderConfig::micro()
    };
    let mut p = init_params::<f64>(&cfg, &mut RngState::new(0).stream("init", 0));
    let mut eye = vec![0.0; 48 * 48];
    (0..48).for_each(|i| eye[i * 48 + i] = 1.0);
    p.insert(
        "patch_embed.weight".into(),
        Tensor::from_vec(&[48, 48], eye).unwrap(),
    );
    let img = image(8, 3, 9);
    let seq = tokenize(&cfg, &p, &img).unwrap();
    for gy in 0..2 {
        for gx in 0..2 {
            let row = seq.tokens.row(1 + gy * 2 + gx);
            let mut j = 0;
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..3 {
                        let want = img.data()[((gy * 4 + y) * 8 + gx * 4 + x) * 3 + c];
                        assert_eq!(row[j], want);
                        j += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn patchify_keeps_every_pixel_once() {
    let px: Vec<u32> = (0..16 * 16 * 2).collect();
    let mut out = Vec::new();
    patchify(&px, 16, 2, 4, &mut out);
    let mut sorted = out.clone();
    sorted.sort();
    assert_eq!(sorted, px);
}

#[test]
fn bilinear_halving_averages_two_by_two_blocks() {
    let m = bilinear_matrix(4, 2);
    let src: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
    for oy in 0..2 {
        for ox in 0..2 {
            let got: f64 = (0..16).map(|c| m[(oy * 2 + ox) * 16 + c] * src[c]).sum();
            let want = [0, 1]
                .iter()
                .flat_map(|dy| [0, 1].map(|dx| src[(2 * oy + dy) * 4 + 2 * ox + dx]))
                .sum::<f64>()
                / 4.0;
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_same_size_is_identity() {
    let m = bilinear_matrix(3, 3);
    for r in 0..9 {
        for c in 0..9 {
            assert_eq!(m[r * 9 + c], if r == c { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn position_table_resized_for_local_grid() {
    let (cfg, p) = micro_params(3);
    let seq = TokenSequence::new(Tensor::<f64>::zeros(&[2, 8])).unwrap();
    let out = add_position_embeddings(&cfg, &p, &seq, 1).unwrap();
    let table = &p["pos_embed"];
    assert_eq!(out.tokens.row(0), table.row(0));
    for c in 0..8 {
        let mean = (1..5).map(|r| table.at(r, c)).sum::<f64>() / 4.0;
        assert!((out.tokens.at(1, c) - mean).abs() < 1e-12);
    }
}

#[test]
fn non_square_token_count_is_unsupported() {
    let (cfg, p) = micro_params(3);
    let seq = TokenSequence::new(Tensor::<f64>::zeros(&[4, 8])).unwrap();
    assert!(matches!(
        add_position_embeddings(&cfg, &p, &seq, 2),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn zero_depth_encoder_is_identity() {
    let cfg = EncoderConfig {
        depth: 0,
        ..EncoderConfig::micro()
    };
    let p = init_params::<f64>(&cfg, &mut RngState::new(4).stream("init", 0));
    let seq = tokenize(&cfg, &p, &image(8, 3, 5)).unwrap();
    let (out, rec) = encoder_forward(&cfg, &p, &seq, true).unwrap();
    assert_eq!(out.tokens, seq.tokens);
    assert_eq!(rec.unwrap().depth(), 0);
}

fn layer_norm_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter().map(|a| (a - m) / (v + 1e-6).sqrt()).collect()
        })
        .collect()
}

#[test]
fn captured_attention_matches_hand_computation() {
    let (cfg, p) = micro_params(6);
    let seq = tokenize(&cfg, &p, &image(8, 3, 7)).unwrap();
    let seq = add_position_embeddings(&cfg, &p, &seq, 2).unwrap();
    let (_, rec) = encoder_forward(&cfg, &p, &seq, true).unwrap();
    let rec = rec.unwrap();

    // First layer by hand: gains are 1 and biases 0 at init.
    let x: Vec<Vec<f64>> = (0..5).map(|r| seq.tokens.row(r).to_vec()).collect();
    let h = layer_norm_rows(&x);
    let w = &p["blocks.00.attn.qkv.weight"];
    let qkv: Vec<Vec<f64>> = h
        .iter()
        .map(|r| {
            (0..24)
                .map(|j| (0..8).map(|i| r[i] * w.at(i, j)).sum())
                .collect()
        })
        .collect();
    let dh = 4;
    for head in 0..2 {
        let m = rec.matrix(1, 0, head).unwrap();
        for i in 0..5 {
            let s: Vec<f64> = (0..5)
                .map(|j| {
                    (0..dh)
                        .map(|c| qkv[i][head * dh + c] * qkv[j][8 + head * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|a| (a - mx).exp()).sum();
            for j in 0..5 {
                assert!((m[i * 5 + j] - (s[j] - mx).exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cls_attention_averages_heads() {
    let mut rec = AttentionRecord::<f64>::empty(1, 1, 2, 3);
    rec.layers[0] = Some(vec![
        0.2, 0.3, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, //
        0.6, 0.1, 0.3, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0,
    ]);
    let a = cls_attention(&rec, 0, 1).unwrap();
    assert_eq!(a.layer, 1);
    assert!((a.values[0] - 0.2).abs() < 1e-15);
    assert!((a.values[1] - 0.4).abs() < 1e-15);
    let mean = rec.mean_matrix(1, 0).unwrap();
    assert!((mean[0] - 0.4).abs() < 1e-15);
}

#[test]
fn uncaptured_layer_is_a_state_error() {
    let (cfg, p) = micro_params(1);
    let img = image(8, 3, 1);
    let mut tape = Tape::new();
    let mut bound = Bound::new(&p);
    let (_, rec) = Vit::new(&cfg)
        .embed_and_encode(
            &mut tape,
            &mut bound,
            img.data(),
            8,
            None,
            Capture::Layer(2),
        )
        .unwrap();
    assert!(cls_attention(&rec, 0, 2).is_ok());
    assert!(matches!(cls_attention(&rec, 0, 1), Err(Error::State(_))));
    assert!(matches!(
        cls_attention(&rec, 0, 3),
        Err(Error::Range { .. })
    ));
}

#[test]
fn attention_rows_are_distributions() {
    let (cfg, p) = micro_params(11);
    let seq = tokenize(&cfg, &p, &image(8, 3, 12)).unwrap();
    let (_, rec) = encoder_forward(&cfg, &p, &seq, true).unwrap();
    let rec = rec.unwrap();
    for l in 1..=2 {
        for h in 0..2 {
            for row in rec.matrix(l, 0, h).unwrap().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }
}

#[test]
fn f32_attention_rows_sum_to_one_within_1e6() {
    let cfg = EncoderConfig::default();
    let p = init_params::<f32>(&cfg, &mut RngState::new(2).stream("init", 0));
    let img = image(32, 3, 3).cast::<f32>();
    let seq = tokenize(&cfg, &p, &img).unwrap();
    let seq = add_position_embeddings(&cfg, &p, &seq, 8).unwrap();
    let (_, rec) = encoder_forward(&cfg, &p, &seq, true).unwrap();
    let rec = rec.unwrap();
    for l in 1..=cfg.depth {
        for h in 0..cfg.heads {
            for row in rec.matrix(l, 0, h).unwrap().chunks(65) {
                let s: f64 = row.iter().map(|&a| a as f64).sum();
                assert!((s - 1.0).abs() <= 1e-6, "{s}");
            }
        }
    }
}

#[test]
fn head_output_rows_are_distributions_and_center_shift_cancels() {
    let (cfg, p) = micro_params(8);
    let seq = tokenize(&cfg, &p, &image(8, 3, 9)).unwrap();
    let (out, _) = encoder_forward(&cfg, &p, &seq, false).unwrap();
    let out = final_norm(&cfg, &p, &out).unwrap();
    let a = head_forward(&cfg, &p, &out, 0.1, None).unwrap();
    let shift = vec![0.37; cfg.out_dim];
    let b = head_forward(&cfg, &p, &out, 0.1, Some(&shift)).unwrap();
    assert!((a.cls_probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let pa = a.patch_probs.unwrap();
    assert_eq!(pa.shape(), &[4, cfg.out_dim]);
    for (x, y) in pa.data().iter().zip(b.patch_probs.unwrap().data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(head_forward(&cfg, &p, &out, 0.0, None).is_err());
}

#[test]
fn high_temperature_flattens_head_output() {
    let (cfg, p) = micro_params(8);
    let seq = tokenize(&cfg, &p, &image(8, 3, 9)).unwrap();
    let out = head_forward(&cfg, &p, &seq, 1e9, None).unwrap();
    for &v in out.cls_probs.data() {
        assert!((v - 1.0 / cfg.out_dim as f64).abs() < 1e-9);
    }
}

#[test]
fn gap_is_mean_of_patch_rows() {
    let t = Tensor::<f64>::from_rows(&[&[9.0, 9.0], &[1.0, 2.0], &[3.0, 6.0]]);
    let seq = TokenSequence::new(t).unwrap();
    assert_eq!(gap_features(&seq).data(), &[2.0, 4.0]);
}

#[test]
fn batched_forward_matches_single_sequences() {
    let (cfg, p) = micro_params(21);
    let (a, b) = (image(8, 3, 1), image(8, 3, 2));
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let mut tape = Tape::new();
    let mut bound = Bound::new(&p);
    let (batch, _) = Vit::new(&cfg)
        .embed_and_encode(&mut tape, &mut bound, &both, 8, None, Capture::None)
        .unwrap();
    let joint = tape.value(batch.tokens);
    for (s, img) in [a, b].iter().enumerate() {
        let seq = tokenize(&cfg, &p, img).unwrap();
        let seq = add_position_embeddings(&cfg, &p, &seq, 2).unwrap();
        let (out, _) = encoder_forward(&cfg, &p, &seq, false).unwrap();
        for (x, y) in out
            .tokens
            .data()
            .iter()
            .zip(&joint.data()[s * 40..(s + 1) * 40])
        {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_is_equivariant_to_patch_permutation(seed in 0u64..1000, perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let (cfg, p) = micro_params(seed);
        let seq = tokenize(&cfg, &p, &image(8, 3, seed + 1)).unwrap();
        let mut rows: Vec<f64> = seq.tokens.row(0).to_vec();
        for &i in &perm {
            rows.extend_from_slice(seq.tokens.row(1 + i));
        }
        let permuted = TokenSequence::new(Tensor::from_vec(&[5, 8], rows).unwrap()).unwrap();
        let (a, _) = encoder_forward(&cfg, &p, &seq, false).unwrap();
        let (b, _) = encoder_forward(&cfg, &p, &permuted, false).unwrap();
        for c in 0..8 {
            prop_assert!((a.tokens.at(0, c) - b.tokens.at(0, c)).abs() < 1e-10);
        }
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((a.tokens.at(1 + i, c) - b.tokens.at(1 + k, c)).abs() < 1e-10);
            }
        }
    }
}
