use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sticker_core::encoders::{EncoderConfig, ImageEncoder, TextEncoder};
use sticker_core::nn::{ForwardCtx, Init, ParamStore};
use sticker_core::numcore::{Tape, Tensor};

fn cfg() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 50,
        max_text_len: 12,
        patch_grid: 2,
        patch_dim: 3,
        ..Default::default()
    }
}

fn pixels(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(4 * n, 3, (0..12 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn stacked_images_encode_as_if_alone() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, &mut Init { rng: ChaCha8Rng::seed_from_u64(1) }, &cfg());
    let stack = pixels(3, 9);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.leaf(stack.clone(), false);
    let all = enc.encode_stacked(&mut tape, &p, &mut ForwardCtx::eval(), x).unwrap();
    let all = tape.value(all).clone();
    assert_eq!(all.dims2(), (3 * enc.seq_len(), 8));
    for b in 0..3 {
        let one = Tensor::matrix(4, 3, stack.data()[12 * b..12 * (b + 1)].to_vec());
        let x = tape.leaf(one, false);
        let y = enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), x).unwrap();
        let want = &all.data()[b * 5 * 8..(b + 1) * 5 * 8];
        assert!(close(tape.value(y).data(), want), "sticker {b}");
    }
}

#[test]
fn intention_rows_match_separate_encodings() {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &mut Init { rng: ChaCha8Rng::seed_from_u64(2) }, &cfg());
    let seqs = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9], vec![10, 11, 12]];
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let rows = enc.encode_intention(&mut tape, &p, &mut ForwardCtx::eval(), &seqs).unwrap();
    let rows = tape.value(rows).clone();
    for (i, s) in seqs.iter().enumerate() {
        let y = enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), s).unwrap();
        assert!(close(tape.value(y).row(0), rows.row(i)), "relation {i}");
    }
    let ragged = vec![vec![1, 2], vec![4, 5, 6], vec![7], vec![10, 11, 12]];
    let r = enc.encode_intention(&mut tape, &p, &mut ForwardCtx::eval(), &ragged).unwrap();
    assert_eq!(tape.value(r).dims2(), (4, 8));
}

#[test]
fn text_encoding_is_deterministic_and_validates_input() {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &mut Init { rng: ChaCha8Rng::seed_from_u64(3) }, &cfg());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a = enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), &[3, 1, 4]).unwrap();
    let b = enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), &[3, 1, 4]).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.value(a).dims2(), (4, 8));
    assert!(enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), &[50]).is_err());
    assert!(enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), &[1; 13]).is_err());
}

#[test]
fn gradients_reach_used_tokens_only() {
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &mut Init { rng: ChaCha8Rng::seed_from_u64(4) }, &cfg());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let y = enc.encode(&mut tape, &p, &mut ForwardCtx::eval(), &[5, 7]).unwrap();
    let cls = tape.slice_rows(y, 0, 1).unwrap();
    let sq = tape.mul(cls, cls).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    let id = store.find("text.tokens").expect("token table");
    let g = grads.get_or_zeros(p.var(id), store.get(id).numel());
    let row = |t: usize| &g[t * 8..(t + 1) * 8];
    assert!(row(5).iter().any(|&x| x != 0.0));
    assert!(row(7).iter().any(|&x| x != 0.0));
    assert!(row(6).iter().all(|&x| x == 0.0));
}
