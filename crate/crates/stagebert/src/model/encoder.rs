//! Forward and backward passes of the encoder stack.
//!
//! The forward pass can record a trace (every intermediate the backward
//! pass needs); `encode_backward` then unwinds the stack in reverse and
//! accumulates parameter gradients into the slots. Gradients add up across
//! calls, so a batch is processed by running one traced forward/backward
//! per example and stepping the optimizer once at the end.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    add_row_bias, col_sums, dropout_backward, dropout_forward, embedding_backward,
    embedding_lookup, gelu, gelu_backward, layer_norm_backward, layer_norm_forward, matmul,
    matmul_backward, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, LayerNormCache,
};
use crate::rng::{stream, stream_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::EncodedInput;

use super::{EncoderParams, LAYER_NORM_EPS};

/// Contextual embeddings `[n, d]` of one encoded input.
#[derive(Clone, Debug)]
pub struct ContextualSequence<T> {
    hidden: Tensor<T>,
}

impl<T: Scalar> ContextualSequence<T> {
    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }

    /// Contextual embedding of the leading `[CLS]` token; the task heads
    /// read only this row.
    pub fn cls_vector(&self) -> &[T] {
        self.hidden.row(0)
    }

    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }
}

struct EmbedTrace<T> {
    ln: LayerNormCache<T>,
    drop: Option<Vec<T>>,
}

struct LayerTrace<T> {
    /// Layer input `[n, d]`.
    x_in: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Post-softmax attention probabilities, one `[n, n]` matrix per head.
    probs: Vec<Tensor<T>>,
    /// Dropout scale masks applied to the probabilities, per head.
    attn_drop: Vec<Option<Vec<T>>>,
    /// Concatenated head outputs `[n, d]` (input of the output projection).
    ctx: Tensor<T>,
    ln1: LayerNormCache<T>,
    /// Output of the post-attention layer norm `[n, d]`.
    x1: Tensor<T>,
    /// Feed-forward pre-activations `[n, f]`.
    h1: Tensor<T>,
    /// Feed-forward activations `[n, f]`.
    g1: Tensor<T>,
    ffn_drop: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

/// Everything the backward pass needs, recorded by [`encode_traced`].
pub struct EncoderTrace<T> {
    embed: EmbedTrace<T>,
    layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Post-softmax attention probabilities of one head: `[n, n]`, rows are
    /// query positions. Panics on out-of-range indices.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &Tensor<T> {
        &self.layers[layer].probs[head]
    }
}

/// Runs the encoder in evaluation mode (no dropout, no trace).
pub fn encode<T: Scalar>(
    params: &EncoderParams<T>,
    input: &EncodedInput,
) -> Result<ContextualSequence<T>> {
    // Evaluation-mode dropout draws nothing, so this rng is never touched.
    let mut rng = stream_rng(0, stream::DROPOUT);
    let (seq, _) = encode_traced(params, input, false, &mut rng)?;
    Ok(seq)
}

/// Runs the encoder and records the trace for [`encode_backward`].
///
/// With `training` set, dropout is applied at its three sites (embedding
/// output, attention probabilities, feed-forward output) drawing from `rng`;
/// otherwise the pass is deterministic and `rng` is left untouched.
pub fn encode_traced<T: Scalar>(
    params: &EncoderParams<T>,
    input: &EncodedInput,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ContextualSequence<T>, EncoderTrace<T>)> {
    let cfg = params.config();
    let n = input.len();
    if n == 0 {
        return Err(Error::Data("cannot encode an empty input".into()));
    }
    if n > cfg.max_positions {
        return Err(Error::Shape {
            op: "encode",
            details: format!("input length {n} exceeds max_positions {}", cfg.max_positions),
        });
    }
    if input.segments.len() != n || input.mask.len() != n {
        return Err(Error::Shape {
            op: "encode",
            details: format!(
                "{n} ids vs {} segments / {} mask entries",
                input.segments.len(),
                input.mask.len()
            ),
        });
    }
    let p = params.params();
    let keep = T::of_f64(cfg.dropout_keep);
    let eps = T::of_f64(LAYER_NORM_EPS);

    // Lexicon encoder: summed word/position/segment embeddings, normalized
    // and (in training) dropped out.
    let mut summed = embedding_lookup(p.value("emb.word"), &input.ids)?;
    let pos_ids: Vec<u32> = (0..n as u32).collect();
    summed.add_assign(&embedding_lookup(p.value("emb.pos"), &pos_ids)?)?;
    let seg_ids: Vec<u32> = input.segments.iter().map(|&s| u32::from(s)).collect();
    summed.add_assign(&embedding_lookup(p.value("emb.seg"), &seg_ids)?)?;
    let (normed, emb_ln) =
        layer_norm_forward(&summed, p.value("emb.ln.gain"), p.value("emb.ln.bias"), eps)?;
    let (mut x, emb_drop) = dropout_forward(&normed, keep, training, rng);

    // Additive attention bias per key: 0 on real tokens, -inf on padding,
    // so padded positions get exactly zero attention everywhere.
    let key_bias: Vec<T> = input
        .mask
        .iter()
        .map(|&m| if m == 0 { T::neg_infinity() } else { T::zero() })
        .collect();

    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.num_layers);

    for i in 0..cfg.num_layers {
        let name = |s: &str| format!("layer{i}.{s}");
        let x_in = x;

        let q = add_row_bias(
            &matmul(&x_in, p.value(&name("attn.wq")))?,
            p.value(&name("attn.bq")),
        )?;
        let k = add_row_bias(
            &matmul(&x_in, p.value(&name("attn.wk")))?,
            p.value(&name("attn.bk")),
        )?;
        let v = add_row_bias(
            &matmul(&x_in, p.value(&name("attn.wv")))?,
            p.value(&name("attn.bv")),
        )?;

        let mut ctx = Tensor::zeros(&[n, cfg.hidden_size]);
        let mut probs_all = Vec::with_capacity(heads);
        let mut drops = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = extract_cols(&q, h * dh, dh);
            let kh = extract_cols(&k, h * dh, dh);
            let vh = extract_cols(&v, h * dh, dh);
            let mut scores = matmul_nt(&qh, &kh)?;
            for r in 0..n {
                let row = scores.row_mut(r);
                for (s, &b) in row.iter_mut().zip(&key_bias) {
                    *s = *s * scale + b;
                }
            }
            let probs = softmax_rows(&scores);
            let (probs_used, drop) = dropout_forward(&probs, keep, training, rng);
            let ctx_h = matmul(&probs_used, &vh)?;
            add_into_cols(&mut ctx, h * dh, &ctx_h);
            probs_all.push(probs);
            drops.push(drop);
        }

        let attn_out = add_row_bias(
            &matmul(&ctx, p.value(&name("attn.wo")))?,
            p.value(&name("attn.bo")),
        )?;
        let mut res1 = x_in.clone();
        res1.add_assign(&attn_out)?;
        let (x1, ln1) = layer_norm_forward(
            &res1,
            p.value(&name("attn.ln.gain")),
            p.value(&name("attn.ln.bias")),
            eps,
        )?;

        let h1 = add_row_bias(
            &matmul(&x1, p.value(&name("ffn.w1")))?,
            p.value(&name("ffn.b1")),
        )?;
        let g1 = gelu(&h1);
        let o2 = add_row_bias(
            &matmul(&g1, p.value(&name("ffn.w2")))?,
            p.value(&name("ffn.b2")),
        )?;
        let (o2_dropped, ffn_drop) = dropout_forward(&o2, keep, training, rng);
        let mut res2 = x1.clone();
        res2.add_assign(&o2_dropped)?;
        let (x2, ln2) = layer_norm_forward(
            &res2,
            p.value(&name("ffn.ln.gain")),
            p.value(&name("ffn.ln.bias")),
            eps,
        )?;

        layers.push(LayerTrace {
            x_in,
            q,
            k,
            v,
            probs: probs_all,
            attn_drop: drops,
            ctx,
            ln1,
            x1,
            h1,
            g1,
            ffn_drop,
            ln2,
        });
        x = x2;
    }

    Ok((
        ContextualSequence { hidden: x },
        EncoderTrace {
            embed: EmbedTrace {
                ln: emb_ln,
                drop: emb_drop,
            },
            layers,
        },
    ))
}

/// Backpropagates `d_hidden` (gradient of the loss with respect to the
/// encoder output `[n, d]`) through the trace, accumulating parameter
/// gradients into `params`.
pub fn encode_backward<T: Scalar>(
    params: &mut EncoderParams<T>,
    input: &EncodedInput,
    trace: &EncoderTrace<T>,
    d_hidden: &Tensor<T>,
) -> Result<()> {
    let cfg = params.config().clone();
    let n = input.len();
    let d = cfg.hidden_size;
    if d_hidden.shape() != [n, d] {
        return Err(Error::Shape {
            op: "encode_backward",
            details: format!("d_hidden {:?} vs expected [{n}, {d}]", d_hidden.shape()),
        });
    }
    if trace.layers.len() != cfg.num_layers {
        return Err(Error::Shape {
            op: "encode_backward",
            details: format!(
                "trace has {} layers, config has {}",
                trace.layers.len(),
                cfg.num_layers
            ),
        });
    }
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());

    let mut d_x = d_hidden.clone();
    for (i, tr) in trace.layers.iter().enumerate().rev() {
        let name = |s: &str| format!("layer{i}.{s}");

        // Feed-forward layer norm.
        let mut d_gain = Tensor::zeros(&[d]);
        let mut d_bias = Tensor::zeros(&[d]);
        let d_res2 = layer_norm_backward(
            &tr.ln2,
            params.params().value(&name("ffn.ln.gain")),
            &d_x,
            &mut d_gain,
            &mut d_bias,
        );
        params.params_mut().add_grad(&name("ffn.ln.gain"), &d_gain)?;
        params.params_mut().add_grad(&name("ffn.ln.bias"), &d_bias)?;

        // Feed-forward block; the residual copy of d_res2 flows to x1.
        let d_o2 = dropout_backward(&tr.ffn_drop, &d_res2);
        let (d_g1, d_w2) = matmul_backward(&tr.g1, params.params().value(&name("ffn.w2")), &d_o2)?;
        params.params_mut().add_grad(&name("ffn.w2"), &d_w2)?;
        params.params_mut().add_grad(&name("ffn.b2"), &col_sums(&d_o2))?;
        let d_h1 = gelu_backward(&tr.h1, &d_g1);
        let (d_x1_ffn, d_w1) =
            matmul_backward(&tr.x1, params.params().value(&name("ffn.w1")), &d_h1)?;
        params.params_mut().add_grad(&name("ffn.w1"), &d_w1)?;
        params.params_mut().add_grad(&name("ffn.b1"), &col_sums(&d_h1))?;
        let mut d_x1 = d_res2;
        d_x1.add_assign(&d_x1_ffn)?;

        // Post-attention layer norm.
        let mut d_gain = Tensor::zeros(&[d]);
        let mut d_bias = Tensor::zeros(&[d]);
        let d_res1 = layer_norm_backward(
            &tr.ln1,
            params.params().value(&name("attn.ln.gain")),
            &d_x1,
            &mut d_gain,
            &mut d_bias,
        );
        params.params_mut().add_grad(&name("attn.ln.gain"), &d_gain)?;
        params.params_mut().add_grad(&name("attn.ln.bias"), &d_bias)?;

        // Output projection; the residual copy of d_res1 flows to x_in.
        let (d_ctx, d_wo) =
            matmul_backward(&tr.ctx, params.params().value(&name("attn.wo")), &d_res1)?;
        params.params_mut().add_grad(&name("attn.wo"), &d_wo)?;
        params.params_mut().add_grad(&name("attn.bo"), &col_sums(&d_res1))?;

        // Per-head attention backward.
        let mut d_q = Tensor::zeros(&[n, d]);
        let mut d_k = Tensor::zeros(&[n, d]);
        let mut d_v = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            let d_ctx_h = extract_cols(&d_ctx, h * dh, dh);
            let vh = extract_cols(&tr.v, h * dh, dh);
            let probs = &tr.probs[h];
            let drop = &tr.attn_drop[h];
            // ctx_h = dropout(probs) · vh
            let probs_used = match drop {
                None => probs.clone(),
                Some(m) => {
                    let mut t = probs.clone();
                    for (v, &s) in t.data_mut().iter_mut().zip(m.iter()) {
                        *v = *v * s;
                    }
                    t
                }
            };
            let (d_probs_used, d_vh) = matmul_backward(&probs_used, &vh, &d_ctx_h)?;
            let d_probs = dropout_backward(drop, &d_probs_used);
            // The additive key bias is constant, so it drops out here; the
            // masked columns have zero probability and get zero gradient.
            let mut d_scores = softmax_rows_backward(probs, &d_probs);
            d_scores.scale(scale);
            let qh = extract_cols(&tr.q, h * dh, dh);
            let kh = extract_cols(&tr.k, h * dh, dh);
            let d_qh = matmul(&d_scores, &kh)?;
            let d_kh = matmul_tn(&d_scores, &qh)?;
            add_into_cols(&mut d_q, h * dh, &d_qh);
            add_into_cols(&mut d_k, h * dh, &d_kh);
            add_into_cols(&mut d_v, h * dh, &d_vh);
        }

        // Input projections.
        let (d_x_q, d_wq) =
            matmul_backward(&tr.x_in, params.params().value(&name("attn.wq")), &d_q)?;
        params.params_mut().add_grad(&name("attn.wq"), &d_wq)?;
        params.params_mut().add_grad(&name("attn.bq"), &col_sums(&d_q))?;
        let (d_x_k, d_wk) =
            matmul_backward(&tr.x_in, params.params().value(&name("attn.wk")), &d_k)?;
        params.params_mut().add_grad(&name("attn.wk"), &d_wk)?;
        params.params_mut().add_grad(&name("attn.bk"), &col_sums(&d_k))?;
        let (d_x_v, d_wv) =
            matmul_backward(&tr.x_in, params.params().value(&name("attn.wv")), &d_v)?;
        params.params_mut().add_grad(&name("attn.wv"), &d_wv)?;
        params.params_mut().add_grad(&name("attn.bv"), &col_sums(&d_v))?;

        let mut d_x_in = d_res1;
        d_x_in.add_assign(&d_x_q)?;
        d_x_in.add_assign(&d_x_k)?;
        d_x_in.add_assign(&d_x_v)?;
        d_x = d_x_in;
    }

    // Lexicon encoder.
    let d_normed = dropout_backward(&trace.embed.drop, &d_x);
    let mut d_gain = Tensor::zeros(&[d]);
    let mut d_bias = Tensor::zeros(&[d]);
    let d_summed = layer_norm_backward(
        &trace.embed.ln,
        params.params().value("emb.ln.gain"),
        &d_normed,
        &mut d_gain,
        &mut d_bias,
    );
    params.params_mut().add_grad("emb.ln.gain", &d_gain)?;
    params.params_mut().add_grad("emb.ln.bias", &d_bias)?;
    embedding_backward(
        &input.ids,
        &d_summed,
        &mut params.params_mut().slot_mut("emb.word").grad,
    );
    let pos_ids: Vec<u32> = (0..n as u32).collect();
    embedding_backward(
        &pos_ids,
        &d_summed,
        &mut params.params_mut().slot_mut("emb.pos").grad,
    );
    let seg_ids: Vec<u32> = input.segments.iter().map(|&s| u32::from(s)).collect();
    embedding_backward(
        &seg_ids,
        &d_summed,
        &mut params.params_mut().slot_mut("emb.seg").grad,
    );
    Ok(())
}

/// Copies columns `[start, start + width)` of `src` into a new tensor.
fn extract_cols<T: Scalar>(src: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let n = src.rows();
    let mut out = Tensor::zeros(&[n, width]);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&src.row(i)[start..start + width]);
    }
    out
}

/// Adds `src` into columns `[start, start + src.cols())` of `dst`.
fn add_into_cols<T: Scalar>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let width = src.cols();
    for i in 0..src.rows() {
        let row = &mut dst.row_mut(i)[start..start + width];
        for (a, &b) in row.iter_mut().zip(src.row(i)) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{encode_pair, tokenize};

    fn encode_text(vocab: &crate::tokenizer::Vocab, text: &str, max_len: usize) -> EncodedInput {
        let tokens = tokenize(text, vocab);
        encode_pair(&tokens, None, vocab, max_len).unwrap()
    }

    #[test]
    fn zero_layer_encoder_is_the_normalized_embedding() {
        let vocab = tiny_vocab();
        let mut cfg = tiny_config(vocab.size());
        cfg.num_layers = 0;
        let enc = EncoderParams::<f64>::init(cfg, 3).unwrap();
        let input = encode_text(&vocab, "the cat sat", 8);

        let seq = encode(&enc, &input).unwrap();

        let p = enc.params();
        let mut summed = embedding_lookup(p.value("emb.word"), &input.ids).unwrap();
        let pos: Vec<u32> = (0..input.len() as u32).collect();
        summed
            .add_assign(&embedding_lookup(p.value("emb.pos"), &pos).unwrap())
            .unwrap();
        let seg: Vec<u32> = input.segments.iter().map(|&s| u32::from(s)).collect();
        summed
            .add_assign(&embedding_lookup(p.value("emb.seg"), &seg).unwrap())
            .unwrap();
        let (expect, _) = layer_norm_forward(
            &summed,
            p.value("emb.ln.gain"),
            p.value("emb.ln.bias"),
            1e-12,
        )
        .unwrap();
        for (a, b) in seq.hidden().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_vector_ignores_padding_length() {
        let vocab = tiny_vocab();
        let enc = EncoderParams::<f64>::init(tiny_config(vocab.size()), 7).unwrap();
        let short = encode_text(&vocab, "a big dog sat", 8);
        let long = encode_text(&vocab, "a big dog sat", 16);
        assert!(long.len() > short.len());

        let a = encode(&enc, &short).unwrap();
        let b = encode(&enc, &long).unwrap();
        for (x, y) in a.cls_vector().iter().zip(b.cls_vector()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_rows_are_distributions_and_skip_padding() {
        let vocab = tiny_vocab();
        let enc = EncoderParams::<f64>::init(tiny_config(vocab.size()), 1).unwrap();
        let input = encode_text(&vocab, "the dog ran", 12);
        let real = input.real_len();
        assert!(real < input.len(), "need actual padding for this test");

        let mut rng = stream_rng(0, stream::DROPOUT);
        let (_, trace) = encode_traced(&enc, &input, false, &mut rng).unwrap();
        for layer in 0..trace.num_layers() {
            for head in 0..enc.config().num_heads {
                let probs = trace.attention_probs(layer, head);
                for r in 0..probs.rows() {
                    let sum: f64 = probs.row(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
                    for j in real..input.len() {
                        assert_eq!(probs.at2(r, j), 0.0, "padded key {j} attended");
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_draws_only_in_training_mode() {
        let vocab = tiny_vocab();
        let mut cfg = tiny_config(vocab.size());
        cfg.dropout_keep = 0.5;
        let enc = EncoderParams::<f64>::init(cfg, 2).unwrap();
        let input = encode_text(&vocab, "the cat sat on the mat", 12);

        let mut rng_eval = stream_rng(9, stream::DROPOUT);
        let before = rng_eval.clone();
        encode_traced(&enc, &input, false, &mut rng_eval).unwrap();
        assert_eq!(rng_eval, before, "eval mode consumed randomness");

        let mut rng_train = stream_rng(9, stream::DROPOUT);
        let (_, trace) = encode_traced(&enc, &input, true, &mut rng_train).unwrap();
        assert_ne!(rng_train, before, "training mode drew nothing");
        assert!(trace.embed.drop.is_some());
    }

    #[test]
    fn oversized_input_is_rejected() {
        let vocab = tiny_vocab();
        let cfg = tiny_config(vocab.size());
        let enc = EncoderParams::<f64>::init(cfg, 0).unwrap();
        let tokens: Vec<String> = std::iter::repeat("the".to_string()).take(30).collect();
        let input = encode_pair(&tokens, None, &vocab, 32).unwrap();
        assert!(encode(&enc, &input).is_err());
    }

    #[test]
    fn trace_shapes_follow_the_config() {
        let vocab = tiny_vocab();
        let cfg = ModelConfig {
            num_layers: 3,
            hidden_size: 12,
            num_heads: 3,
            ffn_size: 7,
            vocab_size: vocab.size(),
            max_positions: 16,
            dropout_keep: 1.0,
        };
        let enc = EncoderParams::<f32>::init(cfg, 0).unwrap();
        let input = encode_text(&vocab, "the mat", 6);
        let mut rng = stream_rng(0, stream::DROPOUT);
        let (seq, trace) = encode_traced(&enc, &input, false, &mut rng).unwrap();
        assert_eq!(seq.hidden().shape(), &[6, 12]);
        assert_eq!(trace.num_layers(), 3);
        assert_eq!(trace.attention_probs(2, 2).shape(), &[6, 6]);
        assert_eq!(trace.layers[1].h1.shape(), &[6, 7]);
    }
}
