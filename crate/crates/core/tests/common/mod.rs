#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidverse::corpus::{BOS_ID, EOS_ID, SEP_ID};
use rigidverse::format::{sym, FormatStreams};
use rigidverse::model::{nll, param_layout, Ablations, Model, ModelConfig, ModelInput};
use rigidverse::numerics::Tape;

pub fn small(d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: d,
        heads,
        d_ff: 2 * d,
        vocab_size: 12,
        c_vocab: sym::C_VOCAB,
        p_vocab: sym::INDEX_BASE + 8,
        s_vocab: sym::INDEX_BASE + 4,
        max_len: 16,
        dropout: 0.0,
        ablations: Ablations::default(),
    }
}

/// Two lines of lengths `a` and `b`, punctuation last on each.
pub fn streams(a: usize, b: usize) -> FormatStreams {
    let mut st = FormatStreams {
        c: vec![],
        p: vec![],
        s: vec![],
        g: vec![],
    };
    for (i, n) in [a, b].into_iter().enumerate() {
        for j in 0..n {
            st.c.push(if j + 1 == n { sym::PUNCT } else if j + 2 == n { sym::RHYME } else { sym::GENERAL });
            st.p.push(sym::INDEX_BASE + n - 1 - j);
            st.s.push(sym::INDEX_BASE + i);
        }
        st.c.push(sym::SEP);
        st.p.push(sym::SEP);
        st.s.push(sym::SEP);
    }
    st.c.push(sym::EOS);
    st.p.push(sym::EOS);
    st.s.push(sym::EOS);
    st.g = (0..st.c.len()).collect();
    st
}

pub fn random_tokens(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(5..12)).collect();
    t[0] = BOS_ID;
    t
}

/// Plain-loop evaluation of a one-layer model with a single head.
pub mod oracle {
    use super::*;

    pub type M = Vec<Vec<f64>>;

    pub fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    pub fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn attend(q: &M, k: &M, v: &M, causal: bool) -> M {
        let scale = 1.0 / (q[0].len() as f64).sqrt();
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let n = if causal { i + 1 } else { k.len() };
                let s: Vec<f64> = (0..n).map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect()
            })
            .collect()
    }

    /// Logits of a one-layer, one-head model with no reveals.
    pub fn logits(model: &Model<f64>, tokens: &[usize], st: &FormatStreams) -> M {
        let get = |n: &str| -> M {
            let t = model.param(n).unwrap();
            let (r, c) = t.as_matrix();
            (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
        };
        let vec_of = |n: &str| model.param(n).unwrap().data().to_vec();
        let d = model.config.d_model;
        let n = tokens.len();
        let (ew, ec, ep, es, eg) =
            (get("embed.word"), get("embed.format"), get("embed.position"), get("embed.segment"), get("embed.global"));
        let h0: M = (0..n)
            .map(|t| (0..d).map(|j| ew[tokens[t]][j] + ec[st.c[t]][j] + ep[st.p[t]][j] + es[st.s[t]][j] + eg[t][j]).collect())
            .collect();
        let f0: M = (0..st.len())
            .map(|t| (0..d).map(|j| ec[st.c[t]][j] + ep[st.p[t]][j] + es[st.s[t]][j]).collect())
            .collect();
        let block = |x: &M, kv: &M, pre: &str, causal: bool| -> M {
            let q = matmul(x, &get(&format!("{pre}.wq")));
            let k = matmul(kv, &get(&format!("{pre}.wk")));
            let v = matmul(kv, &get(&format!("{pre}.wv")));
            let a = matmul(&attend(&q, &k, &v, causal), &get(&format!("{pre}.wo")));
            let x1 = layer_norm(&add(x, &a), &vec_of(&format!("{pre}.ln1.gain")), &vec_of(&format!("{pre}.ln1.bias")));
            let b1 = vec_of(&format!("{pre}.ffn.b1"));
            let b2 = vec_of(&format!("{pre}.ffn.b2"));
            let hid: M = matmul(&x1, &get(&format!("{pre}.ffn.w1")))
                .into_iter()
                .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
                .collect();
            let out: M = matmul(&hid, &get(&format!("{pre}.ffn.w2")))
                .into_iter()
                .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
                .collect();
            layer_norm(&add(&x1, &out), &vec_of(&format!("{pre}.ln2.gain")), &vec_of(&format!("{pre}.ln2.bias")))
        };
        let c1 = block(&h0, &h0, "layer0.self", true);
        let h1 = block(&c1, &f0, "layer0.global", false);
        h1.iter()
            .map(|row| ew.iter().map(|w| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect())
            .collect()
    }

    /// Largest absolute logit gap between the model and the oracle on one random instance.
    pub fn max_error(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = small(4, 1, 1);
        cfg.d_ff = rng.random_range(2..9);
        let model = Model::<f64>::init(cfg, seed).unwrap();
        let st = streams(rng.random_range(1..5), rng.random_range(1..5));
        let n = rng.random_range(1..=st.len());
        let tokens = random_tokens(&mut rng, n);
        let want = logits(&model, &tokens, &st);
        let got = model.logits(&ModelInput::single(&tokens, &st).unwrap()).unwrap();
        let mut worst = 0.0f64;
        for (t, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                worst = worst.max((got.row(t)[v] - w).abs());
            }
        }
        worst
    }
}

/// Relative error between tape and central-difference gradients for every
/// parameter block of a two-layer, d=8 model on a six-position sequence.
pub fn gradient_check() -> Vec<(String, f64)> {
    let mut cfg = small(8, 2, 2);
    cfg.vocab_size = 10;
    // Weights at std 0.5 so attention scores are far from uniform.
    let mut model = Model::<f32>::init(cfg, 21).unwrap().cast::<f64>();
    for (name, t) in param_layout(&model.config).iter().zip(model.params_mut()) {
        if !name.0.contains(".ln") {
            t.data_mut().iter_mut().for_each(|x| *x *= 25.0);
        }
    }
    let st = streams(2, 1);
    assert_eq!(st.len(), 6);
    let targets = vec![6, 7, SEP_ID, 9, SEP_ID, EOS_ID];
    let mut inputs = vec![BOS_ID];
    inputs.extend_from_slice(&targets[..5]);
    let mut rev = vec![None; 6];
    rev[1] = Some(7);
    let input = ModelInput::new(&[(&inputs, &st, &rev)]).unwrap();

    let loss_of = |m: &Model<f64>| -> f64 { nll(&m.logits(&input).unwrap(), &targets).unwrap() };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &vars, &input, None, None).unwrap();
    let loss = tape.cross_entropy(out.logits, &targets, Some(0)).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut probe = model.clone();
    let mut errors = Vec::new();
    for (i, (name, _)) in param_layout(&model.config).iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut num = vec![0.0; analytic.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = probe.params()[i].data()[j];
            probe.params_mut()[i].data_mut()[j] = orig + h;
            let up = loss_of(&probe);
            probe.params_mut()[i].data_mut()[j] = orig - h;
            let down = loss_of(&probe);
            probe.params_mut()[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.sum_squares().sqrt() + num.iter().map(|n| n * n).sum::<f64>().sqrt();
        errors.push((name.to_string(), if scale < 1e-10 { 0.0 } else { diff / scale }));
    }
    errors
}
