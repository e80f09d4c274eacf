use rand::RngCore;

use super::{blk, block_base, emb, Model, LN_EPS};
use crate::corpus::{TokenId, PAD_ID};
use crate::error::{Error, Result};
use crate::format::{sym, FormatStreams};
use crate::numerics::{AttentionShape, Scalar, Tape, Tensor, Var};

/// A padded batch laid out for one forward pass.
///
/// Token rows are `batch × q_len`; format rows are `batch × kv_len`. The
/// tokens of an item are a prefix of its format streams, so during
/// generation the format is complete while the tokens are partial.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub tokens: Vec<TokenId>,
    pub c: Vec<usize>,
    pub p: Vec<usize>,
    pub s: Vec<usize>,
    pub g: Vec<usize>,
    pub reveals: Vec<Option<TokenId>>,
    pub q_valid: Vec<usize>,
    pub kv_valid: Vec<usize>,
}

/// One sequence for [`ModelInput::new`]: input tokens, streams and reveals.
pub type InputItem<'a> = (&'a [TokenId], &'a FormatStreams, &'a [Option<TokenId>]);

impl ModelInput {
    /// Pads items into one batch.
    pub fn new(items: &[InputItem<'_>]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::shape("model_input", "empty batch"));
        }
        for (tokens, st, rev) in items {
            let n = st.len();
            if tokens.is_empty()
                || tokens.len() > n
                || rev.len() != n
                || st.p.len() != n
                || st.s.len() != n
                || st.g.len() != n
            {
                return Err(Error::shape(
                    "model_input",
                    format!("{} tokens, {n} stream positions, {} reveals", tokens.len(), rev.len()),
                ));
            }
        }
        let batch = items.len();
        let q_len = items.iter().map(|i| i.0.len()).max().unwrap_or(0);
        let kv_len = items.iter().map(|i| i.1.len()).max().unwrap_or(0);
        let mut input = Self {
            batch,
            q_len,
            kv_len,
            tokens: vec![PAD_ID; batch * q_len],
            c: vec![sym::PAD; batch * kv_len],
            p: vec![sym::PAD; batch * kv_len],
            s: vec![sym::PAD; batch * kv_len],
            g: vec![0; batch * kv_len],
            reveals: vec![None; batch * kv_len],
            q_valid: Vec::with_capacity(batch),
            kv_valid: Vec::with_capacity(batch),
        };
        for (b, (tokens, st, rev)) in items.iter().enumerate() {
            input.tokens[b * q_len..][..tokens.len()].copy_from_slice(tokens);
            let n = st.len();
            let at = b * kv_len;
            input.c[at..at + n].copy_from_slice(&st.c);
            input.p[at..at + n].copy_from_slice(&st.p);
            input.s[at..at + n].copy_from_slice(&st.s);
            input.g[at..at + n].copy_from_slice(&st.g);
            input.reveals[at..at + n].copy_from_slice(rev);
            input.q_valid.push(tokens.len());
            input.kv_valid.push(n);
        }
        Ok(input)
    }

    /// One sequence with no reveals.
    pub fn single(tokens: &[TokenId], streams: &FormatStreams) -> Result<Self> {
        let rev = vec![None; streams.len()];
        Self::new(&[(tokens, streams, &rev)])
    }

    /// Row index of the last real token of each item.
    pub fn last_rows(&self) -> Vec<usize> {
        self.q_valid
            .iter()
            .enumerate()
            .map(|(b, &n)| b * self.q_len + n - 1)
            .collect()
    }

    /// Format channel values at the token rows.
    fn query_ids(&self, chan: &[usize]) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| chan[b * self.kv_len..][..self.q_len].iter().copied())
            .collect()
    }
}

/// Vars produced by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub f0: Var,
    /// The key/value source read by each layer's global block.
    pub global_sources: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    /// `H⁰ = E_w + E_c + E_p + E_s + E_g` at every token row; ablated channels are skipped.
    pub fn embed_inputs(&self, tape: &mut Tape<S>, vars: &[Var], input: &ModelInput) -> Result<Var> {
        let a = self.config.ablations;
        let mut h = tape.embed(vars[emb::WORD], &input.tokens)?;
        let channels = [
            (a.use_c, emb::FORMAT, &input.c),
            (a.use_p, emb::POSITION, &input.p),
            (a.use_s, emb::SEGMENT, &input.s),
            (true, emb::GLOBAL, &input.g),
        ];
        for (on, table, chan) in channels {
            if on {
                let e = tape.embed(vars[table], &input.query_ids(chan))?;
                h = tape.add(h, e)?;
            }
        }
        Ok(h)
    }

    /// `F⁰ = E_c + E_p + E_s` over the whole format, plus `E_w` at revealed positions.
    pub fn embed_format(&self, tape: &mut Tape<S>, vars: &[Var], input: &ModelInput) -> Result<Var> {
        let a = self.config.ablations;
        let mut f: Option<Var> = None;
        let mut acc = |tape: &mut Tape<S>, e: Var| -> Result<()> {
            f = Some(match f {
                Some(prev) => tape.add(prev, e)?,
                None => e,
            });
            Ok(())
        };
        for (on, table, chan) in [
            (a.use_c, emb::FORMAT, &input.c),
            (a.use_p, emb::POSITION, &input.p),
            (a.use_s, emb::SEGMENT, &input.s),
        ] {
            if on {
                let e = tape.embed(vars[table], chan)?;
                acc(tape, e)?;
            }
        }
        if input.reveals.iter().any(Option::is_some) {
            let e = tape.embed_sparse(vars[emb::WORD], &input.reveals)?;
            acc(tape, e)?;
        }
        Ok(match f {
            Some(f) => f,
            None => tape.constant(Tensor::zeros(&[input.batch * input.kv_len, self.config.d_model])),
        })
    }

    /// One layer: causal self-attention block, then global attention over `f0`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        layer: usize,
        h: Var,
        f0: Var,
        input: &ModelInput,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let self_shape = AttentionShape {
            batch: input.batch,
            q_len: input.q_len,
            kv_len: input.q_len,
            heads,
            causal: true,
            kv_valid: input.q_valid.clone(),
        };
        let c = self.block(tape, vars, block_base(layer, 0), h, h, self_shape, reborrow(&mut rng))?;
        let global_shape = AttentionShape {
            batch: input.batch,
            q_len: input.q_len,
            kv_len: input.kv_len,
            heads,
            causal: false,
            kv_valid: input.kv_valid.clone(),
        };
        self.block(tape, vars, block_base(layer, 1), c, f0, global_shape, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        base: usize,
        x: Var,
        kv: Var,
        shape: AttentionShape,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = |i: usize| vars[base + i];
        let q = tape.matmul(x, p(blk::WQ))?;
        let k = tape.matmul(kv, p(blk::WK))?;
        let v = tape.matmul(kv, p(blk::WV))?;
        let att = tape.attention(q, k, v, shape)?;
        let att = tape.matmul(att, p(blk::WO))?;
        let att = self.dropout(tape, att, reborrow(&mut rng))?;
        let x = tape.add(x, att)?;
        let x = tape.layer_norm(x, p(blk::LN1_G), p(blk::LN1_B), LN_EPS)?;
        let f = tape.matmul(x, p(blk::W1))?;
        let f = tape.add_row(f, p(blk::B1))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p(blk::W2))?;
        let f = tape.add_row(f, p(blk::B2))?;
        let f = self.dropout(tape, f, rng)?;
        let x = tape.add(x, f)?;
        tape.layer_norm(x, p(blk::LN2_G), p(blk::LN2_B), LN_EPS)
    }

    fn dropout(&self, tape: &mut Tape<S>, x: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(rng) => tape.dropout(x, self.config.dropout, rng),
            None => Ok(x),
        }
    }

    /// Full pass. `rows` restricts the output head to selected token rows;
    /// `rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        input: &ModelInput,
        rows: Option<&[usize]>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        if input.kv_len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: input.kv_len,
                max: self.config.max_len,
            });
        }
        let f0 = self.embed_format(tape, vars, input)?;
        let h0 = self.embed_inputs(tape, vars, input)?;
        let mut h = self.dropout(tape, h0, reborrow(&mut rng))?;
        let mut global_sources = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            global_sources.push(f0);
            h = self.layer_forward(tape, vars, l, h, f0, input, reborrow(&mut rng))?;
        }
        if let Some(rows) = rows {
            h = tape.select_rows(h, rows)?;
        }
        let logits = tape.matmul_nt(h, vars[emb::WORD])?;
        Ok(Forward {
            logits,
            f0,
            global_sources,
        })
    }

    /// Logits for every token row, without dropout.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor<S>> {
        self.eval(input, None)
    }

    /// Logits at the last real token of each item.
    pub fn last_logits(&self, input: &ModelInput) -> Result<Tensor<S>> {
        self.eval(input, Some(&input.last_rows()))
    }

    fn eval(&self, input: &ModelInput, rows: Option<&[usize]>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, input, rows, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// `H⁰` as a tensor.
    pub fn h0(&self, input: &ModelInput) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = self.embed_inputs(&mut tape, &vars, input)?;
        Ok(tape.value(h).clone())
    }

    /// `F⁰` as a tensor.
    pub fn f0(&self, input: &ModelInput) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = self.embed_format(&mut tape, &vars, input)?;
        Ok(tape.value(f).clone())
    }
}

/// Mean token negative log-likelihood, skipping `<pad>` targets.
pub fn nll<S: Scalar>(logits: &Tensor<S>, targets: &[TokenId]) -> Result<f64> {
    let (rows, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows {
        return Err(Error::shape("nll", format!("{rows} logit rows for {} targets", targets.len())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        if t >= v {
            return Err(Error::IdOutOfRange { op: "nll", id: t, rows: v });
        }
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMean);
    }
    Ok(total / count as f64)
}

fn reborrow<'b>(rng: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}
