//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//! With `ACCEPTANCE_STRICT=1` the process exits non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidverse::corpus::{PunctSet, Sample, TokenId, Vocab, EOS_ID};
use rigidverse::decoding::{beam_search, top_k_distribution, top_k_sample, DecodeConfig, Generator, NextToken, Strategy};
use rigidverse::format::{
    derive_symbols, global_index, parse_format, sym, CompiledFormat, FormatStreams, PositionRule, SymbolConfig,
    SymbolSequence,
};
use rigidverse::metrics::{distinct, format_f1, integrity, integrity_of, ppl, rhyme_f1, EvalReport, LmScorer, SentenceScorer};
use rigidverse::model::{nll, Ablations, Model, ModelConfig, ModelInput};
use rigidverse::numerics::Tensor;
use rigidverse::phonetics::{Lang, Lexicon};
use rigidverse::pipeline::{evaluate, prepare_with_groups, EvalConfig, Prepared};
use rigidverse::synthetic::{synthetic_corpus, SyntheticSample};
use rigidverse::training::{perplexity, TrainConfig, Trainer, LAST_CHECKPOINT};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn lines(ls: &[&str]) -> Vec<Vec<String>> {
    ls.iter().map(|l| toks(l)).collect()
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn bits(m: &Model) -> Vec<u32> {
    m.params().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

// ---------------------------------------------------------------- streams

fn render_stream(xs: &[usize], letter: &str) -> String {
    xs.iter()
        .map(|&x| match x {
            sym::SEP => "</s>".to_string(),
            sym::EOS => "<eos>".to_string(),
            v => format!("{letter}{}", v - sym::INDEX_BASE),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn symbol_golden() -> Check {
    let sample = Sample::new(lines(&["love is not love ,", "bends with the remover to remove ."])).unwrap();
    let vocab = Vocab::from_tokens(sample.tokens().cloned());
    let seq = derive_symbols(&sample, &BTreeSet::from([(0, 3), (1, 5)]), &vocab, &SymbolConfig::default())
        .map_err(|e| e.to_string())?;
    // c0 general, c1 punctuation, c2 rhyme.
    let c: Vec<usize> = seq
        .c
        .iter()
        .map(|&x| match x {
            sym::GENERAL => sym::INDEX_BASE,
            sym::PUNCT => sym::INDEX_BASE + 1,
            sym::RHYME => sym::INDEX_BASE + 2,
            other => other,
        })
        .collect();
    let want = [
        (render_stream(&c, "c"), "c0 c0 c0 c2 c1 </s> c0 c0 c0 c0 c0 c2 c1 </s> <eos>"),
        (render_stream(&seq.p, "p"), "p4 p3 p2 p1 p0 </s> p6 p5 p4 p3 p2 p1 p0 </s> <eos>"),
        (render_stream(&seq.s, "s"), "s0 s0 s0 s0 s0 </s> s1 s1 s1 s1 s1 s1 s1 </s> <eos>"),
    ];
    for (got, exp) in &want {
        if got != exp {
            return Err(format!("got `{got}`, want `{exp}`"));
        }
    }
    let y = vocab.decode(&seq.y).join(" ");
    let want_y = "love is not love , </s> bends with the remover to remove . </s> <eos>";
    ensure(y == want_y && seq.g == (0..15).collect::<Vec<_>>(), "C, P, S, G and targets match".into())
}

// ---------------------------------------------------------------- model

fn toy_data(n: usize, seed: u64) -> (Prepared, Vocab) {
    let corpus = synthetic_corpus(n, seed);
    let vocab = Vocab::from_tokens(corpus.iter().flat_map(|s| s.sample.tokens().cloned()));
    (prepare_synth(&corpus, &vocab), vocab)
}

fn prepare_synth(corpus: &[SyntheticSample], vocab: &Vocab) -> Prepared {
    let sc = SymbolConfig::default();
    prepare_with_groups(
        corpus.iter().map(|s| s.sample.clone()).collect(),
        corpus.iter().map(|s| s.groups.clone()).collect(),
        vocab,
        &sc,
    )
    .unwrap()
}

/// A small model trained briefly on the synthetic corpus.
fn trained_toy() -> (Model, Vocab, Prepared) {
    let (data, vocab) = toy_data(60, 41);
    let mut c = ModelConfig::desk(vocab.len());
    c.layers = 2;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.max_len = 64;
    c.dropout = 0.0;
    let mut t = Trainer::new(Model::init(c, 41).unwrap());
    let cfg = TrainConfig {
        batch_size: 8,
        max_steps: 200,
        warmup_steps: 50,
        lr_factor: 1.0,
        eval_every: 1000,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    };
    t.fit(&data.sequences, &[], &cfg, None, None).unwrap();
    (t.model, vocab, data)
}

fn rows_equal(a: &Tensor<f32>, b: &Tensor<f32>, upto: usize) -> bool {
    (0..=upto).all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn causality(model: &Model, data: &Prepared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = model.config.vocab_size;
    let mut changed_format = 0;
    for trial in 0..100 {
        let seq: &SymbolSequence = &data.sequences[trial % data.len()];
        let st = seq.streams();
        let x = seq.inputs();
        let n = x.len();
        let t = rng.random_range(0..n - 1);
        let base = model.logits(&ModelInput::single(&x, &st).unwrap()).unwrap();

        let mut future = x.clone();
        for tok in &mut future[t + 1..] {
            *tok = rng.random_range(0..v);
        }
        let moved = model.logits(&ModelInput::single(&future, &st).unwrap()).unwrap();
        if !rows_equal(&base, &moved, t) {
            return Err(format!("trial {trial}: future tokens changed a logit at or before {t}"));
        }

        let mut other: FormatStreams = st.clone();
        let u = rng.random_range(t + 1..n);
        match rng.random_range(0..3) {
            0 => other.c[u] = if other.c[u] == sym::GENERAL { sym::RHYME } else { sym::GENERAL },
            1 => other.p[u] = if other.p[u] == sym::INDEX_BASE + 3 { sym::INDEX_BASE + 5 } else { sym::INDEX_BASE + 3 },
            _ => other.s[u] = if other.s[u] == sym::INDEX_BASE { sym::INDEX_BASE + 2 } else { sym::INDEX_BASE },
        }
        let moved = model.logits(&ModelInput::single(&x, &other).unwrap()).unwrap();
        if !rows_equal(&base, &moved, t) {
            changed_format += 1;
        }
    }
    ensure(
        changed_format == 100,
        format!("100/100 future-token trials bit-identical; {changed_format}/100 future-format trials reach the past"),
    )
}

fn oracle() -> Check {
    let worst = (0..50).map(common::oracle::max_error).fold(0.0f64, f64::max);
    ensure(worst < 1e-5, format!("max abs error {worst:.2e} over 50 instances"))
}

fn grad_check() -> Check {
    let errs = common::gradient_check();
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    ensure(worst < 1e-2, format!("{} blocks, worst relative error {worst:.2e} ({name})", errs.len()))
}

// ---------------------------------------------------------------- metrics

struct Constant(f64);

impl SentenceScorer for Constant {
    fn final_token_probs(&self, sample: &[Vec<String>]) -> rigidverse::Result<Vec<f64>> {
        Ok(vec![self.0; sample.len()])
    }
}

fn uniform_model(vocab_size: usize) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab_size,
        c_vocab: sym::C_VOCAB,
        p_vocab: sym::INDEX_BASE + 8,
        s_vocab: sym::INDEX_BASE + 4,
        max_len: 32,
        dropout: 0.0,
        ablations: Ablations::default(),
    };
    let mut m = Model::init(cfg, 3).unwrap();
    m.param_mut("embed.word").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    m
}

fn metric_closed_forms() -> Check {
    let p = PunctSet::default();
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let spec = parse_format("_ _ _ _ ,\n_ _ _ _ _ _ .").unwrap();
    let f = format_f1(std::slice::from_ref(&spec), &[lines(&["a b c d ,", "e f g h i j ."])], 0, true, &p);
    check("format exact", f.mi_f1 == 1.0 && f.ma_f1 == 1.0);
    let f = format_f1(std::slice::from_ref(&spec), &[lines(&["a b c d ,", "e f g h i ."])], 0, true, &p);
    check("format half", near(f.mi_f1, 0.5, 1e-9));
    let f = format_f1(std::slice::from_ref(&spec), &[lines(&["a b c d ,", "e f g h i ."])], 1, false, &p);
    check("format delta", near(f.mi_f1, 1.0, 1e-9));
    let f = format_f1(&[spec], &[vec![]], 0, true, &p);
    check("format empty", f.mi_f1 == 0.0);

    let d = distinct(&[toks("a a b")]);
    check("distinct-1", near(d.ma_d1, 2.0 / 3.0, 1e-9) && near(d.ma_d2, 1.0, 1e-9));
    let d = distinct(&[toks("a b"), toks("a b")]);
    check("distinct pooled", near(d.mi_d1, 0.5, 1e-9) && near(d.mi_d2, 0.5, 1e-9) && near(d.ma_d1, 1.0, 1e-9));

    check("integrity 1/2", near(integrity_of(&[0.5, 0.5, 0.5]), 2.0, 1e-9));
    check("integrity 1", near(integrity_of(&[1.0, 1.0]), 1.0, 1e-9));
    check("integrity 1/4", near(integrity_of(&[0.25]), 4.0, 1e-9));
    let i = integrity(&Constant(0.5), &[lines(&["a ,", "b ."]), lines(&["c ."])]).unwrap();
    check("integrity corpus", near(i.mean, 2.0, 1e-9) && near(i.std, 0.0, 1e-9));

    let zeros = Tensor::new(vec![3, 4], vec![0.0f32; 12]).unwrap();
    check("ppl V=4", near(nll(&zeros, &[1, 2, 3]).unwrap().exp(), 4.0, 1e-9));
    let seq = |y: Vec<usize>| {
        let n = y.len();
        SymbolSequence {
            y,
            c: vec![sym::GENERAL; n],
            p: vec![sym::INDEX_BASE; n],
            s: vec![sym::INDEX_BASE; n],
            g: (0..n).collect(),
        }
    };
    let m = uniform_model(5);
    check("ppl V=5", near(ppl(&m, &[seq(vec![2, 3, 1]), seq(vec![1, 4, 2, 3, 3])]).unwrap(), 5.0, 1e-9));
    if fails.is_empty() {
        Ok("format_f1, distinct, integrity and PPL oracles agree within 1e-9".into())
    } else {
        Err(format!("failed: {}", fails.join(", ")))
    }
}

fn rhyme_lexicon() -> Check {
    let en = Lexicon::bundled(Lang::En);
    let zh = Lexicon::bundled(Lang::Zh);
    let r = rhyme_f1(&[vec![vec![(0, 1), (1, 2)]]], &[lines(&["fall asleep ,", "hill so steep ."])], &en);
    let en_ok = en.rhymes("asleep", "steep") == Some(true) && r.mi_f1 == 1.0;
    let units: Vec<Option<Vec<String>>> = ["竹", "独", "孤"].iter().map(|c| zh.rhyme_units(c)).collect();
    let zh_ok = units.iter().all(|u| u.as_deref() == Some(&["u".to_string()][..]))
        && [("竹", "独"), ("独", "孤"), ("竹", "孤")].iter().all(|(a, b)| zh.rhymes(a, b) == Some(true));
    ensure(en_ok && zh_ok, format!("asleep/steep rhyme: {en_ok}; zhu/du/gu share final u: {zh_ok}"))
}

// ---------------------------------------------------------------- decoding

struct Table<F: Fn(&[TokenId]) -> Vec<(TokenId, f64)>>(F);

impl<F: Fn(&[TokenId]) -> Vec<(TokenId, f64)>> NextToken for Table<F> {
    fn vocab_size(&self) -> usize {
        8
    }

    fn next_logits(&self, items: &[(&CompiledFormat, &[TokenId])]) -> rigidverse::Result<Vec<Vec<f32>>> {
        Ok(items
            .iter()
            .map(|(_, prefix)| {
                let mut row = vec![f32::NEG_INFINITY; 8];
                for (id, p) in (self.0)(&prefix[1..]) {
                    row[id] = p.ln() as f32;
                }
                row
            })
            .collect())
    }
}

fn three_steps() -> CompiledFormat {
    CompiledFormat {
        streams: FormatStreams {
            c: vec![0; 4],
            p: vec![0; 4],
            s: vec![0; 4],
            g: (0..4).collect(),
        },
        fixed: BTreeMap::new(),
        rules: vec![PositionRule::Free, PositionRule::Free, PositionRule::Free, PositionRule::Eos],
        line_lengths: vec![3],
    }
}

fn toy_table(prefix: &[TokenId]) -> Vec<(TokenId, f64)> {
    match prefix {
        [] => vec![(5, 0.5), (6, 0.4), (7, 0.1)],
        [6] => vec![(5, 0.05), (6, 0.9), (7, 0.05)],
        [6, 6] => vec![(5, 0.02), (6, 0.03), (7, 0.95)],
        [_, _, _] => vec![(EOS_ID, 1.0)],
        _ => vec![(5, 0.34), (6, 0.33), (7, 0.33)],
    }
}

fn decoding_contracts(model: &Model, vocab: &Vocab) -> Check {
    // Top-k frequencies.
    let logits = [1.0f32, 0.5, 0.0, -1.0, 0.7];
    let dist = top_k_distribution(&logits, 3, 0.8).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    for _ in 0..n {
        counts[top_k_sample(&logits, 3, 0.8, &mut rng).unwrap()] += 1;
    }
    let freq_ok = dist.iter().all(|&(id, p)| {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (counts[id] as f64 - n as f64 * p).abs() <= 3.0 * sigma
    }) && counts[2] + counts[3] == 0;

    // Beam against exhaustive search.
    let mut best = (vec![], f64::NEG_INFINITY);
    for a in 5..8 {
        for b in 5..8 {
            for c in 5..8 {
                let s = [a, b, c];
                let lp: f64 = (0..3).map(|i| toy_table(&s[..i]).iter().find(|e| e.0 == s[i]).unwrap().1.ln()).sum();
                if lp > best.1 {
                    best = (vec![a, b, c, EOS_ID], lp);
                }
            }
        }
    }
    let bc = |w| DecodeConfig {
        strategy: Strategy::Beam,
        beam_width: w,
        ..DecodeConfig::default()
    };
    let greedy = beam_search(&Table(toy_table), &three_steps(), &bc(1), &[]).unwrap();
    let beam = beam_search(&Table(toy_table), &three_steps(), &bc(2), &[]).unwrap();
    let beam_ok = greedy.tokens != best.0 && beam.tokens == best.0 && near(beam.log_prob, best.1, 1e-6);

    // Polishing with every token locked.
    let gen = Generator::new(model, vocab, PunctSet::default());
    let spec = parse_format("_ _ _ _ _ ,\n_ _ _ _ _ _ _ .").unwrap();
    let mut polish_ok = true;
    for seed in 0..3 {
        let c = DecodeConfig {
            seed,
            ..DecodeConfig::default()
        };
        let prev = gen.generate(&spec, &DecodeConfig { hard_constrain: true, ..c.clone() }).unwrap();
        let lens: Vec<usize> = prev.iter().map(Vec::len).collect();
        let lock: BTreeSet<usize> = prev
            .iter()
            .enumerate()
            .flat_map(|(i, l)| (0..l.len()).map(move |j| (i, j)))
            .map(|p| global_index(&lens, p))
            .collect();
        polish_ok &= gen.polish(&prev, &lock, &BTreeMap::new(), &c).unwrap() == prev;
    }

    // Checkpoint round trip.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(LAST_CHECKPOINT);
    model.save(&path).map_err(|e| e.to_string())?;
    let back = Model::load(&path).map_err(|e| e.to_string())?;
    let probe = parse_format("_ _ _ ,\n_ _ .").unwrap();
    let out_a = gen.generate(&probe, &DecodeConfig::default()).unwrap();
    let out_b = Generator::new(&back, vocab, PunctSet::default()).generate(&probe, &DecodeConfig::default()).unwrap();
    let ckpt_ok = bits(&back) == bits(model) && back.config == model.config && out_a == out_b;

    ensure(
        freq_ok && beam_ok && polish_ok && ckpt_ok,
        format!("top-k frequency {freq_ok}; beam=2 exhaustive optimum {beam_ok}; polish fixed point {polish_ok}; checkpoint bit-exact {ckpt_ok}"),
    )
}

// ---------------------------------------------------------------- synthetic experiments

const KS: [usize; 6] = [1, 5, 10, 20, 32, 50];
const DEFAULT_K: usize = 32;

struct Run {
    train_ppl: f64,
    reports: BTreeMap<usize, EvalReport>,
}

struct SeedResult {
    full: Run,
    no_p: Run,
}

fn experiment(seed: u64) -> SeedResult {
    let train_c = synthetic_corpus(200, 100 + seed);
    let test_c = synthetic_corpus(100, 900 + seed);
    let vocab = Vocab::from_tokens(train_c.iter().chain(&test_c).flat_map(|s| s.sample.tokens().cloned()));
    let train = prepare_synth(&train_c, &vocab);
    let test = prepare_synth(&test_c, &vocab);
    let mut c = ModelConfig::desk(vocab.len());
    c.layers = 2;
    c.d_model = 32;
    c.heads = 4;
    c.d_ff = 64;
    c.max_len = 64;
    c.dropout = 0.0;
    let cfg = TrainConfig {
        batch_size: 16,
        max_steps: 2500,
        warmup_steps: 400,
        lr_factor: 0.5,
        eval_every: 500,
        checkpoint_every: 100_000,
        seed,
        ..TrainConfig::default()
    };
    let fit = |c: ModelConfig, cfg: &TrainConfig, init: u64| {
        let mut t = Trainer::new(Model::init(c, init).unwrap());
        t.fit(&train.sequences, &[], cfg, None, None).unwrap();
        t.model
    };
    let mut lm_cfg = c.clone();
    lm_cfg.ablations = Ablations::causal_lm();
    let lm = fit(lm_cfg, &TrainConfig { max_steps: 1500, ..cfg.clone() }, 77);
    let scorer = LmScorer {
        model: &lm,
        vocab: &vocab,
        punct: PunctSet::default(),
    };
    let lex = Lexicon::bundled(Lang::En);
    let run = |model: &Model, ks: &[usize]| Run {
        train_ppl: perplexity(model, &train.sequences, 16).unwrap(),
        reports: ks
            .iter()
            .map(|&k| {
                let ec = EvalConfig {
                    decode: DecodeConfig {
                        k,
                        seed: seed * 1000,
                        ..DecodeConfig::default()
                    },
                    ..EvalConfig::default()
                };
                (k, evaluate(model, &scorer, &vocab, &test, &lex, &ec).unwrap().report)
            })
            .collect(),
    };
    let full = fit(c.clone(), &cfg, seed);
    let mut nop_cfg = c;
    nop_cfg.ablations = Ablations {
        use_p: false,
        ..Ablations::default()
    };
    let no_p = fit(nop_cfg, &cfg, seed);
    SeedResult {
        full: run(&full, &KS),
        no_p: run(&no_p, &[DEFAULT_K]),
    }
}

fn overfit(r: &SeedResult, secs: f64) -> Check {
    let rep = &r.full.reports[&DEFAULT_K];
    ensure(
        r.full.train_ppl < 1.5 && rep.format_mi_f1 >= 0.95 && rep.rhyme_mi_f1 >= 0.6,
        format!(
            "2500 steps, train PPL {:.3}, soft k={DEFAULT_K} format Mi-F1 {:.3}, rhyme Mi-F1 {:.3} ({secs:.0} s incl. ablation and scorer)",
            r.full.train_ppl, rep.format_mi_f1, rep.rhyme_mi_f1
        ),
    )
}

fn ablation(rs: &[SeedResult]) -> Check {
    let pick = |f: &dyn Fn(&SeedResult) -> f64| median(rs.iter().map(f).collect());
    let rhyme_full = pick(&|r| r.full.reports[&DEFAULT_K].rhyme_mi_f1);
    let rhyme_nop = pick(&|r| r.no_p.reports[&DEFAULT_K].rhyme_mi_f1);
    let int_full = pick(&|r| r.full.reports[&DEFAULT_K].integrity_mean);
    let int_nop = pick(&|r| r.no_p.reports[&DEFAULT_K].integrity_mean);
    let per_seed: Vec<String> = rs
        .iter()
        .map(|r| {
            format!(
                "{:.3}/{:.3}",
                r.full.reports[&DEFAULT_K].rhyme_mi_f1, r.no_p.reports[&DEFAULT_K].rhyme_mi_f1
            )
        })
        .collect();
    ensure(
        rhyme_nop < rhyme_full && int_nop > int_full,
        format!(
            "3-seed median rhyme Mi-F1 {rhyme_full:.3} -> {rhyme_nop:.3}, integrity {int_full:.3} -> {int_nop:.3} (per seed full/no-P rhyme {})",
            per_seed.join(" ")
        ),
    )
}

fn k_trend(rs: &[SeedResult]) -> Check {
    let sweep = [1usize, 5, 10, 20, 50];
    let med = |k: usize, f: fn(&EvalReport) -> f64| median(rs.iter().map(|r| f(&r.full.reports[&k])).collect());
    let d2: Vec<f64> = sweep.iter().map(|&k| med(k, |r| r.mi_d2)).collect();
    let rhyme: Vec<f64> = sweep.iter().map(|&k| med(k, |r| r.rhyme_mi_f1)).collect();
    let d2_ok = d2.windows(2).all(|w| w[1] >= w[0]);
    let rhyme_ok = rhyme[1..].windows(2).all(|w| w[1] <= w[0]);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    ensure(
        d2_ok && rhyme_ok,
        format!("k=1,5,10,20,50: Mi-D-2 {} ; rhyme Mi-F1 {}", fmt(&d2), fmt(&rhyme)),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let mut results: Vec<(&str, Check, f64)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t0 = Instant::now();
        let r = f();
        let secs = t0.elapsed().as_secs_f64();
        match &r {
            Ok(d) => println!("PASS {name}: {d} [{secs:.1} s]"),
            Err(d) => println!("FAIL {name}: {d} [{secs:.1} s]"),
        }
        results.push((name, r, secs));
    };

    record("symbol derivation golden", &mut symbol_golden);
    let t0 = Instant::now();
    let (toy, toy_vocab, toy_data) = trained_toy();
    eprintln!("trained toy model in {:.1} s", t0.elapsed().as_secs_f64());
    record("causality", &mut || causality(&toy, &toy_data));
    record("oracle equivalence", &mut oracle);
    record("gradient check", &mut grad_check);
    record("metric closed forms", &mut metric_closed_forms);
    record("rhyme lexicon", &mut rhyme_lexicon);
    record("decoding contracts", &mut || decoding_contracts(&toy, &toy_vocab));

    let mut seeds = Vec::new();
    let mut first_secs = 0.0;
    for seed in 0..3 {
        let t = Instant::now();
        seeds.push(experiment(seed));
        let secs = t.elapsed().as_secs_f64();
        if seed == 0 {
            first_secs = secs;
        }
        eprintln!("synthetic seed {seed} finished in {secs:.0} s");
    }
    record("overfit trend", &mut || overfit(&seeds[0], first_secs));
    record("ablation direction", &mut || ablation(&seeds));
    record("k-tuning trend", &mut || k_trend(&seeds));

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
