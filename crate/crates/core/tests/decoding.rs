use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rigidverse::corpus::{PunctSet, TokenId, Vocab, BOS_ID, EOS_ID};
use rigidverse::decoding::{
    beam_search, generate, sample_many, top_k_distribution, top_k_sample, DecodeConfig, Generator, Job, NextToken,
    Strategy,
};
use rigidverse::format::{global_index, parse_format, spec_to_symbols, CompiledFormat, PositionRule, SymbolConfig};
use rigidverse::metrics::format_f1;
use rigidverse::model::{Model, ModelConfig};
use rigidverse::Result;

#[test]
fn symmetric_pair_is_a_fair_coin() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let ones = (0..n).filter(|_| top_k_sample(&[0.0, 0.0], 2, 1.0, &mut rng).unwrap() == 1).count();
    let f = ones as f64 / n as f64;
    assert!((f - 0.5).abs() <= 0.02, "{f}");
}

#[test]
fn top_k_frequencies_within_three_sigma() {
    let logits = [1.0f32, 0.5, 0.0, -1.0, 0.7];
    let k = 3;
    let dist = top_k_distribution(&logits, k, 0.8).unwrap();
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    for _ in 0..n {
        counts[top_k_sample(&logits, k, 0.8, &mut rng).unwrap()] += 1;
    }
    for &(id, p) in &dist {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[id] as f64 - n as f64 * p).abs() <= 3.0 * sigma, "id {id}: {} vs {p}", counts[id]);
    }
    assert_eq!(counts[2] + counts[3], 0, "tokens outside the top k were drawn");
}

/// Next-token probabilities from a lookup on the prefix; everything else is barred.
struct Table<F: Fn(&[TokenId]) -> Vec<(TokenId, f64)>>(F);

impl<F: Fn(&[TokenId]) -> Vec<(TokenId, f64)>> NextToken for Table<F> {
    fn vocab_size(&self) -> usize {
        8
    }

    fn next_logits(&self, items: &[(&CompiledFormat, &[TokenId])]) -> Result<Vec<Vec<f32>>> {
        Ok(items
            .iter()
            .map(|(_, prefix)| {
                assert_eq!(prefix[0], BOS_ID);
                let mut row = vec![f32::NEG_INFINITY; 8];
                for (id, p) in (self.0)(&prefix[1..]) {
                    row[id] = p.ln() as f32;
                }
                row
            })
            .collect())
    }
}

/// Three free positions, then the end marker.
fn three_steps() -> CompiledFormat {
    CompiledFormat {
        streams: rigidverse::format::FormatStreams {
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

fn toy(prefix: &[TokenId]) -> Vec<(TokenId, f64)> {
    match prefix {
        [] => vec![(5, 0.5), (6, 0.4), (7, 0.1)],
        [6] => vec![(5, 0.05), (6, 0.9), (7, 0.05)],
        [6, 6] => vec![(5, 0.02), (6, 0.03), (7, 0.95)],
        [_, _, _] => vec![(EOS_ID, 1.0)],
        _ => vec![(5, 0.34), (6, 0.33), (7, 0.33)],
    }
}

fn exhaustive<F: Fn(&[TokenId]) -> Vec<(TokenId, f64)>>(table: &F) -> (Vec<TokenId>, f64) {
    let mut best = (vec![], f64::NEG_INFINITY);
    for a in 5..8 {
        for b in 5..8 {
            for c in 5..8 {
                let seq = [a, b, c];
                let lp: f64 = (0..3)
                    .map(|i| table(&seq[..i]).iter().find(|e| e.0 == seq[i]).unwrap().1.ln())
                    .sum();
                if lp > best.1 {
                    best = (vec![a, b, c, EOS_ID], lp);
                }
            }
        }
    }
    best
}

fn cfg(strategy: Strategy) -> DecodeConfig {
    DecodeConfig {
        strategy,
        ..DecodeConfig::default()
    }
}

#[test]
fn beam_of_two_finds_the_exhaustive_optimum() {
    let f = three_steps();
    let model = Table(toy);
    let greedy = beam_search(&model, &f, &DecodeConfig { beam_width: 1, ..cfg(Strategy::Beam) }, &[]).unwrap();
    let (best, lp) = exhaustive(&toy);
    assert_ne!(greedy.tokens, best, "the table should defeat greedy search");
    let beam = beam_search(&model, &f, &DecodeConfig { beam_width: 2, ..cfg(Strategy::Beam) }, &[]).unwrap();
    assert_eq!(beam.tokens, best);
    assert!((beam.log_prob - lp).abs() < 1e-6);
}

#[test]
fn wide_beam_matches_exhaustive_on_random_tables() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut probs: BTreeMap<Vec<TokenId>, Vec<(TokenId, f64)>> = BTreeMap::new();
        let mut prefixes = vec![vec![]];
        for a in 5..8 {
            prefixes.push(vec![a]);
            for b in 5..8 {
                prefixes.push(vec![a, b]);
            }
        }
        for p in prefixes {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = w.iter().sum();
            probs.insert(p, (5..8).zip(w).map(|(id, x)| (id, x / z)).collect());
        }
        let table = |p: &[TokenId]| -> Vec<(TokenId, f64)> {
            if p.len() == 3 {
                vec![(EOS_ID, 1.0)]
            } else {
                probs[p].clone()
            }
        };
        let (best, _) = exhaustive(&table);
        let got = beam_search(&Table(table), &three_steps(), &DecodeConfig { beam_width: 9, ..cfg(Strategy::Beam) }, &[])
            .unwrap();
        assert_eq!(got.tokens, best);
    }
}

fn words() -> Vec<&'static str> {
    "love is not love which alters when it alteration finds bends with the remover to remove , . night day"
        .split(' ')
        .collect()
}

fn setup(seed: u64) -> (Model, Vocab) {
    let vocab = Vocab::from_tokens(words());
    let mut c = ModelConfig::desk(vocab.len());
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.layers = 2;
    (Model::init(c, seed).unwrap(), vocab)
}

#[test]
fn uniform_model_ties_go_to_the_smallest_sequence() {
    let (mut model, vocab) = setup(0);
    model.param_mut("embed.word").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let spec = parse_format("_ _ ,\n_ _ _ .").unwrap();
    let hard = DecodeConfig {
        hard_constrain: true,
        ..cfg(Strategy::Beam)
    };
    let out = gen.generate(&spec, &hard).unwrap();
    let smallest = (5..vocab.len()).find(|&i| !gen.punct_mask()[i]).unwrap();
    let w = vocab.token(smallest).unwrap();
    assert_eq!(out, vec![vec![w, w, ","], vec![w, w, w, "."]]);
}

#[test]
fn beam_of_one_is_greedy() {
    let (model, vocab) = setup(4);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    for dsl in ["_ _ _ ,\n_ _ .", "_ _ love _ _ _ ."] {
        for hard in [false, true] {
            let spec = parse_format(dsl).unwrap();
            let beam = DecodeConfig {
                beam_width: 1,
                hard_constrain: hard,
                ..cfg(Strategy::Beam)
            };
            let greedy = DecodeConfig {
                k: 1,
                hard_constrain: hard,
                ..cfg(Strategy::TopK)
            };
            assert_eq!(gen.generate(&spec, &beam).unwrap(), gen.generate(&spec, &greedy).unwrap());
        }
    }
}

#[test]
fn fixed_tokens_are_always_emitted() {
    let (model, vocab) = setup(7);
    let mask = rigidverse::decoding::punct_mask(&vocab, &PunctSet::default());
    let spec = parse_format("_ _ _ love _ ,\nbends _ _ _ _ remove .").unwrap();
    let f = spec_to_symbols(&spec, &vocab, &model.config.symbol_config()).unwrap();
    assert_eq!(f.fixed.len(), 3);
    for strategy in [Strategy::TopK, Strategy::Beam] {
        for hard in [false, true] {
            for seed in 0..5 {
                let c = DecodeConfig {
                    strategy,
                    hard_constrain: hard,
                    seed,
                    ..DecodeConfig::default()
                };
                let out = generate(&model, &f, &c, &mask).unwrap();
                for (&idx, &id) in &f.fixed {
                    assert_eq!(out[idx], id, "{strategy:?} hard={hard} seed={seed}");
                }
                assert_eq!(out.last(), Some(&EOS_ID));
            }
        }
    }
}

#[test]
fn fixed_slot_lands_at_its_line_position() {
    let (model, vocab) = setup(8);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let spec = parse_format("_ _ _ love _ .").unwrap();
    let out = gen.generate(&spec, &DecodeConfig { hard_constrain: true, ..DecodeConfig::default() }).unwrap();
    assert_eq!(out[0][3], "love");
}

#[test]
fn hard_mode_reproduces_the_format() {
    let (model, vocab) = setup(9);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let specs: Vec<_> = ["_ _ _ ,\n_ _ .", "_ ,\n_ _ _ _ _ ,\n_ .", "_ _ _ _ _ _ _ ."]
        .iter()
        .map(|d| parse_format(d).unwrap())
        .collect();
    for strategy in [Strategy::TopK, Strategy::Beam] {
        let c = DecodeConfig {
            strategy,
            hard_constrain: true,
            ..DecodeConfig::default()
        };
        let outs: Vec<_> = specs.iter().map(|s| gen.generate(s, &c).unwrap()).collect();
        let f = format_f1(&specs, &outs, 0, true, &PunctSet::default());
        assert_eq!((f.ma_f1, f.mi_f1), (1.0, 1.0), "{strategy:?}");
        for out in &outs {
            for tok in out.iter().flatten() {
                assert!(!tok.starts_with('<'), "reserved marker {tok} emitted");
            }
        }
    }
}

#[test]
fn same_seed_same_output() {
    let (model, vocab) = setup(10);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let spec = parse_format("_ _ _ ,\n_ _ _ .").unwrap();
    for strategy in [Strategy::TopK, Strategy::Beam] {
        let c = DecodeConfig {
            strategy,
            seed: 42,
            ..DecodeConfig::default()
        };
        assert_eq!(gen.generate(&spec, &c).unwrap(), gen.generate(&spec, &c).unwrap());
    }
    let a = gen.generate(&spec, &DecodeConfig { seed: 1, ..DecodeConfig::default() }).unwrap();
    let differs = (2..12).any(|s| gen.generate(&spec, &DecodeConfig { seed: s, ..DecodeConfig::default() }).unwrap() != a);
    assert!(differs, "seed has no effect");
}

#[test]
fn generation_stops_at_max_len() {
    let (model, vocab) = setup(11);
    let mask = rigidverse::decoding::punct_mask(&vocab, &PunctSet::default());
    let f = spec_to_symbols(&parse_format("_ _ _ _ ,\n_ _ _ _ .").unwrap(), &vocab, &SymbolConfig::default()).unwrap();
    for strategy in [Strategy::TopK, Strategy::Beam] {
        let c = DecodeConfig {
            strategy,
            max_len: Some(3),
            ..DecodeConfig::default()
        };
        assert!(generate(&model, &f, &c, &mask).unwrap().len() <= 3);
    }
}

#[test]
fn batched_jobs_match_single_jobs() {
    let (model, vocab) = setup(12);
    let mask = rigidverse::decoding::punct_mask(&vocab, &PunctSet::default());
    let sc = model.config.symbol_config();
    let fa = spec_to_symbols(&parse_format("_ _ _ ,\n_ _ .").unwrap(), &vocab, &sc).unwrap();
    let fb = spec_to_symbols(&parse_format("_ love _ _ _ .").unwrap(), &vocab, &sc).unwrap();
    let c = DecodeConfig::default();
    let jobs = [Job { format: &fa, seed: 3 }, Job { format: &fb, seed: 4 }];
    let both = sample_many(&model, &jobs, &c, &mask).unwrap();
    for (i, job) in jobs.iter().enumerate() {
        assert_eq!(sample_many(&model, std::slice::from_ref(job), &c, &mask).unwrap()[0], both[i]);
    }
}

#[test]
fn polishing_with_everything_locked_is_a_fixed_point() {
    let (model, vocab) = setup(13);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let spec = parse_format("_ _ _ ,\n_ _ _ _ .").unwrap();
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
        let again = gen.polish(&prev, &lock, &BTreeMap::new(), &c).unwrap();
        assert_eq!(again, prev);
    }
}

#[test]
fn polishing_keeps_locked_words_in_place() {
    let (model, vocab) = setup(14);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let prev: Vec<Vec<String>> = ["love is not love ,", "bends with the remover to remove ."]
        .iter()
        .map(|l| l.split(' ').map(String::from).collect())
        .collect();
    let lens: Vec<usize> = prev.iter().map(Vec::len).collect();
    let lock: BTreeSet<usize> = [(0, 0), (0, 3), (1, 5)].iter().map(|&p| global_index(&lens, p)).collect();
    for seed in 0..4 {
        let out = gen.polish(&prev, &lock, &BTreeMap::new(), &DecodeConfig { seed, ..DecodeConfig::default() }).unwrap();
        assert_eq!((out[0][0].as_str(), out[0][3].as_str(), out[1][5].as_str()), ("love", "love", "remove"));
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), lens);
    }
    // Separators and out-of-range indices are not lockable.
    let sep = BTreeSet::from([lens[0]]);
    assert!(gen.polish(&prev, &sep, &BTreeMap::new(), &DecodeConfig::default()).is_err());
}

#[test]
fn unknown_fixed_tokens_are_reported() {
    let (model, vocab) = setup(15);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let err = gen.generate(&parse_format("_ zebra _ .").unwrap(), &DecodeConfig::default()).unwrap_err();
    assert!(err.to_string().contains("zebra"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let (model, vocab) = setup(16);
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let spec = parse_format("_ .").unwrap();
    for bad in [
        DecodeConfig { k: 0, ..DecodeConfig::default() },
        DecodeConfig { beam_width: 0, ..cfg(Strategy::Beam) },
        DecodeConfig { temperature: 0.0, ..DecodeConfig::default() },
    ] {
        assert!(gen.generate(&spec, &bad).is_err());
    }
}
