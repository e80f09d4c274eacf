//! Command-line entry points: `pretrain`, `finetune`, `generate`, `polish`,
//! `evaluate` and `serve`.
//!
//! Settings come from an optional flat `key=value` file (`--config`) with
//! command-line flags taking precedence. Keys are the long flag names. The
//! effective settings are echoed to stderr and saved next to every artifact.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 runtime failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use rigidverse::corpus::{build_vocab, load_corpus, PunctSet, Sample, TokenizeMode, Tokenizer, Vocab};
use rigidverse::decoding::{render_lines, DecodeConfig, Generator, Strategy};
use rigidverse::format::{global_index, parse_format_file, rhyme_map};
use rigidverse::metrics::{EvalReport, LmScorer};
use rigidverse::model::{Ablations, Model, ModelConfig};
use rigidverse::phonetics::{annotate_rhymes, Lang, Lexicon};
use rigidverse::pipeline::{evaluate, prepare_fitting, EvalConfig};
use rigidverse::training::{vocab_path, Phase, TrainConfig, Trainer, LAST_CHECKPOINT};
use rigidverse::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::FormatParse { .. }
            | Error::UnknownFixedTokens { .. }
            | Error::RhymeSlotOutOfRange { .. }
            | Error::InvalidLock(_)
            | Error::LineTooLong { .. }
            | Error::TooManyLines { .. }
            | Error::SequenceTooLong { .. }
            | Error::Checkpoint(_)
            | Error::EmptyCorpus
            | Error::Config(_) => EXIT_DATA,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn flag(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue).help(help)
}

fn training_args() -> Vec<Arg> {
    vec![
        opt("corpus", "training corpus: one sample per blank-line separated block"),
        opt("dev", "development corpus for perplexity tracking"),
        opt("out", "output directory for checkpoints and the log"),
        opt("ckpt", "initial checkpoint (weights only unless --resume)"),
        flag("resume", "continue the optimizer state and step count of --ckpt"),
        opt("lang", "en or zh (default en)"),
        opt("tokenize", "word or char (default: word for en, char for zh)"),
        opt("min-freq", "minimum token count for the vocabulary (default 1)"),
        opt("preset", "desk or full model size (default desk)"),
        opt("layers", "number of layers"),
        opt("d-model", "model width"),
        opt("heads", "attention heads"),
        opt("d-ff", "feed-forward width"),
        opt("max-len", "longest stream the model accepts"),
        opt("dropout", "dropout rate"),
        opt("ablate", "comma-separated symbol channels to drop: c,p,s"),
        flag("inverse-p", "count intra-line positions upward instead of toward the line end"),
        opt("reveal-rate", "share of word positions revealed to the format summary when pretraining"),
        opt("steps", "optimizer steps"),
        opt("batch-size", "sequences per batch"),
        opt("warmup", "warmup steps of the learning-rate schedule"),
        opt("lr-factor", "learning-rate multiplier"),
        opt("clip-norm", "global gradient-norm bound"),
        opt("eval-every", "steps between dev evaluations"),
        opt("checkpoint-every", "steps between checkpoints"),
        opt("seed", "random seed"),
    ]
}

fn decode_args() -> Vec<Arg> {
    vec![
        opt("ckpt", "model checkpoint"),
        opt("k", "top-k truncation (default 32)"),
        opt("beam", "beam width; switches from sampling to beam search"),
        opt("temperature", "softmax temperature (default 1.0)"),
        opt("seed", "random seed"),
        flag("hard-constrain", "force punctuation and line breaks from the format"),
    ]
}

pub fn command() -> Command {
    let config = opt("config", "flat key=value settings file; flags override it");
    Command::new("rigidverse")
        .about("Format-controlled text generation with symbol-augmented transformers")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("pretrain")
                .about("Masked-format pretraining on a generic corpus")
                .arg(config.clone())
                .args(training_args()),
        )
        .subcommand(
            Command::new("finetune")
                .about("Fine-tuning on a rhymed target corpus")
                .arg(config.clone())
                .args(training_args())
                .arg(opt("lexicon", "pronunciation table (cmudict or pinyin tsv)")),
        )
        .subcommand(
            Command::new("generate")
                .about("Fill one or more formats")
                .arg(config.clone())
                .args(decode_args())
                .arg(opt("format", "file of formats separated by blank lines"))
                .arg(opt("out", "result file (default: <format>.out)")),
        )
        .subcommand(
            Command::new("polish")
                .about("Regenerate a previous output keeping locked tokens")
                .arg(config.clone())
                .args(decode_args())
                .arg(opt("prev", "previous output: one line of text per sentence"))
                .arg(opt("lock", "positions to keep as line:index pairs, e.g. 0:3,1:5"))
                .arg(opt("lang", "en or zh (default en)"))
                .arg(opt("tokenize", "word or char"))
                .arg(opt("lexicon", "pronunciation table used to mark rhyme slots"))
                .arg(opt("out", "result file (default: <prev>.out)")),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Generate for every test format and score the outputs")
                .arg(config.clone())
                .args(decode_args())
                .arg(opt("corpus", "test corpus"))
                .arg(opt("lang", "en or zh (default en)"))
                .arg(opt("tokenize", "word or char"))
                .arg(opt("lexicon", "pronunciation table"))
                .arg(opt("scorer", "causal language model checkpoint used for integrity"))
                .arg(opt("delta", "allowed sentence-length difference (default 0)"))
                .arg(flag("no-punct-check", "ignore punctuation when matching sentences"))
                .arg(opt("out", "report file (default: eval.txt); JSON goes to <out>.json")),
        )
        .subcommand(
            Command::new("serve")
                .about("HTTP API for generation and polishing")
                .arg(config)
                .arg(opt("ckpt", "model checkpoint"))
                .arg(opt("addr", "listen address (default 127.0.0.1:8080)")),
        )
}

/// Effective settings: config file first, then flags given on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, known: &BTreeSet<String>) -> Outcome<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::data(format!("config line {}: expected key=value", i + 1)))?;
            let k = k.trim().to_string();
            if !known.contains(&k) || k == "config" {
                return Err(Failure::usage(format!("config line {}: unknown key `{k}`", i + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    fn from_matches(m: &ArgMatches, cmd: &Command) -> Outcome<Self> {
        let known: BTreeSet<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
        let mut s = match m.get_one::<String>("config") {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{path}: {e}")))?;
                Self::parse(&text, &known)?
            }
            None => Self::default(),
        };
        for arg in cmd.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "config" || m.value_source(id) != Some(ValueSource::CommandLine) {
                continue;
            }
            let v = match arg.get_action() {
                ArgAction::SetTrue => "true".to_string(),
                _ => m.get_one::<String>(id).cloned().unwrap_or_default(),
            };
            s.values.insert(id.to_string(), v);
        }
        Ok(s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Outcome<Option<T>> {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|_| Failure::usage(format!("invalid value `{v}` for {key}"))))
            .transpose()
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Outcome<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> Outcome<String> {
        self.values.get(key).cloned().ok_or_else(|| Failure::usage(format!("--{key} is required")))
    }

    pub fn flag(&self, key: &str) -> Outcome<bool> {
        self.or(key, false)
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = command().find_subcommand(name).expect("known subcommand").clone();
    let result = Settings::from_matches(sub, &cmd).and_then(|s| {
        for (k, v) in &s.values {
            eprintln!("config {k}={v}");
        }
        match name {
            "pretrain" => train(&s, Phase::Pretrain),
            "finetune" => train(&s, Phase::Finetune),
            "generate" => generate(&s),
            "polish" => polish(&s),
            "evaluate" => evaluate_cmd(&s),
            "serve" => serve(&s),
            _ => unreachable!(),
        }
    });
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("run with --help for usage");
            }
            f.code
        }
    }
}

fn lang(s: &Settings) -> Outcome<Lang> {
    Ok(s.get::<String>("lang")?.map(|l| l.parse::<Lang>()).transpose()?.unwrap_or(Lang::En))
}

fn tokenizer(s: &Settings) -> Outcome<Tokenizer> {
    let mode = match s.get::<String>("tokenize")? {
        Some(m) => m.parse::<TokenizeMode>()?,
        None => match lang(s)? {
            Lang::En => TokenizeMode::Word,
            Lang::Zh => TokenizeMode::Char,
        },
    };
    Ok(Tokenizer::new(mode))
}

fn lexicon(s: &Settings) -> Outcome<Lexicon> {
    let l = lang(s)?;
    Ok(match s.get::<String>("lexicon")? {
        Some(path) => Lexicon::load(l, path)?,
        None => Lexicon::bundled(l),
    })
}

fn load_model(path: &str) -> Outcome<(Model, Vocab)> {
    let model = Model::load(path)?;
    let vocab = Vocab::load(vocab_path(Path::new(path)))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Failure::data(format!(
            "{path}: vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn model_config(s: &Settings, vocab_size: usize) -> Outcome<ModelConfig> {
    let mut c = match s.or("preset", "desk".to_string())?.as_str() {
        "desk" => ModelConfig::desk(vocab_size),
        "full" => ModelConfig::full(vocab_size),
        other => return Err(Failure::usage(format!("unknown preset `{other}`"))),
    };
    c.layers = s.or("layers", c.layers)?;
    c.d_model = s.or("d-model", c.d_model)?;
    c.heads = s.or("heads", c.heads)?;
    c.d_ff = s.or("d-ff", c.d_ff)?;
    c.max_len = s.or("max-len", c.max_len)?;
    c.dropout = s.or("dropout", c.dropout)?;
    let mut ab = Ablations::default();
    if let Some(list) = s.get::<String>("ablate")? {
        for ch in list.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match ch {
                "c" => ab.use_c = false,
                "p" => ab.use_p = false,
                "s" => ab.use_s = false,
                other => return Err(Failure::usage(format!("unknown channel `{other}` in --ablate"))),
            }
        }
    }
    ab.inverse_p = s.flag("inverse-p")?;
    c.ablations = ab;
    c.validate()?;
    Ok(c)
}

fn train(s: &Settings, phase: Phase) -> Outcome<()> {
    let tok = tokenizer(s)?;
    let corpus = load_corpus(s.require("corpus")?, &tok)?;
    if corpus.samples.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let out = PathBuf::from(s.require("out")?);
    let (mut trainer, vocab) = match s.get::<String>("ckpt")? {
        Some(path) if s.flag("resume")? => {
            let vocab = Vocab::load(vocab_path(Path::new(&path)))?;
            (Trainer::resume(&path)?, vocab)
        }
        Some(path) => {
            let (model, vocab) = load_model(&path)?;
            (Trainer::new(model), vocab)
        }
        None => {
            let vocab = build_vocab(&corpus.samples, s.or("min-freq", 1)?);
            let model = Model::init(model_config(s, vocab.len())?, s.or("seed", 0)?)?;
            (Trainer::new(model), vocab)
        }
    };
    let lex = match phase {
        Phase::Pretrain => None,
        Phase::Finetune => Some(lexicon(s)?),
    };
    let mut sc = trainer.model.config.symbol_config();
    sc.punct = tok.punct.clone();
    let max_len = trainer.model.config.max_len;
    let (train_set, dropped) = prepare_fitting(corpus.samples, &vocab, lex.as_ref(), &sc, max_len)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} training samples that exceed the model limits");
    }
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let dev = match s.get::<String>("dev")? {
        Some(path) => prepare_fitting(load_corpus(path, &tok)?.samples, &vocab, lex.as_ref(), &sc, max_len)?.0.sequences,
        None => vec![],
    };
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        phase,
        reveal_rate: s.or("reveal-rate", d.reveal_rate)?,
        batch_size: s.or("batch-size", d.batch_size)?,
        max_steps: s.or("steps", d.max_steps)?,
        warmup_steps: s.or("warmup", d.warmup_steps)?,
        lr_factor: s.or("lr-factor", d.lr_factor)?,
        seed: s.or("seed", d.seed)?,
        checkpoint_every: s.or("checkpoint-every", d.checkpoint_every)?,
        eval_every: s.or("eval-every", d.eval_every)?,
        clip_norm: s.or("clip-norm", d.clip_norm)?,
        schedule_d_model: None,
    };
    fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    write(&out.join("config.txt"), &s.render())?;
    let report = trainer.fit(&train_set.sequences, &dev, &cfg, Some(&out), Some(&vocab))?;
    if let Some(last) = report.log.last() {
        eprintln!("{last}");
    }
    println!("{}", out.join(LAST_CHECKPOINT).display());
    Ok(())
}

fn decode_config(s: &Settings) -> Outcome<DecodeConfig> {
    let d = DecodeConfig::default();
    let beam: Option<usize> = s.get("beam")?;
    let cfg = DecodeConfig {
        strategy: if beam.is_some() { Strategy::Beam } else { Strategy::TopK },
        k: s.or("k", d.k)?,
        temperature: s.or("temperature", d.temperature)?,
        beam_width: beam.unwrap_or(d.beam_width),
        seed: s.or("seed", d.seed)?,
        hard_constrain: s.flag("hard-constrain")?,
        ..d
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn out_path(s: &Settings, input: &str) -> Outcome<PathBuf> {
    Ok(match s.get::<String>("out")? {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(format!("{input}.out")),
    })
}

fn generate(s: &Settings) -> Outcome<()> {
    let ckpt = s.require("ckpt")?;
    let format_path = s.require("format")?;
    let text = fs::read_to_string(&format_path).map_err(|e| Failure::data(format!("{format_path}: {e}")))?;
    let specs = parse_format_file(&text)?;
    let (model, vocab) = load_model(&ckpt)?;
    let cfg = decode_config(s)?;
    let gen = Generator::new(&model, &vocab, PunctSet::default());
    let outputs = match cfg.strategy {
        Strategy::TopK => gen.sample_all(&specs, &cfg)?,
        Strategy::Beam => specs.iter().map(|f| gen.generate(f, &cfg)).collect::<rigidverse::Result<_>>()?,
    };
    let mut body = String::new();
    for o in &outputs {
        let line = render_lines(o);
        println!("{line}");
        body.push_str(&line);
        body.push('\n');
    }
    let out = out_path(s, &format_path)?;
    write(&out, &body)?;
    write(&sidecar(&out), &s.render())
}

fn parse_locks(spec: &str, lens: &[usize]) -> Outcome<BTreeSet<usize>> {
    let mut lock = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let pos = part
            .split_once(':')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| Failure::usage(format!("bad lock `{part}`; expected line:index")))?;
        if lens.get(pos.0).is_none_or(|&n| pos.1 >= n) {
            return Err(Failure::data(format!("lock {part} is outside the previous output")));
        }
        lock.insert(global_index(lens, pos));
    }
    Ok(lock)
}

fn polish(s: &Settings) -> Outcome<()> {
    let prev_path = s.require("prev")?;
    let text = fs::read_to_string(&prev_path).map_err(|e| Failure::data(format!("{prev_path}: {e}")))?;
    let tok = tokenizer(s)?;
    let lines: Vec<Vec<String>> = text
        .lines()
        .flat_map(|l| l.split(" / "))
        .map(|l| tok.tokenize(l))
        .filter(|l| !l.is_empty())
        .collect();
    let prev = Sample::new(lines).ok_or_else(|| Failure::data(format!("{prev_path}: no usable text")))?;
    let lens: Vec<usize> = prev.lines.iter().map(Vec::len).collect();
    let lock = parse_locks(&s.or("lock", String::new())?, &lens)?;
    let rhyme = rhyme_map(&annotate_rhymes(&prev, &lexicon(s)?, &tok.punct));
    let (model, vocab) = load_model(&s.require("ckpt")?)?;
    let gen = Generator::new(&model, &vocab, tok.punct.clone());
    let out_lines = gen.polish(&prev.lines, &lock, &rhyme, &decode_config(s)?)?;
    let line = render_lines(&out_lines);
    println!("{line}");
    let out = out_path(s, &prev_path)?;
    write(&out, &format!("{line}\n"))?;
    write(&sidecar(&out), &s.render())
}

fn evaluate_cmd(s: &Settings) -> Outcome<()> {
    let tok = tokenizer(s)?;
    let corpus = load_corpus(s.require("corpus")?, &tok)?;
    let (model, vocab) = load_model(&s.require("ckpt")?)?;
    let lex = lexicon(s)?;
    let mut sc = model.config.symbol_config();
    sc.punct = tok.punct.clone();
    let (test, dropped) = prepare_fitting(corpus.samples, &vocab, Some(&lex), &sc, model.config.max_len)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} test samples that exceed the model limits");
    }
    if test.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let scorer_parts = match s.get::<String>("scorer")? {
        Some(p) => Some(load_model(&p)?),
        None => {
            log::warn!("no --scorer given; integrity is scored by the evaluated model");
            None
        }
    };
    let (sm, sv) = scorer_parts.as_ref().map_or((&model, &vocab), |(m, v)| (m, v));
    let scorer = LmScorer {
        model: sm,
        vocab: sv,
        punct: tok.punct.clone(),
    };
    let cfg = EvalConfig {
        decode: decode_config(s)?,
        delta: s.or("delta", 0)?,
        check_punct: !s.flag("no-punct-check")?,
    };
    let eval = evaluate(&model, &scorer, &vocab, &test, &lex, &cfg)?;
    let report: &EvalReport = &eval.report;
    print!("{report}");
    let out = PathBuf::from(s.or("out", "eval.txt".to_string())?);
    write(&out, &report.to_string())?;
    let mut json = out.as_os_str().to_owned();
    json.push(".json");
    write(Path::new(&json), &report.to_json())?;
    write(&sidecar(&out), &s.render())
}

fn serve(s: &Settings) -> Outcome<()> {
    let (model, vocab) = load_model(&s.require("ckpt")?)?;
    let addr: std::net::SocketAddr = s.or("addr", "127.0.0.1:8080".parse().expect("valid default"))?;
    let state = Arc::new(rigidverse_service::AppState::new(model, vocab, PunctSet::default()));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    rt.block_on(rigidverse_service::serve(addr, state)).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })
}

/// Settings keys accepted by a subcommand.
pub fn known_keys(subcommand: &str) -> Option<BTreeSet<String>> {
    command()
        .find_subcommand(subcommand)
        .map(|c| c.get_arguments().map(|a| a.get_id().to_string()).collect())
}
