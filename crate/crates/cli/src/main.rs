use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sanm_core::analysis::{analyze, band_mass, bench_scaling, evaluate, greedy_decode, write_dump, BenchKind};
use sanm_core::frontend::{
    prepare_features, read_feature_file, write_corpus, FeatureSpec, Split, SyntheticTask, Utterance,
};
use sanm_core::kv::KeyValues;
use sanm_core::model::{Checkpoint, Model, ModelConfig, Site, SublayerKind, Vocabulary, BOS};
use sanm_core::trainer::{prepare_examples, train, TrainConfig, CHECKPOINT_FILE};
use sanm_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

const TRAIN_CORPUS: &str = "train.feats";
const TEST_CORPUS: &str = "test.feats";

/// Train, evaluate, benchmark and inspect SAN-M / DFSMN / SAN encoder-decoders.
#[derive(Parser, Debug)]
#[command(name = "sanm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a synthetic task described by a key-value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for the held-out evaluation after training.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Greedy-decode a feature corpus and report the character error rate.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long)]
        threads: Option<usize>,
        /// Write `id<TAB>hypothesis<TAB>reference` lines here.
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Time the forward pass of each mechanism against sequence length.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "san,dfsmn,sanm")]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention maps and memory filters for one utterance.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
        /// Look the utterance up here instead of regenerating it from the
        /// task stored in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also export every head separately.
        #[arg(long)]
        per_head: bool,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, out, threads } => run_train(&config, &out, threads),
        Command::Eval {
            ckpt,
            corpus,
            max_len,
            threads,
            hyp,
        } => run_eval(&ckpt, &corpus, max_len, threads, hyp.as_deref()),
        Command::Bench {
            kinds,
            lengths,
            reps,
            d,
            heads,
            out,
        } => run_bench(&kinds, &lengths, reps, d, heads, out.as_deref()),
        Command::Viz {
            ckpt,
            utt,
            out,
            corpus,
            per_head,
        } => run_viz(&ckpt, &utt, &out, corpus.as_deref(), per_head),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sanm: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn default_threads(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Everything a config file can set.
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    task: SyntheticTask,
}

const SECTIONS: &[&str] = &["model", "train", "schedule", "task"];

/// Reads a config file. Unset keys keep the defaults: a tiny SAN-M/SAN-M
/// model sized to the task vocabulary, the default training recipe and the
/// default synthetic task.
fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })?;
    let kv = KeyValues::parse(&text)?;
    for key in kv.keys() {
        let section = key.split_once('.').map(|(s, _)| s);
        if !section.is_some_and(|s| SECTIONS.contains(&s)) {
            return Err(usage(format!(
                "config key {key:?} is not in one of the sections {}",
                SECTIONS.join(", ")
            )));
        }
    }
    let task = SyntheticTask::default().update_from_kv(&kv.section("task"))?;
    task.validate()?;
    let mut base = ModelConfig::tiny(SublayerKind::Sanm, SublayerKind::Sanm);
    base.vocab_size = task.vocab_size();
    let model = base.update_from_kv(&kv.section("model"))?;
    model.validate()?;
    if model.vocab_size < task.vocab_size() {
        return Err(usage(format!(
            "model.vocab_size {} is smaller than the task vocabulary {}",
            model.vocab_size,
            task.vocab_size()
        )));
    }
    let train = TrainConfig::default().update_from_kv(&kv.section("train"), &kv.section("schedule"))?;
    train.validate()?;
    Ok(RunConfig { model, train, task })
}

fn run_train(config: &Path, out: &Path, threads: Option<usize>) -> CliResult {
    let RunConfig { model, train: tcfg, task } = load_config(config)?;
    fs::create_dir_all(out).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", out.display()),
    })?;
    let train_utts = task.generate_split(Split::Train, task.train_size)?;
    let test_utts = task.generate_split(Split::Test, task.test_size)?;
    write_corpus(&out.join(TRAIN_CORPUS), &train_utts, task.base_dim)?;
    write_corpus(&out.join(TEST_CORPUS), &test_utts, task.base_dim)?;

    let spec = FeatureSpec {
        base_dim: task.base_dim,
        ..FeatureSpec::default()
    };
    if model.input_dim != spec.stacked_dim() {
        return Err(usage(format!(
            "model.input_dim {} does not match the stacked feature width {}",
            model.input_dim,
            spec.stacked_dim()
        )));
    }
    let train_set = prepare_examples(&train_utts, &spec)?;
    let mut meta = task.to_kv().with_prefix("task");
    meta.merge(&tcfg.to_kv());
    let outcome = train(&model, &train_set, &tcfg, Some((out, &meta)))?;
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.4} lr {:.3e}", last.step, last.loss, last.lr);
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());

    if !test_utts.is_empty() {
        let test_set = prepare_examples(&test_utts, &spec)?;
        let max_len = 2 * task.max_tokens + 2;
        let report = evaluate(&outcome.model, &test_set, max_len, default_threads(threads))?;
        println!(
            "test utterances {} edits {} tokens {} cer {:.4}",
            test_set.len(),
            report.edits,
            report.ref_tokens,
            report.cer
        );
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> CliResult<(Model, KeyValues)> {
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::new(ck.cfg, ck.params)?;
    Ok((model, ck.meta))
}

/// The synthetic task recorded in a checkpoint, if any.
fn task_of(meta: &KeyValues) -> CliResult<Option<SyntheticTask>> {
    let section = meta.section("task");
    if section.keys().next().is_none() {
        return Ok(None);
    }
    Ok(Some(SyntheticTask::default().update_from_kv(&section)?))
}

fn vocabulary(model: &Model, meta: &KeyValues) -> CliResult<Option<Vocabulary>> {
    Ok(task_of(meta)?
        .filter(|t| t.vocab_size() <= model.cfg.vocab_size)
        .map(|t| Vocabulary::synthetic(t.alphabet)))
}

fn render(vocab: Option<&Vocabulary>, ids: &[usize]) -> String {
    match vocab {
        Some(v) => v.render(ids),
        None => ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    }
}

fn run_eval(ckpt: &Path, corpus: &Path, max_len: usize, threads: Option<usize>, hyp: Option<&Path>) -> CliResult {
    let (model, meta) = load_model(ckpt)?;
    let utts = read_feature_file(corpus)?;
    if utts.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("{}: corpus holds no utterances", corpus.display()),
        });
    }
    let spec = FeatureSpec::default();
    if model.cfg.input_dim != spec.stacked_dim() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "checkpoint expects {}-wide inputs, corpus stacks to {}",
                model.cfg.input_dim,
                spec.stacked_dim()
            ),
        });
    }
    let data = prepare_examples(&utts, &spec)?;
    let report = evaluate(&model, &data, max_len, default_threads(threads))?;
    if let Some(path) = hyp {
        let vocab = vocabulary(&model, &meta)?;
        let mut body = String::new();
        for (u, h) in utts.iter().zip(&report.hypotheses) {
            body.push_str(&format!(
                "{}\t{}\t{}\n",
                u.id,
                render(vocab.as_ref(), h),
                render(vocab.as_ref(), &u.tokens)
            ));
        }
        fs::write(path, body).map_err(|e| Failure {
            code: EXIT_DATA,
            message: format!("{}: {e}", path.display()),
        })?;
    }
    println!(
        "utterances {} edits {} tokens {} cer {:.4}",
        utts.len(),
        report.edits,
        report.ref_tokens,
        report.cer
    );
    Ok(())
}

fn run_bench(kinds: &[String], lengths: &[usize], reps: usize, d: usize, heads: usize, out: Option<&Path>) -> CliResult {
    let kinds = kinds
        .iter()
        .map(|k| k.parse::<BenchKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let report = bench_scaling(&kinds, lengths, d, heads, reps)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| Failure {
            code: EXIT_DATA,
            message: format!("{}: {e}", path.display()),
        })?;
    }
    Ok(())
}

fn find_utterance(utt: &str, corpus: Option<&Path>, meta: &KeyValues) -> CliResult<Utterance> {
    match corpus {
        Some(path) => read_feature_file(path)?
            .into_iter()
            .find(|u| u.id == utt)
            .ok_or_else(|| Failure {
                code: EXIT_DATA,
                message: format!("{}: no utterance {utt:?}", path.display()),
            }),
        None => {
            let task = task_of(meta)?
                .ok_or_else(|| usage("checkpoint carries no synthetic task; pass --corpus"))?;
            Ok(task.utterance_by_id(utt)?)
        }
    }
}

fn run_viz(ckpt: &Path, utt: &str, out: &Path, corpus: Option<&Path>, per_head: bool) -> CliResult {
    let (model, meta) = load_model(ckpt)?;
    let u = find_utterance(utt, corpus, &meta)?;
    let feats = prepare_features(&u.feats, &FeatureSpec::default())?;
    let mut input = vec![BOS];
    input.extend(&u.tokens);
    let dump = analyze(&model, &feats, &input, &u.id)?;
    let files = write_dump(&dump, out, per_head)?;

    let vocab = vocabulary(&model, &meta)?;
    let z = model.encode(&feats)?;
    let hyp = greedy_decode(&model, &z, 2 * u.tokens.len() + 2)?;
    println!("reference  {}", render(vocab.as_ref(), &u.tokens));
    println!("hypothesis {}", render(vocab.as_ref(), &hyp));
    for m in dump.attention.iter().filter(|m| m.site == Site::EncoderSelf) {
        println!("enc layer {} band(2) mass {:.3}", m.layer, band_mass(&m.weights, 2)?);
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}
