//! The `xling` command line: train / eval-align / nn / export-emb /
//! perplexity / project. Every metric printed here is the value of the
//! corresponding library call; the CLI adds no computation of its own.
//!
//! Reports are tab-separated lines on standard output (optionally copied
//! to a file) and contain no timing fields, so a rerun with the same seed
//! produces the same bytes. Progress and timings go to standard error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::align::{
    load_dictionary, nearest_cross_space, nearest_in_space, precision_at_k, CslsConfig,
    EmbeddingSpace,
};
use crate::corpus::{encode_sentence, tokenize_line, Corpus, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::extract_embeddings;
use crate::project::project_embeddings;
use crate::serialization::{export_embeddings, import_embeddings, load_checkpoint, Checkpoint};
use crate::trainer::{train, train_from, EvalCadence, TrainConfig};

#[derive(Parser)]
#[command(
    name = "xling",
    version,
    about = "Cross-lingual word embeddings from jointly trained language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Copy the report lines to this file as well as standard output.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multilingual model on monolingual corpora.
    Train(TrainArgs),
    /// Bilingual lexicon induction: precision@k against a dictionary.
    EvalAlign(EvalAlignArgs),
    /// Nearest neighbors of a word, within a space or across two spaces.
    Nn(NnArgs),
    /// Export one language's embeddings from a checkpoint as text.
    ExportEmb(ExportEmbArgs),
    /// Perplexity of a text file under a trained model.
    Perplexity(PerplexityArgs),
    /// Project embedding spaces to 2-D coordinates (PCA).
    Project(ProjectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus as `lang:path`; repeat once per language (at least two).
    #[arg(long = "lang", value_name = "LANG:PATH", required = true)]
    langs: Vec<String>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    /// Vocabulary threshold, global (`--min-count 3`) or per language
    /// (`--min-count en:10`); repeatable.
    #[arg(long = "min-count", value_name = "N|LANG:N")]
    min_count: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Embedding and hidden size.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Truncate sentences longer than this many tokens (0 = unlimited).
    #[arg(long, default_value_t = 0)]
    max_len: usize,
    /// Skip the end-of-sentence predictions in the loss.
    #[arg(long)]
    no_eos_loss: bool,
    /// `epoch`, or a batch count for mid-epoch progress lines.
    #[arg(long, default_value = "epoch")]
    eval_every: String,
    /// Source words scored by the validation metric.
    #[arg(long, default_value_t = 3000)]
    val_words: usize,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    /// Output directory for checkpoints and the history log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalAlignArgs {
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    /// Gold dictionary, one "source target" pair per line.
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    /// Precision cutoffs; repeatable.
    #[arg(long = "k", default_values_t = [1usize, 5])]
    ks: Vec<usize>,
}

#[derive(Args)]
struct NnArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Retrieve from this space instead (cross-lingual, CSLS scores).
    #[arg(long)]
    cross: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
}

#[derive(Args)]
struct ExportEmbArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lang: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PerplexityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lang: String,
    /// UTF-8 text, one sentence per line.
    #[arg(long)]
    text: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// Embedding file, optionally labeled `lang:path`; repeatable.
    #[arg(long = "emb", required = true)]
    embs: Vec<String>,
    /// Words taken from the top of each file.
    #[arg(long, default_value_t = 1000)]
    n_points: usize,
}

/// Collects report lines and mirrors them to stdout plus an optional file.
struct Reporter {
    lines: Vec<String>,
    file: Option<PathBuf>,
}

impl Reporter {
    fn new(file: Option<PathBuf>) -> Self {
        Reporter { lines: Vec::new(), file }
    }

    fn line(&mut self, s: impl Into<String>) {
        let s = s.into();
        println!("{s}");
        self.lines.push(s);
    }

    fn finish(self) -> Result<()> {
        if let Some(path) = self.file {
            let mut f = std::fs::File::create(path)?;
            for l in &self.lines {
                writeln!(f, "{l}")?;
            }
        }
        Ok(())
    }
}

/// Run with the given argv (program name first). Returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors and 0 for --help/--version
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut reporter = Reporter::new(cli.report.clone());
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args, &mut reporter),
        Command::EvalAlign(args) => cmd_eval_align(args, &mut reporter),
        Command::Nn(args) => cmd_nn(args, &mut reporter),
        Command::ExportEmb(args) => cmd_export_emb(args, &mut reporter),
        Command::Perplexity(args) => cmd_perplexity(args, &mut reporter),
        Command::Project(args) => cmd_project(args, &mut reporter),
    };
    match outcome.and_then(|()| reporter.finish()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("xling: {e}");
            e.exit_code()
        }
    }
}

fn parse_lang_spec(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once(':') {
        Some((lang, path)) if !lang.is_empty() && !path.is_empty() => {
            Ok((lang.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::Config(format!(
            "expected lang:path, got {spec:?}"
        ))),
    }
}

fn parse_min_counts(specs: &[String], langs: &[String]) -> Result<Vec<usize>> {
    let mut global = 3usize;
    let mut per_lang: std::collections::HashMap<&str, usize> = Default::default();
    for spec in specs {
        match spec.split_once(':') {
            Some((lang, n)) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad min-count {spec:?}")))?;
                if !langs.iter().any(|l| l == lang) {
                    return Err(Error::Config(format!(
                        "min-count for unknown language {lang:?}"
                    )));
                }
                per_lang.insert(lang, n);
            }
            None => {
                global = spec
                    .parse()
                    .map_err(|_| Error::Config(format!("bad min-count {spec:?}")))?;
            }
        }
    }
    Ok(langs
        .iter()
        .map(|l| per_lang.get(l.as_str()).copied().unwrap_or(global))
        .collect())
}

fn cmd_train(args: TrainArgs, reporter: &mut Reporter) -> Result<()> {
    let specs: Vec<(String, PathBuf)> = args
        .langs
        .iter()
        .map(|s| parse_lang_spec(s))
        .collect::<Result<_>>()?;
    if specs.len() < 2 {
        return Err(Error::Config("at least two --lang corpora required".into()));
    }
    let langs: Vec<String> = specs.iter().map(|(l, _)| l.clone()).collect();
    {
        let mut seen = std::collections::HashSet::new();
        for l in &langs {
            if !seen.insert(l) {
                return Err(Error::Config(format!("language {l:?} given twice")));
            }
        }
    }
    let min_counts = parse_min_counts(&args.min_count, &langs)?;
    let eval_cadence = match args.eval_every.as_str() {
        "epoch" => EvalCadence::Epoch,
        n => EvalCadence::Batches(
            n.parse()
                .map_err(|_| Error::Config(format!("bad --eval-every {n:?}")))?,
        ),
    };

    let mut corpora = Vec::new();
    for ((lang, path), &mc) in specs.iter().zip(&min_counts) {
        let corpus = Corpus::from_file(path, lang, mc, args.max_len)?;
        eprintln!(
            "{}: {} sentences, vocabulary {} (min count {})",
            lang,
            corpus.sentences.len(),
            corpus.vocab.len(),
            mc
        );
        corpora.push(corpus);
    }

    let cfg = TrainConfig {
        dim: args.dim,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        clip: args.clip,
        dropout: args.dropout,
        seed: args.seed,
        eos_loss: !args.no_eos_loss,
        checkpoint_dir: Some(args.out.clone()),
        eval_cadence,
        val_words: args.val_words,
        csls_k: args.csls_k,
    };

    reporter.line(format!("# train\tseed\t{}", cfg.seed));
    reporter.line(format!(
        "# train\tconfig\tdim={} epochs={} batch={} lr={} clip={} dropout={} eos_loss={}",
        cfg.dim, cfg.epochs, cfg.batch_size, cfg.lr, cfg.clip, cfg.dropout, cfg.eos_loss
    ));
    for (c, &mc) in corpora.iter().zip(&min_counts) {
        reporter.line(format!(
            "# train\tcorpus\t{} sentences={} vocab={} min_count={}",
            c.lang,
            c.sentences.len(),
            c.vocab.len(),
            mc
        ));
    }

    let history = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            check_resume_compatible(&ckpt, &cfg, &corpora)?;
            eprintln!("resuming at epoch {}", ckpt.next_epoch + 1);
            let (_, history) = train_from::<f32>(&cfg, &corpora, ckpt.params, ckpt.next_epoch)?;
            history
        }
        None => {
            let (_, history) = train::<f32>(&cfg, &corpora)?;
            history
        }
    };

    for line in history.to_tsv().lines() {
        reporter.line(line);
    }
    std::fs::write(args.out.join("history.tsv"), history.to_tsv())?;
    reporter.line(format!(
        "# train\tcheckpoints\t{}",
        args.out.join("last.ckpt").display()
    ));
    Ok(())
}

fn check_resume_compatible(ckpt: &Checkpoint, cfg: &TrainConfig, corpora: &[Corpus]) -> Result<()> {
    let want = cfg.model_config(corpora.iter().map(|c| c.lang.clone()).collect());
    if ckpt.params.config != want {
        return Err(Error::Config(
            "checkpoint model configuration differs from the requested one".into(),
        ));
    }
    if ckpt.seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, not {}",
            ckpt.seed, cfg.seed
        )));
    }
    for (vocab, corpus) in ckpt.vocabs.iter().zip(corpora) {
        if *vocab != corpus.vocab {
            return Err(Error::Config(format!(
                "rebuilt vocabulary for {:?} does not match the checkpoint",
                corpus.lang
            )));
        }
    }
    Ok(())
}

fn cmd_eval_align(args: EvalAlignArgs, reporter: &mut Reporter) -> Result<()> {
    let src = import_embeddings(&args.src_emb)?.without_token(UNK_TOKEN);
    let tgt = import_embeddings(&args.tgt_emb)?.without_token(UNK_TOKEN);
    let (task, stats) = load_dictionary(&args.dict, &src, &tgt)?;
    reporter.line(format!("pairs_retained\t{}", stats.retained));
    reporter.line(format!("pairs_dropped\t{}", stats.dropped));
    if task.is_empty() {
        return Err(Error::Config(
            "no dictionary pair is covered by both vocabularies".into(),
        ));
    }
    let cfg = CslsConfig {
        k: args.csls_k,
        omit_query_penalty: true,
    };
    for &k in &args.ks {
        let p = precision_at_k(&task, &src, &tgt, &cfg, k)?;
        reporter.line(format!("p@{k}\t{p:.4}"));
    }
    Ok(())
}

fn cmd_nn(args: NnArgs, reporter: &mut Reporter) -> Result<()> {
    let space = import_embeddings(&args.emb)?;
    match &args.cross {
        None => {
            let hits = nearest_in_space(&space, &args.query, args.k)?;
            for (rank, (idx, sim)) in hits.iter().enumerate() {
                reporter.line(format!("{}\t{}\t{:.6}", rank + 1, space.token(*idx), sim));
            }
        }
        Some(other) => {
            let tgt = import_embeddings(other)?.without_token(UNK_TOKEN);
            let cfg = CslsConfig {
                k: args.csls_k,
                omit_query_penalty: true,
            };
            let hits = nearest_cross_space(&space, &args.query, &tgt, &cfg, args.k)?;
            for (rank, (idx, score)) in hits.iter().enumerate() {
                reporter.line(format!("{}\t{}\t{:.6}", rank + 1, tgt.token(*idx), score));
            }
        }
    }
    Ok(())
}

fn cmd_export_emb(args: ExportEmbArgs, reporter: &mut Reporter) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let vocab = ckpt
        .vocabs
        .iter()
        .find(|v| v.lang() == args.lang)
        .ok_or_else(|| Error::UnknownLanguage(args.lang.clone()))?;
    let space = extract_embeddings(&ckpt.params, &args.lang, vocab)?;
    export_embeddings(&space, &args.out)?;
    reporter.line(format!(
        "exported\t{}\t{} {}\t{}",
        args.lang,
        space.len(),
        space.dim(),
        args.out.display()
    ));
    Ok(())
}

fn cmd_perplexity(args: PerplexityArgs, reporter: &mut Reporter) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let vocab = ckpt
        .vocabs
        .iter()
        .find(|v| v.lang() == args.lang)
        .ok_or_else(|| Error::UnknownLanguage(args.lang.clone()))?
        .clone();
    let lines = crate::corpus::read_lines(&args.text)?;
    let sentences: Vec<_> = lines
        .iter()
        .filter_map(|l| encode_sentence(&vocab, &tokenize_line(l)))
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let corpus = Corpus {
        lang: args.lang.clone(),
        sentences,
        vocab,
    };
    let ppl = crate::trainer::perplexity(&ckpt.params, &corpus, &args.lang)?;
    reporter.line(format!("perplexity\t{}\t{:.6}", args.lang, ppl));
    Ok(())
}

/// `lang:path` when a plain label precedes the colon; otherwise the whole
/// spec is a path and the language defaults to the file stem.
fn parse_emb_spec(spec: &str) -> (Option<String>, PathBuf) {
    if let Some((lang, path)) = spec.split_once(':') {
        if !lang.is_empty() && !path.is_empty() && !lang.contains('/') && !lang.contains('\\') {
            return (Some(lang.to_string()), PathBuf::from(path));
        }
    }
    (None, PathBuf::from(spec))
}

fn cmd_project(args: ProjectArgs, reporter: &mut Reporter) -> Result<()> {
    let mut spaces = Vec::new();
    for spec in &args.embs {
        let (label, path) = parse_emb_spec(spec);
        let mut space = import_embeddings(&path)?;
        if let Some(lang) = label {
            space.lang = lang;
        }
        spaces.push(space);
    }
    let points = project_embeddings(&spaces, args.n_points)?;
    for p in &points {
        reporter.line(format!("{} {} {:.6} {:.6}", p.lang, p.token, p.x, p.y));
    }
    Ok(())
}
