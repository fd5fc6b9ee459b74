//! The training loop: alternating per-language mini-batches, joint-norm
//! clipping, plain SGD, per-epoch checkpoints, perplexity, and the
//! dictionary-free CSLS validation metric used for model selection.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{csls_rows, CslsConfig};
use crate::autograd::{clip_global_norm, sgd_step, Mode, Real, Tape, Tensor};
use crate::corpus::{interleave, make_batches, Batch, Corpus, Vocabulary, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::model::{batch_nll, batch_nll_sum, extract_embeddings, init_params, ModelConfig, ModelParams};
use crate::serialization::{save_checkpoint, Checkpoint};

/// When to print mid-training validation diagnostics. History records are
/// always per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalCadence {
    Epoch,
    Batches(usize),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Embedding and hidden size (they are equal by construction).
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub dropout: f64,
    pub seed: u64,
    pub eos_loss: bool,
    /// Where `last.ckpt` / `best.ckpt` go; no checkpoints when absent.
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_cadence: EvalCadence,
    /// Source words considered by the validation metric.
    pub val_words: usize,
    /// CSLS neighborhood size.
    pub csls_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 300,
            epochs: 10,
            batch_size: 64,
            lr: 1.0,
            clip: 5.0,
            dropout: 0.3,
            seed: 1,
            eos_loss: true,
            checkpoint_dir: None,
            eval_cadence: EvalCadence::Epoch,
            val_words: 3000,
            csls_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, languages: Vec<String>) -> ModelConfig {
        let mut cfg = ModelConfig::new(languages).with_dim(self.dim);
        cfg.dropout = self.dropout;
        cfg.eos_loss = self.eos_loss;
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Ok(()); // a zero-epoch run only initializes
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr < 0.0 || self.clip <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and clip > 0".into()));
        }
        Ok(())
    }
}

/// One completed epoch. Wall time is informational and excluded from the
/// canonical log so identical runs produce identical logs.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-prediction training loss per language, in language order.
    pub train_loss: Vec<(String, f64)>,
    /// Prediction-weighted mean over all languages.
    pub pooled_train_loss: f64,
    pub perplexity: Vec<(String, f64)>,
    /// `(src, tgt, score)` for every ordered language pair.
    pub validation: Vec<(String, String, f64)>,
    /// Optimizer steps taken this epoch.
    pub steps: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Line-oriented tab-separated log: `epoch  metric  key  value`.
    /// Deterministic for a fixed seed (no timing fields).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            for (lang, loss) in &r.train_loss {
                out.push_str(&format!("{}\ttrain_loss\t{}\t{:.6}\n", r.epoch, lang, loss));
            }
            out.push_str(&format!(
                "{}\ttrain_loss\tall\t{:.6}\n",
                r.epoch, r.pooled_train_loss
            ));
            for (lang, ppl) in &r.perplexity {
                out.push_str(&format!("{}\tppl\t{}\t{:.6}\n", r.epoch, lang, ppl));
            }
            for (src, tgt, score) in &r.validation {
                out.push_str(&format!(
                    "{}\tval_csls\t{}->{}\t{:.6}\n",
                    r.epoch, src, tgt, score
                ));
            }
            out.push_str(&format!("{}\tsteps\tall\t{}\n", r.epoch, r.steps));
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream derivation: every generator in a run is a pure
/// function of the base seed plus its purpose coordinates, so a run can be
/// resumed at any epoch boundary and replay identically.
fn derive_seed(base: u64, purpose: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(purpose));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_DROPOUT: u64 = 2;

fn shuffle_seed(base: u64, epoch: usize, lang: usize, cycle: usize) -> u64 {
    derive_seed(
        base,
        PURPOSE_SHUFFLE,
        epoch as u64,
        ((lang as u64) << 32) | cycle as u64,
    )
}

/// Forward + backward + gradient collection for one batch. Returns the
/// mean loss, the prediction count and per-tensor gradients in canonical
/// order (`None` for tensors the batch never touched).
fn run_batch<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, Vec<Option<Tensor<F>>>)> {
    let mut tape: Tape<'_, F> = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (loss_var, n) = batch_nll(&mut tape, &bound, batch, &mut Mode::Train(dropout_rng))?;
    let loss = tape.scalar(loss_var)?;
    tape.backward(loss_var)?;
    let grads = bound
        .all_vars()
        .iter()
        .map(|&v| tape.take_grad(v))
        .collect();
    Ok((loss, n, grads))
}

fn apply_update<F: Real>(
    params: &mut ModelParams<F>,
    grads: Vec<Option<Tensor<F>>>,
    clip: f64,
    lr: f64,
) -> Result<()> {
    let mut indices = Vec::new();
    let mut live = Vec::new();
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            indices.push(i);
            live.push(g);
        }
    }
    clip_global_norm(&mut live, clip)?;
    let mut selected: Vec<&mut Tensor<F>> = params
        .tensors_mut()
        .into_iter()
        .enumerate()
        .filter_map(|(i, t)| indices.contains(&i).then_some(t))
        .collect();
    sgd_step(&mut selected, &live, lr)
}

/// Train a fresh model on one corpus per language.
pub fn train<F: Real>(cfg: &TrainConfig, corpora: &[Corpus]) -> Result<(ModelParams<F>, TrainHistory)> {
    let languages: Vec<String> = corpora.iter().map(|c| c.lang.clone()).collect();
    let model_cfg = cfg.model_config(languages);
    let sizes: Vec<usize> = corpora.iter().map(|c| c.vocab.len()).collect();
    let params = init_params(&model_cfg, &sizes, cfg.seed)?;
    train_from(cfg, corpora, params, 0)
}

/// Continue training existing parameters from `start_epoch` (0-based).
/// With the same seed this replays exactly what an uninterrupted run would
/// have done from that epoch.
pub fn train_from<F: Real>(
    cfg: &TrainConfig,
    corpora: &[Corpus],
    mut params: ModelParams<F>,
    start_epoch: usize,
) -> Result<(ModelParams<F>, TrainHistory)> {
    cfg.validate()?;
    if corpora.len() < 2 {
        return Err(Error::Config("training requires at least two languages".into()));
    }
    for c in corpora {
        params.lang_index(&c.lang)?;
        if c.sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
    }
    let vocabs: Vec<Vocabulary> = corpora.iter().map(|c| c.vocab.clone()).collect();
    let mut history = TrainHistory::default();
    let mut best_val = f64::NEG_INFINITY;

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        if cfg.epochs == start_epoch || cfg.epochs == 0 {
            // Nothing to train; still leave a loadable checkpoint behind.
            write_checkpoint(&params, &vocabs, start_epoch, cfg.seed, dir, "last.ckpt")?;
        }
    }

    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let streams: Vec<Vec<Batch>> = corpora
            .iter()
            .enumerate()
            .map(|(li, c)| make_batches(c, cfg.batch_size, shuffle_seed(cfg.seed, epoch, li, 0)))
            .collect::<Result<_>>()?;
        let schedule = interleave(streams, |li, cycle| {
            make_batches(&corpora[li], cfg.batch_size, shuffle_seed(cfg.seed, epoch, li, cycle))
        })?;
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PURPOSE_DROPOUT, epoch as u64, 0));

        let mut per_lang: HashMap<String, (f64, usize)> = HashMap::new();
        let mut steps = 0usize;
        for (bi, batch) in schedule.iter().enumerate() {
            let (loss, n, grads) = run_batch(&params, batch, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi + 1,
                    lang: batch.lang.clone(),
                    value: loss,
                });
            }
            apply_update(&mut params, grads, cfg.clip, cfg.lr)?;
            steps += 1;
            let slot = per_lang.entry(batch.lang.clone()).or_insert((0.0, 0));
            slot.0 += loss * n as f64;
            slot.1 += n;
            if let EvalCadence::Batches(every) = cfg.eval_cadence {
                if every > 0 && (bi + 1) % every == 0 {
                    eprintln!(
                        "epoch {} batch {}/{}: {} loss {:.4}",
                        epoch + 1,
                        bi + 1,
                        schedule.len(),
                        batch.lang,
                        loss
                    );
                }
            }
        }

        let train_loss: Vec<(String, f64)> = corpora
            .iter()
            .map(|c| {
                let (sum, n) = per_lang.get(&c.lang).copied().unwrap_or((0.0, 0));
                (c.lang.clone(), if n > 0 { sum / n as f64 } else { f64::NAN })
            })
            .collect();
        let (pool_sum, pool_n) = per_lang
            .values()
            .fold((0.0, 0usize), |(s, n), (ls, ln)| (s + ls, n + ln));
        let pooled = pool_sum / pool_n.max(1) as f64;

        let mut ppl = Vec::new();
        for c in corpora {
            ppl.push((c.lang.clone(), perplexity(&params, c, &c.lang)?));
        }
        let mut validation = Vec::new();
        for src in corpora {
            for tgt in corpora {
                if src.lang == tgt.lang {
                    continue;
                }
                let score = validation_score(
                    &params,
                    &vocabs,
                    &src.lang,
                    &tgt.lang,
                    cfg.val_words,
                    cfg.csls_k,
                )?;
                validation.push((src.lang.clone(), tgt.lang.clone(), score));
            }
        }
        let mean_val = if validation.is_empty() {
            f64::NEG_INFINITY
        } else {
            validation.iter().map(|(_, _, s)| s).sum::<f64>() / validation.len() as f64
        };

        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            pooled_train_loss: pooled,
            perplexity: ppl,
            validation,
            steps,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        eprintln!(
            "epoch {}/{}: loss {:.4}, {} steps, {:.1}s",
            record.epoch, cfg.epochs, record.pooled_train_loss, record.steps, record.wall_secs
        );
        history.records.push(record);

        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(&params, &vocabs, epoch + 1, cfg.seed, dir, "last.ckpt")?;
            if mean_val > best_val {
                best_val = mean_val;
                write_checkpoint(&params, &vocabs, epoch + 1, cfg.seed, dir, "best.ckpt")?;
            }
        }
    }
    Ok((params, history))
}

fn write_checkpoint<F: Real>(
    params: &ModelParams<F>,
    vocabs: &[Vocabulary],
    next_epoch: usize,
    seed: u64,
    dir: &std::path::Path,
    name: &str,
) -> Result<()> {
    let ckpt = Checkpoint {
        params: params.to_f32(),
        vocabs: vocabs.to_vec(),
        next_epoch,
        seed,
    };
    save_checkpoint(&ckpt, &dir.join(name))
}

/// Exponential of the mean per-prediction negative log-likelihood over the
/// corpus, both directions pooled, in eval mode.
pub fn perplexity<F: Real>(params: &ModelParams<F>, corpus: &Corpus, lang: &str) -> Result<f64> {
    let lang_idx = params.lang_index(lang)?;
    if corpus.lang != lang {
        return Err(Error::Config(format!(
            "corpus is {:?}, expected {:?}",
            corpus.lang, lang
        )));
    }
    if corpus.vocab.len() != params.vocab_size(lang_idx) {
        return Err(Error::Config(
            "corpus vocabulary does not match the model".into(),
        ));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for group in corpus.sentences.chunks(64) {
        let refs: Vec<&crate::corpus::Sentence> = group.iter().collect();
        let batch = Batch::from_sentences(lang, &refs, corpus.vocab.unk_id())?;
        let mut tape: Tape<'_, F> = Tape::new();
        let bound = params.bind(&mut tape, false);
        let (sum, n) = batch_nll_sum(&mut tape, &bound, &batch, &mut Mode::Eval)?;
        total += tape.scalar(sum)?;
        count += n;
    }
    Ok((total / count.max(1) as f64).exp())
}

/// Unsupervised model-selection metric: retrieve the best target for each
/// of the `n_words` most frequent source words with the query-penalty-free
/// CSLS score and return the mean of those scores. Needs no dictionary.
pub fn validation_score<F: Real>(
    params: &ModelParams<F>,
    vocabs: &[Vocabulary],
    src_lang: &str,
    tgt_lang: &str,
    n_words: usize,
    csls_k: usize,
) -> Result<f64> {
    let find = |lang: &str| -> Result<&Vocabulary> {
        vocabs
            .iter()
            .find(|v| v.lang() == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    };
    let src_space = extract_embeddings(params, src_lang, find(src_lang)?)?.without_token(UNK_TOKEN);
    let tgt_space = extract_embeddings(params, tgt_lang, find(tgt_lang)?)?.without_token(UNK_TOKEN);
    // Vocabulary ids are frequency-ordered, so the first rows are the most
    // frequent words.
    let n = n_words.min(src_space.len()).max(1);
    let sources: Vec<usize> = (0..n).collect();
    let cfg = CslsConfig {
        k: csls_k.min(tgt_space.len()).min(src_space.len()).max(1),
        omit_query_penalty: true,
    };
    let scores = csls_rows(&src_space, &sources, &tgt_space, &cfg)?;
    let mut total = 0.0;
    for r in 0..n {
        total += scores
            .row(r)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / n as f64)
}
