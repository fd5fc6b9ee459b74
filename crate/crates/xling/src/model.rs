//! The multilingual language model: forward and backward LSTMs shared by
//! every language, a shared begin-of-sentence input embedding, a shared
//! end-of-sentence output row, and per-language word embeddings and output
//! projections.
//!
//! Each direction is an independent language model. Given a sentence
//! `w_1..w_N`, the forward model consumes `[BOS, w_1, .., w_N]` and scores
//! `[w_1, .., w_N, EOS]`; the backward model does the same on the reversed
//! sentence. Output classes are `0` for EOS and `w + 1` for word id `w`.
//! Both directions read the same per-language embedding matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::EmbeddingSpace;
use crate::autograd::{real, Mode, Real, Tape, Tensor, Var};
use crate::corpus::{Batch, Sentence, Vocabulary};
use crate::error::{Error, Result};

/// Model dimensions and loss options. Embedding and hidden sizes must be
/// equal: word embeddings and the BOS embedding feed the LSTM directly,
/// with no input projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub dropout: f64,
    pub init_range: f64,
    pub languages: Vec<String>,
    /// Score the end-of-sentence class at both sequence ends. Disabled by
    /// the `--no-eos-loss` flag.
    pub eos_loss: bool,
}

impl ModelConfig {
    /// Defaults: 300-dimensional embeddings and hidden states, dropout 0.3,
    /// uniform init on [-0.1, 0.1], EOS scoring on.
    pub fn new(languages: Vec<String>) -> Self {
        ModelConfig {
            d_emb: 300,
            d_hidden: 300,
            dropout: 0.3,
            init_range: 0.1,
            languages,
            eos_loss: true,
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d_emb = d;
        self.d_hidden = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_emb != self.d_hidden {
            return Err(Error::Config(format!(
                "embedding size {} must equal hidden size {} (embeddings are LSTM inputs)",
                self.d_emb, self.d_hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.init_range <= 0.0 {
            return Err(Error::Config("init_range must be positive".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::Config("at least one language required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.languages {
            if l.is_empty() || !seen.insert(l) {
                return Err(Error::Config(format!("bad or repeated language tag: {l:?}")));
            }
        }
        Ok(())
    }
}

/// One LSTM cell. Gate blocks are stacked in the order input, forget,
/// cell-candidate, output along the `4d` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<F: Real> {
    /// 4d x d input-to-gates weights.
    pub w_x: Tensor<F>,
    /// 4d x d hidden-to-gates weights.
    pub w_h: Tensor<F>,
    /// 1 x 4d gate biases.
    pub bias: Tensor<F>,
}

impl<F: Real> LstmCell<F> {
    pub fn zeros(d: usize) -> Self {
        LstmCell {
            w_x: Tensor::zeros(4 * d, d),
            w_h: Tensor::zeros(4 * d, d),
            bias: Tensor::zeros(1, 4 * d),
        }
    }

    fn uniform(d: usize, range: f64, rng: &mut ChaCha8Rng) -> Self {
        LstmCell {
            w_x: Tensor::uniform(4 * d, d, range, rng),
            w_h: Tensor::uniform(4 * d, d, range, rng),
            bias: Tensor::uniform(1, 4 * d, range, rng),
        }
    }
}

/// Per-language trainables: the embedding matrix (rows are input vectors
/// for both directions) and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LangParams<F: Real> {
    pub lang: String,
    /// V x d word embeddings.
    pub emb: Tensor<F>,
    /// V x d output projection; class `w + 1` scores against row `w`.
    pub proj: Tensor<F>,
}

/// All trainable tensors. The two cells, the BOS embedding and the EOS row
/// exist exactly once and are used for every language; only `langs` holds
/// language-specific tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real> {
    pub config: ModelConfig,
    pub fwd: LstmCell<F>,
    pub bwd: LstmCell<F>,
    /// 1 x d shared begin-of-sentence input embedding.
    pub e_bos: Tensor<F>,
    /// 1 x d shared end-of-sentence output row (class 0).
    pub w_eos: Tensor<F>,
    pub langs: Vec<LangParams<F>>,
}

/// Draw every trainable value i.i.d. from the uniform distribution on
/// `[-init_range, init_range]`. Sampling order is fixed (forward cell,
/// backward cell, BOS, EOS, then per-language embedding and projection) so
/// a seed pins the whole model.
pub fn init_params<F: Real>(
    config: &ModelConfig,
    vocab_sizes: &[usize],
    seed: u64,
) -> Result<ModelParams<F>> {
    config.validate()?;
    if vocab_sizes.len() != config.languages.len() {
        return Err(Error::Config(format!(
            "{} vocabulary sizes for {} languages",
            vocab_sizes.len(),
            config.languages.len()
        )));
    }
    if vocab_sizes.iter().any(|&v| v == 0) {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let d = config.d_hidden;
    let r = config.init_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fwd = LstmCell::uniform(d, r, &mut rng);
    let bwd = LstmCell::uniform(d, r, &mut rng);
    let e_bos = Tensor::uniform(1, d, r, &mut rng);
    let w_eos = Tensor::uniform(1, d, r, &mut rng);
    let langs = config
        .languages
        .iter()
        .zip(vocab_sizes)
        .map(|(lang, &v)| LangParams {
            lang: lang.clone(),
            emb: Tensor::uniform(v, d, r, &mut rng),
            proj: Tensor::uniform(v, d, r, &mut rng),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        fwd,
        bwd,
        e_bos,
        w_eos,
        langs,
    })
}

impl<F: Real> ModelParams<F> {
    pub fn lang_index(&self, lang: &str) -> Result<usize> {
        self.langs
            .iter()
            .position(|l| l.lang == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn vocab_size(&self, lang_idx: usize) -> usize {
        self.langs[lang_idx].emb.rows()
    }

    /// Canonical tensor order, used for gradient collection, checkpoint
    /// manifests and optimizer updates.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "lstm_fwd.w_x".into(),
            "lstm_fwd.w_h".into(),
            "lstm_fwd.bias".into(),
            "lstm_bwd.w_x".into(),
            "lstm_bwd.w_h".into(),
            "lstm_bwd.bias".into(),
            "e_bos".into(),
            "w_eos".into(),
        ];
        for l in &self.langs {
            names.push(format!("emb.{}", l.lang));
            names.push(format!("proj.{}", l.lang));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![
            &self.fwd.w_x,
            &self.fwd.w_h,
            &self.fwd.bias,
            &self.bwd.w_x,
            &self.bwd.w_h,
            &self.bwd.bias,
            &self.e_bos,
            &self.w_eos,
        ];
        for l in &self.langs {
            out.push(&l.emb);
            out.push(&l.proj);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![
            &mut self.fwd.w_x,
            &mut self.fwd.w_h,
            &mut self.fwd.bias,
            &mut self.bwd.w_x,
            &mut self.bwd.w_h,
            &mut self.bwd.bias,
            &mut self.e_bos,
            &mut self.w_eos,
        ];
        for l in &mut self.langs {
            out.push(&mut l.emb);
            out.push(&mut l.proj);
        }
        out
    }

    /// Register every tensor as a tape leaf, in canonical order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>, trainable: bool) -> BoundParams<'p, F> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t, trainable))
            .collect();
        BoundParams { params: self, vars }
    }

    pub fn to_f32(&self) -> ModelParams<f32> {
        ModelParams {
            config: self.config.clone(),
            fwd: LstmCell {
                w_x: self.fwd.w_x.to_f32(),
                w_h: self.fwd.w_h.to_f32(),
                bias: self.fwd.bias.to_f32(),
            },
            bwd: LstmCell {
                w_x: self.bwd.w_x.to_f32(),
                w_h: self.bwd.w_h.to_f32(),
                bias: self.bwd.bias.to_f32(),
            },
            e_bos: self.e_bos.to_f32(),
            w_eos: self.w_eos.to_f32(),
            langs: self
                .langs
                .iter()
                .map(|l| LangParams {
                    lang: l.lang.clone(),
                    emb: l.emb.to_f32(),
                    proj: l.proj.to_f32(),
                })
                .collect(),
        }
    }
}

/// Tape handles for every model tensor, in the same order as
/// `ModelParams::tensors`.
pub struct BoundParams<'p, F: Real> {
    pub params: &'p ModelParams<F>,
    vars: Vec<Var>,
}

/// Handles for one cell's tensors.
#[derive(Clone, Copy)]
pub struct BoundCell {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

impl<'p, F: Real> BoundParams<'p, F> {
    pub fn fwd(&self) -> BoundCell {
        BoundCell {
            w_x: self.vars[0],
            w_h: self.vars[1],
            bias: self.vars[2],
        }
    }

    pub fn bwd(&self) -> BoundCell {
        BoundCell {
            w_x: self.vars[3],
            w_h: self.vars[4],
            bias: self.vars[5],
        }
    }

    pub fn e_bos(&self) -> Var {
        self.vars[6]
    }

    pub fn w_eos(&self) -> Var {
        self.vars[7]
    }

    pub fn emb(&self, lang_idx: usize) -> Var {
        self.vars[8 + 2 * lang_idx]
    }

    pub fn proj(&self, lang_idx: usize) -> Var {
        self.vars[9 + 2 * lang_idx]
    }

    /// All handles in canonical tensor order.
    pub fn all_vars(&self) -> &[Var] {
        &self.vars
    }
}

/// One LSTM step over a batch: `x`, `h_prev`, `c_prev` are `B x d`.
/// Standard gates, no peepholes, single layer.
pub fn lstm_step<F: Real>(
    tape: &mut Tape<'_, F>,
    cell: &BoundCell,
    h_prev: Var,
    c_prev: Var,
    x: Var,
    d: usize,
) -> Result<(Var, Var)> {
    let gx = tape.matmul_tb(x, cell.w_x)?;
    let gh = tape.matmul_tb(h_prev, cell.w_h)?;
    let pre = tape.add(gx, gh)?;
    let pre = tape.add_row_bias(pre, cell.bias)?;
    let i_pre = tape.slice_cols(pre, 0, d)?;
    let f_pre = tape.slice_cols(pre, d, 2 * d)?;
    let g_pre = tape.slice_cols(pre, 2 * d, 3 * d)?;
    let o_pre = tape.slice_cols(pre, 3 * d, 4 * d)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}

/// Class scores for hidden states `h` (`B x d`) in language `lang_idx`:
/// column 0 is the shared EOS score, columns `1..=V` are the language's
/// word scores. Pure linear maps, no bias.
pub fn output_logits<F: Real>(
    tape: &mut Tape<'_, F>,
    bound: &BoundParams<'_, F>,
    lang_idx: usize,
    h: Var,
) -> Result<Var> {
    if lang_idx >= bound.params.langs.len() {
        return Err(Error::UnknownLanguage(format!("#{lang_idx}")));
    }
    let eos = tape.matmul_tb(h, bound.w_eos())?;
    let words = tape.matmul_tb(h, bound.proj(lang_idx))?;
    tape.concat_cols(eos, words)
}

enum Direction {
    Forward,
    Backward,
}

/// Token rows a direction consumes: natural order for the forward model,
/// reversed (pads kept trailing) for the backward model.
fn direction_rows(batch: &Batch, dir: &Direction) -> Vec<Vec<usize>> {
    (0..batch.size())
        .map(|b| {
            let row = batch.row(b);
            match dir {
                Direction::Forward => row.to_vec(),
                Direction::Backward => {
                    let n = batch.length(b);
                    let mut rev: Vec<usize> = row[..n].iter().rev().copied().collect();
                    rev.resize(row.len(), batch.pad_id());
                    rev
                }
            }
        })
        .collect()
}

fn run_direction<F: Real>(
    tape: &mut Tape<'_, F>,
    bound: &BoundParams<'_, F>,
    lang_idx: usize,
    cell: &BoundCell,
    rows: &[Vec<usize>],
    lengths: &[usize],
    mode: &mut Mode<'_>,
) -> Result<(Var, usize)> {
    let cfg = &bound.params.config;
    let d = cfg.d_hidden;
    let b = rows.len();
    let t_max = rows[0].len();
    let mut h = tape.constant(Tensor::zeros(b, d));
    let mut c = tape.constant(Tensor::zeros(b, d));
    let mut total: Option<Var> = None;
    let mut n_preds = 0usize;
    for s in 0..=t_max {
        // With EOS scoring a sentence of length n is active through step n
        // (the EOS prediction); without it, through step n - 1.
        let active: Vec<bool> = lengths
            .iter()
            .map(|&n| if cfg.eos_loss { s <= n } else { s < n })
            .collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let x = if s == 0 {
            let ones = tape.constant(Tensor::from_elem(b, 1, F::one()));
            tape.matmul(ones, bound.e_bos())?
        } else {
            let ids: Vec<usize> = rows.iter().map(|r| r[s - 1]).collect();
            tape.lookup_rows(bound.emb(lang_idx), &ids)?
        };
        let (h_next, c_next) = lstm_step(tape, cell, h, c, x, d)?;
        h = h_next;
        c = c_next;
        let targets: Vec<usize> = rows
            .iter()
            .zip(lengths)
            .map(|(r, &n)| if s < n { r[s] + 1 } else { 0 })
            .collect();
        let h_out = tape.dropout(h, cfg.dropout, mode)?;
        let logits = output_logits(tape, bound, lang_idx, h_out)?;
        let step_loss = tape.masked_softmax_xent(logits, &targets, &active)?;
        n_preds += active.iter().filter(|&&a| a).count();
        total = Some(match total {
            Some(acc) => tape.add(acc, step_loss)?,
            None => step_loss,
        });
    }
    let total = total.ok_or(Error::EmptySentence)?;
    Ok((total, n_preds))
}

/// Summed negative log-likelihood of a batch over both directions, plus
/// the number of scored predictions. Masked (padded) positions contribute
/// nothing.
pub fn batch_nll_sum<F: Real>(
    tape: &mut Tape<'_, F>,
    bound: &BoundParams<'_, F>,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<(Var, usize)> {
    let lang_idx = bound.params.lang_index(&batch.lang)?;
    let lengths = batch.lengths().to_vec();
    let fwd_rows = direction_rows(batch, &Direction::Forward);
    let fwd_cell = bound.fwd();
    let (fwd, n_f) = run_direction(tape, bound, lang_idx, &fwd_cell, &fwd_rows, &lengths, mode)?;
    let bwd_rows = direction_rows(batch, &Direction::Backward);
    let bwd_cell = bound.bwd();
    let (bwd, n_b) = run_direction(tape, bound, lang_idx, &bwd_cell, &bwd_rows, &lengths, mode)?;
    let total = tape.add(fwd, bwd)?;
    Ok((total, n_f + n_b))
}

/// Mean per-prediction negative log-likelihood of a batch.
pub fn batch_nll<F: Real>(
    tape: &mut Tape<'_, F>,
    bound: &BoundParams<'_, F>,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<(Var, usize)> {
    let (sum, n) = batch_nll_sum(tape, bound, batch, mode)?;
    let mean = tape.scale(sum, real::<F>(1.0 / n as f64));
    Ok((mean, n))
}

/// Per-direction sentence losses, for oracle comparisons.
#[derive(Clone, Copy, Debug)]
pub struct SentenceNll {
    pub forward: f64,
    pub backward: f64,
    pub predictions: usize,
}

impl SentenceNll {
    pub fn total(&self) -> f64 {
        self.forward + self.backward
    }
}

/// Negative log-likelihood of one sentence, split by direction.
pub fn sentence_nll_components<F: Real>(
    params: &ModelParams<F>,
    sentence: &Sentence,
    mode: &mut Mode<'_>,
) -> Result<SentenceNll> {
    if sentence.ids.is_empty() {
        return Err(Error::EmptySentence);
    }
    let lang_idx = params.lang_index(&sentence.lang)?;
    let v = params.vocab_size(lang_idx);
    if let Some(&bad) = sentence.ids.iter().find(|&&id| id >= v) {
        return Err(Error::Config(format!(
            "token id {bad} outside vocabulary of size {v}"
        )));
    }
    let batch = Batch::from_sentences(&sentence.lang, &[sentence], 0)?;
    let mut tape: Tape<'_, F> = Tape::new();
    let bound = params.bind(&mut tape, false);
    let lengths = batch.lengths().to_vec();
    let fwd_rows = direction_rows(&batch, &Direction::Forward);
    let fwd_cell = bound.fwd();
    let (fwd, n_f) = run_direction(
        &mut tape, &bound, lang_idx, &fwd_cell, &fwd_rows, &lengths, mode,
    )?;
    let bwd_rows = direction_rows(&batch, &Direction::Backward);
    let bwd_cell = bound.bwd();
    let (bwd, n_b) = run_direction(
        &mut tape, &bound, lang_idx, &bwd_cell, &bwd_rows, &lengths, mode,
    )?;
    Ok(SentenceNll {
        forward: tape.scalar(fwd)?,
        backward: tape.scalar(bwd)?,
        predictions: n_f + n_b,
    })
}

/// Summed negative log-likelihood of one sentence over both directions,
/// plus the prediction count `2 (N + 1)` (or `2 N` without EOS scoring).
pub fn sentence_nll<F: Real>(
    params: &ModelParams<F>,
    sentence: &Sentence,
    mode: &mut Mode<'_>,
) -> Result<(f64, usize)> {
    let parts = sentence_nll_components(params, sentence, mode)?;
    Ok((parts.total(), parts.predictions))
}

/// The embedding rows of one language keyed by its vocabulary tokens. The
/// UNK row is included; the BOS embedding is not a word and is excluded.
pub fn extract_embeddings<F: Real>(
    params: &ModelParams<F>,
    lang: &str,
    vocab: &Vocabulary,
) -> Result<EmbeddingSpace> {
    let lang_idx = params.lang_index(lang)?;
    if vocab.lang() != lang {
        return Err(Error::Config(format!(
            "vocabulary is for {:?}, not {:?}",
            vocab.lang(),
            lang
        )));
    }
    if vocab.len() != params.vocab_size(lang_idx) {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, embedding matrix has {} rows",
            vocab.len(),
            params.vocab_size(lang_idx)
        )));
    }
    EmbeddingSpace::new(
        lang,
        vocab.tokens().to_vec(),
        params.langs[lang_idx].emb.to_f64(),
    )
}
