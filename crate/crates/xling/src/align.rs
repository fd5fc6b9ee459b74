//! CSLS similarity, nearest-neighbor retrieval, and precision@k lexicon
//! induction.
//!
//! CSLS scores a source/target pair as twice their cosine minus each side's
//! mean cosine to its K nearest cross-lingual neighbors, which discounts
//! hub words that are close to everything. For retrieval from a fixed
//! source word the query-side penalty is constant across candidates, so it
//! can be omitted without changing any ranking.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::autograd::Tensor;
use crate::corpus::read_lines;
use crate::error::{Error, Result};

/// A language tag plus one embedding row per token.
#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    pub lang: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor<f64>,
}

impl EmbeddingSpace {
    pub fn new(lang: &str, tokens: Vec<String>, matrix: Tensor<f64>) -> Result<Self> {
        if tokens.len() != matrix.rows() {
            return Err(Error::Shape {
                op: "embedding_space",
                detail: format!("{} tokens, {} rows", tokens.len(), matrix.rows()),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateToken {
                    token: t.clone(),
                    line: None,
                });
            }
        }
        Ok(EmbeddingSpace {
            lang: lang.to_string(),
            tokens,
            index,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    /// A copy of the space without the given token (used to drop UNK from
    /// retrieval candidates). No-op when the token is absent.
    pub fn without_token(&self, token: &str) -> EmbeddingSpace {
        let skip = self.index_of(token);
        let keep: Vec<usize> = (0..self.len()).filter(|&i| Some(i) != skip).collect();
        let mut matrix = Tensor::zeros(keep.len(), self.dim());
        let mut tokens = Vec::with_capacity(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            matrix.row_mut(r).copy_from_slice(self.row(i));
            tokens.push(self.tokens[i].clone());
        }
        EmbeddingSpace::new(&self.lang, tokens, matrix).expect("subset of a valid space")
    }

    /// L2-normalized rows. A zero-norm row is an error naming its token.
    fn unit_rows(&self) -> Result<Tensor<f64>> {
        let mut out = self.matrix.clone();
        for r in 0..out.rows() {
            let norm = self.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    token: Some(self.tokens[r].clone()),
                });
            }
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
        Ok(out)
    }
}

/// Parameters for CSLS scoring.
#[derive(Clone, Copy, Debug)]
pub struct CslsConfig {
    /// Neighborhood size for the penalty terms.
    pub k: usize,
    /// Drop the query-side penalty. Constant per source row, so rankings
    /// are unchanged; retrieval always works in this mode.
    pub omit_query_penalty: bool,
}

impl Default for CslsConfig {
    fn default() -> Self {
        CslsConfig {
            k: 10,
            omit_query_penalty: true,
        }
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "cosine",
            detail: format!("1x{}, 1x{}", x.len(), y.len()),
        });
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm { token: None });
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(dot / (nx * ny))
}

/// Mean of the k largest values in `sims`; ties at the boundary go to the
/// lower index.
fn top_k_mean(sims: &[f64], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= sims.len());
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    if k < sims.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            sims[b].total_cmp(&sims[a]).then(a.cmp(&b))
        });
    }
    idx[..k].iter().map(|&i| sims[i]).sum::<f64>() / k as f64
}

/// Mean cosine of `x` to its k nearest rows of `opposing`.
pub fn knn_mean_sim(x: &[f64], opposing: &EmbeddingSpace, k: usize) -> Result<f64> {
    if k == 0 || k > opposing.len() {
        return Err(Error::KTooLarge {
            k,
            v: opposing.len(),
        });
    }
    let sims = (0..opposing.len())
        .map(|j| cosine(x, opposing.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(top_k_mean(&sims, k))
}

/// Mean cosine of every row of `queries` (unit rows) to its k nearest rows
/// of `opposing` (unit rows), computed in blocks.
fn neighbor_penalties(queries: &Tensor<f64>, opposing: &Tensor<f64>, k: usize) -> Vec<f64> {
    const BLOCK: usize = 256;
    let n = queries.rows();
    let mut out = Vec::with_capacity(n);
    let mut sims = Tensor::<f64>::zeros(BLOCK.min(n.max(1)), opposing.rows());
    let mut start = 0;
    while start < n {
        let rows = BLOCK.min(n - start);
        let block = block_view(queries, start, rows);
        if sims.rows() != rows {
            sims = Tensor::zeros(rows, opposing.rows());
        }
        crate::autograd::matmul_tb_into(&block, opposing, &mut sims, 0.0);
        for r in 0..rows {
            out.push(top_k_mean(sims.row(r), k));
        }
        start += rows;
    }
    out
}

fn block_view(m: &Tensor<f64>, start: usize, rows: usize) -> Tensor<f64> {
    let mut out = Tensor::zeros(rows, m.cols());
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

/// CSLS scores for the given source rows against every target row.
/// Entry `(i, j)` is `2 cos(x_i, y_j) - [query penalty] - [candidate
/// penalty]`, with the query penalty dropped under
/// `cfg.omit_query_penalty`.
pub fn csls_rows(
    src: &EmbeddingSpace,
    src_rows: &[usize],
    tgt: &EmbeddingSpace,
    cfg: &CslsConfig,
) -> Result<Tensor<f64>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Config("CSLS requires nonempty spaces".into()));
    }
    if cfg.k == 0 || cfg.k > tgt.len() || cfg.k > src.len() {
        return Err(Error::KTooLarge {
            k: cfg.k,
            v: tgt.len().min(src.len()),
        });
    }
    let src_unit = src.unit_rows()?;
    let tgt_unit = tgt.unit_rows()?;
    // Candidate-side penalty for every target row, against all sources.
    let tgt_penalty = neighbor_penalties(&tgt_unit, &src_unit, cfg.k);

    let queries = {
        let mut q = Tensor::zeros(src_rows.len(), src_unit.cols());
        for (r, &i) in src_rows.iter().enumerate() {
            q.row_mut(r).copy_from_slice(src_unit.row(i));
        }
        q
    };
    let mut scores = Tensor::zeros(src_rows.len(), tgt.len());
    crate::autograd::matmul_tb_into(&queries, &tgt_unit, &mut scores, 0.0);
    // Query-side penalty from exactly these cosine rows.
    let src_penalty: Vec<f64> = if cfg.omit_query_penalty {
        vec![0.0; src_rows.len()]
    } else {
        (0..src_rows.len())
            .map(|r| top_k_mean(scores.row(r), cfg.k))
            .collect()
    };
    for r in 0..src_rows.len() {
        let qp = src_penalty[r];
        for (j, v) in scores.row_mut(r).iter_mut().enumerate() {
            *v = 2.0 * *v - qp - tgt_penalty[j];
        }
    }
    Ok(scores)
}

/// Full S x T CSLS matrix.
pub fn csls_matrix(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    cfg: &CslsConfig,
) -> Result<Tensor<f64>> {
    let all: Vec<usize> = (0..src.len()).collect();
    csls_rows(src, &all, tgt, cfg)
}

/// Indices of the k highest scores, descending, ties to the lower index.
pub fn topk_targets(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// A filtered gold dictionary: source row -> acceptable target rows, with
/// indices resolved against specific embedding spaces.
#[derive(Clone, Debug, Default)]
pub struct AlignmentTask {
    pairs: Vec<(usize, BTreeSet<usize>)>,
}

impl AlignmentTask {
    pub fn from_pairs(pairs: Vec<(usize, BTreeSet<usize>)>) -> Self {
        AlignmentTask { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, BTreeSet<usize>)] {
        &self.pairs
    }
}

/// Counts reported by `load_dictionary` so scores stay comparable across
/// vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DictStats {
    /// Unique source words retained.
    pub retained: usize,
    /// Pairs dropped because either side was out of vocabulary.
    pub dropped: usize,
}

/// Parse a dictionary file of "source target" lines (space- or
/// tab-separated). Pairs with either side missing from its space are
/// dropped and counted; repeated sources merge into one gold set.
pub fn load_dictionary(
    path: &Path,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
) -> Result<(AlignmentTask, DictStats)> {
    let lines = read_lines(path)?;
    let mut gold: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    let mut by_src: HashMap<usize, usize> = HashMap::new();
    let mut dropped = 0usize;
    for (ln, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("expected \"source target\", got {} fields", fields.len()),
            });
        }
        match (src.index_of(fields[0]), tgt.index_of(fields[1])) {
            (Some(si), Some(ti)) => {
                let slot = *by_src.entry(si).or_insert_with(|| {
                    gold.push((si, BTreeSet::new()));
                    gold.len() - 1
                });
                gold[slot].1.insert(ti);
            }
            _ => dropped += 1,
        }
    }
    let retained = gold.len();
    Ok((AlignmentTask::from_pairs(gold), DictStats { retained, dropped }))
}

/// Fraction of task sources whose top-k retrieved targets intersect the
/// gold set. Retrieval ranks candidates by CSLS with the query-side
/// penalty omitted (ranking-equivalent to the full score).
pub fn precision_at_k(
    task: &AlignmentTask,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    cfg: &CslsConfig,
    k: usize,
) -> Result<f64> {
    if task.is_empty() {
        return Err(Error::Config("empty alignment task".into()));
    }
    let retrieval = CslsConfig {
        k: cfg.k,
        omit_query_penalty: true,
    };
    let sources: Vec<usize> = task.pairs().iter().map(|(s, _)| *s).collect();
    let scores = csls_rows(src, &sources, tgt, &retrieval)?;
    let mut hits = 0usize;
    for (r, (_, gold)) in task.pairs().iter().enumerate() {
        let top = topk_targets(scores.row(r), k);
        if top.iter().any(|t| gold.contains(t)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / task.len() as f64)
}

/// Top-k same-space neighbors of `query` by cosine, excluding the query
/// row itself.
pub fn nearest_in_space(space: &EmbeddingSpace, query: &str, k: usize) -> Result<Vec<(usize, f64)>> {
    let qi = space
        .index_of(query)
        .ok_or_else(|| Error::Config(format!("token \"{query}\" not in embedding space")))?;
    let sims = (0..space.len())
        .map(|j| cosine(space.row(qi), space.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    let order = topk_targets(&sims, sims.len());
    Ok(order
        .into_iter()
        .filter(|&j| j != qi)
        .take(k)
        .map(|j| (j, sims[j]))
        .collect())
}

/// Top-k cross-space candidates for `query` by retrieval CSLS.
pub fn nearest_cross_space(
    src: &EmbeddingSpace,
    query: &str,
    tgt: &EmbeddingSpace,
    cfg: &CslsConfig,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let qi = src
        .index_of(query)
        .ok_or_else(|| Error::Config(format!("token \"{query}\" not in embedding space")))?;
    let scores = csls_rows(src, &[qi], tgt, cfg)?;
    let order = topk_targets(scores.row(0), k.min(tgt.len()));
    Ok(order.into_iter().map(|j| (j, scores.at(0, j))).collect())
}

/// Every pair's gold targets must exist; exposed for report printing.
pub fn gold_coverage(task: &AlignmentTask) -> HashSet<usize> {
    task.pairs().iter().map(|(s, _)| *s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(lang: &str, rows: &[Vec<f64>]) -> EmbeddingSpace {
        let tokens: Vec<String> = (0..rows.len()).map(|i| format!("w{i}")).collect();
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        EmbeddingSpace::new(lang, tokens, Tensor::from_vec(rows.len(), cols, flat).unwrap())
            .unwrap()
    }

    // ---- independent brute-force implementation (the oracle) ------------

    fn bf_cos(x: &[f64], y: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for i in 0..x.len() {
            dot += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        dot / (nx.sqrt() * ny.sqrt())
    }

    fn bf_topk_mean(mut sims: Vec<f64>, k: usize) -> f64 {
        sims.sort_by(|a, b| b.total_cmp(a));
        sims[..k].iter().sum::<f64>() / k as f64
    }

    fn bf_csls(src: &[Vec<f64>], tgt: &[Vec<f64>], k: usize, omit: bool) -> Vec<Vec<f64>> {
        let query_pen: Vec<f64> = src
            .iter()
            .map(|x| bf_topk_mean(tgt.iter().map(|y| bf_cos(x, y)).collect(), k))
            .collect();
        let cand_pen: Vec<f64> = tgt
            .iter()
            .map(|y| bf_topk_mean(src.iter().map(|x| bf_cos(x, y)).collect(), k))
            .collect();
        src.iter()
            .enumerate()
            .map(|(i, x)| {
                tgt.iter()
                    .enumerate()
                    .map(|(j, y)| {
                        2.0 * bf_cos(x, y) - if omit { 0.0 } else { query_pen[i] } - cand_pen[j]
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 24.0 / 25.0).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm { token: None })
        ));
    }

    #[test]
    fn knn_mean_full_set_and_self() {
        let tgt = space("t", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let full = knn_mean_sim(&[1.0, 1.0], &tgt, 2).unwrap();
        let expect = (bf_cos(&[1.0, 1.0], &[1.0, 0.0]) + bf_cos(&[1.0, 1.0], &[0.0, 1.0])) / 2.0;
        assert!((full - expect).abs() < 1e-12);
        assert!((knn_mean_sim(&[0.0, 2.0], &tgt, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            knn_mean_sim(&[1.0, 0.0], &tgt, 3),
            Err(Error::KTooLarge { k: 3, v: 2 })
        ));
    }

    #[test]
    fn worked_two_by_two_full_csls() {
        // Brute-force evaluation of the definition gives these values; the
        // diagonal is zero and the off-diagonal entries carry the penalty
        // of the hub-ish second target.
        let s = 1.0 / 2.0f64.sqrt();
        let src = space("s", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tgt = space("t", &[vec![1.0, 0.0], vec![s, s]]);
        let cfg = CslsConfig {
            k: 1,
            omit_query_penalty: false,
        };
        let m = csls_matrix(&src, &tgt, &cfg).unwrap();
        let expect = [[0.0, -0.2929], [-1.7071, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (m.at(i, j) - expect[i][j]).abs() < 5e-5,
                    "entry ({i},{j}) = {} vs {}",
                    m.at(i, j),
                    expect[i][j]
                );
            }
        }
        // and the oracle agrees to full precision
        let bf = bf_csls(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 0.0], vec![s, s]],
            1,
            false,
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.at(i, j) - bf[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csls_matches_brute_force_on_random_spaces() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for round in 0..30 {
            let v_s = rng.gen_range(2..=20);
            let v_t = rng.gen_range(2..=20);
            let d = rng.gen_range(2..=8);
            let k = [1usize, 5, 10][round % 3].min(v_s).min(v_t);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, v: usize| -> Vec<Vec<f64>> {
                (0..v)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            };
            let s_rows = mk(&mut rng, v_s);
            let t_rows = mk(&mut rng, v_t);
            let src = space("s", &s_rows);
            let tgt = space("t", &t_rows);
            for omit in [false, true] {
                let cfg = CslsConfig {
                    k,
                    omit_query_penalty: omit,
                };
                let m = csls_matrix(&src, &tgt, &cfg).unwrap();
                let bf = bf_csls(&s_rows, &t_rows, k, omit);
                for i in 0..v_s {
                    for j in 0..v_t {
                        assert!(
                            (m.at(i, j) - bf[i][j]).abs() < 1e-10,
                            "({i},{j}): {} vs {}",
                            m.at(i, j),
                            bf[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn omit_changes_rows_by_constant_and_preserves_diag_maxima() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let src = space("s", &rows);
        let tgt = space("t", &rows);
        let full = csls_matrix(&src, &tgt, &CslsConfig { k: 1, omit_query_penalty: false }).unwrap();
        let omit = csls_matrix(&src, &tgt, &CslsConfig { k: 1, omit_query_penalty: true }).unwrap();
        for i in 0..src.len() {
            let delta = omit.at(i, 0) - full.at(i, 0);
            for j in 0..tgt.len() {
                assert!((omit.at(i, j) - full.at(i, j) - delta).abs() < 1e-12);
            }
            // identical src/tgt spaces, K = 1: the diagonal is the row max
            let row = full.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((row[i] - max).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_row_names_token() {
        let src = space("s", &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let tgt = space("t", &[vec![1.0, 0.0]]);
        let err = csls_matrix(&src, &tgt, &CslsConfig { k: 1, omit_query_penalty: true })
            .unwrap_err();
        assert!(err.to_string().contains("w1"), "{err}");
    }

    #[test]
    fn topk_ordering_and_ties() {
        assert_eq!(topk_targets(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(topk_targets(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        let perm = topk_targets(&[0.2, 0.8, 0.5, 0.1], 4);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn precision_self_retrieval() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let src = space("s", &rows);
        let tgt = space("t", &rows);
        let task = AlignmentTask::from_pairs(vec![
            (0, BTreeSet::from([0])),
            (1, BTreeSet::from([1])),
            (2, BTreeSet::from([2])),
        ]);
        let cfg = CslsConfig { k: 1, omit_query_penalty: true };
        assert_eq!(precision_at_k(&task, &src, &tgt, &cfg, 1).unwrap(), 1.0);
        // all-wrong gold
        let wrong = AlignmentTask::from_pairs(vec![(0, BTreeSet::from([1]))]);
        assert_eq!(precision_at_k(&wrong, &src, &tgt, &cfg, 1).unwrap(), 0.0);
    }

    #[test]
    fn load_dictionary_merges_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.txt");
        std::fs::write(&path, "w0 w1\nw0\tw2\nw1 w0\nw0 zz\nqq w1\n").unwrap();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let src = space("s", &rows);
        let tgt = space("t", &rows);
        let (task, stats) = load_dictionary(&path, &src, &tgt).unwrap();
        assert_eq!(stats, DictStats { retained: 2, dropped: 2 });
        assert_eq!(task.pairs()[0], (0, BTreeSet::from([1, 2])));
        assert_eq!(task.pairs()[1], (1, BTreeSet::from([0])));
    }

    #[test]
    fn load_dictionary_rejects_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.txt");
        std::fs::write(&path, "w0 w1\nw0 w1 w2\n").unwrap();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let err = load_dictionary(&path, &space("s", &rows), &space("t", &rows)).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    proptest! {
        /// Rankings are identical with and without the query-side penalty.
        #[test]
        fn query_penalty_omission_preserves_rankings(
            seed in 0u64..200,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..6);
            let v_s = rng.gen_range(2..15);
            let v_t = rng.gen_range(2..15);
            let k = rng.gen_range(1..=v_t.min(v_s));
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, v: usize| -> Vec<Vec<f64>> {
                (0..v).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
            };
            let src = space("s", &mk(&mut rng, v_s));
            let tgt = space("t", &mk(&mut rng, v_t));
            let full = csls_matrix(&src, &tgt, &CslsConfig { k, omit_query_penalty: false }).unwrap();
            let omit = csls_matrix(&src, &tgt, &CslsConfig { k, omit_query_penalty: true }).unwrap();
            for i in 0..v_s {
                for top in [1usize, 5] {
                    prop_assert_eq!(
                        topk_targets(full.row(i), top.min(v_t)),
                        topk_targets(omit.row(i), top.min(v_t))
                    );
                }
            }
        }

        /// Scaling one row by a positive factor changes no cosine.
        #[test]
        fn positive_scaling_is_invisible_to_cosine(
            scale in 0.01f64..100.0,
            seed in 0u64..100,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let a = cosine(&x, &y).unwrap();
            let b = cosine(&scaled, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        /// p@5 never beats p@1 from below.
        #[test]
        fn precision_is_monotone_in_k(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let v = 10;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..v).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
            };
            let src = space("s", &mk(&mut rng));
            let tgt = space("t", &mk(&mut rng));
            let task = AlignmentTask::from_pairs(
                (0..v).map(|i| (i, BTreeSet::from([i]))).collect(),
            );
            let cfg = CslsConfig { k: 3, omit_query_penalty: true };
            let p1 = precision_at_k(&task, &src, &tgt, &cfg, 1).unwrap();
            let p5 = precision_at_k(&task, &src, &tgt, &cfg, 5).unwrap();
            prop_assert!(p5 >= p1);
        }
    }
}
