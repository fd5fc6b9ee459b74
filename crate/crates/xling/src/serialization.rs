//! Embedding text import/export and model checkpoint persistence.
//!
//! Embedding files follow the common text layout: a "V d" header line, then
//! one `token v1 .. vd` line per word, space-separated, so externally
//! trained vectors can be evaluated by the alignment engine.
//!
//! Checkpoints are a self-describing container: a little-endian `u64`
//! length prefix, a UTF-8 JSON metadata header (version, config,
//! vocabularies, tensor manifest, training progress), then row-major
//! little-endian `f32` payloads in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::EmbeddingSpace;
use crate::autograd::Tensor;
use crate::corpus::{read_lines, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{LangParams, LstmCell, ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Format a value with nine significant decimal digits, enough to
/// round-trip an `f32` exactly.
fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Write a "V d" header and one row per token.
pub fn export_embeddings(space: &EmbeddingSpace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_embeddings(space, &mut w)
}

pub fn write_embeddings<W: Write>(space: &EmbeddingSpace, w: &mut W) -> Result<()> {
    if space.is_empty() {
        return Err(Error::Config("refusing to export an empty space".into()));
    }
    if let Some(bad) = space
        .tokens()
        .iter()
        .find(|t| t.chars().any(char::is_whitespace) || t.is_empty())
    {
        return Err(Error::TokenHasWhitespace(bad.clone()));
    }
    writeln!(w, "{} {}", space.len(), space.dim())?;
    let mut line = String::new();
    for i in 0..space.len() {
        line.clear();
        line.push_str(space.token(i));
        for &v in space.row(i) {
            line.push(' ');
            line.push_str(&format_sig9(v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read an embedding file, enforcing the header-declared row count and
/// dimensionality and rejecting duplicate tokens. The space's language tag
/// defaults to the file stem.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingSpace> {
    let lines = read_lines(path)?;
    let pathstr = path.display().to_string();
    let fmt = |line: Option<usize>, msg: String| Error::Format {
        path: pathstr.clone(),
        line,
        msg,
    };
    let header = lines
        .first()
        .ok_or_else(|| fmt(None, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(fmt(Some(1), format!("header must be \"V d\", got {header:?}")));
    }
    let v: usize = fields[0]
        .parse()
        .map_err(|_| fmt(Some(1), format!("bad row count {:?}", fields[0])))?;
    let d: usize = fields[1]
        .parse()
        .map_err(|_| fmt(Some(1), format!("bad dimension {:?}", fields[1])))?;
    if v == 0 || d == 0 {
        return Err(fmt(Some(1), "row count and dimension must be positive".into()));
    }
    let body = &lines[1..];
    if body.len() != v {
        return Err(fmt(
            None,
            format!("header declares {v} rows, file has {}", body.len()),
        ));
    }
    let mut tokens = Vec::with_capacity(v);
    let mut matrix = Tensor::zeros(v, d);
    let mut seen = std::collections::HashSet::with_capacity(v);
    for (i, line) in body.iter().enumerate() {
        let ln = i + 2; // 1-based, after the header
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| fmt(Some(ln), "missing token".into()))?;
        if !seen.insert(token.to_string()) {
            return Err(Error::DuplicateToken {
                token: token.to_string(),
                line: Some(ln),
            });
        }
        let row = matrix.row_mut(i);
        let mut filled = 0usize;
        for part in parts {
            if filled >= d {
                return Err(fmt(Some(ln), format!("more than {d} coordinates")));
            }
            row[filled] = part
                .parse::<f64>()
                .map_err(|_| fmt(Some(ln), format!("bad coordinate {part:?}")))?;
            filled += 1;
        }
        if filled != d {
            return Err(fmt(Some(ln), format!("expected {d} coordinates, got {filled}")));
        }
        tokens.push(token.to_string());
    }
    let lang = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    EmbeddingSpace::new(&lang, tokens, matrix)
}

/// Everything needed to restart or evaluate a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocabs: Vec<Vocabulary>,
    /// First epoch the resumed run should execute.
    pub next_epoch: usize,
    /// Base seed; together with `next_epoch` it identifies every derived
    /// generator stream of the run.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: ModelConfig,
    vocabs: Vec<Vocabulary>,
    next_epoch: usize,
    seed: u64,
    manifest: Vec<TensorMeta>,
}

/// Expected (name, rows, cols) sequence for a config plus vocabularies.
fn expected_manifest(config: &ModelConfig, vocab_sizes: &[usize]) -> Vec<(String, usize, usize)> {
    let d = config.d_hidden;
    let mut out = vec![
        ("lstm_fwd.w_x".to_string(), 4 * d, d),
        ("lstm_fwd.w_h".to_string(), 4 * d, d),
        ("lstm_fwd.bias".to_string(), 1, 4 * d),
        ("lstm_bwd.w_x".to_string(), 4 * d, d),
        ("lstm_bwd.w_h".to_string(), 4 * d, d),
        ("lstm_bwd.bias".to_string(), 1, 4 * d),
        ("e_bos".to_string(), 1, d),
        ("w_eos".to_string(), 1, d),
    ];
    for (lang, &v) in config.languages.iter().zip(vocab_sizes) {
        out.push((format!("emb.{lang}"), v, d));
        out.push((format!("proj.{lang}"), v, d));
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let params = &ckpt.params;
    let names = params.tensor_names();
    let tensors = params.tensors();
    let manifest: Vec<TensorMeta> = names
        .iter()
        .zip(&tensors)
        .map(|(name, t)| TensorMeta {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        vocabs: ckpt.vocabs.clone(),
        next_epoch: ckpt.next_epoch,
        seed: ckpt.seed,
        manifest,
    };
    let header = serde_json::to_vec(&meta)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        buf.reserve(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let pathstr = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: pathstr.clone() }
        } else {
            Error::Io(e)
        }
    })?;
    let fmt = |msg: String| Error::Format {
        path: pathstr.clone(),
        line: None,
        msg,
    };
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::TruncatedPayload {
            expected: (8 + header_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    meta.config.validate()?;
    if meta.vocabs.len() != meta.config.languages.len() {
        return Err(fmt(format!(
            "{} vocabularies for {} languages",
            meta.vocabs.len(),
            meta.config.languages.len()
        )));
    }
    for (vocab, lang) in meta.vocabs.iter().zip(&meta.config.languages) {
        if vocab.lang() != lang {
            return Err(fmt(format!(
                "vocabulary for {:?} listed under language {:?}",
                vocab.lang(),
                lang
            )));
        }
    }
    let vocab_sizes: Vec<usize> = meta.vocabs.iter().map(Vocabulary::len).collect();
    let expected = expected_manifest(&meta.config, &vocab_sizes);
    if meta.manifest.len() != expected.len() {
        return Err(fmt(format!(
            "manifest lists {} tensors, model needs {}",
            meta.manifest.len(),
            expected.len()
        )));
    }
    for (m, (name, rows, cols)) in meta.manifest.iter().zip(&expected) {
        if &m.name != name {
            return Err(fmt(format!("manifest tensor {:?} where {name:?} expected", m.name)));
        }
        if m.rows != *rows || m.cols != *cols {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", m.rows, m.cols),
            });
        }
    }
    let payload_len: usize = expected.iter().map(|(_, r, c)| r * c * 4).sum();
    let have = bytes.len() - 8 - header_len;
    if have < payload_len {
        return Err(Error::TruncatedPayload {
            expected: payload_len as u64,
            found: have as u64,
        });
    }
    if have > payload_len {
        return Err(fmt(format!(
            "{} trailing bytes after the declared payload",
            have - payload_len
        )));
    }
    let mut offset = 8 + header_len;
    let mut tensors = Vec::with_capacity(expected.len());
    for (_, rows, cols) in &expected {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + i * 4;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        offset += n * 4;
        tensors.push(Tensor::from_vec(*rows, *cols, data)?);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("manifest length checked");
    let params = ModelParams {
        config: meta.config.clone(),
        fwd: LstmCell {
            w_x: next(),
            w_h: next(),
            bias: next(),
        },
        bwd: LstmCell {
            w_x: next(),
            w_h: next(),
            bias: next(),
        },
        e_bos: next(),
        w_eos: next(),
        langs: meta
            .config
            .languages
            .iter()
            .map(|lang| LangParams {
                lang: lang.clone(),
                emb: next(),
                proj: next(),
            })
            .collect(),
    };
    let mut vocabs = meta.vocabs;
    for v in &mut vocabs {
        v.rebuild_index();
    }
    Ok(Checkpoint {
        params,
        vocabs,
        next_epoch: meta.next_epoch,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::model::init_params;

    fn sample_space() -> EmbeddingSpace {
        let rows = vec![
            vec![0.25, -1.5, 0.0001234567],
            vec![1234.5678, 0.0, -0.5],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        EmbeddingSpace::new(
            "xx",
            vec!["alpha".into(), "beta".into()],
            Tensor::from_vec(2, 3, flat).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn export_header_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let space = sample_space();
        export_embeddings(&space, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("2 3\n"));
        let back = import_embeddings(&path).unwrap();
        assert_eq!(back.tokens(), space.tokens());
        for i in 0..2 {
            for j in 0..3 {
                assert!((back.row(i)[j] - space.row(i)[j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn f32_values_roundtrip_exactly() {
        let vals: Vec<f32> = vec![0.123456789, -9.87654e-5, 3.0e8, -0.0, 42.42];
        let rows: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let space = EmbeddingSpace::new(
            "xx",
            vec!["a".into()],
            Tensor::from_vec(1, 5, rows).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        export_embeddings(&space, &path).unwrap();
        let back = import_embeddings(&path).unwrap();
        for (j, &v) in vals.iter().enumerate() {
            assert_eq!(back.row(0)[j] as f32, v, "column {j}");
        }
    }

    #[test]
    fn tokens_with_whitespace_are_rejected() {
        let space = EmbeddingSpace::new(
            "xx",
            vec!["a b".into()],
            Tensor::from_vec(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        let mut sink = Vec::new();
        assert!(matches!(
            write_embeddings(&space, &mut sink),
            Err(Error::TokenHasWhitespace(_))
        ));
    }

    #[test]
    fn import_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str, content: &str| {
            let path = dir.path().join(name);
            std::fs::write(&path, content).unwrap();
            path
        };
        // count mismatch
        let err = import_embeddings(&p("a.txt", "2 3\nx 1 2 3\ny 1 2 3\nz 1 2 3\n")).unwrap_err();
        assert!(err.to_string().contains("3"), "{err}");
        // non-numeric coordinate
        let err = import_embeddings(&p("b.txt", "1 2\nx 1 zz\n")).unwrap_err();
        assert!(err.to_string().contains(":2") && err.to_string().contains("zz"), "{err}");
        // dimension mismatch
        let err = import_embeddings(&p("c.txt", "1 3\nx 1 2\n")).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
        // duplicate token
        let err = import_embeddings(&p("d.txt", "2 1\nx 1\nx 2\n")).unwrap_err();
        assert!(matches!(err, Error::DuplicateToken { line: Some(3), .. }), "{err}");
    }

    fn sample_checkpoint() -> Checkpoint {
        let v1 = build_vocab("aa", ["x", "y", "x", "z", "x", "y"].into_iter(), 1).unwrap();
        let v2 = build_vocab("bb", ["q", "r", "q"].into_iter(), 1).unwrap();
        let mut config = crate::model::ModelConfig::new(vec!["aa".into(), "bb".into()]).with_dim(6);
        config.dropout = 0.1;
        let params = init_params(&config, &[v1.len(), v2.len()], 77).unwrap();
        Checkpoint {
            params,
            vocabs: vec![v1, v2],
            next_epoch: 4,
            seed: 77,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        // byte-stable: saving the loaded checkpoint reproduces the file
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_payload_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn future_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        meta["version"] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&meta).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + header_len..]);
        let newer = dir.path().join("newer.ckpt");
        std::fs::write(&newer, out).unwrap();
        assert!(matches!(
            load_checkpoint(&newer),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn manifest_shape_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        meta["manifest"][0]["rows"] = serde_json::json!(1234);
        let new_header = serde_json::to_vec(&meta).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + header_len..]);
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, out).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::TensorShape { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        let padded = dir.path().join("padded.ckpt");
        std::fs::write(&padded, bytes).unwrap();
        let err = load_checkpoint(&padded).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn loaded_vocabulary_answers_lookups() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let vocab = &back.vocabs[0];
        assert_eq!(vocab.id("x"), Some(0));
        assert_eq!(vocab.token(0), "x");
    }

    #[test]
    fn format_sig9_shapes() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(0.05), "0.0500000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(-2.0), "-2.00000000");
    }
}
