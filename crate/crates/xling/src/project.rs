//! Deterministic 2-D PCA projection of embedding spaces, for plotting
//! words of several languages in one picture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::EmbeddingSpace;
use crate::error::{Error, Result};

/// One projected word.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub lang: String,
    pub token: String,
    pub x: f64,
    pub y: f64,
}

/// Pool the first `n_points` rows of every space (vocabulary order is
/// frequency order for spaces this crate exports), mean-center the pool,
/// and project onto the top two principal components. The sign of each
/// component is fixed by making its largest-magnitude loading positive.
pub fn project_embeddings(
    spaces: &[EmbeddingSpace],
    n_points: usize,
) -> Result<Vec<ProjectedPoint>> {
    if spaces.is_empty() {
        return Err(Error::Config("at least one embedding space required".into()));
    }
    let d = spaces[0].dim();
    if spaces.iter().any(|s| s.dim() != d) {
        return Err(Error::Config("embedding spaces differ in dimension".into()));
    }
    let mut rows: Vec<(usize, usize)> = Vec::new(); // (space, row)
    for (si, s) in spaces.iter().enumerate() {
        for r in 0..s.len().min(n_points) {
            rows.push((si, r));
        }
    }
    if rows.len() < 2 {
        return Err(Error::Config("need at least two points to project".into()));
    }

    let n = rows.len();
    let mut mean = vec![0.0f64; d];
    for &(si, r) in &rows {
        for (m, &v) in mean.iter_mut().zip(spaces[si].row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // covariance (unnormalized): C = sum (x - mean)(x - mean)^T
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for &(si, r) in &rows {
        for (j, c) in centered.iter_mut().enumerate() {
            *c = spaces[si].row(r)[j] - mean[j];
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let dst = &mut cov[i * d..(i + 1) * d];
            for (j, x) in dst.iter_mut().enumerate() {
                *x += ci * centered[j];
            }
        }
    }

    let scale = cov.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    let v1 = top_eigenvector(&cov, d, None, scale);
    let lambda1 = rayleigh(&cov, d, &v1);
    // deflate and pull the second component, kept orthogonal to the first
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= lambda1 * v1[i] * v1[j];
        }
    }
    let v2 = top_eigenvector(&deflated, d, Some(&v1), scale);

    Ok(rows
        .into_iter()
        .map(|(si, r)| {
            let row = spaces[si].row(r);
            let mut x = 0.0;
            let mut y = 0.0;
            for j in 0..d {
                let c = row[j] - mean[j];
                x += c * v1[j];
                y += c * v2[j];
            }
            ProjectedPoint {
                lang: spaces[si].lang.clone(),
                token: spaces[si].token(r).to_string(),
                x,
                y,
            }
        })
        .collect())
}

fn rayleigh(m: &[f64], d: usize, v: &[f64]) -> f64 {
    let mut mv = vec![0.0; d];
    for i in 0..d {
        mv[i] = m[i * d..(i + 1) * d]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
    mv.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Power iteration with a fixed pseudo-random start. `orthogonal_to` keeps
/// the iterate out of an already-extracted component; if the matrix has no
/// energy left (rank-deficient data) a deterministic orthogonal direction
/// is returned so projections onto it are exactly the leftover (~zero)
/// variance.
fn top_eigenvector(m: &[f64], d: usize, orthogonal_to: Option<&[f64]>, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FF_EE00);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, orthogonal_to);
    if normalize(&mut v) == 0.0 {
        v[0] = 1.0;
    }
    let floor = 1e-14 * scale.max(1e-300);
    let mut mv = vec![0.0; d];
    for _ in 0..1000 {
        for i in 0..d {
            mv[i] = m[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        orthogonalize(&mut mv, orthogonal_to);
        let norm = normalize(&mut mv);
        if norm <= floor {
            // no variance left in this subspace; keep the current
            // (deterministic, orthogonal) direction
            break;
        }
        let cos: f64 = mv.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.copy_from_slice(&mv);
        if (1.0 - cos.abs()) < 1e-15 {
            break;
        }
    }
    // sign convention: largest-magnitude loading positive
    let mut lead = 0;
    for j in 1..d {
        if v[j].abs() > v[lead].abs() {
            lead = j;
        }
    }
    if v[lead] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    v
}

fn orthogonalize(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (x, &ui) in v.iter_mut().zip(u) {
            *x -= dot * ui;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn space_from(lang: &str, rows: Vec<Vec<f64>>) -> EmbeddingSpace {
        let d = rows[0].len();
        let tokens: Vec<String> = (0..rows.len()).map(|i| format!("{lang}{i}")).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        EmbeddingSpace::new(lang, tokens, Tensor::from_vec(rows.len(), d, flat).unwrap()).unwrap()
    }

    #[test]
    fn planar_data_keeps_pairwise_distances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        // points on a random 2-D plane inside 5-D
        let basis: Vec<Vec<f64>> = vec![
            vec![0.6, 0.0, 0.8, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
        ];
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                (0..5).map(|j| a * basis[0][j] + b * basis[1][j] + 0.5).collect()
            })
            .collect();
        let space = space_from("xx", rows.clone());
        let pts = project_embeddings(&[space], 1000).unwrap();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let orig: f64 = (0..5)
                    .map(|k| (rows[i][k] - rows[j][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let proj = ((pts[i].x - pts[j].x).powi(2) + (pts[i].y - pts[j].y).powi(2)).sqrt();
                assert!(
                    (orig - proj).abs() < 1e-6,
                    "pair ({i},{j}): {orig} vs {proj}"
                );
            }
        }
    }

    #[test]
    fn collinear_points_project_to_a_line() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.4 - 2.0;
                vec![t, -2.0 * t, 0.5 * t]
            })
            .collect();
        let space = space_from("xx", rows);
        let pts = project_embeddings(&[space], 1000).unwrap();
        for p in &pts {
            assert!(p.y.abs() < 1e-9, "second coordinate {}", p.y);
        }
        // and the first coordinate carries the spread
        let spread = pts.iter().map(|p| p.x.abs()).fold(0.0f64, f64::max);
        assert!(spread > 1.0);
    }

    #[test]
    fn duplicated_input_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![(i % 3) as f64, (i % 5) as f64 * 0.3, i as f64 * 0.1])
            .collect();
        let s1 = space_from("aa", rows.clone());
        let s2 = space_from("aa", rows);
        let p1 = project_embeddings(&[s1.clone()], 100).unwrap();
        let p2 = project_embeddings(&[s2], 100).unwrap();
        assert_eq!(p1, p2);
        // pooling two languages keeps per-space tagging
        let bb = space_from("bb", vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let pooled = project_embeddings(&[s1, bb], 100).unwrap();
        assert_eq!(pooled.iter().filter(|p| p.lang == "bb").count(), 2);
    }

    #[test]
    fn fewer_than_two_points_is_an_error() {
        let s = space_from("aa", vec![vec![1.0, 2.0]]);
        assert!(project_embeddings(&[s], 1).is_err());
        assert!(project_embeddings(&[], 10).is_err());
    }

    #[test]
    fn sign_convention_pins_component_orientation() {
        // data spread along -e0: component must still have positive lead
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![-(i as f64), 0.0]).collect();
        let space = space_from("aa", rows);
        let pts = project_embeddings(&[space], 100).unwrap();
        // x coordinates are centered data projected on +e0
        assert!(pts[0].x > pts[5].x);
    }
}
