//! Optimizer primitives: joint-norm gradient clipping and plain SGD.

use super::tensor::{real, Real, Tensor};
use crate::error::{Error, Result};

/// Clip a set of gradients by their joint L2 norm: if the norm over all
/// tensors together exceeds `max_norm`, every gradient is scaled by
/// `max_norm / norm`. Returns the observed (pre-clip) norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!("clip norm {max_norm} must be > 0")));
    }
    let norm = grads.iter().map(Tensor::sq_sum).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = real::<F>(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Ok(norm)
}

/// One plain SGD update: `p <- p - lr * g`, in place. No momentum, no decay.
pub fn sgd_step<F: Real>(params: &mut [&mut Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!("{} parameters, {} gradients", params.len(), grads.len()),
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("parameter {}, gradient {}", p.shape_str(), g.shape_str()),
            });
        }
        p.add_scaled(g, real::<F>(-lr));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint_norm(grads: &[Tensor<f64>]) -> f64 {
        grads.iter().map(Tensor::sq_sum).sum::<f64>().sqrt()
    }

    #[test]
    fn clip_halves_when_norm_is_twice_the_limit() {
        // Two tensors whose joint norm is 10.
        let mut grads: Vec<Tensor<f64>> = vec![
            Tensor::from_vec(1, 2, vec![6.0, 0.0]).unwrap(),
            Tensor::from_vec(2, 1, vec![0.0, 8.0]).unwrap(),
        ];
        let observed = clip_global_norm(&mut grads, 5.0).unwrap();
        assert!((observed - 10.0).abs() < 1e-12);
        assert!((grads[0].data()[0] - 3.0).abs() < 1e-12);
        assert!((grads[1].data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let mut grads: Vec<Tensor<f64>> = vec![Tensor::from_vec(1, 2, vec![3.0, 0.0]).unwrap()];
        let observed = clip_global_norm(&mut grads, 5.0).unwrap();
        assert!((observed - 3.0).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[3.0, 0.0]);
    }

    #[test]
    fn clip_passes_zero_gradients() {
        let mut grads = vec![Tensor::<f64>::zeros(2, 2)];
        let observed = clip_global_norm(&mut grads, 5.0).unwrap();
        assert_eq!(observed, 0.0);
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_limit() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut grads: Vec<Tensor<f64>> = (0..3)
                .map(|_| {
                    let scale: f64 = rng.gen_range(0.1..20.0);
                    Tensor::uniform(3, 4, scale, &mut rng)
                })
                .collect();
            let before = joint_norm(&grads);
            let max = rng.gen_range(0.5..10.0);
            clip_global_norm(&mut grads, max).unwrap();
            let after = joint_norm(&grads);
            assert!((after - before.min(max)).abs() < 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn clip_is_idempotent() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut grads: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::uniform(4, 4, 3.0, &mut rng)).collect();
        clip_global_norm(&mut grads, 2.0).unwrap();
        let once = grads.clone();
        clip_global_norm(&mut grads, 2.0).unwrap();
        for (a, b) in once.iter().zip(&grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_definition() {
        let mut p: Tensor<f64> = Tensor::from_elem(1, 1, 1.0);
        let g = Tensor::from_elem(1, 1, 0.2);
        sgd_step(&mut [&mut p], &[g], 1.0).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_fixed_points() {
        let mut p: Tensor<f64> = Tensor::from_elem(2, 2, 1.25);
        let zero = Tensor::zeros(2, 2);
        sgd_step(&mut [&mut p], &[zero], 1.0).unwrap();
        assert!(p.data().iter().all(|&x| x == 1.25));

        let g = Tensor::from_elem(2, 2, 0.7);
        sgd_step(&mut [&mut p], &[g], 0.0).unwrap();
        assert!(p.data().iter().all(|&x| x == 1.25));
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(2, 2);
        let g = Tensor::<f64>::zeros(2, 3);
        assert!(sgd_step(&mut [&mut p], &[g], 1.0).is_err());
    }
}
