use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{truncated_svd, SubspacePair};
use crate::error::{Error, Result};
use crate::loss::{assisted_argument, contrast_direction};
use crate::model::{head_forward, head_gradient, head_loss, Assist, HeadParams, HeadShape, TrainingExample};

/// Largest relative disagreement between the analytic gradient and central
/// finite differences, over every parameter entry. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(params: &HeadParams, example: &TrainingExample, lambda: f64, step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let analytic = head_gradient(params, example, lambda)?.0.flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, (&a, &original)) in analytic.iter().zip(&base).enumerate() {
        set_entry(&mut probe, i, original + step);
        let up = head_loss(&probe, example, lambda)?.total;
        set_entry(&mut probe, i, original - step);
        let down = head_loss(&probe, example, lambda)?.total;
        set_entry(&mut probe, i, original);
        let numeric = (up - down) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn set_entry(params: &mut HeadParams, i: usize, value: f64) {
    *params.entries_mut().nth(i).expect("index within parameter count") = value;
}

/// Which extra supervision a random instance carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistKind {
    None,
    Subspaces,
    NeighborMean,
}

const MAX_DRAWS: usize = 10_000;

fn uniform_vec<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
}

fn random_subspace<R: Rng>(rng: &mut R, dim: usize, eta_prime: usize) -> Result<crate::embed::ContextSubspace> {
    let points = Array2::from_shape_fn((eta_prime + 2, dim), |_| rng.random_range(-1.0..1.0));
    truncated_svd(points.view(), eta_prime)
}

/// Distance of every hinge argument and ReLU pre-activation from its kink.
fn kink_clearance(params: &HeadParams, ex: &TrainingExample) -> Result<f64> {
    let mut clearance = f64::INFINITY;
    if let Some(h) = &params.hidden {
        clearance = h.forward(ex.context.view()).iter().fold(clearance, |m, z| m.min(z.abs()));
    }
    let out = head_forward(params, ex.context.as_slice().expect("contiguous"))?;
    let negs: Vec<&[f64]> = ex.negatives.iter().map(|n| n.as_slice().expect("contiguous")).collect();
    let dir = Array1::from(contrast_direction(ex.positive.as_slice().expect("contiguous"), &negs)?);
    clearance = clearance.min((1.0 - out.psi_star.dot(&dir)).abs());
    if let Assist::Subspaces(pair) = &ex.assist {
        let arg = assisted_argument(
            out.mu.as_slice().expect("contiguous"),
            out.basis.view(),
            pair.positive.mean.as_slice().expect("contiguous"),
            pair.positive.basis.view(),
            pair.negative.mean.as_slice().expect("contiguous"),
            pair.negative.basis.view(),
        )?;
        clearance = clearance.min(arg.abs());
    }
    Ok(clearance)
}

/// Draws a head and example whose ReLU pre-activations and hinge arguments
/// all sit at least `margin` from their kinks, so the loss is smooth around
/// the drawn parameters. Parameters are uniform in [-0.5, 0.5]; inputs and
/// targets uniform in [-1, 1].
pub fn random_smooth_instance<R: Rng>(
    rng: &mut R,
    shape: HeadShape,
    k: usize,
    assist: AssistKind,
    margin: f64,
) -> Result<(HeadParams, TrainingExample)> {
    if k == 0 {
        return Err(Error::InvalidArgument("an example needs at least one negative".into()));
    }
    let d = shape.descriptor_dim;
    for _ in 0..MAX_DRAWS {
        let params = HeadParams::init(shape, 0.5, rng)?;
        let assist = match assist {
            AssistKind::None => Assist::None,
            AssistKind::NeighborMean => Assist::NeighborMean(uniform_vec(rng, d)),
            AssistKind::Subspaces => Assist::Subspaces(SubspacePair {
                positive: random_subspace(rng, d, shape.eta_prime)?,
                negative: random_subspace(rng, d, shape.eta_prime)?,
            }),
        };
        let example = TrainingExample {
            context: uniform_vec(rng, shape.context_dim),
            positive: uniform_vec(rng, d),
            negatives: (0..k).map(|_| uniform_vec(rng, d)).collect(),
            assist,
        };
        super::check_example(&params, &example)?;
        if kink_clearance(&params, &example)? >= margin {
            return Ok((params, example));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no instance with kink margin {margin} in {MAX_DRAWS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Assist, HeadShape};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> TrainingExample {
        TrainingExample {
            context: array![0.4, -0.7, 0.9],
            positive: array![1.0, 0.2],
            negatives: vec![array![-0.5, 0.3], array![0.1, -0.8]],
            assist: Assist::NeighborMean(array![0.6, 0.1]),
        }
    }

    #[test]
    fn zero_gradient_region_reports_zero() {
        let mut p = HeadParams::zeros(HeadShape::single_fc(3, 2)).unwrap();
        p.output.bias = array![100.0, 0.0];
        let ex = TrainingExample {
            assist: Assist::None,
            ..example()
        };
        assert_eq!(grad_check(&p, &ex, 0.5, 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn small_random_instance_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = HeadParams::init(HeadShape { hidden_dim: 4, ..HeadShape::new(3, 2, 0) }, 0.5, &mut rng).unwrap();
        assert!(grad_check(&p, &example(), 0.5, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn coarse_step_is_worse_near_a_kink() {
        // One hidden unit sits 0.01 above its ReLU kink: a 0.1 step crosses it.
        let mut p = HeadParams::zeros(HeadShape { hidden_dim: 2, ..HeadShape::new(1, 1, 0) }).unwrap();
        let h = p.hidden.as_mut().unwrap();
        h.weight = array![[1.0], [1.0]];
        h.bias = array![-0.99, 0.5];
        p.output.weight = array![[0.3, 0.2]];
        let ex = TrainingExample {
            context: array![1.0],
            positive: array![1.0],
            negatives: vec![array![-1.0]],
            assist: Assist::NeighborMean(array![0.7]),
        };
        let fine = grad_check(&p, &ex, 0.5, 1e-4).unwrap();
        let coarse = grad_check(&p, &ex, 0.5, 1e-1).unwrap();
        assert!(fine < 1e-6);
        assert!(coarse > fine);
    }

    #[test]
    fn smooth_instances_pass_for_every_assist() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for assist in [AssistKind::None, AssistKind::NeighborMean, AssistKind::Subspaces] {
            for _ in 0..5 {
                let (p, ex) = random_smooth_instance(&mut rng, HeadShape { hidden_dim: 5, ..HeadShape::new(4, 3, 2) }, 2, assist, 1e-3).unwrap();
                assert!(kink_clearance(&p, &ex).unwrap() >= 1e-3);
                assert!(grad_check(&p, &ex, 0.5, 1e-4).unwrap() < 1e-4);
            }
        }
        let single = HeadShape::single_fc(4, 3);
        assert!(random_smooth_instance(&mut rng, single, 2, AssistKind::Subspaces, 1e-3).is_err());
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = HeadParams::zeros(HeadShape::single_fc(3, 2)).unwrap();
        assert!(grad_check(&p, &example(), 0.5, 0.0).is_err());
    }
}
