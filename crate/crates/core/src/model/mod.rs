//! Feature matching head and task discriminator.
//!
//! The head maps a context vector ψ to a predicted descriptor ψ*:
//!
//! ```text
//! main  = W2 · relu(W1 · ψ + b1) + b2          (D)
//! ctx   = Wc · ψ + bc                          (D · (1 + η′))
//! μ, Θ  = ctx split column-major, μ first
//! ψ*    = main + μ                             (residual link)
//! ```
//!
//! The single-FC baseline head replaces the main stream with one affine map
//! and has no context stream.

mod discriminator;
mod gradcheck;
mod io;
mod train;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::SubspacePair;
use crate::error::{Error, Result};
use crate::loss::{assisted_argument, combined_loss, contrast_direction, hinge_rank, nno_breakdown, LossBreakdown};

pub use discriminator::{discriminator_forward, discriminator_predict, discriminator_train, DiscriminatorParams};
pub use gradcheck::{grad_check, random_smooth_instance, AssistKind};
pub use io::{load_discriminator, load_head, save_discriminator, save_head, HeadManifest, DISCRIMINATOR_MANIFEST, HEAD_MANIFEST};
pub use train::{train_head, TrainConfig};

/// Default descriptor dimension D.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Every entry, bias included, uniform in `[-scale, scale]`.
    pub fn uniform<R: Rng>(out_dim: usize, in_dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), &mut draw);
        let bias = Array1::from_shape_simple_fn(out_dim, &mut draw);
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates the gradient of an upstream `grad_out` into `self`.
    fn accumulate_outer(&mut self, grad_out: &Array1<f64>, input: ArrayView1<'_, f64>) {
        let g = grad_out.view().insert_axis(Axis(1));
        let x = input.insert_axis(Axis(0));
        self.weight += &g.dot(&x);
        self.bias += grad_out;
    }

    fn entries(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One affine layer, no context stream.
    SingleFc,
    /// FC→ReLU→FC main stream plus the context stream.
    #[default]
    MainPlusContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub kind: HeadKind,
    pub context_dim: usize,
    /// Hidden width of the main stream; ignored by the single-FC head.
    pub hidden_dim: usize,
    pub descriptor_dim: usize,
    pub eta_prime: usize,
}

impl HeadShape {
    /// A main-plus-context head whose hidden width equals the descriptor dim.
    pub fn new(context_dim: usize, descriptor_dim: usize, eta_prime: usize) -> Self {
        Self {
            kind: HeadKind::MainPlusContext,
            context_dim,
            hidden_dim: descriptor_dim,
            descriptor_dim,
            eta_prime,
        }
    }

    pub fn single_fc(context_dim: usize, descriptor_dim: usize) -> Self {
        Self {
            kind: HeadKind::SingleFc,
            context_dim,
            hidden_dim: 0,
            descriptor_dim,
            eta_prime: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.context_dim == 0 || self.descriptor_dim == 0 {
            return Err(Error::ShapeMismatch("context and descriptor dims must be positive".into()));
        }
        if self.kind == HeadKind::MainPlusContext && self.hidden_dim == 0 {
            return Err(Error::ShapeMismatch("hidden width must be positive".into()));
        }
        if self.kind == HeadKind::SingleFc && self.eta_prime != 0 {
            return Err(Error::ShapeMismatch("the single-FC head has no context stream".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// W1, b1. `None` for the single-FC head.
    pub hidden: Option<Affine>,
    /// W2, b2 (or the lone layer of the single-FC head).
    pub output: Affine,
    /// Wc, bc. `None` for the single-FC head.
    pub context: Option<Affine>,
    pub eta_prime: usize,
}

impl HeadParams {
    pub fn zeros(shape: HeadShape) -> Result<Self> {
        shape.validate()?;
        let d = shape.descriptor_dim;
        let c = shape.context_dim;
        Ok(match shape.kind {
            HeadKind::SingleFc => Self {
                hidden: None,
                output: Affine::zeros(d, c),
                context: None,
                eta_prime: 0,
            },
            HeadKind::MainPlusContext => Self {
                hidden: Some(Affine::zeros(shape.hidden_dim, c)),
                output: Affine::zeros(d, shape.hidden_dim),
                context: Some(Affine::zeros(d * (1 + shape.eta_prime), c)),
                eta_prime: shape.eta_prime,
            },
        })
    }

    /// Uniform initialization in `[-init_scale, init_scale]`, drawn in the
    /// order hidden, output, context.
    pub fn init<R: Rng>(shape: HeadShape, init_scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        for layer in p.layers_mut() {
            *layer = Affine::uniform(layer.out_dim(), layer.in_dim(), init_scale, rng);
        }
        Ok(p)
    }

    pub fn shape(&self) -> HeadShape {
        HeadShape {
            kind: self.kind(),
            context_dim: self.context_dim(),
            hidden_dim: self.hidden.as_ref().map_or(0, Affine::out_dim),
            descriptor_dim: self.descriptor_dim(),
            eta_prime: self.eta_prime,
        }
    }

    pub fn kind(&self) -> HeadKind {
        if self.hidden.is_some() {
            HeadKind::MainPlusContext
        } else {
            HeadKind::SingleFc
        }
    }

    pub fn context_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).in_dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.output.out_dim()
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.hidden.iter().chain(std::iter::once(&self.output)).chain(self.context.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
            .chain(self.context.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All entries in a fixed order: each layer's weight (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers().flat_map(Affine::entries).copied().collect()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().flat_map(Affine::entries_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().flat_map(Affine::entries).all(|v| v.is_finite())
    }

    /// `self += alpha * other`; shapes must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &HeadParams) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }
}

/// Everything the head computes for one context vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub psi_star: Array1<f64>,
    pub mu: Array1<f64>,
    /// `D × η′`.
    pub basis: Array2<f64>,
}

struct Trace {
    hidden_pre: Option<Array1<f64>>,
    hidden_act: Option<Array1<f64>>,
    out: HeadOutput,
}

fn forward_trace(params: &HeadParams, psi: ArrayView1<'_, f64>) -> Result<Trace> {
    if psi.len() != params.context_dim() {
        return Err(Error::ShapeMismatch(format!(
            "context has length {}, head expects {}",
            psi.len(),
            params.context_dim()
        )));
    }
    let d = params.descriptor_dim();
    let (hidden_pre, hidden_act, main) = match &params.hidden {
        Some(h) => {
            let z = h.forward(psi);
            let a = z.mapv(|v| v.max(0.0));
            let main = params.output.forward(a.view());
            (Some(z), Some(a), main)
        }
        None => (None, None, params.output.forward(psi)),
    };
    let (mu, basis) = match &params.context {
        Some(c) => {
            let ctx = c.forward(psi);
            let mu = ctx.slice(ndarray::s![..d]).to_owned();
            let mut basis = Array2::zeros((d, params.eta_prime));
            for j in 0..params.eta_prime {
                basis.column_mut(j).assign(&ctx.slice(ndarray::s![d * (1 + j)..d * (2 + j)]));
            }
            (mu, basis)
        }
        None => (Array1::zeros(d), Array2::zeros((d, 0))),
    };
    let psi_star = &main + &mu;
    Ok(Trace {
        hidden_pre,
        hidden_act,
        out: HeadOutput { psi_star, mu, basis },
    })
}

pub fn head_forward(params: &HeadParams, psi: &[f64]) -> Result<HeadOutput> {
    Ok(forward_trace(params, ArrayView1::from(psi))?.out)
}

/// The extra supervision attached to one training episode.
#[derive(Clone, Debug, PartialEq)]
pub enum Assist {
    /// Ranking hinge only.
    None,
    /// Combined objective: the assisted hinge against these subspaces.
    Subspaces(SubspacePair),
    /// Nearest-neighbor-only baseline: squared pull toward this mean.
    NeighborMean(Array1<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub context: Array1<f64>,
    pub positive: Array1<f64>,
    pub negatives: Vec<Array1<f64>>,
    pub assist: Assist,
}

impl TrainingExample {
    fn negative_slices(&self) -> Vec<&[f64]> {
        self.negatives.iter().map(|n| n.as_slice().expect("contiguous")).collect()
    }
}

fn check_example(params: &HeadParams, ex: &TrainingExample) -> Result<()> {
    let d = params.descriptor_dim();
    if ex.positive.len() != d || ex.negatives.iter().any(|n| n.len() != d) {
        return Err(Error::ShapeMismatch(format!("targets must have length {d}")));
    }
    match &ex.assist {
        Assist::Subspaces(pair) => {
            if params.context.is_none() {
                return Err(Error::ShapeMismatch("subspace supervision needs a context stream".into()));
            }
            for s in [&pair.positive, &pair.negative] {
                if s.dim() != d || s.eta_prime() != params.eta_prime {
                    return Err(Error::ShapeMismatch(format!(
                        "subspace is {}x{}, head produces {d}x{}",
                        s.dim(),
                        s.eta_prime(),
                        params.eta_prime
                    )));
                }
            }
        }
        Assist::NeighborMean(m) if m.len() != d => {
            return Err(Error::ShapeMismatch(format!("neighbor mean must have length {d}")));
        }
        _ => {}
    }
    Ok(())
}

/// Loss of one example, forward pass only.
pub fn head_loss(params: &HeadParams, ex: &TrainingExample, lambda: f64) -> Result<LossBreakdown> {
    check_example(params, ex)?;
    let out = forward_trace(params, ex.context.view())?.out;
    let psi_star = out.psi_star.as_slice().expect("contiguous");
    let positive = ex.positive.as_slice().expect("contiguous");
    let negs = ex.negative_slices();
    match &ex.assist {
        Assist::None => LossBreakdown::new(hinge_rank(psi_star, positive, &negs)?, 0.0, lambda),
        Assist::NeighborMean(m) => nno_breakdown(psi_star, positive, &negs, m.as_slice().expect("contiguous"), lambda),
        Assist::Subspaces(pair) => combined_loss(
            psi_star,
            positive,
            &negs,
            out.mu.as_slice().expect("contiguous"),
            out.basis.view(),
            pair,
            lambda,
        ),
    }
}

/// Exact gradient of the example's objective with respect to every head
/// parameter. Hinges and ReLUs take subgradient 0 at their kinks.
pub fn head_gradient(params: &HeadParams, ex: &TrainingExample, lambda: f64) -> Result<(HeadParams, LossBreakdown)> {
    check_example(params, ex)?;
    let trace = forward_trace(params, ex.context.view())?;
    let out = &trace.out;
    let d = params.descriptor_dim();

    let negs = ex.negative_slices();
    let dir = Array1::from(contrast_direction(ex.positive.as_slice().expect("contiguous"), &negs)?);
    let rank_arg = 1.0 - out.psi_star.dot(&dir);
    let primary = rank_arg.max(0.0);
    let mut g_psi = if rank_arg > 0.0 { -&dir } else { Array1::zeros(d) };

    // Gradient of the context stream output, μ block first.
    let mut g_ctx = params.context.as_ref().map(|c| Array1::<f64>::zeros(c.out_dim()));
    let assisted = match &ex.assist {
        Assist::None => 0.0,
        Assist::NeighborMean(m) => {
            let diff = &out.psi_star - m;
            g_psi.scaled_add(2.0 * lambda, &diff);
            diff.dot(&diff)
        }
        Assist::Subspaces(pair) => {
            let arg = assisted_argument(
                out.mu.as_slice().expect("contiguous"),
                out.basis.view(),
                pair.positive.mean.as_slice().expect("contiguous"),
                pair.positive.basis.view(),
                pair.negative.mean.as_slice().expect("contiguous"),
                pair.negative.basis.view(),
            )?;
            if arg > 0.0 {
                let g = g_ctx.as_mut().expect("checked above");
                g.slice_mut(ndarray::s![..d])
                    .scaled_add(-lambda, &(&pair.positive.mean - &pair.negative.mean));
                for j in 0..params.eta_prime {
                    let delta = &pair.positive.basis.column(j) - &pair.negative.basis.column(j);
                    g.slice_mut(ndarray::s![d * (1 + j)..d * (2 + j)]).scaled_add(-lambda, &delta);
                }
            }
            arg.max(0.0)
        }
    };
    // Residual link: ψ* = main + μ.
    if let Some(g) = g_ctx.as_mut() {
        g.slice_mut(ndarray::s![..d]).scaled_add(1.0, &g_psi);
    }

    let mut grad = HeadParams::zeros(params.shape())?;
    match (&params.hidden, &trace.hidden_pre, &trace.hidden_act) {
        (Some(_), Some(z), Some(a)) => {
            grad.output.accumulate_outer(&g_psi, a.view());
            let g_act = params.output.weight.t().dot(&g_psi);
            let g_pre = Array1::from_iter(g_act.iter().zip(z).map(|(g, &zi)| if zi > 0.0 { *g } else { 0.0 }));
            grad.hidden.as_mut().expect("same shape").accumulate_outer(&g_pre, ex.context.view());
        }
        _ => grad.output.accumulate_outer(&g_psi, ex.context.view()),
    }
    if let (Some(gc), Some(g)) = (grad.context.as_mut(), g_ctx.as_ref()) {
        gc.accumulate_outer(g, ex.context.view());
    }
    Ok((grad, LossBreakdown::new(primary, assisted, lambda)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::ContextSubspace;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_outputs_zero() {
        let p = HeadParams::zeros(HeadShape::new(3, 2, 2)).unwrap();
        let out = head_forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out.psi_star, Array1::<f64>::zeros(2));
        assert_eq!(out.mu, Array1::<f64>::zeros(2));
        assert_eq!(out.basis, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn no_directions_means_mu_only() {
        let p = HeadParams::zeros(HeadShape::new(3, 4, 0)).unwrap();
        assert_eq!(p.context.as_ref().unwrap().out_dim(), 4);
        assert_eq!(head_forward(&p, &[0.0; 3]).unwrap().basis.dim(), (4, 0));
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        // c=4, h=3, D=2, η′=1.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = HeadParams::init(HeadShape { hidden_dim: 3, ..HeadShape::new(4, 2, 1) }, 0.8, &mut rng).unwrap();
        let psi = [0.3, -1.1, 0.7, 0.2];
        let h = p.hidden.as_ref().unwrap();
        let mut a = [0.0; 3];
        for i in 0..3 {
            let mut z = h.bias[i];
            for j in 0..4 {
                z += h.weight[[i, j]] * psi[j];
            }
            a[i] = if z > 0.0 { z } else { 0.0 };
        }
        let c = p.context.as_ref().unwrap();
        let mut ctx = [0.0; 4];
        for (i, slot) in ctx.iter_mut().enumerate() {
            *slot = c.bias[i] + (0..4).map(|j| c.weight[[i, j]] * psi[j]).sum::<f64>();
        }
        let out = head_forward(&p, &psi).unwrap();
        for i in 0..2 {
            let main = p.output.bias[i] + (0..3).map(|j| p.output.weight[[i, j]] * a[j]).sum::<f64>();
            assert!((out.psi_star[i] - (main + ctx[i])).abs() < 1e-14);
            assert!((out.mu[i] - ctx[i]).abs() < 1e-14);
            assert!((out.basis[[i, 0]] - ctx[2 + i]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_context_weights_leave_plain_main_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = HeadParams::init(HeadShape::new(3, 2, 1), 0.5, &mut rng).unwrap();
        *p.context.as_mut().unwrap() = Affine::zeros(4, 3);
        let psi = array![0.2, 0.4, -0.9];
        let h = p.hidden.as_ref().unwrap().forward(psi.view()).mapv(|v| v.max(0.0));
        let main = p.output.forward(h.view());
        assert_eq!(head_forward(&p, psi.as_slice().unwrap()).unwrap().psi_star, main);
    }

    #[test]
    fn forward_rejects_wrong_context_length() {
        let p = HeadParams::zeros(HeadShape::new(3, 2, 0)).unwrap();
        assert!(matches!(head_forward(&p, &[0.0; 2]), Err(Error::ShapeMismatch(_))));
    }

    fn subspace(mean: Array1<f64>, basis: Array2<f64>) -> ContextSubspace {
        let k = basis.ncols();
        ContextSubspace {
            mean,
            basis,
            eigenvalues: vec![0.0; k],
        }
    }

    #[test]
    fn inactive_hinges_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = HeadParams::init(HeadShape::new(2, 2, 1), 0.1, &mut rng).unwrap();
        // Large output bias pushes ψ* far along the contrast direction.
        p.output.bias = array![50.0, 0.0];
        p.context.as_mut().unwrap().bias = array![50.0, 0.0, 0.0, 0.0];
        let ex = TrainingExample {
            context: array![0.3, 0.1],
            positive: array![1.0, 0.0],
            negatives: vec![array![-1.0, 0.0]],
            assist: Assist::Subspaces(SubspacePair {
                positive: subspace(array![1.0, 0.0], array![[1.0], [0.0]]),
                negative: subspace(array![0.0, 0.0], array![[0.0], [1.0]]),
            }),
        };
        let (g, loss) = head_gradient(&p, &ex, 0.5).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_zero_routes_context_gradient_only_through_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = HeadParams::init(HeadShape::new(3, 2, 1), 0.1, &mut rng).unwrap();
        let ex = TrainingExample {
            context: array![0.3, -0.1, 0.8],
            positive: array![1.0, 0.0],
            negatives: vec![array![-1.0, 0.5]],
            assist: Assist::Subspaces(SubspacePair {
                positive: subspace(array![1.0, 0.0], array![[1.0], [0.0]]),
                negative: subspace(array![0.0, 0.0], array![[0.0], [1.0]]),
            }),
        };
        let (g, _) = head_gradient(&p, &ex, 0.0).unwrap();
        let gc = g.context.unwrap();
        // Rows for Θ get nothing; rows for μ carry the ψ* gradient.
        assert!(gc.weight.slice(ndarray::s![2.., ..]).iter().all(|&v| v == 0.0));
        assert!(gc.weight.slice(ndarray::s![..2, ..]).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn subspace_supervision_needs_context_stream() {
        let p = HeadParams::zeros(HeadShape::single_fc(2, 2)).unwrap();
        let ex = TrainingExample {
            context: array![0.0, 0.0],
            positive: array![1.0, 0.0],
            negatives: vec![array![0.0, 1.0]],
            assist: Assist::Subspaces(SubspacePair {
                positive: subspace(array![1.0, 0.0], Array2::zeros((2, 0))),
                negative: subspace(array![0.0, 0.0], Array2::zeros((2, 0))),
            }),
        };
        assert!(matches!(head_gradient(&p, &ex, 0.5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn flatten_and_add_scaled_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = HeadParams::init(HeadShape::new(3, 2, 1), 0.3, &mut rng).unwrap();
        let b = HeadParams::init(HeadShape::new(3, 2, 1), 0.3, &mut rng).unwrap();
        let mut c = a.clone();
        c.add_scaled(-2.0, &b);
        let want: Vec<f64> = a.flatten().iter().zip(b.flatten()).map(|(x, y)| x - 2.0 * y).collect();
        assert_eq!(c.flatten(), want);
        assert_eq!(a.num_params(), a.flatten().len());
    }
}
