use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::DEFAULT_LAMBDA;
use crate::model::{head_gradient, HeadParams, HeadShape, TrainingExample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 16,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            init_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be non-negative".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument("init scale must be positive".into()));
        }
        Ok(())
    }

    /// The generator that seeds initialization and then every epoch's shuffle.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Minibatch gradient descent on the head.
///
/// Initialization and per-epoch shuffles come from one seeded stream, and
/// batch gradients are summed in a fixed order, so a given seed always
/// yields the same trajectory. Returns the final parameters and the mean
/// total loss of each epoch (measured on the parameters each batch saw).
pub fn train_head(examples: &[TrainingExample], shape: HeadShape, config: &TrainConfig) -> Result<(HeadParams, Vec<f64>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one example".into()));
    }
    let mut rng = config.rng();
    let mut params = HeadParams::init(shape, config.init_scale, &mut rng)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = HeadParams::zeros(shape)?;
            for &i in batch {
                let (g, loss) = head_gradient(&params, &examples[i], config.lambda)?;
                grad.add_scaled(1.0, &g);
                epoch_loss += loss.total;
            }
            params.add_scaled(-config.learning_rate / batch.len() as f64, &grad);
        }
        let mean = epoch_loss / examples.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        trace.push(mean);
    }
    Ok((params, trace))
}
