use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;

use crate::bank::TaskLabel;
use crate::error::{Error, Result};
use crate::model::{Affine, TrainConfig};

const CLASSES: usize = 3;

/// Three-way linear classifier over context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub layer: Affine,
}

impl DiscriminatorParams {
    pub fn zeros(context_dim: usize) -> Self {
        Self {
            layer: Affine::zeros(CLASSES, context_dim),
        }
    }

    pub fn context_dim(&self) -> usize {
        self.layer.in_dim()
    }
}

pub fn discriminator_forward(params: &DiscriminatorParams, psi: &[f64]) -> Result<Array1<f64>> {
    if psi.len() != params.context_dim() {
        return Err(Error::ShapeMismatch(format!(
            "context has length {}, discriminator expects {}",
            psi.len(),
            params.context_dim()
        )));
    }
    Ok(params.layer.forward(ArrayView1::from(psi)))
}

/// Arg-max class; equal logits resolve to the lowest class index.
pub fn discriminator_predict(params: &DiscriminatorParams, psi: &[f64]) -> Result<TaskLabel> {
    let logits = discriminator_forward(params, psi)?;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(TaskLabel::from_class_index(best).expect("three classes"))
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - top).exp());
    let z = e.sum();
    e / z
}

fn accuracy(params: &DiscriminatorParams, data: &[(Vec<f64>, TaskLabel)]) -> Result<f64> {
    let mut hits = 0usize;
    for (x, y) in data {
        if discriminator_predict(params, x)? == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Softmax cross-entropy training by minibatch gradient descent. Returns
/// the parameters and the training accuracy after every epoch.
pub fn discriminator_train(data: &[(Vec<f64>, TaskLabel)], config: &TrainConfig) -> Result<(DiscriminatorParams, Vec<f64>)> {
    config.validate()?;
    let Some((first, _)) = data.first() else {
        return Err(Error::InvalidArgument("training needs at least one example".into()));
    };
    let c = first.len();
    if data.iter().any(|(x, _)| x.len() != c) {
        return Err(Error::ShapeMismatch("context vectors differ in length".into()));
    }
    let mut rng = config.rng();
    let mut params = DiscriminatorParams {
        layer: Affine::uniform(CLASSES, c, config.init_scale, &mut rng),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = Affine::zeros(CLASSES, c);
            for &i in batch {
                let (x, y) = &data[i];
                let x = ArrayView1::from(x.as_slice());
                let mut g = softmax(&params.layer.forward(x));
                g[y.class_index()] -= 1.0;
                grad.accumulate_outer(&g, x);
            }
            let step = -config.learning_rate / batch.len() as f64;
            params.layer.weight.scaled_add(step, &grad.weight);
            params.layer.bias.scaled_add(step, &grad.bias);
        }
        if params.layer.entries().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(accuracy(&params, data)?);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_pick_first_class() {
        let p = DiscriminatorParams::zeros(4);
        assert_eq!(discriminator_predict(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap(), TaskLabel::Text);
    }

    #[test]
    fn single_class_is_learned_perfectly() {
        let data: Vec<_> = (0..10).map(|i| (vec![i as f64 / 10.0, 1.0], TaskLabel::Image)).collect();
        let config = TrainConfig {
            epochs: 20,
            learning_rate: 0.5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (_, acc) = discriminator_train(&data, &config).unwrap();
        assert_eq!(*acc.last().unwrap(), 1.0);
    }

    #[test]
    fn separable_clusters_are_learned() {
        let centers = [[3.0, 0.0], [0.0, 3.0], [-3.0, -3.0]];
        let data: Vec<_> = (0..60)
            .map(|i| {
                let c = centers[i % 3];
                let jitter = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
                (vec![c[0] + jitter, c[1] - jitter], TaskLabel::from_class_index(i % 3).unwrap())
            })
            .collect();
        let config = TrainConfig {
            epochs: 30,
            learning_rate: 0.2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (_, acc) = discriminator_train(&data, &config).unwrap();
        assert!(*acc.last().unwrap() >= 0.95);
    }

    #[test]
    fn forward_checks_length() {
        assert!(discriminator_forward(&DiscriminatorParams::zeros(3), &[0.0]).is_err());
    }
}
