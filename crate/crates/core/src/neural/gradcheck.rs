//! Central finite-difference audit of the analytic gradient.

use ndarray::Array3;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::rng::{derive, Stream};

use super::{Architecture, LossForm, NetParams, TrainingBatch};

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub parameters: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }
}

/// Compares backpropagation with `(L(w + h) - L(w - h)) / 2h` for every
/// parameter of a randomly initialised network on a random batch.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-6)`; the
/// floor keeps entries whose true gradient is essentially zero from reporting
/// pure rounding noise.
pub fn gradient_check(
    arch: Architecture,
    steps: usize,
    experiences: usize,
    pairs: usize,
    form: LossForm,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut rng = derive(seed, Stream::Learner, 7);
    let mut params = NetParams::init(arch.clone(), &mut rng)?;
    let rows = experiences * pairs;
    let batch = TrainingBatch {
        inputs: Array3::from_shape_fn((rows, steps, arch.input), |_| rng.random_range(-1.0..1.0)),
        actions: (0..rows).map(|_| rng.random_range(0..arch.output)).collect(),
        targets: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
        group: pairs,
    };
    let (analytic, _) = params.backward(&batch, form)?;

    let loss_at = |p: &NetParams| -> Result<f64> {
        let q = p.forward(batch.inputs.view())?;
        let preds: Vec<f64> = (0..rows).map(|r| q[[r, batch.actions[r]]]).collect();
        Ok(form.evaluate(&preds, &batch.targets, batch.group).0)
    };

    let mut tensors = Vec::new();
    for t in 0..params.tensors().len() {
        let mut worst = 0.0f64;
        for i in 0..params.tensors()[t].data.len() {
            let w = params.tensors()[t].data[i];
            params.tensors_mut()[t].data[i] = w + step;
            let up = loss_at(&params)?;
            params.tensors_mut()[t].data[i] = w - step;
            let down = loss_at(&params)?;
            params.tensors_mut()[t].data[i] = w;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensors[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        let tensor = &params.tensors()[t];
        tensors.push(TensorCheck { name: tensor.name.clone(), parameters: tensor.data.len(), max_relative_error: worst });
    }
    Ok(GradCheckReport { step, tensors })
}
