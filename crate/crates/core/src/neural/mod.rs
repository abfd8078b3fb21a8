//! The recurrent Q-network: one LSTM layer over a window of encoded
//! observations, rectified dense layers, and a linear head with one output per
//! (channel or none) x departures action.
//!
//! All tensors live in flat row-major buffers so that the optimiser, the
//! checkpoint format and the gradient audit can treat them uniformly.

mod adam;
mod checkpoint;
mod encoding;
mod gradcheck;

pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use encoding::{encode_epoch, encode_pair, feature_count, EncodingConfig};
pub use gradcheck::{gradient_check, GradCheckReport};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Features per time step.
    pub input: usize,
    pub lstm_hidden: usize,
    /// Widths of the rectified layers between the LSTM and the head.
    pub dense: Vec<usize>,
    pub output: usize,
}

impl Architecture {
    /// Output width for `channels` channels and up to `max_departures` packets:
    /// index `c * (1 + max_departures) + r`, where `c = 0` means no channel.
    pub fn action_count(channels: usize, max_departures: u32) -> usize {
        (1 + channels) * (1 + max_departures as usize)
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.lstm_hidden == 0 || self.output == 0 || self.dense.contains(&0) {
            return Err(Error::Shape(format!("layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h4 = 4 * self.lstm_hidden;
        let mut out = vec![
            ("lstm.w_input".to_string(), vec![self.input, h4]),
            ("lstm.w_recurrent".to_string(), vec![self.lstm_hidden, h4]),
            ("lstm.bias".to_string(), vec![h4]),
        ];
        let mut fan_in = self.lstm_hidden;
        for (l, &width) in self.dense.iter().enumerate() {
            out.push((format!("dense{l}.weight"), vec![fan_in, width]));
            out.push((format!("dense{l}.bias"), vec![width]));
            fan_in = width;
        }
        out.push(("head.weight".to_string(), vec![fan_in, self.output]));
        out.push(("head.bias".to_string(), vec![self.output]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All weights of the network. Gate blocks inside the LSTM tensors are ordered
/// input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

/// Gradient of the loss with respect to every tensor of a [`NetParams`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            let k = max_norm / n;
            self.tensors.iter_mut().flatten().for_each(|g| *g *= k);
        }
        n
    }
}

/// How per-pair temporal-difference errors of one experience combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Square of the summed errors of all pairs, averaged over experiences.
    #[default]
    SummedTd,
    /// Sum of squared per-pair errors, averaged over experiences.
    PerPairSquared,
}

impl LossForm {
    /// Loss and its derivative with respect to each prediction. Rows come in
    /// consecutive runs of `group` rows per experience.
    pub fn evaluate(self, predictions: &[f64], targets: &[f64], group: usize) -> (f64, Vec<f64>) {
        let experiences = predictions.len() / group;
        let scale = 1.0 / experiences as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; predictions.len()];
        for e in 0..experiences {
            let rows = e * group..(e + 1) * group;
            match self {
                LossForm::SummedTd => {
                    let td: f64 = rows.clone().map(|r| targets[r] - predictions[r]).sum();
                    loss += td * td;
                    for r in rows {
                        grad[r] = -2.0 * td * scale;
                    }
                }
                LossForm::PerPairSquared => {
                    for r in rows {
                        let td = targets[r] - predictions[r];
                        loss += td * td;
                        grad[r] = -2.0 * td * scale;
                    }
                }
            }
        }
        (loss * scale, grad)
    }
}

/// Sequences with the action taken and the regression target of each row.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// `(rows, steps, features)`.
    pub inputs: Array3<f64>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
    /// Rows belonging to one experience (the number of pairs).
    pub group: usize,
}

struct Cache {
    /// Activated gates per step, `(rows, 4H)`.
    gates: Vec<Array2<f64>>,
    /// Cell states `c_0 ..= c_N`.
    cells: Vec<Array2<f64>>,
    tanh_cells: Vec<Array2<f64>>,
    /// Hidden states `h_0 ..= h_N`.
    hiddens: Vec<Array2<f64>>,
    /// Input of every dense layer followed by the network output.
    activations: Vec<Array2<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NetParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                Tensor { name, shape, data: vec![0.0; len] }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    /// Uniform weights scaled by fan-in, zero biases except the forget gate at +1.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let h = p.arch.lstm_hidden;
        for t in p.tensors.iter_mut() {
            if t.shape.len() == 2 {
                let fan_in = if t.name.starts_with("lstm.") { h } else { t.shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                t.data.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            }
        }
        p.tensors[2].data[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        Ok(p)
    }

    /// Rebuilds parameters from named tensors, checking them against `arch`.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { tensors: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    fn matrix(&self, i: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[i];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("shape checked at construction")
    }

    fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[i].data)
    }

    fn layers(&self) -> usize {
        self.arch.dense.len() + 1
    }

    fn check_inputs(&self, inputs: &ArrayView3<f64>) -> Result<()> {
        let (rows, steps, features) = inputs.dim();
        if features != self.arch.input || steps == 0 || rows == 0 {
            return Err(Error::Shape(format!(
                "inputs {:?} do not fit a network with {} features per step",
                inputs.dim(),
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Q values for every row of `(rows, steps, features)` inputs, from a zero
    /// initial hidden and cell state.
    pub fn forward(&self, inputs: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let mut cache = self.run(inputs);
        Ok(cache.activations.pop().expect("network has a head"))
    }

    fn run(&self, inputs: ArrayView3<f64>) -> Cache {
        let (rows, steps, _) = inputs.dim();
        let h = self.arch.lstm_hidden;
        let (w_in, w_rec, bias) = (self.matrix(0), self.matrix(1), self.vector(2));
        let mut cache = Cache {
            gates: Vec::with_capacity(steps),
            cells: vec![Array2::zeros((rows, h))],
            tanh_cells: Vec::with_capacity(steps),
            hiddens: vec![Array2::zeros((rows, h))],
            activations: Vec::new(),
        };
        for t in 0..steps {
            let mut z = Array2::from_shape_fn((rows, 4 * h), |(_, k)| bias[k]);
            general_mat_mul(1.0, &inputs.index_axis(Axis(1), t), &w_in, 1.0, &mut z);
            general_mat_mul(1.0, &cache.hiddens[t], &w_rec, 1.0, &mut z);
            for mut row in z.rows_mut() {
                row.slice_mut(s![..3 * h]).mapv_inplace(sigmoid);
                row.slice_mut(s![3 * h..]).mapv_inplace(f64::tanh);
            }
            let prev = &cache.cells[t];
            let mut c = Array2::zeros((rows, h));
            let mut tc = Array2::zeros((rows, h));
            let mut hn = Array2::zeros((rows, h));
            for r in 0..rows {
                for k in 0..h {
                    let (i, f, o, g) = (z[[r, k]], z[[r, h + k]], z[[r, 2 * h + k]], z[[r, 3 * h + k]]);
                    let cv = f * prev[[r, k]] + i * g;
                    let tv = cv.tanh();
                    c[[r, k]] = cv;
                    tc[[r, k]] = tv;
                    hn[[r, k]] = o * tv;
                }
            }
            cache.gates.push(z);
            cache.cells.push(c);
            cache.tanh_cells.push(tc);
            cache.hiddens.push(hn);
        }

        let mut a = cache.hiddens[steps].clone();
        let last = self.layers() - 1;
        for l in 0..=last {
            let (w, b) = (self.matrix(3 + 2 * l), self.vector(4 + 2 * l));
            let mut z = Array2::from_shape_fn((rows, w.ncols()), |(_, k)| b[k]);
            general_mat_mul(1.0, &a, &w, 1.0, &mut z);
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cache.activations.push(a);
            a = z;
        }
        cache.activations.push(a);
        cache
    }

    /// Loss of the batch and its exact gradient by backpropagation through time.
    /// Targets are constants.
    pub fn backward(&self, batch: &TrainingBatch, form: LossForm) -> Result<(Gradients, f64)> {
        let inputs = batch.inputs.view();
        self.check_inputs(&inputs)?;
        let rows = inputs.dim().0;
        if batch.actions.len() != rows || batch.targets.len() != rows || batch.group == 0 || rows % batch.group != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows, {} actions, {} targets, groups of {}",
                batch.actions.len(),
                batch.targets.len(),
                batch.group
            )));
        }
        if let Some((row, &value)) = batch.targets.iter().enumerate().find(|(_, t)| !t.is_finite()) {
            return Err(Error::InvalidTarget { row, value });
        }
        if let Some(&a) = batch.actions.iter().find(|&&a| a >= self.arch.output) {
            return Err(Error::Shape(format!("action {a} outside {} outputs", self.arch.output)));
        }

        let cache = self.run(inputs);
        let out = cache.activations.last().expect("network has a head");
        let predictions: Vec<f64> = (0..rows).map(|r| out[[r, batch.actions[r]]]).collect();
        let (loss, dpred) = form.evaluate(&predictions, &batch.targets, batch.group);

        let mut grads = self.zero_gradients();
        let mut delta = Array2::zeros(out.raw_dim());
        for r in 0..rows {
            delta[[r, batch.actions[r]]] = dpred[r];
        }
        let last = self.layers() - 1;
        for l in (0..=last).rev() {
            if l < last {
                let post = &cache.activations[l + 1];
                delta.zip_mut_with(post, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let input = &cache.activations[l];
            let w = self.matrix(3 + 2 * l);
            let mut gw = Array2::zeros(w.raw_dim());
            general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
            grads.tensors[3 + 2 * l] = gw.iter().copied().collect();
            grads.tensors[4 + 2 * l] = delta.sum_axis(Axis(0)).to_vec();
            delta = delta.dot(&w.t());
        }

        let h = self.arch.lstm_hidden;
        let steps = inputs.dim().1;
        let (w_in, w_rec) = (self.matrix(0), self.matrix(1));
        let mut g_in = Array2::zeros(w_in.raw_dim());
        let mut g_rec = Array2::zeros(w_rec.raw_dim());
        let mut g_bias = Array1::zeros(4 * h);
        let mut dh = delta;
        let mut dc = Array2::<f64>::zeros((rows, h));
        let mut dz = Array2::zeros((rows, 4 * h));
        for t in (0..steps).rev() {
            let z = &cache.gates[t];
            let tc = &cache.tanh_cells[t];
            let prev = &cache.cells[t];
            for r in 0..rows {
                for k in 0..h {
                    let (i, f, o, g) = (z[[r, k]], z[[r, h + k]], z[[r, 2 * h + k]], z[[r, 3 * h + k]]);
                    let tv = tc[[r, k]];
                    let dhv = dh[[r, k]];
                    let dcv = dc[[r, k]] + dhv * o * (1.0 - tv * tv);
                    dz[[r, k]] = dcv * g * i * (1.0 - i);
                    dz[[r, h + k]] = dcv * prev[[r, k]] * f * (1.0 - f);
                    dz[[r, 2 * h + k]] = dhv * tv * o * (1.0 - o);
                    dz[[r, 3 * h + k]] = dcv * i * (1.0 - g * g);
                    dc[[r, k]] = dcv * f;
                }
            }
            general_mat_mul(1.0, &inputs.index_axis(Axis(1), t).t(), &dz, 1.0, &mut g_in);
            general_mat_mul(1.0, &cache.hiddens[t].t(), &dz, 1.0, &mut g_rec);
            g_bias += &dz.sum_axis(Axis(0));
            if t > 0 {
                dh = dz.dot(&w_rec.t());
            }
        }
        grads.tensors[0] = g_in.iter().copied().collect();
        grads.tensors[1] = g_rec.iter().copied().collect();
        grads.tensors[2] = g_bias.to_vec();
        Ok((grads, loss))
    }
}
