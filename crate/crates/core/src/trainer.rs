//! Hand-written backpropagation, Adam with decoupled weight decay, and the
//! mini-batch epoch loop.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, Mode, ModelConfig, ModelParams, ParamName, SampleEmbeddings};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// RNG stream used for parameter initialization; epochs use `1 + epoch`.
const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
    pub const DEFAULT_BATCH_SIZE: usize = 32;
    pub const DEFAULT_EPOCHS: usize = 50;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::config(format!(
                "weight_decay must be in [0, 1), got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("invalid Adam betas or epsilon"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            epochs: Self::DEFAULT_EPOCHS,
            weight_decay: Self::DEFAULT_WEIGHT_DECAY,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

/// Loss gradients, one matrix per parameter with the parameter's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Deref for Gradients {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.zeros_like())
    }

    fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for name in ParamName::ALL {
            self.get_mut(name).add_assign(other.get(name))?;
        }
        Ok(())
    }

    fn scale_in_place(&mut self, s: f64) {
        for name in ParamName::ALL {
            self.get_mut(name).data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Gradient of the per-sample cross-entropy with respect to every parameter,
/// given the trace of a forward pass on the same parameters.
pub fn backward(trace: &ForwardTrace, emb: &SampleEmbeddings, params: &ModelParams, label: usize) -> Result<Gradients> {
    let classes = trace.y_hat.cols();
    if label >= classes {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        });
    }
    let d = params.w_q.rows();
    let n_text = emb.text_rows();
    let n_image = emb.image.rows();
    if trace.q.rows() != n_text || trace.x.rows() != n_text + n_image + emb.geo.rows() || trace.x.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: trace.x.shape(),
            right: (n_text + n_image + emb.geo.rows(), d),
        });
    }

    // loss = -ln(y_hat[l] + floor); d loss / d logits = (y_hat - onehot) * y_hat[l] / (y_hat[l] + floor)
    let y_l = trace.y_hat.get(0, label);
    let kappa = y_l / (y_l + crate::model::LOG_FLOOR);
    let mut d_logits = trace.y_hat.scale(kappa);
    d_logits.data_mut()[label] -= kappa;

    let pooled = if n_text == 1 {
        trace.y_adapt.clone()
    } else {
        trace.y_adapt.mean_rows()
    };
    let d_w_c = pooled.transpose().matmul(&d_logits)?;
    let d_b_c = d_logits.clone();
    let d_pooled = d_logits.matmul(&params.w_c.transpose())?;
    // mean pooling spreads the gradient evenly over query rows
    let mut d_y = Matrix::zeros(n_text, d);
    for r in 0..n_text {
        for (o, &g) in d_y.row_mut(r).iter_mut().zip(d_pooled.data()) {
            *o = g / n_text as f64;
        }
    }

    // y = gate * h_in, gate = sigmoid(h_in W_a + b_a)
    let d_gate = d_y.hadamard(&trace.h_in)?;
    let mut d_h_in = d_y.hadamard(&trace.gate)?;
    let d_pre = d_gate.hadamard(&trace.gate.map(|g| g * (1.0 - g)))?;
    let d_w_a = trace.h_in.transpose().matmul(&d_pre)?;
    let d_b_a = d_pre.sum_rows();
    d_h_in.add_assign(&d_pre.matmul(&params.w_a.transpose())?)?;

    let d_h = match &trace.dropout_masks {
        Some(m) => d_h_in.hadamard(&m.attended)?,
        None => d_h_in,
    };

    // h = p v, p = softmax(s), s = q k^T / sqrt(d)
    let d_p = d_h.matmul(&trace.v.transpose())?;
    let d_v = trace.p.transpose().matmul(&d_h)?;
    let mut d_s = Matrix::zeros(trace.p.rows(), trace.p.cols());
    for r in 0..trace.p.rows() {
        let p = trace.p.row(r);
        let g = d_p.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pi, &gi)) in d_s.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - dot);
        }
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let d_q = d_s.matmul(&trace.k)?.scale(inv_sqrt_d);
    let d_k = d_s.transpose().matmul(&trace.q)?.scale(inv_sqrt_d);

    let x_text = trace.x_in.slice_rows(0, n_text);
    let d_w_q = x_text.transpose().matmul(&d_q)?;
    let x_in_t = trace.x_in.transpose();
    let d_w_k = x_in_t.matmul(&d_k)?;
    let d_w_v = x_in_t.matmul(&d_v)?;

    let mut d_x_in = d_k.matmul(&params.w_k.transpose())?;
    d_x_in.add_assign(&d_v.matmul(&params.w_v.transpose())?)?;
    let d_q_x = d_q.matmul(&params.w_q.transpose())?;
    for r in 0..n_text {
        for (o, &g) in d_x_in.row_mut(r).iter_mut().zip(d_q_x.row(r)) {
            *o += g;
        }
    }
    let d_x = match &trace.dropout_masks {
        Some(m) => d_x_in.hadamard(&m.tokens)?,
        None => d_x_in,
    };

    let d_text = d_x.slice_rows(0, n_text);
    let d_image = d_x.slice_rows(n_text, n_text + n_image);
    let d_geo = d_x.slice_rows(n_text + n_image, d_x.rows());

    let grads = ModelParams {
        proj_t: emb.text.transpose().matmul(&d_text)?,
        bias_t: d_text.sum_rows(),
        proj_i: emb.image.transpose().matmul(&d_image)?,
        bias_i: d_image.sum_rows(),
        proj_g: emb.geo.transpose().matmul(&d_geo)?,
        bias_g: d_geo.sum_rows(),
        w_q: d_w_q,
        w_k: d_w_k,
        w_v: d_w_v,
        w_a: d_w_a,
        b_a: d_b_a,
        w_c: d_w_c,
        b_c: d_b_c,
    };
    for name in ParamName::ALL {
        if !grads.get(name).is_finite() {
            return Err(Error::NonFinite("backward"));
        }
    }
    Ok(Gradients(grads))
}

/// Mean loss and mean gradient over a batch. Samples are processed in the
/// given order so the reduction is deterministic.
pub fn batch_gradient(
    batch: &[(&SampleEmbeddings, usize)],
    params: &ModelParams,
    cfg: &ModelConfig,
    mut rng: Option<&mut Rng>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for &(emb, label) in batch {
        let mode = match rng.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let trace = forward(emb, params, cfg, mode)?;
        loss += trace.loss(label)?;
        total.accumulate(&backward(&trace, emb, params, label)?)?;
    }
    let n = batch.len() as f64;
    total.scale_in_place(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay:
/// `theta <- theta - lr*wd*theta`, then the bias-corrected Adam delta.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for name in ParamName::ALL {
        let g = grads.get(name).data();
        let m = state.m.get_mut(name).data_mut();
        let v = state.v.get_mut(name).data_mut();
        let theta = params.get_mut(name).data_mut();
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Eval-mode accuracy of `params` on `data` (argmax, ties to lowest index).
pub fn accuracy(params: &ModelParams, data: &EmbeddedDataset, cfg: &ModelConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (emb, &label) in data.samples.iter().zip(&data.labels) {
        if forward(emb, params, cfg, Mode::Eval)?.predicted_class() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_dataset(data: &EmbeddedDataset, cfg: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (emb, &label) in data.samples.iter().zip(&data.labels) {
        if label >= cfg.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: cfg.num_classes,
            });
        }
        if emb.text.cols() != cfg.d_t || emb.image.cols() != cfg.d_i || emb.geo.cols() != cfg.d_g {
            return Err(Error::config("sample embedding dims disagree with model config"));
        }
    }
    Ok(())
}

/// Trains freshly initialized parameters. Initialization, shuffling and
/// dropout all derive from `train_cfg.seed`.
pub fn train(
    data: &EmbeddedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let params = initial_params(model_cfg, train_cfg)?;
    train_from(params, data, model_cfg, train_cfg, |_| {})
}

/// The parameters [`train`] starts from.
pub fn initial_params(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<ModelParams> {
    model_cfg.validate()?;
    ModelParams::init(model_cfg, &mut Rng::derived(train_cfg.seed, INIT_STREAM))
}

/// Epoch loop starting from `params`. `on_epoch` sees each record as it is
/// produced.
pub fn train_from(
    mut params: ModelParams,
    data: &EmbeddedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    params.validate(model_cfg)?;
    check_dataset(data, model_cfg)?;

    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let mut rng = Rng::derived(train_cfg.seed, 1 + epoch as u64);
        order.sort_unstable();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<(&SampleEmbeddings, usize)> =
                chunk.iter().map(|&i| (&data.samples[i], data.labels[i])).collect();
            let (loss, grads) = batch_gradient(&batch, &params, model_cfg, Some(&mut rng))?;
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut state, train_cfg);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: accuracy(&params, data, model_cfg)?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok((params, history))
}
