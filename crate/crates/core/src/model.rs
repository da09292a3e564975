//! Forward pass of the multimodal classifier.
//!
//! Per sample the pipeline is:
//!
//! ```text
//! X      = [e_t P_t + b_t ; e_i P_i + b_i ; e_g P_g + b_g]      (tokens x d)
//! Q      = X_text W_q,  K = X W_k,  V = X W_v
//! P      = softmax(Q K^T / sqrt(d)),  H = P V
//! gate   = sigmoid(H W_a + b_a),      Y = gate * H               (elementwise)
//! y_hat  = softmax(mean_rows(Y) W_c + b_c)
//! loss   = -ln(y_hat[label] + 1e-12)
//! ```
//!
//! Inverted dropout is applied to `X` and to `H` in training mode. Every
//! intermediate is kept in a [`ForwardTrace`] so the trainer can run exact
//! backpropagation without recomputation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sigmoid_elem, softmax_rows, xavier_init, Matrix};

/// Floor added inside the log of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Unified token dimension.
    pub d: usize,
    pub d_t: usize,
    pub d_i: usize,
    pub d_g: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_t: 32,
            d_i: 32,
            d_g: 16,
            num_classes: 3,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_t == 0 || self.d_i == 0 || self.d_g == 0 {
            return Err(Error::config("model dimensions must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Identifies one learned tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamName {
    ProjT,
    BiasT,
    ProjI,
    BiasI,
    ProjG,
    BiasG,
    WQ,
    WK,
    WV,
    WA,
    BA,
    WC,
    BC,
}

impl ParamName {
    pub const ALL: [ParamName; 13] = [
        ParamName::ProjT,
        ParamName::BiasT,
        ParamName::ProjI,
        ParamName::BiasI,
        ParamName::ProjG,
        ParamName::BiasG,
        ParamName::WQ,
        ParamName::WK,
        ParamName::WV,
        ParamName::WA,
        ParamName::BA,
        ParamName::WC,
        ParamName::BC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::ProjT => "proj_t",
            ParamName::BiasT => "bias_t",
            ParamName::ProjI => "proj_i",
            ParamName::BiasI => "bias_i",
            ParamName::ProjG => "proj_g",
            ParamName::BiasG => "bias_g",
            ParamName::WQ => "w_q",
            ParamName::WK => "w_k",
            ParamName::WV => "w_v",
            ParamName::WA => "w_a",
            ParamName::BA => "b_a",
            ParamName::WC => "w_c",
            ParamName::BC => "b_c",
        }
    }

    fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d;
        match self {
            ParamName::ProjT => (cfg.d_t, d),
            ParamName::ProjI => (cfg.d_i, d),
            ParamName::ProjG => (cfg.d_g, d),
            ParamName::BiasT | ParamName::BiasI | ParamName::BiasG | ParamName::BA => (1, d),
            ParamName::WQ | ParamName::WK | ParamName::WV | ParamName::WA => (d, d),
            ParamName::WC => (d, cfg.num_classes),
            ParamName::BC => (1, cfg.num_classes),
        }
    }
}

impl std::fmt::Display for ParamName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every learned tensor of the model. `w_c` is stored `d x C` so activations
/// stay row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub proj_t: Matrix,
    pub bias_t: Matrix,
    pub proj_i: Matrix,
    pub bias_i: Matrix,
    pub proj_g: Matrix,
    pub bias_g: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_a: Matrix,
    pub b_a: Matrix,
    pub w_c: Matrix,
    pub b_c: Matrix,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut weight = |name: ParamName| {
            let (r, c) = name.shape(cfg);
            xavier_init(r, c, rng)
        };
        let proj_t = weight(ParamName::ProjT);
        let proj_i = weight(ParamName::ProjI);
        let proj_g = weight(ParamName::ProjG);
        let w_q = weight(ParamName::WQ);
        let w_k = weight(ParamName::WK);
        let w_v = weight(ParamName::WV);
        let w_a = weight(ParamName::WA);
        let w_c = weight(ParamName::WC);
        Ok(Self {
            proj_t,
            bias_t: Matrix::zeros(1, cfg.d),
            proj_i,
            bias_i: Matrix::zeros(1, cfg.d),
            proj_g,
            bias_g: Matrix::zeros(1, cfg.d),
            w_q,
            w_k,
            w_v,
            w_a,
            b_a: Matrix::zeros(1, cfg.d),
            w_c,
            b_c: Matrix::zeros(1, cfg.num_classes),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let z = |name: ParamName| {
            let (r, c) = name.shape(cfg);
            Matrix::zeros(r, c)
        };
        Self {
            proj_t: z(ParamName::ProjT),
            bias_t: z(ParamName::BiasT),
            proj_i: z(ParamName::ProjI),
            bias_i: z(ParamName::BiasI),
            proj_g: z(ParamName::ProjG),
            bias_g: z(ParamName::BiasG),
            w_q: z(ParamName::WQ),
            w_k: z(ParamName::WK),
            w_v: z(ParamName::WV),
            w_a: z(ParamName::WA),
            b_a: z(ParamName::BA),
            w_c: z(ParamName::WC),
            b_c: z(ParamName::BC),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for name in ParamName::ALL {
            out.get_mut(name).data_mut().fill(0.0);
        }
        out
    }

    pub fn get(&self, name: ParamName) -> &Matrix {
        match name {
            ParamName::ProjT => &self.proj_t,
            ParamName::BiasT => &self.bias_t,
            ParamName::ProjI => &self.proj_i,
            ParamName::BiasI => &self.bias_i,
            ParamName::ProjG => &self.proj_g,
            ParamName::BiasG => &self.bias_g,
            ParamName::WQ => &self.w_q,
            ParamName::WK => &self.w_k,
            ParamName::WV => &self.w_v,
            ParamName::WA => &self.w_a,
            ParamName::BA => &self.b_a,
            ParamName::WC => &self.w_c,
            ParamName::BC => &self.b_c,
        }
    }

    pub fn get_mut(&mut self, name: ParamName) -> &mut Matrix {
        match name {
            ParamName::ProjT => &mut self.proj_t,
            ParamName::BiasT => &mut self.bias_t,
            ParamName::ProjI => &mut self.proj_i,
            ParamName::BiasI => &mut self.bias_i,
            ParamName::ProjG => &mut self.proj_g,
            ParamName::BiasG => &mut self.bias_g,
            ParamName::WQ => &mut self.w_q,
            ParamName::WK => &mut self.w_k,
            ParamName::WV => &mut self.w_v,
            ParamName::WA => &mut self.w_a,
            ParamName::BA => &mut self.b_a,
            ParamName::WC => &mut self.w_c,
            ParamName::BC => &mut self.b_c,
        }
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for name in ParamName::ALL {
            let expected = name.shape(cfg);
            let actual = self.get(name).shape();
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op: name.as_str(),
                    left: expected,
                    right: actual,
                });
            }
            if !self.get(name).is_finite() {
                return Err(Error::NonFinite(name.as_str()));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        ParamName::ALL.iter().map(|&n| self.get(n).len()).sum()
    }
}

/// Per-modality embeddings of one sample. Text may span several rows
/// (tokens); image and geo are usually one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEmbeddings {
    pub text: Matrix,
    pub image: Matrix,
    pub geo: Matrix,
}

/// Which modalities to blank out before the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub text: bool,
    pub image: bool,
    pub geo: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        text: false,
        image: false,
        geo: false,
    };
    pub const ALL: Ablation = Ablation {
        text: true,
        image: true,
        geo: true,
    };
}

impl SampleEmbeddings {
    pub fn from_vectors(text: &[f64], image: &[f64], geo: &[f64]) -> Self {
        Self {
            text: Matrix::row_vector(text),
            image: Matrix::row_vector(image),
            geo: Matrix::row_vector(geo),
        }
    }

    pub fn ablate(&self, ablation: Ablation) -> Self {
        let mut out = self.clone();
        if ablation.text {
            out.text.data_mut().fill(0.0);
        }
        if ablation.image {
            out.image.data_mut().fill(0.0);
        }
        if ablation.geo {
            out.geo.data_mut().fill(0.0);
        }
        out
    }

    pub fn text_rows(&self) -> usize {
        self.text.rows()
    }
}

fn project(input: &Matrix, proj: &Matrix, bias: &Matrix, what: &'static str) -> Result<Matrix> {
    if input.cols() != proj.rows() {
        return Err(Error::LengthMismatch {
            what,
            expected: proj.rows(),
            actual: input.cols(),
        });
    }
    input.matmul(proj)?.add_row(bias)
}

/// Projects each modality to `d` and stacks the tokens text, image, geo.
pub fn fuse(emb: &SampleEmbeddings, params: &ModelParams) -> Result<Matrix> {
    let t = project(&emb.text, &params.proj_t, &params.bias_t, "text embedding")?;
    let i = project(&emb.image, &params.proj_i, &params.bias_i, "image embedding")?;
    let g = project(&emb.geo, &params.proj_g, &params.bias_g, "geo embedding")?;
    Matrix::vstack(&[&t, &i, &g])
}

/// Pre-softmax attention logits `q k^T / sqrt(d)`.
pub fn attention_scores(q: &Matrix, k: &Matrix, d: usize) -> Result<Matrix> {
    if q.cols() != d || k.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt()))
}

/// Returns the attention weights `p = softmax(q k^T / sqrt(d))` and the
/// attended values `h = p v`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, d: usize) -> Result<(Matrix, Matrix)> {
    if v.cols() != d || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let p = softmax_rows(&attention_scores(q, k, d)?);
    let h = p.matmul(v)?;
    Ok((p, h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub scores: Matrix,
    pub p: Matrix,
    pub h: Matrix,
}

/// Text rows of `x` query keys and values built from every token.
pub fn cross_modal_attention(x: &Matrix, params: &ModelParams, text_rows: usize) -> Result<CrossAttention> {
    let d = params.w_q.rows();
    if x.cols() != d || text_rows == 0 || text_rows > x.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_modal_attention",
            left: x.shape(),
            right: params.w_q.shape(),
        });
    }
    let q = x.slice_rows(0, text_rows).matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let v = x.matmul(&params.w_v)?;
    let scores = attention_scores(&q, &k, d)?;
    let p = softmax_rows(&scores);
    let h = p.matmul(&v)?;
    Ok(CrossAttention { q, k, v, scores, p, h })
}

/// `gate = sigmoid(h W_a + b_a)`, `y = gate * h` elementwise.
pub fn adaptive_gate(h: &Matrix, params: &ModelParams) -> Result<(Matrix, Matrix)> {
    let gate = sigmoid_elem(&h.matmul(&params.w_a)?.add_row(&params.b_a)?);
    let y = gate.hadamard(h)?;
    Ok((gate, y))
}

/// Mean-pools query rows, then applies the classifier head and softmax.
pub fn classify(y_adapt: &Matrix, params: &ModelParams) -> Result<(Matrix, Matrix)> {
    let pooled = if y_adapt.rows() == 1 {
        y_adapt.clone()
    } else {
        y_adapt.mean_rows()
    };
    let logits = pooled.matmul(&params.w_c)?.add_row(&params.b_c)?;
    let y_hat = softmax_rows(&logits);
    Ok((logits, y_hat))
}

/// `-ln(y_hat[label] + 1e-12)`.
pub fn cross_entropy(y_hat: &Matrix, label: usize) -> Result<f64> {
    if label >= y_hat.cols() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: y_hat.cols(),
        });
    }
    Ok(-(y_hat.get(0, label) + LOG_FLOOR).ln())
}

/// Inverted-dropout masks: entries are 0 or `1/(1-rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub tokens: Matrix,
    pub attended: Matrix,
}

impl DropoutMasks {
    pub fn sample(rate: f64, token_shape: (usize, usize), attended_shape: (usize, usize), rng: &mut Rng) -> Self {
        let keep = 1.0 - rate;
        let mut draw = |(r, c): (usize, usize)| {
            let mut m = Matrix::zeros(r, c);
            for v in m.data_mut() {
                *v = if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
            }
            m
        };
        let tokens = draw(token_shape);
        let attended = draw(attended_shape);
        Self { tokens, attended }
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Fused tokens before dropout.
    pub x: Matrix,
    /// Tokens fed to attention (equal to `x` without dropout).
    pub x_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub scores: Matrix,
    pub p: Matrix,
    pub h: Matrix,
    /// Attention output fed to the gate.
    pub h_in: Matrix,
    pub gate: Matrix,
    pub y_adapt: Matrix,
    pub logits: Matrix,
    pub y_hat: Matrix,
    pub dropout_masks: Option<DropoutMasks>,
}

impl ForwardTrace {
    pub fn predicted_class(&self) -> usize {
        self.y_hat.argmax_row(0)
    }

    pub fn loss(&self, label: usize) -> Result<f64> {
        cross_entropy(&self.y_hat, label)
    }
}

/// Full forward pass. Dropout masks are drawn only in training mode with a
/// nonzero rate.
pub fn forward(
    emb: &SampleEmbeddings,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    let masks = match mode {
        Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
            let tokens = emb.text_rows() + emb.image.rows() + emb.geo.rows();
            Some(DropoutMasks::sample(
                cfg.dropout_rate,
                (tokens, cfg.d),
                (emb.text_rows(), cfg.d),
                rng,
            ))
        }
        _ => None,
    };
    forward_with_masks(emb, params, masks)
}

/// Forward pass with caller-supplied dropout masks, used to replay a
/// training step exactly.
pub fn forward_with_masks(
    emb: &SampleEmbeddings,
    params: &ModelParams,
    masks: Option<DropoutMasks>,
) -> Result<ForwardTrace> {
    let x = fuse(emb, params)?;
    let x_in = match &masks {
        Some(m) => x.hadamard(&m.tokens)?,
        None => x.clone(),
    };
    let att = cross_modal_attention(&x_in, params, emb.text_rows())?;
    let h_in = match &masks {
        Some(m) => att.h.hadamard(&m.attended)?,
        None => att.h.clone(),
    };
    let (gate, y_adapt) = adaptive_gate(&h_in, params)?;
    let (logits, y_hat) = classify(&y_adapt, params)?;
    if !y_hat.is_finite() {
        return Err(Error::NonFinite("forward"));
    }
    Ok(ForwardTrace {
        x,
        x_in,
        q: att.q,
        k: att.k,
        v: att.v,
        scores: att.scores,
        p: att.p,
        h: att.h,
        h_in,
        gate,
        y_adapt,
        logits,
        y_hat,
        dropout_masks: masks,
    })
}
