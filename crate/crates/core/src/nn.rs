//! Minimal differentiable model: an MLP feature extractor followed by a
//! linear classifier, with analytic gradients computed separately per loss
//! term and per parameter group.
//!
//! Flat parameter layout, used by [`GradientVector`] and the optimizer:
//! the extractor group is `[W_0, b_0, W_1, b_1, ...]` with every weight
//! matrix row-major `out x in`; the classifier group is `[W, b]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("matrix row", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Affine layer `y = x W^T + b` with `W` stored row-major `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(Error::shape(
                "linear weight",
                in_dim * out_dim,
                weight.len(),
            ));
        }
        if bias.len() != out_dim {
            return Err(Error::shape("linear bias", out_dim, bias.len()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialisation for weights and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, input: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(input.rows, self.out_dim);
        for (x, y) in input
            .iter_rows()
            .zip(out.data.chunks_exact_mut(self.out_dim))
        {
            for (o, (w, b)) in self
                .weight
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .enumerate()
            {
                y[o] = dot(w, x) + b;
            }
        }
        out
    }

    /// Accumulates `dW = dY^T X`, `db = sum(dY)` into `grad` (layout `[W, b]`)
    /// and returns `dX = dY W` when requested.
    fn backward(
        &self,
        input: &Matrix,
        d_out: &Matrix,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Matrix> {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for (x, dy) in input.iter_rows().zip(d_out.iter_rows()) {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (acc, &xi) in gw[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(x) {
                    *acc += g * xi;
                }
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut d_in = Matrix::zeros(input.rows, self.in_dim);
        for (dx, dy) in d_in
            .data
            .chunks_exact_mut(self.in_dim)
            .zip(d_out.iter_rows())
        {
            for (&g, w) in dy.iter().zip(self.weight.chunks_exact(self.in_dim)) {
                if g == 0.0 {
                    continue;
                }
                for (acc, &wi) in dx.iter_mut().zip(w) {
                    *acc += g * wi;
                }
            }
        }
        Some(d_in)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    FeatureExtractor,
    Classifier,
}

/// The parameter set: feature extractor layers (ReLU between them, none on
/// the embedding output) and the linear classifier over all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

impl ModelParams {
    pub fn from_layers(extractor: Vec<Linear>, classifier: Linear) -> Result<Self> {
        if extractor.is_empty() {
            return Err(Error::Config(
                "feature extractor needs at least one layer".into(),
            ));
        }
        for pair in extractor.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(
                    "extractor layer chain",
                    pair[0].out_dim,
                    pair[1].in_dim,
                ));
            }
        }
        let d = extractor[extractor.len() - 1].out_dim;
        if classifier.in_dim != d {
            return Err(Error::shape("classifier input", d, classifier.in_dim));
        }
        let params = Self {
            extractor,
            classifier,
        };
        params.check_finite("model parameters")?;
        Ok(params)
    }

    /// Randomly initialised model: `input_dim -> hidden[0] -> ... -> hidden[last] = d`,
    /// followed by a `d -> classes` classifier.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid architecture: input {input_dim}, hidden {hidden:?}, classes {classes}"
            )));
        }
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &width in hidden {
            extractor.push(Linear::init(prev, width, rng));
            prev = width;
        }
        let classifier = Linear::init(prev, classes, rng);
        Self::from_layers(extractor, classifier)
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].in_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn num_params(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::FeatureExtractor => self.extractor.iter().map(Linear::num_params).sum(),
            ParamGroup::Classifier => self.classifier.num_params(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.num_params(ParamGroup::FeatureExtractor) + self.num_params(ParamGroup::Classifier)
    }

    fn group_slices(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::FeatureExtractor => self
                .extractor
                .iter()
                .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
                .collect(),
            ParamGroup::Classifier => vec![&self.classifier.weight, &self.classifier.bias],
        }
    }

    fn group_slices_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::FeatureExtractor => self
                .extractor
                .iter_mut()
                .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
                .collect(),
            ParamGroup::Classifier => vec![&mut self.classifier.weight, &mut self.classifier.bias],
        }
    }

    pub fn flatten(&self, group: ParamGroup) -> Vec<f64> {
        self.group_slices(group).concat()
    }

    pub fn set_flat(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        let expected = self.num_params(group);
        if values.len() != expected {
            return Err(Error::shape("flat parameter group", expected, values.len()));
        }
        let mut offset = 0;
        for slice in self.group_slices_mut(group) {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    /// Adds `g` to the group's parameters in flat order.
    pub fn add_gradient(&mut self, g: &GradientVector) -> Result<()> {
        self.check_congruent(g)?;
        let mut offset = 0;
        for slice in self.group_slices_mut(g.group) {
            for (p, v) in slice.iter_mut().zip(&g.values[offset..]) {
                *p += v;
            }
            offset += slice.len();
        }
        Ok(())
    }

    fn check_congruent(&self, g: &GradientVector) -> Result<()> {
        let expected = self.num_params(g.group);
        if g.values.len() != expected {
            return Err(Error::shape("gradient length", expected, g.values.len()));
        }
        Ok(())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for group in [ParamGroup::FeatureExtractor, ParamGroup::Classifier] {
            if self
                .group_slices(group)
                .iter()
                .any(|s| s.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite(format!("{context} ({group:?})")));
            }
        }
        Ok(())
    }

    /// Stable hex digest of every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for group in [ParamGroup::FeatureExtractor, ParamGroup::Classifier] {
            for slice in self.group_slices(group) {
                for v in slice {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `z = h(x)` for each row of `inputs`.
    pub fn forward_features(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.trace_features(inputs)?.embeddings().clone())
    }

    /// `logits = z W^T + b`, the classifier applied directly to embeddings.
    pub fn forward_classifier(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols != self.embedding_dim() {
            return Err(Error::shape(
                "embedding width",
                self.embedding_dim(),
                embeddings.cols,
            ));
        }
        if embeddings.rows == 0 {
            return Err(Error::Config("empty embedding batch".into()));
        }
        Ok(self.classifier.forward(embeddings))
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let z = self.forward_features(inputs)?;
        self.forward_classifier(&z)
    }

    pub(crate) fn trace_features(&self, inputs: &Matrix) -> Result<FeatureTrace> {
        if inputs.cols != self.input_dim() {
            return Err(Error::shape("input width", self.input_dim(), inputs.cols));
        }
        if inputs.rows == 0 {
            return Err(Error::Config("empty input batch".into()));
        }
        let last = self.extractor.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.extractor.len());
        let mut pre_activations = Vec::with_capacity(self.extractor.len());
        let mut current = inputs.clone();
        for (k, layer) in self.extractor.iter().enumerate() {
            let pre = layer.forward(&current);
            let next = if k < last {
                let mut act = pre.clone();
                act.data.iter_mut().for_each(|v| *v = v.max(0.0));
                act
            } else {
                pre.clone()
            };
            layer_inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(pre);
        }
        Ok(FeatureTrace {
            layer_inputs,
            pre_activations,
        })
    }

    /// Returns the classifier gradient (flat `[W, b]`) and `dL/dz`.
    pub(crate) fn backward_classifier(
        &self,
        embeddings: &Matrix,
        d_logits: &Matrix,
        want_embedding_grad: bool,
    ) -> (Vec<f64>, Option<Matrix>) {
        let mut grad = vec![0.0; self.classifier.num_params()];
        let dz = self
            .classifier
            .backward(embeddings, d_logits, &mut grad, want_embedding_grad);
        (grad, dz)
    }

    pub(crate) fn backward_extractor(
        &self,
        trace: &FeatureTrace,
        d_embeddings: &Matrix,
    ) -> Vec<f64> {
        let sizes: Vec<usize> = self.extractor.iter().map(Linear::num_params).collect();
        let mut grad = vec![0.0; sizes.iter().sum()];
        let mut offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        offsets.push(grad.len());

        let mut d_pre = d_embeddings.clone();
        for k in (0..self.extractor.len()).rev() {
            let layer = &self.extractor[k];
            let slot = &mut grad[offsets[k]..offsets[k + 1]];
            let d_in = layer.backward(&trace.layer_inputs[k], &d_pre, slot, k > 0);
            if let Some(mut d_act) = d_in {
                for (g, &pre) in d_act
                    .data
                    .iter_mut()
                    .zip(&trace.pre_activations[k - 1].data)
                {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                d_pre = d_act;
            }
        }
        grad
    }
}

/// Cached activations of one extractor forward pass.
#[derive(Debug, Clone)]
pub(crate) struct FeatureTrace {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl FeatureTrace {
    pub(crate) fn embeddings(&self) -> &Matrix {
        &self.pre_activations[self.pre_activations.len() - 1]
    }
}

/// Flat gradient for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub group: ParamGroup,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(group: ParamGroup, len: usize) -> Self {
        Self {
            group,
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_pair(&self, other: &Self) -> Result<()> {
        if self.group != other.group {
            return Err(Error::Config(format!(
                "gradient groups differ: {:?} vs {:?}",
                self.group, other.group
            )));
        }
        if self.values.len() != other.values.len() {
            return Err(Error::shape(
                "gradient pair",
                self.values.len(),
                other.values.len(),
            ));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_pair(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm_squared(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= factor);
        self
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &Self) -> Result<()> {
        self.check_pair(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn check_logits_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows != labels.len() {
        return Err(Error::shape(
            "labels per logit row",
            logits.rows,
            labels.len(),
        ));
    }
    if logits.rows == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= logits.cols {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: logits.cols,
            });
        }
    }
    Ok(())
}

/// Loss value plus its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub(crate) struct LossWithGrad {
    pub loss: f64,
    pub d_logits: Matrix,
}

/// `-(1/B) sum_j w_{y_j} log softmax(logits_j)[y_j]` with its logit gradient.
pub(crate) fn weighted_cross_entropy_grad(
    logits: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<LossWithGrad> {
    check_logits_labels(logits, labels)?;
    if class_weights.len() != logits.cols {
        return Err(Error::shape(
            "class weights",
            logits.cols,
            class_weights.len(),
        ));
    }
    let batch = logits.rows as f64;
    let mut d_logits = Matrix::zeros(logits.rows, logits.cols);
    let mut log_probs = vec![0.0; logits.cols];
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        log_softmax_row(logits.row(j), &mut log_probs);
        let w = class_weights[y];
        loss -= w * log_probs[y];
        let scale = w / batch;
        for (d, lp) in d_logits.row_mut(j).iter_mut().zip(&log_probs) {
            *d = scale * lp.exp();
        }
        d_logits.row_mut(j)[y] -= scale;
    }
    Ok(LossWithGrad {
        loss: loss / batch,
        d_logits,
    })
}

pub fn weighted_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(logits, labels, class_weights)?.loss)
}

/// `tau^2 * mean_j KL(softmax(t_j/tau) || softmax(s_j/tau))`; the teacher is
/// a constant, so only the student receives a gradient.
pub(crate) fn kd_loss_grad(
    student: &Matrix,
    teacher: &Matrix,
    temperature: f64,
) -> Result<LossWithGrad> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if student.rows != teacher.rows {
        return Err(Error::shape(
            "teacher logit rows",
            student.rows,
            teacher.rows,
        ));
    }
    if student.cols != teacher.cols {
        return Err(Error::shape(
            "teacher logit cols",
            student.cols,
            teacher.cols,
        ));
    }
    if student.rows == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let batch = student.rows as f64;
    let classes = student.cols;
    let mut d_logits = Matrix::zeros(student.rows, classes);
    let mut scaled = vec![0.0; classes];
    let mut log_q_student = vec![0.0; classes];
    let mut log_q_teacher = vec![0.0; classes];
    let mut kl_sum = 0.0;
    for j in 0..student.rows {
        for (s, v) in scaled.iter_mut().zip(student.row(j)) {
            *s = v / temperature;
        }
        log_softmax_row(&scaled, &mut log_q_student);
        for (s, v) in scaled.iter_mut().zip(teacher.row(j)) {
            *s = v / temperature;
        }
        log_softmax_row(&scaled, &mut log_q_teacher);
        let d = d_logits.row_mut(j);
        for c in 0..classes {
            let qt = log_q_teacher[c].exp();
            if qt > 0.0 {
                kl_sum += qt * (log_q_teacher[c] - log_q_student[c]);
            }
            // d/ds [tau^2 KL] = tau * (q_student - q_teacher), then / B
            d[c] = temperature * (log_q_student[c].exp() - qt) / batch;
        }
    }
    Ok(LossWithGrad {
        loss: temperature * temperature * kl_sum / batch,
        d_logits,
    })
}

pub fn kd_loss(student_logits: &Matrix, teacher_logits: &Matrix, temperature: f64) -> Result<f64> {
    Ok(kd_loss_grad(student_logits, teacher_logits, temperature)?.loss)
}

/// Selects exactly one loss term together with its inputs.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    /// Class-weighted cross-entropy on raw inputs through the full model.
    Classification {
        inputs: &'a Matrix,
        labels: &'a [usize],
        class_weights: &'a [f64],
    },
    /// Distillation against constant teacher logits.
    Distillation {
        inputs: &'a Matrix,
        teacher_logits: &'a Matrix,
        temperature: f64,
    },
    /// Unweighted cross-entropy of the classifier on stored embeddings.
    Replay {
        embeddings: &'a Matrix,
        labels: &'a [usize],
    },
}

/// Value of a single loss term.
pub fn loss(params: &ModelParams, spec: LossSpec<'_>) -> Result<f64> {
    match spec {
        LossSpec::Classification {
            inputs,
            labels,
            class_weights,
        } => weighted_cross_entropy(&params.forward(inputs)?, labels, class_weights),
        LossSpec::Distillation {
            inputs,
            teacher_logits,
            temperature,
        } => kd_loss(&params.forward(inputs)?, teacher_logits, temperature),
        LossSpec::Replay { embeddings, labels } => {
            let ones = vec![1.0; params.num_classes()];
            weighted_cross_entropy(&params.forward_classifier(embeddings)?, labels, &ones)
        }
    }
}

/// Exact gradient of one loss term with respect to one parameter group.
///
/// The replay loss acts on stored embeddings at the classifier input, so its
/// feature-extractor gradient is identically zero.
pub fn grad(params: &ModelParams, spec: LossSpec<'_>, group: ParamGroup) -> Result<GradientVector> {
    let (trace, d_logits) = match spec {
        LossSpec::Classification {
            inputs,
            labels,
            class_weights,
        } => {
            let trace = params.trace_features(inputs)?;
            let logits = params.forward_classifier(trace.embeddings())?;
            let lg = weighted_cross_entropy_grad(&logits, labels, class_weights)?;
            (Some(trace), lg.d_logits)
        }
        LossSpec::Distillation {
            inputs,
            teacher_logits,
            temperature,
        } => {
            let trace = params.trace_features(inputs)?;
            let logits = params.forward_classifier(trace.embeddings())?;
            let lg = kd_loss_grad(&logits, teacher_logits, temperature)?;
            (Some(trace), lg.d_logits)
        }
        LossSpec::Replay { embeddings, labels } => {
            let logits = params.forward_classifier(embeddings)?;
            let ones = vec![1.0; params.num_classes()];
            let lg = weighted_cross_entropy_grad(&logits, labels, &ones)?;
            if group == ParamGroup::FeatureExtractor {
                return Ok(GradientVector::zeros(group, params.num_params(group)));
            }
            let (gc, _) = params.backward_classifier(embeddings, &lg.d_logits, false);
            return Ok(GradientVector { group, values: gc });
        }
    };
    let trace = trace.expect("trace present for input-driven losses");
    let values = match group {
        ParamGroup::Classifier => {
            params
                .backward_classifier(trace.embeddings(), &d_logits, false)
                .0
        }
        ParamGroup::FeatureExtractor => {
            let (_, dz) = params.backward_classifier(trace.embeddings(), &d_logits, true);
            params.backward_extractor(&trace, &dz.expect("embedding gradient requested"))
        }
    };
    Ok(GradientVector { group, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Adam,
    /// Moments disabled: `theta <- theta - lr * g`.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub rule: UpdateRule,
    step: u64,
    extractor: Moments,
    classifier: Moments,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig, rule: UpdateRule) -> Self {
        let moments = |n| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        };
        Self {
            config,
            rule,
            step: 0,
            extractor: moments(params.num_params(ParamGroup::FeatureExtractor)),
            classifier: moments(params.num_params(ParamGroup::Classifier)),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Applies one optimizer step to both parameter groups from the supplied
/// combined gradients.
pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grad_f: &GradientVector,
    grad_c: &GradientVector,
) -> Result<()> {
    if grad_f.group != ParamGroup::FeatureExtractor || grad_c.group != ParamGroup::Classifier {
        return Err(Error::Config(
            "optimizer_step expects (extractor, classifier) gradients".into(),
        ));
    }
    params.check_congruent(grad_f)?;
    params.check_congruent(grad_c)?;
    for g in [grad_f, grad_c] {
        if let Some(pos) = g.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{:?} gradient at flat index {pos} (value {})",
                g.group, g.values[pos]
            )));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let rule = state.rule;
    for (g, moments) in [
        (grad_f, &mut state.extractor),
        (grad_c, &mut state.classifier),
    ] {
        let mut offset = 0;
        for slice in params.group_slices_mut(g.group) {
            for (k, p) in slice.iter_mut().enumerate() {
                let i = offset + k;
                let gi = g.values[i];
                match rule {
                    UpdateRule::Sgd => *p -= cfg.learning_rate * gi,
                    UpdateRule::Adam => {
                        let m = &mut moments.first[i];
                        let v = &mut moments.second[i];
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
            offset += slice.len();
        }
    }
    params.check_finite("parameters after optimizer step")
}
