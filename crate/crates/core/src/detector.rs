//! Two-layer perceptron set-prediction detector with hand-written gradients
//! and an AdamW optimizer.
//!
//! The image is average-pooled over a `cells x cells` grid, mapped to
//! `[-1, 1]`, passed through one tanh hidden layer and a linear head that
//! emits, per query, `C + 1` class logits and 4 box logits. Box logits go
//! through a sigmoid to center form `(cx, cy, w, h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Image, CHANNELS};
use crate::metrics::{hungarian_match, Detection, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    pub height: usize,
    pub cells: usize,
    pub hidden: usize,
    pub queries: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.cells * self.cells * CHANNELS
    }

    /// Outputs per query: class logits incl. no-object, then 4 box logits.
    pub fn query_dim(&self) -> usize {
        self.classes + 1 + 4
    }

    pub fn output_dim(&self) -> usize {
        self.queries * self.query_dim()
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input_dim() + self.hidden + self.output_dim() * self.hidden + self.output_dim()
    }

    pub fn no_object(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("detector.image", "image sides must be positive"));
        }
        if self.cells == 0 || self.cells > self.width.min(self.height) {
            return Err(Error::config("detector.cells", "pool grid must fit inside the image"));
        }
        if self.hidden == 0 || self.queries == 0 || self.classes == 0 {
            return Err(Error::config("detector", "hidden, queries and classes must be positive"));
        }
        Ok(())
    }

    // offsets of the four blocks in the flat vector
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * self.input_dim()
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.output_dim() * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub arch: Architecture,
    pub reg_weight: f64,
    pub noobj_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            arch: Architecture { width: 32, height: 32, cells: 8, hidden: 128, queries: 8, classes: 2 },
            reg_weight: 5.0,
            noobj_weight: 0.1,
        }
    }
}

/// Flat parameters: `W1 (hidden x input)`, `b1`, `W2 (output x hidden)`,
/// `b2`, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams { values: vec![0.0; arch.param_count()], arch }
    }

    /// Uniform fan-in scaled weights; box biases start at random centers
    /// with quarter-frame extents.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = ModelParams::zeros(arch);
        let a1 = (3.0 / arch.input_dim() as f64).sqrt();
        for v in &mut p.values[arch.w1()..arch.b1()] {
            *v = rng.gen_range(-a1..a1);
        }
        let a2 = 0.5 * (3.0 / arch.hidden as f64).sqrt();
        for v in &mut p.values[arch.w2()..arch.b2()] {
            *v = rng.gen_range(-a2..a2);
        }
        let b2 = arch.b2();
        let qd = arch.query_dim();
        for q in 0..arch.queries {
            let base = b2 + q * qd + arch.classes + 1;
            p.values[base] = logit(rng.gen_range(0.2..0.8));
            p.values[base + 1] = logit(rng.gen_range(0.2..0.8));
            p.values[base + 2] = logit(0.25);
            p.values[base + 3] = logit(0.25);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.values.len() != self.arch.param_count() {
            return Err(Error::ShapeMismatch { expected: self.arch.param_count(), got: self.values.len() });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("params", "non-finite parameter"));
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a over the bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Text checkpoint: a header line with the architecture, then one value
    /// per line in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = format!(
            "semisup-params 1 width={} height={} cells={} hidden={} queries={} classes={} count={}\n",
            a.width,
            a.height,
            a.cells,
            a.hidden,
            a.queries,
            a.classes,
            self.values.len()
        );
        for v in &self.values {
            s.push_str(&format!("{v:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, reason: "empty checkpoint".into() })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("semisup-params") || fields.next() != Some("1") {
            return Err(Error::Parse { line: 1, reason: "not a version 1 checkpoint".into() });
        }
        let mut get = |key: &str| -> Result<usize> {
            let f = fields.next().ok_or(Error::Parse { line: 1, reason: format!("missing {key}") })?;
            f.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|r| r.parse().ok())
                .ok_or(Error::Parse { line: 1, reason: format!("bad field {f:?}, expected {key}=N") })
        };
        let arch = Architecture {
            width: get("width")?,
            height: get("height")?,
            cells: get("cells")?,
            hidden: get("hidden")?,
            queries: get("queries")?,
            classes: get("classes")?,
        };
        let count = get("count")?;
        let values = lines
            .enumerate()
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 2, reason: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count || count != arch.param_count() {
            return Err(Error::ShapeMismatch { expected: arch.param_count(), got: values.len() });
        }
        Ok(ModelParams { arch, values })
    }
}

/// One query's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax over `C + 1` classes, last entry is no-object.
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Center form `(cx, cy, w, h)`, each in `(0, 1)`.
    pub center: [f64; 4],
}

impl Prediction {
    /// Unclipped corner form of the predicted box.
    pub fn corners(&self) -> [f64; 4] {
        let [cx, cy, w, h] = self.center;
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }

    pub fn bbox(&self) -> BBox {
        let [cx, cy, w, h] = self.center;
        BBox::from_center(cx, cy, w, h)
    }

    /// Best foreground class and its probability.
    pub fn best_foreground(&self) -> (usize, f64) {
        let fg = &self.probs[..self.probs.len() - 1];
        let mut best = 0;
        for (c, &p) in fg.iter().enumerate() {
            if p > fg[best] {
                best = c;
            }
        }
        (best, fg[best])
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
    pub outputs: Vec<f64>,
}

pub fn features(arch: &Architecture, image: &Image) -> Result<Vec<f64>> {
    if image.width != arch.width || image.height != arch.height {
        return Err(Error::ShapeMismatch { expected: arch.width * arch.height, got: image.width * image.height });
    }
    let mut f = image.pooled(arch.cells);
    for v in &mut f {
        *v = 2.0 * *v - 1.0;
    }
    Ok(f)
}

/// Forward pass from a precomputed feature vector.
pub fn forward_features(params: &ModelParams, features: Vec<f64>) -> Result<(Vec<Prediction>, ForwardCache)> {
    let a = params.arch;
    if params.values.len() != a.param_count() {
        return Err(Error::ShapeMismatch { expected: a.param_count(), got: params.values.len() });
    }
    if features.len() != a.input_dim() {
        return Err(Error::ShapeMismatch { expected: a.input_dim(), got: features.len() });
    }
    let p = &params.values;
    let ni = a.input_dim();
    let mut hidden = vec![0.0; a.hidden];
    for (j, h) in hidden.iter_mut().enumerate() {
        let row = &p[a.w1() + j * ni..a.w1() + (j + 1) * ni];
        let z: f64 = row.iter().zip(&features).map(|(w, x)| w * x).sum::<f64>() + p[a.b1() + j];
        *h = z.tanh();
    }
    let nh = a.hidden;
    let mut outputs = vec![0.0; a.output_dim()];
    for (k, o) in outputs.iter_mut().enumerate() {
        let row = &p[a.w2() + k * nh..a.w2() + (k + 1) * nh];
        *o = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + p[a.b2() + k];
    }
    let preds = decode(&a, &outputs);
    Ok((preds, ForwardCache { features, hidden, outputs }))
}

pub fn forward_cached(params: &ModelParams, image: &Image) -> Result<(Vec<Prediction>, ForwardCache)> {
    forward_features(params, features(&params.arch, image)?)
}

pub fn forward(params: &ModelParams, image: &Image) -> Result<Vec<Prediction>> {
    Ok(forward_cached(params, image)?.0)
}

fn decode(a: &Architecture, outputs: &[f64]) -> Vec<Prediction> {
    let k = a.classes + 1;
    outputs
        .chunks_exact(a.query_dim())
        .map(|q| {
            let logits = &q[..k];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
            let probs = log_probs.iter().map(|l| l.exp()).collect();
            let center = [sigmoid(q[k]), sigmoid(q[k + 1]), sigmoid(q[k + 2]), sigmoid(q[k + 3])];
            Prediction { probs, log_probs, center }
        })
        .collect()
}

/// Loss value, gradient with respect to the raw head outputs, and the
/// query-to-target matching used.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub output_grad: Vec<f64>,
    /// `(query, target)` pairs.
    pub matching: Vec<(usize, usize)>,
}

fn box_l1(pred: &Prediction, target: &BBox) -> f64 {
    pred.corners().iter().zip(target.to_array()).map(|(p, t)| (p - t).abs()).sum()
}

/// Subgradient of `|x|`, zero inside a rounding-size dead zone so an exact
/// fit stays put.
fn sign(x: f64) -> f64 {
    if x > 1e-12 {
        1.0
    } else if x < -1e-12 {
        -1.0
    } else {
        0.0
    }
}

/// Pairwise matching cost: negative log-probability of the target class
/// plus weighted L1 distance between predicted and target corners.
pub fn matching_cost(preds: &[Prediction], targets: &LabelSet, reg_weight: f64) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| targets.iter().map(|(b, c)| -p.log_probs[c] + reg_weight * box_l1(p, b)).collect())
        .collect()
}

/// Hungarian-matched set loss averaged over queries.
pub fn detection_loss(preds: &[Prediction], targets: &LabelSet, reg_weight: f64, noobj_weight: f64) -> Result<LossOutput> {
    let nq = preds.len();
    if targets.len() > nq {
        return Err(Error::TooManyTargets { targets: targets.len(), queries: nq });
    }
    let k = preds.first().map_or(1, |p| p.probs.len());
    let no_obj = k - 1;
    if let Some(&c) = targets.classes.iter().find(|&&c| c >= no_obj) {
        return Err(Error::config("targets", format!("class {c} is not a foreground class")));
    }
    let qd = k + 4;
    let matching = if targets.is_empty() {
        Vec::new()
    } else {
        hungarian_match(&matching_cost(preds, targets, reg_weight)).pairs
    };
    let mut target_of = vec![None; nq];
    for &(q, t) in &matching {
        target_of[q] = Some(t);
    }

    let scale = 1.0 / nq as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; nq * qd];
    for (q, pred) in preds.iter().enumerate() {
        let g = &mut grad[q * qd..(q + 1) * qd];
        let (cls, w) = match target_of[q] {
            Some(t) => (targets.classes[t], 1.0),
            None => (no_obj, noobj_weight),
        };
        loss += -w * pred.log_probs[cls];
        for c in 0..k {
            let onehot = if c == cls { 1.0 } else { 0.0 };
            g[c] = scale * w * (pred.probs[c] - onehot);
        }
        if let Some(t) = target_of[q] {
            let tb = targets.boxes[t].to_array();
            let corners = pred.corners();
            loss += reg_weight * box_l1(pred, &targets.boxes[t]);
            let s: Vec<f64> = corners.iter().zip(tb).map(|(p, t)| sign(p - t)).collect();
            // corners = (cx - w/2, cy - h/2, cx + w/2, cy + h/2)
            let d_center = [s[0] + s[2], s[1] + s[3], 0.5 * (s[2] - s[0]), 0.5 * (s[3] - s[1])];
            for i in 0..4 {
                let sgm = pred.center[i];
                g[k + i] = scale * reg_weight * d_center[i] * sgm * (1.0 - sgm);
            }
        }
    }
    Ok(LossOutput { loss: loss * scale, output_grad: grad, matching })
}

/// Accumulates `dL/dparams` into `grad` given `dL/doutputs`.
pub fn backward_into(params: &ModelParams, cache: &ForwardCache, output_grad: &[f64], grad: &mut [f64]) -> Result<()> {
    let a = params.arch;
    if output_grad.len() != a.output_dim() {
        return Err(Error::ShapeMismatch { expected: a.output_dim(), got: output_grad.len() });
    }
    if grad.len() != a.param_count() || params.values.len() != a.param_count() {
        return Err(Error::ShapeMismatch { expected: a.param_count(), got: grad.len() });
    }
    let p = &params.values;
    let (ni, nh) = (a.input_dim(), a.hidden);
    let mut d_hidden = vec![0.0; nh];
    for (k, &go) in output_grad.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let w_off = a.w2() + k * nh;
        for j in 0..nh {
            grad[w_off + j] += go * cache.hidden[j];
            d_hidden[j] += go * p[w_off + j];
        }
        grad[a.b2() + k] += go;
    }
    for j in 0..nh {
        let dz = d_hidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
        if dz == 0.0 {
            continue;
        }
        let w_off = a.w1() + j * ni;
        for i in 0..ni {
            grad[w_off + i] += dz * cache.features[i];
        }
        grad[a.b1() + j] += dz;
    }
    Ok(())
}

/// Gradient of the loss with respect to every parameter.
pub fn backward(params: &ModelParams, image: &Image, output_grad: &[f64]) -> Result<Vec<f64>> {
    let (_, cache) = forward_cached(params, image)?;
    let mut grad = vec![0.0; params.len()];
    backward_into(params, &cache, output_grad, &mut grad)?;
    Ok(grad)
}

/// Loss of one labelled image, with its gradient accumulated into `grad`
/// scaled by `weight`.
pub fn accumulate_loss_grad(
    params: &ModelParams,
    cfg: &DetectorConfig,
    image: &Image,
    targets: &LabelSet,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let (preds, cache) = forward_cached(params, image)?;
    let mut out = detection_loss(&preds, targets, cfg.reg_weight, cfg.noobj_weight)?;
    if weight != 0.0 {
        if weight != 1.0 {
            for g in &mut out.output_grad {
                *g *= weight;
            }
        }
        backward_into(params, &cache, &out.output_grad, grad)?;
    }
    Ok(out.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        AdamWState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Decoupled weight decay first, then the bias-corrected moment update.
pub fn optimizer_step(params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamWConfig, state: &mut AdamWState) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch { expected: params.len(), got: grad.len() });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Detections for queries whose argmax is a foreground class with
/// probability `zeta >= floor`.
pub fn predict(params: &ModelParams, image: &Image, floor: f64) -> Result<Vec<Detection>> {
    Ok(filter_predictions(&forward(params, image)?, floor))
}

pub fn filter_predictions(preds: &[Prediction], floor: f64) -> Vec<Detection> {
    preds
        .iter()
        .filter_map(|p| {
            let (c, zeta) = p.best_foreground();
            (p.argmax() != p.probs.len() - 1 && zeta >= floor).then(|| Detection::new(p.bbox(), c, zeta))
        })
        .collect()
}

/// One detection per query scored by its best foreground probability, the
/// usual ranking input for evaluating set-prediction detectors.
pub fn detect_all(params: &ModelParams, image: &Image) -> Result<Vec<Detection>> {
    Ok(forward(params, image)?
        .iter()
        .map(|p| {
            let (c, zeta) = p.best_foreground();
            Detection::new(p.bbox(), c, zeta)
        })
        .collect())
}
