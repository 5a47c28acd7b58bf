//! Student/teacher self-training loop driven by a policy bundle.
//!
//! Each iteration draws a labelled minibatch (weak augmentation, ground
//! truth) and an unlabelled minibatch of the same size. The teacher labels
//! weakly augmented unlabelled images; detections above the confidence
//! threshold are carried through a strong augmentation and become targets
//! for the student. The student minimizes `L + alpha * L'` with AdamW and the
//! teacher follows it by exponential moving average.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment};
use crate::datagen::Scene;
use crate::detector::{
    accumulate_loss_grad, detect_all, filter_predictions, forward, optimizer_step, AdamWConfig, AdamWState,
    DetectorConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{coco_metrics, LabelSet, MetricsRecord};
use crate::schedules::{covariance_diagnostic, sample_unlabelled, PolicyBundle, PolicySnapshot, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Supervised-only training for the warm-start span, after which the
    /// teacher is reset to the student.
    PretrainedWarmstart,
    /// The unlabelled branch is live from the first epoch with a freshly
    /// initialised teacher.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaGranularity {
    Iteration,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub optimizer: AdamWConfig,
    pub policy: PolicyBundle,
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterations per epoch; `None` means one pass over the whole training
    /// pool (labelled plus unlabelled) in minibatches.
    pub iters_per_epoch: Option<usize>,
    pub lr: f64,
    /// Fraction of the run after which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub init: InitMode,
    /// Fraction of epochs spent supervised-only under warm start.
    pub warmstart_frac: f64,
    pub ema: EmaGranularity,
    pub val_every: usize,
    pub seed: u64,
    /// Record teacher checksums around every update.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            detector: DetectorConfig::default(),
            optimizer: AdamWConfig::default(),
            policy: PolicyBundle::default(),
            epochs: 100,
            batch_size: 16,
            iters_per_epoch: None,
            lr: 2e-3,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            init: InitMode::PretrainedWarmstart,
            warmstart_frac: 0.25,
            ema: EmaGranularity::Iteration,
            val_every: 5,
            seed: 0,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.arch.validate()?;
        self.policy.validate(self.epochs.max(1))?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::config("train.iters_per_epoch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("train.lr_decay", "decay point in [0, 1], factor in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.warmstart_frac) {
            return Err(Error::config("train.warmstart_frac", "must lie in [0, 1)"));
        }
        if self.val_every == 0 {
            return Err(Error::config("train.val_every", "must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::config("optimizer", "betas in [0, 1), eps > 0, weight decay >= 0"));
        }
        if !(self.detector.reg_weight >= 0.0) || !(self.detector.noobj_weight >= 0.0) {
            return Err(Error::config("detector", "loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn warmstart_epochs(&self) -> usize {
        match self.init {
            InitMode::PretrainedWarmstart => (self.warmstart_frac * self.epochs as f64).round() as usize,
            InitMode::Random => 0,
        }
    }

    /// The bundle actually used: random initialisation drops any sampling
    /// warm-up so self-training starts at once.
    pub fn effective_policy(&self) -> PolicyBundle {
        let mut p = self.policy.clone();
        if self.init == InitMode::Random && p.sampling.shape == Shape::WarmupCooldown {
            p.sampling.warmup_frac = 0.0;
        }
        p
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.lr_decay_at * self.epochs as f64).round() as usize;
        if epoch >= decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub total_loss: f64,
    pub sampling: f64,
    pub loss_weight: f64,
    pub threshold: f64,
    pub momentum: f64,
    pub lr: f64,
    /// Unlabelled samples drawn and admitted by the sampling policy.
    pub drawn: usize,
    pub admitted: usize,
    /// Pseudo-labels that survived thresholding and augmentation.
    pub pseudo_labels: usize,
    /// Mean teacher detections per drawn unlabelled image above 0.9 / 0.5.
    pub n_conf_09: f64,
    pub n_conf_05: f64,
    pub val: Option<MetricsRecord>,
    /// Covariance between unsupervised loss and normalized sampling weight
    /// over the history so far.
    pub covariance: Option<f64>,
    pub student_checksum: u64,
    pub teacher_checksum: u64,
}

/// Teacher checksums around one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub before_step: u64,
    pub after_step: u64,
    /// `None` when no EMA update happened this iteration.
    pub after_ema: Option<u64>,
    pub expected_after_ema: Option<u64>,
}

/// Training data as seen by the loop. Unlabelled images carry no labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labelled: &'a [Scene],
    pub unlabelled: &'a [Image],
    pub val: &'a [Scene],
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt: AdamWState,
    pub epoch: usize,
    pub total: usize,
    pub rng_labelled: ChaCha8Rng,
    pub rng_unlabelled: ChaCha8Rng,
    order_x: Vec<usize>,
    cursor_x: usize,
    order_u: Vec<usize>,
    cursor_u: usize,
    pub history: Vec<StepLog>,
    pub audit: Vec<AuditEntry>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, 0);
        let student = ModelParams::init(cfg.detector.arch, &mut init_rng);
        let teacher = student.clone();
        Ok(TrainerState {
            opt: AdamWState::new(student.len()),
            student,
            teacher,
            epoch: 0,
            total: cfg.epochs,
            rng_labelled: stream(cfg.seed, 1),
            rng_unlabelled: stream(cfg.seed, 2),
            order_x: Vec::new(),
            cursor_x: 0,
            order_u: Vec::new(),
            cursor_u: 0,
            history: Vec::new(),
            audit: Vec::new(),
        })
    }
}

/// Draws `n` indices from `0..len` by walking a shuffled order, reshuffling
/// whenever it runs out.
fn draw_cycled(order: &mut Vec<usize>, cursor: &mut usize, len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if *cursor >= order.len() || order.len() != len {
            *order = (0..len).collect();
            order.shuffle(rng);
            *cursor = 0;
        }
        out.push(order[*cursor]);
        *cursor += 1;
    }
    out
}

/// `m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, m: f64) -> Result<ModelParams> {
    let mut t = teacher.clone();
    ema_update_in_place(&mut t, student, m)?;
    Ok(t)
}

pub fn ema_update_in_place(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<()> {
    if teacher.arch != student.arch || teacher.len() != student.len() {
        return Err(Error::ShapeMismatch { expected: teacher.len(), got: student.len() });
    }
    // 1 itself is allowed: momenta within an ulp of 1 round to it
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::config("momentum", "must lie in (0, 1]"));
    }
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// A pseudo-labelled training sample in the strong-augmentation frame.
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub image: Image,
    pub labels: LabelSet,
    /// Teacher detections on the weak view before thresholding.
    pub raw_detections: usize,
}

/// Weak view, teacher prediction, confidence filter (`zeta > threshold`),
/// then strong augmentation with the survivors mapped along.
pub fn generate_pseudo_labels(
    teacher: &ModelParams,
    image: &Image,
    snapshot: &PolicySnapshot,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoSample> {
    let weak = weak_augment(image, &snapshot.aug, rng);
    let preds = forward(teacher, &weak.image)?;
    let dets = filter_predictions(&preds, 0.0);
    Ok(pseudo_from_weak(&weak.image, &dets, snapshot, rng))
}

fn pseudo_from_weak(
    weak: &Image,
    dets: &[crate::metrics::Detection],
    snapshot: &PolicySnapshot,
    rng: &mut ChaCha8Rng,
) -> PseudoSample {
    let kept: Vec<_> = dets.iter().copied().filter(|d| d.score > snapshot.threshold).collect();
    let labels = LabelSet::from_detections(&kept);
    let (strong, mapped) = strong_augment(weak, &labels, &snapshot.aug, rng);
    PseudoSample { image: strong.image, labels: mapped, raw_detections: dets.len() }
}

/// Teacher AP on a labelled split, scoring every query.
pub fn evaluate(params: &ModelParams, scenes: &[Scene]) -> Result<MetricsRecord> {
    let preds = scenes.iter().map(|s| detect_all(params, &s.image)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelSet> = scenes.iter().map(|s| s.labels.clone()).collect();
    coco_metrics(&preds, &gts)
}

fn cap_targets(labels: LabelSet, queries: usize) -> LabelSet {
    if labels.len() <= queries {
        return labels;
    }
    LabelSet { boxes: labels.boxes[..queries].to_vec(), classes: labels.classes[..queries].to_vec() }
}

fn iterations(cfg: &TrainConfig, data: &TrainData) -> usize {
    cfg.iters_per_epoch
        .unwrap_or_else(|| (data.labelled.len() + data.unlabelled.len()).div_ceil(cfg.batch_size))
        .max(1)
}

/// One epoch of minibatch updates under `snapshot`.
pub fn train_epoch(state: &mut TrainerState, cfg: &TrainConfig, data: &TrainData, snapshot: &PolicySnapshot) -> Result<StepLog> {
    if data.labelled.is_empty() {
        return Err(Error::EmptyLabelledPool);
    }
    let arch = cfg.detector.arch;
    let bs = cfg.batch_size;
    let lr = cfg.lr_at(state.epoch);
    let n_iter = iterations(cfg, data);
    let alpha = snapshot.loss_weight;
    let mut grad = vec![0.0; state.student.len()];
    let (mut sup_sum, mut unsup_sum) = (0.0, 0.0);
    let (mut drawn, mut admitted, mut pseudo_labels) = (0usize, 0usize, 0usize);
    let (mut c09, mut c05) = (0usize, 0usize);

    for it in 0..n_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);

        let idx = draw_cycled(&mut state.order_x, &mut state.cursor_x, data.labelled.len(), bs, &mut state.rng_labelled);
        let w = 1.0 / idx.len() as f64;
        let mut sup = 0.0;
        for &i in &idx {
            let scene = &data.labelled[i];
            let weak = weak_augment(&scene.image, &snapshot.aug, &mut state.rng_labelled);
            let targets = cap_targets(weak.map_labels(&scene.labels, snapshot.aug.min_visible), arch.queries);
            sup += w * accumulate_loss_grad(&state.student, &cfg.detector, &weak.image, &targets, w, &mut grad)?;
        }
        sup_sum += sup;

        // drawn even when nothing can be admitted, so the teacher confidence
        // counts cover the whole run
        if !data.unlabelled.is_empty() {
            let rng = &mut state.rng_unlabelled;
            let uidx = draw_cycled(&mut state.order_u, &mut state.cursor_u, data.unlabelled.len(), bs, rng);
            let keep = sample_unlabelled(&(0..uidx.len()).collect::<Vec<_>>(), snapshot.sampling, rng);
            drawn += uidx.len();
            let mut samples = Vec::with_capacity(keep.len());
            for (k, &u) in uidx.iter().enumerate() {
                let weak = weak_augment(&data.unlabelled[u], &snapshot.aug, rng);
                let dets = filter_predictions(&forward(&state.teacher, &weak.image)?, 0.0);
                c09 += dets.iter().filter(|d| d.score > 0.9).count();
                c05 += dets.iter().filter(|d| d.score > 0.5).count();
                if keep.binary_search(&k).is_ok() {
                    samples.push(pseudo_from_weak(&weak.image, &dets, snapshot, rng));
                }
            }
            admitted += samples.len();
            if !samples.is_empty() {
                let wu = 1.0 / samples.len() as f64;
                let gw = if alpha == 0.0 { 0.0 } else { alpha * wu };
                let mut unsup = 0.0;
                // a zero weight still evaluates the loss but adds nothing
                // to the gradient
                let mut sink = Vec::new();
                for s in samples {
                    pseudo_labels += s.labels.len();
                    let targets = cap_targets(s.labels, arch.queries);
                    let g: &mut [f64] = if gw == 0.0 {
                        sink.resize(grad.len(), 0.0);
                        &mut sink
                    } else {
                        &mut grad
                    };
                    unsup += wu * accumulate_loss_grad(&state.student, &cfg.detector, &s.image, &targets, gw, g)?;
                }
                unsup_sum += unsup;
            }
        }

        let before = cfg.audit.then(|| state.teacher.checksum());
        optimizer_step(&mut state.student.values, &grad, lr, &cfg.optimizer, &mut state.opt)?;
        let after_step = cfg.audit.then(|| state.teacher.checksum());
        let mut after_ema = None;
        let mut expected = None;
        if cfg.ema == EmaGranularity::Iteration || it + 1 == n_iter {
            if cfg.audit {
                expected = Some(ema_update(&state.teacher, &state.student, snapshot.momentum)?.checksum());
            }
            ema_update_in_place(&mut state.teacher, &state.student, snapshot.momentum)?;
            if cfg.audit {
                after_ema = Some(state.teacher.checksum());
            }
        }
        if cfg.audit {
            state.audit.push(AuditEntry {
                epoch: state.epoch,
                iteration: it,
                before_step: before.unwrap_or(0),
                after_step: after_step.unwrap_or(0),
                after_ema,
                expected_after_ema: expected,
            });
        }
    }

    let n = n_iter as f64;
    let (sup_loss, unsup_loss) = (sup_sum / n, unsup_sum / n);
    let drawn_f = drawn.max(1) as f64;
    Ok(StepLog {
        epoch: state.epoch,
        sup_loss,
        unsup_loss,
        total_loss: sup_loss + alpha * unsup_loss,
        sampling: snapshot.sampling,
        loss_weight: alpha,
        threshold: snapshot.threshold,
        momentum: snapshot.momentum,
        lr,
        drawn,
        admitted,
        pseudo_labels,
        n_conf_09: if drawn == 0 { 0.0 } else { c09 as f64 / drawn_f },
        n_conf_05: if drawn == 0 { 0.0 } else { c05 as f64 / drawn_f },
        val: None,
        covariance: None,
        student_checksum: state.student.checksum(),
        teacher_checksum: state.teacher.checksum(),
    })
}

/// Covariance over the epochs that admitted unlabelled samples, pairing
/// each epoch's unsupervised loss with its normalized sampling weight
/// `alpha * pi / (n * mean pi)`.
pub fn history_covariance(history: &[StepLog]) -> Option<f64> {
    let live: Vec<&StepLog> = history.iter().filter(|h| h.admitted > 0).collect();
    if live.len() < 2 {
        return None;
    }
    let n = live.len() as f64;
    let mean_pi = live.iter().map(|h| h.sampling).sum::<f64>() / n;
    if mean_pi <= 0.0 {
        return None;
    }
    let losses: Vec<f64> = live.iter().map(|h| h.unsup_loss).collect();
    let probs: Vec<f64> = live.iter().map(|h| h.loss_weight * h.sampling / (n * mean_pi)).collect();
    covariance_diagnostic(&losses, &probs).ok()
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub state: TrainerState,
    pub history: Vec<StepLog>,
    /// `(epoch, student, teacher)` after the listed epochs.
    pub checkpoints: Vec<(usize, ModelParams, ModelParams)>,
}

/// Runs all epochs. Validation uses the teacher every `val_every` epochs and
/// after the final one.
pub fn run_training(cfg: &TrainConfig, data: &TrainData, checkpoint_every: Option<usize>) -> Result<RunArtifacts> {
    run_training_with(cfg, data, checkpoint_every, |_| {})
}

/// [`run_training`] with a callback after every epoch.
pub fn run_training_with(
    cfg: &TrainConfig,
    data: &TrainData,
    checkpoint_every: Option<usize>,
    mut on_epoch: impl FnMut(&StepLog),
) -> Result<RunArtifacts> {
    let mut state = TrainerState::new(cfg)?;
    let mut checkpoints = Vec::new();
    if cfg.epochs == 0 {
        return Ok(RunArtifacts { history: Vec::new(), state, checkpoints });
    }
    if data.labelled.is_empty() {
        return Err(Error::EmptyLabelledPool);
    }
    let policy = cfg.effective_policy();
    let warm = cfg.warmstart_epochs();
    for t in 0..cfg.epochs {
        state.epoch = t;
        if warm > 0 && t == warm {
            state.teacher = state.student.clone();
        }
        let mut snap = policy.snapshot(t, cfg.epochs)?;
        if t < warm {
            snap.sampling = 0.0;
        }
        let mut log = train_epoch(&mut state, cfg, data, &snap)?;
        if ((t + 1) % cfg.val_every == 0 || t + 1 == cfg.epochs)
            && !data.val.is_empty() {
                log.val = Some(evaluate(&state.teacher, data.val)?);
            }
        state.history.push(log);
        let cov = history_covariance(&state.history);
        let last = state.history.last_mut().expect("just pushed");
        last.covariance = cov;
        on_epoch(last);
        if let Some(k) = checkpoint_every {
            if k > 0 && ((t + 1) % k == 0 || t + 1 == cfg.epochs) {
                checkpoints.push((t + 1, state.student.clone(), state.teacher.clone()));
            }
        }
    }
    state.epoch = cfg.epochs;
    Ok(RunArtifacts { history: state.history.clone(), state, checkpoints })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Virtuous,
    Vicious,
    Indeterminate,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Virtuous => "virtuous",
            Regime::Vicious => "vicious",
            Regime::Indeterminate => "indeterminate",
        }
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Default AP50 slope threshold in points per epoch.
pub const REGIME_SLOPE: f64 = 0.1;
pub const REGIME_WINDOW: usize = 6;

/// Classifies the trailing `window` validated epochs. Virtuous: AP50 rises
/// faster than `slope` points/epoch while high-confidence pseudo-label
/// counts rise. Vicious: AP50 falls faster than `slope` while those counts
/// rise.
pub fn detect_cycle_regime(history: &[StepLog], window: usize, slope: f64) -> Result<Regime> {
    if window < 2 {
        return Err(Error::config("regime.window", "must be at least 2"));
    }
    let validated: Vec<&StepLog> = history.iter().filter(|h| h.val.is_some()).collect();
    if validated.len() < window {
        return Ok(Regime::Indeterminate);
    }
    let tail = &validated[validated.len() - window..];
    let x: Vec<f64> = tail.iter().map(|h| h.epoch as f64).collect();
    let ap: Vec<f64> = tail.iter().map(|h| 100.0 * h.val.expect("filtered").ap50).collect();
    let conf: Vec<f64> = tail.iter().map(|h| h.n_conf_09).collect();
    let (ap_slope, conf_slope) = (ols_slope(&x, &ap), ols_slope(&x, &conf));
    Ok(if conf_slope > 0.0 && ap_slope > slope {
        Regime::Virtuous
    } else if conf_slope > 0.0 && ap_slope < -slope {
        Regime::Vicious
    } else {
        Regime::Indeterminate
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugConfig;
    use crate::datagen::{generate_dataset, DatasetConfig};
    use crate::detector::Architecture;
    use crate::geometry::{apply_transform, BBox, GeomTransform};
    use crate::schedules::Schedule;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            detector: DetectorConfig {
                arch: Architecture { width: 32, height: 32, cells: 4, hidden: 16, queries: 4, classes: 2 },
                ..DetectorConfig::default()
            },
            epochs: 6,
            batch_size: 4,
            iters_per_epoch: Some(3),
            val_every: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (Vec<Scene>, Vec<Image>, Vec<Scene>) {
        let cfg = DatasetConfig::default();
        let scenes = generate_dataset(&cfg, 1, 40).unwrap();
        let lab = scenes[..10].to_vec();
        let unl = scenes[10..30].iter().map(|s| s.image.clone()).collect();
        let val = scenes[30..].to_vec();
        (lab, unl, val)
    }

    fn params_with(v: f64, arch: Architecture) -> ModelParams {
        ModelParams { values: vec![v; arch.param_count()], arch }
    }

    #[test]
    fn ema_examples() {
        let arch = tiny_cfg().detector.arch;
        let t = params_with(0.0, arch);
        let s = params_with(1.0, arch);
        assert!(ema_update(&t, &s, 0.5).unwrap().values.iter().all(|&v| v == 0.5));
        let same = ema_update(&params_with(0.3, arch), &s, 1.0 - 1e-18).unwrap();
        assert!(same.values.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let mut cur = params_with(-2.0, arch);
        let m: f64 = 0.9;
        for k in 1..=20 {
            cur = ema_update(&cur, &s, m).unwrap();
            let expect = m.powi(k) * 3.0;
            assert!(cur.values.iter().all(|&v| ((1.0 - v) - expect).abs() < 1e-12));
        }
        let other = ModelParams::zeros(Architecture { hidden: 3, ..arch });
        assert!(ema_update(&t, &other, 0.5).is_err());
        assert!(ema_update(&t, &s, 0.0).is_err());
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn ema_contracts_toward_student() {
        use rand::Rng;
        let arch = tiny_cfg().detector.arch;
        let mut rng = stream(3, 0);
        let t = ModelParams::init(arch, &mut rng);
        let s = ModelParams::init(arch, &mut rng);
        for m in [0.1, 0.5, 0.99, rng.gen_range(0.0..1.0)] {
            let n = ema_update(&t, &s, m).unwrap();
            for i in 0..t.len() {
                assert!((n.values[i] - s.values[i]).abs() <= m * (t.values[i] - s.values[i]).abs() + 1e-15);
            }
        }
    }

    fn snapshot_with(threshold: f64, aug: AugConfig) -> PolicySnapshot {
        PolicySnapshot { sampling: 1.0, loss_weight: 1.0, threshold, momentum: 0.99, aug }
    }

    #[test]
    fn strict_threshold_empties_pseudo_labels() {
        let (_, unl, _) = tiny_data();
        let teacher = ModelParams::init(tiny_cfg().detector.arch, &mut stream(0, 0));
        let snap = snapshot_with(0.99, AugConfig::default());
        let out = generate_pseudo_labels(&teacher, &unl[0], &snap, &mut stream(0, 5)).unwrap();
        assert!(out.labels.is_empty());
        assert_eq!(out.image.width, 32);
    }

    /// Teacher that predicts exactly the given boxes with certainty, built by
    /// zeroing the weights and setting the output biases.
    fn oracle_teacher(labels: &LabelSet, queries: usize) -> ModelParams {
        let arch = Architecture { width: 32, height: 32, cells: 4, hidden: 4, queries, classes: 2 };
        let mut p = ModelParams::zeros(arch);
        let b2 = arch.param_count() - arch.output_dim();
        let qd = arch.query_dim();
        let logit = |x: f64| (x / (1.0 - x)).ln();
        for q in 0..queries {
            let base = b2 + q * qd;
            match labels.boxes.get(q) {
                Some(b) => {
                    p.values[base + labels.classes[q]] = 60.0;
                    let (cx, cy) = b.center();
                    p.values[base + 3] = logit(cx);
                    p.values[base + 4] = logit(cy);
                    p.values[base + 5] = logit(b.width());
                    p.values[base + 6] = logit(b.height());
                }
                None => p.values[base + 2] = 60.0,
            }
        }
        p
    }

    #[test]
    fn oracle_teacher_passes_labels_through() {
        let mut gt = LabelSet::empty();
        gt.push(BBox::new(0.125, 0.25, 0.375, 0.5), 0);
        gt.push(BBox::new(0.5, 0.5, 0.875, 0.75), 1);
        let teacher = oracle_teacher(&gt, 4);
        let img = Image::filled(32, 32, [0.5; 3]);
        let snap = snapshot_with(0.5, AugConfig::none());
        let out = generate_pseudo_labels(&teacher, &img, &snap, &mut stream(0, 1)).unwrap();
        assert_eq!(out.labels.classes, gt.classes);
        for (a, b) in out.labels.boxes.iter().zip(&gt.boxes) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_that_removes_one_object_keeps_the_survivor() {
        let mut gt = LabelSet::empty();
        gt.push(BBox::new(0.05, 0.05, 0.25, 0.25), 0);
        gt.push(BBox::new(0.6, 0.6, 0.9, 0.9), 1);
        let teacher = oracle_teacher(&gt, 4);
        let img = Image::filled(32, 32, [0.5; 3]);
        // crop-only strong pipeline, weak pipeline off
        let aug = AugConfig {
            weak_intensity: 0.0,
            flip: false,
            translate: false,
            color: false,
            erase: false,
            min_crop_scale: 0.5,
            ..AugConfig::default()
        };
        let snap = snapshot_with(0.5, aug);
        let mut found = false;
        for seed in 0..200 {
            let mut rng = stream(seed, 9);
            let out = generate_pseudo_labels(&teacher, &img, &snap, &mut rng).unwrap();
            if out.labels.len() != 1 {
                continue;
            }
            // replay the crop from an identical stream
            let mut replay = stream(seed, 9);
            let weak = weak_augment(&img, &snap.aug, &mut replay);
            let (strong, _) = strong_augment(&weak.image, &gt, &snap.aug, &mut replay);
            let GeomTransform::CropResize { window } = strong.geometry[0] else { panic!("crop expected") };
            let t = GeomTransform::CropResize { window };
            let survivors: Vec<_> = gt.iter().filter_map(|(b, c)| apply_transform(&t, b).map(|m| (m, c))).collect();
            assert_eq!(survivors.len(), 1);
            let (m, c) = survivors[0];
            assert_eq!(out.labels.classes[0], c);
            for (x, y) in out.labels.boxes[0].to_array().iter().zip(m.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
            found = true;
            break;
        }
        assert!(found, "no crop dropped exactly one object");
    }

    #[test]
    fn zero_epochs_return_initial_state() {
        let (lab, unl, val) = tiny_data();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let data = TrainData { labelled: &lab, unlabelled: &unl, val: &val };
        let run = run_training(&cfg, &data, None).unwrap();
        assert!(run.history.is_empty());
        assert_eq!(run.state.student, TrainerState::new(&cfg).unwrap().student);
    }

    #[test]
    fn empty_labelled_pool_errors() {
        let (_, unl, val) = tiny_data();
        let data = TrainData { labelled: &[], unlabelled: &unl, val: &val };
        assert!(matches!(run_training(&tiny_cfg(), &data, None), Err(Error::EmptyLabelledPool)));
    }

    #[test]
    fn loss_composition_and_determinism() {
        let (lab, unl, val) = tiny_data();
        let cfg = TrainConfig { warmstart_frac: 0.0, ..tiny_cfg() };
        let data = TrainData { labelled: &lab, unlabelled: &unl, val: &val };
        let a = run_training(&cfg, &data, None).unwrap();
        let b = run_training(&cfg, &data, None).unwrap();
        assert_eq!(a.history, b.history);
        for h in &a.history {
            assert!((h.total_loss - (h.sup_loss + h.loss_weight * h.unsup_loss)).abs() <= 1e-10);
            assert!(h.sup_loss >= 0.0 && h.unsup_loss >= 0.0);
        }
        assert!(a.history.iter().any(|h| h.admitted > 0));
        assert_eq!(a.history.iter().filter(|h| h.val.is_some()).count(), 3);
    }

    #[test]
    fn zero_weight_or_zero_sampling_match_supervised_run() {
        let (lab, unl, val) = tiny_data();
        let data = TrainData { labelled: &lab, unlabelled: &unl, val: &val };
        let base = TrainConfig { warmstart_frac: 0.0, ..tiny_cfg() };
        let sup = TrainConfig { policy: PolicyBundle::supervised_only(), ..base.clone() };
        let mut zero_alpha = base.clone();
        zero_alpha.policy.loss_weight = Schedule::constant(0.0);
        zero_alpha.policy.sampling = Schedule::constant(1.0);
        let a = run_training(&sup, &data, None).unwrap();
        let b = run_training(&zero_alpha, &data, None).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.student_checksum, y.student_checksum);
            assert_eq!(x.sup_loss.to_bits(), y.sup_loss.to_bits());
        }
        assert!(b.history.iter().all(|h| h.admitted > 0));
        assert!(a.history.iter().all(|h| h.admitted == 0 && h.unsup_loss == 0.0));
        assert_eq!(a.state.student, b.state.student);
    }

    #[test]
    fn teacher_moves_only_by_ema() {
        let (lab, unl, val) = tiny_data();
        let data = TrainData { labelled: &lab, unlabelled: &unl, val: &val };
        for ema in [EmaGranularity::Iteration, EmaGranularity::Epoch] {
            let cfg = TrainConfig { audit: true, ema, warmstart_frac: 0.0, ..tiny_cfg() };
            let run = run_training(&cfg, &data, None).unwrap();
            assert_eq!(run.state.audit.len(), 18);
            for e in &run.state.audit {
                assert_eq!(e.before_step, e.after_step);
                assert_eq!(e.after_ema, e.expected_after_ema);
            }
            let updates = run.state.audit.iter().filter(|e| e.after_ema.is_some()).count();
            assert_eq!(updates, if ema == EmaGranularity::Iteration { 18 } else { 6 });
        }
    }

    #[test]
    fn perfectly_fit_sample_only_decays() {
        let mut gt = LabelSet::empty();
        gt.push(BBox::new(0.125, 0.25, 0.375, 0.5), 0);
        let teacher = oracle_teacher(&gt, 4);
        let img = Image::filled(32, 32, [0.5; 3]);
        let scene = Scene { id: 0, image: img, labels: gt };
        let cfg = TrainConfig {
            detector: DetectorConfig { arch: teacher.arch, ..DetectorConfig::default() },
            policy: PolicyBundle { aug: AugConfig::none(), ..PolicyBundle::supervised_only() },
            optimizer: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            epochs: 1,
            batch_size: 1,
            iters_per_epoch: Some(1),
            ..TrainConfig::default()
        };
        let mut state = TrainerState::new(&cfg).unwrap();
        state.student = teacher.clone();
        let snap = cfg.policy.snapshot(0, 1).unwrap();
        let data = TrainData { labelled: std::slice::from_ref(&scene), unlabelled: &[], val: &[] };
        let log = train_epoch(&mut state, &cfg, &data, &snap).unwrap();
        assert!(log.sup_loss < 1e-12);
        for (a, b) in state.student.values.iter().zip(&teacher.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn log_with(epoch: usize, ap50: f64, conf: f64) -> StepLog {
        StepLog {
            epoch,
            sup_loss: 0.0,
            unsup_loss: 0.0,
            total_loss: 0.0,
            sampling: 0.0,
            loss_weight: 0.0,
            threshold: 0.0,
            momentum: 0.0,
            lr: 0.0,
            drawn: 0,
            admitted: 0,
            pseudo_labels: 0,
            n_conf_09: conf,
            n_conf_05: conf,
            val: Some(MetricsRecord { map: 0.0, ap50, ap75: 0.0 }),
            covariance: None,
            student_checksum: 0,
            teacher_checksum: 0,
        }
    }

    #[test]
    fn regime_examples() {
        let rising: Vec<StepLog> = (0..10).map(|i| log_with(5 * i, 0.2 + 0.02 * i as f64, 0.1 * i as f64)).collect();
        assert_eq!(detect_cycle_regime(&rising, 6, REGIME_SLOPE).unwrap(), Regime::Virtuous);
        let peaked: Vec<StepLog> = (0..10)
            .map(|i| {
                let ap = if i < 4 { 0.3 + 0.05 * i as f64 } else { 0.45 - 0.04 * (i - 3) as f64 };
                log_with(5 * i, ap, 0.2 * i as f64)
            })
            .collect();
        assert_eq!(detect_cycle_regime(&peaked, 6, REGIME_SLOPE).unwrap(), Regime::Vicious);
        let flat: Vec<StepLog> = (0..10).map(|i| log_with(5 * i, 0.4, 0.1 * i as f64)).collect();
        assert_eq!(detect_cycle_regime(&flat, 6, REGIME_SLOPE).unwrap(), Regime::Indeterminate);
        assert_eq!(detect_cycle_regime(&flat[..3], 6, REGIME_SLOPE).unwrap(), Regime::Indeterminate);
        assert!(detect_cycle_regime(&flat, 1, REGIME_SLOPE).is_err());
    }

    #[test]
    fn covariance_sign_follows_loss_trend() {
        let mut hist: Vec<StepLog> = (0..6)
            .map(|i| {
                let mut l = log_with(i, 0.0, 0.0);
                l.admitted = 1;
                l.sampling = 0.2 * (i + 1) as f64;
                l.loss_weight = 1.0;
                l.unsup_loss = 1.0 - 0.1 * i as f64;
                l
            })
            .collect();
        assert!(history_covariance(&hist).unwrap() < 0.0);
        for (i, h) in hist.iter_mut().enumerate() {
            h.unsup_loss = 0.1 * i as f64;
        }
        assert!(history_covariance(&hist).unwrap() > 0.0);
        assert!(history_covariance(&hist[..1]).is_none());
    }
}
