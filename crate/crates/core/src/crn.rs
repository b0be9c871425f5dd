//! Confidence refinement network.
//!
//! A 5 -> 32 -> 32 -> 1 perceptron (ReLU, ReLU, sigmoid) mapping
//! `[c, var, s, e, t]` to a refined confidence, with hand-written
//! backpropagation, Adam, and binary cross-entropy. Everything runs in f64 and
//! training is single-threaded so identical inputs give identical weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::match_detections;
use crate::geometry::Detection;
use crate::ingest::GroundTruthBox;
use crate::rng::Rng;

pub const INPUT: usize = 5;
pub const HIDDEN: usize = 32;
pub const FEATURE_ORDER: [&str; INPUT] = ["c", "var", "s", "e", "t"];
pub const DEFAULT_TAU: f64 = 0.5;
pub const BCE_CLIP: f64 = 1e-7;

/// `[c, var, s, e, t]`, every component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector([f64; INPUT]);

impl FeatureVector {
    pub fn new(values: [f64; INPUT]) -> Result<Self> {
        for (name, v) in FEATURE_ORDER.iter().zip(values) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "feature {name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> [f64; INPUT] {
        self.0
    }
}

/// Weights are stored as `[output][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnParameters {
    pub w1: [[f64; INPUT]; HIDDEN],
    pub b1: [f64; HIDDEN],
    pub w2: [[f64; HIDDEN]; HIDDEN],
    pub b2: [f64; HIDDEN],
    pub w3: [f64; HIDDEN],
    pub b3: f64,
}

impl CrnParameters {
    pub const COUNT: usize = HIDDEN * INPUT + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;

    pub fn zeros() -> Self {
        Self {
            w1: [[0.0; INPUT]; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [[0.0; HIDDEN]; HIDDEN],
            b2: [0.0; HIDDEN],
            w3: [0.0; HIDDEN],
            b3: 0.0,
        }
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    /// Draw order: `w1` row-major, then `w2`, then `w3`.
    pub fn he_uniform(rng: &mut Rng) -> Self {
        let mut p = Self::zeros();
        let mut fill = |ws: &mut [f64], fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in ws {
                *w = rng.uniform(-limit, limit);
            }
        };
        fill(p.w1.as_flattened_mut(), INPUT);
        fill(p.w2.as_flattened_mut(), HIDDEN);
        fill(&mut p.w3, HIDDEN);
        p
    }

    /// Every parameter in a fixed order: w1, b1, w2, b2, w3, b3.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .as_flattened()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_flattened())
            .chain(&self.b2)
            .chain(&self.w3)
            .chain(std::iter::once(&self.b3))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .as_flattened_mut()
            .iter_mut()
            .chain(&mut self.b1)
            .chain(self.w2.as_flattened_mut())
            .chain(&mut self.b2)
            .chain(&mut self.w3)
            .chain(std::iter::once(&mut self.b3))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest f64 below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

struct Activations {
    z1: [f64; HIDDEN],
    h1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: f64,
}

fn activations(p: &CrnParameters, f: &FeatureVector) -> Activations {
    let x = f.values();
    let mut z1 = [0.0; HIDDEN];
    let mut h1 = [0.0; HIDDEN];
    for k in 0..HIDDEN {
        z1[k] = p.b1[k] + p.w1[k].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        h1[k] = z1[k].max(0.0);
    }
    let mut z2 = [0.0; HIDDEN];
    let mut h2 = [0.0; HIDDEN];
    for k in 0..HIDDEN {
        z2[k] = p.b2[k] + p.w2[k].iter().zip(&h1).map(|(w, v)| w * v).sum::<f64>();
        h2[k] = z2[k].max(0.0);
    }
    let z3 = p.b3 + p.w3.iter().zip(&h2).map(|(w, v)| w * v).sum::<f64>();
    // Clamp so the output stays strictly inside (0, 1) even when the
    // sigmoid saturates in f64.
    let out = sigmoid(z3).clamp(f64::MIN_POSITIVE, BELOW_ONE);
    Activations {
        z1,
        h1,
        z2,
        h2,
        out: if z3.is_finite() { out } else { f64::NAN },
    }
}

/// Refined confidence in the open interval `(0, 1)`.
pub fn forward(params: &CrnParameters, f: &FeatureVector) -> Result<f64> {
    let a = activations(params, f);
    if a.out.is_nan() {
        return Err(Error::NonFinite(
            "output pre-activation is not finite; parameters are corrupt".into(),
        ));
    }
    Ok(a.out)
}

/// Binary cross-entropy with the prediction clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(prediction: f64, label: u8) -> f64 {
    let p = prediction.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Analytic gradient of `bce_loss(forward(params, f), label)`. The ReLU
/// subgradient at zero is zero. The clip in `bce_loss` is ignored, so the
/// output-layer error is `p - y`.
pub fn backward(params: &CrnParameters, f: &FeatureVector, label: u8) -> CrnParameters {
    let a = activations(params, f);
    let mut g = CrnParameters::zeros();
    let d3 = a.out - f64::from(label);
    g.b3 = d3;
    let mut d2 = [0.0; HIDDEN];
    for k in 0..HIDDEN {
        g.w3[k] = d3 * a.h2[k];
        d2[k] = if a.z2[k] > 0.0 {
            d3 * params.w3[k]
        } else {
            0.0
        };
    }
    let mut d1 = [0.0; HIDDEN];
    for k in 0..HIDDEN {
        g.b2[k] = d2[k];
        for j in 0..HIDDEN {
            g.w2[k][j] = d2[k] * a.h1[j];
            d1[j] += d2[k] * params.w2[k][j];
        }
    }
    let x = f.values();
    for j in 0..HIDDEN {
        let dz = if a.z1[j] > 0.0 { d1[j] } else { 0.0 };
        g.b1[j] = dz;
        for i in 0..INPUT {
            g.w1[j][i] = dz * x[i];
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            early_stop_patience: 20,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_bce: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_bce,val_bce\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_bce, e.val_bce);
        }
        s
    }
}

pub fn mean_bce(params: &CrnParameters, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        total += bce_loss(forward(params, &ex.features)?, ex.label);
    }
    Ok(total / examples.len() as f64)
}

struct Adam {
    m: CrnParameters,
    v: CrnParameters,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: CrnParameters::zeros(),
            v: CrnParameters::zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut CrnParameters, grad: &CrnParameters, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grad.iter()).zip(moments) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Mini-batch Adam on BCE with early stopping on a held-out split.
///
/// The seed drives, in order: weight initialization, the train/validation
/// split shuffle, then one shuffle of the training indices per epoch.
/// Returns the parameters from the epoch with the lowest validation BCE.
pub fn train(cfg: &TrainConfig, examples: &[Example]) -> Result<(CrnParameters, TrainingLog)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation(
            "cannot train on an empty example set".into(),
        ));
    }
    let mut log = TrainingLog::default();
    let positives = examples.iter().filter(|e| e.label == 1).count();
    if examples.len() < 2 {
        log.warnings.push(format!(
            "only {} example(s); training is not meaningful",
            examples.len()
        ));
    }
    if positives == 0 || positives == examples.len() {
        log.warnings.push(format!(
            "degenerate training set: all {} examples have label {}",
            examples.len(),
            u8::from(positives > 0)
        ));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut params = CrnParameters::he_uniform(&mut rng);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let n = examples.len();
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let train_set: Vec<&Example> = train_idx.iter().map(|&i| &examples[i]).collect();
    // With a single example the training set doubles as validation.
    let val_set: Vec<&Example> = if n_val == 0 {
        train_set.clone()
    } else {
        val_idx.iter().map(|&i| &examples[i]).collect()
    };
    log.train_size = train_set.len();
    log.val_size = n_val;

    let mut adam = Adam::new();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut train_idx);
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut grad = CrnParameters::zeros();
            for &i in batch {
                let g = backward(&params, &examples[i].features, examples[i].label);
                for (acc, v) in grad.iter_mut().zip(g.iter()) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for v in grad.iter_mut() {
                *v *= scale;
            }
            adam.step(&mut params, &grad, cfg);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged in epoch {epoch}"
            )));
        }
        let train_bce = mean_bce(&params, &train_set)?;
        let val_bce = mean_bce(&params, &val_set)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_bce,
            val_bce,
        });
        if val_bce < best_val {
            best_val = val_bce;
            best = params.clone();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    log.best_val_bce = best_val;
    Ok((best, log))
}

/// Label 1 for detections that claim a same-class ground-truth box at
/// `iou_threshold` under greedy matching in rank order; 0 otherwise.
pub fn training_labels(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
) -> Vec<u8> {
    match_detections(detections, ground_truth, iou_threshold)
        .is_tp
        .into_iter()
        .map(u8::from)
        .collect()
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedDetection {
    pub detection: Detection,
    pub refined_confidence: f64,
    pub kept: bool,
}

/// Scores every detection and keeps those with refined confidence `>= tau`.
/// Output order matches input order.
pub fn rescore_and_threshold(
    params: &CrnParameters,
    items: &[(Detection, FeatureVector)],
    tau: f64,
) -> Result<Vec<RefinedDetection>> {
    items
        .iter()
        .map(|(d, f)| {
            let c = forward(params, f)?;
            Ok(RefinedDetection {
                detection: *d,
                refined_confidence: c,
                kept: c >= tau,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model files

/// Serializes the model as JSON with every weight written to 17 significant digits:
/// `{"format_version":1,"feature_order":[...],"tau":0.5,"layers":[{"rows","cols","w","b"}...]}`.
pub fn model_to_json(params: &CrnParameters, tau: f64) -> String {
    fn num(v: f64) -> String {
        format!("{v:.16e}")
    }
    fn list(vs: &[f64]) -> String {
        vs.iter().map(|&v| num(v)).collect::<Vec<_>>().join(",")
    }
    let layers = [
        (HIDDEN, INPUT, params.w1.as_flattened(), &params.b1[..]),
        (HIDDEN, HIDDEN, params.w2.as_flattened(), &params.b2[..]),
        (1, HIDDEN, &params.w3[..], std::slice::from_ref(&params.b3)),
    ];
    let mut s = String::from("{\n  \"format_version\": 1,\n  \"feature_order\": [");
    s.push_str(
        &FEATURE_ORDER
            .iter()
            .map(|n| format!("\"{n}\""))
            .collect::<Vec<_>>()
            .join(", "),
    );
    let _ = write!(s, "],\n  \"tau\": {},\n  \"layers\": [\n", num(tau));
    for (i, (rows, cols, w, b)) in layers.iter().enumerate() {
        let _ = write!(
            s,
            "    {{\"rows\": {rows}, \"cols\": {cols},\n     \"w\": [{}],\n     \"b\": [{}]}}{}\n",
            list(w),
            list(b),
            if i + 1 < layers.len() { "," } else { "" }
        );
    }
    s.push_str("  ]\n}\n");
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    feature_order: Vec<String>,
    tau: serde_json::Value,
    layers: Vec<LayerFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: Vec<serde_json::Value>,
    b: Vec<serde_json::Value>,
}

fn finite_value(v: &serde_json::Value, what: &str) -> Result<f64> {
    let x = match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse::<f64>().ok(),
        _ => None,
    };
    match x {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Validation(format!(
            "{what}: {v} is not a finite number"
        ))),
    }
}

/// Parses a model document, checking format version, feature order, layer
/// shapes, and finiteness of every value.
pub fn model_from_json(text: &str) -> Result<(CrnParameters, f64)> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("model file: {e}")))?;
    if file.format_version != 1 {
        return Err(Error::Validation(format!(
            "unsupported model format_version {}",
            file.format_version
        )));
    }
    if file.feature_order != FEATURE_ORDER {
        return Err(Error::Validation(format!(
            "model feature order {:?} does not match {:?}",
            file.feature_order, FEATURE_ORDER
        )));
    }
    let tau = finite_value(&file.tau, "tau")?;
    let shapes = [(HIDDEN, INPUT), (HIDDEN, HIDDEN), (1, HIDDEN)];
    if file.layers.len() != shapes.len() {
        return Err(Error::Validation(format!(
            "expected {} layers, found {}",
            shapes.len(),
            file.layers.len()
        )));
    }
    let mut flat: Vec<Vec<f64>> = Vec::new();
    for (i, (layer, &(rows, cols))) in file.layers.iter().zip(&shapes).enumerate() {
        if layer.rows != rows || layer.cols != cols {
            return Err(Error::Validation(format!(
                "layer {i}: shape {}x{} but expected {rows}x{cols}",
                layer.rows, layer.cols
            )));
        }
        if layer.w.len() != rows * cols || layer.b.len() != rows {
            return Err(Error::Validation(format!(
                "layer {i}: {} weights and {} biases for a {rows}x{cols} layer",
                layer.w.len(),
                layer.b.len()
            )));
        }
        let what = format!("layer {i}");
        flat.push(
            layer
                .w
                .iter()
                .map(|v| finite_value(v, &what))
                .collect::<Result<_>>()?,
        );
        flat.push(
            layer
                .b
                .iter()
                .map(|v| finite_value(v, &what))
                .collect::<Result<_>>()?,
        );
    }
    let mut params = CrnParameters::zeros();
    // Layer-by-layer copy in storage order: w1, b1, w2, b2, w3, b3.
    params.w1.as_flattened_mut().copy_from_slice(&flat[0]);
    params.b1.copy_from_slice(&flat[1]);
    params.w2.as_flattened_mut().copy_from_slice(&flat[2]);
    params.b2.copy_from_slice(&flat[3]);
    params.w3.copy_from_slice(&flat[4]);
    params.b3 = flat[5][0];
    Ok((params, tau))
}

pub fn save_model(params: &CrnParameters, tau: f64, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(params, tau)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(CrnParameters, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}
