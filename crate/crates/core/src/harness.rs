//! Simulation studies, synthetic data, augmentation, and training.
//!
//! The simulation tabulates the three losses on interpolated score
//! volumes: at `t = 0` the foreground and background score distributions
//! coincide at Normal(0.5, 0.25) and at `t = 1` scores equal the truth
//! exactly, both clipped to [0, 1].

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    hard_dice_metric, pcc_loss_value, cross_entropy_value, LossConfig, LossKind, PredictionBatch,
};
use crate::segnet::{Model, Param, RunMode};
use crate::tensor::Tensor;
use crate::{Graph, Scalar};

fn default_image_len() -> usize {
    100
}
fn default_m_list() -> Vec<usize> {
    vec![5, 20, 50, 100]
}
fn default_steps() -> usize {
    101
}

/// Loss-trajectory simulation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_image_len")]
    pub image_len: usize,
    #[serde(default = "default_m_list")]
    pub m_list: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            image_len: default_image_len(),
            m_list: default_m_list(),
            steps: default_steps(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config("steps must be at least 2".into()));
        }
        if self.m_list.is_empty() {
            return Err(Error::Config("m_list must be nonempty".into()));
        }
        for &m in &self.m_list {
            if m == 0 || m > self.image_len {
                return Err(Error::Config(format!(
                    "object side {} outside [1, {}]",
                    m, self.image_len
                )));
            }
        }
        Ok(())
    }
}

fn default_rot_deg() -> f64 {
    30.0
}
fn default_shift_frac() -> f64 {
    0.2
}
fn default_scale_range() -> [f64; 2] {
    [0.8, 1.2]
}
fn default_prob() -> f64 {
    0.8
}

/// Random affine augmentation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_rot_deg")]
    pub rot_deg: f64,
    #[serde(default = "default_shift_frac")]
    pub shift_frac: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default = "default_prob")]
    pub prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_deg: default_rot_deg(),
            shift_frac: default_shift_frac(),
            scale_range: default_scale_range(),
            prob: default_prob(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.prob
            )));
        }
        if self.scale_range[0] <= 0.0 || self.scale_range[1] < self.scale_range[0] {
            return Err(Error::Config(format!(
                "scale range {:?} must be positive and ordered",
                self.scale_range
            )));
        }
        Ok(())
    }
}

/// Draw a clipped normal; a zero standard deviation collapses to the mean.
fn clipped_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let v = if sd == 0.0 {
        mean
    } else {
        Normal::new(mean, sd).unwrap().sample(rng)
    };
    v.clamp(0.0, 1.0)
}

/// Sample an interpolated score volume and its binary truth.
///
/// Foreground voxels draw from Normal(0.5+0.5t, (0.5(1-t))^2) and
/// background from Normal(0.5(1-t), (0.5(1-t))^2), clipped to [0, 1];
/// the truth is a centered m-cube of ones.
pub fn simulate_scores(
    m: usize,
    t: f64,
    image_len: usize,
    seed: u64,
) -> Result<(Tensor<f64>, Vec<u8>)> {
    if m == 0 || m > image_len {
        return Err(Error::Invalid(format!(
            "object side {} outside [1, {}]",
            m, image_len
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t={} outside [0, 1]", t)));
    }
    let n = image_len;
    let lo = (n - m) / 2;
    let hi = lo + m;
    let fg_mean = 0.5 + 0.5 * t;
    let bg_mean = 0.5 * (1.0 - t);
    let sd = 0.5 * (1.0 - t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Tensor::zeros(&[n, n, n]);
    let mut truth = vec![0u8; n * n * n];
    let data = scores.data_mut();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let idx = (x * n + y) * n + z;
                let fg = x >= lo && x < hi && y >= lo && y < hi && z >= lo && z < hi;
                truth[idx] = fg as u8;
                let mean = if fg { fg_mean } else { bg_mean };
                data[idx] = clipped_normal(&mut rng, mean, sd);
            }
        }
    }
    Ok((scores, truth))
}

/// One row of the loss-trajectory table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub m: usize,
    pub t: f64,
    pub l_pcc: f64,
    pub l_dice: f64,
    pub l_ce: f64,
}

/// Soft Dice loss of a single raw channel, epsilon in both terms.
pub fn soft_dice_loss(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().zip(y).map(|(a, b)| a + b).sum();
    1.0 - (2.0 * inter + eps) / (total + eps)
}

/// Tabulate the three losses over the (m, t) grid with one seeded score
/// draw per point. PCC and cross-entropy use a two-channel
/// background/foreground formulation; Dice uses the foreground channel.
pub fn loss_trajectory(cfg: &SimConfig) -> Result<Vec<TrajectoryRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.m_list.len() * cfg.steps);
    let loss_cfg = LossConfig::default();
    for (mi, &m) in cfg.m_list.iter().enumerate() {
        for step in 0..cfg.steps {
            let t = step as f64 / (cfg.steps - 1) as f64;
            let point_seed = cfg
                .seed
                .wrapping_add((mi as u64) << 32)
                .wrapping_add(step as u64);
            let (scores, truth) = simulate_scores(m, t, cfg.image_len, point_seed)?;
            let voxels = scores.len();
            let fg = scores.data();
            let y_fg: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
            let l_dice = soft_dice_loss(fg, &y_fg, crate::scalar::s(1e-7));

            let mut two_scores = Tensor::zeros(&[1, 2, cfg.image_len, cfg.image_len, cfg.image_len]);
            let mut two_truth = two_scores.clone();
            {
                let sd = two_scores.data_mut();
                for i in 0..voxels {
                    sd[i] = 1.0 - fg[i];
                    sd[voxels + i] = fg[i];
                }
                let td = two_truth.data_mut();
                for i in 0..voxels {
                    td[i] = 1.0 - y_fg[i];
                    td[voxels + i] = y_fg[i];
                }
            }
            let batch = PredictionBatch::new(two_scores, two_truth)?;
            rows.push(TrajectoryRow {
                m,
                t,
                l_pcc: pcc_loss_value(&batch, loss_cfg),
                l_dice,
                l_ce: cross_entropy_value(&batch),
            });
        }
    }
    Ok(rows)
}

/// Tabulate the two-part sinusoidal factor
/// `A_re cos(2 pi f_re x + psi) + A_im sin(2 pi f_im x + psi)`.
pub fn sinusoid_curves(
    a_re: f64,
    a_im: f64,
    f_re: f64,
    f_im: f64,
    psi: f64,
    x_range: (f64, f64),
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    if samples < 2 {
        return Err(Error::Invalid("at least 2 samples required".into()));
    }
    let tau = std::f64::consts::TAU;
    Ok((0..samples)
        .map(|i| {
            let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / (samples - 1) as f64;
            let v = a_re * (tau * f_re * x + psi).cos() + a_im * (tau * f_im * x + psi).sin();
            (x, v)
        })
        .collect())
}

/// A labeled volume: intensity image and per-voxel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn shape(&self) -> &[usize] {
        self.image.shape()
    }
}

const PLACEMENT_RETRIES: usize = 200;

/// Generate volumes with `labels - 1` non-overlapping objects (spheres and
/// cuboids alternating) of distinct mean intensities over a zero
/// background, plus Gaussian noise of standard deviation 0.1.
pub fn synth_dataset(n_volumes: usize, side: usize, labels: usize, seed: u64) -> Result<Vec<Sample>> {
    if labels < 2 {
        return Err(Error::Invalid("at least two labels required".into()));
    }
    if labels > 256 {
        return Err(Error::Invalid("too many labels for u8 maps".into()));
    }
    if side < 8 {
        return Err(Error::Invalid("volume side must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let objects = labels - 1;
    let r_min = (side as f64 / 8.0).max(2.0);
    let r_max = side as f64 / 5.0;
    let mut out = Vec::with_capacity(n_volumes);
    for _ in 0..n_volumes {
        let mut label_map = vec![0u8; side * side * side];
        for obj in 0..objects {
            let label = (obj + 1) as u8;
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let r = rng.gen_range(r_min..=r_max);
                let margin = r.ceil() as usize + 1;
                if 2 * margin >= side {
                    continue;
                }
                let c: Vec<f64> = (0..3)
                    .map(|_| rng.gen_range(margin as f64..(side - margin) as f64))
                    .collect();
                let sphere = obj % 2 == 0;
                let voxels = object_voxels(side, &c, r, sphere);
                if voxels.iter().any(|&i| label_map[i] != 0) {
                    continue;
                }
                for &i in &voxels {
                    label_map[i] = label;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Invalid(format!(
                    "could not place object {} without overlap after {} retries",
                    label, PLACEMENT_RETRIES
                )));
            }
        }
        let mut image = Tensor::zeros(&[side, side, side]);
        let data = image.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let base = match label_map[i] {
                0 => 0.0,
                l => object_intensity(l as usize, labels),
            };
            *v = base + noise.sample(&mut rng);
        }
        out.push(Sample {
            image,
            labels: label_map,
        });
    }
    Ok(out)
}

/// Mean intensity assigned to an object label, spread over [0.4, 1].
fn object_intensity(label: usize, labels: usize) -> f64 {
    if labels == 2 {
        1.0
    } else {
        0.4 + 0.6 * (label - 1) as f64 / (labels - 2) as f64
    }
}

fn object_voxels(side: usize, c: &[f64], r: f64, sphere: bool) -> Vec<usize> {
    let lo = |v: f64| ((v - r).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + r).ceil().min((side - 1) as f64)) as usize;
    let mut out = Vec::new();
    for x in lo(c[0])..=hi(c[0]) {
        for y in lo(c[1])..=hi(c[1]) {
            for z in lo(c[2])..=hi(c[2]) {
                let inside = if sphere {
                    let dx = x as f64 - c[0];
                    let dy = y as f64 - c[1];
                    let dz = z as f64 - c[2];
                    dx * dx + dy * dy + dz * dz <= r * r
                } else {
                    // cuboid: box of half-extent r in each axis
                    true
                };
                if inside {
                    out.push((x * side + y) * side + z);
                }
            }
        }
    }
    out
}

/// Apply (with probability `prob`) one random affine transform: axial
/// rotation about the z-axis, per-axis shift, isotropic scale. The image
/// resamples trilinearly, labels by nearest neighbor; out-of-bounds
/// voxels take the background (0).
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    if sample.image.len() != sample.labels.len() {
        return Err(Error::Shape(
            "image and label volumes differ in extent".into(),
        ));
    }
    if cfg.prob == 0.0 || !rng.gen_bool(cfg.prob) {
        return Ok(sample.clone());
    }
    let shape = sample.image.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape("augment expects [D, H, W] volumes".into()));
    }
    let theta = rng.gen_range(-cfg.rot_deg..=cfg.rot_deg).to_radians();
    let shift: Vec<f64> = shape
        .iter()
        .map(|&e| rng.gen_range(-cfg.shift_frac..=cfg.shift_frac) * e as f64)
        .collect();
    let scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let (sin, cos) = theta.sin_cos();
    let center: Vec<f64> = shape.iter().map(|&e| (e as f64 - 1.0) / 2.0).collect();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let src = sample.image.data();
    let mut image = Tensor::zeros(&shape);
    let out = image.data_mut();
    let mut labels = vec![0u8; d * h * w];
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                // invert the forward transform (rotate about z, scale,
                // shift) to find the source coordinate
                let px = (x as f64 - center[0] - shift[0]) / scale;
                let py = (y as f64 - center[1] - shift[1]) / scale;
                let pz = (z as f64 - center[2] - shift[2]) / scale;
                let sx = cos * px + sin * py + center[0];
                let sy = -sin * px + cos * py + center[1];
                let sz = pz + center[2];
                let idx = (x * h + y) * w + z;
                out[idx] = trilinear(src, d, h, w, sx, sy, sz);
                labels[idx] = nearest_label(&sample.labels, d, h, w, sx, sy, sz);
            }
        }
    }
    Ok(Sample { image, labels })
}

fn trilinear(src: &[f64], d: usize, h: usize, w: usize, x: f64, y: f64, z: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let mut acc = 0.0;
    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
                let weight = wx * wy * wz;
                if weight == 0.0 {
                    continue;
                }
                let (ix, iy, iz) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                let v = if ix < 0
                    || iy < 0
                    || iz < 0
                    || ix >= d as i64
                    || iy >= h as i64
                    || iz >= w as i64
                {
                    0.0
                } else {
                    src[((ix as usize) * h + iy as usize) * w + iz as usize]
                };
                acc += weight * v;
            }
        }
    }
    acc
}

fn nearest_label(src: &[u8], d: usize, h: usize, w: usize, x: f64, y: f64, z: f64) -> u8 {
    let ix = x.round() as i64;
    let iy = y.round() as i64;
    let iz = z.round() as i64;
    if ix < 0 || iy < 0 || iz < 0 || ix >= d as i64 || iy >= h as i64 || iz >= w as i64 {
        0
    } else {
        src[((ix as usize) * h + iy as usize) * w + iz as usize]
    }
}

/// The learning-rate grid exposed as presets.
pub fn lr_grid() -> [f64; 5] {
    [1e-4, 10f64.powf(-3.5), 1e-3, 10f64.powf(-2.5), 1e-2]
}

/// Nesterov-Adam optimizer state over a parameter list.
#[derive(Debug, Clone)]
pub struct NadamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> NadamState<T> {
    pub fn new(lr: T, shapes: &[Vec<usize>]) -> Self {
        NadamState {
            lr,
            beta1: crate::scalar::s(0.9),
            beta2: crate::scalar::s(0.999),
            eps: crate::scalar::s(1e-8),
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: T, params: &[Param<T>]) -> Self {
        Self::new(
            lr,
            &params
                .iter()
                .map(|p| p.tensor.shape().to_vec())
                .collect::<Vec<_>>(),
        )
    }

    /// One update: m and v are exponential moving averages of the gradient
    /// and its square; the step uses the Nesterov look-ahead blend of the
    /// bias-corrected first moment and the raw gradient.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let one = T::one();
        let b1 = self.beta1;
        let b2 = self.beta2;
        let t = T::from_u64(self.t).unwrap();
        let bc1 = one - b1.powf(t);
        let bc2 = one - b2.powf(t);
        for i in 0..params.len() {
            if params[i].tensor.shape() != grads[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    grads[i].shape(),
                    params[i].tensor.shape()
                )));
            }
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let gd = grads[i].data();
            let pd = params[i].tensor.data_mut();
            for j in 0..gd.len() {
                let g = gd[j];
                md[j] = b1 * md[j] + (one - b1) * g;
                vd[j] = b2 * vd[j] + (one - b2) * g * g;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                let blend = b1 * m_hat + (one - b1) * g / bc1;
                pd[j] -= self.lr * blend / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Training settings for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Augmentation applied to training volumes; absent disables it.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

/// Per-epoch metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameter snapshot from the epoch with the best validation Dice.
    pub best_params: Vec<Tensor<f64>>,
    pub best_epoch: Option<usize>,
    /// Set when a non-finite loss halted the run; `diagnostic` explains.
    pub diverged: bool,
    pub diagnostic: Option<String>,
}

/// Mean hard Dice over foreground labels of model predictions on a set.
pub fn mean_foreground_dice(model: &Model<f64>, set: &[Sample]) -> Result<f64> {
    let labels = model.config().labels;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in set {
        let pred = model.predict_labels(&s.image)?;
        let dice = hard_dice_metric(&pred, &s.labels, labels)?;
        for d in &dice[1..] {
            total += d;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn one_hot_truth(batch: &[&Sample], labels: usize) -> Tensor<f64> {
    let spatial: usize = batch[0].shape().iter().product();
    let mut shape = vec![batch.len(), labels];
    shape.extend_from_slice(batch[0].shape());
    let mut t = Tensor::zeros(&shape);
    let data = t.data_mut();
    for (n, s) in batch.iter().enumerate() {
        let base = n * labels * spatial;
        for (i, &l) in s.labels.iter().enumerate() {
            data[base + (l as usize) * spatial + i] = 1.0;
        }
    }
    t
}

fn stack_images(batch: &[&Sample]) -> Tensor<f64> {
    let spatial: usize = batch[0].shape().iter().product();
    let mut shape = vec![batch.len(), 1];
    shape.extend_from_slice(batch[0].shape());
    let mut t = Tensor::zeros(&shape);
    let data = t.data_mut();
    for (n, s) in batch.iter().enumerate() {
        data[n * spatial..(n + 1) * spatial].copy_from_slice(s.image.data());
    }
    t
}

/// Train a model in place. Records per-epoch mean train loss and
/// validation hard Dice; keeps the best-validation parameter snapshot.
/// A non-finite loss halts the run with a diagnostic instead of crashing.
pub fn train(
    model: &mut Model<f64>,
    train_set: &[Sample],
    val_set: &[Sample],
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    if let Some(a) = &cfg.augment {
        a.validate()?;
    }
    let labels = model.config().labels;
    let loss_cfg = LossConfig::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(
        cfg.augment.as_ref().map(|a| a.seed).unwrap_or(0),
    );
    let mut opt = NadamState::for_params(cfg.lr, &model.params);
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_params: model.params.iter().map(|p| p.tensor.clone()).collect(),
        best_epoch: None,
        diverged: false,
        diagnostic: None,
    };
    let mut best_dice = f64::NEG_INFINITY;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => augment(&train_set[i], a, &mut aug_rng),
                    None => Ok(train_set[i].clone()),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let input = stack_images(&refs);
            let truth = one_hot_truth(&refs, labels);
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &input, RunMode::Train, &mut dropout_rng)?;
            let loss_var = loss.attach(&mut g, pass.scores, &truth, loss_cfg)?;
            let loss_val = g.value(loss_var).item();
            if !loss_val.is_finite() {
                outcome.diverged = true;
                outcome.diagnostic = Some(format!(
                    "non-finite loss {} at epoch {}; run halted",
                    loss_val, epoch
                ));
                break 'epochs;
            }
            epoch_loss += loss_val;
            batches += 1;
            g.backward(loss_var)?;
            let grads: Vec<Tensor<f64>> = pass
                .param_vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
                })
                .collect();
            opt.step(&mut model.params, &grads)?;
        }
        let val_dice = if val_set.is_empty() {
            f64::NAN
        } else {
            mean_foreground_dice(model, val_set)?
        };
        outcome.history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_dice,
        });
        if !val_set.is_empty() && val_dice > best_dice {
            best_dice = val_dice;
            outcome.best_epoch = Some(epoch);
            outcome.best_params = model.params.iter().map(|p| p.tensor.clone()).collect();
        }
    }
    Ok(outcome)
}

/// Overwrite a model's parameters with a snapshot from training.
pub fn restore_params(model: &mut Model<f64>, snapshot: &[Tensor<f64>]) -> Result<()> {
    if snapshot.len() != model.params.len() {
        return Err(Error::Shape("snapshot length mismatch".into()));
    }
    for (p, s) in model.params.iter_mut().zip(snapshot) {
        if p.tensor.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "snapshot shape {:?} does not match parameter {} {:?}",
                s.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = s.clone();
    }
    Ok(())
}
