//! Multi-class segmentation losses.
//!
//! All three training losses consume softmax score volumes `[n, L, D, H, W]`
//! against one-hot truth and reduce by mean over labels then mean over the
//! batch. Each is a single fused graph node with a hand-derived gradient
//! with respect to the scores.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Epsilon and reduction policy shared by the losses.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<T> {
    pub epsilon: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig { epsilon: s(1e-7) }
    }
}

/// Score clamp floor for the cross-entropy logarithm.
const CE_CLAMP: f64 = 1e-12;

/// Prediction scores paired with one-hot ground truth.
///
/// Construction validates the batch invariants: truth binary and one-hot
/// per voxel, scores in [0, 1], shapes identical and 5-d.
#[derive(Debug, Clone)]
pub struct PredictionBatch<T> {
    pub scores: Tensor<T>,
    pub truth: Tensor<T>,
}

impl<T: Scalar> PredictionBatch<T> {
    pub fn new(scores: Tensor<T>, truth: Tensor<T>) -> Result<Self> {
        validate_batch(&scores, &truth)?;
        Ok(PredictionBatch { scores, truth })
    }

    pub fn labels(&self) -> usize {
        self.scores.shape()[1]
    }
}

pub fn validate_batch<T: Scalar>(scores: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
    if scores.shape().len() != 5 {
        return Err(Error::Shape(format!(
            "scores must be [n, L, D, H, W], got {:?}",
            scores.shape()
        )));
    }
    if scores.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "scores shape {:?} != truth shape {:?}",
            scores.shape(),
            truth.shape()
        )));
    }
    if scores
        .data()
        .iter()
        .any(|&v| v < T::zero() || v > T::one() || !v.is_finite())
    {
        return Err(Error::Invalid("scores must lie in [0, 1]".into()));
    }
    if truth
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Invalid("truth must be binary".into()));
    }
    let (n, l) = (scores.shape()[0], scores.shape()[1]);
    let spatial: usize = scores.shape()[2..].iter().product();
    for b in 0..n {
        for i in 0..spatial {
            let mut sum = T::zero();
            for c in 0..l {
                sum += truth.data()[(b * l + c) * spatial + i];
            }
            if sum != T::one() {
                return Err(Error::Invalid(
                    "truth channels must sum to 1 per voxel".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Pearson's correlation coefficient of two sample vectors.
///
/// Returns 0 when either vector is (numerically) constant.
pub fn pearson_r<T: Scalar>(p: &[T], y: &[T]) -> Result<T> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "sample vectors differ in length: {} vs {}",
            p.len(),
            y.len()
        )));
    }
    if p.len() < 2 {
        return Err(Error::Invalid(
            "pearson_r needs at least two sample pairs".into(),
        ));
    }
    let n = T::from_usize(p.len()).unwrap();
    let mut mp = T::zero();
    let mut my = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        mp += a;
        my += b;
    }
    mp /= n;
    my /= n;
    let mut cov = T::zero();
    let mut vp = T::zero();
    let mut vy = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        let da = a - mp;
        let db = b - my;
        cov += da * db;
        vp += da * da;
        vy += db * db;
    }
    let denom2 = vp * vy;
    if denom2 <= T::EPSILON_DIV {
        return Ok(T::zero());
    }
    Ok(cov / denom2.sqrt())
}

/// Per-(sample, label) sufficient statistics of a flattened channel.
struct ChannelStats<T> {
    cov: T,
    var_p: T,
    var_y: T,
    mean_p: T,
    mean_y: T,
}

fn channel_stats<T: Scalar>(p: &[T], y: &[T]) -> ChannelStats<T> {
    let n = T::from_usize(p.len()).unwrap();
    let mut mp = T::zero();
    let mut my = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        mp += a;
        my += b;
    }
    mp /= n;
    my /= n;
    let mut cov = T::zero();
    let mut vp = T::zero();
    let mut vy = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        let da = a - mp;
        let db = b - my;
        cov += da * db;
        vp += da * da;
        vy += db * db;
    }
    ChannelStats {
        cov,
        var_p: vp,
        var_y: vy,
        mean_p: mp,
        mean_y: my,
    }
}

impl<T: Scalar> Graph<T> {
    /// PCC loss: mean over labels and batch of `1 - 0.5(r + 1)` with the
    /// epsilon inside the square root of the denominator.
    ///
    /// 0 is perfect prediction, 0.5 random, 1 total disagreement. Labels
    /// that are constant in scores or truth (e.g. missing labels)
    /// contribute exactly 0.5.
    pub fn pcc_loss(&mut self, scores: Var, truth: &Tensor<T>, cfg: LossConfig<T>) -> Result<Var> {
        validate_batch(self.value(scores), truth)?;
        let (n, l) = (truth.shape()[0], truth.shape()[1]);
        let spatial: usize = truth.shape()[2..].iter().product();
        let eps = cfg.epsilon;
        let half = s::<T>(0.5);
        let norm = T::from_usize(n * l).unwrap().recip();
        let mut loss = T::zero();
        {
            let pd = self.value(scores).data();
            let yd = truth.data();
            for ch in 0..n * l {
                let sl = ch * spatial..(ch + 1) * spatial;
                let st = channel_stats(&pd[sl.clone()], &yd[sl]);
                let r = st.cov / (st.var_p * st.var_y + eps).sqrt();
                loss += T::one() - half * (r + T::one());
            }
        }
        let truth_copy = truth.clone();
        Ok(self.push_op(
            Tensor::scalar(loss * norm),
            vec![scores],
            Box::new(move |ctx| {
                let pd = ctx.inputs[0].data();
                let yd = truth_copy.data();
                let gout = ctx.grad.item();
                let mut dp = Tensor::zeros(ctx.inputs[0].shape());
                let dpd = dp.data_mut();
                for ch in 0..n * l {
                    let base = ch * spatial;
                    let st = channel_stats(
                        &pd[base..base + spatial],
                        &yd[base..base + spatial],
                    );
                    let d2 = st.var_p * st.var_y + eps;
                    let d = d2.sqrt();
                    let scale = -half * norm * gout;
                    // dr/dp_i = (y_i - ȳ)/D - cov·var_y·(p_i - p̄)/D³
                    for i in 0..spatial {
                        let dy = yd[base + i] - st.mean_y;
                        let dpv = pd[base + i] - st.mean_p;
                        dpd[base + i] = scale * (dy / d - st.cov * st.var_y * dpv / (d2 * d));
                    }
                }
                vec![dp]
            }),
        ))
    }

    /// Soft Dice loss: mean over labels and batch of `1 - Dice_l` with
    /// epsilon in numerator and denominator.
    pub fn dice_loss(&mut self, scores: Var, truth: &Tensor<T>, cfg: LossConfig<T>) -> Result<Var> {
        validate_batch(self.value(scores), truth)?;
        let (n, l) = (truth.shape()[0], truth.shape()[1]);
        let spatial: usize = truth.shape()[2..].iter().product();
        let eps = cfg.epsilon;
        let two = s::<T>(2.0);
        let norm = T::from_usize(n * l).unwrap().recip();
        let mut loss = T::zero();
        {
            let pd = self.value(scores).data();
            let yd = truth.data();
            for ch in 0..n * l {
                let base = ch * spatial;
                let mut inter = T::zero();
                let mut total = T::zero();
                for i in 0..spatial {
                    inter += pd[base + i] * yd[base + i];
                    total += pd[base + i] + yd[base + i];
                }
                let dice = (two * inter + eps) / (total + eps);
                loss += T::one() - dice;
            }
        }
        let truth_copy = truth.clone();
        Ok(self.push_op(
            Tensor::scalar(loss * norm),
            vec![scores],
            Box::new(move |ctx| {
                let pd = ctx.inputs[0].data();
                let yd = truth_copy.data();
                let gout = ctx.grad.item();
                let mut dp = Tensor::zeros(ctx.inputs[0].shape());
                let dpd = dp.data_mut();
                for ch in 0..n * l {
                    let base = ch * spatial;
                    let mut inter = T::zero();
                    let mut total = T::zero();
                    for i in 0..spatial {
                        inter += pd[base + i] * yd[base + i];
                        total += pd[base + i] + yd[base + i];
                    }
                    let num = two * inter + eps;
                    let den = total + eps;
                    let scale = -norm * gout;
                    for i in 0..spatial {
                        dpd[base + i] = scale * (two * yd[base + i] / den - num / (den * den));
                    }
                }
                vec![dp]
            }),
        ))
    }

    /// Categorical cross-entropy on softmax scores, mean over all voxels,
    /// with scores clamped at 1e-12 before the logarithm.
    pub fn cross_entropy(&mut self, scores: Var, truth: &Tensor<T>) -> Result<Var> {
        validate_batch(self.value(scores), truth)?;
        let (n, l) = (truth.shape()[0], truth.shape()[1]);
        let spatial: usize = truth.shape()[2..].iter().product();
        let clamp = s::<T>(CE_CLAMP);
        let norm = T::from_usize(n * spatial).unwrap().recip();
        let mut loss = T::zero();
        {
            let pd = self.value(scores).data();
            let yd = truth.data();
            for b in 0..n {
                for c in 0..l {
                    let base = (b * l + c) * spatial;
                    for i in 0..spatial {
                        if yd[base + i] != T::zero() {
                            loss -= yd[base + i] * pd[base + i].max(clamp).ln();
                        }
                    }
                }
            }
        }
        let truth_copy = truth.clone();
        Ok(self.push_op(
            Tensor::scalar(loss * norm),
            vec![scores],
            Box::new(move |ctx| {
                let pd = ctx.inputs[0].data();
                let yd = truth_copy.data();
                let gout = ctx.grad.item();
                let mut dp = Tensor::zeros(ctx.inputs[0].shape());
                let dpd = dp.data_mut();
                for i in 0..pd.len() {
                    if yd[i] != T::zero() && pd[i] > clamp {
                        dpd[i] = -gout * norm * yd[i] / pd[i];
                    }
                }
                vec![dp]
            }),
        ))
    }
}

/// Per-label binary Dice coefficients of two integer label volumes.
///
/// Labels absent from both volumes score 1.
pub fn hard_dice_metric(pred: &[u8], truth: &[u8], labels: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "label volumes differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if labels == 0 || labels > 256 {
        return Err(Error::Invalid(format!("label count {} out of range", labels)));
    }
    for &v in pred.iter().chain(truth.iter()) {
        if v as usize >= labels {
            return Err(Error::Invalid(format!(
                "label value {} out of range [0, {})",
                v, labels
            )));
        }
    }
    let mut inter = vec![0usize; labels];
    let mut np = vec![0usize; labels];
    let mut nt = vec![0usize; labels];
    for (&a, &b) in pred.iter().zip(truth) {
        np[a as usize] += 1;
        nt[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    Ok((0..labels)
        .map(|c| {
            let denom = np[c] + nt[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Evaluate the PCC loss value outside a graph.
pub fn pcc_loss_value<T: Scalar>(batch: &PredictionBatch<T>, cfg: LossConfig<T>) -> T {
    let mut g = Graph::new();
    let sv = g.constant(batch.scores.clone());
    let l = g.pcc_loss(sv, &batch.truth, cfg).unwrap();
    g.value(l).item()
}

/// Evaluate the Dice loss value outside a graph.
pub fn dice_loss_value<T: Scalar>(batch: &PredictionBatch<T>, cfg: LossConfig<T>) -> T {
    let mut g = Graph::new();
    let sv = g.constant(batch.scores.clone());
    let l = g.dice_loss(sv, &batch.truth, cfg).unwrap();
    g.value(l).item()
}

/// Evaluate the cross-entropy value outside a graph.
pub fn cross_entropy_value<T: Scalar>(batch: &PredictionBatch<T>) -> T {
    let mut g = Graph::new();
    let sv = g.constant(batch.scores.clone());
    let l = g.cross_entropy(sv, &batch.truth).unwrap();
    g.value(l).item()
}

/// Loss selector shared by the trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Pcc,
    Dice,
    Ce,
}

impl LossKind {
    pub fn attach<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        scores: Var,
        truth: &Tensor<T>,
        cfg: LossConfig<T>,
    ) -> Result<Var> {
        match self {
            LossKind::Pcc => g.pcc_loss(scores, truth, cfg),
            LossKind::Dice => g.dice_loss(scores, truth, cfg),
            LossKind::Ce => g.cross_entropy(scores, truth),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(v: &str) -> Result<Self> {
        match v {
            "pcc" => Ok(LossKind::Pcc),
            "dice" => Ok(LossKind::Dice),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::Invalid(format!(
                "unknown loss '{}', expected pcc|dice|ce",
                other
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_error};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Matthews correlation coefficient from the confusion matrix; the
    /// independent oracle for binary Pearson correlation.
    fn mcc_oracle(p: &[f64], y: &[f64]) -> f64 {
        let (mut tp, mut tn, mut fp, mut fn_) = (0f64, 0f64, 0f64, 0f64);
        for (&a, &b) in p.iter().zip(y) {
            match (a > 0.5, b > 0.5) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        (tp * tn - fp * fn_) / denom
    }

    fn one_hot_batch(
        n: usize,
        l: usize,
        spatial: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let sp: usize = spatial.iter().product();
        let mut shape = vec![n, l];
        shape.extend_from_slice(spatial);
        let mut truth = Tensor::zeros(&shape);
        let mut scores = Tensor::zeros(&shape);
        for b in 0..n {
            for i in 0..sp {
                let c = rng.gen_range(0..l);
                truth.data_mut()[(b * l + c) * sp + i] = 1.0;
                let mut raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter_mut().for_each(|v| *v /= total);
                for (c2, v) in raw.into_iter().enumerate() {
                    scores.data_mut()[(b * l + c2) * sp + i] = v;
                }
            }
        }
        (scores, truth)
    }

    #[test]
    fn pearson_basic_cases() {
        let y: Vec<f64> = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        assert!((pearson_r(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!((pearson_r(&anti, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_r(&y[..1], &y[..1]).is_err());
        let constant = vec![0.3; 5];
        assert_eq!(pearson_r(&constant, &y).unwrap(), 0.0);
    }

    #[test]
    fn pearson_equals_mcc_on_binary_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tested = 0;
        while tested < 200 {
            let p: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let y: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.3))).collect();
            if p.iter().all(|&v| v == p[0]) || y.iter().all(|&v| v == y[0]) {
                continue;
            }
            let r = pearson_r(&p, &y).unwrap();
            assert!((r - mcc_oracle(&p, &y)).abs() <= 1e-9);
            tested += 1;
        }
    }

    proptest! {
        #[test]
        fn pearson_symmetry_and_affine(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r = pearson_r(&p, &y).unwrap();
            prop_assert_eq!(r, pearson_r(&y, &p).unwrap());
            for a in [2.0f64, -0.5, 1e-3] {
                let scaled: Vec<f64> = p.iter().map(|v| a * v + 0.7).collect();
                let rs = pearson_r(&scaled, &y).unwrap();
                prop_assert!((rs - a.signum() * r).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn pcc_loss_perfect_and_missing_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, truth) = one_hot_batch(1, 3, &[4, 4, 4], &mut rng);
        let batch = PredictionBatch::new(truth.clone(), truth.clone()).unwrap();
        let loss = pcc_loss_value(&batch, LossConfig::default());
        assert!(loss <= 1e-9, "perfect prediction loss {}", loss);

        // one-hot truth concentrated on label 0: labels 1, 2 missing
        let mut t2 = Tensor::zeros(&[1, 3, 2, 2, 2]);
        for i in 0..8 {
            t2.data_mut()[i] = 1.0;
        }
        let mut scores = Tensor::zeros(&[1, 3, 2, 2, 2]);
        for i in 0..8 {
            scores.data_mut()[i] = if i % 2 == 0 { 0.9 } else { 0.8 };
            scores.data_mut()[8 + i] = if i % 2 == 0 { 0.1 } else { 0.2 };
        }
        let b2 = PredictionBatch::new(scores, t2).unwrap();
        let mut g = Graph::<f64>::new();
        let sv = g.constant(b2.scores.clone());
        let l = g.pcc_loss(sv, &b2.truth, LossConfig::default()).unwrap();
        // labels 1 and 2 contribute exactly 0.5 each
        let label0 = {
            let p: Vec<f64> = b2.scores.data()[..8].to_vec();
            let y: Vec<f64> = b2.truth.data()[..8].to_vec();
            let st = channel_stats(&p, &y);
            let r = st.cov / (st.var_p * st.var_y + 1e-7).sqrt();
            1.0 - 0.5 * (r + 1.0)
        };
        let want = (label0 + 0.5 + 0.5) / 3.0;
        assert!((g.value(l).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn pcc_loss_random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n_vox = 100_000usize;
        let mut truth = Tensor::zeros(&[1, 2, 1, 1, n_vox]);
        let mut scores = Tensor::zeros(&[1, 2, 1, 1, n_vox]);
        for i in 0..n_vox {
            let fg = rng.gen_bool(0.3);
            truth.data_mut()[if fg { n_vox + i } else { i }] = 1.0;
            let p: f64 = rng.gen_range(0.0..1.0);
            scores.data_mut()[i] = 1.0 - p;
            scores.data_mut()[n_vox + i] = p;
        }
        let batch = PredictionBatch::new(scores, truth).unwrap();
        let loss = pcc_loss_value(&batch, LossConfig::default());
        assert!((loss - 0.5).abs() <= 0.02, "random loss {}", loss);
    }

    #[test]
    fn dice_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, truth) = one_hot_batch(1, 3, &[3, 3, 3], &mut rng);
        let batch = PredictionBatch::new(truth.clone(), truth.clone()).unwrap();
        assert!(dice_loss_value(&batch, LossConfig::default()) <= 1e-9);

        // all-zero scores and truth on a channel: Dice = eps/eps = 1
        let mut truth2 = Tensor::zeros(&[1, 2, 2, 2, 2]);
        for i in 0..8 {
            truth2.data_mut()[i] = 1.0;
        }
        let scores2 = truth2.clone();
        let b2 = PredictionBatch::new(scores2, truth2).unwrap();
        assert!(dice_loss_value(&b2, LossConfig::default()) <= 1e-9);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, truth) = one_hot_batch(1, 4, &[3, 3, 3], &mut rng);
        let batch = PredictionBatch::new(truth.clone(), truth.clone()).unwrap();
        let perfect = cross_entropy_value(&batch);
        assert!(perfect.abs() <= 1e-9);

        let uniform = Tensor::full(&[1, 4, 3, 3, 3], 0.25);
        let b2 = PredictionBatch::new(uniform, truth.clone()).unwrap();
        assert!((cross_entropy_value(&b2) - 4.0f64.ln()).abs() <= 1e-12);

        // random batch vs direct summation oracle
        let (scores, truth) = one_hot_batch(2, 3, &[2, 2, 2], &mut rng);
        let b3 = PredictionBatch::new(scores.clone(), truth.clone()).unwrap();
        let mut oracle = 0.0;
        for i in 0..scores.len() {
            if truth.data()[i] != 0.0 {
                oracle -= scores.data()[i].ln();
            }
        }
        oracle /= 16.0;
        assert!((cross_entropy_value(&b3) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (scores, truth) = one_hot_batch(2, 3, &[3, 3, 3], &mut rng);
        for kind in [LossKind::Pcc, LossKind::Dice, LossKind::Ce] {
            let run = |p: &Tensor<f64>| {
                let mut g = Graph::<f64>::new();
                let sv = g.leaf(p.clone());
                let l = kind.attach(&mut g, sv, &truth, LossConfig::default()).unwrap();
                (g, sv, l)
            };
            let (mut g, sv, l) = run(&scores);
            g.backward(l).unwrap();
            let fd = finite_diff_grad(
                |t| {
                    let (gr, _, l) = run(t);
                    gr.value(l).item()
                },
                &scores,
                1e-5,
            );
            let err = max_rel_error(g.grad(sv).unwrap(), &fd);
            assert!(err <= 1e-4, "{:?} gradient error {}", kind, err);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn loss_ranges(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (scores, truth) = one_hot_batch(1, 3, &[2, 2, 2], &mut rng);
            let batch = PredictionBatch::new(scores, truth).unwrap();
            let p = pcc_loss_value(&batch, LossConfig::default());
            let d = dice_loss_value(&batch, LossConfig::default());
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&p));
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&d));
        }
    }

    #[test]
    fn binary_dice_equals_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 256;
        let mut scores = Tensor::zeros(&[1, 2, 1, 1, n]);
        let mut truth = Tensor::zeros(&[1, 2, 1, 1, n]);
        let (mut tp, mut fp, mut fn_) = (0f64, 0f64, 0f64);
        for i in 0..n {
            let p = rng.gen_bool(0.4);
            let y = rng.gen_bool(0.35);
            scores.data_mut()[if p { n + i } else { i }] = 1.0;
            truth.data_mut()[if y { n + i } else { i }] = 1.0;
            match (p, y) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        // soft Dice on the binary foreground channel, per its definition
        let inter: f64 = scores.data()[n..]
            .iter()
            .zip(&truth.data()[n..])
            .map(|(a, b)| a * b)
            .sum();
        let total: f64 =
            scores.data()[n..].iter().sum::<f64>() + truth.data()[n..].iter().sum::<f64>();
        let dice = (2.0 * inter + 1e-12) / (total + 1e-12);
        assert!((dice - f1).abs() <= 1e-9);
    }

    #[test]
    fn hard_dice_cases() {
        let a = vec![0u8, 1, 1, 2, 0, 2];
        assert_eq!(hard_dice_metric(&a, &a, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        let p = vec![1u8, 1, 0, 0];
        let t = vec![0u8, 0, 1, 1];
        let d = hard_dice_metric(&p, &t, 2).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        // label absent from both scores 1
        let d2 = hard_dice_metric(&p, &t, 3).unwrap();
        assert_eq!(d2[2], 1.0);
        // half-overlapping equal-size masks
        let p3 = vec![1u8, 1, 0, 0];
        let t3 = vec![1u8, 0, 1, 0];
        let d3 = hard_dice_metric(&p3, &t3, 2).unwrap();
        assert!((d3[1] - 0.5).abs() < 1e-12);
        assert!(hard_dice_metric(&[3u8], &[0u8], 3).is_err());
    }

    #[test]
    fn batch_validation_rejects_bad_inputs() {
        let ok = Tensor::zeros(&[1, 2, 2, 2, 2]);
        let mut one_hot = Tensor::zeros(&[1, 2, 2, 2, 2]);
        for i in 0..8 {
            one_hot.data_mut()[i] = 1.0;
        }
        assert!(PredictionBatch::new(ok.clone(), one_hot.clone()).is_ok());
        // truth not one-hot
        assert!(PredictionBatch::new(ok.clone(), ok.clone()).is_err());
        // scores out of range
        let mut bad = ok.clone();
        bad.data_mut()[0] = 1.5;
        assert!(PredictionBatch::new(bad, one_hot).is_err());
    }
}
