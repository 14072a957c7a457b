//! Analytic-versus-numeric gradient verification suites.
//!
//! Three suites, all in 64-bit with central differences of step 1e-5 and
//! a relative tolerance of 1e-4:
//! (a) each of the eight Gabor kernel parameters, differentiated through
//!     bank materialization, convolution, softmax, and the PCC loss;
//! (b) the three losses with respect to the score volume;
//! (c) a tiny two-level end-to-end model, spot-checked on sampled
//!     parameters covering every Gabor scalar type.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, Graph, Padding};
use crate::error::Result;
use crate::gabor::{init_gabor, GABOR_PARAMS};
use crate::losses::{LossConfig, LossKind};
use crate::segnet::{build_network, KernelMode, Model, NetworkConfig, RunMode};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One checked quantity.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Results of all suites.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    /// One line per entry plus a verdict, stable across identical runs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} max_rel_err={}\n",
                if e.pass { "pass" } else { "FAIL" },
                e.name,
                crate::io::format_real(e.max_rel_err),
            ));
        }
        out.push_str(&format!(
            "{}: {} of {} checks within {}\n",
            if self.all_pass() { "PASS" } else { "FAIL" },
            self.entries.iter().filter(|e| e.pass).count(),
            self.entries.len(),
            crate::io::format_real(GRADCHECK_TOL),
        ));
        out
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

const GABOR_PARAM_NAMES: [&str; GABOR_PARAMS] = [
    "raw_sigma", "theta_y", "theta_z", "a_re", "a_im", "f_re", "f_im", "psi",
];

/// Random one-hot truth over two channels.
fn random_truth(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let spatial: usize = shape[2..].iter().product();
    let mut t = Tensor::zeros(shape);
    let d = t.data_mut();
    for n in 0..shape[0] {
        for i in 0..spatial {
            let c = rng.gen_range(0..shape[1]);
            d[(n * shape[1] + c) * spatial + i] = 1.0;
        }
    }
    t
}

/// Suite (a): gradient of the PCC loss with respect to the raw Gabor
/// parameter tensor, one entry per scalar type.
fn gabor_chain_suite(seed: u64, entries: &mut Vec<GradCheckEntry>) -> Result<()> {
    let (c_in, c_out, k, side) = (1usize, 2usize, 3usize, 6usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = init_gabor::<f64>(c_in, c_out, k, seed)?.gabor_raw_tensor()?;
    let input = {
        let mut t = Tensor::zeros(&[1, c_in, side, side, side]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    };
    let truth = random_truth(&[1, c_out, side, side, side], &mut rng);
    let loss_of = |raw_t: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let rv = g.constant(raw_t.clone());
        let bank = g.gabor_bank(rv, k).unwrap();
        let x = g.constant(input.clone());
        let conv = g.conv3d(x, bank, None, 1, Padding::Same).unwrap();
        let scores = g.softmax_channel(conv).unwrap();
        let loss = g.pcc_loss(scores, &truth, LossConfig::default()).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let rv = g.leaf(raw.clone());
    let bank = g.gabor_bank(rv, k)?;
    let x = g.constant(input.clone());
    let conv = g.conv3d(x, bank, None, 1, Padding::Same)?;
    let scores = g.softmax_channel(conv)?;
    let loss = g.pcc_loss(scores, &truth, LossConfig::default())?;
    g.backward(loss)?;
    let analytic = g.grad(rv).unwrap().clone();
    let numeric = finite_diff_grad(loss_of, &raw, GRADCHECK_STEP);
    for (j, name) in GABOR_PARAM_NAMES.iter().enumerate() {
        let mut worst = 0.0f64;
        for co in 0..c_out {
            for ci in 0..c_in {
                let idx = (co * c_in + ci) * GABOR_PARAMS + j;
                worst = worst.max(rel_err(analytic.data()[idx], numeric.data()[idx]));
            }
        }
        entries.push(GradCheckEntry {
            name: format!("gabor_chain/{}", name),
            max_rel_err: worst,
            pass: worst <= GRADCHECK_TOL,
        });
    }
    Ok(())
}

/// Suite (b): each loss with respect to the score volume.
fn loss_suite(seed: u64, entries: &mut Vec<GradCheckEntry>) -> Result<()> {
    let shape = [1usize, 2, 4, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let spatial = 64usize;
    let mut scores = Tensor::zeros(&shape);
    {
        let d = scores.data_mut();
        for i in 0..spatial {
            let p: f64 = rng.gen_range(0.05..0.95);
            d[i] = p;
            d[spatial + i] = 1.0 - p;
        }
    }
    let truth = random_truth(&shape, &mut rng);
    for kind in [LossKind::Pcc, LossKind::Dice, LossKind::Ce] {
        let attach = |g: &mut Graph<f64>, sv| kind.attach(g, sv, &truth, LossConfig::default());
        let mut g = Graph::new();
        let sv = g.leaf(scores.clone());
        let loss = attach(&mut g, sv)?;
        g.backward(loss)?;
        let analytic = g.grad(sv).unwrap().clone();
        let numeric = finite_diff_grad(
            |s: &Tensor<f64>| {
                let mut g = Graph::new();
                let sv = g.constant(s.clone());
                let loss = attach(&mut g, sv).unwrap();
                g.value(loss).item()
            },
            &scores,
            GRADCHECK_STEP,
        );
        let worst = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &b)| rel_err(a, b))
            .fold(0.0f64, f64::max);
        entries.push(GradCheckEntry {
            name: format!("loss/{:?}", kind).to_lowercase(),
            max_rel_err: worst,
            pass: worst <= GRADCHECK_TOL,
        });
    }
    Ok(())
}

fn tiny_model(seed: u64) -> Result<Model<f64>> {
    let cfg = NetworkConfig {
        levels: 2,
        channels: vec![4, 8],
        kernel_mode: KernelMode::Mixed,
        k_conv: 3,
        k_gabor: 5,
        gn_groups: 4,
        dropout_rate: 0.0,
        labels: 2,
        // threshold 4 puts conventional kernels at 4-channel layers and
        // Gabor kernels everywhere wider, exercising both kinds
        mixed_threshold: 4,
        in_channels: 1,
    };
    build_network(&cfg, seed)
}

fn model_loss(model: &Model<f64>, input: &Tensor<f64>, truth: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward(&mut g, input, RunMode::Eval, &mut rng).unwrap();
    let loss = g
        .pcc_loss(pass.scores, truth, LossConfig::default())
        .unwrap();
    g.value(loss).item()
}

/// Suite (c): end-to-end model on 8^3 input, PCC loss, sampled scalars.
/// The sample always covers all eight Gabor parameter types.
fn end_to_end_suite(seed: u64, samples: usize, entries: &mut Vec<GradCheckEntry>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let model = tiny_model(seed)?;
    let input = {
        let mut t = Tensor::zeros(&[1, 1, 8, 8, 8]);
        for v in t.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        t
    };
    let truth = random_truth(&[1, 2, 8, 8, 8], &mut rng);
    let mut g = Graph::new();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward(&mut g, &input, RunMode::Eval, &mut drop_rng)?;
    let loss = g.pcc_loss(pass.scores, &truth, LossConfig::default())?;
    g.backward(loss)?;

    // pick coordinates: all 8 scalar types of one Gabor weight tensor,
    // then random coordinates spread over the remaining tensors
    let gabor_idx = model
        .params
        .iter()
        .position(|p| p.tensor.shape().len() == 3 && p.tensor.shape()[2] == GABOR_PARAMS)
        .expect("mixed tiny model has a Gabor layer");
    let mut picks: Vec<(usize, usize)> = (0..GABOR_PARAMS).map(|j| (gabor_idx, j)).collect();
    while picks.len() < samples {
        let pi = rng.gen_range(0..model.params.len());
        let ei = rng.gen_range(0..model.params[pi].tensor.len());
        if !picks.contains(&(pi, ei)) {
            picks.push((pi, ei));
        }
    }
    for (pi, ei) in picks {
        let analytic = g.grad(pass.param_vars[pi]).unwrap().data()[ei];
        let mut probe = model.clone();
        let orig = probe.params[pi].tensor.data()[ei];
        probe.params[pi].tensor.data_mut()[ei] = orig + GRADCHECK_STEP;
        let fp = model_loss(&probe, &input, &truth);
        probe.params[pi].tensor.data_mut()[ei] = orig - GRADCHECK_STEP;
        let fm = model_loss(&probe, &input, &truth);
        let numeric = (fp - fm) / (2.0 * GRADCHECK_STEP);
        let err = rel_err(analytic, numeric);
        entries.push(GradCheckEntry {
            name: format!("model/{}[{}]", model.params[pi].name, ei),
            max_rel_err: err,
            pass: err <= GRADCHECK_TOL,
        });
    }
    Ok(())
}

/// Run all three suites.
pub fn run_all(seed: u64) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    gabor_chain_suite(seed, &mut entries)?;
    loss_suite(seed, &mut entries)?;
    end_to_end_suite(seed, 20, &mut entries)?;
    Ok(GradCheckReport { entries })
}
