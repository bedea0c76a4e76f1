//! The single-epoch CNN and the multi-epoch bidirectional LSTM rescorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, BatchStats, BnMode, FrozenStats, Graph, NodeId, Padding};
use crate::dataset::{LabeledEpoch, EPOCH_SAMPLES};
use crate::error::{Error, Result};
use crate::gabor::{GaborBank, GaborParams, Modality, TAPS};
use crate::params::ParamSet;
use crate::stage::NUM_STAGES;
use crate::tensor::{Real, Tensor};

pub const CONTEXT: usize = 4;
pub const WINDOW: usize = 2 * CONTEXT + 1;
pub const BN_MOMENTUM: f64 = 0.1;
const ZSCORE_MIN_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontEnd {
    Gabor,
    /// Free 200-tap convolution filters with bias, same shapes as the Gabor banks.
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleEpochArch {
    pub front_end: FrontEnd,
    pub eeg_kernels: usize,
    pub eog_kernels: usize,
    pub mix_filters: usize,
    pub block_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub pool: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for SingleEpochArch {
    fn default() -> Self {
        SingleEpochArch {
            front_end: FrontEnd::Gabor,
            eeg_kernels: Modality::Eeg.default_kernels(),
            eog_kernels: Modality::Eog.default_kernels(),
            mix_filters: 256,
            block_filters: vec![64, 128, 128, 256, 256],
            conv_kernel: 3,
            pool: 3,
            hidden: vec![256, 128],
            dropout: 0.5,
        }
    }
}

impl SingleEpochArch {
    pub fn gl_len(&self) -> usize {
        EPOCH_SAMPLES - TAPS + 1
    }

    pub fn gl_channels(&self) -> usize {
        self.eeg_kernels + self.eog_kernels
    }

    /// Length after the last pooling stage.
    pub fn final_len(&self) -> usize {
        self.block_filters.iter().fold(self.gl_len(), |l, _| l / self.pool)
    }

    pub fn flatten_len(&self) -> usize {
        self.block_filters.last().copied().unwrap_or(self.mix_filters) * self.final_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eeg_kernels == 0 || self.eog_kernels == 0 || self.mix_filters == 0 {
            return Err(Error::Config("front end and mixing layer need at least one filter".into()));
        }
        if self.block_filters.is_empty() {
            return Err(Error::Config("at least one conv block is required".into()));
        }
        if self.conv_kernel.is_multiple_of(2) || self.pool == 0 {
            return Err(Error::Config("conv kernel must be odd and pool positive".into()));
        }
        if self.final_len() == 0 {
            return Err(Error::Config("too many pooling stages for a 30 s epoch".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Tensor names and shapes, in binding order. `trainable` is false for
    /// batch-norm running statistics.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let mut add = |n: String, s: Vec<usize>, t: bool| out.push((n, s, t));
        for (m, k) in [("eeg", self.eeg_kernels), ("eog", self.eog_kernels)] {
            match self.front_end {
                FrontEnd::Gabor => {
                    for p in ["u", "sigma", "f"] {
                        add(format!("single.{m}.{p}"), vec![k], true);
                    }
                }
                FrontEnd::PlainConv => {
                    add(format!("single.{m}.w"), vec![k, 1, TAPS], true);
                    add(format!("single.{m}.b"), vec![k], true);
                }
            }
        }
        add("single.mix.w".into(), vec![self.mix_filters, self.gl_channels(), 1], true);
        add("single.mix.b".into(), vec![self.mix_filters], true);
        let mut c_in = self.mix_filters;
        for (i, &c) in self.block_filters.iter().enumerate() {
            let i = i + 1;
            add(format!("single.conv{i}.w"), vec![c, c_in, self.conv_kernel], true);
            add(format!("single.conv{i}.b"), vec![c], true);
            add(format!("single.bn{i}.gamma"), vec![c], true);
            add(format!("single.bn{i}.beta"), vec![c], true);
            add(format!("single.bn{i}.running_mean"), vec![c], false);
            add(format!("single.bn{i}.running_var"), vec![c], false);
            c_in = c;
        }
        let mut width = self.flatten_len();
        for (i, &h) in self.hidden.iter().chain(&[NUM_STAGES]).enumerate() {
            add(format!("single.fc{}.w", i + 1), vec![h, width], true);
            add(format!("single.fc{}.b", i + 1), vec![h], true);
            width = h;
        }
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Per-channel z-score of one epoch; near-constant channels become zeros.
pub fn zscore(x: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < ZSCORE_MIN_STD {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
}

/// Normalized network input for a batch of epochs.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub n: usize,
    pub eeg: Tensor<T>,
    pub eog: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn from_epochs(epochs: &[&LabeledEpoch]) -> Result<Self> {
        let n = epochs.len();
        let mut eeg = Vec::with_capacity(n * EPOCH_SAMPLES);
        let mut eog = Vec::with_capacity(n * EPOCH_SAMPLES);
        for e in epochs {
            if e.eeg.len() != EPOCH_SAMPLES || e.eog.len() != EPOCH_SAMPLES {
                return Err(Error::Shape(format!(
                    "epoch {} of `{}` is not {EPOCH_SAMPLES} samples",
                    e.index, e.recording
                )));
            }
            eeg.extend(zscore(&e.eeg).into_iter().map(|v| T::of(v as f64)));
            eog.extend(zscore(&e.eog).into_iter().map(|v| T::of(v as f64)));
        }
        Ok(Batch {
            n,
            eeg: Tensor::from_vec(&[n, 1, EPOCH_SAMPLES], eeg)?,
            eog: Tensor::from_vec(&[n, 1, EPOCH_SAMPLES], eog)?,
            labels: epochs.iter().map(|e| e.label.index()).collect(),
        })
    }
}

pub enum Mode<'r> {
    /// Dropout on, batch statistics in batch norm.
    Train(&'r mut ChaCha8Rng),
    /// Dropout off, running statistics in batch norm.
    Eval,
}

/// Handles into the graph produced by [`SingleEpochNet::forward`].
pub struct SingleOutput<T> {
    pub logits: NodeId,
    /// Gabor-layer activations before the ReLU, `[n, 40, 2801]` (EEG kernels first).
    pub gl: NodeId,
    /// One node per entry of the parameter set (constants for buffers).
    pub params: Vec<NodeId>,
    /// Batch statistics per batch-norm layer, training mode only.
    pub bn_stats: Vec<BatchStats<T>>,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleEpochNet<T> {
    pub arch: SingleEpochArch,
    pub params: ParamSet<T>,
}

impl SingleEpochNet<f32> {
    /// Fresh network. Gabor banks follow their own initialization; other
    /// weights and biases are uniform in ±1/sqrt(fan_in).
    pub fn init(arch: SingleEpochArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = [
            GaborBank::init(arch.eeg_kernels, Modality::Eeg, rng.random())?,
            GaborBank::init(arch.eog_kernels, Modality::Eog, rng.random())?,
        ];
        let mut params = ParamSet::new();
        for (name, shape, _) in arch.layout() {
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let tensor = match leaf {
                "u" | "sigma" | "f" => {
                    let bank = &banks[usize::from(name.starts_with("single.eog"))];
                    let pick = |k: &GaborParams| match leaf {
                        "u" => k.u,
                        "sigma" => k.sigma,
                        _ => k.f,
                    } as f32;
                    Tensor::from_vec(&shape, bank.kernels.iter().map(pick).collect())?
                }
                "gamma" | "running_var" => Tensor::full(&shape, 1.0),
                "beta" | "running_mean" => Tensor::zeros(&shape),
                "w" => {
                    let fan_in: usize = shape[1..].iter().product();
                    uniform_init(&mut rng, &shape, 1.0 / (fan_in as f64).sqrt())
                }
                _ => {
                    // Bias: bound from the matching weight's fan-in.
                    let w = name.trim_end_matches(".b").to_string() + ".w";
                    let ws: &Tensor<f32> = params.get(&w)?;
                    let fan_in: usize = ws.shape()[1..].iter().product();
                    uniform_init(&mut rng, &shape, 1.0 / (fan_in as f64).sqrt())
                }
            };
            params.insert(name, tensor)?;
        }
        Ok(SingleEpochNet { arch, params })
    }
}

impl<T: Real> SingleEpochNet<T> {
    pub fn cast<U: Real>(&self) -> SingleEpochNet<U> {
        SingleEpochNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Whether the tensor at position `i` is updated by the optimizer.
    pub fn is_trainable(&self, i: usize) -> bool {
        !self.params.name(i).contains(".running_")
    }

    /// The Gabor banks, if this network has a Gabor front end.
    pub fn banks(&self) -> Option<[GaborBank; 2]> {
        if self.arch.front_end != FrontEnd::Gabor {
            return None;
        }
        let bank = |m: Modality| -> Option<GaborBank> {
            let get = |p: &str| self.params.get(&format!("single.{}.{p}", m.name().to_lowercase())).ok();
            let (u, s, f) = (get("u")?, get("sigma")?, get("f")?);
            let kernels = (0..u.len())
                .map(|i| GaborParams::new(u.data()[i].as_f64(), s.data()[i].as_f64(), f.data()[i].as_f64()))
                .collect();
            Some(GaborBank { modality: m, kernels })
        };
        Some([bank(Modality::Eeg)?, bank(Modality::Eog)?])
    }

    /// Builds the forward graph. Running statistics enter as constants.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>, mode: Mode<'_>) -> Result<SingleOutput<T>> {
        let ids: Vec<NodeId> = (0..self.params.len())
            .map(|i| g.leaf(self.params.at(i).clone(), self.is_trainable(i)))
            .collect();
        let p = |name: &str| -> Result<NodeId> {
            self.params
                .position(name)
                .map(|i| ids[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let (train, rng) = match mode {
            Mode::Train(rng) => (true, Some(rng)),
            Mode::Eval => (false, None),
        };

        let x_eeg = g.input(batch.eeg.clone());
        let x_eog = g.input(batch.eog.clone());
        let mut gls = Vec::with_capacity(2);
        for (m, x) in [("eeg", x_eeg), ("eog", x_eog)] {
            let y = match self.arch.front_end {
                FrontEnd::Gabor => {
                    let w = g.gabor(
                        p(&format!("single.{m}.u"))?,
                        p(&format!("single.{m}.sigma"))?,
                        p(&format!("single.{m}.f"))?,
                    )?;
                    g.conv1d(x, w, None, Padding::Valid)?
                }
                FrontEnd::PlainConv => g.conv1d(x, p(&format!("single.{m}.w"))?, Some(p(&format!("single.{m}.b"))?), Padding::Valid)?,
            };
            gls.push(y);
        }
        let gl = g.concat(&gls)?;
        let mut h = g.relu(gl)?;

        let mut bn_stats = Vec::new();
        for i in 1..=self.arch.block_filters.len() {
            let (w, b) = (p(&format!("single.conv{i}.w"))?, p(&format!("single.conv{i}.b"))?);
            h = if i == 1 {
                // The mixing layer feeds conv1 directly, so the two are evaluated as one.
                g.mix_conv(h, p("single.mix.w")?, p("single.mix.b")?, w, b, Padding::Same)?
            } else {
                g.conv1d(h, w, Some(b), Padding::Same)?
            };
            h = g.relu(h)?;
            h = g.maxpool1d(h, self.arch.pool, self.arch.pool)?;
            let (gamma, beta) = (p(&format!("single.bn{i}.gamma"))?, p(&format!("single.bn{i}.beta"))?);
            let bn_mode = if train {
                BnMode::Train
            } else {
                BnMode::Eval(FrozenStats {
                    mean: self.params.get(&format!("single.bn{i}.running_mean"))?.data(),
                    var: self.params.get(&format!("single.bn{i}.running_var"))?.data(),
                })
            };
            let (out, stats) = g.batchnorm(h, gamma, beta, bn_mode)?;
            h = out;
            bn_stats.extend(stats);
        }

        h = g.reshape(h, &[batch.n, self.arch.flatten_len()])?;
        if let Some(rng) = rng {
            if self.arch.dropout > 0.0 {
                h = g.dropout(h, self.arch.dropout, rng)?;
            }
        }
        let layers = self.arch.hidden.len() + 1;
        for i in 1..=layers {
            h = g.dense(h, p(&format!("single.fc{i}.w"))?, p(&format!("single.fc{i}.b"))?)?;
            if i < layers {
                h = g.relu(h)?;
            }
        }
        Ok(SingleOutput {
            logits: h,
            gl,
            params: ids,
            bn_stats,
        })
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (i, s) in stats.iter().enumerate() {
            for (key, src) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.params.get_mut(&format!("single.bn{}.{key}", i + 1))?;
                if t.len() != src.len() {
                    return Err(Error::Shape("batch statistics do not match running buffers".into()));
                }
                for (r, &v) in t.data_mut().iter_mut().zip(src) {
                    *r = keep * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Evaluation-mode logits, `chunk` epochs per graph.
    pub fn predict(&self, epochs: &[&LabeledEpoch], chunk: usize) -> Result<Vec<[f64; NUM_STAGES]>> {
        let mut out = Vec::with_capacity(epochs.len());
        for part in epochs.chunks(chunk.max(1)) {
            let batch = Batch::from_epochs(part)?;
            let mut g = Graph::new();
            let o = self.forward(&mut g, &batch, Mode::Eval)?;
            for row in g.value(o.logits).data().chunks_exact(NUM_STAGES) {
                let mut r = [0.0; NUM_STAGES];
                r.iter_mut().zip(row).for_each(|(a, &b)| *a = b.as_f64());
                out.push(r);
            }
        }
        Ok(out)
    }
}

pub const MULTI_LAYERS: usize = 2;
pub const MULTI_HIDDEN: usize = 10;

/// Probability vectors of epochs `n-4..=n+4`, edge-replicated.
pub type ContextWindow = [[f64; NUM_STAGES]; WINDOW];

/// One window per epoch of a recording's probability sequence.
pub fn context_windows(probs: &[[f64; NUM_STAGES]]) -> Vec<ContextWindow> {
    let last = probs.len().saturating_sub(1) as isize;
    (0..probs.len() as isize)
        .map(|n| {
            let mut w = [[0.0; NUM_STAGES]; WINDOW];
            for (j, slot) in w.iter_mut().enumerate() {
                let at = (n + j as isize - CONTEXT as isize).clamp(0, last);
                *slot = probs[at as usize];
            }
            w
        })
        .collect()
}

pub fn softmax_rows(logits: &[[f64; NUM_STAGES]]) -> Vec<[f64; NUM_STAGES]> {
    logits
        .iter()
        .map(|row| {
            let p = softmax(row);
            let mut r = [0.0; NUM_STAGES];
            r.copy_from_slice(&p);
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiEpochNet<T> {
    pub params: ParamSet<T>,
}

impl MultiEpochNet<f32> {
    pub fn layout() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for dir in ["fwd", "bwd"] {
            for l in 0..MULTI_LAYERS {
                let input = if l == 0 { NUM_STAGES } else { MULTI_HIDDEN };
                out.push((format!("multi.{dir}.l{l}.w_ih"), vec![4 * MULTI_HIDDEN, input]));
                out.push((format!("multi.{dir}.l{l}.w_hh"), vec![4 * MULTI_HIDDEN, MULTI_HIDDEN]));
                out.push((format!("multi.{dir}.l{l}.b"), vec![4 * MULTI_HIDDEN]));
            }
        }
        out.push(("multi.head.w".into(), vec![NUM_STAGES, 2 * MULTI_HIDDEN]));
        out.push(("multi.head.b".into(), vec![NUM_STAGES]));
        out
    }

    /// LSTM tensors uniform in ±1/sqrt(hidden); head in ±1/sqrt(20).
    pub fn init(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in Self::layout() {
            let fan = if name.starts_with("multi.head") {
                2 * MULTI_HIDDEN
            } else {
                MULTI_HIDDEN
            };
            params.insert(name, uniform_init(&mut rng, &shape, 1.0 / (fan as f64).sqrt()))?;
        }
        Ok(MultiEpochNet { params })
    }
}

impl<T: Real> MultiEpochNet<T> {
    pub fn cast<U: Real>(&self) -> MultiEpochNet<U> {
        MultiEpochNet {
            params: self.params.cast(),
        }
    }

    /// `windows` → logits `[n, 5]`; also returns the bound parameter nodes.
    pub fn forward(&self, g: &mut Graph<T>, windows: &[ContextWindow]) -> Result<(NodeId, Vec<NodeId>)> {
        let ids = self.params.bind(g, true);
        let p = |name: &str| -> Result<NodeId> {
            self.params
                .position(name)
                .map(|i| ids[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let data = windows.iter().flatten().flatten().map(|&v| T::of(v)).collect();
        let x = g.input(Tensor::from_vec(&[windows.len(), WINDOW, NUM_STAGES], data)?);
        let mut finals = Vec::with_capacity(2);
        for dir in ["fwd", "bwd"] {
            let mut h = if dir == "bwd" { g.reverse_time(x)? } else { x };
            for l in 0..MULTI_LAYERS {
                h = g.lstm(
                    h,
                    p(&format!("multi.{dir}.l{l}.w_ih"))?,
                    p(&format!("multi.{dir}.l{l}.w_hh"))?,
                    p(&format!("multi.{dir}.l{l}.b"))?,
                )?;
            }
            finals.push(g.last_step(h)?);
        }
        let joined = g.concat(&finals)?;
        let logits = g.dense(joined, p("multi.head.w")?, p("multi.head.b")?)?;
        Ok((logits, ids))
    }

    pub fn predict(&self, windows: &[ContextWindow]) -> Result<Vec<[f64; NUM_STAGES]>> {
        let mut g = Graph::new();
        let (logits, _) = self.forward(&mut g, windows)?;
        Ok(g.value(logits)
            .data()
            .chunks_exact(NUM_STAGES)
            .map(|row| {
                let mut r = [0.0; NUM_STAGES];
                r.iter_mut().zip(row).for_each(|(a, &b)| *a = b.as_f64());
                r
            })
            .collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-epoch output of [`score_recording`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub index: usize,
    pub single_logits: [f64; NUM_STAGES],
    pub multi_logits: [f64; NUM_STAGES],
    pub single_pred: usize,
    pub multi_pred: usize,
    pub label: usize,
}

/// Scores the kept epochs of one recording, in order of their ordinals.
pub fn score_recording<T: Real>(single: &SingleEpochNet<T>, multi: &MultiEpochNet<T>, epochs: &[&LabeledEpoch]) -> Result<Vec<EpochScore>> {
    let mut sorted = epochs.to_vec();
    sorted.sort_by_key(|e| e.index);
    let logits = single.predict(&sorted, 32)?;
    let windows = context_windows(&softmax_rows(&logits));
    let multi_logits = if windows.is_empty() { Vec::new() } else { multi.predict(&windows)? };
    Ok(sorted
        .iter()
        .zip(logits)
        .zip(multi_logits)
        .map(|((e, s), m)| EpochScore {
            index: e.index,
            single_pred: argmax(&s),
            multi_pred: argmax(&m),
            single_logits: s,
            multi_logits: m,
            label: e.label.index(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::StageLabel;

    pub(crate) fn tiny_arch(front_end: FrontEnd) -> SingleEpochArch {
        SingleEpochArch {
            front_end,
            eeg_kernels: 3,
            eog_kernels: 2,
            mix_filters: 4,
            block_filters: vec![4, 4, 4, 4, 4],
            conv_kernel: 3,
            pool: 3,
            hidden: vec![6, 5],
            dropout: 0.5,
        }
    }

    fn epoch(seed: u64) -> LabeledEpoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledEpoch {
            recording: "r".into(),
            index: seed as usize,
            label: StageLabel::S2,
            eeg: (0..EPOCH_SAMPLES).map(|_| rng.random_range(-1.0..1.0)).collect(),
            eog: (0..EPOCH_SAMPLES).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn table_one_shapes() {
        let a = SingleEpochArch::default();
        assert_eq!(a.gl_len(), 2801);
        assert_eq!(a.final_len(), 11);
        assert_eq!(a.flatten_len(), 2816);
        // Hand tally, layer by layer: Gabor 3*40; mix 256*40+256; conv
        // blocks with their batch-norm affine pairs; dense 2816-256-128-5.
        let hand = 120
            + (256 * 40 + 256)
            + (64 * 256 * 3 + 64 + 128)
            + (128 * 64 * 3 + 128 + 256)
            + (128 * 128 * 3 + 128 + 256)
            + (256 * 128 * 3 + 256 + 512)
            + (256 * 256 * 3 + 256 + 512)
            + (2816 * 256 + 256)
            + (256 * 128 + 128)
            + (128 * 5 + 5);
        assert_eq!(a.param_count(), hand);
        assert_eq!(hand, 1_185_597);
    }

    #[test]
    fn ablation_first_layer_size() {
        let g = SingleEpochArch::default();
        let p = SingleEpochArch {
            front_end: FrontEnd::PlainConv,
            ..SingleEpochArch::default()
        };
        assert_eq!(p.param_count() - g.param_count(), 200 * 40 + 40 - 3 * 40);
    }

    #[test]
    fn zscore_guard() {
        assert!(zscore(&[3.0; 10]).iter().all(|&v| v == 0.0));
        let z = zscore(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f32 = z.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn eval_forward_is_deterministic_with_five_outputs() {
        let net = SingleEpochNet::init(tiny_arch(FrontEnd::Gabor), 1).unwrap();
        let e = epoch(7);
        let a = net.predict(&[&e], 8).unwrap();
        let b = net.predict(&[&e], 8).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert!(a[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_epoch_is_finite() {
        let net = SingleEpochNet::init(tiny_arch(FrontEnd::Gabor), 1).unwrap();
        let mut e = epoch(0);
        e.eeg = vec![5.0; EPOCH_SAMPLES];
        e.eog = vec![0.0; EPOCH_SAMPLES];
        assert!(net.predict(&[&e], 1).unwrap()[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn plain_conv_has_same_io() {
        let net = SingleEpochNet::init(tiny_arch(FrontEnd::PlainConv), 1).unwrap();
        assert!(net.banks().is_none());
        assert_eq!(net.predict(&[&epoch(1), &epoch(2)], 8).unwrap().len(), 2);
    }

    #[test]
    fn edge_windows_replicate() {
        let probs: Vec<[f64; 5]> = (0..3).map(|i| [i as f64; 5]).collect();
        let w = context_windows(&probs);
        assert_eq!(w.len(), 3);
        let firsts: Vec<f64> = w[0].iter().map(|r| r[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn palindromic_window_feeds_both_branches_alike() {
        // With identical branch weights, a palindrome gives identical final
        // states, so swapping the head's halves leaves the logits unchanged.
        let mut net = MultiEpochNet::init(3).unwrap();
        for l in 0..MULTI_LAYERS {
            for t in ["w_ih", "w_hh", "b"] {
                let src = net.params.get(&format!("multi.fwd.l{l}.{t}")).unwrap().clone();
                *net.params.get_mut(&format!("multi.bwd.l{l}.{t}")).unwrap() = src;
            }
        }
        let mut w = [[0.0; 5]; WINDOW];
        for (j, row) in w.iter_mut().enumerate() {
            let d = j.abs_diff(CONTEXT) as f64;
            *row = [0.1 * d, 0.2, 0.3 - 0.05 * d, 0.1, 0.3];
        }
        let a = net.predict(&[w]).unwrap();
        let head = net.params.get_mut("multi.head.w").unwrap();
        for r in 0..NUM_STAGES {
            let row = &mut head.data_mut()[r * 20..(r + 1) * 20];
            let (x, y) = row.split_at_mut(10);
            x.swap_with_slice(y);
        }
        let b = net.predict(&[w]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn scoring_identical_epochs() {
        let single = SingleEpochNet::init(tiny_arch(FrontEnd::Gabor), 2).unwrap();
        let multi = MultiEpochNet::init(2).unwrap();
        let base = epoch(4);
        let epochs: Vec<LabeledEpoch> = (0..5).map(|i| LabeledEpoch { index: i, ..base.clone() }).collect();
        let refs: Vec<&LabeledEpoch> = epochs.iter().collect();
        let s = score_recording(&single, &multi, &refs).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|p| p[0].single_logits == p[1].single_logits));
        assert_eq!(s, score_recording(&single, &multi, &refs).unwrap());
    }
}
