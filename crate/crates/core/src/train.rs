//! Two-phase training: the single-epoch network on raw epochs, then the
//! multi-epoch network on the frozen single-epoch outputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph};
use crate::dataset::LabeledEpoch;
use crate::error::{Error, Result};
use crate::gabor;
use crate::metrics;
use crate::network::{
    argmax, context_windows, softmax_rows, Batch, ContextWindow, FrontEnd, Mode, MultiEpochNet, SingleEpochArch, SingleEpochNet,
};
use crate::optim::{Adam, AdamConfig};
use crate::stage::{StageLabel, NUM_STAGES};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "gabor")]
    Gabor,
    #[serde(rename = "plain_conv_200", alias = "plain-conv")]
    PlainConv200,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub validate_every: usize,
    pub max_iterations: usize,
    /// Validation points without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Stages the minibatch sampler draws from. Every one of them must have
    /// training epochs.
    pub active_stages: Vec<StageLabel>,
    pub arch: SingleEpochArch,
    pub adam: AdamConfig,
    /// Epochs per graph when evaluating.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 16,
            initial_lr: 0.000625,
            lr_decay_every: 5000,
            lr_decay_factor: 0.5,
            validate_every: 1000,
            max_iterations: 100_000,
            patience: 20,
            seed: 0,
            ablation: Ablation::Gabor,
            active_stages: StageLabel::ALL.to_vec(),
            arch: SingleEpochArch::default(),
            adam: AdamConfig::default(),
            eval_chunk: 32,
        }
    }
}

fn kv_to_json(text: &str) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let v = v.trim();
        let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        // Dotted keys address nested objects, e.g. `arch.dropout = 0`.
        let mut slot = &mut map;
        let parts: Vec<&str> = k.trim().split('.').collect();
        for p in &parts[..parts.len() - 1] {
            let entry = slot
                .entry(p.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            slot = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("line {}: `{p}` is not a section", n + 1)))?;
        }
        slot.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(serde_json::Value::Object(map))
}

impl TrainConfig {
    /// JSON, or `key = value` lines (`#` comments, dotted keys for nesting).
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            kv_to_json(text)?
        };
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("minibatch_size", self.minibatch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("validate_every", self.validate_every),
            ("max_iterations", self.max_iterations),
            ("patience", self.patience),
            ("eval_chunk", self.eval_chunk),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1)".into()));
        }
        let unique: BTreeSet<_> = self.active_stages.iter().collect();
        if unique.is_empty() || unique.len() != self.active_stages.len() {
            return Err(Error::Config("active_stages must be a non-empty set".into()));
        }
        self.effective_arch().validate()
    }

    /// The architecture with the ablation front end applied.
    pub fn effective_arch(&self) -> SingleEpochArch {
        let mut arch = self.arch.clone();
        if self.ablation == Ablation::PlainConv200 {
            arch.front_end = FrontEnd::PlainConv;
        }
        arch
    }

    /// Step-decay schedule; `iteration` counts from 0.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.initial_lr * self.lr_decay_factor.powi((iteration / self.lr_decay_every) as i32)
    }
}

/// Draws a stage uniformly, then an epoch uniformly within it.
#[derive(Clone, Debug)]
pub struct StageSampler {
    pools: Vec<Vec<usize>>,
}

impl StageSampler {
    pub fn new(labels: &[StageLabel], active: &[StageLabel]) -> Result<Self> {
        let mut by_stage: BTreeMap<StageLabel, Vec<usize>> = active.iter().map(|&s| (s, Vec::new())).collect();
        for (i, l) in labels.iter().enumerate() {
            by_stage
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("training epochs labeled {l}, which is not an active stage")))?
                .push(i);
        }
        if let Some((s, _)) = by_stage.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("no training epochs for stage {s}")));
        }
        Ok(StageSampler {
            pools: by_stage.into_values().collect(),
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                let pool = &self.pools[rng.random_range(0..self.pools.len())];
                pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_kappa: f64,
    pub val_kappa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_loss,val_loss,train_kappa,val_kappa\n");
        for e in &self.entries {
            s += &format!(
                "{},{},{},{},{}\n",
                e.iteration, e.train_loss, e.val_loss, e.train_kappa, e.val_kappa
            );
        }
        s
    }

    pub fn best_val_kappa(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.val_kappa).reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub best: M,
    pub log: TrainLog,
    /// Iteration of the validation point that produced `best`.
    pub best_iteration: usize,
    pub best_val_kappa: f64,
    pub iterations_run: usize,
}

/// Mean cross-entropy and kappa of logits against labels.
pub fn score_logits(logits: &[[f64; NUM_STAGES]], labels: &[usize]) -> Result<(f64, f64)> {
    if logits.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let loss = logits.iter().zip(labels).map(|(row, &l)| log_sum_exp(row) - row[l]).sum::<f64>() / logits.len() as f64;
    let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    Ok((loss, metrics::kappa(labels, &preds)?))
}

trait Learner {
    type Model: Clone;
    fn labels(&self) -> Vec<StageLabel>;
    fn step(&mut self, idx: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<usize>, Vec<usize>)>;
    fn validate(&self) -> Result<(f64, f64)>;
    fn model(&self) -> &Self::Model;
}

fn divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            iteration,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

fn run<L: Learner>(cfg: &TrainConfig, learner: &mut L, phase: &str) -> Result<TrainOutcome<L::Model>> {
    cfg.validate()?;
    let sampler = StageSampler::new(&learner.labels(), &cfg.active_stages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(L::Model, usize, f64)> = None;
    let mut stale = 0;
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    let (mut seen, mut guessed) = (Vec::new(), Vec::new());
    let mut iterations_run = 0;

    for it in 0..cfg.max_iterations {
        let idx = sampler.draw(&mut rng, cfg.minibatch_size);
        let (loss, truth, preds) = learner.step(&idx, cfg.lr_at(it), &mut rng).map_err(|e| divergence(it, e))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                reason: "non-finite loss".into(),
            });
        }
        iterations_run = it + 1;
        loss_sum += loss;
        steps += 1;
        seen.extend(truth);
        guessed.extend(preds);

        if iterations_run % cfg.validate_every != 0 && iterations_run != cfg.max_iterations {
            continue;
        }
        let (val_loss, val_kappa) = learner.validate()?;
        let entry = LogEntry {
            iteration: iterations_run,
            train_loss: loss_sum / steps as f64,
            val_loss,
            train_kappa: metrics::kappa(&seen, &guessed)?,
            val_kappa,
        };
        log::info!(
            "{phase} iter {}: train loss {:.4} kappa {:.3} | val loss {:.4} kappa {:.3}",
            entry.iteration,
            entry.train_loss,
            entry.train_kappa,
            entry.val_loss,
            entry.val_kappa
        );
        log.entries.push(entry);
        (loss_sum, steps) = (0.0, 0);
        seen.clear();
        guessed.clear();
        if best.as_ref().is_none_or(|b| val_kappa > b.2) {
            best = Some((learner.model().clone(), iterations_run, val_kappa));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("{phase}: no improvement in {stale} validations; stopping");
                break;
            }
        }
    }
    let (best, best_iteration, best_val_kappa) = best.ok_or_else(|| Error::Config("no validation point reached".into()))?;
    Ok(TrainOutcome {
        best,
        log,
        best_iteration,
        best_val_kappa,
        iterations_run,
    })
}

/// One optimizer step of the single-epoch network on `batch`. Returns the
/// batch loss and the predicted stage of each epoch.
pub fn single_step(
    net: &mut SingleEpochNet<f32>,
    adam: &mut Adam<f32>,
    batch: &Batch<f32>,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, batch, Mode::Train(rng))?;
    let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
    let loss_value = g.value(loss).data()[0] as f64;
    let preds = g
        .value(out.logits)
        .data()
        .chunks_exact(NUM_STAGES)
        .map(|r| argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    g.backward(loss)?;
    let mut grads: Vec<Option<Tensor<f32>>> = Vec::with_capacity(out.params.len());
    for (i, &id) in out.params.iter().enumerate() {
        if !net.is_trainable(i) {
            grads.push(None);
            continue;
        }
        let mut grad = g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(net.params.at(i).shape()));
        if net.params.name(i).ends_with(".sigma") {
            for (d, &s) in grad.data_mut().iter_mut().zip(net.params.at(i).data()) {
                *d = gabor::guard_sigma_grad(s as f64, *d as f64) as f32;
            }
        }
        grads.push(Some(grad));
    }
    let sigmas: Vec<(usize, Vec<f32>)> = (0..net.params.len())
        .filter(|&i| net.params.name(i).ends_with(".sigma"))
        .map(|i| (i, net.params.at(i).data().to_vec()))
        .collect();
    adam.step(&mut net.params, &grads, lr)?;
    for (i, before) in sigmas {
        for (s, prev) in net.params.at_mut(i).data_mut().iter_mut().zip(before) {
            *s = gabor::clamp_sigma(prev as f64, *s as f64) as f32;
        }
    }
    net.update_running_stats(&out.bn_stats)?;
    Ok((loss_value, preds))
}

struct SingleLearner<'a> {
    net: SingleEpochNet<f32>,
    adam: Adam<f32>,
    train: &'a [LabeledEpoch],
    val: &'a [LabeledEpoch],
    chunk: usize,
}

impl Learner for SingleLearner<'_> {
    type Model = SingleEpochNet<f32>;

    fn labels(&self) -> Vec<StageLabel> {
        self.train.iter().map(|e| e.label).collect()
    }

    fn step(&mut self, idx: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<usize>, Vec<usize>)> {
        let picked: Vec<&LabeledEpoch> = idx.iter().map(|&i| &self.train[i]).collect();
        let batch = Batch::from_epochs(&picked)?;
        let (loss, preds) = single_step(&mut self.net, &mut self.adam, &batch, lr, rng)?;
        Ok((loss, batch.labels, preds))
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let refs: Vec<&LabeledEpoch> = self.val.iter().collect();
        let logits = self.net.predict(&refs, self.chunk)?;
        let labels: Vec<usize> = self.val.iter().map(|e| e.label.index()).collect();
        score_logits(&logits, &labels)
    }

    fn model(&self) -> &Self::Model {
        &self.net
    }
}

/// Trains the single-epoch network from `init`, keeping the parameters with
/// the best validation kappa.
pub fn train_single(
    cfg: &TrainConfig,
    init: SingleEpochNet<f32>,
    train: &[LabeledEpoch],
    val: &[LabeledEpoch],
) -> Result<TrainOutcome<SingleEpochNet<f32>>> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let adam = Adam::new(&init.params, cfg.adam);
    let mut learner = SingleLearner {
        net: init,
        adam,
        train,
        val,
        chunk: cfg.eval_chunk,
    };
    run(cfg, &mut learner, "single")
}

/// Multi-epoch training examples: one context window per kept epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiData {
    pub windows: Vec<ContextWindow>,
    pub labels: Vec<StageLabel>,
    /// `(recording, epoch index)` of each window's centre.
    pub origin: Vec<(String, usize)>,
    /// Single-epoch logits at each centre.
    pub single_logits: Vec<[f64; NUM_STAGES]>,
}

impl MultiData {
    /// Runs the frozen single-epoch network once over `epochs` (grouped by
    /// recording, ordered by ordinal) and builds edge-replicated windows of
    /// its softmax outputs. Excluded epochs are absent, so a window spans the
    /// nearest kept neighbours.
    pub fn build(single: &SingleEpochNet<f32>, epochs: &[LabeledEpoch], chunk: usize) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<&LabeledEpoch>> = BTreeMap::new();
        for e in epochs {
            groups.entry(e.recording.as_str()).or_default().push(e);
        }
        let mut data = MultiData::default();
        for (rec, mut list) in groups {
            list.sort_by_key(|e| e.index);
            let logits = single.predict(&list, chunk)?;
            data.windows.extend(context_windows(&softmax_rows(&logits)));
            data.labels.extend(list.iter().map(|e| e.label));
            data.origin.extend(list.iter().map(|e| (rec.to_string(), e.index)));
            data.single_logits.extend(logits);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

struct MultiLearner<'a> {
    net: MultiEpochNet<f32>,
    adam: Adam<f32>,
    train: &'a MultiData,
    val: &'a MultiData,
}

impl Learner for MultiLearner<'_> {
    type Model = MultiEpochNet<f32>;

    fn labels(&self) -> Vec<StageLabel> {
        self.train.labels.clone()
    }

    fn step(&mut self, idx: &[usize], lr: f64, _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<usize>, Vec<usize>)> {
        let windows: Vec<ContextWindow> = idx.iter().map(|&i| self.train.windows[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i].index()).collect();
        let mut g = Graph::new();
        let (logits, ids) = self.net.forward(&mut g, &windows)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).data()[0] as f64;
        let preds = g
            .value(logits)
            .data()
            .chunks_exact(NUM_STAGES)
            .map(|r| argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect();
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = ids.iter().map(|&id| g.grad(id).cloned()).collect();
        self.adam.step(&mut self.net.params, &grads, lr)?;
        Ok((loss_value, labels, preds))
    }

    fn validate(&self) -> Result<(f64, f64)> {
        let logits = self.net.predict(&self.val.windows)?;
        let labels: Vec<usize> = self.val.labels.iter().map(|l| l.index()).collect();
        score_logits(&logits, &labels)
    }

    fn model(&self) -> &Self::Model {
        &self.net
    }
}

/// Trains the multi-epoch network on precomputed single-epoch outputs.
pub fn train_multi(
    cfg: &TrainConfig,
    init: MultiEpochNet<f32>,
    train: &MultiData,
    val: &MultiData,
) -> Result<TrainOutcome<MultiEpochNet<f32>>> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let adam = Adam::new(&init.params, cfg.adam);
    let mut learner = MultiLearner {
        net: init,
        adam,
        train,
        val,
    };
    run(cfg, &mut learner, "multi")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.000625);
        assert_eq!(cfg.lr_at(4999), 0.000625);
        assert_eq!(cfg.lr_at(5000), 0.0003125);
        assert_eq!(cfg.lr_at(10000), 0.00015625);
    }

    #[test]
    fn key_value_config() {
        let cfg = TrainConfig::parse(
            "# demo\nmax_iterations = 50\nablation = plain_conv_200\narch.dropout = 0\nactive_stages = [\"Wake\", \"S2\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.max_iterations, 50);
        assert_eq!(cfg.ablation, Ablation::PlainConv200);
        assert_eq!(cfg.arch.dropout, 0.0);
        assert_eq!(cfg.arch.mix_filters, 256);
        assert_eq!(cfg.effective_arch().front_end, FrontEnd::PlainConv);
        assert_eq!(cfg.active_stages, vec![StageLabel::Wake, StageLabel::S2]);
        let json = TrainConfig::parse(r#"{"seed": 9}"#).unwrap();
        assert_eq!(json.seed, 9);
        assert!(TrainConfig::parse("bogus_key = 1").is_err());
        assert!(TrainConfig::parse("lr_decay_factor = 1.5").is_err());
    }

    #[test]
    fn sampler_fails_on_empty_stage() {
        let labels = [StageLabel::Wake, StageLabel::S1, StageLabel::S2, StageLabel::Sws];
        assert!(matches!(StageSampler::new(&labels, &StageLabel::ALL), Err(Error::Config(_))));
        assert!(StageSampler::new(&labels, &labels).is_ok());
    }

    #[test]
    fn sampler_is_seeded() {
        let labels: Vec<StageLabel> = (0..50).map(|i| StageLabel::ALL[i % 5]).collect();
        let s = StageSampler::new(&labels, &StageLabel::ALL).unwrap();
        let draw = |seed| s.draw(&mut ChaCha8Rng::seed_from_u64(seed), 32);
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn validation_scoring() {
        let (loss, kappa) = score_logits(&[[0.0; 5]], &[2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        // Ties go to stage 0, so the lone epoch is misclassified.
        assert_eq!(kappa, 0.0);
        assert!(score_logits(&[], &[]).is_err());
    }
}
