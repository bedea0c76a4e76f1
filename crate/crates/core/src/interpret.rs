//! Gradient-based interpretation of a trained single-epoch network.
//!
//! For kernel `i` and target class `c`, the sensitivity `Sen(t)` is the
//! gradient of the raw logit `O[c]` with respect to the Gabor-layer
//! activation `GL_i(t)`. The positive functional effect keeps only the
//! samples where that gradient is strictly positive:
//!
//! ```text
//! Eff(t) = GL_i(t) * Sen(t) * [Sen(t) > 0]      Eff = sum_t Eff(t)^2
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::{softmax, Graph};
use crate::dataset::LabeledEpoch;
use crate::error::{Error, Result};
use crate::gabor::{self, TAPS};
use crate::metrics::{self, AgreementMatrix};
use crate::network::{argmax, Batch, Mode, MultiEpochNet, SingleEpochNet};
use crate::stage::{StageLabel, NUM_STAGES};
use crate::tensor::Real;
use crate::train::MultiData;

/// Which output the sensitivity differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// The raw logit `O[class]`.
    #[default]
    Logit,
    /// The softmax probability of `class`.
    Probability,
}

/// Which class an epoch is explained against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    #[default]
    TrueLabel,
    Predicted,
}

/// Activations and sensitivities of every kernel for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub class: usize,
    /// `[kernel][t]`, pre-ReLU.
    pub gl: Vec<Vec<f64>>,
    /// `[kernel][t]`.
    pub sen: Vec<Vec<f64>>,
    pub logits: [f64; NUM_STAGES],
}

/// Runs the network in eval mode over `epochs` and differentiates the chosen
/// output of each epoch (class `classes[e]`, or the predicted class when
/// `None`) with respect to its Gabor-layer activations.
///
/// Eval mode makes every logit row depend on its own epoch only, so one
/// backward pass with a per-row seed yields all the maps at once.
pub fn sensitivity<T: Real>(
    net: &SingleEpochNet<T>,
    epochs: &[&LabeledEpoch],
    classes: &[Option<usize>],
    objective: Objective,
) -> Result<Vec<SensitivityMap>> {
    if epochs.len() != classes.len() {
        return Err(Error::Shape("one class per epoch required".into()));
    }
    if epochs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::<T>::from_epochs(epochs)?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, &batch, Mode::Eval)?;
    let logits: Vec<[f64; NUM_STAGES]> = g
        .value(out.logits)
        .data()
        .chunks_exact(NUM_STAGES)
        .map(|r| std::array::from_fn(|k| r[k].as_f64()))
        .collect();
    let mut chosen = Vec::with_capacity(epochs.len());
    let mut seed = vec![T::zero(); epochs.len() * NUM_STAGES];
    for (e, (row, class)) in logits.iter().zip(classes).enumerate() {
        let c = class.unwrap_or_else(|| argmax(row));
        if c >= NUM_STAGES {
            return Err(Error::Config(format!("class {c} out of range")));
        }
        chosen.push(c);
        let seed_row = &mut seed[e * NUM_STAGES..(e + 1) * NUM_STAGES];
        match objective {
            Objective::Logit => seed_row[c] = T::one(),
            Objective::Probability => {
                let p = softmax(row);
                for (k, s) in seed_row.iter_mut().enumerate() {
                    let delta = if k == c { 1.0 } else { 0.0 };
                    *s = T::of(p[c] * (delta - p[k]));
                }
            }
        }
    }
    let gl = g.value(out.gl).clone();
    let shape = gl.shape().to_vec();
    g.backward_with(out.logits, crate::tensor::Tensor::from_vec(&[epochs.len(), NUM_STAGES], seed)?)?;
    let sen = g
        .grad(out.gl)
        .ok_or_else(|| Error::Shape("Gabor-layer activations carry no gradient".into()))?;
    let (kernels, len) = (shape[1], shape[2]);
    let rows = |data: &[T], e: usize| -> Vec<Vec<f64>> {
        (0..kernels)
            .map(|k| data[(e * kernels + k) * len..][..len].iter().map(|v| v.as_f64()).collect())
            .collect()
    };
    Ok((0..epochs.len())
        .map(|e| SensitivityMap {
            class: chosen[e],
            gl: rows(gl.data(), e),
            sen: rows(sen.data(), e),
            logits: logits[e],
        })
        .collect())
}

/// Positive functional effect of one kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectRecord {
    pub series: Vec<f64>,
    pub total: f64,
}

pub fn effect(gl: &[f64], sen: &[f64]) -> EffectRecord {
    let series: Vec<f64> = gl.iter().zip(sen).map(|(&a, &s)| if s > 0.0 { a * s } else { 0.0 }).collect();
    let total = series.iter().map(|v| v * v).sum();
    EffectRecord { series, total }
}

/// Per-kernel effect totals of one test epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEffects {
    pub recording: String,
    pub index: usize,
    pub label: StageLabel,
    /// Class the effects were computed against.
    pub class: usize,
    pub predicted: usize,
    pub totals: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn top_kernel(totals: &[f64]) -> usize {
    totals
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > totals[best] { i } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    /// Stage-weighted overall effect per kernel.
    pub eff: Vec<f64>,
    /// Stage-weighted top-kernel frequency per kernel.
    pub top: Vec<f64>,
    /// `[kernel][stage]` mean effect.
    pub eff_stage: Vec<[f64; NUM_STAGES]>,
    /// `[kernel][stage]` top-kernel counts.
    pub top_stage: Vec<[usize; NUM_STAGES]>,
    pub n_stage: [usize; NUM_STAGES],
    /// Stages without any epoch, left out of every sum.
    pub skipped: Vec<StageLabel>,
}

pub fn summarize(records: &[EpochEffects], kernels: usize) -> Result<EffectSummary> {
    let mut n_stage = [0usize; NUM_STAGES];
    let mut sums = vec![[0.0; NUM_STAGES]; kernels];
    let mut top_stage = vec![[0usize; NUM_STAGES]; kernels];
    for r in records {
        if r.totals.len() != kernels {
            return Err(Error::Shape(format!("{} effect totals, {kernels} kernels", r.totals.len())));
        }
        let j = r.label.index();
        n_stage[j] += 1;
        for (s, &v) in sums.iter_mut().zip(&r.totals) {
            s[j] += v;
        }
        top_stage[top_kernel(&r.totals)][j] += 1;
    }
    let skipped: Vec<StageLabel> = StageLabel::ALL.into_iter().filter(|s| n_stage[s.index()] == 0).collect();
    let mut eff_stage = vec![[0.0; NUM_STAGES]; kernels];
    let (mut eff, mut top) = (vec![0.0; kernels], vec![0.0; kernels]);
    for i in 0..kernels {
        for j in (0..NUM_STAGES).filter(|&j| n_stage[j] > 0) {
            let n = n_stage[j] as f64;
            eff_stage[i][j] = sums[i][j] / n;
            eff[i] += sums[i][j] / n;
            top[i] += top_stage[i][j] as f64 / n;
        }
    }
    Ok(EffectSummary {
        eff,
        top,
        eff_stage,
        top_stage,
        n_stage,
        skipped,
    })
}

/// Mean EEG effect over mean EOG effect; `None` when the EOG mean is zero.
/// The first `eeg_kernels` totals belong to the EEG bank.
pub fn modality_ratio(totals: &[f64], eeg_kernels: usize) -> Option<f64> {
    if eeg_kernels == 0 || eeg_kernels >= totals.len() {
        return None;
    }
    let (eeg, eog) = totals.split_at(eeg_kernels);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let den = mean(eog);
    (den > 0.0).then(|| mean(eeg) / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

impl TTest {
    pub fn significant(&self) -> bool {
        self.p < 0.05
    }
}

/// Welch's unequal-variance two-sample t-test.
pub fn stage_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("each group needs at least two values".into()));
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (n, m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(TTest {
            t: 0.0,
            df: na + nb - 2.0,
            p: 1.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p })
}

/// Time in seconds of Gabor-layer sample `m` within its epoch: the kernel
/// centre when the window starts at input sample `m`.
pub fn gl_time(m: usize) -> f64 {
    (m + TAPS / 2) as f64 / gabor::SAMPLE_RATE_HZ
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub objective: Objective,
    pub target: Target,
    /// `(recording, epoch index)` pairs whose `Eff(t)` traces are written.
    pub traces: Vec<(String, usize)>,
    pub chunk: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            objective: Objective::Logit,
            target: Target::TrueLabel,
            traces: Vec::new(),
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub epochs: usize,
    pub kernels: usize,
    pub eeg_kernels: usize,
    pub n_stage: [usize; NUM_STAGES],
    pub skipped_stages: Vec<StageLabel>,
    pub undefined_ratios: usize,
    pub options: ReportOptions,
    pub files: Vec<String>,
}

/// Everything computed for a report, before it is written out.
#[derive(Clone, Debug)]
pub struct Interpretation {
    pub effects: Vec<EpochEffects>,
    pub summary: EffectSummary,
    /// `(recording, index, kernel, t, Eff(t))`.
    pub traces: Vec<(String, usize, usize, f64, f64)>,
    pub agreement: Option<AgreementMatrix>,
    pub eeg_kernels: usize,
}

/// Effect totals for every epoch, plus traces for the requested ones.
pub fn interpret<T: Real>(
    net: &SingleEpochNet<T>,
    multi: Option<&MultiEpochNet<f32>>,
    epochs: &[LabeledEpoch],
    opts: &ReportOptions,
) -> Result<Interpretation> {
    if epochs.is_empty() {
        return Err(Error::Config("no epochs to interpret".into()));
    }
    let kernels = net.arch.gl_channels();
    let mut effects = Vec::with_capacity(epochs.len());
    let mut traces = Vec::new();
    for part in epochs.chunks(opts.chunk.max(1)) {
        let refs: Vec<&LabeledEpoch> = part.iter().collect();
        let classes: Vec<Option<usize>> = part
            .iter()
            .map(|e| match opts.target {
                Target::TrueLabel => Some(e.label.index()),
                Target::Predicted => None,
            })
            .collect();
        for (e, map) in part.iter().zip(sensitivity(net, &refs, &classes, opts.objective)?) {
            let want_trace = opts.traces.iter().any(|(r, i)| *r == e.recording && *i == e.index);
            let mut totals = Vec::with_capacity(kernels);
            for k in 0..kernels {
                let rec = effect(&map.gl[k], &map.sen[k]);
                if want_trace {
                    traces.extend(
                        rec.series
                            .iter()
                            .enumerate()
                            .map(|(m, &v)| (e.recording.clone(), e.index, k, gl_time(m), v)),
                    );
                }
                totals.push(rec.total);
            }
            effects.push(EpochEffects {
                recording: e.recording.clone(),
                index: e.index,
                label: e.label,
                class: map.class,
                predicted: argmax(&map.logits),
                totals,
            });
        }
    }
    let agreement = match multi {
        Some(m) => {
            let data = MultiData::build(&net.cast::<f32>(), epochs, opts.chunk)?;
            let multi_pred: Vec<usize> = m.predict(&data.windows)?.iter().map(|r| argmax(r)).collect();
            let single_pred: Vec<usize> = data.single_logits.iter().map(|r| argmax(r)).collect();
            let truth: Vec<usize> = data.labels.iter().map(|l| l.index()).collect();
            Some(metrics::agreement_matrix(&single_pred, &multi_pred, &truth)?)
        }
        None => None,
    };
    Ok(Interpretation {
        summary: summarize(&effects, kernels)?,
        effects,
        traces,
        agreement,
        eeg_kernels: net.arch.eeg_kernels,
    })
}

fn max_normalized(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(0.0, f64::max);
    v.iter().map(|x| if m > 0.0 { x / m } else { 0.0 }).collect()
}

/// Pairwise Welch tests between stages, skipping groups under two values.
fn pairwise(groups: &[Vec<f64>; NUM_STAGES]) -> Vec<(usize, usize, TTest)> {
    let mut out = Vec::new();
    for a in 0..NUM_STAGES {
        for b in a + 1..NUM_STAGES {
            if let Ok(t) = stage_test(&groups[a], &groups[b]) {
                out.push((a, b, t));
            }
        }
    }
    out
}

impl Interpretation {
    /// Rows of `(recording, index, stage, ratio)`; undefined ratios are `None`.
    pub fn ratios(&self) -> Vec<(&str, usize, StageLabel, Option<f64>)> {
        self.effects
            .iter()
            .map(|e| (e.recording.as_str(), e.index, e.label, modality_ratio(&e.totals, self.eeg_kernels)))
            .collect()
    }

    /// Writes the CSV artifacts and a JSON manifest into `dir`.
    pub fn write(&self, dir: &Path, kernels_from: Option<&SingleEpochNet<f32>>, opts: &ReportOptions) -> Result<ReportManifest> {
        std::fs::create_dir_all(dir)?;
        let mut files: BTreeMap<&str, String> = BTreeMap::new();
        let s = &self.summary;
        let kernels = s.eff.len();
        let modality = |k: usize| if k < self.eeg_kernels { "EEG" } else { "EOG" };

        if let Some(banks) = kernels_from.and_then(|n| n.banks()) {
            let export = gabor::export_banks(&[&banks[0], &banks[1]]);
            files.insert("kernel_params.csv", export.params_csv());
            files.insert("kernel_waveforms.csv", export.waveforms_csv());
            files.insert("kernel_spectra.csv", export.spectra_csv());
        }

        let mut csv = String::from("kernel,modality,eff,eff_normalized,top,top_normalized\n");
        let (en, tn) = (max_normalized(&s.eff), max_normalized(&s.top));
        for k in 0..kernels {
            writeln!(csv, "{k},{},{},{},{},{}", modality(k), s.eff[k], en[k], s.top[k], tn[k]).ok();
        }
        files.insert("kernel_impact.csv", csv);

        let mut csv = String::from("kernel,stage,n_stage,eff,top\n");
        for k in 0..kernels {
            for j in 0..NUM_STAGES {
                writeln!(
                    csv,
                    "{k},{},{},{},{}",
                    StageLabel::ALL[j],
                    s.n_stage[j],
                    s.eff_stage[k][j],
                    s.top_stage[k][j]
                )
                .ok();
            }
        }
        files.insert("stage_impact.csv", csv);

        let mut csv = String::from("recording,index,label,class,predicted");
        (0..kernels).for_each(|k| csv += &format!(",k{k}"));
        csv.push('\n');
        for e in &self.effects {
            write!(
                csv,
                "{},{},{},{},{}",
                e.recording,
                e.index,
                e.label,
                StageLabel::ALL[e.class],
                StageLabel::ALL[e.predicted]
            )
            .ok();
            e.totals.iter().for_each(|v| csv += &format!(",{v}"));
            csv.push('\n');
        }
        files.insert("epoch_effects.csv", csv);

        let mut csv = String::from("kernel,stage_a,stage_b,t,df,p,significant\n");
        for k in 0..kernels {
            let mut groups: [Vec<f64>; NUM_STAGES] = Default::default();
            self.effects.iter().for_each(|e| groups[e.label.index()].push(e.totals[k]));
            for (a, b, t) in pairwise(&groups) {
                writeln!(
                    csv,
                    "{k},{},{},{},{},{},{}",
                    StageLabel::ALL[a],
                    StageLabel::ALL[b],
                    t.t,
                    t.df,
                    t.p,
                    t.significant()
                )
                .ok();
            }
        }
        files.insert("stage_tests.csv", csv);

        let ratios = self.ratios();
        let mut csv = String::from("recording,index,stage,ratio\n");
        let mut groups: [Vec<f64>; NUM_STAGES] = Default::default();
        for (rec, index, stage, r) in &ratios {
            let shown = r.map(|v| v.to_string()).unwrap_or_default();
            writeln!(csv, "{rec},{index},{stage},{shown}").ok();
            if let Some(v) = r {
                groups[stage.index()].push(*v);
            }
        }
        files.insert("modality_ratio.csv", csv);
        let mut csv = String::from("stage_a,stage_b,t,df,p,significant\n");
        for (a, b, t) in pairwise(&groups) {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                StageLabel::ALL[a],
                StageLabel::ALL[b],
                t.t,
                t.df,
                t.p,
                t.significant()
            )
            .ok();
        }
        files.insert("modality_tests.csv", csv);

        let mut csv = String::from("recording,epoch,kernel,t,value\n");
        for (rec, index, k, t, v) in &self.traces {
            writeln!(csv, "{rec},{index},{k},{t},{v}").ok();
        }
        files.insert("effect_traces.csv", csv);

        if let Some(a) = &self.agreement {
            files.insert("agreement.csv", a.to_csv());
        }

        for (name, body) in &files {
            std::fs::write(dir.join(name), body)?;
        }
        let mut names: Vec<String> = files.keys().map(|s| s.to_string()).collect();
        names.push("manifest.json".into());
        let manifest = ReportManifest {
            epochs: self.effects.len(),
            kernels,
            eeg_kernels: self.eeg_kernels,
            n_stage: s.n_stage,
            skipped_stages: s.skipped.clone(),
            undefined_ratios: ratios.iter().filter(|r| r.3.is_none()).count(),
            options: opts.clone(),
            files: names,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Paths of the files a report may contain.
pub fn report_files(dir: &Path) -> Vec<PathBuf> {
    [
        "kernel_params.csv",
        "kernel_waveforms.csv",
        "kernel_spectra.csv",
        "kernel_impact.csv",
        "stage_impact.csv",
        "epoch_effects.csv",
        "stage_tests.csv",
        "modality_ratio.csv",
        "modality_tests.csv",
        "effect_traces.csv",
        "manifest.json",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}
