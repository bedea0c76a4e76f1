//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use gaborscope::autodiff::gradcheck::{relative_error, GradCheck, GradCheckReport};
use gaborscope::autodiff::{BnMode, FrozenStats, Graph, NodeId, Padding};
use gaborscope::dataset::LabeledEpoch;
use gaborscope::network::{Batch, Mode, SingleEpochArch, SingleEpochNet};
use gaborscope::stage::NUM_STAGES;
use gaborscope::{Result, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.1, 1): keeps ReLU probes off the kink.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_probes(rng: &mut ChaCha8Rng, params: &[Tensor<f64>], n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| {
            let p = rng.random_range(0..params.len());
            (p, rng.random_range(0..params[p].len()))
        })
        .collect()
}

type Build<'a> = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a>;

/// Every differentiable primitive, each checked on `probes` random elements
/// of its inputs with central differences.
pub fn primitive_reports(seed: u64, probes: usize, check: GradCheck) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    let frozen_mean = vec![0.3, -0.2, 0.1];
    let frozen_var = vec![0.5, 1.7, 0.9];
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "conv1d (valid, bias)",
            vec![
                uniform(&mut r, &[2, 3, 12], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 5], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
            ],
            Box::new(|g, p| g.conv1d(p[0], p[1], Some(p[2]), Padding::Valid)),
        ),
        (
            "conv1d (same)",
            vec![uniform(&mut r, &[2, 3, 11], -1.0, 1.0), uniform(&mut r, &[4, 3, 3], -1.0, 1.0)],
            Box::new(|g, p| g.conv1d(p[0], p[1], None, Padding::Same)),
        ),
        (
            "mix_conv",
            vec![
                uniform(&mut r, &[2, 3, 10], -1.0, 1.0),
                uniform(&mut r, &[4, 3, 1], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
                uniform(&mut r, &[5, 4, 3], -1.0, 1.0),
                uniform(&mut r, &[5], -1.0, 1.0),
            ],
            Box::new(|g, p| g.mix_conv(p[0], p[1], p[2], p[3], p[4], Padding::Same)),
        ),
        ("relu", vec![off_zero(&mut r, &[3, 7])], Box::new(|g, p| g.relu(p[0]))),
        (
            "maxpool1d",
            vec![uniform(&mut r, &[2, 3, 10], -1.0, 1.0)],
            Box::new(|g, p| g.maxpool1d(p[0], 3, 3)),
        ),
        (
            "batchnorm (train, [n, c, len])",
            vec![
                uniform(&mut r, &[4, 3, 5], -1.0, 1.0),
                uniform(&mut r, &[3], 0.5, 1.5),
                uniform(&mut r, &[3], -0.5, 0.5),
            ],
            Box::new(|g, p| Ok(g.batchnorm(p[0], p[1], p[2], BnMode::Train)?.0)),
        ),
        (
            "batchnorm (train, [n, c])",
            vec![
                uniform(&mut r, &[6, 4], -1.0, 1.0),
                uniform(&mut r, &[4], 0.5, 1.5),
                uniform(&mut r, &[4], -0.5, 0.5),
            ],
            Box::new(|g, p| Ok(g.batchnorm(p[0], p[1], p[2], BnMode::Train)?.0)),
        ),
        (
            "batchnorm (eval)",
            vec![
                uniform(&mut r, &[4, 3, 5], -1.0, 1.0),
                uniform(&mut r, &[3], 0.5, 1.5),
                uniform(&mut r, &[3], -0.5, 0.5),
            ],
            Box::new(|g, p| {
                let stats = FrozenStats {
                    mean: &frozen_mean,
                    var: &frozen_var,
                };
                Ok(g.batchnorm(p[0], p[1], p[2], BnMode::Eval(stats))?.0)
            }),
        ),
        (
            "dropout",
            vec![uniform(&mut r, &[4, 6], -1.0, 1.0)],
            Box::new(|g, p| g.dropout(p[0], 0.3, &mut rng(7))),
        ),
        (
            "dense",
            vec![
                uniform(&mut r, &[3, 6], -1.0, 1.0),
                uniform(&mut r, &[4, 6], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
            ],
            Box::new(|g, p| g.dense(p[0], p[1], p[2])),
        ),
        (
            "reshape",
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)],
            Box::new(|g, p| g.reshape(p[0], &[2, 12])),
        ),
        (
            "concat",
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 2, 4], -1.0, 1.0)],
            Box::new(|g, p| g.concat(&[p[0], p[1]])),
        ),
        (
            "add",
            vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0)],
            Box::new(|g, p| g.add(p[0], p[1])),
        ),
        (
            "lstm (9 steps)",
            vec![
                uniform(&mut r, &[2, 9, 5], -1.0, 1.0),
                uniform(&mut r, &[12, 5], -0.6, 0.6),
                uniform(&mut r, &[12, 3], -0.6, 0.6),
                uniform(&mut r, &[12], -0.6, 0.6),
            ],
            Box::new(|g, p| g.lstm(p[0], p[1], p[2], p[3])),
        ),
        (
            "reverse_time + last_step",
            vec![
                uniform(&mut r, &[2, 9, 5], -1.0, 1.0),
                uniform(&mut r, &[12, 5], -0.6, 0.6),
                uniform(&mut r, &[12, 3], -0.6, 0.6),
                uniform(&mut r, &[12], -0.6, 0.6),
            ],
            Box::new(|g, p| {
                let x = g.reverse_time(p[0])?;
                let h = g.lstm(x, p[1], p[2], p[3])?;
                g.last_step(h)
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![uniform(&mut r, &[4, 5], -2.0, 2.0)],
            Box::new(|g, p| g.softmax_cross_entropy(p[0], &[0, 3, 1, 4])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, build)| {
            let pr = random_probes(&mut r, &params, probes);
            let report = check.run(&params, Some(&pr), &*build).expect(name);
            (name, report)
        })
        .collect()
}

/// Gabor synthesis gradients with respect to `u`, `sigma` and `f`, on
/// `probes` random elements of each.
pub fn gabor_report(seed: u64, probes: usize) -> [(&'static str, GradCheckReport); 3] {
    let mut r = rng(seed);
    let k = 32;
    let u = uniform(&mut r, &[k], -0.8, 0.8);
    let s = uniform(&mut r, &[k], 0.05, 1.0).map(|v| if v > 0.5 { v } else { -v });
    let f = uniform(&mut r, &[k], 0.5, 25.0);
    let params = [u, s, f];
    let check = GradCheck::new(1e-6, 1e-4);
    let names = ["du", "dsigma", "df"];
    std::array::from_fn(|i| {
        let pr: Vec<(usize, usize)> = (0..probes).map(|_| (i, r.random_range(0..k))).collect();
        let report = check.run(&params, Some(&pr), |g, p| g.gabor(p[0], p[1], p[2])).unwrap();
        (names[i], report)
    })
}

/// A scaled-down single-epoch network: full-size front end, narrow trunk.
pub fn small_arch(eeg_kernels: usize, eog_kernels: usize, width: usize) -> SingleEpochArch {
    SingleEpochArch {
        eeg_kernels,
        eog_kernels,
        mix_filters: width,
        block_filters: vec![width; 5],
        hidden: vec![2 * width],
        ..Default::default()
    }
}

/// Gives batch-norm running statistics non-trivial values so eval mode is
/// not the identity.
pub fn perturb_running_stats(net: &mut SingleEpochNet<f64>, seed: u64) {
    let mut r = rng(seed);
    for i in 0..net.params.len() {
        let name = net.params.name(i).to_string();
        let t = net.params.at_mut(i);
        if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        } else if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
        }
    }
}

pub fn eval_loss(net: &SingleEpochNet<f64>, batch: &Batch<f64>) -> f64 {
    let mut g = Graph::new();
    let out = net.forward(&mut g, batch, Mode::Eval).unwrap();
    let loss = g.softmax_cross_entropy(out.logits, &batch.labels).unwrap();
    g.value(loss).data()[0]
}

pub struct NetworkCheck {
    pub max_rel_error: f64,
    pub probes: usize,
    pub gabor_probes: usize,
}

/// End-to-end loss gradients of a 64-bit single-epoch network (eval mode, so
/// no dropout and frozen batch norm) against central differences on
/// `probes` parameters, the first six being `u`, `sigma`, `f` of each bank.
pub fn network_check(seed: u64, probes: usize, epochs: &[LabeledEpoch]) -> NetworkCheck {
    let mut net = SingleEpochNet::init(small_arch(4, 2, 4), seed).unwrap().cast::<f64>();
    perturb_running_stats(&mut net, seed);
    let refs: Vec<&LabeledEpoch> = epochs.iter().collect();
    let batch = Batch::<f64>::from_epochs(&refs).unwrap();

    let mut g = Graph::new();
    let out = net.forward(&mut g, &batch, Mode::Eval).unwrap();
    let loss = g.softmax_cross_entropy(out.logits, &batch.labels).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Option<Tensor<f64>>> = out.params.iter().map(|&id| g.grad(id).cloned()).collect();

    let mut r = rng(seed ^ 0xa5a5);
    let mut chosen = Vec::new();
    for bank in ["eeg", "eog"] {
        for leaf in ["u", "sigma", "f"] {
            let i = net.params.position(&format!("single.{bank}.{leaf}")).unwrap();
            chosen.push((i, r.random_range(0..net.params.at(i).len())));
        }
    }
    let gabor_probes = chosen.len();
    let trainable: Vec<usize> = (0..net.params.len()).filter(|&i| net.is_trainable(i)).collect();
    while chosen.len() < probes {
        let i = trainable[r.random_range(0..trainable.len())];
        chosen.push((i, r.random_range(0..net.params.at(i).len())));
    }

    let delta = 1e-6;
    let mut worst: f64 = 0.0;
    for &(i, e) in &chosen {
        let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[e]);
        let orig = net.params.at(i).data()[e];
        net.params.at_mut(i).data_mut()[e] = orig + delta;
        let plus = eval_loss(&net, &batch);
        net.params.at_mut(i).data_mut()[e] = orig - delta;
        let minus = eval_loss(&net, &batch);
        net.params.at_mut(i).data_mut()[e] = orig;
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * delta), 1e-6));
    }
    NetworkCheck {
        max_rel_error: worst,
        probes: chosen.len(),
        gabor_probes,
    }
}

/// Logits computed from given Gabor-layer activations `[n, kernels, len]`,
/// following the network's eval-mode layer sequence. Lets tests perturb the
/// activations directly.
pub fn downstream_logits(net: &SingleEpochNet<f64>, gl: &Tensor<f64>) -> Vec<f64> {
    let n = gl.shape()[0];
    let mut g = Graph::new();
    let p = |g: &mut Graph<f64>, name: &str| g.input(net.params.get(name).unwrap().clone());
    let x = g.input(gl.clone());
    let mut h = g.relu(x).unwrap();
    for i in 1..=net.arch.block_filters.len() {
        let (w, b) = (p(&mut g, &format!("single.conv{i}.w")), p(&mut g, &format!("single.conv{i}.b")));
        h = if i == 1 {
            let (wm, bm) = (p(&mut g, "single.mix.w"), p(&mut g, "single.mix.b"));
            g.mix_conv(h, wm, bm, w, b, Padding::Same).unwrap()
        } else {
            g.conv1d(h, w, Some(b), Padding::Same).unwrap()
        };
        h = g.relu(h).unwrap();
        h = g.maxpool1d(h, net.arch.pool, net.arch.pool).unwrap();
        let (gamma, beta) = (p(&mut g, &format!("single.bn{i}.gamma")), p(&mut g, &format!("single.bn{i}.beta")));
        let stats = FrozenStats {
            mean: net.params.get(&format!("single.bn{i}.running_mean")).unwrap().data(),
            var: net.params.get(&format!("single.bn{i}.running_var")).unwrap().data(),
        };
        h = g.batchnorm(h, gamma, beta, BnMode::Eval(stats)).unwrap().0;
    }
    h = g.reshape(h, &[n, net.arch.flatten_len()]).unwrap();
    let layers = net.arch.hidden.len() + 1;
    for i in 1..=layers {
        let (w, b) = (p(&mut g, &format!("single.fc{i}.w")), p(&mut g, &format!("single.fc{i}.b")));
        h = g.dense(h, w, b).unwrap();
        if i < layers {
            h = g.relu(h).unwrap();
        }
    }
    g.value(h).data().to_vec()
}

/// Per-definition metrics straight from label sequences, without a
/// confusion matrix.
#[derive(Debug)]
pub struct NaiveMetrics {
    pub recall: [Option<f64>; NUM_STAGES],
    pub precision: [Option<f64>; NUM_STAGES],
    pub f1: [Option<f64>; NUM_STAGES],
    pub accuracy: f64,
    pub mf1: f64,
    pub kappa: f64,
}

pub fn naive_metrics(truth: &[usize], pred: &[usize]) -> NaiveMetrics {
    let n = truth.len();
    let mut recall = [None; NUM_STAGES];
    let mut precision = [None; NUM_STAGES];
    let mut f1 = [None; NUM_STAGES];
    let mut agree = 0u64;
    let mut chance = 0u64;
    for s in 0..NUM_STAGES {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == s && p == s).count();
        let actual = truth.iter().filter(|&&t| t == s).count();
        let predicted = pred.iter().filter(|&&p| p == s).count();
        agree += tp as u64;
        chance += (actual * predicted) as u64;
        if actual > 0 {
            recall[s] = Some(tp as f64 / actual as f64);
        }
        if predicted > 0 {
            precision[s] = Some(tp as f64 / predicted as f64);
        }
        if actual > 0 && predicted > 0 {
            f1[s] = Some(2.0 * tp as f64 / (actual + predicted) as f64);
        }
    }
    let defined: Vec<f64> = f1.iter().flatten().copied().collect();
    let nn = (n * n) as u64;
    let kappa = if chance == nn {
        1.0
    } else {
        (n as f64 * agree as f64 - chance as f64) / (nn as f64 - chance as f64)
    };
    NaiveMetrics {
        recall,
        precision,
        f1,
        accuracy: agree as f64 / n as f64,
        mf1: defined.iter().sum::<f64>() / defined.len().max(1) as f64,
        kappa,
    }
}

/// Published night-holdout confusion rates in percent, rows are
/// the reference stage.
pub const PUBLISHED_RATES: [[f64; NUM_STAGES]; NUM_STAGES] = [
    [64.84, 3.02, 0.26, 0.02, 0.49],
    [0.06, 4.89, 0.35, 0.00, 0.14],
    [0.06, 1.74, 13.73, 0.74, 0.46],
    [0.00, 0.00, 0.06, 2.97, 0.00],
    [0.01, 0.11, 0.15, 0.00, 5.90],
];

/// One signal of a hand-built EDF file.
pub struct FixtureSignal {
    pub label: String,
    pub physical: (f64, f64),
    pub digital: (i16, i16),
    pub samples_per_record: usize,
    /// Digital samples, record after record.
    pub data: Vec<i16>,
}

fn field(out: &mut Vec<u8>, text: &str, width: usize) {
    assert!(text.len() <= width, "`{text}` wider than {width}");
    out.extend(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
}

/// Writes an EDF(+) file byte by byte from the format description, without
/// going through the library writer. `declared_records` goes into the header
/// even if the data holds a different number of records.
pub fn edf_fixture(signals: &[FixtureSignal], records: usize, declared_records: usize, record_s: f64, plus: bool) -> Vec<u8> {
    let ns = signals.len();
    let mut out = Vec::new();
    field(&mut out, "0", 8);
    field(&mut out, "X X X X", 80);
    field(&mut out, "Startdate 01-JAN-2001 X X X", 80);
    field(&mut out, "01.01.01", 8);
    field(&mut out, "00.00.00", 8);
    field(&mut out, &(256 * (ns + 1)).to_string(), 8);
    field(&mut out, if plus { "EDF+C" } else { "" }, 44);
    field(&mut out, &declared_records.to_string(), 8);
    field(&mut out, &record_s.to_string(), 8);
    field(&mut out, &ns.to_string(), 4);
    let each = |out: &mut Vec<u8>, width: usize, f: &dyn Fn(&FixtureSignal) -> String| {
        for s in signals {
            field(out, &f(s), width);
        }
    };
    each(&mut out, 16, &|s| s.label.clone());
    each(&mut out, 80, &|_| String::new());
    each(&mut out, 8, &|_| "uV".into());
    each(&mut out, 8, &|s| s.physical.0.to_string());
    each(&mut out, 8, &|s| s.physical.1.to_string());
    each(&mut out, 8, &|s| s.digital.0.to_string());
    each(&mut out, 8, &|s| s.digital.1.to_string());
    each(&mut out, 80, &|_| String::new());
    each(&mut out, 8, &|s| s.samples_per_record.to_string());
    each(&mut out, 32, &|_| String::new());
    assert_eq!(out.len(), 256 * (ns + 1));
    for r in 0..records {
        for s in signals {
            let spr = s.samples_per_record;
            for v in &s.data[r * spr..(r + 1) * spr] {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

/// An annotation signal carrying the given TALs, one chunk of
/// `samples_per_record` samples per record. `tals[r]` lists
/// `(onset, duration, text)` for record `r`.
pub fn annotation_signal(tals: &[Vec<(f64, f64, &str)>], record_s: f64, samples_per_record: usize) -> FixtureSignal {
    let mut data = Vec::new();
    for (r, list) in tals.iter().enumerate() {
        let mut bytes = format!("+{}\x14\x14\0", r as f64 * record_s).into_bytes();
        for (onset, duration, text) in list {
            bytes.extend(format!("+{onset}\x15{duration}\x14{text}\x14\0").into_bytes());
        }
        assert!(bytes.len() <= 2 * samples_per_record, "annotations overflow the record");
        bytes.resize(2 * samples_per_record, 0);
        data.extend(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])));
    }
    FixtureSignal {
        label: "EDF Annotations".into(),
        physical: (-1.0, 1.0),
        digital: (-32768, 32767),
        samples_per_record,
        data,
    }
}

/// Physical value of a digital sample by the EDF linear map.
pub fn edf_physical(d: i16, physical: (f64, f64), digital: (i16, i16)) -> f64 {
    let (pmin, pmax) = physical;
    let (dmin, dmax) = (digital.0 as f64, digital.1 as f64);
    pmin + (d as f64 - dmin) * (pmax - pmin) / (dmax - dmin)
}
