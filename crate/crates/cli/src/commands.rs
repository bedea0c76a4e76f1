use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gaborscope::checkpoint::Checkpoint;
use gaborscope::dataset::{build_split, epoch_census, DatasetSplit, LabeledEpoch};
use gaborscope::edf::{self, hypnogram};
use gaborscope::gabor;
use gaborscope::interpret::{self, Objective, ReportOptions, Target};
use gaborscope::metrics::{self, ConfusionMatrix, CrossValidation, MetricReport};
use gaborscope::network::{argmax, softmax_rows, MultiEpochNet, SingleEpochNet};
use gaborscope::stage::NUM_STAGES;
use gaborscope::store::{self, EpochStore, Labels, StoreWriter};
use gaborscope::synth::{self, CohortSpec};
use gaborscope::train::{self, Ablation, MultiData, TrainConfig};
use gaborscope::StageLabel;
use serde_json::json;

use crate::manifest::{self, Outputs};
use crate::predictions::{self, Row};
use crate::*;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(CliError::io(path))
}

fn outputs(dir: &Path) -> CliResult<Outputs> {
    Outputs::new(dir).map_err(CliError::io(dir))
}

fn write(out: &mut Outputs, name: &str, body: impl AsRef<[u8]>) -> CliResult<()> {
    let p = out.path(name);
    out.write(name, body).map_err(CliError::io(p))?;
    Ok(())
}

fn finish(out: Outputs, command: &str, config: serde_json::Value, seed: Option<u64>, fp: Option<String>) -> CliResult<()> {
    let dir = out.dir.clone();
    let m = out.finish(command, config, seed, fp).map_err(CliError::io(dir))?;
    log::info!("{command}: wrote {} files", m.files.len());
    Ok(())
}

fn in_file(path: &Path, e: gaborscope::Error) -> CliError {
    match e {
        gaborscope::Error::Config(m) => gaborscope::Error::Config(m).into(),
        other => gaborscope::Error::Data(format!("{}: {other}", path.display())).into(),
    }
}

fn open_store(dir: &Path) -> CliResult<(EpochStore, String)> {
    let store = EpochStore::open(dir)?;
    let fp = manifest::fingerprint(&store.files()).map_err(CliError::io(dir))?;
    Ok((store, fp))
}

fn load_split(path: &Path) -> CliResult<DatasetSplit> {
    serde_json::from_slice(&read(path)?).map_err(|e| in_file(path, e.into()))
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = String::from_utf8(read(path)?).map_err(|_| gaborscope::Error::Config(format!("{} is not UTF-8", path.display())))?;
    TrainConfig::parse(&text).map_err(|e| match e {
        gaborscope::Error::Config(m) => gaborscope::Error::Config(format!("{}: {m}", path.display())).into(),
        other => in_file(path, other),
    })
}

fn apply_ablation(cfg: &mut TrainConfig, a: Option<AblationArg>) {
    match a {
        Some(AblationArg::PlainConv) => cfg.ablation = Ablation::PlainConv200,
        Some(AblationArg::Gabor) => cfg.ablation = Ablation::Gabor,
        None => {}
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::from_bytes(&read(path)?).map_err(|e| in_file(path, e))
}

fn save_checkpoint(out: &mut Outputs, name: &str, ck: &Checkpoint) -> CliResult<()> {
    write(out, name, ck.to_bytes()?)?;
    out.record_checkpoint(name);
    Ok(())
}

fn stage_header() -> String {
    StageLabel::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
}

fn counts_row(c: &[usize; NUM_STAGES]) -> String {
    let cells: Vec<String> = c.iter().map(|v| v.to_string()).collect();
    format!("{},{}", cells.join(","), c.iter().sum::<usize>())
}

pub fn synth(a: SynthArgs, seed: Option<u64>) -> CliResult<()> {
    let spec = CohortSpec {
        subjects: a.subjects,
        nights: a.nights,
        epochs: a.epochs,
        persistence: a.persistence,
        corruption: a.corruption,
    };
    if spec.subjects == 0 || spec.nights == 0 || spec.nights > 9 || spec.epochs == 0 || spec.subjects > 99 {
        return Err(CliError::Usage("need 1..=99 subjects, 1..=9 nights and at least one epoch".into()));
    }
    if !(0.0..=1.0).contains(&spec.persistence) || !(0.0..=1.0).contains(&spec.corruption) {
        return Err(CliError::Usage("persistence and corruption are probabilities".into()));
    }
    let cohort = synth::markov_cohort(&spec, seed.unwrap_or(0));
    let mut out = outputs(&a.out_dir)?;
    let mut truth = String::from("recording,epoch,stage,corrupted\n");
    for r in &cohort {
        let name = format!("{}.edf", r.id);
        write(&mut out, &name, edf::write_edf(&r.to_recording(), Default::default())?)?;
        for (i, (l, c)) in r.labels.iter().zip(&r.corrupted).enumerate() {
            writeln!(truth, "{},{i},{l},{c}", r.id).ok();
        }
    }
    write(&mut out, "synth_truth.csv", truth)?;
    finish(out, "synth", json!({ "args": a }), seed, None)
}

fn edf_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("edf")))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_hypnogram(p: &Path) -> bool {
    file_name(p).to_ascii_lowercase().contains("hypnogram")
}

/// Stage annotations for a recording without embedded ones: `<id>.csv`,
/// `<stem>.csv`, or a `*Hypnogram*.edf` sharing the first seven characters
/// of the id (the Sleep-EDF naming scheme).
fn external_hypnogram(dir: &Path, stem: &str, id: &str, hyps: &[PathBuf]) -> CliResult<Option<(String, Vec<edf::Annotation>)>> {
    for name in [format!("{id}.csv"), format!("{stem}.csv")] {
        let p = dir.join(&name);
        if p.exists() {
            let text = String::from_utf8_lossy(&read(&p)?).into_owned();
            return Ok(Some((name, hypnogram::parse_hypnogram_csv(&text).map_err(|e| in_file(&p, e))?)));
        }
    }
    let prefix = &id[..id.len().min(7)];
    if let Some(p) = hyps.iter().find(|p| file_name(p).starts_with(prefix)) {
        let rec = edf::parse_edf(&read(p)?).map_err(|e| in_file(p, e))?;
        return Ok(Some((file_name(p), rec.annotations)));
    }
    Ok(None)
}

pub fn ingest(a: IngestArgs, seed: Option<u64>) -> CliResult<()> {
    let files = edf_files(&a.data_dir)?;
    let (hyps, psgs): (Vec<PathBuf>, Vec<PathBuf>) = files.into_iter().partition(|p| is_hypnogram(p));
    if psgs.is_empty() {
        return Err(gaborscope::Error::Data(format!("no EDF recordings in {}", a.data_dir.display())).into());
    }
    let mut out = outputs(&a.out_dir)?;
    let mut writer = StoreWriter::create(&a.out_dir, &a.eeg_channel, &a.eog_channel)?;
    for path in &psgs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let id = stem.strip_suffix("-PSG").unwrap_or(&stem).to_string();
        let mut rec = edf::parse_edf(&read(path)?).map_err(|e| in_file(path, e))?;
        rec.id = id.clone();
        let mut source = file_name(path);
        let external;
        let labels = if !hypnogram::stage_annotations(&rec.annotations).is_empty() {
            Labels::Embedded
        } else {
            match external_hypnogram(&a.data_dir, &stem, &id, &hyps)? {
                Some((name, anns)) => {
                    source = format!("{source}+{name}");
                    external = anns;
                    Labels::Annotations(&external)
                }
                None => {
                    return Err(in_file(
                        path,
                        gaborscope::Error::Hypnogram("no stage annotations and no hypnogram file".into()),
                    ));
                }
            }
        };
        let epochs = store::prepare(rec, &a.eeg_channel, &a.eog_channel, labels).map_err(|e| in_file(path, e))?;
        log::info!("{id}: {} epochs", epochs.len());
        writer.add(&id, &source, &epochs)?;
    }
    let index = writer.finish()?;
    for r in &index.recordings {
        out.record(&r.file);
    }
    out.record(store::INDEX_FILE);
    let mut census = format!("recording,subject,night,{},total\n", stage_header());
    for r in &index.recordings {
        writeln!(census, "{},{},{},{}", r.id, r.subject, r.night, counts_row(&r.counts.0)).ok();
    }
    writeln!(census, "all,,,{}", counts_row(&index.census().0)).ok();
    write(&mut out, "census.csv", census)?;
    let (_, fp) = open_store(&a.out_dir)?;
    finish(out, "ingest", json!({ "args": a }), seed, Some(fp))
}

pub fn split(a: SplitArgs, seed: Option<u64>) -> CliResult<()> {
    let (store, fp) = open_store(&a.data_dir)?;
    let seed_v = seed.unwrap_or(0);
    let split = build_split(&store.index.infos(), a.strategy, a.fold, seed_v)?;
    let census = epoch_census(&split);
    let mut out = outputs(&a.out_dir)?;
    write(
        &mut out,
        "split.json",
        serde_json::to_vec_pretty(&split).map_err(gaborscope::Error::from)?,
    )?;
    let mut csv = format!("set,recordings,{},total\n", stage_header());
    for (name, recs, c) in [
        ("train", &split.train_recordings, census.train),
        ("validation", &split.validation_recordings, census.validation),
        ("test", &split.test_recordings, census.test),
    ] {
        writeln!(csv, "{name},{},{}", recs.len(), counts_row(&c.0)).ok();
    }
    write(&mut out, "census.csv", csv)?;
    finish(out, "split", json!({ "args": a }), Some(seed_v), Some(fp))
}

pub fn init(a: InitArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    apply_ablation(&mut cfg, a.ablation);
    let seed_v = seed.unwrap_or(cfg.seed);
    cfg.seed = seed_v;
    let mut ck = Checkpoint::new(SingleEpochNet::init(cfg.effective_arch(), seed_v)?);
    ck.notes.insert("phase".into(), json!("init"));
    ck.notes.insert("seed".into(), json!(seed_v));
    let mut out = outputs(&a.out_dir)?;
    save_checkpoint(&mut out, "init.ckpt", &ck)?;
    finish(out, "init", json!({ "args": a, "train": cfg }), Some(seed_v), None)
}

fn split_sets(store: &EpochStore, split: &DatasetSplit) -> CliResult<(Vec<LabeledEpoch>, Vec<LabeledEpoch>)> {
    if split.validation.is_empty() {
        return Err(gaborscope::Error::Config(format!("split {} fold {} has no validation recordings", split.strategy, split.fold)).into());
    }
    Ok((store.select(&split.train)?, store.select(&split.validation)?))
}

pub fn train_single(a: TrainSingleArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    apply_ablation(&mut cfg, a.ablation);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (store, fp) = open_store(&a.data_dir)?;
    let split = load_split(&a.split)?;
    let (train_set, val_set) = split_sets(&store, &split)?;
    log::info!("train-single: {} training and {} validation epochs", train_set.len(), val_set.len());
    let net = SingleEpochNet::init(cfg.effective_arch(), cfg.seed)?;
    let outcome = train::train_single(&cfg, net, &train_set, &val_set)?;

    let mut ck = Checkpoint::new(outcome.best);
    for (k, v) in [
        ("phase", json!("single")),
        ("seed", json!(cfg.seed)),
        ("best_iteration", json!(outcome.best_iteration)),
        ("best_val_kappa", json!(outcome.best_val_kappa)),
        ("iterations_run", json!(outcome.iterations_run)),
        ("split", json!(format!("{}#{}", split.strategy, split.fold))),
    ] {
        ck.notes.insert(k.into(), v);
    }
    let mut out = outputs(&a.out_dir)?;
    save_checkpoint(&mut out, "single.ckpt", &ck)?;
    write(&mut out, "train_single_log.csv", outcome.log.to_csv())?;
    let summary = json!({
        "best_iteration": outcome.best_iteration,
        "best_val_kappa": outcome.best_val_kappa,
        "iterations_run": outcome.iterations_run,
    });
    write(
        &mut out,
        "train_single_summary.json",
        serde_json::to_string_pretty(&summary).map_err(gaborscope::Error::from)? + "\n",
    )?;
    finish(out, "train-single", json!({ "args": a, "train": cfg }), Some(cfg.seed), Some(fp))
}

pub fn train_multi(a: TrainMultiArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (store, fp) = open_store(&a.data_dir)?;
    let split = load_split(&a.split)?;
    let base = load_checkpoint(&a.checkpoint)?;
    let (train_set, val_set) = split_sets(&store, &split)?;
    let train_data = MultiData::build(&base.single, &train_set, cfg.eval_chunk)?;
    let val_data = MultiData::build(&base.single, &val_set, cfg.eval_chunk)?;
    let outcome = train::train_multi(&cfg, MultiEpochNet::init(cfg.seed)?, &train_data, &val_data)?;

    let mut ck = base;
    ck.multi = Some(outcome.best);
    for (k, v) in [
        ("multi_seed", json!(cfg.seed)),
        ("multi_best_iteration", json!(outcome.best_iteration)),
        ("multi_best_val_kappa", json!(outcome.best_val_kappa)),
        ("multi_iterations_run", json!(outcome.iterations_run)),
    ] {
        ck.notes.insert(k.into(), v);
    }
    let mut out = outputs(&a.out_dir)?;
    save_checkpoint(&mut out, "model.ckpt", &ck)?;
    write(&mut out, "train_multi_log.csv", outcome.log.to_csv())?;
    finish(out, "train-multi", json!({ "args": a, "train": cfg }), Some(cfg.seed), Some(fp))
}

fn check_selection(sel: &Selection) -> CliResult<()> {
    if !sel.recordings.is_empty() && sel.split.is_some() {
        return Err(CliError::Usage("use either --split or --recording, not both".into()));
    }
    Ok(())
}

fn select(sel: &Selection, store: &EpochStore) -> CliResult<Vec<LabeledEpoch>> {
    check_selection(sel)?;
    if !sel.recordings.is_empty() {
        let mut all = Vec::new();
        for id in &sel.recordings {
            all.extend(store.load(id)?);
        }
        return Ok(all);
    }
    let Some(path) = &sel.split else {
        let mut all = Vec::new();
        for r in &store.index.recordings {
            all.extend(store.load(&r.id)?);
        }
        return Ok(all);
    };
    let split = load_split(path)?;
    let refs = match sel.set {
        SetArg::Train => &split.train,
        SetArg::Validation => &split.validation,
        SetArg::Test => &split.test,
    };
    Ok(store.select(refs)?)
}

pub fn score(a: ScoreArgs, seed: Option<u64>) -> CliResult<()> {
    check_selection(&a.selection)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (store, fp) = open_store(&a.selection.data_dir)?;
    let epochs = select(&a.selection, &store)?;
    if epochs.is_empty() {
        return Err(gaborscope::Error::Data("no epochs selected".into()).into());
    }
    let data = MultiData::build(&ck.single, &epochs, 32)?;
    let single_probs = softmax_rows(&data.single_logits);
    let multi_probs = match &ck.multi {
        Some(m) => Some(softmax_rows(&m.predict(&data.windows)?)),
        None => None,
    };
    let mut rows = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (rec, epoch) = data.origin[i].clone();
        let single = StageLabel::ALL[argmax(&single_probs[i])];
        let (stage, probs, single) = match &multi_probs {
            Some(mp) => (StageLabel::ALL[argmax(&mp[i])], mp[i], Some(single)),
            None => (single, single_probs[i], None),
        };
        rows.push(Row {
            recording: rec.clone(),
            epoch,
            stage,
            single,
            probabilities: Some(probs),
        });
        truth.push(Row {
            recording: rec,
            epoch,
            stage: data.labels[i],
            single: None,
            probabilities: None,
        });
    }
    let mut out = outputs(&a.out_dir)?;
    write(&mut out, "predictions.csv", predictions::write(&rows)?)?;
    write(&mut out, "truth.csv", predictions::write(&truth)?)?;
    finish(out, "score", json!({ "args": a }), seed, Some(fp))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "n/a".into())
}

fn print_report(title: &str, cv: &CrossValidation) {
    let r: &MetricReport = &cv.pooled;
    println!("{title}: {} epochs", r.total);
    println!("  stage   recall  precision  F1");
    for (s, m) in StageLabel::ALL.iter().zip(&r.stages) {
        println!(
            "  {:<6} {:>7} {:>9} {:>7}",
            s.name(),
            opt_pct(m.recall),
            opt_pct(m.precision),
            opt_pct(m.f1)
        );
    }
    println!("  accuracy {}%  MF1 {}%  kappa {:.2}", pct(r.accuracy), pct(r.mf1), r.kappa);
    if cv.folds.len() > 1 {
        println!(
            "  per fold: accuracy {}±{}%  MF1 {}±{}%  kappa {:.2}±{:.2}",
            pct(cv.accuracy.mean),
            pct(cv.accuracy.std),
            pct(cv.mf1.mean),
            pct(cv.mf1.std),
            cv.kappa.mean,
            cv.kappa.std
        );
    }
}

pub fn eval(a: EvalArgs, seed: Option<u64>) -> CliResult<()> {
    if a.predictions.len() != a.truth.len() {
        return Err(CliError::Usage("pass one --truth file per --predictions file".into()));
    }
    let mut finals = Vec::new();
    let mut singles = Vec::new();
    let mut agreement = metrics::AgreementMatrix::default();
    let mut all_single = true;
    for (pp, tp) in a.predictions.iter().zip(&a.truth) {
        let preds = predictions::read(pp)?;
        let truth = predictions::truth_map(&predictions::read(tp)?);
        let mut t = Vec::with_capacity(preds.len());
        for r in &preds {
            let label = truth
                .get(&(r.recording.clone(), r.epoch))
                .ok_or_else(|| gaborscope::Error::Data(format!("{}: no truth for {} epoch {}", tp.display(), r.recording, r.epoch)))?;
            t.push(label.index());
        }
        let p: Vec<usize> = preds.iter().map(|r| r.stage.index()).collect();
        finals.push(metrics::confusion(&t, &p)?);
        if all_single && preds.iter().all(|r| r.single.is_some()) {
            let s: Vec<usize> = preds.iter().map(|r| r.single.map_or(0, |s| s.index())).collect();
            singles.push(metrics::confusion(&t, &s)?);
            let m = metrics::agreement_matrix(&s, &p, &t)?;
            for (acc, cell) in agreement.0.iter_mut().flatten().zip(m.0.iter().flatten()) {
                acc.total += cell.total;
                acc.corrected += cell.corrected;
                acc.corrupted += cell.corrupted;
            }
        } else {
            all_single = false;
        }
    }
    let final_cv = metrics::cross_validation(&finals)?;
    let single_cv = if all_single {
        Some(metrics::cross_validation(&singles)?)
    } else {
        None
    };
    let pooled = |ms: &[ConfusionMatrix]| {
        let mut c = ConfusionMatrix::default();
        ms.iter().for_each(|m| c.add(m));
        c
    };
    let mut out = outputs(&a.out_dir)?;
    let body = json!({
        "final": final_cv,
        "single": single_cv,
        "agreement": if all_single { Some(&agreement) } else { None },
    });
    write(
        &mut out,
        "metrics.json",
        serde_json::to_string_pretty(&body).map_err(gaborscope::Error::from)? + "\n",
    )?;
    write(&mut out, "confusion.csv", pooled(&finals).to_csv())?;
    print_report("final", &final_cv);
    if let Some(cv) = &single_cv {
        write(&mut out, "single_confusion.csv", pooled(&singles).to_csv())?;
        write(&mut out, "agreement.csv", agreement.to_csv())?;
        print_report("single-epoch", cv);
    }
    finish(out, "eval", json!({ "args": a }), seed, None)
}

pub fn interpret(a: InterpretArgs, seed: Option<u64>) -> CliResult<()> {
    check_selection(&a.selection)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (store, fp) = open_store(&a.selection.data_dir)?;
    let epochs = select(&a.selection, &store)?;
    let mut traces = Vec::new();
    for t in &a.traces {
        let parsed = t
            .rsplit_once(':')
            .and_then(|(r, i)| Some((r.to_string(), i.parse::<usize>().ok()?)));
        traces.push(parsed.ok_or_else(|| CliError::Usage(format!("--trace expects RECORDING:EPOCH, got `{t}`")))?);
    }
    let opts = ReportOptions {
        objective: match a.objective {
            ObjectiveArg::Logit => Objective::Logit,
            ObjectiveArg::Probability => Objective::Probability,
        },
        target: match a.target {
            TargetArg::True => Target::TrueLabel,
            TargetArg::Predicted => Target::Predicted,
        },
        traces,
        chunk: a.chunk.max(1),
    };
    let result = interpret::interpret(&ck.single, ck.multi.as_ref(), &epochs, &opts)?;
    let mut out = outputs(&a.out_dir)?;
    let report = result.write(&a.out_dir, Some(&ck.single), &opts)?;
    for f in report.files.iter().filter(|f| f.as_str() != "manifest.json") {
        out.record(f);
    }
    out.record("manifest.json");
    finish(out, "interpret", json!({ "args": a }), seed, Some(fp))
}

pub fn export_kernels(a: ExportArgs, seed: Option<u64>) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let banks = ck
        .single
        .banks()
        .ok_or_else(|| gaborscope::Error::Config("checkpoint has a plain convolution front end, not Gabor kernels".into()))?;
    let export = gabor::export_banks(&[&banks[0], &banks[1]]);
    let mut out = outputs(&a.out_dir)?;
    write(&mut out, "kernel_params.csv", export.params_csv())?;
    write(&mut out, "kernel_waveforms.csv", export.waveforms_csv())?;
    write(&mut out, "kernel_spectra.csv", export.spectra_csv())?;
    finish(out, "export-kernels", json!({ "args": a }), seed, None)
}
