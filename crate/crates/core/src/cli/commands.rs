// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::*;
use crate::apps::{
    bias_sweep, build_index_with_stats, concept_association_stats, Classifier, Edit, ManipulationRequest, Query,
    ReturnSpace, SearchIndex, SearchSpace,
};
use crate::concepts::{load_vocab, name_neurons, top_activating_samples, ConceptAssignment};
use crate::embedset::{
    fit_norm_stats, load_embeddings, save_embeddings, stats_sidecar_path, synthesize, EmbeddingSet, Modality,
    NormStats, SyntheticSpec,
};
use crate::error::{MsaeError, Result};
use crate::metrics::{
    activation_histogram, evaluate, progressive_recovery, train_probe, ActivationHistogram, EvalOptions,
    MetricsReport, ProbeConfig, ProbeModel, RecoveryPoint,
};
use crate::sae::{parse_k_list, AlphaWeighting, SaeConfig, Variant};
use crate::train::{load_checkpoint, save_checkpoint, train_with, Checkpoint, TrainConfig};

pub(super) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::FitStats(a) => fit_stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::Concepts(a) => concepts(a),
        Command::Search(a) => search(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Associate(a) => associate(a),
        Command::Serve(a) => serve(a),
    }
}

fn usage(msg: impl Into<String>) -> MsaeError {
    MsaeError::InvalidArgument(msg.into())
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| MsaeError::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()).map_err(|e| MsaeError::io("<stdout>", e))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| MsaeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MsaeError::Format { path: path.into(), detail: e.to_string() })
}

/// Explicit file, then the checkpoint's stats for the modality, then the
/// sidecar next to the embeddings.
fn resolve_stats(ckpt: &Checkpoint, set: &EmbeddingSet, embeddings: &Path, explicit: Option<&Path>) -> Result<NormStats> {
    if let Some(p) = explicit {
        return NormStats::load_json(p);
    }
    if let Some(s) = ckpt.stats_for(set.modality()) {
        return Ok(s.clone());
    }
    let sidecar = stats_sidecar_path(embeddings);
    if sidecar.exists() {
        return NormStats::load_json(sidecar);
    }
    Err(MsaeError::Validation(format!(
        "no normalization stats for modality {} (pass --stats or create {})",
        set.modality(),
        sidecar.display()
    )))
}

fn load_index(a: &IndexArgs) -> Result<SearchIndex> {
    let ckpt = load_checkpoint(&a.model)?;
    let set = load_embeddings(&a.embeddings)?;
    let stats = resolve_stats(&ckpt, &set, &a.embeddings, a.stats.as_deref())?;
    build_index_with_stats(&ckpt, &set, stats)
}

/// Accepts either a bare assignment array or an object with an
/// `assignments` field.
pub(crate) fn load_assignments(path: &Path) -> Result<Vec<ConceptAssignment>> {
    let v: Value = read_json(path)?;
    let arr = match v {
        Value::Object(mut m) => m.remove("assignments").unwrap_or(Value::Null),
        other => other,
    };
    serde_json::from_value(arr).map_err(|e| MsaeError::Format { path: path.into(), detail: e.to_string() })
}

fn load_classifier(a: &ClassifierArgs) -> Result<Classifier> {
    match (&a.classifier, &a.probe) {
        (Some(p), _) => read_json(p),
        (None, Some(p)) => Ok(Classifier::Probe { model: read_json(p)?, class: a.class.expect("clap requires class") }),
        (None, None) => Err(usage("pass --classifier or --probe with --class")),
    }
}

#[derive(Serialize)]
struct SynthResult {
    out: PathBuf,
    stats: PathBuf,
    rows: usize,
    dim: usize,
    modality: Modality,
    spec: SyntheticSpec,
    classes: Option<u32>,
    mean_row_norm: f64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec { n: a.n, d_true: a.atoms, s: a.active, m: a.count, noise_sigma: a.noise, seed: a.seed };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (set, truth) = synthesize(&spec)?;
    let mut set = EmbeddingSet::new(set.into_data(), a.modality.into())?;
    if let Some(c) = a.classes {
        if c == 0 {
            return Err(usage("--classes must be positive"));
        }
        set = set.with_class_labels(truth.dominant_atom_labels(c))?;
    }
    save_embeddings(&set, &a.out)?;
    let stats = fit_norm_stats(&set)?;
    let stats_path = stats_sidecar_path(&a.out);
    stats.save_json(&stats_path)?;
    if let Some(p) = &a.atoms_out {
        save_embeddings(&EmbeddingSet::new(truth.atoms.clone(), set.modality())?, p)?;
    }
    if let Some(p) = &a.vocab_out {
        let text: String = (0..spec.d_true).map(|i| format!("atom{i}\t{i}\n")).collect();
        std::fs::write(p, text).map_err(|e| MsaeError::io(p, e))?;
    }
    let norms: f64 = set.data().rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / set.rows() as f64;
    eprintln!("wrote {} rows x {} to {}", set.rows(), set.dim(), a.out.display());
    emit(
        &SynthResult {
            out: a.out,
            stats: stats_path,
            rows: set.rows(),
            dim: set.dim(),
            modality: set.modality(),
            spec,
            classes: a.classes,
            mean_row_norm: norms,
        },
        a.report.as_deref(),
    )
}

fn fit_stats(a: FitStatsArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let stats = fit_norm_stats(&set)?;
    let out = a.out.unwrap_or_else(|| stats_sidecar_path(&a.embeddings));
    stats.save_json(&out)?;
    eprintln!("wrote {} stats to {}", stats.modality, out.display());
    emit(&stats, None)
}

fn parse_alpha(spec: Option<&str>, h: usize) -> Result<Vec<f64>> {
    match spec.unwrap_or("uniform") {
        "uniform" => Ok(AlphaWeighting::Uniform.weights(h)),
        "reverse" => Ok(AlphaWeighting::Reverse.weights(h)),
        list => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("cannot parse --alpha {list:?}"))))
            .collect(),
    }
}

pub(crate) fn build_sae_config(a: &TrainArgs, n: usize) -> Result<SaeConfig> {
    let d = match (a.latents, a.expansion) {
        (Some(d), _) => d,
        (None, Some(e)) => e * n,
        (None, None) => 8 * n,
    };
    let reject = |flag: &str, present: bool| {
        if present {
            Err(usage(format!("--{flag} does not apply to --arch {:?}", a.arch).to_lowercase()))
        } else {
            Ok(())
        }
    };
    let variant = match a.arch {
        Arch::Relu => {
            reject("k", a.k.is_some())?;
            reject("k-list", a.k_list.is_some())?;
            reject("alpha", a.alpha.is_some())?;
            Variant::Relu { lambda: a.lambda.ok_or_else(|| usage("--arch relu needs --lambda"))? }
        }
        Arch::Topk | Arch::BatchTopk => {
            reject("lambda", a.lambda.is_some())?;
            reject("k-list", a.k_list.is_some())?;
            reject("alpha", a.alpha.is_some())?;
            let k = a.k.ok_or_else(|| usage("--arch topk/batch-topk needs --k"))?;
            if a.arch == Arch::Topk {
                Variant::TopK { k }
            } else {
                Variant::BatchTopK { k }
            }
        }
        Arch::Matryoshka => {
            reject("lambda", a.lambda.is_some())?;
            reject("k", a.k.is_some())?;
            let k_list = parse_k_list(a.k_list.as_deref().ok_or_else(|| usage("--arch matryoshka needs --k-list"))?, d)?;
            let alpha = parse_alpha(a.alpha.as_deref(), k_list.len())?;
            Variant::Matryoshka { k_list, alpha }
        }
    };
    SaeConfig::new(n, d, variant, a.softcap)
}

#[derive(Serialize)]
struct TrainResult<'a> {
    checkpoint: &'a Path,
    config: &'a SaeConfig,
    train: &'a TrainConfig,
    steps: u64,
    final_loss: f64,
    epochs: &'a [crate::train::EpochReport],
    stats: &'a NormStats,
}

fn train(a: TrainArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let sae = build_sae_config(&a, set.dim())?;
    let mut tc = TrainConfig::for_variant(&sae.variant);
    tc.epochs = a.epochs;
    tc.batch_size = a.batch_size;
    tc.grad_clip = a.grad_clip;
    tc.adamw.weight_decay = a.weight_decay;
    tc.seed = a.seed;
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    tc.validate()?;
    let steps_per_epoch = set.rows().div_ceil(tc.batch_size) as u64;
    let mut last_epoch = 0;
    let outcome = train_with(&set, &sae, &tc, |state, report| {
        let epoch = state.step.div_ceil(steps_per_epoch);
        if state.step % steps_per_epoch == 0 && epoch != last_epoch {
            last_epoch = epoch;
            eprintln!("epoch {epoch:>3}  step {:>7}  loss {:.6}", state.step, report.loss);
        }
    })?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    let ck = &outcome.checkpoint;
    eprintln!("wrote {} ({} -> {}, {})", a.out.display(), sae.n, sae.d, sae.variant.name());
    emit(
        &TrainResult {
            checkpoint: &a.out,
            config: &ck.config,
            train: &tc,
            steps: ck.provenance.steps,
            final_loss: ck.provenance.final_loss,
            epochs: &outcome.epochs,
            stats: ck.train_stats(),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct EvalResult {
    #[serde(flatten)]
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery: Option<Vec<RecoveryPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    histogram: Option<ActivationHistogram>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let set = load_embeddings(&a.embeddings)?;
    let stats = resolve_stats(&ckpt, &set, &a.embeddings, a.stats.as_deref())?;
    let probe: Option<ProbeModel> = a.probe.as_deref().map(read_json).transpose()?;
    if a.cknna_k == 0 {
        return Err(usage("--cknna-k must be at least 1"));
    }
    let opts = EvalOptions { cknna_k: a.cknna_k, cknna_samples: a.cknna_samples, seed: a.seed, top_k: a.top_k };
    let report = evaluate(&ckpt, &set, &stats, probe.as_ref(), &opts)?;
    let needs_codes = !a.recovery_grid.is_empty() || a.histogram_bins.is_some();
    let x = if needs_codes { Some(stats.normalize_matrix(set.data())?) } else { None };
    let recovery = if a.recovery_grid.is_empty() {
        None
    } else {
        Some(progressive_recovery(&ckpt.params, &ckpt.config, x.as_ref().unwrap().view(), &a.recovery_grid, &opts)?)
    };
    let histogram = match a.histogram_bins {
        Some(bins) => {
            let z = crate::sae::encode(&ckpt.params, &ckpt.config, x.as_ref().unwrap().view())?;
            Some(activation_histogram(z.view(), bins, a.high_threshold)?)
        }
        None => None,
    };
    eprintln!(
        "l0 {:.4}  fvu {:.5}  cs {:.4}  cknna {:.4}  do {:.4}  ndn {}",
        report.l0, report.fvu, report.cs, report.cknna, report.do_score, report.ndn
    );
    if let (Some(kl), Some(acc)) = (report.lp_kl, report.lp_acc) {
        eprintln!("lp kl (x1e6) {:.3}  lp acc {:.4}", kl * 1e6, acc);
    }
    emit(&EvalResult { report, top_k: a.top_k, recovery, histogram }, a.out.as_deref())
}

#[derive(Serialize)]
struct ProbeResult<'a> {
    probe: &'a Path,
    classes: usize,
    train_accuracy: f64,
    config: ProbeConfig,
}

fn probe(a: ProbeArgs) -> Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let cfg = ProbeConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let model = train_probe(&set, &cfg)?;
    let pred = model.predict(set.data())?;
    let labels = set.class_labels().expect("checked by train_probe");
    let acc = pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count() as f64 / labels.len() as f64;
    emit(&model, Some(&a.out))?;
    eprintln!("probe: {} classes, train accuracy {acc:.4}", model.classes());
    emit(&ProbeResult { probe: &a.out, classes: model.classes(), train_accuracy: acc, config: cfg }, a.report.as_deref())
}

#[derive(Serialize)]
struct ConceptsResult {
    summary: crate::concepts::ValidationSummary,
    assignments: Vec<ConceptAssignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_samples: Option<Vec<crate::concepts::TopSamples>>,
}

fn concepts(a: ConceptsArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let vocab = load_vocab(&a.vocab, &a.vocab_embeddings)?;
    let (mut assignments, summary) = name_neurons(&ckpt, &vocab, a.sim_threshold, a.ratio_threshold)?;
    let top_samples = match (a.top_samples, &a.embeddings) {
        (Some(t), Some(path)) => {
            let set = load_embeddings(path)?;
            let stats = resolve_stats(&ckpt, &set, path, a.stats.as_deref())?;
            let mut out = Vec::new();
            for x in assignments.iter().filter(|x| x.valid) {
                out.push(top_activating_samples(&ckpt, &set, &stats, x.neuron, t)?);
            }
            Some(out)
        }
        _ => None,
    };
    if a.valid_only {
        assignments.retain(|x| x.valid);
    }
    eprintln!(
        "neurons {}  above {}  best {}  above+best {}  ratio {}  valid {}",
        summary.neurons, summary.above_threshold, summary.best, summary.above_and_best, summary.ratio, summary.all
    );
    emit(&ConceptsResult { summary, assignments, top_samples }, a.out.as_deref())
}

#[derive(Serialize)]
struct SearchResult {
    space: SearchSpace,
    hits: Vec<crate::apps::SearchHit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanations: Option<Vec<crate::apps::MatchExplanation>>,
}

fn search(a: SearchArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let query = match (a.query_id, a.query_vector) {
        (Some(id), _) => Query::Sample(id),
        (None, Some(v)) => Query::Vector(v),
        (None, None) => return Err(usage("pass --query-id or --query-vector")),
    };
    let space: SearchSpace = a.space.into();
    let hits = index.search(&query, space, a.top)?;
    let names = a.concepts.as_deref().map(load_assignments).transpose()?;
    let explanations = match (a.explain, &query) {
        (Some(c), Query::Sample(id)) => Some(
            hits.iter()
                .map(|h| index.explain_match(id, &h.id, c, names.as_deref()))
                .collect::<Result<Vec<_>>>()?,
        ),
        (Some(_), Query::Vector(_)) => return Err(usage("--explain needs --query-id")),
        (None, _) => None,
    };
    for h in &hits {
        eprintln!("{:>6}  {:<16} {:.6}", h.index, h.id, h.score);
    }
    emit(&SearchResult { space, hits, explanations }, a.out.as_deref())
}

fn parse_edit(s: &str) -> Result<Edit> {
    let bad = || usage(format!("--edit expects NEURON=MAGNITUDE, got {s:?}"));
    let (n, m) = s.split_once('=').ok_or_else(bad)?;
    Ok(Edit { neuron: n.trim().parse().map_err(|_| bad())?, magnitude: m.trim().parse().map_err(|_| bad())? })
}

#[derive(Serialize)]
struct ManipulateResult {
    #[serde(flatten)]
    result: crate::apps::ManipulationResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    neighbors: Option<Vec<crate::apps::SearchHit>>,
}

fn manipulate(a: ManipulateArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let source = match (a.sample, a.vector) {
        (Some(id), _) => Query::Sample(id),
        (None, Some(v)) => Query::Vector(v),
        (None, None) => return Err(usage("pass --sample or --vector")),
    };
    let edits = a.edits.iter().map(|s| parse_edit(s)).collect::<Result<Vec<_>>>()?;
    let return_space = match a.return_space {
        ReturnSpaceArg::Raw => ReturnSpace::Raw,
        ReturnSpaceArg::Activation => ReturnSpace::Activation,
    };
    let result = index.manipulate(&ManipulationRequest { source, edits, return_space })?;
    let neighbors = a.search.map(|t| index.search(&Query::Vector(result.edited_raw.clone()), SearchSpace::Embedding, t)).transpose()?;
    eprintln!("displacement {:.6}  distance to input {:.6}", result.displacement, result.distance_to_input);
    emit(&ManipulateResult { result, neighbors }, a.out.as_deref())
}

#[derive(Serialize)]
struct SweepResult {
    samples: Vec<String>,
    #[serde(flatten)]
    sweep: crate::apps::BiasSweep,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let clf = load_classifier(&a.classifier)?;
    let samples = if a.samples.is_empty() { index.ids().to_vec() } else { a.samples };
    let queries: Vec<Query> = samples.iter().cloned().map(Query::Sample).collect();
    let sweep = bias_sweep(&index, &clf, &queries, a.neuron, &a.magnitudes)?;
    let plateaued = sweep.plateau.iter().filter(|&&p| p).count();
    eprintln!("neuron {}: {} of {} curves plateau", a.neuron, plateaued, samples.len());
    emit(&SweepResult { samples, sweep }, a.out.as_deref())
}

fn associate(a: AssociateArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let clf = load_classifier(&a.classifier)?;
    let stats = concept_association_stats(&index, &clf, &a.neurons)?;
    for s in &stats {
        eprintln!("neuron {:>5}  auc {:.4}  mean+ {:.4}  mean- {:.4}", s.neuron, s.auc, s.positive.mean, s.negative.mean);
    }
    emit(&stats, a.out.as_deref())
}

fn serve(a: ServeArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let concepts = a.concepts.as_deref().map(load_assignments).transpose()?.unwrap_or_default();
    let probe: Option<ProbeModel> = a.probe.as_deref().map(read_json).transpose()?;
    let state = crate::service::ServiceState::new(index, concepts, probe)?;
    let addr = format!("{}:{}", a.host, a.port);
    let addr: std::net::SocketAddr = addr.parse().map_err(|_| usage(format!("bad listen address {addr:?}")))?;
    crate::service::serve_blocking(state, addr, a.cors_origins)
}
