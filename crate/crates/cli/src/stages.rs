use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsforge_core::backend::{Backend, BackendHandle, ReferenceBackend, RemoteBackend};
use tsforge_core::codec::{
    encode_finetune, read_corpus, sample_permutation, write_corpus, PromptTemplate,
};
use tsforge_core::data::{
    apply_scaler, fit_scaler, invert_scaler, load_dataset, ColumnSelection, InstanceSet,
    ScalerState,
};
use tsforge_core::embedding::{
    embed, fit_basis, k_cap, reconstruct, select_k, BasisSystem, EmbeddingTable,
};
use tsforge_core::filter::FilterCounters;
use tsforge_core::generation::{generate_rows, write_log, GenerationConfig, StopReason};
use tsforge_core::metrics::{evaluate, MetricReport};
use tsforge_core::segmentation::{segment_with, PeriodChoice, SegmentationPlan};
use tsforge_core::Error as CoreError;

use crate::artifacts::{Layout, StageRecord};
use crate::config::{BackendKindArg, Mode, RunConfig};
use crate::error::{CliError, Stage};

/// Channel name of the pooled set in shared-basis mode.
pub const SHARED_CHANNEL: &str = "shared";

/// Seed of one stage, split from the root seed.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stage.stream());
    rng.next_u64()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> tsforge_core::Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> tsforge_core::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionRecord {
    pub target: f64,
    pub k: Vec<usize>,
    pub retained: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub condition: Option<String>,
    pub stop: StopReason,
    pub batches: usize,
    pub rows: usize,
    pub counters: FilterCounters,
}

/// Runs one stage against the artifacts under `layout`.
pub fn run_stage(stage: Stage, cfg: &RunConfig, layout: &Layout) -> Result<StageRecord, CliError> {
    let start = Instant::now();
    layout
        .reset(stage)
        .map_err(|e| CliError::stage(stage)(e.into()))?;
    let notes = match stage {
        Stage::Segment => segment_stage(cfg, layout),
        Stage::Embed => embed_stage(cfg, layout),
        Stage::Encode => encode_stage(cfg, layout),
        Stage::Finetune => finetune_stage(cfg, layout),
        Stage::Generate => generate_stage(cfg, layout),
        Stage::Decode => decode_stage(cfg, layout),
        Stage::Evaluate => evaluate_stage(cfg, layout),
    }?;
    let artifacts = layout
        .collect(stage)
        .map_err(|e| CliError::stage(stage)(e.into()))?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "stage {stage} done in {seconds:.2}s, {} artifacts",
        artifacts.len()
    );
    Ok(StageRecord {
        stage,
        seconds,
        artifacts,
        notes,
    })
}

fn load_input(cfg: &RunConfig) -> Result<(InstanceSet, Option<SegmentationPlan>), CliError> {
    let stage = Stage::Segment;
    let err = CliError::stage(stage);
    if cfg.input.is_empty() {
        return Err(CliError::Config("no input given".into()));
    }
    if cfg.mode == Mode::Multisample {
        if cfg.input.len() == 1 && cfg.input[0].is_dir() {
            return Ok((InstanceSet::read_dir(&cfg.input[0]).map_err(err)?, None));
        }
        return Ok((
            InstanceSet::read_channel_files(&cfg.input).map_err(err)?,
            None,
        ));
    }
    if cfg.input.len() != 1 {
        return Err(CliError::Config(format!(
            "{:?} mode reads exactly one CSV, got {}",
            cfg.mode,
            cfg.input.len()
        )));
    }
    let selection = if cfg.columns.is_empty() {
        ColumnSelection::All
    } else {
        ColumnSelection::Named(cfg.columns.clone())
    };
    let raw = load_dataset(&cfg.input[0], &selection).map_err(CliError::stage(stage))?;
    if cfg.mode == Mode::Univariate && raw.n_channels() != 1 {
        return Err(CliError::Config(format!(
            "univariate mode needs one column, {} has {}; pick one with --columns",
            cfg.input[0].display(),
            raw.n_channels()
        )));
    }
    let period = match (cfg.no_period, cfg.period) {
        (true, _) => PeriodChoice::Disabled,
        (false, Some(p)) => PeriodChoice::Fixed(p),
        (false, None) => PeriodChoice::Auto,
    };
    let (set, plan) = segment_with(&raw, cfg.window_len, cfg.n_instances, period)
        .map_err(CliError::stage(stage))?;
    log::info!(
        "segmented {} samples: period {:?}, stride {} (raw {})",
        raw.len(),
        plan.period,
        plan.step,
        plan.raw_step
    );
    Ok((set, Some(plan)))
}

fn segment_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let err = CliError::stage(Stage::Segment);
    let (set, plan) = load_input(cfg)?;
    set.write_dir(layout.windows()).map_err(err)?;
    if let Some(plan) = plan {
        write_json(&layout.plan(), &plan).map_err(CliError::stage(Stage::Segment))?;
    }
    let mut notes = vec![format!(
        "{} windows x {} channels x {} steps",
        set.n_instances(),
        set.n_channels(),
        set.len()
    )];
    if cfg.scale {
        let scaler = fit_scaler(&set).map_err(CliError::stage(Stage::Segment))?;
        let zero = scaler.zero_std().len();
        if zero > 0 {
            notes.push(format!("{zero} timestamps with zero spread (std floored)"));
        }
        write_json(&layout.scaler(), &scaler).map_err(CliError::stage(Stage::Segment))?;
    }
    Ok(notes)
}

fn load_windows(layout: &Layout, stage: Stage) -> Result<InstanceSet, CliError> {
    let meta = layout.windows().join("instances.json");
    layout.require(stage, &meta)?;
    InstanceSet::read_dir(layout.windows()).map_err(CliError::stage(stage))
}

fn load_scaler(
    cfg: &RunConfig,
    layout: &Layout,
    stage: Stage,
) -> Result<Option<ScalerState>, CliError> {
    if !cfg.scale {
        return Ok(None);
    }
    layout.require(stage, &layout.scaler())?;
    read_json(&layout.scaler())
        .map(Some)
        .map_err(CliError::stage(stage))
}

/// Windows in model space: scaled, and pooled in shared-basis mode, with
/// per-row labels for the latter.
fn model_space(
    cfg: &RunConfig,
    layout: &Layout,
    stage: Stage,
) -> Result<(InstanceSet, Option<Vec<String>>), CliError> {
    let err = CliError::stage(stage);
    let windows = load_windows(layout, stage)?;
    let x = match load_scaler(cfg, layout, stage)? {
        Some(s) => apply_scaler(&windows, &s).map_err(err)?,
        None => windows,
    };
    if !cfg.shared_basis {
        return Ok((x, None));
    }
    let labels = x
        .channel_names()
        .iter()
        .flat_map(|name| std::iter::repeat_n(name.clone(), x.n_instances()))
        .collect();
    let pooled = x
        .pool_channels(SHARED_CHANNEL)
        .map_err(CliError::stage(stage))?;
    Ok((pooled, Some(labels)))
}

fn embed_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let stage = Stage::Embed;
    let (x, labels) = model_space(cfg, layout, stage)?;
    let ica = cfg.ica_params(stage_seed(cfg.seed, stage));
    let mut notes = Vec::new();
    let ks = match cfg.variance_target {
        Some(target) => {
            let k_max = cfg.k_max.unwrap_or_else(|| k_cap(&x));
            let sel =
                select_k(&x, cfg.method, target, k_max, &ica).map_err(CliError::stage(stage))?;
            notes.extend(sel.warnings.iter().cloned());
            write_json(
                &layout.k_selection(),
                &KSelectionRecord {
                    target,
                    k: sel.k.clone(),
                    retained: sel.retained.clone(),
                    warnings: sel.warnings.clone(),
                },
            )
            .map_err(CliError::stage(stage))?;
            sel.k
        }
        None => vec![cfg.k; x.n_channels()],
    };
    let basis = fit_basis(&x, cfg.method, &ks, &ica).map_err(CliError::stage(stage))?;
    for d in &basis.diagnostics {
        notes.extend(d.warnings.iter().cloned());
    }
    basis.save(layout.basis()).map_err(CliError::stage(stage))?;
    let mut table = embed(&x, &basis).map_err(CliError::stage(stage))?;
    if let Some(l) = labels {
        table = table.with_labels(l).map_err(CliError::stage(stage))?;
    }
    table.save(layout.table()).map_err(CliError::stage(stage))?;
    notes.push(format!("{} method, K = {}", cfg.method, table.width()));
    Ok(notes)
}

fn load_table(layout: &Layout, path: &Path, stage: Stage) -> Result<EmbeddingTable, CliError> {
    layout.require(stage, path)?;
    EmbeddingTable::load(path).map_err(CliError::stage(stage))
}

fn encode_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let stage = Stage::Encode;
    let table = load_table(layout, &layout.table(), stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
    let base = PromptTemplate::default();
    let prompts: Vec<String> = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let template = match &table.labels {
                Some(l) => base.clone().with_condition(l[i].clone()),
                None => base.clone(),
            };
            encode_finetune(row, &sample_permutation(row.len(), &mut rng), &template)
        })
        .collect();
    write_corpus(layout.corpus(), &prompts).map_err(CliError::stage(stage))?;
    Ok(vec![format!("{} prompts", prompts.len())])
}

fn remote(cfg: &RunConfig) -> Result<RemoteBackend, CliError> {
    let url = cfg
        .backend
        .url
        .clone()
        .ok_or_else(|| CliError::Config("remote backend needs a url".into()))?;
    let mut b = RemoteBackend::new(url);
    if let Some(n) = cfg.backend.max_attempts {
        b = b.with_retries(n, std::time::Duration::from_millis(500));
    }
    Ok(b)
}

fn finetune_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let stage = Stage::Finetune;
    let err = CliError::stage(stage);
    layout.require(stage, &layout.corpus())?;
    let corpus = read_corpus(layout.corpus()).map_err(CliError::stage(stage))?;
    let handle = match cfg.backend.kind {
        BackendKindArg::Reference => {
            let table = load_table(layout, &layout.table(), stage)?;
            let mut b = ReferenceBackend::new()
                .with_faults(cfg.backend.faults.clone())
                .with_channel_widths(table.channel_spans.iter().map(|s| s.k).collect());
            let h = b
                .fine_tune(&corpus, &cfg.training)
                .map_err(CliError::stage(stage))?;
            b.save(layout.reference_model())
                .map_err(CliError::stage(stage))?;
            h
        }
        BackendKindArg::Remote => remote(cfg)?
            .fine_tune(&corpus, &cfg.training)
            .map_err(err)?,
    };
    write_json(&layout.handle(), &handle).map_err(CliError::stage(stage))?;
    Ok(vec![format!("model {}", handle.model_id)])
}

fn load_backend(
    cfg: &RunConfig,
    layout: &Layout,
    stage: Stage,
) -> Result<(Box<dyn Backend>, BackendHandle), CliError> {
    layout.require(stage, &layout.handle())?;
    let handle: BackendHandle = read_json(&layout.handle()).map_err(CliError::stage(stage))?;
    let backend: Box<dyn Backend> = match cfg.backend.kind {
        BackendKindArg::Reference => {
            layout.require(stage, &layout.reference_model())?;
            let mut b =
                ReferenceBackend::load(layout.reference_model()).map_err(CliError::stage(stage))?;
            b.set_faults(cfg.backend.faults.clone());
            Box::new(b)
        }
        BackendKindArg::Remote => Box::new(remote(cfg)?),
    };
    Ok((backend, handle))
}

/// Distinct labels in order of first appearance.
fn label_order(labels: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

fn generate_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let stage = Stage::Generate;
    let table = load_table(layout, &layout.table(), stage)?;
    let (backend, handle) = load_backend(cfg, layout, stage)?;
    let conditions: Vec<Option<String>> = match &table.labels {
        Some(l) => label_order(l).into_iter().map(Some).collect(),
        None => vec![None],
    };
    let root = stage_seed(cfg.seed, stage);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut summaries = Vec::new();
    let mut notes = Vec::new();
    for (i, cond) in conditions.iter().enumerate() {
        let mut template = PromptTemplate::default();
        if let Some(c) = cond {
            template = template.with_condition(c.clone());
        }
        let gcfg = GenerationConfig {
            sampling: cfg.sampling.clone(),
            stopping: cfg.filter.stopping_rule(),
            template,
            max_batches: cfg.filter.max_batches,
            seed: root.wrapping_add(i as u64),
        };
        let out = generate_rows(backend.as_ref(), &handle, &table, &gcfg)
            .map_err(CliError::stage(stage))?;
        write_log(&out.log, layout.filter_log(cond.as_deref())).map_err(CliError::stage(stage))?;
        let c = &out.counters;
        notes.push(format!(
            "{}: {} rows after {} batches ({:?}); rejected {} missing, {} duplicate, {} norm",
            cond.as_deref().unwrap_or("all"),
            out.rows.len(),
            out.batches,
            out.stop,
            c.missing,
            c.duplicate,
            c.norm
        ));
        summaries.push(LabelSummary {
            condition: cond.clone(),
            stop: out.stop,
            batches: out.batches,
            rows: out.rows.len(),
            counters: out.counters.clone(),
        });
        if let Some(c) = cond {
            labels.extend(std::iter::repeat_n(c.clone(), out.rows.len()));
        }
        rows.extend(out.rows);
    }
    write_json(&layout.generation_summary(), &summaries).map_err(CliError::stage(stage))?;
    if rows.is_empty() {
        return Err(CliError::stage(stage)(CoreError::Backend(
            "no generated row passed the filter".into(),
        )));
    }
    let mut gen =
        EmbeddingTable::new(rows, table.channel_spans.clone()).map_err(CliError::stage(stage))?;
    if table.labels.is_some() {
        gen = gen.with_labels(labels).map_err(CliError::stage(stage))?;
    }
    gen.save(layout.generated_table())
        .map_err(CliError::stage(stage))?;
    Ok(notes)
}

/// Decodes a generated table into windows in data space.
pub fn decode_table(
    gen: &EmbeddingTable,
    basis: &BasisSystem,
    scaler: Option<&ScalerState>,
    channels: &[String],
) -> tsforge_core::Result<(InstanceSet, Vec<String>)> {
    let mut notes = Vec::new();
    let labels = match &gen.labels {
        None => {
            let x = reconstruct(gen, basis)?;
            let x = match scaler {
                Some(s) => invert_scaler(&x, s)?,
                None => x,
            };
            return Ok((x, notes));
        }
        Some(l) => l,
    };
    let mut parts = Vec::with_capacity(channels.len());
    for (c, name) in channels.iter().enumerate() {
        let rows: Vec<Vec<f64>> = gen
            .rows
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l == name)
            .map(|(r, _)| r.clone())
            .collect();
        let sub = EmbeddingTable::new(rows, gen.channel_spans.clone())?;
        let x = reconstruct(&sub, basis)?;
        let rows: Vec<Vec<f64>> = x.channel_series(0).map(<[f64]>::to_vec).collect();
        let mut part = InstanceSet::univariate(name, rows)?;
        if let Some(s) = scaler {
            let single = ScalerState {
                mean: vec![s.mean[c].clone()],
                std: vec![s.std[c].clone()],
            };
            part = invert_scaler(&part, &single)?;
        }
        parts.push(part);
    }
    let n = parts
        .iter()
        .map(InstanceSet::n_instances)
        .min()
        .unwrap_or(0);
    if parts.iter().any(|p| p.n_instances() != n) {
        notes.push(format!(
            "channels generated unequal counts; keeping the first {n} of each"
        ));
        parts = parts
            .into_iter()
            .map(|p| {
                let name = p.channel_names()[0].clone();
                InstanceSet::univariate(
                    &name,
                    p.channel_series(0).take(n).map(<[f64]>::to_vec).collect(),
                )
            })
            .collect::<tsforge_core::Result<_>>()?;
    }
    Ok((InstanceSet::stack_channels(&parts)?, notes))
}

fn decode_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let stage = Stage::Decode;
    let gen = load_table(layout, &layout.generated_table(), stage)?;
    layout.require(stage, &layout.basis())?;
    let basis = BasisSystem::load(layout.basis()).map_err(CliError::stage(stage))?;
    let scaler = load_scaler(cfg, layout, stage)?;
    let windows = load_windows(layout, stage)?;
    let (x, mut notes) = decode_table(&gen, &basis, scaler.as_ref(), windows.channel_names())
        .map_err(CliError::stage(stage))?;
    x.write_dir(layout.decoded())
        .map_err(CliError::stage(stage))?;
    notes.push(format!(
        "{} series x {} channels x {} steps",
        x.n_instances(),
        x.n_channels(),
        x.len()
    ));
    Ok(notes)
}

/// Scores the decoded set against the original windows.
pub fn evaluate_dirs(
    cfg: &RunConfig,
    original: &Path,
    generated: &Path,
    report: &Path,
) -> Result<MetricReport, CliError> {
    let stage = Stage::Evaluate;
    let err = CliError::stage(stage);
    for d in [original, generated] {
        if !d.exists() {
            return Err(CliError::MissingArtifact {
                stage,
                path: d.display().to_string(),
            });
        }
    }
    let orig = InstanceSet::read_dir(original).map_err(err)?;
    let gen = InstanceSet::read_dir(generated).map_err(CliError::stage(stage))?;
    let r = evaluate(&orig, &gen, &cfg.evaluation.metrics, &cfg.evaluation.config)
        .map_err(CliError::stage(stage))?;
    if let Some(parent) = report.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::stage(stage)(e.into()))?;
    }
    r.save(report).map_err(CliError::stage(stage))?;
    Ok(r)
}

fn evaluate_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<String>, CliError> {
    let r = evaluate_dirs(cfg, &layout.windows(), &layout.decoded(), &layout.report())?;
    Ok(r.scores
        .iter()
        .map(|(m, s)| format!("{m} = {:.6}", s.mean))
        .chain(r.metadata.warnings.iter().cloned())
        .collect())
}
