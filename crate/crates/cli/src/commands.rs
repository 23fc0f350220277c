//! One function per subcommand. Each writes its reports under the output
//! directory and returns a short human summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use align_core::analysis::report::{self, bar_chart, distribution_rows, pca_rows, scatter, DistributionRow, PcaRow, PruneRow};
use align_core::analysis::{
    aggregate_distribution, bench_connectors, compare_connectors, eval_pruned, noise_test, pca_2d, prune_embeddings,
    BenchRow, ComparisonConfig, ComparisonRow, MeanVocabDistribution, NoiseRow,
};
use align_core::connectors::ConnectorKind;
use align_core::model::{evaluate_with, resume_stage, Checkpoint, CheckpointMeta, EvalHooks, Example, Model, StageRecord, StepLog};
use align_core::vision::PatchBatch;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_split, read_manifest, stage_split, write_dataset, EVAL_SPLIT};
use crate::error::CliError;

/// Precision of every model the CLI trains and loads.
type F = f32;

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    ensure_dir(path)?;
    Ok(report::write_csv(path, rows)?)
}

fn read_report<R: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<Option<Vec<R>>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    report::read_csv(path)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}; rerun `alignbench {producer}`", path.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    ensure_dir(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<String, CliError> {
    let m = write_dataset(cfg)?;
    let mut per_split: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &m.docs {
        *per_split.entry(d.split.as_str()).or_default() += 1;
    }
    let parts: Vec<String> = per_split.iter().map(|(s, n)| format!("{s}={n}")).collect();
    Ok(format!("wrote {} documents to {} ({})", m.docs.len(), cfg.data_dir().display(), parts.join(", ")))
}

/// Newest stage checkpoint in the output directory.
fn latest_checkpoint(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    (1..=3u8)
        .rev()
        .map(|s| cfg.checkpoint(s))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::missing("stage checkpoint", &cfg.checkpoint_dir().join("stage{1,2,3}.ckpt"), "train"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<F>, CliError> {
    if !path.exists() {
        return Err(CliError::missing("checkpoint", path, "train"));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_model(cfg: &RunConfig, from: Option<&str>) -> Result<(PathBuf, Model<F>), CliError> {
    let path = match from {
        Some(p) => PathBuf::from(p),
        None => latest_checkpoint(cfg)?,
    };
    let ck = load_checkpoint(&path)?;
    Ok((path, ck.model))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loss CSV path for training runs.
fn loss_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("train").join("loss.csv")
}

/// Training errors carry the stage they came from.
fn in_stage(stage: u8, e: align_core::model::ModelError) -> CliError {
    match CliError::from(e) {
        CliError::Numeric(m) if !m.starts_with("stage") => CliError::Numeric(format!("stage {stage}: {m}")),
        CliError::Data(m) if !m.starts_with("stage") => CliError::Data(format!("stage {stage}: {m}")),
        other => other,
    }
}

pub fn train(cfg: &RunConfig, stages: Option<&str>, from: Option<&str>) -> Result<String, CliError> {
    let stages = cfg.select_stages(stages)?;
    let manifest = read_manifest(cfg)?;
    let first = stages[0].stage;
    // later stages continue from the previous stage's checkpoint by default
    let from = from.map(PathBuf::from).or_else(|| (first > 1).then(|| cfg.checkpoint(first - 1)));

    let (mut model, mut records, mut resume, init_seed) = match &from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut loaded_cfg = ck.model.cfg.clone();
            loaded_cfg.connector = cfg.model.connector.clone();
            if loaded_cfg != cfg.model {
                return Err(CliError::Data(format!(
                    "{} was trained with different model dimensions than the config",
                    path.display()
                )));
            }
            let mut records: Vec<StageRecord> = ck.meta.stages.clone();
            records.retain(|r| r.config.stage < first || (r.config.stage == first && !r.complete));
            let mut resume = ck.train_state().filter(|(c, _)| c.stage == first).map(|(_, s)| s);
            let mut model = ck.model;
            if model.cfg.connector != cfg.model.connector {
                // new connector on the shared encoder, decoder and embeddings
                model = model.with_connector(&cfg.model.connector, cfg.seed)?;
                resume = None;
                records.retain(|r| r.config.stage < first);
            }
            if resume.is_none() {
                records.retain(|r| r.config.stage < first);
            }
            (model, records, resume, ck.meta.init_seed)
        }
        None => (Model::<F>::init(&cfg.model, cfg.seed)?, Vec::new(), None, cfg.seed),
    };

    // loss rows of earlier stages, and of the steps already taken when resuming
    let resumed_steps = resume.as_ref().map_or(0, |s| s.step);
    let mut losses: Vec<StepLog> = read_report(&loss_path(cfg), "train")?.unwrap_or_default();
    losses.retain(|l| l.stage < first || (l.stage == first && l.step < resumed_steps));

    let mut summary = Vec::new();
    for stage in &stages {
        let examples: Vec<Example<F>> = load_split(cfg, &manifest, &stage_split(stage.stage), None, &model.cfg.tiling)?;
        let res = resume_stage(stage, &mut model, &examples, resume.take()).map_err(|e| in_stage(stage.stage, e))?;
        losses.extend(res.log.iter().cloned());
        records.retain(|r| r.config.stage != stage.stage);
        records.push(StageRecord {
            config: stage.clone(),
            steps: res.state.step,
            cursor: res.state.cursor,
            first_loss: res.state.initial_loss,
            final_loss: res.log.last().map(|l| l.loss).or(losses.last().map(|l| l.loss)),
            above: res.state.above,
            complete: res.complete,
        });
        let ck = Checkpoint {
            model: model.clone(),
            adam: (!res.complete).then(|| res.state.adam.clone()),
            meta: CheckpointMeta {
                model: model.cfg.clone(),
                init_seed,
                rng: Some(res.rng.clone()),
                stages: records.clone(),
                adam_step: res.state.adam.step,
            },
        };
        let path = cfg.checkpoint(stage.stage);
        ensure_dir(&path)?;
        ck.save(&path)?;
        write_csv(&loss_path(cfg), &losses)?;
        summary.push(format!(
            "stage {}: {} steps{}, final loss {}",
            stage.stage,
            res.state.step,
            if res.complete { "" } else { " (interrupted)" },
            res.log.last().map_or("n/a".into(), |l| format!("{:.4}", l.loss)),
        ));
        if !res.complete {
            break;
        }
    }
    Ok(summary.join("\n"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub connector: String,
    pub docs: usize,
    pub tokens: usize,
    pub correct: usize,
    pub token_accuracy: f64,
    pub mean_loss: f64,
}

fn hooks(cfg: &RunConfig) -> EvalHooks {
    EvalHooks {
        workers: cfg.workers,
        ..EvalHooks::default()
    }
}

pub fn eval(cfg: &RunConfig, from: Option<&str>) -> Result<String, CliError> {
    let (path, model) = load_model(cfg, from)?;
    let manifest = read_manifest(cfg)?;
    let split: Vec<Example<F>> = load_split(cfg, &manifest, EVAL_SPLIT, None, &model.cfg.tiling)?;
    let m = evaluate_with(&model, &split, &hooks(cfg))?;
    let row = EvalRow {
        checkpoint: file_name(&path),
        connector: model.kind().name().into(),
        docs: m.docs,
        tokens: m.tokens,
        correct: m.correct,
        token_accuracy: m.token_accuracy,
        mean_loss: m.mean_loss,
    };
    write_csv(&cfg.out_dir.join("eval").join("metrics.csv"), std::slice::from_ref(&row))?;
    Ok(format!(
        "{} ({}): token accuracy {:.4} over {} tokens, mean loss {:.4}",
        row.checkpoint, row.connector, row.token_accuracy, row.tokens, row.mean_loss
    ))
}

struct Probed {
    model: Model<F>,
    split: Vec<Example<F>>,
    dist: MeanVocabDistribution,
    path: PathBuf,
}

/// Mean vocabulary distribution of an ALIGN model over the first probes of
/// the held-out split.
fn probe(cfg: &RunConfig, from: Option<&str>) -> Result<Probed, CliError> {
    let (path, model) = load_model(cfg, from)?;
    if model.kind() != ConnectorKind::Align {
        return Err(CliError::Data(format!(
            "{} uses the {} connector; this analysis needs an align checkpoint",
            path.display(),
            model.kind()
        )));
    }
    let manifest = read_manifest(cfg)?;
    let split: Vec<Example<F>> = load_split(cfg, &manifest, EVAL_SPLIT, None, &model.cfg.tiling)?;
    let probes: Vec<PatchBatch<F>> = split.iter().take(cfg.analysis.probes).map(|e| e.patches.clone()).collect();
    let dist = aggregate_distribution(&model, &probes, cfg.workers)?;
    Ok(Probed { model, split, dist, path })
}

#[derive(Clone, Debug, Serialize)]
struct AnalysisSummary {
    checkpoint: String,
    probes: usize,
    patches: usize,
    vocab: usize,
    max_prob: f64,
    argmax: usize,
    entropy: f64,
    /// Tokens whose mean probability exceeds uniform; highlighted in the PCA.
    above_uniform: usize,
    pca_eigenvalues: [f64; 2],
    pca_explained_ratio: f64,
}

pub fn analyze(cfg: &RunConfig, from: Option<&str>) -> Result<String, CliError> {
    let p = probe(cfg, from)?;
    let dir = cfg.out_dir.join("analysis");
    write_csv(&dir.join("distribution.csv"), &distribution_rows(&p.dist))?;
    let uniform = 1.0 / p.dist.vocab() as f64;
    let highlight: Vec<usize> = (0..p.dist.vocab()).filter(|&i| p.dist.mean[i] > uniform).collect();
    let pca = pca_2d(&p.model.embed, &highlight, cfg.analysis.pca_seed)?;
    write_csv(&dir.join("pca.csv"), &pca_rows(&pca))?;
    let summary = AnalysisSummary {
        checkpoint: file_name(&p.path),
        probes: p.dist.probes,
        patches: p.dist.patches,
        vocab: p.dist.vocab(),
        max_prob: p.dist.max_prob,
        argmax: p.dist.argmax,
        entropy: p.dist.entropy,
        above_uniform: highlight.len(),
        pca_eigenvalues: pca.eigenvalues,
        pca_explained_ratio: pca.explained_ratio,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let mut out = vec![format!(
        "mean distribution over {} patches: max prob {:.4} (token {}), entropy {:.3} nats ({:.3} uniform); PCA explains {:.1}%",
        summary.patches,
        summary.max_prob,
        summary.argmax,
        summary.entropy,
        (summary.vocab as f64).ln(),
        100.0 * summary.pca_explained_ratio
    )];
    if cfg.compare.enabled {
        let ccfg = ComparisonConfig {
            model: cfg.model.clone(),
            data: align_core::model::DataConfig {
                fraction: cfg.compare.fraction,
                ..cfg.data.clone()
            },
            stages: cfg.stages.clone(),
            kinds: cfg.compare.kinds.clone(),
            seeds: cfg.compare.seeds.clone(),
            workers: cfg.workers,
        };
        let (rows, gaps) = compare_connectors(&ccfg)?;
        write_csv(&dir.join("comparison.csv"), &rows)?;
        write_csv(&dir.join("gaps.csv"), &gaps)?;
        for g in &gaps {
            out.push(format!("seed {}: align − mlp = {:+.2} points", g.seed, g.gap_points));
        }
    }
    Ok(out.join("\n"))
}

pub fn prune(cfg: &RunConfig, from: Option<&str>) -> Result<String, CliError> {
    let p = probe(cfg, from)?;
    let a = &cfg.analysis;
    let kept = prune_embeddings(&p.dist, a.prune_mass)?;
    let main = eval_pruned(&p.model, &p.dist, &kept, &p.split, a.renormalize, cfg.workers)?;
    // a single surviving token shows what removing real mass costs
    let control = eval_pruned(&p.model, &p.dist, &[p.dist.argmax], &p.split, a.renormalize, cfg.workers)?;
    let rows = vec![
        PruneRow::new(&format!("mass {}", a.prune_mass), &main),
        PruneRow::new("top-1", &control),
    ];
    write_csv(&cfg.out_dir.join("prune").join("prune.csv"), &rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{}: kept {}/{} tokens, accuracy {:.4} → {:.4} ({:+.2} points)",
                r.condition, r.kept, r.vocab, r.full_accuracy, r.pruned_accuracy, r.delta_accuracy_points
            )
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn noise(cfg: &RunConfig, from: Option<&str>, sigma: Option<f64>) -> Result<String, CliError> {
    let paths: Vec<PathBuf> = match from {
        Some(list) => list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
        None => vec![latest_checkpoint(cfg)?],
    };
    if paths.is_empty() {
        return Err(CliError::Usage("--from lists no checkpoints".into()));
    }
    let sigma = sigma.unwrap_or(cfg.analysis.noise_sigma);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma {sigma} must be a non-negative number")));
    }
    let models = paths.iter().map(|p| Ok(load_checkpoint(p)?.model)).collect::<Result<Vec<_>, CliError>>()?;
    let manifest = read_manifest(cfg)?;
    let split: Vec<Example<F>> = load_split(cfg, &manifest, EVAL_SPLIT, None, &models[0].cfg.tiling)?;
    let probes: Vec<PatchBatch<F>> = split.iter().take(cfg.analysis.probes).map(|e| e.patches.clone()).collect();
    let refs: Vec<&Model<F>> = models.iter().collect();
    let mut rows: Vec<NoiseRow> = Vec::new();
    for &seed in &cfg.analysis.noise_seeds {
        rows.extend(noise_test(&refs, sigma, &probes, &split, seed, cfg.workers)?.rows);
    }
    write_csv(&cfg.out_dir.join("noise").join("noise.csv"), &rows)?;
    let means = mean_by_connector(&rows, |r| &r.connector, |r| (r.cosine_distance, r.drop_points));
    Ok(means
        .iter()
        .map(|(c, (cos, drop))| format!("σ={sigma} {c}: mean cosine distance {cos:.4}, mean drop {drop:.2} points"))
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn bench(cfg: &RunConfig, kind: Option<ConnectorKind>) -> Result<String, CliError> {
    let kinds: Vec<ConnectorKind> = match kind {
        Some(k) => vec![k],
        None => ConnectorKind::ALL.to_vec(),
    };
    let rep = bench_connectors(&cfg.bench, &kinds)?;
    write_csv(&cfg.out_dir.join("bench").join("bench.csv"), &rep.rows)?;
    Ok(rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "{}: median {:.3} ms, {} output tokens, {:.0} tokens/s",
                r.connector,
                1e3 * r.median_latency,
                r.output_tokens,
                r.tokens_per_sec
            )
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Per-key means of two columns, keys in first-seen order.
fn mean_by_connector<R>(rows: &[R], key: impl Fn(&R) -> &String, val: impl Fn(&R) -> (f64, f64)) -> Vec<(String, (f64, f64))> {
    let mut out: Vec<(String, (f64, f64), usize)> = Vec::new();
    for r in rows {
        let (a, b) = val(r);
        match out.iter_mut().find(|e| &e.0 == key(r)) {
            Some(e) => {
                e.1 .0 += a;
                e.1 .1 += b;
                e.2 += 1;
            }
            None => out.push((key(r).clone(), (a, b), 1)),
        }
    }
    out.into_iter().map(|(k, (a, b), n)| (k, (a / n as f64, b / n as f64))).collect()
}

/// Number of tokens shown in the distribution chart.
const TOP_TOKENS: usize = 32;

pub fn plot(cfg: &RunConfig) -> Result<String, CliError> {
    let out = &cfg.out_dir;
    let fig = out.join("figures");
    let mut written = Vec::new();
    let mut save = |name: &str, svg: String| -> Result<(), CliError> {
        std::fs::create_dir_all(&fig)?;
        std::fs::write(fig.join(name), svg)?;
        written.push(name.to_string());
        Ok(())
    };

    if let Some(rows) = read_report::<DistributionRow>(&out.join("analysis").join("distribution.csv"), "analyze")? {
        let mut rows = rows;
        rows.sort_by(|a, b| b.mean_prob.total_cmp(&a.mean_prob).then(a.token.cmp(&b.token)));
        let bars: Vec<(String, f64)> = rows.iter().take(TOP_TOKENS).map(|r| (r.token.to_string(), r.mean_prob)).collect();
        save(
            "distribution.svg",
            bar_chart(&format!("Mean vocabulary distribution (top {TOP_TOKENS} tokens)"), "mean probability", &bars),
        )?;
    }
    if let Some(rows) = read_report::<PcaRow>(&out.join("analysis").join("pca.csv"), "analyze")? {
        let pts: Vec<(f64, f64, bool)> = rows.iter().map(|r| (r.x, r.y, r.highlight)).collect();
        save("pca.svg", scatter("Text embeddings, first two principal components", &pts))?;
    }
    if let Some(rows) = read_report::<NoiseRow>(&out.join("noise").join("noise.csv"), "noise")? {
        let means = mean_by_connector(&rows, |r| &r.connector, |r| (r.cosine_distance, r.drop_points));
        let cos: Vec<(String, f64)> = means.iter().map(|(c, (v, _))| (c.clone(), *v)).collect();
        let drop: Vec<(String, f64)> = means.iter().map(|(c, (_, v))| (c.clone(), *v)).collect();
        save("noise_cosine.svg", bar_chart("Output shift under feature noise", "mean cosine distance", &cos))?;
        save("noise_drop.svg", bar_chart("Accuracy drop under feature noise", "points", &drop))?;
    }
    if let Some(rows) = read_report::<BenchRow>(&out.join("bench").join("bench.csv"), "bench")? {
        let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.connector.clone(), 1e3 * r.median_latency)).collect();
        save("bench.svg", bar_chart("Forward latency", "median ms", &bars))?;
    }
    if let Some(rows) = read_report::<ComparisonRow>(&out.join("analysis").join("comparison.csv"), "analyze")? {
        let means = mean_by_connector(&rows, |r| &r.connector, |r| (r.token_accuracy, r.mean_loss));
        let bars: Vec<(String, f64)> = means.iter().map(|(c, (v, _))| (c.clone(), *v)).collect();
        save("comparison.svg", bar_chart("Low-resource token accuracy", "accuracy", &bars))?;
    }
    if let Some(rows) = read_report::<PruneRow>(&out.join("prune").join("prune.csv"), "prune")? {
        let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.condition.clone(), r.delta_accuracy_points)).collect();
        save("prune.svg", bar_chart("Accuracy change after pruning", "points", &bars))?;
    }

    if written.is_empty() {
        return Err(CliError::Data(format!(
            "no reports found under {}; run `alignbench analyze`, `alignbench prune`, `alignbench noise` or `alignbench bench` first",
            out.display()
        )));
    }
    Ok(format!("wrote {} to {}", written.join(", "), fig.display()))
}
