//! The subcommands, as library functions over a run root.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vlminv_core::evaluation::{build_report, FeatureExtractor, GridReport, TargetVerdict};
use vlminv_core::io::{sha256_hex, write_atomic, write_json};
use vlminv_core::losses::{estimate_reg_anchor, IdentityLoss};
use vlminv_core::pipeline::{judge, run_attack, AttackOutcome};
use vlminv_core::selection::AugmentConfig;
use vlminv_core::strategies::{trace_csv, InversionTarget};
use vlminv_core::toy::stack::{build_toy_stack, load_toy_stack, ToyStack};
use vlminv_core::{AttackConfig, InversionResult, LossKind, RegAnchor, Strategy, TokenSequence};

use crate::layout::*;
use crate::settings::{AnchorSettings, Settings};

pub fn build(root: &RunRoot, settings: &Settings, overwrite: bool) -> Result<ToyStack> {
    let stack = build_toy_stack(&settings.stack, &root.build_dir(), overwrite)?;
    if stack.rebuilt {
        log::info!("built toy stack {}", stack.record.config_hash);
    } else {
        log::info!("toy stack {} is up to date", stack.record.config_hash);
    }
    Ok(stack)
}

/// Loads the cached anchor when it was estimated with the same settings on
/// the same model, else estimates and stores it.
pub fn load_anchor(root: &RunRoot, stack: &ToyStack, settings: &AnchorSettings) -> Result<Arc<RegAnchor>> {
    let path = root.anchor_path();
    let prompt = &stack.dataset.prompt;
    let fingerprint = vlminv_core::TargetModel::fingerprint(&*stack.vlm);
    if path.exists() {
        let cached = RegAnchor::load(&path)?;
        if cached.requested == settings.count
            && cached.seed == settings.seed
            && cached.model_fingerprint == fingerprint
            && &cached.prompt == prompt
        {
            return Ok(Arc::new(cached));
        }
    }
    let prompt_seq = TokenSequence::encode(prompt, Arc::clone(&stack.dataset.vocab))?;
    let public: Vec<_> = stack.dataset.public.iter().map(|s| s.image.clone()).collect();
    let anchor = estimate_reg_anchor(&*stack.vlm, &prompt_seq, &public, settings.count, settings.seed)?;
    anchor.save(&path)?;
    Ok(Arc::new(anchor))
}

/// Everything needed to replay one cell bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub target: u32,
    pub seed: u64,
    pub answer: String,
    pub attack: AttackConfig,
    pub augment: AugmentConfig,
    pub anchor: AnchorSettings,
    pub stack_config_hash: String,
    pub vlm_sha256: String,
    pub generator_sha256: String,
    pub classifier_sha256: String,
}

impl RunSnapshot {
    pub fn key(&self) -> CellKey {
        CellKey {
            strategy: self.strategy,
            loss: self.loss,
            target: self.target,
            seed: self.seed,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("snapshot serializes"))
    }
}

/// `run.json`, written last so its presence marks a finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_hash: String,
    pub snapshot: RunSnapshot,
    pub best_candidate: usize,
    pub trace_sha256: String,
    pub metrics_sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct CandidateSummary {
    candidate_id: usize,
    pool_index: usize,
    pool_score: f64,
    final_loss: f64,
    matched: bool,
    decoded: String,
    augmented_loss: Option<f64>,
}

/// Shared state for running cells against one build.
pub struct Context {
    pub stack: ToyStack,
    pub anchor: Arc<RegAnchor>,
    pub prompt: TokenSequence,
    /// Classifier features of each private identity's images.
    pub references: BTreeMap<u32, Vec<Vec<f64>>>,
}

impl Context {
    pub fn open(root: &RunRoot, anchor: &AnchorSettings) -> Result<Self> {
        let stack = load_toy_stack(&root.build_dir())?;
        let anchor = load_anchor(root, &stack, anchor)?;
        let prompt = TokenSequence::encode(&stack.dataset.prompt, Arc::clone(&stack.dataset.vocab))?;
        let mut references: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for s in &stack.dataset.private {
            references
                .entry(s.identity_id)
                .or_default()
                .push(stack.classifier.features(&s.image)?);
        }
        Ok(Self {
            stack,
            anchor,
            prompt,
            references,
        })
    }

    pub fn private_targets(&self) -> Vec<u32> {
        self.stack.dataset.private_identities().map(|s| s.identity_id).collect()
    }

    pub fn snapshot(&self, settings: &Settings, key: &CellKey) -> Result<RunSnapshot> {
        let spec = self
            .stack
            .dataset
            .private_identities()
            .find(|s| s.identity_id == key.target)
            .ok_or_else(|| anyhow!("target {} is not a private identity", key.target))?;
        let attack = AttackConfig {
            strategy: key.strategy,
            loss: key.loss,
            seed: key.seed,
            ..settings.attack.clone()
        };
        let record = &self.stack.record;
        Ok(RunSnapshot {
            strategy: key.strategy,
            loss: key.loss,
            target: key.target,
            seed: key.seed,
            answer: spec.name.clone(),
            attack,
            augment: settings.augment,
            anchor: settings.anchor.clone(),
            stack_config_hash: record.config_hash.clone(),
            vlm_sha256: record.vlm_sha256.clone(),
            generator_sha256: record.generator_sha256.clone(),
            classifier_sha256: record.classifier_sha256.clone(),
        })
    }

    fn check_build(&self, snap: &RunSnapshot) -> Result<()> {
        let r = &self.stack.record;
        if (&r.vlm_sha256, &r.generator_sha256, &r.classifier_sha256)
            != (&snap.vlm_sha256, &snap.generator_sha256, &snap.classifier_sha256)
        {
            bail!("the build in this run root differs from the one the run used");
        }
        if (self.anchor.requested, self.anchor.seed) != (snap.anchor.count, snap.anchor.seed) {
            bail!("anchor settings differ from the run's");
        }
        Ok(())
    }
}

/// In-memory outputs of one cell.
pub struct CellOutput {
    pub outcome: AttackOutcome,
    pub verdict: TargetVerdict,
    pub trace: Vec<u8>,
    pub metrics: Vec<u8>,
}

pub fn execute_cell(ctx: &Context, snap: &RunSnapshot) -> Result<CellOutput> {
    ctx.check_build(snap)?;
    let vocab = Arc::clone(&ctx.stack.dataset.vocab);
    let answer = TokenSequence::answer(&snap.answer, vocab)?;
    let anchor = (snap.loss == LossKind::Lom).then(|| Arc::clone(&ctx.anchor));
    let loss = IdentityLoss::new(snap.loss, snap.attack.lambda, anchor)?;
    let target = InversionTarget::new(&*ctx.stack.vlm, &*ctx.stack.generator, &ctx.prompt, &answer, &loss);
    let outcome = run_attack(&target, &snap.attack, &snap.augment)?;
    let references = ctx.references.get(&snap.target).map(Vec::as_slice).unwrap_or(&[]);
    let verdict = judge(
        outcome.best(),
        snap.target,
        snap.seed,
        &snap.answer,
        &ctx.stack.classifier,
        references,
    )?;
    let trace = trace_csv(&outcome.best().records)?;
    let mut metrics = serde_json::to_vec_pretty(&verdict)?;
    metrics.push(b'\n');
    Ok(CellOutput {
        outcome,
        verdict,
        trace,
        metrics,
    })
}

fn write_cell(dir: &Path, snap: &RunSnapshot, out: &CellOutput) -> Result<RunRecord> {
    std::fs::create_dir_all(dir)?;
    let best = out.outcome.best();
    let augmented: BTreeMap<usize, f64> = out
        .outcome
        .ranking
        .iter()
        .map(|r| (r.candidate_id, r.mean_loss))
        .collect();
    let summaries: Vec<CandidateSummary> = out
        .outcome
        .candidates
        .iter()
        .zip(&out.outcome.selection.selected)
        .map(|(c, s)| CandidateSummary {
            candidate_id: c.candidate_id,
            pool_index: s.pool_index,
            pool_score: s.score,
            final_loss: c.records.last().map_or(f64::NAN, |r| r.aggregate),
            matched: c.final_match,
            decoded: c.decoded.clone(),
            augmented_loss: augmented.get(&c.candidate_id).copied(),
        })
        .collect();
    let selection = serde_json::json!({
        "pool": out.outcome.selection.pool,
        "selected": out.outcome.selection.selected.iter().map(|s| serde_json::json!({
            "pool_index": s.pool_index,
            "score": s.score,
            "latent": s.latent,
        })).collect::<Vec<_>>(),
        "ranking": out.outcome.ranking,
    });
    write_json(&dir.join(SELECTION_FILE), &selection)?;
    write_json(&dir.join(CANDIDATES_FILE), &summaries)?;
    write_json(&dir.join(RESULT_FILE), best)?;
    best.image.save_png(&dir.join(IMAGE_FILE))?;
    write_atomic(&dir.join(TRACE_FILE), &out.trace)?;
    write_atomic(&dir.join(METRICS_FILE), &out.metrics)?;
    let record = RunRecord {
        run_hash: snap.hash(),
        snapshot: snap.clone(),
        best_candidate: best.candidate_id,
        trace_sha256: sha256_hex(&out.trace),
        metrics_sha256: sha256_hex(&out.metrics),
    };
    write_json(&dir.join(RUN_FILE), &record)?;
    Ok(record)
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(dir.join(RUN_FILE)).with_context(|| format!("reading {}", dir.join(RUN_FILE).display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Default)]
pub struct AttackSummary {
    pub ran: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
}

impl AttackSummary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

/// The requested grid in a fixed order.
pub fn grid_cells(settings: &Settings, all_targets: &[u32]) -> Vec<CellKey> {
    let targets = if settings.grid.targets.is_empty() {
        all_targets.to_vec()
    } else {
        settings.grid.targets.clone()
    };
    let mut cells = Vec::new();
    for &strategy in &settings.grid.strategies {
        for &loss in &settings.grid.losses {
            for &target in &targets {
                for &seed in &settings.grid.seeds {
                    cells.push(CellKey {
                        strategy,
                        loss,
                        target,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(root: &RunRoot, ctx: &Context, settings: &Settings, key: &CellKey, force: bool) -> Result<CellStatus> {
    let snap = ctx.snapshot(settings, key)?;
    let dir = root.cell_dir(key);
    if !force && dir.join(RUN_FILE).exists() {
        if let Ok(existing) = read_record(&dir) {
            if existing.run_hash == snap.hash() {
                return Ok(CellStatus::Skipped);
            }
        }
    }
    let out = execute_cell(ctx, &snap)?;
    write_cell(&dir, &snap, &out)?;
    log::info!(
        "{}/{}/{}/{}: matched={} decoded={:?}",
        key.strategy,
        key.loss,
        key.target,
        key.seed,
        out.verdict.matched,
        out.verdict.decoded
    );
    Ok(CellStatus::Ran)
}

/// Runs every requested cell on a pool of `jobs` workers. Finished cells
/// whose snapshot hash is unchanged are skipped unless `force` is set.
pub fn attack(root: &RunRoot, settings: &Settings, jobs: usize, force: bool) -> Result<AttackSummary> {
    settings.attack.validate()?;
    let ctx = Context::open(root, &settings.anchor)?;
    let cells = grid_cells(settings, &ctx.private_targets());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<(CellKey, Result<CellStatus>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| (*key, run_cell(root, &ctx, settings, key, force)))
            .collect()
    });
    let mut summary = AttackSummary::default();
    for (key, r) in results {
        match r {
            Ok(CellStatus::Ran) => summary.ran.push(key),
            Ok(CellStatus::Skipped) => summary.skipped.push(key),
            Err(e) => {
                log::error!("{}/{}/{}/{} failed: {e:#}", key.strategy, key.loss, key.target, key.seed);
                summary.failed.push((key, format!("{e:#}")));
            }
        }
    }
    Ok(summary)
}

fn settings_hash(settings: &Settings) -> String {
    sha256_hex(&serde_json::to_vec(settings).expect("settings serialize"))
}

/// Aggregates every finished cell into `reports/metrics.json` and
/// `reports/report.json`; cells of the configured grid with no runs are
/// reported as missing.
pub fn evaluate(root: &RunRoot, settings: &Settings) -> Result<GridReport> {
    let mut verdicts = Vec::new();
    let mut grid: Vec<(Strategy, LossKind)> = Vec::new();
    for &s in &settings.grid.strategies {
        for &l in &settings.grid.losses {
            grid.push((s, l));
        }
    }
    for dir in root.completed_cells()? {
        let bytes = std::fs::read(dir.join(METRICS_FILE)).with_context(|| format!("reading {}", dir.display()))?;
        let v: TargetVerdict = serde_json::from_slice(&bytes)?;
        if !grid.contains(&(v.strategy, v.loss)) {
            grid.push((v.strategy, v.loss));
        }
        verdicts.push(v);
    }
    let report = build_report(&verdicts, &grid, &settings_hash(settings));
    let dir = root.reports_dir();
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("metrics.json"), &report.metrics_json()?)?;
    report.write_json(&dir.join("report.json"))?;
    Ok(report)
}

/// Mean aggregate loss per step over the runs of each cell.
fn loss_curves(root: &RunRoot) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for dir in root.completed_cells()? {
        let result: InversionResult = serde_json::from_slice(&std::fs::read(dir.join(RESULT_FILE))?)?;
        let (total, counts) = sums
            .entry(format!("{}/{}", result.strategy, result.loss))
            .or_default();
        for (i, r) in result.records.iter().enumerate() {
            if total.len() <= i {
                total.push(0.0);
                counts.push(0);
            }
            total[i] += r.aggregate;
            counts[i] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (t, c))| (k, t.iter().zip(&c).map(|(s, n)| s / *n as f64).collect()))
        .collect())
}

/// Renders the evaluated report: summary and per-target CSVs plus plots.
pub fn report(root: &RunRoot) -> Result<Vec<std::path::PathBuf>> {
    let path = root.reports_dir().join("report.json");
    let bytes = std::fs::read(&path).with_context(|| format!("{} not found; run evaluate first", path.display()))?;
    let report: GridReport = serde_json::from_slice(&bytes)?;
    Ok(report.write(&root.reports_dir(), &loss_curves(root)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCheck {
    pub trace_identical: bool,
    pub metrics_identical: bool,
}

impl ReplayCheck {
    pub fn ok(&self) -> bool {
        self.trace_identical && self.metrics_identical
    }
}

/// Recomputes a finished cell from its snapshot and byte-compares the trace
/// and metrics with what is on disk.
pub fn replay(root: &RunRoot, cell_dir: &Path) -> Result<ReplayCheck> {
    let record = read_record(cell_dir)?;
    if record.run_hash != record.snapshot.hash() {
        bail!("{} has a snapshot that does not match its recorded hash", cell_dir.display());
    }
    let ctx = Context::open(root, &record.snapshot.anchor)?;
    let out = execute_cell(&ctx, &record.snapshot)?;
    let trace = std::fs::read(cell_dir.join(TRACE_FILE))?;
    let metrics = std::fs::read(cell_dir.join(METRICS_FILE))?;
    Ok(ReplayCheck {
        trace_identical: trace == out.trace,
        metrics_identical: metrics == out.metrics,
    })
}
