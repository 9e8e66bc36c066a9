//! End-to-end experiment pipeline: data generation, pretext pretraining,
//! cohort training with periodic evaluation, the diversity ablation grid,
//! seed aggregation and distillation.

use std::collections::BTreeMap;
use std::io::Write;

use crate::config::RunConfig;
use crate::data::{generate_dataset_sized, make_splits, Dataset, SplitSpec};
use crate::distill::{distill, DistillOutcome};
use crate::encoder::{init_cohort_params, pretrain_backbone, Backbone, EncoderArch, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_cohort, recall_at_k, RetrievalReport, REPORT_HEADER};
use crate::rng::{self, purpose};
use crate::trainer::{train_cohort, CohortTrainer, Diversity, MemberState, TrainTrace};

/// Name of the baseline row of the ablation grid.
pub const INDEPENDENT: &str = "independent";

/// Data, splits and pretrained backbones shared by every run of a config.
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: SplitSpec,
    /// One backbone per distinct hidden layout in the cohort.
    pub backbones: Vec<Backbone>,
}

impl Prepared {
    pub fn train_indices(&self) -> Vec<usize> {
        self.dataset.indices_of(&self.splits.train_classes)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.dataset.indices_of(&self.splits.test_classes)
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset_sized(
        cfg.data_classes,
        cfg.data_images_per_class,
        cfg.data_seed,
        cfg.data_height,
        cfg.data_width,
    )
}

/// Distinct backbone layouts needed by `archs`, in first-use order.
fn backbone_layouts(archs: &[EncoderArch]) -> Vec<EncoderArch> {
    let mut out: Vec<EncoderArch> = Vec::new();
    for a in archs {
        if !out.iter().any(|b| b.hidden_dims == a.hidden_dims) {
            out.push(a.clone());
        }
    }
    out
}

/// Pretrains every backbone layout of `cfg` on the pretext classes. Backbones
/// depend only on the data seed, so all run seeds share them.
pub fn pretrain(cfg: &RunConfig, dataset: &Dataset, splits: &SplitSpec) -> Result<Vec<Backbone>> {
    backbone_layouts(&cfg.archs()?)
        .iter()
        .enumerate()
        .map(|(k, arch)| {
            let seed = rng::derive(cfg.data_seed, &[purpose::BACKBONE_INIT, k as u64]);
            let out = pretrain_backbone(arch, dataset, &splits.pretext_classes, &cfg.pretrain, seed)?;
            log::info!(
                "pretrained backbone {:?}: pretext accuracy {:.3}",
                arch.hidden_dims,
                out.train_accuracy
            );
            Ok(out.backbone)
        })
        .collect()
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = generate_data(cfg)?;
    prepare_with(cfg, dataset)
}

pub fn prepare_with(cfg: &RunConfig, dataset: Dataset) -> Result<Prepared> {
    if dataset.height != cfg.data_height || dataset.width != cfg.data_width {
        return Err(invalid("dataset extents do not match the config"));
    }
    let splits = make_splits(&dataset, cfg.data_split, cfg.data_seed)?;
    let backbones = if cfg.pretrain_shared {
        pretrain(cfg, &dataset, &splits)?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        dataset,
        splits,
        backbones,
    })
}

/// Initial cohort parameters for run `seed`.
pub fn init_params(prep: &Prepared, cfg: &RunConfig, seed: u64) -> Result<Vec<EncoderParams>> {
    let cohort = cfg.cohort_config(seed)?;
    init_cohort_params(
        &cohort.archs,
        &prep.backbones,
        cfg.head_seed(seed),
        cohort.head_seeding(),
        cfg.pretrain_shared,
    )
}

pub struct RunResult {
    pub seed: u64,
    pub config_hash: String,
    pub members: Vec<MemberState>,
    pub trace: TrainTrace,
    /// Test-split reports every `eval.every` epochs and at the final epoch.
    pub reports: Vec<RetrievalReport>,
}

impl RunResult {
    pub fn params(&self) -> Vec<EncoderParams> {
        self.members.iter().map(|m| m.params.clone()).collect()
    }

    pub fn final_report(&self) -> &RetrievalReport {
        self.reports.last().expect("at least the final epoch is evaluated")
    }

    pub fn write_reports<W: Write>(&self, config_id: &str, out: &mut W) -> Result<()> {
        writeln!(out, "# config_hash={}", self.config_hash)?;
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.reports {
            r.write_rows(config_id, out)?;
        }
        Ok(())
    }
}

/// Trains one cohort for `seed` and evaluates it on the test classes.
pub fn run_seed(prep: &Prepared, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    run_seed_observed(prep, cfg, seed, |_, _| Ok(()))
}

/// [`run_seed`] with a callback after every epoch (after evaluation).
pub fn run_seed_observed(
    prep: &Prepared,
    cfg: &RunConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &CohortTrainer<'_>) -> Result<()>,
) -> Result<RunResult> {
    let cohort = cfg.cohort_config(seed)?;
    let init = init_params(prep, cfg, seed)?;
    let test = prep.test_indices();
    let mut reports = Vec::new();
    let outcome = train_cohort(&cohort, &prep.dataset, &prep.splits.train_classes, init, |epoch, t| {
        if epoch % cfg.eval_every == 0 || epoch == cfg.train_epochs {
            let r = evaluate_cohort(&t.params(), &prep.dataset, &test, &cfg.eval_ks, epoch, "test")?;
            log::debug!("seed {seed} epoch {epoch}: ensemble R@1 {:?}", r.ensemble_recall(1));
            reports.push(r);
        }
        observe(epoch, t)
    })?;
    if reports.is_empty() {
        let params: Vec<EncoderParams> = outcome.params();
        reports.push(evaluate_cohort(&params, &prep.dataset, &test, &cfg.eval_ks, 0, "test")?);
    }
    Ok(RunResult {
        seed,
        config_hash: cfg.hash(),
        members: outcome.members,
        trace: outcome.trace,
        reports,
    })
}

/// The config for one ablation row: `independent` (distinct heads, no mutual
/// loss, no temporal or view diversity) or a diversity combination such as
/// `md+td+vd` trained with the mutual loss.
pub fn ablation_variant(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if name == INDEPENDENT {
        cfg.diversity = Diversity {
            md: true,
            td: false,
            vd: false,
        };
        cfg.lambda.target = 0.0;
    } else {
        cfg.diversity = Diversity::parse(name)?;
    }
    cfg.members.values_mut().for_each(|m| m.update_prob = None);
    cfg.validate()?;
    Ok(cfg)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub config: String,
    pub seeds: usize,
    pub member1: (f64, f64),
    pub ensemble: (f64, f64),
    /// Per-seed final values, in seed order.
    pub member1_runs: Vec<f64>,
    pub ensemble_runs: Vec<f64>,
}

pub const GRID_HEADER: &str = "config,seeds,member1_mean,member1_std,ensemble_mean,ensemble_std";

impl GridRow {
    pub fn from_runs(config: &str, runs: &[RunResult], k: usize) -> Result<Self> {
        let pick = |f: &dyn Fn(&RetrievalReport) -> Option<f64>| -> Result<Vec<f64>> {
            runs.iter()
                .map(|r| f(r.final_report()).ok_or_else(|| invalid(format!("recall@{k} not evaluated"))))
                .collect()
        };
        let member1_runs = pick(&|r| r.member_recall(0, k))?;
        let ensemble_runs = pick(&|r| r.ensemble_recall(k))?;
        Ok(Self {
            config: config.to_string(),
            seeds: runs.len(),
            member1: mean_std(&member1_runs),
            ensemble: mean_std(&ensemble_runs),
            member1_runs,
            ensemble_runs,
        })
    }
}

pub fn write_grid<W: Write>(rows: &[GridRow], config_hash: &str, out: &mut W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "{GRID_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.config, r.seeds, r.member1.0, r.member1.1, r.ensemble.0, r.ensemble.1
        )?;
    }
    Ok(())
}

/// Runs every named variant over all seeds of `base`. Data and pretrained
/// backbones are prepared once and shared.
pub fn ablate(base: &RunConfig, variants: &[&str], k: usize) -> Result<(Vec<GridRow>, Vec<(String, Vec<RunResult>)>)> {
    let prep = prepare(base)?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &name in variants {
        let cfg = ablation_variant(base, name)?;
        let runs = base
            .seeds
            .iter()
            .map(|&s| run_seed(&prep, &cfg, s))
            .collect::<Result<Vec<_>>>()?;
        rows.push(GridRow::from_runs(name, &runs, k)?);
        all.push((name.to_string(), runs));
    }
    Ok((rows, all))
}

/// Final-epoch recall of one report file, keyed by `(config, member)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFile {
    pub config_hash: String,
    pub values: BTreeMap<(String, String), f64>,
}

/// Parses a report CSV written by [`RunResult::write_reports`], keeping the
/// last epoch's value at recall@`k`.
pub fn read_report(text: &str, k: usize) -> Result<ReportFile> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| Error::Format("report lacks a config hash line".into()))?
        .to_string();
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header {headers:?}")));
    }
    let mut latest: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = || Error::Format(format!("malformed report row {rec:?}"));
        let epoch: usize = field(0).parse().map_err(|_| bad())?;
        let kk: usize = field(3).parse().map_err(|_| bad())?;
        let recall: f64 = field(4).parse().map_err(|_| bad())?;
        if kk != k {
            continue;
        }
        let key = (field(1).to_string(), field(2).to_string());
        let e = latest.entry(key).or_insert((epoch, recall));
        if epoch >= e.0 {
            *e = (epoch, recall);
        }
    }
    Ok(ReportFile {
        config_hash: hash,
        values: latest.into_iter().map(|(k, (_, v))| (k, v)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub config: String,
    pub member: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub const AGGREGATE_HEADER: &str = "config,member,runs,mean,std";

/// Mean ± std over report files; all files must carry the same config hash.
pub fn aggregate(files: &[ReportFile]) -> Result<Vec<AggregateRow>> {
    let first = files.first().ok_or_else(|| invalid("no report files to aggregate"))?;
    if let Some(f) = files.iter().find(|f| f.config_hash != first.config_hash) {
        return Err(Error::Config(format!(
            "config hash mismatch: {} vs {}",
            first.config_hash, f.config_hash
        )));
    }
    let mut groups: BTreeMap<&(String, String), Vec<f64>> = BTreeMap::new();
    for f in files {
        for (k, v) in &f.values {
            groups.entry(k).or_default().push(*v);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((config, member), xs)| {
            let (mean, std) = mean_std(&xs);
            AggregateRow {
                config: config.clone(),
                member: member.clone(),
                runs: xs.len(),
                mean,
                std,
            }
        })
        .collect())
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], config_hash: &str, out: &mut W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.config, r.member, r.runs, r.mean, r.std)?;
    }
    Ok(())
}

/// Fresh student for run `seed`: member 1's architecture on the pretrained
/// backbone with a new projection head.
pub fn init_student(prep: &Prepared, cfg: &RunConfig, seed: u64) -> Result<EncoderParams> {
    let arch = cfg.member_arch(0)?;
    let head_seed = rng::derive(seed, &[purpose::DISTILL, 2]);
    let params = init_cohort_params(
        &[arch],
        &prep.backbones,
        head_seed,
        crate::encoder::HeadSeeding::Shared,
        cfg.pretrain_shared,
    )?;
    Ok(params.into_iter().next().expect("one student"))
}

pub struct DistillResult {
    pub outcome: DistillOutcome,
    /// Student test recall at each of `cfg.eval_ks`.
    pub recall: Vec<f64>,
}

/// Distills `teachers` into a fresh student and evaluates it on the test classes.
pub fn run_distill(prep: &Prepared, cfg: &RunConfig, teachers: &[EncoderParams], seed: u64) -> Result<DistillResult> {
    let student = init_student(prep, cfg, seed)?;
    let outcome = distill(
        teachers,
        student,
        &prep.dataset,
        &prep.splits.train_classes,
        &cfg.distill,
        &cfg.distill_training(seed),
    )?;
    let test = prep.test_indices();
    let emb = outcome.student.embed_dataset(&prep.dataset, &test)?;
    let recall = recall_at_k(&emb, &prep.dataset.labels(&test), &cfg.eval_ks)?;
    Ok(DistillResult { outcome, recall })
}
