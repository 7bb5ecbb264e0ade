//! Experiment orchestration: data preparation, the four label conditions,
//! training, shift-suite evaluation and report assembly.

use std::path::Path;

use pqlabel_core::clustering::{extract_features, kmeans_fit, label_centroids, KMeansFit, KMeansParams};
use pqlabel_core::image::{clean_labels, validate_dataset};
use pqlabel_core::model::{train, Classifier, DuqConfig, TrainHyper, TrainLog};
use pqlabel_core::pool::{
    build_condition, calibrate_pool_frac, disagreement_rate, replicate, CentroidLabeler, Condition,
    ConditionSources, LabelFile, MultiLabelDataset, Provenance,
};
use pqlabel_core::quality::{rank_by_quality, score_dataset, ScoredSample};
use pqlabel_core::rng::derive_seed;
use pqlabel_core::shifts::{build_suite_with, ShiftSpec, SuiteKind};
use pqlabel_core::synthetic::{synthetic_dataset, SyntheticSpec};
use pqlabel_core::Sample;

use crate::config::{DataConfig, ExperimentConfig, Head};
use crate::data_io::{
    load_cifar10_batches, load_cifar10_binary, load_label_file, render_assignments, render_kmeans,
    render_label_csv, render_manifest, render_pairs, render_scores, render_train_log, write_file, Stamp,
};
use crate::error::{Error, Result, ResultExt};
use crate::report::{evaluate_checks, Cell, Disagreement, EvalReport, Metric, Outcome, SeedRun, SpecResult, Verdict};

/// Seeds used for one run seed. Every condition shares them, so conditions
/// differ only in their labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub softmax_init: u64,
    pub softmax_shuffle: u64,
    pub duq_init: u64,
    pub duq_shuffle: u64,
    pub kmeans: u64,
    pub mc_dropout: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        let d = |i| derive_seed(seed, &[i]);
        Self { softmax_init: d(1), softmax_shuffle: d(2), duq_init: d(3), duq_shuffle: d(4), kmeans: d(5), mc_dropout: d(6) }
    }
}

/// Train/test data and the label sources shared by all runs.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub clean: Vec<u8>,
    pub noisy: Option<LabelFile>,
    pub human: Option<LabelFile>,
    pub scored: Vec<ScoredSample>,
    pub ranking: Vec<usize>,
    pub cluster_features: Vec<Vec<f64>>,
    pub stamp: Stamp,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = match &cfg.data {
        DataConfig::Synthetic { seed, train, test, classes, side, .. } => {
            let all = synthetic_dataset(&SyntheticSpec { seed: *seed, samples: train + test, classes: *classes, side: *side })?;
            let (a, b) = all.split_at(*train);
            let test = b.iter().enumerate().map(|(i, s)| Sample { id: i, ..s.clone() }).collect();
            (a.to_vec(), test)
        }
        DataConfig::Cifar10 { train_files, test_file, train_count, test_count, classes, .. } => (
            load_cifar10_batches(train_files, *train_count, *classes)?,
            load_cifar10_binary(test_file, *test_count, *classes)?,
        ),
    };
    validate_dataset(&train, cfg.data.classes())?;
    validate_dataset(&test, cfg.data.classes())?;
    Ok((train, test))
}

/// Noisy single-label and multi-annotator label files. Synthetic data
/// without files gets simulated annotators, tagged as such.
pub fn label_sources(cfg: &ExperimentConfig, clean: &[u8]) -> Result<(Option<LabelFile>, Option<LabelFile>)> {
    let classes = cfg.data.classes();
    let (noisy_path, human_path) = cfg.data.label_paths();
    let load = |p: Option<&Path>, cond: Condition| -> Result<Option<LabelFile>> {
        p.map(|p| {
            let f = load_label_file(p, classes).context(|| format!("condition {}", cond.as_str()))?;
            f.check_covers(clean.len()).map_err(|e| Error::from(e).context(format!("condition {}", cond.as_str())))?;
            Ok(f)
        })
        .transpose()
    };
    let mut noisy = load(noisy_path, Condition::NoisySingle)?;
    let mut human = load(human_path, Condition::HumanMulti)?;
    if let DataConfig::Synthetic { annotators, .. } = &cfg.data {
        if noisy.is_none() || human.is_none() {
            let sim = annotators.simulate(clean, classes)?;
            noisy.get_or_insert(sim.worst);
            human.get_or_insert(sim.all);
        }
    }
    for (cond, file, key) in
        [(Condition::NoisySingle, &noisy, "data.noisy_labels"), (Condition::HumanMulti, &human, "data.human_labels")]
    {
        if cfg.conditions.contains(&cond) && file.is_none() {
            return Err(Error::Config(format!("condition {} requires a label file ({key})", cond.as_str())));
        }
    }
    Ok((noisy, human))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let classes = cfg.data.classes();
    let (train, test) = load_data(cfg)?;
    let clean = clean_labels(&train)?;
    let (noisy, human) = label_sources(cfg, &clean)?;
    let (_, scored) = score_dataset(&train, cfg.ridge).context(|| "quality scoring".to_string())?;
    let ranking = rank_by_quality(&scored);
    let cluster_features = if cfg.conditions.contains(&Condition::PqMulti) {
        extract_features(&train, cfg.clustering.features).context(|| "clustering features".to_string())?
    } else {
        Vec::new()
    };
    let stamp = Stamp { digest: cfg.digest(), seeds: cfg.seeds.clone() };
    Ok(Prepared { cfg: cfg.clone(), classes, train, test, clean, noisy, human, scored, ranking, cluster_features, stamp })
}

impl Prepared {
    pub fn scores_by_id(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.train.len()];
        for s in &self.scored {
            v[s.id] = s.score;
        }
        v
    }

    pub fn fit_kmeans(&self, seed: u64) -> Result<KMeansFit> {
        let params = KMeansParams {
            k: self.classes,
            seed,
            max_iter: self.cfg.clustering.max_iter,
            tol: self.cfg.clustering.tol,
        };
        let mut fit = kmeans_fit(&self.cluster_features, &params)?;
        label_centroids(&mut fit.model, &fit.assignments, &self.clean, self.classes)?;
        Ok(fit)
    }

    /// Builds a condition's label set; returns the pool_frac used for
    /// pq_multi.
    pub fn build(&self, condition: Condition, kmeans: Option<&KMeansFit>) -> Result<(MultiLabelDataset, Option<f64>)> {
        let labeler = kmeans.map(|k| CentroidLabeler { model: &k.model, features: &self.cluster_features });
        let sources = ConditionSources {
            noisy_single: self.noisy.as_ref(),
            human_multi: self.human.as_ref(),
            ranking: Some(&self.ranking),
            labeler: labeler.as_ref().map(|l| l as _),
        };
        if condition == Condition::PqMulti && self.cfg.calibrate_pool {
            if let (Some(target), Some(l)) = (self.noisy_target(), labeler.as_ref()) {
                let cal = calibrate_pool_frac(&self.train, &self.ranking, &self.cfg.pool, self.classes, l, target)?;
                return Ok((cal.dataset, Some(cal.config.pool_frac)));
            }
        }
        let mld = build_condition(condition, &self.train, self.classes, &sources, &self.cfg.pool)?;
        Ok((mld, (condition == Condition::PqMulti).then_some(self.cfg.pool.pool_frac)))
    }

    /// Disagreement of the noisy single-label condition.
    pub fn noisy_target(&self) -> Option<f64> {
        let f = self.noisy.as_ref()?;
        let labels: Vec<Vec<u8>> = f.entries.values().map(|ls| vec![ls[0]]).collect();
        let mld = MultiLabelDataset { classes: self.classes, provenance: vec![f.source; labels.len()], labels };
        Some(disagreement_rate(&mld, &self.clean))
    }

    pub fn suites(&self) -> Result<Vec<(SuiteKind, Vec<(ShiftSpec, Vec<Sample>)>)>> {
        let table = self.cfg.shifts.table()?;
        self.cfg
            .suites
            .iter()
            .map(|&k| Ok((k, build_suite_with(&self.test, &self.cfg.shifts.specs(k), self.cfg.shifts.seed, &table)?)))
            .collect()
    }

    pub fn hyper(&self, shuffle_seed: u64, duq: bool, epoch_factor: usize) -> TrainHyper {
        let mut h = TrainHyper { seed: shuffle_seed, epochs: self.cfg.train.epochs * epoch_factor, ..self.cfg.train };
        if duq {
            h.learning_rate = self.cfg.duq_learning_rate;
        }
        h
    }
}

/// Trained models of one (condition, seed).
pub struct TrainedModels {
    pub softmax: Option<(Classifier, TrainLog)>,
    pub duq: Option<(Classifier, TrainLog)>,
}

pub fn train_models(
    prep: &Prepared,
    mld: &MultiLabelDataset,
    heads: &[Head],
    seeds: RunSeeds,
    epoch_factor: usize,
) -> Result<TrainedModels> {
    let pairs = replicate(mld);
    let softmax = if heads.iter().any(|h| !h.uses_duq_model()) {
        let mut mc = prep.cfg.model.clone();
        mc.seed = seeds.softmax_init;
        Some(train(&pairs, &prep.train, &mc, None, &prep.hyper(seeds.softmax_shuffle, false, epoch_factor)).context(|| "softmax model".into())?)
    } else {
        None
    };
    let duq = if heads.contains(&Head::Duq) {
        let mut mc = prep.cfg.model.clone();
        mc.seed = seeds.duq_init;
        let d: DuqConfig = prep.cfg.duq;
        Some(train(&pairs, &prep.train, &mc, Some(d), &prep.hyper(seeds.duq_shuffle, true, epoch_factor)).context(|| "duq model".into())?)
    } else {
        None
    };
    Ok(TrainedModels { softmax, duq })
}

/// Per-head, per-suite spec results of one (condition, seed).
pub type EvalResults = Vec<(Head, Vec<(SuiteKind, Vec<SpecResult>)>)>;

/// Evaluates every head on every shifted set. The trunk runs once per
/// image and model; vanilla and MC dropout share the softmax trunk.
pub fn evaluate(
    models: &TrainedModels,
    heads: &[Head],
    suites: &[(SuiteKind, Vec<(ShiftSpec, Vec<Sample>)>)],
    mc_passes: usize,
    mc_seed: u64,
) -> Result<EvalResults> {
    let softmax = models.softmax.as_ref().map(|m| &m.0);
    let duq = models.duq.as_ref().map(|m| &m.0);
    let mut out: EvalResults = heads.iter().map(|&h| (h, Vec::new())).collect();
    for (kind, sets) in suites {
        let mut per_head: Vec<Vec<SpecResult>> = vec![Vec::new(); heads.len()];
        for (spec_index, (spec, set)) in sets.iter().enumerate() {
            let mut sums = vec![(0usize, 0.0f64); heads.len()];
            let mut sws = softmax.map(Classifier::workspace);
            let mut dws = duq.map(Classifier::workspace);
            for s in set {
                let label = usize::from(s.clean_label.ok_or_else(|| {
                    Error::from(pqlabel_core::Error::Validation(format!("test sample {} has no label", s.id)))
                })?);
                if let (Some(m), Some(ws)) = (softmax, sws.as_mut()) {
                    m.compute_features(&s.image, ws)?;
                }
                if let (Some(m), Some(ws)) = (duq, dws.as_mut()) {
                    m.compute_features(&s.image, ws)?;
                }
                for (i, &h) in heads.iter().enumerate() {
                    let p = match h {
                        Head::Vanilla => softmax.expect("trained").softmax_from_features(sws.as_mut().expect("ws"))?,
                        Head::McDropout => {
                            let seed = derive_seed(mc_seed, &[*kind as u64, spec_index as u64, s.id as u64]);
                            softmax.expect("trained").mc_dropout_from_features(sws.as_mut().expect("ws"), mc_passes, seed)?
                        }
                        Head::Duq => duq.expect("trained").duq_from_features(dws.as_mut().expect("ws"))?.probs,
                    };
                    sums[i].0 += usize::from(p.argmax() == label);
                    sums[i].1 += p.entropy();
                }
            }
            let n = set.len() as f64;
            for (i, (correct, ent)) in sums.into_iter().enumerate() {
                per_head[i].push(SpecResult {
                    spec: spec.label(),
                    metric: Metric { accuracy: correct as f64 / n, entropy: ent / n },
                });
            }
        }
        for (i, specs) in per_head.into_iter().enumerate() {
            out[i].1.push((*kind, specs));
        }
    }
    Ok(out)
}

/// Per-head outcome of one (condition, seed); a model that fails to train
/// fails only the heads it backs.
pub type HeadResults = Vec<(Head, std::result::Result<Vec<(SuiteKind, Vec<SpecResult>)>, String>)>;

/// Result of one condition for one seed.
pub struct ConditionRun {
    pub condition: Condition,
    pub seed: u64,
    pub dataset: MultiLabelDataset,
    pub disagreement: f64,
    pub pool_frac: Option<f64>,
    pub models: TrainedModels,
    pub results: HeadResults,
}

/// Builds the condition's labels, trains the needed models and evaluates
/// every requested head on the suites. Runtime failures of one model are
/// recorded against its heads; input errors abort.
pub fn run_condition(
    prep: &Prepared,
    condition: Condition,
    heads: &[Head],
    seed: u64,
    suites: &[(SuiteKind, Vec<(ShiftSpec, Vec<Sample>)>)],
    kmeans: Option<&KMeansFit>,
    epoch_factor: usize,
) -> Result<ConditionRun> {
    let ctx = || format!("condition {} seed {seed}", condition.as_str());
    let seeds = RunSeeds::new(seed);
    let (dataset, pool_frac) = prep.build(condition, kmeans).context(ctx)?;
    let disagreement = disagreement_rate(&dataset, &prep.clean);
    let mut models = TrainedModels { softmax: None, duq: None };
    let mut results: HeadResults = Vec::new();
    let (duq_heads, softmax_heads): (Vec<Head>, Vec<Head>) = heads.iter().partition(|h| h.uses_duq_model());
    for group in [softmax_heads, duq_heads] {
        if group.is_empty() {
            continue;
        }
        let outcome = train_models(prep, &dataset, &group, seeds, epoch_factor).and_then(|trained| {
            let r = evaluate(&trained, &group, suites, prep.cfg.mc_passes, seeds.mc_dropout)?;
            Ok((trained, r))
        });
        match outcome.context(ctx) {
            Ok((trained, r)) => {
                models.softmax = models.softmax.or(trained.softmax);
                models.duq = models.duq.or(trained.duq);
                results.extend(r.into_iter().map(|(h, v)| (h, Ok(v))));
            }
            Err(e) if e.exit_code() == 2 => results.extend(group.iter().map(|&h| (h, Err(e.to_string())))),
            Err(e) => return Err(e),
        }
    }
    Ok(ConditionRun { condition, seed, dataset, disagreement, pool_frac, models, results })
}

/// Progress sink; the CLI prints to stderr, tests stay quiet.
pub type Progress<'a> = &'a dyn Fn(&str);

struct Grid<'a> {
    prep: &'a Prepared,
    suites: &'a [(SuiteKind, Vec<(ShiftSpec, Vec<Sample>)>)],
    progress: Progress<'a>,
}

impl Grid<'_> {
    /// Runs `conditions × heads` for every seed; artifacts go under `dir`.
    fn run(&self, dir: &Path, conditions: &[Condition], heads: &[Head], epoch_factor: usize) -> Result<(Vec<Cell>, Vec<Disagreement>)> {
        let prep = self.prep;
        let stamp = &prep.stamp;
        let target = prep.noisy_target();
        let scores = prep.scores_by_id();
        let mut runs: Vec<(Condition, u64, std::result::Result<HeadResults, String>)> = Vec::new();
        let mut disagreement = Vec::new();
        for &seed in &prep.cfg.seeds {
            let seed_dir = dir.join(format!("seed{seed}"));
            let kmeans = if conditions.contains(&Condition::PqMulti) {
                match prep.fit_kmeans(RunSeeds::new(seed).kmeans) {
                    Ok(fit) => {
                        write_file(&seed_dir.join("kmeans.csv"), render_kmeans(&fit.model, Some(stamp))?.as_bytes())?;
                        write_file(&seed_dir.join("assignments.csv"), render_assignments(&fit.assignments, Some(stamp))?.as_bytes())?;
                        Some(Ok(fit))
                    }
                    Err(e) => Some(Err(format!("k-means: {e}"))),
                }
            } else {
                None
            };
            for &condition in conditions {
                (self.progress)(&format!("seed {seed}: {}", condition.as_str()));
                let km = match (&kmeans, condition) {
                    (Some(Err(msg)), Condition::PqMulti) => {
                        runs.push((condition, seed, Err(msg.clone())));
                        continue;
                    }
                    (Some(Ok(fit)), _) => Some(fit),
                    _ => None,
                };
                match run_condition(prep, condition, heads, seed, self.suites, km, epoch_factor) {
                    Ok(run) => {
                        let cdir = seed_dir.join(condition.as_str());
                        let pairs = replicate(&run.dataset);
                        write_file(&cdir.join("pairs.csv"), render_pairs(&pairs, &run.dataset, Some(stamp))?.as_bytes())?;
                        write_file(
                            &cdir.join("pool_manifest.csv"),
                            render_manifest(&prep.ranking, &scores, &run.dataset, Some(stamp))?.as_bytes(),
                        )?;
                        for (name, m) in [("softmax", &run.models.softmax), ("duq", &run.models.duq)] {
                            if let Some((_, log)) = m {
                                write_file(&cdir.join(format!("train_log_{name}.csv")), render_train_log(log, Some(stamp))?.as_bytes())?;
                            }
                        }
                        disagreement.push(Disagreement {
                            condition,
                            seed,
                            rate: run.disagreement,
                            target,
                            pool_frac: run.pool_frac,
                        });
                        runs.push((condition, seed, Ok(run.results)));
                    }
                    Err(e) if e.exit_code() == 2 => runs.push((condition, seed, Err(e.to_string()))),
                    Err(e) => return Err(e),
                }
            }
        }
        let mut cells = Vec::new();
        for (suite, _) in self.suites {
            for &condition in conditions {
                for &head in heads {
                    let mut per_seed = Vec::new();
                    let mut failure = None;
                    for (c, seed, res) in &runs {
                        if *c != condition {
                            continue;
                        }
                        match res {
                            Ok(results) => match &results.iter().find(|(h, _)| *h == head).expect("every head run").1 {
                                Ok(by_suite) => {
                                    let specs = by_suite
                                        .iter()
                                        .find(|(k, _)| k == suite)
                                        .map(|(_, specs)| specs.clone())
                                        .expect("every suite evaluated");
                                    per_seed.push(SeedRun { seed: *seed, specs });
                                }
                                Err(msg) => {
                                    failure.get_or_insert_with(|| format!("seed {seed}: {msg}"));
                                }
                            },
                            Err(msg) => {
                                failure.get_or_insert_with(|| format!("seed {seed}: {msg}"));
                            }
                        }
                    }
                    let outcome = match failure {
                        Some(msg) => Outcome::Failed(msg),
                        None => Outcome::Done(per_seed),
                    };
                    cells.push(Cell { suite: *suite, condition, head, outcome });
                }
            }
        }
        Ok((cells, disagreement))
    }
}

fn notes(prep: &Prepared) -> Vec<String> {
    let mut notes = vec![
        "Suite values are unweighted means over the suite's shift specs; per-spec values are in breakdown.csv.".to_string(),
        "DUQ head: RBF kernels with centroid moving averages only; the two-sided gradient penalty is not applied.".to_string(),
        "MC dropout averages passes of the output layer over dropout masks on the penultimate features.".to_string(),
    ];
    match &prep.cfg.data {
        DataConfig::Synthetic { train, test, classes, side, .. } => {
            notes.push(format!("Data: synthetic oriented gratings, {train} train / {test} test, {classes} classes, {side}x{side}."));
        }
        DataConfig::Cifar10 { train_count, test_count, label_set, .. } => {
            notes.push(format!("Data: CIFAR-10 binary batches, {train_count} train / {test_count} test; noisy label set {label_set:?}."));
        }
    }
    for (name, f) in [("noisy_single", &prep.noisy), ("human_multi", &prep.human)] {
        if let Some(f) = f {
            if f.source == Provenance::Simulated {
                notes.push(format!("{name} labels come from simulated annotators, not human annotations."));
            }
        }
    }
    if prep.cfg.calibrate_pool {
        notes.push("pq_multi pool_frac was calibrated towards the noisy_single disagreement rate.".into());
    }
    notes
}

/// Runs every configured cell, writes the report files under
/// `cfg.output_dir` and returns the report.
pub fn reproduce(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<EvalReport> {
    let prep = prepare(cfg)?;
    let out = &cfg.output_dir;
    let stamp = &prep.stamp;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&out.join("scores.csv"), render_scores(&prep.scored, Some(stamp))?.as_bytes())?;
    for (name, f) in [("noisy_single", &prep.noisy), ("human_multi", &prep.human)] {
        if let Some(f) = f.as_ref().filter(|f| f.source == Provenance::Simulated) {
            write_file(&out.join("labels").join(format!("{name}.csv")), render_label_csv(f, Some(stamp))?.as_bytes())?;
        }
    }
    progress("building shift suites");
    let suites = prep.suites()?;
    let grid = Grid { prep: &prep, suites: &suites, progress };
    let (cells, disagreement) = grid.run(out, &cfg.conditions, &cfg.heads, 1)?;
    let mut report = EvalReport {
        stamp: stamp.clone(),
        heads: cfg.heads.clone(),
        conditions: cfg.conditions.clone(),
        suites: cfg.suites.clone(),
        cells,
        disagreement,
        notes: notes(&prep),
        checks: Vec::new(),
    };
    if cfg.acceptance.enabled {
        report.checks = evaluate_checks(&report, &cfg.acceptance);
        let directional = &report.checks[..3];
        let factor = cfg.acceptance.rerun_epoch_factor;
        if factor > 1 && directional.iter().any(|c| c.verdict == Verdict::Fail) {
            progress(&format!("directional check failed; rerunning vanilla cells with {factor}x epochs"));
            let conds: Vec<Condition> = [Condition::Clean, Condition::NoisySingle, Condition::PqMulti]
                .into_iter()
                .filter(|c| cfg.conditions.contains(c))
                .collect();
            let rerun_dir = out.join("rerun");
            let (cells, disagreement) = grid.run(&rerun_dir, &conds, &[Head::Vanilla], factor)?;
            let rerun = EvalReport {
                heads: vec![Head::Vanilla],
                conditions: conds,
                cells,
                disagreement,
                notes: vec![format!("Rerun of the vanilla cells with {factor}x epochs after a failed directional check.")],
                checks: Vec::new(),
                ..report.clone()
            };
            let mut rerun_checks = evaluate_checks(&rerun, &cfg.acceptance);
            rerun_checks.truncate(3);
            write_report(&rerun_dir, &EvalReport { checks: rerun_checks.clone(), ..rerun })?;
            for (first, second) in report.checks.iter_mut().zip(rerun_checks) {
                if first.verdict != Verdict::Fail {
                    continue;
                }
                first.detail = format!(
                    "first run {}: {}; rerun with {factor}x epochs: {}",
                    first.verdict.as_str(),
                    first.detail,
                    second.detail
                );
                first.verdict = second.verdict;
            }
        }
    }
    write_report(out, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("report.md"), report.render_markdown().as_bytes())?;
    write_file(&dir.join("report.csv"), report.render_table_csv()?.as_bytes())?;
    write_file(&dir.join("seeds.csv"), report.render_seeds_csv()?.as_bytes())?;
    write_file(&dir.join("breakdown.csv"), report.render_breakdown_csv()?.as_bytes())?;
    write_file(&dir.join("disagreement.csv"), report.render_disagreement_csv()?.as_bytes())?;
    Ok(())
}
