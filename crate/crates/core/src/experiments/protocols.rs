use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;

use super::config::{DataSource, ExperimentConfig, ExperimentKind};
use super::report::{aggregate, Arm, FailureKind, IndexKind, IndexSeries, Region, RunReport, RunRow, SeedFailure};
use crate::data::{gen_toy1d, gen_toy2d, inject_noise, load_csv, Dataset, NoisePlan, SplitIndices};
use crate::error::{Result, TsnetError};
use crate::training::{metrics, stream, train, Metrics, Predictions, Stream, TrainConfig, TrainHistory, TsnetModel, Variant};

/// One trained model kept for file output: its predictions on the
/// evaluation points and its training history.
#[derive(Clone, Debug)]
pub struct Showcase {
    pub seed: u64,
    pub train_config: TrainConfig,
    pub model: TsnetModel,
    pub history: TrainHistory,
    /// Evaluation features in raw units.
    pub eval_x: Array2<f64>,
    /// Predictions in reporting units.
    pub predictions: Predictions,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: RunReport,
    pub showcase: Option<Showcase>,
}

/// Worker count: `TSNET_THREADS` when set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("TSNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to [`worker_threads`] threads; results keep
/// the input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = worker_threads().min(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Data loaded once per experiment.
enum Source {
    Toy1d,
    Toy2d,
    Table(Dataset),
}

fn load_source(cfg: &ExperimentConfig) -> Result<Source> {
    Ok(match &cfg.data {
        DataSource::Toy1d => Source::Toy1d,
        DataSource::Toy2d => Source::Toy2d,
        DataSource::Csv { path, .. } => {
            let schema = cfg.csv_schema()?.expect("csv source has a schema");
            Source::Table(load_csv(path, &schema)?)
        }
    })
}

/// Raw split data for one seed. Toy data: the noisy sample is split into
/// train and validation and the noise-free grid becomes the test split.
fn prepare(cfg: &ExperimentConfig, source: &Source, seed: u64) -> Result<Dataset> {
    let problem = match source {
        Source::Table(ds) => return ds.clone().split(cfg.split.as_tuple(), seed),
        Source::Toy1d => gen_toy1d(seed)?,
        Source::Toy2d => gen_toy2d(seed)?,
    };
    let v = cfg.toy_val_fraction;
    let sample = problem.train.split((1.0 - v, v, 0.0), seed)?;
    let split = sample.split_indices()?.clone();
    let n = sample.len();
    let x = concatenate(Axis(0), &[sample.x.view(), problem.eval_x.view()])
        .map_err(|e| TsnetError::shape("prepare", e.to_string()))?;
    let y = concatenate(Axis(0), &[sample.y.view(), problem.eval_y.view()])
        .map_err(|e| TsnetError::shape("prepare", e.to_string()))?;
    let mut ds = Dataset::new(x, y, sample.feature_names, sample.target_names)?;
    ds.split = Some(SplitIndices {
        train: split.train,
        val: split.val,
        test: (n..n + problem.eval_x.nrows()).collect(),
    });
    Ok(ds)
}

fn with_train_rows(raw: &Dataset, rows: Vec<usize>) -> Result<Dataset> {
    let mut ds = raw.clone();
    let split = ds.split_indices()?.clone();
    ds.split = Some(SplitIndices { train: rows, ..split });
    Ok(ds)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Marks the evaluation rows inside the training support: the
/// `[q_lo, q_hi]` quantile interval for one feature, the bounding box of
/// the training rows otherwise.
pub fn interpolation_mask(train_x: &Array2<f64>, eval_x: &Array2<f64>, q_lo: f64, q_hi: f64) -> Result<Vec<bool>> {
    if train_x.ncols() != eval_x.ncols() || train_x.nrows() == 0 {
        return Err(TsnetError::shape("interpolation_mask", "need matching widths and training rows"));
    }
    let bounds: Vec<(f64, f64)> = train_x
        .columns()
        .into_iter()
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            if train_x.ncols() == 1 {
                (quantile(&v, q_lo), quantile(&v, q_hi))
            } else {
                (v[0], v[v.len() - 1])
            }
        })
        .collect();
    Ok(eval_x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&bounds).all(|(v, (lo, hi))| lo <= v && v <= hi))
        .collect())
}

/// A model trained on one split, with its test-split predictions.
#[derive(Clone)]
struct Fitted {
    model: TsnetModel,
    history: TrainHistory,
    n_train: usize,
    y_test: Array2<f64>,
    pred: Predictions,
}

fn fit(tc: &TrainConfig, raw: &Dataset, seed: u64) -> Result<Fitted> {
    fit_standardized(tc, &raw.clone().standardize()?, seed)
}

fn fit_standardized(tc: &TrainConfig, ds: &Dataset, seed: u64) -> Result<Fitted> {
    let out = train(tc, ds, seed)?;
    let (x, y) = ds.test()?;
    let p = out.model.predict_standardized(&x)?;
    let log = &out.model.transform_log;
    let pred = Predictions {
        mean: log.destandardize_targets(&p.mean)?,
        var: log.destandardize_target_var(&p.var)?,
        k_d: p.k_d,
    };
    Ok(Fitted {
        y_test: log.destandardize_targets(&y)?,
        pred,
        n_train: ds.split_indices()?.train.len(),
        model: out.model,
        history: out.history,
    })
}

impl Fitted {
    fn metrics_on(&self, mask: Option<&[bool]>) -> Result<Option<(usize, Metrics)>> {
        let rows: Vec<usize> = match mask {
            None => (0..self.y_test.nrows()).collect(),
            Some(m) => m.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect(),
        };
        if rows.is_empty() {
            return Ok(None);
        }
        let m = metrics(
            &self.y_test.select(Axis(0), &rows),
            &self.pred.mean.select(Axis(0), &rows),
            &self.pred.var.select(Axis(0), &rows),
        )?;
        Ok(Some((rows.len(), m)))
    }

    fn row(&self, seed: u64, variant: Variant, n_eval: usize, metrics: Metrics) -> RunRow {
        RunRow {
            seed,
            variant,
            region: None,
            noise_rate: None,
            arm: None,
            cycle: None,
            n_train: self.n_train,
            n_eval,
            metrics,
            best_epoch: self.history.best_epoch,
            epochs_run: self.history.records.len(),
        }
    }

    /// Whole-test row, plus In/Ext rows when `mask` is given.
    fn region_rows(&self, seed: u64, variant: Variant, mask: Option<&[bool]>) -> Result<Vec<RunRow>> {
        let Some(mask) = mask else {
            let (n, m) = self.metrics_on(None)?.expect("non-empty test split");
            return Ok(vec![self.row(seed, variant, n, m)]);
        };
        let outside: Vec<bool> = mask.iter().map(|b| !b).collect();
        let mut rows = Vec::new();
        for (region, sel) in [(Region::All, None), (Region::In, Some(mask)), (Region::Ext, Some(&outside[..]))] {
            if let Some((n, m)) = self.metrics_on(sel)? {
                rows.push(RunRow {
                    region: Some(region),
                    ..self.row(seed, variant, n, m)
                });
            }
        }
        Ok(rows)
    }

    fn showcase(self, seed: u64, tc: &TrainConfig, raw: &Dataset) -> Result<Showcase> {
        Ok(Showcase {
            seed,
            train_config: tc.clone(),
            eval_x: raw.test()?.0,
            model: self.model,
            history: self.history,
            predictions: self.pred,
        })
    }
}

fn region_mask(cfg: &ExperimentConfig, raw: &Dataset) -> Result<Option<Vec<bool>>> {
    if !cfg.data.is_toy() {
        return Ok(None);
    }
    let (train_x, _) = raw.train()?;
    let (test_x, _) = raw.test()?;
    interpolation_mask(&train_x, &test_x, cfg.ablation.quantile_lo, cfg.ablation.quantile_hi).map(Some)
}

type SeedResult = Result<(Vec<RunRow>, Option<Showcase>, Vec<String>)>;

/// Runs `job` for every seed and merges the results in seed order; the
/// showcase comes from the first seed that completed.
fn run_seeds(cfg: &ExperimentConfig, job: impl Fn(u64) -> SeedResult + Sync) -> ExperimentRun {
    let results = parallel_map(&cfg.seeds, |&s| job(s));
    let mut report = RunReport::new(cfg);
    let mut showcase = None;
    for (&seed, res) in cfg.seeds.iter().zip(results) {
        match res {
            Ok((rows, sc, notes)) => {
                report.rows.extend(rows);
                if showcase.is_none() {
                    showcase = sc;
                }
                for n in notes {
                    if !report.notes.contains(&n) {
                        report.notes.push(n);
                    }
                }
            }
            Err(e) => report.failed_seeds.push(SeedFailure {
                seed,
                kind: FailureKind::of(&e),
                error: e.to_string(),
            }),
        }
    }
    report.aggregates = aggregate(&report.rows);
    ExperimentRun { report, showcase }
}

/// Trains the configured variant per seed and evaluates it on the test
/// split (on toy data: the noise-free grid, with In/Ext rows).
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let tc = &cfg.train;
    Ok(run_seeds(cfg, |seed| {
        let raw = prepare(cfg, &source, seed)?;
        let mask = region_mask(cfg, &raw)?;
        let fitted = fit(tc, &raw, seed)?;
        let rows = fitted.region_rows(seed, tc.variant, mask.as_deref())?;
        Ok((rows, Some(fitted.showcase(seed, tc, &raw)?), Vec::new()))
    }))
}

/// Every listed variant on toy data, with interpolation, extrapolation and
/// overall rows.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    if !cfg.data.is_toy() {
        return Err(TsnetError::Config("ablation runs on toy data".into()));
    }
    let source = load_source(cfg)?;
    let show = if cfg.ablation.variants.contains(&Variant::Full) {
        Variant::Full
    } else {
        cfg.ablation.variants[0]
    };
    let mut run = run_seeds(cfg, |seed| {
        let raw = prepare(cfg, &source, seed)?;
        let mask = region_mask(cfg, &raw)?;
        let mut rows = Vec::new();
        let mut showcase = None;
        for &variant in &cfg.ablation.variants {
            let tc = TrainConfig { variant, ..cfg.train.clone() };
            let fitted = fit(&tc, &raw, seed)?;
            rows.extend(fitted.region_rows(seed, variant, mask.as_deref())?);
            if variant == show {
                showcase = Some(fitted.showcase(seed, &tc, &raw)?);
            }
        }
        Ok((rows, showcase, Vec::new()))
    });
    run.report.notes.push(format!("output files describe variant {show}"));
    Ok(run)
}

/// Trains on training splits noised at each rate (validation and test
/// untouched) and reports the relative performance index per rate.
pub fn run_antinoise(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let tc = &cfg.train;
    let rates = &cfg.antinoise.rates;
    let mut run = run_seeds(cfg, |seed| {
        let raw = prepare(cfg, &source, seed)?;
        let mut rng = stream(seed, Stream::Inject);
        let mut rows = Vec::new();
        let mut showcase = None;
        for &rate in rates {
            let plan = NoisePlan { rate, ..cfg.antinoise.noise };
            // noise is injected in standardized units
            let ds = inject_noise(&raw.clone().standardize()?, &plan, &mut rng)?;
            let fitted = fit_standardized(tc, &ds, seed)?;
            let (n, m) = fitted.metrics_on(None)?.expect("non-empty test split");
            rows.push(RunRow {
                noise_rate: Some(rate),
                ..fitted.row(seed, tc.variant, n, m)
            });
            if showcase.is_none() {
                showcase = Some(fitted.showcase(seed, tc, &raw)?);
            }
        }
        Ok((rows, showcase, Vec::new()))
    });
    let series: Vec<(f64, f64)> = rates
        .iter()
        .filter_map(|&r| {
            run.report
                .find_aggregate(|k| k.noise_rate == Some(r))
                .map(|a| (r, a.mse.mean))
        })
        .collect();
    if !series.is_empty() {
        run.report.indices.push(IndexSeries::from_mse(IndexKind::Rpi, tc.variant, None, &series));
    }
    run.report.notes.push(format!("output files describe noise rate {}", rates[0]));
    Ok(run)
}

/// Indices of the `count` largest scores, ties broken by position.
fn top_k(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Pool-based active learning. Both arms start from the same labeled set
/// and acquire the same number of points per cycle; the uncertainty arm
/// takes the pool points with the largest predicted variance (mean over
/// outputs), the control arm takes random ones.
pub fn run_active_learning(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let tc = &cfg.train;
    let ac = &cfg.active;
    let mut arms = vec![Arm::Uncertainty];
    if ac.random_control {
        arms.push(Arm::Random);
    }
    let mut run = run_seeds(cfg, |seed| {
        let raw = prepare(cfg, &source, seed)?;
        let mut pool = raw.split_indices()?.train.clone();
        let mut rng = stream(seed, Stream::Acquire);
        pool.shuffle(&mut rng);
        let n_init = ((ac.initial_fraction * pool.len() as f64).ceil() as usize).min(pool.len());
        let remaining0 = pool.len() - n_init;
        let batch = ((ac.acquire_fraction * remaining0 as f64).ceil() as usize).max(1);
        let initial: Vec<usize> = pool[..n_init].to_vec();
        let unlabeled0: Vec<usize> = pool[n_init..].to_vec();

        let first = fit(tc, &with_train_rows(&raw, initial.clone())?, seed)?;
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        let mut showcase = None;
        for &arm in &arms {
            let mut labeled = initial.clone();
            let mut unlabeled = unlabeled0.clone();
            let mut current: Option<Fitted> = None;
            for cycle in 0..=ac.cycles {
                if cycle > 0 {
                    if unlabeled.is_empty() {
                        notes.push(format!("pool exhausted after cycle {}", cycle - 1));
                        break;
                    }
                    let take = batch.min(unlabeled.len());
                    let picked: Vec<usize> = match arm {
                        Arm::Uncertainty => {
                            let model = current.as_ref().map_or(&first.model, |f| &f.model);
                            let (x, _) = raw.rows(&unlabeled);
                            let p = model.predict(&x)?;
                            let scores: Vec<f64> = p.var.rows().into_iter().map(|r| r.mean().expect("l >= 1")).collect();
                            top_k(&scores, take)
                        }
                        Arm::Random => {
                            let mut pos: Vec<usize> = (0..unlabeled.len()).collect();
                            pos.shuffle(&mut rng);
                            pos.truncate(take);
                            pos
                        }
                    };
                    let mut picked_sorted = picked.clone();
                    picked_sorted.sort_unstable();
                    labeled.extend(picked.iter().map(|&p| unlabeled[p]));
                    for p in picked_sorted.into_iter().rev() {
                        unlabeled.remove(p);
                    }
                    current = Some(fit(tc, &with_train_rows(&raw, labeled.clone())?, seed)?);
                }
                let f = current.as_ref().unwrap_or(&first);
                let (n, m) = f.metrics_on(None)?.expect("non-empty test split");
                rows.push(RunRow {
                    arm: Some(arm),
                    cycle: Some(cycle),
                    ..f.row(seed, tc.variant, n, m)
                });
            }
            if arm == Arm::Uncertainty {
                let f = current.unwrap_or_else(|| first.clone());
                showcase = Some(f.showcase(seed, tc, &raw)?);
            }
        }
        Ok((rows, showcase, notes))
    });
    for &arm in &arms {
        let series: Vec<(f64, f64)> = (0..=ac.cycles)
            .filter_map(|c| {
                run.report
                    .find_aggregate(|k| k.arm == Some(arm) && k.cycle == Some(c))
                    .map(|a| (c as f64, a.mse.mean))
            })
            .collect();
        if !series.is_empty() {
            run.report.indices.push(IndexSeries::from_mse(IndexKind::Pir, tc.variant, Some(arm), &series));
        }
    }
    run.report.notes.push("output files describe the final uncertainty-arm model".into());
    Ok(run)
}

/// Dispatches on `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    match cfg.experiment {
        ExperimentKind::Toy1d | ExperimentKind::Toy2d | ExperimentKind::Compare => run_comparison(cfg),
        ExperimentKind::Antinoise => run_antinoise(cfg),
        ExperimentKind::Active => run_active_learning(cfg),
        ExperimentKind::Ablate => run_ablation(cfg),
    }
}
