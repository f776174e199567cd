//! Monte-Carlo sweeps, tuning of regularization weights, and cost tables.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cddpc_core::controller::{
    run_receding_horizon, BoxConstraints, ClosedLoopRun, ClosedLoopSetup, Controller, ControllerSpec, CostSpec,
    DataDrivenModel, Variant,
};
use cddpc_core::sim::{
    collect_closed_loop_dithered, collect_open_loop, coupled_two_by_two, square_wave, uniform_excitation,
    LinearFeedbackController, LtiPlant, NoiseStream, NonlinearPlant, NonlinearWrapper, Plant, StateSpaceModel,
    STREAM_DATA,
};
use cddpc_core::traj::{partition, Trajectory};
use cddpc_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};

use crate::config::{ControllerKind, Excitation, ExperimentConfig, PlantKind, TunedFamily, Warmup};
use crate::error::{BenchError, Result};
use crate::io::dataset_hash;

/// One `(N_d, sigma_e, eps)` combination of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub n_d: usize,
    pub sigma_e: f64,
    pub eps: f64,
}

pub fn grid_points(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &n_d in &cfg.n_d {
        for &sigma_e in &cfg.sigma_e {
            for &eps in &cfg.eps {
                out.push(GridPoint { n_d, sigma_e, eps });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub controller: String,
    pub n_d: usize,
    pub sigma_e: f64,
    pub eps: f64,
    pub seed: u64,
    pub j: f64,
    pub j_y: f64,
    pub j_u: f64,
    pub wall_ms: Option<f64>,
    pub qp_iters: usize,
    pub status: String,
    pub dataset_hash: String,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == "solved" || self.status == "max_iter"
    }

    fn grid(&self) -> GridPoint {
        GridPoint {
            n_d: self.n_d,
            sigma_e: self.sigma_e,
            eps: self.eps,
        }
    }
}

/// Short status label for a failed run.
pub fn failure_status(err: &CoreError) -> &'static str {
    match err {
        CoreError::Solver(s) => s.as_str(),
        CoreError::Diverged { .. } => "diverged",
        CoreError::RankDeficient { .. } | CoreError::InsufficientData { .. } => "rank_deficient",
        CoreError::DepthExceedsLength { .. } => "too_short",
        _ => "error",
    }
}

/// Innovation-form model of the configured plant.
pub fn plant_model(cfg: &ExperimentConfig, sigma_e: f64) -> StateSpaceModel {
    match cfg.plant {
        PlantKind::Lti | PlantKind::Nonlinear => StateSpaceModel::benchmark_siso(sigma_e),
        PlantKind::Coupled => coupled_two_by_two(sigma_e),
    }
}

pub fn make_plant(cfg: &ExperimentConfig, gp: GridPoint) -> Result<Box<dyn Plant>> {
    let model = plant_model(cfg, gp.sigma_e);
    Ok(match cfg.plant {
        PlantKind::Nonlinear => Box::new(NonlinearPlant::new(NonlinearWrapper::new(model, gp.eps)?)),
        _ => Box::new(LtiPlant::new(model)),
    })
}

/// Records the `N_d`-sample dataset for `seed`. Innovations come from the
/// data stream of `seed`, so the dataset does not depend on the controller.
pub fn collect_dataset(cfg: &ExperimentConfig, gp: GridPoint, seed: u64) -> Result<Trajectory> {
    let m = cfg.input_dim();
    let mut plant = make_plant(cfg, gp)?;
    let mut noise = NoiseStream::new(seed, STREAM_DATA, gp.sigma_e);
    let traj = match &cfg.excitation {
        Excitation::Square { period, amplitude } => {
            let w = square_wave(*period, *amplitude, gp.n_d)?;
            let exc = DMatrix::from_fn(m, gp.n_d, |_, t| w[t]);
            collect_open_loop(plant.as_mut(), &exc, &mut noise)?
        }
        Excitation::Uniform { amplitude } => {
            let exc = uniform_excitation(m, gp.n_d, *amplitude, seed);
            collect_open_loop(plant.as_mut(), &exc, &mut noise)?
        }
        Excitation::ClosedLoop {
            period,
            amplitude,
            dither,
        } => {
            let fb = LinearFeedbackController::furnace_pi();
            let half = (*period / 2).max(1);
            let setpoint = |t: usize| {
                let sign = if (t / half) % 2 == 0 { 1.0 } else { -1.0 };
                DVector::from_iterator(amplitude.len(), amplitude.iter().map(|a| sign * a))
            };
            let dither = uniform_excitation(m, gp.n_d, *dither, seed);
            collect_closed_loop_dithered(plant.as_mut(), &fb, &setpoint, &dither, &mut noise)?
        }
    };
    Ok(traj)
}

fn warmup_inputs(cfg: &ExperimentConfig, traj: &Trajectory) -> DMatrix<f64> {
    let lp = cfg.horizons.past();
    match cfg.warmup {
        Warmup::Tail if traj.len() >= lp => traj.inputs().columns(traj.len() - lp, lp).into_owned(),
        _ => DMatrix::zeros(cfg.input_dim(), lp),
    }
}

pub fn base_spec(cfg: &ExperimentConfig, variant: Variant) -> Result<ControllerSpec> {
    let lf = cfg.horizons.future();
    let cost = CostSpec::tiled(
        DMatrix::from_diagonal(&DVector::from_vec(cfg.q.clone())),
        DMatrix::from_diagonal(&DVector::from_vec(cfg.r.clone())),
        lf,
    )?;
    let bounds = BoxConstraints::new(
        DVector::from_vec(cfg.u_lo.clone()),
        DVector::from_vec(cfg.u_hi.clone()),
        DVector::from_vec(cfg.y_lo.clone()),
        DVector::from_vec(cfg.y_hi.clone()),
    )?;
    Ok(ControllerSpec::new(variant, cfg.horizons, cost, bounds)?)
}

/// A recorded dataset and, when factorization succeeded, its model.
pub struct Prepared {
    pub traj: Trajectory,
    pub hash: String,
    pub model: std::result::Result<DataDrivenModel, CoreError>,
    pub warmup: DMatrix<f64>,
}

pub fn prepare(cfg: &ExperimentConfig, traj: Trajectory, projector: bool) -> Prepared {
    let hash = dataset_hash(&traj);
    let model = partition(&traj, cfg.horizons)
        .and_then(|part| DataDrivenModel::new(part, cfg.rank_policy))
        .map(|d| if projector { d.with_projector() } else { d });
    let warmup = warmup_inputs(cfg, &traj);
    Prepared {
        traj,
        hash,
        model,
        warmup,
    }
}

/// Closed-loop run of `variant` on the plant of `gp`, with innovations
/// from the control stream of `seed`.
pub fn run_variant(
    cfg: &ExperimentConfig,
    gp: GridPoint,
    seed: u64,
    variant: Variant,
    prepared: &Prepared,
) -> std::result::Result<ClosedLoopRun, CoreError> {
    let spec = base_spec(cfg, variant).map_err(|e| match e {
        BenchError::Core(c) => c,
        _ => CoreError::InvalidArgument("invalid controller specification"),
    })?;
    let model = plant_model(cfg, gp.sigma_e);
    let mut ctrl = if variant.is_model_based() {
        Controller::model_based(spec, &model, cfg.qp.clone())?
    } else {
        let data = prepared.model.as_ref().map_err(|e| e.clone())?;
        Controller::data_driven(spec, data, cfg.qp.clone())?
    };
    let mut plant = make_plant(cfg, gp).map_err(|e| match e {
        BenchError::Core(c) => c,
        _ => CoreError::InvalidArgument("invalid plant"),
    })?;
    let reference = |t: usize| {
        DVector::from_iterator(
            cfg.output_dim(),
            (0..cfg.output_dim()).map(|i| cfg.reference.value(i, t)),
        )
    };
    let setup = ClosedLoopSetup {
        steps: cfg.steps,
        warmup: prepared.warmup.clone(),
        reference: &reference,
        sigma_e: gp.sigma_e,
        seed,
    };
    run_receding_horizon(plant.as_mut(), &mut ctrl, &setup)
}

/// Applies `f` to every item on a pool of scoped threads; results keep the
/// input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Regularization weights selected for one family at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub family: TunedFamily,
    pub grid: GridPoint,
    pub lambda: Option<f64>,
    pub mu: f64,
    /// Mean validation cost of the selected weights.
    pub mean_j: f64,
    /// Validation seeds on which every candidate completed.
    pub seeds_used: usize,
}

impl TuneResult {
    pub fn variant(&self) -> Variant {
        match self.family {
            TunedFamily::RGamma => Variant::RegGammaDdpc { mu: self.mu },
            TunedFamily::RcGamma => Variant::RegCausalGammaDdpc {
                lambda: self.lambda.unwrap_or(0.0),
                mu: self.mu,
            },
        }
    }
}

pub fn family_id(f: TunedFamily) -> &'static str {
    match f {
        TunedFamily::RGamma => "r-gamma",
        TunedFamily::RcGamma => "rc-gamma",
    }
}

fn candidates(cfg: &ExperimentConfig, family: TunedFamily) -> Vec<(Option<f64>, f64)> {
    let t = cfg.tune.as_ref().expect("tune section");
    match family {
        TunedFamily::RGamma => t.grid.iter().map(|&mu| (None, mu)).collect(),
        TunedFamily::RcGamma => {
            let mut v = Vec::new();
            for &lambda in &t.grid_2d {
                for &mu in &t.grid_2d {
                    v.push((Some(lambda), mu));
                }
            }
            v
        }
    }
}

/// Index of the smallest mean cost; near-ties (relative `1e-12`) go to the
/// larger weights, comparing `lambda` first.
pub fn select_candidate(params: &[(Option<f64>, f64)], mean_j: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..params.len() {
        let (a, b) = (mean_j[i], mean_j[best]);
        let tie = (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) || (a.is_infinite() && b.is_infinite());
        let larger = (params[i].0.unwrap_or(0.0), params[i].1) > (params[best].0.unwrap_or(0.0), params[best].1);
        if (!tie && a < b) || (tie && larger) || (b.is_nan() && !a.is_nan()) {
            best = i;
        }
    }
    best
}

fn tuned_families(cfg: &ExperimentConfig) -> Vec<TunedFamily> {
    let mut fams = Vec::new();
    for c in &cfg.controllers {
        if let ControllerKind::Tuned(f) = c.kind {
            if !fams.contains(&f) {
                fams.push(f);
            }
        }
    }
    fams
}

/// Grid search of every `(tuned)` controller at every grid point, on
/// validation seeds disjoint from the evaluation seeds. Seeds on which some
/// candidate fails are left out of every candidate's mean.
pub fn tune(cfg: &ExperimentConfig) -> Result<Vec<TuneResult>> {
    let families = tuned_families(cfg);
    if families.is_empty() {
        return Ok(Vec::new());
    }
    let t = cfg
        .tune
        .as_ref()
        .ok_or_else(|| BenchError::Invalid("tuned controllers need a [tune] section".into()))?;
    let seeds: Vec<u64> = (0..t.validation_seeds as u64).map(|k| t.validation_offset + k).collect();
    if seeds.is_empty() {
        return Err(BenchError::Invalid("validation_seeds must be positive".into()));
    }
    let mut out = Vec::new();
    for gp in grid_points(cfg) {
        let cands: Vec<Vec<(Option<f64>, f64)>> = families.iter().map(|f| candidates(cfg, *f)).collect();
        // per seed: per family: per candidate cost (NaN on failure)
        let costs: Vec<Vec<Vec<f64>>> = par_map(&seeds, |&seed| {
            let prepared = match collect_dataset(cfg, gp, seed) {
                Ok(traj) => prepare(cfg, traj, false),
                Err(_) => return cands.iter().map(|c| vec![f64::NAN; c.len()]).collect(),
            };
            families
                .iter()
                .zip(&cands)
                .map(|(fam, list)| {
                    list.iter()
                        .map(|&(lambda, mu)| {
                            let r = TuneResult {
                                family: *fam,
                                grid: gp,
                                lambda,
                                mu,
                                mean_j: 0.0,
                                seeds_used: 0,
                            };
                            run_variant(cfg, gp, seed, r.variant(), &prepared)
                                .map(|run| run.j)
                                .unwrap_or(f64::NAN)
                        })
                        .collect()
                })
                .collect()
        });
        for (fi, fam) in families.iter().enumerate() {
            let usable: Vec<&Vec<f64>> = costs
                .iter()
                .map(|per_fam| &per_fam[fi])
                .filter(|js| js.iter().all(|j| j.is_finite()))
                .collect();
            let n = cands[fi].len();
            let means: Vec<f64> = (0..n)
                .map(|c| {
                    if usable.is_empty() {
                        f64::INFINITY
                    } else {
                        usable.iter().map(|js| js[c]).sum::<f64>() / usable.len() as f64
                    }
                })
                .collect();
            let best = select_candidate(&cands[fi], &means);
            out.push(TuneResult {
                family: *fam,
                grid: gp,
                lambda: cands[fi][best].0,
                mu: cands[fi][best].1,
                mean_j: means[best],
                seeds_used: usable.len(),
            });
        }
    }
    Ok(out)
}

fn resolve(
    cfg: &ExperimentConfig,
    gp: GridPoint,
    tuned: &[TuneResult],
) -> Vec<(String, Option<Variant>)> {
    cfg.controllers
        .iter()
        .map(|c| {
            let v = match c.kind {
                ControllerKind::Fixed(v) => Some(v),
                ControllerKind::Tuned(f) => tuned
                    .iter()
                    .find(|t| t.family == f && t.grid == gp)
                    .map(|t| t.variant()),
            };
            (c.label.clone(), v)
        })
        .collect()
}

/// Runs every controller on every grid point and evaluation seed. Datasets
/// are shared by all controllers at a `(grid point, seed)` pair. Failures
/// are recorded in the status column; the result is sorted canonically.
pub fn run_sweep(cfg: &ExperimentConfig, tuned: &[TuneResult]) -> Vec<RunRecord> {
    let projector = cfg
        .controllers
        .iter()
        .any(|c| matches!(c.kind, ControllerKind::Fixed(Variant::ProjRegDdpc { .. })));
    let mut tasks = Vec::new();
    for gp in grid_points(cfg) {
        for k in 0..cfg.seeds as u64 {
            tasks.push((gp, cfg.seed_offset + k));
        }
    }
    let nested = par_map(&tasks, |&(gp, seed)| {
        let controllers = resolve(cfg, gp, tuned);
        let record = |label: &str, hash: &str| RunRecord {
            controller: label.to_string(),
            n_d: gp.n_d,
            sigma_e: gp.sigma_e,
            eps: gp.eps,
            seed,
            j: f64::NAN,
            j_y: f64::NAN,
            j_u: f64::NAN,
            wall_ms: None,
            qp_iters: 0,
            status: String::new(),
            dataset_hash: hash.to_string(),
        };
        let prepared = match collect_dataset(cfg, gp, seed) {
            Ok(traj) => prepare(cfg, traj, projector),
            Err(e) => {
                let status = match &e {
                    BenchError::Core(c) => failure_status(c),
                    _ => "error",
                };
                return controllers
                    .iter()
                    .map(|(label, _)| RunRecord {
                        status: status.to_string(),
                        ..record(label, "")
                    })
                    .collect::<Vec<_>>();
            }
        };
        controllers
            .iter()
            .map(|(label, variant)| {
                let mut rec = record(label, &prepared.hash);
                let Some(v) = variant else {
                    rec.status = "untuned".into();
                    return rec;
                };
                let start = Instant::now();
                let res = run_variant(cfg, gp, seed, *v, &prepared);
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                if cfg.timing {
                    rec.wall_ms = Some(elapsed);
                }
                match res {
                    Ok(run) => {
                        rec.j = run.j;
                        rec.j_y = run.j_y;
                        rec.j_u = run.j_u;
                        rec.qp_iters = run.qp_iters();
                        rec.status = run.worst_status().as_str().to_string();
                    }
                    Err(e) => rec.status = failure_status(&e).to_string(),
                }
                rec
            })
            .collect()
    });
    let mut records: Vec<RunRecord> = nested.into_iter().flatten().collect();
    sort_records(&mut records);
    records
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| {
        a.n_d
            .cmp(&b.n_d)
            .then(a.sigma_e.total_cmp(&b.sigma_e))
            .then(a.eps.total_cmp(&b.eps))
            .then(a.controller.cmp(&b.controller))
            .then(a.seed.cmp(&b.seed))
    });
}

pub const RECORDS_HEADER: &str = "controller,N_d,sigma_e,eps,seed,J,J_y,J_u,wall_ms,qp_iters,status,dataset_hash";

pub fn write_records<W: Write>(w: W, records: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RECORDS_HEADER.split(','))?;
    for r in records {
        out.write_record([
            r.controller.clone(),
            r.n_d.to_string(),
            r.sigma_e.to_string(),
            r.eps.to_string(),
            r.seed.to_string(),
            r.j.to_string(),
            r.j_y.to_string(),
            r.j_u.to_string(),
            r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default(),
            r.qp_iters.to_string(),
            r.status.clone(),
            r.dataset_hash.clone(),
        ])?;
    }
    out.flush().map_err(|e| BenchError::io("<records>", e))?;
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            f(i).parse::<f64>().map_err(|_| BenchError::Format {
                path: path.to_path_buf(),
                msg: format!("bad number `{}`", f(i)),
            })
        };
        out.push(RunRecord {
            controller: f(0),
            n_d: num(1)? as usize,
            sigma_e: num(2)?,
            eps: num(3)?,
            seed: num(4)? as u64,
            j: num(5)?,
            j_y: num(6)?,
            j_u: num(7)?,
            wall_ms: f(8).parse().ok(),
            qp_iters: num(9)? as usize,
            status: f(10),
            dataset_hash: f(11),
        });
    }
    Ok(out)
}

/// Per grid point and controller: costs over the seeds on which every
/// controller at that grid point completed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRow {
    pub grid: GridPoint,
    pub controller: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_j: f64,
    pub median_j: f64,
    /// Mean cost divided by the baseline's mean cost.
    pub ratio: f64,
    /// Median cost divided by the baseline's median cost.
    pub median_ratio: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Costs of each controller at each grid point, restricted to seeds where
/// every controller at that point completed (the paired subset).
pub fn paired_costs(records: &[RunRecord]) -> Vec<(GridPoint, Vec<(String, Vec<f64>, usize)>)> {
    let mut grids: Vec<GridPoint> = Vec::new();
    for r in records {
        if !grids.contains(&r.grid()) {
            grids.push(r.grid());
        }
    }
    grids
        .into_iter()
        .map(|gp| {
            let at: Vec<&RunRecord> = records.iter().filter(|r| r.grid() == gp).collect();
            let mut controllers: Vec<String> = at.iter().map(|r| r.controller.clone()).collect();
            controllers.sort();
            controllers.dedup();
            let mut seeds: Vec<u64> = at.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let good: Vec<u64> = seeds
                .into_iter()
                .filter(|s| {
                    controllers.iter().all(|c| {
                        at.iter()
                            .any(|r| r.seed == *s && &r.controller == c && r.ok())
                    })
                })
                .collect();
            let rows = controllers
                .into_iter()
                .map(|c| {
                    let mine: Vec<&&RunRecord> = at.iter().filter(|r| r.controller == c).collect();
                    let failed = mine.iter().filter(|r| !r.ok()).count();
                    let js = mine
                        .iter()
                        .filter(|r| good.contains(&r.seed))
                        .map(|r| r.j)
                        .collect();
                    (c, js, failed)
                })
                .collect();
            (gp, rows)
        })
        .collect()
}

/// Divides each controller's mean (and median) cost by the baseline's at
/// every grid point, over the paired subset of seeds.
pub fn normalize_costs(records: &[RunRecord], baseline: &str) -> Result<Vec<NormalizedRow>> {
    let mut out = Vec::new();
    for (gp, rows) in paired_costs(records) {
        let base = rows
            .iter()
            .find(|(c, js, _)| c == baseline && !js.is_empty())
            .ok_or_else(|| BenchError::MissingBaseline {
                controller: baseline.to_string(),
                n_d: gp.n_d,
                sigma_e: gp.sigma_e,
                eps: gp.eps,
            })?;
        let (bm, bmed) = (mean(&base.1), median(&base.1));
        for (c, js, failed) in &rows {
            let (m, med) = (mean(js), median(js));
            out.push(NormalizedRow {
                grid: gp,
                controller: c.clone(),
                runs: js.len(),
                failed: *failed,
                mean_j: m,
                median_j: med,
                ratio: if c == baseline { 1.0 } else { m / bm },
                median_ratio: if c == baseline { 1.0 } else { med / bmed },
            });
        }
    }
    Ok(out)
}

pub const NORMALIZED_HEADER: &str = "N_d,sigma_e,eps,controller,runs,failed,mean_J,median_J,ratio,median_ratio";

pub fn write_normalized<W: Write>(w: W, rows: &[NormalizedRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(NORMALIZED_HEADER.split(','))?;
    for r in rows {
        out.write_record([
            r.grid.n_d.to_string(),
            r.grid.sigma_e.to_string(),
            r.grid.eps.to_string(),
            r.controller.clone(),
            r.runs.to_string(),
            r.failed.to_string(),
            r.mean_j.to_string(),
            r.median_j.to_string(),
            r.ratio.to_string(),
            r.median_ratio.to_string(),
        ])?;
    }
    out.flush().map_err(|e| BenchError::io("<normalized>", e))?;
    Ok(())
}

pub const TUNED_HEADER: &str = "controller,N_d,sigma_e,eps,lambda,mu,mean_J,seeds_used";

pub fn write_tuned<W: Write>(w: W, rows: &[TuneResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TUNED_HEADER.split(','))?;
    for t in rows {
        out.write_record([
            family_id(t.family).to_string(),
            t.grid.n_d.to_string(),
            t.grid.sigma_e.to_string(),
            t.grid.eps.to_string(),
            t.lambda.map(|l| l.to_string()).unwrap_or_default(),
            t.mu.to_string(),
            t.mean_j.to_string(),
            t.seeds_used.to_string(),
        ])?;
    }
    out.flush().map_err(|e| BenchError::io("<tuned>", e))?;
    Ok(())
}

/// Everything a `benchmark` invocation produces.
pub struct BenchmarkOutput {
    pub tuned: Vec<TuneResult>,
    pub records: Vec<RunRecord>,
    pub normalized: Vec<NormalizedRow>,
}

fn create(dir: &std::path::Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let p = dir.join(name);
    std::fs::File::create(&p)
        .map(std::io::BufWriter::new)
        .map_err(|e| BenchError::io(p, e))
}

/// Tunes (when needed), sweeps, and normalizes against the configured
/// baseline or, failing that, the first listed controller. Writes
/// `tuned.csv` (when tuning ran) and `records.csv` into `dir` before
/// normalizing, then `normalized.csv`.
pub fn benchmark(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<BenchmarkOutput> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let tuned = tune(cfg)?;
    if !tuned.is_empty() {
        write_tuned(create(dir, "tuned.csv")?, &tuned)?;
    }
    let records = run_sweep(cfg, &tuned);
    write_records(create(dir, "records.csv")?, &records)?;
    let baseline = cfg
        .baseline
        .clone()
        .unwrap_or_else(|| cfg.controllers[0].label.clone());
    let normalized = normalize_costs(&records, &baseline)?;
    write_normalized(create(dir, "normalized.csv")?, &normalized)?;
    Ok(BenchmarkOutput {
        tuned,
        records,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    fn rec(c: &str, seed: u64, j: f64, status: &str) -> RunRecord {
        RunRecord {
            controller: c.into(),
            n_d: 200,
            sigma_e: 0.1,
            eps: 0.0,
            seed,
            j,
            j_y: j,
            j_u: 0.0,
            wall_ms: None,
            qp_iters: 0,
            status: status.into(),
            dataset_hash: String::new(),
        }
    }

    #[test]
    fn selection_prefers_larger_weights_on_ties() {
        let p = vec![(None, 1.0), (None, 10.0), (None, 100.0)];
        assert_eq!(select_candidate(&p, &[2.0, 2.0, 2.0]), 2);
        assert_eq!(select_candidate(&p, &[1.0, 2.0, 3.0]), 0);
        assert_eq!(select_candidate(&p[..1], &[5.0]), 0);
        let p2 = vec![(Some(1.0), 10.0), (Some(10.0), 1.0)];
        assert_eq!(select_candidate(&p2, &[1.0, 1.0]), 1);
    }

    #[test]
    fn normalization_and_pairing() {
        let records = vec![
            rec("a", 0, 2.0, "solved"),
            rec("a", 1, 4.0, "solved"),
            rec("a", 2, 100.0, "solved"),
            rec("b", 0, 1.0, "solved"),
            rec("b", 1, 2.0, "solved"),
            rec("b", 2, f64::NAN, "primal_infeasible"),
        ];
        let rows = normalize_costs(&records, "b").unwrap();
        let a = rows.iter().find(|r| r.controller == "a").unwrap();
        let b = rows.iter().find(|r| r.controller == "b").unwrap();
        assert_eq!(b.ratio, 1.0);
        assert_eq!(a.runs, 2);
        assert_eq!(a.ratio, 2.0);
        assert_eq!(b.failed, 1);
        assert!(matches!(
            normalize_costs(&records, "zzz"),
            Err(BenchError::MissingBaseline { .. })
        ));
        let same = vec![rec("x", 0, 3.0, "solved"), rec("y", 0, 3.0, "solved")];
        let rows = normalize_costs(&same, "x").unwrap();
        assert!(rows.iter().all(|r| r.ratio == 1.0));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u64> = (0..50).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    const TINY: &str = "
[horizons]
past = 4
future = 6
[excitation]
kind = square
period = 40
amplitude = 1
[constraints]
u_min = -2
u_max = 2
[run]
steps = 10
seeds = 2
[sweep]
n_d = 120
sigma_e = 0.1
[controllers]
list = c-gamma, spc
";

    #[test]
    fn one_point_one_seed_one_controller() {
        let mut cfg = parse(TINY).unwrap();
        cfg.seeds = 1;
        cfg.controllers.truncate(1);
        let recs = run_sweep(&cfg, &[]);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].status, "solved");
        assert!((recs[0].j - recs[0].j_y - recs[0].j_u).abs() <= 1e-9);
    }

    #[test]
    fn paired_datasets_share_hashes() {
        let cfg = parse(TINY).unwrap();
        let recs = run_sweep(&cfg, &[]);
        assert_eq!(recs.len(), 4);
        for seed in 0..2 {
            let hashes: Vec<&str> = recs
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.dataset_hash.as_str())
                .collect();
            assert_eq!(hashes[0], hashes[1]);
        }
        assert_ne!(recs[0].dataset_hash, recs[1].dataset_hash);
    }
}
