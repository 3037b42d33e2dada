use super::output::{PathRows, Row};
use super::{map_paths, ExperimentConfig, ExperimentKind, Verdict};
use crate::flag::{self, barycenter_unitary, flag_qv_predict, FlagDims, FlagPoint, SimplexPoint};
use crate::functionals::{FunctionalObserver, ObserverOptions};
use crate::jacobi::{simulate_jacobi_path, stationary_beta_params, JacobiIndex};
use crate::liebm::{sample_skew_increment, simulate_unitary_path, PathObserver, RngStream, StepView};
use crate::matcore::{eigh, expm, unitary_project, ComplexMatrix, UnitaryMatrix, C64};
use crate::stats::{self, cauchy_cdf, cauchy_fit, ecf, ks_test, mean_se};
use crate::{Error, Result};
use serde_json::{json, Value};

/// Tag bits of auxiliary stream indices.
const BRIDGE_TAG: u64 = 1 << 63;
const JACOBI_TAG: u64 = 1 << 62;
const CHART_TAG: u64 = 1 << 61;

const CHART_POINTS: usize = 20;
/// Chart points are redrawn until every entry is at most this large.
const CHART_BOUND: f64 = 3.0;
const RADIAL_TIMES: [f64; 3] = [0.25, 1.0, 4.0];
const SCALE_BAND: f64 = 0.15;
const LOCATION_BAND: f64 = 0.1;
const ECF_GRID: [f64; 3] = [-1.0, 0.5, 1.0];
const ECF_FILL: f64 = -0.5;
const ECF_SLACK: f64 = 0.05;
const UNITARITY_TOL: f64 = 1e-10;
const LIFT_TOL: f64 = 1e-8;
const MODULUS_TOL: f64 = 1e-10;
const CROSS_QV_TOL: f64 = 0.10;
const DIAG_QV_TOL: f64 = 0.05;
/// Paths whose per-path diagnostics are listed in the summary.
const LISTED_PATHS: usize = 100;

pub(super) struct Outcome {
    pub total_paths: usize,
    pub rows: PathRows,
    pub flags: Vec<(usize, Error)>,
    pub estimates: Value,
    pub verdicts: Vec<Verdict>,
}

struct PathResult<T> {
    rows: Vec<Row>,
    data: Result<T>,
}

/// Splits per-path results into rows, successful data and flags.
fn collect<T>(results: Vec<PathResult<T>>, columns: Vec<String>) -> (PathRows, Vec<(usize, T)>, Vec<(usize, Error)>) {
    let mut rows = PathRows::new(columns);
    let mut good = vec![];
    let mut flags = vec![];
    for (i, r) in results.into_iter().enumerate() {
        match r.data {
            Ok(d) => {
                rows.rows.extend(r.rows);
                good.push((i, d));
            }
            Err(e) => flags.push((i, e)),
        }
    }
    (rows, good, flags)
}

pub(super) fn run(config: &ExperimentConfig) -> Result<Outcome> {
    let dims = FlagDims::new(config.m, config.k)?;
    match config.experiment {
        ExperimentKind::UnitaryQv => unitary_qv(config, dims),
        ExperimentKind::FlagGenerator => flag_generator(config, dims),
        ExperimentKind::RadialMatch => radial_match(config, dims),
        ExperimentKind::JacobiStationary => jacobi_stationary(config, dims),
        _ => functional(config, dims),
    }
}

fn block_labels(prefix: &str, blocks: usize) -> Vec<String> {
    (1..=blocks).map(|j| format!("{prefix}_{j}")).collect()
}

fn records(config: &ExperimentConfig, step: usize) -> bool {
    step.is_multiple_of(config.thin) || step == config.steps()
}

// ---------------------------------------------------------------- unitary-qv

/// Running sums for `E[ΔA_{ij} ΔA_{jr}]/dt` over all block triples.
#[derive(Clone)]
struct QvSums {
    count: f64,
    /// Per triple and entry: `(Σ re, Σ im, Σ re², Σ im²)`.
    sums: Vec<[f64; 4]>,
}

impl QvSums {
    fn new(dims: FlagDims) -> Self {
        let b = dims.blocks();
        Self { count: 0.0, sums: vec![[0.0; 4]; b * b * b * dims.m() * dims.m()] }
    }

    fn add(&mut self, da: &ComplexMatrix, h: f64, dims: FlagDims) {
        let (m, b) = (dims.m(), dims.blocks());
        let mut slot = 0;
        for i in 0..b {
            for j in 0..b {
                for r in 0..b {
                    for p in 0..m {
                        for q in 0..m {
                            let mut acc = C64::new(0.0, 0.0);
                            for s in 0..m {
                                acc += da[(i * m + p, j * m + s)] * da[(j * m + s, r * m + q)];
                            }
                            let v = acc / h;
                            let e = &mut self.sums[slot];
                            e[0] += v.re;
                            e[1] += v.im;
                            e[2] += v.re * v.re;
                            e[3] += v.im * v.im;
                            slot += 1;
                        }
                    }
                }
            }
        }
        self.count += 1.0;
    }

    fn merge(&mut self, other: &Self) {
        self.count += other.count;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for c in 0..4 {
                a[c] += b[c];
            }
        }
    }
}

struct QvObserver {
    dims: FlagDims,
    sums: QvSums,
    max_residual: f64,
    rows: Vec<Row>,
    path: usize,
    config: ExperimentConfig,
}

impl PathObserver for QvObserver {
    fn commit(&mut self, view: &StepView) -> Result<()> {
        self.sums.add(view.da, view.dt, self.dims);
        Ok(())
    }

    fn end_step(&mut self, index: usize, time: f64, u: &UnitaryMatrix) -> Result<()> {
        let residual = u.unitarity_residual();
        self.max_residual = self.max_residual.max(residual);
        if records(&self.config, index) {
            self.rows.push(Row { path_index: self.path, step: index, time, values: vec![residual] });
        }
        Ok(())
    }
}

fn unitary_qv(config: &ExperimentConfig, dims: FlagDims) -> Result<Outcome> {
    let n = dims.n();
    let results = map_paths(config.n_paths, |p| {
        let mut obs = QvObserver {
            dims,
            sums: QvSums::new(dims),
            max_residual: 0.0,
            rows: vec![Row { path_index: p, step: 0, time: 0.0, values: vec![0.0] }],
            path: p,
            config: config.clone(),
        };
        let mut rng = RngStream::new(config.master_seed, p as u64);
        let data = simulate_unitary_path(&UnitaryMatrix::identity(n), config.t, config.dt, &mut rng, &mut [&mut obs])
            .map(|_| (obs.sums.clone(), obs.max_residual));
        PathResult { rows: std::mem::take(&mut obs.rows), data }
    });
    let (rows, good, flags) = collect(results, vec!["unitarity_residual".into()]);
    let mut total = QvSums::new(dims);
    let mut max_residual: f64 = 0.0;
    for (_, (s, r)) in &good {
        total.merge(s);
        max_residual = max_residual.max(*r);
    }

    // Per triple: Frobenius deviation from −2m δ_ir I against the Frobenius standard error.
    let (m, b) = (dims.m(), dims.blocks());
    let nf = total.count;
    let mut worst: f64 = 0.0;
    let mut triples = vec![];
    let mut slot = 0;
    for i in 0..b {
        for j in 0..b {
            for r in 0..b {
                let (mut dev2, mut se2) = (0.0, 0.0);
                let mut mean = vec![];
                for p in 0..m {
                    for q in 0..m {
                        let e = total.sums[slot];
                        slot += 1;
                        let (mr, mi) = (e[0] / nf, e[1] / nf);
                        let target = if i == r && p == q { -2.0 * m as f64 } else { 0.0 };
                        dev2 += (mr - target).powi(2) + mi * mi;
                        se2 += ((e[2] / nf - mr * mr) + (e[3] / nf - mi * mi)).max(0.0) / nf;
                        mean.push([mr, mi]);
                    }
                }
                let ratio = dev2.sqrt() / se2.sqrt();
                worst = worst.max(ratio);
                triples.push(json!({"i": i + 1, "j": j + 1, "r": r + 1, "mean": mean, "se_ratio": ratio}));
            }
        }
    }
    let verdicts = vec![
        Verdict::within("unitarity_max", max_residual, 0.0, UNITARITY_TOL),
        if nf > 1.0 { Verdict::within("lie_qv_se_ratio", worst, 0.0, 3.0) } else { Verdict::unavailable("lie_qv_se_ratio") },
    ];
    let estimates = json!({
        "increments": nf,
        "max_unitarity_residual": max_residual,
        "target_diagonal": -2.0 * m as f64,
        "triples": triples,
    });
    Ok(Outcome { total_paths: config.n_paths, rows, flags, estimates, verdicts })
}

// ------------------------------------------------------------ flag-generator

fn chart_point(config: &ExperimentConfig, dims: FlagDims, c: usize) -> Result<(UnitaryMatrix, FlagPoint)> {
    let mut rng = RngStream::new(config.master_seed, CHART_TAG | c as u64);
    let n = dims.n();
    for _ in 0..1000 {
        let g = ComplexMatrix::from_fn(n, n, |_, _| C64::new(rng.normal(), rng.normal()));
        let u = unitary_project(&g)?;
        if let Ok(w) = flag::project_affine(&u, dims) {
            if w.blocks().iter().all(|b| b.max_abs() <= CHART_BOUND) {
                return Ok((u, w));
            }
        }
    }
    Err(Error::RuntimeFailure("no bounded chart point found".into()))
}

fn flatten(w: &FlagPoint) -> Vec<Vec<C64>> {
    w.blocks().iter().map(|b| b.data().to_vec()).collect()
}

/// Mean of complex samples with the summed variance of real and imaginary parts.
#[derive(Clone, Copy, Default)]
struct ComplexMoments {
    n: f64,
    s: C64,
    q_re: f64,
    q_im: f64,
}

impl ComplexMoments {
    fn push(&mut self, v: C64) {
        self.n += 1.0;
        self.s += v;
        self.q_re += v.re * v.re;
        self.q_im += v.im * v.im;
    }

    fn mean(&self) -> C64 {
        self.s / self.n
    }

    fn se2(&self) -> f64 {
        let m = self.mean();
        ((self.q_re / self.n - m.re * m.re) + (self.q_im / self.n - m.im * m.im)).max(0.0) / self.n
    }
}

fn flag_generator(config: &ExperimentConfig, dims: FlagDims) -> Result<Outcome> {
    let points = (0..CHART_POINTS).map(|c| chart_point(config, dims, c)).collect::<Result<Vec<_>>>()?;
    let entries = dims.chart_rows() * dims.m();
    let mut columns = vec!["point".to_string()];
    for j in 1..=dims.blocks() {
        for e in 0..entries {
            let (p, q) = (e / dims.m() + 1, e % dims.m() + 1);
            columns.push(format!("dw_{j}_{p}{q}_re"));
            columns.push(format!("dw_{j}_{p}{q}_im"));
        }
    }
    let results = map_paths(config.n_paths, |p| {
        let c = p % CHART_POINTS;
        let (u, w) = &points[c];
        let mut rng = RngStream::new(config.master_seed, p as u64);
        let data = (|| {
            let inc = sample_skew_increment(dims.n(), config.dt, &mut rng)?;
            let next = UnitaryMatrix::new_unchecked(u.matmul(&expm(inc.da.as_matrix())));
            let w1 = flag::project_affine(&next, dims)?;
            let dw: Vec<Vec<C64>> = flatten(&w1).iter().zip(flatten(w)).map(|(a, b)| a.iter().zip(&b).map(|(x, y)| x - y).collect()).collect();
            Ok(dw)
        })();
        let rows = match &data {
            Ok(dw) => {
                let flat: Vec<f64> = dw.iter().flatten().flat_map(|z| [z.re, z.im]).collect();
                vec![
                    Row { path_index: p, step: 0, time: 0.0, values: std::iter::once(c as f64).chain(vec![0.0; flat.len()]).collect() },
                    Row { path_index: p, step: 1, time: config.dt, values: std::iter::once(c as f64).chain(flat).collect() },
                ]
            }
            Err(_) => vec![],
        };
        PathResult { rows, data }
    });
    let (rows, good, flags) = collect(results, columns);

    let b = dims.blocks();
    let mut cov_worst: f64 = 0.0;
    let mut mean_worst: f64 = 0.0;
    let mut per_point = vec![];
    let mut enough = true;
    for (c, (_, w)) in points.iter().enumerate() {
        let pred = flag_qv_predict(w);
        let samples: Vec<&Vec<Vec<C64>>> = good.iter().filter(|(p, _)| p % CHART_POINTS == c).map(|(_, d)| d).collect();
        if samples.len() < 2 {
            enough = false;
            continue;
        }
        let mut mean = vec![ComplexMoments::default(); b * entries];
        let mut mixed = vec![ComplexMoments::default(); b * entries * entries];
        let mut holo = vec![ComplexMoments::default(); b * b * entries * entries];
        for dw in &samples {
            for j in 0..b {
                for a in 0..entries {
                    mean[j * entries + a].push(dw[j][a] / config.dt);
                    for e in 0..entries {
                        mixed[(j * entries + a) * entries + e].push(dw[j][a] * dw[j][e].conj() / config.dt);
                    }
                }
            }
            for j in 0..b {
                for l in 0..b {
                    for a in 0..entries {
                        for e in 0..entries {
                            holo[((j * b + l) * entries + a) * entries + e].push(dw[j][a] * dw[l][e] / config.dt);
                        }
                    }
                }
            }
        }
        let (mut dev2, mut se2) = (0.0, 0.0);
        for j in 0..b {
            let table = pred.mixed(j);
            for a in 0..entries {
                for e in 0..entries {
                    let mo = &mixed[(j * entries + a) * entries + e];
                    dev2 += (mo.mean() - table[(a, e)]).norm_sqr();
                    se2 += mo.se2();
                }
            }
            for l in 0..b {
                let table = pred.holomorphic(j, l);
                for a in 0..entries {
                    for e in 0..entries {
                        let mo = &holo[((j * b + l) * entries + a) * entries + e];
                        dev2 += (mo.mean() - table[(a, e)]).norm_sqr();
                        se2 += mo.se2();
                    }
                }
            }
        }
        let (mdev2, mse2) = mean.iter().fold((0.0, 0.0), |(d, s), mo| (d + mo.mean().norm_sqr(), s + mo.se2()));
        let cov_ratio = (dev2 / se2).sqrt();
        let mean_ratio = (mdev2 / mse2).sqrt();
        cov_worst = cov_worst.max(cov_ratio);
        mean_worst = mean_worst.max(mean_ratio);
        per_point.push(json!({"point": c, "samples": samples.len(), "covariation_se_ratio": cov_ratio, "drift_se_ratio": mean_ratio}));
    }
    let verdicts = if enough {
        vec![Verdict::within("covariation_se_ratio", cov_worst, 0.0, 3.0), Verdict::within("drift_se_ratio", mean_worst, 0.0, 4.0)]
    } else {
        vec![Verdict::unavailable("covariation_se_ratio"), Verdict::unavailable("drift_se_ratio")]
    };
    let estimates = json!({"chart_points": CHART_POINTS, "points": per_point});
    Ok(Outcome { total_paths: config.n_paths, rows, flags, estimates, verdicts })
}

// -------------------------------------------------------------- radial-match

/// `(Tr Λ_j, Tr Λ_j²)` per block.
fn trace_moments(lambda: &SimplexPoint) -> Vec<[f64; 2]> {
    lambda.blocks().iter().map(|l| [l.trace_re(), l.matmul(l).trace().re]).collect()
}

struct RadialRecorder<'a> {
    dims: FlagDims,
    wanted: &'a [usize],
    seen: Vec<(usize, f64, Vec<[f64; 2]>)>,
}

impl PathObserver for RadialRecorder<'_> {
    fn commit(&mut self, _view: &StepView) -> Result<()> {
        Ok(())
    }

    fn end_step(&mut self, index: usize, time: f64, u: &UnitaryMatrix) -> Result<()> {
        if self.wanted.binary_search(&index).is_ok() {
            self.seen.push((index, time, trace_moments(&flag::radial_from_unitary(u, self.dims))));
        }
        Ok(())
    }
}

fn radial_checkpoints(config: &ExperimentConfig) -> Vec<(f64, usize)> {
    let steps = config.steps();
    let mut out: Vec<(f64, usize)> = RADIAL_TIMES
        .iter()
        .map(|&t| (t, (t / config.dt).round() as usize))
        .filter(|&(_, s)| s >= 1 && s <= steps)
        .collect();
    if out.is_empty() {
        out.push((config.t, steps));
    }
    out
}

fn radial_match(config: &ExperimentConfig, dims: FlagDims) -> Result<Outcome> {
    let steps = config.steps();
    let checkpoints = radial_checkpoints(config);
    let mut wanted: Vec<usize> = (0..=steps).filter(|&s| records(config, s)).chain(checkpoints.iter().map(|c| c.1)).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let idx = JacobiIndex::flag_radial(dims);
    let start = SimplexPoint::barycenter(dims);
    let u0 = barycenter_unitary(dims);
    let b = dims.blocks();
    let mut columns = vec![];
    for source in ["unitary", "jacobi"] {
        for j in 1..=b {
            columns.push(format!("{source}_tr_{j}"));
            columns.push(format!("{source}_trsq_{j}"));
        }
    }
    let results = map_paths(config.n_paths, |p| {
        let data = (|| {
            let mut rec = RadialRecorder { dims, wanted: &wanted, seen: vec![(0, 0.0, trace_moments(&start))] };
            let mut rng = RngStream::new(config.master_seed, p as u64);
            simulate_unitary_path(&u0, config.t, config.dt, &mut rng, &mut [&mut rec])?;
            let mut jac = vec![(0usize, trace_moments(&start))];
            let mut jrng = RngStream::new(config.master_seed, JACOBI_TAG | p as u64);
            simulate_jacobi_path(&start, &idx, config.t, config.dt, &mut jrng, &mut |s, st| {
                if wanted.binary_search(&s).is_ok() {
                    jac.push((s, trace_moments(&st.point)));
                }
            })?;
            Ok((rec.seen, jac))
        })();
        let rows = match &data {
            Ok((uni, jac)) => uni
                .iter()
                .zip(jac)
                .filter(|((s, _, _), _)| records(config, *s))
                .map(|((s, t, a), (_, bj))| Row {
                    path_index: p,
                    step: *s,
                    time: *t,
                    values: a.iter().chain(bj).flat_map(|x| *x).collect(),
                })
                .collect(),
            Err(_) => vec![],
        };
        PathResult { rows, data }
    });
    let (rows, good, flags) = collect(results, columns);

    let mut verdicts = vec![];
    let mut table = vec![];
    for &(t, s) in &checkpoints {
        let pick = |unitary: bool, moment: usize| -> Vec<f64> {
            good.iter()
                .filter_map(|(_, (uni, jac))| {
                    if unitary {
                        uni.iter().find(|r| r.0 == s).map(|r| r.2[0][moment])
                    } else {
                        jac.iter().find(|r| r.0 == s).map(|r| r.1[0][moment])
                    }
                })
                .collect()
        };
        for (moment, label) in [(0, "tr_lambda1"), (1, "tr_lambda1_sq")] {
            let (ma, sa) = mean_se(&pick(true, moment));
            let (mb, sb) = mean_se(&pick(false, moment));
            let combined = sa.hypot(sb);
            let name = format!("{label}_t{t}");
            verdicts.push(if combined.is_finite() { Verdict::near(name.clone(), ma, mb, 3.0 * combined) } else { Verdict::unavailable(name.clone()) });
            table.push(json!({"name": name, "time": t, "unitary_mean": ma, "unitary_se": sa, "jacobi_mean": mb, "jacobi_se": sb}));
        }
    }
    let estimates = json!({"kappa": idx.kappa(), "moments": table});
    Ok(Outcome { total_paths: config.n_paths, rows, flags, estimates, verdicts })
}

// --------------------------------------------------------- jacobi-stationary

fn eigenvalues(lambda: &SimplexPoint) -> Vec<f64> {
    lambda
        .blocks()
        .iter()
        .flat_map(|l| if l.dim() == 1 { vec![l[(0, 0)].re] } else { eigh(l).values.clone() })
        .collect()
}

fn jacobi_stationary(config: &ExperimentConfig, dims: FlagDims) -> Result<Outcome> {
    let idx = match &config.u {
        Some(kappa) => JacobiIndex::new(kappa.clone(), dims.m()).map_err(|e| Error::ConfigInvalid(e.to_string()))?,
        None => JacobiIndex::flag_radial(dims),
    };
    let (a, b) = stationary_beta_params(&idx, 0).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let start = SimplexPoint::barycenter(dims);
    let mut columns = vec![];
    for j in 1..=dims.blocks() {
        for i in 1..=dims.m() {
            columns.push(format!("lambda_{j}_{i}"));
        }
    }
    let results = map_paths(config.n_paths, |p| {
        let mut rows = vec![Row { path_index: p, step: 0, time: 0.0, values: eigenvalues(&start) }];
        let mut rng = RngStream::new(config.master_seed, p as u64);
        let data = simulate_jacobi_path(&start, &idx, config.t, config.dt, &mut rng, &mut |s, st| {
            if records(config, s) {
                rows.push(Row { path_index: p, step: s, time: st.time, values: eigenvalues(&st.point) });
            }
        })
        .map(|st| st.point.block(0)[(0, 0)].re);
        PathResult { rows, data }
    });
    let (rows, good, flags) = collect(results, columns);
    let lambda1: Vec<f64> = good.iter().map(|(_, l)| *l).collect();
    let (mean, se) = mean_se(&lambda1);
    let report = (lambda1.len() >= 2).then(|| stats::beta_cdf(a, b).map(|cdf| ks_test(&lambda1, cdf))).transpose()?;
    let verdicts = vec![match &report {
        Some(r) => Verdict::within("ks_p_beta", r.p_approx, stats::SIGNIFICANCE, 1.0),
        None => Verdict::unavailable("ks_p_beta"),
    }];
    let estimates = json!({
        "kappa": idx.kappa(),
        "beta": {"a": a, "b": b, "mean": a / (a + b)},
        "lambda1_mean": mean,
        "lambda1_se": se,
        "ks": report,
    });
    Ok(Outcome { total_paths: config.n_paths, rows, flags, estimates, verdicts })
}

// ------------------------------------------------ area and winding functionals

#[derive(Clone, Debug)]
struct FunctionalData {
    area: Vec<f64>,
    theta: Vec<f64>,
    d: f64,
    qv: Vec<f64>,
    clock: Vec<f64>,
    modulus_residual: f64,
    /// Largest `‖X*X − I‖`, `|det Θ_j − 1|`, `‖p(X) − w‖` and phase defect along the lift.
    lift: [f64; 4],
    bridge_windings: u64,
    unresolved: usize,
}

struct Tracker<'a> {
    inner: FunctionalObserver,
    config: &'a ExperimentConfig,
    path: usize,
    rows: Vec<Row>,
    lift_max: [f64; 2],
}

impl Tracker<'_> {
    fn columns(kind: ExperimentKind, dims: FlagDims) -> Vec<String> {
        let b = dims.blocks();
        let mut c = block_labels("area", b);
        match kind {
            ExperimentKind::AreaCovariation => {
                c.extend(block_labels("clock", b));
                for j in 1..=b {
                    for l in j..=b {
                        c.push(format!("qv_{j}{l}"));
                    }
                }
            }
            ExperimentKind::Martingale => c.push("d".into()),
            ExperimentKind::CauchyLimit => c.extend(block_labels("theta", b)),
            ExperimentKind::StiefelWinding => {
                c.extend(block_labels("theta", b));
                c.push("modulus_residual".into());
            }
            ExperimentKind::HorizontalLift => {
                c.extend(["unitarity_residual", "det_defect", "projection_residual", "phase_defect"].map(String::from))
            }
            _ => unreachable!("not a functional experiment"),
        }
        c
    }

    fn values(&self) -> Vec<f64> {
        let s = self.inner.state();
        let mut v = s.a.clone();
        match self.config.experiment {
            ExperimentKind::AreaCovariation => {
                let qv = self.inner.area_qv().expect("area QV tracked");
                let b = s.a.len();
                v.extend(&qv.clock);
                for j in 0..b {
                    for l in j..b {
                        v.push(qv.realized[j * b + l]);
                    }
                }
            }
            ExperimentKind::Martingale => v.push(s.d()),
            ExperimentKind::CauchyLimit => v.extend(&s.theta),
            ExperimentKind::StiefelWinding => {
                v.extend(&s.theta);
                v.push(self.inner.modulus_residual());
            }
            ExperimentKind::HorizontalLift => {
                let lift = self.inner.lift().expect("lift tracked");
                v.extend([lift.x().unitarity_residual(), lift.det_defect(), self.inner.lift_projection_residual(), lift.phase_defect()]);
            }
            _ => unreachable!("not a functional experiment"),
        }
        v
    }
}

impl PathObserver for Tracker<'_> {
    fn check(&self, view: &StepView) -> Result<()> {
        self.inner.check(view)
    }

    fn commit(&mut self, view: &StepView) -> Result<()> {
        self.inner.commit(view)
    }

    fn end_step(&mut self, index: usize, time: f64, u: &UnitaryMatrix) -> Result<()> {
        self.inner.end_step(index, time, u)?;
        if let Some(lift) = self.inner.lift() {
            self.lift_max[0] = self.lift_max[0].max(lift.x().unitarity_residual());
            self.lift_max[1] = self.lift_max[1].max(lift.det_defect());
        }
        if records(self.config, index) {
            self.rows.push(Row { path_index: self.path, step: index, time, values: self.values() });
        }
        Ok(())
    }
}

fn functional_path(config: &ExperimentConfig, dims: FlagDims, p: usize) -> PathResult<FunctionalData> {
    let kind = config.experiment;
    let opts = ObserverOptions {
        u: if kind == ExperimentKind::Martingale { config.u.clone() } else { None },
        area_qv: kind == ExperimentKind::AreaCovariation,
        lift: kind == ExperimentKind::HorizontalLift,
        modulus_check: kind == ExperimentKind::StiefelWinding,
        bridge_seed: (config.master_seed, BRIDGE_TAG | p as u64),
        // Realized quadratic variation needs steps that resolve approaches to det Z_j = 0.
        refine: kind == ExperimentKind::AreaCovariation,
        ..Default::default()
    };
    let u0 = barycenter_unitary(dims);
    let inner = match FunctionalObserver::new(&u0, dims, opts) {
        Ok(o) => o,
        Err(e) => return PathResult { rows: vec![], data: Err(e) },
    };
    let mut tracker = Tracker { inner, config, path: p, rows: vec![], lift_max: [0.0; 2] };
    let first = Row { path_index: p, step: 0, time: 0.0, values: tracker.values() };
    tracker.rows.push(first);
    let mut rng = RngStream::new(config.master_seed, p as u64);
    let data = simulate_unitary_path(&u0, config.t, config.dt, &mut rng, &mut [&mut tracker]).map(|_| {
        let inner = &tracker.inner;
        let s = inner.state();
        let (qv, clock, unresolved) = inner.area_qv().map(|q| (q.realized.clone(), q.clock.clone(), q.unresolved)).unwrap_or_default();
        let phase = inner.lift().map_or(0.0, |l| l.phase_defect());
        FunctionalData {
            area: s.a.clone(),
            theta: s.theta.clone(),
            d: s.d(),
            qv,
            clock,
            modulus_residual: inner.modulus_residual(),
            lift: [tracker.lift_max[0], tracker.lift_max[1], inner.lift_projection_residual(), phase],
            bridge_windings: inner.bridge_windings(),
            unresolved,
        }
    });
    PathResult { rows: std::mem::take(&mut tracker.rows), data }
}

fn functional(config: &ExperimentConfig, dims: FlagDims) -> Result<Outcome> {
    let results = map_paths(config.n_paths, |p| functional_path(config, dims, p));
    let (rows, good, flags) = collect(results, Tracker::columns(config.experiment, dims));
    let data: Vec<&FunctionalData> = good.iter().map(|(_, d)| d).collect();
    let (estimates, verdicts) = match config.experiment {
        ExperimentKind::AreaCovariation => area_covariation_estimates(config, dims, &good),
        ExperimentKind::Martingale => martingale_estimates(&data),
        ExperimentKind::CauchyLimit => cauchy_estimates(config, dims, &data),
        ExperimentKind::StiefelWinding => winding_estimates(config, dims, &data),
        ExperimentKind::HorizontalLift => lift_estimates(&good),
        _ => unreachable!("not a functional experiment"),
    };
    Ok(Outcome { total_paths: config.n_paths, rows, flags, estimates, verdicts })
}

fn max_or_nan(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(f64::NAN, f64::max)
}

fn area_covariation_estimates(config: &ExperimentConfig, dims: FlagDims, good: &[(usize, FunctionalData)]) -> (Value, Vec<Verdict>) {
    let b = dims.blocks();
    let target = dims.m() as f64 * config.t;
    let mut cross_worst = f64::NAN;
    let mut diag_worst = f64::NAN;
    let mut listed = vec![];
    for (p, d) in good {
        let mut cross = vec![];
        for j in 0..b {
            for l in j + 1..b {
                let rel = (d.qv[j * b + l] - target).abs() / target;
                cross_worst = cross_worst.max(rel);
                cross.push(d.qv[j * b + l]);
            }
        }
        let mut diag = vec![];
        for j in 0..b {
            let rel = (d.qv[j * b + j] - d.clock[j]).abs() / d.clock[j];
            diag_worst = diag_worst.max(rel);
            diag.push(json!({"realized": d.qv[j * b + j], "clock": d.clock[j]}));
        }
        if listed.len() < LISTED_PATHS {
            listed.push(json!({"path_index": p, "cross": cross, "diagonal": diag, "unresolved_steps": d.unresolved}));
        }
    }
    let verdicts = vec![
        Verdict::within("cross_covariation_rel_error", cross_worst, 0.0, CROSS_QV_TOL),
        Verdict::within("diagonal_qv_rel_error", diag_worst, 0.0, DIAG_QV_TOL),
    ];
    (json!({"cross_target": target, "paths": listed}), verdicts)
}

fn martingale_estimates(data: &[&FunctionalData]) -> (Value, Vec<Verdict>) {
    let d: Vec<f64> = data.iter().map(|x| x.d).collect();
    let (mean, se) = mean_se(&d);
    let verdict = if se.is_finite() { Verdict::near("martingale_mean", mean, 1.0, 3.0 * se) } else { Verdict::unavailable("martingale_mean") };
    (json!({"mean_d": mean, "se": se, "samples": d.len()}), vec![verdict])
}

/// Cauchy fits of `x_j/T` per component with scale-band and location verdicts.
fn cauchy_components(label: &str, samples: &[Vec<f64>], target: f64, with_ks: bool) -> (Vec<Value>, Vec<Verdict>) {
    let mut fits = vec![];
    let mut verdicts = vec![];
    let b = samples.first().map_or(0, |s| s.len());
    for j in 0..b {
        let xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let scale_name = format!("{label}_scale_{}", j + 1);
        let loc_name = format!("{label}_location_{}", j + 1);
        let ks_name = format!("{label}_ks_{}", j + 1);
        match cauchy_fit(&xs) {
            Ok(fit) => {
                verdicts.push(Verdict::within(scale_name, fit.scale, (1.0 - SCALE_BAND) * target, (1.0 + SCALE_BAND) * target));
                verdicts.push(Verdict::near(loc_name, fit.location, 0.0, LOCATION_BAND * fit.scale));
                let ks = ks_test(&xs, cauchy_cdf(fit.location, fit.scale));
                if with_ks {
                    verdicts.push(Verdict::within(ks_name, ks.p_approx, stats::SIGNIFICANCE, 1.0));
                }
                fits.push(json!({"component": j + 1, "fit": fit, "ks": ks, "target_scale": target}));
            }
            Err(e) => {
                verdicts.push(Verdict::unavailable(scale_name));
                verdicts.push(Verdict::unavailable(loc_name));
                if with_ks {
                    verdicts.push(Verdict::unavailable(ks_name));
                }
                fits.push(json!({"component": j + 1, "error": e.to_string(), "target_scale": target}));
            }
        }
    }
    (fits, verdicts)
}

fn independence_grid(blocks: usize) -> Vec<Vec<f64>> {
    let mut grid = vec![];
    for &a in &ECF_GRID {
        for &c in &ECF_GRID {
            let mut u = vec![ECF_FILL; blocks];
            u[0] = a;
            u[1] = c;
            grid.push(u);
        }
    }
    grid
}

/// `|ecf(u) − Π_j ecf(u_j e_j)|` against `slack + 3 SE` over the grid.
fn independence(samples: &[Vec<f64>]) -> (Value, Verdict) {
    let b = samples.first().map_or(0, |s| s.len());
    if samples.len() < 2 || b < 2 {
        return (Value::Null, Verdict::unavailable("independence_excess"));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut table = vec![];
    for u in independence_grid(b) {
        let joint = match ecf(samples, &u) {
            Ok(e) => e,
            Err(_) => return (Value::Null, Verdict::unavailable("independence_excess")),
        };
        let marginals: Vec<stats::Ecf> = (0..b)
            .map(|j| {
                let mut e = vec![0.0; b];
                e[j] = u[j];
                ecf(samples, &e).expect("matching lengths")
            })
            .collect();
        let product = marginals.iter().fold(C64::new(1.0, 0.0), |acc, e| acc * e.value);
        // Delta-method standard error of the product.
        let mut se2 = joint.se().powi(2);
        for (j, e) in marginals.iter().enumerate() {
            let others: f64 = marginals.iter().enumerate().filter(|(l, _)| *l != j).map(|(_, o)| o.value.norm()).product();
            se2 += (e.se() * others).powi(2);
        }
        let gap = (joint.value - product).norm();
        let se = se2.sqrt();
        worst = worst.max(gap - 3.0 * se);
        table.push(json!({"u": u, "joint": [joint.value.re, joint.value.im], "product": [product.re, product.im], "gap": gap, "se": se}));
    }
    (Value::Array(table), Verdict::within("independence_excess", worst, f64::NEG_INFINITY, ECF_SLACK))
}

fn scaled(data: &[&FunctionalData], t: f64, pick: impl Fn(&FunctionalData) -> &Vec<f64>) -> Vec<Vec<f64>> {
    data.iter().map(|d| pick(d).iter().map(|x| x / t).collect()).collect()
}

fn cauchy_estimates(config: &ExperimentConfig, dims: FlagDims, data: &[&FunctionalData]) -> (Value, Vec<Verdict>) {
    let target = (dims.m() * (dims.n() - dims.m())) as f64;
    let areas = scaled(data, config.t, |d| &d.area);
    let windings = scaled(data, config.t, |d| &d.theta);
    let (area_fits, mut verdicts) = cauchy_components("area", &areas, target, true);
    let (winding_fits, _) = cauchy_components("winding", &windings, target, false);
    let (grid, indep) = independence(&areas);
    verdicts.push(indep);
    let bridges: Vec<f64> = data.iter().map(|d| d.bridge_windings as f64).collect();
    let estimates = json!({
        "target_scale": target,
        "area_fits": area_fits,
        "winding_fits": winding_fits,
        "independence": grid,
        "mean_bridge_windings": mean_se(&bridges).0,
    });
    (estimates, verdicts)
}

fn winding_estimates(config: &ExperimentConfig, dims: FlagDims, data: &[&FunctionalData]) -> (Value, Vec<Verdict>) {
    let target = (dims.m() * (dims.n() - dims.m())) as f64;
    let windings = scaled(data, config.t, |d| &d.theta);
    let areas = scaled(data, config.t, |d| &d.area);
    let (winding_fits, mut verdicts) = cauchy_components("winding", &windings, target, false);
    let (area_fits, _) = cauchy_components("area", &areas, target, false);
    let modulus = max_or_nan(data.iter().map(|d| d.modulus_residual));
    verdicts.push(Verdict::within("modulus_residual", modulus, 0.0, MODULUS_TOL));
    let estimates = json!({
        "target_scale": target,
        "winding_fits": winding_fits,
        "area_fits": area_fits,
        "max_modulus_residual": modulus,
    });
    (estimates, verdicts)
}

fn lift_estimates(good: &[(usize, FunctionalData)]) -> (Value, Vec<Verdict>) {
    let worst = |i: usize| max_or_nan(good.iter().map(|(_, d)| d.lift[i]));
    let verdicts = vec![
        Verdict::within("lift_unitarity", worst(0), 0.0, LIFT_TOL),
        Verdict::within("lift_det_defect", worst(1), 0.0, LIFT_TOL),
        Verdict::within("lift_projection", worst(2), 0.0, LIFT_TOL),
    ];
    let listed: Vec<Value> = good
        .iter()
        .take(LISTED_PATHS)
        .map(|(p, d)| json!({"path_index": p, "unitarity": d.lift[0], "det_defect": d.lift[1], "projection": d.lift[2], "phase_defect": d.lift[3], "area": d.area}))
        .collect();
    (json!({"max_phase_defect": worst(3), "paths": listed}), verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_points_within_unit_box() {
        let g = independence_grid(3);
        assert_eq!(g.len(), 9);
        assert!(g.iter().flatten().all(|x| x.abs() <= 1.0));
        assert!(g.iter().all(|u| u[2] == ECF_FILL));
    }

    #[test]
    fn checkpoints_follow_horizon() {
        let mut c = ExperimentConfig::new(ExperimentKind::RadialMatch, 2, 1, 4.0, 1e-3, 1, 0);
        assert_eq!(radial_checkpoints(&c).iter().map(|x| x.1).collect::<Vec<_>>(), vec![250, 1000, 4000]);
        c.t = 0.1;
        assert_eq!(radial_checkpoints(&c), vec![(0.1, 100)]);
    }

    #[test]
    fn independent_samples_pass_dependent_fail() {
        let mut rng = RngStream::new(8, 0);
        let mut cauchy = || (std::f64::consts::PI * (rng.uniform() - 0.5)).tan();
        let indep: Vec<Vec<f64>> = (0..4000).map(|_| vec![cauchy(), cauchy(), cauchy()]).collect();
        assert!(independence(&indep).1.pass);
        let coupled: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                let x = cauchy();
                vec![x, x, cauchy()]
            })
            .collect();
        assert!(!independence(&coupled).1.pass);
    }
}
