//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass a substring to run only matching criteria.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use labeldp::analysis::{self, bayes_predictor, label_moments, population_loss, pushforward, JointDistribution};
use labeldp::mechanisms::{
    dbrr_matrix, optimal_rr_on_bins, round_onto_grid, rr_matrix, rr_on_bins_matrix, AdditiveNoise, Family, NoiseKind,
    Support,
};
use labeldp::optlp::{
    self, check_structure, compute_opt_unbiased_continuous, compute_opt_unbiased_with, feasible_output_set,
    prune_support, SolverOptions, DEFAULT_PRUNE_THRESHOLD,
};
use labeldp::pipeline::BudgetSplit;
use labeldp::sim::{
    grad_decomposition, run_experiment, Architecture, Dataset, ExperimentConfig, LabelMechanism, Link, MechanismSpec,
    Model, SgdConfig, SyntheticSpec,
};
use labeldp::{LabelSet, LossKind, OutputGrid, Prior, RandomSource, RandomizerMatrix};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn table1() -> Check {
    let start = Instant::now();
    let joint = JointDistribution::table1();
    let f = e(bayes_predictor(&joint))?;
    let (fa, fb) = (f.get("a").unwrap(), f.get("b").unwrap());
    ensure((fa - 0.4).abs() < 1e-12 && (fb - 0.7).abs() < 1e-12, || format!("Bayes predictor ({fa}, {fb})"))?;

    let prior = e(joint.label_marginal())?;
    let (phi, bins) = e(optimal_rr_on_bins(&prior, 0.5))?;
    ensure(phi[1] == phi[2] && phi[0] < phi[1], || format!("bin map {phi:?} is not {{0}}, {{1, 2}}"))?;
    ensure((phi[0] - 0.396).abs() < 1e-3 && (phi[1] - 0.720).abs() < 1e-3, || format!("bin values {phi:?}"))?;

    let g = e(bayes_predictor(&e(pushforward(&joint, &bins))?))?;
    let (ga, gb) = (g.get("a").unwrap(), g.get("b").unwrap());
    ensure((ga - 0.542).abs() < 1e-3 && (gb - 0.558).abs() < 1e-3, || format!("pushforward predictor ({ga}, {gb})"))?;

    let l0 = e(population_loss(&f, &joint, LossKind::Squared))?;
    let l1 = e(population_loss(&g, &joint, LossKind::Squared))?;
    // Independent oracle: Σ_x p(x)·½(Var(y|x) + (f(x) − E[y|x])²).
    let oracle = |pred: [f64; 2]| -> f64 {
        let px = joint.feature_marginal();
        let mu = [0.4, 0.7];
        let second = [(0.1 + 0.2) / 0.5, (0.15 + 0.4) / 0.5];
        (0..2).map(|x| px[x] * 0.5 * (second[x] - mu[x] * mu[x] + (pred[x] - mu[x]).powi(2))).sum()
    };
    ensure((l0 - oracle([fa, fb])).abs() < 1e-12 && (l1 - oracle([ga, gb])).abs() < 1e-12, || {
        format!("losses ({l0}, {l1}) disagree with the closed form")
    })?;
    ensure((l0 - 0.2625).abs() < 1e-12, || format!("L(f*) = {l0}"))?;
    ensure((l1 - 0.27258).abs() < 1e-4, || format!("L(f*_M) = {l1}"))?;
    let ratio = l1 / l0;
    ensure((ratio - 2.726 / 2.625).abs() < 1e-3, || format!("ratio {ratio}"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(1), || format!("took {t:?}"))?;
    Ok(format!(
        "Φ = ({:.4}, {:.4}); f*_M = ({ga:.4}, {gb:.4}); L = ({l0:.4}, {l1:.6}); ratio {ratio:.5}; {:.1} ms",
        phi[0],
        phi[1],
        t.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 2, 3, 4

struct Instance {
    k: usize,
    epsilon: f64,
    prior: Prior,
}

fn lp_instances() -> Vec<Instance> {
    let mut out = Vec::new();
    for (i, k) in [2usize, 5, 10, 20, 5].iter().enumerate() {
        for (j, epsilon) in [0.3, 0.5, 1.0, 2.0, 4.0, 8.0].iter().enumerate() {
            let mut rng = RandomSource::new(1000 + (6 * i + j) as u64);
            out.push(Instance { k: *k, epsilon: *epsilon, prior: Prior::random_dirichlet(LabelSet::range(*k), &mut rng) });
        }
    }
    out
}

type Solved = Vec<(Instance, Result<(RandomizerMatrix, f64), String>)>;

/// The 30 instances with their 256-point grid solutions, solved once.
fn solved() -> &'static Solved {
    static CACHE: OnceLock<Solved> = OnceLock::new();
    CACHE.get_or_init(|| {
        lp_instances()
            .into_iter()
            .map(|inst| {
                let sol = solve_on_grid(&inst);
                (inst, sol)
            })
            .collect()
    })
}

fn solve_on_grid(inst: &Instance) -> Result<(RandomizerMatrix, f64), String> {
    let grid = e(feasible_output_set(inst.prior.labels(), inst.epsilon, optlp::DEFAULT_GRID_SIZE))?;
    let opt = e(compute_opt_unbiased_with(&inst.prior, &grid, inst.epsilon, &SolverOptions::default()))?;
    Ok((opt.matrix, opt.objective))
}

fn lp_unbiased_dp() -> Check {
    let start = Instant::now();
    let mut worst_bias = 0.0f64;
    let mut worst_excess = 0.0f64;
    for (inst, sol) in solved() {
        let (m, _) = sol.clone()?;
        let bias = m.max_bias();
        let ratio = m.worst_dp_ratio();
        let bound = inst.epsilon.exp() * (1.0 + 1e-7);
        ensure(bias <= 1e-7, || format!("k={} ε={}: max bias {bias:e}", inst.k, inst.epsilon))?;
        ensure(ratio <= bound, || format!("k={} ε={}: DP ratio {ratio} > {bound}", inst.k, inst.epsilon))?;
        worst_bias = worst_bias.max(bias);
        worst_excess = worst_excess.max(ratio / inst.epsilon.exp() - 1.0);
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(300), || format!("took {t:?}"))?;
    Ok(format!(
        "30 instances; max bias {worst_bias:.1e}; max DP ratio excess {worst_excess:.1e}; {:.1} s",
        t.as_secs_f64()
    ))
}

fn support_bound() -> Check {
    let mut largest = (0, 0);
    let mut max_bias_increase = 0.0f64;
    for (inst, sol) in solved() {
        let (m, _) = sol.clone()?;
        let pruned = e(prune_support(&m, Some(&inst.prior), DEFAULT_PRUNE_THRESHOLD))?;
        let s = check_structure(&pruned.matrix, analysis::STRUCTURE_TOL);
        ensure(s.support_bound_ok, || {
            format!("k={} ε={}: support {} > {}", inst.k, inst.epsilon, s.support_size, 2 * inst.k)
        })?;
        ensure(pruned.matrix.max_bias() <= 1e-7, || {
            format!("k={} ε={}: pruning left bias {:e}", inst.k, inst.epsilon, pruned.matrix.max_bias())
        })?;
        if s.support_size as f64 / (2 * inst.k) as f64 > largest.0 as f64 / (2 * largest.1.max(1)) as f64 {
            largest = (s.support_size, inst.k);
        }
        max_bias_increase = max_bias_increase.max(pruned.bias_increase);
    }
    Ok(format!(
        "30 instances within 2|Y|; tightest {}/{} outputs at |Y| = {}; pruning moved means by ≤ {max_bias_increase:.1e}",
        largest.0,
        2 * largest.1,
        largest.1
    ))
}

fn structure() -> Check {
    let mut raw_pass = 0;
    let mut repeated = 0;
    let mut worst_gain = 0.0f64;
    for (inst, sol) in solved() {
        let (m, grid_loss) = sol.clone()?;
        let pruned = e(prune_support(&m, Some(&inst.prior), DEFAULT_PRUNE_THRESHOLD))?;
        let raw = check_structure(&pruned.matrix, analysis::STRUCTURE_TOL);
        if raw.columns_two_level_ok && raw.column_pattern_ok && raw.phi_monotone_ok {
            raw_pass += 1;
        }

        // Columns are kept as a list, so two columns may share an output value.
        let cont = e(compute_opt_unbiased_continuous(&inst.prior, inst.epsilon, &SolverOptions::default()))?;
        let form = cont.form.pruned(&inst.prior, DEFAULT_PRUNE_THRESHOLD);
        let s = form.report();
        let tag = || format!("k={} ε={}", inst.k, inst.epsilon);
        ensure(s.columns_two_level_ok, || format!("{}: a column is not two-level", tag()))?;
        ensure(s.column_pattern_ok, || format!("{}: a column signature is not L*U+L*", tag()))?;
        ensure(s.phi_monotone_ok, || format!("{}: U-spans are not monotone", tag()))?;
        ensure(s.support_bound_ok, || format!("{}: {} columns", tag(), s.support_size))?;
        let matrix = e(form.to_matrix())?;
        ensure(matrix.max_bias() <= 1e-7 && matrix.worst_dp_ratio() <= inst.epsilon.exp() * (1.0 + 1e-7), || {
            format!("{}: structured solution is not unbiased ε-DP", tag())
        })?;
        let loss = form.loss(&inst.prior);
        ensure(loss <= grid_loss + 1e-9 * (1.0 + grid_loss), || {
            format!("{}: structured loss {loss} above the grid optimum {grid_loss}", tag())
        })?;
        if matrix.outputs().len() < form.columns.len() {
            repeated += 1;
        }
        worst_gain = worst_gain.max((grid_loss - loss) / grid_loss.max(1e-300));
    }
    Ok(format!(
        "30/30 continuous-output optima pass all three flags ({repeated} with a repeated output value); \
         raw 256-point grid solutions pass in {raw_pass}/30; structured loss never above the grid loss \
         (largest relative gain {worst_gain:.1e})"
    ))
}

// ---------------------------------------------------------------- 5

fn endpoint_grid() -> Check {
    let mut rng = RandomSource::new(55);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = 2 + rng.index(19);
        let mut values: Vec<f64> = (0..k).map(|_| 10.0 * rng.uniform()).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let labels = e(LabelSet::new(values))?;
        let epsilon = 0.1 + 7.9 * rng.uniform();
        let prior = Prior::random_dirichlet(labels.clone(), &mut rng);
        let grid = e(feasible_output_set(&labels, epsilon, 2))?;
        ensure(grid.len() == 2, || format!("grid {:?}", grid.values()))?;
        let opt = e(compute_opt_unbiased_with(&prior, &grid, epsilon, &SolverOptions::default()))
            .map_err(|m| format!("k={} ε={epsilon:.3}: {m}", labels.len()))?;
        let m = &opt.matrix;
        ensure(m.max_bias() <= 1e-7, || format!("bias {:e}", m.max_bias()))?;
        ensure(m.worst_dp_ratio() <= epsilon.exp() * (1.0 + 1e-7), || "DP violated".into())?;
        // Two outputs leave one unbiased row per label: P(U | y) = (y − L)/(U − L).
        let (lo, hi) = (grid.min(), grid.max());
        for (r, y) in labels.values().iter().enumerate() {
            worst = worst.max((m.row(r)[1] - (y - lo) / (hi - lo)).abs());
        }
    }
    ensure(worst <= 1e-7, || format!("solution differs from the unique unbiased matrix by {worst:e}"))?;
    Ok(format!("20 random instances feasible; matches the unique two-output solution within {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn discretization() -> Check {
    let prior = Prior::uniform(LabelSet::range(10));
    let pts = e(analysis::discretization_sweep(&prior, 1.0, &[16, 64, 256], &SolverOptions::default()))?;
    for w in pts.windows(2) {
        ensure(w[1].loss <= w[0].loss + 1e-9, || format!("loss rose from {} to {}", w[0].loss, w[1].loss))?;
    }
    let finest = pts.last().unwrap().loss;
    let width = pts[0].delta * pts[0].mesh as f64;
    for p in &pts {
        ensure(p.loss - finest <= width * p.delta, || format!("mesh {}: gap {} > {}", p.mesh, p.loss - finest, width * p.delta))?;
    }
    Ok(pts.iter().map(|p| format!("m={} loss {:.6}", p.mesh, p.loss)).collect::<Vec<_>>().join("; "))
}

// ---------------------------------------------------------------- 7

fn dbrr_oracle() -> Check {
    let labels = LabelSet::range(2);
    let prior = Prior::uniform(labels.clone());
    let grid = e(OutputGrid::new(vec![-1.0, 2.0]))?;
    let eps = 2f64.ln();
    let opt = e(compute_opt_unbiased_with(&prior, &grid, eps, &SolverOptions::default()))?;
    let want = e(round_onto_grid(&e(dbrr_matrix(&labels, eps))?, &grid))?;
    let mut diff = 0.0f64;
    for (a, b) in opt.matrix.probs().iter().zip(want.probs()) {
        for (x, y) in a.iter().zip(b) {
            diff = diff.max((x - y).abs());
        }
    }
    ensure(diff <= 1e-8, || format!("entry-wise difference {diff:e}"))?;
    ensure((opt.objective - 1.0).abs() <= 1e-8, || format!("objective {}", opt.objective))?;
    Ok(format!("max entry difference {diff:.1e}; objective {:.12}", opt.objective))
}

// ---------------------------------------------------------------- 8

fn random_joint(rng: &mut RandomSource) -> Result<JointDistribution, String> {
    let k = 2 + rng.index(5);
    let features = 2 + rng.index(4);
    let mut values: Vec<f64> = (0..k).map(|_| 5.0 * rng.uniform()).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let labels = e(LabelSet::new(values))?;
    let raw: Vec<Vec<f64>> = (0..features).map(|_| (0..labels.len()).map(|_| rng.uniform_open()).collect()).collect();
    let total: f64 = raw.iter().flatten().sum();
    let mass = raw.into_iter().map(|r| r.into_iter().map(|v| v / total).collect()).collect();
    e(JointDistribution::new((0..features).map(|i| format!("x{i}")).collect(), labels, mass))
}

fn theorem1() -> Check {
    let mut rng = RandomSource::new(8);
    let mut worst_forward = 0.0f64;
    for i in 0..100 {
        let joint = random_joint(&mut rng)?;
        let labels = joint.labels().clone();
        let eps = 0.2 + 3.0 * rng.uniform();
        let matrix = match i % 3 {
            0 => e(dbrr_matrix(&labels, eps))?,
            1 => {
                let prior = e(joint.label_marginal())?;
                let grid = e(feasible_output_set(&labels, eps, 64))?;
                e(compute_opt_unbiased_with(&prior, &grid, eps, &SolverOptions::default()))?.matrix
            }
            _ => {
                let grid = e(feasible_output_set(&labels, eps, 17))?;
                e(round_onto_grid(&e(dbrr_matrix(&labels, eps))?, &grid))?
            }
        };
        let gap = e(bayes_predictor(&e(pushforward(&joint, &matrix))?))?.max_gap(&e(bayes_predictor(&joint))?);
        ensure(gap <= 1e-9, || format!("pair {i}: unbiased matrix moved the predictor by {gap:e}"))?;
        worst_forward = worst_forward.max(gap);
    }

    let mut worst_converse = 0.0f64;
    for i in 0..20 {
        let k = 2 + rng.index(6);
        let labels = LabelSet::range(k);
        let eps = 0.2 + 3.0 * rng.uniform();
        let matrix = match i % 3 {
            0 => e(rr_matrix(&labels, eps))?,
            1 => e(optimal_rr_on_bins(&Prior::random_dirichlet(labels.clone(), &mut rng), eps))?.1,
            _ => {
                let phi: Vec<f64> = (0..k).map(|_| (k as f64) * rng.uniform()).collect();
                e(rr_on_bins_matrix(&labels, &phi, eps))?
            }
        };
        let biases: Vec<f64> = label_moments(&matrix).iter().map(|m| m.bias).collect();
        let (y, bias) = biases.iter().copied().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        ensure(bias.abs() > 1e-6, || format!("matrix {i} is not biased"))?;
        let joint = e(JointDistribution::deterministic(vec!["x".into()], labels.clone(), &[y], &[1.0]))?;
        let gap = e(bayes_predictor(&e(pushforward(&joint, &matrix))?))?.max_gap(&e(bayes_predictor(&joint))?);
        ensure((gap - bias.abs()).abs() <= 1e-9, || format!("matrix {i}: gap {gap} vs |bias| {}", bias.abs()))?;
        worst_converse = worst_converse.max((gap - bias.abs()).abs());
    }
    Ok(format!(
        "forward: 100 pairs, max predictor gap {worst_forward:.1e}; converse: 20 matrices, max |gap − |bias|| {worst_converse:.1e}"
    ))
}

// ---------------------------------------------------------------- 9

fn zero_bias_term() -> Check {
    let mut rng = RandomSource::new(9);
    let spec = SyntheticSpec::table1(400);
    let (data, _) = e(labeldp::sim::generate_synthetic(&spec, &mut rng))?;
    let labels = e(spec.labels())?;
    let mut model = Model::init(Architecture::Linear, data.dim, Link::Identity, 0.0, &mut rng);
    model.params = vec![0.3, -0.2, 0.1];
    let prior = e(JointDistribution::table1().label_marginal())?;

    let eps = 0.5;
    let split = e(BudgetSplit::with_prior_epsilon(eps, 0.1))?;
    let unbiased = [
        ("dbrr", MechanismSpec::Dbrr),
        ("opt-unbiased", MechanismSpec::OptUnbiased { grid_size: Some(64), continuous: false }),
        ("laplace", MechanismSpec::Laplace { support: Support::Continuous }),
        ("laplace (discrete)", MechanismSpec::Laplace { support: Support::Discrete }),
        ("staircase", MechanismSpec::Staircase { support: Support::Continuous }),
        ("staircase (discrete)", MechanismSpec::Staircase { support: Support::Discrete }),
    ];
    for (name, spec) in unbiased {
        let mech = e(spec.build(&labels, eps, spec.needs_prior().then_some((&prior, split))))?;
        for loss in [LossKind::Squared, LossKind::Poisson] {
            if loss == LossKind::Poisson && !matches!(mech, LabelMechanism::Finite { .. }) {
                continue;
            }
            let mut m = model.clone();
            m.link = Link::for_loss(loss);
            let t = e(grad_decomposition(&m, &data, &mech, loss, None, &mut rng))?;
            ensure(t.b.iter().all(|v| *v == 0.0), || format!("{name} ({loss:?}): term b = {:?}", t.b))?;
        }
    }

    let (_, bins) = e(optimal_rr_on_bins(&prior, eps))?;
    let bias0 = label_moments(&bins)[0].bias;
    let mech = LabelMechanism::finite(bins);
    let zeros = e(Dataset::new(2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.9], vec![0.0; 4]))?;
    let t = e(grad_decomposition(&model, &zeros, &mech, LossKind::Squared, None, &mut rng))?;
    // For squared loss b = −bias(0)·mean ∇f, and ∇f = (x, 1) for the linear model.
    let mean_grad = [(1.0 + 0.0 + 0.5 + 0.2) / 4.0, (0.0 + 1.0 + 0.5 + 0.9) / 4.0, 1.0];
    let mut worst = 0.0f64;
    for (b, g) in t.b.iter().zip(mean_grad) {
        worst = worst.max((b + bias0 * g).abs());
    }
    let norm = t.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure(norm > 0.0, || "RR-on-Bins term b vanished".into())?;
    ensure(worst <= 1e-9, || format!("RR-on-Bins term b off by {worst:e}"))?;
    Ok(format!("exact zero for 6 unbiased mechanisms; RR-on-Bins |b| = {norm:.4} with bias(0) = {bias0:.4}, error {worst:.1e}"))
}

// ---------------------------------------------------------------- 10

fn experiment_ordering() -> Check {
    let start = Instant::now();
    let names = ["opt-unbiased", "rr-on-bins", "laplace-clipped", "staircase-clipped", "rr"];
    let config = ExperimentConfig {
        mechanisms: names.iter().map(|n| MechanismSpec::from_name(n).unwrap()).collect(),
        epsilons: vec![0.5, 1.0, 2.0],
        seeds: (1..=5).collect(),
        data: SyntheticSpec::linear_ten(100_000),
        sgd: SgdConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 10,
            decay: 0.5,
            average: true,
            ..Default::default()
        },
        model: Architecture::Linear,
        test_count: 20_000,
        prior_epsilon: None,
    };
    let report = e(run_experiment(&config))?;
    let mut lines = Vec::new();
    for eps in [0.5, 1.0, 2.0] {
        let row = |n: &str| report.row(n, eps).ok_or_else(|| format!("missing {n} at ε={eps}"));
        let opt = row("opt-unbiased")?;
        ensure(opt.failures == 0, || format!("opt-unbiased failed at ε={eps}"))?;
        for n in &names[1..] {
            let other = row(n)?;
            ensure(opt.test_loss_mean <= other.test_loss_mean, || {
                format!("ε={eps}: opt-unbiased test loss {:.4} > {n} {:.4}", opt.test_loss_mean, other.test_loss_mean)
            })?;
        }
        let bins = row("rr-on-bins")?;
        ensure(opt.noisy_label_loss_mean >= bins.noisy_label_loss_mean, || {
            format!("ε={eps}: opt-unbiased noisy loss below RR-on-Bins")
        })?;
        lines.push(format!(
            "ε={eps}: test {:.3} vs best baseline {:.3}, noisy {:.1} vs {:.2}",
            opt.test_loss_mean,
            names[1..].iter().map(|n| report.row(n, eps).unwrap().test_loss_mean).fold(f64::INFINITY, f64::min),
            opt.noisy_label_loss_mean,
            bins.noisy_label_loss_mean
        ));
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(600), || format!("took {t:?}"))?;
    Ok(format!("{}; {:.1} s", lines.join("; "), t.as_secs_f64()))
}

// ---------------------------------------------------------------- 11

const CHI2_ALPHA: f64 = 1e-4;

/// χ² p-value of `counts` against `probs`, pooling cells with expected
/// count below 5. `None` when fewer than two cells remain.
fn chi2_pvalue(counts: &[u64], probs: &[f64], n: u64) -> Option<f64> {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for (c, p) in counts.iter().zip(probs) {
        let expected = p * n as f64;
        if expected < 5.0 {
            pool.0 += *c as f64;
            pool.1 += expected;
        } else {
            cells.push((*c as f64, expected));
        }
    }
    if pool.1 > 0.0 {
        cells.push(pool);
    }
    if cells.len() < 2 {
        return None;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((cells.len() - 1) as f64).ok()?;
    Some(1.0 - dist.cdf(stat))
}

fn samplers() -> Check {
    let draws = 100_000u64;
    let labels = LabelSet::range(5);
    let prior = Prior::from_weights(labels.clone(), &[5.0, 4.0, 3.0, 2.0, 1.0]).map_err(|e| e.to_string())?;
    let split = e(BudgetSplit::with_prior_epsilon(1.0, 0.1))?;
    let table1_bins = e(optimal_rr_on_bins(&e(JointDistribution::table1().label_marginal())?, 0.5))?.1;
    let finite: Vec<(&str, RandomizerMatrix)> = vec![
        ("rr", e(rr_matrix(&labels, 1.0))?),
        ("rr-on-bins", e(optimal_rr_on_bins(&prior, 1.0))?.1),
        ("rr-on-bins table-1", table1_bins),
        ("dbrr", e(dbrr_matrix(&labels, 1.0))?),
        (
            "opt-unbiased",
            e(MechanismSpec::OptUnbiased { grid_size: Some(64), continuous: false }.build(
                &labels,
                1.0,
                Some((&prior, split)),
            ))?
            .matrix()
            .unwrap()
            .clone(),
        ),
        ("opt-unbiased continuous", e(compute_opt_unbiased_continuous(&prior, 1.0, &SolverOptions::default()))?.matrix),
    ];
    let mut rng = RandomSource::new(11);
    let mut min_p = 1.0f64;
    let mut rows = 0;
    for (name, m) in &finite {
        for r in 0..m.inputs().len() {
            let mut counts = vec![0u64; m.outputs().len()];
            for _ in 0..draws {
                counts[m.sample_index(r, &mut rng)] += 1;
            }
            if let Some(p) = chi2_pvalue(&counts, m.row(r), draws) {
                ensure(p >= CHI2_ALPHA, || format!("{name} row {r}: χ² p-value {p:.2e}"))?;
                min_p = min_p.min(p);
                rows += 1;
            }
        }
    }

    // Additive mechanisms: the stated mean and variance checks.
    let big = 1_000_000usize;
    let moments = |noise: &AdditiveNoise, y: f64, rng: &mut RandomSource| -> (f64, f64, Vec<f64>) {
        let xs: Vec<f64> = (0..big).map(|_| y + noise.sample_noise(rng)).collect();
        let mean = xs.iter().sum::<f64>() / big as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (big - 1) as f64;
        (mean, var, xs)
    };
    let lap = e(AdditiveNoise::new(NoiseKind::ContinuousLaplace, 1.0, 1.0))?;
    let (mean, var, _) = moments(&lap, 5.0, &mut rng);
    ensure((mean - 5.0).abs() <= 0.01, || format!("Laplace mean {mean}"))?;
    ensure((var / 2.0 - 1.0).abs() <= 0.02, || format!("Laplace variance {var}"))?;

    let dlap = e(AdditiveNoise::new(NoiseKind::DiscreteLaplace, 2f64.ln(), 1.0))?;
    let (_, _, xs) = moments(&dlap, 3.0, &mut rng);
    let at_three = xs.iter().filter(|x| **x == 3.0).count() as f64 / big as f64;
    ensure((at_three - 1.0 / 3.0).abs() <= 0.01, || format!("discrete Laplace P[0] = {at_three}"))?;

    for family in [Family::Laplace, Family::Staircase] {
        for support in [Support::Continuous, Support::Discrete] {
            let kind = NoiseKind::new(family, support);
            let noise = e(AdditiveNoise::new(kind, 1.0, 3.0))?;
            let (mean, var, mut xs) = moments(&noise, 0.0, &mut rng);
            let se = (var / big as f64).sqrt();
            ensure(mean.abs() <= 4.0 * se, || format!("{kind:?}: mean {mean} beyond 4 SE ({se})"))?;
            ensure((var / noise.variance() - 1.0).abs() <= 0.02, || {
                format!("{kind:?}: variance {var} vs {}", noise.variance())
            })?;
            xs.sort_by(f64::total_cmp);
            let median = 0.5 * (xs[big / 2 - 1] + xs[big / 2]);
            ensure(median.abs() <= 3.0 * var.sqrt() / (big as f64).sqrt(), || format!("{kind:?}: median {median}"))?;
        }
    }
    Ok(format!(
        "{rows} rows over {} finite mechanisms, smallest χ² p-value {min_p:.3}; additive mean, variance, median and mass checks hold",
        finite.len()
    ))
}

// ---------------------------------------------------------------- 12

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_labeldp")
}

fn example_labels() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example_labels.csv")
}

/// Runs `labeldp` in `dir` and returns its standard output.
fn run_in(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin()).args(args).current_dir(dir).env("LABELDP_LOG", "error").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`labeldp {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn determinism() -> Check {
    let labels = example_labels();
    let labels = labels.to_str().unwrap();
    let small_config = serde_json::json!({
        "mechanisms": [{"name": "opt-unbiased", "grid_size": 64}, {"name": "rr-on-bins"}, {"name": "laplace-clipped"}],
        "epsilons": [1.0],
        "seeds": [1, 2],
        "data": SyntheticSpec::linear_ten(3000),
        "sgd": {"learning_rate": 0.01, "batch_size": 32, "epochs": 2, "loss": "squared"},
        "test_count": 500
    });
    let mut commands: Vec<(String, Vec<String>, Vec<&str>)> = vec![
        (
            "compute".into(),
            vec!["compute", "--labels-file", labels, "--epsilon", "1", "--seed", "7", "--out", "rand.json", "--prior-out", "prior.json"]
                .into_iter()
                .map(String::from)
                .collect(),
            vec!["rand.json", "prior.json"],
        ),
        (
            "randomize".into(),
            ["randomize", "--randomizer", "rand.json", "--in", labels, "--out", "y.csv", "--seed", "7"].map(String::from).to_vec(),
            vec!["y.csv"],
        ),
        (
            "estimate-prior".into(),
            ["estimate-prior", "--labels-file", labels, "--epsilon", "0.1", "--seed", "3", "--out", "p.json"].map(String::from).to_vec(),
            vec!["p.json"],
        ),
        (
            "evaluate".into(),
            ["evaluate", "--randomizer", "rand.json", "--prior", "prior.json", "--out", "report.json"].map(String::from).to_vec(),
            vec!["report.json"],
        ),
        ("verify".into(), ["verify", "rand.json"].map(String::from).to_vec(), vec![]),
        (
            "simulate".into(),
            ["simulate", "--config", "exp.json", "--out-csv", "cells.csv", "--out-json", "summary.json"].map(String::from).to_vec(),
            vec!["cells.csv", "summary.json"],
        ),
        (
            "sweep".into(),
            ["sweep", "--kind", "discretization", "--prior", "prior.json", "--meshes", "8,32", "--out", "sweep.csv"]
                .map(String::from)
                .to_vec(),
            vec!["sweep.csv"],
        ),
    ];
    for name in MechanismSpec::NAMES {
        let out = format!("{name}.csv");
        commands.push((
            format!("randomize --mechanism {name}"),
            vec!["randomize", "--mechanism", name, "--epsilon", "1", "--grid", "64", "--in", labels, "--out", &out, "--seed", "5"]
                .into_iter()
                .map(String::from)
                .collect(),
            vec![],
        ));
    }

    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        std::fs::write(d.path().join("exp.json"), small_config.to_string()).map_err(|e| e.to_string())?;
    }
    let mut checked = 0;
    for (name, args, files) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out_a = run_in(dirs[0].path(), &args)?;
        let out_b = run_in(dirs[1].path(), &args)?;
        ensure(out_a == out_b, || format!("{name}: standard output differs"))?;
        let mut outputs: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        if let Some(i) = args.iter().position(|a| *a == "--out") {
            outputs.push(args[i + 1].to_string());
        }
        outputs.dedup();
        for f in &outputs {
            let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{name}: {f}: {e}"))?;
            let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{name}: {f}: {e}"))?;
            ensure(!a.is_empty() && a == b, || format!("{name}: {f} differs between runs"))?;
            checked += 1;
        }
    }
    Ok(format!("{} invocations repeated; {checked} output files and all standard output byte-identical", commands.len()))
}

// ---------------------------------------------------------------- 13

fn gradients() -> Check {
    let mut rng = RandomSource::new(13);
    let mut worst = 0.0f64;
    let mut points = 0;
    for loss in [LossKind::Squared, LossKind::Poisson] {
        for p in 0..50 {
            let arch = if p % 2 == 0 { Architecture::Linear } else { Architecture::Mlp { hidden: 6 } };
            let dim = 2 + rng.index(4);
            let mut m = Model::init(arch, dim, Link::for_loss(loss), 1.0, &mut rng);
            for v in &mut m.params {
                *v = 0.7 * rng.normal();
            }
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let y = rng.index(10) as f64 + rng.uniform();
            let n = m.params.len();
            let mut scratch = vec![0.0; n];
            let mut g = vec![0.0; n];
            e(m.accumulate_loss_gradient(&x, y, loss, &mut scratch, &mut g))?;
            for i in 0..n {
                // Five-point central stencil; its O(h⁴) error allows a step
                // large enough to keep rounding error far below 1e-5.
                let h = 1e-3 * m.params[i].abs().max(1.0);
                let at = |d: f64| -> Result<f64, String> {
                    let mut p = m.clone();
                    p.params[i] += d;
                    e(loss.value(p.predict(&x), y))
                };
                let fd = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                ensure(rel <= 1e-5, || format!("{loss:?} {arch:?} point {p} param {i}: {} vs {fd}", g[i]))?;
                worst = worst.max(rel);
            }
            points += 1;
        }
    }
    Ok(format!("{points} points over both losses and both architectures; worst relative error {worst:.1e}"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("table-1 reproduction", table1),
        ("LP unbiasedness and DP", lp_unbiased_dp),
        ("support bound", support_bound),
        ("staircase structure", structure),
        ("endpoint grid feasibility", endpoint_grid),
        ("discretization sweep", discretization),
        ("LP vs dbRR oracle", dbrr_oracle),
        ("Bayes predictor preservation", theorem1),
        ("zero gradient bias term", zero_bias_term),
        ("experiment ordering", experiment_ordering),
        ("sampler statistics", samplers),
        ("CLI determinism", determinism),
        ("gradient correctness", gradients),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str()) || *f == id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.2} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.2} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
