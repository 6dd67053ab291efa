//! Numerical certification of the mathematical claims behind the
//! regularizers: the Frobenius/∞-norm inequality, Pinsker's inequality, the
//! chain bound relating the Jacobian norm to the worst-case KL divergence,
//! the first-order Taylor remainder order, and the second-order equivalence
//! between mean KL under Gaussian noise and the confidence-weighted Jacobian
//! norm.
//!
//! Exact inequalities are checked with machine-level slack. Asymptotic claims
//! carry explicit tolerances built from Monte-Carlo standard error plus an
//! O(c) curvature term, and c-sweeps record how margins move as the
//! perturbation scale shrinks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::MlpClassifier;
use crate::numcore;
use crate::regularizers::{weighted_jr_value, KlDirection};

/// Relative slack for exact inequalities.
const EXACT_SLACK: f64 = 1e-12;

/// Outcome of one check on one instance.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    /// Instance descriptor: model hash, evaluation point, scales, counts.
    pub instance: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Distance from failing, in the check's relative units; negative means
    /// the check failed by that much.
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    /// One line of the report file.
    pub fn render(&self) -> String {
        format!(
            "check={} instance={} lhs={:?} rhs={:?} margin={:?} tolerance={:?} pass={}",
            self.name, self.instance, self.lhs, self.rhs, self.margin, self.tolerance, self.pass
        )
    }
}

/// FNV-1a over the parameter bits; stable across runs and platforms.
pub fn model_hash(model: &MlpClassifier) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |word: u64| {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for &d in model.dims() {
        eat(d as u64);
    }
    for v in model.params_flat() {
        eat(v.to_bits());
    }
    h
}

/// ℓ∞-induced operator norm: the maximum absolute row sum.
pub fn induced_inf_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    debug_assert_eq!(data.len(), rows * cols);
    let mut best = 0.0_f64;
    for r in 0..rows {
        best = best.max(numcore::norm1(&data[r * cols..(r + 1) * cols]));
    }
    best
}

/// ‖J‖²_F ≤ m·‖J‖²_∞ on an arbitrary real matrix.
pub fn check_frobenius_vs_inf(rows: usize, cols: usize, data: &[f64]) -> CheckReport {
    let lhs = numcore::norm_sq(data);
    let inf = induced_inf_norm(rows, cols, data);
    let rhs = rows as f64 * inf * inf;
    inequality_report(
        "frobenius_vs_inf",
        format!("matrix {rows}x{cols}"),
        lhs,
        rhs,
    )
}

/// Pinsker: ‖P−Q‖₁² ≤ 2·KL(P‖Q), together with the ‖·‖_∞ ≤ ‖·‖₁ link used
/// in the same chain.
pub fn check_pinsker(p: &[f64], q: &[f64]) -> Result<CheckReport> {
    let diff: Vec<f64> = p.iter().zip(q.iter()).map(|(a, b)| a - b).collect();
    let l1 = numcore::norm1(&diff);
    let lhs = l1 * l1;
    let rhs = 2.0 * numcore::kl_divergence(p, q)?;
    let mut report = inequality_report("pinsker", format!("m={}", p.len()), lhs, rhs);
    let inf_le_l1 = numcore::norm_inf(&diff) <= l1 * (1.0 + EXACT_SLACK);
    report.pass = report.pass && inf_le_l1;
    Ok(report)
}

/// Chain bound: c²‖J‖²_F ≤ 2m·sup_{‖ε‖_∞=1} KL(f(x) ‖ f(x+cε)), with the sup
/// under-approximated by a dense grid over the ℓ∞ sphere plus all sign-vector
/// corners, and an explicit slack factor (1 + 10c) for the linearization gap.
/// Restricted to n ≤ 3 so the grid stays trustworthy.
pub fn check_chain(
    model: &MlpClassifier,
    x: &[f64],
    c: f64,
    grid_resolution: usize,
) -> Result<CheckReport> {
    let n = model.input_dim();
    if n > 3 {
        return Err(Error::GridTooLarge { n });
    }
    let j = jacobian_checked(model, x)?;
    let m = model.class_count() as f64;
    let lhs = c * c * j.frobenius_sq();

    let p0 = model.forward(x)?;
    let mut sup = 0.0_f64;
    let mut probe = |eps: &[f64]| -> Result<()> {
        let xp: Vec<f64> = x.iter().zip(eps.iter()).map(|(a, e)| a + c * e).collect();
        let q = model.forward(&xp)?;
        sup = sup.max(numcore::kl_divergence(&p0, &q)?);
        Ok(())
    };
    for corner in sign_vectors(n) {
        probe(&corner)?;
    }
    for eps in linf_sphere_grid(n, grid_resolution) {
        probe(&eps)?;
    }

    let slack = 10.0 * c;
    let rhs = 2.0 * m * sup * (1.0 + slack);
    let margin = if rhs > 0.0 {
        (rhs - lhs) / rhs
    } else if lhs == 0.0 {
        1.0
    } else {
        -1.0
    };
    Ok(CheckReport {
        name: "chain_jacobian_vs_sup_kl",
        instance: format!(
            "model={:016x} x={:?} c={:?} grid={}",
            model_hash(model),
            x,
            c,
            grid_resolution
        ),
        lhs,
        rhs,
        margin,
        tolerance: slack,
        pass: lhs <= rhs,
    })
}

/// Second-order claim: E_ε[KL] / ((c²/2)·tr(Jᵀdiag(1/f)J)) → 1 as c → 0, in
/// either KL direction. The tolerance is Monte-Carlo standard error plus an
/// O(c) curvature allowance, so coarse scales widen it visibly rather than
/// failing spuriously.
pub fn check_kl_second_order(
    model: &MlpClassifier,
    x: &[f64],
    c: f64,
    n_samples: usize,
    direction: KlDirection,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let j = jacobian_checked(model, x)?;
    let _ = j; // column-sum identity asserted; the trace uses weighted_jr_value
    let tolerance = (3.0 / (n_samples as f64).sqrt() + 20.0 * c).max(0.05);
    let instance = format!(
        "model={:016x} x={:?} c={:?} samples={} direction={:?}",
        model_hash(model),
        x,
        c,
        n_samples,
        direction
    );
    if c == 0.0 {
        return Ok(CheckReport {
            name: "kl_second_order",
            instance,
            lhs: 0.0,
            rhs: 0.0,
            margin: tolerance,
            tolerance,
            pass: true,
        });
    }
    let reference = weighted_jr_value(model, x, c)?;
    if reference < 1e-20 {
        return Err(Error::DegenerateInstance(format!(
            "weighted Jacobian norm {reference} below 1e-20 (flat model)"
        )));
    }
    let p0 = model.forward(x)?;
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let xp: Vec<f64> = x
            .iter()
            .map(|&v| v + c * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let q = model.forward(&xp)?;
        acc += match direction {
            KlDirection::Forward => numcore::kl_divergence(&q, &p0)?,
            KlDirection::Reversed => numcore::kl_divergence(&p0, &q)?,
        };
    }
    let mc = acc / n_samples as f64;
    let ratio = mc / reference;
    Ok(CheckReport {
        name: "kl_second_order",
        instance,
        lhs: mc,
        rhs: reference,
        margin: tolerance - (ratio - 1.0).abs(),
        tolerance,
        pass: (ratio - 1.0).abs() <= tolerance,
    })
}

/// Taylor order: the remainder ‖f(x+cε) − f(x) − cJε‖₂ decays quadratically
/// along a decreasing c-schedule, and the linearized Cauchy–Schwarz bound
/// ‖cJε‖₂² ≤ c²‖ε‖₂²‖J‖²_F holds exactly.
pub fn check_taylor(
    model: &MlpClassifier,
    x: &[f64],
    epsilon_dir: &[f64],
    c_schedule: &[f64],
) -> Result<CheckReport> {
    if c_schedule.len() < 3 || c_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "c_schedule must be strictly decreasing with ≥ 3 entries".into(),
        ));
    }
    let j = jacobian_checked(model, x)?;
    let f0 = model.forward(x)?;
    let je = j.apply(epsilon_dir);

    // Exact linear-level bound (scale-free in c, checked once).
    let lin_lhs = numcore::norm_sq(&je);
    let lin_rhs = numcore::norm_sq(epsilon_dir) * j.frobenius_sq();
    let lin_ok = lin_lhs <= lin_rhs + EXACT_SLACK * lin_rhs.max(1.0);

    let remainder = |c: f64| -> Result<f64> {
        let xp: Vec<f64> = x
            .iter()
            .zip(epsilon_dir.iter())
            .map(|(a, e)| a + c * e)
            .collect();
        let fp = model.forward(&xp)?;
        let r: Vec<f64> = fp
            .iter()
            .zip(f0.iter())
            .zip(je.iter())
            .map(|((p, q), l)| p - q - c * l)
            .collect();
        Ok(numcore::norm2(&r))
    };
    let rs: Vec<f64> = c_schedule
        .iter()
        .map(|&c| remainder(c))
        .collect::<Result<_>>()?;

    // All-negligible remainders mean the function is linear along ε (or ε is
    // zero); the quadratic-decay claim is vacuously satisfied.
    let negligible = 1e-14 * (1.0 + numcore::norm2(&f0));
    let instance = format!(
        "model={:016x} x={:?} schedule={:?}",
        model_hash(model),
        x,
        c_schedule
    );
    if rs.iter().all(|&r| r < negligible) {
        return Ok(CheckReport {
            name: "taylor_order",
            instance,
            lhs: 0.0,
            rhs: 0.0,
            margin: 1.0,
            tolerance: 0.0,
            pass: lin_ok,
        });
    }

    // Quadratic decay: r(c') / r(c) ≈ (c'/c)², accepted within [0.6, 1.8]×
    // (which is the [0.15, 0.45] bracket for halving schedules).
    let mut worst_margin = f64::INFINITY;
    let mut last_ratio = 0.0;
    let mut last_expected = 0.0;
    let mut all_in = true;
    for k in 0..rs.len() - 1 {
        let ratio = rs[k + 1] / rs[k];
        let scale = c_schedule[k + 1] / c_schedule[k];
        let expected = scale * scale;
        let (lo, hi) = (0.6 * expected, 1.8 * expected);
        let margin = (ratio - lo).min(hi - ratio) / expected;
        worst_margin = worst_margin.min(margin);
        all_in &= (lo..=hi).contains(&ratio);
        last_ratio = ratio;
        last_expected = expected;
    }
    Ok(CheckReport {
        name: "taylor_order",
        instance,
        lhs: last_ratio,
        rhs: last_expected,
        margin: worst_margin,
        tolerance: 0.8, // bracket half-width relative to the expected ratio
        pass: all_in && lin_ok,
    })
}

/// All 2ⁿ sign vectors, the corners of the ℓ∞ sphere.
pub fn sign_vectors(n: usize) -> Vec<Vec<f64>> {
    (0..1usize << n)
        .map(|mask| {
            (0..n)
                .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

/// Dense grid over the faces of the unit ℓ∞ sphere: one coordinate pinned to
/// ±1, the rest swept over `resolution` points per axis.
fn linf_sphere_grid(n: usize, resolution: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    if n == 1 || resolution == 0 {
        return out;
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|k| -1.0 + 2.0 * k as f64 / (resolution - 1).max(1) as f64)
        .collect();
    for pinned in 0..n {
        for &sign in &[-1.0, 1.0] {
            match n {
                2 => {
                    for &a in &axis {
                        let mut eps = vec![0.0; 2];
                        eps[pinned] = sign;
                        eps[1 - pinned] = a;
                        out.push(eps);
                    }
                }
                3 => {
                    let others: Vec<usize> = (0..3).filter(|&i| i != pinned).collect();
                    for &a in &axis {
                        for &b in &axis {
                            let mut eps = vec![0.0; 3];
                            eps[pinned] = sign;
                            eps[others[0]] = a;
                            eps[others[1]] = b;
                            out.push(eps);
                        }
                    }
                }
                _ => unreachable!("grid restricted to n ≤ 3"),
            }
        }
    }
    out
}

fn jacobian_checked(model: &MlpClassifier, x: &[f64]) -> Result<crate::model::JacobianMatrix> {
    let j = model.input_output_jacobian(x)?;
    let worst = j.max_abs_column_sum();
    if worst > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "jacobian column-sum identity violated: max |Σ_i J_ij| = {worst}"
        )));
    }
    Ok(j)
}

fn inequality_report(name: &'static str, instance: String, lhs: f64, rhs: f64) -> CheckReport {
    let slack = EXACT_SLACK * lhs.abs().max(rhs.abs()).max(1e-300);
    let margin = if rhs > 0.0 {
        (rhs - lhs) / rhs
    } else if lhs <= slack {
        1.0
    } else {
        -1.0
    };
    CheckReport {
        name,
        instance,
        lhs,
        rhs,
        margin,
        tolerance: EXACT_SLACK,
        pass: lhs <= rhs + slack,
    }
}

/// Settings for the randomized verification suite.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Instances per check.
    pub instances: usize,
    /// Monte-Carlo samples for the second-order check.
    pub samples: usize,
    /// Perturbation scale for the chain and second-order checks.
    pub c: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            instances: 100,
            samples: 20_000,
            c: 1e-3,
        }
    }
}

#[derive(Debug)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub reports: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passes(&self) -> usize {
        self.reports.iter().filter(|r| r.pass).count()
    }

    pub fn failures(&self) -> usize {
        self.reports.len() - self.passes()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }

    /// Line-oriented report: one record per check plus a summary trailer.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&r.render());
            out.push('\n');
        }
        out.push_str(&format!(
            "summary seed={} instances={} samples={} c={:?} checks={} passes={} failures={}\n",
            self.config.seed,
            self.config.instances,
            self.config.samples,
            self.config.c,
            self.reports.len(),
            self.passes(),
            self.failures()
        ));
        out
    }
}

/// Run every check over randomized instances. Deterministic for a fixed
/// config; per-instance rng streams keep instances independent.
pub fn run_verification_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    let mut reports = Vec::new();
    for i in 0..config.instances {
        let mut rng = instance_rng(config.seed, i as u64);

        // Exact inequalities on random matrices and simplex pairs.
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        reports.push(check_frobenius_vs_inf(rows, cols, &data));

        let m_simplex = rng.random_range(2..=6);
        let p = random_simplex(m_simplex, &mut rng);
        let q = random_simplex(m_simplex, &mut rng);
        reports.push(check_pinsker(&p, &q)?);

        // Smooth random classifier instances for the asymptotic checks.
        let n = rng.random_range(2..=3);
        let hidden = rng.random_range(3..=6);
        let m = rng.random_range(2..=4);
        let model = MlpClassifier::new(&[n, hidden, m], &mut rng)?;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let grid = if n == 2 { 128 } else { 24 };
        reports.push(check_chain(&model, &x, config.c, grid)?);

        let direction = if i % 2 == 0 {
            KlDirection::Forward
        } else {
            KlDirection::Reversed
        };
        reports.push(check_kl_second_order(
            &model,
            &x,
            config.c,
            config.samples,
            direction,
            &mut rng,
        )?);

        let eps = random_unit(n, &mut rng);
        reports.push(check_taylor(&model, &x, &eps, &[1e-2, 5e-3, 2.5e-3])?);
    }
    Ok(SuiteReport {
        config: config.clone(),
        reports,
    })
}

fn instance_rng(seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + instance);
    rng
}

fn random_simplex(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
    numcore::softmax(&logits).expect("random logits are finite")
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = numcore::norm2(&v);
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Test-only brute force for the induced ∞-norm, used to pin the closed form.
pub fn induced_inf_norm_brute(rows: usize, cols: usize, data: &[f64]) -> f64 {
    let mut best = 0.0_f64;
    for s in sign_vectors(cols) {
        let js = numcore::matvec(rows, cols, data, &s);
        best = best.max(numcore::norm_inf(&js));
    }
    best
}
