//! Smoothness regularizers for the robust training objective
//! `L + α·R`, plus the projected-gradient perturbation constructors.
//!
//! Four choices of R:
//! - `jr`: squared Frobenius norm of the input-output Jacobian;
//! - `weighted_jr`: the confidence-weighted variant
//!   (c²/2)·tr(Jᵀ diag(1/f) J) that posterior-discrepancy training
//!   approximates to second order;
//! - `vat`: worst-case KL between clean and perturbed posteriors over a unit
//!   ℓ₂ direction, estimated with one power-iteration probe at a cost of
//!   exactly 3 forward and 2 backward passes;
//! - `pdm`: mean KL between clean and Gaussian-noised posteriors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{MlpClassifier, ModelBinding};
use crate::numcore::{self, Graph, NodeId, Tensor};

/// Direction of the KL divergence between noisy and clean posteriors.
/// Both directions share the same second-order limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(f(x̂) ‖ f(x)).
    Forward,
    /// KL(f(x) ‖ f(x̂)).
    Reversed,
}

/// Which unit ball constrains the virtual-adversarial direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VatNorm {
    /// Normalize the probe gradient to unit ℓ₂ length.
    L2,
    /// Take the sign pattern of the probe gradient (unit ℓ∞ length).
    Linf,
}

/// Scalar hyperparameters of the perturbation machinery.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    /// Gaussian noise / VAT perturbation radius c.
    pub noise_scale: f64,
    /// ℓ∞ projection ball radius ε for PGD.
    pub linf_bound: f64,
    /// PGD step size η.
    pub step_size: f64,
    /// PGD iteration count K.
    pub inner_steps: usize,
    /// Std-dev σ of the Gaussian init of δ.
    pub init_sigma: f64,
    /// Finite-difference probe radius for the VAT power-iteration step.
    pub probe_xi: f64,
    /// Monte-Carlo sample count for the PDM term.
    pub pdm_samples: usize,
    pub kl_direction: KlDirection,
    /// Whether VAT blocks gradient flow through the clean posterior.
    pub vat_detach_clean: bool,
    /// Unit ball for the VAT direction.
    pub vat_norm: VatNorm,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            noise_scale: 0.1,
            linf_bound: 1e-5,
            step_size: 1e-4,
            inner_steps: 1,
            init_sigma: 1e-5,
            probe_xi: 1e-6,
            pdm_samples: 1,
            kl_direction: KlDirection::Forward,
            vat_detach_clean: true,
            vat_norm: VatNorm::L2,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 7] = [
            ("noise_scale must be ≥ 0", self.noise_scale >= 0.0),
            ("linf_bound must be > 0", self.linf_bound > 0.0),
            ("step_size must be ≥ 0", self.step_size >= 0.0),
            ("inner_steps must be ≥ 1", self.inner_steps >= 1),
            ("init_sigma must be ≥ 0", self.init_sigma >= 0.0),
            ("probe_xi must be > 0", self.probe_xi > 0.0),
            ("pdm_samples must be ≥ 1", self.pdm_samples >= 1),
        ];
        for (msg, ok) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }
}

/// A regularizer evaluation: the scalar value, its gradient w.r.t. Θ, and
/// diagnostics (probe direction, per-sample divergences, pass counters).
#[derive(Debug, Clone)]
pub struct RegularizerValue {
    pub value: f64,
    pub theta_grad: Vec<f64>,
    pub diagnostics: RegDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct RegDiagnostics {
    /// VAT's estimated most-sensitive unit direction.
    pub adversarial_direction: Option<Vec<f64>>,
    /// Per-sample KL values (PDM).
    pub sample_kls: Vec<f64>,
    /// Model forward passes performed for this evaluation.
    pub forward_passes: u64,
    /// Backward passes performed for this evaluation.
    pub backward_passes: u64,
    /// VAT probe gradient vanished and the random direction was kept.
    pub degenerate_fallback: bool,
}

/// Row weighting for the Jacobian-norm term.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RowWeighting {
    /// Σ_i ‖J_i‖².
    Uniform,
    /// scale · Σ_i ‖J_i‖² / f_i.
    InversePosterior { scale: f64 },
}

/// Build the (possibly weighted) squared Jacobian norm as a graph node from
/// an already-evaluated posterior. `xn` must be the differentiable input node
/// the posterior was computed from. Each posterior component contributes one
/// recording backward pass, so the returned node supports a further backward
/// pass for ∂R/∂Θ.
pub(crate) fn jacobian_norm_node(
    model: &MlpClassifier,
    g: &mut Graph,
    _binding: &ModelBinding,
    xn: NodeId,
    posterior: NodeId,
    weighting: RowWeighting,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for class in 0..model.class_count() {
        let component = g.pick(posterior, class)?;
        let recorded = g.backward_recorded(component)?;
        let Some(row) = recorded.get(xn) else {
            continue; // constant posterior component: zero row
        };
        let mut term = g.norm_sq(row)?;
        if let RowWeighting::InversePosterior { .. } = weighting {
            let fi = g.pick(posterior, class)?;
            term = g.elem_div(term, fi)?;
        }
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let mut r = match total {
        Some(node) => node,
        None => g.constant(Tensor::scalar(0.0)?),
    };
    if let RowWeighting::InversePosterior { scale } = weighting {
        r = g.scale(r, scale)?;
    }
    Ok(r)
}

/// R = ‖J‖²_F with ∂R/∂Θ via double backprop.
pub fn jr(model: &MlpClassifier, x: &[f64]) -> Result<RegularizerValue> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, true);
    let xn = g.input(Tensor::vector(x.to_vec())?);
    let posterior = model.forward_bound(&mut g, &binding, xn)?;
    let r = jacobian_norm_node(
        model,
        &mut g,
        &binding,
        xn,
        posterior,
        RowWeighting::Uniform,
    )?;
    let value = g.value(r).as_scalar()?;
    g.double_backward(r)?;
    Ok(RegularizerValue {
        value,
        theta_grad: binding.theta_grad(&g),
        diagnostics: RegDiagnostics {
            forward_passes: g.forward_passes(),
            backward_passes: g.backward_passes(),
            ..RegDiagnostics::default()
        },
    })
}

/// R = (c²/2)·tr(Jᵀ diag(1/f(x)) J): Jacobian rows rescaled by inverse model
/// confidence. Equals (m·c²/2)·‖J‖²_F wherever the posterior is uniform.
pub fn weighted_jr(model: &MlpClassifier, x: &[f64], c: f64) -> Result<RegularizerValue> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, true);
    let xn = g.input(Tensor::vector(x.to_vec())?);
    let posterior = model.forward_bound(&mut g, &binding, xn)?;
    let weighting = RowWeighting::InversePosterior { scale: c * c / 2.0 };
    let r = jacobian_norm_node(model, &mut g, &binding, xn, posterior, weighting)?;
    let value = g.value(r).as_scalar()?;
    g.double_backward(r)?;
    Ok(RegularizerValue {
        value,
        theta_grad: binding.theta_grad(&g),
        diagnostics: RegDiagnostics {
            forward_passes: g.forward_passes(),
            backward_passes: g.backward_passes(),
            ..RegDiagnostics::default()
        },
    })
}

/// Value-only weighted Jacobian norm, used by the verification suite as the
/// reference side of the second-order KL check.
pub fn weighted_jr_value(model: &MlpClassifier, x: &[f64], c: f64) -> Result<f64> {
    let j = model.input_output_jacobian(x)?;
    let f = model.forward(x)?;
    let mut acc = 0.0;
    for (i, fi) in f.iter().enumerate() {
        acc += numcore::norm_sq(j.row(i)) / fi;
    }
    Ok(c * c / 2.0 * acc)
}

pub(crate) struct VatTerm {
    pub p_clean: NodeId,
    pub r: NodeId,
    pub direction: Option<Vec<f64>>,
    pub degenerate_fallback: bool,
    /// Passes spent in the probe graph (the enclosing graph tracks its own).
    pub probe_forwards: u64,
    pub probe_backwards: u64,
}

/// Assemble the VAT term on an existing graph so the trainer can combine it
/// with the classification loss before the single training backward pass.
pub(crate) fn vat_term(
    model: &MlpClassifier,
    g: &mut Graph,
    binding: &ModelBinding,
    x: &[f64],
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<VatTerm> {
    let xn = g.constant(Tensor::vector(x.to_vec())?);
    let p_clean = model.forward_bound(g, binding, xn)?;
    if cfg.noise_scale == 0.0 {
        let r = g.constant(Tensor::scalar(0.0)?);
        return Ok(VatTerm {
            p_clean,
            r,
            direction: None,
            degenerate_fallback: false,
            probe_forwards: 0,
            probe_backwards: 0,
        });
    }

    let d0 = random_unit_vector(x.len(), rng);

    // Power-iteration probe: d_adv ∝ ∇_d KL(f(x) ‖ f(x + ξ·d)) at d = d0.
    // Runs in its own graph with Θ as constants; only ∇_d is needed.
    let mut probe = Graph::new();
    let dn = probe.input(Tensor::vector(d0.clone())?);
    let dscaled = probe.scale(dn, cfg.probe_xi)?;
    let xbase = probe.constant(Tensor::vector(x.to_vec())?);
    let xhat = probe.add(xbase, dscaled)?;
    let probe_binding = model.bind(&mut probe, false);
    let p_probe = model.forward_bound(&mut probe, &probe_binding, xhat)?;
    let p_fixed = probe.constant(g.value(p_clean).clone());
    let kl_probe = probe.kl(p_fixed, p_probe)?;
    probe.backward(kl_probe)?;
    let grad_d = probe.grad_or_zeros(dn).values().to_vec();

    let grad_norm = numcore::norm2(&grad_d);
    let (d_adv, degenerate): (Vec<f64>, bool) = if grad_norm < 1e-30 {
        (d0, true)
    } else {
        match cfg.vat_norm {
            VatNorm::L2 => (grad_d.iter().map(|v| v / grad_norm).collect(), false),
            VatNorm::Linf => (grad_d.iter().map(|v| v.signum()).collect(), false),
        }
    };

    let x_adv: Vec<f64> = x
        .iter()
        .zip(d_adv.iter())
        .map(|(a, d)| a + cfg.noise_scale * d)
        .collect();
    let x_adv_node = g.constant(Tensor::vector(x_adv)?);
    let p_adv = model.forward_bound(g, binding, x_adv_node)?;
    let p_ref = if cfg.vat_detach_clean {
        g.detach(p_clean)
    } else {
        p_clean
    };
    let r = g.kl(p_ref, p_adv)?;
    Ok(VatTerm {
        p_clean,
        r,
        direction: Some(d_adv),
        degenerate_fallback: degenerate,
        probe_forwards: probe.forward_passes(),
        probe_backwards: probe.backward_passes(),
    })
}

/// R = max over unit directions of KL(f(x) ‖ f(x + c·d)), one-step estimate.
/// Costs exactly 3 forward passes and 2 backward passes; the diagnostics
/// carry the instrumented counters.
pub fn vat(
    model: &MlpClassifier,
    x: &[f64],
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<RegularizerValue> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, true);
    let term = vat_term(model, &mut g, &binding, x, cfg, rng)?;
    let value = g.value(term.r).as_scalar()?;
    let mut backward_passes = term.probe_backwards;
    if cfg.noise_scale > 0.0 {
        g.backward(term.r)?;
        backward_passes += g.backward_passes();
    }
    Ok(RegularizerValue {
        value,
        theta_grad: if cfg.noise_scale > 0.0 {
            binding.theta_grad(&g)
        } else {
            vec![0.0; model.param_count()]
        },
        diagnostics: RegDiagnostics {
            adversarial_direction: term.direction,
            forward_passes: g.forward_passes() + term.probe_forwards,
            backward_passes,
            degenerate_fallback: term.degenerate_fallback,
            ..RegDiagnostics::default()
        },
    })
}

pub(crate) struct PdmTerm {
    pub p_clean: NodeId,
    pub r: NodeId,
    pub sample_kls: Vec<f64>,
}

/// Assemble the PDM term on an existing graph. Noise is resampled per call;
/// a zero noise scale yields an exact zero without touching the rng.
pub(crate) fn pdm_term(
    model: &MlpClassifier,
    g: &mut Graph,
    binding: &ModelBinding,
    x: &[f64],
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<PdmTerm> {
    let xn = g.constant(Tensor::vector(x.to_vec())?);
    let p_clean = model.forward_bound(g, binding, xn)?;
    if cfg.noise_scale == 0.0 {
        let r = g.constant(Tensor::scalar(0.0)?);
        return Ok(PdmTerm {
            p_clean,
            r,
            sample_kls: Vec::new(),
        });
    }
    let mut sample_kls = Vec::with_capacity(cfg.pdm_samples);
    let mut total: Option<NodeId> = None;
    for _ in 0..cfg.pdm_samples {
        let x_hat: Vec<f64> = x
            .iter()
            .map(|&v| v + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xh = g.constant(Tensor::vector(x_hat)?);
        let p_noisy = model.forward_bound(g, binding, xh)?;
        let kl = match cfg.kl_direction {
            KlDirection::Forward => g.kl(p_noisy, p_clean)?,
            KlDirection::Reversed => g.kl(p_clean, p_noisy)?,
        };
        sample_kls.push(g.value(kl).as_scalar()?);
        total = Some(match total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    let r = g.scale(
        total.expect("pdm_samples ≥ 1"),
        1.0 / cfg.pdm_samples as f64,
    )?;
    Ok(PdmTerm {
        p_clean,
        r,
        sample_kls,
    })
}

/// R = mean over Gaussian noise draws of the KL between clean and noisy
/// posteriors, in the configured direction.
pub fn pdm(
    model: &MlpClassifier,
    x: &[f64],
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<RegularizerValue> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, true);
    let term = pdm_term(model, &mut g, &binding, x, cfg, rng)?;
    let value = g.value(term.r).as_scalar()?;
    let theta_grad = if cfg.noise_scale == 0.0 {
        vec![0.0; model.param_count()]
    } else {
        g.backward(term.r)?;
        binding.theta_grad(&g)
    };
    Ok(RegularizerValue {
        value,
        theta_grad,
        diagnostics: RegDiagnostics {
            sample_kls: term.sample_kls,
            forward_passes: g.forward_passes(),
            backward_passes: g.backward_passes(),
            ..RegDiagnostics::default()
        },
    })
}

/// Coordinatewise clamp onto the ℓ∞ ball of radius `eps`. Idempotent, and
/// coordinates already inside the ball pass through unchanged.
pub fn linf_project(delta: &[f64], eps: f64) -> Vec<f64> {
    delta.iter().map(|&v| v.clamp(-eps, eps)).collect()
}

/// δ maximizing the classification loss at x + δ: ascent away from the gold
/// label, projected onto the ℓ∞ ball after every step.
pub fn untargeted_pgd(
    model: &MlpClassifier,
    x: &[f64],
    gold: usize,
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    pgd(model, x, gold, cfg, rng, StepSign::Ascent)
}

/// δ steering the posterior toward a chosen target label: descent on the
/// cross-entropy toward y_t.
pub fn targeted_pgd(
    model: &MlpClassifier,
    x: &[f64],
    target: usize,
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    pgd(model, x, target, cfg, rng, StepSign::Descent)
}

enum StepSign {
    Ascent,
    Descent,
}

fn pgd(
    model: &MlpClassifier,
    x: &[f64],
    label: usize,
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
    sign: StepSign,
) -> Result<Vec<f64>> {
    if label >= model.class_count() {
        return Err(Error::InvalidClass {
            class: label,
            classes: model.class_count(),
        });
    }
    let mut delta: Vec<f64> = if cfg.init_sigma == 0.0 {
        vec![0.0; x.len()]
    } else {
        (0..x.len())
            .map(|_| cfg.init_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let step = match sign {
        StepSign::Ascent => cfg.step_size,
        StepSign::Descent => -cfg.step_size,
    };
    for _ in 0..cfg.inner_steps {
        let point: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
        let grad = model.input_gradient(&point, |g, p| g.cross_entropy(p, label))?;
        for (d, g) in delta.iter_mut().zip(grad.iter()) {
            *d += step * g;
        }
        delta = linf_project(&delta, cfg.linf_bound);
    }
    Ok(delta)
}

fn random_unit_vector(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = numcore::norm2(&v);
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}
