//! The zero-truncated Poisson hierarchical log-linear model: truncated
//! Poisson primitives, the non-centered parameter layout, per-cell rates,
//! the joint log density and its exact analytic gradient.

use rand::Rng;
use thiserror::Error;

use crate::num::{log1mexp, ln_factorial, real, real_of, Real};
use crate::roads::TypeCell;
use crate::sampler::Target;
use crate::schema::CovariateSchema;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("zero-truncated Poisson needs x ≥ 1, got {0}")]
    ZeroCount(u64),
    #[error("rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("cell {0} has zero fatalities; the zero-truncated likelihood is undefined there")]
    TruncationViolation(usize),
    #[error("cell {0} has nonpositive exposure")]
    BadExposure(usize),
    #[error("parameter vector has {got} coordinates, layout needs {need}")]
    DimensionMismatch { got: usize, need: usize },
    #[error("interaction prior location must lie below the main-effect prior location")]
    PriorOrdering,
    #[error("reference override targets group {group}, level {level}, outside the schema")]
    BadOverride { group: usize, level: u32 },
}

// ---------------------------------------------------------------------------
// Truncated Poisson primitives
// ---------------------------------------------------------------------------

/// Log-pmf of the zero-truncated Poisson, log[μ^x / ((e^μ − 1) x!)],
/// computed as x·ln μ − μ − ln x! − ln(1 − e^{−μ}) so small μ stay stable.
pub fn truncated_poisson_logpmf<R: Real>(x: u64, mu: R) -> Result<R, ModelError> {
    if x == 0 {
        return Err(ModelError::ZeroCount(x));
    }
    if !(mu > R::zero()) || !mu.is_finite() {
        return Err(ModelError::BadRate(mu.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(real_of::<R>(x) * mu.ln() - mu - ln_factorial::<R>(x) - log1mexp(mu))
}

/// Ordinary Poisson sampler: Knuth multiplication below 30, Atkinson's
/// rejection method PA above.
pub fn poisson_rng<G: Rng + ?Sized>(mu: f64, rng: &mut G) -> u64 {
    debug_assert!(mu > 0.0 && mu.is_finite());
    if mu < 30.0 {
        let limit = (-mu).exp();
        let mut count = 0u64;
        let mut product: f64 = rng.random();
        while product >= limit {
            count += 1;
            product *= rng.random::<f64>();
        }
        count
    } else {
        let c = 0.767 - 3.36 / mu;
        let beta = std::f64::consts::PI / (3.0 * mu).sqrt();
        let alpha = beta * mu;
        let k = c.ln() - mu - beta.ln();
        loop {
            let u: f64 = rng.random();
            let x = (alpha - ((1.0 - u) / u).ln()) / beta;
            let n = (x + 0.5).floor();
            if n < 0.0 {
                continue;
            }
            let v: f64 = rng.random();
            let y = alpha - beta * x;
            let temp = 1.0 + y.exp();
            let lhs = y + (v / (temp * temp)).ln();
            let rhs = k + n * mu.ln() - ln_factorial::<f64>(n as u64);
            if lhs <= rhs {
                return n as u64;
            }
        }
    }
}

// Below this rate the expected number of rejection rounds (≈ 1/μ) is
// impractical, so sampling falls back to sequential inversion of the
// truncated pmf, which draws from the identical distribution.
const TRUNC_REJECTION_MIN_MU: f64 = 1e-4;

/// Zero-truncated Poisson sampler: draws ordinary Poisson variates and
/// rejects zeros, so it never returns 0.
pub fn truncated_poisson_rng<R: Real, G: Rng + ?Sized>(
    mu: R,
    rng: &mut G,
) -> Result<u64, ModelError> {
    if !(mu > R::zero()) || !mu.is_finite() {
        return Err(ModelError::BadRate(mu.to_f64().unwrap_or(f64::NAN)));
    }
    let mu = mu.to_f64().expect("rate fits in f64");
    if mu < TRUNC_REJECTION_MIN_MU {
        let u: f64 = rng.random();
        let denom = -(-mu).exp_m1(); // 1 − e^{−μ}
        let mut x = 1u64;
        let mut pmf = mu * (-mu).exp() / denom;
        let mut cdf = pmf;
        while u > cdf && x < 1000 {
            x += 1;
            pmf *= mu / x as f64;
            cdf += pmf;
        }
        return Ok(x);
    }
    loop {
        let draw = poisson_rng(mu, rng);
        if draw > 0 {
            return Ok(draw);
        }
    }
}

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

/// Normal prior with location and scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalPrior<R> {
    pub location: R,
    pub scale: R,
}

/// Parameters of one log-scale SD hierarchy:
/// σ = exp(location + tau_scale·τ + eta_scale·σσ·η).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogSdPrior<R> {
    pub location: R,
    pub tau_scale: R,
    pub eta_scale: R,
}

/// One designated (group, level) whose effect is a free parameter with its
/// own wider prior instead of a scaled deviate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceOverride<R> {
    pub group: usize,
    /// 1-based level within the group.
    pub level: u32,
    pub scale: R,
}

/// Whether the offset exponent is sampled or pinned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OffsetCoefficient<R> {
    Free(NormalPrior<R>),
    Fixed(R),
}

/// Prior constants of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec<R> {
    pub grand_mean: NormalPrior<R>,
    pub offset: OffsetCoefficient<R>,
    pub main_sd: LogSdPrior<R>,
    pub interaction_sd: LogSdPrior<R>,
    pub cell_sd_scale: R,
    pub reference_override: Option<ReferenceOverride<R>>,
}

impl<R: Real> ModelSpec<R> {
    /// The default hierarchy: grand mean N(−10, 3), free offset exponent
    /// with a standard-normal prior, main-effect log-SDs centered at −1,
    /// interaction log-SDs centered at −2, cell-error scale 0.3.
    pub fn defaults() -> Self {
        Self {
            grand_mean: NormalPrior { location: real(-10.0), scale: real(3.0) },
            offset: OffsetCoefficient::Free(NormalPrior { location: R::zero(), scale: R::one() }),
            main_sd: LogSdPrior { location: real(-1.0), tau_scale: real(0.5), eta_scale: real(0.3) },
            interaction_sd: LogSdPrior { location: real(-2.0), tau_scale: real(0.5), eta_scale: real(0.3) },
            cell_sd_scale: real(0.3),
            reference_override: None,
        }
    }

    /// Defaults plus the conventional override: the last level of the
    /// `CITY` group gets its own normal(0, 2) prior, when the schema has
    /// such a group.
    pub fn defaults_for(schema: &CovariateSchema) -> Self {
        let mut spec = Self::defaults();
        if let Some(g) = schema.group_index("CITY") {
            spec.reference_override = Some(ReferenceOverride {
                group: g,
                level: schema.cardinality(g) as u32,
                scale: real(2.0),
            });
        }
        spec
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), ModelError> {
        // Soft encoding of σ_l < σ_k: prior locations must be ordered.
        if !(self.interaction_sd.location < self.main_sd.location) {
            return Err(ModelError::PriorOrdering);
        }
        if let Some(o) = &self.reference_override {
            if o.group >= schema.group_count()
                || o.level < 1
                || o.level as usize > schema.cardinality(o.group)
            {
                return Err(ModelError::BadOverride { group: o.group, level: o.level });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

/// Offsets of every named block inside the flat unconstrained parameter
/// vector. Order: θ, [ρ], τ_main, τ_inter, log σσ_main, log σσ_inter,
/// log σ_cell, per-batch log-SD deviates (main then interaction), main
/// effect batches, interaction batches, cell errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    group_cards: Vec<usize>,
    inter_cards: Vec<usize>,
    n_cells: usize,
    has_offset_coef: bool,
    dim: usize,
}

impl ParamLayout {
    pub fn new<R: Real>(
        schema: &CovariateSchema,
        n_cells: usize,
        spec: &ModelSpec<R>,
    ) -> Result<Self, ModelError> {
        spec.validate(schema)?;
        let group_cards: Vec<usize> = schema.groups().iter().map(|g| g.cardinality).collect();
        let inter_cards: Vec<usize> = (0..schema.interactions().len())
            .map(|l| schema.interaction_cardinality(l))
            .collect();
        let has_offset_coef = matches!(spec.offset, OffsetCoefficient::Free(_));
        let dim = 1
            + usize::from(has_offset_coef)
            + 5
            + group_cards.len()
            + inter_cards.len()
            + group_cards.iter().sum::<usize>()
            + inter_cards.iter().sum::<usize>()
            + n_cells;
        Ok(Self { group_cards, inter_cards, n_cells, has_offset_coef, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_count(&self) -> usize {
        self.group_cards.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.inter_cards.len()
    }

    pub fn cell_count(&self) -> usize {
        self.n_cells
    }

    pub fn theta_ix(&self) -> usize {
        0
    }

    pub fn rho_ix(&self) -> Option<usize> {
        self.has_offset_coef.then_some(1)
    }

    fn hyper_base(&self) -> usize {
        1 + usize::from(self.has_offset_coef)
    }

    pub fn tau_main_ix(&self) -> usize {
        self.hyper_base()
    }

    pub fn tau_inter_ix(&self) -> usize {
        self.hyper_base() + 1
    }

    pub fn log_ss_main_ix(&self) -> usize {
        self.hyper_base() + 2
    }

    pub fn log_ss_inter_ix(&self) -> usize {
        self.hyper_base() + 3
    }

    pub fn log_s_cell_ix(&self) -> usize {
        self.hyper_base() + 4
    }

    pub fn lsd_main_ix(&self, k: usize) -> usize {
        debug_assert!(k < self.group_cards.len());
        self.hyper_base() + 5 + k
    }

    pub fn lsd_inter_ix(&self, l: usize) -> usize {
        debug_assert!(l < self.inter_cards.len());
        self.hyper_base() + 5 + self.group_cards.len() + l
    }

    fn batches_base(&self) -> usize {
        self.hyper_base() + 5 + self.group_cards.len() + self.inter_cards.len()
    }

    /// Coordinate of the 0-based `level` of main batch `k`.
    pub fn main_ix(&self, k: usize, level: usize) -> usize {
        debug_assert!(level < self.group_cards[k]);
        self.batches_base() + self.group_cards[..k].iter().sum::<usize>() + level
    }

    /// Coordinate of the 0-based flattened `level` of interaction batch `l`.
    pub fn inter_ix(&self, l: usize, level: usize) -> usize {
        debug_assert!(level < self.inter_cards[l]);
        self.batches_base()
            + self.group_cards.iter().sum::<usize>()
            + self.inter_cards[..l].iter().sum::<usize>()
            + level
    }

    pub fn cell_ix(&self, j: usize) -> usize {
        debug_assert!(j < self.n_cells);
        self.batches_base()
            + self.group_cards.iter().sum::<usize>()
            + self.inter_cards.iter().sum::<usize>()
            + j
    }

    /// Human-readable name per coordinate, for draw files and manifests.
    pub fn parameter_names(&self, schema: &CovariateSchema) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        names[self.theta_ix()] = "theta".to_string();
        if let Some(ix) = self.rho_ix() {
            names[ix] = "rho".to_string();
        }
        names[self.tau_main_ix()] = "tau_main".to_string();
        names[self.tau_inter_ix()] = "tau_inter".to_string();
        names[self.log_ss_main_ix()] = "log_sigma_sigma_main".to_string();
        names[self.log_ss_inter_ix()] = "log_sigma_sigma_inter".to_string();
        names[self.log_s_cell_ix()] = "log_sigma_cell".to_string();
        for k in 0..self.group_count() {
            names[self.lsd_main_ix(k)] = format!("lsd_main[{}]", schema.groups()[k].code);
        }
        for l in 0..self.interaction_count() {
            names[self.lsd_inter_ix(l)] = format!("lsd_inter[{}]", schema.interaction_label(l));
        }
        for k in 0..self.group_count() {
            for lv in 0..self.group_cards[k] {
                names[self.main_ix(k, lv)] =
                    format!("main[{}][{}]", schema.groups()[k].code, lv + 1);
            }
        }
        for l in 0..self.interaction_count() {
            for lv in 0..self.inter_cards[l] {
                names[self.inter_ix(l, lv)] =
                    format!("inter[{}][{}]", schema.interaction_label(l), lv + 1);
            }
        }
        for j in 0..self.n_cells {
            names[self.cell_ix(j)] = format!("cell_eta[{j}]");
        }
        names
    }

    fn check_dim<R>(&self, params: &[R]) -> Result<(), ModelError> {
        if params.len() != self.dim {
            return Err(ModelError::DimensionMismatch { got: params.len(), need: self.dim });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prepared cells
// ---------------------------------------------------------------------------

/// A training cell reduced to what the density needs: count, log exposure
/// and 0-based level indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCell<R> {
    pub y: u64,
    pub log_exposure: R,
    pub main_levels: Vec<u32>,
    pub inter_levels: Vec<u32>,
}

/// Converts aggregated cells for use in the likelihood, enforcing the
/// zero-truncation regime (Y ≥ 1) and positive exposure.
pub fn prepare_cells<R: Real>(
    cells: &[TypeCell<R>],
    schema: &CovariateSchema,
) -> Result<Vec<PreparedCell<R>>, ModelError> {
    cells
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if c.fatalities == 0 {
                return Err(ModelError::TruncationViolation(j));
            }
            if !(c.exposure_total > R::zero()) || !c.exposure_total.is_finite() {
                return Err(ModelError::BadExposure(j));
            }
            debug_assert_eq!(c.subtype.len(), schema.group_count());
            debug_assert_eq!(c.interaction_levels.len(), schema.interactions().len());
            Ok(PreparedCell {
                y: c.fatalities,
                log_exposure: c.exposure_total.ln(),
                main_levels: c.subtype.iter().map(|&s| s - 1).collect(),
                inter_levels: c.interaction_levels.iter().map(|&s| s - 1).collect(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Transformed scales and rates
// ---------------------------------------------------------------------------

/// The positive scales implied by one unconstrained parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedSds<R> {
    pub sigma_main: Vec<R>,
    pub sigma_inter: Vec<R>,
    pub sigma_sigma_main: R,
    pub sigma_sigma_inter: R,
    pub sigma_cell: R,
    /// cell_sd_scale · σ_cell.
    pub sd_cell: R,
}

/// σ_k = exp(loc + tau_scale·τ + eta_scale·σσ·η_k) for each batch, plus the
/// cell-error SD.
pub fn transformed_sds<R: Real>(
    params: &[R],
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
) -> TransformedSds<R> {
    let ss_main = params[layout.log_ss_main_ix()].exp();
    let ss_inter = params[layout.log_ss_inter_ix()].exp();
    let s_cell = params[layout.log_s_cell_ix()].exp();
    let tau_main = params[layout.tau_main_ix()];
    let tau_inter = params[layout.tau_inter_ix()];
    let sigma_main = (0..layout.group_count())
        .map(|k| {
            (spec.main_sd.location
                + spec.main_sd.tau_scale * tau_main
                + spec.main_sd.eta_scale * ss_main * params[layout.lsd_main_ix(k)])
            .exp()
        })
        .collect();
    let sigma_inter = (0..layout.interaction_count())
        .map(|l| {
            (spec.interaction_sd.location
                + spec.interaction_sd.tau_scale * tau_inter
                + spec.interaction_sd.eta_scale * ss_inter * params[layout.lsd_inter_ix(l)])
            .exp()
        })
        .collect();
    TransformedSds {
        sigma_main,
        sigma_inter,
        sigma_sigma_main: ss_main,
        sigma_sigma_inter: ss_inter,
        sigma_cell: s_cell,
        sd_cell: spec.cell_sd_scale * s_cell,
    }
}

#[inline]
fn is_override<R: Real>(spec: &ModelSpec<R>, k: usize, level0: usize) -> bool {
    matches!(spec.reference_override, Some(o) if o.group == k && o.level as usize == level0 + 1)
}

fn rho_value<R: Real>(params: &[R], layout: &ParamLayout, spec: &ModelSpec<R>) -> R {
    match (spec.offset, layout.rho_ix()) {
        (OffsetCoefficient::Free(_), Some(ix)) => params[ix],
        (OffsetCoefficient::Fixed(v), _) => v,
        (OffsetCoefficient::Free(_), None) => unreachable!("layout built from the same spec"),
    }
}

/// Linear predictor for one cell given its own error deviate `cell_eta`
/// (fitted for training cells, fresh for predictions).
pub fn cell_log_rate_with_error<R: Real>(
    params: &[R],
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
    sds: &TransformedSds<R>,
    cell: &PreparedCell<R>,
    cell_error: R,
) -> R {
    let mut lr = params[layout.theta_ix()] + cell_error
        + rho_value(params, layout, spec) * cell.log_exposure;
    for (k, &lv) in cell.main_levels.iter().enumerate() {
        let coord = params[layout.main_ix(k, lv as usize)];
        lr = lr
            + if is_override(spec, k, lv as usize) {
                coord
            } else {
                sds.sigma_main[k] * coord
            };
    }
    for (l, &lv) in cell.inter_levels.iter().enumerate() {
        lr = lr + sds.sigma_inter[l] * params[layout.inter_ix(l, lv as usize)];
    }
    lr
}

/// Rate μ_j of training cell `j`, using its fitted error deviate.
pub fn cell_rate<R: Real>(
    params: &[R],
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
    cells: &[PreparedCell<R>],
    j: usize,
) -> Result<R, ModelError> {
    layout.check_dim(params)?;
    let sds = transformed_sds(params, layout, spec);
    let eps = sds.sd_cell * params[layout.cell_ix(j)];
    Ok(cell_log_rate_with_error(params, layout, spec, &sds, &cells[j], eps).exp())
}

// ---------------------------------------------------------------------------
// Density and gradient
// ---------------------------------------------------------------------------

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[inline]
fn normal_logpdf<R: Real>(x: R, location: R, scale: R) -> R {
    let z = (x - location) / scale;
    -real::<R>(0.5) * z * z - scale.ln() - real(HALF_LN_2PI)
}

#[inline]
fn std_normal_logpdf<R: Real>(x: R) -> R {
    -real::<R>(0.5) * x * x - real(HALF_LN_2PI)
}

/// Half-normal(1) prior on s = exp(u) including the log-Jacobian u.
#[inline]
fn half_normal_exp_logpdf<R: Real>(u: R) -> R {
    let s = u.exp();
    real::<R>(0.5) * real::<R>(2.0 / std::f64::consts::PI).ln() - real::<R>(0.5) * s * s + u
}

/// Joint log density: zero-truncated Poisson likelihood over the cells plus
/// every prior term, with normalizing constants included.
pub fn log_density<R: Real>(
    params: &[R],
    cells: &[PreparedCell<R>],
    spec: &ModelSpec<R>,
    layout: &ParamLayout,
) -> Result<R, ModelError> {
    logp_impl::<R, false>(params, cells, spec, layout, None)
}

/// Log density and its exact gradient in the unconstrained parameterization.
/// `grad` must have `layout.dim()` entries; it is overwritten.
pub fn grad_log_density<R: Real>(
    params: &[R],
    cells: &[PreparedCell<R>],
    spec: &ModelSpec<R>,
    layout: &ParamLayout,
    grad: &mut [R],
) -> Result<R, ModelError> {
    if grad.len() != layout.dim() {
        return Err(ModelError::DimensionMismatch { got: grad.len(), need: layout.dim() });
    }
    logp_impl::<R, true>(params, cells, spec, layout, Some(grad))
}

fn logp_impl<R: Real, const GRAD: bool>(
    params: &[R],
    cells: &[PreparedCell<R>],
    spec: &ModelSpec<R>,
    layout: &ParamLayout,
    grad: Option<&mut [R]>,
) -> Result<R, ModelError> {
    layout.check_dim(params)?;
    debug_assert!(layout.cell_count() == cells.len());
    let sds = transformed_sds(params, layout, spec);
    let rho = rho_value(params, layout, spec);
    let theta = params[layout.theta_ix()];
    let mut logp = R::zero();

    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        for v in g.iter_mut() {
            *v = R::zero();
        }
    }

    // Per-batch accumulators Σ_j g_j·η for the scale chain rule.
    let mut scale_main = vec![R::zero(); layout.group_count()];
    let mut scale_inter = vec![R::zero(); layout.interaction_count()];
    let mut scale_cell = R::zero();

    for (j, cell) in cells.iter().enumerate() {
        if cell.y == 0 {
            return Err(ModelError::TruncationViolation(j));
        }
        let cell_eta = params[layout.cell_ix(j)];
        let lr = cell_log_rate_with_error(params, layout, spec, &sds, cell, sds.sd_cell * cell_eta);
        let mu = lr.exp();
        if !mu.is_finite() {
            return Ok(R::neg_infinity());
        }
        let y = real_of::<R>(cell.y);
        logp = logp + y * lr - mu - ln_factorial::<R>(cell.y) - log1mexp(mu);

        if let Some(g) = grad.as_deref_mut() {
            // d/d lr of the truncated log-pmf: y − μ − μ·e^{−μ}/(1 − e^{−μ}).
            let t = (-mu).exp();
            let denom = -(-mu).exp_m1();
            let gj = y - mu - mu * t / denom;
            g[layout.theta_ix()] = g[layout.theta_ix()] + gj;
            if let Some(ix) = layout.rho_ix() {
                g[ix] = g[ix] + gj * cell.log_exposure;
            }
            for (k, &lv) in cell.main_levels.iter().enumerate() {
                let ix = layout.main_ix(k, lv as usize);
                if is_override(spec, k, lv as usize) {
                    g[ix] = g[ix] + gj;
                } else {
                    g[ix] = g[ix] + gj * sds.sigma_main[k];
                    scale_main[k] = scale_main[k] + gj * params[ix];
                }
            }
            for (l, &lv) in cell.inter_levels.iter().enumerate() {
                let ix = layout.inter_ix(l, lv as usize);
                g[ix] = g[ix] + gj * sds.sigma_inter[l];
                scale_inter[l] = scale_inter[l] + gj * params[ix];
            }
            let cix = layout.cell_ix(j);
            g[cix] = g[cix] + gj * sds.sd_cell;
            scale_cell = scale_cell + gj * cell_eta;
        }
    }

    // Priors.
    logp = logp + normal_logpdf(theta, spec.grand_mean.location, spec.grand_mean.scale);
    if let OffsetCoefficient::Free(p) = spec.offset {
        logp = logp + normal_logpdf(rho, p.location, p.scale);
    }
    logp = logp + std_normal_logpdf(params[layout.tau_main_ix()]);
    logp = logp + std_normal_logpdf(params[layout.tau_inter_ix()]);
    logp = logp + half_normal_exp_logpdf(params[layout.log_ss_main_ix()]);
    logp = logp + half_normal_exp_logpdf(params[layout.log_ss_inter_ix()]);
    logp = logp + half_normal_exp_logpdf(params[layout.log_s_cell_ix()]);
    for k in 0..layout.group_count() {
        logp = logp + std_normal_logpdf(params[layout.lsd_main_ix(k)]);
        let card = layout.group_cards[k];
        for lv in 0..card {
            let v = params[layout.main_ix(k, lv)];
            logp = logp
                + if is_override(spec, k, lv) {
                    let scale = spec.reference_override.unwrap().scale;
                    normal_logpdf(v, R::zero(), scale)
                } else {
                    std_normal_logpdf(v)
                };
        }
    }
    for l in 0..layout.interaction_count() {
        logp = logp + std_normal_logpdf(params[layout.lsd_inter_ix(l)]);
        for lv in 0..layout.inter_cards[l] {
            logp = logp + std_normal_logpdf(params[layout.inter_ix(l, lv)]);
        }
    }
    for j in 0..layout.cell_count() {
        logp = logp + std_normal_logpdf(params[layout.cell_ix(j)]);
    }

    if let Some(g) = grad.as_deref_mut() {
        // Prior scores.
        let gm = spec.grand_mean;
        g[layout.theta_ix()] =
            g[layout.theta_ix()] - (theta - gm.location) / (gm.scale * gm.scale);
        if let (OffsetCoefficient::Free(p), Some(ix)) = (spec.offset, layout.rho_ix()) {
            g[ix] = g[ix] - (rho - p.location) / (p.scale * p.scale);
        }
        g[layout.tau_main_ix()] = g[layout.tau_main_ix()] - params[layout.tau_main_ix()];
        g[layout.tau_inter_ix()] = g[layout.tau_inter_ix()] - params[layout.tau_inter_ix()];

        // Scale chain rule: ∂lr/∂σ sums collected per batch feed the
        // log-SD deviates, τ and σσ coordinates.
        let mut d_tau_main = R::zero();
        let mut d_ss_main = R::zero();
        for k in 0..layout.group_count() {
            let s = scale_main[k] * sds.sigma_main[k];
            let lsd = params[layout.lsd_main_ix(k)];
            let ix = layout.lsd_main_ix(k);
            g[ix] = g[ix] + s * spec.main_sd.eta_scale * sds.sigma_sigma_main - lsd;
            d_tau_main = d_tau_main + s * spec.main_sd.tau_scale;
            d_ss_main = d_ss_main + s * spec.main_sd.eta_scale * lsd * sds.sigma_sigma_main;
        }
        let mut d_tau_inter = R::zero();
        let mut d_ss_inter = R::zero();
        for l in 0..layout.interaction_count() {
            let s = scale_inter[l] * sds.sigma_inter[l];
            let lsd = params[layout.lsd_inter_ix(l)];
            let ix = layout.lsd_inter_ix(l);
            g[ix] = g[ix] + s * spec.interaction_sd.eta_scale * sds.sigma_sigma_inter - lsd;
            d_tau_inter = d_tau_inter + s * spec.interaction_sd.tau_scale;
            d_ss_inter = d_ss_inter + s * spec.interaction_sd.eta_scale * lsd * sds.sigma_sigma_inter;
        }
        g[layout.tau_main_ix()] = g[layout.tau_main_ix()] + d_tau_main;
        g[layout.tau_inter_ix()] = g[layout.tau_inter_ix()] + d_tau_inter;

        // Half-normal-with-Jacobian score is 1 − s².
        let ssm = sds.sigma_sigma_main;
        let ssi = sds.sigma_sigma_inter;
        let sc = sds.sigma_cell;
        g[layout.log_ss_main_ix()] =
            g[layout.log_ss_main_ix()] + d_ss_main + (R::one() - ssm * ssm);
        g[layout.log_ss_inter_ix()] =
            g[layout.log_ss_inter_ix()] + d_ss_inter + (R::one() - ssi * ssi);
        g[layout.log_s_cell_ix()] =
            g[layout.log_s_cell_ix()] + scale_cell * sds.sd_cell + (R::one() - sc * sc);

        // Standard-normal scores on every deviate coordinate.
        for k in 0..layout.group_count() {
            for lv in 0..layout.group_cards[k] {
                let ix = layout.main_ix(k, lv);
                if is_override(spec, k, lv) {
                    let scale = spec.reference_override.unwrap().scale;
                    g[ix] = g[ix] - params[ix] / (scale * scale);
                } else {
                    g[ix] = g[ix] - params[ix];
                }
            }
        }
        for l in 0..layout.interaction_count() {
            for lv in 0..layout.inter_cards[l] {
                let ix = layout.inter_ix(l, lv);
                g[ix] = g[ix] - params[ix];
            }
        }
        for j in 0..layout.cell_count() {
            let ix = layout.cell_ix(j);
            g[ix] = g[ix] - params[ix];
        }
    }

    Ok(logp)
}

// ---------------------------------------------------------------------------
// Sampler target and prior sampling
// ---------------------------------------------------------------------------

/// The fitted posterior as a sampler target.
pub struct PosteriorTarget<'a, R: Real> {
    pub cells: &'a [PreparedCell<R>],
    pub spec: &'a ModelSpec<R>,
    pub layout: &'a ParamLayout,
}

impl<R: Real> Target<R> for PosteriorTarget<'_, R> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, position: &[R], grad: &mut [R]) -> R {
        match grad_log_density(position, self.cells, self.spec, self.layout, grad) {
            Ok(v) => v,
            Err(_) => R::neg_infinity(),
        }
    }
}

/// Draws one unconstrained parameter vector from the prior. The positive
/// scales are drawn half-normal and stored on the log scale.
pub fn sample_from_prior<R: Real, G: Rng + ?Sized>(
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
    rng: &mut G,
) -> Vec<R> {
    use rand_distr::Distribution;
    let normal = rand_distr::StandardNormal;
    let mut z = || -> f64 { normal.sample(rng) };
    let mut params = vec![R::zero(); layout.dim()];
    params[layout.theta_ix()] =
        spec.grand_mean.location + spec.grand_mean.scale * real::<R>(z());
    if let (OffsetCoefficient::Free(p), Some(ix)) = (spec.offset, layout.rho_ix()) {
        params[ix] = p.location + p.scale * real::<R>(z());
    }
    params[layout.tau_main_ix()] = real(z());
    params[layout.tau_inter_ix()] = real(z());
    params[layout.log_ss_main_ix()] = real(z().abs().ln());
    params[layout.log_ss_inter_ix()] = real(z().abs().ln());
    params[layout.log_s_cell_ix()] = real(z().abs().ln());
    for k in 0..layout.group_count() {
        params[layout.lsd_main_ix(k)] = real(z());
        for lv in 0..layout.group_cards[k] {
            let scale = if is_override(spec, k, lv) {
                spec.reference_override.unwrap().scale
            } else {
                R::one()
            };
            params[layout.main_ix(k, lv)] = scale * real::<R>(z());
        }
    }
    for l in 0..layout.interaction_count() {
        params[layout.lsd_inter_ix(l)] = real(z());
        for lv in 0..layout.inter_cards[l] {
            params[layout.inter_ix(l, lv)] = real(z());
        }
    }
    for j in 0..layout.cell_count() {
        params[layout.cell_ix(j)] = real(z());
    }
    params
}

/// Which coefficient batch a summary refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchId {
    Main(usize),
    Interaction(usize),
    Cell,
}

/// Realized coefficients of one batch under one draw: σ·η per level (the
/// override level contributes its raw value).
pub fn realized_batch<R: Real>(
    params: &[R],
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
    batch: BatchId,
) -> Vec<R> {
    let sds = transformed_sds(params, layout, spec);
    match batch {
        BatchId::Main(k) => (0..layout.group_cards[k])
            .map(|lv| {
                let v = params[layout.main_ix(k, lv)];
                if is_override(spec, k, lv) {
                    v
                } else {
                    sds.sigma_main[k] * v
                }
            })
            .collect(),
        BatchId::Interaction(l) => (0..layout.inter_cards[l])
            .map(|lv| sds.sigma_inter[l] * params[layout.inter_ix(l, lv)])
            .collect(),
        BatchId::Cell => (0..layout.cell_count())
            .map(|j| sds.sd_cell * params[layout.cell_ix(j)])
            .collect(),
    }
}

/// The superpopulation scale σ of one batch under one draw.
pub fn batch_sd<R: Real>(
    params: &[R],
    layout: &ParamLayout,
    spec: &ModelSpec<R>,
    batch: BatchId,
) -> R {
    let sds = transformed_sds(params, layout, spec);
    match batch {
        BatchId::Main(k) => sds.sigma_main[k],
        BatchId::Interaction(l) => sds.sigma_inter[l],
        BatchId::Cell => sds.sd_cell,
    }
}
