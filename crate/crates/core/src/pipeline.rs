//! End-to-end certification: validate, rescale, check the leading-form
//! condition, certify the minimum, perturb, saturate, decompose, assemble
//! and self-verify. Every failure carries an exit code and a JSON diagnostic.

use std::path::PathBuf;

use serde_json::{json, Value};
use thiserror::Error;

use crate::base::{BaseCache, BaseError};
use crate::bound::{theorem_bound, BoundInputs, Theorem};
use crate::certificate::{self, AssemblyInputs, CertError, DemandedTier, PutinarCertificate, VerifyReport};
use crate::certified::{certified_cylinder_min, EvalError, Resolution, SamplePoint};
use crate::perturbation::{search_lambda_k, LojasiewiczSeed, PerturbError, SearchConfig};
use crate::poly::{rat_to_string, Rational};
use crate::polya::{homogenize_with_x0, polya_exponent_cap, polya_saturate, PolyaConfig, PolyaError};
use crate::problem::{check_leading_form_condition, rescale_to_simplex, validate_problem, CylinderProblem, Frame, ProblemError, Variant};
use crate::sos::{SosError, SosOptions};

pub const EXIT_EXACT: i32 = 0;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_VALIDATION: i32 = 10;
pub const EXIT_INDEFINITE: i32 = 11;
pub const EXIT_NONPOSITIVE: i32 = 12;
pub const EXIT_SEARCH_EXHAUSTED: i32 = 13;
pub const EXIT_CAP_EXCEEDED: i32 = 14;
pub const EXIT_VERIFY_FAIL: i32 = 15;
pub const EXIT_SOS_FAIL: i32 = 16;
pub const EXIT_IO: i32 = 20;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("f is not positive on the cylinder: {0}")]
    Nonpositive(EvalError),
    #[error("minimum of f not certified: {0}")]
    MinimumUnresolved(EvalError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Polya(#[from] PolyaError),
    #[error("coefficient form decomposition failed: {0}")]
    Sos(#[from] SosError),
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Certificate(#[from] CertError),
    #[error("self-verification failed: {0}")]
    SelfVerify(CertError),
}

fn witness_json(w: Option<&SamplePoint>) -> Value {
    w.map(SamplePoint::to_json).unwrap_or(Value::Null)
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => EXIT_VALIDATION,
            PipelineError::Problem(ProblemError::Indefinite { .. }) => EXIT_INDEFINITE,
            PipelineError::Problem(ProblemError::ConditionUnresolved { .. }) => EXIT_SEARCH_EXHAUSTED,
            PipelineError::Problem(ProblemError::Schema(_)) => EXIT_IO,
            PipelineError::Problem(_) => EXIT_VALIDATION,
            PipelineError::Nonpositive(_) => EXIT_NONPOSITIVE,
            PipelineError::MinimumUnresolved(_) => EXIT_SEARCH_EXHAUSTED,
            PipelineError::Perturb(PerturbError::SearchExhausted { .. }) => EXIT_SEARCH_EXHAUSTED,
            PipelineError::Perturb(_) => EXIT_SEARCH_EXHAUSTED,
            PipelineError::Polya(_) => EXIT_CAP_EXCEEDED,
            PipelineError::Sos(_) | PipelineError::Base(BaseError::BudgetExhausted { .. }) => EXIT_SOS_FAIL,
            PipelineError::Base(BaseError::Cache { .. }) => EXIT_IO,
            PipelineError::Base(_) => EXIT_SOS_FAIL,
            PipelineError::Certificate(_) | PipelineError::SelfVerify(_) => EXIT_VERIFY_FAIL,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Validation(_) => "VALIDATION",
            PipelineError::Problem(ProblemError::Indefinite { .. }) => "INDEFINITE",
            PipelineError::Problem(ProblemError::ConditionUnresolved { .. }) => "CONDITION_UNRESOLVED",
            PipelineError::Problem(ProblemError::NoFeasibleSample { .. }) => "EMPTY_S",
            PipelineError::Problem(ProblemError::Schema(_)) => "SCHEMA",
            PipelineError::Problem(_) => "VALIDATION",
            PipelineError::Nonpositive(_) => "NONPOSITIVE_WITNESS",
            PipelineError::MinimumUnresolved(_) => "RESOLUTION_EXHAUSTED",
            PipelineError::Perturb(_) => "SEARCH_EXHAUSTED",
            PipelineError::Polya(PolyaError::TermLimit { .. }) => "TERM_LIMIT",
            PipelineError::Polya(_) => "CAP_EXCEEDED",
            PipelineError::Sos(_) => "SOS_FAILED",
            PipelineError::Base(_) => "BASE_FAILED",
            PipelineError::Certificate(_) => "ASSEMBLY_FAILED",
            PipelineError::SelfVerify(_) => "VERIFY_FAILED",
        }
    }

    pub fn to_json(&self) -> Value {
        let witness = match self {
            PipelineError::Problem(ProblemError::Indefinite { witness, .. }) => witness_json(Some(witness)),
            PipelineError::Nonpositive(EvalError::NonpositiveWitness(w)) => witness_json(Some(w)),
            PipelineError::Perturb(PerturbError::SearchExhausted { witness, .. }) => witness_json(witness.as_deref()),
            PipelineError::Polya(PolyaError::CapExceeded { witness, .. }) => witness_json(witness.as_deref()),
            _ => Value::Null,
        };
        json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "witness": witness,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub resolution: Resolution,
    pub search: SearchConfig,
    pub seed_constants: LojasiewiczSeed,
    pub polya: PolyaConfig,
    pub sos: SosOptions,
    /// Sidecar file for base certificates.
    pub cache_path: Option<PathBuf>,
    pub samples: usize,
    pub seed: u64,
    /// Constant used for the degree-bound report.
    pub c: Rational,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            resolution: Resolution::default(),
            search: SearchConfig::default(),
            seed_constants: LojasiewiczSeed::default(),
            polya: PolyaConfig::default(),
            sos: SosOptions::default(),
            cache_path: None,
            samples: 256,
            seed: 7,
            c: Rational::from_integer(1.into()),
        }
    }
}

impl PipelineConfig {
    pub fn with_grid_depth(mut self, depth: u32) -> Self {
        self.resolution.max_depth = depth;
        self.search.resolution.max_depth = depth;
        self.polya.resolution.max_depth = depth;
        self
    }
}

pub struct CertifyOutcome {
    pub certificate: PutinarCertificate,
    pub verification: VerifyReport,
    /// Stage-by-stage record of the run.
    pub report: Value,
}

impl CertifyOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.certificate.tier.is_exact() {
            EXIT_EXACT
        } else {
            EXIT_NUMERIC
        }
    }
}

fn theorem_for(variant: Variant) -> Theorem {
    match variant {
        Variant::R1AnyM => Theorem::T1_2,
        Variant::QuarticR2 => Theorem::T1_3,
        Variant::QuadraticRR => Theorem::T1_4,
        Variant::SplitMBy2 => Theorem::T1_5,
    }
}

fn bound_report(p: &CylinderProblem, fstar: &Rational, c: &Rational) -> Value {
    let inp = BoundInputs {
        c: c.clone(),
        d: p.d().max(1),
        m: p.m,
        r: p.r as u32,
        n: p.n.max(1) as u32,
        f_norm: p.f.norm_bullet(),
        fstar: fstar.clone(),
    };
    let th = theorem_for(p.variant);
    match theorem_bound(th, &inp) {
        Ok(v) => v.to_json(),
        Err(e) => json!({"theorem": th.name(), "formula": th.formula(), "error": e.to_string()}),
    }
}

/// Runs the whole pipeline on `original` and returns a self-verified
/// certificate in the frame of the input.
pub fn certify(original: &CylinderProblem, cfg: &PipelineConfig) -> Result<CertifyOutcome, PipelineError> {
    let validation = validate_problem(original, cfg.samples, cfg.seed)?;
    if let Some(pt) = validation.containment_violations.first() {
        let pt: Vec<String> = pt.iter().map(rat_to_string).collect();
        return Err(PipelineError::Validation(format!(
            "S is not contained in the {} frame: feasible point {pt:?}",
            original.frame.name()
        )));
    }
    let (simplex, rescale) = match original.frame {
        Frame::Box => {
            let (q, r) = rescale_to_simplex(original)?;
            (q, Some(r))
        }
        Frame::Simplex => (original.clone(), None),
    };
    let condition = check_leading_form_condition(&simplex, &cfg.resolution)?;
    let fbar = simplex.f_bar();
    let fmin = certified_cylinder_min(&simplex, &fbar, &cfg.resolution).map_err(|e| match e {
        EvalError::NonpositiveWitness(_) => PipelineError::Nonpositive(e),
        other => PipelineError::MinimumUnresolved(other),
    })?;
    let mut report = json!({
        "validation": validation.to_json(),
        "rescale": rescale.map(|r| r.to_json()),
        "condition": condition.items.iter().map(|(name, cm)| json!({"item": name, "lower_bound": rat_to_string(&cm.lower_bound)})).collect::<Vec<_>>(),
        "fstar": fmin.to_json(),
    });

    let cert = if simplex.d() == 0 {
        report["shortcut"] = json!("f is free of the bounded variables");
        certificate::assemble_unbounded_only(original, &crate::perturbation::dyadic_floor(&fmin.lower_bound), &cfg.sos)?
    } else {
        let params = search_lambda_k(&simplex, &fmin, &cfg.seed_constants, &cfg.search)?;
        let hh = homogenize_with_x0(&params.h).map_err(PolyaError::from)?;
        let cap = polya_exponent_cap(params.ell, &params.h_norm, &params.fstar_lb)?;
        let polya = polya_saturate(&hh, cap, &cfg.polya)?;
        let coeff_sos = certificate::coefficient_sos(&simplex, &polya, &cfg.sos)?;
        let cache = match &cfg.cache_path {
            Some(path) => BaseCache::with_file(path, simplex.x_shape())?,
            None => BaseCache::in_memory(),
        };
        let base = cache.build_all(&simplex, &cfg.sos)?;
        cache.persist()?;
        report["perturbation"] = params.to_json();
        report["polya"] = polya.to_json();
        report["polya"]["cap"] = json!(cap);
        report["base_certificates"] = json!(base.len());
        certificate::assemble(&AssemblyInputs {
            original,
            simplex: &simplex,
            rescale,
            params: &params,
            polya: &polya,
            polya_cap: cap,
            coefficient_sos: &coeff_sos,
            base: &base,
        })?
    };
    let demanded = if cert.tier.is_exact() { DemandedTier::Exact } else { DemandedTier::Numeric };
    let verification = certificate::verify(original, &cert, demanded).map_err(PipelineError::SelfVerify)?;
    report["bound"] = bound_report(original, &cert.metadata.fstar_lb, &cfg.c);
    report["verification"] = verification.to_json();
    Ok(CertifyOutcome { certificate: cert, verification, report })
}
