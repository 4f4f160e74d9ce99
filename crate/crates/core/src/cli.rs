//! Command-line surface over the JSON problem and certificate formats.
//! Structured results go to stdout as JSON; human-readable text to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_bigint::BigInt;
use num_traits::{One, Signed};
use serde_json::{json, Value};

use crate::bound::{theorem_bound, BoundInputs, Theorem};
use crate::certificate::{verify, CertError, DemandedTier, PutinarCertificate};
use crate::certified::{certified_cylinder_min, Resolution};
use crate::pipeline::{certify, PipelineConfig, EXIT_IO, EXIT_NONPOSITIVE, EXIT_SEARCH_EXHAUSTED, EXIT_VALIDATION, EXIT_VERIFY_FAIL};
use crate::poly::{parse_rational, rat_to_string, Rational};
use crate::problem::{rescale_to_simplex, CylinderProblem, Frame};

#[derive(Parser, Debug)]
#[command(name = "cylcert", version, about = "Positivity certificates for polynomials on cylinders")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TierArg {
    Exact,
    Numeric,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Produce a certificate for a problem file.
    Certify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `exact` refuses numeric ingredients.
        #[arg(long, value_enum, default_value = "numeric")]
        tier: TierArg,
        #[arg(long, default_value_t = 24)]
        grid_depth: u32,
        #[arg(long, default_value_t = 400_000)]
        max_cells: usize,
        /// Largest λ tried, as `p/q` or `2^e`.
        #[arg(long, default_value = "2^64")]
        lambda_cap: String,
        #[arg(long, default_value_t = 16)]
        k_cap: u32,
        /// Largest Gram basis for the SOS searches.
        #[arg(long, default_value_t = 16)]
        basis_cap: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        /// Constant in the degree-bound report.
        #[arg(long, default_value = "1")]
        c: String,
        /// Sidecar file for base certificates.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Check a certificate against a problem file.
    Verify {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        certificate: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        tier: TierArg,
    },
    /// Certified minimum of the homogenized objective over S times the sphere(s).
    Minimize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "f")]
        target: String,
        #[arg(long, default_value_t = 24)]
        grid_depth: u32,
    },
    /// Evaluate a degree-bound formula.
    Bound {
        #[arg(long)]
        theorem: String,
        #[arg(long, default_value = "1")]
        c: String,
        #[arg(long)]
        d: u32,
        #[arg(long, default_value_t = 2)]
        m: u32,
        #[arg(long, default_value_t = 1)]
        r: u32,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        fnorm: String,
        #[arg(long)]
        fstar: String,
    },
}

struct Failure {
    code: i32,
    kind: &'static str,
    message: String,
    detail: Value,
}

impl Failure {
    fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        Failure { code, kind, message: message.into(), detail: Value::Null }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure::new(EXIT_IO, "IO_SCHEMA", message)
    }
}

/// `p/q`, a decimal, or `b^e`.
pub fn parse_cap(s: &str) -> Result<Rational, String> {
    if let Some((b, e)) = s.split_once('^') {
        let b: u64 = b.trim().parse().map_err(|_| format!("bad base in {s:?}"))?;
        let e: u32 = e.trim().parse().map_err(|_| format!("bad exponent in {s:?}"))?;
        return Ok(Rational::from_integer(num_traits::Pow::pow(BigInt::from(b), e)));
    }
    parse_rational(s).map_err(|e| e.to_string())
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn read_problem(path: &Path) -> Result<CylinderProblem, Failure> {
    let v = read_json(path)?;
    CylinderProblem::from_json(&v).map_err(|e| match e {
        crate::problem::ProblemError::Schema(m) => Failure::io(format!("{}: {m}", path.display())),
        other => Failure::new(EXIT_VALIDATION, "VALIDATION", other.to_string()),
    })
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)
}

fn demanded(t: TierArg) -> DemandedTier {
    match t {
        TierArg::Exact => DemandedTier::Exact,
        TierArg::Numeric => DemandedTier::Numeric,
    }
}

fn run_command(cmd: Command) -> Result<(i32, Value), Failure> {
    match cmd {
        Command::Certify { input, output, tier, grid_depth, max_cells, lambda_cap, k_cap, basis_cap, seed, samples, c, cache } => {
            if input == output {
                return Err(Failure::new(EXIT_VALIDATION, "VALIDATION", "input and output paths must differ"));
            }
            let p = read_problem(&input)?;
            let mut cfg = PipelineConfig::default().with_grid_depth(grid_depth);
            cfg.resolution.max_cells = max_cells;
            cfg.search.resolution.max_cells = max_cells;
            cfg.polya.resolution.max_cells = max_cells;
            cfg.search.lambda_cap = parse_cap(&lambda_cap).map_err(|e| Failure::new(EXIT_VALIDATION, "VALIDATION", e))?;
            cfg.search.k_cap = k_cap;
            cfg.sos.allow_numeric = tier == TierArg::Numeric;
            cfg.sos.basis_cap = basis_cap;
            cfg.seed = seed;
            cfg.samples = samples;
            cfg.c = parse_rational(&c).map_err(|e| Failure::new(EXIT_VALIDATION, "VALIDATION", e.to_string()))?;
            cfg.cache_path = cache;
            let out = certify(&p, &cfg).map_err(|e| Failure {
                code: e.exit_code(),
                kind: e.kind(),
                message: e.to_string(),
                detail: e.to_json()["witness"].clone(),
            })?;
            let text = serde_json::to_string_pretty(&out.certificate.to_json()).expect("serializable");
            write_atomic(&output, &text).map_err(|e| Failure::io(format!("{}: {e}", output.display())))?;
            let code = out.exit_code();
            Ok((code, json!({"status": "ok", "tier": out.certificate.tier.name(), "exit_code": code, "output": output.display().to_string(), "report": out.report})))
        }
        Command::Verify { problem, certificate, tier } => {
            let p = read_problem(&problem)?;
            let v = read_json(&certificate)?;
            let cert = PutinarCertificate::from_json(&v, p.shape()).map_err(|e| Failure::io(e.to_string()))?;
            match verify(&p, &cert, demanded(tier)) {
                Ok(rep) => Ok((0, rep.to_json())),
                Err(e) => {
                    let kind = match &e {
                        CertError::IdentityFail(_) => "IDENTITY_FAIL",
                        CertError::NegativeWeight { .. } => "NEGATIVE_WEIGHT",
                        CertError::DegreeMetadataMismatch { .. } => "DEGREE_METADATA_MISMATCH",
                        CertError::TierInsufficient { .. } => "TIER_INSUFFICIENT",
                        CertError::ProblemMismatch { .. } => "PROBLEM_MISMATCH",
                        CertError::Schema(_) => return Err(Failure::io(e.to_string())),
                        _ => "VERIFY_FAIL",
                    };
                    Err(Failure::new(EXIT_VERIFY_FAIL, kind, e.to_string()))
                }
            }
        }
        Command::Minimize { input, target, grid_depth } => {
            let p = read_problem(&input)?;
            if target != "f" {
                return Err(Failure::new(EXIT_VALIDATION, "VALIDATION", format!("unknown target {target:?}; only \"f\" is supported")));
            }
            let q = match p.frame {
                Frame::Box => rescale_to_simplex(&p).map_err(|e| Failure::new(EXIT_VALIDATION, "VALIDATION", e.to_string()))?.0,
                Frame::Simplex => p.clone(),
            };
            let res = Resolution { max_depth: grid_depth, ..Resolution::default() };
            match certified_cylinder_min(&q, &q.f_bar(), &res) {
                Ok(cm) => Ok((0, json!({"status": "ok", "minimum": cm.to_json()}))),
                Err(e @ crate::certified::EvalError::NonpositiveWitness(_)) => Err(Failure::new(EXIT_NONPOSITIVE, "NONPOSITIVE_WITNESS", e.to_string())),
                Err(e) => Err(Failure::new(EXIT_SEARCH_EXHAUSTED, "RESOLUTION_EXHAUSTED", e.to_string())),
            }
        }
        Command::Bound { theorem, c, d, m, r, n, fnorm, fstar } => {
            let bad = |e: String| Failure::new(EXIT_VALIDATION, "VALIDATION", e);
            let th = Theorem::from_name(&theorem).map_err(|e| bad(e.to_string()))?;
            let parse = |s: &str| parse_rational(s).map_err(|e| bad(e.to_string()));
            let inp = BoundInputs { c: parse(&c)?, d, m, r, n, f_norm: parse(&fnorm)?, fstar: parse(&fstar)? };
            if !inp.c.is_positive() || inp.c > Rational::from_integer(BigInt::from(1u32 << 16)) * Rational::one() {
                return Err(bad("c must be a positive rational of moderate size".into()));
            }
            let v = theorem_bound(th, &inp).map_err(|e| bad(e.to_string()))?;
            let mut out = v.to_json();
            out["inputs"] = json!({"c": rat_to_string(&inp.c), "d": d, "m": m, "r": r, "n": n, "fnorm": rat_to_string(&inp.f_norm), "fstar": rat_to_string(&inp.fstar)});
            Ok((0, out))
        }
    }
}

/// Parses arguments, runs the command, prints results, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run_command(cli.command) {
        Ok((code, v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            code
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            let v = json!({"status": "error", "kind": f.kind, "exit_code": f.code, "message": f.message, "witness": f.detail});
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            f.code
        }
    }
}
