//! JSON experiment configuration. Unknown keys are rejected; `resolve` materializes every
//! default so the echoed configuration reproduces a run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSpec, DiffusionSpec, DriftSpec};
use crate::discretize::ThetaMax;
use crate::ergodics::{InitialState, KernelGrid, Observable};
use crate::error::{Error, Result};
use crate::kernelbasis::{make_expsum_basis, make_gle_basis, make_tempered_fractional_basis, BasisDoc, LiftingBasis, TemperedFractional};
use crate::linalg;

/// A scalar (for one-dimensional bases) or a matrix given by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixDoc {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixDoc {
    fn matrix(&self, field: &str) -> Result<nalgebra::DMatrix<f64>> {
        match self {
            MatrixDoc::Scalar(v) => linalg::from_rows(&[vec![*v]], field),
            MatrixDoc::Rows(r) => linalg::from_rows(r, field),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpTerm {
    pub rate: f64,
    #[serde(rename = "Mb")]
    pub mb: MatrixDoc,
    #[serde(rename = "Ms")]
    pub ms: MatrixDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    /// `K(t) = Σ M e^{−rate·t}`.
    Expsum { terms: Vec<ExpTerm> },
    TemperedFractional {
        alpha_b: f64,
        alpha_s: f64,
        kappa_b: f64,
        kappa_s: f64,
        #[serde(default)]
        gamma_b: Option<f64>,
        #[serde(default)]
        gamma_s: Option<f64>,
        #[serde(default = "one")]
        n: usize,
    },
    /// Tempered fractional pair with `α_b = 2α_σ − 1`.
    Gle {
        alpha_s: f64,
        kappa_b: f64,
        kappa_s: f64,
        #[serde(default = "one")]
        n: usize,
    },
    /// Path to a JSON basis document, relative to the configuration file.
    File(PathBuf),
    Inline(BasisDoc),
}

fn one() -> usize {
    1
}

impl BasisSpec {
    pub fn build(&self, field: &str) -> Result<LiftingBasis> {
        match self {
            BasisSpec::Expsum { terms } => {
                let t = terms
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        Ok((
                            t.rate,
                            t.mb.matrix(&format!("{field}.terms[{i}].Mb"))?,
                            t.ms.matrix(&format!("{field}.terms[{i}].Ms"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                make_expsum_basis(&t)
            }
            BasisSpec::TemperedFractional {
                alpha_b,
                alpha_s,
                kappa_b,
                kappa_s,
                gamma_b,
                gamma_s,
                n,
            } => make_tempered_fractional_basis(TemperedFractional::new(*alpha_b, *alpha_s, *kappa_b, *kappa_s, *gamma_b, *gamma_s)?, *n),
            BasisSpec::Gle { alpha_s, kappa_b, kappa_s, n } => make_gle_basis(*alpha_s, *kappa_b, *kappa_s, *n),
            BasisSpec::File(p) => Err(Error::invalid("cli", field, format!("unresolved file reference {}", p.display()))),
            BasisSpec::Inline(doc) => doc.into_basis(),
        }
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        if let BasisSpec::File(p) = self {
            let path = base.join(&*p);
            let text = std::fs::read_to_string(&path).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            *self = BasisSpec::Inline(serde_json::from_str(&text)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_theta_max")]
    pub theta_max: ThetaMax,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
}

fn default_k() -> usize {
    32
}
fn default_theta_max() -> ThetaMax {
    ThetaMax::AUTO
}
fn default_quad_tol() -> f64 {
    1e-10
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization {
            k: default_k(),
            theta_max: default_theta_max(),
            quad_tol: default_quad_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Seed of the second ensemble or replicate; defaults to `seed + 1`.
    #[serde(default)]
    pub seed_b: Option<u64>,
}

fn default_trajectories() -> usize {
    1024
}

impl Default for RngConfig {
    fn default() -> Self {
        RngConfig {
            seed: 0,
            trajectories: default_trajectories(),
            seed_b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir() }
    }
}

fn default_bootstrap() -> usize {
    200
}
fn default_directions() -> usize {
    64
}
fn default_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    KernelError {
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        /// Optional k ladder for the ε_k table.
        #[serde(default)]
        ladder: Option<Vec<usize>>,
    },
    Simulate {
        #[serde(default = "default_every")]
        record_every: usize,
        /// Trajectories written in full to `paths.csv`.
        #[serde(default = "default_paths")]
        paths: usize,
        /// Oracle for the variance of each coordinate of X at T, checked at three standard errors.
        #[serde(default)]
        expected_variance: Option<f64>,
    },
    Coupling {
        y1: InitialState,
        y2: InitialState,
        /// Cutoff m; searched by doubling from 2κ when absent.
        #[serde(default)]
        m: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        l: Option<f64>,
        /// Radius R; unbounded when absent.
        #[serde(default)]
        r: Option<f64>,
        /// Overrides the certified gain.
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_coupling_every")]
        record_every: usize,
        /// Oracle for the fitted rate, checked at 1% relative.
        #[serde(default)]
        expected_rate: Option<f64>,
    },
    Ergodic {
        y1: InitialState,
        y2: InitialState,
        #[serde(default = "default_grid_points")]
        grid_points: usize,
        #[serde(default)]
        fit_start: f64,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_directions")]
        directions: usize,
        /// Oracle for the fitted rate, checked at three standard errors.
        #[serde(default)]
        expected_rate: Option<f64>,
    },
    Stationarity {
        burn_in: f64,
        lags: Vec<f64>,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_directions")]
        directions: usize,
    },
    LiftIndependence {
        basis_b: BasisSpec,
        #[serde(default)]
        grid: KernelGrid,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_directions")]
        directions: usize,
    },
    IpmConvergence {
        ladder: Vec<usize>,
        #[serde(default)]
        observable: Observable,
        #[serde(default = "default_bootstrap")]
        bootstrap: usize,
        #[serde(default = "default_directions")]
        directions: usize,
    },
    LyapunovCheck {},
}

fn default_t_min() -> f64 {
    1e-2
}
fn default_t_max() -> f64 {
    10.0
}
fn default_points() -> usize {
    200
}
fn default_tolerance() -> f64 {
    1e-2
}
fn default_paths() -> usize {
    10
}
fn default_coupling_every() -> usize {
    10
}
fn default_grid_points() -> usize {
    50
}

impl Experiment {
    pub fn tag(&self) -> &'static str {
        match self {
            Experiment::KernelError { .. } => "kernel_error",
            Experiment::Simulate { .. } => "simulate",
            Experiment::Coupling { .. } => "coupling",
            Experiment::Ergodic { .. } => "ergodic",
            Experiment::Stationarity { .. } => "stationarity",
            Experiment::LiftIndependence { .. } => "lift_independence",
            Experiment::IpmConvergence { .. } => "ipm_convergence",
            Experiment::LyapunovCheck {} => "lyapunov_check",
        }
    }
}

fn default_coefficients() -> CoefficientSpec {
    CoefficientSpec {
        drift: DriftSpec::Linear { beta: 1.0, c: None },
        diffusion: DiffusionSpec::Constant { s: 1.0 },
        truncation: None,
    }
}

fn default_scheme() -> Scheme {
    Scheme { h: 1e-2, horizon: 10.0 }
}

fn default_initial() -> InitialState {
    InitialState::zero()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub basis: BasisSpec,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default = "default_coefficients")]
    pub coefficients: CoefficientSpec,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub rng: RngConfig,
    #[serde(default = "default_initial")]
    pub initial: InitialState,
    pub experiment: Experiment,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Read and resolve a configuration file; basis file references are inlined.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Inline file references and fill in derived defaults.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        self.basis.resolve(base)?;
        if let Experiment::LiftIndependence { basis_b, .. } = &mut self.experiment {
            basis_b.resolve(base)?;
        }
        self.rng.seed_b.get_or_insert(self.rng.seed.wrapping_add(1));
        Ok(())
    }

    /// Replace the seed; a derived second seed follows it.
    pub fn override_seed(&mut self, seed: u64) {
        if self.rng.seed_b == Some(self.rng.seed.wrapping_add(1)) {
            self.rng.seed_b = Some(seed.wrapping_add(1));
        }
        self.rng.seed = seed;
    }

    pub fn seed_b(&self) -> u64 {
        self.rng.seed_b.unwrap_or(self.rng.seed.wrapping_add(1))
    }

    /// Check every precondition that does not require running the experiment.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::invalid("cli", field, reason));
        let s = &self.scheme;
        if !(s.h > 0.0 && s.h.is_finite()) {
            return bad("scheme.h", format!("step must be positive, got {}", s.h));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return bad("scheme.T", format!("horizon must be positive, got {}", s.horizon));
        }
        if s.h > s.horizon {
            return bad("scheme.h", format!("step {} exceeds the horizon {}", s.h, s.horizon));
        }
        let d = &self.discretization;
        if d.k == 0 {
            return bad("discretization.k", "must be positive".into());
        }
        if !(d.quad_tol > 0.0 && d.quad_tol < 1.0) {
            return bad("discretization.quad_tol", format!("must lie in (0, 1), got {}", d.quad_tol));
        }
        if let ThetaMax::Fixed(t) = d.theta_max {
            if !(t > 0.0 && t.is_finite()) {
                return bad("discretization.theta_max", format!("must be positive or \"auto\", got {t}"));
            }
        }
        if self.rng.trajectories == 0 {
            return bad("rng.trajectories", "must be positive".into());
        }
        let basis = self.basis.build("basis")?;
        let model = self.coefficients.build(basis.n)?;
        model.spot_check(256, 3.0, self.rng.seed)?;
        let ensemble = !matches!(self.experiment, Experiment::KernelError { .. } | Experiment::LyapunovCheck {});
        if ensemble && self.rng.trajectories < 2 {
            return bad("rng.trajectories", "ensemble experiments need at least 2".into());
        }
        match &self.experiment {
            Experiment::KernelError { t_min, t_max, points, tolerance, ladder } => {
                if !(*t_min > 0.0 && t_max > t_min) || *points < 2 {
                    return bad("experiment.t_min", "need 0 < t_min < t_max and at least 2 points".into());
                }
                if !(*tolerance > 0.0) {
                    return bad("experiment.tolerance", "must be positive".into());
                }
                if let Some(l) = ladder {
                    if l.is_empty() || l.contains(&0) || l.windows(2).any(|w| w[0] >= w[1]) {
                        return bad("experiment.ladder", "must be strictly increasing positive cell counts".into());
                    }
                }
            }
            Experiment::Simulate { record_every, .. } | Experiment::Coupling { record_every, .. } if *record_every == 0 => {
                return bad("experiment.record_every", "must be positive".into());
            }
            Experiment::Coupling { m, delta, l, r, lambda, .. } => {
                for (name, v) in [("m", m), ("delta", delta), ("l", l), ("r", r), ("lambda", lambda)] {
                    if let Some(v) = v {
                        if !(*v > 0.0 && v.is_finite()) {
                            return bad(&format!("experiment.{name}"), format!("must be positive, got {v}"));
                        }
                    }
                }
            }
            Experiment::Ergodic { grid_points, bootstrap, directions, .. } => {
                if *grid_points < 2 {
                    return bad("experiment.grid_points", "need at least 2".into());
                }
                estimator_checks(*bootstrap, *directions)?;
            }
            Experiment::Stationarity { burn_in, lags, bootstrap, directions } => {
                if !(*burn_in >= 0.0) {
                    return bad("experiment.burn_in", "must be nonnegative".into());
                }
                if lags.is_empty() || lags.iter().any(|l| !(*l > 0.0)) {
                    return bad("experiment.lags", "must be a nonempty list of positive lags".into());
                }
                if burn_in + lags.iter().cloned().fold(0.0, f64::max) > s.horizon * (1.0 + 1e-12) {
                    return bad("experiment.lags", "burn_in plus the largest lag exceeds scheme.T".into());
                }
                estimator_checks(*bootstrap, *directions)?;
            }
            Experiment::LiftIndependence { basis_b, bootstrap, directions, .. } => {
                basis_b.build("experiment.basis_b")?;
                estimator_checks(*bootstrap, *directions)?;
            }
            Experiment::IpmConvergence { ladder, bootstrap, directions, .. } => {
                if ladder.len() < 2 || ladder.contains(&0) || ladder.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("experiment.ladder", "need at least two strictly increasing rungs".into());
                }
                estimator_checks(*bootstrap, *directions)?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn estimator_checks(bootstrap: usize, directions: usize) -> Result<()> {
    if bootstrap < 2 {
        return Err(Error::invalid("cli", "experiment.bootstrap", "need at least 2 replicates"));
    }
    if directions == 0 {
        return Err(Error::invalid("cli", "experiment.directions", "must be positive"));
    }
    Ok(())
}
