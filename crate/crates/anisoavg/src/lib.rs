//! Averaging of strongly anisotropic diffusion along divergence-free flows.
//!
//! The library computes the averaged diffusion tensor of a matrix field `D`
//! along the characteristic flow of a divergence-free vector field `b`, by two
//! independent routes (a closed-form conjugation average and a relaxation
//! evolution), builds the second-order corrector fields `E` and `F` from orbit
//! cell problems, and time-integrates both the stiff problem
//! `∂_t u = div(D ∇u) + (1/ε) div(b⊗b ∇u)` and its averaged limit on a 2-D
//! box with no-flux boundaries.
//!
//! Modules:
//! - [`fields`]: evaluable vector/matrix fields, the characteristic flow and
//!   its Jacobian, first/second-order brackets.
//! - [`averaging`]: orbit averages, the unitary group `G(s)` with generator
//!   `L`, weighted positive parts, and the averaged tensor.
//! - [`corrector`]: orbit cell problems for `E = L(F)`, `L(E) = ⟨D⟩_Q − D`,
//!   and the corrector `div(F ∇u)`.
//! - [`solver`]: bilinear finite elements, implicit/explicit stepping, and
//!   energy diagnostics.
//! - [`cli`]: config parsing and the reference/convergence/corrector
//!   experiment drivers behind the `anisoavg` binary.

pub mod averaging;
pub mod cli;
pub mod corrector;
pub mod expr;
pub mod fields;
pub mod linalg;
pub mod par;
pub mod randfield;
pub mod solver;
pub mod tol;

/// Spatial dimension of the reference implementation. Formulas are written
/// for general `m`; the frame construction in [`corrector`] is only exhibited
/// for the planar case.
pub const DIM: usize = 2;

/// A point or vector in `DIM` dimensions.
pub type Vector = [f64; DIM];

/// Errors shared across modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("trajectory from y = ({0:.6}, {1:.6}) left the guard box (radius {2:.3})")]
    OrbitEscape(f64, f64, f64),
    #[error("orbit average did not converge: horizon {horizon:.3e}, last increment {increment:.3e}")]
    NonConvergentAverage { horizon: f64, increment: f64 },
    #[error("relaxation step rejected {0} times; |A|_Q would grow at dt = {1:.3e}")]
    RelaxationStalled(usize, f64),
    #[error("cell problem input has nonzero orbit mean {0:.3e} (tolerance {1:.3e})")]
    NonzeroMean(f64, f64),
    #[error("frame reconstruction ill-conditioned on orbit r = {0:.6} (cond {1:.3e})")]
    FrameDegenerate(f64, f64),
    #[error("averaged tensor inconsistent with field on orbit r = {0:.6} (gap {1:.3e})")]
    FrameInconsistent(f64, f64),
    #[error("operation requires a flow whose orbits are closed with a known common period")]
    UnsupportedFlow,
    #[error("the conjugation route to the averaged tensor requires the frame R with Q = ᵗR R")]
    FrameRequired,
    #[error("weight spec invalid: {0}")]
    WeightInvalid(String),
    #[error("field sample does not cover radius {0:.6} (range [{1:.6}, {2:.6}])")]
    RadiusOutOfRange(f64, f64, f64),
    #[error("linear solver stalled: {iterations} iterations, relative residual {residual:.3e}")]
    LinearSolveFailed { iterations: usize, residual: f64 },
    #[error("coefficient tensor is not uniformly elliptic on the grid (min eigenvalue {0:.3e})")]
    Ellipticity(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
