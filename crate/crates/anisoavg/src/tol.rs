//! Central numerical tolerances and floors.
//!
//! Every tolerance that appears in more than one place, or that encodes a
//! structural contract rather than a local convenience, lives here so the
//! relationships between them stay visible.

/// Default local-error-per-unit-time target for flow integration.
pub const FLOW_TOL: f64 = 1e-12;

/// Allowed divergence magnitude for fields declared divergence-free.
pub const DIV_FREE_TOL: f64 = 1e-10;

/// Symmetry slack for fields declared symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Step for central differences on user-supplied analytic fields,
/// scaled by `(1 + |y|)`.
pub const CENTRAL_DIFF_H: f64 = 1e-5;

/// Transport-law and bracket agreement tolerance for smooth fields.
pub const TRANSPORT_TOL: f64 = 1e-6;

/// Orbit closure defect allowed for a periodic orbit discretization.
pub const ORBIT_CLOSURE_TOL: f64 = 1e-8;

/// Orbits with base radius at or below this are excluded: the rotation frame
/// `R(y)` is singular at the origin.
pub const ORBIT_EXCLUSION_RADIUS: f64 = 1e-3;

/// Nodes per closed orbit. Periodic trapezoid quadrature at this resolution
/// is spectrally accurate for the band-limited integrands used throughout.
pub const ORBIT_NODES: usize = 256;

/// Eigenvalue floor when forming `Q^{1/2}` from a positive definite `Q`.
pub const EIG_FLOOR: f64 = 1e-14;

/// Maximum condition number accepted for the frame reconstruction system.
pub const FRAME_COND_MAX: f64 = 1e6;

/// Solvability slack: orbit-mean magnitude allowed for cell-problem inputs.
pub const CELL_MEAN_TOL: f64 = 1e-8;

/// Largest deviation tolerated in the frame transport identities
/// `b·∇u₀ = 1`, `b·∇u₁ = 0` at orbit nodes.
pub const FRAME_TOL: f64 = 1e-8;

/// Relative residual target for conjugate-gradient solves.
pub const PCG_TOL: f64 = 1e-10;

/// Iteration cap factor for conjugate gradients: `10 * n` for an `n`-unknown
/// system.
pub const PCG_ITER_FACTOR: usize = 10;

/// Multiplicative slack on the energy-bound diagnostics: discretization is
/// granted 10%.
pub const BOUND_SLACK: f64 = 1.1;

/// Grid anisotropy floor constant: quantities that vanish for the continuous
/// problem but not for its grid discretization are compared against
/// `ANGULAR_FLOOR_C * h^2 * scale`.
pub const ANGULAR_FLOOR_C: f64 = 10.0;
