//! Orbit cell problems for the second-order decomposition of the diffusion
//! operator and the first-order corrector `w¹ = div(F∇u)`.
//!
//! Along each closed orbit the scalar cell problems
//!
//! ```text
//! −b·∇(E∇u_i·∇u_j) = D∇u_i·∇u_j − ⟨D∇u_i·∇u_j⟩,   ⟨E∇u_i·∇u_j⟩ = 0,
//!  b·∇(F∇u_i·∇u_j) = E∇u_i·∇u_j,                  ⟨F∇u_i·∇u_j⟩ = 0,
//! ```
//!
//! determine the frame entries of the matrix fields `E = L(F)` and `F` with
//! `L(L(F)) = ⟨D⟩_Q − D`; the matrices are then reconstructed pointwise from
//! the gradient frame `{∇u₀, ∇u₁}` of the orbit parametrization. Everything
//! here is restricted to flows whose orbits are closed: the antiderivatives
//! are taken spectrally in the orbit parameter, which is where the
//! construction is explicit.

use crate::averaging::{MatrixFieldSample, OrbitFamily};
use crate::fields::{MatrixFieldSpec, VectorFieldSpec};
use crate::linalg::{self, Matrix};
use crate::par;
use crate::randfield;
use crate::solver::Grid2D;
use crate::tol;
use crate::{Error, Result, Vector};
use std::io::Write;

fn trig_tables(n: usize) -> (Vec<f64>, Vec<f64>) {
    let step = 2.0 * std::f64::consts::PI / n as f64;
    (0..n)
        .map(|k| {
            let a = step * k as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

/// Solves the scalar cell problem `dg/ds = h`, `⟨g⟩ = 0` on one closed orbit
/// sampled at `n` uniform nodes: direct Fourier projection, mode `k` divided
/// by `i·k·(2π/period)`. The unrepresentable Nyquist mode is dropped (its
/// sine antiderivative vanishes at every node); smooth orbit data carries
/// none. The mean mode must vanish for solvability.
pub fn zero_mean_antiderivative(h: &[f64], period: f64) -> Result<Vec<f64>> {
    let n = h.len();
    assert!(n >= 4 && n % 2 == 0, "orbit sampling must be even, got {n}");
    assert!(period > 0.0);
    let mean = h.iter().sum::<f64>() / n as f64;
    if mean.abs() > tol::CELL_MEAN_TOL {
        return Err(Error::NonzeroMean(mean, tol::CELL_MEAN_TOL));
    }
    let (cos_t, sin_t) = trig_tables(n);
    let mut g = vec![0.0; n];
    for m in 1..n / 2 {
        let mut cm = 0.0;
        let mut sm = 0.0;
        for (j, hj) in h.iter().enumerate() {
            let idx = (m * j) % n;
            cm += hj * cos_t[idx];
            sm += hj * sin_t[idx];
        }
        cm *= 2.0 / n as f64;
        sm *= 2.0 / n as f64;
        // ∫cos(ωs) = sin(ωs)/ω and ∫sin(ωs) = −cos(ωs)/ω.
        let omega = 2.0 * std::f64::consts::PI * m as f64 / period;
        for (j, gj) in g.iter_mut().enumerate() {
            let idx = (m * j) % n;
            *gj += (cm * sin_t[idx] - sm * cos_t[idx]) / omega;
        }
    }
    let deriv = spectral_derivative(&g, period);
    let scale = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let worst = deriv
        .iter()
        .zip(h)
        .map(|(dv, hv)| (dv - (hv - mean)).abs())
        .fold(0.0, f64::max);
    assert!(
        worst <= 1e-6 * (1.0 + scale),
        "antiderivative failed its spectral check: defect {worst:.3e} (input undersampled?)"
    );
    Ok(g)
}

/// Spectral derivative `dg/ds` of uniform samples along a closed orbit.
pub fn spectral_derivative(g: &[f64], period: f64) -> Vec<f64> {
    let n = g.len();
    assert!(n >= 4 && n % 2 == 0);
    let (cos_t, sin_t) = trig_tables(n);
    let mut d = vec![0.0; n];
    for m in 1..n / 2 {
        let mut cm = 0.0;
        let mut sm = 0.0;
        for (j, gj) in g.iter().enumerate() {
            let idx = (m * j) % n;
            cm += gj * cos_t[idx];
            sm += gj * sin_t[idx];
        }
        cm *= 2.0 / n as f64;
        sm *= 2.0 / n as f64;
        let omega = 2.0 * std::f64::consts::PI * m as f64 / period;
        for (j, dj) in d.iter_mut().enumerate() {
            let idx = (m * j) % n;
            *dj += omega * (sm * cos_t[idx] - cm * sin_t[idx]);
        }
    }
    d
}

/// Gradients of the orbit parametrization at family nodes: `u₀` is the
/// angular generator with `b·∇u₀ = 1` (kept only through its single-valued
/// gradient), `u₁` the prime integral with `b·∇u₁ = 0`.
#[derive(Clone, Debug)]
pub struct FrameFields {
    pub grad0: Vec<Vector>,
    pub grad1: Vec<Vector>,
}

/// Condition number of a 2×2 matrix in the spectral norm.
fn cond_2x2(g: &Matrix) -> f64 {
    let gram = g.transpose().mul(g);
    let (vals, _) = gram.sym_eigen();
    let (lo, hi) = (vals[0].min(vals[1]), vals[0].max(vals[1]));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).sqrt()
    }
}

impl FrameFields {
    pub fn from_fns(
        family: &OrbitFamily,
        g0: impl Fn(&Vector) -> Vector + Sync,
        g1: impl Fn(&Vector) -> Vector + Sync,
    ) -> FrameFields {
        let na = family.n_angles;
        let grad0 = par::map_indexed(family.n_nodes(), |idx| {
            g0(family.node(idx / na, idx % na))
        });
        let grad1 = par::map_indexed(family.n_nodes(), |idx| {
            g1(family.node(idx / na, idx % na))
        });
        FrameFields { grad0, grad1 }
    }

    /// Frame of the planar rotation: `∇u₀ = b/|y|²` (from `u₀ = −θ`) and
    /// `∇u₁ = y` (from `u₁ = |y|²/2`).
    pub fn rotation(family: &OrbitFamily) -> FrameFields {
        Self::from_fns(
            family,
            |y| {
                let r2 = y[0] * y[0] + y[1] * y[1];
                [y[1] / r2, -y[0] / r2]
            },
            |y| *y,
        )
    }

    /// Checks the transport identities `b·∇u₀ = 1`, `b·∇u₁ = 0` and the
    /// pointwise independence of the gradient pair at every node.
    pub fn verify(&self, family: &OrbitFamily, b: &VectorFieldSpec) -> Result<()> {
        for ring in 0..family.rings.len() {
            let radius = family.rings[ring].radius;
            for k in 0..family.n_angles {
                let idx = family.index(ring, k);
                let bv = b.eval(family.node(ring, k));
                let t0 = linalg::dot(&bv, &self.grad0[idx]) - 1.0;
                let t1 = linalg::dot(&bv, &self.grad1[idx]);
                let gap = t0.abs().max(t1.abs());
                if gap > tol::FRAME_TOL {
                    return Err(Error::FrameInconsistent(radius, gap));
                }
                let cond = cond_2x2(&Matrix([
                    [self.grad0[idx][0], self.grad1[idx][0]],
                    [self.grad0[idx][1], self.grad1[idx][1]],
                ]));
                if !(cond <= tol::FRAME_COND_MAX) {
                    return Err(Error::FrameDegenerate(radius, cond));
                }
            }
        }
        Ok(())
    }
}

/// The corrector pair on an orbit family: sampled symmetric matrices `E`,
/// `F`, their scalar frame entries, and the orbits the reconstruction
/// refused (their matrix samples stay zero; the frame entries, which do not
/// need the reconstruction, are kept).
#[derive(Clone, Debug)]
pub struct CorrectorFields {
    pub e: MatrixFieldSample,
    pub f: MatrixFieldSample,
    /// Scalar frame entries for the index pairs `(0,0), (0,1), (1,1)`, in
    /// family node order.
    pub e_frame: [Vec<f64>; 3],
    pub f_frame: [Vec<f64>; 3],
    /// `(radius, condition estimate)` per skipped orbit.
    pub skipped: Vec<(f64, f64)>,
}

impl CorrectorFields {
    /// Orbit means of the six frame entries per ring, ordered
    /// `e₀₀, e₀₁, e₁₁, f₀₀, f₀₁, f₁₁`. All six vanish for exact cell
    /// solutions; the largest magnitude is the normalization check.
    pub fn orbit_means(&self, family: &OrbitFamily) -> Vec<[f64; 6]> {
        let na = family.n_angles as f64;
        (0..family.rings.len())
            .map(|ring| {
                let mut row = [0.0; 6];
                for k in 0..family.n_angles {
                    let idx = family.index(ring, k);
                    for p in 0..3 {
                        row[p] += self.e_frame[p][idx];
                        row[3 + p] += self.f_frame[p][idx];
                    }
                }
                for v in &mut row {
                    *v /= na;
                }
                row
            })
            .collect()
    }

    pub fn max_orbit_mean(&self, family: &OrbitFamily) -> f64 {
        self.orbit_means(family)
            .iter()
            .flatten()
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Columnar serialization of both samples, one row per node per field,
    /// tagged by a leading `field` column.
    pub fn write_columnar(
        &self,
        family: &OrbitFamily,
        weight_id: &str,
        out: &mut impl Write,
    ) -> std::io::Result<()> {
        writeln!(
            out,
            "# grid={}x{} weight={} columns=field,y1,y2,A11,A12,A22",
            family.rings.len(),
            family.n_angles,
            weight_id
        )?;
        for (label, sample) in [("E", &self.e), ("F", &self.f)] {
            for (idx, v) in sample.values.iter().enumerate() {
                let y = family.node(idx / family.n_angles, idx % family.n_angles);
                writeln!(
                    out,
                    "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                    label, y[0], y[1], v.0[0][0], v.0[0][1], v.0[1][1]
                )?;
            }
        }
        Ok(())
    }
}

/// Per-orbit output of the cell solve, collected before assembly.
struct RingCorrector {
    e_vals: Vec<Matrix>,
    f_vals: Vec<Matrix>,
    e_rows: [Vec<f64>; 3],
    f_rows: [Vec<f64>; 3],
    skipped: Option<(f64, f64)>,
}

/// Solves the cell problems on every orbit of the family and reconstructs
/// `E` and `F` at each node from their frame entries.
///
/// `davg` must be the averaged tensor of `d` on the same family: the frame
/// entries of an averaged tensor are orbit constants equal to the orbit
/// means of the entries of `d`, and that consistency is checked before the
/// cell problems are solved. An orbit whose pointwise reconstruction system
/// is ill-conditioned (degenerate gradient frame) is skipped and reported
/// in the result rather than failing the whole family.
pub fn compute_corrector_frame(
    d: &MatrixFieldSpec,
    davg: &MatrixFieldSample,
    frame: &FrameFields,
    family: &OrbitFamily,
) -> Result<CorrectorFields> {
    assert_eq!(davg.values.len(), family.n_nodes(), "sample shape mismatch");
    let na = family.n_angles;
    let per_ring: Vec<Result<RingCorrector>> =
        par::map_indexed(family.rings.len(), |ring| {
            let rg = &family.rings[ring];
            // Frame entries of D along the orbit.
            let mut entries = [const { Vec::new() }; 3];
            for k in 0..na {
                let idx = family.index(ring, k);
                let dm = d.eval(family.node(ring, k));
                let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
                entries[0].push(dm.quad(g0, g0));
                entries[1].push(dm.quad(g0, g1));
                entries[2].push(dm.quad(g1, g1));
            }
            let mut means = [0.0; 3];
            for p in 0..3 {
                means[p] = entries[p].iter().sum::<f64>() / na as f64;
            }
            // The supplied average must reproduce those means through the
            // same frame at every node.
            for k in 0..na {
                let idx = family.index(ring, k);
                let am = &davg.values[idx];
                let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
                let want = [am.quad(g0, g0), am.quad(g0, g1), am.quad(g1, g1)];
                for p in 0..3 {
                    let gap = (want[p] - means[p]).abs();
                    if gap > 1e-6 * (1.0 + means[p].abs()) {
                        return Err(Error::FrameInconsistent(rg.radius, gap));
                    }
                }
            }
            // Cell problems: e = −antiderivative of the fluctuation,
            // f = antiderivative of e, both with zero orbit mean.
            let mut e_rows = [const { Vec::new() }; 3];
            let mut f_rows = [const { Vec::new() }; 3];
            for p in 0..3 {
                let fluct: Vec<f64> =
                    entries[p].iter().map(|v| v - means[p]).collect();
                let minus_e = zero_mean_antiderivative(&fluct, rg.period)?;
                let e_p: Vec<f64> = minus_e.iter().map(|v| -v).collect();
                let f_p = zero_mean_antiderivative(&e_p, rg.period)?;
                e_rows[p] = e_p;
                f_rows[p] = f_p;
            }
            // Pointwise reconstruction through the gradient frame: three
            // equations for the three entries of a symmetric matrix.
            let mut e_vals = vec![Matrix::zero(); na];
            let mut f_vals = vec![Matrix::zero(); na];
            let mut skipped = None;
            for k in 0..na {
                let idx = family.index(ring, k);
                let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
                let rows: Vec<Vec<f64>> = [(g0, g0), (g0, g1), (g1, g1)]
                    .iter()
                    .map(|(a, b)| {
                        vec![a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[1] * b[1]]
                    })
                    .collect();
                let e_rhs = [e_rows[0][k], e_rows[1][k], e_rows[2][k]];
                let f_rhs = [f_rows[0][k], f_rows[1][k], f_rows[2][k]];
                let sol = linalg::solve_dense(&rows, &e_rhs)
                    .zip(linalg::solve_dense(&rows, &f_rhs));
                match sol {
                    Some(((ex, cond), (fx, _))) if cond <= tol::FRAME_COND_MAX => {
                        e_vals[k] = Matrix([[ex[0], ex[1]], [ex[1], ex[2]]]);
                        f_vals[k] = Matrix([[fx[0], fx[1]], [fx[1], fx[2]]]);
                    }
                    other => {
                        let cond = other.map_or(f64::INFINITY, |((_, c), _)| c);
                        skipped = Some((rg.radius, cond));
                        e_vals.iter_mut().for_each(|m| *m = Matrix::zero());
                        f_vals.iter_mut().for_each(|m| *m = Matrix::zero());
                        break;
                    }
                }
            }
            Ok(RingCorrector {
                e_vals,
                f_vals,
                e_rows,
                f_rows,
                skipped,
            })
        });

    let mut e_values = Vec::with_capacity(family.n_nodes());
    let mut f_values = Vec::with_capacity(family.n_nodes());
    let mut e_frame = [const { Vec::new() }; 3];
    let mut f_frame = [const { Vec::new() }; 3];
    let mut skipped = Vec::new();
    for out in per_ring {
        let mut out = out?;
        e_values.append(&mut out.e_vals);
        f_values.append(&mut out.f_vals);
        for p in 0..3 {
            e_frame[p].append(&mut out.e_rows[p]);
            f_frame[p].append(&mut out.f_rows[p]);
        }
        if let Some(s) = out.skipped {
            skipped.push(s);
        }
    }
    Ok(CorrectorFields {
        e: MatrixFieldSample { values: e_values },
        f: MatrixFieldSample { values: f_values },
        e_frame,
        f_frame,
        skipped,
    })
}

/// Compactly supported test function `φ(r)·cos(kθ + phase)` on the annulus
/// `r_lo < |y| < r_hi`, with `φ` an `amplitude`-scaled smooth bump. Angular
/// derivatives are taken along the unit clockwise rotation `b = (y₂, −y₁)`,
/// for which `b·∇ = −∂_θ`.
#[derive(Clone, Copy, Debug)]
pub struct PolarBump {
    pub harmonic: usize,
    pub phase: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub amplitude: f64,
}

impl PolarBump {
    pub fn new(harmonic: usize, phase: f64, r_lo: f64, r_hi: f64, amplitude: f64) -> Self {
        assert!(0.0 < r_lo && r_lo < r_hi);
        PolarBump {
            harmonic,
            phase,
            r_lo,
            r_hi,
            amplitude,
        }
    }

    /// Radial profile and its derivative.
    fn radial(&self, r: f64) -> (f64, f64) {
        let w = self.r_hi - self.r_lo;
        let t = (r - self.r_lo) / w;
        (
            self.amplitude * randfield::bump01(t),
            self.amplitude * randfield::bump01_deriv(t) / w,
        )
    }

    fn angle(&self, y: &Vector) -> f64 {
        self.harmonic as f64 * y[1].atan2(y[0]) + self.phase
    }

    pub fn value(&self, y: &Vector) -> f64 {
        let (phi, _) = self.radial(linalg::norm(y));
        phi * self.angle(y).cos()
    }

    pub fn gradient(&self, y: &Vector) -> Vector {
        let r = linalg::norm(y);
        let (phi, dphi) = self.radial(r);
        if phi == 0.0 && dphi == 0.0 {
            return [0.0, 0.0];
        }
        let k = self.harmonic as f64;
        let a = self.angle(y);
        let rhat = [y[0] / r, y[1] / r];
        let that = [-y[1] / r, y[0] / r];
        let radial = dphi * a.cos();
        let angular = -k * phi * a.sin() / r;
        [
            radial * rhat[0] + angular * that[0],
            radial * rhat[1] + angular * that[1],
        ]
    }

    /// `b·∇u = −∂_θ u`.
    pub fn angular_derivative(&self, y: &Vector) -> f64 {
        let (phi, _) = self.radial(linalg::norm(y));
        let k = self.harmonic as f64;
        k * phi * self.angle(y).sin()
    }

    /// `∇(b·∇u)`.
    pub fn gradient_angular(&self, y: &Vector) -> Vector {
        let r = linalg::norm(y);
        let (phi, dphi) = self.radial(r);
        if phi == 0.0 && dphi == 0.0 {
            return [0.0, 0.0];
        }
        let k = self.harmonic as f64;
        let a = self.angle(y);
        let rhat = [y[0] / r, y[1] / r];
        let that = [-y[1] / r, y[0] / r];
        let radial = k * dphi * a.sin();
        let angular = k * k * phi * a.cos() / r;
        [
            radial * rhat[0] + angular * that[0],
            radial * rhat[1] + angular * that[1],
        ]
    }

    /// `b·∇(b·∇u) = −k² u`.
    pub fn second_angular(&self, y: &Vector) -> f64 {
        let k = self.harmonic as f64;
        -k * k * self.value(y)
    }

    /// `∇(b·∇(b·∇u)) = −k² ∇u`.
    pub fn gradient_second_angular(&self, y: &Vector) -> Vector {
        let k = self.harmonic as f64;
        linalg::scale(&self.gradient(y), -k * k)
    }
}

/// The fixed battery of test-function pairs used by the decomposition
/// residual checks: five bump pairs spanning harmonics 0 through 4 with
/// staggered annular supports inside `0.5 < |y| < 2.6`.
pub fn bump_battery() -> [(PolarBump, PolarBump); 5] {
    [
        (
            PolarBump::new(2, 0.3, 0.6, 1.6, 1.0),
            PolarBump::new(3, 1.1, 0.9, 2.1, 0.8),
        ),
        (
            PolarBump::new(1, 0.0, 0.5, 1.5, 1.2),
            PolarBump::new(1, 0.7, 0.8, 2.4, 1.0),
        ),
        (
            PolarBump::new(0, 0.0, 0.7, 2.0, 1.0),
            PolarBump::new(2, 0.2, 0.7, 2.0, 1.0),
        ),
        (
            PolarBump::new(4, 2.0, 1.0, 2.6, 0.6),
            PolarBump::new(2, -0.4, 0.8, 2.2, 1.0),
        ),
        (
            PolarBump::new(3, -1.2, 0.6, 2.3, 0.9),
            PolarBump::new(0, 0.0, 0.9, 2.5, 1.1),
        ),
    ]
}

/// First-order corrector `w¹ = div(F∇u)` on the solver grid by centered
/// second-order differences, zero on the boundary ring.
///
/// The flux `F∇u` interpolates `F` from its orbit family. Where the grid
/// leaves the family's radial span the gradient of `u` must be negligible
/// (≤ 1e−10 of its largest magnitude, the compact-support contract);
/// otherwise the family's radius range is reported as an error.
pub fn corrector_field(
    cf: &CorrectorFields,
    family: &OrbitFamily,
    grid: &Grid2D,
    u: &[f64],
) -> Result<Vec<f64>> {
    assert_eq!(u.len(), grid.n_nodes());
    let n = grid.n;
    let h = grid.h;
    let grads: Vec<Vector> = par::map_indexed(grid.n_nodes(), |idx| {
        let (i, j) = (idx % n, idx / n);
        if grid.is_boundary(i, j) {
            return [0.0, 0.0];
        }
        [
            (u[grid.idx(i + 1, j)] - u[grid.idx(i - 1, j)]) / (2.0 * h),
            (u[grid.idx(i, j + 1)] - u[grid.idx(i, j - 1)]) / (2.0 * h),
        ]
    });
    let gmax = grads.iter().map(linalg::norm).fold(0.0, f64::max);
    let radii = family.radii();
    let (r_lo, r_hi) = (radii[0], radii[radii.len() - 1]);
    let flux_res: Vec<Result<Vector>> = par::map_indexed(grid.n_nodes(), |idx| {
        let g = grads[idx];
        let gn = linalg::norm(&g);
        if gn == 0.0 {
            return Ok([0.0, 0.0]);
        }
        let y = grid.point(idx % n, idx / n);
        let r = linalg::norm(&y);
        if r < r_lo - 1e-9 || r > r_hi + 1e-9 {
            if gn <= 1e-10 * gmax {
                return Ok([0.0, 0.0]);
            }
            return Err(Error::RadiusOutOfRange(r, r_lo, r_hi));
        }
        Ok(cf.f.interpolate(family, &y)?.apply(&g))
    });
    let mut flux = Vec::with_capacity(grid.n_nodes());
    for q in flux_res {
        flux.push(q?);
    }
    Ok(par::map_indexed(grid.n_nodes(), |idx| {
        let (i, j) = (idx % n, idx / n);
        if grid.is_boundary(i, j) {
            return 0.0;
        }
        (flux[grid.idx(i + 1, j)][0] - flux[grid.idx(i - 1, j)][0]) / (2.0 * h)
            + (flux[grid.idx(i, j + 1)][1] - flux[grid.idx(i, j - 1)][1]) / (2.0 * h)
    }))
}

/// Quadrature residual of the decomposition's weak identity
///
/// ```text
/// ∫(D − ⟨D⟩_Q)∇u·∇v + ∫F∇(T²u)·∇v + 2∫F∇(Tu)·∇(Tv) + ∫F∇u·∇(T²v) = 0,
/// ```
///
/// `T = b·∇`, normalized by the largest term's absolute-integrand sum, with
/// the first term taken before the subtraction (`|D∇u·∇v| + |⟨D⟩_Q∇u·∇v|`)
/// so that exactly satisfied instances report machine-level residuals
/// instead of noise ratios. The four integrands sum pointwise to `T` of a
/// compactly supported quantity, so the residual vanishes to quadrature
/// accuracy when `E = L(F)` and `L(E) = ⟨D⟩_Q − D` hold on the family.
/// Returns zero when the test functions never overlap the data.
pub fn verify_decomposition(
    d: &MatrixFieldSpec,
    davg: &MatrixFieldSample,
    f: &MatrixFieldSample,
    family: &OrbitFamily,
    b: &VectorFieldSpec,
    u: &PolarBump,
    v: &PolarBump,
) -> f64 {
    let weights = family.area_weights(b);
    let mut terms = [0.0f64; 4];
    let mut mags = [0.0f64; 4];
    for ring in 0..family.rings.len() {
        for k in 0..family.n_angles {
            let idx = family.index(ring, k);
            let y = family.node(ring, k);
            let w = weights[idx];
            let du = u.gradient(y);
            let dv = v.gradient(y);
            let fm = &f.values[idx];
            let dm = d.eval(y);
            let am = &davg.values[idx];
            let contribs = [
                dm.sub(am).quad(&du, &dv),
                fm.quad(&u.gradient_second_angular(y), &dv),
                2.0 * fm.quad(&u.gradient_angular(y), &v.gradient_angular(y)),
                fm.quad(&du, &v.gradient_second_angular(y)),
            ];
            for (p, c) in contribs.iter().enumerate() {
                terms[p] += w * c;
            }
            mags[0] += w * (dm.quad(&du, &dv).abs() + am.quad(&du, &dv).abs());
            for (p, c) in contribs.iter().enumerate().skip(1) {
                mags[p] += w * c.abs();
            }
        }
    }
    let scale = mags.iter().fold(0.0f64, |a, v| a.max(*v));
    if scale == 0.0 {
        return 0.0;
    }
    terms.iter().sum::<f64>().abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::{averaged_matrix_explicit, generator_l, WeightSpec};
    use crate::expr::parse;
    use crate::fields::{bracket_vv, FlowMap};
    use std::f64::consts::PI;

    fn rotation_flow() -> FlowMap {
        FlowMap::new(VectorFieldSpec::rotation(), tol::FLOW_TOL, 4.0)
    }

    fn family(r_lo: f64, r_hi: f64, n_rings: usize, n_angles: usize) -> OrbitFamily {
        OrbitFamily::uniform(&rotation_flow(), r_lo, r_hi, n_rings, n_angles).unwrap()
    }

    fn sampled(h: impl Fn(f64) -> f64, n: usize) -> Vec<f64> {
        (0..n).map(|j| h(2.0 * PI * j as f64 / n as f64)).collect()
    }

    #[test]
    fn antiderivative_closed_forms() {
        let n = 256;
        let g = zero_mean_antiderivative(&sampled(f64::cos, n), 2.0 * PI).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let s = 2.0 * PI * j as f64 / n as f64;
            assert!((gj - s.sin()).abs() < 1e-12);
        }
        let zero = zero_mean_antiderivative(&vec![0.0; n], 2.0 * PI).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-15));
        let g = zero_mean_antiderivative(
            &sampled(|s| (2.0 * s).cos() + s.sin(), n),
            2.0 * PI,
        )
        .unwrap();
        for (j, gj) in g.iter().enumerate() {
            let s = 2.0 * PI * j as f64 / n as f64;
            assert!((gj - ((2.0 * s).sin() / 2.0 - s.cos())).abs() < 1e-12);
        }
    }

    #[test]
    fn antiderivative_rejects_nonzero_mean() {
        let err =
            zero_mean_antiderivative(&sampled(|s| 0.5 + s.cos(), 64), 2.0 * PI).unwrap_err();
        match err {
            Error::NonzeroMean(measured, limit) => {
                assert!((measured - 0.5).abs() < 1e-12);
                assert_eq!(limit, tol::CELL_MEAN_TOL);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn antiderivative_respects_period() {
        // dg/ds = h with period 4π: mode 1 divides by 1/2.
        let n = 128;
        let period = 4.0 * PI;
        let h: Vec<f64> = (0..n)
            .map(|j| (2.0 * PI * j as f64 / n as f64).cos())
            .collect();
        // Samples of cos(ω s) with ω = 2π/period = 1/2 at s_j = j·period/n.
        let g = zero_mean_antiderivative(&h, period).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let s = period * j as f64 / n as f64;
            assert!((gj - 2.0 * (0.5 * s).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_derivative_matches() {
        let n = 256;
        let g = sampled(|s| (3.0 * s).sin() + 0.4 * s.cos(), n);
        let d = spectral_derivative(&g, 2.0 * PI);
        for (j, dj) in d.iter().enumerate() {
            let s = 2.0 * PI * j as f64 / n as f64;
            assert!((dj - (3.0 * (3.0 * s).cos() - 0.4 * s.sin())).abs() < 1e-11);
        }
    }

    #[test]
    fn rotation_frame_satisfies_transport_identities() {
        let fam = family(0.4, 2.8, 12, 128);
        let frame = FrameFields::rotation(&fam);
        frame.verify(&fam, &VectorFieldSpec::rotation()).unwrap();
        // A degenerate frame (parallel gradients) is refused.
        let broken = FrameFields::from_fns(&fam, |y| *y, |y| linalg::scale(y, 2.0));
        assert!(matches!(
            broken.verify(&fam, &VectorFieldSpec::rotation()),
            Err(Error::FrameInconsistent(..))
        ));
        // Transport-consistent but hopelessly ill-conditioned: scaling the
        // prime-integral gradient keeps b·∇u₁ = 0 while blowing up the
        // pointwise condition number.
        let skewed = FrameFields::from_fns(
            &fam,
            |y| {
                let r2 = y[0] * y[0] + y[1] * y[1];
                [y[1] / r2, -y[0] / r2]
            },
            |y| linalg::scale(y, 1e7),
        );
        assert!(matches!(
            skewed.verify(&fam, &VectorFieldSpec::rotation()),
            Err(Error::FrameDegenerate(..))
        ));
    }

    /// The cell chain on a pure fluctuation: for radial eigenvalue fields the
    /// frame entries of `D` fluctuate as second angular harmonics, and two
    /// antiderivatives turn the fluctuation into `fluct/4` with the sign
    /// flips of the cell problems cancelling one of the two minus signs.
    #[test]
    fn second_harmonic_frame_oracle() {
        let fam = family(0.5, 2.5, 10, 256);
        let fm = rotation_flow();
        let d = MatrixFieldSpec::diag(parse("2+cos(|y|)").unwrap(), parse("1").unwrap());
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        frame.verify(&fam, &VectorFieldSpec::rotation()).unwrap();
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        assert!(cf.skipped.is_empty());
        let na = fam.n_angles;
        for ring in 0..fam.rings.len() {
            for p in 0..3 {
                // Reference fluctuation directly from D.
                let vals: Vec<f64> = (0..na)
                    .map(|k| {
                        let idx = fam.index(ring, k);
                        let dm = d.eval(fam.node(ring, k));
                        let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
                        match p {
                            0 => dm.quad(g0, g0),
                            1 => dm.quad(g0, g1),
                            _ => dm.quad(g1, g1),
                        }
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / na as f64;
                let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0;
                for k in 0..na {
                    let idx = fam.index(ring, k);
                    let fluct = vals[k] - mean;
                    assert!(
                        (cf.f_frame[p][idx] - fluct / 4.0).abs() < 1e-11 * scale,
                        "ring {ring} pair {p}: f = {}, fluct/4 = {}",
                        cf.f_frame[p][idx],
                        fluct / 4.0
                    );
                }
            }
        }
        // E and F are symmetric samples with zero orbit-mean frame entries.
        assert!(cf.max_orbit_mean(&fam) < 1e-12);
        for m in cf.e.values.iter().chain(cf.f.values.iter()) {
            assert!(m.sub(&m.transpose()).max_abs() == 0.0);
        }
    }

    #[test]
    fn kernel_fields_have_zero_corrector() {
        let fam = family(0.6, 2.2, 6, 128);
        let fm = rotation_flow();
        let alpha = "1.5+0.3*sin(|y|)";
        let d = MatrixFieldSpec::diag(parse(alpha).unwrap(), parse(alpha).unwrap());
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        let scale = 2.0;
        assert!(cf.e.max_abs_diff(&MatrixFieldSample::zeros(&fam)) < 1e-12 * scale);
        assert!(cf.f.max_abs_diff(&MatrixFieldSample::zeros(&fam)) < 1e-12 * scale);
    }

    /// Manufactured solution: D = αI + ε L(L(G)) with G = g(r)·diag(1,−1).
    /// For the rotation Jacobian, L(L(G)) = −4G, so D = diag(α−g, α+g) at
    /// ε = 1/4, ⟨D⟩_Q = αI, and the recovered corrector is F = −εG (the
    /// unique zero-mean solution of L²F = ⟨D⟩_Q − D = 4εG·...).
    #[test]
    fn manufactured_corrector_recovered() {
        let fam = family(0.5, 2.6, 12, 256);
        let eps_m = 0.25;
        let g_of = |r: f64| 0.3 + 0.1 * r.sin();
        let alpha = |r: f64| 0.8 + 0.2 * r.cos();
        let d = MatrixFieldSpec::from_entries(
            [
                [
                    parse("0.8+0.2*cos(|y|)-(0.3+0.1*sin(|y|))").unwrap(),
                    parse("0").unwrap(),
                ],
                [
                    parse("0").unwrap(),
                    parse("0.8+0.2*cos(|y|)+(0.3+0.1*sin(|y|))").unwrap(),
                ],
            ],
            true,
            false,
        );
        let davg = MatrixFieldSample::from_fn(&fam, |y| {
            Matrix::identity().scale(alpha(linalg::norm(y)))
        });
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        let f_expected = MatrixFieldSample::from_fn(&fam, |y| {
            Matrix::diag(&[1.0, -1.0]).scale(-eps_m * g_of(linalg::norm(y)))
        });
        let e_expected = MatrixFieldSample::from_fn(&fam, |y| {
            Matrix([[0.0, 1.0], [1.0, 0.0]]).scale(-2.0 * eps_m * g_of(linalg::norm(y)))
        });
        let gap_f = cf.f.max_abs_diff(&f_expected);
        let gap_e = cf.e.max_abs_diff(&e_expected);
        assert!(gap_f < 1e-6 * 0.1, "F mismatch {gap_f:.3e}");
        assert!(gap_e < 1e-6, "E mismatch {gap_e:.3e}");
    }

    /// Adding a kernel element (a radial isotropic field) to F breaks the
    /// zero-orbit-mean normalization, which is how uniqueness shows up.
    #[test]
    fn perturbing_f_breaks_normalization() {
        let fam = family(0.5, 2.5, 8, 192);
        let fm = rotation_flow();
        let d = MatrixFieldSpec::diag(parse("2+cos(|y|)").unwrap(), parse("1").unwrap());
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        assert!(cf.max_orbit_mean(&fam) < 1e-8);
        let perturbed = cf
            .f
            .add_scaled(&MatrixFieldSample::from_fn(&fam, |_| Matrix::identity()), 0.3);
        // Frame entries of the perturbed field pick up the kernel's mean.
        let mut worst: f64 = 0.0;
        for ring in 0..fam.rings.len() {
            for p in 0..3 {
                let mut mean = 0.0;
                for k in 0..fam.n_angles {
                    let idx = fam.index(ring, k);
                    let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
                    mean += match p {
                        0 => perturbed.values[idx].quad(g0, g0),
                        1 => perturbed.values[idx].quad(g0, g1),
                        _ => perturbed.values[idx].quad(g1, g1),
                    };
                }
                worst = worst.max((mean / fam.n_angles as f64).abs());
            }
        }
        assert!(worst > 1e-4, "perturbation invisible: {worst:.3e}");
    }

    /// The sampled-field generator applied to F reproduces E, and applied to
    /// E reproduces ⟨D⟩_Q − D. The step 1e−3 keeps the O(h²) truncation of
    /// the symmetric difference below the stacked tolerances.
    #[test]
    fn generator_chain_reaches_back_to_d() {
        let fam = family(0.6, 2.4, 8, 256);
        let fm = rotation_flow();
        let d = MatrixFieldSpec::diag(
            parse("2+cos(|y|)").unwrap(),
            parse("1+0.2*sin(|y|)").unwrap(),
        );
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        let h = 1e-3;
        let lf = generator_l(&fam, &cf.f, &fm, h).unwrap();
        let gap_e = lf.max_abs_diff(&cf.e);
        assert!(gap_e < 1e-5, "L(F) vs E: {gap_e:.3e}");
        let le = generator_l(&fam, &cf.e, &fm, h).unwrap();
        let target = davg.add_scaled(&MatrixFieldSample::from_spec(&fam, &d), -1.0);
        let gap_d = le.max_abs_diff(&target);
        assert!(gap_d < 1e-4, "L(E) vs ⟨D⟩−D: {gap_d:.3e}");
    }

    fn grad_fd(f: &impl Fn(&Vector) -> f64, y: &Vector, h: f64) -> Vector {
        let mut g = [0.0; 2];
        for a in 0..2 {
            let mut yp = *y;
            let mut ym = *y;
            yp[a] += h;
            ym[a] -= h;
            g[a] = (f(&yp) - f(&ym)) / (2.0 * h);
        }
        g
    }

    /// Second-order divergence form against the derivation form: at interior
    /// points, div(E∇u) equals div(R·ᵗE)·(ᵗR⁻¹∇u) plus the contraction of
    /// R E ᵗR with the second derivations along the columns of R⁻¹, all
    /// derivatives by central differences.
    #[test]
    fn change_of_coordinates_identity() {
        let e_field = MatrixFieldSpec::from_entries(
            [
                [
                    parse("1+0.5*cos(y1)").unwrap(),
                    parse("0.2*y1*y2").unwrap(),
                ],
                [
                    parse("0.2*y1*y2").unwrap(),
                    parse("2+0.4*sin(y2)").unwrap(),
                ],
            ],
            true,
            false,
        );
        let r_field = MatrixFieldSpec::rotation_frame();
        let u = |y: &Vector| (-0.5 * (y[0] * y[0] + y[1] * y[1])).exp() * (1.0 + 0.3 * y[0]);
        let h = 1e-4;
        for y in randfield::random_points(0.6, 2.2, 50, 20260823) {
            // Direct divergence of the flux E∇u.
            let flux = |z: &Vector, comp: usize| -> f64 {
                e_field.eval(z).apply(&grad_fd(&u, z, h))[comp]
            };
            let mut lhs = 0.0;
            for a in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[a] += h;
                ym[a] -= h;
                lhs += (flux(&yp, a) - flux(&ym, a)) / (2.0 * h);
            }
            // First-order part: row-divergence of R·ᵗE dotted with ᵗR⁻¹∇u.
            let rinv = r_field.eval(&y).inverse().unwrap();
            let w: Vector = {
                let g = grad_fd(&u, &y, h);
                [
                    rinv.0[0][0] * g[0] + rinv.0[1][0] * g[1],
                    rinv.0[0][1] * g[0] + rinv.0[1][1] * g[1],
                ]
            };
            let mut rhs = 0.0;
            for j in 0..2 {
                let mut div_j = 0.0;
                for a in 0..2 {
                    let mut yp = y;
                    let mut ym = y;
                    yp[a] += h;
                    ym[a] -= h;
                    let zp = r_field.eval(&yp).mul(&e_field.eval(&yp).transpose());
                    let zm = r_field.eval(&ym).mul(&e_field.eval(&ym).transpose());
                    div_j += (zp.0[j][a] - zm.0[j][a]) / (2.0 * h);
                }
                rhs += div_j * w[j];
            }
            // Second-order part: (R E ᵗR)_{ij} · Dif_i(Dif_j u), with
            // Dif_i = (i-th column of R⁻¹)·∇ re-evaluated at inner points.
            let r = r_field.eval(&y);
            let conj = r.mul(&e_field.eval(&y)).mul(&r.transpose());
            for i in 0..2 {
                for j in 0..2 {
                    let dif_j = |z: &Vector| -> f64 {
                        let ri = r_field.eval(z).inverse().unwrap();
                        let g = grad_fd(&u, z, h);
                        ri.0[0][j] * g[0] + ri.0[1][j] * g[1]
                    };
                    let ci = [rinv.0[0][i], rinv.0[1][i]];
                    let speed = linalg::norm(&ci);
                    let t = h / speed;
                    let zp = linalg::add(&y, &linalg::scale(&ci, t));
                    let zm = linalg::sub(&y, &linalg::scale(&ci, t));
                    rhs += conj.0[i][j] * (dif_j(&zp) - dif_j(&zm)) / (2.0 * t);
                }
            }
            assert!(
                (lhs - rhs).abs() < 1e-5 * (1.0 + lhs.abs()),
                "mismatch at ({:.3}, {:.3}): {lhs:.8e} vs {rhs:.8e}",
                y[0],
                y[1]
            );
        }
    }

    /// The columns of R⁻¹ commute with the flow field for the rotation
    /// frame: both are invariant derivations.
    #[test]
    fn frame_columns_in_involution_with_flow() {
        let b = VectorFieldSpec::rotation();
        let c1 = VectorFieldSpec::custom(
            [parse("y2/|y|").unwrap(), parse("-y1/|y|").unwrap()],
            false,
        );
        let c2 = VectorFieldSpec::custom(
            [parse("y1/|y|").unwrap(), parse("y2/|y|").unwrap()],
            false,
        );
        for y in randfield::random_points(0.5, 2.5, 40, 7) {
            for c in [&c1, &c2] {
                let br = bracket_vv(&b, c, &y);
                assert!(
                    linalg::norm(&br) < 1e-8,
                    "bracket {:.3e} at ({:.3}, {:.3})",
                    linalg::norm(&br),
                    y[0],
                    y[1]
                );
            }
        }
    }

    #[test]
    fn corrector_field_trivial_cases() {
        let fam = family(0.3, 2.8, 20, 64);
        let grid = Grid2D::new(48, 3.0);
        let zero_cf = CorrectorFields {
            e: MatrixFieldSample::zeros(&fam),
            f: MatrixFieldSample::zeros(&fam),
            e_frame: std::array::from_fn(|_| vec![0.0; fam.n_nodes()]),
            f_frame: std::array::from_fn(|_| vec![0.0; fam.n_nodes()]),
            skipped: Vec::new(),
        };
        let bump = PolarBump::new(0, 0.0, 0.4, 2.6, 1.0);
        let u = grid.sample(|y| bump.value(y));
        let w = corrector_field(&zero_cf, &fam, &grid, &u).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-14));
        let constant = vec![2.5; grid.n_nodes()];
        let w = corrector_field(&zero_cf, &fam, &grid, &constant).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
        // Significant gradients outside the family's span are refused.
        let narrow = family(0.8, 1.6, 6, 64);
        let err = corrector_field(&zero_cf, &narrow, &grid, &u).unwrap_err();
        assert!(matches!(err, Error::RadiusOutOfRange(..)));
    }

    #[test]
    fn corrector_of_radial_data_has_zero_orbit_mean() {
        let fam = family(0.25, 2.85, 96, 256);
        let fm = rotation_flow();
        let d = MatrixFieldSpec::diag(
            parse("1+0.1*cos(|y|)").unwrap(),
            parse("1").unwrap(),
        );
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        let grid = Grid2D::new(128, 3.0);
        // Radial data: a Gaussian ring windowed to vanish smoothly inside
        // the family's span.
        let u = grid.sample(|y| {
            let r = linalg::norm(y);
            let gauss = (-((r - 1.5) / 0.55).powi(2)).exp();
            gauss * randfield::bump01((r - 0.3) / 2.4)
        });
        let w = corrector_field(&cf, &fam, &grid, &u).unwrap();
        let w_max = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(w_max > 1e-4, "corrector unexpectedly vanished");
        for r in [0.9, 1.4, 1.9] {
            let mean = grid.circle_mean(&w, r, 512);
            assert!(
                mean.abs() <= 1e-4,
                "orbit mean {mean:.3e} at r = {r} (field scale {w_max:.3e})"
            );
        }
    }

    #[test]
    fn decomposition_residuals_on_bump_battery() {
        let fam = family(0.45, 2.75, 32, 256);
        let fm = rotation_flow();
        let b = VectorFieldSpec::rotation();
        let d = MatrixFieldSpec::diag(parse("2+cos(|y|)").unwrap(), parse("1").unwrap());
        let davg = averaged_matrix_explicit(&d, &WeightSpec::rotation(), &fm, &fam).unwrap();
        let frame = FrameFields::rotation(&fam);
        let cf = compute_corrector_frame(&d, &davg, &frame, &fam).unwrap();
        let pairs = bump_battery();
        for (u, v) in &pairs {
            let res = verify_decomposition(&d, &davg, &cf.f, &fam, &b, u, v);
            assert!(res <= 1e-6, "residual {res:.3e} for pair {u:?}/{v:?}");
        }
        // D = ⟨D⟩_Q with F = 0: every integrand vanishes identically.
        let davg_self = MatrixFieldSample::from_spec(&fam, &d);
        let res = verify_decomposition(
            &d,
            &davg_self,
            &MatrixFieldSample::zeros(&fam),
            &fam,
            &b,
            &pairs[0].0,
            &pairs[0].1,
        );
        assert_eq!(res, 0.0);
        // Radial pair: the three corrector terms vanish pointwise and the
        // remaining term integrates to zero on its own.
        let (u, v) = (
            PolarBump::new(0, 0.0, 0.6, 2.2, 1.0),
            PolarBump::new(0, 0.0, 0.8, 2.6, 1.0),
        );
        let res = verify_decomposition(&d, &davg, &cf.f, &fam, &b, &u, &v);
        assert!(res <= 1e-10, "radial pair residual {res:.3e}");
    }

    #[test]
    fn columnar_output_shape() {
        let fam = family(0.5, 1.5, 3, 8);
        let cf = CorrectorFields {
            e: MatrixFieldSample::zeros(&fam),
            f: MatrixFieldSample::zeros(&fam),
            e_frame: std::array::from_fn(|_| vec![0.0; fam.n_nodes()]),
            f_frame: std::array::from_fn(|_| vec![0.0; fam.n_nodes()]),
            skipped: Vec::new(),
        };
        let mut buf = Vec::new();
        cf.write_columnar(&fam, "rotation", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "# grid=3x8 weight=rotation columns=field,y1,y2,A11,A12,A22"
        );
        assert_eq!(text.lines().count(), 1 + 2 * fam.n_nodes());
        assert!(text.lines().nth(1).unwrap().starts_with("E "));
        assert!(text.lines().nth(1 + fam.n_nodes()).unwrap().starts_with("F "));
    }
}
