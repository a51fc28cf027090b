//! Evaluable vector and matrix fields, the characteristic flow, and brackets.
//!
//! The flow `Y(s;y)` solves `dY/ds = b(Y)`, `Y(0;y) = y`. Its Jacobian
//! `∂_y Y` is integrated jointly through the variational equation
//! `d/ds ∂_yY = ∂_yb(Y) ∂_yY` (and likewise for the inverse Jacobian), so
//! transport-law checks see Jacobians at integrator accuracy rather than
//! finite-difference accuracy.

use crate::expr::Expr;
use crate::linalg::{self, Matrix};
use crate::tol;
use crate::{Error, Result, Vector, DIM};

/// Step used for central differences on analytic fields, scaled by
/// `(1 + |y|)`.
fn diff_step(y: &Vector) -> f64 {
    tol::CENTRAL_DIFF_H * (1.0 + linalg::norm(y))
}

/// Central difference of a scalar function along a coordinate axis.
pub fn central_diff(f: impl Fn(&Vector) -> f64, y: &Vector, axis: usize) -> f64 {
    let h = diff_step(y);
    let mut yp = *y;
    let mut ym = *y;
    yp[axis] += h;
    ym[axis] -= h;
    (f(&yp) - f(&ym)) / (2.0 * h)
}

/// Gradient of a scalar function by central differences.
pub fn gradient(f: impl Fn(&Vector) -> f64, y: &Vector) -> Vector {
    let mut g = [0.0; DIM];
    for k in 0..DIM {
        g[k] = central_diff(&f, y, k);
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub enum VectorFieldKind {
    /// `b(y) = ω (y₂, −y₁)`: closed circular orbits of period `2π/ω`.
    Rotation,
    /// `b(y) = σ (y₂, 0)`: straight-line orbits, nothing is periodic.
    Shear,
    /// Components given by expressions over `y1`, `y2`, `|y|`.
    Custom,
}

/// An evaluable vector field `b(y)`.
#[derive(Clone, Debug)]
pub struct VectorFieldSpec {
    kind: VectorFieldKind,
    scale: f64,
    comps: Option<[Expr; DIM]>,
    pub divergence_declared_zero: bool,
}

impl VectorFieldSpec {
    pub fn rotation() -> Self {
        Self::rotation_scaled(1.0)
    }

    pub fn rotation_scaled(omega: f64) -> Self {
        VectorFieldSpec {
            kind: VectorFieldKind::Rotation,
            scale: omega,
            comps: None,
            divergence_declared_zero: true,
        }
    }

    pub fn shear() -> Self {
        VectorFieldSpec {
            kind: VectorFieldKind::Shear,
            scale: 1.0,
            comps: None,
            divergence_declared_zero: true,
        }
    }

    pub fn custom(comps: [Expr; DIM], divergence_declared_zero: bool) -> Self {
        VectorFieldSpec {
            kind: VectorFieldKind::Custom,
            scale: 1.0,
            comps: Some(comps),
            divergence_declared_zero,
        }
    }

    pub fn kind(&self) -> &VectorFieldKind {
        &self.kind
    }

    /// Orbit period when every orbit is closed with a common period.
    pub fn natural_period(&self) -> Option<f64> {
        match self.kind {
            VectorFieldKind::Rotation => Some(2.0 * std::f64::consts::PI / self.scale.abs()),
            _ => None,
        }
    }

    pub fn eval(&self, y: &Vector) -> Vector {
        match self.kind {
            VectorFieldKind::Rotation => [self.scale * y[1], -self.scale * y[0]],
            VectorFieldKind::Shear => [self.scale * y[1], 0.0],
            VectorFieldKind::Custom => {
                let comps = self.comps.as_ref().expect("custom field has components");
                let mut v = [0.0; DIM];
                for i in 0..DIM {
                    v[i] = comps[i].eval(y);
                }
                v
            }
        }
    }

    /// `∂_y b`, analytic for the built-in kinds, central differences for
    /// custom expressions.
    pub fn jacobian(&self, y: &Vector) -> Matrix {
        match self.kind {
            VectorFieldKind::Rotation => Matrix([[0.0, self.scale], [-self.scale, 0.0]]),
            VectorFieldKind::Shear => Matrix([[0.0, self.scale], [0.0, 0.0]]),
            VectorFieldKind::Custom => {
                let comps = self.comps.as_ref().expect("custom field has components");
                let mut j = Matrix::zero();
                for i in 0..DIM {
                    for k in 0..DIM {
                        j.0[i][k] = central_diff(|p| comps[i].eval(p), y, k);
                    }
                }
                j
            }
        }
    }

    pub fn divergence(&self, y: &Vector) -> f64 {
        self.jacobian(y).trace()
    }

    /// Largest `|div b|` over a probe grid on `[−L, L]^2`.
    pub fn max_divergence(&self, half_width: f64, n: usize) -> f64 {
        let mut worst = 0.0f64;
        for (_, y) in probe_grid(half_width, n) {
            worst = worst.max(self.divergence(&y).abs());
        }
        worst
    }

    /// Smallest `C` with `|b(y)| ≤ C (1 + |y|)` over a probe grid.
    pub fn growth_constant(&self, half_width: f64, n: usize) -> f64 {
        let mut c = 0.0f64;
        for (_, y) in probe_grid(half_width, n) {
            c = c.max(linalg::norm(&self.eval(&y)) / (1.0 + linalg::norm(&y)));
        }
        c
    }
}

fn probe_grid(half_width: f64, n: usize) -> impl Iterator<Item = (usize, Vector)> {
    let n = n.max(2);
    let h = 2.0 * half_width / (n - 1) as f64;
    (0..n * n).map(move |idx| {
        let i = idx % n;
        let j = idx / n;
        (
            idx,
            [-half_width + h * i as f64, -half_width + h * j as f64],
        )
    })
}

/// An evaluable matrix field `A(y)` with per-entry expressions.
#[derive(Clone, Debug)]
pub struct MatrixFieldSpec {
    entries: [[Expr; DIM]; DIM],
    pub symmetry: bool,
    pub positivity: bool,
}

impl MatrixFieldSpec {
    pub fn from_entries(entries: [[Expr; DIM]; DIM], symmetry: bool, positivity: bool) -> Self {
        MatrixFieldSpec {
            entries,
            symmetry,
            positivity,
        }
    }

    pub fn constant(m: Matrix) -> Self {
        let entries = [
            [Expr::constant(m.0[0][0]), Expr::constant(m.0[0][1])],
            [Expr::constant(m.0[1][0]), Expr::constant(m.0[1][1])],
        ];
        let sym = m.sub(&m.transpose()).max_abs() == 0.0;
        MatrixFieldSpec {
            entries,
            symmetry: sym,
            positivity: sym && m.min_eig() >= 0.0,
        }
    }

    pub fn identity() -> Self {
        Self::constant(Matrix::identity())
    }

    /// Diagonal field `diag(λ₁(y), λ₂(y))`.
    pub fn diag(l1: Expr, l2: Expr) -> Self {
        MatrixFieldSpec {
            entries: [
                [l1, Expr::constant(0.0)],
                [Expr::constant(0.0), l2],
            ],
            symmetry: true,
            positivity: true,
        }
    }

    /// The orthogonal frame of the rotation example,
    /// `R(y) = (1/|y|) [[y₂, −y₁], [y₁, y₂]]`; singular at the origin.
    pub fn rotation_frame() -> Self {
        let e = |s: &str| crate::expr::parse(s).expect("frame entries parse");
        MatrixFieldSpec {
            entries: [
                [e("y2/|y|"), e("-y1/|y|")],
                [e("y1/|y|"), e("y2/|y|")],
            ],
            symmetry: false,
            positivity: false,
        }
    }

    pub fn eval(&self, y: &Vector) -> Matrix {
        let mut m = Matrix::zero();
        for i in 0..DIM {
            for j in 0..DIM {
                m.0[i][j] = self.entries[i][j].eval(y);
            }
        }
        m
    }

    /// Directional derivative `(v·∇)A` by a central difference along `v`.
    pub fn directional_derivative(&self, y: &Vector, v: &Vector) -> Matrix {
        let speed = linalg::norm(v);
        if speed == 0.0 {
            return Matrix::zero();
        }
        let t = diff_step(y) / speed;
        let yp = linalg::add(y, &linalg::scale(v, t));
        let ym = linalg::sub(y, &linalg::scale(v, t));
        self.eval(&yp).sub(&self.eval(&ym)).scale(1.0 / (2.0 * t))
    }

    /// Axis partial `∂_k A` by central differences.
    pub fn partial(&self, y: &Vector, axis: usize) -> Matrix {
        let h = diff_step(y);
        let mut yp = *y;
        let mut ym = *y;
        yp[axis] += h;
        ym[axis] -= h;
        self.eval(&yp).sub(&self.eval(&ym)).scale(1.0 / (2.0 * h))
    }

    /// Largest `|A_ij − A_ji|` over a probe grid.
    pub fn max_asymmetry(&self, half_width: f64, n: usize) -> f64 {
        let mut worst = 0.0f64;
        for (_, y) in probe_grid(half_width, n) {
            let m = self.eval(&y);
            worst = worst.max(m.sub(&m.transpose()).max_abs());
        }
        worst
    }

    /// Smallest eigenvalue over a probe grid (symmetric fields only).
    pub fn min_eig_on(&self, half_width: f64, n: usize) -> f64 {
        let mut worst = f64::INFINITY;
        for (_, y) in probe_grid(half_width, n) {
            worst = worst.min(self.eval(&y).sym_part().min_eig());
        }
        worst
    }
}

/// The characteristic flow of a vector field, with a guard box and an
/// optional common orbit period.
#[derive(Clone, Debug)]
pub struct FlowMap {
    pub field: VectorFieldSpec,
    /// Local error per unit time target for the integrator.
    pub tol: f64,
    /// Set when all orbits through the domain are closed with this period.
    pub period: Option<f64>,
    /// Trajectories beyond this radius abort with an orbit-escape error.
    pub guard_radius: f64,
}

impl FlowMap {
    /// `half_width` is the domain box half-width; the guard radius is ten
    /// times the box circumradius.
    pub fn new(field: VectorFieldSpec, tol: f64, half_width: f64) -> Self {
        let period = field.natural_period();
        FlowMap {
            field,
            tol,
            period,
            guard_radius: 10.0 * half_width * (DIM as f64).sqrt(),
        }
    }

    fn base_steps(&self, s: f64) -> usize {
        // Fixed-step heuristic: DIM * h ≤ tol^(1/4), then Richardson
        // halving until the extrapolated error is inside tol.
        let h = self.tol.powf(0.25) / DIM as f64;
        ((s.abs() / h).ceil() as usize).max(1)
    }

    fn escape(&self, y: &Vector) -> Error {
        Error::OrbitEscape(y[0], y[1], self.guard_radius)
    }

    /// `Y(s;y)`.
    pub fn flow(&self, s: f64, y: &Vector) -> Result<Vector> {
        if s == 0.0 {
            return Ok(*y);
        }
        let deriv = |state: &Vector| self.field.eval(state);
        let guard = self.guard_radius;
        let inside = |state: &Vector| linalg::norm(state) <= guard;
        let mut n = self.base_steps(s);
        let mut coarse = rk4(&deriv, *y, s, n, &inside).ok_or_else(|| self.escape(y))?;
        for _ in 0..8 {
            n *= 2;
            let fine = rk4(&deriv, *y, s, n, &inside).ok_or_else(|| self.escape(y))?;
            let err = max_abs_diff(&coarse, &fine) * 16.0 / 15.0;
            if err <= self.tol * s.abs().max(1.0) {
                return Ok(fine);
            }
            coarse = fine;
        }
        Ok(coarse)
    }

    /// `∂_y Y(s;y)`.
    pub fn flow_jacobian(&self, s: f64, y: &Vector) -> Result<Matrix> {
        Ok(self.flow_with_jacobian(s, y)?.1)
    }

    /// `(Y(s;y), ∂_yY(s;y), (∂_yY)⁻¹(s;y))`, all from one joint integration
    /// of the `2·DIM² + DIM` dimensional variational system.
    pub fn flow_with_jacobian(&self, s: f64, y: &Vector) -> Result<(Vector, Matrix, Matrix)> {
        if s == 0.0 {
            return Ok((*y, Matrix::identity(), Matrix::identity()));
        }
        const N: usize = DIM + 2 * DIM * DIM;
        let field = &self.field;
        let deriv = |state: &[f64; N]| {
            let (pos, jac, inv) = unpack(state);
            let b = field.eval(&pos);
            let db = field.jacobian(&pos);
            let djac = db.mul(&jac);
            let dinv = inv.mul(&db).scale(-1.0);
            pack(&b, &djac, &dinv)
        };
        let guard = self.guard_radius;
        let inside = |state: &[f64; N]| {
            let mut r2 = 0.0;
            for x in state.iter().take(DIM) {
                r2 += x * x;
            }
            r2.sqrt() <= guard
        };
        let init = pack(y, &Matrix::identity(), &Matrix::identity());
        let mut n = self.base_steps(s);
        let mut coarse = rk4(&deriv, init, s, n, &inside).ok_or_else(|| self.escape(y))?;
        let mut best = coarse;
        for _ in 0..8 {
            n *= 2;
            let fine = rk4(&deriv, init, s, n, &inside).ok_or_else(|| self.escape(y))?;
            best = fine;
            let err = max_abs_diff(&coarse, &fine) * 16.0 / 15.0;
            if err <= self.tol * s.abs().max(1.0) {
                break;
            }
            coarse = fine;
        }
        let (pos, jac, inv) = unpack(&best);
        Ok((pos, jac, inv))
    }
}

fn max_abs_diff<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..N {
        m = m.max((a[i] - b[i]).abs());
    }
    m
}

fn pack(pos: &Vector, jac: &Matrix, inv: &Matrix) -> [f64; DIM + 2 * DIM * DIM] {
    let mut s = [0.0; DIM + 2 * DIM * DIM];
    s[..DIM].copy_from_slice(pos);
    for i in 0..DIM {
        for j in 0..DIM {
            s[DIM + i * DIM + j] = jac.0[i][j];
            s[DIM + DIM * DIM + i * DIM + j] = inv.0[i][j];
        }
    }
    s
}

fn unpack(s: &[f64; DIM + 2 * DIM * DIM]) -> (Vector, Matrix, Matrix) {
    let mut pos = [0.0; DIM];
    pos.copy_from_slice(&s[..DIM]);
    let mut jac = Matrix::zero();
    let mut inv = Matrix::zero();
    for i in 0..DIM {
        for j in 0..DIM {
            jac.0[i][j] = s[DIM + i * DIM + j];
            inv.0[i][j] = s[DIM + DIM * DIM + i * DIM + j];
        }
    }
    (pos, jac, inv)
}

/// Classic fourth-order one-step integration with `nsteps` fixed steps.
/// Returns `None` as soon as the guard predicate fails.
fn rk4<const N: usize>(
    deriv: &impl Fn(&[f64; N]) -> [f64; N],
    init: [f64; N],
    s: f64,
    nsteps: usize,
    inside: &impl Fn(&[f64; N]) -> bool,
) -> Option<[f64; N]> {
    let h = s / nsteps as f64;
    let mut state = init;
    for _ in 0..nsteps {
        let k1 = deriv(&state);
        let k2 = deriv(&offset(&state, &k1, h / 2.0));
        let k3 = deriv(&offset(&state, &k2, h / 2.0));
        let k4 = deriv(&offset(&state, &k3, h));
        for i in 0..N {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !inside(&state) {
            return None;
        }
    }
    Some(state)
}

fn offset<const N: usize>(state: &[f64; N], dir: &[f64; N], h: f64) -> [f64; N] {
    let mut out = *state;
    for i in 0..N {
        out[i] += h * dir[i];
    }
    out
}

/// Bracket of vector fields, `[b,c] = (b·∇)c − (c·∇)b`.
pub fn bracket_vv(b: &VectorFieldSpec, c: &VectorFieldSpec, y: &Vector) -> Vector {
    let jb = b.jacobian(y);
    let jc = c.jacobian(y);
    linalg::sub(&jc.apply(&b.eval(y)), &jb.apply(&c.eval(y)))
}

/// Bracket of a vector field with a matrix field,
/// `[b,A] = (b·∇)A − ∂_yb A − A ᵗ∂_yb`. Symmetric whenever `A` is.
pub fn bracket_vm(b: &VectorFieldSpec, a: &MatrixFieldSpec, y: &Vector) -> Matrix {
    let jb = b.jacobian(y);
    let aval = a.eval(y);
    a.directional_derivative(y, &b.eval(y))
        .sub(&jb.mul(&aval))
        .sub(&aval.mul(&jb.transpose()))
}
