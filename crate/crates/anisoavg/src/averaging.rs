//! Orbit averages, the unitary group on matrix fields, its generator, and
//! the averaged diffusion tensor by two independent routes.
//!
//! On a family of closed orbits sampled at equal time steps, the action
//! `G(s)A = (∂_yY)⁻¹ A(Y(s;·)) ᵗ(∂_yY)⁻¹` becomes an index shift plus a
//! Jacobian conjugation; off-node shifts use band-limited interpolation in
//! the orbit parameter. The generator `L` is the centered difference of the
//! action, and the averaged tensor `⟨D⟩_Q` is computed both from the frame
//! conjugation identity `R ⟨D⟩_Q ᵗR = ⟨R D ᵗR⟩` and by relaxing
//! `∂_t A = L(L(A))` to its steady state.

use crate::fields::{FlowMap, MatrixFieldSpec, VectorFieldSpec};
use crate::linalg::{self, Matrix};
use crate::par;
use crate::tol;
use crate::{Error, Result, Vector};
use std::io::Write;

/// Horizon used when averaging along non-closed orbits, doubled until the
/// running averages become Cauchy.
const OPEN_ORBIT_HORIZON: f64 = 8.0;
const OPEN_ORBIT_DOUBLINGS: usize = 5;
const OPEN_ORBIT_CAUCHY_TOL: f64 = 1e-8;

/// The weight defining `H_Q`: `P` symmetric positive with `[b,P] = 0`,
/// `Q = P⁻¹`, and optionally a frame `R` with `Q = ᵗR R` and
/// `b·∇R + R ∂_yb = 0`.
#[derive(Clone, Debug)]
pub struct WeightSpec {
    pub q: MatrixFieldSpec,
    pub p: MatrixFieldSpec,
    pub r: Option<MatrixFieldSpec>,
    /// Short id recorded in serialized sample headers.
    pub id: String,
}

impl WeightSpec {
    /// `Q = P = I`, no frame.
    pub fn identity() -> Self {
        WeightSpec {
            q: MatrixFieldSpec::identity(),
            p: MatrixFieldSpec::identity(),
            r: None,
            id: "identity".into(),
        }
    }

    /// `Q = P = I` together with the orthogonal rotation frame, the weight of
    /// the planar rotation example.
    pub fn rotation() -> Self {
        WeightSpec {
            q: MatrixFieldSpec::identity(),
            p: MatrixFieldSpec::identity(),
            r: Some(MatrixFieldSpec::rotation_frame()),
            id: "rotation".into(),
        }
    }

    /// Checks the structural invariants at sample points on the given radii
    /// (probing along orbits of `fm`).
    pub fn verify(&self, fm: &FlowMap, radii: &[f64]) -> Result<()> {
        let fail = |msg: String| Err(Error::WeightInvalid(msg));
        for &r in radii {
            for &ang in &[0.0, 0.9, 2.2, 4.4] {
                let y = [r * f64::cos(ang), r * f64::sin(ang)];
                let p = self.p.eval(&y);
                if p.sub(&p.transpose()).max_abs() > tol::SYMMETRY_TOL {
                    return fail(format!("P not symmetric at r = {r}"));
                }
                if p.min_eig() <= 0.0 {
                    return fail(format!("P not positive definite at r = {r}"));
                }
                for &s in &[0.4, -1.1] {
                    let (pos, jac, _) = fm.flow_with_jacobian(s, &y)?;
                    let transported = jac.mul(&self.p.eval(&y)).mul(&jac.transpose());
                    if self.p.eval(&pos).sub(&transported).max_abs() > tol::TRANSPORT_TOL {
                        return fail(format!("P violates the transport law at r = {r}"));
                    }
                }
                if let Some(rf) = &self.r {
                    let rv = rf.eval(&y);
                    let gap = rv.transpose().mul(&rv).sub(&self.q.eval(&y)).max_abs();
                    if gap > tol::SYMMETRY_TOL {
                        return fail(format!("Q ≠ ᵗR R at r = {r} (gap {gap:.3e})"));
                    }
                    let defect = rf
                        .directional_derivative(&y, &fm.field.eval(&y))
                        .add(&rv.mul(&fm.field.jacobian(&y)))
                        .max_abs();
                    if defect > tol::TRANSPORT_TOL {
                        return fail(format!("b·∇R + R ∂_yb ≠ 0 at r = {r} ({defect:.3e})"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One closed orbit discretized at `n` equal time steps, with cached one-step
/// Jacobians in both directions and prefix products for multi-step shifts.
#[derive(Clone, Debug)]
pub struct Ring {
    pub radius: f64,
    pub period: f64,
    pub nodes: Vec<Vector>,
    /// `∂_yY(Δs; node_k)` and its inverse.
    jac_fwd: Vec<Matrix>,
    jinv_fwd: Vec<Matrix>,
    /// Inverse of `∂_yY(−Δs; node_k)`.
    jinv_bwd: Vec<Matrix>,
    /// `pf[k] = ∂_yY(kΔs; node_0)` for `k = 0..=n` and its inverses.
    pf: Vec<Matrix>,
    qi: Vec<Matrix>,
}

impl Ring {
    fn build(fm: &FlowMap, radius: f64, n: usize) -> Result<Ring> {
        let period = fm.period.ok_or(Error::UnsupportedFlow)?;
        let ds = period / n as f64;
        let base = [radius, 0.0];
        let mut nodes = Vec::with_capacity(n);
        let mut jac_fwd = Vec::with_capacity(n);
        let mut jinv_fwd = Vec::with_capacity(n);
        let mut y = base;
        for _ in 0..n {
            nodes.push(y);
            let (next, jac, jinv) = fm.flow_with_jacobian(ds, &y)?;
            jac_fwd.push(jac);
            jinv_fwd.push(jinv);
            y = next;
        }
        let closure = linalg::norm(&linalg::sub(&y, &base));
        if closure > tol::ORBIT_CLOSURE_TOL {
            return Err(Error::WeightInvalid(format!(
                "orbit through r = {radius} fails to close (defect {closure:.3e})"
            )));
        }
        let mut jinv_bwd = Vec::with_capacity(n);
        for node in &nodes {
            let (_, _, jinv) = fm.flow_with_jacobian(-ds, node)?;
            jinv_bwd.push(jinv);
        }
        let mut pf = Vec::with_capacity(n + 1);
        let mut qi = Vec::with_capacity(n + 1);
        pf.push(Matrix::identity());
        qi.push(Matrix::identity());
        for k in 0..n {
            pf.push(jac_fwd[k].mul(&pf[k]));
            qi.push(qi[k].mul(&jinv_fwd[k]));
        }
        Ok(Ring {
            radius,
            period,
            nodes,
            jac_fwd,
            jinv_fwd,
            jinv_bwd,
            pf,
            qi,
        })
    }

    fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Cached `∂_yY(Δs; node_k)`.
    pub fn step_jacobian(&self, k: usize) -> &Matrix {
        &self.jac_fwd[k]
    }

    fn jinv_steps(&self, k: usize, m: i64) -> Matrix {
        let n = self.n() as i64;
        let a = k as i64 + m;
        let q = a.div_euclid(n);
        let j = a.rem_euclid(n) as usize;
        // (pf[j] · pf[n]^q)⁻¹ = pf[n]^{−q} · qi[j]
        let mut ext_inv = self.qi[j];
        let mono = self.pf[self.n()];
        let mono_inv = self.qi[self.n()];
        if q > 0 {
            let mut pw = Matrix::identity();
            for _ in 0..q {
                pw = pw.mul(&mono_inv);
            }
            ext_inv = pw.mul(&ext_inv);
        } else if q < 0 {
            let mut pw = Matrix::identity();
            for _ in 0..(-q) {
                pw = pw.mul(&mono);
            }
            ext_inv = pw.mul(&ext_inv);
        }
        self.pf[k].mul(&ext_inv)
    }
}

/// A family of closed orbits over a list of base radii, all sampled with the
/// same number of equal-time nodes.
#[derive(Clone, Debug)]
pub struct OrbitFamily {
    pub rings: Vec<Ring>,
    pub n_angles: usize,
    /// Node spacing in orbit time.
    pub ds: f64,
    /// Radii excluded near the origin where the frame degenerates.
    pub excluded: Vec<f64>,
    /// True when every node sits on the circle of its base radius, i.e. the
    /// orbit parameterization doubles as a polar parameterization.
    pub circular: bool,
    /// Signed angle advanced per node step when `circular`.
    pub angle_step: f64,
}

impl OrbitFamily {
    pub fn build(fm: &FlowMap, radii: &[f64], n_angles: usize) -> Result<OrbitFamily> {
        let period = fm.period.ok_or(Error::UnsupportedFlow)?;
        let ds = period / n_angles as f64;
        let mut excluded = Vec::new();
        let mut kept = Vec::new();
        for &r in radii {
            if r <= tol::ORBIT_EXCLUSION_RADIUS {
                excluded.push(r);
            } else {
                kept.push(r);
            }
        }
        let rings: Vec<Result<Ring>> =
            par::map_indexed(kept.len(), |i| Ring::build(fm, kept[i], n_angles));
        let mut out = Vec::with_capacity(rings.len());
        for r in rings {
            out.push(r?);
        }
        let mut circular = !out.is_empty();
        for ring in &out {
            for node in &ring.nodes {
                if (linalg::norm(node) - ring.radius).abs() > tol::ORBIT_CLOSURE_TOL {
                    circular = false;
                }
            }
        }
        let angle_step = if circular && n_angles > 1 {
            let first = &out[0];
            first.nodes[1][1].atan2(first.nodes[1][0])
        } else {
            0.0
        };
        Ok(OrbitFamily {
            rings: out,
            n_angles,
            ds,
            excluded,
            circular,
            angle_step,
        })
    }

    /// Uniformly spaced radii in `[r_min, r_max]`, endpoints included.
    pub fn uniform(
        fm: &FlowMap,
        r_min: f64,
        r_max: f64,
        n_rings: usize,
        n_angles: usize,
    ) -> Result<OrbitFamily> {
        assert!(n_rings >= 1 && r_max >= r_min);
        let radii: Vec<f64> = if n_rings == 1 {
            vec![r_min]
        } else {
            (0..n_rings)
                .map(|i| r_min + (r_max - r_min) * i as f64 / (n_rings - 1) as f64)
                .collect()
        };
        Self::build(fm, &radii, n_angles)
    }

    pub fn n_nodes(&self) -> usize {
        self.rings.len() * self.n_angles
    }

    pub fn node(&self, ring: usize, k: usize) -> &Vector {
        &self.rings[ring].nodes[k]
    }

    pub fn index(&self, ring: usize, k: usize) -> usize {
        ring * self.n_angles + k
    }

    pub fn radii(&self) -> Vec<f64> {
        self.rings.iter().map(|r| r.radius).collect()
    }

    /// Per-node area weights `|∂_r Y × b| Δr Δs` (the polar `r dr dθ` for
    /// circular rings), with trapezoid end-weights in the radial direction.
    /// A single-ring family gets line weights `Δs`.
    pub fn area_weights(&self, field: &VectorFieldSpec) -> Vec<f64> {
        let nr = self.rings.len();
        let na = self.n_angles;
        let mut w = vec![0.0; self.n_nodes()];
        for j in 0..nr {
            let dr = if nr == 1 {
                1.0
            } else if j == 0 {
                (self.rings[1].radius - self.rings[0].radius) / 2.0
            } else if j == nr - 1 {
                (self.rings[nr - 1].radius - self.rings[nr - 2].radius) / 2.0
            } else {
                (self.rings[j + 1].radius - self.rings[j - 1].radius) / 2.0
            };
            for k in 0..na {
                let node = &self.rings[j].nodes[k];
                let b = field.eval(node);
                let du = if nr == 1 {
                    // Line measure: treat the transverse factor as unit.
                    let bn = linalg::norm(&b).max(f64::MIN_POSITIVE);
                    [b[1] / bn, -b[0] / bn]
                } else if j == 0 {
                    let up = &self.rings[1].nodes[k];
                    linalg::scale(
                        &linalg::sub(up, node),
                        1.0 / (self.rings[1].radius - self.rings[0].radius),
                    )
                } else if j == nr - 1 {
                    let dn = &self.rings[nr - 2].nodes[k];
                    linalg::scale(
                        &linalg::sub(node, dn),
                        1.0 / (self.rings[nr - 1].radius - self.rings[nr - 2].radius),
                    )
                } else {
                    let up = &self.rings[j + 1].nodes[k];
                    let dn = &self.rings[j - 1].nodes[k];
                    linalg::scale(
                        &linalg::sub(up, dn),
                        1.0 / (self.rings[j + 1].radius - self.rings[j - 1].radius),
                    )
                };
                let cross = (du[0] * b[1] - du[1] * b[0]).abs();
                w[self.index(j, k)] = cross * dr * self.ds;
            }
        }
        w
    }

    /// A conservative explicit step for the relaxation evolution: with
    /// `dt ≤ 2 ds²` the update is a convex combination of conjugated copies
    /// of the state, so `|A|_Q` cannot grow and positivity is preserved.
    pub fn suggested_relaxation_dt(&self) -> f64 {
        self.ds * self.ds
    }

    /// Precomputes the group action `G(s)` on this family: per-node inverse
    /// Jacobians and, when `s` is off the node spacing, band-limited
    /// interpolation weights in the orbit parameter.
    pub fn shift(&self, s: f64, fm: &FlowMap) -> Result<GroupShift> {
        let n = self.n_angles;
        let mut m = (s / self.ds).floor() as i64;
        let mut frac = s - m as f64 * self.ds;
        let snap = 1e-12 * self.ds.max(s.abs());
        if frac.abs() <= snap {
            frac = 0.0;
        } else if (self.ds - frac).abs() <= snap {
            m += 1;
            frac = 0.0;
        }
        let weights = if frac == 0.0 {
            None
        } else {
            Some(interp_weights(n, frac / self.ds))
        };
        let mut jinv = vec![Matrix::identity(); self.n_nodes()];
        for (j, ring) in self.rings.iter().enumerate() {
            // Fast exact path for one-step shifts: the cached per-node
            // Jacobians, no prefix-product roundoff.
            let whole: Vec<Matrix> = if frac == 0.0 && m == 1 {
                ring.jinv_fwd.clone()
            } else if frac == 0.0 && m == -1 {
                ring.jinv_bwd.clone()
            } else if m == 0 {
                vec![Matrix::identity(); n]
            } else {
                (0..n).map(|k| ring.jinv_steps(k, m)).collect()
            };
            if frac == 0.0 {
                for k in 0..n {
                    jinv[self.index(j, k)] = whole[k];
                }
            } else {
                let frac_inv: Vec<Matrix> = (0..n)
                    .map(|k| {
                        fm.flow_with_jacobian(frac, &ring.nodes[k])
                            .map(|(_, _, ji)| ji)
                    })
                    .collect::<Result<_>>()?;
                for k in 0..n {
                    let kk = (k as i64 + m).rem_euclid(n as i64) as usize;
                    jinv[self.index(j, k)] = whole[k].mul(&frac_inv[kk]);
                }
            }
        }
        Ok(GroupShift {
            s,
            m,
            weights,
            jinv,
        })
    }
}

/// Band-limited interpolation weights for periodic samples: value at
/// fractional offset `t ∈ (0,1)` node spacings past a node is
/// `Σ_d w[d] f[node + d]`.
fn interp_weights(n: usize, t: f64) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    (0..n)
        .map(|d| {
            let tau = t - d as f64;
            // Periodic sinc for even n: sin(πτ) / (n tan(πτ/n)).
            let s = (pi * tau).sin();
            let dn = (pi * tau / n as f64).tan();
            if dn.abs() < 1e-300 {
                if tau.abs() < 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                s / (n as f64 * dn)
            }
        })
        .collect()
}

/// The group action `G(s)` prepared on a fixed orbit family.
#[derive(Clone, Debug)]
pub struct GroupShift {
    pub s: f64,
    m: i64,
    weights: Option<Vec<f64>>,
    jinv: Vec<Matrix>,
}

/// A matrix field tabulated on the nodes of an orbit family, ring-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixFieldSample {
    pub values: Vec<Matrix>,
}

impl MatrixFieldSample {
    pub fn zeros(family: &OrbitFamily) -> Self {
        MatrixFieldSample {
            values: vec![Matrix::zero(); family.n_nodes()],
        }
    }

    /// Tabulates an analytic field on the family nodes.
    pub fn from_spec(family: &OrbitFamily, spec: &MatrixFieldSpec) -> Self {
        let na = family.n_angles;
        let values = par::map_indexed(family.n_nodes(), |idx| {
            spec.eval(family.node(idx / na, idx % na))
        });
        MatrixFieldSample { values }
    }

    /// Tabulates a closure on the family nodes.
    pub fn from_fn(family: &OrbitFamily, f: impl Fn(&Vector) -> Matrix + Sync) -> Self {
        let na = family.n_angles;
        let values = par::map_indexed(family.n_nodes(), |idx| {
            f(family.node(idx / na, idx % na))
        });
        MatrixFieldSample { values }
    }

    pub fn add_scaled(&self, other: &MatrixFieldSample, c: f64) -> MatrixFieldSample {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.add(&b.scale(c)))
            .collect();
        MatrixFieldSample { values }
    }

    fn scale_in(mut self, c: f64) -> Self {
        for v in &mut self.values {
            *v = v.scale(c);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &MatrixFieldSample) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.sub(b).max_abs())
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all sample points (symmetric values).
    pub fn min_eig(&self) -> f64 {
        self.values
            .iter()
            .map(|m| m.min_eig())
            .fold(f64::INFINITY, f64::min)
    }

    /// Evaluates the sample at an arbitrary point of a circular family:
    /// band-limited in the angle, cubic in the radius.
    pub fn interpolate(&self, family: &OrbitFamily, y: &Vector) -> Result<Matrix> {
        if !family.circular {
            return Err(Error::UnsupportedFlow);
        }
        let radii = family.radii();
        let r = linalg::norm(y);
        let (r_lo, r_hi) = (radii[0], radii[radii.len() - 1]);
        if r < r_lo - 1e-9 || r > r_hi + 1e-9 {
            return Err(Error::RadiusOutOfRange(r, r_lo, r_hi));
        }
        let theta = y[1].atan2(y[0]);
        let n = family.n_angles as f64;
        let kr = (theta / family.angle_step).rem_euclid(n);
        let k0 = kr.floor() as usize % family.n_angles;
        let t = kr - kr.floor();
        let w = if t.abs() < 1e-12 {
            None
        } else {
            Some(interp_weights(family.n_angles, t))
        };
        // Angular interpolation per candidate ring, then cubic Lagrange
        // across the four nearest radii.
        let nr = radii.len();
        let mut j0 = match radii.binary_search_by(|x| x.partial_cmp(&r).unwrap()) {
            Ok(j) => j,
            Err(j) => j.saturating_sub(1),
        };
        let stencil = 4.min(nr);
        j0 = j0.saturating_sub(1).min(nr - stencil);
        let ring_value = |j: usize| -> Matrix {
            match &w {
                None => self.values[family.index(j, k0)],
                Some(w) => {
                    let mut acc = Matrix::zero();
                    for (d, wd) in w.iter().enumerate() {
                        let kk = (k0 + d) % family.n_angles;
                        acc = acc.add(&self.values[family.index(j, kk)].scale(*wd));
                    }
                    acc
                }
            }
        };
        let mut out = Matrix::zero();
        for a in 0..stencil {
            let ja = j0 + a;
            let mut lag = 1.0;
            for b in 0..stencil {
                if b != a {
                    lag *= (r - radii[j0 + b]) / (radii[ja] - radii[j0 + b]);
                }
            }
            out = out.add(&ring_value(ja).scale(lag));
        }
        Ok(out)
    }

    /// Like [`Self::interpolate`], but points beyond the family's radial span
    /// are pulled back to the nearest covered ring along their ray (constant
    /// radial extension). The origin extends from the innermost ring at
    /// angle zero.
    pub fn interpolate_clamped(&self, family: &OrbitFamily, y: &Vector) -> Matrix {
        let radii = family.radii();
        let (r_lo, r_hi) = (radii[0], radii[radii.len() - 1]);
        let r = linalg::norm(y);
        let clamped = if r < r_lo {
            if r == 0.0 {
                [r_lo, 0.0]
            } else {
                linalg::scale(y, r_lo / r)
            }
        } else if r > r_hi {
            linalg::scale(y, r_hi / r)
        } else {
            *y
        };
        self.interpolate(family, &clamped)
            .expect("clamped point lies in the covered annulus")
    }

    /// Columnar serialization: a metadata header, then one row per sample
    /// point with the upper triangle of the value.
    pub fn write_columnar(
        &self,
        family: &OrbitFamily,
        weight_id: &str,
        out: &mut impl Write,
    ) -> std::io::Result<()> {
        writeln!(
            out,
            "# grid={}x{} weight={} columns=y1,y2,A11,A12,A22",
            family.rings.len(),
            family.n_angles,
            weight_id
        )?;
        for (idx, v) in self.values.iter().enumerate() {
            let y = family.node(idx / family.n_angles, idx % family.n_angles);
            writeln!(
                out,
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                y[0], y[1], v.0[0][0], v.0[0][1], v.0[1][1]
            )?;
        }
        Ok(())
    }
}

/// The inner product `(A,B)_Q = Σ w QA : BQ` over a fixed node/weight set.
#[derive(Clone, Debug)]
pub struct HQProduct {
    weights: Vec<f64>,
    q_vals: Vec<Matrix>,
}

impl HQProduct {
    /// Area weights come from the family geometry under the flow field.
    pub fn new(family: &OrbitFamily, field: &VectorFieldSpec, w: &WeightSpec) -> Self {
        let weights = family.area_weights(field);
        let na = family.n_angles;
        let q_vals = par::map_indexed(family.n_nodes(), |idx| {
            w.q.eval(family.node(idx / na, idx % na))
        });
        HQProduct { weights, q_vals }
    }

    pub fn inner(&self, a: &MatrixFieldSample, b: &MatrixFieldSample) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.weights.len() {
            let qa = self.q_vals[i].mul(&a.values[i]);
            let bq = b.values[i].mul(&self.q_vals[i]);
            acc += self.weights[i] * qa.frob_dot(&bq);
        }
        acc
    }

    pub fn norm(&self, a: &MatrixFieldSample) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }
}

/// Orbit average `⟨u⟩(y)`. With a declared period this is the exact one-orbit
/// trapezoid average; otherwise horizons are doubled until the running
/// averages are Cauchy, and failure to settle is reported rather than
/// papered over.
pub fn average_scalar(
    u: impl Fn(&Vector) -> f64,
    fm: &FlowMap,
    y: &Vector,
) -> Result<f64> {
    match fm.period {
        Some(period) => {
            let n = tol::ORBIT_NODES;
            let ds = period / n as f64;
            let mut acc = 0.0;
            let mut pos = *y;
            for _ in 0..n {
                acc += u(&pos);
                pos = fm.flow(ds, &pos)?;
            }
            Ok(acc / n as f64)
        }
        None => {
            let mut horizon = OPEN_ORBIT_HORIZON;
            let mut prev = finite_average(&u, fm, y, horizon)?;
            let mut last_inc = f64::INFINITY;
            for _ in 0..OPEN_ORBIT_DOUBLINGS {
                horizon *= 2.0;
                let next = finite_average(&u, fm, y, horizon)?;
                let inc = (next - prev).abs();
                if inc <= OPEN_ORBIT_CAUCHY_TOL * (1.0 + next.abs()) {
                    return Ok(next);
                }
                if inc > last_inc {
                    return Err(Error::NonConvergentAverage {
                        horizon,
                        increment: inc,
                    });
                }
                last_inc = inc;
                prev = next;
            }
            Err(Error::NonConvergentAverage {
                horizon,
                increment: last_inc,
            })
        }
    }
}

fn finite_average(
    u: &impl Fn(&Vector) -> f64,
    fm: &FlowMap,
    y: &Vector,
    horizon: f64,
) -> Result<f64> {
    let n = 512;
    let ds = horizon / n as f64;
    let mut pos = *y;
    let mut acc = 0.5 * u(&pos);
    for k in 1..=n {
        pos = fm.flow(ds, &pos)?;
        acc += if k == n { 0.5 * u(&pos) } else { u(&pos) };
    }
    Ok(acc * ds / horizon)
}

/// Applies the prepared group action to a sample.
pub fn group_action_with(
    family: &OrbitFamily,
    shift: &GroupShift,
    a: &MatrixFieldSample,
) -> MatrixFieldSample {
    let n = family.n_angles as i64;
    let m = shift.m.rem_euclid(n) as usize;
    let na = family.n_angles;
    let values = par::map_indexed(family.n_nodes(), |idx| {
        let (j, k) = (idx / na, idx % na);
        let kk = (k + m) % na;
        let interp = match &shift.weights {
            None => a.values[family.index(j, kk)],
            Some(w) => {
                let mut acc = Matrix::zero();
                for (d, wd) in w.iter().enumerate() {
                    acc = acc.add(&a.values[family.index(j, (kk + d) % na)].scale(*wd));
                }
                acc
            }
        };
        let ji = &shift.jinv[idx];
        ji.mul(&interp).mul(&ji.transpose())
    });
    MatrixFieldSample { values }
}

/// `G(s)A` on the family; `G(0)A = A` exactly.
pub fn group_action(
    family: &OrbitFamily,
    a: &MatrixFieldSample,
    s: f64,
    fm: &FlowMap,
) -> Result<MatrixFieldSample> {
    if s == 0.0 {
        return Ok(a.clone());
    }
    let shift = family.shift(s, fm)?;
    Ok(group_action_with(family, &shift, a))
}

/// Generator `L(A) = (G(h)A − G(−h)A)/(2h)` on sampled fields. For analytic
/// fields the direct formula is `fields::bracket_vm`; the two agree to
/// `O(h²)`.
pub fn generator_l(
    family: &OrbitFamily,
    a: &MatrixFieldSample,
    fm: &FlowMap,
    h: f64,
) -> Result<MatrixFieldSample> {
    let fwd = family.shift(h, fm)?;
    let bwd = family.shift(-h, fm)?;
    Ok(generator_l_with(family, &fwd, &bwd, a))
}

fn generator_l_with(
    family: &OrbitFamily,
    fwd: &GroupShift,
    bwd: &GroupShift,
    a: &MatrixFieldSample,
) -> MatrixFieldSample {
    let h = fwd.s;
    let plus = group_action_with(family, fwd, a);
    let minus = group_action_with(family, bwd, a);
    plus.add_scaled(&minus, -1.0).scale_in(1.0 / (2.0 * h))
}

/// The conjugation route to the averaged tensor: from
/// `R ⟨D⟩_Q ᵗR = ⟨R D ᵗR⟩`, the value at each node is
/// `R⁻¹ ⟨R D ᵗR⟩ ᵗR⁻¹` with the entrywise one-orbit average.
pub fn averaged_matrix_explicit(
    d: &MatrixFieldSpec,
    w: &WeightSpec,
    fm: &FlowMap,
    family: &OrbitFamily,
) -> Result<MatrixFieldSample> {
    let rf = w.r.as_ref().ok_or(Error::FrameRequired)?;
    if fm.period.is_none() {
        return Err(Error::UnsupportedFlow);
    }
    let na = family.n_angles;
    let per_ring: Vec<Result<Vec<Matrix>>> = par::map_indexed(family.rings.len(), |j| {
        let ring = &family.rings[j];
        let conj: Vec<Matrix> = ring
            .nodes
            .iter()
            .map(|y| {
                let r = rf.eval(y);
                r.mul(&d.eval(y)).mul(&r.transpose())
            })
            .collect();
        let mut mean = Matrix::zero();
        for c in &conj {
            mean = mean.add(c);
        }
        mean = mean.scale(1.0 / na as f64);
        ring.nodes
            .iter()
            .map(|y| {
                let r = rf.eval(y);
                let rinv = r
                    .inverse()
                    .ok_or_else(|| Error::FrameDegenerate(linalg::norm(y), r.det()))?;
                Ok(rinv.mul(&mean).mul(&rinv.transpose()).sym_part())
            })
            .collect()
    });
    let mut values = Vec::with_capacity(family.n_nodes());
    for ring_vals in per_ring {
        values.extend(ring_vals?);
    }
    Ok(MatrixFieldSample { values })
}

/// Outcome of the relaxation route, with the per-step norm history so
/// monotonicity is checkable by the caller.
#[derive(Clone, Debug)]
pub struct RelaxationOutcome {
    pub sample: MatrixFieldSample,
    /// `|L(A)|_Q` at the final state.
    pub residual: f64,
    /// `|A|_Q` after every accepted step, starting with the initial state.
    pub norms: Vec<f64>,
    pub steps: usize,
    pub final_dt: f64,
}

/// Relaxes `∂_t A = L(L(A))` from `A(0) = D` to pseudo-time `t_final` by
/// explicit steps, rejecting any step that increases `|A|_Q` and halving `dt`
/// (up to 20 times) when that happens. Symmetry is preserved entrywise and
/// positivity survives because each step with `dt ≤ 2 ds²` is a convex
/// combination of congruence-transformed copies of the state.
pub fn averaged_matrix_relaxation(
    family: &OrbitFamily,
    d0: &MatrixFieldSample,
    w: &WeightSpec,
    fm: &FlowMap,
    t_final: f64,
    dt: f64,
) -> Result<RelaxationOutcome> {
    let hq = HQProduct::new(family, &fm.field, w);
    let h = family.ds;
    let fwd = family.shift(h, fm)?;
    let bwd = family.shift(-h, fm)?;
    let mut a = d0.clone();
    let mut dt = dt;
    let mut t = 0.0;
    let mut steps = 0;
    let mut norms = vec![hq.norm(&a)];
    while t < t_final - 1e-12 * t_final {
        let step_dt = dt.min(t_final - t);
        let la = generator_l_with(family, &fwd, &bwd, &a);
        let lla = generator_l_with(family, &fwd, &bwd, &la);
        let candidate = a.add_scaled(&lla, step_dt);
        let norm_next = hq.norm(&candidate);
        let norm_here = *norms.last().expect("norm history nonempty");
        if norm_next > norm_here * (1.0 + 1e-13) {
            let mut halvings = 0;
            let mut ok = None;
            while halvings < 20 {
                dt /= 2.0;
                halvings += 1;
                let trial_dt = dt.min(t_final - t);
                let trial = a.add_scaled(&lla, trial_dt);
                let trial_norm = hq.norm(&trial);
                if trial_norm <= norm_here * (1.0 + 1e-13) {
                    ok = Some((trial, trial_norm, trial_dt));
                    break;
                }
            }
            match ok {
                Some((trial, trial_norm, trial_dt)) => {
                    a = trial;
                    t += trial_dt;
                    norms.push(trial_norm);
                }
                None => return Err(Error::RelaxationStalled(20, dt)),
            }
        } else {
            a = candidate;
            t += step_dt;
            norms.push(norm_next);
        }
        steps += 1;
    }
    let residual = hq.norm(&generator_l_with(family, &fwd, &bwd, &a));
    Ok(RelaxationOutcome {
        sample: a,
        residual,
        norms,
        steps,
        final_dt: dt,
    })
}

/// Weighted positive part: `A^{Q+}` defined through
/// `Q^{1/2} A^{Q+} Q^{1/2} = (Q^{1/2} A Q^{1/2})^+`.
pub fn weighted_positive_part(a: &Matrix, qval: &Matrix) -> Matrix {
    let s = qval.sqrt_spd(tol::EIG_FLOOR);
    let sinv = qval.inv_sqrt_spd(tol::EIG_FLOOR);
    sinv.mul(&s.mul(a).mul(&s).positive_part()).mul(&sinv)
}
