//! Systems of the form `ẋ = A(t,y,u)x + f(t,y,x,u)`, `y = C(t,u)x`, and the
//! triangular family built from expression strings.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expression::{Bindings, Expr, ExprError, Var};
use crate::numerics::{integrate_ode, TimeGrid, Trajectory};

pub type MatrixFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;
pub type DriftFn =
    dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync;
pub type OutputFn = dyn Fn(f64, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;

/// Evaluatable triple `(A, f, C)`.
///
/// `a(t, y, u)` is `n×n`, `f(t, y, x, u)` is an `n`-vector and `c(t, u)` is
/// `k×n`. Models are immutable and cheap to clone.
#[derive(Clone)]
pub struct SystemModel {
    n: usize,
    m: usize,
    k: usize,
    a: Arc<MatrixFn>,
    f: Arc<DriftFn>,
    c: Arc<OutputFn>,
    triangular: Option<Arc<TriangularSpec>>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("k", &self.k)
            .field("triangular", &self.triangular.is_some())
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        n: usize,
        m: usize,
        k: usize,
        a: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
        f: impl Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>
            + Send
            + Sync
            + 'static,
        c: impl Fn(f64, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Build(
                "state and output dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            n,
            m,
            k,
            a: Arc::new(a),
            f: Arc::new(f),
            c: Arc::new(c),
            triangular: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn triangular(&self) -> Option<&TriangularSpec> {
        self.triangular.as_deref()
    }

    pub fn a(&self, t: f64, y: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let a = (self.a)(t, y, u)?;
        if a.shape() != (self.n, self.n) {
            return Err(Error::Dimension(format!("A has shape {:?}", a.shape())));
        }
        Ok(a)
    }

    pub fn f(
        &self,
        t: f64,
        y: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let v = (self.f)(t, y, x, u)?;
        if v.len() != self.n {
            return Err(Error::Dimension(format!("f has length {}", v.len())));
        }
        Ok(v)
    }

    pub fn c(&self, t: f64, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let c = (self.c)(t, u)?;
        if c.shape() != (self.k, self.n) {
            return Err(Error::Dimension(format!("C has shape {:?}", c.shape())));
        }
        Ok(c)
    }

    /// `A(t,y,u)x + f(t,y,x,u)` with `y` supplied externally.
    pub fn rhs_with_output(
        &self,
        t: f64,
        y: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(self.a(t, y, u)? * x + self.f(t, y, x, u)?)
    }

    /// Plant right-hand side, with `y = C(t,u)x`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.c(t, u)? * x;
        self.rhs_with_output(t, &y, x, u)
    }

    /// True when `f` does not depend on the state, so reconstruction is
    /// exact after a single step.
    pub fn is_linear(&self) -> bool {
        self.triangular.as_ref().is_some_and(|s| {
            s.f.iter().all(|e| {
                e.variables()
                    .iter()
                    .all(|v| !matches!(v, Var::X(j) if *j >= 2))
            })
        })
    }
}

/// Input signal `u(t)`: one expression in `t` per channel, or a
/// piecewise-constant table (`values[i]` holds on `[breakpoints[i], breakpoints[i+1])`).
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Expressions(Vec<Expr>),
    Table {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl InputSignal {
    pub fn constant(values: &[f64]) -> Self {
        InputSignal::Expressions(values.iter().map(|v| Expr::Num(*v)).collect())
    }

    pub fn expressions(exprs: Vec<Expr>) -> Result<Self> {
        for e in &exprs {
            if let Some(v) = e.variables().into_iter().find(|v| *v != Var::T) {
                return Err(Error::Build(format!(
                    "input expression may only reference t, found `{v}`"
                )));
            }
        }
        Ok(InputSignal::Expressions(exprs))
    }

    pub fn table(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::Build(
                "input table needs one value row per breakpoint".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Build(
                "input table breakpoints must be strictly increasing".into(),
            ));
        }
        let m = values[0].len();
        if values.iter().any(|r| r.len() != m) {
            return Err(Error::Build("input table rows differ in width".into()));
        }
        Ok(InputSignal::Table {
            breakpoints,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSignal::Expressions(e) => e.len(),
            InputSignal::Table { values, .. } => values[0].len(),
        }
    }

    pub fn at(&self, t: f64) -> Result<DVector<f64>> {
        match self {
            InputSignal::Expressions(exprs) => {
                let b = Bindings {
                    t: Some(t),
                    ..Default::default()
                };
                let vals = exprs
                    .iter()
                    .map(|e| {
                        e.eval(&b).map_err(|source| Error::Eval {
                            point: format!("u(t={t})"),
                            source,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DVector::from_vec(vals))
            }
            InputSignal::Table {
                breakpoints,
                values,
            } => {
                let idx = breakpoints.partition_point(|b| *b <= t).saturating_sub(1);
                Ok(DVector::from_column_slice(&values[idx]))
            }
        }
    }
}

/// Triangular system `ẋ_i = a_{i+1}(t,x1,u)x_{i+1} + f_i(t,x1,u)`,
/// `ẋ_n = f_n(t,x,u)`, `y = x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularSpec {
    pub n: usize,
    pub m: usize,
    /// `a_2 .. a_n`, in `(t, y, u)`; `x1` is accepted as a synonym for `y`.
    pub a: Vec<Expr>,
    /// `f_1 .. f_n`.
    pub f: Vec<Expr>,
}

impl TriangularSpec {
    pub fn parse(n: usize, m: usize, a: &[&str], f: &[&str]) -> Result<Self> {
        let a = a
            .iter()
            .map(|s| Expr::parse(s))
            .collect::<std::result::Result<_, _>>()?;
        let f = f
            .iter()
            .map(|s| Expr::parse(s))
            .collect::<std::result::Result<_, _>>()?;
        let spec = Self { n, m, a, f };
        spec.validate()?;
        Ok(spec)
    }

    /// Static dependency scan of every expression.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Build("n must be at least 1".into()));
        }
        if self.a.len() != n - 1 {
            return Err(Error::Build(format!(
                "expected {} coefficient expressions a_2..a_n, got {}",
                n - 1,
                self.a.len()
            )));
        }
        if self.f.len() != n {
            return Err(Error::Build(format!(
                "expected {n} drift expressions, got {}",
                self.f.len()
            )));
        }
        for (i, e) in self.a.iter().enumerate() {
            e.check_dimensions(n, self.m)?;
            if let Some(v) = e
                .variables()
                .into_iter()
                .find(|v| matches!(v, Var::X(j) if *j >= 2))
            {
                return Err(Error::Build(format!(
                    "a_{} may depend only on (t, y, u), found `{v}`",
                    i + 2
                )));
            }
        }
        for (i, e) in self.f.iter().enumerate() {
            e.check_dimensions(n, self.m)?;
            if i + 1 < n {
                if let Some(v) = e
                    .variables()
                    .into_iter()
                    .find(|v| matches!(v, Var::X(j) if *j >= 2))
                {
                    return Err(Error::Build(format!(
                        "f_{} may depend only on (t, x1, u), found `{v}`",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn coefficients(&self, t: f64, y: f64, u: &[f64]) -> Result<Vec<f64>> {
        let x = [y];
        let b = Bindings {
            t: Some(t),
            y: Some(y),
            u,
            x: &x,
        };
        self.a
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&b).map_err(|source| Error::Eval {
                    point: format!("a_{}(t={t}, y={y})", i + 2),
                    source,
                })
            })
            .collect()
    }

    fn drift(&self, t: f64, y: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let b = Bindings {
            t: Some(t),
            y: Some(y),
            u,
            x,
        };
        self.f
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&b).map_err(|source| Error::Eval {
                    point: format!("f_{}(t={t}, y={y}, x={x:?})", i + 1),
                    source,
                })
            })
            .collect()
    }

    /// Right-hand side evaluated on the raw state, without output injection.
    pub fn raw_rhs(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let coeff = self.coefficients(t, x[0], u.as_slice())?;
        let f = self.drift(t, x[0], x.as_slice(), u.as_slice())?;
        Ok(DVector::from_fn(self.n, |i, _| {
            let lin = if i + 1 < self.n {
                coeff[i] * x[i + 1]
            } else {
                0.0
            };
            lin + f[i]
        }))
    }

    /// `∏ a_i(t0, y0, u0)`.
    pub fn coefficient_product(&self, t: f64, y: f64, u: &[f64]) -> Result<f64> {
        Ok(self.coefficients(t, y, u)?.iter().product())
    }
}

/// Builds the `(A, f, C)` triple of a triangular system with output
/// injection: the measured `y` replaces `x1` inside `A` and `f`.
pub fn build_triangular(spec: TriangularSpec) -> Result<SystemModel> {
    spec.validate()?;
    let spec = Arc::new(spec);
    let n = spec.n;

    let sa = spec.clone();
    let a = move |t: f64, y: &DVector<f64>, u: &DVector<f64>| -> Result<DMatrix<f64>> {
        let coeff = sa.coefficients(t, y[0], u.as_slice())?;
        let mut a = DMatrix::zeros(n, n);
        for (i, c) in coeff.into_iter().enumerate() {
            a[(i, i + 1)] = c;
        }
        Ok(a)
    };

    let sf = spec.clone();
    let f = move |t: f64, y: &DVector<f64>, x: &DVector<f64>, u: &DVector<f64>| {
        let mut injected = x.clone();
        injected[0] = y[0];
        Ok(DVector::from_vec(sf.drift(
            t,
            y[0],
            injected.as_slice(),
            u.as_slice(),
        )?))
    };

    let c = move |_t: f64, _u: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut c = DMatrix::zeros(1, n);
        c[(0, 0)] = 1.0;
        Ok(c)
    };

    let mut model = SystemModel::new(n, spec.m, 1, a, f, c)?;
    model.triangular = Some(spec);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H2Verdict {
    pub product: f64,
    pub pass: bool,
}

pub const H2_THRESHOLD: f64 = 1e-12;

/// Observability product condition `∏ a_i(t0, y0, u0) ≠ 0`, with
/// `|product| > threshold` standing in for non-vanishing.
pub fn check_h2(
    model: &SystemModel,
    t0: f64,
    y0: f64,
    u0: &DVector<f64>,
    threshold: f64,
) -> Result<H2Verdict> {
    let spec = model
        .triangular()
        .ok_or_else(|| Error::Unsupported("H2 applies to triangular-built models only".into()))?;
    let product = spec.coefficient_product(t0, y0, u0.as_slice())?;
    Ok(H2Verdict {
        product,
        pass: product.abs() > threshold,
    })
}

/// Sampling box for [`estimate_lipschitz`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBox {
    pub t: (f64, f64),
    pub y: (f64, f64),
    pub radius: f64,
    pub u: Vec<(f64, f64)>,
}

const LIPSCHITZ_SAFETY: f64 = 1.5;
const RUNG_FLOOR: f64 = 1.0 / 1024.0;
const RUNGS_PER_OCTAVE: f64 = 8.0;

/// Sampled Lipschitz constant of `f` in `x` over the box, times a 1.5 margin.
///
/// State samples are drawn as fixed unit-ball points scaled onto a ladder of
/// radii `2^{j/8}/1024` up to the first rung at or above `box.radius`. A
/// larger ball only adds rungs, so the estimate is monotone in the radius
/// for a fixed seed. Half the pairs are independent points, half are local
/// pairs on or inside the sphere, which is where polynomial slopes peak.
pub fn estimate_lipschitz(
    model: &SystemModel,
    bx: &LipschitzBox,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 100 {
        return Err(Error::InvalidArgument(format!(
            "estimate_lipschitz needs at least 100 samples, got {samples}"
        )));
    }
    if !(bx.radius > 0.0) {
        return Err(Error::InvalidArgument(
            "ball radius must be positive".into(),
        ));
    }
    if bx.u.len() != model.m() {
        return Err(Error::Dimension(format!(
            "box has {} input ranges for {} inputs",
            bx.u.len(),
            model.m()
        )));
    }
    let n = model.n();
    let k = model.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };

    struct Sample {
        t: f64,
        y: DVector<f64>,
        u: DVector<f64>,
        z1: DVector<f64>,
        z2: DVector<f64>,
    }

    let mut base = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = uniform(&mut rng, bx.t);
        let y = DVector::from_fn(k, |_, _| uniform(&mut rng, bx.y));
        let u = DVector::from_fn(model.m(), |j, _| uniform(&mut rng, bx.u[j]));
        let z1 = unit_ball_point(&mut rng, n, i % 4 == 0);
        let z2 = if i % 2 == 0 {
            unit_ball_point(&mut rng, n, false)
        } else {
            let dir = unit_ball_point(&mut rng, n, true);
            let cand = &z1 + dir * 1e-4;
            let norm = cand.norm();
            if norm > 1.0 {
                cand / norm
            } else {
                cand
            }
        };
        base.push(Sample { t, y, u, z1, z2 });
    }

    let mut rungs = Vec::new();
    let mut j = 0u32;
    loop {
        let r = RUNG_FLOOR * 2f64.powf(f64::from(j) / RUNGS_PER_OCTAVE);
        rungs.push(r);
        if r >= bx.radius {
            break;
        }
        j += 1;
    }

    let mut best = 0.0_f64;
    for r in rungs {
        for s in &base {
            let z1 = &s.z1 * r;
            let z2 = &s.z2 * r;
            let dz = (&z1 - &z2).norm();
            if dz == 0.0 {
                continue;
            }
            let eval = |z: &DVector<f64>| {
                model.f(s.t, &s.y, z, &s.u).and_then(|v| {
                    if v.iter().all(|x| x.is_finite()) {
                        Ok(v)
                    } else {
                        Err(Error::Eval {
                            point: format!("f(t={}, x={:?})", s.t, z.as_slice()),
                            source: ExprError::NonFinite,
                        })
                    }
                })
            };
            let df = (eval(&z1)? - eval(&z2)?).norm();
            best = best.max(df / dz);
        }
    }
    Ok(LIPSCHITZ_SAFETY * best)
}

fn unit_ball_point(rng: &mut ChaCha8Rng, n: usize, on_sphere: bool) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let norm = v.norm();
        if norm > 1e-12 && norm <= 1.0 {
            return if on_sphere { v / norm } else { v };
        }
    }
}

/// Simulates the plant from `x0` and records `y = C(t,u(t))x(t)`.
pub fn simulate_truth(
    model: &SystemModel,
    x0: &DVector<f64>,
    u: &InputSignal,
    grid: &TimeGrid,
) -> Result<(Trajectory, Trajectory)> {
    if x0.len() != model.n() {
        return Err(Error::Dimension(format!(
            "x0 has length {} for n = {}",
            x0.len(),
            model.n()
        )));
    }
    let x = integrate_ode(|t, x| model.rhs(t, x, &u.at(t)?), x0.clone(), grid)?;
    let ys = grid
        .nodes()
        .zip(x.values())
        .map(|(t, xv)| Ok(model.c(t, &u.at(t)?)? * xv))
        .collect::<Result<Vec<_>>>()?;
    let y = Trajectory::new(*grid, ys)?;
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn planar() -> SystemModel {
        build_triangular(TriangularSpec::parse(2, 1, &["u1"], &["0", "x1 - x2^3"]).unwrap())
            .unwrap()
    }

    #[test]
    fn planar_example_matrices() {
        let m = planar();
        let y = dvector![1.5];
        let u = dvector![0.7];
        assert_eq!(m.a(0.3, &y, &u).unwrap(), dmatrix![0.0, 0.7; 0.0, 0.0]);
        let x = dvector![9.0, 2.0];
        // x1 is replaced by the measured y.
        assert_eq!(m.f(0.3, &y, &x, &u).unwrap(), dvector![0.0, 1.5 - 8.0]);
        assert_eq!(m.c(0.3, &u).unwrap(), dmatrix![1.0, 0.0]);
        assert_eq!(m.k(), 1);
    }

    #[test]
    fn scalar_and_chain_builds() {
        let m = build_triangular(TriangularSpec::parse(1, 0, &[], &["0"]).unwrap()).unwrap();
        let e = DVector::zeros(0);
        assert_eq!(m.a(0.0, &dvector![1.0], &e).unwrap(), dmatrix![0.0]);
        assert_eq!(m.c(0.0, &e).unwrap(), dmatrix![1.0]);

        let m =
            build_triangular(TriangularSpec::parse(3, 0, &["1", "1"], &["0", "0", "0"]).unwrap())
                .unwrap();
        let a = m.a(4.0, &dvector![2.0], &e).unwrap();
        assert_eq!(a, dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 0.0, 0.0, 0.0]);
        assert_eq!(&a * &a * &a, DMatrix::zeros(3, 3));
    }

    #[test]
    fn dependency_violation_is_rejected() {
        let err = TriangularSpec::parse(2, 1, &["u1"], &["x2", "0"]).unwrap_err();
        assert!(matches!(err, Error::Build(_)), "{err:?}");
        let err = TriangularSpec::parse(3, 0, &["x3", "1"], &["0", "0", "0"]).unwrap_err();
        assert!(matches!(err, Error::Build(_)));
        assert!(TriangularSpec::parse(2, 1, &["u2"], &["0", "0"]).is_err());
        assert!(TriangularSpec::parse(2, 1, &[], &["0", "0"]).is_err());
    }

    #[test]
    fn output_injection_matches_raw_rhs_along_truth() {
        let m = planar();
        let spec = m.triangular().unwrap().clone();
        let u = InputSignal::constant(&[1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let (x, y) = simulate_truth(&m, &dvector![2.0, 0.0], &u, &grid).unwrap();
        for (i, t) in grid.nodes().enumerate() {
            let uv = u.at(t).unwrap();
            let injected = m.rhs_with_output(t, y.value(i), x.value(i), &uv).unwrap();
            assert_eq!(injected, spec.raw_rhs(t, x.value(i), &uv).unwrap());
        }
    }

    #[test]
    fn h2_examples() {
        let m = planar();
        let v = check_h2(&m, 0.0, 2.0, &dvector![1.0], H2_THRESHOLD).unwrap();
        assert_eq!(
            v,
            H2Verdict {
                product: 1.0,
                pass: true
            }
        );

        let m =
            build_triangular(TriangularSpec::parse(2, 0, &["t"], &["0", "0"]).unwrap()).unwrap();
        let v = check_h2(&m, 0.0, 1.0, &DVector::zeros(0), H2_THRESHOLD).unwrap();
        assert_eq!(
            v,
            H2Verdict {
                product: 0.0,
                pass: false
            }
        );

        let m =
            build_triangular(TriangularSpec::parse(3, 0, &["2", "-3"], &["0", "0", "0"]).unwrap())
                .unwrap();
        let v = check_h2(&m, 0.0, 1.0, &DVector::zeros(0), H2_THRESHOLD).unwrap();
        assert_eq!(
            v,
            H2Verdict {
                product: -6.0,
                pass: true
            }
        );
    }

    #[test]
    fn h2_needs_triangular_model() {
        let m = SystemModel::new(
            1,
            0,
            1,
            |_, _, _| Ok(dmatrix![0.0]),
            |_, _, _, _| Ok(dvector![0.0]),
            |_, _| Ok(dmatrix![1.0]),
        )
        .unwrap();
        assert!(matches!(
            check_h2(&m, 0.0, 0.0, &DVector::zeros(0), H2_THRESHOLD),
            Err(Error::Unsupported(_))
        ));
    }

    fn lip_box(radius: f64) -> LipschitzBox {
        LipschitzBox {
            t: (0.0, 1.0),
            y: (-3.0, 3.0),
            radius,
            u: vec![(1.0, 1.0)],
        }
    }

    #[test]
    fn lipschitz_examples() {
        let zero =
            build_triangular(TriangularSpec::parse(2, 1, &["u1"], &["0", "0"]).unwrap()).unwrap();
        assert_eq!(
            estimate_lipschitz(&zero, &lip_box(3.0), 200, 1).unwrap(),
            0.0
        );

        let c = estimate_lipschitz(&planar(), &lip_box(3.0), 400, 7).unwrap();
        assert!(c >= 27.0, "C = {c}");

        let sat = SystemModel::new(
            2,
            1,
            1,
            |_, _, _| Ok(DMatrix::zeros(2, 2)),
            |_, _, x, _| Ok(dvector![x[0].clamp(-1.0, 1.0), 0.0]),
            |_, _| Ok(dmatrix![1.0, 0.0]),
        )
        .unwrap();
        let c = estimate_lipschitz(&sat, &lip_box(3.0), 400, 7).unwrap();
        assert!((1.0..=1.6).contains(&c), "C = {c}");
    }

    #[test]
    fn lipschitz_rejects_few_samples_and_bad_points() {
        assert!(estimate_lipschitz(&planar(), &lip_box(3.0), 99, 0).is_err());
        let bad =
            build_triangular(TriangularSpec::parse(2, 1, &["u1"], &["0", "1/(x2 - x2)"]).unwrap())
                .unwrap();
        assert!(matches!(
            estimate_lipschitz(&bad, &lip_box(1.0), 100, 0),
            Err(Error::Eval { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lipschitz_monotone_in_radius(r in 0.1f64..4.0, grow in 1.0f64..3.0, seed in 0u64..1000) {
            let sat = build_triangular(
                TriangularSpec::parse(2, 1, &["u1"], &["0", "y - sat(x2)^3 + sin(3*x2)"]).unwrap(),
            ).unwrap();
            let small = estimate_lipschitz(&sat, &lip_box(r), 100, seed).unwrap();
            let large = estimate_lipschitz(&sat, &lip_box(r * grow), 100, seed).unwrap();
            prop_assert!(large >= small);
        }

        #[test]
        fn h2_verdict_ignores_drift(c in -5.0f64..5.0) {
            let f2 = format!("{c}*x2^3 + x1");
            let m = build_triangular(
                TriangularSpec::parse(2, 1, &["u1"], &["0", &f2]).unwrap(),
            ).unwrap();
            let base = check_h2(&planar(), 0.0, 2.0, &dvector![1.0], H2_THRESHOLD).unwrap();
            let v = check_h2(&m, 0.0, 2.0, &dvector![1.0], H2_THRESHOLD).unwrap();
            prop_assert_eq!(base, v);
        }
    }

    #[test]
    fn truth_simulation_examples() {
        let m = planar();
        let u = InputSignal::constant(&[1.0]);
        let grid = TimeGrid::new(0.0, 5e-4, 100).unwrap();
        let (x, y) = simulate_truth(&m, &dvector![2.0, 0.0], &u, &grid).unwrap();
        assert_eq!(y.value(0)[0], 2.0);
        assert_eq!(x.value(0), &dvector![2.0, 0.0]);

        let still =
            build_triangular(TriangularSpec::parse(2, 0, &["0"], &["0", "0"]).unwrap()).unwrap();
        let none = InputSignal::Expressions(vec![]);
        let (x, y) = simulate_truth(&still, &dvector![3.0, -1.0], &none, &grid).unwrap();
        assert!(x.values().iter().all(|v| v == &dvector![3.0, -1.0]));
        assert!(y.values().iter().all(|v| v[0] == 3.0));

        let chain =
            build_triangular(TriangularSpec::parse(2, 0, &["1"], &["0", "0"]).unwrap()).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 50).unwrap();
        let (_, y) = simulate_truth(&chain, &dvector![0.0, 1.0], &none, &grid).unwrap();
        for (i, t) in grid.nodes().enumerate() {
            assert!((y.value(i)[0] - t).abs() < 1e-10);
        }
    }

    #[test]
    fn input_table_is_piecewise_constant() {
        let u = InputSignal::table(vec![0.0, 1.0, 2.5], vec![vec![1.0], vec![-1.0], vec![0.5]])
            .unwrap();
        assert_eq!(u.at(-1.0).unwrap()[0], 1.0);
        assert_eq!(u.at(0.99).unwrap()[0], 1.0);
        assert_eq!(u.at(1.0).unwrap()[0], -1.0);
        assert_eq!(u.at(9.0).unwrap()[0], 0.5);
        assert!(InputSignal::table(vec![0.0, 0.0], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(InputSignal::expressions(vec![Expr::parse("x1").unwrap()]).is_err());
    }
}
