//! Separable raking losses and their convex conjugates.
//!
//! Every loss is a sum of per-coordinate distances `w_i f_i(beta_i; y_i)` with
//! `f_i(y_i; y_i) = 0`. The dual solvers only ever touch the conjugate side:
//! the value `w f*(z / w)`, its gradient `grad f*(z / w)` (the primal recovery
//! map) and the diagonal of its Hessian `hess f*(z / w) / w`.
//!
//! Two limits are handled exactly rather than numerically:
//!
//! * `w = inf` pins the coordinate at `y` (the conjugate collapses to `y z`).
//! * entropic `y = 0` pins the coordinate at `0` (the conjugate is identically 0).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("coordinate {index}: beta = {beta} is outside the domain of the {kind} loss")]
    Domain { kind: LossKind, index: usize, beta: f64 },
    #[error("coordinate {index}: reference value {y} is invalid for the {kind} loss ({reason})")]
    Reference { kind: LossKind, index: usize, y: f64, reason: &'static str },
    #[error("coordinate {index}: weight {w} must be positive (inf allowed)")]
    Weight { index: usize, w: f64 },
    #[error("coordinate {index}: logistic bounds require l < y < u, got l = {lower}, y = {y}, u = {upper}")]
    Bounds { index: usize, lower: f64, y: f64, upper: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
}

/// Which distance is used. One kind per problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `(beta - y)^2 / (2 y)`.
    Chi2,
    /// `beta ln(beta / y) - (beta - y)`.
    Entropic,
    /// Two-sided entropic distance on `(l, u)`.
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Chi2 => "chi2",
            LossKind::Entropic => "entropic",
            LossKind::Logistic => "logistic",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "chi2" | "chi-square" | "chisquare" => Ok(LossKind::Chi2),
            "entropic" | "entropy" => Ok(LossKind::Entropic),
            "logistic" | "logit" => Ok(LossKind::Logistic),
            other => Err(format!("unknown loss `{other}` (expected chi2, entropic or logistic)")),
        }
    }
}

/// A separable loss over a fixed set of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    kind: LossKind,
    y: Vec<f64>,
    w: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Loss {
    /// Chi-square or entropic loss. Use [`Loss::logistic`] for bounded values.
    pub fn new(kind: LossKind, y: Vec<f64>, w: Vec<f64>) -> Result<Self, LossError> {
        assert!(kind != LossKind::Logistic, "logistic losses need bounds, use Loss::logistic");
        let n = y.len();
        let loss = Loss { kind, y, w, lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] };
        loss.validate()?;
        Ok(loss)
    }

    pub fn unweighted(kind: LossKind, y: Vec<f64>) -> Result<Self, LossError> {
        let n = y.len();
        Self::new(kind, y, vec![1.0; n])
    }

    pub fn logistic(y: Vec<f64>, w: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, LossError> {
        let loss = Loss { kind: LossKind::Logistic, y, w, lower, upper };
        loss.validate()?;
        Ok(loss)
    }

    fn validate(&self) -> Result<(), LossError> {
        let n = self.y.len();
        for len in [self.w.len(), self.lower.len(), self.upper.len()] {
            if len != n {
                return Err(LossError::Length { expected: n, got: len });
            }
        }
        for i in 0..n {
            let (y, w) = (self.y[i], self.w[i]);
            if w.is_nan() || w <= 0.0 {
                return Err(LossError::Weight { index: i, w });
            }
            match self.kind {
                LossKind::Chi2 => {
                    if !(y.is_finite() && y > 0.0) {
                        return Err(LossError::Reference {
                            kind: self.kind,
                            index: i,
                            y,
                            reason: "must be finite and > 0",
                        });
                    }
                }
                LossKind::Entropic => {
                    if !(y.is_finite() && y >= 0.0) {
                        return Err(LossError::Reference {
                            kind: self.kind,
                            index: i,
                            y,
                            reason: "must be finite and >= 0",
                        });
                    }
                }
                LossKind::Logistic => {
                    let (l, u) = (self.lower[i], self.upper[i]);
                    if !(l.is_finite() && u.is_finite() && l < y && y < u) {
                        return Err(LossError::Bounds { index: i, lower: l, y, upper: u });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn reference(&self) -> &[f64] {
        &self.y
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Same loss shape with new reference values. Bounds and weights are kept.
    pub fn with_reference(&self, y: Vec<f64>) -> Result<Self, LossError> {
        let loss = Loss { kind: self.kind, y, w: self.w.clone(), lower: self.lower.clone(), upper: self.upper.clone() };
        loss.validate()?;
        Ok(loss)
    }

    /// Whether coordinate `i` is pinned at its reference (infinite weight or
    /// entropic zero).
    pub fn is_frozen(&self, i: usize) -> bool {
        self.w[i].is_infinite() || (self.kind == LossKind::Entropic && self.y[i] == 0.0)
    }

    fn coord(&self, i: usize) -> Coord {
        Coord { kind: self.kind, y: self.y[i], l: self.lower[i], u: self.upper[i] }
    }

    /// Primal value `sum_i w_i f_i(beta_i; y_i)`. Frozen coordinates contribute
    /// 0 when `beta_i = y_i` and are outside the domain otherwise.
    pub fn eval(&self, beta: &[f64]) -> Result<f64, LossError> {
        self.check_len(beta.len())?;
        let mut total = 0.0;
        for (i, &b) in beta.iter().enumerate() {
            let c = self.coord(i);
            let w = self.w[i];
            if w.is_infinite() {
                if b != c.y {
                    return Err(LossError::Domain { kind: self.kind, index: i, beta: b });
                }
                continue;
            }
            let v = c.value(b).ok_or(LossError::Domain { kind: self.kind, index: i, beta: b })?;
            total += w * v;
        }
        Ok(total)
    }

    /// Primal gradient `w_i f_i'(beta_i)`.
    pub fn grad(&self, beta: &[f64]) -> Result<Vec<f64>, LossError> {
        self.check_len(beta.len())?;
        beta.iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = self.coord(i);
                c.derivative(b).map(|d| self.w[i] * d).ok_or(LossError::Domain { kind: self.kind, index: i, beta: b })
            })
            .collect()
    }

    /// Diagonal of the primal Hessian `w_i f_i''(beta_i)`.
    pub fn hess_diag(&self, beta: &[f64]) -> Result<Vec<f64>, LossError> {
        self.check_len(beta.len())?;
        beta.iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = self.coord(i);
                c.curvature(b).map(|d| self.w[i] * d).ok_or(LossError::Domain { kind: self.kind, index: i, beta: b })
            })
            .collect()
    }

    /// Diagonal of the mixed derivative `w_i d^2 f_i / (d beta_i d y_i)`.
    pub fn mixed_diag(&self, beta: &[f64]) -> Result<Vec<f64>, LossError> {
        self.check_len(beta.len())?;
        beta.iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = self.coord(i);
                c.mixed(b).map(|d| self.w[i] * d).ok_or(LossError::Domain { kind: self.kind, index: i, beta: b })
            })
            .collect()
    }

    /// Conjugate value `sum_i w_i f_i*(z_i / w_i)`.
    pub fn conjugate(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.len());
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let w = self.w[i];
                let c = self.coord(i);
                if w.is_infinite() {
                    c.y * zi
                } else {
                    w * c.conj(zi / w)
                }
            })
            .sum()
    }

    /// Recovery map `beta_i = grad f_i*(z_i / w_i)`, written into `out`.
    pub fn grad_conjugate_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.len());
        for (i, (o, &zi)) in out.iter_mut().zip(z).enumerate() {
            let w = self.w[i];
            let c = self.coord(i);
            *o = if w.is_infinite() { c.y } else { c.conj_grad(zi / w) };
        }
    }

    pub fn grad_conjugate(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.grad_conjugate_into(z, &mut out);
        out
    }

    /// Diagonal of the conjugate Hessian `hess f_i*(z_i / w_i) / w_i`.
    pub fn hess_conjugate_diag_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.len());
        for (i, (o, &zi)) in out.iter_mut().zip(z).enumerate() {
            let w = self.w[i];
            let c = self.coord(i);
            *o = if w.is_infinite() { 0.0 } else { c.conj_hess(zi / w) / w };
        }
    }

    pub fn hess_conjugate_diag(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.hess_conjugate_diag_into(z, &mut out);
        out
    }

    fn check_len(&self, got: usize) -> Result<(), LossError> {
        if got != self.len() {
            return Err(LossError::Length { expected: self.len(), got });
        }
        Ok(())
    }
}

/// One coordinate of a loss, unweighted.
#[derive(Debug, Clone, Copy)]
struct Coord {
    kind: LossKind,
    y: f64,
    l: f64,
    u: f64,
}

/// `x ln(x / y)` with the `0 ln 0 = 0` convention.
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Coord {
    fn value(self, b: f64) -> Option<f64> {
        match self.kind {
            LossKind::Chi2 => b.is_finite().then(|| (b - self.y).powi(2) / (2.0 * self.y)),
            LossKind::Entropic => {
                if self.y == 0.0 {
                    return (b == 0.0).then_some(0.0);
                }
                (b >= 0.0 && b.is_finite()).then(|| xlogx_over(b, self.y) - (b - self.y))
            }
            LossKind::Logistic => {
                let (l, u, y) = (self.l, self.u, self.y);
                (b >= l && b <= u).then(|| xlogx_over(b - l, y - l) + xlogx_over(u - b, u - y))
            }
        }
    }

    fn derivative(self, b: f64) -> Option<f64> {
        match self.kind {
            LossKind::Chi2 => b.is_finite().then(|| (b - self.y) / self.y),
            LossKind::Entropic => (b > 0.0 && self.y > 0.0).then(|| (b / self.y).ln()),
            LossKind::Logistic => {
                let (l, u, y) = (self.l, self.u, self.y);
                (b > l && b < u).then(|| ((b - l) / (y - l)).ln() - ((u - b) / (u - y)).ln())
            }
        }
    }

    fn curvature(self, b: f64) -> Option<f64> {
        match self.kind {
            LossKind::Chi2 => Some(1.0 / self.y),
            LossKind::Entropic => (b > 0.0).then(|| 1.0 / b),
            LossKind::Logistic => (b > self.l && b < self.u).then(|| 1.0 / (b - self.l) + 1.0 / (self.u - b)),
        }
    }

    fn mixed(self, b: f64) -> Option<f64> {
        match self.kind {
            LossKind::Chi2 => Some(-b / (self.y * self.y)),
            LossKind::Entropic => (self.y > 0.0).then(|| -1.0 / self.y),
            LossKind::Logistic => Some(-1.0 / (self.y - self.l) - 1.0 / (self.u - self.y)),
        }
    }

    /// Logit of the rescaled reference `(y - l) / (u - l)`.
    fn logistic_offset(self) -> f64 {
        ((self.y - self.l) / (self.u - self.y)).ln()
    }

    fn conj(self, z: f64) -> f64 {
        match self.kind {
            LossKind::Chi2 => self.y * (0.5 * z * z + z),
            LossKind::Entropic => self.y * z.exp_m1(),
            LossKind::Logistic => {
                // (u-l) log(ty e^z + 1 - ty) + l z
                let width = self.u - self.l;
                if z < 30.0 {
                    let ty = (self.y - self.l) / width;
                    width * (ty * z.exp_m1()).ln_1p() + self.l * z
                } else {
                    // ty e^z + 1 - ty = (1 - ty)(1 + e^{z + logit ty})
                    let one_minus = (self.u - self.y) / width;
                    width * (one_minus.ln() + softplus(z + self.logistic_offset())) + self.l * z
                }
            }
        }
    }

    fn conj_grad(self, z: f64) -> f64 {
        match self.kind {
            LossKind::Chi2 => self.y * (z + 1.0),
            LossKind::Entropic => self.y * z.exp(),
            LossKind::Logistic => self.l + (self.u - self.l) * sigmoid(z + self.logistic_offset()),
        }
    }

    fn conj_hess(self, z: f64) -> f64 {
        match self.kind {
            LossKind::Chi2 => self.y,
            LossKind::Entropic => self.y * z.exp(),
            LossKind::Logistic => {
                let s = sigmoid(z + self.logistic_offset());
                (self.u - self.l) * s * (1.0 - s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn logistic1(l: f64, u: f64, y: f64, w: f64) -> Loss {
        Loss::logistic(vec![y], vec![w], vec![l], vec![u]).unwrap()
    }

    #[test]
    fn eval_at_reference_is_zero() {
        let e = Loss::unweighted(LossKind::Entropic, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.eval(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let l = logistic1(0.0, 4.0, 2.0, 1.0);
        assert_eq!(l.eval(&[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn chi2_eval_direct_formula() {
        let c = Loss::unweighted(LossKind::Chi2, vec![2.0]).unwrap();
        assert_eq!(c.eval(&[4.0]).unwrap(), 1.0);
    }

    #[test]
    fn eval_outside_domain() {
        let e = Loss::unweighted(LossKind::Entropic, vec![1.0]).unwrap();
        assert!(matches!(e.eval(&[-0.5]), Err(LossError::Domain { .. })));
        let l = logistic1(0.0, 4.0, 2.0, 1.0);
        assert!(matches!(l.eval(&[4.5]), Err(LossError::Domain { .. })));
    }

    #[test]
    fn conjugate_examples() {
        let e = Loss::unweighted(LossKind::Entropic, vec![3.0]).unwrap();
        assert_eq!(e.conjugate(&[0.0]), 0.0);
        let l = logistic1(0.0, 4.0, 1.0, 1.0);
        assert!(l.conjugate(&[0.0]).abs() < 1e-15);
        let c = Loss::new(LossKind::Chi2, vec![2.0], vec![2.0]).unwrap();
        assert!(close(c.conjugate(&[1.0]), 2.5, 1e-15));
    }

    #[test]
    fn chi2_conjugate_matches_numerical_legendre_transform() {
        // max_x (x z - w f(x)) on a fine grid
        let (y, w, z) = (2.0, 2.0, 1.0);
        let c = Loss::new(LossKind::Chi2, vec![y], vec![w]).unwrap();
        let mut best = f64::NEG_INFINITY;
        let n = 400_000;
        for k in 0..=n {
            let x = -10.0 + 20.0 * k as f64 / n as f64;
            best = best.max(x * z - w * (x - y).powi(2) / (2.0 * y));
        }
        assert!((best - c.conjugate(&[z])).abs() < 1e-8);
    }

    #[test]
    fn grad_conjugate_examples() {
        let e = Loss::unweighted(LossKind::Entropic, vec![1.0, 2.0]).unwrap();
        assert_eq!(e.grad_conjugate(&[0.0, 0.0]), vec![1.0, 2.0]);
        let l = logistic1(0.0, 4.0, 1.0, 1.0);
        assert!(close(l.grad_conjugate(&[0.0])[0], 1.0, 1e-15));
        let c = Loss::unweighted(LossKind::Chi2, vec![3.0]).unwrap();
        assert_eq!(c.grad_conjugate(&[2.0]), vec![9.0]);
    }

    #[test]
    fn hess_conjugate_examples() {
        let c = Loss::unweighted(LossKind::Chi2, vec![1.0, 2.0]).unwrap();
        assert_eq!(c.hess_conjugate_diag(&[-3.0, 7.0]), vec![1.0, 2.0]);
        let e = Loss::unweighted(LossKind::Entropic, vec![2.0]).unwrap();
        assert_eq!(e.hess_conjugate_diag(&[0.0]), vec![2.0]);
        let ew = Loss::new(LossKind::Entropic, vec![2.0], vec![2.0]).unwrap();
        assert!(close(ew.hess_conjugate_diag(&[2.0])[0], std::f64::consts::E, 1e-15));
    }

    #[test]
    fn infinite_weight_pins_coordinate() {
        let e = Loss::new(LossKind::Entropic, vec![2.0], vec![f64::INFINITY]).unwrap();
        assert!(e.is_frozen(0));
        assert_eq!(e.grad_conjugate(&[5.0]), vec![2.0]);
        assert_eq!(e.hess_conjugate_diag(&[5.0]), vec![0.0]);
        assert_eq!(e.conjugate(&[5.0]), 10.0);
    }

    #[test]
    fn entropic_zero_reference_is_frozen_at_zero() {
        let e = Loss::unweighted(LossKind::Entropic, vec![0.0, 1.0]).unwrap();
        assert!(e.is_frozen(0));
        assert!(!e.is_frozen(1));
        assert_eq!(e.grad_conjugate(&[3.0, 0.0])[0], 0.0);
        assert_eq!(e.conjugate(&[3.0, 0.0]), 0.0);
        assert_eq!(e.eval(&[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn logistic_conjugate_is_stable_for_large_arguments() {
        let l = logistic1(0.5, 4.0, 2.0, 1.0);
        for z in [-800.0, -50.0, 50.0, 800.0] {
            let v = l.conjugate(&[z]);
            assert!(v.is_finite(), "z = {z}");
            let b = l.grad_conjugate(&[z])[0];
            assert!((0.5..=4.0).contains(&b));
        }
        // f*(z) ~ u z for z -> +inf and ~ l z for z -> -inf
        assert!(close(l.conjugate(&[800.0]), 4.0 * 800.0 + 3.5 * (1.5f64 / 3.5).ln(), 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(Loss::unweighted(LossKind::Chi2, vec![0.0]), Err(LossError::Reference { .. })));
        assert!(matches!(Loss::unweighted(LossKind::Entropic, vec![-1.0]), Err(LossError::Reference { .. })));
        assert!(matches!(Loss::logistic(vec![4.0], vec![1.0], vec![0.0], vec![4.0]), Err(LossError::Bounds { .. })));
        assert!(matches!(Loss::new(LossKind::Chi2, vec![1.0], vec![0.0]), Err(LossError::Weight { .. })));
        assert!(matches!(Loss::new(LossKind::Chi2, vec![1.0], vec![1.0, 2.0]), Err(LossError::Length { .. })));
    }

    #[test]
    fn mixed_derivatives_match_finite_differences() {
        let h = 1e-6;
        let beta = 1.7;
        for (kind, y) in [(LossKind::Chi2, 2.2), (LossKind::Entropic, 2.2), (LossKind::Logistic, 2.2)] {
            let mk = |y: f64| match kind {
                LossKind::Logistic => logistic1(0.5, 4.0, y, 1.0),
                k => Loss::unweighted(k, vec![y]).unwrap(),
            };
            let fd = (mk(y + h).grad(&[beta]).unwrap()[0] - mk(y - h).grad(&[beta]).unwrap()[0]) / (2.0 * h);
            let an = mk(y).mixed_diag(&[beta]).unwrap()[0];
            assert!(close(fd, an, 1e-7), "{kind}: fd {fd} vs {an}");
            let fd2 = (mk(y).grad(&[beta + h]).unwrap()[0] - mk(y).grad(&[beta - h]).unwrap()[0]) / (2.0 * h);
            let an2 = mk(y).hess_diag(&[beta]).unwrap()[0];
            assert!(close(fd2, an2, 1e-7), "{kind}: fd {fd2} vs {an2}");
        }
    }

    #[test]
    fn entropic_taylor_expansion_is_third_order() {
        let y = 2.0;
        let e = Loss::unweighted(LossKind::Entropic, vec![y]).unwrap();
        for d in [1e-1, 5e-2, 1e-2, 1e-3] {
            let b = y + d;
            let gap = (e.eval(&[b]).unwrap() - d * d / (2.0 * y)).abs();
            assert!(gap <= 0.1 * d.powi(3), "d = {d}, gap = {gap}");
        }
    }
}
