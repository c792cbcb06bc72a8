use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::{DType, Scalar};

/// First-order dual number `re + eps * tan`.
///
/// Running the reverse-mode tape on `Dual` values gives forward-over-reverse
/// derivatives: the tangent part of a gradient is a Hessian-vector product.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub tan: f64,
}

impl Dual {
    pub const fn new(re: f64, tan: f64) -> Self {
        Dual { re, tan }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.tan + o.tan)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.tan - o.tan)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.tan + self.tan * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.tan - q * o.tan) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.tan)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    const DTYPE: DType = DType::Dual64;
    const HAS_TANGENT: bool = true;

    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn primal(self) -> f64 {
        self.re
    }
    fn tangent(self) -> f64 {
        self.tan
    }
    fn detach(self) -> Self {
        Dual::new(self.re, 0.0)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.tan)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.tan / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        let t = if s == 0.0 { 0.0 } else { self.tan / (2.0 * s) };
        Dual::new(s, t)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.tan)
    }
}
