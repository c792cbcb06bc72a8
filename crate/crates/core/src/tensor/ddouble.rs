use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::{DType, Scalar};

/// Unevaluated sum of two `f64`s (about 106 bits of significand).
///
/// Used to evaluate central-difference oracles without the `f64`
/// cancellation floor; not used for training.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const fn new(hi: f64, lo: f64) -> Self {
        DoubleDouble { hi, lo }
    }

    fn from_parts(hi: f64, lo: f64) -> Self {
        let (h, l) = quick_two_sum(hi, lo);
        DoubleDouble { hi: h, lo: l }
    }

    fn mul_pow2(self, s: f64) -> Self {
        DoubleDouble::new(self.hi * s, self.lo * s)
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DoubleDouble::from_parts(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble::new(-self.hi, -self.lo)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        DoubleDouble::from_parts(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * DoubleDouble::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * DoubleDouble::from_f64(q2);
        let q3 = r.hi / b.hi;
        DoubleDouble::from_parts(q1, q2) + DoubleDouble::from_f64(q3)
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl SubAssign for DoubleDouble {
    fn sub_assign(&mut self, b: Self) {
        *self = *self - b;
    }
}

impl MulAssign for DoubleDouble {
    fn mul_assign(&mut self, b: Self) {
        *self = *self * b;
    }
}

impl Scalar for DoubleDouble {
    const DTYPE: DType = DType::DoubleDouble;

    fn from_f64(v: f64) -> Self {
        DoubleDouble::new(v, 0.0)
    }

    fn primal(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return DoubleDouble::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return DoubleDouble::from_f64(0.0);
        }
        let k = (self.hi / LN2.hi).round();
        // r = (x - k ln2) / 1024, so |r| < 3.4e-4
        let r = (self - LN2 * DoubleDouble::from_f64(k)).mul_pow2(1.0 / 1024.0);
        // s = exp(r) - 1 by Taylor series
        let mut term = r;
        let mut s = r;
        for n in 2..=14 {
            term = term * r / DoubleDouble::from_f64(n as f64);
            s += term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        // (1 + s)^2 - 1 = 2s + s^2, ten times
        for _ in 0..10 {
            s = s.mul_pow2(2.0) + s * s;
        }
        (s + DoubleDouble::from_f64(1.0)).mul_pow2(2f64.powi(k as i32))
    }

    fn ln(self) -> Self {
        if !(self.hi > 0.0) {
            return DoubleDouble::from_f64(f64::NAN);
        }
        // one Newton step on exp(y) = x from the f64 estimate
        let y = DoubleDouble::from_f64(self.hi.ln());
        y + self * (-y).exp() - DoubleDouble::from_f64(1.0)
    }

    fn sqrt(self) -> Self {
        if self.hi == 0.0 {
            return DoubleDouble::from_f64(0.0);
        }
        if self.hi < 0.0 {
            return DoubleDouble::from_f64(f64::NAN);
        }
        let x = 1.0 / self.hi.sqrt();
        let y = self.hi * x;
        let yy = DoubleDouble::from_f64(y) * DoubleDouble::from_f64(y);
        DoubleDouble::from_f64(y) + DoubleDouble::from_f64((self - yy).hi * x * 0.5)
    }

    fn tanh(self) -> Self {
        let one = DoubleDouble::from_f64(1.0);
        if self.hi.abs() > 0.5 {
            let e = self.mul_pow2(2.0).exp();
            return (e - one) / (e + one);
        }
        // sinh by Taylor series, then tanh = sinh / sqrt(1 + sinh^2)
        let x2 = self * self;
        let mut term = self;
        let mut s = self;
        for k in 1..=14 {
            term = term * x2 / DoubleDouble::from_f64(((2 * k) * (2 * k + 1)) as f64);
            s += term;
            if term.abs().hi < 1e-36 {
                break;
            }
        }
        s / (one + s * s).sqrt()
    }
}
