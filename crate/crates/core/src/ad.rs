//! Forward-mode algorithmic differentiation.
//!
//! [`Ad`] carries a value and a dense gradient with respect to a small set of
//! seeded inputs. A constant has an empty gradient, which behaves as the zero
//! vector of any length, so plain evaluation costs little more than `f64`
//! arithmetic. Model dynamics, costs and constraints are written once against
//! `Ad` and serve both value and derivative evaluation.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use smallvec::SmallVec;

pub type Grad = SmallVec<[f64; 8]>;

#[derive(Clone, Debug, PartialEq)]
pub struct Ad {
    pub val: f64,
    pub grad: Grad,
}

impl Ad {
    pub fn constant(val: f64) -> Self {
        Ad {
            val,
            grad: Grad::new(),
        }
    }

    /// Independent variable `idx` out of `dim` seeded inputs.
    pub fn variable(val: f64, idx: usize, dim: usize) -> Self {
        let mut grad = Grad::from_elem(0.0, dim);
        grad[idx] = 1.0;
        Ad { val, grad }
    }

    pub fn value(&self) -> f64 {
        self.val
    }

    /// Partial derivative with respect to seed `i` (zero for constants).
    pub fn d(&self, i: usize) -> f64 {
        self.grad.get(i).copied().unwrap_or(0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.grad.is_empty()
    }

    /// Applies a scalar function with known derivative `dv` at `self.val`.
    fn chain(&self, val: f64, dv: f64) -> Ad {
        Ad {
            val,
            grad: self.grad.iter().map(|g| g * dv).collect(),
        }
    }

    pub fn exp(&self) -> Ad {
        let e = self.val.exp();
        self.chain(e, e)
    }

    pub fn ln(&self) -> Ad {
        self.chain(self.val.ln(), 1.0 / self.val)
    }

    pub fn sqrt(&self) -> Ad {
        let s = self.val.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn sin(&self) -> Ad {
        self.chain(self.val.sin(), self.val.cos())
    }

    pub fn cos(&self) -> Ad {
        self.chain(self.val.cos(), -self.val.sin())
    }

    pub fn tanh(&self) -> Ad {
        let t = self.val.tanh();
        self.chain(t, 1.0 - t * t)
    }

    pub fn powi(&self, n: i32) -> Ad {
        let dv = if n == 0 {
            0.0
        } else {
            n as f64 * self.val.powi(n - 1)
        };
        self.chain(self.val.powi(n), dv)
    }

    pub fn powf(&self, p: f64) -> Ad {
        self.chain(self.val.powf(p), p * self.val.powf(p - 1.0))
    }

    pub fn square(&self) -> Ad {
        self.chain(self.val * self.val, 2.0 * self.val)
    }
}

impl From<f64> for Ad {
    fn from(v: f64) -> Self {
        Ad::constant(v)
    }
}

/// Elementwise combination of two gradients where an empty side is zero.
fn combine(a: &Grad, b: &Grad, fa: f64, fb: f64) -> Grad {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Grad::new(),
        (false, true) => a.iter().map(|x| x * fa).collect(),
        (true, false) => b.iter().map(|x| x * fb).collect(),
        (false, false) => {
            debug_assert_eq!(a.len(), b.len(), "mismatched seed dimensions");
            a.iter().zip(b).map(|(x, y)| x * fa + y * fb).collect()
        }
    }
}

impl Add<&Ad> for &Ad {
    type Output = Ad;
    fn add(self, rhs: &Ad) -> Ad {
        Ad {
            val: self.val + rhs.val,
            grad: combine(&self.grad, &rhs.grad, 1.0, 1.0),
        }
    }
}

impl Sub<&Ad> for &Ad {
    type Output = Ad;
    fn sub(self, rhs: &Ad) -> Ad {
        Ad {
            val: self.val - rhs.val,
            grad: combine(&self.grad, &rhs.grad, 1.0, -1.0),
        }
    }
}

impl Mul<&Ad> for &Ad {
    type Output = Ad;
    fn mul(self, rhs: &Ad) -> Ad {
        Ad {
            val: self.val * rhs.val,
            grad: combine(&self.grad, &rhs.grad, rhs.val, self.val),
        }
    }
}

impl Div<&Ad> for &Ad {
    type Output = Ad;
    fn div(self, rhs: &Ad) -> Ad {
        let inv = 1.0 / rhs.val;
        let val = self.val * inv;
        Ad {
            val,
            grad: combine(&self.grad, &rhs.grad, inv, -val * inv),
        }
    }
}

impl Neg for &Ad {
    type Output = Ad;
    fn neg(self) -> Ad {
        self.chain(-self.val, -1.0)
    }
}

impl Neg for Ad {
    type Output = Ad;
    fn neg(mut self) -> Ad {
        self.val = -self.val;
        self.grad.iter_mut().for_each(|g| *g = -*g);
        self
    }
}

macro_rules! forward_binop {
    ($tr:ident, $m:ident) => {
        impl $tr<Ad> for Ad {
            type Output = Ad;
            fn $m(self, rhs: Ad) -> Ad {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Ad> for Ad {
            type Output = Ad;
            fn $m(self, rhs: &Ad) -> Ad {
                (&self).$m(rhs)
            }
        }
        impl $tr<Ad> for &Ad {
            type Output = Ad;
            fn $m(self, rhs: Ad) -> Ad {
                self.$m(&rhs)
            }
        }
        impl $tr<f64> for Ad {
            type Output = Ad;
            fn $m(self, rhs: f64) -> Ad {
                (&self).$m(&Ad::constant(rhs))
            }
        }
        impl $tr<f64> for &Ad {
            type Output = Ad;
            fn $m(self, rhs: f64) -> Ad {
                self.$m(&Ad::constant(rhs))
            }
        }
        impl $tr<Ad> for f64 {
            type Output = Ad;
            fn $m(self, rhs: Ad) -> Ad {
                (&Ad::constant(self)).$m(&rhs)
            }
        }
        impl $tr<&Ad> for f64 {
            type Output = Ad;
            fn $m(self, rhs: &Ad) -> Ad {
                (&Ad::constant(self)).$m(rhs)
            }
        }
    };
}

forward_binop!(Add, add);
forward_binop!(Sub, sub);
forward_binop!(Mul, mul);
forward_binop!(Div, div);

impl AddAssign<&Ad> for Ad {
    fn add_assign(&mut self, rhs: &Ad) {
        *self = &*self + rhs;
    }
}

impl AddAssign<Ad> for Ad {
    fn add_assign(&mut self, rhs: Ad) {
        *self = &*self + &rhs;
    }
}

impl SubAssign<Ad> for Ad {
    fn sub_assign(&mut self, rhs: Ad) {
        *self = &*self - &rhs;
    }
}

impl MulAssign<f64> for Ad {
    fn mul_assign(&mut self, rhs: f64) {
        self.val *= rhs;
        self.grad.iter_mut().for_each(|g| *g *= rhs);
    }
}

impl std::iter::Sum for Ad {
    fn sum<I: Iterator<Item = Ad>>(iter: I) -> Ad {
        iter.fold(Ad::constant(0.0), |acc, x| acc + x)
    }
}

/// Wraps plain values as constants.
pub fn constants(values: &[f64]) -> Vec<Ad> {
    values.iter().copied().map(Ad::constant).collect()
}

/// Seeds `values` as the independent inputs `offset..offset + len` of a
/// `dim`-dimensional gradient.
pub fn seed(values: &[f64], offset: usize, dim: usize) -> Vec<Ad> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| Ad::variable(v, offset + i, dim))
        .collect()
}

pub fn values(ads: &[Ad]) -> Vec<f64> {
    ads.iter().map(Ad::value).collect()
}
