//! Forward-mode dual numbers for single directional derivatives.

use std::ops::{Add, Mul, Neg, Sub};

use super::tape::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub tangent: f64,
}

impl Dual {
    pub fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, 0.0)
    }

    pub fn softplus(self) -> Self {
        Self::new(softplus(self.value), sigmoid(self.value) * self.tangent)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.value + o.value, self.tangent + o.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.value - o.value, self.tangent - o.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(
            self.value * o.value,
            self.value * o.tangent + self.tangent * o.value,
        )
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, s: f64) -> Dual {
        Dual::new(self.value * s, self.tangent * s)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.tangent)
    }
}

/// Coordinate direction in the UV square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UvAxis {
    U,
    V,
}

impl UvAxis {
    pub fn seed(self) -> [f64; 2] {
        match self {
            UvAxis::U => [1.0, 0.0],
            UvAxis::V => [0.0, 1.0],
        }
    }
}

/// Partial derivative of a UV → R³ mapping along one UV axis, by a single
/// forward-mode pass.
pub fn directional_jacobian<F>(mapping: F, uv: [f64; 2], axis: UvAxis) -> [f64; 3]
where
    F: Fn([Dual; 2]) -> [Dual; 3],
{
    let seed = axis.seed();
    let out = mapping([Dual::new(uv[0], seed[0]), Dual::new(uv[1], seed[1])]);
    [out[0].tangent, out[1].tangent, out[2].tangent]
}
