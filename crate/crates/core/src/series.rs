//! Formal power series in the coupling with [`Functional`] coefficients.
//!
//! All series in this crate are truncated at a fixed order; binary products
//! are Cauchy products with the operand functionals multiplied by a caller
//! supplied product (star or time-ordered). There is no convergence claim
//! anywhere: equalities between series mean order-by-order equality of the
//! coefficient functionals.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::QstError;
use crate::functionals::Functional;

#[derive(Debug, Clone, Serialize)]
pub struct FormalSeries {
    orders: Vec<Functional>,
}

impl FormalSeries {
    pub fn zero(truncation: usize) -> Self {
        Self { orders: vec![Functional::zero(); truncation + 1] }
    }

    /// The multiplicative unit: 1 at order 0.
    pub fn unit(truncation: usize) -> Self {
        let mut s = Self::zero(truncation);
        s.orders[0] = Functional::one();
        s
    }

    /// A single coefficient at the given order.
    pub fn single(order: usize, f: Functional, truncation: usize) -> Self {
        assert!(order <= truncation, "order beyond truncation");
        let mut s = Self::zero(truncation);
        s.orders[order] = f;
        s
    }

    pub fn truncation(&self) -> usize {
        self.orders.len() - 1
    }

    pub fn order(&self, k: usize) -> &Functional {
        &self.orders[k]
    }

    pub fn orders(&self) -> &[Functional] {
        &self.orders
    }

    pub fn set_order(&mut self, k: usize, f: Functional) {
        self.orders[k] = f;
    }

    pub fn is_zero(&self) -> bool {
        self.orders.iter().all(Functional::is_zero)
    }

    pub fn map(&self, f: impl Fn(&Functional) -> Functional) -> Self {
        Self { orders: self.orders.iter().map(f).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.truncation(), other.truncation(), "mixed truncations");
        Self {
            orders: self
                .orders
                .iter()
                .zip(&other.orders)
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        self.map(|f| f.scale(c))
    }

    /// Truncated Cauchy product with the given functional product.
    pub fn product(
        &self,
        other: &Self,
        op: impl Fn(&Functional, &Functional) -> Functional,
    ) -> Self {
        assert_eq!(self.truncation(), other.truncation(), "mixed truncations");
        let k_max = self.truncation();
        let mut orders = vec![Functional::zero(); k_max + 1];
        for i in 0..=k_max {
            if self.orders[i].is_zero() {
                continue;
            }
            for j in 0..=(k_max - i) {
                if other.orders[j].is_zero() {
                    continue;
                }
                orders[i + j] = orders[i + j].add(&op(&self.orders[i], &other.orders[j]));
            }
        }
        Self { orders }
    }

    pub fn star(&self, other: &Self) -> Self {
        self.product(other, |a, b| a.star(b))
    }

    pub fn time_ordered(&self, other: &Self) -> Self {
        self.product(other, |a, b| a.time_ordered(b))
    }

    /// Order-wise involution; reverses products like the functional adjoint.
    pub fn adjoint(&self) -> Self {
        self.map(Functional::adjoint)
    }

    pub fn translate(&self, t0: f64, u0: f64) -> Result<Self, QstError> {
        let mut orders = Vec::with_capacity(self.orders.len());
        for f in &self.orders {
            orders.push(f.translate(t0, u0)?);
        }
        Ok(Self { orders })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Event;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn cauchy_product_of_scalar_series() {
        // (1 + x)^2 = 1 + 2x + x^2, with scalar coefficients
        let one_plus = FormalSeries::unit(3).add(&FormalSeries::single(
            1,
            Functional::one(),
            3,
        ));
        let sq = one_plus.star(&one_plus);
        for (k, want) in [(0, 1.0), (1, 2.0), (2, 1.0), (3, 0.0)] {
            let diff = sq.order(k).sub(&Functional::scalar(c(want)));
            assert!(diff.is_zero(), "order {k}");
        }
    }

    #[test]
    fn product_truncates() {
        let x = FormalSeries::single(2, Functional::one(), 3);
        let p = x.star(&x);
        // order 4 would be 1, but the truncation is 3
        assert!(p.is_zero());
    }

    #[test]
    fn unit_is_neutral_for_field_series() {
        let a = FormalSeries::single(1, Functional::field(Event::new(0.3, [0.0; 3])), 2);
        let u = FormalSeries::unit(2);
        assert!(a.star(&u).sub(&a).is_zero());
        assert!(u.star(&a).sub(&a).is_zero());
    }
}
