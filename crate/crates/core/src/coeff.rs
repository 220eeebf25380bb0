//! Exact arithmetic in the cyclotomic field `Q(zeta_m)`.
//!
//! The pipeline for a codimension-`r` center works over the conductor
//! `m = 4(r-1)` (with `m = 4` when `r = 2`), the smallest field containing
//! `i`, the `2(r-1)`-th roots of unity and `sqrt(r-1)`. Elements are stored
//! on the power basis `1, zeta, ..., zeta^{phi(m)-1}` with rational
//! coordinates; all operations are exact.

use std::fmt;
use std::sync::Arc;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};

use crate::{Error, Result};

fn euler_phi(m: u32) -> u32 {
    let mut n = m;
    let mut result = m;
    let mut p = 2;
    while p * p <= n {
        if n % p == 0 {
            while n % p == 0 {
                n /= p;
            }
            result -= result / p;
        }
        p += 1;
    }
    if n > 1 {
        result -= result / n;
    }
    result
}

/// Coefficients of the m-th cyclotomic polynomial, index = power, monic.
fn cyclotomic_polynomial(m: u32) -> Vec<BigInt> {
    // Phi_m(x) = (x^m - 1) / prod_{d | m, d < m} Phi_d(x), by exact division.
    let mut num = vec![BigInt::zero(); m as usize + 1];
    num[0] = -BigInt::one();
    num[m as usize] = BigInt::one();
    for d in 1..m {
        if m % d == 0 {
            let phi_d = cyclotomic_polynomial(d);
            num = poly_div_exact(&num, &phi_d);
        }
    }
    num
}

fn poly_div_exact(num: &[BigInt], den: &[BigInt]) -> Vec<BigInt> {
    let mut rem: Vec<BigInt> = num.to_vec();
    let dd = den.len() - 1;
    let nd = rem.len() - 1;
    assert!(den[dd].is_one(), "divisor must be monic");
    let mut quot = vec![BigInt::zero(); nd - dd + 1];
    for k in (0..=nd - dd).rev() {
        let c = rem[k + dd].clone();
        quot[k] = c.clone();
        if !c.is_zero() {
            for (i, dc) in den.iter().enumerate() {
                rem[k + i] -= &c * dc;
            }
        }
    }
    assert!(rem.iter().all(|c| c.is_zero()), "division not exact");
    quot
}

/// The cyclotomic field `Q(zeta_m)` with precomputed reduction data.
#[derive(Debug)]
pub struct CycloField {
    pub m: u32,
    pub phi: usize,
    /// zeta^j for j = 0..(m + 2 phi) written on the power basis.
    power_table: Vec<Vec<BigRational>>,
    /// Numeric embedding zeta^j -> e^{2 pi i j / m}, for branch picks only.
    embed: Vec<(f64, f64)>,
}

impl CycloField {
    pub fn new(m: u32) -> Arc<CycloField> {
        assert!(m >= 1);
        let phi = euler_phi(m) as usize;
        let cyclo = cyclotomic_polynomial(m);
        assert_eq!(cyclo.len(), phi + 1);
        // zeta^phi = -(c_0 + c_1 zeta + ... + c_{phi-1} zeta^{phi-1})
        let top: Vec<BigRational> = cyclo[..phi]
            .iter()
            .map(|c| -BigRational::from_integer(c.clone()))
            .collect();
        let table_len = m as usize + 2 * phi + 1;
        let mut power_table: Vec<Vec<BigRational>> = Vec::with_capacity(table_len);
        for j in 0..table_len {
            if j < phi {
                let mut v = vec![BigRational::zero(); phi];
                v[j] = BigRational::one();
                power_table.push(v);
            } else {
                // zeta^j = zeta * zeta^{j-1}, then reduce the overflow term.
                let prev = &power_table[j - 1];
                let mut v = vec![BigRational::zero(); phi];
                let carry = prev[phi - 1].clone();
                for i in 1..phi {
                    v[i] = prev[i - 1].clone();
                }
                if !carry.is_zero() {
                    for i in 0..phi {
                        v[i] += &carry * &top[i];
                    }
                }
                power_table.push(v);
            }
        }
        let embed = (0..table_len)
            .map(|j| {
                let theta = 2.0 * std::f64::consts::PI * (j as f64) / (m as f64);
                (theta.cos(), theta.sin())
            })
            .collect();
        Arc::new(CycloField {
            m,
            phi,
            power_table,
            embed,
        })
    }

    /// Conductor for the pipeline with codimension `r`: m = 4(r-1), m = 4 for r = 2.
    pub fn for_codimension(r: u32) -> Arc<CycloField> {
        assert!(r >= 2);
        CycloField::new(4 * (r - 1))
    }

    pub fn zero(self: &Arc<Self>) -> Scalar {
        Scalar {
            field: Arc::clone(self),
            coords: vec![BigRational::zero(); self.phi],
        }
    }

    pub fn one(self: &Arc<Self>) -> Scalar {
        self.from_rational(BigRational::one())
    }

    pub fn from_rational(self: &Arc<Self>, q: BigRational) -> Scalar {
        let mut coords = vec![BigRational::zero(); self.phi];
        coords[0] = q;
        Scalar {
            field: Arc::clone(self),
            coords,
        }
    }

    pub fn from_i64(self: &Arc<Self>, n: i64) -> Scalar {
        self.from_rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn rational(self: &Arc<Self>, num: i64, den: i64) -> Scalar {
        self.from_rational(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// zeta_m^k, for any integer k.
    pub fn root(self: &Arc<Self>, k: i64) -> Scalar {
        let k = k.rem_euclid(self.m as i64) as usize;
        Scalar {
            field: Arc::clone(self),
            coords: self.power_table[k].clone(),
        }
    }

    /// e^{2 pi i a/b}; requires b | m after reduction.
    pub fn root_of_unity(self: &Arc<Self>, a: i64, b: i64) -> Result<Scalar> {
        let (a, b) = if b < 0 { (-a, -b) } else { (a, b) };
        let m = self.m as i64;
        if (a * m) % b != 0 {
            return Err(Error::NotRepresentable(format!(
                "e^(2 pi i {a}/{b}) not in Q(zeta_{})",
                self.m
            )));
        }
        Ok(self.root(a * m / b))
    }

    /// sqrt(n) for a positive integer n, the branch with positive real part.
    pub fn sqrt_nat(self: &Arc<Self>, n: u64) -> Result<Scalar> {
        assert!(n >= 1);
        // Split off the square part.
        let mut square_root = 1u64;
        let mut rest = n;
        let mut p = 2u64;
        while p * p <= rest {
            while rest % (p * p) == 0 {
                rest /= p * p;
                square_root *= p;
            }
            p += 1;
        }
        let mut acc = self.from_i64(square_root as i64);
        let mut q = rest;
        let mut p = 2u64;
        while q > 1 {
            if q % p == 0 {
                q /= p;
                acc = acc.mul(&self.sqrt_prime(p)?);
            } else {
                p += 1;
            }
        }
        // Fix the branch: positive real part under zeta -> e^{2 pi i/m}.
        let (re, _im) = acc.embed_f64();
        if re < 0.0 {
            acc = acc.neg();
        }
        let sq = acc.mul(&acc);
        if sq != self.from_i64(n as i64) {
            return Err(Error::Internal(format!("sqrt_nat({n}) verification failed")));
        }
        Ok(acc)
    }

    fn sqrt_prime(self: &Arc<Self>, p: u64) -> Result<Scalar> {
        let m = self.m as u64;
        if p == 2 {
            if m % 8 != 0 {
                return Err(Error::NotRepresentable(format!(
                    "sqrt(2) not in Q(zeta_{m})"
                )));
            }
            let k = (m / 8) as i64;
            return Ok(self.root(k).add(&self.root(-k)));
        }
        if m % (4 * p) != 0 && m % p != 0 {
            return Err(Error::NotRepresentable(format!(
                "sqrt({p}) not in Q(zeta_{m})"
            )));
        }
        if m % p != 0 {
            return Err(Error::NotRepresentable(format!(
                "sqrt({p}) not in Q(zeta_{m})"
            )));
        }
        // Quadratic Gauss sum over zeta_p.
        let step = (m / p) as i64;
        let mut g = self.zero();
        for a in 1..p {
            let legendre = mod_pow(a, (p - 1) / 2, p);
            let sign = if legendre == 1 { 1 } else { -1 };
            let term = self.root(step * a as i64);
            g = if sign > 0 { g.add(&term) } else { g.sub(&term) };
        }
        // g^2 = p for p = 1 mod 4, g^2 = -p for p = 3 mod 4.
        if p % 4 == 3 {
            if m % 4 != 0 {
                return Err(Error::NotRepresentable(format!(
                    "sqrt({p}) needs i in Q(zeta_{m})"
                )));
            }
            let i = self.root((m / 4) as i64);
            g = g.mul(&i);
        }
        Ok(g)
    }
}

fn mod_pow(mut base: u64, mut exp: u64, modulus: u64) -> u64 {
    let mut acc = 1u64;
    base %= modulus;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % modulus;
        }
        base = base * base % modulus;
        exp >>= 1;
    }
    acc
}

/// An element of `Q(zeta_m)` on the power basis.
#[derive(Clone)]
pub struct Scalar {
    pub field: Arc<CycloField>,
    pub coords: Vec<BigRational>,
}

impl Scalar {
    pub fn is_zero(&self) -> bool {
        self.coords.iter().all(|c| c.is_zero())
    }

    pub fn is_one(&self) -> bool {
        self.coords[0].is_one() && self.coords[1..].iter().all(|c| c.is_zero())
    }

    pub fn is_rational(&self) -> bool {
        self.coords[1..].iter().all(|c| c.is_zero())
    }

    pub fn rational_part(&self) -> BigRational {
        self.coords[0].clone()
    }

    pub fn add(&self, other: &Scalar) -> Scalar {
        debug_assert_eq!(self.field.m, other.field.m);
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a + b)
            .collect();
        Scalar {
            field: Arc::clone(&self.field),
            coords,
        }
    }

    pub fn sub(&self, other: &Scalar) -> Scalar {
        debug_assert_eq!(self.field.m, other.field.m);
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a - b)
            .collect();
        Scalar {
            field: Arc::clone(&self.field),
            coords,
        }
    }

    pub fn neg(&self) -> Scalar {
        Scalar {
            field: Arc::clone(&self.field),
            coords: self.coords.iter().map(|c| -c).collect(),
        }
    }

    pub fn mul(&self, other: &Scalar) -> Scalar {
        debug_assert_eq!(self.field.m, other.field.m);
        let phi = self.field.phi;
        let mut conv = vec![BigRational::zero(); 2 * phi - 1];
        for (i, a) in self.coords.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.coords.iter().enumerate() {
                if b.is_zero() {
                    continue;
                }
                conv[i + j] += a * b;
            }
        }
        let mut coords = vec![BigRational::zero(); phi];
        for (j, c) in conv.into_iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if j < phi {
                coords[j] += c;
            } else {
                let rep = &self.field.power_table[j];
                for i in 0..phi {
                    if !rep[i].is_zero() {
                        coords[i] += &c * &rep[i];
                    }
                }
            }
        }
        Scalar {
            field: Arc::clone(&self.field),
            coords,
        }
    }

    pub fn scale(&self, q: &BigRational) -> Scalar {
        Scalar {
            field: Arc::clone(&self.field),
            coords: self.coords.iter().map(|c| c * q).collect(),
        }
    }

    /// Exact inverse; error on zero.
    pub fn inv(&self) -> Result<Scalar> {
        if self.is_zero() {
            return Err(Error::NonUnit("inverse of zero".into()));
        }
        let phi = self.field.phi;
        // Multiplication-by-self matrix on the power basis, solve M x = e_0.
        let mut mat = vec![vec![BigRational::zero(); phi]; phi];
        for j in 0..phi {
            let col = self.mul(&self.field.root(j as i64));
            for i in 0..phi {
                mat[i][j] = col.coords[i].clone();
            }
        }
        let mut rhs = vec![BigRational::zero(); phi];
        rhs[0] = BigRational::one();
        let sol = solve_linear(&mut mat, &mut rhs).ok_or_else(|| {
            Error::Internal("singular multiplication matrix in a field".into())
        })?;
        Ok(Scalar {
            field: Arc::clone(&self.field),
            coords: sol,
        })
    }

    pub fn div(&self, other: &Scalar) -> Result<Scalar> {
        Ok(self.mul(&other.inv()?))
    }

    pub fn pow(&self, n: u32) -> Scalar {
        let mut acc = self.field.one();
        for _ in 0..n {
            acc = acc.mul(self);
        }
        acc
    }

    /// Numeric embedding under zeta -> e^{2 pi i/m}. Branch picks and display only.
    pub fn embed_f64(&self) -> (f64, f64) {
        let mut re = 0.0;
        let mut im = 0.0;
        for (j, c) in self.coords.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let v = rational_to_f64(c);
            re += v * self.field.embed[j].0;
            im += v * self.field.embed[j].1;
        }
        (re, im)
    }

    /// Multiplicative order if this is a root of unity; None otherwise (capped search).
    pub fn mult_order(&self, cap: u32) -> Option<u32> {
        let mut acc = self.clone();
        for k in 1..=cap {
            if acc.is_one() {
                return Some(k);
            }
            acc = acc.mul(self);
        }
        None
    }
}

fn rational_to_f64(q: &BigRational) -> f64 {
    let n = q.numer();
    let d = q.denom();
    let fn_ = bigint_to_f64(n);
    let fd = bigint_to_f64(d);
    fn_ / fd
}

fn bigint_to_f64(n: &BigInt) -> f64 {
    n.to_string().parse::<f64>().unwrap_or(if n.is_negative() {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    })
}

/// Gaussian elimination over the rationals; returns None when singular.
pub fn solve_linear(
    mat: &mut [Vec<BigRational>],
    rhs: &mut [BigRational],
) -> Option<Vec<BigRational>> {
    let n = mat.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !mat[r][col].is_zero())?;
        mat.swap(col, pivot);
        rhs.swap(col, pivot);
        let inv = mat[col][col].recip();
        for c in col..n {
            mat[col][c] = &mat[col][c] * &inv;
        }
        rhs[col] = &rhs[col] * &inv;
        for r in 0..n {
            if r != col && !mat[r][col].is_zero() {
                let f = mat[r][col].clone();
                for c in col..n {
                    let t = &f * &mat[col][c];
                    mat[r][c] -= t;
                }
                let t = &f * &rhs[col];
                rhs[r] -= t;
            }
        }
    }
    Some(rhs.to_vec())
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.field.m == other.field.m && self.coords == other.coords
    }
}
impl Eq for Scalar {}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (j, c) in self.coords.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if j == 0 {
                write!(f, "{c}")?;
            } else if j == 1 {
                write!(f, "{c}*w")?;
            } else {
                write!(f, "{c}*w^{j}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_root_is_i() {
        let f = CycloField::new(4);
        let i = f.root(1);
        assert_eq!(i.mul(&i), f.from_i64(-1));
        assert_eq!(f.root(2), f.from_i64(-1));
    }

    #[test]
    fn eighth_root_half_sum_squares_to_two() {
        let f = CycloField::new(8);
        let s = f.root(1).add(&f.root(-1));
        assert_eq!(s.mul(&s), f.from_i64(2));
    }

    #[test]
    fn sqrt_nat_values() {
        let f4 = CycloField::new(4);
        assert_eq!(f4.sqrt_nat(1).unwrap(), f4.one());
        assert_eq!(f4.sqrt_nat(4).unwrap(), f4.from_i64(2));
        let f8 = CycloField::new(8);
        let s2 = f8.sqrt_nat(2).unwrap();
        assert_eq!(s2.mul(&s2), f8.from_i64(2));
        assert!(s2.embed_f64().0 > 0.0);
        let f12 = CycloField::new(12);
        let s3 = f12.sqrt_nat(3).unwrap();
        assert_eq!(s3.mul(&s3), f12.from_i64(3));
        assert!(s3.embed_f64().0 > 0.0);
        assert!(f4.sqrt_nat(2).is_err());
    }

    #[test]
    fn root_sum_vanishes() {
        for m in [3u32, 4, 8, 12] {
            let f = CycloField::new(m);
            let mut s = f.zero();
            for k in 0..m {
                s = s.add(&f.root(k as i64));
            }
            assert!(s.is_zero(), "sum of all {m}-th roots");
        }
    }

    #[test]
    fn root_orders() {
        let f = CycloField::new(12);
        for k in 1..12i64 {
            let expected = 12 / num::integer::gcd(12, k as u32);
            assert_eq!(f.root(k).mult_order(24), Some(expected));
        }
    }

    #[test]
    fn field_axioms_random() {
        let f = CycloField::new(8);
        // Deterministic pseudo-random elements.
        let mut state = 1u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as i64 % 7) - 3
        };
        for _ in 0..40 {
            let a = f.root(next()).scale(&BigRational::new(next().into(), 5.into()));
            let b = f.root(next()).add(&f.from_i64(next()));
            let c = f.root(next()).sub(&f.from_i64(next()));
            let lhs = a.add(&b).mul(&c);
            let rhs = a.mul(&c).add(&b.mul(&c));
            assert_eq!(lhs, rhs);
            assert!(a.sub(&a).is_zero());
            if !a.is_zero() {
                assert!(a.mul(&a.inv().unwrap()).is_one());
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let f = CycloField::new(12);
        let a = f.root(1).add(&f.from_i64(3)).add(&f.root(5));
        let inv = a.inv().unwrap();
        assert!(a.mul(&inv).is_one());
    }
}
