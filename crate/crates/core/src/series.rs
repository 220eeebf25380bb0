//! Graded truncated formal series.
//!
//! One monomial key carries: a Novikov lattice exponent, a fractional
//! exponent of the exceptional variable `q` (stored as a numerator over the
//! policy denominator, which is `2(r-1)` for the blowup pipeline), a bounded
//! Laurent exponent of `z`, an order in the stationary-phase variable `u`,
//! and a sparse multi-index over named nilpotent deformation coordinates.
//! Every operation clips its result to the policy window; clipping is
//! silent because the surrounding theory works in graded completions, and
//! callers that need guaranteed orders re-run with a wider policy and
//! compare.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Zero};
use smallvec::SmallVec;

use crate::coeff::Scalar;
use crate::{Error, Result};

pub type NovExp = SmallVec<[i32; 2]>;
pub type DefExp = SmallVec<[(u8, u8); 6]>;

#[derive(Clone, Debug)]
pub struct TruncationPolicy {
    /// Denominator of q-exponents; `2(r-1)` in the pipeline.
    pub q_denom: i64,
    /// q-window, numerators over `q_denom`.
    pub q_min: i64,
    pub q_max: i64,
    pub z_min: i32,
    pub z_max: i32,
    pub nov_rank: usize,
    /// Pairing of each lattice generator against the fixed ample class.
    pub nov_weights: Vec<i64>,
    pub nov_bound: i64,
    /// Per-coordinate lower bounds (0 for Novikov cones, negative for the
    /// Mellin-Barnes variable window).
    pub nov_min: Vec<i64>,
    pub deform_order: u32,
    pub u_order: u32,
    /// Degrees for homogeneity bookkeeping.
    pub nov_degrees: Vec<i64>,
    /// Degree of one q-denominator step, i.e. deg q / q_denom.
    pub q_step_degree: i64,
    pub coord_degrees: Vec<i64>,
}

impl TruncationPolicy {
    /// A policy with no Novikov and no deformation directions.
    pub fn bare(q_denom: i64, q_min: i64, q_max: i64, z_min: i32, z_max: i32) -> Arc<Self> {
        Arc::new(TruncationPolicy {
            q_denom,
            q_min,
            q_max,
            z_min,
            z_max,
            nov_rank: 0,
            nov_weights: vec![],
            nov_bound: 0,
            nov_min: vec![],
            deform_order: 0,
            u_order: 0,
            nov_degrees: vec![],
            q_step_degree: 1,
            coord_degrees: vec![],
        })
    }

    pub fn contains(&self, k: &Key) -> bool {
        if k.q < self.q_min || k.q > self.q_max || k.z < self.z_min || k.z > self.z_max {
            return false;
        }
        if k.u as u32 > self.u_order {
            return false;
        }
        let mut w = 0i64;
        for (i, &n) in k.nov.iter().enumerate() {
            if (n as i64) < self.nov_min.get(i).copied().unwrap_or(0) {
                return false;
            }
            w += n as i64 * self.nov_weights[i];
        }
        if w > self.nov_bound {
            return false;
        }
        let d: u32 = k.def.iter().map(|&(_, e)| e as u32).sum();
        d <= self.deform_order
    }

    pub fn degree(&self, k: &Key) -> i64 {
        let mut d = 2 * k.z as i64 + k.u as i64 + k.q * self.q_step_degree;
        for (i, &n) in k.nov.iter().enumerate() {
            d += n as i64 * self.nov_degrees[i];
        }
        for &(c, e) in &k.def {
            d += e as i64 * self.coord_degrees[c as usize];
        }
        d
    }

    /// Rough diameter used to cap exp/log/Neumann iterations.
    pub fn diameter(&self) -> u32 {
        let q_span = (self.q_max - self.q_min).unsigned_abs() as u32;
        let z_span = (self.z_max - self.z_min).unsigned_abs() as u32;
        let nov = self.nov_bound.unsigned_abs() as u32;
        q_span + z_span + nov + self.deform_order + self.u_order + 4
    }
}

/// Monomial key; totally ordered lexicographically on the field tuple.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct Key {
    pub nov: NovExp,
    pub q: i64,
    pub z: i32,
    pub u: u16,
    pub def: DefExp,
}

impl Key {
    pub fn zero(rank: usize) -> Key {
        Key {
            nov: SmallVec::from_elem(0, rank),
            q: 0,
            z: 0,
            u: 0,
            def: SmallVec::new(),
        }
    }

    pub fn q_pow(rank: usize, q: i64) -> Key {
        let mut k = Key::zero(rank);
        k.q = q;
        k
    }

    pub fn z_pow(rank: usize, z: i32) -> Key {
        let mut k = Key::zero(rank);
        k.z = z;
        k
    }

    pub fn u_pow(rank: usize, u: u16) -> Key {
        let mut k = Key::zero(rank);
        k.u = u;
        k
    }

    pub fn nov_pow(nov: NovExp) -> Key {
        Key {
            nov,
            q: 0,
            z: 0,
            u: 0,
            def: SmallVec::new(),
        }
    }

    pub fn deform(rank: usize, coord: u8, e: u8) -> Key {
        let mut k = Key::zero(rank);
        k.def.push((coord, e));
        k
    }

    pub fn is_zero_key(&self) -> bool {
        self.nov.iter().all(|&n| n == 0)
            && self.q == 0
            && self.z == 0
            && self.u == 0
            && self.def.is_empty()
    }

    pub fn deform_total(&self) -> u32 {
        self.def.iter().map(|&(_, e)| e as u32).sum()
    }

    pub fn nov_total(&self, weights: &[i64]) -> i64 {
        self.nov
            .iter()
            .enumerate()
            .map(|(i, &n)| n as i64 * weights[i])
            .sum()
    }

    pub fn def_exp_of(&self, coord: u8) -> u8 {
        self.def
            .iter()
            .find(|&&(c, _)| c == coord)
            .map(|&(_, e)| e)
            .unwrap_or(0)
    }

    pub fn mul(&self, other: &Key) -> Key {
        debug_assert_eq!(self.nov.len(), other.nov.len());
        let nov = self
            .nov
            .iter()
            .zip(&other.nov)
            .map(|(a, b)| a + b)
            .collect();
        let mut def: DefExp = SmallVec::new();
        let mut i = 0;
        let mut j = 0;
        while i < self.def.len() || j < other.def.len() {
            if j >= other.def.len() || (i < self.def.len() && self.def[i].0 < other.def[j].0) {
                def.push(self.def[i]);
                i += 1;
            } else if i >= self.def.len() || other.def[j].0 < self.def[i].0 {
                def.push(other.def[j]);
                j += 1;
            } else {
                def.push((self.def[i].0, self.def[i].1 + other.def[j].1));
                i += 1;
                j += 1;
            }
        }
        Key {
            nov,
            q: self.q + other.q,
            z: self.z + other.z,
            u: self.u + other.u,
            def,
        }
    }

    /// Removes one factor of the coordinate; panics if absent.
    pub fn without_one_deform(&self, coord: u8) -> Key {
        let mut k = self.clone();
        let pos = k
            .def
            .iter()
            .position(|&(c, _)| c == coord)
            .expect("coord present");
        if k.def[pos].1 == 1 {
            k.def.remove(pos);
        } else {
            k.def[pos].1 -= 1;
        }
        k
    }
}

/// Values that can sit in a series term.
pub trait Value: Clone + PartialEq + Send + Sync {
    fn is_vzero(&self) -> bool;
    fn vadd(&mut self, other: &Self);
    fn vneg(&self) -> Self;
    fn vscale(&self, s: &Scalar) -> Self;
    fn vscale_rat(&self, q: &BigRational) -> Self;
}

impl Value for Scalar {
    fn is_vzero(&self) -> bool {
        self.is_zero()
    }
    fn vadd(&mut self, other: &Self) {
        *self = self.add(other);
    }
    fn vneg(&self) -> Self {
        self.neg()
    }
    fn vscale(&self, s: &Scalar) -> Self {
        self.mul(s)
    }
    fn vscale_rat(&self, q: &BigRational) -> Self {
        self.scale(q)
    }
}

/// Coordinate vector over a cohomology basis (ring known from context).
#[derive(Clone, PartialEq, Debug)]
pub struct CVec(pub Vec<Scalar>);

impl Value for CVec {
    fn is_vzero(&self) -> bool {
        self.0.iter().all(|c| c.is_zero())
    }
    fn vadd(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.add(b);
        }
    }
    fn vneg(&self) -> Self {
        CVec(self.0.iter().map(|c| c.neg()).collect())
    }
    fn vscale(&self, s: &Scalar) -> Self {
        CVec(self.0.iter().map(|c| c.mul(s)).collect())
    }
    fn vscale_rat(&self, q: &BigRational) -> Self {
        CVec(self.0.iter().map(|c| c.scale(q)).collect())
    }
}

/// Square matrix of scalars, row major, in a fixed basis.
#[derive(Clone, PartialEq, Debug)]
pub struct Mat {
    pub n: usize,
    pub e: Vec<Scalar>,
}

impl Mat {
    pub fn zero(n: usize, zero: &Scalar) -> Mat {
        Mat {
            n,
            e: vec![zero.clone(); n * n],
        }
    }
    pub fn identity(n: usize, zero: &Scalar, one: &Scalar) -> Mat {
        let mut m = Mat::zero(n, zero);
        for i in 0..n {
            m.e[i * n + i] = one.clone();
        }
        m
    }
    pub fn at(&self, i: usize, j: usize) -> &Scalar {
        &self.e[i * self.n + j]
    }
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut Scalar {
        &mut self.e[i * self.n + j]
    }
    pub fn set(&mut self, i: usize, j: usize, v: Scalar) {
        self.e[i * self.n + j] = v;
    }
    pub fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.n, other.n);
        let n = self.n;
        let zero = self.e[0].field.zero();
        let mut out = Mat::zero(n, &zero);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..n {
                    let b = other.at(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let prod = a.mul(b);
                    let cell = out.at_mut(i, j);
                    *cell = cell.add(&prod);
                }
            }
        }
        out
    }
    pub fn apply(&self, v: &CVec) -> CVec {
        let n = self.n;
        let zero = self.e[0].field.zero();
        let mut out = vec![zero; n];
        for i in 0..n {
            for j in 0..n {
                let a = self.at(i, j);
                if a.is_zero() || v.0[j].is_zero() {
                    continue;
                }
                out[i] = out[i].add(&a.mul(&v.0[j]));
            }
        }
        CVec(out)
    }
    pub fn transpose(&self) -> Mat {
        let n = self.n;
        let mut m = self.clone();
        for i in 0..n {
            for j in 0..n {
                m.e[j * n + i] = self.e[i * n + j].clone();
            }
        }
        m
    }
    pub fn column(&self, j: usize) -> CVec {
        CVec((0..self.n).map(|i| self.at(i, j).clone()).collect())
    }
    /// Exact inverse by Gaussian elimination over the field; None if singular.
    pub fn inverse(&self) -> Option<Mat> {
        let n = self.n;
        let field = &self.e[0].field;
        let mut a = self.clone();
        let mut inv = Mat::identity(n, &field.zero(), &field.one());
        for col in 0..n {
            let pivot = (col..n).find(|&r| !a.at(r, col).is_zero())?;
            for j in 0..n {
                let t = a.e[col * n + j].clone();
                a.e[col * n + j] = a.e[pivot * n + j].clone();
                a.e[pivot * n + j] = t;
                let t = inv.e[col * n + j].clone();
                inv.e[col * n + j] = inv.e[pivot * n + j].clone();
                inv.e[pivot * n + j] = t;
            }
            let d = a.at(col, col).inv().ok()?;
            for j in 0..n {
                a.e[col * n + j] = a.e[col * n + j].mul(&d);
                inv.e[col * n + j] = inv.e[col * n + j].mul(&d);
            }
            for r in 0..n {
                if r != col && !a.at(r, col).is_zero() {
                    let f = a.at(r, col).clone();
                    for j in 0..n {
                        let t = f.mul(&a.e[col * n + j]);
                        a.e[r * n + j] = a.e[r * n + j].sub(&t);
                        let t = f.mul(&inv.e[col * n + j]);
                        inv.e[r * n + j] = inv.e[r * n + j].sub(&t);
                    }
                }
            }
        }
        Some(inv)
    }
    /// Smallest k with self^k = 0, or None up to the cap.
    pub fn nilpotency_index(&self, cap: usize) -> Option<usize> {
        let mut p = self.clone();
        for k in 1..=cap {
            if p.is_vzero() {
                return Some(k);
            }
            p = p.matmul(self);
        }
        if p.is_vzero() {
            Some(cap + 1)
        } else {
            None
        }
    }
}

impl Value for Mat {
    fn is_vzero(&self) -> bool {
        self.e.iter().all(|c| c.is_zero())
    }
    fn vadd(&mut self, other: &Self) {
        for (a, b) in self.e.iter_mut().zip(&other.e) {
            *a = a.add(b);
        }
    }
    fn vneg(&self) -> Self {
        Mat {
            n: self.n,
            e: self.e.iter().map(|c| c.neg()).collect(),
        }
    }
    fn vscale(&self, s: &Scalar) -> Self {
        Mat {
            n: self.n,
            e: self.e.iter().map(|c| c.mul(s)).collect(),
        }
    }
    fn vscale_rat(&self, q: &BigRational) -> Self {
        Mat {
            n: self.n,
            e: self.e.iter().map(|c| c.scale(q)).collect(),
        }
    }
}

#[derive(Clone)]
pub struct Series<V: Value> {
    pub policy: Arc<TruncationPolicy>,
    pub terms: BTreeMap<Key, V>,
}

impl<V: Value> Series<V> {
    pub fn zero(policy: &Arc<TruncationPolicy>) -> Series<V> {
        Series {
            policy: Arc::clone(policy),
            terms: BTreeMap::new(),
        }
    }

    pub fn from_term(policy: &Arc<TruncationPolicy>, k: Key, v: V) -> Series<V> {
        let mut s = Series::zero(policy);
        s.add_term(k, v);
        s
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, k: Key, v: V) {
        if v.is_vzero() || !self.policy.contains(&k) {
            return;
        }
        match self.terms.entry(k) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(v);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                e.get_mut().vadd(&v);
                if e.get().is_vzero() {
                    e.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &Series<V>) -> Series<V> {
        let mut out = self.clone();
        for (k, v) in &other.terms {
            out.add_term(k.clone(), v.clone());
        }
        out
    }

    pub fn sub(&self, other: &Series<V>) -> Series<V> {
        let mut out = self.clone();
        for (k, v) in &other.terms {
            out.add_term(k.clone(), v.vneg());
        }
        out
    }

    pub fn neg(&self) -> Series<V> {
        Series {
            policy: Arc::clone(&self.policy),
            terms: self
                .terms
                .iter()
                .map(|(k, v)| (k.clone(), v.vneg()))
                .collect(),
        }
    }

    pub fn scale(&self, s: &Scalar) -> Series<V> {
        if s.is_zero() {
            return Series::zero(&self.policy);
        }
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            out.add_term(k.clone(), v.vscale(s));
        }
        out
    }

    pub fn scale_rat(&self, q: &BigRational) -> Series<V> {
        if q.is_zero() {
            return Series::zero(&self.policy);
        }
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            out.add_term(k.clone(), v.vscale_rat(q));
        }
        out
    }

    pub fn mul_key(&self, k0: &Key) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            out.add_term(k.mul(k0), v.clone());
        }
        out
    }

    pub fn map_values<W: Value>(&self, f: impl Fn(&V) -> W) -> Series<W> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            out.add_term(k.clone(), f(v));
        }
        out
    }

    /// Keeps only terms passing the filter.
    pub fn filter(&self, f: impl Fn(&Key) -> bool) -> Series<V> {
        Series {
            policy: Arc::clone(&self.policy),
            terms: self
                .terms
                .iter()
                .filter(|(k, _)| f(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Sub-series of terms whose fields match the fixed ones; fixed fields
    /// are deleted from the keys.
    pub fn extract(&self, fix: &Selector) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            if let Some(k2) = fix.strip(k) {
                out.add_term(k2, v.clone());
            }
        }
        out
    }

    pub fn coeff_z(&self, z: i32) -> Series<V> {
        self.extract(&Selector {
            z: Some(z),
            ..Selector::none()
        })
    }

    pub fn constant_term(&self) -> Option<&V> {
        self.terms.get(&Key::zero(self.policy.nov_rank))
    }

    /// Restriction to deformation and Novikov order zero.
    pub fn base_slice(&self) -> Series<V> {
        self.filter(|k| k.def.is_empty() && k.nov.iter().all(|&n| n == 0))
    }

    /// Substitution z -> -z: scales each z^k term by (-1)^k.
    pub fn neg_z(&self) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            if k.z.rem_euclid(2) == 0 {
                out.add_term(k.clone(), v.clone());
            } else {
                out.add_term(k.clone(), v.vneg());
            }
        }
        out
    }

    /// Formal derivation in a named deformation coordinate.
    pub fn derive_deform(&self, coord: u8) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            let e = k.def_exp_of(coord);
            if e == 0 {
                continue;
            }
            let k2 = k.without_one_deform(coord);
            out.add_term(
                k2,
                v.vscale_rat(&BigRational::from_integer(BigInt::from(e))),
            );
        }
        out
    }

    /// z d/dz.
    pub fn derive_z(&self) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            if k.z == 0 {
                continue;
            }
            out.add_term(
                k.clone(),
                v.vscale_rat(&BigRational::from_integer(BigInt::from(k.z))),
            );
        }
        out
    }

    /// q d/dq on the exceptional variable (fractional exponents included).
    pub fn derive_q(&self) -> Series<V> {
        let d = self.policy.q_denom;
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            if k.q == 0 {
                continue;
            }
            out.add_term(
                k.clone(),
                v.vscale_rat(&BigRational::new(BigInt::from(k.q), BigInt::from(d))),
            );
        }
        out
    }

    /// xi Q d/dQ: scales Q^d by the pairing xi . d.
    pub fn derive_nov(&self, xi_pairings: &[i64]) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            let mut w = 0i64;
            for (i, &n) in k.nov.iter().enumerate() {
                w += n as i64 * xi_pairings[i];
            }
            if w == 0 {
                continue;
            }
            out.add_term(
                k.clone(),
                v.vscale_rat(&BigRational::from_integer(BigInt::from(w))),
            );
        }
        out
    }

    /// Gaussian contraction: u^{2n} -> z^n (2n-1)!!, odd powers die, u is gone.
    pub fn gauss_contract(&self) -> Series<V> {
        let mut out = Series::zero(&self.policy);
        for (k, v) in &self.terms {
            if k.u % 2 == 1 {
                continue;
            }
            let n = (k.u / 2) as u32;
            let mut k2 = k.clone();
            k2.u = 0;
            k2.z += n as i32;
            let mut fact = BigInt::one();
            for j in 0..n {
                fact *= BigInt::from(2 * j + 1);
            }
            out.add_term(k2, v.vscale_rat(&BigRational::from_integer(fact)));
        }
        out
    }

    /// All terms of the series have this total degree (key + value degree);
    /// None when mixed or zero.
    pub fn homogeneous_degree(&self, value_degree: impl Fn(&V) -> Option<i64>) -> Option<i64> {
        let mut deg: Option<i64> = None;
        for (k, v) in &self.terms {
            let vd = value_degree(v)?;
            let d = self.policy.degree(k) + vd;
            match deg {
                None => deg = Some(d),
                Some(e) if e == d => {}
                _ => return None,
            }
        }
        deg
    }

    pub fn with_policy(&self, policy: &Arc<TruncationPolicy>) -> Series<V> {
        let mut out = Series::zero(policy);
        for (k, v) in &self.terms {
            out.add_term(k.clone(), v.clone());
        }
        out
    }
}

#[derive(Default, Clone)]
pub struct Selector {
    pub nov: Option<NovExp>,
    pub q: Option<i64>,
    pub z: Option<i32>,
    pub u: Option<u16>,
    pub def: Option<DefExp>,
}

impl Selector {
    pub fn none() -> Selector {
        Selector::default()
    }
    fn strip(&self, k: &Key) -> Option<Key> {
        let mut out = k.clone();
        if let Some(n) = &self.nov {
            if &k.nov != n {
                return None;
            }
            out.nov = SmallVec::from_elem(0, k.nov.len());
        }
        if let Some(q) = self.q {
            if k.q != q {
                return None;
            }
            out.q = 0;
        }
        if let Some(z) = self.z {
            if k.z != z {
                return None;
            }
            out.z = 0;
        }
        if let Some(u) = self.u {
            if k.u != u {
                return None;
            }
            out.u = 0;
        }
        if let Some(d) = &self.def {
            if &k.def != d {
                return None;
            }
            out.def = SmallVec::new();
        }
        Some(out)
    }
}

/// Generic truncated product with an explicit value combiner.
pub fn mul_with<A: Value, B: Value, C: Value>(
    a: &Series<A>,
    b: &Series<B>,
    f: impl Fn(&A, &B) -> C,
) -> Series<C> {
    let mut out = Series::zero(&a.policy);
    for (ka, va) in &a.terms {
        for (kb, vb) in &b.terms {
            let k = ka.mul(kb);
            if !a.policy.contains(&k) {
                continue;
            }
            out.add_term(k, f(va, vb));
        }
    }
    out
}

pub fn mul_scalar(a: &Series<Scalar>, b: &Series<Scalar>) -> Series<Scalar> {
    mul_with(a, b, |x, y| x.mul(y))
}

pub fn mul_scalar_vec(a: &Series<Scalar>, b: &Series<CVec>) -> Series<CVec> {
    mul_with(a, b, |x, y| y.vscale(x))
}

pub fn mul_scalar_mat(a: &Series<Scalar>, b: &Series<Mat>) -> Series<Mat> {
    mul_with(a, b, |x, y| y.vscale(x))
}

pub fn mul_mat(a: &Series<Mat>, b: &Series<Mat>) -> Series<Mat> {
    mul_with(a, b, |x, y| x.matmul(y))
}

pub fn mat_apply(a: &Series<Mat>, v: &Series<CVec>) -> Series<CVec> {
    mul_with(a, v, |m, x| m.apply(x))
}

/// exp(a) = sum a^k / k! under the supplied multiplication. The argument
/// must be "small": every term either nilpotent in value or strictly
/// descending in the truncation filtration, so that powers terminate.
pub fn exp_with<V: Value>(
    a: &Series<V>,
    one: &V,
    mul: impl Fn(&V, &V) -> V,
) -> Result<Series<V>> {
    let mut out = Series::from_term(&a.policy, Key::zero(a.policy.nov_rank), one.clone());
    let mut power = a.clone();
    let mut fact = BigRational::one();
    let mut k = 1u32;
    let cap = 4 * a.policy.diameter() + 16;
    while !power.is_zero() {
        out = out.add(&power.scale_rat(&fact.clone().recip()));
        k += 1;
        if k > cap {
            return Err(Error::DivergentExponential(format!(
                "exp argument not nilpotent after {cap} powers"
            )));
        }
        fact *= BigRational::from_integer(BigInt::from(k));
        power = mul_with(&power, a, &mul);
    }
    Ok(out)
}

/// log(u) for u = one + g with g small in the sense of `exp_with`.
pub fn log_with<V: Value>(
    u: &Series<V>,
    one: &V,
    mul: impl Fn(&V, &V) -> V,
) -> Result<Series<V>> {
    let mut g = u.clone();
    let zero_key = Key::zero(u.policy.nov_rank);
    match g.terms.get(&zero_key) {
        Some(c) => {
            let mut c2 = c.clone();
            c2.vadd(&one.vneg());
            if c2.is_vzero() {
                g.terms.remove(&zero_key);
            } else {
                g.terms.insert(zero_key, c2);
            }
        }
        None => {
            return Err(Error::NonUnit(
                "log of series with constant term != 1".into(),
            ));
        }
    }
    let mut out = Series::zero(&u.policy);
    let mut power = g.clone();
    let mut k = 1u32;
    let cap = 4 * u.policy.diameter() + 16;
    while !power.is_zero() {
        let sign = if k % 2 == 1 {
            BigRational::new(BigInt::one(), BigInt::from(k))
        } else {
            BigRational::new(-BigInt::one(), BigInt::from(k))
        };
        out = out.add(&power.scale_rat(&sign));
        k += 1;
        if k > cap {
            return Err(Error::DivergentExponential(format!(
                "log argument not nilpotent after {cap} powers"
            )));
        }
        power = mul_with(&power, &g, &mul);
    }
    Ok(out)
}

/// Inverse of a scalar series whose constant term is a nonzero scalar.
pub fn invert_scalar(a: &Series<Scalar>) -> Result<Series<Scalar>> {
    let zero_key = Key::zero(a.policy.nov_rank);
    let c = a
        .terms
        .get(&zero_key)
        .ok_or_else(|| Error::NonUnit("no constant term".into()))?
        .clone();
    if c.is_zero() {
        return Err(Error::NonUnit("constant term is zero".into()));
    }
    let c_inv = c.inv()?;
    // a = c (1 + n), a^{-1} = c^{-1} sum (-n)^k
    let mut n = a.scale(&c_inv);
    n.terms.remove(&zero_key);
    let minus_n = n.neg();
    let mut out = Series::from_term(&a.policy, zero_key, c.field.one());
    let mut power = minus_n.clone();
    let cap = 4 * a.policy.diameter() + 16;
    let mut k = 0;
    while !power.is_zero() {
        out = out.add(&power);
        power = mul_scalar(&power, &minus_n);
        k += 1;
        if k > cap {
            return Err(Error::NonUnit("inversion did not terminate".into()));
        }
    }
    Ok(out.scale(&c_inv))
}

/// Inverse of a matrix series given an exact inverse of its head: requires
/// head_inv * a = id + N with N nilpotent under truncation.
pub fn invert_mat(a: &Series<Mat>, head_inv: &Series<Mat>, id: &Mat) -> Result<Series<Mat>> {
    let mut n = mul_mat(head_inv, a);
    let zero_key = Key::zero(a.policy.nov_rank);
    match n.terms.get_mut(&zero_key) {
        Some(c) => {
            c.vadd(&id.vneg());
            if c.is_vzero() {
                n.terms.remove(&zero_key);
            }
        }
        None => {
            return Err(Error::SingularLeadingBlock(
                "head_inv * a has no constant term".into(),
            ));
        }
    }
    let minus_n = n.neg();
    // (id + N)^{-1} = sum (-N)^k
    let mut out = Series::from_term(&a.policy, zero_key, id.clone());
    let mut power = minus_n.clone();
    let cap = 4 * a.policy.diameter() + 16;
    let mut k = 0;
    while !power.is_zero() {
        out = out.add(&power);
        power = mul_mat(&power, &minus_n);
        k += 1;
        if k > cap {
            return Err(Error::SingularLeadingBlock(
                "matrix inversion did not terminate; head inverse wrong?".into(),
            ));
        }
    }
    Ok(mul_mat(&out, head_inv))
}

/// Composition: replaces each assigned deformation coordinate by a scalar
/// series. Assigned values for nilpotent coordinates must have no constant
/// term.
pub fn substitute<V: Value>(
    a: &Series<V>,
    assignments: &[Option<Series<Scalar>>],
) -> Result<Series<V>> {
    for assigned in assignments.iter().flatten() {
        if assigned.constant_term().is_some() {
            return Err(Error::UnstableSubstitution(
                "assigned value has a unit constant term in a nilpotent slot".into(),
            ));
        }
    }
    let max_e = a.policy.deform_order as usize;
    let mut powers: Vec<Option<Vec<Series<Scalar>>>> = vec![None; assignments.len()];
    let mut out = Series::zero(&a.policy);
    for (k, v) in &a.terms {
        let mut kept = k.clone();
        let mut factor: Option<Series<Scalar>> = None;
        let mut new_def: DefExp = SmallVec::new();
        for &(c, e) in &kept.def {
            if (c as usize) < assignments.len() && assignments[c as usize].is_some() {
                if powers[c as usize].is_none() {
                    let s = assignments[c as usize].as_ref().unwrap();
                    let field = &s.terms.values().next().unwrap().field;
                    let mut v = Vec::with_capacity(max_e + 1);
                    let mut acc = Series::from_term(
                        &a.policy,
                        Key::zero(a.policy.nov_rank),
                        field.one(),
                    );
                    v.push(acc.clone());
                    for _ in 0..max_e {
                        acc = mul_scalar(&acc, s);
                        v.push(acc.clone());
                    }
                    powers[c as usize] = Some(v);
                }
                let p = &powers[c as usize].as_ref().unwrap()[e as usize];
                factor = Some(match factor {
                    None => p.clone(),
                    Some(f) => mul_scalar(&f, p),
                });
            } else {
                new_def.push((c, e));
            }
        }
        kept.def = new_def;
        match factor {
            None => out.add_term(kept, v.clone()),
            Some(f) => {
                for (fk, fv) in &f.terms {
                    out.add_term(kept.mul(fk), v.vscale(fv));
                }
            }
        }
    }
    Ok(out)
}

impl<V: Value + fmt::Display> fmt::Display for Series<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return writeln!(f, "0");
        }
        for (k, v) in &self.terms {
            writeln!(f, "{} * {}", key_string(k), v)?;
        }
        Ok(())
    }
}

pub fn key_string(k: &Key) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (i, &n) in k.nov.iter().enumerate() {
        if n != 0 {
            parts.push(format!("Q{i}^{n}"));
        }
    }
    if k.q != 0 {
        parts.push(format!("q^({}/D)", k.q));
    }
    if k.z != 0 {
        parts.push(format!("z^{}", k.z));
    }
    if k.u != 0 {
        parts.push(format!("u^{}", k.u));
    }
    for &(c, e) in &k.def {
        parts.push(format!("x{c}^{e}"));
    }
    if parts.is_empty() {
        "1".to_string()
    } else {
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::CycloField;

    fn pol() -> Arc<TruncationPolicy> {
        let mut p = (*TruncationPolicy::bare(2, -20, 20, -8, 8)).clone();
        p.nov_rank = 1;
        p.nov_weights = vec![1];
        p.nov_bound = 6;
        p.nov_min = vec![0];
        p.deform_order = 5;
        p.u_order = 8;
        p.nov_degrees = vec![6];
        p.coord_degrees = vec![2, 0, -2];
        Arc::new(p)
    }

    #[test]
    fn geometric_series_inverse() {
        let f = CycloField::new(4);
        let p = pol();
        let mut a = Series::from_term(&p, Key::zero(1), f.one());
        let mut kq = Key::zero(1);
        kq.nov[0] = 1;
        a.add_term(kq, f.from_i64(-1));
        let inv = invert_scalar(&a).unwrap();
        for n in 0..=6 {
            let mut k = Key::zero(1);
            k.nov[0] = n;
            assert_eq!(inv.terms.get(&k), Some(&f.one()), "Q^{n}");
        }
        assert_eq!(mul_scalar(&a, &inv).terms.len(), 1);
    }

    #[test]
    fn q_laurent_product() {
        let f = CycloField::new(4);
        let p = pol();
        let one = Series::from_term(&p, Key::zero(1), f.one());
        let a = one.add(&Series::from_term(&p, Key::q_pow(1, -2), f.one()));
        let b = one.add(&Series::from_term(&p, Key::q_pow(1, -2), f.from_i64(-1)));
        let ab = mul_scalar(&a, &b);
        assert_eq!(ab.terms.len(), 2);
        assert_eq!(ab.terms.get(&Key::q_pow(1, -4)), Some(&f.from_i64(-1)));
    }

    #[test]
    fn gauss_moments() {
        let f = CycloField::new(4);
        let p = pol();
        for n in 0..=4u16 {
            let s = Series::from_term(&p, Key::u_pow(1, 2 * n), f.one());
            let c = s.gauss_contract();
            let mut expect = BigInt::one();
            for j in 0..n as u32 {
                expect *= BigInt::from(2 * j + 1);
            }
            assert_eq!(
                c.terms.get(&Key::z_pow(1, n as i32)),
                Some(&f.from_rational(BigRational::from_integer(expect)))
            );
        }
        let odd = Series::from_term(&p, Key::u_pow(1, 3), f.one());
        assert!(odd.gauss_contract().is_zero());
    }

    #[test]
    fn exp_log_round_trip() {
        let f = CycloField::new(4);
        let p = pol();
        let mut a = Series::zero(&p);
        let mut k1 = Key::deform(1, 0, 1);
        k1.z = -1;
        a.add_term(k1, f.from_i64(3));
        let mut k2 = Key::q_pow(1, -4);
        k2.z = 1;
        a.add_term(k2, f.rational(1, 2));
        let e = exp_with(&a, &f.one(), |x, y| x.mul(y)).unwrap();
        let l = log_with(&e, &f.one(), |x, y| x.mul(y)).unwrap();
        assert_eq!(l.terms, a.terms);
    }

    #[test]
    fn exp_of_scalar_unit_diverges() {
        let f = CycloField::new(4);
        let p = pol();
        let a = Series::from_term(&p, Key::zero(1), f.one());
        assert!(exp_with(&a, &f.one(), |x, y| x.mul(y)).is_err());
    }

    #[test]
    fn leibniz_rule() {
        let f = CycloField::new(4);
        let p = pol();
        let mut a = Series::from_term(&p, Key::deform(1, 0, 2), f.from_i64(2));
        a.add_term(Key::z_pow(1, 2), f.one());
        let mut b = Series::from_term(&p, Key::deform(1, 0, 1), f.from_i64(5));
        b.add_term(Key::q_pow(1, 2), f.one());
        let ab = mul_scalar(&a, &b);
        let lhs = ab.derive_deform(0);
        let rhs = mul_scalar(&a.derive_deform(0), &b).add(&mul_scalar(&a, &b.derive_deform(0)));
        assert_eq!(lhs.terms, rhs.terms);
        let lhs_z = ab.derive_z();
        let rhs_z = mul_scalar(&a.derive_z(), &b).add(&mul_scalar(&a, &b.derive_z()));
        assert_eq!(lhs_z.terms, rhs_z.terms);
    }

    #[test]
    fn substitution_composes() {
        let f = CycloField::new(4);
        let p = pol();
        let mut a = Series::from_term(&p, Key::deform(1, 0, 1), f.one());
        a.add_term(Key::deform(1, 0, 2), f.one());
        let mut fmap = Series::from_term(&p, Key::deform(1, 1, 1), f.one());
        fmap.add_term(Key::deform(1, 1, 2), f.one());
        let gmap = Series::from_term(&p, Key::deform(1, 2, 1), f.from_i64(2));
        let af = substitute(&a, &[Some(fmap.clone()), None, None]).unwrap();
        let afg = substitute(&af, &[None, Some(gmap.clone()), None]).unwrap();
        let fg = substitute(&fmap, &[None, Some(gmap), None]).unwrap();
        let a_fg = substitute(&a, &[Some(fg), None, None]).unwrap();
        assert_eq!(afg.terms, a_fg.terms);
    }

    #[test]
    fn homogeneity_tracking() {
        let f = CycloField::new(4);
        let p = pol();
        let mut a = Series::zero(&p);
        let mut k = Key::zero(1);
        k.nov[0] = 1;
        k.z = -2;
        a.add_term(k, f.one());
        a.add_term(Key::deform(1, 0, 1), f.one());
        assert_eq!(a.homogeneous_degree(|_| Some(0)), Some(2));
        let sq = mul_scalar(&a, &a);
        assert_eq!(sq.homogeneous_degree(|_| Some(0)), Some(4));
    }

    #[test]
    fn derive_q_fractional() {
        let f = CycloField::new(4);
        let p = pol();
        let s = Series::from_term(&p, Key::q_pow(1, 1), f.one());
        let d = s.derive_q();
        assert_eq!(d.terms.get(&Key::q_pow(1, 1)), Some(&f.rational(1, 2)));
    }

    #[test]
    fn matrix_inverse_with_head() {
        let f = CycloField::new(4);
        let p = pol();
        let id = Mat::identity(2, &f.zero(), &f.one());
        let mut a = Series::from_term(&p, Key::zero(1), id.clone());
        let mut n = Mat::zero(2, &f.zero());
        n.set(0, 1, f.from_i64(3));
        let mut kq = Key::zero(1);
        kq.nov[0] = 1;
        a.add_term(kq, n);
        let head_inv = Series::from_term(&p, Key::zero(1), id.clone());
        let inv = invert_mat(&a, &head_inv, &id).unwrap();
        let prod = mul_mat(&a, &inv);
        assert_eq!(prod.terms.len(), 1);
        assert_eq!(prod.constant_term(), Some(&id));
    }
}
