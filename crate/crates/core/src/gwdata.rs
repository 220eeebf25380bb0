//! Genus-zero Gromov-Witten datasets.
//!
//! Datasets are generated by closing a small seed set under the WDVV
//! associativity relations (possible whenever the target ring is generated
//! in degree 2), and read through the string, divisor and dimension axioms:
//! only divisor-free entries are stored, everything else is computed on
//! read. The same relation evaluator doubles as the oracle's residual
//! check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use num::BigInt;
use num::rational::BigRational;
use smallvec::SmallVec;

use crate::coeff::{CycloField, Scalar};
use crate::cohring::{BlowupGeometry, CohRing};
use crate::par;
use crate::series::{CVec, Key, Mat, Series, TruncationPolicy};
use crate::{Error, Result};

pub type CurveClass = SmallVec<[i64; 2]>;
pub type Insertions = SmallVec<[u8; 8]>;

/// A space seen as a Gromov-Witten target: ring plus curve lattice data.
#[derive(Debug)]
pub struct GwSpace {
    pub ring: Arc<CohRing>,
    pub nov_rank: usize,
    /// c1(TX) . d_i for lattice generators d_i.
    pub c1_pairing: Vec<i64>,
    /// For each basis index of the ring, the lattice pairings of that class
    /// when it has degree 2 (empty vector otherwise).
    pub div_pairing: Vec<Vec<i64>>,
    /// Linear inequalities (rows) that cut out the effective cone.
    pub effective_ineqs: Vec<Vec<i64>>,
    /// An ample pairing vector, positive on effective classes.
    pub ample: Vec<i64>,
}

impl GwSpace {
    pub fn field(&self) -> &Arc<CycloField> {
        &self.ring.field
    }

    pub fn is_effective(&self, d: &[i64]) -> bool {
        self.effective_ineqs
            .iter()
            .all(|row| row.iter().zip(d).map(|(c, x)| c * x).sum::<i64>() >= 0)
    }

    pub fn c1_dot(&self, d: &[i64]) -> i64 {
        self.c1_pairing.iter().zip(d).map(|(c, x)| c * x).sum()
    }

    pub fn div_dot(&self, basis_index: usize, d: &[i64]) -> i64 {
        self.div_pairing[basis_index]
            .iter()
            .zip(d)
            .map(|(c, x)| c * x)
            .sum()
    }

    pub fn is_zero_class(&self, d: &[i64]) -> bool {
        d.iter().all(|&x| x == 0)
    }

    /// All nonzero effective classes with 0 < c1 . d <= bound.
    pub fn effective_classes(&self, bound: i64) -> Vec<CurveClass> {
        let mut out = Vec::new();
        if self.nov_rank == 0 {
            return out;
        }
        let range = 2 * bound.max(1);
        let mut d: CurveClass = SmallVec::from_elem(0, self.nov_rank);
        fn rec(
            space: &GwSpace,
            d: &mut CurveClass,
            i: usize,
            range: i64,
            bound: i64,
            out: &mut Vec<CurveClass>,
        ) {
            if i == d.len() {
                let c1 = space.c1_dot(d);
                if !space.is_zero_class(d) && space.is_effective(d) && c1 > 0 && c1 <= bound {
                    out.push(d.clone());
                }
                return;
            }
            for v in -range..=range {
                d[i] = v;
                rec(space, d, i + 1, range, bound, out);
            }
        }
        rec(self, &mut d, 0, range, bound, &mut out);
        out.sort_by_key(|d| (self.c1_dot(d), d.clone()));
        out
    }

    /// Dimension constraint: sum deg(ins) = 2(c1.d + dim - 3 + n).
    pub fn dimension_ok(&self, d: &[i64], ins: &[u8]) -> bool {
        let total: i64 = ins.iter().map(|&i| self.ring.degrees[i as usize]).sum();
        let n = ins.len() as i64;
        total == 2 * (self.c1_dot(d) + self.ring.dim_c - 3 + n)
    }

    /// Divisor-free, unit-free multisets satisfying the dimension axiom.
    pub fn candidate_insertions(&self, d: &[i64]) -> Vec<Insertions> {
        let target = 2 * (self.c1_dot(d) + self.ring.dim_c - 3);
        // sum over insertions of (deg - 2) must equal target; deg - 2 >= 2.
        let classes: Vec<(u8, i64)> = (0..self.ring.rank())
            .filter(|&i| self.ring.degrees[i] > 2)
            .map(|i| (i as u8, self.ring.degrees[i] - 2))
            .collect();
        let mut out = Vec::new();
        fn rec(
            classes: &[(u8, i64)],
            from: usize,
            left: i64,
            cur: &mut Insertions,
            out: &mut Vec<Insertions>,
        ) {
            if left == 0 {
                out.push(cur.clone());
                return;
            }
            for idx in from..classes.len() {
                let (c, w) = classes[idx];
                if w <= left {
                    cur.push(c);
                    rec(classes, idx, left - w, cur, out);
                    cur.pop();
                }
            }
        }
        if target >= 0 {
            let mut cur = SmallVec::new();
            rec(&classes, 0, target, &mut cur, &mut out);
        }
        out
    }
}

/// One seed with provenance.
#[derive(Clone, Debug)]
pub struct Seed {
    pub d: CurveClass,
    pub ins: Insertions,
    pub value: Scalar,
    pub note: String,
}

pub struct GWDataset {
    pub space: Arc<GwSpace>,
    pub bound: i64,
    pub inv: BTreeMap<(CurveClass, Insertions), Scalar>,
    pub seeds: Vec<Seed>,
}

/// Linear expression in not-yet-solved invariants.
#[derive(Clone)]
struct Affine {
    constant: Scalar,
    coeffs: BTreeMap<(CurveClass, Insertions), Scalar>,
}

impl Affine {
    fn constant(c: Scalar) -> Affine {
        Affine {
            constant: c,
            coeffs: BTreeMap::new(),
        }
    }
    fn is_constant(&self) -> bool {
        self.coeffs.is_empty()
    }
    fn scale(&self, s: &Scalar) -> Affine {
        Affine {
            constant: self.constant.mul(s),
            coeffs: self
                .coeffs
                .iter()
                .map(|(k, v)| (k.clone(), v.mul(s)))
                .collect(),
        }
    }
    fn add_assign(&mut self, other: &Affine) {
        self.constant = self.constant.add(&other.constant);
        for (k, v) in &other.coeffs {
            let e = self.coeffs.entry(k.clone()).or_insert_with(|| v.field.zero());
            *e = e.add(v);
            if e.is_zero() {
                self.coeffs.remove(k);
            }
        }
    }
    fn mul(&self, other: &Affine) -> Result<Affine> {
        if !self.is_constant() && !other.is_constant() {
            return Err(Error::Internal(
                "WDVV term quadratic in unknowns; degree ordering broken".into(),
            ));
        }
        if self.is_constant() {
            Ok(other.scale(&self.constant))
        } else {
            Ok(self.scale(&other.constant))
        }
    }
}

impl GWDataset {
    pub fn empty(space: &Arc<GwSpace>, bound: i64) -> GWDataset {
        GWDataset {
            space: Arc::clone(space),
            bound,
            inv: BTreeMap::new(),
            seeds: Vec::new(),
        }
    }

    /// Reads an invariant with basis-class insertions, applying the axioms.
    pub fn correlator_basis(&self, d: &CurveClass, ins: &[u8]) -> Result<Scalar> {
        let affine = self.eval_affine(d, ins, None)?;
        debug_assert!(affine.is_constant());
        Ok(affine.constant)
    }

    /// Reads an invariant with arbitrary class insertions.
    pub fn correlator(&self, d: &CurveClass, classes: &[CVec]) -> Result<Scalar> {
        let field = self.space.field();
        let mut total = field.zero();
        let mut ins: Vec<u8> = Vec::with_capacity(classes.len());
        fn rec(
            data: &GWDataset,
            d: &CurveClass,
            classes: &[CVec],
            slot: usize,
            coeff: Scalar,
            ins: &mut Vec<u8>,
            total: &mut Scalar,
        ) -> Result<()> {
            if coeff.is_zero() {
                return Ok(());
            }
            if slot == classes.len() {
                let v = data.correlator_basis(d, ins)?;
                *total = total.add(&coeff.mul(&v));
                return Ok(());
            }
            for (i, c) in classes[slot].0.iter().enumerate() {
                if c.is_zero() {
                    continue;
                }
                ins.push(i as u8);
                rec(data, d, classes, slot + 1, coeff.mul(c), ins, total)?;
                ins.pop();
            }
            Ok(())
        }
        rec(self, d, classes, 0, field.one(), &mut ins, &mut total)?;
        Ok(total)
    }

    fn eval_affine(
        &self,
        d: &CurveClass,
        ins: &[u8],
        unknowns: Option<&BTreeSet<(CurveClass, Insertions)>>,
    ) -> Result<Affine> {
        let space = &self.space;
        let ring = &space.ring;
        let field = space.field();
        let zero = Affine::constant(field.zero());
        if space.is_zero_class(d) {
            if ins.len() != 3 {
                return Ok(zero);
            }
            let a = ring.cup(&ring.basis_class(ins[0] as usize), &ring.basis_class(ins[1] as usize));
            let b = ring.cup(&a, &ring.basis_class(ins[2] as usize));
            return Ok(Affine::constant(ring.integrate(&b)));
        }
        if !space.is_effective(d) {
            return Ok(zero);
        }
        if !space.dimension_ok(d, ins) {
            return Ok(zero);
        }
        // unit insertion: string equation kills it for d != 0
        if ins.contains(&0) {
            return Ok(zero);
        }
        // divisor insertions: peel them off
        if let Some(pos) = ins
            .iter()
            .position(|&i| ring.degrees[i as usize] == 2)
        {
            let i = ins[pos] as usize;
            let factor = field.from_i64(space.div_dot(i, d));
            let mut rest: Vec<u8> = ins.to_vec();
            rest.remove(pos);
            let sub = self.eval_affine(d, &rest, unknowns)?;
            return Ok(sub.scale(&factor));
        }
        let mut key_ins: Insertions = SmallVec::from_slice(ins);
        key_ins.sort_unstable();
        let key = (d.clone(), key_ins);
        if let Some(v) = self.inv.get(&key) {
            return Ok(Affine::constant(v.clone()));
        }
        if let Some(set) = unknowns {
            if set.contains(&key) {
                let mut coeffs = BTreeMap::new();
                coeffs.insert(key, field.one());
                return Ok(Affine {
                    constant: field.zero(),
                    coeffs,
                });
            }
        }
        if space.c1_dot(d) > self.bound {
            return Err(Error::BoundExceeded(format!(
                "invariant at c1.d = {} beyond bound {}",
                space.c1_dot(d),
                self.bound
            )));
        }
        Err(Error::Internal(format!(
            "missing stored invariant d={d:?} ins={ins:?}"
        )))
    }

    /// One WDVV relation: E(a,b|c,e;S;d) - E(a,c|b,e;S;d); zero when WDVV holds.
    fn relation_affine(
        &self,
        d: &CurveClass,
        a: u8,
        b: u8,
        c: u8,
        e: u8,
        s: &[u8],
        effectives: &[CurveClass],
        unknowns: Option<&BTreeSet<(CurveClass, Insertions)>>,
    ) -> Result<Affine> {
        let lhs = self.e_sum(d, a, b, c, e, s, effectives, unknowns)?;
        let rhs = self.e_sum(d, a, c, b, e, s, effectives, unknowns)?;
        let mut out = lhs;
        out.add_assign(&rhs.scale(&self.space.field().from_i64(-1)));
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn e_sum(
        &self,
        d: &CurveClass,
        a: u8,
        b: u8,
        c: u8,
        e: u8,
        s: &[u8],
        effectives: &[CurveClass],
        unknowns: Option<&BTreeSet<(CurveClass, Insertions)>>,
    ) -> Result<Affine> {
        let space = &self.space;
        let field = space.field();
        let n = space.ring.rank();
        let mut total = Affine::constant(field.zero());
        // split classes: d1 + d2 = d, both effective (including 0)
        let mut splits: Vec<CurveClass> = vec![SmallVec::from_elem(0, space.nov_rank)];
        splits.extend(effectives.iter().filter(|d1| {
            let d2: CurveClass = d.iter().zip(d1.iter()).map(|(x, y)| x - y).collect();
            space.is_effective(&d2)
        }).cloned());
        for d1 in &splits {
            let d2: CurveClass = d.iter().zip(d1.iter()).map(|(x, y)| x - y).collect();
            if !space.is_effective(&d2) {
                continue;
            }
            for (s1, s2, mult) in multiset_splits(s, field) {
                // V1[p] = <a,b,S1,phi_p>_{d1}, V2[q] = <phi_q,c,e,S2>_{d2}
                let mut v1: Vec<Affine> = Vec::with_capacity(n);
                let mut any1 = false;
                for p in 0..n {
                    let mut ins = vec![a, b, p as u8];
                    ins.extend_from_slice(&s1);
                    let t = self.eval_affine(d1, &ins, unknowns)?;
                    any1 = any1 || !t.constant.is_zero() || !t.coeffs.is_empty();
                    v1.push(t);
                }
                if !any1 {
                    continue;
                }
                for q in 0..n {
                    let mut ins = vec![q as u8, c, e];
                    ins.extend_from_slice(&s2);
                    let t2 = self.eval_affine(&d2, &ins, unknowns)?;
                    if t2.constant.is_zero() && t2.coeffs.is_empty() {
                        continue;
                    }
                    for p in 0..n {
                        let g = space.ring.gram_inv.at(p, q);
                        if g.is_zero() {
                            continue;
                        }
                        let prod = v1[p].mul(&t2)?;
                        total.add_assign(&prod.scale(&g.mul(&mult)));
                    }
                }
            }
        }
        Ok(total)
    }

    /// Exactly-zero check of all WDVV relations within the bound; returns
    /// the first nonzero residual, or zero. Embarrassingly parallel.
    pub fn wdvv_residual(&self, parallel: bool) -> Result<Scalar> {
        let field = self.space.field();
        let rels = self.relation_index();
        let effectives = self.space.effective_classes(self.bound);
        let results = par::map_maybe_par(parallel, rels, |(d, a, b, c, e, s)| {
            self.relation_affine(&d, a, b, c, e, &s, &effectives, None)
                .map(|aff| aff.constant)
        });
        for r in results {
            let v = r?;
            if !v.is_zero() {
                return Ok(v);
            }
        }
        Ok(field.zero())
    }

    #[allow(clippy::type_complexity)]
    fn relation_index(&self) -> Vec<(CurveClass, u8, u8, u8, u8, Vec<u8>)> {
        let space = &self.space;
        let ring = &space.ring;
        let n = ring.rank() as u8;
        let mut out = Vec::new();
        for d in space.effective_classes(self.bound) {
            let n_max = space.c1_dot(&d) + ring.dim_c;
            let s_cap = (n_max - 2).max(0) as usize;
            let s_pool: Vec<u8> = (0..n).filter(|&i| ring.degrees[i as usize] > 2).collect();
            for s in multisets_up_to(&s_pool, s_cap) {
                for a in 1..n {
                    for b in 1..n {
                        for c in (b + 1)..n {
                            for e in 1..n {
                                out.push((d.clone(), a, b, c, e, s.clone()));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Structure of the quantum product at a parameter point.
    ///
    /// `point` is a deformation series valued in the space's basis with no
    /// constant term; its coefficients live in the supplied policy's
    /// variables. `embed` places a curve class d in the series key lattice
    /// and supplies an exact root-of-unity character per class. Returns the
    /// matrices of `phi_a star` for every basis element a.
    pub fn star_matrices(
        &self,
        point: &Series<CVec>,
        embed: &NovEmbed,
        policy: &Arc<TruncationPolicy>,
    ) -> Result<Vec<Series<Mat>>> {
        if point.constant_term().is_some() {
            return Err(Error::UnstableSubstitution(
                "quantum product point has a constant term".into(),
            ));
        }
        self.star_matrices_rec(point, embed, policy)
    }

    fn star_matrices_rec(
        &self,
        point: &Series<CVec>,
        embed: &NovEmbed,
        policy: &Arc<TruncationPolicy>,
    ) -> Result<Vec<Series<Mat>>> {
        let space = &self.space;
        let ring = &space.ring;
        let field = space.field();
        let n = ring.rank();
        let atoms: Vec<(Key, u8, Scalar)> = point
            .terms
            .iter()
            .flat_map(|(k, v)| {
                v.0.iter()
                    .enumerate()
                    .filter(|(_, c)| !c.is_zero())
                    .map(|(m, c)| (k.clone(), m as u8, c.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut classes: Vec<CurveClass> = vec![SmallVec::from_elem(0, space.nov_rank)];
        classes.extend(space.effective_classes(self.bound));
        let mut out = vec![Series::<Mat>::zero(policy); n];

        #[allow(clippy::too_many_arguments)]
        fn rec(
            data: &GWDataset,
            d: &CurveClass,
            atoms: &[(Key, u8, Scalar)],
            from: usize,
            key: &Key,
            coeff: &Scalar,
            ins: &mut Vec<u8>,
            mult_of_last: u64,
            out: &mut [Series<Mat>],
            policy: &Arc<TruncationPolicy>,
        ) -> Result<()> {
            // contribution of the current atom multiset:
            // phi_a star phi_b += coeff * sum_{q,c} <a,b,q,ins>_d g^{qc} phi_c
            let ring = &data.space.ring;
            let field = data.space.field();
            let n = ring.rank();
            for a in 0..n {
                let mut m = Mat::zero(n, &field.zero());
                let mut nonzero = false;
                for b in 0..n {
                    let mut col = vec![field.zero(); n];
                    let mut any = false;
                    for p in 0..n {
                        let mut v = vec![a as u8, b as u8, p as u8];
                        v.extend_from_slice(ins);
                        let val = data.correlator_basis(d, &v)?;
                        if !val.is_zero() {
                            any = true;
                        }
                        col[p] = val;
                    }
                    if !any {
                        continue;
                    }
                    for c in 0..n {
                        let mut s = field.zero();
                        for (q, cq) in col.iter().enumerate() {
                            if cq.is_zero() {
                                continue;
                            }
                            let g = ring.gram_inv.at(q, c);
                            if g.is_zero() {
                                continue;
                            }
                            s = s.add(&cq.mul(g));
                        }
                        if !s.is_zero() {
                            nonzero = true;
                            m.set(c, b, s.mul(coeff));
                        }
                    }
                }
                if nonzero {
                    out[a].add_term(key.clone(), m);
                }
            }
            for i in from..atoms.len() {
                let (ak, am, ac) = &atoms[i];
                let k2 = key.mul(ak);
                if !policy.contains(&k2) {
                    continue;
                }
                let mult = if i == from && !ins.is_empty() {
                    mult_of_last + 1
                } else {
                    1
                };
                // dividing by the factorial of repeats: coeff *= ac / mult
                let c2 = coeff
                    .mul(ac)
                    .scale(&BigRational::new(BigInt::from(1), BigInt::from(mult)));
                ins.push(*am);
                rec(data, d, atoms, i, &k2, &c2, ins, mult, out, policy)?;
                ins.pop();
            }
            Ok(())
        }

        for d in &classes {
            let base_key = embed.key_of(d, policy)?;
            if !policy.contains(&base_key) {
                continue;
            }
            let charf = embed.character(d, field)?;
            let mut ins = Vec::new();
            rec(
                self, d, &atoms, 0, &base_key, &charf, &mut ins, 0, &mut out, policy,
            )?;
        }
        Ok(out)
    }
}

/// Sub-multiset splits (S1, S2) of S with multiplicity coefficients
/// prod_i C(m_i, k_i).
fn multiset_splits(s: &[u8], field: &Arc<CycloField>) -> Vec<(Vec<u8>, Vec<u8>, Scalar)> {
    // distinct elements with counts
    let mut counts: BTreeMap<u8, u32> = BTreeMap::new();
    for &x in s {
        *counts.entry(x).or_insert(0) += 1;
    }
    let items: Vec<(u8, u32)> = counts.into_iter().collect();
    let mut out = Vec::new();
    let mut choice = vec![0u32; items.len()];
    loop {
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        let mut mult = BigInt::from(1);
        for (idx, &(x, m)) in items.iter().enumerate() {
            let k = choice[idx];
            for _ in 0..k {
                s1.push(x);
            }
            for _ in 0..(m - k) {
                s2.push(x);
            }
            mult *= binomial_u(m, k);
        }
        out.push((
            s1,
            s2,
            field.from_rational(BigRational::from_integer(mult)),
        ));
        // increment
        let mut i = 0;
        loop {
            if i == items.len() {
                return out;
            }
            if choice[i] < items[i].1 {
                choice[i] += 1;
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

fn binomial_u(n: u32, k: u32) -> BigInt {
    let mut num = BigInt::from(1);
    let mut den = BigInt::from(1);
    for i in 0..k {
        num *= BigInt::from(n - i);
        den *= BigInt::from(i + 1);
    }
    num / den
}

fn multisets_up_to(pool: &[u8], cap: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..cap {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for &p in pool.iter().filter(|&&p| p >= start) {
                let mut m2 = m.clone();
                m2.push(p);
                next.push(m2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Embedding of a space's curve lattice into series monomial keys, with an
/// exact character per class (root-of-unity divisor shifts).
#[derive(Clone, Debug)]
pub struct NovEmbed {
    /// Per lattice generator: the series Novikov exponents contributed.
    pub nov_map: Vec<Vec<i32>>,
    /// Per lattice generator: added q-exponent numerator.
    pub q_num: Vec<i64>,
    /// Character exp(2 pi i * (num/den) * (pairing . d)).
    pub char_num: i64,
    pub char_den: i64,
    pub char_pairing: Vec<i64>,
}

impl NovEmbed {
    pub fn identity(rank: usize) -> NovEmbed {
        NovEmbed {
            nov_map: (0..rank)
                .map(|i| {
                    let mut v = vec![0; rank];
                    v[i] = 1;
                    v
                })
                .collect(),
            q_num: vec![0; rank],
            char_num: 0,
            char_den: 1,
            char_pairing: vec![0; rank],
        }
    }

    pub fn key_of(&self, d: &[i64], policy: &Arc<TruncationPolicy>) -> Result<Key> {
        let mut k = Key::zero(policy.nov_rank);
        for (i, &di) in d.iter().enumerate() {
            for (j, &m) in self.nov_map[i].iter().enumerate() {
                k.nov[j] += (m as i64 * di) as i32;
            }
            k.q += self.q_num[i] * di;
        }
        Ok(k)
    }

    pub fn character(&self, d: &[i64], field: &Arc<CycloField>) -> Result<Scalar> {
        if self.char_num == 0 {
            return Ok(field.one());
        }
        let p: i64 = self.char_pairing.iter().zip(d).map(|(c, x)| c * x).sum();
        field.root_of_unity(self.char_num * p, self.char_den)
    }
}

/// Kontsevich-style WDVV closure from seeds.
pub fn wdvv_close(space: &Arc<GwSpace>, seeds: &[Seed], bound: i64) -> Result<GWDataset> {
    let field = space.field();
    let mut data = GWDataset::empty(space, bound);
    data.seeds = seeds.to_vec();
    for seed in seeds {
        // canonicalize: strip divisors and unit via the axioms
        let mut value = seed.value.clone();
        let mut ins: Vec<u8> = Vec::new();
        for &i in &seed.ins {
            let deg = space.ring.degrees[i as usize];
            if deg == 0 {
                return Err(Error::InconsistentSeeds("unit insertion in seed".into()));
            } else if deg == 2 {
                let f = space.div_dot(i as usize, &seed.d);
                if f == 0 {
                    return Err(Error::InconsistentSeeds(
                        "divisor insertion with zero pairing in seed".into(),
                    ));
                }
                value = value.div(&field.from_i64(f))?;
            } else {
                ins.push(i);
            }
        }
        ins.sort_unstable();
        let key_ins: Insertions = SmallVec::from_slice(&ins);
        if !space.dimension_ok(&seed.d, &key_ins) {
            return Err(Error::InconsistentSeeds(format!(
                "seed fails the dimension axiom: d={:?} ins={:?}",
                seed.d, seed.ins
            )));
        }
        data.inv.insert((seed.d.clone(), key_ins), value);
    }
    let effectives = space.effective_classes(bound);
    let degrees: Vec<i64> = {
        let mut v: Vec<i64> = effectives.iter().map(|d| space.c1_dot(d)).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for deg in degrees {
        let classes: Vec<&CurveClass> = effectives
            .iter()
            .filter(|d| space.c1_dot(d) == deg)
            .collect();
        // unknowns at this degree
        let mut unknowns: BTreeSet<(CurveClass, Insertions)> = BTreeSet::new();
        for d in &classes {
            for ins in space.candidate_insertions(d) {
                let key = ((*d).clone(), ins);
                if !data.inv.contains_key(&key) {
                    unknowns.insert(key);
                }
            }
        }
        if unknowns.is_empty() {
            continue;
        }
        // collect relations touching unknowns
        let mut rows: Vec<(BTreeMap<(CurveClass, Insertions), Scalar>, Scalar)> = Vec::new();
        let n = space.ring.rank() as u8;
        'outer: for d in &classes {
            let n_max = space.c1_dot(d) + space.ring.dim_c;
            let s_cap = (n_max - 2).max(0) as usize;
            let s_pool: Vec<u8> = (0..n)
                .filter(|&i| space.ring.degrees[i as usize] > 2)
                .collect();
            for s in multisets_up_to(&s_pool, s_cap) {
                for a in 1..n {
                    if space.ring.degrees[a as usize] != 2 {
                        continue;
                    }
                    for b in 1..n {
                        for c in (b + 1)..n {
                            for e in 1..n {
                                let aff = data.relation_affine(
                                    d,
                                    a,
                                    b,
                                    c,
                                    e,
                                    &s,
                                    &effectives,
                                    Some(&unknowns),
                                )?;
                                if aff.coeffs.is_empty() {
                                    continue;
                                }
                                rows.push((aff.coeffs, aff.constant.neg()));
                                if rows.len() > 400 * unknowns.len() + 4000 {
                                    break 'outer;
                                }
                            }
                        }
                    }
                }
            }
        }
        // sparse Gaussian elimination
        let unknown_list: Vec<(CurveClass, Insertions)> = unknowns.iter().cloned().collect();
        let index: BTreeMap<_, usize> = unknown_list
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        let nu = unknown_list.len();
        let mut mat: Vec<Vec<Scalar>> = Vec::new();
        let mut rhs: Vec<Scalar> = Vec::new();
        for (coeffs, b) in rows {
            let mut row = vec![field.zero(); nu];
            for (k, v) in coeffs {
                row[index[&k]] = v;
            }
            mat.push(row);
            rhs.push(b);
        }
        let solution = solve_overdetermined(&mut mat, &mut rhs, nu, field)?;
        for (i, val) in solution.into_iter().enumerate() {
            match val {
                Some(v) => {
                    data.inv.insert(unknown_list[i].clone(), v);
                }
                None => {
                    return Err(Error::Underdetermined(format!(
                        "no WDVV relation determines d={:?} ins={:?}",
                        unknown_list[i].0, unknown_list[i].1
                    )));
                }
            }
        }
    }
    Ok(data)
}

/// Gaussian elimination allowing redundant consistent rows; per-column
/// solutions, None when a column never gets a pivot.
fn solve_overdetermined(
    mat: &mut [Vec<Scalar>],
    rhs: &mut [Scalar],
    ncols: usize,
    _field: &Arc<CycloField>,
) -> Result<Vec<Option<Scalar>>> {
    let nrows = mat.len();
    let mut pivot_row_of_col: Vec<Option<usize>> = vec![None; ncols];
    let mut used_rows = vec![false; nrows];
    for col in 0..ncols {
        let Some(r) = (0..nrows).find(|&r| !used_rows[r] && !mat[r][col].is_zero()) else {
            continue;
        };
        used_rows[r] = true;
        pivot_row_of_col[col] = Some(r);
        let inv = mat[r][col].inv()?;
        for c in 0..ncols {
            mat[r][c] = mat[r][c].mul(&inv);
        }
        rhs[r] = rhs[r].mul(&inv);
        for rr in 0..nrows {
            if rr != r && !mat[rr][col].is_zero() {
                let f = mat[rr][col].clone();
                for c in 0..ncols {
                    let t = f.mul(&mat[r][c]);
                    mat[rr][c] = mat[rr][c].sub(&t);
                }
                let t = f.mul(&rhs[r]);
                rhs[rr] = rhs[rr].sub(&t);
            }
        }
    }
    // consistency of the remaining rows
    for r in 0..nrows {
        if used_rows[r] {
            continue;
        }
        if mat[r].iter().all(|c| c.is_zero()) && !rhs[r].is_zero() {
            return Err(Error::InconsistentSeeds(
                "overdetermined WDVV system has a nonzero residual".into(),
            ));
        }
    }
    Ok((0..ncols)
        .map(|col| pivot_row_of_col[col].map(|r| rhs[r].clone()))
        .collect())
}

/// Spaces and preset seeds derived from a blowup geometry.
pub fn gw_space_x(g: &BlowupGeometry) -> Arc<GwSpace> {
    Arc::new(GwSpace {
        ring: Arc::clone(&g.x),
        nov_rank: g.x_c1_pairing.len(),
        c1_pairing: g.x_c1_pairing.clone(),
        div_pairing: div_pairing_for(&g.x, &g.x_div_pairing),
        effective_ineqs: vec![vec![1]],
        ample: g.x_ample_pairing.clone(),
    })
}

pub fn gw_space_z(g: &BlowupGeometry) -> Arc<GwSpace> {
    Arc::new(GwSpace {
        ring: Arc::clone(&g.z),
        nov_rank: g.z_nov_rank,
        c1_pairing: g.z_c1_pairing.clone(),
        div_pairing: div_pairing_for(&g.z, &g.z_div_pairing),
        effective_ineqs: if g.z_nov_rank == 0 {
            vec![]
        } else {
            vec![vec![1]]
        },
        ample: vec![1; g.z_nov_rank],
    })
}

pub fn gw_space_xt(g: &BlowupGeometry) -> Arc<GwSpace> {
    Arc::new(GwSpace {
        ring: Arc::clone(&g.xt),
        nov_rank: g.xt_c1_pairing.len(),
        c1_pairing: g.xt_c1_pairing.clone(),
        div_pairing: div_pairing_for(&g.xt, &g.xt_div_pairing),
        effective_ineqs: g.xt_effective_ineqs.clone(),
        ample: vec![2, 1],
    })
}

fn div_pairing_for(ring: &Arc<CohRing>, h2_rows: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]; ring.rank()];
    for (pos, &i) in ring.h2_indices.iter().enumerate() {
        out[i] = h2_rows[pos].clone();
    }
    out
}

/// Built-in seeds with provenance notes.
pub fn preset_seeds_x(g: &BlowupGeometry) -> Vec<Seed> {
    let field = &g.field;
    let n = g.x.rank() - 1; // point class index for P^n
    vec![Seed {
        d: SmallVec::from_slice(&[1]),
        ins: SmallVec::from_slice(&[n as u8, n as u8]),
        value: field.one(),
        note: "one line through two generic points".into(),
    }]
}

pub fn preset_seeds_z(g: &BlowupGeometry) -> Vec<Seed> {
    if g.z_nov_rank == 0 {
        return vec![];
    }
    let field = &g.field;
    vec![Seed {
        d: SmallVec::from_slice(&[1]),
        ins: SmallVec::from_slice(&[1, 1]),
        value: field.one(),
        note: "degree-one cover of Z = P1 through two points".into(),
    }]
}

pub fn preset_seeds_xt(g: &BlowupGeometry) -> Vec<Seed> {
    let field = &g.field;
    let pt = g.xt_point_index as u8;
    let mut seeds = vec![
        Seed {
            d: SmallVec::from_slice(&[1, 0]),
            ins: SmallVec::from_slice(&[pt, pt]),
            value: field.one(),
            note: "line avoiding the center through two generic points".into(),
        },
        Seed {
            d: SmallVec::from_slice(&[0, 1]),
            ins: SmallVec::new(),
            value: field.one(),
            note: "the rigid exceptional line".into(),
        },
    ];
    match (&g.spec, g.r) {
        (crate::cohring::GeometrySpec::ProjectiveSpace { center, .. }, _) => match center {
            crate::cohring::Center::Point => {
                seeds.push(Seed {
                    d: SmallVec::from_slice(&[1, -1]),
                    ins: SmallVec::from_slice(&[pt]),
                    value: field.one(),
                    note: "one line through the blown-up point and a generic point".into(),
                });
            }
            crate::cohring::Center::Line => {
                seeds.push(Seed {
                    d: SmallVec::from_slice(&[1, -1]),
                    ins: SmallVec::from_slice(&[pt, g.x.rank() as u8 - 1 - 1 + 0]),
                    value: field.one(),
                    note: "lines meeting the center and a generic point and line".into(),
                });
            }
        },
    }
    seeds
}

/// Canonical text serialization of a dataset (bit-exact, versioned).
pub fn dataset_to_text(data: &GWDataset, geometry_tag: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gwdataset v1");
    let _ = writeln!(s, "geometry {geometry_tag}");
    let _ = writeln!(s, "conductor {}", data.space.field().m);
    let _ = writeln!(s, "bound {}", data.bound);
    let _ = writeln!(s, "records {}", data.inv.len());
    for ((d, ins), v) in &data.inv {
        let dstr = d
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let istr = ins
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let vstr = v
            .coords
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(s, "d=[{dstr}] ins=[{istr}] val=[{vstr}]");
    }
    s
}

pub fn dataset_from_text(space: &Arc<GwSpace>, text: &str) -> Result<GWDataset> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "gwdataset v1" {
        return Err(Error::Config("bad dataset header".into()));
    }
    let mut bound = 0;
    let mut data_lines = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("bound ") {
            bound = rest
                .trim()
                .parse()
                .map_err(|_| Error::Config("bad bound".into()))?;
        } else if line.starts_with("d=") {
            data_lines.push(line.to_string());
        }
    }
    let field = space.field();
    let mut data = GWDataset::empty(space, bound);
    for line in data_lines {
        let d_part = line
            .split("d=[")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .ok_or_else(|| Error::Config("bad record".into()))?;
        let i_part = line
            .split("ins=[")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .ok_or_else(|| Error::Config("bad record".into()))?;
        let v_part = line
            .split("val=[")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .ok_or_else(|| Error::Config("bad record".into()))?;
        let d: CurveClass = if d_part.is_empty() {
            SmallVec::new()
        } else {
            d_part
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Config("bad class".into())))
                .collect::<Result<_>>()?
        };
        let ins: Insertions = if i_part.is_empty() {
            SmallVec::new()
        } else {
            i_part
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Config("bad insertions".into())))
                .collect::<Result<_>>()?
        };
        let coords: Vec<String> = v_part.split(';').map(|x| x.to_string()).collect();
        let mut value = field.zero();
        for (j, c) in coords.iter().enumerate() {
            // parse "a/b*w^j"-free format: plain rational per coordinate
            let q: BigRational = parse_rational(c)?;
            value.coords[j] = q;
        }
        data.inv.insert((d, ins), value);
    }
    Ok(data)
}

fn parse_rational(s: &str) -> Result<BigRational> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n
            .parse()
            .map_err(|_| Error::Config(format!("bad rational {s}")))?;
        let d: BigInt = d
            .parse()
            .map_err(|_| Error::Config(format!("bad rational {s}")))?;
        Ok(BigRational::new(n, d))
    } else {
        let n: BigInt = s
            .parse()
            .map_err(|_| Error::Config(format!("bad rational {s}")))?;
        Ok(BigRational::from_integer(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohring::{build_geometry, Center, GeometrySpec};

    fn p2_geometry() -> BlowupGeometry {
        let field = CycloField::new(4);
        build_geometry(
            &GeometrySpec::ProjectiveSpace {
                n: 2,
                center: Center::Point,
            },
            &field,
        )
        .unwrap()
    }

    /// Direct Kontsevich recursion for plane curve counts, kept independent
    /// of the WDVV engine.
    fn kontsevich_nd(dmax: usize) -> Vec<BigRational> {
        let mut n = vec![BigRational::from_integer(BigInt::from(0)); dmax + 1];
        n[1] = BigRational::from_integer(BigInt::from(1));
        for d in 2..=dmax {
            let mut acc = BigRational::from_integer(BigInt::from(0));
            for d1 in 1..d {
                let d2 = d - d1;
                let t1 = BigRational::from_integer(
                    BigInt::from(d1).pow(2) * BigInt::from(d2)
                        * (BigInt::from(d2) * binomial_u((3 * d - 4) as u32, (3 * d1 - 2) as u32)
                            - BigInt::from(d1)
                                * binomial_u((3 * d - 4) as u32, (3 * d1 - 1) as u32)),
                );
                acc += &n[d1] * &n[d2] * t1;
            }
            n[d] = acc;
        }
        n
    }

    #[test]
    fn p2_counts_match_direct_recursion() {
        let g = p2_geometry();
        let space = gw_space_x(&g);
        let seeds = preset_seeds_x(&g);
        let data = wdvv_close(&space, &seeds, 12).unwrap();
        let nd = kontsevich_nd(4);
        for d in 1..=4i64 {
            // <pt^{3d-1}>_d
            let ins: Insertions = SmallVec::from_vec(vec![2u8; (3 * d - 1) as usize]);
            let key = (SmallVec::from_slice(&[d]), ins);
            let v = data.inv.get(&key).expect("stored");
            assert_eq!(
                v,
                &g.field.from_rational(nd[d as usize].clone()),
                "N_{d}"
            );
        }
        // frozen classical values 1, 1, 12, 620
        assert_eq!(nd[1], BigRational::from_integer(BigInt::from(1)));
        assert_eq!(nd[2], BigRational::from_integer(BigInt::from(1)));
        assert_eq!(nd[3], BigRational::from_integer(BigInt::from(12)));
        assert_eq!(nd[4], BigRational::from_integer(BigInt::from(620)));
    }

    #[test]
    fn p2_wdvv_residual_zero_and_detects_perturbation() {
        let g = p2_geometry();
        let space = gw_space_x(&g);
        let data = wdvv_close(&space, &preset_seeds_x(&g), 9).unwrap();
        assert!(data.wdvv_residual(false).unwrap().is_zero());
        let mut bad = GWDataset {
            space: Arc::clone(&data.space),
            bound: data.bound,
            inv: data.inv.clone(),
            seeds: vec![],
        };
        let key = (
            SmallVec::from_slice(&[2i64]) as CurveClass,
            SmallVec::from_vec(vec![2u8; 5]) as Insertions,
        );
        let v = bad.inv.get(&key).unwrap().add(&g.field.one());
        bad.inv.insert(key, v);
        assert!(!bad.wdvv_residual(false).unwrap().is_zero());
    }

    #[test]
    fn divisor_axiom_consistency() {
        let g = p2_geometry();
        let space = gw_space_x(&g);
        let data = wdvv_close(&space, &preset_seeds_x(&g), 9).unwrap();
        // <H, pt, pt>_1 = (H.1) <pt,pt>_1 = 1
        let d: CurveClass = SmallVec::from_slice(&[1]);
        let v = data.correlator_basis(&d, &[1, 2, 2]).unwrap();
        assert!(v.is_one());
        // <H, H, pt^... >_2: <H,H,pt^5>_2 = 4 * N_2 = 4
        let d2: CurveClass = SmallVec::from_slice(&[2]);
        let v = data
            .correlator_basis(&d2, &[1, 1, 2, 2, 2, 2, 2])
            .unwrap();
        assert_eq!(v, g.field.from_i64(4));
        // string: unit insertion vanishes
        let v = data.correlator_basis(&d, &[0, 2, 2]).unwrap();
        assert!(v.is_zero());
    }

    #[test]
    fn point_dataset_is_empty_and_reads_cup() {
        let g = p2_geometry();
        let space = gw_space_z(&g);
        let data = wdvv_close(&space, &[], 6).unwrap();
        assert!(data.inv.is_empty());
        let d: CurveClass = SmallVec::new();
        let v = data.correlator_basis(&d, &[0, 0, 0]).unwrap();
        assert!(v.is_one());
    }

    #[test]
    fn blowup_p2_oracle_values() {
        let g = p2_geometry();
        let space = gw_space_xt(&g);
        let data = wdvv_close(&space, &preset_seeds_xt(&g), 6).unwrap();
        assert!(data.wdvv_residual(false).unwrap().is_zero());
        // classical values on Bl_pt P2 (Goettsche-Pandharipande):
        // E: <>_{(0,1)} = 1 (seeded); 2H - E: one conic through the point and
        // 4 generic points? dimension: c1.d = 6-1 = 5, n = 4 pts
        let key = (
            SmallVec::from_slice(&[2i64, -1]) as CurveClass,
            SmallVec::from_vec(vec![2u8; 4]) as Insertions,
        );
        let v = data.inv.get(&key).expect("conic through center");
        assert!(v.is_one(), "conics through the blown point and 4 points: got {v}");
        // class H (avoiding center), <pt,pt>_f = 1 seeded; degree 2 without
        // exceptional part: <pt^5>_{(2,0)} = N_2 = 1
        let key = (
            SmallVec::from_slice(&[2i64, 0]) as CurveClass,
            SmallVec::from_vec(vec![2u8; 5]) as Insertions,
        );
        assert!(data.inv.get(&key).expect("N_2 on blowup").is_one());
        // 2H - 2E has c1 . d = 4: <pt^3>: no rational conic through the point
        // twice: 0
        let key = (
            SmallVec::from_slice(&[2i64, -2]) as CurveClass,
            SmallVec::from_vec(vec![2u8; 3]) as Insertions,
        );
        assert!(data.inv.get(&key).expect("2f-2l").is_zero());
    }

    #[test]
    fn dataset_text_round_trip() {
        let g = p2_geometry();
        let space = gw_space_x(&g);
        let data = wdvv_close(&space, &preset_seeds_x(&g), 6).unwrap();
        let text = dataset_to_text(&data, "test");
        let back = dataset_from_text(&space, &text).unwrap();
        assert_eq!(back.inv, data.inv);
        assert_eq!(dataset_to_text(&back, "test"), text);
    }
}
