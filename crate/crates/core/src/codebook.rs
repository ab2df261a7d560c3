//! Attribute-group codebooks and the tuple ↔ scalar index codec.
//!
//! A feature of `g·d` channels is split into `g` contiguous groups of `d`
//! channels; group `k` is quantized against its own `a_k × d` codebook.
//! The `Π a_k` combinations form the full code space, and a tuple of
//! per-group indexes maps to a scalar by mixed-radix positional encoding
//! with group 1 as the least significant digit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    radices: Vec<usize>,
    d: usize,
}

impl GroupLayout {
    pub fn new(radices: Vec<usize>, d: usize) -> Result<Self> {
        if radices.is_empty() {
            return Err(Error::Layout("at least one group is required".into()));
        }
        if let Some(&r) = radices.iter().find(|&&r| r < 2) {
            return Err(Error::Layout(format!("every group needs >= 2 codes, got {r}")));
        }
        if d == 0 {
            return Err(Error::Layout("code dimension must be positive".into()));
        }
        radices
            .iter()
            .try_fold(1u64, |acc, &r| acc.checked_mul(r as u64))
            .ok_or_else(|| Error::Layout("total code count overflows u64".into()))?;
        Ok(GroupLayout { radices, d })
    }

    /// Layout over `channels` channels with `g` groups whose code counts
    /// multiply to `n`, as balanced as the prime factorization of `n`
    /// allows, in ascending order.
    pub fn balanced(n: usize, g: usize, channels: usize) -> Result<Self> {
        if g == 0 || !channels.is_multiple_of(g) {
            return Err(Error::Layout(format!(
                "{channels} channels cannot be split into {g} equal groups"
            )));
        }
        let mut primes = Vec::new();
        let mut rest = n;
        let mut p = 2;
        while p * p <= rest {
            while rest.is_multiple_of(p) {
                primes.push(p);
                rest /= p;
            }
            p += 1;
        }
        if rest > 1 {
            primes.push(rest);
        }
        if primes.len() < g {
            return Err(Error::Layout(format!(
                "{n} codes cannot be factored into {g} groups of at least 2"
            )));
        }
        primes.sort_unstable_by(|a, b| b.cmp(a));
        let mut radices = vec![1usize; g];
        for p in primes {
            let k = (0..g).min_by_key(|&k| (radices[k], k)).expect("g > 0");
            radices[k] *= p;
        }
        radices.sort_unstable();
        Self::new(radices, channels / g)
    }

    /// The group layouts used with 4096 codes: g ∈ {1, 2, 4, 8, 12}.
    pub fn standard(g: usize, d: usize) -> Result<Self> {
        let radices = match g {
            1 => vec![4096],
            2 => vec![64, 64],
            4 => vec![8; 4],
            8 => vec![2, 2, 2, 2, 4, 4, 4, 4],
            12 => vec![2; 12],
            _ => return Err(Error::Layout(format!("no standard layout for g = {g}"))),
        };
        Self::new(radices, d)
    }

    pub fn groups(&self) -> usize {
        self.radices.len()
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    pub fn code_dim(&self) -> usize {
        self.d
    }

    /// `g · d`, the channel count this layout quantizes.
    pub fn channels(&self) -> usize {
        self.radices.len() * self.d
    }

    pub fn total_codes(&self) -> u64 {
        self.radices.iter().map(|&r| r as u64).product()
    }

    pub fn tuple_to_scalar(&self, tuple: &[usize]) -> Result<u64> {
        if tuple.len() != self.radices.len() {
            return Err(Error::Layout(format!(
                "tuple has {} entries for {} groups",
                tuple.len(),
                self.radices.len()
            )));
        }
        let mut s = 0u64;
        for (k, (&t, &a)) in tuple.iter().zip(&self.radices).enumerate().rev() {
            if t >= a {
                return Err(Error::IndexBounds {
                    group: k,
                    index: t as u64,
                    radix: a,
                });
            }
            s = s * a as u64 + t as u64;
        }
        Ok(s)
    }

    pub fn scalar_to_tuple(&self, s: u64) -> Result<Vec<usize>> {
        let n = self.total_codes();
        if s >= n {
            return Err(Error::Input(format!("scalar index {s} >= {n} codes")));
        }
        let mut rest = s;
        Ok(self
            .radices
            .iter()
            .map(|&a| {
                let t = (rest % a as u64) as usize;
                rest /= a as u64;
                t
            })
            .collect())
    }

    /// Binary header: `g`, each radix, `d`, all `u32` little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.radices.len() + 2));
        out.extend_from_slice(&(self.radices.len() as u32).to_le_bytes());
        for &r in &self.radices {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| Error::Format("truncated layout header".into()))
        };
        let g = word(0)?;
        let radices = (1..=g).map(word).collect::<Result<Vec<_>>>()?;
        let d = word(g + 1)?;
        Ok((Self::new(radices, d)?, 4 * (g + 2)))
    }
}

/// One trainable `a_k × d` code matrix per group.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet<T> {
    layout: GroupLayout,
    groups: Vec<Tensor<T>>,
}

impl<T: Scalar> CodebookSet<T> {
    /// Entries i.i.d. uniform on `(−1/√d, 1/√d)`.
    pub fn init(layout: GroupLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (layout.code_dim() as f64).sqrt();
        let groups = layout
            .radices()
            .iter()
            .map(|&a| {
                Tensor::from_fn([a, layout.code_dim()], |_| {
                    T::from_f64_lossy(rng.gen_range(-bound..bound))
                })
            })
            .collect();
        CodebookSet { layout, groups }
    }

    pub fn from_groups(layout: GroupLayout, groups: Vec<Tensor<T>>) -> Result<Self> {
        if groups.len() != layout.groups() {
            return Err(Error::Layout(format!(
                "{} code matrices for {} groups",
                groups.len(),
                layout.groups()
            )));
        }
        for (g, &a) in groups.iter().zip(layout.radices()) {
            if g.shape() != [a, layout.code_dim()] {
                return Err(Error::shape("codebook", g.shape(), &[a, layout.code_dim()]));
            }
            if !g.all_finite() {
                return Err(Error::Input("codebook entries must be finite".into()));
            }
        }
        Ok(CodebookSet { layout, groups })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn groups(&self) -> &[Tensor<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.groups
    }

    pub fn into_groups(self) -> Vec<Tensor<T>> {
        self.groups
    }

    /// Concatenation of the selected code of each group, in group order,
    /// for every position. `tuples` holds `positions × g` indexes.
    pub fn lookup_concat(&self, tuples: &[usize], positions: usize) -> Result<Tensor<T>> {
        let g = self.layout.groups();
        let d = self.layout.code_dim();
        if tuples.len() != positions * g {
            return Err(Error::shape("lookup_concat", &[tuples.len()], &[positions, g]));
        }
        let mut out = Vec::with_capacity(positions * g * d);
        for p in 0..positions {
            for (k, cb) in self.groups.iter().enumerate() {
                let j = tuples[p * g + k];
                let a = self.layout.radices()[k];
                if j >= a {
                    return Err(Error::IndexBounds {
                        group: k,
                        index: j as u64,
                        radix: a,
                    });
                }
                out.extend_from_slice(&cb.data()[j * d..(j + 1) * d]);
            }
        }
        Tensor::new([positions, g * d], out)
    }

    /// Layout header followed by each group matrix in tensor format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.layout.to_bytes();
        for g in &self.groups {
            out.extend(g.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let (layout, mut pos) = GroupLayout::from_bytes(bytes)?;
        let mut groups = Vec::with_capacity(layout.groups());
        for _ in 0..layout.groups() {
            let (t, used) = Tensor::from_bytes(&bytes[pos..])?;
            groups.push(t);
            pos += used;
        }
        Ok((Self::from_groups(layout, groups)?, pos))
    }
}
