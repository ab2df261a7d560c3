//! Grouped discretization: per-group distances, Gumbel perturbation,
//! nearest-code selection and the auxiliary losses.
//!
//! Two entry points share one selection routine so they agree bit for bit:
//! [`quantize_grouped`] works on plain tensors, and [`quantize_on_tape`]
//! records the straight-through path and the losses for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{CodebookSet, GroupLayout};
use crate::error::{Error, Result};
use crate::tensor::{concat_cols, kernels, Scalar, Tensor, Var};

const UTIL_EPS: f64 = 1e-12;

/// Temperature and noise switch for one quantization call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelParams {
    tau: f64,
    pub noise_on: bool,
    pub seed: u64,
}

impl GumbelParams {
    pub fn new(tau: f64, noise_on: bool, seed: u64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {tau}")));
        }
        Ok(GumbelParams { tau, noise_on, seed })
    }

    /// Noise off, unit temperature.
    pub fn eval() -> Self {
        GumbelParams {
            tau: 1.0,
            noise_on: false,
            seed: 0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Argmin,
    Argmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqLosses {
    pub align: f64,
    pub commit: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<T> {
    /// Hard codes, same shape as the input.
    pub x_q: Tensor<T>,
    /// `positions × g` per-group indexes, row-major.
    pub tuple_idx: Vec<usize>,
    pub scalar_idx: Vec<u64>,
    /// Per-group perturbed distance softmax, `[positions × a_k]` each.
    pub soft: Option<Vec<Tensor<T>>>,
    pub losses: VqLosses,
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Flattens `[..., channels]` into `(positions, channels)`.
fn positions_of<T: Scalar>(z: &Tensor<T>, channels: usize, op: &'static str) -> Result<usize> {
    match z.shape().last() {
        Some(&c) if c == channels => Ok(z.numel() / c),
        _ => Err(Error::shape(op, z.shape(), &[channels])),
    }
}

/// Squared L2 distances from each position's group slice to every code of
/// that group: one `[positions × a_k]` tensor per group.
pub fn grouped_l2<T: Scalar>(z: &Tensor<T>, cb: &CodebookSet<T>) -> Result<Vec<Tensor<T>>> {
    let layout = cb.layout();
    let (g, d) = (layout.groups(), layout.code_dim());
    let p = positions_of(z, g * d, "grouped_l2")?;
    let mut slice = vec![T::zero(); p * d];
    cb.groups()
        .iter()
        .enumerate()
        .map(|(k, codes)| {
            for i in 0..p {
                let row = &z.data()[i * g * d + k * d..i * g * d + (k + 1) * d];
                slice[i * d..(i + 1) * d].copy_from_slice(row);
            }
            let a = codes.shape()[0];
            let dist = crate::tensor::sq_dist_values(&slice, codes.data(), p, a, d);
            Tensor::new([p, a], dist)
        })
        .collect()
}

/// `(values + G) / τ` per group, with `G` drawn group by group, position by
/// position, from the seeded stream (zero when noise is off).
pub fn gumbel_logits<T: Scalar>(values: &[Tensor<T>], p: &GumbelParams) -> Vec<Vec<f64>> {
    let mut rng = p.rng();
    values
        .iter()
        .map(|v| {
            v.data()
                .iter()
                .map(|&x| {
                    let noise = if p.noise_on { gumbel(&mut rng) } else { 0.0 };
                    (x.as_f64() + noise) / p.tau
                })
                .collect()
        })
        .collect()
}

/// Softmax of the Gumbel-perturbed, temperature-scaled values along the
/// code axis of each group.
pub fn gumbel_perturb<T: Scalar>(values: &[Tensor<T>], p: &GumbelParams) -> Result<Vec<Tensor<T>>> {
    values
        .iter()
        .zip(gumbel_logits(values, p))
        .map(|(v, logits)| {
            let (rows, a) = v.dims2()?;
            let soft = kernels::softmax_axis(rows, a, 1, &logits);
            Tensor::from_f64([rows, a], &soft)
        })
        .collect()
}

fn extremum(row: &[f64], mode: SelectMode) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        let better = match mode {
            SelectMode::Argmin => v < row[best],
            SelectMode::Argmax => v > row[best],
        };
        if better {
            best = j;
        }
    }
    best
}

fn select_rows(groups: &[(usize, &[f64])], positions: usize, mode: SelectMode) -> Vec<usize> {
    let g = groups.len();
    let mut out = vec![0; positions * g];
    for (k, &(a, vals)) in groups.iter().enumerate() {
        for i in 0..positions {
            out[i * g + k] = extremum(&vals[i * a..(i + 1) * a], mode);
        }
    }
    out
}

/// Per-group extremal index along the code axis, `positions × g` row-major.
/// Ties resolve to the lowest index.
pub fn grouped_select<T: Scalar>(ds: &[Tensor<T>], mode: SelectMode) -> Result<Vec<usize>> {
    let mut positions = None;
    let mut vals = Vec::with_capacity(ds.len());
    for t in ds {
        let (rows, a) = t.dims2()?;
        if *positions.get_or_insert(rows) != rows {
            return Err(Error::shape("grouped_select", &[positions.unwrap_or(0)], &[rows]));
        }
        vals.push((a, t.to_f64_vec()));
    }
    let refs: Vec<_> = vals.iter().map(|(a, v)| (*a, v.as_slice())).collect();
    Ok(select_rows(&refs, positions.unwrap_or(0), mode))
}

/// Nearest-code selection on perturbed distances. Softmax is monotone, so
/// selecting on the logits gives the same index as selecting on its
/// output without the ties that underflow would create.
fn select_nearest<T: Scalar>(dists: &[Tensor<T>], p: &GumbelParams) -> Vec<usize> {
    let logits = gumbel_logits(dists, p);
    let positions = dists.first().map_or(0, |t| t.shape()[0]);
    let refs: Vec<_> = dists
        .iter()
        .zip(&logits)
        .map(|(t, l)| (t.shape()[1], l.as_slice()))
        .collect();
    select_rows(&refs, positions, SelectMode::Argmin)
}

fn scalar_indexes(layout: &GroupLayout, tuples: &[usize]) -> Result<Vec<u64>> {
    tuples
        .chunks(layout.groups())
        .map(|t| layout.tuple_to_scalar(t))
        .collect()
}

/// Batch-usage entropy surrogate `Σ_k Σ_j p̄_kj log(p̄_kj + ε)` over
/// per-group `[positions × a_k]` assignment matrices.
pub fn utilization_loss<T: Scalar>(soft: &[Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    for s in soft {
        let (rows, a) = s.dims2()?;
        let mut mean = vec![0.0; a];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&s.data()[r * a..(r + 1) * a]) {
                *m += v.as_f64();
            }
        }
        total += mean
            .iter()
            .map(|&m| {
                let pbar = m / rows as f64;
                pbar * (pbar + UTIL_EPS).ln()
            })
            .sum::<f64>();
    }
    Ok(total)
}

/// Soft assignment `softmax(−D/τ)`: closest codes get the most mass.
fn assignment<T: Scalar>(dist: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let (rows, a) = dist.dims2()?;
    let neg: Vec<f64> = dist.data().iter().map(|&v| -v.as_f64() / tau).collect();
    Tensor::from_f64([rows, a], &kernels::softmax_axis(rows, a, 1, &neg))
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n
}

/// Distances, perturbation, nearest-code selection, lookup and index
/// encoding. `z` may have any leading shape; its last axis is `g·d`.
pub fn quantize_grouped<T: Scalar>(
    z: &Tensor<T>,
    cb: &CodebookSet<T>,
    p: &GumbelParams,
) -> Result<QuantizeResult<T>> {
    let layout = cb.layout();
    let positions = positions_of(z, layout.channels(), "quantize_grouped")?;
    let dists = grouped_l2(z, cb)?;
    let tuple_idx = select_nearest(&dists, p);
    let scalar_idx = scalar_indexes(layout, &tuple_idx)?;
    let x_q = cb.lookup_concat(&tuple_idx, positions)?.reshape(z.shape())?;
    let soft = gumbel_perturb(&dists, p)?;
    let assign = dists
        .iter()
        .map(|d| assignment(d, p.tau))
        .collect::<Result<Vec<_>>>()?;
    let err = mse(z, &x_q);
    Ok(QuantizeResult {
        losses: VqLosses {
            align: err,
            commit: err,
            utilization: utilization_loss(&assign)?,
        },
        x_q,
        tuple_idx,
        scalar_idx,
        soft: Some(soft),
    })
}

/// Per-group Gumbel-softmax over logit channels and hard argmax indexes.
/// `z_logits` has `Σ a_k` channels; returns `Z_s` in the same shape.
pub fn dvae_sample<T: Scalar>(
    z_logits: &Tensor<T>,
    layout: &GroupLayout,
    p: &GumbelParams,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let width: usize = layout.radices().iter().sum();
    let positions = positions_of(z_logits, width, "dvae_sample")?;
    let mut groups = Vec::with_capacity(layout.groups());
    let mut start = 0;
    for &a in layout.radices() {
        let mut g = Vec::with_capacity(positions * a);
        for i in 0..positions {
            g.extend_from_slice(&z_logits.data()[i * width + start..i * width + start + a]);
        }
        groups.push(Tensor::new([positions, a], g)?);
        start += a;
    }
    let logits = gumbel_logits(&groups, p);
    let refs: Vec<_> = layout
        .radices()
        .iter()
        .zip(&logits)
        .map(|(&a, l)| (a, l.as_slice()))
        .collect();
    let idx = select_rows(&refs, positions, SelectMode::Argmax);
    let mut out = vec![T::zero(); z_logits.numel()];
    let mut start = 0;
    for (&a, l) in layout.radices().iter().zip(&logits) {
        let soft = kernels::softmax_axis(positions, a, 1, l);
        for i in 0..positions {
            for j in 0..a {
                out[i * width + start + j] = T::from_f64_lossy(soft[i * a + j]);
            }
        }
        start += a;
    }
    Ok((Tensor::new(z_logits.shape(), out)?, idx))
}

/// `align = mse(stopgrad z, x_q)` and `commit = mse(z, stopgrad x_q)`.
pub fn vq_losses<'t, T: Scalar>(z: Var<'t, T>, x_q: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let align = z.detach().mse(x_q)?;
    let commit = z.mse(x_q.detach())?;
    Ok((align, commit))
}

/// Training-time quantization recorded on a tape.
pub struct TapeQuant<'t, T> {
    /// Hard codes forward, identity gradient into `z` backward.
    pub x_st: Var<'t, T>,
    pub tuple_idx: Vec<usize>,
    pub scalar_idx: Vec<u64>,
    pub align: Var<'t, T>,
    pub commit: Var<'t, T>,
    pub util: Var<'t, T>,
}

/// Quantizes `z[positions × g·d]` against `codes` (one tape variable per
/// group). Codebooks receive gradient from the align and utilization
/// losses only.
pub fn quantize_on_tape<'t, T: Scalar>(
    z: Var<'t, T>,
    codes: &[Var<'t, T>],
    layout: &GroupLayout,
    p: &GumbelParams,
) -> Result<TapeQuant<'t, T>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != layout.channels() || codes.len() != layout.groups() {
        return Err(Error::shape("quantize", &shape, &[layout.channels()]));
    }
    let d = layout.code_dim();
    let mut dists = Vec::with_capacity(codes.len());
    let mut dist_vals = Vec::with_capacity(codes.len());
    for (k, &c) in codes.iter().enumerate() {
        let dk = z.slice_cols(k * d, d)?.sq_dist(c)?;
        dist_vals.push((*dk.value()).clone());
        dists.push(dk);
    }
    let tuple_idx = select_nearest(&dist_vals, p);
    let scalar_idx = scalar_indexes(layout, &tuple_idx)?;
    let g = layout.groups();
    let gathered = codes
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let rows: Vec<usize> = tuple_idx.iter().skip(k).step_by(g).copied().collect();
            c.gather_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let x_q = concat_cols(&gathered)?;
    let (align, commit) = vq_losses(z, x_q)?;
    let x_st = z.straight_through(&x_q.value())?;

    let inv_tau = T::from_f64_lossy(-1.0 / p.tau);
    let mut util = None;
    for dk in dists {
        let pbar = dk.scale(inv_tau).softmax(1)?.mean_rows()?;
        let term = pbar.mul(pbar.add_scalar(T::from_f64_lossy(UTIL_EPS)).ln())?.sum();
        util = Some(match util {
            None => term,
            Some(u) => term.add(u)?,
        });
    }
    Ok(TapeQuant {
        x_st,
        tuple_idx,
        scalar_idx,
        align,
        commit,
        util: util.expect("at least one group"),
    })
}
