//! Organized grouping: project features up through the pseudo-inverse of
//! a learned matrix `W`, quantize by groups in the expanded space, blend
//! in an annealed residual, project back down with the same `W`, and
//! optionally standardize.
//!
//! `W` is stored as `[(r·c) × c]`, so project-down is a right
//! multiplication by `W` and project-up a right multiplication by
//! `pinv(W) = (WᵀW + ridge·I)⁻¹Wᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookSet, GroupLayout};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::quantizer::{quantize_on_tape, GumbelParams, QuantizeResult, VqLosses};
use crate::tensor::{standardize_values, Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Source of the project-up matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpPath {
    /// `pinv(W)`, differentiated through.
    #[default]
    Pinv,
    /// `pinv(W)` treated as a constant on every step.
    PinvDetached,
    /// An independent trainable `[c × r·c]` matrix.
    Specified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgdrConfig {
    pub c: usize,
    pub r: usize,
    pub layout: GroupLayout,
    pub ridge: f64,
    pub residual_on: bool,
    pub normalize_on: bool,
    pub total_steps: u64,
    #[serde(default)]
    pub up_path: UpPath,
}

impl OgdrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.r == 0 {
            return Err(Error::Param(format!(
                "channel dim and expansion rate must be positive (c={}, r={})",
                self.c, self.r
            )));
        }
        if self.layout.channels() != self.expanded() {
            return Err(Error::Layout(format!(
                "layout covers {} channels, expanded space has {}",
                self.layout.channels(),
                self.expanded()
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Param(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        Ok(())
    }

    /// `r·c`.
    pub fn expanded(&self) -> usize {
        self.r * self.c
    }
}

/// Trainable state: `W`, the optional specified up matrix, and codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct OgdrState<T> {
    pub w: Tensor<T>,
    pub up: Option<Tensor<T>>,
    pub cb: CodebookSet<T>,
    pub step: u64,
}

impl<T: Scalar> OgdrState<T> {
    /// `W` = N(0, 1/(r·c)) entries plus `r` stacked copies of `I_c/√r`.
    /// A specified up matrix starts as the pseudo-inverse of that `W`.
    pub fn init(cfg: &OgdrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, r) = (cfg.c, cfg.r);
        let rc = cfg.expanded();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / rc as f64).sqrt();
        let bias = 1.0 / (r as f64).sqrt();
        let w = Tensor::from_fn([rc, c], |i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let eye = if (i / c) % c == i % c { bias } else { 0.0 };
            T::from_f64_lossy(noise * std + eye)
        });
        let up = match cfg.up_path {
            UpPath::Specified => Some(pinv_tensor(&w, cfg.ridge)?),
            _ => None,
        };
        let cb = CodebookSet::init(cfg.layout.clone(), seed.wrapping_add(1));
        Ok(OgdrState { w, up, cb, step: 0 })
    }
}

/// `α = ¼(1 + cos(2πt/T))` over the first half, zero afterwards.
pub fn alpha_schedule(step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 || 2 * step > total_steps {
        return 0.0;
    }
    let phase = 2.0 * std::f64::consts::PI * step as f64 / total_steps as f64;
    0.25 * (1.0 + phase.cos())
}

/// 10 during the first half, 0.1 from the midpoint on.
pub fn tau_schedule(step: u64, total_steps: u64) -> f64 {
    if 2 * step < total_steps {
        10.0
    } else {
        0.1
    }
}

fn pinv_tensor<T: Scalar>(w: &Tensor<T>, ridge: f64) -> Result<Tensor<T>> {
    let p = linalg::pinv_tall(&Matrix::from_tensor(w)?, ridge)?;
    Ok(p.to_tensor())
}

fn last_dim<T: Scalar>(x: &Tensor<T>, want: usize, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&c) if c == want => Ok(x.numel() / c),
        _ => Err(Error::shape(op, x.shape(), &[want])),
    }
}

fn right_multiply<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let (k, n) = m.dims2()?;
    let rows = last_dim(x, k, op)?;
    let mut out = vec![T::zero(); rows * n];
    crate::tensor::kernels::gemm_nn(rows, k, n, x.data(), m.data(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = n;
    Tensor::new(shape, out)
}

/// `z · pinv(W)` per position; `z` has any leading shape and `c` channels.
pub fn project_up<T: Scalar>(z: &Tensor<T>, w: &Tensor<T>, ridge: f64) -> Result<Tensor<T>> {
    right_multiply(z, &pinv_tensor(w, ridge)?, "project_up")
}

/// `x₊ · W` per position.
pub fn project_down<T: Scalar>(x_plus: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    right_multiply(x_plus, w, "project_down")
}

/// `α·z₊ + (1 − α)·x₊`.
pub fn residual_mix<T: Scalar>(z_plus: &Tensor<T>, x_plus: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if z_plus.shape() != x_plus.shape() {
        return Err(Error::shape("residual_mix", z_plus.shape(), x_plus.shape()));
    }
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::Param(format!("residual weight must be in [0, 0.5], got {alpha}")));
    }
    let (a, b) = (T::from_f64_lossy(alpha), T::from_f64_lossy(1.0 - alpha));
    let data = z_plus
        .data()
        .iter()
        .zip(x_plus.data())
        .map(|(&z, &x)| a * z + b * x)
        .collect();
    Tensor::new(z_plus.shape(), data)
}

/// Standardizes each of `samples` equal slices over all of its elements.
pub fn normalize_out<T: Scalar>(x: &Tensor<T>, samples: usize) -> Result<Tensor<T>> {
    let n = x.numel();
    if samples == 0 || !n.is_multiple_of(samples) || n / samples < 2 {
        return Err(Error::Param(format!(
            "cannot normalize {n} values as {samples} samples of at least 2"
        )));
    }
    let (out, _) = standardize_values(x.data(), samples, n / samples, T::from_f64_lossy(NORM_EPS));
    Tensor::new(x.shape(), out)
}

/// How the expanded features are discretized.
#[derive(Clone, Copy, Debug)]
pub enum QuantMode {
    Grouped(GumbelParams),
    /// Pass-through, for checking the projections in isolation.
    Identity,
}

/// Tape handles for the trainable OGDR tensors.
#[derive(Clone, Debug)]
pub struct OgdrVars<'t, T> {
    pub w: Var<'t, T>,
    pub up: Option<Var<'t, T>>,
    pub codes: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> OgdrVars<'t, T> {
    pub fn register(tape: &'t Tape<T>, st: &OgdrState<T>) -> Self {
        OgdrVars {
            w: tape.param(&st.w),
            up: st.up.as_ref().map(|u| tape.param(u)),
            codes: st.cb.groups().iter().map(|g| tape.param(g)).collect(),
        }
    }
}

pub struct OgdrOutput<'t, T> {
    /// `[positions × c]` discrete representation after project-down.
    pub x: Var<'t, T>,
    pub tuple_idx: Vec<usize>,
    pub scalar_idx: Vec<u64>,
    /// `(align, commit, util)`; absent in identity mode.
    pub losses: Option<(Var<'t, T>, Var<'t, T>, Var<'t, T>)>,
}

/// The project-up matrix `[c × r·c]` for the configured path.
pub fn up_matrix<'t, T: Scalar>(vars: &OgdrVars<'t, T>, cfg: &OgdrConfig) -> Result<Var<'t, T>> {
    let w = match cfg.up_path {
        UpPath::Specified => {
            return vars
                .up
                .ok_or_else(|| Error::Param("specified project-up needs its matrix".into()))
        }
        UpPath::Pinv => vars.w,
        UpPath::PinvDetached => vars.w.detach(),
    };
    let tape = w.tape();
    let wt = w.t()?;
    let gram = wt.matmul(w)?;
    let gram = if cfg.ridge > 0.0 {
        let ridge = Tensor::eye(cfg.c).map(|v| v * T::from_f64_lossy(cfg.ridge));
        gram.add(tape.constant(&ridge))?
    } else {
        gram
    };
    gram.inv_spd()?.matmul(wt)
}

/// Full pipeline on `z[positions × c]`, where positions are grouped into
/// `samples` equal blocks for normalization. `alpha` is the residual
/// weight for this step (ignored when the residual is off).
pub fn ogdr_on_tape<'t, T: Scalar>(
    z: Var<'t, T>,
    vars: &OgdrVars<'t, T>,
    cfg: &OgdrConfig,
    quant: QuantMode,
    alpha: f64,
    samples: usize,
) -> Result<OgdrOutput<'t, T>> {
    let z_plus = z.matmul(up_matrix(vars, cfg)?)?;
    let (x_plus, tuple_idx, scalar_idx, losses) = match quant {
        QuantMode::Grouped(p) => {
            let q = quantize_on_tape(z_plus, &vars.codes, &cfg.layout, &p)?;
            (q.x_st, q.tuple_idx, q.scalar_idx, Some((q.align, q.commit, q.util)))
        }
        QuantMode::Identity => (z_plus, Vec::new(), Vec::new(), None),
    };
    let x_plus = if cfg.residual_on && alpha > 0.0 {
        let a = T::from_f64_lossy(alpha);
        z_plus.scale(a).add(x_plus.scale(T::one() - a))?
    } else {
        x_plus
    };
    let mut x = x_plus.matmul(vars.w)?;
    if cfg.normalize_on {
        x = x.standardize_rows(samples, NORM_EPS)?;
    }
    Ok(OgdrOutput {
        x,
        tuple_idx,
        scalar_idx,
        losses,
    })
}

/// Value-level forward of `z[samples × ... × c]`. Training mode applies
/// the residual schedule at `step`; eval mode (`p` with noise off, `step`
/// ignored) uses α = 0.
pub fn ogdr_forward<T: Scalar>(
    z: &Tensor<T>,
    st: &OgdrState<T>,
    cfg: &OgdrConfig,
    p: &GumbelParams,
    step: Option<u64>,
) -> Result<QuantizeResult<T>> {
    let positions = last_dim(z, cfg.c, "ogdr_forward")?;
    let samples = if z.ndim() > 2 { z.shape()[0] } else { 1 };
    let tape = Tape::new();
    let vars = OgdrVars::register(&tape, st);
    let zv = tape.constant(&z.clone().reshape([positions, cfg.c])?);
    let alpha = step.map_or(0.0, |t| alpha_schedule(t, cfg.total_steps));
    let out = ogdr_on_tape(zv, &vars, cfg, QuantMode::Grouped(*p), alpha, samples)?;
    let (align, commit, util) = out.losses.expect("grouped mode yields losses");
    Ok(QuantizeResult {
        x_q: (*out.x.value()).clone().reshape(z.shape())?,
        tuple_idx: out.tuple_idx,
        scalar_idx: out.scalar_idx,
        soft: None,
        losses: VqLosses {
            align: align.item().as_f64(),
            commit: commit.item().as_f64(),
            utilization: util.item().as_f64(),
        },
    })
}
