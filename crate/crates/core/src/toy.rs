//! Learning the organizing projection on the four-template world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::GroupLayout;
use crate::data::{naive_grouping_oracle, ToyWorld};
use crate::error::Result;
use crate::ogdr::{alpha_schedule, ogdr_forward, ogdr_on_tape, tau_schedule, OgdrConfig, OgdrState, OgdrVars, QuantMode, UpPath};
use crate::quantizer::GumbelParams;
use crate::tensor::{clip_grad_norm, AdamState, Tape, Tensor};
use crate::vae::lr_schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub steps: u64,
    pub lr0: f64,
    pub warmup_frac: f64,
    pub r: usize,
    pub groups: usize,
    pub codes_per_group: usize,
    pub residual_on: bool,
    pub noise_on: bool,
    pub copies: usize,
    pub commit_weight: f64,
    pub align_weight: f64,
    pub util_weight: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            steps: 2000,
            lr0: 2e-2,
            warmup_frac: 0.05,
            r: 1,
            groups: 2,
            codes_per_group: 2,
            residual_on: true,
            noise_on: true,
            copies: 4,
            commit_weight: 0.25,
            align_weight: 1.0,
            util_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    /// Best per-element error of naive contiguous grouping.
    pub oracle_mse: f64,
    /// Per-element error of the trained pipeline in eval mode.
    pub achieved_mse: f64,
    pub state: OgdrState<f64>,
    pub ogdr: OgdrConfig,
}

/// Eval-mode per-element reconstruction error of `points` through `st`.
pub fn toy_mse(points: &Tensor<f64>, st: &OgdrState<f64>, cfg: &OgdrConfig) -> Result<f64> {
    let out = ogdr_forward(points, st, cfg, &GumbelParams::eval(), None)?;
    let sse: f64 = out
        .x_q
        .data()
        .iter()
        .zip(points.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sse / points.numel() as f64)
}

pub fn toy_ogdr_config(world: &ToyWorld, cfg: &ToyConfig) -> Result<OgdrConfig> {
    let c = world.channels();
    let layout = GroupLayout::balanced(
        cfg.codes_per_group.pow(cfg.groups as u32),
        cfg.groups,
        cfg.r * c,
    )?;
    let ogdr = OgdrConfig {
        c,
        r: cfg.r,
        layout,
        ridge: 1e-6,
        residual_on: cfg.residual_on,
        normalize_on: false,
        total_steps: cfg.steps,
        up_path: UpPath::Pinv,
    };
    ogdr.validate()?;
    Ok(ogdr)
}

/// Trains `W` and the codebooks to reconstruct the world's points.
pub fn train_toy(world: &ToyWorld, cfg: &ToyConfig) -> Result<ToyReport> {
    let oracle_mse = naive_grouping_oracle(world, cfg.groups, cfg.codes_per_group)?;
    let ogdr = toy_ogdr_config(world, cfg)?;
    let mut st = OgdrState::<f64>::init(&ogdr, cfg.seed)?;
    let data = world.sample(cfg.seed, cfg.copies)?;
    let points = world.sample(cfg.seed, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    let mut params = pack(&st);
    let mut adam = AdamState::new(&params);
    for step in 0..cfg.steps {
        let p = GumbelParams::new(tau_schedule(step, cfg.steps), cfg.noise_on, rng.gen())?;
        let alpha = alpha_schedule(step, cfg.steps);
        let tape = Tape::new();
        let vars = OgdrVars::register(&tape, &st);
        let z = tape.constant(&data);
        let out = ogdr_on_tape(z, &vars, &ogdr, QuantMode::Grouped(p), alpha, 1)?;
        let (align, commit, util) = out.losses.expect("grouped mode yields losses");
        let loss = out
            .x
            .mse(z)?
            .add(align.scale(cfg.align_weight))?
            .add(commit.scale(cfg.commit_weight))?
            .add(util.scale(cfg.util_weight))?;
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f64>> = std::iter::once(vars.w)
            .chain(vars.codes.iter().copied())
            .map(|v| grads.get_or_zeros(v))
            .collect();
        clip_grad_norm(&mut g, 1.0);
        adam.step(&mut params, &g, lr_schedule(step, cfg.steps, cfg.lr0, cfg.warmup_frac))?;
        unpack(&mut st, &params);
        st.step = step + 1;
    }
    let achieved_mse = toy_mse(&points, &st, &ogdr)?;
    Ok(ToyReport {
        oracle_mse,
        achieved_mse,
        state: st,
        ogdr,
    })
}

fn pack(st: &OgdrState<f64>) -> Vec<Tensor<f64>> {
    std::iter::once(st.w.clone())
        .chain(st.cb.groups().iter().cloned())
        .collect()
}

fn unpack(st: &mut OgdrState<f64>, params: &[Tensor<f64>]) {
    st.w = params[0].clone();
    for (g, p) in st.cb.groups_mut().iter_mut().zip(&params[1..]) {
        *g = p.clone();
    }
}
