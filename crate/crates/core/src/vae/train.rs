use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{Mode, TrainConfig};
use super::lr_schedule;
use super::net::{VaeNet, DOWNSAMPLE};
use crate::codebook::CodebookSet;
use crate::data::{shapes_dataset, stack_images};
use crate::error::{Error, Result};
use crate::ogdr::{alpha_schedule, ogdr_on_tape, tau_schedule, OgdrState, OgdrVars, QuantMode};
use crate::quantizer::{quantize_on_tape, GumbelParams};
use crate::tensor::{clip_grad_norm, AdamState, Scalar, Tape, Tensor, Var};

/// Quantizer state for the configured mode.
#[derive(Clone, Debug, PartialEq)]
pub enum Quant<T> {
    Codebook(CodebookSet<T>),
    Organized(OgdrState<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub net: VaeNet<T>,
    pub quant: Quant<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = VaeNet::init(cfg.hidden, cfg.c, cfg.seed)?;
        let quant = match cfg.mode {
            Mode::Ogdr => Quant::Organized(OgdrState::init(&cfg.ogdr_config()?, cfg.seed.wrapping_add(1))?),
            Mode::Vq | Mode::Gdr => Quant::Codebook(CodebookSet::init(cfg.layout()?, cfg.seed.wrapping_add(2))),
        };
        Ok(Model { net, quant })
    }

    pub fn codebook(&self) -> &CodebookSet<T> {
        match &self.quant {
            Quant::Codebook(cb) => cb,
            Quant::Organized(st) => &st.cb,
        }
    }

    pub fn organizer(&self) -> Option<&OgdrState<T>> {
        match &self.quant {
            Quant::Organized(st) => Some(st),
            Quant::Codebook(_) => None,
        }
    }

    /// Trainable tensors: network, then `W` and the specified up matrix
    /// when present, then codebook groups.
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = self.net.params().to_vec();
        if let Quant::Organized(st) = &self.quant {
            out.push(st.w.clone());
            out.extend(st.up.clone());
        }
        out.extend(self.codebook().groups().iter().cloned());
        out
    }

    pub fn set_params(&mut self, params: Vec<Tensor<T>>) {
        let mut it = params.into_iter();
        for p in self.net.params_mut().iter_mut() {
            *p = it.next().expect("parameter count");
        }
        let cb = match &mut self.quant {
            Quant::Organized(st) => {
                st.w = it.next().expect("parameter count");
                if let Some(up) = st.up.as_mut() {
                    *up = it.next().expect("parameter count");
                }
                &mut st.cb
            }
            Quant::Codebook(cb) => cb,
        };
        for g in cb.groups_mut() {
            *g = it.next().expect("parameter count");
        }
    }
}

struct ModelVars<'t, T> {
    net: Vec<Var<'t, T>>,
    ogdr: Option<OgdrVars<'t, T>>,
    codes: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> ModelVars<'t, T> {
    fn register(tape: &'t Tape<T>, model: &Model<T>, trainable: bool) -> Self {
        let reg = |t: &Tensor<T>| if trainable { tape.param(t) } else { tape.constant(t) };
        let net = model.net.params().iter().map(reg).collect();
        match &model.quant {
            Quant::Organized(st) => {
                let ov = OgdrVars {
                    w: reg(&st.w),
                    up: st.up.as_ref().map(reg),
                    codes: st.cb.groups().iter().map(reg).collect(),
                };
                ModelVars { net, codes: Vec::new(), ogdr: Some(ov) }
            }
            Quant::Codebook(cb) => ModelVars {
                net,
                ogdr: None,
                codes: cb.groups().iter().map(reg).collect(),
            },
        }
    }

    /// Same order as [`Model::params`].
    fn all(&self) -> Vec<Var<'t, T>> {
        let mut out = self.net.clone();
        if let Some(o) = &self.ogdr {
            out.push(o.w);
            out.extend(o.up);
            out.extend(o.codes.iter().copied());
        }
        out.extend(self.codes.iter().copied());
        out
    }
}

struct Forward<'t, T> {
    recon: Var<'t, T>,
    align: Var<'t, T>,
    commit: Var<'t, T>,
    util: Var<'t, T>,
    output: Var<'t, T>,
    tuple_idx: Vec<usize>,
    scalar_idx: Vec<u64>,
    latent: Var<'t, T>,
}

fn forward<'t, T: Scalar>(
    model: &Model<T>,
    vars: &ModelVars<'t, T>,
    img: Var<'t, T>,
    cfg: &TrainConfig,
    p: GumbelParams,
    alpha: f64,
) -> Result<Forward<'t, T>> {
    let shape = img.shape();
    let (b, lh, lw) = (shape[0], shape[2] / DOWNSAMPLE, shape[3] / DOWNSAMPLE);
    let z = model.net.encode_on(&vars.net, img)?;
    let (x, tuple_idx, scalar_idx, (align, commit, util)) = match (&vars.ogdr, &model.quant) {
        (Some(ov), Quant::Organized(_)) => {
            let ocfg = cfg.ogdr_config()?;
            let out = ogdr_on_tape(z, ov, &ocfg, QuantMode::Grouped(p), alpha, b)?;
            let losses = out.losses.expect("grouped mode yields losses");
            (out.x, out.tuple_idx, out.scalar_idx, losses)
        }
        (None, Quant::Codebook(cb)) => {
            let q = quantize_on_tape(z, &vars.codes, cb.layout(), &p)?;
            (q.x_st, q.tuple_idx, q.scalar_idx, (q.align, q.commit, q.util))
        }
        _ => unreachable!("variables registered from the same model"),
    };
    let output = model.net.decode_on(&vars.net, x, b, lh, lw)?;
    let recon = output.mse(img)?;
    Ok(Forward {
        recon,
        align,
        commit,
        util,
        output,
        tuple_idx,
        scalar_idx,
        latent: x,
    })
}

/// Losses and schedule values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub alpha: f64,
    pub recon: f64,
    pub align: f64,
    pub commit: f64,
    pub util: f64,
    pub total: f64,
    pub grad_scale: f64,
}

/// One optimizer step on `batch`. The model and optimizer are left
/// untouched when the loss or the updated parameters are not finite.
pub fn pretrain_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &Tensor<f32>,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let lr = lr_schedule(step, cfg.total_steps, cfg.lr0, cfg.warmup_frac);
    let tau = tau_schedule(step, cfg.total_steps);
    let alpha = alpha_schedule(step, cfg.total_steps);
    let p = GumbelParams::new(tau, cfg.gumbel_noise, rng.gen())?;

    let tape = Tape::new();
    let vars = ModelVars::register(&tape, model, true);
    let img = tape.constant(batch);
    let f = forward(model, &vars, img, cfg, p, alpha)?;
    let w = cfg.loss_weights;
    let total = f
        .recon
        .add(f.align.scale(w.align as f32))?
        .add(f.commit.scale(w.commit as f32))?
        .add(f.util.scale(w.util as f32))?;
    let stats = StepStats {
        step,
        lr,
        tau,
        alpha,
        recon: f.recon.item().as_f64(),
        align: f.align.item().as_f64(),
        commit: f.commit.item().as_f64(),
        util: f.util.item().as_f64(),
        total: total.item().as_f64(),
        grad_scale: 1.0,
    };
    if !stats.total.is_finite() {
        return Err(Error::NonFinite {
            step,
            dump: PathBuf::new(),
        });
    }
    let grads = tape.backward(total)?;
    let mut g: Vec<Tensor<f32>> = vars.all().into_iter().map(|v| grads.get_or_zeros(v)).collect();
    let grad_scale = clip_grad_norm(&mut g, cfg.clip_norm);
    let mut params = model.params();
    let mut next = adam.clone();
    next.step(&mut params, &g, lr)?;
    if !params.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite {
            step,
            dump: PathBuf::new(),
        });
    }
    *adam = next;
    model.set_params(params);
    if let Quant::Organized(st) = &mut model.quant {
        st.step = step + 1;
    }
    Ok(StepStats { grad_scale, ..stats })
}

/// Eval-mode losses averaged over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalStats {
    pub recon: f64,
    pub align: f64,
    pub commit: f64,
    pub util: f64,
}

/// Noise-free, residual-free reconstruction of `images` in chunks.
pub fn evaluate(model: &Model<f32>, images: &Tensor<f32>, cfg: &TrainConfig) -> Result<EvalStats> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut acc = EvalStats::default();
    let mut start = 0;
    while start < n {
        let len = cfg.batch_size.min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = len;
        let chunk = Tensor::new(shape, images.data()[start * per..(start + len) * per].to_vec())?;
        let tape = Tape::new();
        let vars = ModelVars::register(&tape, model, false);
        let f = forward(model, &vars, tape.constant(&chunk), cfg, GumbelParams::eval(), 0.0)?;
        let wgt = len as f64 / n as f64;
        acc.recon += wgt * f.recon.item().as_f64();
        acc.align += wgt * f.align.item().as_f64();
        acc.commit += wgt * f.commit.item().as_f64();
        acc.util += wgt * f.util.item().as_f64();
        start += len;
    }
    Ok(acc)
}

/// Eval-mode outputs for a batch of images.
pub struct Reconstruction {
    pub output: Tensor<f32>,
    /// Discrete representation fed to the decoder, `[B × h × w × c]`.
    pub latent: Tensor<f32>,
    pub tuple_idx: Vec<usize>,
    pub scalar_idx: Vec<u64>,
}

pub fn reconstruct(model: &Model<f32>, images: &Tensor<f32>, cfg: &TrainConfig) -> Result<Reconstruction> {
    let tape = Tape::new();
    let vars = ModelVars::register(&tape, model, false);
    let f = forward(model, &vars, tape.constant(images), cfg, GumbelParams::eval(), 0.0)?;
    let s = images.shape();
    let latent = (*f.latent.value())
        .clone()
        .reshape([s[0], s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE, cfg.c])?;
    Ok(Reconstruction {
        output: (*f.output.value()).clone(),
        latent,
        tuple_idx: f.tuple_idx,
        scalar_idx: f.scalar_idx,
    })
}

pub struct Dataset {
    pub train: Tensor<f32>,
    pub val: Tensor<f32>,
}

pub fn shapes_split(cfg: &TrainConfig) -> Result<Dataset> {
    let all = shapes_dataset(cfg.data_seed, cfg.train_images + cfg.val_images, cfg.image_size)?;
    let (train, val) = all.split_at(cfg.train_images);
    Ok(Dataset {
        train: stack_images(train)?,
        val: stack_images(val)?,
    })
}

fn gather_batch(images: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

pub const METRICS_HEADER: [&str; 10] = [
    "step", "lr", "tau", "alpha", "recon", "align", "commit", "util", "total", "val_mse",
];
pub const LOG_HEADER: [&str; 10] = [
    "step", "lr", "tau", "alpha", "recon", "align", "commit", "util", "total", "grad_scale",
];

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    pub final_checkpoint: PathBuf,
}

pub fn run_dir(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join(format!("run-{}", cfg.hash()))
}

/// Keeps the header and rows whose leading step is below `limit`.
fn truncate_csv(path: &Path, limit: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || step.is_some_and(|s| s < limit) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<BufWriter<File>>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if !append {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    Ok(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn record(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

/// Runs pretraining under `<out>/run-<config hash>/`, writing
/// `metrics.csv` (one row per evaluation), `train_log.csv` (one row per
/// step), periodic `ckpt-<step>.ckpt` files and `final.ckpt`. With
/// `resume`, training continues from that checkpoint and reproduces the
/// uninterrupted run.
pub fn train_loop(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = run_dir(out, cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let data = shapes_split(cfg)?;
    let metrics_path = dir.join("metrics.csv");
    let log_path = dir.join("train_log.csv");

    let (mut model, mut adam, mut rng, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Input(format!(
                    "checkpoint {} was written for a different config",
                    path.display()
                )));
            }
            for path in [&metrics_path, &log_path] {
                if path.exists() {
                    truncate_csv(path, ck.step)?;
                }
            }
            (ck.model, ck.adam, ck.rng, ck.step)
        }
        None => {
            let model = Model::<f32>::init(cfg)?;
            let adam = AdamState::new(&model.params());
            (model, adam, ChaCha8Rng::seed_from_u64(cfg.seed), 0)
        }
    };
    let append = |path: &Path| resume.is_some() && path.exists();
    let mut metrics = csv_writer(&metrics_path, &METRICS_HEADER, append(&metrics_path))?;
    let mut log = csv_writer(&log_path, &LOG_HEADER, append(&log_path))?;

    let total = cfg.total_steps;
    let n_train = data.train.shape()[0];
    let mut initial = None;
    let mut last = f64::NAN;
    let snapshot = |model: &Model<f32>, adam: &AdamState<f32>, rng: &ChaCha8Rng, step: u64| Checkpoint {
        config: cfg.clone(),
        step,
        rng: rng.clone(),
        model: model.clone(),
        adam: adam.clone(),
    };
    for t in start..=total {
        if t % cfg.eval_interval == 0 || t == total {
            let e = evaluate(&model, &data.val, cfg)?;
            let w = cfg.loss_weights;
            let row = [
                t as f64,
                lr_schedule(t, total, cfg.lr0, cfg.warmup_frac),
                tau_schedule(t, total),
                alpha_schedule(t, total),
                e.recon,
                e.align,
                e.commit,
                e.util,
                e.recon + w.align * e.align + w.commit * e.commit + w.util * e.util,
                e.recon,
            ];
            metrics.write_record(record(&row)).map_err(|e| csv_err(&metrics_path, e))?;
            initial.get_or_insert(e.recon);
            last = e.recon;
        }
        if t == total {
            break;
        }
        if t > start && t % cfg.checkpoint_interval == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            snapshot(&model, &adam, &rng, t).save(&dir.join(format!("ckpt-{t:06}.ckpt")))?;
        }
        let pre_rng = rng.clone();
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n_train)).collect();
        let batch = gather_batch(&data.train, &idx)?;
        match pretrain_step(&mut model, &mut adam, &batch, cfg, t, &mut rng) {
            Ok(s) => {
                let row = [
                    s.step as f64, s.lr, s.tau, s.alpha, s.recon, s.align, s.commit, s.util, s.total,
                    s.grad_scale,
                ];
                log.write_record(record(&row)).map_err(|e| csv_err(&log_path, e))?;
            }
            Err(Error::NonFinite { step, .. }) => {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                let dump = dir.join("last_good.ckpt");
                snapshot(&model, &adam, &pre_rng, step).save(&dump)?;
                return Err(Error::NonFinite { step, dump });
            }
            Err(e) => return Err(e),
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = dir.join("final.ckpt");
    snapshot(&model, &adam, &rng, total).save(&final_checkpoint)?;
    Ok(RunSummary {
        dir,
        initial_val_mse: initial.unwrap_or(f64::NAN),
        final_val_mse: last,
        final_checkpoint,
    })
}
