use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use ogdr_core::analysis::{
    codebook_diversity, eval_mse, index_maps, sankey_csv, sankey_export, sankey_tables, similarity_map,
    similarity_pgm,
};
use ogdr_core::data::{parse_permutation, ppm_bytes, shapes_dataset, stack_images, write_bytes, ToyWorld};
use ogdr_core::gradsuite::{run_grad_suite, GRAD_TOL};
use ogdr_core::linalg::Matrix;
use ogdr_core::tensor::Tensor;
use ogdr_core::toy::{train_toy, ToyConfig};
use ogdr_core::vae::{reconstruct, run_dir, shapes_split, train_loop, Checkpoint, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "ogdr", version, about = "Grouped discrete representations with a learned channel organizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the autoencoder on the synthetic shapes set.
    Pretrain(PretrainArgs),
    /// Reconstruction error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `val`, `train`, or `shapes:<seed>:<count>`.
        #[arg(long, default_value = "val")]
        data: String,
    },
    /// Diversity, similarity maps, index maps and projection tables.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation images to render.
        #[arg(long, default_value_t = 4)]
        images: usize,
        /// Feature map the similarity maps are computed on.
        #[arg(long, value_enum, default_value_t = Features::X)]
        similarity_on: Features,
    },
    /// Learn the organizer on the four-template world.
    Toy {
        /// Channel order such as `a-c-b-d`.
        #[arg(long)]
        permutation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    residual: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vq,
    Gdr,
    Ogdr,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Features {
    /// Discrete representation fed to the decoder.
    X,
    /// Encoder output before the quantizer.
    Z,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(args) => pretrain(args),
        Command::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let images = dataset(&ck.config, &data)?;
            println!("mse {}", eval_mse(&ck, &images)?);
            Ok(())
        }
        Command::Analyze {
            ckpt,
            out,
            images,
            similarity_on,
        } => analyze(&ckpt, &out, images, similarity_on),
        Command::Toy { permutation, seed, steps } => toy(&permutation, seed, steps),
        Command::Gradcheck { seeds } => gradcheck(seeds),
    }
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Ok(s) = std::env::var("OGDR_SEED") {
        cfg.seed = s.parse().with_context(|| format!("OGDR_SEED={s:?} is not an integer"))?;
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Vq => Mode::Vq,
            ModeArg::Gdr => Mode::Gdr,
            ModeArg::Ogdr => Mode::Ogdr,
        };
    }
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.total_steps = args.steps.unwrap_or(cfg.total_steps);
    cfg.r = args.r.unwrap_or(cfg.r);
    cfg.residual_on = args.residual.unwrap_or(cfg.residual_on);
    cfg.validate()?;

    let summary = train_loop(&cfg, &args.out, args.resume.as_deref())?;
    println!("run directory {}", summary.dir.display());
    println!("initial val mse {}", summary.initial_val_mse);
    println!("final val mse {}", summary.final_val_mse);
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn dataset(cfg: &TrainConfig, spec: &str) -> Result<Tensor<f32>> {
    match spec {
        "val" => Ok(shapes_split(cfg)?.val),
        "train" => Ok(shapes_split(cfg)?.train),
        _ => {
            let parts: Vec<&str> = spec.split(':').collect();
            let ["shapes", seed, count] = parts[..] else {
                bail!("data spec {spec:?} is not val, train or shapes:<seed>:<count>");
            };
            let seed = seed.parse().with_context(|| format!("bad seed in {spec:?}"))?;
            let count = count.parse().with_context(|| format!("bad count in {spec:?}"))?;
            Ok(stack_images(&shapes_dataset(seed, count, cfg.image_size)?)?)
        }
    }
}

fn analyze(ckpt: &Path, out: &Path, n_images: usize, features: Features) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.config;
    let dir = run_dir(out, cfg).join("analysis");
    let data = shapes_split(cfg)?;
    let n = n_images.min(data.val.shape()[0]);
    let per = data.val.numel() / data.val.shape()[0];
    let mut shape = data.val.shape().to_vec();
    shape[0] = n;
    let images = Tensor::new(shape, data.val.data()[..n * per].to_vec())?;

    let diversity = codebook_diversity(ck.model.codebook())?;
    let val_mse = eval_mse(&ck, &data.val)?;
    println!("codebook diversity {diversity}");
    println!("val mse {val_mse}");
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "step": ck.step,
        "codebook_diversity": diversity,
        "val_mse": val_mse,
    });
    write_bytes(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;

    let rec = reconstruct(&ck.model, &images, cfg)?;
    let grid = match features {
        Features::X => rec.latent.clone(),
        Features::Z => ck.model.net.encode(&images)?,
    };
    let (h, w, c) = (grid.shape()[1], grid.shape()[2], grid.shape()[3]);
    let layout = ck.model.codebook().layout().clone();
    let g = layout.groups();
    for i in 0..n {
        let img = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let per = t.numel() / t.shape()[0];
            Ok(Tensor::new(&t.shape()[1..], t.data()[i * per..(i + 1) * per].to_vec())?)
        };
        write_bytes(&dir.join(format!("input-{i}.ppm")), &ppm_bytes(&img(&images)?)?)?;
        write_bytes(&dir.join(format!("recon-{i}.ppm")), &ppm_bytes(&img(&rec.output)?)?)?;
        let cells = h * w;
        let feat = Tensor::new([h, w, c], grid.data()[i * cells * c..(i + 1) * cells * c].to_vec())?;
        write_bytes(&dir.join(format!("similarity-{i}.pgm")), &similarity_pgm(&similarity_map(&feat)?)?)?;
        let maps = index_maps(
            &layout,
            &rec.tuple_idx[i * cells * g..(i + 1) * cells * g],
            &rec.scalar_idx[i * cells..(i + 1) * cells],
            h,
            w,
        )?;
        for (k, pgm) in maps.groups.iter().enumerate() {
            write_bytes(&dir.join(format!("index-{i}-group{k}.pgm")), pgm)?;
        }
        write_bytes(&dir.join(format!("index-{i}-combined.ppm")), &maps.combined)?;
    }
    if let Some(st) = ck.model.organizer() {
        sankey_export(&Matrix::from_tensor(&st.w)?, &layout, &dir)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn toy(permutation: &str, seed: u64, steps: u64) -> Result<()> {
    let world = ToyWorld::new(parse_permutation(permutation)?, 0.0)?;
    let cfg = ToyConfig {
        seed,
        steps,
        ..ToyConfig::default()
    };
    let oracle = ogdr_core::data::naive_grouping_oracle(&world, cfg.groups, cfg.codes_per_group)?;
    println!("naive grouping oracle mse {oracle}");
    let report = train_toy(&world, &cfg)?;
    println!("achieved mse {}", report.achieved_mse);
    let tables = sankey_tables(&Matrix::from_tensor(&report.state.w)?);
    println!("learned W, softmax over outputs:");
    print!("{}", sankey_csv(&tables.over_outputs, &report.ogdr.layout)?);
    println!("learned W, softmax over inputs:");
    print!("{}", sankey_csv(&tables.over_inputs, &report.ogdr.layout)?);
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<()> {
    let reports = run_grad_suite(0..seeds)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<48} max rel err {:.3e} (seed {})", r.name, r.worst, r.worst_seed);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} cases exceed {GRAD_TOL}", reports.len());
    }
    println!("all {} cases within {GRAD_TOL}", reports.len());
    Ok(())
}
