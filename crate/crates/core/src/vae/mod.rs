//! Convolutional autoencoder around the quantizer and its training loop.

pub mod checkpoint;
pub mod config;
pub mod net;
mod train;

pub use checkpoint::{Checkpoint, Container};
pub use config::{LossWeights, Mode, TrainConfig};
pub use net::VaeNet;
pub use train::{
    evaluate, pretrain_step, reconstruct, run_dir, shapes_split, train_loop, Dataset, EvalStats, Model, Quant,
    Reconstruction, RunSummary, StepStats, LOG_HEADER, METRICS_HEADER,
};

/// Linear warmup from 0 to `lr0` over the first `warmup_frac` of the run,
/// then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64, warmup_frac: f64) -> f64 {
    let t = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = total * warmup_frac;
    if t <= warm {
        return if warm > 0.0 { lr0 * t / warm } else { lr0 };
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * (t - warm) / (total - warm)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_landmarks() {
        assert_eq!(lr_schedule(0, 2000, 2e-3, 0.05), 0.0);
        assert_eq!(lr_schedule(100, 2000, 2e-3, 0.05), 2e-3);
        assert_eq!(lr_schedule(2000, 2000, 2e-3, 0.05), 0.0);
        assert!(lr_schedule(50, 2000, 2e-3, 0.05) < lr_schedule(100, 2000, 2e-3, 0.05));
        assert!(lr_schedule(1500, 2000, 2e-3, 0.05) < lr_schedule(1000, 2000, 2e-3, 0.05));
    }
}
