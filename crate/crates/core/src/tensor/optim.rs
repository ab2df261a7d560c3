use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Param(format!(
                "adam expects {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_sqrt_bc2 + eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`;
/// returns the applied scale (1.0 when no clipping happened).
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64_lossy(scale);
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![t(&[1.0, -2.0])];
        let mut st = AdamState::new(&p);
        st.step(&mut p, &[t(&[0.0, 0.0])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after bias correction, so Δ = −lr·1/(1+ε).
        let mut p = vec![t(&[0.0])];
        let mut st = AdamState::new(&p);
        st.step(&mut p, &[t(&[1.0])], 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let p0 = vec![t(&[0.3, 0.7]), t(&[1.5])];
        let g = vec![t(&[0.1, -0.2]), t(&[3.0])];
        let st0 = AdamState::new(&p0);
        let (mut p1, mut s1) = (p0.clone(), st0.clone());
        let (mut p2, mut s2) = (p0, st0);
        s1.step(&mut p1, &g, 0.01).unwrap();
        s2.step(&mut p2, &g, 0.01).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![t(&[0.0, 1.0])];
        let mut st = AdamState::new(&p);
        assert!(st.step(&mut p, &[t(&[1.0])], 0.1).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_cases() {
        let mut g = vec![t(&[2.0, 0.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[1.0, 0.0]);

        let mut g = vec![t(&[0.3, 0.4])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![t(&[0.0, 0.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 1.0);
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }
}
