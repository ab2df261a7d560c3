use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: Width,
    cout: Width,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
}

#[derive(Clone, Copy, Debug)]
enum Width {
    Image,
    Hidden,
    Latent,
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    Conv(Conv),
    Up,
}

const fn conv(cin: Width, cout: Width, k: usize, stride: usize, pad: usize, relu: bool) -> Stage {
    Stage::Conv(Conv { cin, cout, k, stride, pad, relu })
}

use Width::{Hidden, Image, Latent};

const ENCODER: [Stage; 5] = [
    conv(Image, Hidden, 3, 1, 1, true),
    conv(Hidden, Hidden, 4, 2, 1, true),
    conv(Hidden, Hidden, 3, 1, 1, true),
    conv(Hidden, Hidden, 4, 2, 1, true),
    conv(Hidden, Latent, 1, 1, 0, false),
];

const DECODER: [Stage; 6] = [
    conv(Latent, Hidden, 1, 1, 0, true),
    conv(Hidden, Hidden, 3, 1, 1, true),
    Stage::Up,
    conv(Hidden, Hidden, 3, 1, 1, true),
    Stage::Up,
    conv(Hidden, Image, 3, 1, 1, false),
];

/// Downsampling factor per side between image and latent grid.
pub const DOWNSAMPLE: usize = 4;

/// Encoder and decoder kernels and biases, in stage order.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeNet<T> {
    hidden: usize,
    latent: usize,
    params: Vec<Tensor<T>>,
}

fn convs() -> impl Iterator<Item = Conv> {
    ENCODER.iter().chain(&DECODER).filter_map(|s| match s {
        Stage::Conv(c) => Some(*c),
        Stage::Up => None,
    })
}

impl<T: Scalar> VaeNet<T> {
    /// Uniform fan-in scaled kernels, zero biases.
    pub fn init(hidden: usize, latent: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || latent == 0 {
            return Err(Error::Param("network widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = |w: Width| match w {
            Image => 3,
            Hidden => hidden,
            Latent => latent,
        };
        let mut params = Vec::new();
        for c in convs() {
            let (cin, cout) = (width(c.cin), width(c.cout));
            let fan_in = (cin * c.k * c.k) as f64;
            let bound = ((if c.relu { 6.0 } else { 3.0 }) / fan_in).sqrt();
            params.push(Tensor::from_fn([cout, cin, c.k, c.k], |_| {
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            }));
            params.push(Tensor::zeros([cout]));
        }
        Ok(VaeNet { hidden, latent, params })
    }

    /// Rebuilds a network from tensors produced by [`params`](Self::params).
    pub fn from_params(hidden: usize, latent: usize, params: Vec<Tensor<T>>) -> Result<Self> {
        let want = Self::init(hidden, latent, 0)?;
        if params.len() != want.params.len() {
            return Err(Error::Format(format!(
                "network needs {} tensors, got {}",
                want.params.len(),
                params.len()
            )));
        }
        for (p, w) in params.iter().zip(&want.params) {
            if p.shape() != w.shape() {
                return Err(Error::shape("network parameter", p.shape(), w.shape()));
            }
        }
        Ok(VaeNet { hidden, latent, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Tensor<T>> {
        &mut self.params
    }

    pub fn register<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Images `[B×3×H×W]` to channels-last latents `[B·(H/4)·(W/4) × c]`.
    pub fn encode_on<'t>(&self, vars: &[Var<'t, T>], img: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = img.shape();
        let &[b, 3, h, w] = shape.as_slice() else {
            return Err(Error::shape("encode", &shape, &[0, 3, 0, 0]));
        };
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Input(format!(
                "image extents {h}x{w} must be divisible by {DOWNSAMPLE}"
            )));
        }
        let x = run(&ENCODER, &vars[..2 * ENCODER.len()], img)?;
        let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        x.permute(&[0, 2, 3, 1])?.reshape([b * lh * lw, self.latent])
    }

    /// Channels-last latents for `batch` images of `h×w` latent positions
    /// back to `[B×3×4h×4w]` images in `[-1, 1]`.
    pub fn decode_on<'t>(
        &self,
        vars: &[Var<'t, T>],
        x: Var<'t, T>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, T>> {
        let x = x.reshape([batch, h, w, self.latent])?.permute(&[0, 3, 1, 2])?;
        Ok(run(&DECODER, &vars[2 * ENCODER.len()..], x)?.tanh())
    }

    /// Value-level encode returning `[B × H/4 × W/4 × c]`.
    pub fn encode(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.constants(&tape);
        let z = self.encode_on(&vars, tape.constant(img))?;
        let s = img.shape();
        (*z.value())
            .clone()
            .reshape([s[0], s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE, self.latent])
    }

    /// Value-level decode of `[B × h × w × c]`.
    pub fn decode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, h, w, c] = x.shape() else {
            return Err(Error::shape("decode", x.shape(), &[0, 0, 0, self.latent]));
        };
        if c != self.latent {
            return Err(Error::shape("decode", x.shape(), &[b, h, w, self.latent]));
        }
        let tape = Tape::new();
        let vars = self.constants(&tape);
        let flat = tape.constant(&x.clone().reshape([b * h * w, c])?);
        Ok((*self.decode_on(&vars, flat, b, h, w)?.value()).clone())
    }

    fn constants<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.constant(p)).collect()
    }
}

fn run<'t, T: Scalar>(stages: &[Stage], vars: &[Var<'t, T>], mut x: Var<'t, T>) -> Result<Var<'t, T>> {
    let mut i = 0;
    for s in stages {
        x = match s {
            Stage::Up => x.upsample2()?,
            Stage::Conv(c) => {
                let y = x.conv2d(vars[i], Some(vars[i + 1]), c.stride, c.pad)?;
                i += 2;
                if c.relu {
                    y.relu()
                } else {
                    y
                }
            }
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(seed: u64, b: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, 3, 32, 32], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_contract() {
        let net = VaeNet::<f32>::init(8, 4, 0).unwrap();
        let z = net.encode(&images(1, 2)).unwrap();
        assert_eq!(z.shape(), [2, 8, 8, 4]);
        let y = net.decode(&z).unwrap();
        assert_eq!(y.shape(), [2, 3, 32, 32]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(net.encode(&Tensor::zeros([1, 3, 30, 32])).is_err());
        assert!(net.decode(&Tensor::zeros([1, 8, 8, 3])).is_err());
    }

    #[test]
    fn identical_images_identical_latents() {
        let net = VaeNet::<f32>::init(8, 4, 0).unwrap();
        let one = images(2, 1);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let z = net.encode(&Tensor::new([2, 3, 32, 32], two).unwrap()).unwrap();
        let half = z.numel() / 2;
        assert_eq!(z.data()[..half], z.data()[half..]);
        let d = net.decode(&z).unwrap();
        let half = d.numel() / 2;
        assert_eq!(d.data()[..half], d.data()[half..]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut net = VaeNet::<f32>::init(8, 4, 0).unwrap();
        for p in net.params_mut().iter_mut() {
            p.data_mut().fill(0.0);
        }
        assert!(net.encode(&images(3, 1)).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::full([1, 8, 8, 4], 0.7f32);
        assert!(net.decode(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_round_trip() {
        let net = VaeNet::<f32>::init(6, 4, 9).unwrap();
        let back = VaeNet::from_params(6, 4, net.params().to_vec()).unwrap();
        assert_eq!(back, net);
        assert!(VaeNet::<f32>::from_params(6, 3, net.params().to_vec()).is_err());
    }
}
