//! Synthetic data: the four-template attribute world with its exact
//! grouping oracle, and a procedural shapes image set.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature vectors built from per-group templates, with channels reordered
/// by a permutation: output channel `k` holds source channel `perm[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    templates: Vec<Vec<Vec<f64>>>,
    perm: Vec<usize>,
    jitter: f64,
}

impl ToyWorld {
    /// Two groups, templates `(0,1)` and `(1,0)` in each.
    pub fn new(perm: Vec<usize>, jitter: f64) -> Result<Self> {
        let t = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        Self::with_templates(vec![t.clone(), t], perm, jitter)
    }

    pub fn with_templates(templates: Vec<Vec<Vec<f64>>>, perm: Vec<usize>, jitter: f64) -> Result<Self> {
        let width: usize = templates
            .iter()
            .map(|g| g.first().map_or(0, Vec::len))
            .sum();
        if templates.iter().any(|g| g.is_empty() || g.iter().any(|t| t.len() != g[0].len())) {
            return Err(Error::Input("every group needs templates of one width".into()));
        }
        let mut seen = vec![false; width];
        if perm.len() != width || !perm.iter().all(|&p| p < width && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input(format!(
                "{perm:?} is not a permutation of {width} channels"
            )));
        }
        if !(jitter >= 0.0) {
            return Err(Error::Param(format!("jitter must be non-negative, got {jitter}")));
        }
        Ok(ToyWorld {
            templates,
            perm,
            jitter,
        })
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Every template combination, group 1 varying slowest, permuted.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut combos = vec![Vec::new()];
        for group in &self.templates {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    group.iter().map(move |t| {
                        let mut v = prefix.clone();
                        v.extend(t);
                        v
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|v| self.perm.iter().map(|&p| v[p]).collect())
            .collect()
    }

    /// `copies` passes over [`points`](Self::points) with Gaussian jitter,
    /// as a `[rows × channels]` tensor.
    pub fn sample(&self, seed: u64, copies: usize) -> Result<Tensor<f64>> {
        let pts = self.points();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.jitter).map_err(|e| Error::Param(e.to_string()))?;
        let mut data = Vec::with_capacity(copies * pts.len() * self.channels());
        for _ in 0..copies {
            for p in &pts {
                for &v in p {
                    let j = if self.jitter > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(v + j);
                }
            }
        }
        Tensor::new([copies * pts.len(), self.channels()], data)
    }
}

/// Parses `a-c-b-d` style channel orders.
pub fn parse_permutation(spec: &str) -> Result<Vec<usize>> {
    spec.split('-')
        .map(|s| match s.as_bytes() {
            [c @ b'a'..=b'z'] => Ok((c - b'a') as usize),
            _ => Err(Error::Input(format!("bad channel name {s:?} in {spec:?}"))),
        })
        .collect()
}

/// Smallest within-cluster squared error over all assignments of `points`
/// to at most `k` clusters, centroids at cluster means.
fn best_clustering(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points.first().map_or(0, Vec::len);
    let mut assign = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sse = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| assign[i] == c).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..dim {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
        let mut i = 0;
        while i < n {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

/// Per-element reconstruction error of the best codebook with
/// `codes_per_group` codes on each of `groups` contiguous channel slices of
/// the world's jitter-free points.
pub fn naive_grouping_oracle(world: &ToyWorld, groups: usize, codes_per_group: usize) -> Result<f64> {
    let pts = world.points();
    let c = world.channels();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::Input(format!("{c} channels cannot form {groups} groups")));
    }
    let w = c / groups;
    let sse: f64 = (0..groups)
        .map(|g| {
            let slice: Vec<Vec<f64>> = pts.iter().map(|p| p[g * w..(g + 1) * w].to_vec()).collect();
            best_clustering(&slice, codes_per_group)
        })
        .sum();
    Ok(sse / (pts.len() * c) as f64)
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSample {
    /// `[3 × size × size]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Row-major object ids, 0 for background.
    pub mask: Vec<u8>,
    pub size: usize,
}

/// `count` scenes of 2 to 4 colored rectangles and disks over a sinusoidal
/// texture. Later shapes occlude earlier ones.
pub fn shapes_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<ShapesSample>> {
    if count == 0 || size < 8 {
        return Err(Error::Param(format!("need count > 0 and size >= 8, got {count}, {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| render_scene(&mut rng, size)).collect())
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> ShapesSample {
    let n = size * size;
    let mut img = vec![0f32; 3 * n];
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.6..0.0));
    let (fx, fy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = 0.15 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for ch in 0..3 {
                img[ch * n + y * size + x] = (base[ch] + t) as f32;
            }
        }
    }
    let mut mask = vec![0u8; n];
    let objects = rng.gen_range(2..=4);
    let s = size as f64;
    for id in 1..=objects {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let disk = rng.gen_bool(0.5);
        let half = rng.gen_range(0.1 * s..0.22 * s);
        let cx = rng.gen_range(half..s - half);
        let cy = rng.gen_range(half..s - half);
        let aspect = rng.gen_range(0.6..1.4);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disk {
                    dx * dx + dy * dy <= half * half
                } else {
                    dx.abs() <= half * aspect && dy.abs() <= half / aspect
                };
                if inside {
                    mask[y * size + x] = id as u8;
                    for ch in 0..3 {
                        img[ch * n + y * size + x] = color[ch] as f32;
                    }
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    ShapesSample {
        image: Tensor::new([3, size, size], img).expect("extents match"),
        mask,
        size,
    }
}

/// Stacks images into `[N × 3 × size × size]`.
pub fn stack_images(samples: &[ShapesSample]) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("no images to stack".into()))?;
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.size != first.size {
            return Err(Error::shape("stack_images", first.image.shape(), s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new([samples.len(), 3, first.size, first.size], data)
}

/// Binary PPM (P6) from a `[3 × h × w]` image in `[-1, 1]`.
pub fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("ppm", s, &[3])),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    for i in 0..n {
        for ch in 0..3 {
            let v = (image.data()[ch * n + i] + 1.0) * 127.5;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Binary PGM (P5).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("pgm", &[pixels.len()], &[height, width]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes each sample as `img-NNNN.ppm` and `mask-NNNN.pgm`.
pub fn dump_dataset(dir: &Path, samples: &[ShapesSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        write_bytes(&dir.join(format!("img-{i:04}.ppm")), &ppm_bytes(&s.image)?)?;
        write_bytes(
            &dir.join(format!("mask-{i:04}.pgm")),
            &pgm_bytes(s.size, s.size, &s.mask)?,
        )?;
    }
    Ok(())
}
