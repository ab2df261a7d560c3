use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ogdr_core::par::Exec;
use ogdr_core::tensor::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use ogdr_core::tensor::{Tape, Tensor};

const BATCH: usize = 16;
const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// The encoder's first two stages at the default image size.
fn geometries() -> [(&'static str, ConvGeom); 2] {
    [
        (
            "k3s1",
            ConvGeom { cin: 3, h: 32, w: 32, cout: 8, kh: 3, kw: 3, stride: 1, pad: 1 },
        ),
        (
            "k4s2",
            ConvGeom { cin: 8, h: 32, w: 32, cout: 8, kh: 4, kw: 4, stride: 2, pad: 1 },
        ),
    ]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, g) in geometries() {
        let x = random(&mut rng, BATCH * g.cin * g.h * g.w);
        let k = random(&mut rng, g.cout * g.cin * g.kh * g.kw);
        let b = random(&mut rng, g.cout);
        let gout = random(&mut rng, BATCH * g.cout * g.out_h() * g.out_w());

        let mut group = c.benchmark_group(format!("conv2d_forward/{name}"));
        for (label, exec) in STRATEGIES {
            group.bench_function(BenchmarkId::from_parameter(label), |bch| {
                bch.iter(|| conv2d_forward(exec, &g, BATCH, black_box(&x), &k, Some(&b)))
            });
        }
        group.finish();

        let mut group = c.benchmark_group(format!("conv2d_backward/{name}"));
        for (label, exec) in STRATEGIES {
            group.bench_function(BenchmarkId::from_parameter(label), |bch| {
                bch.iter(|| conv2d_backward(exec, &g, BATCH, black_box(&x), &k, &gout, true, true, true))
            });
        }
        group.finish();
    }
}

fn tape_round_trip(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new([BATCH, 3, 32, 32], random(&mut rng, BATCH * 3 * 32 * 32)).unwrap();
    let k = Tensor::new([8, 3, 3, 3], random(&mut rng, 8 * 27)).unwrap();
    let mut group = c.benchmark_group("conv_relu_forward_backward");
    for (label, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(label), |bch| {
            bch.iter(|| {
                let tape = Tape::with_exec(exec);
                let kv = tape.param(&k);
                let y = tape.constant(&x).conv2d(kv, None, 1, 1).unwrap().relu().mean();
                black_box(tape.backward(y).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, tape_round_trip);
criterion_main!(benches);
