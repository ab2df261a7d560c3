use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ogdr_core::analysis::{codebook_diversity, sankey_tables, similarity_map};
use ogdr_core::codebook::{CodebookSet, GroupLayout};
use ogdr_core::data::{naive_grouping_oracle, ToyWorld};
use ogdr_core::linalg::{cosine_sim, pca_eigvals, pinv_tall, Matrix};
use ogdr_core::ogdr::{alpha_schedule, normalize_out, ogdr_on_tape, tau_schedule, OgdrConfig, OgdrVars, QuantMode, UpPath};
use ogdr_core::quantizer::{gumbel_logits, gumbel_perturb, grouped_l2, grouped_select, quantize_grouped, GumbelParams, SelectMode};
use ogdr_core::tensor::{kernels, Tape, Tensor};
use ogdr_core::vae::{Mode, TrainConfig};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tall matrix kept well away from rank deficiency.
fn full_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = random_matrix(rng, rows, cols);
    for r in 0..rows {
        let v = m.get(r, r % cols) + 2.0;
        m.set(r, r % cols, v);
    }
    m
}

/// Product of random plane rotations.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut q = Matrix::identity(d);
    for _ in 0..3 * d {
        let (i, j) = (rng.gen_range(0..d), rng.gen_range(0..d));
        if i == j {
            continue;
        }
        let (c, s) = rng.gen_range(0.0..std::f64::consts::TAU).sin_cos();
        let mut g = Matrix::identity(d);
        g.set(i, i, c);
        g.set(j, j, c);
        g.set(i, j, -s);
        g.set(j, i, s);
        q = q.matmul(&g).unwrap();
    }
    q
}

fn layout_strategy() -> impl Strategy<Value = GroupLayout> {
    (prop::collection::vec(2usize..7, 1..5), 1usize..4).prop_map(|(r, d)| GroupLayout::new(r, d).unwrap())
}

fn alpha_closed(t: u64, total: u64) -> f64 {
    if 2 * t <= total {
        0.25 * (1.0 + (2.0 * std::f64::consts::PI * t as f64 / total as f64).cos())
    } else {
        0.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinv_satisfies_moore_penrose(seed in any::<u64>(), cols in 1usize..7, extra in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = full_rank(&mut rng, cols + extra, cols);
        let p = pinv_tall(&w, 0.0).unwrap();
        let wpw = w.matmul(&p).unwrap().matmul(&w).unwrap();
        prop_assert!(wpw.max_abs_diff(&w) < 1e-6);
        prop_assert!(p.matmul(&w).unwrap().max_abs_diff(&Matrix::identity(cols)) < 1e-6);
    }

    #[test]
    fn pca_invariant_to_row_order_and_rotation(seed in any::<u64>(), n in 2usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, n, d);
        let base = pca_eigvals(&x).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Matrix::from_rows(&order.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let rotated = x.matmul(&rotation(&mut rng, d)).unwrap();
        for other in [pca_eigvals(&shuffled).unwrap(), pca_eigvals(&rotated).unwrap()] {
            for (a, b) in base.iter().zip(&other) {
                prop_assert!((a - b).abs() < 1e-8, "{base:?} vs {other:?}");
            }
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        v in prop::collection::vec(-5.0f64..5.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let su: Vec<f64> = u.iter().map(|x| a * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert!((cosine_sim(&su, &sv) - cosine_sim(&u, &v)).abs() < 1e-9);
    }

    #[test]
    fn codec_round_trips_exhaustively(layout in layout_strategy()) {
        prop_assume!(layout.total_codes() <= 10_000);
        for s in 0..layout.total_codes() {
            let t = layout.scalar_to_tuple(s).unwrap();
            prop_assert!(t.iter().zip(layout.radices()).all(|(&i, &a)| i < a));
            prop_assert_eq!(layout.tuple_to_scalar(&t).unwrap(), s);
        }
    }

    #[test]
    fn uniform_radices_match_polynomial(a in 2usize..9, g in 1usize..5, seed in any::<u64>()) {
        let layout = GroupLayout::new(vec![a; g], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<usize> = (0..g).map(|_| rng.gen_range(0..a)).collect();
        let poly: u64 = t.iter().enumerate().map(|(k, &tk)| (a as u64).pow(k as u32) * tk as u64).sum();
        prop_assert_eq!(layout.tuple_to_scalar(&t).unwrap(), poly);
    }

    #[test]
    fn hard_path_is_consistent_and_idempotent(layout in layout_strategy(), seed in any::<u64>(), positions in 1usize..9) {
        let cb = CodebookSet::<f64>::init(layout.clone(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let z = Tensor::from_fn([positions, layout.channels()], |_| rng.gen_range(-1.0..1.0));
        let q = quantize_grouped(&z, &cb, &GumbelParams::eval()).unwrap();
        let looked = cb.lookup_concat(&q.tuple_idx, positions).unwrap();
        prop_assert_eq!(looked.shape()[1], layout.groups() * layout.code_dim());
        prop_assert_eq!(looked.data(), q.x_q.data());
        for (p, &s) in q.scalar_idx.iter().enumerate() {
            let g = layout.groups();
            prop_assert_eq!(layout.scalar_to_tuple(s).unwrap(), q.tuple_idx[p * g..(p + 1) * g].to_vec());
        }
        let again = quantize_grouped(&q.x_q, &cb, &GumbelParams::eval()).unwrap();
        prop_assert_eq!(again.scalar_idx, q.scalar_idx);
    }

    #[test]
    fn single_group_matches_plain_nearest_neighbour(seed in any::<u64>(), a in 2usize..20, d in 1usize..6) {
        let layout = GroupLayout::new(vec![a], d).unwrap();
        let cb = CodebookSet::<f64>::init(layout, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let z = Tensor::from_fn([16, d], |_| rng.gen_range(-1.0..1.0));
        let q = quantize_grouped(&z, &cb, &GumbelParams::eval()).unwrap();
        let codes = cb.groups()[0].data();
        for (p, row) in z.data().chunks(d).enumerate() {
            let dist = |k: usize| row.iter().zip(&codes[k * d..(k + 1) * d]).map(|(x, c)| (x - c).powi(2)).sum::<f64>();
            let best = (0..a).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
            prop_assert_eq!(q.scalar_idx[p], best as u64);
        }
    }

    #[test]
    fn perturbed_selection_is_logit_argmin(seed in any::<u64>(), tau in 0.5f64..20.0) {
        let layout = GroupLayout::new(vec![3, 5], 2).unwrap();
        let cb = CodebookSet::<f64>::init(layout, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let z = Tensor::from_fn([6, 4], |_| rng.gen_range(-1.0..1.0));
        let d = grouped_l2(&z, &cb).unwrap();
        let p = GumbelParams::new(tau, true, seed).unwrap();
        let soft = gumbel_perturb(&d, &p).unwrap();
        let chosen = grouped_select(&soft, SelectMode::Argmin).unwrap();
        let logits = gumbel_logits(&d, &p);
        for (k, (l, dk)) in logits.iter().zip(&d).enumerate() {
            let a = dk.shape()[1];
            for (pos, row) in l.chunks(a).enumerate() {
                let best = (0..a).fold(0, |b, i| if row[i] < row[b] { i } else { b });
                prop_assert_eq!(chosen[pos * 2 + k], best);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..3 * 5 * 2).map(|_| rng.gen_range(-scale..scale)).collect();
        let y = kernels::softmax_axis(3, 5, 2, &x);
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..5).map(|j| y[(o * 5 + j) * 2 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn organizing_path_is_lossless_without_quantization(
        seed in any::<u64>(),
        c in 1usize..5,
        r in 1usize..5,
        alpha in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = full_rank(&mut rng, r * c, c).to_tensor::<f64>();
        let z = Tensor::from_fn([7, c], |_| rng.gen_range(-2.0..2.0));
        let cfg = OgdrConfig {
            c,
            r,
            layout: GroupLayout::new(vec![2], r * c).unwrap(),
            ridge: 0.0,
            residual_on: true,
            normalize_on: false,
            total_steps: 100,
            up_path: UpPath::Pinv,
        };
        let tape = Tape::new();
        let vars = OgdrVars { w: tape.constant(&w), up: None, codes: Vec::new() };
        let out = ogdr_on_tape(tape.constant(&z), &vars, &cfg, QuantMode::Identity, alpha, 1).unwrap();
        prop_assert!(out.x.value().max_abs_diff(&z) < 1e-4);
    }

    #[test]
    fn normalized_samples_are_standardized(seed in any::<u64>(), samples in 1usize..4, per in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([samples * per], |_| rng.gen_range(-3.0..5.0));
        let y = normalize_out(&x, samples).unwrap();
        for chunk in y.data().chunks(per) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn schedules_match_closed_forms(quarter in 1u64..2000) {
        let total = 4 * quarter;
        for t in [0, total / 4, total / 2, total] {
            prop_assert_eq!(alpha_schedule(t, total), alpha_closed(t, total));
            prop_assert_eq!(tau_schedule(t, total), if 2 * t < total { 10.0 } else { 0.1 });
        }
    }

    #[test]
    fn similarity_bounded_with_unit_center(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn([h, w, c], |_| rng.gen_range(-1.0..1.0));
        let center = &f.data()[((h / 2) * w + w / 2) * c..][..c];
        // The 1e-12 guard in the cosine denominator is negligible above this norm.
        let nonzero = center.iter().map(|v| v * v).sum::<f64>() >= 1e-3;
        let m = similarity_map(&f).unwrap();
        prop_assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        if nonzero {
            prop_assert!((m.data()[(h / 2) * w + w / 2] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sankey_tables_are_stochastic(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..6, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        let t = sankey_tables(&w);
        for r in 0..rows {
            prop_assert!((t.over_outputs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for c in 0..cols {
            prop_assert!(((0..rows).map(|r| t.over_inputs.get(r, c)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn diversity_grows_with_a_large_orthogonal_code(seed in any::<u64>(), k in 2usize..8, d in 2usize..6) {
        // Existing codes live in the first d-1 coordinates; the new code
        // points along the last one with at least twice the largest
        // squared norm.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes: Vec<f64> = Vec::new();
        for _ in 0..k {
            codes.extend((0..d - 1).map(|_| rng.gen_range(-1.0..1.0)));
            codes.push(0.0);
        }
        let max_sq = codes.chunks(d).map(|c| c.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let before = CodebookSet::from_groups(GroupLayout::new(vec![k], d).unwrap(), vec![Tensor::new([k, d], codes.clone()).unwrap()]).unwrap();
        let len = (2.0 * max_sq).sqrt() * rng.gen_range(1.0..3.0);
        codes.extend((0..d - 1).map(|_| 0.0));
        codes.push(if rng.gen() { len } else { -len });
        let after = CodebookSet::from_groups(GroupLayout::new(vec![k + 1], d).unwrap(), vec![Tensor::new([k + 1, d], codes).unwrap()]).unwrap();
        prop_assert!(codebook_diversity(&after).unwrap() >= codebook_diversity(&before).unwrap() - 1e-12);
    }

    #[test]
    fn config_hash_tracks_changes(seed in any::<u64>(), steps in 1u64..100_000, r in 1usize..9) {
        let a = TrainConfig { seed, total_steps: steps, r, ..TrainConfig::default() };
        prop_assert_eq!(a.hash(), a.clone().hash());
        prop_assert_ne!(a.hash(), TrainConfig { seed: seed.wrapping_add(1), ..a.clone() }.hash());
        prop_assert_ne!(a.hash(), TrainConfig { total_steps: steps + 1, ..a.clone() }.hash());
        prop_assert_ne!(a.hash(), TrainConfig { mode: Mode::Gdr, ..a.clone() }.hash());
    }
}

#[test]
fn any_permutation_costs_at_least_the_identity() {
    let identity = naive_grouping_oracle(&ToyWorld::new(vec![0, 1, 2, 3], 0.0).unwrap(), 2, 2).unwrap();
    assert_eq!(identity, 0.0);
    let mut perm = vec![0, 1, 2, 3];
    let mut seen = 0;
    permutations(&mut perm, 0, &mut |p| {
        let world = ToyWorld::new(p.to_vec(), 0.0).unwrap();
        assert!(naive_grouping_oracle(&world, 2, 2).unwrap() >= identity);
        seen += 1;
    });
    assert_eq!(seen, 24);
}

fn permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, f);
        p.swap(k, i);
    }
}
