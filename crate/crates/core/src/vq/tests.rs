use super::*;
use crate::datasets::{generate_synthetic, SyntheticKind};
use crate::geometry::anisotropic_loss;
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(n: usize, d: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticKind::UniformSphere, n, d, seed).unwrap()
}

fn eta_weights(eta: f64, n: usize) -> Vec<AnisotropicWeights> {
    vec![AnisotropicWeights::from_eta(eta).unwrap(); n]
}

/// Partition objective minimized by `update_codeword`.
fn partition_objective(points: &[&[f64]], w: &[AnisotropicWeights], c: &[f64]) -> f64 {
    points
        .iter()
        .zip(w)
        .map(|(x, w)| anisotropic_loss(x, c, w).unwrap())
        .sum()
}

/// Plain gradient descent on the partition objective.
fn gradient_descent(points: &[&[f64]], w: &[AnisotropicWeights], iters: usize) -> Vec<f64> {
    let d = points[0].len();
    let lipschitz: f64 = w.iter().map(|w| 2.0 * w.h_parallel.max(w.h_perpendicular)).sum();
    let step = 1.0 / lipschitz;
    let mut c = vec![0.0; d];
    for _ in 0..iters {
        let mut grad = vec![0.0; d];
        for (x, w) in points.iter().zip(w) {
            let nsq: f64 = x.iter().map(|v| v * v).sum();
            let r: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            let proj = r.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / nsq;
            for t in 0..d {
                grad[t] -= 2.0 * (w.h_perpendicular * r[t] + (w.h_parallel - w.h_perpendicular) * proj * x[t]);
            }
        }
        for t in 0..d {
            c[t] -= step * grad[t];
        }
    }
    c
}

#[test]
fn assign_prefers_small_parallel_residual() {
    let x = [1.0, 0.0];
    let cb = Codebook::from_rows(&[[0.8, 0.4], [0.7, 0.05]]).unwrap();
    // Euclidean: the second codeword is closer.
    assert_eq!(assign_point(&x, &cb, &AnisotropicWeights::ISOTROPIC).unwrap(), 1);
    // Direct loss evaluation: 20 * 0.04 + 0.16 = 0.96 versus 20 * 0.09 + 0.0025 = 1.8025.
    let w = AnisotropicWeights::new(20.0, 1.0).unwrap();
    let l0 = anisotropic_loss(&x, cb.codeword(0), &w).unwrap();
    let l1 = anisotropic_loss(&x, cb.codeword(1), &w).unwrap();
    assert!((l0 - 0.96).abs() < 1e-12 && (l1 - 1.8025).abs() < 1e-12);
    assert_eq!(assign_point(&x, &cb, &w).unwrap(), 0);
}

#[test]
fn assign_finds_exact_codeword_and_breaks_ties_low() {
    let cb = Codebook::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
    let w = AnisotropicWeights::new(4.0, 1.0).unwrap();
    assert_eq!(assign_point(&[1.0, 0.0], &cb, &w).unwrap(), 1);
    assert_eq!(assign_point(&[0.0, 1.0], &cb, &w).unwrap(), 0);
    assert!(matches!(
        assign_point(&[0.0, 0.0], &cb, &w),
        Err(Error::ZeroNormDatapoint { .. })
    ));
    assert!(matches!(
        assign_point(&[1.0], &cb, &w),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn update_isotropic_is_mean() {
    let pts: Vec<&[f64]> = vec![&[1.0, 2.0], &[3.0, -2.0], &[2.0, 3.0]];
    let c = update_codeword(&pts, &eta_weights(1.0, 3), 0.0).unwrap();
    assert!((c[0] - 2.0).abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15);
}

#[test]
fn update_single_point_recovers_it() {
    let x = [0.3, -1.2, 2.5];
    for w in [
        AnisotropicWeights::new(4.125, 1.0).unwrap(),
        AnisotropicWeights::new(1.0, 0.1).unwrap(),
        AnisotropicWeights::new(0.5, 3.0).unwrap(),
    ] {
        let c = update_codeword(&[&x], &[w], 0.0).unwrap();
        for (a, b) in c.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12, "{c:?}");
        }
    }
}

#[test]
fn update_matches_gradient_descent() {
    let ds = unit_rows(10, 4, 11);
    let pts: Vec<&[f64]> = ds.rows().collect();
    let w = eta_weights(4.125, 10);
    let c = update_codeword(&pts, &w, 0.0).unwrap();
    let g = gradient_descent(&pts, &w, 20_000);
    let scale = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (a, b) in c.iter().zip(&g) {
        assert!((a - b).abs() / scale < 1e-4, "{c:?} vs {g:?}");
    }
}

#[test]
fn update_rejects_degenerate_inputs() {
    assert!(matches!(update_codeword(&[], &[], 0.0), Err(Error::EmptyDataset)));
    let w = [AnisotropicWeights::new(2.0, 1.0).unwrap()];
    assert!(matches!(
        update_codeword(&[&[0.0, 0.0]], &w, 0.0),
        Err(Error::ZeroNormDatapoint { index: Some(0) })
    ));
    // No orthogonal penalty at all: the orthogonal directions are unconstrained.
    let w = [AnisotropicWeights::new(1.0, 0.0).unwrap()];
    assert!(matches!(
        update_codeword(&[&[1.0, 0.0]], &w, 0.0),
        Err(Error::SingularSystem)
    ));
    assert!(update_codeword(&[&[1.0, 0.0]], &w, 1e-9).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn update_is_the_partition_minimizer(
        d in 2usize..9,
        size in 1usize..33,
        eta in 1.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let ds = generate_synthetic(
            &SyntheticKind::GaussianMixture { centers: 3, spread: 0.5, normalize: false },
            size, d, seed,
        ).unwrap();
        let pts: Vec<&[f64]> = ds.rows().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w: Vec<AnisotropicWeights> = (0..size)
            .map(|_| AnisotropicWeights::from_eta(eta * rng.random_range(0.5..1.5)).unwrap())
            .collect();
        let c = update_codeword(&pts, &w, 0.0).unwrap();
        let best = partition_objective(&pts, &w, &c);
        let long_run = gradient_descent(&pts, &w, 4000);
        prop_assert!(best <= partition_objective(&pts, &w, &long_run) + 1e-6);
        for _ in 0..8 {
            let delta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let moved: Vec<f64> = c.iter().zip(&delta).map(|(a, b)| a + 1e-3 * b / norm).collect();
            prop_assert!(partition_objective(&pts, &w, &moved) >= best);
        }
    }
}

#[test]
fn training_descends_monotonically_and_reaches_fixed_point() {
    let ds = generate_synthetic(
        &SyntheticKind::GaussianMixture { centers: 8, spread: 0.3, normalize: true },
        600,
        8,
        3,
    )
    .unwrap();
    let w = eta_weights(4.125, ds.len());
    let config = TrainConfig {
        relative_tolerance: 0.0,
        ..TrainConfig::default()
    };
    let (cb, a) = train_avq(&ds, 16, &w, &config).unwrap();
    for pair in a.loss_history.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "{:?}", a.loss_history);
    }
    assert!(a.loss_history.last() < a.loss_history.first());
    let again = vq_quantize(&ds, &cb, &w).unwrap();
    assert_eq!(again.as_slice(), &a.assignments[..]);
}

#[test]
fn training_is_deterministic() {
    let ds = unit_rows(300, 6, 9);
    let w = eta_weights(3.0, ds.len());
    let config = TrainConfig {
        seed: 17,
        ..TrainConfig::default()
    };
    let first = train_avq(&ds, 10, &w, &config).unwrap();
    let second = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| train_avq(&ds, 10, &w, &config).unwrap());
    assert_eq!(first, second);
}

#[test]
fn k_equal_n_reaches_zero_loss() {
    let ds = unit_rows(12, 5, 4);
    let w = eta_weights(4.125, ds.len());
    let (_, a) = train_avq(&ds, 12, &w, &TrainConfig::default()).unwrap();
    assert!(*a.loss_history.last().unwrap() < 1e-10);
}

/// Independent Lloyd iteration with the same initialization, tie-breaking,
/// storage precision and empty-cluster rule as the trainer.
fn reference_lloyd(ds: &Dataset, k: usize, config: &TrainConfig) -> (Vec<f64>, Vec<u32>, Vec<f64>) {
    let d = ds.dim();
    let init = initial_indices(ds.len(), k, config.seed);
    let mut cents: Vec<Vec<f64>> = init
        .iter()
        .map(|&i| ds.row(i).iter().map(|&v| v as f32 as f64).collect())
        .collect();
    let dist = |x: &[f64], c: &[f64]| -> f64 {
        let mut s = 0.0;
        for t in 0..x.len() {
            let r = x[t] - c[t];
            s += r * r;
        }
        s
    };
    let assign = |cents: &Vec<Vec<f64>>| -> Vec<u32> {
        ds.rows()
            .map(|x| {
                let mut best = (f64::INFINITY, 0);
                for (j, c) in cents.iter().enumerate() {
                    let e = dist(x, c);
                    if e < best.0 {
                        best = (e, j);
                    }
                }
                best.1 as u32
            })
            .collect()
    };
    let cost = |cents: &Vec<Vec<f64>>, codes: &[u32]| -> f64 {
        ds.rows().zip(codes).map(|(x, &c)| dist(x, &cents[c as usize])).sum()
    };
    let mut codes = assign(&cents);
    let mut history = vec![cost(&cents, &codes)];
    for _ in 0..config.max_iterations {
        let mut empty = Vec::new();
        for j in 0..k {
            let members: Vec<&[f64]> = ds.rows().zip(&codes).filter(|(_, &c)| c as usize == j).map(|(x, _)| x).collect();
            if members.is_empty() {
                empty.push(j);
                continue;
            }
            let mut sum = vec![0.0; d];
            let mut count = 0.0;
            for x in &members {
                for t in 0..d {
                    sum[t] += 1.0 * x[t];
                }
                count += 1.0;
            }
            cents[j] = sum.iter().map(|s| (s / count) as f32 as f64).collect();
        }
        if !empty.is_empty() {
            let losses: Vec<f64> = ds.rows().zip(&codes).map(|(x, &c)| dist(x, &cents[c as usize])).collect();
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            for (j, i) in empty.into_iter().zip(order) {
                cents[j] = ds.row(i).iter().map(|&v| v as f32 as f64).collect();
            }
        }
        let next = assign(&cents);
        let loss = cost(&cents, &next);
        let prev = *history.last().unwrap();
        history.push(loss);
        let changed = next != codes;
        codes = next;
        if !changed || (prev - loss) / prev < config.relative_tolerance {
            break;
        }
    }
    (cents.concat(), codes, history)
}

#[test]
fn isotropic_training_is_kmeans() {
    for (seed, k) in [(1u64, 7usize), (2, 20), (3, 1)] {
        let ds = generate_synthetic(
            &SyntheticKind::GaussianMixture { centers: 5, spread: 0.4, normalize: true },
            400,
            6,
            seed,
        )
        .unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (cb, a) = train_avq(&ds, k, &eta_weights(1.0, ds.len()), &config).unwrap();
        let (cents, codes, history) = reference_lloyd(&ds, k, &config);
        assert_eq!(cb.as_slice(), &cents[..]);
        assert_eq!(a.assignments, codes);
        assert_eq!(a.loss_history, history);
    }
}

#[test]
fn two_separated_clusters_reach_the_global_optimum() {
    // Two tight groups around (1, 0, 0) and (0, 1, 0).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    for i in 0..14 {
        let base = if i % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut v: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.05..0.05)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    let ds = Dataset::from_rows(&rows).unwrap();
    let n = ds.len();
    let w = eta_weights(4.125, n);

    let mut optimum = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut total = 0.0;
        for side in [true, false] {
            let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
            let pts: Vec<&[f64]> = members.iter().map(|&i| ds.row(i)).collect();
            let ws: Vec<AnisotropicWeights> = members.iter().map(|&i| w[i]).collect();
            let c = update_codeword(&pts, &ws, 0.0).unwrap();
            total += partition_objective(&pts, &ws, &c);
        }
        optimum = optimum.min(total);
    }

    // First seed whose sampled initialization has one point in each group.
    let seed = (0u64..)
        .find(|&s| {
            let init = initial_indices(n, 2, s);
            init[0] % 2 != init[1] % 2
        })
        .unwrap();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (cb, a) = train_avq(&ds, 2, &w, &config).unwrap();
    let last = *a.loss_history.last().unwrap();
    assert!(last < a.loss_history[0] || a.loss_history.len() == 1);
    assert!((last - optimum).abs() <= 1e-6 * optimum.max(1e-12), "{last} vs {optimum}");
    for i in 0..n {
        assert_eq!(a.assignments[i], a.assignments[i % 2]);
    }
    for j in 0..2 {
        let c = cb.codeword(j);
        assert!(c[0] > 0.5 || c[1] > 0.5);
    }
}

#[test]
fn quantize_identity_and_anisotropic_pointwise_gain() {
    let ds = unit_rows(50, 4, 8);
    let cb = Codebook::from_rows(&ds.rows().collect::<Vec<_>>()).unwrap();
    let codes = vq_quantize(&ds, &cb, &eta_weights(4.125, ds.len())).unwrap();
    assert_eq!(codes.as_slice(), &(0..50).collect::<Vec<u32>>()[..]);

    let queries = unit_rows(400, 4, 9);
    let small = Codebook::from_rows(&ds.rows().take(6).collect::<Vec<_>>()).unwrap();
    let w = eta_weights(4.125, queries.len());
    let aniso = vq_quantize(&queries, &small, &w).unwrap();
    let l2 = vq_quantize(&queries, &small, &eta_weights(1.0, queries.len())).unwrap();
    for i in 0..queries.len() {
        let x = queries.row(i);
        let la = anisotropic_loss(x, small.codeword(aniso.row(i)[0] as usize), &w[i]).unwrap();
        let lr = anisotropic_loss(x, small.codeword(l2.row(i)[0] as usize), &w[i]).unwrap();
        assert!(la <= lr);
    }
}

#[test]
fn keep_previous_policy_and_fixed_ridge_run() {
    let ds = unit_rows(200, 4, 21);
    let w = eta_weights(2.0, ds.len());
    let config = TrainConfig {
        empty_partition_policy: EmptyPartitionPolicy::KeepPrevious,
        ridge: Ridge::Fixed(1e-8),
        ..TrainConfig::default()
    };
    let (_, a) = train_avq(&ds, 30, &w, &config).unwrap();
    for pair in a.loss_history.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9);
    }
}

#[test]
fn training_input_validation() {
    let ds = unit_rows(5, 3, 1);
    let w = eta_weights(2.0, 5);
    let cfg = TrainConfig::default();
    assert!(train_avq(&ds, 6, &w, &cfg).is_err());
    assert!(train_avq(&ds, 0, &w, &cfg).is_err());
    assert!(matches!(
        train_avq(&Dataset::empty(), 1, &[], &cfg),
        Err(Error::EmptyDataset)
    ));
    let bad = TrainConfig {
        max_iterations: 0,
        ..cfg
    };
    assert!(train_avq(&ds, 2, &w, &bad).is_err());
}
