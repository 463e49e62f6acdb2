use std::sync::Arc;

use pcomb::dist::DistDescriptor;
use pcomb::hmm::align::{align_states, hungarian, transition_error};
use pcomb::hmm::ball::{simulate_ball, BallSettings};
use pcomb::hmm::dataset::{generate_dataset, Dataset, Sequence};
use pcomb::hmm::exact::{brute_force_log_z, exact_hmm};
use pcomb::hmm::vbem::{vbem_fit, VbemOptions, VbemPriors};
use pcomb::hmm::HmmParams;
use pcomb::inference::{smc, SmcOptions};
use pcomb::model::{hmm_step, primitive, Emission, HmmCarry};
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::Value;
use proptest::prelude::*;

fn simplex(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let n = v.len();
    v[n - 1] = 1.0 - v[..n - 1].iter().sum::<f64>();
    v
}

prop_compose! {
    fn hmm_instance()(s in 1usize..=3)(
        init in prop::collection::vec(0.05f64..1.0, s),
        rows in prop::collection::vec(prop::collection::vec(0.05f64..1.0, s), s),
        means in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), s),
        sd in 0.2f64..1.5,
        obs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 0..=6),
    ) -> (HmmParams, Vec<[f64; 2]>) {
        let p = HmmParams {
            initial: simplex(&init),
            transition: rows.iter().map(|r| simplex(r)).collect(),
            means: means.iter().map(|&(x, y)| [x, y]).collect(),
            obs_sd: sd,
        };
        (p, obs.iter().map(|&(x, y)| [x, y]).collect())
    }
}

/// Total cost of the cheapest assignment, by trying every permutation.
fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_equals_path_enumeration((p, obs) in hmm_instance()) {
        let exact = exact_hmm(&p, &obs).unwrap();
        let brute = brute_force_log_z(&p, &obs);
        prop_assert!((exact.log_z - brute).abs() <= 1e-10, "{} vs {}", exact.log_z, brute);
        for row in &exact.marginals {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_matches_exhaustive_search(cost in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 4), 4)) {
        let perm = hungarian(&cost).unwrap();
        let mut seen = [false; 4];
        for &c in &perm {
            prop_assert!(!seen[c]);
            seen[c] = true;
        }
        let total: f64 = perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        prop_assert!((total - brute_force_assignment(&cost)).abs() < 1e-9);
    }

    #[test]
    fn transition_error_matches_elementwise_formula(
        est_rows in prop::collection::vec(prop::collection::vec(0.05f64..1.0, 3), 3),
        true_rows in prop::collection::vec(prop::collection::vec(0.05f64..1.0, 3), 3),
        perm_index in 0usize..6,
    ) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_index];
        let params = |rows: &[Vec<f64>]| HmmParams {
            initial: simplex(&[1.0, 1.0, 1.0]),
            transition: rows.iter().map(|r| simplex(r)).collect(),
            means: vec![[0.0, 0.0]; 3],
            obs_sd: 1.0,
        };
        let (est, truth) = (params(&est_rows), params(&true_rows));
        let got = transition_error(&est, &truth, &perm).unwrap();
        // Row perm[i] of the truth is compared with row i of the estimate,
        // entry perm[j] with entry j.
        let mut total = 0.0;
        for i in 0..3 {
            let mut tv = 0.0;
            for j in 0..3 {
                tv += (est.transition[i][j] - truth.transition[perm[i]][perm[j]]).abs();
            }
            total += tv / 2.0;
        }
        prop_assert!((got - total / 3.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn swapped_means_align_to_a_transposition() {
    let perm = align_states(&[[1.0, 0.0], [-1.0, 0.0]], &[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
    assert_eq!(perm, vec![1, 0]);
}

#[test]
fn smc_evidence_is_unbiased_over_seeds() {
    let global = primitive("fixed", |_, _| {
        Ok(HmmCarry {
            initial: vec![0.3, 0.7].into(),
            transition: vec![0.9, 0.1, 0.25, 0.75].into(),
            emission: vec![-0.5, 1.0].into(),
            previous: None,
        }
        .to_value())
    });
    let emission: Emission = Arc::new(|m: &[f64], z: usize| DistDescriptor::normal(m[z], 0.8));
    let step = hmm_step(emission);
    let ys = [0.2, 1.4, -0.9, 0.6, 1.1];
    let params = HmmParams {
        initial: vec![0.3, 0.7],
        transition: vec![vec![0.9, 0.1], vec![0.25, 0.75]],
        means: vec![[-0.5, 0.0], [1.0, 0.0]],
        obs_sd: 0.8,
    };
    // The second coordinate is pinned at the mean, so it contributes
    // log N(0; 0, 0.8²) per step to the 2-d oracle.
    let obs: Vec<[f64; 2]> = ys.iter().map(|&y| [y, 0.0]).collect();
    let second = ys.len() as f64 * (-0.5 * (2.0 * std::f64::consts::PI).ln() - 0.8f64.ln());
    let log_z = exact_hmm(&params, &obs).unwrap().log_z - second;

    let values: Vec<Value> = ys.iter().map(|&y| Value::Real(y)).collect();
    let store = ParameterStore::new();
    let ratios: Vec<f64> = (0..200)
        .map(|seed| {
            let out = smc(&global, &step, &values, 16, &SmcOptions::default(), &RngStream::new(seed), &store).unwrap();
            (out.log_evidence() - log_z).exp()
        })
        .collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let se = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn displacements_average_to_the_heading_velocity() {
    // A box large enough that no wall is reached keeps every step on its heading.
    let settings = BallSettings {
        box_size: 2000.0,
        ..BallSettings::default()
    };
    let tr = simulate_ball(&settings, [1000.0, 1000.0], 0, 10_000, &mut RngStream::new(4)).unwrap();
    let dirs = settings.directions();
    for (h, dir) in dirs.iter().enumerate() {
        let steps: Vec<&[f64; 2]> = tr
            .displacements
            .iter()
            .zip(&tr.headings)
            .filter(|(_, z)| **z == h)
            .map(|(d, _)| d)
            .collect();
        assert!(steps.len() > 1000, "heading {h} visited {} times", steps.len());
        let se = settings.noise_sd / (steps.len() as f64).sqrt();
        for c in 0..2 {
            let mean = steps.iter().map(|d| d[c]).sum::<f64>() / steps.len() as f64;
            assert!((mean - settings.speed * dir[c]).abs() <= 4.0 * se, "heading {h}, axis {c}: {mean}");
        }
    }
}

#[test]
fn section_five_dataset_shape() {
    let data = generate_dataset(30, 200, &BallSettings::default(), 0).unwrap();
    assert_eq!(data.len(), 30);
    assert!(data.sequences.iter().all(|s| s.displacements.len() == 200 && s.states.len() == 200));
    let empty = generate_dataset(1, 0, &BallSettings::default(), 0).unwrap();
    assert!(empty.sequences[0].displacements.is_empty());
}

fn sample_sequences(p: &HmmParams, n: usize, steps: usize, seed: u64) -> Dataset {
    let root = RngStream::new(seed);
    let draw = |probs: &[f64], rng: &mut RngStream| {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, q) in probs.iter().enumerate() {
            acc += q;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let sequences = (0..n)
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let mut states: Vec<usize> = Vec::new();
            let mut displacements = Vec::new();
            for t in 0..steps {
                let z = if t == 0 { draw(&p.initial, &mut rng) } else { draw(&p.transition[states[t - 1]], &mut rng) };
                let noise = DistDescriptor::normal_diag(vec![0.0, 0.0], vec![p.obs_sd, p.obs_sd])
                    .unwrap()
                    .sample(&mut rng)
                    .unwrap();
                let e = noise.as_vector().unwrap();
                displacements.push([p.means[z][0] + e[0], p.means[z][1] + e[1]]);
                states.push(z);
            }
            Sequence { displacements, states }
        })
        .collect();
    Dataset { sequences }
}

#[test]
fn vbem_elbo_never_decreases() {
    for seed in 0..20u64 {
        let p = HmmParams {
            initial: vec![0.4, 0.3, 0.3],
            transition: vec![vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.1, 0.3, 0.6]],
            means: vec![[0.5, 0.0], [-0.5, 0.2], [0.0, -0.6]],
            obs_sd: 0.4,
        };
        let data = sample_sequences(&p, 4, 30, 100 + seed);
        let opts = VbemOptions { max_iters: 300, tol: 1e-12, restarts: 1, seed };
        let fit = vbem_fit(&data, 3, p.obs_sd, &VbemPriors::default(), &opts).unwrap();
        for w in fit.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn vb_marginals_track_exact_posteriors_on_separated_data() {
    let p = HmmParams {
        initial: vec![0.5, 0.5],
        transition: vec![vec![0.85, 0.15], vec![0.1, 0.9]],
        means: vec![[-1.0, 0.5], [1.0, -0.5]],
        obs_sd: 0.5,
    };
    let data = sample_sequences(&p, 6, 80, 7);
    let opts = VbemOptions { max_iters: 500, tol: 1e-10, restarts: 2, seed: 1 };
    let fit = vbem_fit(&data, 2, p.obs_sd, &VbemPriors::default(), &opts).unwrap();
    let point = fit.point_estimate();
    let (mut total, mut n) = (0.0, 0);
    for (seq, vb) in data.sequences.iter().zip(&fit.marginals) {
        let exact = exact_hmm(&point, &seq.displacements).unwrap();
        for (a, b) in exact.marginals.iter().zip(vb) {
            total += (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            n += 2;
        }
    }
    assert!(total / n as f64 <= 0.05, "mean abs diff {}", total / n as f64);
}
