mod common;

use hnrn::hmm::*;
use hnrn::sim::LaserScan;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn filter_matches_path_enumeration() {
    let mut r = common::rng(1);
    for _ in 0..25 {
        let hmm = common::random_model(&mut r, 2, 2);
        let t = r.random_range(1..=6);
        let frames = common::sample_frames(&mut r, t, 2);
        let got = forward_filter(&hmm, &frames).unwrap();
        let want = common::enumerate_posterior(&hmm, &frames);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn three_state_filter_matches_enumeration() {
    let mut r = common::rng(2);
    let hmm = common::random_model(&mut r, 3, 3);
    let frames = common::sample_frames(&mut r, 5, 3);
    let got = forward_filter(&hmm, &frames).unwrap();
    let want = common::enumerate_posterior(&hmm, &frames);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9);
    }
}

#[test]
fn identical_emissions_follow_transitions() {
    let hmm = GaussianHmm::new(
        ndarray::array![[0.9, 0.1], [0.3, 0.7]],
        ndarray::array![[0.0], [0.0]],
        ndarray::array![[1.0], [1.0]],
        ndarray::array![0.5, 0.5],
    )
    .unwrap();
    let post = forward_filter(&hmm, &[vec![0.3], vec![-1.0]]).unwrap();
    assert!((post[0] - 0.6).abs() < 1e-12 && (post[1] - 0.4).abs() < 1e-12);
}

#[test]
fn em_is_monotone_and_rows_stay_stochastic() {
    let mut r = common::rng(3);
    for k in [2, 4] {
        let truth = common::random_model(&mut r, k, 3);
        let data = common::sample_hmm(&truth, &mut r, 6, 40);
        let fit = baum_welch(&data, k, 25, 0.0, 9).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{} -> {}", w[0], w[1]);
        }
        for row in fit.hmm.transition.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!((fit.hmm.initial.sum() - 1.0).abs() < 1e-9);
        assert!(fit.hmm.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }
}

#[test]
fn alternating_clusters_recover_off_diagonal_transitions() {
    let frames: Vec<Vec<f64>> = (0..200).map(|t| if t % 2 == 0 { vec![-5.0, -5.0] } else { vec![5.0, 5.0] }).collect();
    let seq = ObservationSeq::new(0, 0, frames);
    let fit = baum_welch(&[seq], 2, 50, 1e-9, 4).unwrap();
    assert!(fit.hmm.transition[[0, 1]] > 0.9);
    assert!(fit.hmm.transition[[1, 0]] > 0.9);
}

#[test]
fn single_state_is_the_global_gaussian() {
    let mut r = common::rng(5);
    let frames = common::sample_frames(&mut r, 30, 2);
    let fit = baum_welch(&[ObservationSeq::new(0, 0, frames.clone())], 1, 5, 1e-9, 0).unwrap();
    for d in 0..2 {
        let mean = frames.iter().map(|f| f[d]).sum::<f64>() / 30.0;
        let var = frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / 30.0;
        assert!((fit.hmm.means[[0, d]] - mean).abs() < 1e-10);
        assert!((fit.hmm.variances[[0, d]] - var).abs() < 1e-10);
    }
}

#[test]
fn engineered_near_obstacle_state_ranks_last() {
    // far frames hover at the laser limit, near frames close to an obstacle
    let mut r = common::rng(6);
    let mut seqs = Vec::new();
    for e in 0..8 {
        let mut frames = Vec::new();
        let mut rewards = Vec::new();
        for t in 0..30 {
            let near = (t / 10) % 2 == 1;
            let level = if near { 0.5 } else { 3.3 };
            let f: Vec<f64> = (0..4).map(|_| level + r.random_range(-0.1..0.1)).collect();
            let scan = LaserScan::from_ranges(f.iter().map(|v| v.min(3.5)).collect(), 3.5);
            rewards.push(collision_reward(&scan));
            frames.push(f);
        }
        let mut seq = ObservationSeq::new(e, 0, frames);
        seq.rewards = rewards;
        seqs.push(seq);
    }
    let fit = baum_welch(&seqs, 2, 30, 1e-9, 1).unwrap();
    let ranking = rank_states(&fit.hmm, &seqs, 8, HazardMap::Linear).unwrap();
    let near_state = if fit.hmm.means[[0, 0]] < fit.hmm.means[[1, 0]] { 0 } else { 1 };
    assert_eq!(*ranking.order.last().unwrap(), near_state);
    assert_eq!(ranking.hazard_of[near_state], 1.0);
    let (state, hazard) = classify(&fit.hmm, &ranking, &[vec![0.5; 4]]).unwrap();
    assert_eq!((state, hazard), (near_state, 1.0));
}

#[test]
fn unassigned_state_is_a_ranking_error() {
    let hmm = GaussianHmm::new(
        ndarray::array![[0.5, 0.5], [0.5, 0.5]],
        ndarray::array![[0.0], [100.0]],
        ndarray::array![[1.0], [1.0]],
        ndarray::array![0.5, 0.5],
    )
    .unwrap();
    let mut seq = ObservationSeq::new(0, 0, vec![vec![0.0], vec![0.1]]);
    seq.rewards = vec![-1.0, -1.0];
    assert!(matches!(rank_states(&hmm, &[seq], 8, HazardMap::Linear), Err(hnrn::Error::Ranking(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let mut r = common::rng(7);
    let hmm = common::random_model(&mut r, 3, 4);
    let ranking = StateRanking::from_mean_rewards(vec![-1.0, -50.0, -7.0], HazardMap::Linear).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hmm.bin");
    hmm.save(Some(&ranking), &path).unwrap();
    let (back, rank_back) = GaussianHmm::load(&path).unwrap();
    assert_eq!(back, hmm);
    assert_eq!(rank_back.unwrap(), ranking);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(GaussianHmm::load(&path).is_err());
}

proptest! {
    #[test]
    fn posteriors_sum_to_one(seed in 0u64..10_000, k in 1usize..5, t in 1usize..12) {
        let mut r = common::rng(seed);
        let hmm = common::random_model(&mut r, k, 3);
        let frames = common::sample_frames(&mut r, t, 3);
        let post = forward_filter(&hmm, &frames).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(post.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn reward_bounds(ranges in proptest::collection::vec(0.0f64..=3.5, 1..400)) {
        let n = ranges.len() as f64;
        let all_max = ranges.iter().all(|&r| r == 3.5);
        let reward = collision_reward(&LaserScan::from_ranges(ranges, 3.5));
        prop_assert!(reward <= 0.0 && reward >= -n * 3.5 - 1e-9);
        prop_assert_eq!(reward == 0.0, all_max);
    }

    #[test]
    fn hazard_is_monotone_in_mean_reward(rewards in proptest::collection::vec(-1000.0f64..0.0, 2..12)) {
        for map in [HazardMap::Linear, HazardMap::NormalizedReward] {
            let r = StateRanking::from_mean_rewards(rewards.clone(), map).unwrap();
            for a in 0..rewards.len() {
                for b in 0..rewards.len() {
                    if rewards[a] > rewards[b] {
                        prop_assert!(r.hazard_of[a] < r.hazard_of[b]);
                    }
                }
            }
        }
    }
}
