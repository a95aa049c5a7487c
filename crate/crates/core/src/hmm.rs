//! Hazard evaluation: a diagonal-Gaussian HMM over reduced laser scans whose hidden
//! states are ordered by how crowded their surroundings are.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{contract, Error, Result};
use crate::sim::LaserScan;

pub const VARIANCE_FLOOR: f64 = 1e-4;
const HMM_MAGIC: &[u8; 8] = b"HNRNHMM\0";
const HMM_VERSION: u64 = 1;

/// Sector minima: entry `d` is the smallest range in the `d`-th block of `N / D` beams.
pub fn reduce_scan(scan: &LaserScan, dims: usize) -> Result<Vec<f64>> {
    let n = scan.len();
    if dims == 0 || n == 0 || !n.is_multiple_of(dims) {
        return Err(Error::Config(format!("observation dimension {dims} must divide beam count {n}")));
    }
    Ok(scan.ranges.chunks(n / dims).map(|block| block.iter().copied().fold(f64::INFINITY, f64::min)).collect())
}

/// Sum over beams of `(range - max_range)`: zero in open space, more negative when crowded.
pub fn collision_reward(scan: &LaserScan) -> f64 {
    scan.ranges.iter().map(|&r| r - scan.max_range).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeq {
    pub episode: u64,
    pub agent_id: usize,
    /// T frames of length D.
    pub frames: Vec<Vec<f64>>,
    /// Per-frame collision reward; may be empty when only training the HMM.
    #[serde(default)]
    pub rewards: Vec<f64>,
}

impl ObservationSeq {
    pub fn new(episode: u64, agent_id: usize, frames: Vec<Vec<f64>>) -> Self {
        ObservationSeq { episode, agent_id, frames, rewards: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn as_array(&self, dims: usize) -> Result<Array2<f64>> {
        frames_to_array(&self.frames, dims)
    }
}

fn frames_to_array(frames: &[Vec<f64>], dims: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((frames.len(), dims));
    for (t, f) in frames.iter().enumerate() {
        if f.len() != dims {
            return Err(contract(format!("frame {t} has length {}, expected {dims}", f.len())));
        }
        out.row_mut(t).assign(&ndarray::ArrayView1::from(f.as_slice()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHmm {
    /// K x K row-stochastic.
    pub transition: Array2<f64>,
    /// K x D.
    pub means: Array2<f64>,
    /// K x D, every entry at least the variance floor.
    pub variances: Array2<f64>,
    pub initial: Array1<f64>,
}

impl GaussianHmm {
    pub fn new(
        transition: Array2<f64>,
        means: Array2<f64>,
        variances: Array2<f64>,
        initial: Array1<f64>,
    ) -> Result<Self> {
        let k = initial.len();
        if k == 0 || transition.dim() != (k, k) || means.nrows() != k || variances.dim() != means.dim() {
            return Err(contract("inconsistent HMM parameter shapes"));
        }
        Ok(GaussianHmm { transition, means, variances, initial })
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn dims(&self) -> usize {
        self.means.ncols()
    }

    /// T x K matrix of log emission densities.
    pub fn log_emissions(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.dims() {
            return Err(contract(format!(
                "observation dimension {} does not match model dimension {}",
                frames.ncols(),
                self.dims()
            )));
        }
        let k = self.n_states();
        let log_norm: Vec<f64> =
            (0..k).map(|s| -0.5 * self.variances.row(s).iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>()).collect();
        let mut out = Array2::zeros((frames.nrows(), k));
        for (t, o) in frames.outer_iter().enumerate() {
            for s in 0..k {
                let mahal: f64 = o
                    .iter()
                    .zip(self.means.row(s))
                    .zip(self.variances.row(s))
                    .map(|((x, m), v)| (x - m) * (x - m) / v)
                    .sum();
                out[[t, s]] = log_norm[s] - 0.5 * mahal;
            }
        }
        Ok(out)
    }

    /// Scaled forward pass over precomputed log emissions.
    /// Returns the normalized alphas (T x K) and the total log-likelihood.
    fn forward(&self, log_b: ArrayView2<f64>) -> (Array2<f64>, f64) {
        let (t_len, k) = log_b.dim();
        let mut alpha = Array2::zeros((t_len, k));
        let mut loglik = 0.0;
        let mut b = vec![0.0; k];
        for t in 0..t_len {
            let row = log_b.row(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for s in 0..k {
                b[s] = (row[s] - m).exp();
            }
            let mut total = 0.0;
            for j in 0..k {
                let prior = if t == 0 {
                    self.initial[j]
                } else {
                    (0..k).map(|i| alpha[[t - 1, i]] * self.transition[[i, j]]).sum()
                };
                let v = prior * b[j];
                alpha[[t, j]] = v;
                total += v;
            }
            if total <= 0.0 || !total.is_finite() {
                // Every state assigns zero mass; fall back to the uniform belief.
                alpha.row_mut(t).fill(1.0 / k as f64);
                total = f64::MIN_POSITIVE;
            } else {
                alpha.row_mut(t).mapv_inplace(|v| v / total);
            }
            loglik += total.ln() + m;
        }
        (alpha, loglik)
    }

    /// Total log-likelihood of one sequence.
    pub fn log_likelihood(&self, frames: &[Vec<f64>]) -> Result<f64> {
        let arr = frames_to_array(frames, self.dims())?;
        let log_b = self.log_emissions(arr.view())?;
        Ok(self.forward(log_b.view()).1)
    }

    pub fn save(&self, ranking: Option<&StateRanking>, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(ranking))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(GaussianHmm, Option<StateRanking>)> {
        let data = std::fs::read(path)?;
        GaussianHmm::from_bytes(&data)
    }

    /// Layout: magic, version, K, D, then A, means, variances, pi, mean_reward (f64) and order (u64).
    /// An unranked model stores NaN mean rewards and the identity order.
    pub fn to_bytes(&self, ranking: Option<&StateRanking>) -> Vec<u8> {
        let k = self.n_states();
        let mut w = LeWriter::default();
        w.bytes(HMM_MAGIC);
        w.u64(HMM_VERSION);
        w.u64(k as u64);
        w.u64(self.dims() as u64);
        w.f64s(self.transition.iter());
        w.f64s(self.means.iter());
        w.f64s(self.variances.iter());
        w.f64s(self.initial.iter());
        match ranking {
            Some(r) => {
                w.f64s(r.mean_reward.iter());
                r.order.iter().for_each(|&s| w.u64(s as u64));
            }
            None => {
                (0..k).for_each(|_| w.f64(f64::NAN));
                (0..k).for_each(|s| w.u64(s as u64));
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<(GaussianHmm, Option<StateRanking>)> {
        let mut r = LeReader::new(data);
        r.expect_magic(HMM_MAGIC)?;
        let version = r.u64()?;
        if version != HMM_VERSION {
            return Err(Error::Format(format!("unsupported HMM checkpoint version {version}")));
        }
        let k = r.usize()?;
        let d = r.usize()?;
        if k == 0 || d == 0 || k > 1 << 16 || d > 1 << 20 {
            return Err(Error::Format(format!("implausible HMM shape K={k} D={d}")));
        }
        let shape_err = |_| Error::Format("shape".into());
        let transition = Array2::from_shape_vec((k, k), r.f64s(k * k)?).map_err(shape_err)?;
        let means = Array2::from_shape_vec((k, d), r.f64s(k * d)?).map_err(shape_err)?;
        let variances = Array2::from_shape_vec((k, d), r.f64s(k * d)?).map_err(shape_err)?;
        let initial = Array1::from(r.f64s(k)?);
        let mean_reward = r.f64s(k)?;
        let order = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let hmm = GaussianHmm::new(transition, means, variances, initial)?;
        let ranking = if mean_reward.iter().any(|v| v.is_nan()) {
            None
        } else {
            let ranking = StateRanking::from_order(order, mean_reward, HazardMap::Linear)?;
            Some(ranking)
        };
        Ok((hmm, ranking))
    }
}

/// Outcome of EM training.
#[derive(Debug, Clone)]
pub struct BaumWelchFit {
    pub hmm: GaussianHmm,
    /// Log-likelihood of the data under the parameters entering each iteration.
    pub log_likelihoods: Vec<f64>,
    pub reseeded_states: usize,
}

/// Expectation-maximization with scaled forward-backward recursions over several sequences.
pub fn baum_welch(
    sequences: &[ObservationSeq],
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<BaumWelchFit> {
    if k == 0 {
        return Err(Error::Training("need at least one hidden state".into()));
    }
    let seqs: Vec<&ObservationSeq> = sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::Training("no observation frames".into()));
    }
    let dims = seqs[0].frames[0].len();
    if dims == 0 {
        return Err(Error::Training("zero-dimensional observations".into()));
    }
    let data: Vec<Array2<f64>> = seqs.iter().map(|s| s.as_array(dims)).collect::<Result<_>>()?;
    let total: usize = data.iter().map(|a| a.nrows()).sum();
    if total < k {
        return Err(Error::Training(format!("{total} frames cannot support {k} states")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_frames: Vec<ndarray::ArrayView1<f64>> = data.iter().flat_map(|a| a.outer_iter()).collect();
    let global_var = global_variance(&all_frames, dims);

    let means = init_means(&all_frames, k, &mut rng);
    let mut variances = Array2::zeros((k, dims));
    for mut row in variances.outer_iter_mut() {
        row.assign(&global_var);
    }
    let mut hmm = GaussianHmm {
        transition: Array2::from_elem((k, k), 1.0 / k as f64),
        means,
        variances,
        initial: Array1::from_elem(k, 1.0 / k as f64),
    };

    let mut history = Vec::new();
    let mut reseeded = 0;
    for _ in 0..max_iters.max(1) {
        let mut init_acc = Array1::<f64>::zeros(k);
        let mut trans_acc = Array2::<f64>::zeros((k, k));
        let mut gamma_sum = Array1::<f64>::zeros(k);
        let mut mean_acc = Array2::<f64>::zeros((k, dims));
        let mut sq_acc = Array2::<f64>::zeros((k, dims));
        let mut loglik = 0.0;

        for frames in &data {
            let log_b = hmm.log_emissions(frames.view())?;
            let (alpha, ll) = hmm.forward(log_b.view());
            loglik += ll;
            let t_len = frames.nrows();

            // emission likelihoods rescaled per frame by their max; the same factors cancel in gamma/xi
            let mut b = log_b.clone();
            for mut row in b.outer_iter_mut() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
            }

            let mut beta = Array2::<f64>::ones((t_len, k));
            for t in (0..t_len.saturating_sub(1)).rev() {
                let mut norm = 0.0;
                for i in 0..k {
                    let v: f64 = (0..k).map(|j| hmm.transition[[i, j]] * b[[t + 1, j]] * beta[[t + 1, j]]).sum();
                    beta[[t, i]] = v;
                    norm += v;
                }
                if norm > 0.0 {
                    beta.row_mut(t).mapv_inplace(|v| v / norm);
                }
            }

            for t in 0..t_len {
                let mut g: Vec<f64> = (0..k).map(|s| alpha[[t, s]] * beta[[t, s]]).collect();
                let z: f64 = g.iter().sum();
                if z > 0.0 {
                    g.iter_mut().for_each(|v| *v /= z);
                }
                let o = frames.row(t);
                for s in 0..k {
                    if t == 0 {
                        init_acc[s] += g[s];
                    }
                    gamma_sum[s] += g[s];
                    for d in 0..dims {
                        mean_acc[[s, d]] += g[s] * o[d];
                        sq_acc[[s, d]] += g[s] * o[d] * o[d];
                    }
                }
                if t + 1 < t_len {
                    let mut xi = Array2::<f64>::zeros((k, k));
                    let mut z = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let v = alpha[[t, i]] * hmm.transition[[i, j]] * b[[t + 1, j]] * beta[[t + 1, j]];
                            xi[[i, j]] = v;
                            z += v;
                        }
                    }
                    if z > 0.0 {
                        trans_acc.scaled_add(1.0 / z, &xi);
                    }
                }
            }
        }

        let improved = history.last().map(|&prev: &f64| loglik - prev);
        history.push(loglik);
        if let Some(delta) = improved {
            if delta < tol {
                break;
            }
        }

        // M-step
        let seq_count = data.len() as f64;
        hmm.initial = init_acc / seq_count;
        normalize_in_place(hmm.initial.view_mut());
        for i in 0..k {
            let row_sum: f64 = trans_acc.row(i).sum();
            if row_sum > 0.0 {
                let row = trans_acc.row(i).mapv(|v| v / row_sum);
                hmm.transition.row_mut(i).assign(&row);
            }
        }
        for s in 0..k {
            let mass = gamma_sum[s];
            if mass <= 1e-10 {
                let pick = rng.random_range(0..all_frames.len());
                warn!("hidden state {s} received no responsibility; re-seeding from frame {pick}");
                hmm.means.row_mut(s).assign(&all_frames[pick]);
                hmm.variances.row_mut(s).assign(&global_var);
                reseeded += 1;
                continue;
            }
            for d in 0..dims {
                let mean = mean_acc[[s, d]] / mass;
                let var = (sq_acc[[s, d]] / mass - mean * mean).max(VARIANCE_FLOOR);
                hmm.means[[s, d]] = mean;
                hmm.variances[[s, d]] = var;
            }
        }
    }
    Ok(BaumWelchFit { hmm, log_likelihoods: history, reseeded_states: reseeded })
}

fn normalize_in_place(mut v: ndarray::ArrayViewMut1<f64>) {
    let s = v.sum();
    if s > 0.0 {
        v.mapv_inplace(|x| x / s);
    } else {
        let n = v.len() as f64;
        v.fill(1.0 / n);
    }
}

fn global_variance(frames: &[ndarray::ArrayView1<f64>], dims: usize) -> Array1<f64> {
    let n = frames.len() as f64;
    let mut mean = Array1::<f64>::zeros(dims);
    for f in frames {
        mean += f;
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(dims);
    for f in frames {
        let diff = f - &mean;
        var += &(&diff * &diff);
    }
    var /= n;
    var.mapv_inplace(|v| v.max(VARIANCE_FLOOR));
    var
}

/// k-means++ style seeding over all frames.
fn init_means(frames: &[ndarray::ArrayView1<f64>], k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dims = frames[0].len();
    let mut means = Array2::zeros((k, dims));
    let first = rng.random_range(0..frames.len());
    means.row_mut(0).assign(&frames[first]);
    let mut nearest: Vec<f64> = frames.iter().map(|f| sq_dist(f, &means.row(0))).collect();
    for s in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = frames.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..frames.len())
        };
        means.row_mut(s).assign(&frames[pick]);
        for (i, f) in frames.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(f, &means.row(s)));
        }
    }
    means
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Filtered posterior over the hidden state at the last frame of `frames`.
pub fn forward_filter(hmm: &GaussianHmm, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(contract("forward filter needs at least one frame"));
    }
    let arr = frames_to_array(frames, hmm.dims())?;
    let log_b = hmm.log_emissions(arr.view())?;
    Ok(filter_last(hmm, log_b.view()))
}

fn filter_last(hmm: &GaussianHmm, log_b: ArrayView2<f64>) -> Vec<f64> {
    let (alpha, _) = hmm.forward(log_b);
    let last = alpha.row(alpha.nrows() - 1);
    let s: f64 = last.sum();
    last.iter().map(|v| v / s).collect()
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How a state's rank is mapped to a hazard coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HazardMap {
    /// rank / (K - 1)
    #[default]
    Linear,
    /// (best reward - reward) / (best reward - worst reward)
    NormalizedReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRanking {
    /// States from least to most hazardous.
    pub order: Vec<usize>,
    pub mean_reward: Vec<f64>,
    /// Indexed by state id, values in [0, 1].
    pub hazard_of: Vec<f64>,
}

impl StateRanking {
    /// Sorts states by descending mean reward; ties keep the lower state id first.
    pub fn from_mean_rewards(mean_reward: Vec<f64>, map: HazardMap) -> Result<Self> {
        let mut order: Vec<usize> = (0..mean_reward.len()).collect();
        order.sort_by(|&a, &b| mean_reward[b].total_cmp(&mean_reward[a]).then(a.cmp(&b)));
        StateRanking::from_order(order, mean_reward, map)
    }

    pub fn from_order(order: Vec<usize>, mean_reward: Vec<f64>, map: HazardMap) -> Result<Self> {
        let k = mean_reward.len();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&s| s >= k || std::mem::replace(&mut seen[s], true)) {
            return Err(Error::Ranking("order is not a permutation of the states".into()));
        }
        let mut hazard_of = vec![0.0; k];
        match map {
            HazardMap::Linear => {
                if k > 1 {
                    for (rank, &s) in order.iter().enumerate() {
                        hazard_of[s] = rank as f64 / (k - 1) as f64;
                    }
                }
            }
            HazardMap::NormalizedReward => {
                let best = mean_reward.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let worst = mean_reward.iter().copied().fold(f64::INFINITY, f64::min);
                let span = best - worst;
                if span > 0.0 {
                    for s in 0..k {
                        hazard_of[s] = (best - mean_reward[s]) / span;
                    }
                }
            }
        }
        Ok(StateRanking { order, mean_reward, hazard_of })
    }

    pub fn n_states(&self) -> usize {
        self.order.len()
    }
}

/// Most likely current state (ties to the lowest id) and its hazard coefficient.
pub fn classify(hmm: &GaussianHmm, ranking: &StateRanking, frames: &[Vec<f64>]) -> Result<(usize, f64)> {
    if ranking.n_states() != hmm.n_states() {
        return Err(contract("ranking and model disagree on the number of states"));
    }
    let posterior = forward_filter(hmm, frames)?;
    let state = argmax_lowest(&posterior);
    Ok((state, ranking.hazard_of[state]))
}

/// Averages each state's collision reward over the frames classified into it
/// (filtered posterior over a trailing window of `window` frames) and ranks the states.
pub fn rank_states(
    hmm: &GaussianHmm,
    sequences: &[ObservationSeq],
    window: usize,
    map: HazardMap,
) -> Result<StateRanking> {
    let k = hmm.n_states();
    let window = window.max(1);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for seq in sequences {
        if seq.rewards.len() != seq.frames.len() {
            return Err(contract(format!(
                "sequence {}/{} has {} rewards for {} frames",
                seq.episode,
                seq.agent_id,
                seq.rewards.len(),
                seq.frames.len()
            )));
        }
        if seq.is_empty() {
            continue;
        }
        let arr = seq.as_array(hmm.dims())?;
        let log_b = hmm.log_emissions(arr.view())?;
        for t in 0..seq.len() {
            let start = (t + 1).saturating_sub(window);
            let post = filter_last(hmm, log_b.slice(ndarray::s![start..=t, ..]));
            let s = argmax_lowest(&post);
            sums[s] += seq.rewards[t];
            counts[s] += 1;
        }
    }
    if let Some(s) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Ranking(format!("state {s} was never the most likely state; collect more data")));
    }
    let mean_reward = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    StateRanking::from_mean_rewards(mean_reward, map)
}

/// Sum of posterior rows, used by tests and diagnostics.
pub fn state_occupancy(hmm: &GaussianHmm, seq: &ObservationSeq) -> Result<Array1<f64>> {
    let arr = seq.as_array(hmm.dims())?;
    let log_b = hmm.log_emissions(arr.view())?;
    let (alpha, _) = hmm.forward(log_b.view());
    Ok(alpha.sum_axis(Axis(0)))
}
