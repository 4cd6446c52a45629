//! Supervision: contrastive risk alignment, popularity-weighted conformity
//! and interest losses, their ε-weighted total, and the popularity-blended
//! prediction rule.
//!
//! The risk signal never sees labels: it pulls each user's risk aspect
//! toward a summary of the fund types they actually held, contrasted against
//! the rest of the batch. Conformity and interest share one architecture and
//! split the supervision by fund popularity: popular funds teach the
//! conformity head, unpopular funds teach the interest head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

// ── feed-forward building block ─────────────────────────────────────────────

/// One hidden layer (ReLU) plus a linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForward {
    pub fn init<R: rand::Rng>(din: usize, hidden: usize, dout: usize, rng: &mut R) -> FeedForward {
        let bound1 = 1.0 / (din as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        FeedForward {
            w1: Tensor::rand_uniform(vec![din, hidden], -bound1, bound1, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::rand_uniform(vec![hidden, dout], -bound2, bound2, rng),
            b2: Tensor::zeros(vec![dout]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Apply the network to each row of `z` (`[m, din]` to `[m, dout]`).
pub fn ffn_rows(tape: &mut Tape, z: Var, ffn: &FeedForwardVars) -> Result<Var> {
    let pre = tape.matmul(z, ffn.w1)?;
    let pre = tape.add_row_broadcast(pre, ffn.b1)?;
    let hidden = tape.relu(pre)?;
    let out = tape.matmul(hidden, ffn.w2)?;
    tape.add_row_broadcast(out, ffn.b2)
}

/// Apply the network to a single vector.
pub fn ffn_vec(tape: &mut Tape, z: Var, ffn: &FeedForwardVars) -> Result<Var> {
    let pre = tape.mat_t_vec(ffn.w1, z)?;
    let pre = tape.add(pre, ffn.b1)?;
    let hidden = tape.relu(pre)?;
    let out = tape.mat_t_vec(ffn.w2, hidden)?;
    tape.add(out, ffn.b2)
}

// ── risk signal ─────────────────────────────────────────────────────────────

/// Fund-type side of the contrastive risk objective: a type embedding table,
/// a projection network, and the softmax temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskSignalParams {
    pub phi: Tensor,
    pub ffn: FeedForward,
    pub tau: f64,
}

impl RiskSignalParams {
    pub fn init<R: rand::Rng>(types: usize, d: usize, tau: f64, rng: &mut R) -> RiskSignalParams {
        let bound = 1.0 / (d as f64).sqrt();
        RiskSignalParams {
            phi: Tensor::rand_uniform(vec![types, d], -bound, bound, rng),
            ffn: FeedForward::init(d, d, d, rng),
            tau,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RiskSignalVars {
    pub phi: Var,
    pub ffn: FeedForwardVars,
}

/// Mean type embedding of a history (`[d]`).
pub fn type_mean(tape: &mut Tape, phi: Var, type_ids: &[u32]) -> Result<Var> {
    if type_ids.is_empty() {
        return Err(Error::InvalidArg("type sequence is empty".into()));
    }
    let rows = tape.value(phi).shape[0];
    for &t in type_ids {
        if t as usize >= rows {
            return Err(Error::Data(format!("type id {} outside table of {}", t, rows)));
        }
    }
    let idx: Vec<usize> = type_ids.iter().map(|t| *t as usize).collect();
    let picked = tape.gather(phi, Arc::new(idx))?;
    tape.mean_axis0(picked)
}

/// Sequence-level fund-type representation: projection of the mean type
/// embedding.
pub fn type_repr(tape: &mut Tape, vars: &RiskSignalVars, type_ids: &[u32]) -> Result<Var> {
    let mean = type_mean(tape, vars.phi, type_ids)?;
    ffn_vec(tape, mean, &vars.ffn)
}

/// Symmetric contrastive alignment of per-user pairs (x_risk, x_type), both
/// `[B, d]`: for each direction, cross-entropy of the temperature-scaled
/// cosine-similarity row against its own diagonal entry, summed over the
/// batch. The denominator runs over the whole batch, positive included.
pub fn risk_contrastive_loss(tape: &mut Tape, x_risk: Var, x_type: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidArg(format!("temperature must be positive, got {}", tau)));
    }
    let b = tape.value(x_risk).shape.first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::InvalidArg("risk loss needs a non-empty batch".into()));
    }
    let nr = tape.normalize_rows(x_risk)?;
    let nt = tape.normalize_rows(x_type)?;
    let ntt = tape.transpose(nt)?;
    let sims = tape.matmul(nr, ntt)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let diag_idx = Arc::new((0..b).collect::<Vec<usize>>());

    let mut total: Option<Var> = None;
    for dir in 0..2 {
        let matrix = if dir == 0 { scaled } else { tape.transpose(scaled)? };
        let lse = tape.log_sum_exp_rows(matrix)?;
        let diag = tape.pick_per_row(matrix, Arc::clone(&diag_idx))?;
        let per_user = tape.sub(lse, diag)?;
        let s = tape.sum(per_user)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.unwrap())
}

// ── popularity ──────────────────────────────────────────────────────────────

/// Log-min-max-normalized training interaction counts, with add-one
/// smoothing so zero-count funds are defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopularityTable {
    pub gamma: Vec<f64>,
    pub counts: Vec<u64>,
    pub c_min: u64,
    pub c_max: u64,
}

impl PopularityTable {
    pub fn gamma(&self, fund: u32) -> f64 {
        self.gamma[fund as usize]
    }
}

/// Build the table from per-fund counts indexed by fund id. All-equal counts
/// degrade to γ = 0.5 everywhere.
pub fn popularity(counts: &[u64]) -> Result<PopularityTable> {
    if counts.is_empty() {
        return Err(Error::InvalidArg("popularity needs a non-empty catalog".into()));
    }
    let c_min = *counts.iter().min().unwrap();
    let c_max = *counts.iter().max().unwrap();
    let gamma = if c_min == c_max {
        vec![0.5; counts.len()]
    } else {
        let lo = ((c_min + 1) as f64).ln();
        let span = ((c_max + 1) as f64).ln() - lo;
        counts
            .iter()
            .map(|c| (((c + 1) as f64).ln() - lo) / span)
            .collect()
    };
    Ok(PopularityTable { gamma, counts: counts.to_vec(), c_min, c_max })
}

// ── scoring heads ───────────────────────────────────────────────────────────

/// Both scoring heads: conformity and interest, each a user-side and an
/// item-side network meeting in a shared scoring space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub conformity_user: FeedForward,
    pub conformity_item: FeedForward,
    pub interest_user: FeedForward,
    pub interest_item: FeedForward,
}

impl HeadParams {
    /// User side reads `[profile ‖ aspect]`; both sides score in `d_s` dims.
    pub fn init<R: rand::Rng>(profile_dim: usize, d: usize, d_s: usize, rng: &mut R) -> HeadParams {
        HeadParams {
            conformity_user: FeedForward::init(profile_dim + d, d, d_s, rng),
            conformity_item: FeedForward::init(d, d, d_s, rng),
            interest_user: FeedForward::init(profile_dim + d, d, d_s, rng),
            interest_item: FeedForward::init(d, d, d_s, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub conformity_user: FeedForwardVars,
    pub conformity_item: FeedForwardVars,
    pub interest_user: FeedForwardVars,
    pub interest_item: FeedForwardVars,
}

fn head_score(
    tape: &mut Tape,
    x_profile: Var,
    x_aspect: Var,
    x_fund: Var,
    user_head: &FeedForwardVars,
    item_head: &FeedForwardVars,
) -> Result<Var> {
    let z = tape.concat(x_profile, x_aspect)?;
    let u = ffn_vec(tape, z, user_head)?;
    let v = ffn_vec(tape, x_fund, item_head)?;
    let s = tape.dot(u, v)?;
    tape.sigmoid(s)
}

/// Conformity-based match probability for one (user, fund) pair.
pub fn conformity_score(
    tape: &mut Tape,
    x_profile: Var,
    x_conformity: Var,
    x_fund: Var,
    heads: &HeadVars,
) -> Result<Var> {
    head_score(tape, x_profile, x_conformity, x_fund, &heads.conformity_user, &heads.conformity_item)
}

/// Interest-based match probability for one (user, fund) pair.
pub fn interest_score(
    tape: &mut Tape,
    x_profile: Var,
    x_interest: Var,
    x_fund: Var,
    heads: &HeadVars,
) -> Result<Var> {
    head_score(tape, x_profile, x_interest, x_fund, &heads.interest_user, &heads.interest_item)
}

// ── losses ──────────────────────────────────────────────────────────────────

/// Per-instance popularity-weighted cross-entropies: popular funds weight
/// the conformity loss, unpopular funds weight the interest loss. Inputs are
/// parallel vectors of predictions, 0/1 labels and γ weights.
pub fn weighted_losses(
    tape: &mut Tape,
    y_conformity: Var,
    y_interest: Var,
    labels: Arc<Vec<f64>>,
    gammas: &[f64],
) -> Result<(Var, Var)> {
    let m = tape.value(y_conformity).len();
    if gammas.len() != m || labels.len() != m {
        return Err(Error::Shape(format!(
            "weighted losses: {} predictions vs {} labels vs {} weights",
            m,
            labels.len(),
            gammas.len()
        )));
    }
    if gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::InvalidArg("popularity weights must lie in [0,1]".into()));
    }
    let ce_c = tape.bce_each(y_conformity, Arc::clone(&labels))?;
    let ce_i = tape.bce_each(y_interest, labels)?;
    let gamma_v = tape.constant(Tensor::vector(gammas.to_vec())?);
    let inv_gamma_v = tape.constant(Tensor::vector(gammas.iter().map(|g| 1.0 - g).collect())?);
    let l_c = tape.mul(ce_c, gamma_v)?;
    let l_i = tape.mul(ce_i, inv_gamma_v)?;
    Ok((l_c, l_i))
}

/// The three batch losses and their composition.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_interest: Var,
    pub l_conformity: Var,
    pub l_risk: Var,
    pub total: Var,
    pub epsilon: f64,
}

/// Plain-number snapshot of a [`LossBreakdown`] for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossValues {
    pub interest: f64,
    pub conformity: f64,
    pub risk: f64,
    pub total: f64,
    pub epsilon: f64,
}

impl LossBreakdown {
    pub fn snapshot(&self, tape: &Tape) -> LossValues {
        LossValues {
            interest: tape.value(self.l_interest).data[0],
            conformity: tape.value(self.l_conformity).data[0],
            risk: tape.value(self.l_risk).data[0],
            total: tape.value(self.total).data[0],
            epsilon: self.epsilon,
        }
    }
}

/// `total = L_interest + L_conformity + ε·L_risk`.
pub fn total_loss(
    tape: &mut Tape,
    l_interest: Var,
    l_conformity: Var,
    l_risk: Var,
    epsilon: f64,
) -> Result<LossBreakdown> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArg(format!(
            "risk weight must be non-negative, got {}",
            epsilon
        )));
    }
    let scaled = tape.scale(l_risk, epsilon)?;
    let ic = tape.add(l_interest, l_conformity)?;
    let total = tape.add(ic, scaled)?;
    Ok(LossBreakdown { l_interest, l_conformity, l_risk, total, epsilon })
}

/// Final score: popularity blends the two heads, `γ·y_C + (1−γ)·y_I`.
/// Inference only, so plain numbers.
pub fn predict(y_conformity: f64, y_interest: f64, gamma: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&gamma));
    gamma * y_conformity + (1.0 - gamma) * y_interest
}
