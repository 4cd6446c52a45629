//! Split a user's behavior sequence into interest, risk and conformity
//! representations with a shared self-attention scorer.
//!
//! All three aspects read the same tanh-transformed sequence features; each
//! owns one scoring vector, so an aspect's representation is a softmax-
//! weighted average of the user's fund vectors. The pooling is order-agnostic
//! by construction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Cap on how much history a sequence keeps; older entries are dropped.
pub const N_MAX: usize = 50;

/// Time-ordered interaction history of one user, most recent last, truncated
/// to the last [`N_MAX`] entries. Type ids run parallel to fund ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user: u32,
    pub fund_ids: Vec<u32>,
    pub type_ids: Vec<u32>,
}

impl BehaviorSequence {
    pub fn new(user: u32, mut fund_ids: Vec<u32>, mut type_ids: Vec<u32>) -> Result<BehaviorSequence> {
        if fund_ids.is_empty() {
            return Err(Error::Data(format!("user {} has an empty behavior sequence", user)));
        }
        if fund_ids.len() != type_ids.len() {
            return Err(Error::Data(format!(
                "user {}: {} funds vs {} types in sequence",
                user,
                fund_ids.len(),
                type_ids.len()
            )));
        }
        if fund_ids.len() > N_MAX {
            fund_ids.drain(..fund_ids.len() - N_MAX);
            type_ids.drain(..type_ids.len() - N_MAX);
        }
        Ok(BehaviorSequence { user, fund_ids, type_ids })
    }

    pub fn len(&self) -> usize {
        self.fund_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fund_ids.is_empty()
    }
}

/// Attention parameters: one shared transform plus one scoring vector per
/// aspect. The three vectors are initialized independently so the heads
/// separate from step 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentangleParams {
    pub w_shared: Tensor,
    pub w_interest: Tensor,
    pub w_risk: Tensor,
    pub w_conformity: Tensor,
}

impl DisentangleParams {
    pub fn init<R: rand::Rng>(d: usize, rng: &mut R) -> DisentangleParams {
        let bound = 1.0 / (d as f64).sqrt();
        DisentangleParams {
            w_shared: Tensor::rand_uniform(vec![d, d], -bound, bound, rng),
            w_interest: Tensor::rand_normal(vec![d], 0.1, rng),
            w_risk: Tensor::rand_normal(vec![d], 0.1, rng),
            w_conformity: Tensor::rand_normal(vec![d], 0.1, rng),
        }
    }
}

/// Tape handles for mounted [`DisentangleParams`].
#[derive(Debug, Clone, Copy)]
pub struct DisentangleVars {
    pub w_shared: Var,
    pub w_interest: Var,
    pub w_risk: Var,
    pub w_conformity: Var,
}

/// One user's aspect representations plus the attention that produced them.
#[derive(Debug, Clone, Copy)]
pub struct AspectBundle {
    pub x_interest: Var,
    pub x_risk: Var,
    pub x_conformity: Var,
    pub att_interest: Var,
    pub att_risk: Var,
    pub att_conformity: Var,
}

/// Look up the sequence's fund rows in a fund table: row i of the result is
/// the vector of fund `fund_ids[i]`.
pub fn gather_behavior(tape: &mut Tape, table: Var, seq: &BehaviorSequence) -> Result<Var> {
    let rows = tape.value(table).shape[0];
    for &f in &seq.fund_ids {
        if f as usize >= rows {
            return Err(Error::Data(format!(
                "user {}: fund id {} outside table of {} funds",
                seq.user, f, rows
            )));
        }
    }
    let idx: Vec<usize> = seq.fund_ids.iter().map(|f| *f as usize).collect();
    tape.gather(table, Arc::new(idx))
}

/// Attention scores and pooled vector for one aspect, given the shared
/// transformed sequence `scored = tanh(X·W)`.
fn pool_aspect(tape: &mut Tape, x: Var, scored: Var, w_aspect: Var) -> Result<(Var, Var)> {
    let beta = tape.matvec(scored, w_aspect)?;
    let att = tape.softmax(beta)?;
    let pooled = tape.mat_t_vec(x, att)?;
    Ok((pooled, att))
}

/// Disentangle a gathered sequence `X` (`|S|×d`) into the three aspects:
/// scores `tanh(X·W)·w_a`, softmax over the sequence, pooled `Xᵀ·att`.
pub fn disentangle(tape: &mut Tape, x: Var, params: &DisentangleVars) -> Result<AspectBundle> {
    let transformed = tape.matmul(x, params.w_shared)?;
    let scored = tape.tanh(transformed)?;
    disentangle_scored(tape, x, scored, params)
}

/// Same as [`disentangle`] but with `tanh(X·W)` precomputed; batch code
/// computes the transform once over the whole fund table and gathers rows.
pub fn disentangle_scored(
    tape: &mut Tape,
    x: Var,
    scored: Var,
    params: &DisentangleVars,
) -> Result<AspectBundle> {
    let (x_interest, att_interest) = pool_aspect(tape, x, scored, params.w_interest)?;
    let (x_risk, att_risk) = pool_aspect(tape, x, scored, params.w_risk)?;
    let (x_conformity, att_conformity) = pool_aspect(tape, x, scored, params.w_conformity)?;
    Ok(AspectBundle {
        x_interest,
        x_risk,
        x_conformity,
        att_interest,
        att_risk,
        att_conformity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mount(tape: &mut Tape, p: &DisentangleParams) -> DisentangleVars {
        DisentangleVars {
            w_shared: tape.leaf(p.w_shared.clone()),
            w_interest: tape.leaf(p.w_interest.clone()),
            w_risk: tape.leaf(p.w_risk.clone()),
            w_conformity: tape.leaf(p.w_conformity.clone()),
        }
    }

    #[test]
    fn sequence_truncates_to_most_recent() {
        let funds: Vec<u32> = (0..60).collect();
        let types = vec![0u32; 60];
        let seq = BehaviorSequence::new(1, funds, types).unwrap();
        assert_eq!(seq.len(), N_MAX);
        assert_eq!(seq.fund_ids[0], 10);
        assert_eq!(*seq.fund_ids.last().unwrap(), 59);
    }

    #[test]
    fn sequence_rejects_empty_and_ragged() {
        assert!(BehaviorSequence::new(0, vec![], vec![]).is_err());
        assert!(BehaviorSequence::new(0, vec![1, 2], vec![0]).is_err());
    }

    #[test]
    fn gather_matches_table_rows() {
        let mut tape = Tape::new();
        let table = tape.constant(
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let single = BehaviorSequence::new(0, vec![2], vec![0]).unwrap();
        let x1 = gather_behavior(&mut tape, table, &single).unwrap();
        assert_eq!(tape.value(x1).data, vec![5.0, 6.0]);

        let repeated = BehaviorSequence::new(0, vec![1, 1, 0], vec![0, 0, 0]).unwrap();
        let x2 = gather_behavior(&mut tape, table, &repeated).unwrap();
        assert_eq!(tape.value(x2).data, vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);

        let bad = BehaviorSequence::new(0, vec![7], vec![0]).unwrap();
        assert!(gather_behavior(&mut tape, table, &bad).is_err());
    }

    #[test]
    fn singleton_sequence_copies_the_fund_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DisentangleParams::init(4, &mut rng);
        let mut tape = Tape::new();
        let vars = mount(&mut tape, &params);
        let x = tape.constant(Tensor::matrix(1, 4, vec![0.1, -0.5, 2.0, 0.7]).unwrap());
        let bundle = disentangle(&mut tape, x, &vars).unwrap();
        for aspect in [bundle.x_interest, bundle.x_risk, bundle.x_conformity] {
            assert_eq!(tape.value(aspect).data, vec![0.1, -0.5, 2.0, 0.7]);
        }
        assert_eq!(tape.value(bundle.att_interest).data, vec![1.0]);
    }

    #[test]
    fn tied_aspect_vectors_give_identical_aspects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = DisentangleParams::init(3, &mut rng);
        params.w_risk = params.w_interest.clone();
        let mut tape = Tape::new();
        let vars = mount(&mut tape, &params);
        let x = tape.constant(Tensor::rand_uniform(vec![5, 3], -1.0, 1.0, &mut rng));
        let bundle = disentangle(&mut tape, x, &vars).unwrap();
        assert_eq!(
            tape.value(bundle.x_interest).data,
            tape.value(bundle.x_risk).data
        );
    }

    #[test]
    fn hand_computed_two_row_example() {
        // X = I₂, shared transform = I, interest vector = [1,0]:
        // scores tanh([1,0]) and tanh([0,1]) dot [1,0] give [tanh 1, 0];
        // softmax([0.761594, 0]) ≈ [0.68170, 0.31830] and the pooled vector
        // equals those weights because X is the identity.
        let params = DisentangleParams {
            w_shared: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            w_interest: Tensor::vector(vec![1.0, 0.0]).unwrap(),
            w_risk: Tensor::vector(vec![0.0, 1.0]).unwrap(),
            w_conformity: Tensor::vector(vec![1.0, 1.0]).unwrap(),
        };
        let mut tape = Tape::new();
        let vars = mount(&mut tape, &params);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let bundle = disentangle(&mut tape, x, &vars).unwrap();

        // Independent scalar recomputation.
        let t = 1f64.tanh();
        let w0 = t.exp() / (t.exp() + 1.0);
        let att = tape.value(bundle.att_interest);
        assert!((att.data[0] - w0).abs() < 1e-12);
        assert!((att.data[0] - 0.68170).abs() < 1e-5);
        assert!((att.data[1] - (1.0 - 0.68170)).abs() < 1e-5);
        let xi = tape.value(bundle.x_interest);
        assert!((xi.data[0] - w0).abs() < 1e-12);
        assert!((xi.data[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn aspects_stay_in_convex_hull_and_attention_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let d = 3 + (trial % 4);
            let s = 1 + (trial % 7);
            let params = DisentangleParams::init(d, &mut rng);
            let mut tape = Tape::new();
            let vars = mount(&mut tape, &params);
            let xt = Tensor::rand_uniform(vec![s, d], -2.0, 2.0, &mut rng);
            let x = tape.constant(xt.clone());
            let bundle = disentangle(&mut tape, x, &vars).unwrap();
            for (aspect, att) in [
                (bundle.x_interest, bundle.att_interest),
                (bundle.x_risk, bundle.att_risk),
                (bundle.x_conformity, bundle.att_conformity),
            ] {
                let w = &tape.value(att).data;
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.iter().all(|p| *p >= 0.0));
                let v = &tape.value(aspect).data;
                for (j, vj) in v.iter().enumerate() {
                    let col: Vec<f64> = (0..s).map(|i| xt.data[i * d + j]).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(*vj >= lo - 1e-12 && *vj <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn permuting_rows_permutes_attention_and_keeps_aspects() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 4;
        let params = DisentangleParams::init(d, &mut rng);
        let xt = Tensor::rand_uniform(vec![5, d], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(vec![5, d]);
        for (i, &p) in perm.iter().enumerate() {
            permuted.data[i * d..(i + 1) * d].copy_from_slice(&xt.data[p * d..(p + 1) * d]);
        }

        let run = |xt: &Tensor| {
            let mut tape = Tape::new();
            let vars = mount(&mut tape, &params);
            let x = tape.constant(xt.clone());
            let b = disentangle(&mut tape, x, &vars).unwrap();
            (
                tape.value(b.x_interest).data.clone(),
                tape.value(b.att_interest).data.clone(),
            )
        };
        let (xa, atta) = run(&xt);
        let (xb, attb) = run(&permuted);
        for j in 0..d {
            assert!((xa[j] - xb[j]).abs() < 1e-12);
        }
        for (i, &p) in perm.iter().enumerate() {
            assert!((attb[i] - atta[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn aspect_coordinates_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = 3;
        let s = 4;
        let x = Tensor::rand_uniform(vec![s, d], -1.0, 1.0, &mut rng);
        let w_shared = Tensor::rand_uniform(vec![d, d], -0.6, 0.6, &mut rng);
        let w_a = Tensor::rand_normal(vec![d], 0.5, &mut rng);
        let probe = Tensor::rand_uniform(vec![d], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let pr = tape.constant(probe.clone());
                let params = DisentangleVars {
                    w_shared: vars[1],
                    w_interest: vars[2],
                    w_risk: vars[2],
                    w_conformity: vars[2],
                };
                let transformed = tape.matmul(vars[0], params.w_shared)?;
                let scored = tape.tanh(transformed)?;
                let bundle = disentangle_scored(tape, vars[0], scored, &params)?;
                tape.dot(bundle.x_interest, pr)
            },
            &[x, w_shared, w_a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {}", err);
    }
}
