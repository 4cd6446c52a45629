//! Ranking metrics, full-catalog evaluation, disentanglement probes, and
//! embedding export.
//!
//! Evaluation separates a one-time forward pass from per-user ranking: a
//! [`Scorer`] runs the model once over every fund and every user with a
//! training history, after which scoring any (user, fund) pair is two dot
//! products. Ranking the whole catalog for thousands of users then costs
//! milliseconds rather than a forward pass each.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, Interaction};
use crate::disentangle::{disentangle_scored, gather_behavior};
use crate::error::{Error, Result};
use crate::graph::FundGraph;
use crate::model::{fund_rows, ModelParams};
use crate::objectives::{ffn_rows, ffn_vec, predict, PopularityTable};
use crate::tensor::{Tape, Tensor};

/// Cutoffs reported by default.
pub const REPORT_KS: [usize; 4] = [5, 10, 15, 20];

// ── ranked lists and metrics ────────────────────────────────────────────────

/// One user's candidate ranking: descending score, ties broken by ascending
/// fund id so equal-scored runs order identically everywhere.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub user: u32,
    pub funds: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Sort scored candidates into a [`RankedList`].
pub fn rank_candidates(user: u32, mut scored: Vec<(u32, f64)>) -> RankedList {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let funds = scored.iter().map(|&(f, _)| f).collect();
    let scores = scored.iter().map(|&(_, s)| s).collect();
    RankedList { user, funds, scores }
}

fn check_cutoff(k: usize, relevant: &BTreeSet<u32>) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArg("metric cutoff k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::InvalidArg("metrics need a non-empty relevant set".into()));
    }
    Ok(())
}

/// Fraction of the relevant set found in the top k.
pub fn recall_at_k(ranked: &RankedList, relevant: &BTreeSet<u32>, k: usize) -> Result<f64> {
    check_cutoff(k, relevant)?;
    let hits = ranked.funds.iter().take(k).filter(|f| relevant.contains(f)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG: hit at 1-based rank i earns 1/log2(i+1), normalized
/// by the best achievable prefix of min(k, |relevant|) hits.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &BTreeSet<u32>, k: usize) -> Result<f64> {
    check_cutoff(k, relevant)?;
    let dcg: f64 = ranked
        .funds
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, f)| relevant.contains(*f))
        .map(|(i, _)| 1.0 / (i as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
    Ok(dcg / ideal)
}

// ── frozen scorer ───────────────────────────────────────────────────────────

/// Per-user and per-fund scoring state extracted from a model by one forward
/// pass. Users without a training history have no row and cannot be scored.
pub struct Scorer {
    pub d: usize,
    pub d_s: usize,
    pub n_funds: usize,
    /// user id -> row index into the per-user matrices below.
    pub user_rows: BTreeMap<u32, usize>,
    pub user_conformity: Vec<f64>,
    pub user_interest: Vec<f64>,
    pub item_conformity: Vec<f64>,
    pub item_interest: Vec<f64>,
    pub aspect_interest: Vec<f64>,
    pub aspect_risk: Vec<f64>,
    pub aspect_conformity: Vec<f64>,
    pub gamma: Vec<f64>,
    /// When false the conformity head is ignored and y = y^I (ablation).
    pub blend_conformity: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Scorer {
    /// Run the frozen model over a dataset: convolve fund embeddings (or take
    /// them raw when `use_graph` is off), disentangle every user with a
    /// training sequence of at most `n_max` events, and push both sides
    /// through their scoring networks.
    pub fn build(
        model: &ModelParams,
        popularity: &PopularityTable,
        graph: &FundGraph,
        bundle: &DatasetBundle,
        n_max: usize,
        use_graph: bool,
        blend_conformity: bool,
    ) -> Result<Scorer> {
        let dims = &model.dims;
        if dims.funds != bundle.n_funds() {
            return Err(Error::Data(format!(
                "model was trained on {} funds but the dataset catalog has {}",
                dims.funds,
                bundle.n_funds()
            )));
        }
        if popularity.gamma.len() != bundle.n_funds() {
            return Err(Error::Data(format!(
                "popularity table covers {} funds, catalog has {}",
                popularity.gamma.len(),
                bundle.n_funds()
            )));
        }
        if bundle.profiles.iter().any(|p| p.len() != dims.profile_dim) {
            return Err(Error::Data(format!(
                "model expects {}-dim profiles, dataset disagrees",
                dims.profile_dim
            )));
        }

        let sequences = data::build_sequences(&bundle.train, &bundle.catalog, n_max)?;
        let mut tape = Tape::new();
        let vars = model.mount_frozen(&mut tape);
        let funds = fund_rows(&mut tape, &vars, graph, dims.funds, use_graph)?;
        let transformed = tape.matmul(funds, vars.disentangle.w_shared)?;
        let scored_table = tape.tanh(transformed)?;
        let item_c = ffn_rows(&mut tape, funds, &vars.heads.conformity_item)?;
        let item_i = ffn_rows(&mut tape, funds, &vars.heads.interest_item)?;
        let item_conformity = tape.value(item_c).data.clone();
        let item_interest = tape.value(item_i).data.clone();

        let mut user_rows = BTreeMap::new();
        let mut user_conformity = Vec::with_capacity(sequences.len() * dims.d_s);
        let mut user_interest = Vec::with_capacity(sequences.len() * dims.d_s);
        let mut aspect_interest = Vec::with_capacity(sequences.len() * dims.d);
        let mut aspect_risk = Vec::with_capacity(sequences.len() * dims.d);
        let mut aspect_conformity = Vec::with_capacity(sequences.len() * dims.d);
        for (row, (&user, seq)) in sequences.iter().enumerate() {
            let x = gather_behavior(&mut tape, funds, seq)?;
            let scored = gather_behavior(&mut tape, scored_table, seq)?;
            let aspects = disentangle_scored(&mut tape, x, scored, &vars.disentangle)?;
            let profile = bundle.profiles.get(user as usize).cloned().ok_or_else(|| {
                Error::Data(format!("user {} has interactions but no profile row", user))
            })?;
            let profile = tape.constant(Tensor::vector(profile)?);
            let zc = tape.concat(profile, aspects.x_conformity)?;
            let zi = tape.concat(profile, aspects.x_interest)?;
            let uc = ffn_vec(&mut tape, zc, &vars.heads.conformity_user)?;
            let ui = ffn_vec(&mut tape, zi, &vars.heads.interest_user)?;
            user_conformity.extend_from_slice(&tape.value(uc).data);
            user_interest.extend_from_slice(&tape.value(ui).data);
            aspect_interest.extend_from_slice(&tape.value(aspects.x_interest).data);
            aspect_risk.extend_from_slice(&tape.value(aspects.x_risk).data);
            aspect_conformity.extend_from_slice(&tape.value(aspects.x_conformity).data);
            user_rows.insert(user, row);
        }

        Ok(Scorer {
            d: dims.d,
            d_s: dims.d_s,
            n_funds: dims.funds,
            user_rows,
            user_conformity,
            user_interest,
            item_conformity,
            item_interest,
            aspect_interest,
            aspect_risk,
            aspect_conformity,
            gamma: popularity.gamma.clone(),
            blend_conformity,
        })
    }

    pub fn row_of(&self, user: u32) -> Option<usize> {
        self.user_rows.get(&user).copied()
    }

    /// Conformity-head and interest-head probabilities for one pair.
    pub fn head_scores(&self, row: usize, fund: usize) -> (f64, f64) {
        let uc = &self.user_conformity[row * self.d_s..][..self.d_s];
        let vc = &self.item_conformity[fund * self.d_s..][..self.d_s];
        let ui = &self.user_interest[row * self.d_s..][..self.d_s];
        let vi = &self.item_interest[fund * self.d_s..][..self.d_s];
        (sigmoid(dot(uc, vc)), sigmoid(dot(ui, vi)))
    }

    /// Blended prediction for ranking.
    pub fn score_row(&self, row: usize, fund: usize) -> f64 {
        let (y_c, y_i) = self.head_scores(row, fund);
        if self.blend_conformity {
            predict(y_c, y_i, self.gamma[fund])
        } else {
            y_i
        }
    }
}

// ── evaluation ──────────────────────────────────────────────────────────────

/// Averaged ranking quality over the evaluable users of one partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Evaluate with an arbitrary scoring function: `score(user, candidates)`
/// returns one score per candidate, or `None` when the user cannot be scored.
/// Candidates are the catalog minus the user's training history; relevance is
/// the user's partition funds minus that history. Users with no history or an
/// empty relevant set are counted as skipped, never dropped silently.
pub fn evaluate_scores<F>(
    bundle: &DatasetBundle,
    partition: &[Interaction],
    ks: &[usize],
    variant: &str,
    mut score: F,
) -> Result<MetricReport>
where
    F: FnMut(u32, &[u32]) -> Option<Vec<f64>>,
{
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArg("evaluation needs cutoffs of at least 1".into()));
    }
    let n_funds = bundle.n_funds() as u32;
    let n_users = bundle.n_users() as u32;
    let mut by_user: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for it in partition {
        if it.fund >= n_funds || it.user >= n_users {
            return Err(Error::Data(format!(
                "partition row (user {}, fund {}) outside dataset of {} users / {} funds",
                it.user, it.fund, n_users, n_funds
            )));
        }
        by_user.entry(it.user).or_default().insert(it.fund);
    }

    let history = data::train_history(&bundle.train);
    let empty = BTreeSet::new();
    let mut sums = vec![0.0; 2 * ks.len()];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (&user, test_funds) in &by_user {
        let hist = history.get(&user).unwrap_or(&empty);
        let relevant: BTreeSet<u32> = test_funds.difference(hist).copied().collect();
        if hist.is_empty() || relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let candidates: Vec<u32> = (0..n_funds).filter(|f| !hist.contains(f)).collect();
        let Some(scores) = score(user, &candidates) else {
            skipped += 1;
            continue;
        };
        if scores.len() != candidates.len() {
            return Err(Error::Shape(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        let ranked = rank_candidates(user, candidates.into_iter().zip(scores).collect());
        for (j, &k) in ks.iter().enumerate() {
            sums[2 * j] += recall_at_k(&ranked, &relevant, k)?;
            sums[2 * j + 1] += ndcg_at_k(&ranked, &relevant, k)?;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Data("no user in the partition could be evaluated".into()));
    }

    let mut metrics = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        metrics.insert(format!("recall@{}", k), sums[2 * j] / evaluated as f64);
        metrics.insert(format!("ndcg@{}", k), sums[2 * j + 1] / evaluated as f64);
    }
    Ok(MetricReport {
        variant: variant.to_string(),
        users_evaluated: evaluated,
        users_skipped: skipped,
        metrics,
    })
}

/// Evaluate a built [`Scorer`] on one partition at the given cutoffs.
pub fn evaluate(
    scorer: &Scorer,
    bundle: &DatasetBundle,
    partition: &[Interaction],
    ks: &[usize],
    variant: &str,
) -> Result<MetricReport> {
    evaluate_scores(bundle, partition, ks, variant, |user, candidates| {
        let row = scorer.row_of(user)?;
        Some(candidates.iter().map(|&f| scorer.score_row(row, f as usize)).collect())
    })
}

// ── disentanglement probes ──────────────────────────────────────────────────

/// How well the aspect embeddings expose the planted structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub users_probed: usize,
    pub classes: usize,
    /// Held-out accuracy of a linear probe reading planted risk level from x^R.
    pub risk_accuracy: f64,
    /// Same probe reading x^I instead; should trail `risk_accuracy`.
    pub interest_accuracy: f64,
    /// Shuffled-label control on x^R; should sit at chance (1/classes).
    pub shuffled_accuracy: f64,
    /// Mean popularity weight of the top-10 funds ranked by the conformity head.
    pub conformity_head_top_gamma: f64,
    /// Same for the interest head; conformity should rank more popular funds.
    pub interest_head_top_gamma: f64,
}

/// Probe the aspect embeddings of every scored user against planted latents:
/// a logistic-regression probe for risk level on x^R (with an x^I comparison
/// and a shuffled-label control), plus the mean top-10 popularity weight of
/// rankings produced by each scoring head alone.
pub fn probe_disentanglement(
    scorer: &Scorer,
    bundle: &DatasetBundle,
    seed: u64,
) -> Result<ProbeReport> {
    if bundle.latents.len() != bundle.n_users() {
        return Err(Error::Data(
            "probing needs planted latents for every user; this dataset has none".into(),
        ));
    }
    let classes = bundle
        .latents
        .iter()
        .map(|l| l.risk_level as usize + 1)
        .max()
        .unwrap_or(0)
        .max(bundle.catalog.n_levels());
    let users: Vec<u32> = scorer.user_rows.keys().copied().collect();
    let labels: Vec<usize> =
        users.iter().map(|&u| bundle.latents[u as usize].risk_level as usize).collect();
    let take_rows = |table: &[f64]| -> Vec<Vec<f64>> {
        users
            .iter()
            .map(|&u| {
                let row = scorer.user_rows[&u];
                table[row * scorer.d..][..scorer.d].to_vec()
            })
            .collect()
    };
    let risk_feats = take_rows(&scorer.aspect_risk);
    let interest_feats = take_rows(&scorer.aspect_interest);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let risk_accuracy = linear_probe_accuracy(&risk_feats, &labels, classes, &mut rng)?;
    let interest_accuracy = linear_probe_accuracy(&interest_feats, &labels, classes, &mut rng)?;
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    let shuffled_accuracy = linear_probe_accuracy(&risk_feats, &shuffled, classes, &mut rng)?;
    let (conformity_head_top_gamma, interest_head_top_gamma) =
        head_top_gamma(scorer, bundle, 10)?;

    Ok(ProbeReport {
        users_probed: users.len(),
        classes,
        risk_accuracy,
        interest_accuracy,
        shuffled_accuracy,
        conformity_head_top_gamma,
        interest_head_top_gamma,
    })
}

/// Fit multinomial logistic regression on a shuffled 80% of the rows by
/// full-batch gradient descent and report accuracy on the held-out 20%.
/// Features are standardized with training-split statistics so the verdict is
/// about the embedding geometry, not its scale.
fn linear_probe_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::Shape(format!("{} feature rows vs {} labels", n, labels.len())));
    }
    if n < 10 {
        return Err(Error::Data(format!("probe needs at least 10 labeled users, got {}", n)));
    }
    if classes < 2 {
        return Err(Error::InvalidArg("probe needs at least 2 classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {} outside {} classes", bad, classes)));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("probe features must share one width".into()));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = (n / 5).max(1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let n_train = train_idx.len();

    let mut mean = vec![0.0; d];
    for &i in train_idx {
        for (m, x) in mean.iter_mut().zip(&features[i]) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut std = vec![0.0; d];
    for &i in train_idx {
        for (s, (x, m)) in std.iter_mut().zip(features[i].iter().zip(&mean)) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut std {
        *s = (*s / n_train as f64).sqrt().max(1e-6);
    }
    let standardize = |i: usize| -> Vec<f64> {
        features[i].iter().zip(mean.iter().zip(&std)).map(|(x, (m, s))| (x - m) / s).collect()
    };

    let mut x_train = Vec::with_capacity(n_train * d);
    let mut y_train = Vec::with_capacity(n_train);
    for &i in train_idx {
        x_train.extend(standardize(i));
        y_train.push(labels[i]);
    }
    let y_train = Arc::new(y_train);

    let mut w = Tensor::zeros(vec![d, classes]);
    let mut b = Tensor::zeros(vec![classes]);
    let lr = 0.5;
    for _ in 0..500 {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let xv = tape.constant(Tensor::matrix(n_train, d, x_train.clone())?);
        let logits = tape.matmul(xv, wv)?;
        let logits = tape.add_row_broadcast(logits, bv)?;
        let lse = tape.log_sum_exp_rows(logits)?;
        let picked = tape.pick_per_row(logits, Arc::clone(&y_train))?;
        let diff = tape.sub(lse, picked)?;
        let loss = tape.mean(diff)?;
        tape.backward(loss)?;
        let gw = tape.grad(wv).expect("probe weight is a leaf");
        for (p, g) in w.data.iter_mut().zip(gw) {
            *p -= lr * g;
        }
        let gb = tape.grad(bv).expect("probe bias is a leaf");
        for (p, g) in b.data.iter_mut().zip(gb) {
            *p -= lr * g;
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = standardize(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let s = b.data[c] + x.iter().enumerate().map(|(j, xj)| xj * w.data[j * classes + c]).sum::<f64>();
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Mean popularity weight of the top funds when ranking by each head alone.
fn head_top_gamma(scorer: &Scorer, bundle: &DatasetBundle, top: usize) -> Result<(f64, f64)> {
    let history = data::train_history(&bundle.train);
    let n_funds = bundle.n_funds() as u32;
    let empty = BTreeSet::new();
    let mut sum_c = 0.0;
    let mut sum_i = 0.0;
    let mut users = 0usize;
    for (&user, &row) in &scorer.user_rows {
        let hist = history.get(&user).unwrap_or(&empty);
        let mut by_c = Vec::with_capacity(n_funds as usize);
        let mut by_i = Vec::with_capacity(n_funds as usize);
        for f in 0..n_funds {
            if hist.contains(&f) {
                continue;
            }
            let (y_c, y_i) = scorer.head_scores(row, f as usize);
            by_c.push((f, y_c));
            by_i.push((f, y_i));
        }
        if by_c.len() < top {
            continue;
        }
        let ranked_c = rank_candidates(user, by_c);
        let ranked_i = rank_candidates(user, by_i);
        let mean_gamma = |ranked: &RankedList| -> f64 {
            ranked.funds[..top].iter().map(|&f| scorer.gamma[f as usize]).sum::<f64>()
                / top as f64
        };
        sum_c += mean_gamma(&ranked_c);
        sum_i += mean_gamma(&ranked_i);
        users += 1;
    }
    if users == 0 {
        return Err(Error::Data(format!(
            "no user has {} candidates to compare the scoring heads on",
            top
        )));
    }
    Ok((sum_c / users as f64, sum_i / users as f64))
}

// ── embedding export ────────────────────────────────────────────────────────

/// Write one line per (user, aspect) with the aspect embedding and the
/// planted risk level as label: `user<TAB>aspect<TAB>v1,...,vd<TAB>label`.
/// Projection to 2-D is left to external tools.
pub fn export_embeddings(scorer: &Scorer, bundle: &DatasetBundle, path: &Path) -> Result<()> {
    if bundle.latents.len() != bundle.n_users() {
        return Err(Error::Data(
            "embedding export labels rows with planted risk levels; this dataset has none".into(),
        ));
    }
    let mut out = String::from("# user\taspect\tembedding\tlabel\n");
    for (&user, &row) in &scorer.user_rows {
        let label = bundle.latents[user as usize].risk_level;
        for (aspect, table) in [
            ("I", &scorer.aspect_interest),
            ("R", &scorer.aspect_risk),
            ("C", &scorer.aspect_conformity),
        ] {
            let joined = table[row * scorer.d..][..scorer.d]
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{}\t{}\t{}\t{}", user, aspect, joined, label).expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Catalog, SyntheticSpec, UserLatent};
    use crate::graph::build_graph;
    use crate::model::{ModelDims, ModelParams};
    use crate::objectives::popularity;
    use rand::seq::IndexedRandom;
    use rand::Rng;

    fn list(user: u32, funds: &[u32]) -> RankedList {
        let n = funds.len();
        let scores = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        RankedList { user, funds: funds.to_vec(), scores }
    }

    fn set(funds: &[u32]) -> BTreeSet<u32> {
        funds.iter().copied().collect()
    }

    // ── metric arithmetic ──

    #[test]
    fn recall_covers_the_three_textbook_cases() {
        let ranked = list(0, &[3, 1, 4, 2, 5, 9, 0, 6, 8, 7]);
        assert_eq!(recall_at_k(&ranked, &set(&[3, 1, 4]), 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[3, 9, 40, 50]), 10).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranked, &set(&[40, 50]), 10).unwrap(), 0.0);
    }

    #[test]
    fn cutoff_and_relevance_preconditions_are_enforced() {
        let ranked = list(0, &[1, 2, 3]);
        assert!(recall_at_k(&ranked, &set(&[1]), 0).is_err());
        assert!(ndcg_at_k(&ranked, &set(&[1]), 0).is_err());
        assert!(recall_at_k(&ranked, &set(&[]), 5).is_err());
        assert!(ndcg_at_k(&ranked, &set(&[]), 5).is_err());
    }

    #[test]
    fn ndcg_matches_hand_computations() {
        // single relevant item at rank 1
        let ranked = list(0, &[7, 1, 2, 3, 4]);
        assert!((ndcg_at_k(&ranked, &set(&[7]), 5).unwrap() - 1.0).abs() < 1e-12);

        // single relevant item at rank 2: 1/log2(3)
        let ranked = list(0, &[9, 7, 2, 3, 4]);
        let got = ndcg_at_k(&ranked, &set(&[7]), 5).unwrap();
        assert!((got - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((got - 0.63093).abs() < 1e-5);

        // relevant at ranks 1 and 3: (1 + 1/2) / (1 + 1/log2(3))
        let ranked = list(0, &[7, 9, 8, 3, 4]);
        let got = ndcg_at_k(&ranked, &set(&[7, 8]), 3).unwrap();
        let want = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.91972).abs() < 1e-5);
    }

    #[test]
    fn rank_candidates_sorts_desc_and_breaks_ties_by_id() {
        let ranked = rank_candidates(3, vec![(5, 0.3), (2, 0.9), (7, 0.3), (1, 0.1)]);
        assert_eq!(ranked.funds, vec![2, 5, 7, 1]);
        assert_eq!(ranked.scores, vec![0.9, 0.3, 0.3, 0.1]);
        assert_eq!(ranked.user, 3);
    }

    #[test]
    fn recall_is_monotone_in_k_and_ndcg_once_the_ideal_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(5..40usize);
            let mut funds: Vec<u32> = (0..n as u32).collect();
            funds.shuffle(&mut rng);
            let ranked = list(0, &funds);
            let n_rel = rng.random_range(1..=4usize);
            let relevant: BTreeSet<u32> =
                funds.choose_multiple(&mut rng, n_rel).copied().collect();
            // ndcg is monotone over cutoffs at or past |relevant|, where the
            // ideal prefix stops growing
            let mut last_recall = 0.0;
            let mut last_ndcg = 0.0;
            for k in n_rel..n {
                let r = recall_at_k(&ranked, &relevant, k).unwrap();
                let g = ndcg_at_k(&ranked, &relevant, k).unwrap();
                assert!((0.0..=1.0 + 1e-12).contains(&r));
                assert!((0.0..=1.0 + 1e-12).contains(&g));
                assert!(r >= last_recall - 1e-12);
                assert!(g >= last_ndcg - 1e-12);
                last_recall = r;
                last_ndcg = g;
            }
            // recall is monotone from k = 1 regardless
            let mut last = 0.0;
            for k in 1..n {
                let r = recall_at_k(&ranked, &relevant, k).unwrap();
                assert!(r >= last - 1e-12);
                last = r;
            }
        }
    }

    #[test]
    fn ndcg_can_dip_while_the_ideal_prefix_still_grows() {
        // hits at ranks 1 and 10: the cutoff-1 score is perfect, the cutoff-2
        // score is not, because the ideal ranking earns a second hit
        let ranked = list(0, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let relevant = set(&[0, 9]);
        let at1 = ndcg_at_k(&ranked, &relevant, 1).unwrap();
        let at2 = ndcg_at_k(&ranked, &relevant, 2).unwrap();
        assert!((at1 - 1.0).abs() < 1e-12);
        assert!(at2 < at1);
    }

    #[test]
    fn metrics_ignore_permutations_below_the_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let n = rng.random_range(10..60usize);
            let mut funds: Vec<u32> = (0..n as u32).collect();
            funds.shuffle(&mut rng);
            let relevant: BTreeSet<u32> =
                funds.choose_multiple(&mut rng, 3).copied().collect();
            let k = rng.random_range(1..n);
            let base = list(0, &funds);
            let r0 = recall_at_k(&base, &relevant, k).unwrap();
            let g0 = ndcg_at_k(&base, &relevant, k).unwrap();
            funds[k..].shuffle(&mut rng);
            let shuffled = list(0, &funds);
            assert_eq!(recall_at_k(&shuffled, &relevant, k).unwrap(), r0);
            assert_eq!(ndcg_at_k(&shuffled, &relevant, k).unwrap(), g0);
        }
    }

    // ── evaluate over synthetic partitions ──

    fn tiny_bundle(n_users: u32, n_funds: u32) -> DatasetBundle {
        // catalog of one type/level; only id bounds matter to evaluate
        DatasetBundle {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            profiles: vec![Vec::new(); n_users as usize],
            triples: Vec::new(),
            catalog: Catalog { fund_type: vec![0; n_funds as usize], type_level: vec![0] },
            latents: Vec::new(),
        }
    }

    fn interaction(user: u32, fund: u32, day: u32, tick: u32) -> Interaction {
        Interaction { user, fund, day, tick }
    }

    #[test]
    fn oracle_scorer_earns_perfect_metrics() {
        let mut bundle = tiny_bundle(6, 20);
        let mut test = Vec::new();
        for u in 0..6u32 {
            bundle.train.push(interaction(u, u, 0, 0));
            test.push(interaction(u, (u + 3) % 20, 5, 0));
            test.push(interaction(u, (u + 9) % 20, 5, 1));
        }
        let relevant_by_user: BTreeMap<u32, BTreeSet<u32>> = (0..6u32)
            .map(|u| (u, set(&[(u + 3) % 20, (u + 9) % 20])))
            .collect();
        let report = evaluate_scores(&bundle, &test, &REPORT_KS, "oracle", |user, cands| {
            let rel = &relevant_by_user[&user];
            Some(cands.iter().map(|f| if rel.contains(f) { 1.0 } else { 0.0 }).collect())
        })
        .unwrap();
        assert_eq!(report.users_evaluated, 6);
        assert_eq!(report.users_skipped, 0);
        for (_, v) in &report.metrics {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn evaluate_matches_a_naive_reimplementation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let n_users = rng.random_range(5..20u32);
            let n_funds = rng.random_range(10..50u32);
            let mut bundle = tiny_bundle(n_users, n_funds);
            let mut test = Vec::new();
            for u in 0..n_users {
                for _ in 0..rng.random_range(0..4) {
                    bundle.train.push(interaction(u, rng.random_range(0..n_funds), 0, 0));
                }
                for t in 0..rng.random_range(0..3) {
                    test.push(interaction(u, rng.random_range(0..n_funds), 5, t));
                }
            }
            let mut table = vec![0.0; (n_users * n_funds) as usize];
            for v in &mut table {
                *v = rng.random::<f64>();
            }
            // quantized scores force ties through the id-based ordering
            for v in &mut table {
                *v = (*v * 8.0).floor() / 8.0;
            }
            let score_of = |u: u32, f: u32| table[(u * n_funds + f) as usize];
            let ks = [1, 3, 5, 10];
            let got = evaluate_scores(&bundle, &test, &ks, "naive-check", |u, cands| {
                Some(cands.iter().map(|&f| score_of(u, f)).collect())
            });

            // independent naive pass
            let history = data::train_history(&bundle.train);
            let empty = BTreeSet::new();
            let mut by_user: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
            for it in &test {
                by_user.entry(it.user).or_default().insert(it.fund);
            }
            let mut sums = vec![0.0; 2 * ks.len()];
            let mut evaluated = 0usize;
            for (&u, funds) in &by_user {
                let hist = history.get(&u).unwrap_or(&empty);
                let rel: BTreeSet<u32> = funds.difference(hist).copied().collect();
                if hist.is_empty() || rel.is_empty() {
                    continue;
                }
                let mut order: Vec<u32> =
                    (0..n_funds).filter(|f| !hist.contains(f)).collect();
                order.sort_by(|a, b| {
                    score_of(u, *b).total_cmp(&score_of(u, *a)).then(a.cmp(b))
                });
                for (j, &k) in ks.iter().enumerate() {
                    let hits =
                        order.iter().take(k).filter(|f| rel.contains(f)).count();
                    sums[2 * j] += hits as f64 / rel.len() as f64;
                    let dcg: f64 = order
                        .iter()
                        .take(k)
                        .enumerate()
                        .filter(|(_, f)| rel.contains(*f))
                        .map(|(i, _)| 1.0 / (i as f64 + 2.0).log2())
                        .sum();
                    let ideal: f64 = (0..k.min(rel.len()))
                        .map(|i| 1.0 / (i as f64 + 2.0).log2())
                        .sum();
                    sums[2 * j + 1] += dcg / ideal;
                }
                evaluated += 1;
            }
            match got {
                Ok(report) => {
                    assert_eq!(report.users_evaluated, evaluated);
                    for (j, &k) in ks.iter().enumerate() {
                        let want_r = sums[2 * j] / evaluated as f64;
                        let want_n = sums[2 * j + 1] / evaluated as f64;
                        assert_eq!(report.metric(&format!("recall@{}", k)), Some(want_r));
                        assert_eq!(report.metric(&format!("ndcg@{}", k)), Some(want_n));
                    }
                }
                Err(_) => assert_eq!(evaluated, 0),
            }
        }
    }

    #[test]
    fn users_without_history_or_fresh_test_funds_are_skipped_and_counted() {
        let mut bundle = tiny_bundle(3, 10);
        // user 0: normal; user 1: no training history; user 2: test fund
        // already in history
        bundle.train.push(interaction(0, 1, 0, 0));
        bundle.train.push(interaction(2, 4, 0, 0));
        let test = vec![
            interaction(0, 5, 5, 0),
            interaction(1, 6, 5, 0),
            interaction(2, 4, 5, 0),
        ];
        let report =
            evaluate_scores(&bundle, &test, &[5], "skips", |_, cands| {
                Some(vec![0.5; cands.len()])
            })
            .unwrap();
        assert_eq!(report.users_evaluated, 1);
        assert_eq!(report.users_skipped, 2);
    }

    #[test]
    fn evaluate_rejects_zero_cutoffs_and_out_of_range_rows() {
        let bundle = tiny_bundle(2, 5);
        let test = vec![interaction(0, 1, 5, 0)];
        assert!(evaluate_scores(&bundle, &test, &[0], "bad", |_, c| Some(vec![0.0; c.len()]))
            .is_err());
        let oob = vec![interaction(0, 99, 5, 0)];
        assert!(evaluate_scores(&bundle, &oob, &[5], "bad", |_, c| Some(vec![0.0; c.len()]))
            .is_err());
    }

    // ── scorer plumbing on a real (untrained) model ──

    fn small_fixture() -> (ModelParams, PopularityTable, FundGraph, DatasetBundle) {
        let spec = SyntheticSpec {
            users: 60,
            funds: 40,
            managers: 4,
            organizations: 5,
            stocks: 10,
            stock_indices: 3,
            days: 5,
            seed: 5,
            profile_dim: 4,
            ..SyntheticSpec::default()
        };
        let bundle = crate::data::generate(&spec).unwrap();
        let graph = build_graph(bundle.entity_counts(), &bundle.triples).unwrap();
        let dims = ModelDims {
            entities: graph.entity_total(),
            funds: bundle.n_funds(),
            types: bundle.catalog.n_types(),
            profile_dim: spec.profile_dim as usize,
            d: 8,
            d_s: 8,
            layers: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelParams::init(dims, 0.2, &mut rng).unwrap();
        let counts = crate::data::fund_counts(&bundle.train, bundle.n_funds());
        let pop = popularity(&counts).unwrap();
        (model, pop, graph, bundle)
    }

    #[test]
    fn scorer_reports_sane_metrics_and_respects_the_conformity_switch() {
        let (model, pop, graph, bundle) = small_fixture();
        let scorer = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        assert!(!scorer.user_rows.is_empty());
        let report = evaluate(&scorer, &bundle, &bundle.test, &REPORT_KS, "full").unwrap();
        let test_users: BTreeSet<u32> = bundle.test.iter().map(|it| it.user).collect();
        assert_eq!(report.users_evaluated + report.users_skipped, test_users.len());
        for (_, v) in &report.metrics {
            assert!((0.0..=1.0).contains(v));
        }

        // with blending off, scores must equal the interest head alone
        let plain = Scorer::build(&model, &pop, &graph, &bundle, 50, true, false).unwrap();
        let (&user, &row) = plain.user_rows.iter().next().unwrap();
        let (_, y_i) = plain.head_scores(row, 7);
        assert_eq!(plain.score_row(row, 7), y_i);
        assert!(plain.row_of(user).is_some());
        assert!(plain.row_of(9999).is_none());
    }

    #[test]
    fn scorer_rejects_a_catalog_of_the_wrong_size() {
        let (model, pop, graph, mut bundle) = small_fixture();
        bundle.catalog.fund_type.push(0);
        let err = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn evaluate_is_deterministic_across_rebuilds() {
        let (model, pop, graph, bundle) = small_fixture();
        let a = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        let b = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        let ra = evaluate(&a, &bundle, &bundle.test, &REPORT_KS, "run").unwrap();
        let rb = evaluate(&b, &bundle, &bundle.test, &REPORT_KS, "run").unwrap();
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
    }

    // ── probes ──

    #[test]
    fn probe_separates_clean_clusters_and_flatlines_on_shuffled_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300usize {
            let class = i % 3;
            let mut row = vec![0.0; 8];
            for (j, v) in row.iter_mut().enumerate() {
                let center = if j % 3 == class { 2.0 } else { -1.0 };
                *v = center + 0.3 * (rng.random::<f64>() - 0.5);
            }
            features.push(row);
            labels.push(class);
        }
        let acc = linear_probe_accuracy(&features, &labels, 3, &mut rng).unwrap();
        assert!(acc >= 0.9, "separable clusters probed at {}", acc);

        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut rng);
        let chance = linear_probe_accuracy(&features, &shuffled, 3, &mut rng).unwrap();
        assert!((0.1..=0.6).contains(&chance), "shuffled control at {}", chance);
    }

    #[test]
    fn probe_requires_enough_rows_and_valid_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let few = vec![vec![0.0; 4]; 5];
        assert!(linear_probe_accuracy(&few, &[0, 1, 0, 1, 0], 2, &mut rng).is_err());
        let feats = vec![vec![0.0; 4]; 12];
        let bad_labels = vec![7; 12];
        assert!(linear_probe_accuracy(&feats, &bad_labels, 3, &mut rng).is_err());
    }

    #[test]
    fn probe_report_is_deterministic_and_complete() {
        let (model, pop, graph, bundle) = small_fixture();
        let scorer = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        let a = probe_disentanglement(&scorer, &bundle, 41).unwrap();
        let b = probe_disentanglement(&scorer, &bundle, 41).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.users_probed, scorer.user_rows.len());
        assert_eq!(a.classes, 3);
        for v in [a.risk_accuracy, a.interest_accuracy, a.shuffled_accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
        for v in [a.conformity_head_top_gamma, a.interest_head_top_gamma] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn probe_refuses_datasets_without_latents() {
        let (model, pop, graph, mut bundle) = small_fixture();
        let scorer = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        bundle.latents.clear();
        assert!(probe_disentanglement(&scorer, &bundle, 1).is_err());
    }

    // ── export ──

    #[test]
    fn export_writes_three_lines_per_user_and_reexports_identically() {
        let (model, pop, graph, bundle) = small_fixture();
        let scorer = Scorer::build(&model, &pop, &graph, &bundle, 50, true, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.tsv");
        export_embeddings(&scorer, &bundle, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines.len(), 1 + 3 * scorer.user_rows.len());
        let first = lines[1].split('\t').collect::<Vec<_>>();
        assert_eq!(first.len(), 4);
        assert_eq!(first[1], "I");
        assert_eq!(lines[2].split('\t').nth(1), Some("R"));
        assert_eq!(lines[3].split('\t').nth(1), Some("C"));
        assert_eq!(first[2].split(',').count(), scorer.d);
        let label: u32 = first[3].parse().unwrap();
        let user: u32 = first[0].parse().unwrap();
        assert_eq!(label, bundle.latents[user as usize].risk_level);

        let bytes = std::fs::read(&path).unwrap();
        export_embeddings(&scorer, &bundle, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn export_with_no_scored_users_leaves_only_the_header() {
        let (_, pop, _, bundle) = small_fixture();
        let scorer = Scorer {
            d: 4,
            d_s: 4,
            n_funds: bundle.n_funds(),
            user_rows: BTreeMap::new(),
            user_conformity: Vec::new(),
            user_interest: Vec::new(),
            item_conformity: Vec::new(),
            item_interest: Vec::new(),
            aspect_interest: Vec::new(),
            aspect_risk: Vec::new(),
            aspect_conformity: Vec::new(),
            gamma: pop.gamma,
            blend_conformity: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        export_embeddings(&scorer, &bundle, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# user\taspect\tembedding\tlabel\n");
    }

    #[test]
    fn exported_labels_come_from_latents() {
        let bundle = tiny_bundle(1, 3);
        let mut bundle = bundle;
        bundle.latents = vec![UserLatent { archetype: 0, risk_level: 2, lambda: 0.5 }];
        let scorer = Scorer {
            d: 2,
            d_s: 2,
            n_funds: 3,
            user_rows: BTreeMap::from([(0u32, 0usize)]),
            user_conformity: vec![0.0; 2],
            user_interest: vec![0.0; 2],
            item_conformity: vec![0.0; 6],
            item_interest: vec![0.0; 6],
            aspect_interest: vec![0.25, -0.5],
            aspect_risk: vec![1.0, 2.0],
            aspect_conformity: vec![-3.5, 0.125],
            gamma: vec![0.5; 3],
            blend_conformity: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.tsv");
        export_embeddings(&scorer, &bundle, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("0\tR\t1,2\t2\n"));
        assert!(text.contains("0\tC\t-3.5,0.125\t2\n"));
    }
}
