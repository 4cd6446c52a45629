//! Mini-batch optimization of the blended matching objective: negative
//! sampling, Adam, per-epoch validation with best-checkpoint retention, and
//! exact ablation switches.
//!
//! A batch is a set of users. Per batch the fund table is re-encoded, each
//! user is disentangled once, and every training interaction of those users
//! becomes a positive instance joined by `k` sampled negatives. The risk
//! alignment term runs over the batch's (x^R, x^T) pairs and is divided by
//! the batch user count so its scale tracks the per-instance losses.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle};
use crate::disentangle::{disentangle_scored, gather_behavior, BehaviorSequence, N_MAX};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, Scorer};
use crate::graph::{build_graph, FundGraph};
use crate::model::{fund_rows, ModelDims, ModelParams};
use crate::objectives::{
    popularity, risk_contrastive_loss, total_loss, type_repr, weighted_losses, LossValues,
    PopularityTable,
};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

// ── configuration ───────────────────────────────────────────────────────────

/// Training knobs. Every field is optional in config files and falls back to
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Negatives sampled per positive interaction.
    pub k_negatives: usize,
    /// Weight of the risk alignment term in the total loss.
    pub epsilon: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Embedding width.
    pub d: usize,
    /// Scoring-head output width.
    pub d_s: usize,
    /// Graph convolution layers.
    pub layers: usize,
    /// Behavior-sequence window (most recent events kept).
    pub n_max: usize,
    pub seed: u64,
    /// Drop the conformity loss and predict with the interest head alone.
    pub disable_conformity: bool,
    /// Set the risk term's weight to zero (its parameters stop moving).
    pub disable_risk: bool,
    /// Score from raw fund embeddings, bypassing graph convolution.
    pub disable_graph: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            k_negatives: 4,
            epsilon: 0.1,
            tau: 0.2,
            d: 64,
            d_s: 64,
            layers: 2,
            n_max: N_MAX,
            seed: 17,
            disable_conformity: false,
            disable_risk: false,
            disable_graph: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArg(msg));
        if self.k_negatives == 0 {
            return bad("k_negatives must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("d", self.d), ("d_s", self.d_s), ("layers", self.layers)] {
            if v == 0 {
                return bad(format!("{} must be at least 1", name));
            }
        }
        if self.n_max == 0 || self.n_max > N_MAX {
            return bad(format!("n_max must be between 1 and {}, got {}", N_MAX, self.n_max));
        }
        Ok(())
    }

    /// Tag used in reports: "full" or the joined ablation flags.
    pub fn variant_name(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_conformity {
            parts.push("no_conformity");
        }
        if self.disable_risk {
            parts.push("no_risk");
        }
        if self.disable_graph {
            parts.push("no_graph");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

// ── optimizer ───────────────────────────────────────────────────────────────

/// Adam with one moment slot per tensor. `begin_step` advances the shared
/// bias-correction counter; call it once per batch before the updates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) -> Result<()> {
        let (m, v) = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| Error::InvalidArg(format!("optimizer has no slot {}", slot)))?;
        if param.len() != m.len() || grad.len() != m.len() {
            return Err(Error::Shape(format!(
                "slot {} holds {} moments, got {} params and {} grads",
                slot,
                m.len(),
                param.len(),
                grad.len()
            )));
        }
        if self.t == 0 {
            return Err(Error::InvalidArg("call begin_step before update".into()));
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ── negative sampling ───────────────────────────────────────────────────────

/// Candidate funds a user has never interacted with in training.
pub fn negative_pool(history: &BTreeSet<u32>, n_funds: u32) -> Vec<u32> {
    (0..n_funds).filter(|f| !history.contains(f)).collect()
}

/// Uniform draw of `k` distinct funds from the pool; pools of at most `k`
/// come back whole. An empty pool yields an empty vec so the caller can skip
/// the instance and count the skip.
pub fn sample_negatives(pool: &[u32], k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let j = rng.random_range(0..pool.len());
        if !chosen.contains(&j) {
            chosen.push(j);
        }
    }
    chosen.iter().map(|&j| pool[j]).collect()
}

// ── batch assembly ──────────────────────────────────────────────────────────

/// Immutable per-dataset training state shared across epochs.
pub struct TrainContext<'a> {
    pub bundle: &'a DatasetBundle,
    pub graph: &'a FundGraph,
    pub popularity: &'a PopularityTable,
    pub sequences: BTreeMap<u32, BehaviorSequence>,
    /// Every training interaction per user, in time order, with multiplicity.
    pub positives: BTreeMap<u32, Vec<u32>>,
    /// Negative-sampling pool per user.
    pub pools: BTreeMap<u32, Vec<u32>>,
}

impl<'a> TrainContext<'a> {
    pub fn new(
        bundle: &'a DatasetBundle,
        graph: &'a FundGraph,
        popularity: &'a PopularityTable,
        n_max: usize,
    ) -> Result<TrainContext<'a>> {
        let sequences = data::build_sequences(&bundle.train, &bundle.catalog, n_max)?;
        let history = data::train_history(&bundle.train);
        let mut sorted = bundle.train.clone();
        sorted.sort_by_key(|i| (i.day, i.tick, i.user, i.fund));
        let mut positives: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for it in &sorted {
            positives.entry(it.user).or_default().push(it.fund);
        }
        let n_funds = bundle.n_funds() as u32;
        let pools = history
            .iter()
            .map(|(&u, h)| (u, negative_pool(h, n_funds)))
            .collect();
        Ok(TrainContext { bundle, graph, popularity, sequences, positives, pools })
    }

    pub fn users(&self) -> Vec<u32> {
        self.sequences.keys().copied().collect()
    }
}

struct BatchPlan {
    users: Vec<u32>,
    instance_user_row: Vec<usize>,
    instance_fund: Vec<usize>,
    labels: Vec<f64>,
    gammas: Vec<f64>,
    skipped: usize,
}

fn plan_batch(
    ctx: &TrainContext,
    batch_users: &[u32],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> BatchPlan {
    let mut plan = BatchPlan {
        users: batch_users.to_vec(),
        instance_user_row: Vec::new(),
        instance_fund: Vec::new(),
        labels: Vec::new(),
        gammas: Vec::new(),
        skipped: 0,
    };
    for (row, user) in batch_users.iter().enumerate() {
        let pool = &ctx.pools[user];
        for &fund in &ctx.positives[user] {
            if pool.is_empty() {
                plan.skipped += 1;
                continue;
            }
            plan.instance_user_row.push(row);
            plan.instance_fund.push(fund as usize);
            plan.labels.push(1.0);
            plan.gammas.push(ctx.popularity.gamma(fund));
            for neg in sample_negatives(pool, k, rng) {
                plan.instance_user_row.push(row);
                plan.instance_fund.push(neg as usize);
                plan.labels.push(0.0);
                plan.gammas.push(ctx.popularity.gamma(neg));
            }
        }
    }
    plan
}

// ── one optimization step ───────────────────────────────────────────────────

fn batch_step(
    model: &mut ModelParams,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    adam: &mut Adam,
    plan: &BatchPlan,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);
    let funds = fund_rows(&mut tape, &vars, ctx.graph, model.dims.funds, !cfg.disable_graph)?;
    let transformed = tape.matmul(funds, vars.disentangle.w_shared)?;
    let scored_table = tape.tanh(transformed)?;

    let mut interest_rows = Vec::with_capacity(plan.users.len());
    let mut conformity_rows = Vec::with_capacity(plan.users.len());
    let mut risk_rows = Vec::with_capacity(plan.users.len());
    let mut type_rows = Vec::with_capacity(plan.users.len());
    for &user in &plan.users {
        let seq = &ctx.sequences[&user];
        let x = gather_behavior(&mut tape, funds, seq)?;
        let scored = gather_behavior(&mut tape, scored_table, seq)?;
        let aspects = disentangle_scored(&mut tape, x, scored, &vars.disentangle)?;
        let profile = ctx.bundle.profiles.get(user as usize).cloned().ok_or_else(|| {
            Error::Data(format!("user {} has interactions but no profile row", user))
        })?;
        let profile = tape.constant(Tensor::vector(profile)?);
        let zi = tape.concat(profile, aspects.x_interest)?;
        interest_rows.push(crate::objectives::ffn_vec(&mut tape, zi, &vars.heads.interest_user)?);
        if !cfg.disable_conformity {
            let zc = tape.concat(profile, aspects.x_conformity)?;
            conformity_rows
                .push(crate::objectives::ffn_vec(&mut tape, zc, &vars.heads.conformity_user)?);
        }
        if !cfg.disable_risk {
            risk_rows.push(aspects.x_risk);
            type_rows.push(type_repr(&mut tape, &vars.risk, &seq.type_ids)?);
        }
    }

    let user_rows = Arc::new(plan.instance_user_row.clone());
    let fund_rows_idx = Arc::new(plan.instance_fund.clone());
    let labels = Arc::new(plan.labels.clone());
    let score_head = |tape: &mut Tape,
                      user_vecs: &[crate::tensor::Var],
                      item_ffn: &crate::objectives::FeedForwardVars|
     -> Result<crate::tensor::Var> {
        let users = tape.stack_rows(user_vecs)?;
        let u = tape.gather(users, Arc::clone(&user_rows))?;
        let items = crate::objectives::ffn_rows(tape, funds, item_ffn)?;
        let v = tape.gather(items, Arc::clone(&fund_rows_idx))?;
        let logits = tape.rowwise_dot(u, v)?;
        tape.sigmoid(logits)
    };

    let y_interest = score_head(&mut tape, &interest_rows, &vars.heads.interest_item)?;
    let (l_interest, l_conformity) = if cfg.disable_conformity {
        let ce = tape.bce_each(y_interest, Arc::clone(&labels))?;
        let inv_gamma =
            tape.constant(Tensor::vector(plan.gammas.iter().map(|g| 1.0 - g).collect())?);
        let weighted = tape.mul(ce, inv_gamma)?;
        let li = tape.mean(weighted)?;
        let zero = tape.constant(Tensor::scalar(0.0)?);
        (li, zero)
    } else {
        let y_conformity = score_head(&mut tape, &conformity_rows, &vars.heads.conformity_item)?;
        let (lc_each, li_each) =
            weighted_losses(&mut tape, y_conformity, y_interest, labels, &plan.gammas)?;
        (tape.mean(li_each)?, tape.mean(lc_each)?)
    };

    let (l_risk, epsilon) = if cfg.disable_risk {
        (tape.constant(Tensor::scalar(0.0)?), 0.0)
    } else {
        let xr = tape.stack_rows(&risk_rows)?;
        let xt = tape.stack_rows(&type_rows)?;
        let sum = risk_contrastive_loss(&mut tape, xr, xt, cfg.tau)?;
        (tape.scale(sum, 1.0 / plan.users.len() as f64)?, cfg.epsilon)
    };

    let breakdown = total_loss(&mut tape, l_interest, l_conformity, l_risk, epsilon)?;
    let values = breakdown.snapshot(&tape);
    if ![values.interest, values.conformity, values.risk, values.total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite loss (interest {}, conformity {}, risk {})",
            values.interest, values.conformity, values.risk
        )));
    }

    tape.backward(breakdown.total)?;
    adam.begin_step();
    let handles = vars.ordered();
    for (slot, ((_, tensor), var)) in
        model.named_tensors_mut().into_iter().zip(handles).enumerate()
    {
        // leaves outside the active graph (ablated paths) carry no gradient
        // buffer; skipping them equals an exact zero-gradient update
        if let Some(grad) = tape.grad(var) {
            adam.update(slot, &mut tensor.data, grad)?;
        }
    }
    Ok(values)
}

// ── epochs ──────────────────────────────────────────────────────────────────

/// Per-epoch training outcome.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub losses: LossValues,
    pub batches: usize,
    pub skipped_instances: usize,
}

/// One full pass over the training users in shuffled batches. Returns the
/// batch-mean loss terms; aborts with diagnostics on a non-finite loss.
pub fn train_epoch(
    model: &mut ModelParams,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    let mut users = ctx.users();
    users.shuffle(rng);
    let mut sums = [0.0; 4];
    let mut batches = 0usize;
    let mut skipped = 0usize;
    for (batch, chunk) in users.chunks(cfg.batch_size).enumerate() {
        let plan = plan_batch(ctx, chunk, cfg.k_negatives, rng);
        skipped += plan.skipped;
        if plan.instance_fund.is_empty() {
            continue;
        }
        let values = batch_step(model, ctx, cfg, adam, &plan).map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("epoch {} batch {}: {}", epoch, batch, msg))
            }
            other => other,
        })?;
        sums[0] += values.interest;
        sums[1] += values.conformity;
        sums[2] += values.risk;
        sums[3] += values.total;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Data("no trainable batch: every instance was skipped".into()));
    }
    let n = batches as f64;
    Ok(EpochStats {
        losses: LossValues {
            interest: sums[0] / n,
            conformity: sums[1] / n,
            risk: sums[2] / n,
            total: sums[3] / n,
            epsilon: if cfg.disable_risk { 0.0 } else { cfg.epsilon },
        },
        batches,
        skipped_instances: skipped,
    })
}

// ── fit and checkpointing ───────────────────────────────────────────────────

/// One line of training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub val_recall10: f64,
    pub skipped_instances: usize,
}

/// Self-describing training artifact; loads back bitwise identical.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Epoch whose parameters are stored (0 = initialization).
    pub epoch: usize,
    pub model: ModelParams,
    pub popularity: PopularityTable,
    /// Validation metrics of the stored parameters.
    pub metrics: MetricReport,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Final checkpoint plus the per-epoch history that produced it.
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Train for `cfg.epochs` epochs, validating after each one, and return the
/// checkpoint with the best validation Recall@10 (ties keep the earliest).
/// `progress` fires after every epoch. Deterministic given the seed.
pub fn fit<F: FnMut(&EpochLog)>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<FitResult> {
    cfg.validate()?;
    let graph = build_graph(bundle.entity_counts(), &bundle.triples)?;
    let counts = data::fund_counts(&bundle.train, bundle.n_funds());
    let pop = popularity(&counts)?;
    let ctx = TrainContext::new(bundle, &graph, &pop, cfg.n_max)?;
    let profile_dim = bundle.profiles.first().map(Vec::len).ok_or_else(|| {
        Error::Data("dataset has no user profiles".into())
    })?;
    if bundle.profiles.iter().any(|p| p.len() != profile_dim) {
        return Err(Error::Data("user profiles must share one width".into()));
    }
    let dims = ModelDims {
        entities: graph.entity_total(),
        funds: bundle.n_funds(),
        types: bundle.catalog.n_types(),
        profile_dim,
        d: cfg.d,
        d_s: cfg.d_s,
        layers: cfg.layers,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::init(dims, cfg.tau, &mut rng)?;
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.data.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let variant = cfg.variant_name();

    let validate = |m: &ModelParams| -> Result<MetricReport> {
        let scorer = Scorer::build(
            m,
            &pop,
            &graph,
            bundle,
            cfg.n_max,
            !cfg.disable_graph,
            !cfg.disable_conformity,
        )?;
        eval::evaluate(&scorer, bundle, &bundle.validation, &eval::REPORT_KS, &variant)
    };

    let mut best_metrics = validate(&model)?;
    let mut best_recall = best_metrics.metric("recall@10").unwrap_or(0.0);
    let mut best_model = model.clone();
    let mut best_epoch = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(&mut model, &ctx, cfg, &mut adam, &mut rng, epoch)?;
        let report = validate(&model)?;
        let recall = report.metric("recall@10").unwrap_or(0.0);
        let log = EpochLog {
            epoch,
            losses: stats.losses,
            val_recall10: recall,
            skipped_instances: stats.skipped_instances,
        };
        progress(&log);
        history.push(log);
        if recall > best_recall {
            best_recall = recall;
            best_metrics = report;
            best_model = model.clone();
            best_epoch = epoch;
        }
    }

    Ok(FitResult {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            epoch: best_epoch,
            model: best_model,
            popularity: pop,
            metrics: best_metrics,
        },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    // ── config ──

    #[test]
    fn config_defaults_parse_from_empty_json_and_reject_unknown_fields() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.k_negatives, 4);
        assert_eq!(cfg.n_max, 50);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.variant_name(), "full");

        let partial: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "disable_risk": true}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert!(partial.disable_risk);
        assert_eq!(partial.variant_name(), "no_risk");

        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rte": 0.1}"#).is_err());
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let cases: Vec<(TrainConfig, &str)> = vec![
            (TrainConfig { k_negatives: 0, ..TrainConfig::default() }, "k_negatives"),
            (TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }, "learning_rate"),
            (TrainConfig { learning_rate: -0.1, ..TrainConfig::default() }, "learning_rate"),
            (TrainConfig { epsilon: -1.0, ..TrainConfig::default() }, "epsilon"),
            (TrainConfig { tau: 0.0, ..TrainConfig::default() }, "tau"),
            (TrainConfig { batch_size: 0, ..TrainConfig::default() }, "batch_size"),
            (TrainConfig { d: 0, ..TrainConfig::default() }, "d"),
            (TrainConfig { n_max: 0, ..TrainConfig::default() }, "n_max"),
            (TrainConfig { n_max: 51, ..TrainConfig::default() }, "n_max"),
        ];
        for (cfg, field) in cases {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(field), "{} not named in: {}", field, err);
        }
        // epsilon = 0 is a legitimate ablation setting
        assert!(TrainConfig { epsilon: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    // ── optimizer ──

    #[test]
    fn adam_matches_the_reference_update_rule() {
        let mut adam = Adam::new(0.1, &[1]);
        let mut p = [1.0f64];
        let grads = [0.5f64, -0.25];
        // independent recomputation of two steps
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut want = 1.0f64;
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            want -= 0.1 * m_hat / (v_hat.sqrt() + eps);
        }
        for g in grads {
            adam.begin_step();
            adam.update(0, &mut p, &[g]).unwrap();
        }
        assert!((p[0] - want).abs() < 1e-15, "{} vs {}", p[0], want);
    }

    #[test]
    fn adam_walks_into_a_quadratic_bowl() {
        let target = [0.3, -0.7, 1.1];
        let mut adam = Adam::new(0.05, &[3]);
        let mut x = [0.0f64; 3];
        for _ in 0..500 {
            let grad: Vec<f64> = x.iter().zip(&target).map(|(xi, c)| 2.0 * (xi - c)).collect();
            adam.begin_step();
            adam.update(0, &mut x, &grad).unwrap();
        }
        for (xi, c) in x.iter().zip(&target) {
            assert!((xi - c).abs() < 1e-3, "{} vs {}", xi, c);
        }
    }

    #[test]
    fn adam_rejects_mismatched_slots() {
        let mut adam = Adam::new(0.1, &[2]);
        adam.begin_step();
        assert!(adam.update(1, &mut [0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(adam.update(0, &mut [0.0], &[0.0]).is_err());
        let mut fresh = Adam::new(0.1, &[1]);
        assert!(fresh.update(0, &mut [0.0], &[0.0]).is_err(), "update before begin_step");
    }

    // ── negative sampling ──

    #[test]
    fn negatives_clamp_to_the_pool_and_stay_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_negatives(&[7], 1, &mut rng), vec![7]);
        let pool = [2, 4, 6];
        let all = sample_negatives(&pool, 10, &mut rng);
        assert_eq!(all, vec![2, 4, 6]);
        assert!(sample_negatives(&[], 4, &mut rng).is_empty());

        let pool: Vec<u32> = (0..50).collect();
        for _ in 0..200 {
            let draw = sample_negatives(&pool, 4, &mut rng);
            assert_eq!(draw.len(), 4);
            let mut sorted = draw.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "duplicate in {:?}", draw);
            assert!(draw.iter().all(|f| pool.contains(f)));
        }
    }

    #[test]
    fn negative_sampling_is_seed_deterministic_and_roughly_uniform() {
        let pool: Vec<u32> = (0..20).collect();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert_eq!(sample_negatives(&pool, 3, &mut a), sample_negatives(&pool, 3, &mut b));
        }
        let mut counts = [0u32; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4000 {
            for f in sample_negatives(&pool, 3, &mut rng) {
                counts[f as usize] += 1;
            }
        }
        // 4000 draws × 3/20 → expect 600 each; allow a wide band
        for (f, &c) in counts.iter().enumerate() {
            assert!((450..=750).contains(&c), "fund {} drawn {} times", f, c);
        }
    }

    #[test]
    fn pool_excludes_the_history() {
        let history: BTreeSet<u32> = [1, 3].into_iter().collect();
        assert_eq!(negative_pool(&history, 5), vec![0, 2, 4]);
        let full: BTreeSet<u32> = (0..5).collect();
        assert!(negative_pool(&full, 5).is_empty());
    }

    // ── training on a small planted dataset ──

    fn rig(bundle: &DatasetBundle) -> (FundGraph, PopularityTable) {
        let graph = build_graph(bundle.entity_counts(), &bundle.triples).unwrap();
        let counts = data::fund_counts(&bundle.train, bundle.n_funds());
        (graph, popularity(&counts).unwrap())
    }

    fn init_parts(
        bundle: &DatasetBundle,
        graph: &FundGraph,
        cfg: &TrainConfig,
    ) -> (ModelParams, Adam, ChaCha8Rng) {
        let dims = ModelDims {
            entities: graph.entity_total(),
            funds: bundle.n_funds(),
            types: bundle.catalog.n_types(),
            profile_dim: bundle.profiles[0].len(),
            d: cfg.d,
            d_s: cfg.d_s,
            layers: cfg.layers,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = ModelParams::init(dims, cfg.tau, &mut rng).unwrap();
        let sizes: Vec<usize> =
            model.named_tensors().iter().map(|(_, t)| t.data.len()).collect();
        let adam = Adam::new(cfg.learning_rate, &sizes);
        (model, adam, rng)
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            users: 60,
            funds: 40,
            managers: 4,
            organizations: 5,
            stocks: 10,
            stock_indices: 3,
            days: 5,
            seed: 11,
            profile_dim: 4,
            ..SyntheticSpec::default()
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            d: 8,
            d_s: 8,
            layers: 1,
            seed: 21,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_with_zero_epochs_is_a_deterministic_initialized_baseline() {
        let bundle = crate::data::generate(&small_spec()).unwrap();
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let a = fit(&bundle, &cfg, |_| {}).unwrap();
        let b = fit(&bundle, &cfg, |_| {}).unwrap();
        assert_eq!(a.checkpoint.epoch, 0);
        assert!(a.history.is_empty());
        assert_eq!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&b.checkpoint).unwrap()
        );
    }

    #[test]
    fn fit_is_deterministic_across_runs_with_one_seed() {
        let bundle = crate::data::generate(&small_spec()).unwrap();
        let cfg = small_config();
        let a = fit(&bundle, &cfg, |_| {}).unwrap();
        let b = fit(&bundle, &cfg, |_| {}).unwrap();
        assert_eq!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&b.checkpoint).unwrap()
        );
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.losses, y.losses);
            assert_eq!(x.val_recall10, y.val_recall10);
        }

        let other = fit(&bundle, &TrainConfig { seed: 22, ..cfg }, |_| {}).unwrap();
        assert_ne!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&other.checkpoint).unwrap()
        );
    }

    #[test]
    fn ablation_flags_freeze_their_exclusive_parameters() {
        let bundle = crate::data::generate(&small_spec()).unwrap();
        let (graph, pop) = rig(&bundle);
        // names of tensors whose bits moved over one training epoch
        let changed_after = |cfg: &TrainConfig| -> (BTreeSet<String>, EpochStats) {
            let ctx = TrainContext::new(&bundle, &graph, &pop, cfg.n_max).unwrap();
            let (mut model, mut adam, mut rng) = init_parts(&bundle, &graph, cfg);
            let init = model.clone();
            let stats = train_epoch(&mut model, &ctx, cfg, &mut adam, &mut rng, 1).unwrap();
            let trained = model.named_tensors();
            let set = init
                .named_tensors()
                .iter()
                .zip(&trained)
                .filter(|((_, t0), (_, t1))| {
                    t0.data.iter().zip(&t1.data).any(|(a, b)| a.to_bits() != b.to_bits())
                })
                .map(|((name, _), _)| name.clone())
                .collect();
            (set, stats)
        };

        let base = small_config();
        let risk_names = ["risk.", "disentangle.w_risk"];
        let conformity_names = ["heads.conformity_", "disentangle.w_conformity"];
        let graph_names = ["embed.layer"];
        let touches = |set: &BTreeSet<String>, prefixes: &[&str]| {
            set.iter().any(|n| prefixes.iter().any(|p| n.starts_with(p)))
        };
        let covers = |set: &BTreeSet<String>, prefixes: &[&str]| {
            prefixes.iter().all(|p| set.iter().any(|n| n.starts_with(p)))
        };

        let (full, _) = changed_after(&base);
        assert!(covers(&full, &risk_names), "full run left risk parameters untouched");
        assert!(covers(&full, &conformity_names));
        assert!(covers(&full, &graph_names));

        let (no_risk, stats) = changed_after(&TrainConfig { disable_risk: true, ..base.clone() });
        assert!(!touches(&no_risk, &risk_names), "changed: {:?}", no_risk);
        assert!(no_risk.contains("embed.h0"), "ablation must not stop training");
        assert!(covers(&no_risk, &conformity_names));
        assert_eq!(stats.losses.risk, 0.0);
        assert_eq!(stats.losses.epsilon, 0.0);

        let (no_conf, stats) =
            changed_after(&TrainConfig { disable_conformity: true, ..base.clone() });
        assert!(!touches(&no_conf, &conformity_names), "changed: {:?}", no_conf);
        assert!(no_conf.contains("embed.h0"));
        assert!(covers(&no_conf, &risk_names));
        assert_eq!(stats.losses.conformity, 0.0);

        let (no_graph, _) = changed_after(&TrainConfig { disable_graph: true, ..base });
        assert!(!touches(&no_graph, &graph_names), "changed: {:?}", no_graph);
        assert!(no_graph.contains("embed.h0"));
        assert!(covers(&no_graph, &risk_names));
        assert!(covers(&no_graph, &conformity_names));
    }

    #[test]
    fn one_batch_overfit_collapses_the_loss() {
        // 2 users × 16 training days = 32 interactions in a single batch.
        // The users sit on different risk levels, so their fund-type profiles
        // are distinct and every loss term can actually reach its optimum;
        // same-level users would share a type profile and leave the
        // contrastive term with an irreducible ln 2 per duplicate.
        let spec = SyntheticSpec {
            users: 2,
            funds: 16,
            managers: 2,
            organizations: 3,
            stocks: 6,
            stock_indices: 2,
            days: 18,
            seed: 4,
            profile_dim: 4,
            ..SyntheticSpec::default()
        };
        let bundle = crate::data::generate(&spec).unwrap();
        assert_eq!(bundle.train.len(), 32);
        assert_ne!(
            bundle.latents[0].risk_level, bundle.latents[1].risk_level,
            "fixture seed must plant the two users on different levels"
        );
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 32,
            learning_rate: 0.02,
            d: 8,
            d_s: 8,
            layers: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        let (graph, pop) = rig(&bundle);
        let ctx = TrainContext::new(&bundle, &graph, &pop, cfg.n_max).unwrap();
        let (mut model, mut adam, mut rng) = init_parts(&bundle, &graph, &cfg);
        let mut first = None;
        let mut last = 0.0;
        for epoch in 1..=200 {
            let stats =
                train_epoch(&mut model, &ctx, &cfg, &mut adam, &mut rng, epoch).unwrap();
            first.get_or_insert(stats.losses.total);
            last = stats.losses.total;
        }
        let first = first.unwrap();
        assert!(
            last < 0.1 * first,
            "loss went from {} to {} over 200 one-batch epochs",
            first,
            last
        );
    }

    #[test]
    fn training_beats_the_random_baseline_on_planted_data() {
        let spec = SyntheticSpec {
            users: 150,
            funds: 40,
            managers: 4,
            organizations: 5,
            stocks: 10,
            stock_indices: 3,
            days: 8,
            seed: 29,
            profile_dim: 4,
            ..SyntheticSpec::default()
        };
        let bundle = crate::data::generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 64,
            learning_rate: 1e-2,
            d: 16,
            d_s: 16,
            layers: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let baseline = fit(&bundle, &TrainConfig { epochs: 0, ..cfg.clone() }, |_| {})
            .unwrap()
            .checkpoint;
        let trained = fit(&bundle, &cfg, |_| {}).unwrap().checkpoint;
        let b = baseline.metrics.metric("recall@10").unwrap();
        let t = trained.metrics.metric("recall@10").unwrap();
        assert!(t > b, "trained recall@10 {} vs baseline {}", t, b);
    }

    #[test]
    fn checkpoints_round_trip_bitwise_and_check_their_version() {
        let bundle = crate::data::generate(&small_spec()).unwrap();
        let cfg = TrainConfig { epochs: 1, ..small_config() };
        let result = fit(&bundle, &cfg, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        result.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&result.checkpoint).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );

        let mut tampered = loaded;
        tampered.version = 99;
        tampered.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{}", err);
    }

    #[test]
    fn non_finite_parameters_abort_with_batch_diagnostics() {
        let bundle = crate::data::generate(&small_spec()).unwrap();
        let cfg = small_config();
        let (graph, pop) = rig(&bundle);
        let ctx = TrainContext::new(&bundle, &graph, &pop, cfg.n_max).unwrap();
        let (mut model, mut adam, mut rng) = init_parts(&bundle, &graph, &cfg);
        model.embed.h0.data[0] = f64::NAN;
        let err = train_epoch(&mut model, &ctx, &cfg, &mut adam, &mut rng, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch"), "{}", err);
        assert!(err.contains("non-finite"), "{}", err);
    }
}
