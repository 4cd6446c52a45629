//! The full parameter set and the forward paths shared by training and
//! evaluation: entity encoding, per-user aspect extraction, and head scoring.

use serde::{Deserialize, Serialize};

use crate::disentangle::{DisentangleParams, DisentangleVars};
use crate::error::{Error, Result};
use crate::graph::{ConvLayerVars, FundGraph, GraphConvParams};
use crate::objectives::{FeedForward, FeedForwardVars, HeadParams, HeadVars, RiskSignalParams, RiskSignalVars};
use crate::tensor::{Tape, Tensor, Var};

/// Shape card for the whole model; embedded in checkpoints so a loaded file
/// is self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub entities: usize,
    pub funds: usize,
    pub types: usize,
    pub profile_dim: usize,
    pub d: usize,
    pub d_s: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("entities", self.entities),
            ("funds", self.funds),
            ("types", self.types),
            ("profile_dim", self.profile_dim),
            ("d", self.d),
            ("d_s", self.d_s),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("model dims: {} must be at least 1", name)));
            }
        }
        if self.funds > self.entities {
            return Err(Error::InvalidArg(format!(
                "model dims: {} funds exceed {} entities",
                self.funds, self.entities
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor, grouped by stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embed: GraphConvParams,
    pub disentangle: DisentangleParams,
    pub risk: RiskSignalParams,
    pub heads: HeadParams,
}

impl ModelParams {
    /// Fresh parameters; each stage draws from the shared stream in a fixed
    /// order, so one seed pins the whole model.
    pub fn init<R: rand::Rng>(dims: ModelDims, tau: f64, rng: &mut R) -> Result<ModelParams> {
        dims.validate()?;
        Ok(ModelParams {
            dims,
            embed: GraphConvParams::init(dims.entities, dims.d, dims.layers, rng),
            disentangle: DisentangleParams::init(dims.d, rng),
            risk: RiskSignalParams::init(dims.types, dims.d, tau, rng),
            heads: HeadParams::init(dims.profile_dim, dims.d, dims.d_s, rng),
        })
    }

    /// All tensors with stable dotted names, in Adam slot order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.h0".into(), &self.embed.h0));
        for (i, layer) in self.embed.layers.iter().enumerate() {
            out.push((format!("embed.layer{}.w_self", i), &layer.w_self));
            for (r, w) in layer.w_rel.iter().enumerate() {
                out.push((format!("embed.layer{}.w_rel{}", i, r), w));
            }
        }
        out.push(("disentangle.w_shared".into(), &self.disentangle.w_shared));
        out.push(("disentangle.w_interest".into(), &self.disentangle.w_interest));
        out.push(("disentangle.w_risk".into(), &self.disentangle.w_risk));
        out.push(("disentangle.w_conformity".into(), &self.disentangle.w_conformity));
        out.push(("risk.phi".into(), &self.risk.phi));
        for (name, f) in [("risk.ffn", &self.risk.ffn)] {
            push_ffn(&mut out, name, f);
        }
        for (name, f) in [
            ("heads.conformity_user", &self.heads.conformity_user),
            ("heads.conformity_item", &self.heads.conformity_item),
            ("heads.interest_user", &self.heads.interest_user),
            ("heads.interest_item", &self.heads.interest_item),
        ] {
            push_ffn(&mut out, name, f);
        }
        out
    }

    /// Mutable twin of [`named_tensors`](Self::named_tensors); identical
    /// names and order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embed.h0".into(), &mut self.embed.h0));
        for (i, layer) in self.embed.layers.iter_mut().enumerate() {
            out.push((format!("embed.layer{}.w_self", i), &mut layer.w_self));
            for (r, w) in layer.w_rel.iter_mut().enumerate() {
                out.push((format!("embed.layer{}.w_rel{}", i, r), w));
            }
        }
        out.push(("disentangle.w_shared".into(), &mut self.disentangle.w_shared));
        out.push(("disentangle.w_interest".into(), &mut self.disentangle.w_interest));
        out.push(("disentangle.w_risk".into(), &mut self.disentangle.w_risk));
        out.push(("disentangle.w_conformity".into(), &mut self.disentangle.w_conformity));
        out.push(("risk.phi".into(), &mut self.risk.phi));
        push_ffn_mut(&mut out, "risk.ffn", &mut self.risk.ffn);
        push_ffn_mut(&mut out, "heads.conformity_user", &mut self.heads.conformity_user);
        push_ffn_mut(&mut out, "heads.conformity_item", &mut self.heads.conformity_item);
        push_ffn_mut(&mut out, "heads.interest_user", &mut self.heads.interest_user);
        push_ffn_mut(&mut out, "heads.interest_item", &mut self.heads.interest_item);
        out
    }

    /// Put every tensor on a tape as a gradient-carrying leaf.
    pub fn mount(&self, tape: &mut Tape) -> ModelVars {
        self.mount_with(tape, |tape, t| tape.leaf(t.clone()))
    }

    /// Put every tensor on a tape as a constant (inference paths).
    pub fn mount_frozen(&self, tape: &mut Tape) -> ModelVars {
        self.mount_with(tape, |tape, t| tape.constant(t.clone()))
    }

    fn mount_with(&self, tape: &mut Tape, mut put: impl FnMut(&mut Tape, &Tensor) -> Var) -> ModelVars {
        let conv = self
            .embed
            .layers
            .iter()
            .map(|layer| ConvLayerVars {
                w_self: put(tape, &layer.w_self),
                w_rel: std::array::from_fn(|r| put(tape, &layer.w_rel[r])),
            })
            .collect();
        let ffn =
            |tape: &mut Tape, f: &FeedForward, put: &mut dyn FnMut(&mut Tape, &Tensor) -> Var| {
                FeedForwardVars {
                    w1: put(tape, &f.w1),
                    b1: put(tape, &f.b1),
                    w2: put(tape, &f.w2),
                    b2: put(tape, &f.b2),
                }
            };
        ModelVars {
            h0: put(tape, &self.embed.h0),
            conv,
            disentangle: DisentangleVars {
                w_shared: put(tape, &self.disentangle.w_shared),
                w_interest: put(tape, &self.disentangle.w_interest),
                w_risk: put(tape, &self.disentangle.w_risk),
                w_conformity: put(tape, &self.disentangle.w_conformity),
            },
            risk: RiskSignalVars {
                phi: put(tape, &self.risk.phi),
                ffn: ffn(tape, &self.risk.ffn, &mut put),
            },
            heads: HeadVars {
                conformity_user: ffn(tape, &self.heads.conformity_user, &mut put),
                conformity_item: ffn(tape, &self.heads.conformity_item, &mut put),
                interest_user: ffn(tape, &self.heads.interest_user, &mut put),
                interest_item: ffn(tape, &self.heads.interest_item, &mut put),
            },
        }
    }
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, f: &'a FeedForward) {
    out.push((format!("{}.w1", name), &f.w1));
    out.push((format!("{}.b1", name), &f.b1));
    out.push((format!("{}.w2", name), &f.w2));
    out.push((format!("{}.b2", name), &f.b2));
}

fn push_ffn_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: &str, f: &'a mut FeedForward) {
    out.push((format!("{}.w1", name), &mut f.w1));
    out.push((format!("{}.b1", name), &mut f.b1));
    out.push((format!("{}.w2", name), &mut f.w2));
    out.push((format!("{}.b2", name), &mut f.b2));
}

/// Tape handles for one mounted copy of the model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub h0: Var,
    pub conv: Vec<ConvLayerVars>,
    pub disentangle: DisentangleVars,
    pub risk: RiskSignalVars,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Handles in [`ModelParams::named_tensors`] order, so an optimizer can
    /// pair each tape gradient with its slot by position.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.h0];
        for layer in &self.conv {
            out.push(layer.w_self);
            out.extend(layer.w_rel);
        }
        out.extend([
            self.disentangle.w_shared,
            self.disentangle.w_interest,
            self.disentangle.w_risk,
            self.disentangle.w_conformity,
            self.risk.phi,
        ]);
        for f in [
            &self.risk.ffn,
            &self.heads.conformity_user,
            &self.heads.conformity_item,
            &self.heads.interest_user,
            &self.heads.interest_item,
        ] {
            out.extend([f.w1, f.b1, f.w2, f.b2]);
        }
        out
    }
}

/// Fund representations for scoring: the convolved fund rows, or the raw
/// embedding rows when graph learning is off.
pub fn fund_rows(
    tape: &mut Tape,
    vars: &ModelVars,
    graph: &FundGraph,
    n_funds: usize,
    use_graph: bool,
) -> Result<Var> {
    let h = if use_graph {
        crate::graph::encode_funds_on(tape, vars.h0, graph, &vars.conv)?
    } else {
        vars.h0
    };
    let idx: Vec<usize> = (0..n_funds).collect();
    tape.gather(h, std::sync::Arc::new(idx))
}
