//! Five-relation fund knowledge graph and its layered convolution encoder.
//!
//! Every relation links a fund to one metadata entity kind (manager,
//! organization, heavyweight stock, tracked index, fund type) and is stored
//! bidirectionally, so two funds sharing metadata are two hops apart. The
//! encoder stacks relation-typed mean aggregation layers over one embedding
//! table that covers all entity kinds.

use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adjacency, Tape, Tensor, Var};

// ── entities and relations ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Fund,
    Manager,
    Organization,
    Stock,
    StockIndex,
    Type,
}

pub const ENTITY_KINDS: [EntityKind; 6] = [
    EntityKind::Fund,
    EntityKind::Manager,
    EntityKind::Organization,
    EntityKind::Stock,
    EntityKind::StockIndex,
    EntityKind::Type,
];

impl EntityKind {
    pub fn token(self) -> &'static str {
        match self {
            EntityKind::Fund => "fund",
            EntityKind::Manager => "manager",
            EntityKind::Organization => "organization",
            EntityKind::Stock => "stock",
            EntityKind::StockIndex => "stock_index",
            EntityKind::Type => "type",
        }
    }

    pub fn parse(tok: &str) -> Result<EntityKind> {
        ENTITY_KINDS
            .into_iter()
            .find(|k| k.token() == tok)
            .ok_or_else(|| Error::Data(format!("unknown entity kind '{}'", tok)))
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: u32,
}

impl EntityId {
    pub fn new(kind: EntityKind, index: u32) -> EntityId {
        EntityId { kind, index }
    }

    pub fn fund(index: u32) -> EntityId {
        EntityId::new(EntityKind::Fund, index)
    }

    fn parse(tok: &str) -> Result<EntityId> {
        let (kind, idx) = tok
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("entity '{}' is not kind:index", tok)))?;
        let index = idx
            .parse::<u32>()
            .map_err(|_| Error::Data(format!("entity index '{}' is not a non-negative integer", idx)))?;
        Ok(EntityId::new(EntityKind::parse(kind)?, index))
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    Manage,
    BelongToOrg,
    Heavyweight,
    Track,
    BelongToType,
}

pub const RELATION_KINDS: [RelationKind; 5] = [
    RelationKind::Manage,
    RelationKind::BelongToOrg,
    RelationKind::Heavyweight,
    RelationKind::Track,
    RelationKind::BelongToType,
];

impl RelationKind {
    pub fn token(self) -> &'static str {
        match self {
            RelationKind::Manage => "manage",
            RelationKind::BelongToOrg => "belong_to_org",
            RelationKind::Heavyweight => "heavyweight",
            RelationKind::Track => "track",
            RelationKind::BelongToType => "belong_to_type",
        }
    }

    pub fn parse(tok: &str) -> Result<RelationKind> {
        RELATION_KINDS
            .into_iter()
            .find(|r| r.token() == tok)
            .ok_or_else(|| Error::Data(format!("unknown relation token '{}'", tok)))
    }

    pub fn ordinal(self) -> usize {
        RELATION_KINDS.iter().position(|r| *r == self).unwrap()
    }

    /// The non-fund endpoint kind this relation links funds to.
    pub fn partner_kind(self) -> EntityKind {
        match self {
            RelationKind::Manage => EntityKind::Manager,
            RelationKind::BelongToOrg => EntityKind::Organization,
            RelationKind::Heavyweight => EntityKind::Stock,
            RelationKind::Track => EntityKind::StockIndex,
            RelationKind::BelongToType => EntityKind::Type,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

pub type Triple = (EntityId, RelationKind, EntityId);

// ── counts and graph ────────────────────────────────────────────────────────

/// Dense entity counts per kind; global indices lay kinds out in
/// [`ENTITY_KINDS`] order, funds first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCounts {
    pub funds: u32,
    pub managers: u32,
    pub organizations: u32,
    pub stocks: u32,
    pub stock_indices: u32,
    pub types: u32,
}

impl EntityCounts {
    pub fn of(&self, kind: EntityKind) -> u32 {
        match kind {
            EntityKind::Fund => self.funds,
            EntityKind::Manager => self.managers,
            EntityKind::Organization => self.organizations,
            EntityKind::Stock => self.stocks,
            EntityKind::StockIndex => self.stock_indices,
            EntityKind::Type => self.types,
        }
    }

    fn of_mut(&mut self, kind: EntityKind) -> &mut u32 {
        match kind {
            EntityKind::Fund => &mut self.funds,
            EntityKind::Manager => &mut self.managers,
            EntityKind::Organization => &mut self.organizations,
            EntityKind::Stock => &mut self.stocks,
            EntityKind::StockIndex => &mut self.stock_indices,
            EntityKind::Type => &mut self.types,
        }
    }

    pub fn total(&self) -> usize {
        ENTITY_KINDS.iter().map(|k| self.of(*k) as usize).sum()
    }

    pub fn offset(&self, kind: EntityKind) -> usize {
        ENTITY_KINDS
            .iter()
            .take_while(|k| **k != kind)
            .map(|k| self.of(*k) as usize)
            .sum()
    }
}

/// Smallest counts covering every entity mentioned in `triples`.
pub fn infer_counts(triples: &[Triple]) -> EntityCounts {
    let mut counts = EntityCounts::default();
    for (h, _, t) in triples {
        for e in [h, t] {
            let c = counts.of_mut(e.kind);
            *c = (*c).max(e.index + 1);
        }
    }
    counts
}

#[derive(Debug, Clone)]
pub struct FundGraph {
    counts: EntityCounts,
    /// Canonical fund-first edges, sorted and deduplicated.
    edges: Vec<Triple>,
    /// Per relation, symmetric neighbor lists over global entity indices.
    adjacency: [Arc<Adjacency>; 5],
}

/// Validate, canonicalize and index a triple list. Triples may name either
/// endpoint first; both orientations of the same pair collapse to one edge.
pub fn build_graph(counts: EntityCounts, triples: &[Triple]) -> Result<FundGraph> {
    let mut edges: Vec<Triple> = Vec::with_capacity(triples.len());
    for &(head, rel, tail) in triples {
        let partner = rel.partner_kind();
        let (fund, other) = match (head.kind, tail.kind) {
            (EntityKind::Fund, k) if k == partner => (head, tail),
            (k, EntityKind::Fund) if k == partner => (tail, head),
            _ => {
                return Err(Error::Data(format!(
                    "edge ({} {} {}) violates schema: {} links fund and {}",
                    head,
                    rel,
                    tail,
                    rel,
                    partner.token()
                )));
            }
        };
        for e in [fund, other] {
            if e.index >= counts.of(e.kind) {
                return Err(Error::Data(format!(
                    "edge ({} {} {}) references {} beyond declared count {}",
                    head,
                    rel,
                    tail,
                    e,
                    counts.of(e.kind)
                )));
            }
        }
        edges.push((fund, rel, other));
    }
    edges.sort_by_key(|(f, r, o)| (r.ordinal(), *f, *o));
    edges.dedup();

    let total = counts.total();
    let adjacency = RELATION_KINDS.map(|rel| {
        let mut adj: Adjacency = vec![Vec::new(); total];
        for (fund, r, other) in &edges {
            if *r != rel {
                continue;
            }
            let fi = counts.offset(fund.kind) + fund.index as usize;
            let oi = counts.offset(other.kind) + other.index as usize;
            adj[fi].push(oi as u32);
            adj[oi].push(fi as u32);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        Arc::new(adj)
    });

    Ok(FundGraph { counts, edges, adjacency })
}

impl FundGraph {
    pub fn counts(&self) -> EntityCounts {
        self.counts
    }

    pub fn entity_total(&self) -> usize {
        self.counts.total()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    pub fn global_index(&self, id: EntityId) -> usize {
        self.counts.offset(id.kind) + id.index as usize
    }

    pub fn adjacency(&self, rel: RelationKind) -> &Arc<Adjacency> {
        &self.adjacency[rel.ordinal()]
    }

    pub fn neighbors(&self, id: EntityId, rel: RelationKind) -> &[u32] {
        &self.adjacency[rel.ordinal()][self.global_index(id)]
    }

    fn relation_has_edges(&self, rel: RelationKind) -> bool {
        self.edges.iter().any(|(_, r, _)| *r == rel)
    }
}

// ── convolution ─────────────────────────────────────────────────────────────

/// One layer's weights: a self transform plus one transform per relation,
/// all `d×d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayerWeights {
    pub w_self: Tensor,
    pub w_rel: [Tensor; 5],
}

/// Encoder parameters: base embedding table over all entities plus `L ≥ 1`
/// convolution layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConvParams {
    pub h0: Tensor,
    pub layers: Vec<ConvLayerWeights>,
}

impl GraphConvParams {
    /// Seeded default init: entity rows uniform in ±1/√d, layer weights too.
    pub fn init<R: rand::Rng>(total_entities: usize, d: usize, layers: usize, rng: &mut R) -> GraphConvParams {
        let bound = 1.0 / (d as f64).sqrt();
        let h0 = Tensor::rand_uniform(vec![total_entities, d], -bound, bound, rng);
        let layers = (0..layers)
            .map(|_| ConvLayerWeights {
                w_self: Tensor::rand_uniform(vec![d, d], -bound, bound, rng),
                w_rel: std::array::from_fn(|_| {
                    Tensor::rand_uniform(vec![d, d], -bound, bound, rng)
                }),
            })
            .collect();
        GraphConvParams { h0, layers }
    }
}

/// Tape handles for one mounted layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayerVars {
    pub w_self: Var,
    pub w_rel: [Var; 5],
}

/// One aggregation layer on the tape:
/// `h'_v = relu(W_self·h_v + Σ_r W_r · mean_{u∈N_r(v)} h_u)`,
/// with empty neighborhoods contributing zero.
pub fn conv_layer(tape: &mut Tape, h: Var, graph: &FundGraph, layer: &ConvLayerVars) -> Result<Var> {
    let mut acc = tape.matmul(h, layer.w_self)?;
    for rel in RELATION_KINDS {
        if !graph.relation_has_edges(rel) {
            continue;
        }
        let pooled = tape.neighbor_mean(h, Arc::clone(graph.adjacency(rel)))?;
        let msg = tape.matmul(pooled, layer.w_rel[rel.ordinal()])?;
        acc = tape.add(acc, msg)?;
    }
    tape.relu(acc)
}

/// Stack all layers on the tape from a mounted base table.
pub fn encode_funds_on(
    tape: &mut Tape,
    h0: Var,
    graph: &FundGraph,
    layers: &[ConvLayerVars],
) -> Result<Var> {
    let mut h = h0;
    for layer in layers {
        h = conv_layer(tape, h, graph, layer)?;
    }
    Ok(h)
}

/// Pure encoder: the full `|E|×d` table after `L` layers; fund rows are the
/// fund representations.
pub fn encode_funds(graph: &FundGraph, params: &GraphConvParams) -> Result<Tensor> {
    if params.layers.is_empty() {
        return Err(Error::InvalidArg("encoder needs at least one layer".into()));
    }
    if params.h0.shape.first() != Some(&graph.entity_total()) {
        return Err(Error::Shape(format!(
            "embedding table has {:?} rows, graph has {} entities",
            params.h0.shape.first(),
            graph.entity_total()
        )));
    }
    let mut tape = Tape::new();
    let h0 = tape.constant(params.h0.clone());
    let layers: Vec<ConvLayerVars> = params
        .layers
        .iter()
        .map(|l| ConvLayerVars {
            w_self: tape.constant(l.w_self.clone()),
            w_rel: std::array::from_fn(|r| tape.constant(l.w_rel[r].clone())),
        })
        .collect();
    let out = encode_funds_on(&mut tape, h0, graph, &layers)?;
    Ok(tape.value(out).clone())
}

// ── triples file io ─────────────────────────────────────────────────────────

/// Parse one line of a triples file; `None` for blanks and `#` comments.
pub fn parse_triple_line(line: &str) -> Result<Option<Triple>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let mut parts = line.split('\t');
    let (h, r, t) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(r), Some(t), None) => (h, r, t),
        _ => {
            return Err(Error::Data(format!(
                "triple line '{}' is not head<TAB>relation<TAB>tail",
                line
            )));
        }
    };
    Ok(Some((EntityId::parse(h)?, RelationKind::parse(r)?, EntityId::parse(t)?)))
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let file = std::fs::File::open(path)?;
    let mut triples = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if let Some(t) = parse_triple_line(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), no + 1, e)))?
        {
            triples.push(t);
        }
    }
    Ok(triples)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (h, r, t) in triples {
        writeln!(out, "{}\t{}\t{}", h, r, t)?;
    }
    out.flush()?;
    Ok(())
}
