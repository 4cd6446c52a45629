//! Synthetic market data with planted structure, file formats, and the
//! temporal split.
//!
//! Each user carries a hidden triple: an interest archetype (a community of
//! funds sharing managers, organizations, stocks and indices), a risk level
//! (determined by the archetype), and a conformity weight λ. Interactions
//! mix two draws: with probability λ a popularity-proportional pick across
//! the user's whole risk level, otherwise a popularity-proportional pick
//! inside the archetype. Fund popularity follows a Zipf law over a shuffled
//! rank permutation, so planted popularity is independent of fund id.
//!
//! The hidden triples go to a separate latents file used only for probing;
//! model inputs (interactions, profiles, graph, catalog) never contain them,
//! and profiles are pure noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::disentangle::BehaviorSequence;
use crate::error::{Error, Result};
use crate::graph::{self, EntityCounts, EntityId, RelationKind, Triple};

pub const FILE_INTERACTIONS: &str = "interactions.tsv";
pub const FILE_PROFILES: &str = "profiles.tsv";
pub const FILE_GRAPH: &str = "graph.tsv";
pub const FILE_CATALOG: &str = "catalog.tsv";
pub const FILE_LATENTS: &str = "latents.tsv";

// ── domain types ────────────────────────────────────────────────────────────

/// One positive user-fund event. Negatives are sampled at train time, so
/// stored interactions carry no label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub fund: u32,
    pub day: u32,
    pub tick: u32,
}

impl Interaction {
    fn sort_key(&self) -> (u32, u32, u32, u32) {
        (self.day, self.tick, self.user, self.fund)
    }
}

/// Fund metadata: each fund has a type, each type a risk level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub fund_type: Vec<u32>,
    pub type_level: Vec<u32>,
}

impl Catalog {
    pub fn n_funds(&self) -> usize {
        self.fund_type.len()
    }

    pub fn n_types(&self) -> usize {
        self.type_level.len()
    }

    pub fn n_levels(&self) -> usize {
        self.type_level.iter().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn fund_level(&self, fund: u32) -> u32 {
        self.type_level[self.fund_type[fund as usize] as usize]
    }
}

/// Hidden per-user ground truth, written only to the probe-side latents file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserLatent {
    pub archetype: u32,
    pub risk_level: u32,
    pub lambda: f64,
}

/// Generation parameters. `lambda_fixed` pins every user's conformity weight
/// (handy for endpoint checks); the default draws λ uniformly from [0,1].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: u32,
    pub funds: u32,
    pub managers: u32,
    pub organizations: u32,
    pub stocks: u32,
    pub stock_indices: u32,
    pub types: u32,
    /// Risk level of each type; levels must cover 0..=max without gaps.
    pub type_levels: Vec<u32>,
    pub days: u32,
    pub interactions_per_user_day: u32,
    pub zipf_s: f64,
    pub profile_dim: u32,
    pub seed: u64,
    pub lambda_fixed: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            users: 2000,
            funds: 500,
            managers: 20,
            organizations: 10,
            stocks: 50,
            stock_indices: 10,
            types: 5,
            type_levels: vec![0, 0, 1, 1, 2],
            days: 14,
            interactions_per_user_day: 1,
            zipf_s: 1.0,
            profile_dim: 8,
            seed: 17,
            lambda_fixed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn n_levels(&self) -> usize {
        self.type_levels.iter().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::Data(format!("infeasible spec: {}", msg)));
        for (name, v) in [
            ("users", self.users),
            ("funds", self.funds),
            ("managers", self.managers),
            ("organizations", self.organizations),
            ("stocks", self.stocks),
            ("stock_indices", self.stock_indices),
            ("types", self.types),
            ("interactions_per_user_day", self.interactions_per_user_day),
            ("profile_dim", self.profile_dim),
        ] {
            if v == 0 {
                return infeasible(format!("{} must be at least 1", name));
            }
        }
        if self.type_levels.len() != self.types as usize {
            return infeasible(format!(
                "{} type levels for {} types",
                self.type_levels.len(),
                self.types
            ));
        }
        let n_levels = self.n_levels();
        for level in 0..n_levels as u32 {
            if !self.type_levels.contains(&level) {
                return infeasible(format!("risk level {} has no types", level));
            }
        }
        if (self.funds as usize) < n_levels {
            return infeasible(format!("{} funds cannot cover {} risk levels", self.funds, n_levels));
        }
        if (self.organizations as usize) < n_levels {
            return infeasible(format!(
                "{} organizations cannot cover {} risk levels",
                self.organizations, n_levels
            ));
        }
        if self.days < 3 {
            return infeasible(format!("{} days, need at least 3 for the temporal split", self.days));
        }
        if !self.zipf_s.is_finite() || self.zipf_s < 0.0 {
            return infeasible(format!("zipf_s must be finite and non-negative, got {}", self.zipf_s));
        }
        if let Some(l) = self.lambda_fixed {
            if !(0.0..=1.0).contains(&l) {
                return infeasible(format!("lambda_fixed must lie in [0,1], got {}", l));
            }
        }
        Ok(())
    }
}

/// Everything one experiment needs: split interactions, model input files,
/// and the probe-only latents.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub profiles: Vec<Vec<f64>>,
    pub triples: Vec<Triple>,
    pub catalog: Catalog,
    pub latents: Vec<UserLatent>,
}

impl DatasetBundle {
    pub fn n_users(&self) -> usize {
        self.profiles.len()
    }

    pub fn n_funds(&self) -> usize {
        self.catalog.n_funds()
    }

    pub fn all_interactions(&self) -> Vec<Interaction> {
        let mut all: Vec<Interaction> =
            self.train.iter().chain(&self.validation).chain(&self.test).copied().collect();
        all.sort_by_key(Interaction::sort_key);
        all
    }

    /// Entity universe for graph construction: funds and types from the
    /// catalog, everything else from the largest index wired in the triples.
    pub fn entity_counts(&self) -> EntityCounts {
        let mut counts = graph::infer_counts(&self.triples);
        counts.funds = counts.funds.max(self.catalog.n_funds() as u32);
        counts.types = counts.types.max(self.catalog.n_types() as u32);
        counts
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_interactions(&dir.join(FILE_INTERACTIONS), &self.all_interactions())?;
        write_profiles(&dir.join(FILE_PROFILES), &self.profiles)?;
        graph::write_triples(&dir.join(FILE_GRAPH), &self.triples)?;
        write_catalog(&dir.join(FILE_CATALOG), &self.catalog)?;
        write_latents(&dir.join(FILE_LATENTS), &self.latents)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<DatasetBundle> {
        let interactions = read_interactions(&dir.join(FILE_INTERACTIONS))?;
        let profiles = read_profiles(&dir.join(FILE_PROFILES))?;
        let triples = graph::read_triples(&dir.join(FILE_GRAPH))?;
        let catalog = read_catalog(&dir.join(FILE_CATALOG))?;
        let latents = read_latents(&dir.join(FILE_LATENTS))?;
        if profiles.len() != latents.len() {
            return Err(Error::Data(format!(
                "{} profiles but {} latent rows",
                profiles.len(),
                latents.len()
            )));
        }
        for it in &interactions {
            if it.user as usize >= profiles.len() {
                return Err(Error::Data(format!("interaction user {} has no profile", it.user)));
            }
            if it.fund as usize >= catalog.n_funds() {
                return Err(Error::Data(format!("interaction fund {} not in catalog", it.fund)));
            }
        }
        let (train, validation, test) = temporal_split(&interactions)?;
        Ok(DatasetBundle { train, validation, test, profiles, triples, catalog, latents })
    }
}

// ── generation ──────────────────────────────────────────────────────────────

/// Deterministic layout of funds, types, and archetypes before any sampling.
struct CatalogPlan {
    catalog: Catalog,
    /// Archetype of each fund; archetypes index organizations one-to-one.
    fund_archetype: Vec<u32>,
    archetype_level: Vec<u32>,
    archetype_funds: Vec<Vec<u32>>,
    level_funds: Vec<Vec<u32>>,
}

/// Split `total` proportionally to `shares`, flooring and handing leftovers
/// to the largest remainders (ties to the lower index).
fn allocate(total: u32, shares: &[u64]) -> Vec<u32> {
    let sum: u64 = shares.iter().sum();
    assert!(sum > 0, "allocation needs a positive share total");
    let mut base: Vec<u32> = Vec::with_capacity(shares.len());
    let mut rems: Vec<(u64, usize)> = Vec::with_capacity(shares.len());
    let mut given = 0u32;
    for (i, &s) in shares.iter().enumerate() {
        let prod = total as u64 * s;
        base.push((prod / sum) as u32);
        rems.push((prod % sum, i));
        given += (prod / sum) as u32;
    }
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for k in 0..(total - given) as usize {
        base[rems[k].1] += 1;
    }
    base
}

impl CatalogPlan {
    fn build(spec: &SyntheticSpec) -> Result<CatalogPlan> {
        let n_levels = spec.n_levels();
        let level_types: Vec<Vec<u32>> = (0..n_levels as u32)
            .map(|l| {
                (0..spec.types).filter(|t| spec.type_levels[*t as usize] == l).collect()
            })
            .collect();

        // Funds split as evenly as possible across levels, then round-robin
        // over each level's types so no type is starved.
        let level_fund_counts = allocate(spec.funds, &vec![1u64; n_levels]);
        let mut fund_type = Vec::with_capacity(spec.funds as usize);
        let mut level_funds: Vec<Vec<u32>> = vec![Vec::new(); n_levels];
        for (level, &count) in level_fund_counts.iter().enumerate() {
            let types = &level_types[level];
            if (count as usize) < types.len() {
                return Err(Error::Data(format!(
                    "infeasible spec: level {} has {} funds for {} types",
                    level,
                    count,
                    types.len()
                )));
            }
            for i in 0..count {
                let fund = fund_type.len() as u32;
                fund_type.push(types[i as usize % types.len()]);
                level_funds[level].push(fund);
            }
        }

        // Archetypes (one per organization) spread over levels in proportion
        // to fund mass, then claim their level's funds round-robin.
        let archetype_counts =
            allocate(spec.organizations, &level_fund_counts.iter().map(|c| *c as u64).collect::<Vec<_>>());
        let mut archetype_level = Vec::with_capacity(spec.organizations as usize);
        let mut archetype_funds: Vec<Vec<u32>> = Vec::with_capacity(spec.organizations as usize);
        let mut fund_archetype = vec![0u32; spec.funds as usize];
        for (level, &n_arch) in archetype_counts.iter().enumerate() {
            if n_arch == 0 {
                return Err(Error::Data(format!("infeasible spec: level {} has no archetype", level)));
            }
            let first = archetype_level.len() as u32;
            for _ in 0..n_arch {
                archetype_level.push(level as u32);
                archetype_funds.push(Vec::new());
            }
            for (i, &fund) in level_funds[level].iter().enumerate() {
                let arch = first + (i as u32 % n_arch);
                fund_archetype[fund as usize] = arch;
                archetype_funds[arch as usize].push(fund);
            }
        }
        if let Some(empty) = archetype_funds.iter().position(|f| f.is_empty()) {
            return Err(Error::Data(format!("infeasible spec: archetype {} has no funds", empty)));
        }

        Ok(CatalogPlan {
            catalog: Catalog { fund_type, type_level: spec.type_levels.clone() },
            fund_archetype,
            archetype_level,
            archetype_funds,
            level_funds,
        })
    }

    /// Wire each archetype's funds to a shared organization, a two-manager
    /// pool, a five-stock pool, and one index, so graph communities coincide
    /// with interest archetypes.
    fn triples(&self, spec: &SyntheticSpec) -> Vec<Triple> {
        let mut triples = Vec::new();
        for (f, &arch) in self.fund_archetype.iter().enumerate() {
            let fund = EntityId::fund(f as u32);
            let a = arch;
            let j = self.archetype_funds[a as usize].iter().position(|x| *x == f as u32).unwrap()
                as u32;
            let manager = (2 * a + (j % 2)) % spec.managers;
            triples.push((
                fund,
                RelationKind::Manage,
                EntityId::new(crate::graph::EntityKind::Manager, manager),
            ));
            triples.push((
                fund,
                RelationKind::BelongToOrg,
                EntityId::new(crate::graph::EntityKind::Organization, a % spec.organizations),
            ));
            for i in 0..3 {
                let stock = (5 * a + (j + i) % 5) % spec.stocks;
                triples.push((
                    fund,
                    RelationKind::Heavyweight,
                    EntityId::new(crate::graph::EntityKind::Stock, stock),
                ));
            }
            triples.push((
                fund,
                RelationKind::Track,
                EntityId::new(crate::graph::EntityKind::StockIndex, a % spec.stock_indices),
            ));
            triples.push((
                fund,
                RelationKind::BelongToType,
                EntityId::new(crate::graph::EntityKind::Type, self.catalog.fund_type[f]),
            ));
        }
        triples
    }
}

/// Hand out Zipf ranks greedily by accumulated mass so each group holds a
/// near-equal popularity share, respecting per-group capacities. Ranks must
/// arrive in descending weight order.
fn greedy_ranks(ranks: &[usize], caps: &[usize], zipf_s: f64) -> Vec<Vec<usize>> {
    let mut mass = vec![0.0f64; caps.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); caps.len()];
    for &r in ranks {
        let k = (0..caps.len())
            .filter(|k| out[*k].len() < caps[*k])
            .min_by(|a, b| mass[*a].partial_cmp(&mass[*b]).unwrap())
            .expect("capacities sum to the rank count");
        mass[k] += 1.0 / ((r as f64) + 1.0).powf(zipf_s);
        out[k].push(r);
    }
    out
}

/// Per-fund Zipf weight. The rank ladder is balanced across risk levels and
/// across each level's archetypes so no community hoards popularity mass;
/// within an archetype, which fund takes which rank is random.
fn plant_popularity<R: Rng>(spec: &SyntheticSpec, plan: &CatalogPlan, rng: &mut R) -> Vec<f64> {
    let f = spec.funds as usize;
    let all_ranks: Vec<usize> = (0..f).collect();
    let level_caps: Vec<usize> = plan.level_funds.iter().map(|v| v.len()).collect();
    let level_ranks = greedy_ranks(&all_ranks, &level_caps, spec.zipf_s);

    let mut rank_of = vec![0usize; f];
    for (lv, ranks) in level_ranks.iter().enumerate() {
        let archs: Vec<usize> = (0..plan.archetype_level.len())
            .filter(|a| plan.archetype_level[*a] as usize == lv)
            .collect();
        let caps: Vec<usize> = archs.iter().map(|a| plan.archetype_funds[*a].len()).collect();
        let arch_ranks = greedy_ranks(ranks, &caps, spec.zipf_s);
        for (k, ranks) in arch_ranks.iter().enumerate() {
            let mut funds = plan.archetype_funds[archs[k]].clone();
            funds.shuffle(rng);
            for (fund, rank) in funds.iter().zip(ranks) {
                rank_of[*fund as usize] = *rank;
            }
        }
    }
    rank_of.iter().map(|r| 1.0 / ((*r as f64) + 1.0).powf(spec.zipf_s)).collect()
}

/// Generate a full dataset. Popularity weights are Zipf over a balanced fund
/// ranking; user draws mix archetype-local and level-wide picks by λ, both
/// popularity-proportional.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let plan = CatalogPlan::build(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weight_of = plant_popularity(spec, &plan, &mut rng);

    let pick = |funds: &[u32]| -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(funds.iter().map(|f| weight_of[*f as usize]))
            .map_err(|e| Error::Data(format!("popularity weights: {}", e)))
    };
    let archetype_dists: Vec<WeightedIndex<f64>> =
        plan.archetype_funds.iter().map(|f| pick(f)).collect::<Result<_>>()?;
    let level_dists: Vec<WeightedIndex<f64>> =
        plan.level_funds.iter().map(|f| pick(f)).collect::<Result<_>>()?;

    // Users pick an archetype with probability proportional to its fund
    // count, keeping risk levels balanced by fund mass.
    let archetype_sizes: Vec<u64> =
        plan.archetype_funds.iter().map(|f| f.len() as u64).collect();
    let archetype_draw = WeightedIndex::new(&archetype_sizes)
        .map_err(|e| Error::Data(format!("archetype sizes: {}", e)))?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut latents = Vec::with_capacity(spec.users as usize);
    let mut profiles = Vec::with_capacity(spec.users as usize);
    for _ in 0..spec.users {
        let archetype = archetype_draw.sample(&mut rng) as u32;
        let lambda = spec.lambda_fixed.unwrap_or_else(|| rng.random::<f64>());
        latents.push(UserLatent {
            archetype,
            risk_level: plan.archetype_level[archetype as usize],
            lambda,
        });
        profiles.push((0..spec.profile_dim).map(|_| normal.sample(&mut rng)).collect());
    }

    let mut interactions = Vec::new();
    for day in 0..spec.days {
        for (u, latent) in latents.iter().enumerate() {
            for tick in 0..spec.interactions_per_user_day {
                let level_wide = rng.random::<f64>() < latent.lambda;
                let fund = if level_wide {
                    let level = latent.risk_level as usize;
                    plan.level_funds[level][level_dists[level].sample(&mut rng)]
                } else {
                    let a = latent.archetype as usize;
                    plan.archetype_funds[a][archetype_dists[a].sample(&mut rng)]
                };
                interactions.push(Interaction { user: u as u32, fund, day, tick });
            }
        }
    }
    interactions.sort_by_key(Interaction::sort_key);

    let triples = plan.triples(spec);
    let (train, validation, test) = temporal_split(&interactions)?;
    Ok(DatasetBundle {
        train,
        validation,
        test,
        profiles,
        triples,
        catalog: plan.catalog,
        latents,
    })
}

// ── split and sequences ─────────────────────────────────────────────────────

/// Last distinct day becomes test, the penultimate one validation, the rest
/// training. Keys on timestamps only, so input order is irrelevant.
pub fn temporal_split(
    interactions: &[Interaction],
) -> Result<(Vec<Interaction>, Vec<Interaction>, Vec<Interaction>)> {
    let mut days: Vec<u32> = interactions.iter().map(|i| i.day).collect();
    days.sort_unstable();
    days.dedup();
    if days.len() < 3 {
        return Err(Error::Data(format!(
            "temporal split needs at least 3 distinct days, found {}",
            days.len()
        )));
    }
    let test_day = days[days.len() - 1];
    let val_day = days[days.len() - 2];
    let mut sorted: Vec<Interaction> = interactions.to_vec();
    sorted.sort_by_key(Interaction::sort_key);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for it in sorted {
        if it.day == test_day {
            test.push(it);
        } else if it.day == val_day {
            validation.push(it);
        } else {
            train.push(it);
        }
    }
    Ok((train, validation, test))
}

/// Per-user time-ordered behavior over the training partition, truncated to
/// the most recent `n_max` events (and never more than
/// [`crate::disentangle::N_MAX`], the hard sequence cap). Ties on timestamp
/// order by fund id.
pub fn build_sequences(
    train: &[Interaction],
    catalog: &Catalog,
    n_max: usize,
) -> Result<BTreeMap<u32, BehaviorSequence>> {
    if n_max == 0 {
        return Err(Error::InvalidArg("sequence window n_max must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("cannot build sequences from an empty training set".into()));
    }
    let mut per_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for it in train {
        if it.fund as usize >= catalog.n_funds() {
            return Err(Error::Data(format!("interaction fund {} not in catalog", it.fund)));
        }
        per_user.entry(it.user).or_default().push(*it);
    }
    let mut sequences = BTreeMap::new();
    for (user, mut items) in per_user {
        items.sort_by_key(|i| (i.day, i.tick, i.fund));
        if items.len() > n_max {
            items.drain(..items.len() - n_max);
        }
        let funds: Vec<u32> = items.iter().map(|i| i.fund).collect();
        let types: Vec<u32> = items.iter().map(|i| catalog.fund_type[i.fund as usize]).collect();
        sequences.insert(user, BehaviorSequence::new(user, funds, types)?);
    }
    Ok(sequences)
}

/// Training-partition interaction counts per fund, indexed by fund id.
pub fn fund_counts(train: &[Interaction], n_funds: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_funds];
    for it in train {
        counts[it.fund as usize] += 1;
    }
    counts
}

/// Per-user set of funds seen in the training partition.
pub fn train_history(train: &[Interaction]) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut history: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for it in train {
        history.entry(it.user).or_default().insert(it.fund);
    }
    history
}

// ── file formats ────────────────────────────────────────────────────────────

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn line_err(path: &Path, lineno: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{}: {}", path.display(), lineno, msg))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    lineno: usize,
    field: &str,
    raw: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| line_err(path, lineno, format!("bad {} {:?}: {}", field, raw, e)))
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut out = String::new();
    for it in interactions {
        writeln!(out, "{}\t{}\t{}\t{}", it.user, it.fund, it.day, it.tick).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)? {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(line_err(path, lineno, "expected user<TAB>fund<TAB>day<TAB>tick"));
        }
        out.push(Interaction {
            user: parse_field(path, lineno, "user", parts[0])?,
            fund: parse_field(path, lineno, "fund", parts[1])?,
            day: parse_field(path, lineno, "day", parts[2])?,
            tick: parse_field(path, lineno, "tick", parts[3])?,
        });
    }
    Ok(out)
}

pub fn write_profiles(path: &Path, profiles: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for (user, feats) in profiles.iter().enumerate() {
        let joined: Vec<String> = feats.iter().map(|f| f.to_string()).collect();
        writeln!(out, "{}\t{}", user, joined.join(",")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let (user_raw, feats_raw) = line
            .split_once('\t')
            .ok_or_else(|| line_err(path, lineno, "expected user<TAB>f1,f2,..."))?;
        let user: u32 = parse_field(path, lineno, "user", user_raw)?;
        let feats: Vec<f64> = feats_raw
            .split(',')
            .map(|f| parse_field(path, lineno, "feature", f.trim()))
            .collect::<Result<_>>()?;
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(line_err(path, lineno, "non-finite profile feature"));
        }
        if rows.insert(user, feats).is_some() {
            return Err(line_err(path, lineno, format!("duplicate profile for user {}", user)));
        }
    }
    dense_by_id(rows, "profile", "user")
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut out = String::new();
    for (fund, &ty) in catalog.fund_type.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", fund, ty, catalog.type_level[ty as usize]).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let mut fund_rows: BTreeMap<u32, u32> = BTreeMap::new();
    let mut type_level: BTreeMap<u32, u32> = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(line_err(path, lineno, "expected fund<TAB>type<TAB>risk_level"));
        }
        let fund: u32 = parse_field(path, lineno, "fund", parts[0])?;
        let ty: u32 = parse_field(path, lineno, "type", parts[1])?;
        let level: u32 = parse_field(path, lineno, "risk level", parts[2])?;
        if fund_rows.insert(fund, ty).is_some() {
            return Err(line_err(path, lineno, format!("duplicate catalog row for fund {}", fund)));
        }
        if let Some(prev) = type_level.insert(ty, level) {
            if prev != level {
                return Err(line_err(
                    path,
                    lineno,
                    format!("type {} mapped to risk levels {} and {}", ty, prev, level),
                ));
            }
        }
    }
    let fund_type = dense_by_id(fund_rows, "catalog", "fund")?;
    let type_level = dense_by_id(type_level, "catalog", "type")?;
    Ok(Catalog { fund_type, type_level })
}

pub fn write_latents(path: &Path, latents: &[UserLatent]) -> Result<()> {
    let mut out = String::new();
    for (user, l) in latents.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}\t{}", user, l.archetype, l.risk_level, l.lambda).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<UserLatent>> {
    let mut rows: BTreeMap<u32, UserLatent> = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(line_err(path, lineno, "expected user<TAB>archetype<TAB>risk_level<TAB>lambda"));
        }
        let user: u32 = parse_field(path, lineno, "user", parts[0])?;
        let latent = UserLatent {
            archetype: parse_field(path, lineno, "archetype", parts[1])?,
            risk_level: parse_field(path, lineno, "risk level", parts[2])?,
            lambda: parse_field(path, lineno, "lambda", parts[3])?,
        };
        if !(0.0..=1.0).contains(&latent.lambda) {
            return Err(line_err(path, lineno, format!("lambda {} outside [0,1]", latent.lambda)));
        }
        if rows.insert(user, latent).is_some() {
            return Err(line_err(path, lineno, format!("duplicate latent row for user {}", user)));
        }
    }
    dense_by_id(rows, "latents", "user")
}

/// Collapse an id-keyed map into a vector, requiring ids 0..n with no gaps.
fn dense_by_id<T>(rows: BTreeMap<u32, T>, what: &str, id_name: &str) -> Result<Vec<T>> {
    let n = rows.len();
    let mut out = Vec::with_capacity(n);
    for (expect, (id, value)) in rows.into_iter().enumerate() {
        if id as usize != expect {
            return Err(Error::Data(format!("{}: missing {} {}", what, id_name, expect)));
        }
        out.push(value);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no rows", what)));
    }
    Ok(out)
}
