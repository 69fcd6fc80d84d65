//! Offline datasets: collection from a behaviour policy, quality-tier mixing,
//! uniform batch sampling and the `FRLDAT1` file format.
//!
//! `FRLDAT1` layout, little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | 8 bytes `FRLDAT1\0` |
//! | format version | u32 (currently 1) |
//! | environment id length, bytes | u32, UTF-8 |
//! | dimensions `N`, then `n_i` for each | u32, `N` x u32 |
//! | observation dim `D` | u32 |
//! | transition count `T` | u64 |
//! | source tag | u8 (0 expert, 1 medium, 2 random, 3 mixed) |
//! | generation seed | u64 |
//! | recipe length `R`, then per part: tag, fraction, count | u32, `R` x (u8, f64, u64) |
//! | `T` transitions: state, action, reward, next state, terminal, origin | `D` x f64, `N` x u16, f64, `D` x f64, u8, u8 |
//!
//! `origin` is the source tag of the tier the transition was collected in,
//! which survives mixing.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::decomp::{ActionSpec, FactoredAction};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, Rng};

pub const DATA_MAGIC: &[u8; 8] = b"FRLDAT1\0";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT: &str = "FRLDAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    Expert,
    Medium,
    Random,
    Mixed,
}

impl SourceTag {
    pub fn code(self) -> u8 {
        match self {
            SourceTag::Expert => 0,
            SourceTag::Medium => 1,
            SourceTag::Random => 2,
            SourceTag::Mixed => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SourceTag::Expert,
            1 => SourceTag::Medium,
            2 => SourceTag::Random,
            3 => SourceTag::Mixed,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Expert => "expert",
            SourceTag::Medium => "medium",
            SourceTag::Random => "random",
            SourceTag::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: FactoredAction,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Absorbing transition; false on step-cap truncation.
    pub terminal: bool,
    pub origin: SourceTag,
}

/// One component of a mixed dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPart {
    pub tag: SourceTag,
    pub fraction: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub env_id: String,
    pub spec: ActionSpec,
    pub obs_dim: usize,
    pub source: SourceTag,
    pub seed: u64,
    pub recipe: Vec<MixPart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, transitions: Vec<Transition>) -> Result<Self> {
        let ds = Dataset { header, transitions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn spec(&self) -> &ActionSpec {
        &self.header.spec
    }

    /// Transitions per origin tag.
    pub fn origin_counts(&self) -> Vec<(SourceTag, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for t in &self.transitions {
            *counts.entry(t.origin).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        let invalid = |reason: String| Error::InvalidFile {
            format: FORMAT,
            reason,
        };
        if h.obs_dim == 0 {
            return Err(invalid("observation dim is zero".into()));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.len() != h.obs_dim || t.next_state.len() != h.obs_dim {
                return Err(invalid(format!("transition {i}: observation length")));
            }
            h.spec
                .validate(&t.action)
                .map_err(|e| invalid(format!("transition {i}: {e}")))?;
        }
        Ok(())
    }

    /// Serialises to `FRLDAT1` bytes.
    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.write_u32::<LittleEndian>(h.version).unwrap();
        out.write_u32::<LittleEndian>(h.env_id.len() as u32).unwrap();
        out.extend_from_slice(h.env_id.as_bytes());
        out.write_u32::<LittleEndian>(h.spec.dims() as u32).unwrap();
        for &n in h.spec.sizes() {
            out.write_u32::<LittleEndian>(n as u32).unwrap();
        }
        out.write_u32::<LittleEndian>(h.obs_dim as u32).unwrap();
        out.write_u64::<LittleEndian>(self.transitions.len() as u64).unwrap();
        out.push(h.source.code());
        out.write_u64::<LittleEndian>(h.seed).unwrap();
        out.write_u32::<LittleEndian>(h.recipe.len() as u32).unwrap();
        for part in &h.recipe {
            out.push(part.tag.code());
            out.write_f64::<LittleEndian>(part.fraction).unwrap();
            out.write_u64::<LittleEndian>(part.count).unwrap();
        }
        for t in &self.transitions {
            for &x in &t.state {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
            for &a in t.action.indices() {
                out.write_u16::<LittleEndian>(a as u16).unwrap();
            }
            out.write_f64::<LittleEndian>(t.reward).unwrap();
            for &x in &t.next_state {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
            out.push(t.terminal as u8);
            out.push(t.origin.code());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated(FORMAT))?;
        if &magic != DATA_MAGIC {
            return Err(Error::BadMagic(FORMAT));
        }
        let version = u32_(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: FORMAT,
                version,
            });
        }
        let id_len = u32_(&mut r)? as usize;
        if r.len() < id_len {
            return Err(Error::Truncated(FORMAT));
        }
        let (id, rest) = r.split_at(id_len);
        r = rest;
        let env_id = String::from_utf8(id.to_vec()).map_err(|_| bad("environment id is not UTF-8"))?;
        let dims = u32_(&mut r)? as usize;
        if dims > r.len() / 4 {
            return Err(Error::Truncated(FORMAT));
        }
        let sizes = (0..dims).map(|_| u32_(&mut r).map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
        let spec = ActionSpec::new(sizes).map_err(|e| bad(&e.to_string()))?;
        let obs_dim = u32_(&mut r)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))?;
        let source = SourceTag::from_code(u8_(&mut r)?).ok_or_else(|| bad("unknown source tag"))?;
        let seed = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))?;
        let parts = u32_(&mut r)? as usize;
        let mut recipe = Vec::with_capacity(parts.min(16));
        for _ in 0..parts {
            let tag = SourceTag::from_code(u8_(&mut r)?).ok_or_else(|| bad("unknown recipe tag"))?;
            let fraction = f64_(&mut r)?;
            let count = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))?;
            recipe.push(MixPart { tag, fraction, count });
        }
        let record = 16 * obs_dim + 2 * dims + 10;
        let needed = (count as u128) * record as u128;
        if needed > r.len() as u128 {
            return Err(Error::Truncated(FORMAT));
        }
        if needed < r.len() as u128 {
            return Err(bad("trailing bytes after transitions"));
        }
        let mut transitions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let state = (0..obs_dim).map(|_| f64_(&mut r)).collect::<Result<Vec<_>>>()?;
            let action = (0..dims)
                .map(|_| {
                    r.read_u16::<LittleEndian>()
                        .map(usize::from)
                        .map_err(|_| Error::Truncated(FORMAT))
                })
                .collect::<Result<Vec<_>>>()?;
            let reward = f64_(&mut r)?;
            let next_state = (0..obs_dim).map(|_| f64_(&mut r)).collect::<Result<Vec<_>>>()?;
            let terminal = match u8_(&mut r)? {
                0 => false,
                1 => true,
                _ => return Err(bad("terminal flag must be 0 or 1")),
            };
            let origin = SourceTag::from_code(u8_(&mut r)?).ok_or_else(|| bad("unknown origin tag"))?;
            transitions.push(Transition {
                state,
                action: FactoredAction(action),
                reward,
                next_state,
                terminal,
                origin,
            });
        }
        let header = DatasetHeader {
            version,
            env_id,
            spec,
            obs_dim,
            source,
            seed,
            recipe,
        };
        Dataset::new(header, transitions)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.encode());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Lossless CSV (shortest round-trip float formatting).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.header.obs_dim;
        let n = self.header.spec.dims();
        let mut cols: Vec<String> = (0..d).map(|j| format!("s{j}")).collect();
        cols.extend((0..n).map(|i| format!("a{i}")));
        cols.push("reward".into());
        cols.extend((0..d).map(|j| format!("next_s{j}")));
        cols.push("terminal".into());
        cols.push("origin".into());
        writeln!(out, "{}", cols.join(","))?;
        for t in &self.transitions {
            let mut row: Vec<String> = t.state.iter().map(|x| format!("{x:?}")).collect();
            row.extend(t.action.indices().iter().map(|a| a.to_string()));
            row.push(format!("{:?}", t.reward));
            row.extend(t.next_state.iter().map(|x| format!("{x:?}")));
            row.push((t.terminal as u8).to_string());
            row.push(t.origin.name().into());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn bad(reason: &str) -> Error {
    Error::InvalidFile {
        format: FORMAT,
        reason: reason.to_owned(),
    }
}

fn u8_(r: &mut &[u8]) -> Result<u8> {
    r.read_u8().map_err(|_| Error::Truncated(FORMAT))
}

fn u32_(r: &mut &[u8]) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))
}

fn f64_(r: &mut &[u8]) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))
}

/// Deterministic map from observation to a factored action.
pub trait Policy {
    fn act(&self, observation: &[f64]) -> FactoredAction;
}

impl<F: Fn(&[f64]) -> FactoredAction> Policy for F {
    fn act(&self, observation: &[f64]) -> FactoredAction {
        self(observation)
    }
}

/// Runs `policy` with per-dimension epsilon randomisation until exactly
/// `num_transitions` transitions are recorded.
///
/// Episode `k` resets the environment with `seed + k`. Truncated episode
/// ends are stored with `terminal = false`.
pub fn collect<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    num_transitions: usize,
    epsilon: f64,
    seed: u64,
    env_id: &str,
    tag: SourceTag,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::precondition("epsilon must lie in [0, 1]"));
    }
    if num_transitions == 0 {
        return Err(Error::precondition("num_transitions must be at least 1"));
    }
    let spec = env.action_spec();
    let mut rng = rng::stream(seed, rng::role::EXPLORE);
    let mut transitions = Vec::with_capacity(num_transitions);
    let mut episode = 0u64;
    'episodes: loop {
        let mut obs = env.reset(seed.wrapping_add(episode));
        episode += 1;
        loop {
            let action = epsilon_greedy(policy, &obs, &spec, epsilon, &mut rng);
            let step = env.step(&action)?;
            transitions.push(Transition {
                state: obs,
                action,
                reward: step.reward,
                next_state: step.observation.clone(),
                terminal: step.terminal,
                origin: tag,
            });
            if transitions.len() == num_transitions {
                break 'episodes;
            }
            if step.done {
                break;
            }
            obs = step.observation;
        }
    }
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        env_id: env_id.to_owned(),
        spec,
        obs_dim: env.observation_dim(),
        source: tag,
        seed,
        recipe: Vec::new(),
    };
    Dataset::new(header, transitions)
}

/// Each dimension independently takes a uniform sub-action with probability
/// `epsilon`, otherwise the policy's choice. The greedy action is only
/// queried when some dimension needs it.
pub fn epsilon_greedy<P: Policy + ?Sized>(
    policy: &P,
    obs: &[f64],
    spec: &ActionSpec,
    epsilon: f64,
    rng: &mut Rng,
) -> FactoredAction {
    let explore: Vec<Option<usize>> = spec
        .sizes()
        .iter()
        .map(|&n| {
            let u: f64 = rng.gen();
            (u < epsilon).then(|| rng.gen_range(0..n))
        })
        .collect();
    if explore.iter().all(Option::is_some) {
        return FactoredAction(explore.into_iter().flatten().collect());
    }
    let greedy = policy.act(obs);
    FactoredAction(
        explore
            .into_iter()
            .zip(greedy.indices())
            .map(|(e, &g)| e.unwrap_or(g))
            .collect(),
    )
}

/// Draws `floor(fraction * total)` transitions without replacement from each
/// part (the rounding remainder goes to the first part) and shuffles.
pub fn mix(parts: &[(&Dataset, f64)], total: usize, seed: u64) -> Result<Dataset> {
    let (first, _) = parts.first().ok_or_else(|| Error::precondition("nothing to mix"))?;
    let fraction_sum: f64 = parts.iter().map(|(_, f)| f).sum();
    if (fraction_sum - 1.0).abs() > 1e-9 {
        return Err(Error::precondition(format!("fractions sum to {fraction_sum}, not 1")));
    }
    if parts.iter().any(|(_, f)| !(*f >= 0.0)) {
        return Err(Error::precondition("fractions must be non-negative"));
    }
    for (ds, _) in parts {
        let h = ds.header();
        if h.spec != first.header().spec || h.obs_dim != first.header().obs_dim || h.env_id != first.header().env_id {
            return Err(Error::precondition("mixed datasets must share environment and shapes"));
        }
    }
    let mut counts: Vec<usize> = parts
        .iter()
        .map(|(_, f)| (f * total as f64 + 1e-9).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    counts[0] += total.saturating_sub(assigned);

    let mut rng = rng::stream(seed, rng::role::MIX);
    let mut transitions = Vec::with_capacity(total);
    for (i, ((ds, _), &k)) in parts.iter().zip(&counts).enumerate() {
        if ds.len() < k {
            return Err(Error::InsufficientSource {
                source_name: format!("part {i} ({})", ds.header().source),
                available: ds.len(),
                required: k,
            });
        }
        for j in index::sample(&mut rng, ds.len(), k) {
            transitions.push(ds.transitions()[j].clone());
        }
    }
    transitions.shuffle(&mut rng);
    let recipe = parts
        .iter()
        .zip(&counts)
        .map(|((ds, f), &k)| MixPart {
            tag: ds.header().source,
            fraction: *f,
            count: k as u64,
        })
        .collect();
    let header = DatasetHeader {
        source: SourceTag::Mixed,
        seed,
        recipe,
        ..first.header().clone()
    };
    Dataset::new(header, transitions)
}

/// Uniform draws with replacement.
pub fn sample_indices(dataset: &Dataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::precondition("cannot sample from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::precondition("batch_size must be at least 1"));
    }
    Ok((0..batch_size).map(|_| rng.gen_range(0..dataset.len())).collect())
}

pub fn sample_batch<'a>(dataset: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<&'a Transition>> {
    Ok(sample_indices(dataset, batch_size, rng)?
        .into_iter()
        .map(|i| &dataset.transitions()[i])
        .collect())
}

/// Column-major view of a minibatch, ready for the networks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Matrix,
    pub next_states: Matrix,
    /// Row-major `(batch, N)`.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn gather<'a, I>(transitions: I, obs_dim: usize, dims: usize) -> Self
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let mut states = Vec::new();
        let mut next_states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut terminals = Vec::new();
        for t in transitions {
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
            actions.extend_from_slice(t.action.indices());
            rewards.push(t.reward);
            terminals.push(t.terminal);
        }
        let b = rewards.len();
        debug_assert_eq!(actions.len(), b * dims);
        Batch {
            states: Matrix::from_vec(b, obs_dim, states),
            next_states: Matrix::from_vec(b, obs_dim, next_states),
            actions,
            rewards,
            terminals,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Self {
        Self::gather(
            indices.iter().map(|&i| &dataset.transitions()[i]),
            dataset.header().obs_dim,
            dataset.spec().dims(),
        )
    }
}
