//! The stacked-MPNN search space: three MPNN cells, six skip-connection
//! nodes and one gather node, each a variable node with an ordered list of
//! operations. An architecture is an integer vector with one operation index
//! per variable node.
//!
//! MPNN-cell operations are the cartesian product of seven factors and are
//! indexed by mixed-radix packing with the factor order
//! `dim, attention, heads, aggregator, activation, update, repetitions`
//! (dim most significant, repetitions least significant).

use std::fmt;
use std::str::FromStr;

use mpnas_tensor::Activation;
use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{NasError, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident, $kind:literal { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = NasError;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| NasError::Unknown {
                    kind: $kind,
                    value: s.to_string(),
                })
            }
        }
    };
}

named_enum!(AttentionKind, "attention" {
    Constant => "constant",
    Gcn => "gcn",
    Gat => "gat",
    SymGat => "sym-gat",
    Cos => "cos",
    Linear => "linear",
    GenLinear => "gen-linear",
});

impl AttentionKind {
    /// Kinds with trainable parameters, whose scores are softmax-normalized
    /// over each node's incoming edges.
    pub fn is_trainable(self) -> bool {
        !matches!(self, AttentionKind::Constant | AttentionKind::Gcn)
    }
}

named_enum!(Aggregator, "aggregator" {
    Mean => "mean",
    Sum => "sum",
    Max => "max",
});

named_enum!(UpdateKind, "update" {
    Gru => "gru",
    Mlp => "mlp",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GatherKind {
    PoolSum,
    PoolMean,
    PoolMax,
    GatherSum,
    GatherMean,
    GatherMax,
    AttentionPool(usize),
    AttentionSumPool,
    Flatten,
}

impl GatherKind {
    pub const DEFAULT_SET: [GatherKind; 11] = [
        GatherKind::PoolSum,
        GatherKind::PoolMean,
        GatherKind::PoolMax,
        GatherKind::GatherSum,
        GatherKind::GatherMean,
        GatherKind::GatherMax,
        GatherKind::AttentionPool(16),
        GatherKind::AttentionPool(32),
        GatherKind::AttentionPool(64),
        GatherKind::AttentionSumPool,
        GatherKind::Flatten,
    ];

    /// Whether the output is invariant to node order (reduces over nodes).
    pub fn reduces_nodes(self) -> bool {
        !matches!(
            self,
            GatherKind::PoolSum | GatherKind::PoolMean | GatherKind::PoolMax | GatherKind::Flatten
        )
    }
}

impl fmt::Display for GatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatherKind::PoolSum => f.write_str("pool-sum"),
            GatherKind::PoolMean => f.write_str("pool-mean"),
            GatherKind::PoolMax => f.write_str("pool-max"),
            GatherKind::GatherSum => f.write_str("gather-sum"),
            GatherKind::GatherMean => f.write_str("gather-mean"),
            GatherKind::GatherMax => f.write_str("gather-max"),
            GatherKind::AttentionPool(w) => write!(f, "attention-pool-{w}"),
            GatherKind::AttentionSumPool => f.write_str("attention-sum-pool"),
            GatherKind::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for GatherKind {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        let fixed = [
            GatherKind::PoolSum,
            GatherKind::PoolMean,
            GatherKind::PoolMax,
            GatherKind::GatherSum,
            GatherKind::GatherMean,
            GatherKind::GatherMax,
            GatherKind::AttentionSumPool,
            GatherKind::Flatten,
        ];
        if let Some(k) = fixed.into_iter().find(|k| k.to_string() == s) {
            return Ok(k);
        }
        s.strip_prefix("attention-pool-")
            .and_then(|w| w.parse().ok())
            .filter(|w| *w > 0)
            .map(GatherKind::AttentionPool)
            .ok_or_else(|| NasError::Unknown {
                kind: "gather",
                value: s.to_string(),
            })
    }
}

/// A point of the fixed pipeline a skip connection can start or end at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Input,
    /// 1-based MPNN cell number.
    Cell(usize),
    Gather,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Input => f.write_str("input"),
            Endpoint::Cell(i) => write!(f, "cell{i}"),
            Endpoint::Gather => f.write_str("gather"),
        }
    }
}

/// Skip connection from the output of `from` into the input of `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkipAnchor {
    pub from: Endpoint,
    pub to: Endpoint,
}

impl fmt::Display for SkipAnchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// The six skip anchors of the three-cell layout; no skip crosses more
/// than three nodes.
pub const DEFAULT_SKIPS: [SkipAnchor; 6] = [
    SkipAnchor { from: Endpoint::Input, to: Endpoint::Cell(2) },
    SkipAnchor { from: Endpoint::Input, to: Endpoint::Cell(3) },
    SkipAnchor { from: Endpoint::Cell(1), to: Endpoint::Cell(3) },
    SkipAnchor { from: Endpoint::Input, to: Endpoint::Gather },
    SkipAnchor { from: Endpoint::Cell(1), to: Endpoint::Gather },
    SkipAnchor { from: Endpoint::Cell(2), to: Endpoint::Gather },
];

/// Allowed values for each factor of an MPNN cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMenu {
    pub dims: Vec<usize>,
    pub attentions: Vec<AttentionKind>,
    pub heads: Vec<usize>,
    pub aggregators: Vec<Aggregator>,
    pub activations: Vec<Activation>,
    pub updates: Vec<UpdateKind>,
    pub repetitions: Vec<usize>,
}

impl Default for CellMenu {
    fn default() -> Self {
        Self {
            dims: vec![4, 8, 16, 32],
            attentions: AttentionKind::ALL.to_vec(),
            heads: vec![1, 2, 4, 6],
            aggregators: Aggregator::ALL.to_vec(),
            activations: Activation::ALL.to_vec(),
            updates: UpdateKind::ALL.to_vec(),
            repetitions: (1..=6).collect(),
        }
    }
}

impl CellMenu {
    /// Factor sizes in packing order.
    pub fn factor_sizes(&self) -> [usize; 7] {
        [
            self.dims.len(),
            self.attentions.len(),
            self.heads.len(),
            self.aggregators.len(),
            self.activations.len(),
            self.updates.len(),
            self.repetitions.len(),
        ]
    }

    pub fn count(&self) -> usize {
        self.factor_sizes().iter().product()
    }

    /// Mixed-radix unpacking of a cell operation index into factor indices.
    pub fn unpack(&self, mut index: usize) -> [usize; 7] {
        let sizes = self.factor_sizes();
        let mut digits = [0; 7];
        for f in (0..7).rev() {
            digits[f] = index % sizes[f];
            index /= sizes[f];
        }
        digits
    }

    pub fn pack(&self, digits: [usize; 7]) -> usize {
        self.factor_sizes()
            .iter()
            .zip(digits)
            .fold(0, |acc, (size, d)| acc * size + d)
    }

    pub fn config(&self, index: usize) -> MpnnCellConfig {
        let [d, a, h, g, act, u, t] = self.unpack(index);
        MpnnCellConfig {
            state_dim: self.dims[d],
            attention: self.attentions[a],
            heads: self.heads[h],
            aggregator: self.aggregators[g],
            activation: self.activations[act],
            update: self.updates[u],
            repetitions: self.repetitions[t],
        }
    }

    pub fn index_of(&self, cfg: &MpnnCellConfig) -> Option<usize> {
        let pos = |found: Option<usize>| found;
        let digits = [
            pos(self.dims.iter().position(|v| *v == cfg.state_dim))?,
            pos(self.attentions.iter().position(|v| *v == cfg.attention))?,
            pos(self.heads.iter().position(|v| *v == cfg.heads))?,
            pos(self.aggregators.iter().position(|v| *v == cfg.aggregator))?,
            pos(self.activations.iter().position(|v| *v == cfg.activation))?,
            pos(self.updates.iter().position(|v| *v == cfg.update))?,
            pos(self.repetitions.iter().position(|v| *v == cfg.repetitions))?,
        ];
        Some(self.pack(digits))
    }

    /// Per-factor operation names, e.g. `dim(32)`, `attn(gat)`.
    pub fn factor_names(&self) -> Vec<Vec<String>> {
        vec![
            self.dims.iter().map(|v| format!("dim({v})")).collect(),
            self.attentions.iter().map(|v| format!("attn({v})")).collect(),
            self.heads.iter().map(|v| format!("heads({v})")).collect(),
            self.aggregators.iter().map(|v| format!("agg({v})")).collect(),
            self.activations.iter().map(|v| format!("act({v})")).collect(),
            self.updates.iter().map(|v| format!("update({v})")).collect(),
            self.repetitions.iter().map(|v| format!("reps({v})")).collect(),
        ]
    }
}

/// Decoded choices of one MPNN cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MpnnCellConfig {
    pub state_dim: usize,
    pub attention: AttentionKind,
    pub heads: usize,
    pub aggregator: Aggregator,
    pub activation: Activation,
    pub update: UpdateKind,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariableNode {
    Cell(CellMenu),
    /// Two operations: 0 = empty, 1 = identity.
    Skip(SkipAnchor),
    Gather(Vec<GatherKind>),
    /// Generic node with `n` unnamed operations.
    Plain(usize),
}

impl VariableNode {
    pub fn num_choices(&self) -> usize {
        match self {
            VariableNode::Cell(m) => m.count(),
            VariableNode::Skip(_) => 2,
            VariableNode::Gather(g) => g.len(),
            VariableNode::Plain(n) => *n,
        }
    }
}

/// One decoded operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Choice {
    Cell(MpnnCellConfig),
    Skip { anchor: SkipAnchor, active: bool },
    Gather(GatherKind),
    Plain(usize),
}

/// Decoded architecture in pipeline form.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub cells: Vec<MpnnCellConfig>,
    pub skips: Vec<(SkipAnchor, bool)>,
    pub gather: GatherKind,
}

impl Architecture {
    pub fn active_skips(&self) -> impl Iterator<Item = SkipAnchor> + '_ {
        self.skips.iter().filter(|(_, on)| *on).map(|(a, _)| *a)
    }
}

/// Ordered variable nodes with their operation lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceTable {
    nodes: Vec<VariableNode>,
}

impl Default for ChoiceTable {
    fn default() -> Self {
        Self::stacked(CellMenu::default(), GatherKind::DEFAULT_SET.to_vec())
    }
}

impl ChoiceTable {
    pub fn new(nodes: Vec<VariableNode>) -> Self {
        Self { nodes }
    }

    /// Three cells sharing `menu`, the six default skips, one gather node.
    /// Vector layout: `cell1, cell2, cell3, skip x6, gather`.
    pub fn stacked(menu: CellMenu, gathers: Vec<GatherKind>) -> Self {
        let mut nodes: Vec<VariableNode> = (0..3).map(|_| VariableNode::Cell(menu.clone())).collect();
        nodes.extend(DEFAULT_SKIPS.iter().map(|a| VariableNode::Skip(*a)));
        nodes.push(VariableNode::Gather(gathers));
        Self { nodes }
    }

    /// Same layout with six operations per cell: dim {4, 8} x attention
    /// {constant, gcn, gat}; every other factor fixed.
    pub fn miniature() -> Self {
        Self::stacked(
            CellMenu {
                dims: vec![4, 8],
                attentions: vec![AttentionKind::Constant, AttentionKind::Gcn, AttentionKind::Gat],
                heads: vec![1],
                aggregators: vec![Aggregator::Sum],
                activations: vec![Activation::Relu],
                updates: vec![UpdateKind::Mlp],
                repetitions: vec![1],
            },
            GatherKind::DEFAULT_SET.to_vec(),
        )
    }

    pub fn nodes(&self) -> &[VariableNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn choice_counts(&self) -> Vec<usize> {
        self.nodes.iter().map(VariableNode::num_choices).collect()
    }

    /// Exact number of architectures.
    pub fn cardinality(&self) -> BigUint {
        self.nodes
            .iter()
            .map(|n| BigUint::from(n.num_choices()))
            .product()
    }

    pub fn validate(&self, p: &ArchitectureVector) -> Result<()> {
        if p.len() != self.nodes.len() {
            return Err(NasError::InvalidArchitecture(format!(
                "vector has {} entries, table has {} nodes",
                p.len(),
                self.nodes.len()
            )));
        }
        for (i, (v, n)) in p.0.iter().zip(&self.nodes).enumerate() {
            if *v >= n.num_choices() {
                return Err(NasError::InvalidArchitecture(format!(
                    "entry {i} = {v} out of range 0..{}",
                    n.num_choices()
                )));
            }
        }
        Ok(())
    }

    /// Each coordinate drawn uniformly and independently.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchitectureVector {
        ArchitectureVector(
            self.nodes
                .iter()
                .map(|n| rng.gen_range(0..n.num_choices()))
                .collect(),
        )
    }

    /// Changes exactly one coordinate: a uniformly chosen node (among nodes
    /// with more than one operation) gets a uniformly chosen different value.
    pub fn mutate<R: Rng + ?Sized>(&self, parent: &ArchitectureVector, rng: &mut R) -> ArchitectureVector {
        let mutable: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].num_choices() > 1)
            .collect();
        let mut child = parent.clone();
        if mutable.is_empty() {
            return child;
        }
        let node = mutable[rng.gen_range(0..mutable.len())];
        let n = self.nodes[node].num_choices();
        let mut v = rng.gen_range(0..n - 1);
        if v >= parent.0[node] {
            v += 1;
        }
        child.0[node] = v;
        child
    }

    pub fn decode(&self, p: &ArchitectureVector) -> Result<Vec<Choice>> {
        self.validate(p)?;
        Ok(p.0
            .iter()
            .zip(&self.nodes)
            .map(|(&v, node)| match node {
                VariableNode::Cell(menu) => Choice::Cell(menu.config(v)),
                VariableNode::Skip(anchor) => Choice::Skip {
                    anchor: *anchor,
                    active: v == 1,
                },
                VariableNode::Gather(kinds) => Choice::Gather(kinds[v]),
                VariableNode::Plain(_) => Choice::Plain(v),
            })
            .collect())
    }

    pub fn encode(&self, choices: &[Choice]) -> Result<ArchitectureVector> {
        if choices.len() != self.nodes.len() {
            return Err(NasError::InvalidArchitecture(format!(
                "{} choices for {} nodes",
                choices.len(),
                self.nodes.len()
            )));
        }
        let mismatch = |i: usize| NasError::InvalidArchitecture(format!("choice {i} not in its node's menu"));
        let mut out = Vec::with_capacity(choices.len());
        for (i, (c, node)) in choices.iter().zip(&self.nodes).enumerate() {
            let v = match (c, node) {
                (Choice::Cell(cfg), VariableNode::Cell(menu)) => menu.index_of(cfg),
                (Choice::Skip { anchor, active }, VariableNode::Skip(a)) if anchor == a => {
                    Some(usize::from(*active))
                }
                (Choice::Gather(k), VariableNode::Gather(kinds)) => kinds.iter().position(|x| x == k),
                (Choice::Plain(v), VariableNode::Plain(n)) if v < n => Some(*v),
                _ => None,
            };
            out.push(v.ok_or_else(|| mismatch(i))?);
        }
        Ok(ArchitectureVector(out))
    }

    /// Decodes into pipeline form; requires at least one cell, exactly one
    /// gather node, and skips pointing forward along
    /// `input -> cell1 -> ... -> gather`.
    pub fn decode_architecture(&self, p: &ArchitectureVector) -> Result<Architecture> {
        let mut cells = Vec::new();
        let mut skips = Vec::new();
        let mut gather = None;
        for c in self.decode(p)? {
            match c {
                Choice::Cell(cfg) => cells.push(cfg),
                Choice::Skip { anchor, active } => skips.push((anchor, active)),
                Choice::Gather(k) if gather.is_none() => gather = Some(k),
                Choice::Gather(_) => {
                    return Err(NasError::InvalidArchitecture("more than one gather node".into()))
                }
                Choice::Plain(_) => {
                    return Err(NasError::InvalidArchitecture("plain nodes cannot be built".into()))
                }
            }
        }
        let gather = gather.ok_or_else(|| NasError::InvalidArchitecture("no gather node".into()))?;
        if cells.is_empty() {
            return Err(NasError::InvalidArchitecture("no MPNN cells".into()));
        }
        let order = |e: Endpoint| match e {
            Endpoint::Input => Some(0),
            Endpoint::Cell(i) if (1..=cells.len()).contains(&i) => Some(i),
            Endpoint::Gather => Some(cells.len() + 1),
            Endpoint::Cell(_) => None,
        };
        for (a, _) in &skips {
            match (order(a.from), order(a.to)) {
                (Some(f), Some(t)) if t >= f + 2 => {}
                _ => {
                    return Err(NasError::InvalidArchitecture(format!("skip {a} is not a forward skip")))
                }
            }
        }
        Ok(Architecture {
            cells,
            skips,
            gather,
        })
    }

    /// Names of every (node, operation) pair in operation-vector order.
    pub fn operation_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut cell_no = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                VariableNode::Cell(menu) => {
                    cell_no += 1;
                    for factor in menu.factor_names() {
                        names.extend(factor.into_iter().map(|n| format!("{n}[cell{cell_no}]")));
                    }
                }
                VariableNode::Skip(a) => {
                    names.push(format!("noskip({a})"));
                    names.push(format!("skip({a})"));
                }
                VariableNode::Gather(kinds) => {
                    names.extend(kinds.iter().map(|k| format!("gather({k})")));
                }
                VariableNode::Plain(n) => {
                    names.extend((0..*n).map(|v| format!("node{i}({v})")));
                }
            }
        }
        names
    }
}

/// Architecture as one operation index per variable node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchitectureVector(pub Vec<usize>);

impl ArchitectureVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
            + self.0.len().abs_diff(other.0.len())
    }
}

impl fmt::Display for ArchitectureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchitectureVector {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self)
            .map_err(|e| NasError::InvalidArchitecture(format!("'{s}': {e}")))
    }
}

impl Serialize for ArchitectureVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArchitectureVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_cardinality() {
        let t = ChoiceTable::default();
        assert_eq!(t.cardinality().to_string(), "23626761124184064");
        assert_eq!(CellMenu::default().count(), 32_256);
        assert_eq!(t.len(), 10);
    }

    #[test]
    fn single_binary_node() {
        assert_eq!(ChoiceTable::new(vec![VariableNode::Plain(2)]).cardinality(), BigUint::from(2u8));
    }

    #[test]
    fn zero_vector_decodes_to_first_options() {
        let t = ChoiceTable::default();
        let a = t.decode_architecture(&ArchitectureVector::zeros(10)).unwrap();
        let first = MpnnCellConfig {
            state_dim: 4,
            attention: AttentionKind::Constant,
            heads: 1,
            aggregator: Aggregator::Mean,
            activation: Activation::Sigmoid,
            update: UpdateKind::Gru,
            repetitions: 1,
        };
        assert_eq!(a.cells, vec![first; 3]);
        assert!(a.skips.iter().all(|(_, on)| !on));
        assert_eq!(a.gather, GatherKind::PoolSum);
    }

    #[test]
    fn last_gather_is_flatten() {
        let t = ChoiceTable::default();
        let mut p = ArchitectureVector::zeros(10);
        p.0[9] = 10;
        assert_eq!(t.decode_architecture(&p).unwrap().gather, GatherKind::Flatten);
        p.0[9] = 11;
        assert!(t.decode(&p).is_err());
    }

    #[test]
    fn mixed_radix_order() {
        let menu = CellMenu::default();
        assert_eq!(menu.config(1).repetitions, 2);
        assert_eq!(menu.config(6).update, UpdateKind::Mlp);
        assert_eq!(menu.config(32_255).state_dim, 32);
        assert_eq!(menu.config(32_255).repetitions, 6);
        assert_eq!(menu.config(3 * 8064).state_dim, 32);
    }

    #[test]
    fn mutation_of_binary_node_flips_it() {
        let t = ChoiceTable::new(vec![VariableNode::Plain(1), VariableNode::Skip(DEFAULT_SKIPS[0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ArchitectureVector(vec![0, 1]);
        assert_eq!(t.mutate(&p, &mut rng), ArchitectureVector(vec![0, 0]));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let t = ChoiceTable::default();
        let a = t.sample_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        let b = t.sample_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn vector_text_format() {
        let p: ArchitectureVector = "1203,0,5,1,0,1,1,0,1,7".parse().unwrap();
        assert_eq!(p.0[0], 1203);
        assert_eq!(p.to_string(), "1203,0,5,1,0,1,1,0,1,7");
        assert!("1,x".parse::<ArchitectureVector>().is_err());
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"1203,0,5,1,0,1,1,0,1,7\"");
    }

    #[test]
    fn operation_names_follow_scheme() {
        let names = ChoiceTable::default().operation_names();
        assert_eq!(names.len(), 125);
        assert_eq!(names[3], "dim(32)[cell1]");
        assert_eq!(names[6], "attn(gat)[cell1]");
        assert!(names.contains(&"skip(input->cell2)".to_string()));
        assert_eq!(names.last().unwrap(), "gather(flatten)");
    }

    #[test]
    fn gather_names_round_trip() {
        for k in GatherKind::DEFAULT_SET {
            assert_eq!(k.to_string().parse::<GatherKind>().unwrap(), k);
        }
        assert!("pool-median".parse::<GatherKind>().is_err());
    }
}
