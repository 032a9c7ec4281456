//! Operation importance: a random forest from ±1 operation vectors to
//! rewards, and path-based decomposition of its predictions into a bias
//! plus one contribution per operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::search::evaluation_seed;
use crate::search_space::{ArchitectureVector, ChoiceTable, VariableNode};
use crate::trainer::EvaluationRecord;

/// Fewest usable records the forest is fitted on.
pub const MIN_RECORDS: usize = 10;

/// Block sizes of the operation vector, one per (node, factor).
fn blocks(table: &ChoiceTable) -> Vec<usize> {
    table
        .nodes()
        .iter()
        .flat_map(|n| match n {
            VariableNode::Cell(menu) => menu.factor_sizes().to_vec(),
            other => vec![other.num_choices()],
        })
        .collect()
}

/// Length of the operation vector for `table`.
pub fn num_operations(table: &ChoiceTable) -> usize {
    blocks(table).iter().sum()
}

/// ±1 presence encoding; MPNN cells expand into their seven factors.
pub fn encode_operations(table: &ChoiceTable, p: &ArchitectureVector) -> Result<Vec<f64>> {
    table.validate(p)?;
    let mut digits = Vec::new();
    for (node, &v) in table.nodes().iter().zip(p.as_slice()) {
        match node {
            VariableNode::Cell(menu) => digits.extend(menu.unpack(v)),
            _ => digits.push(v),
        }
    }
    let mut a = Vec::with_capacity(num_operations(table));
    for (size, d) in blocks(table).into_iter().zip(digits) {
        a.extend((0..size).map(|i| if i == d { 1.0 } else { -1.0 }));
    }
    Ok(a)
}

/// Inverse of [`encode_operations`].
pub fn decode_operations(table: &ChoiceTable, a: &[f64]) -> Result<ArchitectureVector> {
    let sizes = blocks(table);
    if a.len() != sizes.iter().sum::<usize>() {
        return Err(NasError::InvalidArchitecture(format!(
            "operation vector has {} entries, table needs {}",
            a.len(),
            sizes.iter().sum::<usize>()
        )));
    }
    let mut digits = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for size in sizes {
        let block = &a[at..at + size];
        let on: Vec<usize> = (0..size).filter(|&i| block[i] > 0.0).collect();
        if on.len() != 1 {
            return Err(NasError::InvalidArchitecture(format!(
                "block at {at} has {} present operations",
                on.len()
            )));
        }
        digits.push(on[0]);
        at += size;
    }
    let mut it = digits.into_iter();
    let mut p = Vec::with_capacity(table.len());
    for node in table.nodes() {
        match node {
            VariableNode::Cell(menu) => {
                let mut d = [0; 7];
                d.iter_mut().for_each(|x| *x = it.next().expect("counted above"));
                p.push(menu.pack(d));
            }
            _ => p.push(it.next().expect("counted above")),
        }
    }
    Ok(ArchitectureVector(p))
}

/// Tree node. Every node keeps the mean response of its region; internal
/// nodes send `a[feature] > 0` (operation present) to `present`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub mean: f64,
    pub samples: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub absent: usize,
    pub present: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Node 0 is the root.
    nodes: Vec<TreeNode>,
}

/// Bias plus per-coordinate credits; `bias + contrib.sum()` is the
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub bias: f64,
    pub contrib: Vec<f64>,
}

impl Contributions {
    pub fn prediction(&self) -> f64 {
        self.bias + self.contrib.iter().sum::<f64>()
    }
}

impl RegressionTree {
    /// Hand-built tree; children must point forward within `nodes`.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(NasError::Config("a tree needs at least a root".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if let Some(s) = n.split {
                if s.absent <= i || s.present <= i || s.absent >= nodes.len() || s.present >= nodes.len() {
                    return Err(NasError::Config(format!("node {i} has an invalid child")));
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i].split {
                Some(s) => 1 + go(t, s.absent).max(go(t, s.present)),
                None => 0,
            }
        }
        go(self, 0)
    }

    /// Node indices from the root to the leaf reached by `a`.
    pub fn path(&self, a: &[f64]) -> Vec<usize> {
        let mut i = 0;
        let mut out = vec![0];
        while let Some(s) = self.nodes[i].split {
            i = if a[s.feature] > 0.0 { s.present } else { s.absent };
            out.push(i);
        }
        out
    }

    pub fn predict(&self, a: &[f64]) -> f64 {
        self.nodes[*self.path(a).last().expect("path has the root")].mean
    }

    /// Root mean as bias; each step credits (child mean - parent mean) to
    /// the feature tested at the parent.
    pub fn decompose(&self, a: &[f64], k: usize) -> Contributions {
        let mut contrib = vec![0.0; k];
        let path = self.path(a);
        for w in path.windows(2) {
            let parent = &self.nodes[w[0]];
            let f = parent.split.expect("internal node").feature;
            contrib[f] += self.nodes[w[1]].mean - parent.mean;
        }
        Contributions {
            bias: self.nodes[0].mean,
            contrib,
        }
    }

    /// CART on the rows `idx` of `x`: variance-reduction splits over all
    /// features, grown until a node is pure, has fewer than two samples, or
    /// no split reduces the squared error.
    ///
    /// Equal-gain splits go to the feature whose present side has the
    /// higher mean, then to the lowest index; complementary coordinates
    /// (a two-way node's pair) always tie and this picks the one whose
    /// presence raises the response.
    pub fn fit(x: &[Vec<f64>], y: &[f64], idx: &[usize]) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        tree.grow(x, y, idx.to_vec());
        tree
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[f64], idx: Vec<usize>) -> usize {
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| y[i]).sum();
        let mean = sum / n as f64;
        let me = self.nodes.len();
        self.nodes.push(TreeNode {
            mean,
            samples: n,
            split: None,
        });
        let pure = idx.iter().all(|&i| y[i] == y[idx[0]]);
        if n < 2 || pure {
            return me;
        }
        let Some(feature) = best_split(x, y, &idx, sum) else {
            return me;
        };
        let (present, absent): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i][feature] > 0.0);
        let absent = self.grow(x, y, absent);
        let present = self.grow(x, y, present);
        self.nodes[me].split = Some(Split {
            feature,
            absent,
            present,
        });
        me
    }
}

fn best_split(x: &[Vec<f64>], y: &[f64], idx: &[usize], sum: f64) -> Option<usize> {
    let n = idx.len() as f64;
    let k = x[idx[0]].len();
    let base = sum * sum / n;
    // (gain, present-side mean, feature)
    let mut best: Option<(f64, f64, usize)> = None;
    for f in 0..k {
        let (mut np, mut sp) = (0usize, 0.0);
        for &i in idx {
            if x[i][f] > 0.0 {
                np += 1;
                sp += y[i];
            }
        }
        if np == 0 || np == idx.len() {
            continue;
        }
        let na = n - np as f64;
        let sa = sum - sp;
        let gain = sp * sp / np as f64 + sa * sa / na - base;
        let pm = sp / np as f64;
        let tol = 1e-12 * base.abs().max(1.0);
        if gain <= tol {
            continue;
        }
        best = match best {
            None => Some((gain, pm, f)),
            Some((bg, bpm, bf)) => {
                if gain > bg + tol || ((gain - bg).abs() <= tol && pm > bpm) {
                    Some((gain, pm, f))
                } else {
                    Some((bg, bpm, bf))
                }
            }
        };
    }
    best.map(|(_, _, f)| f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<RegressionTree>,
    pub num_features: usize,
}

/// Bagged CART trees; tree `j` draws its bootstrap sample from a seed
/// derived from `(seed, j)`.
pub fn fit_forest(x: &[Vec<f64>], y: &[f64], n_trees: usize, seed: u64) -> Result<RandomForest> {
    if x.len() != y.len() {
        return Err(NasError::Config(format!("{} inputs for {} responses", x.len(), y.len())));
    }
    if x.len() < MIN_RECORDS {
        return Err(NasError::NotEnoughRecords {
            need: MIN_RECORDS,
            got: x.len(),
        });
    }
    if n_trees == 0 {
        return Err(NasError::Config("a forest needs at least one tree".into()));
    }
    let k = x[0].len();
    if x.iter().any(|r| r.len() != k) {
        return Err(NasError::InconsistentWidths("operation vectors differ in length".into()));
    }
    let n = x.len();
    let trees = (0..n_trees)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(evaluation_seed(seed, j as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            RegressionTree::fit(x, y, &idx)
        })
        .collect();
    Ok(RandomForest { trees, num_features: k })
}

impl RandomForest {
    pub fn predict(&self, a: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(a)).sum::<f64>() / self.trees.len() as f64
    }

    /// Tree decompositions averaged over the forest.
    pub fn decompose(&self, a: &[f64]) -> Contributions {
        let j = self.trees.len() as f64;
        let mut out = Contributions {
            bias: 0.0,
            contrib: vec![0.0; self.num_features],
        };
        for t in &self.trees {
            let c = t.decompose(a, self.num_features);
            out.bias += c.bias;
            out.contrib.iter_mut().zip(&c.contrib).for_each(|(o, v)| *o += v);
        }
        out.bias /= j;
        out.contrib.iter_mut().for_each(|v| *v /= j);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Importance {
    /// Mean of `a_i * contrib_i` over the samples.
    pub values: Vec<f64>,
    /// Up to five `(coordinate, value)` pairs with the largest positive values.
    pub top_positive: Vec<(usize, f64)>,
    /// Up to five with the most negative values.
    pub top_negative: Vec<(usize, f64)>,
}

pub fn importance(forest: &RandomForest, x: &[Vec<f64>]) -> Result<Importance> {
    if x.is_empty() {
        return Err(NasError::NotEnoughRecords { need: 1, got: 0 });
    }
    let k = forest.num_features;
    let mut values = vec![0.0; k];
    for a in x {
        let c = forest.decompose(a);
        for j in 0..k {
            values[j] += a[j] * c.contrib[j];
        }
    }
    values.iter_mut().for_each(|v| *v /= x.len() as f64);
    Ok(rank(values))
}

fn rank(values: Vec<f64>) -> Importance {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top_positive = order.iter().filter(|&&i| values[i] > 0.0).take(5).map(|&i| (i, values[i])).collect();
    let top_negative = order
        .iter()
        .rev()
        .filter(|&&i| values[i] < 0.0)
        .take(5)
        .map(|&i| (i, values[i]))
        .collect();
    Importance {
        values,
        top_positive,
        top_negative,
    }
}

/// Named importance of every operation, from the successful records of
/// an evaluation log.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub names: Vec<String>,
    pub importance: Importance,
    pub records_used: usize,
}

impl ImportanceReport {
    /// `(name, value)` sorted by value, largest first.
    pub fn sorted(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(self.importance.values.iter().copied())
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn summary(&self) -> String {
        let mut s = format!("records used: {}\ntop positive:\n", self.records_used);
        for (i, v) in &self.importance.top_positive {
            s.push_str(&format!("  {} {v:+.6}\n", self.names[*i]));
        }
        s.push_str("top negative:\n");
        for (i, v) in &self.importance.top_negative {
            s.push_str(&format!("  {} {v:+.6}\n", self.names[*i]));
        }
        s
    }
}

pub fn analyze_log(log: &[EvaluationRecord], table: &ChoiceTable, n_trees: usize, seed: u64) -> Result<ImportanceReport> {
    let usable: Vec<&EvaluationRecord> = log.iter().filter(|r| r.is_ok()).collect();
    if usable.len() < MIN_RECORDS {
        return Err(NasError::NotEnoughRecords {
            need: MIN_RECORDS,
            got: usable.len(),
        });
    }
    let x = usable
        .iter()
        .map(|r| encode_operations(table, &r.p))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = usable.iter().map(|r| r.reward).collect();
    let forest = fit_forest(&x, &y, n_trees, seed)?;
    Ok(ImportanceReport {
        names: table.operation_names(),
        importance: importance(&forest, &x)?,
        records_used: usable.len(),
    })
}
