//! Compiles a decoded architecture into a trainable stacked-MPNN model.
//!
//! The model runs on the packed form of a batch (real nodes and edges only),
//! so zero padding never reaches the arithmetic. Node-layout outputs
//! (`pool-*`, `flatten`) are scattered back into the model's `n_max` slots.

use std::fmt::Write as _;
use std::sync::Arc;

use mpnas_tensor::nn::{glorot_uniform, Dense, GruCell};
use mpnas_tensor::{Activation, Index, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NasError, Result};
use crate::graph_data::{GraphBatch, PackedGraphs};
use crate::search_space::{
    Aggregator, Architecture, ArchitectureVector, AttentionKind, ChoiceTable, Endpoint, GatherKind,
    MpnnCellConfig, SkipAnchor, UpdateKind,
};

/// Width of the two dense layers between the gather node and the head.
pub const HIDDEN_WIDTH: usize = 32;

/// Every bias starts here rather than at zero: all-zero inputs (self-loop
/// features, dead ReLU states) would otherwise sit exactly on a kink.
const BIAS_INIT: f64 = 0.01;

/// Input widths and padded node count a model is compiled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub node_width: usize,
    pub edge_width: usize,
    pub n_max: usize,
    pub num_targets: usize,
}

#[derive(Debug, Clone)]
struct AttentionHead {
    w: Dense,
    /// `a_l`/`a_r` halves of the score vector, or `W_G` for gen-linear.
    a: Vec<ParamId>,
}

#[derive(Debug, Clone)]
enum Update {
    Gru(GruCell),
    Mlp(Dense),
}

#[derive(Debug, Clone)]
struct Cell {
    cfg: MpnnCellConfig,
    embed: Dense,
    edge_hidden: Dense,
    edge_out: Dense,
    heads: Vec<AttentionHead>,
    update: Update,
}

#[derive(Debug, Clone)]
enum Gather {
    Plain(GatherKind),
    AttentionPool { gate: Dense, value: Dense },
    AttentionSumPool { score: Dense },
}

#[derive(Debug, Clone)]
struct Skip {
    anchor: SkipAnchor,
    proj: Dense,
}

/// A built model: layer wiring plus its named parameters.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub architecture: Architecture,
    pub dims: ModelDims,
    pub params: ParamStore,
    cells: Vec<Cell>,
    skips: Vec<Skip>,
    gather_kind: GatherKind,
    gather: Gather,
    gather_width: usize,
    head: [Dense; 3],
}

/// Decodes `p` against `table` and builds it.
pub fn build(table: &ChoiceTable, p: &ArchitectureVector, dims: ModelDims, seed: u64) -> Result<CompiledModel> {
    CompiledModel::new(table.decode_architecture(p)?, dims, seed)
}

impl CompiledModel {
    pub fn new(architecture: Architecture, dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.num_targets == 0 || dims.n_max == 0 || dims.node_width == 0 {
            return Err(NasError::Config(format!("degenerate model dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut cells = Vec::with_capacity(architecture.cells.len());
        let mut width = dims.node_width;
        for (i, cfg) in architecture.cells.iter().enumerate() {
            let name = format!("cell{}", i + 1);
            cells.push(Cell::new(&mut store, &name, *cfg, width, dims.edge_width, &mut rng));
            width = cfg.state_dim;
        }
        let last_width = width;

        let out_width = |e: Endpoint| match e {
            Endpoint::Input => dims.node_width,
            Endpoint::Cell(i) => architecture.cells[i - 1].state_dim,
            Endpoint::Gather => unreachable!("skips never start at the gather node"),
        };
        // a skip into X is summed with X's regular input, the output of the
        // node right before X
        let in_width = |e: Endpoint| match e {
            Endpoint::Cell(1) | Endpoint::Input => dims.node_width,
            Endpoint::Cell(i) => architecture.cells[i - 2].state_dim,
            Endpoint::Gather => last_width,
        };
        let skips = architecture
            .active_skips()
            .map(|anchor| Skip {
                anchor,
                proj: Dense::new(
                    &mut store,
                    &format!("skip({anchor})"),
                    out_width(anchor.from),
                    in_width(anchor.to),
                    true,
                    &mut rng,
                ),
            })
            .collect();

        let kind = architecture.gather;
        let (gather, gather_width) = match kind {
            GatherKind::PoolSum | GatherKind::PoolMean | GatherKind::PoolMax => (Gather::Plain(kind), dims.n_max),
            GatherKind::GatherSum | GatherKind::GatherMean | GatherKind::GatherMax => {
                (Gather::Plain(kind), last_width)
            }
            GatherKind::Flatten => (Gather::Plain(kind), dims.n_max * last_width),
            GatherKind::AttentionPool(f) => (
                Gather::AttentionPool {
                    gate: Dense::new(&mut store, "gather.gate", last_width, f, true, &mut rng),
                    value: Dense::new(&mut store, "gather.value", last_width, f, true, &mut rng),
                },
                f,
            ),
            GatherKind::AttentionSumPool => (
                Gather::AttentionSumPool {
                    score: Dense::new(&mut store, "gather.score", last_width, 1, false, &mut rng),
                },
                last_width,
            ),
        };

        let head = [
            Dense::new(&mut store, "dense1", gather_width, HIDDEN_WIDTH, true, &mut rng),
            Dense::new(&mut store, "dense2", HIDDEN_WIDTH, HIDDEN_WIDTH, true, &mut rng),
            Dense::new(&mut store, "output", HIDDEN_WIDTH, dims.num_targets, true, &mut rng),
        ];
        let biases: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".b")).collect();
        for id in biases {
            store.get_mut(id).data_mut().fill(BIAS_INIT);
        }

        Ok(Self {
            architecture,
            dims,
            params: store,
            cells,
            skips,
            gather_kind: kind,
            gather,
            gather_width,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Output width of the gather node.
    pub fn gather_width(&self) -> usize {
        self.gather_width
    }

    /// Full forward pass; returns a `B x K` node on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let g = batch.packed();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.cells.len() + 1);
        outputs.push(tape.constant(g.node_features.clone()));
        for (i, cell) in self.cells.iter().enumerate() {
            let x = self.with_skips(tape, &outputs, Endpoint::Cell(i + 1))?;
            let h = cell.forward(tape, &self.params, x, g)?;
            outputs.push(h);
        }
        let x = self.with_skips(tape, &outputs, Endpoint::Gather)?;
        let pooled = self.gather_packed(tape, x, g)?;
        let h = self.head[0].forward_act(tape, &self.params, pooled, Activation::Relu)?;
        let h = self.head[1].forward_act(tape, &self.params, h, Activation::Relu)?;
        Ok(self.head[2].forward(tape, &self.params, h)?)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        let d = &self.dims;
        let got = (batch.node_width(), batch.edge_width(), batch.num_targets());
        if got != (d.node_width, d.edge_width, d.num_targets) {
            return Err(NasError::InconsistentWidths(format!(
                "batch widths (nodes, edges, targets) = {got:?}, model expects ({}, {}, {})",
                d.node_width, d.edge_width, d.num_targets
            )));
        }
        if batch.dims.n_max > d.n_max && !self.gather_kind.reduces_nodes() {
            return Err(NasError::InconsistentWidths(format!(
                "batch pads to {} nodes, model was built for {}",
                batch.dims.n_max, d.n_max
            )));
        }
        Ok(())
    }

    /// Regular input of `target` plus every active skip projected into it.
    fn with_skips(&self, tape: &mut Tape, outputs: &[Var], target: Endpoint) -> Result<Var> {
        let mut x = *outputs.last().expect("input is always present");
        for skip in self.skips.iter().filter(|s| s.anchor.to == target) {
            let src = match skip.anchor.from {
                Endpoint::Input => outputs[0],
                Endpoint::Cell(i) => outputs[i],
                Endpoint::Gather => unreachable!("validated when decoding"),
            };
            let projected = skip.proj.forward(tape, &self.params, src)?;
            x = tape.add(x, projected)?;
        }
        Ok(x)
    }

    fn gather_packed(&self, tape: &mut Tape, h: Var, g: &PackedGraphs) -> Result<Var> {
        let b = g.num_graphs;
        let n_max = self.dims.n_max;
        Ok(match &self.gather {
            Gather::Plain(kind) => match kind {
                GatherKind::GatherSum => tape.segment_sum(h, &g.node_graph, b)?,
                GatherKind::GatherMean => tape.segment_mean(h, &g.node_graph, b)?,
                GatherKind::GatherMax => tape.segment_max(h, &g.node_graph, b)?,
                GatherKind::PoolSum | GatherKind::PoolMean | GatherKind::PoolMax => {
                    let r = match kind {
                        GatherKind::PoolSum => tape.row_sum(h)?,
                        GatherKind::PoolMean => tape.row_mean(h)?,
                        _ => tape.row_max(h)?,
                    };
                    let slots = model_slots(g, n_max);
                    let scattered = tape.segment_sum(r, &slots, b * n_max)?;
                    tape.reshape(scattered, &[b, n_max])?
                }
                GatherKind::Flatten => {
                    let w = tape.value(h).shape()[1];
                    let slots = model_slots(g, n_max);
                    let scattered = tape.segment_sum(h, &slots, b * n_max)?;
                    tape.reshape(scattered, &[b, n_max * w])?
                }
                GatherKind::AttentionPool(_) | GatherKind::AttentionSumPool => {
                    unreachable!("parameterized gathers have their own variant")
                }
            },
            Gather::AttentionPool { gate, value } => {
                let s = gate.forward(tape, &self.params, h)?;
                let s = tape.sigmoid(s);
                let v = value.forward(tape, &self.params, h)?;
                let gated = tape.mul(s, v)?;
                tape.segment_sum(gated, &g.node_graph, b)?
            }
            Gather::AttentionSumPool { score } => {
                let s = score.forward(tape, &self.params, h)?;
                let alpha = tape.segment_softmax(s, &g.node_graph, b)?;
                let weighted = tape.mul_col(h, alpha)?;
                tape.segment_sum(weighted, &g.node_graph, b)?
            }
        })
    }

    /// Runs cell `index` (0-based) alone on padded states `B x N x d_in`,
    /// returning padded `B x N x d` with zero rows at masked slots.
    pub fn cell_forward(&self, index: usize, h_in: &Tensor, batch: &GraphBatch) -> Result<Tensor> {
        let cell = self.cells.get(index).ok_or_else(|| {
            NasError::Config(format!("model has {} cells, asked for {index}", self.cells.len()))
        })?;
        let g = batch.packed();
        let x = pack_rows(h_in, g, batch.dims.n_max)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = cell.forward(&mut tape, &self.params, xv, g)?;
        Ok(unpack_rows(tape.value(out), g, batch.dims.n_max))
    }

    /// Normalized attention coefficients (one column per head) that cell
    /// `index` assigns to each packed edge for packed node states `h`
    /// (`num_nodes x d`).
    pub fn attention_coefficients(&self, index: usize, h: &Tensor, batch: &GraphBatch) -> Result<Tensor> {
        let cell = &self.cells[index];
        let g = batch.packed();
        let mut tape = Tape::inference();
        let hv = tape.constant(h.clone());
        let cols: Vec<Var> = match cell.fixed_coefficients(&mut tape, g) {
            Some(c) => vec![c],
            None => cell
                .heads
                .iter()
                .map(|head| cell.head_coefficients(&mut tape, &self.params, head, hv, g))
                .collect::<Result<_>>()?,
        };
        let out = tape.concat_cols(&cols)?;
        Ok(tape.value(out).clone())
    }

    /// Gather node alone on padded `B x N x F` node states.
    pub fn gather_forward(&self, h: &Tensor, batch: &GraphBatch) -> Result<Tensor> {
        let g = batch.packed();
        let x = pack_rows(h, g, batch.dims.n_max)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = self.gather_packed(&mut tape, xv, g)?;
        Ok(tape.value(out).clone())
    }

    /// Layer list with parameter counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let count = |prefix: &str| -> usize {
            self.params
                .iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .map(|(_, p)| p.value.len())
                .sum()
        };
        for (i, c) in self.cells.iter().enumerate() {
            let cfg = c.cfg;
            let name = format!("cell{}", i + 1);
            let _ = writeln!(
                s,
                "{name}: mpnn d={} attn={} heads={} agg={} act={} update={} T={}  params={}",
                cfg.state_dim,
                cfg.attention,
                cfg.heads,
                cfg.aggregator,
                cfg.activation,
                cfg.update,
                cfg.repetitions,
                count(&format!("{name}."))
            );
        }
        for skip in &self.skips {
            let name = format!("skip({})", skip.anchor);
            let _ = writeln!(
                s,
                "{name}: dense {}->{}  params={}",
                skip.proj.in_dim,
                skip.proj.out_dim,
                count(&format!("{name}."))
            );
        }
        let _ = writeln!(
            s,
            "gather: {} -> {}  params={}",
            self.gather_kind,
            self.gather_width,
            count("gather.")
        );
        for (name, d) in ["dense1", "dense2", "output"].iter().zip(&self.head) {
            let _ = writeln!(
                s,
                "{name}: dense {}->{}  params={}",
                d.in_dim,
                d.out_dim,
                count(&format!("{name}."))
            );
        }
        let _ = write!(s, "total params={}", self.num_params());
        s
    }
}

impl Cell {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: MpnnCellConfig,
        in_dim: usize,
        edge_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.state_dim;
        let embed = Dense::new(store, &format!("{name}.embed"), in_dim, d, true, rng);
        let edge_hidden = Dense::new(store, &format!("{name}.edge.hidden"), edge_dim, 2 * d, true, rng);
        let edge_out = Dense::new(store, &format!("{name}.edge.out"), 2 * d, d * d, true, rng);
        let heads = if cfg.attention.is_trainable() {
            (0..cfg.heads)
                .map(|k| {
                    let prefix = format!("{name}.att{k}");
                    let w = Dense::new(store, &format!("{prefix}.w"), d, d, false, rng);
                    let mut vec_param = |suffix: &str| {
                        store.add(format!("{prefix}.{suffix}"), glorot_uniform(rng, &[d, 1], d, 1))
                    };
                    let a = match cfg.attention {
                        AttentionKind::GenLinear => vec![vec_param("g")],
                        _ => vec![vec_param("a_l"), vec_param("a_r")],
                    };
                    AttentionHead { w, a }
                })
                .collect()
        } else {
            Vec::new()
        };
        let update = match cfg.update {
            UpdateKind::Gru => Update::Gru(GruCell::new(store, &format!("{name}.gru"), d, rng)),
            UpdateKind::Mlp => Update::Mlp(Dense::new(store, &format!("{name}.mlp"), 2 * d, d, true, rng)),
        };
        Self {
            cfg,
            embed,
            edge_hidden,
            edge_out,
            heads,
            update,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, g: &PackedGraphs) -> Result<Var> {
        let n = g.num_nodes();
        let cfg = self.cfg;
        let mut h = self.embed.forward(tape, store, x)?;

        // the edge network only sees distinct feature rows
        let ef = tape.constant(g.distinct_edge_features.clone());
        let hidden = self.edge_hidden.forward_act(tape, store, ef, Activation::Relu)?;
        let distinct = self.edge_out.forward(tape, store, hidden)?;
        let mats = tape.gather_rows(distinct, &g.edge_feature_row)?;
        let fixed = self.fixed_coefficients(tape, g);

        for _ in 0..cfg.repetitions {
            let h_src = tape.gather_rows(h, &g.edge_src)?;
            let base = tape.batched_matvec(mats, h_src)?;
            let m = match fixed {
                Some(alpha) => {
                    let msg = match cfg.attention {
                        AttentionKind::Constant => base,
                        _ => tape.mul_col(base, alpha)?,
                    };
                    aggregate(tape, cfg.aggregator, msg, &g.edge_dst, n)?
                }
                None => {
                    let mut total = None;
                    for head in &self.heads {
                        let alpha = self.head_coefficients(tape, store, head, h, g)?;
                        let msg = tape.mul_col(base, alpha)?;
                        let agg = aggregate(tape, cfg.aggregator, msg, &g.edge_dst, n)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, agg)?,
                            None => agg,
                        });
                    }
                    let total = total.expect("trainable attention has at least one head");
                    tape.scale(total, 1.0 / self.heads.len() as f64)
                }
            };
            let updated = match &self.update {
                Update::Gru(gru) => gru.forward(tape, store, h, m)?,
                Update::Mlp(dense) => {
                    let hm = tape.concat_cols(&[h, m])?;
                    dense.forward(tape, store, hm)?
                }
            };
            h = tape.activation(updated, cfg.activation);
        }
        Ok(h)
    }

    /// Coefficients of parameter-free kinds: `None` for trainable kinds.
    fn fixed_coefficients(&self, tape: &mut Tape, g: &PackedGraphs) -> Option<Var> {
        match self.cfg.attention {
            AttentionKind::Constant => Some(tape.constant(Tensor::filled(&[g.num_edges(), 1], 1.0))),
            AttentionKind::Gcn => {
                let data = g
                    .edge_src
                    .iter()
                    .zip(g.edge_dst.iter())
                    .map(|(&s, &d)| 1.0 / (g.in_degree[d] * g.in_degree[s]).sqrt())
                    .collect();
                Some(tape.constant(Tensor::new(vec![g.num_edges(), 1], data).expect("one per edge")))
            }
            _ => None,
        }
    }

    /// Softmax-normalized scores of one head over each node's incoming edges.
    fn head_coefficients(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        head: &AttentionHead,
        h: Var,
        g: &PackedGraphs,
    ) -> Result<Var> {
        let wh = head.w.forward(tape, store, h)?;
        let score = match self.cfg.attention {
            AttentionKind::GenLinear => {
                let wg = tape.param(store, head.a[0]);
                let v = tape.gather_rows(wh, &g.edge_dst)?;
                let w = tape.gather_rows(wh, &g.edge_src)?;
                let s = tape.add(v, w)?;
                let s = tape.tanh(s);
                tape.matmul(s, wg)?
            }
            kind => {
                let al = tape.param(store, head.a[0]);
                let ar = tape.param(store, head.a[1]);
                let left = tape.matmul(wh, al)?;
                let right = tape.matmul(wh, ar)?;
                // score(v, w) = a_l.Wh_v + a_r.Wh_w for edge w -> v
                let pair = |tape: &mut Tape, v: &Index, w: &Index| -> Result<Var> {
                    let l = tape.gather_rows(left, v)?;
                    let r = tape.gather_rows(right, w)?;
                    Ok(tape.add(l, r)?)
                };
                let forward = pair(tape, &g.edge_dst, &g.edge_src)?;
                match kind {
                    AttentionKind::Gat => tape.activation(forward, Activation::LeakyRelu),
                    AttentionKind::SymGat => {
                        let back = pair(tape, &g.edge_src, &g.edge_dst)?;
                        let a = tape.activation(forward, Activation::LeakyRelu);
                        let b = tape.activation(back, Activation::LeakyRelu);
                        tape.add(a, b)?
                    }
                    AttentionKind::Cos => forward,
                    AttentionKind::Linear => tape.tanh(forward),
                    _ => unreachable!("fixed kinds are handled separately"),
                }
            }
        };
        Ok(tape.segment_softmax(score, &g.edge_dst, g.num_nodes())?)
    }
}

fn aggregate(tape: &mut Tape, agg: Aggregator, msg: Var, dst: &Index, n: usize) -> Result<Var> {
    Ok(match agg {
        Aggregator::Sum => tape.segment_sum(msg, dst, n)?,
        Aggregator::Mean => tape.segment_mean(msg, dst, n)?,
        Aggregator::Max => tape.segment_max(msg, dst, n)?,
    })
}

/// Slot of each packed node in a `B x n_max` layout.
fn model_slots(g: &PackedGraphs, n_max: usize) -> Index {
    Arc::from(
        g.node_graph
            .iter()
            .zip(g.node_local.iter())
            .map(|(&graph, &local)| graph * n_max + local)
            .collect::<Vec<_>>(),
    )
}

fn pack_rows(h: &Tensor, g: &PackedGraphs, n_max: usize) -> Result<Tensor> {
    let s = h.shape();
    if s.len() != 3 || s[0] != g.num_graphs || s[1] != n_max {
        return Err(NasError::InconsistentWidths(format!(
            "node states {s:?} do not match a batch of {} graphs padded to {n_max}",
            g.num_graphs
        )));
    }
    let w = s[2];
    let data = g
        .node_slot
        .iter()
        .flat_map(|&slot| h.data()[slot * w..(slot + 1) * w].iter().copied())
        .collect();
    Ok(Tensor::new(vec![g.num_nodes(), w], data)?)
}

fn unpack_rows(x: &Tensor, g: &PackedGraphs, n_max: usize) -> Tensor {
    let w = x.shape()[1];
    let mut out = Tensor::zeros(&[g.num_graphs, n_max, w]);
    for (i, &slot) in g.node_slot.iter().enumerate() {
        out.data_mut()[slot * w..(slot + 1) * w].copy_from_slice(x.row(i));
    }
    out
}
