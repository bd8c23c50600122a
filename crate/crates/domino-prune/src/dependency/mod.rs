//! Channel-level dependency analysis.
//!
//! Builds the successor relation between output channels and input slots of
//! an absorbed graph, groups output channels into coparent equivalence
//! classes (channels that must be pruned together because they share a
//! downstream input slot), and derives concrete prune sets: the weight
//! slices and registered per-channel parameters that die together.
//!
//! Joins (EltwiseAdd) make the same-index channels of all producers feed the
//! same downstream slots; splits give one channel several successor slots;
//! grouped convolutions share each per-group input slot across all groups,
//! coupling the producer channels that map to the same slot. Closures are
//! answered from a union-find computed once per graph; the independent
//! fixpoint reference lives in [`oracle`].

pub mod oracle;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::graph::{ChannelRef, GroupMapping, LayerId, LayerOp, NetworkGraph, ParamRef, Side};

#[derive(Debug, Error, PartialEq)]
pub enum DependencyError {
    #[error("dependency analysis requires an absorbed graph")]
    NotAbsorbed,
    #[error("`{0:?}` is not an output channel of a producing layer")]
    BadSeed(ChannelRef),
    #[error("channel {0:?} is already pruned")]
    AlreadyPruned(ChannelRef),
}

/// Axis of a weight slice: output rows (`W[i, ..]`) or input columns
/// (`W[:, j, ..]`, spanning all groups).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SliceAxis {
    Output,
    Input,
}

/// One prunable slice of a weight tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct WeightSlice {
    pub layer: LayerId,
    pub axis: SliceAxis,
    pub index: usize,
}

/// Everything that is removed when a seed channel is pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSet {
    pub seed: ChannelRef,
    /// Output channels pruned together (weight-bearing layers only), sorted.
    pub coparents: Vec<ChannelRef>,
    /// Input slots that become dead, sorted.
    pub siblings: Vec<ChannelRef>,
    /// Weight slices to zero, sorted.
    pub weight_slices: Vec<WeightSlice>,
    /// Bias and absorbed activation parameters to zero, sorted.
    pub bias_params: Vec<ParamRef>,
}

impl PruneSet {
    /// Output channels pruned, as a count (the campaign's `set_size`).
    pub fn set_size(&self) -> usize {
        self.coparents.len()
    }
}

/// Channels and slots already pruned during a campaign.
#[derive(Debug, Clone, Default)]
pub struct PrunedMask {
    outputs: BTreeSet<ChannelRef>,
    slots: BTreeSet<ChannelRef>,
}

impl PrunedMask {
    pub fn new() -> PrunedMask {
        PrunedMask::default()
    }

    pub fn output_pruned(&self, layer: LayerId, index: usize) -> bool {
        self.outputs.contains(&ChannelRef::output(layer, index))
    }

    pub fn slot_pruned(&self, layer: LayerId, index: usize) -> bool {
        self.slots.contains(&ChannelRef::input_slot(layer, index))
    }

    pub fn overlaps(&self, set: &PruneSet) -> bool {
        set.coparents.iter().any(|c| self.outputs.contains(c))
            || set.siblings.iter().any(|s| self.slots.contains(s))
    }

    pub fn mark(&mut self, set: &PruneSet) {
        self.outputs.extend(set.coparents.iter().copied());
        self.slots.extend(set.siblings.iter().copied());
    }

    pub fn pruned_outputs(&self) -> impl Iterator<Item = &ChannelRef> {
        self.outputs.iter()
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Swap the grouped-conv slot mapping in the fast path (verification
    /// hook: the oracle must catch this).
    pub wrong_group_slot: bool,
}

#[derive(Debug, Clone)]
enum MetaKind {
    Input,
    Add,
    /// Flatten / SoftmaxLoss: no channels of their own.
    Transparent,
    Conv {
        m_out: usize,
        m_in: usize,
        kernel: usize,
        weight: String,
    },
    Fc {
        out_features: usize,
        in_features: usize,
        slot_group: usize,
        weight: String,
    },
}

#[derive(Debug, Clone)]
struct LayerMeta {
    name: String,
    kind: MetaKind,
    /// Registered per-channel parameters (own bias + absorbed BN/Bias).
    channel_params: Vec<Vec<ParamRef>>,
}

impl LayerMeta {
    fn weight_bearing(&self) -> bool {
        matches!(self.kind, MetaKind::Conv { .. } | MetaKind::Fc { .. })
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Channel-level dependency graph with precomputed coparent classes.
#[derive(Debug, Clone)]
pub struct DependencyGraph {
    meta: Vec<LayerMeta>,
    // flat producer-node space: Input/Conv2D/FullyConnected/EltwiseAdd channels
    producer_base: Vec<Option<usize>>,
    producers: Vec<(LayerId, usize)>,
    // flat slot space: Conv2D/FullyConnected input slots
    slots: Vec<(LayerId, usize)>,
    /// producer -> sorted successor slots
    succ: Vec<Vec<usize>>,
    class_of: Vec<usize>,
    classes: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn build(graph: &NetworkGraph) -> Result<DependencyGraph, DependencyError> {
        Self::build_with_faults(graph, FaultInjection::default())
    }

    #[doc(hidden)]
    pub fn build_with_faults(
        graph: &NetworkGraph,
        faults: FaultInjection,
    ) -> Result<DependencyGraph, DependencyError> {
        if !graph.is_absorbed() {
            return Err(DependencyError::NotAbsorbed);
        }

        let n = graph.layers().len();
        let mut meta = Vec::with_capacity(n);
        for l in graph.layers() {
            let kind = match &l.op {
                LayerOp::Input { .. } => Some(MetaKind::Input),
                LayerOp::EltwiseAdd => Some(MetaKind::Add),
                LayerOp::Conv2D {
                    in_channels,
                    out_channels,
                    kernel,
                    groups,
                    weight,
                    ..
                } => Some(MetaKind::Conv {
                    m_out: *out_channels,
                    m_in: in_channels / groups,
                    kernel: *kernel,
                    weight: weight.clone(),
                }),
                LayerOp::FullyConnected {
                    in_features,
                    out_features,
                    weight,
                    ..
                } => Some(MetaKind::Fc {
                    out_features: *out_features,
                    in_features: *in_features,
                    slot_group: graph.slot_group(l.id),
                    weight: weight.clone(),
                }),
                LayerOp::Flatten | LayerOp::SoftmaxLoss => None,
                // absorbed graphs contain no other kinds
                _ => return Err(DependencyError::NotAbsorbed),
            };
            let channel_params = match kind {
                Some(_) => (0..graph.out_channels(l.id))
                    .map(|c| l.channel_params(c))
                    .collect(),
                None => Vec::new(),
            };
            meta.push(LayerMeta {
                name: l.name.clone(),
                kind: kind.unwrap_or(MetaKind::Transparent),
                channel_params,
            });
        }

        // enumerate producer nodes and slots
        let mut producer_base = vec![None; n];
        let mut producers = Vec::new();
        let mut slot_base = vec![None; n];
        let mut slots = Vec::new();
        for l in graph.layers() {
            match &l.op {
                LayerOp::Input { .. }
                | LayerOp::Conv2D { .. }
                | LayerOp::FullyConnected { .. }
                | LayerOp::EltwiseAdd => {
                    producer_base[l.id.0] = Some(producers.len());
                    for c in 0..graph.out_channels(l.id) {
                        producers.push((l.id, c));
                    }
                }
                _ => {}
            }
            match &l.op {
                LayerOp::Conv2D { .. } | LayerOp::FullyConnected { .. } => {
                    slot_base[l.id.0] = Some(slots.len());
                    for s in 0..graph.in_slots(l.id) {
                        slots.push((l.id, s));
                    }
                }
                _ => {}
            }
        }

        // providers[layer][channel]: producer nodes visible at that channel
        // (the producing node itself, plus every transparent add upstream)
        let mut providers: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
        for &id in graph.topo() {
            let l = graph.layer(id);
            providers[id.0] = match &l.op {
                LayerOp::Input { .. }
                | LayerOp::Conv2D { .. }
                | LayerOp::FullyConnected { .. } => {
                    let base = producer_base[id.0].unwrap();
                    (0..graph.out_channels(id)).map(|c| vec![base + c]).collect()
                }
                LayerOp::EltwiseAdd => {
                    let base = producer_base[id.0].unwrap();
                    (0..graph.out_channels(id))
                        .map(|c| {
                            let mut v = vec![base + c];
                            for &p in graph.preds(id) {
                                v.extend(providers[p.0][c].iter().copied());
                            }
                            v.sort_unstable();
                            v.dedup();
                            v
                        })
                        .collect()
                }
                LayerOp::Flatten => providers[graph.preds(id)[0].0].clone(),
                _ => Vec::new(),
            };
        }

        // successor edges and slot feeders
        let mut succ = vec![Vec::new(); producers.len()];
        let mut feeders = vec![Vec::new(); slots.len()];
        for l in graph.layers() {
            let (slot_count, mapping): (usize, Box<dyn Fn(usize) -> usize>) = match &l.op {
                LayerOp::Conv2D {
                    in_channels,
                    groups,
                    mapping,
                    ..
                } => {
                    let m_in = in_channels / groups;
                    let g = *groups;
                    let mapping = if faults.wrong_group_slot && g > 1 {
                        match mapping {
                            GroupMapping::Interleaved => GroupMapping::Blocked,
                            GroupMapping::Blocked => GroupMapping::Interleaved,
                        }
                    } else {
                        *mapping
                    };
                    (m_in, Box::new(move |j| mapping.slot_of(j, m_in, g)))
                }
                LayerOp::FullyConnected { .. } => (graph.in_slots(l.id), Box::new(|j| j)),
                _ => continue,
            };
            debug_assert!(slot_count > 0);
            let pred = graph.preds(l.id)[0];
            let sbase = slot_base[l.id.0].unwrap();
            for j in 0..graph.out_channels(pred) {
                let s = sbase + mapping(j);
                for &p in &providers[pred.0][j] {
                    feeders[s].push(p);
                    let (pl, _) = producers[p];
                    if !matches!(meta[pl.0].kind, MetaKind::Add) {
                        succ[p].push(s);
                    }
                }
            }
        }
        for v in succ.iter_mut() {
            v.sort_unstable();
            v.dedup();
        }
        for v in feeders.iter_mut() {
            v.sort_unstable();
            v.dedup();
        }

        // coparent classes: union everything feeding a common slot
        let mut uf = UnionFind::new(producers.len());
        for fs in &feeders {
            for pair in fs.windows(2) {
                uf.union(pair[0], pair[1]);
            }
        }
        let mut class_of = vec![0usize; producers.len()];
        let mut root_to_class = std::collections::BTreeMap::new();
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for p in 0..producers.len() {
            let root = uf.find(p);
            let cid = *root_to_class.entry(root).or_insert_with(|| {
                classes.push(Vec::new());
                classes.len() - 1
            });
            class_of[p] = cid;
            classes[cid].push(p);
        }

        Ok(DependencyGraph {
            meta,
            producer_base,
            producers,
            slots,
            succ,
            class_of,
            classes,
        })
    }

    fn producer_flat(&self, c: ChannelRef) -> Option<usize> {
        if c.side != Side::Output {
            return None;
        }
        let base = self.producer_base.get(c.layer.0).copied().flatten()?;
        let flat = base + c.index;
        match self.producers.get(flat) {
            Some(&(l, i)) if l == c.layer && i == c.index => Some(flat),
            _ => None,
        }
    }

    fn channel_ref(&self, flat: usize) -> ChannelRef {
        let (l, c) = self.producers[flat];
        ChannelRef::output(l, c)
    }

    fn slot_ref(&self, flat: usize) -> ChannelRef {
        let (l, s) = self.slots[flat];
        ChannelRef::input_slot(l, s)
    }

    fn weight_bearing_flat(&self, flat: usize) -> bool {
        let (l, _) = self.producers[flat];
        self.meta[l.0].weight_bearing()
    }

    pub fn layer_name(&self, id: LayerId) -> &str {
        &self.meta[id.0].name
    }

    /// The consuming layer of an input slot.
    pub fn slot_owner(&self, slot: ChannelRef) -> Option<LayerId> {
        (slot.side == Side::InputSlot).then_some(slot.layer)
    }

    /// Direct successor slots of an output channel.
    pub fn successors(&self, c: ChannelRef) -> Result<Vec<ChannelRef>, DependencyError> {
        let flat = self.producer_flat(c).ok_or(DependencyError::BadSeed(c))?;
        Ok(self.succ[flat].iter().map(|&s| self.slot_ref(s)).collect())
    }

    /// Transitive coparent closure of `seed`: every weight-bearing output
    /// channel that must be pruned with it (including `seed`).
    pub fn coparents_closure(&self, seed: ChannelRef) -> Result<Vec<ChannelRef>, DependencyError> {
        let flat = self
            .producer_flat(seed)
            .ok_or(DependencyError::BadSeed(seed))?;
        let class = &self.classes[self.class_of[flat]];
        Ok(class
            .iter()
            .copied()
            .filter(|&p| self.weight_bearing_flat(p))
            .map(|p| self.channel_ref(p))
            .collect())
    }

    /// Input slots fed by any member of the coparent closure.
    pub fn siblings_closure(&self, seed: ChannelRef) -> Result<Vec<ChannelRef>, DependencyError> {
        let flat = self
            .producer_flat(seed)
            .ok_or(DependencyError::BadSeed(seed))?;
        let class = &self.classes[self.class_of[flat]];
        let mut out: BTreeSet<usize> = BTreeSet::new();
        for &p in class {
            out.extend(self.succ[p].iter().copied());
        }
        Ok(out.into_iter().map(|s| self.slot_ref(s)).collect())
    }

    /// Full prune set for a seed channel.
    pub fn prune_set(&self, seed: ChannelRef) -> Result<PruneSet, DependencyError> {
        let flat = self
            .producer_flat(seed)
            .ok_or(DependencyError::BadSeed(seed))?;
        if !self.weight_bearing_flat(flat) {
            return Err(DependencyError::BadSeed(seed));
        }
        let class = &self.classes[self.class_of[flat]];

        let coparents: Vec<ChannelRef> = class
            .iter()
            .copied()
            .filter(|&p| self.weight_bearing_flat(p))
            .map(|p| self.channel_ref(p))
            .collect();
        let mut sibling_flats: BTreeSet<usize> = BTreeSet::new();
        for &p in class {
            sibling_flats.extend(self.succ[p].iter().copied());
        }
        let siblings: Vec<ChannelRef> =
            sibling_flats.iter().map(|&s| self.slot_ref(s)).collect();

        let mut weight_slices = Vec::new();
        for c in &coparents {
            weight_slices.push(WeightSlice {
                layer: c.layer,
                axis: SliceAxis::Output,
                index: c.index,
            });
        }
        for s in &siblings {
            weight_slices.push(WeightSlice {
                layer: s.layer,
                axis: SliceAxis::Input,
                index: s.index,
            });
        }
        weight_slices.sort();

        let mut bias_params = Vec::new();
        for &p in class {
            let (l, c) = self.producers[p];
            bias_params.extend(self.meta[l.0].channel_params[c].iter().cloned());
        }
        bias_params.sort();
        bias_params.dedup();

        Ok(PruneSet {
            seed,
            coparents,
            siblings,
            weight_slices,
            bias_params,
        })
    }

    /// Like [`prune_set`](Self::prune_set) but fails if the seed's class is
    /// already (partly) pruned.
    pub fn prune_set_checked(
        &self,
        seed: ChannelRef,
        mask: &PrunedMask,
    ) -> Result<PruneSet, DependencyError> {
        if mask.output_pruned(seed.layer, seed.index) {
            return Err(DependencyError::AlreadyPruned(seed));
        }
        let set = self.prune_set(seed)?;
        if mask.overlaps(&set) {
            return Err(DependencyError::AlreadyPruned(seed));
        }
        Ok(set)
    }

    /// All coparent classes that contain at least one weight-bearing
    /// channel, each represented by its lowest member.
    pub fn all_classes(&self) -> Vec<PruneSet> {
        let mut out = Vec::new();
        for class in &self.classes {
            let seed = class
                .iter()
                .copied()
                .filter(|&p| self.weight_bearing_flat(p))
                .map(|p| self.channel_ref(p))
                .min();
            if let Some(seed) = seed {
                out.push(self.prune_set(seed).expect("class member is a valid seed"));
            }
        }
        out.sort_by_key(|s| s.seed);
        out
    }

    /// All output channels of weight-bearing layers, in id order.
    pub fn weight_bearing_channels(&self) -> Vec<ChannelRef> {
        self.producers
            .iter()
            .enumerate()
            .filter(|&(p, _)| self.weight_bearing_flat(p))
            .map(|(_, &(l, c))| ChannelRef::output(l, c))
            .collect()
    }

    /// Input slots of weight-bearing layers, in id order.
    pub fn all_slots(&self) -> Vec<ChannelRef> {
        self.slots
            .iter()
            .map(|&(l, s)| ChannelRef::input_slot(l, s))
            .collect()
    }

    /// Flat element ranges covered by a weight slice, with the tensor name.
    pub fn slice_elements(&self, slice: &WeightSlice) -> (&str, Vec<std::ops::Range<usize>>) {
        match (&self.meta[slice.layer.0].kind, slice.axis) {
            (
                MetaKind::Conv {
                    m_in, kernel, weight, ..
                },
                SliceAxis::Output,
            ) => {
                let row = m_in * kernel * kernel;
                (weight, vec![slice.index * row..(slice.index + 1) * row])
            }
            (
                MetaKind::Conv {
                    m_out,
                    m_in,
                    kernel,
                    weight,
                    ..
                },
                SliceAxis::Input,
            ) => {
                let kk = kernel * kernel;
                let row = m_in * kk;
                let ranges = (0..*m_out)
                    .map(|o| o * row + slice.index * kk..o * row + (slice.index + 1) * kk)
                    .collect();
                (weight, ranges)
            }
            (
                MetaKind::Fc {
                    in_features, weight, ..
                },
                SliceAxis::Output,
            ) => (
                weight,
                vec![slice.index * in_features..(slice.index + 1) * in_features],
            ),
            (
                MetaKind::Fc {
                    out_features,
                    in_features,
                    slot_group,
                    weight,
                    ..
                },
                SliceAxis::Input,
            ) => {
                let ranges = (0..*out_features)
                    .map(|o| {
                        o * in_features + slice.index * slot_group
                            ..o * in_features + (slice.index + 1) * slot_group
                    })
                    .collect();
                (weight, ranges)
            }
            _ => unreachable!("weight slices only reference weight-bearing layers"),
        }
    }
}
