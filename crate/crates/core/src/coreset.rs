//! Distributed coreset construction: every node profiles its local k-means
//! cost, the server splits a global size budget into per-node center and
//! sample counts, and every node reports its k-means centers plus records
//! drawn with probability proportional to their squared distance to the
//! nearest center.
//!
//! Sample weights are `cost / (m · dist²)` and a center keeps
//! `|cluster| − Σ sample weights in its cluster`, so the weights of a node
//! add up to the node size unless a center weight had to be clipped at 0.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, nearest_center_sq_dists, KmeansConfig};
use crate::datakit::{Dataset, RecordId};
use crate::nn::Sample;
use crate::{derive_seed, rng_from_seed, Error, Result};

/// Appends `label · τ` (τ = ⌈√d⌉) to a feature vector so that clustering
/// keeps classes apart, and decodes labels of the resulting centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelAugmentation {
    tau: f64,
    num_classes: usize,
}

impl LabelAugmentation {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        LabelAugmentation {
            tau: (feature_dim as f64).sqrt().ceil().max(1.0),
            num_classes,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn augment(&self, features: &[f64], label: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(features.len() + 1);
        v.extend_from_slice(features);
        v.push(label as f64 * self.tau);
        v
    }

    /// Nearest label to the last coordinate, clamped to the class range.
    pub fn decode(&self, augmented: &[f64]) -> usize {
        let raw = (augmented[augmented.len() - 1] / self.tau).round();
        raw.clamp(0.0, self.num_classes.saturating_sub(1) as f64) as usize
    }

    fn augment_all(&self, data: &Dataset, ids: &[RecordId]) -> Vec<Vec<f64>> {
        ids.iter()
            .map(|&id| self.augment(data.features(id), data.label(id)))
            .collect()
    }
}

/// k-means cost of one node's data for each `k` in the grid.
pub fn local_cost_profile(
    data: &Dataset,
    ids: &[RecordId],
    k_grid: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let aug = LabelAugmentation::new(data.feature_dim(), data.num_classes());
    let points = aug.augment_all(data, ids);
    k_grid
        .iter()
        .map(|&k| {
            let r = kmeans(&points, k, &KmeansConfig::with_seed(derive_seed(seed, k as u64)))?;
            Ok((k, r.cost))
        })
        .collect()
}

/// Powers of two up to `max_k`, always ending at `max_k`.
pub fn default_k_grid(max_k: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut k = 1;
    while k < max_k {
        grid.push(k);
        k *= 2;
    }
    grid.push(max_k.max(1));
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeBudget {
    pub centers: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub nodes: Vec<NodeBudget>,
}

impl BudgetAllocation {
    pub fn total(&self) -> usize {
        self.nodes.iter().map(|b| b.centers + b.samples).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    /// Split the budget into a center pool (`round(total · fraction)`) and a
    /// sample pool, then share each pool across nodes in proportion to the
    /// nodes' k = 1 costs.
    Proportional { center_fraction: f64 },
    Explicit(Vec<NodeBudget>),
}

/// Largest-remainder apportionment of `pool` by `shares`; leftover units go
/// to the largest remainders, ties to the lowest index.
fn apportion(pool: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| pool as f64 * s / total).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(pool.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// `apportion` with a per-node ceiling; overflow is re-apportioned among
/// nodes that still have room.
fn apportion_capped(pool: usize, shares: &[f64], caps: &[usize]) -> Vec<usize> {
    let mut out = vec![0usize; shares.len()];
    let mut left = pool;
    while left > 0 {
        let room: Vec<usize> = out.iter().zip(caps).map(|(&o, &c)| c - o).collect();
        let mut live: Vec<f64> = shares
            .iter()
            .zip(&room)
            .map(|(&s, &r)| if r > 0 { s } else { 0.0 })
            .collect();
        if live.iter().sum::<f64>() <= 0.0 {
            live = room.iter().map(|&r| r as f64).collect();
        }
        if live.iter().sum::<f64>() <= 0.0 {
            break;
        }
        let step = apportion(left, &live);
        for ((o, s), r) in out.iter_mut().zip(step).zip(&room) {
            let take = s.min(*r);
            *o += take;
            left -= take;
        }
    }
    out
}

pub fn allocate_budget(
    profiles: &[Vec<(usize, f64)>],
    node_sizes: &[usize],
    total_size: usize,
    rule: &AllocationRule,
) -> Result<BudgetAllocation> {
    if profiles.len() != node_sizes.len() || node_sizes.is_empty() {
        return Err(Error::domain("one cost profile per node is required"));
    }
    let data_size: usize = node_sizes.iter().sum();
    if total_size > data_size {
        return Err(Error::domain(format!(
            "coreset size {total_size} exceeds the {data_size} available records"
        )));
    }
    let nodes = match rule {
        AllocationRule::Explicit(nodes) => {
            if nodes.len() != node_sizes.len() {
                return Err(Error::domain("explicit allocation must list every node"));
            }
            let sum: usize = nodes.iter().map(|b| b.centers + b.samples).sum();
            if sum != total_size {
                return Err(Error::domain(format!(
                    "explicit allocation sums to {sum}, expected {total_size}"
                )));
            }
            nodes.clone()
        }
        AllocationRule::Proportional { center_fraction } => {
            if !(0.0..=1.0).contains(center_fraction) {
                return Err(Error::domain(format!("center fraction {center_fraction} outside [0, 1]")));
            }
            let mut costs = Vec::with_capacity(profiles.len());
            for (i, p) in profiles.iter().enumerate() {
                match p.iter().find(|(k, _)| *k == 1) {
                    Some(&(_, c)) => costs.push(c),
                    None if node_sizes[i] == 0 => costs.push(0.0),
                    None => return Err(Error::domain(format!("node {i} has no k = 1 cost"))),
                }
            }
            let shares: Vec<f64> = if costs.iter().sum::<f64>() > 0.0 {
                costs
            } else {
                node_sizes.iter().map(|&n| n as f64).collect()
            };
            let center_pool = ((total_size as f64) * center_fraction).round() as usize;
            let centers = apportion_capped(center_pool, &shares, node_sizes);
            let samples = apportion(total_size - center_pool, &shares);
            let mut nodes: Vec<NodeBudget> = centers
                .into_iter()
                .zip(samples)
                .map(|(centers, samples)| NodeBudget { centers, samples })
                .collect();
            ensure_one_center(&mut nodes, node_sizes)?;
            nodes
        }
    };
    for (i, (b, &n)) in nodes.iter().zip(node_sizes).enumerate() {
        if b.centers > n {
            return Err(Error::domain(format!(
                "node {i} asked for {} centers but holds {n} records",
                b.centers
            )));
        }
        if n > 0 && b.centers == 0 && b.samples > 0 {
            return Err(Error::domain(format!("node {i} needs at least one center to sample")));
        }
    }
    Ok(BudgetAllocation { nodes })
}

/// Every nonempty node needs a center to define sampling distances.
fn ensure_one_center(nodes: &mut [NodeBudget], sizes: &[usize]) -> Result<()> {
    for i in 0..nodes.len() {
        if sizes[i] == 0 || nodes[i].centers > 0 {
            continue;
        }
        if nodes[i].samples > 0 {
            nodes[i].samples -= 1;
            nodes[i].centers += 1;
            continue;
        }
        let sample_donor = (0..nodes.len())
            .filter(|&j| nodes[j].samples > 0 && nodes[j].centers + nodes[j].samples > 1)
            .max_by_key(|&j| (nodes[j].samples, std::cmp::Reverse(j)));
        let center_donor = (0..nodes.len())
            .filter(|&j| nodes[j].centers > 1)
            .max_by_key(|&j| (nodes[j].centers, std::cmp::Reverse(j)));
        match (sample_donor, center_donor) {
            (Some(j), _) => nodes[j].samples -= 1,
            (None, Some(j)) => nodes[j].centers -= 1,
            (None, None) => {
                return Err(Error::domain("coreset budget too small to give every node a center"))
            }
        }
        nodes[i].centers += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetCenter {
    /// Center in raw feature space (label coordinate stripped).
    pub features: Vec<f64>,
    pub weight: f64,
    pub label: usize,
    pub cluster_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetSample {
    pub record: RecordId,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalCoreset {
    pub node_id: usize,
    pub node_size: usize,
    pub centers: Vec<CoresetCenter>,
    pub samples: Vec<CoresetSample>,
    pub construction_seed: u64,
    /// Clustering cost of the node in the label-augmented space.
    pub local_cost: f64,
    /// Total weight lost by clipping negative center weights at 0.
    pub clipped_deficiency: f64,
}

impl LocalCoreset {
    pub fn weight_sum(&self) -> f64 {
        self.centers.iter().map(|c| c.weight).sum::<f64>()
            + self.samples.iter().map(|s| s.weight).sum::<f64>()
    }
}

/// Sampling distribution proportional to squared distances; uniform when
/// every distance is zero.
pub fn sensitivity_probabilities(sq_dists: &[f64]) -> Vec<f64> {
    let total: f64 = sq_dists.iter().sum();
    if total > 0.0 {
        sq_dists.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / sq_dists.len() as f64; sq_dists.len()]
    }
}

pub fn build_local_coreset(
    data: &Dataset,
    ids: &[RecordId],
    node_id: usize,
    budget: NodeBudget,
    kmeans_config: &KmeansConfig,
) -> Result<LocalCoreset> {
    let n = ids.len();
    let NodeBudget { centers: k, samples: m } = budget;
    if k > n || m > n {
        return Err(Error::domain(format!(
            "node {node_id}: budget ({k} centers, {m} samples) exceeds its {n} records"
        )));
    }
    if n == 0 || k == 0 {
        if m > 0 {
            return Err(Error::domain(format!("node {node_id}: samples need at least one center")));
        }
        return Ok(LocalCoreset {
            node_id,
            node_size: n,
            centers: Vec::new(),
            samples: Vec::new(),
            construction_seed: kmeans_config.seed,
            local_cost: 0.0,
            clipped_deficiency: 0.0,
        });
    }
    let aug = LabelAugmentation::new(data.feature_dim(), data.num_classes());
    let points = aug.augment_all(data, ids);
    let clustering = kmeans(&points, k, kmeans_config)?;
    let nearest = nearest_center_sq_dists(&points, &clustering.centers)?;
    let sq: Vec<f64> = nearest.iter().map(|&(_, d)| d).collect();
    let local_cost: f64 = sq.iter().sum();

    let mut cluster_sizes = vec![0usize; k];
    for &(c, _) in &nearest {
        cluster_sizes[c] += 1;
    }
    let mut center_weights: Vec<f64> = cluster_sizes.iter().map(|&s| s as f64).collect();

    let mut rng = rng_from_seed(derive_seed(kmeans_config.seed, 0x5A3F));
    let mut samples = Vec::with_capacity(m);
    if m > 0 {
        let draw: Box<dyn Fn(&mut crate::Rng) -> usize> = if local_cost > 0.0 {
            let dist = WeightedIndex::new(&sq).map_err(|e| Error::Numeric(e.to_string()))?;
            Box::new(move |rng| dist.sample(rng))
        } else {
            Box::new(move |rng| rng.gen_range(0..n))
        };
        for _ in 0..m {
            let i = draw(&mut rng);
            let weight = if local_cost > 0.0 {
                local_cost / (m as f64 * sq[i])
            } else {
                n as f64 / m as f64
            };
            center_weights[nearest[i].0] -= weight;
            samples.push(CoresetSample {
                record: ids[i],
                weight,
            });
        }
    }

    let mut clipped_deficiency = 0.0;
    let centers = clustering
        .centers
        .iter()
        .zip(center_weights)
        .zip(cluster_sizes)
        .map(|((c, w), cluster_size)| {
            if w < 0.0 {
                clipped_deficiency -= w;
            }
            CoresetCenter {
                features: c[..c.len() - 1].to_vec(),
                weight: w.max(0.0),
                label: aug.decode(c),
                cluster_size,
            }
        })
        .collect();
    if clipped_deficiency > 0.0 {
        log::warn!("node {node_id}: clipped {clipped_deficiency:.4} of negative center weight");
    }
    Ok(LocalCoreset {
        node_id,
        node_size: n,
        centers,
        samples,
        construction_seed: kmeans_config.seed,
        local_cost,
        clipped_deficiency,
    })
}

/// Union of all local coresets as seen by the server (and the adversary).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalCoreset {
    nodes: Vec<LocalCoreset>,
    center_boundaries: Vec<Range<usize>>,
    exposed_samples: BTreeSet<RecordId>,
    feature_dim: usize,
    full_data: bool,
}

pub fn merge(locals: Vec<LocalCoreset>, feature_dim: usize) -> Result<GlobalCoreset> {
    if locals.is_empty() {
        return Err(Error::domain("no local coresets to merge"));
    }
    let mut seen = BTreeSet::new();
    let mut center_boundaries = Vec::with_capacity(locals.len());
    let mut start = 0;
    let mut exposed_samples = BTreeSet::new();
    for l in &locals {
        if !seen.insert(l.node_id) {
            return Err(Error::domain(format!("node {} reported twice", l.node_id)));
        }
        if let Some(c) = l.centers.iter().find(|c| c.features.len() != feature_dim) {
            return Err(Error::domain(format!(
                "node {} reported a {}-dimensional center, expected {feature_dim}",
                l.node_id,
                c.features.len()
            )));
        }
        center_boundaries.push(start..start + l.centers.len());
        start += l.centers.len();
        exposed_samples.extend(l.samples.iter().map(|s| s.record));
    }
    Ok(GlobalCoreset {
        nodes: locals,
        center_boundaries,
        exposed_samples,
        feature_dim,
        full_data: false,
    })
}

/// Degenerate coreset holding every training record with weight 1.
pub fn full_data_coreset(data: &Dataset, shards: &[Vec<RecordId>]) -> Result<GlobalCoreset> {
    let locals = shards
        .iter()
        .enumerate()
        .map(|(node_id, ids)| LocalCoreset {
            node_id,
            node_size: ids.len(),
            centers: Vec::new(),
            samples: ids
                .iter()
                .map(|&record| CoresetSample { record, weight: 1.0 })
                .collect(),
            construction_seed: 0,
            local_cost: 0.0,
            clipped_deficiency: 0.0,
        })
        .collect();
    let mut g = merge(locals, data.feature_dim())?;
    g.full_data = true;
    Ok(g)
}

/// Runs all three construction steps over the node shards.
pub fn build_distributed_coreset(
    data: &Dataset,
    shards: &[Vec<RecordId>],
    total_size: usize,
    rule: &AllocationRule,
    k_grid: Option<&[usize]>,
    kmeans_config: &KmeansConfig,
) -> Result<(BudgetAllocation, GlobalCoreset)> {
    use rayon::prelude::*;

    let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
    if total_size == sizes.iter().sum::<usize>() && !matches!(rule, AllocationRule::Explicit(_)) {
        let nodes = sizes
            .iter()
            .map(|&n| NodeBudget { centers: 0, samples: n })
            .collect();
        return Ok((BudgetAllocation { nodes }, full_data_coreset(data, shards)?));
    }
    let profiles = shards
        .par_iter()
        .enumerate()
        .map(|(i, ids)| {
            if ids.is_empty() {
                return Ok(Vec::new());
            }
            let grid = match k_grid {
                Some(g) => g.iter().copied().filter(|&k| k <= ids.len()).collect(),
                None => vec![1],
            };
            local_cost_profile(data, ids, &grid, derive_seed(kmeans_config.seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let allocation = allocate_budget(&profiles, &sizes, total_size, rule)?;
    let locals = shards
        .par_iter()
        .zip(&allocation.nodes)
        .enumerate()
        .map(|(i, (ids, &budget))| {
            let cfg = KmeansConfig {
                seed: derive_seed(kmeans_config.seed, 1000 + i as u64),
                ..kmeans_config.clone()
            };
            build_local_coreset(data, ids, i, budget, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((allocation, merge(locals, data.feature_dim())?))
}

impl GlobalCoreset {
    pub fn nodes(&self) -> &[LocalCoreset] {
        &self.nodes
    }

    /// Index range of each node's centers within [`Self::centers`].
    pub fn center_boundaries(&self) -> &[Range<usize>] {
        &self.center_boundaries
    }

    pub fn exposed_samples(&self) -> &BTreeSet<RecordId> {
        &self.exposed_samples
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_full_data(&self) -> bool {
        self.full_data
    }

    pub fn is_centers_only(&self) -> bool {
        self.nodes.iter().all(|n| n.samples.is_empty())
    }

    pub fn num_centers(&self) -> usize {
        self.center_boundaries.last().map_or(0, |r| r.end)
    }

    /// Number of weighted points (centers plus samples).
    pub fn len(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.centers.len() + n.samples.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All centers, node by node.
    pub fn centers(&self) -> impl Iterator<Item = &CoresetCenter> {
        self.nodes.iter().flat_map(|n| &n.centers)
    }

    /// True when every given record appears as an exposed sample.
    pub fn exposes_all(&self, ids: &[RecordId]) -> bool {
        ids.iter().all(|id| self.exposed_samples.contains(id))
    }

    /// Weighted training samples, node by node, centers before samples.
    /// With `normalize` the weights are rescaled to average 1.
    pub fn training_samples<'a>(&'a self, data: &'a Dataset, normalize: bool) -> Vec<Sample<'a>> {
        let mut out = Vec::with_capacity(self.len());
        for node in &self.nodes {
            out.extend(
                node.centers
                    .iter()
                    .map(|c| Sample::weighted(&c.features, c.label, c.weight)),
            );
            out.extend(
                node.samples
                    .iter()
                    .map(|s| Sample::weighted(data.features(s.record), data.label(s.record), s.weight)),
            );
        }
        if normalize && !out.is_empty() {
            let mean = out.iter().map(|s| s.weight).sum::<f64>() / out.len() as f64;
            if mean > 0.0 && mean != 1.0 {
                out.iter_mut().for_each(|s| s.weight /= mean);
            }
        }
        out
    }

    /// One row per weighted point: `weight,label,x_1..x_d`.
    pub fn write_csv(&self, data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(w, "weight,label").map_err(io)?;
        for j in 0..self.feature_dim {
            write!(w, ",x{j}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for s in self.training_samples(data, false) {
            write!(w, "{},{}", s.weight, s.label).map_err(io)?;
            for v in s.features {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
