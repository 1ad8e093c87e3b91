//! Per-image tile graphs, the graph attention classifier and graph augmentation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::cube::{write_atomic, Reader};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"HSF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMask {
    Train,
    Val,
    Test,
}

/// Nodes are tiles of one image. `edges` holds each undirected pair once as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGraph {
    /// Tile id of each node in the source tile map.
    pub node_ids: Vec<usize>,
    pub feature_dim: usize,
    /// Row-major `N x feature_dim`; may be empty when features are computed later.
    pub features: Vec<f32>,
    pub edges: Vec<(usize, usize)>,
    pub coords: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
    pub mask: Vec<SplitMask>,
}

/// Directed kNN by Euclidean distance (ties to the lower id), symmetrized.
pub fn build_knn_graph(coords: &[(f64, f64)], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = coords.len();
    if n <= k {
        return Err(Error::Config(format!("kNN needs more than k={k} nodes, got {n}")));
    }
    if coords.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain("non-finite node coordinate".into()));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, &(xi, yi)) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k, cmp);
        }
        for &(_, j) in &cand[..k] {
            edges.push((i.min(j), i.max(j)));
        }
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Node degrees of an undirected edge list.
pub fn degrees(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut d = vec![0; n];
    for &(a, b) in edges {
        d[a] += 1;
        d[b] += 1;
    }
    d
}

impl TileGraph {
    /// Builds the kNN graph over `coords`. Features start empty.
    pub fn new(
        node_ids: Vec<usize>,
        coords: Vec<(f64, f64)>,
        labels: Vec<usize>,
        weights: Vec<f32>,
        mask: Vec<SplitMask>,
        k: usize,
    ) -> Result<Self> {
        let n = node_ids.len();
        if coords.len() != n || labels.len() != n || weights.len() != n || mask.len() != n {
            return Err(Error::shape("tile_graph", "per-node arrays differ in length"));
        }
        let edges = build_knn_graph(&coords, k)?;
        Ok(TileGraph {
            node_ids,
            feature_dim: 0,
            features: Vec::new(),
            edges,
            coords,
            labels,
            weights,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn set_features(&mut self, dim: usize, features: Vec<f32>) -> Result<()> {
        if features.len() != dim * self.len() {
            return Err(Error::shape(
                "set_features",
                format!("{} values for {} nodes x {dim}", features.len(), self.len()),
            ));
        }
        self.feature_dim = dim;
        self.features = features;
        Ok(())
    }

    /// Keeps nodes `keep` (in the given order) and their induced edges.
    pub fn subgraph(&self, keep: &[usize]) -> TileGraph {
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                let (a, b) = (remap[a], remap[b]);
                (a != usize::MAX && b != usize::MAX).then(|| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        let f = self.feature_dim;
        let features = if self.features.is_empty() {
            Vec::new()
        } else {
            keep.iter()
                .flat_map(|&i| self.features[i * f..(i + 1) * f].iter().copied())
                .collect()
        };
        TileGraph {
            node_ids: keep.iter().map(|&i| self.node_ids[i]).collect(),
            feature_dim: f,
            features,
            edges,
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            mask: keep.iter().map(|&i| self.mask[i]).collect(),
        }
    }

    /// Writes `<stem>.json` (nodes, edges) and `<stem>.bin` (features).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let nodes: Vec<NodeRecord> = (0..self.len())
            .map(|i| NodeRecord {
                id: self.node_ids[i],
                x: self.coords[i].0,
                y: self.coords[i].1,
                label: self.labels[i],
                weight: self.weights[i],
                mask: self.mask[i],
            })
            .collect();
        let doc = GraphDoc {
            feature_dim: self.feature_dim,
            nodes,
            edges: self.edges.clone(),
        };
        write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(&doc)?)?;
        let mut bin = Vec::with_capacity(12 + 4 * self.features.len());
        bin.extend_from_slice(FEATURE_MAGIC);
        bin.write_all(&(self.len() as u32).to_le_bytes())?;
        bin.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        for v in &self.features {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&stem.with_extension("bin"), &bin)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let doc: GraphDoc = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let mut r = Reader::new(&bytes);
        r.magic(FEATURE_MAGIC)?;
        let n = r.u32("node count")? as usize;
        let f = r.u32("feature dim")? as usize;
        if n != doc.nodes.len() || f != doc.feature_dim {
            return Err(Error::format(4, "feature blob header disagrees with node list"));
        }
        let features = r.f32s(n * f, "features")?;
        r.finish("feature blob")?;
        if let Some(&(a, b)) = doc.edges.iter().find(|&&(a, b)| a >= b || b >= n) {
            return Err(Error::Domain(format!("invalid edge ({a}, {b})")));
        }
        Ok(TileGraph {
            node_ids: doc.nodes.iter().map(|n| n.id).collect(),
            feature_dim: f,
            features,
            edges: doc.edges,
            coords: doc.nodes.iter().map(|n| (n.x, n.y)).collect(),
            labels: doc.nodes.iter().map(|n| n.label).collect(),
            weights: doc.nodes.iter().map(|n| n.weight).collect(),
            mask: doc.nodes.iter().map(|n| n.mask).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    x: f64,
    y: f64,
    label: usize,
    weight: f32,
    mask: SplitMask,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    feature_dim: usize,
    nodes: Vec<NodeRecord>,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphAugment {
    /// Jitter amplitude as a fraction of the tiling grid step.
    pub jitter_fraction: f64,
    pub drop_range: (f64, f64),
    pub k: usize,
}

impl Default for GraphAugment {
    fn default() -> Self {
        GraphAugment {
            jitter_fraction: 0.5,
            drop_range: (0.0, 0.3),
            k: 2,
        }
    }
}

/// Jitters centroids by up to `jitter_fraction * grid_step`, drops a random fraction of
/// nodes and rebuilds the kNN edges on what remains.
pub fn augment_graph(
    graph: &TileGraph,
    grid_step: f64,
    seed: u64,
    params: &GraphAugment,
) -> Result<TileGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.len();
    let amp = params.jitter_fraction * grid_step;
    let jittered: Vec<(f64, f64)> = graph
        .coords
        .iter()
        .map(|&(x, y)| {
            if amp > 0.0 {
                (x + rng.gen_range(-amp..=amp), y + rng.gen_range(-amp..=amp))
            } else {
                (x, y)
            }
        })
        .collect();
    let (lo, hi) = params.drop_range;
    let frac = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let n_drop = (frac * n as f64).round() as usize;
    let mut keep: Vec<usize> = (0..n).collect();
    if n_drop > 0 && n - n_drop.min(n) > params.k {
        keep.shuffle(&mut rng);
        keep.truncate(n - n_drop);
        keep.sort_unstable();
    }
    let mut out = graph.subgraph(&keep);
    out.coords = keep.iter().map(|&i| jittered[i]).collect();
    out.edges = build_knn_graph(&out.coords, params.k)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub negative_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            in_dim: 48,
            hidden: 64,
            layers: 3,
            heads: 3,
            num_classes: crate::NUM_CLASSES,
            dropout: 0.3,
            negative_slope: 0.2,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.in_dim == 0 {
            return Err(Error::Config("GAT sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("GAT dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct GatLayer {
    w: ParamId,
    att_src: ParamId,
    att_dst: ParamId,
    bias: ParamId,
    out_dim: usize,
    last: bool,
}

/// Incoming-edge list with implicit self loops, grouped by target node.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub nodes: usize,
}

impl EdgeIndex {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * edges.len() + n);
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::shape("edge_index", format!("bad edge ({a}, {b}) for {n} nodes")));
            }
            pairs.push((b, a));
            pairs.push((a, b));
        }
        pairs.extend((0..n).map(|i| (i, i)));
        pairs.sort_unstable();
        pairs.dedup();
        Ok(EdgeIndex {
            dst: pairs.iter().map(|p| p.0).collect(),
            src: pairs.iter().map(|p| p.1).collect(),
            nodes: n,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Gat {
    cfg: GatConfig,
    layers: Vec<GatLayer>,
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    /// `[N, num_classes]`.
    pub logits: Var,
    /// `attention[layer][head]` is an `[E, 1]` column aligned with the edge index.
    pub attention: Vec<Vec<Var>>,
    pub index: EdgeIndex,
}

impl Gat {
    pub fn init<T: Scalar, R: Rng>(
        cfg: &GatConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut fin = cfg.in_dim;
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let out = if last { cfg.num_classes } else { cfg.hidden };
            let h = cfg.heads;
            let p = |s: &str| format!("{prefix}.layer{l}.{s}");
            let gain = if l == 0 { 1.0 } else { 2.0 };
            let w = store.kaiming(&p("w"), &[fin, h * out], fin, gain, rng)?;
            let att_src = store.kaiming(&p("att_src"), &[out, h], out, 1.0, rng)?;
            let att_dst = store.kaiming(&p("att_dst"), &[out, h], out, 1.0, rng)?;
            let bias = store.zeros(&p("bias"), &[if last { out } else { h * out }], true)?;
            layers.push(GatLayer {
                w,
                att_src,
                att_dst,
                bias,
                out_dim: out,
                last,
            });
            fin = h * out;
        }
        Ok(Gat {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn bind<T: Scalar>(cfg: &GatConfig, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let get = |n: String| {
            store
                .id(&n)
                .ok_or_else(|| Error::Config(format!("missing parameter '{n}'")))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            layers.push(GatLayer {
                w: get(format!("{prefix}.layer{l}.w"))?,
                att_src: get(format!("{prefix}.layer{l}.att_src"))?,
                att_dst: get(format!("{prefix}.layer{l}.att_dst"))?,
                bias: get(format!("{prefix}.layer{l}.bias"))?,
                out_dim: if last { cfg.num_classes } else { cfg.hidden },
                last,
            });
        }
        Ok(Gat {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &GatConfig {
        &self.cfg
    }

    /// Node logits for features `x = [N, in_dim]` over the undirected `edges`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        edges: &[(usize, usize)],
        train: bool,
        dropout_seed: u64,
    ) -> Result<GatOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.in_dim {
            return Err(Error::shape(
                "gat_forward",
                format!("expected [N, {}], got {s:?}", self.cfg.in_dim),
            ));
        }
        let n = s[0];
        let index = EdgeIndex::new(n, edges)?;
        let slope = T::from_f64(self.cfg.negative_slope);
        let heads = self.cfg.heads;
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.last {
                h = tape.dropout(h, self.cfg.dropout, train, dropout_seed)?;
            }
            let w = tape.param(store, layer.w);
            let a_src = tape.param(store, layer.att_src);
            let a_dst = tape.param(store, layer.att_dst);
            let wh = tape.matmul(h, w)?;
            let fo = layer.out_dim;
            let mut outs = Vec::with_capacity(heads);
            let mut alphas = Vec::with_capacity(heads);
            for k in 0..heads {
                let whk = if heads == 1 { wh } else { tape.slice_cols(wh, k * fo, (k + 1) * fo)? };
                let ask = if heads == 1 { a_src } else { tape.slice_cols(a_src, k, k + 1)? };
                let adk = if heads == 1 { a_dst } else { tape.slice_cols(a_dst, k, k + 1)? };
                let s_src = tape.matmul(whk, ask)?;
                let s_dst = tape.matmul(whk, adk)?;
                let e_src = tape.gather_rows(s_src, &index.src)?;
                let e_dst = tape.gather_rows(s_dst, &index.dst)?;
                let e = tape.add(e_dst, e_src)?;
                let e = tape.leaky_relu(e, slope);
                let alpha = tape.segment_softmax(e, &index.dst, n)?;
                let msg = tape.gather_rows(whk, &index.src)?;
                let msg = tape.mul_col(msg, alpha)?;
                outs.push(tape.scatter_sum(msg, &index.dst, n)?);
                alphas.push(alpha);
            }
            let bias = tape.param(store, layer.bias);
            h = if layer.last {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                let mean = tape.scale(acc, T::ONE / T::from_usize(heads));
                tape.add_bias(mean, bias)?
            } else {
                let cat = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
                let b = tape.add_bias(cat, bias)?;
                tape.relu(b)
            };
            attention.push(alphas);
        }
        Ok(GatOutput {
            logits: h,
            attention,
            index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sorted(mut e: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
        e.sort_unstable();
        e
    }

    #[test]
    fn collinear_triple_is_complete() {
        let e = build_knn_graph(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 2).unwrap();
        assert_eq!(e, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn square_has_no_diagonals() {
        let c = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let e = build_knn_graph(&c, 2).unwrap();
        assert_eq!(e, sorted(vec![(0, 1), (1, 2), (2, 3), (0, 3)]));
    }

    #[test]
    fn too_few_nodes_is_config_error() {
        assert!(matches!(
            build_knn_graph(&[(0.0, 0.0), (1.0, 0.0)], 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ties_go_to_lower_id() {
        // Node 2 is equidistant from 0 and 1; both of those have a closer partner.
        let c = [(-1.0, 0.0), (1.0, 0.0), (0.0, 0.0), (-1.5, 0.0), (1.5, 0.0)];
        let e = build_knn_graph(&c, 1).unwrap();
        assert_eq!(e, vec![(0, 2), (0, 3), (1, 4)]);
    }

    fn line_graph(n: usize) -> TileGraph {
        TileGraph::new(
            (0..n).collect(),
            (0..n).map(|i| (i as f64 * 10.0, (i % 3) as f64)).collect(),
            (0..n).map(|i| i % 3).collect(),
            vec![1.0; n],
            vec![SplitMask::Train; n],
            2,
        )
        .unwrap()
    }

    #[test]
    fn identity_augmentation_keeps_graph() {
        let g = line_graph(20);
        let p = GraphAugment {
            jitter_fraction: 0.0,
            drop_range: (0.0, 0.0),
            k: 2,
        };
        assert_eq!(augment_graph(&g, 14.0, 5, &p).unwrap(), g);
    }

    #[test]
    fn dropping_thirty_percent_of_hundred() {
        let g = line_graph(100);
        let p = GraphAugment {
            jitter_fraction: 0.0,
            drop_range: (0.3, 0.3),
            k: 2,
        };
        let a = augment_graph(&g, 14.0, 9, &p).unwrap();
        assert_eq!(a.len(), 70);
        assert!(a.edges.iter().all(|&(i, j)| i < j && j < 70));
        for (i, &id) in a.node_ids.iter().enumerate() {
            assert_eq!(a.labels[i], g.labels[id]);
        }
    }

    #[test]
    fn dropping_is_skipped_on_tiny_graphs() {
        let g = line_graph(4);
        let p = GraphAugment {
            jitter_fraction: 0.0,
            drop_range: (0.5, 0.5),
            k: 2,
        };
        assert_eq!(augment_graph(&g, 14.0, 1, &p).unwrap().len(), 4);
    }

    #[test]
    fn graph_round_trip() {
        let mut g = line_graph(6);
        g.mask[2] = SplitMask::Test;
        g.set_features(2, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g");
        g.save(&stem).unwrap();
        assert_eq!(TileGraph::load(&stem).unwrap(), g);
    }

    fn one_layer(in_dim: usize, heads: usize) -> GatConfig {
        GatConfig {
            in_dim,
            hidden: in_dim,
            layers: 1,
            heads,
            num_classes: in_dim,
            dropout: 0.0,
            negative_slope: 0.2,
        }
    }

    #[test]
    fn identity_weights_on_uniform_features() {
        let cfg = one_layer(3, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gat = Gat::init(&cfg, "gat", &mut store, &mut rng).unwrap();
        let w = store.id("gat.layer0.w").unwrap();
        store.get_mut(w).value = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        let feats = [0.2, -0.7, 1.3];
        let n = 5;
        let x: Vec<f64> = (0..n).flat_map(|_| feats).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(&[n, 3], x.clone()).unwrap(), false);
        let edges = build_knn_graph(&[(0., 0.), (1., 0.), (2., 0.), (3., 0.), (4., 0.)], 2).unwrap();
        let out = gat.forward(&mut tape, &store, xv, &edges, false, 0).unwrap();
        for (a, b) in tape.value(out.logits).data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = GatConfig {
            in_dim: 4,
            hidden: 5,
            ..GatConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gat = Gat::init(&cfg, "gat", &mut store, &mut rng).unwrap();
        let n = 12;
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let edges = build_knn_graph(&coords, 2).unwrap();
        let x: Vec<f32> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(&[n, 4], x).unwrap(), false);
        let out = gat.forward(&mut tape, &store, xv, &edges, false, 0).unwrap();
        assert_eq!(out.attention.len(), 3);
        for layer in &out.attention {
            assert_eq!(layer.len(), 3);
            for &a in layer {
                let mut sums = vec![0f64; n];
                for (e, &v) in tape.value(a).data().iter().enumerate() {
                    sums[out.index.dst[e]] += v as f64;
                }
                assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
            }
        }
        assert_eq!(tape.shape(out.logits), &[n, 3]);
    }

    #[test]
    fn two_node_hand_computation() {
        // One layer, one head, 2-dim features and outputs.
        let cfg = one_layer(2, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gat = Gat::init(&cfg, "gat", &mut store, &mut rng).unwrap();
        let set = |s: &mut ParamStore<f64>, n: &str, v: Vec<f64>| {
            let id = s.id(n).unwrap();
            s.get_mut(id).value = v;
        };
        let w = [[1.0, 2.0], [-1.0, 0.5]];
        let (asrc, adst, bias) = ([0.3, -0.2], [0.1, 0.4], [0.05, -0.05]);
        set(&mut store, "gat.layer0.w", vec![w[0][0], w[0][1], w[1][0], w[1][1]]);
        set(&mut store, "gat.layer0.att_src", asrc.to_vec());
        set(&mut store, "gat.layer0.att_dst", adst.to_vec());
        set(&mut store, "gat.layer0.bias", bias.to_vec());
        let x = [[1.0, 0.5], [-0.3, 2.0]];

        // Oracle.
        let wh: Vec<[f64; 2]> = x
            .iter()
            .map(|r| {
                [
                    r[0] * w[0][0] + r[1] * w[1][0],
                    r[0] * w[0][1] + r[1] * w[1][1],
                ]
            })
            .collect();
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            let scores: Vec<f64> = (0..2).map(|j| lrelu(dot(adst, wh[i]) + dot(asrc, wh[j]))).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..2 {
                let a = scores[j].exp() / z;
                expect[i * 2] += a * wh[j][0];
                expect[i * 2 + 1] += a * wh[j][1];
            }
            expect[i * 2] += bias[0];
            expect[i * 2 + 1] += bias[1];
        }

        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(&[2, 2], vec![1.0, 0.5, -0.3, 2.0]).unwrap(), false);
        let out = gat.forward(&mut tape, &store, xv, &[(0, 1)], false, 0).unwrap();
        for (a, b) in tape.value(out.logits).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = GatConfig {
            in_dim: 3,
            hidden: 4,
            heads: 2,
            ..GatConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gat = Gat::init(&cfg, "gat", &mut store, &mut rng).unwrap();
        let n = 9;
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let edges = build_knn_graph(&coords, 2).unwrap();
        let x: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // New node perm[i] takes old node i.
        let mut px = vec![0.0; n * 3];
        for i in 0..n {
            px[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(&x[i * 3..i * 3 + 3]);
        }
        let pedges: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        let run = |x: Vec<f64>, e: &[(usize, usize)]| {
            let mut tape = Tape::new();
            let xv = tape.input(Tensor::new(&[n, 3], x).unwrap(), false);
            let out = gat.forward(&mut tape, &store, xv, e, false, 0).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        let a = run(x, &edges);
        let b = run(px, &pedges);
        for i in 0..n {
            for c in 0..3 {
                assert!((a[i * 3 + c] - b[perm[i] * 3 + c]).abs() < 1e-12);
            }
        }
    }
}
