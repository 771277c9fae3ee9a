//! Maximum-likelihood intrinsic dimension of point clouds, exact k-NN and
//! synthetic manifold samplers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distances below this count as duplicate points.
pub const DUPLICATE_TOL: f64 = 1e-12;
/// Clouds smaller than this use brute-force neighbor search.
pub const BRUTE_FORCE_BELOW: usize = 1024;
const LEAF_SIZE: usize = 16;

/// `n × D` points stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    pub label: String,
}

impl PointCloud {
    pub fn new(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("point rows have different lengths".into()));
        }
        PointCloud::from_flat(rows.concat(), dim, label)
    }

    pub fn from_flat(points: Vec<f64>, dim: usize, label: impl Into<String>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} values do not form rows of length {dim}", points.len())));
        }
        let n = points.len() / dim;
        if n < 2 {
            return Err(Error::InsufficientData(format!("a cloud needs at least 2 points, got {n}")));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate in point cloud".into()));
        }
        Ok(PointCloud { points, n, dim, label: label.into() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Cloud made of the given rows, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        let mut pts = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            pts.extend_from_slice(self.row(i));
        }
        PointCloud::from_flat(pts, self.dim, self.label.clone())
    }

    /// `x ↦ c·Qx + t` applied to every point.
    pub fn transformed(&self, q: &[Vec<f64>], scale: f64, shift: &[f64]) -> Result<PointCloud> {
        if q.len() != self.dim || q.iter().any(|r| r.len() != self.dim) || shift.len() != self.dim {
            return Err(Error::Dimension("transform does not match the cloud dimension".into()));
        }
        let mut pts = Vec::with_capacity(self.points.len());
        for x in self.rows() {
            for (r, t) in q.iter().zip(shift) {
                pts.push(scale * r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + t);
            }
        }
        PointCloud::from_flat(pts, self.dim, self.label.clone())
    }

    /// Headerless CSV, one point per row.
    pub fn read_csv<R: Read>(reader: R, label: impl Into<String>) -> Result<PointCloud> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut pts = Vec::new();
        let mut dim = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if dim.is_some_and(|d| d != rec.len()) {
                return Err(Error::Input(format!("row {} has {} columns, expected {}", line + 1, rec.len(), dim.unwrap())));
            }
            dim = Some(rec.len());
            for field in rec.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Input(format!("row {}: cannot parse {field:?} as a number", line + 1)))?;
                pts.push(v);
            }
        }
        PointCloud::from_flat(pts, dim.unwrap_or(0), label)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for x in self.rows() {
            w.write_record(x.iter().map(|v| format!("{v:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Drops every point closer than [`DUPLICATE_TOL`] to an earlier kept
    /// point. Returns the reduced cloud and the number removed.
    pub fn dedup(&self) -> Result<(PointCloud, usize)> {
        let index = NeighborIndex::build(self);
        let mut keep = vec![true; self.n];
        for i in 0..self.n {
            let close = index.within(self.row(i), DUPLICATE_TOL);
            if close.iter().any(|&j| j < i && keep[j]) {
                keep[i] = false;
            }
        }
        let idx: Vec<usize> = (0..self.n).filter(|&i| keep[i]).collect();
        let removed = self.n - idx.len();
        if idx.len() < 2 {
            return Err(Error::InsufficientData(format!("{} distinct points after deduplication", idx.len())));
        }
        Ok((self.select(&idx)?, removed))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbor candidate ordered by distance, then index.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug)]
struct Node {
    start: usize,
    end: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    children: Option<(usize, usize)>,
}

/// Static kd-tree with bounding boxes; exact queries.
#[derive(Clone, Debug)]
pub struct KdTree<'a> {
    cloud: &'a PointCloud,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(cloud: &'a PointCloud) -> Self {
        let mut tree = KdTree { cloud, order: (0..cloud.len()).collect(), nodes: Vec::new() };
        tree.split(0, cloud.len());
        tree
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let dim = self.cloud.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &self.order[start..end] {
            for (k, v) in self.cloud.row(i).iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { start, end, lo: lo.clone(), hi: hi.clone(), children: None });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = (0..dim).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
        if hi[axis] == lo[axis] {
            return id;
        }
        let mid = start + (end - start) / 2;
        let cloud = self.cloud;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            cloud.row(a)[axis].total_cmp(&cloud.row(b)[axis]).then(a.cmp(&b))
        });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    fn box_dist2(&self, node: &Node, q: &[f64]) -> f64 {
        q.iter()
            .zip(node.lo.iter().zip(&node.hi))
            .map(|(v, (lo, hi))| {
                let d = if v < lo {
                    lo - v
                } else if v > hi {
                    v - hi
                } else {
                    0.0
                };
                d * d
            })
            .sum()
    }

    /// The `k` nearest points to `q` as `(distance², index)`, ascending,
    /// ties broken by index; `exclude` is never returned.
    fn knn(&self, q: &[f64], k: usize, exclude: Option<usize>) -> Vec<Cand> {
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.visit(0, q, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn visit(&self, id: usize, q: &[f64], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Cand>) {
        let node = &self.nodes[id];
        if heap.len() == k && self.box_dist2(node, q) > heap.peek().map_or(f64::INFINITY, |c| c.d2) {
            return;
        }
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Cand { d2: dist2(q, self.cloud.row(i)), idx: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Some((a, b)) => {
                let (da, db) = (self.box_dist2(&self.nodes[a], q), self.box_dist2(&self.nodes[b], q));
                let (first, second) = if da <= db { (a, b) } else { (b, a) };
                self.visit(first, q, k, exclude, heap);
                self.visit(second, q, k, exclude, heap);
            }
        }
    }

    fn within(&self, q: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if self.box_dist2(node, q) >= r2 {
                continue;
            }
            match node.children {
                None => out.extend(self.order[node.start..node.end].iter().filter(|&&i| dist2(q, self.cloud.row(i)) < r2)),
                Some((a, b)) => {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        out
    }
}

/// Exact neighbor search: brute force for small clouds, kd-tree otherwise.
#[derive(Clone, Debug)]
pub enum NeighborIndex<'a> {
    Brute(&'a PointCloud),
    Tree(KdTree<'a>),
}

impl<'a> NeighborIndex<'a> {
    pub fn build(cloud: &'a PointCloud) -> Self {
        if cloud.len() < BRUTE_FORCE_BELOW {
            NeighborIndex::Brute(cloud)
        } else {
            NeighborIndex::Tree(KdTree::build(cloud))
        }
    }

    pub fn brute(cloud: &'a PointCloud) -> Self {
        NeighborIndex::Brute(cloud)
    }

    pub fn tree(cloud: &'a PointCloud) -> Self {
        NeighborIndex::Tree(KdTree::build(cloud))
    }

    fn cloud(&self) -> &PointCloud {
        match self {
            NeighborIndex::Brute(c) => c,
            NeighborIndex::Tree(t) => t.cloud,
        }
    }

    fn knn(&self, q: &[f64], k: usize, exclude: Option<usize>) -> Vec<Cand> {
        match self {
            NeighborIndex::Brute(cloud) => {
                let mut all: Vec<Cand> = (0..cloud.len())
                    .filter(|&i| Some(i) != exclude)
                    .map(|i| Cand { d2: dist2(q, cloud.row(i)), idx: i })
                    .collect();
                let k = k.min(all.len());
                if k < all.len() && k > 0 {
                    all.select_nth_unstable(k - 1);
                }
                all.truncate(k);
                all.sort_unstable();
                all
            }
            NeighborIndex::Tree(t) => t.knn(q, k, exclude),
        }
    }

    fn within(&self, q: &[f64], radius: f64) -> Vec<usize> {
        match self {
            NeighborIndex::Brute(cloud) => {
                (0..cloud.len()).filter(|&i| dist2(q, cloud.row(i)) < radius * radius).collect()
            }
            NeighborIndex::Tree(t) => t.within(q, radius),
        }
    }

    /// Indices and distances of the `k` nearest neighbors of point `i`.
    pub fn neighbors(&self, i: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        let cloud = self.cloud();
        if i >= cloud.len() {
            return Err(Error::Parameter(format!("query index {i} outside a cloud of {} points", cloud.len())));
        }
        if k == 0 || k >= cloud.len() {
            return Err(Error::Parameter(format!("K must lie in 1..{}, got {k}", cloud.len())));
        }
        Ok(self.knn(cloud.row(i), k, Some(i)).into_iter().map(|c| (c.idx, c.d2.sqrt())).collect())
    }

    /// Sorted distances `T_1 ≤ … ≤ T_K` from point `i` to its neighbors.
    pub fn profile(&self, i: usize, k: usize) -> Result<Vec<f64>> {
        let t: Vec<f64> = self.neighbors(i, k)?.into_iter().map(|(_, d)| d).collect();
        if let Some(d) = t.iter().find(|d| **d < DUPLICATE_TOL) {
            return Err(Error::DuplicatePoint(*d));
        }
        Ok(t)
    }
}

/// Exact sorted neighbor distances of point `i`, excluding itself.
pub fn knn_distance_profile(cloud: &PointCloud, i: usize, k: usize) -> Result<Vec<f64>> {
    NeighborIndex::build(cloud).profile(i, k)
}

/// `m̂ = [ (1/(K−1)) Σ_{j<K} ln(T_K/T_j) ]^{−1}`.
pub fn mle_local_dim(profile: &[f64]) -> Result<f64> {
    let k = profile.len();
    if k < 2 {
        return Err(Error::InsufficientData(format!("the estimator needs at least 2 distances, got {k}")));
    }
    if profile.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Domain("distances must be positive and finite".into()));
    }
    if profile.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("distance profile must be nondecreasing".into()));
    }
    let tk = profile[k - 1];
    if tk == profile[0] {
        return Err(Error::ZeroDenominator("all neighbor distances are equal".into()));
    }
    let mean = profile[..k - 1].iter().map(|t| (tk / t).ln()).sum::<f64>() / (k - 1) as f64;
    Ok(1.0 / mean)
}

/// Within-batch aggregation of local estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the local estimates.
    #[default]
    Arithmetic,
    /// Inverse of the mean inverse estimate.
    Harmonic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdOptions {
    pub k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl IdOptions {
    pub fn new(seed: u64) -> Self {
        IdOptions { k: 20, batch_size: 4096, seed, aggregation: Aggregation::Arithmetic }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdEstimate {
    pub value: f64,
    pub per_batch: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_used: usize,
    pub n_deduped: usize,
    pub aggregation: Aggregation,
}

/// Order-independent sum: the terms are sorted first.
fn stable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Local estimate at every point of the cloud.
pub fn local_dims(cloud: &PointCloud, k: usize) -> Result<Vec<f64>> {
    let index = NeighborIndex::build(cloud);
    (0..cloud.len()).into_par_iter().map(|i| mle_local_dim(&index.profile(i, k)?)).collect()
}

fn batch_estimate(cloud: &PointCloud, k: usize, aggregation: Aggregation) -> Result<f64> {
    let local = local_dims(cloud, k)?;
    Ok(match aggregation {
        Aggregation::Arithmetic => stable_mean(&local),
        Aggregation::Harmonic => {
            let inv: Vec<f64> = local.iter().map(|m| 1.0 / m).collect();
            1.0 / stable_mean(&inv)
        }
    })
}

/// Deduplicates, shuffles with the seed, splits into batches and averages
/// the per-batch estimates. A trailing batch with fewer than `K+1` points is
/// dropped.
pub fn estimate_id(cloud: &PointCloud, opts: &IdOptions) -> Result<IdEstimate> {
    let k = opts.k;
    if k < 2 {
        return Err(Error::Parameter(format!("K must be at least 2, got {k}")));
    }
    if opts.batch_size < k + 1 {
        return Err(Error::Parameter(format!("batch size {} is below K+1 = {}", opts.batch_size, k + 1)));
    }
    let (clean, removed) = cloud.dedup()?;
    if clean.len() < k + 1 {
        return Err(Error::InsufficientData(format!(
            "{} points remain after removing {removed} duplicates, K+1 = {} needed",
            clean.len(),
            k + 1
        )));
    }
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let batches: Vec<&[usize]> = order.chunks(opts.batch_size).filter(|b| b.len() > k).collect();
    let per_batch = batches
        .iter()
        .map(|b| batch_estimate(&clean.select(b)?, k, opts.aggregation))
        .collect::<Result<Vec<f64>>>()?;
    let n_used = batches.iter().map(|b| b.len()).sum();
    Ok(IdEstimate {
        value: per_batch.iter().sum::<f64>() / per_batch.len() as f64,
        per_batch,
        k,
        batch_size: opts.batch_size,
        seed: opts.seed,
        n_used,
        n_deduped: removed,
        aggregation: opts.aggregation,
    })
}

/// Synthetic manifolds with known intrinsic dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// Uniform `[0,1]^d`.
    Cube { d: usize },
    /// Uniform unit sphere `S^d ⊂ R^{d+1}`.
    Sphere { d: usize },
    /// `(t cos t, h, t sin t)`, `t ∈ [1.5π, 4.5π]`, `h ∈ [0, 21]`.
    SwissRoll,
    /// Area-uniform torus with radii 2 and 1 in R³.
    Torus,
}

impl SamplerSpec {
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            SamplerSpec::Cube { d } | SamplerSpec::Sphere { d } => *d,
            SamplerSpec::SwissRoll | SamplerSpec::Torus => 2,
        }
    }

    /// Coordinates of a sample before the orthonormal embedding.
    pub fn native_dim(&self) -> usize {
        match self {
            SamplerSpec::Cube { d } => *d,
            SamplerSpec::Sphere { d } => d + 1,
            SamplerSpec::SwissRoll | SamplerSpec::Torus => 3,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SamplerSpec::Cube { d } => (0..*d).map(|_| rng.gen::<f64>()).collect(),
            SamplerSpec::Sphere { d } => loop {
                let v: Vec<f64> = (0..=*d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    break v.iter().map(|x| x / norm).collect();
                }
            },
            SamplerSpec::SwissRoll => {
                let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.gen::<f64>());
                let h = 21.0 * rng.gen::<f64>();
                vec![t * t.cos(), h, t * t.sin()]
            }
            SamplerSpec::Torus => {
                let (big, small) = (2.0, 1.0);
                let tau = std::f64::consts::TAU;
                loop {
                    let u = tau * rng.gen::<f64>();
                    let v = tau * rng.gen::<f64>();
                    // Accept with probability proportional to the area element.
                    if rng.gen::<f64>() * (big + small) <= big + small * v.cos() {
                        let ring = big + small * v.cos();
                        break vec![ring * u.cos(), ring * u.sin(), small * v.sin()];
                    }
                }
            }
        }
    }
}

/// `D × k` matrix with orthonormal columns drawn from the seeded generator.
pub fn random_orthonormal(ambient: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k > ambient {
        return Err(Error::Dimension(format!("cannot embed {k} coordinates isometrically into R^{ambient}")));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..ambient).map(|_| rng.sample(StandardNormal)).collect();
        // Two Gram–Schmidt passes keep the columns orthogonal to rounding.
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.iter().map(|x| x / norm).collect());
        }
    }
    Ok((0..ambient).map(|r| cols.iter().map(|c| c[r]).collect()).collect())
}

/// `n` samples of `spec`, embedded into R^D by a seeded orthonormal map.
pub fn sample_synthetic_manifold(spec: &SamplerSpec, n: usize, ambient: usize, seed: u64) -> Result<PointCloud> {
    if spec.intrinsic_dim() == 0 {
        return Err(Error::Parameter("intrinsic dimension must be positive".into()));
    }
    let k = spec.native_dim();
    if ambient < k {
        return Err(Error::Dimension(format!(
            "ambient dimension {ambient} is below the {k} coordinates the sampler produces"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = random_orthonormal(ambient, k, &mut rng)?;
    let mut pts = Vec::with_capacity(n * ambient);
    for _ in 0..n {
        let z = spec.draw(&mut rng);
        for row in &map {
            pts.push(row.iter().zip(&z).map(|(a, b)| a * b).sum());
        }
    }
    let label = match spec {
        SamplerSpec::Cube { d } => format!("cube({d}) in R^{ambient}"),
        SamplerSpec::Sphere { d } => format!("sphere({d}) in R^{ambient}"),
        SamplerSpec::SwissRoll => format!("swiss roll in R^{ambient}"),
        SamplerSpec::Torus => format!("torus in R^{ambient}"),
    };
    PointCloud::from_flat(pts, ambient, label)
}
