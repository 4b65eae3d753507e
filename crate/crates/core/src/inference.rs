//! MAP inference on the two-layer grid graph.
//!
//! Every site has a base and an occlusion node. Nodes of the same layer are
//! linked to their 4-neighbours, and the two nodes of a site are linked to
//! each other. [`map_lbp`] runs max-sum loopy belief propagation in the log
//! domain; [`map_exact`] enumerates all labelings of tiny graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureCube;
use crate::grid::Grid;
use crate::labels::{ClassIndex, Layer, TwoLayerLabeling};
use crate::potentials::{feature_distance, within_level_log_table, CooccurrenceTable, NodePotentials, ThetaParams};

/// Feature distances d_ij of horizontal edges ((w−1)·h, row-major by left site)
/// and vertical edges (w·(h−1), row-major by upper site).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistances {
    pub width: usize,
    pub height: usize,
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

impl EdgeDistances {
    pub fn from_cube(cube: &FeatureCube) -> Result<Self> {
        let (w, h) = (cube.node_width(), cube.node_height());
        let mut horizontal = Vec::with_capacity(w.saturating_sub(1) * h);
        let mut vertical = Vec::with_capacity(w * h.saturating_sub(1));
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                horizontal.push(feature_distance(cube.node_at(x, y), cube.node_at(x + 1, y))?);
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                vertical.push(feature_distance(cube.node_at(x, y), cube.node_at(x, y + 1))?);
            }
        }
        Ok(EdgeDistances {
            width: w,
            height: h,
            horizontal,
            vertical,
        })
    }

    pub fn uniform(width: usize, height: usize, d: f64) -> Self {
        EdgeDistances {
            width,
            height,
            horizontal: vec![d; width.saturating_sub(1) * height],
            vertical: vec![d; width * height.saturating_sub(1)],
        }
    }
}

/// Pairwise log-tables of one layer; entry `[a * n + b]` scores label `a` at
/// the left (upper) site and `b` at the right (lower) site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEdges {
    pub n: usize,
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

impl LayerEdges {
    /// θ·(ln ψ(a, b) + ln ψ(b, a)): the neighbourhood product visits every
    /// unordered pair from both ends.
    pub fn from_table(table: &CooccurrenceTable, dist: &EdgeDistances, weight: f64, theta6: f64, theta7: f64) -> Self {
        let n = table.n_classes();
        let build = |ds: &[f64]| {
            let mut out = Vec::with_capacity(ds.len() * n * n);
            for &d in ds {
                let t = within_level_log_table(table, d, theta6, theta7);
                for a in 0..n {
                    for b in 0..n {
                        out.push(weight * (t[a * n + b] + t[b * n + a]));
                    }
                }
            }
            out
        };
        LayerEdges {
            n,
            horizontal: build(&dist.horizontal),
            vertical: build(&dist.vertical),
        }
    }

    pub fn zeros(n: usize, width: usize, height: usize) -> Self {
        LayerEdges {
            n,
            horizontal: vec![0.0; width.saturating_sub(1) * height * n * n],
            vertical: vec![0.0; width * height.saturating_sub(1) * n * n],
        }
    }

    #[inline]
    fn h(&self, e: usize) -> &[f64] {
        &self.horizontal[e * self.n * self.n..(e + 1) * self.n * self.n]
    }

    #[inline]
    fn v(&self, e: usize) -> &[f64] {
        &self.vertical[e * self.n * self.n..(e + 1) * self.n * self.n]
    }
}

/// Fully weighted log-potentials of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TcrfGraph {
    pub width: usize,
    pub height: usize,
    pub n_base: usize,
    pub n_occlusion: usize,
    /// θ₁·ln φᵇ per site.
    pub unary_base: Vec<f64>,
    /// θ₂·ln φᵒ per site.
    pub unary_occlusion: Vec<f64>,
    /// θ₅·ln ξ per site, row-major (b, o).
    pub inter: Vec<f64>,
    pub edges_base: LayerEdges,
    pub edges_occlusion: LayerEdges,
}

pub fn build_graph(
    pots: &NodePotentials,
    base_table: &CooccurrenceTable,
    occlusion_table: &CooccurrenceTable,
    cube: &FeatureCube,
    theta: &ThetaParams,
) -> Result<TcrfGraph> {
    if cube.node_width() != pots.width || cube.node_height() != pots.height {
        return Err(Error::config("feature cube and node potentials differ in size"));
    }
    build_graph_with_distances(pots, base_table, occlusion_table, &EdgeDistances::from_cube(cube)?, theta)
}

pub fn build_graph_with_distances(
    pots: &NodePotentials,
    base_table: &CooccurrenceTable,
    occlusion_table: &CooccurrenceTable,
    dist: &EdgeDistances,
    theta: &ThetaParams,
) -> Result<TcrfGraph> {
    pots.validate()?;
    theta.validate()?;
    if base_table.n_classes() != pots.n_base || occlusion_table.n_classes() != pots.n_occlusion {
        return Err(Error::config("co-occurrence tables do not match the label domain"));
    }
    if dist.width != pots.width || dist.height != pots.height {
        return Err(Error::config("edge distances do not match the grid"));
    }
    let t = theta.0;
    Ok(TcrfGraph {
        width: pots.width,
        height: pots.height,
        n_base: pots.n_base,
        n_occlusion: pots.n_occlusion,
        unary_base: pots.base.iter().map(|v| t[0] * v).collect(),
        unary_occlusion: pots.occlusion.iter().map(|v| t[1] * v).collect(),
        inter: pots.inter.iter().map(|v| t[4] * v).collect(),
        edges_base: LayerEdges::from_table(base_table, dist, t[2], t[5], t[6]),
        edges_occlusion: LayerEdges::from_table(occlusion_table, dist, t[3], t[5], t[6]),
    })
}

impl TcrfGraph {
    pub fn n_sites(&self) -> usize {
        self.width * self.height
    }

    pub fn n_within_edges(&self) -> usize {
        2 * (self.width * self.height.saturating_sub(1) + self.height * self.width.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        let (nb, no) = (self.n_base, self.n_occlusion);
        let eb = &self.edges_base;
        let eo = &self.edges_occlusion;
        let hcount = self.width.saturating_sub(1) * self.height;
        let vcount = self.width * self.height.saturating_sub(1);
        if self.unary_base.len() != n * nb
            || self.unary_occlusion.len() != n * no
            || self.inter.len() != n * nb * no
            || eb.n != nb
            || eo.n != no
            || eb.horizontal.len() != hcount * nb * nb
            || eb.vertical.len() != vcount * nb * nb
            || eo.horizontal.len() != hcount * no * no
            || eo.vertical.len() != vcount * no * no
        {
            return Err(Error::config("graph arrays do not match the grid"));
        }
        let all = self
            .unary_base
            .iter()
            .chain(&self.unary_occlusion)
            .chain(&self.inter)
            .chain(&eb.horizontal)
            .chain(&eb.vertical)
            .chain(&eo.horizontal)
            .chain(&eo.vertical);
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite("graph log-potential".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbpParams {
    pub max_iters: usize,
    pub tol: f64,
    /// Weight of the previous message in the damped update.
    pub damping: f64,
}

impl Default for LbpParams {
    fn default() -> Self {
        LbpParams {
            max_iters: 100,
            tol: 1e-4,
            damping: 0.5,
        }
    }
}

impl LbpParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) || !(self.tol >= 0.0) || self.max_iters == 0 {
            return Err(Error::config("lbp needs damping in [0, 1), tol >= 0 and max_iters > 0"));
        }
        Ok(())
    }
}

/// Messages of one layer. `right[i]` is sent by site i to its right
/// neighbour, `left[i]` to its left neighbour, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMessages {
    pub n: usize,
    pub right: Vec<f64>,
    pub left: Vec<f64>,
    pub down: Vec<f64>,
    pub up: Vec<f64>,
}

impl LayerMessages {
    fn new(n: usize, sites: usize) -> Self {
        LayerMessages {
            n,
            right: vec![0.0; sites * n],
            left: vec![0.0; sites * n],
            down: vec![0.0; sites * n],
            up: vec![0.0; sites * n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub base: LayerMessages,
    pub occlusion: LayerMessages,
    /// Base → occlusion messages, `n_occlusion` per site.
    pub to_occlusion: Vec<f64>,
    /// Occlusion → base messages, `n_base` per site.
    pub to_base: Vec<f64>,
    pub iterations: usize,
    pub last_delta: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbpOutcome {
    pub labeling: TwoLayerLabeling,
    pub messages: MessageState,
}

/// Max-sum loopy belief propagation with the sweep order right, left, down,
/// up, inter-level. A layer stops being swept once its own messages and the
/// inter-level messages it receives both move less than `tol`; it resumes if
/// the incoming inter-level messages later move again.
pub fn map_lbp(graph: &TcrfGraph, params: &LbpParams) -> Result<LbpOutcome> {
    graph.validate()?;
    params.validate()?;
    let (w, h) = (graph.width, graph.height);
    let n = graph.n_sites();
    let (nb, no) = (graph.n_base, graph.n_occlusion);
    let mut st = MessageState {
        base: LayerMessages::new(nb, n),
        occlusion: LayerMessages::new(no, n),
        to_occlusion: vec![0.0; n * no],
        to_base: vec![0.0; n * nb],
        iterations: 0,
        last_delta: f64::INFINITY,
        converged: false,
    };
    let mut active = [true, true];
    let mut scratch = Scratch::new(nb.max(no));
    while st.iterations < params.max_iters {
        st.iterations += 1;
        let mut delta_layer = [0.0f64; 2];
        if active[0] {
            delta_layer[0] = sweep_layer(
                w,
                h,
                &graph.unary_base,
                &st.to_base,
                &graph.edges_base,
                &mut st.base,
                params.damping,
                &mut scratch,
            );
        }
        if active[1] {
            delta_layer[1] = sweep_layer(
                w,
                h,
                &graph.unary_occlusion,
                &st.to_occlusion,
                &graph.edges_occlusion,
                &mut st.occlusion,
                params.damping,
                &mut scratch,
            );
        }
        let (d_to_occ, d_to_base) = update_inter(graph, &mut st, params.damping);
        active[0] = delta_layer[0] >= params.tol || d_to_base >= params.tol;
        active[1] = delta_layer[1] >= params.tol || d_to_occ >= params.tol;
        st.last_delta = delta_layer[0].max(delta_layer[1]).max(d_to_occ).max(d_to_base);
        if !active[0] && !active[1] {
            st.converged = true;
            break;
        }
    }
    let base = decode_layer(w, h, &graph.unary_base, &st.to_base, &st.base);
    let occlusion = decode_layer(w, h, &graph.unary_occlusion, &st.to_occlusion, &st.occlusion);
    for v in st.base.right.iter().chain(&st.occlusion.right).chain(&st.to_base) {
        if !v.is_finite() {
            return Err(Error::NonFinite("belief propagation message".into()));
        }
    }
    Ok(LbpOutcome {
        labeling: TwoLayerLabeling::new(base, occlusion)?,
        messages: st,
    })
}

/// Single-layer grid CRF: one layer's unary and pairwise terms, no coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub width: usize,
    pub height: usize,
    pub unary: Vec<f64>,
    pub edges: LayerEdges,
}

impl TcrfGraph {
    pub fn layer_graph(&self, layer: Layer) -> LayerGraph {
        let (unary, edges) = match layer {
            Layer::Base => (&self.unary_base, &self.edges_base),
            Layer::Occlusion => (&self.unary_occlusion, &self.edges_occlusion),
        };
        LayerGraph {
            width: self.width,
            height: self.height,
            unary: unary.clone(),
            edges: edges.clone(),
        }
    }
}

/// Loopy belief propagation on a single layer; returns the labeling and the
/// number of sweeps used.
pub fn map_lbp_layer(graph: &LayerGraph, params: &LbpParams) -> Result<(Grid<ClassIndex>, usize)> {
    params.validate()?;
    let n = graph.edges.n;
    let sites = graph.width * graph.height;
    if graph.unary.len() != sites * n || graph.unary.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("layer graph unary terms malformed"));
    }
    let external = vec![0.0; sites * n];
    let mut msgs = LayerMessages::new(n, sites);
    let mut scratch = Scratch::new(n);
    let mut iters = 0;
    while iters < params.max_iters {
        iters += 1;
        let d = sweep_layer(
            graph.width,
            graph.height,
            &graph.unary,
            &external,
            &graph.edges,
            &mut msgs,
            params.damping,
            &mut scratch,
        );
        if d < params.tol {
            break;
        }
    }
    Ok((decode_layer(graph.width, graph.height, &graph.unary, &external, &msgs), iters))
}

struct Scratch {
    pre: Vec<f64>,
    new: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            pre: vec![0.0; n],
            new: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Dir {
    Right,
    Left,
    Down,
    Up,
}

/// Sum of the unary term and every incoming message at `i` except the one
/// arriving from the neighbour in direction `skip`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn gather(
    w: usize,
    h: usize,
    i: usize,
    n: usize,
    unary: &[f64],
    external: Option<&[f64]>,
    m: &LayerMessages,
    skip: Option<Dir>,
    out: &mut [f64],
) {
    let (x, y) = (i % w, i / w);
    let base = i * n;
    out[..n].copy_from_slice(&unary[base..base + n]);
    if let Some(ext) = external {
        for (o, e) in out[..n].iter_mut().zip(&ext[base..base + n]) {
            *o += e;
        }
    }
    let mut add = |src: &[f64], j: usize| {
        for (o, v) in out[..n].iter_mut().zip(&src[j * n..(j + 1) * n]) {
            *o += v;
        }
    };
    if x > 0 && skip != Some(Dir::Left) {
        add(&m.right, i - 1);
    }
    if x + 1 < w && skip != Some(Dir::Right) {
        add(&m.left, i + 1);
    }
    if y > 0 && skip != Some(Dir::Up) {
        add(&m.down, i - w);
    }
    if y + 1 < h && skip != Some(Dir::Down) {
        add(&m.up, i + w);
    }
}

#[inline]
fn normalize(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter_mut().for_each(|x| *x -= max);
}

/// new(b) = max_a pre(a) + table[a·n + b] when `forward`, or
/// max_a pre(a) + table[b·n + a] otherwise.
#[inline]
fn max_product(pre: &[f64], table: &[f64], n: usize, forward: bool, new: &mut [f64]) {
    for b in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a in 0..n {
            let t = if forward { table[a * n + b] } else { table[b * n + a] };
            let v = pre[a] + t;
            if v > best {
                best = v;
            }
        }
        new[b] = best;
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep_layer(
    w: usize,
    h: usize,
    unary: &[f64],
    external: &[f64],
    edges: &LayerEdges,
    m: &mut LayerMessages,
    damping: f64,
    s: &mut Scratch,
) -> f64 {
    let n = edges.n;
    let mut delta = 0.0f64;
    let send = |m: &mut LayerMessages, i: usize, dir: Dir, s: &mut Scratch| -> f64 {
        gather(w, h, i, n, unary, Some(external), m, Some(dir), &mut s.pre);
        let (x, y) = (i % w, i / w);
        let (table, forward) = match dir {
            Dir::Right => (edges.h(y * (w - 1) + x), true),
            Dir::Left => (edges.h(y * (w - 1) + x - 1), false),
            Dir::Down => (edges.v(i), true),
            Dir::Up => (edges.v(i - w), false),
        };
        max_product(&s.pre[..n], table, n, forward, &mut s.new[..n]);
        let slot = match dir {
            Dir::Right => &mut m.right,
            Dir::Left => &mut m.left,
            Dir::Down => &mut m.down,
            Dir::Up => &mut m.up,
        };
        update(&mut slot[i * n..(i + 1) * n], &mut s.new[..n], damping)
    };
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            delta = delta.max(send(m, y * w + x, Dir::Right, s));
        }
    }
    for y in 0..h {
        for x in (1..w).rev() {
            delta = delta.max(send(m, y * w + x, Dir::Left, s));
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            delta = delta.max(send(m, y * w + x, Dir::Down, s));
        }
    }
    for y in (1..h).rev() {
        for x in 0..w {
            delta = delta.max(send(m, y * w + x, Dir::Up, s));
        }
    }
    delta
}

/// Normalizes `new`, blends it into `slot` and renormalizes; returns the
/// largest change of `slot`.
#[inline]
fn update(slot: &mut [f64], new: &mut [f64], damping: f64) -> f64 {
    normalize(new);
    let mut max = f64::NEG_INFINITY;
    for (s, v) in slot.iter().zip(new.iter()) {
        max = max.max(damping * s + (1.0 - damping) * v);
    }
    let mut delta = 0.0f64;
    for (s, v) in slot.iter_mut().zip(new.iter()) {
        let next = damping * *s + (1.0 - damping) * v - max;
        delta = delta.max((next - *s).abs());
        *s = next;
    }
    delta
}

fn update_inter(graph: &TcrfGraph, st: &mut MessageState, damping: f64) -> (f64, f64) {
    let (w, h) = (graph.width, graph.height);
    let (nb, no) = (graph.n_base, graph.n_occlusion);
    let mut pre_b = vec![0.0; nb];
    let mut pre_o = vec![0.0; no];
    let mut new_o = vec![0.0; no];
    let mut new_b = vec![0.0; nb];
    let (mut d_occ, mut d_base) = (0.0f64, 0.0f64);
    for i in 0..graph.n_sites() {
        let table = &graph.inter[i * nb * no..(i + 1) * nb * no];
        gather(w, h, i, nb, &graph.unary_base, None, &st.base, None, &mut pre_b);
        gather(w, h, i, no, &graph.unary_occlusion, None, &st.occlusion, None, &mut pre_o);
        for o in 0..no {
            let mut best = f64::NEG_INFINITY;
            for b in 0..nb {
                best = best.max(pre_b[b] + table[b * no + o]);
            }
            new_o[o] = best;
        }
        for b in 0..nb {
            let mut best = f64::NEG_INFINITY;
            for o in 0..no {
                best = best.max(pre_o[o] + table[b * no + o]);
            }
            new_b[b] = best;
        }
        d_occ = d_occ.max(update(&mut st.to_occlusion[i * no..(i + 1) * no], &mut new_o, damping));
        d_base = d_base.max(update(&mut st.to_base[i * nb..(i + 1) * nb], &mut new_b, damping));
    }
    (d_occ, d_base)
}

fn decode_layer(w: usize, h: usize, unary: &[f64], external: &[f64], m: &LayerMessages) -> Grid<ClassIndex> {
    let n = m.n;
    let mut belief = vec![0.0; n];
    Grid::from_fn(w, h, |x, y| {
        gather(w, h, y * w + x, n, unary, Some(external), m, None, &mut belief);
        argmax(&belief) as ClassIndex
    })
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Unnormalized log-posterior of a labeling.
pub fn score(graph: &TcrfGraph, labeling: &TwoLayerLabeling) -> Result<f64> {
    let (w, h) = (graph.width, graph.height);
    if labeling.width() != w || labeling.height() != h {
        return Err(Error::domain("labeling and graph differ in size"));
    }
    let (nb, no) = (graph.n_base, graph.n_occlusion);
    let b = labeling.base.as_slice();
    let o = labeling.occlusion.as_slice();
    if b.iter().any(|&c| c as usize >= nb) || o.iter().any(|&c| c as usize >= no) {
        return Err(Error::domain("label outside the graph's classes"));
    }
    let mut total = 0.0;
    for i in 0..w * h {
        let (bi, oi) = (b[i] as usize, o[i] as usize);
        total += graph.unary_base[i * nb + bi] + graph.unary_occlusion[i * no + oi] + graph.inter[i * nb * no + bi * no + oi];
        let (x, y) = (i % w, i / w);
        if x + 1 < w {
            let e = y * (w - 1) + x;
            total += graph.edges_base.h(e)[bi * nb + b[i + 1] as usize];
            total += graph.edges_occlusion.h(e)[oi * no + o[i + 1] as usize];
        }
        if y + 1 < h {
            total += graph.edges_base.v(i)[bi * nb + b[i + w] as usize];
            total += graph.edges_occlusion.v(i)[oi * no + o[i + w] as usize];
        }
    }
    Ok(total)
}

/// Largest configuration space [`map_exact`] will enumerate.
pub const EXACT_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactOutcome {
    pub labeling: TwoLayerLabeling,
    pub best: f64,
    pub worst: f64,
}

/// Row states above this count make [`map_exact`] fall back to a plain
/// depth-first enumeration.
const ROW_DP_STATES: usize = 1 << 16;

/// Exhaustive MAP; among equal scores the labeling that is smallest in
/// row-major site order (base before occlusion at each site) wins.
pub fn map_exact(graph: &TcrfGraph) -> Result<ExactOutcome> {
    graph.validate()?;
    let n = graph.n_sites();
    let k = graph.n_base * graph.n_occlusion;
    let space = (k as f64).powi(n as i32);
    if space > EXACT_LIMIT {
        return Err(Error::TooLarge(space));
    }
    let row_states = (k as f64).powi(graph.width as i32);
    let (best, worst, states) = if row_states <= ROW_DP_STATES as f64 {
        exact_by_rows(graph)
    } else {
        exact_by_search(graph)
    };
    let no = graph.n_occlusion;
    let base = Grid::from_fn(graph.width, graph.height, |x, y| (states[y * graph.width + x] / no) as ClassIndex);
    let occ = Grid::from_fn(graph.width, graph.height, |x, y| (states[y * graph.width + x] % no) as ClassIndex);
    Ok(ExactOutcome {
        labeling: TwoLayerLabeling::new(base, occ)?,
        best,
        worst,
    })
}

/// Max- and min-sum over whole rows. A row state lists the joint label of
/// every site in the row, leftmost site most significant, so scanning states
/// in increasing order visits labelings in the tie-break order.
fn exact_by_rows(g: &TcrfGraph) -> (f64, f64, Vec<usize>) {
    let (w, h, nb, no) = (g.width, g.height, g.n_base, g.n_occlusion);
    let k = nb * no;
    let n_states = k.pow(w as u32);
    let digits: Vec<Vec<usize>> = (0..n_states)
        .map(|mut s| {
            let mut d = vec![0; w];
            for x in (0..w).rev() {
                d[x] = s % k;
                s /= k;
            }
            d
        })
        .collect();
    let row_score = |y: usize, d: &[usize]| -> f64 {
        let mut v = 0.0;
        for x in 0..w {
            let i = y * w + x;
            let (b, o) = (d[x] / no, d[x] % no);
            v += g.unary_base[i * nb + b] + g.unary_occlusion[i * no + o] + g.inter[i * k + d[x]];
            if x + 1 < w {
                let e = y * (w - 1) + x;
                v += g.edges_base.h(e)[b * nb + d[x + 1] / no] + g.edges_occlusion.h(e)[o * no + d[x + 1] % no];
            }
        }
        v
    };
    let link = |y: usize, up: &[usize], down: &[usize]| -> f64 {
        (0..w)
            .map(|x| {
                let i = y * w + x;
                g.edges_base.v(i)[(up[x] / no) * nb + down[x] / no] + g.edges_occlusion.v(i)[(up[x] % no) * no + down[x] % no]
            })
            .sum()
    };

    // hi/lo[s] hold the best/worst score of rows y.. given row y in state s
    let mut hi: Vec<f64> = digits.iter().map(|d| row_score(h - 1, d)).collect();
    let mut lo = hi.clone();
    let mut next: Vec<Vec<usize>> = Vec::with_capacity(h);
    for y in (0..h - 1).rev() {
        let mut hi_y = vec![0.0; n_states];
        let mut lo_y = vec![0.0; n_states];
        let mut next_y = vec![0; n_states];
        for (s, d) in digits.iter().enumerate() {
            let (mut best, mut arg, mut worst) = (f64::NEG_INFINITY, 0, f64::INFINITY);
            for (s2, d2) in digits.iter().enumerate() {
                let l = link(y, d, d2);
                if l + hi[s2] > best {
                    best = l + hi[s2];
                    arg = s2;
                }
                worst = worst.min(l + lo[s2]);
            }
            let r = row_score(y, d);
            hi_y[s] = r + best;
            lo_y[s] = r + worst;
            next_y[s] = arg;
        }
        hi = hi_y;
        lo = lo_y;
        next.push(next_y);
    }
    next.reverse();

    let mut s = argmax(&hi);
    let (best, worst) = (hi[s], lo.iter().cloned().fold(f64::INFINITY, f64::min));
    let mut states = Vec::with_capacity(w * h);
    for y in 0..h {
        states.extend_from_slice(&digits[s]);
        if y + 1 < h {
            s = next[y][s];
        }
    }
    (best, worst, states)
}

fn exact_by_search(g: &TcrfGraph) -> (f64, f64, Vec<usize>) {
    let n = g.n_sites();
    let mut search = Exact {
        g,
        k: g.n_base * g.n_occlusion,
        state: vec![0usize; n],
        best_state: vec![0usize; n],
        best: f64::NEG_INFINITY,
        worst: f64::INFINITY,
    };
    search.dfs(0, 0.0);
    (search.best, search.worst, search.best_state)
}

struct Exact<'a> {
    g: &'a TcrfGraph,
    k: usize,
    state: Vec<usize>,
    best_state: Vec<usize>,
    best: f64,
    worst: f64,
}

impl Exact<'_> {
    fn dfs(&mut self, i: usize, partial: f64) {
        let g = self.g;
        if i == g.n_sites() {
            if partial > self.best {
                self.best = partial;
                self.best_state.copy_from_slice(&self.state);
            }
            self.worst = self.worst.min(partial);
            return;
        }
        let (w, nb, no) = (g.width, g.n_base, g.n_occlusion);
        let (x, y) = (i % w, i / w);
        for s in 0..self.k {
            let (b, o) = (s / no, s % no);
            let mut v = g.unary_base[i * nb + b] + g.unary_occlusion[i * no + o] + g.inter[i * self.k + s];
            if x > 0 {
                let e = y * (w - 1) + x - 1;
                let left = self.state[i - 1];
                v += g.edges_base.h(e)[(left / no) * nb + b] + g.edges_occlusion.h(e)[(left % no) * no + o];
            }
            if y > 0 {
                let up = self.state[i - w];
                v += g.edges_base.v(i - w)[(up / no) * nb + b] + g.edges_occlusion.v(i - w)[(up % no) * no + o];
            }
            self.state[i] = s;
            self.dfs(i + 1, partial + v);
        }
    }
}

/// Per-site argmax of the unary terms of both layers, ignoring all edges.
pub fn independent_argmax(graph: &TcrfGraph) -> TwoLayerLabeling {
    let (nb, no) = (graph.n_base, graph.n_occlusion);
    let base = Grid::from_fn(graph.width, graph.height, |x, y| {
        let i = y * graph.width + x;
        argmax(&graph.unary_base[i * nb..(i + 1) * nb]) as ClassIndex
    });
    let occ = Grid::from_fn(graph.width, graph.height, |x, y| {
        let i = y * graph.width + x;
        argmax(&graph.unary_occlusion[i * no..(i + 1) * no]) as ClassIndex
    });
    TwoLayerLabeling { base, occlusion: occ }
}
