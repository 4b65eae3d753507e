//! Association, within-level and inter-level potentials, all in the log domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureCube;
use crate::forest::DecisionForest;
use crate::grid::Grid;
use crate::labels::{ClassIndex, Layer, ProductSpace};

/// Probability floor applied before any logarithm.
pub const EPS_P: f64 = 1e-6;
/// Pseudo-count added to every raw co-occurrence cell.
pub const EPS_H: f64 = 1.0;

#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(EPS_P).ln()
}

/// Neighbour label statistics h′ and the row-scaled h.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    layer: Layer,
    n: usize,
    raw: Vec<u64>,
    scaled: Vec<f64>,
}

impl CooccurrenceTable {
    /// Scales `raw + eps_h` so that every nonzero row peaks at 1.
    pub fn from_counts(layer: Layer, n: usize, raw: Vec<u64>, eps_h: f64) -> Result<Self> {
        if raw.len() != n * n || n == 0 {
            return Err(Error::domain(format!("co-occurrence counts must be {n}x{n}")));
        }
        if !(eps_h >= 0.0 && eps_h.is_finite()) {
            return Err(Error::config("co-occurrence smoothing must be finite and nonnegative"));
        }
        let mut scaled: Vec<f64> = raw.iter().map(|&c| c as f64 + eps_h).collect();
        for row in scaled.chunks_mut(n) {
            let max = row.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                row.iter_mut().for_each(|v| *v /= max);
            }
        }
        Ok(CooccurrenceTable { layer, n, raw, scaled })
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn raw(&self) -> &[u64] {
        &self.raw
    }

    pub fn scaled(&self) -> &[f64] {
        &self.scaled
    }

    #[inline]
    pub fn h(&self, c: usize, c2: usize) -> f64 {
        self.scaled[c * self.n + c2]
    }
}

/// Counts ordered 4-neighbour label pairs over all labelings; each adjacent
/// pair (a, b) increments both h′(a, b) and h′(b, a).
pub fn fit_cooccurrence(
    layer: Layer,
    labelings: &[&Grid<ClassIndex>],
    n_classes: usize,
    eps_h: f64,
) -> Result<CooccurrenceTable> {
    if labelings.is_empty() {
        return Err(Error::domain("no labelings to fit co-occurrences from"));
    }
    let mut raw = vec![0u64; n_classes * n_classes];
    for grid in labelings {
        let (w, h) = (grid.width(), grid.height());
        let check = |c: ClassIndex| {
            if (c as usize) < n_classes {
                Ok(c as usize)
            } else {
                Err(Error::domain(format!("{layer} label {c} outside {n_classes} classes")))
            }
        };
        for y in 0..h {
            for x in 0..w {
                let a = check(*grid.get(x, y))?;
                if x + 1 < w {
                    let b = check(*grid.get(x + 1, y))?;
                    raw[a * n_classes + b] += 1;
                    raw[b * n_classes + a] += 1;
                }
                if y + 1 < h {
                    let b = check(*grid.get(x, y + 1))?;
                    raw[a * n_classes + b] += 1;
                    raw[b * n_classes + a] += 1;
                }
            }
        }
    }
    CooccurrenceTable::from_counts(layer, n_classes, raw, eps_h)
}

/// θ₁..θ₅ weight the log-potentials; θ₆ boosts and θ₇ damps the diagonal
/// of the within-level tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams(pub [f64; 7]);

impl Default for ThetaParams {
    fn default() -> Self {
        ThetaParams([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.01])
    }
}

impl ThetaParams {
    pub const LOWER: [f64; 7] = [0.0, 0.0, 0.0, 0.0, 0.0, 1e-3, 0.0];
    pub const UPPER: [f64; 7] = [10.0, 10.0, 10.0, 10.0, 10.0, 100.0, 1.0];

    pub fn new(values: [f64; 7]) -> Result<Self> {
        let t = ThetaParams(values);
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.0;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("theta {v:?}")));
        }
        if v[..5].iter().any(|&x| x < 0.0) || v[5] <= 0.0 || v[6] < 0.0 {
            return Err(Error::config(format!(
                "theta {v:?} violates theta1..5 >= 0, theta6 > 0, theta7 >= 0"
            )));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Self {
        let mut v = self.0;
        for (i, x) in v.iter_mut().enumerate() {
            *x = x.clamp(Self::LOWER[i], Self::UPPER[i]);
        }
        ThetaParams(v)
    }

    pub fn association_base(&self) -> f64 {
        self.0[0]
    }
    pub fn association_occlusion(&self) -> f64 {
        self.0[1]
    }
    pub fn within_base(&self) -> f64 {
        self.0[2]
    }
    pub fn within_occlusion(&self) -> f64 {
        self.0[3]
    }
    pub fn inter(&self) -> f64 {
        self.0[4]
    }
    pub fn diagonal_boost(&self) -> f64 {
        self.0[5]
    }
    pub fn contrast_decay(&self) -> f64 {
        self.0[6]
    }
}

/// ln ψ(c, c′) for one edge: the diagonal is θ₆·exp(−θ₇·d²)·h(c, c), the rest h(c, c′).
pub fn within_level_potential(table: &CooccurrenceTable, c: usize, c2: usize, d: f64, theta6: f64, theta7: f64) -> f64 {
    let h = table.h(c, c2);
    let v = if c == c2 { theta6 * (-theta7 * d * d).exp() * h } else { h };
    floored_ln(v)
}

/// Full |C|×|C| table of ln ψ for an edge with feature distance `d`.
pub fn within_level_log_table(table: &CooccurrenceTable, d: f64, theta6: f64, theta7: f64) -> Vec<f64> {
    let n = table.n;
    let mut out = Vec::with_capacity(n * n);
    for c in 0..n {
        for c2 in 0..n {
            out.push(within_level_potential(table, c, c2, d, theta6, theta7));
        }
    }
    out
}

pub fn feature_distance(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "feature vectors of length {} and {} cannot be compared",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

pub fn association_potential(forest: &DecisionForest, features: &[u8]) -> Result<Vec<f64>> {
    Ok(forest
        .predict_distribution(features)?
        .into_iter()
        .map(floored_ln)
        .collect())
}

/// Product-class distribution reshaped to a row-major |Cᵇ|×|Cᵒ| log table.
pub fn inter_level_potential(forest: &DecisionForest, product: ProductSpace, features: &[u8]) -> Result<Vec<f64>> {
    if forest.n_classes() != product.len() {
        return Err(Error::config(format!(
            "product forest has {} classes, label domain has {}",
            forest.n_classes(),
            product.len()
        )));
    }
    // product encoding b·|Cᵒ|+o is already row-major in (b, o)
    association_potential(forest, features)
}

/// Per-site log-potentials of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePotentials {
    pub width: usize,
    pub height: usize,
    pub n_base: usize,
    pub n_occlusion: usize,
    /// ln φᵇ, `n_sites × n_base`.
    pub base: Vec<f64>,
    /// ln φᵒ, `n_sites × n_occlusion`.
    pub occlusion: Vec<f64>,
    /// ln ξ, `n_sites × n_base × n_occlusion`; all zero when no product forest is used.
    pub inter: Vec<f64>,
}

impl NodePotentials {
    pub fn n_sites(&self) -> usize {
        self.width * self.height
    }

    pub fn base_at(&self, i: usize) -> &[f64] {
        &self.base[i * self.n_base..(i + 1) * self.n_base]
    }

    pub fn occlusion_at(&self, i: usize) -> &[f64] {
        &self.occlusion[i * self.n_occlusion..(i + 1) * self.n_occlusion]
    }

    pub fn inter_at(&self, i: usize) -> &[f64] {
        let k = self.n_base * self.n_occlusion;
        &self.inter[i * k..(i + 1) * k]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        if self.base.len() != n * self.n_base
            || self.occlusion.len() != n * self.n_occlusion
            || self.inter.len() != n * self.n_base * self.n_occlusion
        {
            return Err(Error::config("node potential arrays do not match the grid"));
        }
        if self.base.iter().chain(&self.occlusion).chain(&self.inter).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node potential".into()));
        }
        Ok(())
    }

    /// Evaluates the forests at every node of `cube`.
    pub fn compute(
        cube: &FeatureCube,
        base: &DecisionForest,
        occlusion: &DecisionForest,
        product: Option<(&DecisionForest, ProductSpace)>,
    ) -> Result<Self> {
        let (nb, no) = (base.n_classes(), occlusion.n_classes());
        if let Some((pf, ps)) = product {
            if ps.n_base() != nb || ps.n_occlusion() != no || pf.n_classes() != ps.len() {
                return Err(Error::config("product forest does not match the layer forests"));
            }
        }
        let per_node: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..cube.n_nodes())
            .into_par_iter()
            .map(|i| {
                let f = cube.node(i);
                let b = association_potential(base, f)?;
                let o = association_potential(occlusion, f)?;
                let x = match product {
                    Some((pf, ps)) => inter_level_potential(pf, ps, f)?,
                    None => vec![0.0; nb * no],
                };
                Ok((b, o, x))
            })
            .collect::<Result<_>>()?;
        let mut out = NodePotentials {
            width: cube.node_width(),
            height: cube.node_height(),
            n_base: nb,
            n_occlusion: no,
            base: Vec::with_capacity(per_node.len() * nb),
            occlusion: Vec::with_capacity(per_node.len() * no),
            inter: Vec::with_capacity(per_node.len() * nb * no),
        };
        for (b, o, x) in per_node {
            out.base.extend(b);
            out.occlusion.extend(o);
            out.inter.extend(x);
        }
        Ok(out)
    }
}
