//! Dense histogram-of-oriented-gradients features.
//!
//! Orientations are unsigned (folded into [0°, 180°)) and measured from the
//! vertical image axis, so a purely vertical gradient lands in bin 0. Bins are
//! centred on multiples of the bin width. Each pixel receives the normalised
//! histogram of the cell containing it.

use serde::{Deserialize, Serialize};

use crate::grid::Grid;

use super::filters::gradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HogParams {
    pub cell: usize,
    pub block: usize,
    pub bins: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams {
            cell: 7,
            block: 2,
            bins: 9,
        }
    }
}

const NORM_EPS: f64 = 1e-6;

/// Orientation of a gradient relative to the vertical axis, in [0, 180).
pub fn orientation_deg(gx: f32, gy: f32) -> f64 {
    let a = (gx as f64).atan2(gy as f64).to_degrees();
    a.rem_euclid(180.0)
}

pub fn orientation_bin(angle_deg: f64, bins: usize) -> usize {
    let width = 180.0 / bins as f64;
    (((angle_deg + width / 2.0) / width).floor() as usize) % bins
}

/// Returns one pixel-resolution grid per orientation bin.
pub fn compute_hog(intensity: &Grid<f32>, params: HogParams) -> Vec<Grid<f32>> {
    let (w, h) = (intensity.width(), intensity.height());
    let HogParams { cell, block, bins } = params;
    let (gx, gy) = gradient(intensity);
    let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));

    let mut hist = vec![0.0f64; cw * ch * bins];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (*gx.get(x, y), *gy.get(x, y));
            let mag = ((a * a + b * b) as f64).sqrt();
            if mag == 0.0 {
                continue;
            }
            let bin = orientation_bin(orientation_deg(a, b), bins);
            hist[((y / cell) * cw + x / cell) * bins + bin] += mag;
        }
    }

    // Blocks of `block`×`block` cells, stride one cell; a grid smaller than a
    // block is covered by a single clipped block.
    let (bw, bh) = (block.min(cw), block.min(ch));
    let mut norm = vec![0.0f64; cw * ch * bins];
    let mut counts = vec![0u32; cw * ch];
    for by in 0..=(ch - bh) {
        for bx in 0..=(cw - bw) {
            let mut energy = 0.0;
            for cy in by..by + bh {
                for cx in bx..bx + bw {
                    let c = (cy * cw + cx) * bins;
                    energy += hist[c..c + bins].iter().map(|v| v * v).sum::<f64>();
                }
            }
            let scale = 1.0 / (energy + NORM_EPS * NORM_EPS).sqrt();
            for cy in by..by + bh {
                for cx in bx..bx + bw {
                    let c = (cy * cw + cx) * bins;
                    for k in 0..bins {
                        norm[c + k] += hist[c + k] * scale;
                    }
                    counts[cy * cw + cx] += 1;
                }
            }
        }
    }
    for (i, &n) in counts.iter().enumerate() {
        for v in &mut norm[i * bins..(i + 1) * bins] {
            *v /= n as f64;
        }
    }

    (0..bins)
        .map(|k| {
            Grid::from_fn(w, h, |x, y| {
                norm[((y / cell) * cw + x / cell) * bins + k] as f32
            })
        })
        .collect()
}
