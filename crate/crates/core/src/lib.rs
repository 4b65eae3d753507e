//! Two-layer conditional random field for labeling scenes with partially
//! occluded objects.
//!
//! Every site carries a base label (ground surface such as road or grass,
//! possibly hidden) and an occlusion label (tree, car, or `void`). The model
//! combines random-forest association potentials for each layer, contrast
//! sensitive co-occurrence potentials within each layer and a random-forest
//! potential over label pairs linking the two layers. MAP labelings come
//! from max-product loopy belief propagation; the weights of all terms are
//! fitted with Powell's derivative-free direction-set search.

pub mod error;
pub mod grid;
pub mod labels;
pub mod features;
pub mod forest;
pub mod potentials;
pub mod inference;
pub mod powell;
pub mod evaluation;
pub mod dataset;
pub mod synthetic;
pub mod training;
pub mod container;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
pub use grid::Grid;
pub use labels::{ClassIndex, LabelDomain, Layer, ProductSpace, Rgb, TwoLayerLabeling, VOID};
