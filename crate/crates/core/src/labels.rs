//! Class universes of the two label layers and the product space that links them.
//!
//! Every site carries one base label (the most distant surface, which may be
//! hidden) and one occlusion label (the foreground object covering it, or
//! `void`). The inter-level potential works on the product of both sets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Name of the occlusion class meaning "nothing covers the base layer here".
pub const VOID: &str = "void";

pub type ClassIndex = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Base,
    Occlusion,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::Base, Layer::Occlusion];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Base => "base",
            Layer::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

/// Base classes, occlusion classes (with `void` at index 0) and their display colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelDomain {
    base_classes: Vec<String>,
    occlusion_classes: Vec<String>,
    base_palette: Vec<Rgb>,
    occlusion_palette: Vec<Rgb>,
}

impl LabelDomain {
    /// Builds a domain. `void` is inserted at index 0 of the occlusion classes
    /// when the caller did not list it; listing it anywhere else is an error.
    pub fn new(base: Vec<String>, occlusion: Vec<String>) -> Result<Self> {
        let mut occlusion = occlusion;
        match occlusion.iter().position(|c| c == VOID) {
            None => occlusion.insert(0, VOID.to_string()),
            Some(0) => {}
            Some(i) => {
                return Err(Error::config(format!(
                    "`{VOID}` must be the first occlusion class, found at position {i}"
                )))
            }
        }
        if base.is_empty() {
            return Err(Error::config("the base layer needs at least one class"));
        }
        for (layer, classes) in [("base", &base), ("occlusion", &occlusion)] {
            for (i, c) in classes.iter().enumerate() {
                if c.is_empty() {
                    return Err(Error::config(format!("empty class name in {layer} layer")));
                }
                if classes[..i].contains(c) {
                    return Err(Error::config(format!("duplicate {layer} class `{c}`")));
                }
            }
        }
        if let Some(shared) = base.iter().find(|c| occlusion.contains(c)) {
            return Err(Error::config(format!(
                "class `{shared}` appears in both layers; the class sets must be disjoint"
            )));
        }
        let base_palette = (0..base.len()).map(|i| default_color(i, false)).collect();
        let occlusion_palette = (0..occlusion.len()).map(|i| default_color(i, true)).collect();
        Ok(LabelDomain {
            base_classes: base,
            occlusion_classes: occlusion,
            base_palette,
            occlusion_palette,
        })
    }

    /// Aerial-scene domain: asphalt, building, grass, agriculture under tree and car.
    pub fn vaihingen() -> Self {
        let mut d = LabelDomain::new(
            vec!["asphalt".into(), "building".into(), "grass".into(), "agriculture".into()],
            vec![VOID.into(), "tree".into(), "car".into()],
        )
        .expect("static domain is valid");
        d.base_palette = vec![
            Rgb([128, 128, 128]),
            Rgb([255, 165, 0]),
            Rgb([0, 200, 0]),
            Rgb([245, 222, 179]),
        ];
        d.occlusion_palette = vec![Rgb([255, 255, 255]), Rgb([0, 100, 0]), Rgb([255, 0, 0])];
        d
    }

    pub fn with_palette(mut self, layer: Layer, colors: Vec<Rgb>) -> Result<Self> {
        if colors.len() != self.n_classes(layer) {
            return Err(Error::config(format!(
                "{layer} palette has {} colors for {} classes",
                colors.len(),
                self.n_classes(layer)
            )));
        }
        match layer {
            Layer::Base => self.base_palette = colors,
            Layer::Occlusion => self.occlusion_palette = colors,
        }
        Ok(self)
    }

    pub fn classes(&self, layer: Layer) -> &[String] {
        match layer {
            Layer::Base => &self.base_classes,
            Layer::Occlusion => &self.occlusion_classes,
        }
    }

    pub fn palette(&self, layer: Layer) -> &[Rgb] {
        match layer {
            Layer::Base => &self.base_palette,
            Layer::Occlusion => &self.occlusion_palette,
        }
    }

    pub fn n_classes(&self, layer: Layer) -> usize {
        self.classes(layer).len()
    }

    pub fn n_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn n_occlusion(&self) -> usize {
        self.occlusion_classes.len()
    }

    /// |Cⁱ| = |Cᵇ|·|Cᵒ|.
    pub fn n_product(&self) -> usize {
        self.base_classes.len() * self.occlusion_classes.len()
    }

    pub fn class_index(&self, layer: Layer, name: &str) -> Option<ClassIndex> {
        self.classes(layer)
            .iter()
            .position(|c| c == name)
            .map(|i| i as ClassIndex)
    }

    pub fn product_space(&self) -> ProductSpace {
        ProductSpace::new(self.n_base(), self.n_occlusion())
    }

    pub fn encode_product(&self, base: ClassIndex, occlusion: ClassIndex) -> Result<ClassIndex> {
        self.product_space().encode(base, occlusion)
    }

    pub fn decode_product(&self, product: ClassIndex) -> Result<(ClassIndex, ClassIndex)> {
        self.product_space().decode(product)
    }
}

fn default_color(i: usize, occlusion: bool) -> Rgb {
    if occlusion && i == 0 {
        return Rgb([255, 255, 255]);
    }
    const TABLE: [[u8; 3]; 8] = [
        [128, 128, 128],
        [255, 165, 0],
        [0, 200, 0],
        [245, 222, 179],
        [0, 100, 0],
        [255, 0, 0],
        [0, 160, 255],
        [160, 0, 200],
    ];
    Rgb(TABLE[(i + if occlusion { 3 } else { 0 }) % TABLE.len()])
}

/// Row-major bijection between (base, occlusion) pairs and product labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductSpace {
    n_base: usize,
    n_occlusion: usize,
}

impl ProductSpace {
    pub fn new(n_base: usize, n_occlusion: usize) -> Self {
        ProductSpace {
            n_base,
            n_occlusion,
        }
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_occlusion(&self) -> usize {
        self.n_occlusion
    }

    pub fn len(&self) -> usize {
        self.n_base * self.n_occlusion
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, base: ClassIndex, occlusion: ClassIndex) -> Result<ClassIndex> {
        let (b, o) = (base as usize, occlusion as usize);
        if b >= self.n_base || o >= self.n_occlusion {
            return Err(Error::domain(format!(
                "label pair ({b}, {o}) outside {}x{} product space",
                self.n_base, self.n_occlusion
            )));
        }
        Ok((b * self.n_occlusion + o) as ClassIndex)
    }

    pub fn decode(&self, product: ClassIndex) -> Result<(ClassIndex, ClassIndex)> {
        let p = product as usize;
        if p >= self.len() {
            return Err(Error::domain(format!(
                "product label {p} outside range 0..{}",
                self.len()
            )));
        }
        Ok(((p / self.n_occlusion) as ClassIndex, (p % self.n_occlusion) as ClassIndex))
    }
}

/// Base and occlusion label grids over the same site lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoLayerLabeling {
    pub base: Grid<ClassIndex>,
    pub occlusion: Grid<ClassIndex>,
}

impl TwoLayerLabeling {
    pub fn new(base: Grid<ClassIndex>, occlusion: Grid<ClassIndex>) -> Result<Self> {
        if !base.same_shape(&occlusion) {
            return Err(Error::domain(format!(
                "base layer is {}x{} but occlusion layer is {}x{}",
                base.width(),
                base.height(),
                occlusion.width(),
                occlusion.height()
            )));
        }
        Ok(TwoLayerLabeling { base, occlusion })
    }

    /// All-zero labeling (first base class, `void`).
    pub fn zeros(width: usize, height: usize) -> Self {
        TwoLayerLabeling {
            base: Grid::filled(width, height, 0),
            occlusion: Grid::filled(width, height, 0),
        }
    }

    pub fn width(&self) -> usize {
        self.base.width()
    }

    pub fn height(&self) -> usize {
        self.base.height()
    }

    pub fn n_sites(&self) -> usize {
        self.base.len()
    }

    pub fn layer(&self, layer: Layer) -> &Grid<ClassIndex> {
        match layer {
            Layer::Base => &self.base,
            Layer::Occlusion => &self.occlusion,
        }
    }

    pub fn validate(&self, domain: &LabelDomain) -> Result<()> {
        for layer in Layer::BOTH {
            let n = domain.n_classes(layer);
            if let Some(bad) = self.layer(layer).as_slice().iter().find(|&&v| v as usize >= n) {
                return Err(Error::domain(format!(
                    "{layer} label value {bad} exceeds the {n} declared classes"
                )));
            }
        }
        Ok(())
    }
}
