//! Site-wise feature vectors.
//!
//! Raw features are computed at pixel resolution in their natural units,
//! optionally averaged over two larger neighbourhoods, clamped into a fixed
//! per-feature range and quantized to one byte. Fixed ranges (rather than
//! per-image normalisation) keep forest thresholds comparable across scenes.

mod color;
pub mod filters;
mod hog;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use color::{compute_intensity, compute_ndvi, compute_saturation, hls_saturation};
pub use filters::{local_variance as compute_local_variance, quantize};
pub use hog::{compute_hog, orientation_bin, orientation_deg, HogParams};

/// Observed channels of one scene on a common pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    width: usize,
    height: usize,
    site_size: usize,
    value_range: f32,
    channels: Vec<(String, Grid<f32>)>,
}

impl SceneData {
    pub const NIR: &'static str = "nir";
    pub const RED: &'static str = "red";
    pub const DSM: &'static str = "dsm";

    pub fn new(width: usize, height: usize, site_size: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("scene must have at least one pixel"));
        }
        if site_size == 0 {
            return Err(Error::config("site size must be at least 1"));
        }
        Ok(SceneData {
            width,
            height,
            site_size,
            value_range: 255.0,
            channels: Vec::new(),
        })
    }

    /// Full-scale value of the colour channels (255 for 8-bit images).
    pub fn with_value_range(mut self, full_scale: f32) -> Self {
        self.value_range = full_scale;
        self
    }

    pub fn add_channel(&mut self, name: &str, grid: Grid<f32>) -> Result<()> {
        if grid.width() != self.width || grid.height() != self.height {
            return Err(Error::domain(format!(
                "channel `{name}` is {}x{}, scene is {}x{}",
                grid.width(),
                grid.height(),
                self.width,
                self.height
            )));
        }
        if self.channel(name).is_some() {
            return Err(Error::domain(format!("duplicate channel `{name}`")));
        }
        self.channels.push((name.to_string(), grid));
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn site_size(&self) -> usize {
        self.site_size
    }

    pub fn set_site_size(&mut self, site_size: usize) -> Result<()> {
        if site_size == 0 {
            return Err(Error::config("site size must be at least 1"));
        }
        self.site_size = site_size;
        Ok(())
    }

    pub fn value_range(&self) -> f32 {
        self.value_range
    }

    pub fn node_width(&self) -> usize {
        self.width.div_ceil(self.site_size)
    }

    pub fn node_height(&self) -> usize {
        self.height.div_ceil(self.site_size)
    }

    pub fn channel(&self, name: &str) -> Option<&Grid<f32>> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn channels(&self) -> impl Iterator<Item = (&str, &Grid<f32>)> {
        self.channels.iter().map(|(n, g)| (n.as_str(), g))
    }

    /// Image channels, i.e. everything except the surface model.
    pub fn color_channels(&self) -> impl Iterator<Item = (&str, &Grid<f32>)> {
        self.channels().filter(|(n, _)| *n != Self::DSM)
    }

    /// Image channels without the near-infrared band.
    pub fn visible_channels(&self) -> impl Iterator<Item = (&str, &Grid<f32>)> {
        self.color_channels().filter(|(n, _)| *n != Self::NIR)
    }

    /// Pixel sampled for node (nx, ny): the centre of its patch.
    pub fn node_center(&self, nx: usize, ny: usize) -> (usize, usize) {
        let s = self.site_size;
        (
            (nx * s + s / 2).min(self.width - 1),
            (ny * s + s / 2).min(self.height - 1),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Intensity,
    Saturation,
    VarIntensity,
    VarSaturation,
    VarGradient,
    Ndvi,
    Ndsm,
    Dist,
    DsmGradient,
    Hog(u8),
    YCoord,
}

impl FeatureKind {
    /// Multiscale windows for the spectral and height features.
    const WIDE_WINDOWS: [usize; 2] = [45, 91];
    /// Multiscale windows for texture, distance, gradient and HOG features.
    const NARROW_WINDOWS: [usize; 2] = [10, 100];

    /// Vaihingen-style catalogue for colour-infrared imagery with a DSM.
    pub const AERIAL: [FeatureKind; 9] = [
        FeatureKind::Intensity,
        FeatureKind::Saturation,
        FeatureKind::VarIntensity,
        FeatureKind::VarSaturation,
        FeatureKind::VarGradient,
        FeatureKind::Ndvi,
        FeatureKind::Ndsm,
        FeatureKind::Dist,
        FeatureKind::DsmGradient,
    ];

    pub fn name(self) -> String {
        match self {
            FeatureKind::Intensity => "int".into(),
            FeatureKind::Saturation => "sat".into(),
            FeatureKind::VarIntensity => "var_int".into(),
            FeatureKind::VarSaturation => "var_sat".into(),
            FeatureKind::VarGradient => "var_grad".into(),
            FeatureKind::Ndvi => "ndvi".into(),
            FeatureKind::Ndsm => "ndsm".into(),
            FeatureKind::Dist => "dist".into(),
            FeatureKind::DsmGradient => "dsm_grad".into(),
            FeatureKind::Hog(b) => format!("hog{b}"),
            FeatureKind::YCoord => "y".into(),
        }
    }

    /// Key used for per-feature overrides; all HOG bins share `hog`.
    fn group(self) -> String {
        match self {
            FeatureKind::Hog(_) => "hog".into(),
            k => k.name(),
        }
    }

    fn default_windows(self) -> [usize; 2] {
        match self {
            FeatureKind::Intensity | FeatureKind::Saturation | FeatureKind::Ndvi | FeatureKind::Ndsm => {
                Self::WIDE_WINDOWS
            }
            _ => Self::NARROW_WINDOWS,
        }
    }

    fn default_range(self) -> (f32, f32) {
        match self {
            FeatureKind::Intensity => (0.0, 255.0),
            FeatureKind::Saturation => (0.0, 1.0),
            FeatureKind::VarIntensity => (0.0, 4096.0),
            FeatureKind::VarSaturation => (0.0, 0.05),
            FeatureKind::VarGradient => (0.0, 2048.0),
            FeatureKind::Ndvi => (-1.0, 1.0),
            FeatureKind::Ndsm => (0.0, 25.5),
            FeatureKind::Dist => (0.0, 64.0),
            FeatureKind::DsmGradient => (0.0, 10.0),
            FeatureKind::Hog(_) => (0.0, 1.0),
            FeatureKind::YCoord => (0.0, 1.0),
        }
    }

    fn required_channels(self, scene: &SceneData) -> Vec<String> {
        let mut missing = Vec::new();
        let visible = scene.visible_channels().count();
        let color = scene.color_channels().count();
        let needs_intensity = matches!(
            self,
            FeatureKind::Intensity
                | FeatureKind::VarIntensity
                | FeatureKind::VarGradient
                | FeatureKind::Dist
                | FeatureKind::Hog(_)
        );
        if needs_intensity && visible == 0 {
            missing.push("a non-infrared colour channel".to_string());
        }
        if matches!(self, FeatureKind::Saturation | FeatureKind::VarSaturation) && color < 2 {
            missing.push("two colour channels".to_string());
        }
        if self == FeatureKind::Ndvi {
            for c in [SceneData::NIR, SceneData::RED] {
                if scene.channel(c).is_none() {
                    missing.push(c.to_string());
                }
            }
        }
        if matches!(self, FeatureKind::Ndsm | FeatureKind::DsmGradient) && scene.channel(SceneData::DSM).is_none() {
            missing.push(SceneData::DSM.to_string());
        }
        missing
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "int" => FeatureKind::Intensity,
            "sat" => FeatureKind::Saturation,
            "var_int" => FeatureKind::VarIntensity,
            "var_sat" => FeatureKind::VarSaturation,
            "var_grad" => FeatureKind::VarGradient,
            "ndvi" => FeatureKind::Ndvi,
            "ndsm" => FeatureKind::Ndsm,
            "dist" => FeatureKind::Dist,
            "dsm_grad" => FeatureKind::DsmGradient,
            "y" => FeatureKind::YCoord,
            other => match other.strip_prefix("hog").and_then(|b| b.parse::<u8>().ok()) {
                Some(b) if b < 9 => FeatureKind::Hog(b),
                _ => return Err(Error::config(format!("unknown feature `{other}`"))),
            },
        })
    }
}

/// One enabled feature at one scale (1 = site, 2 and 3 = neighbourhood means).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureEntry {
    pub kind: FeatureKind,
    pub scale: u8,
}

impl fmt::Display for FeatureEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.scale)
    }
}

impl TryFrom<String> for FeatureEntry {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureEntry> for String {
    fn from(e: FeatureEntry) -> String {
        e.to_string()
    }
}

impl FromStr for FeatureEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, scale) = s.split_once('@').unwrap_or((s, "1"));
        let scale: u8 = scale
            .parse()
            .map_err(|_| Error::config(format!("bad scale in feature `{s}`")))?;
        if !(1..=3).contains(&scale) {
            return Err(Error::config(format!("feature `{s}`: scale must be 1, 2 or 3")));
        }
        Ok(FeatureEntry {
            kind: name.parse()?,
            scale,
        })
    }
}

/// Numeric settings of the feature extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub var_int_window: usize,
    pub var_sat_window: usize,
    pub var_grad_window: usize,
    /// Gradient magnitude above which a pixel counts as an edge for `dist`.
    /// `None` falls back to the 85th percentile of the scene itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_threshold: Option<f32>,
    pub opening_size: usize,
    pub median_size: usize,
    pub hog: HogParams,
    /// Overrides of the scale-2/3 windows, keyed by feature name (`hog` for all bins).
    pub windows: BTreeMap<String, [usize; 2]>,
    /// Overrides of the quantization ranges, keyed like `windows`.
    pub ranges: BTreeMap<String, (f32, f32)>,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            var_int_window: 7,
            var_sat_window: 13,
            var_grad_window: 13,
            edge_threshold: None,
            opening_size: 31,
            median_size: 31,
            hog: HogParams::default(),
            windows: BTreeMap::new(),
            ranges: BTreeMap::new(),
        }
    }
}

impl FeatureParams {
    pub fn scale_windows(&self, kind: FeatureKind) -> [usize; 2] {
        self.windows
            .get(&kind.group())
            .copied()
            .unwrap_or_else(|| kind.default_windows())
    }

    pub fn range(&self, kind: FeatureKind) -> (f32, f32) {
        self.ranges
            .get(&kind.group())
            .copied()
            .unwrap_or_else(|| kind.default_range())
    }
}

/// Ordered list of enabled features plus extractor settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub entries: Vec<FeatureEntry>,
    pub params: FeatureParams,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self::aerial()
    }
}

impl FeatureSpec {
    /// Every kind at every listed scale, kind-major.
    pub fn multiscale(kinds: &[FeatureKind], scales: &[u8], params: FeatureParams) -> Result<Self> {
        let mut entries = Vec::with_capacity(kinds.len() * scales.len());
        for &kind in kinds {
            for &scale in scales {
                if !(1..=3).contains(&scale) {
                    return Err(Error::config(format!("scale {scale} is not 1, 2 or 3")));
                }
                entries.push(FeatureEntry { kind, scale });
            }
        }
        Ok(FeatureSpec { entries, params })
    }

    /// The aerial catalogue at all three scales (27 features).
    pub fn aerial() -> Self {
        Self::multiscale(&FeatureKind::AERIAL, &[1, 2, 3], FeatureParams::default())
            .expect("static spec is valid")
    }

    pub fn n_features(&self) -> usize {
        self.entries.len()
    }

    fn kinds(&self) -> Vec<FeatureKind> {
        let mut kinds: Vec<FeatureKind> = self.entries.iter().map(|e| e.kind).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Channels the spec needs but the scene lacks.
    pub fn missing_channels(&self, scene: &SceneData) -> Vec<String> {
        let mut missing: Vec<String> = self
            .kinds()
            .into_iter()
            .flat_map(|k| k.required_channels(scene))
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}

/// Quantized feature vectors of every node of a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCube {
    node_width: usize,
    node_height: usize,
    n_features: usize,
    values: Vec<u8>,
}

impl FeatureCube {
    pub fn from_values(node_width: usize, node_height: usize, n_features: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != node_width * node_height * n_features {
            return Err(Error::domain("feature cube size does not match its dimensions"));
        }
        Ok(FeatureCube {
            node_width,
            node_height,
            n_features,
            values,
        })
    }

    pub fn node_width(&self) -> usize {
        self.node_width
    }

    pub fn node_height(&self) -> usize {
        self.node_height
    }

    pub fn n_nodes(&self) -> usize {
        self.node_width * self.node_height
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn node(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn node_at(&self, x: usize, y: usize) -> &[u8] {
        self.node(y * self.node_width + x)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.values
    }
}

/// nDSM: height above a terrain model obtained by opening then median filtering the DSM.
pub fn compute_ndsm(scene: &SceneData, opening_size: usize, median_size: usize) -> Result<Grid<f32>> {
    let dsm = scene
        .channel(SceneData::DSM)
        .ok_or_else(|| Error::config("nDSM needs a `dsm` channel"))?;
    if opening_size == 0 || median_size == 0 {
        return Err(Error::config("opening and median sizes must be positive"));
    }
    let dtm = filters::median_filter(&filters::opening(dsm, opening_size), median_size);
    Ok(Grid::from_fn(dsm.width(), dsm.height(), |x, y| {
        (dsm.get(x, y) - dtm.get(x, y)).max(0.0)
    }))
}

pub fn compute_dsm_gradient(scene: &SceneData) -> Result<Grid<f32>> {
    let dsm = scene
        .channel(SceneData::DSM)
        .ok_or_else(|| Error::config("DSM gradient needs a `dsm` channel"))?;
    Ok(filters::gradient_magnitude(dsm))
}

/// Euclidean distance to the nearest pixel whose intensity gradient exceeds `threshold`.
pub fn compute_dist_to_edge(scene: &SceneData, threshold: f32) -> Result<Grid<f32>> {
    let grad = filters::gradient_magnitude(&compute_intensity(scene)?);
    Ok(filters::distance_transform(&grad.map(|&g| g > threshold)))
}

/// Node row scaled to [0, 1] at node resolution.
pub fn compute_y_coordinate(scene: &SceneData) -> Grid<f32> {
    let (nw, nh) = (scene.node_width(), scene.node_height());
    let denom = (nh.max(2) - 1) as f32;
    Grid::from_fn(nw, nh, |_, y| y as f32 / denom)
}

/// Default edge threshold: the 85th percentile of the intensity gradient magnitudes.
pub fn edge_threshold_for<'a>(scenes: impl IntoIterator<Item = &'a SceneData>) -> Result<f32> {
    let mut mags = Vec::new();
    for s in scenes {
        mags.extend_from_slice(filters::gradient_magnitude(&compute_intensity(s)?).as_slice());
    }
    Ok(filters::quantile(&mut mags, 0.85))
}

/// Scale 1 (the grid itself) plus its two neighbourhood means.
pub fn aggregate_multiscale(grid: &Grid<f32>, kind: FeatureKind, params: &FeatureParams) -> [Grid<f32>; 3] {
    let [w2, w3] = params.scale_windows(kind);
    [grid.clone(), filters::box_mean(grid, w2), filters::box_mean(grid, w3)]
}

fn raw_feature(scene: &SceneData, kind: FeatureKind, params: &FeatureParams, hog_cache: &mut Option<Vec<Grid<f32>>>) -> Result<Grid<f32>> {
    Ok(match kind {
        FeatureKind::Intensity => compute_intensity(scene)?,
        FeatureKind::Saturation => compute_saturation(scene)?,
        FeatureKind::VarIntensity => filters::local_variance(&compute_intensity(scene)?, params.var_int_window)?,
        FeatureKind::VarSaturation => filters::local_variance(&compute_saturation(scene)?, params.var_sat_window)?,
        FeatureKind::VarGradient => {
            let grad = filters::gradient_magnitude(&compute_intensity(scene)?);
            filters::local_variance(&grad, params.var_grad_window)?
        }
        FeatureKind::Ndvi => compute_ndvi(scene)?,
        FeatureKind::Ndsm => compute_ndsm(scene, params.opening_size, params.median_size)?,
        FeatureKind::Dist => {
            let threshold = match params.edge_threshold {
                Some(t) => t,
                None => edge_threshold_for([scene])?,
            };
            compute_dist_to_edge(scene, threshold)?
        }
        FeatureKind::DsmGradient => compute_dsm_gradient(scene)?,
        FeatureKind::Hog(bin) => {
            if hog_cache.is_none() {
                *hog_cache = Some(compute_hog(&compute_intensity(scene)?, params.hog));
            }
            hog_cache.as_ref().expect("filled above")[bin as usize].clone()
        }
        FeatureKind::YCoord => {
            let nodes = compute_y_coordinate(scene);
            let s = scene.site_size();
            Grid::from_fn(scene.width(), scene.height(), |x, y| *nodes.get(x / s, y / s))
        }
    })
}

/// Assembles the quantized per-node feature vectors in spec order.
pub fn build_feature_cube(scene: &SceneData, spec: &FeatureSpec) -> Result<FeatureCube> {
    let missing = spec.missing_channels(scene);
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "feature spec needs channels the scene lacks: {}",
            missing.join(", ")
        )));
    }
    let params = &spec.params;
    let (nw, nh) = (scene.node_width(), scene.node_height());
    let nf = spec.n_features();
    let mut values = vec![0u8; nw * nh * nf];
    let mut hog_cache = None;

    for kind in spec.kinds() {
        let (lo, hi) = params.range(kind);
        let raw = raw_feature(scene, kind, params, &mut hog_cache)?.map(|&v| v.clamp(lo, hi));
        let wanted: Vec<(usize, u8)> = spec
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .map(|(i, e)| (i, e.scale))
            .collect();
        let [w2, w3] = params.scale_windows(kind);
        for (slot, scale) in wanted {
            let grid = match scale {
                1 => raw.clone(),
                2 => filters::box_mean(&raw, w2),
                _ => filters::box_mean(&raw, w3),
            };
            for ny in 0..nh {
                for nx in 0..nw {
                    let (px, py) = scene.node_center(nx, ny);
                    values[(ny * nw + nx) * nf + slot] = quantize(*grid.get(px, py), lo, hi);
                }
            }
        }
    }
    FeatureCube::from_values(nw, nh, nf, values)
}
