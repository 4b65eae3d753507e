//! Synthetic two-layer aerial scenes.
//!
//! A base layout of roads, buildings and grass / agricultural fields is
//! painted first. Trees and cars are then dropped on top, each only over the
//! base classes it may cover. The rendered channels show whatever is visible
//! from above, while the reference keeps both layers everywhere.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::features::SceneData;
use crate::grid::Grid;
use crate::labels::{ClassIndex, LabelDomain, Layer, TwoLayerLabeling, VOID};
use crate::training::SplitPlan;

pub const ASPHALT: ClassIndex = 0;
pub const BUILDING: ClassIndex = 1;
pub const GRASS: ClassIndex = 2;
pub const AGRICULTURE: ClassIndex = 3;
pub const TREE: ClassIndex = 1;
pub const CAR: ClassIndex = 2;

/// Channels written by the generator.
pub const CHANNELS: [&str; 4] = ["nir", "red", "green", "dsm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutParams {
    /// Inclusive range for the number of roads.
    pub roads: [usize; 2],
    pub road_width: [f64; 2],
    pub buildings: [usize; 2],
    /// Side length range of building rectangles.
    pub building_size: [usize; 2],
    /// Number of background cells split between grass and agriculture.
    pub field_cells: usize,
    /// Probability that a background cell is agricultural.
    pub agriculture_share: f64,
    /// Period of the crop-row stripes on agricultural fields, in pixels.
    pub stripe_period: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            roads: [2, 3],
            road_width: [5.0, 9.0],
            buildings: [4, 8],
            building_size: [10, 22],
            field_cells: 8,
            agriculture_share: 0.4,
            stripe_period: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccluderParams {
    pub tree_fraction: f64,
    pub tree_radius: [f64; 2],
    pub car_fraction: f64,
    /// Short and long side of car rectangles.
    pub car_size: [usize; 2],
    /// Share of trees centred on a road pixel rather than anywhere.
    pub tree_on_roads: f64,
    /// Base classes a tree may cover.
    pub tree_over: Vec<String>,
    /// Base classes a car may cover.
    pub car_over: Vec<String>,
    pub max_attempts: usize,
}

impl Default for OccluderParams {
    fn default() -> Self {
        OccluderParams {
            tree_fraction: 0.2,
            tree_radius: [3.0, 7.0],
            car_fraction: 0.05,
            car_size: [3, 6],
            tree_on_roads: 0.0,
            tree_over: vec!["asphalt".into(), "building".into(), "grass".into()],
            car_over: vec!["asphalt".into()],
            max_attempts: 20_000,
        }
    }
}

/// Mean and spread of one class in every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    /// Mean of the nir, red and green channels.
    pub mean: [f64; 3],
    pub sigma: f64,
    /// Height above terrain in metres.
    pub height: f64,
    pub height_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceModel {
    pub classes: BTreeMap<String, ClassAppearance>,
    /// Amplitude of the smooth terrain undulation in metres.
    pub terrain_amplitude: f64,
    /// Contrast of the crop-row stripes on agricultural fields.
    pub stripe_contrast: f64,
    /// Sensor noise of the surface model in metres.
    pub dsm_noise: f64,
    /// Per-pixel relative spread of canopy height.
    pub canopy_roughness: f64,
    /// Chance that a canopy pixel shows the surface below it in the height model.
    pub canopy_gaps: f64,
}

impl Default for AppearanceModel {
    fn default() -> Self {
        let c = |mean: [f64; 3], sigma: f64, height: f64, height_sigma: f64| ClassAppearance {
            mean,
            sigma,
            height,
            height_sigma,
        };
        let classes = [
            ("asphalt", c([95.0, 100.0, 100.0], 18.0, 0.0, 0.0)),
            ("building", c([110.0, 130.0, 105.0], 22.0, 8.0, 1.5)),
            ("grass", c([170.0, 90.0, 125.0], 18.0, 0.0, 0.0)),
            ("agriculture", c([160.0, 110.0, 120.0], 18.0, 0.0, 0.0)),
            ("tree", c([175.0, 80.0, 115.0], 20.0, 9.0, 2.0)),
            ("car", c([105.0, 125.0, 105.0], 30.0, 1.5, 0.2)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        AppearanceModel {
            classes,
            terrain_amplitude: 1.5,
            stripe_contrast: 20.0,
            dsm_noise: 0.15,
            canopy_roughness: 0.0,
            canopy_gaps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRecipe {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub layout: LayoutParams,
    pub occluders: OccluderParams,
    pub appearance: AppearanceModel,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            width: 128,
            height: 128,
            seed: 0,
            layout: LayoutParams::default(),
            occluders: OccluderParams::default(),
            appearance: AppearanceModel::default(),
        }
    }
}

impl SceneRecipe {
    pub fn domain() -> LabelDomain {
        LabelDomain::vaihingen()
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.occluders;
        let l = &self.layout;
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("synthetic scenes must be at least 8x8"));
        }
        if !(0.0..=1.0).contains(&o.tree_on_roads) {
            return Err(Error::config("tree_on_roads must lie in [0, 1]"));
        }
        for (name, f) in [("tree_fraction", o.tree_fraction), ("car_fraction", o.car_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&(o.tree_fraction + o.car_fraction)) {
            return Err(Error::config("total occlusion fraction must lie in [0, 1)"));
        }
        let a = &self.appearance;
        if !(0.0..=1.0).contains(&a.canopy_gaps) || a.canopy_roughness < 0.0 {
            return Err(Error::config("canopy_gaps must lie in [0, 1] and canopy_roughness must be non-negative"));
        }
        if !(0.0..=1.0).contains(&l.agriculture_share) {
            return Err(Error::config("agriculture_share must lie in [0, 1]"));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(o.tree_radius) || !ordered(l.road_width) {
            return Err(Error::config("tree_radius and road_width need 0 < min <= max"));
        }
        let ordered_u = |r: [usize; 2]| r[0] <= r[1];
        if !ordered_u(l.roads) || !ordered_u(l.buildings) || !ordered_u(l.building_size) || o.car_size[0] == 0 || !ordered_u(o.car_size) {
            return Err(Error::config("layout ranges need min <= max"));
        }
        if l.field_cells == 0 {
            return Err(Error::config("field_cells must be at least 1"));
        }
        let domain = Self::domain();
        for name in o.tree_over.iter().chain(&o.car_over) {
            if domain.class_index(Layer::Base, name).is_none() {
                return Err(Error::config(format!("unknown base class `{name}` in occluder compatibility")));
            }
        }
        for class in domain.classes(Layer::Base).iter().chain(&domain.classes(Layer::Occlusion)[1..]) {
            let a = self
                .appearance
                .classes
                .get(class)
                .ok_or_else(|| Error::config(format!("no appearance model for `{class}`")))?;
            if a.mean.iter().any(|m| !(0.0..=255.0).contains(m)) || a.sigma < 0.0 || a.height_sigma < 0.0 {
                return Err(Error::config(format!("appearance of `{class}` outside the channel range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub tree_fraction: f64,
    pub car_fraction: f64,
    pub occlusion_fraction: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub data: SceneData,
    pub labels: TwoLayerLabeling,
    pub report: GenerationReport,
}

pub fn generate(recipe: &SceneRecipe) -> Result<GeneratedScene> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let (w, h) = (recipe.width, recipe.height);
    let domain = SceneRecipe::domain();

    let base = paint_layout(recipe, &mut rng);
    let mut warnings = Vec::new();
    let mut occ = Grid::filled(w, h, 0 as ClassIndex);
    let compat = |names: &[String]| -> Vec<bool> {
        (0..domain.n_base())
            .map(|c| names.iter().any(|n| domain.class_index(Layer::Base, n) == Some(c as ClassIndex)))
            .collect()
    };
    let tree_ok = compat(&recipe.occluders.tree_over);
    let car_ok = compat(&recipe.occluders.car_over);
    let mut tree_mask = Grid::filled(w, h, false);
    let tree_px = place_trees(recipe, &mut rng, &base, &tree_ok, &mut occ, &mut tree_mask, &mut warnings);
    let car_px = place_cars(recipe, &mut rng, &base, &car_ok, &mut occ, &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }

    let data = render(recipe, &mut rng, &base, &occ, &tree_mask)?;
    let n = (w * h) as f64;
    Ok(GeneratedScene {
        data,
        labels: TwoLayerLabeling::new(base, occ)?,
        report: GenerationReport {
            tree_fraction: tree_px as f64 / n,
            car_fraction: car_px as f64 / n,
            occlusion_fraction: (tree_px + car_px) as f64 / n,
            warnings,
        },
    })
}

fn paint_layout(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Grid<ClassIndex> {
    let (w, h) = (recipe.width, recipe.height);
    let l = &recipe.layout;

    // background: nearest of a few random cell centres, each grass or field
    let cells: Vec<(f64, f64, ClassIndex)> = (0..l.field_cells)
        .map(|_| {
            let class = if rng.random_bool(l.agriculture_share) { AGRICULTURE } else { GRASS };
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), class)
        })
        .collect();
    let mut base = Grid::from_fn(w, h, |x, y| {
        let (mut best, mut class) = (f64::INFINITY, GRASS);
        for &(cx, cy, c) in &cells {
            let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d < best {
                best = d;
                class = c;
            }
        }
        class
    });

    let n_roads = rng.random_range(l.roads[0]..=l.roads[1]);
    for _ in 0..n_roads {
        let half = rng.random_range(l.road_width[0]..=l.road_width[1]) / 2.0;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (px, py) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (nx, ny) = (-angle.sin(), angle.cos());
        for y in 0..h {
            for x in 0..w {
                if ((x as f64 - px) * nx + (y as f64 - py) * ny).abs() <= half {
                    *base.get_mut(x, y) = ASPHALT;
                }
            }
        }
    }

    let n_buildings = rng.random_range(l.buildings[0]..=l.buildings[1]);
    let mut placed = 0;
    for _ in 0..n_buildings * 50 {
        if placed == n_buildings {
            break;
        }
        let bw = rng.random_range(l.building_size[0]..=l.building_size[1]).min(w - 2);
        let bh = rng.random_range(l.building_size[0]..=l.building_size[1]).min(h - 2);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        // keep a one-pixel margin to roads and other buildings
        let clear = (y0.saturating_sub(1)..(y0 + bh + 1).min(h))
            .all(|y| (x0.saturating_sub(1)..(x0 + bw + 1).min(w)).all(|x| matches!(*base.get(x, y), GRASS | AGRICULTURE)));
        if !clear {
            continue;
        }
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                *base.get_mut(x, y) = BUILDING;
            }
        }
        placed += 1;
    }
    base
}

fn place_trees(
    recipe: &SceneRecipe,
    rng: &mut ChaCha8Rng,
    base: &Grid<ClassIndex>,
    ok: &[bool],
    occ: &mut Grid<ClassIndex>,
    mask: &mut Grid<bool>,
    warnings: &mut Vec<String>,
) -> usize {
    let o = &recipe.occluders;
    let (w, h) = (recipe.width, recipe.height);
    let target = (o.tree_fraction * (w * h) as f64).round() as usize;
    let roads: Vec<usize> = (0..w * h).filter(|&i| base.as_slice()[i] == ASPHALT).collect();
    let mut covered = 0usize;
    let mut attempts = 0;
    while covered < target && attempts < o.max_attempts {
        attempts += 1;
        let r = rng.random_range(o.tree_radius[0]..=o.tree_radius[1]);
        let (cx, cy) = if o.tree_on_roads > 0.0 && !roads.is_empty() && rng.random_bool(o.tree_on_roads) {
            let i = roads[rng.random_range(0..roads.len())];
            ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)
        } else {
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))
        };
        let pixels = disc(cx, cy, r, w, h);
        if pixels.is_empty() || pixels.iter().any(|&(x, y)| !ok[*base.get(x, y) as usize]) {
            continue;
        }
        let fresh = pixels.iter().filter(|&&(x, y)| !*mask.get(x, y)).count();
        if fresh == 0 || covered + fresh > target + target / 20 {
            continue;
        }
        for (x, y) in pixels {
            *mask.get_mut(x, y) = true;
            *occ.get_mut(x, y) = TREE;
        }
        covered += fresh;
    }
    if covered + target / 20 < target {
        warnings.push(format!(
            "tree coverage {:.3} below target {:.3} after {attempts} attempts",
            covered as f64 / (w * h) as f64,
            o.tree_fraction
        ));
    }
    covered
}

fn disc(cx: f64, cy: f64, r: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                out.push((x, y));
            }
        }
    }
    out
}

fn place_cars(
    recipe: &SceneRecipe,
    rng: &mut ChaCha8Rng,
    base: &Grid<ClassIndex>,
    ok: &[bool],
    occ: &mut Grid<ClassIndex>,
    warnings: &mut Vec<String>,
) -> usize {
    let o = &recipe.occluders;
    let (w, h) = (recipe.width, recipe.height);
    let target = (o.car_fraction * (w * h) as f64).round() as usize;
    let mut covered = 0;
    let mut attempts = 0;
    let [short, long] = o.car_size;
    while covered < target && attempts < o.max_attempts {
        attempts += 1;
        let (cw, ch) = if rng.random_bool(0.5) { (short, long) } else { (long, short) };
        if cw > w || ch > h {
            break;
        }
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        // one free pixel around every car so neighbours stay separate
        let fits = (y0..y0 + ch).all(|y| (x0..x0 + cw).all(|x| ok[*base.get(x, y) as usize]))
            && (y0.saturating_sub(1)..(y0 + ch + 1).min(h))
                .all(|y| (x0.saturating_sub(1)..(x0 + cw + 1).min(w)).all(|x| *occ.get(x, y) == 0));
        if !fits || covered + cw * ch > target + target / 10 + 1 {
            continue;
        }
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                *occ.get_mut(x, y) = CAR;
            }
        }
        covered += cw * ch;
    }
    if covered + target / 10 < target {
        warnings.push(format!(
            "car coverage {:.3} below target {:.3} after {attempts} attempts",
            covered as f64 / (w * h) as f64,
            o.car_fraction
        ));
    }
    covered
}

fn render(
    recipe: &SceneRecipe,
    rng: &mut ChaCha8Rng,
    base: &Grid<ClassIndex>,
    occ: &Grid<ClassIndex>,
    tree_mask: &Grid<bool>,
) -> Result<SceneData> {
    let (w, h) = (recipe.width, recipe.height);
    let domain = SceneRecipe::domain();
    let app = &recipe.appearance;
    let base_app: Vec<ClassAppearance> = domain.classes(Layer::Base).iter().map(|c| app.classes[c]).collect();
    let occ_app: Vec<Option<ClassAppearance>> = domain
        .classes(Layer::Occlusion)
        .iter()
        .map(|c| (c != VOID).then(|| app.classes[c]))
        .collect();

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let phase: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let stripe_angle = rng.random_range(0.0..std::f64::consts::PI);
    let period = recipe.layout.stripe_period.max(1.0);

    // a per-object height offset keeps buildings and trees from sharing one exact height
    let mut building_height = Grid::filled(w, h, 0.0f64);
    let b = base_app[BUILDING as usize];
    label_components(base, BUILDING, |pixels| {
        let hgt = b.height + b.height_sigma * unit.sample(rng);
        for &(x, y) in pixels {
            *building_height.get_mut(x, y) = hgt.max(2.0);
        }
    });
    let t = occ_app[TREE as usize].expect("tree appearance");
    let mut tree_height = Grid::filled(w, h, 0.0f64);
    let dist_in = crate::features::filters::distance_transform(&tree_mask.map(|m| !m));
    let trees = Grid::from_fn(w, h, |x, y| *tree_mask.get(x, y) as ClassIndex);
    label_components(&trees, 1, |pixels| {
        let top = t.height + t.height_sigma * unit.sample(rng);
        for &(x, y) in pixels {
            let depth = (*dist_in.get(x, y) as f64).min(4.0) / 4.0;
            let rough = 1.0 + app.canopy_roughness * unit.sample(rng);
            let hgt = if rng.random_bool(app.canopy_gaps) {
                0.0
            } else {
                (top * (0.6 + 0.4 * depth) * rough).max(1.0)
            };
            *tree_height.get_mut(x, y) = hgt;
        }
    });

    let mut nir = Grid::filled(w, h, 0.0f32);
    let mut red = Grid::filled(w, h, 0.0f32);
    let mut green = Grid::filled(w, h, 0.0f32);
    let mut dsm = Grid::filled(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let bc = *base.get(x, y);
            let oc = *occ.get(x, y);
            let a = match occ_app[oc as usize] {
                Some(a) => a,
                None => base_app[bc as usize],
            };
            let mut shift = 0.0;
            if oc == 0 && bc == AGRICULTURE {
                let s = (x as f64) * stripe_angle.cos() + (y as f64) * stripe_angle.sin();
                shift = app.stripe_contrast * (std::f64::consts::TAU * s / period).sin();
            }
            let mut px = [0.0f32; 3];
            for (k, v) in px.iter_mut().enumerate() {
                let value = a.mean[k] + shift + a.sigma * unit.sample(rng);
                *v = value.round().clamp(0.0, 255.0) as f32;
            }
            *nir.get_mut(x, y) = px[0];
            *red.get_mut(x, y) = px[1];
            *green.get_mut(x, y) = px[2];

            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let terrain = app.terrain_amplitude
                * 0.5
                * ((std::f64::consts::TAU * fx + phase[0]).sin() * (std::f64::consts::PI * fy + phase[1]).cos()
                    + (std::f64::consts::PI * (fx + fy) + phase[2]).sin());
            let object = match oc {
                TREE => tree_height.get(x, y).max(*building_height.get(x, y)),
                CAR => a.height + a.height_sigma * unit.sample(rng),
                _ => *building_height.get(x, y),
            };
            let z = 100.0 + terrain + object + app.dsm_noise * unit.sample(rng);
            *dsm.get_mut(x, y) = z as f32;
        }
    }
    let mut data = SceneData::new(w, h, 1)?;
    data.add_channel("nir", nir)?;
    data.add_channel("red", red)?;
    data.add_channel("green", green)?;
    data.add_channel("dsm", dsm)?;
    Ok(data)
}

/// Calls `f` once per 4-connected component of `class`.
fn label_components(grid: &Grid<ClassIndex>, class: ClassIndex, mut f: impl FnMut(&[(usize, usize)])) {
    let (w, h) = (grid.width(), grid.height());
    let mut seen = Grid::filled(w, h, false);
    for y0 in 0..h {
        for x0 in 0..w {
            if *seen.get(x0, y0) || *grid.get(x0, y0) != class {
                continue;
            }
            let mut stack = vec![(x0, y0)];
            let mut comp = Vec::new();
            *seen.get_mut(x0, y0) = true;
            while let Some((x, y)) = stack.pop() {
                comp.push((x, y));
                let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                for (nx, ny) in nbrs {
                    if nx < w && ny < h && !*seen.get(nx, ny) && *grid.get(nx, ny) == class {
                        *seen.get_mut(nx, ny) = true;
                        stack.push((nx, ny));
                    }
                }
            }
            f(&comp);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub scenes: Vec<Scene>,
    pub reports: Vec<GenerationReport>,
    pub seeds: Vec<u64>,
    pub split: SplitPlan,
}

/// Minimum suite size keeping all three splits non-empty.
pub const MIN_SUITE: usize = 12;

/// `n` scenes with seeds drawn from `master_seed`, plus a split plan.
pub fn generate_suite(template: &SceneRecipe, n: usize, master_seed: u64, fractions: [f64; 3]) -> Result<Suite> {
    if n < MIN_SUITE {
        return Err(Error::config(format!("a suite needs at least {MIN_SUITE} scenes, got {n}")));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let generated = seeds
        .par_iter()
        .map(|&seed| generate(&SceneRecipe { seed, ..template.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = (0..n).map(|i| format!("scene_{i:03}")).collect();
    let split = SplitPlan::new(&ids, fractions, master_seed)?;
    let mut scenes = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    for (id, g) in ids.into_iter().zip(generated) {
        scenes.push(Scene {
            id,
            data: g.data,
            labels: Some(g.labels),
        });
        reports.push(g.report);
    }
    Ok(Suite {
        scenes,
        reports,
        seeds,
        split,
    })
}
