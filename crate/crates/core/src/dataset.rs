//! On-disk scene collections.
//!
//! ```text
//! <root>/manifest.toml
//! <root>/scenes/<id>/channels/<name>.png   8- or 16-bit grayscale
//! <root>/scenes/<id>/channels/dsm.grid     float grid, see `write_float_grid`
//! <root>/scenes/<id>/labels/base.png       8-bit class indices (optional)
//! <root>/scenes/<id>/labels/occlusion.png  8-bit class indices (optional)
//! ```

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb as ImgRgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SceneData;
use crate::grid::Grid;
use crate::labels::{ClassIndex, LabelDomain, Layer, Rgb, TwoLayerLabeling};

/// One scene: observed channels plus optional pixel-resolution reference labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub data: SceneData,
    pub labels: Option<TwoLayerLabeling>,
}

impl Scene {
    /// Reference labels at node resolution, read at each node's centre pixel.
    pub fn node_labels(&self) -> Option<TwoLayerLabeling> {
        let labels = self.labels.as_ref()?;
        let d = &self.data;
        let sample = |g: &Grid<ClassIndex>| {
            Grid::from_fn(d.node_width(), d.node_height(), |x, y| {
                let (px, py) = d.node_center(x, y);
                *g.get(px, py)
            })
        };
        Some(TwoLayerLabeling {
            base: sample(&labels.base),
            occlusion: sample(&labels.occlusion),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub tune: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Share of sites whose occlusion label is not `void`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub channels: Vec<String>,
    pub base_classes: Vec<String>,
    pub occlusion_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_palette: Option<Vec<[u8; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_palette: Option<Vec<[u8; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLists>,
    #[serde(default)]
    pub scenes: Vec<SceneInfo>,
}

impl DatasetManifest {
    pub fn for_domain(domain: &LabelDomain, channels: Vec<String>) -> Self {
        let pal = |l: Layer| Some(domain.palette(l).iter().map(|c| c.0).collect());
        DatasetManifest {
            channels,
            base_classes: domain.classes(Layer::Base).to_vec(),
            occlusion_classes: domain.classes(Layer::Occlusion).to_vec(),
            base_palette: pal(Layer::Base),
            occlusion_palette: pal(Layer::Occlusion),
            split: None,
            scenes: Vec::new(),
        }
    }

    pub fn domain(&self) -> Result<LabelDomain> {
        let mut d = LabelDomain::new(self.base_classes.clone(), self.occlusion_classes.clone())?;
        if let Some(p) = &self.base_palette {
            d = d.with_palette(Layer::Base, p.iter().map(|c| Rgb(*c)).collect())?;
        }
        if let Some(p) = &self.occlusion_palette {
            d = d.with_palette(Layer::Occlusion, p.iter().map(|c| Rgb(*c)).collect())?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub domain: LabelDomain,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

const GRID_MAGIC: &[u8; 4] = b"TFGR";
const GRID_VERSION: u32 = 1;

/// Magic `TFGR`, u32 version, u32 width, u32 height, then width·height
/// little-endian f32 values in row-major order.
pub fn encode_float_grid(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * grid.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_float_grid(bytes: &[u8]) -> std::result::Result<Grid<f32>, String> {
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err("not a float grid".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != GRID_VERSION as usize {
        return Err(format!("unsupported float grid version {}", u32_at(4)));
    }
    let (w, h) = (u32_at(8), u32_at(12));
    if bytes.len() != 16 + 4 * w * h {
        return Err(format!("float grid of {w}x{h} has {} bytes", bytes.len()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_vec(w, h, data).map_err(|e| e.to_string())
}

fn png_bytes<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        source: e,
    })?;
    Ok(buf.into_inner())
}

/// 8-bit grayscale PNG of values rounded and clamped into 0..=255.
pub fn gray_png(grid: &Grid<f32>) -> Result<Vec<u8>> {
    let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        Luma([grid.get(x as usize, y as usize).round().clamp(0.0, 255.0) as u8])
    });
    png_bytes(&img)
}

pub fn index_png(grid: &Grid<ClassIndex>) -> Result<Vec<u8>> {
    if grid.as_slice().iter().any(|&c| c > 255) {
        return Err(Error::domain("class index does not fit an 8-bit label map"));
    }
    let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        Luma([*grid.get(x as usize, y as usize) as u8])
    });
    png_bytes(&img)
}

pub fn color_png(grid: &Grid<ClassIndex>, palette: &[Rgb]) -> Result<Vec<u8>> {
    let img = ImageBuffer::<ImgRgb<u8>, Vec<u8>>::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let c = *grid.get(x as usize, y as usize) as usize;
        ImgRgb(palette.get(c).map_or([0, 0, 0], |p| p.0))
    });
    png_bytes(&img)
}

/// Reads a grayscale PNG; returns the values and the full-scale value (255 or 65535).
fn read_gray(path: &Path) -> Result<(Grid<f32>, f32)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok((Grid::from_vec(w, h, g.into_raw().into_iter().map(f32::from).collect())?, 255.0)),
        image::DynamicImage::ImageLuma16(g) => Ok((Grid::from_vec(w, h, g.into_raw().into_iter().map(f32::from).collect())?, 65535.0)),
        other => Err(Error::data(
            path.display().to_string(),
            format!("expected a grayscale image, found {:?}", other.color()),
        )),
    }
}

fn read_labels(path: &Path, scene: &str, n_classes: usize, layer: Layer) -> Result<Grid<ClassIndex>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let g = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::data(scene, format!("{layer} label map must be 8-bit grayscale, found {:?}", other.color())))
        }
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.into_raw();
    if let Some(&bad) = raw.iter().find(|&&v| v as usize >= n_classes) {
        return Err(Error::data(
            scene,
            format!("{layer} label value {bad} outside the {n_classes} classes"),
        ));
    }
    Grid::from_vec(w, h, raw.into_iter().map(ClassIndex::from).collect())
}

fn load_scene(dir: &Path, id: &str, manifest: &DatasetManifest, domain: &LabelDomain, site_size: usize) -> Result<Scene> {
    let mut grids = Vec::new();
    let mut full_scale: Option<f32> = None;
    for name in &manifest.channels {
        let grid = if name == SceneData::DSM {
            let path = dir.join("channels").join("dsm.grid");
            let bytes = fs::read(&path).map_err(|_| Error::data(id, format!("missing channel file {}", path.display())))?;
            decode_float_grid(&bytes).map_err(|m| Error::data(id, m))?
        } else {
            let path = dir.join("channels").join(format!("{name}.png"));
            if !path.exists() {
                return Err(Error::data(id, format!("missing channel file {}", path.display())));
            }
            let (g, scale) = read_gray(&path)?;
            if full_scale.is_some_and(|s| s != scale) {
                return Err(Error::data(id, "channels mix 8-bit and 16-bit images"));
            }
            full_scale = Some(scale);
            g
        };
        grids.push((name, grid));
    }
    let (w, h) = grids
        .first()
        .map(|(_, g)| (g.width(), g.height()))
        .ok_or_else(|| Error::config("manifest declares no channels"))?;
    let mut data = SceneData::new(w, h, site_size)?.with_value_range(full_scale.unwrap_or(255.0));
    for (name, g) in grids {
        if g.width() != w || g.height() != h {
            return Err(Error::data(id, format!("channel `{name}` is {}x{}, expected {w}x{h}", g.width(), g.height())));
        }
        data.add_channel(name, g)?;
    }
    let base_path = dir.join("labels").join("base.png");
    let occ_path = dir.join("labels").join("occlusion.png");
    let labels = match (base_path.exists(), occ_path.exists()) {
        (false, false) => None,
        (true, true) => {
            let base = read_labels(&base_path, id, domain.n_base(), Layer::Base)?;
            let occ = read_labels(&occ_path, id, domain.n_occlusion(), Layer::Occlusion)?;
            if base.width() != w || base.height() != h || !base.same_shape(&occ) {
                return Err(Error::data(id, "label maps and channels differ in size"));
            }
            Some(TwoLayerLabeling::new(base, occ)?)
        }
        _ => return Err(Error::data(id, "only one of the two label maps is present")),
    };
    Ok(Scene {
        id: id.to_string(),
        data,
        labels,
    })
}

/// Loads every scene directory under `<root>/scenes`, sorted by id.
pub fn load_dataset(root: &Path, site_size: usize) -> Result<Dataset> {
    let manifest_path = root.join("manifest.toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", manifest_path.display())))?;
    let domain = manifest.domain()?;
    let scenes_dir = root.join("scenes");
    let mut ids: Vec<String> = fs::read_dir(&scenes_dir)
        .map_err(|e| Error::io(&scenes_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    let scenes = ids
        .iter()
        .map(|id| load_scene(&scenes_dir.join(id), id, &manifest, &domain, site_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, domain, scenes })
}

/// Writes the manifest and every scene in the layout [`load_dataset`] reads.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    for scene in &dataset.scenes {
        let dir = root.join("scenes").join(&scene.id);
        for name in &dataset.manifest.channels {
            let grid = scene
                .data
                .channel(name)
                .ok_or_else(|| Error::data(&scene.id, format!("scene lacks channel `{name}`")))?;
            if name == SceneData::DSM {
                write_atomic(&dir.join("channels").join("dsm.grid"), &encode_float_grid(grid))?;
            } else {
                write_atomic(&dir.join("channels").join(format!("{name}.png")), &gray_png(grid)?)?;
            }
        }
        if let Some(labels) = &scene.labels {
            write_atomic(&dir.join("labels").join("base.png"), &index_png(&labels.base)?)?;
            write_atomic(&dir.join("labels").join("occlusion.png"), &index_png(&labels.occlusion)?)?;
        }
    }
    let text = toml::to_string(&dataset.manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&root.join("manifest.toml"), text.as_bytes())
}
