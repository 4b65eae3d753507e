//! Per-pixel spectral features.

use crate::error::{Error, Result};
use crate::grid::Grid;

use super::SceneData;

/// Mean of the non-infrared colour channels.
pub fn compute_intensity(scene: &SceneData) -> Result<Grid<f32>> {
    let channels: Vec<&Grid<f32>> = scene.visible_channels().map(|(_, g)| g).collect();
    if channels.is_empty() {
        return Err(Error::config(
            "intensity needs at least one non-infrared colour channel",
        ));
    }
    let n = channels.len() as f32;
    Ok(Grid::from_fn(scene.width(), scene.height(), |x, y| {
        channels.iter().map(|g| *g.get(x, y)).sum::<f32>() / n
    }))
}

/// HLS saturation of one pixel whose components lie in `[0, full_scale]`.
pub fn hls_saturation(components: &[f32], full_scale: f32) -> f32 {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &c in components {
        let c = (c / full_scale).clamp(0.0, 1.0);
        lo = lo.min(c);
        hi = hi.max(c);
    }
    let chroma = hi - lo;
    if chroma <= 0.0 {
        return 0.0;
    }
    let sum = hi + lo;
    if sum <= 1.0 {
        chroma / sum
    } else {
        chroma / (2.0 - sum)
    }
}

/// Saturation of the lightness/hue/saturation transform over all colour
/// channels (a colour-infrared image is transformed as it is displayed).
pub fn compute_saturation(scene: &SceneData) -> Result<Grid<f32>> {
    let channels: Vec<&Grid<f32>> = scene.color_channels().map(|(_, g)| g).collect();
    if channels.len() < 2 {
        return Err(Error::config("saturation needs at least two colour channels"));
    }
    let full = scene.value_range();
    let mut px = vec![0.0f32; channels.len()];
    Ok(Grid::from_fn(scene.width(), scene.height(), |x, y| {
        for (p, g) in px.iter_mut().zip(&channels) {
            *p = *g.get(x, y);
        }
        hls_saturation(&px, full)
    }))
}

/// (NIR − R)/(NIR + R), zero where both bands are zero.
pub fn compute_ndvi(scene: &SceneData) -> Result<Grid<f32>> {
    let nir = scene
        .channel(SceneData::NIR)
        .ok_or_else(|| Error::config("NDVI needs a `nir` channel"))?;
    let red = scene
        .channel(SceneData::RED)
        .ok_or_else(|| Error::config("NDVI needs a `red` channel"))?;
    Ok(Grid::from_fn(scene.width(), scene.height(), |x, y| {
        let (n, r) = (*nir.get(x, y) as f64, *red.get(x, y) as f64);
        if n + r == 0.0 {
            0.0
        } else {
            ((n - r) / (n + r)) as f32
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::filters::quantize;

    fn scene(channels: &[(&str, f32)]) -> SceneData {
        let mut s = SceneData::new(3, 2, 1).unwrap();
        for (name, v) in channels {
            s.add_channel(name, Grid::filled(3, 2, *v)).unwrap();
        }
        s
    }

    #[test]
    fn intensity_is_channel_mean() {
        let s = scene(&[("red", 100.0), ("green", 200.0)]);
        assert_eq!(*compute_intensity(&s).unwrap().get(1, 1), 150.0);
    }

    #[test]
    fn intensity_excludes_infrared() {
        let s = scene(&[("nir", 250.0), ("red", 90.0), ("green", 30.0), ("dsm", 500.0)]);
        assert_eq!(*compute_intensity(&s).unwrap().get(0, 0), 60.0);
        let only_nir = scene(&[("nir", 250.0)]);
        assert!(matches!(compute_intensity(&only_nir), Err(Error::Config(_))));
    }

    #[test]
    fn saturation_extremes() {
        assert_eq!(hls_saturation(&[80.0, 80.0, 80.0], 255.0), 0.0);
        assert_eq!(quantize(hls_saturation(&[255.0, 0.0, 0.0], 255.0), 0.0, 1.0), 255);
        let gray = scene(&[("red", 10.0)]);
        assert!(matches!(compute_saturation(&gray), Err(Error::Config(_))));
    }

    #[test]
    fn saturation_matches_reference_hls() {
        // colorsys.rgb_to_hls(r/255, g/255, b/255)[2]
        let cases: [([f32; 3], f64); 4] = [
            ([130.0, 128.0, 126.0], 0.015748031496062936),
            ([200.0, 100.0, 50.0], 0.6),
            ([20.0, 60.0, 40.0], 0.5),
            ([250.0, 240.0, 100.0], 0.9375),
        ];
        for (rgb, want) in cases {
            let got = hls_saturation(&rgb, 255.0) as f64;
            assert!((got - want).abs() < 1e-6, "{rgb:?}: {got} vs {want}");
        }
    }

    #[test]
    fn ndvi_examples() {
        let q = |n: f32, r: f32| {
            let s = scene(&[("nir", n), ("red", r)]);
            quantize(*compute_ndvi(&s).unwrap().get(0, 0), -1.0, 1.0)
        };
        assert_eq!(q(200.0, 100.0), 170);
        assert_eq!(q(120.0, 120.0), 128);
        assert_eq!(q(0.0, 0.0), 128);
        assert_eq!(q(255.0, 0.0), 255);
        assert!(compute_ndvi(&scene(&[("red", 1.0)])).is_err());
    }
}
