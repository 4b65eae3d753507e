//! Window filters over scalar grids. All windows clamp coordinates at the
//! image border (replicate padding).

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Offsets covered by a window of `size` pixels centered on a pixel.
/// Odd sizes are symmetric; even sizes extend one pixel further to the left/top.
#[inline]
pub(crate) fn window_offsets(size: usize) -> (isize, isize) {
    let lo = -((size / 2) as isize);
    (lo, lo + size as isize - 1)
}

fn box_sum_1d(src: &[f64], len: usize, stride: usize, size: usize, out: &mut [f64]) {
    let (lo, hi) = window_offsets(size);
    let at = |i: isize| src[(i.clamp(0, len as isize - 1) as usize) * stride];
    let mut acc: f64 = (lo..=hi).map(at).sum();
    out[0] = acc;
    for i in 1..len as isize {
        acc += at(i + hi) - at(i - 1 + lo);
        out[i as usize * stride] = acc;
    }
}

/// Mean over a `size`×`size` window.
pub fn box_mean(grid: &Grid<f32>, size: usize) -> Grid<f32> {
    assert!(size >= 1, "window must be at least one pixel");
    let (w, h) = (grid.width(), grid.height());
    if grid.is_empty() {
        return grid.clone();
    }
    let src: Vec<f64> = grid.as_slice().iter().map(|&v| v as f64).collect();
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        box_sum_1d(&src[y * w..], w, 1, size, &mut rows[y * w..]);
    }
    let mut cols = vec![0.0; w * h];
    for x in 0..w {
        box_sum_1d(&rows[x..], h, w, size, &mut cols[x..]);
    }
    let norm = (size * size) as f64;
    let data = cols.into_iter().map(|s| (s / norm) as f32).collect();
    Grid::from_vec(w, h, data).expect("shape preserved")
}

/// Sample variance (n − 1 denominator) over an odd `window`×`window` neighbourhood.
pub fn local_variance(grid: &Grid<f32>, window: usize) -> Result<Grid<f32>> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "variance window must be odd and at least 3, got {window}"
        )));
    }
    if window > grid.width() || window > grid.height() {
        return Err(Error::config(format!(
            "variance window {window} exceeds the {}x{} image",
            grid.width(),
            grid.height()
        )));
    }
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut buf = Vec::with_capacity(window * window);
    Ok(Grid::from_fn(grid.width(), grid.height(), |x, y| {
        buf.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                buf.push(*grid.get_clamped(x as isize + dx, y as isize + dy) as f64);
            }
        }
        let mean = buf.iter().sum::<f64>() / n;
        let ss: f64 = buf.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)) as f32
    }))
}

/// Central-difference derivatives, one-sided at the border.
pub fn gradient(grid: &Grid<f32>) -> (Grid<f32>, Grid<f32>) {
    let (w, h) = (grid.width(), grid.height());
    let diff = |a: f32, b: f32, span: usize| if span == 0 { 0.0 } else { (a - b) / span as f32 };
    let gx = Grid::from_fn(w, h, |x, y| {
        let l = x.saturating_sub(1);
        let r = (x + 1).min(w - 1);
        diff(*grid.get(r, y), *grid.get(l, y), r - l)
    });
    let gy = Grid::from_fn(w, h, |x, y| {
        let t = y.saturating_sub(1);
        let b = (y + 1).min(h - 1);
        diff(*grid.get(x, b), *grid.get(x, t), b - t)
    });
    (gx, gy)
}

pub fn gradient_magnitude(grid: &Grid<f32>) -> Grid<f32> {
    let (gx, gy) = gradient(grid);
    Grid::from_fn(grid.width(), grid.height(), |x, y| {
        let (a, b) = (*gx.get(x, y), *gy.get(x, y));
        (a * a + b * b).sqrt()
    })
}

fn extremum_1d(grid: &Grid<f32>, size: usize, horizontal: bool, take_min: bool) -> Grid<f32> {
    let (lo, hi) = window_offsets(size);
    Grid::from_fn(grid.width(), grid.height(), |x, y| {
        let mut best = if take_min { f32::INFINITY } else { f32::NEG_INFINITY };
        for d in lo..=hi {
            let v = if horizontal {
                *grid.get_clamped(x as isize + d, y as isize)
            } else {
                *grid.get_clamped(x as isize, y as isize + d)
            };
            best = if take_min { best.min(v) } else { best.max(v) };
        }
        best
    })
}

/// Grey-scale erosion with a `size`×`size` square structuring element.
pub fn erode(grid: &Grid<f32>, size: usize) -> Grid<f32> {
    extremum_1d(&extremum_1d(grid, size, true, true), size, false, true)
}

/// Grey-scale dilation with a `size`×`size` square structuring element.
pub fn dilate(grid: &Grid<f32>, size: usize) -> Grid<f32> {
    extremum_1d(&extremum_1d(grid, size, true, false), size, false, false)
}

pub fn opening(grid: &Grid<f32>, size: usize) -> Grid<f32> {
    dilate(&erode(grid, size), size)
}

/// Median over a `size`×`size` window (upper median for even counts).
pub fn median_filter(grid: &Grid<f32>, size: usize) -> Grid<f32> {
    let (lo, hi) = window_offsets(size);
    let mut buf = Vec::with_capacity(size * size);
    Grid::from_fn(grid.width(), grid.height(), |x, y| {
        buf.clear();
        for dy in lo..=hi {
            for dx in lo..=hi {
                buf.push(*grid.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let mid = buf.len() / 2;
        *buf.select_nth_unstable_by(mid, f32::total_cmp).1
    })
}

/// Stand-in for "no feature pixel" that keeps the parabola arithmetic finite.
const FAR: f64 = 1e12;

/// Squared distances of the lower envelope of parabolas rooted at `f`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel of `mask`.
/// Returns `f32::MAX` everywhere when the mask is empty.
pub fn distance_transform(mask: &Grid<bool>) -> Grid<f32> {
    let (w, h) = (mask.width(), mask.height());
    if !mask.as_slice().iter().any(|&m| m) {
        return Grid::filled(w, h, f32::MAX);
    }
    let n = w.max(h);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut f = vec![0.0f64; n];
    let mut out = vec![0.0f64; n];
    let mut sq = vec![FAR; w * h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if *mask.get(x, y) { 0.0 } else { FAR };
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    let data = sq.into_iter().map(|d| d.sqrt() as f32).collect();
    Grid::from_vec(w, h, data).expect("shape preserved")
}

/// Linear map of `[lo, hi]` onto `[0, 255]`, rounded half-up and saturated.
#[inline]
pub fn quantize(value: f32, lo: f32, hi: f32) -> u8 {
    if value.is_nan() || hi <= lo {
        return 0;
    }
    let t = (value as f64 - lo as f64) / (hi as f64 - lo as f64) * 255.0;
    (t + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Value at quantile `q` ∈ [0,1] (nearest-rank on the sorted values).
pub fn quantile(values: &mut [f32], q: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let rank = ((values.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    *values.select_nth_unstable_by(rank, f32::total_cmp).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_variance(g: &Grid<f32>, x: usize, y: usize, win: usize) -> f64 {
        let r = (win / 2) as isize;
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                vals.push(*g.get_clamped(x as isize + dx, y as isize + dy) as f64);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let g = Grid::filled(9, 8, 42.0f32);
        let v = local_variance(&g, 7).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn variance_checkerboard_interior() {
        let g = Grid::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0.0 } else { 255.0 });
        let v = local_variance(&g, 3).unwrap();
        // windows holding five zeros and four 255s, or the reverse: both give
        // mean deviation sum 5·4/9·255², over n − 1 = 8
        let expected = 20.0 / 9.0 * 255.0 * 255.0 / 8.0;
        for y in 1..7 {
            for x in 1..7 {
                assert!((*v.get(x, y) as f64 - expected).abs() < 1e-2);
                assert!((*v.get(x, y) as f64 - brute_variance(&g, x, y, 3)).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn variance_peaks_on_impulse() {
        let mut g = Grid::filled(11, 11, 0.0f32);
        *g.get_mut(5, 5) = 100.0;
        let v = local_variance(&g, 3).unwrap();
        // one 100 among nine: (100² − 100²/9)/8
        let expected = (10000.0 - 10000.0 / 9.0) / 8.0;
        for y in 4..7 {
            for x in 4..7 {
                assert!((*v.get(x, y) as f64 - expected).abs() < 1e-3);
            }
        }
        assert_eq!(*v.get(0, 0), 0.0);
    }

    #[test]
    fn variance_window_errors() {
        let g = Grid::filled(5, 5, 0.0f32);
        assert!(local_variance(&g, 4).is_err());
        assert!(local_variance(&g, 1).is_err());
        assert!(local_variance(&g, 7).is_err());
    }

    #[test]
    fn box_mean_impulse_and_constant() {
        let mut g = Grid::filled(101, 101, 0.0f32);
        *g.get_mut(50, 50) = 2025.0;
        let m = box_mean(&g, 45);
        assert!((*m.get(50, 50) - 1.0).abs() < 1e-5);
        let c = box_mean(&Grid::filled(20, 10, 7.5f32), 91);
        assert!(c.as_slice().iter().all(|&v| (v - 7.5).abs() < 1e-5));
    }

    #[test]
    fn box_mean_matches_brute_force_with_even_window() {
        let g = Grid::from_fn(13, 9, |x, y| ((x * 7 + y * 13) % 17) as f32);
        for size in [1usize, 2, 3, 4, 10] {
            let m = box_mean(&g, size);
            let (lo, hi) = window_offsets(size);
            for y in 0..9 {
                for x in 0..13 {
                    let mut s = 0.0f64;
                    for dy in lo..=hi {
                        for dx in lo..=hi {
                            s += *g.get_clamped(x as isize + dx, y as isize + dy) as f64;
                        }
                    }
                    let want = s / (size * size) as f64;
                    assert!((*m.get(x, y) as f64 - want).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn gradient_of_plane_and_step() {
        let plane = Grid::from_fn(10, 10, |x, y| 0.3 * x as f32 + 0.4 * y as f32);
        let mag = gradient_magnitude(&plane);
        for y in 1..9 {
            for x in 1..9 {
                assert!((mag.get(x, y) - 0.5).abs() < 1e-5);
            }
        }
        let step = Grid::from_fn(10, 3, |x, _| if x < 5 { 0.0 } else { 4.0 });
        let mag = gradient_magnitude(&step);
        assert_eq!(*mag.get(4, 1), 2.0);
        assert_eq!(*mag.get(5, 1), 2.0);
        assert_eq!(*mag.get(2, 1), 0.0);
    }

    #[test]
    fn opening_removes_small_plateau() {
        let mut g = Grid::filled(20, 20, 0.0f32);
        for y in 8..12 {
            for x in 8..12 {
                *g.get_mut(x, y) = 5.0;
            }
        }
        let o = opening(&g, 7);
        assert!(o.as_slice().iter().all(|&v| v == 0.0));
        let big = opening(&g, 3);
        assert_eq!(big, g);
    }

    #[test]
    fn median_of_impulse_noise() {
        let mut g = Grid::filled(9, 9, 1.0f32);
        *g.get_mut(4, 4) = 100.0;
        let m = median_filter(&g, 3);
        assert!(m.as_slice().iter().all(|&v| v == 1.0));
    }

    fn brute_edt(mask: &Grid<bool>) -> Grid<f32> {
        Grid::from_fn(mask.width(), mask.height(), |x, y| {
            let mut best = f64::INFINITY;
            for yy in 0..mask.height() {
                for xx in 0..mask.width() {
                    if *mask.get(xx, yy) {
                        let d = ((x as f64 - xx as f64).powi(2) + (y as f64 - yy as f64).powi(2)).sqrt();
                        best = best.min(d);
                    }
                }
            }
            best as f32
        })
    }

    #[test]
    fn edt_matches_brute_force() {
        let mask = Grid::from_fn(17, 11, |x, y| (x * 31 + y * 17) % 23 == 0);
        let fast = distance_transform(&mask);
        let slow = brute_edt(&mask);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn edt_line_and_empty() {
        let mask = Grid::from_fn(10, 5, |x, _| x == 2);
        let d = distance_transform(&mask);
        assert_eq!(*d.get(2, 3), 0.0);
        assert_eq!(*d.get(5, 3), 3.0);
        let none = distance_transform(&Grid::filled(4, 4, false));
        assert!(none.as_slice().iter().all(|&v| v == f32::MAX));
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0, -1.0, 1.0), 128);
        assert_eq!(quantize(1.0 / 3.0, -1.0, 1.0), 170);
        assert_eq!(quantize(1.0, -1.0, 1.0), 255);
        assert_eq!(quantize(5.0, 0.0, 1.0), 255);
        assert_eq!(quantize(-5.0, 0.0, 1.0), 0);
        assert_eq!(quantize(f32::MAX, 0.0, 64.0), 255);
    }
}
