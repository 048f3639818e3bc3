//! Gaze heatmaps: 64×64 spatial probability grids built from raw gaze
//! points, plus the 32/16 window averaging that aligns them with per-window
//! video features, and the binary heatmap cache format.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{Read, Write};

/// Heatmap grid resolution per side.
pub const GRID: usize = 64;
/// Total number of grid cells.
pub const CELLS: usize = GRID * GRID;

/// One raw gaze sample. Coordinates are fractions of the frame size;
/// `valid` is false on frames where the tracker lost the eye.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePoint {
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl GazePoint {
    pub fn check(&self) -> Result<()> {
        if self.valid && !(0.0..=1.0).contains(&self.x) {
            return Err(Error::InvalidArgument(format!("gaze x out of range: {}", self.x)));
        }
        if self.valid && !(0.0..=1.0).contains(&self.y) {
            return Err(Error::InvalidArgument(format!("gaze y out of range: {}", self.y)));
        }
        Ok(())
    }
}

/// Checks that frame indices strictly increase along a track.
pub fn validate_track(track: &[GazePoint]) -> Result<()> {
    for p in track {
        p.check()?;
    }
    for w in track.windows(2) {
        if w[1].frame_index <= w[0].frame_index {
            return Err(Error::InvalidArgument(format!(
                "track frame indices must strictly increase ({} then {})",
                w[0].frame_index, w[1].frame_index
            )));
        }
    }
    Ok(())
}

/// A nonnegative 64×64 grid; when `is_distribution` the entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeHeatmap {
    grid: Array2<f64>,
    is_distribution: bool,
}

impl GazeHeatmap {
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if grid.nrows() != GRID || grid.ncols() != GRID {
            return Err(Error::Shape(format!(
                "heatmap must be {GRID}x{GRID}, got {}x{}",
                grid.nrows(),
                grid.ncols()
            )));
        }
        if grid.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "heatmap entries must be finite and nonnegative".into(),
            ));
        }
        Ok(GazeHeatmap { grid, is_distribution: false })
    }

    /// Builds directly from a grid already normalized to a distribution.
    pub fn distribution(grid: Array2<f64>) -> Result<Self> {
        let mut h = GazeHeatmap::new(grid)?;
        let s = h.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::NotADistribution(format!("sums to {s}")));
        }
        h.is_distribution = true;
        Ok(h)
    }

    /// The uniform distribution: every cell 1/4096.
    pub fn uniform() -> Self {
        GazeHeatmap {
            grid: Array2::from_elem((GRID, GRID), 1.0 / CELLS as f64),
            is_distribution: true,
        }
    }

    /// All probability mass on one cell.
    pub fn delta(row: usize, col: usize) -> Self {
        let mut grid = Array2::zeros((GRID, GRID));
        grid[[row, col]] = 1.0;
        GazeHeatmap { grid, is_distribution: true }
    }

    pub fn is_distribution(&self) -> bool {
        self.is_distribution
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn sum(&self) -> f64 {
        self.grid.sum()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[[row, col]]
    }

    /// Cell with the largest value; ties resolve to the first in row-major
    /// scan order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..GRID {
            for c in 0..GRID {
                if self.grid[[r, c]] > best_v {
                    best_v = self.grid[[r, c]];
                    best = (r, c);
                }
            }
        }
        best
    }

    /// Rescales to sum one; an all-zero grid becomes the uniform
    /// distribution.
    pub fn normalized(&self) -> GazeHeatmap {
        let s = self.sum();
        if s <= 0.0 {
            return GazeHeatmap::uniform();
        }
        GazeHeatmap {
            grid: &self.grid / s,
            is_distribution: true,
        }
    }

    /// The complement distribution (1 - g) / sum(1 - g), attending outside
    /// the gaze region. For the uniform map this is the uniform map again.
    pub fn complement(&self) -> Result<GazeHeatmap> {
        if !self.is_distribution {
            return Err(Error::NotADistribution("complement needs a distribution".into()));
        }
        let inv = self.grid.mapv(|v| (1.0 - v).max(0.0));
        Ok(GazeHeatmap { grid: inv, is_distribution: false }.normalized())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.grid.iter().cloned().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != CELLS {
            return Err(Error::Shape(format!("expected {CELLS} cells, got {}", flat.len())));
        }
        let grid = Array2::from_shape_vec((GRID, GRID), flat.to_vec()).unwrap();
        let h = GazeHeatmap::new(grid)?;
        Ok(h.normalized())
    }
}

/// Renders the valid gaze points of one frame as a sum of isotropic
/// Gaussians of std `sigma` (in grid pixels) and normalizes the result to a
/// distribution. A point (x, y) in [0,1]^2 lands at grid coordinates
/// (y * 64, x * 64) with cells sampled at integer coordinates. Frames
/// without a valid point yield the uniform distribution.
pub fn build_gaze_heatmap(points: &[GazePoint], sigma: f64) -> Result<GazeHeatmap> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let valid: Vec<&GazePoint> = points.iter().filter(|p| p.valid).collect();
    if valid.is_empty() {
        return Ok(GazeHeatmap::uniform());
    }
    let mut grid = Array2::<f64>::zeros((GRID, GRID));
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for p in &valid {
        p.check()?;
        let cy = p.y * GRID as f64;
        let cx = p.x * GRID as f64;
        for r in 0..GRID {
            let dy = r as f64 - cy;
            for c in 0..GRID {
                let dx = c as f64 - cx;
                grid[[r, c]] += (-(dy * dy + dx * dx) * inv2s2).exp();
            }
        }
    }
    Ok(GazeHeatmap { grid, is_distribution: false }.normalized())
}

/// Averages per-frame heatmaps over sliding segments of `window` frames
/// with the given stride and renormalizes each mean. Output k covers frames
/// [k*stride, k*stride + window); there are floor((T - window)/stride) + 1
/// outputs. Fails when fewer than `window` frames are supplied — callers
/// pad short videos before windowing.
pub fn window_average_heatmaps(
    per_frame: &[GazeHeatmap],
    window: usize,
    stride: usize,
) -> Result<Vec<GazeHeatmap>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::InvalidArgument(format!(
            "need 0 < stride <= window, got window={window} stride={stride}"
        )));
    }
    let t = per_frame.len();
    if t < window {
        return Err(Error::InsufficientFrames { needed: window, got: t });
    }
    let count = (t - window) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut acc = Array2::<f64>::zeros((GRID, GRID));
        for f in &per_frame[k * stride..k * stride + window] {
            acc += f.grid();
        }
        acc /= window as f64;
        out.push(GazeHeatmap { grid: acc, is_distribution: false }.normalized());
    }
    Ok(out)
}

/// Number of windows produced for `frames` frames (after padding to at
/// least one window).
pub fn window_count(frames: usize, window: usize, stride: usize) -> usize {
    if frames < window {
        1
    } else {
        (frames - window) / stride + 1
    }
}

// ── heatmap cache file ──────────────────────────────────────────────────
//
// Sequence of per-video records, each: video id (u32 length + UTF-8),
// window count T (u32), then T row-major 64×64 grids as f32 LE.

pub fn write_heatmap_cache<W: Write>(
    mut w: W,
    records: &[(String, Vec<GazeHeatmap>)],
) -> Result<()> {
    for (id, maps) in records {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        w.write_u32::<LittleEndian>(maps.len() as u32)?;
        for m in maps {
            for v in m.grid().iter() {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_heatmap_cache<R: Read>(mut r: R) -> Result<Vec<(String, Vec<GazeHeatmap>)>> {
    let mut out = Vec::new();
    loop {
        let id_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)
            .map_err(|_| Error::CorruptFile("truncated heatmap cache id".into()))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::CorruptFile("heatmap cache id is not UTF-8".into()))?;
        let t = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::CorruptFile("truncated heatmap cache header".into()))?
            as usize;
        let mut maps = Vec::with_capacity(t);
        for _ in 0..t {
            let mut flat = vec![0.0f64; CELLS];
            for v in flat.iter_mut() {
                *v = r
                    .read_f32::<LittleEndian>()
                    .map_err(|_| Error::CorruptFile("truncated heatmap grid".into()))?
                    as f64;
            }
            maps.push(GazeHeatmap::from_flat(&flat)?);
        }
        out.push((id, maps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: f64, y: f64) -> GazePoint {
        GazePoint { frame_index: 0, x, y, valid: true }
    }

    #[test]
    fn centered_point_peaks_at_grid_center() {
        let h = build_gaze_heatmap(&[point(0.5, 0.5)], 2.0).unwrap();
        assert_eq!(h.argmax(), (32, 32));
        assert!((h.sum() - 1.0).abs() < 1e-12);
        assert!(h.is_distribution());
    }

    #[test]
    fn no_valid_points_gives_uniform() {
        let h = build_gaze_heatmap(&[], 2.0).unwrap();
        assert_eq!(h.get(0, 0), 1.0 / 4096.0);
        assert_eq!(h.get(63, 63), 1.0 / 4096.0);
        let dropped = GazePoint { frame_index: 3, x: 0.2, y: 0.2, valid: false };
        let h2 = build_gaze_heatmap(&[dropped], 2.0).unwrap();
        assert_eq!(h2, GazeHeatmap::uniform());
    }

    #[test]
    fn corner_point_truncated_gaussian_mass() {
        // independent oracle: evaluate the truncated Gaussian on the grid
        let sigma = 2.0f64;
        let mut total = 0.0;
        let mut near = 0.0;
        for r in 0..GRID {
            for c in 0..GRID {
                let d2 = (r * r + c * c) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                total += v;
                if d2 <= 25.0 {
                    near += v;
                }
            }
        }
        assert!(near / total >= 0.95, "oracle ratio {}", near / total);

        let h = build_gaze_heatmap(&[point(0.0, 0.0)], sigma).unwrap();
        assert_eq!(h.argmax(), (0, 0));
        let mut impl_near = 0.0;
        for r in 0..GRID {
            for c in 0..GRID {
                if r * r + c * c <= 25 {
                    impl_near += h.get(r, c);
                }
            }
        }
        assert!(impl_near >= 0.95);
        assert!((impl_near - near / total).abs() < 1e-9);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(build_gaze_heatmap(&[point(0.5, 0.5)], 0.0).is_err());
        assert!(build_gaze_heatmap(&[point(0.5, 0.5)], -1.0).is_err());
    }

    #[test]
    fn window_average_of_identical_maps_is_identity() {
        let h = build_gaze_heatmap(&[point(0.3, 0.7)], 3.0).unwrap();
        let frames = vec![h.clone(); 96];
        let out = window_average_heatmaps(&frames, 32, 16).unwrap();
        assert_eq!(out.len(), 5); // floor((96-32)/16) + 1
        for o in &out {
            for (a, b) in o.grid().iter().zip(h.grid().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_average_single_full_window() {
        let frames = vec![GazeHeatmap::uniform(); 32];
        let out = window_average_heatmaps(&frames, 32, 16).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn window_average_mixes_uniform_and_delta() {
        let mut frames = vec![GazeHeatmap::uniform(); 32];
        frames.extend(vec![GazeHeatmap::delta(10, 10); 16]);
        let out = window_average_heatmaps(&frames, 32, 16).unwrap();
        assert_eq!(out.len(), 2);
        // second window covers frames 16..48: 16 uniform + 16 delta
        let expected_bg = 0.5 / 4096.0;
        let got = &out[1];
        assert!((got.get(0, 0) - expected_bg).abs() < 1e-12);
        assert!((got.get(10, 10) - (0.5 + expected_bg)).abs() < 1e-12);
        assert!((got.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn window_average_rejects_short_sequences() {
        let frames = vec![GazeHeatmap::uniform(); 31];
        match window_average_heatmaps(&frames, 32, 16) {
            Err(Error::InsufficientFrames { needed: 32, got: 31 }) => {}
            other => panic!("expected InsufficientFrames, got {other:?}"),
        }
    }

    #[test]
    fn window_count_formula_over_random_lengths() {
        use rand::Rng;
        let mut r = crate::rng::substream(0, "window-count");
        for _ in 0..200 {
            let t = r.random_range(32..600usize);
            let frames = vec![GazeHeatmap::uniform(); t];
            let out = window_average_heatmaps(&frames, 32, 16).unwrap();
            assert_eq!(out.len(), (t - 32) / 16 + 1);
            assert_eq!(out.len(), window_count(t, 32, 16));
        }
    }

    #[test]
    fn complement_of_uniform_is_uniform() {
        let u = GazeHeatmap::uniform();
        let c = u.complement().unwrap();
        for (a, b) in c.grid().iter().zip(u.grid().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn complement_moves_mass_away_from_peak() {
        let d = GazeHeatmap::delta(5, 9);
        let c = d.complement().unwrap();
        assert!((c.sum() - 1.0).abs() < 1e-9);
        assert!(c.get(5, 9) < c.get(0, 0));
    }

    #[test]
    fn track_validation() {
        let good = vec![
            GazePoint { frame_index: 0, x: 0.1, y: 0.2, valid: true },
            GazePoint { frame_index: 2, x: 0.3, y: 0.4, valid: true },
        ];
        assert!(validate_track(&good).is_ok());
        let bad = vec![
            GazePoint { frame_index: 2, x: 0.1, y: 0.2, valid: true },
            GazePoint { frame_index: 2, x: 0.3, y: 0.4, valid: true },
        ];
        assert!(validate_track(&bad).is_err());
        let out_of_range = vec![GazePoint { frame_index: 0, x: 1.5, y: 0.0, valid: true }];
        assert!(validate_track(&out_of_range).is_err());
        // invalid points may carry junk coordinates
        let dropped = vec![GazePoint { frame_index: 0, x: -9.0, y: 2.0, valid: false }];
        assert!(validate_track(&dropped).is_ok());
    }

    #[test]
    fn heatmap_cache_round_trip() {
        let maps = vec![
            build_gaze_heatmap(&[point(0.25, 0.75)], 2.5).unwrap(),
            GazeHeatmap::uniform(),
        ];
        let records = vec![("vid_a".to_string(), maps), ("vid_b".to_string(), vec![])];
        let mut buf = Vec::new();
        write_heatmap_cache(&mut buf, &records).unwrap();
        let back = read_heatmap_cache(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "vid_a");
        assert_eq!(back[1].1.len(), 0);
        // values survive the f32 quantization up to f32 precision
        for (a, b) in back[0].1[0].grid().iter().zip(records[0].1[0].grid().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn heatmap_cache_truncation_is_detected() {
        let records = vec![("v".to_string(), vec![GazeHeatmap::uniform()])];
        let mut buf = Vec::new();
        write_heatmap_cache(&mut buf, &records).unwrap();
        buf.truncate(buf.len() - 7);
        assert!(matches!(read_heatmap_cache(&buf[..]), Err(Error::CorruptFile(_))));
    }
}
