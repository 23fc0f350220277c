use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Raster, VisionError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tile_side: usize,
    pub patch_side: usize,
    pub max_tiles: usize,
    /// Candidate `(rows, cols)` grids.
    pub ratio_set: Vec<(usize, usize)>,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            tile_side: 56,
            patch_side: 14,
            max_tiles: 9,
            ratio_set: all_grids(9),
        }
    }
}

/// Every `(rows, cols)` with `rows * cols <= max_tiles`.
pub fn all_grids(max_tiles: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 1..=max_tiles {
        for c in 1..=max_tiles / r {
            out.push((r, c));
        }
    }
    out
}

impl TilingConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if self.patch_side == 0 || self.tile_side == 0 || self.tile_side % self.patch_side != 0 {
            return Err(VisionError::Config(format!(
                "tile side {} is not a multiple of patch side {}",
                self.tile_side, self.patch_side
            )));
        }
        if self.ratio_set.is_empty() {
            return Err(VisionError::Config("empty ratio set".into()));
        }
        if let Some(&(r, c)) = self
            .ratio_set
            .iter()
            .find(|&&(r, c)| r == 0 || c == 0 || r * c > self.max_tiles)
        {
            return Err(VisionError::Config(format!(
                "grid {r}x{c} violates the {}-tile limit",
                self.max_tiles
            )));
        }
        Ok(())
    }

    /// Patches along one side of a tile.
    pub fn patches_per_side(&self) -> usize {
        self.tile_side / self.patch_side
    }

    pub fn patches_per_tile(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }
}

/// Fraction of the grid canvas covered by the image after an
/// aspect-preserving fit, as an exact ratio `num / den`.
///
/// With image aspect `w/h` and grid aspect `cols/rows`, this is
/// `min(h·cols, w·rows) / max(h·cols, w·rows)`.
pub fn coverage(width: usize, height: usize, grid: (usize, usize)) -> (u128, u128) {
    let a = height as u128 * grid.1 as u128;
    let b = width as u128 * grid.0 as u128;
    (a.min(b), a.max(b))
}

fn cmp_coverage(x: (u128, u128), y: (u128, u128)) -> Ordering {
    (x.0 * y.1).cmp(&(y.0 * x.1))
}

/// Grid with the best coverage; ties go to fewer tiles, then to the more
/// square grid, then to fewer rows.
pub fn select_grid(width: usize, height: usize, cfg: &TilingConfig) -> Result<(usize, usize), VisionError> {
    if width == 0 || height == 0 {
        return Err(VisionError::Input(format!("zero-area image {width}x{height}")));
    }
    cfg.validate()?;
    let best = cfg
        .ratio_set
        .iter()
        .copied()
        .max_by(|&a, &b| {
            cmp_coverage(coverage(width, height, a), coverage(width, height, b))
                .then_with(|| (b.0 * b.1).cmp(&(a.0 * a.1)))
                .then_with(|| b.0.abs_diff(b.1).cmp(&a.0.abs_diff(a.1)))
                .then_with(|| b.0.cmp(&a.0))
        })
        .expect("validated non-empty");
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major tile order.
    pub tiles: Vec<Raster>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Stitches the tiles back into one canvas.
    pub fn reassemble(&self) -> Raster {
        let t = &self.tiles[0];
        let mut out = Raster::blank(self.cols * t.width, self.rows * t.height, t.channels);
        for (i, tile) in self.tiles.iter().enumerate() {
            out.paste(tile, (i % self.cols) * t.width, (i / self.cols) * t.height);
        }
        out
    }
}

/// Aspect-preserving bilinear resize into the `rows × cols` tile canvas,
/// anchored top-left with zero padding.
pub fn fit_to_canvas(image: &Raster, grid: (usize, usize), cfg: &TilingConfig) -> Result<Raster, VisionError> {
    if image.width == 0 || image.height == 0 {
        return Err(VisionError::Input(format!(
            "zero-area image {}x{}",
            image.width, image.height
        )));
    }
    let cw = grid.1 * cfg.tile_side;
    let ch = grid.0 * cfg.tile_side;
    let scale = (cw as f64 / image.width as f64).min(ch as f64 / image.height as f64);
    let nw = ((image.width as f64 * scale).round() as usize).clamp(1, cw);
    let nh = ((image.height as f64 * scale).round() as usize).clamp(1, ch);
    let resized = image.resize_bilinear(nw, nh);
    if nw == cw && nh == ch {
        return Ok(resized);
    }
    let mut canvas = Raster::blank(cw, ch, image.channels);
    canvas.paste(&resized, 0, 0);
    Ok(canvas)
}

pub fn tile_image(image: &Raster, grid: (usize, usize), cfg: &TilingConfig) -> Result<TileGrid, VisionError> {
    cfg.validate()?;
    if grid.0 * grid.1 > cfg.max_tiles || grid.0 == 0 || grid.1 == 0 {
        return Err(VisionError::Config(format!("grid {grid:?} exceeds {} tiles", cfg.max_tiles)));
    }
    let canvas = fit_to_canvas(image, grid, cfg)?;
    let s = cfg.tile_side;
    let tiles = (0..grid.0 * grid.1)
        .map(|i| canvas.crop((i % grid.1) * s, (i / grid.1) * s, s, s))
        .collect();
    Ok(TileGrid {
        rows: grid.0,
        cols: grid.1,
        tiles,
    })
}
