use rand::Rng;

use super::{Raster, TilingConfig, VisionError};
use crate::params::param_group;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Position of a patch: tile index, then row and column inside the tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchPos {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
}

/// Flattened patch vectors of a tiled image, tile after tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T> {
    /// `num_patches × patch_side²·channels`, pixel values scaled to [0, 1].
    pub patches: Tensor<T>,
    pub layout: Vec<PatchPos>,
    pub per_tile_counts: Vec<usize>,
    /// Patches per tile row.
    pub row_width: usize,
    pub grid: (usize, usize),
}

/// Encoder output `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    /// `num_patches × d`.
    pub features: Tensor<T>,
    pub per_tile_counts: Vec<usize>,
    pub layout: Vec<PatchPos>,
    pub row_width: usize,
}

impl<T: Real> PatchFeatures<T> {
    pub fn num_patches(&self) -> usize {
        self.features.rows()
    }

    /// Features with no spatial layout, treated as one tile with a single row.
    pub fn from_matrix(features: Tensor<T>) -> Self {
        let n = features.rows();
        PatchFeatures {
            layout: (0..n).map(|i| PatchPos { tile: 0, row: 0, col: i }).collect(),
            per_tile_counts: vec![n],
            row_width: n,
            features,
        }
    }
}

/// Splits a tile into `patch_side × patch_side` blocks in row-major order;
/// each block is flattened pixel by pixel with channels interleaved.
pub fn patchify<T: Real>(tile: &Raster, patch_side: usize) -> Result<Tensor<T>, VisionError> {
    if patch_side == 0 || tile.width % patch_side != 0 || tile.height % patch_side != 0 {
        return Err(VisionError::Config(format!(
            "{}x{} tile is not divisible into {patch_side}-pixel patches",
            tile.width, tile.height
        )));
    }
    let (px, py) = (tile.width / patch_side, tile.height / patch_side);
    let len = patch_side * patch_side * tile.channels;
    let scale = T::c(1.0 / 255.0);
    let mut data = Vec::with_capacity(px * py * len);
    for pr in 0..py {
        for pc in 0..px {
            for y in 0..patch_side {
                let start = ((pr * patch_side + y) * tile.width + pc * patch_side) * tile.channels;
                let row = &tile.data[start..start + patch_side * tile.channels];
                data.extend(row.iter().map(|&v| T::c(v as f64) * scale));
            }
        }
    }
    Ok(Tensor::new(vec![px * py, len], data)?)
}

/// Grid selection, tiling and patch extraction for one image.
pub fn image_to_patches<T: Real>(image: &Raster, cfg: &TilingConfig) -> Result<PatchBatch<T>, VisionError> {
    let grid = super::select_grid(image.width, image.height, cfg)?;
    let tiles = super::tile_image(image, grid, cfg)?;
    let side = cfg.patches_per_side();
    let mut parts = Vec::with_capacity(tiles.len());
    let mut layout = Vec::new();
    for (t, tile) in tiles.tiles.iter().enumerate() {
        parts.push(patchify::<T>(tile, cfg.patch_side)?);
        for i in 0..side * side {
            layout.push(PatchPos {
                tile: t,
                row: i / side,
                col: i % side,
            });
        }
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(PatchBatch {
        patches: Tensor::concat_rows(&refs)?,
        layout,
        per_tile_counts: vec![side * side; tiles.len()],
        row_width: side,
        grid,
    })
}

param_group! {
    /// Toy patch encoder: project, GELU, project, add a learned per-tile
    /// positional row. Weights use the `out × in` convention.
    pub struct EncoderParams / EncoderVars {
        /// `d_hidden × patch_len`
        w_in,
        /// `d × d_hidden`
        w_out,
        /// `patches_per_tile × d`
        pos,
    }
}

impl<T: Real> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(patch_len: usize, hidden: usize, d: usize, patches_per_tile: usize, rng: &mut R) -> Self {
        EncoderParams {
            w_in: Tensor::randn(&[hidden, patch_len], 1.0 / (patch_len as f64).sqrt(), rng),
            w_out: Tensor::randn(&[d, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            pos: Tensor::randn(&[patches_per_tile, d], 0.1, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.rows()
    }
}

/// Graph form of the encoder over `tiles` consecutive tiles of patches.
pub fn encode_graph<T: Real>(g: &mut Graph<T>, patches: Var, p: &EncoderVars, tiles: usize) -> Result<Var, TensorError> {
    let h = g.linear(patches, p.w_in)?;
    let h = g.gelu(h)?;
    let f = g.linear(h, p.w_out)?;
    let pos = if tiles == 1 {
        p.pos
    } else {
        g.concat_rows(&vec![p.pos; tiles])?
    };
    g.add(f, pos)
}

pub fn encode<T: Real>(batch: &PatchBatch<T>, params: &EncoderParams<T>) -> Result<PatchFeatures<T>, VisionError> {
    let expected = params.w_in.cols();
    if batch.patches.cols() != expected {
        return Err(VisionError::Config(format!(
            "patch length {} does not match encoder input {expected}",
            batch.patches.cols()
        )));
    }
    if batch.per_tile_counts.iter().any(|&n| n != params.pos.rows()) {
        return Err(VisionError::Config(format!(
            "positional table has {} rows but tiles hold {:?} patches",
            params.pos.rows(),
            batch.per_tile_counts
        )));
    }
    let mut g = Graph::no_grad();
    let vars = params.bind(&mut g, false);
    let x = g.constant(batch.patches.clone());
    let f = encode_graph(&mut g, x, &vars, batch.per_tile_counts.len())?;
    Ok(PatchFeatures {
        features: g.take(f),
        per_tile_counts: batch.per_tile_counts.clone(),
        layout: batch.layout.clone(),
        row_width: batch.row_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(side: usize, cell: usize) -> Raster {
        let mut r = Raster::blank(side, side, 1);
        for y in 0..side {
            for x in 0..side {
                r.set(x, y, 0, if (x / cell + y / cell) % 2 == 0 { 255 } else { 0 });
            }
        }
        r
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify::<f32>(&Raster::blank(28, 28, 1), 14).unwrap().rows(), 4);
        let p = patchify::<f32>(&Raster::blank(56, 56, 3), 14).unwrap();
        assert_eq!(p.shape(), &[16, 14 * 14 * 3]);
    }

    #[test]
    fn indivisible_tile_is_config_error() {
        assert!(matches!(
            patchify::<f32>(&Raster::blank(30, 28, 1), 14),
            Err(VisionError::Config(_))
        ));
    }

    #[test]
    fn constant_tile_gives_identical_patches() {
        let tile = Raster::new(56, 56, 1, vec![90; 56 * 56]).unwrap();
        let p = patchify::<f64>(&tile, 14).unwrap();
        for i in 1..p.rows() {
            assert_eq!(p.row(i), p.row(0));
        }
    }

    #[test]
    fn patches_are_row_major_blocks() {
        let tile = checker(28, 14);
        let p = patchify::<f64>(&tile, 14).unwrap();
        // top-left and bottom-right blocks are white, the other two black
        assert!(p.row(0).iter().all(|&v| v == 1.0));
        assert!(p.row(1).iter().all(|&v| v == 0.0));
        assert!(p.row(2).iter().all(|&v| v == 0.0));
        assert!(p.row(3).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_input_zero_positions_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = EncoderParams::<f64>::init(196, 32, 16, 16, &mut rng);
        params.pos = Tensor::zeros(&[16, 16]);
        let batch = image_to_patches::<f64>(&Raster::blank(56, 56, 1), &TilingConfig::default()).unwrap();
        let f = encode(&batch, &params).unwrap();
        assert!(f.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_tiles_swaps_feature_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = EncoderParams::<f64>::init(196, 32, 16, 16, &mut rng);
        let cfg = TilingConfig::default();
        let mut img = Raster::blank(112, 56, 1);
        img.paste(&checker(56, 7), 0, 0);
        let mut swapped = Raster::blank(112, 56, 1);
        swapped.paste(&checker(56, 7), 56, 0);
        let a = encode(&image_to_patches::<f64>(&img, &cfg).unwrap(), &params).unwrap();
        let b = encode(&image_to_patches::<f64>(&swapped, &cfg).unwrap(), &params).unwrap();
        assert_eq!(a.num_patches(), 32);
        for i in 0..16 {
            assert_eq!(a.features.row(i), b.features.row(i + 16));
            assert_eq!(a.features.row(i + 16), b.features.row(i));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = TilingConfig::default();
        let img = checker(100, 9);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let params = EncoderParams::<f32>::init(196, 32, 16, 16, &mut rng);
            encode(&image_to_patches::<f32>(&img, &cfg).unwrap(), &params).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |f: &PatchFeatures<f32>| f.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn input_length_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::<f64>::init(100, 8, 4, 16, &mut rng);
        let batch = image_to_patches::<f64>(&Raster::blank(56, 56, 1), &TilingConfig::default()).unwrap();
        assert!(encode(&batch, &params).is_err());
    }
}
