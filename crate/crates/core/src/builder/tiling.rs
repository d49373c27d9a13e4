use serde::{Deserialize, Serialize};

/// Side length of one encoder tile, in pixels.
pub const TILE_SIZE: u32 = 384;
/// Largest number of local tiles per image.
pub const MAX_TILES: u32 = 9;

/// Tile grid for one image: `rows x cols` local tiles plus a global thumbnail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub rows: u32,
    pub cols: u32,
    pub tile_count: u32,
    pub includes_global_thumbnail: bool,
}

impl TilingPlan {
    /// Size of the canvas the image is resized to, as `(height, width)`.
    pub fn canvas(&self) -> (u32, u32) {
        (self.rows * TILE_SIZE, self.cols * TILE_SIZE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("image extent must be at least 1x1 (got {height}x{width})")]
pub struct InvalidExtent {
    pub height: u32,
    pub width: u32,
}

/// Picks the tile grid for an `height x width` image.
///
/// Starts from the smallest multiples of 384 covering each side. When that
/// needs more than nine tiles, the larger count is decremented (rows on a
/// tie) until the grid fits.
pub fn plan_tiling(height: u32, width: u32) -> Result<TilingPlan, InvalidExtent> {
    if height == 0 || width == 0 {
        return Err(InvalidExtent { height, width });
    }
    let mut rows = height.div_ceil(TILE_SIZE);
    let mut cols = width.div_ceil(TILE_SIZE);
    while rows * cols > MAX_TILES {
        if rows >= cols {
            rows -= 1;
        } else {
            cols -= 1;
        }
    }
    Ok(TilingPlan {
        rows,
        cols,
        tile_count: rows * cols,
        includes_global_thumbnail: true,
    })
}
