//! Token-selection overlays: one binary mask per allocation round and a
//! composite tinting each pixel by the level of its finest covering token.

use crate::config::ROUNDS;
use crate::error::Result;
use crate::geometry::{coarse_grid, finest_cover, TokenKey, TokenSet, NUM_LEVELS};
use crate::image::Image;
use crate::stage1::AllocationTrace;

/// Rebuilds the token set of `trace` and the parents split in each round.
pub fn replay(height: u32, width: u32, trace: &AllocationTrace) -> Result<(TokenSet, Vec<Vec<TokenKey>>)> {
    let mut set = coarse_grid(height, width)?;
    let mut parents = Vec::with_capacity(ROUNDS);
    for round in &trace.rounds {
        let frontier = set.frontier().to_vec();
        let chosen: Vec<TokenKey> = round.selected.iter().map(|&i| frontier[i]).collect();
        set.allocate(&chosen)?;
        parents.push(chosen);
    }
    Ok((set, parents))
}

/// Per-round masks: white over every pixel of a selected parent, black
/// elsewhere.
pub fn selection_masks(height: u32, width: u32, trace: &AllocationTrace) -> Result<Vec<Image>> {
    let (_, parents) = replay(height, width, trace)?;
    Ok(parents
        .iter()
        .map(|keys| {
            let mut img = Image::zeros(height, width);
            for k in keys {
                let r = k.rect();
                for y in r.y0..r.y0 + r.side {
                    for x in r.x0..r.x0 + r.side {
                        img.set_pixel(y, x, [1.0; 3]);
                    }
                }
            }
            img
        })
        .collect())
}

pub const LEVEL_TINT: [[f64; 3]; NUM_LEVELS] = [[0.1, 0.1, 0.6], [0.1, 0.6, 0.2], [0.9, 0.7, 0.1], [0.9, 0.1, 0.1]];

/// Half-blend of `image` with the tint of each pixel's covering level;
/// token borders are drawn black.
pub fn cover_composite(image: &Image, trace: &AllocationTrace) -> Result<Image> {
    let (set, _) = replay(image.height(), image.width(), trace)?;
    let cover = finest_cover(&set)?;
    let mut out = Image::zeros(image.height(), image.width());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let k = cover.pixel(y, x);
            let r = k.rect();
            let border = y == r.y0 || x == r.x0;
            let rgb = if border {
                [0.0; 3]
            } else {
                let (p, t) = (image.pixel(y, x), LEVEL_TINT[k.level.index()]);
                [0.5 * (p[0] + t[0]), 0.5 * (p[1] + t[1]), 0.5 * (p[2] + t[2])]
            };
            out.set_pixel(y, x, rgb);
        }
    }
    Ok(out)
}
