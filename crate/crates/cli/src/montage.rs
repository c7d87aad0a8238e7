use image::{imageops, RgbImage};

use crate::error::{CliError, CliResult};

pub type Tile = RgbImage;

/// Lays `rows` of equally sized tiles out on one canvas, row by row.
pub fn montage(rows: &[Vec<Tile>]) -> CliResult<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| CliError::Runtime("montage needs at least one tile".into()))?;
    let (w, h) = first.dimensions();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|t| t.dimensions() != (w, h))) {
        return Err(CliError::Runtime("montage tiles must form a full grid of equal sizes".into()));
    }
    let mut canvas = RgbImage::new(w * cols as u32, h * rows.len() as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            imageops::replace(&mut canvas, tile, (c as u32 * w) as i64, (r as u32 * h) as i64);
        }
    }
    Ok(canvas)
}
