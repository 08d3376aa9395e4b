//! Token-retention images in binary PPM (P6).
//!
//! Each view becomes an `N*cell` by `N*cell` image with 8-bit RGB samples and
//! maxval 255. Patch `p` covers the `cell`×`cell` block at row `p / N`,
//! column `p % N`. Retained patches take their class colour; pruned patches
//! take every channel of that colour divided by 4 (integer division).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layout::TokenSet;
use crate::sim::{Episode, PatchClass};

pub const DEFAULT_CELL: usize = 8;

pub fn class_color(class: PatchClass) -> [u8; 3] {
    match class {
        PatchClass::Table => [200, 200, 200],
        PatchClass::Object => [220, 60, 40],
        PatchClass::Goal => [40, 170, 60],
        PatchClass::Gripper => [240, 200, 40],
        PatchClass::Arm => [60, 90, 220],
    }
}

pub fn dim(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| v / 4)
}

/// Encodes one view as a P6 image.
pub fn render_view(classes: &[PatchClass], retained: &[bool], n: usize, cell: usize) -> Result<Vec<u8>> {
    if classes.len() != n * n || retained.len() != n * n || cell == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} classes and {} flags for a {n}x{n} grid (cell {cell})",
            classes.len(),
            retained.len()
        )));
    }
    let side = n * cell;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let p = (y / cell) * n + x / cell;
            let c = class_color(classes[p]);
            out.extend(if retained[p] { c } else { dim(c) });
        }
    }
    Ok(out)
}

/// Writes `step{step:04}_{view}.ppm` for every view and returns the paths.
pub fn render_retention(episode: &Episode, step: usize, retained: &TokenSet, dir: &Path, cell: usize) -> Result<Vec<PathBuf>> {
    let st = episode
        .steps
        .get(step)
        .ok_or(Error::IndexOutOfRange { index: step, len: episode.len() })?;
    fs::create_dir_all(dir)?;
    let n = episode.scene.grid;
    let mut paths = Vec::new();
    for vr in episode.layout.view_ranges() {
        let flags: Vec<bool> = (vr.start..vr.end).map(|i| retained.contains(&i)).collect();
        let bytes = render_view(&st.truth.labels[&vr.view].classes, &flags, n, cell)?;
        let path = dir.join(format!("step{step:04}_{}.ppm", vr.view.name()));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
