use crate::error::{Error, Result};
use crate::model::PatchGrid;
use crate::taskgen::{simulate, Action, GridMap, Outcome, Tile};

pub const PATCH_FEATURE_DIM: usize = 10;
pub const CH_AGENT: usize = 4;
pub const CH_ARROW: usize = 5;
pub const CH_VISITED: usize = 9;

/// A helper image is a symbolic grid of patch features: tile one-hot (4),
/// agent-here (1), outgoing-arrow Up/Down/Left/Right (4), visited (1).
pub type HelperImage = PatchGrid;

pub enum HelperMode<'a> {
    /// Agent after `prefix_len` executed moves of `actions`.
    Reason { actions: &'a [Action], prefix_len: usize },
    /// Arrows along a plan that reaches the goal.
    Plan { path: &'a [Action] },
}

fn tiles(map: &GridMap) -> HelperImage {
    let mut img = PatchGrid::zeros(map.size, map.size, PATCH_FEATURE_DIM);
    for r in 0..map.size {
        for c in 0..map.size {
            img.cell_mut(r, c)[map.tile((r, c)).channel()] = 1.0;
        }
    }
    img
}

/// The question image: tiles plus the agent on the start cell.
pub fn render_map(map: &GridMap) -> HelperImage {
    let mut img = tiles(map);
    let s = map.start();
    img.cell_mut(s.0, s.1)[CH_AGENT] = 1.0;
    img
}

pub fn render_helper(map: &GridMap, mode: HelperMode<'_>) -> Result<HelperImage> {
    let mut img = tiles(map);
    match mode {
        HelperMode::Reason { actions, prefix_len } => {
            let (_, trace) = simulate(map, actions);
            if prefix_len >= trace.len() {
                return Err(Error::Invalid(format!("prefix_len {prefix_len} exceeds {} executed moves", trace.len() - 1)));
            }
            let here = trace[prefix_len];
            for &p in &trace[..prefix_len] {
                if p != here {
                    img.cell_mut(p.0, p.1)[CH_VISITED] = 1.0;
                }
            }
            img.cell_mut(here.0, here.1)[CH_AGENT] = 1.0;
        }
        HelperMode::Plan { path } => {
            let (outcome, trace) = simulate(map, path);
            if outcome != Outcome::Success || trace.len() != path.len() + 1 {
                return Err(Error::Invalid("plan does not reach the goal".into()));
            }
            for (i, &a) in path.iter().enumerate() {
                let p = trace[i];
                let cell = img.cell_mut(p.0, p.1);
                cell[CH_ARROW..CH_ARROW + 4].iter_mut().for_each(|x| *x = 0.0);
                cell[CH_ARROW + a as usize] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Recovers the map from the tile channels of a rendered image.
pub fn map_from_image(img: &HelperImage) -> Result<GridMap> {
    if img.rows != img.cols || img.dim != PATCH_FEATURE_DIM {
        return Err(Error::Invalid(format!("not a map image: {}x{}x{}", img.rows, img.cols, img.dim)));
    }
    let mut codes = Vec::with_capacity(img.rows);
    for r in 0..img.rows {
        let row: Vec<i8> = (0..img.cols)
            .map(|c| {
                let cell = img.cell(r, c);
                match Tile::ALL.iter().position(|t| cell[t.channel()] == 1.0) {
                    Some(0) => 1,
                    Some(2) => -1,
                    Some(3) => 2,
                    _ => 0,
                }
            })
            .collect();
        codes.push(row);
    }
    let refs: Vec<&[i8]> = codes.iter().map(Vec::as_slice).collect();
    GridMap::from_codes(&refs)
}
