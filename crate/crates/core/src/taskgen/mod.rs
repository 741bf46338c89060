//! Procedural spatial-reasoning tasks with helper images and templated
//! reasoning chains.

mod dataset;
mod grid;
mod render;
mod sample;
mod thoughts;

pub(crate) use dataset::splitmix64;
pub use dataset::{
    build_dataset, dataset_file_name, level_schedule, meta_path, read_dataset, sample_seed, verify_disjoint, write_dataset,
    Dataset, DatasetMeta, Split, TRAJECTORIES_PER_SFT_SAMPLE,
};
pub use grid::{generate_map, plan_shortest, simulate, Action, GridMap, Outcome, Pos, Tile, MAX_SIZE, MIN_SIZE};
pub use render::{
    map_from_image, render_helper, render_map, HelperImage, HelperMode, CH_AGENT, CH_ARROW, CH_VISITED, PATCH_FEATURE_DIM,
};
pub use sample::{
    generate_jigsaw, generate_sample, jigsaw_parts, parse_plan, plan_answer, reason_base, JigsawParts, TaskKind,
    TrajectorySample, Variant, CH_MASKED, JIGSAW_FLIPS, JIGSAW_SIZE,
};
pub use thoughts::{boxed, synthesize_thoughts, TaskInstance};

#[cfg(test)]
mod tests;
