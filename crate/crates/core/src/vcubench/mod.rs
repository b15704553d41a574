//! Synthetic visual-concept benchmark: parametric glyph identities rendered
//! into single and group scenes, with VQA-style probes.

mod benchmark;
pub mod ppm;
mod queries;
mod render;
mod roster;
mod scenes;

pub use benchmark::{build_benchmark, Benchmark, BenchmarkConfig, Category, Sample, Summary};
pub use queries::{
    default_query_templates, load_query_templates, make_queries, parse_query_templates,
    template_words, ProbeKind, QueryAnswer, QueryTemplate, DEFAULT_QUERY_TEMPLATES,
};
pub use render::{
    render_canonical, render_group, render_scene, render_single, Image, Placement, SceneSpec,
    CELLS, CELL_SIZE, CHANNELS, GRID, IMAGE_SIZE, PIXELS,
};
pub use roster::{make_roster, Appearance, IdentitySpec, Roster, HUE_NAMES, SHAPE_NAMES};
pub use scenes::{group_scene, single_scene, Split};
