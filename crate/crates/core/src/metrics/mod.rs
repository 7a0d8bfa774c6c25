//! Scene decoding, composition/motion probes, and feature-space distances.

mod decode;
mod features;
mod probe;

pub use decode::{
    background, decode_scene, template_count, DecodedObject, SceneDecodeResult, MATCH_THRESHOLD, MAX_DECODED,
    TEMPLATE_HALF_SIZES,
};
pub use features::{
    diversity, diversity_of_features, extract_features, frechet_distance, projection, COV_SHRINKAGE,
    DEFAULT_PROJ_SEED, FEATURE_DIM,
};
pub use probe::{
    composition_of_frame, composition_score, motion_scores, PromptScores, ScoreReport, CATEGORIES, COLOR_RADIUS,
    GROWTH_RATIO, MAX_AREA_RATIO, MIN_DISPLACEMENT,
};
