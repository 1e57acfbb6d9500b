//! Geometry foundations: vectors, analytic signed-distance shapes, scene
//! parsing, procedural fixtures and supervision sampling.

mod presets;
mod sample;
mod scene;
mod sdf;
mod vec3;

pub use presets::{capsule_person_body, capsule_person_scene, capsule_person_variant, PersonParams};
pub use sample::{sample_batch, Provenance, SampleBatch};
pub use scene::{parse_scene, SceneDescription};
pub use sdf::AnalyticSdf;
pub use vec3::Vec3;
