//! Self-supervised training-data construction: procedural sprite corpus,
//! blueprint extraction, empty-image rejection, similarity pair mining.

pub mod blueprint;
pub mod embed;
pub mod pairs;
pub mod sprites;

pub use blueprint::{dilate, extract_blueprint, ink_fraction, is_empty_image, BlueprintParams};
pub use embed::{embed, FeatureEmbedding, EMBED_DIM};
pub use pairs::{mine_pairs, DataConfig, Dataset, TrainingPair};
pub use sprites::{generate_sprites, Sprite};
