//! Similarity-threshold pair mining and the on-disk dataset layout.
//!
//! Directory layout:
//!   sprites/{identity:04}_{pose:02}.png   8-bit RGBA
//!   pairs.manifest                        one pair per line, LF endings:
//!       <prompt path> <target path> <similarity:.6> window=<w> c=<c:.6>
//!   data_config.json                      the resolved generation config

use crate::data::blueprint::{extract_blueprint, is_empty_image, BlueprintParams};
use crate::data::embed::{embed, FeatureEmbedding};
use crate::data::sprites::{generate_sprites, Sprite};
use crate::error::{Error, Result};
use crate::imageio::{load_rgba_png, save_rgba_png};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub identities: usize,
    pub poses_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
    pub window: usize,
    pub c: f64,
    pub min_ink_fraction: f64,
    pub mine_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: 100,
            poses_per_identity: 8,
            resolution: 32,
            seed: 7,
            window: 9,
            c: 0.02,
            min_ink_fraction: 0.005,
            mine_threshold: 0.9,
        }
    }
}

impl DataConfig {
    pub fn blueprint_params(&self) -> BlueprintParams {
        BlueprintParams {
            window: self.window,
            c: self.c,
        }
    }
}

/// One self-supervised training triple: the prompt steers colors, the target
/// is the denoising objective, the blueprint is extracted from the target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub prompt: Tensor<f32>,
    pub target: Tensor<f32>,
    pub blueprint: Tensor<f32>,
    pub similarity: f32,
}

/// Index-level pair record: (prompt sprite, target sprite, similarity).
pub type PairIndex = (usize, usize, f32);

/// All ordered pairs (i, j), i != j, whose embedding cosine exceeds the
/// threshold. Sprites failing empty-image rejection never enter a pair.
/// Deterministic order: ascending (i, j).
pub fn mine_pairs(corpus: &[Sprite], cfg: &DataConfig) -> Result<Vec<PairIndex>> {
    if corpus.is_empty() {
        return Err(Error::config("cannot mine pairs from an empty corpus"));
    }
    let params = cfg.blueprint_params();
    let mut usable = vec![false; corpus.len()];
    let mut embeds: Vec<Option<FeatureEmbedding>> = vec![None; corpus.len()];
    for (i, s) in corpus.iter().enumerate() {
        if !is_empty_image(&s.image, cfg.min_ink_fraction, &params)? {
            usable[i] = true;
            embeds[i] = Some(embed(&s.image, &s.alpha)?);
        }
    }
    let mut pairs = Vec::new();
    for i in 0..corpus.len() {
        if !usable[i] {
            continue;
        }
        for j in 0..corpus.len() {
            if i == j || !usable[j] {
                continue;
            }
            let sim = embeds[i].as_ref().unwrap().cosine(embeds[j].as_ref().unwrap());
            if sim as f64 > cfg.mine_threshold {
                pairs.push((i, j, sim));
            }
        }
    }
    Ok(pairs)
}

/// In-memory dataset: sprites, per-sprite blueprints, mined pair indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub sprites: Vec<Sprite>,
    pub blueprints: Vec<Tensor<f32>>,
    pub pairs: Vec<PairIndex>,
}

impl Dataset {
    /// Generate, filter, and mine a corpus from scratch.
    pub fn build(config: DataConfig) -> Result<Dataset> {
        let sprites = generate_sprites(
            config.identities,
            config.poses_per_identity,
            config.resolution,
            config.seed,
        )?;
        Self::from_sprites(config, sprites)
    }

    pub fn from_sprites(config: DataConfig, sprites: Vec<Sprite>) -> Result<Dataset> {
        let pairs = mine_pairs(&sprites, &config)?;
        let blueprints = sprites
            .iter()
            .map(|s| extract_blueprint(&s.image, config.window, config.c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config,
            sprites,
            blueprints,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Materialize one pair as owned tensors.
    pub fn pair(&self, idx: usize) -> Result<TrainingPair> {
        let (pi, ti, sim) = *self
            .pairs
            .get(idx)
            .ok_or_else(|| Error::index(format!("pair {idx} of {}", self.pairs.len())))?;
        Ok(TrainingPair {
            prompt: self.sprites[pi].image.clone(),
            target: self.sprites[ti].image.clone(),
            blueprint: self.blueprints[ti].clone(),
            similarity: sim,
        })
    }

    pub fn sprite_file_name(identity: usize, pose: usize) -> String {
        format!("{identity:04}_{pose:02}.png")
    }

    /// Write sprites, manifest, and resolved config under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let sprites_dir = dir.join("sprites");
        std::fs::create_dir_all(&sprites_dir)?;
        for s in &self.sprites {
            let path = sprites_dir.join(Self::sprite_file_name(s.identity_id, s.pose_id));
            save_rgba_png(&path, &s.image, &s.alpha)?;
        }
        let mut manifest = String::new();
        for &(pi, ti, sim) in &self.pairs {
            let p = &self.sprites[pi];
            let t = &self.sprites[ti];
            writeln!(
                manifest,
                "sprites/{} sprites/{} {:.6} window={} c={:.6}",
                Self::sprite_file_name(p.identity_id, p.pose_id),
                Self::sprite_file_name(t.identity_id, t.pose_id),
                sim,
                self.config.window,
                self.config.c
            )
            .expect("manifest line");
        }
        std::fs::write(dir.join("pairs.manifest"), manifest)?;
        std::fs::write(
            dir.join("data_config.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    /// Load a saved dataset; blueprints are recomputed from the target images
    /// with the manifest's parameters (the round-trip is bit-exact because
    /// images live on the 8-bit grid).
    pub fn load(dir: &Path) -> Result<Dataset> {
        let config: DataConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("data_config.json"))?)?;
        let mut sprites = Vec::new();
        let mut index = std::collections::HashMap::new();
        for identity in 0..config.identities {
            for pose in 0..config.poses_per_identity {
                let rel = format!("sprites/{}", Self::sprite_file_name(identity, pose));
                let path = dir.join(&rel);
                let (image, alpha) = load_rgba_png(&path)?;
                index.insert(rel, sprites.len());
                sprites.push(Sprite {
                    image,
                    alpha,
                    identity_id: identity,
                    pose_id: pose,
                });
            }
        }
        let manifest = std::fs::read_to_string(dir.join("pairs.manifest"))?;
        let mut pairs = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::format(format!(
                    "pairs.manifest line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let pi = *index.get(fields[0]).ok_or_else(|| {
                Error::format(format!("pairs.manifest references unknown {}", fields[0]))
            })?;
            let ti = *index.get(fields[1]).ok_or_else(|| {
                Error::format(format!("pairs.manifest references unknown {}", fields[1]))
            })?;
            let sim: f32 = fields[2]
                .parse()
                .map_err(|_| Error::format(format!("bad similarity {}", fields[2])))?;
            let window: usize = fields[3]
                .strip_prefix("window=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("bad window field {}", fields[3])))?;
            let c: f64 = fields[4]
                .strip_prefix("c=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("bad c field {}", fields[4])))?;
            if window != config.window || (c - config.c).abs() > 1e-9 {
                return Err(Error::format(
                    "pairs.manifest blueprint params disagree with data_config.json",
                ));
            }
            pairs.push((pi, ti, sim));
        }
        let blueprints = sprites
            .iter()
            .map(|s| extract_blueprint(&s.image, config.window, config.c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config,
            sprites,
            blueprints,
            pairs,
        })
    }
}
