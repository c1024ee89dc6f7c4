//! Seeded synthetic catalogs for tests, demos and smoke runs.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Interaction, Item};
use crate::config::{MockKind, RunConfig};
use crate::error::Result;
use crate::io::{derive_seed, write_atomic, write_jsonl};

const TOPICS: [&str; 16] = [
    "mystery", "comedy", "science", "history", "travel", "cooking", "fitness", "fantasy",
    "romance", "music", "gardening", "technology", "sports", "animation", "wildlife", "design",
];

const TRAITS: [&str; 16] = [
    "colorful", "thoughtful", "energetic", "relaxing", "detailed", "lighthearted", "dramatic",
    "practical", "surprising", "classic", "experimental", "cozy", "ambitious", "quirky",
    "polished", "heartfelt",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub with_images: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 20,
            items: 40,
            min_len: 6,
            max_len: 10,
            seed: 7,
            with_images: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    /// PNG bytes per item, in item order; empty without images.
    pub images: Vec<Vec<u8>>,
}

/// A solid-color `size x size` PNG whose color depends on `seed`.
pub fn png_bytes(seed: u64, size: u32) -> Vec<u8> {
    let color = seed.to_le_bytes();
    let img = image::RgbImage::from_pixel(size, size, image::Rgb([color[0], color[1], color[2]]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("encoding an in-memory png cannot fail");
    out.into_inner()
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len && spec.max_len <= spec.items);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["synthetic"]));

    let mut items = Vec::with_capacity(spec.items);
    let mut images = Vec::new();
    for i in 0..spec.items {
        let topic = TOPICS[rng.random_range(0..TOPICS.len())];
        let a = TRAITS[rng.random_range(0..TRAITS.len())];
        let b = TRAITS[rng.random_range(0..TRAITS.len())];
        let item_id = format!("i{i:04}");
        let description = format!(
            "A {a} {topic} title, number {i}, with a {b} tone. Fans of {topic} will find \
             plenty here, from the opening to the finale."
        );
        let mut item = Item::new(&item_id, description);
        if spec.with_images {
            item = item.with_image(format!("images/{item_id}.png"));
            images.push(png_bytes(derive_seed(spec.seed, &["image", &item_id]), 8));
        }
        items.push(item);
    }

    let mut interactions = Vec::new();
    for u in 0..spec.users {
        let user_id = format!("u{u:04}");
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let picks = rand::seq::index::sample(&mut rng, spec.items, len);
        let start = 1_600_000_000 + u as i64 * 17;
        for (pos, idx) in picks.into_iter().enumerate() {
            interactions.push(Interaction::new(&user_id, &items[idx].item_id, start + pos as i64 * 3600));
        }
    }

    SyntheticData { items, interactions, images }
}

/// Writes `interactions.jsonl`, `items.jsonl` and `images/` under `dir` and
/// returns the two file paths. Image references stay relative to `dir`.
pub fn write(data: &SyntheticData, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let interactions = dir.join("interactions.jsonl");
    let items = dir.join("items.jsonl");
    write_jsonl(&interactions, &data.interactions)?;
    write_jsonl(&items, &data.items)?;
    for (item, bytes) in data.items.iter().zip(&data.images) {
        if let Some(image_ref) = &item.image_ref {
            write_atomic(&dir.join(image_ref), bytes)?;
        }
    }
    Ok((interactions, items))
}

/// Writes a synthetic catalog under `dir/data` and returns a mock-backed
/// config whose outputs and cache live under `dir`. Frequency filtering is
/// disabled so every generated user survives.
pub fn fixture_config(dir: &Path, spec: &SyntheticSpec, behavior: MockKind) -> Result<RunConfig> {
    let data = generate(spec);
    let (interactions, items) = write(&data, &dir.join("data"))?;
    let mut config = RunConfig::default();
    config.data.interactions = interactions;
    config.data.items = items;
    config.data.out_dir = dir.join("out");
    config.data.min_user_interactions = 1;
    config.data.min_item_interactions = 1;
    config.gateway.cache_dir = dir.join("cache");
    config.mock.enabled = true;
    config.mock.behavior = behavior;
    Ok(config)
}
