//! Procedural identity dataset.
//!
//! Each identity is a colored shape on a colored background at an offset
//! position. Attributes are a pure function of `(identity_id, seed)` and each
//! sample adds small seeded jitter. Pixels are quantized to multiples of
//! 1/255 so PNG copies on disk decode to the exact training values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ImageShape, ImageTensor};
use crate::seed;
use crate::vocab::Vocabulary;

/// The single question asked of every image.
pub const PROMPT: &str = "Who is in the image ?";

const FIRST: [&str; 6] = ["Ada", "Bram", "Cleo", "Dov", "Edda", "Finn"];
const MIDDLE: [&str; 4] = ["Jo", "Kai", "Lu", "Mae"];
const LAST: [&str; 6] = ["Orr", "Pike", "Quill", "Rook", "Sable", "Thorn"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    const ALL: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityAttributes {
    pub shape: ShapeKind,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    /// Offset of the shape center from the image center, in pixels.
    pub offset: (f64, f64),
    /// Shape radius in pixels.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentitySpec {
    pub identity_id: u32,
    pub attributes: IdentityAttributes,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Private,
    Public,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Private => "private",
            Split::Public => "public",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub identity_id: u32,
    pub index: u32,
    pub split: Split,
    pub image: ImageTensor,
    pub answer: String,
}

impl Sample {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from("images")
            .join(self.split.as_str())
            .join(format!("{:04}_{:03}.png", self.identity_id, self.index))
    }
}

/// Manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub prompt: String,
    pub answer: String,
    pub identity: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub per_identity: usize,
    pub public_identities: usize,
    pub public_per_identity: usize,
    pub seed: u64,
    pub shape: ImageShape,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_identities: 16,
            per_identity: 32,
            public_identities: 600,
            public_per_identity: 4,
            seed: 7,
            shape: ImageShape::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub prompt: String,
    pub vocab: Arc<Vocabulary>,
    pub identities: Vec<SyntheticIdentitySpec>,
    pub private: Vec<Sample>,
    pub public: Vec<Sample>,
}

impl Dataset {
    pub fn private_identities(&self) -> impl Iterator<Item = &SyntheticIdentitySpec> {
        let n = self.config.num_identities;
        self.identities.iter().take(n)
    }

    pub fn identity(&self, id: u32) -> Option<&SyntheticIdentitySpec> {
        self.identities.iter().find(|s| s.identity_id == id)
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.private
            .iter()
            .chain(&self.public)
            .map(|s| ManifestRecord {
                image: s.relative_path().to_string_lossy().into_owned(),
                prompt: self.prompt.clone(),
                answer: s.answer.clone(),
                identity: s.identity_id,
                split: s.split,
            })
            .collect()
    }

    /// JSON-lines manifest bytes.
    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in self.manifest() {
            serde_json::to_writer(&mut out, &r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes `manifest.jsonl` and every image as PNG under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for s in self.private.iter().chain(&self.public) {
            let path = dir.join(s.relative_path());
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            s.image.save_png(&path)?;
        }
        let manifest = dir.join("manifest.jsonl");
        write_atomic(&manifest, &self.manifest_bytes()?)?;
        Ok(manifest)
    }
}

/// Every word the toy tokenizer knows: prompt words, then name parts.
pub fn toy_vocabulary() -> Vocabulary {
    let words = PROMPT
        .split_whitespace()
        .chain(FIRST)
        .chain(MIDDLE)
        .chain(LAST);
    Vocabulary::from_words(words).expect("static vocabulary is valid")
}

pub fn identity_attributes(identity_id: u32, dataset_seed: u64) -> IdentityAttributes {
    let mut rng = seed::rng(dataset_seed, &format!("dataset/identity/{identity_id}"));
    let shape = *ShapeKind::ALL.choose(&mut rng).expect("non-empty");
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let foreground = loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let dist: f64 = c.iter().zip(&background).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist > 0.5 {
            break c;
        }
    };
    IdentityAttributes {
        shape,
        foreground,
        background,
        offset: (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
        size: rng.random_range(5.0..9.0),
    }
}

/// Unique 2-4 token names drawn from small shared pools, so no single token
/// identifies a person.
fn assign_names(count: usize, dataset_seed: u64) -> Result<Vec<String>> {
    let capacity = FIRST.len() * LAST.len() * (1 + MIDDLE.len() + MIDDLE.len() * MIDDLE.len());
    if count > capacity {
        return Err(Error::config(format!(
            "at most {capacity} identities have distinct toy names, asked for {count}"
        )));
    }
    let mut rng = seed::rng(dataset_seed, "dataset/names");
    let mut used = BTreeSet::new();
    let mut names = Vec::with_capacity(count);
    while names.len() < count {
        let middle_count = match rng.random_range(0..10) {
            0..=4 => 0,
            5..=8 => 1,
            _ => 2,
        };
        let mut parts = vec![*FIRST.choose(&mut rng).expect("non-empty")];
        for _ in 0..middle_count {
            parts.push(*MIDDLE.choose(&mut rng).expect("non-empty"));
        }
        parts.push(*LAST.choose(&mut rng).expect("non-empty"));
        let name = parts.join(" ");
        if used.insert(name.clone()) {
            names.push(name);
        }
    }
    Ok(names)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders sample `index` of an identity.
pub fn render(attrs: &IdentityAttributes, identity_id: u32, index: u32, dataset_seed: u64, shape: ImageShape) -> ImageTensor {
    let mut rng = seed::rng(dataset_seed, &format!("dataset/sample/{identity_id}/{index}"));
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, s: f64| rng.random_range(-s..s);
    let bg: [f64; 3] = std::array::from_fn(|c| attrs.background[c] + jitter(&mut rng, 0.04));
    let fg: [f64; 3] = std::array::from_fn(|c| attrs.foreground[c] + jitter(&mut rng, 0.04));
    let cx = shape.width as f64 / 2.0 + attrs.offset.0 + jitter(&mut rng, 1.5);
    let cy = shape.height as f64 / 2.0 + attrs.offset.1 + jitter(&mut rng, 1.5);
    let radius = attrs.size * (1.0 + jitter(&mut rng, 0.08));
    let shade = jitter(&mut rng, 0.05);

    let mut pixels = Vec::with_capacity(shape.len());
    for y in 0..shape.height {
        for x in 0..shape.width {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // signed distance, negative inside
            let sd = match attrs.shape {
                ShapeKind::Disc => (px * px + py * py).sqrt() - radius,
                ShapeKind::Square => px.abs().max(py.abs()) - radius * 0.85,
                ShapeKind::Triangle => {
                    let k = 3f64.sqrt();
                    (py * 0.5 + px.abs() * k * 0.5).max(-py) - radius * 0.5
                }
                ShapeKind::Ring => ((px * px + py * py).sqrt() - radius * 0.75).abs() - radius * 0.3,
            };
            let coverage = (0.5 - sd).clamp(0.0, 1.0);
            let vertical = shade * (y as f64 / shape.height as f64 - 0.5);
            for c in 0..shape.channels.min(3) {
                let v = bg[c] * (1.0 - coverage) + fg[c] * coverage + vertical;
                pixels.push(quantize(v));
            }
        }
    }
    ImageTensor::new(shape, pixels).expect("quantized pixels are in range")
}

/// Builds private identities `0..num_identities` and disjoint public
/// identities after them.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.num_identities < 2 {
        return Err(Error::config("num_identities must be at least 2"));
    }
    if config.per_identity < 1 {
        return Err(Error::config("per_identity must be at least 1"));
    }
    if config.public_identities > 0 && config.public_per_identity < 1 {
        return Err(Error::config("public_per_identity must be at least 1"));
    }
    if config.shape.channels != 3 {
        return Err(Error::config("toy images are RGB"));
    }
    let total = config.num_identities + config.public_identities;
    let names = assign_names(total, config.seed)?;
    let identities: Vec<SyntheticIdentitySpec> = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| SyntheticIdentitySpec {
            identity_id: i as u32,
            attributes: identity_attributes(i as u32, config.seed),
            name,
        })
        .collect();

    let make = |spec: &SyntheticIdentitySpec, count: usize, split: Split| {
        (0..count as u32)
            .map(|index| Sample {
                identity_id: spec.identity_id,
                index,
                split,
                image: render(&spec.attributes, spec.identity_id, index, config.seed, config.shape),
                answer: spec.name.clone(),
            })
            .collect::<Vec<_>>()
    };
    let private = identities[..config.num_identities]
        .iter()
        .flat_map(|s| make(s, config.per_identity, Split::Private))
        .collect();
    let public = identities[config.num_identities..]
        .iter()
        .flat_map(|s| make(s, config.public_per_identity, Split::Public))
        .collect();

    Ok(Dataset {
        config: config.clone(),
        prompt: PROMPT.to_string(),
        vocab: Arc::new(toy_vocabulary()),
        identities,
        private,
        public,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_identities: 4,
            per_identity: 3,
            public_identities: 5,
            public_per_identity: 2,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_disjointness() {
        let d = build_dataset(&DatasetConfig {
            public_identities: 8,
            public_per_identity: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.private.len(), 16 * 32);
        let answers: BTreeSet<_> = d.private.iter().map(|s| s.answer.clone()).collect();
        assert_eq!(answers.len(), 16);
        let private_ids: BTreeSet<_> = d.private.iter().map(|s| s.identity_id).collect();
        let public_ids: BTreeSet<_> = d.public.iter().map(|s| s.identity_id).collect();
        assert!(private_ids.is_disjoint(&public_ids));
    }

    #[test]
    fn names_are_multi_token_and_encodable() {
        let d = build_dataset(&small()).unwrap();
        for spec in &d.identities {
            let ids = d.vocab.encode(&spec.name).unwrap();
            assert!((2..=4).contains(&ids.len()), "{}", spec.name);
        }
    }

    #[test]
    fn same_seed_gives_identical_manifest_and_images() {
        let a = build_dataset(&small()).unwrap();
        let b = build_dataset(&small()).unwrap();
        assert_eq!(a.manifest_bytes().unwrap(), b.manifest_bytes().unwrap());
        assert!(a.private.iter().zip(&b.private).all(|(x, y)| x.image == y.image));
        let c = build_dataset(&DatasetConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.private[0].image, c.private[0].image);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(build_dataset(&DatasetConfig { num_identities: 1, ..small() }).is_err());
        assert!(build_dataset(&DatasetConfig { per_identity: 0, ..small() }).is_err());
    }

    #[test]
    fn png_copies_decode_to_training_pixels() {
        let d = build_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let s = &d.private[1];
        let img = image::open(dir.path().join(s.relative_path())).unwrap().to_rgb8();
        let pixels: Vec<f64> = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        assert_eq!(pixels, s.image.pixels());
        let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), d.private.len() + d.public.len());
    }
}
