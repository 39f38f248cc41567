//! Dataset plumbing: a JSON-lines manifest of image/caption/scene records, a
//! word-level vocabulary with dedicated scene-prompt tokens, prompt
//! augmentation, a procedural dataset generator for self-contained runs, a
//! minimal binary image format, and deterministic batching.
//!
//! File formats, all fixed little-endian and documented in the README:
//!   manifest  one JSON object per line: {"image", "captions" (exactly 5), "scene"}
//!   image     magic "CMIM", u32 height, u32 width, u32 channels, f64 pixels,
//!             channel planes each row-major, values in [0, 1]
//!   vocab     JSON map token -> id

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use cmer_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;
pub const CAPTIONS_PER_IMAGE: usize = 5;

const CMIM_MAGIC: &[u8; 4] = b"CMIM";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
    pub scene: String,
}

/// Validated dataset listing plus the scene vocabulary in first-appearance
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub scenes: Vec<String>,
}

impl Manifest {
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Manifest> {
        let mut scenes: Vec<String> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(Error::Manifest {
                    path: "<records>".into(),
                    line: i + 1,
                    msg: format!(
                        "record for {:?} has {} captions, expected {CAPTIONS_PER_IMAGE}",
                        r.image,
                        r.captions.len()
                    ),
                });
            }
            if !scenes.iter().any(|s| s == &r.scene) {
                scenes.push(r.scene.clone());
            }
        }
        Ok(Manifest { records, scenes })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let shown = path.display().to_string();
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Manifest {
                    path: shown.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if record.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(Error::Manifest {
                    path: shown,
                    line: i + 1,
                    msg: format!(
                        "record for {:?} has {} captions, expected {CAPTIONS_PER_IMAGE}",
                        record.image,
                        record.captions.len()
                    ),
                });
            }
            records.push(record);
        }
        Manifest::from_records(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn scene_id(&self, label: &str) -> Option<usize> {
        self.scenes.iter().position(|s| s == label)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Lowercases and splits on every non-alphanumeric character. Total: any
/// string maps to a (possibly empty) token list.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn scene_token_spelling(label: &str) -> String {
    format!("<scene:{label}>")
}

/// Token table with four reserved ids, one dedicated prompt token per scene,
/// and corpus words ordered by descending frequency then spelling.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    map: BTreeMap<String, usize>,
    /// Prompt token id per scene id, in scene order.
    scene_tokens: Vec<usize>,
}

impl Vocab {
    pub fn build(manifest: &Manifest, min_freq: usize) -> Result<Vocab> {
        if manifest.is_empty() {
            return Err(Error::Vocab("cannot build a vocabulary from an empty manifest".into()));
        }
        let mut map = BTreeMap::new();
        map.insert("<bos>".to_string(), BOS);
        map.insert("<eos>".to_string(), EOS);
        map.insert("<pad>".to_string(), PAD);
        map.insert("<unk>".to_string(), UNK);
        let mut scene_tokens = Vec::with_capacity(manifest.scenes.len());
        for label in &manifest.scenes {
            let id = map.len();
            map.insert(scene_token_spelling(label), id);
            scene_tokens.push(id);
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for r in &manifest.records {
            for caption in &r.captions {
                for tok in tokenize(caption) {
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (word, _) in words {
            let id = map.len();
            map.entry(word).or_insert(id);
        }
        Ok(Vocab { map, scene_tokens })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Id for a (already lowercased) token, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK)
    }

    /// Content token ids for a caption; no framing, no prompt.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn scene_token(&self, scene_id: usize) -> Option<usize> {
        self.scene_tokens.get(scene_id).copied()
    }

    /// All prompt token ids, sorted; these embedding rows stay grad-free.
    pub fn frozen_rows(&self) -> Vec<usize> {
        let mut rows = self.scene_tokens.clone();
        rows.sort_unstable();
        rows
    }

    pub fn to_map(&self) -> &BTreeMap<String, usize> {
        &self.map
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Vocab> {
        for (name, id) in [("<bos>", BOS), ("<eos>", EOS), ("<pad>", PAD), ("<unk>", UNK)] {
            if map.get(name) != Some(&id) {
                return Err(Error::Vocab(format!("reserved token {name} must map to {id}")));
            }
        }
        let mut scene_entries: Vec<(usize, &String)> = map
            .iter()
            .filter(|(k, _)| k.starts_with("<scene:"))
            .map(|(k, &v)| (v, k))
            .collect();
        scene_entries.sort_unstable();
        let scene_tokens = scene_entries.into_iter().map(|(v, _)| v).collect();
        Ok(Vocab { map, scene_tokens })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.map)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let map: BTreeMap<String, usize> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Vocab::from_map(map)
    }
}

/// Frames content tokens for the text tower. With the prompt enabled the
/// sequence is `[BOS, <scene>, content..., EOS]`; only the content tail is
/// ever truncated to honour `max_len`, never the framing or the prompt.
pub fn augment_with_scene(
    content: &[usize],
    scene_id: usize,
    vocab: &Vocab,
    max_len: usize,
    prompt: bool,
) -> Result<Vec<usize>> {
    let overhead = if prompt { 3 } else { 2 };
    let keep = content.len().min(max_len - overhead);
    let mut tokens = Vec::with_capacity(keep + overhead);
    tokens.push(BOS);
    if prompt {
        tokens.push(vocab.scene_token(scene_id).ok_or_else(|| {
            Error::Vocab(format!("scene id {scene_id} has no prompt token"))
        })?);
    }
    tokens.extend_from_slice(&content[..keep]);
    tokens.push(EOS);
    Ok(tokens)
}

/// Writes one image in the fixed binary format. `data` is channel planes,
/// each row-major, `channels * height * width` values in `[0, 1]`.
pub fn write_cmim(path: &Path, data: &[f64], height: usize, width: usize, channels: usize) -> Result<()> {
    if data.len() != height * width * channels {
        return Err(Error::Data(format!(
            "image payload of {} values does not fill {channels}x{height}x{width}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + data.len() * 8);
    bytes.extend_from_slice(CMIM_MAGIC);
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(channels as u32).to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads one image back; validates magic, payload length, and value range.
pub fn read_cmim(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CMIM_MAGIC {
        return Err(Error::Data(format!("{} is not an image file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (word(4), word(8), word(12));
    let n = height * width * channels;
    if bytes.len() != 16 + n * 8 {
        return Err(Error::Data(format!(
            "{}: expected {n} pixels, file holds {} bytes of payload",
            path.display(),
            bytes.len() - 16
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = 16 + i * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!(
                "{}: pixel {i} = {v} outside [0, 1]",
                path.display()
            )));
        }
        data.push(v);
    }
    Ok((data, height, width, channels))
}

pub const SCENE_NAMES: [&str; 8] = [
    "harbor", "farmland", "airport", "forest", "desert", "lake", "city", "mountain",
];

fn scene_label(k: usize) -> String {
    if k < SCENE_NAMES.len() {
        SCENE_NAMES[k].to_string()
    } else {
        format!("region{k}")
    }
}

/// Base pattern value for one pixel of one scene's motif, before jitter.
fn motif(scene: usize, channel: usize, row: usize, col: usize, size: usize) -> f64 {
    use std::f64::consts::TAU;
    let u = (row as f64 + 0.5) / size as f64;
    let v = (col as f64 + 0.5) / size as f64;
    let family = scene % 8;
    let stretch = 1.0 + (scene / 8) as f64;
    let base = match family {
        0 => 0.5 + 0.45 * (TAU * u * 4.0 * stretch).sin(),
        1 => 0.5 + 0.45 * (TAU * v * 4.0 * stretch).sin(),
        2 => (u + v) / 2.0,
        3 => {
            let cell = (4.0 / stretch).max(1.0) as usize;
            if (row / cell + col / cell) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        }
        4 => {
            let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (1.0 - 1.4 * d).clamp(0.0, 1.0)
        }
        5 => {
            let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            if d < 0.3 {
                0.9
            } else {
                0.15
            }
        }
        6 => {
            if row % 8 < 2 || col % 8 < 2 {
                0.85
            } else {
                0.25
            }
        }
        _ => {
            if u >= (2.0 * v - 1.0).abs() {
                0.75
            } else {
                0.2
            }
        }
    };
    const TINT: [[f64; 3]; 8] = [
        [0.2, 0.4, 0.8],
        [0.3, 0.8, 0.3],
        [0.7, 0.7, 0.7],
        [0.1, 0.6, 0.2],
        [0.9, 0.75, 0.4],
        [0.2, 0.5, 0.9],
        [0.6, 0.6, 0.65],
        [0.5, 0.45, 0.55],
    ];
    (base * TINT[family][channel % 3]).clamp(0.0, 1.0)
}

const BRIGHT_WORDS: [&str; 4] = ["dark", "dim", "pale", "bright"];
const TEXTURE_WORDS: [&str; 4] = ["smooth", "grainy", "coarse", "mottled"];

/// A generated dataset held in memory; `images` are channel-plane pixel
/// buffers matching the manifest order.
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub images: Vec<Vec<f64>>,
    pub size: usize,
    pub channels: usize,
}

/// Procedurally generates `num_scenes * images_per_scene` paired samples.
/// Each scene owns a distinct motif; every image adds per-image brightness and
/// noise jitter, and its five captions name the scene, a per-image marker
/// word, and jitter-derived attribute words, so matching is learnable from
/// pixels alone. Fully determined by `seed`.
pub fn synthesize(
    num_scenes: usize,
    images_per_scene: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if num_scenes == 0 || images_per_scene == 0 || image_size == 0 {
        return Err(Error::Data("synthetic dataset parameters must be positive".into()));
    }
    let channels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for scene in 0..num_scenes {
        let label = scene_label(scene);
        for i in 0..images_per_scene {
            let brightness: f64 = rng.gen_range(-0.08..0.08);
            let amp: f64 = rng.gen_range(0.01..0.05);
            let mut data = Vec::with_capacity(channels * image_size * image_size);
            for ch in 0..channels {
                for r in 0..image_size {
                    for c in 0..image_size {
                        let noise: f64 = rng.gen_range(-amp..amp);
                        data.push(
                            (motif(scene, ch, r, c, image_size) + brightness + noise)
                                .clamp(0.0, 1.0),
                        );
                    }
                }
            }
            let bright = BRIGHT_WORDS[(((brightness + 0.08) / 0.16 * 4.0) as usize).min(3)];
            let texture = TEXTURE_WORDS[(((amp - 0.01) / 0.04 * 4.0) as usize).min(3)];
            let marker = format!("sector{i}");
            let captions = vec![
                format!("a {bright} {label} scene at {marker}"),
                format!("{marker} shows a {texture} {label} area"),
                format!("the {label} region near {marker} looks {bright}"),
                format!("an aerial view of {marker} with {texture} {label} ground"),
                format!("{label} land around {marker} appears {bright} and {texture}"),
            ];
            records.push(ManifestRecord {
                image: format!("images/{label}_{i:03}.cmim"),
                captions,
                scene: label.clone(),
            });
            images.push(data);
        }
    }
    Ok(SyntheticDataset {
        manifest: Manifest::from_records(records)?,
        images,
        size: image_size,
        channels,
    })
}

/// Generates and writes a dataset under `dir`: `manifest.jsonl`, an `images/`
/// tree, and `vocab.json` built with the given frequency floor.
pub fn generate_synthetic(
    dir: &Path,
    num_scenes: usize,
    images_per_scene: usize,
    image_size: usize,
    seed: u64,
    min_freq: usize,
) -> Result<SyntheticDataset> {
    let set = synthesize(num_scenes, images_per_scene, image_size, seed)?;
    fs::create_dir_all(dir.join("images"))?;
    for (record, data) in set.manifest.records.iter().zip(&set.images) {
        write_cmim(&dir.join(&record.image), data, set.size, set.size, set.channels)?;
    }
    set.manifest.save(&dir.join("manifest.jsonl"))?;
    Vocab::build(&set.manifest, min_freq)?.save(&dir.join("vocab.json"))?;
    Ok(set)
}

/// Deterministic index batches for one epoch: shuffle all indices by
/// `(seed, epoch)`, cut into full batches, drop the remainder.
pub fn make_batches(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size {batch_size} leaves no in-batch negatives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut indices: Vec<usize> = (0..n_samples).collect();
    indices.shuffle(&mut rng);
    Ok(indices
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Caption slot used for every sample in the given epoch.
pub fn caption_for_epoch(epoch: usize) -> usize {
    epoch % CAPTIONS_PER_IMAGE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fixed 80/10/10 split by sample position.
pub fn split_of(index: usize) -> Split {
    match index % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

pub fn split_indices(n: usize, split: Split) -> Vec<usize> {
    (0..n).filter(|&i| split_of(i) == split).collect()
}

/// Fully materialized dataset: decoded image tensors, pre-encoded caption
/// content tokens, scene ids, and the vocabulary in force.
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
    pub captions: Vec<Vec<Vec<usize>>>,
    pub scene_ids: Vec<usize>,
    pub vocab: Vocab,
}

impl Dataset {
    /// Loads a manifest and its images from disk, building the vocabulary
    /// from the manifest itself.
    pub fn load(manifest_path: &Path, cfg: &RunConfig) -> Result<Dataset> {
        let manifest = Manifest::load(manifest_path)?;
        let vocab = Vocab::build(&manifest, cfg.min_freq)?;
        Dataset::assemble(manifest, vocab, manifest_path.parent(), cfg, None)
    }

    /// Loads a manifest but keeps a previously saved vocabulary, so token ids
    /// match the model that was trained with it.
    pub fn load_with_vocab(manifest_path: &Path, cfg: &RunConfig, vocab: Vocab) -> Result<Dataset> {
        let manifest = Manifest::load(manifest_path)?;
        Dataset::assemble(manifest, vocab, manifest_path.parent(), cfg, None)
    }

    /// Wraps an in-memory generated dataset without touching the filesystem.
    pub fn from_synthetic(set: SyntheticDataset, cfg: &RunConfig) -> Result<Dataset> {
        let vocab = Vocab::build(&set.manifest, cfg.min_freq)?;
        let images = Some((set.images, set.channels, set.size));
        Dataset::assemble(set.manifest, vocab, None, cfg, images)
    }

    fn assemble(
        manifest: Manifest,
        vocab: Vocab,
        base: Option<&Path>,
        cfg: &RunConfig,
        preloaded: Option<(Vec<Vec<f64>>, usize, usize)>,
    ) -> Result<Dataset> {
        let base: PathBuf = base.unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut images = Vec::with_capacity(manifest.len());
        match preloaded {
            Some((buffers, channels, size)) => {
                for data in buffers {
                    images.push(Tensor::from_vec(data, &[channels, size, size])?);
                }
            }
            None => {
                for r in &manifest.records {
                    let (data, h, w, c) = read_cmim(&base.join(&r.image))?;
                    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
                        return Err(Error::Data(format!(
                            "{}: image is {c}x{h}x{w}, config wants {}x{}x{}",
                            r.image, cfg.channels, cfg.image_size, cfg.image_size
                        )));
                    }
                    images.push(Tensor::from_vec(data, &[c, h, w])?);
                }
            }
        }
        let captions = manifest
            .records
            .iter()
            .map(|r| r.captions.iter().map(|c| vocab.encode(c)).collect())
            .collect();
        let scene_ids = manifest
            .records
            .iter()
            .map(|r| manifest.scene_id(&r.scene).expect("scene seen at load"))
            .collect();
        Ok(Dataset {
            manifest,
            images,
            captions,
            scene_ids,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Framed token sequence for one caption of one sample.
    pub fn token_sequence(&self, sample: usize, caption: usize, cfg: &RunConfig) -> Result<Vec<usize>> {
        augment_with_scene(
            &self.captions[sample][caption],
            self.scene_ids[sample],
            &self.vocab,
            cfg.max_len,
            cfg.scene_prompt,
        )
    }
}
