//! POI records, image grids and the on-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! * `pois.jsonl`: one POI per line.
//! * `images/<ref>.bin`: `MPTI` magic, version, `G`, `C` (u32 LE), then
//!   `G·G·C` little-endian `f32` values, row-major.
//! * `vocab.txt`: tags, one per line. `tokens.txt`: token vocabulary.
//! * `split.txt`: `poi_id<TAB>train|val|test`.
//! * `pretrain.jsonl`: image-tag pairs for encoder pretraining (optional).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TagVocab, TokenVocab};

pub const IMAGE_MAGIC: &[u8; 4] = b"MPTI";
pub const IMAGE_VERSION: u32 = 1;

/// A `G×G×C` feature grid standing in for a photo.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub source_id: String,
    pub size: usize,
    pub channels: usize,
    /// Row-major `[row][col][channel]`.
    pub values: Vec<f32>,
}

impl ImageGrid {
    pub fn new(source_id: impl Into<String>, size: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size * channels {
            return Err(Error::ShapeMismatch {
                what: "image grid".into(),
                expected: vec![size, size, channels],
                found: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image grid has non-finite values".into()));
        }
        Ok(Self {
            source_id: source_id.into(),
            size,
            channels,
            values,
        })
    }

    pub fn zeros(source_id: impl Into<String>, size: usize, channels: usize) -> Self {
        Self {
            source_id: source_id.into(),
            size,
            channels,
            values: vec![0.0; size * size * channels],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[(row * self.size + col) * self.channels + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f32 {
        &mut self.values[(row * self.size + col) * self.channels + ch]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(source_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let source_id = source_id.into();
        let corrupt = |m: &str| Error::InvalidArgument(format!("image {source_id}: {m}"));
        if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != IMAGE_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let (size, channels) = (word(8) as usize, word(12) as usize);
        let n = size * size * channels;
        if bytes.len() != 16 + 4 * n {
            return Err(corrupt("payload size does not match header"));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(source_id, size, channels, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

/// One point of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct PoiRecord {
    pub poi_id: String,
    pub name: String,
    pub category: String,
    pub description: String,
    pub comments: Vec<String>,
    /// Keys into [`Dataset::images`].
    pub images: Vec<String>,
    /// Sorted, distinct tag ids.
    pub gold_tags: Vec<usize>,
}

impl PoiRecord {
    /// `[name, category, description] + comments`.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [self.name.as_str(), self.category.as_str(), self.description.as_str()]
            .into_iter()
            .chain(self.comments.iter().map(String::as_str))
    }

    pub fn text_count(&self) -> usize {
        3 + self.comments.len()
    }

    pub fn is_gold(&self, tag: usize) -> bool {
        self.gold_tags.binary_search(&tag).is_ok()
    }
}

#[derive(Serialize, Deserialize)]
struct PoiLine {
    poi_id: String,
    name: String,
    category: String,
    description: String,
    comments: Vec<String>,
    images: Vec<String>,
    gold_tags: Vec<String>,
}

/// One image paired with a tag it depicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub poi_id: String,
    pub image_ref: String,
    pub tag: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub tokens: TokenVocab,
    pub tags: TagVocab,
    pub pois: Vec<PoiRecord>,
    pub splits: Vec<Split>,
    pub images: BTreeMap<String, ImageGrid>,
    pub pretrain: Vec<PretrainPair>,
    pub grid_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image(&self, key: &str) -> Result<&ImageGrid> {
        self.images
            .get(key)
            .ok_or_else(|| Error::DanglingImage(key.to_string()))
    }

    /// Pretraining pairs restricted to POIs in `split`, resolved to
    /// `(image key, tag id)`.
    pub fn pretrain_pairs(&self, split: Split) -> Vec<(String, usize)> {
        let allowed: BTreeSet<&str> = self
            .pois
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.poi_id.as_str())
            .collect();
        self.pretrain
            .iter()
            .filter(|p| allowed.contains(p.poi_id.as_str()))
            .filter_map(|p| self.tags.id(&p.tag).map(|t| (p.image_ref.clone(), t)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        self.tokens.write(&dir.join("tokens.txt"))?;
        self.tags.write(&dir.join("vocab.txt"))?;

        let pois_path = dir.join("pois.jsonl");
        let mut w = create(&pois_path)?;
        for p in &self.pois {
            let line = PoiLine {
                poi_id: p.poi_id.clone(),
                name: p.name.clone(),
                category: p.category.clone(),
                description: p.description.clone(),
                comments: p.comments.clone(),
                images: p.images.clone(),
                gold_tags: p
                    .gold_tags
                    .iter()
                    .map(|&t| self.tags.tag(t).expect("gold tag in vocab").to_string())
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&pois_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&pois_path, e))?;

        let split_path = dir.join("split.txt");
        let mut w = create(&split_path)?;
        for (p, s) in self.pois.iter().zip(&self.splits) {
            writeln!(w, "{}\t{}", p.poi_id, s).map_err(|e| Error::io(&split_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&split_path, e))?;

        let pre_path = dir.join("pretrain.jsonl");
        let mut w = create(&pre_path)?;
        for p in &self.pretrain {
            writeln!(w, "{}", serde_json::to_string(p)?).map_err(|e| Error::io(&pre_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&pre_path, e))?;

        for (key, img) in &self.images {
            let path = image_path(dir, key);
            fs::write(&path, img.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let tokens = TokenVocab::read(&dir.join("tokens.txt"))?;
        let tags = TagVocab::read(&dir.join("vocab.txt"), &tokens)?;

        let pois_path = dir.join("pois.jsonl");
        let text = fs::read_to_string(&pois_path).map_err(|e| Error::io(&pois_path, e))?;
        let mut pois = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: pois_path.clone(),
                line: i + 1,
                message,
            };
            let rec: PoiLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let mut gold = Vec::with_capacity(rec.gold_tags.len());
            for t in &rec.gold_tags {
                gold.push(tags.id(t).ok_or_else(|| parse_err(format!("unknown tag {t}")))?);
            }
            gold.sort_unstable();
            gold.dedup();
            pois.push(PoiRecord {
                poi_id: rec.poi_id,
                name: rec.name,
                category: rec.category,
                description: rec.description,
                comments: rec.comments,
                images: rec.images,
                gold_tags: gold,
            });
        }

        let split_path = dir.join("split.txt");
        let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let mut split_of = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: split_path.clone(),
                line: i + 1,
                message,
            };
            let (id, s) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected poi_id<TAB>split".into()))?;
            split_of.insert(id.to_string(), s.parse::<Split>().map_err(|e| parse_err(e.to_string()))?);
        }
        let splits = pois
            .iter()
            .map(|p| {
                split_of.get(&p.poi_id).copied().ok_or_else(|| Error::Parse {
                    path: split_path.clone(),
                    line: 0,
                    message: format!("no split for {}", p.poi_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let pre_path = dir.join("pretrain.jsonl");
        let mut pretrain = Vec::new();
        if pre_path.exists() {
            let text = fs::read_to_string(&pre_path).map_err(|e| Error::io(&pre_path, e))?;
            for (i, line) in text.lines().enumerate() {
                let pair: PretrainPair = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: pre_path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                pretrain.push(pair);
            }
        }

        let mut images = BTreeMap::new();
        let keys = pois
            .iter()
            .flat_map(|p| p.images.iter())
            .chain(pretrain.iter().map(|p| &p.image_ref));
        for key in keys {
            if images.contains_key(key) {
                continue;
            }
            let path = image_path(dir, key);
            let bytes = fs::read(&path).map_err(|_| Error::DanglingImage(key.clone()))?;
            images.insert(key.clone(), ImageGrid::from_bytes(key.clone(), &bytes)?);
        }
        let (grid_size, channels) = images
            .values()
            .next()
            .map(|g| (g.size, g.channels))
            .unwrap_or((0, 0));
        if let Some(bad) = images.values().find(|g| (g.size, g.channels) != (grid_size, channels)) {
            return Err(Error::ShapeMismatch {
                what: format!("image {}", bad.source_id),
                expected: vec![grid_size, grid_size, channels],
                found: vec![bad.size, bad.size, bad.channels],
            });
        }

        Ok(Self {
            tokens,
            tags,
            pois,
            splits,
            images,
            pretrain,
            grid_size,
            channels,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn image_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("images").join(format!("{key}.bin"))
}

/// Per-column summary of a corpus (or one split of it).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pois: usize,
    pub tags: usize,
    pub poi_tag_pairs: usize,
    pub avg_tags_per_poi: f64,
    pub avg_images_per_poi: f64,
    pub avg_texts_per_poi: f64,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "POIs {}  tags {}  POI-tag pairs {}  tags/POI {:.2}  images/POI {:.2}  texts/POI {:.2}",
            self.pois,
            self.tags,
            self.poi_tag_pairs,
            self.avg_tags_per_poi,
            self.avg_images_per_poi,
            self.avg_texts_per_poi
        )
    }
}

/// Statistics over `pois`; `tag_count` is the vocabulary size.
pub fn corpus_stats<'a>(pois: impl IntoIterator<Item = &'a PoiRecord>, tag_count: usize) -> CorpusStats {
    let (mut n, mut pairs, mut images, mut texts) = (0usize, 0usize, 0usize, 0usize);
    for p in pois {
        n += 1;
        pairs += p.gold_tags.len();
        images += p.images.len();
        texts += p.text_count();
    }
    let avg = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    CorpusStats {
        pois: n,
        tags: tag_count,
        poi_tag_pairs: pairs,
        avg_tags_per_poi: avg(pairs),
        avg_images_per_poi: avg(images),
        avg_texts_per_poi: avg(texts),
    }
}
