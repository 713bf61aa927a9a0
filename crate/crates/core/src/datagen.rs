//! Synthetic POI corpora with controllable text and image signal.
//!
//! Every tag owns a latent concept: one or two tag words, a cue word, and a
//! `P×P×C` image pattern. A POI mentions each gold tag in its texts with
//! probability `text_signal`; each of its images stamps the pattern of one
//! covered gold tag with probability `image_signal`. Everything else is
//! drawn independently of the gold tags: filler words, uniformly chosen
//! confuser mentions, distractor patterns and Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::default_templates;
use crate::data::{Dataset, ImageGrid, PoiRecord, PretrainPair, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};
use crate::vocab::{TagVocab, TokenVocab};

/// Integer count `min + Binomial(max − min, p)` with mean `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDist {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl CountDist {
    pub fn new(min: usize, max: usize, mean: f64) -> Self {
        Self { min, max, mean }
    }

    pub fn fixed(n: usize) -> Self {
        Self::new(n, n, n as f64)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min > self.max || !(self.min as f64..=self.max as f64).contains(&self.mean) {
            return Err(Error::Infeasible(format!(
                "{what}: mean {} outside [{}, {}]",
                self.mean, self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.max == self.min {
            return self.min;
        }
        let p = (self.mean - self.min as f64) / (self.max - self.min) as f64;
        let b = Binomial::new((self.max - self.min) as u64, p).expect("p validated");
        self.min + b.sample(rng) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub poi_count: usize,
    pub tag_count: usize,
    pub tags_per_poi: CountDist,
    pub images_per_poi: CountDist,
    /// Comments per POI; texts are name, category, description plus these.
    pub comments_per_poi: CountDist,
    /// Filler words per description or comment.
    pub words_per_text: CountDist,
    /// Probability that a gold tag is mentioned in the POI's texts.
    pub text_signal: f64,
    /// Probability that an image depicts one of the covered gold tags.
    pub image_signal: f64,
    /// Fraction of gold tags that images may depict.
    pub image_tag_coverage: f64,
    /// Probability that a text mentions a uniformly random tag.
    pub confuser_rate: f64,
    /// Standard deviation of the Gaussian image noise.
    pub noise: f64,
    /// Probability that an image also carries a distractor pattern.
    pub distractor_rate: f64,
    pub filler_words: usize,
    pub categories: usize,
    pub grid_size: usize,
    pub channels: usize,
    /// Side of the stamped patterns; they are aligned to this grid.
    pub stamp: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Small MPTD2-shaped corpus used by tests and examples.
    pub fn desk() -> Self {
        Self {
            poi_count: 500,
            tag_count: 20,
            tags_per_poi: CountDist::new(1, 7, 4.0),
            images_per_poi: CountDist::new(4, 12, 8.0),
            comments_per_poi: CountDist::new(3, 7, 5.0),
            words_per_text: CountDist::new(3, 9, 5.0),
            text_signal: 0.8,
            image_signal: 0.8,
            image_tag_coverage: 0.5,
            confuser_rate: 0.02,
            noise: 0.5,
            distractor_rate: 0.5,
            filler_words: 300,
            categories: 8,
            grid_size: 8,
            channels: 4,
            stamp: 4,
            seed: 0,
        }
    }

    /// A few dozen tiny POIs; enough for a training step in tests.
    pub fn tiny() -> Self {
        Self {
            poi_count: 20,
            tag_count: 6,
            tags_per_poi: CountDist::new(1, 3, 2.0),
            images_per_poi: CountDist::fixed(2),
            comments_per_poi: CountDist::fixed(2),
            words_per_text: CountDist::fixed(3),
            filler_words: 20,
            categories: 2,
            grid_size: 4,
            channels: 2,
            stamp: 2,
            ..Self::desk()
        }
    }

    /// The desk corpus with every tag visible in both modalities and no
    /// confusers, distractors or image noise.
    pub fn easy() -> Self {
        Self {
            text_signal: 1.0,
            image_signal: 1.0,
            image_tag_coverage: 1.0,
            confuser_rate: 0.0,
            noise: 0.0,
            distractor_rate: 0.0,
            ..Self::desk()
        }
    }

    /// Curated-corpus shape: 6,415 POIs, 286 tags, about 4 tags, 8 images
    /// and 16 texts per POI.
    pub fn mptd2() -> Self {
        Self {
            poi_count: 6415,
            tag_count: 286,
            tags_per_poi: CountDist::new(1, 8, 4.15),
            images_per_poi: CountDist::new(4, 12, 8.0),
            comments_per_poi: CountDist::new(9, 17, 13.0),
            image_tag_coverage: 0.2,
            filler_words: 2000,
            categories: 24,
            ..Self::desk()
        }
    }

    /// Raw-corpus shape, noisier, with 3 tags per POI and per-POI image and
    /// text counts scaled down by four.
    pub fn mptd1() -> Self {
        Self {
            poi_count: 6342,
            tag_count: 354,
            tags_per_poi: CountDist::new(1, 6, 3.1),
            images_per_poi: CountDist::new(8, 24, 16.0),
            comments_per_poi: CountDist::new(18, 39, 28.5),
            text_signal: 0.6,
            image_signal: 0.6,
            image_tag_coverage: 0.2,
            confuser_rate: 0.05,
            noise: 1.0,
            filler_words: 3000,
            categories: 32,
            ..Self::desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.poi_count == 0 || self.tag_count == 0 {
            return bad("poi_count and tag_count must be positive".into());
        }
        self.tags_per_poi.validate("tags_per_poi")?;
        self.images_per_poi.validate("images_per_poi")?;
        self.comments_per_poi.validate("comments_per_poi")?;
        self.words_per_text.validate("words_per_text")?;
        if self.tags_per_poi.min == 0 {
            return bad("every POI needs at least one gold tag".into());
        }
        if self.tags_per_poi.max > self.tag_count {
            return bad(format!(
                "tags_per_poi up to {} exceeds tag_count {}",
                self.tags_per_poi.max, self.tag_count
            ));
        }
        for (name, p) in [
            ("text_signal", self.text_signal),
            ("image_signal", self.image_signal),
            ("image_tag_coverage", self.image_tag_coverage),
            ("confuser_rate", self.confuser_rate),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0,1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        if self.stamp == 0 || self.grid_size == 0 || self.grid_size % self.stamp != 0 || self.channels == 0 {
            return bad("stamp must divide a positive grid size".into());
        }
        if self.words_per_text.min == 0 || self.filler_words == 0 || self.categories == 0 {
            return bad("texts need filler words and categories".into());
        }
        Ok(())
    }
}

/// Latent structure behind a corpus.
#[derive(Clone, Debug)]
struct Concepts {
    tag_words: Vec<Vec<String>>,
    cue_words: Vec<String>,
    patterns: Vec<Vec<f32>>,
    distractor_patterns: Vec<Vec<f32>>,
    filler: Vec<String>,
    categories: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const WORD_SYLLABLES: u32 = 3;
const DISTRACTOR_PATTERNS: usize = 8;
const GLOBAL_STREAM: u64 = 1 << 32;

fn pseudo_word(mut i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut w = String::new();
    for _ in 0..WORD_SYLLABLES {
        let s = i % syllables;
        i /= syllables;
        w.push(CONSONANTS[s / VOWELS.len()] as char);
        w.push(VOWELS[s % VOWELS.len()] as char);
    }
    w
}

fn pattern(rng: &mut SeededRng, len: usize) -> Vec<f32> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..len).map(|_| n.sample(rng) as f32).collect()
}

impl Concepts {
    fn new(spec: &CorpusSpec, rng: &mut SeededRng) -> Result<Self> {
        let two_word: Vec<bool> = (0..spec.tag_count).map(|_| rng.random_bool(0.3)).collect();
        let tag_word_count: usize = two_word.iter().map(|&t| 1 + t as usize).sum();
        let needed = tag_word_count + spec.tag_count + spec.filler_words + spec.categories;
        let space = (CONSONANTS.len() * VOWELS.len()).pow(WORD_SYLLABLES);
        if needed > space {
            return Err(Error::Infeasible(format!("{needed} distinct words requested, {space} available")));
        }
        let mut words = index::sample(rng, space, needed).into_iter().map(pseudo_word);
        let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };
        let tag_words = two_word.iter().map(|&t| take(1 + t as usize)).collect();
        let cue_words = take(spec.tag_count);
        let filler = take(spec.filler_words);
        let categories = take(spec.categories);
        let len = spec.stamp * spec.stamp * spec.channels;
        Ok(Self {
            tag_words,
            cue_words,
            patterns: (0..spec.tag_count).map(|_| pattern(rng, len)).collect(),
            distractor_patterns: (0..DISTRACTOR_PATTERNS).map(|_| pattern(rng, len)).collect(),
            filler,
            categories,
        })
    }

    fn tag_string(&self, t: usize) -> String {
        self.tag_words[t].join(" ")
    }

    fn mention<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> String {
        if rng.random_bool(0.5) {
            self.tag_string(t)
        } else {
            self.cue_words[t].clone()
        }
    }
}

fn filler_text<R: Rng + ?Sized>(c: &Concepts, n: usize, rng: &mut R) -> Vec<String> {
    (0..n).map(|_| c.filler.choose(rng).expect("non-empty").clone()).collect()
}

fn insert_mention<R: Rng + ?Sized>(text: &mut Vec<String>, mention: String, rng: &mut R) {
    let at = rng.random_range(0..=text.len());
    text.insert(at, mention);
}

fn stamp(spec: &CorpusSpec, values: &mut [f32], pattern: &[f32], block: usize) {
    let per_side = spec.grid_size / spec.stamp;
    let (r0, c0) = ((block / per_side) * spec.stamp, (block % per_side) * spec.stamp);
    let ch = spec.channels;
    for r in 0..spec.stamp {
        for c in 0..spec.stamp {
            for k in 0..ch {
                values[((r0 + r) * spec.grid_size + c0 + c) * ch + k] += pattern[(r * spec.stamp + c) * ch + k];
            }
        }
    }
}

struct GeneratedPoi {
    record: PoiRecord,
    images: Vec<ImageGrid>,
    /// `(image key, depicted tag)`.
    depicted: Vec<(String, usize)>,
}

fn generate_poi(spec: &CorpusSpec, c: &Concepts, index: usize) -> Result<GeneratedPoi> {
    let mut rng = stream(spec.seed, GLOBAL_STREAM + 1 + index as u64);
    let poi_id = format!("poi{index:05}");
    let n_gold = spec.tags_per_poi.sample(&mut rng);
    let mut gold: Vec<usize> = index::sample(&mut rng, spec.tag_count, n_gold).into_vec();
    gold.sort_unstable();

    let name = filler_text(c, 2, &mut rng).join(" ");
    let category = c.categories.choose(&mut rng).expect("non-empty").clone();
    let n_comments = spec.comments_per_poi.sample(&mut rng);
    // Slot 0 is the description, the rest are comments.
    let mut bodies: Vec<Vec<String>> = (0..=n_comments)
        .map(|_| {
            let n = spec.words_per_text.sample(&mut rng);
            filler_text(c, n, &mut rng)
        })
        .collect();
    for &t in &gold {
        if rng.random_bool(spec.text_signal) {
            let times = rng.random_range(1..=3);
            for _ in 0..times {
                let slot = rng.random_range(0..bodies.len());
                let m = c.mention(t, &mut rng);
                insert_mention(&mut bodies[slot], m, &mut rng);
            }
        }
    }
    for body in bodies.iter_mut() {
        if rng.random_bool(spec.confuser_rate) {
            let t = rng.random_range(0..spec.tag_count);
            let m = c.mention(t, &mut rng);
            insert_mention(body, m, &mut rng);
        }
    }
    let mut texts = bodies.into_iter().map(|b| b.join(" "));
    let description = texts.next().expect("description slot");
    let comments: Vec<String> = texts.collect();

    let covered_exact = spec.image_tag_coverage * gold.len() as f64;
    let mut n_covered = covered_exact.floor() as usize;
    if rng.random_bool(covered_exact - covered_exact.floor()) {
        n_covered += 1;
    }
    let mut covered = gold.clone();
    covered.shuffle(&mut rng);
    covered.truncate(n_covered.min(gold.len()));

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Infeasible(e.to_string()))?;
    let blocks = (spec.grid_size / spec.stamp).pow(2);
    let n_images = spec.images_per_poi.sample(&mut rng);
    let mut images = Vec::with_capacity(n_images);
    let mut depicted = Vec::new();
    for j in 0..n_images {
        let key = format!("{poi_id}_{j}");
        let mut values: Vec<f32> = (0..spec.grid_size * spec.grid_size * spec.channels)
            .map(|_| noise.sample(&mut rng) as f32)
            .collect();
        let mut free: Vec<usize> = (0..blocks).collect();
        free.shuffle(&mut rng);
        if !covered.is_empty() && rng.random_bool(spec.image_signal) {
            let t = *covered.choose(&mut rng).expect("non-empty");
            stamp(spec, &mut values, &c.patterns[t], free.pop().expect("at least one block"));
            depicted.push((key.clone(), t));
        }
        if let Some(block) = free.pop() {
            if rng.random_bool(spec.distractor_rate) {
                let p = c.distractor_patterns.choose(&mut rng).expect("non-empty");
                stamp(spec, &mut values, p, block);
            }
        }
        images.push(ImageGrid::new(key, spec.grid_size, spec.channels, values)?);
    }

    Ok(GeneratedPoi {
        record: PoiRecord {
            poi_id,
            name,
            category,
            description,
            comments,
            images: images.iter().map(|i| i.source_id.clone()).collect(),
            gold_tags: gold,
        },
        images,
        depicted,
    })
}

/// `round(0.8n)` train, `round(0.1n)` validation, the rest test, assigned
/// over a seeded permutation of the POIs.
pub fn split_assignment(n: usize, rng: &mut SeededRng) -> Vec<Split> {
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Builds the corpus in memory. A pure function of `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, GLOBAL_STREAM);
    let concepts = Concepts::new(spec, &mut rng)?;
    let splits = split_assignment(spec.poi_count, &mut rng);

    let mut pois = Vec::with_capacity(spec.poi_count);
    let mut images = BTreeMap::new();
    let mut pretrain = Vec::new();
    for i in 0..spec.poi_count {
        let g = generate_poi(spec, &concepts, i)?;
        for (key, t) in g.depicted {
            pretrain.push(PretrainPair {
                poi_id: g.record.poi_id.clone(),
                image_ref: key,
                tag: concepts.tag_string(t),
            });
        }
        for img in g.images {
            images.insert(img.source_id.clone(), img);
        }
        pois.push(g.record);
    }

    let tag_strings: Vec<String> = (0..spec.tag_count).map(|t| concepts.tag_string(t)).collect();
    // Template words are part of the vocabulary so masked tag sentences
    // tokenize without `[UNK]`.
    let template_words: Vec<String> = default_templates().iter().map(|t| t.replace("{}", " ")).collect();
    let tokens = TokenVocab::from_texts(
        tag_strings
            .iter()
            .chain(&template_words)
            .map(String::as_str)
            .chain(pois.iter().flat_map(|p| p.texts())),
    );
    let tags = TagVocab::new(tag_strings, &tokens)?;
    Ok(Dataset {
        tokens,
        tags,
        pois,
        splits,
        images,
        pretrain,
        grid_size: spec.grid_size,
        channels: spec.channels,
    })
}

/// Generates the corpus and writes it to `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    ds.save(dir)?;
    Ok(ds)
}
