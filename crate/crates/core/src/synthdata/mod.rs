//! Deterministic grounded-scene generator.
//!
//! A scene holds 2-6 regions, each an object class with a color and a
//! texture. A region's feature is its class prototype plus one offset per
//! attribute plus Gaussian noise. Captions come from a handful of templates
//! whose predicate words are functions of the regions they connect: the verb
//! encodes the subject's color and the parity of the object's texture, and the
//! preposition encodes the texture of its object. Predicting a masked
//! predicate therefore requires looking at the right regions.

mod io;
mod tasks;

pub use io::*;
pub use tasks::*;

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{AlignmentMap, VisualRegion, Vocab};
use crate::error::{Error, Result};
use crate::probes::DependencyEdge;

/// Closed-class words and the attribute inventories of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub textures: Vec<String>,
    pub verbs: Vec<String>,
    pub prepositions: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            classes: words(&[
                "man", "woman", "dog", "cat", "horse", "bird", "ball", "car", "tree", "chair", "table", "boat",
            ]),
            colors: words(&["red", "blue", "green", "yellow"]),
            textures: words(&["wooden", "metal", "striped", "spotted"]),
            verbs: words(&["holds", "chases", "watches", "pulls", "touches", "follows", "carries", "pushes"]),
            prepositions: words(&["near", "behind", "above", "under"]),
        }
    }
}

/// Function words used by captions and task templates.
pub const FUNCTION_WORDS: [&str; 21] = [
    "the", "a", "what", "is", "color", "texture", "which", "caption", "true", "both", "images", "contain",
    "only", "one", "image", "contains", "left", "right", "no", "neither", "of",
];

pub const RELATIONS: [&str; 4] = ["nsubj", "dobj", "amod", "pobj"];

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, list: &[String], min: usize| {
            if list.len() < min {
                Err(Error::Config(format!("world needs at least {min} {name}, got {}", list.len())))
            } else {
                Ok(())
            }
        };
        check("classes", &self.classes, 2)?;
        check("colors", &self.colors, 2)?;
        check("textures", &self.textures, 2)?;
        check("verbs", &self.verbs, 2)?;
        check("prepositions", &self.prepositions, 1)?;
        let mut seen = HashSet::new();
        for w in self.attribute_words().chain(self.classes.iter()).chain(&self.verbs).chain(&self.prepositions) {
            if !seen.insert(w.as_str()) || FUNCTION_WORDS.contains(&w.as_str()) {
                return Err(Error::Config(format!("word {w:?} used twice in the world vocabulary")));
            }
        }
        Ok(())
    }

    pub fn attribute_words(&self) -> impl Iterator<Item = &String> {
        self.colors.iter().chain(&self.textures)
    }

    /// Every word the generator can emit, in a fixed order.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(
            FUNCTION_WORDS
                .iter()
                .map(|s| s.to_string())
                .chain(self.classes.iter().cloned())
                .chain(self.attribute_words().cloned())
                .chain(self.verbs.iter().cloned())
                .chain(self.prepositions.iter().cloned()),
        )
    }

    /// Answer pool for attribute questions: every color, then every texture.
    pub fn answers(&self) -> Vec<String> {
        self.attribute_words().cloned().collect()
    }

    /// Verb linking a subject of color `subject_color` to an object of
    /// texture `object_texture`.
    pub fn verb_index(&self, subject_color: usize, object_texture: usize) -> usize {
        (subject_color * 2 + object_texture % 2) % self.verbs.len()
    }

    pub fn preposition_index(&self, object_texture: usize) -> usize {
        object_texture % self.prepositions.len()
    }

    fn index(list: &[String], w: &str) -> Result<usize> {
        list.iter()
            .position(|x| x == w)
            .ok_or_else(|| Error::InvalidDataset(format!("unknown word {w:?}")))
    }

    pub fn class_index(&self, w: &str) -> Result<usize> {
        Self::index(&self.classes, w)
    }

    pub fn color_index(&self, w: &str) -> Result<usize> {
        Self::index(&self.colors, w)
    }

    pub fn texture_index(&self, w: &str) -> Result<usize> {
        Self::index(&self.textures, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub captions_per_scene: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub visual_dim: usize,
    pub noise_sigma: f64,
    pub attribute_scale: f64,
    /// Fraction of entity mentions whose gold set holds the most confident
    /// region of their scene.
    pub baseline_target: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_train: 5000,
            n_dev: 500,
            n_test: 500,
            captions_per_scene: 5,
            min_regions: 2,
            max_regions: 6,
            visual_dim: 64,
            noise_sigma: 0.3,
            attribute_scale: 1.0,
            baseline_target: 0.30,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_train + self.n_dev + self.n_test;
        if self.n_train < 2 || n < 2 {
            return Err(Error::Config("need at least 2 training scenes".into()));
        }
        if self.captions_per_scene < 2 {
            return Err(Error::Config("need at least 2 captions per scene".into()));
        }
        if self.min_regions < 2 || self.max_regions < self.min_regions {
            return Err(Error::Config(format!(
                "region range {}..={} must start at 2 or more",
                self.min_regions, self.max_regions
            )));
        }
        if self.visual_dim == 0 || !(self.noise_sigma >= 0.0) || !(self.attribute_scale >= 0.0) {
            return Err(Error::Config("visual_dim, noise_sigma and attribute_scale must be valid".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_target) {
            return Err(Error::Config("baseline_target must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Class prototypes and attribute offsets, fixed by the generator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub prototypes: Vec<Vec<f32>>,
    pub color_offsets: Vec<Vec<f32>>,
    pub texture_offsets: Vec<Vec<f32>>,
}

impl World {
    pub fn new(spec: WorldSpec, config: &GeneratorConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let attr = Normal::new(0.0, config.attribute_scale).expect("valid normal");
        let mut draw = |n: usize, d: &Normal<f64>| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..config.visual_dim).map(|_| d.sample(&mut rng) as f32).collect())
                .collect()
        };
        let prototypes = draw(spec.classes.len(), &unit);
        let color_offsets = draw(spec.colors.len(), &attr);
        let texture_offsets = draw(spec.textures.len(), &attr);
        Ok(World {
            spec,
            prototypes,
            color_offsets,
            texture_offsets,
        })
    }

    /// Index of the class prototype nearest to `feature`.
    pub fn nearest_class(&self, feature: &[f32]) -> usize {
        let dist = |p: &[f32]| -> f32 { p.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = 0;
        for c in 1..self.prototypes.len() {
            if dist(&self.prototypes[c]) < dist(&self.prototypes[best]) {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub class: String,
    pub color: String,
    pub texture: String,
    #[serde(flatten)]
    pub region: VisualRegion,
}

/// A noun phrase with inclusive word span and its gold regions. The last word
/// of the span is the phrase's head noun.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub words: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub edges: Vec<DependencyEdge>,
    /// Per region, the caption words it is aligned to.
    pub alignment: AlignmentMap,
}

impl Caption {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Gold regions of each word: the head noun of every entity carries that
    /// entity's regions.
    pub fn word_regions(&self) -> BTreeMap<usize, Vec<usize>> {
        self.entities.iter().map(|e| (e.end, e.regions.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedScene {
    pub id: u64,
    pub regions: Vec<RegionRecord>,
    pub captions: Vec<Caption>,
}

impl GroundedScene {
    pub fn visual_regions(&self) -> Vec<VisualRegion> {
        self.regions.iter().map(|r| r.region.clone()).collect()
    }

    /// Regions of class `class` whose color or texture is `adjective`
    /// (any adjective when `None`).
    pub fn matching(&self, class: &str, adjective: Option<&str>) -> Vec<usize> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class == class && adjective.is_none_or(|a| r.color == a || r.texture == a))
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the most confident region, lowest index on ties.
    pub fn most_confident(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.regions.iter().enumerate() {
            if r.region.confidence > self.regions[best].region.confidence {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSplits {
    pub train: Vec<GroundedScene>,
    pub dev: Vec<GroundedScene>,
    pub test: Vec<GroundedScene>,
}

impl SceneSplits {
    pub fn split(&self, name: &str) -> Result<&[GroundedScene]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?}"))),
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

struct Slot {
    region: usize,
    adjective: Option<String>,
}

fn phrase(words: &mut Vec<String>, entities: &mut Vec<EntityMention>, scene: &[RegionRecord], slot: &Slot) -> usize {
    let start = words.len();
    words.push("the".into());
    let class = &scene[slot.region].class;
    if let Some(a) = &slot.adjective {
        words.push(a.clone());
    }
    words.push(class.clone());
    let end = words.len() - 1;
    let regions = scene
        .iter()
        .enumerate()
        .filter(|(_, r)| &r.class == class && slot.adjective.as_ref().is_none_or(|a| &r.color == a || &r.texture == a))
        .map(|(i, _)| i)
        .collect();
    entities.push(EntityMention { start, end, regions });
    end
}

fn edge(head: usize, dep: usize, label: &str) -> DependencyEdge {
    DependencyEdge {
        head,
        dep,
        label: label.into(),
    }
}

/// Builds one caption about `scene` from a random template.
fn make_caption<R: Rng + ?Sized>(spec: &WorldSpec, scene: &[RegionRecord], rng: &mut R) -> Result<Caption> {
    let n = scene.len();
    // Templates needing three distinct regions are only available with three.
    let template = if n >= 3 { rng.random_range(0..4) } else { rng.random_range(1..4) };
    let mut picks: Vec<usize> = (0..n).collect();
    let mut pick = |rng: &mut R| -> usize {
        let i = rng.random_range(0..picks.len());
        picks.swap_remove(i)
    };
    let adjective = |rng: &mut R, r: usize| -> String {
        if rng.random_bool(0.5) {
            scene[r].color.clone()
        } else {
            scene[r].texture.clone()
        }
    };
    let color = |r: usize| spec.color_index(&scene[r].color);
    let texture = |r: usize| spec.texture_index(&scene[r].texture);

    let mut words = Vec::new();
    let mut entities = Vec::new();
    let mut edges = Vec::new();
    let det = |edges: &mut Vec<DependencyEdge>, e: &EntityMention| edges.push(edge(e.end, e.start, "det"));
    match template {
        // the ADJ SUBJ VERB the OBJ PREP the POBJ
        0 => {
            let (s, o, p) = (pick(rng), pick(rng), pick(rng));
            let adj = adjective(rng, s);
            let sn = phrase(&mut words, &mut entities, scene, &Slot { region: s, adjective: Some(adj) });
            let v = words.len();
            words.push(spec.verbs[spec.verb_index(color(s)?, texture(o)?)].clone());
            let on = phrase(&mut words, &mut entities, scene, &Slot { region: o, adjective: None });
            let pr = words.len();
            words.push(spec.prepositions[spec.preposition_index(texture(p)?)].clone());
            let pn = phrase(&mut words, &mut entities, scene, &Slot { region: p, adjective: None });
            edges.push(edge(sn, sn - 1, "amod"));
            edges.push(edge(v, sn, "nsubj"));
            edges.push(edge(v, on, "dobj"));
            edges.push(edge(v, pr, "prep"));
            edges.push(edge(pr, pn, "pobj"));
        }
        // the SUBJ VERB the ADJ OBJ
        1 => {
            let (s, o) = (pick(rng), pick(rng));
            let sn = phrase(&mut words, &mut entities, scene, &Slot { region: s, adjective: None });
            let v = words.len();
            words.push(spec.verbs[spec.verb_index(color(s)?, texture(o)?)].clone());
            let adj = adjective(rng, o);
            let on = phrase(&mut words, &mut entities, scene, &Slot { region: o, adjective: Some(adj) });
            edges.push(edge(v, sn, "nsubj"));
            edges.push(edge(v, on, "dobj"));
            edges.push(edge(on, on - 1, "amod"));
        }
        // the ADJ SUBJ PREP the POBJ
        2 => {
            let (s, p) = (pick(rng), pick(rng));
            let adj = adjective(rng, s);
            let sn = phrase(&mut words, &mut entities, scene, &Slot { region: s, adjective: Some(adj) });
            let pr = words.len();
            words.push(spec.prepositions[spec.preposition_index(texture(p)?)].clone());
            let pn = phrase(&mut words, &mut entities, scene, &Slot { region: p, adjective: None });
            edges.push(edge(sn, sn - 1, "amod"));
            edges.push(edge(sn, pr, "prep"));
            edges.push(edge(pr, pn, "pobj"));
        }
        // the SUBJ VERB the OBJ
        _ => {
            let (s, o) = (pick(rng), pick(rng));
            let sn = phrase(&mut words, &mut entities, scene, &Slot { region: s, adjective: None });
            let v = words.len();
            words.push(spec.verbs[spec.verb_index(color(s)?, texture(o)?)].clone());
            let on = phrase(&mut words, &mut entities, scene, &Slot { region: o, adjective: None });
            edges.push(edge(v, sn, "nsubj"));
            edges.push(edge(v, on, "dobj"));
        }
    }
    for e in &entities {
        det(&mut edges, e);
    }
    let mut alignment = AlignmentMap::unaligned(n);
    for e in &entities {
        for &r in &e.regions {
            alignment.regions[r].get_or_insert_with(Vec::new).push(e.end);
        }
    }
    Ok(Caption {
        words,
        entities,
        edges,
        alignment,
    })
}

fn random_box<R: Rng + ?Sized>(rng: &mut R) -> [f32; 4] {
    let w = rng.random_range(0.1..0.5f32);
    let h = rng.random_range(0.1..0.5f32);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

fn make_regions<R: Rng + ?Sized>(world: &World, config: &GeneratorConfig, rng: &mut R) -> Vec<RegionRecord> {
    let spec = &world.spec;
    let n = rng.random_range(config.min_regions..=config.max_regions);
    let noise = Normal::new(0.0, config.noise_sigma).expect("valid normal");
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = rng.random_range(0..spec.classes.len());
        let col = rng.random_range(0..spec.colors.len());
        let tex = rng.random_range(0..spec.textures.len());
        // (class, color) is unique within a scene.
        if !used.insert((c, col)) {
            continue;
        }
        let feature = (0..config.visual_dim)
            .map(|d| {
                world.prototypes[c][d]
                    + world.color_offsets[col][d]
                    + world.texture_offsets[tex][d]
                    + noise.sample(rng) as f32
            })
            .collect();
        out.push(RegionRecord {
            class: spec.classes[c].clone(),
            color: spec.colors[col].clone(),
            texture: spec.textures[tex].clone(),
            region: VisualRegion {
                feature,
                bbox: random_box(rng),
                confidence: 0.0,
            },
        });
    }
    out
}

const CAPTION_ATTEMPTS: usize = 200;
const SCENE_ATTEMPTS: usize = 100;

/// Captions for `regions` whose strings avoid `seen`, or `None` when the
/// scene's caption space is used up.
fn fresh_captions<R: Rng + ?Sized>(
    spec: &WorldSpec,
    regions: &[RegionRecord],
    count: usize,
    seen: &HashSet<String>,
    rng: &mut R,
) -> Result<Option<Vec<Caption>>> {
    let mut captions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..CAPTION_ATTEMPTS {
            let c = make_caption(spec, regions, rng)?;
            if !seen.contains(&c.text()) {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => captions.push(c),
            None => return Ok(None),
        }
    }
    Ok(Some(captions))
}

/// Generates train, dev and test scenes. Held-out captions never repeat a
/// caption string from an earlier split; a held-out scene whose captions
/// cannot avoid them is redrawn. Detection confidences are assigned last,
/// greedily choosing each scene's most confident region so that the running
/// fraction of mentions whose gold set holds it tracks `baseline_target`.
pub fn generate_scenes(config: &GeneratorConfig, spec: &WorldSpec) -> Result<SceneSplits> {
    let world = World::new(spec.clone(), config)?;
    let total = config.n_train + config.n_dev + config.n_test;
    let mut scenes = Vec::with_capacity(total);
    let mut seen: HashSet<String> = HashSet::new();
    let mut split_seen: HashSet<String> = HashSet::new();
    for id in 0..total as u64 {
        if id == config.n_train as u64 || id == (config.n_train + config.n_dev) as u64 {
            seen.extend(split_seen.drain());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id + 1);
        let mut drawn = None;
        for _ in 0..SCENE_ATTEMPTS {
            let regions = make_regions(&world, config, &mut rng);
            if let Some(captions) = fresh_captions(spec, &regions, config.captions_per_scene, &seen, &mut rng)? {
                drawn = Some((regions, captions));
                break;
            }
        }
        let (regions, captions) = drawn.ok_or_else(|| {
            Error::Config("caption space exhausted; held-out captions cannot avoid earlier splits".into())
        })?;
        split_seen.extend(captions.iter().map(Caption::text));
        scenes.push(GroundedScene { id, regions, captions });
    }
    calibrate_confidences(&mut scenes, config)?;

    let dev_start = config.n_train;
    let test_start = config.n_train + config.n_dev;
    let test = scenes.split_off(test_start);
    let dev = scenes.split_off(dev_start);
    Ok(SceneSplits {
        train: scenes,
        dev,
        test,
    })
}

fn calibrate_confidences(scenes: &mut [GroundedScene], config: &GeneratorConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let (mut hits, mut mentions) = (0usize, 0usize);
    for scene in scenes.iter_mut() {
        let n = scene.regions.len();
        let mut covers = vec![0usize; n];
        let mut m = 0;
        for c in &scene.captions {
            for e in &c.entities {
                m += 1;
                for &r in &e.regions {
                    covers[r] += 1;
                }
            }
        }
        let score = |c: usize| ((hits + c) as f64 / (mentions + m).max(1) as f64 - config.baseline_target).abs();
        let best = (0..n).map(|r| score(covers[r])).fold(f64::INFINITY, f64::min);
        let candidates: Vec<usize> = (0..n).filter(|&r| score(covers[r]) <= best + 1e-12).collect();
        let top = *candidates.choose(&mut rng).expect("at least one region");
        hits += covers[top];
        mentions += m;
        for (i, r) in scene.regions.iter_mut().enumerate() {
            r.region.confidence = if i == top {
                rng.random_range(0.85..0.99)
            } else {
                rng.random_range(0.05..0.8)
            };
        }
    }
    let rate = hits as f64 / mentions.max(1) as f64;
    if (rate - config.baseline_target).abs() > 0.05 {
        return Err(Error::Config(format!(
            "confidence calibration reached {rate:.3}, target {}",
            config.baseline_target
        )));
    }
    Ok(())
}

/// Fraction of entity mentions whose gold set contains the scene's most
/// confident region.
pub fn mention_baseline(scenes: &[GroundedScene]) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for s in scenes {
        let top = s.most_confident();
        for c in &s.captions {
            for e in &c.entities {
                n += 1;
                if e.regions.contains(&top) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / n.max(1) as f64
}
