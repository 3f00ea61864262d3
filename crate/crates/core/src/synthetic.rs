//! Attribute-tuple images and a templated triplet generator.
//!
//! Every image is a combination of one value per slot (shape, color, size,
//! background). A triplet changes one or more slots of the reference; the
//! modification text names only the new values of the changed slots, so the
//! text alone leaves the untouched slots open and the reference alone does
//! not reveal the change.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::RawImage;
use crate::tokenizer::Tokenizer;
use crate::types::{DatasetManifest, Grain, ImageRef, ModText, Split, Status, Triplet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSlot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub slots: Vec<AttributeSlot>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let slot = |name: &str, values: &[&str]| AttributeSlot {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            slots: vec![
                slot("shape", &["circle", "square", "triangle", "star", "heart"]),
                slot("color", &["red", "green", "blue", "yellow", "purple"]),
                slot("size", &["tiny", "small", "large", "huge"]),
                slot("background", &["grass", "sand", "snow", "water", "brick"]),
            ],
        }
    }
}

/// One value index per slot.
pub type Assignment = Vec<usize>;

impl AttributeSchema {
    pub fn total_values(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).sum()
    }

    pub fn image_count(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    fn offset(&self, slot: usize) -> usize {
        self.slots[..slot].iter().map(|s| s.values.len()).sum()
    }

    /// Mixed-radix index, first slot most significant.
    pub fn index_of(&self, a: &Assignment) -> usize {
        self.slots
            .iter()
            .zip(a)
            .fold(0, |acc, (slot, v)| acc * slot.values.len() + v)
    }

    pub fn assignment_of(&self, mut index: usize) -> Assignment {
        let mut out = vec![0; self.slots.len()];
        for (i, slot) in self.slots.iter().enumerate().rev() {
            out[i] = index % slot.values.len();
            index /= slot.values.len();
        }
        out
    }

    pub fn uri(&self, a: &Assignment) -> String {
        let parts: Vec<String> = self
            .slots
            .iter()
            .zip(a)
            .map(|(s, v)| format!("{}={}", s.name, s.values[*v]))
            .collect();
        format!("attr:{}", parts.join(";"))
    }

    pub fn image_id(&self, a: &Assignment) -> String {
        format!("img{:04}", self.index_of(a))
    }

    /// Parses `slot=value;slot=value`; every slot must be given exactly once.
    pub fn parse_assignment(&self, body: &str) -> Result<Assignment, String> {
        let mut out: Vec<Option<usize>> = vec![None; self.slots.len()];
        for pair in body.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected slot=value, got {pair:?}"))?;
            let si = self
                .slots
                .iter()
                .position(|s| s.name == k)
                .ok_or_else(|| format!("unknown slot {k:?}"))?;
            let vi = self.slots[si]
                .values
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| format!("unknown value {v:?} for slot {k:?}"))?;
            if out[si].replace(vi).is_some() {
                return Err(format!("slot {k:?} given twice"));
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| format!("slot {:?} missing", self.slots[i].name)))
            .collect()
    }

    /// One patch per slot: one-hot over the concatenated value list.
    pub fn encode(&self, a: &Assignment) -> RawImage {
        let width = self.total_values();
        let patches = a
            .iter()
            .enumerate()
            .map(|(slot, v)| {
                let mut p = vec![0.0; width];
                p[self.offset(slot) + v] = 1.0;
                p
            })
            .collect();
        RawImage { patches }
    }

    /// Flat index into the concatenated value list for a word, if it names a value.
    pub fn value_index(&self, word: &str) -> Option<usize> {
        self.slots.iter().enumerate().find_map(|(si, s)| {
            s.values.iter().position(|v| v == word).map(|vi| self.offset(si) + vi)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_triplets: usize,
    pub test_triplets: usize,
    /// Changed slots per triplet are drawn uniformly from 1..=max_changes.
    pub max_changes: usize,
    /// Size of the hard-negative subset attached to each test triplet.
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_triplets: 4000,
            test_triplets: 500,
            max_changes: 2,
            subset_size: 6,
            seed: 0,
        }
    }
}

pub struct SyntheticDataset {
    pub schema: AttributeSchema,
    /// Every image of the schema, in index order. This is the retrieval gallery.
    pub gallery: Vec<ImageRef>,
    pub manifest: DatasetManifest,
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

/// Clause texts for the changed slots. Slot order follows the default schema
/// (shape, color, size, background); other schemas fall back to a generic
/// `the object is <value>` clause per slot.
fn describe_changes(
    schema: &AttributeSchema,
    reference: &Assignment,
    target: &Assignment,
    changed: &[usize],
    rng: &mut ChaCha8Rng,
) -> String {
    let name = |slot: usize, a: &Assignment| schema.slots[slot].values[a[slot]].as_str();
    let slot_named = |n: &str| schema.slots.iter().position(|s| s.name == n);
    let (shape, color, size, bg) = (
        slot_named("shape"),
        slot_named("color"),
        slot_named("size"),
        slot_named("background"),
    );
    let mut clauses = Vec::new();
    let shape_changed = shape.is_some_and(|s| changed.contains(&s));
    let color_changed = color.is_some_and(|s| changed.contains(&s));
    if shape_changed && color_changed {
        let (s, c) = (shape.unwrap(), color.unwrap());
        let (old, new, col) = (name(s, reference), name(s, target), name(c, target));
        clauses.push(match rng.gen_range(0..2) {
            0 => format!("replace the {old} with {} {col} {new}", article(col)),
            _ => format!("make the object {} {col} {new}", article(col)),
        });
    } else if shape_changed {
        let s = shape.unwrap();
        let (old, new) = (name(s, reference), name(s, target));
        clauses.push(match rng.gen_range(0..3) {
            0 => format!("replace the {old} with {} {new}", article(new)),
            1 => format!("make the object {} {new}", article(new)),
            _ => format!("change the {old} into {} {new}", article(new)),
        });
    } else if color_changed {
        let col = name(color.unwrap(), target);
        clauses.push(match rng.gen_range(0..3) {
            0 => format!("make the object {col}"),
            1 => format!("the object is {col}"),
            _ => format!("paint the object {col}"),
        });
    }
    for &slot in changed {
        if Some(slot) == shape || Some(slot) == color {
            continue;
        }
        let value = name(slot, target);
        let clause = if Some(slot) == size {
            match rng.gen_range(0..3) {
                0 => format!("the object is {value}"),
                1 => format!("make it {value}"),
                _ => format!("the object should be {value}"),
            }
        } else if Some(slot) == bg {
            match rng.gen_range(0..3) {
                0 => format!("place the object on {value}"),
                1 => format!("the object is on {value}"),
                _ => format!("the background is {value}"),
            }
        } else {
            format!("the object is {value}")
        };
        clauses.push(clause);
    }
    let joiner = if rng.gen_bool(0.5) { " and " } else { ", " };
    let mut text = clauses.join(joiner);
    if let Some(first) = text.get(0..1) {
        text.replace_range(0..1, &first.to_uppercase());
    }
    text.push('.');
    text
}

/// Generates the attribute-tuple dataset. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig, schema: &AttributeSchema, tokenizer: &dyn Tokenizer) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_images = schema.image_count();
    let mk_ref = |a: &Assignment, split: Split| ImageRef {
        id: schema.image_id(a),
        uri: schema.uri(a),
        split,
    };
    let gallery: Vec<ImageRef> = (0..n_images)
        .map(|i| mk_ref(&schema.assignment_of(i), Split::Test))
        .collect();
    let max_changes = cfg.max_changes.clamp(1, schema.slots.len());

    let mut triplets = Vec::with_capacity(cfg.train_triplets + cfg.test_triplets);
    for n in 0..cfg.train_triplets + cfg.test_triplets {
        let split = if n < cfg.train_triplets { Split::Train } else { Split::Test };
        let reference = schema.assignment_of(rng.gen_range(0..n_images));
        let m = rng.gen_range(1..=max_changes);
        let mut slots: Vec<usize> = (0..schema.slots.len()).collect();
        slots.shuffle(&mut rng);
        let mut changed: Vec<usize> = slots[..m].to_vec();
        changed.sort_unstable();
        let mut target = reference.clone();
        for &s in &changed {
            let k = schema.slots[s].values.len();
            target[s] = (reference[s] + rng.gen_range(1..k)) % k;
        }
        let text = describe_changes(schema, &reference, &target, &changed, &mut rng);
        let subset_ids = (split == Split::Test).then(|| hard_negative_subset(schema, &target, cfg.subset_size, &mut rng));
        let mut provenance = BTreeMap::new();
        provenance.insert("source".into(), "synthetic".into());
        provenance.insert(
            "changed".into(),
            changed.iter().map(|s| schema.slots[*s].name.clone()).collect::<Vec<_>>().join(","),
        );
        triplets.push(Triplet {
            id: format!("{}{:05}", split.as_str(), n),
            reference: mk_ref(&reference, split),
            target: mk_ref(&target, split),
            mod_text: ModText::new(text, Grain::Fine, tokenizer),
            eval: None,
            status: Status::Finalized,
            subset_ids,
            provenance,
        });
    }
    SyntheticDataset {
        schema: schema.clone(),
        gallery,
        manifest: DatasetManifest::new("synthetic", triplets),
    }
}

/// The target plus images differing from it in exactly one slot.
fn hard_negative_subset(schema: &AttributeSchema, target: &Assignment, size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut neighbours = Vec::new();
    for (s, slot) in schema.slots.iter().enumerate() {
        for v in 0..slot.values.len() {
            if v != target[s] {
                let mut a = target.clone();
                a[s] = v;
                neighbours.push(schema.image_id(&a));
            }
        }
    }
    neighbours.shuffle(rng);
    neighbours.truncate(size.saturating_sub(1));
    let mut subset = vec![schema.image_id(target)];
    subset.extend(neighbours);
    subset.sort();
    subset
}
