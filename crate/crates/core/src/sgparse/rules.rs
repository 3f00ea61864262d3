//! The rule-based reference parser. The grammar is written up in
//! `docs/grammar.md`; keep the two in sync.

use super::{Attribute, AttrContext, ParserBackend, RelationKind, SceneGraph, SgError};

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "its", "their", "his",
    "her", "my", "your", "our", "another",
];
const PRONOUNS: &[&str] = &["it", "they", "them", "he", "she", "him", "itself", "one"];
const COPULAS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "become", "becomes", "look", "looks", "appear", "appears",
    "seem", "seems", "remain", "remains", "stay", "stays", "get", "gets",
];
const AUXILIARIES: &[&str] = &[
    "should", "must", "can", "could", "would", "will", "may", "might", "shall", "do", "does", "please", "also",
    "now", "instead", "just", "only", "very", "slightly", "more", "less", "much", "too", "so",
];
const NEGATIONS: &[&str] = &["not", "no", "never"];
const CHANGE_VERBS: &[&str] = &[
    "change", "turn", "transform", "convert", "switch", "swap", "replace", "make", "paint", "alter", "modify",
    "adjust", "recolor",
];
const ADD_VERBS: &[&str] = &["add", "put", "place", "include", "insert", "attach"];
const REMOVE_VERBS: &[&str] = &["remove", "delete", "erase", "drop", "eliminate", "take"];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "while", "then", "whereas"];
/// Markers that introduce the new state inside a change frame.
const CHANGE_MARKERS: &[&str] = &["to", "into", "with", "for", "by", "as"];
const MULTI_PREPOSITIONS: &[&[&str]] = &[
    &["in", "front", "of"],
    &["on", "top", "of"],
    &["instead", "of"],
    &["next", "to"],
    &["close", "to"],
    &["left", "of"],
    &["right", "of"],
    &["away", "from"],
];
const PREPOSITIONS: &[&str] = &[
    "on", "in", "under", "above", "below", "behind", "beside", "near", "over", "inside", "outside", "at", "by",
    "with", "without", "of", "from", "into", "onto", "to", "across", "along", "around", "between", "against",
    "toward", "towards", "beneath", "underneath", "among", "through", "off", "out", "away", "for", "as",
];
const RELATION_VERBS: &[&str] = &[
    "has", "have", "holds", "hold", "wears", "wear", "carries", "carry", "contains", "contain", "shows", "show",
    "features", "feature", "rides", "ride", "eats", "eat", "touches", "touch", "covers", "cover", "faces", "face",
    "sits", "sit", "stands", "stand", "lies", "lie", "plays", "play", "uses", "use", "pulls", "pull", "pushes",
    "push", "watches", "watch",
];
const ADJECTIVES: &[&str] = &[
    // color
    "red", "green", "blue", "yellow", "purple", "pink", "orange", "black", "white", "gray", "grey", "brown",
    "beige", "golden", "gold", "silver", "navy", "dark", "light", "bright", "pale", "colorful", "multicolored",
    "teal", "maroon", "cream", "khaki", "turquoise",
    // size and shape
    "tiny", "small", "little", "large", "big", "huge", "tall", "short", "long", "wide", "narrow", "thin", "thick",
    "giant", "medium", "high", "low", "deep", "shallow", "oval", "flat",
    // surface and pattern
    "striped", "plain", "floral", "dotted", "checkered", "patterned", "solid", "shiny", "matte", "sleeveless",
    "transparent", "glossy", "fuzzy", "furry", "smooth", "rough", "soft", "hard",
    // material
    "wooden", "metal", "metallic", "cotton", "leather", "denim", "silk", "woolen", "plastic", "glass",
    // fit and style
    "loose", "tight", "fitted", "casual", "formal", "modern", "vintage", "elegant", "simple", "fancy", "sporty",
    "cropped", "baggy",
    // state and quantity
    "new", "old", "young", "same", "different", "similar", "open", "closed", "empty", "full", "wet", "dry",
    "clean", "dirty", "sunny", "cloudy", "many", "few", "several", "single", "double", "both", "other", "two",
    "three", "four", "five", "six", "seven", "eight", "nine", "ten", "left", "right", "front", "back", "upper",
    "lower", "outdoor", "indoor", "absent",
];
const ADJECTIVE_SUFFIXES: &[&str] = &["ful", "ous", "ive", "less", "ish", "ic", "ed"];
/// `-ing` words that are nouns.
const ING_NOUNS: &[&str] = &[
    "building", "ceiling", "clothing", "railing", "painting", "string", "ring", "king", "wing", "thing", "evening",
    "morning", "clothing", "lighting", "bedding", "pudding", "stocking", "earring", "sibling", "ending", "opening",
    "setting", "wedding", "drawing", "swing", "spring", "sling", "lining", "trimming", "padding", "sing",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Det,
    Pron,
    Cop,
    Aux,
    Neg,
    Change,
    Add,
    Remove,
    Conj,
    Prep,
    RelVerb,
    Adj,
    Noun,
    Punct,
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    class: Class,
}

fn classify(w: &str) -> Class {
    let is = |list: &[&str]| list.contains(&w);
    if w.chars().all(|c| !c.is_alphanumeric()) {
        Class::Punct
    } else if is(DETERMINERS) {
        Class::Det
    } else if is(PRONOUNS) {
        Class::Pron
    } else if is(COPULAS) {
        Class::Cop
    } else if is(AUXILIARIES) {
        Class::Aux
    } else if is(NEGATIONS) {
        Class::Neg
    } else if is(CHANGE_VERBS) {
        Class::Change
    } else if is(ADD_VERBS) {
        Class::Add
    } else if is(REMOVE_VERBS) {
        Class::Remove
    } else if is(CONJUNCTIONS) {
        Class::Conj
    } else if is(PREPOSITIONS) {
        Class::Prep
    } else if is(RELATION_VERBS) {
        Class::RelVerb
    } else if is(ADJECTIVES) || w.chars().all(|c| c.is_ascii_digit()) {
        Class::Adj
    } else if w.len() >= 5 && w.ends_with("ing") && !is(ING_NOUNS) {
        Class::RelVerb
    } else if w.len() >= 5 && ADJECTIVE_SUFFIXES.iter().any(|s| w.ends_with(s)) {
        Class::Adj
    } else {
        Class::Noun
    }
}

fn lex(text: &str) -> Vec<Word> {
    let lower = text.to_lowercase();
    let mut raw: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() || ((ch == '-' || ch == '\'') && !cur.is_empty()) {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                raw.push(std::mem::take(&mut cur));
            }
            if matches!(ch, '.' | ',' | ';' | ':' | '!' | '?') {
                raw.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        raw.push(cur);
    }
    // strip possessive/contraction tails: "dog's" -> "dog"
    let raw: Vec<String> = raw
        .into_iter()
        .map(|w| w.trim_end_matches(['-', '\'']).trim_end_matches("'s").to_string())
        .filter(|w| !w.is_empty())
        .collect();

    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        if let Some(mp) = MULTI_PREPOSITIONS
            .iter()
            .find(|mp| raw.len() >= i + mp.len() && mp.iter().zip(&raw[i..]).all(|(a, b)| a == b))
        {
            out.push(Word {
                text: mp.join(" "),
                class: Class::Prep,
            });
            i += mp.len();
            continue;
        }
        out.push(Word {
            text: raw[i].clone(),
            class: classify(&raw[i]),
        });
        i += 1;
    }
    out
}

/// Splits at sentence punctuation, commas, and conjunctions that do not join
/// two adjectives.
fn clauses(words: Vec<Word>) -> Vec<Vec<Word>> {
    let mut out = vec![Vec::new()];
    for i in 0..words.len() {
        let w = &words[i];
        let split = match w.class {
            Class::Punct => true,
            Class::Conj => {
                let prev_adj = i > 0 && words[i - 1].class == Class::Adj;
                let next_adj = words.get(i + 1).is_some_and(|n| n.class == Class::Adj);
                if prev_adj && next_adj {
                    continue;
                }
                true
            }
            _ => false,
        };
        if split {
            if !out.last().unwrap().is_empty() {
                out.push(Vec::new());
            }
        } else {
            out.last_mut().unwrap().push(w.clone());
        }
    }
    out.retain(|c| !c.is_empty());
    out
}

#[derive(Debug, Clone, Default)]
struct NounPhrase {
    adjectives: Vec<String>,
    head: Option<String>,
}

#[derive(Debug, Clone)]
enum Item {
    Np(NounPhrase),
    Pred(String),
    Cop,
    Neg,
    Change,
    Add,
    Remove,
}

/// Groups a clause into noun phrases and predicate chunks. A noun phrase is
/// determiners, adjectives and then nouns; an adjective after the head opens
/// a new phrase.
fn chunk(clause: &[Word]) -> Vec<Item> {
    let mut items = Vec::new();
    let mut np: Option<NounPhrase> = None;
    let mut pred: Vec<String> = Vec::new();
    let flush_np = |np: &mut Option<NounPhrase>, items: &mut Vec<Item>| {
        if let Some(p) = np.take() {
            if p.head.is_some() || !p.adjectives.is_empty() {
                items.push(Item::Np(p));
            }
        }
    };
    let flush_pred = |pred: &mut Vec<String>, items: &mut Vec<Item>| {
        if !pred.is_empty() {
            items.push(Item::Pred(pred.join(" ")));
            pred.clear();
        }
    };
    for w in clause {
        match w.class {
            Class::Det | Class::Adj | Class::Noun | Class::Pron => {
                flush_pred(&mut pred, &mut items);
                let head_done = np.as_ref().is_some_and(|p| p.head.is_some());
                let opens_new = head_done && matches!(w.class, Class::Det | Class::Adj | Class::Pron);
                if opens_new {
                    flush_np(&mut np, &mut items);
                }
                let p = np.get_or_insert_with(NounPhrase::default);
                match w.class {
                    Class::Adj => p.adjectives.push(w.text.clone()),
                    Class::Noun | Class::Pron => {
                        p.head = Some(match p.head.take() {
                            Some(h) => format!("{h} {}", w.text),
                            None => w.text.clone(),
                        })
                    }
                    _ => {}
                }
            }
            Class::Prep | Class::RelVerb => {
                flush_np(&mut np, &mut items);
                pred.push(w.text.clone());
            }
            other => {
                flush_np(&mut np, &mut items);
                flush_pred(&mut pred, &mut items);
                match other {
                    Class::Cop => items.push(Item::Cop),
                    Class::Neg => items.push(Item::Neg),
                    Class::Change => items.push(Item::Change),
                    Class::Add => items.push(Item::Add),
                    Class::Remove => items.push(Item::Remove),
                    _ => {}
                }
            }
        }
    }
    flush_np(&mut np, &mut items);
    flush_pred(&mut pred, &mut items);
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Describe,
    Change,
    Add,
    Remove,
}

struct ClauseState<'g> {
    g: &'g mut SceneGraph,
    frame: Frame,
    subject: Option<usize>,
    last_entity: Option<usize>,
    pending_pred: Option<String>,
    after_copula: bool,
    negated: bool,
    /// Change frame: the marker (`to`, `into`, ...) has been seen.
    expect_target: bool,
    orphan_adjectives: Vec<String>,
}

impl<'g> ClauseState<'g> {
    fn new(g: &'g mut SceneGraph) -> Self {
        Self {
            g,
            frame: Frame::Describe,
            subject: None,
            last_entity: None,
            pending_pred: None,
            after_copula: false,
            negated: false,
            expect_target: false,
            orphan_adjectives: Vec::new(),
        }
    }

    fn context(&self) -> AttrContext {
        if self.negated {
            AttrContext::Removed
        } else {
            AttrContext::Target
        }
    }

    fn attach(&mut self, entity: usize, adjectives: &[String], context: AttrContext) {
        for a in adjectives {
            self.g.add_attribute(
                entity,
                Attribute {
                    value: a.clone(),
                    context,
                },
            );
        }
    }

    /// Adds the phrase head as an entity with its adjectives.
    fn entity_from(&mut self, np: &NounPhrase, head: &str, context: AttrContext) -> usize {
        let e = self.g.entity(head);
        let orphans = std::mem::take(&mut self.orphan_adjectives);
        self.attach(e, &orphans, context);
        self.attach(e, &np.adjectives, context);
        self.last_entity = Some(e);
        e
    }

    fn predicate_kind(&self, pred: &str) -> RelationKind {
        if self.negated || pred == "without" {
            RelationKind::Removal
        } else {
            RelationKind::Relation
        }
    }

    fn noun_phrase(&mut self, np: NounPhrase) {
        match self.frame {
            Frame::Change => self.change_np(np),
            Frame::Add => self.add_np(np),
            Frame::Remove => self.remove_np(np),
            Frame::Describe => self.describe_np(np),
        }
        self.negated = false;
    }

    fn describe_np(&mut self, np: NounPhrase) {
        let ctx = self.context();
        let Some(head) = np.head.clone() else {
            // adjective-only phrase: predicative, or a modifier of the latest entity
            let owner = if self.after_copula { self.subject } else { self.last_entity.or(self.subject) };
            match owner {
                Some(e) => self.attach(e, &np.adjectives, ctx),
                None => self.orphan_adjectives.extend(np.adjectives),
            }
            self.after_copula = false;
            return;
        };
        if let Some(pred) = self.pending_pred.take() {
            let kind = self.predicate_kind(&pred);
            let object = self.entity_from(&np, &head, AttrContext::Target);
            match self.subject {
                Some(s) if s != object => self.g.add_relation(s, &pred, object, kind),
                Some(_) => {}
                None => self.subject = Some(object),
            }
        } else if self.after_copula && self.subject.is_some() {
            // predicate nominal: "the background is sand"
            let s = self.subject.unwrap();
            let mut values = np.adjectives.clone();
            values.push(head);
            self.attach(s, &values, ctx);
            self.after_copula = false;
        } else if self.negated && self.subject.is_some() {
            let s = self.subject.unwrap();
            let object = self.entity_from(&np, &head, AttrContext::Target);
            if s != object {
                self.g.add_relation(s, "without", object, RelationKind::Removal);
            }
        } else {
            let e = self.entity_from(&np, &head, ctx);
            if self.negated {
                self.g.add_attribute(e, Attribute::target("absent"));
            }
            self.subject = Some(e);
        }
    }

    fn change_np(&mut self, np: NounPhrase) {
        let Some(source) = self.subject else {
            // first phrase is the thing being changed; its adjectives describe the old state
            match np.head.clone() {
                Some(head) => {
                    let e = self.entity_from(&np, &head, AttrContext::Removed);
                    self.subject = Some(e);
                }
                None => self.orphan_adjectives.extend(np.adjectives),
            }
            return;
        };
        if let Some(pred) = self.pending_pred.take() {
            // ordinary relation inside the source phrase: "the color of the dress"
            if let Some(head) = np.head.clone() {
                let o = self.entity_from(&np, &head, AttrContext::Target);
                if o != source {
                    self.g.add_relation(source, &pred, o, RelationKind::Relation);
                }
                return;
            }
        }
        match np.head.clone() {
            Some(head) if self.g.entities[source].name != head => {
                let new = self.entity_from(&np, &head, AttrContext::Target);
                self.g.add_relation(new, "instead of", source, RelationKind::Replacement);
                self.subject = Some(new);
            }
            _ => {
                let ctx = self.context();
                self.attach(source, &np.adjectives, ctx);
                self.last_entity = Some(source);
            }
        }
        self.expect_target = false;
    }

    fn add_np(&mut self, np: NounPhrase) {
        let Some(head) = np.head.clone() else {
            if let Some(e) = self.last_entity {
                self.attach(e, &np.adjectives, AttrContext::Target);
            }
            return;
        };
        match (self.subject, self.pending_pred.take()) {
            (Some(added), Some(pred)) => {
                let place = self.entity_from(&np, &head, AttrContext::Target);
                if place == added {
                    return;
                }
                if pred == "to" {
                    self.g.add_relation(place, "with", added, RelationKind::Addition);
                } else {
                    self.g.add_relation(added, &pred, place, RelationKind::Addition);
                }
            }
            _ => {
                let e = self.entity_from(&np, &head, AttrContext::Target);
                self.subject = Some(e);
            }
        }
    }

    fn remove_np(&mut self, np: NounPhrase) {
        let Some(head) = np.head.clone() else {
            return;
        };
        match (self.subject, self.pending_pred.take()) {
            (Some(removed), Some(pred)) if pred == "from" || pred == "off" || pred == "away from" => {
                let holder = self.entity_from(&np, &head, AttrContext::Target);
                if holder != removed {
                    // the removed thing no longer needs its absence marker
                    self.g.attributes[removed].retain(|a| a.value != "absent");
                    self.g.add_relation(holder, "without", removed, RelationKind::Removal);
                }
            }
            _ => {
                let e = self.entity_from(&np, &head, AttrContext::Target);
                self.g.add_attribute(e, Attribute::target("absent"));
                self.subject = Some(e);
            }
        }
    }

    fn run(mut self, items: Vec<Item>) {
        for item in items {
            match item {
                Item::Change => {
                    self.frame = Frame::Change;
                    self.subject = None;
                }
                Item::Add => {
                    self.frame = Frame::Add;
                    self.subject = None;
                }
                Item::Remove => {
                    self.frame = Frame::Remove;
                    self.subject = None;
                }
                Item::Cop => self.after_copula = true,
                Item::Neg => self.negated = true,
                Item::Pred(p) => {
                    self.after_copula = false;
                    if self.frame == Frame::Change
                        && self.subject.is_some()
                        && CHANGE_MARKERS.contains(&p.as_str())
                    {
                        self.expect_target = true;
                    } else if self.frame == Frame::Remove && (p == "out" || p == "away") {
                        // "take out the trash"
                    } else {
                        self.pending_pred = Some(p);
                    }
                }
                Item::Np(np) => self.noun_phrase(np),
            }
        }
    }
}

/// Deterministic reference parser. Reentrant and allocation-only.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleParser;

impl RuleParser {
    pub fn parse(&self, text: &str) -> SceneGraph {
        let mut g = SceneGraph::new(text);
        for clause in clauses(lex(text)) {
            ClauseState::new(&mut g).run(chunk(&clause));
        }
        g.collapse();
        g
    }
}

impl ParserBackend for RuleParser {
    fn name(&self) -> &str {
        "rule"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn parse_text(&self, text: &str) -> Result<SceneGraph, SgError> {
        Ok(self.parse(text))
    }
}
