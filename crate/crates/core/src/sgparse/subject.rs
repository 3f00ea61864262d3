//! Subject-centric reorganization of a scene graph.
//!
//! Subjects are the entities that own relations, plus every entity that takes
//! part in no relation. A subject's neighborhood holds its own attribute
//! tokens followed by one object token per relation it owns; the object token
//! is `object + predicate`. Attributes of entities that only ever appear as
//! objects are folded into the object token: `object + attrs + predicate`.

use std::collections::HashMap;

use super::SceneGraph;

/// Vector types usable as graph tokens.
pub trait TokenVector: Clone {
    type Error;
    fn try_add(&self, other: &Self) -> Result<Self, Self::Error>;
}

impl TokenVector for Vec<f64> {
    type Error = String;

    fn try_add(&self, other: &Self) -> Result<Self, String> {
        if self.len() != other.len() {
            return Err(format!("dimension mismatch: {} vs {}", self.len(), other.len()));
        }
        Ok(self.iter().zip(other).map(|(a, b)| a + b).collect())
    }
}

/// One vector per entity, attribute and predicate, plus the whole-sentence
/// token used when the graph has no subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTokenTable<V> {
    pub entities: Vec<V>,
    pub attributes: Vec<Vec<V>>,
    pub predicates: Vec<V>,
    pub sentence: V,
}

impl<V> GraphTokenTable<V> {
    pub fn len(&self) -> usize {
        self.entities.len() + self.attributes.iter().map(Vec::len).sum::<usize>() + self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every element vector, in entity, attribute, predicate order.
    pub fn elements(&self) -> impl Iterator<Item = &V> {
        self.entities
            .iter()
            .chain(self.attributes.iter().flatten())
            .chain(self.predicates.iter())
    }
}

/// Encodes each graph element's surface string independently. Equal strings
/// are encoded once, so they always share a vector.
pub fn embed_graph<V: Clone, E>(
    g: &SceneGraph,
    mut encode: impl FnMut(&str) -> Result<V, E>,
) -> Result<GraphTokenTable<V>, E> {
    let mut cache: HashMap<String, V> = HashMap::new();
    let mut lookup = |s: String| -> Result<V, E> {
        if let Some(v) = cache.get(&s) {
            return Ok(v.clone());
        }
        let v = encode(&s)?;
        cache.insert(s, v.clone());
        Ok(v)
    };
    let entities = g
        .entities
        .iter()
        .map(|e| lookup(e.name.clone()))
        .collect::<Result<Vec<_>, E>>()?;
    let attributes = g
        .attributes
        .iter()
        .map(|list| list.iter().map(|a| lookup(a.surface())).collect::<Result<Vec<_>, E>>())
        .collect::<Result<Vec<_>, E>>()?;
    let predicates = g
        .relations
        .iter()
        .map(|r| lookup(r.predicate.clone()))
        .collect::<Result<Vec<_>, E>>()?;
    let sentence = lookup(g.text.clone())?;
    Ok(GraphTokenTable {
        entities,
        attributes,
        predicates,
        sentence,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Neighbor {
    Attribute { entity: usize, index: usize },
    Object { relation: usize, folded: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectNode {
    pub entity: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Structure only; see [`to_subject_centric`] for the materialized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectCentricGraph {
    pub subjects: Vec<SubjectNode>,
}

impl SubjectCentricGraph {
    pub fn build(g: &SceneGraph) -> Self {
        let n = g.entities.len();
        let mut is_subject = vec![false; n];
        let mut in_relation = vec![false; n];
        for r in &g.relations {
            is_subject[r.subject] = true;
            in_relation[r.subject] = true;
            in_relation[r.object] = true;
        }
        let subjects = (0..n)
            .filter(|&e| is_subject[e] || !in_relation[e])
            .map(|e| {
                let mut neighbors: Vec<Neighbor> = (0..g.attributes[e].len())
                    .map(|index| Neighbor::Attribute { entity: e, index })
                    .collect();
                for (ri, r) in g.relations.iter().enumerate().filter(|(_, r)| r.subject == e) {
                    let folded = if is_subject[r.object] {
                        Vec::new()
                    } else {
                        (0..g.attributes[r.object].len()).collect()
                    };
                    neighbors.push(Neighbor::Object { relation: ri, folded });
                }
                SubjectNode { entity: e, neighbors }
            })
            .collect();
        Self { subjects }
    }

    pub fn attribute_token_count(&self) -> usize {
        self.tokens_matching(|n| matches!(n, Neighbor::Attribute { .. }))
    }

    pub fn object_token_count(&self) -> usize {
        self.tokens_matching(|n| matches!(n, Neighbor::Object { .. }))
    }

    fn tokens_matching(&self, f: impl Fn(&Neighbor) -> bool) -> usize {
        self.subjects.iter().flat_map(|s| &s.neighbors).filter(|n| f(n)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedSubject<V> {
    /// `None` for the whole-sentence pseudo-subject.
    pub entity: Option<usize>,
    pub token: V,
    pub neighbors: Vec<V>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCentricTokens<V> {
    pub subjects: Vec<MaterializedSubject<V>>,
}

impl<V> SubjectCentricTokens<V> {
    pub fn subject_count(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_pseudo(&self) -> bool {
        self.subjects.len() == 1 && self.subjects[0].entity.is_none()
    }
}

/// Materializes the subject-centric graph with vectors from `table`. A graph
/// without subjects becomes a single pseudo-subject carrying the sentence
/// token and an empty neighborhood.
pub fn to_subject_centric<V: TokenVector>(
    g: &SceneGraph,
    table: &GraphTokenTable<V>,
) -> Result<SubjectCentricTokens<V>, V::Error> {
    let structure = SubjectCentricGraph::build(g);
    if structure.subjects.is_empty() {
        return Ok(SubjectCentricTokens {
            subjects: vec![MaterializedSubject {
                entity: None,
                token: table.sentence.clone(),
                neighbors: Vec::new(),
            }],
        });
    }
    let mut subjects = Vec::with_capacity(structure.subjects.len());
    for node in &structure.subjects {
        let mut neighbors = Vec::with_capacity(node.neighbors.len());
        for n in &node.neighbors {
            let v = match n {
                Neighbor::Attribute { entity, index } => table.attributes[*entity][*index].clone(),
                Neighbor::Object { relation, folded } => {
                    let r = &g.relations[*relation];
                    let mut v = table.entities[r.object].clone();
                    for a in folded {
                        v = v.try_add(&table.attributes[r.object][*a])?;
                    }
                    v.try_add(&table.predicates[*relation])?
                }
            };
            neighbors.push(v);
        }
        subjects.push(MaterializedSubject {
            entity: Some(node.entity),
            token: table.entities[node.entity].clone(),
            neighbors,
        });
    }
    Ok(SubjectCentricTokens { subjects })
}
