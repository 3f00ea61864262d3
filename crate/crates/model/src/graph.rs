//! Batches subject-centric graphs into dense tensors.
//!
//! Every graph element is a string encoded by the text encoder. A neighbor
//! token is a sum of element vectors (object + folded attributes +
//! predicate), so each token is described by a multiset of string ids and
//! materialized with one coefficient-matrix product.

use std::collections::HashMap;
use std::convert::Infallible;

use candle_core::{Device, Tensor};
use cirlab_core::sgparse::{embed_graph, to_subject_centric, SceneGraph, TokenVector};

use crate::nn::Result;

/// String ids whose vectors are summed.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Terms(Vec<usize>);

impl TokenVector for Terms {
    type Error = Infallible;

    fn try_add(&self, other: &Self) -> std::result::Result<Self, Infallible> {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Ok(Terms(v))
    }
}

#[derive(Debug, Default)]
struct Interner {
    strings: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn id(&mut self, s: &str) -> usize {
        if let Some(i) = self.index.get(s) {
            return *i;
        }
        let i = self.strings.len();
        self.strings.push(s.to_string());
        self.index.insert(s.to_string(), i);
        i
    }
}

/// The structural part of a batch of graphs, independent of any parameters.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// Distinct strings to encode; row order of the element table.
    pub strings: Vec<String>,
    /// Index into `strings` of each item's full text.
    pub text_index: Vec<usize>,
    /// Per subject: self token followed by neighbor tokens.
    nodes: Vec<Vec<Terms>>,
    /// Owning item of each subject.
    node_item: Vec<usize>,
    /// Per item: every graph element (or the sentence when there are none).
    element_terms: Vec<Terms>,
    pub max_entities: usize,
}

impl GraphBatch {
    /// `texts[i]` is the modification text of `graphs[i]`. Items with more
    /// than `max_entities` subjects keep the first `max_entities`.
    pub fn new(graphs: &[&SceneGraph], texts: &[&str], max_entities: usize) -> Self {
        assert_eq!(graphs.len(), texts.len());
        assert!(max_entities >= 1);
        let mut interner = Interner::default();
        let text_index = texts.iter().map(|t| interner.id(t)).collect();
        let mut nodes = Vec::new();
        let mut node_item = Vec::new();
        let mut element_terms = Vec::new();
        for (item, (g, text)) in graphs.iter().zip(texts).enumerate() {
            let table = embed_graph(g, |s| Ok::<_, Infallible>(Terms(vec![interner.id(s)]))).unwrap();
            let mut table = table;
            table.sentence = Terms(vec![interner.id(text)]);
            let sc = to_subject_centric(g, &table).unwrap();
            for subject in sc.subjects.into_iter().take(max_entities) {
                let mut tokens = vec![subject.token];
                tokens.extend(subject.neighbors);
                nodes.push(tokens);
                node_item.push(item);
            }
            let all: Vec<usize> = table.elements().flat_map(|t| t.0.iter().copied()).collect();
            element_terms.push(if all.is_empty() { table.sentence.clone() } else { Terms(all) });
        }
        Self {
            strings: interner.strings,
            text_index,
            nodes,
            node_item,
            element_terms,
            max_entities,
        }
    }

    pub fn items(&self) -> usize {
        self.text_index.len()
    }

    pub fn subject_count(&self) -> usize {
        self.nodes.len()
    }

    /// Subjects kept per item.
    pub fn subjects_per_item(&self) -> Vec<usize> {
        let mut out = vec![0; self.items()];
        for i in &self.node_item {
            out[*i] += 1;
        }
        out
    }

    /// Longest candidate list (self plus neighbors).
    pub fn width(&self) -> usize {
        self.nodes.iter().map(Vec::len).max().unwrap_or(1)
    }

    /// `[N, M, D_T]` candidate tokens per subject (self first) and the `[N, M]`
    /// validity mask, from the `[U, D_T]` element table.
    pub fn node_tokens(&self, table: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, m, u) = (self.nodes.len(), self.width(), self.strings.len());
        let mut coef = vec![0.0f64; n * m * u];
        let mut mask = vec![0.0f64; n * m];
        for (i, tokens) in self.nodes.iter().enumerate() {
            for (j, terms) in tokens.iter().enumerate() {
                mask[i * m + j] = 1.0;
                for s in &terms.0 {
                    coef[(i * m + j) * u + s] += 1.0;
                }
            }
        }
        let dev = table.device();
        let d = table.dim(1)?;
        let coef = Tensor::from_vec(coef, (n * m, u), dev)?;
        let x = coef.matmul(table)?.reshape((n, m, d))?;
        Ok((x, Tensor::from_vec(mask, (n, m), dev)?))
    }

    /// Scatters `[N, D_T]` subject rows into `[B, E_max, D_T]` with a mask.
    pub fn scatter_entities(&self, rows: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, e, n) = (self.items(), self.max_entities, self.nodes.len());
        let mut coef = vec![0.0f64; b * e * n];
        let mut mask = vec![0.0f64; b * e];
        let mut slot = vec![0usize; b];
        for (node, item) in self.node_item.iter().enumerate() {
            let k = slot[*item];
            slot[*item] += 1;
            coef[(item * e + k) * n + node] = 1.0;
            mask[item * e + k] = 1.0;
        }
        let dev = rows.device();
        let d = rows.dim(1)?;
        let coef = Tensor::from_vec(coef, (b * e, n), dev)?;
        Ok((coef.matmul(rows)?.reshape((b, e, d))?, Tensor::from_vec(mask, (b, e), dev)?))
    }

    /// `[B, D_T]` mean over every element token of each item's graph.
    pub fn mean_element_tokens(&self, table: &Tensor) -> Result<Tensor> {
        let (b, u) = (self.items(), self.strings.len());
        let mut coef = vec![0.0f64; b * u];
        for (i, terms) in self.element_terms.iter().enumerate() {
            let w = 1.0 / terms.0.len() as f64;
            for s in &terms.0 {
                coef[i * u + s] += w;
            }
        }
        Ok(Tensor::from_vec(coef, (b, u), table.device())?.matmul(table)?)
    }

    /// Row selector for the items' full texts.
    pub fn text_rows(&self, dev: &Device) -> Result<Tensor> {
        let ids: Vec<u32> = self.text_index.iter().map(|i| *i as u32).collect();
        Ok(Tensor::from_vec(ids, self.items(), dev)?)
    }
}
