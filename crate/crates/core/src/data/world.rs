use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const SEP: &str = "[SEP]";
pub const TRUE: &str = "true";
pub const FALSE: &str = "false";

/// One position of a surface template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Entity,
    Word(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSize {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_answers: usize,
    pub templates_per_relation: usize,
}

/// Dense token vocabulary; ids are `0..len()` in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    index: IndexMap<String, u32>,
}

impl Vocab {
    fn push(&mut self, token: String) -> u32 {
        let id = self.index.len() as u32;
        let prev = self.index.insert(token, id);
        debug_assert!(prev.is_none(), "duplicate vocabulary token");
        id
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownTokenName(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.index
            .get_index(id as usize)
            .map(|(s, _)| s.as_str())
            .ok_or(Error::UnknownToken(id))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Vocab::default();
        for t in tokens {
            v.push(t);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.index.into_keys().collect()
    }
}

/// A closed world of `(entity, relation) -> answer` facts with paraphrase
/// templates per relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub size: WorldSize,
    /// Answer class per fact, indexed by `entity * n_relations + relation`.
    pub truth: Vec<u32>,
    /// `templates[relation][template]` is a slot pattern.
    pub templates: Vec<Vec<Vec<Slot>>>,
    pub vocab: Vocab,
}

impl FactWorld {
    pub fn n_facts(&self) -> usize {
        self.size.n_entities * self.size.n_relations
    }

    pub fn entity_relation(&self, fact_id: usize) -> (usize, usize) {
        (fact_id / self.size.n_relations, fact_id % self.size.n_relations)
    }

    pub fn sep(&self) -> u32 {
        self.vocab.id(SEP).expect("world vocabulary has a separator")
    }

    pub fn answer_token(&self, answer: u32) -> Result<u32> {
        self.vocab.id(&format!("ans{answer}"))
    }

    pub fn entity_token(&self, entity: usize) -> Result<u32> {
        self.vocab.id(&format!("ent{entity}"))
    }

    /// Longest rendering over all templates, in tokens.
    pub fn max_len(&self) -> usize {
        self.templates
            .iter()
            .flatten()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("world serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Samples a world: answers i.i.d. uniform per fact, and for each relation
/// a set of templates built from relation-specific words.
pub fn generate_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_answers: usize,
    templates_per_relation: usize,
) -> Result<FactWorld> {
    if n_entities == 0 || n_relations == 0 || n_answers == 0 {
        return Err(Error::invalid("world counts must be at least 1"));
    }
    if templates_per_relation < 3 {
        return Err(Error::invalid("need at least 3 templates per relation"));
    }
    let mut rng = seeded(seed);
    let mut vocab = Vocab::default();
    vocab.push(SEP.to_string());
    vocab.push(FALSE.to_string());
    vocab.push(TRUE.to_string());
    for c in 0..n_answers {
        vocab.push(format!("ans{c}"));
    }
    for e in 0..n_entities {
        vocab.push(format!("ent{e}"));
    }
    let mut templates = Vec::with_capacity(n_relations);
    for r in 0..n_relations {
        let mut rel = Vec::with_capacity(templates_per_relation);
        for k in 0..templates_per_relation {
            let w0 = vocab.push(format!("r{r}_t{k}_w0"));
            let w1 = vocab.push(format!("r{r}_t{k}_w1"));
            // Rotate the entity position so templates differ in word order too.
            let pattern = match k % 3 {
                0 => vec![Slot::Entity, Slot::Word(w0), Slot::Word(w1)],
                1 => vec![Slot::Word(w0), Slot::Entity, Slot::Word(w1)],
                _ => vec![Slot::Word(w0), Slot::Word(w1), Slot::Entity],
            };
            rel.push(pattern);
        }
        templates.push(rel);
    }
    let truth = (0..n_entities * n_relations)
        .map(|_| rng.random_range(0..n_answers as u32))
        .collect();
    Ok(FactWorld {
        seed,
        size: WorldSize {
            n_entities,
            n_relations,
            n_answers,
            templates_per_relation,
        },
        truth,
        templates,
        vocab,
    })
}

/// Token sequence of a fact's question under one template.
pub fn render_fact(world: &FactWorld, fact_id: usize, template_id: usize) -> Result<Vec<u32>> {
    if fact_id >= world.n_facts() {
        return Err(Error::OutOfRange {
            what: "fact",
            index: fact_id,
            len: world.n_facts(),
        });
    }
    let (entity, relation) = world.entity_relation(fact_id);
    let templates = &world.templates[relation];
    let pattern = templates.get(template_id).ok_or(Error::OutOfRange {
        what: "template",
        index: template_id,
        len: templates.len(),
    })?;
    let ent = world.entity_token(entity)?;
    Ok(pattern
        .iter()
        .map(|slot| match slot {
            Slot::Entity => ent,
            Slot::Word(w) => *w,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_for_small_world() {
        let w = generate_world(7, 4, 2, 3, 3).unwrap();
        assert_eq!(w.n_facts(), 8);
        let mut forms = 0;
        for f in 0..w.n_facts() {
            for t in 0..3 {
                render_fact(&w, f, t).unwrap();
                forms += 1;
            }
        }
        assert_eq!(forms, 24);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(7, 4, 2, 3, 3).unwrap();
        let b = generate_world(7, 4, 2, 3, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn seeds_give_different_truth() {
        let a = generate_world(7, 50, 4, 8, 3).unwrap();
        let b = generate_world(8, 50, 4, 8, 3).unwrap();
        assert_ne!(a.truth, b.truth);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(generate_world(1, 0, 2, 3, 3).is_err());
        assert!(generate_world(1, 2, 0, 3, 3).is_err());
        assert!(generate_world(1, 2, 2, 0, 3).is_err());
        assert!(generate_world(1, 2, 2, 3, 2).is_err());
    }

    #[test]
    fn template_zero_substitution() {
        let w = generate_world(7, 4, 2, 3, 3).unwrap();
        let toks = render_fact(&w, 0, 0).unwrap();
        let names: Vec<_> = toks.iter().map(|&t| w.vocab.token(t).unwrap()).collect();
        assert_eq!(names, vec!["ent0", "r0_t0_w0", "r0_t0_w1"]);
        assert_ne!(render_fact(&w, 0, 0).unwrap(), render_fact(&w, 0, 1).unwrap());
    }

    #[test]
    fn all_renderings_distinct() {
        let w = generate_world(3, 10, 3, 5, 4).unwrap();
        let mut seen = HashSet::new();
        for f in 0..w.n_facts() {
            for t in 0..4 {
                let r = render_fact(&w, f, t).unwrap();
                assert!(r.len() <= w.max_len());
                assert!(seen.insert(r), "duplicate rendering for fact {f} template {t}");
            }
        }
        assert_eq!(seen.len(), 120);
    }

    #[test]
    fn out_of_range_ids() {
        let w = generate_world(7, 4, 2, 3, 3).unwrap();
        assert!(render_fact(&w, 8, 0).is_err());
        assert!(render_fact(&w, 0, 3).is_err());
    }

    #[test]
    fn vocab_ids_are_dense() {
        let w = generate_world(7, 4, 2, 3, 3).unwrap();
        for id in 0..w.vocab.len() as u32 {
            let name = w.vocab.token(id).unwrap();
            assert_eq!(w.vocab.id(name).unwrap(), id);
        }
        assert!(w.vocab.token(w.vocab.len() as u32).is_err());
    }
}
