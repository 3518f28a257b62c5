//! Deterministic synthetic "web": entities with categorical attributes and
//! entity-centric documents that each state a slice of one entity's facts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab;
use crate::agent::Fact;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub entities: usize,
    pub attributes: usize,
    /// Distinct values per attribute.
    pub values: usize,
    /// Consecutive attributes covered by one document.
    pub facts_per_doc: usize,
    /// Upper bound `D` on documents needed to reach any answer.
    pub max_docs_per_answer: usize,
    /// Result cap for search-style tools.
    pub max_hits: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            entities: 20,
            attributes: 6,
            values: 6,
            facts_per_doc: 2,
            max_docs_per_answer: 3,
            max_hits: 6,
        }
    }
}

impl WorldConfig {
    pub fn docs_per_entity(&self) -> usize {
        self.attributes.div_ceil(self.facts_per_doc)
    }

    /// Document group an attribute belongs to.
    pub fn group_of(&self, attr: usize) -> usize {
        attr / self.facts_per_doc
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("entities", self.entities),
            ("attributes", self.attributes),
            ("values", self.values),
            ("facts_per_doc", self.facts_per_doc),
            ("max_docs_per_answer", self.max_docs_per_answer),
            ("max_hits", self.max_hits),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.entities > vocab::MAX_ENTITIES as usize {
            return Err(Error::Config(format!(
                "{} entities exceed the {} entity tokens",
                self.entities,
                vocab::MAX_ENTITIES
            )));
        }
        if self.attributes > vocab::MAX_ATTRS as usize || self.values > vocab::MAX_VALUES as usize {
            return Err(Error::Config("attribute/value counts exceed vocabulary".into()));
        }
        if self.entities * self.docs_per_entity() > vocab::MAX_DOCS as usize {
            return Err(Error::Config("document count exceeds vocabulary".into()));
        }
        if self.docs_per_entity() > self.max_docs_per_answer {
            return Err(Error::Config(format!(
                "an entity spans {} documents but answers must be reachable in {}",
                self.docs_per_entity(),
                self.max_docs_per_answer
            )));
        }
        // Unique answers need pairwise distinct attribute vectors.
        let space = (self.values as f64).powi(self.attributes as i32);
        if (self.entities as f64) > space {
            return Err(Error::Config(format!(
                "{} entities cannot have distinct profiles over {}^{} values",
                self.entities, self.values, self.attributes
            )));
        }
        if self.max_hits < self.docs_per_entity() {
            return Err(Error::Config("max_hits must cover one entity's documents".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u16,
    /// `attributes[a]` is the value index of attribute `a`.
    pub attributes: Vec<u8>,
}

impl Entity {
    pub fn satisfies(&self, facts: &[Fact]) -> bool {
        facts
            .iter()
            .all(|f| self.attributes.get(f.attr as usize) == Some(&f.value))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u16,
    pub subject: u16,
    pub facts: Vec<Fact>,
}

impl Document {
    pub fn mentions_attr(&self, attr: u8) -> Option<&Fact> {
        self.facts.iter().find(|f| f.attr == attr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    /// Sorted by document id.
    pub documents: Vec<Document>,
}

/// Per-purpose RNG stream so changes in one generator never shift another.
pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    rng
}

impl World {
    pub fn generate(seed: u64, config: WorldConfig) -> Result<World> {
        config.validate()?;
        let mut rng = stream_rng(seed, 1, 0);
        let mut entities: Vec<Entity> = Vec::with_capacity(config.entities);
        while entities.len() < config.entities {
            let attributes: Vec<u8> = (0..config.attributes)
                .map(|_| rng.random_range(0..config.values) as u8)
                .collect();
            if entities.iter().all(|e| e.attributes != attributes) {
                entities.push(Entity {
                    id: entities.len() as u16,
                    attributes,
                });
            }
        }

        let per_entity = config.docs_per_entity();
        let mut doc_ids: Vec<u16> = (0..(config.entities * per_entity) as u16).collect();
        doc_ids.shuffle(&mut rng);
        let mut documents = Vec::with_capacity(doc_ids.len());
        for e in &entities {
            for g in 0..per_entity {
                let lo = g * config.facts_per_doc;
                let hi = ((g + 1) * config.facts_per_doc).min(config.attributes);
                documents.push(Document {
                    id: doc_ids[e.id as usize * per_entity + g],
                    subject: e.id,
                    facts: (lo..hi)
                        .map(|a| Fact::new(a, e.attributes[a] as usize))
                        .collect(),
                });
            }
        }
        documents.sort_by_key(|d| d.id);
        Ok(World {
            seed,
            config,
            entities,
            documents,
        })
    }

    pub fn document(&self, id: usize) -> Option<&Document> {
        self.documents
            .binary_search_by_key(&id, |d| d.id as usize)
            .ok()
            .map(|i| &self.documents[i])
    }

    pub fn satisfiers(&self, facts: &[Fact]) -> Vec<u16> {
        self.entities
            .iter()
            .filter(|e| e.satisfies(facts))
            .map(|e| e.id)
            .collect()
    }

    /// Documents whose subject satisfies every query fact and that state at
    /// least one of them, in ascending id order, capped at `max_hits`.
    pub fn search(&self, query: &[Fact]) -> Vec<&Document> {
        self.documents
            .iter()
            .filter(|d| {
                self.entities[d.subject as usize].satisfies(query)
                    && d.facts.iter().any(|f| query.contains(f))
            })
            .take(self.config.max_hits)
            .collect()
    }
}
