use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::world::{render_fact, FactWorld, FALSE, TRUE};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// FC: binary true/false over claim triples. QA: answer classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Fc,
    Qa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One surface form with its gold label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<u32>,
    /// Answer class (QA) or `1 = true`, `0 = false` (FC).
    pub y: u32,
    pub fact_id: usize,
    pub template_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    pub seed: u64,
    pub world: FactWorld,
    /// FC only: the answer asserted by each fact's claim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<Vec<u32>>,
    pub examples: Vec<Example>,
    /// Split of every fact, indexed by fact id.
    pub fact_split: Vec<Split>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        match self.task {
            TaskKind::Fc => 2,
            TaskKind::Qa => self.world.size.n_answers,
        }
    }

    /// Token naming a label, used when the editor reads `<x, y, a>`.
    pub fn class_token(&self, class: u32) -> Result<u32> {
        match self.task {
            TaskKind::Fc => match class {
                0 => self.world.vocab.id(FALSE),
                1 => self.world.vocab.id(TRUE),
                c => Err(Error::OutOfRange {
                    what: "class",
                    index: c as usize,
                    len: 2,
                }),
            },
            TaskKind::Qa => {
                if class as usize >= self.world.size.n_answers {
                    return Err(Error::OutOfRange {
                        what: "class",
                        index: class as usize,
                        len: self.world.size.n_answers,
                    });
                }
                self.world.answer_token(class)
            }
        }
    }

    pub fn class_tokens(&self) -> Result<Vec<u32>> {
        (0..self.n_classes() as u32)
            .map(|c| self.class_token(c))
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.world.vocab.len()
    }

    pub fn split_of(&self, example: &Example) -> Split {
        self.fact_split[example.fact_id]
    }

    /// Indices of examples whose fact is in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| self.fact_split[e.fact_id] == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&Example> {
        self.examples
            .iter()
            .filter(|e| self.fact_split[e.fact_id] == split)
            .collect()
    }

    /// Indices of all surface forms of a fact.
    pub fn forms_of_fact(&self, fact_id: usize) -> Vec<usize> {
        let per = self.world.size.templates_per_relation;
        // Examples are laid out fact-major, template-minor.
        (fact_id * per..(fact_id + 1) * per).collect()
    }
}

/// Renders every `(fact, template)` pair and splits facts 80/10/10.
pub fn build_dataset(world: FactWorld, task: TaskKind, seed: u64) -> Result<Dataset> {
    let mut rng = seeded(seed);
    let n_facts = world.n_facts();
    let per = world.size.templates_per_relation;
    let claims = match task {
        TaskKind::Qa => None,
        TaskKind::Fc => {
            let n_ans = world.size.n_answers as u32;
            if n_ans < 2 {
                return Err(Error::invalid("FC claims need at least 2 answers"));
            }
            let claims = world
                .truth
                .iter()
                .map(|&t| {
                    if rng.random_bool(0.5) {
                        t
                    } else {
                        // Uniform over the other answers.
                        let k = rng.random_range(0..n_ans - 1);
                        if k >= t {
                            k + 1
                        } else {
                            k
                        }
                    }
                })
                .collect::<Vec<_>>();
            Some(claims)
        }
    };
    let mut examples = Vec::with_capacity(n_facts * per);
    for fact_id in 0..n_facts {
        for template_id in 0..per {
            let mut x = render_fact(&world, fact_id, template_id)?;
            let y = match &claims {
                None => world.truth[fact_id],
                Some(c) => {
                    x.push(world.answer_token(c[fact_id])?);
                    u32::from(c[fact_id] == world.truth[fact_id])
                }
            };
            examples.push(Example {
                x,
                y,
                fact_id,
                template_id,
            });
        }
    }
    let fact_split = split_facts(n_facts, &mut rng);
    Ok(Dataset {
        task,
        seed,
        world,
        claims,
        examples,
        fact_split,
    })
}

fn split_facts<R: Rng>(n: usize, rng: &mut R) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let tenth = |k: usize| ((n * k) as f64 / 10.0).round() as usize;
    let (n_val, n_test) = if n >= 3 {
        (tenth(1).max(1), tenth(1).max(1))
    } else {
        (0, 0)
    };
    let n_train = n - n_val - n_test;
    let mut split = vec![Split::Train; n];
    for (rank, &fact) in order.iter().enumerate() {
        split[fact] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    split
}
