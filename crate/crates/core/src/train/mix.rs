//! Language mixtures for training: token budgets turned into a seeded
//! categorical draw per batch.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageRole};
use crate::error::{Error, Result};

/// Languages with their relative token budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    budgets: BTreeMap<String, u64>,
}

/// Builds a mix from per-language token budgets.
pub fn make_mix(proportions: BTreeMap<String, u64>) -> Result<MixSpec> {
    if proportions.is_empty() {
        return Err(Error::config("mix has no languages"));
    }
    if let Some((id, _)) = proportions.iter().find(|(_, &b)| b == 0) {
        return Err(Error::config(format!("language {id} has a zero token budget")));
    }
    Ok(MixSpec { budgets: proportions })
}

impl MixSpec {
    /// Splits `original` evenly across the corpus' original languages and
    /// `new` across its new ones. A zero group budget drops that group.
    /// Budgets are rescaled by the product of the group sizes so the even
    /// split stays integral.
    pub fn by_role(corpus: &Corpus, original: u64, new: u64) -> Result<MixSpec> {
        let groups = [(corpus.with_role(LanguageRole::Original), original), (corpus.with_role(LanguageRole::New), new)];
        let scale: u64 = groups.iter().map(|(l, _)| l.len().max(1) as u64).product();
        let mut budgets = BTreeMap::new();
        for (langs, budget) in groups {
            if budget == 0 || langs.is_empty() {
                continue;
            }
            let share = budget * scale / langs.len() as u64;
            for s in langs {
                budgets.insert(s.id.clone(), share);
            }
        }
        make_mix(budgets)
    }

    pub fn single(id: &str) -> MixSpec {
        MixSpec { budgets: BTreeMap::from([(id.to_string(), 1)]) }
    }

    pub fn budgets(&self) -> &BTreeMap<String, u64> {
        &self.budgets
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.budgets.keys().map(String::as_str)
    }

    /// Expected fraction of batches drawn from each language.
    pub fn fractions(&self) -> BTreeMap<String, f64> {
        let total: u64 = self.budgets.values().sum();
        self.budgets.iter().map(|(k, &v)| (k.clone(), v as f64 / total as f64)).collect()
    }

    /// Fails on any language the corpus does not know.
    pub fn check(&self, corpus: &Corpus) -> Result<()> {
        for id in self.languages() {
            corpus.get(id)?;
        }
        Ok(())
    }

    pub fn sampler(&self) -> MixSampler<'_> {
        let ids: Vec<&str> = self.languages().collect();
        let index = WeightedIndex::new(self.budgets.values().copied()).expect("budgets validated positive");
        MixSampler { ids, index }
    }
}

pub struct MixSampler<'a> {
    ids: Vec<&'a str>,
    index: WeightedIndex<u64>,
}

impl<'a> MixSampler<'a> {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a str {
        self.ids[self.index.sample(rng)]
    }
}
