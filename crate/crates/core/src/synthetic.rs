//! Planted-overlap synthetic corpus: every (code, document) pair shares three
//! signature tokens buried among language keywords and filler words, so a
//! model that learns to match pairs has to pick out the shared tokens.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusExample};
use crate::error::{Error, Result};

pub const DEFAULT_LANGUAGES: [&str; 6] = ["ruby", "javascript", "java", "go", "php", "python"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub languages: Vec<String>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Distinct signature tokens shared by all languages.
    pub signature_pool: usize,
    pub planted: usize,
    pub keywords_per_language: usize,
    pub filler_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            train_pairs: 500,
            heldout_pairs: 100,
            signature_pool: 600,
            planted: 3,
            keywords_per_language: 24,
            filler_words: 48,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Corpus,
    pub heldout: Corpus,
}

fn pair(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, language: &str, id: String) -> CorpusExample {
    let signature: Vec<String> = rand::seq::index::sample(rng, cfg.signature_pool, cfg.planted)
        .into_iter()
        .map(|k| format!("sig{k}"))
        .collect();
    let keywords: Vec<String> = (0..cfg.keywords_per_language).map(|k| format!("{language}_kw{k}")).collect();
    let fillers: Vec<String> = (0..cfg.filler_words).map(|k| format!("w{k}")).collect();

    let mut code = signature.clone();
    for _ in 0..rng.random_range(6..=12) {
        code.push(keywords.choose(rng).expect("keywords").clone());
    }
    code.shuffle(rng);
    let mut doc = signature;
    for _ in 0..rng.random_range(3..=7) {
        doc.push(fillers.choose(rng).expect("fillers").clone());
    }
    doc.shuffle(rng);

    CorpusExample {
        id,
        language: language.to_string(),
        code_tokens: code,
        doc_tokens: doc,
    }
}

/// Generates a training split and a held-out split per language from one
/// seeded stream.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticSplits> {
    if cfg.planted == 0 || cfg.planted > cfg.signature_pool {
        return Err(Error::InvalidConfig(format!(
            "planted must be in 1..={}, got {}",
            cfg.signature_pool, cfg.planted
        )));
    }
    if cfg.keywords_per_language == 0 || cfg.filler_words == 0 {
        return Err(Error::InvalidConfig("keyword and filler pools must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.languages.len() * cfg.train_pairs);
    let mut heldout = Vec::with_capacity(cfg.languages.len() * cfg.heldout_pairs);
    for lang in &cfg.languages {
        for i in 0..cfg.train_pairs {
            train.push(pair(&mut rng, cfg, lang, format!("{lang}/train/{i}")));
        }
        for i in 0..cfg.heldout_pairs {
            heldout.push(pair(&mut rng, cfg, lang, format!("{lang}/heldout/{i}")));
        }
    }
    Ok(SyntheticSplits {
        train: Corpus::from_examples(train)?,
        heldout: Corpus::from_examples(heldout)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_planting() {
        let s = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(s.train.len(), 3000);
        assert_eq!(s.heldout.len(), 600);
        assert_eq!(s.train.stats.num_languages(), 6);
        for e in s.train.examples.iter().chain(&s.heldout.examples) {
            let shared = e
                .code_tokens
                .iter()
                .filter(|t| t.starts_with("sig") && e.doc_tokens.contains(t))
                .count();
            assert_eq!(shared, 3, "{}", e.id);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig {
            train_pairs: 20,
            heldout_pairs: 5,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap().train.examples, generate(&cfg).unwrap().train.examples);
        let other = SyntheticConfig { seed: 7, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().train.examples, generate(&other).unwrap().train.examples);
    }
}
