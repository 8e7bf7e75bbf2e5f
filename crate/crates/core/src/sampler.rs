//! Monolingual batch construction with exponentiated-fraction oversampling and
//! per-epoch language rotation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageStats};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Language order of the first epoch. Empty means the statistics' order.
    pub base_language_order: Vec<String>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            batch_size: 32,
            seed: 42,
            base_language_order: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        for (i, l) in self.base_language_order.iter().enumerate() {
            if self.base_language_order[..i].contains(l) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate language in base order: {l}"
                )));
            }
        }
        Ok(())
    }
}

/// `q_i = p_i^α / Σ_k p_k^α`, in the statistics' language order.
pub fn oversample_weights(stats: &LanguageStats, alpha: f64) -> Result<Vec<(String, f64)>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if stats.num_languages() == 0 {
        return Err(Error::EmptyCorpus);
    }
    if let Some((lang, _)) = stats.counts().iter().find(|(_, n)| *n == 0) {
        return Err(Error::ZeroExamples(lang.clone()));
    }
    let powered: Vec<(String, f64)> = stats
        .fractions()
        .into_iter()
        .map(|(l, p)| (l, p.powf(alpha)))
        .collect();
    let norm: f64 = powered.iter().map(|(_, w)| w).sum();
    Ok(powered.into_iter().map(|(l, w)| (l, w / norm)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguagePlan {
    pub language: String,
    /// Training pairs available, `n_i`.
    pub available: usize,
    pub weight: f64,
    /// Pairs drawn this epoch, `m_i`.
    pub sampled: usize,
    /// `ceil(m_i / batch_size)`.
    pub batches: usize,
}

impl LanguagePlan {
    pub fn ratio(&self) -> f64 {
        self.sampled as f64 / self.available as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch_index: usize,
    pub language_order: Vec<String>,
    /// One entry per language, in `language_order`.
    pub languages: Vec<LanguagePlan>,
}

impl EpochPlan {
    pub fn get(&self, language: &str) -> Option<&LanguagePlan> {
        self.languages.iter().find(|l| l.language == language)
    }

    pub fn total_sampled(&self) -> usize {
        self.languages.iter().map(|l| l.sampled).sum()
    }
}

/// Moves the last `epoch_index mod N` languages to the front, one per epoch.
pub fn rotate_languages(base: &[String], epoch_index: usize) -> Vec<String> {
    let mut order = base.to_vec();
    if !order.is_empty() {
        let shift = epoch_index % order.len();
        order.rotate_right(shift);
    }
    order
}

/// Per-language sample counts for one epoch.
///
/// The epoch budget is `T = max_i n_i / q_i`, so the language with the largest
/// `n_i / q_i` (the largest language) is drawn exactly once over and every
/// other language is scaled up relative to it: `m_i = round(q_i T)`.
pub fn plan_epoch(stats: &LanguageStats, cfg: &SamplerConfig, epoch_index: usize) -> Result<EpochPlan> {
    cfg.validate()?;
    let weights = oversample_weights(stats, cfg.alpha)?;

    let base: Vec<String> = if cfg.base_language_order.is_empty() {
        stats.languages().map(str::to_owned).collect()
    } else {
        cfg.base_language_order.clone()
    };
    for l in &base {
        if stats.count(l).is_none() {
            return Err(Error::UnknownLanguage(l.clone()));
        }
    }

    let budget = stats
        .counts()
        .iter()
        .zip(&weights)
        .map(|((_, n), (_, q))| *n as f64 / q)
        .fold(0.0_f64, f64::max);

    let language_order = rotate_languages(&base, epoch_index);
    let languages = language_order
        .iter()
        .map(|lang| {
            let available = stats.count(lang).unwrap_or(0);
            let weight = weights
                .iter()
                .find(|(l, _)| l == lang)
                .map(|(_, q)| *q)
                .unwrap_or(0.0);
            let sampled = ((weight * budget).round() as usize).max(1);
            LanguagePlan {
                language: lang.clone(),
                available,
                weight,
                sampled,
                batches: sampled.div_ceil(cfg.batch_size),
            }
        })
        .collect();

    Ok(EpochPlan {
        epoch_index,
        language_order,
        languages,
    })
}

/// A monolingual minibatch: indices into the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub language: String,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn language_key(language: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in language.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the generator used for one (seed, epoch, language) draw.
pub fn draw_seed(seed: u64, epoch_index: usize, language: &str) -> u64 {
    splitmix(splitmix(seed ^ splitmix(epoch_index as u64)) ^ language_key(language))
}

/// Draws `m_i` examples per language uniformly with replacement and cuts them
/// into batches, emitted language-contiguously in the plan's order. A trailing
/// batch smaller than two is dropped.
pub fn draw_batches(corpus: &Corpus, plan: &EpochPlan, cfg: &SamplerConfig) -> Vec<Batch> {
    let mut batches = Vec::new();
    for lp in &plan.languages {
        let pool = corpus.indices_of(&lp.language);
        if pool.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(cfg.seed, plan.epoch_index, &lp.language));
        let drawn: Vec<usize> = (0..lp.sampled)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        batches.extend(
            drawn
                .chunks(cfg.batch_size.max(2))
                .filter(|c| c.len() >= 2)
                .map(|c| Batch {
                    language: lp.language.clone(),
                    indices: c.to_vec(),
                }),
        );
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusExample;

    fn table_counts(python: usize) -> LanguageStats {
        LanguageStats::from_counts([
            ("ruby", 24_927),
            ("javascript", 58_025),
            ("java", 164_923),
            ("go", 167_288),
            ("php", 241_241),
            ("python", python),
        ])
    }

    fn weight(ws: &[(String, f64)], l: &str) -> f64 {
        ws.iter().find(|(k, _)| k == l).unwrap().1
    }

    fn toy_corpus(per_language: &[(&str, usize)]) -> Corpus {
        let mut examples = Vec::new();
        for (lang, n) in per_language {
            for i in 0..*n {
                examples.push(CorpusExample {
                    id: format!("{lang}{i}"),
                    language: lang.to_string(),
                    code_tokens: vec![format!("c{i}")],
                    doc_tokens: vec![format!("d{i}")],
                });
            }
        }
        Corpus::from_examples(examples).unwrap()
    }

    #[test]
    fn equal_counts_give_equal_weights() {
        let ws = oversample_weights(&LanguageStats::from_counts([("a", 100), ("b", 100)]), 0.7).unwrap();
        assert_eq!(ws[0].1, 0.5);
        assert_eq!(ws[1].1, 0.5);
    }

    #[test]
    fn single_language_weight_is_one() {
        let ws = oversample_weights(&LanguageStats::from_counts([("a", 7)]), 0.7).unwrap();
        assert_eq!(ws, vec![("a".to_string(), 1.0)]);
    }

    #[test]
    fn table_weights() {
        // Oracle: direct evaluation of p^0.7 / Σ p^0.7 in extended precision
        // (mpmath, 50 digits) on the printed counts.
        let ws = oversample_weights(&table_counts(251_820), 0.7).unwrap();
        assert!((weight(&ws, "ruby") - 0.049_268_196_472_345_67).abs() < 1e-12);
        assert!((weight(&ws, "python") - 0.248_691_423_814_542_26).abs() < 1e-12);
        assert!((weight(&ws, "ruby") - 0.0492).abs() < 1e-4);
        assert!((weight(&ws, "python") - 0.2487).abs() < 1e-4);
        let sum: f64 = ws.iter().map(|(_, q)| q).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_count_is_rejected() {
        let err = oversample_weights(&LanguageStats::from_counts([("a", 3), ("b", 0)]), 0.7).unwrap_err();
        assert!(err.to_string().starts_with("language with zero examples"));
    }

    #[test]
    fn bad_alpha_is_rejected() {
        let stats = LanguageStats::from_counts([("a", 3)]);
        assert!(oversample_weights(&stats, 0.0).is_err());
        assert!(oversample_weights(&stats, 1.5).is_err());
    }

    #[test]
    fn table_plan_matches_reported_ratios() {
        let cfg = SamplerConfig::default();
        let plan = plan_epoch(&table_counts(251_220), &cfg, 0).unwrap();
        let ruby = plan.get("ruby").unwrap();
        assert!((ruby.sampled as i64 - 49_852).abs() <= 10, "ruby m = {}", ruby.sampled);
        assert_eq!(plan.get("python").unwrap().sampled, 251_220);
        assert!((plan.get("java").unwrap().ratio() - 1.13).abs() <= 0.01);
        assert!((plan.get("php").unwrap().ratio() - 1.01).abs() <= 0.01);
    }

    #[test]
    fn single_language_plan_draws_n() {
        let stats = LanguageStats::from_counts([("go", 777)]);
        for epoch in 0..3 {
            let plan = plan_epoch(&stats, &SamplerConfig::default(), epoch).unwrap();
            assert_eq!(plan.languages[0].sampled, 777);
            assert_eq!(plan.languages[0].batches, 777usize.div_ceil(32));
        }
    }

    #[test]
    fn rotation_moves_last_language_first() {
        let base: Vec<String> = ["Java", "Ruby", "Python", "Go", "JavaScript", "PHP"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            rotate_languages(&base, 1),
            ["PHP", "Java", "Ruby", "Python", "Go", "JavaScript"]
        );
        assert_eq!(rotate_languages(&base, 6), base);
        assert_eq!(rotate_languages(&base, 0), base);
    }

    #[test]
    fn unknown_language_in_order_is_rejected() {
        let stats = LanguageStats::from_counts([("go", 3)]);
        let cfg = SamplerConfig {
            base_language_order: vec!["rust".into()],
            ..Default::default()
        };
        assert!(matches!(plan_epoch(&stats, &cfg, 0), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn config_guards() {
        let mut cfg = SamplerConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.batch_size = 4;
        cfg.base_language_order = vec!["a".into(), "a".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_singleton_batch_is_dropped() {
        let corpus = toy_corpus(&[("go", 5)]);
        let cfg = SamplerConfig {
            batch_size: 2,
            ..Default::default()
        };
        let plan = plan_epoch(&corpus.stats, &cfg, 0).unwrap();
        assert_eq!(plan.languages[0].sampled, 5);
        let batches = draw_batches(&corpus, &plan, &cfg);
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn draws_are_deterministic_and_refresh_per_epoch() {
        let corpus = toy_corpus(&[("go", 50), ("ruby", 20)]);
        let cfg = SamplerConfig {
            batch_size: 8,
            ..Default::default()
        };
        let p0 = plan_epoch(&corpus.stats, &cfg, 0).unwrap();
        let a = draw_batches(&corpus, &p0, &cfg);
        let b = draw_batches(&corpus, &p0, &cfg);
        assert_eq!(a, b);
        let p1 = plan_epoch(&corpus.stats, &cfg, 1).unwrap();
        let c = draw_batches(&corpus, &p1, &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn batches_are_language_contiguous_in_plan_order() {
        let corpus = toy_corpus(&[("go", 40), ("ruby", 30), ("php", 60)]);
        let cfg = SamplerConfig {
            batch_size: 8,
            base_language_order: vec!["ruby".into(), "php".into(), "go".into()],
            ..Default::default()
        };
        let plan = plan_epoch(&corpus.stats, &cfg, 1).unwrap();
        let batches = draw_batches(&corpus, &plan, &cfg);
        let mut seen: Vec<&str> = Vec::new();
        for b in &batches {
            if seen.last() != Some(&b.language.as_str()) {
                seen.push(&b.language);
            }
            assert!(b.indices.iter().all(|&i| corpus.examples[i].language == b.language));
            assert!(b.len() >= 2 && b.len() <= 8);
        }
        assert_eq!(seen, vec!["go", "ruby", "php"]);
    }

    #[test]
    fn doubled_language_is_drawn_about_twice() {
        // Model: m = 2n uniform draws with replacement. Each example's draw
        // count is Binomial(2n, 1/n) ≈ Poisson(2); the fraction never drawn is
        // ≈ e^-2.
        let corpus = toy_corpus(&[("ruby", 2000)]);
        let cfg = SamplerConfig {
            batch_size: 64,
            ..Default::default()
        };
        let plan = EpochPlan {
            epoch_index: 0,
            language_order: vec!["ruby".into()],
            languages: vec![LanguagePlan {
                language: "ruby".into(),
                available: 2000,
                weight: 1.0,
                sampled: 4000,
                batches: 63,
            }],
        };
        let batches = draw_batches(&corpus, &plan, &cfg);
        let mut hits = vec![0usize; 2000];
        for b in &batches {
            for &i in &b.indices {
                hits[i] += 1;
            }
        }
        let mean = hits.iter().sum::<usize>() as f64 / 2000.0;
        assert!((1.9..=2.1).contains(&mean), "mean draws {mean}");
        let never = hits.iter().filter(|&&h| h == 0).count() as f64 / 2000.0;
        assert!((never - (-2.0f64).exp()).abs() < 0.03, "never drawn {never}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn smaller_languages_get_larger_ratios(
                counts in proptest::collection::vec(1usize..1_000_000, 2..8),
                alpha in 0.05f64..1.0,
            ) {
                let stats = LanguageStats::from_counts(counts.iter().enumerate().map(|(i, n)| (format!("l{i}"), *n)));
                let ws = oversample_weights(&stats, alpha).unwrap();
                let ps = stats.fractions();
                let sum: f64 = ws.iter().map(|(_, q)| q).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for a in 0..ps.len() {
                    for b in 0..ps.len() {
                        if ps[a].1 < ps[b].1 {
                            prop_assert!(ws[a].1 / ps[a].1 > ws[b].1 / ps[b].1);
                            prop_assert!(ws[a].1 < ws[b].1);
                        }
                    }
                }
            }

            #[test]
            fn rotation_returns_after_n_epochs(n in 1usize..10, cycles in 0usize..4) {
                let base: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
                prop_assert_eq!(rotate_languages(&base, n * cycles), base.clone());
                let stats = LanguageStats::from_counts(base.iter().map(|l| (l.clone(), 10)));
                let cfg = SamplerConfig { base_language_order: base.clone(), ..Default::default() };
                prop_assert_eq!(plan_epoch(&stats, &cfg, n).unwrap().language_order, base);
            }
        }
    }
}
