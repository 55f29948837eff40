use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::{hierarchical_targets, CharVocab, TargetSequence};

/// Phone symbols used for synthetic inventories, all present in the default table.
pub const SYNTHETIC_PHONES: [&str; 24] = [
    "p", "t", "k", "a", "i", "u", "m", "n", "s", "l", "b", "d", "ɡ", "e", "o", "f", "v", "z", "ʃ", "j", "w", "ŋ", "r",
    "h",
];

pub const BLANK_SYMBOL: &str = "<blank>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub seed: u64,
    pub num_phones: usize,
    pub feature_dim: usize,
    /// Per-frame Gaussian noise standard deviation.
    pub sigma: f64,
    /// Scale of the phone centroids.
    pub separation: f64,
    pub num_train: usize,
    pub num_dev: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Number of synthetic "languages"; each drops part of the inventory.
    pub languages: usize,
    /// Norm of the per-language offset added to every frame.
    pub language_shift: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 17,
            num_phones: 6,
            feature_dim: 8,
            sigma: 0.1,
            separation: 1.0,
            num_train: 32,
            num_dev: 16,
            min_phones: 2,
            max_phones: 5,
            languages: 1,
            language_shift: 0.0,
        }
    }
}

impl TaskConfig {
    /// Noisier task with several languages and acoustic shifts between them.
    pub fn multilingual(seed: u64) -> Self {
        TaskConfig {
            seed,
            num_phones: 8,
            sigma: 0.6,
            languages: 3,
            language_shift: 0.5,
            num_train: 48,
            ..TaskConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_phones < 2 || self.num_phones > SYNTHETIC_PHONES.len() {
            return Err(format!("num_phones must be in 2..={}", SYNTHETIC_PHONES.len()));
        }
        if self.feature_dim == 0 {
            return Err("feature_dim must be positive".into());
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err("need 1 <= min_phones <= max_phones".into());
        }
        if self.languages == 0 || self.languages > self.num_phones / 2 {
            return Err("languages must be in 1..=num_phones/2".into());
        }
        if !(self.sigma >= 0.0 && self.separation > 0.0 && self.language_shift >= 0.0) {
            return Err("sigma, separation and language_shift must be non-negative".into());
        }
        if self.num_train == 0 {
            return Err("num_train must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    /// `L x F` acoustic features.
    pub features: Array2<f64>,
    /// Phone labels in `1..=K`.
    pub phones: TargetSequence,
    /// Synthetic orthography: each phone rendered through a many-to-one letter map.
    pub ortho: String,
    pub chars: TargetSequence,
}

/// Deterministic synthetic phone-recognition data.
///
/// Each phone owns a Gaussian centroid in feature space and is rendered as
/// 2 to 4 noisy frames. Utterances never contain the same phone twice in a
/// row: frames carry no boundary cue, so adjacent repeats would be
/// unrecoverable for a frame-wise encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    /// `symbols[0]` is the blank; `symbols[k]` is phone `k`.
    pub symbols: Vec<String>,
    pub centroids: Array2<f64>,
    pub char_vocab: CharVocab,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
}

impl SyntheticTask {
    pub fn generate(config: TaskConfig) -> Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.num_phones;
        let f = config.feature_dim;

        let centroids = Array2::from_shape_simple_fn((k, f), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * config.separation
        });
        let offsets: Vec<Vec<f64>> = (0..config.languages)
            .map(|_| {
                let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * config.language_shift).collect()
            })
            .collect();
        let inventories: Vec<Vec<usize>> = (0..config.languages)
            .map(|l| {
                (1..=k)
                    .filter(|p| config.languages == 1 || p % config.languages != l)
                    .collect()
            })
            .collect();

        let letters = k.div_ceil(2);
        let letter_of = |p: usize| char::from(b'a' + ((p - 1) % letters) as u8);

        let make = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
            (0..count)
                .map(|i| {
                    let lang = rng.random_range(0..config.languages);
                    let inventory = &inventories[lang];
                    let n = rng.random_range(config.min_phones..=config.max_phones);
                    let mut phones: Vec<usize> = Vec::with_capacity(n);
                    while phones.len() < n {
                        let p = inventory[rng.random_range(0..inventory.len())];
                        if phones.last() != Some(&p) {
                            phones.push(p);
                        }
                    }
                    let mut rows = Vec::new();
                    for &p in &phones {
                        let frames = rng.random_range(2..=4);
                        for _ in 0..frames {
                            let row: Vec<f64> = (0..f)
                                .map(|d| {
                                    let z: f64 = StandardNormal.sample(rng);
                                    centroids[[p - 1, d]] + offsets[lang][d] + config.sigma * z
                                })
                                .collect();
                            rows.push(row);
                        }
                    }
                    let features = Array2::from_shape_vec((rows.len(), f), rows.into_iter().flatten().collect())
                        .expect("rows have feature_dim entries");
                    Utterance {
                        id: format!("{prefix}-{i:04}"),
                        language: format!("l{lang:02}"),
                        features,
                        ortho: phones.iter().map(|&p| letter_of(p)).collect(),
                        phones: TargetSequence(phones),
                        chars: TargetSequence::default(),
                    }
                })
                .collect()
        };
        let mut train = make("train", config.num_train, &mut rng);
        let mut dev = make("dev", config.num_dev, &mut rng);

        let char_vocab = CharVocab::from_corpus(train.iter().map(|u| u.ortho.as_str()));
        for u in train.iter_mut().chain(dev.iter_mut()) {
            u.chars = hierarchical_targets(&u.ortho, &char_vocab);
        }

        let symbols = std::iter::once(BLANK_SYMBOL.to_string())
            .chain(SYNTHETIC_PHONES[..k].iter().map(|s| s.to_string()))
            .collect();
        Ok(SyntheticTask {
            config,
            symbols,
            centroids,
            char_vocab,
            train,
            dev,
        })
    }

    /// CTC classes including blank.
    pub fn phone_classes(&self) -> usize {
        self.config.num_phones + 1
    }

    pub fn char_classes(&self) -> usize {
        self.char_vocab.num_classes()
    }

    pub fn max_target_len(&self) -> usize {
        self.config.max_phones
    }

    pub fn phone_string(&self, labels: &[usize]) -> String {
        crate::decode::render(labels, &self.symbols)
    }
}
