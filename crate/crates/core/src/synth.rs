//! Synthetic corpora with planted linear structure.
//!
//! Embeddings are `x = speaker latent + utterance noise` (unit total variance
//! per coordinate). Each dimension's rating comes from
//! `wₖᵀx + σ(√c·f + √(1−c)·εₖ)`, where `f` is a per-utterance factor shared
//! by all dimensions, binned into 1..=7 by empirical septiles over the whole
//! corpus. Splits are assigned per speaker from a seeded hash of the id.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Category, CorpusError, Dimension, Emotion, Manifest, Split, UtteranceRecord};
use crate::embedstore::{self, EmbedError, EmbeddingTable};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub dim: usize,
    pub seed: u64,
    /// Planted direction per dimension, each of length `dim`.
    pub signal_weights: BTreeMap<Dimension, Vec<f64>>,
    pub noise_sigma: f64,
    /// Probabilities of digital_command, novel_sentence, spontaneous.
    pub category_mix: [f64; 3],
    /// Share of the rating noise that is common to all dimensions.
    pub dimension_correlation: f64,
    /// Share of embedding variance carried by the speaker latent.
    pub speaker_variance_share: f64,
    /// Train / validation / test shares of speakers.
    pub split_fractions: [f64; 3],
    pub backend_name: String,
    /// When set, `severity` holds `0..levels` from quantile bins of the
    /// summed planted signal `Σₖ wₖᵀx`.
    pub severity_levels: Option<u32>,
    /// When set, every utterance gets a uniformly drawn emotion and its
    /// embedding is shifted by `shift · emotion_index` along the normalized
    /// sum of the planted directions.
    pub emotion_shift: Option<f64>,
}

impl SynthSpec {
    /// Random unit-norm planted directions drawn from `seed`.
    pub fn planted(n_speakers: usize, utterances_per_speaker: usize, dim: usize, seed: u64, noise_sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let signal_weights = Dimension::ALL
            .iter()
            .map(|&d| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                (d, v.into_iter().map(|a| a / norm).collect())
            })
            .collect();
        Self {
            n_speakers,
            utterances_per_speaker,
            dim,
            seed,
            signal_weights,
            noise_sigma,
            category_mix: [1.0 / 3.0; 3],
            dimension_correlation: 0.0,
            speaker_variance_share: 0.5,
            split_fractions: [0.7, 0.1, 0.2],
            backend_name: "synth".to_string(),
            severity_levels: None,
            emotion_shift: None,
        }
    }

    /// Ratings independent of the embeddings.
    pub fn null(n_speakers: usize, utterances_per_speaker: usize, dim: usize, seed: u64, noise_sigma: f64) -> Self {
        let mut s = Self::planted(n_speakers, utterances_per_speaker, dim, seed, noise_sigma);
        for w in s.signal_weights.values_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    /// Noise level at which the latent score `wᵀx` (unit variance)
    /// correlates with its noisy version at `rho`.
    pub fn sigma_for_correlation(rho: f64) -> f64 {
        (1.0 / (rho * rho) - 1.0).sqrt()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 || self.dim == 0 {
            return bad("n_speakers, utterances_per_speaker and dim must be positive".into());
        }
        for d in Dimension::ALL {
            match self.signal_weights.get(&d) {
                Some(w) if w.len() == self.dim => {}
                Some(w) => return bad(format!("weights for {d} have length {}, dim is {}", w.len(), self.dim)),
                None => return bad(format!("no weights for {d}")),
            }
        }
        let probs_ok = |p: &[f64; 3]| p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !probs_ok(&self.category_mix) {
            return bad("category_mix must be non-negative and sum to 1".into());
        }
        if !probs_ok(&self.split_fractions) {
            return bad("split_fractions must be non-negative and sum to 1".into());
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.dimension_correlation) {
            return bad("dimension_correlation must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.speaker_variance_share) {
            return bad("speaker_variance_share must lie in [0, 1]".into());
        }
        if self.severity_levels == Some(0) {
            return bad("severity_levels must be positive".into());
        }
        Ok(())
    }
}

/// Bins `z` into `levels` groups of (near) equal size by rank. Tied values
/// share the bin of their lowest rank, so the map is monotone.
pub fn quantize_levels(z: &[f64], levels: u32) -> Vec<u32> {
    let n = z.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    let mut out = vec![0u32; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && z[order[end]] == z[order[start]] {
            end += 1;
        }
        let bin = ((levels as usize * start) / n) as u32;
        for &k in &order[start..end] {
            out[k] = bin;
        }
        start = end;
    }
    out
}

/// Empirical septile binning onto the 1..=7 rating scale.
pub fn quantize_to_scale(z: &[f64]) -> Vec<u8> {
    quantize_levels(z, 7).into_iter().map(|b| b as u8 + 1).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded hash of a speaker id mapped to `[0, 1)`.
fn speaker_unit(speaker_id: &str, seed: u64) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in speaker_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (splitmix64(h ^ splitmix64(seed)) >> 11) as f64 / (1u64 << 53) as f64
}

fn assign_split(speaker_id: &str, seed: u64, fractions: &[f64; 3]) -> Split {
    let u = speaker_unit(speaker_id, seed);
    if u < fractions[0] {
        Split::Train
    } else if u < fractions[0] + fractions[1] {
        Split::Validation
    } else {
        Split::Test
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], probs: &[f64]) -> T {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (item, p) in items.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *item;
        }
    }
    *items.last().expect("non-empty choices")
}

/// A generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub table: EmbeddingTable,
    /// Noise-free planted score `wₖᵀx` per record and dimension.
    pub latent: Vec<[f64; 7]>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let dim = spec.dim;
    let weights: Vec<&Vec<f64>> = Dimension::ALL.iter().map(|d| &spec.signal_weights[d]).collect();
    let speaker_sd = spec.speaker_variance_share.sqrt();
    let utter_sd = (1.0 - spec.speaker_variance_share).sqrt();
    let shared_sd = spec.dimension_correlation.sqrt();
    let own_sd = (1.0 - spec.dimension_correlation).sqrt();

    let emotion_dir: Vec<f64> = {
        let mut v = vec![0.0; dim];
        for w in &weights {
            for (a, b) in v.iter_mut().zip(w.iter()) {
                *a += b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|a| *a /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    };

    let total = spec.n_speakers * spec.utterances_per_speaker;
    let mut records = Vec::with_capacity(total);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut latent = Vec::with_capacity(total);
    let mut raw_scores: Vec<[f64; 7]> = Vec::with_capacity(total);

    for s in 0..spec.n_speakers {
        // one ChaCha stream per speaker
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64);
        let speaker_id = format!("spk{s:04}");
        let split = assign_split(&speaker_id, spec.seed, &spec.split_fractions);
        let speaker_latent: Vec<f64> = (0..dim).map(|_| speaker_sd * rng.sample::<f64, _>(StandardNormal)).collect();

        for u in 0..spec.utterances_per_speaker {
            let category = pick(&mut rng, &Category::ALL, &spec.category_mix);
            let mut x: Vec<f64> = speaker_latent
                .iter()
                .map(|m| m + utter_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let emotion = spec.emotion_shift.map(|shift| {
                let e = Emotion::ALL[rng.random_range(0..Emotion::ALL.len())];
                let k = shift * e.index() as f64;
                for (a, d) in x.iter_mut().zip(&emotion_dir) {
                    *a += k * d;
                }
                e
            });
            let shared: f64 = rng.sample(StandardNormal);
            let mut lat = [0.0; 7];
            let mut noisy = [0.0; 7];
            for (k, w) in weights.iter().enumerate() {
                let signal: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let own: f64 = rng.sample(StandardNormal);
                lat[k] = signal;
                noisy[k] = signal + spec.noise_sigma * (shared_sd * shared + own_sd * own);
            }

            let mut rec = UtteranceRecord::new(format!("{speaker_id}_u{u:03}"), speaker_id.clone());
            rec.category = Some(category);
            rec.split = Some(split);
            rec.emotion = emotion;
            records.push(rec);
            vectors.push(x);
            latent.push(lat);
            raw_scores.push(noisy);
        }
    }

    for d in Dimension::ALL {
        let z: Vec<f64> = raw_scores.iter().map(|r| r[d.index()]).collect();
        for (rec, s) in records.iter_mut().zip(quantize_to_scale(&z)) {
            rec.set_score(d, Some(s));
        }
    }
    if let Some(levels) = spec.severity_levels {
        let composite: Vec<f64> = latent.iter().map(|l| l.iter().sum()).collect();
        for (rec, s) in records.iter_mut().zip(quantize_levels(&composite, levels)) {
            rec.severity = Some(s);
        }
    }

    let mut table = EmbeddingTable::new(spec.backend_name.clone(), dim)?;
    for (rec, v) in records.iter().zip(&vectors) {
        let v32: Vec<f32> = v.iter().map(|&a| a as f32).collect();
        table.push(rec.utterance_id.clone(), &v32)?;
    }
    let manifest = Manifest::new(format!("synth-{}", spec.seed), records)?;
    Ok(SynthCorpus {
        manifest,
        table,
        latent,
    })
}

impl SynthCorpus {
    /// Writes `manifest.csv` and `<backend>.vqde` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        corpus::write_manifest(&self.manifest, dir.join("manifest.csv"))?;
        embedstore::write_table(&self.table, dir.join(format!("{}.vqde", self.table.backend_name())))?;
        Ok(())
    }
}
