//! Audio ingestion, protocol/score files, fixed-length normalization, and
//! the synthetic desk-scale corpus.

pub mod protocol;
pub mod synth;
pub mod wav;

pub use protocol::{
    parse_protocol, parse_scores, serialize_protocol, serialize_scores, Key, ProtocolEntry,
    ScoreRecord, Split,
};
pub use synth::{synth_corpus, ArtifactKind, SynthSpec};
pub use wav::{load_wav, write_wav};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Mono 16 kHz waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Crop or tile `w` to exactly `target` samples.
///
/// Long inputs keep their first `target` samples; short inputs are repeated
/// end-to-end and then cropped. Idempotent on inputs already at `target`.
pub fn fix_length(w: &Waveform, target: usize) -> Result<Waveform> {
    fix_length_at(w, target, 0)
}

/// [`fix_length`] with a crop offset, for randomized training crops. The
/// input is conceptually tiled to infinity; the window starts at `offset`.
pub fn fix_length_at(w: &Waveform, target: usize, offset: usize) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Dataset("fix_length on empty waveform".into()));
    }
    if target == 0 {
        return Err(Error::InvalidArg("fix_length target must be positive".into()));
    }
    let n = w.samples.len();
    let samples = (offset..offset + target).map(|i| w.samples[i % n]).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// One labelled utterance of a loaded dataset.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: ProtocolEntry,
    pub wave: Waveform,
}

/// An in-memory dataset: protocol entries paired with audio.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Load `{utterance_id}.wav` from `audio_dir` for every protocol entry.
    pub fn load(audio_dir: &Path, entries: &[ProtocolEntry]) -> Result<Self> {
        let mut items = Vec::with_capacity(entries.len());
        for e in entries {
            let path = audio_dir.join(format!("{}.wav", e.utterance_id));
            let wave = load_wav(&path)?;
            items.push(Utterance {
                entry: e.clone(),
                wave,
            });
        }
        Ok(Dataset { items })
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .filter(|u| u.entry.split == split)
                .cloned()
                .collect(),
        }
    }

    /// (bona fide, spoof) counts.
    pub fn counts(&self) -> (usize, usize) {
        let bona = self
            .items
            .iter()
            .filter(|u| u.entry.key == Key::Bonafide)
            .count();
        (bona, self.items.len() - bona)
    }
}

/// Deterministic index shuffle for epoch `epoch` under `seed`.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .wrapping_add(1),
    );
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Mini-batch index iterator: deterministic shuffle per (seed, epoch), final
/// short batch kept.
pub fn batch_iter(n_items: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let idx = shuffled_indices(n_items, seed, epoch);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn wave(n: usize) -> Waveform {
        Waveform {
            samples: (0..n).map(|i| (i as f32 / n as f32) - 0.5).collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn fix_length_tiles_short_inputs() {
        let w = wave(16000);
        let out = fix_length(&w, 64000).unwrap();
        assert_eq!(out.samples.len(), 64000);
        assert_eq!(out.samples[..16000], out.samples[16000..32000]);
        assert_eq!(out.samples[..16000], w.samples[..]);
    }

    #[test]
    fn fix_length_is_identity_at_target_and_idempotent() {
        let w = wave(64000);
        let out = fix_length(&w, 64000).unwrap();
        assert_eq!(out, w);
        let again = fix_length(&out, 64000).unwrap();
        assert_eq!(again, w);
    }

    #[test]
    fn fix_length_crops_long_inputs_from_the_start() {
        let w = wave(100_000);
        let out = fix_length(&w, 64000).unwrap();
        assert_eq!(out.samples[..], w.samples[..64000]);
    }

    #[test]
    fn fix_length_rejects_empty() {
        let w = Waveform {
            samples: vec![],
            sample_rate: 16000,
        };
        assert!(fix_length(&w, 64000).is_err());
    }

    #[test]
    fn batches_cover_dataset_without_duplicates() {
        let batches = batch_iter(100, 32, 7, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let all: Vec<usize> = batches.into_iter().flatten().collect();
        let set: BTreeSet<usize> = all.iter().cloned().collect();
        assert_eq!(set.len(), 100);
        assert_eq!(set.iter().cloned().max(), Some(99));
    }

    #[test]
    fn batch_order_is_reproducible_and_epoch_dependent() {
        assert_eq!(batch_iter(50, 8, 3, 2), batch_iter(50, 8, 3, 2));
        assert_ne!(batch_iter(50, 8, 3, 2), batch_iter(50, 8, 3, 3));
        assert_ne!(batch_iter(50, 8, 3, 2), batch_iter(50, 8, 4, 2));
    }
}
