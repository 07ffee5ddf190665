//! Deterministic synthetic corpus: phoneme sequences, frame-level alignments,
//! and latent frames built from per-phoneme prototype vectors.
//!
//! Every utterance is a pure function of (seed, phonemes, durations), so any
//! downstream claim can be checked against exact ground truth. Frames are
//! never stored; corpus files hold only the recipe.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentSeq;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed, Stream};

pub type PhonemeId = u16;

/// A phoneme transcription: ids in `[0, v_p)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSeq {
    symbols: Vec<PhonemeId>,
}

impl PhonemeSeq {
    pub fn new(symbols: Vec<PhonemeId>, v_p: u16) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("phoneme sequence must be non-empty"));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= v_p) {
            return Err(Error::invalid(format!(
                "phoneme id {bad} out of range for vocabulary {v_p}"
            )));
        }
        Ok(PhonemeSeq { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[PhonemeId] {
        &self.symbols
    }
}

/// Run-length phoneme alignment: `(phoneme, frames)` pairs with every run >= 1 frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPhonemeSeq {
    runs: Vec<(PhonemeId, usize)>,
}

impl AlignedPhonemeSeq {
    pub fn new(runs: Vec<(PhonemeId, usize)>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("alignment must have at least one run"));
        }
        if runs.iter().any(|&(_, n)| n == 0) {
            return Err(Error::invalid("alignment runs must all cover >= 1 frame"));
        }
        Ok(AlignedPhonemeSeq { runs })
    }

    pub fn runs(&self) -> &[(PhonemeId, usize)] {
        &self.runs
    }

    /// Total frame count `T = sum of run lengths`.
    pub fn total_frames(&self) -> usize {
        self.runs.iter().map(|&(_, n)| n).sum()
    }

    /// The underlying phoneme sequence (one symbol per run, in order).
    pub fn run_phonemes(&self) -> Vec<PhonemeId> {
        self.runs.iter().map(|&(p, _)| p).collect()
    }

    /// Frame-rate expansion: position t holds the phoneme whose run covers t.
    pub fn expand(&self) -> Vec<PhonemeId> {
        let mut out = Vec::with_capacity(self.total_frames());
        for &(p, n) in &self.runs {
            for _ in 0..n {
                out.push(p);
            }
        }
        out
    }

    /// Right-pad by extending the final run until `T` is a multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> AlignedPhonemeSeq {
        assert!(m >= 1);
        let t = self.total_frames();
        let rem = t % m;
        let mut runs = self.runs.clone();
        if rem != 0 {
            runs.last_mut().unwrap().1 += m - rem;
        }
        AlignedPhonemeSeq { runs }
    }

    /// Downsample to the block rate: each `m`-frame block takes the phoneme of
    /// its first frame, then a repair pass re-assigns blocks so every run keeps
    /// at least one (a short run swallowed by a neighbour steals a block from
    /// the nearest run that owns two or more).
    ///
    /// Output length is `ceil(T / m)` except in the degenerate case where the
    /// alignment has more runs than blocks, in which case the output grows to
    /// one block per run.
    pub fn downsample(&self, m: usize) -> Result<AlignedPhonemeSeq> {
        if m == 0 {
            return Err(Error::invalid("downsample rate m must be >= 1"));
        }
        if m == 1 {
            return Ok(self.clone());
        }
        let padded = self.pad_to_multiple(m);
        let blocks = padded.total_frames() / m;

        // Count blocks whose first frame falls inside each run.
        let mut counts = vec![0usize; padded.runs.len()];
        let mut run_idx = 0;
        let mut run_end = padded.runs[0].1;
        for b in 0..blocks {
            let first_frame = b * m;
            while first_frame >= run_end {
                run_idx += 1;
                run_end += padded.runs[run_idx].1;
            }
            counts[run_idx] += 1;
        }

        // Completeness repair: every run must own at least one block.
        for i in 0..counts.len() {
            if counts[i] > 0 {
                continue;
            }
            let donor = (0..counts.len())
                .filter(|&j| counts[j] >= 2)
                .min_by_key(|&j| (j.abs_diff(i), j));
            match donor {
                Some(j) => {
                    counts[j] -= 1;
                    counts[i] += 1;
                }
                None => {
                    // More runs than blocks: grow rather than drop a phoneme.
                    counts[i] = 1;
                }
            }
        }

        let runs = padded
            .runs
            .iter()
            .zip(counts)
            .map(|(&(p, _), n)| (p, n))
            .collect();
        AlignedPhonemeSeq::new(runs)
    }
}

/// A generated utterance: latent frames plus the exact alignment they realize.
#[derive(Debug, Clone)]
pub struct SyntheticUtterance<S: Scalar> {
    pub frames: LatentSeq<S>,
    pub phonemes: PhonemeSeq,
    pub alignment: AlignedPhonemeSeq,
    pub seed: u64,
    pub noise_std: f64,
}

impl<S: Scalar> SyntheticUtterance<S> {
    /// Frames and alignment right-padded to a multiple of `m`
    /// (final frame repeated, final run extended).
    pub fn padded(&self, m: usize) -> (LatentSeq<S>, AlignedPhonemeSeq) {
        let t = self.frames.len();
        let alignment = self.alignment.pad_to_multiple(m);
        let t_pad = alignment.total_frames();
        let mut frames = self.frames.clone();
        let last = self.frames.frame(t - 1).to_vec();
        for _ in t..t_pad {
            frames.push_frame(&last);
        }
        (frames, alignment)
    }
}

/// Concatenate utterances end to end (shared prototype table makes this exact).
pub fn concat_utterances<S: Scalar>(
    a: &SyntheticUtterance<S>,
    b: &SyntheticUtterance<S>,
    v_p: u16,
) -> SyntheticUtterance<S> {
    let mut symbols = a.phonemes.symbols().to_vec();
    symbols.extend_from_slice(b.phonemes.symbols());
    let mut runs = a.alignment.runs().to_vec();
    runs.extend_from_slice(b.alignment.runs());
    let mut frames = a.frames.clone();
    for t in 0..b.frames.len() {
        frames.push_frame(b.frames.frame(t));
    }
    SyntheticUtterance {
        frames,
        phonemes: PhonemeSeq::new(symbols, v_p).expect("concat of valid sequences"),
        alignment: AlignedPhonemeSeq::new(runs).expect("concat of valid alignments"),
        seed: a.seed,
        noise_std: a.noise_std,
    }
}

/// Everything needed to generate a corpus deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    /// Phoneme vocabulary size.
    pub v_p: u16,
    /// Latent dimension F.
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Utterance length bounds (phonemes), inclusive.
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Per-phoneme duration bounds (frames), inclusive.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Draw utterance phonemes without replacement (needs max_phonemes <= v_p).
    pub unique_phonemes: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            v_p: 40,
            dim: 16,
            count: 100,
            seed: 0,
            noise_std: 0.0,
            min_phonemes: 4,
            max_phonemes: 10,
            min_duration: 2,
            max_duration: 12,
            unique_phonemes: false,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.v_p < 2 {
            return Err(Error::invalid("v_p must be >= 2"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::invalid("bad phoneme-count bounds"));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::invalid("bad duration bounds"));
        }
        if self.unique_phonemes && self.max_phonemes > self.v_p as usize {
            return Err(Error::invalid(
                "unique_phonemes needs max_phonemes <= v_p",
            ));
        }
        Ok(())
    }
}

/// Prototype table plus the machinery to realize utterances from it.
///
/// Prototypes are unit-norm Gaussian draws, one per phoneme, fixed by the
/// master seed. In 16 dimensions they are near-orthogonal and pairwise
/// distinct, which keeps the zero-noise phoneme -> frame map injective.
pub struct Synthesizer<S: Scalar> {
    prototypes: Vec<Vec<S>>,
    v_p: u16,
    dim: usize,
}

impl<S: Scalar> Synthesizer<S> {
    pub fn new(v_p: u16, dim: usize, master_seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(master_seed, Stream::Prototypes, 0));
        let mut prototypes = Vec::with_capacity(v_p as usize);
        for _ in 0..v_p {
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            prototypes.push(raw.iter().map(|&x| S::from_f64(x / norm)).collect());
        }
        Synthesizer {
            prototypes,
            v_p,
            dim,
        }
    }

    pub fn from_config(config: &CorpusConfig) -> Self {
        Self::new(config.v_p, config.dim, config.seed)
    }

    pub fn v_p(&self) -> u16 {
        self.v_p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, p: PhonemeId) -> &[S] {
        &self.prototypes[p as usize]
    }

    /// Realize one utterance: frame t is the prototype of its aligned phoneme
    /// plus seeded Gaussian noise of scale `noise_std`.
    pub fn gen_utterance(
        &self,
        phonemes: &PhonemeSeq,
        durations: &[usize],
        seed: u64,
        noise_std: f64,
    ) -> Result<SyntheticUtterance<S>> {
        if durations.len() != phonemes.len() {
            return Err(Error::invalid(format!(
                "durations length {} != phoneme count {}",
                durations.len(),
                phonemes.len()
            )));
        }
        if durations.iter().any(|&d| d == 0) {
            return Err(Error::invalid("every duration must be >= 1 frame"));
        }
        if noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        let runs: Vec<(PhonemeId, usize)> = phonemes
            .symbols()
            .iter()
            .copied()
            .zip(durations.iter().copied())
            .collect();
        let alignment = AlignedPhonemeSeq::new(runs)?;
        let expanded = alignment.expand();

        let mut rng = rng_from_seed(seed);
        let mut frames = LatentSeq::zeros(expanded.len(), self.dim);
        for (t, &p) in expanded.iter().enumerate() {
            let proto = &self.prototypes[p as usize];
            let frame = frames.frame_mut(t);
            for (f, slot) in frame.iter_mut().enumerate() {
                let n: f64 = rng.sample(StandardNormal);
                *slot = proto[f] + S::from_f64(noise_std * n);
            }
        }
        Ok(SyntheticUtterance {
            frames,
            phonemes: phonemes.clone(),
            alignment,
            seed,
            noise_std,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    version: u32,
    #[serde(rename = "V_p")]
    v_p: u16,
    #[serde(rename = "F")]
    dim: usize,
    count: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UtteranceRecord {
    id: usize,
    seed: u64,
    phonemes: Vec<PhonemeId>,
    durations: Vec<usize>,
    noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub count: usize,
    pub total_frames: usize,
}

fn draw_records(config: &CorpusConfig) -> Vec<UtteranceRecord> {
    (0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(config.seed, Stream::Utterance, i as u64));
            let len = rng.random_range(config.min_phonemes..=config.max_phonemes);
            let phonemes: Vec<PhonemeId> = if config.unique_phonemes {
                // Partial Fisher-Yates over the vocabulary.
                let mut pool: Vec<PhonemeId> = (0..config.v_p).collect();
                (0..len)
                    .map(|j| {
                        let pick = rng.random_range(j..pool.len());
                        pool.swap(j, pick);
                        pool[j]
                    })
                    .collect()
            } else {
                (0..len).map(|_| rng.random_range(0..config.v_p)).collect()
            };
            let durations: Vec<usize> = (0..len)
                .map(|_| rng.random_range(config.min_duration..=config.max_duration))
                .collect();
            let seed = rng.random::<u64>();
            UtteranceRecord {
                id: i,
                seed,
                phonemes,
                durations,
                noise_std: config.noise_std,
            }
        })
        .collect()
}

/// Write a JSONL corpus: header line, then one record per utterance.
/// Byte-identical for identical configs.
pub fn gen_corpus(config: &CorpusConfig, path: &Path) -> Result<CorpusStats> {
    config.validate()?;
    let records = draw_records(config);
    let total_frames = records.iter().map(|r| r.durations.iter().sum::<usize>()).sum();

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        version: 1,
        v_p: config.v_p,
        dim: config.dim,
        count: config.count,
        seed: config.seed,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for rec in &records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(CorpusStats {
        count: config.count,
        total_frames,
    })
}

/// Generate a corpus directly in memory (same records a corpus file would hold).
pub fn gen_corpus_in_memory<S: Scalar>(
    config: &CorpusConfig,
) -> Result<(Synthesizer<S>, Vec<SyntheticUtterance<S>>)> {
    config.validate()?;
    let synth = Synthesizer::from_config(config);
    let records = draw_records(config);
    let utterances = records
        .par_iter()
        .map(|rec| realize_record(&synth, rec, config.v_p))
        .collect::<Result<Vec<_>>>()?;
    Ok((synth, utterances))
}

fn realize_record<S: Scalar>(
    synth: &Synthesizer<S>,
    rec: &UtteranceRecord,
    v_p: u16,
) -> Result<SyntheticUtterance<S>> {
    let phonemes = PhonemeSeq::new(rec.phonemes.clone(), v_p)?;
    synth.gen_utterance(&phonemes, &rec.durations, rec.seed, rec.noise_std)
}

/// Load a corpus file and regenerate every utterance's frames.
pub fn load_corpus<S: Scalar>(path: &Path) -> Result<(CorpusMeta, Vec<SyntheticUtterance<S>>)> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("corpus file is empty (missing header)".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)?;
    if header.version != 1 {
        return Err(Error::Format(format!(
            "unsupported corpus version {}",
            header.version
        )));
    }
    let synth = Synthesizer::<S>::new(header.v_p, header.dim, header.seed);
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<UtteranceRecord>(&line)?);
    }
    if records.len() != header.count {
        return Err(Error::Format(format!(
            "corpus header says {} utterances, file holds {}",
            header.count,
            records.len()
        )));
    }
    let utterances = records
        .par_iter()
        .map(|rec| realize_record(&synth, rec, header.v_p))
        .collect::<Result<Vec<_>>>()?;
    Ok(
        (CorpusMeta {
            v_p: header.v_p,
            dim: header.dim,
            count: header.count,
            seed: header.seed,
        },
        utterances),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusMeta {
    pub v_p: u16,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
}
