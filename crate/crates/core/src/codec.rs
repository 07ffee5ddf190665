//! Eight-layer residual vector quantizer with per-layer codec merging.
//!
//! Each layer may average-pool its residual input over `m_d`-frame blocks and
//! repeat the block mean back to full length before nearest-neighbour lookup,
//! which makes that layer's codes block-constant. The subtraction that feeds
//! the next layer uses the un-merged residual, so downstream layers still see
//! (and can encode) the detail a merged layer discarded.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::format;
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

pub const NUM_LAYERS: usize = 8;

pub type CodeId = u16;

/// T latent vectors of dimension F, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq<S: Scalar> {
    data: Vec<S>,
    dim: usize,
}

impl<S: Scalar> LatentSeq<S> {
    pub fn new(data: Vec<S>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("latent dim must be >= 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid("latent data length not a multiple of dim"));
        }
        Ok(LatentSeq { data, dim })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        LatentSeq {
            data: vec![S::zero(); frames * dim],
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[S] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [S] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push_frame(&mut self, frame: &[S]) {
        assert_eq!(frame.len(), self.dim);
        self.data.extend_from_slice(frame);
    }

    pub fn raw(&self) -> &[S] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of squares over every entry, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn sub_assign(&mut self, other: &LatentSeq<S>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - *b;
        }
    }
}

/// Per-layer merge rates; `m_d = 1` leaves layer d unmerged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeConfig {
    rates: [usize; NUM_LAYERS],
}

impl MergeConfig {
    pub fn new(rates: [usize; NUM_LAYERS]) -> Result<Self> {
        if rates.iter().any(|&m| m == 0) {
            return Err(Error::invalid("merge rates must all be >= 1"));
        }
        Ok(MergeConfig { rates })
    }

    pub fn none() -> Self {
        MergeConfig {
            rates: [1; NUM_LAYERS],
        }
    }

    /// Merge only layer 1 (index 0) at rate m.
    pub fn first_layer(m: usize) -> Self {
        let mut rates = [1; NUM_LAYERS];
        rates[0] = m;
        MergeConfig { rates }
    }

    /// Merge layers 1..=n at rate m.
    pub fn first_n_layers(n: usize, m: usize) -> Self {
        let mut rates = [1; NUM_LAYERS];
        for r in rates.iter_mut().take(n) {
            *r = m;
        }
        MergeConfig { rates }
    }

    pub fn all_layers(m: usize) -> Self {
        MergeConfig {
            rates: [m; NUM_LAYERS],
        }
    }

    pub fn rate(&self, layer: usize) -> usize {
        self.rates[layer]
    }

    pub fn rates(&self) -> &[usize; NUM_LAYERS] {
        &self.rates
    }

    /// Smallest frame-count multiple that block-aligns every layer.
    pub fn frame_multiple(&self) -> usize {
        self.rates.iter().fold(1usize, |acc, &m| lcm(acc, m))
    }

    pub fn is_identity(&self) -> bool {
        self.rates.iter().all(|&m| m == 1)
    }

    /// Parse "2,1,1,1,1,1,1,1".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad merge rate {p:?}")))
            })
            .collect::<Result<_>>()?;
        if parts.len() != NUM_LAYERS {
            return Err(Error::invalid(format!(
                "merge config needs {NUM_LAYERS} rates, got {}",
                parts.len()
            )));
        }
        let mut rates = [1; NUM_LAYERS];
        rates.copy_from_slice(&parts);
        MergeConfig::new(rates)
    }
}

impl std::fmt::Display for MergeConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let strs: Vec<String> = self.rates.iter().map(|m| m.to_string()).collect();
        write!(f, "{}", strs.join(","))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// One quantizer layer's table of K embedding vectors.
#[derive(Debug, Clone)]
pub struct Codebook<S: Scalar> {
    entries: Vec<S>,
    dim: usize,
    usage: Vec<u64>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(entries: Vec<S>, dim: usize) -> Result<Self> {
        if dim == 0 || entries.len() % dim != 0 {
            return Err(Error::invalid("codebook entries not a multiple of dim"));
        }
        let k = entries.len() / dim;
        if k < 2 {
            return Err(Error::invalid("codebook needs K >= 2 entries"));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Codebook {
            entries,
            dim,
            usage: vec![0; k],
        })
    }

    /// K entries drawn from a seeded standard normal (for tests and priming).
    pub fn random(k: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let entries = (0..k * dim)
            .map(|_| S::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Codebook {
            entries,
            dim,
            usage: vec![0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, idx: usize) -> &[S] {
        &self.entries[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    fn set_usage(&mut self, usage: Vec<u64>) {
        self.usage = usage;
    }
}

/// The 8 x T grid of code indices plus the merge config that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: Vec<Vec<CodeId>>,
    merge: MergeConfig,
    t: usize,
}

impl CodeMatrix {
    pub fn new(rows: Vec<Vec<CodeId>>, merge: MergeConfig) -> Result<Self> {
        if rows.len() != NUM_LAYERS {
            return Err(Error::invalid(format!(
                "code matrix needs {NUM_LAYERS} rows, got {}",
                rows.len()
            )));
        }
        let t = rows[0].len();
        if t == 0 {
            return Err(Error::invalid("code matrix must cover >= 1 frame"));
        }
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("code matrix rows have unequal lengths"));
        }
        Ok(CodeMatrix { rows, merge, t })
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn merge(&self) -> &MergeConfig {
        &self.merge
    }

    pub fn row(&self, layer: usize) -> &[CodeId] {
        &self.rows[layer]
    }

    /// True if every merged layer is constant within each aligned block.
    pub fn block_constant(&self) -> bool {
        for (layer, row) in self.rows.iter().enumerate() {
            let m = self.merge.rate(layer);
            if m == 1 {
                continue;
            }
            for block in row.chunks(m) {
                if block.iter().any(|&c| c != block[0]) {
                    return false;
                }
            }
        }
        true
    }

    /// Check every index against its layer's codebook.
    pub fn validate_indices<S: Scalar>(&self, books: &CodebookSet<S>) -> Result<()> {
        for (layer, row) in self.rows.iter().enumerate() {
            let k = books.books[layer].k();
            for (frame, &idx) in row.iter().enumerate() {
                if (idx as usize) >= k {
                    return Err(Error::CorruptCode {
                        layer,
                        frame,
                        index: idx as usize,
                        k,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Trained codebooks for all layers, bundled with their merge config.
#[derive(Debug, Clone)]
pub struct CodebookSet<S: Scalar> {
    pub books: Vec<Codebook<S>>,
    pub merge: MergeConfig,
}

impl<S: Scalar> CodebookSet<S> {
    pub fn k(&self) -> usize {
        self.books[0].k()
    }

    pub fn dim(&self) -> usize {
        self.books[0].dim()
    }
}

/// Average-pool each aligned `m`-frame block and repeat the mean `m` times.
pub fn merge_residual<S: Scalar>(r: &LatentSeq<S>, m: usize) -> Result<LatentSeq<S>> {
    if m == 0 {
        return Err(Error::invalid("merge rate m must be >= 1"));
    }
    if m == 1 {
        return Ok(r.clone());
    }
    if r.len() % m != 0 {
        return Err(Error::invalid(format!(
            "latent length {} not a multiple of merge rate {m} (pad first)",
            r.len()
        )));
    }
    let dim = r.dim();
    let mut out = LatentSeq::zeros(r.len(), dim);
    let inv = S::from_usize(m).recip();
    for b in 0..r.len() / m {
        let mut mean = vec![S::zero(); dim];
        for t in b * m..(b + 1) * m {
            for (acc, &v) in mean.iter_mut().zip(r.frame(t)) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v = *v * inv;
        }
        for t in b * m..(b + 1) * m {
            out.frame_mut(t).copy_from_slice(&mean);
        }
    }
    Ok(out)
}

/// Nearest-neighbour lookup per frame; ties break to the lowest index.
pub fn quantize_layer<S: Scalar>(
    r: &LatentSeq<S>,
    book: &Codebook<S>,
) -> Result<(Vec<CodeId>, LatentSeq<S>)> {
    if r.dim() != book.dim() {
        return Err(Error::invalid(format!(
            "latent dim {} != codebook dim {}",
            r.dim(),
            book.dim()
        )));
    }
    let k = book.k();
    let mut indices = Vec::with_capacity(r.len());
    let mut quantized = LatentSeq::zeros(r.len(), r.dim());
    for t in 0..r.len() {
        let frame = r.frame(t);
        let mut best = 0usize;
        let mut best_d = S::infinity();
        for e in 0..k {
            let entry = book.entry(e);
            let mut d = S::zero();
            for (&a, &b) in frame.iter().zip(entry) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = e;
            }
        }
        indices.push(best as CodeId);
        quantized.frame_mut(t).copy_from_slice(book.entry(best));
    }
    Ok((indices, quantized))
}

/// Full RVQ encode under the merge config. Returns the code matrix and the
/// residual energy trace `[|r_1|^2 .. |r_9|^2]` (index 0 is before any layer).
pub fn encode_trace<S: Scalar>(
    z: &LatentSeq<S>,
    set: &CodebookSet<S>,
) -> Result<(CodeMatrix, Vec<f64>)> {
    if z.is_empty() {
        return Err(Error::invalid("cannot encode an empty latent sequence"));
    }
    if !z.is_finite() {
        return Err(Error::Numeric("latent sequence contains non-finite values".into()));
    }
    if z.dim() != set.dim() {
        return Err(Error::invalid("latent dim does not match codebooks"));
    }
    let multiple = set.merge.frame_multiple();
    if z.len() % multiple != 0 {
        return Err(Error::invalid(format!(
            "latent length {} not a multiple of merge block size {multiple} (pad first)",
            z.len()
        )));
    }

    let mut residual = z.clone();
    let mut energies = Vec::with_capacity(NUM_LAYERS + 1);
    energies.push(residual.energy());
    let mut rows = Vec::with_capacity(NUM_LAYERS);
    for d in 0..NUM_LAYERS {
        let merged = merge_residual(&residual, set.merge.rate(d))?;
        let (codes, quantized) = quantize_layer(&merged, &set.books[d])?;
        rows.push(codes);
        residual.sub_assign(&quantized);
        energies.push(residual.energy());
    }
    let matrix = CodeMatrix::new(rows, set.merge.clone())?;
    debug_assert!(matrix.block_constant());
    Ok((matrix, energies))
}

pub fn encode<S: Scalar>(z: &LatentSeq<S>, set: &CodebookSet<S>) -> Result<CodeMatrix> {
    encode_trace(z, set).map(|(m, _)| m)
}

/// Sum the selected entries of the first `layers` quantizer levels.
pub fn decode_prefix<S: Scalar>(
    c: &CodeMatrix,
    set: &CodebookSet<S>,
    layers: usize,
) -> Result<LatentSeq<S>> {
    if layers == 0 || layers > NUM_LAYERS {
        return Err(Error::invalid("decode layer count must be in [1, 8]"));
    }
    c.validate_indices(set)?;
    let dim = set.dim();
    let mut out = LatentSeq::zeros(c.frames(), dim);
    for d in 0..layers {
        let book = &set.books[d];
        for t in 0..c.frames() {
            let entry = book.entry(c.row(d)[t] as usize);
            for (o, &e) in out.frame_mut(t).iter_mut().zip(entry) {
                *o += e;
            }
        }
    }
    Ok(out)
}

/// Reconstruct the latent sequence from all 8 layers.
pub fn decode<S: Scalar>(c: &CodeMatrix, set: &CodebookSet<S>) -> Result<LatentSeq<S>> {
    decode_prefix(c, set, NUM_LAYERS)
}

/// 10 log10(|z|^2 / |z - zhat|^2). Exact reconstruction returns +infinity.
pub fn reconstruction_snr<S: Scalar>(z: &LatentSeq<S>, zhat: &LatentSeq<S>) -> Result<f64> {
    if z.len() != zhat.len() || z.dim() != zhat.dim() {
        return Err(Error::invalid("SNR inputs must have equal shape"));
    }
    let signal = z.energy();
    if signal == 0.0 {
        return Err(Error::UndefinedMetric("SNR of a zero-energy signal".into()));
    }
    let mut noise = 0.0f64;
    for (a, b) in z.raw().iter().zip(zhat.raw()) {
        let d = a.as_f64() - b.as_f64();
        noise += d * d;
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

#[derive(Debug, Clone)]
pub struct CodebookTrainReport {
    /// Mean squared quantization error per layer, final epoch.
    pub layer_mse: Vec<f64>,
    /// Layers whose training data held fewer distinct vectors than K.
    pub degenerate_layers: Vec<usize>,
}

/// Options for EMA k-means codebook training.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub k: usize,
    pub iters: usize,
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            k: 64,
            iters: 30,
            decay: 0.99,
            seed: 0,
        }
    }
}

/// Layer-by-layer EMA k-means on the residuals each layer will actually see
/// under the given merge config. Deterministic for a fixed seed.
pub fn train_codebooks<S: Scalar>(
    latents: &[LatentSeq<S>],
    merge: &MergeConfig,
    opts: &TrainOpts,
) -> Result<(CodebookSet<S>, CodebookTrainReport)> {
    if latents.is_empty() {
        return Err(Error::invalid("codebook training needs a non-empty corpus"));
    }
    let dim = latents[0].dim();
    if latents.iter().any(|l| l.dim() != dim) {
        return Err(Error::invalid("latent dims differ across corpus"));
    }
    let multiple = merge.frame_multiple();
    if latents.iter().any(|l| l.len() % multiple != 0) {
        return Err(Error::invalid(
            "latent lengths must be padded to the merge block size before training",
        ));
    }
    if opts.k < 2 {
        return Err(Error::invalid("codebook K must be >= 2"));
    }

    let mut residuals: Vec<LatentSeq<S>> = latents.to_vec();
    let mut books = Vec::with_capacity(NUM_LAYERS);
    let mut layer_mse = Vec::with_capacity(NUM_LAYERS);
    let mut degenerate_layers = Vec::new();

    for d in 0..NUM_LAYERS {
        let m = merge.rate(d);
        // Gather this layer's quantizer inputs: one vector per block.
        let mut data: Vec<f64> = Vec::new();
        for r in &residuals {
            let merged = merge_residual(r, m)?;
            for b in 0..merged.len() / m {
                for &v in merged.frame(b * m) {
                    data.push(v.as_f64());
                }
            }
        }
        let n = data.len() / dim;
        let distinct = count_distinct(&data, dim);
        if distinct < opts.k {
            eprintln!(
                "warning: layer {} has {} distinct residual vectors for K={} (degenerate codebook)",
                d + 1,
                distinct,
                opts.k
            );
            degenerate_layers.push(d);
        }

        let seed = crate::seed::derive_seed(opts.seed, crate::seed::Stream::CodebookInit, d as u64);
        let (entries, usage, mse) = ema_kmeans(&data, n, dim, opts.k, opts.iters, opts.decay, seed);
        layer_mse.push(mse);
        let mut book = Codebook::new(entries.iter().map(|&x| S::from_f64(x)).collect(), dim)?;
        book.set_usage(usage);

        // Quantize and subtract so the next layer trains on what it will see.
        for r in residuals.iter_mut() {
            let merged = merge_residual(r, m)?;
            let (_, q) = quantize_layer(&merged, &book)?;
            r.sub_assign(&q);
        }
        books.push(book);
    }

    Ok((
        CodebookSet {
            books,
            merge: merge.clone(),
        },
        CodebookTrainReport {
            layer_mse,
            degenerate_layers,
        },
    ))
}

fn count_distinct(data: &[f64], dim: usize) -> usize {
    let mut keys: Vec<Vec<u64>> = data
        .chunks(dim)
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// k-means++ init followed by EMA updates with dead-entry re-seeding.
/// Returns (entries, final usage counts, final mean squared error).
fn ema_kmeans(
    data: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    iters: usize,
    decay: f64,
    seed: u64,
) -> (Vec<f64>, Vec<u64>, f64) {
    let mut rng = rng_from_seed(seed);
    let vec_at = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ seeding (duplicates of chosen points can never be re-picked).
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n.max(1));
    centers.extend_from_slice(vec_at(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(vec_at(i), vec_at(first))).collect();
    while centers.len() < k * dim {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with chosen centers; reuse any.
            rng.random_range(0..n)
        } else {
            let threshold = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if acc >= threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = centers.len() / dim;
        centers.extend_from_slice(vec_at(pick));
        for i in 0..n {
            let d = sq_dist(vec_at(i), &centers[c * dim..(c + 1) * dim]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    // EMA state primed so stable assignments are a fixed point.
    let mut ema_count: Vec<f64> = vec![1.0; k];
    let mut ema_sum: Vec<f64> = centers.clone();
    let mut usage = vec![0u64; k];
    let mut mse = 0.0;

    for _ in 0..iters.max(1) {
        let mut counts = vec![0u64; k];
        let mut sums = vec![0.0f64; k * dim];
        let mut assign_err: Vec<f64> = vec![0.0; n];
        let mut total_err = 0.0;
        for i in 0..n {
            let v = vec_at(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(v, &centers[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, &x) in sums[best * dim..(best + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
            assign_err[i] = best_d;
            total_err += best_d;
        }
        mse = total_err / n.max(1) as f64;

        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed dead entries from a squared-error-weighted draw.
                let err_total: f64 = assign_err.iter().sum();
                let pick = if err_total <= 0.0 {
                    rng.random_range(0..n)
                } else {
                    let threshold = rng.random::<f64>() * err_total;
                    let mut acc = 0.0;
                    let mut chosen = n - 1;
                    for (i, &e) in assign_err.iter().enumerate() {
                        acc += e;
                        if acc >= threshold {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                };
                centers[c * dim..(c + 1) * dim].copy_from_slice(vec_at(pick));
                ema_count[c] = 1.0;
                ema_sum[c * dim..(c + 1) * dim].copy_from_slice(vec_at(pick));
                continue;
            }
            ema_count[c] = decay * ema_count[c] + (1.0 - decay) * counts[c] as f64;
            for j in 0..dim {
                ema_sum[c * dim + j] =
                    decay * ema_sum[c * dim + j] + (1.0 - decay) * sums[c * dim + j];
            }
            let denom = ema_count[c].max(1e-9);
            for j in 0..dim {
                centers[c * dim + j] = ema_sum[c * dim + j] / denom;
            }
        }
        usage = counts;
    }

    (centers, usage, mse)
}

// ---------------------------------------------------------------------------
// Binary formats
// ---------------------------------------------------------------------------

const MAGIC_MRVQ: &[u8; 4] = b"MRVQ";
const MAGIC_CODE: &[u8; 4] = b"CODE";
const MAGIC_PATH: &[u8; 4] = b"PATH";
const FORMAT_VERSION: u16 = 1;

impl<S: Scalar> CodebookSet<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(MAGIC_MRVQ);
        body.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        body.write_u8(NUM_LAYERS as u8)?;
        body.write_u16::<LittleEndian>(self.k() as u16)?;
        body.write_u16::<LittleEndian>(self.dim() as u16)?;
        for book in &self.books {
            for &v in book.entries.iter() {
                body.write_f32::<LittleEndian>(v.as_f32())?;
            }
        }
        for &m in self.merge.rates() {
            body.write_u8(m as u8)?;
        }
        std::fs::write(path, format::seal(body))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (body, _hash_ok) = format::unseal(&bytes, "codebook file")?;
        let mut r = Cursor::new(body.as_slice());
        format::expect_magic(&mut r, MAGIC_MRVQ, "codebook file")?;
        let version = r.read_u16::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "codebook file version {version} unsupported"
            )));
        }
        let layers = r.read_u8()? as usize;
        if layers != NUM_LAYERS {
            return Err(Error::Format(format!(
                "codebook file has {layers} layers, expected {NUM_LAYERS}"
            )));
        }
        let k = r.read_u16::<LittleEndian>()? as usize;
        let dim = r.read_u16::<LittleEndian>()? as usize;
        let mut books = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut entries = Vec::with_capacity(k * dim);
            for _ in 0..k * dim {
                entries.push(S::from_f32(r.read_f32::<LittleEndian>()?));
            }
            books.push(Codebook::new(entries, dim)?);
        }
        let mut rates = [1usize; NUM_LAYERS];
        for rate in rates.iter_mut() {
            *rate = r.read_u8()? as usize;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("codebook file has trailing bytes".into()));
        }
        Ok(CodebookSet {
            books,
            merge: MergeConfig::new(rates)?,
        })
    }
}

/// Serialize a code matrix, optionally with an alignment path section.
pub fn save_code_matrix(path: &Path, c: &CodeMatrix, ma_path: Option<&[u32]>) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC_CODE);
    body.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    body.write_u32::<LittleEndian>(c.frames() as u32)?;
    for row in &c.rows {
        for &idx in row {
            body.write_u16::<LittleEndian>(idx)?;
        }
    }
    for &m in c.merge.rates() {
        body.write_u8(m as u8)?;
    }
    if let Some(positions) = ma_path {
        body.extend_from_slice(MAGIC_PATH);
        body.write_u32::<LittleEndian>(positions.len() as u32)?;
        for &p in positions {
            body.write_u32::<LittleEndian>(p)?;
        }
    }
    std::fs::write(path, format::seal(body))?;
    Ok(())
}

pub fn load_code_matrix(path: &Path) -> Result<(CodeMatrix, Option<Vec<u32>>)> {
    let bytes = std::fs::read(path)?;
    let (body, _hash_ok) = format::unseal(&bytes, "code file")?;
    let mut r = Cursor::new(body.as_slice());
    format::expect_magic(&mut r, MAGIC_CODE, "code file")?;
    let version = r.read_u16::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("code file version {version} unsupported")));
    }
    let t = r.read_u32::<LittleEndian>()? as usize;
    let mut rows = Vec::with_capacity(NUM_LAYERS);
    for _ in 0..NUM_LAYERS {
        let mut row = Vec::with_capacity(t);
        for _ in 0..t {
            row.push(r.read_u16::<LittleEndian>()?);
        }
        rows.push(row);
    }
    let mut rates = [1usize; NUM_LAYERS];
    for rate in rates.iter_mut() {
        *rate = r.read_u8()? as usize;
    }
    let matrix = CodeMatrix::new(rows, MergeConfig::new(rates)?)?;

    let mut magic = [0u8; 4];
    let ma_path = match r.read_exact(&mut magic) {
        Ok(()) if &magic == MAGIC_PATH => {
            let count = r.read_u32::<LittleEndian>()? as usize;
            let mut positions = Vec::with_capacity(count);
            for _ in 0..count {
                positions.push(r.read_u32::<LittleEndian>()?);
            }
            Some(positions)
        }
        Ok(()) => return Err(Error::Format("code file has unknown trailing section".into())),
        Err(_) => None,
    };
    Ok((matrix, ma_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent_from(vals: &[f64], dim: usize) -> LatentSeq<f64> {
        LatentSeq::new(vals.to_vec(), dim).unwrap()
    }

    #[test]
    fn merge_pairwise_means() {
        let r = latent_from(&[1.0, 3.0, 5.0, 7.0], 1);
        let merged = merge_residual(&r, 2).unwrap();
        assert_eq!(merged.raw(), &[2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn merge_identity_at_m1() {
        let r = latent_from(&[1.0, 3.0, 5.0], 1);
        assert_eq!(merge_residual(&r, 1).unwrap(), r);
    }

    #[test]
    fn merge_constant_unchanged() {
        let r = latent_from(&[4.0; 12], 2);
        assert_eq!(merge_residual(&r, 3).unwrap(), r);
    }

    #[test]
    fn merge_is_block_idempotent() {
        let r = latent_from(&[0.5, -1.0, 2.0, 3.5, 1.0, 9.0], 1);
        let once = merge_residual(&r, 3).unwrap();
        let twice = merge_residual(&once, 3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn merge_rejects_unpadded() {
        let r = latent_from(&[1.0, 2.0, 3.0], 1);
        assert!(merge_residual(&r, 2).is_err());
    }

    fn toy_book() -> Codebook<f64> {
        // Entries: [0,0], [1,0], [0,1], [2,2]
        Codebook::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0], 2).unwrap()
    }

    #[test]
    fn quantize_exact_hit() {
        let book = toy_book();
        let r = latent_from(&[2.0, 2.0], 2);
        let (idx, q) = quantize_layer(&r, &book).unwrap();
        assert_eq!(idx, vec![3]);
        assert_eq!(q.raw(), &[2.0, 2.0]);
    }

    #[test]
    fn quantize_tie_breaks_low() {
        let book = toy_book();
        // Equidistant between entry 1 ([1,0]) and entry 2 ([0,1]).
        let r = latent_from(&[1.0, 1.0], 2);
        let (idx, _) = quantize_layer(&r, &book).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn quantize_matches_brute_force() {
        let book = Codebook::<f64>::random(8, 4, 42);
        let mut rng = rng_from_seed(43);
        let data: Vec<f64> = (0..32 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = latent_from(&data, 4);
        let (idx, _) = quantize_layer(&r, &book).unwrap();
        for t in 0..r.len() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for e in 0..book.k() {
                let d = sq_dist(r.frame(t), book.entry(e));
                if d < best_d {
                    best_d = d;
                    best = e;
                }
            }
            assert_eq!(idx[t] as usize, best);
        }
    }

    fn random_set(k: usize, dim: usize, merge: MergeConfig, seed: u64) -> CodebookSet<f64> {
        CodebookSet {
            books: (0..NUM_LAYERS)
                .map(|d| Codebook::random(k, dim, seed + d as u64))
                .collect(),
            merge,
        }
    }

    #[test]
    fn encode_merged_layer_is_block_constant_and_rest_unconstrained() {
        let set = random_set(16, 4, MergeConfig::first_layer(2), 7);
        let mut rng = rng_from_seed(9);
        let data: Vec<f64> = (0..40 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = latent_from(&data, 4);
        let c = encode(&z, &set).unwrap();
        for pair in c.row(0).chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
        // Deeper layers see the un-merged remainder, so at least one of them
        // must break block-constancy on generic input.
        let broken = (1..NUM_LAYERS)
            .any(|d| c.row(d).chunks(2).any(|pair| pair[0] != pair[1]));
        assert!(broken);
    }

    #[test]
    fn decode_single_frame_sums_entries() {
        let set = random_set(4, 3, MergeConfig::none(), 11);
        let rows = vec![vec![0u16]; NUM_LAYERS];
        let c = CodeMatrix::new(rows, MergeConfig::none()).unwrap();
        let z = decode(&c, &set).unwrap();
        for j in 0..3 {
            let expect: f64 = (0..NUM_LAYERS).map(|d| set.books[d].entry(0)[j]).sum();
            assert!((z.frame(0)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_rejects_corrupt_codes() {
        let set = random_set(4, 3, MergeConfig::none(), 11);
        let mut rows = vec![vec![0u16; 2]; NUM_LAYERS];
        rows[3][1] = 4; // K = 4, so index 4 is out of range
        let c = CodeMatrix::new(rows, MergeConfig::none()).unwrap();
        match decode(&c, &set) {
            Err(Error::CorruptCode { layer: 3, frame: 1, index: 4, k: 4 }) => {}
            other => panic!("expected corrupt-code error, got {other:?}"),
        }
    }

    #[test]
    fn encode_decode_closure() {
        let set = random_set(8, 4, MergeConfig::first_layer(2), 21);
        let mut rng = rng_from_seed(22);
        let data: Vec<f64> = (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = latent_from(&data, 4);
        let c = encode(&z, &set).unwrap();
        decode(&c, &set).unwrap();
    }

    #[test]
    fn snr_sentinels() {
        let z = latent_from(&[1.0, 2.0], 1);
        assert_eq!(reconstruction_snr(&z, &z).unwrap(), f64::INFINITY);
        let zero = latent_from(&[0.0, 0.0], 1);
        let snr = reconstruction_snr(&z, &zero).unwrap();
        assert!(snr.abs() < 1e-12, "|z - 0| = |z| must give 0 dB, got {snr}");
        assert!(reconstruction_snr(&zero, &z).is_err());
    }

    #[test]
    fn train_converges_to_prototypes() {
        // Corpus of exactly K distinct frames, one quantizer that matters.
        let k = 8;
        let dim = 4;
        let mut rng = rng_from_seed(5);
        let protos: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut data = Vec::new();
        for rep in 0..6 {
            for p in &protos {
                let _ = rep;
                data.extend_from_slice(p);
            }
        }
        let latents = vec![latent_from(&data, dim)];
        let opts = TrainOpts {
            k,
            iters: 40,
            ..TrainOpts::default()
        };
        let (set, report) = train_codebooks(&latents, &MergeConfig::none(), &opts).unwrap();
        assert!(report.layer_mse[0] < 1e-12, "layer-1 MSE {}", report.layer_mse[0]);
        // Every prototype has an entry that matches it (up to permutation).
        for p in &protos {
            let best = (0..k)
                .map(|e| sq_dist(p, set.books[0].entry(e)))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-12, "prototype missing from codebook: dist {best}");
        }
    }

    #[test]
    fn train_same_seed_identical() {
        let mut rng = rng_from_seed(31);
        let data: Vec<f64> = (0..50 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let latents = vec![latent_from(&data, 4)];
        let opts = TrainOpts {
            k: 8,
            iters: 10,
            seed: 3,
            ..TrainOpts::default()
        };
        let (a, _) = train_codebooks(&latents, &MergeConfig::first_layer(2), &opts).unwrap();
        let (b, _) = train_codebooks(&latents, &MergeConfig::first_layer(2), &opts).unwrap();
        for d in 0..NUM_LAYERS {
            assert_eq!(a.books[d].entries, b.books[d].entries);
        }
    }

    #[test]
    fn deeper_layers_reduce_error() {
        let mut rng = rng_from_seed(77);
        let train: Vec<LatentSeq<f64>> = (0..8)
            .map(|_| {
                let data: Vec<f64> = (0..24 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
                latent_from(&data, 4)
            })
            .collect();
        let opts = TrainOpts {
            k: 16,
            iters: 20,
            seed: 9,
            ..TrainOpts::default()
        };
        let (_, report) = train_codebooks(&train, &MergeConfig::none(), &opts).unwrap();
        assert!(
            report.layer_mse[1] <= report.layer_mse[0],
            "layer-2 error {} > layer-1 error {}",
            report.layer_mse[1],
            report.layer_mse[0]
        );
    }

    #[test]
    fn codebook_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("books.mrvq");
        let set = random_set(4, 3, MergeConfig::first_layer(2), 13);
        // Round-trips through f32 storage, so compare via f32.
        set.save(&path).unwrap();
        let back = CodebookSet::<f64>::load(&path).unwrap();
        assert_eq!(back.merge, set.merge);
        assert_eq!(back.k(), set.k());
        for d in 0..NUM_LAYERS {
            for e in 0..set.books[d].k() {
                for (a, b) in set.books[d].entry(e).iter().zip(back.books[d].entry(e)) {
                    assert_eq!(a.as_f32(), b.as_f32());
                }
            }
        }
    }

    #[test]
    fn code_matrix_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.code");
        let rows: Vec<Vec<u16>> = (0..NUM_LAYERS).map(|d| vec![d as u16; 6]).collect();
        let c = CodeMatrix::new(rows, MergeConfig::first_layer(2)).unwrap();
        save_code_matrix(&path, &c, Some(&[0, 0, 1, 2])).unwrap();
        let (back, path_back) = load_code_matrix(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(path_back, Some(vec![0, 0, 1, 2]));

        save_code_matrix(&path, &c, None).unwrap();
        let (_, no_path) = load_code_matrix(&path).unwrap();
        assert_eq!(no_path, None);
    }
}
