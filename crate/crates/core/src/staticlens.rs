// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading weights directly: vectors extracted from block parameters are
//! decoded into token lists, and each list is scored by how semantically
//! coherent its tokens are under an embedding table.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::right_singular_vectors;
use crate::error::{Error, Result};
use crate::lens::TunedLens;
use crate::model::{Block, TransformerModel};
use crate::numerics::{Scalar, Tensor};

/// Unit-norm vector per token id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Rows are normalized; a zero row is an error.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("embedding table"))?;
        if dim == 0 {
            return Err(Error::Shape("zero-width embeddings".into()));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (t, mut r) in rows.into_iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("row {t} has width {}, expected {dim}", r.len())));
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Undefined(format!("embedding of token {t} has norm {norm}")));
            }
            r.iter_mut().for_each(|x| *x /= norm);
            out.push(r);
        }
        Ok(Self { dim, rows: out })
    }

    /// Normalized unembedding columns of `model`, one per token.
    pub fn from_unembedding<T: Scalar>(model: &TransformerModel<T>) -> Result<Self> {
        let u = &model.unembed;
        Self::from_rows((0..u.cols()).map(|t| (0..u.rows()).map(|i| u.at(i, t).as_f64()).collect()).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: usize) -> Result<&[f64]> {
        self.rows
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfRange(format!("token {token} not in a table of {}", self.rows.len())))
    }

    /// Little-endian `u32` count and dim, then `f32` rows.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let count = u32::try_from(self.rows.len()).map_err(|_| Error::OutOfRange("table too large".into()))?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for r in &self.rows {
            for &x in r {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Rows are renormalized after the `f32` round trip.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut word)?;
                row.push(f32::from_le_bytes(word) as f64);
            }
            rows.push(row);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Shape(format!("{} trailing bytes after {count} x {dim} table", rest.len())));
        }
        Self::from_rows(rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// How a residual-space vector is decoded. The final LayerNorm is skipped.
#[derive(Clone, Copy, Debug)]
pub enum ProjectionLens<'a, T> {
    Logit,
    /// Applies the layer's translator, bias included. The final block of an
    /// extended lens is not run.
    Tuned(&'a TunedLens<T>),
}

/// Token ids of the `k` largest logits of `v` decoded at `layer`, lowest
/// id first among equal logits.
pub fn project_param<T: Scalar>(
    v: &[f64],
    lens: ProjectionLens<'_, T>,
    layer: usize,
    model: &TransformerModel<T>,
    k: usize,
) -> Result<Vec<usize>> {
    let d = model.d_model();
    let vocab = model.vocab_size();
    if k == 0 || k > vocab {
        return Err(Error::OutOfRange(format!("k = {k} with {vocab} tokens")));
    }
    if v.len() != d {
        return Err(Error::Shape(format!("vector of length {} for width {d}", v.len())));
    }
    if layer > model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", model.n_layers())));
    }
    let x = Tensor::<T>::from_vec(&[1, d], v.iter().map(|&a| T::of(a)).collect())?;
    let x = match lens {
        ProjectionLens::Tuned(tuned) if layer < model.n_layers() => {
            if tuned.config != model.config {
                return Err(Error::InvalidArgument("lens was trained for a different model".into()));
            }
            tuned.translators[layer].apply(&x)?
        }
        _ => x,
    };
    let logits: Vec<f64> = x.matmul(&model.unembed)?.data().iter().map(|z| z.as_f64()).collect();
    let mut ids: Vec<usize> = (0..vocab).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

/// Mean of `E(t_i) . E(t_j)` over all ordered pairs, self-pairs included.
pub fn interpretability_score(tokens: &[usize], table: &EmbeddingTable) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Empty("token list"));
    }
    let e = tokens.iter().map(|&t| table.get(t)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for a in &e {
        for b in &e {
            total += a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Ok((total / (e.len() * e.len()) as f64).clamp(-1.0, 1.0))
}

/// Uniform random permutation of all entries.
pub fn shuffle_baseline<T: Scalar>(matrix: &Tensor<T>, seed: u64) -> Tensor<T> {
    let mut out = matrix.clone();
    out.data_mut().shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Which side of an attention matrix indexes heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadAxis {
    /// `W_Q`, `W_K`, `W_V`: head `h` owns a block of columns.
    Columns,
    /// `W_O`: head `h` owns a block of rows.
    Rows,
}

/// Entries permuted within each head's block only.
pub fn shuffle_headwise<T: Scalar>(matrix: &Tensor<T>, heads: usize, axis: HeadAxis, seed: u64) -> Result<Tensor<T>> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let span = match axis {
        HeadAxis::Columns => cols,
        HeadAxis::Rows => rows,
    };
    if heads == 0 || span % heads != 0 {
        return Err(Error::Shape(format!("{span} not divisible into {heads} heads")));
    }
    let width = span / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = matrix.clone();
    for h in 0..heads {
        let cells: Vec<(usize, usize)> = match axis {
            HeadAxis::Columns => (0..rows).flat_map(|i| (h * width..(h + 1) * width).map(move |j| (i, j))).collect(),
            HeadAxis::Rows => (h * width..(h + 1) * width).flat_map(|i| (0..cols).map(move |j| (i, j))).collect(),
        };
        let mut values: Vec<T> = cells.iter().map(|&(i, j)| matrix.at(i, j)).collect();
        values.shuffle(&mut rng);
        for (&(i, j), v) in cells.iter().zip(values) {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Residual-space vectors read off a block's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    /// Rows of `W_out`, one per hidden unit.
    MlpOutRows,
    /// Columns of `W_in`, one per hidden unit.
    MlpInColumns,
    /// Right singular vectors of `W_out`.
    MlpOutSvd,
    /// Left singular vectors of `W_in`.
    MlpInSvd,
    /// Per head, right singular vectors of `W_V^h W_O^h` (what the head writes).
    OvSvd,
    /// Per head, left singular vectors of `W_Q^h (W_K^h)^T` (what the head queries for).
    QkSvd,
}

impl Extractor {
    pub const ALL: [Extractor; 6] = [
        Extractor::MlpOutRows,
        Extractor::MlpInColumns,
        Extractor::MlpOutSvd,
        Extractor::MlpInSvd,
        Extractor::OvSvd,
        Extractor::QkSvd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Extractor::MlpOutRows => "mlp-out-rows",
            Extractor::MlpInColumns => "mlp-in-columns",
            Extractor::MlpOutSvd => "mlp-out-svd",
            Extractor::MlpInSvd => "mlp-in-svd",
            Extractor::OvSvd => "ov-svd",
            Extractor::QkSvd => "qk-svd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown extractor {s:?}")))
    }

    /// Extracted vectors in a fixed order; per-head families are
    /// concatenated head by head, `d / heads` vectors each.
    pub fn extract<T: Scalar>(self, block: &Block<T>, heads: usize) -> Result<Vec<Vec<f64>>> {
        let f64m = |t: &Tensor<T>| -> Tensor<f64> { t.cast() };
        match self {
            Extractor::MlpOutRows => {
                let w = f64m(&block.w_out);
                Ok((0..w.rows()).map(|i| w.row(i).to_vec()).collect())
            }
            Extractor::MlpInColumns => {
                let w = f64m(&block.w_in).transpose();
                Ok((0..w.rows()).map(|i| w.row(i).to_vec()).collect())
            }
            Extractor::MlpOutSvd => right_singular_vectors(&f64m(&block.w_out)),
            Extractor::MlpInSvd => right_singular_vectors(&f64m(&block.w_in).transpose()),
            Extractor::OvSvd | Extractor::QkSvd => {
                let d = block.w_v.rows();
                if heads == 0 || d % heads != 0 {
                    return Err(Error::Shape(format!("width {d} not divisible into {heads} heads")));
                }
                let hd = d / heads;
                let mut out = Vec::with_capacity(d);
                for h in 0..heads {
                    let cols = |w: &Tensor<T>| -> Tensor<f64> {
                        Tensor::from_fn(&[d, hd], |i| w.at(i / hd, h * hd + i % hd).as_f64())
                    };
                    let product = if self == Extractor::OvSvd {
                        let o = Tensor::<f64>::from_fn(&[hd, d], |i| block.w_o.at(h * hd + i / d, i % d).as_f64());
                        cols(&block.w_v).matmul(&o)?
                    } else {
                        // left singular vectors of Q K^T are right ones of K Q^T
                        cols(&block.w_k).matmul_t(&cols(&block.w_q))?
                    };
                    out.extend(right_singular_vectors(&product)?.into_iter().take(hd));
                }
                Ok(out)
            }
        }
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The block with MLP matrices shuffled whole and attention matrices
/// shuffled head by head.
pub fn shuffled_block<T: Scalar>(block: &Block<T>, heads: usize, seed: u64) -> Result<Block<T>> {
    let mut out = block.clone();
    let s = |i: u64| seed.wrapping_mul(6).wrapping_add(i);
    out.w_in = shuffle_baseline(&block.w_in, s(0));
    out.w_out = shuffle_baseline(&block.w_out, s(1));
    out.w_q = shuffle_headwise(&block.w_q, heads, HeadAxis::Columns, s(2))?;
    out.w_k = shuffle_headwise(&block.w_k, heads, HeadAxis::Columns, s(3))?;
    out.w_v = shuffle_headwise(&block.w_v, heads, HeadAxis::Columns, s(4))?;
    out.w_o = shuffle_headwise(&block.w_o, heads, HeadAxis::Rows, s(5))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticScore {
    pub extractor: Extractor,
    /// Block index, `0..L`.
    pub layer: usize,
    pub index: usize,
    pub score_real: f64,
    pub score_shuffled: Vec<f64>,
}

impl StaticScore {
    pub fn shuffled_mean(&self) -> f64 {
        self.score_shuffled.iter().sum::<f64>() / self.score_shuffled.len().max(1) as f64
    }

    /// Shuffled scores strictly above the real one; 0 means the real score
    /// ranks first.
    pub fn rank(&self) -> usize {
        self.score_shuffled.iter().filter(|&&s| s > self.score_real).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticConfig {
    pub k: usize,
    pub n_shuffles: usize,
    pub seed: u64,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_shuffles: 20,
            seed: 0,
        }
    }
}

/// Scores every extracted vector of `layer` and the same-index vector of
/// each shuffled copy of the block. Vectors are decoded at the block's
/// output layer `layer + 1`.
pub fn static_scores<T: Scalar>(
    model: &TransformerModel<T>,
    lens: ProjectionLens<'_, T>,
    table: &EmbeddingTable,
    extractor: Extractor,
    layer: usize,
    config: &StaticConfig,
) -> Result<Vec<StaticScore>> {
    let block = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::OutOfRange(format!("block {layer} of {}", model.n_layers())))?
        .block()
        .ok_or_else(|| Error::InvalidArgument(format!("block {layer} was deleted")))?;
    let heads = model.config.n_heads;
    let score = |v: &[f64]| -> Result<f64> {
        interpretability_score(&project_param(v, lens, layer + 1, model, config.k)?, table)
    };
    let real = extractor.extract(block, heads)?;
    let mut rows = real
        .iter()
        .enumerate()
        .map(|(index, v)| {
            Ok(StaticScore {
                extractor,
                layer,
                index,
                score_real: score(v)?,
                score_shuffled: Vec::with_capacity(config.n_shuffles),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for s in 0..config.n_shuffles as u64 {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(s).wrapping_add(layer as u64 * 7919);
        let vectors = extractor.extract(&shuffled_block(block, heads, seed)?, heads)?;
        for (row, v) in rows.iter_mut().zip(&vectors) {
            row.score_shuffled.push(score(v)?);
        }
    }
    Ok(rows)
}

pub fn static_scores_csv(rows: &[StaticScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["extractor", "layer", "index", "score_real", "score_shuffled_mean"])?;
    for r in rows {
        w.write_record([
            r.extractor.name().to_string(),
            r.layer.to_string(),
            r.index.to_string(),
            format!("{:.9}", r.score_real),
            format!("{:.9}", r.shuffled_mean()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
