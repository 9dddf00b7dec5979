// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-ablation erasure and the directions whose erasure matters most.

mod cbe;

use std::f64::consts::LN_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lens::{record_lens_head, TunedLens};
use crate::model::{windows, TransformerModel};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::stats::{kl_from_log_probs, log_softmax, spearman_rho};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub use cbe::{
    causal_basis_extraction, largest_principal_angle, right_singular_vectors, CbeConfig,
    InfluenceObjective,
};

const UNIT_TOLERANCE: f64 = 1e-6;

/// Mean hidden state at one layer over a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureContext {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

impl ErasureContext {
    /// Mean of the rows of `h`.
    pub fn from_states<T: Scalar>(layer: usize, h: &Tensor<T>) -> Result<Self> {
        if h.rows() == 0 {
            return Err(Error::Empty("reference states"));
        }
        let mut mean = vec![0.0; h.cols()];
        for r in 0..h.rows() {
            for (m, x) in mean.iter_mut().zip(h.row(r)) {
                *m += x.as_f64();
            }
        }
        let n = h.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Self {
            layer,
            mean,
            count: h.rows(),
        })
    }

    /// Mean of `h_layer` over every position of consecutive windows.
    pub fn from_model<T: Scalar>(
        model: &TransformerModel<T>,
        stream: &[usize],
        seq: usize,
        layer: usize,
    ) -> Result<Self> {
        let mut sum = vec![0.0; model.d_model()];
        let mut count = 0usize;
        for w in windows(stream, seq) {
            let inputs = &w[..w.len() - 1];
            let h = model.hidden_at(inputs, SeqLayout::single(inputs.len()), layer)?;
            for r in 0..h.rows() {
                for (s, x) in sum.iter_mut().zip(h.row(r)) {
                    *s += x.as_f64();
                }
            }
            count += h.rows();
        }
        if count == 0 {
            return Err(Error::Empty("reference stream"));
        }
        Ok(Self {
            layer,
            mean: sum.iter().map(|s| s / count as f64).collect(),
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_unit(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Shape(format!("direction of length {} for width {d}", v.len())));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!("direction has norm {n}, expected 1")));
    }
    Ok(())
}

/// `h + v <x̄ - h, v>`: set the coordinate along unit `v` to its mean.
pub fn mean_ablate(h: &[f64], v: &[f64], ctx: &ErasureContext) -> Result<Vec<f64>> {
    check_unit(v, ctx.dim())?;
    if h.len() != ctx.dim() {
        return Err(Error::Shape(format!("state of length {}", h.len())));
    }
    let c: f64 = v.iter().zip(h.iter().zip(&ctx.mean)).map(|(vi, (hi, mi))| vi * (mi - hi)).sum();
    Ok(h.iter().zip(v).map(|(hi, vi)| hi + c * vi).collect())
}

/// [`mean_ablate`] applied to every row.
pub fn mean_ablate_rows<T: Scalar>(h: &Tensor<T>, v: &[f64], ctx: &ErasureContext) -> Result<Tensor<T>> {
    check_unit(v, ctx.dim())?;
    if h.cols() != ctx.dim() {
        return Err(Error::Shape(format!("states {:?}", h.shape())));
    }
    let mut out = h.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let c: f64 = v
            .iter()
            .zip(row.iter().zip(&ctx.mean))
            .map(|(vi, (hi, mi))| vi * (mi - hi.as_f64()))
            .sum();
        for (x, vi) in row.iter_mut().zip(v) {
            *x = T::of(x.as_f64() + c * vi);
        }
    }
    Ok(out)
}

/// A differentiable map from hidden states `[n, d]` to logits `[n, V]`.
pub trait LatentFn<T: Scalar> {
    fn dim(&self) -> usize;

    fn record(&self, tape: &mut Tape<T>, h: Var, layout: SeqLayout) -> Result<Var>;

    fn logits(&self, h: &Tensor<T>, layout: SeqLayout) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let z = self.record(&mut tape, x, layout)?;
        Ok(tape.value(z).clone())
    }
}

/// `h W` for a fixed `[d, V]` matrix.
#[derive(Clone, Debug)]
pub struct LinearReadout<T> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> LatentFn<T> for LinearReadout<T> {
    fn dim(&self) -> usize {
        self.weight.rows()
    }

    fn record(&self, tape: &mut Tape<T>, h: Var, _layout: SeqLayout) -> Result<Var> {
        let w = tape.constant(self.weight.clone());
        Ok(tape.matmul(h, w))
    }
}

/// The tuned lens decoding `h_layer`.
#[derive(Clone, Copy, Debug)]
pub struct LensReadout<'a, T> {
    pub lens: &'a TunedLens<T>,
    pub model: &'a TransformerModel<T>,
    pub layer: usize,
}

impl<'a, T: Scalar> LensReadout<'a, T> {
    pub fn new(lens: &'a TunedLens<T>, model: &'a TransformerModel<T>, layer: usize) -> Result<Self> {
        if lens.translators.len() != model.n_layers() || lens.config.d_model != model.d_model() {
            return Err(Error::Shape("lens does not fit the model".into()));
        }
        if layer > model.n_layers() {
            return Err(Error::OutOfRange(format!("layer {layer}")));
        }
        Ok(Self { lens, model, layer })
    }
}

impl<T: Scalar> LatentFn<T> for LensReadout<'_, T> {
    fn dim(&self) -> usize {
        self.model.d_model()
    }

    fn record(&self, tape: &mut Tape<T>, h: Var, layout: SeqLayout) -> Result<Var> {
        match self.lens.translators.get(self.layer) {
            Some(t) => {
                let a = tape.constant(t.a.clone());
                let b = tape.constant(t.b.clone());
                let z = tape.matmul_t(h, a);
                let z = tape.add_row(z, b);
                record_lens_head(tape, self.model, z, self.lens.include_final_block, layout)
            }
            None => record_lens_head(tape, self.model, h, false, layout),
        }
    }
}

fn mean_kl_bits<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> f64 {
    let n = p.rows();
    let total: f64 = (0..n)
        .map(|r| kl_from_log_probs(&log_softmax(p.row(r)), &log_softmax(q.row(r))))
        .sum();
    total / n as f64 / LN_2
}

/// Mean `KL(f(h) || f(ablate(h, v)))` in bits over the rows of `h`.
pub fn influence<T: Scalar>(
    v: &[f64],
    f: &dyn LatentFn<T>,
    h: &Tensor<T>,
    layout: SeqLayout,
    ctx: &ErasureContext,
) -> Result<f64> {
    if h.rows() == 0 {
        return Err(Error::Empty("influence dataset"));
    }
    let ablated = mean_ablate_rows(h, v, ctx)?;
    Ok(mean_kl_bits(&f.logits(h, layout)?, &f.logits(&ablated, layout)?))
}

/// Mean `KL(M(x) || M_{>l}(ablate(h_l, v)))` in bits, with the erasure
/// applied at every position at once.
pub fn model_influence<T: Scalar>(
    v: &[f64],
    model: &TransformerModel<T>,
    ids: &[usize],
    layout: SeqLayout,
    ctx: &ErasureContext,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Empty("influence dataset"));
    }
    let trace = model.forward_batch(ids, layout)?;
    let layer = ctx.layer;
    if layer > model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer}")));
    }
    let ablated = mean_ablate_rows(&trace.hidden[layer], v, ctx)?;
    let z = model.run_suffix(layer, &ablated, layout)?;
    Ok(mean_kl_bits(&trace.logits, &z))
}

/// Orthonormal directions at one layer, by descending influence.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalBasis {
    pub layer: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Bits, same order as `vectors`.
    pub influences: Vec<f64>,
}

impl CausalBasis {
    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Largest `|<v_i, v_j> - δ_ij|`.
    pub fn gram_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate() {
                let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((g - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    /// First `m` vectors.
    pub fn top(&self, m: usize) -> &[Vec<f64>] {
        &self.vectors[..m.min(self.k())]
    }
}

pub fn bases_to_container(bases: &[CausalBasis]) -> Result<Container> {
    let mut c = Container::new();
    c.set_meta("kind", "basis")?;
    c.set_meta("layers", bases.iter().map(|b| b.layer).collect::<Vec<_>>())?;
    for b in bases {
        let (k, d) = (b.k(), b.dim());
        let flat: Vec<f64> = b.vectors.iter().flatten().copied().collect();
        c.push(format!("basis.{}.V", b.layer), &Tensor::<f64>::from_vec(&[k, d], flat)?);
        c.push(format!("basis.{}.sigma", b.layer), &Tensor::<f64>::vector(b.influences.clone()));
    }
    Ok(c)
}

/// Vectors are stored as `f32`, so orthonormality holds to single
/// precision after a round trip.
pub fn bases_from_container(c: &Container) -> Result<Vec<CausalBasis>> {
    let kind: String = c.meta_as("kind")?;
    if kind != "basis" {
        return Err(Error::Format(format!("expected a basis file, found {kind}")));
    }
    let layers: Vec<usize> = c.meta_as("layers")?;
    layers
        .into_iter()
        .map(|layer| {
            let name = format!("basis.{layer}.sigma");
            let k = c
                .shape(&name)
                .ok_or_else(|| Error::Format(format!("missing {name}")))?
                .first()
                .copied()
                .unwrap_or(0);
            let vname = format!("basis.{layer}.V");
            let d = c.shape(&vname).and_then(|s| s.get(1).copied()).unwrap_or(0);
            let v: Tensor<f64> = c.get(&vname, &[k, d])?;
            let sigma: Tensor<f64> = c.get(&name, &[k])?;
            Ok(CausalBasis {
                layer,
                vectors: (0..k).map(|i| v.row(i).to_vec()).collect(),
                influences: sigma.into_vec(),
            })
        })
        .collect()
}

pub fn save_bases(bases: &[CausalBasis], path: impl AsRef<Path>) -> Result<()> {
    bases_to_container(bases)?.save(path)
}

pub fn load_bases(path: impl AsRef<Path>) -> Result<Vec<CausalBasis>> {
    bases_from_container(&Container::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub index: usize,
    pub lens_bits: f64,
    pub model_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub layer: usize,
    pub spearman: f64,
    pub rows: Vec<FidelityRow>,
}

impl FidelityReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "lens_bits", "model_bits"])?;
        for r in &self.rows {
            w.write_record([r.index.to_string(), format!("{:.9e}", r.lens_bits), format!("{:.9e}", r.model_bits)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Rank agreement between lens-side and model-side influences.
pub fn fidelity_report(layer: usize, lens_influences: &[f64], model_influences: &[f64]) -> Result<FidelityReport> {
    if lens_influences.len() != model_influences.len() {
        return Err(Error::Shape(format!(
            "{} lens influences vs {} model influences",
            lens_influences.len(),
            model_influences.len()
        )));
    }
    Ok(FidelityReport {
        layer,
        spearman: spearman_rho(lens_influences, model_influences)?,
        rows: lens_influences
            .iter()
            .zip(model_influences)
            .enumerate()
            .map(|(index, (&lens_bits, &model_bits))| FidelityRow {
                index,
                lens_bits,
                model_bits,
            })
            .collect(),
    })
}

/// Model-side influence of every basis vector on the same batch.
pub fn basis_model_influences<T: Scalar>(
    basis: &CausalBasis,
    model: &TransformerModel<T>,
    ids: &[usize],
    layout: SeqLayout,
    ctx: &ErasureContext,
) -> Result<Vec<f64>> {
    if ctx.layer != basis.layer {
        return Err(Error::InvalidArgument("erasure context is for another layer".into()));
    }
    basis
        .vectors
        .iter()
        .map(|v| model_influence(v, model, ids, layout, ctx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx2() -> ErasureContext {
        ErasureContext {
            layer: 0,
            mean: vec![2.0, 0.0],
            count: 1,
        }
    }

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn mean_ablate_examples() {
        assert_eq!(mean_ablate(&[5.0, 7.0], &[1.0, 0.0], &ctx2()).unwrap(), vec![2.0, 7.0]);
        assert_eq!(mean_ablate(&[2.0, -3.0], &[1.0, 0.0], &ctx2()).unwrap(), vec![2.0, -3.0]);
        assert!(mean_ablate(&[5.0, 7.0], &[2.0, 0.0], &ctx2()).is_err());
        assert!(mean_ablate(&[5.0], &[1.0, 0.0], &ctx2()).is_err());
    }

    #[test]
    fn mean_ablate_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let d = 6;
            let ctx = ErasureContext {
                layer: 0,
                mean: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                count: 1,
            };
            let v = unit(&mut rng, d);
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = mean_ablate(&h, &v, &ctx).unwrap();
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            assert!((dot(&a, &v) - dot(&ctx.mean, &v)).abs() < 1e-9);
            let twice = mean_ablate(&a, &v, &ctx).unwrap();
            assert!(a.iter().zip(&twice).all(|(x, y)| (x - y).abs() < 1e-9));
            // the change is parallel to v
            let delta: Vec<f64> = a.iter().zip(&h).map(|(x, y)| x - y).collect();
            let c = dot(&delta, &v);
            assert!(delta.iter().zip(&v).all(|(x, vi)| (x - c * vi).abs() < 1e-9));
        }
    }

    #[test]
    fn influence_zero_when_f_ignores_v() {
        // f reads only the second coordinate; erase along the first
        let w = Tensor::<f64>::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        let f = LinearReadout { weight: w };
        let h = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -4.0, 0.5, 3.0, 3.0]).unwrap();
        let ctx = ErasureContext::from_states(0, &h).unwrap();
        let layout = SeqLayout::single(3);
        assert_eq!(influence(&[1.0, 0.0], &f, &h, layout, &ctx).unwrap(), 0.0);
        assert!(influence(&[0.0, 1.0], &f, &h, layout, &ctx).unwrap() > 0.0);
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert!(influence(&[1.0, 0.0], &f, &empty, SeqLayout::single(0), &ctx).is_err());
    }

    #[test]
    fn lens_readout_matches_lens() {
        use crate::lens::Lens;
        let m = TransformerModel::<f64>::init(ModelConfig::tiny(2, 8, 2), 3).unwrap();
        let mut lens = TunedLens::identity(&m.config, true);
        lens.translators[1].b = Tensor::full(&[8], 0.2);
        let ids = [1, 5, 9, 2];
        let layout = SeqLayout::single(4);
        let t = m.forward_batch(&ids, layout).unwrap();
        for l in 0..=2 {
            let r = LensReadout::new(&lens, &m, l).unwrap();
            let a = r.logits(&t.hidden[l], layout).unwrap();
            let b = lens.logits(&m, l, &t.hidden[l], layout).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "layer {l}");
        }
    }

    #[test]
    fn model_influence_degenerate_and_nonnegative() {
        // zero blocks, zero positions and one token id: every state is the mean
        let mut m0 = TransformerModel::<f64>::zeros(ModelConfig::tiny(2, 8, 2)).unwrap();
        m0.tok_emb = Tensor::from_fn(m0.tok_emb.shape(), |i| (i % 7) as f64 * 0.1);
        let ids = vec![4; 6];
        let layout = SeqLayout::single(6);
        let ctx = ErasureContext::from_states(1, &m0.hidden_at(&ids, layout, 1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = unit(&mut rng, 8);
        assert_eq!(model_influence(&v, &m0, &ids, layout, &ctx).unwrap(), 0.0);

        let m = TransformerModel::<f64>::init(ModelConfig::tiny(2, 8, 2), 5).unwrap();
        let ids = [3, 1, 4, 1, 5, 9, 2, 6];
        let layout = SeqLayout::single(8);
        let ctx = ErasureContext::from_states(1, &m.hidden_at(&ids, layout, 1).unwrap()).unwrap();
        for _ in 0..20 {
            assert!(model_influence(&unit(&mut rng, 8), &m, &ids, layout, &ctx).unwrap() >= 0.0);
        }
    }

    #[test]
    fn fidelity_report_shapes() {
        let x = [0.3, 0.2, 0.1];
        let r = fidelity_report(2, &x, &x).unwrap();
        assert_eq!(r.spearman, 1.0);
        assert_eq!(r.rows.len(), 3);
        assert!(fidelity_report(2, &x, &x[..2]).is_err());
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn basis_round_trip() {
        let s = 0.5f64.sqrt();
        let b = CausalBasis {
            layer: 3,
            vectors: vec![vec![s, s, 0.0], vec![s, -s, 0.0]],
            influences: vec![0.5, 0.25],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("basis.tlens");
        save_bases(&[b.clone()], &p).unwrap();
        let back = load_bases(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].layer, 3);
        assert_eq!(back[0].influences, b.influences);
        assert!(back[0].gram_deviation() < 1e-6);
    }
}
