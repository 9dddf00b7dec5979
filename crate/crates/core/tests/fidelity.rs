// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlens::causal::{
    basis_model_influences, causal_basis_extraction, fidelity_report, CbeConfig, ErasureContext, LensReadout,
};
use tlens::lens::TunedLens;
use tlens::model::{ModelConfig, TransformerModel};
use tlens::numerics::kernels::SeqLayout;
use tlens::numerics::Tensor;

/// Zero blocks make every hidden state the embedding, so the identity lens
/// at any layer decodes exactly what the model outputs.
fn planted() -> TransformerModel<f64> {
    let cfg = ModelConfig::tiny(2, 8, 2);
    let mut m = TransformerModel::<f64>::zeros(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    m.tok_emb = Tensor::from_fn(&[257, 8], |_| rng.random_range(-1.0..1.0));
    m.pos_emb = Tensor::from_fn(&[m.config.max_seq_len, 8], |_| rng.random_range(-0.2..0.2));
    // the output reads only the first two coordinates
    m.unembed = Tensor::from_fn(&[8, 257], |i| if i / 257 < 2 { rng.random_range(-2.0..2.0) } else { 0.0 });
    m
}

#[test]
fn planted_model_lens_and_model_influences_agree() {
    let model = planted();
    let lens = TunedLens::identity(&model.config, false);
    let ids: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 256).collect();
    let layout = SeqLayout { batch: 4, seq: 16 };
    let layer = 1;
    let h = model.forward_batch(&ids, layout).unwrap().hidden[layer].clone();
    let ctx = ErasureContext::from_states(layer, &h).unwrap();
    let f = LensReadout::new(&lens, &model, layer).unwrap();
    let cfg = CbeConfig {
        k: 6,
        max_iter: 60,
        ..Default::default()
    };
    let basis = causal_basis_extraction(&f, layer, &h, layout, &ctx, &[], &cfg).unwrap();
    assert!(basis.gram_deviation() < 1e-6);
    let model_bits = basis_model_influences(&basis, &model, &ids, layout, &ctx).unwrap();
    for (a, b) in basis.influences.iter().zip(&model_bits) {
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }
    let report = fidelity_report(layer, &basis.influences, &model_bits).unwrap();
    assert!(report.spearman >= 0.9, "{}", report.spearman);
    assert_eq!(report.rows.len(), 6);
}
