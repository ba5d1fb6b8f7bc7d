mod common;

use common::{attention_mask_diff, model_mask_diff, random_instance, Shape};
use kenet::config::Variant;
use kenet::train::{build_model, RunData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn padded_rows_never_reach_attention_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let shape = Shape {
            m: rng.random_range(1..=5),
            l1: rng.random_range(2..=8),
            l2: rng.random_range(2..=8),
            h: rng.random_range(1..=6),
            label_dim: 4,
            d_a: 5,
            k: 3,
            d_h: 4,
        };
        let inst = random_instance(&mut rng, &shape, i % 4 != 0, true);
        assert_eq!(attention_mask_diff(&mut rng, &inst), 0.0);
    }
}

#[test]
fn padded_tokens_never_reach_model_outputs_in_any_variant() {
    let dir = tempfile::tempdir().unwrap();
    let base = common::toy_config(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for v in Variant::REPORT_ORDER {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        let data = RunData::load(&cfg).unwrap();
        let model = build_model(&cfg, &data).unwrap();
        for _ in 0..4 {
            let (l1, l2) = (rng.random_range(2..12), rng.random_range(2..12));
            assert_eq!(model_mask_diff(&mut rng, &model, l1, l2), 0.0, "variant {v}");
        }
    }
}
