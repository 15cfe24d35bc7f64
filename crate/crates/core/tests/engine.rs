use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqar::engine::{run_request, DecodeRequest, Speculators, Strategy};
use seqar::model::{ModelConfig, TargetModel};
use seqar::numerics::TensorF32;
use seqar::speculator::{DecoderKv, SeqarWeights, Speculator, SpeculatorConfig};

fn noisy(model: &TargetModel, cfg: SpeculatorConfig, seed: u64) -> SeqarWeights {
    let mut w = SeqarWeights::init(model, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in w.named_tensors_mut() {
        let shape = t.shape().to_vec();
        *t = t.add(&TensorF32::randn(&shape, 0.3, &mut rng)).unwrap();
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn speculative_decoding_is_greedy_and_within_bounds(
        model_seed in 0u64..1000,
        prompt in prop::collection::vec(0u32..16, 1..12),
        budget in 1usize..10,
        accumulate in any::<bool>(),
        max_new in 1usize..40,
    ) {
        let model = TargetModel::random_with_std(ModelConfig::new(2, 16, 2, 32, 16, 64).with_seed(model_seed), 0.6).unwrap();
        let kv = if accumulate { DecoderKv::Accumulate } else { DecoderKv::Single };
        let s = noisy(&model, SpeculatorConfig { decoder_kv: kv, ..SpeculatorConfig::seqar(3) }, model_seed);
        let m = noisy(&model, SpeculatorConfig::medusa(3), model_seed + 1);
        let specs = Speculators {
            seqar: Some(Speculator::new(&model, &s).unwrap()),
            medusa: Some(Speculator::new(&model, &m).unwrap()),
        };
        let vanilla = run_request(&model, &specs, &DecodeRequest::new(prompt.clone(), max_new, Strategy::Vanilla)).unwrap();
        prop_assert_eq!(vanilla.tokens.len(), max_new);
        for strategy in [Strategy::Seqar, Strategy::Medusa] {
            let req = DecodeRequest::new(prompt.clone(), max_new, strategy).with_budget(budget);
            let out = run_request(&model, &specs, &req).unwrap();
            prop_assert_eq!(&out.tokens, &vanilla.tokens);
            for t in &out.traces {
                prop_assert!(!t.tokens_emitted.is_empty() && t.tokens_emitted.len() <= 4);
                prop_assert_eq!(t.accepted_length, t.tokens_emitted.len() - 1);
                prop_assert!(t.tree_size_used <= budget);
            }
        }
    }
}

#[test]
fn stop_token_ends_decoding_early() {
    let model = TargetModel::random_with_std(ModelConfig::new(1, 16, 2, 32, 16, 64).with_seed(3), 0.6).unwrap();
    let none = Speculators::default();
    let full = run_request(&model, &none, &DecodeRequest::new(vec![1, 2], 20, Strategy::Vanilla)).unwrap();
    let stop = full.tokens[5];
    let first = full.tokens.iter().position(|&t| t == stop).unwrap();
    let mut req = DecodeRequest::new(vec![1, 2], 20, Strategy::Vanilla);
    req.stop_tokens.insert(stop);
    let cut = run_request(&model, &none, &req).unwrap();
    assert_eq!(cut.tokens, full.tokens[..=first]);
}
