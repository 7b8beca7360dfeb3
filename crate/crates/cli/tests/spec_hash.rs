use std::path::PathBuf;

use ifsd_cli::spec::EvalCadence;
use ifsd_cli::ExperimentSpec;
use ifsd_core::detector::TransferStrategy;
use ifsd_core::exemplar::ExemplarMethod;
use ifsd_core::model::TaskMode;
use proptest::prelude::*;

fn arb_spec() -> impl Strategy<Value = ExperimentSpec> {
    (
        (1usize..4, 1usize..4, 1usize..4),
        prop_oneof![Just(0.1), Just(0.15), Just(0.3)],
        prop_oneof![Just(0.001), Just(0.03)],
        prop_oneof![Just(TransferStrategy::FitCse), Just(TransferStrategy::FixAll)],
        any::<bool>(),
        prop_oneof![Just(ExemplarMethod::None), Just(ExemplarMethod::Clustering)],
        prop_oneof![Just(TaskMode::Typical), Just(TaskMode::Continual)],
        prop_oneof![Just(EvalCadence::EverySession), Just(EvalCadence::FinalSession)],
        prop_oneof![Just("out"), Just("elsewhere")],
        prop::collection::vec(0u64..3, 1..3),
    )
        .prop_map(|((nb, nn, k), noise, lr, strategy, d, e, mode, cadence, out, seeds)| {
            let mut s = ExperimentSpec::new(mode);
            s.world.num_base_classes = nb;
            s.world.num_novel_classes = nn;
            s.world.shots_k = k;
            s.world.feature_noise = noise;
            s.train.transfer.lr = lr;
            s.recipe.strategy = strategy;
            s.recipe.use_distillation = d;
            s.recipe.exemplar_method = e;
            s.eval_cadence = cadence;
            s.output_dir = PathBuf::from(out);
            s.seeds = seeds;
            s
        })
}

proptest! {
    #[test]
    fn hash_changes_iff_spec_changes(a in arb_spec(), b in arb_spec()) {
        prop_assert_eq!(a == b, a.hash() == b.hash());
    }

    #[test]
    fn hash_survives_toml_round_trip(a in arb_spec()) {
        let mut a = a;
        a.seeds.dedup();
        let text = a.to_toml().unwrap();
        let back: ExperimentSpec = toml::from_str(&text).unwrap();
        prop_assert_eq!(back.hash(), a.hash());
    }
}
