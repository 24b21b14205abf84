use rtip_core::ensemble::{read_store, run_ensemble, write_store};
use rtip_core::experiments::{
    dataset_at_lead, group_probabilities, probability_timeline, split_groups, train_pipeline, PipelineConfig,
};
use rtip_core::neuralnet::forward;
use rtip_core::preprocess::{normalized_segment, prepare, Label, PrepareOptions, PrepareSize};
use rtip_core::{Scale, System, SystemConfig};

#[test]
fn store_round_trip_feeds_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let store = run_ensemble(&SystemConfig::default_for(System::Saddle), 600, 9).unwrap();
    write_store(&store, dir.path()).unwrap();
    let back = read_store(dir.path()).unwrap();
    assert!(back.same_content(&store));
    let opts = PrepareOptions {
        size: PrepareSize::AtMost(50),
        reference_rows: 200,
        min_t_tip: 300,
        ..PrepareOptions::default()
    };
    let a = prepare(store, &opts).unwrap();
    let b = prepare(back, &opts).unwrap();
    assert_eq!(a.t_tips, b.t_tips);
    assert_eq!(a.groups, b.groups);
}

#[test]
fn smoke_training_is_reproducible() {
    let mut cfg = PipelineConfig::preset(System::Saddle, Scale::Smoke);
    cfg.leads = vec![0, 50];
    cfg.train.max_epochs = 2;
    let first = train_pipeline(&cfg).unwrap();
    let second = train_pipeline(&cfg).unwrap();
    assert_eq!(first.lead_report, second.lead_report);
    assert_eq!(first.models[1].model, second.models[1].model);

    let models = first.model_refs();
    let member = first.split.test.a[0];
    let curve = probability_timeline(&models, &first.prep, member, cfg.norm).unwrap();
    assert_eq!(curve.len(), 2);
    let seg = normalized_segment(first.prep.row(member), member, 50, cfg.window, Label::Tipping, cfg.norm, &first.prep.envelope).unwrap();
    assert_eq!(curve[1], (50, forward(models[1], &seg.values).unwrap().0));

    let probs = group_probabilities(&models, &first.prep, &first.split.test.b, cfg.norm).unwrap();
    assert!(probs.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
    let data = dataset_at_lead(&first.prep, &first.split.test, 0, cfg.window, cfg.norm).unwrap();
    assert_eq!(data.len(), 2 * cfg.test_pairs);
    let split = split_groups(&first.prep.groups, cfg.train_pairs, cfg.test_pairs, 0.1).unwrap();
    assert_eq!(split, first.split);
}
