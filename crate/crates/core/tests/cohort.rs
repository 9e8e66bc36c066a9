use dm2::checkpoint::Checkpoint;
use dm2::config::{MemberOverride, RunConfig};
use dm2::experiment::{prepare, run_seed};
use dm2::trainer::Diversity;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.data_classes = 24;
    c.data_images_per_class = 10;
    c.data_height = 12;
    c.data_width = 12;
    c.model_hidden = vec![32];
    c.model_embed = 8;
    c.cohort_size = 4;
    c.batch_classes = 4;
    c.batch_per_class = 3;
    c.train_epochs = 8;
    c.pretrain.epochs = 2;
    c.eval_every = 100;
    c.seeds = vec![1, 2, 3, 4, 5];
    c
}

#[test]
fn slowest_member_fits_less() {
    let mut cfg = small();
    cfg.diversity = Diversity {
        md: true,
        td: true,
        vd: false,
    };
    let prep = prepare(&cfg).unwrap();
    let (mut fast, mut slow) = (0.0, 0.0);
    for &seed in &cfg.seeds {
        let run = run_seed(&prep, &cfg, seed).unwrap();
        let window = run.trace.records.len() / (4 * cfg.train_epochs);
        fast += run.trace.tail_mean_dml(0, window);
        slow += run.trace.tail_mean_dml(3, window);
        let rate = run.trace.update_rate(3);
        assert!(rate > 0.0 && rate < 0.4, "slowest member update rate {rate}");
    }
    assert!(slow >= fast, "slowest member train loss {slow} < member 1 {fast}");
}

#[test]
fn heterogeneous_cohort_trains_and_round_trips() {
    let mut cfg = small();
    cfg.cohort_size = 3;
    cfg.seeds = vec![9];
    cfg.train_epochs = 2;
    cfg.members.insert(
        2,
        MemberOverride {
            hidden: Some(vec![24, 16]),
            embed: Some(6),
            update_prob: None,
        },
    );
    cfg.validate().unwrap();
    let prep = prepare(&cfg).unwrap();
    assert_eq!(prep.backbones.len(), 2);
    let run = run_seed(&prep, &cfg, 9).unwrap();
    assert_eq!(run.members[1].params.embed_dim(), 6);
    assert_eq!(run.members[1].params.backbone.hidden_dims(), vec![24, 16]);
    assert!(run.trace.records.iter().all(|r| r.loss_dm2.is_finite()));
    assert!(run.trace.records.iter().filter(|r| r.iteration > 0).any(|r| r.loss_dm2 > 0.0));

    for m in &run.members {
        let mut bytes = Vec::new();
        Checkpoint::from_params(&m.params, Some(&run.config_hash)).write(&mut bytes).unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.config_hash(), Some(run.config_hash.as_str()));
        assert!(back.to_params().unwrap().bit_eq(&m.params));
    }
}
