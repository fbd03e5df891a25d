//! End to end on synthetic CIFAR-format files: load, train, checkpoint,
//! evaluate, dump activations, CKA, channel importance and exemplars.

use credassign::analysis::{
    channel_importance, cka_grid, gradient_angle, top_exemplars, write_activation_dump, ActivationDump, Subset,
};
use credassign::data::{load_cifar10, synthetic};
use credassign::trainer::{evaluate, grid_search, train, Grid, TrainConfig};
use credassign::{Checkpoint, FeedbackRule};

#[test]
fn synthetic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    synthetic::write_cifar_dir(dir.path(), 60, 50, 9).unwrap();
    let splits = load_cifar10(dir.path()).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (270, 30, 50));

    let base = TrainConfig {
        epochs: 4,
        batch_size: 32,
        probe_every: 5,
        sigma: Some(0.05),
        ..TrainConfig::new(FeedbackRule::Bp, 3e-3)
    };
    let bp = train(&base, &splits).unwrap();
    let acc = evaluate(&bp.best.network, &splits.test, 64).unwrap().accuracy;
    assert!(acc > 0.5, "synthetic classes should be easy, got {acc}");

    let usf = train(&TrainConfig { rule: FeedbackRule::UsfSn, ..base.clone() }, &splits).unwrap();
    let fa = train(&TrainConfig { rule: FeedbackRule::FaToeplitz, ..base.clone() }, &splits).unwrap();
    let fa_row = fa.metrics.rows.last().unwrap();
    assert!(fa_row.concordance.iter().all(|v| v.is_some()));
    assert!(fa_row.angles.iter().all(|v| v.is_some_and(|a| a > 0.0)));

    let path = dir.path().join("bp.ckpt");
    bp.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, bp.best);

    let val = &splits.val;
    let probe = val.eval_batch(&(0..val.len()).collect::<Vec<_>>());
    let mut net = loaded.network.clone();
    let report = gradient_angle(&mut net, &probe, &val.labels(), FeedbackRule::Bp).unwrap();
    assert!(report.layers.iter().all(|l| l.value == Some(0.0)));

    let a = dir.path().join("bp.dump");
    let b = dir.path().join("usf.dump");
    write_activation_dump(&loaded.network, &splits.test, "bp", &a, 16).unwrap();
    write_activation_dump(&usf.best.network, &splits.test, "usf_sn", &b, 16).unwrap();
    let (mut da, mut db) = (ActivationDump::open(&a).unwrap(), ActivationDump::open(&b).unwrap());
    let m = cka_grid(&mut da, &mut db, Subset::All).unwrap();
    assert_eq!(m.values.len(), 5);
    assert!(m.values.iter().flatten().all(|v| v.is_some_and(|v| (0.0..=1.0 + 1e-6).contains(&v))));

    let imp = channel_importance(&loaded.network, &splits.test, 3, "conv2", 16).unwrap();
    assert_eq!(imp.scores.len(), 64);
    assert_eq!(imp.images, splits.test.labels().iter().filter(|&&l| l == 3).count());
    let top = top_exemplars(&loaded.network, &splits.test, "conv2", imp.top(1)[0], 9, 16).unwrap();
    assert_eq!(top.len(), 9);
    assert!(top.windows(2).all(|w| w[0].mean_activation >= w[1].mean_activation));

    let grid = Grid { lrs: vec![1e-3, 3e-3], weight_decays: vec![0.0, 1e-4], sigmas: vec![None] };
    let report = grid_search(&base, &grid, &splits, 1, 1).unwrap();
    assert_eq!(report.ranked.len(), 4);
    assert!(report.to_csv().starts_with("rank,grid_index,lr,weight_decay,sigma,val_acc\n"));
}
