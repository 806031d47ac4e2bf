use std::time::Instant;
use tcan::baseline::{constant_log_mean_baseline, feature_baseline_grid};
use tcan::model::ModelConfig;
use tcan::synth::{generate, GenConfig};
use tcan::train::{evaluate, train, TrainOptions};
use tcan::views::{build_views, filter_dataset, split_dataset, CascadeViews, DatasetSplit};

fn benchmark_split(raw: usize, target: usize, seed: u64) -> (DatasetSplit, f64) {
    let cfg = GenConfig { n_cascades: raw, seed, ..GenConfig::default() };
    let cascades = generate(&cfg).unwrap();
    let mut joins: Vec<f64> = cascades.iter().flat_map(|c| c.records.iter().filter(|r| r.parent.is_some()).map(|r| r.join_time)).collect();
    joins.sort_by(f64::total_cmp);
    let t_obs = joins[((joins.len() - 1) as f64 * 0.3) as usize];
    let views: Vec<_> = cascades.iter().map(|c| build_views(c, t_obs, cfg.t_end).unwrap()).collect();
    let mut kept = filter_dataset(views, 10);
    println!("t_obs {t_obs:.3}, filtered {} (want {target})", kept.len());
    kept.truncate(target);
    (split_dataset(kept, [0.7, 0.15, 0.15], seed).unwrap(), t_obs)
}

#[test]
#[ignore]
fn full_benchmark_probe() {
    let t_total = Instant::now();
    let raw: usize = std::env::var("RAW").map(|v| v.parse().unwrap()).unwrap_or(130_000);
    let target: usize = std::env::var("TARGET").map(|v| v.parse().unwrap()).unwrap_or(2000);
    let epochs: usize = std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(15);
    let (split, t_obs) = benchmark_split(raw, target, 7);
    println!("split {}/{}/{} gen+prep {:.1?}", split.train.len(), split.val.len(), split.test.len(), t_total.elapsed());

    let t1 = Instant::now();
    let geo = constant_log_mean_baseline(&split).unwrap();
    println!("geo-mean: test msle {:.4} ({:.1?})", geo.msle, t1.elapsed());
    let t2 = Instant::now();
    let (lam, ridge) = feature_baseline_grid(&split, &[0.01, 0.03, 0.1, 0.3, 1.0], Some(t_obs)).unwrap();
    println!("ridge(lambda {lam}): test msle {:.4} mae {:.4} r2 {:.4} ({:.1?})", ridge.msle, ridge.mae, ridge.r2, t2.elapsed());

    let variant = match std::env::var("VARIANT").as_deref() {
        Ok("nt") => tcan::model::Variant::Nt,
        Ok("pl") => tcan::model::Variant::Pl,
        Ok("g") => tcan::model::Variant::G,
        Ok("s") => tcan::model::Variant::S,
        _ => tcan::model::Variant::Full,
    };
    let mcfg = ModelConfig { max_epochs: epochs, patience: 5, seed: 3, variant, ..ModelConfig::default() };
    let stats = tcan::time_embed::TimeStats::from_views(&split.train, Some(t_obs));
    println!("time stats: t_obs {:.4} min_gap {:.3e} max_gap {:.3e}", stats.t_obs, stats.min_gap, stats.max_gap);
    let t3 = Instant::now();
    let (model, h) = train(&split, &mcfg, &TrainOptions { t_obs: Some(t_obs), workers: 2 }).unwrap();
    println!("training {} epochs: {:.1?}", h.epochs.len(), t3.elapsed());
    for e in &h.epochs { println!("  epoch {}: train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_msle); }
    let report = evaluate(&model, &split.test, 2).unwrap();
    println!("tcan: test msle {:.4} mae {:.4} r2 {:.4}", report.msle, report.mae, report.r2);
    println!("ratios: vs geo {:.3}, vs ridge {:.3}", report.msle / geo.msle, report.msle / ridge.msle);
    println!("total {:.1?}", t_total.elapsed());
}
