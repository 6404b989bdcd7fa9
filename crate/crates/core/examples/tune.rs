//! Scratch harness for calibrating acceptance-benchmark hyperparameters.

use std::time::Instant;

use gzsl_core::classify::HeadConfig;
use gzsl_core::dataset::{build_gzsl_test_set, build_train_set, class_means, random_split};
use gzsl_core::ood::train_od;
use gzsl_core::wgan::{synthesize, train_gan_with_probe};
use gzsl_core::{
    make_synthetic_benchmark, run_protocol, Method, OdConfig, ProtocolConfig,
    SyntheticBenchmarkConfig, TrainConfig,
};
use ndarray::Array1;

fn mean_distance(
    synth: &[(usize, Array1<f64>)],
    truth: &std::collections::BTreeMap<usize, Array1<f64>>,
) -> f64 {
    let mut total = 0.0;
    for (class, mean) in synth {
        let t = &truth[class];
        total += (mean - t).mapv(|v| v * v).sum().sqrt();
    }
    total / synth.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("protocol");
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(100);
    let spread: f64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(1.5);
    let runs: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(2);
    let od_epochs: usize = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(30);
    let head_epochs: usize = args.get(6).and_then(|v| v.parse().ok()).unwrap_or(60);
    let lr: f64 = args.get(7).and_then(|v| v.parse().ok()).unwrap_or(1e-4);

    let rank: usize = args.get(10).and_then(|v| v.parse().ok()).unwrap_or(6);
    let ds = make_synthetic_benchmark(&SyntheticBenchmarkConfig {
        cluster_spread: spread,
        embedding_rank: rank,
        ..SyntheticBenchmarkConfig::default()
    })
    .unwrap();

    // nearest-true-mean oracle accuracy of the benchmark itself
    {
        let means = class_means(&ds);
        let feats = ds.features_f64();
        let mut correct = 0;
        for i in 0..ds.num_rows() {
            let row = feats.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for (class, mean) in &means {
                let d = (&row.to_owned() - mean).mapv(|v| v * v).sum();
                if d < best.0 {
                    best = (d, *class);
                }
            }
            if best.1 == ds.labels()[i] {
                correct += 1;
            }
        }
        println!("benchmark 1-NN-mean accuracy: {:.2}%", correct as f64 / ds.num_rows() as f64 * 100.0);
    }

    let batch: usize = args.get(8).and_then(|v| v.parse().ok()).unwrap_or(64);
    let d_z: usize = args.get(9).and_then(|v| v.parse().ok()).unwrap_or(32);
    let train_cfg = TrainConfig {
        epochs,
        lr,
        batch_size: batch,
        d_z,
        ..TrainConfig::default()
    };

    if mode == "diag" {
        let num_seen: usize = args.get(12).and_then(|v| v.parse().ok()).unwrap_or(10);
        let split = random_split(&ds, num_seen, 7).unwrap();
        let train = build_train_set(&ds, &split).unwrap();
        let test = build_gzsl_test_set(&ds, &split).unwrap();

        // true class means over the full dataset
        let truth: std::collections::BTreeMap<usize, Array1<f64>> =
            class_means(&ds).into_iter().collect();

        let t0 = Instant::now();
        let mut cfg = train_cfg.clone();
        cfg.seed = 1;
        let mut trace = Vec::new();
        let (gan, history) = train_gan_with_probe(&train, &cfg, |epoch, gan| {
            if epoch % 100 == 0 || epoch == cfg.epochs {
                let synth = synthesize(gan, &ds, &split.unseen, 40, 999).unwrap();
                let d = mean_distance(&class_means(&synth), &truth);
                trace.push((epoch, d));
            }
        })
        .unwrap();
        println!("gan trained in {:.1}s", t0.elapsed().as_secs_f64());
        println!("unseen mean-distance trace: {trace:?}");
        let last = history.epochs.last().unwrap();
        println!(
            "last epoch losses: critic={:.4} gen={:.4} cycle={:.4} embed={:.4}",
            last.critic_loss, last.gen_wgan, last.cycle, last.embed
        );

        // per-coordinate dispersion of synth vs real rows, class 0 of each group
        {
            let synth_u = synthesize(&gan, &ds, &split.unseen, 200, 77).unwrap();
            let class = split.unseen[0];
            let rows = synth_u.class_rows(class);
            let f = synth_u.features_f64();
            let dx = f.ncols();
            let mut var = 0.0;
            for j in 0..dx {
                let col: Vec<f64> = rows.iter().map(|&r| f[(r, j)]).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                var += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            }
            println!("synth class {class} mean per-coord std: {:.3}", (var / dx as f64).sqrt());
        }
        let synth_seen = synthesize(&gan, &ds, &split.seen, 80, 51).unwrap();
        let d_seen = mean_distance(&class_means(&synth_seen), &truth);
        let synth_unseen = synthesize(&gan, &ds, &split.unseen, 80, 52).unwrap();
        let d_unseen = mean_distance(&class_means(&synth_unseen), &truth);
        println!("synth mean distance: seen {d_seen:.3} unseen {d_unseen:.3}");

        // nearest synth-class-mean accuracy for real unseen test rows
        let synth_means = class_means(&synth_unseen);
        let feats = test.features_f64();
        let mut correct = 0;
        let mut total = 0;
        for i in 0..test.num_rows() {
            if test.is_seen_class[i] {
                continue;
            }
            total += 1;
            let row = feats.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for (class, mean) in &synth_means {
                let d = (&row.to_owned() - mean).mapv(|v| v * v).sum();
                if d < best.0 {
                    best = (d, *class);
                }
            }
            if best.1 == test.labels[i] {
                correct += 1;
            }
        }
        println!(
            "unseen 1-NN-vs-synth-mean accuracy: {:.1}%",
            correct as f64 / total as f64 * 100.0
        );

        // detector quality
        let nll_weight: f64 = args.get(11).and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let od_cfg = OdConfig {
            epochs: od_epochs,
            nll_weight,
            ..OdConfig::default()
        };
        let det = train_od(&train, &synth_unseen, &od_cfg).unwrap();
        let mut seen_below = 0;
        let mut seen_total = 0;
        let mut unseen_above = 0;
        let mut unseen_total = 0;
        for i in 0..test.num_rows() {
            let e = det.entropy_of(feats.row(i)).unwrap();
            if test.is_seen_class[i] {
                seen_total += 1;
                if e < det.threshold {
                    seen_below += 1;
                }
            } else {
                unseen_total += 1;
                if e >= det.threshold {
                    unseen_above += 1;
                }
            }
        }
        // held-out synthesized rows, fresh seed
        let synth_fresh = synthesize(&gan, &ds, &split.unseen, 40, 1234).unwrap();
        let fresh = synth_fresh.features_f64();
        let mut fresh_above = 0;
        for i in 0..fresh.nrows() {
            if det.entropy_of(fresh.row(i)).unwrap() >= det.threshold {
                fresh_above += 1;
            }
        }
        println!(
            "detector: th={:.4} seen<th {:.1}% real-unseen>=th {:.1}% synth-unseen>=th {:.1}%",
            det.threshold,
            seen_below as f64 / seen_total as f64 * 100.0,
            unseen_above as f64 / unseen_total as f64 * 100.0,
            fresh_above as f64 / fresh.nrows() as f64 * 100.0
        );
        // entropy percentiles train vs held-out seen
        let train_feats = train.features_f64();
        let mut train_ents: Vec<f64> = (0..train_feats.nrows())
            .map(|i| det.entropy_of(train_feats.row(i)).unwrap())
            .collect();
        train_ents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut held_ents: Vec<f64> = (0..test.num_rows())
            .filter(|&i| test.is_seen_class[i])
            .map(|i| det.entropy_of(feats.row(i)).unwrap())
            .collect();
        held_ents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |v: &[f64], p: f64| v[((v.len() - 1) as f64 * p) as usize];
        println!(
            "train seen entropy p50={:.4} p90={:.4} p95={:.4}; held-out p50={:.4} p90={:.4} p95={:.4}",
            pct(&train_ents, 0.5), pct(&train_ents, 0.9), pct(&train_ents, 0.95),
            pct(&held_ents, 0.5), pct(&held_ents, 0.9), pct(&held_ents, 0.95)
        );
        return;
    }

    if mode == "detsweep" {
        let split = random_split(&ds, 10, 7).unwrap();
        let train = build_train_set(&ds, &split).unwrap();
        let test = build_gzsl_test_set(&ds, &split).unwrap();
        let mut cfg = train_cfg.clone();
        cfg.seed = 1;
        let (gan, _) = gzsl_core::train_gan(&train, &cfg).unwrap();
        let per_class_arg: usize = args.get(11).and_then(|v| v.parse().ok()).unwrap_or(80);
        let od_batch: usize = args.get(12).and_then(|v| v.parse().ok()).unwrap_or(64);
        let synth_unseen = synthesize(&gan, &ds, &split.unseen, per_class_arg, 52).unwrap();
        let feats = test.features_f64();
        for hidden in [64usize] {
            for epochs in [2000usize, 2600] {
                for lr in [3e-3] {
                    for nll_weight in [1.0, 2.0] {
                        let od_cfg = OdConfig { hidden, epochs, lr, nll_weight, batch_size: od_batch, seed: 7 + epochs as u64, ..OdConfig::default() };
                        let det = train_od(&train, &synth_unseen, &od_cfg).unwrap();
                        let mut seen_below = 0; let mut seen_total = 0;
                        let mut unseen_above = 0; let mut unseen_total = 0;
                        for i in 0..test.num_rows() {
                            let e = det.entropy_of(feats.row(i)).unwrap();
                            if test.is_seen_class[i] {
                                seen_total += 1;
                                if e < det.threshold { seen_below += 1; }
                            } else {
                                unseen_total += 1;
                                if e >= det.threshold { unseen_above += 1; }
                            }
                        }
                        let synth_fresh = synthesize(&gan, &ds, &split.unseen, 40, 1234).unwrap();
                        let fresh = synth_fresh.features_f64();
                        let fresh_above = (0..fresh.nrows())
                            .filter(|&i| det.entropy_of(fresh.row(i)).unwrap() >= det.threshold)
                            .count();
                        let mut held: Vec<f64> = (0..test.num_rows())
                            .filter(|&i| test.is_seen_class[i])
                            .map(|i| det.entropy_of(feats.row(i)).unwrap())
                            .collect();
                        held.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let pct = |p: f64| held[((held.len() - 1) as f64 * p) as usize];
                        println!(
                            "h={hidden} ep={epochs} lr={lr} nw={nll_weight} b={od_batch} pc={per_class_arg}: th={:.2e} seen<th {:.1}% real-u>=th {:.1}% synth-u>=th {:.1}% | deciles p50={:.2e} p70={:.2e} p80={:.2e} p90={:.2e}",
                            det.threshold,
                            seen_below as f64 / seen_total as f64 * 100.0,
                            unseen_above as f64 / unseen_total as f64 * 100.0,
                            fresh_above as f64 / fresh.nrows() as f64 * 100.0,
                            pct(0.5), pct(0.7), pct(0.8), pct(0.9)
                        );
                    }
                }
            }
        }
        return;
    }

    let od = OdConfig {
        epochs: od_epochs,
        lr: 3e-3,
        hidden: 64,
        ..OdConfig::default()
    };
    let head = HeadConfig {
        epochs: head_epochs,
        ..HeadConfig::default()
    };

    let per_class: Option<usize> = args.get(11).and_then(|v| v.parse().ok());
    for method in [Method::CewganOd, Method::Cewgan] {
        let cfg = ProtocolConfig {
            method,
            num_seen: 10,
            runs,
            base_seed: 7,
            per_class_synth: per_class,
            train: train_cfg.clone(),
            od: od.clone(),
            head: head.clone(),
            ..ProtocolConfig::default()
        };
        let t0 = Instant::now();
        let report = run_protocol(&ds, &cfg, None).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let a = &report.aggregate;
        println!(
            "{method}: s={:.1}±{:.1} u={:.1}±{:.1} H={:.1}±{:.1} zsl={:.1} SC={:.1} UC={:.1} det={} [{secs:.1}s]",
            a["seen_acc"].mean,
            a["seen_acc"].std,
            a["unseen_acc"].mean,
            a["unseen_acc"].std,
            a["harmonic_mean"].mean,
            a["harmonic_mean"].std,
            a["zsl_acc"].mean,
            a["bias_sc"].mean,
            a["bias_uc"].mean,
            a.get("detection_acc").map(|m| format!("{:.1}", m.mean)).unwrap_or_default(),
        );
    }
}
