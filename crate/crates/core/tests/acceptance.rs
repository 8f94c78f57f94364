//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use team_detr::harness::ablate::Setting;
use team_detr::harness::{ablate, train, RunConfig};
use team_detr::losses::position_loss;
use team_detr::matching::masked_global_match;
use team_detr::partition::QueryTeam;
use team_detr::preference::{extract_preferences, PreferenceStore, ScoredBox};
use team_detr::{
    assign_object_group, brute_force_match, build_attention_mask, build_partition, hungarian, init_team, team_match,
    BBox, CostMatrix, CostWeights, GtObject, Prediction,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let el = start.elapsed();
    if let Some(l) = limit {
        if el >= l {
            o.pass = false;
            o.detail.push_str(&format!("; over the {:?} budget", l));
        }
    }
    o.detail.push_str(&format!("; {:.1} s", el.as_secs_f64()));
    o
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    common::random_box(rng)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut forbidden_cases = 0;
    for case in 0..500 {
        let small = rng.random_range(1..=7);
        let large = rng.random_range(small..=9);
        let (r, c) = if rng.random_bool(0.5) { (small, large) } else { (large, small) };
        let mut rows: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        // a fifth of the cases carry forbidden pairs away from the diagonal
        if case % 5 == 0 {
            forbidden_cases += 1;
            for (i, row) in rows.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if i != j && rng.random_bool(0.2) {
                        *v = CostMatrix::FORBIDDEN;
                    }
                }
            }
        }
        let m = CostMatrix::from_rows(rows).unwrap();
        let (h, b) = (hungarian(&m).unwrap(), brute_force_match(&m).unwrap());
        worst = worst.max((h.total_cost - b.total_cost).abs());
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("500 matrices ({forbidden_cases} with forbidden pairs), max |hungarian - brute force| = {worst:.2e}"),
    }
}

fn random_prediction(rng: &mut ChaCha8Rng, q: usize, classes: usize) -> Prediction {
    Prediction {
        query_index: q,
        bbox: random_box(rng),
        class_probs: (0..classes).map(|_| rng.random::<f64>()).collect(),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = CostWeights::default();
    let mut mismatches = 0;
    let mut objects = 0;
    for scene in 0..200 {
        let k = rng.random_range(1..=4);
        let mut bounds: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.05..0.95)).collect();
        bounds.sort_by(f64::total_cmp);
        bounds.dedup();
        let p = build_partition(&bounds).unwrap();
        let props: Vec<f64> = vec![1.0 / p.len() as f64; p.len()];
        let n = rng.random_range(p.len() * 2..=40);
        let team = init_team(&p, &props, n, scene).unwrap();
        let classes = 3;
        let preds: Vec<Prediction> = (0..n).map(|q| random_prediction(&mut rng, q, classes)).collect();
        // objects are drawn until each group is at capacity or the scene is full
        let mut load = vec![0usize; p.len()];
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(0..=n) {
            let g = GtObject { bbox: random_box(&mut rng), class_id: rng.random_range(0..classes) };
            let k = assign_object_group(&p, &g.bbox);
            if load[k] < team.group_sizes()[k] {
                load[k] += 1;
                gts.push(g);
            }
        }
        objects += gts.len();
        let groups: Vec<usize> = gts.iter().map(|g| assign_object_group(&p, &g.bbox)).collect();
        let a = team_match(&team, &preds, &gts, &p, &w).unwrap();
        let b = masked_global_match(&team, &preds, &gts, &groups, &w).unwrap();
        if a.total_cost != b.total_cost || a.pairs != b.pairs {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("200 scenes, {objects} objects, {mismatches} differ from the masked global optimum"),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad_masks = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=n.min(8));
        // k positive sizes summing to n
        let mut cuts: Vec<usize> = (1..n).collect();
        for i in (1..cuts.len()).rev() {
            cuts.swap(i, rng.random_range(0..=i));
        }
        let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
        cuts.sort_unstable();
        let mut sizes = Vec::new();
        let mut prev = 0;
        for c in cuts.into_iter().chain(std::iter::once(n)) {
            sizes.push(c - prev);
            prev = c;
        }
        let mask = build_attention_mask(&sizes).unwrap();
        let mut owner = Vec::with_capacity(n);
        for (g, &s) in sizes.iter().enumerate() {
            owner.extend(std::iter::repeat_n(g, s));
        }
        let ok = (0..n).all(|i| (0..n).all(|j| mask.is_blocked(i, j) == (owner[i] != owner[j]) && mask.is_blocked(i, j) == mask.is_blocked(j, i)));
        if !ok {
            bad_masks += 1;
        }
    }
    let mut bad_scales = 0;
    let mut samples = 0;
    let partitions: Vec<Vec<f64>> = vec![vec![], vec![0.2, 0.4], vec![0.1, 0.3, 0.5, 0.9], vec![0.5]];
    for bounds in &partitions {
        let p = build_partition(bounds).unwrap();
        let mut scales: Vec<f64> = (0..100_000 / partitions.len()).map(|_| 1.0 - rng.random::<f64>()).collect();
        scales.extend([f64::MIN_POSITIVE, 1e-300, 1.0]);
        for &b in bounds {
            scales.extend([b, b.next_up(), b.next_down()]);
        }
        for s in scales {
            samples += 1;
            let holders: Vec<usize> = (0..p.len()).filter(|&k| p.ranges()[k].contains(s)).collect();
            if holders.len() != 1 || holders[0] != p.group_for_scale(s) {
                bad_scales += 1;
            }
        }
        // boundaries belong to the lower range
        for (i, &b) in bounds.iter().enumerate() {
            if p.group_for_scale(b) != i || p.group_for_scale(b.next_up()) != i + 1 {
                bad_scales += 1;
            }
        }
    }
    Outcome {
        pass: bad_masks == 0 && bad_scales == 0,
        detail: format!("1000 masks ({bad_masks} wrong), {samples} scale samples ({bad_scales} uncovered or doubly covered)"),
    }
}

fn criterion_4() -> Outcome {
    let cls = common::check_classification(100, 41);
    let boxes = common::check_box_losses(100, 42);
    let pos = common::check_position_loss(100, 43);
    let dec = common::check_decoder(100, 44);
    let pass = [cls, boxes, pos, dec].iter().all(|r| r.passes());
    let f = |name: &str, r: &common::FdReport| format!("{name} worst {:.1e} over {} coords ({} skipped)", r.worst, r.checked, r.skipped);
    Outcome {
        pass,
        detail: format!(
            "{}; {}; {}; {}",
            f("focal", &cls),
            f("box", &boxes),
            f("position", &pos),
            f("decoder", &dec)
        ),
    }
}

fn criterion_5() -> Outcome {
    let bb = |cx: f64, cy: f64| BBox::new(cx, cy, 0.1, 0.1).unwrap();
    let one = position_loss(&[bb(0.5, 0.5)], &[bb(0.9, 0.5)], 0.25);
    let two = position_loss(&[bb(0.5, 0.5), bb(0.5, 0.5)], &[bb(0.8, 0.5), bb(0.5, 0.7)], 0.25);
    let none = position_loss(&[bb(0.5, 0.5)], &[bb(0.6, 0.6)], 0.25);
    let hand = (one.value - 0.4).abs() <= 1e-12 && (two.value - 0.3).abs() <= 1e-12 && two.violators == vec![0] && none.value == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut wrong = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let a: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        // predictions near their anchors half of the time
        let p: Vec<BBox> = a
            .iter()
            .map(|x| {
                if rng.random_bool(0.5) {
                    let dx = rng.random_range(-0.2..0.2);
                    let dy = rng.random_range(-0.2..0.2);
                    BBox::new((x.cx() + dx).clamp(0.0, 1.0), (x.cy() + dy).clamp(0.0, 1.0), x.w(), x.h()).unwrap()
                } else {
                    random_box(&mut rng)
                }
            })
            .collect();
        let eta = 0.25;
        let max_d = a.iter().zip(&p).map(|(x, y)| team_detr::center_distance(x, y)).fold(0.0, f64::max);
        let l = position_loss(&a, &p, eta);
        if (l.value == 0.0) != (max_d <= eta) || l.value < 0.0 {
            wrong += 1;
        }
    }
    Outcome {
        pass: hand && wrong == 0,
        detail: format!("hand cases {}, 1000 random teams with {wrong} zero-iff violations", if hand { "exact" } else { "WRONG" }),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut retention_errors, mut worst) = (0, 0.0f64);
    let mut clamp_errors = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let tau = rng.random_range(1..20);
        let mut store = PreferenceStore::new(n, tau);
        let mut seen: Vec<Vec<ScoredBox>> = vec![Vec::new(); n];
        for _ in 0..rng.random_range(0..80) {
            let q = rng.random_range(0..n);
            let b = random_box(&mut rng);
            let c = (rng.random::<f64>() * 50.0).floor() / 50.0;
            store.record(q, b, c).unwrap();
            seen[q].push(ScoredBox { bbox: b, confidence: c });
        }
        let team = QueryTeam::from_parts(vec![BBox::new(0.5, 0.5, 0.2, 0.2).unwrap(); n], vec![n]).unwrap();
        let anchors = extract_preferences(&store, &team).unwrap();
        let means = store.means();
        for q in 0..n {
            let mut oracle = seen[q].clone();
            oracle.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            oracle.truncate(tau);
            if store.entries(q) != oracle.as_slice() {
                retention_errors += 1;
            }
            if oracle.is_empty() {
                if means[q].is_some() || anchors[q] != team.anchors()[q] {
                    retention_errors += 1;
                }
                continue;
            }
            let mean = means[q].unwrap();
            for k in 0..4 {
                let m = oracle.iter().map(|e| e.bbox.to_array()[k]).sum::<f64>() / oracle.len() as f64;
                worst = worst.max((mean[k] - m).abs());
            }
            if anchors[q] != BBox::clamped(mean, team_detr::preference::MIN_ANCHOR_SIDE) {
                clamp_errors += 1;
            }
        }
    }
    Outcome {
        pass: retention_errors == 0 && clamp_errors == 0 && worst <= 1e-12,
        detail: format!("1000 stores: {retention_errors} retention mismatches, max mean error {worst:.1e}, {clamp_errors} clamp mismatches"),
    }
}

fn ablation_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ablation")
}

fn criterion_10() -> Outcome {
    let cfg = RunConfig {
        train_scenes: 64,
        val_scenes: 32,
        tau: 10,
        optimizer: team_detr::harness::OptimizerConfig { epochs: 3, ..Default::default() },
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, Some(a.path())).unwrap();
    train(&cfg, Some(b.path())).unwrap();
    let (x, y) = (
        std::fs::read(a.path().join("metrics.csv")).unwrap(),
        std::fs::read(b.path().join("metrics.csv")).unwrap(),
    );
    Outcome {
        pass: x == y && !x.is_empty(),
        detail: format!("two runs of the same config and seed: metrics.csv {} ({} bytes)", if x == y { "identical" } else { "DIFFERENT" }, x.len()),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and similar probes expect no work
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "assignment optimality", timed(Some(Duration::from_secs(30)), criterion_1));
    report(2, "decomposition soundness", timed(Some(Duration::from_secs(30)), criterion_2));
    report(3, "mask and partition invariants", timed(Some(Duration::from_secs(10)), criterion_3));
    report(4, "gradient fidelity", timed(Some(Duration::from_secs(300)), criterion_4));
    report(5, "position-loss contract", timed(None, criterion_5));
    report(6, "preference-extraction contract", timed(None, criterion_6));

    let base = RunConfig::default();
    let start = Instant::now();
    let dir = ablation_dir();
    let ab = ablate(&base, &[0, 1, 2], Some(&dir)).expect("ablation runs");
    let el = start.elapsed().as_secs_f64();
    let ap = |s: Setting| ab.row(s).ap_mean;
    let (s1, s2, s3, s4, s5) = (ap(Setting::S1), ap(Setting::S2), ap(Setting::S3), ap(Setting::S4), ap(Setting::S5));
    report(
        7,
        "ablation ordering",
        Outcome {
            pass: s3 > s2 && s2 > s1 && s5 >= s4 && s4 >= s3 && (s3 - s1) * 100.0 >= 2.0,
            detail: format!(
                "mean AP over seeds 0,1,2: S1 {s1:.4} S2 {s2:.4} S3 {s3:.4} S4 {s4:.4} S5 {s5:.4}; S3 - S1 = {:.2} points; report in {}; {el:.0} s",
                (s3 - s1) * 100.0,
                dir.display()
            ),
        },
    );
    let ratio = ab.scale_std_ratio_s3_s1;
    report(
        8,
        "scale-variance reduction",
        Outcome {
            pass: ratio <= 0.6,
            detail: format!(
                "matched-scale std S1 {:.4}, S3 {:.4}, ratio {ratio:.3}",
                ab.row(Setting::S1).scale_std_mean,
                ab.row(Setting::S3).scale_std_mean
            ),
        },
    );
    let (c1, c4, c5) = (
        ab.row(Setting::S1).center_within_eta_frac,
        ab.row(Setting::S4).center_within_eta_frac,
        ab.row(Setting::S5).center_within_eta_frac,
    );
    report(
        9,
        "center concentration",
        Outcome {
            pass: c4 >= 0.9 && c5 >= 0.9,
            detail: format!("share within eta of the anchor: S4 {c4:.3}, S5 {c5:.3}; S1 without the constraint {c1:.3}"),
        },
    );
    report(10, "determinism", timed(None, criterion_10));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
