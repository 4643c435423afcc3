//! Acceptance suite. Each test prints one `acceptance N PASS|FAIL` line with
//! the measured values, then asserts on the same condition.
//!
//! Run with `cargo test -p cropforge-cli --test acceptance -- --nocapture`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cropforge::autograd::gradcheck::{run_suite, SuiteOptions, Tolerance};
use cropforge::autograd::Tensor;
use cropforge::boxgeom::{giou, iou, BBox, MosaicLayout};
use cropforge::config::RunConfig;
use cropforge::dataset::{generate_split, ideal_crop, Dataset, GeneratorParams, SchemaKind, ScoredBox};
use cropforge::decoder::{DecoderModel, BASE_UNION};
use cropforge::encoder::{positional_codes, ConceptVocabulary, EncoderConfig, SceneObject, SceneSpec, SyntheticEncoder};
use cropforge::evalsuite::{
    acc_k_n, evaluate, iou_mean_max, oracle_predictions, random_predictions, EvalOptions, EvalReport, Metric,
    PredictionSource,
};
use cropforge::querying::{default_concepts, filter_training_selection, match_queries, QueryMode, QuerySet};
use cropforge::training::{
    composition_gradcheck, hungarian, sample_mosaic, score_targets, train, LossConfig, TargetRule, TrainState,
    TrainingData,
};
use cropforge::util::rng_from;
use rand::Rng;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("acceptance {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let tol = Tolerance::default();
    let opts = SuiteOptions {
        seed: 0,
        cases_per_op: 20,
        inject_fault: None,
        tolerance: tol,
    };
    let ops = run_suite(&opts).unwrap();
    let worst_op = ops.iter().map(|r| r.worst_rel_error).fold(0.0, f64::max);
    let mut worst_comp: f64 = 0.0;
    let mut comp_ok = true;
    for seed in 0..20 {
        let out = composition_gradcheck(seed, &tol).unwrap();
        worst_comp = worst_comp.max(out.worst_rel_error);
        comp_ok &= out.passed;
    }
    let elapsed = start.elapsed();
    let pass = ops.iter().all(|r| r.passed && r.cases >= 20)
        && comp_ok
        && tol.step == 1e-6
        && tol.rel == 1e-4
        && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops x 20 cases worst {worst_op:.2e}; decoder+loss x 20 seeds worst {worst_comp:.2e}; {:.1}s",
            ops.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], t: bool, row: usize, k: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == k {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                let v = if t { cost[j][row] } else { cost[row][j] };
                rec(cost, t, row + 1, k, used, acc + v, best);
                used[j] = false;
            }
        }
    }
    let (r, c) = (cost.len(), cost[0].len());
    let mut best = f64::INFINITY;
    rec(cost, r > c, 0, r.min(c), &mut vec![false; r.max(c)], 0.0, &mut best);
    best
}

#[test]
fn c02_hungarian_oracle() {
    let start = Instant::now();
    let mut rng = rng_from(2, &[b"acceptance", b"hungarian"]);
    let mut agree = 0;
    for _ in 0..1000 {
        let small = rng.random_range(1..=7usize);
        let large = small + rng.random_range(0..=2usize);
        let (r, c) = if rng.random_bool(0.5) { (small, large) } else { (large, small) };
        let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let m = hungarian(&cost).unwrap();
        let total: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        agree += usize::from(m.pairs.len() == r.min(c) && (total - brute_force(&cost)).abs() < 1e-9);
    }
    let elapsed = start.elapsed();
    let pass = agree == 1000 && elapsed < Duration::from_secs(30);
    report(2, "hungarian oracle", pass, &format!("{agree}/1000 agree with brute force; {:.1}s", elapsed.as_secs_f64()));
    assert!(pass);
}

fn raster_iou(a: &BBox, b: &BBox, res: usize) -> f64 {
    let count = |lo: f64, hi: f64| {
        (0..res)
            .filter(|&i| {
                let c = (i as f64 + 0.5) / res as f64;
                c >= lo && c < hi
            })
            .count() as f64
    };
    let area = |x: &BBox| count(x.x1(), x.x2()) * count(x.y1(), x.y2());
    let inter = count(a.x1().max(b.x1()), a.x2().min(b.x2())) * count(a.y1().max(b.y1()), a.y2().min(b.y2()));
    let union = area(a) + area(b) - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[test]
fn c03_iou_oracle() {
    // corners on the 1/1000 lattice so the raster count is itself exact
    let mut rng = rng_from(3, &[b"acceptance", b"raster"]);
    let side = |rng: &mut dyn rand::RngCore| {
        let len = rng.random_range(100u32..=600);
        let lo = rng.random_range(0..=1000 - len);
        (lo as f64 / 1000.0, (lo + len) as f64 / 1000.0)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let ((ax1, ax2), (ay1, ay2)) = (side(&mut rng), side(&mut rng));
        let ((bx1, bx2), (by1, by2)) = (side(&mut rng), side(&mut rng));
        let a = BBox::from_corners(ax1, ay1, ax2, ay2);
        let b = BBox::from_corners(bx1, by1, bx2, by2);
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b, 1000)).abs());
    }
    let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
    let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
    let seventh = iou(&a, &b);
    let c = BBox::from_corners(0.0, 0.0, 0.25, 0.25);
    let d = BBox::from_corners(0.5, 0.5, 0.75, 0.75);
    let g = giou(&c, &d);
    let pass = worst <= 2e-3 && (seventh - 1.0 / 7.0).abs() < 1e-15 && (g + 7.0 / 9.0).abs() < 1e-15;
    report(
        3,
        "iou oracle",
        pass,
        &format!("500 pairs worst raster gap {worst:.2e}; hand iou {seventh:.15} giou {g:.15}"),
    );
    assert!(pass);
}

#[test]
fn c04_structural_identities() {
    let rc = RunConfig::read(&desk_config()).unwrap();
    let mut model = DecoderModel::init(rc.decoder.clone(), 4).unwrap();
    for (name, t) in model.params_mut().iter_mut() {
        if !name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = rng_from(4, &[b"acceptance", b"tokens"]);
    let (n, d) = (rc.encoder.grid * rc.encoder.grid, rc.decoder.model_dim);
    let tokens = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let pos = positional_codes(rc.encoder.grid, d);
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut exact = 0;
    let unions = [BBox::new(0.4, 0.6, 0.3, 0.2), BBox::new(0.5, 0.5, 1.0, 1.0), BASE_UNION];
    for u in &unions {
        let out = model.decode(Some(&shift), &tokens, &pos, u).unwrap();
        exact += out.pred_boxes.iter().filter(|b| *b == u).count();
    }
    let total = unions.len() * rc.decoder.num_queries;
    let fresh = DecoderModel::init(rc.decoder.clone(), 5).unwrap();
    let q_base = fresh.build_query(None);
    let base_exact = q_base.data() == fresh.params().get("query_tokens").unwrap().data();
    let pass = exact == total && base_exact;
    report(
        4,
        "structural identities",
        pass,
        &format!("zero weights reproduce the union box in {exact}/{total} queries; base-mode queries equal learnable queries: {base_exact}"),
    );
    assert!(pass);
}

#[test]
fn c05_label_smoothing_boundary() {
    let cfg = LossConfig::default();
    // dyadic sizes make the 0.9 ratio exact in floating point
    let gt = BBox::new(0.3125, 0.25, 0.625, 0.5);
    let at = BBox::new(0.28125, 0.25, 0.5625, 0.5);
    let below = BBox::new(0.625 * 0.8999 / 2.0, 0.25, 0.625 * 0.8999, 0.5);
    let anchor = BBox::new(0.8, 0.8, 0.2, 0.2);
    let gts = [ScoredBox { bbox: anchor, score: 4.5 }, ScoredBox { bbox: gt, score: 3.5 }];
    let t = score_targets(&[anchor, at, below], &gts, &[(0, 0)], &cfg);
    let (iou_at, iou_below) = (iou(&at, &gt), iou(&below, &gt));
    let pass = iou_at == 0.9
        && (iou_below - 0.8999).abs() < 1e-12
        && t[1].rule == TargetRule::Smoothed
        && t[1].target == 0.7
        && t[2].rule == TargetRule::Background
        && t[2].target == 0.0
        && t[2].weight == cfg.background_weight;
    report(
        5,
        "label smoothing boundary",
        pass,
        &format!(
            "iou {iou_at} -> {:?} target {}; iou {iou_below:.6} -> {:?} target {} weight {}",
            t[1].rule, t[1].target, t[2].rule, t[2].target, t[2].weight
        ),
    );
    assert!(pass);
}

fn planted_filter_case(case: u64, encoder: &SyntheticEncoder) -> bool {
    let mut rng = rng_from(case, &[b"acceptance", b"planted"]);
    let grid = rng.random_range(2..=3usize);
    let cells: Vec<(usize, usize)> = (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).collect();
    let target = cells[rng.random_range(0..cells.len())];
    let planted = loop {
        let c = cells[rng.random_range(0..cells.len())];
        if c != target {
            break c;
        }
    };
    let layout = MosaicLayout::new(grid, target).unwrap();
    let dog = |rng: &mut dyn rand::RngCore| {
        let (w, h) = (rng.random_range(0.25..0.5), rng.random_range(0.25..0.5));
        BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
    };
    let (target_dog, planted_dog) = (dog(&mut rng), dog(&mut rng));
    let scenes: Vec<SceneSpec> = cells
        .iter()
        .map(|&c| {
            let objects = if c == target {
                vec![("dog", target_dog)]
            } else if c == planted {
                vec![("dog", planted_dog)]
            } else {
                vec![("cat", BBox::new(0.5, 0.5, 0.4, 0.4))]
            };
            SceneSpec {
                canvas: [96, 96],
                background: [240, 240, 240],
                objects: objects
                    .into_iter()
                    .map(|(concept, bbox)| SceneObject { concept: concept.into(), bbox, color: [90, 60, 30] })
                    .collect(),
            }
        })
        .collect();
    let refs: Vec<&SceneSpec> = scenes.iter().collect();
    let composed = cropforge::training::compose(&layout, &refs).unwrap();
    let enc = encoder.encode_scene(&composed).unwrap();
    let tg = layout.to_global(target, &target_dog).unwrap();
    let pg = layout.to_global(planted, &planted_dog).unwrap();
    let (t_tok, p_tok) = (enc.token_at(tg.cx, tg.cy), enc.token_at(pg.cx, pg.cy));
    let queries = QuerySet {
        mode: QueryMode::Both,
        embeddings: vec![enc.class_embeddings.row(t_tok).to_vec(), enc.class_embeddings.row(p_tok).to_vec()],
        source_strings: vec!["dog".into(), "dog".into()],
    };
    let sel = match_queries(&queries, &enc).unwrap();
    let best_gt = layout
        .to_global(target, &ideal_crop(&[target_dog], GeneratorParams::default().margin))
        .unwrap();
    let filtered = filter_training_selection(&sel, &enc, &best_gt, &layout.target_region());
    sel.token_indices.contains(&p_tok)
        && !filtered.token_indices.contains(&p_tok)
        && filtered.token_indices.contains(&t_tok)
        && !filtered.fallback
}

#[test]
fn c06_mosaic_sampler() {
    let concepts = default_concepts();
    let ds = generate_split("train", 12, &concepts, 6, SchemaKind::Both, &GeneratorParams::default()).unwrap();
    let mut rng = rng_from(6, &[b"acceptance", b"mosaic"]);
    let mut counts = [0usize; 3];
    let draws = 30_000;
    for _ in 0..draws {
        counts[sample_mosaic(&ds, &mut rng, 0.5).unwrap().layout.grid() - 1] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let freq_ok = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.01);

    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let grid = rng.random_range(1..=3usize);
        let cell = (rng.random_range(0..grid), rng.random_range(0..grid));
        let layout = MosaicLayout::new(grid, cell).unwrap();
        let b = BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
        let back = layout.from_global(cell, &layout.to_global(cell, &b).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&b));
    }

    let enc_cfg = EncoderConfig::default();
    let vocab = ConceptVocabulary::new(&concepts, enc_cfg.dim, enc_cfg.seed).unwrap();
    let encoder = SyntheticEncoder::new(enc_cfg, vocab).unwrap();
    let dropped = (0..200).filter(|&c| planted_filter_case(c, &encoder)).count();

    let pass = freq_ok && worst <= 1e-12 && dropped == 200;
    report(
        6,
        "mosaic sampler",
        pass,
        &format!(
            "grid freqs {:.4}/{:.4}/{:.4} over {draws}; round-trip worst {worst:.1e}; planted duplicate dropped {dropped}/200",
            freqs[0], freqs[1], freqs[2]
        ),
    );
    assert!(pass);
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

struct ModeRun {
    report: EvalReport,
    seconds: f64,
    first_total: f64,
    last_total: f64,
}

struct Reference {
    untrained: EvalReport,
    both: ModeRun,
    main: ModeRun,
    base: ModeRun,
}

/// The reference pipeline: 200 train / 50 test scenes at seed 7, desk config,
/// one model per query mode, scored on the held-out split.
fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| {
        let mut rc = RunConfig::read(&desk_config()).unwrap();
        rc.concepts = default_concepts();
        let rc = rc.checked().unwrap();
        let p = GeneratorParams::default();
        let seed = rc.train.seed;
        let train_ds = generate_split("train", 200, &rc.concepts, seed, SchemaKind::Both, &p).unwrap();
        let test_ds = generate_split("test", 50, &rc.concepts, seed, SchemaKind::Both, &p).unwrap();
        let encoder = rc.build_encoder().unwrap();
        let lexicon = rc.lexicon();
        let score = |model: &DecoderModel, mode: QueryMode| {
            let src = PredictionSource::Model { model, encoder: &encoder, lexicon: &lexicon, mode };
            let opts = EvalOptions { metrics: vec![Metric::Iou], record_k: 1, config: rc.to_value() };
            evaluate(&src, &test_ds, &opts).unwrap()
        };
        let run = |mode: QueryMode| {
            let mut cfg = rc.train.clone();
            cfg.query_mode = mode;
            let start = Instant::now();
            let data = TrainingData { encoder: &encoder, lexicon: &lexicon, train: &train_ds, probe: None };
            let mut totals = Vec::new();
            let fresh = TrainState::fresh(DecoderModel::init(rc.decoder.clone(), seed).unwrap());
            let st = train(data, &cfg, fresh, |log, _| {
                totals.push(log.total);
                Ok(())
            })
            .unwrap();
            let seconds = start.elapsed().as_secs_f64();
            ModeRun {
                report: score(&st.model, mode),
                seconds,
                first_total: totals[0],
                last_total: *totals.last().unwrap(),
            }
        };
        let untrained = score(&DecoderModel::init(rc.decoder.clone(), seed).unwrap(), QueryMode::Both);
        Reference {
            untrained,
            both: run(QueryMode::Both),
            main: run(QueryMode::Main),
            base: run(QueryMode::None),
        }
    })
}

fn agg(r: &EvalReport) -> (f64, f64) {
    (r.aggregates.iou_mean.unwrap(), r.aggregates.iou_max.unwrap())
}

#[test]
fn c07_end_to_end_learning() {
    let r = reference();
    let (_, both) = agg(&r.both.report);
    let (_, untrained) = agg(&r.untrained);
    let (_, base) = agg(&r.base.report);
    let ratio = r.both.last_total / r.both.first_total;
    let seconds = r.both.seconds.max(r.base.seconds).max(r.main.seconds);
    let pass = both >= 0.60 && both - untrained >= 0.10 && both - base >= 0.10 && ratio < 0.25 && seconds < 600.0;
    report(
        7,
        "end-to-end learning",
        pass,
        &format!(
            "held-out IoU-Max both {both:.4}, untrained {untrained:.4}, base {base:.4}; loss {:.3} -> {:.3} ({:.0}%); slowest run {seconds:.0}s",
            r.both.first_total,
            r.both.last_total,
            100.0 * ratio
        ),
    );
    assert!(pass);
}

#[test]
fn c08_ablation_ordering() {
    let r = reference();
    let (base, _) = agg(&r.base.report);
    let (main, _) = agg(&r.main.report);
    let (both, _) = agg(&r.both.report);
    let pass = base < main && main <= both && both - base >= 0.05;
    report(
        8,
        "ablation ordering",
        pass,
        &format!("held-out IoU-Mean base {base:.4} < main {main:.4} <= both {both:.4}"),
    );
    assert!(pass);
}

#[test]
fn c09_metric_fixtures() {
    let a = BBox::new(0.5, 0.5, 0.4, 0.4);
    let mut ok = Vec::new();
    ok.push(iou_mean_max(&a, &[a, a, a]).unwrap() == (1.0, 1.0));
    // IoU 0.5 and 0.7 against a unit-height strip
    let p = BBox::from_corners(0.3, 0.3, 0.5, 0.7);
    let b5 = BBox::from_corners(0.3, 0.3, 0.7, 0.7);
    let b7 = BBox::from_corners(0.3, 0.3, 0.3 + 0.2 / 0.7, 0.7);
    let (m, x) = iou_mean_max(&p, &[b5, b7]).unwrap();
    ok.push((m - 0.6).abs() < 1e-12 && (x - 0.7).abs() < 1e-12);
    ok.push(iou_mean_max(&BBox::new(0.1, 0.1, 0.1, 0.1), &[BBox::new(0.8, 0.8, 0.2, 0.2)]).unwrap() == (0.0, 0.0));

    let prop = |i: usize| BBox::new(0.1 + 0.15 * i as f64, 0.5, 0.1, 0.4);
    let scores = [5.0, 4.8, 4.6, 3.0, 2.0, 1.0];
    let dense: Vec<ScoredBox> = (0..6).map(|i| ScoredBox { bbox: prop(i), score: scores[i] }).collect();
    ok.push(acc_k_n(&[prop(0)], &dense, 5).unwrap() == 1);
    ok.push(acc_k_n(&[prop(5)], &dense, 5).unwrap() == 0);
    ok.push(acc_k_n(&[prop(4)], &dense, 5).unwrap() == 1);
    ok.push(acc_k_n(&[prop(4)], &dense, 3).unwrap() == 0);

    let concepts = default_concepts();
    let ds: Dataset = generate_split("test", 50, &concepts, 7, SchemaKind::Both, &GeneratorParams::default()).unwrap();
    let opts = || EvalOptions { metrics: vec![Metric::Iou, Metric::Acc], record_k: 5, config: serde_json::Value::Null };
    let oracle = oracle_predictions(&ds);
    let oracle_report = evaluate(&PredictionSource::Records(&oracle), &ds, &opts()).unwrap();
    let oracle_max = oracle_report.aggregates.iou_max.unwrap();
    let random = random_predictions(&ds, 7);
    let random_mean = evaluate(&PredictionSource::Records(&random), &ds, &opts()).unwrap().aggregates.iou_mean.unwrap();
    let again = evaluate(&PredictionSource::Records(&oracle), &ds, &opts()).unwrap();
    let bytes_equal = oracle_report.to_json() == again.to_json() && oracle_report.to_csv() == again.to_csv();
    let fixtures = ok.iter().filter(|&&b| b).count();
    let pass = fixtures == ok.len() && oracle_max >= 0.9 && random_mean < 0.3 && bytes_equal;
    report(
        9,
        "metric fixtures",
        pass,
        &format!(
            "{fixtures}/{} hand fixtures; oracle IoU-Max {oracle_max:.4}; random IoU-Mean {random_mean:.4}; identical report bytes: {bytes_equal}",
            ok.len()
        ),
    );
    assert!(pass);
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cropforge"))
        .env_remove("CROPFORGE_SEED")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_command_determinism() {
    let tmp = tempfile::TempDir::new().unwrap();
    let root = tmp.path();
    let cfg = root.join("small.json");
    std::fs::write(
        &cfg,
        r#"{"encoder": {"grid": 6, "dim": 16},
            "decoder": {"num_queries": 4, "num_layers": 1, "model_dim": 16, "num_heads": 2, "mlp_hidden": 24},
            "train": {"epochs": 2, "batch_size": 4, "lr_max": 0.001, "seed": 10}}"#,
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut identical = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let data = dir.join("data");
        cli(&["gen-data", "--out", &s(&data), "--train", "12", "--val", "2", "--test", "4", "--seed", "10"]);
        // later commands read the first run's files: the data path is part of
        // the recorded config, so identical flags means identical inputs
        let shared = root.join("a");
        cli(&["train", "--data", &s(&shared.join("data")), "--config", &s(&cfg), "--out", &s(&dir.join("train/model.json"))]);
        let ckpt = s(&shared.join("train/model.json"));
        cli(&["eval", "--data", &s(&shared.join("data")), "--ckpt", &ckpt, "--metrics", "iou,acc", "--report", &s(&dir.join("eval/r.json")), "--csv", &s(&dir.join("eval/r.csv"))]);
        let img = s(&shared.join("data/test/images/test-00000.ppm"));
        let meta = s(&shared.join("data/test/images/test-00000.json"));
        cli(&["crop", "--image", &img, "--meta", &meta, "--text", "the dog", "--ckpt", &ckpt, "--top-k", "3", "--out", &s(&dir.join("crop"))]);
    }
    for sub in ["data", "train", "eval", "crop"] {
        identical.push((sub, tree(&root.join("a").join(sub)) == tree(&root.join("b").join(sub))));
    }
    let pass = identical.iter().all(|(_, same)| *same);
    let detail: Vec<String> = identical.iter().map(|(n, same)| format!("{n} {}", if *same { "identical" } else { "differs" })).collect();
    report(10, "command determinism", pass, &detail.join(", "));
    assert!(pass);
}
