//! Release gate. Prints one PASS/FAIL line per criterion, then fails if any
//! criterion failed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use alforge_core::corpus::{generate_world, LabelState, WorldConfig};
use alforge_core::detector::bridge::{check_adapter, BridgeError, StdioTransport};
use alforge_core::detector::SimulatedDetector;
use alforge_core::engine::{run_into, Engine, RunConfig, RunMode, RunReport};
use alforge_core::evaluation::compute_metrics;
use alforge_core::geometry::{greedy_nms, iou, match_detections};
use alforge_core::oracle::SyntheticAnnotator;
use alforge_core::selection::{partition_pool, select_batch, Bucket, BucketThresholds, SelectionPlan};
use alforge_core::tiling::{make_grid, pano_to_tile, tile_to_pano, PanoramaSpec, TileRef};
use alforge_core::{BoundingBox, Detection, ImageId, NmsConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOOPBACK: &str = env!("CARGO_BIN_EXE_alforge-loopback");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))?;
    Ok(t)
}

// ---------------------------------------------------------------- metric arithmetic

/// Published per-iteration counts and rounded rates: tp, fn, fp, tpr, precision, f.
const REFERENCE_ROWS: [(usize, usize, usize, f64, f64, f64); 7] = [
    (397, 209, 115, 0.66, 0.78, 0.71),
    (413, 193, 40, 0.68, 0.91, 0.78),
    (417, 189, 28, 0.69, 0.94, 0.79),
    (452, 154, 22, 0.75, 0.95, 0.84),
    (493, 113, 51, 0.81, 0.91, 0.86),
    (477, 129, 39, 0.79, 0.92, 0.85),
    (476, 130, 26, 0.79, 0.95, 0.86),
];

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn reference_rows() -> Outcome {
    for (k, &(tp, fn_, fp, tpr, pr, f)) in REFERENCE_ROWS.iter().enumerate() {
        let m = compute_metrics(tp, fn_, fp, &vec![0.5; tp]).map_err(|e| e.to_string())?;
        let got = (round2(m.tpr), round2(m.precision), round2(m.f_score));
        ensure(got == (tpr, pr, f), || {
            format!("row {}: got {got:?}, published ({tpr}, {pr}, {f})", k + 1)
        })?;
        // Test-set size is the same for every row.
        ensure(tp + fn_ == 606, || format!("row {}: tp + fn = {}", k + 1, tp + fn_))?;
    }
    Ok("7/7 rows reproduce TPR, precision and F-score to two decimals".into())
}

// ---------------------------------------------------------------- geometry

#[derive(Clone, Copy, Debug)]
struct IBox {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl IBox {
    fn bb(&self) -> BoundingBox {
        BoundingBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64).unwrap()
    }

    fn area(&self) -> i64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn inter(&self, o: &IBox) -> i64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        w * h
    }

    /// Exact IoU as (intersection, union).
    fn ratio(&self, o: &IBox) -> (i64, i64) {
        let i = self.inter(o);
        (i, self.area() + o.area() - i)
    }
}

fn rand_box(rng: &mut impl Rng, span: i64, max_side: i64) -> IBox {
    let x0 = rng.random_range(0..span);
    let y0 = rng.random_range(0..span);
    IBox {
        x0,
        y0,
        x1: x0 + rng.random_range(1..=max_side),
        y1: y0 + rng.random_range(1..=max_side),
    }
}

/// Box near a cluster centre, so instances are dense with overlaps.
fn clustered_box(rng: &mut impl Rng, centres: &[(i64, i64)]) -> IBox {
    let (cx, cy) = centres[rng.random_range(0..centres.len())];
    let x0 = cx + rng.random_range(0..=8);
    let y0 = cy + rng.random_range(0..=8);
    IBox {
        x0,
        y0,
        x1: x0 + rng.random_range(6..=14),
        y1: y0 + rng.random_range(6..=14),
    }
}

/// IoU by counting unit pixels.
fn pixel_iou(a: &IBox, b: &IBox) -> f64 {
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for y in a.y0.min(b.y0)..a.y1.max(b.y1) {
        for x in a.x0.min(b.x0)..a.x1.max(b.x1) {
            let ia = a.x0 <= x && x < a.x1 && a.y0 <= y && y < a.y1;
            let ib = b.x0 <= x && x < b.x1 && b.y0 <= y && y < b.y1;
            na += ia as u64;
            nb += ib as u64;
            both += (ia && ib) as u64;
        }
    }
    if both == 0 {
        0.0
    } else {
        both as f64 / (na + nb - both) as f64
    }
}

fn iou_oracle(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut overlapping = 0;
    for case in 0..1000 {
        let a = rand_box(rng, 40, 30);
        let b = if case % 4 == 0 {
            rand_box(rng, 40, 30)
        } else {
            let x0 = (a.x0 + rng.random_range(-6..=6)).max(0);
            let y0 = (a.y0 + rng.random_range(-6..=6)).max(0);
            IBox {
                x0,
                y0,
                x1: x0 + rng.random_range(1..=30),
                y1: y0 + rng.random_range(1..=30),
            }
        };
        let want = pixel_iou(&a, &b);
        let got = iou(&a.bb(), &b.bb());
        overlapping += (want > 0.0) as usize;
        ensure((got - want).abs() <= 1e-9, || {
            format!("iou {a:?} {b:?}: {got} vs pixel count {want}")
        })?;
    }
    Ok(overlapping)
}

/// Candidate indices after the pre-filter, highest confidence first, ties by
/// input order.
fn ranked(conf: &[f64], pre: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).filter(|&i| conf[i] >= pre).collect();
    idx.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// `iou >= 0.45` in exact arithmetic.
fn nms_overlap(a: &IBox, b: &IBox) -> bool {
    let (i, u) = a.ratio(b);
    20 * i >= 9 * u
}

fn reference_nms(boxes: &[IBox], conf: &[f64], cfg: &NmsConfig) -> Vec<usize> {
    let mut alive = ranked(conf, cfg.pre_filter_conf);
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let top = alive.remove(0);
        kept.push(top);
        alive.retain(|&j| !nms_overlap(&boxes[top], &boxes[j]));
    }
    kept.retain(|&i| conf[i] >= cfg.final_conf);
    kept
}

/// Every subset of the candidates satisfying the greedy-NMS characterisation:
/// kept boxes never overlap, and each dropped box overlaps a higher-ranked
/// kept one.
fn characterised_nms(boxes: &[IBox], conf: &[f64], cfg: &NmsConfig) -> Vec<Vec<usize>> {
    let order = ranked(conf, cfg.pre_filter_conf);
    let n = order.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |r: usize| mask & (1 << r) != 0;
        let ok = (0..n).all(|r| {
            if inside(r) {
                (0..r).all(|q| !inside(q) || !nms_overlap(&boxes[order[q]], &boxes[order[r]]))
            } else {
                (0..r).any(|q| inside(q) && nms_overlap(&boxes[order[q]], &boxes[order[r]]))
            }
        });
        if ok {
            found.push(
                (0..n)
                    .filter(|&r| inside(r) && conf[order[r]] >= cfg.final_conf)
                    .map(|r| order[r])
                    .collect(),
            );
        }
    }
    found
}

fn dets(boxes: &[IBox], conf: &[f64]) -> Vec<Detection> {
    boxes
        .iter()
        .zip(conf)
        .map(|(b, &c)| Detection::new(ImageId(0), b.bb(), c).unwrap())
        .collect()
}

fn rand_conf(rng: &mut impl Rng) -> f64 {
    // A coarse grid forces ties; the low end exercises both cutoffs.
    match rng.random_range(0..4) {
        0 => [0.0, 0.005, 0.01, 0.2, 0.3][rng.random_range(0..5)],
        1 => rng.random_range(0..=20) as f64 * 0.05,
        _ => rng.random_range(0.0..1.0),
    }
}

fn nms_oracle(rng: &mut ChaCha8Rng) -> Result<(usize, usize), String> {
    let cfg = NmsConfig::default();
    let (mut enumerated, mut suppressions) = (0, 0);
    for case in 0..500 {
        let n = if case % 2 == 0 {
            rng.random_range(0..=10)
        } else {
            rng.random_range(0..=20)
        };
        let centres: Vec<(i64, i64)> = (0..rng.random_range(1..=4))
            .map(|_| (rng.random_range(0..30), rng.random_range(0..30)))
            .collect();
        let boxes: Vec<IBox> = (0..n).map(|_| clustered_box(rng, &centres)).collect();
        let conf: Vec<f64> = (0..n).map(|_| rand_conf(rng)).collect();
        let d = dets(&boxes, &conf);
        let got = greedy_nms(&d, &cfg);
        let want = reference_nms(&boxes, &conf, &cfg);
        let want_d: Vec<Detection> = want.iter().map(|&i| d[i]).collect();
        ensure(got == want_d, || {
            format!("case {case}: greedy_nms {got:?}, reference {want_d:?}")
        })?;
        let before_cutoff = reference_nms(
            &boxes,
            &conf,
            &NmsConfig {
                final_conf: cfg.pre_filter_conf,
                ..cfg
            },
        );
        suppressions += ranked(&conf, cfg.pre_filter_conf).len() - before_cutoff.len();
        if ranked(&conf, cfg.pre_filter_conf).len() <= 10 {
            let sets = characterised_nms(&boxes, &conf, &cfg);
            ensure(sets == vec![want.clone()], || {
                format!("case {case}: characterisation admits {sets:?}, reference {want:?}")
            })?;
            enumerated += 1;
        }
    }
    Ok((enumerated, suppressions))
}

/// Exact rational key; larger is better. Equal IoU prefers the lower gt index.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct MatchKey {
    inter: i64,
    union: i64,
    gt: usize,
}

impl Ord for MatchKey {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.inter * o.union)
            .cmp(&(o.inter * self.union))
            .then(o.gt.cmp(&self.gt))
    }
}

impl PartialOrd for MatchKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

type Best = Option<(Vec<Option<MatchKey>>, Vec<Option<usize>>)>;

/// Lexicographically best assignment over predictions in confidence order,
/// enumerating every partial injection with IoU >= 0.5 on matched pairs.
fn brute_force_match(preds: &[IBox], conf: &[f64], gts: &[IBox]) -> Vec<Option<usize>> {
    let order = ranked(conf, f64::NEG_INFINITY);
    let mut best: Best = None;
    let mut keys = Vec::new();
    let mut assign = vec![None; preds.len()];
    let mut used = vec![false; gts.len()];

    #[allow(clippy::too_many_arguments)]
    fn go(
        r: usize,
        order: &[usize],
        preds: &[IBox],
        gts: &[IBox],
        keys: &mut Vec<Option<MatchKey>>,
        assign: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut Best,
    ) {
        if r == order.len() {
            if best.as_ref().is_none_or(|(k, _)| *keys > *k) {
                *best = Some((keys.clone(), assign.clone()));
            }
            return;
        }
        let p = order[r];
        keys.push(None);
        go(r + 1, order, preds, gts, keys, assign, used, best);
        keys.pop();
        for g in 0..gts.len() {
            let (i, u) = preds[p].ratio(&gts[g]);
            if used[g] || 2 * i < u {
                continue;
            }
            used[g] = true;
            assign[p] = Some(g);
            keys.push(Some(MatchKey {
                inter: i,
                union: u,
                gt: g,
            }));
            go(r + 1, order, preds, gts, keys, assign, used, best);
            keys.pop();
            assign[p] = None;
            used[g] = false;
        }
    }

    go(0, &order, preds, gts, &mut keys, &mut assign, &mut used, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

fn matching_oracle(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut tps = 0;
    for case in 0..500 {
        let centres: Vec<(i64, i64)> = (0..rng.random_range(1..=3))
            .map(|_| (rng.random_range(0..20), rng.random_range(0..20)))
            .collect();
        let np = rng.random_range(0..=6);
        let ng = rng.random_range(0..=6);
        let preds: Vec<IBox> = (0..np).map(|_| clustered_box(rng, &centres)).collect();
        let gts: Vec<IBox> = (0..ng).map(|_| clustered_box(rng, &centres)).collect();
        let conf: Vec<f64> = (0..np).map(|_| rand_conf(rng)).collect();
        let want = brute_force_match(&preds, &conf, &gts);
        let gt_boxes: Vec<BoundingBox> = gts.iter().map(IBox::bb).collect();
        let got = match_detections(&dets(&preds, &conf), &gt_boxes, 0.5);

        let got_pairs: BTreeSet<(usize, usize)> = got.tp_pairs.iter().map(|t| (t.pred, t.gt)).collect();
        let want_pairs: BTreeSet<(usize, usize)> =
            want.iter().enumerate().filter_map(|(p, g)| g.map(|g| (p, g))).collect();
        ensure(got_pairs == want_pairs, || {
            format!("case {case}: matched {got_pairs:?}, brute force {want_pairs:?}")
        })?;
        let want_fp: BTreeSet<usize> = (0..np).filter(|&p| want[p].is_none()).collect();
        ensure(got.fp.iter().copied().collect::<BTreeSet<_>>() == want_fp, || {
            format!("case {case}: fp {:?}, brute force {want_fp:?}", got.fp)
        })?;
        let matched: BTreeSet<usize> = want_pairs.iter().map(|p| p.1).collect();
        let want_fn: Vec<usize> = (0..ng).filter(|g| !matched.contains(g)).collect();
        ensure(got.fn_ == want_fn, || {
            format!("case {case}: fn {:?}, brute force {want_fn:?}", got.fn_)
        })?;
        for t in &got.tp_pairs {
            let (i, u) = preds[t.pred].ratio(&gts[t.gt]);
            ensure((t.iou - i as f64 / u as f64).abs() <= 1e-12, || {
                format!("case {case}: pair iou {}", t.iou)
            })?;
        }
        tps += got_pairs.len();
    }
    Ok(tps)
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let overlapping = iou_oracle(&mut rng)?;
    let (enumerated, suppressions) = nms_oracle(&mut rng)?;
    let tps = matching_oracle(&mut rng)?;
    let t = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "iou = pixel count ({overlapping} overlapping pairs); nms = reference on 500 ({enumerated} by subset enumeration, {suppressions} suppressions); matching = brute force on 500 ({tps} tp); {t:.2?}"
    ))
}

// ---------------------------------------------------------------- selection

fn scores_strategy(max: usize) -> impl Strategy<Value = BTreeMap<ImageId, Option<f64>>> {
    let score = prop_oneof![
        1 => Just(None),
        1 => (0.0f64..0.3).prop_map(Some),
        1 => Just(Some(0.3)),
        3 => (0.3f64..=0.8).prop_map(Some),
        1 => Just(Some(0.8)),
        1 => (0.8f64..=1.0).prop_map(Some),
        1 => (0u32..=20).prop_map(|k| Some(k as f64 * 0.05)),
    ];
    prop::collection::btree_map((0u32..100_000).prop_map(ImageId), score, 0..max)
}

/// Buckets guaranteed to hold at least 200 / 600 / 200 entries.
fn rich_scores() -> impl Strategy<Value = BTreeMap<ImageId, Option<f64>>> {
    (
        200usize..400,
        600usize..1200,
        200usize..400,
        prop::collection::vec(0.0f64..1.0, 2000),
        any::<u64>(),
    )
        .prop_map(|(h, l, n, u, salt)| {
            let mut m = BTreeMap::new();
            let mut id = (salt % 1000) as u32;
            let mut k = 0;
            let mut push = |c: Option<f64>| {
                m.insert(ImageId(id), c);
                id += 1 + (salt >> (k % 60)) as u32 % 3;
                k += 1;
            };
            for &x in &u[..h] {
                push(Some(0.8 + 0.2 * x.max(1e-9)));
            }
            for i in 0..l {
                push(Some(0.3 + 0.5 * u[h + i % 1000]));
            }
            for i in 0..n {
                push(if i % 3 == 0 {
                    None
                } else {
                    Some(0.3 * u[1500 + i % 400])
                });
            }
            m
        })
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn selection() -> Outcome {
    let start = Instant::now();
    let t = BucketThresholds::default();
    let cfg = PtConfig {
        cases: 256,
        failure_persistence: None,
        ..PtConfig::default()
    };

    // Partition is a disjoint cover consistent with the thresholds.
    let mut runner = TestRunner::new_with_rng(
        cfg.clone(),
        proptest::test_runner::TestRng::deterministic_rng(cfg.rng_algorithm),
    );
    runner
        .run(&scores_strategy(3000), |scores| {
            let b = partition_pool(&scores, &t).map_err(|e| fail(e.to_string()))?;
            let mut seen = BTreeSet::new();
            for (id, bucket, c) in b.entries() {
                if !seen.insert(id) {
                    return Err(fail(format!("{id} in two buckets")));
                }
                let expect = match scores[&id] {
                    Some(c) if c > 0.8 => Bucket::High,
                    Some(c) if c >= 0.3 => Bucket::Low,
                    _ => Bucket::None,
                };
                if bucket != expect || c != scores[&id] {
                    return Err(fail(format!("{id} score {:?} put in {bucket:?}", scores[&id])));
                }
            }
            if seen.len() != scores.len() {
                return Err(fail(format!("{} of {} ids bucketed", seen.len(), scores.len())));
            }
            Ok(())
        })
        .map_err(|e| format!("partition: {e}"))?;

    // Full buckets: exact quotas, k-smallest High, top-k Low, determinism.
    let plan = SelectionPlan::default();
    let mut runner = TestRunner::new_with_rng(
        cfg.clone(),
        proptest::test_runner::TestRng::deterministic_rng(cfg.rng_algorithm),
    );
    runner
        .run(&(rich_scores(), any::<u64>()), |(scores, seed)| {
            let b = partition_pool(&scores, &t).map_err(|e| fail(e.to_string()))?;
            let s = select_batch(&b, &plan, seed).map_err(|e| fail(e.to_string()))?;
            let count = |k: Bucket| s.picks.iter().filter(|p| p.bucket == k).count();
            let counts = (count(Bucket::High), count(Bucket::Low), count(Bucket::None));
            if counts != (200, 600, 200) || s.shortfall != 0 {
                return Err(fail(format!("quotas {counts:?}, shortfall {}", s.shortfall)));
            }
            if s.ids().into_iter().collect::<BTreeSet<_>>().len() != 1000 {
                return Err(fail("duplicate picks".into()));
            }
            let mut high: Vec<f64> = b.high.iter().map(|e| e.1).collect();
            high.sort_by(f64::total_cmp);
            let mut got: Vec<f64> = s
                .picks
                .iter()
                .filter(|p| p.bucket == Bucket::High)
                .map(|p| p.confidence.unwrap())
                .collect();
            got.sort_by(f64::total_cmp);
            if got != high[..200] {
                return Err(fail("high picks are not the 200 smallest confidences".into()));
            }
            let mut low: Vec<f64> = b.low.iter().map(|e| e.1).collect();
            low.sort_by(|a, b| b.total_cmp(a));
            let mut top: Vec<f64> = s
                .picks
                .iter()
                .filter(|p| p.bucket == Bucket::Low)
                .take(300)
                .map(|p| p.confidence.unwrap())
                .collect();
            top.sort_by(|a, b| b.total_cmp(a));
            if top != low[..300] {
                return Err(fail("low top-k is not the 300 largest confidences".into()));
            }
            if select_batch(&b, &plan, seed).unwrap() != s {
                return Err(fail("same seed, different selection".into()));
            }
            Ok(())
        })
        .map_err(|e| format!("quotas: {e}"))?;

    // Any pool and budget: picks are distinct members of the pool and the
    // shortfall accounts exactly for what is missing.
    let mut runner = TestRunner::new_with_rng(
        cfg.clone(),
        proptest::test_runner::TestRng::deterministic_rng(cfg.rng_algorithm),
    );
    runner
        .run(
            &(scores_strategy(400), 0usize..500, any::<u64>()),
            |(scores, budget, seed)| {
                let b = partition_pool(&scores, &t).map_err(|e| fail(e.to_string()))?;
                let s = select_batch(&b, &SelectionPlan::with_budget(budget), seed).map_err(|e| fail(e.to_string()))?;
                let ids: BTreeSet<ImageId> = s.ids().into_iter().collect();
                if ids.len() != s.picks.len() || !ids.iter().all(|id| scores.contains_key(id)) {
                    return Err(fail("picks repeat or leave the pool".into()));
                }
                if s.picks.len() != budget.min(scores.len()) || s.picks.len() + s.shortfall != budget {
                    return Err(fail(format!(
                        "{} picks, shortfall {}, budget {budget}, pool {}",
                        s.picks.len(),
                        s.shortfall,
                        scores.len()
                    )));
                }
                if select_batch(&b, &SelectionPlan::with_budget(budget), seed).unwrap() != s {
                    return Err(fail("same seed, different selection".into()));
                }
                Ok(())
            },
        )
        .map_err(|e| format!("budgets: {e}"))?;

    let t = within(Duration::from_secs(10), start)?;
    Ok(format!("3 properties x 256 cases; {t:.2?}"))
}

// ---------------------------------------------------------------- tiling

/// Random coordinate in `[0, 1050)` at the finest precision the panorama
/// frame can hold (2^-38 below 2^14).
fn frame_coord(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let ulp = 2f64.powi(-38);
    let k = rng.random_range((lo / ulp) as u64..(hi / ulp) as u64);
    k as f64 * ulp
}

fn tiling() -> Outcome {
    let pano = PanoramaSpec::new(0);
    let grid = make_grid(&pano, 1050, 1050).map_err(|e| e.to_string())?;
    ensure(grid.tiles.len() == 91 && grid.cols == 13 && grid.rows == 7, || {
        format!("{} tiles ({} x {})", grid.tiles.len(), grid.cols, grid.rows)
    })?;

    let (w, h) = (pano.width as usize, pano.height as usize);
    let mut cover = vec![0u8; w * h];
    for t in &grid.tiles {
        let (ox, oy, s) = (t.origin_x as usize, t.origin_y as usize, t.tile_size as usize);
        ensure(ox + s <= w && oy + s <= h, || format!("tile {t:?} leaves the panorama"))?;
        for y in oy..oy + s {
            for c in &mut cover[y * w + ox..y * w + ox + s] {
                *c += 1;
            }
        }
    }
    // Overlap can only come from the clamped last column and row.
    let band_x = w - 1050..12 * 1050;
    let band_y = h - 1050..6 * 1050;
    let (mut uncovered, mut stray, mut shared) = (0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            match cover[y * w + x] {
                0 => uncovered += 1,
                1 => {}
                _ => {
                    shared += 1;
                    if !band_x.contains(&x) && !band_y.contains(&y) {
                        stray += 1;
                    }
                }
            }
        }
    }
    let clamped_overlap = (band_x.len() * h + band_y.len() * w - band_x.len() * band_y.len()) as u64;
    ensure(uncovered == 0, || format!("{uncovered} pixels uncovered"))?;
    ensure(stray == 0 && shared == clamped_overlap, || {
        format!("{shared} shared pixels ({stray} outside the clamped edge bands, expected {clamped_overlap})")
    })?;
    let unclamped: Vec<&TileRef> = grid.tiles.iter().filter(|t| t.col < 12 && t.row < 6).collect();
    ensure(unclamped.len() == 72, || format!("{} unclamped tiles", unclamped.len()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let t = &grid.tiles[rng.random_range(0..grid.tiles.len())];
        let x0 = frame_coord(&mut rng, 0.0, 1049.0);
        let y0 = frame_coord(&mut rng, 0.0, 1049.0);
        let x1 = frame_coord(&mut rng, x0 + 0.5, 1050.0);
        let y1 = frame_coord(&mut rng, y0 + 0.5, 1050.0);
        let b = BoundingBox::new(x0, y0, x1, y1).unwrap();
        let p = tile_to_pano(t, &b).map_err(|e| e.to_string())?;
        let back = pano_to_tile(t, &p).map_err(|e| e.to_string())?;
        ensure(back == b, || format!("{b:?} -> {p:?} -> {back:?}"))?;
    }
    Ok(format!(
        "91 tiles; every pixel covered; unclamped tiles disjoint, {shared} px shared only in the clamped edge bands; 1000/1000 boxes round-trip bit-exactly"
    ))
}

// ---------------------------------------------------------------- runs

fn desk(seed: u64, mode: RunMode) -> RunConfig {
    RunConfig {
        world: WorldConfig {
            n_panoramas: 200,
            sign_prevalence: 0.02,
            seed,
            ..Default::default()
        },
        plan: SelectionPlan::with_budget(100),
        max_iterations: 7,
        plateau_epsilon: 0.0,
        mode,
        seed,
        ..Default::default()
    }
}

fn engine(cfg: RunConfig) -> Engine<'static> {
    let world = generate_world(&cfg.world).unwrap();
    let det = SimulatedDetector::new(cfg.sim, cfg.seed);
    let ann = SyntheticAnnotator {
        cfg: cfg.oracle,
        seed: cfg.seed,
    };
    Engine::new(cfg, world, Box::new(det), Box::new(ann)).unwrap()
}

/// Run with the state invariants checked after every iteration.
fn checked_run(cfg: RunConfig, violations: &mut Vec<String>) -> Result<RunReport, String> {
    let mut e = engine(cfg);
    let total = e.world().images.len();
    let mut frozen: Option<BTreeSet<ImageId>> = None;
    let (mut last_imgs, mut last_anns) = (0, 0);
    let mut log = Vec::new();
    let report = e
        .run_with(|w, r, _| {
            let p = &w.pool;
            let tag = format!("seed {} iteration {}", w.config.seed, r.iteration);
            if frozen.get_or_insert_with(|| p.test.clone()) != &p.test {
                log.push(format!("{tag}: test set changed"));
            }
            let sum = p.unlabeled.len() + p.train.len() + p.test.len() + p.discarded.len();
            if sum != total {
                log.push(format!("{tag}: pool sizes sum to {sum}, world has {total}"));
            }
            if p.train.len() != r.cumulative_images {
                log.push(format!(
                    "{tag}: train {} vs cumulative {}",
                    p.train.len(),
                    r.cumulative_images
                ));
            }
            if r.cumulative_images < last_imgs || r.cumulative_annotations < last_anns {
                log.push(format!("{tag}: cumulative counts decreased"));
            }
            for id in &p.discarded {
                if w.image(*id).map(|i| &i.label_state) != Some(&LabelState::Reviewed { contains: false }) {
                    log.push(format!("{tag}: discarded {id} not a reviewed negative"));
                }
            }
            last_imgs = r.cumulative_images;
            last_anns = r.cumulative_annotations;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    violations.extend(log);
    Ok(report)
}

struct SeedOutcome {
    f_gain: f64,
    iou_gain: f64,
    fp: (usize, usize),
    active_final_f: f64,
    baseline_best_f: f64,
}

fn end_to_end(violations: &mut Vec<String>) -> Outcome {
    let start = Instant::now();
    let mut outs = Vec::new();
    for seed in 0..5 {
        let a = checked_run(desk(seed, RunMode::Active), violations)?;
        let b = checked_run(desk(seed, RunMode::RandomBaseline), violations)?;
        ensure(a.iterations.len() == 7 && b.iterations.len() == 7, || {
            format!(
                "seed {seed}: {} / {} iterations",
                a.iterations.len(),
                b.iterations.len()
            )
        })?;
        let first = &a.iterations[0].metrics;
        let last = &a.iterations[6].metrics;
        outs.push(SeedOutcome {
            f_gain: last.f_score - first.f_score,
            iou_gain: last.mean_iou - first.mean_iou,
            fp: (first.fp, last.fp),
            active_final_f: last.f_score,
            baseline_best_f: b.iterations.iter().map(|r| r.metrics.f_score).fold(0.0, f64::max),
        });
    }
    let t = within(Duration::from_secs(60), start)?;
    let a = outs.iter().filter(|o| o.f_gain >= 0.05).count();
    let b = outs.iter().filter(|o| o.iou_gain >= 0.05).count();
    let c = outs.iter().filter(|o| o.fp.1 < o.fp.0).count();
    let d = outs.iter().filter(|o| o.active_final_f >= o.baseline_best_f).count();
    let detail: Vec<String> = outs
        .iter()
        .enumerate()
        .map(|(s, o)| {
            format!(
                "s{s}: dF {:+.3} dIoU {:+.3} FP {}->{} F {:.3} vs {:.3}",
                o.f_gain, o.iou_gain, o.fp.0, o.fp.1, o.active_final_f, o.baseline_best_f
            )
        })
        .collect();
    let summary = format!(
        "(a) F gain {a}/5, (b) IoU gain {b}/5, (c) FP falls {c}/5, (d) beats baseline {d}/5; {t:.2?} [{}]",
        detail.join("; ")
    );
    ensure(a >= 4 && b >= 4 && c >= 4 && d >= 4, || summary.clone())?;
    Ok(summary)
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for mode in [RunMode::Active, RunMode::RandomBaseline] {
        let mut trees = Vec::new();
        for k in 0..2 {
            let dir = tmp.path().join(format!("{mode:?}-{k}"));
            let mut e = engine(desk(3, mode));
            run_into(&mut e, &dir).map_err(|e| e.to_string())?;
            trees.push(files(&dir));
        }
        ensure(!trees[0].is_empty(), || "empty run directory".into())?;
        ensure(trees[0].keys().eq(trees[1].keys()), || {
            format!("{mode:?}: file lists differ")
        })?;
        for (path, bytes) in &trees[0] {
            ensure(&trees[1][path] == bytes, || {
                format!("{mode:?}: {} differs", path.display())
            })?;
        }
        counts.push(trees[0].len());
    }
    Ok(format!(
        "active and baseline run dirs byte-identical across two runs ({} / {} files)",
        counts[0], counts[1]
    ))
}

fn bridge() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let open = |fault: &str| {
        let cmd = if fault.is_empty() {
            LOOPBACK.to_string()
        } else {
            format!("{LOOPBACK} --fault {fault}")
        };
        StdioTransport::spawn(&cmd).map_err(|e| e.to_string())
    };
    let report = check_adapter(open("")?, tmp.path()).map_err(|e| format!("loopback: {e}"))?;
    ensure(report.steps.len() == 3, || format!("steps {:?}", report.steps))?;
    let version = check_adapter(open("version")?, tmp.path());
    ensure(matches!(version, Err(BridgeError::VersionMismatch { .. })), || {
        format!("version fault gave {version:?}")
    })?;
    let schema = check_adapter(open("schema")?, tmp.path());
    ensure(matches!(schema, Err(BridgeError::Schema(_))), || {
        format!("schema fault gave {schema:?}")
    })?;
    let kind = check_adapter(open("kind")?, tmp.path());
    ensure(matches!(kind, Err(BridgeError::BadKind(_))), || {
        format!("kind fault gave {kind:?}")
    })?;
    let conf = check_adapter(open("confidence")?, tmp.path());
    ensure(matches!(conf, Err(BridgeError::Schema(_))), || {
        format!("confidence fault gave {conf:?}")
    })?;
    Ok(format!(
        "loopback conforms ({}); version fault -> VersionMismatch, schema and confidence faults -> Schema, kind fault -> BadKind",
        report.steps.join(", ")
    ))
}

// ---------------------------------------------------------------- gate

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let mut violations = Vec::new();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("metric-arithmetic", guarded(reference_rows)),
        ("geometry-oracles", guarded(geometry)),
        ("selection-invariants", guarded(selection)),
        ("tiling", guarded(tiling)),
        ("end-to-end", guarded(|| end_to_end(&mut violations))),
        ("determinism", guarded(determinism)),
        ("bridge-conformance", guarded(bridge)),
    ];
    let invariants = if violations.is_empty() {
        Ok("frozen test set, pool conservation and monotone counts held in all 10 end-to-end runs".into())
    } else {
        Err(violations.join("; "))
    };
    results.push(("engine-invariants", invariants));

    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  {name:<22} {d}"),
            Err(d) => println!("FAIL  {name:<22} {d}"),
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria passed", results.len(), results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
