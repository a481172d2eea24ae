#![allow(dead_code)]

fn ln_choose(n: u64, k: u64) -> f64 {
    let mut s = 0.0;
    let k = k.min(n - k);
    for i in 0..k {
        s += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    s
}

/// Exact central binomial interval: the smallest `lo` and `hi` with
/// P(X < lo) <= alpha/2 and P(X > hi) <= alpha/2.
pub fn binomial_interval(n: u64, p: f64, alpha: f64) -> (u64, u64) {
    let pmf: Vec<f64> = (0..=n)
        .map(|k| (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .collect();
    let mut lo = 0;
    let mut acc = 0.0;
    while acc + pmf[lo as usize] <= alpha / 2.0 {
        acc += pmf[lo as usize];
        lo += 1;
    }
    let mut hi = n;
    let mut acc = 0.0;
    while acc + pmf[hi as usize] <= alpha / 2.0 {
        acc += pmf[hi as usize];
        hi -= 1;
    }
    (lo, hi)
}

use alforge_core::corpus::generate_world;
use alforge_core::detector::SimulatedDetector;
use alforge_core::engine::{Engine, RunConfig};
use alforge_core::oracle::SyntheticAnnotator;

pub fn sim_engine(cfg: RunConfig) -> Engine<'static> {
    let world = generate_world(&cfg.world).unwrap();
    let det = SimulatedDetector::new(cfg.sim, cfg.seed);
    let ann = SyntheticAnnotator {
        cfg: cfg.oracle,
        seed: cfg.seed,
    };
    Engine::new(cfg, world, Box::new(det), Box::new(ann)).unwrap()
}
