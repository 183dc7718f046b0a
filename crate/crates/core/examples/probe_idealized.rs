// Scratch probe: anchor-vs-extra bump scales and the algorithm ordering.
use ndarray::array;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use varlab_core::landscape::*;
use varlab_core::model::DataDistribution;
use varlab_core::optim::*;
use varlab_core::rng::{derive_seed, rng_from_seed};

fn make_pop(seed: u64, rho: f64, ah: (f64, f64), aw: (f64, f64), eh: (f64, f64), ew: (f64, f64)) -> Population {
    let mut rng = rng_from_seed(seed);
    let mut pos = |m: f64, s: f64| -> f64 {
        let n = Normal::new(m, s).unwrap();
        loop { let x = n.sample(&mut rng); if x > 0.0 { return x; } }
    };
    let mut cands = Vec::new();
    for _ in 0..30 {
        let loc = EXTRA_LOCATIONS[rng.random_range(0..8)];
        let orient = if rng.random::<f64>() < rho { Orientation::Peak } else { Orientation::Well };
        let anchor = GaussianBump::new(ANCHOR_CENTER, pos(ah.0, ah.1), pos(aw.0, aw.1), Orientation::Well).unwrap();
        let extra = GaussianBump::new(loc, pos(eh.0, eh.1), pos(ew.0, ew.1), orient).unwrap();
        cands.push(CandidateFunction::new(anchor, extra).unwrap());
    }
    Population::from_candidates(cands, rho, seed)
}

fn trial(pop: &Population, master: u64) -> (f64, f64, f64) {
    let schedule = LrSchedule::per_iteration(0.4, 0.99);
    let iters = 200;
    let mut work = Vec::new();
    for set in 0..10u64 { for ix in 0..10u64 { for iy in 0..10u64 { work.push((set, ix, iy)); } } }
    let results: Vec<[f64; 3]> = work.par_iter().map(|&(set, ix, iy)| {
        let ds = sample_training_set(pop, derive_seed(master, &[2, set]));
        let theta0 = array![8.0 * (ix as f64 + 0.5) / 10.0, 8.0 * (iy as f64 + 0.5) / 10.0];
        let gd = run(&ds, &OptimizerConfig::gd(schedule, iters), &theta0).unwrap();
        let sgd_cfg = OptimizerConfig::sgd(schedule, iters, 1, derive_seed(master, &[3, set, ix, iy]));
        let sgd = run(&ds, &sgd_cfg, &theta0).unwrap();
        let sigma = calibrate_noise_std(&ds, schedule, &theta0, 10, 1).unwrap();
        let ng_cfg = OptimizerConfig::noisy_gd(schedule, iters, sigma, derive_seed(master, &[4, set, ix, iy]));
        let ng = run(&ds, &ng_cfg, &theta0).unwrap();
        let loss = |t: &Trajectory| pop.population_loss(t.final_iterate());
        [loss(&gd), loss(&sgd), loss(&ng)]
    }).collect();
    let n = results.len() as f64;
    let mean = |k: usize| results.iter().map(|r| r[k]).sum::<f64>() / n;
    (mean(0), mean(1), mean(2))
}

fn main() {
    let cases: Vec<(&str, (f64, f64), (f64, f64), (f64, f64), (f64, f64))> = vec![
        ("anchor 3/1.0, extra 8/1.3", (3.0, 0.5), (1.0, 0.2), (8.0, 2.0), (1.3, 0.2)),
        ("anchor 2/1.0, extra 8/1.3", (2.0, 0.5), (1.0, 0.2), (8.0, 2.0), (1.3, 0.2)),
        ("anchor 3/1.0, extra 8/1.6", (3.0, 0.5), (1.0, 0.2), (8.0, 2.0), (1.6, 0.2)),
        ("anchor 2/0.8, extra 8/1.6", (2.0, 0.5), (0.8, 0.15), (8.0, 2.0), (1.6, 0.2)),
    ];
    for (name, ah, aw, eh, ew) in cases {
        println!("--- {name}");
        for master in [20250810u64, 7, 999] {
            let pop = make_pop(derive_seed(master, &[1]), 0.35, ah, aw, eh, ew);
            let (g, s, n) = trial(&pop, master);
            let ok = s < n && n < g && s < 0.6 * g;
            println!("  seed {master:>9}: GD {g:7.3}  SGD {s:7.3}  NoisyGD {n:7.3}  ok={ok}");
        }
    }
}
