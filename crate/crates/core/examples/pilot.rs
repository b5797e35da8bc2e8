//! Runs the toy experiment for a few seeds and prints per-seed scores.
//! Usage: pilot [n_per_class] [epochs] [channels] [seeds] [batch] [lr] [n_eval]

use std::time::Instant;

use synattr::experiment::{experiment_datasets, run_experiment, ExperimentConfig};
use synattr::pipeline::{ensemble_probs, threshold_decision, Dataset};
use synattr::nn::ModelParams;

fn breakdown(name: &str, models: &[ModelParams], ds: &Dataset, tau: Option<f64>) {
    let probs = ensemble_probs(models, &ds.specs()).unwrap();
    let mut per: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for (p, e) in probs.iter().zip(&ds.examples) {
        let pred = match tau {
            Some(t) => threshold_decision(p, t).unwrap(),
            None => p.argmax(),
        };
        let split = e.id.split("_c").next().unwrap().to_string();
        for key in [split, format!("class{}", e.class())] {
            let g = per.entry(key).or_default();
            g.0 += (pred == e.class()) as usize;
            g.1 += 1;
        }
    }
    let parts: Vec<String> = per.iter().map(|(k, (h, n))| format!("{k}={:.2}", *h as f64 / *n as f64)).collect();
    println!("  {name}: {}", parts.join(" "));
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_per_class = arg(1, "60").parse().unwrap();
    cfg.train.epochs = arg(2, "15").parse().unwrap();
    cfg.channels = arg(3, "8,16,32,64").split(',').map(|c| c.parse().unwrap()).collect();
    let seeds: u64 = arg(4, "1").parse().unwrap();
    cfg.train.batch_size = arg(5, "16").parse().unwrap();
    cfg.train.learning_rate = arg(6, "0.003").parse().unwrap();
    cfg.corpus.n_eval_per_class = arg(7, "30").parse().unwrap();
    for seed in 0..seeds {
        let t = Instant::now();
        let out = run_experiment(&cfg, seed).unwrap();
        print!("{}", out.summary());
        println!("elapsed={:.1}s", t.elapsed().as_secs_f64());
        let [_, e1, e2] = experiment_datasets(&cfg, seed).unwrap();
        for ds in [&e1, &e2] {
            breakdown("six", &out.cv.models, ds, None);
            breakdown("base", &out.baseline_cv.models, ds, Some(out.baseline_tau_eval1));
        }
        println!();
    }
}
