use inftrace::attack::*;
use inftrace::data::*;
use inftrace::ihvp::*;
use inftrace::influence::*;
use inftrace::model::*;
use std::sync::Arc;
use std::time::Instant;
use rayon::prelude::*;

fn main() {
    let t_start = Instant::now();
    for (noise, n_test) in [(0.1, 300usize), (0.1, 500), (0.15, 500)] {
        let (train_set, _, test_set, lexicon) = synth_corpus(38, 2000, 100, n_test, noise).unwrap();
        let cfg = ModelConfig {
            mode: ModelMode::Mlp, vocab_size: train_set.vocab.len(),
            d: 8, h: 8, c: 2, unk_id: 0, seed: 1, lr: 2.0, epochs: 400, l2: 1e-3,
        };
        let baseline = train(&train_set, &cfg).unwrap();
        let bacc = accuracy(&test_set, &baseline.theta, &cfg).unwrap();
        let mut curv = ModelCurvature::new(&train_set, &baseline.theta, &cfg).unwrap();
        let solver = Arc::new(ExactSolver::prepare(&mut curv, 1e-3).unwrap());
        println!("noise {noise} n_test {n_test}: baseline {bacc:.3} [{:?}]", t_start.elapsed());
        let mut runs = Vec::new();
        for mode in [AttackMode::Down, AttackMode::Up, AttackMode::Combined] {
            for k in [1usize, 2, 4] {
                for seed in 0..3u64 {
                    runs.push((mode, k, seed));
                }
            }
        }
        let results: Vec<(AttackMode, usize, f64)> = runs.par_iter().map(|&(mode, k, seed)| {
            let acfg = AttackConfig {
                mode, per_test: k, restarts: 5, seed,
                retrain: ModelConfig { seed: 100 + seed, ..cfg.clone() },
            };
            let mut engine = InfluenceEngine::with_shared_solver(
                &train_set, &baseline.theta, &cfg, IhvpConfig::default(), Arc::clone(&solver)).unwrap();
            let (edited, _) = craft_attack(&train_set, &test_set, &acfg, &baseline, &lexicon, &mut engine).unwrap();
            let rep = evaluate_retrain(&edited, &test_set, &acfg.retrain, &baseline).unwrap();
            (mode, k, rep.accuracy)
        }).collect();
        for mode in [AttackMode::Down, AttackMode::Up, AttackMode::Combined] {
            print!("  {:8}", mode.as_str());
            for k in [1usize, 2, 4] {
                let accs: Vec<f64> = results.iter().filter(|(m, kk, _)| *m == mode && *kk == k).map(|(_, _, a)| *a).collect();
                print!("  k{k}:{:.4}", accs.iter().sum::<f64>() / accs.len() as f64);
            }
            println!();
        }
    }
    println!("total {:?}", t_start.elapsed());
}
