// Arm-by-arm probe: which loss components help at desk scale?
use dualseg::core::HybridLossConfig;
use dualseg::phantom::{make_dataset, PhantomConfig};
use dualseg::trainer::{self, TrainConfig};
use std::time::Instant;

fn run(name: &str, dataset: &dualseg::core::DatasetSplit, cfg: &TrainConfig) {
    let t0 = Instant::now();
    let outcome = trainer::train(cfg, dataset, None).unwrap();
    let (n1, n2) = outcome.best_networks().unwrap();
    let rows = trainer::evaluate_split(&n1, &n2, &dataset.test, &cfg.locator, 99).unwrap();
    let dsc: f64 = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
    println!(
        "{name}: val {:.3}@{} test {:.4}  ({:.0}s)",
        outcome.best_val_dsc, outcome.best_step, dsc, t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(800);
    let arm: String = args.get(2).cloned().unwrap_or_else(|| "all".into());
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let dataset = make_dataset(&PhantomConfig::desk_hard(), 4, 16, 2, 8, 1000 + seed).unwrap();
    let mut base = TrainConfig::desk();
    base.steps = steps;
    base.loss.t_max = (steps as f64 * 0.4) as u64;
    base.seed_net1 = 10 + seed;
    base.seed_net2 = 20 + seed;
    base.seed_heads = 30 + seed;
    base.seed_data = 40 + seed;

    let arms: Vec<(&str, TrainConfig)> = vec![
        ("sup      ", {
            let mut c = base.clone();
            c.loss = HybridLossConfig { t_max: c.loss.t_max, ..HybridLossConfig::supervised_only() };
            c
        }),
        ("hybrid   ", base.clone()),
        ("voxel    ", {
            let mut c = base.clone();
            c.loss.beta = 0.0;
            c.loss.gamma = 0.0;
            c
        }),
        ("context  ", {
            let mut c = base.clone();
            c.loss.alpha = 0.0;
            c
        }),
        ("slow-ramp", {
            let mut c = base.clone();
            c.loss.t_max = steps;
            c
        }),
        ("voxel-d03", {
            let mut c = base.clone();
            c.loss.beta = 0.0;
            c.loss.gamma = 0.0;
            c.network.dropout_rate = 0.3;
            c
        }),
    ];
    for (name, cfg) in arms {
        if arm == "all" || arm.trim() == name.trim() {
            run(name, &dataset, &cfg);
        }
    }
}
