use metermask::data::{normalize, split, synthesize_dataset};
use metermask::trainer::{train, TrainerConfig};
use std::time::Instant;

fn main() {
    let mut ds = synthesize_dataset(400, 1).unwrap();
    split(&mut ds, 1);
    normalize(&mut ds).unwrap();
    let cfg = TrainerConfig {
        batch_size: 32,
        iterations: 30,
        seed: 7,
        lambda: 1.0,
        early_stop_patience: None,
        ..TrainerConfig::default()
    }
    .scale_cells(1, 2);
    let t0 = Instant::now();
    let sys = train(&ds, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "30 iterations in {:.2}s -> {:.1} ms/iter; 1500 iters ~ {:.1} min",
        dt,
        dt / 30.0 * 1000.0,
        dt / 30.0 * 1500.0 / 60.0
    );
    let last = sys.history.last().unwrap();
    println!("L_U={:.4} L_A={:.4} L_R={:.4} H={:.4}", last.utility_loss, last.adversary_loss, last.releaser_loss, last.entropy_sum);
}
