use std::time::Instant;

use pgseg::pipeline::{gen_synthetic, TrainConfig, Trainer};
use pgseg::ORGANS;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let data = gen_synthetic(7, 8, &ORGANS, 224).unwrap();
    let mut cfg = TrainConfig { epochs: 10_000, eval_every: 0, ..TrainConfig::default() };
    if let Some(lr) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        cfg.optimizer.lr = lr;
    }
    let mut t = Trainer::from_config(cfg).unwrap();
    let start = Instant::now();
    let mut done = 0;
    while done < steps {
        let chunk = 50.min(steps - done);
        done += chunk;
        t.config.max_steps = Some(done);
        t.fit(&data, &[], None).unwrap();
        let h = t.history.last().unwrap();
        println!(
            "step {done} loss {:.4} ce_lo {:.3} d_lo {:.3} ce_hi {:.3} d_hi {:.3} mDice {:.4} t={:.0}s",
            h.loss, h.ce_low, h.dice_low, h.ce_high, h.dice_high,
            t.mean_mdice(&data).unwrap(),
            start.elapsed().as_secs_f64()
        );
    }
}
