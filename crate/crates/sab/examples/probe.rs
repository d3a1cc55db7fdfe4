use sab::metrics::record_attention;
use sab::tasks::{BatchSource, CopyingConfig, CopyingSource};
use sab::train::{Mode, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args.get(1).map(|s| s.as_str()) {
        Some("tbptt") => Mode::Tbptt,
        _ => Mode::Sab,
    };
    let t_gap: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let batches: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(400);
    let k_trunc: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
    let k_top: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1);
    let update_every: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(k_trunc);
    let cfg = TrainConfig {
        mode,
        k_trunc,
        k_top: if mode == Mode::Sab { k_top } else { 0 },
        k_att: 2,
        n_input: 10,
        n_hidden: 128,
        n_out: 9,
        batch_size: 64,
        seed,
        update_every,
        ..TrainConfig::defaults(mode)
    };
    let src = CopyingSource {
        config: CopyingConfig { t_gap },
        seed,
        batch_size: 64,
        batches_per_epoch: 100,
    };
    let eval: Vec<_> = (0..2).map(|k| src.batch(u64::MAX, k)).collect();
    let mut trainer = Trainer::new(cfg).unwrap();
    let t0 = std::time::Instant::now();
    for k in 0..batches {
        let loss = trainer.train_batch(&src.batch(k / 100, k % 100)).unwrap();
        if k % 50 == 0 || k == batches - 1 {
            let m = trainer.evaluate(&eval, Some(10)).unwrap();
            let snap = record_attention(&trainer, &eval[0], k);
            let answer_rows = t_gap + 10..t_gap + 20;
            let mut mass_first = 0.0;
            let mut mass_total = 0.0;
            for (i, row) in snap.matrix.iter().enumerate() {
                if answer_rows.contains(&i) {
                    for (j, &v) in row.iter().enumerate() {
                        mass_total += v;
                        if snap.micro_timesteps[j] <= 10 {
                            mass_first += v;
                        }
                    }
                }
            }
            let frac = if mass_total > 0.0 {
                100.0 * mass_first / mass_total
            } else {
                0.0
            };
            let max_w = snap
                .matrix
                .iter()
                .flatten()
                .cloned()
                .fold(0.0f64, f64::max);
            let pnorm = |name: &str| {
                let id = trainer.params.lookup(name).unwrap();
                trainer
                    .params
                    .get(id)
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            };
            println!(
                "{:?} batch {k:4} updates {:5} ({:6.1}s): train {loss:.4} valid {:.4} acc {:.1}% last10 {:.1}% attn@first10 {frac:.1}% maxw {max_w:.2} |w1| {:.3} |V1| {:.2} |V2| {:.2}",
                mode,
                trainer.counters.updates,
                t0.elapsed().as_secs_f64(),
                m.loss,
                m.accuracy.unwrap(),
                m.acc_last.unwrap(),
                pnorm("attn.score_state"),
                pnorm("head.w_state"),
                pnorm("head.w_attn"),
            );
        }
    }
}
