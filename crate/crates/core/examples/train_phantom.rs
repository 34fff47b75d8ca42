//! Trains an autoencoder on the default phantom and reports reconstruction error.
//!
//! `cargo run --release --example train_phantom -- [epochs] [base_channels] [batch] [lr] [model_out] [output_basis]`

use std::time::Instant;

use gesta_core::autoencoder::{rms_vertex_error, save_model, train, TrainingConfig};
use gesta_core::phantom::{generate, PhantomSpec};
use gesta_core::Tractogram;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let data = generate(&PhantomSpec::default()).expect("phantom");
    let cfg = TrainingConfig {
        epochs: arg(0, 40.0) as usize,
        base_channels: arg(1, 8.0) as usize,
        batch_size: arg(2, 64.0) as usize,
        learning_rate: arg(3, 2e-3),
        output_basis: arg(5, 8.0) as usize,
        ..TrainingConfig::default()
    };
    let (train_set, held_out): (Vec<_>, Vec<_>) = data
        .tractogram
        .streamlines
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| i % 10 != 0);
    let train_set = Tractogram::new(train_set.into_iter().map(|(_, s)| s).collect());
    let held_out: Vec<_> = held_out.into_iter().map(|(_, s)| s).collect();

    let start = Instant::now();
    let (model, report) = train(&train_set, &cfg).expect("training");
    let elapsed = start.elapsed().as_secs_f64();
    for r in &report.history {
        println!(
            "{:>3} train {:.3e} val {:.3e}",
            r.epoch, r.train_loss, r.validation_loss
        );
    }
    let rec = model.reconstruct(&held_out).expect("reconstruct");
    println!(
        "{} epochs in {elapsed:.1}s ({:.2}s/epoch), held-out rms {:.3} mm",
        report.history.len(),
        elapsed / report.history.len() as f64,
        rms_vertex_error(&held_out, &rec)
    );
    let mut winding: Vec<f64> = rec.iter().map(|s| s.winding()).collect();
    winding.sort_by(f64::total_cmp);
    let q = |p: f64| winding[((winding.len() - 1) as f64 * p) as usize].round();
    let pass = rec.iter().filter(|s| s.winding() < 330.0).count();
    println!(
        "winding quartiles {} {} {} {} {}, below 330: {pass}/{}",
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0),
        rec.len()
    );
    if let Some(path) = args.get(4) {
        save_model(&model, path).expect("save");
    }
}
