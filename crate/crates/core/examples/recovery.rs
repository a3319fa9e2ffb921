//! Synthetic recovery run: train on the demo scene from its perturbed point
//! cloud and report held-out PSNR/SSIM.
//!
//! `cargo run --example recovery -- [iterations] [seed] [config.toml]`

use std::time::Instant;

use cellsplat::camera::CameraView;
use cellsplat::gaussian::bounding_radius;
use cellsplat::synth::demo_small;
use cellsplat::train::{evaluate_field, init_field_from_points, TrainConfig, Trainer};
use nalgebra::Vector3;

fn main() -> cellsplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let demo = demo_small(seed)?;
    let train: Vec<CameraView> = demo
        .scene
        .cameras
        .iter()
        .filter(|c| demo.split.train.contains(&c.image_id))
        .cloned()
        .collect();
    let test: Vec<&CameraView> = demo
        .scene
        .cameras
        .iter()
        .filter(|c| demo.split.test.contains(&c.image_id))
        .collect();
    let mut config = match args.get(3) {
        Some(path) => TrainConfig::load(std::path::Path::new(path))?,
        None => TrainConfig::desk(),
    };
    config.iterations = iterations;
    let points: Vec<_> = demo.scene.points.iter().map(|p| (p.position, p.rgb())).collect();
    let centers: Vec<Vector3<f64>> = train.iter().map(|c| c.center()).collect();
    let mut field = init_field_from_points(&points, config.sh_degree, bounding_radius(&centers))?;
    if std::env::var_os("FROM_TRUTH").is_some() {
        // sanity check: start at the ground truth
        field.splats = demo.truth.splats.clone();
        for s in &mut field.splats {
            s.sh.resize(cellsplat::gaussian::sh_coeff_count(config.sh_degree), Vector3::zeros());
        }
    }
    let mut trainer = Trainer::new(field, train, config, seed)?;
    let start = Instant::now();
    while trainer.iteration < trainer.config.iterations {
        if std::env::var_os("SHOW_STATS").is_some() && (trainer.iteration + 1) % trainer.config.densify.interval == 0 {
            let mut m: Vec<f64> = (0..trainer.stats.len()).map(|i| trainer.stats.mean(i)).collect();
            m.sort_by(f64::total_cmp);
            let q = |f: f64| m[((m.len() - 1) as f64 * f) as usize];
            println!("  view-gradient mean quantiles 10/50/90/max: {:.2e} {:.2e} {:.2e} {:.2e}", q(0.1), q(0.5), q(0.9), q(1.0));
        }
        trainer.step()?;
        let r = trainer.history.last().unwrap();
        if r.iteration % 200 == 0 {
            println!(
                "it {:5} L {:.5} Lc {:.5} Ld {:.2e} Ln {:.2e} splats {} ({:.1}s)",
                r.iteration,
                r.loss.total,
                r.loss.color,
                r.loss.depth,
                r.loss.normal,
                r.splats,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let scores = evaluate_field(&trainer.field, &test, Vector3::zeros())?;
    for s in &scores {
        println!("view {:3} PSNR {:6.2} SSIM {:.4}", s.image_id, s.psnr, s.ssim);
    }
    let n = scores.len() as f64;
    println!(
        "mean PSNR {:.2} SSIM {:.4} splats {} events {:?}",
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        trainer.field.len(),
        trainer.events.iter().map(|e| (e.iteration, e.before, e.after)).collect::<Vec<_>>()
    );
    Ok(())
}
