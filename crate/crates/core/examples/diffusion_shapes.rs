//! Trains the toy noise predictor on synthetic shapes and reports sample statistics.
//!
//! `cargo run --release -p sgguide --example diffusion_shapes -- [records] [steps] [base] [batch] [lr]`

use std::time::Instant;

use sgguide::datasets::{generate_shapes, ShapesConfig};
use sgguide::diffusion::{examples_from_records, train_diffusion, DdimSampler, DiffusionMeta, DiffusionTrainConfig, NoiseSchedule, UNet, UNetConfig};
use sgguide::pipeline::grid::render_grid;
use sgguide::pipeline::io::save_rgb_png;

fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v { i += 1; }
        while j < b.len() && b[j] <= v { j += 1; }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn binned_ks(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let hist = |v: &[f64]| {
        let mut h = vec![0f64; bins];
        for &x in v {
            h[((x * bins as f64) as usize).min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (mut ca, mut cb, mut d) = (0.0, 0.0, 0f64);
    for k in 0..bins {
        ca += ha[k];
        cb += hb[k];
        d = d.max((ca - cb).abs());
    }
    d
}

fn main() -> sgguide::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let count = arg(1, 500.0) as usize;
    let steps = arg(2, 500.0) as usize;
    let base = arg(3, 16.0) as usize;
    let batch = arg(4, 16.0) as usize;
    let lr = arg(5, 1e-3);
    let records = generate_shapes(&ShapesConfig::default(), count)?;
    let data = examples_from_records(&records, 32)?;
    let schedule = NoiseSchedule::default();
    let ckpt = std::env::var("CKPT").ok();
    let model = match ckpt.as_deref().filter(|p| std::path::Path::new(p).exists()) {
        Some(p) => UNet::load(p)?.0,
        None => {
            let model = UNet::new(UNetConfig { base_channels: base, ..UNetConfig::default() })?;
            println!("parameters: {}", model.params().num_parameters());
            let start = Instant::now();
            let losses = train_diffusion(&model, &data, &schedule, &DiffusionTrainConfig { steps, batch_size: batch, learning_rate: lr, ..DiffusionTrainConfig::default() })?;
            for (i, chunk) in losses.chunks(50.max(steps / 10)).enumerate() {
                println!("chunk {i}: mean loss {:.4}", chunk.iter().sum::<f64>() / chunk.len() as f64);
            }
            println!("train {:.1}s", start.elapsed().as_secs_f64());
            if let Some(p) = &ckpt {
                model.save(p, &DiffusionMeta::default())?;
            }
            model
        }
    };
    let sampler = DdimSampler::new(schedule, 100)?;
    let start = Instant::now();
    let mut gen = Vec::new();
    let mut imgs = Vec::new();
    for seed in 0..8 {
        let img = sampler.sample(&model, (3, 32, 32), seed, None, 1.0)?;
        gen.extend(img.iter().copied());
        imgs.push(img);
    }
    let caps: Vec<String> = (0..8).map(|i| format!("seed {i}")).collect();
    save_rgb_png(&render_grid(&imgs, &caps)?, "/tmp/diffusion_samples.png")?;
    println!("sample 8 in {:.1}s", start.elapsed().as_secs_f64());
    let real: Vec<f64> = data.iter().take(64).flat_map(|d| d.image.iter().copied().collect::<Vec<_>>()).collect();
    let hist = |v: &[f64]| {
        let mut h = [0usize; 10];
        for &x in v {
            h[((x * 10.0) as usize).min(9)] += 1;
        }
        h.iter().map(|&c| format!("{:.2}", c as f64 / v.len() as f64)).collect::<Vec<_>>().join(" ")
    };
    println!("gen  hist {}", hist(&gen));
    println!("real hist {}", hist(&real));
    println!("binned KS {:.3}", binned_ks(&gen, &real, 25));
    println!("KS {:.3}", ks(gen, real));
    Ok(())
}
