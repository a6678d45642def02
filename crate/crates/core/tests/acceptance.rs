//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The trained noise predictor is shared by the tests that need it and cached
//! under the cargo target tmpdir, so only the first run pays for training.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgguide::datasets::{generate_shapes, shapes_vocab, ShapesConfig};
use sgguide::diffusion::{
    examples_from_records, gaussian, q_sample, train_diffusion, DdimSampler, DiffusionMeta, DiffusionTrainConfig,
    FirstStageAE, NoiseSchedule, UNet, UNetConfig,
};
use sgguide::embeddings::{similarity, Embedder, ToyEmbedder};
use sgguide::guidance::{
    augmented_box_guidance, box_guidance, gauss_guidance, padding_noise, roi_weights, seg_guidance, text_guidance,
    GuidanceSpec, RoiContext,
};
use sgguide::pipeline::{ablate, AblationGrid, LayoutSource, Prepared, RunConfig, SamplerSettings, SceneSource, TermSet};
use sgguide::sg2seg::{
    compose_segmentation, samples_from_records, train, BBox, NodeFeatureMode, Palette, SegMap, Sg2SegConfig,
    Sg2SegModel, TrainConfig, MASK_SIZE,
};
use sgguide::shapes::Image;

/// Serialises the training-heavy tests so their wall-clock limits are not
/// measured under contention with each other.
fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) {
    // written to the raw handle so the line survives libtest's output capture
    let line = format!("criterion {criterion:2} {}: {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

const CLASSES: [&str; 4] = ["circle", "square", "triangle", "star"];

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    Array3::from_shape_simple_fn((3, 32, 32), || rng.random_range(0.05..0.95))
}

fn random_rois(rng: &mut ChaCha8Rng) -> RoiContext {
    let n = rng.random_range(1..=3);
    let boxes: Vec<BBox> = (0..n)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
            BBox::new(x0, y0, x0 + rng.random_range(0.15..0.4), y0 + rng.random_range(0.15..0.4)).unwrap()
        })
        .collect();
    let labels: Vec<&str> = (0..n).map(|_| CLASSES[rng.random_range(0..4)]).collect();
    RoiContext::new(&boxes, &labels, 32, 32).unwrap()
}

/// Worst relative error between `-gradient` and central differences of `f`,
/// along random directions and at random single pixels.
fn fd_error(rng: &mut ChaCha8Rng, x: &Image, gradient: &Image, f: &dyn Fn(&Image) -> f64) -> f64 {
    const H: f64 = 1e-3;
    let mut worst: f64 = 0.0;
    let mut check = |dir: &Image| {
        let fd = (f(&(x + &(dir * H))) - f(&(x - &(dir * H)))) / (2.0 * H);
        let analytic = -(gradient * dir).sum();
        let scale = fd.abs().max(analytic.abs());
        if scale > 1e-9 {
            worst = worst.max((fd - analytic).abs() / scale);
        }
    };
    for _ in 0..3 {
        let dir = Array3::from_shape_simple_fn(x.raw_dim(), || rng.random_range(-1.0..1.0));
        check(&dir);
    }
    for _ in 0..3 {
        let mut dir = Array3::zeros(x.raw_dim());
        dir[[rng.random_range(0..3), rng.random_range(0..32), rng.random_range(0..32)]] = 1.0;
        check(&dir);
    }
    worst
}

/// One to four boxes in distinct quadrants, so interiors never overlap.
fn quadrant_rois(rng: &mut ChaCha8Rng) -> RoiContext {
    let n = rng.random_range(1..=4);
    let boxes: Vec<BBox> = (0..n)
        .map(|q| {
            let (qx, qy) = ((q % 2) as f64 * 0.5, (q / 2) as f64 * 0.5);
            let (x0, y0) = (qx + rng.random_range(0.0..0.2), qy + rng.random_range(0.0..0.2));
            BBox::new(x0, y0, x0 + rng.random_range(0.15..0.28), y0 + rng.random_range(0.15..0.28)).unwrap()
        })
        .collect();
    let labels: Vec<&str> = (0..n).map(|_| CLASSES[rng.random_range(0..4)]).collect();
    RoiContext::new(&boxes, &labels, 32, 32).unwrap()
}

/// The point at which the gauss term is evaluated: every object's padding
/// noise on its own interior.
fn noise_point(rois: &RoiContext, seed: u64, step: usize) -> Image {
    let mut p = Array3::from_elem((3, 32, 32), 0.5);
    for k in 0..rois.rois().len() {
        let (r0, r1, c0, c1) = rois.interior(k);
        let noise = padding_noise((3, 32, 32), seed, step, k);
        p.slice_mut(s![.., r0..r1, c0..c1]).assign(&noise.slice(s![.., r0..r1, c0..c1]));
    }
    p
}

/// Gauss score as a function of the interior pixels, taken from `y`.
fn gauss_at(emb: &ToyEmbedder, rois: &RoiContext, seed: u64, step: usize, y: &Image) -> f64 {
    let mut score = 0.0;
    for (k, roi) in rois.rois().iter().enumerate() {
        let mut img = padding_noise((3, 32, 32), seed, step, k);
        let (r0, r1, c0, c1) = rois.interior(k);
        img.slice_mut(s![.., r0..r1, c0..c1]).assign(&y.slice(s![.., r0..r1, c0..c1]));
        let target = emb.embed_class(&roi.label).unwrap();
        score += roi.weight * similarity(&emb.embed_image(&img).unwrap(), &target).unwrap();
    }
    score
}

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let emb = ToyEmbedder::shapes();
    let ae = FirstStageAE::identity((3, 32, 32));
    let palette = Palette::for_classes(&CLASSES);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0f64; 5];
    let instances = 20;
    let seed = 7;
    for i in 0..instances {
        let x = random_image(&mut rng);
        let rois = quadrant_rois(&mut rng);
        let prompt = format!("a photo of a {}", CLASSES[i % 4]);
        let seg = SegMap::new(Array2::from_shape_fn((32, 32), |(r, c)| ((r / 8 + 3 * (c / 11) + i) % 5) as u32));
        let step = i;

        let target = emb.embed_text(&prompt).unwrap();
        let t = text_guidance(&emb, &x, &prompt).unwrap();
        worst[0] = worst[0].max(fd_error(&mut rng, &x, &t.gradient, &|y| {
            similarity(&emb.embed_image(y).unwrap(), &target).unwrap()
        }));

        let box_score = |y: &Image| box_guidance(&emb, y, &rois, seed, step).unwrap().total.score;
        let b = box_guidance(&emb, &x, &rois, seed, step).unwrap();
        worst[1] = worst[1].max(fd_error(&mut rng, &x, &b.total.gradient, &box_score));

        let p = noise_point(&rois, seed, step);
        let gauss = gauss_guidance(&emb, (3, 32, 32), &rois, seed, step).unwrap();
        worst[2] = worst[2].max(fd_error(&mut rng, &p, &gauss.gradient, &|y| gauss_at(&emb, &rois, seed, step, y)));

        // lambda box(x) + (1 - lambda) gauss(p + (x - x0)) has the augmented gradient at x0
        let lambda = 1.2;
        let aug = augmented_box_guidance(&emb, &x, &rois, lambda, seed, step).unwrap();
        let blended = |y: &Image| {
            let shifted = &p + &(y - &x);
            lambda * box_score(y) + (1.0 - lambda) * gauss_at(&emb, &rois, seed, step, &shifted)
        };
        worst[3] = worst[3].max(fd_error(&mut rng, &x, &aug.total.gradient, &blended));

        let sg = seg_guidance(&ae, &x, &seg, &palette).unwrap();
        worst[4] = worst[4].max(fd_error(&mut rng, &x, &sg.gradient, &|y| {
            seg_guidance(&ae, y, &seg, &palette).unwrap().score
        }));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w <= 1e-4) && secs < 120.0;
    verdict(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "{instances} instances per term; max rel err text {:.1e} box {:.1e} gauss {:.1e} augmented {:.1e} seg {:.1e}; {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

#[test]
fn criterion_02_lambda_one_reduction() {
    let emb = ToyEmbedder::shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for step in 0..10 {
        let x = random_image(&mut rng);
        let rois = random_rois(&mut rng);
        let plain = box_guidance(&emb, &x, &rois, 3, step).unwrap().total.gradient;
        let aug = augmented_box_guidance(&emb, &x, &rois, 1.0, 3, step).unwrap().total.gradient;
        worst = worst.max((&plain - &aug).iter().fold(0.0, |m, d| m.max(d.abs())));
    }
    verdict(2, "lambda = 1 reduction", worst <= 1e-12, &format!("10 instances, max abs diff {worst:e}"));
}

/// `(mantissa, exponent)` with `v = m * 2^e` exactly.
fn decompose(v: f64) -> (i128, i32) {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1 << 52) - 1)) as i128;
    assert!(exp > 0, "subnormal weight");
    (frac | (1 << 52), exp - 1075)
}

/// Whether `w` is the double nearest to `num / den` (exact integer arithmetic).
fn correctly_rounded(w: f64, num: i128, den: i128) -> bool {
    let (m, e) = decompose(w);
    assert!((-100..0).contains(&e));
    let shift = (-e) as u32;
    // |m 2^e - num/den| <= 2^e / 2  <=>  |2 m den - 2 num 2^-e| <= den
    (2 * m * den - 2 * num * (1i128 << shift)).abs() <= den
}

#[test]
fn criterion_03_weight_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let grid = 32;
    let mut ok = true;
    let mut sets = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let mut cells = Vec::new();
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let (x0, y0) = (rng.random_range(0..grid - 1), rng.random_range(0..grid - 1));
                let (x1, y1) = (rng.random_range(x0 + 1..=grid), rng.random_range(y0 + 1..=grid));
                cells.push(((x1 - x0) * (y1 - y0)) as i128);
                let g = grid as f64;
                BBox::new(x0 as f64 / g, y0 as f64 / g, x1 as f64 / g, y1 as f64 / g).unwrap()
            })
            .collect();
        let total: i128 = cells.iter().sum();
        let w = roi_weights(&boxes).unwrap();
        // each weight is the nearest double to area_k / total
        ok &= w.iter().zip(&cells).all(|(&wk, &a)| correctly_rounded(wk, a, total));
        // the exact rational sum of the weights is 1 up to their rounding
        let (mut num, mut shift) = (0i128, 0u32);
        for &wk in &w {
            let (m, e) = decompose(wk);
            let s = (-e) as u32;
            if s > shift {
                num <<= s - shift;
                shift = s;
            }
            num += m << (shift - s);
        }
        let one = 1i128 << shift;
        let max_err = w.iter().map(|&wk| 1i128 << (shift as i32 + decompose(wk).1) as u32).sum::<i128>() / 2;
        ok &= (num - one).abs() <= max_err;
        ok &= (w.iter().sum::<f64>() - 1.0).abs() <= n as f64 * f64::EPSILON;
        // ratios: w_i area_j == w_j area_i holds for the exact quotients they round
        for i in 0..n {
            for j in 0..n {
                let lhs = w[i] * cells[j] as f64;
                let rhs = w[j] * cells[i] as f64;
                ok &= (lhs - rhs).abs() <= 4.0 * f64::EPSILON * lhs.abs().max(rhs.abs());
            }
        }
        sets += 1;
    }
    verdict(
        3,
        "weight normalization",
        ok,
        &format!("{sets} grid-aligned ROI sets; every weight is the correctly rounded area share"),
    );
}

#[test]
fn criterion_04_forward_process() {
    let schedule = NoiseSchedule::default();
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for (i, t) in [1usize, 10, 50, 100, 250, 400, 600, 750, 900, 1000].into_iter().enumerate() {
        let x0v = -0.8 + 0.17 * i as f64;
        let x0 = Array3::from_elem((1, 1, draws), x0v);
        let noise = gaussian((1, 1, draws), 40 + i as u64);
        let xt = q_sample(&schedule, &x0, t, &noise).unwrap();
        let n = draws as f64;
        let mean = xt.sum() / n;
        let std = (xt.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        let (mu, sigma) = (schedule.alpha_bar(t).sqrt() * x0v, (1.0 - schedule.alpha_bar(t)).sqrt());
        // standard errors of the sample mean and standard deviation
        let z_mean = (mean - mu).abs() / (sigma / n.sqrt());
        let z_std = (std - sigma).abs() / (sigma / (2.0 * n).sqrt());
        worst = worst.max(z_mean).max(z_std);
    }
    verdict(
        4,
        "forward process",
        worst <= 3.0,
        &format!("10 timesteps x {draws} draws, worst deviation {worst:.2} sigma"),
    );
}

#[test]
fn criterion_05_sampler_determinism() {
    let model = UNet::new(UNetConfig {
        base_channels: 8,
        seed: 5,
        ..UNetConfig::default()
    })
    .unwrap();
    let sampler = DdimSampler::new(NoiseSchedule::default(), 100).unwrap();
    let shape = (3, 32, 32);
    let a = sampler.sample(&model, shape, 9, None, 1.0).unwrap();
    let b = sampler.sample(&model, shape, 9, None, 1.0).unwrap();
    let mut zero = |_: usize, _: usize, x: &Array3<f64>| Ok(Array3::zeros(x.raw_dim()));
    let c = sampler.sample(&model, shape, 9, Some(&mut zero), 1.0).unwrap();
    let d = sampler.sample(&model, shape, 10, None, 1.0).unwrap();
    let bits = |x: &Array3<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let pass = bits(&a) == bits(&b) && bits(&a) == bits(&c) && a != d;
    verdict(
        5,
        "sampler determinism",
        pass,
        "100-step runs: repeat is bitwise identical, zero guidance equals no guidance, new seed differs",
    );
}

#[test]
fn criterion_06_sg2seg_learning() {
    let _heavy = heavy();
    let start = Instant::now();
    let vocab = shapes_vocab();
    let emb = ToyEmbedder::shapes();
    let records = generate_shapes(&ShapesConfig::default(), 1000).unwrap();
    let samples = samples_from_records(&records, &vocab, &emb, NodeFeatureMode::Semantic).unwrap();
    let (train_set, test_set) = samples.split_at(800);
    let mut model = Sg2SegModel::new(Sg2SegConfig {
        input_dim: emb.profile().dimension,
        num_relations: vocab.relationship_classes().len(),
        ..Sg2SegConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 20,
        target_box_l1: Some(0.05),
        target_mask_iou: Some(0.7),
        ..TrainConfig::default()
    };
    let history = train(&mut model, train_set, test_set, &vocab, &config).unwrap();
    let last = history.last().unwrap();
    let iou = last.eval.mask_iou.unwrap_or(0.0);
    let secs = start.elapsed().as_secs_f64();
    let pass = last.eval.box_l1 < 0.05 && iou > 0.7 && history.len() <= 20 && secs < 900.0;
    verdict(
        6,
        "sg2seg learning",
        pass,
        &format!(
            "800/200 split, {} epochs: held-out box L1 {:.4}, mask IoU {:.3}; {secs:.0}s",
            history.len(),
            last.eval.box_l1,
            iou
        ),
    );
}

const EPOCHS_C7: usize = 10;

#[test]
fn criterion_07_semantic_vs_random_features() {
    let _heavy = heavy();
    let vocab = shapes_vocab();
    let emb = ToyEmbedder::shapes();
    let records = generate_shapes(&ShapesConfig::default(), 500).unwrap();
    let held_out_error = |mode: NodeFeatureMode, seed: u64| {
        let samples = samples_from_records(&records, &vocab, &emb, mode).unwrap();
        let (train_set, test_set) = samples.split_at(400);
        let mut model = Sg2SegModel::new(Sg2SegConfig {
            input_dim: emb.profile().dimension,
            num_relations: vocab.relationship_classes().len(),
            seed,
            ..Sg2SegConfig::default()
        })
        .unwrap();
        // the comparison is about boxes, so the mask branch is switched off, and
        // the box head is trained to convergence: class only shows in the sizes
        let config = TrainConfig {
            epochs: EPOCHS_C7,
            learning_rate: 1e-3,
            mask_weight: 0.0,
            seg_weight: 0.0,
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, train_set, test_set, &vocab, &config).unwrap().last().unwrap().eval.box_l1
    };
    let seeds = 0..5u64;
    let semantic: Vec<f64> = seeds.clone().map(|s| held_out_error(NodeFeatureMode::Semantic, s)).collect();
    let random: Vec<f64> = seeds.map(|s| held_out_error(NodeFeatureMode::Random { seed: 1000 + s }, s)).collect();
    let (ms, mr) = (semantic.iter().sum::<f64>() / 5.0, random.iter().sum::<f64>() / 5.0);
    verdict(
        7,
        "semantic vs random node features",
        ms <= mr,
        &format!("mean held-out box L1 over 5 seeds: semantic {ms:.4}, random {mr:.4}"),
    );
}

// --- trained noise predictor shared by criteria 8, 10 and the sample check ---

const DIFFUSION_RECORDS: usize = 500;
const DIFFUSION_BASE: usize = 16;
const DIFFUSION_STEPS: usize = 1000;

fn trained_checkpoint() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let train_cfg = DiffusionTrainConfig {
            steps: DIFFUSION_STEPS,
            ..DiffusionTrainConfig::default()
        };
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!(
            "acceptance-diffusion-r{DIFFUSION_RECORDS}-b{DIFFUSION_BASE}-s{}-lr{}-bs{}-ema{:?}.bin",
            train_cfg.steps, train_cfg.learning_rate, train_cfg.batch_size, train_cfg.ema_decay
        ));
        if UNet::load(&path).is_err() {
            let records = generate_shapes(&ShapesConfig::default(), DIFFUSION_RECORDS).unwrap();
            let data = examples_from_records(&records, 32).unwrap();
            let model = UNet::new(UNetConfig {
                base_channels: DIFFUSION_BASE,
                ..UNetConfig::default()
            })
            .unwrap();
            let meta = DiffusionMeta::default();
            let start = Instant::now();
            train_diffusion(&model, &data, &meta.schedule().unwrap(), &train_cfg).unwrap();
            println!("trained the shared noise predictor in {:.0}s", start.elapsed().as_secs_f64());
            model.save(&path, &meta).unwrap();
        }
        path
    })
}

fn run_config(index: usize, seed: u64, guidance: GuidanceSpec) -> RunConfig {
    RunConfig {
        scene: SceneSource::Shapes {
            generator: ShapesConfig::default(),
            index,
        },
        layout: LayoutSource::GroundTruth,
        sg2seg_checkpoint: None,
        diffusion_checkpoint: trained_checkpoint().to_owned(),
        output_dir: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run"),
        guidance,
        sampler: SamplerSettings { steps: 100, seed },
        prompt: None,
        embedder: Default::default(),
    }
}

/// Guidance scale used for the efficacy comparison.
const EFFICACY_ALPHA: f64 = 1.0;

#[test]
fn criterion_08_guidance_efficacy() {
    let _heavy = heavy();
    trained_checkpoint();
    let start = Instant::now();
    let spec = GuidanceSpec {
        alpha: EFFICACY_ALPHA,
        ..GuidanceSpec::default()
    };
    let n = 20;
    let mut wins = 0;
    let (mut sum_g, mut sum_u) = (0.0, 0.0);
    for seed in 0..n {
        let prepared = Prepared::new(&run_config(seed as usize, seed, spec.clone())).unwrap();
        let guided = prepared.sample(&spec, seed).unwrap();
        let plain = prepared.sample(&GuidanceSpec::disabled(), seed).unwrap();
        let sim = |img: &Image| {
            sgguide::pipeline::mean_roi_similarity(prepared.embedder.as_ref(), img, &prepared.rois).unwrap()
        };
        let (g, u) = (sim(&guided.image), sim(&plain.image));
        sum_g += g;
        sum_u += u;
        if g > u {
            wins += 1;
        }
    }
    // one-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2)
    let p = sign_test_p(wins, n as u32);
    let secs = start.elapsed().as_secs_f64();
    let (mg, mu) = (sum_g / n as f64, sum_u / n as f64);
    verdict(
        8,
        "guidance efficacy",
        mg > mu && p < 0.05 && secs < 600.0,
        &format!("{n} seeds: mean ROI similarity guided {mg:.4} vs unguided {mu:.4}, {wins}/{n} wins, sign test p = {p:.2e}; {secs:.0}s"),
    );
}

fn sign_test_p(wins: u32, n: u32) -> f64 {
    let choose = |n: u32, k: u32| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

#[test]
fn criterion_09_composition_oracle() {
    let records = generate_shapes(&ShapesConfig::default(), 1000).unwrap();
    let mut exact = 0;
    for r in &records {
        let masks = r.masks.as_ref().unwrap();
        let seg = compose_segmentation(&r.boxes, masks, r.graph.classes(), MASK_SIZE, MASK_SIZE).unwrap();
        if Some(&seg) == r.seg.as_ref() {
            exact += 1;
        }
    }
    verdict(
        9,
        "composition oracle",
        exact == records.len(),
        &format!("{exact}/{} non-overlapping scenes reproduced exactly", records.len()),
    );
}

#[test]
fn criterion_10_pipeline_ablation() {
    let _heavy = heavy();
    let mut config = run_config(1, 0, GuidanceSpec::default());
    config.sampler.steps = 25;
    let grid = AblationGrid {
        lambdas: vec![1.0, 1.2],
        term_sets: vec![TermSet::ALL],
    };
    let rows = ablate(&config, &grid, &[0, 1]).unwrap();
    let table = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ablation.csv");
    sgguide::pipeline::write_ablation_csv(&rows, &table).unwrap();
    let equivalence = rows[0].lambda == 1.0 && rows[0].vanilla_equivalent == Some(true);
    let differs = rows[1].lambda == 1.2
        && (rows[1].mean_roi_similarity != rows[0].mean_roi_similarity
            || rows[1].box_adherence != rows[0].box_adherence);
    verdict(
        10,
        "pipeline ablation",
        rows.len() == 2 && equivalence && differs,
        &format!(
            "lambda 1.0: similarity {:.5}, matches vanilla box {:?}; lambda 1.2: similarity {:.5}",
            rows[0].mean_roi_similarity, rows[0].vanilla_equivalent, rows[1].mean_roi_similarity
        ),
    );
}

/// Kolmogorov-Smirnov distance between two samples' histograms over `bins`
/// equal bins of `[0, 1]`, with the background level at a bin centre.
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

#[test]
fn training_moves_samples_toward_the_pixel_histogram() {
    let _heavy = heavy();
    let (trained, meta) = UNet::load(trained_checkpoint()).unwrap();
    let untrained = UNet::new(UNetConfig {
        base_channels: DIFFUSION_BASE,
        ..UNetConfig::default()
    })
    .unwrap();
    let sampler = DdimSampler::new(meta.schedule().unwrap(), 100).unwrap();
    let draw = |model: &UNet| {
        let mut pixels = Vec::new();
        for seed in 0..16 {
            pixels.extend(sampler.sample(model, (3, 32, 32), 5000 + seed, None, 1.0).unwrap());
        }
        pixels
    };
    let records = generate_shapes(&ShapesConfig::default(), 64).unwrap();
    let real: Vec<f64> = examples_from_records(&records, 32)
        .unwrap()
        .into_iter()
        .flat_map(|e| e.image.into_iter())
        .collect();
    let ks_trained = binned_ks(&draw(&trained), &real, 25);
    let ks_untrained = binned_ks(&draw(&untrained), &real, 25);
    println!("sample check: 25-bin KS trained {ks_trained:.3}, untrained {ks_untrained:.3}");
    assert!(ks_trained < ks_untrained, "trained {ks_trained} vs untrained {ks_untrained}");
}
