//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array3;
use petseg::guidance::{render_clicks, V4_BALANCED_PROBS};
use petseg::inference::{assemble_input, normalize_case, suv_threshold, TtaPlan};
use petseg::model::{dice_loss_nosmooth, dice_loss_nosmooth_grad};
use petseg::nn::{zero_grads, Sgd, Tensor};
use petseg::phantom::plan_dataset;
use petseg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const HALF_MAX_TOL: f64 = 1e-4;
const GUIDANCE_MAP_MAX_SECONDS: f64 = 1.0;
const CURRICULUM_DRAWS: usize = 100_000;
const CURRICULUM_FREQ_TOL: f64 = 0.01;
const CHI_SQUARE_MIN_P: f64 = 0.01;
const METRIC_PAIRS: usize = 10_000;
const METRIC_TOL: f64 = 1e-12;
const EXPANSION_TOL: f32 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const OVERFIT_STEPS: usize = 20;
const E2E_MAX_TRAIN_SECONDS: f64 = 3.0 * 3600.0;
const E2E_MIN_DICE_RHO: f64 = 0.9;
const E2E_MAX_FNV_RHO: f64 = -0.8;
const E2E_MIN_NEGATIVE_FRACTION: f64 = 0.10;
const CLASSIFIER_MIN_ACCURACY: f64 = 0.95;

/// Published V4 click-count weights for k = 0..10.
const PUBLISHED_V4: [f64; 11] = [0.10, 0.10, 0.10, 0.08, 0.04, 0.04, 0.04, 0.04, 0.08, 0.08, 0.30];

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn guidance_rendering() -> Outcome {
    let sigma = 4.0;
    let half = sigma * (2.0 * 2f64.ln()).sqrt();
    // x spacing equal to the half-maximum distance puts a voxel exactly there
    let grid = ImageGrid::with_shape_spacing([9, 9, 9], [3.0, 3.0, half]).unwrap();
    let cfg = GuidanceConfig { sigma_mm: sigma, truncation_radius_sigmas: 3.0 };
    let mut clicks = ClickList::new(grid);
    clicks.push(ClickKind::Foreground, [4, 4, 4]).unwrap();
    let map = render_clicks(&clicks, ClickKind::Foreground, &cfg).unwrap();
    let peak = map.values()[[4, 4, 4]];
    let at_half = map.values()[[4, 4, 5]] as f64;
    let empty = render_clicks(&ClickList::new(grid), ClickKind::Foreground, &cfg).unwrap();
    let all_zero = empty.values().iter().all(|&v| v == 0.0);

    let big = ImageGrid::with_shape_spacing([64; 3], [3.0; 3]).unwrap();
    let mut many = ClickList::new(big);
    for i in 0..10 {
        many.push(ClickKind::Foreground, [6 * i + 3, 5 * i + 7, 60 - 5 * i]).unwrap();
    }
    let start = Instant::now();
    let _ = render_clicks(&many, ClickKind::Foreground, &GuidanceConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        peak == 1.0 && (at_half - 0.5).abs() <= HALF_MAX_TOL && all_zero && secs < GUIDANCE_MAP_MAX_SECONDS,
        format!("peak={peak} value@half-max={at_half:.7} zero-clicks-all-zero={all_zero} 64^3 map {secs:.3}s"),
    )
}

fn curriculum_fidelity() -> Outcome {
    let d = SamplingDistribution::preset(CurriculumPreset::V4Balanced);
    let exact = d.probs == PUBLISHED_V4 && V4_BALANCED_PROBS == PUBLISHED_V4;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 11];
    for _ in 0..CURRICULUM_DRAWS {
        counts[d.sample(&mut rng)] += 1;
    }
    let n = CURRICULUM_DRAWS as f64;
    let max_dev = counts.iter().zip(PUBLISHED_V4).map(|(&c, p)| (c as f64 / n - p).abs()).fold(0.0, f64::max);
    let chi2: f64 = counts
        .iter()
        .zip(PUBLISHED_V4)
        .map(|(&c, p)| {
            let e = p * n;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(10.0).unwrap().cdf(chi2);
    outcome(
        exact && max_dev <= CURRICULUM_FREQ_TOL && p_value > CHI_SQUARE_MIN_P,
        format!("preset==published {exact}, max |freq-p|={max_dev:.4}, chi2={chi2:.2} p={p_value:.3}"),
    )
}

/// Flood-fill component labelling with 26-neighbourhood, written independently of the library.
fn oracle_components(m: &Array3<bool>) -> Vec<Vec<[usize; 3]>> {
    let (d, h, w) = m.dim();
    let mut seen = Array3::from_elem((d, h, w), false);
    let mut comps = Vec::new();
    for (idx, &v) in m.indexed_iter() {
        let start = [idx.0, idx.1, idx.2];
        if !v || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = q.pop_front() {
            comp.push(p);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                        if n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= d as i64 || n[1] >= h as i64 || n[2] >= w as i64 {
                            continue;
                        }
                        let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                        if m[n] && !seen[n] {
                            seen[n] = true;
                            q.push_back(n);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn oracle_missed_volume(a: &Array3<bool>, b: &Array3<bool>, voxel_ml: f64) -> f64 {
    oracle_components(a)
        .iter()
        .filter(|c| c.iter().all(|&p| !b[p]))
        .map(|c| c.len() as f64 * voxel_ml)
        .sum()
}

fn oracle_dice(p: &Array3<bool>, g: &Array3<bool>) -> f64 {
    let inter = p.iter().zip(g).filter(|(&a, &b)| a && b).count() as f64;
    let total = (p.iter().filter(|&&v| v).count() + g.iter().filter(|&&v| v).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

fn metric_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut swap_ok = true;
    for _ in 0..METRIC_PAIRS {
        let shape = [rng.gen_range(4..=8), rng.gen_range(4..=8), rng.gen_range(4..=8)];
        let spacing = [rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0)];
        let grid = ImageGrid::with_shape_spacing(shape, spacing).unwrap();
        let density = rng.gen_range(0.05..0.6);
        let p = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || rng.gen_bool(density));
        let g = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || rng.gen_bool(density));
        let ml = grid.voxel_volume_ml();
        let c = Connectivity::TwentySix;
        let d = dice(p.view(), g.view()).unwrap();
        let fpv = false_positive_volume(p.view(), g.view(), &grid, c).unwrap();
        let fnv = false_negative_volume(p.view(), g.view(), &grid, c).unwrap();
        worst = worst
            .max((d - oracle_dice(&p, &g)).abs())
            .max((fpv - oracle_missed_volume(&p, &g, ml)).abs())
            .max((fnv - oracle_missed_volume(&g, &p, ml)).abs());
        let fpv_s = false_positive_volume(g.view(), p.view(), &grid, c).unwrap();
        let fnv_s = false_negative_volume(g.view(), p.view(), &grid, c).unwrap();
        swap_ok &= fpv_s == fnv && fnv_s == fpv;
    }
    outcome(
        worst <= METRIC_TOL && swap_ok,
        format!("{METRIC_PAIRS} pairs, max |lib-oracle|={worst:e}, FPV<->FNV swap exact={swap_ok}"),
    )
}

fn post_processing() -> Outcome {
    let thresholds_ok = suv_threshold(Tracer::Fdg) == 1.5 && suv_threshold(Tracer::Psma) == 1.0;
    let grid = ImageGrid::with_shape_spacing([12, 12, 12], [2.0; 3]).unwrap();
    let mut mask = Array3::from_elem((12, 12, 12), false);
    let mut pet = Array3::from_elem((12, 12, 12), 0.5f32);
    // component A peaks at SUV 1.2, component B at 2.0; both have a dim rim at 0.9
    for z in 1..4 {
        for y in 1..4 {
            for x in 1..4 {
                mask[[z, y, x]] = true;
                pet[[z, y, x]] = 0.9;
                mask[[z + 6, y + 6, x + 6]] = true;
                pet[[z + 6, y + 6, x + 6]] = 0.9;
            }
        }
    }
    pet[[2, 2, 2]] = 1.2;
    pet[[8, 8, 8]] = 2.0;
    let mask_v = LabelVolume::from_mask(grid, &mask).unwrap();
    let pet_v = ScalarVolume::new(grid, pet, Modality::PetSuv).unwrap();
    let comp_a = |m: &Array3<bool>| m[[2, 2, 2]];
    let comp_b = |m: &Array3<bool>| m[[8, 8, 8]];
    let mut ok = thresholds_ok;
    let mut notes = Vec::new();
    for (tracer, expect_a) in [(Tracer::Fdg, false), (Tracer::Psma, true)] {
        let t = suv_threshold(tracer);
        let once = suv_threshold_postprocess(&mask_v, &pet_v, t, PostprocessMode::ComponentMax, Connectivity::TwentySix)
            .unwrap();
        let twice = suv_threshold_postprocess(&once, &pet_v, t, PostprocessMode::ComponentMax, Connectivity::TwentySix)
            .unwrap();
        let m = once.mask();
        // surviving components stay whole
        let whole = |hit: bool, off: usize| {
            (1..4).all(|z| (1..4).all(|y| (1..4).all(|x| m[[z + off, y + off, x + off]] == hit)))
        };
        let good = comp_a(&m) == expect_a && comp_b(&m) && whole(expect_a, 0) && whole(true, 6) && twice == once;
        ok &= good;
        notes.push(format!("{tracer}: A kept={} B kept={} idempotent={}", comp_a(&m), comp_b(&m), twice == once));
    }
    outcome(ok, format!("thresholds FDG 1.5/PSMA 1.0 {thresholds_ok}; {}", notes.join("; ")))
}

fn tiny_net(in_channels: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        in_channels,
        n_stages: 2,
        features_per_stage: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        patch_size: [8, 8, 8],
        seed,
        ..NetworkConfig::default()
    }
}

fn random_case(shape: [usize; 3], seed: u64) -> CaseData {
    let spec = PhantomSpec {
        grid: ImageGrid::with_shape_spacing(shape, [10.0; 3]).unwrap(),
        n_lesions: 1,
        lesion_radius_mm: (10.0, 14.0),
        seed,
        ..PhantomSpec::default()
    };
    generate_phantom(&spec).unwrap().into_case_data("tta")
}

fn tta_budget() -> Outcome {
    // the budget formula: largest m in 0..=3 with base * 2^m <= 40
    let oracle = |base: f64| (0..=3u32).filter(|&m| base * 2f64.powi(m as i32) <= 40.0).max();
    let mut ok = true;
    let mut notes = Vec::new();
    for (base, expect) in [(4.0, 3usize), (15.0, 1), (45.0, 0)] {
        let plan = plan_tta(base, 40.0).unwrap();
        let o = oracle(base);
        let flag_ok = plan.over_budget == o.is_none();
        ok &= plan.mirror_axes.len() == expect && o.unwrap_or(0) as usize == expect && flag_ok;
        notes.push(format!("plan_tta({base})={} axes over_budget={}", plan.mirror_axes.len(), plan.over_budget));
    }
    let case = random_case([16, 16, 16], 5);
    let fp = fingerprint_cases(std::slice::from_ref(&case)).unwrap();
    let net = build_network(&tiny_net(4, 3)).unwrap();
    let mut clicks = ClickList::new(*case.grid());
    clicks.push(ClickKind::Foreground, [8, 8, 8]).unwrap();
    let input = assemble_input(&normalize_case(&case, &fp).unwrap(), &clicks, &GuidanceConfig::default()).unwrap();
    let plain = sliding_window_predict(&net, &input, [8, 8, 8], 0.5).unwrap();
    let tta = tta_predict(&net, &input, &TtaPlan::fixed(vec![]), [8, 8, 8], 0.5).unwrap();
    let bit_equal = plain.iter().zip(tta.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= bit_equal;
    outcome(ok, format!("{}; m=0 bit-matches plain={bit_equal}", notes.join(", ")))
}

fn channel_expansion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretrained.safetensors");
    SegNet::pretraining_source(&tiny_net(1, 21)).unwrap().save(&path).unwrap();
    let net = SegNet::load_for(&path, &tiny_net(4, 99)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 8 * 8 * 8;
    let image: Vec<f32> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut with_zero = image.clone();
    with_zero.extend(std::iter::repeat(0.0).take(2 * n));
    let base = net.forward_lesion(&Tensor::from_vec([1, 4, 8, 8, 8], with_zero));
    let mut worst = 0.0f32;
    for trial in 0..5 {
        let mut x = image.clone();
        x.extend((0..2 * n).map(|_| rng.gen_range(-5.0..5.0) * (trial + 1) as f32));
        let out = net.forward_lesion(&Tensor::from_vec([1, 4, 8, 8, 8], x));
        worst = out.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    outcome(worst < EXPANSION_TOL, format!("max |out(guidance) - out(zero guidance)| = {worst:e} over 5 draws"))
}

fn loss_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 64;
    // probabilities on a 2^-12 lattice so that p +- h is exact in f32
    let probs: Vec<f32> = (0..n).map(|_| rng.gen_range(256..3840) as f32 / 4096.0).collect();
    let target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let grad = dice_loss_nosmooth_grad(&probs, &target).unwrap();
    let h = 1.0 / 1024.0;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut up = probs.clone();
        up[i] += h;
        let mut dn = probs.clone();
        dn[i] -= h;
        let fd = (dice_loss_nosmooth(&up, &target).unwrap() - dice_loss_nosmooth(&dn, &target).unwrap()) / (2.0 * h as f64);
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1e-12));
    }

    let mut cfg = tiny_net(4, 13);
    cfg.organ_head = true;
    let mut net = build_network(&cfg).unwrap();
    let x = Tensor::from_vec([2, 4, 8, 8, 8], (0..2 * 4 * 512).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let lesion: Vec<u16> = (0..2 * 512).map(|i| u16::from((i / 8) % 8 >= 3 && i % 8 >= 4)).collect();
    let organ: Vec<u16> = (0..2 * 512).map(|i| ((i / 64) % 3) as u16).collect();
    let opt = Sgd { lr: 0.01, momentum: 0.0, nesterov: false, weight_decay: 0.0 };
    let mut losses = Vec::new();
    for _ in 0..OVERFIT_STEPS {
        zero_grads(&mut net);
        let out = net.forward_train(&x);
        let loss = dice_ce_loss(&out, &lesion, Some(&organ), &LossWeights::default()).unwrap();
        losses.push(loss.terms.total);
        net.backward(&loss.grad_lesion, loss.grad_organ.as_ref());
        opt.step(&mut net);
    }
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    outcome(
        worst <= GRAD_REL_TOL && decreasing,
        format!(
            "max rel grad err={worst:.2e}; overfit loss {:.4} -> {:.4} strictly decreasing={decreasing}",
            losses[0],
            losses[OVERFIT_STEPS - 1]
        ),
    )
}

fn end_to_end() -> Outcome {
    let cfg = DeskExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let r = run_desk_experiment(&cfg, Some(dir.path())).unwrap();
    println!("{}", r.sweep.to_csv().trim_end());
    let neg_frac = r.negative_controls as f64 / (r.n_train + r.n_val) as f64;
    let both = r.train_tracers.iter().all(|&c| c > 0) && r.val_tracers.iter().all(|&c| c > 0);
    let dice_rho = r.dice_rho.unwrap_or(f64::NAN);
    let fnv_rho = r.fnv_rho.unwrap_or(f64::NAN);
    let ok = r.n_train == 40
        && r.n_val == 10
        && both
        && neg_frac >= E2E_MIN_NEGATIVE_FRACTION
        && r.train_seconds <= E2E_MAX_TRAIN_SECONDS
        && dice_rho > E2E_MIN_DICE_RHO
        && fnv_rho < E2E_MAX_FNV_RHO;
    let first = &r.sweep.rows[0].metrics;
    let last = &r.sweep.rows[10].metrics;
    outcome(
        ok,
        format!(
            "{}/{} split, tracers train {:?} val {:?}, negatives {:.0}%, train {:.0}s CPU; dice {:.3}->{:.3} rho={dice_rho:.3}; FNV {:.3}->{:.3} ml rho={fnv_rho:.3}",
            r.n_train,
            r.n_val,
            r.train_tracers,
            r.val_tracers,
            100.0 * neg_frac,
            r.train_seconds,
            first.dice,
            last.dice,
            first.fnv_ml,
            last.fnv_ml
        ),
    )
}

fn classifier() -> Outcome {
    let data = DatasetConfig { n_cases: 40, tracer_mix: 0.5, seed: 31, ..DatasetConfig::default() };
    let plans = plan_dataset(&data).unwrap();
    let samples: Vec<ClassifierSample> = plans
        .iter()
        .map(|p| {
            let c = generate_phantom(&p.spec).unwrap();
            ClassifierSample::new(&MipPair::from_pet(&c.pet), c.tracer)
        })
        .collect();
    let (train, held) = samples.split_at(20);
    let (clf, report) = train_classifier(train, held, &ClassifierConfig { seed: 31, ..ClassifierConfig::default() }).unwrap();
    let acc = report.held_out_accuracy.unwrap();
    let direct = clf.accuracy(held).unwrap();
    let fdg_held = held.iter().filter(|s| s.label == Tracer::Fdg).count();
    outcome(
        acc >= CLASSIFIER_MIN_ACCURACY && direct == acc,
        format!("held-out accuracy {acc:.3} on 20 phantoms ({fdg_held} FDG / {} PSMA)", 20 - fdg_held),
    )
}

fn hybrid_dispatch() -> Outcome {
    let mut registry = ModelRegistry::new();
    for id in ["V2", "V3", "V4"] {
        registry.register_net(id, build_network(&tiny_net(4, 1)).unwrap(), vec![Tracer::Fdg, Tracer::Psma]).unwrap();
    }
    let policy = HybridPolicy::default();
    let mut ok = true;
    for k in 0..=10 {
        for tracer in [Tracer::Fdg, Tracer::Psma] {
            let expect = match (tracer, k) {
                (Tracer::Psma, _) => "V2",
                (Tracer::Fdg, 0..=4) => "V4",
                (Tracer::Fdg, _) => "V3",
            };
            ok &= select_model(tracer, k, &policy, &registry).unwrap() == expect;
        }
    }
    ok &= select_model(Tracer::Fdg, 11, &policy, &registry).is_err();
    outcome(ok, "22 (tracer, k) pairs for k in 0..=10; k=11 rejected")
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("guidance rendering", guidance_rendering),
        ("curriculum fidelity", curriculum_fidelity),
        ("metric oracle equivalence", metric_oracle_equivalence),
        ("post-processing", post_processing),
        ("TTA budget", tta_budget),
        ("channel expansion", channel_expansion),
        ("loss", loss_checks),
        ("end-to-end desk experiment", end_to_end),
        ("classifier", classifier),
        ("hybrid dispatch", hybrid_dispatch),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let o = f();
        let tag = if o.ok { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.ok);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
