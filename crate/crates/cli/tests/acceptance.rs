//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any attainable criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use image::{Rgb, RgbImage};
use oass::aomix::{aomix, AoMixConfig};
use oass::fusion::{majority_thing_class, run_oafusion, vote_amodal_class, BranchOutputs};
use oass::io;
use oass::labels::{InstanceAnnotation, PanopticMap, SemanticMap, Taxonomy, IGNORE_LABEL};
use oass::mask::BinaryMask;
use oass::metrics::{
    amodal_panoptic_quality, average_precision, bruteforce_match_oracle, evaluate_oass, match_segments,
    panoptic_quality, MaskSelector, OassReport,
};
use oass::nn::{
    clamp_offset, dpe_embed, dpe_offsets, grad_check, grad_check_fault_injected, patch_embed, DpeParams, GradBlock,
    Params, PatchGeometry, Tensor,
};
use oass::selftrain::{confidence_weight, ema_update_in_place, target_loss, ProbTensor};
use oass::synth::{synth_dataset, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Cannot be met on this host; reported as FAIL without failing the run.
    Unattainable(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn oass_bin() -> &'static str {
    env!("CARGO_BIN_EXE_oass")
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let tax = Taxonomy::oass18();
    let spec = SynthSpec {
        seed: 1,
        perturbation: 3,
        ..Default::default()
    };
    let scenes = synth_dataset(&spec, 1000, &tax).map_err(e2s)?;
    let mut max_dev = 0.0f64;
    let mut pairs = 0usize;
    for s in &scenes {
        for sel in [MaskSelector::Visible, MaskSelector::Amodal] {
            let (p, g) = match sel {
                MaskSelector::Visible => (&s.pred.instances, &s.gt.instances),
                MaskSelector::Amodal => (&s.pred.amodal_instances, &s.gt.amodal_instances),
            };
            let greedy = match_segments(p, g, sel).map_err(e2s)?;
            let brute = bruteforce_match_oracle(p, g, sel).map_err(e2s)?;
            ensure(greedy == brute, || format!("{}: matching differs ({sel:?})", s.id))?;
            pairs += greedy.pairs.len();
        }
        let cert = s.certificate.as_ref().ok_or("missing certificate")?;
        let pq = panoptic_quality(&s.pred.panoptic, &s.gt.panoptic).map_err(e2s)?;
        let apq = amodal_panoptic_quality(&s.pred.amodal_panoptic, &s.gt.amodal_panoptic).map_err(e2s)?;
        for (name, got, want) in [
            ("PQ", &pq.per_class, &cert.per_class.pq),
            ("APQ", &apq.per_class, &cert.per_class.apq),
        ] {
            ensure(got.keys().eq(want.keys()), || {
                format!("{}: {name} class sets differ", s.id)
            })?;
            for (c, v) in got {
                max_dev = max_dev.max((v - want[c]).abs());
            }
        }
        max_dev = max_dev
            .max((pq.mean - cert.mpq).abs())
            .max((apq.mean - cert.mapq).abs());
    }
    ensure(max_dev <= 1e-12, || format!("max PQ/APQ deviation {max_dev:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 scenes, {pairs} matched pairs, max deviation {max_dev:e}, {secs:.1}s"
    ))
}

fn criterion_2() -> Check {
    let tax = Taxonomy::oass18();
    let spec = SynthSpec {
        seed: 2,
        certificate: false,
        ..Default::default()
    };
    let scenes = synth_dataset(&spec, 100, &tax).map_err(e2s)?;
    let mut fused = Vec::new();
    let mut gts = Vec::new();
    for s in &scenes {
        let b = BranchOutputs {
            semantic: s.gt.semantic.clone(),
            instances: s.gt.instances.clone(),
            amodal_instances: s.gt.amodal_instances.clone(),
        };
        fused.push((s.id.clone(), run_oafusion(&b, 0.95, &tax).map_err(e2s)?));
        gts.push((s.id.clone(), s.gt.clone()));
    }
    let r = evaluate_oass(&fused, &gts).map_err(e2s)?;
    for (name, v) in r.headline() {
        ensure(v == 1.0, || format!("{name} = {v}"))?;
    }
    Ok("100 scenes, all five metrics exactly 1.0".into())
}

fn column_strip(len: u32, lo: u32, hi: u32) -> BinaryMask {
    BinaryMask::from_fn(1, len, |_, c| c >= lo && c < hi)
}

fn criterion_3() -> Check {
    // 1x100 strip: gt on 0..75, detection on 0..100 gives IoU 0.75;
    // detection on 0..49 against gt 0..100 gives 0.49.
    let ap_for = |gt: (u32, u32), det: (u32, u32)| -> Result<f64, String> {
        let g = InstanceAnnotation::unoccluded(13, 1.0, column_strip(100, gt.0, gt.1)).map_err(e2s)?;
        let d = InstanceAnnotation::unoccluded(13, 0.9, column_strip(100, det.0, det.1)).map_err(e2s)?;
        Ok(average_precision(&[d], &[g], MaskSelector::Visible).map_err(e2s)?.mean)
    };
    let a = ap_for((0, 75), (0, 100))?;
    let b = ap_for((0, 100), (0, 49))?;
    ensure(a == 0.6, || format!("IoU 0.75 gave AP {a}"))?;
    ensure(b == 0.0, || format!("IoU 0.49 gave AP {b}"))?;
    Ok("IoU 0.75 -> 0.6, IoU 0.49 -> 0".into())
}

fn criterion_4() -> Check {
    // Pedestrian with amodal extent over columns 2..12 of a 6x16 image;
    // a car covers columns 5..16, hiding 70% of the pedestrian.
    let tax = Taxonomy::oass18();
    let ped = tax.class_by_name("pedestrians").ok_or("no pedestrians class")?;
    let car = tax.class_by_name("car").ok_or("no car class")?;
    let road = tax.class_by_name("road").ok_or("no road class")?;
    let (h, w) = (6u32, 16u32);
    let labels = (0..h * w)
        .map(|i| match i % w {
            2..=4 => ped as u8,
            5..=15 => car as u8,
            _ => road as u8,
        })
        .collect();
    let sem = SemanticMap::new(h, w, tax.num_classes(), labels).map_err(e2s)?;
    let ped_amodal = BinaryMask::from_fn(h, w, |_, c| (2..12).contains(&c));
    let car_mask = BinaryMask::from_fn(h, w, |_, c| c >= 5);
    let whole = majority_thing_class(&ped_amodal, &sem, &tax).map_err(e2s)?;
    let amodal = vote_amodal_class(&ped_amodal, &[&car_mask], &sem, &tax).map_err(e2s)?;
    ensure(whole == Some(car), || format!("whole-mask vote gave {whole:?}"))?;
    ensure(amodal == Some(ped), || format!("amodal vote gave {amodal:?}"))?;
    Ok("whole-mask vote -> car, amodal vote -> pedestrians".into())
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut weakest_fault = f64::INFINITY;
    for block in GradBlock::ALL {
        for seed in 0..3 {
            let r = grad_check(block, seed, 1e-5).map_err(e2s)?;
            ensure(r.input_shape.iter().product::<usize>() <= 8 * 8 * 4, || {
                format!("{block}: shape {:?}", r.input_shape)
            })?;
            ensure(r.max_rel_error < 1e-5, || {
                format!("{block} seed {seed}: {:e}", r.max_rel_error)
            })?;
            worst = worst.max(r.max_rel_error);
            let f = grad_check_fault_injected(block, seed, 1e-5).map_err(e2s)?;
            ensure(f.max_rel_error > 1e-2, || {
                format!("{block} seed {seed}: fault not detected")
            })?;
            weakest_fault = weakest_fault.min(f.max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel error {worst:.2e}, smallest fault error {weakest_fault:.2e}, {secs:.1}s"
    ))
}

fn criterion_6() -> Check {
    let probs = ProbTensor::new(2, 2, 2, vec![0.99, 0.01, 0.97, 0.03, 0.5, 0.5, 0.8, 0.2]).map_err(e2s)?;
    let omega = confidence_weight(&probs, 0.968).map_err(e2s)?;
    ensure(omega == 0.5, || format!("omega {omega}"))?;

    let student = ProbTensor::new(1, 1, 2, vec![0.5, 0.5]).map_err(e2s)?;
    let pseudo = SemanticMap::new(1, 1, 2, vec![0]).map_err(e2s)?;
    let loss = target_loss(&student, &pseudo, 1.0, None).map_err(e2s)?;
    ensure((loss - std::f64::consts::LN_2).abs() < 1e-12, || format!("loss {loss}"))?;

    let eta = 0.999f64;
    let student = [1.0, -2.0, 0.25];
    let initial = [0.0, 3.0, -4.0];
    let mut teacher = initial;
    for _ in 0..100 {
        ema_update_in_place(&mut teacher, &student, eta).map_err(e2s)?;
    }
    let mut worst = 0.0f64;
    for i in 0..3 {
        let expected = eta.powi(100) * (initial[i] - student[i]);
        worst = worst.max(((teacher[i] - student[i]) - expected).abs());
    }
    ensure(worst < 1e-12, || format!("EMA gap deviation {worst:e}"))?;
    Ok(format!("omega 0.5, loss ln 2, EMA gap deviation {worst:.1e}"))
}

fn random_rect<R: Rng>(h: u32, w: u32, rng: &mut R) -> BinaryMask {
    let (r0, c0) = (rng.gen_range(0..h - 2), rng.gen_range(0..w - 2));
    let (r1, c1) = (rng.gen_range(r0 + 1..=h), rng.gen_range(c0 + 1..=w));
    BinaryMask::from_fn(h, w, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
}

fn random_image<R: Rng>(h: u32, w: u32, rng: &mut R) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen_range(1..=255), rng.gen(), rng.gen()]))
}

fn criterion_7() -> Check {
    let (h, w) = (24u32, 40u32);
    for run in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let source = random_image(h, w, &mut rng);
        let target = random_image(h, w, &mut rng);
        let n_classes = rng.gen_range(1..=8u8);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| ((i / w) / 3 + (i % w) / 7) as u8 % n_classes)
            .collect();
        let labels = SemanticMap::new(h, w, 18, labels).map_err(e2s)?;
        let amodal: Vec<BinaryMask> = (0..rng.gen_range(1..4)).map(|_| random_rect(h, w, &mut rng)).collect();
        let cfg = AoMixConfig {
            seed: run,
            ..Default::default()
        };
        let out = aomix(&source, &labels, &amodal, &amodal, &target, &cfg).map_err(e2s)?;
        let again = aomix(&source, &labels, &amodal, &amodal, &target, &cfg).map_err(e2s)?;
        ensure(out == again, || format!("run {run}: not reproducible"))?;

        let ms = BinaryMask::union_all(h, w, &amodal).map_err(e2s)?;
        let inside = out.random_mask.intersection(&ms).map_err(e2s)?;
        ensure(out.random_mask.dims() == (h, w), || format!("run {run}: M_r dims"))?;
        let mix = &out.mix;
        for r in 0..h {
            for c in 0..w {
                let src = source.get_pixel(c, r);
                let masked = mix.masked_source.get_pixel(c, r);
                if inside.get(r, c) {
                    ensure(masked.0 == cfg.fill, || format!("run {run}: ({r},{c}) not filled"))?;
                } else {
                    ensure(masked == src, || {
                        format!("run {run}: ({r},{c}) changed outside M_r and M_s")
                    })?;
                }
                let i = (r * w + c) as usize;
                let label = labels.labels()[i];
                let chosen = mix.selected_classes.contains(&label);
                ensure(mix.provenance[i] == chosen, || {
                    format!("run {run}: provenance at ({r},{c})")
                })?;
                let want = if chosen { masked } else { target.get_pixel(c, r) };
                ensure(mix.mixed_image.get_pixel(c, r) == want, || {
                    format!("run {run}: mixed pixel ({r},{c})")
                })?;
                let want_label = if chosen { label } else { IGNORE_LABEL };
                ensure(mix.mixed_label.labels()[i] == want_label, || {
                    format!("run {run}: mixed label ({r},{c})")
                })?;
            }
        }
        let k = labels.classes_present().len();
        ensure(mix.selected_classes.len() == k.div_ceil(2), || {
            format!("run {run}: {} of {k} classes", mix.selected_classes.len())
        })?;
    }
    Ok("500 seeded runs".into())
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, r) = (16usize, 32usize, 4.0);
    for _ in 0..10_000 {
        let raw = (rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let (dy, dx) = clamp_offset(raw, h, w, r);
        ensure((-4.0..=4.0).contains(&dy) && (-8.0..=8.0).contains(&dx), || {
            format!("{raw:?} -> ({dy}, {dx})")
        })?;
    }
    // Same bound through the layer, with a predictor large enough to saturate.
    let geom = PatchGeometry::new(3, 2, 1).map_err(e2s)?;
    let x = Tensor::random(vec![h, w, 3], 1.0, &mut rng).map_err(e2s)?;
    let mut p = DpeParams::new(3, 8, geom, r, &mut rng).map_err(e2s)?;
    let zero_out = dpe_embed(&x, &p).map_err(e2s)?;
    let plain = patch_embed(&x, &p.proj, &p.geometry).map_err(e2s)?;
    let dev = zero_out
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(dev <= 1e-12, || format!("zero-offset deviation {dev:e}"))?;
    p.offset
        .visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = rng.gen_range(-50.0..50.0)));
    let offs = dpe_offsets(&x, &p).map_err(e2s)?;
    for o in offs.data().chunks(2) {
        ensure(o[0].abs() <= 4.0 && o[1].abs() <= 8.0, || format!("layer offset {o:?}"))?;
    }
    Ok(format!("10000 raw offsets clamped, zero-offset deviation {dev:.1e}"))
}

fn random_instances<R: Rng>(h: u32, w: u32, rng: &mut R) -> Vec<InstanceAnnotation> {
    (0..rng.gen_range(0..5))
        .map(|_| {
            let amodal = random_rect(h, w, rng);
            let cut = random_rect(h, w, rng);
            let visible = amodal.difference(&cut).unwrap();
            InstanceAnnotation::new(rng.gen_range(11..18), rng.gen_range(0.0..=1.0), visible, amodal).unwrap()
        })
        .collect()
}

fn random_probs<R: Rng>(h: u32, w: u32, c: u32, rng: &mut R) -> ProbTensor {
    let mut v = Vec::new();
    for _ in 0..h * w {
        let raw: Vec<f32> = (0..c).map(|_| rng.gen_range(0.0..1.0f32) + 1e-3).collect();
        let s: f32 = raw.iter().sum();
        v.extend(raw.iter().map(|x| x / s));
    }
    ProbTensor::new(h, w, c, v).unwrap()
}

fn expect_cli_failure(args: &[&str]) -> Result<(), String> {
    let out = Command::new(oass_bin()).args(args).output().map_err(e2s)?;
    ensure(out.status.code() == Some(1), || {
        format!(
            "{args:?} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn criterion_9() -> Check {
    let tax = Taxonomy::oass18();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..200 {
        let (h, w) = (rng.gen_range(1..40u32), rng.gen_range(1..40u32));
        let sem = SemanticMap::new(
            h,
            w,
            18,
            (0..h * w)
                .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..18) })
                .collect(),
        )
        .map_err(e2s)?;
        let p = d.join("s.png");
        io::save_semantic(&p, &sem).map_err(e2s)?;
        ensure(io::load_semantic(&p, 18).map_err(e2s)? == sem, || {
            format!("semantic fixture {i}")
        })?;

        let ids: Vec<u32> = (0..h * w)
            .map(|_| match rng.gen_range(0..3) {
                0 => 0,
                1 => rng.gen_range(0..11) * 1000 + 999,
                _ => rng.gen_range(11..18) * 1000 + rng.gen_range(0..1000),
            })
            .collect();
        let pan = PanopticMap::from_ids(h, w, ids, &tax).map_err(e2s)?;
        let p = d.join("p.png");
        io::save_panoptic(&p, &pan).map_err(e2s)?;
        ensure(io::load_panoptic(&p, &tax).map_err(e2s)? == pan, || {
            format!("panoptic fixture {i}")
        })?;

        let (ih, iw) = (h.max(3), w.max(3));
        let inst = random_instances(ih, iw, &mut rng);
        let p = d.join("i.json");
        io::save_instances(&p, (ih, iw), &inst).map_err(e2s)?;
        ensure(io::load_instances(&p).map_err(e2s)? == ((ih, iw), inst), || {
            format!("instance fixture {i}")
        })?;

        let probs = random_probs(h, w, rng.gen_range(1..6), &mut rng);
        let p = d.join("f.bin");
        io::save_probs(&p, &probs).map_err(e2s)?;
        let back = io::load_probs(&p).map_err(e2s)?;
        ensure(
            back.values()
                .iter()
                .map(|v| v.to_bits())
                .eq(probs.values().iter().map(|v| v.to_bits())),
            || format!("probability fixture {i}"),
        )?;
    }

    // Malformed inputs through the CLI.
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let bad_magic = d.join("bad.bin");
    std::fs::write(&bad_magic, b"NOTPROB\0\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\x80\x3f").map_err(e2s)?;
    expect_cli_failure(&["pseudolabel", "--probs", &s(&bad_magic)])?;
    let good = io::probs_to_bytes(&random_probs(2, 2, 2, &mut rng));
    let truncated = d.join("trunc.bin");
    std::fs::write(&truncated, &good[..good.len() - 2]).map_err(e2s)?;
    expect_cli_failure(&["pseudolabel", "--probs", &s(&truncated)])?;
    let rgb = d.join("rgb.png");
    io::save_rgb(&rgb, &RgbImage::new(4, 4)).map_err(e2s)?;
    expect_cli_failure(&["render", "--semantic", &s(&rgb), "--out", &s(&d.join("o.png"))])?;
    let bad_json = d.join("bad.json");
    std::fs::write(
        &bad_json,
        r#"{"height":2,"width":2,"instances":[{"category":13,"score":1.0,"visible":[0,4],"amodal":[4]}]}"#,
    )
    .map_err(e2s)?;
    ensure(io::load_instances(&bad_json).is_err(), || {
        "visible outside amodal accepted".into()
    })?;
    let branches = d.join("branches");
    std::fs::create_dir(&branches).map_err(e2s)?;
    io::save_semantic(
        &branches.join("a_semantic.png"),
        &SemanticMap::filled(2, 2, 18, 0).map_err(e2s)?,
    )
    .map_err(e2s)?;
    std::fs::copy(&bad_json, branches.join("a_instances.json")).map_err(e2s)?;
    std::fs::copy(&bad_json, branches.join("a_amodal.json")).map_err(e2s)?;
    expect_cli_failure(&["fuse", "--input", &s(&branches), "--out", &s(&d.join("fused"))])?;
    Ok("200 fixtures x 4 formats bit-exact, 4 malformed files rejected with exit 1".into())
}

fn report_bits(r: &OassReport) -> String {
    serde_json::to_string(r).expect("report serializes")
}

fn criterion_10() -> Verdict {
    let run = || -> Result<(f64, f64, bool), String> {
        let tax = Taxonomy::oass18();
        let spec = SynthSpec {
            height: 400,
            width: 2048,
            min_objects: 6,
            max_objects: 12,
            perturbation: 4,
            seed: 10,
            certificate: false,
            ..Default::default()
        };
        let scenes = synth_dataset(&spec, 100, &tax).map_err(e2s)?;
        let (preds, gts): (Vec<_>, Vec<_>) = scenes
            .into_iter()
            .map(|s| ((s.id.clone(), s.pred), (s.id, s.gt)))
            .unzip();
        let timed = |threads: usize| -> Result<(f64, OassReport), String> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(e2s)?;
            let t = Instant::now();
            let r = pool.install(|| evaluate_oass(&preds, &gts)).map_err(e2s)?;
            Ok((t.elapsed().as_secs_f64(), r))
        };
        let (t1, r1) = timed(1)?;
        let (t8, r8) = timed(8)?;
        Ok((t1, t8, report_bits(&r1) == report_bits(&r8)))
    };
    let (t1, t8, identical) = match run() {
        Ok(v) => v,
        Err(e) => return Verdict::Fail(e),
    };
    let speedup = t1 / t8;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "1 thread {t1:.2}s, 8 threads {t8:.2}s, speedup {speedup:.2}x, identical reports {identical}, {cores} core(s)"
    );
    if t1 >= 60.0 || !identical {
        return Verdict::Fail(detail);
    }
    if speedup >= 3.0 {
        Verdict::Pass(detail)
    } else if cores < 8 {
        Verdict::Unattainable(format!("{detail}; a 3x speedup needs at least 8 cores"))
    } else {
        Verdict::Fail(detail)
    }
}

type Criterion = (&'static str, fn() -> Check);

const CHECKS: [Criterion; 9] = [
    ("metric oracle equivalence", criterion_1),
    ("identity sweep", criterion_2),
    ("AP closed form", criterion_3),
    ("occlusion-vote regression", criterion_4),
    ("gradient fidelity", criterion_5),
    ("self-training math", criterion_6),
    ("AoMix invariants", criterion_7),
    ("DPE clamp", criterion_8),
    ("format round trips", criterion_9),
];

fn main() -> ExitCode {
    let mut failed = 0;
    let mut print = |n: usize, name: &str, v: Verdict| match v {
        Verdict::Pass(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
        Verdict::Fail(d) => {
            failed += 1;
            println!("criterion {n:>2} FAIL  {name}: {d}");
        }
        Verdict::Unattainable(d) => println!("criterion {n:>2} FAIL  {name} (unattainable on this host): {d}"),
    };
    for (i, (name, f)) in CHECKS.iter().enumerate() {
        let v = match f() {
            Ok(d) => Verdict::Pass(d),
            Err(d) => Verdict::Fail(d),
        };
        print(i + 1, name, v);
    }
    print(10, "evaluate throughput", criterion_10());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
