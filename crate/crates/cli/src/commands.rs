use std::fs;
use std::path::Path;
use std::process::ExitCode;

use oass::aomix::{aomix, AoMixConfig};
use oass::error::{Error, Result};
use oass::fusion::run_oafusion;
use oass::io::{self, DatasetLayout, BRANCH_FILES, IMAGE};
use oass::metrics::evaluate_oass;
use oass::nn::{grad_check, grad_check_fault_injected, GradBlock};
use oass::render::{render_panoptic, render_semantic, Palette};
use oass::selftrain::{
    confidence_weight, ema_update_in_place, margin_ignore, pseudo_label, target_loss, SelfTrainConfig,
};
use oass::synth::{synth_dataset, SynthSpec};

use crate::{AoMixArgs, Command, SynthArgs};

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Evaluate {
            pred,
            gt,
            out,
            taxonomy,
        } => {
            let tax = taxonomy.taxonomy.build();
            let (p, g) = io::load_pair(&pred, &gt, &tax)?;
            let report = evaluate_oass(&p, &g)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Fuse {
            input,
            out,
            score_threshold,
            taxonomy,
        } => {
            let tax = taxonomy.taxonomy.build();
            let layout = DatasetLayout::scan(&input, &BRANCH_FILES)?;
            for id in &layout.ids {
                let branches = layout.load_branches(id, &tax)?;
                let fused = run_oafusion(&branches, score_threshold, &tax)?;
                io::save_bundle(&out, id, &fused)?;
            }
            println!("fused {} image(s) into {}", layout.ids.len(), out.display());
        }
        Command::Aomix(args) => run_aomix(args)?,
        Command::Pseudolabel {
            probs,
            tau,
            student,
            margins,
            out,
        } => {
            let cfg = SelfTrainConfig {
                tau,
                ..Default::default()
            };
            cfg.validate()?;
            let teacher = io::load_probs(&probs)?;
            let pseudo = pseudo_label(&teacher);
            let omega = confidence_weight(&teacher, tau)?;
            println!("omega {omega}");
            if let Some(student) = student {
                let s = io::load_probs(&student)?;
                let (h, w) = s.dims();
                let ignore = margins.then(|| margin_ignore(h, w, &cfg));
                let loss = target_loss(&s, &pseudo, omega, ignore.as_deref())?;
                println!("loss {loss}");
            }
            if let Some(out) = out {
                io::save_semantic(&out, &pseudo)?;
            }
        }
        Command::Ema {
            teacher,
            student,
            eta,
            steps,
            out,
        } => {
            let mut t = io::load_tensor(&teacher)?;
            let s = io::load_tensor(&student)?;
            if t.shape() != s.shape() {
                return Err(Error::Shape(format!(
                    "teacher {:?} vs student {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            for _ in 0..steps {
                ema_update_in_place(t.data_mut(), s.data(), eta)?;
            }
            io::save_tensor(&out, &t)?;
            let gap = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!("max |teacher - student| {gap:e}");
        }
        Command::Gradcheck {
            block,
            eps,
            seed,
            tolerance,
            fault,
            out,
        } => {
            let blocks: Vec<GradBlock> = block.0.map_or(GradBlock::ALL.to_vec(), |b| vec![b]);
            let mut reports = Vec::new();
            let mut ok = true;
            for b in blocks {
                let r = if fault {
                    grad_check_fault_injected(b, seed, eps)?
                } else {
                    grad_check(b, seed, eps)?
                };
                let pass = r.max_rel_error < tolerance;
                ok &= pass;
                println!(
                    "{:<4} {} max rel error {:.3e} (input {:.3e}, params {:.3e})",
                    r.block.to_string(),
                    if pass { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.input_error,
                    r.param_error
                );
                reports.push(r);
            }
            if let Some(out) = out {
                write_json(&out, &reports)?;
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Synth(args) => run_synth(args)?,
        Command::Render {
            semantic,
            panoptic,
            out,
            taxonomy,
        } => {
            let tax = taxonomy.taxonomy.build();
            let palette = Palette::for_taxonomy(&tax)?;
            let img = match (semantic, panoptic) {
                (Some(p), _) => render_semantic(&io::load_semantic(&p, tax.num_classes())?, &palette)?,
                (None, Some(p)) => render_panoptic(&io::load_panoptic(&p, &tax)?, &palette)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            io::save_rgb(&out, &img)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_aomix(a: AoMixArgs) -> Result<()> {
    let tax = a.taxonomy.taxonomy.build();
    let cfg = AoMixConfig {
        scale_min: a.scale_min,
        scale_max: a.scale_max,
        fill: a.fill.0,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let source = io::load_rgb(&a.source)?;
    let target = io::load_rgb(&a.target)?;
    let labels = io::load_semantic(&a.source_labels, tax.num_classes())?;
    let (_, src_inst) = io::load_instances(&a.source_amodal)?;
    let src_masks: Vec<_> = src_inst.into_iter().map(|i| i.amodal).collect();
    let occ_masks = match &a.occluders {
        Some(p) => io::load_instances(p)?.1.into_iter().map(|i| i.amodal).collect(),
        None => src_masks.clone(),
    };
    let out = aomix(&source, &labels, &src_masks, &occ_masks, &target, &cfg)?;
    create_dir(&a.out)?;
    io::save_mask(&a.out.join("random_mask.png"), &out.random_mask)?;
    io::save_rgb(&a.out.join("masked_source.png"), &out.mix.masked_source)?;
    io::save_rgb(&a.out.join("mixed_image.png"), &out.mix.mixed_image)?;
    io::save_semantic(&a.out.join("mixed_label.png"), &out.mix.mixed_label)?;
    println!("transplanted classes {:?}", out.mix.selected_classes);
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        height: a.height,
        width: a.width,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        occlusion_prob: a.occlusion_prob,
        perturbation: a.perturbation,
        void_prob: a.void_prob,
        seed: a.seed,
        certificate: !a.no_certificate,
        ..Default::default()
    };
    spec.validate()?;
    let tax = oass::labels::Taxonomy::oass18();
    let scenes = synth_dataset(&spec, a.count, &tax)?;
    let (gt_dir, pred_dir) = (a.out.join("gt"), a.out.join("pred"));
    let palette = Palette::oass18();
    for s in &scenes {
        io::save_bundle(&gt_dir, &s.id, &s.gt)?;
        io::save_bundle(&pred_dir, &s.id, &s.pred)?;
        if a.render {
            for (dir, o) in [(&gt_dir, &s.gt), (&pred_dir, &s.pred)] {
                let img = render_panoptic(&o.panoptic, &palette)?;
                io::save_rgb(&dir.join(format!("{}{}", s.id, IMAGE)), &img)?;
            }
        }
    }
    if spec.certificate {
        let certs: std::collections::BTreeMap<&str, _> =
            scenes.iter().map(|s| (s.id.as_str(), s.certificate.as_ref())).collect();
        write_json(&a.out.join("certificates.json"), &certs)?;
    }
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("wrote {} scene(s) to {}", scenes.len(), a.out.display());
    Ok(())
}
