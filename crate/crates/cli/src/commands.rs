use std::path::{Path, PathBuf};

use cascade_core::checkpoint::load_checkpoint;
use cascade_core::config::Config;
use cascade_core::data::{read_background, read_keypoints, read_sequence_dir, write_sequence_dir, SequenceData};
use cascade_core::eval::{evaluate_sequence, load_votes, rank_methods, ranking_csv, ranking_table, CriticalValues, StudyDesign};
use cascade_core::generators::Models;
use cascade_core::imageio::{frames_digest, load_rgb_dir, save_rgb_dir};
use cascade_core::losses::RandomPyramid;
use cascade_core::parsing::{ingest_label_map, save_label_map, LabelSet, SegmentationMap};
use cascade_core::pose::{build_conditioning, PoseStats};
use cascade_core::reenact::{reenact_sequence, run_sequence, scale_wrinkles, swap_conditioning, ReenactOptions, SequenceOutput};
use cascade_core::structure::{visualize_structure, GaborBank, StructureField};
use cascade_core::synth::generate_synthetic_sequence;
use cascade_core::training::{ground_truth_structure, prepare_dataset, run_training, write_loss_log, Dataset};
use cascade_core::{Error, Result};

use crate::{Command, Common};

/// Loads the config file and applies the common flag overrides.
fn resolve_config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        c.training.seed = seed;
        c.synth.seed = seed;
    }
    if let Some(v) = common.variant {
        c.training.variant = v;
    }
    if let Some(r) = common.resolution {
        c.training.height = r;
        c.training.width = r;
        c.synth.height = r;
        c.synth.width = r;
    }
    Ok(c)
}

fn require_checkpoint(common: &Common) -> Result<&Path> {
    common.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn load_dataset(config: &mut Config, common: &Common, data: &Path, cache: Option<PathBuf>) -> Result<Dataset> {
    let seq = read_sequence_dir(data, &config.pose)?;
    let (_, h, w) = seq.background.dims3()?;
    if common.resolution.is_some() && (config.training.height, config.training.width) != (h, w) {
        return Err(Error::Config(format!(
            "--resolution {} does not match the {h}x{w} sequence",
            config.training.height
        )));
    }
    config.training.height = h;
    config.training.width = w;
    let mut options = config.prepare_options(h, Some(&data.join("cache")))?;
    if cache.is_some() {
        options.cache_dir = cache;
    }
    let (dataset, report) = prepare_dataset(&seq.frames, &seq.keypoints, &seq.label_maps, &seq.background, &seq.labels, &options)?;
    println!(
        "prepared {} frames at {h}x{w}: extracted {}, cached {}",
        dataset.len(),
        report.extracted,
        report.cached
    );
    Ok(dataset)
}

fn write_maps(out: &Path, result: &SequenceOutput, labels: &LabelSet) -> Result<()> {
    let shape_dir = out.join("shape");
    std::fs::create_dir_all(&shape_dir).map_err(|e| Error::io(&shape_dir, e))?;
    for (i, s) in result.shapes.iter().enumerate() {
        save_label_map(shape_dir.join(format!("frame_{i:05}.png")), s, labels)?;
    }
    let panels: Vec<_> = result.structures.iter().map(visualize_structure).collect();
    if !panels.is_empty() {
        save_rgb_dir(out.join("structure"), &panels)?;
    }
    Ok(())
}

fn report_output(out: &Path, result: &SequenceOutput) -> Result<()> {
    save_rgb_dir(out, &result.frames)?;
    if let Some(b) = &result.bootstrap {
        println!(
            "bootstrap: {} iterations, {}, last delta {:.3e}",
            b.iterations,
            if b.converged { "converged" } else { "not converged" },
            b.last_delta
        );
    }
    println!("wrote {} frames to {}", result.frames.len(), out.display());
    println!("frames sha256 {}", frames_digest(&result.frames)?);
    Ok(())
}

fn load_models(common: &Common) -> Result<(Models, cascade_core::checkpoint::CheckpointMeta)> {
    let (models, meta) = load_checkpoint(require_checkpoint(common)?)?;
    if let Some(v) = common.variant {
        if v != models.variant {
            return Err(Error::Config(format!("checkpoint holds variant {}, not {v}", models.variant)));
        }
    }
    Ok((models, meta))
}

pub fn run(command: Command, common: &Common) -> Result<()> {
    let mut config = resolve_config(common)?;
    match command {
        Command::SynthData { out, frames } => {
            if let Some(n) = frames {
                config.synth.frames = n;
            }
            let seq = generate_synthetic_sequence(&config.synth)?;
            let data = SequenceData::from(seq);
            write_sequence_dir(&out, &data)?;
            println!(
                "wrote {} frames at {}x{} to {}",
                data.frames.len(),
                config.synth.height,
                config.synth.width,
                out.display()
            );
            println!("frames sha256 {}", frames_digest(&data.frames)?);
        }
        Command::Prepare { data, cache } => {
            load_dataset(&mut config, common, &data, cache)?;
        }
        Command::Train { data, epochs, log, cache } => {
            let dir = require_checkpoint(common)?.to_path_buf();
            if let Some(e) = epochs {
                config.training.epochs = e;
            }
            let dataset = load_dataset(&mut config, common, &data, cache)?;
            let outcome = run_training(&config.training, &dataset, Some(&dir))?;
            for e in &outcome.epochs {
                println!("epoch {:>3} {:<10} mean loss {:.6}", e.epoch, e.stage, e.mean_total);
            }
            let log = log.unwrap_or_else(|| dir.join("losses.csv"));
            write_loss_log(&log, outcome.records())?;
            if let Some(p) = &outcome.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
        }
        Command::Reenact { source, target, out, maps } => {
            let (models, meta) = load_models(common)?;
            let limbs = config.pose.limb_map()?;
            let src = read_keypoints(&source, &config.pose)?;
            let tgt = read_keypoints(&target, &config.pose)?;
            let background = read_background(&target)?;
            let src_stats = PoseStats::from_frames(&src, limbs.anchors())?;
            let tgt_stats = PoseStats::from_frames(&tgt, limbs.anchors())?;
            let options = ReenactOptions { limbs, size: (meta.height, meta.width), bootstrap: config.training.bootstrap };
            let result = reenact_sequence(&models, &src, &src_stats, &tgt_stats, &background, &options)?;
            report_output(&out, &result)?;
            if maps {
                write_maps(&out, &result, &models.labels)?;
            }
        }
        Command::Edit { poses, out, shape_from, structure_from, wrinkles } => {
            if shape_from.is_none() && structure_from.is_none() && wrinkles.is_none() {
                return Err(Error::Edit("nothing to edit: give --shape-from, --structure-from or --wrinkles".into()));
            }
            let (models, meta) = load_models(common)?;
            let size = (meta.height, meta.width);
            let limbs = config.pose.limb_map()?;
            let keypoints = read_keypoints(&poses, &config.pose)?;
            let background = read_background(&poses)?;
            let conditioning = build_conditioning(&keypoints, &limbs, size)?;
            let shapes: Option<Vec<SegmentationMap>> = shape_from
                .map(|dir| {
                    cascade_core::imageio::list_pngs(dir.join(cascade_core::data::LABELS_DIR))?
                        .iter()
                        .map(|p| ingest_label_map(p, &models.labels, Some(size)))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            let mut structures: Option<Vec<StructureField>> = structure_from
                .map(|dir| {
                    let bank = GaborBank::new(meta.gabor)?;
                    load_rgb_dir(dir.join(cascade_core::data::FRAMES_DIR))?
                        .iter()
                        .map(|f| ground_truth_structure(f, &bank, meta.structure_smoothing))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?;
            if let Some(factor) = wrinkles {
                let base = match structures.take() {
                    Some(s) => s,
                    None => {
                        run_sequence(&models, &conditioning, &background, &config.training.bootstrap, Default::default())?
                            .structures
                    }
                };
                if base.is_empty() {
                    return Err(Error::Edit(format!("variant {} predicts no structure to scale", models.variant)));
                }
                structures = Some(base.iter().map(|s| scale_wrinkles(s, factor)).collect::<Result<_>>()?);
            }
            let result = swap_conditioning(
                &models,
                &conditioning,
                shapes.as_deref(),
                structures.as_deref(),
                &background,
                &config.training.bootstrap,
            )?;
            report_output(&out, &result)?;
        }
        Command::Evaluate { pred, gt } => {
            let (p, g) = (load_rgb_dir(&pred)?, load_rgb_dir(&gt)?);
            let phi = RandomPyramid::<f32>::new(config.training.feature_seed);
            let m = evaluate_sequence(&p, &g, &phi)?;
            println!("frames {}", p.len());
            println!("l1 {:.6}", m.l1);
            println!("ssim {:.6}", m.ssim);
            println!("perceptual {:.6}", m.perceptual);
            match m.frechet {
                Some(f) => println!("frechet {f:.6}"),
                None => println!("frechet n/a"),
            }
        }
        Command::Study { votes, w, m, t, alpha, comparisons_per_pair, report } => {
            let (totals, participants) = load_votes(&votes)?;
            let methods: Vec<String> = totals.keys().cloned().collect();
            if let Some(t) = t {
                if t != methods.len() {
                    return Err(Error::Study(format!("--t {t} but the votes name {} methods", methods.len())));
                }
            }
            let alpha = alpha.unwrap_or(config.study.alpha);
            let critical_value = match w {
                Some(w) => w,
                None => CriticalValues::default().get(methods.len(), alpha).ok_or_else(|| {
                    Error::Study(format!("no tabulated W for t={} at alpha={alpha}; pass --W", methods.len()))
                })?,
            };
            let design = StudyDesign {
                methods,
                participants: m.unwrap_or(participants),
                alpha,
                critical_value,
                comparisons_per_pair: comparisons_per_pair.unwrap_or(config.study.comparisons_per_pair),
                votes: totals,
            };
            let ranking = rank_methods(&design)?;
            let table = ranking_table(&ranking);
            print!("{table}");
            if let Some(prefix) = report {
                for (ext, body) in [("csv", ranking_csv(&ranking)), ("txt", table)] {
                    let p = prefix.with_extension(ext);
                    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Command::Visualize { data, out } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            match &common.checkpoint {
                Some(_) => {
                    let (models, meta) = load_models(common)?;
                    let keypoints = read_keypoints(&data, &config.pose)?;
                    let poses = build_conditioning(&keypoints, &config.pose.limb_map()?, (meta.height, meta.width))?;
                    let background = read_background(&data)?;
                    let result = run_sequence(&models, &poses, &background, &config.training.bootstrap, Default::default())?;
                    write_maps(&out, &result, &models.labels)?;
                    println!("wrote predicted panels for {} frames to {}", poses.len(), out.display());
                }
                None => {
                    let seq = read_sequence_dir(&data, &config.pose)?;
                    let (_, h, _) = seq.background.dims3()?;
                    let bank = GaborBank::new(config.structure.gabor(h)?)?;
                    let panels = seq
                        .frames
                        .iter()
                        .map(|f| ground_truth_structure(f, &bank, config.structure.smoothing).map(|s| visualize_structure(&s)))
                        .collect::<Result<Vec<_>>>()?;
                    save_rgb_dir(out.join("structure"), &panels)?;
                    let shape_dir = out.join("shape");
                    std::fs::create_dir_all(&shape_dir).map_err(|e| Error::io(&shape_dir, e))?;
                    for (i, m) in seq.label_maps.iter().enumerate() {
                        save_label_map(shape_dir.join(format!("frame_{i:05}.png")), m, &seq.labels)?;
                    }
                    println!("wrote annotation panels for {} frames to {}", seq.frames.len(), out.display());
                }
            }
        }
    }
    Ok(())
}
