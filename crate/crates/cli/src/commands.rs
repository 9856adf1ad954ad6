use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pianet_core::data::{
    crop_patches, generate_phantom, preprocess, read_annotations, read_detections, read_metaimage, read_scan,
    read_volume_bin, write_annotations, write_detections, write_mask_mhd, write_text, write_volume_bin,
    write_volume_mhd, ElementType, ScanAnnotation, Volume,
};
use pianet_core::detect::{detect_volume, to_records};
use pianet_core::eval::{cpm, froc, match_all, write_report};
use pianet_core::model::PiaNet;
use pianet_core::train::{detector_from, finetune_stage2, pretrain_stage1, write_jsonl, Checkpoint, Init, TrainOutcome};
use pianet_core::verify::{layer_suite, network_check};
use pianet_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toml::Table;

use crate::config::{apply_override, load_table, RunConfig};
use crate::manifest::RunManifest;
use crate::slice::{axial, draw, footprint};
use crate::{Command, Common};

const ANNOTATIONS: &str = "annotations.csv";
const VOLUME_EXT: &str = "pvol";

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let (mut table, from_file) = match &common.config {
        Some(p) => (load_table(p)?, true),
        None => (Table::new(), false),
    };
    for o in &common.overrides {
        apply_override(&mut table, o)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            apply_override(&mut table, &format!("{key}={v}"))?;
        }
    }
    let mut cfg = RunConfig::from_table(table, from_file)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn prepare(common: &Common) -> Result<()> {
    if common.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Info).try_init();
    }
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Preprocessed scans listed in the directory's annotations, in id order.
fn load_dataset(dir: &Path) -> Result<Vec<(Volume, ScanAnnotation)>> {
    let ann = read_annotations(&dir.join(ANNOTATIONS))?;
    let mut scans = Vec::new();
    for p in sorted_files(dir, VOLUME_EXT)? {
        let id = stem(&p);
        let a = ann.get(&id).cloned().unwrap_or_else(|| ScanAnnotation::new(id.clone()));
        scans.push((read_volume_bin(&p)?, a));
    }
    if let Some(missing) = ann.keys().find(|id| !dir.join(format!("{id}.{VOLUME_EXT}")).exists()) {
        return Err(Error::data(format!("annotated scan {missing} has no {missing}.{VOLUME_EXT} in {}", dir.display())));
    }
    if scans.is_empty() {
        return Err(Error::data(format!("no .{VOLUME_EXT} volumes in {}", dir.display())));
    }
    Ok(scans)
}

fn finish(mut m: RunManifest, out: &Path) -> Result<()> {
    m.outputs.sort();
    m.write(out)?;
    Ok(())
}

fn save_training(m: &mut RunManifest, out: &Path, stage: &str, outcome: &TrainOutcome) -> Result<()> {
    let ck = out.join(format!("{stage}.ckpt"));
    let log = out.join(format!("{stage}.jsonl"));
    outcome.checkpoint.save(&ck)?;
    write_jsonl(&log, &outcome.steps)?;
    m.outputs.extend([ck, log]);
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { common, count, side } => {
            let cfg = resolve(
                &common,
                &[
                    ("dataset.phantom_count", count.map(|c| c.to_string())),
                    ("phantom.extents", side.map(|s| format!("[{s}, {s}, {s}]"))),
                ],
            )?;
            prepare(&common)?;
            let mut m = RunManifest::new("phantom", common.config.as_deref(), cfg.snapshot()?, cfg.phantom.seed);
            let mut anns = Vec::new();
            for i in 0..cfg.dataset.phantom_count {
                let id = format!("{}{:03}", cfg.dataset.id_prefix, i);
                let mut spec = cfg.phantom.clone();
                spec.seed = cfg.phantom.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let (v, a) = m.timed("generate", || generate_phantom(&spec, &id))?;
                let image = common.out.join(format!("{id}.mhd"));
                let mask = common.out.join(format!("{id}_mask.mhd"));
                write_volume_mhd(&image, &v, ElementType::Short)?;
                write_mask_mhd(&mask, &v)?;
                m.outputs.extend([image.clone(), image.with_extension("raw"), mask.clone(), mask.with_extension("raw")]);
                anns.push(a);
            }
            let ann = common.out.join(ANNOTATIONS);
            write_annotations(&ann, &anns)?;
            m.outputs.push(ann);
            finish(m, &common.out)
        }
        Command::Preprocess { common, input } => {
            let cfg = resolve(&common, &[])?;
            prepare(&common)?;
            let mut m = RunManifest::new("preprocess", common.config.as_deref(), cfg.snapshot()?, 0);
            let images: Vec<PathBuf> = sorted_files(&input, "mhd")?
                .into_iter()
                .filter(|p| !stem(p).ends_with("_mask"))
                .collect();
            if images.is_empty() {
                return Err(Error::data(format!("no .mhd scans in {}", input.display())));
            }
            for image in images {
                let id = stem(&image);
                let mask = input.join(format!("{id}_mask.mhd"));
                let raw = read_scan(&image, mask.exists().then_some(mask.as_path()))?;
                let v = m.timed("preprocess", || preprocess(&raw, &cfg.preprocess))?;
                let out = common.out.join(format!("{id}.{VOLUME_EXT}"));
                write_volume_bin(&out, &v)?;
                m.outputs.push(out);
            }
            let ann = input.join(ANNOTATIONS);
            if ann.exists() {
                let parsed = read_annotations(&ann)?;
                let dst = common.out.join(ANNOTATIONS);
                write_annotations(&dst, parsed.values())?;
                m.outputs.push(dst);
            }
            finish(m, &common.out)
        }
        Command::Pretrain { common, data, epochs, resume } => {
            let cfg = resolve(&common, &[("train.epochs", epochs.map(|e| e.to_string()))])?;
            prepare(&common)?;
            let mut m = RunManifest::new("pretrain", common.config.as_deref(), cfg.snapshot()?, cfg.train.seed);
            let model = cfg.model.build()?;
            let scans = m.timed("load", || load_dataset(&data))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let patches = m.timed("patches", || crop_patches(&scans, &cfg.patches, &mut rng))?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = m.timed("train", || pretrain_stage1(&patches, &model, &cfg.train, resume.as_ref()))?;
            save_training(&mut m, &common.out, "stage1", &outcome)?;
            finish(m, &common.out)
        }
        Command::Train { common, data, epochs, pretrained, resume } => {
            let cfg = resolve(&common, &[("train.epochs", epochs.map(|e| e.to_string()))])?;
            prepare(&common)?;
            let mut m = RunManifest::new("train", common.config.as_deref(), cfg.snapshot()?, cfg.train.seed);
            let model = cfg.model.build()?;
            let scans = m.timed("load", || load_dataset(&data))?;
            let pre = pretrained.map(|p| Checkpoint::load(&p)).transpose()?;
            if let Some(ck) = &pre {
                if ck.stage() != Some("stage1") {
                    return Err(Error::config("--pretrained needs a stage-1 checkpoint"));
                }
            }
            let init = pre.as_ref().map_or(Init::Fresh, Init::Pretrained);
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = m.timed("train", || finetune_stage2(&scans, &model, init, &cfg.train, resume.as_ref()))?;
            save_training(&mut m, &common.out, "stage2", &outcome)?;
            finish(m, &common.out)
        }
        Command::Detect { common, data, checkpoint, untrained, threshold } => {
            let cfg = resolve(&common, &[("detect.score_threshold", threshold.map(|t| t.to_string()))])?;
            prepare(&common)?;
            let mut m = RunManifest::new("detect", common.config.as_deref(), cfg.snapshot()?, cfg.train.seed);
            let net = match (&checkpoint, untrained) {
                (Some(p), _) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.stage() != Some("stage2") {
                        return Err(Error::config(format!("{} is not a stage-2 checkpoint", p.display())));
                    }
                    detector_from(&ck.model_config()?, &ck)?
                }
                (None, true) => PiaNet::new(cfg.model.build()?, cfg.train.seed)?,
                (None, false) => return Err(Error::config("detect needs --checkpoint or --untrained")),
            };
            let mut rows = Vec::new();
            let volumes = sorted_files(&data, VOLUME_EXT)?;
            if volumes.is_empty() {
                return Err(Error::data(format!("no .{VOLUME_EXT} volumes in {}", data.display())));
            }
            for p in volumes {
                let v = read_volume_bin(&p)?;
                let dets = m.timed("detect", || detect_volume(&net, &v, &cfg.detect))?;
                log::info!("{}: {} detections", p.display(), dets.len());
                rows.extend(to_records(&v, &stem(&p), &dets));
            }
            let out = common.out.join("detections.csv");
            write_detections(&out, &rows)?;
            m.outputs.push(out);
            finish(m, &common.out)
        }
        Command::Evaluate { common, detections, annotations, data } => {
            let cfg = resolve(&common, &[])?;
            prepare(&common)?;
            let mut m = RunManifest::new("evaluate", common.config.as_deref(), cfg.snapshot()?, 0);
            let dets = read_detections(&detections)?;
            let mut truth: BTreeMap<String, ScanAnnotation> = read_annotations(&annotations)?;
            if let Some(dir) = &data {
                for p in sorted_files(dir, VOLUME_EXT)? {
                    let id = stem(&p);
                    truth.entry(id.clone()).or_insert_with(|| ScanAnnotation::new(id));
                }
            }
            let scans: Vec<ScanAnnotation> = truth.into_values().collect();
            let report = m.timed("evaluate", || Ok(cpm(&froc(&match_all(&dets, &scans, cfg.evaluate.hit_rule)?)?)))?;
            println!("CPM {:.4} over {} scans", report.cpm, scans.len());
            let written = write_report(&common.out.join("report"), &report, &cfg.evaluate.formats)?;
            m.outputs.extend(written);
            finish(m, &common.out)
        }
        Command::Gradcheck { common, param_fraction, input_entries, layers_only } => {
            let cfg = resolve(&common, &[])?;
            prepare(&common)?;
            let mut m = RunManifest::new("gradcheck", common.config.as_deref(), cfg.snapshot()?, cfg.train.seed);
            let mut suite = m.timed("layers", || layer_suite(cfg.train.seed))?;
            if !layers_only {
                let model = cfg.model.build()?;
                suite.push(m.timed("network", || network_check(model, cfg.train.seed, param_fraction, input_entries))?);
            }
            let out = common.out.join("gradcheck.json");
            let text = serde_json::to_string_pretty(&suite).map_err(|e| Error::config(e.to_string()))?;
            write_text(&out, &(text + "\n"))?;
            m.outputs.push(out);
            for e in &suite {
                println!(
                    "{} {} max_rel {:.3e} checked {} skipped {}",
                    if e.report.passed { "PASS" } else { "FAIL" },
                    e.name,
                    e.report.max_rel_error,
                    e.report.checked,
                    e.report.skipped
                );
            }
            finish(m, &common.out)?;
            match suite.iter().find(|e| !e.report.passed) {
                Some(e) => Err(Error::numeric(
                    format!("gradcheck {}", e.name),
                    format!("max relative error {:.3e} (tolerance {:.0e})", e.report.max_rel_error, e.report.tolerance),
                )),
                None => Ok(()),
            }
        }
        Command::Slice { common, volume, detections, annotations, scan_id, z, min_score, zoom } => {
            let cfg = resolve(&common, &[])?;
            prepare(&common)?;
            if zoom == 0 {
                return Err(Error::config("--zoom must be at least 1"));
            }
            let mut m = RunManifest::new("slice", common.config.as_deref(), cfg.snapshot()?, 0);
            let v = if volume.extension().is_some_and(|e| e == "mhd") {
                read_metaimage(&volume)?
            } else {
                read_volume_bin(&volume)?
            };
            let id = scan_id.unwrap_or_else(|| stem(&volume));
            let dets: Vec<_> = match &detections {
                Some(p) => read_detections(p)?.into_iter().filter(|d| d.scan_id == id && d.score >= min_score).collect(),
                None => Vec::new(),
            };
            let truth = match &annotations {
                Some(p) => read_annotations(p)?.remove(&id).map(|a| a.nodules).unwrap_or_default(),
                None => Vec::new(),
            };
            let window = (cfg.preprocess.hu_min, cfg.preprocess.hu_max);
            let mut slices: Vec<usize> = match z {
                Some(z) => vec![z],
                None if dets.is_empty() => vec![v.extents[0] / 2],
                None => dets
                    .iter()
                    .map(|d| (v.world_to_voxel([d.x_mm, d.y_mm, d.z_mm])[2].floor().max(0.0) as usize).min(v.extents[0] - 1))
                    .collect(),
            };
            slices.sort_unstable();
            slices.dedup();
            for &k in &slices {
                let mut img = axial(&v, k, window)?;
                draw(&mut img, &v, k, &dets, &truth);
                let out = common.out.join(format!("{id}_z{k:04}.pgm"));
                img.write(&out)?;
                m.outputs.push(out);
                if zoom > 1 {
                    for (j, d) in dets.iter().enumerate() {
                        if let Some((x0, y0, x1, y1)) = footprint(&v, [d.x_mm, d.y_mm, d.z_mm], d.r_mm, k) {
                            let half = ((x1 - x0).max(y1 - y0) + 8).max(8);
                            let crop = img.crop_zoom((x0 + x1) / 2, (y0 + y1) / 2, half, zoom);
                            let out = common.out.join(format!("{id}_z{k:04}_det{j:02}.pgm"));
                            crop.write(&out)?;
                            m.outputs.push(out);
                        }
                    }
                }
            }
            println!("wrote {} images", m.outputs.len());
            finish(m, &common.out)
        }
    }
}
