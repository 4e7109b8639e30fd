//! End-to-end experiment steps shared by the CLI and the acceptance tests:
//! corpus generation, training on a corpus, inference and evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::diffusion::{
    self, condition, merge_prediction, DiffusionSchedule, LossRecord, Normalizer, TrainConfig, TrainExample,
    TrainOutcome,
};
use crate::grid::{Image, ProjectionGeometry, Sinogram};
use crate::io::{self, Checkpoint, DatasetManifest, SampleRecord, Split};
use crate::masking::AngularMask;
use crate::metrics::{abs_error_map, diff_map, psnr, EvalReport, Method, SampleScores};
use crate::mlem::{reconstruct, MlemConfig};
use crate::phantom::random_phantom;
use crate::projector::Projector;
use crate::{par, Error, Result};

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub n_angles: usize,
    pub n_bins: usize,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl GenerateConfig {
    /// 512 train / 32 eval phantoms, 64×64, 90 angles, 95 bins, a third of
    /// the angles missing.
    pub fn desk() -> Self {
        Self { n_train: 512, n_eval: 32, image_size: 64, n_angles: 90, n_bins: 95, missing_fraction: 0.3333, seed: 0 }
    }

    /// Small corpus for pipeline smoke runs.
    pub fn ci() -> Self {
        Self { n_train: 64, n_eval: 8, image_size: 32, n_angles: 45, n_bins: 47, ..Self::desk() }
    }

    pub fn geometry(&self) -> Result<ProjectionGeometry> {
        ProjectionGeometry::new(self.n_angles, self.n_bins, self.image_size)
    }
}

const SEED_INDEX_BITS: u32 = 20;

/// Per-sample seed: base seed in the high bits, sample index in the low
/// ones, so seeds within a corpus are distinct.
fn sample_seed(base: u64, index: usize) -> u64 {
    (base << SEED_INDEX_BITS) | index as u64
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mask_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x6d61_736b)
}

fn sampling_seed(base: u64, seed: u64) -> u64 {
    splitmix64(splitmix64(base) ^ seed)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Phantom → forward projection → GT sinogram → random wedge → LA
/// sinogram, for every sample; writes the files and `manifest.txt`.
pub fn generate_dataset(dir: &Path, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    let geometry = cfg.geometry()?;
    if !(0.0..=1.0).contains(&cfg.missing_fraction) {
        return Err(Error::invalid(format!("missing fraction {} outside [0, 1]", cfg.missing_fraction)));
    }
    let total = cfg.n_train + cfg.n_eval;
    if total == 0 {
        return Err(Error::invalid("corpus needs at least one sample"));
    }
    if total >= 1 << SEED_INDEX_BITS {
        return Err(Error::invalid(format!("at most {} samples per corpus", (1 << SEED_INDEX_BITS) - 1)));
    }
    create_dir(dir)?;
    let projector = Projector::new(geometry);
    let generated = par::map_range(total, |i| -> Result<_> {
        let (split, local) = if i < cfg.n_train { (Split::Train, i) } else { (Split::Eval, i - cfg.n_train) };
        let seed = sample_seed(cfg.seed, i);
        let phantom = random_phantom(seed, cfg.image_size)?;
        let gt = projector.forward(&phantom)?;
        let mask = AngularMask::random(mask_seed(seed), cfg.n_angles, cfg.missing_fraction)?;
        let la = mask.apply(&gt)?;
        let id = format!("{}_{local:04}", split.name());
        let record = SampleRecord {
            gt: format!("{id}.gt.sino"),
            la: format!("{id}.la.sino"),
            mask: format!("{id}.mask"),
            phantom: format!("{id}.phantom.sino"),
            id,
            split,
            seed,
        };
        Ok((record, phantom, gt, la, mask))
    });
    let mut samples = Vec::with_capacity(total);
    let mut train_gt = Vec::new();
    for item in generated {
        let (record, phantom, gt, la, mask) = item?;
        io::write_sinogram(&dir.join(&record.gt), &gt)?;
        io::write_sinogram(&dir.join(&record.la), &la)?;
        io::write_mask(&dir.join(&record.mask), &mask)?;
        io::write_image(&dir.join(&record.phantom), &phantom)?;
        if record.split == Split::Train || cfg.n_train == 0 {
            train_gt.push(gt);
        }
        samples.push(record);
    }
    let norm_scale = Normalizer::from_percentile(&train_gt)?.scale();
    let manifest =
        DatasetManifest { geometry, missing_fraction: cfg.missing_fraction, norm_scale, seed: cfg.seed, samples };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Everything stored for one sample.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub phantom: Image,
    pub gt: Sinogram,
    pub la: Sinogram,
    pub mask: AngularMask,
}

pub fn load_samples(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedSample>> {
    let size = manifest.geometry.image_size();
    manifest
        .split(split)
        .map(|r| {
            let s = LoadedSample {
                record: r.clone(),
                phantom: io::read_image(&dir.join(&r.phantom))?,
                gt: io::read_sinogram(&dir.join(&r.gt), size)?,
                la: io::read_sinogram(&dir.join(&r.la), size)?,
                mask: io::read_mask(&dir.join(&r.mask))?,
            };
            let g = &manifest.geometry;
            if s.gt.geometry() != g
                || s.la.geometry() != g
                || s.mask.n_angles() != g.n_angles()
                || s.phantom.size() != size
            {
                return Err(Error::format("dataset", format!("sample {} does not match the manifest geometry", r.id)));
            }
            Ok(s)
        })
        .collect()
}

/// Trains on the train split, using the manifest's normalisation scale.
pub fn train_on_dataset(
    dir: &Path,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    progress: impl FnMut(usize, &LossRecord),
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let manifest = DatasetManifest::read(dir)?;
    let samples = load_samples(dir, &manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} has no training samples", dir.display())));
    }
    let examples: Vec<TrainExample> =
        samples.into_iter().map(|s| TrainExample { gt: s.gt, la: s.la, mask: s.mask }).collect();
    let cfg = TrainConfig { norm_scale: Some(manifest.norm_scale), ..cfg.clone() };
    let TrainOutcome { params, normalizer, losses } = diffusion::train_with_progress(&examples, &cfg, sched, progress)?;
    let ckpt = Checkpoint { geometry: manifest.geometry, schedule: sched.clone(), normalizer, params };
    Ok((ckpt, losses))
}

pub fn pred_file(id: &str) -> String {
    format!("{id}.pred.sino")
}

pub fn merged_file(id: &str) -> String {
    format!("{id}.merged.sino")
}

/// Inpaints one limited-angle sinogram: sample in normalised space, map
/// back (clamped at zero), and keep the observed rows of `la`.
/// Returns `(prediction, merged)`.
pub fn inpaint(
    ckpt: &Checkpoint,
    la: &Sinogram,
    mask: &AngularMask,
    steps: usize,
    seed: u64,
) -> Result<(Sinogram, Sinogram)> {
    if la.geometry() != &ckpt.geometry {
        return Err(Error::shape(
            format!("{}x{} sinogram for this model", ckpt.geometry.n_angles(), ckpt.geometry.n_bins()),
            format!("{}x{}", la.geometry().n_angles(), la.geometry().n_bins()),
        ));
    }
    let (cond_la, cond_mask) = condition(&ckpt.normalizer, la, mask)?;
    let out = diffusion::sample(&ckpt.params, &cond_la, &cond_mask, &ckpt.schedule, steps, seed)?;
    let mut pred = ckpt.normalizer.denormalize(&out.data, la.geometry())?;
    pred.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let merged = merge_prediction(&pred, la, mask)?;
    Ok((pred, merged))
}

/// Runs [`inpaint`] on every sample of `split` and writes
/// `<id>.pred.sino` and `<id>.merged.sino` into `out`.
pub fn infer_dataset(
    ckpt: &Checkpoint,
    dir: &Path,
    split: Split,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<String>> {
    let manifest = DatasetManifest::read(dir)?;
    if manifest.geometry != ckpt.geometry {
        return Err(Error::shape(format!("{:?} (model)", ckpt.geometry), format!("{:?} (dataset)", manifest.geometry)));
    }
    let samples = load_samples(dir, &manifest, split)?;
    create_dir(out)?;
    let results =
        par::map_slice(&samples, |s| inpaint(ckpt, &s.la, &s.mask, steps, sampling_seed(seed, s.record.seed)));
    let mut ids = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(results) {
        let (pred, merged) = r?;
        io::write_sinogram(&out.join(pred_file(&s.record.id)), &pred)?;
        io::write_sinogram(&out.join(merged_file(&s.record.id)), &merged)?;
        ids.push(s.record.id.clone());
    }
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct EvaluateConfig {
    pub mlem: MlemConfig,
    /// Error-map previews are written for this many leading samples.
    pub n_maps: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { mlem: MlemConfig::default(), n_maps: 4 }
    }
}

/// PSNR tables against three references.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Reconstructions against the phantom.
    pub vs_phantom: EvalReport,
    /// Reconstructions against the full-sinogram reconstruction.
    pub vs_gt_recon: EvalReport,
    /// Sinograms (zero-filled LA, merged) against the GT sinogram.
    pub sinogram: EvalReport,
}

impl Evaluation {
    pub fn summary(&self) -> String {
        let all = [Method::Full, Method::LimitedAngle, Method::Inpainted];
        let mut out = self.vs_phantom.summary("reconstruction PSNR vs phantom", &all);
        out += &self.vs_gt_recon.summary("reconstruction PSNR vs full-sinogram MLEM", &all[1..]);
        out += &self.sinogram.summary("sinogram PSNR vs ground-truth sinogram", &all[1..]);
        out
    }
}

/// A greyscale preview, written as PGM.
#[derive(Clone, Debug, PartialEq)]
pub struct PreviewMap {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn preview(name: String, width: usize, height: usize, data: Vec<f32>) -> PreviewMap {
    PreviewMap { name, width, height, data }
}

struct SampleEval {
    phantom: SampleScores,
    gt_recon: SampleScores,
    sinogram: SampleScores,
    maps: Vec<PreviewMap>,
}

fn evaluate_sample(
    p: &Projector,
    s: &LoadedSample,
    merged: &Sinogram,
    cfg: &EvaluateConfig,
    want_maps: bool,
) -> Result<SampleEval> {
    let full = reconstruct(p, &s.gt, &cfg.mlem.with_mask(None))?;
    let la = reconstruct(p, &s.la, &cfg.mlem.with_mask(Some(s.mask)))?;
    let inp = reconstruct(p, merged, &cfg.mlem.with_mask(None))?;
    let id = s.record.id.clone();
    let truth = s.phantom.data();
    let phantom = SampleScores {
        sample: id.clone(),
        full: psnr(full.data(), truth)?,
        la: psnr(la.data(), truth)?,
        inpainted: psnr(inp.data(), truth)?,
    };
    let gt_recon = SampleScores {
        sample: id.clone(),
        full: f64::INFINITY,
        la: psnr(la.data(), full.data())?,
        inpainted: psnr(inp.data(), full.data())?,
    };
    let sinogram = SampleScores {
        sample: id.clone(),
        full: f64::INFINITY,
        la: psnr(s.la.data(), s.gt.data())?,
        inpainted: psnr(merged.data(), s.gt.data())?,
    };
    let mut maps = Vec::new();
    if want_maps {
        let n = s.phantom.size();
        let (na, nb) = (s.gt.geometry().n_angles(), s.gt.geometry().n_bins());
        maps.push(preview(format!("{id}_ae_la.pgm"), n, n, abs_error_map(&la, &s.phantom)?.into_data()));
        maps.push(preview(format!("{id}_ae_inpainted.pgm"), n, n, abs_error_map(&inp, &s.phantom)?.into_data()));
        maps.push(preview(format!("{id}_sino_diff.pgm"), nb, na, diff_map(merged, &s.gt)?.into_data()));
        maps.push(preview(format!("{id}_sino_ae.pgm"), nb, na, abs_error_map(merged, &s.gt)?.into_data()));
        for (name, img) in [("full", &full), ("la", &la), ("inpainted", &inp)] {
            maps.push(preview(format!("{id}_recon_{name}.pgm"), n, n, img.data().to_vec()));
        }
    }
    Ok(SampleEval { phantom, gt_recon, sinogram, maps })
}

/// Reconstructs every eval sample three ways (full, LA with masked data
/// model, merged) and scores them. Requires `<id>.merged.sino` in
/// `pred_dir` for exactly the eval samples.
pub fn evaluate_dataset(dir: &Path, pred_dir: &Path, cfg: &EvaluateConfig) -> Result<(Evaluation, Vec<PreviewMap>)> {
    let manifest = DatasetManifest::read(dir)?;
    let samples = load_samples(dir, &manifest, Split::Eval)?;
    let expected: BTreeSet<String> = samples.iter().map(|s| merged_file(&s.record.id)).collect();
    let present: BTreeSet<String> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".merged.sino"))
        .collect();
    if expected != present {
        let missing: Vec<_> = expected.difference(&present).cloned().collect();
        let extra: Vec<_> = present.difference(&expected).cloned().collect();
        return Err(Error::invalid(format!(
            "prediction set does not match the eval split (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    let size = manifest.geometry.image_size();
    let merged = samples
        .iter()
        .map(|s| io::read_sinogram(&pred_dir.join(merged_file(&s.record.id)), size))
        .collect::<Result<Vec<_>>>()?;
    for (s, m) in samples.iter().zip(&merged) {
        if m.geometry() != &manifest.geometry {
            return Err(Error::format("prediction", format!("{} has the wrong shape", s.record.id)));
        }
    }
    let projector = Projector::new(manifest.geometry);
    let indices: Vec<usize> = (0..samples.len()).collect();
    let evals =
        par::map_slice(&indices, |&i| evaluate_sample(&projector, &samples[i], &merged[i], cfg, i < cfg.n_maps));
    let mut eval = Evaluation {
        vs_phantom: EvalReport::default(),
        vs_gt_recon: EvalReport::default(),
        sinogram: EvalReport::default(),
    };
    let mut maps = Vec::new();
    for e in evals {
        let e = e?;
        eval.vs_phantom.samples.push(e.phantom);
        eval.vs_gt_recon.samples.push(e.gt_recon);
        eval.sinogram.samples.push(e.sinogram);
        maps.extend(e.maps);
    }
    Ok((eval, maps))
}

/// Paths of the evaluation outputs derived from the main CSV path.
pub fn report_paths(csv: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let parent = csv.parent().unwrap_or(Path::new("."));
    (
        parent.join(format!("{stem}_gtrecon.csv")),
        parent.join(format!("{stem}_sinogram.csv")),
        parent.join(format!("{stem}_summary.txt")),
    )
}

/// Writes the CSV reports, the summary and the preview maps next to `csv`.
pub fn write_evaluation(csv: &Path, eval: &Evaluation, maps: &[PreviewMap]) -> Result<()> {
    let methods = [Method::LimitedAngle, Method::Inpainted];
    let parent = csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    let (gtrecon, sino, summary) = report_paths(csv);
    io_write(csv, &eval.vs_phantom.to_csv(&methods))?;
    io_write(&gtrecon, &eval.vs_gt_recon.to_csv(&methods))?;
    io_write(&sino, &eval.sinogram.to_csv(&methods))?;
    io_write(&summary, &eval.summary())?;
    for m in maps {
        io::write_pgm(&parent.join(&m.name), m.width, m.height, &m.data)?;
    }
    Ok(())
}

fn io_write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
