//! Subcommand implementations. Each writes its artifacts under the run
//! directory and returns the in-memory results for callers and tests.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mdm::checkpoint::UNetCheckpoint;
use mdm::data::{corrupt_test, load_image, load_manifest, save_image, write_synth_dataset, DatasetManifest, Phase, Sample, Split, SynthConfig};
use mdm::features::{kmeans_feature_clusters, FeatureConfig, FeatureExtractor};
use mdm::metrics::{aji, foreground_dice, instances_of, pooled_miou, summarize, write_metrics_csv, MetricRow, MetricSummary};
use mdm::pretrain::{self, reconstruction_preview, PretrainOutcome, LOSS_LOG};
use mdm::rng;
use mdm::seghead::{predict_images, predict_sliding, train_head, HeadProvenance, HeadTrainReport, SegHead, SegHeadConfig};
use mdm::{ImageTensor, LabelMap};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ROBUSTNESS_BY_SEVERITY_CSV: &str = "robustness_by_severity.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const TEST_SPLIT: &str = "seg_test";

/// Label used for the untrained U-Net in place of a checkpoint path.
pub const RANDOM_INIT: &str = "random";

pub fn prepare_run(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    cfg.freeze(&dir)?;
    Ok(dir)
}

pub fn cmd_synth_data(dir: &Path, n: usize, labeled: usize, test: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let cfg = SynthConfig::for_size(size);
    Ok(write_synth_dataset(dir, &cfg, n, labeled, test, seed)?)
}

fn images_of(samples: Vec<Sample>) -> Vec<ImageTensor> {
    samples.into_iter().map(|s| s.image).collect()
}

fn labelled(samples: Vec<Sample>) -> Result<Vec<(ImageTensor, LabelMap)>> {
    samples
        .into_iter()
        .map(|s| {
            let label = s.label.with_context(|| format!("sample '{}' has no label", s.id))?;
            Ok((s.image, label))
        })
        .collect()
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let dir = prepare_run(cfg)?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let images = images_of(manifest.load_split(Split::Pretrain, Phase::Pretraining)?);
    let unet = cfg.unet.resolve()?;
    log::info!(
        "pre-training {:?}/{:?} on {} images for {} iterations",
        cfg.pretrain.method,
        cfg.pretrain.loss,
        images.len(),
        cfg.pretrain.iterations
    );
    let outcome = pretrain::pretrain(&cfg.pretrain, &unet, &images, &dir, resume)?;
    let points = outcome.losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect();
    if let Err(e) = line_chart(
        &dir.join("loss.png"),
        "pre-training loss",
        "iteration",
        "loss",
        &[Series {
            name: "loss".into(),
            points,
        }],
    ) {
        log::warn!("loss plot skipped: {e:#}");
    }
    Ok(outcome)
}

/// A feature extractor from a checkpoint, or an untrained U-Net for [`RANDOM_INIT`].
pub fn open_extractor(cfg: &RunConfig, checkpoint: &str) -> Result<FeatureExtractor> {
    if checkpoint == RANDOM_INIT {
        let unet = cfg.unet.resolve()?;
        return Ok(FeatureExtractor::random_init(unet, cfg.seed, cfg.pretrain.max_t, cfg.pretrain.patch)?);
    }
    let path = Path::new(checkpoint);
    let ck = UNetCheckpoint::load(path)?;
    Ok(FeatureExtractor::from_checkpoint(&ck, path)?)
}

/// Deterministic subset of `ceil(fraction·n)` training pairs, in file order.
pub fn select_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let n = ((fraction * items.len() as f64).ceil() as usize).clamp(1, items.len().max(1));
    if n >= items.len() {
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "fraction", 0));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Dice pooled over the test set, averaged over foreground classes.
    pub dice: f64,
    pub miou: f64,
    /// Mean per-image AJI of the instance class.
    pub aji: f64,
    pub accuracy: f64,
}

impl EvalMetrics {
    pub fn rows(&self, run_id: &str, seed: u64, dataset: &str, split: &str) -> Vec<MetricRow> {
        [("dice", self.dice), ("miou", self.miou), ("aji", self.aji), ("accuracy", self.accuracy)]
            .into_iter()
            .map(|(metric, value)| MetricRow {
                run_id: run_id.into(),
                seed,
                dataset: dataset.into(),
                split: split.into(),
                metric: metric.into(),
                value,
            })
            .collect()
    }
}

pub fn score(cfg: &RunConfig, preds: &[LabelMap], gts: &[LabelMap], k: usize) -> Result<EvalMetrics> {
    ensure!(preds.len() == gts.len() && !preds.is_empty(), "need one prediction per test image");
    let pairs: Vec<(LabelMap, LabelMap)> = preds.iter().cloned().zip(gts.iter().cloned()).collect();
    let dice = foreground_dice(&pairs, k)?;
    let miou = pooled_miou(&pairs, k)?;
    let mut aji_sum = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in &pairs {
        let conn = cfg.metrics.connectivity;
        let class = cfg.metrics.instance_class;
        aji_sum += aji(&instances_of(p, class, conn)?, &instances_of(g, class, conn)?)?;
        hits += p.data().iter().zip(g.data()).filter(|(a, b)| a == b).count();
        total += p.data().len();
    }
    Ok(EvalMetrics {
        dice,
        miou,
        aji: aji_sum / pairs.len() as f64,
        accuracy: hits as f64 / total as f64,
    })
}

pub fn predict_all(
    cfg: &RunConfig,
    extractor: &FeatureExtractor,
    head: &SegHead,
    images: &[ImageTensor],
    features: &FeatureConfig,
) -> Result<Vec<LabelMap>> {
    match cfg.data.window {
        Some(w) => images
            .iter()
            .map(|img| Ok(predict_sliding(extractor, head, img, w, features, cfg.data.stitch)?))
            .collect(),
        None => Ok(predict_images(extractor, head, images, features)?),
    }
}

pub struct SegRun {
    pub seed: u64,
    pub head: SegHead,
    pub provenance: HeadProvenance,
    pub report: HeadTrainReport,
    pub metrics: EvalMetrics,
}

/// Features for the training pairs, head training with `seed`, test scoring.
pub fn train_seg_seed(
    cfg: &RunConfig,
    extractor: &FeatureExtractor,
    train: &[(ImageTensor, LabelMap)],
    test: &[(ImageTensor, LabelMap)],
    num_classes: usize,
    seed: u64,
) -> Result<SegRun> {
    let features = FeatureConfig {
        seed,
        ..cfg.features.clone()
    };
    let train = select_fraction(train, cfg.data.fraction, seed);
    let images: Vec<ImageTensor> = train.iter().map(|(i, _)| i.clone()).collect();
    let stacks = extractor.extract_multi_t_batch(&images, &features.timesteps, &features)?;
    let pairs: Vec<_> = stacks.into_iter().zip(train.iter().map(|(_, l)| l.clone())).collect();
    let head_cfg = SegHeadConfig {
        num_classes,
        ..cfg.seghead.clone()
    };
    let (head, report) = train_head(&pairs, &head_cfg, &mut rng::stream(seed, "head", 0))?;
    let test_images: Vec<ImageTensor> = test.iter().map(|(i, _)| i.clone()).collect();
    let test_labels: Vec<LabelMap> = test.iter().map(|(_, l)| l.clone()).collect();
    let preds = predict_all(cfg, extractor, &head, &test_images, &features)?;
    let metrics = score(cfg, &preds, &test_labels, num_classes)?;
    log::info!(
        "seed {seed}: head {} steps{}, dice {:.4} miou {:.4}",
        report.steps,
        if report.converged { " (converged)" } else { "" },
        metrics.dice,
        metrics.miou
    );
    Ok(SegRun {
        seed,
        head,
        provenance: HeadProvenance {
            checkpoint: extractor.id().to_string(),
            features,
        },
        report,
        metrics,
    })
}

pub struct SegData {
    pub manifest: DatasetManifest,
    pub train: Vec<(ImageTensor, LabelMap)>,
    pub test: Vec<(ImageTensor, LabelMap)>,
}

pub fn load_seg_data(cfg: &RunConfig) -> Result<SegData> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let train = labelled(manifest.load_split(Split::SegTrain, Phase::HeadTraining)?)?;
    let test = labelled(manifest.load_split(Split::SegTest, Phase::Evaluation)?)?;
    ensure!(!train.is_empty(), "the manifest has no labelled training images");
    ensure!(!test.is_empty(), "the manifest has no test images");
    Ok(SegData { manifest, train, test })
}

pub struct TrainSegOutcome {
    pub runs: Vec<SegRun>,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<MetricSummary>,
    pub dir: PathBuf,
}

pub fn head_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("heads").join(format!("seed_{seed}.safetensors"))
}

pub fn cmd_train_seg(cfg: &RunConfig, checkpoint: &str) -> Result<TrainSegOutcome> {
    let dir = prepare_run(cfg)?;
    let extractor = open_extractor(cfg, checkpoint)?;
    let data = load_seg_data(cfg)?;
    train_seg_with(cfg, &extractor, &data, &dir)
}

pub fn train_seg_with(cfg: &RunConfig, extractor: &FeatureExtractor, data: &SegData, dir: &Path) -> Result<TrainSegOutcome> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let k = data.manifest.num_classes;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &seed in &cfg.metrics.seeds {
        let run = train_seg_seed(cfg, extractor, &data.train, &data.test, k, seed)?;
        run.head.save(&head_path(dir, seed), &run.provenance)?;
        rows.extend(run.metrics.rows(&cfg.run_id, seed, &cfg.data.name, TEST_SPLIT));
        runs.push(run);
    }
    write_metrics_csv(&dir.join(METRICS_CSV), &rows)?;
    let summary = summarize(&rows);
    write_summary(&dir.join(SUMMARY_CSV), &summary)?;
    for s in &summary {
        log::info!("{} {}: {}", s.run_id, s.metric, s.percent());
    }
    Ok(TrainSegOutcome {
        runs,
        rows,
        summary,
        dir: dir.to_path_buf(),
    })
}

pub fn write_summary(path: &Path, summary: &[MetricSummary]) -> Result<()> {
    write_csv(path, summary)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a head and checks that it was trained on features of `extractor`.
pub fn open_head(extractor: &FeatureExtractor, path: &Path) -> Result<(SegHead, HeadProvenance)> {
    let (head, provenance) = SegHead::load(path)?;
    if provenance.checkpoint != extractor.id() {
        bail!(
            "head {} was trained on features of '{}', not '{}'",
            path.display(),
            provenance.checkpoint,
            extractor.id()
        );
    }
    Ok((head, provenance))
}

pub fn evaluate_images(
    cfg: &RunConfig,
    extractor: &FeatureExtractor,
    head: &SegHead,
    provenance: &HeadProvenance,
    test: &[(ImageTensor, LabelMap)],
    num_classes: usize,
) -> Result<EvalMetrics> {
    let images: Vec<ImageTensor> = test.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<LabelMap> = test.iter().map(|(_, l)| l.clone()).collect();
    let preds = predict_all(cfg, extractor, head, &images, &provenance.features)?;
    score(cfg, &preds, &labels, num_classes)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &str, head: &Path) -> Result<EvalMetrics> {
    let dir = prepare_run(cfg)?;
    let extractor = open_extractor(cfg, checkpoint)?;
    let (head, provenance) = open_head(&extractor, head)?;
    let data = load_seg_data(cfg)?;
    let m = evaluate_images(cfg, &extractor, &head, &provenance, &data.test, data.manifest.num_classes)?;
    write_metrics_csv(
        &dir.join(METRICS_CSV),
        &m.rows(&cfg.run_id, provenance.features.seed, &cfg.data.name, TEST_SPLIT),
    )?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub severity: usize,
    pub miou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SeverityRow {
    pub severity: usize,
    pub mean_miou: f64,
    pub median_miou: f64,
    pub mean_dice: f64,
}

pub const CLEAN_KIND: &str = "clean";

pub fn robustness_with(
    cfg: &RunConfig,
    extractor: &FeatureExtractor,
    head: &SegHead,
    provenance: &HeadProvenance,
    test: &[(ImageTensor, LabelMap)],
    num_classes: usize,
) -> Result<(Vec<RobustnessRow>, Vec<SeverityRow>)> {
    let clean = evaluate_images(cfg, extractor, head, provenance, test, num_classes)?;
    let mut rows = vec![RobustnessRow {
        kind: CLEAN_KIND.into(),
        severity: 0,
        miou: clean.miou,
        dice: clean.dice,
    }];
    for &kind in &cfg.robustness.kinds {
        for &severity in &cfg.robustness.severities {
            let corrupted = test
                .iter()
                .enumerate()
                .map(|(i, (img, label))| {
                    let key = rng::hash64(&[kind.name().as_bytes(), &(severity as u64).to_le_bytes(), &(i as u64).to_le_bytes()]);
                    let img = corrupt_test(img, kind, severity, &mut rng::stream(cfg.seed, "robustness", key))?;
                    Ok((img, label.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let m = evaluate_images(cfg, extractor, head, provenance, &corrupted, num_classes)?;
            log::info!("{kind} severity {severity}: miou {:.4}", m.miou);
            rows.push(RobustnessRow {
                kind: kind.name().into(),
                severity,
                miou: m.miou,
                dice: m.dice,
            });
        }
    }
    let mut by: BTreeMap<usize, Vec<&RobustnessRow>> = BTreeMap::new();
    rows.iter().for_each(|r| by.entry(r.severity).or_default().push(r));
    let severity_rows = by
        .into_iter()
        .map(|(severity, rs)| {
            let mut ious: Vec<f64> = rs.iter().map(|r| r.miou).collect();
            ious.sort_by(f64::total_cmp);
            let n = ious.len();
            let median = if n % 2 == 1 { ious[n / 2] } else { 0.5 * (ious[n / 2 - 1] + ious[n / 2]) };
            SeverityRow {
                severity,
                mean_miou: ious.iter().sum::<f64>() / n as f64,
                median_miou: median,
                mean_dice: rs.iter().map(|r| r.dice).sum::<f64>() / n as f64,
            }
        })
        .collect();
    Ok((rows, severity_rows))
}

pub fn cmd_robustness(cfg: &RunConfig, checkpoint: &str, head: &Path) -> Result<(Vec<RobustnessRow>, Vec<SeverityRow>)> {
    let dir = prepare_run(cfg)?;
    let extractor = open_extractor(cfg, checkpoint)?;
    let (head, provenance) = open_head(&extractor, head)?;
    let data = load_seg_data(cfg)?;
    let (rows, sev) = robustness_with(cfg, &extractor, &head, &provenance, &data.test, data.manifest.num_classes)?;
    write_csv(&dir.join(ROBUSTNESS_CSV), &rows)?;
    write_csv(&dir.join(ROBUSTNESS_BY_SEVERITY_CSV), &sev)?;
    let nonincreasing = sev.windows(2).all(|w| w[1].median_miou <= w[0].median_miou);
    log::info!("median mIoU nonincreasing across severities: {nonincreasing}");
    let mut series = vec![Series {
        name: "mean over kinds".into(),
        points: sev.iter().map(|s| (s.severity as f64, s.mean_miou)).collect(),
    }];
    for kind in &cfg.robustness.kinds {
        let mut points = vec![(0.0, rows[0].miou)];
        points.extend(rows.iter().filter(|r| r.kind == kind.name()).map(|r| (r.severity as f64, r.miou)));
        series.push(Series {
            name: kind.name().into(),
            points,
        });
    }
    if let Err(e) = line_chart(&dir.join("robustness.png"), "robustness", "severity", "mIoU", &series) {
        log::warn!("robustness plot skipped: {e:#}");
    }
    Ok((rows, sev))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub method: String,
    pub loss: String,
    pub target: String,
    pub fixed_t: String,
    pub extract_t: String,
    pub patch: usize,
    pub iterations: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub status: String,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn lower<T: std::fmt::Debug>(v: T) -> String {
    format!("{v:?}").to_lowercase()
}

/// Runs every cell of the grid; cells with infeasible settings are
/// recorded as skipped.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let dir = prepare_run(cfg)?;
    let data = load_seg_data(cfg)?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let pretrain_images = images_of(manifest.load_split(Split::Pretrain, Phase::Pretraining)?);
    let unet = cfg.unet.resolve()?;
    let g = &cfg.ablate;
    let base = &cfg.pretrain;
    let mut rows = Vec::new();
    let mut all_metrics = Vec::new();
    let mut checkpoints: BTreeMap<String, std::result::Result<PathBuf, String>> = BTreeMap::new();
    for method in axis(&g.method, base.method) {
        for loss in axis(&g.loss, base.loss) {
            for target in axis(&g.target, base.target) {
                for fixed in axis(&g.fixed_t, base.fixed_t.unwrap_or(0)) {
                    for patch in axis(&g.patch, base.patch) {
                        for iterations in axis(&g.iterations, base.iterations) {
                            let pc = mdm::pretrain::PretrainConfig {
                                method,
                                loss,
                                target,
                                fixed_t: (fixed > 0).then_some(fixed),
                                patch,
                                iterations,
                                ..base.clone()
                            };
                            let fixed_name = if fixed > 0 { fixed.to_string() } else { "uniform".into() };
                            let pkey = format!("{}_{}_{}_t{}_p{}_i{}", lower(method), lower(loss), lower(target), fixed_name, patch, iterations);
                            let ck = checkpoints
                                .entry(pkey.clone())
                                .or_insert_with(|| {
                                    if let Err(e) = pc.validate() {
                                        log::warn!("skipping {pkey}: {e}");
                                        return Err(e.to_string());
                                    }
                                    let cell_dir = dir.join("cells").join(&pkey);
                                    pretrain::pretrain(&pc, &unet, &pretrain_images, &cell_dir, None)
                                        .map(|o| o.checkpoint)
                                        .map_err(|e| e.to_string())
                                })
                                .clone();
                            for ts in axis(&g.extract_t, cfg.features.timesteps.clone()) {
                                let extract_name = ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("+");
                                let cell = format!("{pkey}_x{extract_name}");
                                let mut row = AblationRow {
                                    cell: cell.clone(),
                                    method: lower(method),
                                    loss: lower(loss),
                                    target: lower(target),
                                    fixed_t: fixed_name.clone(),
                                    extract_t: extract_name,
                                    patch,
                                    iterations,
                                    dice_mean: f64::NAN,
                                    dice_std: f64::NAN,
                                    miou_mean: f64::NAN,
                                    miou_std: f64::NAN,
                                    status: "ok".into(),
                                };
                                match &ck {
                                    Err(reason) => row.status = format!("skipped: {reason}"),
                                    Ok(path) => {
                                        let cell_cfg = RunConfig {
                                            run_id: cell.clone(),
                                            pretrain: pc.clone(),
                                            features: FeatureConfig {
                                                timesteps: ts.clone(),
                                                ..cfg.features.clone()
                                            },
                                            ..cfg.clone()
                                        };
                                        let extractor = open_extractor(&cell_cfg, &path.to_string_lossy())?;
                                        let out = train_seg_with(&cell_cfg, &extractor, &data, &path.parent().unwrap().join(format!("x{}", row.extract_t)))?;
                                        for s in &out.summary {
                                            match s.metric.as_str() {
                                                "dice" => (row.dice_mean, row.dice_std) = (s.mean, s.std),
                                                "miou" => (row.miou_mean, row.miou_std) = (s.mean, s.std),
                                                _ => {}
                                            }
                                        }
                                        all_metrics.extend(out.rows);
                                    }
                                }
                                log::info!("{}: dice {:.4} ({})", row.cell, row.dice_mean, row.status);
                                rows.push(row);
                            }
                        }
                    }
                }
            }
        }
    }
    write_csv(&dir.join(ABLATION_CSV), &rows)?;
    write_metrics_csv(&dir.join(METRICS_CSV), &all_metrics)?;
    Ok(rows)
}

pub fn cmd_reconstruct(cfg: &RunConfig, checkpoint: &str, timesteps: &[usize], count: usize) -> Result<PathBuf> {
    let dir = prepare_run(cfg)?;
    let extractor = open_extractor(cfg, checkpoint)?;
    let manifest = load_manifest(&cfg.data.manifest)?;
    let images: Vec<ImageTensor> = images_of(manifest.load_split(Split::Pretrain, Phase::Pretraining)?)
        .into_iter()
        .take(count.max(1))
        .collect();
    let ts: Vec<usize> = timesteps.to_vec();
    let grid = reconstruction_preview(extractor.model(), &images, &ts, extractor.max_t(), extractor.patch(), cfg.seed)?;
    let path = dir.join("reconstruction.png");
    save_image(&path, &grid)?;
    Ok(path)
}

/// Colours for cluster and class overlays, in `[-1, 1]`.
const PALETTE: [[f64; 3]; 8] = [
    [0.9, -0.8, -0.8],
    [-0.8, 0.7, -0.8],
    [-0.8, -0.6, 0.9],
    [0.9, 0.8, -0.9],
    [0.8, -0.9, 0.8],
    [-0.9, 0.8, 0.8],
    [1.0, 0.2, -0.6],
    [-0.2, -0.9, 0.1],
];

pub fn overlay(image: &ImageTensor, labels: &LabelMap, alpha: f64) -> ImageTensor {
    let channels = image.channels();
    ImageTensor::from_fn(image.height(), image.width(), 3, |y, x, c| {
        let base = image.get(y, x, if channels == 3 { c } else { 0 });
        let color = PALETTE[labels.get(y, x) as usize % PALETTE.len()][c];
        (1.0 - alpha) * base + alpha * color
    })
}

/// One k-means overlay per decoder block in `blocks`.
pub fn cmd_cluster(cfg: &RunConfig, checkpoint: &str, image: &Path, k: usize, blocks: &[usize]) -> Result<Vec<PathBuf>> {
    let dir = prepare_run(cfg)?;
    let extractor = open_extractor(cfg, checkpoint)?;
    let manifest_channels = cfg.unet.resolve()?.in_channels;
    let img = load_image(image, manifest_channels)?;
    let stem = image.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "image".into());
    let mut out = Vec::new();
    for &b in blocks {
        let fc = FeatureConfig {
            blocks: vec![b],
            seed: cfg.seed,
            ..cfg.features.clone()
        };
        let stack = extractor.extract_features_multi_t(&img, &fc.timesteps, &fc)?;
        let labels = kmeans_feature_clusters(&stack, k, &mut rng::stream(cfg.seed, "cluster", b as u64))?;
        let path = dir.join(format!("cluster_{stem}_block{b}.png"));
        save_image(&path, &overlay(&img, &labels, 0.5))?;
        out.push(path);
    }
    Ok(out)
}

/// Reads back the loss log of a finished pre-training run.
pub fn loss_log(dir: &Path) -> Result<Vec<pretrain::LossRow>> {
    Ok(pretrain::read_loss_log(&dir.join(LOSS_LOG))?)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}
