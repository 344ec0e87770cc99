//! The steps behind each CLI subcommand. Every artifact lands in the
//! configured output (or data) directory and is written atomically.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{generate, import_png_dir, write_splits, Dataset};
use crate::disambig::{
    confusion_matrix, load_or_generate_soft_labels, merge_categories, relabel, symmetrize, ConfusionMatrix, Partition,
};
use crate::error::{invalid, shape, Result};
use crate::eval::{argmax, evaluate, fuse_dumps, score_dataset, EvalReport, ScoreDump};
use crate::io::write_atomic;
use crate::multires::model::LoadedModel;
use crate::multires::resolution::{network_by_name, network_for_size};
use crate::multires::{ResolutionSpec, DEFAULT_CROP_SCALES};
use crate::train::{train_checkpoint, TrainingLog};

pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = generate(&cfg.scene_spec())?;
    write_splits(&splits, &cfg.data_dir)?;
    Ok(["train", "val", "test"].iter().map(|s| cfg.split_path(s)).collect())
}

pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    Dataset::load(&cfg.split_path(split))
}

/// Resolution `size` from the roster, with its configured or built-in network.
pub fn resolution_spec(cfg: &RunConfig, size: usize, num_outputs: usize) -> Result<ResolutionSpec> {
    let idx = cfg
        .resolutions
        .iter()
        .position(|&r| r == size)
        .ok_or_else(|| invalid(format!("resolution {size} is not in the roster {:?}", cfg.resolutions)))?;
    let network = match cfg.networks.get(idx) {
        Some(name) => network_by_name(name, num_outputs)?,
        None => network_for_size(size, num_outputs)?,
    };
    ResolutionSpec::new(size, DEFAULT_CROP_SCALES.to_vec(), network)
}

fn load_partition(path: Option<&Path>) -> Result<Option<Partition>> {
    path.map(Partition::load).transpose()
}

fn out_file(cfg: &RunConfig, name: String) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(name))
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub training_log: TrainingLog,
}

fn train_and_save(cfg: &RunConfig, size: usize, stem: &str, knowledge: Option<&Path>) -> Result<TrainArtifacts> {
    let mut train = load_split(cfg, "train")?;
    if let Some(p) = load_partition(cfg.partition.as_deref())? {
        if p.num_original != train.num_classes() {
            return Err(shape(format!(
                "partition covers {} classes, dataset has {}",
                p.num_original,
                train.num_classes()
            )));
        }
        let labels = relabel(train.labels(), &p)?;
        train = train.with_labels(labels, p.len())?;
    }
    let soft = match knowledge {
        Some(k) => {
            let model = LoadedModel::load(k)?;
            let cache = out_file(cfg, "soft_labels.mrsl".into())?;
            Some(load_or_generate_soft_labels(&cache, &model, &train, cfg.soft_ten_crop)?)
        }
        None => None,
    };
    let res = resolution_spec(cfg, size, train.num_classes())?;
    let (ck, log) = train_checkpoint(&res, &train, soft.as_ref(), &cfg.train_config())?;
    let checkpoint = out_file(cfg, format!("{stem}_{size}.mrck"))?;
    ck.save(&checkpoint)?;
    let log_path = out_file(cfg, format!("{stem}_{size}.log.csv"))?;
    write_atomic(&log_path, &log.to_csv())?;
    Ok(TrainArtifacts {
        checkpoint,
        log: log_path,
        training_log: log,
    })
}

/// Trains resolution `size` on the train split (relabeled when the config
/// names a partition).
pub fn train(cfg: &RunConfig, size: usize) -> Result<TrainArtifacts> {
    let stem = if cfg.partition.is_some() { "merged" } else { "model" };
    train_and_save(cfg, size, stem, None)
}

/// Trains with an auxiliary head against the knowledge network's soft labels.
pub fn distill(cfg: &RunConfig, size: usize, knowledge: &Path) -> Result<TrainArtifacts> {
    train_and_save(cfg, size, "distill", Some(knowledge))
}

pub fn confusion(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<(PathBuf, ConfusionMatrix)> {
    let model = LoadedModel::load(checkpoint)?;
    let data = load_split(cfg, split)?;
    if model.num_outputs() != data.num_classes() {
        return Err(shape(format!(
            "model predicts {} classes, {split} split has {}",
            model.num_outputs(),
            data.num_classes()
        )));
    }
    let dump = score_dataset(&model, &data)?;
    let preds: Vec<usize> = dump.rows().into_iter().map(argmax).collect();
    let c = confusion_matrix(&preds, data.labels(), data.num_classes())?;
    let path = out_file(cfg, "confusion.csv".into())?;
    c.save(&path)?;
    Ok((path, c))
}

pub fn merge(cfg: &RunConfig, confusion: &Path) -> Result<(PathBuf, Partition)> {
    let c = ConfusionMatrix::load(confusion)?;
    let mut p = merge_categories(&symmetrize(&c)?, cfg.tau)?;
    p.source_confusion = Some(confusion.display().to_string());
    let path = out_file(cfg, "partition.json".into())?;
    p.save(&path)?;
    Ok((path, p))
}

fn write_report(cfg: &RunConfig, stem: &str, report: &EvalReport) -> Result<[PathBuf; 2]> {
    let json = out_file(cfg, format!("{stem}.eval.json"))?;
    let text = out_file(cfg, format!("{stem}.eval.txt"))?;
    write_atomic(&json, &report.to_json()?)?;
    write_atomic(&text, report.to_text().as_bytes())?;
    Ok([json, text])
}

fn stem_of(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Scores a checkpoint on a split, writing the dump and its report.
pub fn eval_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    partition: Option<&Path>,
) -> Result<(PathBuf, EvalReport)> {
    let model = LoadedModel::load(checkpoint)?;
    let data = load_split(cfg, split)?;
    let dump = score_dataset(&model, &data)?;
    let stem = format!("{}_{split}", stem_of(checkpoint));
    let dump_path = out_file(cfg, format!("{stem}.mrsc"))?;
    dump.save(&dump_path)?;
    let report = evaluate(&dump, &data, load_partition(partition)?.as_ref())?;
    write_report(cfg, &stem, &report)?;
    Ok((dump_path, report))
}

pub fn eval_dump(cfg: &RunConfig, dump: &Path, split: &str, partition: Option<&Path>) -> Result<EvalReport> {
    let d = ScoreDump::load(dump)?;
    let data = load_split(cfg, split)?;
    let report = evaluate(&d, &data, load_partition(partition)?.as_ref())?;
    write_report(cfg, &stem_of(dump), &report)?;
    Ok(report)
}

pub fn fuse(
    cfg: &RunConfig,
    dumps: &[PathBuf],
    weights: Option<&[f64]>,
    split: &str,
    partition: Option<&Path>,
) -> Result<(PathBuf, EvalReport)> {
    let loaded = dumps.iter().map(|p| ScoreDump::load(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ScoreDump> = loaded.iter().collect();
    let fused = fuse_dumps(&refs, weights)?;
    let stem = format!("fused_{split}");
    let path = out_file(cfg, format!("{stem}.mrsc"))?;
    fused.save(&path)?;
    let data = load_split(cfg, split)?;
    let report = evaluate(&fused, &data, load_partition(partition)?.as_ref())?;
    write_report(cfg, &stem, &report)?;
    Ok((path, report))
}

pub fn import_png(cfg: &RunConfig, dir: &Path, size: usize, split: &str) -> Result<(PathBuf, Vec<String>)> {
    let (ds, classes) = import_png_dir(dir, size, cfg.seed)?;
    std::fs::create_dir_all(&cfg.data_dir)?;
    let path = cfg.split_path(split);
    ds.save(&path)?;
    Ok((path, classes))
}
