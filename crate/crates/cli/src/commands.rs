use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use treeclust_core::checkpoint::{self, write_atomic};
use treeclust_core::data::{load_dataset, DataSource, Dataset, DatasetSpec, Labels};
use treeclust_core::metrics::{class_distance_matrix, ClusterScores, LabeledAssignment, MetricRecord};
use treeclust_core::model::{InputShape, Model};
use treeclust_core::training::{assign_dataset, Phase, RunLogger, Session, TrainState};
use treeclust_core::{Error, HierarchyExport, Result, RunConfig, TreeTopology};

use crate::ExportFormat;

const CHECKPOINT: &str = "checkpoint.bin";
const EPOCH_LOG: &str = "epochs.jsonl";
const STEP_LOG: &str = "steps.jsonl";
const RUN_MANIFEST: &str = "run.json";

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))
}

fn score(model: &Model, topo: &TreeTopology, data: &Dataset, labels: &Labels) -> Result<(LabeledAssignment, ClusterScores)> {
    let leaves = assign_dataset(model, topo, data)?;
    let assign = LabeledAssignment::new(leaves, labels.ids().to_vec(), labels.num_classes(), topo.clone())?;
    let scores = ClusterScores::compute(&assign);
    Ok((assign, scores))
}

#[derive(Serialize)]
struct Report<'a> {
    checkpoint: String,
    epoch: usize,
    samples: usize,
    active_leaves: usize,
    scores: ClusterScores,
    /// Classes with fewer than two samples (diagonal fixed at 0).
    undersized_classes: Vec<&'a str>,
    records: Vec<MetricRecord>,
}

/// Print the scores and write the report plus the distance matrix to `dir`.
fn write_report(dir: &Path, ckpt: &Path, state: &TrainState, data: &Dataset, labels: &Labels, split: &str) -> Result<()> {
    let (assign, scores) = score(&state.model, &state.topology, data, labels)?;
    let matrix = class_distance_matrix(&assign, labels.class_names())?;
    let report = Report {
        checkpoint: ckpt.display().to_string(),
        epoch: state.epoch,
        samples: data.len(),
        active_leaves: state.topology.active_leaf_count(),
        scores,
        undersized_classes: labels
            .class_names()
            .iter()
            .zip(&matrix.undersized)
            .filter(|(_, &u)| u)
            .map(|(n, _)| n.as_str())
            .collect(),
        records: scores.records(Some(state.epoch), split),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("metrics.json"), to_json(&report)?.as_bytes())?;
    write_atomic(&dir.join("distances.csv"), matrix.to_csv_string()?.as_bytes())?;
    let dp = scores.dp.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "NMI {:.4}  ACC {:.4}  ARI {:.4}  DP {dp}  ({} samples, {} leaves)",
        scores.nmi,
        scores.acc,
        scores.ari,
        data.len(),
        state.topology.active_leaf_count()
    );
    Ok(())
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (data, labels) = load_dataset(&cfg.dataset)?;
    let shape = data.shape();
    let spec = cfg.model_spec(shape)?;
    let policy = cfg.policy(shape);
    policy.validate(shape)?;

    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let epochs_path = out.join(EPOCH_LOG);
    let steps_path = out.join(STEP_LOG);

    let mut state = match resume {
        Some(ckpt) => {
            let state = checkpoint::restore(ckpt)?;
            if *state.model.spec() != spec {
                return Err(Error::Config {
                    field: "encoder".into(),
                    message: format!("checkpoint {} was trained with a different model", ckpt.display()),
                });
            }
            state
        }
        None => {
            for p in [&epochs_path, &steps_path] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            TrainState::new(spec, cfg.schedule(), cfg.loss())?
        }
    };
    write_atomic(&out.join(RUN_MANIFEST), to_json(&cfg)?.as_bytes())?;

    let mut logger = RunLogger::open(&epochs_path, cfg.output.log_steps.then_some(steps_path.as_path()))?;
    let ckpt_path = out.join(CHECKPOINT);
    let total = state.schedule.total_epochs();
    let mut evaluator = |model: &Model, topo: &TreeTopology| score(model, topo, &data, &labels).map(|(_, s)| s);
    let mut progress = |s: &TrainState| {
        if let Some(r) = s.history.last() {
            let nmi = r.metrics.map_or(String::new(), |m| format!("  nmi {:.4}", m.nmi));
            let phase = match r.phase {
                Phase::Pretrain => "pretrain",
                _ => "tree",
            };
            eprintln!(
                "epoch {}/{total} {phase}  loss {:.4}  leaves {}{nmi}",
                r.epoch + 1,
                r.loss.total,
                r.active_leaves
            );
        }
    };
    let mut session = Session::new(&data, &policy);
    session.evaluator = Some(&mut evaluator);
    session.logger = Some(&mut logger);
    session.checkpoint = Some(&ckpt_path);
    session.on_epoch = Some(&mut progress);
    state.run(session)?;
    checkpoint::save(&state, &ckpt_path)?;

    let export = HierarchyExport::build(&state.model, &state.topology, &data, &labels)?;
    write_atomic(&out.join("hierarchy.json"), export.to_json()?.as_bytes())?;
    write_report(&out, &ckpt_path, &state, &data, &labels, "train")?;
    eprintln!("artifacts written to {}", out.display());
    Ok(())
}

/// Interpret `--data`: an image-folder directory, a JSON run manifest, or a
/// TOML file holding either a full run config or a bare dataset table.
fn load_data_arg(path: &Path, expected: InputShape) -> Result<(Dataset, Labels)> {
    let spec = if path.is_dir() {
        let InputShape::Image {
            channels,
            height,
            width,
        } = expected
        else {
            return Err(Error::invalid("model takes vectors; an image folder cannot be used"));
        };
        DatasetSpec::new(DataSource::ImageFolder {
            root: path.to_path_buf(),
            height,
            width,
            channels,
        })
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = if path.extension().is_some_and(|e| e == "json") {
            let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            // manifests already hold absolute paths
            cfg.dataset
        } else {
            let cfg_err = |e: toml::de::Error| Error::Config {
                field: "dataset".into(),
                message: format!("{}: {}", path.display(), e.message()),
            };
            let value: toml::Table = toml::from_str(&text).map_err(cfg_err)?;
            let table = match value.get("dataset") {
                Some(toml::Value::Table(t)) => t.clone(),
                _ => value,
            };
            let mut spec: DatasetSpec = table.try_into().map_err(cfg_err)?;
            spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            spec
        };
        for (field, p) in spec.required_paths() {
            if !p.exists() {
                return Err(Error::config(field, format!("path {} does not exist", p.display())));
            }
        }
        spec
    };
    let (data, labels) = load_dataset(&spec)?;
    if data.shape() != expected {
        return Err(Error::invalid(format!(
            "dataset samples have shape {:?} but the checkpoint expects {:?}",
            data.shape(),
            expected
        )));
    }
    Ok((data, labels))
}

pub fn eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let state = checkpoint::restore(ckpt)?;
    let (dataset, labels) = load_data_arg(data, state.model.spec().encoder.input)?;
    let dir: PathBuf = match out {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    write_report(&dir, ckpt, &state, &dataset, &labels, "eval")
}

pub fn export(ckpt: &Path, format: ExportFormat, out: &Path, data: Option<&Path>) -> Result<()> {
    let state = checkpoint::restore(ckpt)?;
    let manifest;
    let data_path = match data {
        Some(p) => p,
        None => {
            manifest = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_MANIFEST);
            if !manifest.exists() {
                return Err(Error::invalid(format!(
                    "no --data given and no {} next to the checkpoint",
                    RUN_MANIFEST
                )));
            }
            &manifest
        }
    };
    let (dataset, labels) = load_data_arg(data_path, state.model.spec().encoder.input)?;
    let export = HierarchyExport::build(&state.model, &state.topology, &dataset, &labels)?;
    let text = match format {
        ExportFormat::JsonTree => export.to_json()?,
        ExportFormat::Dot => export.to_dot(),
    };
    write_atomic(out, text.as_bytes())
}
