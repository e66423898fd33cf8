//! Run configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::{LevelRange, LossConfig};
use crate::model::{Architecture, ContrastHeadSpec, ContrastMode, EncoderSpec, InputShape, ModelSpec};
use crate::training::{OptimizerConfig, Profile, TrainSchedule};
use crate::tree::MAX_DEPTH;

/// Environment variable that relocates every run's output directory.
pub const OUTPUT_ROOT_ENV: &str = "TREECLUST_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub architecture: Architecture,
    pub embed_dim: usize,
    #[serde(default)]
    pub contrast: Option<ContrastSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSection {
    #[serde(default)]
    pub mode: ContrastMode,
    pub output_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub depth: usize,
}

/// Loss settings; unset fields take the depth-dependent defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub temperature: Option<f64>,
    pub level_range: Option<LevelRange>,
    pub epsilon: Option<f64>,
}

/// A named profile plus per-field overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub profile: Profile,
    pub pretrain_epochs: Option<usize>,
    pub tree_epochs: Option<usize>,
    pub prune_start_epoch: Option<usize>,
    pub prunes_per_epoch: Option<usize>,
    pub target_leaves: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write per-batch losses.
    #[serde(default)]
    pub log_steps: bool,
}

/// Everything `train` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub encoder: EncoderSection,
    pub tree: TreeSection,
    #[serde(default)]
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
    pub output: OutputSection,
}

/// Name the offending key in a TOML error, best effort.
fn toml_field(err: &toml::de::Error) -> String {
    let msg = err.message();
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "<document>".into()
}

impl RunConfig {
    /// Parse and validate. No filesystem access.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: toml_field(&e),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, validate, resolve relative dataset paths against the file's
    /// directory and check that they exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(parent).unwrap_or_else(|_| parent.to_path_buf());
        cfg.dataset.resolve_paths(&base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        for (field, p) in self.dataset.required_paths() {
            if !p.exists() {
                return Err(Error::config(field, format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Input shape as far as it is known without reading data. IDX image
    /// sizes are only known after loading, so a placeholder is used.
    fn nominal_shape(&self) -> InputShape {
        match &self.dataset.source {
            DataSource::SyntheticGaussians { dim, .. } => InputShape::Vector { dim: *dim },
            DataSource::IdxGrayscale { .. } => InputShape::Image {
                channels: 1,
                height: 28,
                width: 28,
            },
            DataSource::ImageFolder {
                height,
                width,
                channels,
                ..
            } => InputShape::Image {
                channels: *channels,
                height: *height,
                width: *width,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let depth = self.tree.depth;
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::config("tree.depth", format!("must be in 1..={MAX_DEPTH}")));
        }
        self.model_spec(self.nominal_shape())?;
        self.schedule().validate(depth)?;
        self.loss().validate()?;
        self.policy(self.nominal_shape()).validate(self.nominal_shape())?;
        Ok(())
    }

    pub fn model_spec(&self, input: InputShape) -> Result<ModelSpec> {
        let n = self.encoder.embed_dim;
        let contrast = match &self.encoder.contrast {
            None => ContrastHeadSpec::identity(n),
            Some(c) => ContrastHeadSpec {
                mode: c.mode,
                output_dim: c.output_dim.unwrap_or(n),
                hidden_dim: c.hidden_dim.unwrap_or(n),
            },
        };
        let spec = ModelSpec {
            encoder: EncoderSpec {
                architecture: self.encoder.architecture,
                input,
                embed_dim: n,
            },
            depth: self.tree.depth,
            contrast,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn schedule(&self) -> TrainSchedule {
        let s = &self.schedule;
        let mut out = s.profile.schedule(self.tree.depth);
        out.pretrain_epochs = s.pretrain_epochs.unwrap_or(out.pretrain_epochs);
        out.tree_epochs = s.tree_epochs.unwrap_or(out.tree_epochs);
        out.prune_start_epoch = s.prune_start_epoch.unwrap_or(out.prune_start_epoch);
        out.prunes_per_epoch = s.prunes_per_epoch.unwrap_or(out.prunes_per_epoch);
        out.target_leaves = s.target_leaves.unwrap_or(out.target_leaves);
        out.batch_size = s.batch_size.unwrap_or(out.batch_size);
        out.eval_every = s.eval_every.unwrap_or(out.eval_every);
        out.optimizer = s.optimizer.unwrap_or(out.optimizer);
        out.seed = self.seed;
        out
    }

    pub fn loss(&self) -> LossConfig {
        let d = LossConfig::for_depth(self.tree.depth);
        let l = &self.loss;
        LossConfig {
            beta1: l.beta1.unwrap_or(d.beta1),
            beta2: l.beta2.unwrap_or(d.beta2),
            temperature: l.temperature.unwrap_or(d.temperature),
            level_range: l.level_range.unwrap_or(d.level_range),
            epsilon: l.epsilon.unwrap_or(d.epsilon),
        }
    }

    pub fn policy(&self, shape: InputShape) -> AugmentationPolicy {
        self.augmentation
            .clone()
            .unwrap_or_else(|| AugmentationPolicy::default_for(shape))
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`]: a set root
    /// replaces the base of relative directories and the parent of
    /// absolute ones.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }
}

/// See [`RunConfig::output_dir`].
pub fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if dir.is_absolute() => root.join(dir.file_name().unwrap_or_default()),
        Some(root) => root.join(dir),
        None => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"
seed = 3

[dataset]
source = "synthetic-gaussians"
components = 4
points = 400
dim = 16

[encoder]
architecture = "mlp-small"
embed_dim = 32

[tree]
depth = 3

[schedule]
profile = "desk"
target_leaves = 4
batch_size = 64

[output]
dir = "runs/blobs"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::parse(BLOBS).unwrap();
        let s = cfg.schedule();
        assert_eq!((s.pretrain_epochs, s.tree_epochs, s.batch_size, s.target_leaves, s.seed), (30, 30, 64, 4, 3));
        assert_eq!(cfg.loss().beta1, 0.125);
        assert_eq!(cfg.policy(InputShape::Vector { dim: 16 }), AugmentationPolicy::gaussian_noise(0.1));
    }

    fn err_field(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values_naming_the_field() {
        assert_eq!(err_field(&BLOBS.replace("target_leaves = 4", "target_leaves = 9")), "schedule.target_leaves");
        assert_eq!(err_field(&BLOBS.replace("depth = 3", "depth = 0")), "tree.depth");
        assert_eq!(err_field(&BLOBS.replace("seed = 3", "seed = 3\nbogus = 1")), "bogus");
        assert_eq!(
            err_field(&BLOBS.replace("embed_dim = 32", "embed_dim = 32\ncontrast = { output_dim = 8 }")),
            "encoder.contrast.output_dim"
        );
        assert_eq!(
            err_field(&BLOBS.replace("mlp-small", "cnn-small")),
            "encoder.architecture"
        );
        assert_eq!(
            err_field(&format!("{BLOBS}\n[loss]\ntemperature = 0.0\n")),
            "loss.temperature"
        );
    }

    #[test]
    fn missing_dataset_path_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let text = BLOBS.replace(
            "source = \"synthetic-gaussians\"\ncomponents = 4\npoints = 400\ndim = 16",
            "source = \"idx-grayscale\"\nfiles = [{ images = \"nope.gz\", labels = \"nope-labels.gz\" }]",
        );
        let text = text.replace("mlp-small", "cnn-small");
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        match RunConfig::load(&path) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "dataset.files.images");
                assert!(message.contains("nope.gz"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_root_override() {
        assert_eq!(resolve_output(Path::new("runs/a"), None), PathBuf::from("runs/a"));
        assert_eq!(resolve_output(Path::new("runs/a"), Some("/tmp/x".into())), PathBuf::from("/tmp/x/runs/a"));
        assert_eq!(resolve_output(Path::new("/data/runs/a"), Some("/tmp/x".into())), PathBuf::from("/tmp/x/a"));
    }
}
