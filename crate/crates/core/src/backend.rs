//! Detector backends: the "fine-tune on these annotations, then predict on
//! these images" contract the driver talks to.
//!
//! Three implementations ship: [`CommandBackend`] runs an external program
//! and exchanges files with it, [`FileBackend`] replays precomputed
//! prediction files, and [`SimulatorBackend`] wraps the synthetic detector.
//!
//! Command placeholders, substituted into each argv token after shell-style
//! splitting (no shell is involved):
//!
//! | placeholder    | value                                              |
//! |----------------|----------------------------------------------------|
//! | `{train_json}` | COCO file of the current training annotations      |
//! | `{pred_json}`  | where the predict command must write its results   |
//! | `{image_list}` | JSON array of `{id, file_name, width, height}`     |
//! | `{workdir}`    | the backend's working directory                    |
//! | `{round}`      | self-training round                                |
//! | `{epochs}`     | epochs hint                                        |
//! | `{reset}`      | `true` to restart from pretrained weights          |

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::boxes::PredictionSet;
use crate::coco::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::sim::{self, ClassSupervision, SimulatorConfig, World, WorldParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub train_annotations: Dataset,
    pub epochs_hint: u32,
    pub reset_weights: bool,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictRequest {
    pub image_ids: Vec<u64>,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Command,
    File,
    Simulator,
}

/// A detector the driver can fine-tune and query. One instance serves one
/// pipeline run; calls are never interleaved.
pub trait DetectorBackend: Send {
    fn kind(&self) -> BackendKind;

    fn train(&mut self, request: &TrainRequest) -> Result<()>;

    /// Raw predictions for the requested images. `images` is the image table
    /// the ids were checked against.
    fn predict(&mut self, request: &PredictRequest, images: &Dataset) -> Result<PredictionSet>;
}

/// Validate the request, then train.
pub fn backend_train(backend: &mut dyn DetectorBackend, request: &TrainRequest) -> Result<()> {
    request.train_annotations.check()?;
    backend.train(request)
}

/// Check every requested id against `images` before the backend sees the
/// request, and drop anything the backend returns for other images.
pub fn backend_predict(
    backend: &mut dyn DetectorBackend,
    request: &PredictRequest,
    images: &Dataset,
) -> Result<PredictionSet> {
    let known: HashSet<u64> = images.images.iter().map(|i| i.id).collect();
    if let Some(id) = request.image_ids.iter().find(|id| !known.contains(id)) {
        return Err(Error::UnresolvableReference(format!(
            "predict request names unknown image {id}"
        )));
    }
    let mut out = backend.predict(request, images)?;
    let wanted: HashSet<u64> = request.image_ids.iter().copied().collect();
    out.detections.retain(|d| wanted.contains(&d.image_id));
    out.round = request.round;
    Ok(out)
}

/// Replays prediction files; `pattern` has `{round}` substituted.
#[derive(Debug, Clone)]
pub struct FileBackend {
    pattern: String,
}

impl FileBackend {
    pub fn new(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
        }
    }

    pub fn path_for(&self, round: u32) -> PathBuf {
        PathBuf::from(self.pattern.replace("{round}", &round.to_string()))
    }
}

impl DetectorBackend for FileBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::File
    }

    fn train(&mut self, _request: &TrainRequest) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, request: &PredictRequest, _images: &Dataset) -> Result<PredictionSet> {
        let path = self.path_for(request.round);
        if !path.exists() {
            return Err(Error::MissingPredictionFile {
                round: request.round,
                path,
            });
        }
        PredictionSet::read(&path)
    }
}

fn default_timeout() -> u64 {
    24 * 60 * 60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSettings {
    /// Fine-tuning command; training is a no-op when absent.
    #[serde(default)]
    pub train: Option<String>,
    pub predict: String,
    /// Working directory; a fresh temporary directory when absent.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

/// Runs external programs, exchanging data through files in a per-round
/// directory under the working directory.
#[derive(Debug)]
pub struct CommandBackend {
    settings: CommandSettings,
    workdir: PathBuf,
    _temp: Option<tempfile::TempDir>,
    train_json: Option<PathBuf>,
    epochs: u32,
    reset: bool,
    predict_calls: BTreeMap<u32, u32>,
}

const STDERR_EXCERPT: usize = 2000;

impl CommandBackend {
    pub fn new(settings: CommandSettings) -> Result<Self> {
        let (workdir, temp) = match &settings.workdir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                (dir.clone(), None)
            }
            None => {
                let t = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        Ok(Self {
            settings,
            workdir,
            _temp: temp,
            train_json: None,
            epochs: 0,
            reset: true,
            predict_calls: BTreeMap::new(),
        })
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    fn round_dir(&self, round: u32) -> PathBuf {
        self.workdir.join(format!("round_{round}"))
    }

    fn run(&self, template: &str, vars: &[(&str, String)], log_dir: &Path, tag: &str) -> Result<()> {
        let tokens = shlex::split(template)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::InvalidConfig(format!("cannot parse command template {template:?}")))?;
        let argv: Vec<String> = tokens
            .iter()
            .map(|t| {
                vars.iter()
                    .fold(t.clone(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
            })
            .collect();

        std::fs::create_dir_all(log_dir).map_err(|e| Error::io(log_dir, e))?;
        let stdout_path = log_dir.join(format!("{tag}.stdout.log"));
        let stderr_path = log_dir.join(format!("{tag}.stderr.log"));
        let stdout = File::create(&stdout_path).map_err(|e| Error::io(&stdout_path, e))?;
        let stderr = File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;

        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(&self.workdir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| Error::BackendFailure {
                code: None,
                stderr: format!("failed to spawn {:?}: {e}", argv[0]),
            })?;

        let limit = Duration::from_secs(self.settings.timeout_secs);
        let status = match child.wait_timeout(limit).map_err(|e| Error::io(&argv[0], e))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Timeout(limit));
            }
        };
        if status.success() {
            return Ok(());
        }
        let captured = std::fs::read(&stderr_path).unwrap_or_default();
        let tail = &captured[captured.len().saturating_sub(STDERR_EXCERPT)..];
        Err(Error::BackendFailure {
            code: status.code(),
            stderr: String::from_utf8_lossy(tail).into_owned(),
        })
    }

    fn vars(&self, round: u32) -> Vec<(&'static str, String)> {
        vec![
            ("workdir", self.workdir.display().to_string()),
            ("round", round.to_string()),
            ("epochs", self.epochs.to_string()),
            ("reset", self.reset.to_string()),
            (
                "train_json",
                self.train_json
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
        ]
    }
}

#[derive(Serialize)]
struct ImageEntry<'a> {
    id: u64,
    file_name: &'a str,
    width: u32,
    height: u32,
}

impl<'a> From<&'a ImageRecord> for ImageEntry<'a> {
    fn from(i: &'a ImageRecord) -> Self {
        Self {
            id: i.id,
            file_name: &i.file_name,
            width: i.width,
            height: i.height,
        }
    }
}

impl DetectorBackend for CommandBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Command
    }

    fn train(&mut self, request: &TrainRequest) -> Result<()> {
        let dir = self.round_dir(request.round);
        let path = dir.join("train.json");
        write_atomic(&path, &request.train_annotations.to_json())?;
        self.train_json = Some(path);
        self.epochs = request.epochs_hint;
        self.reset = request.reset_weights;
        if let Some(template) = self.settings.train.clone() {
            self.run(&template, &self.vars(request.round), &dir, "train")?;
        }
        Ok(())
    }

    fn predict(&mut self, request: &PredictRequest, images: &Dataset) -> Result<PredictionSet> {
        let call = {
            let n = self.predict_calls.entry(request.round).or_insert(0);
            *n += 1;
            *n
        };
        let dir = self.round_dir(request.round).join(format!("predict_{call}"));
        let list: Vec<ImageEntry> = request
            .image_ids
            .iter()
            .filter_map(|id| images.image(*id))
            .map(ImageEntry::from)
            .collect();
        let image_list = dir.join("images.json");
        write_atomic(&image_list, &serde_json::to_vec(&list).expect("image list serializes"))?;
        let pred_json = dir.join("pred.json");
        let _ = std::fs::remove_file(&pred_json);

        let mut vars = self.vars(request.round);
        vars.push(("image_list", image_list.display().to_string()));
        vars.push(("pred_json", pred_json.display().to_string()));
        let template = self.settings.predict.clone();
        self.run(&template, &vars, &dir, "predict")?;

        if !pred_json.exists() {
            return Err(Error::BackendFailure {
                code: Some(0),
                stderr: format!("command exited 0 but did not write {}", pred_json.display()),
            });
        }
        PredictionSet::read(&pred_json)
    }
}

/// The synthetic detector. Training recomputes per-class supervision
/// against the world's hidden annotations; prediction samples from the
/// resulting quality. The simulator keeps no other state, so
/// `reset_weights` has no effect on it.
#[derive(Debug, Clone)]
pub struct SimulatorBackend {
    world: Arc<World>,
    config: SimulatorConfig,
    supervision: Option<BTreeMap<u64, ClassSupervision>>,
}

impl SimulatorBackend {
    pub fn new(world: Arc<World>, config: SimulatorConfig) -> Result<Self> {
        config.check()?;
        Ok(Self {
            world,
            config,
            supervision: None,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn coverage(&self) -> Option<BTreeMap<u64, f64>> {
        self.supervision
            .as_ref()
            .map(|s| s.iter().map(|(&c, v)| (c, v.coverage())).collect())
    }

    /// Per-class quality fed to the prediction model.
    pub fn quality(&self) -> Option<BTreeMap<u64, f64>> {
        self.supervision.as_ref().map(|s| {
            s.iter()
                .map(|(&c, v)| (c, v.quality(self.config.noise_penalty)))
                .collect()
        })
    }
}

impl DetectorBackend for SimulatorBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulator
    }

    fn train(&mut self, request: &TrainRequest) -> Result<()> {
        self.supervision = Some(sim::supervision(&request.train_annotations, &self.world.hidden_gt)?);
        Ok(())
    }

    fn predict(&mut self, request: &PredictRequest, _images: &Dataset) -> Result<PredictionSet> {
        let quality = self.quality().ok_or_else(|| Error::BackendFailure {
            code: None,
            stderr: "simulator asked to predict before any training".into(),
        })?;
        sim::simulate_predictions(&self.world, &quality, &self.config, &request.image_ids, request.round)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorSettings {
    /// Directory written by `simulate`; when absent the world is generated
    /// from `world`.
    pub world_dir: Option<PathBuf>,
    pub world: WorldParams,
    pub config: SimulatorConfig,
}

impl SimulatorSettings {
    pub fn load_world(&self) -> Result<World> {
        match &self.world_dir {
            Some(dir) => World::load(dir),
            None => self.world.build(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    Command(CommandSettings),
    File { pattern: String },
    Simulator(SimulatorSettings),
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        BackendDescriptor::Simulator(SimulatorSettings::default())
    }
}

impl BackendDescriptor {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendDescriptor::Command(_) => BackendKind::Command,
            BackendDescriptor::File { .. } => BackendKind::File,
            BackendDescriptor::Simulator(_) => BackendKind::Simulator,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            BackendDescriptor::Command(c) if c.predict.trim().is_empty() => {
                Err(Error::InvalidConfig("command backend needs a predict command".into()))
            }
            BackendDescriptor::File { pattern } if pattern.is_empty() => {
                Err(Error::InvalidConfig("file backend needs a path pattern".into()))
            }
            BackendDescriptor::Simulator(s) => s.config.check(),
            _ => Ok(()),
        }
    }

    /// Instantiate the backend. A simulator uses `world` when given,
    /// otherwise loads or generates its own, and is seeded with `seed`.
    pub fn build(&self, world: Option<Arc<World>>, seed: u64) -> Result<Box<dyn DetectorBackend>> {
        self.check()?;
        Ok(match self {
            BackendDescriptor::Command(c) => Box::new(CommandBackend::new(c.clone())?),
            BackendDescriptor::File { pattern } => Box::new(FileBackend::new(pattern.clone())),
            BackendDescriptor::Simulator(s) => {
                let world = match world {
                    Some(w) => w,
                    None => Arc::new(s.load_world()?),
                };
                Box::new(SimulatorBackend::new(world, SimulatorConfig { seed, ..s.config })?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Detection;
    use crate::coco::{AnnotationRecord, CategoryRecord};
    use crate::BBox;

    fn dataset() -> Dataset {
        Dataset::new(
            (1..=3).map(|i| ImageRecord::new(i, format!("{i}.jpg"), 64, 64)).collect(),
            vec![CategoryRecord::new(1, "car")],
            vec![AnnotationRecord::ground_truth(1, 1, 1, BBox::new(1., 1., 10., 10.))],
        )
    }

    fn train_req() -> TrainRequest {
        TrainRequest {
            train_annotations: dataset(),
            epochs_hint: 5,
            reset_weights: true,
            round: 1,
        }
    }

    #[test]
    fn file_backend_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let dets: Vec<Detection> = (0..7)
            .map(|i| Detection::new(1 + i % 3, 1, BBox::new(i as f64, 0., 5., 5.), 0.5))
            .collect();
        std::fs::write(dir.path().join("r1.json"), serde_json::to_vec(&dets).unwrap()).unwrap();
        let mut b = FileBackend::new(dir.path().join("r{round}.json").display().to_string());
        backend_train(&mut b, &train_req()).unwrap();
        let req = PredictRequest { image_ids: vec![1, 2, 3], round: 1 };
        let p = backend_predict(&mut b, &req, &dataset()).unwrap();
        assert_eq!(p.len(), 7);
        assert_eq!(p.round, 1);

        let only_one = PredictRequest { image_ids: vec![2], round: 1 };
        assert_eq!(backend_predict(&mut b, &only_one, &dataset()).unwrap().len(), 2);

        let missing = PredictRequest { image_ids: vec![1], round: 2 };
        assert!(matches!(
            backend_predict(&mut b, &missing, &dataset()),
            Err(Error::MissingPredictionFile { round: 2, .. })
        ));
    }

    #[test]
    fn unknown_image_rejected_before_backend() {
        struct Panics;
        impl DetectorBackend for Panics {
            fn kind(&self) -> BackendKind {
                BackendKind::File
            }
            fn train(&mut self, _: &TrainRequest) -> Result<()> {
                unreachable!()
            }
            fn predict(&mut self, _: &PredictRequest, _: &Dataset) -> Result<PredictionSet> {
                panic!("backend must not be invoked")
            }
        }
        let req = PredictRequest { image_ids: vec![1, 42], round: 1 };
        assert!(matches!(
            backend_predict(&mut Panics, &req, &dataset()),
            Err(Error::UnresolvableReference(_))
        ));
    }

    #[test]
    fn invalid_training_set_rejected() {
        let mut b = FileBackend::new("unused");
        let mut req = train_req();
        req.train_annotations.annotations[0].image_id = 99;
        assert!(backend_train(&mut b, &req).is_err());
    }

    #[test]
    fn simulator_full_truth_gives_full_coverage() {
        let world = Arc::new(WorldParams { n_images: 10, ..Default::default() }.build().unwrap());
        let mut b = SimulatorBackend::new(world.clone(), SimulatorConfig::default()).unwrap();
        let req = PredictRequest { image_ids: world.train_image_ids(), round: 1 };
        assert!(matches!(
            backend_predict(&mut b, &req, &world.hidden_gt),
            Err(Error::BackendFailure { .. })
        ));
        let train = TrainRequest { train_annotations: world.hidden_gt.clone(), ..train_req() };
        backend_train(&mut b, &train).unwrap();
        assert!(b.coverage().unwrap().values().all(|&c| c == 1.0));
        assert!(b.quality().unwrap().values().all(|&c| c == 1.0));
        assert!(!backend_predict(&mut b, &req, &world.hidden_gt).unwrap().is_empty());
    }

    #[test]
    fn descriptor_toml() {
        let d: BackendDescriptor = toml::from_str(
            r#"
            kind = "command"
            train = "python train.py {train_json}"
            predict = "python predict.py --out {pred_json}"
            "#,
        )
        .unwrap();
        match &d {
            BackendDescriptor::Command(c) => assert_eq!(c.timeout_secs, 86_400),
            other => panic!("{other:?}"),
        }
        let d: BackendDescriptor = toml::from_str("kind = \"file\"\npattern = \"p/{round}.json\"").unwrap();
        assert_eq!(d.kind(), BackendKind::File);
        let d: BackendDescriptor = toml::from_str("kind = \"simulator\"\n[config]\np_min = 0.2").unwrap();
        match d {
            BackendDescriptor::Simulator(s) => assert_eq!(s.config.p_min, 0.2),
            other => panic!("{other:?}"),
        }
    }
}
