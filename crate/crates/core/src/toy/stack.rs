//! Building the full toy stack (dataset, target, generator, evaluation
//! classifier) into a directory, reusing artifacts whose recorded hashes
//! still match.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::classifier::{train_eval_classifier, ClassifierTrainConfig, ClassifierTrainReport, EvalClassifier};
use crate::io::{sha256_file, sha256_hex, write_atomic, write_json};
use crate::seed::derive_seed;
use crate::toy::dataset::{build_dataset, Dataset, DatasetConfig};
use crate::toy::generator::{train_toy_generator, GeneratorTrainConfig, GeneratorTrainReport, ToyGenerator, ToyGeneratorConfig};
use crate::toy::vlm::{train_toy_vlm, ToyVlm, ToyVlmConfig, VlmTrainConfig, VlmTrainReport};

/// Everything that determines the built artifacts. The `seed` fields of the
/// training configs are replaced by seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyStackConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub vlm: ToyVlmConfig,
    pub vlm_train: VlmTrainConfig,
    pub generator: ToyGeneratorConfig,
    pub generator_train: GeneratorTrainConfig,
    pub classifier_train: ClassifierTrainConfig,
}

impl Default for ToyStackConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetConfig::default(),
            vlm: ToyVlmConfig::default(),
            vlm_train: VlmTrainConfig::default(),
            generator: ToyGeneratorConfig::default(),
            generator_train: GeneratorTrainConfig::default(),
            classifier_train: ClassifierTrainConfig::default(),
        }
    }
}

impl ToyStackConfig {
    /// Copy with component seeds filled in from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.vlm_train.seed = derive_seed(self.seed, "build/vlm");
        c.generator_train.seed = derive_seed(self.seed, "build/generator");
        c.classifier_train.seed = derive_seed(self.seed, "build/classifier");
        c
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.resolved()).expect("config serializes"))
    }
}

pub const VLM_FILE: &str = "vlm.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const RECORD_FILE: &str = "build.json";
pub const LOG_FILE: &str = "build.log";

/// Written last; its presence marks a complete build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub config_hash: String,
    pub config: ToyStackConfig,
    pub manifest_sha256: String,
    pub vlm_sha256: String,
    pub generator_sha256: String,
    pub classifier_sha256: String,
    pub vlm: VlmTrainReport,
    pub generator: GeneratorTrainReport,
    pub classifier: ClassifierTrainReport,
}

#[derive(Clone)]
pub struct ToyStack {
    pub dir: PathBuf,
    pub dataset: Arc<Dataset>,
    pub vlm: Arc<ToyVlm>,
    pub generator: Arc<ToyGenerator>,
    pub classifier: Arc<EvalClassifier>,
    pub record: BuildRecord,
    /// Whether anything was trained during this call.
    pub rebuilt: bool,
}

fn check_hash(path: &Path, expected: &str) -> Result<()> {
    let actual = sha256_file(path)?;
    if actual != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("hash {actual} does not match recorded {expected}; rerun with overwrite to rebuild"),
        });
    }
    Ok(())
}

/// Loads the build recorded in `dir`, verifying every artifact hash. Never
/// trains; a missing record or artifact is an error naming the path.
pub fn load_toy_stack(dir: &Path) -> Result<ToyStack> {
    let record_path = dir.join(RECORD_FILE);
    if !record_path.exists() {
        return Err(Error::Checkpoint {
            path: record_path,
            message: "no completed build found; run the build first".into(),
        });
    }
    let record: BuildRecord = serde_json::from_slice(&std::fs::read(&record_path)?).map_err(|e| Error::Checkpoint {
        path: record_path.clone(),
        message: e.to_string(),
    })?;
    for (file, expected) in [
        (dir.join("dataset").join("manifest.jsonl"), &record.manifest_sha256),
        (dir.join(VLM_FILE), &record.vlm_sha256),
        (dir.join(GENERATOR_FILE), &record.generator_sha256),
        (dir.join(CLASSIFIER_FILE), &record.classifier_sha256),
    ] {
        if !file.exists() {
            return Err(Error::Checkpoint {
                path: file,
                message: "artifact missing".into(),
            });
        }
        check_hash(&file, expected)?;
    }
    let dataset = Arc::new(build_dataset(&record.config.resolved().dataset)?);
    Ok(ToyStack {
        dir: dir.to_path_buf(),
        dataset,
        vlm: Arc::new(ToyVlm::load(&dir.join(VLM_FILE))?),
        generator: Arc::new(ToyGenerator::load(&dir.join(GENERATOR_FILE))?),
        classifier: Arc::new(EvalClassifier::load(&dir.join(CLASSIFIER_FILE))?),
        record,
        rebuilt: false,
    })
}

/// Loads a previous build in `dir` if its config hash matches, else trains
/// everything. A matching build whose files fail their hash check is an
/// error unless `overwrite` is set.
fn build_log(record: &BuildRecord) -> String {
    let flag = |under: bool| if under { " (under-trained)" } else { "" };
    let (v, g, c) = (&record.vlm, &record.generator, &record.classifier);
    format!(
        "config {}\n\
         vlm: {} epochs, token accuracy {:.4}, loss {:.6}{}\n\
         generator: {} epochs on {} images, held-out pixel error {:.4}, loss {:.6}{}\n\
         classifier: {} epochs, train accuracy {:.4}, loss {:.6}{}\n",
        record.config_hash,
        v.epochs_run,
        v.token_accuracy,
        v.final_loss,
        flag(v.under_trained),
        g.epochs_run,
        g.train_images,
        g.holdout_error,
        g.final_loss,
        flag(g.under_trained),
        c.epochs_run,
        c.train_accuracy,
        c.final_loss,
        flag(c.under_trained),
    )
}

pub fn build_toy_stack(config: &ToyStackConfig, dir: &Path, overwrite: bool) -> Result<ToyStack> {
    let resolved = config.resolved();
    let hash = config.hash();
    let record_path = dir.join(RECORD_FILE);

    if record_path.exists() {
        let record: BuildRecord = serde_json::from_slice(&std::fs::read(&record_path)?)?;
        if record.config_hash == hash {
            match load_toy_stack(dir) {
                Ok(stack) => {
                    log::info!("reusing toy stack in {}", dir.display());
                    return Ok(stack);
                }
                Err(e) if !overwrite => return Err(e),
                Err(e) => log::warn!("{e}; rebuilding"),
            }
        }
    }

    let dataset = Arc::new(build_dataset(&resolved.dataset)?);
    std::fs::create_dir_all(dir)?;
    let manifest = dataset.write(&dir.join("dataset"))?;

    log::info!("training toy VLM on {} private triples", dataset.private.len());
    let (vlm, vlm_report) = train_toy_vlm(
        resolved.vlm.clone(),
        Arc::clone(&dataset.vocab),
        &dataset.prompt,
        &dataset.private,
        &resolved.vlm_train,
    )?;
    let meta = serde_json::json!({ "stack_hash": hash });
    vlm.save(&dir.join(VLM_FILE), meta.clone())?;

    log::info!("training toy generator on {} public images", dataset.public.len());
    let public: Vec<_> = dataset.public.iter().map(|s| s.image.clone()).collect();
    let (generator, gen_report) = train_toy_generator(resolved.generator.clone(), &public, &resolved.generator_train)?;
    generator.save(&dir.join(GENERATOR_FILE), meta.clone())?;

    log::info!("training evaluation classifier");
    let private: Vec<_> = dataset.private.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u32> = dataset.private.iter().map(|s| s.identity_id).collect();
    let (classifier, clf_report) = train_eval_classifier(&private, &labels, &resolved.classifier_train)?;
    classifier.save(&dir.join(CLASSIFIER_FILE), meta)?;

    let record = BuildRecord {
        config_hash: hash,
        config: config.clone(),
        manifest_sha256: sha256_file(&manifest)?,
        vlm_sha256: sha256_file(&dir.join(VLM_FILE))?,
        generator_sha256: sha256_file(&dir.join(GENERATOR_FILE))?,
        classifier_sha256: sha256_file(&dir.join(CLASSIFIER_FILE))?,
        vlm: vlm_report,
        generator: gen_report,
        classifier: clf_report,
    };
    write_atomic(&dir.join(LOG_FILE), build_log(&record).as_bytes())?;
    write_json(&record_path, &record)?;
    Ok(ToyStack {
        dir: dir.to_path_buf(),
        dataset,
        vlm: Arc::new(vlm),
        generator: Arc::new(generator),
        classifier: Arc::new(classifier),
        record,
        rebuilt: true,
    })
}
