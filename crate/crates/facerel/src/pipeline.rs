//! Stage logic shared by the command-line driver, the ablation suite and the
//! tests: loading datasets from manifests, building examples and training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facerel_core::attribute::{pretrain, AttrExample, AttrObjective, AttributeNet};
use facerel_core::bridge::{BridgeConfig, ClusterTree, Face};
use facerel_core::data::{pair_spatial_cues, PairSample, Sample, NUM_ATTRIBUTES};
use facerel_core::gradcheck::{finite_diff_check, GradCheckReport};
use facerel_core::image::crop_face;
use facerel_core::metrics::TraitReport;
use facerel_core::network::Profile;
use facerel_core::relation::{train_relation, PairExample, RelObjective, RelationConfig, RelationModel, RelationSwitches};
use facerel_core::synth::{SynthOutput, SynthPair, SynthSpec};
use facerel_core::train::{EpochRecord, TrainFailure, TrainingLog};
use facerel_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::Inputs;
use crate::config::RunConfig;
use crate::error::{RunError, RunResult};
use crate::images::{decode_landmarks, decode_pgm, encode_landmarks, encode_pgm};
use crate::manifest::{resolve, AttributeManifest, AttributeRecord, PairManifest, PairRecord, Split};

fn manifest_error(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::validation(format!("{}: {e}", path.display()))
}

pub fn read_attribute_manifest(path: &Path, inputs: &mut Inputs) -> RunResult<AttributeManifest> {
    AttributeManifest::parse(&inputs.read_string(path)?).map_err(|e| manifest_error(path, e))
}

pub fn read_pair_manifest(path: &Path, inputs: &mut Inputs) -> RunResult<PairManifest> {
    PairManifest::parse(&inputs.read_string(path)?).map_err(|e| manifest_error(path, e))
}

/// Loads every face of an attribute manifest; missing labels stay missing.
pub fn load_attributes(path: &Path, inputs: &mut Inputs) -> RunResult<Vec<Sample>> {
    let manifest = read_attribute_manifest(path, inputs)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let img_path = resolve(path, &r.image);
            let image = decode_pgm(&inputs.read(&img_path)?).map_err(|e| manifest_error(&img_path, e))?;
            let lm_path = resolve(path, &r.landmarks);
            let landmarks = decode_landmarks(&inputs.read_string(&lm_path)?).map_err(|e| manifest_error(&lm_path, e))?;
            Ok(Sample::new(image.to_tensor(), landmarks, r.labels.clone(), r.dataset_id.clone())?)
        })
        .collect()
}

/// Loads a pair manifest and cuts both face crops out of each scene.
pub fn load_pairs(path: &Path, crop: usize, inputs: &mut Inputs) -> RunResult<(PairManifest, Vec<PairSample>)> {
    let manifest = read_pair_manifest(path, inputs)?;
    let pairs = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let img_path = resolve(path, &r.image);
            let scene = decode_pgm(&inputs.read(&img_path)?).map_err(|e| manifest_error(&img_path, e))?;
            let dims = (scene.width, scene.height);
            let cut = |b| crop_face(&scene, b, crop).map_err(|e| manifest_error(path, format!("pair {i}: {e}")));
            Ok(PairSample::ordered(cut(&r.left)?, r.left, cut(&r.right)?, r.right, dims, r.relations)?)
        })
        .collect::<RunResult<Vec<_>>>()?;
    Ok((manifest, pairs))
}

pub fn build_bridge(samples: &[Sample], config: BridgeConfig, seed: u64) -> RunResult<ClusterTree> {
    let faces: Vec<Face> = samples
        .iter()
        .map(|s| Face {
            landmarks: &s.landmarks,
            image: &s.image,
        })
        .collect();
    Ok(ClusterTree::build(&faces, config, seed)?.0)
}

/// The standardized descriptor of `image`, or zeros without a bank.
pub fn bridge_input(tree: Option<&ClusterTree>, image: &Tensor, dim: usize) -> RunResult<Vec<f64>> {
    match tree {
        Some(t) => {
            if t.descriptor_len() != dim {
                return Err(RunError::validation(format!(
                    "template bank emits {} entries but the network expects {dim}",
                    t.descriptor_len()
                )));
            }
            Ok(t.network_input(image)?)
        }
        None => Ok(vec![0.0; dim]),
    }
}

pub fn attr_examples(samples: &[Sample], tree: Option<&ClusterTree>, dim: usize) -> RunResult<Vec<AttrExample>> {
    samples
        .iter()
        .map(|s| {
            Ok(AttrExample {
                image: s.image.clone(),
                bridge: bridge_input(tree, &s.image, dim)?,
                labels: s.labels.clone(),
            })
        })
        .collect()
}

pub fn pair_examples(pairs: &[PairSample], tree: Option<&ClusterTree>, dim: usize) -> RunResult<Vec<PairExample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairExample {
                bridge_left: bridge_input(tree, &p.left_face, dim)?,
                bridge_right: bridge_input(tree, &p.right_face, dim)?,
                cues: pair_spatial_cues(p)?,
                labels: p.relations,
                left: p.left_face.clone(),
                right: p.right_face.clone(),
            })
        })
        .collect()
}

/// A stage that stopped on a numerical failure, with the model restored to
/// its last good state.
pub struct Diverged<M> {
    pub failure: TrainFailure,
    pub model: M,
}

impl<M> From<Diverged<M>> for RunError {
    fn from(d: Diverged<M>) -> Self {
        RunError::Numerical(format!("epoch {}: {}", d.failure.epoch, d.failure.error))
    }
}

pub fn run_pretrain(
    cfg: &RunConfig,
    train: &[AttrExample],
    validation: &[AttrExample],
    on_epoch: impl FnMut(&EpochRecord),
) -> RunResult<Result<(AttributeNet, TrainingLog), Diverged<AttributeNet>>> {
    let profile = cfg.network_profile()?;
    let mut net = AttributeNet::new(profile.network, cfg.seed)?;
    let hyper = cfg.pretrain.to_hyper(cfg.seed);
    hyper.validate()?;
    Ok(match pretrain(&mut net, train, validation, &hyper, on_epoch) {
        Ok(log) => Ok((net, log)),
        Err(failure) => Err(Diverged { failure, model: net }),
    })
}

/// Relation model for `cfg`: trunk from `init` when pre-training is switched
/// on, otherwise freshly initialized.
pub fn relation_model(cfg: &RunConfig, init: Option<&AttributeNet>, seed: u64) -> RunResult<RelationModel> {
    let rc = cfg.relation_config()?;
    match (cfg.switches.pretrained, init) {
        (true, Some(net)) => Ok(RelationModel::from_pretrained(rc, net, seed)?),
        (false, None) => Ok(RelationModel::new(rc, seed)?),
        (true, None) => Err(RunError::validation("switches.pretrained is set but no attribute checkpoint was given")),
        (false, Some(_)) => Err(RunError::validation("an attribute checkpoint was given but switches.pretrained is off")),
    }
}

pub fn run_relation(
    cfg: &RunConfig,
    init: Option<&AttributeNet>,
    train: &[PairExample],
    heldout: &[PairExample],
    on_epoch: impl FnMut(&EpochRecord),
) -> RunResult<Result<(RelationModel, TrainingLog), Diverged<RelationModel>>> {
    let mut model = relation_model(cfg, init, cfg.seed)?;
    let hyper = cfg.relation.to_hyper(cfg.seed);
    hyper.validate()?;
    Ok(match train_relation(&mut model, train, heldout, &hyper, cfg.rebalance, on_epoch) {
        Ok(log) => Ok((model, log)),
        Err(failure) => Err(Diverged { failure, model }),
    })
}

pub fn predict_pairs(model: &RelationModel, examples: &[PairExample]) -> RunResult<Vec<Vec<f64>>> {
    examples.iter().map(|e| Ok(model.predict(e)?)).collect()
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    lr: f64,
    loss: f64,
    balanced_accuracy: Option<BTreeMap<&'a str, Option<f64>>>,
    mean_balanced_accuracy: Option<f64>,
}

/// One JSON line per epoch: loss and per-trait balanced accuracy.
pub fn epoch_line(r: &EpochRecord) -> String {
    let line = EpochLine {
        epoch: r.epoch,
        lr: r.lr,
        loss: r.loss,
        balanced_accuracy: r
            .validation
            .as_ref()
            .map(|v| v.rows.iter().map(|row| (row.name.as_str(), row.balanced_accuracy)).collect()),
        mean_balanced_accuracy: r.validation.as_ref().and_then(|v| v.mean),
    };
    serde_json::to_string(&line).expect("plain data")
}

/// Fixed-width text table of a report.
pub fn report_table(r: &TraitReport) -> String {
    let mut s = format!("{:<16} {:>6} {:>6} {:>6} {:>6} {:>9}\n", "trait", "N_p", "N_n", "n_p", "n_n", "bal.acc");
    for row in &r.rows {
        let c = row.counts;
        let ba = row.balanced_accuracy.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>9}\n",
            row.name, c.positives, c.negatives, c.true_positives, c.true_negatives, ba
        ));
    }
    let mean = r.mean.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    s.push_str(&format!("{:<16} {:>38}\n", "mean", mean));
    s
}

/// Line-delimited report records: one per trait, then the mean.
pub fn report_lines(r: &TraitReport) -> String {
    let mut s = String::new();
    for row in &r.rows {
        let c = row.counts;
        let v = serde_json::json!({
            "trait": row.name,
            "positives": c.positives,
            "negatives": c.negatives,
            "true_positives": c.true_positives,
            "true_negatives": c.true_negatives,
            "balanced_accuracy": row.balanced_accuracy,
        });
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s.push_str(&serde_json::json!({ "threshold": r.threshold, "mean": r.mean }).to_string());
    s.push('\n');
    s
}

/// Maximum relative gradient errors of the attribute network and of the
/// two-branch relation graph at a random point of `profile`.
pub struct GradCheckResult {
    pub attribute: GradCheckReport,
    pub relation: GradCheckReport,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(profile: &str, bridge_dim: usize, seed: u64, epsilon: f64) -> RunResult<GradCheckResult> {
    let p = Profile::by_name(profile, bridge_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = p.network.input;
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[c, h, w], |_| rng.random::<f64>());
    let bridge = |rng: &mut ChaCha8Rng| (0..bridge_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<_>>();
    let attr_ex: Vec<AttrExample> = (0..2)
        .map(|_| AttrExample {
            image: image(&mut rng),
            bridge: bridge(&mut rng),
            labels: (0..NUM_ATTRIBUTES)
                .map(|_| match rng.random_range(0..3) {
                    0 => None,
                    k => Some(k == 1),
                })
                .collect(),
        })
        .collect();
    let mut net = AttributeNet::new(p.network.clone(), seed)?;
    // heads at a larger scale so head and trunk gradients are well above round-off
    for param in net.params.iter_mut().filter(|q| q.name.starts_with("attr.")) {
        param.tensor.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    }
    let lambda = 1e-3;
    let attribute = finite_diff_check(
        &AttrObjective {
            spec: &p.network,
            examples: &attr_ex,
            lambda,
        },
        &net.params,
        epsilon,
    )?;
    let config = RelationConfig {
        network: p.network.clone(),
        projection_dim: p.projection_dim,
        switches: RelationSwitches::default(),
    };
    let mut cues = [0.0; 11];
    cues.iter_mut().for_each(|v| *v = rng.random::<f64>());
    let pair = PairExample {
        left: image(&mut rng),
        right: image(&mut rng),
        bridge_left: bridge(&mut rng),
        bridge_right: bridge(&mut rng),
        cues,
        labels: std::array::from_fn(|_| rng.random::<bool>()),
    };
    let mut model = RelationModel::from_pretrained(config.clone(), &net, seed)?;
    for param in model.params.iter_mut().filter(|q| q.name.starts_with("rel.")) {
        param.tensor.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    }
    let relation = finite_diff_check(
        &RelObjective {
            config: &config,
            examples: std::slice::from_ref(&pair),
            lambda,
        },
        &model.params,
        epsilon,
    )?;
    Ok(GradCheckResult { attribute, relation })
}

/// Writes a generated dataset as images, landmark files and manifests.
/// Returns the relative paths written, in order.
pub fn write_synth(
    out: &SynthOutput,
    video: &[SynthPair],
    mut write: impl FnMut(&Path, &[u8]) -> RunResult<()>,
) -> RunResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |p: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>| -> RunResult<()> {
        write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    for corpus in &out.corpora {
        let name = &corpus.spec.name;
        let mut manifest = AttributeManifest::default();
        for (i, f) in corpus.faces.iter().enumerate() {
            let img = PathBuf::from(format!("faces/{name}/{i:05}.pgm"));
            let lmk = PathBuf::from(format!("faces/{name}/{i:05}.lmk"));
            put(img.clone(), &encode_pgm(&f.image), &mut written)?;
            put(lmk.clone(), encode_landmarks(&f.sample.landmarks).as_bytes(), &mut written)?;
            manifest.records.push(AttributeRecord {
                image: img,
                landmarks: lmk,
                dataset_id: name.clone(),
                labels: f.sample.labels.clone(),
            });
        }
        put(PathBuf::from(format!("{name}.txt")), manifest.to_text().as_bytes(), &mut written)?;
    }
    for (split, pairs) in [(Split::Train, &out.train_pairs[..]), (Split::Test, &out.test_pairs[..]), (Split::Video, video)] {
        let mut manifest = PairManifest {
            split,
            records: Vec::with_capacity(pairs.len()),
        };
        for (i, p) in pairs.iter().enumerate() {
            let img = PathBuf::from(format!("scenes/{split}/{i:05}.pgm"));
            put(img.clone(), &encode_pgm(&p.scene), &mut written)?;
            manifest.records.push(PairRecord {
                image: img,
                left: p.left_box,
                right: p.right_box,
                relations: p.relations,
            });
        }
        put(PathBuf::from(format!("{split}.txt")), manifest.to_text().as_bytes(), &mut written)?;
    }
    Ok(written)
}

/// Attribute corpora names of the default generator, in manifest order.
pub fn corpus_manifests(spec: &SynthSpec) -> Vec<String> {
    spec.corpora.iter().map(|c| format!("{}.txt", c.name)).collect()
}

/// Pre-training monitoring slice: every eighth training example.
pub fn monitor_slice(train: &[AttrExample]) -> Vec<AttrExample> {
    train.iter().step_by(8).cloned().collect()
}
