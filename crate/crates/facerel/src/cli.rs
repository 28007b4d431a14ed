//! Command-line driver: one stage per invocation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use facerel_core::bridge::ClusterTree;
use facerel_core::data::{Sample, RELATIONS};
use facerel_core::metrics::{smooth_profile, TraitProfile, TraitReport};
use facerel_core::relation::RelationModel;
use facerel_core::synth::{synth_generate, video_sequence, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::ablation::{ablation_table, run_ablation};
use crate::artifacts::{record_path, run_record, Inputs, Outputs};
use crate::config::RunConfig;
use crate::error::{RunError, RunResult};
use crate::formats::{decode_bank, encode_bank, Checkpoint};
use crate::manifest::check_disjoint;
use crate::pipeline::{
    attr_examples, build_bridge, epoch_line, gradcheck, load_attributes, load_pairs, monitor_slice, pair_examples, predict_pairs,
    report_lines, report_table, run_pretrain, run_relation, write_synth, GRADCHECK_TOLERANCE,
};

#[derive(Debug, Parser)]
#[command(name = "facerel", version, about = "Pairwise social-relation prediction from faces")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

fn comma_list(s: &str) -> Result<Vec<PathBuf>, String> {
    let v: Vec<PathBuf> = s.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if v.is_empty() {
        return Err("expected at least one path".into());
    }
    Ok(v)
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic attribute corpora and relation pairs.
    SynthData {
        /// Generator spec (TOML); the default generator otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frames of the synthetic video sequence.
        #[arg(long, default_value_t = 60)]
        video_frames: usize,
    },
    /// Cluster face shapes and store the template bank.
    BuildBridge {
        #[arg(long, value_parser = comma_list)]
        corpus: Vec<Vec<PathBuf>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the attribute network on the attribute corpora.
    Pretrain {
        #[arg(long, value_parser = comma_list)]
        manifests: Vec<Vec<PathBuf>>,
        #[arg(long)]
        bridge: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the relation network on labelled pairs.
    TrainRelation {
        #[arg(long)]
        pairs: PathBuf,
        /// Attribute checkpoint for the trunk.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        bridge: Option<PathBuf>,
        /// Pairs scored after every epoch.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relation probabilities for every pair of a manifest.
    Predict {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bridge: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Balanced accuracy of predictions against the manifest labels.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Line-delimited report; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Raw and smoothed per-frame trait probabilities of a video manifest.
    ProfileVideo {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bridge: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Train every ablation cell on a synthetic dataset directory.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Prediction record written by `predict` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub pair: usize,
    pub image: String,
    pub probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    frame: u64,
    #[serde(rename = "trait")]
    name: &'a str,
    raw_p: f64,
    smoothed_p: f64,
}

struct Stage {
    command: &'static str,
    cfg: RunConfig,
    outputs: Outputs,
    inputs: Inputs,
    paths: BTreeMap<String, String>,
}

impl Stage {
    fn path(&mut self, key: &str, p: &Path) {
        self.paths.insert(key.to_string(), p.display().to_string());
    }

    /// Writes a primary artifact and its run record.
    fn emit(&self, resolved: &Path, bytes: &[u8]) -> RunResult<()> {
        self.outputs.write(resolved, bytes)?;
        self.record(resolved)
    }

    fn record(&self, resolved: &Path) -> RunResult<()> {
        let rec = run_record(self.command, &self.paths, &self.inputs, &self.cfg)?;
        self.outputs.write(&record_path(resolved), rec.as_bytes())
    }
}

fn load_config(common: &Common) -> RunResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_bank(path: &Path, inputs: &mut Inputs) -> RunResult<ClusterTree> {
    decode_bank(&inputs.read(path)?).map_err(|e| match e {
        RunError::Validation(m) => RunError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The bank when the bridge is switched on; refuses a mismatched request.
fn bank_for(enabled: bool, path: Option<&Path>, inputs: &mut Inputs) -> RunResult<Option<ClusterTree>> {
    match (enabled, path) {
        (true, Some(p)) => load_bank(p, inputs).map(Some),
        (false, None) => Ok(None),
        (true, None) => Err(RunError::validation("the bridge is switched on but no --bridge bank was given")),
        (false, Some(_)) => Err(RunError::validation("--bridge was given but switches.bridge is off")),
    }
}

fn load_checkpoint(path: &Path, inputs: &mut Inputs) -> RunResult<Checkpoint> {
    Checkpoint::decode(&inputs.read(path)?).map_err(|e| match e {
        RunError::Validation(m) => RunError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_relation_model(path: &Path, inputs: &mut Inputs) -> RunResult<RelationModel> {
    match load_checkpoint(path, inputs)? {
        Checkpoint::Relation(m) => Ok(m),
        other => Err(RunError::validation(format!("{}: expected a relation checkpoint, found {}", path.display(), other.kind()))),
    }
}

fn load_corpora(paths: &[PathBuf], inputs: &mut Inputs) -> RunResult<Vec<Sample>> {
    let mut samples = Vec::new();
    for p in paths {
        samples.extend(load_attributes(p, inputs)?);
    }
    if samples.is_empty() {
        return Err(RunError::validation("the attribute manifests hold no faces"));
    }
    Ok(samples)
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(&it).expect("plain data"));
        s.push('\n');
    }
    s
}

/// Probabilities of every pair of `pairs` under `model`.
fn score_pairs(stage: &mut Stage, pairs: &Path, model: &Path, bridge: Option<&Path>) -> RunResult<(crate::manifest::PairManifest, Vec<Vec<f64>>)> {
    let model = load_relation_model(model, &mut stage.inputs)?;
    let tree = bank_for(model.config.switches.bridge, bridge, &mut stage.inputs)?;
    let crop = model.config.network.input[1];
    let (manifest, samples) = load_pairs(pairs, crop, &mut stage.inputs)?;
    let examples = pair_examples(&samples, tree.as_ref(), model.config.network.bridge_dim)?;
    Ok((manifest, predict_pairs(&model, &examples)?))
}

fn log_epoch(line: String, log: &mut String) {
    eprintln!("{line}");
    log.push_str(&line);
    log.push('\n');
}

pub fn run(cli: Cli) -> RunResult<i32> {
    let cfg = load_config(&cli.common)?;
    let outputs = Outputs::from_env(cli.common.force);
    let mut stage = Stage {
        command: "",
        cfg,
        outputs,
        inputs: Inputs::default(),
        paths: BTreeMap::new(),
    };
    if let Some(c) = &cli.common.config {
        stage.inputs.read(c)?;
    }
    match cli.command {
        Command::SynthData { spec, out, video_frames } => {
            stage.command = "synth-data";
            let spec = match &spec {
                Some(p) => {
                    let text = stage.inputs.read_string(p)?;
                    toml::from_str::<SynthSpec>(&text).map_err(|e| RunError::validation(format!("{}: {e}", p.display())))?
                }
                None => SynthSpec::default(),
            };
            spec.validate()?;
            let dir = stage.outputs.resolve(&out);
            stage.path("out", &dir);
            let generated = synth_generate(&spec, stage.cfg.seed)?;
            let video = video_sequence(&spec, video_frames, stage.cfg.seed.wrapping_add(1))?;
            let outputs = stage.outputs.clone();
            let written = write_synth(&generated, &video, |rel, bytes| {
                let p = outputs.claim(&dir.join(rel))?;
                outputs.write(&p, bytes)
            })?;
            let spec_path = stage.outputs.claim(&dir.join("spec.toml"))?;
            let spec_text = toml::to_string(&spec).map_err(|e| RunError::validation(format!("spec: {e}")))?;
            stage.emit(&spec_path, spec_text.as_bytes())?;
            println!("wrote {} files under {}", written.len() + 1, dir.display());
        }
        Command::BuildBridge { corpus, out } => {
            stage.command = "build-bridge";
            let corpus: Vec<PathBuf> = corpus.into_iter().flatten().collect();
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let samples = load_corpora(&corpus, &mut stage.inputs)?;
            let tree = build_bridge(&samples, stage.cfg.bridge, stage.cfg.seed)?;
            stage.emit(&out, &encode_bank(&tree))?;
            println!("template bank: {} faces, descriptor length {}", samples.len(), tree.descriptor_len());
        }
        Command::Pretrain { manifests, bridge, out } => {
            stage.command = "pretrain";
            let manifests: Vec<PathBuf> = manifests.into_iter().flatten().collect();
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let tree = bank_for(stage.cfg.switches.bridge, bridge.as_deref(), &mut stage.inputs)?;
            let samples = load_corpora(&manifests, &mut stage.inputs)?;
            let train = attr_examples(&samples, tree.as_ref(), stage.cfg.bridge_dim())?;
            let mut log = String::new();
            let result = run_pretrain(&stage.cfg, &train, &monitor_slice(&train), |r| log_epoch(epoch_line(r), &mut log))?;
            stage.outputs.write(&with_suffix(&out, ".log.jsonl"), log.as_bytes())?;
            let (net, _) = result?;
            stage.emit(&out, &Checkpoint::Attribute(net).encode())?;
        }
        Command::TrainRelation {
            pairs,
            init,
            bridge,
            heldout,
            out,
        } => {
            stage.command = "train-relation";
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let init = match &init {
                Some(p) => match load_checkpoint(p, &mut stage.inputs)? {
                    Checkpoint::Attribute(net) => Some(net),
                    other => {
                        return Err(RunError::validation(format!(
                            "{}: expected an attribute checkpoint, found {}",
                            p.display(),
                            other.kind()
                        )))
                    }
                },
                None => None,
            };
            let tree = bank_for(stage.cfg.switches.bridge, bridge.as_deref(), &mut stage.inputs)?;
            let crop = stage.cfg.network_profile()?.network.input[1];
            let dim = stage.cfg.bridge_dim();
            let (train_manifest, train) = load_pairs(&pairs, crop, &mut stage.inputs)?;
            let train = pair_examples(&train, tree.as_ref(), dim)?;
            let held = match &heldout {
                Some(p) => {
                    let (m, h) = load_pairs(p, crop, &mut stage.inputs)?;
                    check_disjoint(&train_manifest, &m)?;
                    pair_examples(&h, tree.as_ref(), dim)?
                }
                None => Vec::new(),
            };
            let mut log = String::new();
            let result = run_relation(&stage.cfg, init.as_ref(), &train, &held, |r| log_epoch(epoch_line(r), &mut log))?;
            stage.outputs.write(&with_suffix(&out, ".log.jsonl"), log.as_bytes())?;
            let (model, _) = result?;
            stage.emit(&out, &Checkpoint::Relation(model).encode())?;
        }
        Command::Predict { pairs, model, bridge, out } => {
            stage.command = "predict";
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let (manifest, probs) = score_pairs(&mut stage, &pairs, &model, bridge.as_deref())?;
            let lines = manifest.records.iter().zip(probs).enumerate().map(|(i, (r, p))| PredictionLine {
                pair: i,
                image: r.image.display().to_string(),
                probabilities: p,
            });
            stage.emit(&out, jsonl(lines).as_bytes())?;
        }
        Command::Eval { pairs, preds, out } => {
            stage.command = "eval";
            let out = out.map(|o| stage.outputs.claim(&o)).transpose()?;
            let manifest = crate::pipeline::read_pair_manifest(&pairs, &mut stage.inputs)?;
            let text = stage.inputs.read_string(&preds)?;
            let lines = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str::<PredictionLine>(l)
                        .map_err(|e| RunError::validation(format!("{}:{}: {e}", preds.display(), i + 1)))
                })
                .collect::<RunResult<Vec<_>>>()?;
            if lines.len() != manifest.records.len() {
                return Err(RunError::validation(format!(
                    "{} holds {} predictions for {} pairs",
                    preds.display(),
                    lines.len(),
                    manifest.records.len()
                )));
            }
            for (i, (l, r)) in lines.iter().zip(&manifest.records).enumerate() {
                if l.pair != i || l.image != r.image.display().to_string() {
                    return Err(RunError::validation(format!("prediction {i} does not match pair {i} of the manifest")));
                }
            }
            let probs: Vec<Vec<f64>> = lines.into_iter().map(|l| l.probabilities).collect();
            let labels: Vec<Vec<bool>> = manifest.records.iter().map(|r| r.relations.to_vec()).collect();
            let report = TraitReport::from_binary(&RELATIONS, &probs, &labels, stage.cfg.threshold)?;
            print!("{}", report_table(&report));
            if let Some(out) = out {
                stage.path("out", &out);
                stage.emit(&out, report_lines(&report).as_bytes())?;
            }
        }
        Command::ProfileVideo { pairs, model, bridge, out } => {
            stage.command = "profile-video";
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let (_, probs) = score_pairs(&mut stage, &pairs, &model, bridge.as_deref())?;
            let frames: Vec<u64> = (0..probs.len() as u64).collect();
            let mut text = String::new();
            for (t, name) in RELATIONS.iter().enumerate() {
                let raw = TraitProfile::new(frames.clone(), probs.iter().map(|p| p[t]).collect())?;
                let smooth = smooth_profile(&raw, stage.cfg.smoothing_window)?;
                text.push_str(&jsonl(frames.iter().enumerate().map(|(i, &frame)| ProfileLine {
                    frame,
                    name,
                    raw_p: raw.probabilities[i],
                    smoothed_p: smooth.probabilities[i],
                })));
            }
            stage.emit(&out, text.as_bytes())?;
        }
        Command::Gradcheck { profile, epsilon } => {
            let profile = profile.unwrap_or_else(|| stage.cfg.profile.clone());
            let r = gradcheck(&profile, stage.cfg.bridge_dim(), stage.cfg.seed, epsilon)?;
            let worst = r.attribute.max_rel_error.max(r.relation.max_rel_error);
            println!(
                "attribute network: max relative error {:.3e} ({} at {})",
                r.attribute.max_rel_error, r.attribute.worst_param, r.attribute.worst_index
            );
            println!(
                "relation network:  max relative error {:.3e} ({} at {})",
                r.relation.max_rel_error, r.relation.worst_param, r.relation.worst_index
            );
            println!("max relative error {worst:.3e}");
            if !(worst < GRADCHECK_TOLERANCE) {
                return Err(RunError::Numerical(format!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}")));
            }
        }
        Command::Ablation { data, out } => {
            stage.command = "ablation";
            let out = stage.outputs.claim(&out)?;
            stage.path("out", &out);
            let spec_text = stage.inputs.read_string(&data.join("spec.toml"))?;
            let spec: SynthSpec = toml::from_str(&spec_text).map_err(|e| RunError::validation(format!("spec.toml: {e}")))?;
            let corpora: Vec<PathBuf> = crate::pipeline::corpus_manifests(&spec).iter().map(|m| data.join(m)).collect();
            let samples = load_corpora(&corpora, &mut stage.inputs)?;
            let crop = stage.cfg.network_profile()?.network.input[1];
            let (train_m, train) = load_pairs(&data.join("train.txt"), crop, &mut stage.inputs)?;
            let (test_m, test) = load_pairs(&data.join("test.txt"), crop, &mut stage.inputs)?;
            check_disjoint(&train_m, &test_m)?;
            let cells = run_ablation(&stage.cfg, &samples, &train, &test, |m| eprintln!("{m}"))?;
            let table = ablation_table(&cells);
            print!("{table}");
            stage.outputs.write(&with_suffix(&out, ".jsonl"), jsonl(&cells).as_bytes())?;
            stage.emit(&out, table.as_bytes())?;
        }
    }
    Ok(0)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Parses `args`, runs the stage and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
