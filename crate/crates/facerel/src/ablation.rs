//! The ablation table: {random, pretrained} init x {without, with} spatial
//! cues x {without, with} bridge, each cell trained over several seeds.

use facerel_core::attribute::AttributeNet;
use facerel_core::bridge::ClusterTree;
use facerel_core::data::{PairSample, Sample};
use facerel_core::metrics::TraitReport;
use facerel_core::relation::{relation_report, PairExample};
use serde::Serialize;

use crate::config::{RunConfig, Switches};
use crate::error::RunResult;
use crate::pipeline::{attr_examples, build_bridge, monitor_slice, pair_examples, run_pretrain, run_relation};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub init: &'static str,
    pub spatial: bool,
    pub bridge: bool,
    pub seeds: Vec<u64>,
    /// Held-out mean balanced accuracy per seed.
    pub scores: Vec<f64>,
    pub mean: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{} init, {}, {}",
            self.init,
            if self.spatial { "spatial cues" } else { "no spatial cues" },
            if self.bridge { "bridge" } else { "no bridge" }
        )
    }
}

/// Attribute network pre-trained on `samples` with the bridge on or off.
pub fn pretrain_variant(cfg: &RunConfig, samples: &[Sample], tree: Option<&ClusterTree>) -> RunResult<AttributeNet> {
    let train = attr_examples(samples, tree, cfg.bridge_dim())?;
    let (net, _) = run_pretrain(cfg, &train, &monitor_slice(&train), |_| {})??;
    Ok(net)
}

/// Trains one relation model per seed and scores it on `test`.
pub fn train_cell(
    cfg: &RunConfig,
    switches: Switches,
    init: Option<&AttributeNet>,
    train: &[PairExample],
    test: &[PairExample],
    seeds: &[u64],
) -> RunResult<Vec<TraitReport>> {
    seeds
        .iter()
        .map(|&seed| {
            let cell_cfg = RunConfig {
                seed,
                switches,
                ..cfg.clone()
            };
            let (model, _) = run_relation(&cell_cfg, init.filter(|_| switches.pretrained), train, &[], |_| {})??;
            Ok(relation_report(&model, test, cfg.threshold)?)
        })
        .collect()
}

pub fn run_ablation(
    cfg: &RunConfig,
    samples: &[Sample],
    train: &[PairSample],
    test: &[PairSample],
    mut progress: impl FnMut(&str),
) -> RunResult<Vec<Cell>> {
    let tree = build_bridge(samples, cfg.bridge, cfg.seed)?;
    progress("template bank built");
    let mut nets = Vec::new();
    let mut pairs = Vec::new();
    for bridge in [false, true] {
        let t = bridge.then_some(&tree);
        let pre_cfg = RunConfig {
            switches: Switches { bridge, ..cfg.switches },
            ..cfg.clone()
        };
        nets.push(pretrain_variant(&pre_cfg, samples, t)?);
        progress(&format!("pre-trained attribute network (bridge {})", if bridge { "on" } else { "off" }));
        pairs.push((pair_examples(train, t, cfg.bridge_dim())?, pair_examples(test, t, cfg.bridge_dim())?));
    }
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|s| cfg.seed + s).collect();
    let mut cells = Vec::new();
    for pretrained in [false, true] {
        for spatial in [false, true] {
            for bridge in [false, true] {
                let b = bridge as usize;
                let switches = Switches { bridge, spatial, pretrained };
                let reports = train_cell(cfg, switches, Some(&nets[b]), &pairs[b].0, &pairs[b].1, &seeds)?;
                let scores: Vec<f64> = reports.iter().map(|r| r.mean.unwrap_or(f64::NAN)).collect();
                let cell = Cell {
                    init: if pretrained { "pretrained" } else { "random" },
                    spatial,
                    bridge,
                    seeds: seeds.clone(),
                    mean: scores.iter().sum::<f64>() / scores.len() as f64,
                    scores,
                };
                progress(&format!("{}: {:.4}", cell.label(), cell.mean));
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub fn ablation_table(cells: &[Cell]) -> String {
    let mut s = format!("{:<36} {:>18} {:>18}\n", "variant", "no bridge", "bridge");
    for pair in cells.chunks(2) {
        let row = format!(
            "{} init, {}",
            pair[0].init,
            if pair[0].spatial { "spatial cues" } else { "no spatial cues" }
        );
        let fmt = |c: &Cell| format!("{:.4} (n={})", c.mean, c.scores.len());
        s.push_str(&format!("{row:<36} {:>18} {:>18}\n", fmt(&pair[0]), fmt(&pair[1])));
    }
    s
}
