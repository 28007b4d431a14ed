//! End-to-end acceptance suite. Every check prints one `PASS`/`FAIL` line on
//! stderr (outside the harness capture) and then asserts.
//!
//! The checks share one CPU, so they take a lock and run one at a time; the
//! wall-clock budgets are measured without contention.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use facerel::ablation::{pretrain_variant, train_cell};
use facerel::config::{RunConfig, Switches};
use facerel::formats::{decode_bank, encode_bank, Checkpoint};
use facerel::pipeline::{attr_examples, build_bridge, pair_examples};
use facerel_core::attribute::{attr_report, AttrExample, AttrObjective, AttributeNet, HEAD_BIAS, HEAD_WEIGHT};
use facerel_core::bridge::{BridgeConfig, ClusterTree, Face};
use facerel_core::data::{AttributeGroup, PairSample, Sample, NUM_ATTRIBUTES};
use facerel_core::gradcheck::Objective;
use facerel_core::kmeans::kmeans;
use facerel_core::layers::{conv_forward, fc_forward, lrn_forward, maxpool_forward, LrnParams};
use facerel_core::metrics::{smooth_profile, ConfusionCounts, TraitProfile, TraitReport};
use facerel_core::network::{LayerSpec, NetworkSpec, Profile};
use facerel_core::params::ParameterSet;
use facerel_core::relation::{
    relation_backward, relation_forward, PairExample, RelationConfig, RelationModel, RelationSwitches, HEAD_BIAS as REL_HEAD_BIAS,
    HEAD_WEIGHT as REL_HEAD_WEIGHT, PROJ_BIAS, PROJ_WEIGHT,
};
use facerel_core::synth::{planted_pose_corpus, synth_generate, SynthSpec};
use facerel_core::train::Hyper;
use facerel_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

struct Verdict {
    number: usize,
    title: &'static str,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(number: usize, title: &'static str) -> Self {
        Self {
            number,
            title,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) {
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = if self.failures.is_empty() {
            self.notes.join("; ")
        } else {
            self.failures.join("; ")
        };
        let line = format!("\nacceptance {} [{}] {}: {}\n", self.number, status, self.title, detail);
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(self.failures.is_empty(), "{line}");
    }
}

fn desk_small(bridge_dim: usize) -> Profile {
    Profile::by_name("desk-small", bridge_dim).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, [c, h, w]: [usize; 3]) -> Tensor {
    Tensor::from_fn(&[c, h, w], |_| rng.random::<f64>())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn random_pair(rng: &mut ChaCha8Rng, input: [usize; 3], bridge_dim: usize) -> PairExample {
    PairExample {
        left: random_image(rng, input),
        right: random_image(rng, input),
        bridge_left: random_vec(rng, bridge_dim),
        bridge_right: random_vec(rng, bridge_dim),
        cues: std::array::from_fn(|_| rng.random::<f64>()),
        labels: std::array::from_fn(|_| rng.random::<bool>()),
    }
}

#[test]
fn gradient_integrity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(1, "gradient integrity");
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_facerel"))
        .args(["gradcheck", "--profile", "desk-small", "--seed", "1"])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|s| s.trim().parse::<f64>().ok());
    v.check(out.status.code() == Some(0), format!("exit status {:?}", out.status.code()));
    match worst {
        Some(e) => v.check(e < 1e-4, format!("max relative error {e:.3e} (attribute net and two-branch pair graph)")),
        None => v.check(false, format!("no error line in output: {stdout}")),
    }
    v.check(secs < 120.0, format!("runtime {secs:.1}s"));
    v.finish();
}

#[test]
fn masked_attribute_heads() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(2, "masked attribute loss");
    let p = desk_small(8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let absent = AttributeGroup::Expression.range();
    let example = |rng: &mut ChaCha8Rng, lacking: bool| AttrExample {
        image: random_image(rng, p.network.input),
        bridge: random_vec(rng, 8),
        labels: (0..NUM_ATTRIBUTES)
            .map(|i| if lacking && absent.contains(&i) { None } else { Some(rng.random::<bool>()) })
            .collect(),
    };
    let net = AttributeNet::new(p.network.clone(), 4).unwrap();
    let f = p.network.feature_dim().unwrap();
    let head_columns = |params: &ParameterSet, grad: bool| -> Vec<u64> {
        let w = params.get(HEAD_WEIGHT).unwrap();
        let b = params.get(HEAD_BIAS).unwrap();
        let (wd, bd) = if grad { (w.grad().unwrap(), b.grad().unwrap()) } else { (w.data(), b.data()) };
        let mut out = Vec::new();
        for l in absent.clone() {
            out.extend((0..f).map(|r| wd[r * NUM_ATTRIBUTES + l].to_bits()));
            out.push(bd[l].to_bits());
        }
        out
    };

    // a batch in which every sample lacks the expression labels
    let batch: Vec<AttrExample> = (0..6).map(|_| example(&mut rng, true)).collect();
    let mut g = net.params.clone();
    AttrObjective { spec: &p.network, examples: &batch, lambda: 0.0 }.loss_and_grad(&mut g).unwrap();
    let zero = head_columns(&g, true).iter().all(|&b| b == 0.0f64.to_bits());
    let moved = g.get(HEAD_WEIGHT).unwrap().grad().unwrap().iter().any(|&x| x != 0.0);
    v.check(zero && moved, "all-missing batch gives exactly zero gradient on those heads");

    // swapping the lacking corpus' samples leaves the absent heads' gradient bit-identical
    let present: Vec<AttrExample> = (0..4).map(|_| example(&mut rng, false)).collect();
    let mix = |other: &[AttrExample]| -> Vec<u64> {
        let mut b = present.clone();
        b.extend_from_slice(other);
        let mut g = net.params.clone();
        AttrObjective { spec: &p.network, examples: &b, lambda: 0.0 }.loss_and_grad(&mut g).unwrap();
        head_columns(&g, true)
    };
    let other: Vec<AttrExample> = (0..6).map(|_| example(&mut rng, true)).collect();
    v.check(mix(&batch) == mix(&other), "lacking corpus has no effect on those heads' gradient");

    // training on a corpus without those labels leaves the heads untouched
    let mut trained = net.clone();
    let hyper = Hyper {
        lr: 0.2,
        epochs: 2,
        batch_size: 4,
        lambda: 0.0,
        ..Hyper::default()
    };
    facerel_core::attribute::pretrain(&mut trained, &batch, &[], &hyper, |_| {}).unwrap();
    let trunk_moved = trained.params.get("trunk.conv1.weight").unwrap().data() != net.params.get("trunk.conv1.weight").unwrap().data();
    v.check(
        head_columns(&trained.params, false) == head_columns(&net.params, false) && trunk_moved,
        "two epochs without those labels leave their heads bit-identical",
    );
    v.finish();
}

#[test]
fn tied_siamese_trunk() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(3, "tied trunk");
    let p = desk_small(6);
    let config = RelationConfig {
        network: p.network.clone(),
        projection_dim: p.projection_dim,
        switches: RelationSwitches::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = RelationModel::new(config.clone(), 8).unwrap();
    let pairs: Vec<PairExample> = (0..8).map(|_| random_pair(&mut rng, p.network.input, 6)).collect();
    let trunk_names = |params: &ParameterSet| params.names().filter(|n| n.starts_with("trunk.")).map(String::from).collect::<Vec<_>>();
    let expected = trunk_names(&AttributeNet::new(p.network.clone(), 0).unwrap().params);
    for stage in 0..3 {
        if stage > 0 {
            let hyper = Hyper {
                epochs: 1,
                batch_size: 4,
                ..Hyper::relation_defaults()
            };
            facerel_core::relation::train_relation(&mut model, &pairs, &[], &hyper, false, |_| {}).unwrap();
        }
        let bytes = Checkpoint::Relation(model.clone()).encode();
        let Checkpoint::Relation(loaded) = Checkpoint::decode(&bytes).unwrap() else { panic!("kind") };
        let one_trunk = trunk_names(&loaded.params) == expected;
        let mut twin = random_pair(&mut rng, p.network.input, 6);
        twin.right = twin.left.clone();
        twin.bridge_right = twin.bridge_left.clone();
        let fwd = relation_forward(&loaded.config, &loaded.params, &twin).unwrap();
        let same = fwd.x_left.iter().zip(&fwd.x_right).all(|(a, b)| a.to_bits() == b.to_bits());
        v.check(one_trunk && same, format!("checkpoint {stage}: single trunk, identical branch features"));
    }

    // symmetric projection so both branches receive the same upstream gradient
    let mut sym = model.params.clone();
    let f = p.network.feature_dim().unwrap();
    let pd = p.projection_dim;
    {
        let w = sym.get_mut(PROJ_WEIGHT).unwrap().data_mut();
        let (left, right) = w.split_at_mut(f * pd);
        right.copy_from_slice(left);
    }
    let mut twin = random_pair(&mut rng, p.network.input, 6);
    twin.right = twin.left.clone();
    twin.bridge_right = twin.bridge_left.clone();
    let fwd = relation_forward(&config, &sym, &twin).unwrap();
    let mut full = sym.clone();
    full.zero_grad();
    relation_backward(&config, &mut full, &fwd, &twin.labels).unwrap();
    let mut single = sym.clone();
    single.zero_grad();
    let g = facerel_core::relation::relation_head_backward(&mut single, &fwd, &twin.labels).unwrap();
    let upstream_equal = g.d_left == g.d_right;
    single.zero_grad();
    config.network.backward(&mut single, &fwd.trace_left, &g.d_left).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in full.iter().zip(single.iter()).filter(|(a, _)| a.name.starts_with("trunk.")) {
        for (x, y) in a.tensor.grad().unwrap().iter().zip(b.tensor.grad().unwrap()) {
            let denom = x.abs().max(1e-300);
            worst = worst.max((x - 2.0 * y).abs() / denom);
        }
    }
    v.check(upstream_equal && worst <= 1e-10, format!("identical crops: trunk gradient = 2 x single branch, rel. error {worst:.1e}"));
    v.finish();
}

#[test]
fn balanced_accuracy_exactness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(4, "balanced accuracy");
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..300);
        let rate = rng.random_range(0.02..0.98);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let threshold = rng.random::<f64>();
        let report = TraitReport::from_binary(&["t"], &probs.iter().map(|&p| vec![p]).collect::<Vec<_>>(), &labels.iter().map(|&l| vec![l]).collect::<Vec<_>>(), threshold).unwrap();
        // brute-force recount, then direct substitution
        let np_total = labels.iter().filter(|&&l| l).count() as f64;
        let nn_total = labels.iter().filter(|&&l| !l).count() as f64;
        let np_hit = labels.iter().zip(&probs).filter(|(&l, &p)| l && p >= threshold).count() as f64;
        let nn_hit = labels.iter().zip(&probs).filter(|(&l, &p)| !l && p < threshold).count() as f64;
        let expected = (np_total > 0.0 && nn_total > 0.0).then(|| 0.5 * (np_hit / np_total + nn_hit / nn_total));
        if report.rows[0].balanced_accuracy != expected {
            mismatches += 1;
        }
    }
    v.check(mismatches == 0, format!("1000 randomized cases, {mismatches} mismatches"));
    let mut all_pos_ok = true;
    for _ in 0..200 {
        let np = rng.random_range(1..10_000);
        let nn = rng.random_range(1..10_000);
        let c = ConfusionCounts::new(np, nn, np, 0).unwrap();
        all_pos_ok &= facerel_core::metrics::balanced_accuracy(&c) == Some(0.5);
    }
    v.check(all_pos_ok, "all-positive predictor is exactly 0.5 on 200 imbalances");
    v.finish();
}

#[test]
fn bridging_layer() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(5, "bridging layer");
    let cfg = BridgeConfig::default();
    v.check(cfg.descriptor_len() == 210, format!("descriptor length {} at defaults", cfg.descriptor_len()));

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut increases = 0;
    for inst in 0..100 {
        let n = rng.random_range(5..80);
        let d = rng.random_range(1..12);
        let k = rng.random_range(1..=n.min(10));
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 10.0).collect()).collect();
        let km = kmeans(&pts, k, inst, 100).unwrap();
        increases += km.objective.windows(2).filter(|w| w[1] > w[0]).count();
    }
    v.check(increases == 0, format!("K-means objective never increases on 100 instances ({increases} increases)"));

    let spec = SynthSpec::default();
    let (faces, modes) = planted_pose_corpus(&spec, 400, 5).unwrap();
    let set: Vec<Face> = faces
        .iter()
        .map(|f| Face {
            landmarks: &f.sample.landmarks,
            image: &f.sample.image,
        })
        .collect();
    let (tree, assign) = ClusterTree::build(&set, cfg, 9).unwrap();
    let (tree2, assign2) = ClusterTree::build(&set, cfg, 9).unwrap();
    let probe = &faces[17].sample.image;
    let h1 = tree.network_input(probe).unwrap();
    let h2 = tree2.network_input(probe).unwrap();
    let same_bits = h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits());
    v.check(
        encode_bank(&tree) == encode_bank(&tree2) && assign == assign2 && same_bits && h1.len() == 210,
        "tree build and extraction bit-reproducible",
    );
    let mut purity_hits = 0;
    for top in 0..cfg.top {
        let mut counts = [0usize; 16];
        for (a, &m) in assign.iter().zip(&modes) {
            if a.top == top {
                counts[m] += 1;
            }
        }
        purity_hits += counts.iter().max().unwrap();
    }
    let purity = purity_hits as f64 / modes.len() as f64;
    v.check(purity >= 0.9, format!("planted 10-mode purity {purity:.3}"));
    v.finish();
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (nf, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
    let mut out = Vec::with_capacity(nf * oh * ow);
    for f in 0..nf {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += w.data()[((f * c + ci) * k + ki) * k + kj] * x.data()[(ci * h + oy * stride + ki) * wd + ox * stride + kj];
                        }
                    }
                }
                out.push(acc + b.data()[f]);
            }
        }
    }
    out
}

fn naive_fc(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n_out = w.shape()[1];
    (0..n_out)
        .map(|o| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * n_out + o];
            }
            acc + b.data()[o]
        })
        .collect()
}

fn naive_lrn(x: &Tensor, p: &LrnParams) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = (p.n - 1) / 2;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let lo = ch.saturating_sub(half);
        let hi = (ch + p.n - 1 - half).min(c - 1);
        for y in 0..h {
            for xx in 0..w {
                let s: f64 = (lo..=hi).map(|cc| x.data()[(cc * h + y) * w + xx].powi(2)).sum();
                out[(ch * h + y) * w + xx] = x.data()[(ch * h + y) * w + xx] / (p.k + p.alpha * s).powf(p.beta);
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, k: usize, stride: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ki in 0..k {
                    for kj in 0..k {
                        m = m.max(x.data()[(ch * h + oy * stride + ki) * w + ox * stride + kj]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

/// Straight-line relation forward: trunk written out layer by layer with the
/// naive oracles, then projection, ReLU, spatial cues and heads.
fn straight_line_relation(spec: &NetworkSpec, params: &ParameterSet, ex: &PairExample) -> Vec<f64> {
    let trunk = |image: &Tensor, bridge: &[f64]| -> Vec<f64> {
        let p = |n: &str| params.get(n).unwrap();
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<f64>>();
        let shaped = |v: Vec<f64>, s: [usize; 3]| Tensor::new(s.to_vec(), v).unwrap();
        let lrn = match spec.layers[3] {
            LayerSpec::Lrn(l) => l,
            _ => panic!("layer order"),
        };
        let c1 = relu(naive_conv(image, p("trunk.conv1.weight"), p("trunk.conv1.bias"), 1));
        let f1 = p("trunk.conv1.weight").shape()[0];
        let p1 = naive_pool(&shaped(c1, [f1, 44, 44]), 2, 2);
        let n1 = naive_lrn(&shaped(p1, [f1, 22, 22]), &lrn);
        let c2 = relu(naive_conv(&shaped(n1, [f1, 22, 22]), p("trunk.conv2.weight"), p("trunk.conv2.bias"), 1));
        let f2 = p("trunk.conv2.weight").shape()[0];
        let p2 = naive_pool(&shaped(c2, [f2, 18, 18]), 2, 2);
        let n2 = naive_lrn(&shaped(p2, [f2, 9, 9]), &lrn);
        let c3 = relu(naive_conv(&shaped(n2, [f2, 9, 9]), p("trunk.conv3.weight"), p("trunk.conv3.bias"), 1));
        let f3 = p("trunk.conv3.weight").shape()[0];
        let c4 = relu(naive_conv(&shaped(c3, [f3, 7, 7]), p("trunk.conv4.weight"), p("trunk.conv4.bias"), 1));
        let f4 = p("trunk.conv4.weight").shape()[0];
        let mut flat = naive_pool(&shaped(c4, [f4, 5, 5]), 3, 2);
        flat.extend_from_slice(bridge);
        let h1 = relu(naive_fc(&flat, p("trunk.fc1.weight"), p("trunk.fc1.bias")));
        relu(naive_fc(&h1, p("trunk.fc2.weight"), p("trunk.fc2.bias")))
    };
    let mut concat = trunk(&ex.left, &ex.bridge_left);
    concat.extend(trunk(&ex.right, &ex.bridge_right));
    let xt: Vec<f64> = naive_fc(&concat, params.get(PROJ_WEIGHT).unwrap(), params.get(PROJ_BIAS).unwrap())
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let mut head_in = ex.cues.to_vec();
    head_in.extend(xt);
    naive_fc(&head_in, params.get(REL_HEAD_WEIGHT).unwrap(), params.get(REL_HEAD_BIAS).unwrap())
        .into_iter()
        .map(|z| 1.0 / (1.0 + (-z).exp()))
        .collect()
}

#[test]
fn oracle_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(6, "layer oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut conv_bad, mut fc_bad, mut lrn_bad, mut pool_bad) = (0, 0, 0, 0);
    for _ in 0..100 {
        let k = [3, 5][rng.random_range(0..2)];
        let c = rng.random_range(1..=8);
        let h = rng.random_range(k..=24);
        let w = rng.random_range(k..=24);
        let nf = rng.random_range(1..=8);
        let stride = rng.random_range(1..=2);
        let x = random_image(&mut rng, [c, h, w]);
        let wt = Tensor::from_fn(&[nf, c, k, k], |_| rng.random::<f64>() - 0.5);
        let b = Tensor::from_fn(&[nf], |_| rng.random::<f64>() - 0.5);
        conv_bad += (conv_forward(&x, &wt, &b, stride).unwrap().data() != naive_conv(&x, &wt, &b, stride).as_slice()) as usize;

        let n_in = rng.random_range(1..=300);
        let n_out = rng.random_range(1..=64);
        let xin: Vec<f64> = (0..n_in).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() }).collect();
        let fw = Tensor::from_fn(&[n_in, n_out], |_| rng.random::<f64>() - 0.5);
        let fb = Tensor::from_fn(&[n_out], |_| rng.random::<f64>());
        fc_bad += (fc_forward(&xin, &fw, &fb).unwrap() != naive_fc(&xin, &fw, &fb)) as usize;

        let lc = rng.random_range(1..=16);
        let lx = Tensor::from_fn(&[lc, rng.random_range(1..=12), rng.random_range(1..=12)], |_| rng.random::<f64>() * 20.0 - 10.0);
        let lrn = LrnParams::default();
        lrn_bad += !close(lrn_forward(&lx, &lrn).unwrap().0.data(), &naive_lrn(&lx, &lrn), 1e-12) as usize;

        let (pk, ps) = [(2, 2), (3, 2)][rng.random_range(0..2)];
        pool_bad += (maxpool_forward(&x, pk, ps).unwrap().0.data() != naive_pool(&x, pk, ps).as_slice()) as usize;
    }
    v.check(conv_bad == 0, format!("conv exact on 100 shapes ({conv_bad} off)"));
    v.check(fc_bad == 0, format!("fc exact on 100 shapes ({fc_bad} off)"));
    v.check(lrn_bad == 0, format!("lrn within 1e-12 on 100 shapes ({lrn_bad} off)"));
    v.check(pool_bad == 0, format!("maxpool exact on 100 shapes ({pool_bad} off)"));

    let p = desk_small(12);
    let config = RelationConfig {
        network: p.network.clone(),
        projection_dim: p.projection_dim,
        switches: RelationSwitches::default(),
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let model = RelationModel::new(config.clone(), seed).unwrap();
        let mut params = model.params.clone();
        // larger heads so the probabilities are spread away from 0.5
        for q in params.iter_mut().filter(|q| q.name.starts_with("rel.")) {
            q.tensor.data_mut().iter_mut().for_each(|x| *x *= 30.0);
        }
        let ex = random_pair(&mut rng, p.network.input, 12);
        let got = relation_forward(&config, &params, &ex).unwrap().probs;
        let want = straight_line_relation(&p.network, &params, &ex);
        worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    v.check(worst <= 1e-12, format!("relation forward vs straight-line recomputation, max deviation {worst:.1e}"));
    v.finish();
}

fn corpus_samples(data: &facerel_core::synth::SynthOutput) -> Vec<Sample> {
    data.corpora.iter().flat_map(|c| c.faces.iter().map(|f| f.sample.clone())).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn planted_task_learning() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(7, "planted-task learning");
    let cfg = RunConfig::default();
    let data = synth_generate(&SynthSpec::default(), cfg.seed).unwrap();
    let samples = corpus_samples(&data);
    let tree = build_bridge(&samples, cfg.bridge, cfg.seed).unwrap();
    let dim = cfg.bridge_dim();

    let start = Instant::now();
    let with_bridge = pretrain_variant(&cfg, &samples, Some(&tree)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let train = attr_examples(&samples, Some(&tree), dim).unwrap();
    let report = attr_report(&with_bridge, &train).unwrap();
    let min_ba = report.rows.iter().map(|r| r.balanced_accuracy.unwrap_or(0.0)).fold(1.0, f64::min);
    v.check(min_ba >= 0.95, format!("pretrain train balanced accuracy min {min_ba:.4} over 20 attributes"));
    v.check(secs < 600.0, format!("pretrain {secs:.0}s"));

    let off_cfg = RunConfig {
        switches: Switches { bridge: false, ..cfg.switches },
        ..cfg.clone()
    };
    let without_bridge = pretrain_variant(&off_cfg, &samples, None).unwrap();

    let crop = cfg.network_profile().unwrap().network.input[1];
    let pairs = |src: &[facerel_core::synth::SynthPair]| -> Vec<PairSample> { src.iter().map(|p| p.to_pair_sample(crop).unwrap()).collect() };
    let (train_pairs, test_pairs) = (pairs(&data.train_pairs), pairs(&data.test_pairs));
    let on = (pair_examples(&train_pairs, Some(&tree), dim).unwrap(), pair_examples(&test_pairs, Some(&tree), dim).unwrap());
    let off = (pair_examples(&train_pairs, None, dim).unwrap(), pair_examples(&test_pairs, None, dim).unwrap());
    let seeds: Vec<u64> = (0..5).map(|s| cfg.seed + s).collect();
    let score = |cfg: &RunConfig, sw: Switches, init: Option<&AttributeNet>, ex: &(Vec<PairExample>, Vec<PairExample>)| -> Vec<f64> {
        train_cell(cfg, sw, init, &ex.0, &ex.1, &seeds)
            .unwrap()
            .iter()
            .map(|r| r.mean.unwrap_or(f64::NAN))
            .collect()
    };
    let full = Switches { bridge: true, spatial: true, pretrained: true };
    let pretrained = score(&cfg, full, Some(&with_bridge), &on);
    let random = score(&cfg, Switches { pretrained: false, ..full }, None, &on);
    let no_bridge = score(&off_cfg, Switches { bridge: false, ..full }, Some(&without_bridge), &off);
    let (mp, mr, mo) = (mean(&pretrained), mean(&random), mean(&no_bridge));
    v.check(
        mp - mr >= 0.02,
        format!("pretrained {mp:.4} vs random {mr:.4} init over 5 seeds (margin {:.2} points)", 100.0 * (mp - mr)),
    );
    v.check(
        mp >= mo - 0.01,
        format!("bridge on {mp:.4} vs off {mo:.4} over 5 seeds (difference {:.2} points)", 100.0 * (mp - mo)),
    );
    v.finish();
}

#[test]
fn smoothing() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(8, "profile smoothing");
    let impulse = TraitProfile::new((0..5).collect(), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let s = smooth_profile(&impulse, 5).unwrap();
    v.check(
        s.probabilities == [1.0 / 3.0, 0.25, 0.2, 0.25, 1.0 / 3.0],
        format!("impulse fixture {:?}", s.probabilities),
    );
    let ramp = TraitProfile::new(vec![3, 4, 7, 8, 9, 12, 20], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.5, 0.0]).unwrap();
    let s = smooth_profile(&ramp, 5).unwrap();
    v.check(
        s.probabilities == [0.5, 0.4375, 0.5, 0.6, 0.5, 0.375, 5.0 / 12.0],
        format!("dyadic fixture {:?}", s.probabilities),
    );
    v.check(s.frames == ramp.frames && s.probabilities.len() == 7, "length and frame indices preserved");
    v.check(smooth_profile(&ramp, 1).unwrap() == ramp, "window 1 is the identity");
    v.finish();
}

fn run_cli(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_facerel"))
        .current_dir(dir)
        .env_remove(facerel::artifacts::OUTPUT_DIR_ENV)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "facerel {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn reproducibility() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut v = Verdict::new(9, "reproducibility");
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["first", "second"].iter().map(|n| root.path().join(n)).collect();
    let spec = SynthSpec {
        corpora: SynthSpec::default()
            .corpora
            .into_iter()
            .map(|mut c| {
                c.size = 150;
                c
            })
            .collect(),
        ..SynthSpec::default()
    };
    let mut small = spec.clone();
    small.relation.train = 40;
    small.relation.test = 20;
    for dir in &runs {
        std::fs::create_dir_all(dir).unwrap();
        std::fs::write(dir.join("small.toml"), toml::to_string(&small).unwrap()).unwrap();
        std::fs::write(dir.join("quick.toml"), "[pretrain]\nepochs = 1\n[relation]\nepochs = 1\n").unwrap();
        run_cli(dir, &["synth-data", "--spec", "small.toml", "--out", "data", "--video-frames", "12"]);
        run_cli(dir, &["build-bridge", "--corpus", "data/a.txt,data/b.txt,data/c.txt", "--out", "bank.bin"]);
        let q = ["--config", "quick.toml"];
        run_cli(dir, &[&q[..], &["pretrain", "--manifests", "data/a.txt,data/b.txt,data/c.txt", "--bridge", "bank.bin", "--out", "attr.bin"]].concat());
        run_cli(
            dir,
            &[&q[..], &["train-relation", "--pairs", "data/train.txt", "--heldout", "data/test.txt", "--init", "attr.bin", "--bridge", "bank.bin", "--out", "rel.bin"]].concat(),
        );
        run_cli(dir, &["predict", "--pairs", "data/test.txt", "--model", "rel.bin", "--bridge", "bank.bin", "--out", "preds.jsonl"]);
        run_cli(dir, &["eval", "--pairs", "data/test.txt", "--preds", "preds.jsonl", "--out", "report.jsonl"]);
        run_cli(dir, &["profile-video", "--pairs", "data/video.txt", "--model", "rel.bin", "--bridge", "bank.bin", "--out", "video.jsonl"]);
    }
    let mut files = Vec::new();
    let mut stack = vec![runs[0].clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p.strip_prefix(&runs[0]).unwrap().to_path_buf());
            }
        }
    }
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).ok().unwrap_or_default())
        .map(|f| f.display().to_string())
        .collect();
    v.check(
        differing.is_empty() && files.len() > 100,
        format!("{} artifacts byte-identical across reruns {differing:?}", files.len()),
    );

    let mut exact = true;
    for name in ["attr.bin", "rel.bin"] {
        let bytes = std::fs::read(runs[0].join(name)).unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let again = Checkpoint::decode(&ck.encode()).unwrap();
        exact &= ck.encode() == bytes
            && ck
                .params()
                .iter()
                .zip(again.params().iter())
                .all(|(a, b)| a.name == b.name && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bank = std::fs::read(runs[0].join("bank.bin")).unwrap();
    exact &= encode_bank(&decode_bank(&bank).unwrap()) == bank;
    v.check(exact, "checkpoint and template bank save/load round-trips bit-exactly");
    v.finish();
}
