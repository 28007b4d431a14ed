//! Synthetic faces with planted structure.
//!
//! Every face is drawn from a small set of latent factors. Each attribute
//! controls one visual factor of a 2x2 grid of oriented gratings (pose in the
//! top-left quadrant, the expression class in the top-right, one textured
//! cell per binary expression or age bit in the bottom quadrants) and, for
//! pose, smiling,
//! mouth and expression, the landmark geometry. Relation labels of a face
//! pair are a fixed function of the two faces' latents and their placement,
//! given by a rule table that travels with the corpus.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AttributeGroup, FaceBox, Landmarks, PairSample, Region, Sample, NUM_ATTRIBUTES, NUM_RELATIONS, RELATIONS,
};
use crate::error::{Error, Result};
use crate::image::{crop_face, GrayImage};

pub const NUM_POSES: usize = 5;
pub const NUM_EXPRESSIONS: usize = 7;
pub const SMILING: usize = 13;
pub const MOUTH_OPENED: usize = 14;
pub const YOUNG: usize = 15;

/// Yaw of the five pose classes, left profile to right profile.
const POSE_YAW: [f64; NUM_POSES] = [-1.0, -0.5, 0.0, 0.5, 1.0];
/// Grating orientations used by the binary quadrants.
const BIT_ANGLES: [f64; 4] = [0.0, 0.25 * PI, 0.5 * PI, 0.75 * PI];

/// Generator latents of one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLatent {
    /// Male when true.
    pub gender: bool,
    pub pose: usize,
    /// One of the seven basic expressions, in vocabulary order.
    pub expression: usize,
    pub smiling: bool,
    pub mouth_open: bool,
    /// young, goatee, no beard, sideburns, 5 o'clock shadow.
    pub age: [bool; 5],
    /// Vertical head tilt in `[-1, 1]`; shifts the landmarks.
    pub pitch: f64,
    /// Grating phase of each quadrant.
    pub phases: [f64; 4],
}

impl FaceLatent {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut age = [false; 5];
        age.iter_mut().for_each(|a| *a = rng.random_bool(0.5));
        let mut phases = [0.0; 4];
        phases.iter_mut().for_each(|p| *p = rng.random::<f64>() * 2.0 * PI);
        Self {
            gender: rng.random_bool(0.5),
            pose: rng.random_range(0..NUM_POSES),
            expression: rng.random_range(0..NUM_EXPRESSIONS),
            smiling: rng.random_bool(0.5),
            mouth_open: rng.random_bool(0.5),
            age,
            pitch: rng.random_range(-0.25..0.25),
            phases,
        }
    }

    /// The 20 attribute values this face was generated with.
    pub fn attributes(&self) -> [bool; NUM_ATTRIBUTES] {
        let mut a = [false; NUM_ATTRIBUTES];
        a[0] = self.gender;
        a[1 + self.pose] = true;
        a[6 + self.expression] = true;
        a[SMILING] = self.smiling;
        a[MOUTH_OPENED] = self.mouth_open;
        a[YOUNG..].copy_from_slice(&self.age);
        a
    }

    /// Value of a binary attribute (gender, smiling, mouth opened or one of
    /// the age group).
    pub fn bit(&self, attribute: usize) -> Result<bool> {
        match attribute {
            0 => Ok(self.gender),
            SMILING => Ok(self.smiling),
            MOUTH_OPENED => Ok(self.mouth_open),
            YOUNG..=19 => Ok(self.age[attribute - YOUNG]),
            _ => Err(Error::InvalidArgument(format!("attribute {attribute} is not an independent binary factor"))),
        }
    }

    fn set_bit(&mut self, attribute: usize, value: bool) {
        match attribute {
            0 => self.gender = value,
            SMILING => self.smiling = value,
            MOUTH_OPENED => self.mouth_open = value,
            _ => self.age[attribute - YOUNG] = value,
        }
    }

    fn class(&self, group: AttributeGroup) -> usize {
        match group {
            AttributeGroup::Pose => self.pose,
            _ => self.expression,
        }
    }

    fn set_class(&mut self, group: AttributeGroup, value: usize) {
        match group {
            AttributeGroup::Pose => self.pose = value,
            _ => self.expression = value,
        }
    }
}

fn class_count(group: AttributeGroup) -> Result<usize> {
    match group {
        AttributeGroup::Pose => Ok(NUM_POSES),
        AttributeGroup::Expression => Ok(NUM_EXPRESSIONS),
        g => Err(Error::InvalidArgument(format!("group `{}` has no single class latent", g.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    /// Gray level of a blank face.
    pub base: f64,
    /// Amplitude of each grating.
    pub amplitude: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Gray level of the scene background around faces.
    pub background: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            base: 0.5,
            amplitude: 0.1,
            noise: 0.02,
            background: 0.3,
        }
    }
}

fn grating(u: f64, v: f64, angle: f64, period: f64, phase: f64) -> f64 {
    libm::cos(2.0 * PI * (u * libm::cos(angle) + v * libm::sin(angle)) / period + phase)
}

/// Orientation and period of the top-right grating for each expression
/// class.
fn expression_grating(class: usize) -> (f64, f64) {
    (BIT_ANGLES[class % 4], if class < 4 { 1.0 / 6.0 } else { 1.0 / 3.0 })
}

/// A bottom quadrant is split into four cells, one per binary attribute;
/// a cell carries horizontal or vertical bars (alternating between
/// neighbouring cells) at twice the base amplitude when the bit is set and
/// stays flat otherwise.
fn bit_cell(bits: [bool; 4], u: f64, v: f64, phase: f64) -> f64 {
    let cell = 2 * usize::from((v % 0.5) >= 0.25) + usize::from((u % 0.5) >= 0.25);
    if bits[cell] {
        2.0 * grating(u, v, if cell == 0 || cell == 3 { 0.0 } else { 0.5 * PI }, 1.0 / 12.0, phase)
    } else {
        0.0
    }
}

/// Noise-free intensity of a face at normalized face coordinates.
fn face_intensity(face: &FaceLatent, render: &RenderSpec, offset: f64, u: f64, v: f64) -> f64 {
    let fine = 1.0 / 6.0;
    let pattern = match (u < 0.5, v < 0.5) {
        (true, true) => grating(u, v, POSE_YAW[face.pose] * 0.4 * PI + 0.5 * PI, fine, face.phases[0]),
        (false, true) => {
            let (angle, period) = expression_grating(face.expression);
            grating(u, v, angle, period, face.phases[1])
        }
        (true, false) => bit_cell([face.gender, face.smiling, face.mouth_open, face.age[0]], u, v, face.phases[2]),
        (false, false) => bit_cell([face.age[1], face.age[2], face.age[3], face.age[4]], u, v, face.phases[3]),
    };
    render.base + offset + render.amplitude * pattern
}

/// Renders a `size` x `size` face. Values are clamped to `[0, 1]` but not
/// quantized.
pub fn render_face(face: &FaceLatent, size: usize, render: &RenderSpec, offset: f64, rng: &mut impl Rng) -> Result<GrayImage> {
    let noise = Normal::new(0.0, render.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let value = face_intensity(face, render, offset, u, v) + noise.sample(rng);
            pixels.push(value.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(size, size, pixels)
}

/// Frontal landmark template: seven upper-face points (brows, eyes, nose
/// bridge) and six lower-face points (nose tip, mouth, chin).
const TEMPLATE: [(f64, f64, Region); 13] = [
    (0.25, 0.30, Region::Upper),
    (0.42, 0.28, Region::Upper),
    (0.58, 0.28, Region::Upper),
    (0.75, 0.30, Region::Upper),
    (0.33, 0.40, Region::Upper),
    (0.67, 0.40, Region::Upper),
    (0.50, 0.42, Region::Upper),
    (0.50, 0.58, Region::Lower),
    (0.38, 0.72, Region::Lower),
    (0.62, 0.72, Region::Lower),
    (0.50, 0.70, Region::Lower),
    (0.50, 0.75, Region::Lower),
    (0.50, 0.90, Region::Lower),
];

/// Landmarks of a face, normalized to its box.
pub fn face_landmarks(face: &FaceLatent, jitter: f64, rng: &mut impl Rng) -> Result<Landmarks> {
    let noise = Normal::new(0.0, jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pts: Vec<(f64, f64)> = TEMPLATE.iter().map(|&(x, y, _)| (x, y)).collect();
    // expression: brow and mouth displacements
    let (brow_inner, brow_all, corner_dy, upper_lip) = match face.expression {
        0 => (0.03, 0.0, 0.0, 0.0),
        1 => (0.0, 0.0, 0.0, -0.02),
        2 => (0.0, -0.03, 0.01, 0.0),
        3 => (0.0, 0.0, -0.02, 0.0),
        4 => (-0.02, 0.0, 0.02, 0.0),
        5 => (0.0, -0.04, 0.0, 0.0),
        _ => (0.0, 0.0, 0.0, 0.0),
    };
    for p in &mut pts[0..4] {
        p.1 += brow_all;
    }
    pts[1].1 += brow_inner;
    pts[2].1 += brow_inner;
    pts[8].1 += corner_dy;
    pts[9].1 += corner_dy;
    pts[10].1 += upper_lip;
    if face.smiling {
        pts[8].0 -= 0.03;
        pts[8].1 -= 0.03;
        pts[9].0 += 0.03;
        pts[9].1 -= 0.03;
    }
    if face.mouth_open {
        pts[11].1 += 0.06;
        pts[12].1 += 0.03;
    }
    let yaw = POSE_YAW[face.pose];
    for (i, p) in pts.iter_mut().enumerate() {
        let depth = if i == 6 || i == 7 { 1.5 } else { 1.0 };
        p.0 = 0.5 + (p.0 - 0.5) * (1.0 - 0.3 * yaw.abs()) + 0.15 * yaw * depth + noise.sample(rng);
        p.1 += 0.08 * face.pitch + noise.sample(rng);
        p.0 = p.0.clamp(0.0, 1.0);
        p.1 = p.1.clamp(0.0, 1.0);
    }
    Landmarks::new(pts, TEMPLATE.iter().map(|t| t.2).collect())
}

/// How a relation trait is derived from the two faces of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleKind {
    /// A boolean combination of one binary attribute of both faces.
    Bit { attribute: usize, op: BoolOp },
    /// Both faces share the class of a pose or expression latent.
    SameClass { group: AttributeGroup },
    /// The horizontal gap between the faces, as a fraction of the image
    /// width, is below `threshold`.
    Proximity { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoolOp {
    And,
    Or,
    Xor,
    Eq,
}

impl BoolOp {
    pub fn apply(self, a: bool, b: bool) -> bool {
        match self {
            Self::And => a && b,
            Self::Or => a || b,
            Self::Xor => a != b,
            Self::Eq => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitRule {
    pub name: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

impl TraitRule {
    /// The trait label of a pair. `gap` is the horizontal distance between
    /// the right edge of the left face and the left edge of the right face,
    /// normalized by the image width.
    pub fn evaluate(&self, left: &FaceLatent, right: &FaceLatent, gap: f64) -> Result<bool> {
        Ok(match &self.kind {
            RuleKind::Bit { attribute, op } => op.apply(left.bit(*attribute)?, right.bit(*attribute)?),
            RuleKind::SameClass { group } => {
                class_count(*group)?;
                left.class(*group) == right.class(*group)
            }
            RuleKind::Proximity { threshold } => gap < *threshold,
        })
    }

    /// Latent slots the rule reads; rules of one table must not share any.
    fn slot(&self) -> String {
        match &self.kind {
            RuleKind::Bit { attribute, .. } => format!("attribute {attribute}"),
            RuleKind::SameClass { group } => format!("group {}", group.name()),
            RuleKind::Proximity { .. } => "geometry".to_string(),
        }
    }
}

/// One rule per relation trait, in vocabulary order.
pub fn default_rules() -> Vec<TraitRule> {
    let bit = |attribute, op| RuleKind::Bit { attribute, op };
    let kinds = [
        bit(0, BoolOp::And),
        RuleKind::SameClass {
            group: AttributeGroup::Expression,
        },
        bit(SMILING, BoolOp::Or),
        bit(YOUNG, BoolOp::Eq),
        bit(MOUTH_OPENED, BoolOp::Or),
        RuleKind::Proximity { threshold: 0.125 },
        RuleKind::SameClass { group: AttributeGroup::Pose },
        bit(17, BoolOp::Or),
    ];
    RELATIONS
        .iter()
        .zip(kinds)
        .map(|(n, kind)| TraitRule {
            name: n.to_string(),
            kind,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    pub size: usize,
    /// Attribute groups that carry labels; all others are missing.
    pub groups: Vec<AttributeGroup>,
    /// Brightness shift of this source's faces.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub train: usize,
    pub test: usize,
    pub scene_width: usize,
    pub scene_height: usize,
    /// Face sizes in pixels are drawn from `face_min..=face_max`.
    pub face_min: usize,
    pub face_max: usize,
    /// `(positives, negatives)` per trait; only the ratio matters.
    pub imbalance: Vec<(u64, u64)>,
    pub rules: Vec<TraitRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub landmark_jitter: f64,
    pub render: RenderSpec,
    pub corpora: Vec<CorpusSpec>,
    pub relation: RelationSpec,
}

/// Training-set trait counts of the reference relation dataset.
pub const REFERENCE_IMBALANCE: [(u64, u64); NUM_RELATIONS] = [
    (418, 7041),
    (538, 6921),
    (6288, 1171),
    (6224, 1235),
    (6790, 669),
    (6407, 1052),
    (6555, 904),
    (6595, 864),
];

impl Default for SynthSpec {
    fn default() -> Self {
        use AttributeGroup::*;
        let corpus = |name: &str, groups: Vec<AttributeGroup>, offset| CorpusSpec {
            name: name.to_string(),
            size: 800,
            groups,
            offset,
        };
        Self {
            image_size: 48,
            landmark_jitter: 0.008,
            render: RenderSpec::default(),
            corpora: vec![
                corpus("a", vec![Gender, Pose], 0.0),
                corpus("b", vec![Expression], -0.05),
                corpus("c", vec![Gender, Pose, Expression, Age], 0.05),
            ],
            relation: RelationSpec {
                train: 600,
                test: 300,
                scene_width: 192,
                scene_height: 96,
                face_min: 40,
                face_max: 64,
                imbalance: REFERENCE_IMBALANCE.to_vec(),
                rules: default_rules(),
            },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if !(self.landmark_jitter >= 0.0) || !(self.render.noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for c in &self.corpora {
            if c.size == 0 {
                return bad(format!("corpus `{}` has size 0", c.name));
            }
        }
        let r = &self.relation;
        if r.train == 0 || r.test == 0 {
            return bad("relation train and test sizes must be at least 1".into());
        }
        if r.rules.len() != NUM_RELATIONS || r.imbalance.len() != NUM_RELATIONS {
            return bad(format!("relation spec needs {NUM_RELATIONS} rules and imbalance entries"));
        }
        for (rule, expected) in r.rules.iter().zip(RELATIONS) {
            if rule.name != expected {
                return bad(format!("rule `{}` is out of order; expected `{expected}`", rule.name));
            }
            match &rule.kind {
                RuleKind::Bit { attribute, .. } => {
                    FaceLatent::random(&mut ChaCha8Rng::seed_from_u64(0)).bit(*attribute)?;
                }
                RuleKind::SameClass { group } => {
                    class_count(*group)?;
                }
                RuleKind::Proximity { threshold } => {
                    if !(*threshold > 0.0) {
                        return bad("proximity threshold must be positive".into());
                    }
                }
            }
        }
        let mut slots: Vec<String> = r.rules.iter().map(|t| t.slot()).collect();
        slots.sort();
        if let Some(w) = slots.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("two rules read the same latent ({})", w[0]));
        }
        if r.imbalance.iter().any(|&(p, n)| p + n == 0) {
            return bad("imbalance entries need at least one count".into());
        }
        if r.face_min == 0 || r.face_min > r.face_max || 2 * r.face_max > r.scene_width || r.face_max > r.scene_height {
            return bad("face sizes do not fit twice side by side in the scene".into());
        }
        for rule in &r.rules {
            if let RuleKind::Proximity { threshold } = rule.kind {
                let max_gap = (r.scene_width - 2 * r.face_max) as f64 / r.scene_width as f64;
                if threshold >= max_gap {
                    return bad(format!("proximity threshold {threshold} leaves no room for distant pairs (max gap {max_gap})"));
                }
            }
        }
        Ok(())
    }
}

/// One generated face with its latents.
#[derive(Debug, Clone)]
pub struct SynthFace {
    pub sample: Sample,
    pub image: GrayImage,
    pub latent: FaceLatent,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: CorpusSpec,
    pub faces: Vec<SynthFace>,
}

/// One generated scene holding a face pair.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub scene: GrayImage,
    pub left_box: FaceBox,
    pub right_box: FaceBox,
    pub relations: [bool; NUM_RELATIONS],
    pub left: FaceLatent,
    pub right: FaceLatent,
    /// Horizontal gap between the faces as a fraction of the scene width.
    pub gap: f64,
}

impl SynthPair {
    pub fn to_pair_sample(&self, crop: usize) -> Result<PairSample> {
        let dims = (self.scene.width, self.scene.height);
        PairSample::ordered(
            crop_face(&self.scene, &self.left_box, crop)?,
            self.left_box,
            crop_face(&self.scene, &self.right_box, crop)?,
            self.right_box,
            dims,
            self.relations,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpora: Vec<SynthCorpus>,
    pub train_pairs: Vec<SynthPair>,
    pub test_pairs: Vec<SynthPair>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn make_face(spec: &SynthSpec, latent: FaceLatent, groups: &[AttributeGroup], offset: f64, id: &str, rng: &mut ChaCha8Rng) -> Result<SynthFace> {
    let image = render_face(&latent, spec.image_size, &spec.render, offset, rng)?.quantized();
    let landmarks = face_landmarks(&latent, spec.landmark_jitter, rng)?;
    let attrs = latent.attributes();
    let labels = (0..NUM_ATTRIBUTES)
        .map(|i| groups.iter().any(|g| g.range().contains(&i)).then_some(attrs[i]))
        .collect();
    let sample = Sample::new(image.to_tensor(), landmarks, labels, id.to_string())?;
    Ok(SynthFace { sample, image, latent })
}

/// An attribute corpus drawn from independent uniform latents.
pub fn generate_corpus(spec: &SynthSpec, corpus: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<SynthCorpus> {
    let mut faces = Vec::with_capacity(corpus.size);
    for _ in 0..corpus.size {
        let latent = FaceLatent::random(rng);
        faces.push(make_face(spec, latent, &corpus.groups, corpus.offset, &corpus.name, rng)?);
    }
    Ok(SynthCorpus {
        spec: corpus.clone(),
        faces,
    })
}

/// Per-trait targets with exactly `round(fraction * n)` positives each, at
/// shuffled positions.
fn stratified_targets(n: usize, imbalance: &[(u64, u64)], rng: &mut ChaCha8Rng) -> Vec<[bool; NUM_RELATIONS]> {
    let mut targets = vec![[false; NUM_RELATIONS]; n];
    for (t, &(p, q)) in imbalance.iter().enumerate() {
        let positives = libm::round(p as f64 / (p + q) as f64 * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for &i in &order[..positives.min(n)] {
            targets[i][t] = true;
        }
    }
    targets
}

/// Adjusts the latents read by `rule` so that it evaluates to `target`;
/// returns the gap range to sample for proximity rules.
fn plant(rule: &TraitRule, target: bool, left: &mut FaceLatent, right: &mut FaceLatent, rng: &mut ChaCha8Rng) -> Result<Option<bool>> {
    match &rule.kind {
        RuleKind::Bit { attribute, op } => {
            let combos: Vec<(bool, bool)> = [(false, false), (false, true), (true, false), (true, true)]
                .into_iter()
                .filter(|&(a, b)| op.apply(a, b) == target)
                .collect();
            let &(a, b) = combos
                .choose(rng)
                .ok_or_else(|| Error::InvalidArgument(format!("rule `{}` cannot produce {target}", rule.name)))?;
            left.set_bit(*attribute, a);
            right.set_bit(*attribute, b);
            Ok(None)
        }
        RuleKind::SameClass { group } => {
            let n = class_count(*group)?;
            let c = left.class(*group);
            let other = if target {
                c
            } else {
                (c + rng.random_range(1..n)) % n
            };
            right.set_class(*group, other);
            Ok(None)
        }
        RuleKind::Proximity { .. } => Ok(Some(target)),
    }
}

fn paste(scene: &mut GrayImage, face: &GrayImage, x0: usize, y0: usize) {
    for y in 0..face.height {
        let dst = (y0 + y) * scene.width + x0;
        scene.pixels[dst..dst + face.width].copy_from_slice(&face.pixels[y * face.width..(y + 1) * face.width]);
    }
}

/// Renders one scene whose rule-table labels equal `targets`.
fn generate_pair(spec: &SynthSpec, targets: &[bool; NUM_RELATIONS], rng: &mut ChaCha8Rng) -> Result<SynthPair> {
    let r = &spec.relation;
    let mut left = FaceLatent::random(rng);
    let mut right = FaceLatent::random(rng);
    let mut close = None;
    for (rule, &t) in r.rules.iter().zip(targets) {
        if let Some(c) = plant(rule, t, &mut left, &mut right, rng)? {
            close = Some((c, rule));
        }
    }
    let (w, h) = (r.scene_width, r.scene_height);
    let sl = rng.random_range(r.face_min..=r.face_max);
    let sr = rng.random_range(r.face_min..=r.face_max);
    let room = w - sl - sr;
    let gap_px = match close {
        Some((near, rule)) => {
            let RuleKind::Proximity { threshold } = rule.kind else { unreachable!() };
            // a margin of 20% of the threshold on either side of the boundary
            let limit = threshold * w as f64;
            if near {
                rng.random_range(0..=(0.8 * limit) as usize)
            } else {
                rng.random_range(libm::ceil(1.2 * limit) as usize..=room)
            }
        }
        None => rng.random_range(0..=room),
    };
    let xl = rng.random_range(0..=room - gap_px);
    let xr = xl + sl + gap_px;
    let yl = rng.random_range(0..=h - sl);
    let yr = rng.random_range(0..=h - sr);
    let noise = Normal::new(0.0, spec.render.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut scene = GrayImage::new(w, h, (0..w * h).map(|_| (spec.render.background + noise.sample(rng)).clamp(0.0, 1.0)).collect())?;
    let face_l = render_face(&left, sl, &spec.render, 0.0, rng)?;
    let face_r = render_face(&right, sr, &spec.render, 0.0, rng)?;
    paste(&mut scene, &face_l, xl, yl);
    paste(&mut scene, &face_r, xr, yr);
    let scene = scene.quantized();
    let bx = |x: usize, y: usize, s: usize| FaceBox {
        x: x as f64,
        y: y as f64,
        w: s as f64 / w as f64,
        h: s as f64 / h as f64,
    };
    let gap = gap_px as f64 / w as f64;
    let mut relations = [false; NUM_RELATIONS];
    for (slot, rule) in relations.iter_mut().zip(&r.rules) {
        *slot = rule.evaluate(&left, &right, gap)?;
    }
    if relations != *targets {
        return Err(Error::Numerical("planted relation labels disagree with the rule table".into()));
    }
    Ok(SynthPair {
        scene,
        left_box: bx(xl, yl, sl),
        right_box: bx(xr, yr, sr),
        relations,
        left,
        right,
        gap,
    })
}

pub fn generate_pairs(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SynthPair>> {
    let targets = stratified_targets(n, &spec.relation.imbalance, rng);
    targets.iter().map(|t| generate_pair(spec, t, rng)).collect()
}

/// All corpora and both relation splits. Each part draws from its own
/// random stream of `seed`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let corpora = spec
        .corpora
        .iter()
        .enumerate()
        .map(|(i, c)| generate_corpus(spec, c, &mut stream(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let base = spec.corpora.len() as u64;
    let train_pairs = generate_pairs(spec, spec.relation.train, &mut stream(seed, base))?;
    let test_pairs = generate_pairs(spec, spec.relation.test, &mut stream(seed, base + 1))?;
    Ok(SynthOutput {
        corpora,
        train_pairs,
        test_pairs,
    })
}

/// Faces from ten planted head-pose modes (five yaw classes times two
/// pitch signs); returns the faces and their mode index.
pub fn planted_pose_corpus(spec: &SynthSpec, n: usize, seed: u64) -> Result<(Vec<SynthFace>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = AttributeGroup::ALL;
    let mut faces = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    for i in 0..n {
        let mode = i % (2 * NUM_POSES);
        let mut latent = FaceLatent::random(&mut rng);
        latent.pose = mode / 2;
        latent.pitch = if mode.is_multiple_of(2) { -1.0 } else { 1.0 };
        faces.push(make_face(spec, latent, &all, 0.0, "planted", &mut rng)?);
        modes.push(mode);
    }
    Ok((faces, modes))
}

/// A pair filmed over `frames` frames: the latents stay fixed except that
/// smiling, mouth and expression agreement switch on halfway through, so
/// trusting, friendly and competitive flip mid-sequence. Each frame has
/// fresh pixel noise.
pub fn video_sequence(spec: &SynthSpec, frames: usize, seed: u64) -> Result<Vec<SynthPair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = [false; NUM_RELATIONS];
    targets[3] = true;
    targets[5] = true;
    targets[6] = true;
    let first = generate_pair(spec, &targets, &mut rng)?;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let (mut left, mut right) = (first.left.clone(), first.right.clone());
        if f >= frames / 2 {
            left.smiling = true;
            left.mouth_open = true;
            right.expression = left.expression;
        }
        let mut relations = [false; NUM_RELATIONS];
        for (slot, rule) in relations.iter_mut().zip(&spec.relation.rules) {
            *slot = rule.evaluate(&left, &right, first.gap)?;
        }
        let mut scene = first.scene.clone();
        let w = scene.width;
        let sl = libm::round(first.left_box.w * w as f64) as usize;
        let sr = libm::round(first.right_box.w * w as f64) as usize;
        let face_l = render_face(&left, sl, &spec.render, 0.0, &mut rng)?.quantized();
        let face_r = render_face(&right, sr, &spec.render, 0.0, &mut rng)?.quantized();
        paste(&mut scene, &face_l, first.left_box.x as usize, first.left_box.y as usize);
        paste(&mut scene, &face_r, first.right_box.x as usize, first.right_box.y as usize);
        out.push(SynthPair {
            scene,
            relations,
            left,
            right,
            ..first.clone()
        });
    }
    Ok(out)
}
