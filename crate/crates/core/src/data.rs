//! Domain types for heterogeneous attribute corpora and face pairs: the
//! attribute and relation vocabularies, samples with missing labels, face
//! boxes, spatial cues and seeded batching.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_ATTRIBUTES: usize = 20;
pub const NUM_RELATIONS: usize = 8;
pub const SPATIAL_CUE_DIM: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeGroup {
    Gender,
    Pose,
    Expression,
    Age,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 4] = [Self::Gender, Self::Pose, Self::Expression, Self::Age];

    /// Attribute indices belonging to this group.
    pub fn range(self) -> core::ops::Range<usize> {
        match self {
            Self::Gender => 0..1,
            Self::Pose => 1..6,
            Self::Expression => 6..15,
            Self::Age => 15..20,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gender => "gender",
            Self::Pose => "pose",
            Self::Expression => "expression",
            Self::Age => "age",
        }
    }
}

/// The 20 binary face attributes, in model head order.
pub const ATTRIBUTES: [&str; NUM_ATTRIBUTES] = [
    "gender",
    "left profile",
    "left",
    "frontal",
    "right",
    "right profile",
    "angry",
    "disgust",
    "fear",
    "happy",
    "sad",
    "surprise",
    "neutral",
    "smiling",
    "mouth opened",
    "young",
    "goatee",
    "no beard",
    "sideburns",
    "5 o'clock shadow",
];

pub fn attribute_group(index: usize) -> AttributeGroup {
    AttributeGroup::ALL
        .into_iter()
        .find(|g| g.range().contains(&index))
        .unwrap_or(AttributeGroup::Age)
}

/// The 8 relation traits, in model head order.
pub const RELATIONS: [&str; NUM_RELATIONS] = [
    "dominant",
    "competitive",
    "trusting",
    "warm",
    "friendly",
    "attached",
    "demonstrative",
    "assured",
];

/// Facial region of a landmark point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Upper,
    Lower,
}

/// Landmark points normalized to the face box, with a per-point region map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub points: Vec<(f64, f64)>,
    pub regions: Vec<Region>,
}

impl Landmarks {
    pub fn new(points: Vec<(f64, f64)>, regions: Vec<Region>) -> Result<Self> {
        if points.len() != regions.len() {
            return Err(Error::ShapeMismatch {
                axis: "landmark region map",
                expected: points.len(),
                actual: regions.len(),
            });
        }
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(&p.0) || !(0.0..=1.0).contains(&p.1))
        {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} at {p:?} lies outside the unit box"
            )));
        }
        Ok(Self { points, regions })
    }

    /// Flattened `[x0, y0, x1, y1, ...]` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    /// Flattened coordinates of the points in `region`.
    pub fn region(&self, region: Region) -> Vec<f64> {
        self.points
            .iter()
            .zip(&self.regions)
            .filter(|(_, r)| **r == region)
            .flat_map(|(&(x, y), _)| [x, y])
            .collect()
    }
}

/// One face from an attribute corpus. `labels[i] == None` marks a missing
/// label; there is no default value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub landmarks: Landmarks,
    pub labels: Vec<Option<bool>>,
    pub dataset_id: String,
}

impl Sample {
    pub fn new(image: Tensor, landmarks: Landmarks, labels: Vec<Option<bool>>, dataset_id: String) -> Result<Self> {
        if labels.len() != NUM_ATTRIBUTES {
            return Err(Error::ShapeMismatch {
                axis: "attribute labels",
                expected: NUM_ATTRIBUTES,
                actual: labels.len(),
            });
        }
        Ok(Self {
            image,
            landmarks,
            labels,
            dataset_id,
        })
    }

    pub fn present_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Face bounding box: `x`, `y` are the upper-left corner in image pixels,
/// `w`, `h` are normalized by image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn validate(&self, image_dims: (usize, usize)) -> Result<()> {
        let (iw, ih) = (image_dims.0 as f64, image_dims.1 as f64);
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidArgument(format!("face box {self:?} has zero area")));
        }
        let inside = self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w * iw <= iw + 1e-9
            && self.y + self.h * ih <= ih + 1e-9;
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "face box {self:?} exceeds image {}x{}",
                image_dims.0, image_dims.1
            )));
        }
        Ok(())
    }

    /// Pixel rectangle `(x, y, width, height)`.
    pub fn pixel_rect(&self, image_dims: (usize, usize)) -> (f64, f64, f64, f64) {
        (self.x, self.y, self.w * image_dims.0 as f64, self.h * image_dims.1 as f64)
    }
}

/// A face pair with its eight relation labels. The left face is the one with
/// the smaller image x-coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub left_face: Tensor,
    pub right_face: Tensor,
    pub left_box: FaceBox,
    pub right_box: FaceBox,
    /// `(width, height)` in pixels.
    pub image_dims: (usize, usize),
    pub relations: [bool; NUM_RELATIONS],
}

impl PairSample {
    /// Builds a pair, swapping the faces when needed so the left face has the
    /// smaller x-coordinate.
    pub fn ordered(
        face_a: Tensor,
        box_a: FaceBox,
        face_b: Tensor,
        box_b: FaceBox,
        image_dims: (usize, usize),
        relations: [bool; NUM_RELATIONS],
    ) -> Result<Self> {
        box_a.validate(image_dims)?;
        box_b.validate(image_dims)?;
        let swap = box_b.x < box_a.x;
        let (left_face, left_box, right_face, right_box) = if swap {
            (face_b, box_b, face_a, box_a)
        } else {
            (face_a, box_a, face_b, box_b)
        };
        Ok(Self {
            left_face,
            right_face,
            left_box,
            right_box,
            image_dims,
            relations,
        })
    }
}

/// The 11 spatial cues of a pair:
/// `[x_l, y_l, w_l, h_l, x_r, y_r, w_r, h_r, (x_l-x_r)/w_l, (y_l-y_r)/h_l, w_l/w_r]`,
/// with `x`, `y` normalized by image width and height.
pub fn spatial_cues(
    left: &FaceBox,
    right: &FaceBox,
    image_dims: (usize, usize),
) -> Result<[f64; SPATIAL_CUE_DIM]> {
    for b in [left, right] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::InvalidArgument(format!("face box {b:?} has zero area")));
        }
    }
    if image_dims.0 == 0 || image_dims.1 == 0 {
        return Err(Error::InvalidArgument("image dimensions must be positive".into()));
    }
    let (iw, ih) = (image_dims.0 as f64, image_dims.1 as f64);
    let (xl, yl, xr, yr) = (left.x / iw, left.y / ih, right.x / iw, right.y / ih);
    Ok([
        xl,
        yl,
        left.w,
        left.h,
        xr,
        yr,
        right.w,
        right.h,
        (xl - xr) / left.w,
        (yl - yr) / left.h,
        left.w / right.w,
    ])
}

pub fn pair_spatial_cues(pair: &PairSample) -> Result<[f64; SPATIAL_CUE_DIM]> {
    spatial_cues(&pair.left_box, &pair.right_box, pair.image_dims)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Index batches for one epoch: a seeded permutation of `0..len` cut into
/// chunks of `batch_size`; the final batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Inverse-frequency resampling for relation training: draws `labels.len()`
/// indices with replacement, weighting each pair by the mean over traits of
/// the inverse frequency of its label value.
pub fn inverse_frequency_order(labels: &[[bool; NUM_RELATIONS]], seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let n = labels.len() as f64;
    let mut pos = [0usize; NUM_RELATIONS];
    for l in labels {
        for (p, &v) in pos.iter_mut().zip(l) {
            *p += v as usize;
        }
    }
    let weights: Vec<f64> = labels
        .iter()
        .map(|l| {
            l.iter()
                .zip(&pos)
                .map(|(&v, &p)| {
                    let count = if v { p } else { labels.len() - p };
                    n / count as f64
                })
                .sum::<f64>()
                / NUM_RELATIONS as f64
        })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let mut rng = epoch_rng(seed, epoch);
    Ok((0..labels.len()).map(|_| dist.sample(&mut rng)).collect())
}
