//! Bridging descriptor: a three-level landmark-shape hierarchy whose nodes
//! carry mean-HOG templates, and the per-face vector of L2 distances to
//! those templates.
//!
//! The top level clusters full landmark vectors into `top` nodes. Inside
//! each top node the upper-face and lower-face landmark sub-vectors are
//! clustered separately into `upper` and `lower` children. A node's template
//! is the mean HOG vector of its member faces.
//!
//! Descriptor order: the `top` top-level distances, then the upper children
//! of every top node (`top * upper` entries), then the lower children
//! (`top * lower`). Children pruned because a top node had too few members
//! are filled with the sentinel distance stored in the tree.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Landmarks, Region};
use crate::error::{Error, Result};
use crate::hog::{compute_hog, HogConfig};
use crate::kmeans::{kmeans, squared_distance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub top: usize,
    pub upper: usize,
    pub lower: usize,
    pub hog: HogConfig,
    /// Include the top-level templates in the descriptor (otherwise only the
    /// second-level templates are used).
    pub include_top: bool,
    pub max_iter: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            top: 10,
            upper: 10,
            lower: 10,
            hog: HogConfig::default(),
            include_top: true,
            max_iter: 100,
        }
    }
}

impl BridgeConfig {
    pub fn descriptor_len(&self) -> usize {
        let children = self.top * (self.upper + self.lower);
        if self.include_top {
            self.top + children
        } else {
            children
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub centroid: Vec<f64>,
    pub template: Vec<f64>,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNode {
    pub node: ClusterNode,
    /// At most `config.upper` entries; fewer when the node was pruned.
    pub upper: Vec<ClusterNode>,
    pub lower: Vec<ClusterNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub config: BridgeConfig,
    /// `(width, height)` of the images the templates were computed on.
    pub image_dims: (usize, usize),
    pub hog_dim: usize,
    pub nodes: Vec<TopNode>,
    /// Distance reported for pruned children: the largest face-to-template
    /// distance observed on the training corpus.
    pub sentinel: f64,
    /// Per-entry mean and standard deviation of training descriptors.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Assignment of a training face to one node at every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceAssignment {
    pub top: usize,
    pub upper: usize,
    pub lower: usize,
}

/// A face as seen by the bridge: landmarks plus a single-channel image.
#[derive(Debug, Clone, Copy)]
pub struct Face<'a> {
    pub landmarks: &'a Landmarks,
    pub image: &'a Tensor,
}

/// Distances from a face's HOG vector to every template.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceDescriptor {
    pub h: Vec<f64>,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, h, w] | [h, w] => Ok((w, h)),
        _ => Err(Error::InvalidShape(format!("expected a grayscale image, got {:?}", image.shape()))),
    }
}

pub fn face_hog(image: &Tensor, cfg: &HogConfig) -> Result<Vec<f64>> {
    let (w, h) = image_dims(image)?;
    compute_hog(image.data(), w, h, cfg)
}

fn mean_of(vectors: &[&Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vectors {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vectors.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn child_seed(seed: u64, node: usize, region: u64) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(node as u64 * 2 + region + 1))
}

/// Clusters `points` (indices into the corpus) into at most `k` groups and
/// returns the child nodes plus the child index of every member.
fn build_children(
    members: &[usize],
    points: &[Vec<f64>],
    hogs: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<ClusterNode>, Vec<usize>)> {
    let k = k.min(members.len());
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let sub: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
    let km = kmeans(&sub, k, seed, max_iter)?;
    let hog_dim = hogs[0].len();
    let nodes = (0..k)
        .map(|c| {
            let in_c: Vec<&Vec<f64>> = members
                .iter()
                .zip(&km.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(&i, _)| &hogs[i])
                .collect();
            ClusterNode {
                centroid: km.centroids[c].clone(),
                template: mean_of(&in_c, hog_dim),
                members: in_c.len(),
            }
        })
        .collect();
    Ok((nodes, km.assignments))
}

impl ClusterTree {
    /// Builds the hierarchy from a training corpus.
    pub fn build(corpus: &[Face<'_>], config: BridgeConfig, seed: u64) -> Result<(Self, Vec<FaceAssignment>)> {
        if config.top == 0 || config.upper == 0 || config.lower == 0 {
            return Err(Error::InvalidArgument("cluster counts must be >= 1".into()));
        }
        let needed = config.top * config.upper.max(config.lower);
        if corpus.len() < needed {
            return Err(Error::InsufficientData(format!(
                "bridge corpus has {} faces, needs at least {needed}",
                corpus.len()
            )));
        }
        let dims = image_dims(corpus[0].image)?;
        let n_points = corpus[0].landmarks.points.len();
        let mut hogs = Vec::with_capacity(corpus.len());
        for (i, f) in corpus.iter().enumerate() {
            if image_dims(f.image)? != dims {
                return Err(Error::InvalidShape(format!("face {i}: image size differs from the corpus")));
            }
            if f.landmarks.points.len() != n_points {
                return Err(Error::InvalidShape(format!("face {i}: landmark count differs from the corpus")));
            }
            hogs.push(face_hog(f.image, &config.hog)?);
        }
        let hog_dim = hogs[0].len();
        let full: Vec<Vec<f64>> = corpus.iter().map(|f| f.landmarks.flat()).collect();
        let upper: Vec<Vec<f64>> = corpus.iter().map(|f| f.landmarks.region(Region::Upper)).collect();
        let lower: Vec<Vec<f64>> = corpus.iter().map(|f| f.landmarks.region(Region::Lower)).collect();

        let top = kmeans(&full, config.top, seed, config.max_iter)?;
        let mut assignments = vec![FaceAssignment { top: 0, upper: 0, lower: 0 }; corpus.len()];
        let mut nodes = Vec::with_capacity(config.top);
        for t in 0..config.top {
            let members: Vec<usize> = (0..corpus.len()).filter(|&i| top.assignments[i] == t).collect();
            let member_hogs: Vec<&Vec<f64>> = members.iter().map(|&i| &hogs[i]).collect();
            let node = ClusterNode {
                centroid: top.centroids[t].clone(),
                template: mean_of(&member_hogs, hog_dim),
                members: members.len(),
            };
            let (up_nodes, up_assign) =
                build_children(&members, &upper, &hogs, config.upper, child_seed(seed, t, 0), config.max_iter)?;
            let (lo_nodes, lo_assign) =
                build_children(&members, &lower, &hogs, config.lower, child_seed(seed, t, 1), config.max_iter)?;
            for (j, &i) in members.iter().enumerate() {
                assignments[i] = FaceAssignment {
                    top: t,
                    upper: up_assign[j],
                    lower: lo_assign[j],
                };
            }
            nodes.push(TopNode {
                node,
                upper: up_nodes,
                lower: lo_nodes,
            });
        }
        let mut tree = Self {
            config,
            image_dims: dims,
            hog_dim,
            nodes,
            sentinel: 0.0,
            mean: Vec::new(),
            std: Vec::new(),
        };
        let mut sentinel: f64 = 0.0;
        for h in &hogs {
            for t in tree.templates().flatten() {
                sentinel = sentinel.max(libm::sqrt(squared_distance(h, t)));
            }
        }
        tree.sentinel = sentinel;
        let descriptors: Vec<Vec<f64>> = hogs.iter().map(|h| tree.descriptor_from_hog(h)).collect();
        let len = config.descriptor_len();
        let n = descriptors.len() as f64;
        let mean: Vec<f64> = (0..len).map(|j| descriptors.iter().map(|d| d[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..len)
            .map(|j| libm::sqrt(descriptors.iter().map(|d| (d[j] - mean[j]) * (d[j] - mean[j])).sum::<f64>() / n))
            .collect();
        tree.mean = mean;
        tree.std = std;
        Ok((tree, assignments))
    }

    /// Templates in descriptor order; `None` marks a pruned child.
    pub fn templates(&self) -> impl Iterator<Item = Option<&Vec<f64>>> {
        let top = self
            .nodes
            .iter()
            .map(|n| Some(&n.node.template))
            .filter(move |_| self.config.include_top);
        let upper = self
            .nodes
            .iter()
            .flat_map(move |n| (0..self.config.upper).map(move |u| n.upper.get(u).map(|c| &c.template)));
        let lower = self
            .nodes
            .iter()
            .flat_map(move |n| (0..self.config.lower).map(move |l| n.lower.get(l).map(|c| &c.template)));
        top.chain(upper).chain(lower)
    }

    pub fn descriptor_len(&self) -> usize {
        self.config.descriptor_len()
    }

    fn descriptor_from_hog(&self, hog: &[f64]) -> Vec<f64> {
        self.templates()
            .map(|t| match t {
                Some(t) => libm::sqrt(squared_distance(hog, t)),
                None => self.sentinel,
            })
            .collect()
    }

    pub fn extract(&self, image: &Tensor) -> Result<FaceDescriptor> {
        let hog = face_hog(image, &self.config.hog)?;
        if hog.len() != self.hog_dim {
            return Err(Error::ShapeMismatch {
                axis: "HOG dimensionality",
                expected: self.hog_dim,
                actual: hog.len(),
            });
        }
        Ok(FaceDescriptor {
            h: self.descriptor_from_hog(&hog),
        })
    }

    /// Zero-mean, unit-variance version of a descriptor using the training
    /// statistics; entries with zero variance are only centred.
    pub fn standardize(&self, d: &FaceDescriptor) -> Result<Vec<f64>> {
        if d.h.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                axis: "descriptor",
                expected: self.mean.len(),
                actual: d.h.len(),
            });
        }
        Ok(d.h
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { v - m })
            .collect())
    }

    /// Standardized descriptor of `image`.
    pub fn network_input(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.standardize(&self.extract(image)?)
    }

    /// Number of existing (unpruned) children per top node.
    pub fn child_counts(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().map(|n| (n.upper.len(), n.lower.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn face_set(n: usize, seed: u64) -> Vec<(Landmarks, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
                let regions = vec![Region::Upper, Region::Upper, Region::Upper, Region::Lower, Region::Lower, Region::Lower];
                let img = Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0));
                (Landmarks::new(pts, regions).unwrap(), img)
            })
            .collect()
    }

    fn faces(set: &[(Landmarks, Tensor)]) -> Vec<Face<'_>> {
        set.iter().map(|(l, i)| Face { landmarks: l, image: i }).collect()
    }

    #[test]
    fn single_cluster_collapse() {
        let set = face_set(12, 1);
        let cfg = BridgeConfig { top: 1, upper: 1, lower: 1, ..BridgeConfig::default() };
        let (tree, _) = ClusterTree::build(&faces(&set), cfg, 3).unwrap();
        let t: Vec<&Vec<f64>> = tree.templates().map(|t| t.unwrap()).collect();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0], t[1]);
        assert_eq!(t[1], t[2]);
        let hogs: Vec<Vec<f64>> = set.iter().map(|(_, i)| face_hog(i, &cfg.hog).unwrap()).collect();
        let mean = mean_of(&hogs.iter().collect::<Vec<_>>(), hogs[0].len());
        assert_eq!(*t[0], mean);
    }

    #[test]
    fn descriptor_layout_and_purity_of_assignment() {
        let set = face_set(60, 2);
        let cfg = BridgeConfig { top: 3, upper: 4, lower: 2, ..BridgeConfig::default() };
        let (tree, assign) = ClusterTree::build(&faces(&set), cfg, 9).unwrap();
        assert_eq!(tree.descriptor_len(), 3 + 12 + 6);
        assert_eq!(assign.len(), 60);
        for (i, a) in assign.iter().enumerate() {
            assert!(a.top < 3 && a.upper < tree.nodes[a.top].upper.len() && a.lower < tree.nodes[a.top].lower.len(), "{i}");
        }
        let d = tree.extract(&set[0].1).unwrap();
        assert_eq!(d.h.len(), 21);
        assert!(d.h.iter().all(|&v| v >= 0.0));
        assert_eq!(d, tree.extract(&set[0].1).unwrap());
        let z = tree.standardize(&d).unwrap();
        assert_eq!(z.len(), 21);
        let leaves = BridgeConfig { include_top: false, ..cfg };
        let (tree2, _) = ClusterTree::build(&faces(&set), leaves, 9).unwrap();
        assert_eq!(tree2.extract(&set[0].1).unwrap().h, d.h[3..].to_vec());
    }

    #[test]
    fn template_face_has_zero_distance() {
        let set = face_set(4, 5);
        let same: Vec<(Landmarks, Tensor)> = set.iter().map(|(l, _)| (l.clone(), set[0].1.clone())).collect();
        let cfg = BridgeConfig { top: 2, upper: 2, lower: 2, ..BridgeConfig::default() };
        let (tree, _) = ClusterTree::build(&faces(&same), cfg, 1).unwrap();
        assert!(tree.extract(&set[0].1).unwrap().h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pruned_children_use_sentinel() {
        // two far-apart landmark groups: 5 faces and 1 face
        let mut set = face_set(6, 8);
        for (i, (l, _)) in set.iter_mut().enumerate() {
            let v = if i == 5 { 0.95 } else { 0.05 };
            l.points.iter_mut().for_each(|p| *p = (v, v));
        }
        let cfg = BridgeConfig { top: 2, upper: 3, lower: 3, ..BridgeConfig::default() };
        let (tree, _) = ClusterTree::build(&faces(&set), cfg, 0).unwrap();
        let counts = tree.child_counts();
        assert!(counts.contains(&(1, 1)));
        let d = tree.extract(&set[0].1).unwrap();
        assert_eq!(d.h.len(), 2 + 6 + 6);
        assert!(d.h.iter().filter(|&&v| v == tree.sentinel).count() >= 4);
    }

    #[test]
    fn rejects_small_corpus_and_wrong_geometry() {
        let set = face_set(5, 3);
        assert!(ClusterTree::build(&faces(&set), BridgeConfig::default(), 0).is_err());
        let cfg = BridgeConfig { top: 1, upper: 1, lower: 1, ..BridgeConfig::default() };
        let (tree, _) = ClusterTree::build(&faces(&set), cfg, 0).unwrap();
        assert!(tree.extract(&Tensor::zeros(&[1, 24, 24])).is_err());
    }
}
