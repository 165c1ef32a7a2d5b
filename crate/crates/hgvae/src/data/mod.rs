//! Dataset ingestion, the skeleton definition, preprocessing, and a
//! synthetic motion generator.
//!
//! Motion sequences are `[J, 3, N]` position tensors (meters). The model
//! consumes the flattened node view `[3J, N]` (joint-major, x/y/z within
//! joint), centered per sequence by subtracting the root joint's mean
//! position, then DCT-encoded once at ingestion.

mod hgmd;
mod synth;

pub use hgmd::{read_dataset, write_dataset};
pub use synth::synthesize_motions;

use crate::dct::DctBasis;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Joint tree: names plus parent indices. Parents must precede children
/// (index order), which makes the tree acyclic by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    /// `None` marks the single root.
    pub parents: Vec<Option<usize>>,
    /// Bone length from each joint to its parent (meters); 0 at the root.
    pub bone_lengths: Vec<Real>,
    /// Unit rest direction of each bone in the parent frame.
    pub rest_directions: Vec<[Real; 3]>,
}

impl SkeletonSpec {
    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_count(&self) -> usize {
        3 * self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.names.len();
        if j == 0 {
            return Err(Error::InvalidArgument("skeleton: no joints".into()));
        }
        if self.parents.len() != j || self.bone_lengths.len() != j || self.rest_directions.len() != j
        {
            return Err(Error::InvalidArgument(
                "skeleton: field lengths disagree".into(),
            ));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidArgument(format!(
                "skeleton: expected exactly one root, found {roots}"
            )));
        }
        for (i, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(Error::InvalidArgument(format!(
                        "skeleton: joint {i} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The 18-joint human figure used by the synthetic generator.
    pub fn default_18() -> Self {
        // (name, parent, bone length, rest direction in parent frame)
        let table: [(&str, i64, Real, [Real; 3]); 18] = [
            ("pelvis", -1, 0.0, [0.0, 0.0, 0.0]),
            ("spine_lower", 0, 0.12, [0.0, 1.0, 0.0]),
            ("spine_upper", 1, 0.14, [0.0, 1.0, 0.0]),
            ("chest", 2, 0.12, [0.0, 1.0, 0.0]),
            ("neck", 3, 0.10, [0.0, 1.0, 0.0]),
            ("head", 4, 0.12, [0.0, 1.0, 0.0]),
            ("l_shoulder", 3, 0.18, [1.0, 0.0, 0.0]),
            ("l_elbow", 6, 0.28, [1.0, 0.0, 0.0]),
            ("l_wrist", 7, 0.26, [1.0, 0.0, 0.0]),
            ("r_shoulder", 3, 0.18, [-1.0, 0.0, 0.0]),
            ("r_elbow", 9, 0.28, [-1.0, 0.0, 0.0]),
            ("r_wrist", 10, 0.26, [-1.0, 0.0, 0.0]),
            ("l_hip", 0, 0.10, [1.0, 0.0, 0.0]),
            ("l_knee", 12, 0.42, [0.0, -1.0, 0.0]),
            ("l_ankle", 13, 0.40, [0.0, -1.0, 0.0]),
            ("r_hip", 0, 0.10, [-1.0, 0.0, 0.0]),
            ("r_knee", 15, 0.42, [0.0, -1.0, 0.0]),
            ("r_ankle", 16, 0.40, [0.0, -1.0, 0.0]),
        ];
        SkeletonSpec {
            names: table.iter().map(|t| t.0.to_string()).collect(),
            parents: table
                .iter()
                .map(|t| (t.1 >= 0).then_some(t.1 as usize))
                .collect(),
            bone_lengths: table.iter().map(|t| t.2).collect(),
            rest_directions: table.iter().map(|t| t.3).collect(),
        }
    }

    /// Parse the plain-text definition: one joint per line as
    /// `name parent_index bone_length dx dy dz` (parent `-1` for the
    /// root), `#` comments. Joints must be listed parents-first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut parents = Vec::new();
        let mut bone_lengths = Vec::new();
        let mut rest_directions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::Parse(format!(
                    "skeleton line {}: expected `name parent length dx dy dz`, got {line:?}",
                    lineno + 1
                )));
            }
            let parent: i64 = fields[1]
                .parse()
                .map_err(|_| Error::Parse(format!("skeleton line {}: bad parent", lineno + 1)))?;
            let nums: Vec<Real> = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map(|v| v as Real)
                        .map_err(|_| Error::Parse(format!("skeleton line {}: bad number", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            names.push(fields[0].to_string());
            parents.push((parent >= 0).then_some(parent as usize));
            bone_lengths.push(nums[0]);
            rest_directions.push([nums[1], nums[2], nums[3]]);
        }
        let spec = SkeletonSpec {
            names,
            parents,
            bone_lengths,
            rest_directions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# name parent bone_length dx dy dz\n");
        for i in 0..self.names.len() {
            let p = self.parents[i].map(|p| p as i64).unwrap_or(-1);
            let d = self.rest_directions[i];
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                self.names[i], p, self.bone_lengths[i], d[0], d[1], d[2]
            ));
        }
        out
    }
}

/// Uniform-length motion sequences with optional class labels.
#[derive(Debug, Clone)]
pub struct MotionDataset {
    /// Each `[J, 3, N]`.
    pub sequences: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub joint_count: usize,
    pub timepoints: usize,
    pub provenance: String,
}

impl MotionDataset {
    pub fn new(
        sequences: Vec<Tensor>,
        labels: Option<Vec<usize>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("dataset: no sequences".into()));
        }
        let shape = sequences[0].shape().to_vec();
        if shape.len() != 3 || shape[1] != 3 {
            return Err(Error::InvalidArgument(format!(
                "dataset: sequences must be [J, 3, N], got {shape:?}"
            )));
        }
        for s in &sequences {
            if s.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: shape,
                    rhs: s.shape().to_vec(),
                });
            }
            if !s.is_finite() {
                return Err(Error::NonFinite("dataset sequence".into()));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != sequences.len() {
                return Err(Error::InvalidArgument(format!(
                    "dataset: {} labels for {} sequences",
                    labels.len(),
                    sequences.len()
                )));
            }
        }
        Ok(MotionDataset {
            joint_count: shape[0],
            timepoints: shape[2],
            sequences,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn node_count(&self) -> usize {
        3 * self.joint_count
    }

    /// Shuffled split into (train, held-out) by fraction, deterministic
    /// per seed.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(MotionDataset, MotionDataset)> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if !(0.0..1.0).contains(&train_fraction) || self.len() < 2 {
            return Err(Error::InvalidArgument(
                "split: need a fraction in (0,1) and at least 2 sequences".into(),
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1, self.len() - 1);
        let pick = |ids: &[usize]| {
            MotionDataset::new(
                ids.iter().map(|&i| self.sequences[i].clone()).collect(),
                self.labels
                    .as_ref()
                    .map(|l| ids.iter().map(|&i| l[i]).collect()),
                self.provenance.clone(),
            )
        };
        Ok((pick(&idx[..cut])?, pick(&idx[cut..])?))
    }
}

/// `[J, 3, N]` -> `[3J, N]`: joint-major node order, x/y/z within joint.
/// Pure reshape; `unflatten_nodes` is its exact inverse.
pub fn flatten_nodes(seq: &Tensor) -> Result<Tensor> {
    let s = seq.shape();
    if s.len() != 3 || s[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "flatten_nodes",
            lhs: s.to_vec(),
            rhs: vec![0, 3, 0],
        });
    }
    Tensor::new(vec![s[0] * 3, s[2]], seq.data().to_vec())
}

/// Inverse of [`flatten_nodes`].
pub fn unflatten_nodes(mat: &Tensor) -> Result<Tensor> {
    let s = mat.shape();
    if s.len() != 2 || s[0] % 3 != 0 {
        return Err(Error::ShapeMismatch {
            op: "unflatten_nodes",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    Tensor::new(vec![s[0] / 3, 3, s[1]], mat.data().to_vec())
}

/// Subtract the root joint's mean position over `window` timepoints from
/// every joint, per dimension. Root is joint 0.
pub fn center_by_root(seq: &Tensor, window: std::ops::Range<usize>) -> Result<Tensor> {
    let s = seq.shape().to_vec();
    if s.len() != 3 || s[1] != 3 || window.end > s[2] || window.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "center_by_root: bad window {window:?} for shape {s:?}"
        )));
    }
    let n = s[2];
    let count = window.len() as Real;
    let mut mean = [0.0 as Real; 3];
    for (d, m) in mean.iter_mut().enumerate() {
        *m = seq.data()[d * n..][window.clone()].iter().sum::<Real>() / count;
    }
    let mut data = seq.data().to_vec();
    for j in 0..s[0] {
        for (d, m) in mean.iter().enumerate() {
            for t in 0..n {
                data[(j * 3 + d) * n + t] -= m;
            }
        }
    }
    Tensor::new(s, data)
}

/// Model-ready view of a dataset: centered flattened time-domain matrices
/// and their cached DCT encodings.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    /// Each `[3J, N]`, centered.
    pub inputs: Vec<Tensor>,
    /// Each `[3J, N]` of DCT coefficients.
    pub coeffs: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl PreparedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Center (full-window root mean), flatten and DCT-encode every sequence.
pub fn prepare(dataset: &MotionDataset, basis: &DctBasis) -> Result<PreparedDataset> {
    if basis.len() != dataset.timepoints {
        return Err(Error::InvalidArgument(format!(
            "prepare: DCT length {} vs dataset timepoints {}",
            basis.len(),
            dataset.timepoints
        )));
    }
    let mut inputs = Vec::with_capacity(dataset.len());
    let mut coeffs = Vec::with_capacity(dataset.len());
    for seq in &dataset.sequences {
        let centered = center_by_root(seq, 0..dataset.timepoints)?;
        let flat = flatten_nodes(&centered)?;
        coeffs.push(basis.forward_rows(&flat)?);
        inputs.push(flat);
    }
    Ok(PreparedDataset {
        inputs,
        coeffs,
        labels: dataset.labels.clone(),
    })
}

/// Per-(node, timepoint) arithmetic mean over a training split
/// (time domain).
pub fn compute_feature_means(inputs: &[Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("feature means: empty split".into()))?;
    let shape = first.shape().to_vec();
    let mut acc = vec![0.0; first.numel()];
    for t in inputs {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "feature_means",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / inputs.len() as Real;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Tensor::new(shape, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn default_skeleton_has_18_joints_and_54_nodes() {
        let spec = SkeletonSpec::default_18();
        spec.validate().unwrap();
        assert_eq!(spec.joint_count(), 18);
        assert_eq!(spec.node_count(), 54);
    }

    #[test]
    fn skeleton_text_round_trips() {
        let spec = SkeletonSpec::default_18();
        let parsed = SkeletonSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn skeleton_rejects_multiple_roots_and_forward_parents() {
        assert!(SkeletonSpec::parse("a -1 0 0 0 0\nb -1 0 0 0 0\n").is_err());
        assert!(SkeletonSpec::parse("a 1 0.1 1 0 0\nb -1 0 0 0 0\n").is_err());
    }

    #[test]
    fn feature_means_trivial_cases() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(compute_feature_means(&[a.clone()]).unwrap(), a);
        let m = compute_feature_means(&[a, b]).unwrap();
        assert_eq!(m.data(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(compute_feature_means(&[]).is_err());
    }

    #[test]
    fn feature_means_match_loop_oracle_on_random_split() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let tensors: Vec<Tensor> = (0..7)
            .map(|_| {
                let data = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
                Tensor::new(vec![2, 3], data).unwrap()
            })
            .collect();
        let means = compute_feature_means(&tensors).unwrap();
        for i in 0..6 {
            let mut acc = 0.0;
            for t in &tensors {
                acc += t.data()[i];
            }
            assert!((means.data()[i] - acc / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions_the_set() {
        let ds = synthesize_motions(&SkeletonSpec::default_18(), 10, 2, 8, 3).unwrap();
        let (a1, b1) = ds.split(0.7, 5).unwrap();
        let (a2, b2) = ds.split(0.7, 5).unwrap();
        assert_eq!(a1.len(), 7);
        assert_eq!(b1.len(), 3);
        assert_eq!(a1.sequences, a2.sequences);
        assert_eq!(b1.sequences, b2.sequences);
        assert_eq!(a1.len() + b1.len(), ds.len());
        // labels travel with their sequences
        let all_labels: usize = a1.labels.iter().flatten().count() + b1.labels.iter().flatten().count();
        assert_eq!(all_labels, 10);
    }

    #[test]
    fn centering_zeroes_root_mean() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Real> = (0..2 * 3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = Tensor::new(vec![2, 3, 5], data).unwrap();
        let c = center_by_root(&seq, 0..5).unwrap();
        for d in 0..3 {
            let m: Real = c.data()[d * 5..(d + 1) * 5].iter().sum::<Real>() / 5.0;
            assert!(m.abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(j in 1usize..6, n in 1usize..9, seed in 0u64..100) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Real> = (0..j * 3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seq = Tensor::new(vec![j, 3, n], data).unwrap();
            let back = unflatten_nodes(&flatten_nodes(&seq).unwrap()).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
