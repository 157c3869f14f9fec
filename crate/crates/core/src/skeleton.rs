//! Skeleton connectivity and the symmetric-normalized adjacency used by
//! every graph convolution.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a skeleton needs at least {min} joints, got {got}")]
    TooFewJoints { min: usize, got: usize },
    #[error("edge ({0}, {1}) references a joint outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on joint {0}; self-loops are added during normalization")]
    SelfLoop(usize),
    #[error("row {0} of the augmented adjacency sums to zero")]
    ZeroDegree(usize),
    #[error("unknown graph mode `{0}` (expected `skeleton` or `full`)")]
    UnknownMode(String),
}

/// Which edge set the graph layers propagate over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GraphMode {
    /// Kinematic tree of the skeleton.
    #[default]
    Skeleton,
    /// Every pair of joints connected.
    Full,
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMode::Skeleton => "skeleton",
            GraphMode::Full => "full",
        })
    }
}

impl FromStr for GraphMode {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skeleton" => Ok(GraphMode::Skeleton),
            "full" => Ok(GraphMode::Full),
            other => Err(GraphError::UnknownMode(other.to_string())),
        }
    }
}

/// Parent of each joint in the 17-joint Human3.6M layout (-1 = root).
const H36M_17_PARENTS: [i32; 17] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
const H36M_17_NAMES: [&str; 17] = [
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "thorax",
    "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
];

/// Parent of each joint in the full 32-joint Human3.6M layout (-1 = root).
const H36M_32_PARENTS: [i32; 32] = [
    -1, 0, 1, 2, 3, 4, 0, 6, 7, 8, 9, 0, 11, 12, 13, 14, 12, 16, 17, 18, 19, 20, 19, 22, 12,
    24, 25, 26, 27, 28, 27, 30,
];

/// Number of chains hanging off the root in the generic layout
/// (spine, two arms, two legs).
const GENERIC_CHAINS: usize = 5;

/// Undirected joint graph. Edges are stored as `(min, max)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    n_joints: usize,
    edges: Vec<(usize, usize)>,
    joint_names: Option<Vec<String>>,
}

impl SkeletonTopology {
    pub fn new(n_joints: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n_joints == 0 {
            return Err(GraphError::TooFewJoints { min: 1, got: 0 });
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n_joints || b >= n_joints {
                return Err(GraphError::EdgeOutOfRange(a, b, n_joints));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            n_joints,
            edges: set.into_iter().collect(),
            joint_names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        debug_assert_eq!(names.len(), self.n_joints);
        self.joint_names = Some(names);
        self
    }

    fn from_parents(parents: &[i32]) -> Self {
        let edges: Vec<_> = parents
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(j, &p)| (p as usize, j))
            .collect();
        Self::new(parents.len(), &edges).expect("static parent table is valid")
    }

    /// Pelvis-rooted kinematic tree.
    ///
    /// 17 and 32 joints use the Human3.6M orderings. Any other count uses
    /// a root plus five chains: joint `i > 0` joins chain `(i - 1) % 5` and
    /// hangs off the previous joint of that chain (or the root).
    pub fn default_for(n_joints: usize) -> Result<Self, GraphError> {
        if n_joints < 2 {
            return Err(GraphError::TooFewJoints { min: 2, got: n_joints });
        }
        Ok(match n_joints {
            17 => Self::from_parents(&H36M_17_PARENTS)
                .with_names(H36M_17_NAMES.iter().map(|s| s.to_string()).collect()),
            32 => Self::from_parents(&H36M_32_PARENTS),
            n => {
                let parents: Vec<i32> = (0..n)
                    .map(|i| match i {
                        0 => -1,
                        i if i <= GENERIC_CHAINS => 0,
                        i => (i - GENERIC_CHAINS) as i32,
                    })
                    .collect();
                Self::from_parents(&parents)
            }
        })
    }

    pub fn fully_connected(n_joints: usize) -> Self {
        let edges: Vec<_> = (0..n_joints)
            .flat_map(|a| (a + 1..n_joints).map(move |b| (a, b)))
            .collect();
        Self::new(n_joints, &edges).expect("complete graph is valid")
    }

    pub fn for_mode(n_joints: usize, mode: GraphMode) -> Result<Self, GraphError> {
        match mode {
            GraphMode::Skeleton => Self::default_for(n_joints),
            GraphMode::Full => Ok(Self::fully_connected(n_joints)),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn joint_names(&self) -> Option<&[String]> {
        self.joint_names.as_deref()
    }

    /// Relabels joints so that old joint `j` becomes `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(self.n_joints, &edges).expect("permutation keeps edges valid")
    }

    /// Binary adjacency without self-loops, row-major `N × N`.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.n_joints;
        let mut a = vec![0.0; n * n];
        for &(i, j) in &self.edges {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        a
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` for a topology.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Tensor,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.data()[i * self.n() + j]
    }

    /// Identity propagation, handy for tests and single-joint graphs.
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Tensor::eye(n),
        }
    }
}

pub fn normalize(topo: &SkeletonTopology) -> Result<NormalizedAdjacency, GraphError> {
    let n = topo.n_joints();
    let mut a = topo.adjacency();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
        if deg <= 0.0 {
            return Err(GraphError::ZeroDegree(i));
        }
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Ok(NormalizedAdjacency {
        matrix: Tensor::new(&[n, n], a).expect("n × n"),
    })
}
