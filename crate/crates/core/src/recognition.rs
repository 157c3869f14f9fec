//! Action recognition: frame-index augmentation, a convolutional trunk and a
//! linear-chain CRF over per-frame labels.

use thiserror::Error;

use crate::encoder::HIDDEN_PER_JOINT;
use crate::layers::{spatial_max_pool, temporal_max_pool, Ctx, FrameConv, Init, Linear, ResCnn};
use crate::tensor::{invalid, ParamId, Result, Tensor, Var};

pub const CRF_L2: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrfError {
    #[error("label {label} out of range for {n_labels} labels")]
    LabelOutOfRange { label: usize, n_labels: usize },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unary scores have {got} values, expected a multiple of {n_labels}")]
    BadUnary { got: usize, n_labels: usize },
    #[error("empty sequence")]
    Empty,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain chain CRF over `L` labels: `transitions[i * L + j]` scores label
/// `i` followed by `j`. Unary scores are `τ × L`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    pub n_labels: usize,
    pub transitions: Vec<f64>,
}

impl Crf {
    pub fn new(n_labels: usize, transitions: Vec<f64>) -> Self {
        assert_eq!(transitions.len(), n_labels * n_labels);
        Self { n_labels, transitions }
    }

    pub fn zeros(n_labels: usize) -> Self {
        Self::new(n_labels, vec![0.0; n_labels * n_labels])
    }

    fn omega(&self, i: usize, j: usize) -> f64 {
        self.transitions[i * self.n_labels + j]
    }

    fn frames(&self, unary: &[f64]) -> std::result::Result<usize, CrfError> {
        let l = self.n_labels;
        if unary.is_empty() {
            return Err(CrfError::Empty);
        }
        if unary.len() % l != 0 {
            return Err(CrfError::BadUnary { got: unary.len(), n_labels: l });
        }
        Ok(unary.len() / l)
    }

    fn check_path(&self, unary: &[f64], path: &[usize]) -> std::result::Result<(), CrfError> {
        let tau = self.frames(unary)?;
        if path.len() != tau {
            return Err(CrfError::LengthMismatch(path.len(), tau));
        }
        if let Some(&label) = path.iter().find(|&&y| y >= self.n_labels) {
            return Err(CrfError::LabelOutOfRange { label, n_labels: self.n_labels });
        }
        Ok(())
    }

    /// Unnormalized log-score of a label path: `((u_0 + ω + u_1) + ω + u_2) …`.
    pub fn score(&self, unary: &[f64], path: &[usize]) -> std::result::Result<f64, CrfError> {
        self.check_path(unary, path)?;
        let l = self.n_labels;
        let mut s = unary[path[0]];
        for t in 1..path.len() {
            s = (s + self.omega(path[t - 1], path[t])) + unary[t * l + path[t]];
        }
        Ok(s)
    }

    /// Forward-algorithm log-space messages, `τ × L`.
    fn alphas(&self, unary: &[f64]) -> std::result::Result<Vec<f64>, CrfError> {
        let tau = self.frames(unary)?;
        let l = self.n_labels;
        let mut alpha = unary[..l].to_vec();
        for t in 1..tau {
            let prev = &alpha[(t - 1) * l..t * l];
            let next: Vec<f64> = (0..l)
                .map(|j| log_sum_exp((0..l).map(|i| prev[i] + self.omega(i, j))) + unary[t * l + j])
                .collect();
            alpha.extend(next);
        }
        Ok(alpha)
    }

    pub fn log_partition(&self, unary: &[f64]) -> std::result::Result<f64, CrfError> {
        let alpha = self.alphas(unary)?;
        let l = self.n_labels;
        Ok(log_sum_exp(alpha[alpha.len() - l..].iter().copied()))
    }

    pub fn log_prob(&self, unary: &[f64], path: &[usize]) -> std::result::Result<f64, CrfError> {
        Ok(self.score(unary, path)? - self.log_partition(unary)?)
    }

    /// `log Z − score(path) + (α/2)‖ω‖²`.
    pub fn nll(&self, unary: &[f64], path: &[usize], alpha: f64) -> std::result::Result<f64, CrfError> {
        let l2: f64 = self.transitions.iter().map(|w| w * w).sum();
        Ok(-self.log_prob(unary, path)? + 0.5 * alpha * l2)
    }

    /// Per-frame label marginals, `τ × L`.
    pub fn marginals(&self, unary: &[f64]) -> std::result::Result<Vec<f64>, CrfError> {
        let alpha = self.alphas(unary)?;
        let tau = self.frames(unary)?;
        let l = self.n_labels;
        let mut beta = vec![0.0; tau * l];
        for t in (0..tau - 1).rev() {
            for i in 0..l {
                beta[t * l + i] =
                    log_sum_exp((0..l).map(|j| self.omega(i, j) + unary[(t + 1) * l + j] + beta[(t + 1) * l + j]));
            }
        }
        let log_z = log_sum_exp(alpha[(tau - 1) * l..].iter().copied());
        Ok(alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect())
    }

    /// Highest-scoring path and its score. Ties go to the smaller label,
    /// both when choosing predecessors and at the final frame.
    pub fn viterbi(&self, unary: &[f64]) -> std::result::Result<(Vec<usize>, f64), CrfError> {
        let tau = self.frames(unary)?;
        let l = self.n_labels;
        let mut delta = unary[..l].to_vec();
        let mut back = vec![0usize; tau * l];
        for t in 1..tau {
            let mut next = vec![0.0; l];
            for j in 0..l {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for i in 0..l {
                    let s = delta[i] + self.omega(i, j);
                    if s > best {
                        best = s;
                        arg = i;
                    }
                }
                next[j] = best + unary[t * l + j];
                back[t * l + j] = arg;
            }
            delta = next;
        }
        let (mut last, mut best) = (0, f64::NEG_INFINITY);
        for (j, &s) in delta.iter().enumerate() {
            if s > best {
                best = s;
                last = j;
            }
        }
        let mut path = vec![last; tau];
        for t in (1..tau).rev() {
            path[t - 1] = back[t * l + path[t]];
        }
        Ok((path, best))
    }

    /// Sequence label: the most frequent label on the Viterbi path.
    pub fn classify(&self, unary: &[f64]) -> std::result::Result<usize, CrfError> {
        let (path, _) = self.viterbi(unary)?;
        Ok(path_mode(&path, self.n_labels))
    }
}

/// Most frequent label, ties to the smaller index.
pub fn path_mode(path: &[usize], n_labels: usize) -> usize {
    let mut counts = vec![0usize; n_labels];
    for &y in path {
        counts[y] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// Fraction of frames where the two label sequences disagree.
pub fn zero_one_cost(truth: &[usize], pred: &[usize]) -> std::result::Result<f64, CrfError> {
    if truth.len() != pred.len() {
        return Err(CrfError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(CrfError::Empty);
    }
    let wrong = truth.iter().zip(pred).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// `(t + 1) / τ` at every position of a `[τ, width]` grid.
pub fn frame_index(tau: usize, width: usize) -> Tensor {
    Tensor::from_fn(&[tau, width], |i| (i / width + 1) as f64 / tau as f64)
}

/// Batched CRF negative log-likelihood on the tape, averaged over the batch,
/// plus `(α/2)‖ω‖²`. `unary` is `[τ, B, L]`; `labels[b]` is the path of
/// sample `b`.
pub fn crf_nll(cx: &mut Ctx<'_>, unary: Var, transitions: Var, labels: &[Vec<usize>], alpha: f64) -> Result<Var> {
    let shape = cx.tape.shape(unary).to_vec();
    if shape.len() != 3 {
        return Err(invalid("crf_nll", format!("expected [τ, B, L], got {shape:?}")));
    }
    let (tau, batch, l) = (shape[0], shape[1], shape[2]);
    if labels.len() != batch || labels.iter().any(|p| p.len() != tau) {
        return Err(invalid("crf_nll", "label paths must be τ long, one per sample"));
    }
    if let Some(&y) = labels.iter().flatten().find(|&&y| y >= l) {
        return Err(invalid("crf_nll", CrfError::LabelOutOfRange { label: y, n_labels: l }.to_string()));
    }

    // log Z by the forward algorithm; the max shift is a constant, so the
    // composed log-sum-exp has exact gradients and no kinks.
    let mut alpha_t = {
        let u0 = cx.tape.slice(unary, 0, 0, 1)?;
        cx.tape.reshape(u0, &[batch, l])?
    };
    for t in 1..tau {
        let a = cx.tape.reshape(alpha_t, &[batch, l, 1])?;
        let scores = cx.tape.add(a, transitions)?;
        let m = column_max(cx.tape.value(scores), l);
        let shift = cx.constant(m.clone());
        let centered = cx.tape.sub(scores, shift)?;
        let e = cx.tape.exp(centered);
        let s = cx.tape.sum_axis(e, 1, false)?;
        let lse = cx.tape.log(s)?;
        let m = cx.constant(m.reshape(&[batch, l])?);
        let lse = cx.tape.add(lse, m)?;
        let ut = cx.tape.slice(unary, 0, t, 1)?;
        let ut = cx.tape.reshape(ut, &[batch, l])?;
        alpha_t = cx.tape.add(lse, ut)?;
    }
    let m: Vec<f64> = cx
        .tape
        .value(alpha_t)
        .data()
        .chunks(l)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = cx.constant(Tensor::new(&[batch, 1], m.clone())?);
    let centered = cx.tape.sub(alpha_t, shift)?;
    let e = cx.tape.exp(centered);
    let s = cx.tape.sum_axis(e, 1, false)?;
    let log_z = cx.tape.log(s)?;
    let log_z = cx.tape.sum(log_z);
    let log_z = cx.tape.add_scalar(log_z, m.iter().sum());

    let mut onehot = Tensor::zeros(&[tau, batch, l]);
    let mut counts = Tensor::zeros(&[l, l]);
    for (b, path) in labels.iter().enumerate() {
        for (t, &y) in path.iter().enumerate() {
            onehot.data_mut()[(t * batch + b) * l + y] = 1.0;
            if t > 0 {
                counts.data_mut()[path[t - 1] * l + y] += 1.0;
            }
        }
    }
    let onehot = cx.constant(onehot);
    let picked = cx.tape.mul(unary, onehot)?;
    let unary_score = cx.tape.sum(picked);
    let counts = cx.constant(counts);
    let used = cx.tape.mul(transitions, counts)?;
    let transition_score = cx.tape.sum(used);
    let gold = cx.tape.add(unary_score, transition_score)?;

    let nll = cx.tape.sub(log_z, gold)?;
    let nll = cx.tape.scale(nll, 1.0 / batch as f64);
    let sq = cx.tape.mul(transitions, transitions)?;
    let l2 = cx.tape.sum(sq);
    let l2 = cx.tape.scale(l2, 0.5 * alpha);
    cx.tape.add(nll, l2)
}

// max over axis 1 of a [B, L, L] tensor, kept as [B, 1, L]
fn column_max(t: &Tensor, l: usize) -> Tensor {
    let batch = t.numel() / (l * l);
    let d = t.data();
    Tensor::from_fn(&[batch, 1, l], |idx| {
        let (b, j) = (idx / l, idx % l);
        (0..l).map(|i| d[(b * l + i) * l + j]).fold(f64::NEG_INFINITY, f64::max)
    })
}

#[derive(Clone, Debug)]
pub struct RecognitionHead {
    pub index_cnn: ResCnn,
    pub lift: Linear,
    pub conv1: FrameConv,
    pub conv2: FrameConv,
    pub unary: Linear,
    pub transitions: ParamId,
    pub n_joints: usize,
    pub tau: usize,
    pub n_labels: usize,
}

impl RecognitionHead {
    pub fn new(init: &mut Init<'_>, n_joints: usize, tau: usize, tc_hidden: usize, n_labels: usize) -> Self {
        let (w8, w16) = (n_joints * HIDDEN_PER_JOINT, n_joints * 2 * HIDDEN_PER_JOINT);
        Self {
            index_cnn: ResCnn::new(&mut init.scope("index_cnn"), tau, tc_hidden),
            lift: Linear::new(&mut init.scope("lift"), 3, w8, true),
            conv1: FrameConv::new(&mut init.scope("conv1"), w8, w16),
            conv2: FrameConv::new(&mut init.scope("conv2"), w16, w16),
            unary: Linear::new(&mut init.scope("unary"), w16, n_labels, true),
            transitions: init.constant("transitions", &[n_labels, n_labels], 0.0, true),
            n_joints,
            tau,
            n_labels,
        }
    }

    /// `P + ResCnn(frame index)`, broadcast over the batch: `[τ, B, N, 3]`.
    pub fn augment(&self, cx: &mut Ctx<'_>, p: Var) -> Result<Var> {
        let shape = cx.tape.shape(p).to_vec();
        if shape.len() != 4 || shape[0] != self.tau || shape[2] != self.n_joints || shape[3] != 3 {
            return Err(invalid(
                "augment",
                format!("expected [{}, B, {}, 3], got {shape:?}", self.tau, self.n_joints),
            ));
        }
        let index = cx.constant(frame_index(self.tau, 3 * self.n_joints));
        let semantic = self.index_cnn.forward(cx, index)?;
        let semantic = cx.tape.reshape(semantic, &[self.tau, 1, self.n_joints, 3])?;
        cx.tape.add(p, semantic)
    }

    /// Joint max-pool, lift and two conv + temporal-pool stages:
    /// `[τ, B, N, 3] -> [τ, B, N·16]`.
    pub fn trunk(&self, cx: &mut Ctx<'_>, aug: Var) -> Result<Var> {
        let pooled = spatial_max_pool(cx, aug)?;
        let x = self.lift.forward(cx, pooled)?;
        let x = self.conv1.forward(cx, x)?;
        let x = temporal_max_pool(cx, x)?;
        let x = self.conv2.forward(cx, x)?;
        temporal_max_pool(cx, x)
    }

    /// Per-frame label scores `[τ, B, L]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, p: Var) -> Result<Var> {
        let aug = self.augment(cx, p)?;
        let features = self.trunk(cx, aug)?;
        self.unary.forward(cx, features)
    }

    pub fn crf(&self, params: &crate::tensor::ParamStore) -> Crf {
        Crf::new(self.n_labels, params.value(self.transitions).data().to_vec())
    }
}
