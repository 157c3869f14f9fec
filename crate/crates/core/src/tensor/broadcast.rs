// NumPy-style broadcasting for binary elementwise ops.

enum Kind {
    Same,
    // rhs repeats with period `n` over the flat output
    RhsPeriodic(usize),
    LhsPeriodic(usize),
    General,
}

pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    kind: Kind,
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let start = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[start..]
}

fn aligned_strides(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[pad + d] = if shape[d] == 1 && out[pad + d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

impl Broadcast {
    pub fn new(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        let rank = lhs.len().max(rhs.len());
        let mut out_shape = vec![0; rank];
        for i in 0..rank {
            let l = if i + lhs.len() >= rank { lhs[i + lhs.len() - rank] } else { 1 };
            let r = if i + rhs.len() >= rank { rhs[i + rhs.len() - rank] } else { 1 };
            out_shape[i] = match (l, r) {
                (l, r) if l == r => l,
                (1, r) => r,
                (l, 1) => l,
                _ => return None,
            };
        }
        let out_numel: usize = out_shape.iter().product();
        let lhs_numel: usize = lhs.iter().product();
        let rhs_numel: usize = rhs.iter().product();
        let kind = if strip_leading_ones(lhs) == strip_leading_ones(rhs) {
            Kind::Same
        } else if lhs_numel == out_numel && out_shape.ends_with(strip_leading_ones(rhs)) {
            Kind::RhsPeriodic(rhs_numel)
        } else if rhs_numel == out_numel && out_shape.ends_with(strip_leading_ones(lhs)) {
            Kind::LhsPeriodic(lhs_numel)
        } else {
            Kind::General
        };
        Some(Self {
            lhs_strides: aligned_strides(lhs, rank, &out_shape),
            rhs_strides: aligned_strides(rhs, rank, &out_shape),
            out_shape,
            kind,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        match self.kind {
            Kind::Same => (0..n).for_each(|i| f(i, i, i)),
            Kind::RhsPeriodic(p) => (0..n).for_each(|i| f(i, i, i % p)),
            Kind::LhsPeriodic(p) => (0..n).for_each(|i| f(i, i % p, i)),
            Kind::General => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut li, mut ri) = (0usize, 0usize);
                for i in 0..n {
                    f(i, li, ri);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        li += self.lhs_strides[d];
                        ri += self.rhs_strides[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        li -= self.lhs_strides[d] * idx[d];
                        ri -= self.rhs_strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
