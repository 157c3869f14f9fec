use super::{BatchNorm, Ctx, Init, Linear};
use crate::skeleton::NormalizedAdjacency;
use crate::tensor::{invalid, ParamId, Result, Tensor, Var};

/// `ReLU(BN(Â · X · W))` applied to every row of a `[R, N, F]` input.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bn: Option<BatchNorm>,
    adjacency: Tensor,
    pub in_features: usize,
    pub out_features: usize,
}

impl GcnLayer {
    /// `batchnorm = false` bypasses normalization (debug/testing only).
    pub fn new(
        init: &mut Init<'_>,
        adjacency: &NormalizedAdjacency,
        in_features: usize,
        out_features: usize,
        batchnorm: bool,
    ) -> Self {
        let n = adjacency.n();
        let weight = init.uniform("weight", &[in_features, out_features], in_features);
        let bn = batchnorm.then(|| BatchNorm::new(&mut init.scope("bn"), n * out_features));
        Self {
            weight,
            bn,
            adjacency: adjacency.matrix().clone(),
            in_features,
            out_features,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let n = self.n_joints();
        if shape.len() != 3 || shape[1] != n || shape[2] != self.in_features {
            return Err(invalid(
                "gcn",
                format!("expected [rows, {n}, {}], got {shape:?}", self.in_features),
            ));
        }
        let rows = shape[0];
        let adj = cx.constant(self.adjacency.clone());
        let propagated = cx.tape.matmul(adj, x)?;
        let w = cx.param(self.weight);
        let mixed = cx.tape.matmul(propagated, w)?;
        let normalized = match &self.bn {
            Some(bn) => {
                let flat = cx.tape.reshape(mixed, &[rows, n * self.out_features])?;
                let y = bn.forward(cx, flat)?;
                cx.tape.reshape(y, &[rows, n, self.out_features])?
            }
            None => mixed,
        };
        Ok(cx.tape.relu(normalized))
    }
}

/// Two stacked GCN layers plus a skip path: identity when the feature
/// widths agree, a bias-free linear projection otherwise.
#[derive(Clone, Debug)]
pub struct ResGcnBlock {
    pub first: GcnLayer,
    pub second: GcnLayer,
    pub skip: Option<Linear>,
}

impl ResGcnBlock {
    pub fn new(
        init: &mut Init<'_>,
        adjacency: &NormalizedAdjacency,
        in_features: usize,
        mid_features: usize,
        out_features: usize,
        batchnorm: bool,
    ) -> Self {
        let first = GcnLayer::new(&mut init.scope("gcn1"), adjacency, in_features, mid_features, batchnorm);
        let second = GcnLayer::new(&mut init.scope("gcn2"), adjacency, mid_features, out_features, batchnorm);
        let skip = (in_features != out_features)
            .then(|| Linear::new(&mut init.scope("skip"), in_features, out_features, false));
        Self { first, second, skip }
    }

    pub fn out_features(&self) -> usize {
        self.second.out_features
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(cx, x)?;
        let h = self.second.forward(cx, h)?;
        let skip = match &self.skip {
            Some(proj) => proj.forward(cx, x)?,
            None => x,
        };
        cx.tape.add(h, skip)
    }
}
