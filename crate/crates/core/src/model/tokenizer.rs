use super::layers::{Binder, Init, Linear};
use crate::tensornet::{Graph, Real, TensorError, Var};

/// Shared per-point MLP, max-pool, pooled-feature concatenation, second
/// MLP and a final max-pool: one token per point group.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MiniPointNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    l4: Linear,
}

impl MiniPointNet {
    /// `zero_out` zero-initialises the last layer so the branch starts silent.
    pub fn new<T: Real>(b: &mut Binder<T>, name: &str, widths: [usize; 3], dim: usize, zero_out: bool) -> Self {
        let [h1, h2, h3] = widths;
        Self {
            l1: Linear::new(b, &format!("{name}.l1"), 3, h1, Init::Xavier),
            l2: Linear::new(b, &format!("{name}.l2"), h1, h2, Init::Xavier),
            l3: Linear::new(b, &format!("{name}.l3"), 2 * h2, h3, Init::Xavier),
            l4: Linear::new(
                b,
                &format!("{name}.l4"),
                h3,
                dim,
                if zero_out { Init::Zeros } else { Init::Xavier },
            ),
        }
    }

    /// Per-point features before the final pool. `x: [groups * n, 3]`.
    pub fn point_features<T: Real>(&self, g: &mut Graph<T>, x: Var, groups: usize, n: usize) -> Result<Var, TensorError> {
        let h = self.l1.fwd(g, x)?;
        let h = g.relu(h);
        let h = self.l2.fwd(g, h)?;
        let w = g.shape(h)[1];
        let grouped = g.reshape(h, &[groups, n, w])?;
        let pooled = g.max_axis(grouped, 1)?;
        let idx: Vec<usize> = (0..groups).flat_map(|p| std::iter::repeat_n(p, n)).collect();
        let spread = g.gather_rows(pooled, &idx)?;
        let h = g.concat(&[spread, h], 1)?;
        let h = self.l3.fwd(g, h)?;
        let h = g.relu(h);
        self.l4.fwd(g, h)
    }
}

/// Tokens `[groups, C]` from points `[groups * n, 3]`, with an optional
/// flow branch whose per-point features are added before pooling.
pub(crate) fn tokenize<T: Real>(
    g: &mut Graph<T>,
    net: &MiniPointNet,
    x: Var,
    flow: Option<(&MiniPointNet, Var)>,
    groups: usize,
    n: usize,
) -> Result<Var, TensorError> {
    let mut f = net.point_features(g, x, groups, n)?;
    if let Some((fnet, fx)) = flow {
        let ff = fnet.point_features(g, fx, groups, n)?;
        f = g.add(f, ff)?;
    }
    let c = g.shape(f)[1];
    let f = g.reshape(f, &[groups, n, c])?;
    g.max_axis(f, 1)
}
