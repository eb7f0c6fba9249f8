//! Parameter bundles for the layers shared by the sensor and text stacks.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{AttentionPlan, Graph, RopeTables, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// `y = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights drawn from `N(0, gain² / in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), output, input, gain / (input as f64).sqrt(), rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), 1, output));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, out_gain, true, rng),
            heads,
        }
    }

    /// Attention of `queries` over `memory`; rotary tables, when given, apply
    /// to queries and keys respectively.
    pub fn apply(
        &self,
        g: &mut Graph,
        queries: Var,
        memory: Var,
        plan: Rc<AttentionPlan>,
        q_rope: Option<Rc<RopeTables>>,
        k_rope: Option<Rc<RopeTables>>,
    ) -> Var {
        let mut q = self.wq.apply(g, queries);
        let mut k = self.wk.apply(g, memory);
        let v = self.wv.apply(g, memory);
        if let Some(t) = q_rope {
            q = g.rope(q, t, self.heads);
        }
        if let Some(t) = k_rope {
            k = g.rope(k, t, self.heads);
        }
        let a = g.attention(q, k, v, plan, self.heads);
        self.wo.apply(g, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, 1.0, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, out_gain, true, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.apply(g, x);
        let h = g.gelu(h);
        self.down.apply(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.up.params().into_iter().chain(self.down.params()).collect()
    }
}

/// Pre-LN transformer block: self-attention, optional cross-attention, and a
/// feed-forward layer, each wrapped as `x + f(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        with_cross: bool,
        total_layers: usize,
        rng: &mut R,
    ) -> Self {
        // Residual branch outputs are shrunk so the stream variance stays O(1) with depth.
        let out_gain = 1.0 / (2.0 * total_layers.max(1) as f64).sqrt();
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, out_gain, rng),
            cross: with_cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
                    MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, out_gain, rng),
                )
            }),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, out_gain, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        self_plan: Rc<AttentionPlan>,
        rope: Option<Rc<RopeTables>>,
        cross: Option<(Var, Rc<AttentionPlan>)>,
    ) -> Var {
        let h = self.ln_self.apply(g, x);
        let a = self.self_attn.apply(g, h, h, self_plan, rope.clone(), rope);
        let mut x = g.add(x, a);
        if let (Some((ln, attn)), Some((memory, plan))) = (&self.cross, cross) {
            let h = ln.apply(g, x);
            let c = attn.apply(g, h, memory, plan, None, None);
            x = g.add(x, c);
        }
        let h = self.ln_ffn.apply(g, x);
        let f = self.ffn.apply(g, h);
        g.add(x, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln_self.params();
        p.extend(self.self_attn.params());
        if let Some((ln, attn)) = &self.cross {
            p.extend(ln.params());
            p.extend(attn.params());
        }
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn.params());
        p
    }
}
