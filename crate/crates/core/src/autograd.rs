//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every trainable parameter that the output depends on. Parameters flagged as
//! non-trainable act as constants, so frozen layers never receive gradient.
//!
//! Heavy operations (multi-head attention, layer norm, cross-entropy, the
//! symmetric contrastive loss) are fused so that their backward passes stay
//! cheap and numerically stable.

use std::rc::Rc;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, gemm_strided, Matrix, StridedRef};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a packed batch: queries `q_start..q_start+q_len`
/// attend to keys `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Masking rules shared by every segment of one attention call.
#[derive(Clone, Debug, Default)]
pub struct AttentionPlan {
    pub segments: Vec<AttnSegment>,
    /// Key `j` is visible to query `i` only if `j <= i + (k_len - q_len)` (segment-local).
    pub causal: bool,
    /// Indexed by global key row; `false` keys are never attended to.
    pub key_valid: Option<Vec<bool>>,
    /// Group ids per global query row and per global key row; attention is
    /// restricted to matching ids.
    pub groups: Option<(Vec<usize>, Vec<usize>)>,
}

impl AttentionPlan {
    pub fn new(segments: Vec<AttnSegment>) -> Self {
        Self {
            segments,
            ..Default::default()
        }
    }

    #[inline]
    fn allowed(&self, seg: &AttnSegment, qi: usize, kj: usize) -> bool {
        if self.causal && kj + seg.q_len > qi + seg.k_len {
            return false;
        }
        let gk = seg.k_start + kj;
        if let Some(valid) = &self.key_valid {
            if !valid[gk] {
                return false;
            }
        }
        if let Some((qg, kg)) = &self.groups {
            if qg[seg.q_start + qi] != kg[gk] {
                return false;
            }
        }
        true
    }
}

/// Rotation tables for rotary position encoding: one angle per (row, pair).
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Matrix,
    pub sin: Matrix,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Rope {
        x: Var,
        tables: Rc<RopeTables>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<AttentionPlan>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
        weights: Option<Vec<f64>>,
        denoms: Vec<f64>,
    },
    RowScale {
        x: Var,
        scale: Vec<f64>,
    },
    ResizeCols {
        x: Var,
        base: usize,
        target: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        probs: Matrix,
    },
    Contrastive {
        x: Var,
        y: Var,
        logit_scale: Var,
        cache: ContrastiveCache,
    },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Intermediate results of the symmetric contrastive loss.
#[derive(Clone, Debug)]
pub struct ContrastiveCache {
    /// Similarity logits `s · x yᵀ`.
    pub logits: Matrix,
    /// Row-wise softmax of the logits (sensor-to-text).
    pub row_probs: Matrix,
    /// Column-wise softmax of the logits (text-to-sensor), stored untransposed.
    pub col_probs: Matrix,
    pub scale: f64,
    pub clamped: bool,
}

/// Computes the symmetric InfoNCE loss `-(1/N)(Σ log p_row[i,i] + Σ log p_col[i,i])`
/// for similarity logits `scale · x yᵀ`.
pub fn contrastive_forward(x: &Matrix, y: &Matrix, scale: f64) -> (f64, ContrastiveCache) {
    let n = x.rows();
    let mut logits = x.matmul_t(y);
    logits.scale_assign(scale);
    let mut row_probs = Matrix::zeros(n, n);
    let mut col_probs = Matrix::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        let lse = m + z.ln();
        loss -= row[i] - lse;
        for j in 0..n {
            row_probs.set(i, j, (row[j] - lse).exp());
        }
    }
    for j in 0..n {
        let m = (0..n).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (logits.get(i, j) - m).exp()).sum();
        let lse = m + z.ln();
        loss -= logits.get(j, j) - lse;
        for i in 0..n {
            col_probs.set(i, j, (logits.get(i, j) - lse).exp());
        }
    }
    let cache = ContrastiveCache {
        logits,
        row_probs,
        col_probs,
        scale,
        clamped: false,
    };
    (loss / n as f64, cache)
}

/// Gradient of the symmetric contrastive loss with respect to the logits.
pub fn contrastive_logit_grad(cache: &ContrastiveCache) -> Matrix {
    let n = cache.logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            g.set(
                i,
                j,
                (cache.row_probs.get(i, j) + cache.col_probs.get(i, j) - delta) * inv_n,
            );
        }
    }
    g
}

/// `tanh` through one `exp`; absolute error stays near machine epsilon and it
/// is several times cheaper than the libm routine.
#[inline]
fn tanh_exp(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + tanh_exp(C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = tanh_exp(inner);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Tape of operations over a borrowed parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter node always holds a value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { strip_cache(op) };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let requires_grad = self.grad_enabled && self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, av, ta, bv, tb, 0.0, &mut out);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// `x · wᵀ + b` with `w` laid out as `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(
            xv.cols(),
            wv.cols(),
            "linear: input width {} does not match weight {:?}",
            xv.cols(),
            wv.shape()
        );
        let mut out = Matrix::zeros(xv.rows(), wv.rows());
        gemm(1.0, xv, false, wv, true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.rows()), "linear: bias shape");
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `(1, d)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        assert_eq!(g.len(), d, "layer_norm gamma width");
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * g[c] + bta[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Rotary encoding: within each head, pair `(2p, 2p+1)` of row `r` is rotated
    /// by the angle whose cosine/sine are `tables.{cos,sin}[r, p]`.
    pub fn rope(&mut self, x: Var, tables: Rc<RopeTables>, heads: usize) -> Var {
        let mut out = self.value(x).clone();
        apply_rotation(&mut out, &tables, heads, false);
        self.push(out, Op::Rope { x, tables, heads }, &[x])
    }

    /// Fused multi-head scaled dot-product attention over packed segments.
    ///
    /// `q`, `k` have `heads · d_k` columns; `v` has `heads · d_v` columns.
    /// Query rows with no visible key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Rc<AttentionPlan>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "attention: q/k width mismatch");
        assert_eq!(kv.rows(), vv.rows(), "attention: k/v rows mismatch");
        assert!(qv.cols() % heads == 0 && vv.cols() % heads == 0);
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let keep = self.grad_enabled;
        let mut probs = Vec::new();
        for seg in &plan.segments {
            if seg.q_len == 0 {
                continue;
            }
            for h in 0..heads {
                let mut p = vec![0.0; seg.q_len * seg.k_len];
                if seg.k_len > 0 {
                    gemm_strided(
                        seg.q_len,
                        dk,
                        seg.k_len,
                        scale,
                        StridedRef::new(&qv.data()[seg.q_start * qv.cols() + h * dk..], qv.cols() as isize, 1),
                        StridedRef::new(&kv.data()[seg.k_start * kv.cols() + h * dk..], 1, kv.cols() as isize),
                        0.0,
                        &mut p,
                        seg.k_len as isize,
                    );
                    masked_softmax_rows(&mut p, seg, &plan);
                    let oc = out.cols();
                    gemm_strided(
                        seg.q_len,
                        seg.k_len,
                        dv,
                        1.0,
                        StridedRef::new(&p, seg.k_len as isize, 1),
                        StridedRef::new(&vv.data()[seg.k_start * vv.cols() + h * dv..], vv.cols() as isize, 1),
                        0.0,
                        &mut out.data_mut()[seg.q_start * oc + h * dv..],
                        oc as isize,
                    );
                }
                if keep {
                    probs.push(p);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                plan,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let out = self.value(x).select_rows(&idx);
        self.push(out, Op::Gather { x, idx }, &[x])
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        let inputs = parts.clone();
        self.push(out, Op::Concat(parts), &inputs)
    }

    /// Weighted mean of the rows of each `(start, len)` segment. Panics if a
    /// segment has zero total weight; callers validate first.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>, weights: Option<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Matrix::zeros(segments.len(), d);
        let mut denoms = Vec::with_capacity(segments.len());
        for (s, &(start, len)) in segments.iter().enumerate() {
            let mut denom = 0.0;
            let o = out.row_mut(s);
            for r in start..start + len {
                let w = weights.as_ref().map_or(1.0, |w| w[r]);
                if w == 0.0 {
                    continue;
                }
                denom += w;
                for (oc, xc) in o.iter_mut().zip(xv.row(r)) {
                    *oc += w * xc;
                }
            }
            assert!(denom > 0.0, "segment_mean over a segment with zero weight");
            for oc in o.iter_mut() {
                *oc /= denom;
            }
            denoms.push(denom);
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments,
                weights,
                denoms,
            },
            &[x],
        )
    }

    /// Multiplies row `r` by the constant `scale[r]`.
    pub fn row_scale(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(scale.len(), out.rows(), "row_scale length");
        for (r, &s) in scale.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        self.push(out, Op::RowScale { x, scale }, &[x])
    }

    /// Blockwise linear interpolation of columns, see [`resize_blocks`].
    pub fn resize_cols(&mut self, x: Var, base: usize, target: usize) -> Var {
        let out = resize_blocks(self.value(x), base, target);
        self.push(out, Op::ResizeCols { x, base, target }, &[x])
    }

    /// Parameters referenced by this tape, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// `Σ_r w_r · (logsumexp(logits_r) − logits_r[target_r])` as a `1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, row_weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "cross_entropy targets");
        assert_eq!(row_weights.len(), lv.rows(), "cross_entropy weights");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            if row_weights[r] != 0.0 {
                loss += row_weights[r] * (lse - row[targets[r]]);
            }
            for (p, &l) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
        }
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            },
            &[logits],
        )
    }

    /// Symmetric contrastive loss between row-paired `x` and `y` with learnable
    /// logit scale `s = exp(min(θ, max_logit_scale))`, i.e. temperature `1/s`.
    pub fn contrastive(&mut self, x: Var, y: Var, logit_scale: Var, max_logit_scale: f64) -> Var {
        let theta = self.value(logit_scale).item();
        let clamped = theta > max_logit_scale;
        let scale = theta.min(max_logit_scale).exp();
        let (loss, mut cache) = contrastive_forward(self.value(x), self.value(y), scale);
        cache.clamped = clamped;
        self.push(
            Matrix::scalar(loss),
            Op::Contrastive {
                x,
                y,
                logit_scale,
                cache,
            },
            &[x, y, logit_scale],
        )
    }

    /// Reverse pass from a scalar output; returns gradients of trainable parameters.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads = Gradients::new(self.store.len());
        if !self.nodes[output.0].requires_grad {
            return grads;
        }
        assert_eq!(self.value(output).shape(), (1, 1), "backward from non-scalar");
        let mut g: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        g[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, Var(i), gi, &mut g, &mut grads);
        }
        grads
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, this: Var, gi: Matrix, g: &mut [Option<Matrix>], grads: &mut Gradients) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, &gi),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // C = op(A) op(B); dop(A) = dC op(B)ᵀ
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    if *ta {
                        // dA = op(B) dCᵀ
                        gemm(1.0, bv, *tb, &gi, true, 0.0, &mut da);
                    } else {
                        gemm(1.0, &gi, false, bv, !*tb, 0.0, &mut da);
                    }
                    acc(g, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    if *tb {
                        // dB = dCᵀ op(A)
                        gemm(1.0, &gi, true, av, *ta, 0.0, &mut db);
                    } else {
                        gemm(1.0, av, !*ta, &gi, false, 0.0, &mut db);
                    }
                    acc(g, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    gemm(1.0, &gi, false, wv, false, 0.0, &mut dx);
                    acc(g, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    gemm(1.0, &gi, true, xv, false, 0.0, &mut dw);
                    acc(g, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = Matrix::zeros(1, gi.cols());
                        for r in 0..gi.rows() {
                            for (d, v) in db.data_mut().iter_mut().zip(gi.row(r)) {
                                *d += v;
                            }
                        }
                        acc(g, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(g, *a, gi.clone());
                }
                if self.needs(*b) {
                    acc(g, *b, gi);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(g, *a, gi.clone());
                }
                if self.needs(*b) {
                    acc(g, *b, gi.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gi.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    acc(g, *a, Matrix::from_vec(gi.rows(), gi.cols(), d));
                }
                if self.needs(*b) {
                    let d = gi.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(g, *b, Matrix::from_vec(gi.rows(), gi.cols(), d));
                }
            }
            Op::Scale(a, s) => acc(g, *a, gi.map(|v| v * s)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(g, *a, Matrix::filled(r, c, gi.item()));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = gi
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                acc(g, *a, Matrix::from_vec(gi.rows(), gi.cols(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..n {
                        let (gr, xr) = (gi.row(r), xhat.row(r));
                        for c in 0..d {
                            dg.data_mut()[c] += gr[c] * xr[c];
                            db.data_mut()[c] += gr[c];
                        }
                    }
                    if self.needs(*gamma) {
                        acc(g, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        acc(g, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    let inv_d = 1.0 / d as f64;
                    for r in 0..n {
                        let (gr, xr) = (gi.row(r), xhat.row(r));
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        let o = dx.row_mut(r);
                        for c in 0..d {
                            o[c] = rstd[r] * (gr[c] * gam[c] - mean_dxh - xr[c] * mean_dxh_xh);
                        }
                    }
                    acc(g, *x, dx);
                }
            }
            Op::Rope { x, tables, heads } => {
                let mut dx = gi;
                apply_rotation(&mut dx, tables, *heads, true);
                acc(g, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                plan,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, plan, *heads, probs, &gi, g),
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (d, s) in dx.row_mut(src).iter_mut().zip(gi.row(o)) {
                        *d += s;
                    }
                }
                acc(g, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        acc(g, p, gi.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::SegmentMean {
                x,
                segments,
                weights,
                denoms,
            } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for r in start..start + len {
                        let w = weights.as_ref().map_or(1.0, |w| w[r]);
                        if w == 0.0 {
                            continue;
                        }
                        let f = w / denoms[s];
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(gi.row(s)) {
                            *d += f * gv;
                        }
                    }
                }
                acc(g, *x, dx);
            }
            Op::ResizeCols { x, base, target } => {
                let xv = self.value(*x);
                let taps = interp_taps(*base, *target);
                let blocks = xv.cols() / base;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..gi.rows() {
                    let (gr, dr) = (gi.row(r), dx.row_mut(r));
                    for b in 0..blocks {
                        for (j, &(i0, f)) in taps.iter().enumerate() {
                            let gv = gr[b * target + j];
                            if f == 0.0 {
                                dr[b * base + i0] += gv;
                            } else {
                                dr[b * base + i0] += gv * (1.0 - f);
                                dr[b * base + i0 + 1] += gv * f;
                            }
                        }
                    }
                }
                acc(g, *x, dx);
            }
            Op::RowScale { x, scale } => {
                let mut dx = gi;
                for (r, &s) in scale.iter().enumerate() {
                    for v in dx.row_mut(r) {
                        *v *= s;
                    }
                }
                acc(g, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = self.value(this);
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gi.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norms[r];
                    }
                }
                acc(g, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            } => {
                let scale = gi.item();
                let mut dl = probs.clone();
                for r in 0..dl.rows() {
                    let w = row_weights[r] * scale;
                    let row = dl.row_mut(r);
                    if w == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w);
                }
                acc(g, *logits, dl);
            }
            Op::Contrastive {
                x,
                y,
                logit_scale,
                cache,
                ..
            } => {
                let upstream = gi.item();
                let mut dlogits = contrastive_logit_grad(cache);
                dlogits.scale_assign(upstream);
                if self.needs(*logit_scale) {
                    let d = if cache.clamped {
                        0.0
                    } else {
                        dlogits.data().iter().zip(cache.logits.data()).map(|(a, b)| a * b).sum()
                    };
                    acc(g, *logit_scale, Matrix::scalar(d));
                }
                let mut dsim = dlogits;
                dsim.scale_assign(cache.scale);
                if self.needs(*x) {
                    acc(g, *x, dsim.matmul(self.value(*y)));
                }
                if self.needs(*y) {
                    let mut dy = Matrix::zeros(self.value(*y).rows(), self.value(*y).cols());
                    gemm(1.0, &dsim, true, self.value(*x), false, 0.0, &mut dy);
                    acc(g, *y, dy);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &AttentionPlan,
        heads: usize,
        probs: &[Vec<f64>],
        gout: &Matrix,
        g: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Matrix::zeros(qv.rows(), qv.cols());
        let mut dkm = Matrix::zeros(kv.rows(), kv.cols());
        let mut dvm = Matrix::zeros(vv.rows(), vv.cols());
        let (qc, kc, vc, oc) = (qv.cols(), kv.cols(), vv.cols(), gout.cols());
        let mut pi = 0;
        for seg in &plan.segments {
            if seg.q_len == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                if seg.k_len == 0 {
                    continue;
                }
                let (m, n) = (seg.q_len, seg.k_len);
                let go = StridedRef::new(&gout.data()[seg.q_start * oc + h * dv..], oc as isize, 1);
                // dV += Pᵀ dO
                gemm_strided(
                    n,
                    m,
                    dv,
                    1.0,
                    StridedRef::new(p, 1, n as isize),
                    go,
                    1.0,
                    &mut dvm.data_mut()[seg.k_start * vc + h * dv..],
                    vc as isize,
                );
                // dP = dO Vᵀ
                let mut dp = vec![0.0; m * n];
                gemm_strided(
                    m,
                    dv,
                    n,
                    1.0,
                    go,
                    StridedRef::new(&vv.data()[seg.k_start * vc + h * dv..], 1, vc as isize),
                    0.0,
                    &mut dp,
                    n as isize,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..m {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                // dQ += scale · dS K
                gemm_strided(
                    m,
                    n,
                    dk,
                    scale,
                    StridedRef::new(&dp, n as isize, 1),
                    StridedRef::new(&kv.data()[seg.k_start * kc + h * dk..], kc as isize, 1),
                    1.0,
                    &mut dq.data_mut()[seg.q_start * qc + h * dk..],
                    qc as isize,
                );
                // dK += scale · dSᵀ Q
                gemm_strided(
                    n,
                    m,
                    dk,
                    scale,
                    StridedRef::new(&dp, 1, n as isize),
                    StridedRef::new(&qv.data()[seg.q_start * qc + h * dk..], qc as isize, 1),
                    1.0,
                    &mut dkm.data_mut()[seg.k_start * kc + h * dk..],
                    kc as isize,
                );
            }
        }
        if self.needs(q) {
            acc(g, q, dq);
        }
        if self.needs(k) {
            acc(g, k, dkm);
        }
        if self.needs(v) {
            acc(g, v, dvm);
        }
    }
}

fn acc(g: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Source index and fraction for each of `target` endpoint-aligned samples
/// of a length-`base` axis: sample `j` sits at `j·(base−1)/(target−1)`.
pub fn interp_taps(base: usize, target: usize) -> Vec<(usize, f64)> {
    assert!(
        base >= 1 && target >= 2,
        "interpolation needs base >= 1 and target >= 2"
    );
    (0..target)
        .map(|j| {
            if base == 1 {
                return (0, 0.0);
            }
            let num = j * (base - 1);
            let den = target - 1;
            let i0 = num / den;
            let f = (num % den) as f64 / den as f64;
            (i0, f)
        })
        .collect()
}

/// Resizes each contiguous block of `base` columns to `target` columns by
/// endpoint-aligned linear interpolation. Computed as `a + f·(b − a)`, so
/// constant blocks are reproduced exactly and `target == base` is the identity.
pub fn resize_blocks(x: &Matrix, base: usize, target: usize) -> Matrix {
    assert_eq!(x.cols() % base, 0, "columns must be a multiple of the block size");
    let blocks = x.cols() / base;
    let taps = interp_taps(base, target);
    let mut out = Matrix::zeros(x.rows(), blocks * target);
    for r in 0..x.rows() {
        let (xr, or) = (x.row(r), out.row_mut(r));
        for b in 0..blocks {
            for (j, &(i0, f)) in taps.iter().enumerate() {
                let a = xr[b * base + i0];
                or[b * target + j] = if f == 0.0 {
                    a
                } else {
                    a + f * (xr[b * base + i0 + 1] - a)
                };
            }
        }
    }
    out
}

fn strip_cache(op: Op) -> Op {
    match op {
        Op::LayerNorm { x, gamma, beta, .. } => Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: Matrix::zeros(0, 0),
            rstd: Vec::new(),
        },
        Op::CrossEntropy {
            logits,
            targets,
            row_weights,
            ..
        } => Op::CrossEntropy {
            logits,
            targets,
            row_weights,
            probs: Matrix::zeros(0, 0),
        },
        other => other,
    }
}

fn masked_softmax_rows(p: &mut [f64], seg: &AttnSegment, plan: &AttentionPlan) {
    let n = seg.k_len;
    for i in 0..seg.q_len {
        let row = &mut p[i * n..(i + 1) * n];
        let mut m = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            if plan.allowed(seg, i, j) {
                m = m.max(*v);
            } else {
                *v = f64::NEG_INFINITY;
            }
        }
        if m == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - m).exp() };
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Rotates pairs in place; `inverse` applies the transposed rotation.
pub fn apply_rotation(x: &mut Matrix, tables: &RopeTables, heads: usize, inverse: bool) {
    let cols = x.cols();
    let dh = cols / heads;
    let pairs = dh / 2;
    assert_eq!(tables.cos.cols(), pairs, "rope table width must be head_dim/2");
    assert_eq!(tables.cos.rows(), x.rows(), "rope table rows");
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.rows() {
        let (c, s) = (tables.cos.row(r), tables.sin.row(r));
        let row = x.row_mut(r);
        for h in 0..heads {
            let base = h * dh;
            for p in 0..pairs {
                let (a, b) = (row[base + 2 * p], row[base + 2 * p + 1]);
                let sn = sign * s[p];
                row[base + 2 * p] = a * c[p] - b * sn;
                row[base + 2 * p + 1] = a * sn + b * c[p];
            }
        }
    }
}
