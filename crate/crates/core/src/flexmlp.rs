//! Patch embedder whose input projections are learned at a base patch size
//! and resampled at runtime to any other patch size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{resize_blocks, Graph, Var};
use crate::error::{Result, SlipError};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub base_patch: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    /// GELU between the resized input projection and `w_out`.
    pub inner_activation: bool,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            base_patch: 16,
            hidden_dim: 64,
            mlp_dim: 128,
            inner_activation: true,
        }
    }
}

/// Patches of one channel, each row `[signal | mask | time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub patches: Matrix,
    /// `true` for patches with at least one observed timestep.
    pub patch_valid: Vec<bool>,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// Splits one channel into `ceil(L / patch_size)` patches. Time is shifted to
/// start at 0 and divided by `max(L − 1, 1)`; the padded tail carries value 0,
/// mask 0, and a time index continued with the last observed step.
pub fn patchify(values: &[f64], mask: &[bool], time_index: &[i64], patch_size: usize) -> Result<PatchBatch> {
    if patch_size == 0 {
        return Err(SlipError::Argument("patch_size must be at least 1".into()));
    }
    let len = values.len();
    if mask.len() != len || time_index.len() != len || len == 0 {
        return Err(SlipError::Argument(format!(
            "patchify needs equal non-zero lengths, got values {len}, mask {}, time {}",
            mask.len(),
            time_index.len()
        )));
    }
    let num = len.div_ceil(patch_size);
    let denom = (len - 1).max(1) as f64;
    let t0 = time_index[0];
    let step = if len > 1 {
        time_index[len - 1] - time_index[len - 2]
    } else {
        1
    };
    let mut patches = Matrix::zeros(num, 3 * patch_size);
    let mut patch_valid = vec![false; num];
    for p in 0..num {
        let row = patches.row_mut(p);
        for i in 0..patch_size {
            let t = p * patch_size + i;
            let time = if t < len {
                time_index[t]
            } else {
                time_index[len - 1] + step * (t + 1 - len) as i64
            };
            row[2 * patch_size + i] = (time - t0) as f64 / denom;
            if t < len && mask[t] {
                row[i] = values[t];
                row[patch_size + i] = 1.0;
                patch_valid[p] = true;
            }
        }
    }
    Ok(PatchBatch {
        patches,
        patch_valid,
        patch_size,
    })
}

/// Resamples the three column blocks (signal, mask, time) of `w` from
/// `base_patch` to `target_patch` columns each, by endpoint-aligned linear
/// interpolation.
pub fn resize_weights(w: &Matrix, base_patch: usize, target_patch: usize) -> Result<Matrix> {
    if base_patch < 2 || target_patch < 2 {
        return Err(SlipError::Argument(format!(
            "resize needs base and target patch sizes >= 2, got {base_patch} -> {target_patch}"
        )));
    }
    if w.cols() != 3 * base_patch {
        return Err(SlipError::Argument(format!(
            "weight has {} columns, expected 3 x {base_patch}",
            w.cols()
        )));
    }
    Ok(resize_blocks(w, base_patch, target_patch))
}

#[derive(Clone, Debug)]
pub struct FlexMlp {
    pub spec: PatchSpec,
    pub w_mlp: ParamId,
    pub b_mlp: ParamId,
    pub w_res: ParamId,
    pub b_res: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub trail_norm: LayerNorm,
    pub trail_up: Linear,
    pub trail_down: Linear,
}

impl FlexMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: PatchSpec, rng: &mut R) -> Result<Self> {
        if spec.base_patch < 2 {
            return Err(SlipError::Config("base_patch must be at least 2".into()));
        }
        let input = 3 * spec.base_patch;
        let (h, m) = (spec.hidden_dim, spec.mlp_dim);
        let in_std = 1.0 / (input as f64).sqrt();
        Ok(Self {
            w_mlp: store.add_randn(format!("{name}.w_mlp"), m, input, in_std, rng),
            b_mlp: store.add_zeros(format!("{name}.b_mlp"), 1, m),
            w_res: store.add_randn(format!("{name}.w_res"), h, input, in_std, rng),
            b_res: store.add_zeros(format!("{name}.b_res"), 1, h),
            w_out: store.add_randn(format!("{name}.w_out"), h, m, 1.0 / (m as f64).sqrt(), rng),
            b_out: store.add_zeros(format!("{name}.b_out"), 1, h),
            trail_norm: LayerNorm::new(store, &format!("{name}.trail_norm"), h),
            trail_up: Linear::new(store, &format!("{name}.trail_up"), h, m, 1.0, true, rng),
            trail_down: Linear::new(store, &format!("{name}.trail_down"), m, h, 1.0, true, rng),
            spec,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.w_mlp, self.b_mlp, self.w_res, self.b_res, self.w_out, self.b_out];
        p.extend(self.trail_norm.params());
        p.extend(self.trail_up.params());
        p.extend(self.trail_down.params());
        p
    }

    pub fn num_parameters(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&id| store.value(id).len()).sum()
    }

    fn input_weight(&self, g: &mut Graph, w: ParamId, patch_size: usize) -> Var {
        let w = g.param(w);
        if patch_size == self.spec.base_patch {
            w
        } else {
            g.resize_cols(w, self.spec.base_patch, patch_size)
        }
    }

    /// LayerNorm → linear → GELU → linear.
    pub fn trailing(&self, g: &mut Graph, h: Var) -> Var {
        let t = self.trail_norm.apply(g, h);
        let t = self.trail_up.apply(g, t);
        let t = g.gelu(t);
        self.trail_down.apply(g, t)
    }

    /// Embeds rows `z` (`n × 3·patch_size`) into `n × hidden_dim` tokens.
    pub fn forward(&self, g: &mut Graph, z: Var, patch_size: usize) -> Result<Var> {
        if patch_size < 2 {
            return Err(SlipError::Argument(format!("patch size {patch_size} is below 2")));
        }
        if g.value(z).cols() != 3 * patch_size {
            return Err(SlipError::Argument(format!(
                "patch rows have {} columns but patch size {patch_size} needs {}",
                g.value(z).cols(),
                3 * patch_size
            )));
        }
        let w_mlp = self.input_weight(g, self.w_mlp, patch_size);
        let w_res = self.input_weight(g, self.w_res, patch_size);
        let (b_mlp, b_res) = (g.param(self.b_mlp), g.param(self.b_res));
        let (w_out, b_out) = (g.param(self.w_out), g.param(self.b_out));
        let mut h = g.linear(z, w_mlp, Some(b_mlp));
        if self.spec.inner_activation {
            h = g.gelu(h);
        }
        let h = g.linear(h, w_out, Some(b_out));
        let r = g.linear(z, w_res, Some(b_res));
        let t = self.trailing(g, h);
        Ok(g.add(t, r))
    }

    /// Forward pass outside of training.
    pub fn embed(&self, store: &ParamStore, batch: &PatchBatch) -> Result<Matrix> {
        if batch.patches.cols() != 3 * batch.patch_size {
            return Err(SlipError::Argument(
                "patch batch width does not match its patch size".into(),
            ));
        }
        let mut g = Graph::inference(store);
        let z = g.constant(batch.patches.clone());
        let out = self.forward(&mut g, z, batch.patch_size)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_counts_and_padding() {
        let v: Vec<f64> = (0..33).map(f64::from).collect();
        let m = vec![true; 33];
        let t: Vec<i64> = (0..33).collect();
        let b = patchify(&v[..32], &m[..32], &t[..32], 16).unwrap();
        assert_eq!(b.num_patches(), 2);
        let b = patchify(&v, &m, &t, 16).unwrap();
        assert_eq!(b.num_patches(), 3);
        let last = b.patches.row(2);
        assert_eq!(last[16..32].iter().filter(|&&x| x == 0.0).count(), 15);
        assert_eq!(last[0], 32.0);
        // time continues past the end: (32 + 15) / 32
        assert_eq!(last[47], 47.0 / 32.0);
        let b = patchify(&v, &vec![false; 33], &t, 16).unwrap();
        assert!(b.patch_valid.iter().all(|&x| !x));
    }

    #[test]
    fn resize_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Matrix::randn(5, 48, 1.0, &mut rng);
        assert_eq!(resize_weights(&w, 16, 8).unwrap().shape(), (5, 24));
        assert_eq!(resize_weights(&w, 16, 16).unwrap(), w);
        assert!(resize_weights(&w, 16, 1).is_err());
        assert!(resize_weights(&w, 15, 8).is_err());
    }

    #[test]
    fn zero_patches_give_trailing_of_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spec = PatchSpec {
            hidden_dim: 8,
            mlp_dim: 12,
            ..Default::default()
        };
        let e = FlexMlp::new(&mut store, "e", spec, &mut rng).unwrap();
        let batch = PatchBatch {
            patches: Matrix::zeros(7, 48),
            patch_valid: vec![false; 7],
            patch_size: 16,
        };
        let out = e.embed(&store, &batch).unwrap();
        assert_eq!(out.shape(), (7, 8));
        // zero input and zero biases: h = 0, r = 0, output = trailing(0)
        let mut g = Graph::inference(&store);
        let zero = g.constant(Matrix::zeros(1, 8));
        let t = e.trailing(&mut g, zero);
        for r in 0..7 {
            for (a, b) in out.row(r).iter().zip(g.value(t).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let e = FlexMlp::new(&mut store, "e", PatchSpec::default(), &mut rng).unwrap();
        let batch = PatchBatch {
            patches: Matrix::zeros(2, 30),
            patch_valid: vec![true; 2],
            patch_size: 8,
        };
        assert!(matches!(e.embed(&store, &batch), Err(SlipError::Argument(_))));
    }
}
