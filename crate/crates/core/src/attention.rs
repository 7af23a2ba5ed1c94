//! Channel-wise multi-head self-attention with structured transforms.
//!
//! A batch of `G` samples is held as `[G·C, d]`: one row per channel token,
//! transforms act along the embedding axis of each row, and attention mixes
//! the `C` rows of the same sample.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::structured::{join, ConvKernelStack, MaskedLinear, Slot, StructuredError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("embedding dim {d} is not divisible by {heads} heads")]
    Heads { d: usize, heads: usize },
    #[error("{rows} rows do not split into samples of {channels} channels")]
    Channels { rows: usize, channels: usize },
    #[error(transparent)]
    Structured(#[from] StructuredError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Triangular,
    Conv,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triangular" => Ok(Self::Triangular),
            "conv" => Ok(Self::Conv),
            other => Err(format!(
                "unknown variant {other:?} (expected triangular or conv)"
            )),
        }
    }
}

/// One linear map along the embedding axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform<P> {
    /// Upper-triangular weight plus bias.
    Triangular(MaskedLinear<P>),
    /// Bias-free kernel stack.
    Conv(ConvKernelStack<P>),
    /// Full `d×d` weight plus bias, for the unconstrained ablation.
    Dense(MaskedLinear<P>),
}

impl<P> Transform<P> {
    pub fn map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&Slot, &'a P) -> Q,
    ) -> Transform<Q> {
        match self {
            Self::Triangular(l) => Transform::Triangular(l.map(prefix, true, f)),
            Self::Conv(s) => Transform::Conv(s.map(prefix, f)),
            Self::Dense(l) => Transform::Dense(l.map(prefix, false, f)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&Slot, &mut P)) {
        match self {
            Self::Triangular(l) => l.visit_mut(prefix, true, f),
            Self::Conv(s) => s.visit_mut(prefix, f),
            Self::Dense(l) => l.visit_mut(prefix, false, f),
        }
    }
}

impl<T: Scalar> Transform<Tensor<T>> {
    /// `constrained = false` ignores the variant and draws a dense map.
    pub fn init(
        variant: Variant,
        constrained: bool,
        d: usize,
        kernel_sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self, StructuredError> {
        Ok(match (constrained, variant) {
            (false, _) => Self::Dense(MaskedLinear::init_dense(d, d, rng)),
            (true, Variant::Triangular) => Self::Triangular(MaskedLinear::init(d, rng)),
            (true, Variant::Conv) => Self::Conv(ConvKernelStack::init(kernel_sizes, d, rng)?),
        })
    }

    /// Free (trainable, unmasked) parameter count.
    pub fn free_params(&self) -> usize {
        match self {
            Self::Triangular(l) => crate::structured::masked_free_params(l.dim()) + l.bias.len(),
            Self::Conv(s) => s.param_count(),
            Self::Dense(l) => l.weight.len() + l.bias.len(),
        }
    }

    /// Structured weight count without biases.
    pub fn weight_params(&self) -> usize {
        match self {
            Self::Triangular(l) => crate::structured::masked_free_params(l.dim()),
            Self::Conv(s) => s.param_count(),
            Self::Dense(l) => l.weight.len(),
        }
    }
}

impl Transform<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var, NumericsError> {
        match self {
            Self::Triangular(l) | Self::Dense(l) => l.forward(g, z),
            Self::Conv(s) => s.forward(g, z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub softmax: bool,
    pub residual: bool,
    pub second_ff: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            softmax: true,
            residual: true,
            second_ff: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams<P> {
    pub q: Transform<P>,
    pub k: Transform<P>,
    pub v: Transform<P>,
    pub f: Transform<P>,
    pub ff2: Option<Transform<P>>,
}

impl<P> EncoderBlockParams<P> {
    pub fn map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&Slot, &'a P) -> Q,
    ) -> EncoderBlockParams<Q> {
        EncoderBlockParams {
            q: self.q.map(&join(prefix, "q"), f),
            k: self.k.map(&join(prefix, "k"), f),
            v: self.v.map(&join(prefix, "v"), f),
            f: self.f.map(&join(prefix, "f"), f),
            ff2: self.ff2.as_ref().map(|t| t.map(&join(prefix, "ff2"), f)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&Slot, &mut P)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.f.visit_mut(&join(prefix, "f"), f);
        if let Some(t) = &mut self.ff2 {
            t.visit_mut(&join(prefix, "ff2"), f);
        }
    }

    pub fn transforms(&self) -> impl Iterator<Item = (&'static str, &Transform<P>)> {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("f", &self.f),
        ]
        .into_iter()
        .chain(self.ff2.as_ref().map(|t| ("ff2", t)))
    }
}

impl<T: Scalar> EncoderBlockParams<Tensor<T>> {
    pub fn init(
        variant: Variant,
        constrained: bool,
        d: usize,
        kernel_sizes: &[usize],
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, AttentionError> {
        check_heads(d, cfg.heads)?;
        let mut make = || Transform::init(variant, constrained, d, kernel_sizes, rng);
        Ok(Self {
            q: make()?,
            k: make()?,
            v: make()?,
            f: make()?,
            ff2: if cfg.second_ff { Some(make()?) } else { None },
        })
    }

    pub fn constant(&self, g: &mut Graph<T>) -> EncoderBlockParams<Var> {
        self.map("", &mut |_, t| g.constant(t.clone()))
    }
}

pub fn check_heads(d: usize, heads: usize) -> Result<(), AttentionError> {
    if heads == 0 || d % heads != 0 {
        return Err(AttentionError::Heads { d, heads });
    }
    Ok(())
}

fn groups_of<T: Scalar>(g: &Graph<T>, z: Var, channels: usize) -> Result<usize, AttentionError> {
    let rows = g.value(z).rows();
    if channels == 0 || rows % channels != 0 {
        return Err(AttentionError::Channels { rows, channels });
    }
    Ok(rows / channels)
}

/// `ReLU` of each of the three structured transforms.
pub fn compute_qkv<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &EncoderBlockParams<Var>,
) -> Result<(Var, Var, Var), NumericsError> {
    let mut head = |t: &Transform<Var>| -> Result<Var, NumericsError> {
        let lin = t.forward(g, z)?;
        g.relu(lin)
    };
    Ok((head(&p.q)?, head(&p.k)?, head(&p.v)?))
}

/// Per (sample, head) `Q^i (K^i)ᵀ / sqrt(d/H)`, optionally row-softmaxed; shape `[G·H, C, C]`.
pub fn attention_scores<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    channels: usize,
    heads: usize,
    softmax: bool,
) -> Result<Var, AttentionError> {
    let d = g.value(q).cols();
    check_heads(d, heads)?;
    let groups = groups_of(g, q, channels)?;
    let qh = g.split_heads(q, groups, heads)?;
    let kh = g.split_heads(k, groups, heads)?;
    let kt = g.transpose(kh)?;
    let raw = g.matmul(qh, kt)?;
    let scaled = g.scale(raw, T::of(1.0 / ((d / heads) as f64).sqrt()))?;
    Ok(if softmax {
        g.softmax_rows(scaled)?
    } else {
        scaled
    })
}

/// `attn^i · V^i` per head, concatenated back to `[G·C, d]`.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    v: Var,
    channels: usize,
    heads: usize,
) -> Result<Var, AttentionError> {
    let d = g.value(v).cols();
    check_heads(d, heads)?;
    let groups = groups_of(g, v, channels)?;
    if g.value(scores).shape() != [groups * heads, channels, channels] {
        return Err(NumericsError::Shape {
            op: "attend",
            detail: format!(
                "scores {:?} for {groups} samples × {heads} heads × {channels} channels",
                g.value(scores).shape()
            ),
        }
        .into());
    }
    let vh = g.split_heads(v, groups, heads)?;
    let mixed = g.matmul(scores, vh)?;
    Ok(g.merge_heads(mixed, groups, heads)?)
}

/// `ReLU(F·X + f)`, followed by the optional second structured layer.
pub fn output_projection<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &EncoderBlockParams<Var>,
) -> Result<Var, NumericsError> {
    let lin = p.f.forward(g, x)?;
    let mut out = g.relu(lin)?;
    if let Some(t) = &p.ff2 {
        let lin = t.forward(g, out)?;
        out = g.relu(lin)?;
    }
    Ok(out)
}

/// Output rows and the score tensor of one block.
pub struct BlockOutput {
    pub out: Var,
    pub scores: Var,
}

pub fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: &EncoderBlockParams<Var>,
    channels: usize,
    cfg: &BlockConfig,
) -> Result<BlockOutput, AttentionError> {
    let (q, k, v) = compute_qkv(g, z, p)?;
    let scores = attention_scores(g, q, k, channels, cfg.heads, cfg.softmax)?;
    let mixed = attend(g, scores, v, channels, cfg.heads)?;
    let projected = output_projection(g, mixed, p)?;
    let out = if cfg.residual {
        g.add(z, projected)?
    } else {
        projected
    };
    Ok(BlockOutput { out, scores })
}

/// Runs a stack of blocks on a constant `[G·C, d]` input, returning the final
/// rows and every block's scores.
pub fn encoder_stack_eval<T: Scalar>(
    z: &Tensor<T>,
    blocks: &[EncoderBlockParams<Tensor<T>>],
    channels: usize,
    cfg: &BlockConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), AttentionError> {
    let mut g = Graph::new();
    let mut cur = g.constant(z.clone());
    let mut scores = Vec::with_capacity(blocks.len());
    for b in blocks {
        let bound = b.constant(&mut g);
        let out = encoder_block(&mut g, cur, &bound, channels, cfg)?;
        scores.push(g.value(out.scores).clone());
        cur = out.out;
    }
    Ok((g.value(cur).clone(), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_block(d: usize) -> EncoderBlockParams<Tensor<f64>> {
        let id = || Transform::Triangular(MaskedLinear::identity(d));
        EncoderBlockParams {
            q: id(),
            k: id(),
            v: id(),
            f: id(),
            ff2: None,
        }
    }

    fn random_block(variant: Variant, d: usize, seed: u64) -> EncoderBlockParams<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BlockConfig {
            heads: 2,
            ..BlockConfig::default()
        };
        EncoderBlockParams::init(variant, true, d, &[2, 3], &cfg, &mut rng).unwrap()
    }

    fn random_z(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[rows, d],
            (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn qkv_of_zero_input_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(&[3, 4]));
        let p = identity_block(4).constant(&mut g);
        let (q, k, v) = compute_qkv(&mut g, z, &p).unwrap();
        for t in [q, k, v] {
            assert!(g.value(t).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_qkv_keeps_nonnegative_rows() {
        let zt = Tensor::from_rows(&[vec![0.5, 1.0, 0.0, 2.0]]);
        let mut g = Graph::new();
        let z = g.constant(zt.clone());
        let p = identity_block(4).constant(&mut g);
        let (q, _, _) = compute_qkv(&mut g, z, &p).unwrap();
        assert_eq!(g.value(q), &zt);
    }

    #[test]
    fn raw_scores_by_hand() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]));
        let k = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let s = attention_scores(&mut g, q, k, 2, 1, false).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn score_divisor_is_root_head_width() {
        let mut g = Graph::<f64>::new();
        let mut row = vec![0.0; 64];
        row[0] = 1.0;
        let q = g.constant(Tensor::from_rows(&[row.clone()]));
        let s = attention_scores(&mut g, q, q, 1, 8, false).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(random_z(6, 8, 1).map(f64::abs));
        let k = g.constant(random_z(6, 8, 2).map(f64::abs));
        let s = attention_scores(&mut g, q, k, 3, 2, true).unwrap();
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn identity_and_uniform_scores() {
        let vt = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]);
        let mut g = Graph::<f64>::new();
        let v = g.constant(vt.clone());
        let eye = g.constant(
            Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let out = attend(&mut g, eye, v, 2, 2).unwrap();
        assert_eq!(g.value(out), &vt);
        let uni = g.constant(Tensor::full(&[2, 2, 2], 0.5));
        let out = attend(&mut g, uni, v, 2, 2).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 3.5, 2.0, 3.5]);
    }

    #[test]
    fn single_channel_softmax_passes_values_through() {
        let p = random_block(Variant::Triangular, 4, 5);
        let mut g = Graph::new();
        let bound = p.constant(&mut g);
        let z = g.constant(random_z(1, 4, 6));
        let (q, k, v) = compute_qkv(&mut g, z, &bound).unwrap();
        let s = attention_scores(&mut g, q, k, 1, 2, true).unwrap();
        let out = attend(&mut g, s, v, 1, 2).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn output_projection_identity_and_mask() {
        let p = identity_block(3);
        let mut g = Graph::new();
        let bound = p.constant(&mut g);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 4.0]]));
        let y = output_projection(&mut g, x, &bound).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 4.0]);

        let r = random_block(Variant::Triangular, 4, 7).constant(&mut g);
        let a = g.constant(Tensor::from_rows(&[vec![0.3, 0.1, -0.2, 0.9]]));
        let b = g.constant(Tensor::from_rows(&[vec![1.3, 0.1, -0.2, 0.9]]));
        let ya = output_projection(&mut g, a, &r).unwrap();
        let yb = output_projection(&mut g, b, &r).unwrap();
        assert_eq!(&g.value(ya).data()[1..], &g.value(yb).data()[1..]);
    }

    #[test]
    fn block_is_channel_permutation_equivariant() {
        for variant in [Variant::Triangular, Variant::Conv] {
            let blocks = vec![random_block(variant, 8, 11), random_block(variant, 8, 12)];
            let cfg = BlockConfig {
                heads: 2,
                ..BlockConfig::default()
            };
            let z = random_z(3, 8, 13);
            let perm = [2, 0, 1];
            let zp =
                Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
            let (out, _) = encoder_stack_eval(&z, &blocks, 3, &cfg).unwrap();
            let (outp, _) = encoder_stack_eval(&zp, &blocks, 3, &cfg).unwrap();
            for (r, &src) in perm.iter().enumerate() {
                for (a, b) in outp.row(r).iter().zip(out.row(src)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batched_samples_do_not_interact() {
        let blocks = vec![random_block(Variant::Conv, 8, 21)];
        let cfg = BlockConfig {
            heads: 2,
            ..BlockConfig::default()
        };
        let z = random_z(6, 8, 22);
        let (both, _) = encoder_stack_eval(&z, &blocks, 3, &cfg).unwrap();
        let first = Tensor::from_rows(&(0..3).map(|r| z.row(r).to_vec()).collect::<Vec<_>>());
        let (alone, _) = encoder_stack_eval(&first, &blocks, 3, &cfg).unwrap();
        assert_eq!(&both.data()[..24], alone.data());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BlockConfig {
            heads: 3,
            ..BlockConfig::default()
        };
        assert!(matches!(
            EncoderBlockParams::<Tensor<f64>>::init(
                Variant::Triangular,
                true,
                8,
                &[2],
                &cfg,
                &mut rng
            ),
            Err(AttentionError::Heads { d: 8, heads: 3 })
        ));
    }
}
