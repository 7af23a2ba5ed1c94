//! Temporally constrained linear maps.
//!
//! Embedded rows are stored in reversed chronological order: index 0 is the
//! most recent position. An output position `i` may then read input positions
//! `j ≥ i` only, which is an upper-triangular weight (`W[i][j] = 0` for
//! `i > j`). A stride-1 convolution with far-end zero padding has the banded
//! upper-triangular Toeplitz matrix
//!
//! ```text
//! [w1 w2 .. wk 0  ..  0]
//! [0  w1 w2 .. wk ..  0]
//! [          ...       ]
//! [0  ..          0  w1]
//! ```
//!
//! and a stack of such layers multiplies those matrices, widening the band by
//! `k − 1` per layer.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error("kernel of size {k} does not fit embedding dim {d}")]
    KernelTooLong { k: usize, d: usize },
    #[error("empty kernel")]
    EmptyKernel,
    #[error("a kernel stack needs at least one kernel")]
    EmptyStack,
    #[error("band never grows with kernels of size {0}; need k ≥ 2")]
    KernelTooShort(usize),
    #[error("need d ≥ k, got d = {d}, k = {k}")]
    DimBelowKernel { d: usize, k: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `d×d` weight frozen to upper-triangular support, plus an unconstrained bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLinear<P> {
    pub weight: P,
    pub bias: P,
}

/// Ordered 1D kernels applied first to last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernelStack<P> {
    pub kernels: Vec<P>,
}

/// One leaf of a parameter tree: dotted path and whether the triangular mask applies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub masked: bool,
}

impl Slot {
    pub fn new(name: impl Into<String>, masked: bool) -> Self {
        Self {
            name: name.into(),
            masked,
        }
    }
}

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

impl<P> MaskedLinear<P> {
    /// Rebuilds the layer leaf by leaf; `masked` tags the weight slot.
    pub fn map<'a, Q>(
        &'a self,
        prefix: &str,
        masked: bool,
        f: &mut dyn FnMut(&Slot, &'a P) -> Q,
    ) -> MaskedLinear<Q> {
        MaskedLinear {
            weight: f(&Slot::new(join(prefix, "weight"), masked), &self.weight),
            bias: f(&Slot::new(join(prefix, "bias"), false), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, masked: bool, f: &mut dyn FnMut(&Slot, &mut P)) {
        f(&Slot::new(join(prefix, "weight"), masked), &mut self.weight);
        f(&Slot::new(join(prefix, "bias"), false), &mut self.bias);
    }
}

impl<P> ConvKernelStack<P> {
    pub fn map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&Slot, &'a P) -> Q,
    ) -> ConvKernelStack<Q> {
        ConvKernelStack {
            kernels: self
                .kernels
                .iter()
                .enumerate()
                .map(|(i, k)| f(&Slot::new(join(prefix, &format!("kernel{i}")), false), k))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&Slot, &mut P)) {
        for (i, k) in self.kernels.iter_mut().enumerate() {
            f(&Slot::new(join(prefix, &format!("kernel{i}")), false), k);
        }
    }
}

/// Entry `(i, j)` of a `d×d` weight is trainable iff `i ≤ j`.
#[inline]
pub fn in_support(i: usize, j: usize) -> bool {
    i <= j
}

/// Free parameters of a masked `d×d` weight: `d(d+1)/2`.
pub fn masked_free_params(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Zeroes every strictly-lower entry of a square matrix.
pub fn apply_mask<T: Scalar>(weight: &mut Tensor<T>) {
    let d = weight.cols();
    for (idx, v) in weight.data_mut().iter_mut().enumerate() {
        if !in_support(idx / d, idx % d) {
            *v = T::zero();
        }
    }
}

/// Number of strictly-lower entries that are not exactly zero.
pub fn mask_violations<T: Scalar>(weight: &Tensor<T>) -> usize {
    let d = weight.cols();
    weight
        .data()
        .iter()
        .enumerate()
        .filter(|(idx, v)| !in_support(idx / d, idx % d) && **v != T::zero())
        .count()
}

impl<T: Scalar> MaskedLinear<Tensor<T>> {
    /// Uniform init on the support, scaled by each row's own fan-in `d − i`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            let bound = 1.0 / ((d - i) as f64).sqrt();
            for j in i..d {
                w.set(i, j, T::of(rng.gen_range(-bound..bound)));
            }
        }
        let bound = 1.0 / (d as f64).sqrt();
        let bias = (0..d)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            weight: w,
            bias: Tensor::new(&[d], bias).expect("bias shape"),
        }
    }

    /// Plain dense layer `fan_in → fan_out` (no mask), uniform `1/sqrt(fan_in)`.
    pub fn init_dense(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect::<Vec<_>>()
        };
        Self {
            weight: Tensor::new(&[fan_out, fan_in], draw(fan_out * fan_in)).expect("weight shape"),
            bias: Tensor::new(&[fan_out], draw(fan_out)).expect("bias shape"),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.set(i, i, T::one());
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// Linear part only: `out[c] = W·z[c] + b` per row. Rows are `C×d`.
    pub fn apply(&self, z: &Tensor<T>) -> Result<Tensor<T>, StructuredError> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let bound = self.bind_constant(&mut g);
        let out = bound.forward(&mut g, zv)?;
        Ok(g.value(out).clone())
    }

    fn bind_constant(&self, g: &mut Graph<T>) -> MaskedLinear<Var> {
        MaskedLinear {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(self.bias.clone()),
        }
    }
}

impl MaskedLinear<Var> {
    /// `Z·Wᵀ + b` on the graph.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var, NumericsError> {
        let d = g.value(self.weight).cols();
        if g.value(z).cols() != d {
            return Err(NumericsError::Shape {
                op: "masked_linear",
                detail: format!("rows of {} for dim {d}", g.value(z).cols()),
            });
        }
        let wt = g.transpose(self.weight)?;
        let lin = g.matmul(z, wt)?;
        g.add_bias(lin, self.bias)
    }
}

impl<T: Scalar> ConvKernelStack<Tensor<T>> {
    pub fn new(kernels: Vec<Tensor<T>>, d: usize) -> Result<Self, StructuredError> {
        if kernels.is_empty() {
            return Err(StructuredError::EmptyStack);
        }
        for k in &kernels {
            if k.is_empty() {
                return Err(StructuredError::EmptyKernel);
            }
            if k.len() > d {
                return Err(StructuredError::KernelTooLong { k: k.len(), d });
            }
        }
        Ok(Self { kernels })
    }

    /// Uniform init with bound `1/sqrt(k)` per kernel.
    pub fn init(sizes: &[usize], d: usize, rng: &mut impl Rng) -> Result<Self, StructuredError> {
        let kernels = sizes
            .iter()
            .map(|&k| {
                let bound = 1.0 / (k.max(1) as f64).sqrt();
                let data = (0..k)
                    .map(|_| T::of(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(&[k.max(1)], data).map_err(StructuredError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(kernels, d)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(Tensor::len).sum()
    }

    /// Sequential boundary-truncated correlation of every row.
    pub fn apply(&self, z: &Tensor<T>) -> Result<Tensor<T>, StructuredError> {
        let d = z.cols();
        let mut cur = z.clone();
        for k in &self.kernels {
            if k.len() > d {
                return Err(StructuredError::KernelTooLong { k: k.len(), d });
            }
            cur = crate::numerics::conv1d_rows(&cur, k)?;
        }
        Ok(cur)
    }

    /// Ordered product `K_last ⋯ K_1` of the per-kernel Toeplitz matrices.
    pub fn materialize(&self, d: usize) -> Result<Tensor<T>, StructuredError> {
        let mut acc: Option<Tensor<T>> = None;
        for k in &self.kernels {
            let m = toeplitz_from_kernel(k.data(), d)?;
            acc = Some(match acc {
                None => m,
                Some(prev) => m.matmul(&prev)?,
            });
        }
        acc.ok_or(StructuredError::EmptyStack)
    }
}

impl ConvKernelStack<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var, NumericsError> {
        let mut cur = z;
        for &k in &self.kernels {
            cur = g.conv1d(cur, k)?;
        }
        Ok(cur)
    }
}

/// Banded `d×d` matrix with `kernel[t]` on superdiagonal `t`, truncated at the last column.
pub fn toeplitz_from_kernel<T: Scalar>(
    kernel: &[T],
    d: usize,
) -> Result<Tensor<T>, StructuredError> {
    let k = kernel.len();
    if k == 0 {
        return Err(StructuredError::EmptyKernel);
    }
    if k > d {
        return Err(StructuredError::KernelTooLong { k, d });
    }
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for (t, &w) in kernel.iter().enumerate() {
            if i + t < d {
                m.set(i, i + t, w);
            }
        }
    }
    Ok(m)
}

/// Layers of size-`k` kernels needed before the product covers the whole
/// upper triangle: `⌈(d − k)/(k − 1)⌉ + 1`.
pub fn min_layers_full_triangle(d: usize, k: usize) -> Result<usize, StructuredError> {
    if k < 2 {
        return Err(StructuredError::KernelTooShort(k));
    }
    if d < k {
        return Err(StructuredError::DimBelowKernel { d, k });
    }
    Ok((d - k).div_ceil(k - 1) + 1)
}

/// `1 + max(j − i)` over nonzero entries; 0 for the zero matrix.
pub fn band_width<T: Scalar>(m: &Tensor<T>) -> usize {
    let d = m.cols();
    let mut width = 0;
    for i in 0..m.rows() {
        for j in 0..d {
            if m.at(i, j) != T::zero() && j >= i {
                width = width.max(j - i + 1);
            }
        }
    }
    width
}

/// True when every entry with `i ≤ j` is nonzero.
pub fn is_full_upper_triangle<T: Scalar>(m: &Tensor<T>) -> bool {
    let d = m.cols();
    (0..d).all(|i| (i..d).all(|j| m.at(i, j) != T::zero()))
}

/// True when every entry with `i > j` is exactly zero.
pub fn is_upper_triangular<T: Scalar>(m: &Tensor<T>) -> bool {
    mask_violations(m) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(&[v.to_vec()])
    }

    #[test]
    fn masked_apply_hand_example() {
        let layer = MaskedLinear {
            weight: Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]),
            bias: Tensor::zeros(&[2]),
        };
        assert_eq!(layer.apply(&row(&[2.0, 3.0])).unwrap().data(), &[5.0, 3.0]);
    }

    #[test]
    fn identity_leaves_rows_unchanged() {
        let z = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]]);
        assert_eq!(MaskedLinear::identity(3).apply(&z).unwrap(), z);
    }

    #[test]
    fn masked_output_ignores_later_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = MaskedLinear::<Tensor<f64>>::init(5, &mut rng);
        let z = row(&[0.3, -1.0, 2.0, 0.7, 0.1]);
        let mut bumped = z.clone();
        bumped.data_mut()[0] += 0.25;
        let a = layer.apply(&z).unwrap();
        let b = layer.apply(&bumped).unwrap();
        assert_ne!(a.data()[0], b.data()[0]);
        assert_eq!(&a.data()[1..], &b.data()[1..]);
    }

    #[test]
    fn init_respects_mask_and_row_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = MaskedLinear::<Tensor<f64>>::init(16, &mut rng);
        assert_eq!(mask_violations(&layer.weight), 0);
        // Last row has a single free entry with bound 1.
        assert!(layer.weight.at(15, 15).abs() <= 1.0);
        for j in 0..16 {
            assert!(layer.weight.at(0, j).abs() <= 0.25);
        }
        assert_eq!(masked_free_params(16), 136);
    }

    #[test]
    fn toeplitz_examples() {
        let m = toeplitz_from_kernel(&[1.0, 1.0], 4).unwrap();
        assert_eq!(
            m.data(),
            &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        assert_eq!(m.matmul(&x).unwrap().data(), &[3.0, 5.0, 7.0, 4.0]);
        let s = toeplitz_from_kernel(&[2.5], 3).unwrap();
        assert_eq!(s.data(), &[2.5, 0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 2.5]);
        assert!(matches!(
            toeplitz_from_kernel(&[1.0; 5], 4),
            Err(StructuredError::KernelTooLong { k: 5, d: 4 })
        ));
    }

    #[test]
    fn conv_stack_examples() {
        let single =
            ConvKernelStack::new(vec![Tensor::new(&[2], vec![1.0, 1.0]).unwrap()], 4).unwrap();
        assert_eq!(
            single.apply(&row(&[1.0, 2.0, 3.0, 4.0])).unwrap().data(),
            &[3.0, 5.0, 7.0, 4.0]
        );
        let ident =
            ConvKernelStack::new(vec![Tensor::new(&[1], vec![1.0]).unwrap(); 3], 4).unwrap();
        let z = row(&[1.0, -2.0, 0.5, 9.0]);
        assert_eq!(ident.apply(&z).unwrap(), z);
        assert!(matches!(
            ConvKernelStack::<Tensor<f64>>::new(vec![], 4),
            Err(StructuredError::EmptyStack)
        ));
    }

    #[test]
    fn two_unit_kernels_give_binomial_band() {
        let k = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let stack = ConvKernelStack::new(vec![k.clone(), k], 4).unwrap();
        let m = stack.materialize(4).unwrap();
        assert_eq!(
            m.data(),
            &[1.0, 2.0, 1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(band_width(&m), 3);
        assert!(is_upper_triangular(&m));
    }

    #[test]
    fn single_kernel_materializes_to_its_toeplitz() {
        let k = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let stack = ConvKernelStack::new(vec![k.clone()], 6).unwrap();
        assert_eq!(
            stack.materialize(6).unwrap(),
            toeplitz_from_kernel(k.data(), 6).unwrap()
        );
    }

    #[test]
    fn layer_bound_formula() {
        assert_eq!(min_layers_full_triangle(8, 3).unwrap(), 4);
        assert_eq!(min_layers_full_triangle(5, 5).unwrap(), 1);
        assert_eq!(min_layers_full_triangle(16, 2).unwrap(), 15);
        assert!(matches!(
            min_layers_full_triangle(8, 1),
            Err(StructuredError::KernelTooShort(1))
        ));
    }

    #[test]
    fn apply_mask_zeroes_lower_part() {
        let mut w = Tensor::<f32>::full(&[3, 3], 1.0);
        apply_mask(&mut w);
        assert_eq!(w.data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
