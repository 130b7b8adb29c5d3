//! A small reverse-mode autodiff tape over `ndarray` dynamic arrays.
//!
//! Ops append nodes to the tape; `backward` walks the nodes in reverse
//! creation order and accumulates gradients. The engine is generic over f32
//! (runtime) and f64 (finite-difference verification).

use ndarray::{ArrayD, IxDyn};

/// Scalar element type of the tape.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Casts an f64 constant into the tape scalar type.
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from(v).expect("scalar cast")
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub usize);

/// grad_out, parent values, own value -> parent gradients.
pub(crate) type BackFn<F> =
    Box<dyn Fn(&ArrayD<F>, &[&ArrayD<F>], &ArrayD<F>) -> Vec<ArrayD<F>> + Send + Sync>;

pub(crate) struct Node<F: Scalar> {
    pub value: ArrayD<F>,
    pub parents: Vec<Tid>,
    pub backward: Option<BackFn<F>>,
}

pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Tid) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: Tid) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Input node; gradients flow into it but it has no parents.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Tid {
        self.push(value, vec![], None)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<Tid>,
        backward: Option<BackFn<F>>,
    ) -> Tid {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Tid(self.nodes.len() - 1)
    }

    /// Gradients of `root` (summed if non-scalar, i.e. seeded with ones)
    /// with respect to every node.
    pub fn backward(&self, root: Tid) -> Vec<Option<ArrayD<F>>> {
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Tid, seed: ArrayD<F>) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(
            seed.shape(),
            self.nodes[root.0].value.shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&ArrayD<F>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = back(&g, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }

    // ---- elementwise ops ----

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let k: F = cast(c);
        let value = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * k)])),
        )
    }

    /// Elementwise product with a non-differentiated constant (e.g. a mask).
    pub fn mul_const(&mut self, a: Tid, k: &ArrayD<F>) -> Tid {
        assert_eq!(self.shape(a), k.shape(), "mul_const shape mismatch");
        let value = &self.nodes[a.0].value * k;
        let k = k.clone();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g * &k])),
        )
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let one = F::one();
        let value = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, y| {
                vec![ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * y * (F::one() - y))]
            })),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Tid) -> Tid {
        let one = F::one();
        let value = self.nodes[a.0].value.mapv(|x| x / (one + (-x).exp()));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![ndarray::Zip::from(g).and(p[0]).map_collect(|&g, &x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    g * (s + x * s * (F::one() - s))
                })]
            })),
        )
    }

    /// Gated linear unit over `axis`: the first half of the channels is
    /// multiplied by the sigmoid of the second half.
    pub fn glu(&mut self, a: Tid, axis: usize) -> Tid {
        let n = self.shape(a)[axis];
        assert!(n % 2 == 0, "glu needs an even channel count");
        let half = n / 2;
        let ax = ndarray::Axis(axis);
        let v = &self.nodes[a.0].value;
        let feat = v.index_axis_range(ax, 0..half);
        let gate = v.index_axis_range(ax, half..n);
        let one = F::one();
        let value = ndarray::Zip::from(&feat)
            .and(&gate)
            .map_collect(|&f, &x| f * (one / (one + (-x).exp())));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let v = p[0];
                let ax = ndarray::Axis(axis);
                let n = v.shape()[axis];
                let feat = v.index_axis_range(ax, 0..n / 2);
                let gate = v.index_axis_range(ax, n / 2..n);
                let mut out = ArrayD::zeros(v.raw_dim());
                {
                    let (mut dfeat, mut dgate) = out.view_mut().split_at(ax, n / 2);
                    ndarray::Zip::from(&mut dfeat)
                        .and(g)
                        .and(&gate)
                        .for_each(|d, &g, &x| {
                            *d = g * (F::one() / (F::one() + (-x).exp()));
                        });
                    ndarray::Zip::from(&mut dgate)
                        .and(g)
                        .and(&feat)
                        .and(&gate)
                        .for_each(|d, &g, &f, &x| {
                            let s = F::one() / (F::one() + (-x).exp());
                            *d = g * f * s * (F::one() - s);
                        });
                }
                vec![out]
            })),
        )
    }

    /// Elementwise natural log (inputs must be positive).
    pub fn ln(&mut self, a: Tid) -> Tid {
        let value = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, p, _| vec![g / p[0]])),
        )
    }

    /// max(x, c) with zero gradient below the floor.
    pub fn clamp_min(&mut self, a: Tid, c: f64) -> Tid {
        let k: F = cast(c);
        let value = self.nodes[a.0].value.mapv(|x| x.max(k));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![ndarray::Zip::from(g)
                    .and(p[0])
                    .map_collect(|&g, &x| if x >= k { g } else { F::zero() })]
            })),
        )
    }

    /// Mean over all elements, producing a shape-[1] tensor.
    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let n = self.nodes[a.0].value.len();
        let inv: F = cast(1.0 / n as f64);
        let m = self.nodes[a.0].value.iter().fold(F::zero(), |acc, &x| acc + x) * inv;
        let value = ArrayD::from_elem(IxDyn(&[1]), m);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let gv = *g.first().unwrap() * inv;
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    /// Sum over `axis` (the axis is removed).
    pub fn sum_axis(&mut self, a: Tid, axis: usize) -> Tid {
        let value = self.nodes[a.0].value.sum_axis(ndarray::Axis(axis));
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut shape = p[0].shape().to_vec();
                let n = shape[axis];
                shape[axis] = 1;
                let g1 = g.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
                let mut out = ArrayD::zeros(p[0].raw_dim());
                for i in 0..n {
                    out.index_axis_mut(ndarray::Axis(axis), i)
                        .assign(&g1.index_axis(ndarray::Axis(axis), 0));
                }
                vec![out]
            })),
        )
    }

    /// Mean over `axis` (the axis is removed).
    pub fn mean_axis(&mut self, a: Tid, axis: usize) -> Tid {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats a length-1 axis `n` times.
    pub fn repeat_axis(&mut self, a: Tid, axis: usize, n: usize) -> Tid {
        assert_eq!(self.shape(a)[axis], 1, "repeat_axis needs a unit axis");
        let mut shape = self.shape(a).to_vec();
        shape[axis] = n;
        let value = self.nodes[a.0].value.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let summed = g.sum_axis(ndarray::Axis(axis));
                let back = summed
                    .insert_axis(ndarray::Axis(axis))
                    .into_shape_with_order(p[0].raw_dim())
                    .unwrap();
                vec![back]
            })),
        )
    }

    /// Reshape (materializes standard layout first when needed).
    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let value = self.nodes[a.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(p[0].raw_dim())
                    .unwrap()]
            })),
        )
    }

    /// Axis permutation (output is materialized in standard layout).
    pub fn permute(&mut self, a: Tid, axes: &[usize]) -> Tid {
        let axes_owned = axes.to_vec();
        let value = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_owned.len()];
        for (i, &ax) in axes_owned.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Tid, axis: usize, start: usize, len: usize) -> Tid {
        let value = self.nodes[a.0]
            .value
            .index_axis_range(ndarray::Axis(axis), start..start + len)
            .to_owned();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut out = ArrayD::zeros(p[0].raw_dim());
                out.index_axis_range_mut(ndarray::Axis(axis), start..start + len)
                    .assign(g);
                vec![out]
            })),
        )
    }

    /// Concatenation along `axis`.
    pub fn cat(&mut self, parts: &[Tid], axis: usize) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(axis), &views)
            .expect("cat shape mismatch")
            .as_standard_layout()
            .to_owned();
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    out.push(
                        g.index_axis_range(ndarray::Axis(axis), off..off + s)
                            .to_owned(),
                    );
                    off += s;
                }
                out
            })),
        )
    }
}

/// Convenience extension used by ops and tests.
pub(crate) trait IndexAxisRange<F> {
    fn index_axis_range(&self, axis: ndarray::Axis, range: std::ops::Range<usize>) -> ndarray::ArrayViewD<'_, F>;
}

impl<F: Scalar> IndexAxisRange<F> for ArrayD<F> {
    fn index_axis_range(&self, axis: ndarray::Axis, range: std::ops::Range<usize>) -> ndarray::ArrayViewD<'_, F> {
        self.slice_axis(axis, ndarray::Slice::from(range))
    }
}

pub(crate) trait IndexAxisRangeMut<F> {
    fn index_axis_range_mut(
        &mut self,
        axis: ndarray::Axis,
        range: std::ops::Range<usize>,
    ) -> ndarray::ArrayViewMutD<'_, F>;
}

impl<F: Scalar> IndexAxisRangeMut<F> for ArrayD<F> {
    fn index_axis_range_mut(
        &mut self,
        axis: ndarray::Axis,
        range: std::ops::Range<usize>,
    ) -> ndarray::ArrayViewMutD<'_, F> {
        self.slice_axis_mut(axis, ndarray::Slice::from(range))
    }
}
