use std::sync::Arc;

use super::kernels::{col2im, gemm, im2col, ConvGeom, Rotation, SpectralFilter};
use super::{expect_rank, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        // Geometry of the equivalent forward convolution, whose input is
        // this operator's output.
        geom: ConvGeom,
        cin: usize,
    },
    Lines {
        sino: Var,
        w: Var,
        batch: usize,
        views: usize,
        dets: usize,
        len: usize,
        shared: bool,
    },
    Rotate {
        x: Var,
        batch: usize,
        rots: Arc<Vec<Rotation>>,
    },
    Filter {
        x: Var,
        filter: SpectralFilter<T>,
    },
    Crop {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        top: usize,
        left: usize,
        oh: usize,
        ow: usize,
    },
    PadReflect {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        pad: usize,
    },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager tape of executed operations. Build one per step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out of the table.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Accumulates the gradient of `v` into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn acc_slot<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf. It receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a constant leaf regardless of its flag.
    pub fn frozen(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.frozen(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// The single value of a scalar (or one-element) node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    /// Smallest distance of any ReLU, leaky-ReLU or abs input from its kink.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for n in &self.nodes {
            let x = match n.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => x,
                _ => continue,
            };
            for &v in self.value(x) {
                best = best.min(v.as_f64().abs());
            }
        }
        best
    }

    // ----- element-wise -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    // ----- reductions and layout ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s / n], Op::Mean(x), rg)
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            oshape,
            out,
            Op::SumAxis {
                x,
                outer,
                axis: len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.node(x).value.clone();
        let rg = self.rg(&[x]);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Reshape(x),
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut oshape = base.clone();
        oshape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            oshape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis] * inner)
            .collect();
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * c..(o + 1) * c]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            oshape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    // ----- linear algebra ------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a),
            self.value(b),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Fully-connected layer: `x [B, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape(
                "linear",
                format!("input {sx:?}, weight {sw:?}"),
            ));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{fan_out}]", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); batch * fan_out];
        gemm(
            false,
            true,
            batch,
            fan_out,
            fan_in,
            T::one(),
            self.value(x),
            self.value(w),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![batch, fan_out],
            out,
            Op::Linear {
                x,
                w,
                b,
                batch,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    /// 2D convolution (cross-correlation): `x [B, Cin, H, W]`,
    /// `w [Cout, Cin, k, k]`, optional `b [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("conv2d", &sx, 4)?;
        expect_rank("conv2d", &sw, 4)?;
        if sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} has {} channels, weight {sw:?}", sx[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} smaller than kernel {k} (pad {pad})"),
            ));
        }
        let cout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: k,
            stride,
            pad,
        };
        let batch = sx[0];
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = cout * ho * wo;
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        let mut out = vec![T::zero(); batch * out_len];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            for bi in 0..batch {
                im2col(&xv[bi * in_len..(bi + 1) * in_len], geom, &mut cols);
                let ob = &mut out[bi * out_len..(bi + 1) * out_len];
                gemm(
                    false,
                    false,
                    cout,
                    ho * wo,
                    geom.col_rows(),
                    T::one(),
                    wv,
                    &cols,
                    T::zero(),
                    ob,
                );
                if let Some(bv) = bv {
                    for (c, plane) in ob.chunks_exact_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![batch, cout, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                geom,
                cout,
            },
            rg,
        ))
    }

    /// Transposed convolution: `x [B, Cin, H, W]`, `w [Cin, Cout, k, k]`.
    /// Output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("conv_transpose2d", &sx, 4)?;
        expect_rank("conv_transpose2d", &sw, 4)?;
        if sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {sx:?} has {} channels, weight {sw:?}", sx[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid(
                "conv_transpose2d: stride must be >= 1".into(),
            ));
        }
        let (cin, cout, k) = (sw[0], sw[1], sw[2]);
        let ho = ((sx[2] - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| {
                Error::shape(
                    "conv_transpose2d",
                    format!("padding {pad} too large for {sx:?}"),
                )
            })?;
        let wo = ((sx[3] - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| {
                Error::shape(
                    "conv_transpose2d",
                    format!("padding {pad} too large for {sx:?}"),
                )
            })?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), sx[2]);
        let batch = sx[0];
        let hw = sx[2] * sx[3];
        let in_len = cin * hw;
        let out_len = cout * ho * wo;
        let mut cols = vec![T::zero(); geom.col_rows() * hw];
        let mut out = vec![T::zero(); batch * out_len];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            for bi in 0..batch {
                gemm(
                    true,
                    false,
                    geom.col_rows(),
                    hw,
                    cin,
                    T::one(),
                    wv,
                    &xv[bi * in_len..(bi + 1) * in_len],
                    T::zero(),
                    &mut cols,
                );
                let ob = &mut out[bi * out_len..(bi + 1) * out_len];
                col2im(&cols, geom, ob);
                if let Some(bv) = bv {
                    for (c, plane) in ob.chunks_exact_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![batch, cout, ho, wo],
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                batch,
                geom,
                cin,
            },
            rg,
        ))
    }

    // ----- reconstruction-specific --------------------------------------

    /// Point-wise fully-connected back-projection: every sinogram sample
    /// `sino[b, v, d]` scales its own weight vector into a line of `len`
    /// values. `w` is `[V, D, len]` (one vector per sample) or `[len]`
    /// (shared by all samples). Output is `[B, V, len, D]`: one image per
    /// view whose column `d` holds the line of detector `d`.
    pub fn pointwise_lines(&mut self, sino: Var, w: Var) -> Result<Var> {
        let (ss, sw) = (self.shape(sino).to_vec(), self.shape(w).to_vec());
        expect_rank("pointwise_lines", &ss, 3)?;
        let (batch, views, dets) = (ss[0], ss[1], ss[2]);
        let (len, shared) = match sw.as_slice() {
            [l] => (*l, true),
            [v, d, l] if *v == views && *d == dets => (*l, false),
            _ => {
                return Err(Error::shape(
                    "pointwise_lines",
                    format!(
                        "sinogram {ss:?} needs weights [{views}, {dets}, L] or [L], got {sw:?}"
                    ),
                ))
            }
        };
        let sv = self.value(sino);
        let wv = self.value(w);
        let mut out = vec![T::zero(); batch * views * len * dets];
        for b in 0..batch {
            for v in 0..views {
                let img = &mut out[(b * views + v) * len * dets..(b * views + v + 1) * len * dets];
                let row = &sv[(b * views + v) * dets..(b * views + v + 1) * dets];
                for d in 0..dets {
                    let p = row[d];
                    let wvec = if shared {
                        wv
                    } else {
                        &wv[(v * dets + d) * len..(v * dets + d + 1) * len]
                    };
                    for i in 0..len {
                        img[i * dets + d] = p * wvec[i];
                    }
                }
            }
        }
        let rg = self.rg(&[sino, w]);
        Ok(self.push(
            vec![batch, views, len, dets],
            out,
            Op::Lines {
                sino,
                w,
                batch,
                views,
                dets,
                len,
                shared,
            },
            rg,
        ))
    }

    /// Bilinear rotation of every plane of `x [B, V, H, W]` onto an `n x n`
    /// grid; plane `v` is rotated counter-clockwise by `angles[v]` radians.
    /// Source columns are `col_scale` output pixels apart.
    pub fn rotate(&mut self, x: Var, angles: &[f64], n: usize, col_scale: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        expect_rank("rotate", &sx, 4)?;
        if sx[1] != angles.len() {
            return Err(Error::shape(
                "rotate",
                format!("{} planes per item but {} angles", sx[1], angles.len()),
            ));
        }
        if !(col_scale > 0.0) {
            return Err(Error::Invalid(format!(
                "rotate: column scale must be positive, got {col_scale}"
            )));
        }
        let (batch, views, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let rots: Vec<Rotation> = angles
            .iter()
            .map(|&a| Rotation::new(h, w, n, a, col_scale))
            .collect();
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch * views * n * n];
        for b in 0..batch {
            for (v, rot) in rots.iter().enumerate() {
                let p = b * views + v;
                rot.forward_acc(
                    &xv[p * h * w..(p + 1) * h * w],
                    &mut out[p * n * n..(p + 1) * n * n],
                );
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![batch, views, n, n],
            out,
            Op::Rotate {
                x,
                batch,
                rots: Arc::new(rots),
            },
            rg,
        ))
    }

    /// Fourier-domain filtering of every row (last axis) of `x`.
    pub fn fourier_filter(&mut self, x: Var, filter: &SpectralFilter<T>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.last() != Some(&filter.row_len()) {
            return Err(Error::shape(
                "fourier_filter",
                format!(
                    "rows of {sx:?} do not match filter row length {}",
                    filter.row_len()
                ),
            ));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        filter.apply(self.value(x), &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            sx,
            out,
            Op::Filter {
                x,
                filter: filter.clone(),
            },
            rg,
        ))
    }

    /// Crops `[B, C, H, W]` to `[B, C, oh, ow]` starting at `(top, left)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        expect_rank("crop2d", &sx, 4)?;
        let (h, w) = (sx[2], sx[3]);
        if top + oh > h || left + ow > w {
            return Err(Error::shape(
                "crop2d",
                format!("window {oh}x{ow} at ({top}, {left}) exceeds {h}x{w}"),
            ));
        }
        let planes = sx[0] * sx[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                let s = p * h * w + (top + i) * w + left;
                out.extend_from_slice(&xv[s..s + ow]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![sx[0], sx[1], oh, ow],
            out,
            Op::Crop {
                x,
                planes,
                h,
                w,
                top,
                left,
                oh,
                ow,
            },
            rg,
        ))
    }

    /// Mirror padding (edge sample not repeated) of `[B, C, H, W]`.
    pub fn pad2d_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        expect_rank("pad2d_reflect", &sx, 4)?;
        let (h, w) = (sx[2], sx[3]);
        if pad >= h || pad >= w {
            return Err(Error::shape(
                "pad2d_reflect",
                format!("pad {pad} too large for {h}x{w}"),
            ));
        }
        let planes = sx[0] * sx[1];
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                let si = reflect(i, pad, h);
                for j in 0..ow {
                    out[p * oh * ow + i * ow + j] = xv[p * h * w + si * w + reflect(j, pad, w)];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![sx[0], sx[1], oh, ow],
            out,
            Op::PadReflect {
                x,
                planes,
                h,
                w,
                pad,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`, visiting operations in exact
    /// reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = acc_slot(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let d = acc_slot(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if self.wants(*b) {
                    let d = acc_slot(&mut grads[b.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = acc_slot(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let d = acc_slot(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = acc_slot(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if self.wants(*b) {
                    let d = acc_slot(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(x, c) => {
                let d = acc_slot(&mut grads[x.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let d = acc_slot(&mut grads[x.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = acc_slot(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        d[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let d = acc_slot(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    d[i] += if xv[i] > T::zero() {
                        g[i]
                    } else {
                        g[i] * *slope
                    };
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = acc_slot(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        d[i] += g[i];
                    } else if xv[i] < T::zero() {
                        d[i] -= g[i];
                    }
                }
            }
            Op::Sum(x) => {
                let n = len_of(*x);
                let d = acc_slot(&mut grads[x.0], n);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                let gi = g[0] / T::lit(n as f64);
                let d = acc_slot(&mut grads[x.0], n);
                d.iter_mut().for_each(|d| *d += gi);
            }
            Op::SumAxis {
                x,
                outer,
                axis,
                inner,
            } => {
                let d = acc_slot(&mut grads[x.0], outer * axis * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..*axis {
                        let dst = &mut d[(o * axis + a) * inner..(o * axis + a + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if self.wants(v) {
                        let d = acc_slot(&mut grads[v.0], outer * c);
                        for o in 0..*outer {
                            let src = &g[o * total + off..o * total + off + c];
                            d[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += c;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let d = acc_slot(&mut grads[a.0], m * k);
                    gemm(
                        false,
                        true,
                        *m,
                        *k,
                        *n,
                        T::one(),
                        g,
                        self.value(*b),
                        T::one(),
                        d,
                    );
                }
                if self.wants(*b) {
                    let d = acc_slot(&mut grads[b.0], k * n);
                    gemm(
                        true,
                        false,
                        *k,
                        *n,
                        *m,
                        T::one(),
                        self.value(*a),
                        g,
                        T::one(),
                        d,
                    );
                }
            }
            Op::Linear {
                x,
                w,
                b,
                batch,
                fan_in,
                fan_out,
            } => {
                if self.wants(*x) {
                    let d = acc_slot(&mut grads[x.0], batch * fan_in);
                    gemm(
                        false,
                        false,
                        *batch,
                        *fan_in,
                        *fan_out,
                        T::one(),
                        g,
                        self.value(*w),
                        T::one(),
                        d,
                    );
                }
                if self.wants(*w) {
                    let d = acc_slot(&mut grads[w.0], fan_out * fan_in);
                    gemm(
                        true,
                        false,
                        *fan_out,
                        *fan_in,
                        *batch,
                        T::one(),
                        g,
                        self.value(*x),
                        T::one(),
                        d,
                    );
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let d = acc_slot(&mut grads[b.0], *fan_out);
                    for row in g.chunks_exact(*fan_out) {
                        d.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                geom,
                cout,
            } => {
                let in_len = geom.channels * geom.height * geom.width;
                let hw = geom.col_cols();
                let out_len = cout * hw;
                let rows = geom.col_rows();
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut cols = vec![T::zero(); rows * hw];
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                for bi in 0..*batch {
                    let gb = &g[bi * out_len..(bi + 1) * out_len];
                    if want_w {
                        im2col(&xv[bi * in_len..(bi + 1) * in_len], *geom, &mut cols);
                        let d = acc_slot(&mut grads[w.0], cout * rows);
                        gemm(
                            false,
                            true,
                            *cout,
                            rows,
                            hw,
                            T::one(),
                            gb,
                            &cols,
                            T::one(),
                            d,
                        );
                    }
                    if want_x {
                        let d = acc_slot(&mut grads[x.0], batch * in_len);
                        gemm(
                            true,
                            false,
                            rows,
                            hw,
                            *cout,
                            T::one(),
                            wv,
                            gb,
                            T::zero(),
                            &mut cols,
                        );
                        col2im(&cols, *geom, &mut d[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let d = acc_slot(&mut grads[b.0], *cout);
                    for gb in g.chunks_exact(out_len) {
                        for (c, plane) in gb.chunks_exact(hw).enumerate() {
                            d[c] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                batch,
                geom,
                cin,
            } => {
                let hw = geom.col_cols();
                let in_len = cin * hw;
                let out_plane = geom.height * geom.width;
                let out_len = geom.channels * out_plane;
                let rows = geom.col_rows();
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut cols = vec![T::zero(); rows * hw];
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                for bi in 0..*batch {
                    if !(want_x || want_w) {
                        break;
                    }
                    im2col(&g[bi * out_len..(bi + 1) * out_len], *geom, &mut cols);
                    if want_x {
                        let d = acc_slot(&mut grads[x.0], batch * in_len);
                        gemm(
                            false,
                            false,
                            *cin,
                            hw,
                            rows,
                            T::one(),
                            wv,
                            &cols,
                            T::one(),
                            &mut d[bi * in_len..(bi + 1) * in_len],
                        );
                    }
                    if want_w {
                        let d = acc_slot(&mut grads[w.0], cin * rows);
                        gemm(
                            false,
                            true,
                            *cin,
                            rows,
                            hw,
                            T::one(),
                            &xv[bi * in_len..(bi + 1) * in_len],
                            &cols,
                            T::one(),
                            d,
                        );
                    }
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let d = acc_slot(&mut grads[b.0], geom.channels);
                    for gb in g.chunks_exact(out_len) {
                        for (c, plane) in gb.chunks_exact(out_plane).enumerate() {
                            d[c] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Lines {
                sino,
                w,
                batch,
                views,
                dets,
                len,
                shared,
            } => {
                let (batch, views, dets, len) = (*batch, *views, *dets, *len);
                let sv = self.value(*sino);
                let wv = self.value(*w);
                let wslice = |v: usize, d: usize| -> std::ops::Range<usize> {
                    if *shared {
                        0..len
                    } else {
                        (v * dets + d) * len..(v * dets + d + 1) * len
                    }
                };
                if self.wants(*sino) {
                    let ds = acc_slot(&mut grads[sino.0], batch * views * dets);
                    for b in 0..batch {
                        for v in 0..views {
                            let p = b * views + v;
                            let img = &g[p * len * dets..(p + 1) * len * dets];
                            for d in 0..dets {
                                let wvec = &wv[wslice(v, d)];
                                let mut acc = T::zero();
                                for i in 0..len {
                                    acc += img[i * dets + d] * wvec[i];
                                }
                                ds[p * dets + d] += acc;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = acc_slot(
                        &mut grads[w.0],
                        if *shared { len } else { views * dets * len },
                    );
                    for b in 0..batch {
                        for v in 0..views {
                            let p = b * views + v;
                            let img = &g[p * len * dets..(p + 1) * len * dets];
                            for d in 0..dets {
                                let s = sv[p * dets + d];
                                let r = wslice(v, d);
                                let dvec = &mut dw[r];
                                for i in 0..len {
                                    dvec[i] += img[i * dets + d] * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Rotate { x, batch, rots } => {
                let r0 = rots[0];
                let (h, w, n) = (r0.src_h, r0.src_w, r0.n);
                let views = rots.len();
                let d = acc_slot(&mut grads[x.0], batch * views * h * w);
                for b in 0..*batch {
                    for (v, rot) in rots.iter().enumerate() {
                        let p = b * views + v;
                        rot.adjoint_acc(
                            &g[p * n * n..(p + 1) * n * n],
                            &mut d[p * h * w..(p + 1) * h * w],
                        );
                    }
                }
            }
            Op::Filter { x, filter } => {
                let d = acc_slot(&mut grads[x.0], g.len());
                filter.adjoint_acc(g, d);
            }
            Op::Crop {
                x,
                planes,
                h,
                w,
                top,
                left,
                oh,
                ow,
            } => {
                let d = acc_slot(&mut grads[x.0], planes * h * w);
                for p in 0..*planes {
                    for i in 0..*oh {
                        let s = p * h * w + (top + i) * w + left;
                        let src = &g[(p * oh + i) * ow..(p * oh + i + 1) * ow];
                        d[s..s + ow].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::PadReflect {
                x,
                planes,
                h,
                w,
                pad,
            } => {
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let d = acc_slot(&mut grads[x.0], planes * h * w);
                for p in 0..*planes {
                    for i in 0..oh {
                        let si = reflect(i, *pad, *h);
                        for j in 0..ow {
                            d[p * h * w + si * w + reflect(j, *pad, *w)] +=
                                g[p * oh * ow + i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

fn reflect(i: usize, pad: usize, n: usize) -> usize {
    let s = i as isize - pad as isize;
    let n = n as isize;
    let r = if s < 0 {
        -s
    } else if s >= n {
        2 * (n - 1) - s
    } else {
        s
    };
    r as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>, grad: bool) -> Var {
        let t = Tensor::new(shape.to_vec(), data)
            .unwrap()
            .with_requires_grad(grad);
        g.input(&t)
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[3], vec![-1.0, 0.0, 2.0], false);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let y = leaf(&mut g, &[2], vec![-1.0, 2.0], false);
        let l = g.leaky_relu(y, 0.2);
        assert_eq!(g.value(l), &[-0.2, 2.0]);
    }

    #[test]
    fn concat_on_channel_axis() {
        let mut g = Graph::<f32>::new();
        let a = g.constant([1, 1, 64, 64], vec![1.0; 4096]).unwrap();
        let b = g.constant([1, 1, 64, 64], vec![2.0; 4096]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 64, 64]);
        assert_eq!(g.value(c)[4095], 1.0);
        assert_eq!(g.value(c)[4096], 2.0);
    }

    #[test]
    fn linear_function_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let w = leaf(&mut g, &[4], vec![0.5, -1.0, 2.0, 3.0], true);
        let x = leaf(&mut g, &[4], vec![1.0, 2.0, 3.0, 4.0], false);
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn mae_gradient_is_negative_sign_over_count() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[4], vec![0.0, 1.0, 0.5, -2.0], true);
        let y = leaf(&mut g, &[4], vec![1.0, 0.0, 0.75, -1.0], false);
        let d = g.sub(y, x).unwrap();
        let a = g.abs(d);
        let loss = g.mean(a);
        let grads = g.backward(loss).unwrap();
        let expect: Vec<f64> = g.value(d).iter().map(|v| -v.signum() / 4.0).collect();
        assert_eq!(grads.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_operator_and_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([1, 3, 8, 8], vec![0.0; 192]).unwrap();
        let w = g.constant([2, 2, 3, 3], vec![0.0; 36]).unwrap();
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(
            err.contains("conv2d") && err.contains("[1, 3, 8, 8]"),
            "{err}"
        );
        let a = g.constant([2], vec![0.0; 2]).unwrap();
        let b = g.constant([3], vec![0.0; 3]).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2] vs [3]"), "{err}");
    }

    #[test]
    fn conv_output_sizes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant([2, 1, 64, 64], vec![0.0; 2 * 4096]).unwrap();
        let w = g.constant([4, 1, 3, 3], vec![0.0; 36]).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 32, 32]);
        let w5 = g.constant([4, 1, 5, 5], vec![0.0; 100]).unwrap();
        let v = g.conv2d(x, w5, None, 1, 0).unwrap();
        assert_eq!(g.shape(v), &[2, 4, 60, 60]);
        let wt = g.constant([4, 2, 5, 5], vec![0.0; 200]).unwrap();
        let t = g.conv_transpose2d(v, wt, None, 1, 0).unwrap();
        assert_eq!(g.shape(t), &[2, 2, 64, 64]);
        let t2 = g.conv_transpose2d(v, wt, None, 1, 2).unwrap();
        assert_eq!(g.shape(t2), &[2, 2, 60, 60]);
    }

    #[test]
    fn reflect_padding_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        // only width can be padded by 1 here if height allows; use 3x3
        let _ = x;
        let x = g
            .constant([1, 1, 3, 3], (1..=9).map(f64::from).collect())
            .unwrap();
        let p = g.pad2d_reflect(x, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 5, 5]);
        assert_eq!(&g.value(p)[..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::param([2], vec![1.0, 2.0]).unwrap();
        let a = g.frozen(&t);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }
}
