//! Operation constructors and their backward rules.
//!
//! Every rule produces its parent adjoints through these same constructors,
//! which keeps the op set closed under differentiation: gradients computed
//! with `create_graph` can be differentiated again. The two depthwise
//! convolution adjoints are the only deliberate cut — they error on a third
//! pass, and nothing on a gradient-penalty path involves them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, PaddingMode};
use crate::tensor::maps::{PermuteMap, SparseMap};
use crate::tensor::{Tensor, VjpOp};

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

/// Shape produced by aligning trailing axes; lower-rank operands get implicit
/// leading 1s, explicit size-1 axes stretch.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ea = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let eb = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if ea == eb || ea == 1 || eb == 1 {
            out[d] = ea.max(eb);
        } else {
            return Err(Error::Dimension {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides of `shape` viewed in the coordinates of `out` (aligned
/// on trailing axes, zero stride on stretched or missing axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = kernels::strides_of(shape);
    let lead = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for d in 0..shape.len() {
        s[lead + d] = if shape[d] == out[d + lead] { own[d] } else { 0 };
    }
    s
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinKind,
}

impl<T: Scalar> VjpOp<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }

    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let da = if needs[0] {
            Some(match self.kind {
                BinKind::Add | BinKind::Sub => g.sum_to(a.shape())?,
                BinKind::Mul => g.mul(b)?.sum_to(a.shape())?,
            })
        } else {
            None
        };
        let db = if needs[1] {
            Some(match self.kind {
                BinKind::Add => g.sum_to(b.shape())?,
                BinKind::Sub => g.scale(T::from_f64(-1.0)).sum_to(b.shape())?,
                BinKind::Mul => g.mul(a)?.sum_to(b.shape())?,
            })
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinKind) -> Result<Tensor<T>> {
    let op_name = match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
    };
    let f = match kind {
        BinKind::Add => |x: T, y: T| x + y,
        BinKind::Sub => |x: T, y: T| x - y,
        BinKind::Mul => |x: T, y: T| x * y,
    };
    let data = if a.shape() == b.shape() {
        kernels::zip_binary(a.data(), b.data(), f)
    } else {
        let out_shape = broadcast_shape(op_name, a.shape(), b.shape())?;
        let sa = bcast_strides(a.shape(), &out_shape);
        let sb = bcast_strides(b.shape(), &out_shape);
        kernels::zip_broadcast(a.data(), &sa, b.data(), &sb, &out_shape, f)
    };
    let shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        broadcast_shape(op_name, a.shape(), b.shape())?
    };
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(Binary { kind }),
    ))
}

// ---------------------------------------------------------------------------
// scale / shift by a constant
// ---------------------------------------------------------------------------

struct Scale<T: Scalar> {
    c: T,
}

impl<T: Scalar> VjpOp<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        _parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![needs[0].then(|| g.scale(self.c))])
    }
}

struct AddScalar;

impl<T: Scalar> VjpOp<T> for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        _parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![needs[0].then(|| g.clone())])
    }
}

// ---------------------------------------------------------------------------
// elementwise unary functions with derivative chains
// ---------------------------------------------------------------------------

/// Pointwise functions. Each differentiable variant knows its derivative as
/// another variant, so backward passes stay inside this enum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Gelu,
    GeluD1,
    GeluD2,
    Tanh,
    TanhD1,
    TanhD2,
    Sigmoid,
    SigmoidD1,
    SigmoidD2,
    Softplus,
    Abs,
    Sign,
    ZeroFn,
    Ln,
    /// c * x^e (positive arguments only when e is fractional or negative)
    Pow { c: f64, e: f64 },
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl UnaryFn {
    #[inline(always)]
    pub fn eval<T: Scalar>(self, x: T) -> T {
        let k = T::from_f64(GELU_K);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let one = T::one();
        let two = T::from_f64(2.0);
        match self {
            UnaryFn::Gelu => {
                let t = (k * (x + a * x * x * x)).tanh_hot();
                half * x * (one + t)
            }
            UnaryFn::GeluD1 => {
                let t = (k * (x + a * x * x * x)).tanh_hot();
                let du = k * (one + T::from_f64(3.0) * a * x * x);
                half * (one + t) + half * x * (one - t * t) * du
            }
            UnaryFn::GeluD2 => {
                let t = (k * (x + a * x * x * x)).tanh_hot();
                let du = k * (one + T::from_f64(3.0) * a * x * x);
                let ddu = T::from_f64(6.0) * k * a * x;
                (one - t * t) * (du - x * t * du * du + half * x * ddu)
            }
            UnaryFn::Tanh => x.tanh_hot(),
            UnaryFn::TanhD1 => {
                let t = x.tanh_hot();
                one - t * t
            }
            UnaryFn::TanhD2 => {
                let t = x.tanh_hot();
                -two * t * (one - t * t)
            }
            UnaryFn::Sigmoid => one / (one + (-x).exp()),
            UnaryFn::SigmoidD1 => {
                let s = one / (one + (-x).exp());
                s * (one - s)
            }
            UnaryFn::SigmoidD2 => {
                let s = one / (one + (-x).exp());
                s * (one - s) * (one - two * s)
            }
            UnaryFn::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            UnaryFn::Abs => x.abs(),
            UnaryFn::Sign => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            UnaryFn::ZeroFn => T::zero(),
            UnaryFn::Ln => x.ln(),
            UnaryFn::Pow { c, e } => T::from_f64(c) * x.powf(T::from_f64(e)),
        }
    }

    pub fn derivative(self) -> UnaryFn {
        match self {
            UnaryFn::Gelu => UnaryFn::GeluD1,
            UnaryFn::GeluD1 => UnaryFn::GeluD2,
            UnaryFn::Tanh => UnaryFn::TanhD1,
            UnaryFn::TanhD1 => UnaryFn::TanhD2,
            UnaryFn::Sigmoid => UnaryFn::SigmoidD1,
            UnaryFn::SigmoidD1 => UnaryFn::SigmoidD2,
            UnaryFn::Softplus => UnaryFn::Sigmoid,
            UnaryFn::Abs => UnaryFn::Sign,
            UnaryFn::Sign | UnaryFn::ZeroFn => UnaryFn::ZeroFn,
            UnaryFn::Ln => UnaryFn::Pow { c: 1.0, e: -1.0 },
            UnaryFn::Pow { c, e } => {
                if e == 0.0 {
                    UnaryFn::ZeroFn
                } else {
                    UnaryFn::Pow { c: c * e, e: e - 1.0 }
                }
            }
            other => panic!("derivative order not supported for {other:?}"),
        }
    }

    /// Evaluate over a slice with the variant dispatch hoisted out of the
    /// inner loop.
    fn eval_slice<T: Scalar>(self, x: &[T]) -> Vec<T> {
        use UnaryFn::*;
        match self {
            Gelu => kernels::map_unary(x, |v| Gelu.eval(v)),
            GeluD1 => kernels::map_unary(x, |v| GeluD1.eval(v)),
            GeluD2 => kernels::map_unary(x, |v| GeluD2.eval(v)),
            Tanh => kernels::map_unary(x, |v| Tanh.eval(v)),
            TanhD1 => kernels::map_unary(x, |v| TanhD1.eval(v)),
            TanhD2 => kernels::map_unary(x, |v| TanhD2.eval(v)),
            Sigmoid => kernels::map_unary(x, |v| Sigmoid.eval(v)),
            SigmoidD1 => kernels::map_unary(x, |v| SigmoidD1.eval(v)),
            SigmoidD2 => kernels::map_unary(x, |v| SigmoidD2.eval(v)),
            Softplus => kernels::map_unary(x, |v| Softplus.eval(v)),
            Abs => kernels::map_unary(x, |v| Abs.eval(v)),
            Sign => kernels::map_unary(x, |v| Sign.eval(v)),
            ZeroFn => vec![T::zero(); x.len()],
            Ln => kernels::map_unary(x, |v| Ln.eval(v)),
            Pow { c, e } => kernels::map_unary(x, move |v| Pow { c, e }.eval(v)),
        }
    }

    /// Domain precondition over a full slice; returns the first offender.
    fn check_domain<T: Scalar>(self, data: &[T]) -> Result<()> {
        let needs_positive = match self {
            UnaryFn::Ln => true,
            UnaryFn::Pow { e, .. } => e.fract() != 0.0 || e < 0.0,
            _ => false,
        };
        if needs_positive {
            if let Some(v) = data.iter().find(|v| **v <= T::zero()) {
                return Err(Error::NumericDomain(format!(
                    "{self:?} requires strictly positive input, got {v}"
                )));
            }
        }
        Ok(())
    }
}

struct Unary {
    f: UnaryFn,
}

impl<T: Scalar> VjpOp<T> for Unary {
    fn name(&self) -> &'static str {
        "unary"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let d = parents[0].unary(self.f.derivative())?;
        Ok(vec![Some(g.mul(&d)?)])
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct Matmul {
    ta: bool,
    tb: bool,
}

impl<T: Scalar> VjpOp<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (ta, tb) = (self.ta, self.tb);
        let da = if needs[0] {
            Some(if !ta {
                matmul_tf(g, b, false, !tb)?
            } else {
                matmul_tf(b, g, tb, true)?
            })
        } else {
            None
        };
        let db = if needs[1] {
            Some(if !tb {
                matmul_tf(a, g, !ta, false)?
            } else {
                matmul_tf(g, a, true, ta)?
            })
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

/// out = op(a) * op(b) where `ta`/`tb` transpose their operand. Both operands
/// must be 2-D.
pub fn matmul_tf<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "matmul (2-D operands required)",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::Dimension {
            op: "matmul (inner extents differ)",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let a_nn;
    let a_data: &[T] = if ta {
        a_nn = kernels::transpose(a.data(), ar, ac);
        &a_nn
    } else {
        a.data()
    };
    let b_nn;
    let b_data: &[T] = if tb {
        b_nn = kernels::transpose(b.data(), br, bc);
        &b_nn
    } else {
        b.data()
    };
    let data = kernels::matmul_nn(a_data, b_data, m, k, n);
    Ok(Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(Matmul { ta, tb }),
    ))
}

struct MatmulBias;

impl<T: Scalar> VjpOp<T> for MatmulBias {
    fn name(&self) -> &'static str {
        "matmul_bias"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, bias) = (&parents[0], &parents[1], &parents[2]);
        let da = if needs[0] {
            Some(matmul_tf(g, b, false, true)?)
        } else {
            None
        };
        let db = if needs[1] {
            Some(matmul_tf(a, g, true, false)?)
        } else {
            None
        };
        let dbias = if needs[2] {
            Some(g.sum_to(bias.shape())?)
        } else {
            None
        };
        Ok(vec![da, db, dbias])
    }
}

/// out = a @ b + bias, with the bias add folded into the matmul kernel.
pub fn matmul_bias<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Dimension {
            op: "matmul_bias",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if bias.shape() != [n] {
        return Err(Error::Dimension {
            op: "matmul_bias (bias)",
            lhs: b.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let data = kernels::matmul_nn_bias(a.data(), b.data(), bias.data(), m, k, n);
    Ok(Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone(), bias.clone()],
        Box::new(MatmulBias),
    ))
}

/// out = x * gain[b,c] + shift[b,c] over [B,C,H,W]; gain/shift are [B,C].
struct ScaleShift {
    spatial: usize,
}

impl<T: Scalar> VjpOp<T> for ScaleShift {
    fn name(&self) -> &'static str {
        "scale_shift"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gain, _shift) = (&parents[0], &parents[1], &parents[2]);
        let (b, c) = (gain.shape()[0], gain.shape()[1]);
        let gain4 = gain.reshape(&[b, c, 1, 1])?;
        let dx = if needs[0] {
            Some(g.mul(&gain4)?)
        } else {
            None
        };
        let dgain = if needs[1] {
            Some(g.mul(x)?.sum_to(&[b, c, 1, 1])?.reshape(&[b, c])?)
        } else {
            None
        };
        let dshift = if needs[2] {
            Some(g.sum_to(&[b, c, 1, 1])?.reshape(&[b, c])?)
        } else {
            None
        };
        let _ = self.spatial;
        Ok(vec![dx, dgain, dshift])
    }
}

pub fn scale_shift<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || gain.shape() != [s[0], s[1]] || shift.shape() != gain.shape() {
        return Err(Error::Dimension {
            op: "scale_shift",
            lhs: s.to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let spatial = s[2] * s[3];
    let xd = x.data();
    let gd = gain.data();
    let sd = shift.data();
    let mut data = vec![T::zero(); xd.len()];
    for (p, o) in data.chunks_mut(spatial).enumerate() {
        let (gv, sv) = (gd[p], sd[p]);
        let base = p * spatial;
        for (ov, &xv) in o.iter_mut().zip(&xd[base..base + spatial]) {
            *ov = xv * gv + sv;
        }
    }
    Ok(Tensor::from_op(
        data,
        s.to_vec(),
        vec![x.clone(), gain.clone(), shift.clone()],
        Box::new(ScaleShift { spatial }),
    ))
}

// ---------------------------------------------------------------------------
// reductions and broadcasts
// ---------------------------------------------------------------------------

struct SumAll;

impl<T: Scalar> VjpOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.broadcast_to_shape(parents[0].shape())?)])
    }
}

struct SumTo;

impl<T: Scalar> VjpOp<T> for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.broadcast_to_shape(parents[0].shape())?)])
    }
}

struct BroadcastTo;

impl<T: Scalar> VjpOp<T> for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.sum_to(parents[0].shape())?)])
    }
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

struct Reshape;

impl<T: Scalar> VjpOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.reshape(parents[0].shape())?)])
    }
}

struct Permute {
    map: PermuteMap,
}

impl<T: Scalar> VjpOp<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        _parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.permute(&self.map.inverse())?)])
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<T: Scalar> VjpOp<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let total = parents[0].shape()[self.axis];
        Ok(vec![Some(g.pad_axis(self.axis, self.start, total)?)])
    }
}

struct PadAxis {
    axis: usize,
    before: usize,
}

impl<T: Scalar> VjpOp<T> for PadAxis {
    fn name(&self) -> &'static str {
        "pad_axis"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let len = parents[0].shape()[self.axis];
        Ok(vec![Some(g.narrow(self.axis, self.before, len)?)])
    }
}

struct Concat {
    axis: usize,
}

impl<T: Scalar> VjpOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut out = Vec::with_capacity(parents.len());
        let mut offset = 0usize;
        for (p, &need) in parents.iter().zip(needs) {
            let len = p.shape()[self.axis];
            out.push(if need {
                Some(g.narrow(self.axis, offset, len)?)
            } else {
                None
            });
            offset += len;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// row gather / scatter
// ---------------------------------------------------------------------------

struct GatherRows {
    indices: Arc<Vec<usize>>,
}

impl<T: Scalar> VjpOp<T> for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let rows = parents[0].shape()[0];
        Ok(vec![Some(g.scatter_add_rows(Arc::clone(&self.indices), rows)?)])
    }
}

struct ScatterAddRows {
    indices: Arc<Vec<usize>>,
}

impl<T: Scalar> VjpOp<T> for ScatterAddRows {
    fn name(&self) -> &'static str {
        "scatter_add_rows"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        _parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.gather_rows(Arc::clone(&self.indices))?)])
    }
}

// ---------------------------------------------------------------------------
// depthwise convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct DwDims {
    planes: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: PaddingMode,
}

struct DwConv {
    dims: DwDims,
}

impl<T: Scalar> VjpOp<T> for DwConv {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, k) = (&parents[0], &parents[1]);
        let d = self.dims;
        let dbias = if parents.len() > 2 && needs[2] {
            Some(
                g.sum_to(&[1, d.channels, 1, 1])?
                    .reshape(&[d.channels])?,
            )
        } else {
            None
        };
        let dx = if needs[0] {
            let data = kernels::dwconv_adj_input(
                g.data(),
                k.data(),
                d.planes,
                d.channels,
                d.h,
                d.w,
                d.k,
                d.pad,
            );
            Some(Tensor::from_op(
                data,
                x.shape().to_vec(),
                vec![g.clone(), k.clone()],
                Box::new(DwSecondOrderCut),
            ))
        } else {
            None
        };
        let dk = if needs[1] {
            let data = kernels::dwconv_adj_kernel(
                g.data(),
                x.data(),
                d.planes,
                d.channels,
                d.h,
                d.w,
                d.k,
                d.pad,
            );
            Some(Tensor::from_op(
                data,
                k.shape().to_vec(),
                vec![g.clone(), x.clone()],
                Box::new(DwSecondOrderCut),
            ))
        } else {
            None
        };
        let mut grads = vec![dx, dk];
        if parents.len() > 2 {
            grads.push(dbias);
        }
        Ok(grads)
    }
}

struct DwSecondOrderCut;

impl<T: Scalar> VjpOp<T> for DwSecondOrderCut {
    fn name(&self) -> &'static str {
        "depthwise_conv2d_adjoint"
    }
    fn vjp(
        &self,
        _g: &Tensor<T>,
        _parents: &[Tensor<T>],
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Err(Error::Contract(
            "second-order gradients through depthwise convolutions are not supported".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// sparse linear maps
// ---------------------------------------------------------------------------

struct SparseApply<T: Scalar> {
    map: Arc<SparseMap<T>>,
    adjoint: bool,
}

impl<T: Scalar> VjpOp<T> for SparseApply<T> {
    fn name(&self) -> &'static str {
        "sparse_linear"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        _parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        Ok(vec![Some(g.sparse_apply(Arc::clone(&self.map), !self.adjoint)?)])
    }
}

// ---------------------------------------------------------------------------
// public surface
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinKind::Mul)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = kernels::map_unary(self.data(), |v| v * c);
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Box::new(Scale { c }))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = kernels::map_unary(self.data(), |v| v + c);
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Box::new(AddScalar))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(T::from_f64(-1.0))
    }

    pub fn unary(&self, f: UnaryFn) -> Result<Tensor<T>> {
        f.check_domain(self.data())?;
        let data = f.eval_slice(self.data());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(Unary { f }),
        ))
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.unary(UnaryFn::Gelu).expect("gelu is total")
    }

    pub fn tanh_act(&self) -> Tensor<T> {
        self.unary(UnaryFn::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryFn::Sigmoid).expect("sigmoid is total")
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary(UnaryFn::Softplus).expect("softplus is total")
    }

    pub fn abs_val(&self) -> Tensor<T> {
        self.unary(UnaryFn::Abs).expect("abs is total")
    }

    /// Natural log; errors on non-positive elements.
    pub fn ln_op(&self) -> Result<Tensor<T>> {
        self.unary(UnaryFn::Ln)
    }

    pub fn sqrt_op(&self) -> Result<Tensor<T>> {
        self.unary(UnaryFn::Pow { c: 1.0, e: 0.5 })
    }

    pub fn recip_op(&self) -> Result<Tensor<T>> {
        self.unary(UnaryFn::Pow { c: 1.0, e: -1.0 })
    }

    pub fn square(&self) -> Tensor<T> {
        self.mul(self).expect("same-shape mul")
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_tf(self, rhs, false, false)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = kernels::sum_all(self.data());
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], Box::new(SumAll))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Reduce by summation to a broadcast-compatible target shape (trailing
    /// alignment; extra leading axes are summed out).
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        let rank = self.shape().len();
        if target.len() > rank {
            return Err(Error::Dimension {
                op: "sum_to",
                lhs: self.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let mut aligned = vec![1usize; rank];
        aligned[rank - target.len()..].copy_from_slice(target);
        for d in 0..rank {
            if aligned[d] != 1 && aligned[d] != self.shape()[d] {
                return Err(Error::Dimension {
                    op: "sum_to",
                    lhs: self.shape().to_vec(),
                    rhs: target.to_vec(),
                });
            }
        }
        let data = kernels::sum_to_shape(self.data(), self.shape(), &aligned);
        Ok(Tensor::from_op(
            data,
            target.to_vec(),
            vec![self.clone()],
            Box::new(SumTo),
        ))
    }

    /// Sum over the given axes, keeping them as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let mut target = self.shape().to_vec();
        for &a in axes {
            target[a] = 1;
        }
        self.sum_to(&target)
    }

    /// Mean over the given axes, keeping them as size 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        Ok(self
            .sum_axes(axes)?
            .scale(T::one() / T::from_f64(count as f64)))
    }

    pub fn broadcast_to_shape(&self, target: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        let check = broadcast_shape("broadcast_to", self.shape(), target)?;
        if check != target {
            return Err(Error::Dimension {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let strides = bcast_strides(self.shape(), target);
        let data = kernels::broadcast_to(self.data(), &strides, target);
        Ok(Tensor::from_op(
            data,
            target.to_vec(),
            vec![self.clone()],
            Box::new(BroadcastTo),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(Reshape),
        ))
    }

    pub fn permute(&self, map: &PermuteMap) -> Result<Tensor<T>> {
        if self.shape() != map.in_shape.as_slice() {
            return Err(Error::Dimension {
                op: "permute",
                lhs: self.shape().to_vec(),
                rhs: map.in_shape.clone(),
            });
        }
        let data = kernels::apply_index_map(self.data(), &map.fwd);
        Ok(Tensor::from_op(
            data,
            map.out_shape.clone(),
            vec![self.clone()],
            Box::new(Permute { map: map.clone() }),
        ))
    }

    /// Convenience axis transpose (builds a fresh permutation map).
    pub fn transpose_axes(&self, perm: &[usize]) -> Result<Tensor<T>> {
        self.permute(&PermuteMap::transpose_axes(self.shape(), perm))
    }

    /// Circular shift of the last axis by `shift` positions to the right.
    pub fn roll_last(&self, shift: i64) -> Result<Tensor<T>> {
        self.permute(&PermuteMap::roll_last_axis(self.shape(), shift))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of bounds for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let span = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * span + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(Narrow { axis, start }),
        ))
    }

    /// Zero-pad `axis` so it has extent `total`, with this tensor's content
    /// starting at offset `before`.
    pub fn pad_axis(&self, axis: usize, before: usize, total: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        let len = shape[axis];
        if before + len > total {
            return Err(Error::Contract(format!(
                "pad_axis(axis={axis}, before={before}, total={total}) too small for extent {len}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * total + before) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(PadAxis { axis, before }),
        ))
    }

    /// Gather rows of a 2-D table: out[i, :] = self[indices[i], :].
    pub fn gather_rows(&self, indices: Arc<Vec<usize>>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows requires a 2-D table, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: rows,
            });
        }
        let data = kernels::gather_rows(self.data(), cols, &indices);
        Ok(Tensor::from_op(
            data,
            vec![indices.len(), cols],
            vec![self.clone()],
            Box::new(GatherRows { indices }),
        ))
    }

    /// Scatter-add rows of a 2-D tensor into a fresh [rows, cols] table.
    pub fn scatter_add_rows(&self, indices: Arc<Vec<usize>>, rows: usize) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || self.shape()[0] != indices.len() {
            return Err(Error::Contract(format!(
                "scatter_add_rows requires [len(indices), cols], got {:?}",
                self.shape()
            )));
        }
        let cols = self.shape()[1];
        let data = kernels::scatter_add_rows(self.data(), cols, &indices, rows);
        Ok(Tensor::from_op(
            data,
            vec![rows, cols],
            vec![self.clone()],
            Box::new(ScatterAddRows { indices }),
        ))
    }

    /// Per-channel spatial convolution preserving size. Input [B,C,H,W],
    /// kernels [C,k,k] with odd k.
    pub fn depthwise_conv2d(&self, kernels_t: &Tensor<T>, pad: PaddingMode) -> Result<Tensor<T>> {
        self.depthwise_conv2d_bias(kernels_t, None, pad)
    }

    /// depthwise_conv2d with an optional fused per-channel bias.
    pub fn depthwise_conv2d_bias(
        &self,
        kernels_t: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        pad: PaddingMode,
    ) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::Dimension {
                op: "depthwise_conv2d (input must be [B,C,H,W])",
                lhs: shape.to_vec(),
                rhs: kernels_t.shape().to_vec(),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ks = kernels_t.shape();
        if ks.len() != 3 || ks[0] != c || ks[1] != ks[2] {
            return Err(Error::Dimension {
                op: "depthwise_conv2d (kernels must be [C,k,k])",
                lhs: shape.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let k = ks[1];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size must be odd, got {k}"
            )));
        }
        let dims = DwDims {
            planes: b * c,
            channels: c,
            h,
            w,
            k,
            pad,
        };
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(Error::Dimension {
                    op: "depthwise_conv2d (bias must be [C])",
                    lhs: shape.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let data = kernels::dwconv_forward(
            self.data(),
            kernels_t.data(),
            bias.map(|b| b.data()),
            dims.planes,
            dims.channels,
            h,
            w,
            k,
            pad,
        );
        let mut parents = vec![self.clone(), kernels_t.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            parents,
            Box::new(DwConv { dims }),
        ))
    }

    /// Apply a sparse linear map (or its adjoint).
    pub fn sparse_apply(&self, map: Arc<SparseMap<T>>, adjoint: bool) -> Result<Tensor<T>> {
        let (csr, out_shape, in_shape) = if adjoint {
            (&map.adj, map.in_shape.clone(), map.out_shape.clone())
        } else {
            (&map.fwd, map.out_shape.clone(), map.in_shape.clone())
        };
        if self.shape() != in_shape.as_slice() {
            return Err(Error::Dimension {
                op: "sparse_linear",
                lhs: self.shape().to_vec(),
                rhs: in_shape,
            });
        }
        let data = kernels::apply_csr(self.data(), &csr.offsets, &csr.cols, &csr.weights, csr.out_len);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(SparseApply { map, adjoint }),
        ))
    }
}

/// Concatenate tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if tensors.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let first = tensors[0].shape().to_vec();
    let rank = first.len();
    if axis >= rank {
        return Err(Error::Contract(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut total = 0usize;
    for t in tensors {
        let s = t.shape();
        if s.len() != rank
            || s[..axis] != first[..axis]
            || s[axis + 1..] != first[axis + 1..]
        {
            return Err(Error::Dimension {
                op: "concat",
                lhs: first.clone(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in tensors {
            let span = t.shape()[axis];
            let base = o * span * inner;
            data.extend_from_slice(&t.data()[base..base + span * inner]);
        }
    }
    let mut out_shape = first;
    out_shape[axis] = total;
    Ok(Tensor::from_op(
        data,
        out_shape,
        tensors.iter().map(|t| (*t).clone()).collect(),
        Box::new(Concat { axis }),
    ))
}


// ---------------------------------------------------------------------------
// fused batch-norm core
// ---------------------------------------------------------------------------

struct BatchNormCore<T: Scalar> {
    xhat: Arc<Vec<T>>,
    rstd: Arc<Vec<T>>,
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl<T: Scalar> VjpOp<T> for BatchNormCore<T> {
    fn name(&self) -> &'static str {
        "batch_norm_core"
    }
    fn vjp(
        &self,
        g: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let data = kernels::bn_normalize_vjp(
            g.data(),
            &self.xhat,
            &self.rstd,
            self.batch,
            self.channels,
            self.spatial,
        );
        Ok(vec![Some(Tensor::from_op(
            data,
            parents[0].shape().to_vec(),
            vec![g.clone()],
            Box::new(SecondOrderCut {
                what: "batch normalization",
            }),
        ))])
    }
}

struct SecondOrderCut {
    what: &'static str,
}

impl<T: Scalar> VjpOp<T> for SecondOrderCut {
    fn name(&self) -> &'static str {
        "second_order_cut"
    }
    fn vjp(
        &self,
        _g: &Tensor<T>,
        _parents: &[Tensor<T>],
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Err(Error::Contract(format!(
            "second-order gradients through {} are not supported",
            self.what
        )))
    }
}

/// Normalize a [B, C, H, W] tensor per channel over (batch, spatial) in one
/// fused op. Returns the normalized tensor plus detached per-channel mean
/// and variance vectors (for running-statistics updates).
pub fn batch_norm_core<T: Scalar>(
    x: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!(
            "batch_norm_core expects [B,C,H,W], got {s:?}"
        )));
    }
    let (b, c, spatial) = (s[0], s[1], s[2] * s[3]);
    let (mean, var) = kernels::bn_stats(x.data(), b, c, spatial);
    let rstd: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let xhat = kernels::bn_normalize(x.data(), &mean, &rstd, b, c, spatial);
    let xhat = Arc::new(xhat);
    let rstd_arc = Arc::new(rstd);
    let out = Tensor::from_op_shared(
        Arc::clone(&xhat),
        s.to_vec(),
        vec![x.clone()],
        Box::new(BatchNormCore {
            xhat,
            rstd: rstd_arc,
            batch: b,
            channels: c,
            spatial,
        }),
    );
    let mean_t = Tensor::from_vec(mean, &[c])?;
    let var_t = Tensor::from_vec(var, &[c])?;
    Ok((out, mean_t, var_t))
}
