//! Differentiable operations. Every vjp is written in terms of other ops, so
//! gradients built with `create_graph = true` remain differentiable. The two
//! exceptions are data-dependent masks (relu/clamp), whose second derivative
//! is zero almost everywhere, and the bilinear sampler, which is only ever
//! differentiated to first order (it refuses graph-building vjps).

use super::{Op, Var};
use ndarray::{ArrayD, Ix2, Ix4};

fn map_unary(x: &Var, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    x.array().mapv(f)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

macro_rules! same_shape {
    ($a:expr, $b:expr, $name:expr) => {
        assert_eq!($a.shape(), $b.shape(), "{}: shape mismatch", $name)
    };
}

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        vec![
            wants[0].then(|| g.clone()),
            wants[1].then(|| g.clone()),
        ]
    }
}

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape!(a, b, "add");
    let data = a.array() + b.array();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(AddOp))
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        vec![wants[0].then(|| g.clone()), wants[1].then(|| neg(g))]
    }
}

pub fn sub(a: &Var, b: &Var) -> Var {
    same_shape!(a, b, "sub");
    let data = a.array() - b.array();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(SubOp))
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        vec![
            wants[0].then(|| mul(g, &p[1])),
            wants[1].then(|| mul(g, &p[0])),
        ]
    }
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape!(a, b, "mul");
    let data = a.array() * b.array();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(MulOp))
}

struct NegOp;
impl Op for NegOp {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(neg(g))]
    }
}

pub fn neg(a: &Var) -> Var {
    Var::from_op(map_unary(a, |v| -v), vec![a.clone()], Box::new(NegOp))
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scale(g, self.0))]
    }
}

pub fn scale(a: &Var, c: f64) -> Var {
    Var::from_op(map_unary(a, |v| v * c), vec![a.clone()], Box::new(ScaleOp(c)))
}

struct AddScalarOp;
impl Op for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(map_unary(a, |v| v + c), vec![a.clone()], Box::new(AddScalarOp))
}

struct ExpOp;
impl Op for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn vjp(&self, _p: &[Var], o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(mul(g, o))]
    }
}

pub fn exp(a: &Var) -> Var {
    Var::from_op(map_unary(a, f64::exp), vec![a.clone()], Box::new(ExpOp))
}

struct LnOp;
impl Op for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(mul(g, &powf(&p[0], -1.0)))]
    }
}

pub fn ln(a: &Var) -> Var {
    Var::from_op(map_unary(a, f64::ln), vec![a.clone()], Box::new(LnOp))
}

struct PowfOp(f64);
impl Op for PowfOp {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scale(&mul(g, &powf(&p[0], self.0 - 1.0)), self.0))]
    }
}

/// Elementwise power; fractional exponents require positive inputs.
pub fn powf(a: &Var, p: f64) -> Var {
    Var::from_op(
        map_unary(a, |v| v.powf(p)),
        vec![a.clone()],
        Box::new(PowfOp(p)),
    )
}

struct TanhOp;
impl Op for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn vjp(&self, _p: &[Var], o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        // g * (1 - y^2)
        vec![Some(mul(g, &add_scalar(&neg(&mul(o, o)), 1.0)))]
    }
}

pub fn tanh(a: &Var) -> Var {
    Var::from_op(map_unary(a, f64::tanh), vec![a.clone()], Box::new(TanhOp))
}

struct SigmoidOp;
impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn vjp(&self, _p: &[Var], o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        // g * y * (1 - y)
        vec![Some(mul(g, &mul(o, &add_scalar(&neg(o), 1.0))))]
    }
}

pub fn sigmoid(a: &Var) -> Var {
    Var::from_op(
        map_unary(a, |v| 1.0 / (1.0 + (-v).exp())),
        vec![a.clone()],
        Box::new(SigmoidOp),
    )
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let mask = Var::constant(p[0].array().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        vec![Some(mul(g, &mask))]
    }
}

pub fn relu(a: &Var) -> Var {
    Var::from_op(
        map_unary(a, |v| v.max(0.0)),
        vec![a.clone()],
        Box::new(ReluOp),
    )
}

struct ClampOp(f64, f64);
impl Op for ClampOp {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let (lo, hi) = (self.0, self.1);
        let mask = Var::constant(
            p[0].array()
                .mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 }),
        );
        vec![Some(mul(g, &mask))]
    }
}

/// Hard clamp; the gradient passes through inclusively at the boundaries.
pub fn clamp(a: &Var, lo: f64, hi: f64) -> Var {
    Var::from_op(
        map_unary(a, |v| v.clamp(lo, hi)),
        vec![a.clone()],
        Box::new(ClampOp(lo, hi)),
    )
}

// ---------------------------------------------------------------------------
// reductions and broadcasts
// ---------------------------------------------------------------------------

struct SumAllOp;
impl Op for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_scalar(g, p[0].shape()))]
    }
}

pub fn sum_all(a: &Var) -> Var {
    let s = a.array().sum();
    Var::from_op(
        ArrayD::from_elem(Vec::<usize>::new(), s),
        vec![a.clone()],
        Box::new(SumAllOp),
    )
}

struct BroadcastScalarOp;
impl Op for BroadcastScalarOp {
    fn name(&self) -> &'static str {
        "broadcast_scalar"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_all(g))]
    }
}

pub fn broadcast_scalar(a: &Var, shape: &[usize]) -> Var {
    assert_eq!(a.array().len(), 1, "broadcast_scalar: input must be scalar");
    let v = *a.array().iter().next().unwrap();
    Var::from_op(
        ArrayD::from_elem(shape.to_vec(), v),
        vec![a.clone()],
        Box::new(BroadcastScalarOp),
    )
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.array().len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

struct SumRowsOp;
impl Op for SumRowsOp {
    fn name(&self) -> &'static str {
        "sum_rows"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_cols(g, p[0].shape()[1]))]
    }
}

/// (m, n) -> (m, 1), summing each row.
pub fn sum_rows(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let m = x.nrows();
    let mut out = ndarray::Array2::<f64>::zeros((m, 1));
    for (i, row) in x.rows().into_iter().enumerate() {
        out[[i, 0]] = row.sum();
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(SumRowsOp))
}

struct BroadcastColsOp;
impl Op for BroadcastColsOp {
    fn name(&self) -> &'static str {
        "broadcast_cols"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_rows(g))]
    }
}

/// (m, 1) -> (m, n), repeating the column.
pub fn broadcast_cols(a: &Var, n: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.ncols(), 1, "broadcast_cols: expected (m, 1)");
    let m = x.nrows();
    let mut out = ndarray::Array2::<f64>::zeros((m, n));
    for i in 0..m {
        let v = x[[i, 0]];
        out.row_mut(i).fill(v);
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(BroadcastColsOp))
}

struct SumColsOp;
impl Op for SumColsOp {
    fn name(&self) -> &'static str {
        "sum_cols"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_rows(g, p[0].shape()[0]))]
    }
}

/// (m, n) -> (1, n), summing each column.
pub fn sum_cols(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let sums = x.sum_axis(ndarray::Axis(0));
    let out = sums.insert_axis(ndarray::Axis(0));
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(SumColsOp))
}

struct BroadcastRowsOp;
impl Op for BroadcastRowsOp {
    fn name(&self) -> &'static str {
        "broadcast_rows"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_cols(g))]
    }
}

/// (1, n) -> (m, n), repeating the row.
pub fn broadcast_rows(a: &Var, m: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.nrows(), 1, "broadcast_rows: expected (1, n)");
    let n = x.ncols();
    let mut out = ndarray::Array2::<f64>::zeros((m, n));
    for i in 0..m {
        out.row_mut(i).assign(&x.row(0));
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(BroadcastRowsOp))
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

struct MatmulOp;
impl Op for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        vec![
            wants[0].then(|| matmul(g, &transpose2(&p[1]))),
            wants[1].then(|| matmul(&transpose2(&p[0]), g)),
        ]
    }
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let y = b.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.ncols(), y.nrows(), "matmul: inner dims differ");
    let out = x.dot(&y);
    Var::from_op(out.into_dyn(), vec![a.clone(), b.clone()], Box::new(MatmulOp))
}

struct Transpose2Op;
impl Op for Transpose2Op {
    fn name(&self) -> &'static str {
        "transpose2"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(transpose2(g))]
    }
}

pub fn transpose2(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let out = x.t().as_standard_layout().to_owned();
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(Transpose2Op))
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

struct ReshapeOp;
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(reshape(g, p[0].shape()))]
    }
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let out = a
        .array()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(shape.to_vec())
        .expect("reshape: size mismatch");
    Var::from_op(out, vec![a.clone()], Box::new(ReshapeOp))
}

struct PermuteOp(Vec<usize>);
impl Op for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let mut inv = vec![0usize; self.0.len()];
        for (i, &ax) in self.0.iter().enumerate() {
            inv[ax] = i;
        }
        vec![Some(permute(g, &inv))]
    }
}

pub fn permute(a: &Var, axes: &[usize]) -> Var {
    let out = a
        .array()
        .view()
        .permuted_axes(axes.to_vec())
        .as_standard_layout()
        .to_owned();
    Var::from_op(out, vec![a.clone()], Box::new(PermuteOp(axes.to_vec())))
}

struct ConcatColsOp;
impl Op for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        let na = p[0].shape()[1];
        let nb = p[1].shape()[1];
        vec![
            wants[0].then(|| slice_cols(g, 0, na)),
            wants[1].then(|| slice_cols(g, na, na + nb)),
        ]
    }
}

pub fn concat_cols(a: &Var, b: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let y = b.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.nrows(), y.nrows(), "concat_cols: row count differs");
    let out = ndarray::concatenate(ndarray::Axis(1), &[x.view(), y.view()]).unwrap();
    Var::from_op(
        out.as_standard_layout().to_owned().into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(ConcatColsOp),
    )
}

struct SliceColsOp(usize, usize);
impl Op for SliceColsOp {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(pad_cols(g, p[0].shape()[1], self.0))]
    }
}

pub fn slice_cols(a: &Var, start: usize, end: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let out = x
        .slice(ndarray::s![.., start..end])
        .as_standard_layout()
        .to_owned();
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(SliceColsOp(start, end)),
    )
}

struct PadColsOp(usize, usize);
impl Op for PadColsOp {
    fn name(&self) -> &'static str {
        "pad_cols"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let w = p[0].shape()[1];
        vec![Some(slice_cols(g, self.1, self.1 + w))]
    }
}

/// Embed (m, w) into (m, total) zeros at column `offset`.
pub fn pad_cols(a: &Var, total: usize, offset: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let (m, w) = (x.nrows(), x.ncols());
    assert!(offset + w <= total);
    let mut out = ndarray::Array2::<f64>::zeros((m, total));
    out.slice_mut(ndarray::s![.., offset..offset + w]).assign(&x);
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(PadColsOp(total, offset)),
    )
}

struct GatherColsOp(std::sync::Arc<Vec<usize>>);
impl Op for GatherColsOp {
    fn name(&self) -> &'static str {
        "gather_cols"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scatter_cols(g, &self.0, p[0].shape()[1]))]
    }
}

/// Per-row column pick: out[i, 0] = a[i, idx[i]].
pub fn gather_cols(a: &Var, idx: &[usize]) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.nrows(), idx.len(), "gather_cols: index length mismatch");
    let mut out = ndarray::Array2::<f64>::zeros((idx.len(), 1));
    for (i, &j) in idx.iter().enumerate() {
        out[[i, 0]] = x[[i, j]];
    }
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(GatherColsOp(std::sync::Arc::new(idx.to_vec()))),
    )
}

struct ScatterColsOp(std::sync::Arc<Vec<usize>>);
impl Op for ScatterColsOp {
    fn name(&self) -> &'static str {
        "scatter_cols"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(gather_cols(g, &self.0))]
    }
}

/// Inverse of `gather_cols`: out[i, idx[i]] = a[i, 0], zeros elsewhere.
pub fn scatter_cols(a: &Var, idx: &[usize], ncols: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(x.ncols(), 1);
    assert_eq!(x.nrows(), idx.len());
    let mut out = ndarray::Array2::<f64>::zeros((idx.len(), ncols));
    for (i, &j) in idx.iter().enumerate() {
        out[[i, j]] = x[[i, 0]];
    }
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(ScatterColsOp(std::sync::Arc::new(idx.to_vec()))),
    )
}

// ---------------------------------------------------------------------------
// convolution support (im2col / col2im form a closed adjoint pair)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

struct Im2ColOp(ConvGeom);
impl Op for Im2ColOp {
    fn name(&self) -> &'static str {
        "im2col"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let s = p[0].shape();
        vec![Some(col2im(g, [s[0], s[1], s[2], s[3]], self.0))]
    }
}

/// (B, C, H, W) -> (B*OH*OW, C*KH*KW) patch matrix.
pub fn im2col(a: &Var, geom: ConvGeom) -> Var {
    let x = a.array().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let (oh, ow) = geom.out_hw(h, w);
    let mut out = ndarray::Array2::<f64>::zeros((b * oh * ow, c * geom.kh * geom.kw));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    for ky in 0..geom.kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        for kx in 0..geom.kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                out[[row, col]] = x[[bi, ci, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(Im2ColOp(geom)))
}

struct Col2ImOp([usize; 4], ConvGeom);
impl Op for Col2ImOp {
    fn name(&self) -> &'static str {
        "col2im"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(im2col(g, self.1))]
    }
}

/// Adjoint of `im2col`: scatter-add patch rows back into an image.
pub fn col2im(a: &Var, img_shape: [usize; 4], geom: ConvGeom) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let [b, c, h, w] = img_shape;
    let (oh, ow) = geom.out_hw(h, w);
    assert_eq!(x.nrows(), b * oh * ow);
    assert_eq!(x.ncols(), c * geom.kh * geom.kw);
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    for ky in 0..geom.kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        for kx in 0..geom.kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                out[[bi, ci, iy as usize, ix as usize]] += x[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(Col2ImOp(img_shape, geom)),
    )
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

struct AvgPool2Op;
impl Op for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avgpool2"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(upsample2_div4(g))]
    }
}

/// 2x2 average pooling, stride 2. H and W must be even.
pub fn avgpool2(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2: odd spatial size");
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[bi, ci, y, xx]] = 0.25
                        * (x[[bi, ci, 2 * y, 2 * xx]]
                            + x[[bi, ci, 2 * y, 2 * xx + 1]]
                            + x[[bi, ci, 2 * y + 1, 2 * xx]]
                            + x[[bi, ci, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(AvgPool2Op))
}

struct Upsample2Div4Op;
impl Op for Upsample2Div4Op {
    fn name(&self) -> &'static str {
        "upsample2_div4"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        vec![Some(avgpool2(g))]
    }
}

/// Adjoint of `avgpool2`: nearest-neighbour upsample scaled by 1/4.
pub fn upsample2_div4(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = 0.25 * x[[bi, ci, y, xx]];
                    out[[bi, ci, 2 * y, 2 * xx]] = v;
                    out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(Upsample2Div4Op))
}

struct SpatialMeanOp;
impl Op for SpatialMeanOp {
    fn name(&self) -> &'static str {
        "spatial_mean"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let s = p[0].shape();
        let (h, w) = (s[2], s[3]);
        vec![Some(scale(
            &spatial_broadcast(g, h, w),
            1.0 / (h * w) as f64,
        ))]
    }
}

/// Global average pool: (B, C, H, W) -> (B, C).
pub fn spatial_mean(a: &Var) -> Var {
    let x = a.array().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let mut out = ndarray::Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[bi, ci, y, xx]];
                }
            }
            out[[bi, ci]] = s / (h * w) as f64;
        }
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(SpatialMeanOp))
}

struct SpatialBroadcastOp(usize, usize);
impl Op for SpatialBroadcastOp {
    fn name(&self) -> &'static str {
        "spatial_broadcast"
    }
    fn vjp(&self, _p: &[Var], _o: &Var, g: &Var, _w: &[bool]) -> Vec<Option<Var>> {
        let hw = (self.0 * self.1) as f64;
        vec![Some(scale(&spatial_mean(g), hw))]
    }
}

/// (B, C) -> (B, C, H, W), repeating each value over the spatial plane.
pub fn spatial_broadcast(a: &Var, h: usize, w: usize) -> Var {
    let x = a.array().view().into_dimensionality::<Ix2>().unwrap();
    let (b, c) = x.dim();
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            out.slice_mut(ndarray::s![bi, ci, .., ..]).fill(x[[bi, ci]]);
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![a.clone()],
        Box::new(SpatialBroadcastOp(h, w)),
    )
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

struct BilinearSampleOp {
    oh: usize,
    ow: usize,
}

impl Op for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn vjp(&self, p: &[Var], _o: &Var, g: &Var, wants: &[bool]) -> Vec<Option<Var>> {
        assert!(
            !p.iter().any(|v| v.requires_grad()),
            "bilinear_sample: graph-building (second-order) vjp is not supported; \
             take gradients through the sampler with create_graph = false"
        );
        let img = p[0].array().view().into_dimensionality::<Ix4>().unwrap();
        let gx = p[1].array().view().into_dimensionality::<Ix2>().unwrap();
        let gy = p[2].array().view().into_dimensionality::<Ix2>().unwrap();
        let go = g.array().view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = img.dim();
        let mut gimg = ndarray::Array4::<f64>::zeros((b, c, h, w));
        let mut ggx = ndarray::Array2::<f64>::zeros(gx.dim());
        let mut ggy = ndarray::Array2::<f64>::zeros(gy.dim());
        let sx = 0.5 * (w as f64 - 1.0);
        let sy = 0.5 * (h as f64 - 1.0);
        for bi in 0..b {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let gi = oy * self.ow + ox;
                    let px = (gx[[bi, gi]] + 1.0) * sx;
                    let py = (gy[[bi, gi]] + 1.0) * sy;
                    let x0 = px.floor();
                    let y0 = py.floor();
                    let wx = px - x0;
                    let wy = py - y0;
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let corners = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx), -(1.0 - wy), -(1.0 - wx)),
                        (y0, x0 + 1, (1.0 - wy) * wx, 1.0 - wy, -wx),
                        (y0 + 1, x0, wy * (1.0 - wx), -wy, 1.0 - wx),
                        (y0 + 1, x0 + 1, wy * wx, wy, wx),
                    ];
                    for ci in 0..c {
                        let go_v = go[[bi, ci, oy, ox]];
                        if go_v == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wgt, dwx, dwy) in &corners {
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                let v = img[[bi, ci, iy as usize, ix as usize]];
                                if wants[0] {
                                    gimg[[bi, ci, iy as usize, ix as usize]] += go_v * wgt;
                                }
                                ggx[[bi, gi]] += go_v * v * dwx * sx;
                                ggy[[bi, gi]] += go_v * v * dwy * sy;
                            }
                        }
                    }
                }
            }
        }
        vec![
            wants[0].then(|| Var::constant(gimg.into_dyn())),
            wants[1].then(|| Var::constant(ggx.into_dyn())),
            wants[2].then(|| Var::constant(ggy.into_dyn())),
        ]
    }
}

/// Sample `img` at normalized grid coordinates. `gx`, `gy` have shape
/// (B, OH*OW) with values in [-1, 1] spanning the image; coordinates outside
/// the image read as zero (border padding).
pub fn bilinear_sample(img: &Var, gx: &Var, gy: &Var, oh: usize, ow: usize) -> Var {
    let x = img.array().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x.dim();
    let gxa = gx.array().view().into_dimensionality::<Ix2>().unwrap();
    let gya = gy.array().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(gxa.dim(), (b, oh * ow), "bilinear_sample: grid shape");
    assert_eq!(gya.dim(), (b, oh * ow), "bilinear_sample: grid shape");
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    let mut out = ndarray::Array4::<f64>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let gi = oy * ow + ox;
                let px = (gxa[[bi, gi]] + 1.0) * sx;
                let py = (gya[[bi, gi]] + 1.0) * sy;
                let x0f = px.floor();
                let y0f = py.floor();
                let wx = px - x0f;
                let wy = py - y0f;
                let (x0, y0) = (x0f as isize, y0f as isize);
                let corners = [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x0 + 1, (1.0 - wy) * wx),
                    (y0 + 1, x0, wy * (1.0 - wx)),
                    (y0 + 1, x0 + 1, wy * wx),
                ];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for &(iy, ix, wgt) in &corners {
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            acc += wgt * x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = acc;
                }
            }
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![img.clone(), gx.clone(), gy.clone()],
        Box::new(BilinearSampleOp { oh, ow }),
    )
}
