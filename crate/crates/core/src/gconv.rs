//! Lifting group convolution over 3D grids.
//!
//! Arrays are channel-last: volumes are `(B, N0, N1, N2, C)` and filter banks
//! `(K, K, K, C_in, C_out)`. Spatial axis `a` is group coordinate `a`
//! (axis 0 = x, 1 = y, 2 = z) when a group element acts on indices.
//!
//! A lifting layer correlates the input with one transformed copy of the
//! filter bank per stabilizer element and stacks the responses on the channel
//! axis: block `p` of `C_out` channels belongs to element `p`. Filters
//! transform contravariantly, `out[i] = in[g^-1 (i - c) + c]` about the
//! kernel center `c`, which makes the layer equivariant:
//!
//! ```text
//! lift(g . x) = g . permute_blocks(lift(x)),   block p -> index(g * g_p)
//! ```

use ndarray::{s, Array1, Array2, Array5, ArrayView1, ArrayView5, Axis, LinalgScalar};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::group::{GroupElement, StabilizerSet};

/// Scalar types the convolution kernels run on.
pub trait Real: LinalgScalar + Float + Send + Sync + std::fmt::Debug + 'static {}
impl<T: LinalgScalar + Float + Send + Sync + std::fmt::Debug + 'static> Real for T {}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    /// `(K, K, K, C_in, C_out)`
    pub weights: Array5<T>,
    /// `(C_out)`
    pub bias: Array1<T>,
}

impl<T: Real> FilterBank<T> {
    pub fn new(weights: Array5<T>, bias: Array1<T>) -> Result<Self> {
        let sh = weights.shape();
        if sh[0] != sh[1] || sh[1] != sh[2] || sh[0] == 0 {
            return Err(Error::Shape(format!("kernel must be a non-empty cube, got {sh:?}")));
        }
        if bias.len() != sh[4] {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                sh[4]
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[4]
    }
}

/// For every flat index of an `n^3` cube, the flat source index under the
/// contravariant action of `g` about the cube center: `src = g^-1 (i - c) + c`.
///
/// Offsets are handled in doubled coordinates so the center `(n - 1) / 2` is
/// an integer for even `n` as well.
pub fn cube_index_map(n: usize, g: &GroupElement) -> Result<Vec<usize>> {
    if !g.is_linear() {
        return Err(Error::InvalidArgument(
            "transform element must have zero translation".into(),
        ));
    }
    if !g.is_signed_permutation() {
        return Err(Error::InvalidArgument("element is not a signed permutation".into()));
    }
    let inv = g.inverse();
    let span = n as i64 - 1;
    let mut map = Vec::with_capacity(n * n * n);
    for i0 in 0..n {
        for i1 in 0..n {
            for i2 in 0..n {
                let u = [2 * i0 as i64 - span, 2 * i1 as i64 - span, 2 * i2 as i64 - span];
                let v = inv.rotate(u);
                let src = v.map(|x| ((x + span) / 2) as usize);
                map.push((src[0] * n + src[1]) * n + src[2]);
            }
        }
    }
    Ok(map)
}

/// Permutes the spatial cube of a `(n, n, n, rest..)` buffer laid out
/// row-major; `rest` is the product of trailing dims.
fn permute_cube<T: Copy>(src: &[T], map: &[usize], rest: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for &s in map {
        out.extend_from_slice(&src[s * rest..(s + 1) * rest]);
    }
    out
}

/// Rotates/mirrors the filter taps by `g`; channels and bias are untouched.
pub fn transform_filter<T: Real>(bank: &FilterBank<T>, g: &GroupElement) -> Result<FilterBank<T>> {
    let k = bank.kernel_size();
    let map = cube_index_map(k, g)?;
    let w = bank.weights.as_standard_layout();
    let rest = bank.c_in() * bank.c_out();
    let data = permute_cube(w.as_slice().expect("standard layout"), &map, rest);
    let weights = Array5::from_shape_vec(bank.weights.raw_dim(), data).expect("same size");
    FilterBank::new(weights, bank.bias.clone())
}

/// Stacks `transform_filter(bank, g_p)` for every stabilizer element into one
/// bank with `P * C_out` output channels; the bias is repeated per block.
pub fn expand_filters<T: Real>(bank: &FilterBank<T>, stab: &StabilizerSet) -> Result<FilterBank<T>> {
    let [k, _, _, c_in, c_out] = shape5(&bank.weights);
    let p = stab.len();
    let mut weights = Array5::zeros((k, k, k, c_in, p * c_out));
    let mut bias = Array1::zeros(p * c_out);
    for (pi, g) in stab.elements().iter().enumerate() {
        let t = transform_filter(bank, g)?;
        weights
            .slice_mut(s![.., .., .., .., pi * c_out..(pi + 1) * c_out])
            .assign(&t.weights);
        bias.slice_mut(s![pi * c_out..(pi + 1) * c_out]).assign(&bank.bias);
    }
    FilterBank::new(weights, bias)
}

/// Gradient of [`expand_filters`]: folds the expanded-bank gradient back onto
/// the base bank, accumulating in stabilizer order, then spatial order.
pub fn fold_filter_grad<T: Real>(
    expanded: &FilterBank<T>,
    stab: &StabilizerSet,
    c_out: usize,
) -> Result<FilterBank<T>> {
    let [k, _, _, c_in, pc] = shape5(&expanded.weights);
    if pc != stab.len() * c_out {
        return Err(Error::Shape(format!(
            "expanded bank has {pc} channels, expected {} x {c_out}",
            stab.len()
        )));
    }
    let mut weights = Array5::<T>::zeros((k, k, k, c_in, c_out));
    let mut bias = Array1::<T>::zeros(c_out);
    let k3 = k * k * k;
    for (pi, g) in stab.elements().iter().enumerate() {
        let map = cube_index_map(k, g)?;
        let block = expanded.weights.slice(s![.., .., .., .., pi * c_out..(pi + 1) * c_out]);
        let block = block.as_standard_layout();
        let src = block.as_slice().expect("standard layout");
        let dst = weights.as_slice_mut().expect("owned");
        let rest = c_in * c_out;
        for (idx, &from) in map.iter().enumerate().take(k3) {
            for r in 0..rest {
                dst[from * rest + r] = dst[from * rest + r] + src[idx * rest + r];
            }
        }
        for co in 0..c_out {
            bias[co] = bias[co] + expanded.bias[pi * c_out + co];
        }
    }
    FilterBank::new(weights, bias)
}

fn shape5<T>(a: &Array5<T>) -> [usize; 5] {
    let s = a.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}

fn valid_dims(input: &[usize], kernel: &[usize]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if input[a + 1] < kernel[a] {
            return Err(Error::Shape(format!(
                "spatial dims {:?} smaller than kernel {:?}",
                &input[1..4],
                &kernel[..3]
            )));
        }
        out[a] = input[a + 1] - kernel[a] + 1;
    }
    Ok(out)
}

/// Patch matrix of one batch item: row = output position, column = (tap, channel).
fn im2col<T: Real>(x: &ArrayView5<T>, b: usize, k: [usize; 3], out: [usize; 3]) -> Array2<T> {
    let c = x.shape()[4];
    let cols = k[0] * k[1] * k[2] * c;
    let mut m = Array2::zeros((out[0] * out[1] * out[2], cols));
    let xb = x.index_axis(Axis(0), b);
    let mut row = 0;
    for o0 in 0..out[0] {
        for o1 in 0..out[1] {
            for o2 in 0..out[2] {
                let mut r = m.row_mut(row);
                let dst = r.as_slice_mut().expect("contiguous row");
                let mut col = 0;
                for k0 in 0..k[0] {
                    for k1 in 0..k[1] {
                        for k2 in 0..k[2] {
                            let px = xb.slice(s![o0 + k0, o1 + k1, o2 + k2, ..]);
                            for (d, &v) in dst[col..col + c].iter_mut().zip(px.iter()) {
                                *d = v;
                            }
                            col += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    m
}

fn col2im_add<T: Real>(dcols: &Array2<T>, dx: &mut Array5<T>, b: usize, k: [usize; 3], out: [usize; 3]) {
    let c = dx.shape()[4];
    let mut xb = dx.index_axis_mut(Axis(0), b);
    let mut row = 0;
    for o0 in 0..out[0] {
        for o1 in 0..out[1] {
            for o2 in 0..out[2] {
                let src = dcols.row(row);
                let mut col = 0;
                for k0 in 0..k[0] {
                    for k1 in 0..k[1] {
                        for k2 in 0..k[2] {
                            let mut px = xb.slice_mut(s![o0 + k0, o1 + k1, o2 + k2, ..]);
                            for (d, &v) in px.iter_mut().zip(src.slice(s![col..col + c]).iter()) {
                                *d = *d + v;
                            }
                            col += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn weight_matrix<T: Real>(w: &ArrayView5<T>) -> Array2<T> {
    let [k0, k1, k2, ci, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
    w.as_standard_layout()
        .into_owned()
        .into_shape_with_order((k0 * k1 * k2 * ci, co))
        .expect("contiguous")
}

/// Valid (unpadded, stride 1) 3D cross-correlation plus per-channel bias.
pub fn conv3d_valid<T: Real>(
    input: ArrayView5<T>,
    weights: ArrayView5<T>,
    bias: ArrayView1<T>,
) -> Result<Array5<T>> {
    let ish = input.shape();
    let wsh = weights.shape();
    if ish[4] != wsh[3] {
        return Err(Error::Shape(format!(
            "input has {} channels, filter expects {}",
            ish[4], wsh[3]
        )));
    }
    if bias.len() != wsh[4] {
        return Err(Error::Shape("bias length differs from output channels".into()));
    }
    let out = valid_dims(ish, wsh)?;
    let k = [wsh[0], wsh[1], wsh[2]];
    let (batch, c_out) = (ish[0], wsh[4]);
    let wm = weight_matrix(&weights);
    let mut y = Array5::zeros((batch, out[0], out[1], out[2], c_out));
    for b in 0..batch {
        let cols = im2col(&input, b, k, out);
        let mut yb = cols.dot(&wm);
        for mut row in yb.rows_mut() {
            row.zip_mut_with(&bias, |o, &b| *o = *o + b);
        }
        y.index_axis_mut(Axis(0), b)
            .assign(&yb.into_shape_with_order((out[0], out[1], out[2], c_out)).expect("sizes"));
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Array5<T>,
    pub weights: Array5<T>,
    pub bias: Array1<T>,
}

/// Reverse-mode gradients of [`conv3d_valid`].
pub fn conv3d_valid_backward<T: Real>(
    input: ArrayView5<T>,
    weights: ArrayView5<T>,
    upstream: ArrayView5<T>,
) -> Result<ConvGrads<T>> {
    let ish = input.shape();
    let wsh = weights.shape();
    let out = valid_dims(ish, wsh)?;
    let (batch, c_out) = (ish[0], wsh[4]);
    if upstream.shape() != [batch, out[0], out[1], out[2], c_out] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            [batch, out[0], out[1], out[2], c_out]
        )));
    }
    let k = [wsh[0], wsh[1], wsh[2]];
    let rows = out[0] * out[1] * out[2];
    let wm = weight_matrix(&weights);
    let mut dw = Array2::<T>::zeros(wm.raw_dim());
    let mut db = Array1::<T>::zeros(c_out);
    let mut dx = Array5::<T>::zeros(input.raw_dim());
    for b in 0..batch {
        let dy = upstream
            .index_axis(Axis(0), b)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, c_out))
            .expect("sizes");
        let cols = im2col(&input, b, k, out);
        dw = dw + cols.t().dot(&dy);
        db = db + dy.sum_axis(Axis(0));
        let dcols = dy.dot(&wm.t());
        col2im_add(&dcols, &mut dx, b, k, out);
    }
    Ok(ConvGrads {
        input: dx,
        weights: dw
            .into_shape_with_order(weights.raw_dim())
            .expect("sizes"),
        bias: db,
    })
}

/// Output of a lifting layer: `(B, D', H', W', P * C_out)`.
#[derive(Clone, Debug)]
pub struct LiftedFeatureMap<T> {
    pub values: Array5<T>,
    pub stabilizer: StabilizerSet,
    pub c_out: usize,
}

pub fn lift_gconv3d<T: Real>(
    input: ArrayView5<T>,
    bank: &FilterBank<T>,
    stab: &StabilizerSet,
) -> Result<LiftedFeatureMap<T>> {
    let expanded = expand_filters(bank, stab)?;
    let values = conv3d_valid(input, expanded.weights.view(), expanded.bias.view())?;
    Ok(LiftedFeatureMap {
        values,
        stabilizer: stab.clone(),
        c_out: bank.c_out(),
    })
}

#[derive(Clone, Debug)]
pub struct LiftGrads<T> {
    pub input: Array5<T>,
    pub bank: FilterBank<T>,
}

pub fn backward_lift_gconv3d<T: Real>(
    input: ArrayView5<T>,
    bank: &FilterBank<T>,
    stab: &StabilizerSet,
    upstream: ArrayView5<T>,
) -> Result<LiftGrads<T>> {
    let expanded = expand_filters(bank, stab)?;
    let g = conv3d_valid_backward(input, expanded.weights.view(), upstream)?;
    let dexp = FilterBank::new(g.weights, g.bias)?;
    Ok(LiftGrads {
        input: g.input,
        bank: fold_filter_grad(&dexp, stab, bank.c_out())?,
    })
}

/// Applies `g` to the spatial cube of a `(B, n, n, n, C)` volume about its
/// center: `out[i] = x[g^-1 (i - c) + c]`.
pub fn transform_volume<T: Real>(x: ArrayView5<T>, g: &GroupElement) -> Result<Array5<T>> {
    let sh = x.shape();
    if sh[1] != sh[2] || sh[2] != sh[3] {
        return Err(Error::Shape(format!("volume must be spatially cubic, got {sh:?}")));
    }
    let n = sh[1];
    let c = sh[4];
    let map = cube_index_map(n, g)?;
    let mut out = Array5::zeros(x.raw_dim());
    for b in 0..sh[0] {
        let xb = x.index_axis(Axis(0), b);
        let xb = xb.as_standard_layout();
        let data = permute_cube(xb.as_slice().expect("standard layout"), &map, c);
        out.index_axis_mut(Axis(0), b)
            .assign(&ndarray::ArrayView4::from_shape((n, n, n, c), &data).expect("sizes"));
    }
    Ok(out)
}

/// Action of `g` on a lifted map: spatial transform plus moving block `p` to
/// block `index(g * g_p)`.
pub fn transform_lifted<T: Real>(map: &LiftedFeatureMap<T>, g: &GroupElement) -> Result<Array5<T>> {
    let spatial = transform_volume(map.values.view(), g)?;
    let stab = &map.stabilizer;
    let c = map.c_out;
    let mut out = Array5::zeros(spatial.raw_dim());
    for (p, gp) in stab.elements().iter().enumerate() {
        let q = stab.index_of(&g.compose(gp)).ok_or_else(|| {
            Error::InvalidArgument("stabilizer is not closed under the acting element".into())
        })?;
        out.slice_mut(s![.., .., .., .., q * c..(q + 1) * c])
            .assign(&spatial.slice(s![.., .., .., .., p * c..(p + 1) * c]));
    }
    Ok(out)
}
