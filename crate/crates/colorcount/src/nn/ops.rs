//! Raw tensor operations (forward and backward) used by the tape. All
//! tensors are NCHW f32; reductions use fixed iteration order so results are
//! bit-reproducible.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};

/// Convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0, dilation: 1, groups: 1 }
    }
}

impl ConvSpec {
    pub fn out_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let eff = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < eff {
            return Err(Error::invalid(format!(
                "input size {input} too small for kernel {kernel} (dilation {}, pad {})",
                self.dilation, self.pad
            )));
        }
        Ok((padded - eff) / self.stride + 1)
    }
}

fn check_conv_shapes(
    input: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    let (_, cin, h, w) = input.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(Error::invalid("stride, dilation and groups must be >= 1"));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::invalid(format!(
            "channels ({cin} in, {cout} out) not divisible by groups {}",
            spec.groups
        )));
    }
    if wcin != cin / spec.groups {
        return Err(Error::ShapeMismatch(format!(
            "weight expects {wcin} channels per group, input supplies {}",
            cin / spec.groups
        )));
    }
    let ho = spec.out_size(h, kh)?;
    let wo = spec.out_size(w, kw)?;
    Ok((ho, wo))
}

/// Gather one group's input patches into a ((C/g)·kh·kw) × (Ho·Wo) matrix.
fn im2col(
    item: &ArrayView3<f32>,
    group: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (_, h, w) = item.dim();
    let mut col = Array2::zeros((cg * kh * kw, ho * wo));
    for c in 0..cg {
        let plane = item.index_axis(ndarray::Axis(0), group * cg + c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = plane[[iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back to the input layout (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcol: &Array2<f32>,
    dinput_item: &mut ndarray::ArrayViewMut3<f32>,
    group: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
) {
    let (_, h, w) = dinput_item.dim();
    for c in 0..cg {
        let mut plane = dinput_item.index_axis_mut(ndarray::Axis(0), group * cg + c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[[iy as usize, ix as usize]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution.
pub fn conv2d_forward(
    input: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    spec: &ConvSpec,
) -> Result<Array4<f32>> {
    let (b, cin, _, _) = input.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (ho, wo) = check_conv_shapes(input, weight, spec)?;
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} vs {cout} output channels",
                bias.len()
            )));
        }
    }
    let g = spec.groups;
    let (cg, cog) = (cin / g, cout / g);
    let wflat = weight.to_shape((cout, cg * kh * kw)).expect("contiguous weight");
    let mut out = Array4::zeros((b, cout, ho, wo));
    for bi in 0..b {
        let item = input.index_axis(ndarray::Axis(0), bi);
        for gi in 0..g {
            let col = im2col(&item, gi, cg, kh, kw, spec, ho, wo);
            let wmat = wflat.slice(ndarray::s![gi * cog..(gi + 1) * cog, ..]);
            let omat = wmat.dot(&col);
            for co in 0..cog {
                let bias_v = bias.map_or(0.0, |bv| bv[gi * cog + co]);
                let mut plane = out.slice_mut(ndarray::s![bi, gi * cog + co, .., ..]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        plane[[oy, ox]] = omat[[co, oy * wo + ox]] + bias_v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    input: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    spec: &ConvSpec,
    grad_out: &ArrayView4<f32>,
) -> Result<(Array4<f32>, Array4<f32>, Array1<f32>)> {
    let (b, cin, h, w) = input.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (ho, wo) = check_conv_shapes(input, weight, spec)?;
    if grad_out.dim() != (b, cout, ho, wo) {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} vs expected {:?}",
            grad_out.dim(),
            (b, cout, ho, wo)
        )));
    }
    let g = spec.groups;
    let (cg, cog) = (cin / g, cout / g);
    let wflat = weight.to_shape((cout, cg * kh * kw)).expect("contiguous weight");
    let mut dinput = Array4::zeros((b, cin, h, w));
    let mut dweight_flat = Array2::<f32>::zeros((cout, cg * kh * kw));
    let mut dbias = Array1::zeros(cout);
    for bi in 0..b {
        let item = input.index_axis(ndarray::Axis(0), bi);
        let mut ditem = dinput.index_axis_mut(ndarray::Axis(0), bi);
        for gi in 0..g {
            let col = im2col(&item, gi, cg, kh, kw, spec, ho, wo);
            let mut dout_mat = Array2::zeros((cog, ho * wo));
            for co in 0..cog {
                let plane = grad_out.slice(ndarray::s![bi, gi * cog + co, .., ..]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = plane[[oy, ox]];
                        dout_mat[[co, oy * wo + ox]] = v;
                        dbias[gi * cog + co] += v;
                    }
                }
            }
            let dw = dout_mat.dot(&col.t());
            dweight_flat
                .slice_mut(ndarray::s![gi * cog..(gi + 1) * cog, ..])
                .zip_mut_with(&dw, |a, b| *a += b);
            let wmat = wflat.slice(ndarray::s![gi * cog..(gi + 1) * cog, ..]);
            let dcol = wmat.t().dot(&dout_mat);
            col2im_add(&dcol, &mut ditem, gi, cg, kh, kw, spec, ho, wo);
        }
    }
    let dweight = dweight_flat
        .into_shape_with_order((cout, cg, kh, kw))
        .expect("weight gradient shape");
    Ok((dinput, dweight, dbias))
}

/// Non-overlapping k×k average pooling (stride = k); spatial dims must be
/// divisible by k.
pub fn avg_pool_forward(input: &ArrayView4<f32>, k: usize) -> Result<Array4<f32>> {
    let (b, c, h, w) = input.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(format!("spatial size {h}x{w} not divisible by pool {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f32;
    let mut out = Array4::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += input[[bi, ci, oy * k + dy, ox * k + dx]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = s * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(grad_out: &ArrayView4<f32>, k: usize) -> Array4<f32> {
    let (b, c, ho, wo) = grad_out.dim();
    let norm = 1.0 / (k * k) as f32;
    let mut dinput = Array4::zeros((b, c, ho * k, wo * k));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad_out[[bi, ci, oy, ox]] * norm;
                    for dy in 0..k {
                        for dx in 0..k {
                            dinput[[bi, ci, oy * k + dy, ox * k + dx]] = g;
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Source coordinate and interpolation weights for one output index under
/// half-pixel-aligned bilinear scaling.
fn bilinear_axis(out_idx: usize, factor: usize, in_size: usize) -> (usize, usize, f32) {
    let src = (out_idx as f32 + 0.5) / factor as f32 - 0.5;
    let clamped = src.max(0.0);
    let lo = (clamped.floor() as usize).min(in_size - 1);
    let hi = (lo + 1).min(in_size - 1);
    let frac = if src <= 0.0 { 0.0 } else { (src - lo as f32).min(1.0) };
    (lo, hi, frac)
}

/// Integer-factor bilinear upsampling with half-pixel alignment.
pub fn upsample_forward(input: &ArrayView4<f32>, factor: usize) -> Result<Array4<f32>> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (b, c, h, w) = input.dim();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Array4::zeros((b, c, ho, wo));
    for oy in 0..ho {
        let (y0, y1, fy) = bilinear_axis(oy, factor, h);
        for ox in 0..wo {
            let (x0, x1, fx) = bilinear_axis(ox, factor, w);
            for bi in 0..b {
                for ci in 0..c {
                    let v00 = input[[bi, ci, y0, x0]];
                    let v01 = input[[bi, ci, y0, x1]];
                    let v10 = input[[bi, ci, y1, x0]];
                    let v11 = input[[bi, ci, y1, x1]];
                    out[[bi, ci, oy, ox]] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward(
    grad_out: &ArrayView4<f32>,
    factor: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<f32> {
    let (b, c, ho, wo) = grad_out.dim();
    let mut dinput = Array4::zeros((b, c, in_h, in_w));
    for oy in 0..ho {
        let (y0, y1, fy) = bilinear_axis(oy, factor, in_h);
        for ox in 0..wo {
            let (x0, x1, fx) = bilinear_axis(ox, factor, in_w);
            for bi in 0..b {
                for ci in 0..c {
                    let g = grad_out[[bi, ci, oy, ox]];
                    dinput[[bi, ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                    dinput[[bi, ci, y0, x1]] += g * (1.0 - fy) * fx;
                    dinput[[bi, ci, y1, x0]] += g * fy * (1.0 - fx);
                    dinput[[bi, ci, y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    dinput
}

/// The interleaving permutation: input channels grouped as L partitions of M
/// are rearranged so output partition m (of M partitions of L channels)
/// takes exactly one channel from each input partition:
/// `out[m·L + p] = in[p·M + m]`.
pub fn shuffle_index(c: usize, l: usize, m: usize) -> usize {
    let p = c / m;
    let mi = c % m;
    mi * l + p
}

/// Inverse of [`shuffle_index`].
pub fn unshuffle_index(c: usize, l: usize, m: usize) -> usize {
    let mi = c / l;
    let p = c % l;
    p * m + mi
}

pub fn channel_shuffle_forward(
    input: &ArrayView4<f32>,
    l: usize,
    m: usize,
) -> Result<Array4<f32>> {
    let (b, c, h, w) = input.dim();
    if l * m != c {
        return Err(Error::invalid(format!("channel count {c} is not L·M = {l}·{m}")));
    }
    let mut out = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        out.slice_mut(ndarray::s![.., shuffle_index(ci, l, m), .., ..])
            .assign(&input.slice(ndarray::s![.., ci, .., ..]));
    }
    Ok(out)
}

pub fn channel_shuffle_backward(grad_out: &ArrayView4<f32>, l: usize, m: usize) -> Array4<f32> {
    let (b, c, h, w) = grad_out.dim();
    let mut dinput = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        dinput
            .slice_mut(ndarray::s![.., ci, .., ..])
            .assign(&grad_out.slice(ndarray::s![.., shuffle_index(ci, l, m), .., ..]));
    }
    dinput
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Naive direct convolution for cross-checking im2col.
    fn conv_naive(
        input: &Array4<f32>,
        weight: &Array4<f32>,
        bias: Option<&Array1<f32>>,
        spec: &ConvSpec,
    ) -> Array4<f32> {
        let (b, cin, h, w) = input.dim();
        let (cout, _, kh, kw) = weight.dim();
        let ho = spec.out_size(h, kh).unwrap();
        let wo = spec.out_size(w, kw).unwrap();
        let (cg, cog) = (cin / spec.groups, cout / spec.groups);
        let mut out = Array4::zeros((b, cout, ho, wo));
        for bi in 0..b {
            for co in 0..cout {
                let gi = co / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = bias.map_or(0.0, |bv| bv[co]);
                        for cl in 0..cg {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        s += input[[bi, gi * cg + cl, iy as usize, ix as usize]]
                                            * weight[[co, cl, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        for (spec, cin, cout, k) in [
            (ConvSpec::default(), 3, 4, 3),
            (ConvSpec { stride: 2, pad: 1, dilation: 1, groups: 1 }, 2, 5, 3),
            (ConvSpec { stride: 1, pad: 2, dilation: 2, groups: 1 }, 2, 3, 3),
            (ConvSpec { stride: 1, pad: 1, dilation: 1, groups: 2 }, 4, 6, 3),
            (ConvSpec { stride: 1, pad: 0, dilation: 1, groups: 4 }, 8, 8, 1),
        ] {
            let input = rand4((2, cin, 8, 7), 1);
            let weight = rand4((cout, cin / spec.groups, k, k), 2);
            let bias = Array1::from_shape_fn(cout, |i| i as f32 * 0.1 - 0.2);
            let fast =
                conv2d_forward(&input.view(), &weight.view(), Some(&bias), &spec).unwrap();
            let naive = conv_naive(&input, &weight, Some(&bias), &spec);
            for (a, b) in fast.iter().zip(naive.iter()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} ({spec:?})");
            }
        }
    }

    /// f32 central finite differences on a scalar functional (weighted sum
    /// of outputs, which exercises all gradient paths).
    fn fd_check<F>(f: F, x: &mut Array4<f32>, analytic: &Array4<f32>, step: f32, tol: f32)
    where
        F: Fn(&Array4<f32>) -> f32,
    {
        for idx in ndarray::indices(x.dim()) {
            let orig = x[idx];
            x[idx] = orig + step;
            let hi = f(x);
            x[idx] = orig - step;
            let lo = f(x);
            x[idx] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < tol, "at {idx:?}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec { stride: 2, pad: 1, dilation: 1, groups: 2 };
        let mut input = rand4((1, 4, 6, 6), 3);
        let mut weight = rand4((4, 2, 3, 3), 4);
        let seed = rand4((1, 4, 3, 3), 5); // dL/dout with L = Σ seed⊙out
        let loss = |inp: &Array4<f32>, wgt: &Array4<f32>| {
            let out = conv2d_forward(&inp.view(), &wgt.view(), None, &spec).unwrap();
            out.iter().zip(seed.iter()).map(|(o, s)| o * s).sum::<f32>()
        };
        let (dinput, dweight, _) =
            conv2d_backward(&input.view(), &weight.view(), &spec, &seed.view()).unwrap();
        let w_snapshot = weight.clone();
        fd_check(|inp| loss(inp, &w_snapshot), &mut input, &dinput, 0.02, 0.02);
        let i_snapshot = input.clone();
        fd_check(|wgt| loss(&i_snapshot, wgt), &mut weight, &dweight, 0.02, 0.02);
    }

    #[test]
    fn conv_bias_gradient_is_output_sum() {
        let spec = ConvSpec { stride: 1, pad: 1, dilation: 1, groups: 1 };
        let input = rand4((2, 2, 5, 5), 6);
        let weight = rand4((3, 2, 3, 3), 7);
        let grad_out = rand4((2, 3, 5, 5), 8);
        let (_, _, dbias) =
            conv2d_backward(&input.view(), &weight.view(), &spec, &grad_out.view()).unwrap();
        for c in 0..3 {
            let expect: f32 = grad_out.index_axis(Axis(1), c).iter().sum();
            assert!((dbias[c] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_forward_and_backward() {
        let input = rand4((1, 2, 4, 4), 9);
        let out = avg_pool_forward(&input.view(), 2).unwrap();
        assert_eq!(out.dim(), (1, 2, 2, 2));
        let mean: f32 = (input[[0, 0, 0, 0]]
            + input[[0, 0, 0, 1]]
            + input[[0, 0, 1, 0]]
            + input[[0, 0, 1, 1]])
            / 4.0;
        assert!((out[[0, 0, 0, 0]] - mean).abs() < 1e-6);

        let mut x = input.clone();
        let seed = rand4((1, 2, 2, 2), 10);
        let dinput = avg_pool_backward(&seed.view(), 2);
        fd_check(
            |inp| {
                avg_pool_forward(&inp.view(), 2)
                    .unwrap()
                    .iter()
                    .zip(seed.iter())
                    .map(|(o, s)| o * s)
                    .sum()
            },
            &mut x,
            &dinput,
            0.02,
            0.02,
        );
        assert!(avg_pool_forward(&rand4((1, 1, 5, 4), 0).view(), 2).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let input = Array4::from_elem((1, 1, 3, 3), 2.5);
        let out = upsample_forward(&input.view(), 4).unwrap();
        assert_eq!(out.dim(), (1, 1, 12, 12));
        for v in out.iter() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_matches_finite_differences() {
        let mut input = rand4((1, 2, 3, 4), 11);
        let seed = rand4((1, 2, 6, 8), 12);
        let dinput = upsample_backward(&seed.view(), 2, 3, 4);
        fd_check(
            |inp| {
                upsample_forward(&inp.view(), 2)
                    .unwrap()
                    .iter()
                    .zip(seed.iter())
                    .map(|(o, s)| o * s)
                    .sum()
            },
            &mut input,
            &dinput,
            0.02,
            0.02,
        );
    }

    #[test]
    fn shuffle_is_a_bijection_and_inverts() {
        for (l, m) in [(8, 8), (4, 2), (1, 1), (3, 5)] {
            let c = l * m;
            let mut seen = vec![false; c];
            for ci in 0..c {
                let s = shuffle_index(ci, l, m);
                assert!(!seen[s]);
                seen[s] = true;
                assert_eq!(unshuffle_index(s, l, m), ci);
            }
        }
    }

    #[test]
    fn shuffle_draws_one_channel_per_partition() {
        let (l, m) = (4, 3);
        // secondary partition j (of size l) should contain exactly one
        // channel from each primary partition
        for j in 0..m {
            let sources: Vec<usize> =
                (0..l * m).filter(|&ci| shuffle_index(ci, l, m) / l == j).map(|ci| ci / m).collect();
            let mut sorted = sources.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..l).collect::<Vec<_>>());
        }
    }

    #[test]
    fn shuffle_roundtrip_on_tensor() {
        let input = rand4((2, 12, 3, 3), 13);
        let out = channel_shuffle_forward(&input.view(), 4, 3).unwrap();
        let back = channel_shuffle_backward(&out.view(), 4, 3);
        assert_eq!(input, back);
    }
}
