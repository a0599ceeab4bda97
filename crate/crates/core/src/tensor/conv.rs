//! Channels-last 3D convolution with "same" padding, lowered to GEMM.
//!
//! Input `[N, X, Y, Z, Cin]`, kernel `[K, K, K, Cin, Cout]`, output
//! `[N, ceil(X/S), ceil(Y/S), ceil(Z/S), Cout]`. Each batch element is
//! gathered into a `[X'Y'Z', K^3 Cin]` patch matrix and multiplied by the
//! kernel viewed as `[K^3 Cin, Cout]`.

use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

/// Layer hyper-parameters in the `K, C, S, D` notation of the architecture tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels_out: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, channels_out: usize, stride: usize) -> Self {
        Self {
            kernel,
            channels_out,
            stride,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.channels_out == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::contract(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output extent along one axis under same padding.
    pub fn out_extent(&self, extent: usize) -> usize {
        extent.div_ceil(self.stride)
    }

    /// Zero padding added before the first voxel along an axis (the
    /// remainder of an odd total goes after the last voxel).
    pub fn pad_before(&self, extent: usize) -> usize {
        let out = self.out_extent(extent);
        let span = (out - 1) * self.stride + (self.kernel - 1) * self.dilation + 1;
        span.saturating_sub(extent) / 2
    }
}

/// Fully resolved shapes of one convolution call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub output: [usize; 3],
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let &[batch, x, y, z, cin] = input_shape else {
            return Err(Error::contract(format!(
                "conv3d input must be [N,X,Y,Z,C], got {input_shape:?}"
            )));
        };
        let k = spec.kernel;
        if weight_shape != [k, k, k, cin, spec.channels_out] {
            return Err(Error::contract(format!(
                "conv3d weights {weight_shape:?} do not match spec {spec:?} with {cin} input channels"
            )));
        }
        let input = [x, y, z];
        Ok(Self {
            batch,
            input,
            cin,
            output: input.map(|e| spec.out_extent(e)),
            cout: spec.channels_out,
            kernel: k,
            stride: spec.stride,
            dilation: spec.dilation,
            pad: input.map(|e| spec.pad_before(e)),
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.cout,
        ]
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.kernel.pow(3) * self.cin
    }

    /// 1x1x1 stride-1 convolutions read the input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Input coordinate touched by output `o` and kernel tap `t` along `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    fn gather<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let [ox, oy, oz] = self.output;
        let [_, iy, iz] = self.input;
        let (k, cin) = (self.kernel, self.cin);
        let plen = self.patch_len();
        for a in 0..ox {
            for b in 0..oy {
                for c in 0..oz {
                    let row = &mut cols[((a * oy + b) * oz + c) * plen..][..plen];
                    for kx in 0..k {
                        let sx = self.source(0, a, kx);
                        for ky in 0..k {
                            let sy = self.source(1, b, ky);
                            for kz in 0..k {
                                let dst = &mut row[((kx * k + ky) * k + kz) * cin..][..cin];
                                match (sx, sy, self.source(2, c, kz)) {
                                    (Some(x), Some(y), Some(z)) => {
                                        dst.copy_from_slice(&input[((x * iy + y) * iz + z) * cin..][..cin])
                                    }
                                    _ => dst.fill(T::zero()),
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn scatter<T: Real>(&self, cols: &[T], grad_input: &mut [T]) {
        let [ox, oy, oz] = self.output;
        let [_, iy, iz] = self.input;
        let (k, cin) = (self.kernel, self.cin);
        let plen = self.patch_len();
        for a in 0..ox {
            for b in 0..oy {
                for c in 0..oz {
                    let row = &cols[((a * oy + b) * oz + c) * plen..][..plen];
                    for kx in 0..k {
                        let Some(x) = self.source(0, a, kx) else { continue };
                        for ky in 0..k {
                            let Some(y) = self.source(1, b, ky) else { continue };
                            for kz in 0..k {
                                let Some(z) = self.source(2, c, kz) else { continue };
                                let src = &row[((kx * k + ky) * k + kz) * cin..][..cin];
                                let dst = &mut grad_input[((x * iy + y) * iz + z) * cin..][..cin];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(geom: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (m, kdim, cout) = (geom.out_voxels(), geom.patch_len(), geom.cout);
    let in_len = geom.in_voxels() * geom.cin;
    let mut out = vec![T::zero(); geom.batch * m * cout];
    out.par_chunks_mut(m * cout)
        .zip(input.par_chunks(in_len))
        .for_each(|(out_n, in_n)| {
            for row in out_n.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
            let mut cols = Vec::new();
            let lhs: &[T] = if geom.is_pointwise() {
                in_n
            } else {
                cols.resize(m * kdim, T::zero());
                geom.gather(in_n, &mut cols);
                &cols
            };
            T::gemm(
                m, kdim, cout, T::one(), lhs, kdim as isize, 1, weight, cout as isize, 1,
                T::one(), out_n, cout as isize, 1,
            );
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-sample input and weight gradients (each only when requested).
type InputWeightGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of a convolution. Per-sample kernel gradients are reduced in
/// batch order so the result does not depend on the thread count.
pub(crate) fn backward<T: Real>(
    geom: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let (m, kdim, cout) = (geom.out_voxels(), geom.patch_len(), geom.cout);
    let in_len = geom.in_voxels() * geom.cin;

    let partials: Vec<InputWeightGrads<T>> = (0..geom.batch)
        .into_par_iter()
        .map(|n| {
            let in_n = &input[n * in_len..][..in_len];
            let go = &grad_out[n * m * cout..][..m * cout];
            let gw = need_weight.then(|| {
                let mut cols = Vec::new();
                let lhs: &[T] = if geom.is_pointwise() {
                    in_n
                } else {
                    cols.resize(m * kdim, T::zero());
                    geom.gather(in_n, &mut cols);
                    &cols
                };
                // dW_n = cols^T * dOut_n
                let mut gw = vec![T::zero(); kdim * cout];
                T::gemm(
                    kdim, m, cout, T::one(), lhs, 1, kdim as isize, go, cout as isize, 1,
                    T::zero(), &mut gw, cout as isize, 1,
                );
                gw
            });
            let gi = need_input.then(|| {
                // dCols = dOut_n * W^T, then scatter back onto the input grid.
                let mut gcols = vec![T::zero(); m * kdim];
                T::gemm(
                    m, cout, kdim, T::one(), go, cout as isize, 1, weight, 1, cout as isize,
                    T::zero(), &mut gcols, kdim as isize, 1,
                );
                if geom.is_pointwise() {
                    gcols
                } else {
                    let mut gi = vec![T::zero(); in_len];
                    geom.scatter(&gcols, &mut gi);
                    gi
                }
            });
            (gw, gi)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); kdim * cout];
    let mut input_grad = need_input.then(|| Vec::with_capacity(input.len()));
    for (gw, gi) in partials {
        if let Some(gw) = gw {
            for (acc, v) in weight_grad.iter_mut().zip(&gw) {
                *acc += *v;
            }
        }
        if let (Some(all), Some(gi)) = (input_grad.as_mut(), gi) {
            all.extend_from_slice(&gi);
        }
    }
    let mut bias_grad = vec![T::zero(); cout];
    for row in grad_out.chunks(cout) {
        for (acc, v) in bias_grad.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shape_law() {
        for k in [1, 3, 5] {
            for s in 1..=3 {
                for d in [1, 2, 4] {
                    let spec = ConvSpec::new(k, 1, s).dilated(d);
                    for extent in 1..=17 {
                        assert_eq!(spec.out_extent(extent), extent.div_ceil(s));
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_stride_two_selects_even_voxels() {
        let spec = ConvSpec::new(1, 1, 2);
        assert_eq!(spec.pad_before(16), 0);
        assert_eq!(spec.out_extent(16), 8);
    }

    #[test]
    fn rejects_even_kernels_and_bad_weights() {
        assert!(ConvSpec::new(2, 4, 1).validate().is_err());
        let spec = ConvSpec::new(3, 4, 1);
        assert!(ConvGeometry::new(&[1, 4, 4, 4, 2], &[3, 3, 3, 2, 5], &spec).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 4], &[3, 3, 3, 2, 4], &spec).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 4, 2], &[3, 3, 3, 2, 4], &spec).is_ok());
    }
}
