use super::FeatureMap;
use crate::error::{Error, Result};

/// 2-D convolution with square kernels, zero padding and a uniform stride.
///
/// `weight` is laid out `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of a [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * kernel * kernel * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(height), o(width))
    }

    #[inline]
    fn w_offset(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if x.height() + 2 * self.padding < self.kernel || x.width() + 2 * self.padding < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} smaller than kernel {}",
                x.height(),
                x.width(),
                self.kernel
            )));
        }
        Ok(())
    }

    /// Input row/column reached by output index `o` and kernel tap `k`, if inside the map.
    #[inline]
    fn tap(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.height(), x.width());
        let mut out = FeatureMap::zeros(oh, ow, self.out_channels);
        for oi in 0..oh {
            for oj in 0..ow {
                let acc = out.pixel_mut(oi, oj);
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(ii) = self.tap(oi, ky, x.height()) else { continue };
                    for kx in 0..self.kernel {
                        let Some(jj) = self.tap(oj, kx, x.width()) else { continue };
                        let px = x.pixel(ii, jj);
                        for (o, a) in acc.iter_mut().enumerate() {
                            let off = self.w_offset(o, ky, kx);
                            let w = &self.weight[off..off + self.in_channels];
                            *a += w.iter().zip(px).map(|(w, v)| w * v).sum::<f64>();
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients w.r.t. the input and the parameters, given the forward input.
    pub fn backward(&self, x: &FeatureMap, grad_out: &FeatureMap) -> Result<(FeatureMap, ConvGrad)> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.height(), x.width());
        if grad_out.shape() != (oh, ow, self.out_channels) {
            return Err(Error::ShapeMismatch(format!(
                "conv grad {:?}, expected {:?}",
                grad_out.shape(),
                (oh, ow, self.out_channels)
            )));
        }
        let mut gx = FeatureMap::zeros(x.height(), x.width(), x.channels());
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_channels];
        for oi in 0..oh {
            for oj in 0..ow {
                let g = grad_out.pixel(oi, oj);
                for (b, gv) in gb.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..self.kernel {
                    let Some(ii) = self.tap(oi, ky, x.height()) else { continue };
                    for kx in 0..self.kernel {
                        let Some(jj) = self.tap(oj, kx, x.width()) else { continue };
                        let px = x.pixel(ii, jj);
                        let gpx = gx.pixel_mut(ii, jj);
                        for (o, &go) in g.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let off = self.w_offset(o, ky, kx);
                            let w = &self.weight[off..off + self.in_channels];
                            let gwo = &mut gw[off..off + self.in_channels];
                            for c in 0..self.in_channels {
                                gwo[c] += go * px[c];
                                gpx[c] += go * w[c];
                            }
                        }
                    }
                }
            }
        }
        Ok((gx, ConvGrad { weight: gw, bias: gb }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let mut conv = Conv2d::zeros(2, 2, 3, 1, 1);
        // center tap, out o reads in o
        for o in 0..2 {
            let off = conv.w_offset(o, 1, 1);
            conv.weight[off + o] = 1.0;
        }
        let x = FeatureMap::from_fn(4, 5, 2, |i, j, c| (i * 10 + j) as f64 + 0.5 * c as f64);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn strided_output_size() {
        let conv = Conv2d::zeros(3, 4, 3, 2, 1);
        assert_eq!(conv.output_size(48, 48), (24, 24));
        assert_eq!(conv.output_size(5, 7), (3, 4));
        let one = Conv2d::zeros(3, 4, 1, 1, 0);
        assert_eq!(one.output_size(12, 9), (12, 9));
    }

    #[test]
    fn box_filter_sums_neighbourhood() {
        let mut conv = Conv2d::zeros(1, 1, 3, 1, 1);
        conv.weight.iter_mut().for_each(|w| *w = 1.0);
        conv.bias[0] = 0.5;
        let x = FeatureMap::filled(3, 3, 1, 1.0);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.get(1, 1, 0), 9.5);
        assert_eq!(y.get(0, 0, 0), 4.5);
        assert_eq!(y.get(0, 1, 0), 6.5);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let conv = Conv2d::zeros(3, 4, 3, 1, 1);
        assert!(conv.forward(&FeatureMap::zeros(4, 4, 2)).is_err());
    }
}
