//! Local correlation between two feature maps.
//!
//! For every sampled position `(i, j)` of the first map and every offset
//! `(p, q)` with `|p|, |q| <= d`, the output holds the inner product of the
//! first map's feature vector at `(i, j)` with the second map's vector at
//! `(i + p, j + q)`. Offsets that land outside the second map read a zero
//! vector. Channels are ordered with `p` major and `q` minor.

use super::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorrelationParams {
    pub max_displacement: usize,
    /// Subsampling of the output positions; offsets stay in input cells.
    pub stride: usize,
    /// Divide inner products by the channel count.
    pub normalize: bool,
}

impl CorrelationParams {
    pub fn new(max_displacement: usize, stride: usize) -> Self {
        CorrelationParams {
            max_displacement,
            stride,
            normalize: true,
        }
    }

    pub fn offsets(&self) -> usize {
        let side = 2 * self.max_displacement + 1;
        side * side
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub params: CorrelationParams,
    pub map: FeatureMap,
}

impl CorrelationMap {
    pub fn channel(&self, p: isize, q: isize) -> usize {
        offset_channel(self.params.max_displacement, p, q)
    }

    pub fn value(&self, i: usize, j: usize, p: isize, q: isize) -> f64 {
        self.map.get(i, j, self.channel(p, q))
    }

    /// Offset `(p, q)` with the largest response at output position `(i, j)`;
    /// the first maximum in channel order wins ties.
    pub fn argmax_offset(&self, i: usize, j: usize) -> (isize, isize) {
        let d = self.params.max_displacement as isize;
        let side = 2 * d + 1;
        let px = self.map.pixel(i, j);
        let mut best = 0;
        for (c, v) in px.iter().enumerate() {
            if *v > px[best] {
                best = c;
            }
        }
        let best = best as isize;
        (best / side - d, best % side - d)
    }
}

fn offset_channel(d: usize, p: isize, q: isize) -> usize {
    let d = d as isize;
    debug_assert!(p.abs() <= d && q.abs() <= d);
    ((p + d) * (2 * d + 1) + (q + d)) as usize
}

fn check(a: &FeatureMap, b: &FeatureMap, params: &CorrelationParams) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "correlating {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if params.stride == 0 {
        return Err(Error::InvalidArgument("correlation stride must be >= 1".into()));
    }
    Ok(())
}

fn scale(a: &FeatureMap, params: &CorrelationParams) -> f64 {
    if params.normalize && a.channels() > 0 {
        1.0 / a.channels() as f64
    } else {
        1.0
    }
}

/// Visits every (output position, offset) pair whose second-map position is in bounds.
fn for_each_valid(
    a: &FeatureMap,
    params: &CorrelationParams,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    let (oh, ow) = params.output_size(a.height(), a.width());
    let d = params.max_displacement as isize;
    let (h, w) = (a.height() as isize, a.width() as isize);
    for oi in 0..oh {
        let i = oi * params.stride;
        for oj in 0..ow {
            let j = oj * params.stride;
            for p in -d..=d {
                let bi = i as isize + p;
                if bi < 0 || bi >= h {
                    continue;
                }
                for q in -d..=d {
                    let bj = j as isize + q;
                    if bj < 0 || bj >= w {
                        continue;
                    }
                    let c = offset_channel(params.max_displacement, p, q);
                    f(oi, oj, i, j, bi as usize, bj as usize, c);
                }
            }
        }
    }
}

pub fn correlate(a: &FeatureMap, b: &FeatureMap, params: &CorrelationParams) -> Result<CorrelationMap> {
    check(a, b, params)?;
    let (oh, ow) = params.output_size(a.height(), a.width());
    let s = scale(a, params);
    let mut out = FeatureMap::zeros(oh, ow, params.offsets());
    for_each_valid(a, params, |oi, oj, i, j, bi, bj, c| {
        let dot: f64 = a.pixel(i, j).iter().zip(b.pixel(bi, bj)).map(|(x, y)| x * y).sum();
        out.set(oi, oj, c, s * dot);
    });
    Ok(CorrelationMap {
        params: *params,
        map: out,
    })
}

/// Gradients of the correlation w.r.t. both inputs.
pub fn correlate_backward(
    grad_out: &FeatureMap,
    a: &FeatureMap,
    b: &FeatureMap,
    params: &CorrelationParams,
) -> Result<(FeatureMap, FeatureMap)> {
    check(a, b, params)?;
    let (oh, ow) = params.output_size(a.height(), a.width());
    if grad_out.shape() != (oh, ow, params.offsets()) {
        return Err(Error::ShapeMismatch(format!(
            "correlation grad {:?}, expected {:?}",
            grad_out.shape(),
            (oh, ow, params.offsets())
        )));
    }
    let s = scale(a, params);
    let mut ga = FeatureMap::zeros(a.height(), a.width(), a.channels());
    let mut gb = FeatureMap::zeros(b.height(), b.width(), b.channels());
    for_each_valid(a, params, |oi, oj, i, j, bi, bj, c| {
        let g = s * grad_out.get(oi, oj, c);
        if g == 0.0 {
            return;
        }
        let bv = b.pixel(bi, bj);
        for (x, y) in ga.pixel_mut(i, j).iter_mut().zip(bv) {
            *x += g * y;
        }
        let av = a.pixel(i, j);
        for (x, y) in gb.pixel_mut(bi, bj).iter_mut().zip(av) {
            *x += g * y;
        }
    });
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(d: usize, stride: usize) -> CorrelationParams {
        CorrelationParams {
            max_displacement: d,
            stride,
            normalize: false,
        }
    }

    /// Direct evaluation of the correlation sum, zero outside the map.
    fn brute(a: &FeatureMap, b: &FeatureMap, i: usize, j: usize, p: isize, q: isize) -> f64 {
        let (bi, bj) = (i as isize + p, j as isize + q);
        if bi < 0 || bj < 0 || bi >= b.height() as isize || bj >= b.width() as isize {
            return 0.0;
        }
        (0..a.channels())
            .map(|c| a.get(i, j, c) * b.get(bi as usize, bj as usize, c))
            .sum()
    }

    #[test]
    fn self_inner_product() {
        let a = FeatureMap::filled(1, 1, 1, 3.0);
        let out = correlate(&a, &a, &raw(0, 1)).unwrap();
        assert_eq!(out.map.shape(), (1, 1, 1));
        assert_eq!(out.map.get(0, 0, 0), 9.0);
    }

    #[test]
    fn one_row_fixture() {
        let a = FeatureMap::from_vec(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let b = FeatureMap::from_vec(1, 3, 1, vec![4.0, 5.0, 6.0]).unwrap();
        let out = correlate(&a, &b, &raw(1, 1)).unwrap();
        assert_eq!(out.map.channels(), 9);
        assert_eq!(out.value(0, 1, 0, 1), 12.0);
        assert_eq!(out.value(0, 0, 0, -1), 0.0);
        // |p| = 1 leaves the single row entirely
        assert_eq!(out.value(0, 1, 1, 0), 0.0);
    }

    #[test]
    fn matches_brute_force_with_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = FeatureMap::from_fn(5, 7, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let b = FeatureMap::from_fn(5, 7, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let params = raw(2, 2);
        let out = correlate(&a, &b, &params).unwrap();
        assert_eq!(out.map.shape(), (3, 4, 25));
        for oi in 0..3 {
            for oj in 0..4 {
                for p in -2..=2 {
                    for q in -2..=2 {
                        let want = brute(&a, &b, oi * 2, oj * 2, p, q);
                        assert!((out.value(oi, oj, p, q) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_divides_by_channels() {
        let a = FeatureMap::filled(2, 2, 4, 1.0);
        let out = correlate(&a, &a, &CorrelationParams::new(0, 1)).unwrap();
        assert_eq!(out.map.get(0, 0, 0), 1.0);
    }

    #[test]
    fn shift_right_by_one_is_detected() {
        // Unit vectors in distinct directions: by Cauchy-Schwarz the self
        // product strictly dominates every other pairing.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut a = FeatureMap::from_fn(1, 8, 4, |_, _, _| rng.random_range(0.1..1.0));
            for j in 0..8 {
                let px = a.pixel_mut(0, j);
                let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
                px.iter_mut().for_each(|v| *v /= n);
            }
            let b = FeatureMap::from_fn(1, 8, 4, |_, j, c| if j == 0 { 0.0 } else { a.get(0, j - 1, c) });
            let out = correlate(&a, &b, &raw(1, 1)).unwrap();
            for j in 0..7 {
                assert_eq!(out.argmax_offset(0, j), (0, 1), "position {j}");
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = FeatureMap::zeros(2, 2, 1);
        let b = FeatureMap::zeros(2, 3, 1);
        assert!(matches!(correlate(&a, &b, &raw(1, 1)), Err(Error::ShapeMismatch(_))));
        let g = FeatureMap::zeros(2, 2, 4);
        assert!(correlate_backward(&g, &a, &a, &raw(1, 1)).is_err());
    }

    #[test]
    fn zero_grad_gives_zero_gradients() {
        let a = FeatureMap::filled(3, 3, 2, 0.5);
        let g = FeatureMap::zeros(3, 3, 9);
        let (ga, gb) = correlate_backward(&g, &a, &a, &raw(1, 1)).unwrap();
        assert!(ga.data().iter().chain(gb.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_in_first_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = FeatureMap::from_fn(4, 4, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let b = FeatureMap::from_fn(4, 4, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let p = CorrelationParams::new(2, 1);
        let base = correlate(&a, &b, &p).unwrap();
        let scaled = correlate(&a.scaled(-2.5), &b, &p).unwrap();
        for (x, y) in base.map.data().iter().zip(scaled.map.data()) {
            assert!((x * -2.5 - y).abs() < 1e-12);
        }
    }
}
