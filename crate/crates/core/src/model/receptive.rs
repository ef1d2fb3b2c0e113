use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ConvLayer, LinearLayer, TensorShape};
use crate::error::{Error, Result};

/// The input neurons one output neuron reads, as a box over the input tensor
/// after clipping the window against padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub in_shape: TensorShape,
    pub channels: Range<usize>,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl ReceptiveField {
    pub fn len(&self) -> usize {
        self.channels.len() * self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: usize, h: usize, w: usize) -> bool {
        self.channels.contains(&c) && self.rows.contains(&h) && self.cols.contains(&w)
    }

    /// Linear input indices in channel-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let s = self.in_shape;
        self.channels.clone().flat_map(move |c| {
            self.rows
                .clone()
                .flat_map(move |h| self.cols.clone().map(move |w| s.index(c, h, w)))
        })
    }
}

/// Clips the window `[o*stride - pad, o*stride - pad + k)` to `[0, size)`.
#[inline]
pub(crate) fn window(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Range<usize> {
    let start = (o * stride) as isize - pad as isize;
    let end = start + k as isize;
    let lo = start.max(0) as usize;
    let hi = end.clamp(0, size as isize) as usize;
    lo.min(hi)..hi
}

pub(crate) fn conv_field(conv: &ConvLayer, c: usize, h: usize, w: usize) -> ReceptiveField {
    let channels = if conv.depthwise { c..c + 1 } else { 0..conv.in_shape.channels };
    ReceptiveField {
        in_shape: conv.in_shape,
        channels,
        rows: window(h, conv.kernel.0, conv.stride, conv.padding, conv.in_shape.height),
        cols: window(w, conv.kernel.1, conv.stride, conv.padding, conv.in_shape.width),
    }
}

fn check_out(shape: TensorShape, c: usize, h: usize, w: usize) -> Result<()> {
    if c >= shape.channels || h >= shape.height || w >= shape.width {
        return Err(Error::Bounds(format!("output ({c},{h},{w}) outside {shape}")));
    }
    Ok(())
}

pub(crate) fn get_input_conv(conv: &ConvLayer, c: usize, h: usize, w: usize) -> Result<ReceptiveField> {
    check_out(conv.out_shape, c, h, w)?;
    Ok(conv_field(conv, c, h, w))
}

/// Every linear output depends on every input.
pub(crate) fn get_input_linear(lin: &LinearLayer, c: usize, h: usize, w: usize) -> Result<ReceptiveField> {
    check_out(lin.out_shape(), c, h, w)?;
    let s = lin.in_shape;
    Ok(ReceptiveField { in_shape: s, channels: 0..s.channels, rows: 0..s.height, cols: 0..s.width })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{Activation, Layer};

    fn conv(in_shape: TensorShape, oc: usize, k: usize, s: usize, p: usize, dw: bool) -> ConvLayer {
        let kl = if dw { 1 } else { in_shape.channels } * k * k;
        ConvLayer::new(in_shape, oc, (k, k), s, p, dw, vec![1.0; oc * kl], vec![0.0; oc], Activation::None).unwrap()
    }

    /// Enumerates taps straight from the convolution definition.
    fn brute(conv: &ConvLayer, c: usize, h: usize, w: usize) -> BTreeSet<(usize, usize, usize)> {
        let mut set = BTreeSet::new();
        let chans: Vec<usize> = if conv.depthwise { vec![c] } else { (0..conv.in_shape.channels).collect() };
        for ic in chans {
            for ky in 0..conv.kernel.0 {
                for kx in 0..conv.kernel.1 {
                    let y = (h * conv.stride + ky) as isize - conv.padding as isize;
                    let x = (w * conv.stride + kx) as isize - conv.padding as isize;
                    if y >= 0 && x >= 0 && (y as usize) < conv.in_shape.height && (x as usize) < conv.in_shape.width {
                        set.insert((ic, y as usize, x as usize));
                    }
                }
            }
        }
        set
    }

    #[test]
    fn corner_window_is_clipped_by_padding() {
        let c = conv(TensorShape::new(1, 4, 4).unwrap(), 1, 3, 1, 1, false);
        let rf = get_input_conv(&c, 0, 0, 0).unwrap();
        assert_eq!((rf.channels, rf.rows, rf.cols), (0..1, 0..2, 0..2));
    }

    #[test]
    fn strided_window() {
        let c = conv(TensorShape::new(3, 8, 8).unwrap(), 6, 3, 2, 1, false);
        let rf = get_input_conv(&c, 5, 2, 3).unwrap();
        assert_eq!((rf.channels.clone(), rf.rows.clone(), rf.cols.clone()), (0..3, 3..6, 5..8));
        let got: BTreeSet<_> = rf.indices().map(|i| c.in_shape.coords(i)).collect();
        assert_eq!(got, brute(&c, 5, 2, 3));
    }

    #[test]
    fn matches_brute_force_everywhere() {
        for (k, s, p, dw) in [(3, 1, 1, false), (3, 2, 1, true), (1, 1, 0, false), (3, 2, 0, false), (5, 3, 2, true)] {
            let c = conv(TensorShape::new(3, 7, 6).unwrap(), 3, k, s, p, dw);
            for i in 0..c.out_shape.neuron_count() {
                let (oc, oh, ow) = c.out_shape.coords(i);
                let rf = get_input_conv(&c, oc, oh, ow).unwrap();
                let got: BTreeSet<_> = rf.indices().map(|j| c.in_shape.coords(j)).collect();
                assert_eq!(got, brute(&c, oc, oh, ow), "k{k} s{s} p{p} dw{dw} at {i}");
                assert_eq!(c.neuron_macs(i) as usize, got.len());
            }
        }
    }

    #[test]
    fn linear_depends_on_everything() {
        let lin = LinearLayer::new(TensorShape::new(10, 1, 1).unwrap(), 4, vec![0.0; 40], vec![0.0; 4], Activation::None)
            .unwrap();
        let rf = Layer::Linear(lin).get_input(2, 0, 0).unwrap();
        assert_eq!(rf.len(), 10);
        assert_eq!(rf.indices().collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_range_is_bounds_error() {
        let c = conv(TensorShape::new(1, 4, 4).unwrap(), 1, 3, 1, 1, false);
        assert!(matches!(get_input_conv(&c, 0, 4, 0), Err(Error::Bounds(_))));
        assert!(matches!(get_input_conv(&c, 1, 0, 0), Err(Error::Bounds(_))));
    }
}
