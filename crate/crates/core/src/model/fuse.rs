use super::{Activation, Layer, Model, Precision, Weights};
use crate::error::{Error, Result};

/// Folds every batch norm into the conv before it and absorbs its activation.
///
/// For channel `c` with `s = gamma / sqrt(var + eps)`: `w' = w * s` and
/// `b' = (b - mean) * s + beta`. Residual references are renumbered to the
/// fused layer list.
pub fn fuse_conv_bn_relu(model: &Model) -> Result<Model> {
    if model.precision != Precision::Float32 {
        return Err(Error::Fusion { layer: 0, message: "fusion must run before quantization".into() });
    }
    let mut out: Vec<Layer> = Vec::with_capacity(model.layers.len());
    // old index -> new index; None for conv outputs consumed by a following BN
    let mut remap: Vec<Option<usize>> = Vec::with_capacity(model.layers.len());

    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => {
                let fusion_err = |message: &str| Error::Fusion { layer: i, message: message.into() };
                let Some(Layer::Conv(conv)) = (i > 0).then(|| out.last_mut()).flatten() else {
                    return Err(fusion_err("batchnorm is not preceded by a conv"));
                };
                if remap[i - 1].is_none() {
                    return Err(fusion_err("batchnorm follows another batchnorm"));
                }
                if conv.activation != Activation::None {
                    return Err(fusion_err("conv applies an activation before the batchnorm"));
                }
                let (kl, channels) = (conv.kernel_len(), conv.out_shape.channels);
                let Weights::F32(w) = &mut conv.weights else {
                    return Err(fusion_err("conv weights are quantized"));
                };
                for c in 0..channels {
                    let s = bn.gamma[c] as f64 / (bn.var[c] as f64 + bn.eps as f64).sqrt();
                    for v in &mut w[c * kl..(c + 1) * kl] {
                        *v = (*v as f64 * s) as f32;
                    }
                    conv.bias[c] = ((conv.bias[c] as f64 - bn.mean[c] as f64) * s + bn.beta[c] as f64) as f32;
                }
                conv.activation = bn.activation;
                let fused_at = out.len() - 1;
                remap[i - 1] = None;
                remap.push(Some(fused_at));
            }
            Layer::ResidualAdd { from, shape } => {
                let Some(new_from) = remap[*from] else {
                    return Err(Error::Fusion {
                        layer: i,
                        message: format!("residual_add reads the pre-batchnorm output of layer {from}"),
                    });
                };
                remap.push(Some(out.len()));
                out.push(Layer::ResidualAdd { from: new_from, shape: *shape });
            }
            other => {
                remap.push(Some(out.len()));
                out.push(other.clone());
            }
        }
    }
    Model::new(model.input_shape, model.precision, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BatchNormLayer, ConvLayer, TensorShape};

    fn conv_bn(gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> Model {
        let s = TensorShape::new(1, 3, 3).unwrap();
        let conv = ConvLayer::new(s, 1, (1, 1), 1, 0, false, vec![0.5], vec![0.0], Activation::None).unwrap();
        let bn = BatchNormLayer {
            shape: conv.out_shape,
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            var: vec![var],
            eps,
            activation: Activation::Relu,
        };
        Model::new(s, Precision::Float32, vec![Layer::Conv(conv), Layer::BatchNorm(bn)]).unwrap()
    }

    fn fused_conv(m: &Model) -> (f32, f32, Activation) {
        let Layer::Conv(c) = &m.layers[0] else { panic!() };
        let Weights::F32(w) = &c.weights else { panic!() };
        (w[0], c.bias[0], c.activation)
    }

    #[test]
    fn identity_bn_keeps_weights() {
        let fused = fuse_conv_bn_relu(&conv_bn(1.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(fused.layers.len(), 1);
        assert_eq!(fused_conv(&fused), (0.5, 0.0, Activation::Relu));
    }

    #[test]
    fn hand_evaluated_fold() {
        let fused = fuse_conv_bn_relu(&conv_bn(2.0, 1.0, 0.0, 1.0, 0.0)).unwrap();
        let (w, b, _) = fused_conv(&fused);
        assert_eq!((w, b), (1.0, 1.0));
    }

    #[test]
    fn bn_without_conv_is_error() {
        let s = TensorShape::new(1, 2, 2).unwrap();
        let bn = BatchNormLayer {
            shape: s,
            gamma: vec![1.0],
            beta: vec![0.0],
            mean: vec![0.0],
            var: vec![1.0],
            eps: 1e-5,
            activation: Activation::None,
        };
        let m = Model::new(s, Precision::Float32, vec![Layer::BatchNorm(bn)]).unwrap();
        assert!(matches!(fuse_conv_bn_relu(&m), Err(Error::Fusion { layer: 0, .. })));
    }

    #[test]
    fn residual_indices_are_renumbered() {
        let s = TensorShape::new(1, 2, 2).unwrap();
        let c = |act| ConvLayer::new(s, 1, (1, 1), 1, 0, false, vec![1.0], vec![0.0], act).unwrap();
        let bn = BatchNormLayer {
            shape: s,
            gamma: vec![1.0],
            beta: vec![0.0],
            mean: vec![0.0],
            var: vec![1.0],
            eps: 0.0,
            activation: Activation::None,
        };
        let m = Model::new(
            s,
            Precision::Float32,
            vec![
                Layer::Conv(c(Activation::None)),
                Layer::BatchNorm(bn),
                Layer::Conv(c(Activation::Relu)),
                Layer::ResidualAdd { from: 1, shape: s },
            ],
        )
        .unwrap();
        let f = fuse_conv_bn_relu(&m).unwrap();
        assert_eq!(f.layers.len(), 3);
        assert_eq!(f.layers[2], Layer::ResidualAdd { from: 0, shape: s });
    }
}
