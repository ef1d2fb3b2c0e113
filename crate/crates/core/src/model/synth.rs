//! Seeded synthetic models for desk-scale experiments.
//!
//! Weights and biases are drawn uniformly from [-1, 1] with a ChaCha8 stream,
//! so the same recipe and seed always produce the same model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv_output_dim, Activation, ConvLayer, Layer, LinearLayer, Model, Precision, Tensor, TensorShape};
use crate::error::{Error, Result};

/// One layer of a synthetic model, before weights are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecipe {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize, depthwise: bool, activation: Activation },
    Linear { out_features: usize, activation: Activation },
    ResidualAdd { from: usize },
    Gap,
}

impl LayerRecipe {
    /// Parses `conv:out=16,k=3,s=1,p=1,act=relu6[,dw]`, `linear:out=10[,act=relu]`,
    /// `residual:from=2` or `gap`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, args) = spec.split_once(':').unwrap_or((spec, ""));
        let mut out = None;
        let (mut k, mut s, mut p, mut dw, mut act, mut from) = (3, 1, 0, false, Activation::None, None);
        for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            let bad = || Error::Parse(format!("bad layer argument `{arg}` in `{spec}`"));
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match arg.split_once('=') {
                Some(("out", v)) => out = Some(num(v)?),
                Some(("k", v)) => k = num(v)?,
                Some(("s", v)) => s = num(v)?,
                Some(("p", v)) => p = num(v)?,
                Some(("from", v)) => from = Some(num(v)?),
                Some(("act", v)) => {
                    act = serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| bad())?
                }
                None if arg == "dw" => dw = true,
                _ => return Err(bad()),
            }
        }
        let need = |o: Option<usize>, what: &str| o.ok_or_else(|| Error::Parse(format!("`{spec}` needs {what}=")));
        match kind {
            "conv" => Ok(LayerRecipe::Conv {
                out_channels: if dw { out.unwrap_or(0) } else { need(out, "out")? },
                kernel: k,
                stride: s,
                padding: p,
                depthwise: dw,
                activation: act,
            }),
            "linear" => Ok(LayerRecipe::Linear { out_features: need(out, "out")?, activation: act }),
            "residual" | "residual_add" => Ok(LayerRecipe::ResidualAdd { from: need(from, "from")? }),
            "gap" => Ok(LayerRecipe::Gap),
            other => Err(Error::Parse(format!("unknown layer kind `{other}`"))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect()
}

/// Draws weights for `recipes` and builds a validated float model.
pub fn build(input_shape: TensorShape, recipes: &[LayerRecipe], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer> = Vec::with_capacity(recipes.len());
    let mut prev = input_shape;
    for recipe in recipes {
        let layer = match *recipe {
            LayerRecipe::Conv { out_channels, kernel, stride, padding, depthwise, activation } => {
                let oc = if depthwise { prev.channels } else { out_channels };
                let kl = if depthwise { 1 } else { prev.channels } * kernel * kernel;
                let w = uniform(&mut rng, oc * kl);
                let b = uniform(&mut rng, oc);
                Layer::Conv(ConvLayer::new(prev, oc, (kernel, kernel), stride, padding, depthwise, w, b, activation)?)
            }
            LayerRecipe::Linear { out_features, activation } => {
                let w = uniform(&mut rng, prev.neuron_count() * out_features);
                let b = uniform(&mut rng, out_features);
                Layer::Linear(LinearLayer::new(prev, out_features, w, b, activation)?)
            }
            LayerRecipe::ResidualAdd { from } => Layer::ResidualAdd { from, shape: prev },
            LayerRecipe::Gap => Layer::GlobalAvgPool { in_shape: prev },
        };
        prev = layer.out_shape();
        layers.push(layer);
    }
    Model::new(input_shape, Precision::Float32, layers)
}

pub fn random_input(shape: TensorShape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor { shape, data: uniform(&mut rng, shape.neuron_count()) }
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize, activation: Activation) -> LayerRecipe {
    LayerRecipe::Conv { out_channels, kernel, stride, padding, depthwise: false, activation }
}

fn dw(stride: usize, activation: Activation) -> LayerRecipe {
    LayerRecipe::Conv { out_channels: 0, kernel: 3, stride, padding: 1, depthwise: true, activation }
}

/// Small CNN touching every operator kind: 3x16x16 input, strided depthwise
/// conv, a residual add, GAP and a linear classifier.
pub fn tiny_cnn_recipe() -> (TensorShape, Vec<LayerRecipe>) {
    use Activation::*;
    let recipes = vec![
        conv(8, 3, 1, 1, Relu),
        dw(2, Relu6),
        conv(8, 1, 1, 0, None),
        LayerRecipe::ResidualAdd { from: 1 },
        conv(16, 3, 2, 1, Relu),
        LayerRecipe::Gap,
        LayerRecipe::Linear { out_features: 10, activation: None },
    ];
    (TensorShape { channels: 3, height: 16, width: 16 }, recipes)
}

pub fn tiny_cnn(seed: u64) -> Model {
    let (shape, recipes) = tiny_cnn_recipe();
    build(shape, &recipes, seed).expect("tiny_cnn recipe is shape-consistent")
}

/// MobileNetV2 (width 1.0) layer schedule at 112x112x3 with BN already folded:
/// stem conv, 17 inverted-residual blocks, 1x1 conv to 1280, GAP, linear 1000.
pub fn mobilenet_v2_recipe() -> (TensorShape, Vec<LayerRecipe>) {
    use Activation::*;
    // (expansion t, out channels c, repeats n, first stride s)
    const BLOCKS: [(usize, usize, usize, usize); 7] =
        [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let mut r = vec![conv(32, 3, 2, 1, Relu6)];
    let mut in_c = 32;
    for (t, c, n, s) in BLOCKS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let block_input = r.len() - 1;
            if t != 1 {
                r.push(conv(in_c * t, 1, 1, 0, Relu6));
            }
            r.push(dw(stride, Relu6));
            r.push(conv(c, 1, 1, 0, None));
            if stride == 1 && in_c == c {
                r.push(LayerRecipe::ResidualAdd { from: block_input });
            }
            in_c = c;
        }
    }
    r.push(conv(1280, 1, 1, 0, Relu6));
    r.push(LayerRecipe::Gap);
    r.push(LayerRecipe::Linear { out_features: 1000, activation: None });
    (TensorShape { channels: 3, height: 112, width: 112 }, r)
}

pub fn mobilenet_v2_like(seed: u64) -> Model {
    let (shape, recipes) = mobilenet_v2_recipe();
    build(shape, &recipes, seed).expect("mobilenet recipe is shape-consistent")
}

/// Size limits for [`random_cnn`].
#[derive(Debug, Clone, Copy)]
pub struct RandomCnnLimits {
    pub max_layers: usize,
    pub max_channels: usize,
    pub max_spatial: usize,
}

impl Default for RandomCnnLimits {
    fn default() -> Self {
        Self { max_layers: 6, max_channels: 16, max_spatial: 16 }
    }
}

/// Random shape-consistent CNN within `limits`, mixing standard and depthwise
/// convs, strides, padding, residual adds and an optional GAP + linear head.
pub fn random_cnn(seed: u64, limits: RandomCnnLimits) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.random_range(1..=limits.max_channels.min(4));
    let h0 = rng.random_range(3..=limits.max_spatial.max(3));
    let w0 = rng.random_range(3..=limits.max_spatial.max(3));
    let input = TensorShape { channels: c0, height: h0, width: w0 };
    let acts = [Activation::None, Activation::Relu, Activation::Relu6];

    let mut recipes = Vec::new();
    let mut shapes: Vec<TensorShape> = Vec::new();
    let mut prev = input;
    let n_layers = rng.random_range(1..=limits.max_layers);
    while recipes.len() < n_layers {
        let remaining = n_layers - recipes.len();
        let residual_src = (0..shapes.len()).rev().find(|&i| shapes[i] == prev && i + 1 < shapes.len());
        if let Some(from) = residual_src.filter(|_| remaining >= 1 && rng.random_bool(0.3)) {
            recipes.push(LayerRecipe::ResidualAdd { from });
            shapes.push(prev);
            continue;
        }
        if remaining <= 2 && !recipes.is_empty() && rng.random_bool(0.35) {
            if remaining == 2 && prev.plane() > 1 {
                recipes.push(LayerRecipe::Gap);
                prev = TensorShape { channels: prev.channels, height: 1, width: 1 };
                shapes.push(prev);
            }
            let out = rng.random_range(1..=limits.max_channels);
            recipes.push(LayerRecipe::Linear { out_features: out, activation: acts[rng.random_range(0..3)] });
            prev = TensorShape { channels: out, height: 1, width: 1 };
            shapes.push(prev);
            break;
        }
        let kernel = if prev.height >= 3 && prev.width >= 3 && rng.random_bool(0.6) { 3 } else { 1 };
        let padding = if kernel == 3 { rng.random_range(0..=1) } else { 0 };
        let stride = if rng.random_bool(0.3) { 2 } else { 1 };
        let depthwise = rng.random_bool(0.3);
        let out_channels = if depthwise { prev.channels } else { rng.random_range(1..=limits.max_channels) };
        let (Some(oh), Some(ow)) = (
            conv_output_dim(prev.height, kernel, stride, padding),
            conv_output_dim(prev.width, kernel, stride, padding),
        ) else {
            continue;
        };
        recipes.push(LayerRecipe::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            depthwise,
            activation: acts[rng.random_range(0..3)],
        });
        prev = TensorShape { channels: out_channels, height: oh, width: ow };
        shapes.push(prev);
    }
    build(input, &recipes, rng.random()).expect("random recipe is shape-consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mobilenet_structure() {
        let m = mobilenet_v2_like(1);
        assert_eq!(m.input_shape, TensorShape::new(3, 112, 112).unwrap());
        assert_eq!(m.count_kind("conv"), 52);
        assert_eq!(m.count_kind("linear"), 1);
        assert_eq!(m.count_kind("residual_add"), 10);
        assert_eq!(m.output_shape(), TensorShape::new(1000, 1, 1).unwrap());
        // 960-channel depthwise 3x3 kernels: 960 * 3 * 3 * 4 bytes
        let dw960 = m
            .layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv(c) if c.depthwise && c.in_shape.channels == 960 => Some(c),
                _ => None,
            })
            .unwrap();
        assert_eq!(dw960.weights.len() * 4, 34_560);
    }

    #[test]
    fn deterministic() {
        assert_eq!(tiny_cnn(42), tiny_cnn(42));
        assert_ne!(tiny_cnn(42), tiny_cnn(43));
        for s in 0..50 {
            assert_eq!(random_cnn(s, RandomCnnLimits::default()), random_cnn(s, RandomCnnLimits::default()));
        }
    }

    #[test]
    fn random_models_respect_limits() {
        let lim = RandomCnnLimits::default();
        for s in 0..300 {
            let m = random_cnn(s, lim);
            assert!(m.layers.len() <= lim.max_layers, "seed {s}");
            for l in &m.layers {
                let o = l.out_shape();
                assert!(o.channels <= lim.max_channels && o.height <= lim.max_spatial && o.width <= lim.max_spatial);
            }
        }
    }

    #[test]
    fn parse_recipes() {
        assert_eq!(
            LayerRecipe::parse("conv:out=16,k=3,s=1,p=1,act=relu6").unwrap(),
            conv(16, 3, 1, 1, Activation::Relu6)
        );
        assert_eq!(LayerRecipe::parse("conv:k=3,s=2,p=1,dw").unwrap(), dw(2, Activation::None));
        assert_eq!(LayerRecipe::parse("gap").unwrap(), LayerRecipe::Gap);
        assert!(LayerRecipe::parse("pool:k=2").is_err());
        assert!(LayerRecipe::parse("conv:k=3").is_err());
    }
}
