//! GNet encoder-decoder and its UNet / UNet_t ablation variants.
//!
//! Encoder: a double convolution followed by four max-pool + double convolution
//! stages that double the width each time. Decoder: four stages that upsample
//! (halving the width), concatenate the matching encoder skip and apply a double
//! convolution. A 1x1 convolution and a sigmoid produce the likelihood map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    BatchNormStats, Conv2dParams, ConvTranspose2dParams, Graph, PadMode, PadSpec, Parameter, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// 2x nearest-neighbour upsampling followed by a 3x3 convolution (UNet).
    NearestUpsample,
    /// k=2, s=2 transposed convolution (UNet_t).
    Transpose,
    /// k=3, s=2, d=2, p=2, output_padding=1 transposed convolution (GNet).
    TransposeDilated,
}

impl UpsampleMode {
    pub const ALL: [UpsampleMode; 3] = [
        UpsampleMode::NearestUpsample,
        UpsampleMode::Transpose,
        UpsampleMode::TransposeDilated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            UpsampleMode::NearestUpsample => "unet",
            UpsampleMode::Transpose => "unet_t",
            UpsampleMode::TransposeDilated => "gnet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub upsample_mode: UpsampleMode,
    pub out_channels: usize,
    pub batch_norm: bool,
    /// Wrap the 3x3 convolutions around the width axis instead of zero padding.
    pub circular_width: bool,
}

impl Default for GNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 8,
            depth: 5,
            upsample_mode: UpsampleMode::TransposeDilated,
            out_channels: 1,
            batch_norm: true,
            circular_width: false,
        }
    }
}

impl GNetConfig {
    pub fn with_width(base_width: usize) -> Self {
        Self {
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 || self.out_channels != 1 || self.depth != 5 {
            return Err(Error::InvalidConfig(format!(
                "GNet expects 3 input channels, 1 output channel and 5 scales, got {self:?}"
            )));
        }
        if self.base_width < 4 {
            return Err(Error::InvalidConfig(format!(
                "base_width must be at least 4, got {}",
                self.base_width
            )));
        }
        Ok(())
    }

    /// Spatial dimensions must survive `depth - 1` halvings.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "input {height}x{width} is not divisible by {d}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    conv1: ConvLayer,
    norm1: Option<NormLayer>,
    conv2: ConvLayer,
    norm2: Option<NormLayer>,
}

#[derive(Clone, Copy, Debug)]
enum Upsample {
    Nearest(ConvLayer),
    Transposed {
        w: usize,
        b: usize,
        p: ConvTranspose2dParams,
    },
}

#[derive(Clone, Copy, Debug)]
struct UpBlock {
    up: Upsample,
    conv: DoubleConv,
}

/// Trainable parameters, batch-norm buffers and the layer wiring.
#[derive(Clone, Debug)]
pub struct GNetModel<T> {
    config: GNetConfig,
    params: Vec<Parameter<T>>,
    stats: Vec<(String, BatchNormStats<T>)>,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<UpBlock>,
    head: ConvLayer,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Parameter<T>>,
    stats: Vec<(String, BatchNormStats<T>)>,
    batch_norm: bool,
}

impl<T: Scalar> Builder<T> {
    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.push(name, t)
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvLayer {
        let w = self.he_uniform(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, padding: k / 2 }
    }

    fn norm(&mut self, name: &str, c: usize) -> Option<NormLayer> {
        if !self.batch_norm {
            return None;
        }
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.push((name.to_string(), BatchNormStats::new(c)));
        Some(NormLayer {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        })
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let norm1 = self.norm(&format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let norm2 = self.norm(&format!("{name}.bn2"), cout);
        DoubleConv {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn upsample(&mut self, name: &str, cin: usize, mode: UpsampleMode) -> Upsample {
        let cout = cin / 2;
        let (k, p) = match mode {
            UpsampleMode::NearestUpsample => return Upsample::Nearest(self.conv(name, cin, cout, 3)),
            UpsampleMode::Transpose => (2, ConvTranspose2dParams::new(2, 0, 1, 0)),
            UpsampleMode::TransposeDilated => (3, ConvTranspose2dParams::new(2, 2, 2, 1)),
        };
        // each output pixel of a stride-2 transposed conv sees about cin * k^2 / 4 inputs
        let fan_in = (cin * k * k / 4).max(1);
        let w = self.he_uniform(format!("{name}.weight"), &[cin, cout, k, k], fan_in);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Upsample::Transposed { w, b, p }
    }
}

/// Builds a freshly initialised model; identical seeds give bit-identical weights.
pub fn build_model<T: Scalar>(config: GNetConfig, seed: u64) -> Result<GNetModel<T>> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        stats: Vec::new(),
        batch_norm: config.batch_norm,
    };
    let c0 = config.base_width;
    let inc = b.double_conv("inc", config.in_channels, c0);
    let downs = (1..config.depth)
        .map(|i| b.double_conv(&format!("down{i}"), c0 << (i - 1), c0 << i))
        .collect();
    let ups = (1..config.depth)
        .map(|i| {
            let cin = c0 << (config.depth - i);
            let up = b.upsample(&format!("up{i}.upsample"), cin, config.upsample_mode);
            let conv = b.double_conv(&format!("up{i}"), cin, cin / 2);
            UpBlock { up, conv }
        })
        .collect();
    let head = b.conv("outc", c0, config.out_channels, 1);
    // consume one draw so the stream position does not depend on the last layer size
    let _: u32 = b.rng.gen();
    Ok(GNetModel {
        config,
        params: b.params,
        stats: b.stats,
        inc,
        downs,
        ups,
        head,
    })
}

/// Total element count of the trainable parameters.
pub fn count_parameters(params: &[Parameter<impl Scalar>]) -> usize {
    params.iter().map(Parameter::numel).sum()
}

/// Graph handles of every parameter for one forward pass.
pub struct Bindings(Vec<Var>);

impl<T: Scalar> GNetModel<T> {
    pub fn config(&self) -> &GNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn batch_norm_stats(&self) -> &[(String, BatchNormStats<T>)] {
        &self.stats
    }

    pub fn batch_norm_stats_mut(&mut self) -> &mut [(String, BatchNormStats<T>)] {
        &mut self.stats
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    /// `N x 3 x H x W` in, `N x 1 x H x W` likelihoods in (0, 1) out.
    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, training: bool) -> Result<(Var, Bindings)> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got shape {:?}",
                self.config.in_channels,
                g.value(input).shape()
            )));
        }
        self.config.check_input(h, w)?;
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let mut ctx = Ctx {
            g,
            vars: &vars,
            stats: &mut self.stats,
            training,
            circular: self.config.circular_width,
        };
        let mut skips = vec![ctx.double_conv(input, &self.inc)?];
        for down in &self.downs {
            let pooled = ctx.g.max_pool2d(*skips.last().expect("non-empty"), 2, 2)?;
            skips.push(ctx.double_conv(pooled, down)?);
        }
        let mut x = skips.pop().expect("bottleneck");
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per decoder stage");
            let upsampled = match up.up {
                Upsample::Nearest(conv) => {
                    let u = ctx.g.upsample_nearest2x(x)?;
                    ctx.conv(u, conv)?
                }
                Upsample::Transposed { w, b, p } => ctx.g.conv_transpose2d(x, vars[w], Some(vars[b]), p)?,
            };
            let cat = ctx.g.concat_channels(skip, upsampled)?;
            x = ctx.double_conv(cat, &up.conv)?;
        }
        let logits = ctx.conv(x, self.head)?;
        let out = g.sigmoid(logits);
        Ok((out, Bindings(vars)))
    }

    /// Copies gradients from the graph into the parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            p.grad = g
                .take_grad(v)
                .map(|data| Tensor::new(p.value.shape().to_vec(), data).expect("gradient shape"));
        }
    }

    /// Inference without gradient tracking.
    pub fn infer(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let (y, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(y).clone())
    }

    /// Parameters and batch-norm buffers as named tensors, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone()).expect("stats")));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone()).expect("stats")));
        }
        out
    }

    /// Restores tensors produced by [`GNetModel::named_tensors`].
    pub fn load_named_tensors(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.named_tensors();
        if entries.len() != expected.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, et)) in entries.iter().zip(&expected) {
            if name != ename || t.shape() != et.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{ename}` {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        let np = self.params.len();
        for (p, (_, t)) in self.params.iter_mut().zip(entries) {
            p.value = t.clone();
            p.grad = None;
        }
        for (i, (_, s)) in self.stats.iter_mut().enumerate() {
            s.mean = entries[np + 2 * i].1.data().to_vec();
            s.var = entries[np + 2 * i + 1].1.data().to_vec();
        }
        Ok(())
    }
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    stats: &'a mut [(String, BatchNormStats<T>)],
    training: bool,
    circular: bool,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, x: Var, layer: ConvLayer) -> Result<Var> {
        let (w, b) = (self.vars[layer.w], Some(self.vars[layer.b]));
        if self.circular && layer.padding > 0 {
            let p = layer.padding;
            let padded = self.g.pad2d(x, PadSpec::new(p, p, PadMode::Zero), PadSpec::new(p, p, PadMode::Circular))?;
            self.g.conv2d(padded, w, b, Conv2dParams::default())
        } else {
            self.g.conv2d(x, w, b, Conv2dParams::new(1, layer.padding, 1))
        }
    }

    fn norm_relu(&mut self, x: Var, norm: Option<NormLayer>) -> Result<Var> {
        let y = match norm {
            Some(n) => self.g.batch_norm2d(
                x,
                self.vars[n.gamma],
                self.vars[n.beta],
                &mut self.stats[n.stats].1,
                self.training,
            )?,
            None => x,
        };
        Ok(self.g.relu(y))
    }

    fn double_conv(&mut self, x: Var, dc: &DoubleConv) -> Result<Var> {
        let h = self.conv(x, dc.conv1)?;
        let h = self.norm_relu(h, dc.norm1)?;
        let h = self.conv(h, dc.conv2)?;
        self.norm_relu(h, dc.norm2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter count from the layer list, independent of the builder.
    fn closed_form_count(c0: usize, mode: UpsampleMode, bn: bool) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let norm = |c: usize| if bn { 2 * c } else { 0 };
        let dc = |cin: usize, cout: usize| conv(cin, cout, 3) + norm(cout) + conv(cout, cout, 3) + norm(cout);
        let widths = [c0, 2 * c0, 4 * c0, 8 * c0, 16 * c0];
        let mut total = dc(3, c0);
        for i in 1..5 {
            total += dc(widths[i - 1], widths[i]);
        }
        for i in (1..5).rev() {
            let cin = widths[i];
            total += match mode {
                UpsampleMode::NearestUpsample => conv(cin, cin / 2, 3),
                UpsampleMode::Transpose => conv(cin, cin / 2, 2),
                UpsampleMode::TransposeDilated => conv(cin, cin / 2, 3),
            };
            total += dc(cin, cin / 2);
        }
        total + conv(c0, 1, 1)
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        for mode in UpsampleMode::ALL {
            for bn in [true, false] {
                let cfg = GNetConfig {
                    upsample_mode: mode,
                    batch_norm: bn,
                    ..GNetConfig::with_width(8)
                };
                let m = build_model::<f32>(cfg, 0).unwrap();
                assert_eq!(m.count_parameters(), closed_form_count(8, mode, bn), "{mode:?} bn={bn}");
            }
        }
        let empty: [Parameter<f32>; 0] = [];
        assert_eq!(count_parameters(&empty), 0);
    }

    #[test]
    fn single_conv_parameter_count() {
        let p = vec![
            Parameter::new("w", Tensor::<f32>::zeros(&[8, 3, 3, 3])),
            Parameter::new("b", Tensor::<f32>::zeros(&[8])),
        ];
        assert_eq!(count_parameters(&p), 224);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model::<f32>(GNetConfig::default(), 42).unwrap();
        let b = build_model::<f32>(GNetConfig::default(), 42).unwrap();
        let c = build_model::<f32>(GNetConfig::default(), 43).unwrap();
        let bits = |m: &GNetModel<f32>| -> Vec<u32> {
            m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn encoder_shapes_identical_across_modes() {
        let shapes = |mode| -> Vec<(String, Vec<usize>)> {
            let m = build_model::<f32>(GNetConfig { upsample_mode: mode, ..GNetConfig::default() }, 1).unwrap();
            m.params()
                .iter()
                .filter(|p| p.name.starts_with("inc") || p.name.starts_with("down"))
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect()
        };
        let reference = shapes(UpsampleMode::TransposeDilated);
        assert!(!reference.is_empty());
        assert_eq!(shapes(UpsampleMode::Transpose), reference);
        assert_eq!(shapes(UpsampleMode::NearestUpsample), reference);
    }

    #[test]
    fn output_matches_input_size_for_every_mode() {
        for mode in UpsampleMode::ALL {
            for (h, w) in [(64, 64), (64, 320), (96, 64), (192, 64)] {
                let mut m = build_model::<f32>(GNetConfig { upsample_mode: mode, base_width: 4, ..GNetConfig::default() }, 3).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let y = m.infer(Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)).unwrap();
                assert_eq!(y.shape(), &[1, 1, h, w], "{mode:?}");
                assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let mut m = build_model::<f32>(GNetConfig::with_width(4), 0).unwrap();
        let err = m.infer(Tensor::zeros(&[1, 3, 40, 64])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(build_model::<f32>(GNetConfig::with_width(2), 0).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = build_model::<f32>(GNetConfig::with_width(4), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 32, 48], 0.0, 1.0, &mut rng);
        let a = m.infer(x.clone()).unwrap();
        let b = m.infer(x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn circular_width_option_runs() {
        let cfg = GNetConfig { circular_width: true, base_width: 4, ..GNetConfig::default() };
        let mut m = build_model::<f32>(cfg, 0).unwrap();
        let y = m.infer(Tensor::full(&[1, 3, 32, 32], 0.5)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
    }
}
