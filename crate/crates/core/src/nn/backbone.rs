//! The keypoint localization network contract and a desk-scale reference
//! implementation.
//!
//! Any backbone qualifies if it emits `K` heatmaps and a `C`-channel
//! feature map, both at heatmap resolution, where the features come from a
//! 1×1 convolution over intermediate maps upsampled and concatenated at that
//! resolution. For a multi-branch network such as HRNet the natural tap is
//! the concatenation of its branch outputs; adapting one means implementing
//! [`Backbone`] around that graph.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, relu_backward, relu_inplace, split_channels, upsample_nearest,
    upsample_nearest_backward, Conv2d, ConvCache, Grads, Init, ParamStore,
};
use crate::datamodel::{DatasetMeta, HeatmapKind, HeatmapStack, HEATMAP_STRIDE};
use crate::error::{Error, Result};

/// Heatmaps plus the aggregated feature map `F`, spatially aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct KlnOutput {
    pub heatmaps: HeatmapStack,
    /// `(C, H_hm, W_hm)`
    pub features: Array3<f64>,
}

pub trait Backbone: Clone {
    type Tape;

    fn input_size(&self) -> (usize, usize);
    fn num_keypoints(&self) -> usize;
    fn feature_channels(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Forward pass over an `(H, W, 3)` image, keeping what backward needs.
    fn forward_tape(&self, pixels: &Array3<f32>) -> Result<(KlnOutput, Self::Tape)>;

    /// Accumulates parameter gradients given gradients on both outputs.
    fn backward(
        &self,
        tape: &Self::Tape,
        d_heatmaps: &Array3<f64>,
        d_features: Option<&Array3<f64>>,
        grads: &mut Grads,
    );

    fn forward(&self, pixels: &Array3<f32>) -> Result<KlnOutput> {
        self.forward_tape(pixels).map(|(out, _)| out)
    }

    fn check_meta(&self, meta: &DatasetMeta) -> Result<()> {
        if meta.input_size != self.input_size() || meta.num_keypoints() != self.num_keypoints() {
            return Err(Error::Shape {
                expected: format!("input {:?}, K={}", self.input_size(), self.num_keypoints()),
                actual: format!("input {:?}, K={}", meta.input_size, meta.num_keypoints()),
            });
        }
        Ok(())
    }
}

/// Runs the localization network on one image.
pub fn kln_forward<B: Backbone>(pixels: &Array3<f32>, model: &B) -> Result<KlnOutput> {
    model.forward(pixels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCnnConfig {
    pub input_size: (usize, usize),
    pub num_keypoints: usize,
    /// Channel widths at strides 4, 8 and 16.
    pub widths: [usize; 3],
    pub head_hidden: usize,
    pub feature_channels: usize,
    pub seed: u64,
}

impl ReferenceCnnConfig {
    pub fn for_meta(meta: &DatasetMeta, seed: u64) -> Self {
        Self {
            input_size: meta.input_size,
            num_keypoints: meta.num_keypoints(),
            widths: [16, 32, 32],
            head_hidden: 32,
            feature_channels: 64,
            seed,
        }
    }
}

/// Stride-4 patch stem, two further downsampling stages, and heads over the
/// concatenation of all three scales at heatmap resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCnn {
    pub config: ReferenceCnnConfig,
    params: ParamStore,
    stem: Conv2d,
    block1: Conv2d,
    down2: Conv2d,
    block2: Conv2d,
    down3: Conv2d,
    block3: Conv2d,
    head_hidden: Conv2d,
    head_out: Conv2d,
    feature_proj: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ReferenceTape {
    stem: (ConvCache, Array3<f32>),
    block1: (ConvCache, Array3<f32>),
    down2: (ConvCache, Array3<f32>),
    block2: (ConvCache, Array3<f32>),
    down3: (ConvCache, Array3<f32>),
    block3: (ConvCache, Array3<f32>),
    head_hidden: (ConvCache, Array3<f32>),
    head_out: ConvCache,
    feature_proj: ConvCache,
}

impl ReferenceCnn {
    pub fn new(config: ReferenceCnnConfig) -> Result<Self> {
        let (h, w) = config.input_size;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "reference backbone needs input sides divisible by 16, got {h}x{w}"
            )));
        }
        if config.num_keypoints == 0 || config.feature_channels == 0 {
            return Err(Error::InvalidArgument("empty network head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::default();
        let [w1, w2, w3] = config.widths;
        let s = HEATMAP_STRIDE;
        let stem = Conv2d::new(&mut p, "stem", 3, w1, s, s, 0, Init::He, &mut rng);
        let block1 = Conv2d::new(&mut p, "block1", w1, w1, 3, 1, 1, Init::He, &mut rng);
        let down2 = Conv2d::new(&mut p, "down2", w1, w2, 3, 2, 1, Init::He, &mut rng);
        let block2 = Conv2d::new(&mut p, "block2", w2, w2, 3, 1, 1, Init::He, &mut rng);
        let down3 = Conv2d::new(&mut p, "down3", w2, w3, 3, 2, 1, Init::He, &mut rng);
        let block3 = Conv2d::new(&mut p, "block3", w3, w3, 3, 1, 1, Init::He, &mut rng);
        let agg = w1 + w2 + w3;
        let head_hidden = Conv2d::new(
            &mut p,
            "head.hidden",
            agg,
            config.head_hidden,
            1,
            1,
            0,
            Init::He,
            &mut rng,
        );
        let head_out = Conv2d::new(
            &mut p,
            "head.out",
            config.head_hidden,
            config.num_keypoints,
            3,
            1,
            1,
            Init::Zero,
            &mut rng,
        );
        let feature_proj = Conv2d::new(
            &mut p,
            "features",
            agg,
            config.feature_channels,
            1,
            1,
            0,
            Init::Lecun,
            &mut rng,
        );
        Ok(Self {
            config,
            params: p,
            stem,
            block1,
            down2,
            block2,
            down3,
            block3,
            head_hidden,
            head_out,
            feature_proj,
        })
    }

    pub fn for_meta(meta: &DatasetMeta, seed: u64) -> Result<Self> {
        Self::new(ReferenceCnnConfig::for_meta(meta, seed))
    }

    /// Replaces all parameters; shapes must match.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        let same = params.tensors.len() == self.params.tensors.len()
            && params
                .tensors
                .iter()
                .zip(&self.params.tensors)
                .all(|(a, b)| a.shape == b.shape);
        if !same {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    fn to_chw(&self, pixels: &Array3<f32>) -> Result<Array3<f32>> {
        let (h, w) = self.config.input_size;
        if pixels.dim() != (h, w, 3) {
            return Err(Error::Shape {
                expected: format!("({h}, {w}, 3)"),
                actual: format!("{:?}", pixels.dim()),
            });
        }
        let mut x = pixels
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned();
        x.mapv_inplace(|v| v - 0.5);
        Ok(x)
    }

    fn conv_relu(&self, conv: &Conv2d, x: &Array3<f32>) -> (ConvCache, Array3<f32>) {
        let (mut out, cache) = conv.forward(&self.params, x);
        relu_inplace(&mut out);
        (cache, out)
    }
}

fn to_f64(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(f64::from)
}

fn to_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|v| v as f32)
}

impl Backbone for ReferenceCnn {
    type Tape = ReferenceTape;

    fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    fn num_keypoints(&self) -> usize {
        self.config.num_keypoints
    }

    fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_tape(&self, pixels: &Array3<f32>) -> Result<(KlnOutput, ReferenceTape)> {
        let x = self.to_chw(pixels)?;
        let stem = self.conv_relu(&self.stem, &x);
        let block1 = self.conv_relu(&self.block1, &stem.1);
        let down2 = self.conv_relu(&self.down2, &block1.1);
        let block2 = self.conv_relu(&self.block2, &down2.1);
        let down3 = self.conv_relu(&self.down3, &block2.1);
        let block3 = self.conv_relu(&self.block3, &down3.1);

        let agg = concat_channels(&[
            &block1.1,
            &upsample_nearest(&block2.1, 2),
            &upsample_nearest(&block3.1, 4),
        ]);
        let head_hidden = self.conv_relu(&self.head_hidden, &agg);
        let (heatmaps, head_out) = self.head_out.forward(&self.params, &head_hidden.1);
        let (features, feature_proj) = self.feature_proj.forward(&self.params, &agg);

        let out = KlnOutput {
            heatmaps: HeatmapStack::new(to_f64(&heatmaps), HeatmapKind::Predicted),
            features: to_f64(&features),
        };
        let tape = ReferenceTape {
            stem,
            block1,
            down2,
            block2,
            down3,
            block3,
            head_hidden,
            head_out,
            feature_proj,
        };
        Ok((out, tape))
    }

    fn backward(
        &self,
        tape: &ReferenceTape,
        d_heatmaps: &Array3<f64>,
        d_features: Option<&Array3<f64>>,
        grads: &mut Grads,
    ) {
        let p = &self.params;
        let dh = to_f32(d_heatmaps);
        let mut d_hidden = self
            .head_out
            .backward(p, &tape.head_out, &dh, grads, true)
            .expect("input grad");
        relu_backward(&tape.head_hidden.1, &mut d_hidden);
        let mut d_agg = self
            .head_hidden
            .backward(p, &tape.head_hidden.0, &d_hidden, grads, true)
            .expect("input grad");
        if let Some(df) = d_features {
            let d = self
                .feature_proj
                .backward(p, &tape.feature_proj, &to_f32(df), grads, true)
                .expect("input grad");
            d_agg += &d;
        }

        let [w1, w2, w3] = self.config.widths;
        let mut parts = split_channels(&d_agg, &[w1, w2, w3]).into_iter();
        let mut d_a1 = parts.next().expect("three parts");
        let mut d_a2 = upsample_nearest_backward(&parts.next().expect("three parts"), 2);
        let mut d_a3 = upsample_nearest_backward(&parts.next().expect("three parts"), 4);

        relu_backward(&tape.block3.1, &mut d_a3);
        let mut d = self
            .block3
            .backward(p, &tape.block3.0, &d_a3, grads, true)
            .expect("input grad");
        relu_backward(&tape.down3.1, &mut d);
        d_a2 += &self
            .down3
            .backward(p, &tape.down3.0, &d, grads, true)
            .expect("input grad");

        relu_backward(&tape.block2.1, &mut d_a2);
        let mut d = self
            .block2
            .backward(p, &tape.block2.0, &d_a2, grads, true)
            .expect("input grad");
        relu_backward(&tape.down2.1, &mut d);
        d_a1 += &self
            .down2
            .backward(p, &tape.down2.0, &d, grads, true)
            .expect("input grad");

        relu_backward(&tape.block1.1, &mut d_a1);
        let mut d = self
            .block1
            .backward(p, &tape.block1.0, &d_a1, grads, true)
            .expect("input grad");
        relu_backward(&tape.stem.1, &mut d);
        self.stem.backward(p, &tape.stem.0, &d, grads, false);
    }
}
