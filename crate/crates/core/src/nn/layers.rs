//! Minimal layers with hand-written backward passes. Feature maps are
//! `(channels, rows, cols)` arrays; one sample at a time.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter tensors, addressed by index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }
}

/// Gradient buffers mirroring a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|x| *x == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// He-normal, for layers followed by a ReLU.
    He,
    /// Normal with variance `1 / fan_in`.
    Lecun,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Array2<f32>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut w = Tensor::zeros(&[out_channels, fan_in]);
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun => (1.0 / fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            w.data
                .iter_mut()
                .for_each(|v| *v = normal.sample(rng) as f32);
        }
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
        }
        let xs = x.as_slice().expect("standard layout");
        let mut col = vec![0.0f32; c * k * k * oh * ow];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row =
                            &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, oh * ow), col).expect("sized")
    }

    fn col2im(&self, dcol: &Array2<f32>, in_shape: (usize, usize, usize)) -> Array3<f32> {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return dcol
                .to_owned()
                .into_shape_with_order((c, h, w))
                .expect("contiguous");
        }
        let cols = dcol.as_slice().expect("standard layout");
        let mut dx = vec![0.0f32; c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), dx).expect("sized")
    }

    fn weight_view<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape(
            (
                self.out_channels,
                self.in_channels * self.kernel * self.kernel,
            ),
            &store.tensors[self.weight].data,
        )
        .expect("weight shape")
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        let in_shape = x.dim();
        let (oh, ow) = self.output_size(in_shape.1, in_shape.2);
        let col = self.im2col(x);
        let mut out = Array2::<f32>::zeros((self.out_channels, oh * ow));
        let bias = &store.tensors[self.bias].data;
        for (mut row, &b) in out.outer_iter_mut().zip(bias) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight_view(store), &col, 1.0, &mut out);
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("sized");
        (out, ConvCache { col, in_shape })
    }

    /// Accumulates parameter gradients and, if asked, returns the input
    /// gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dout: &Array3<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Array3<f32>> {
        let (o, oh, ow) = dout.dim();
        let dout2 = dout
            .view()
            .into_shape_with_order((o, oh * ow))
            .expect("contiguous");
        {
            let fan_in = self.in_channels * self.kernel * self.kernel;
            let mut dw = ArrayViewMut2::from_shape((o, fan_in), &mut grads.0[self.weight])
                .expect("weight shape");
            general_mat_mul(1.0, &dout2, &cache.col.t(), 1.0, &mut dw);
        }
        for (g, row) in grads.0[self.bias].iter_mut().zip(dout2.outer_iter()) {
            *g += row.sum();
        }
        if !need_input_grad {
            return None;
        }
        let dcol = self.weight_view(store).t().dot(&dout2);
        Some(self.col2im(&dcol, cache.in_shape))
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array3<f32>, dout: &mut Array3<f32>) {
    ndarray::Zip::from(dout).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn upsample_nearest(x: &Array3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ci, r, col)| {
        x[[ci, r / factor, col / factor]]
    })
}

pub fn upsample_nearest_backward(dout: &Array3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return dout.clone();
    }
    let (c, h, w) = dout.dim();
    let mut dx = Array3::<f32>::zeros((c, h / factor, w / factor));
    for ((ci, r, col), &g) in dout.indexed_iter() {
        dx[[ci, r / factor, col / factor]] += g;
    }
    dx
}

pub fn concat_channels(parts: &[&Array3<f32>]) -> Array3<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching spatial shapes")
}

pub fn split_channels(x: &Array3<f32>, sizes: &[usize]) -> Vec<Array3<f32>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = x.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}
