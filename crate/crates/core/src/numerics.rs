//! Dense tensors and the neural building blocks of the forward pipeline.
//!
//! Image-like tensors are `[C, H, W]`, token tensors `[N, C]`. Every reduction
//! runs in a fixed loop order, so results do not depend on how the work is
//! split across threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return invalid(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: (0..dims.iter().product()).map(f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims.to_vec(), self.data)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [a, b] => Ok((a, b)),
            _ => invalid(format!("expected a 2-d tensor, got dims {:?}", self.dims)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => invalid(format!("expected a 3-d tensor, got dims {:?}", self.dims)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return invalid(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, k: f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn to_tstf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TSTF_MAGIC);
        out.extend_from_slice(&TSTF_VERSION.to_le_bytes());
        out.push(0);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_tstf_bytes(bytes: &[u8]) -> Result<Tensor> {
        let fmt = |m: &str| Error::Format(format!("TSTF: {m}"));
        if bytes.len() < 10 || &bytes[..4] != TSTF_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TSTF_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        if bytes[8] != 0 {
            return Err(fmt(&format!("unsupported dtype {}", bytes[8])));
        }
        let ndim = bytes[9] as usize;
        let header = 10 + 8 * ndim;
        if bytes.len() < header {
            return Err(fmt("truncated header"));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt("dims overflow"))?;
        if bytes.len() != header + 4 * n {
            return Err(fmt(&format!(
                "payload is {} bytes, dims {dims:?} need {}",
                bytes.len() - header,
                4 * n
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }
}

const TSTF_MAGIC: &[u8; 4] = b"TSTF";
const TSTF_VERSION: u32 = 1;

pub fn write_tstf(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&t.to_tstf_bytes())?;
    Ok(())
}

pub fn read_tstf(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_tstf_bytes(&fs::read(path)?)
}

/// Reads a binary PGM or PPM into `[1|3, H, W]` with values in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let c = i % channels;
        let p = i / channels;
        data[c * h * w + p] = v as f32 / 255.0;
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Writes `[1, H, W]` as PGM or `[3, H, W]` as PPM, clamping to `[0, 1]`.
pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    let subtype = match c {
        1 => PnmSubtype::Graymap(SampleEncoding::Binary),
        3 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => return invalid(format!("cannot write a {c}-channel image")),
    };
    let mut raw = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            let v = t.data[ch * h * w + p].clamp(0.0, 1.0);
            raw[p * c + ch] = (v * 255.0).round() as u8;
        }
    }
    let color = if c == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let file = fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&raw, w as u32, h as u32, color)?;
    Ok(())
}

/// 2-d convolution layer (cross-correlation) with weights `[Cout, Cin, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: vec![0.0; cout],
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims[2]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }
}

pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let (cout, wcin, kh, kw) = match weight.dims[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return invalid(format!("conv weight must be 4-d, got {:?}", weight.dims)),
    };
    if wcin != cin || bias.len() != cout {
        return invalid(format!(
            "conv expects {wcin} input channels and {cout} biases, got {cin} channels and {} biases",
            bias.len()
        ));
    }
    let (Some(ho), Some(wo)) = (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) else {
        return invalid(format!(
            "kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}"
        ));
    };
    if ho == 0 || wo == 0 {
        return invalid("convolution output is empty");
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; cout * ho * wo];
    par::for_each_chunk_mut(&mut out, ho * wo, |co, plane| {
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        for o in plane.iter_mut() {
            *o += bias[co];
        }
    });
    Tensor::new(vec![cout, ho, wo], out)
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor {
        dims: t.dims.clone(),
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// `x + conv2(relu(conv1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn zeros(channels: usize) -> Self {
        ResBlock {
            conv1: Conv2d::zeros(channels, channels, 3),
            conv2: Conv2d::zeros(channels, channels, 3),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mid = relu(&self.conv1.forward(input)?);
        input.add(&self.conv2.forward(&mid)?)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

pub fn residual_block(input: &Tensor, block: &ResBlock) -> Result<Tensor> {
    block.forward(input)
}

/// Dense layer applied row-wise; `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: vec![0.0; output],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }

    /// `x` is `[rows, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, din) = x.dims2()?;
        if din != self.in_dim() {
            return invalid(format!(
                "linear layer expects width {}, got {din}",
                self.in_dim()
            ));
        }
        let dout = self.out_dim();
        let w = self.weight.data();
        let mut out = vec![0.0f32; rows * dout];
        par::for_each_chunk_mut(&mut out, dout, |r, orow| {
            let xr = &x.data[r * din..(r + 1) * din];
            for (o, v) in orow.iter_mut().enumerate() {
                let wr = &w[o * din..(o + 1) * din];
                let mut acc = 0.0f32;
                for i in 0..din {
                    acc += wr[i] * xr[i];
                }
                *v = acc + self.bias[o];
            }
        });
        Tensor::new(vec![rows, dout], out)
    }

    /// `Wᵀ y` for `y` of shape `[rows, out]`; the bias is not involved.
    pub fn transpose_forward(&self, y: &Tensor) -> Result<Tensor> {
        let (rows, dout) = y.dims2()?;
        if dout != self.out_dim() {
            return invalid(format!(
                "transposed linear expects width {}, got {dout}",
                self.out_dim()
            ));
        }
        let din = self.in_dim();
        let w = self.weight.data();
        let mut out = vec![0.0f32; rows * din];
        par::for_each_chunk_mut(&mut out, din, |r, orow| {
            let yr = &y.data[r * dout..(r + 1) * dout];
            for (o, &yv) in yr.iter().enumerate() {
                let wr = &w[o * din..(o + 1) * din];
                for i in 0..din {
                    orow[i] += wr[i] * yv;
                }
            }
        });
        Tensor::new(vec![rows, din], out)
    }
}

pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if r == 0 || c % (r * r) != 0 {
        return invalid(format!(
            "pixel shuffle needs channels divisible by {}, got {c}",
            r * r
        ));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0f32; c * h * w];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    for x in 0..w {
                        out[(oc * ho + y * r + i) * wo + x * r + j] = input.data[(ic * h + y) * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out)
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

// For each output coordinate: four source indices (edge-clamped) and weights.
fn cubic_taps(n_in: usize, scale: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_in * scale)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for k in 0..4 {
                let i = base as isize - 1 + k as isize;
                idx[k] = i.clamp(0, n_in as isize - 1) as usize;
                wts[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Separable cubic convolution (a = −0.5), edge replicate, half-pixel centres.
pub fn bicubic_upsample(input: &Tensor, scale: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if scale == 0 {
        return invalid("scale must be at least 1");
    }
    if scale == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h * scale, w * scale);
    let tx = cubic_taps(w, scale);
    let ty = cubic_taps(h, scale);
    let mut out = vec![0.0f32; c * ho * wo];
    par::for_each_chunk_mut(&mut out, ho * wo, |ch, plane| {
        let src = &input.data[ch * h * w..(ch + 1) * h * w];
        let mut horiz = vec![0.0f64; h * wo];
        for y in 0..h {
            for (x, (idx, wts)) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * src[y * w + idx[k]] as f64;
                }
                horiz[y * wo + x] = acc;
            }
        }
        for (y, (idx, wts)) in ty.iter().enumerate() {
            for x in 0..wo {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * horiz[idx[k] * wo + x];
                }
                plane[y * wo + x] = acc as f32;
            }
        }
    });
    Tensor::new(vec![c, ho, wo], out)
}

pub const LN_EPS: f64 = 1e-5;

/// Normalizes one row in place and applies the affine map.
pub fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32]) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (i, v) in row.iter_mut().enumerate() {
        *v = ((*v as f64 - mean) * inv) as f32 * gamma[i] + beta[i];
    }
}

/// Layer norm over the last axis.
pub fn layer_norm(input: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    let c = *input
        .dims
        .last()
        .ok_or_else(|| Error::InvalidArgument("layer norm of a 0-d tensor".into()))?;
    if gamma.len() != c || beta.len() != c {
        return invalid(format!(
            "layer norm over {c} channels got {} / {} affine params",
            gamma.len(),
            beta.len()
        ));
    }
    let mut out = input.clone();
    if c > 0 {
        par::for_each_chunk_mut(&mut out.data, c, |_, row| layer_norm_row(row, gamma, beta));
    }
    Ok(out)
}

/// Learned affine part of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(c: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta)
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_dims(b)?;
    if a.numel() == 0 {
        return invalid("mse of empty tensors");
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// Returns `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// PSNR as printed in reports.
pub fn psnr_display(v: f64) -> f64 {
    v.min(100.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all channels with an 11×11 Gaussian window (σ = 1.5), valid
/// positions only. Images smaller than 11 pixels use the largest window that
/// fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.same_dims(b)?;
    let (c, h, w) = a.dims3()?;
    let win = 11.min(h).min(w);
    if win == 0 {
        return invalid("ssim of an empty image");
    }
    let g = gaussian_window(win, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (ho, wo) = (h - win + 1, w - win + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = g[dy] * g[dx];
                        let va = pa[(y + dy) * w + x + dx] as f64;
                        let vb = pb[(y + dy) * w + x + dx] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * ho * wo) as f64)
}

/// How the selection similarity normalizes token vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `⟨q/‖q‖, v/‖v‖⟩`.
    #[default]
    Cosine,
    /// `⟨q/‖q‖², v/‖v‖²⟩`.
    SquaredNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n1_res_blocks: usize,
    pub n2_res_blocks: usize,
    pub channels: usize,
    pub token_size: usize,
    /// Window side in tokens.
    pub window_size: usize,
    pub s_selected: usize,
    pub scale: usize,
    /// Frames in the temporal window, current frame included.
    pub temporal_window: usize,
    pub state_dim: usize,
    pub similarity: Similarity,
    pub single_stage_shuffle: bool,
    /// Search radius of the block-matching motion estimate used when no flow
    /// fields are supplied.
    pub flow_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n1_res_blocks: 2,
            n2_res_blocks: 13,
            channels: 32,
            token_size: 4,
            window_size: 8,
            s_selected: 3,
            scale: 4,
            temporal_window: 15,
            state_dim: 16,
            similarity: Similarity::Cosine,
            single_stage_shuffle: false,
            flow_radius: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("token_size", self.token_size),
            ("window_size", self.window_size),
            ("scale", self.scale),
            ("temporal_window", self.temporal_window),
            ("state_dim", self.state_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.s_selected + 1 > self.temporal_window {
            return invalid(format!(
                "s_selected = {} exceeds the {} previous frames of the temporal window",
                self.s_selected,
                self.temporal_window - 1
            ));
        }
        Ok(())
    }

    /// Checks that an `h × w` frame tiles into whole tokens and windows.
    pub fn check_frame(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ts = self.token_size;
        if h == 0 || w == 0 || !h.is_multiple_of(ts) || !w.is_multiple_of(ts) {
            return invalid(format!(
                "frame {h}x{w} is not divisible into {ts}x{ts} tokens"
            ));
        }
        let (ht, wt) = (h / ts, w / ts);
        if ht % self.window_size != 0 || wt % self.window_size != 0 {
            return invalid(format!(
                "token grid {ht}x{wt} is not divisible into {0}x{0} windows",
                self.window_size
            ));
        }
        Ok((ht, wt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[allow(clippy::needless_range_loop)]
    fn conv_reference(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
        let (cin, h, wd) = x.dims3().unwrap();
        let (cout, k) = (w.dims()[0], w.dims()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc + b[co];
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 6], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, &[0.0; 3], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_box_filter() {
        let x = Tensor::full(&[1, 6, 6], 0.5);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 1).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(y.data()[r * 6 + c], 4.5);
            }
        }
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let x = random(&[2, 5, 5], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b = [0.1, -0.2, 0.3];
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            assert_eq!(y.max_abs_diff(&conv_reference(&x, &w, &b, stride, pad)), 0.0);
        }
    }

    #[test]
    fn conv_dim_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, &[0.0], 1, 1).is_err());
        let w = Tensor::zeros(&[1, 2, 7, 7]);
        assert!(conv2d(&x, &w, &[0.0], 1, 0).is_err());
    }

    #[test]
    fn resblock_zero_is_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[8, 16, 16], &mut rng);
        let y = ResBlock::zeros(8).forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn resblock_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 6, 6], &mut rng);
        let mut blk = ResBlock::zeros(2);
        blk.conv1.weight = random(&[2, 2, 3, 3], &mut rng);
        blk.conv2.weight = random(&[2, 2, 3, 3], &mut rng);
        blk.conv1.bias = vec![0.05, -0.1];
        let mid = conv_reference(&x, &blk.conv1.weight, &blk.conv1.bias, 1, 1);
        let mid = relu(&mid);
        let out = conv_reference(&mid, &blk.conv2.weight, &blk.conv2.bias, 1, 1);
        let expect = x.add(&out).unwrap();
        assert_eq!(blk.forward(&x).unwrap(), expect);
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4, 5], &mut rng);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn bicubic_constant_and_ramp() {
        let x = Tensor::full(&[2, 5, 7], 0.37);
        let y = bicubic_upsample(&x, 4).unwrap();
        assert_eq!(y.dims(), &[2, 20, 28]);
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-6));

        let ramp = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f32 * 0.1);
        let up = bicubic_upsample(&ramp, 2).unwrap();
        // interior columns reproduce the ramp sampled at half-pixel centres
        for r in 0..16 {
            for c in 4..12 {
                let src = (c as f64 + 0.5) / 2.0 - 0.5;
                let v = up.data()[r * 16 + c] as f64;
                assert!((v - 0.1 * src).abs() <= 1e-5, "({r},{c}) {v}");
            }
        }
        assert_eq!(bicubic_upsample(&ramp, 1).unwrap(), ramp);
    }

    #[test]
    fn layer_norm_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[10, 16], &mut rng);
        let ln = LayerNorm::identity(16);
        let y = ln.forward(&x).unwrap();
        for row in y.data().chunks(16) {
            let m: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let v: f64 = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let flat = Tensor::full(&[1, 8], 3.0);
        assert!(ln_8().forward(&flat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn ln_8() -> LayerNorm {
        LayerNorm::identity(8)
    }

    #[test]
    fn psnr_ssim_examples() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::full(&[1, 16, 16], 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_display(f64::INFINITY), 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[3, 20, 20], &mut rng);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(&[1, 16, 8]), 1.0).is_err());
    }

    #[test]
    fn tstf_roundtrip_and_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap();
        let bytes = t.to_tstf_bytes();
        assert_eq!(&bytes[..4], &[0x54, 0x53, 0x54, 0x46]);
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 10 + 16 + 24);
        let back = Tensor::from_tstf_bytes(&bytes).unwrap();
        assert_eq!(back.to_tstf_bytes(), bytes);
        assert!(Tensor::from_tstf_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_tstf_bytes(&bad).is_err());
    }

    #[test]
    fn image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f32 / 255.0);
        let p = dir.path().join("a.ppm");
        write_image(&p, &rgb).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.dims(), &[3, 4, 5]);
        assert!(back.max_abs_diff(&rgb) < 1e-6);
        let gray = Tensor::from_fn(&[1, 3, 3], |i| i as f32 / 8.0);
        let p = dir.path().join("b.pgm");
        write_image(&p, &gray).unwrap();
        assert_eq!(read_image(&p).unwrap().dims(), &[1, 3, 3]);
    }

    #[test]
    fn config_checks() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.check_frame(32, 32).unwrap(), (8, 8));
        assert!(c.check_frame(30, 32).is_err());
        assert!(c.check_frame(16, 32).is_err());
        let bad = ModelConfig {
            s_selected: 5,
            temporal_window: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: ModelConfig = serde_json::from_str(r#"{"channels": 8}"#).unwrap();
        assert_eq!(parsed.channels, 8);
        assert_eq!(parsed.n2_res_blocks, 13);
    }
}
