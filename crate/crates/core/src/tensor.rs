//! Dense f32 kernels with a fixed accumulation order.
//!
//! Every reduction in this module, and every kernel the engine borrows from
//! it, sums in ascending index order. No FMA, no reassociation, no threads:
//! identical inputs give bit-identical outputs on every platform.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(op))
        }
    }
}

/// `c[i][j] = sum_p a[i][p] * b[p][j]`, summed in ascending `p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(TensorError::Dimension("matmul expects two matrices".into()));
    };
    if k != k2 {
        return Err(TensorError::Dimension(format!(
            "inner dimensions differ: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let src = &b.data[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
        }
    }
    let c = Tensor::new(vec![m, n], out)?;
    c.ensure_finite("matmul")?;
    Ok(c)
}

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::Geometry("kernel and stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(TensorError::Geometry(format!(
            "size {size} with kernel {kernel}, stride {stride}, padding {padding} does not tile"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution over a zero-padded input plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h: conv_out_dim(in_h, kernel, stride, padding)?,
            out_w: conv_out_dim(in_w, kernel, stride, padding)?,
        })
    }

    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.padding
    }

    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.padding
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Copies `channels` planes of `src` into `dst` surrounded by zeros.
    pub fn pad_into(&self, src: &[f32], channels: usize, dst: &mut Vec<f32>) {
        let (ph, pw) = (self.padded_h(), self.padded_w());
        dst.clear();
        dst.resize(channels * ph * pw, 0.0);
        for c in 0..channels {
            for y in 0..self.in_h {
                let s = &src[(c * self.in_h + y) * self.in_w..][..self.in_w];
                let d = &mut dst[(c * ph + y + self.padding) * pw + self.padding..][..self.in_w];
                d.copy_from_slice(s);
            }
        }
    }

    /// Inverse of [`pad_into`](Self::pad_into) for gradients: drops the border.
    pub fn unpad_add(&self, padded: &[f32], channels: usize, dst: &mut [f32]) {
        let (ph, pw) = (self.padded_h(), self.padded_w());
        for c in 0..channels {
            for y in 0..self.in_h {
                let s = &padded[(c * ph + y + self.padding) * pw + self.padding..][..self.in_w];
                let d = &mut dst[(c * self.in_h + y) * self.in_w..][..self.in_w];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += sv;
                }
            }
        }
    }
}

/// Accumulates one kernel slice (one input channel) into an output plane.
///
/// `acc[oy][ox] += w[ky][kx] * plane[oy*s+ky][ox*s+kx]` visiting `ky`, then
/// `kx`, skipping zero weights. Returns the number of multiplies executed.
pub fn conv_accumulate_slice(
    geom: &ConvGeometry,
    plane: &[f32],
    kernel: &[f32],
    acc: &mut [f32],
) -> u64 {
    let pw = geom.padded_w();
    let k = geom.kernel;
    let s = geom.stride;
    let mut macs = 0u64;
    for ky in 0..k {
        for kx in 0..k {
            let w = kernel[ky * k + kx];
            if w == 0.0 {
                continue;
            }
            macs += geom.out_positions() as u64;
            for oy in 0..geom.out_h {
                let row = &plane[(oy * s + ky) * pw + kx..];
                let dst = &mut acc[oy * geom.out_w..(oy + 1) * geom.out_w];
                if s == 1 {
                    for (d, &x) in dst.iter_mut().zip(&row[..geom.out_w]) {
                        *d += w * x;
                    }
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d += w * row[ox * s];
                    }
                }
            }
        }
    }
    macs
}

/// Weight gradient and input gradient of one kernel slice.
///
/// `dkernel[ky][kx] += sum_{oy,ox} dout[oy][ox] * plane[..]` and, if
/// `dplane` is given, `dplane[..] += w[ky][kx] * dout[oy][ox]`.
pub fn conv_backward_slice(
    geom: &ConvGeometry,
    plane: &[f32],
    kernel: &[f32],
    dout: &[f32],
    dkernel: &mut [f32],
    mut dplane: Option<&mut [f32]>,
) {
    let pw = geom.padded_w();
    let k = geom.kernel;
    let s = geom.stride;
    for ky in 0..k {
        for kx in 0..k {
            let w = kernel[ky * k + kx];
            let mut g = 0.0f32;
            for oy in 0..geom.out_h {
                let base = (oy * s + ky) * pw + kx;
                let drow = &dout[oy * geom.out_w..(oy + 1) * geom.out_w];
                if s == 1 {
                    let row = &plane[base..base + geom.out_w];
                    for (&d, &x) in drow.iter().zip(row) {
                        g += d * x;
                    }
                } else {
                    for (ox, &d) in drow.iter().enumerate() {
                        g += d * plane[base + ox * s];
                    }
                }
                if w != 0.0 {
                    if let Some(dp) = dplane.as_deref_mut() {
                        if s == 1 {
                            for (t, &d) in dp[base..base + geom.out_w].iter_mut().zip(drow) {
                                *t += w * d;
                            }
                        } else {
                            for (ox, &d) in drow.iter().enumerate() {
                                dp[base + ox * s] += w * d;
                            }
                        }
                    }
                }
            }
            dkernel[ky * k + kx] += g;
        }
    }
}

/// 2-D convolution of a `C_in x H x W` input by `C_out x C_in x k x k` kernels.
///
/// `channel_mask[o * C_in + i] == false` removes the `(o, i)` slice entirely.
/// Each output sums over in-channel, then kernel row, then kernel column.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    channel_mask: &[bool],
) -> Result<Tensor> {
    let &[c_in, h, w] = input.shape() else {
        return Err(TensorError::Dimension("conv2d input must be C x H x W".into()));
    };
    let &[c_out, kc, kh, kw] = kernels.shape() else {
        return Err(TensorError::Dimension("conv2d kernels must be 4-D".into()));
    };
    if kc != c_in || kh != kw {
        return Err(TensorError::Dimension(format!(
            "kernels {:?} do not fit input {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    if channel_mask.len() != c_out * c_in {
        return Err(TensorError::Dimension(format!(
            "channel mask has {} entries, expected {}",
            channel_mask.len(),
            c_out * c_in
        )));
    }
    let geom = ConvGeometry::new(h, w, kh, stride, padding)?;
    let mut padded = Vec::new();
    geom.pad_into(input.data(), c_in, &mut padded);
    let plane_len = geom.padded_h() * geom.padded_w();
    let out_len = geom.out_positions();
    let mut out = vec![0.0f32; c_out * out_len];
    for o in 0..c_out {
        let acc = &mut out[o * out_len..(o + 1) * out_len];
        for i in 0..c_in {
            if !channel_mask[o * c_in + i] {
                continue;
            }
            let kernel = &kernels.data()[(o * c_in + i) * kh * kw..][..kh * kw];
            conv_accumulate_slice(&geom, &padded[i * plane_len..][..plane_len], kernel, acc);
        }
    }
    let t = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
    t.ensure_finite("conv2d")?;
    Ok(t)
}

/// 2x2 max pooling over one plane. Writes maxima and the row-major window
/// offset (0..4) of the first maximum.
pub fn maxpool2_plane(plane: &[f32], h: usize, w: usize, out: &mut [f32], argmax: &mut [u8]) {
    let ow = w / 2;
    for oy in 0..h / 2 {
        for ox in 0..ow {
            let idx = [
                (2 * oy) * w + 2 * ox,
                (2 * oy) * w + 2 * ox + 1,
                (2 * oy + 1) * w + 2 * ox,
                (2 * oy + 1) * w + 2 * ox + 1,
            ];
            let mut best = 0u8;
            let mut val = plane[idx[0]];
            for (t, &i) in idx.iter().enumerate().skip(1) {
                if plane[i] > val {
                    val = plane[i];
                    best = t as u8;
                }
            }
            out[oy * ow + ox] = val;
            argmax[oy * ow + ox] = best;
        }
    }
}

/// Offset in the input plane of window slot `slot` for output `(oy, ox)`.
pub fn maxpool2_source(w: usize, oy: usize, ox: usize, slot: u8) -> usize {
    let dy = (slot / 2) as usize;
    let dx = (slot % 2) as usize;
    (2 * oy + dy) * w + 2 * ox + dx
}

/// Max pooling with a 2x2 window and stride 2 over a `C x H x W` tensor.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let &[c, h, w] = input.shape() else {
        return Err(TensorError::Dimension("maxpool2 input must be C x H x W".into()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Geometry(format!("maxpool2 needs even extents, got {h}x{w}")));
    }
    let plane_out = (h / 2) * (w / 2);
    let mut out = vec![0.0f32; c * plane_out];
    let mut arg = vec![0u8; c * plane_out];
    for ch in 0..c {
        maxpool2_plane(
            &input.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            &mut out[ch * plane_out..(ch + 1) * plane_out],
            &mut arg[ch * plane_out..(ch + 1) * plane_out],
        );
    }
    Ok((Tensor::new(vec![c, h / 2, w / 2], out)?, arg))
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream.
///
/// Draw number `c` is `mix64(seed + (c + 1) * 0x9E3779B97F4A7C15)`, which is
/// exactly the `c`-th output of a SplitMix64 generator seeded with `seed`.
/// The state is just `(seed, counter)`, so any position can be reproduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// An independent stream derived from this seed and a label.
    pub fn fork(&self, label: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(label.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform integer in `0..bound` (multiply-shift reduction).
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard normal sample per draw: Box-Muller on the two 32-bit
    /// halves of a single output.
    pub fn next_normal(&mut self) -> f64 {
        let x = self.next_u64();
        let u1 = ((x >> 32) as f64 + 0.5) / 4_294_967_296.0;
        let u2 = (x & 0xFFFF_FFFF) as f64 / 4_294_967_296.0;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// He initialisation: `N(0, sqrt(2 / fan_in))`, one draw per element.
pub fn he_init(shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.next_normal() * std) as f32).collect();
    Tensor { shape, data }
}
