//! Forward and backward kernels over raw `(n, c, h, w)` buffers.
//!
//! These are the numeric bodies behind the [`Graph`](super::Graph) ops. They
//! do no shape validation of their own beyond debug assertions; the graph
//! validates before calling.

use rayon::prelude::*;

/// sqrt(2/pi) for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// d/dx evaluated from the input `x` (and output `y` where cheaper).
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn macs(&self) -> u64 {
        (self.k * self.k * self.cin_per_group() * self.c_out * self.oh * self.ow * self.n) as u64
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + k_off - pad < in_len`.
#[inline]
fn valid_range(
    k_off: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len + pad - k_off - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let cpg = g.cin_per_group();
    let cpo = g.cout_per_group();
    let kk = g.k * g.k;
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, o_plane)| {
            let n = idx / g.c_out;
            let o = idx % g.c_out;
            let gi = o / cpo;
            o_plane.fill(bias.map_or(0.0, |b| b[o]));
            for ci in 0..cpg {
                let cin = gi * cpg + ci;
                let x_plane = &x[(n * g.c_in + cin) * plane_in..][..plane_in];
                let w_base = (o * cpg + ci) * kk;
                if g.pointwise() {
                    let wv = wt[w_base];
                    for (ov, xv) in o_plane.iter_mut().zip(x_plane) {
                        *ov += wv * xv;
                    }
                    continue;
                }
                for kh in 0..g.k {
                    let (y_lo, y_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = wt[w_base + kh * g.k + kw];
                        let (x_lo, x_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + kh - g.pad;
                            let x_row = &x_plane[iy * g.w..(iy + 1) * g.w];
                            let o_row = &mut o_plane[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let off = kw as isize - g.pad as isize;
                                let xs = &x_row[(x_lo as isize + off) as usize
                                    ..(x_hi as isize + off) as usize];
                                for (ov, xv) in o_row[x_lo..x_hi].iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    o_row[ox] += wv * x_row[ox * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
}

pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let cpg = g.cin_per_group();
    let cpo = g.cout_per_group();
    let kk = g.k * g.k;

    // dx: one input plane per task
    dx.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dx_plane)| {
            let n = idx / g.c_in;
            let cin = idx % g.c_in;
            let gi = cin / cpg;
            let ci = cin % cpg;
            for o in gi * cpo..(gi + 1) * cpo {
                let dy_plane = &dy[(n * g.c_out + o) * plane_out..][..plane_out];
                let w_base = (o * cpg + ci) * kk;
                if g.pointwise() {
                    let wv = wt[w_base];
                    for (d, gy) in dx_plane.iter_mut().zip(dy_plane) {
                        *d += wv * gy;
                    }
                    continue;
                }
                for kh in 0..g.k {
                    let (y_lo, y_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = wt[w_base + kh * g.k + kw];
                        let (x_lo, x_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + kh - g.pad;
                            let dy_row = &dy_plane[oy * g.ow..(oy + 1) * g.ow];
                            let dx_row = &mut dx_plane[iy * g.w..(iy + 1) * g.w];
                            for ox in x_lo..x_hi {
                                dx_row[ox * g.stride + kw - g.pad] += wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        });

    // dw: one output channel's filter bank per task
    dw.par_chunks_mut(cpg * kk)
        .enumerate()
        .for_each(|(o, dw_o)| {
            let gi = o / cpo;
            for n in 0..g.n {
                let dy_plane = &dy[(n * g.c_out + o) * plane_out..][..plane_out];
                for ci in 0..cpg {
                    let cin = gi * cpg + ci;
                    let x_plane = &x[(n * g.c_in + cin) * plane_in..][..plane_in];
                    if g.pointwise() {
                        dw_o[ci] += dy_plane
                            .iter()
                            .zip(x_plane)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        continue;
                    }
                    for kh in 0..g.k {
                        let (y_lo, y_hi) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                        for kw in 0..g.k {
                            let (x_lo, x_hi) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                            let mut acc = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = oy * g.stride + kh - g.pad;
                                let dy_row = &dy_plane[oy * g.ow..(oy + 1) * g.ow];
                                let x_row = &x_plane[iy * g.w..(iy + 1) * g.w];
                                for ox in x_lo..x_hi {
                                    acc += dy_row[ox] * x_row[ox * g.stride + kw - g.pad];
                                }
                            }
                            dw_o[ci * kk + kh * g.k + kw] += acc;
                        }
                    }
                }
            }
        });

    if let Some(db) = db {
        for n in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy[(n * g.c_out + o) * plane_out..][..plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layer norm over the channel axis, per spatial position

/// Returns per-(n, position) `(mean, rstd)` pairs and writes the normalized,
/// affine-transformed output.
pub fn layernorm_forward(
    shape: [usize; 4],
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> Vec<(f64, f64)> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut stats = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += x[base + ch * hw + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = x[base + ch * hw + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ch in 0..c {
                let i = base + ch * hw + p;
                out[i] = (x[i] - mean) * rstd * gamma[ch] + beta[ch];
            }
            stats.push((mean, rstd));
        }
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    shape: [usize; 4],
    x: &[f64],
    gamma: &[f64],
    stats: &[(f64, f64)],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let cf = c as f64;
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let (mean, rstd) = stats[b * hw + p];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for ch in 0..c {
                let i = base + ch * hw + p;
                let xhat = (x[i] - mean) * rstd;
                let g = dy[i] * gamma[ch];
                sum_g += g;
                sum_gx += g * xhat;
                dgamma[ch] += dy[i] * xhat;
                dbeta[ch] += dy[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                let xhat = (x[i] - mean) * rstd;
                let g = dy[i] * gamma[ch];
                dx[i] += rstd * (g - sum_g / cf - xhat * sum_gx / cf);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// windowed multi-head attention

/// Geometry of a batched window attention call. Inputs are laid out as
/// `(windows, heads*dim, M, M)`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub windows: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dk: usize,
    pub dv: usize,
}

/// Shared inputs of the attention kernels.
pub struct AttnArgs<'a> {
    pub geom: AttnGeom,
    pub scale: f64,
    /// `(heads, (2M-1)^2)` bias table, flattened.
    pub table: Option<&'a [f64]>,
    /// `tokens * tokens` lookup into one head's table row.
    pub rel_index: &'a [usize],
    /// Region id per `(window-in-image, token)`; tokens attend only within
    /// their own region.
    pub regions: Option<&'a [u32]>,
    pub windows_per_image: usize,
}

impl AttnArgs<'_> {
    #[inline]
    fn allowed(&self, win: usize, i: usize, j: usize) -> bool {
        match self.regions {
            None => true,
            Some(r) => {
                let base = (win % self.windows_per_image) * self.geom.tokens;
                r[base + i] == r[base + j]
            }
        }
    }

    /// Attention probabilities for one `(window, head)`, row-major `T x T`.
    pub fn probs(&self, q: &[f64], k: &[f64], win: usize, head: usize, out: &mut [f64]) {
        let g = self.geom;
        let t = g.tokens;
        let q_base = (win * g.heads + head) * g.dk * t;
        let k_base = q_base;
        out.fill(0.0);
        for d in 0..g.dk {
            let qd = &q[q_base + d * t..][..t];
            let kd = &k[k_base + d * t..][..t];
            for i in 0..t {
                let qv = qd[i] * self.scale;
                let row = &mut out[i * t..(i + 1) * t];
                for (r, kv) in row.iter_mut().zip(kd) {
                    *r += qv * kv;
                }
            }
        }
        let tt = self.rel_index.iter().max().map_or(0, |m| m + 1);
        for i in 0..t {
            let row = &mut out[i * t..(i + 1) * t];
            if let Some(table) = self.table {
                let tab = &table[head * tt..(head + 1) * tt];
                for (j, r) in row.iter_mut().enumerate() {
                    *r += tab[self.rel_index[i * t + j]];
                }
            }
            if self.regions.is_some() {
                for (j, r) in row.iter_mut().enumerate() {
                    if !self.allowed(win, i, j) {
                        *r = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_row(row);
        }
    }
}

/// Returns the output and the saved probabilities `(windows, heads, T, T)`.
pub fn window_attention_forward(
    args: &AttnArgs,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let g = args.geom;
    let t = g.tokens;
    let mut out = vec![0.0; g.windows * g.heads * g.dv * t];
    let mut probs = vec![0.0; g.windows * g.heads * t * t];
    out.par_chunks_mut(g.heads * g.dv * t)
        .zip(probs.par_chunks_mut(g.heads * t * t))
        .enumerate()
        .for_each(|(win, (o_win, p_win))| {
            for head in 0..g.heads {
                let p = &mut p_win[head * t * t..(head + 1) * t * t];
                args.probs(q, k, win, head, p);
                let v_base = (win * g.heads + head) * g.dv * t;
                for e in 0..g.dv {
                    let ve = &v[v_base + e * t..][..t];
                    let oe = &mut o_win[(head * g.dv + e) * t..][..t];
                    for (i, o) in oe.iter_mut().enumerate() {
                        *o = p[i * t..(i + 1) * t]
                            .iter()
                            .zip(ve)
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
            }
        });
    (out, probs)
}

/// Gradients for q, k, v and (optionally) the bias table.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_backward(
    args: &AttnArgs,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    dtable: Option<&mut [f64]>,
) {
    let g = args.geom;
    let t = g.tokens;
    let tt = args.rel_index.iter().max().map_or(0, |m| m + 1);
    let mut dtable = dtable;
    let mut dp = vec![0.0; t * t];
    for win in 0..g.windows {
        for head in 0..g.heads {
            let p = &probs[(win * g.heads + head) * t * t..][..t * t];
            let v_base = (win * g.heads + head) * g.dv * t;
            let qk_base = (win * g.heads + head) * g.dk * t;
            dp.fill(0.0);
            for e in 0..g.dv {
                let ve = &v[v_base + e * t..][..t];
                let de = &dout[v_base + e * t..][..t];
                let dve = &mut dv[v_base + e * t..][..t];
                for i in 0..t {
                    let gi = de[i];
                    let row = &mut dp[i * t..(i + 1) * t];
                    let prow = &p[i * t..(i + 1) * t];
                    for j in 0..t {
                        row[j] += gi * ve[j];
                        dve[j] += prow[j] * gi;
                    }
                }
            }
            // dp becomes dS (softmax backward), in place
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let row = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = prow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    row[j] = prow[j] * (row[j] - dot);
                }
            }
            if let Some(dt) = dtable.as_deref_mut() {
                let tab = &mut dt[head * tt..(head + 1) * tt];
                for (idx, ds) in args.rel_index.iter().zip(dp.iter()) {
                    tab[*idx] += ds;
                }
            }
            for d in 0..g.dk {
                let qd = &q[qk_base + d * t..][..t];
                let kd = &k[qk_base + d * t..][..t];
                for i in 0..t {
                    let row = &dp[i * t..(i + 1) * t];
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += row[j] * kd[j];
                        dk[qk_base + d * t + j] += args.scale * row[j] * qd[i];
                    }
                    dq[qk_base + d * t + i] += args.scale * acc;
                }
            }
        }
    }
}
