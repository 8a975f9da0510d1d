//! Hand-rolled f32 layers with explicit forward/backward passes. Convolution
//! is im2col + gemm; the input gradient is computed as a correlation with the
//! flipped kernel (its own im2col + gemm), which keeps every gemm in a shape
//! the kernel library handles well and avoids a scatter-add fold.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

pub(crate) const LEAKY_SLOPE: f32 = 0.1;

/// 2D convolution with square kernel (1 or 3), stride 1, same padding.
/// Weights are stored gemm-ready as `[cout, cin * k * k]`.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn seeded(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        Self::seeded_with_std(cin, cout, k, rng, (2.0 / fan_in).sqrt())
    }

    /// Seeded init with an explicit weight standard deviation. Output heads
    /// use a small std so the initial transform field stays near identity —
    /// a saturated random field throws instances far off target, where the
    /// warp loss has no gradient to pull them back.
    pub fn seeded_with_std(
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
        std: f32,
    ) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are used");
        let w = Array2::from_shape_fn((cout, cin * k * k), |_| sample_normal(rng) * std);
        Conv2d { w, b: Array1::zeros(cout), cin, cout, k }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.dim()),
            cin: self.cin,
            cout: self.cout,
            k: self.k,
        }
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        self.forward_cols(x).0
    }

    /// Forward pass that also hands back the unfolded columns (3x3 only) so
    /// the backward pass does not need to rebuild them.
    pub fn forward_cols(&self, x: &Array3<f32>) -> (Array3<f32>, Option<Array2<f32>>) {
        let (cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let hw = h * w;
        let (mut y2, cols) = if self.k == 1 {
            let x2 = x.view().into_shape_with_order((cin, hw)).unwrap();
            (self.w.dot(&x2), None)
        } else {
            let cols = im2col3(x);
            (self.w.dot(&cols), Some(cols))
        };
        for (mut row, &bias) in y2.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
            row += bias;
        }
        (y2.into_shape_with_order((self.cout, h, w)).unwrap(), cols)
    }

    /// Accumulates dW/db into `grad` and returns dx. `cols` are the columns
    /// cached by [`Self::forward_cols`]; they are rebuilt when absent.
    pub fn backward(
        &self,
        x: &Array3<f32>,
        cols: Option<&Array2<f32>>,
        dy: &Array3<f32>,
        grad: &mut Conv2d,
    ) -> Array3<f32> {
        let (cin, h, w) = x.dim();
        let hw = h * w;
        let dy2 = dy.view().into_shape_with_order((self.cout, hw)).unwrap();
        grad.b += &dy2.sum_axis(Axis(1));
        if self.k == 1 {
            let x2 = x.view().into_shape_with_order((cin, hw)).unwrap();
            grad.w += &dy2.dot(&x2.t());
            return self.w.t().dot(&dy2).into_shape_with_order((cin, h, w)).unwrap();
        }
        match cols {
            Some(c) => grad.w += &dy2.dot(&c.t()),
            None => grad.w += &dy2.dot(&im2col3(x).t()),
        }
        // dX as a correlation: conv(dy, flipped kernel), expressed as its own
        // im2col + gemm.
        let w_flipped = self.flipped_weights();
        let dy_cols = im2col3(dy);
        w_flipped.dot(&dy_cols).into_shape_with_order((cin, h, w)).unwrap()
    }

    /// `[cin, cout*9]` weight matrix with spatially flipped taps, the kernel
    /// of the input-gradient correlation.
    fn flipped_weights(&self) -> Array2<f32> {
        debug_assert_eq!(self.k, 3);
        let mut out = Array2::<f32>::zeros((self.cin, self.cout * 9));
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for kr in 0..3 {
                    for kc in 0..3 {
                        out[[ci, (co * 3 + kr) * 3 + kc]] =
                            self.w[[co, (ci * 3 + (2 - kr)) * 3 + (2 - kc)]];
                    }
                }
            }
        }
        out
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

/// Unfold a `[cin, h, w]` tensor into `[cin*9, h*w]` columns for a 3x3
/// same-padded convolution. Row-contiguous copies keep this memory bound
/// rather than branch bound.
fn im2col3(x: &Array3<f32>) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let hw = h * w;
    let mut cols = Array2::<f32>::zeros((cin * 9, hw));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..cin {
        for kr in 0..3 {
            for kc in 0..3 {
                let row_base = ((ci * 3 + kr) * 3 + kc) * hw;
                let (c_lo, c_hi) = match kc {
                    0 => (1, w),
                    1 => (0, w),
                    _ => (0, w - 1),
                };
                for r in 0..h {
                    let sr = r + kr;
                    if sr < 1 || sr > h {
                        continue;
                    }
                    let sr = sr - 1;
                    let d0 = row_base + r * w + c_lo;
                    let s0 = ci * hw + sr * w + (c_lo + kc) - 1;
                    let len = c_hi - c_lo;
                    dst[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
    cols
}

/// Group normalization with affine parameters.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub groups: usize,
    pub channels: usize,
}

pub(crate) struct GnCache {
    pub xhat: Array3<f32>,
    pub inv_std: Vec<f32>,
}

const GN_EPS: f32 = 1e-5;

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        let groups = if channels % 8 == 0 {
            8
        } else if channels % 4 == 0 {
            4
        } else {
            1
        };
        GroupNorm { gamma: Array1::ones(channels), beta: Array1::zeros(channels), groups, channels }
    }

    pub fn zeros_like(&self) -> Self {
        GroupNorm {
            gamma: Array1::zeros(self.channels),
            beta: Array1::zeros(self.channels),
            groups: self.groups,
            channels: self.channels,
        }
    }

    fn group_stats(&self, x: &Array3<f32>) -> Vec<(f32, f32)> {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f32;
        let xs = x.as_slice().expect("standard layout");
        let hw = h * w;
        (0..self.groups)
            .map(|g| {
                let s = &xs[g * per * hw..(g + 1) * per * hw];
                let mean = s.iter().sum::<f32>() / m;
                let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m;
                (mean, 1.0 / (var + GN_EPS).sqrt())
            })
            .collect()
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, GnCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let stats = self.group_stats(x);
        let per = c / self.groups;
        let hw = h * w;
        let mut xhat = Array3::<f32>::zeros((c, h, w));
        let mut y = Array3::<f32>::zeros((c, h, w));
        {
            let xs = x.as_slice().unwrap();
            let hs = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ch in 0..c {
                let (mean, istd) = stats[ch / per];
                let (ga, be) = (self.gamma[ch], self.beta[ch]);
                let base = ch * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean) * istd;
                    hs[i] = xh;
                    ys[i] = ga * xh + be;
                }
            }
        }
        (y, GnCache { xhat, inv_std: stats.iter().map(|&(_, i)| i).collect() })
    }

    /// Forward without keeping the normalization cache.
    pub fn forward_infer(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let stats = self.group_stats(x);
        let per = c / self.groups;
        let hw = h * w;
        let mut y = Array3::<f32>::zeros((c, h, w));
        {
            let xs = x.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ch in 0..c {
                let (mean, istd) = stats[ch / per];
                let (ga, be) = (self.gamma[ch], self.beta[ch]);
                let base = ch * hw;
                for i in base..base + hw {
                    ys[i] = ga * (xs[i] - mean) * istd + be;
                }
            }
        }
        y
    }

    pub fn backward(&self, cache: &GnCache, dy: &Array3<f32>, grad: &mut GroupNorm) -> Array3<f32> {
        let (c, h, w) = dy.dim();
        let per = c / self.groups;
        let hw = h * w;
        let m = (per * hw) as f32;
        let dys = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array3::<f32>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for g in 0..self.groups {
            let mut s1 = 0.0f32;
            let mut s2 = 0.0f32;
            for ch in g * per..(g + 1) * per {
                let ga = self.gamma[ch];
                let base = ch * hw;
                let mut db = 0.0f32;
                let mut dg = 0.0f32;
                for i in base..base + hw {
                    db += dys[i];
                    dg += dys[i] * hs[i];
                    let dxh = dys[i] * ga;
                    s1 += dxh;
                    s2 += dxh * hs[i];
                }
                grad.beta[ch] += db;
                grad.gamma[ch] += dg;
            }
            let istd = cache.inv_std[g];
            for ch in g * per..(g + 1) * per {
                let ga = self.gamma[ch];
                let base = ch * hw;
                for i in base..base + hw {
                    let dxh = dys[i] * ga;
                    dxs[i] = istd * (dxh - (s1 + hs[i] * s2) / m);
                }
            }
        }
        dx
    }
}

pub(crate) fn leaky_relu(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
}

/// Backward through leaky ReLU given the forward *output* (the sign of the
/// output matches the sign of the input for any positive slope).
pub(crate) fn leaky_relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    for (d, &out) in dx.iter_mut().zip(y.iter()) {
        if out <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    dx
}

/// 2x2 max pooling; ties resolve to the first maximum in row-major order.
pub(crate) fn max_pool2(x: &Array3<f32>) -> (Array3<f32>, Array3<u8>) {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<f32>::zeros((c, oh, ow));
    let mut idx = Array3::<u8>::zeros((c, oh, ow));
    let xs = x.as_slice().expect("standard layout");
    {
        let ys = y.as_slice_mut().unwrap();
        let is = idx.as_slice_mut().unwrap();
        for ci in 0..c {
            for r in 0..oh {
                let top = ci * h * w + 2 * r * w;
                let bot = top + w;
                let out = ci * oh * ow + r * ow;
                for cc in 0..ow {
                    let quad = [xs[top + 2 * cc], xs[top + 2 * cc + 1], xs[bot + 2 * cc], xs[bot + 2 * cc + 1]];
                    let mut best = quad[0];
                    let mut which = 0u8;
                    for (k, &v) in quad.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            which = k as u8;
                        }
                    }
                    ys[out + cc] = best;
                    is[out + cc] = which;
                }
            }
        }
    }
    (y, idx)
}

pub(crate) fn max_pool2_backward(
    dy: &Array3<f32>,
    idx: &Array3<u8>,
    h: usize,
    w: usize,
) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let dys = dy.as_slice().unwrap();
    let is = idx.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for r in 0..oh {
            let top = ci * h * w + 2 * r * w;
            let bot = top + w;
            let src = ci * oh * ow + r * ow;
            for cc in 0..ow {
                let which = is[src + cc] as usize;
                let dst = if which < 2 { top + 2 * cc + which } else { bot + 2 * cc + which - 2 };
                dxs[dst] = dys[src + cc];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub(crate) fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    {
        let ys = y.as_slice_mut().unwrap();
        let w2 = 2 * w;
        for ci in 0..c {
            for r in 0..h {
                let src = ci * h * w + r * w;
                let d0 = ci * 4 * h * w + 2 * r * w2;
                for cc in 0..w {
                    let v = xs[src + cc];
                    ys[d0 + 2 * cc] = v;
                    ys[d0 + 2 * cc + 1] = v;
                }
                let (first, second) = ys[d0..d0 + 2 * w2].split_at_mut(w2);
                second.copy_from_slice(first);
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for r in 0..h {
            let top = ci * h2 * w2 + 2 * r * w2;
            let bot = top + w2;
            let dst = ci * h * w + r * w;
            for cc in 0..w {
                dxs[dst + cc] = dys[top + 2 * cc]
                    + dys[top + 2 * cc + 1]
                    + dys[bot + 2 * cc]
                    + dys[bot + 2 * cc + 1];
            }
        }
    }
    dx
}

/// Recurrent residual block: a 1x1 projection to the output width, then one
/// shared 3x3 conv + group norm + leaky ReLU applied `steps` times with the
/// projection re-injected each step, and a residual sum at the end:
///
/// ```text
/// x0 = proj(x)
/// h_0 = act(gn(conv(x0)))
/// h_t = act(gn(conv(x0 + h_{t-1})))
/// y   = x0 + h_last
/// ```
#[derive(Debug, Clone)]
pub(crate) struct RrBlock {
    pub proj: Conv2d,
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub steps: usize,
}

pub(crate) struct RrCache {
    x0: Array3<f32>,
    step_inputs: Vec<Array3<f32>>,
    step_cols: Vec<Option<Array2<f32>>>,
    gn_caches: Vec<GnCache>,
    step_acts: Vec<Array3<f32>>,
}

impl RrBlock {
    pub fn seeded(cin: usize, cout: usize, steps: usize, rng: &mut ChaCha8Rng) -> Self {
        // The projection is a plain linear mixer (no activation follows it
        // directly), so it gets variance-preserving init; the recurrent conv
        // feeds a group norm, which makes its init scale immaterial.
        RrBlock {
            proj: Conv2d::seeded_with_std(cin, cout, 1, rng, (1.0 / cin as f32).sqrt()),
            conv: Conv2d::seeded(cout, cout, 3, rng),
            norm: GroupNorm::new(cout),
            steps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        RrBlock {
            proj: self.proj.zeros_like(),
            conv: self.conv.zeros_like(),
            norm: self.norm.zeros_like(),
            steps: self.steps,
        }
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, RrCache) {
        let x0 = self.proj.forward(x);
        let mut step_inputs = Vec::with_capacity(self.steps);
        let mut step_cols = Vec::with_capacity(self.steps);
        let mut gn_caches = Vec::with_capacity(self.steps);
        let mut step_acts: Vec<Array3<f32>> = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let inp = if t == 0 { x0.clone() } else { &x0 + step_acts.last().unwrap() };
            let (z, cols) = self.conv.forward_cols(&inp);
            let (mut g, gn_cache) = self.norm.forward(&z);
            leaky_relu(&mut g);
            step_inputs.push(inp);
            step_cols.push(cols);
            gn_caches.push(gn_cache);
            step_acts.push(g);
        }
        let y = &x0 + step_acts.last().unwrap();
        (y, RrCache { x0, step_inputs, step_cols, gn_caches, step_acts })
    }

    /// Forward without keeping any backward state.
    pub fn forward_infer(&self, x: &Array3<f32>) -> Array3<f32> {
        let x0 = self.proj.forward(x);
        let mut h: Option<Array3<f32>> = None;
        for _ in 0..self.steps {
            let inp = match &h {
                None => x0.clone(),
                Some(prev) => &x0 + prev,
            };
            let z = self.conv.forward(&inp);
            let mut g = self.norm.forward_infer(&z);
            leaky_relu(&mut g);
            h = Some(g);
        }
        &x0 + &h.expect("steps >= 1")
    }

    pub fn backward(
        &self,
        x: &Array3<f32>,
        cache: &RrCache,
        dy: &Array3<f32>,
        grad: &mut RrBlock,
    ) -> Array3<f32> {
        let mut dx0 = dy.clone();
        let mut dh = dy.clone();
        for t in (0..self.steps).rev() {
            let dg = leaky_relu_backward(&cache.step_acts[t], &dh);
            let dz = self.norm.backward(&cache.gn_caches[t], &dg, &mut grad.norm);
            let dinp = self.conv.backward(
                &cache.step_inputs[t],
                cache.step_cols[t].as_ref(),
                &dz,
                &mut grad.conv,
            );
            if t == 0 {
                dx0 += &dinp;
            } else {
                dx0 += &dinp;
                dh = dinp;
            }
        }
        let _ = &cache.x0;
        self.proj.backward(x, None, &dx0, &mut grad.proj)
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        out.push(self.proj.w.as_slice().unwrap());
        out.push(self.proj.b.as_slice().unwrap());
        out.push(self.conv.w.as_slice().unwrap());
        out.push(self.conv.b.as_slice().unwrap());
        out.push(self.norm.gamma.as_slice().unwrap());
        out.push(self.norm.beta.as_slice().unwrap());
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f32]>) {
        out.push(self.proj.w.as_slice_mut().unwrap());
        out.push(self.proj.b.as_slice_mut().unwrap());
        out.push(self.conv.w.as_slice_mut().unwrap());
        out.push(self.conv.b.as_slice_mut().unwrap());
        out.push(self.norm.gamma.as_slice_mut().unwrap());
        out.push(self.norm.beta.as_slice_mut().unwrap());
    }
}
