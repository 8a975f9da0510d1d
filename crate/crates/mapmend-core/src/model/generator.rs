//! The three-headed generator: a recurrent-residual U-Net over the 4-channel
//! concatenation of image and noisy mask, with a shared decoder trunk and
//! three 1x1 heads — tanh for the transform field, sigmoid for the missing
//! and obsolete segmentation masks.

use super::layers::{
    max_pool2, max_pool2_backward, upsample2, upsample2_backward, GnCache, GroupNorm, RrBlock,
    RrCache,
};
use super::{GeneratorConfig, ModelError};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Generator {
    pub(crate) config: GeneratorConfig,
    enc: Vec<RrBlock>,
    bottleneck: RrBlock,
    /// Decoder blocks stored shallow-to-deep (index l mirrors enc[l]).
    dec: Vec<RrBlock>,
    /// Normalizes the decoder output so head activations stay in a sane
    /// range for any depth/width configuration.
    trunk_norm: GroupNorm,
    head_field: super::layers::Conv2d,
    head_missing: super::layers::Conv2d,
    head_obsolete: super::layers::Conv2d,
}

/// Activations needed to run the backward pass.
pub struct ForwardCache {
    enc_in: Vec<Array3<f32>>,
    enc_caches: Vec<RrCache>,
    enc_out: Vec<Array3<f32>>,
    pool_idx: Vec<Array3<u8>>,
    bott_in: Array3<f32>,
    bott_cache: RrCache,
    dec_in: Vec<Array3<f32>>,
    dec_caches: Vec<RrCache>,
    trunk_gn: GnCache,
    trunk_out: Array3<f32>,
}

/// Raw f32 head outputs (post-activation) plus the cache.
pub struct TrainForward {
    pub field_raw: Array3<f32>,
    pub missing: Array2<f32>,
    pub obsolete: Array2<f32>,
    pub cache: ForwardCache,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.parameter_seed);
        let base = config.base_channels;
        let depth = config.depth;
        let steps = config.recurrence_steps;
        let mut enc = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { config.input_channels } else { base << (l - 1) };
            enc.push(RrBlock::seeded(cin, base << l, steps, &mut rng));
        }
        let bottleneck = RrBlock::seeded(base << (depth - 1), base << depth, steps, &mut rng);
        let mut dec = Vec::with_capacity(depth);
        for l in 0..depth {
            let deeper = base << (l + 1);
            let skip = base << l;
            dec.push(RrBlock::seeded(skip + deeper, skip, steps, &mut rng));
        }
        let trunk_norm = GroupNorm::new(base);
        let head_field = super::layers::Conv2d::seeded_with_std(base, 4, 1, &mut rng, 0.01);
        let mut head_missing = super::layers::Conv2d::seeded_with_std(base, 1, 1, &mut rng, 0.01);
        let mut head_obsolete = super::layers::Conv2d::seeded_with_std(base, 1, 1, &mut rng, 0.01);
        // Missing/obsolete pixels are rare; bias the heads toward "no" so the
        // first epochs do not flood the detection branches.
        head_missing.b.fill(-2.0);
        head_obsolete.b.fill(-2.0);
        Ok(Generator {
            config,
            enc,
            bottleneck,
            dec,
            trunk_norm,
            head_field,
            head_missing,
            head_obsolete,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// A structurally identical generator with all parameters zeroed, used
    /// as a gradient buffer and as optimizer state.
    pub fn zeros_like(&self) -> Self {
        Generator {
            config: self.config.clone(),
            enc: self.enc.iter().map(|b| b.zeros_like()).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            dec: self.dec.iter().map(|b| b.zeros_like()).collect(),
            trunk_norm: self.trunk_norm.zeros_like(),
            head_field: self.head_field.zeros_like(),
            head_missing: self.head_missing.zeros_like(),
            head_obsolete: self.head_obsolete.zeros_like(),
        }
    }

    /// All parameter tensors as flat slices, in a fixed traversal order.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for b in &self.enc {
            b.visit_params(&mut out);
        }
        self.bottleneck.visit_params(&mut out);
        for b in &self.dec {
            b.visit_params(&mut out);
        }
        out.push(self.trunk_norm.gamma.as_slice().unwrap());
        out.push(self.trunk_norm.beta.as_slice().unwrap());
        for head in [&self.head_field, &self.head_missing, &self.head_obsolete] {
            out.push(head.w.as_slice().unwrap());
            out.push(head.b.as_slice().unwrap());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for b in &mut self.enc {
            b.visit_params_mut(&mut out);
        }
        self.bottleneck.visit_params_mut(&mut out);
        for b in &mut self.dec {
            b.visit_params_mut(&mut out);
        }
        out.push(self.trunk_norm.gamma.as_slice_mut().unwrap());
        out.push(self.trunk_norm.beta.as_slice_mut().unwrap());
        for head in [&mut self.head_field, &mut self.head_missing, &mut self.head_obsolete] {
            out.push(head.w.as_slice_mut().unwrap());
            out.push(head.b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(ModelError::BadDimensions {
                height: h,
                width: w,
                divisor: div,
                hint: format!(
                    "pad to {}x{}",
                    h.div_ceil(div) * div,
                    w.div_ceil(div) * div
                ),
            });
        }
        Ok(())
    }

    /// Forward pass keeping every activation needed for backprop.
    pub fn forward_train(&self, input: &Array3<f32>) -> Result<TrainForward, ModelError> {
        let (c, h, w) = input.dim();
        if c != self.config.input_channels {
            return Err(ModelError::BadChannels { got: c, want: self.config.input_channels });
        }
        self.check_dims(h, w)?;
        let mut enc_in = Vec::new();
        let mut enc_caches = Vec::new();
        let mut enc_out = Vec::new();
        let mut pool_idx = Vec::new();
        let mut cur = input.clone();
        for block in &self.enc {
            enc_in.push(cur.clone());
            let (y, cache) = block.forward(&cur);
            enc_caches.push(cache);
            let (pooled, idx) = max_pool2(&y);
            enc_out.push(y);
            pool_idx.push(idx);
            cur = pooled;
        }
        let bott_in = cur;
        let (mut cur, bott_cache) = self.bottleneck.forward(&bott_in);
        let depth = self.config.depth;
        let mut dec_in = vec![Array3::<f32>::zeros((0, 0, 0)); depth];
        let mut dec_caches: Vec<Option<RrCache>> = (0..depth).map(|_| None).collect();
        for l in (0..depth).rev() {
            let up = upsample2(&cur);
            let cat = ndarray::concatenate(Axis(0), &[enc_out[l].view(), up.view()])
                .expect("matching spatial dims");
            let (y, cache) = self.dec[l].forward(&cat);
            dec_in[l] = cat;
            dec_caches[l] = Some(cache);
            cur = y;
        }
        let (trunk_out, trunk_gn) = self.trunk_norm.forward(&cur);
        let mut field_raw = self.head_field.forward(&trunk_out);
        field_raw.mapv_inplace(f32::tanh);
        let missing_z = self.head_missing.forward(&trunk_out);
        let obsolete_z = self.head_obsolete.forward(&trunk_out);
        let missing = missing_z.index_axis(Axis(0), 0).mapv(sigmoid);
        let obsolete = obsolete_z.index_axis(Axis(0), 0).mapv(sigmoid);
        Ok(TrainForward {
            field_raw,
            missing,
            obsolete,
            cache: ForwardCache {
                enc_in,
                enc_caches,
                enc_out,
                pool_idx,
                bott_in,
                bott_cache,
                dec_in,
                dec_caches: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
                trunk_gn,
                trunk_out,
            },
        })
    }

    /// Backward pass. `d_field_raw` is the gradient with respect to the
    /// post-tanh field; `dz_missing` / `dz_obsolete` are gradients with
    /// respect to the pre-sigmoid head logits (the natural quantity coming
    /// out of a binary cross-entropy: `(p - g) / n`). Parameter gradients
    /// accumulate into `grads`.
    pub fn backward(
        &self,
        fwd: &TrainForward,
        d_field_raw: &Array3<f32>,
        dz_missing: &Array2<f32>,
        dz_obsolete: &Array2<f32>,
        grads: &mut Generator,
    ) {
        let cache = &fwd.cache;
        // tanh' = 1 - y^2
        let mut dz_field = d_field_raw.clone();
        for (d, &y) in dz_field.iter_mut().zip(fwd.field_raw.iter()) {
            *d *= 1.0 - y * y;
        }
        let (h, w) = (dz_missing.dim().0, dz_missing.dim().1);
        let dz_m3 = dz_missing.view().into_shape_with_order((1, h, w)).unwrap().to_owned();
        let dz_o3 = dz_obsolete.view().into_shape_with_order((1, h, w)).unwrap().to_owned();
        let mut d_trunk =
            self.head_field.backward(&cache.trunk_out, None, &dz_field, &mut grads.head_field);
        d_trunk += &self.head_missing.backward(&cache.trunk_out, None, &dz_m3, &mut grads.head_missing);
        d_trunk +=
            &self.head_obsolete.backward(&cache.trunk_out, None, &dz_o3, &mut grads.head_obsolete);
        let d_trunk_pre = self.trunk_norm.backward(&cache.trunk_gn, &d_trunk, &mut grads.trunk_norm);

        let depth = self.config.depth;
        let mut d_cur = d_trunk_pre;
        let mut d_enc_out: Vec<Option<Array3<f32>>> = (0..depth).map(|_| None).collect();
        for l in 0..depth {
            let d_cat =
                self.dec[l].backward(&cache.dec_in[l], &cache.dec_caches[l], &d_cur, &mut grads.dec[l]);
            let skip_c = cache.enc_out[l].dim().0;
            let d_skip = d_cat.slice(ndarray::s![..skip_c, .., ..]).to_owned();
            let d_up = d_cat.slice(ndarray::s![skip_c.., .., ..]).to_owned();
            d_enc_out[l] = Some(d_skip);
            d_cur = upsample2_backward(&d_up);
        }
        let mut d_below =
            self.bottleneck.backward(&cache.bott_in, &cache.bott_cache, &d_cur, &mut grads.bottleneck);
        for l in (0..depth).rev() {
            let (_, eh, ew) = cache.enc_out[l].dim();
            let mut d_out = max_pool2_backward(&d_below, &cache.pool_idx[l], eh, ew);
            d_out += d_enc_out[l].as_ref().unwrap();
            d_below =
                self.enc[l].backward(&cache.enc_in[l], &cache.enc_caches[l], &d_out, &mut grads.enc[l]);
        }
        // d_below is now the input gradient; inputs are data, not parameters.
    }

    /// Inference-only forward: no backward caches are kept.
    pub fn forward_heads(
        &self,
        input: &Array3<f32>,
    ) -> Result<(Array3<f32>, Array2<f32>, Array2<f32>), ModelError> {
        let (c, h, w) = input.dim();
        if c != self.config.input_channels {
            return Err(ModelError::BadChannels { got: c, want: self.config.input_channels });
        }
        self.check_dims(h, w)?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = input.clone();
        for block in &self.enc {
            let y = block.forward_infer(&cur);
            let (pooled, _) = max_pool2(&y);
            skips.push(y);
            cur = pooled;
        }
        cur = self.bottleneck.forward_infer(&cur);
        for l in (0..depth).rev() {
            let up = upsample2(&cur);
            let cat = ndarray::concatenate(Axis(0), &[skips[l].view(), up.view()])
                .expect("matching spatial dims");
            cur = self.dec[l].forward_infer(&cat);
        }
        let trunk = self.trunk_norm.forward_infer(&cur);
        let mut field_raw = self.head_field.forward(&trunk);
        field_raw.mapv_inplace(f32::tanh);
        let missing = self.head_missing.forward(&trunk).index_axis(Axis(0), 0).mapv(sigmoid);
        let obsolete = self.head_obsolete.forward(&trunk).index_axis(Axis(0), 0).mapv(sigmoid);
        Ok((field_raw, missing, obsolete))
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}
