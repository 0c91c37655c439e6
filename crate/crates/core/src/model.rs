//! U-Net segmentation network producing per-pixel class distributions.
//!
//! The encoder is a plain convolutional stack (two 3x3 conv + norm + ReLU per
//! stage, 2x2 max pooling between stages); the decoder upsamples with 2x2
//! transposed convolutions and concatenates the matching encoder output.
//! Parameters live in one flat buffer addressed through named slots.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, NormKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Conv, ConvCache, Norm, NormCache, Tensor, UpConv};
use crate::rng;
use crate::types::{Image, ProbMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub norm: NormKind,
    pub norm_groups: usize,
    pub pretrained_encoder: Option<String>,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, input_channels: usize) -> Self {
        Self::new(&cfg.model, cfg.num_classes, input_channels, cfg.resize_hw)
    }

    pub fn new(m: &ModelConfig, num_classes: usize, input_channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            depth: m.depth,
            base_channels: m.base_channels,
            num_classes,
            input_channels,
            input_hw,
            norm: m.norm,
            norm_groups: m.norm_groups,
            pretrained_encoder: m.pretrained_encoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModelSpec(m));
        if self.depth < 1 || self.depth > 8 {
            return bad(format!("depth {} outside [1, 8]", self.depth));
        }
        if self.base_channels < 1 || self.input_channels < 1 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be ≥ 2".into());
        }
        let div = 1usize << self.depth;
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return bad(format!("input {h}x{w} not divisible by 2^depth = {div}"));
        }
        if self.norm == NormKind::Group && (self.norm_groups < 1 || self.base_channels % self.norm_groups != 0) {
            return bad(format!(
                "norm_groups {} does not divide base_channels {}",
                self.norm_groups, self.base_channels
            ));
        }
        Ok(())
    }

    /// Parameter count of a model built from this spec.
    pub fn num_params(&self) -> Result<usize> {
        Model::build(self.clone(), 0).map(|m| m.num_params())
    }

    fn groups_for(&self, channels: usize) -> usize {
        match self.norm {
            NormKind::Group => self.norm_groups,
            NormKind::Instance => channels,
            NormKind::None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

struct BlockCache {
    c1: ConvCache,
    n1: Option<NormCache>,
    a1: Tensor,
    c2: ConvCache,
    n2: Option<NormCache>,
    a2: Tensor,
}

/// Everything backward needs from one training forward.
pub struct Trace {
    enc: Vec<BlockCache>,
    pools: Vec<(Vec<u32>, usize, usize, usize)>,
    bottleneck: BlockCache,
    up_inputs: Vec<Tensor>,
    dec: Vec<BlockCache>,
    head: ConvCache,
    probs: ProbMap,
}

impl Trace {
    pub fn probs(&self) -> &ProbMap {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    slots: Vec<ParamSlot>,
    params: Vec<f32>,
    grads: Vec<f32>,
    enc: Vec<Block>,
    bottleneck: Block,
    ups: Vec<UpConv>,
    dec: Vec<Block>,
    head: Conv,
}

struct Builder {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl Builder {
    fn slot(&mut self, name: String, len: usize) -> usize {
        self.slots.push(ParamSlot {
            name,
            offset: self.total,
            len,
        });
        self.total += len;
        self.slots.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.slot(format!("{name}.weight"), cout * cin * k * k);
        let bias = self.slot(format!("{name}.bias"), cout);
        Conv { cin, cout, k, weight, bias }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        if groups == 0 {
            return Norm { channels, groups, gamma: usize::MAX, beta: usize::MAX };
        }
        let gamma = self.slot(format!("{name}.gamma"), channels);
        let beta = self.slot(format!("{name}.beta"), channels);
        Norm { channels, groups, gamma, beta }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, spec: &ModelSpec) -> Block {
        let groups = spec.groups_for(cout);
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout, groups),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout, groups),
        }
    }
}

impl Model {
    /// Builds the network with He-normal conv weights, zero biases and unit
    /// norm scales; bit-identical for the same `(spec, seed)`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder { slots: Vec::new(), total: 0 };
        let ch = |i: usize| spec.base_channels << i;
        let mut enc = Vec::with_capacity(spec.depth);
        let mut cin = spec.input_channels;
        for i in 0..spec.depth {
            enc.push(b.block(&format!("enc{i}"), cin, ch(i), &spec));
            cin = ch(i);
        }
        let bottleneck = b.block("bottleneck", cin, ch(spec.depth), &spec);
        let mut ups = Vec::with_capacity(spec.depth);
        let mut dec = Vec::with_capacity(spec.depth);
        for i in (0..spec.depth).rev() {
            let weight = b.slot(format!("up{i}.weight"), 4 * ch(i) * ch(i + 1));
            let bias = b.slot(format!("up{i}.bias"), ch(i));
            ups.push(UpConv { cin: ch(i + 1), cout: ch(i), weight, bias });
            dec.push(b.block(&format!("dec{i}"), 2 * ch(i), ch(i), &spec));
        }
        let head = b.conv("head", ch(0), spec.num_classes, 1);

        let mut model = Self {
            spec,
            params: vec![0.0; b.total],
            grads: vec![0.0; b.total],
            slots: b.slots,
            enc,
            bottleneck,
            ups,
            dec,
            head,
        };
        model.init(seed);
        Ok(model)
    }

    fn init(&mut self, seed: u64) {
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        for i in 0..self.slots.len() {
            let slot = self.slots[i].clone();
            let dst = &mut self.params[slot.offset..slot.offset + slot.len];
            if slot.name.ends_with(".gamma") {
                dst.fill(1.0);
            } else if slot.name.ends_with(".weight") {
                let per_out = slot.len / self.out_channels_of(&slot.name).max(1);
                // A stride-2 transposed conv output pixel sees cin inputs, not 4*cin.
                let fan_in = if slot.name.starts_with("up") { per_out / 4 } else { per_out };
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let dst = &mut self.params[slot.offset..slot.offset + slot.len];
                for v in dst.iter_mut() {
                    *v = normal.sample(&mut r) as f32;
                }
            } else {
                dst.fill(0.0);
            }
        }
    }

    fn out_channels_of(&self, weight_name: &str) -> usize {
        let layer = weight_name.trim_end_matches(".weight");
        let bias_name = format!("{layer}.bias");
        self.slots
            .iter()
            .find(|s| s.name == bias_name)
            .map(|s| s.len)
            .unwrap_or(1)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f32] {
        &self.grads
    }

    /// Parameters and accumulated gradients together, for optimizer updates.
    pub fn params_and_grads(&mut self) -> (&mut [f32], &[f32]) {
        (&mut self.params, &self.grads)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Overwrites parameters; the buffer must match this model's layout.
    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Copies encoder weights (`enc*`, `bottleneck*`) whose names and sizes
    /// match from another model. Returns the number of slots copied.
    pub fn load_encoder_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for s in &self.slots {
            if !(s.name.starts_with("enc") || s.name.starts_with("bottleneck")) {
                continue;
            }
            if let Some(o) = other.slots.iter().find(|o| o.name == s.name && o.len == s.len) {
                self.params[s.offset..s.offset + s.len]
                    .copy_from_slice(&other.params[o.offset..o.offset + o.len]);
                copied += 1;
            }
        }
        copied
    }

    fn p(&self, slot: usize) -> &[f32] {
        let s = &self.slots[slot];
        &self.params[s.offset..s.offset + s.len]
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.hw() != self.spec.input_hw || image.channels() != self.spec.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {:?}x{}, got {:?}x{}",
                self.spec.input_hw,
                self.spec.input_channels,
                image.hw(),
                image.channels()
            )));
        }
        Ok(())
    }

    fn norm_fwd(&self, norm: &Norm, x: Tensor, keep: bool) -> (Tensor, Option<NormCache>) {
        if !norm.enabled() {
            return (x, None);
        }
        norm.forward(&x, self.p(norm.gamma), self.p(norm.beta), keep)
    }

    fn block_fwd(&self, b: &Block, x: &Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
        let (y, c1) = b.conv1.forward(x, self.p(b.conv1.weight), self.p(b.conv1.bias), keep);
        let (mut a1, n1) = self.norm_fwd(&b.norm1, y, keep);
        nn::relu_inplace(&mut a1);
        let (y, c2) = b.conv2.forward(&a1, self.p(b.conv2.weight), self.p(b.conv2.bias), keep);
        let (mut a2, n2) = self.norm_fwd(&b.norm2, y, keep);
        nn::relu_inplace(&mut a2);
        let cache = keep.then(|| BlockCache {
            c1: c1.expect("kept"),
            n1,
            a1,
            c2: c2.expect("kept"),
            n2,
            a2: a2.clone(),
        });
        (a2, cache)
    }

    fn forward_impl(&self, image: &Image, keep: bool) -> Result<(ProbMap, Option<Trace>)> {
        self.check_input(image)?;
        let (h, w) = image.hw();
        let mut x = Tensor::new(image.channels(), h, w, image.data().to_vec());
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        for b in &self.enc {
            let (y, cache) = self.block_fwd(b, &x, keep);
            if let Some(c) = cache {
                enc_caches.push(c);
            }
            let (pooled, idx) = nn::max_pool2(&y);
            if keep {
                pools.push((idx, y.c, y.h, y.w));
            }
            skips.push(y);
            x = pooled;
        }
        let (mut x, bottleneck) = self.block_fwd(&self.bottleneck, &x, keep);
        let mut up_inputs = Vec::new();
        let mut dec_caches = Vec::new();
        for (up, b) in self.ups.iter().zip(&self.dec) {
            let u = up.forward(&x, self.p(up.weight), self.p(up.bias));
            if keep {
                up_inputs.push(x);
            }
            let skip = skips.pop().expect("one skip per level");
            let cat = nn::concat(&skip, &u);
            let (y, cache) = self.block_fwd(b, &cat, keep);
            if let Some(c) = cache {
                dec_caches.push(c);
            }
            x = y;
        }
        let (logits, head) = self.head.forward(&x, self.p(self.head.weight), self.p(self.head.bias), keep);
        let logits: Vec<f64> = logits.data.iter().map(|v| *v as f64).collect();
        let probs = ProbMap::from_logits(h, w, self.spec.num_classes, &logits)?;
        let trace = keep.then(|| Trace {
            enc: enc_caches,
            pools,
            bottleneck: bottleneck.expect("kept"),
            up_inputs,
            dec: dec_caches,
            head: head.expect("kept"),
            probs: probs.clone(),
        });
        Ok((probs, trace))
    }

    /// Inference for one image.
    pub fn predict_one(&self, image: &Image) -> Result<ProbMap> {
        self.forward_impl(image, false).map(|r| r.0)
    }

    /// Inference for a batch; samples are independent.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<ProbMap>> {
        images.iter().map(|im| self.predict_one(im)).collect()
    }

    /// Forward that keeps the activations needed by [`Model::backward`].
    pub fn forward_train(&self, image: &Image) -> Result<Trace> {
        self.forward_impl(image, true).map(|r| r.1.expect("kept"))
    }

    fn norm_bwd(&mut self, norm: &Norm, cache: &Option<NormCache>, dy: Tensor) -> Tensor {
        let Some(cache) = cache else { return dy };
        let (gs, bs) = (&self.slots[norm.gamma], &self.slots[norm.beta]);
        let (go, gl, bo, bl) = (gs.offset, gs.len, bs.offset, bs.len);
        let gamma = self.params[go..go + gl].to_vec();
        let (dgamma, dbeta) = split_two(&mut self.grads, go, gl, bo, bl);
        norm.backward(cache, &dy, &gamma, dgamma, dbeta)
    }

    fn conv_bwd(&mut self, conv: &Conv, cache: &ConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (ws, bs) = (&self.slots[conv.weight], &self.slots[conv.bias]);
        let (wo, wl, bo, bl) = (ws.offset, ws.len, bs.offset, bs.len);
        let (dw, db) = split_two(&mut self.grads, wo, wl, bo, bl);
        conv.backward(cache, dy, &self.params[wo..wo + wl], dw, db, need_dx)
    }

    fn block_bwd(&mut self, b: &Block, c: &BlockCache, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        nn::relu_backward(&c.a2, &mut dy);
        let dy = self.norm_bwd(&b.norm2, &c.n2, dy);
        let mut da1 = self.conv_bwd(&b.conv2, &c.c2, &dy, true).expect("dx requested");
        nn::relu_backward(&c.a1, &mut da1);
        let dy = self.norm_bwd(&b.norm1, &c.n1, da1);
        self.conv_bwd(&b.conv1, &c.c1, &dy, need_dx)
    }

    /// Accumulates parameter gradients for `dloss/dprobs` (laid out like
    /// [`ProbMap::probs`]) and returns the gradient with respect to the input
    /// image, planar like [`Image::data`].
    pub fn backward(&mut self, trace: &Trace, dprobs: &[f64]) -> Result<Vec<f32>> {
        let probs = &trace.probs;
        if dprobs.len() != probs.probs().len() {
            return Err(Error::ShapeMismatch("gradient does not match prediction".into()));
        }
        let (h, w) = probs.hw();
        let n = h * w;
        let l = probs.num_classes();
        // Softmax: dz_c = p_c (g_c - sum_k p_k g_k).
        let p = probs.probs();
        let mut dlogits = vec![0.0f32; l * n];
        for i in 0..n {
            let dot: f64 = (0..l).map(|c| p[c * n + i] * dprobs[c * n + i]).sum();
            for c in 0..l {
                dlogits[c * n + i] = (p[c * n + i] * (dprobs[c * n + i] - dot)) as f32;
            }
        }
        let head = self.head.clone();
        let mut dx = self
            .conv_bwd(&head, &trace.head, &Tensor::new(l, h, w, dlogits), true)
            .expect("dx requested");

        let depth = self.spec.depth;
        let mut dskips: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for k in (0..depth).rev() {
            let level = depth - 1 - k;
            let b = self.dec[k].clone();
            let dcat = self.block_bwd(&b, &trace.dec[k], dx, true).expect("dx requested");
            let skip_c = self.spec.base_channels << level;
            let (dskip, du) = nn::split(&dcat, skip_c);
            dskips[level] = Some(dskip);
            let up = self.ups[k].clone();
            let (ws, bs) = (&self.slots[up.weight], &self.slots[up.bias]);
            let (wo, wl, bo, bl) = (ws.offset, ws.len, bs.offset, bs.len);
            let wt = self.params[wo..wo + wl].to_vec();
            let (dw, db) = split_two(&mut self.grads, wo, wl, bo, bl);
            dx = up.backward(&trace.up_inputs[k], &du, &wt, dw, db);
        }
        let b = self.bottleneck.clone();
        dx = self.block_bwd(&b, &trace.bottleneck, dx, true).expect("dx requested");
        for level in (0..depth).rev() {
            let (idx, c, ph, pw) = &trace.pools[level];
            let mut dy = nn::max_pool2_backward(idx, &dx, *c, *ph, *pw);
            let dskip = dskips[level].take().expect("filled by decoder");
            dy.data.iter_mut().zip(&dskip.data).for_each(|(a, b)| *a += b);
            let b = self.enc[level].clone();
            dx = self.block_bwd(&b, &trace.enc[level], dy, true).expect("dx requested");
        }
        Ok(dx.data)
    }
}

/// Two disjoint mutable sub-slices of one buffer.
fn split_two(buf: &mut [f32], ao: usize, al: usize, bo: usize, bl: usize) -> (&mut [f32], &mut [f32]) {
    if ao < bo {
        let (lo, hi) = buf.split_at_mut(bo);
        (&mut lo[ao..ao + al], &mut hi[..bl])
    } else {
        let (lo, hi) = buf.split_at_mut(ao);
        let b = &mut lo[bo..bo + bl];
        (&mut hi[..al], b)
    }
}
