//! A small feedforward classifier with normalization slots.
//!
//! Blocks are channel-mixing affine maps applied at every spatial position
//! (a 1x1 convolution over 1-D feature maps), each followed by a
//! normalization slot and ReLU; a mean-pool over the spatial extent feeds a
//! linear head. Training runs plain SGD on cross-entropy with batch-stats
//! normalization, tracking running statistics by EMA; the running statistics
//! and learned affine parameters become the stored [`SourceStats`] that
//! test-time normalizers start from.
//!
//! Backpropagation is written out by hand for this fixed architecture and
//! checked against central finite differences in the tests.

use crate::error::{Error, Result};
use crate::normalizers::{NormKind, NormParams, NormSlot, SourceStats, DEFAULT_EPS};
use crate::rng;
use crate::stats::{batch_stats, FeatureBatch};
use crate::streams::{
    get_kv, join_floats, next_line, parse_float_field, parse_kv_line, SynthDataset,
};
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const MODEL_HEADER: &str = "unmix-tns-model v1";
/// Training counts as converged at or above this training-set accuracy.
pub const CONVERGENCE_ACCURACY: f64 = 0.95;

/// Source-training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// EMA rate for the running normalization statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 64,
            bn_momentum: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning-rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch-size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn-momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One hidden block: channel-mixing affine weights plus the stored
/// statistics of its normalization slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub(crate) w: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) src: SourceStats,
    in_ch: usize,
    out_ch: usize,
}

impl Block {
    pub fn src(&self) -> &SourceStats {
        &self.src
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }
}

/// Classifier logits, shape `B x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    data: Vec<f64>,
    batch: usize,
    classes: usize,
}

impl Logits {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, m: usize) -> f64 {
        self.data[b * self.classes + m]
    }

    /// Argmax per row; ties resolve to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| {
                let row = &self.data[b * self.classes..(b + 1) * self.classes];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        assert_eq!(labels.len(), self.batch);
        let hit = self
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        hit as f64 / self.batch as f64
    }
}

/// The trained model: hidden blocks, linear head, and the training-set
/// accuracy it converged to. Weights are immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    blocks: Vec<Block>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    input_channels: usize,
    spatial: usize,
    classes: usize,
    train_accuracy: f64,
}

struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    mask: Vec<bool>,
}

struct Gradients {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl ToyModel {
    /// Randomly initialized, untrained model (He-scaled weights, identity
    /// normalization statistics).
    fn new_random(
        input_channels: usize,
        spatial: usize,
        hidden: &[usize],
        classes: usize,
        seed: u64,
    ) -> Self {
        let mut gen = rng::rng_from_seed(seed);
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut in_ch = input_channels;
        for &out_ch in hidden {
            let scale = (2.0 / in_ch as f64).sqrt();
            let w: Vec<f64> = (0..out_ch * in_ch)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut gen);
                    scale * z
                })
                .collect();
            blocks.push(Block {
                w,
                b: vec![0.0; out_ch],
                src: SourceStats::identity(out_ch),
                in_ch,
                out_ch,
            });
            in_ch = out_ch;
        }
        let scale = (1.0 / in_ch as f64).sqrt();
        let head_w: Vec<f64> = (0..classes * in_ch)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut gen);
                scale * z
            })
            .collect();
        ToyModel {
            blocks,
            head_w,
            head_b: vec![0.0; classes],
            input_channels,
            spatial,
            classes,
            train_accuracy: 0.0,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Number of normalization slots (one per hidden block).
    pub fn num_slots(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }

    fn affine(&self, idx: usize, x: &FeatureBatch) -> FeatureBatch {
        let block = &self.blocks[idx];
        let (b_n, in_ch, l_n) = x.shape();
        debug_assert_eq!(in_ch, block.in_ch);
        let out_ch = block.out_ch;
        let mut out = vec![0.0; b_n * out_ch * l_n];
        for b in 0..b_n {
            for o in 0..out_ch {
                let dst = &mut out[(b * out_ch + o) * l_n..(b * out_ch + o + 1) * l_n];
                dst.iter_mut().for_each(|d| *d = block.b[o]);
                for i in 0..in_ch {
                    let wv = block.w[o * in_ch + i];
                    let src = x.row(b, i);
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += wv * s;
                    }
                }
            }
        }
        FeatureBatch::from_raw(out, b_n, out_ch, l_n)
    }

    fn pool_and_head(&self, z: &FeatureBatch) -> Logits {
        let (b_n, c_n, l_n) = z.shape();
        let inv_l = 1.0 / l_n as f64;
        let mut pooled = vec![0.0; b_n * c_n];
        for b in 0..b_n {
            for c in 0..c_n {
                pooled[b * c_n + c] = z.row(b, c).iter().sum::<f64>() * inv_l;
            }
        }
        let mut logits = vec![0.0; b_n * self.classes];
        for b in 0..b_n {
            for m in 0..self.classes {
                let mut acc = self.head_b[m];
                for c in 0..c_n {
                    acc += self.head_w[m * c_n + c] * pooled[b * c_n + c];
                }
                logits[b * self.classes + m] = acc;
            }
        }
        Logits {
            data: logits,
            batch: b_n,
            classes: self.classes,
        }
    }

    /// Forward pass with a caller-supplied normalization step per slot.
    ///
    /// The closure receives the slot index, the pre-normalization features,
    /// and that slot's stored statistics, and returns the normalized
    /// features.
    pub fn forward_with<F>(&self, input: &FeatureBatch, mut normalize: F) -> Result<Logits>
    where
        F: FnMut(usize, FeatureBatch, &SourceStats) -> Result<FeatureBatch>,
    {
        if input.channels() != self.input_channels || input.spatial() != self.spatial {
            return Err(Error::ShapeMismatch(format!(
                "input is {}x{}, model expects {}x{}",
                input.channels(),
                input.spatial(),
                self.input_channels,
                self.spatial
            )));
        }
        let mut z = input.clone();
        for i in 0..self.blocks.len() {
            let pre = self.affine(i, &z);
            let mut normed = normalize(i, pre, &self.blocks[i].src)?;
            relu_in_place(&mut normed);
            z = normed;
        }
        Ok(self.pool_and_head(&z))
    }

    /// Evaluation forward pass through pluggable normalization slots.
    /// Stateful slots update in place.
    pub fn forward_eval(&self, input: &FeatureBatch, slots: &mut [NormSlot]) -> Result<Logits> {
        if slots.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} slots supplied, model has {} normalization slots",
                slots.len(),
                self.blocks.len()
            )));
        }
        self.forward_with(input, |i, pre, src| slots[i].forward(&pre, src))
    }

    /// Build one normalization slot per block. Slot `i` derives its seed
    /// from `seed` and `i`, so re-running with the same seed reproduces the
    /// same initial states.
    pub fn make_slots(
        &self,
        kind: NormKind,
        params: &NormParams,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<NormSlot>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                NormSlot::new(
                    kind,
                    params,
                    &block.src,
                    batch_size,
                    rng::derive_seed(seed, i as u64),
                )
            })
            .collect()
    }

    // Training-mode forward: normalize every slot with the batch's own
    // statistics and keep the intermediates needed for backprop.
    fn forward_train(&self, input: &FeatureBatch) -> (Vec<BlockCache>, FeatureBatch, Logits) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut z = input.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let pre = self.affine(i, &z);
            let stats = batch_stats(&pre);
            let (b_n, c_n, l_n) = pre.shape();
            let mut xhat = vec![0.0; b_n * c_n * l_n];
            let mut post = vec![0.0; b_n * c_n * l_n];
            for c in 0..c_n {
                let inv = 1.0 / (stats.var[c] + DEFAULT_EPS).sqrt();
                let g = block.src.gamma[c];
                let be = block.src.beta[c];
                let m = stats.mean[c];
                for b in 0..b_n {
                    let row = pre.row(b, c);
                    let off = (b * c_n + c) * l_n;
                    for l in 0..l_n {
                        let xh = (row[l] - m) * inv;
                        xhat[off + l] = xh;
                        post[off + l] = g * xh + be;
                    }
                }
            }
            let mask: Vec<bool> = post.iter().map(|&v| v > 0.0).collect();
            let mut out = post;
            out.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            caches.push(BlockCache {
                input: z.data().to_vec(),
                xhat,
                mean: stats.mean,
                var: stats.var,
                mask,
            });
            z = FeatureBatch::from_raw(out, b_n, c_n, l_n);
        }
        let logits = self.pool_and_head(&z);
        (caches, z, logits)
    }

    #[cfg(test)]
    fn train_loss(&self, input: &FeatureBatch, labels: &[usize]) -> f64 {
        let (_, _, logits) = self.forward_train(input);
        cross_entropy(&logits, labels)
    }

    fn loss_and_grads(&self, input: &FeatureBatch, labels: &[usize]) -> (f64, Gradients, Vec<BlockCache>) {
        let (caches, z_last, logits) = self.forward_train(input);
        let b_n = input.batch_size();
        let loss = cross_entropy(&logits, labels);

        // d loss / d logits = (softmax - onehot) / B.
        let m_n = self.classes;
        let mut dlogits = vec![0.0; b_n * m_n];
        for b in 0..b_n {
            let row = &logits.data[b * m_n..(b + 1) * m_n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                dlogits[b * m_n + i] = e;
                sum += e;
            }
            for i in 0..m_n {
                dlogits[b * m_n + i] /= sum;
            }
            dlogits[b * m_n + labels[b]] -= 1.0;
            for i in 0..m_n {
                dlogits[b * m_n + i] /= b_n as f64;
            }
        }

        let (_, c_last, l_n) = z_last.shape();
        let inv_l = 1.0 / l_n as f64;
        let mut pooled = vec![0.0; b_n * c_last];
        for b in 0..b_n {
            for c in 0..c_last {
                pooled[b * c_last + c] = z_last.row(b, c).iter().sum::<f64>() * inv_l;
            }
        }
        let mut dhead_w = vec![0.0; m_n * c_last];
        let mut dhead_b = vec![0.0; m_n];
        for b in 0..b_n {
            for m in 0..m_n {
                let g = dlogits[b * m_n + m];
                dhead_b[m] += g;
                for c in 0..c_last {
                    dhead_w[m * c_last + c] += g * pooled[b * c_last + c];
                }
            }
        }
        // dz on the last block output via the pooling fan-out.
        let mut dz = vec![0.0; b_n * c_last * l_n];
        for b in 0..b_n {
            for c in 0..c_last {
                let mut acc = 0.0;
                for m in 0..m_n {
                    acc += dlogits[b * m_n + m] * self.head_w[m * c_last + c];
                }
                let g = acc * inv_l;
                let off = (b * c_last + c) * l_n;
                for l in 0..l_n {
                    dz[off + l] = g;
                }
            }
        }

        let mut grads = Gradients {
            w: Vec::with_capacity(self.blocks.len()),
            b: Vec::with_capacity(self.blocks.len()),
            gamma: Vec::with_capacity(self.blocks.len()),
            beta: Vec::with_capacity(self.blocks.len()),
            head_w: dhead_w,
            head_b: dhead_b,
        };
        for _ in 0..self.blocks.len() {
            grads.w.push(Vec::new());
            grads.b.push(Vec::new());
            grads.gamma.push(Vec::new());
            grads.beta.push(Vec::new());
        }

        for i in (0..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            let cache = &caches[i];
            let c_n = block.out_ch;
            let in_ch = block.in_ch;
            let n = (b_n * l_n) as f64;

            // Through ReLU.
            let mut dy = dz;
            for (g, &alive) in dy.iter_mut().zip(cache.mask.iter()) {
                if !alive {
                    *g = 0.0;
                }
            }

            // Affine normalization parameters.
            let mut dgamma = vec![0.0; c_n];
            let mut dbeta = vec![0.0; c_n];
            for b in 0..b_n {
                for c in 0..c_n {
                    let off = (b * c_n + c) * l_n;
                    for l in 0..l_n {
                        dgamma[c] += dy[off + l] * cache.xhat[off + l];
                        dbeta[c] += dy[off + l];
                    }
                }
            }

            // Batch-norm backward (population statistics over B*L):
            // da = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)).
            let mut da = vec![0.0; b_n * c_n * l_n];
            for c in 0..c_n {
                let inv = 1.0 / (cache.var[c] + DEFAULT_EPS).sqrt();
                let g = block.src.gamma[c];
                let mut sum_dx = 0.0;
                let mut sum_dx_xhat = 0.0;
                for b in 0..b_n {
                    let off = (b * c_n + c) * l_n;
                    for l in 0..l_n {
                        let dxh = dy[off + l] * g;
                        sum_dx += dxh;
                        sum_dx_xhat += dxh * cache.xhat[off + l];
                    }
                }
                let mean_dx = sum_dx / n;
                let mean_dx_xhat = sum_dx_xhat / n;
                for b in 0..b_n {
                    let off = (b * c_n + c) * l_n;
                    for l in 0..l_n {
                        let dxh = dy[off + l] * g;
                        da[off + l] =
                            inv * (dxh - mean_dx - cache.xhat[off + l] * mean_dx_xhat);
                    }
                }
            }

            // Affine weights and the gradient flowing to the block input.
            let mut dw = vec![0.0; c_n * in_ch];
            let mut db = vec![0.0; c_n];
            for b in 0..b_n {
                for o in 0..c_n {
                    let da_off = (b * c_n + o) * l_n;
                    for l in 0..l_n {
                        db[o] += da[da_off + l];
                    }
                    for iin in 0..in_ch {
                        let x_off = (b * in_ch + iin) * l_n;
                        let mut acc = 0.0;
                        for l in 0..l_n {
                            acc += da[da_off + l] * cache.input[x_off + l];
                        }
                        dw[o * in_ch + iin] += acc;
                    }
                }
            }
            let mut dinput = vec![0.0; b_n * in_ch * l_n];
            for b in 0..b_n {
                for iin in 0..in_ch {
                    let dst_off = (b * in_ch + iin) * l_n;
                    for o in 0..c_n {
                        let wv = block.w[o * in_ch + iin];
                        let src_off = (b * c_n + o) * l_n;
                        for l in 0..l_n {
                            dinput[dst_off + l] += wv * da[src_off + l];
                        }
                    }
                }
            }

            grads.w[i] = dw;
            grads.b[i] = db;
            grads.gamma[i] = dgamma;
            grads.beta[i] = dbeta;
            dz = dinput;
        }

        (loss, grads, caches)
    }

    fn apply_grads(&mut self, grads: &Gradients, lr: f64) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (p, g) in block.w.iter_mut().zip(&grads.w[i]) {
                *p -= lr * g;
            }
            for (p, g) in block.b.iter_mut().zip(&grads.b[i]) {
                *p -= lr * g;
            }
            for (p, g) in block.src.gamma.iter_mut().zip(&grads.gamma[i]) {
                *p -= lr * g;
            }
            for (p, g) in block.src.beta.iter_mut().zip(&grads.beta[i]) {
                *p -= lr * g;
            }
        }
        for (p, g) in self.head_w.iter_mut().zip(&grads.head_w) {
            *p -= lr * g;
        }
        for (p, g) in self.head_b.iter_mut().zip(&grads.head_b) {
            *p -= lr * g;
        }
    }

    fn update_running(&mut self, caches: &[BlockCache], momentum: f64) {
        for (block, cache) in self.blocks.iter_mut().zip(caches) {
            for c in 0..block.out_ch {
                block.src.mean[c] += momentum * (cache.mean[c] - block.src.mean[c]);
                block.src.var[c] += momentum * (cache.var[c] - block.src.var[c]);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{MODEL_HEADER}")?;
        writeln!(
            w,
            "classes={} input_channels={} spatial={} blocks={}",
            self.classes,
            self.input_channels,
            self.spatial,
            self.blocks.len()
        )?;
        writeln!(w, "train_accuracy={:e}", self.train_accuracy)?;
        for (i, block) in self.blocks.iter().enumerate() {
            writeln!(w, "block={} in={} out={}", i, block.in_ch, block.out_ch)?;
            writeln!(w, "w={}", join_floats(&block.w))?;
            writeln!(w, "b={}", join_floats(&block.b))?;
            writeln!(w, "bn_mean={}", join_floats(&block.src.mean))?;
            writeln!(w, "bn_var={}", join_floats(&block.src.var))?;
            writeln!(w, "bn_gamma={}", join_floats(&block.src.gamma))?;
            writeln!(w, "bn_beta={}", join_floats(&block.src.beta))?;
        }
        writeln!(w, "head_w={}", join_floats(&self.head_w))?;
        writeln!(w, "head_b={}", join_floats(&self.head_b))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ToyModel> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header = next_line(&mut lines)?;
        if header.1 != MODEL_HEADER {
            return Err(Error::parse(1, format!("expected `{MODEL_HEADER}` header")));
        }
        let (ln, dims) = next_line(&mut lines)?;
        let kv = parse_kv_line(&dims, ln)?;
        let classes: usize = get_kv(&kv, "classes", ln)?;
        let input_channels: usize = get_kv(&kv, "input_channels", ln)?;
        let spatial: usize = get_kv(&kv, "spatial", ln)?;
        let n_blocks: usize = get_kv(&kv, "blocks", ln)?;
        let (ln, acc_line) = next_line(&mut lines)?;
        let train_accuracy = parse_float_field(&acc_line, "train_accuracy", 1, ln)?[0];

        let mut blocks = Vec::with_capacity(n_blocks);
        for want in 0..n_blocks {
            let (ln, bline) = next_line(&mut lines)?;
            let kv = parse_kv_line(&bline, ln)?;
            let idx: usize = get_kv(&kv, "block", ln)?;
            if idx != want {
                return Err(Error::parse(ln, format!("expected block {want}, got {idx}")));
            }
            let in_ch: usize = get_kv(&kv, "in", ln)?;
            let out_ch: usize = get_kv(&kv, "out", ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let w = parse_float_field(&l, "w", out_ch * in_ch, ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let b = parse_float_field(&l, "b", out_ch, ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let mean = parse_float_field(&l, "bn_mean", out_ch, ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let var = parse_float_field(&l, "bn_var", out_ch, ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let gamma = parse_float_field(&l, "bn_gamma", out_ch, ln)?;
            let (ln, l) = next_line(&mut lines)?;
            let beta = parse_float_field(&l, "bn_beta", out_ch, ln)?;
            blocks.push(Block {
                w,
                b,
                src: SourceStats::new(mean, var, gamma, beta)?,
                in_ch,
                out_ch,
            });
        }
        let last_ch = blocks.last().map(|b| b.out_ch).unwrap_or(input_channels);
        let (ln, l) = next_line(&mut lines)?;
        let head_w = parse_float_field(&l, "head_w", classes * last_ch, ln)?;
        let (ln, l) = next_line(&mut lines)?;
        let head_b = parse_float_field(&l, "head_b", classes, ln)?;
        Ok(ToyModel {
            blocks,
            head_w,
            head_b,
            input_channels,
            spatial,
            classes,
            train_accuracy,
        })
    }
}

fn relu_in_place(batch: &mut FeatureBatch) {
    // Rebuild through from_raw to keep the buffer private.
    let (b, c, l) = batch.shape();
    let mut data = batch.data().to_vec();
    data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    *batch = FeatureBatch::from_raw(data, b, c, l);
}

fn cross_entropy(logits: &Logits, labels: &[usize]) -> f64 {
    let b_n = logits.batch_size();
    let m_n = logits.classes();
    assert_eq!(labels.len(), b_n);
    let mut loss = 0.0;
    for b in 0..b_n {
        let row = &logits.data[b * m_n..(b + 1) * m_n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[b]];
    }
    loss / b_n as f64
}

/// Train a source model on a synthetic dataset by mini-batch SGD on
/// cross-entropy, with batch-stats normalization during training and EMA
/// tracking of the running statistics.
///
/// Fails with [`Error::NonConvergence`] if the final training-set accuracy
/// (evaluated with the stored statistics) is below
/// [`CONVERGENCE_ACCURACY`].
pub fn train_source(
    dataset: &SynthDataset,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<ToyModel> {
    cfg.validate()?;
    if hidden.is_empty() {
        return Err(Error::InvalidArgument(
            "model needs at least one hidden block".to_string(),
        ));
    }
    let mut model = ToyModel::new_random(
        dataset.channels(),
        dataset.spatial(),
        hidden,
        dataset.classes(),
        cfg.seed,
    );
    let n = dataset.len();
    for epoch in 0..cfg.epochs {
        let order = crate::streams::shuffled_order(n, rng::derive_seed(cfg.seed, 1000 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.gather(chunk);
            let labels = dataset.gather_labels(chunk);
            let (_, grads, caches) = model.loss_and_grads(&batch, &labels);
            model.apply_grads(&grads, cfg.learning_rate);
            model.update_running(&caches, cfg.bn_momentum);
        }
    }

    // Evaluate with the stored statistics, the same path test-time source-BN
    // uses.
    let mut slots = model.make_slots(NormKind::SourceBn, &NormParams::default(), n.max(1), 0)?;
    let logits = model.forward_eval(&dataset.as_batch(), &mut slots)?;
    let accuracy = logits.accuracy(dataset.labels());
    if accuracy < CONVERGENCE_ACCURACY {
        return Err(Error::NonConvergence {
            accuracy,
            required: CONVERGENCE_ACCURACY,
        });
    }
    model.train_accuracy = accuracy;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{NormKind, NormParams};
    use crate::stats::instance_stats;
    use crate::streams::{apply_shift, synth_source, DomainShift};
    use rand::Rng;

    fn tiny_model(seed: u64) -> ToyModel {
        let mut model = ToyModel::new_random(3, 2, &[4, 3], 3, seed);
        // Non-trivial normalization statistics so every code path matters.
        let mut gen = crate::rng::rng_from_seed(seed ^ 0x55);
        for block in &mut model.blocks {
            for c in 0..block.out_ch {
                block.src.gamma[c] = gen.random_range(0.5..1.5);
                block.src.beta[c] = gen.random_range(-0.5..0.5);
            }
        }
        model
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model(3);
        let mut gen = crate::rng::rng_from_seed(17);
        let batch = FeatureBatch::from_fn(5, 3, 2, |_, _, _| gen.random_range(-2.0..2.0)).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| gen.random_range(0..3)).collect();

        let (_, grads, _) = model.loss_and_grads(&batch, &labels);
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, name: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in 0..model.blocks.len() {
            for j in 0..model.blocks[i].w.len() {
                let mut up = model.clone();
                up.blocks[i].w[j] += h;
                let mut down = model.clone();
                down.blocks[i].w[j] -= h;
                check(
                    grads.w[i][j],
                    up.train_loss(&batch, &labels),
                    down.train_loss(&batch, &labels),
                    "w",
                );
            }
            for j in 0..model.blocks[i].b.len() {
                let mut up = model.clone();
                up.blocks[i].b[j] += h;
                let mut down = model.clone();
                down.blocks[i].b[j] -= h;
                check(
                    grads.b[i][j],
                    up.train_loss(&batch, &labels),
                    down.train_loss(&batch, &labels),
                    "b",
                );
            }
            for j in 0..model.blocks[i].src.gamma.len() {
                let mut up = model.clone();
                up.blocks[i].src.gamma[j] += h;
                let mut down = model.clone();
                down.blocks[i].src.gamma[j] -= h;
                check(
                    grads.gamma[i][j],
                    up.train_loss(&batch, &labels),
                    down.train_loss(&batch, &labels),
                    "gamma",
                );
                let mut up = model.clone();
                up.blocks[i].src.beta[j] += h;
                let mut down = model.clone();
                down.blocks[i].src.beta[j] -= h;
                check(
                    grads.beta[i][j],
                    up.train_loss(&batch, &labels),
                    down.train_loss(&batch, &labels),
                    "beta",
                );
            }
        }
        for j in 0..model.head_w.len() {
            let mut up = model.clone();
            up.head_w[j] += h;
            let mut down = model.clone();
            down.head_w[j] -= h;
            check(
                grads.head_w[j],
                up.train_loss(&batch, &labels),
                down.train_loss(&batch, &labels),
                "head_w",
            );
        }
        for j in 0..model.head_b.len() {
            let mut up = model.clone();
            up.head_b[j] += h;
            let mut down = model.clone();
            down.head_b[j] -= h;
            check(
                grads.head_b[j],
                up.train_loss(&batch, &labels),
                down.train_loss(&batch, &labels),
                "head_b",
            );
        }
    }

    #[test]
    fn well_separated_classes_train_to_high_accuracy() {
        let train = synth_source(2, 6, 2, 200, 0.25, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let model = train_source(&train, &[16, 16], &cfg).unwrap();
        assert!(model.train_accuracy() >= 0.99);

        // Held-out i.i.d. source data from the same generator.
        let test = synth_source(2, 6, 2, 500, 0.25, 12).unwrap();
        let mut slots = model
            .make_slots(NormKind::SourceBn, &NormParams::default(), 64, 0)
            .unwrap();
        let logits = model.forward_eval(&test.as_batch(), &mut slots).unwrap();
        assert!(logits.accuracy(test.labels()) >= 0.99);
    }

    #[test]
    fn running_mean_tracks_full_pass_features() {
        // Enough batches per epoch that the EMA window is short against
        // late-training weight drift, and large batches to keep its
        // stationary noise inside the 5% comparison band.
        let train = synth_source(3, 4, 2, 1000, 0.3, 21).unwrap();
        let cfg = TrainConfig {
            batch_size: 128,
            ..TrainConfig::default()
        };
        let model = train_source(&train, &[8], &cfg).unwrap();
        // Full-pass moments entering slot 0 under the training distribution.
        let pre = model.affine(0, &train.as_batch());
        let full = batch_stats(&pre);
        let src = model.blocks()[0].src();
        // Within 5% per channel, measured against the channel's own scale
        // (its mean or dispersion, whichever dominates): feature means near
        // zero make a bare relative comparison meaningless.
        for c in 0..full.channels() {
            let scale = full.mean[c].abs().max(full.var[c].sqrt());
            let gap = (src.mean[c] - full.mean[c]).abs();
            assert!(
                gap <= 0.05 * scale,
                "channel {c}: running mean {} vs full-pass {} (scale {scale})",
                src.mean[c],
                full.mean[c]
            );
            let var_gap = (src.var[c] - full.var[c]).abs();
            assert!(
                var_gap <= 0.10 * full.var[c].max(1e-6),
                "channel {c}: running var {} vs full-pass {}",
                src.var[c],
                full.var[c]
            );
        }
    }

    #[test]
    fn hopeless_task_reports_nonconvergence() {
        // Overlapping classes (spread far above the class separation) with
        // a single epoch cannot reach the convergence bar.
        let train = synth_source(4, 4, 2, 60, 10.0, 33).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        match train_source(&train, &[4], &cfg) {
            Err(crate::error::Error::NonConvergence { accuracy, required }) => {
                assert!(accuracy < required);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let train = synth_source(2, 4, 2, 100, 0.2, 31).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_source(&train, &[8], &cfg).unwrap();
        let b = train_source(&train, &[8], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn source_bn_eval_reproduces_training_accuracy() {
        let train = synth_source(3, 4, 2, 200, 0.3, 41).unwrap();
        let model = train_source(&train, &[8, 8], &TrainConfig::default()).unwrap();
        let mut slots = model
            .make_slots(NormKind::SourceBn, &NormParams::default(), 64, 5)
            .unwrap();
        let logits = model.forward_eval(&train.as_batch(), &mut slots).unwrap();
        assert_eq!(logits.accuracy(train.labels()), model.train_accuracy());
    }

    #[test]
    fn unmix_single_component_equals_instance_normalization() {
        let train = synth_source(2, 4, 3, 100, 0.3, 51).unwrap();
        let model = train_source(&train, &[6], &TrainConfig::default()).unwrap();
        let params = NormParams {
            components: 1,
            alpha: 0.0,
            ..NormParams::default()
        };
        let batch = train.gather(&(0..8).collect::<Vec<_>>());
        let mut slots = model.make_slots(NormKind::UnMix, &params, 8, 3).unwrap();
        let got = model.forward_eval(&batch, &mut slots).unwrap();

        // Instance normalization at every slot, written independently.
        let want = model
            .forward_with(&batch, |_, pre, src| {
                let inst = instance_stats(&pre);
                let (b_n, c_n, l_n) = pre.shape();
                let out = FeatureBatch::from_fn(b_n, c_n, l_n, |b, c, l| {
                    let m = inst.mean_row(b)[c];
                    let v = inst.var_row(b)[c];
                    src.gamma[c] * (pre.get(b, c, l) - m)
                        / (v + crate::normalizers::DEFAULT_EPS).sqrt()
                        + src.beta[c]
                })
                .unwrap();
                Ok(out)
            })
            .unwrap();
        for (a, b) in got.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_normalizers_leaves_source_logits_bit_identical() {
        let train = synth_source(2, 4, 2, 100, 0.3, 61).unwrap();
        let model = train_source(&train, &[6], &TrainConfig::default()).unwrap();
        let batch = train.gather(&(0..16).collect::<Vec<_>>());
        let params = NormParams::default();

        let mut source_slots = model.make_slots(NormKind::SourceBn, &params, 16, 0).unwrap();
        let before = model.forward_eval(&batch, &mut source_slots).unwrap();
        for kind in NormKind::all() {
            let mut slots = model.make_slots(kind, &params, 16, 1).unwrap();
            for _ in 0..3 {
                model.forward_eval(&batch, &mut slots).unwrap();
            }
        }
        let after = model.forward_eval(&batch, &mut source_slots).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn batch_size_one_works_for_every_kind() {
        let train = synth_source(2, 4, 3, 80, 0.3, 71).unwrap();
        let model = train_source(&train, &[6], &TrainConfig::default()).unwrap();
        let batch = train.gather(&[0]);
        for kind in NormKind::all() {
            let mut slots = model.make_slots(kind, &NormParams::default(), 1, 2).unwrap();
            let logits = model.forward_eval(&batch, &mut slots).unwrap();
            assert!(logits.data().iter().all(|v| v.is_finite()), "{kind} produced non-finite logits");
        }
    }

    #[test]
    fn tbn_collapses_on_single_class_shifted_batches() {
        let train = synth_source(4, 6, 2, 300, 0.3, 81).unwrap();
        let model = train_source(&train, &[12, 12], &TrainConfig::default()).unwrap();
        let test = synth_source(4, 6, 2, 64, 0.3, 82).unwrap();
        let shift = DomainShift::new(vec![1.5; 6], vec![0.4; 6], 0.05, "shift").unwrap();

        let params = NormParams::default();
        let mut correct_source = 0usize;
        let mut correct_tbn = 0usize;
        let mut total = 0usize;
        for class in 0..4 {
            let idx: Vec<usize> = (0..test.len())
                .filter(|&i| test.labels()[i] == class)
                .collect();
            let batch = apply_shift(&test.gather(&idx), &shift, 900 + class as u64).unwrap();
            let labels = test.gather_labels(&idx);
            let mut src_slots = model.make_slots(NormKind::SourceBn, &params, idx.len(), 0).unwrap();
            let mut tbn_slots = model.make_slots(NormKind::Tbn, &params, idx.len(), 0).unwrap();
            let ls = model.forward_eval(&batch, &mut src_slots).unwrap();
            let lt = model.forward_eval(&batch, &mut tbn_slots).unwrap();
            for b in 0..labels.len() {
                if ls.predictions()[b] == labels[b] {
                    correct_source += 1;
                }
                if lt.predictions()[b] == labels[b] {
                    correct_tbn += 1;
                }
            }
            total += labels.len();
        }
        let acc_source = correct_source as f64 / total as f64;
        let acc_tbn = correct_tbn as f64 / total as f64;
        assert!(
            acc_tbn < acc_source,
            "single-class TBN accuracy {acc_tbn} should fall below source {acc_source}"
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let train = synth_source(3, 4, 2, 120, 0.3, 91).unwrap();
        let model = train_source(&train, &[8, 6], &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let back = ToyModel::load(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn logits_stay_finite_under_extreme_inputs() {
        let train = synth_source(2, 4, 2, 80, 0.3, 95).unwrap();
        let model = train_source(&train, &[6], &TrainConfig::default()).unwrap();
        for &scale in &[0.0, 1e-12, 1e12] {
            let batch = FeatureBatch::from_fn(4, 4, 2, |b, c, l| {
                scale * ((b + c + l) as f64 - 3.0)
            })
            .unwrap();
            for kind in NormKind::all() {
                let mut slots = model.make_slots(kind, &NormParams::default(), 4, 0).unwrap();
                let logits = model.forward_eval(&batch, &mut slots).unwrap();
                assert!(
                    logits.data().iter().all(|v| v.is_finite()),
                    "{kind} with scale {scale} produced non-finite logits"
                );
            }
        }
    }
}
