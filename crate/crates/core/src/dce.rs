//! Dual color encoder.
//!
//! The first encoder is a convolutional FSRB pyramid with a predicted color
//! histogram head. The second refines a bank of learned color queries against
//! the pyramid with transformer blocks that run cross-attention first:
//!
//! ```text
//! E1  = softmax(Q Kᵀ / s) V + E_prev        Q = lin(E_prev), K, V = lin(features)
//! E2  = MHSA(LN(E1)) + E1
//! out = LN(FFN(LN(E2)) + E2)
//! ```
//!
//! Batches carry an independent query stream per image: queries are
//! `[B, M, C_e]`, with the shared bank broadcast at the start.

use crate::fsnet::{Fsrb, STAGES};
use crate::nn::{Bound, Builder, Conv, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Multi-scale features at 1/2, 1/4 and 1/8 of the input extent.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Fce {
    pub base_width: usize,
    pub bins: usize,
    stem: Conv,
    stages: Vec<(Fsrb, Conv)>,
    hist1: Linear,
    hist2: Linear,
}

impl Fce {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, base_width: usize, bins: usize, hidden: usize) -> Result<Self> {
        if bins < 2 {
            return Err(TensorError::invalid("fce", "histogram needs at least 2 bins"));
        }
        b.scope(name, |b| {
            let stem = b.conv("stem", 3, base_width, 3, 1, Init::FanIn)?;
            let mut stages = Vec::with_capacity(STAGES);
            for s in 0..STAGES {
                let c = base_width << s;
                stages.push((
                    Fsrb::build(b, &format!("stage{s}.block"), c)?,
                    b.conv(&format!("stage{s}.down"), c, 2 * c, 3, 2, Init::FanIn)?,
                ));
            }
            let top = base_width << STAGES;
            Ok(Fce {
                base_width,
                bins,
                stem,
                stages,
                hist1: b.linear("hist1", top, hidden)?,
                hist2: b.linear("hist2", hidden, 3 * bins)?,
            })
        })
    }

    /// Channel widths of the three pyramid levels.
    pub fn level_widths(&self) -> [usize; 3] {
        [self.base_width * 2, self.base_width * 4, self.base_width * 8]
    }

    /// Returns the pyramid and a `[B, 3, bins]` histogram whose rows sum to 1.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(FeaturePyramid, Var)> {
        crate::fsnet::check_extent(g.shape(x))?;
        let mut f = self.stem.forward(g, p, x)?;
        let mut levels = Vec::with_capacity(3);
        for (block, down) in &self.stages {
            f = block.forward(g, p, f)?;
            f = down.forward(g, p, f)?;
            levels.push(f);
        }
        let batch = g.shape(x)[0];
        let pooled = g.mean_spatial(f)?;
        let h = self.hist1.forward(g, p, pooled)?;
        let h = g.gelu(h)?;
        let h = self.hist2.forward(g, p, h)?;
        let h = g.reshape(h, &[batch, 3, self.bins])?;
        let hist = g.softmax(h, 2)?;
        Ok((
            FeaturePyramid {
                levels: [levels[0], levels[1], levels[2]],
            },
            hist,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Mhsa {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Mhsa {
    fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::invalid("mhsa", format!("width {width} not divisible by {heads} heads")));
        }
        b.scope(name, |b| {
            Ok(Mhsa {
                heads,
                q: b.linear("q", width, width)?,
                k: b.linear("k", width, width)?,
                v: b.linear("v", width, width)?,
                o: b.linear("o", width, width)?,
            })
        })
    }

    /// Self-attention over the query axis of `[B, M, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, m, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, m, self.heads, d])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.q.forward(g, p, x)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, p, x)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, p, x)?;
        let v = split(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
        let attn = g.softmax(scores, 3)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, m, c])?;
        self.o.forward(g, p, ctx)
    }
}

/// One color encoder block.
#[derive(Clone, Debug)]
pub struct Ceb {
    pub width: usize,
    pub feature_width: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln3: LayerNorm,
    /// Divide cross-attention logits by `sqrt(width)`.
    pub scaled: bool,
}

/// Intermediate values of one block, exposed for inspection.
pub struct CebTrace {
    pub out: Var,
    /// Cross-attention weights `[B, M, H·W]`.
    pub cross_attention: Var,
}

impl Ceb {
    pub fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        feature_width: usize,
        heads: usize,
        scaled: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Ceb {
                width,
                feature_width,
                q: b.linear("q", width, width)?,
                k: b.linear("k", feature_width, width)?,
                v: b.linear("v", feature_width, width)?,
                ln1: b.layer_norm("ln1", width)?,
                attn: Mhsa::build(b, "mhsa", width, heads)?,
                ln2: b.layer_norm("ln2", width)?,
                ffn1: b.linear("ffn1", width, 4 * width)?,
                ffn2: b.linear("ffn2", 4 * width, width)?,
                ln3: b.layer_norm("ln3", width)?,
                scaled,
            })
        })
    }

    /// Flattens `[B, C, H, W]` features to `[B, H·W, C]` tokens.
    pub fn tokens<T: Real>(g: &mut Graph<T>, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("ceb", format!("features must be [B, C, H, W], got {s:?}")));
        }
        let t = g.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
        g.permute(t, &[0, 2, 1])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, e_prev: Var, features: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, e_prev, features)?.out)
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<T>, p: &Bound, e_prev: Var, features: Var) -> Result<CebTrace> {
        let es = g.shape(e_prev).to_vec();
        let fs = g.shape(features).to_vec();
        if es.len() != 3 || es[2] != self.width {
            return Err(TensorError::invalid("ceb", format!("queries must be [B, M, {}], got {es:?}", self.width)));
        }
        if fs.len() != 4 || fs[1] != self.feature_width || fs[0] != es[0] {
            return Err(TensorError::invalid(
                "ceb",
                format!("features must be [{}, {}, H, W], got {fs:?}", es[0], self.feature_width),
            ));
        }
        let tokens = Self::tokens(g, features)?;
        let q = self.q.forward(g, p, e_prev)?;
        let k = self.k.forward(g, p, tokens)?;
        let v = self.v.forward(g, p, tokens)?;
        let kt = g.transpose(k)?;
        let mut logits = g.matmul(q, kt)?;
        if self.scaled {
            logits = g.scale(logits, T::of(1.0 / (self.width as f64).sqrt()))?;
        }
        let attn = g.softmax(logits, 2)?;
        let ctx = g.matmul(attn, v)?;
        let e1 = g.add(ctx, e_prev)?;

        let n1 = self.ln1.forward(g, p, e1)?;
        let sa = self.attn.forward(g, p, n1)?;
        let e2 = g.add(sa, e1)?;

        let n2 = self.ln2.forward(g, p, e2)?;
        let h = self.ffn1.forward(g, p, n2)?;
        let h = g.gelu(h)?;
        let h = self.ffn2.forward(g, p, h)?;
        let r = g.add(h, e2)?;
        let out = self.ln3.forward(g, p, r)?;
        Ok(CebTrace {
            out,
            cross_attention: attn,
        })
    }
}

/// Second color encoder: `3N` distinct blocks, pyramid levels cycled
/// 1/2 → 1/4 → 1/8 within each group.
#[derive(Clone, Debug)]
pub struct Sce {
    pub groups: usize,
    pub queries: usize,
    pub width: usize,
    pub bank: ParamId,
    pub blocks: Vec<Ceb>,
}

/// Output of [`Sce::forward`] with the executed `(block, level)` order.
pub struct SceOutput {
    pub embeddings: Var,
    pub schedule: Vec<(usize, usize)>,
}

impl Sce {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        queries: usize,
        width: usize,
        level_widths: [usize; 3],
        groups: usize,
        heads: usize,
        scaled: bool,
    ) -> Result<Self> {
        if groups == 0 || queries == 0 {
            return Err(TensorError::invalid("sce", "need at least one group and one query"));
        }
        b.scope(name, |b| {
            // the bank starts at zero
            let bank = b.zeros("bank", &[queries, width])?;
            let mut blocks = Vec::with_capacity(3 * groups);
            for i in 0..groups {
                for (j, &fw) in level_widths.iter().enumerate() {
                    blocks.push(Ceb::build(b, &format!("block{}", i * 3 + j), width, fw, heads, scaled)?);
                }
            }
            Ok(Sce {
                groups,
                queries,
                width,
                bank,
                blocks,
            })
        })
    }

    /// Runs every block once, starting from the bank broadcast over the batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<SceOutput> {
        if self.blocks.len() != 3 * self.groups {
            return Err(TensorError::invalid(
                "sce",
                format!("expected {} blocks, found {}", 3 * self.groups, self.blocks.len()),
            ));
        }
        let batch = g.shape(pyramid.levels[0])[0];
        let mut e = g.repeat(p.var(self.bank), batch)?;
        let mut schedule = Vec::with_capacity(self.blocks.len());
        for i in 0..self.groups {
            for (j, level) in pyramid.levels.iter().enumerate() {
                let idx = i * 3 + j;
                e = self.blocks[idx].forward(g, p, e, *level)?;
                schedule.push((idx, j));
            }
        }
        Ok(SceOutput { embeddings: e, schedule })
    }
}

/// Activation map of one color query over a feature map:
/// `sigmoid(⟨query, K(h, w)⟩ / sqrt(C_e))` where `K` is a block's key projection.
pub fn visualize_query<T: Real>(
    query: &Tensor<T>,
    features: &Tensor<T>,
    key_weight: &Tensor<T>,
    key_bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (fs, ws) = (features.shape(), key_weight.shape());
    if fs.len() != 3 || ws.len() != 2 || ws[0] != fs[0] || query.len() != ws[1] || key_bias.len() != ws[1] {
        return Err(TensorError::invalid(
            "visualize_query",
            format!("query {:?}, features {fs:?}, key weight {ws:?}", query.shape()),
        ));
    }
    let (cf, h, w) = (fs[0], fs[1], fs[2]);
    let ce = ws[1];
    // fold the projection into the query: ⟨q, Wᵀf + b⟩ = ⟨W q, f⟩ + ⟨q, b⟩
    let wq: Vec<T> = (0..cf)
        .map(|c| (0..ce).map(|e| key_weight.data()[c * ce + e] * query.data()[e]).sum())
        .collect();
    let qb: T = query.data().iter().zip(key_bias.data()).map(|(&a, &b)| a * b).sum();
    let scale = T::of(1.0 / (ce as f64).sqrt());
    let plane = h * w;
    let map = Tensor::from_fn(&[h, w], |i| {
        let dot = (0..cf).map(|c| wq[c] * features.data()[c * plane + i]).sum::<T>() + qb;
        crate::tensor::sigmoid(dot * scale)
    });
    Ok(map)
}
