//! Fusion network and the end-to-end model.
//!
//! The fusion network shares FS-Net's shape. Its bottleneck features `IF`
//! (width `C_e`) are fused with the color embeddings by a per-pixel dot
//! product, `FF[b, m] = Σ_c IF[b, c] · E[b, m, c]`, projected back to the
//! bottleneck width by a 1×1 convolution, and decoded with the encoder skips.

use crate::dce::{Fce, FeaturePyramid, Sce};
use crate::fsnet::{UNet, STAGES};
use crate::nn::{init_rng, Bound, Builder, Conv, Init, ParamStore};
use crate::tensor::{Graph, Real, Result, TensorError, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stem width of FS-Net and the first color encoder; doubles per downsampling.
    pub base_width: usize,
    /// Color-query count `M`.
    pub queries: usize,
    /// Embedding width `C_e`; also the fusion network's bottleneck width.
    pub embed_dim: usize,
    /// Groups `N` of three encoder blocks.
    pub groups: usize,
    pub heads: usize,
    pub bins: usize,
    pub hist_hidden: usize,
    /// Drop the `1/sqrt(C_e)` factor on cross-attention logits.
    pub eq1_unscaled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            queries: 8,
            embed_dim: 64,
            groups: 3,
            heads: 4,
            bins: 64,
            hist_hidden: 64,
            eq1_unscaled: false,
        }
    }
}

impl ModelConfig {
    pub fn fusion_base_width(&self) -> usize {
        self.embed_dim >> STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::invalid("model config", m));
        if self.base_width < 2 {
            return bad(format!("base_width {} must be at least 2", self.base_width));
        }
        if self.embed_dim % (1 << STAGES) != 0 || self.fusion_base_width() < 2 {
            return bad(format!("embed_dim {} must be a multiple of 8 and at least 16", self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.queries == 0 || self.groups == 0 || self.bins < 2 || self.hist_hidden == 0 {
            return bad("queries, groups and hist_hidden must be positive; bins at least 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub net: UNet,
    pub proj: Conv,
    pub queries: usize,
}

/// `FF[b, m, h, w] = Σ_c IF[b, c, h, w] · E[b, m, c]`.
///
/// `embeddings` is `[B, M, C]`, or `[M, C]` shared across the batch.
pub fn fuse<T: Real>(g: &mut Graph<T>, features: Var, embeddings: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let es = g.shape(embeddings).to_vec();
    if fs.len() != 4 {
        return Err(TensorError::invalid("fuse", format!("features must be [B, C, H, W], got {fs:?}")));
    }
    let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let e = match es.as_slice() {
        [m, ce] if *ce == c => {
            let e = g.reshape(embeddings, &[1, *m, c])?;
            if b == 1 {
                e
            } else {
                let r = g.repeat(embeddings, b)?;
                g.reshape(r, &[b, *m, c])?
            }
        }
        [eb, _, ce] if *eb == b && *ce == c => embeddings,
        _ => return Err(TensorError::mismatch("fuse", &fs, &es)),
    };
    let m = g.shape(e)[1];
    let flat = g.reshape(features, &[b, c, h * w])?;
    let ff = g.matmul(e, flat)?;
    g.reshape(ff, &[b, m, h, w])
}

impl Fusion {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        b.scope(name, |b| {
            let net = UNet::build(b, "net", cfg.fusion_base_width())?;
            let proj = b.conv("proj", cfg.queries, net.bottleneck_width(), 1, 1, Init::FanIn)?;
            Ok(Fusion {
                net,
                proj,
                queries: cfg.queries,
            })
        })
    }

    /// Refined image `y′` from the coarse image and per-image embeddings `[B, M, C_e]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, coarse: Var, embeddings: Var) -> Result<Var> {
        let enc = self.net.encode(g, p, coarse)?;
        let ff = fuse(g, enc.bottleneck, embeddings)?;
        let restored = self.proj.forward(g, p, ff)?;
        self.net.decode(g, p, restored, &enc.skips)
    }
}

/// Complete model: FS-Net, both color encoders and the fusion network.
#[derive(Clone, Debug)]
pub struct FdceModel {
    pub config: ModelConfig,
    pub fsnet: UNet,
    pub fce: Fce,
    pub sce: Sce,
    pub fusion: Fusion,
}

/// Outputs of one forward pass.
pub struct FdceOutput {
    /// Coarse enhancement `ŷ`, `[B, 3, H, W]`.
    pub coarse: Var,
    /// Final enhancement `y′`, `[B, 3, H, W]`.
    pub refined: Var,
    /// Predicted histogram, `[B, 3, bins]`.
    pub histogram: Var,
    /// Color embeddings `E`, `[B, M, C_e]`.
    pub embeddings: Var,
    pub pyramid: FeaturePyramid,
    pub schedule: Vec<(usize, usize)>,
}

impl FdceModel {
    /// Builds the architecture and its freshly initialized parameters.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let fsnet = UNet::build(&mut b, "fsnet", config.base_width)?;
        let fce = Fce::build(&mut b, "fce", config.base_width, config.bins, config.hist_hidden)?;
        let sce = Sce::build(
            &mut b,
            "sce",
            config.queries,
            config.embed_dim,
            fce.level_widths(),
            config.groups,
            config.heads,
            !config.eq1_unscaled,
        )?;
        let fusion = Fusion::build(&mut b, "fusion", &config)?;
        Ok((
            FdceModel {
                config,
                fsnet,
                fce,
                sce,
                fusion,
            },
            store,
        ))
    }

    /// `ŷ = FS-Net(x)`, `(pyramid, H) = FCE(x)`, `E = SCE(E₀, pyramid)`,
    /// `y′ = FusionNet(ŷ, E)`, in that order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FdceOutput> {
        let coarse = self.fsnet.forward(g, p, x)?;
        let (pyramid, histogram) = self.fce.forward(g, p, x)?;
        let sce = self.sce.forward(g, p, &pyramid)?;
        let refined = self.fusion.forward(g, p, coarse, sce.embeddings)?;
        Ok(FdceOutput {
            coarse,
            refined,
            histogram,
            embeddings: sce.embeddings,
            pyramid,
            schedule: sce.schedule,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            embed_dim: 12,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fuse_with_shared_bank_matches_per_image_copy() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.1)).unwrap();
        let e = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sin())).unwrap();
        let shared = fuse(&mut g, f, e).unwrap();
        let e2 = g.repeat(e, 2).unwrap();
        let per = fuse(&mut g, f, e2).unwrap();
        assert_eq!(g.value(shared), g.value(per));
        assert_eq!(g.shape(shared), &[2, 4, 2, 2]);
    }

    #[test]
    fn fuse_rejects_width_mismatch() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        let e = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        assert!(fuse(&mut g, f, e).is_err());
    }
}
