//! AdamW, the cosine learning-rate schedule, the training loop and
//! checkpointing of its full state.

mod config;

pub use config::{ConfigError, TrainConfig};

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::fusion::FdceModel;
use crate::imageio::{augment_pair, compute_histogram, epoch_order, random_patch, stream_rng, Image, ImageError};
use crate::losses::{loss_terms, rec_loss, total_loss, LossTerms, PerceptualExtractor, SsimParams};
use crate::infer::enhance;
use crate::metrics::psnr;
use crate::nn::ParamStore;
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW hyperparameters for one update.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamWParams {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update of `param` at step `t ≥ 1`: decoupled decay
/// `θ ← θ − lr·wd·θ`, then the bias-corrected adaptive step.
pub fn adamw_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    h: &AdamWParams,
) -> Result<(), TensorError> {
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(TensorError::mismatch("adamw", param.shape(), other));
        }
    }
    if t == 0 {
        return Err(TensorError::invalid("adamw", "step counter starts at 1"));
    }
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let decay = 1.0 - h.lr * h.weight_decay;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let g = g.as_f64();
        let mi = h.beta1 * m.as_f64() + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v.as_f64() + (1.0 - h.beta2) * g * g;
        let theta = p.as_f64() * decay;
        let update = h.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        *m = T::of(mi);
        *v = T::of(vi);
        *p = T::of(theta - update);
    }
    Ok(())
}

/// Loss components of one step, or averaged over an epoch.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms<f64>,
    /// Auxiliary L1 on the coarse output (0 when disabled).
    pub aux: f64,
    pub total: f64,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms<f64>,
    pub total: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,ssim_loss,rec_loss,hist_loss,per_loss,total";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{}",
            self.epoch, self.lr, self.terms.ssim, self.terms.rec, self.terms.hist, self.terms.per, self.total
        )
    }
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for l in logs {
        writeln!(s, "{}", l.csv_line()).expect("writing to a String");
    }
    s
}

/// Architecture and parameters stored in a checkpoint, ready for inference.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(FdceModel, ParamStore<f32>, TrainConfig)> {
    let config = TrainConfig::from_text(&ck.config)?;
    let (model, mut params) = FdceModel::new::<f32>(config.model(), config.seed)?;
    checkpoint::load_into_store(&mut params, &ck.params)?;
    Ok((model, params, config))
}

/// Model, parameters, optimizer state and data for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: FdceModel,
    pub params: ParamStore<f32>,
    first_moment: Vec<Tensor<f32>>,
    second_moment: Vec<Tensor<f32>>,
    step: u64,
    extractor: PerceptualExtractor,
    ssim: SsimParams,
    data: Vec<(Image, Image)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<(Image, Image)>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for (x, y) in &data {
            if x.dims() != y.dims() {
                return Err(ImageError::ShapeMismatch(x.dims(), y.dims()).into());
            }
            let (h, w) = x.dims();
            if h.min(w) < config.patch {
                return Err(ImageError::Invalid(format!("image {h}x{w} smaller than patch {}", config.patch)).into());
            }
        }
        let (model, params) = FdceModel::new::<f32>(config.model(), config.seed)?;
        let zeros: Vec<Tensor<f32>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let extractor = match &config.perceptual_weights {
            Some(p) => PerceptualExtractor::load(Path::new(p))?,
            None => PerceptualExtractor::random(config.perceptual_seed),
        };
        Ok(Trainer {
            model,
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            extractor,
            ssim: SsimParams::default(),
            data,
            config,
        })
    }

    /// Restores a run from a checkpoint; the configuration comes from its snapshot.
    pub fn resume(ck: &Checkpoint, data: Vec<(Image, Image)>) -> Result<Self> {
        let config = TrainConfig::from_text(&ck.config)?;
        let mut t = Trainer::new(config, data)?;
        checkpoint::load_into_store(&mut t.params, &ck.params)?;
        let moments = |table: &[checkpoint::NamedTensor], store: &ParamStore<f32>| -> Result<Vec<Tensor<f32>>> {
            let mut s = store.clone();
            checkpoint::load_into_store(&mut s, table)?;
            Ok(s.iter().map(|(_, t)| t.clone()).collect())
        };
        t.first_moment = moments(&ck.first_moment, &t.params)?;
        t.second_moment = moments(&ck.second_moment, &t.params)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let table = |ts: &[Tensor<f32>]| {
            self.params
                .iter()
                .zip(ts)
                .map(|((n, _), t)| checkpoint::NamedTensor::from_tensor(n, t))
                .collect()
        };
        Checkpoint {
            config: self.config.to_text(),
            step: self.step,
            params: checkpoint::table_from_store(&self.params),
            first_moment: table(&self.first_moment),
            second_moment: table(&self.second_moment),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    /// Scheduled length of the run.
    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.config.epochs as u64;
        match self.config.max_steps {
            0 => full,
            m => full.min(m as u64),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Training pairs of step `step`: epoch-shuffled, augmented and cropped,
    /// all driven by `(seed, step, item)`.
    pub fn batch_for(&self, step: u64) -> Result<Vec<(Image, Image)>> {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let order = epoch_order(self.data.len(), self.config.seed, epoch);
        let start = (step % spe) as usize * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        order[start..end]
            .iter()
            .enumerate()
            .map(|(item, &i)| {
                let mut rng = stream_rng(self.config.seed, step, item as u64);
                let (x, y) = &self.data[i];
                let (x, y) = if self.config.augment {
                    augment_pair(x, y, &mut rng)?
                } else {
                    (x.clone(), y.clone())
                };
                Ok(random_patch(&x, &y, self.config.patch, &mut rng)?)
            })
            .collect()
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let lr = lr_at(step, self.total_steps(), &self.config);
        let batch = self.batch_for(step)?;
        let non_finite = |detail: String| TrainError::NonFinite { step, detail };

        let xs: Vec<&Image> = batch.iter().map(|(x, _)| x).collect();
        let ys: Vec<&Image> = batch.iter().map(|(_, y)| y).collect();
        let hists = ys
            .iter()
            .map(|y| compute_histogram(y, self.config.bins))
            .collect::<Result<Vec<_>, _>>()?;
        let hist_data: Vec<f32> = hists.iter().flat_map(|h| h.values().iter().map(|&v| v as f32)).collect();

        let mut g = Graph::<f32>::new();
        let forward = |g: &mut Graph<f32>| -> Result<_, TensorError> {
            let p = self.params.bind(g)?;
            let x = g.constant(Image::batch(&xs).map_err(|e| TensorError::invalid("batch", e.to_string()))?)?;
            let y = g.constant(Image::batch(&ys).map_err(|e| TensorError::invalid("batch", e.to_string()))?)?;
            let h = g.constant(Tensor::new(&[batch.len(), 3, self.config.bins], hist_data.clone())?)?;
            let out = self.model.forward(g, &p, x)?;
            let terms = loss_terms(g, out.refined, y, out.histogram, h, &self.ssim, &self.extractor)?;
            let mut loss = total_loss(g, &terms, &self.config.loss_weights())?;
            let aux = if self.config.aux_coarse_loss {
                let a = rec_loss(g, out.coarse, y)?;
                loss = g.add(loss, a)?;
                Some(a)
            } else {
                None
            };
            Ok((p, terms, aux, loss))
        };
        let (p, terms, aux, loss) = forward(&mut g).map_err(|e| match e {
            TensorError::NonFinite { op } => non_finite(format!("forward pass produced non-finite values in {op}")),
            e => e.into(),
        })?;
        let values = terms.values(&g);
        let aux_v = aux.map_or(0.0, |a| g.value(a).data()[0] as f64);
        let total = g.value(loss).data()[0] as f64;
        if !total.is_finite() {
            return Err(non_finite(format!(
                "ssim {} rec {} hist {} per {} aux {aux_v}",
                values.ssim, values.rec, values.hist, values.per
            )));
        }
        let mut grads = g.backward(loss).map_err(|e| match e {
            TensorError::NonFinite { op } => non_finite(format!("backward produced non-finite gradients in {op}")),
            e => e.into(),
        })?;

        let h = AdamWParams::from_config(&self.config, lr);
        let ids: Vec<_> = self.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = grads
                .take(p.var(id))
                .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()));
            adamw_step(
                self.params.get_mut(id),
                &grad,
                &mut self.first_moment[k],
                &mut self.second_moment[k],
                step + 1,
                &h,
            )?;
        }
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            terms: values,
            aux: aux_v,
            total,
        })
    }

    /// Runs until the next epoch boundary (or the end of the schedule) and
    /// returns the epoch's mean losses.
    pub fn train_epoch(&mut self) -> Result<Option<EpochLog>> {
        if self.is_done() {
            return Ok(None);
        }
        let spe = self.steps_per_epoch();
        let epoch = (self.step / spe) as usize;
        let lr = lr_at(self.step, self.total_steps(), &self.config);
        let mut sum = LossTerms {
            ssim: 0.0,
            rec: 0.0,
            hist: 0.0,
            per: 0.0,
        };
        let (mut total, mut n) = (0.0, 0.0);
        loop {
            let s = self.train_step()?;
            sum.ssim += s.terms.ssim;
            sum.rec += s.terms.rec;
            sum.hist += s.terms.hist;
            sum.per += s.terms.per;
            total += s.total;
            n += 1.0;
            if self.step % spe == 0 || self.is_done() {
                break;
            }
        }
        Ok(Some(EpochLog {
            epoch,
            lr,
            terms: LossTerms {
                ssim: sum.ssim / n,
                rec: sum.rec / n,
                hist: sum.hist / n,
                per: sum.per / n,
            },
            total: total / n,
        }))
    }

    /// Trains to the end of the schedule.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while let Some(log) = self.train_epoch()? {
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Mean PSNR of the final output over full images (no cropping).
    pub fn evaluate_psnr(&self, pairs: &[(Image, Image)]) -> Result<f64> {
        let mut acc = 0.0;
        for (x, y) in pairs {
            let (_, refined) = enhance(&self.model, &self.params, x)?;
            acc += psnr(&refined, y)?;
        }
        Ok(acc / pairs.len().max(1) as f64)
    }
}
