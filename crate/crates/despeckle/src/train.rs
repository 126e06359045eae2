//! Optimization loop, plateau schedule, checkpointing, evaluation, and the
//! ablation / hyperparameter-sweep harnesses.

use crate::config::AppConfig;
use crate::contrastive::{instance_contrast_loss_t, pixel_contrast_loss_t, MemoryBank};
use crate::data::{add_speckle, derive_seed, resize_bilinear, DatasetManifest, ImageSample,
                  NoiseConfig, Split};
use crate::error::{Error, Result};
use crate::metrics::{metric_triple, MetricTriple};
use crate::model::{forward_denoise, init_params, BlockKind, ModelConfig, Params, TapeParams};
use crate::stats::{mine_negative_regions, sample_anchors, Branch, FeatureMap};
use crate::tape::{Tape, Var};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

// ---------------------------------------------------------------- optimizer

/// Decoupled-weight-decay Adam over the named parameter set.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: BTreeMap<String, crate::tape::Arr>,
    v: BTreeMap<String, crate::tape::Arr>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, crate::tape::Arr>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| crate::tape::Arr::zeros(value.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| crate::tape::Arr::zeros(value.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

// ---------------------------------------------------------------- denoisers

/// Pluggable slot for benchmarking other methods against the same harness.
pub trait Denoiser {
    fn name(&self) -> &str;
    fn denoise(&self, pixels: &Array2<f64>) -> Result<Array2<f64>>;
}

pub struct ModelDenoiser<'a> {
    pub params: &'a Params,
    pub cfg: &'a ModelConfig,
    pub label: String,
}

impl Denoiser for ModelDenoiser<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn denoise(&self, pixels: &Array2<f64>) -> Result<Array2<f64>> {
        crate::model::denoise_image(self.params, self.cfg, pixels)
    }
}

/// Identity baseline: reports the metrics of the noisy input itself.
pub struct PassThrough;

impl Denoiser for PassThrough {
    fn name(&self) -> &str {
        "noisy"
    }

    fn denoise(&self, pixels: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(pixels.clone())
    }
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub l_pixel: f64,
    pub l_instance: f64,
    pub total: f64,
    pub val_psnr: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,epoch,lr,l1,l_pixel,l_instance,total,val_psnr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{}\n",
            r.step,
            r.epoch,
            r.lr,
            r.l1,
            r.l_pixel,
            r.l_instance,
            r.total,
            r.val_psnr.map(|v| format!("{v:.4}")).unwrap_or_default()
        ));
    }
    out
}

pub struct TrainResult {
    pub params: Params,
    pub bank: MemoryBank,
    pub log: Vec<LogRow>,
    pub final_loss: f64,
    pub epochs_run: usize,
}

fn fit_to_model(sample: &ImageSample, size: usize) -> Array2<f64> {
    if sample.pixels.dim() == (size, size) {
        sample.pixels.clone()
    } else {
        resize_bilinear(&sample.pixels, size, size)
    }
}

/// Deterministic per-image evaluation noise; independent of training order.
pub fn eval_noisy(sample: &ImageSample, sigma: f64, seed: u64) -> Array2<f64> {
    let salt = 0x4556_0000 ^ (sigma.to_bits() >> 17);
    let cfg = NoiseConfig::new(sigma, derive_seed(seed, &sample.id, salt), true);
    add_speckle(sample, &cfg).pixels
}

pub struct BatchLosses {
    pub l1: f64,
    pub l_pixel: f64,
    pub l_instance: f64,
    pub total: Var,
    pub clean_embeddings: Vec<Array1<f64>>,
}

/// One optimization step's forward graph over a batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_graph(
    tape: &mut Tape,
    tp: &TapeParams,
    cfg: &AppConfig,
    batch: &[&ImageSample],
    step: usize,
    contrastive_on: bool,
    bank: &MemoryBank,
) -> Result<BatchLosses> {
    let tc = &cfg.train;
    let size = cfg.model.image_size;
    let mut l1_terms = Vec::new();
    let mut pixel_terms = Vec::new();
    let mut zn_vars = Vec::new();
    let mut zc_vars = Vec::new();
    let mut clean_embeddings = Vec::new();

    for sample in batch {
        let clean = fit_to_model(sample, size);
        let fitted = ImageSample {
            pixels: clean.clone(),
            ..(*sample).clone()
        };
        let noise = NoiseConfig::new(
            tc.sigma,
            derive_seed(tc.seed, &sample.id, step as u64),
            true,
        );
        let noisy = add_speckle(&fitted, &noise).pixels;

        let noisy_v = tape.constant(noisy.into_dyn());
        let clean_v = tape.constant(clean.clone().into_dyn());
        let noisy_out = forward_denoise(tape, noisy_v, tp, &cfg.model)?;

        let clean_flat = tape.reshape(clean_v, &[1, size, size]);
        let diff = tape.sub(noisy_out.prediction, clean_flat);
        let adiff = tape.abs(diff);
        l1_terms.push(tape.mean_all(adiff));

        if contrastive_on {
            let clean_in = tape.constant(clean.into_dyn());
            let clean_out = forward_denoise(tape, clean_in, tp, &cfg.model)?;

            // pixel-level contrast over the decoder feature maps
            let fshape = tape.value(noisy_out.features).shape().to_vec();
            let (c, fh, fw) = (fshape[0], fshape[1], fshape[2]);
            let anchor_seed = derive_seed(tc.seed, &sample.id, 0x5043 ^ step as u64);
            let count = tc.anchor_count.min((fh - 2 * (tc.window / 2)).pow(2) / 2).max(1);
            let anchors = sample_anchors(fh, fw, count, tc.window, anchor_seed)?;

            let fm_noisy = FeatureMap::new(
                tape.value(noisy_out.features)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap(),
                Branch::Noisy,
            );
            let mined = mine_negative_regions(&fm_noisy, &anchors, tc.window, tc.tau_noise)?;

            let pixel_vec = |tape: &mut Tape, fmap: Var, i: usize, j: usize| {
                let idx: Vec<usize> = (0..c).map(|ch| ch * fh * fw + i * fw + j).collect();
                tape.gather(fmap, Rc::new(idx), &[c])
            };
            let anchor_vars: Vec<Var> = anchors
                .iter()
                .map(|&(i, j)| pixel_vec(tape, noisy_out.features, i, j))
                .collect();
            let positive_vars: Vec<Var> = anchors
                .iter()
                .map(|&(i, j)| pixel_vec(tape, clean_out.features, i, j))
                .collect();
            // negative = channel-wise window mean of each mined region,
            // recomputed on-tape so gradients reach the noisy branch
            let half = tc.window / 2;
            let neg_vars: Vec<Var> = mined
                .regions
                .iter()
                .map(|r| {
                    let (ci, cj) = r.center;
                    let mut idx = Vec::with_capacity(tc.window * tc.window * c);
                    for u in ci - half..=ci + half {
                        for v in cj - half..=cj + half {
                            for ch in 0..c {
                                idx.push(ch * fh * fw + u * fw + v);
                            }
                        }
                    }
                    let win = tape.gather(
                        noisy_out.features,
                        Rc::new(idx),
                        &[tc.window * tc.window, c],
                    );
                    tape.mean_rows(win)
                })
                .collect();
            let negatives: Vec<Vec<Var>> = anchors.iter().map(|_| neg_vars.clone()).collect();
            pixel_terms.push(pixel_contrast_loss_t(
                tape,
                &anchor_vars,
                &positive_vars,
                &negatives,
                tc.temperature,
            )?);

            clean_embeddings.push(
                tape.value(clean_out.instance)
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
            );
            zn_vars.push(noisy_out.instance);
            zc_vars.push(clean_out.instance);
        }
    }

    let mean_of = |tape: &mut Tape, terms: &[Var]| {
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t);
        }
        tape.scale(sum, 1.0 / terms.len() as f64)
    };

    let l1 = mean_of(tape, &l1_terms);
    let mut total = l1;
    let mut l_pixel = 0.0;
    let mut l_instance = 0.0;
    if contrastive_on {
        let pix = mean_of(tape, &pixel_terms);
        l_pixel = tape.scalar(pix);
        let weighted = tape.scale(pix, tc.alpha);
        total = tape.add(total, weighted);

        let (inst, _degenerate) =
            instance_contrast_loss_t(tape, &zn_vars, &zc_vars, bank, tc.temperature)?;
        l_instance = tape.scalar(inst);
        let weighted = tape.scale(inst, tc.beta);
        total = tape.add(total, weighted);
    }
    Ok(BatchLosses {
        l1: tape.scalar(l1),
        l_pixel,
        l_instance,
        total,
        clean_embeddings,
    })
}

/// Full training run over the train split of `manifest`; validation PSNR is
/// monitored on the test split for the plateau schedule.
pub fn train(cfg: &AppConfig, manifest: &DatasetManifest) -> Result<TrainResult> {
    cfg.validate()?;
    let tc = &cfg.train;
    let train_set: Vec<&ImageSample> = manifest.samples(Split::Train);
    let val_set: Vec<&ImageSample> = manifest.samples(Split::Test);
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }

    let mut params = init_params(&cfg.model, tc.seed)?;
    let mut opt = AdamW::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.weight_decay);
    let mut bank = MemoryBank::new(tc.bank_capacity);
    let contrastive_on = tc.alpha != 0.0 || tc.beta != 0.0;

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0usize;
    'epochs: for epoch in 0..tc.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "epoch", epoch as u64));
        order.shuffle(&mut rng);

        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut tape = Tape::new();
            let tp = TapeParams::load(&mut tape, &params);
            let losses = batch_graph(&mut tape, &tp, cfg, &batch, step, contrastive_on, &bank)?;
            let total = tape.scalar(losses.total);
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {total} at step {step} (epoch {epoch})"
                )));
            }
            final_loss = total;
            let grads = tape.backward(losses.total);
            let named: BTreeMap<String, crate::tape::Arr> = tp
                .vars
                .iter()
                .filter_map(|(name, var)| grads[var.0].clone().map(|g| (name.clone(), g)))
                .collect();
            opt.update(&mut params, &named);
            bank.push_batch(&losses.clean_embeddings);

            log.push(LogRow {
                step,
                epoch,
                lr: opt.lr(),
                l1: losses.l1,
                l_pixel: losses.l_pixel,
                l_instance: losses.l_instance,
                total,
                val_psnr: None,
            });
            step += 1;
            if let Some(max) = tc.max_steps {
                if step >= max {
                    break 'epochs;
                }
            }
        }

        if !val_set.is_empty() {
            let denoiser = ModelDenoiser {
                params: &params,
                cfg: &cfg.model,
                label: "model".into(),
            };
            let val = mean_psnr(&denoiser, &val_set, tc.sigma, tc.seed, cfg.model.image_size)?;
            if let Some(last) = log.last_mut() {
                last.val_psnr = Some(val);
            }
            if val > best_val + 1e-9 {
                best_val = val;
                stall = 0;
            } else {
                stall += 1;
                if stall >= tc.schedule.patience {
                    opt.set_lr(opt.lr() * tc.schedule.factor);
                    stall = 0;
                }
            }
        }
    }

    Ok(TrainResult {
        params,
        bank,
        log,
        final_loss,
        epochs_run,
    })
}

fn mean_psnr(
    denoiser: &dyn Denoiser,
    set: &[&ImageSample],
    sigma: f64,
    seed: u64,
    size: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in set {
        let clean = fit_to_model(s, size);
        let fitted = ImageSample {
            pixels: clean.clone(),
            ..(*s).clone()
        };
        let noisy = eval_noisy(&fitted, sigma, seed);
        let pred = denoiser.denoise(&noisy)?;
        let m = metric_triple(&pred, &clean)?;
        if m.psnr.is_finite() {
            sum += m.psnr;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::INFINITY } else { sum / n as f64 })
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub dataset: String,
    pub sigma: f64,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Images averaged; identical pairs (infinite PSNR) are excluded from
    /// the PSNR mean and counted here.
    pub n_images: usize,
    pub n_psnr_excluded: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,sigma,method,psnr,ssim,rmse,n_images,seed\n");
        for r in &self.rows {
            let psnr = if r.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.4}", r.psnr)
            };
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{},{}\n",
                r.dataset, r.sigma, r.method, psnr, r.ssim, r.rmse, r.n_images, r.seed
            ));
        }
        out
    }
}

/// Per-sigma metric means of a denoiser over the test split.
pub fn evaluate(
    denoiser: &dyn Denoiser,
    test_set: &[&ImageSample],
    sigmas: &[f64],
    seed: u64,
    size: usize,
    dataset: &str,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    for &sigma in sigmas {
        let mut psnr_sum = 0.0;
        let mut psnr_n = 0usize;
        let mut ssim_sum = 0.0;
        let mut rmse_sum = 0.0;
        for s in test_set {
            let m = evaluate_sample(denoiser, s, sigma, seed, size)?.0;
            if m.psnr.is_finite() {
                psnr_sum += m.psnr;
                psnr_n += 1;
            }
            ssim_sum += m.ssim;
            rmse_sum += m.rmse;
        }
        let n = test_set.len();
        rows.push(EvalRow {
            dataset: dataset.into(),
            sigma,
            method: denoiser.name().into(),
            psnr: if psnr_n == 0 {
                f64::INFINITY
            } else {
                psnr_sum / psnr_n as f64
            },
            ssim: ssim_sum / n as f64,
            rmse: rmse_sum / n as f64,
            n_images: n,
            n_psnr_excluded: n - psnr_n,
            seed,
        });
    }
    Ok(EvalReport {
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Metrics (and the denoised image) for one sample at one sigma.
pub fn evaluate_sample(
    denoiser: &dyn Denoiser,
    sample: &ImageSample,
    sigma: f64,
    seed: u64,
    size: usize,
) -> Result<(MetricTriple, Array2<f64>)> {
    let clean = fit_to_model(sample, size);
    let fitted = ImageSample {
        pixels: clean.clone(),
        ..sample.clone()
    };
    let noisy = eval_noisy(&fitted, sigma, seed);
    let pred = denoiser.denoise(&noisy)?;
    Ok((metric_triple(&pred, &clean)?, pred))
}

// ---------------------------------------------------------------- checkpoint

const CKPT_MAGIC: &[u8; 8] = b"DSPKCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: AppConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub struct Checkpoint {
    pub params: Params,
    pub bank: MemoryBank,
    pub meta: CheckpointMeta,
}

/// Named-array archive plus a JSON metadata sidecar (`<path>.meta.json`).
/// Arrays round-trip bit-exactly (little-endian f64).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let names = ckpt.params.names();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        let arr = ckpt.params.get(name);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // memory bank: capacity, insertion counter, entries
    buf.extend_from_slice(&(ckpt.bank.capacity() as u64).to_le_bytes());
    buf.extend_from_slice(&ckpt.bank.inserted().to_le_bytes());
    buf.extend_from_slice(&(ckpt.bank.len() as u64).to_le_bytes());
    let dim = ckpt.bank.entries().next().map(|v| v.len()).unwrap_or(0);
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    for e in ckpt.bank.entries() {
        for v in e.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&ckpt.meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    let meta_path = sidecar_path(path);
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &buf[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let u32_at = |cur: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
    };
    let u64_at = |cur: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
    };
    if take(&mut cur, 8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n_arrays = u32_at(&mut cur)? as usize;
    let mut params = Params::default();
    for _ in 0..n_arrays {
        let name_len = u32_at(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let ndim = u32_at(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64_at(&mut cur)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        params.insert(
            name,
            crate::tape::Arr::from_shape_vec(ndarray::IxDyn(&shape), data).unwrap(),
        );
    }
    let capacity = u64_at(&mut cur)? as usize;
    let inserted = u64_at(&mut cur)?;
    let n_entries = u64_at(&mut cur)? as usize;
    let dim = u64_at(&mut cur)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        entries.push(Array1::from_vec(v));
    }
    let bank = MemoryBank::from_parts(capacity.max(1), entries, inserted);

    let meta_path = sidecar_path(path);
    let meta_text =
        std::fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    Ok(Checkpoint { params, bank, meta })
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub enable_hybrid: bool,
    pub enable_pixel: bool,
    pub enable_instance: bool,
    pub encoder_kind: BlockKind,
    pub decoder_kind: BlockKind,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if (self.enable_pixel || self.enable_instance) && !self.enable_hybrid {
            return Err(Error::Config(
                "pixel/instance losses require the hybrid pipeline".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!(
            "hybrid={} pixel={} instance={} enc={:?} dec={:?}",
            mark(self.enable_hybrid),
            mark(self.enable_pixel),
            mark(self.enable_instance),
            self.encoder_kind,
            self.decoder_kind
        )
    }
}

/// The four module-ablation rows, full model last.
pub fn table3_grid() -> Vec<AblationSpec> {
    let base = |h, p, i| AblationSpec {
        enable_hybrid: h,
        enable_pixel: p,
        enable_instance: i,
        // hybrid off degenerates to the pure-CNN encoder-decoder
        encoder_kind: if h { BlockKind::Transformer } else { BlockKind::Cnn },
        decoder_kind: BlockKind::Cnn,
    };
    vec![
        base(false, false, false),
        base(true, false, false),
        base(true, true, false),
        base(true, true, true),
    ]
}

/// The four encoder/decoder order rows, best (transformer/CNN) last.
pub fn orders_grid() -> Vec<AblationSpec> {
    let order = |enc: BlockKind, dec: BlockKind| {
        let hybrid = !(enc == BlockKind::Cnn && dec == BlockKind::Cnn);
        AblationSpec {
            enable_hybrid: hybrid,
            enable_pixel: hybrid,
            enable_instance: hybrid,
            encoder_kind: enc,
            decoder_kind: dec,
        }
    };
    vec![
        order(BlockKind::Transformer, BlockKind::Transformer),
        order(BlockKind::Cnn, BlockKind::Transformer),
        order(BlockKind::Cnn, BlockKind::Cnn),
        order(BlockKind::Transformer, BlockKind::Cnn),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub hybrid: bool,
    pub pixel: bool,
    pub instance: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("hybrid,pixel,instance,label,psnr,ssim,rmse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.hybrid, r.pixel, r.instance, r.label, r.psnr, r.ssim, r.rmse
        ));
    }
    out
}

fn apply_spec(cfg: &AppConfig, spec: &AblationSpec) -> AppConfig {
    let mut out = cfg.clone();
    out.model.encoder_kind = spec.encoder_kind;
    out.model.decoder_kind = spec.decoder_kind;
    if !spec.enable_pixel {
        out.train.alpha = 0.0;
    }
    if !spec.enable_instance {
        out.train.beta = 0.0;
    }
    out
}

/// Train + evaluate each configuration under one shared seed and data split.
pub fn run_ablation(
    specs: &[AblationSpec],
    cfg: &AppConfig,
    manifest: &DatasetManifest,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for spec in specs {
        spec.validate()?;
        let run_cfg = apply_spec(cfg, spec);
        let result = train(&run_cfg, manifest)?;
        let denoiser = ModelDenoiser {
            params: &result.params,
            cfg: &run_cfg.model,
            label: spec.label(),
        };
        let test: Vec<&ImageSample> = manifest.samples(Split::Test);
        let eval_set = if test.is_empty() {
            manifest.samples(Split::Train)
        } else {
            test
        };
        let report = evaluate(
            &denoiser,
            &eval_set,
            &[cfg.train.sigma],
            cfg.train.seed,
            run_cfg.model.image_size,
            &manifest.source,
        )?;
        let r = &report.rows[0];
        rows.push(AblationRow {
            label: spec.label(),
            hybrid: spec.enable_hybrid,
            pixel: spec.enable_pixel,
            instance: spec.enable_instance,
            psnr: r.psnr,
            ssim: r.ssim,
            rmse: r.rmse,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Beta,
    Depths,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let name = match axis {
        SweepAxis::Alpha => "alpha",
        SweepAxis::Beta => "beta",
        SweepAxis::Depths => "depths",
    };
    let mut out = format!("{name},psnr,ssim,rmse\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{:.4},{:.4},{:.4}\n",
            r.value, r.psnr, r.ssim, r.rmse
        ));
    }
    out
}

pub fn default_sweep_values(axis: SweepAxis) -> Vec<String> {
    match axis {
        SweepAxis::Alpha | SweepAxis::Beta => ["0.1", "0.3", "0.5", "0.7"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        SweepAxis::Depths => [
            "2, 2, 32, 2",
            "2, 4, 32, 2",
            "2, 8, 32, 2",
            "2, 16, 32, 2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    }
}

fn parse_depths(value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad depths {value:?}: {e}")))?;
    if parts.len() != 4 {
        return Err(Error::Config(format!("depths {value:?} must have 4 entries")));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

/// One train+eval per swept value; alpha and beta sweep the loss weights,
/// depths sweeps the per-stage transformer depth tuple.
pub fn hyperparam_sweep(
    axis: SweepAxis,
    values: &[String],
    cfg: &AppConfig,
    manifest: &DatasetManifest,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep values must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for value in values {
        let mut run_cfg = cfg.clone();
        match axis {
            SweepAxis::Alpha => {
                run_cfg.train.alpha = value
                    .parse()
                    .map_err(|e| Error::Config(format!("bad alpha {value:?}: {e}")))?;
            }
            SweepAxis::Beta => {
                run_cfg.train.beta = value
                    .parse()
                    .map_err(|e| Error::Config(format!("bad beta {value:?}: {e}")))?;
            }
            SweepAxis::Depths => {
                run_cfg.model.stage_depths = parse_depths(value)?;
            }
        }
        run_cfg.validate()?;
        let result = train(&run_cfg, manifest)?;
        let denoiser = ModelDenoiser {
            params: &result.params,
            cfg: &run_cfg.model,
            label: format!("sweep {value}"),
        };
        let test: Vec<&ImageSample> = manifest.samples(Split::Test);
        let eval_set = if test.is_empty() {
            manifest.samples(Split::Train)
        } else {
            test
        };
        let report = evaluate(
            &denoiser,
            &eval_set,
            &[cfg.train.sigma],
            cfg.train.seed,
            run_cfg.model.image_size,
            &manifest.source,
        )?;
        let r = &report.rows[0];
        rows.push(SweepRow {
            value: value.clone(),
            psnr: r.psnr,
            ssim: r.ssim,
            rmse: r.rmse,
        });
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phantom_dataset, split_dataset};

    fn tiny_cfg() -> AppConfig {
        let mut cfg = AppConfig::desk();
        cfg.train.epochs = 1;
        cfg.train.max_steps = Some(2);
        cfg.train.batch_size = 2;
        cfg.train.anchor_count = 8;
        cfg.train.bank_capacity = 16;
        cfg
    }

    fn tiny_manifest(n: usize) -> DatasetManifest {
        let m = phantom_dataset(n, 32, 77);
        split_dataset(&m, 0.7, 1).unwrap()
    }

    #[test]
    fn train_smoke_and_determinism() {
        let cfg = tiny_cfg();
        let manifest = tiny_manifest(6);
        let a = train(&cfg, &manifest).unwrap();
        let b = train(&cfg, &manifest).unwrap();
        assert!((a.final_loss - b.final_loss).abs() < 1e-9);
        assert_eq!(a.log.len(), 2);
        assert!(a.final_loss.is_finite());
    }

    #[test]
    fn alpha_beta_zero_matches_pure_l1_gradients() {
        // one batch: gradients of the composite with alpha=beta=0 equal
        // pure-L1 gradients
        let cfg = tiny_cfg();
        let manifest = tiny_manifest(4);
        let batch: Vec<&ImageSample> = manifest.samples(Split::Train);
        let params = init_params(&cfg.model, 3).unwrap();

        let grads_for = |contrastive_on: bool, alpha: f64, beta: f64| {
            let mut run = cfg.clone();
            run.train.alpha = alpha;
            run.train.beta = beta;
            let bank = MemoryBank::new(run.train.bank_capacity);
            let mut tape = Tape::new();
            let tp = TapeParams::load(&mut tape, &params);
            let losses =
                batch_graph(&mut tape, &tp, &run, &batch, 0, contrastive_on, &bank).unwrap();
            let grads = tape.backward(losses.total);
            tp.vars
                .iter()
                .filter_map(|(name, var)| grads[var.0].clone().map(|g| (name.clone(), g)))
                .collect::<BTreeMap<_, _>>()
        };
        let pure = grads_for(false, 0.0, 0.0);
        let composite = grads_for(true, 0.0, 0.0);
        for (name, g) in &pure {
            let c = &composite[name];
            let max = g
                .iter()
                .zip(c.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "{name} differs by {max}");
        }
    }

    #[test]
    fn evaluate_pass_through_is_noisy_baseline() {
        let manifest = tiny_manifest(5);
        let test: Vec<&ImageSample> = manifest.samples(Split::Test);
        let report = evaluate(&PassThrough, &test, &[0.25, 0.5, 0.75], 9, 32, "synthetic").unwrap();
        assert_eq!(report.rows.len(), 3);
        // reordering the test set leaves the means unchanged
        let mut rev = test.clone();
        rev.reverse();
        let report2 = evaluate(&PassThrough, &rev, &[0.25, 0.5, 0.75], 9, 32, "synthetic").unwrap();
        for (a, b) in report.rows.iter().zip(&report2.rows) {
            assert!((a.psnr - b.psnr).abs() < 1e-9);
            assert!((a.ssim - b.ssim).abs() < 1e-12);
        }
        assert!(evaluate(&PassThrough, &[], &[0.5], 9, 32, "x").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let cfg = tiny_cfg();
        let manifest = tiny_manifest(4);
        let result = train(&cfg, &manifest).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            params: result.params.clone(),
            bank: result.bank.clone(),
            meta: CheckpointMeta {
                config: cfg.clone(),
                epoch: result.epochs_run,
                seed: cfg.train.seed,
                metrics: BTreeMap::new(),
            },
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (name, arr) in result.params.iter() {
            assert_eq!(loaded.params.get(name), arr, "{name} not bit-identical");
        }
        assert_eq!(loaded.bank.len(), result.bank.len());
        assert_eq!(loaded.bank.inserted(), result.bank.inserted());
        for (a, b) in loaded.bank.entries().zip(result.bank.entries()) {
            assert_eq!(a, b);
        }
        // evaluation through the reloaded checkpoint is bit-identical
        let test: Vec<&ImageSample> = manifest.samples(Split::Test);
        let d1 = ModelDenoiser { params: &result.params, cfg: &cfg.model, label: "a".into() };
        let d2 = ModelDenoiser { params: &loaded.params, cfg: &cfg.model, label: "b".into() };
        let r1 = evaluate(&d1, &test, &[0.5], 1, 32, "s").unwrap();
        let r2 = evaluate(&d2, &test, &[0.5], 1, 32, "s").unwrap();
        assert_eq!(r1.rows[0].psnr.to_bits(), r2.rows[0].psnr.to_bits());
    }

    #[test]
    fn ablation_grids_shape() {
        let t3 = table3_grid();
        assert_eq!(t3.len(), 4);
        assert!(t3[3].enable_hybrid && t3[3].enable_pixel && t3[3].enable_instance);
        let ord = orders_grid();
        assert_eq!(ord.len(), 4);
        assert_eq!(ord[3].encoder_kind, BlockKind::Transformer);
        assert_eq!(ord[3].decoder_kind, BlockKind::Cnn);
        // invalid nesting rejected
        let bad = AblationSpec {
            enable_hybrid: false,
            enable_pixel: true,
            enable_instance: false,
            encoder_kind: BlockKind::Cnn,
            decoder_kind: BlockKind::Cnn,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn plateau_schedule_lr_non_increasing() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 4;
        cfg.train.max_steps = None;
        cfg.train.schedule.patience = 1;
        let manifest = tiny_manifest(4);
        let result = train(&cfg, &manifest).unwrap();
        let lrs: Vec<f64> = result.log.iter().map(|r| r.lr).collect();
        for w in lrs.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn sweep_degenerate_equals_plain_train() {
        let cfg = tiny_cfg();
        let manifest = tiny_manifest(4);
        let rows = hyperparam_sweep(
            SweepAxis::Alpha,
            &[cfg.train.alpha.to_string()],
            &cfg,
            &manifest,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        // plain train + evaluate with the same alpha gives the same numbers
        let result = train(&cfg, &manifest).unwrap();
        let d = ModelDenoiser { params: &result.params, cfg: &cfg.model, label: "x".into() };
        let test: Vec<&ImageSample> = manifest.samples(Split::Test);
        let rep = evaluate(&d, &test, &[cfg.train.sigma], cfg.train.seed, 32, "s").unwrap();
        assert!((rows[0].psnr - rep.rows[0].psnr).abs() < 1e-9);
    }
}
