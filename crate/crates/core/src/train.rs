//! Training loop and evaluation on in-memory samples.
//!
//! Each sample of a batch gets its own tape; per-sample gradients are
//! summed in batch order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{dsc, EvalReport};
use crate::network::{argmax_mask, Network};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "AGILE_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub log_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch: 4,
            loss: LossConfig::default(),
            seed: 0,
            log_every: 10,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        LossConfig::new(self.loss.lambda).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean foreground DSC of the batch predictions.
    pub dsc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,dsc\n");
        for r in &self.rows {
            s += &format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.dsc);
        }
        s
    }
}

/// Thread pool sized by `AGILE_THREADS` (default: available cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

struct SampleStep {
    loss: f64,
    grads: Vec<Tensor>,
    dsc: f64,
}

fn sample_step(net: &Network, store: &ParamStore, sample: &SegmentationSample, loss: LossConfig) -> Result<SampleStep> {
    let mut s = Session::training(store);
    let x = s.constant(sample.image.clone());
    let out = net.forward(&mut s, x)?;
    let l = combined_loss(&mut s, out.logits, &out.aux_logits, &sample.label, (sample.height, sample.width), loss)?;
    let value = s.value(l).item()?;
    let pred = argmax_mask(s.value(out.logits));
    let classes = net.cfg.num_classes;
    let fg = (1..classes).map(|c| dsc(&pred, &sample.label, c)).sum::<f64>() / (classes - 1) as f64;
    let grads = if value.is_finite() {
        let g = s.backward(l)?;
        s.param_grads(&g)
    } else {
        Vec::new()
    };
    Ok(SampleStep { loss: value, grads, dsc: fg })
}

/// Trains `store` in place and returns the log.
pub fn train(net: &Network, store: &mut ParamStore, data: &[SegmentationSample], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(net, store, data, cfg, |_| {})
}

/// Like [`train`], calling `on_row` for each logged row as it is produced.
pub fn train_with(
    net: &Network,
    store: &mut ParamStore,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("train_count", "training set is empty"));
    }
    let pool = thread_pool()?;
    let mut opt = AdamW::new(store, cfg.optimizer);
    let mut rng = Rng::derive(cfg.seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i + 1));
                }
                order.reverse();
            }
            batch.push(order.pop().unwrap());
        }
        let frozen: &ParamStore = store;
        let results: Vec<Result<SampleStep>> =
            pool.install(|| batch.par_iter().map(|&i| sample_step(net, frozen, &data[i], cfg.loss)).collect());
        let results: Vec<SampleStep> = results.into_iter().collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        let inv = 1.0 / cfg.batch as f64;
        let mut grads: Vec<Vec<f64>> = results[0].grads.iter().map(|g| g.data().to_vec()).collect();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        let grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&results[0].grads)
            .map(|(g, t)| Tensor::new(t.shape(), g.into_iter().map(|v| v * inv).collect()))
            .collect::<Result<_>>()?;
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        opt.step(store, &grads, lr);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let row = LogRow {
                step,
                lr,
                loss,
                dsc: results.iter().map(|r| r.dsc).sum::<f64>() * inv,
            };
            on_row(&row);
            log.rows.push(row);
        }
    }
    Ok(log)
}

/// Argmax predictions for every sample.
pub fn predict_masks(net: &Network, store: &ParamStore, data: &[SegmentationSample]) -> Result<Vec<Vec<usize>>> {
    let pool = thread_pool()?;
    pool.install(|| {
        data.par_iter()
            .map(|s| Ok(argmax_mask(&net.predict(store, &s.image)?.logits)))
            .collect()
    })
}

pub fn evaluate(net: &Network, store: &ParamStore, data: &[SegmentationSample]) -> Result<(EvalReport, Vec<Vec<usize>>)> {
    let preds = predict_masks(net, store, data)?;
    let (h, w) = data.first().map_or((0, 0), |s| (s.height, s.width));
    let report = EvalReport::from_pairs(
        preds.iter().zip(data).map(|(p, s)| (&p[..], &s.label[..])),
        net.cfg.num_classes,
        h,
        w,
    );
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig { loss: LossConfig { lambda: 2.0 }, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_header() {
        let log = TrainLog {
            rows: vec![LogRow { step: 0, lr: 0.5, loss: 1.25, dsc: 0.0 }],
        };
        assert_eq!(log.to_csv(), "step,lr,loss,dsc\n0,0.5,1.25,0\n");
    }
}
