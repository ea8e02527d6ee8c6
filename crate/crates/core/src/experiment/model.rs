//! Backbone plus prototype codec trained on the joint objective
//! `L_final = L_ctr + gamma * L_rec`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, DomainMask};
use crate::data::{Batch, Sample, Schema};
use crate::error::{Error, Result};
use crate::nn::{bce_loss, optimizer_step, ParamTensor, Parameterized};
use crate::prototype::{stable_order, PrototypeCodec, PrototypeSet};

/// Losses of one step; `final_loss` is always `ctr + gamma * rec`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ctr: f64,
    pub rec: f64,
    pub final_loss: f64,
}

impl StepLosses {
    pub fn new(ctr: f64, rec: f64, gamma: f64) -> Self {
        Self {
            ctr,
            rec,
            final_loss: ctr + gamma * rec,
        }
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("L_ctr", self.ctr),
            ("L_rec", self.rec),
            ("L_final", self.final_loss),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { name: name.into() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub codec: PrototypeCodec,
}

fn batch_labels(batch: &Batch) -> Vec<f64> {
    batch
        .groups
        .iter()
        .flat_map(|g| g.samples.iter().map(Sample::label_f64))
        .collect()
}

fn batch_orders(batch: &Batch) -> Vec<Vec<usize>> {
    batch
        .groups
        .iter()
        .map(|g| stable_order(&g.samples))
        .collect()
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: BackboneConfig,
        schema: &Schema,
        quotas: &[usize],
        prototypes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if quotas.len() != config.domains {
            return Err(Error::Config(format!(
                "{} quotas for {} domains",
                quotas.len(),
                config.domains
            )));
        }
        let backbone = Backbone::new(config, schema, rng)?;
        let codec = PrototypeCodec::new(quotas, prototypes, rng)?;
        Ok(Self { backbone, codec })
    }

    /// Forward-only losses; used by gradient checks.
    pub fn losses(
        &self,
        batch: &Batch,
        masks: Option<&[DomainMask]>,
        gamma: f64,
    ) -> Result<StepLosses> {
        let (out, _) = self.backbone.forward(batch, masks)?;
        let preds: Vec<f64> = out.preds.concat();
        let (ctr, _) = bce_loss(&preds, &batch_labels(batch))?;
        let (codec_out, _) = self
            .codec
            .forward(&out.domains, &out.reprs, &batch_orders(batch))?;
        Ok(StepLosses::new(ctr, codec_out.rec_loss, gamma))
    }

    /// Forward and backward pass, accumulating gradients of `L_final`.
    /// Returns the losses and the batch's prototypes.
    pub fn accumulate(
        &mut self,
        batch: &Batch,
        masks: Option<&[DomainMask]>,
        gamma: f64,
    ) -> Result<(StepLosses, Vec<PrototypeSet>)> {
        let (out, trace) = self.backbone.forward(batch, masks)?;
        let preds: Vec<f64> = out.preds.concat();
        let (ctr, dpreds_flat) = bce_loss(&preds, &batch_labels(batch))?;
        let (codec_out, codec_trace) =
            self.codec
                .forward(&out.domains, &out.reprs, &batch_orders(batch))?;
        let losses = StepLosses::new(ctr, codec_out.rec_loss, gamma);
        losses.check()?;

        let mut dpreds = Vec::with_capacity(out.preds.len());
        let mut at = 0;
        for p in &out.preds {
            dpreds.push(dpreds_flat[at..at + p.len()].to_vec());
            at += p.len();
        }
        let dreprs = if gamma != 0.0 {
            Some(self.codec.backward(&codec_trace, gamma))
        } else {
            None
        };
        self.backbone.backward(&trace, &dpreds, dreprs.as_deref())?;
        Ok((losses, codec_out.prototypes))
    }

    /// One SGD step on `batch`.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        masks: Option<&[DomainMask]>,
        gamma: f64,
        lr: f64,
    ) -> Result<(StepLosses, Vec<PrototypeSet>)> {
        self.zero_grads();
        let out = self.accumulate(batch, masks, gamma)?;
        optimizer_step(self, lr)?;
        Ok(out)
    }

    /// Prototypes of every domain for a batch holding exactly one quota of
    /// each domain.
    pub fn prototypes(
        &self,
        batch: &Batch,
        masks: Option<&[DomainMask]>,
    ) -> Result<Vec<PrototypeSet>> {
        if batch.groups.len() != self.backbone.domains() {
            return Err(Error::Usage("prototype batches need every domain".into()));
        }
        let (out, _) = self.backbone.forward(batch, masks)?;
        let (codec_out, _) = self
            .codec
            .forward(&out.domains, &out.reprs, &batch_orders(batch))?;
        Ok(codec_out.prototypes)
    }

    /// Click probabilities for `samples` of `domain`.
    pub fn predict(
        &self,
        samples: &[Sample],
        domain: usize,
        masks: Option<&[DomainMask]>,
    ) -> Result<Vec<f64>> {
        self.backbone
            .predict(samples, domain, masks.map(|m| &m[domain]))
    }
}

impl Parameterized for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor)) {
        self.backbone.visit_params(f);
        self.codec.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.backbone.visit_params_mut(f);
        self.codec.visit_params_mut(f);
    }
}
