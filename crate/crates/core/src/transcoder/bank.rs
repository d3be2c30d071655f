// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Transcoder;
use crate::container::{sha256_hex, Container};
use crate::error::{CloomError, Result};
use crate::vlm::Model;

pub const BANK_KIND: &str = "transcoder_bank";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub k: usize,
    pub expansion: usize,
    pub d_model: usize,
    pub d_feat: usize,
    /// Hash of the checkpoint the bank was trained against.
    pub model_hash: String,
    pub text_only: bool,
    pub lr: f32,
    pub batch_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatPoint {
    pub step: usize,
    pub fvu: f32,
    /// Percentage of dead latents; absent before any training step.
    pub dead_pct: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub steps: usize,
    pub curve: Vec<StatPoint>,
}

impl LayerStats {
    pub fn last(&self) -> Option<StatPoint> {
        self.curve.last().copied()
    }
}

/// One transcoder per decoder layer plus training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscoderBank {
    pub meta: BankMeta,
    pub transcoders: Vec<Transcoder>,
    pub stats: Vec<LayerStats>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    layer: usize,
    k: usize,
    d_feat: usize,
    tensors: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BankSection {
    transcoder: Vec<ManifestLayer>,
    stats: Vec<LayerStats>,
}

fn tensor_names(layer: usize) -> [String; 4] {
    ["w_enc", "b_enc", "w_dec", "b_dec"].map(|n| format!("tc.{layer}.{n}"))
}

impl TranscoderBank {
    pub fn n_layers(&self) -> usize {
        self.transcoders.len()
    }

    pub fn layer(&self, l: usize) -> Result<&Transcoder> {
        self.transcoders
            .get(l)
            .ok_or_else(|| CloomError::NotFound(format!("transcoder for layer {l}")))
    }

    /// Checks that the bank has one transcoder per decoder layer of `model`
    /// and matching widths.
    pub fn check_matches(&self, model: &Model) -> Result<()> {
        let n = model.config.n_decoder_layers;
        if self.transcoders.len() != n {
            return Err(CloomError::LayerMismatch {
                model: n,
                bank: self.transcoders.len(),
            });
        }
        for tc in &self.transcoders {
            if tc.d_model() != model.config.d_model {
                return Err(CloomError::shape(
                    "transcoder bank",
                    format!(
                        "layer {} reads width {}, model has d_model {}",
                        tc.layer,
                        tc.d_model(),
                        model.config.d_model
                    ),
                ));
            }
        }
        Ok(())
    }

    /// `{layer, step, fvu, dead_pct}` records, one JSON object per line.
    pub fn stats_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.stats {
            for p in &s.curve {
                let rec = serde_json::json!({
                    "layer": s.layer,
                    "step": p.step,
                    "fvu": p.fvu,
                    "dead_pct": p.dead_pct,
                });
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = Vec::new();
        let mut manifest = Vec::new();
        for tc in &self.transcoders {
            let names = tensor_names(tc.layer);
            let parts = [&tc.w_enc, &tc.b_enc, &tc.w_dec, &tc.b_dec];
            for (n, t) in names.iter().zip(parts) {
                tensors.push((n.clone(), t.clone()));
            }
            manifest.push(ManifestLayer {
                layer: tc.layer,
                k: tc.k,
                d_feat: tc.d_feat(),
                tensors: names.to_vec(),
            });
        }
        let section = BankSection {
            transcoder: manifest,
            stats: self.stats.clone(),
        };
        Ok(Container {
            kind: BANK_KIND.into(),
            config: serde_json::to_value(&self.meta)?,
            meta: serde_json::to_value(&section)?,
            tensors,
        })
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(BANK_KIND)?;
        let meta: BankMeta = serde_json::from_value(c.config.clone())?;
        let section: BankSection = serde_json::from_value(c.meta.clone())?;
        let mut transcoders = Vec::with_capacity(section.transcoder.len());
        for (i, entry) in section.transcoder.iter().enumerate() {
            if entry.layer != i {
                return Err(CloomError::Format(format!(
                    "transcoder manifest entry {i} is for layer {}",
                    entry.layer
                )));
            }
            let [we, be, wd, bd] = tensor_names(i);
            let tc = Transcoder {
                layer: i,
                k: entry.k,
                w_enc: c.take(&we)?,
                b_enc: c.take(&be)?,
                w_dec: c.take(&wd)?,
                b_dec: c.take(&bd)?,
            };
            tc.validate()?;
            if tc.d_feat() != entry.d_feat {
                return Err(CloomError::ManifestMismatch {
                    name: we,
                    detail: format!("d_feat {} vs manifest {}", tc.d_feat(), entry.d_feat),
                });
            }
            transcoders.push(tc);
        }
        if let Some((extra, _)) = c.tensors.first() {
            return Err(CloomError::Format(format!("unexpected tensor `{extra}` in bank container")));
        }
        Ok(Self {
            meta,
            transcoders,
            stats: section.stats,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn save_bank(bank: &TranscoderBank, path: &Path) -> Result<()> {
    bank.to_container()?.save(path)
}

pub fn load_bank(path: &Path) -> Result<TranscoderBank> {
    TranscoderBank::from_container(Container::load(path)?)
}
