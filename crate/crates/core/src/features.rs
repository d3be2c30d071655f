// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset scans through the replacement model and per-feature profiles.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{CloomError, Result};
use crate::transcoder::{replacement_forward, TranscoderBank};
use crate::vlm::{vocab, ModelCheckpoint, SyntheticSample};

pub const STORE_MANIFEST: &str = "manifest.json";
pub const STORE_STATS: &str = "stats.jsonl";
pub const STORE_EXAMPLES: &str = "examples";

/// Samples under a content-derived id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    /// Where the samples came from, for display and lazy re-loading.
    pub source: String,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn new(source: impl Into<String>, samples: Vec<SyntheticSample>) -> Result<Self> {
        let mut bytes = Vec::new();
        for s in &samples {
            bytes.extend_from_slice(s.to_json_line()?.as_bytes());
            bytes.push(b'\n');
        }
        Ok(Self {
            id: sha256_hex(&bytes)[..12].to_string(),
            source: source.into(),
            samples,
        })
    }

    pub fn sample_id(&self, index: usize) -> String {
        format!("{}-{index}", self.id)
    }
}

/// Splits `"{dataset}-{index}"`.
pub fn parse_sample_id(id: &str) -> Result<(&str, usize)> {
    let (ds, idx) = id
        .rsplit_once('-')
        .ok_or_else(|| CloomError::InvalidArgument(format!("malformed sample id `{id}`")))?;
    let idx = idx
        .parse()
        .map_err(|_| CloomError::InvalidArgument(format!("malformed sample id `{id}`")))?;
    Ok((ds, idx))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Features(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Activations at or below the floor are not kept as examples.
    pub floor: f32,
    /// Examples retained per feature, highest activation first.
    pub max_examples: usize,
    /// Tokens of left context in text snippets.
    pub context: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            floor: 1e-4,
            max_examples: 200,
            context: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub source: String,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub model_hash: String,
    pub bank_hash: String,
    pub image_grid: (usize, usize),
    pub n_layers: usize,
    pub d_feat: usize,
    pub scope: Scope,
    pub config: ScanConfig,
    pub datasets: Vec<DatasetEntry>,
    pub n_samples: usize,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionHistogram {
    pub image: usize,
    pub text: usize,
    #[serde(rename = "final")]
    pub last: usize,
}

impl PositionHistogram {
    pub fn total(&self) -> usize {
        self.image + self.text + self.last
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub layer: usize,
    pub feature: usize,
    pub active_tokens: usize,
    pub active_samples: usize,
    pub sum_activation: f64,
    pub positions: PositionHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub sample: String,
    pub pos: usize,
    pub activation: f32,
    /// Token and left context, for text positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
    /// Image token index, resolved to a heatmap on demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_token: Option<usize>,
}

fn example_order(a: &ExampleRecord, b: &ExampleRecord) -> std::cmp::Ordering {
    b.activation
        .total_cmp(&a.activation)
        .then_with(|| a.sample.cmp(&b.sample))
        .then(a.pos.cmp(&b.pos))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub manifest: StoreManifest,
    pub stats: BTreeMap<(usize, usize), FeatureStats>,
    pub examples: BTreeMap<(usize, usize), Vec<ExampleRecord>>,
}

impl ActivationStore {
    pub fn new(ck: &ModelCheckpoint, bank: &TranscoderBank, scope: Scope, config: ScanConfig) -> Result<Self> {
        bank.check_matches(&ck.model)?;
        let n_layers = bank.n_layers();
        let d_feat = bank.meta.d_feat;
        let keys: Vec<(usize, usize)> = match &scope {
            Scope::All => (0..n_layers).flat_map(|l| (0..d_feat).map(move |f| (l, f))).collect(),
            Scope::Features(list) => {
                for &(l, f) in list {
                    if l >= n_layers || f >= d_feat {
                        return Err(CloomError::NotFound(format!("feature {f} at layer {l}")));
                    }
                }
                list.clone()
            }
        };
        let stats = keys
            .into_iter()
            .map(|(l, f)| {
                (
                    (l, f),
                    FeatureStats {
                        layer: l,
                        feature: f,
                        ..Default::default()
                    },
                )
            })
            .collect();
        Ok(Self {
            manifest: StoreManifest {
                model_hash: ck.hash()?,
                bank_hash: bank.hash()?,
                image_grid: ck.config().patch_grid,
                n_layers,
                d_feat,
                scope,
                config,
                datasets: Vec::new(),
                n_samples: 0,
                n_tokens: 0,
            },
            stats,
            examples: BTreeMap::new(),
        })
    }

    pub fn contains(&self, layer: usize, feature: usize) -> bool {
        self.stats.contains_key(&(layer, feature))
    }

    pub fn has_dataset(&self, id: &str) -> bool {
        self.manifest.datasets.iter().any(|d| d.id == id)
    }

    /// Adds a dataset's activations. A dataset already in the manifest is
    /// skipped, so repeated scans leave the store unchanged.
    pub fn scan_dataset(&mut self, ck: &ModelCheckpoint, bank: &TranscoderBank, data: &Dataset) -> Result<()> {
        if self.has_dataset(&data.id) {
            return Ok(());
        }
        let (gh, gw) = self.manifest.image_grid;
        if let Some(s) = data.samples.iter().find(|s| (s.image.h, s.image.w) != (gh, gw)) {
            return Err(CloomError::shape(
                "scan",
                format!("dataset image is {}x{}, store expects {gh}x{gw}", s.image.h, s.image.w),
            ));
        }
        let cfg = self.manifest.config;
        let by_layer: BTreeMap<usize, Vec<usize>> = self.stats.keys().fold(BTreeMap::new(), |mut m, &(l, f)| {
            m.entry(l).or_insert_with(Vec::new).push(f);
            m
        });
        let mut new_examples: BTreeMap<(usize, usize), Vec<ExampleRecord>> = BTreeMap::new();
        for (i, s) in data.samples.iter().enumerate() {
            let sample_id = data.sample_id(i);
            let t = ck.config().n_image_tokens + s.prompt.len();
            self.manifest.n_samples += 1;
            self.manifest.n_tokens += t;
            if by_layer.is_empty() {
                continue;
            }
            let rep = replacement_forward(&ck.model, bank, &s.image, &s.prompt, true)?;
            let n_img = rep.trace.n_image;
            for (&l, feats) in &by_layer {
                let row = &rep.codes[l];
                for &f in feats {
                    let st = self.stats.get_mut(&(l, f)).expect("scoped key");
                    let mut fired = false;
                    for (p, code) in row.iter().enumerate() {
                        let z = code.get(f);
                        if z <= 0.0 {
                            continue;
                        }
                        fired = true;
                        st.active_tokens += 1;
                        st.sum_activation += z as f64;
                        if p < n_img {
                            st.positions.image += 1;
                        } else if p == t - 1 {
                            st.positions.last += 1;
                        } else {
                            st.positions.text += 1;
                        }
                        if z > cfg.floor {
                            new_examples.entry((l, f)).or_default().push(ExampleRecord {
                                sample: sample_id.clone(),
                                pos: p,
                                activation: z,
                                snippet: (p >= n_img).then(|| snippet(&s.prompt, n_img, p, cfg.context)),
                                image_token: (p < n_img).then_some(p),
                            });
                        }
                    }
                    st.active_samples += fired as usize;
                }
            }
        }
        for (key, mut recs) in new_examples {
            let slot = self.examples.entry(key).or_default();
            slot.append(&mut recs);
            slot.sort_by(example_order);
            slot.truncate(cfg.max_examples);
        }
        self.manifest.datasets.push(DatasetEntry {
            id: data.id.clone(),
            source: data.source.clone(),
            n_samples: data.samples.len(),
        });
        Ok(())
    }

    pub fn profile(&self, layer: usize, feature: usize, k: usize) -> Result<FeatureProfile> {
        let st = self
            .stats
            .get(&(layer, feature))
            .ok_or_else(|| CloomError::NotFound(format!("feature {feature} at layer {layer} was not scanned")))?;
        let n_tok = self.manifest.n_tokens;
        let n_smp = self.manifest.n_samples;
        let top = self
            .examples
            .get(&(layer, feature))
            .map(|v| v.iter().take(k).cloned().collect())
            .unwrap_or_default();
        Ok(FeatureProfile {
            layer,
            feature,
            frequency: if n_tok == 0 { 0.0 } else { st.active_tokens as f64 / n_tok as f64 },
            sample_frequency: if n_smp == 0 { 0.0 } else { st.active_samples as f64 / n_smp as f64 },
            mean_activation: if st.active_tokens == 0 {
                0.0
            } else {
                st.sum_activation / st.active_tokens as f64
            },
            active_tokens: st.active_tokens,
            positions: st.positions,
            top,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let ex_dir = dir.join(STORE_EXAMPLES);
        fs::create_dir_all(&ex_dir).map_err(|e| CloomError::io(&ex_dir, e))?;
        let p = dir.join(STORE_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| CloomError::io(&p, e))?;
        write_lines(&dir.join(STORE_STATS), self.stats.values())?;
        for entry in fs::read_dir(&ex_dir).map_err(|e| CloomError::io(&ex_dir, e))? {
            let path = entry.map_err(|e| CloomError::io(&ex_dir, e))?.path();
            fs::remove_file(&path).map_err(|e| CloomError::io(&path, e))?;
        }
        for ((l, f), recs) in &self.examples {
            write_lines(&ex_dir.join(format!("{l}_{f}.jsonl")), recs.iter())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(STORE_MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| CloomError::io(&p, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        let stats = read_lines::<FeatureStats>(&dir.join(STORE_STATS))?
            .into_iter()
            .map(|s| ((s.layer, s.feature), s))
            .collect::<BTreeMap<_, _>>();
        let mut examples = BTreeMap::new();
        for &key in stats.keys() {
            let path = dir.join(STORE_EXAMPLES).join(format!("{}_{}.jsonl", key.0, key.1));
            if path.exists() {
                examples.insert(key, read_lines::<ExampleRecord>(&path)?);
            }
        }
        Ok(Self {
            manifest,
            stats,
            examples,
        })
    }
}

fn snippet(prompt: &[usize], n_img: usize, pos: usize, context: usize) -> String {
    let start = pos.saturating_sub(context);
    (start..=pos)
        .map(|p| if p < n_img { "<img>" } else { vocab::word(prompt[p - n_img]) })
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_lines<'a, T: Serialize + 'a>(path: &Path, items: impl Iterator<Item = &'a T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CloomError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        writeln!(w, "{}", serde_json::to_string(it)?).map_err(|e| CloomError::io(path, e))?;
    }
    w.flush().map_err(|e| CloomError::io(path, e))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| CloomError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CloomError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CloomError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub layer: usize,
    pub feature: usize,
    /// Active tokens over scanned tokens.
    pub frequency: f64,
    /// Samples with at least one active token over scanned samples.
    pub sample_frequency: f64,
    pub mean_activation: f64,
    pub active_tokens: usize,
    pub positions: PositionHistogram,
    pub top: Vec<ExampleRecord>,
}

/// Builds a store over `data` restricted to `scope`.
pub fn scan(
    ck: &ModelCheckpoint,
    bank: &TranscoderBank,
    data: &Dataset,
    scope: Scope,
    config: ScanConfig,
) -> Result<ActivationStore> {
    let mut store = ActivationStore::new(ck, bank, scope, config)?;
    store.scan_dataset(ck, bank, data)?;
    Ok(store)
}

/// Merges a curated dataset into the store's statistics.
pub fn inject_curated(
    store: &mut ActivationStore,
    ck: &ModelCheckpoint,
    bank: &TranscoderBank,
    extra: &Dataset,
) -> Result<()> {
    let hash = ck.hash()?;
    if hash != store.manifest.model_hash {
        return Err(CloomError::InvalidArgument("store was built with a different checkpoint".into()));
    }
    store.scan_dataset(ck, bank, extra)
}

/// Feature list of an attribution graph as a scope.
pub fn graph_scope(graph: &crate::attribution::AttributionGraph) -> Scope {
    let mut keys: Vec<(usize, usize)> = graph
        .nodes
        .iter()
        .filter_map(|n| Some((n.layer?, n.feature?)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    Scope::Features(keys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_ids_round_trip() {
        assert_eq!(parse_sample_id("abc123-17").unwrap(), ("abc123", 17));
        assert!(parse_sample_id("nodash").is_err());
        assert!(parse_sample_id("a-b").is_err());
    }

    #[test]
    fn snippet_uses_left_context() {
        let prompt = vocab::encode_prompt("the color is").unwrap();
        assert_eq!(snippet(&prompt, 2, 5, 8), "<img> <img> <bos> the color is");
        assert_eq!(snippet(&prompt, 2, 5, 1), "color is");
    }

    #[test]
    fn example_order_is_total() {
        let r = |s: &str, p, a| ExampleRecord {
            sample: s.into(),
            pos: p,
            activation: a,
            snippet: None,
            image_token: None,
        };
        let mut v = vec![r("b", 0, 1.0), r("a", 1, 1.0), r("a", 0, 1.0), r("c", 0, 2.0)];
        v.sort_by(example_order);
        let keys: Vec<_> = v.iter().map(|e| (e.sample.as_str(), e.pos)).collect();
        assert_eq!(keys, vec![("c", 0), ("a", 0), ("a", 1), ("b", 0)]);
    }

    #[test]
    fn histogram_total() {
        let h = PositionHistogram {
            image: 2,
            text: 3,
            last: 1,
        };
        assert_eq!(h.total(), 6);
        assert_eq!(serde_json::to_value(h).unwrap()["final"], 1);
    }
}
