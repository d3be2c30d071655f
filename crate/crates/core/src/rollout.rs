// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention rollout over the vision encoder and per-token heatmaps.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CloomError, Result};
use crate::numeric::Tensor;
use crate::vlm::VisionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Number of final encoder layers in the product.
    pub k: usize,
    /// Fraction of heads, lowest mean entropy first, averaged per layer.
    pub q: f64,
    /// Pooling block applied to each map before upsampling.
    pub b: usize,
    /// Output `(height, width)`; `None` keeps the patch grid.
    pub output: Option<(usize, usize)>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            k: 2,
            q: 0.5,
            b: 1,
            output: None,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if self.k == 0 || self.k > n_layers {
            return Err(CloomError::InvalidArgument(format!(
                "K = {} must be in 1..={n_layers}",
                self.k
            )));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(CloomError::InvalidArgument(format!("q = {} must be in (0, 1]", self.q)));
        }
        if n_selected(self.q, n_heads) == 0 {
            return Err(CloomError::InvalidArgument("q selects no heads".into()));
        }
        if self.b == 0 {
            return Err(CloomError::InvalidArgument("pooling block must be positive".into()));
        }
        Ok(())
    }
}

fn n_selected(q: f64, heads: usize) -> usize {
    ((q * heads as f64).ceil() as usize).min(heads)
}

/// Row-major square matrix in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Square {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Square {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &Square) -> Square {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Square { n, data: out }
    }

    /// `rownorm(self + I)`.
    pub fn residual_normalized(&self) -> Square {
        let n = self.n;
        let mut out = self.clone();
        for i in 0..n {
            out.data[i * n + i] += 1.0;
            let s: f64 = out.row(i).iter().sum();
            for v in &mut out.data[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
        out
    }
}

/// Mean Shannon entropy (natural log) of the attention rows of each head of
/// a `[heads, T, T]` pattern.
pub fn head_entropy(att: &Tensor) -> Result<Vec<f64>> {
    let s = att.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(CloomError::shape("head_entropy", format!("expected [H, T, T], got {s:?}")));
    }
    let (h, t) = (s[0], s[1]);
    let mut out = Vec::with_capacity(h);
    for hh in 0..h {
        let mut total = 0.0f64;
        for r in 0..t {
            let row = &att.data()[(hh * t + r) * t..(hh * t + r + 1) * t];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0) {
                return Err(CloomError::InvalidArgument(format!(
                    "head {hh} row {r} is not a distribution (sum {sum})"
                )));
            }
            total -= row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p as f64 * (p as f64).ln())
                .sum::<f64>();
        }
        out.push(total / t as f64);
    }
    Ok(out)
}

/// The `ceil(q·H)` heads with lowest entropy, ties to the lower index, in
/// ascending head order.
pub fn select_heads(entropy: &[f64], q: f64) -> Vec<usize> {
    let m = n_selected(q, entropy.len());
    let mut idx: Vec<usize> = (0..entropy.len()).collect();
    idx.sort_by(|&a, &b| entropy[a].total_cmp(&entropy[b]).then(a.cmp(&b)));
    let mut sel = idx[..m].to_vec();
    sel.sort_unstable();
    sel
}

/// `Ã` of one layer over the visual sub-matrix (prefix tokens dropped).
pub fn layer_matrix(att: &Tensor, q: f64, n_prefix: usize) -> Result<(Square, Vec<usize>)> {
    let ent = head_entropy(att)?;
    let heads = select_heads(&ent, q);
    let t = att.shape()[1];
    if n_prefix >= t {
        return Err(CloomError::InvalidArgument(format!("{n_prefix} prefix tokens of {t}")));
    }
    let n = t - n_prefix;
    let mut avg = vec![0.0f64; n * n];
    for &h in &heads {
        for i in 0..n {
            for j in 0..n {
                avg[i * n + j] += att.data()[(h * t + i + n_prefix) * t + j + n_prefix] as f64;
            }
        }
    }
    for v in &mut avg {
        *v /= heads.len() as f64;
    }
    Ok((Square { n, data: avg }.residual_normalized(), heads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub matrix: Square,
    /// Selected heads per layer in the window, earliest layer first.
    pub heads: Vec<Vec<usize>>,
}

/// `R = Ã_{L−K+1} ··· Ã_L` over the last `K` encoder layers.
pub fn rollout(vision: &VisionTrace, cfg: &RolloutConfig) -> Result<Rollout> {
    let nl = vision.attn.len();
    let heads = vision.attn.first().map(|a| a.shape()[0]).unwrap_or(0);
    cfg.validate(nl, heads)?;
    let mut r: Option<Square> = None;
    let mut selected = Vec::new();
    for att in &vision.attn[nl - cfg.k..] {
        let (m, h) = layer_matrix(att, cfg.q, vision.n_prefix)?;
        selected.push(h);
        r = Some(match r {
            None => m,
            Some(prev) => prev.matmul(&m),
        });
    }
    Ok(Rollout {
        matrix: r.expect("k >= 1"),
        heads: selected,
    })
}

/// Layout of encoder tokens and their grouping into decoder image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub grid: (usize, usize),
    /// Encoder tokens per decoder token along each axis.
    pub token_block: usize,
}

impl Geometry {
    pub fn from_trace(v: &VisionTrace) -> Self {
        Self {
            grid: v.grid,
            token_block: v.pool_block,
        }
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.grid.0 / self.token_block, self.grid.1 / self.token_block)
    }

    pub fn n_tokens(&self) -> usize {
        let (a, b) = self.token_grid();
        a * b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub token: usize,
    /// `(row, col)` of the token in the decoder token grid.
    pub cell: (usize, usize),
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSet {
    pub maps: Vec<Heatmap>,
}

/// Mean of non-overlapping `b × b` blocks of an `h × w` map.
pub fn pool_map(x: &[f64], h: usize, w: usize, b: usize) -> Result<Vec<f64>> {
    if b == 0 || h % b != 0 || w % b != 0 || x.len() != h * w {
        return Err(CloomError::shape(
            "pool_map",
            format!("{h}x{w} map of length {} with block {b}", x.len()),
        ));
    }
    let (ph, pw) = (h / b, w / b);
    let mut out = vec![0.0; ph * pw];
    let inv = 1.0 / (b * b) as f64;
    for y in 0..h {
        for xx in 0..w {
            out[(y / b) * pw + xx / b] += x[y * w + xx] * inv;
        }
    }
    Ok(out)
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn upsample_bilinear(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = x[y0 * w + x0] * (1.0 - tx) + x[y0 * w + x1] * tx;
            let bot = x[y1 * w + x0] * (1.0 - tx) + x[y1 * w + x1] * tx;
            out[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// One map per decoder image token: the mean rollout row of the token's
/// encoder patches, pooled, upsampled and max-normalized.
pub fn token_heatmaps(r: &Square, geom: &Geometry, cfg: &RolloutConfig) -> Result<HeatmapSet> {
    let (gh, gw) = geom.grid;
    let tb = geom.token_block;
    if tb == 0 || gh % tb != 0 || gw % tb != 0 || r.n != gh * gw {
        return Err(CloomError::shape(
            "token_heatmaps",
            format!("R is {}x{0}, grid {gh}x{gw}, token block {tb}", r.n),
        ));
    }
    let b = cfg.b;
    if b == 0 || gh % b != 0 || gw % b != 0 {
        return Err(CloomError::shape(
            "token_heatmaps",
            format!("grid {gh}x{gw} not divisible by pooling block {b}"),
        ));
    }
    let (th, tw) = geom.token_grid();
    let (ph, pw) = (gh / b, gw / b);
    let (oh, ow) = cfg.output.unwrap_or((gh, gw));
    let mut maps = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut row = vec![0.0f64; r.n];
            for dy in 0..tb {
                for dx in 0..tb {
                    let p = (ty * tb + dy) * gw + tx * tb + dx;
                    for (a, v) in row.iter_mut().zip(r.row(p)) {
                        *a += v / (tb * tb) as f64;
                    }
                }
            }
            let pooled = pool_map(&row, gh, gw, b)?;
            let up = upsample_bilinear(&pooled, ph, pw, oh, ow);
            let max = up.iter().copied().fold(0.0f64, f64::max);
            if max <= 0.0 {
                return Err(CloomError::InvalidArgument(format!(
                    "heatmap of token {} is all zero",
                    ty * tw + tx
                )));
            }
            maps.push(Heatmap {
                token: ty * tw + tx,
                cell: (ty, tx),
                h: oh,
                w: ow,
                data: up.iter().map(|v| (v / max) as f32).collect(),
            });
        }
    }
    Ok(HeatmapSet { maps })
}

/// Binary PGM (`P5`), 8-bit, `round(255 · v)`.
pub fn encode_pgm(map: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend(map.data.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Parses a binary PGM with maxval 255 into `(h, w, values in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| CloomError::Format(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = bytes.get(i..i + w * h).ok_or_else(|| bad("pixel data truncated"))?;
    Ok((h, w, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapIndexEntry {
    pub token: usize,
    pub file: String,
    pub cell: (usize, usize),
}

/// Writes `tok_{i}.pgm` per map plus `index.json`.
pub fn export_heatmaps(set: &HeatmapSet, dir: &Path) -> Result<Vec<HeatmapIndexEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| CloomError::io(dir, e))?;
    let mut index = Vec::with_capacity(set.maps.len());
    for m in &set.maps {
        let name = format!("tok_{}.pgm", m.token);
        let path = dir.join(&name);
        let mut f = std::fs::File::create(&path).map_err(|e| CloomError::io(&path, e))?;
        f.write_all(&encode_pgm(m)).map_err(|e| CloomError::io(&path, e))?;
        index.push(HeatmapIndexEntry {
            token: m.token,
            file: name,
            cell: m.cell,
        });
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| CloomError::io(&path, e))?;
    Ok(index)
}

pub fn import_heatmaps(dir: &Path) -> Result<HeatmapSet> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CloomError::io(&path, e))?;
    let index: Vec<HeatmapIndexEntry> = serde_json::from_str(&text)?;
    let mut maps = Vec::with_capacity(index.len());
    for e in index {
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| CloomError::io(&p, err))?;
        let (h, w, data) = decode_pgm(&bytes)?;
        maps.push(Heatmap {
            token: e.token,
            cell: e.cell,
            h,
            w,
            data,
        });
    }
    Ok(HeatmapSet { maps })
}
