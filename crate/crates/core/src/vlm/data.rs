// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multimodal tasks and the JSON-lines dataset format.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::vocab;
use crate::error::{CloomError, Result};
use crate::numeric::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Color,
    Shape,
    Count,
    Addition,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Color, Task::Shape, Task::Count, Task::Addition];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Color => "color",
            Task::Shape => "shape",
            Task::Count => "count",
            Task::Addition => "addition",
        }
    }

    /// Prompt text for the task. All prompts share the `the _ is` frame.
    pub fn prompt(self) -> &'static str {
        match self {
            Task::Color => "the color is",
            Task::Shape => "the shape is",
            Task::Count => "the count is",
            Task::Addition => "the sum is",
        }
    }

    /// Answer tokens the task can produce.
    pub fn answer_set(self) -> Vec<usize> {
        match self {
            Task::Color => (0..vocab::COLORS.len()).map(vocab::color_token).collect(),
            Task::Shape => (0..vocab::SHAPES.len()).map(vocab::shape_token).collect(),
            Task::Count => (1..=4).map(vocab::digit_token).collect(),
            Task::Addition => (0..=8).map(vocab::digit_token).collect(),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Task>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Task::from_str)
            .collect()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = CloomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Task::Color),
            "shape" => Ok(Task::Shape),
            "count" => Ok(Task::Count),
            "addition" => Ok(Task::Addition),
            other => Err(CloomError::UnknownTask(other.to_string())),
        }
    }
}

/// `h × w × 3` image in `[0, 1]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn blank(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.w + x) * 3;
        &self.data[i..i + 3]
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.h * self.w * 3 {
            return Err(CloomError::shape(
                "ImageGrid",
                format!("{}x{}x3 needs {} values, got {}", self.h, self.w, self.h * self.w * 3, self.data.len()),
            ));
        }
        if !self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(CloomError::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_base64(&self) -> String {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn from_base64(h: usize, w: usize, b64: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| CloomError::Format(format!("bad base64 image: {e}")))?;
        if bytes.len() != h * w * 3 * 4 {
            return Err(CloomError::Format(format!(
                "image payload has {} bytes, expected {}",
                bytes.len(),
                h * w * 12
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let img = Self { h, w, data };
        img.validate()?;
        Ok(img)
    }
}

/// Inline image encoding used in dataset records and standalone image files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub h: usize,
    pub w: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixels: Option<Vec<f32>>,
}

impl ImageRecord {
    pub fn inline(img: &ImageGrid) -> Self {
        Self {
            h: img.h,
            w: img.w,
            b64: Some(img.to_base64()),
            pixels: None,
        }
    }

    pub fn decode(&self) -> Result<ImageGrid> {
        match (&self.b64, &self.pixels) {
            (Some(b), _) => ImageGrid::from_base64(self.h, self.w, b),
            (None, Some(p)) => {
                let img = ImageGrid {
                    h: self.h,
                    w: self.w,
                    data: p.clone(),
                };
                img.validate()?;
                Ok(img)
            }
            (None, None) => Err(CloomError::Format("image record has neither b64 nor pixels".into())),
        }
    }
}

/// Ground-truth attributes of a rendered sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub operands: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub task: Task,
    pub image: ImageGrid,
    pub prompt: Vec<usize>,
    pub answer: usize,
    pub meta: SampleMeta,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    task: Task,
    image: ImageRecord,
    prompt: Vec<usize>,
    answer: usize,
    #[serde(default)]
    meta: SampleMeta,
}

impl SyntheticSample {
    pub fn to_json_line(&self) -> Result<String> {
        let rec = SampleRecord {
            task: self.task,
            image: ImageRecord::inline(&self.image),
            prompt: self.prompt.clone(),
            answer: self.answer,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: SampleRecord = serde_json::from_str(line)?;
        Ok(Self {
            task: rec.task,
            image: rec.image.decode()?,
            prompt: rec.prompt,
            answer: rec.answer,
            meta: rec.meta,
        })
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn shape_mask(shape: usize, s: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let c = (s as f32 - 1.0) / 2.0;
    for i in 0..s {
        for j in 0..s {
            let (fi, fj) = (i as f32, j as f32);
            let on = match shape {
                0 => true,
                1 => (fi - c).powi(2) + (fj - c).powi(2) <= (s as f32 / 2.0).powi(2) - 0.5,
                2 => (fj - c).abs() <= fi / 2.0 + 0.01,
                3 => (fi - c).abs() < 0.6 || (fj - c).abs() < 0.6,
                4 => (fi - c).abs() + (fj - c).abs() <= s as f32 / 2.0 - 0.4,
                5 => i == 0 || j == 0 || i == s - 1 || j == s - 1,
                _ => unreachable!("shape index"),
            };
            if on {
                px.push((i, j));
            }
        }
    }
    px
}

const DIGIT_GLYPHS: [[&str; 5]; 10] = [
    ["###", "#.#", "#.#", "#.#", "###"],
    [".#.", "##.", ".#.", ".#.", "###"],
    ["###", "..#", "###", "#..", "###"],
    ["###", "..#", "###", "..#", "###"],
    ["#.#", "#.#", "###", "..#", "..#"],
    ["###", "#..", "###", "..#", "###"],
    ["###", "#..", "###", "#.#", "###"],
    ["###", "..#", "..#", "..#", "..#"],
    ["###", "#.#", "###", "#.#", "###"],
    ["###", "#.#", "###", "..#", "###"],
];

fn jitter_color(rng: &mut SeededRng, color: usize) -> [f32; 3] {
    let base = vocab::COLOR_RGB[color];
    let mut out = [0.0; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b + (rng.uniform() - 0.5) * 0.1).clamp(0.0, 1.0);
    }
    out
}

fn noisy_background(rng: &mut SeededRng, h: usize, w: usize) -> ImageGrid {
    let mut img = ImageGrid::blank(h, w);
    for v in img.data.iter_mut() {
        *v = rng.uniform() * 0.08;
    }
    img
}

fn render_shape(rng: &mut SeededRng, h: usize, w: usize, shape: usize, color: usize) -> ImageGrid {
    let mut img = noisy_background(rng, h, w);
    let s = rng.range(5, 7.min(h).min(w));
    let oy = rng.range(0, h - s);
    let ox = rng.range(0, w - s);
    let rgb = jitter_color(rng, color);
    for (i, j) in shape_mask(shape, s) {
        img.set(oy + i, ox + j, rgb);
    }
    img
}

fn render_count(rng: &mut SeededRng, h: usize, w: usize, n: usize) -> (ImageGrid, usize, usize) {
    let mut img = noisy_background(rng, h, w);
    let shape = rng.below(vocab::SHAPES.len());
    let color = rng.below(vocab::COLORS.len());
    let rgb = jitter_color(rng, color);
    let mut slots = [0usize, 1, 2, 3];
    rng.shuffle(&mut slots);
    let (sh, sw) = (h / 2, w / 2);
    let s = 3usize;
    for &slot in &slots[..n] {
        let (by, bx) = ((slot / 2) * sh, (slot % 2) * sw);
        let oy = by + rng.range(0, sh - s);
        let ox = bx + rng.range(0, sw - s);
        for (i, j) in shape_mask(shape, s) {
            img.set(oy + i, ox + j, rgb);
        }
    }
    (img, shape, color)
}

fn render_addition(rng: &mut SeededRng, h: usize, w: usize, a: usize, b: usize) -> (ImageGrid, usize) {
    let mut img = noisy_background(rng, h, w);
    let color = rng.below(vocab::COLORS.len());
    let rgb = jitter_color(rng, color);
    let oy = rng.range(0, h - 5);
    let ox = rng.range(0, w - 11);
    let mut glyph = |digit: usize, x0: usize| {
        for (i, row) in DIGIT_GLYPHS[digit].iter().enumerate() {
            for (j, ch) in row.chars().enumerate() {
                if ch == '#' {
                    img.set(oy + i, x0 + j, rgb);
                }
            }
        }
    };
    glyph(a, ox);
    glyph(b, ox + 8);
    // plus sign between the operands
    let (py, px) = (oy + 1, ox + 4);
    for d in 0..3 {
        img.set(py + 1, px + d, rgb);
        img.set(py + d, px + 1, rgb);
    }
    (img, color)
}

/// Renders one sample of `task` on an `h × w` grid.
pub fn render_sample(task: Task, h: usize, w: usize, rng: &mut SeededRng) -> Result<SyntheticSample> {
    if h < 12 || w < 12 {
        return Err(CloomError::InvalidArgument(format!(
            "image grid {h}x{w} too small for the synthetic tasks (need 12x12)"
        )));
    }
    let prompt = vocab::encode_prompt(task.prompt())?;
    let (image, answer, meta) = match task {
        Task::Color => {
            let color = rng.below(vocab::COLORS.len());
            let shape = rng.below(vocab::SHAPES.len());
            let img = render_shape(rng, h, w, shape, color);
            let meta = SampleMeta {
                color: Some(color),
                shape: Some(shape),
                ..Default::default()
            };
            (img, vocab::color_token(color), meta)
        }
        Task::Shape => {
            let color = rng.below(vocab::COLORS.len());
            let shape = rng.below(vocab::SHAPES.len());
            let img = render_shape(rng, h, w, shape, color);
            let meta = SampleMeta {
                color: Some(color),
                shape: Some(shape),
                ..Default::default()
            };
            (img, vocab::shape_token(shape), meta)
        }
        Task::Count => {
            let n = rng.range(1, 4);
            let (img, shape, color) = render_count(rng, h, w, n);
            let meta = SampleMeta {
                color: Some(color),
                shape: Some(shape),
                count: Some(n),
                ..Default::default()
            };
            (img, vocab::digit_token(n), meta)
        }
        Task::Addition => {
            let a = rng.range(0, 4);
            let b = rng.range(0, 4);
            let (img, color) = render_addition(rng, h, w, a, b);
            let meta = SampleMeta {
                color: Some(color),
                operands: Some((a, b)),
                ..Default::default()
            };
            (img, vocab::digit_token(a + b), meta)
        }
    };
    Ok(SyntheticSample {
        task,
        image,
        prompt,
        answer,
        meta,
    })
}

/// Renders a color-task sample with a fixed color and shape.
pub fn render_color_sample(color: usize, shape: usize, h: usize, w: usize, rng: &mut SeededRng) -> Result<SyntheticSample> {
    let image = render_shape(rng, h, w, shape, color);
    Ok(SyntheticSample {
        task: Task::Color,
        image,
        prompt: vocab::encode_prompt(Task::Color.prompt())?,
        answer: vocab::color_token(color),
        meta: SampleMeta {
            color: Some(color),
            shape: Some(shape),
            ..Default::default()
        },
    })
}

/// Renders an addition sample with fixed operands.
pub fn render_addition_sample(a: usize, b: usize, h: usize, w: usize, rng: &mut SeededRng) -> Result<SyntheticSample> {
    if a > 4 || b > 4 {
        return Err(CloomError::InvalidArgument("addition operands must be 0-4".into()));
    }
    let (image, color) = render_addition(rng, h, w, a, b);
    Ok(SyntheticSample {
        task: Task::Addition,
        image,
        prompt: vocab::encode_prompt(Task::Addition.prompt())?,
        answer: vocab::digit_token(a + b),
        meta: SampleMeta {
            color: Some(color),
            operands: Some((a, b)),
            ..Default::default()
        },
    })
}

/// Generates `count` samples, each task drawn uniformly from `tasks`.
pub fn generate_dataset(tasks: &[Task], count: usize, grid: (usize, usize), rng: &mut SeededRng) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(CloomError::InvalidArgument("dataset count must be positive".into()));
    }
    if tasks.is_empty() {
        return Err(CloomError::InvalidArgument("task mix is empty".into()));
    }
    (0..count)
        .map(|_| {
            let task = tasks[rng.below(tasks.len())];
            render_sample(task, grid.0, grid.1, rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<Task>,
    pub seed: u64,
    pub grid: (usize, usize),
    pub n_train: usize,
    pub n_heldout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl FromStr for Split {
    type Err = CloomError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(CloomError::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Train split uses RNG stream 0 and the held-out split stream 1, so the two
/// never share samples by construction of the generator state.
pub fn make_splits(tasks: &[Task], n_train: usize, n_heldout: usize, grid: (usize, usize), seed: u64) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let train = generate_dataset(tasks, n_train, grid, &mut SeededRng::stream(seed, 0))?;
    let heldout = generate_dataset(tasks, n_heldout, grid, &mut SeededRng::stream(seed, 1))?;
    Ok((train, heldout))
}

pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CloomError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()?).map_err(|e| CloomError::io(path, e))?;
    }
    w.flush().map_err(|e| CloomError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = fs::File::open(path).map_err(|e| CloomError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CloomError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(SyntheticSample::from_json_line(&line).map_err(|e| {
            CloomError::Format(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_dataset_dir(dir: &Path, manifest: &DatasetManifest, train: &[SyntheticSample], heldout: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CloomError::io(dir, e))?;
    write_jsonl(&dir.join(TRAIN_FILE), train)?;
    write_jsonl(&dir.join(HELDOUT_FILE), heldout)?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(manifest)?).map_err(|e| CloomError::io(&p, e))
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SyntheticSample>> {
    let name = match split {
        Split::Train => TRAIN_FILE,
        Split::Heldout => HELDOUT_FILE,
    };
    read_jsonl(&dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = generate_dataset(&Task::ALL, 50, (12, 12), &mut SeededRng::new(7)).unwrap();
        let b = generate_dataset(&Task::ALL, 50, (12, 12), &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn addition_answer_is_sum() {
        let mut rng = SeededRng::new(1);
        let s = render_addition_sample(1, 2, 12, 12, &mut rng).unwrap();
        assert_eq!(vocab::word(s.answer), "3");
        for _ in 0..200 {
            let s = render_sample(Task::Addition, 12, 12, &mut rng).unwrap();
            let (a, b) = s.meta.operands.unwrap();
            assert_eq!(s.answer, vocab::digit_token(a + b));
        }
    }

    #[test]
    fn count_answers_cover_one_to_four() {
        let set = generate_dataset(&[Task::Count], 1000, (12, 12), &mut SeededRng::new(3)).unwrap();
        let mut freq = [0usize; 5];
        for s in &set {
            let n: usize = vocab::word(s.answer).parse().unwrap();
            freq[n] += 1;
        }
        assert_eq!(freq[0], 0);
        assert!(freq[1..].iter().all(|&f| f > 0), "{freq:?}");
    }

    #[test]
    fn count_images_show_n_blobs() {
        // Count lit cells; every shape mask at size 3 has at least 4 pixels,
        // so lit pixels grow with n.
        let mut rng = SeededRng::new(9);
        for _ in 0..50 {
            let s = render_sample(Task::Count, 12, 12, &mut rng).unwrap();
            let lit = (0..144)
                .filter(|&i| s.image.data[i * 3..i * 3 + 3].iter().any(|&v| v > 0.3))
                .count();
            assert!(lit >= 4 * s.meta.count.unwrap(), "lit {lit}");
        }
    }

    #[test]
    fn images_are_valid_and_answers_in_vocab() {
        let set = generate_dataset(&Task::ALL, 200, (12, 12), &mut SeededRng::new(5)).unwrap();
        for s in &set {
            s.image.validate().unwrap();
            assert!(s.answer < vocab::MIN_VOCAB);
            assert!(s.task.answer_set().contains(&s.answer));
        }
    }

    #[test]
    fn unknown_task_is_typed_error() {
        assert!(matches!(Task::parse_list("color,weather"), Err(CloomError::UnknownTask(t)) if t == "weather"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_dataset(&Task::ALL, 20, (12, 12), &mut SeededRng::new(2)).unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &set).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), set);
    }

    #[test]
    fn shapes_are_distinct_at_render_size() {
        for s in 5..=7 {
            let masks: Vec<_> = (0..6).map(|k| shape_mask(k, s)).collect();
            for a in 0..6 {
                for b in a + 1..6 {
                    assert_ne!(masks[a], masks[b], "shapes {a} and {b} collide at size {s}");
                }
            }
        }
    }
}
