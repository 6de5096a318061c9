//! Synthetic multi-object scenes with a controlled co-occurrence graph.

use std::path::Path;

use gama_tensor::{par, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::formats::{self, ByteReader, ByteWriter};

pub const MAX_OBJECTS: usize = 4;
pub const MIN_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; 10] = [
    "disk", "cross", "square", "ring", "triangle", "diamond", "bar", "frame", "xmark", "pillar",
];
pub const DISTRIBUTION_A: &str = "shapes-a";
pub const DISTRIBUTION_B: &str = "shapes-b";

pub(crate) const DATASET_MAGIC: &str = "GAMD";
pub(crate) const DATASET_VERSION: u16 = 1;
const STREAM_LABELS: u64 = 1;
const STREAM_PIXELS: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageDims {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

impl ImageDims {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Glyph {
    Disk,
    Cross,
    Square,
    Ring,
    Triangle,
    Diamond,
    Bar,
    Frame,
    XMark,
    Pillar,
}

const GLYPHS: [Glyph; 10] = [
    Glyph::Disk,
    Glyph::Cross,
    Glyph::Square,
    Glyph::Ring,
    Glyph::Triangle,
    Glyph::Diamond,
    Glyph::Bar,
    Glyph::Frame,
    Glyph::XMark,
    Glyph::Pillar,
];

impl Glyph {
    /// Whether the offset `(dx, dy)` from the glyph centre is inked at half-size `r`.
    pub fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Glyph::Disk => dx * dx + dy * dy <= r * r,
            Glyph::Ring => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= 0.55 * r
            }
            Glyph::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Glyph::Frame => {
                let m = ax.max(ay);
                m <= 0.85 * r && m >= 0.5 * r
            }
            Glyph::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            Glyph::XMark => {
                let band = 0.35 * r * std::f64::consts::SQRT_2;
                ax <= 0.8 * r
                    && ay <= 0.8 * r
                    && ((dx - dy).abs() <= band || (dx + dy).abs() <= band)
            }
            Glyph::Triangle => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) * 0.55,
            Glyph::Diamond => ax + ay <= r,
            Glyph::Bar => ax <= r && ay <= 0.3 * r,
            Glyph::Pillar => ay <= r && ax <= 0.3 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub glyph: Glyph,
    pub color: [f32; 3],
}

/// Per-pixel Gaussian noise of the background and of glyph pixels.
const NOISE_BG: f32 = 0.01;
const NOISE_FG: f32 = 0.015;
const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
    [0.50, 0.20, 0.80],
    [0.10, 0.10, 0.10],
];

/// Rendering style of one scene distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Style {
    palette_shift: usize,
    background: f32,
    size_range: (f64, f64),
    /// Glyph colour blended against the background by a factor drawn from this range.
    contrast: (f64, f64),
}

fn style_for(distribution_id: &str) -> Result<Style> {
    match distribution_id {
        DISTRIBUTION_A => Ok(Style {
            palette_shift: 0,
            background: 0.5,
            size_range: (0.17, 0.23),
            contrast: (0.5, 0.7),
        }),
        DISTRIBUTION_B => Ok(Style {
            palette_shift: 3,
            background: 0.35,
            size_range: (0.14, 0.19),
            contrast: (0.5, 0.7),
        }),
        other => Err(GamaError::config(
            "distribution",
            format!(
                "unknown distribution {other:?}; expected {DISTRIBUTION_A} or {DISTRIBUTION_B}"
            ),
        )),
    }
}

pub fn class_specs(classes: usize, distribution_id: &str) -> Result<Vec<ClassSpec>> {
    if !(MIN_CLASSES..=CLASS_NAMES.len()).contains(&classes) {
        return Err(GamaError::config(
            "classes",
            format!(
                "must be in {MIN_CLASSES}..={}, got {classes}",
                CLASS_NAMES.len()
            ),
        ));
    }
    let style = style_for(distribution_id)?;
    Ok((0..classes)
        .map(|i| ClassSpec {
            class_id: i,
            name: CLASS_NAMES[i].to_string(),
            glyph: GLYPHS[i],
            color: PALETTE[(i + style.palette_shift) % PALETTE.len()],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<bool>,
}

impl Sample {
    pub fn class_ids(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub samples: Vec<Sample>,
    pub distribution_id: String,
    pub class_specs: Vec<ClassSpec>,
    pub dims: ImageDims,
    pub split: Split,
    pub seed: u64,
    pub allowed_pairs: Vec<(usize, usize)>,
}

impl SceneDataset {
    pub fn classes(&self) -> usize {
        self.class_specs.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_specs.iter().map(|c| c.name.clone()).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split.test.iter().map(|&i| &self.samples[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub classes: usize,
    pub samples: usize,
    /// Unordered class pairs allowed to share a scene; `None` selects [`default_pairs`].
    pub allowed_pairs: Option<Vec<(usize, usize)>>,
    pub seed: u64,
    pub dims: ImageDims,
    pub test_fraction: f64,
    /// Relative weights of 1, 2, 3 and 4 objects per scene.
    pub object_mix: [f64; 4],
    pub distribution: String,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            samples: 600,
            allowed_pairs: None,
            seed: 7,
            dims: ImageDims::default(),
            test_fraction: 0.2,
            object_mix: [0.3, 0.5, 0.2, 0.0],
            distribution: DISTRIBUTION_A.to_string(),
        }
    }
}

/// A ring over the classes plus one chord per group of three: 8 pairs for 6 classes.
pub fn default_pairs(classes: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..classes)
        .map(|i| normalize_pair(i, (i + 1) % classes))
        .collect();
    for t in 0..classes / 3 {
        pairs.push(normalize_pair(3 * t, 3 * t + 2));
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn normalize_pair(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Rasterize the given classes into one scene.
pub fn render_scene(
    specs: &[ClassSpec],
    class_ids: &[usize],
    rng: &mut Rng,
    dims: ImageDims,
) -> Result<Sample> {
    render_with_style(specs, class_ids, rng, dims, style_for(DISTRIBUTION_A)?)
}

fn render_with_style(
    specs: &[ClassSpec],
    class_ids: &[usize],
    rng: &mut Rng,
    dims: ImageDims,
    style: Style,
) -> Result<Sample> {
    if class_ids.is_empty() {
        return Err(GamaError::Data("a scene needs at least one object".into()));
    }
    if class_ids.len() > MAX_OBJECTS {
        return Err(GamaError::Data(format!(
            "too many objects: {} > {MAX_OBJECTS}",
            class_ids.len()
        )));
    }
    for (i, &c) in class_ids.iter().enumerate() {
        if c >= specs.len() {
            return Err(GamaError::Data(format!(
                "class id {c} out of range 0..{}",
                specs.len()
            )));
        }
        if class_ids[..i].contains(&c) {
            return Err(GamaError::Data(format!("duplicate class id {c}")));
        }
    }
    if dims.channels != 3 || dims.height < 16 || dims.width < 16 {
        return Err(GamaError::config(
            "dims",
            "scenes need 3 channels and at least 16×16 pixels",
        ));
    }

    let (h, w) = (dims.height, dims.width);
    let plane = h * w;
    let mut pixels = vec![0.0f32; dims.numel()];
    for v in pixels.iter_mut() {
        *v = style.background + NOISE_BG * rng.normal() as f32;
    }

    let side = h.min(w) as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for &c in class_ids {
        let r = side * rng.uniform_range(style.size_range.0, style.size_range.1);
        let mut spot = (0.0, 0.0);
        for _ in 0..64 {
            let cx = rng.uniform_range(r, w as f64 - 1.0 - r);
            let cy = rng.uniform_range(r, h as f64 - 1.0 - r);
            spot = (cx, cy);
            let clear = placed.iter().all(|&(px, py, pr)| {
                ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() >= 0.85 * (pr + r)
            });
            if clear {
                break;
            }
        }
        placed.push((spot.0, spot.1, r));

        let spec = &specs[c];
        let contrast = rng.uniform_range(style.contrast.0, style.contrast.1) as f32;
        for y in 0..h {
            for x in 0..w {
                if spec.glyph.covers(x as f64 - spot.0, y as f64 - spot.1, r) {
                    for ch in 0..3 {
                        pixels[ch * plane + y * w + x] = style.background
                            + (spec.color[ch] - style.background) * contrast
                            + NOISE_FG * rng.normal() as f32;
                    }
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut labels = vec![false; specs.len()];
    for &c in class_ids {
        labels[c] = true;
    }
    Ok(Sample {
        image: Tensor::new(dims.shape(), pixels)?,
        labels,
    })
}

fn validate_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    if pairs.is_empty() {
        return Err(GamaError::config("allowed_pairs", "must be nonempty"));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a == b || a >= classes || b >= classes {
            return Err(GamaError::config(
                "allowed_pairs",
                format!("invalid pair ({a}, {b}) for {classes} classes"),
            ));
        }
        out.push(normalize_pair(a, b));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Sets of `k` classes whose members are pairwise allowed.
fn cliques(classes: usize, pairs: &[(usize, usize)], k: usize) -> Vec<Vec<usize>> {
    let adj = |a: usize, b: usize| pairs.binary_search(&normalize_pair(a, b)).is_ok();
    let mut out = Vec::new();
    let mut stack = Vec::new();
    fn grow(
        start: usize,
        classes: usize,
        k: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        adj: &dyn Fn(usize, usize) -> bool,
    ) {
        if stack.len() == k {
            out.push(stack.clone());
            return;
        }
        for c in start..classes {
            if stack.iter().all(|&s| adj(s, c)) {
                stack.push(c);
                grow(c + 1, classes, k, stack, out, adj);
                stack.pop();
            }
        }
    }
    grow(0, classes, k, &mut stack, &mut out, &adj);
    out
}

fn pick_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn generate_dataset(cfg: &SceneConfig) -> Result<SceneDataset> {
    let specs = class_specs(cfg.classes, &cfg.distribution)?;
    let style = style_for(&cfg.distribution)?;
    let c = cfg.classes;
    if cfg.samples < c {
        return Err(GamaError::config(
            "samples",
            format!("need at least {c} samples for {c} classes"),
        ));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(GamaError::config("test_fraction", "must be in [0, 1)"));
    }
    if cfg.object_mix.iter().any(|w| !w.is_finite() || *w < 0.0)
        || cfg.object_mix.iter().sum::<f64>() <= 0.0
    {
        return Err(GamaError::config(
            "object_mix",
            "weights must be non-negative with a positive sum",
        ));
    }
    let pairs = validate_pairs(c, cfg.allowed_pairs.as_deref().unwrap_or(&default_pairs(c)))?;

    let by_size: Vec<Vec<Vec<usize>>> = (1..=MAX_OBJECTS).map(|k| cliques(c, &pairs, k)).collect();
    let multi = cfg.object_mix[1..].iter().any(|&w| w > 0.0);
    let singles = cfg.object_mix[0] > 0.0;

    // Coverage scenes first: every allowed pair, then every class still missing.
    let mut label_sets: Vec<Vec<usize>> = Vec::new();
    if multi {
        label_sets.extend(pairs.iter().map(|&(a, b)| vec![a, b]));
    }
    for class in 0..c {
        if label_sets.iter().any(|s| s.contains(&class)) {
            continue;
        }
        if singles {
            label_sets.push(vec![class]);
        } else {
            return Err(GamaError::config(
                "allowed_pairs",
                format!("class {class} can never appear: it is in no allowed pair and singleton scenes are disabled"),
            ));
        }
    }
    let n_test = (cfg.samples as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.samples - n_test;
    let coverage = label_sets.len();
    if coverage > n_train {
        return Err(GamaError::config(
            "samples",
            format!("{coverage} coverage scenes do not fit in {n_train} training samples"),
        ));
    }

    let mut label_rng = Rng::substream(cfg.seed, STREAM_LABELS);
    let mut mix = cfg.object_mix;
    for (k, sets) in by_size.iter().enumerate() {
        if sets.is_empty() {
            mix[k] = 0.0;
        }
    }
    if mix.iter().sum::<f64>() <= 0.0 {
        return Err(GamaError::config(
            "object_mix",
            "no scene size is feasible with the allowed pairs",
        ));
    }
    while label_sets.len() < cfg.samples {
        let k = pick_weighted(&mix, &mut label_rng);
        let set = if k == 0 {
            vec![label_rng.below(c)]
        } else {
            let options = &by_size[k];
            let mut s = options[label_rng.below(options.len())].clone();
            label_rng.shuffle(&mut s);
            s
        };
        label_sets.push(set);
    }

    let mut split_rng = Rng::substream(cfg.seed, STREAM_SPLIT);
    let mut free: Vec<usize> = (coverage..cfg.samples).collect();
    split_rng.shuffle(&mut free);
    let mut test: Vec<usize> = free[..n_test].to_vec();
    test.sort_unstable();
    let train: Vec<usize> = (0..cfg.samples)
        .filter(|i| test.binary_search(i).is_err())
        .collect();

    let pixel_root = Rng::substream(cfg.seed, STREAM_PIXELS);
    let indexed: Vec<usize> = (0..cfg.samples).collect();
    let samples = par::map(&indexed, |&i| {
        let mut rng = pixel_root.child(i as u64);
        render_with_style(&specs, &label_sets[i], &mut rng, cfg.dims, style)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(SceneDataset {
        samples,
        distribution_id: cfg.distribution.clone(),
        class_specs: specs,
        dims: cfg.dims,
        split: Split { train, test },
        seed: cfg.seed,
        allowed_pairs: pairs,
    })
}

/// Binary symmetric class co-occurrence indicator with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl CooccurrenceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::zeros(n);
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(GamaError::Data(format!(
                    "pair ({a}, {b}) out of range for {n} classes"
                )));
            }
            m.set_pair(a, b);
        }
        Ok(m)
    }

    /// Build from a dense row-major 0/1 matrix, which must be symmetric with zero diagonal.
    pub fn from_dense(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n {
            return Err(GamaError::Data(format!(
                "{} entries for a {n}×{n} matrix",
                bits.len()
            )));
        }
        let m = Self { n, bits };
        for i in 0..n {
            if m.get(i, i) {
                return Err(GamaError::Data(format!("diagonal entry ({i}, {i}) is set")));
            }
            for j in 0..n {
                if m.get(i, j) != m.get(j, i) {
                    return Err(GamaError::Data(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Set both symmetric entries; self-pairs are ignored.
    pub fn set_pair(&mut self, i: usize, j: usize) {
        if i != j {
            self.bits[i * self.n + j] = true;
            self.bits[j * self.n + i] = true;
        }
    }

    /// Number of nonzero entries, counting both orders of each pair.
    pub fn nonzero(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set pairs `(i, j)` with `i < j`, in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Symmetric co-occurrence of an arbitrary set of label vectors.
    pub fn from_label_sets<'a>(n: usize, labels: impl IntoIterator<Item = &'a [bool]>) -> Self {
        let mut m = Self::zeros(n);
        for l in labels {
            let on: Vec<usize> = l
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect();
            for (a, &i) in on.iter().enumerate() {
                for &j in &on[a + 1..] {
                    m.set_pair(i, j);
                }
            }
        }
        m
    }
}

/// Co-occurrence over the training split.
pub fn compute_cooccurrence(dataset: &SceneDataset) -> Result<CooccurrenceMatrix> {
    let train = dataset.train();
    if train.is_empty() {
        return Err(GamaError::Data("training split is empty".into()));
    }
    Ok(CooccurrenceMatrix::from_label_sets(
        dataset.classes(),
        train.iter().map(|s| s.labels.as_slice()),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub distribution_id: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub allowed_pairs: Vec<(usize, usize)>,
    pub split_indices: Split,
}

fn encode_dataset(d: &SceneDataset) -> Result<Vec<u8>> {
    let c = d.classes();
    let n = d.samples.len();
    if c > u16::MAX as usize
        || n > u32::MAX as usize
        || d.dims.height > u16::MAX as usize
        || d.dims.width > u16::MAX as usize
    {
        return Err(GamaError::Data(
            "dataset dimensions exceed the file format".into(),
        ));
    }
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC.as_bytes());
    w.u16(DATASET_VERSION);
    w.u16(c as u16);
    w.u32(n as u32);
    w.u8(d.dims.channels as u8);
    w.u16(d.dims.height as u16);
    w.u16(d.dims.width as u16);
    for s in &d.samples {
        let mut packed = vec![0u8; c.div_ceil(8)];
        for (i, &b) in s.labels.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.bytes(&packed);
        w.f32s(s.image.data());
    }
    Ok(w.finish())
}

pub fn save_dataset(path: &Path, d: &SceneDataset) -> Result<()> {
    let bytes = encode_dataset(d)?;
    let manifest = DatasetManifest {
        distribution_id: d.distribution_id.clone(),
        seed: d.seed,
        class_names: d.class_names(),
        allowed_pairs: d.allowed_pairs.clone(),
        split_indices: d.split.clone(),
    };
    formats::write_atomic(path, &bytes)?;
    formats::write_json(&formats::sidecar_path(path), &manifest)
}

pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let bytes = formats::read(path)?;
    let manifest: DatasetManifest = formats::read_json(&formats::sidecar_path(path))?;
    decode_dataset(&bytes, manifest)
}

fn decode_dataset(bytes: &[u8], manifest: DatasetManifest) -> Result<SceneDataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let c = r.u16()? as usize;
    let n = r.u32()? as usize;
    let dims = ImageDims {
        channels: r.u8()? as usize,
        height: r.u16()? as usize,
        width: r.u16()? as usize,
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let packed = r.take(c.div_ceil(8))?;
        let labels = (0..c)
            .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
            .collect();
        let image = Tensor::new(dims.shape(), r.f32s(dims.numel())?)?;
        samples.push(Sample { image, labels });
    }
    r.finish()?;

    let class_specs = class_specs(c, &manifest.distribution_id)?;
    if manifest.class_names
        != class_specs
            .iter()
            .map(|s| s.name.clone())
            .collect::<Vec<_>>()
    {
        return Err(GamaError::Data(
            "sidecar class names do not match the class count".into(),
        ));
    }
    let split = manifest.split_indices;
    if split.train.iter().chain(&split.test).any(|&i| i >= n) {
        return Err(GamaError::Data("split index out of range".into()));
    }
    if split.train.iter().any(|i| split.test.contains(i)) {
        return Err(GamaError::Data("train and test splits overlap".into()));
    }
    Ok(SceneDataset {
        samples,
        distribution_id: manifest.distribution_id,
        class_specs,
        dims,
        split,
        seed: manifest.seed,
        allowed_pairs: manifest.allowed_pairs,
    })
}

/// Digest over the binary dataset image and its sidecar manifest.
pub fn manifest_hash(d: &SceneDataset) -> Result<String> {
    let mut bytes = encode_dataset(d)?;
    let manifest = DatasetManifest {
        distribution_id: d.distribution_id.clone(),
        seed: d.seed,
        class_names: d.class_names(),
        allowed_pairs: d.allowed_pairs.clone(),
        split_indices: d.split.clone(),
    };
    bytes.extend_from_slice(serde_json::to_string(&manifest)?.as_bytes());
    Ok(formats::sha256_hex(&bytes))
}

/// Nearest-neighbour resize of a `T×H×W` image.
pub fn resize_nearest(image: &[f32], from: ImageDims, to: ImageDims) -> Result<Vec<f32>> {
    if from.channels != to.channels || image.len() != from.numel() {
        return Err(GamaError::Data(format!("cannot resize {from:?} to {to:?}")));
    }
    if from == to {
        return Ok(image.to_vec());
    }
    let mut out = vec![0.0; to.numel()];
    for c in 0..to.channels {
        for y in 0..to.height {
            let sy = y * from.height / to.height;
            for x in 0..to.width {
                let sx = x * from.width / to.width;
                out[(c * to.height + y) * to.width + x] =
                    image[(c * from.height + sy) * from.width + sx];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            samples: 120,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn render_rejects_bad_class_lists() {
        let specs = class_specs(6, DISTRIBUTION_A).unwrap();
        let mut rng = Rng::seed(1);
        let dims = ImageDims::default();
        assert!(render_scene(&specs, &[], &mut rng, dims).is_err());
        assert!(render_scene(&specs, &[1, 1], &mut rng, dims).is_err());
        assert!(render_scene(&specs, &[0, 1, 2, 3, 4], &mut rng, dims).is_err());
        assert!(render_scene(&specs, &[6], &mut rng, dims).is_err());
    }

    #[test]
    fn single_glyph_scene_is_one_hot_and_inked() {
        let specs = class_specs(6, DISTRIBUTION_A).unwrap();
        let s = render_scene(&specs, &[3], &mut Rng::seed(5), ImageDims::default()).unwrap();
        assert_eq!(s.labels, vec![false, false, false, true, false, false]);
        // Class 3 is yellow: the red channel is well above the gray background somewhere.
        assert!(s.image.data()[..1024].iter().any(|&v| v > 0.75));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = render_scene(&specs, &[3], &mut Rng::seed(5), ImageDims::default()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn default_pairs_for_six_classes() {
        assert_eq!(
            default_pairs(6),
            vec![
                (0, 1),
                (0, 2),
                (0, 5),
                (1, 2),
                (2, 3),
                (3, 4),
                (3, 5),
                (4, 5)
            ]
        );
    }

    #[test]
    fn generated_cooccurrence_matches_allowed_pairs() {
        let cfg = SceneConfig::default();
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.samples.len(), 600);
        assert_eq!(d.split.test.len(), 120);
        let o = compute_cooccurrence(&d).unwrap();
        assert_eq!(o.pairs(), default_pairs(6));
        assert_eq!(o.nonzero(), 16);
        for s in &d.samples {
            let ids = s.class_ids();
            assert!((1..=MAX_OBJECTS).contains(&ids.len()));
            for (a, &i) in ids.iter().enumerate() {
                for &j in &ids[a + 1..] {
                    assert!(d.allowed_pairs.contains(&(i, j)));
                }
            }
        }
    }

    #[test]
    fn singleton_only_dataset_has_empty_cooccurrence() {
        let cfg = SceneConfig {
            samples: 6,
            test_fraction: 0.0,
            object_mix: [1.0, 0.0, 0.0, 0.0],
            ..SceneConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        let o = compute_cooccurrence(&d).unwrap();
        assert_eq!(o.nonzero(), 0);
        for c in 0..6 {
            assert!(d.samples.iter().any(|s| s.labels[c]));
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let bad_c = SceneConfig {
            classes: 3,
            ..small_cfg(1)
        };
        assert!(matches!(
            generate_dataset(&bad_c),
            Err(GamaError::Config { .. })
        ));
        let uncoverable = SceneConfig {
            allowed_pairs: Some(vec![(0, 1)]),
            object_mix: [0.0, 1.0, 0.0, 0.0],
            ..small_cfg(1)
        };
        assert!(generate_dataset(&uncoverable).is_err());
        let empty = SceneConfig {
            allowed_pairs: Some(vec![]),
            ..small_cfg(1)
        };
        assert!(generate_dataset(&empty).is_err());
    }

    #[test]
    fn cooccurrence_from_hand_labels() {
        // cat=0, dog=1, person=2
        let sets = [vec![true, true, false], vec![true, false, true]];
        let o = CooccurrenceMatrix::from_label_sets(3, sets.iter().map(|v| v.as_slice()));
        assert_eq!(o.pairs(), vec![(0, 1), (0, 2)]);
        assert!(o.get(1, 0) && o.get(2, 0) && !o.get(1, 2));
        assert!(o.is_symmetric());
    }

    #[test]
    fn same_config_gives_same_hash() {
        let a = generate_dataset(&small_cfg(3)).unwrap();
        let b = generate_dataset(&small_cfg(3)).unwrap();
        assert_eq!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());
        let c = generate_dataset(&small_cfg(4)).unwrap();
        assert_ne!(manifest_hash(&a).unwrap(), manifest_hash(&c).unwrap());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let d = generate_dataset(&small_cfg(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.gamd");
        save_dataset(&path, &d).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);

        let good = std::fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(GamaError::BadMagic { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(GamaError::UnsupportedVersion(9))
        ));

        std::fs::write(&path, &good[..good.len() - 100]).unwrap();
        assert!(matches!(load_dataset(&path), Err(GamaError::Truncated)));

        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(GamaError::Checksum)));
    }

    #[test]
    fn second_distribution_differs_in_palette() {
        let a = class_specs(6, DISTRIBUTION_A).unwrap();
        let b = class_specs(6, DISTRIBUTION_B).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.name == y.name && x.color != y.color));
    }

    #[test]
    fn resize_identity_and_downsample() {
        let from = ImageDims {
            channels: 1,
            height: 4,
            width: 4,
        };
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(resize_nearest(&img, from, from).unwrap(), img);
        let to = ImageDims {
            channels: 1,
            height: 2,
            width: 2,
        };
        assert_eq!(
            resize_nearest(&img, from, to).unwrap(),
            vec![0.0, 2.0, 8.0, 10.0]
        );
    }
}
