//! Labeled image sets: binary record files, the synthetic shapes generator,
//! scaling/cropping and minibatching. Images live in `[-1, 1]`.

use std::path::Path;

use crate::distributions::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

/// `images: [N, C, H, W]` in `[-1, 1]`, `labels: [N, K]` with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Tensor<f32>, split: Split) -> Result<Self> {
        if images.rank() != 4 || labels.rank() != 2 || images.batch() != labels.batch() {
            return Err(Error::shape("labeled image set", images.shape(), labels.shape()));
        }
        if images.batch() == 0 {
            return Err(Error::Data("empty image set".into()));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("image values outside [-1, 1]".into()));
        }
        if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(LabeledImageSet { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_labels(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: self.images.select_rows(idx),
            labels: self.labels.select_rows(idx),
            split: self.split,
        }
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn images_as<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        self.images.select_rows(idx).cast()
    }
}

/// Maps a stored byte to `2·b/255 − 1`.
pub fn byte_to_unit(b: u8) -> f32 {
    (2.0 * (b as f64 / 255.0) - 1.0) as f32
}

/// Inverse of [`byte_to_unit`] with rounding and clamping.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Parses records of `label_bytes` class-index bytes followed by `C·H·W`
/// pixel bytes (channel-major). Each label byte is one-hot expanded over
/// `num_classes` and the expansions are concatenated.
pub fn parse_binary_records(
    bytes: &[u8],
    image: [usize; 3],
    label_bytes: usize,
    num_classes: usize,
    split: Split,
) -> Result<LabeledImageSet> {
    let pixels: usize = image.iter().product();
    let record = label_bytes + pixels;
    if bytes.is_empty() {
        return Err(Error::Data("empty record file".into()));
    }
    if pixels == 0 || num_classes == 0 {
        return Err(Error::Data("image and class counts must be positive".into()));
    }
    if bytes.len() % record != 0 {
        return Err(Error::Data(format!(
            "file size {} not divisible by record size {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * pixels);
    let mut labels = vec![0.0f32; n * label_bytes * num_classes];
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        for (j, &c) in rec[..label_bytes].iter().enumerate() {
            if c as usize >= num_classes {
                return Err(Error::Data(format!("record {i}: label {c} >= {num_classes} classes")));
            }
            labels[(i * label_bytes + j) * num_classes + c as usize] = 1.0;
        }
        images.extend(rec[label_bytes..].iter().map(|&b| byte_to_unit(b)));
    }
    let [c, h, w] = image;
    LabeledImageSet::new(
        Tensor::new(vec![n, c, h, w], images)?,
        Tensor::new(vec![n, label_bytes * num_classes], labels)?,
        split,
    )
}

pub fn load_binary_records(
    path: impl AsRef<Path>,
    image: [usize; 3],
    label_bytes: usize,
    num_classes: usize,
    split: Split,
) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_binary_records(&bytes, image, label_bytes, num_classes, split)
}

/// Serializes a set with one-hot label groups of `num_classes` back into records.
pub fn encode_binary_records(set: &LabeledImageSet, num_classes: usize) -> Result<Vec<u8>> {
    let k = set.num_labels();
    if num_classes == 0 || k % num_classes != 0 {
        return Err(Error::Data(format!("{k} labels do not split into groups of {num_classes}")));
    }
    let mut out = Vec::new();
    for i in 0..set.len() {
        for group in set.labels.row(i).chunks(num_classes) {
            let c = group
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| Error::Data(format!("example {i}: label group is not one-hot")))?;
            out.push(c as u8);
        }
        out.extend(set.images.row(i).iter().map(|&v| unit_to_byte(v as f64)));
    }
    Ok(out)
}

/// Shape kinds of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Cross];
}

/// Label layout: `[square, circle, cross, left, bright]`.
pub const SHAPE_LABELS: usize = 5;
pub const LABEL_LEFT: usize = 3;
pub const LABEL_BRIGHT: usize = 4;

pub const SHAPE_BRIGHT: f32 = 0.9;
pub const SHAPE_DARK: f32 = 0.2;
pub const BACKGROUND_LOW: f32 = -1.0;
pub const BACKGROUND_HIGH: f32 = -0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub canvas: usize,
    /// 1 (grayscale) or more; every channel gets the same intensity.
    pub channels: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec {
            canvas: 32,
            channels: 1,
            train: 2000,
            valid: 500,
            test: 500,
            seed: 0,
        }
    }
}

/// Geometry of one rendered shape. The center sits on pixel `(row, col)`
/// so the rendering is symmetric about it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeGeometry {
    pub kind: ShapeKind,
    pub row: usize,
    pub col: usize,
    pub radius: usize,
    pub bright: bool,
}

impl ShapeGeometry {
    /// Whether pixel `(r, c)` belongs to the shape.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let dr = r.abs_diff(self.row);
        let dc = c.abs_diff(self.col);
        let rad = self.radius;
        match self.kind {
            ShapeKind::Square => dr <= rad && dc <= rad,
            ShapeKind::Circle => dr * dr + dc * dc <= rad * rad + rad,
            ShapeKind::Cross => {
                let arm = rad.div_ceil(3);
                (dr <= rad && dc < arm) || (dc <= rad && dr < arm)
            }
        }
    }

    pub fn labels(&self, canvas: usize) -> [f32; SHAPE_LABELS] {
        let mut l = [0.0; SHAPE_LABELS];
        l[ShapeKind::ALL.iter().position(|&k| k == self.kind).expect("kind")] = 1.0;
        l[LABEL_LEFT] = (self.col < canvas / 2) as u8 as f32;
        l[LABEL_BRIGHT] = self.bright as u8 as f32;
        l
    }
}

fn random_geometry(canvas: usize, rng: &mut Rng) -> ShapeGeometry {
    let kind = ShapeKind::ALL[rng.below(3)];
    let bright = rng.coin();
    let left = rng.coin();
    let lo = (canvas / 8).max(2);
    let hi = (canvas * 3 / 16).max(lo);
    let radius = lo + rng.below(hi - lo + 1);
    let half = canvas / 2;
    // Leave a column of margin on each side of the midline.
    let col = if left {
        radius + rng.below(half - 1 - radius)
    } else {
        half + 1 + rng.below(canvas - half - 1 - radius)
    };
    let row = radius + rng.below(canvas - 2 * radius);
    ShapeGeometry {
        kind,
        row,
        col,
        radius,
        bright,
    }
}

/// Renders a shape over a smooth linear-gradient background in
/// `[BACKGROUND_LOW, BACKGROUND_HIGH]` with random direction and offset.
pub fn render_shape(geom: &ShapeGeometry, canvas: usize, rng: &mut Rng) -> Vec<f32> {
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (dy, dx) = angle.sin_cos();
    let span = (BACKGROUND_HIGH - BACKGROUND_LOW) as f64;
    let lo = BACKGROUND_LOW as f64;
    let mid = (canvas as f64 - 1.0) / 2.0;
    let reach = mid * std::f64::consts::SQRT_2;
    let fg = if geom.bright { SHAPE_BRIGHT } else { SHAPE_DARK };
    let mut out = Vec::with_capacity(canvas * canvas);
    for r in 0..canvas {
        for c in 0..canvas {
            if geom.covers(r, c) {
                out.push(fg);
            } else {
                let proj = ((r as f64 - mid) * dy + (c as f64 - mid) * dx) / reach;
                out.push((lo + span * (proj + 1.0) / 2.0).clamp(lo, lo + span) as f32);
            }
        }
    }
    out
}

fn shape_split(spec: &ShapeSpec, split: Split, n: usize) -> Result<(LabeledImageSet, Vec<ShapeGeometry>)> {
    let mut rng = Rng::stream(spec.seed, 100 + split.stream());
    let c = spec.canvas;
    let mut images = Vec::with_capacity(n * spec.channels * c * c);
    let mut labels = Vec::with_capacity(n * SHAPE_LABELS);
    let mut geoms = Vec::with_capacity(n);
    for _ in 0..n {
        let g = random_geometry(c, &mut rng);
        let px = render_shape(&g, c, &mut rng);
        for _ in 0..spec.channels {
            images.extend_from_slice(&px);
        }
        labels.extend_from_slice(&g.labels(c));
        geoms.push(g);
    }
    let set = LabeledImageSet {
        images: Tensor::new(vec![n, spec.channels, c, c], images)?,
        labels: Tensor::new(vec![n, SHAPE_LABELS], labels)?,
        split,
    };
    Ok((set, geoms))
}

/// Generates the split with its ground-truth geometry.
pub fn generate_shapes_with_geometry(spec: &ShapeSpec, split: Split) -> Result<(LabeledImageSet, Vec<ShapeGeometry>)> {
    if spec.canvas < 16 {
        return Err(Error::Data(format!("canvas {} smaller than 16", spec.canvas)));
    }
    if spec.channels == 0 {
        return Err(Error::Data("channels must be positive".into()));
    }
    let n = match split {
        Split::Train => spec.train,
        Split::Valid => spec.valid,
        Split::Test => spec.test,
    };
    if n == 0 {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    shape_split(spec, split, n)
}

/// Deterministic given `spec`; each split uses its own random stream.
pub fn generate_shapes(spec: &ShapeSpec, split: Split) -> Result<LabeledImageSet> {
    Ok(generate_shapes_with_geometry(spec, split)?.0)
}

fn bilinear_resize(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    // Half-pixel centers, edge samples clamped.
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let (r0, r1, fr) = coord(r, nh, h);
        for c in 0..nw {
            let (c0, c1, fc) = coord(c, nw, w);
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push((top * (1.0 - fr) + bot * fr) as f32);
        }
    }
    out
}

/// Bilinear resize of every channel to `scale = [H', W']`, then a center crop
/// to `crop = [h, w]` at offsets `floor((scaled − crop) / 2)`.
pub fn scale_and_crop(images: &Tensor<f32>, scale: [usize; 2], crop: [usize; 2]) -> Result<Tensor<f32>> {
    if images.rank() != 4 {
        return Err(Error::shape("scale_and_crop", &[0, 0, 0, 0], images.shape()));
    }
    let [sh, sw] = scale;
    let [ch, cw] = crop;
    if ch > sh || cw > sw || ch == 0 || cw == 0 {
        return Err(Error::invalid(format!("crop {ch}x{cw} does not fit scaled size {sh}x{sw}")));
    }
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (top, left) = ((sh - ch) / 2, (sw - cw) / 2);
    let mut out = Vec::with_capacity(n * c * ch * cw);
    for plane in images.data().chunks_exact(h * w) {
        let scaled = if (sh, sw) == (h, w) {
            plane.to_vec()
        } else {
            bilinear_resize(plane, h, w, sh, sw)
        };
        for r in top..top + ch {
            out.extend_from_slice(&scaled[r * sw + left..r * sw + left + cw]);
        }
    }
    Tensor::new(vec![n, c, ch, cw], out)
}

/// One epoch of shuffled index batches; the final short batch is dropped.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size {batch_size} must be at least 2")));
    }
    if batch_size > n {
        return Err(Error::invalid(format!("batch size {batch_size} exceeds dataset size {n}")));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
