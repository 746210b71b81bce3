//! Dataset ingestion and preparation: MNIST IDX files, resizing, the two
//! split protocols, and synthetic Hounsfield-unit ellipse phantoms.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::radon::{Domain, ImageGrid, DEFAULT_PITCH_MM};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of MNIST images the experiments draw from.
pub const EXPERIMENT_POOL: usize = 48_000;
pub const RANDOM_SPLIT_TRAIN: usize = 43_000;
pub const RANDOM_SPLIT_TEST: usize = 5_000;

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 2000.0;

/// An image together with its digit label (MNIST) or index (phantoms).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageGrid,
    pub label: u32,
}

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let header = |at| be_u32(bytes, at).ok_or_else(|| Error::format("idx images", "truncated header"));
    let magic = header(0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("idx images", format!("bad magic 0x{magic:08x}")));
    }
    let (count, rows, cols) = (header(4)? as usize, header(8)? as usize, header(12)? as usize);
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            "idx images",
            format!("truncated: expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = |at| be_u32(bytes, at).ok_or_else(|| Error::format("idx labels", "truncated header"));
    let magic = header(0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("idx labels", format!("bad magic 0x{magic:08x}")));
    }
    let count = header(4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            "idx labels",
            format!("truncated: expected {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pairs an IDX image file with its label file. Pixels are scaled by 1/255.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    load_mnist_prefix(images_path, labels_path, usize::MAX)
}

/// Like [`load_mnist`] but keeps only the first `limit` records.
pub fn load_mnist_prefix(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Vec<LabeledImage>> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    mnist_records(&images, &labels, limit)
}

pub fn mnist_records(images: &IdxImages, labels: &[u8], limit: usize) -> Result<Vec<LabeledImage>> {
    if images.count != labels.len() {
        return Err(Error::format(
            "mnist",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    if images.rows != images.cols {
        return Err(Error::format(
            "mnist",
            format!("non-square images {}x{}", images.rows, images.cols),
        ));
    }
    let side = images.rows;
    images
        .pixels
        .chunks(side * side)
        .zip(labels)
        .take(limit)
        .map(|(px, &label)| {
            if label > 9 {
                return Err(Error::format("mnist", format!("label {label} outside 0..=9")));
            }
            let values = px.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(LabeledImage {
                image: ImageGrid::new(side, DEFAULT_PITCH_MM, values, Domain::Normalized)?,
                label: label as u32,
            })
        })
        .collect()
}

/// Bilinear resampling with corner-aligned sample positions. Normalized
/// images are clamped into `[0, 1]`.
pub fn resize_bilinear(img: &ImageGrid, target: usize) -> Result<ImageGrid> {
    if target < 2 {
        return Err(Error::invalid(format!("resize target must be at least 2, got {target}")));
    }
    let src = img.n();
    let ratio = (src - 1) as f64 / (target - 1) as f64;
    let mut values = Vec::with_capacity(target * target);
    for r in 0..target {
        let sr = r as f64 * ratio;
        let r0 = (sr.floor() as usize).min(src - 2);
        let fr = sr - r0 as f64;
        for c in 0..target {
            let sc = c as f64 * ratio;
            let c0 = (sc.floor() as usize).min(src - 2);
            let fc = sc - c0 as f64;
            let top = (1.0 - fc) * img.get(r0, c0) + fc * img.get(r0, c0 + 1);
            let bottom = (1.0 - fc) * img.get(r0 + 1, c0) + fc * img.get(r0 + 1, c0 + 1);
            values.push((1.0 - fr) * top + fr * bottom);
        }
    }
    match img.domain() {
        Domain::Normalized => ImageGrid::normalized_clamped(target, img.pitch_mm(), values),
        Domain::Hounsfield => ImageGrid::new(target, img.pitch_mm(), values, Domain::Hounsfield),
    }
}

/// How a [`DatasetSplit`] was drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitProtocol {
    Random { seed: u64 },
    ExcludeDigit(u32),
}

/// Train/test partition of a dataset, held as indices into it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub protocol: SplitProtocol,
}

impl DatasetSplit {
    /// Keeps the first `train` and `test` indices of each side.
    pub fn truncated(&self, train: usize, test: usize) -> Self {
        DatasetSplit {
            train: self.train.iter().take(train).copied().collect(),
            test: self.test.iter().take(test).copied().collect(),
            protocol: self.protocol,
        }
    }

    pub fn train_items<'d, T>(&'d self, data: &'d [T]) -> impl Iterator<Item = &'d T> + 'd {
        self.train.iter().map(move |&i| &data[i])
    }

    pub fn test_items<'d, T>(&'d self, data: &'d [T]) -> impl Iterator<Item = &'d T> + 'd {
        self.test.iter().map(move |&i| &data[i])
    }
}

/// Seeded shuffle of exactly 48000 records into 43000 train and 5000 test.
pub fn split_random<T>(data: &[T], seed: u64) -> Result<DatasetSplit> {
    if data.len() != EXPERIMENT_POOL {
        return Err(Error::invalid(format!(
            "random split expects {EXPERIMENT_POOL} records, got {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(RANDOM_SPLIT_TRAIN);
    Ok(DatasetSplit {
        train: order,
        test,
        protocol: SplitProtocol::Random { seed },
    })
}

/// Every record labelled `digit` goes to test, all others to train.
pub fn split_exclude_digit(data: &[LabeledImage], digit: u32) -> Result<DatasetSplit> {
    if digit > 9 {
        return Err(Error::invalid(format!("excluded digit must be 0..=9, got {digit}")));
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data[i].label == digit);
    Ok(DatasetSplit {
        train,
        test,
        protocol: SplitProtocol::ExcludeDigit(digit),
    })
}

/// Ellipse in coordinates where the image spans `[-1, 1]` on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub hu: f64,
}

impl Ellipse {
    /// Squared normalized radius; `<= 1` inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radius2(x, y) <= 1.0
    }

    fn boundary_point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (ex, ey) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + ex * c - ey * s, self.cy + ex * s + ey * c)
    }
}

/// Parameter ranges of the synthetic CT phantom generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub n: usize,
    pub pitch_mm: f64,
    pub background_hu: f64,
    pub body_center: (f64, f64),
    pub body_a: (f64, f64),
    pub body_b: (f64, f64),
    pub body_theta: (f64, f64),
    pub body_hu: (f64, f64),
    pub interior_count: (usize, usize),
    /// Interior semi-axes as fractions of the body's minor semi-axis.
    pub interior_scale: (f64, f64),
    pub interior_hu: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n: 64,
            pitch_mm: DEFAULT_PITCH_MM,
            background_hu: HU_MIN,
            body_center: (-0.05, 0.05),
            body_a: (0.70, 0.90),
            body_b: (0.50, 0.75),
            body_theta: (-0.25, 0.25),
            body_hu: (0.0, 60.0),
            interior_count: (2, 6),
            interior_scale: (0.12, 0.45),
            interior_hu: (-900.0, 1500.0),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let in_hu = |v: f64| (HU_MIN..=HU_MAX).contains(&v);
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if self.n < 2 || !(self.pitch_mm > 0.0) {
            return Err(Error::invalid("phantom grid must be at least 2 pixels with positive pitch"));
        }
        if ![self.background_hu, self.body_hu.0, self.body_hu.1, self.interior_hu.0, self.interior_hu.1]
            .into_iter()
            .all(in_hu)
        {
            return Err(Error::invalid("phantom HU values must lie in [-1000, 2000]"));
        }
        if ![self.body_center, self.body_a, self.body_b, self.body_theta, self.body_hu, self.interior_scale, self.interior_hu]
            .into_iter()
            .all(ordered)
            || self.interior_count.0 > self.interior_count.1
        {
            return Err(Error::invalid("phantom ranges must be ordered (low, high)"));
        }
        if self.body_a.0 <= 0.0 || self.body_b.0 <= 0.0 || self.interior_scale.0 <= 0.0 {
            return Err(Error::invalid("phantom axes must be positive"));
        }
        let reach = self.body_center.0.abs().max(self.body_center.1.abs()) + self.body_a.1.max(self.body_b.1);
        if reach > 1.0 {
            return Err(Error::invalid("body outline must fit inside the field of view"));
        }
        if self.interior_scale.1 >= 1.0 {
            return Err(Error::invalid("interior ellipses must be smaller than the body"));
        }
        Ok(())
    }
}

/// A generated phantom and the ellipses it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: ImageGrid,
    pub body: Ellipse,
    pub interior: Vec<Ellipse>,
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn pixel_center(n: usize, row: usize, col: usize) -> (f64, f64) {
    let half = n as f64 / 2.0;
    let c = (n as f64 - 1.0) / 2.0;
    ((col as f64 - c) / half, (c - row as f64) / half)
}

/// Body ellipse on air, with interior ellipses painted over it in order.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        cx: uniform(&mut rng, spec.body_center),
        cy: uniform(&mut rng, spec.body_center),
        a: uniform(&mut rng, spec.body_a),
        b: uniform(&mut rng, spec.body_b),
        theta: uniform(&mut rng, spec.body_theta),
        hu: uniform(&mut rng, spec.body_hu),
    };
    let count = rng.gen_range(spec.interior_count.0..=spec.interior_count.1);
    let minor = body.a.min(body.b);
    let mut interior = Vec::with_capacity(count);
    while interior.len() < count {
        let e = Ellipse {
            cx: body.cx + uniform(&mut rng, (-body.a, body.a)),
            cy: body.cy + uniform(&mut rng, (-body.a, body.a)),
            a: minor * uniform(&mut rng, spec.interior_scale),
            b: minor * uniform(&mut rng, spec.interior_scale),
            theta: uniform(&mut rng, (0.0, std::f64::consts::PI)),
            hu: uniform(&mut rng, spec.interior_hu),
        };
        let inside = (0..72)
            .map(|k| e.boundary_point(k as f64 * std::f64::consts::TAU / 72.0))
            .all(|(x, y)| body.radius2(x, y) <= 0.9);
        if inside {
            interior.push(e);
        }
    }
    let n = spec.n;
    let mut values = vec![spec.background_hu; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_center(n, row, col);
            if !body.contains(x, y) {
                continue;
            }
            let mut hu = body.hu;
            for e in &interior {
                if e.contains(x, y) {
                    hu = e.hu;
                }
            }
            values[row * n + col] = hu;
        }
    }
    Ok(Phantom {
        image: ImageGrid::new(n, spec.pitch_mm, values, Domain::Hounsfield)?,
        body,
        interior,
    })
}

/// `count` phantoms with per-item seeds `base_seed ^ index`; labels are the
/// indices.
pub fn generate_phantom_set(spec: &PhantomSpec, base_seed: u64, count: usize) -> Result<Vec<LabeledImage>> {
    (0..count)
        .map(|i| {
            let p = generate_phantom(spec, base_seed ^ i as u64)?;
            Ok(LabeledImage {
                image: p.image,
                label: i as u32,
            })
        })
        .collect()
}

pub fn hu_to_unit(hu: f64) -> f64 {
    (hu - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn unit_to_hu(v: f64) -> f64 {
    v * (HU_MAX - HU_MIN) + HU_MIN
}

/// Affine map `(HU + 1000) / 3000` into the normalized domain.
pub fn hu_to_normalized(img: &ImageGrid) -> Result<ImageGrid> {
    if img.domain() != Domain::Hounsfield {
        return Err(Error::invalid("hu_to_normalized expects a Hounsfield image"));
    }
    if let Some(v) = img.values().iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
        return Err(Error::invalid(format!("HU value {v} outside [-1000, 2000]")));
    }
    let values = img.values().iter().map(|&v| hu_to_unit(v)).collect();
    ImageGrid::normalized_clamped(img.n(), img.pitch_mm(), values)
}

pub fn normalized_to_hu(img: &ImageGrid) -> Result<ImageGrid> {
    if img.domain() != Domain::Normalized {
        return Err(Error::invalid("normalized_to_hu expects a normalized image"));
    }
    let values = img.values().iter().map(|&v| unit_to_hu(v)).collect();
    ImageGrid::new(img.n(), img.pitch_mm(), values, Domain::Hounsfield)
}
