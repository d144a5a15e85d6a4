//! Image files, paired datasets, augmentation and hard color histograms.
//!
//! Binary PPM (`P6`, maxval 255) is the reference on-disk format and is
//! handled here directly; PNG and JPEG are read and PNG written through the
//! `image` crate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}: unsupported image format", .0.display())]
    Unsupported(PathBuf),
    #[error("{}: decode failed: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// RGB image with values in `[0, 1]`, stored row-major as interleaved `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::Invalid(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    /// Builds from `f(y, x, c)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self::from_fn(height, width, |_, _, _| v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            T::of(self.data[p * 3 + c])
        })
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(ImageError::Invalid(format!("expected [3, H, W] tensor, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        Ok(Self::from_fn(h, w, |y, x, c| t.data()[(c * h + y) * w + x].as_f64()))
    }

    /// Stacks images of equal size into a `[B, 3, H, W]` tensor.
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| ImageError::Invalid("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(ImageError::ShapeMismatch(first.dims(), img.dims()));
            }
            data.extend(img.to_chw::<T>().into_data());
        }
        Tensor::new(&[images.len(), 3, first.height, first.width], data)
            .map_err(|e| ImageError::Invalid(e.to_string()))
    }

    /// Splits a `[B, 3, H, W]` tensor into images.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(ImageError::Invalid(format!("expected [B, 3, H, W] tensor, got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        t.data()
            .chunks(per)
            .map(|c| Image::from_chw(&Tensor::new(&[3, s[2], s[3]], c.to_vec()).expect("chunk shape")))
            .collect()
    }

    /// Single-channel image broadcast to gray RGB; values clamped.
    pub fn gray(height: usize, width: usize, values: &[f64]) -> Self {
        Self::from_fn(height, width, |y, x, _| values[y * width + x])
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        Self::from_fn(h, w, |y, x, c| self.get(top + y, left + x, c))
    }
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `round(v·255)` with halves rounded up, after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

fn ppm_decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |msg: &str| ImageError::Decode {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing separator before pixel data"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| bad("image too large"))?;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { height, width, data })
}

fn ppm_encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ImageError::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(b"P6") {
        return ppm_decode(&bytes, path);
    }
    match image::guess_format(&bytes) {
        Ok(image::ImageFormat::Png | image::ImageFormat::Jpeg) => {}
        _ => return Err(ImageError::Unsupported(path.to_path_buf())),
    }
    let decoded = image::load_from_memory(&bytes).map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        data,
    })
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => {
            let mut f = fs::File::create(path).map_err(io)?;
            f.write_all(&ppm_encode(img)).map_err(io)
        }
        Some("png") => {
            let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .ok_or_else(|| ImageError::Invalid("buffer size".into()))?;
            buf.save(path).map_err(|e| match e {
                image::ImageError::IoError(source) => io(source),
                other => ImageError::Decode {
                    path: path.to_path_buf(),
                    msg: other.to_string(),
                },
            })
        }
        _ => Err(ImageError::Unsupported(path.to_path_buf())),
    }
}

/// One element of the dihedral group of the square: clockwise quarter turns
/// followed by optional flips.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Transform {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Transform {
            quarter_turns: rng.gen_range(0..4),
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
        }
    }

    /// Source coordinate for output `(y, x)` of an `h×w` input.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let y = if self.flip_vertical { oh - 1 - y } else { y };
        let x = if self.flip_horizontal { ow - 1 - x } else { x };
        // undo clockwise turns last-to-first; a turn of an hm-row image maps
        // source (r, c) to output (c, hm - 1 - r)
        let (mut y, mut x) = (y, x);
        for k in (1..=self.quarter_turns % 4).rev() {
            let hm = if (k - 1) % 2 == 0 { h } else { w };
            (y, x) = (hm - 1 - x, y);
        }
        (y, x)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = img.dims();
        let (oh, ow) = self.output_dims(h, w);
        Image::from_fn(oh, ow, |y, x, c| {
            let (sy, sx) = self.source(y, x, h, w);
            img.get(sy, sx, c)
        })
    }
}

/// Applies one randomly drawn rotation/flip to both images.
pub fn augment_pair(x: &Image, y: &Image, rng: &mut impl Rng) -> Result<(Image, Image)> {
    if x.dims() != y.dims() {
        return Err(ImageError::ShapeMismatch(x.dims(), y.dims()));
    }
    let t = Transform::sample(rng);
    Ok((t.apply(x), t.apply(y)))
}

/// Crops the same `size×size` window from both images.
pub fn random_patch(x: &Image, y: &Image, size: usize, rng: &mut impl Rng) -> Result<(Image, Image)> {
    if x.dims() != y.dims() {
        return Err(ImageError::ShapeMismatch(x.dims(), y.dims()));
    }
    let (h, w) = x.dims();
    if size == 0 || size > h.min(w) {
        return Err(ImageError::Invalid(format!("patch size {size} exceeds image {h}x{w}")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok((x.crop(top, left, size, size), y.crop(top, left, size, size)))
}

/// Per-channel normalized color histogram, row-major `[3, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    bins: usize,
    values: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.bins..(c + 1) * self.bins]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.bins], |i| T::of(self.values[i]))
    }
}

/// Hard histogram: bin `floor(v·bins)` clamped to `bins − 1`, counts divided by `H·W`.
pub fn compute_histogram(img: &Image, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(ImageError::Invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; 3 * bins];
    for px in img.data.chunks(3) {
        for (c, &v) in px.iter().enumerate() {
            let b = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[c * bins + b] += 1;
        }
    }
    let n = (img.height * img.width) as f64;
    Ok(Histogram {
        bins,
        values: counts.into_iter().map(|k| k as f64 / n).collect(),
    })
}

/// Degraded/reference pairs matched by file name between `input/` and `target/`.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<(PathBuf, PathBuf)>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["ppm", "png", "jpg", "jpeg"];

impl PairedDataset {
    pub fn from_pairs(pairs: Vec<(PathBuf, PathBuf)>) -> Self {
        PairedDataset { pairs }
    }

    /// Scans `root/input` and `root/target`; pairs are sorted by file name.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let input = root.join("input");
        let target = root.join("target");
        for dir in [&input, &target] {
            if !dir.is_dir() {
                return Err(ImageError::Missing(dir.clone()));
            }
        }
        let read = |dir: &Path| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|source| ImageError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            v.sort();
            Ok(v)
        };
        let mut pairs = Vec::new();
        for p in read(&input)? {
            let name = p.file_name().expect("listed file has a name");
            let t = target.join(name);
            if !t.exists() {
                return Err(ImageError::Missing(t));
            }
            pairs.push((p, t));
        }
        if pairs.is_empty() {
            return Err(ImageError::Invalid(format!("no image pairs under {}", root.display())));
        }
        Ok(PairedDataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(PathBuf, PathBuf)] {
        &self.pairs
    }

    /// Loads every pair, checking that both sides have equal dimensions.
    pub fn load_all(&self) -> Result<Vec<(Image, Image)>> {
        self.pairs
            .iter()
            .map(|(a, b)| {
                let (x, y) = (load_image(a)?, load_image(b)?);
                if x.dims() != y.dims() {
                    return Err(ImageError::ShapeMismatch(x.dims(), y.dims()));
                }
                Ok((x, y))
            })
            .collect()
    }

    /// Visiting order for one epoch, a function of `(seed, epoch)` only.
    pub fn order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        epoch_order(self.pairs.len(), seed, epoch)
    }
}

/// Permutation of `0..n` for one epoch, a function of `(n, seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, epoch as u64, u64::MAX));
    idx
}

/// Deterministic RNG for `(seed, step, item)`, independent across workers.
pub fn stream_rng(seed: u64, step: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ item);
    rng
}
