//! File formats: binary grayscale images, sample grids, checkpoints, the
//! loss CSV, SVG loss plots and phantom dataset directories.
//!
//! Checkpoint layout (all integers little-endian u32):
//!
//! ```text
//! "OCTG" | version | count | { name_len | name | rank | dims.. | f32 data.. } * count | crc32
//! ```
//!
//! The trailing CRC-32 (reflected polynomial 0xEDB88320) covers every
//! preceding byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gan::LossRecord;
use crate::phantom::{Dataset, DatasetEntry, Pathology, IMAGE_SIZE};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps `[-1, 1]` to `0..=255` by `round(255 (x + 1) / 2)`, halves rounding up.
pub fn quantize(x: f32) -> u8 {
    let v = (255.0 * (x as f64 + 1.0) / 2.0 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        Ok(GrayImage { width, height, pixels: vec![0; width * height] })
    }

    /// From a `[1, H, W]` or `[H, W]` tensor holding integers in `0..=255`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (height, width) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            _ => return Err(Error::Shape(format!("expected [1, H, W] image, got {:?}", t.shape()))),
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidValue(format!("pixel {v} is not an integer in 0..=255")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(GrayImage { width, height, pixels })
    }

    /// Quantizes a `[1, H, W]` tensor in `[-1, 1]`.
    pub fn from_signed(t: &Tensor<f32>) -> Result<Self> {
        let q = t.map(|v| quantize(v) as f32);
        GrayImage::from_tensor(&q)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f32).collect(),
        )
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses `P5\n<w> <h>\n255\n` followed by exactly `w * h` bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("grayscale image: {m}"));
        let mut pos = 0;
        let mut field = |last: bool| -> Result<&[u8]> {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let token = &bytes[start..pos];
            let sep = bytes.get(pos).copied();
            let expected = if last { Some(b'\n') } else { sep.filter(|c| c.is_ascii_whitespace()) };
            if token.is_empty() || sep.is_none() || sep != expected {
                return Err(bad("truncated or malformed header"));
            }
            pos += 1;
            Ok(token)
        };
        if field(false)? != b"P5" {
            return Err(bad("magic must be P5"));
        }
        let number = |t: &[u8]| -> Result<usize> {
            std::str::from_utf8(t)
                .ok()
                .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("header dimension is not a number"))
        };
        let width = number(field(false)?)?;
        let height = number(field(false)?)?;
        let maxval = number(field(true)?)?;
        if maxval != 255 {
            return Err(bad(&format!("maxval must be 255, got {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero dimension"));
        }
        let payload = &bytes[pos..];
        if payload.len() != width * height {
            return Err(bad(&format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                width * height
            )));
        }
        Ok(GrayImage { width, height, pixels: payload.to_vec() })
    }
}

pub fn write_image(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GrayImage::decode(&bytes).map_err(|e| e.at(path))
}

pub const GRID_SEPARATOR: usize = 2;

/// Tiles equally sized images left to right, top to bottom, with 2-px black
/// separators between cells. Cells past the last image stay black.
pub fn image_grid(images: &[GrayImage], cols: usize) -> Result<GrayImage> {
    let first = images.first().ok_or_else(|| Error::Shape("image grid needs at least one image".into()))?;
    if cols == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let (w, h) = (first.width, first.height);
    if let Some(odd) = images.iter().find(|im| im.width != w || im.height != h) {
        return Err(Error::Shape(format!(
            "grid images must share a size: {w}x{h} vs {}x{}",
            odd.width, odd.height
        )));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut grid = GrayImage::new(cols * w + (cols - 1) * GRID_SEPARATOR, rows * h + (rows - 1) * GRID_SEPARATOR)?;
    for (i, im) in images.iter().enumerate() {
        let (top, left) = ((i / cols) * (h + GRID_SEPARATOR), (i % cols) * (w + GRID_SEPARATOR));
        for r in 0..h {
            let dst = (top + r) * grid.width + left;
            grid.pixels[dst..dst + w].copy_from_slice(&im.pixels[r * w..(r + 1) * w]);
        }
    }
    Ok(grid)
}

/// Default column count for a grid of `n` images: the smallest `c` with `c * c >= n`.
pub fn default_grid_cols(n: usize) -> usize {
    let mut c = 1;
    while c * c < n {
        c += 1;
    }
    c
}

const MAGIC: &[u8; 4] = b"OCTG";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
    }
    Ok(())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidValue(format!("{what} {n} does not fit in u32")))
}

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    check_unique(tensors.iter().map(|(n, _)| n.as_str()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.and_then(|l| l.checked_mul(4)).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", body.len() - r.pos)));
    }
    check_unique(out.iter().map(|(n, _)| n.as_str()))?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| e.at(path))
}

pub const LOSS_CSV_HEADER: &str = "step,d_loss,g_loss";

pub fn format_loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::with_capacity(32 * (records.len() + 1));
    s.push_str(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.step, r.d_loss, r.g_loss);
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format(format!("loss CSV must start with `{LOSS_CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::Format(format!("loss CSV line {}: `{line}`", i + 2));
            let mut f = line.split(',');
            let (Some(step), Some(d), Some(g), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            Ok(LossRecord {
                step: step.parse().map_err(|_| bad())?,
                d_loss: d.parse().map_err(|_| bad())?,
                g_loss: g.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    fs::write(path, format_loss_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_loss_csv(&text).map_err(|e| e.at(path))
}

pub const D_COLOR: &str = "#1f77b4";
pub const G_COLOR: &str = "#ff7f0e";

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

/// Evenly spaced tick values over `[lo, hi]`.
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Line plot of the records with `from <= step <= to`: discriminator loss in
/// blue, generator loss in orange, linear axes fitted to the window.
pub fn render_loss_svg(records: &[LossRecord], from: usize, to: usize) -> Result<String> {
    if from > to {
        return Err(Error::Config(format!("plot range {from}..={to} is empty")));
    }
    let window: Vec<&LossRecord> = records.iter().filter(|r| (from..=to).contains(&r.step)).collect();
    let (Some(first), Some(last)) = (window.first(), window.last()) else {
        return Err(Error::Config(format!("no loss records between steps {from} and {to}")));
    };
    let (x0, x1) = (first.step as f64, (last.step as f64).max(first.step as f64 + 1.0));
    let mut y0 = window.iter().map(|r| r.d_loss.min(r.g_loss)).fold(f64::INFINITY, f64::min);
    let mut y1 = window.iter().map(|r| r.d_loss.max(r.g_loss)).fold(f64::NEG_INFINITY, f64::max);
    if !(y0.is_finite() && y1.is_finite()) {
        return Err(Error::InvalidValue("loss records contain non-finite values".into()));
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = SVG_W - LEFT - RIGHT;
    let ph = SVG_H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">Generator and discriminator losses, steps {from} to {to}</text>"#,
        LEFT + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for x in ticks(x0, x1, 5) {
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            x.round()
        );
    }
    for y in ticks(y0, y1, 5) {
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">loss</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (color, series) in [(D_COLOR, 0), (G_COLOR, 1)] {
        let points: Vec<String> = window
            .iter()
            .map(|r| {
                let y = if series == 0 { r.d_loss } else { r.g_loss };
                format!("{:.2},{:.2}", sx(r.step as f64), sy(y))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            points.join(" ")
        );
    }
    let lx = SVG_W - RIGHT + 15.0;
    for (i, (color, label)) in [(D_COLOR, "discriminator"), (G_COLOR, "generator")].iter().enumerate() {
        let ly = TOP + 15.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_loss_svg(records: &[LossRecord], path: &Path, from: usize, to: usize) -> Result<()> {
    let svg = render_loss_svg(records, from, to)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub const MANIFEST: &str = "manifest.tsv";

pub fn dataset_image_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

/// Writes one image per item plus `manifest.tsv` (filename, class, seed;
/// tab-separated, no header). Images are quantized from `[-1, 1]`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut manifest = String::new();
    for (i, entry) in dataset.entries.iter().enumerate() {
        let name = dataset_image_name(i);
        let pixels = dataset.images.data()[i * plane..(i + 1) * plane].iter().map(|&v| quantize(v)).collect();
        let image = GrayImage { width: IMAGE_SIZE, height: IMAGE_SIZE, pixels };
        write_image(&dir.join(&name), &image)?;
        let _ = writeln!(manifest, "{name}\t{}\t{}", entry.class, entry.seed);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`write_dataset`], mapping pixels back to `[-1, 1]`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::Format(format!("{} line {}: `{line}`", path.display(), i + 1));
        let mut f = line.split('\t');
        let (Some(name), Some(class), Some(seed), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        if name.contains('/') || name.contains('\\') || name.starts_with("..") {
            return Err(bad());
        }
        let class: Pathology = class.parse().map_err(|_| bad())?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        let image = read_image(&dir.join(name))?;
        if image.width != IMAGE_SIZE || image.height != IMAGE_SIZE {
            return Err(Error::Format(format!(
                "{name} is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
                image.width, image.height
            )));
        }
        data.extend(image.pixels.iter().map(|&p| p as f32 / 255.0 * 2.0 - 1.0));
        entries.push(DatasetEntry { class, seed });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![entries.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = Rng::new(seed);
        GrayImage { width: w, height: h, pixels: (0..w * h).map(|_| rng.next_u64() as u8).collect() }
    }

    #[test]
    fn quantization_points() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-2.0), 0);
    }

    #[test]
    fn gray_128_file_size() {
        let im = GrayImage { width: 64, height: 64, pixels: vec![128; 4096] };
        let bytes = im.encode();
        // "P5\n64 64\n255\n" is 13 bytes.
        assert_eq!(&bytes[..13], b"P5\n64 64\n255\n");
        assert_eq!(bytes.len(), 13 + 4096);
        assert!(bytes[13..].iter().all(|&b| b == 128));
    }

    #[test]
    fn image_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let im = random_image(64, 64, 5);
        write_image(&path, &im).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, im);
        assert_eq!(fs::read(&path).unwrap(), im.encode());
    }

    #[test]
    fn malformed_images_are_rejected() {
        let mut bytes = b"P5\n64 64\n256\n".to_vec();
        bytes.extend(vec![0; 4096]);
        assert!(matches!(GrayImage::decode(&bytes), Err(Error::Format(_))));
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert!(GrayImage::decode(&bytes).is_err());
        bytes.extend([4, 5]);
        assert!(GrayImage::decode(&bytes).is_err());
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\x00").is_err());
        assert!(GrayImage::decode(b"P5\n1 1\n255").is_err());
        assert!(GrayImage::decode(b"P5\n1 1\n255\n\x07").is_ok());
    }

    #[test]
    fn pixel_values_must_be_quantized() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![3.0, 255.5]).unwrap();
        assert!(GrayImage::from_tensor(&t).is_err());
        let t = Tensor::from_vec(&[1, 1, 2], vec![3.0, 256.0]).unwrap();
        assert!(GrayImage::from_tensor(&t).is_err());
        let t = Tensor::from_vec(&[1, 1, 2], vec![0.0, 255.0]).unwrap();
        assert_eq!(GrayImage::from_tensor(&t).unwrap().pixels, vec![0, 255]);
    }

    #[test]
    fn grid_layout() {
        let a = random_image(64, 64, 1);
        assert_eq!(image_grid(std::slice::from_ref(&a), 1).unwrap(), a);
        let four: Vec<GrayImage> = (0..4).map(|i| random_image(64, 64, i)).collect();
        let g = image_grid(&four, 2).unwrap();
        assert_eq!((g.width, g.height), (130, 130));
        assert_eq!(g.get(0, 66), four[1].get(0, 0));
        assert_eq!(g.get(66, 0), four[2].get(0, 0));
        assert_eq!(g.get(129, 129), four[3].get(63, 63));
        assert!((0..130).all(|r| g.get(r, 64) == 0 && g.get(r, 65) == 0));

        let bright: Vec<GrayImage> = (0..3).map(|_| GrayImage { width: 4, height: 4, pixels: vec![200; 16] }).collect();
        let g = image_grid(&bright, 2).unwrap();
        assert_eq!((g.width, g.height), (10, 10));
        for r in 6..10 {
            for c in 6..10 {
                assert_eq!(g.get(r, c), 0);
            }
        }
        assert_eq!(g.get(6, 0), 200);
        assert_eq!(default_grid_cols(16), 4);
        assert_eq!(default_grid_cols(17), 5);
        assert_eq!(default_grid_cols(1), 1);
    }

    #[test]
    fn crc_matches_published_vector() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    fn sample_tensors() -> NamedTensors {
        let mut rng = Rng::new(3);
        vec![
            ("g.0.weight".into(), Tensor::randn(&[4, 3, 2, 2], &mut rng).unwrap()),
            ("g.0.bias".into(), Tensor::randn(&[4], &mut rng).unwrap()),
            ("d.1.gamma".into(), Tensor::create(&[1], f32::MIN_POSITIVE).unwrap()),
        ]
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let tensors = sample_tensors();
        save_checkpoint(&path, &tensors).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), tensors.len());
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn empty_checkpoint() {
        let bytes = encode_checkpoint(&[]).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4);
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&sample_tensors()).unwrap();
        for i in [4, 12, 40, bytes.len() - 10, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(matches!(decode_checkpoint(&bad), Err(Error::Crc { .. })), "byte {i}");
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_and_duplicates_are_rejected() {
        let mut bytes = encode_checkpoint(&[]).unwrap();
        bytes.truncate(bytes.len() - 4);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&with_crc(bytes)), Err(Error::Version(2))));

        let t = Tensor::create(&[1], 1.0f32).unwrap();
        let dup = vec![("w".to_string(), t.clone()), ("w".to_string(), t.clone())];
        assert!(matches!(encode_checkpoint(&dup), Err(Error::DuplicateName(_))));
        let mut single = encode_checkpoint(&[("w".to_string(), t)]).unwrap();
        single.truncate(single.len() - 4);
        let entry = single[12..].to_vec();
        single[8..12].copy_from_slice(&2u32.to_le_bytes());
        single.extend_from_slice(&entry);
        assert!(matches!(decode_checkpoint(&with_crc(single)), Err(Error::DuplicateName(_))));
    }

    fn records(n: usize) -> Vec<LossRecord> {
        (0..n)
            .map(|i| LossRecord { step: i, d_loss: 0.7 - 0.001 * i as f64, g_loss: 0.69 + (i as f64 * 0.3).sin() * 0.1 })
            .collect()
    }

    #[test]
    fn loss_csv_format_and_round_trip() {
        let recs = vec![LossRecord { step: 0, d_loss: 0.625, g_loss: 1.5 }];
        assert_eq!(format_loss_csv(&recs), "step,d_loss,g_loss\n0,0.625000,1.500000\n");
        let parsed = parse_loss_csv(&format_loss_csv(&records(10))).unwrap();
        assert_eq!(parsed.len(), 10);
        assert_eq!(parsed[3].step, 3);
        assert!(parse_loss_csv("step,d,g\n").is_err());
        assert!(parse_loss_csv("step,d_loss,g_loss\n1,2\n").is_err());
    }

    fn polylines(svg: &str) -> Vec<usize> {
        let doc = roxmltree::Document::parse(svg).expect("well-formed XML");
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .map(|n| n.attribute("points").unwrap().split_whitespace().count())
            .collect()
    }

    #[test]
    fn svg_windows() {
        assert_eq!(polylines(&render_loss_svg(&records(2), 0, 1).unwrap()), vec![2, 2]);
        let log = records(3000);
        assert_eq!(polylines(&render_loss_svg(&log, 0, 20).unwrap()), vec![21, 21]);
        assert_eq!(polylines(&render_loss_svg(&log, 0, 2999).unwrap()), vec![3000, 3000]);
        let svg = render_loss_svg(&log, 2000, 3000).unwrap();
        assert!(svg.contains(D_COLOR) && svg.contains(G_COLOR));
        assert!(svg.contains(">discriminator<") && svg.contains(">generator<") && svg.contains(">step<"));
        assert_eq!(svg, render_loss_svg(&log, 2000, 3000).unwrap());
        assert!(render_loss_svg(&log, 5000, 6000).is_err());
        assert!(render_loss_svg(&log, 20, 0).is_err());
        let flat = vec![LossRecord { step: 0, d_loss: 1.0, g_loss: 1.0 }];
        assert_eq!(polylines(&render_loss_svg(&flat, 0, 0).unwrap()), vec![1, 1]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        use crate::phantom::{build_dataset, DatasetConfig};
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetConfig { count: 6, seed: 2, ..DatasetConfig::default() }).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let first = manifest.lines().next().unwrap();
        assert_eq!(first, format!("img_00000.pgm\t{}\t{}", ds.entries[0].class, ds.entries[0].seed));
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.entries, ds.entries);
        for (a, b) in back.images.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
