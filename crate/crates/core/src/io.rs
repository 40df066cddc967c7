//! Manifests, image files, the tensor archive and model persistence.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::settings;
use crate::tensor::{DType, Element, Tensor};
use crate::training::Dataset;

pub const MANIFEST_HEADER: [&str; 3] = ["image_path", "plane_label", "patient_id"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_path: String,
    pub label: String,
    pub patient_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative image paths are resolved against.
    pub base: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn resolve(&self, r: &Record) -> PathBuf {
        let p = Path::new(&r.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn class_counts(&self, labels: &[String]) -> Vec<usize> {
        labels
            .iter()
            .map(|l| self.records.iter().filter(|r| &r.label == l).count())
            .collect()
    }
}

/// Parses manifest CSV text. Line numbers in errors count the header as 1.
pub fn parse_manifest(text: &str, source: &Path, labels: &[String]) -> Result<Vec<Record>> {
    let err = |line: usize, message: String| Error::Manifest {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let mut cols = [0usize; 3];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column `{name}`")))?;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| {
            row.get(cols[i])
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| err(line, format!("missing value for `{name}`")))
        };
        let rec = Record {
            image_path: field(0, "image_path")?,
            label: field(1, "plane_label")?,
            patient_id: field(2, "patient_id")?,
        };
        if !labels.contains(&rec.label) {
            return Err(err(line, format!("unknown label `{}` (expected one of {})", rec.label, labels.join(", "))));
        }
        if !seen.insert(rec.image_path.clone()) {
            return Err(err(line, format!("duplicate image path `{}`", rec.image_path)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, labels: &[String]) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let records = parse_manifest(&text, path, labels)?;
    Ok(Manifest {
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
    })
}

pub fn manifest_csv(records: &[Record]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([&r.image_path, &r.label, &r.patient_id]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    write_atomic(path, &manifest_csv(records)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path)?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("unsupported format {format:?} (PNG, PGM, PPM)"),
        });
    }
    image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a PNG/PGM/PPM as `[channels, resolution, resolution]` in `[0, 1]`.
/// Grayscale sources are replicated across channels; colour sources are
/// converted to luma when one channel is requested.
pub fn load_image<T: Element>(path: &Path, resolution: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || resolution == 0 {
        return Err(Error::invalid("load_image: channels and resolution must be positive"));
    }
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let deep = color.bytes_per_pixel() / color.channel_count() as u8 > 1;
    let planes: Vec<Vec<f64>> = if color.has_color() && channels == 3 {
        let rgb = img.to_rgb16();
        (0..3)
            .map(|c| rgb.pixels().map(|p| p.0[c] as f64 / 65535.0).collect())
            .collect()
    } else if deep {
        vec![img.to_luma16().pixels().map(|p| p.0[0] as f64 / 65535.0).collect()]
    } else {
        vec![img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()]
    };
    let n = planes.len();
    let data: Vec<f64> = planes.into_iter().flatten().collect();
    let mut t = Tensor::<f64>::new(&[n, h, w], data)?;
    if (h, w) != (resolution, resolution) {
        t = ops::upsample_bilinear(&t, resolution, resolution)?;
    }
    let t: Tensor<T> = t.cast();
    if n == channels {
        return Ok(t);
    }
    let plane = t.data().to_vec();
    let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    Tensor::new(&[channels, resolution, resolution], data)
}

/// Saves `[H, W]` values in `[0, 1]` as an 8-bit grayscale image (format
/// chosen by extension: `.png`, `.pgm`).
pub fn save_gray(path: &Path, values: &Tensor<f64>) -> Result<()> {
    let &[h, w] = values.shape() else {
        return Err(Error::shape("save_gray", "[H, W]", format!("{:?}", values.shape())));
    };
    let bytes: Vec<u8> = values.data().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    save_dynamic(path, DynamicImage::ImageLuma8(img))
}

/// Saves `[3, H, W]` values in `[0, 1]` as an 8-bit RGB image.
pub fn save_rgb(path: &Path, values: &Tensor<f64>) -> Result<()> {
    let &[3, h, w] = values.shape() else {
        return Err(Error::shape("save_rgb", "[3, H, W]", format!("{:?}", values.shape())));
    };
    let d = values.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + i]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    save_dynamic(path, DynamicImage::ImageRgb8(img))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_dynamic(path: &Path, img: DynamicImage) -> Result<()> {
    let format = ImageFormat::from_path(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &buf.into_inner())
}

/// Loads every manifest image at the model's input geometry.
pub fn load_dataset<T: Element>(manifest: &Manifest, labels: &[String], channels: usize, resolution: usize) -> Result<Dataset<T>> {
    use rayon::prelude::*;
    let images = manifest
        .records
        .par_iter()
        .map(|r| load_image(&manifest.resolve(r), resolution, channels))
        .collect::<Result<Vec<_>>>()?;
    let labels = manifest
        .records
        .iter()
        .map(|r| {
            labels
                .iter()
                .position(|l| *l == r.label)
                .ok_or_else(|| Error::Data(format!("unknown label `{}`", r.label)))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { images, labels })
}

pub const ARCHIVE_MAGIC: &str = "FPTA1";

/// One named tensor in an archive. Values are held as `f64`, which
/// represents every `f32` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArchiveTensor {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }
}

/// Tensors plus free-form `key = value` header extensions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<ArchiveTensor>,
    pub extensions: Vec<(String, String)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Layout:
    ///
    /// ```text
    /// FPTA1
    /// tensors <count>
    /// tensor <name> <dtype> <rank> <dims...>
    /// ext <key> = <value>
    /// end
    /// <little-endian payloads in header order><CRC-32 of payload, LE u32>
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{ARCHIVE_MAGIC}\ntensors {}\n", self.tensors.len());
        for t in &self.tensors {
            if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("tensor name `{}` must be non-empty without spaces", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::invalid(format!("tensor `{}` dims disagree with data", t.name)));
            }
            let dims: Vec<String> = t.dims.iter().map(usize::to_string).collect();
            let line = format!("tensor {} {} {} {}", t.name, t.dtype, t.dims.len(), dims.join(" "));
            out.push_str(line.trim_end());
            out.push('\n');
        }
        for (k, v) in &self.extensions {
            if k.contains(['=', '\n']) || k.trim().is_empty() || v.contains('\n') {
                return Err(Error::invalid(format!("bad extension `{k}`")));
            }
            out.push_str(&format!("ext {k} = {v}\n"));
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        let start = bytes.len();
        for t in &self.tensors {
            for &v in &t.data {
                match t.dtype {
                    DType::F32 => (v as f32).write_le(&mut bytes),
                    DType::F64 => v.write_le(&mut bytes),
                }
            }
        }
        let crc = crc32fast::hash(&bytes[start..]);
        bytes.extend_from_slice(&crc.to_le_bytes());
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |message: String| Error::Archive {
            path: path.to_path_buf(),
            message,
        };
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err("CRC check failed: header truncated".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| err("header is not UTF-8".into()))
        };
        if next_line()? != ARCHIVE_MAGIC {
            return Err(err(format!("bad magic (expected {ARCHIVE_MAGIC})")));
        }
        let count: usize = next_line()?
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("malformed tensor count".into()))?;
        let mut heads = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || err(format!("malformed tensor record `{line}`"));
            if f.len() < 4 || f[0] != "tensor" {
                return Err(bad());
            }
            let dtype = DType::from_code(f[2]).ok_or_else(|| err(format!("unknown dtype `{}`", f[2])))?;
            let rank: usize = f[3].parse().map_err(|_| bad())?;
            if f.len() != 4 + rank {
                return Err(bad());
            }
            let dims = f[4..].iter().map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
            heads.push((f[1].to_string(), dtype, dims));
        }
        let mut extensions = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .strip_prefix("ext ")
                .and_then(|l| l.split_once(" = "))
                .ok_or_else(|| err(format!("malformed header line `{line}`")))?;
            extensions.push((k.to_string(), v.to_string()));
        }
        let payload_len: usize = heads
            .iter()
            .map(|(_, d, dims)| dims.iter().product::<usize>() * d.size())
            .sum();
        let body = &bytes[pos..];
        if body.len() != payload_len + 4 {
            return Err(err(format!(
                "CRC check failed: expected {} payload+CRC bytes, found {} (truncated or corrupt)",
                payload_len + 4,
                body.len()
            )));
        }
        let (payload, crc) = body.split_at(payload_len);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(err(format!("CRC mismatch: stored {stored:08x}, computed {computed:08x}")));
        }
        let mut off = 0;
        let tensors = heads
            .into_iter()
            .map(|(name, dtype, dims)| {
                let n: usize = dims.iter().product();
                let data = match dtype {
                    DType::F32 => payload[off..off + 4 * n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                    DType::F64 => payload[off..off + 8 * n]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                };
                off += n * dtype.size();
                ArchiveTensor { name, dtype, dims, data }
            })
            .collect();
        Ok(Self { tensors, extensions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

const BACKBONE_EXT: &str = "backbone.";

/// Parameters, running statistics and configs of a model.
pub fn model_archive<T: Element>(model: &Model<T>) -> Archive {
    let mut tensors: Vec<ArchiveTensor> = model
        .store
        .params()
        .iter()
        .map(|p| ArchiveTensor::from_tensor(&p.name, &p.value))
        .collect();
    tensors.extend(model.store.buffers().iter().map(|b| ArchiveTensor::from_tensor(&b.name, &b.value)));
    let mut extensions = settings::model_entries(&model.config);
    for (i, line) in model.backbone_config.to_text().lines().enumerate() {
        extensions.push((format!("{BACKBONE_EXT}{i:03}"), line.to_string()));
    }
    Archive { tensors, extensions }
}

pub fn save_model<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    model_archive(model).save(path)
}

/// Rebuilds a model from an archive. Every parameter and buffer must be
/// present with the shape the embedded config implies.
pub fn model_from_archive<T: Element>(archive: &Archive, path: &Path) -> Result<Model<T>> {
    let err = |message: String| Error::Archive {
        path: path.to_path_buf(),
        message,
    };
    let (backbone_lines, model_entries): (Vec<_>, Vec<_>) =
        archive.extensions.iter().cloned().partition(|(k, _)| k.starts_with(BACKBONE_EXT));
    let config = settings::model_from_entries(&model_entries)?;
    let text: String = backbone_lines.iter().map(|(_, v)| format!("{v}\n")).collect();
    let backbone = BackboneConfig::parse(&text)?;
    let mut model = Model::<T>::build_with_backbone(&config, backbone, 0)?;
    let mut used = 0;
    let fill = |name: &str, dest: &mut Tensor<T>, used: &mut usize| -> Result<()> {
        let t = archive.get(name).ok_or_else(|| err(format!("missing tensor `{name}`")))?;
        if t.dims != dest.shape() {
            return Err(err(format!(
                "tensor `{name}` has shape {:?}, config implies {:?}",
                t.dims,
                dest.shape()
            )));
        }
        *dest = Tensor::from_f64(&t.dims, &t.data)?;
        *used += 1;
        Ok(())
    };
    for p in model.store.params_mut() {
        fill(&p.name.clone(), &mut p.value, &mut used)?;
    }
    for b in model.store.buffers_mut() {
        fill(&b.name.clone(), &mut b.value, &mut used)?;
    }
    if used != archive.tensors.len() {
        let known: HashSet<&str> = model
            .store
            .params()
            .iter()
            .map(|p| p.name.as_str())
            .chain(model.store.buffers().iter().map(|b| b.name.as_str()))
            .collect();
        let extra = archive
            .tensors
            .iter()
            .find(|t| !known.contains(t.name.as_str()))
            .map_or("?", |t| t.name.as_str());
        return Err(err(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

pub fn load_model<T: Element>(path: &Path) -> Result<Model<T>> {
    model_from_archive(&Archive::load(path)?, path)
}
