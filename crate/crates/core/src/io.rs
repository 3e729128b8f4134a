//! On-disk formats: CSAL saliency tensors, frame directories, pair
//! manifests, object models and flat configuration files.
//!
//! A frame `{id}` in a directory consists of
//!
//! - `{id}_rgb.png`: 8-bit RGB
//! - `{id}_depth.png`: 16-bit grayscale, millimeters, 0 = missing
//! - `{id}_mask.png`: 8-bit grayscale, any nonzero value is object
//! - `{id}_intrinsics.txt`: `key=value` lines for `fx fy cx cy width height`
//! - `{id}.csal`: the saliency tensor
//!
//! A manifest lists one pair per line as JSON; frames live under
//! `root/{scene_id}/` and models under `root/models/{object_id}.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::concept_cloud::SaliencyTensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Frame, RigidTransform, Vec3};
use crate::model::{max_pairwise_distance, ContinuousSymmetry, ObjectModel};

pub const CSAL_MAGIC: &[u8; 4] = b"CSAL";
pub const CSAL_VERSION: u32 = 1;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn ingestion(path: &Path, message: impl ToString) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidValue(format!("string of {} bytes does not fit a CSAL length field", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serialize a tensor to CSAL bytes.
pub fn encode_saliency(t: &SaliencyTensor) -> Result<Vec<u8>> {
    t.validate()?;
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidValue(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(20 + 4 * t.data.len());
    out.extend_from_slice(CSAL_MAGIC);
    out.extend_from_slice(&CSAL_VERSION.to_le_bytes());
    for v in [t.num_concepts(), t.height, t.width] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    push_string(&mut out, &t.category)?;
    for l in &t.labels {
        push_string(&mut out, l)?;
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(at, format!("{what} is not valid UTF-8")))
    }
}

/// Parse CSAL bytes. Nothing is returned unless the whole buffer is valid.
pub fn decode_saliency(bytes: &[u8]) -> Result<SaliencyTensor> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CSAL_MAGIC {
        return Err(format_err(0, "bad magic, expected \"CSAL\""));
    }
    let version = c.u32("version")?;
    if version != CSAL_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let (l, h, w) = (c.u32("L")? as usize, c.u32("H")? as usize, c.u32("W")? as usize);
    let values = l
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| format_err(8, format!("dimensions {l}x{h}x{w} overflow")))?;
    if l == 0 {
        return Err(format_err(8, "tensor has no concepts"));
    }
    let category = c.string("category")?;
    let labels = (0..l).map(|i| c.string(&format!("label {i}"))).collect::<Result<Vec<_>>>()?;
    let payload_at = c.pos;
    let payload = c.take(values * 4, "payload")?;
    if c.pos != bytes.len() {
        return Err(format_err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(format_err(payload_at + 4 * i, format!("value {} outside [0, 1]", data[i])));
    }
    SaliencyTensor::new(category, labels, h, w, data)
}

pub fn write_saliency(path: &Path, t: &SaliencyTensor) -> Result<()> {
    fs::write(path, encode_saliency(t)?)?;
    Ok(())
}

pub fn read_saliency(path: &Path) -> Result<SaliencyTensor> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, e))?;
    decode_saliency(&bytes)
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let pairs = parse_key_values(text)?;
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config(format!("intrinsics missing '{key}'")))
    };
    let real = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("intrinsics '{key}' is not a number")))
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("intrinsics '{key}' is not an integer")))
    };
    CameraIntrinsics::new(real("fx")?, real("fy")?, real("cx")?, real("cy")?, int("width")?, int("height")?)
}

pub struct FramePaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub intrinsics: PathBuf,
    pub saliency: PathBuf,
}

impl FramePaths {
    pub fn new(dir: &Path, id: &str) -> Self {
        Self {
            rgb: dir.join(format!("{id}_rgb.png")),
            depth: dir.join(format!("{id}_depth.png")),
            mask: dir.join(format!("{id}_mask.png")),
            intrinsics: dir.join(format!("{id}_intrinsics.txt")),
            saliency: dir.join(format!("{id}.csal")),
        }
    }
}

fn check_size(path: &Path, got: (u32, u32), k: &CameraIntrinsics) -> Result<()> {
    if got != (k.width as u32, k.height as u32) {
        return Err(ingestion(
            path,
            format!("raster is {}x{} but intrinsics say {}x{}", got.0, got.1, k.width, k.height),
        ));
    }
    Ok(())
}

pub fn load_frame(dir: &Path, id: &str) -> Result<Frame> {
    let p = FramePaths::new(dir, id);
    let text = fs::read_to_string(&p.intrinsics).map_err(|e| ingestion(&p.intrinsics, e))?;
    let k = parse_intrinsics(&text).map_err(|e| ingestion(&p.intrinsics, e))?;

    let rgb = image::open(&p.rgb).map_err(|e| ingestion(&p.rgb, e))?;
    check_size(&p.rgb, (rgb.width(), rgb.height()), &k)?;
    let rgb: Vec<[u8; 3]> = rgb.to_rgb8().pixels().map(|px| px.0).collect();

    let depth = image::open(&p.depth).map_err(|e| ingestion(&p.depth, e))?;
    check_size(&p.depth, (depth.width(), depth.height()), &k)?;
    let depth = match depth {
        image::DynamicImage::ImageLuma16(img) => img,
        _ => return Err(ingestion(&p.depth, "depth must be a 16-bit single-channel PNG")),
    };
    let depth: Vec<f64> = depth.pixels().map(|px| px.0[0] as f64 / 1000.0).collect();

    let mask = image::open(&p.mask).map_err(|e| ingestion(&p.mask, e))?;
    check_size(&p.mask, (mask.width(), mask.height()), &k)?;
    let mask: Vec<bool> = mask.to_luma8().pixels().map(|px| px.0[0] != 0).collect();

    Frame::new(rgb, depth, mask, k).map_err(|e| ingestion(dir, e))
}

/// Write a frame; depth is rounded to whole millimeters.
pub fn save_frame(dir: &Path, id: &str, frame: &Frame) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = FramePaths::new(dir, id);
    let (w, h) = (frame.width() as u32, frame.height() as u32);
    let mut depth_mm = Vec::with_capacity(frame.depth.len());
    for &d in &frame.depth {
        let mm = (d * 1000.0).round();
        if !(0.0..=u16::MAX as f64).contains(&mm) {
            return Err(Error::InvalidValue(format!("depth {d} m cannot be stored as 16-bit millimeters")));
        }
        depth_mm.push(mm as u16);
    }
    let rgb: Vec<u8> = frame.rgb.iter().flatten().copied().collect();
    let encode = |e: image::ImageError| Error::InvalidValue(e.to_string());
    RgbImage::from_raw(w, h, rgb).unwrap().save(&p.rgb).map_err(encode)?;
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, depth_mm)
        .unwrap()
        .save(&p.depth)
        .map_err(encode)?;
    let mask: Vec<u8> = frame.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    GrayImage::from_raw(w, h, mask).unwrap().save(&p.mask).map_err(encode)?;
    fs::write(&p.intrinsics, format_intrinsics(&frame.intrinsics))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub scene_id: String,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub pair_id: String,
    pub anchor: FrameRef,
    pub query: FrameRef,
    pub object_id: String,
    pub category: String,
    /// Object-to-camera poses, 9 rotation values row-major then 3 translation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_pose: Option<Vec<f64>>,
}

impl PairManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let ids = [
            &self.pair_id,
            &self.anchor.scene_id,
            &self.anchor.frame_id,
            &self.query.scene_id,
            &self.query.frame_id,
            &self.object_id,
        ];
        if ids.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidValue(format!("pair '{}' has an empty id", self.pair_id)));
        }
        for pose in [&self.anchor_pose, &self.query_pose].into_iter().flatten() {
            RigidTransform::from_row_major(pose)?;
        }
        Ok(())
    }

    pub fn anchor_pose(&self) -> Result<Option<RigidTransform>> {
        self.anchor_pose.as_deref().map(RigidTransform::from_row_major).transpose()
    }

    pub fn query_pose(&self) -> Result<Option<RigidTransform>> {
        self.query_pose.as_deref().map(RigidTransform::from_row_major).transpose()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| ingestion(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ingestion(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairManifestEntry =
            serde_json::from_str(&line).map_err(|e| ingestion(path, format!("line {}: {e}", n + 1)))?;
        entry
            .validate()
            .map_err(|e| ingestion(path, format!("line {}: {e}", n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[PairManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e).map_err(|e| Error::InvalidValue(e.to_string()))?)?;
    }
    Ok(())
}

/// Reads pair lists kept in some other dataset's layout.
///
/// Implement `read_pairs` for a foreign format, then call [`convert_manifest`]
/// to write a manifest the CLI understands. Frames referenced by the entries
/// must already follow the frame directory layout.
pub trait PairSource {
    fn read_pairs(&self, path: &Path) -> Result<Vec<PairManifestEntry>>;
}

/// The native line-delimited manifest.
#[derive(Debug, Clone, Copy, Default)]
pub struct JsonlManifest;

impl PairSource for JsonlManifest {
    fn read_pairs(&self, path: &Path) -> Result<Vec<PairManifestEntry>> {
        read_manifest(path)
    }
}

/// Read `input` with `source`, validate every entry, and write a manifest.
/// Returns the number of pairs written.
pub fn convert_manifest(source: &dyn PairSource, input: &Path, output: &Path) -> Result<usize> {
    let entries = source.read_pairs(input)?;
    for e in &entries {
        e.validate().map_err(|err| ingestion(input, err))?;
    }
    write_manifest(output, &entries)?;
    Ok(entries.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    vertices: Vec<[f64; 3]>,
    #[serde(default)]
    triangles: Vec<[u32; 3]>,
    /// Computed from the vertices when absent.
    #[serde(default)]
    diameter: Option<f64>,
    #[serde(default)]
    is_symmetric: bool,
    /// Each entry is 9 rotation values row-major then 3 translation.
    #[serde(default)]
    discrete_symmetries: Vec<Vec<f64>>,
    #[serde(default)]
    continuous_symmetries: Vec<ContinuousSymmetry>,
}

pub fn parse_model(text: &str) -> Result<ObjectModel> {
    let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::InvalidValue(format!("model file: {e}")))?;
    let vertices: Vec<Vec3> = f.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect();
    let diameter = f.diameter.unwrap_or_else(|| max_pairwise_distance(&vertices));
    let m = ObjectModel {
        vertices,
        triangles: f.triangles,
        diameter,
        is_symmetric: f.is_symmetric,
        discrete_symmetries: f
            .discrete_symmetries
            .iter()
            .map(|s| RigidTransform::from_row_major(s))
            .collect::<Result<_>>()?,
        continuous_symmetries: f.continuous_symmetries,
    };
    m.validate()?;
    Ok(m)
}

pub fn format_model(m: &ObjectModel) -> String {
    let f = ModelFile {
        vertices: m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        triangles: m.triangles.clone(),
        diameter: Some(m.diameter),
        is_symmetric: m.is_symmetric,
        discrete_symmetries: m.discrete_symmetries.iter().map(|s| s.to_row_major().to_vec()).collect(),
        continuous_symmetries: m.continuous_symmetries.clone(),
    };
    serde_json::to_string(&f).expect("model serializes")
}

pub fn load_model(path: &Path) -> Result<ObjectModel> {
    let text = fs::read_to_string(path).map_err(|e| ingestion(path, e))?;
    parse_model(&text).map_err(|e| ingestion(path, e))
}

pub fn save_model(path: &Path, m: &ObjectModel) -> Result<()> {
    fs::write(path, format_model(m))?;
    Ok(())
}
