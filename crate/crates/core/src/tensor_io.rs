//! Head tensor dumps (EFT1) and analysis manifests.
//!
//! An EFT1 file is a fixed 64-byte little-endian header followed by the
//! row-major Q payload and then the row-major K payload:
//!
//! ```text
//! offset size field
//!      0    4 magic "EFT1"
//!      4    4 format_version (u32, currently 1)
//!      8    1 dtype (1 = float32, 2 = float64)
//!      9    3 reserved (zero)
//!     12    8 L (u64)
//!     20    8 d_h (u64)
//!     28    8 softmax_scale (f64)
//!     36    4 layer (u32)
//!     40    4 query_head (u32)
//!     44    4 kv_head (u32)
//!     48    4 reserved (zero)
//!     52   12 padding (zero) up to 64 bytes
//!     64    . Q payload, L * d_h values
//!      .    . K payload, L * d_h values
//! ```
//!
//! Model and text identifiers are not part of the dump; they live in the
//! manifest and are attached when a dump is read through a manifest entry.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EFT1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
pub const MANIFEST_VERSION: u32 = 1;

/// On-disk element type of a dump payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(Dtype::F32),
            "f64" | "float64" => Ok(Dtype::F64),
            other => Err(Error::InvalidArgument(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub model_id: String,
    pub layer: u32,
    pub query_head: u32,
    pub kv_head: u32,
    pub text_id: String,
}

/// Query and key matrices of one attention head, rows indexed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    softmax_scale: f64,
    pub meta: HeadMeta,
}

impl HeadTensors {
    pub fn new(q: DMatrix<f64>, k: DMatrix<f64>, softmax_scale: f64, meta: HeadMeta) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::Shape(format!(
                "Q is {}x{} but K is {}x{}",
                q.nrows(),
                q.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        if q.nrows() == 0 || q.ncols() == 0 {
            return Err(Error::Shape("L and d_h must both be at least 1".into()));
        }
        if !(softmax_scale.is_finite() && softmax_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax_scale must be finite and positive, got {softmax_scale}"
            )));
        }
        check_finite("Q entry", &q)?;
        check_finite("K entry", &k)?;
        Ok(Self {
            q,
            k,
            softmax_scale,
            meta,
        })
    }

    /// Builds a head with the canonical `1/sqrt(d_h)` scale.
    pub fn with_default_scale(q: DMatrix<f64>, k: DMatrix<f64>, meta: HeadMeta) -> Result<Self> {
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        Self::new(q, k, scale, meta)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn softmax_scale(&self) -> f64 {
        self.softmax_scale
    }

    /// Context length L.
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, f64, HeadMeta) {
        (self.q, self.k, self.softmax_scale, self.meta)
    }
}

fn check_finite(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { what, row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Parsed fixed-size header of an EFT1 dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpHeader {
    pub format_version: u32,
    pub dtype: Dtype,
    pub len: u64,
    pub head_dim: u64,
    pub softmax_scale: f64,
    pub layer: u32,
    pub query_head: u32,
    pub kv_head: u32,
}

impl DumpHeader {
    pub fn payload_bytes(&self) -> u64 {
        2 * self.len * self.head_dim * self.dtype.size() as u64
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_LEN as u64 + self.payload_bytes()
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..8].copy_from_slice(&self.format_version.to_le_bytes());
        buf[8] = self.dtype.code();
        buf[12..20].copy_from_slice(&self.len.to_le_bytes());
        buf[20..28].copy_from_slice(&self.head_dim.to_le_bytes());
        buf[28..36].copy_from_slice(&self.softmax_scale.to_le_bytes());
        buf[36..40].copy_from_slice(&self.layer.to_le_bytes());
        buf[40..44].copy_from_slice(&self.query_head.to_le_bytes());
        buf[44..48].copy_from_slice(&self.kv_head.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8; HEADER_LEN], path: &Path) -> Result<Self> {
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let format_version = u32_at(4);
        if format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(format_version));
        }
        let header = DumpHeader {
            format_version,
            dtype: Dtype::from_code(buf[8])?,
            len: u64_at(12),
            head_dim: u64_at(20),
            softmax_scale: f64::from_le_bytes(buf[28..36].try_into().unwrap()),
            layer: u32_at(36),
            query_head: u32_at(40),
            kv_head: u32_at(44),
        };
        if header.len == 0 || header.head_dim == 0 {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("degenerate shape {}x{}", header.len, header.head_dim),
            });
        }
        if !(header.softmax_scale.is_finite() && header.softmax_scale > 0.0) {
            return Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: format!("invalid softmax_scale {}", header.softmax_scale),
            });
        }
        Ok(header)
    }
}

/// Writes `tensors` to `path` in EFT1 layout at the given on-disk dtype.
pub fn write_head_dump(tensors: &HeadTensors, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    // HeadTensors::new already rejects non-finite values, but f32 narrowing can overflow.
    if dtype == Dtype::F32 {
        for (what, m) in [("Q entry", tensors.q()), ("K entry", tensors.k())] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if !(m[(i, j)] as f32).is_finite() {
                        return Err(Error::NonFinite { what, row: i, col: j });
                    }
                }
            }
        }
    }
    let header = DumpHeader {
        format_version: FORMAT_VERSION,
        dtype,
        len: tensors.len() as u64,
        head_dim: tensors.head_dim() as u64,
        softmax_scale: tensors.softmax_scale(),
        layer: tensors.meta.layer,
        query_head: tensors.meta.query_head,
        kv_head: tensors.meta.kv_head,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut out, &header.encode())?;
    for m in [tensors.q(), tensors.k()] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                match dtype {
                    Dtype::F32 => write(&mut out, &(m[(i, j)] as f32).to_le_bytes())?,
                    Dtype::F64 => write(&mut out, &m[(i, j)].to_le_bytes())?,
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads only the 64-byte header of a dump.
pub fn read_dump_header(path: impl AsRef<Path>) -> Result<DumpHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    read_exact_or_truncated(&mut file, &mut buf, path, HEADER_LEN as u64)?;
    DumpHeader::decode(&buf, path)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], path: &Path, expected: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    expected,
                    found: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(())
}

/// Reads an EFT1 dump, promoting the payload to `f64`.
///
/// Returns the header alongside the tensors so callers can check the on-disk
/// dtype. Trailing bytes after the K payload are rejected.
pub fn read_head_dump_with_header(path: impl AsRef<Path>) -> Result<(HeadTensors, DumpHeader)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut hbuf = [0u8; HEADER_LEN];
    read_exact_or_truncated(&mut r, &mut hbuf, path, HEADER_LEN as u64)?;
    let header = DumpHeader::decode(&hbuf, path)?;
    let expected = header.file_bytes();
    if actual_len < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: actual_len,
        });
    }
    if actual_len > expected {
        return Err(Error::HeaderMismatch {
            path: path.to_path_buf(),
            detail: format!("file is {actual_len} bytes but header implies {expected}"),
        });
    }
    let rows = usize::try_from(header.len).map_err(|_| Error::Shape("L overflows usize".into()))?;
    let cols = usize::try_from(header.head_dim).map_err(|_| Error::Shape("d_h overflows usize".into()))?;
    let read_matrix = |r: &mut BufReader<File>| -> Result<DMatrix<f64>> {
        let mut raw = vec![0u8; rows * cols * header.dtype.size()];
        read_exact_or_truncated(r, &mut raw, path, expected)?;
        let values: Vec<f64> = match header.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    };
    let q = read_matrix(&mut r)?;
    let k = read_matrix(&mut r)?;
    let meta = HeadMeta {
        model_id: String::new(),
        layer: header.layer,
        query_head: header.query_head,
        kv_head: header.kv_head,
        text_id: String::new(),
    };
    let tensors = HeadTensors::new(q, k, header.softmax_scale, meta)?;
    Ok((tensors, header))
}

pub fn read_head_dump(path: impl AsRef<Path>) -> Result<HeadTensors> {
    read_head_dump_with_header(path).map(|(t, _)| t)
}

/// One dump listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dump_path: PathBuf,
    pub model_id: String,
    pub layer: u32,
    pub query_head: u32,
    pub kv_head: u32,
    #[serde(rename = "L")]
    pub len: u64,
    pub d_h: u64,
    pub dtype: Dtype,
}

impl ManifestEntry {
    pub fn label(&self) -> String {
        format!("{}/L{}/H{}", self.model_id, self.layer, self.query_head)
    }

    fn check_header(&self, header: &DumpHeader, path: &Path) -> Result<()> {
        let mut problems = Vec::new();
        if header.len != self.len {
            problems.push(format!("L: header {} vs manifest {}", header.len, self.len));
        }
        if header.head_dim != self.d_h {
            problems.push(format!("d_h: header {} vs manifest {}", header.head_dim, self.d_h));
        }
        if header.dtype != self.dtype {
            problems.push(format!("dtype: header {} vs manifest {}", header.dtype, self.dtype));
        }
        if header.layer != self.layer {
            problems.push(format!("layer: header {} vs manifest {}", header.layer, self.layer));
        }
        if header.query_head != self.query_head {
            problems.push(format!(
                "query_head: header {} vs manifest {}",
                header.query_head, self.query_head
            ));
        }
        if header.kv_head != self.kv_head {
            problems.push(format!(
                "kv_head: header {} vs manifest {}",
                header.kv_head, self.kv_head
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::HeaderMismatch {
                path: path.to_path_buf(),
                detail: problems.join("; "),
            })
        }
    }
}

/// A set of head dumps for one text, plus the grouped-query mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub text_id: String,
    pub heads: Vec<ManifestEntry>,
    /// layer -> (query head -> kv head). JSON object keys are decimal strings.
    pub gqa_map: BTreeMap<u32, BTreeMap<u32, u32>>,
    /// Directory relative dump paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(text_id: impl Into<String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            text_id: text_id.into(),
            heads: Vec::new(),
            gqa_map: BTreeMap::new(),
            base_dir: PathBuf::new(),
        }
    }

    /// Appends an entry and records its query→kv mapping.
    pub fn push(&mut self, entry: ManifestEntry) {
        self.gqa_map
            .entry(entry.layer)
            .or_default()
            .insert(entry.query_head, entry.kv_head);
        self.heads.push(entry);
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.dump_path.is_absolute() {
            entry.dump_path.clone()
        } else {
            self.base_dir.join(&entry.dump_path)
        }
    }

    /// Schema-level checks that need no file access.
    pub fn validate_schema(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        for (idx, h) in self.heads.iter().enumerate() {
            if h.len == 0 || h.d_h == 0 {
                return Err(Error::Schema(format!("head {idx}: L and d_h must be >= 1")));
            }
            match self.gqa_map.get(&h.layer).and_then(|m| m.get(&h.query_head)) {
                None => {
                    return Err(Error::Schema(format!(
                        "gqa_map has no entry for layer {} query head {}",
                        h.layer, h.query_head
                    )))
                }
                Some(&kv) if kv != h.kv_head => {
                    return Err(Error::Schema(format!(
                        "head {idx}: kv_head {} disagrees with gqa_map ({kv})",
                        h.kv_head
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Parses and schema-checks a manifest without touching the dumps.
    pub fn parse(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate_schema()?;
        Ok(manifest)
    }

    /// Reads the dump behind `entry`, checking it against the declared shape
    /// and attaching the manifest's identifiers.
    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<HeadTensors> {
        let path = self.resolve(entry);
        let (mut tensors, header) = read_head_dump_with_header(&path)?;
        entry.check_header(&header, &path)?;
        tensors.meta.model_id = entry.model_id.clone();
        tensors.meta.text_id = self.text_id.clone();
        Ok(tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads a manifest and header-checks every referenced dump.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let manifest = Manifest::parse(path)?;
    let missing: Vec<PathBuf> = manifest
        .heads
        .iter()
        .map(|h| manifest.resolve(h))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDumps(missing));
    }
    for h in &manifest.heads {
        let path = manifest.resolve(h);
        let header = read_dump_header(&path)?;
        h.check_header(&header, &path)?;
    }
    Ok(manifest)
}
