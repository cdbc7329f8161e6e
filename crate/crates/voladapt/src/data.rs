//! Shared data model: samples, manifests, label provenance, and the binary
//! volume store every other pipeline stage reads and writes.
//!
//! Manifests are JSON Lines: an optional header object (`split`,
//! `created_by`) followed by one sample record per line. Files without a
//! header load with `split = TRAIN`, `created_by = "unknown"`. Volumes live
//! in a little-endian binary container: a 24-byte header (magic `VOL1`,
//! version, D, H, W, element-type code) followed by the row-major f32
//! payload.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Dense (D, H, W) intensity volume. Stored as f32; finiteness is enforced
/// at every store boundary.
pub type VolumeTensor = Array3<f32>;

pub const VOLUME_MAGIC: [u8; 4] = *b"VOL1";
pub const VOLUME_VERSION: u32 = 1;
/// Element-type code for 32-bit little-endian IEEE floats (the only payload
/// type the store currently accepts).
pub const ELEM_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed record at line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("corrupt header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },
    #[error("shape mismatch in {path}: header declares {expected} elements, payload has {got}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary class label. Integer codes are fixed for all serialization:
/// non-COVID is 0, COVID is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    NonCovid,
    Covid,
}

impl ClassLabel {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            ClassLabel::NonCovid => 0,
            ClassLabel::Covid => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        match index {
            0 => Some(ClassLabel::NonCovid),
            1 => Some(ClassLabel::Covid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Label state of one sample: who labeled it (if anyone) and, for pseudo
/// labels, the model confidence that admitted it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub label: Option<ClassLabel>,
    pub provenance: Provenance,
    pub confidence: Option<f64>,
}

impl LabelRecord {
    pub fn human(label: ClassLabel) -> Self {
        LabelRecord {
            label: Some(label),
            provenance: Provenance::Human,
            confidence: None,
        }
    }

    pub fn pseudo(label: ClassLabel, confidence: f64) -> Self {
        LabelRecord {
            label: Some(label),
            provenance: Provenance::Pseudo,
            confidence: Some(confidence),
        }
    }

    pub fn unlabeled() -> Self {
        LabelRecord {
            label: None,
            provenance: Provenance::None,
            confidence: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.provenance {
            Provenance::None => {
                if self.label.is_some() || self.confidence.is_some() {
                    return Err("provenance none requires absent label and confidence".into());
                }
            }
            Provenance::Human => {
                if self.label.is_none() {
                    return Err("provenance human requires a label".into());
                }
                if self.confidence.is_some() {
                    return Err("provenance human forbids a confidence".into());
                }
            }
            Provenance::Pseudo => {
                if self.label.is_none() {
                    return Err("provenance pseudo requires a label".into());
                }
                match self.confidence {
                    // Binary argmax confidence can never fall below 0.5.
                    Some(c) if (0.5..=1.0).contains(&c) => {}
                    Some(c) => return Err(format!("pseudo confidence {c} outside [0.5, 1]")),
                    None => return Err("provenance pseudo requires a confidence".into()),
                }
            }
        }
        Ok(())
    }
}

/// One 3D CT volume: identity, domain tag, storage locator, and label state.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub domain: Domain,
    pub volume_ref: String,
    pub shape: [usize; 3],
    pub label: LabelRecord,
}

impl VolumeSample {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty sample id".into());
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(format!("shape {:?} has a zero component", self.shape));
        }
        self.label.validate()
    }
}

/// Ordered collection of samples plus split and provenance metadata; the unit
/// passed between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<VolumeSample>,
    pub split: Split,
    pub created_by: String,
}

impl DatasetManifest {
    pub fn new(split: Split, created_by: impl Into<String>) -> Self {
        DatasetManifest {
            entries: Vec::new(),
            split,
            created_by: created_by.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every manifest invariant; load and save both reject rather
    /// than repair.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(DataError::DuplicateId(entry.id.clone()));
            }
            entry
                .validate()
                .map_err(|detail| DataError::InvariantViolation(format!("{}: {detail}", entry.id)))?;
            if matches!(self.split, Split::Val | Split::Test)
                && entry.label.provenance == Provenance::Pseudo
            {
                return Err(DataError::InvariantViolation(format!(
                    "{}: pseudo-labeled entry in {:?} manifest",
                    entry.id, self.split
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    split: Split,
    created_by: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    domain: Domain,
    volume_ref: String,
    shape: [usize; 3],
    label: Option<u8>,
    provenance: Provenance,
    confidence: Option<f64>,
}

impl RecordLine {
    fn into_sample(self, line: usize) -> Result<VolumeSample, DataError> {
        let label = match self.label {
            None => None,
            Some(code) => Some(ClassLabel::from_index(code as usize).ok_or_else(|| {
                DataError::MalformedRecord {
                    line,
                    detail: format!("label code {code} not in {{0, 1}}"),
                }
            })?),
        };
        Ok(VolumeSample {
            id: self.id,
            domain: self.domain,
            volume_ref: self.volume_ref,
            shape: self.shape,
            label: LabelRecord {
                label,
                provenance: self.provenance,
                confidence: self.confidence,
            },
        })
    }

    fn from_sample(sample: &VolumeSample) -> Self {
        RecordLine {
            id: sample.id.clone(),
            domain: sample.domain,
            volume_ref: sample.volume_ref.clone(),
            shape: sample.shape,
            label: sample.label.label.map(|l| l.index() as u8),
            provenance: sample.label.provenance,
            confidence: sample.label.confidence,
        }
    }
}

fn open_file(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io(e)
        }
    })
}

/// Loads and validates a JSON-Lines manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let reader = BufReader::new(open_file(path)?);
    let mut manifest = DatasetManifest::new(Split::Train, "unknown");
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            // A leading object without an "id" field is the manifest header.
            if let Ok(header) = serde_json::from_str::<HeaderLine>(&line) {
                manifest.split = header.split;
                manifest.created_by = header.created_by;
                continue;
            }
        }
        let record: RecordLine =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                line: line_no,
                detail: e.to_string(),
            })?;
        manifest.entries.push(record.into_sample(line_no)?);
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Writes a manifest as JSON Lines (header line, then one record per line).
/// Round-trips through [`load_manifest`] field-for-field.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    manifest.validate()?;
    let mut writer = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        split: manifest.split,
        created_by: manifest.created_by.clone(),
    };
    serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::other)?;
    writer.write_all(b"\n")?;
    for entry in &manifest.entries {
        serde_json::to_writer(&mut writer, &RecordLine::from_sample(entry))
            .map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Resolves a manifest entry's `volume_ref` against the manifest's own
/// directory (absolute refs pass through).
pub fn resolve_volume_ref(manifest_path: &Path, volume_ref: &str) -> PathBuf {
    let ref_path = Path::new(volume_ref);
    if ref_path.is_absolute() {
        ref_path.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(ref_path)
    }
}

fn ensure_finite(tensor: &VolumeTensor) -> Result<(), DataError> {
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(DataError::InvariantViolation(
            "volume contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// Writes a volume to the binary store. Write→read round-trips bit-exactly.
pub fn write_volume(tensor: &VolumeTensor, path: &Path) -> Result<(), DataError> {
    ensure_finite(tensor)?;
    let (d, h, w) = tensor.dim();
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&VOLUME_MAGIC)?;
    writer.write_all(&VOLUME_VERSION.to_le_bytes())?;
    for dim in [d, h, w] {
        writer.write_all(&(dim as u32).to_le_bytes())?;
    }
    writer.write_all(&ELEM_F32.to_le_bytes())?;
    for row in tensor.rows() {
        for &v in row {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a volume from the binary store, validating header and payload.
pub fn read_volume(path: &Path) -> Result<VolumeTensor, DataError> {
    let mut reader = BufReader::new(open_file(path)?);
    let mut header = [0u8; 24];
    reader
        .read_exact(&mut header)
        .map_err(|_| DataError::CorruptHeader {
            path: path.to_path_buf(),
            detail: "file shorter than the 24-byte header".into(),
        })?;
    if header[0..4] != VOLUME_MAGIC {
        return Err(DataError::CorruptHeader {
            path: path.to_path_buf(),
            detail: format!("bad magic {:?}", &header[0..4]),
        });
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VOLUME_VERSION {
        return Err(DataError::CorruptHeader {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let (d, h, w) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let elem = word(20);
    if elem != ELEM_F32 {
        return Err(DataError::CorruptHeader {
            path: path.to_path_buf(),
            detail: format!("unsupported element-type code {elem}"),
        });
    }
    if d == 0 || h == 0 || w == 0 {
        return Err(DataError::CorruptHeader {
            path: path.to_path_buf(),
            detail: format!("zero dimension in ({d}, {h}, {w})"),
        });
    }
    let expected = d * h * w;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(DataError::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            got: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let tensor = Array3::from_shape_vec((d, h, w), values).expect("length checked above");
    ensure_finite(&tensor)?;
    Ok(tensor)
}

/// Loads one sample's volume, resolving its ref against the manifest location
/// and cross-checking the declared shape against the stored file.
pub fn load_sample_volume(
    manifest_path: &Path,
    sample: &VolumeSample,
) -> Result<VolumeTensor, DataError> {
    let path = resolve_volume_ref(manifest_path, &sample.volume_ref);
    let tensor = read_volume(&path)?;
    let (d, h, w) = tensor.dim();
    if [d, h, w] != sample.shape {
        return Err(DataError::InvariantViolation(format!(
            "sample {}: manifest declares shape {:?} but {} holds ({d}, {h}, {w})",
            sample.id,
            sample.shape,
            path.display()
        )));
    }
    Ok(tensor)
}
