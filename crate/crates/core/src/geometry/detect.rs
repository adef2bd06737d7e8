use std::path::{Path, PathBuf};

use super::{FaceRecord, ImageBuffer};
use crate::error::{Error, Result};

/// Source of face boxes and landmarks for an image.
pub trait FaceDetectorProvider: Send + Sync {
    /// `source` identifies the image (usually its path).
    fn detect(&self, image: &ImageBuffer, source: &str) -> Result<Vec<FaceRecord>>;
}

/// Runs `provider` and enforces the record invariants. Records that fail
/// the landmark sanity gate are kept with `flagged` set.
pub fn detect_faces(
    image: &ImageBuffer,
    source: &str,
    provider: &dyn FaceDetectorProvider,
) -> Result<Vec<FaceRecord>> {
    let mut faces = provider.detect(image, source)?;
    for f in &mut faces {
        f.validate()
            .map_err(|e| Error::Detection(format!("provider returned an invalid face for {source}: {e}")))?;
        f.flagged = !f.passes_sanity_gate();
        if f.flagged {
            log::warn!("{source}: landmarks outside the sanity gate of box {:?}", f.bbox);
        }
    }
    Ok(faces)
}

/// Per-image sidecar location: the image path with a `.jsonl` extension.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("jsonl")
}

/// Parses JSON-lines face annotations. Blank lines are skipped; errors
/// carry the 1-based line number.
pub fn parse_sidecar(text: &str, path: &Path) -> Result<Vec<FaceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut rec: FaceRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        rec.flagged = !rec.passes_sanity_gate();
        out.push(rec);
    }
    Ok(out)
}

/// Fixture detector that reads annotations from sidecar files.
#[derive(Clone, Debug)]
pub enum SidecarDetector {
    /// Reads `<image>.jsonl` next to each image.
    PerImage,
    /// One annotation file covering many images, matched on the `image`
    /// field by file name.
    Shared(Vec<FaceRecord>),
}

impl SidecarDetector {
    pub fn shared(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(SidecarDetector::Shared(parse_sidecar(&text, path)?))
    }
}

fn file_name(s: &str) -> &str {
    Path::new(s).file_name().and_then(|n| n.to_str()).unwrap_or(s)
}

impl FaceDetectorProvider for SidecarDetector {
    fn detect(&self, _image: &ImageBuffer, source: &str) -> Result<Vec<FaceRecord>> {
        match self {
            SidecarDetector::PerImage => {
                let path = sidecar_path(Path::new(source));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Detection(format!("sidecar {}: {e}", path.display())))?;
                parse_sidecar(&text, &path)
            }
            SidecarDetector::Shared(records) => Ok(records
                .iter()
                .filter(|r| file_name(&r.source_image) == file_name(source))
                .cloned()
                .collect()),
        }
    }
}
