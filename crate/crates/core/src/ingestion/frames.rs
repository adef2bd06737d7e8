use std::path::{Path, PathBuf};

use super::{make_splits, sample_frames, DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::{detect_faces, sidecar_path, FaceDetectorProvider, ImageBuffer};

/// A decoded video, addressed by frame index.
pub trait FrameSource {
    fn name(&self) -> &str;
    fn frame_count(&self) -> usize;
    fn frame(&self, index: usize) -> Result<ImageBuffer>;
    /// On-disk location of the frame, when there is one.
    fn frame_path(&self, index: usize) -> Option<&Path>;
}

/// A directory of PNG frames, ordered by file name.
#[derive(Clone, Debug)]
pub struct DirectoryFrames {
    name: String,
    frames: Vec<PathBuf>,
}

impl DirectoryFrames {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        frames.sort();
        Ok(DirectoryFrames {
            name: dir.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_string(),
            frames,
        })
    }
}

impl FrameSource for DirectoryFrames {
    fn name(&self) -> &str {
        &self.name
    }

    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<ImageBuffer> {
        ImageBuffer::load_png(&self.frames[index])
    }

    fn frame_path(&self, index: usize) -> Option<&Path> {
        self.frames.get(index).map(PathBuf::as_path)
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Builds a manifest from `root/{real,fake}/<video>/*.png`, keeping one
/// frame per `stride`. Kept frames and their face sidecars are written
/// under `out_dir/frames`, and the manifest to `out_dir/manifest.jsonl`.
pub fn ingest_videos(
    root: &Path,
    out_dir: &Path,
    stride: usize,
    seed: u64,
    provider: &dyn FaceDetectorProvider,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for label in [Label::Real, Label::Fake] {
        for video_dir in subdirs(&root.join(label.name()))? {
            let video = DirectoryFrames::open(&video_dir)?;
            let unit = format!("{}/{}", label.name(), video.name());
            for i in sample_frames(video.frame_count(), stride)? {
                let src = video.frame_path(i).expect("sampled index is in range").to_path_buf();
                let image = video.frame(i)?;
                let faces = detect_faces(&image, &src.to_string_lossy(), provider)?;
                let file = src.file_name().and_then(|n| n.to_str()).unwrap_or("frame.png").to_string();
                let rel = format!("frames/{unit}/{file}");
                let dst = out_dir.join(&rel);
                image.save_png(&dst)?;
                let mut sidecar = String::new();
                let faces: Vec<_> = faces
                    .into_iter()
                    .map(|mut f| {
                        f.source_image = file.clone();
                        f
                    })
                    .collect();
                for f in &faces {
                    sidecar.push_str(&serde_json::to_string(f)?);
                    sidecar.push('\n');
                }
                crate::artifact::write_atomic(&sidecar_path(&dst), sidecar.as_bytes())?;
                entries.push(ManifestEntry {
                    image: rel,
                    label,
                    split: None,
                    unit: unit.clone(),
                    faces,
                    views: None,
                });
            }
        }
    }
    let mut m = make_splits(entries, seed, &format!("frames root={} stride={stride}", root.display()))?;
    m.base_dir = out_dir.to_path_buf();
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}
