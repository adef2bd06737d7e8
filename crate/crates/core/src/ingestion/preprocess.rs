use std::path::Path;

use rayon::prelude::*;

use super::{DatasetManifest, Label, ManifestEntry, Split, ViewPaths};
use crate::error::{Error, Result};
use crate::geometry::{extract_views, FaceRecord, ImageBuffer, ViewImages, ViewParams};

/// One face ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `<image>#<face index>`, unique within a manifest.
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub face: FaceRecord,
    pub views: ViewImages,
}

fn usable(face: &FaceRecord, image: &str) -> bool {
    if face.flagged {
        log::warn!("{image}: skipping face outside the landmark sanity gate");
    }
    !face.flagged
}

/// Extracts the views of every usable face and writes them as PNGs under
/// `out_dir/views`, returning a manifest with one entry per face.
pub fn preprocess(manifest: &DatasetManifest, out_dir: &Path, params: &ViewParams) -> Result<DatasetManifest> {
    let per_entry: Vec<Vec<ManifestEntry>> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(n, e)| -> Result<Vec<ManifestEntry>> {
            let src = manifest.resolve(&e.image);
            let image = ImageBuffer::load_png(&src)?;
            let abs = std::path::absolute(&src).map_err(|err| Error::io(&src, err))?;
            let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let split = e.split.map_or("unsplit", |s| s.as_str());
            let mut out = Vec::new();
            for (k, face) in e.faces.iter().enumerate().filter(|(_, f)| usable(f, &e.image)) {
                let views = extract_views(&image, face, params)?;
                let rel = |view: &str| format!("views/{split}/{n:05}_{stem}_f{k}_{view}.png");
                let paths = ViewPaths {
                    global: rel("global"),
                    middle: rel("middle"),
                    local: rel("local"),
                };
                views.global.image.save_png(&out_dir.join(&paths.global))?;
                views.middle.image.save_png(&out_dir.join(&paths.middle))?;
                views.local.image.save_png(&out_dir.join(&paths.local))?;
                out.push(ManifestEntry {
                    image: abs.to_string_lossy().into_owned(),
                    label: e.label,
                    split: e.split,
                    unit: e.unit.clone(),
                    faces: vec![face.clone()],
                    views: Some(paths),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let out = DatasetManifest {
        entries: per_entry.into_iter().flatten().collect(),
        seed: manifest.seed,
        source: format!("{} | views margin={} expand={} side={}", manifest.source, params.margin, params.expand, params.side),
        base_dir: out_dir.to_path_buf(),
    };
    out.save(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

/// Loads the samples of the requested splits, reading precomputed views
/// when present and extracting them otherwise.
pub fn load_samples(manifest: &DatasetManifest, splits: &[Split], params: &ViewParams) -> Result<Vec<Sample>> {
    let wanted: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split.is_some_and(|s| splits.contains(&s)))
        .collect();
    let nested: Vec<Vec<Sample>> = wanted
        .par_iter()
        .map(|e| -> Result<Vec<Sample>> {
            let split = e.split.expect("filtered on split");
            if let Some(v) = &e.views {
                let face = e
                    .faces
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("view entry for {} has no face", e.image)))?;
                return Ok(vec![Sample {
                    id: format!("{}#{}", e.image, v.local),
                    label: e.label,
                    split,
                    face,
                    views: ViewImages {
                        global: ImageBuffer::load_png(&manifest.resolve(&v.global))?,
                        middle: ImageBuffer::load_png(&manifest.resolve(&v.middle))?,
                        local: ImageBuffer::load_png(&manifest.resolve(&v.local))?,
                    },
                }]);
            }
            let image = ImageBuffer::load_png(&manifest.resolve(&e.image))?;
            e.faces
                .iter()
                .enumerate()
                .filter(|(_, f)| usable(f, &e.image))
                .map(|(k, f)| {
                    Ok(Sample {
                        id: format!("{}#{k}", e.image),
                        label: e.label,
                        split,
                        face: f.clone(),
                        views: extract_views(&image, f, params)?.into(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
