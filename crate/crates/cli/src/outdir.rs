use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

/// A directory built under a sibling temporary name and renamed into
/// place on [`OutDir::commit`]. Dropped uncommitted, it is left behind
/// for inspection.
pub struct OutDir {
    target: PathBuf,
    staging: PathBuf,
}

impl OutDir {
    pub fn create(target: &Path, force: bool) -> anyhow::Result<Self> {
        if target.exists() {
            let empty = target
                .read_dir()
                .with_context(|| format!("reading {}", target.display()))?
                .next()
                .is_none();
            if !empty && !force {
                bail!("{} exists and is not empty (pass --force to replace it)", target.display());
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        std::fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(OutDir {
            target: target.to_path_buf(),
            staging,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(self) -> anyhow::Result<PathBuf> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        std::fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results into {}", self.target.display()))?;
        Ok(self.target)
    }
}
