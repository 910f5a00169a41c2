use std::path::{Path, PathBuf};

use log::{info, warn};

use super::dataset::{read_manifest, split_dataset, write_manifest, ManifestRow};
use super::patches::{extract_patches, load_rgb, save_rgb, PatchConfig};
use crate::error::{AsrError, Result};

/// Extracts patches of every raster listed in `manifest` into
/// `<out>/<case_id>/<x>_<y>.png` and writes `<out>/manifest.csv` pointing at
/// the patch directories. Relative raster paths resolve against the
/// manifest's directory. When any row lacks a subset, the whole manifest is
/// split with `ratios` and `seed`.
pub fn ingest(manifest: &Path, out: &Path, cfg: &PatchConfig, ratios: [usize; 3], seed: u64) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = read_manifest(manifest)?;
    std::fs::create_dir_all(out).map_err(|e| AsrError::io(out, e))?;
    for r in &mut rows {
        let src = if r.image_path.is_absolute() { r.image_path.clone() } else { base.join(&r.image_path) };
        let patches = extract_patches(&load_rgb(&src)?, cfg)?;
        if patches.is_empty() {
            warn!("case {} yielded no patches", r.case_id);
        }
        let dir = out.join(&r.case_id);
        std::fs::create_dir_all(&dir).map_err(|e| AsrError::io(&dir, e))?;
        for p in &patches {
            save_rgb(&p.pixels, &dir.join(format!("{}_{}.png", p.origin.0, p.origin.1)))?;
        }
        info!("case {}: {} patches", r.case_id, patches.len());
        r.image_path = PathBuf::from(&r.case_id);
    }
    if rows.iter().any(|r| r.subset.is_none()) {
        let split = split_dataset(&rows, ratios, seed)?;
        for r in &mut rows {
            r.subset = split.get(&r.case_id).copied();
        }
    }
    write_manifest(&rows, &out.join("manifest.csv"))?;
    Ok(rows)
}
