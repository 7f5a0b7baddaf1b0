//! Optional on-disk cache of decoded, cropped and resized images.
//!
//! Enabled by `PCE_CACHE_DIR`. Entries are raw little-endian `f64` rasters keyed by the
//! source path, size, modification time and target side.

use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use fundus_core::image_io::load_image;
use fundus_core::seed::id_from_str;
use fundus_core::Image;
use ndarray::Array3;

pub const CACHE_ENV: &str = "PCE_CACHE_DIR";

fn cache_path(dir: &Path, src: &Path, side: usize) -> Option<PathBuf> {
    let meta = std::fs::metadata(src).ok()?;
    let mtime = meta.modified().ok()?.duration_since(UNIX_EPOCH).ok()?.as_nanos();
    let abs = std::fs::canonicalize(src).ok()?;
    let key = id_from_str(&format!("{}|{}|{mtime}|{side}", abs.display(), meta.len()));
    Some(dir.join(format!("img-{key:016x}-{side}.f64")))
}

fn read_entry(path: &Path, side: usize) -> Option<Image> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() != 3 * side * side * 8 {
        return None;
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Image::new(Array3::from_shape_vec((3, side, side), data).ok()?).ok()
}

fn write_entry(path: &Path, img: &Image) {
    let mut bytes = Vec::with_capacity(img.pixels.len() * 8);
    for v in img.pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // best effort: a failed cache write only costs a reload next time
    let tmp = path.with_extension("tmp");
    if std::fs::write(&tmp, &bytes).is_ok() {
        let _ = std::fs::rename(&tmp, path);
    }
}

/// [`load_image`] through the cache when one is configured.
pub fn load(src: &Path, side: usize) -> fundus_core::Result<Image> {
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return load_image(src, side);
    };
    let _ = std::fs::create_dir_all(&dir);
    let entry = cache_path(&dir, src, side);
    if let Some(img) = entry.as_deref().and_then(|p| read_entry(p, side)) {
        return Ok(img);
    }
    let img = load_image(src, side)?;
    if let Some(p) = entry {
        write_entry(&p, &img);
    }
    Ok(img)
}
