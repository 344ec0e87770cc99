use std::path::Path;

use super::Dataset;
use crate::error::{invalid, Result};

/// Reads `root/<class>/*.png`, one subdirectory per class in name order,
/// resizing every image to `size x size` RGB. Returns the class names too.
pub fn import_png_dir(root: &Path, size: usize, seed: u64) -> Result<(Dataset, Vec<String>)> {
    let mut classes: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(invalid(format!("no class directories under {}", root.display())));
    }
    let mut ds = Dataset::new(size, 3, classes.len(), seed)?;
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)?.to_rgb8();
            let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
            ds.push(label, img.as_raw())?;
        }
    }
    if ds.is_empty() {
        return Err(invalid(format!("no PNG files under {}", root.display())));
    }
    Ok((ds, classes))
}
