//! Full-reference quality (PSNR, SSIM), mask overlap (IoU, Dice) and label-based grading.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::image_io::{load_image, load_raw, Image, Mask};
use crate::{Error, Result};

/// Returned for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1.0, in decibels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_raster(&a.pixels, &b.pixels)
}

pub fn psnr_raster(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable "valid" filtering of a plane: output is `(h - n + 1) × (w - n + 1)`.
fn filter_valid(plane: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = k.iter().enumerate().map(|(i, wi)| wi * plane[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = k.iter().enumerate().map(|(i, wi)| wi * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
/// dynamic range 1. Only windows fully inside the image are used; the map is averaged
/// over positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_raster(&a.pixels, &b.pixels)
}

pub fn ssim_raster(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let k = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let y = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mu_x = filter_valid(&x, &k);
        let mu_y = filter_valid(&y, &k);
        let xx = filter_valid(&(&x * &x), &k);
        let yy = filter_valid(&(&y * &y), &k);
        let xy = filter_valid(&(&x * &y), &k);
        ndarray::Zip::from(&mu_x)
            .and(&mu_y)
            .and(&xx)
            .and(&yy)
            .and(&xy)
            .for_each(|mx, my, sxx, syy, sxy| {
                let var_x = sxx - mx * mx;
                let var_y = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
                count += 1;
            });
    }
    Ok(total / count as f64)
}

/// Intersection over union and Dice coefficient; both are 1 when both masks are empty.
pub fn overlap_metrics(pred: &Mask, reference: &Mask) -> Result<(f64, f64)> {
    if pred.dim() != reference.dim() {
        return Err(Error::Dimension(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let (mut inter, mut p, mut r) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(reference.iter()) {
        p += a as usize;
        r += b as usize;
        inter += (a && b) as usize;
    }
    let union = p + r - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        inter as f64 / union as f64,
        2.0 * inter as f64 / (p + r) as f64,
    ))
}

/// Converts a normalized single-plane raster into a mask; only 0 and 1 are accepted.
pub fn binarize(plane: &Array2<f64>) -> Result<Mask> {
    let mut out = Mask::from_elem(plane.dim(), false);
    for ((idx, &v), o) in plane.indexed_iter().zip(out.iter_mut()) {
        if v == 0.0 {
            *o = false;
        } else if v == 1.0 {
            *o = true;
        } else {
            return Err(Error::Format(format!(
                "mask value {v} at {idx:?} is not binary"
            )));
        }
    }
    Ok(out)
}

/// Loads a black/white mask image. Any channel disagreement or gray level is a format error.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let raw = load_raw(path)?;
    let (_, h, w) = raw.dim();
    let mut plane = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = raw[[0, y, x]];
            if raw[[1, y, x]] != v || raw[[2, y, x]] != v {
                return Err(Error::Format(format!(
                    "{}: mask pixel ({y}, {x}) is not gray",
                    path.display()
                )));
            }
            plane[[y, x]] = v;
        }
    }
    binarize(&plane).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QualityLabel {
    Good,
    Usable,
    Reject,
}

impl QualityLabel {
    pub fn weight(self) -> f64 {
        match self {
            QualityLabel::Good => 2.0,
            QualityLabel::Usable => 1.0,
            QualityLabel::Reject => 0.0,
        }
    }
}

impl FromStr for QualityLabel {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" => Ok(QualityLabel::Good),
            "usable" => Ok(QualityLabel::Usable),
            "reject" => Ok(QualityLabel::Reject),
            _ => Err(()),
        }
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityLabel::Good => "Good",
            QualityLabel::Usable => "Usable",
            QualityLabel::Reject => "Reject",
        })
    }
}

/// Per-image quality grades produced by an external classifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QualityLabelFile {
    pub records: Vec<(String, QualityLabel)>,
}

impl QualityLabelFile {
    pub fn new(records: Vec<(String, QualityLabel)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, _) in &records {
            if !seen.insert(id.as_str()) {
                return Err(Error::Format(format!("duplicate image id {id:?}")));
            }
        }
        Ok(QualityLabelFile { records })
    }

    /// Parses `id,label` CSV with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("label file header: {e}")))?
            .clone();
        if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "label" {
            return Err(Error::Format(format!(
                "label file header must be `id,label`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Format(format!("label file: {e}")))?;
            let id = row.get(0).unwrap_or_default().to_string();
            let raw = row.get(1).unwrap_or_default();
            let label = raw.parse::<QualityLabel>().map_err(|_| {
                Error::Format(format!("unknown quality label {raw:?} for id {id:?}"))
            })?;
            records.push((id, label));
        }
        QualityLabelFile::new(records)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        QualityLabelFile::from_csv(file)
    }
}

/// Returns `(FIQA, WFQA)`: the share of `Good` labels and the mean of the weights
/// Good = 2, Usable = 1, Reject = 0.
pub fn wfqa(labels: &QualityLabelFile) -> Result<(f64, f64)> {
    let n = labels.records.len();
    if n == 0 {
        return Err(Error::Config("quality label file has no records".into()));
    }
    let good = labels
        .records
        .iter()
        .filter(|(_, l)| *l == QualityLabel::Good)
        .count();
    let weight: f64 = labels.records.iter().map(|(_, l)| l.weight()).sum();
    Ok((good as f64 / n as f64, weight / n as f64))
}

/// Per-file metric rows plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub columns: [&'static str; 2],
    pub rows: Vec<(String, [f64; 2])>,
    pub mean: [f64; 2],
    /// Files present in only one of the two directories.
    pub unmatched: Vec<String>,
}

impl MetricTable {
    fn from_rows(columns: [&'static str; 2], rows: Vec<(String, [f64; 2])>, unmatched: Vec<String>) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 2];
        for (_, v) in &rows {
            mean[0] += v[0] / n;
            mean[1] += v[1] / n;
        }
        MetricTable {
            columns,
            rows,
            mean,
            unmatched,
        }
    }

    /// CSV with an `id,<a>,<b>` header, one row per file and a trailing `mean` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Format(format!("csv write: {e}"));
        w.write_record(["id", self.columns[0], self.columns[1]]).map_err(io)?;
        for (id, v) in &self.rows {
            w.write_record([id.clone(), fmt_metric(v[0]), fmt_metric(v[1])])
                .map_err(io)?;
        }
        w.write_record([
            "mean".to_string(),
            fmt_metric(self.mean[0]),
            fmt_metric(self.mean[1]),
        ])
        .map_err(io)?;
        w.flush().map_err(|e| Error::Format(format!("csv write: {e}")))?;
        Ok(())
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && matches!(
            p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
            Some("png" | "jpg" | "jpeg")
        )
}

/// Sorted image file names in a directory.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image_file(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn match_files(pred_dir: &Path, ref_dir: &Path) -> Result<(Vec<(String, PathBuf, PathBuf)>, Vec<String>)> {
    let preds = list_images(pred_dir)?;
    let refs = list_images(ref_dir)?;
    let names: BTreeSet<&String> = preds.keys().chain(refs.keys()).collect();
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for name in names {
        match (preds.get(name), refs.get(name)) {
            (Some(p), Some(r)) => matched.push((name.clone(), p.clone(), r.clone())),
            _ => unmatched.push(name.clone()),
        }
    }
    if matched.is_empty() {
        return Err(Error::Config(format!(
            "no common file names between {} and {}",
            pred_dir.display(),
            ref_dir.display()
        )));
    }
    Ok((matched, unmatched))
}

/// SSIM and PSNR for every file name present in both directories.
///
/// With `side` set, both images go through the standard crop-and-resize; otherwise they
/// are compared at native resolution and must agree in size.
pub fn evaluate_pairs(pred_dir: &Path, ref_dir: &Path, side: Option<usize>) -> Result<MetricTable> {
    let (matched, unmatched) = match_files(pred_dir, ref_dir)?;
    let load = |p: &Path| -> Result<Image> {
        match side {
            Some(s) => load_image(p, s),
            None => Ok(Image::clamped(load_raw(p)?)),
        }
    };
    let mut rows = Vec::with_capacity(matched.len());
    for (name, p, r) in matched {
        let (a, b) = (load(&p)?, load(&r)?);
        rows.push((name, [ssim(&a, &b)?, psnr(&a, &b)?]));
    }
    Ok(MetricTable::from_rows(["ssim", "psnr"], rows, unmatched))
}

/// IoU and Dice for every mask file name present in both directories.
pub fn evaluate_masks(pred_dir: &Path, ref_dir: &Path) -> Result<MetricTable> {
    let (matched, unmatched) = match_files(pred_dir, ref_dir)?;
    let mut rows = Vec::with_capacity(matched.len());
    for (name, p, r) in matched {
        let (iou, dsc) = overlap_metrics(&load_mask(&p)?, &load_mask(&r)?)?;
        rows.push((name, [iou, dsc]));
    }
    Ok(MetricTable::from_rows(["iou", "dsc"], rows, unmatched))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::save_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::clamped(Array3::from_shape_fn((3, side, side), |_| rng.gen::<f64>()))
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(16, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Image::filled(16, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = random_image(16, 1);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
        assert!(matches!(psnr(&a, &Image::filled(8, 0.3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(24, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(24, 3);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());

        // constants: variance terms vanish, leaving C1 / (1 + C1)
        let zero = Image::filled(16, 0.0);
        let one = Image::filled(16, 1.0);
        let c1 = 0.01f64.powi(2);
        let expected = c1 / (1.0 + c1);
        let got = ssim(&zero, &one).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got < 1e-3);
        assert!(matches!(
            ssim(&Image::filled(10, 0.0), &Image::filled(10, 0.0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn overlap_examples() {
        let mut p = Mask::from_elem((20, 20), false);
        let mut r = Mask::from_elem((20, 20), false);
        assert_eq!(overlap_metrics(&p, &r).unwrap(), (1.0, 1.0));
        // |P| = |R| = 100, |P ∩ R| = 50
        for i in 0..100 {
            p[[i / 10, i % 10]] = true;
        }
        for i in 50..150 {
            r[[i / 10, i % 10]] = true;
        }
        let (iou, dsc) = overlap_metrics(&p, &r).unwrap();
        assert_eq!(iou, 1.0 / 3.0);
        assert_eq!(dsc, 0.5);
        assert_eq!(overlap_metrics(&p, &p).unwrap(), (1.0, 1.0));
        let mut q = Mask::from_elem((20, 20), false);
        q[[19, 19]] = true;
        assert_eq!(overlap_metrics(&p, &q).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn non_binary_mask_is_format_error() {
        let plane = Array2::from_elem((3, 3), 0.5);
        assert!(matches!(binarize(&plane), Err(Error::Format(_))));
    }

    #[test]
    fn wfqa_examples() {
        let three = QualityLabelFile::from_csv("id,label\na,Good\nb,Usable\nc,Reject\n".as_bytes()).unwrap();
        let (fiqa, w) = wfqa(&three).unwrap();
        assert_eq!(fiqa, 1.0 / 3.0);
        assert_eq!(w, 1.0);
        let good = QualityLabelFile::from_csv("id,label\na,Good\nb,Good\n".as_bytes()).unwrap();
        assert_eq!(wfqa(&good).unwrap(), (1.0, 2.0));
        let err = QualityLabelFile::from_csv("id,label\na,Good\nzz,Great\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("zz"));
        assert!(QualityLabelFile::from_csv("id,label\na,Good\na,Reject\n".as_bytes()).is_err());
        assert!(wfqa(&QualityLabelFile::default()).is_err());
    }

    #[test]
    fn evaluate_pairs_reports_unmatched() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, refd) = (dir.path().join("p"), dir.path().join("r"));
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&refd).unwrap();
        for i in 0..3 {
            let img = random_image(16, i);
            save_image(&img, pred.join(format!("{i}.png"))).unwrap();
            save_image(&img, refd.join(format!("{i}.png"))).unwrap();
        }
        save_image(&random_image(16, 9), pred.join("extra.png")).unwrap();
        let table = evaluate_pairs(&pred, &refd, None).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.unmatched, vec!["extra.png".to_string()]);
        assert_eq!(table.mean, [1.0, 100.0]);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("id,ssim,psnr\n"));

        let empty = dir.path().join("e");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(evaluate_pairs(&pred, &empty, None), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dice_dominates_iou(bits_p in proptest::collection::vec(any::<bool>(), 36),
                              bits_r in proptest::collection::vec(any::<bool>(), 36)) {
            let p = Mask::from_shape_vec((6, 6), bits_p).unwrap();
            let r = Mask::from_shape_vec((6, 6), bits_r).unwrap();
            let (iou, dsc) = overlap_metrics(&p, &r).unwrap();
            prop_assert!(dsc >= iou);
            if iou == 0.0 || iou == 1.0 {
                prop_assert_eq!(dsc, iou);
            } else {
                prop_assert!(dsc > iou);
            }
        }

        #[test]
        fn wfqa_without_usable_doubles_fiqa(labels in proptest::collection::vec(any::<bool>(), 1..40)) {
            let records = labels.iter().enumerate()
                .map(|(i, &g)| (i.to_string(), if g { QualityLabel::Good } else { QualityLabel::Reject }))
                .collect();
            let (fiqa, w) = wfqa(&QualityLabelFile::new(records).unwrap()).unwrap();
            prop_assert!((w - 2.0 * fiqa).abs() < 1e-12);
        }
    }
}
