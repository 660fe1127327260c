//! Dataset plumbing: manifest parsing, image decoding and preprocessing to
//! the network's `[1,128,128]` input contract, horizontal flipping, and
//! majority-matched oversampling for class-imbalanced sets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

/// Errors from manifest or image ingestion. Line-oriented problems carry
/// their 1-based line number.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}:{line}: label {label} out of range for {num_classes} classes", path.display())]
    LabelRange {
        path: PathBuf,
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{}: manifest contains no records", path.display())]
    EmptyManifest { path: PathBuf },
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("dataset contains no samples")]
    EmptyDataset,
}

/// One manifest line: an image path (kept as written; resolved against the
/// manifest's directory at load time) and its class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub label: usize,
}

/// Preprocessing contract: square resize target and the affine normalization
/// applied after scaling pixels to the unit interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessSpec {
    pub target: usize,
    pub mean: f32,
    pub std: f32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            target: 128,
            mean: 0.5,
            std: 0.5,
        }
    }
}

/// Parses a header-less CSV manifest of `path,label` lines. Records keep
/// file order; duplicates are allowed; blank lines are skipped; labels are
/// validated against `num_classes`.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<ManifestRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (image, label_str) = raw
            .rsplit_once(',')
            .ok_or_else(|| parse_err("missing ',' separator".into()))?;
        let image = image.trim();
        if image.is_empty() {
            return Err(parse_err("empty image path".into()));
        }
        let label_str = label_str.trim();
        let label: usize = label_str
            .parse()
            .map_err(|e| parse_err(format!("invalid label {label_str:?}: {e}")))?;
        if label >= num_classes {
            return Err(DataError::LabelRange {
                path: path.to_path_buf(),
                line,
                label,
                num_classes,
            });
        }
        records.push(ManifestRecord {
            image_path: PathBuf::from(image),
            label,
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyManifest {
            path: path.to_path_buf(),
        });
    }
    Ok(records)
}

fn bilinear_resize(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    let rx = sw as f64 / dw as f64;
    let ry = sh as f64 / dh as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[dy * dw + dx] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Decodes an image (PNG or PGM among others), converts to grayscale with
/// ITU-R 601 luma weights, bilinearly resizes to the target square (centers
/// aligned on half-pixel coordinates), and normalizes `(x/255 - mean)/std`.
/// Inputs already at the target size skip resampling entirely.
pub fn load_image(path: &Path, spec: &PreprocessSpec) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let gray: Vec<f64> = rgb
        .pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect();
    let t = spec.target;
    let resized = if (w, h) == (t, t) {
        gray
    } else {
        bilinear_resize(&gray, w, h, t, t)
    };
    let data: Vec<f32> = resized
        .into_iter()
        .map(|v| ((v / 255.0 - spec.mean as f64) / spec.std as f64) as f32)
        .collect();
    Ok(Tensor::from_vec(vec![1, t, t], data))
}

/// Reverses the last (width) axis of a tensor of any rank; an involution.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let w = *shape.last().expect("hflip: tensor has at least one axis");
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    Tensor::from_vec(shape, out)
}

/// One epoch of indices where every represented class appears as often as
/// the majority class: whole copies of each class's indices plus a seeded
/// without-replacement sample for the remainder, then a full shuffle.
/// Deterministic given the seed.
pub fn oversample_indices(labels: &[usize], seed: u64) -> Result<Vec<usize>, DataError> {
    if labels.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let majority = by_class.values().map(Vec::len).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch = Vec::with_capacity(majority * by_class.len());
    for idxs in by_class.values() {
        for _ in 0..majority / idxs.len() {
            epoch.extend_from_slice(idxs);
        }
        let rem = majority % idxs.len();
        if rem > 0 {
            // Partial Fisher-Yates: the first `rem` slots become a uniform
            // without-replacement sample.
            let mut pool = idxs.clone();
            for j in 0..rem {
                let k = rng.random_range(j..pool.len());
                pool.swap(j, k);
            }
            epoch.extend_from_slice(&pool[..rem]);
        }
    }
    epoch.shuffle(&mut rng);
    Ok(epoch)
}

/// An in-memory labeled image set.
pub struct Dataset {
    pub items: Vec<(Tensor<f32>, usize)>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|&(_, label)| label).collect()
    }
}

/// Loads and preprocesses every manifest entry. Relative image paths are
/// resolved against the manifest file's directory.
pub fn load_dataset(
    manifest: &Path,
    num_classes: usize,
    spec: &PreprocessSpec,
) -> Result<Dataset, DataError> {
    let records = load_manifest(manifest, num_classes)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::with_capacity(records.len());
    for record in records {
        let full = if record.image_path.is_absolute() {
            record.image_path
        } else {
            base.join(&record.image_path)
        };
        items.push((load_image(&full, spec)?, record.label));
    }
    Ok(Dataset { items, num_classes })
}

/// A deterministic procedurally generated dataset for training smoke tests:
/// class `c` is a horizontal band pattern with `c + 2` bands alternating
/// between +0.8 and -0.8, plus small uniform noise. The clean pattern is
/// invariant under horizontal flips. Labels cycle through the classes, so
/// the set is balanced whenever `classes` divides `n`.
pub fn synthetic_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Dataset {
    assert!(classes >= 1 && size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let bands = label + 2;
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            let band = y * bands / size;
            let value = if band.is_multiple_of(2) { 0.8f32 } else { -0.8 };
            for _ in 0..size {
                data.push(value + rng.random_range(-0.1..0.1));
            }
        }
        items.push((Tensor::from_vec(vec![1, size, size], data), label));
    }
    Dataset {
        items,
        num_classes: classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn manifest_preserves_order_and_handles_crlf() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "a.png,0\r\nsub/b.png,3\nc.pgm,7\n");
        let records = load_manifest(&path, 8).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].image_path, PathBuf::from("a.png"));
        assert_eq!(records[0].label, 0);
        assert_eq!(records[1].image_path, PathBuf::from("sub/b.png"));
        assert_eq!(records[1].label, 3);
        assert_eq!(records[2].label, 7);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "a.png,0\nimg.png,9\n");
        match load_manifest(&path, 8) {
            Err(DataError::LabelRange { line, label, num_classes, .. }) => {
                assert_eq!((line, label, num_classes), (2, 9, 8));
            }
            other => panic!("expected label-range error, got {other:?}"),
        }

        let path = write_manifest(dir.path(), "no separator here\n");
        match load_manifest(&path, 8) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        let path = write_manifest(dir.path(), "a.png,zero\n");
        assert!(matches!(load_manifest(&path, 8), Err(DataError::Parse { line: 1, .. })));

        let path = write_manifest(dir.path(), "\n\n");
        assert!(matches!(load_manifest(&path, 8), Err(DataError::EmptyManifest { .. })));

        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv"), 8),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn constant_gray_image_normalizes_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::RgbImage::from_pixel(64, 64, image::Rgb([128, 128, 128]))
            .save(&path)
            .unwrap();
        let spec = PreprocessSpec::default();
        let t = load_image(&path, &spec).unwrap();
        assert_eq!(t.shape(), vec![1, 128, 128]);
        let expected = (128.0 / 255.0 - 0.5) / 0.5;
        for &v in t.data() {
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn white_rgb_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        image::RgbImage::from_pixel(32, 32, image::Rgb([255, 255, 255]))
            .save(&path)
            .unwrap();
        let t = load_image(&path, &PreprocessSpec::default()).unwrap();
        for &v in t.data() {
            assert!((v - 1.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn native_size_pgm_skips_resampling_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("native.pgm");
        let img =
            image::GrayImage::from_fn(128, 128, |x, y| image::Luma([((x + y * 128) % 256) as u8]));
        img.save(&path).unwrap();
        let t = load_image(&path, &PreprocessSpec::default()).unwrap();
        let data = t.data();
        for y in 0..128usize {
            for x in 0..128usize {
                let p = ((x + y * 128) % 256) as f64;
                // Luma of a gray pixel is the pixel value itself up to float
                // rounding of the ITU weights.
                let expected = ((p / 255.0 - 0.5) / 0.5) as f32;
                let got = data[y * 128 + x];
                assert!((got - expected).abs() < 1e-6, "({x},{y}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn unreadable_and_corrupt_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PreprocessSpec::default();
        assert!(matches!(
            load_image(&dir.path().join("missing.png"), &spec),
            Err(DataError::Image { .. })
        ));
        let path = dir.path().join("corrupt.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_image(&path, &spec), Err(DataError::Image { .. })));
    }

    #[test]
    fn hflip_reverses_columns_and_is_an_involution() {
        let t = Tensor::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = hflip(&t);
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(hflip(&f), t);

        let mut delta = vec![0.0f32; 128];
        delta[0] = 1.0;
        let d = hflip(&Tensor::from_vec(vec![1, 1, 128], delta));
        assert_eq!(d.data()[127], 1.0);
        assert_eq!(d.data()[..127].iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn oversampling_balances_to_the_majority_class() {
        // Counts {0: 4, 1: 2} -> epoch of 8, four per class.
        let labels = [0, 0, 1, 0, 1, 0];
        let epoch = oversample_indices(&labels, 42).unwrap();
        assert_eq!(epoch.len(), 8);
        let count = |class: usize| epoch.iter().filter(|&&i| labels[i] == class).count();
        assert_eq!(count(0), 4);
        assert_eq!(count(1), 4);

        // The two unique class-1 indices both appear (copy + remainder can
        // repeat one of them, but never drop both duplicates).
        assert!(epoch.contains(&2) || epoch.contains(&4));
    }

    #[test]
    fn oversampling_balanced_input_is_a_permutation() {
        let labels = [0, 1, 2, 0, 1, 2];
        let mut epoch = oversample_indices(&labels, 7).unwrap();
        epoch.sort_unstable();
        assert_eq!(epoch, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn oversampling_is_deterministic_and_rejects_empty_input() {
        let labels = [0, 0, 0, 1, 1, 2];
        assert_eq!(
            oversample_indices(&labels, 9).unwrap(),
            oversample_indices(&labels, 9).unwrap()
        );
        assert_ne!(
            oversample_indices(&labels, 9).unwrap(),
            oversample_indices(&labels, 10).unwrap()
        );
        assert!(matches!(oversample_indices(&[], 0), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn dataset_resolves_paths_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("img")).unwrap();
        image::GrayImage::from_pixel(16, 16, image::Luma([0]))
            .save(dir.path().join("img/black.png"))
            .unwrap();
        image::GrayImage::from_pixel(16, 16, image::Luma([255]))
            .save(dir.path().join("img/white.png"))
            .unwrap();
        let manifest = write_manifest(dir.path(), "img/black.png,0\nimg/white.png,1\n");
        let ds = load_dataset(&manifest, 2, &PreprocessSpec::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), vec![0, 1]);
        assert!(ds.items[0].0.data().iter().all(|&v| (v + 1.0).abs() < 1e-5));
        assert!(ds.items[1].0.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn synthetic_dataset_is_deterministic_balanced_and_in_range() {
        let a = synthetic_dataset(32, 4, 64, 5);
        let b = synthetic_dataset(32, 4, 64, 5);
        assert_eq!(a.len(), 32);
        assert_eq!(a.num_classes, 4);
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 8);
        }
        for ((ta, la), (tb, lb)) in a.items.iter().zip(&b.items) {
            assert_eq!(la, lb);
            assert_eq!(ta, tb);
            assert_eq!(ta.shape(), vec![1, 64, 64]);
            assert!(ta.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        // Distinct classes produce visibly different clean patterns: compare
        // the band structure of rows (class 0 has 2 bands, class 3 has 5).
        let row_mean = |t: &Tensor<f32>, y: usize| -> f32 {
            t.data()[y * 64..(y + 1) * 64].iter().sum::<f32>() / 64.0
        };
        let c0 = &a.items[0].0;
        let c3 = &a.items[3].0;
        // Row 20: class 0 (2 bands) is still in its first, positive band,
        // while class 3 (5 bands) has entered band 1, which is negative.
        assert!(row_mean(c0, 20) > 0.0);
        assert!(row_mean(c3, 20) < 0.0);
    }
}
