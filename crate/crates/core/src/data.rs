//! Datasets: IDX ingestion, normalization and synthetic Gaussian tasks.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::harness::{TaskSpec, VAL_FRACTION};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Conventional MNIST pixel statistics after scaling to [0, 1].
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

/// Samples × features inputs with one global class id per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        ensure!(inputs.nrows() == labels.len(), Shape, "{} inputs for {} labels", inputs.nrows(), labels.len());
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!("label {bad} outside {class_count} classes")));
        }
        ensure!(inputs.iter().all(|x| x.is_finite()), Numeric, "dataset contains non-finite inputs");
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.ncols()
    }

    /// Stacks `other` after `self`; indices of `other` shift by `self.len()`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        ensure!(self.features() == other.features(), Shape, "feature widths {} and {}", self.features(), other.features());
        let inputs = ndarray::concatenate(ndarray::Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(inputs, labels, self.class_count.max(other.class_count))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> io::Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "IDX header is truncated"))
}

fn take<'a>(bytes: &'a [u8], from: usize, len: usize, what: &str) -> io::Result<&'a [u8]> {
    bytes.get(from..from + len).ok_or_else(|| {
        io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("{what}: expected {len} payload bytes, found {}", bytes.len().saturating_sub(from)),
        )
    })
}

/// Reads an IDX image/label pair. Pixels are flattened row-major and scaled
/// to [0, 1]; the class count is the largest label plus one.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let magic = be_u32(&images, 0)?;
    ensure!(magic == IDX_IMAGES_MAGIC, Format, "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}");
    let count = be_u32(&images, 4)? as usize;
    let rows = be_u32(&images, 8)? as usize;
    let cols = be_u32(&images, 12)? as usize;

    let magic = be_u32(&labels, 0)?;
    ensure!(magic == IDX_LABELS_MAGIC, Format, "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}");
    let label_count = be_u32(&labels, 4)? as usize;
    ensure!(label_count == count, Format, "{count} images but {label_count} labels");

    let pixels = take(&images, 16, count * rows * cols, "image file")?;
    let label_bytes = take(&labels, 8, count, "label file")?;

    let inputs = Array2::from_shape_vec((count, rows * cols), pixels.iter().map(|&p| p as f32 / 255.0).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, class_count)
}

/// Writes raw pixels in the IDX image layout.
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    ensure!(rows * cols > 0 && pixels.len().is_multiple_of(rows * cols), Shape, "{} pixels do not tile {rows}x{cols} images", pixels.len());
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&((pixels.len() / (rows * cols)) as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}

/// Loads the standard MNIST file names from `dir` as (train, test).
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train = load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// `(x − mean) / std` on every input.
pub fn normalize(dataset: &Dataset, mean: f32, std: f32) -> Result<Dataset> {
    ensure!(std > 0.0 && std.is_finite(), Domain, "normalization std must be positive, got {std}");
    let mut out = dataset.clone();
    out.inputs.mapv_inplace(|x| (x - mean) / std);
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(dataset: &Dataset, mean: f32, std: f32) -> Result<Dataset> {
    ensure!(std > 0.0 && std.is_finite(), Domain, "normalization std must be positive, got {std}");
    let mut out = dataset.clone();
    out.inputs.mapv_inplace(|x| x * std + mean);
    Ok(out)
}

/// Parameters of the synthetic Gaussian task family.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    /// Scale of the class centers; the per-feature noise has unit variance.
    pub separation: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `(source, copy)`: task `copy` reuses task `source`'s class centers.
    pub duplicate: Option<(usize, usize)>,
    /// Blobs per class; above 1 each sample picks one of its class's
    /// centers uniformly, which makes classes non-convex.
    pub clusters_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            classes_per_task: 2,
            dim: 16,
            separation: 10.0,
            train_per_class: 200,
            test_per_class: 100,
            duplicate: None,
            clusters_per_class: 1,
            seed: 0,
        }
    }
}

/// Each class is an isotropic unit Gaussian around a random center of norm
/// about `separation`. Class ids are `task * classes_per_task + j`.
pub fn synth_gaussian_tasks(cfg: &SynthConfig) -> Result<(Dataset, Vec<TaskSpec>)> {
    ensure!(cfg.separation > 0.0, Domain, "separation must be positive, got {}", cfg.separation);
    ensure!(cfg.n_tasks >= 1 && cfg.classes_per_task >= 1 && cfg.dim >= 1, Domain, "empty synthetic layout {cfg:?}");
    ensure!(cfg.train_per_class >= 1 && cfg.test_per_class >= 1, Domain, "every class needs train and test samples");
    ensure!(cfg.clusters_per_class >= 1, Domain, "every class needs at least one cluster");
    if let Some((src, dst)) = cfg.duplicate {
        ensure!(src < dst && dst < cfg.n_tasks, Domain, "duplicate ({src}, {dst}) must copy an earlier task");
    }
    let c = cfg.classes_per_task;
    let n_classes = cfg.n_tasks * c;
    let scale = cfg.separation / (cfg.dim as f32).sqrt();

    let mut rng = rng::stream(cfg.seed, &[rng::SYNTH]);
    let blobs = cfg.clusters_per_class;
    let mut centers: Vec<Vec<f32>> = (0..n_classes * blobs)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z as f32
                })
                .collect()
        })
        .collect();
    if let Some((src, dst)) = cfg.duplicate {
        for j in 0..c * blobs {
            centers[dst * c * blobs + j] = centers[src * c * blobs + j].clone();
        }
    }

    let per_class = cfg.train_per_class + cfg.test_per_class;
    let total = n_classes * per_class;
    let mut inputs = Array2::<f32>::zeros((total, cfg.dim));
    let mut labels = Vec::with_capacity(total);
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut row = 0;
    for t in 0..cfg.n_tasks {
        let mut pool = Vec::new();
        let mut test = Vec::new();
        for j in 0..c {
            let class = t * c + j;
            for i in 0..per_class {
                let mut r = inputs.slice_mut(s![row, ..]);
                let blob = if blobs > 1 { rng.random_range(0..blobs) } else { 0 };
                for (x, &mu) in r.iter_mut().zip(&centers[class * blobs + blob]) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = mu + z as f32;
                }
                labels.push(class);
                if i < cfg.train_per_class {
                    pool.push(row);
                } else {
                    test.push(row);
                }
                row += 1;
            }
        }
        let mut split_rng = rng::stream(cfg.seed, &[rng::SPLIT, t as u64]);
        pool.shuffle(&mut split_rng);
        let n_val = (pool.len() as f64 * VAL_FRACTION).round() as usize;
        let val = pool.split_off(pool.len() - n_val);
        tasks.push(TaskSpec::new(t, (t * c..(t + 1) * c).collect(), pool, val, test, t * c));
    }
    Ok((Dataset::new(inputs, labels, n_classes)?, tasks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(dir: &Path, pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        write_idx_images(&ip, rows, cols, pixels).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn two_image_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        // hand-built bytes, not produced by the writer
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 51, 102, 204, 0, 255, 153]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        std::fs::write(dir.path().join("i"), &img).unwrap();
        std::fs::write(dir.path().join("l"), &lbl).unwrap();
        let d = load_idx(dir.path().join("i"), dir.path().join("l")).unwrap();
        assert_eq!(d.inputs.dim(), (2, 4));
        assert_eq!(d.inputs.row(0).to_vec(), vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.inputs.row(1).to_vec(), vec![0.8, 0.0, 1.0, 0.6]);
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.class_count, 8);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1, 2, 3, 4], &[0], 2, 2);
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1, 2, 3, 4, 5, 6, 7, 8], &[0], 2, 2);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[1, 2, 3, 4, 5, 6, 7, 8], &[0, 1], 2, 2);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));
        std::fs::write(&ip, &bytes[..10]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));
    }

    #[test]
    fn normalize_examples() {
        let d = Dataset::new(Array2::from_elem((3, 2), 0.7), vec![0, 1, 0], 2).unwrap();
        assert_eq!(normalize(&d, 0.0, 1.0).unwrap(), d);
        assert!(normalize(&d, 0.7, 0.5).unwrap().inputs.iter().all(|&x| x == 0.0));
        assert!(matches!(normalize(&d, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn synth_is_deterministic_and_disjoint() {
        let cfg = SynthConfig { n_tasks: 3, classes_per_task: 3, ..Default::default() };
        let (a, ta) = synth_gaussian_tasks(&cfg).unwrap();
        let (b, tb) = synth_gaussian_tasks(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for (i, t) in ta.iter().enumerate() {
            assert_eq!(t.classes.len(), 3);
            for u in &ta[i + 1..] {
                assert!(t.classes.iter().all(|c| !u.classes.contains(c)));
            }
            let mut all: Vec<usize> = t.train.iter().chain(&t.val).chain(&t.test).copied().collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n);
        }
        assert!(synth_gaussian_tasks(&SynthConfig { separation: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn duplicate_task_shares_centers() {
        let cfg = SynthConfig { n_tasks: 3, duplicate: Some((0, 2)), train_per_class: 400, ..Default::default() };
        let (d, tasks) = synth_gaussian_tasks(&cfg).unwrap();
        let mean = |idx: &[usize], class: usize| -> Vec<f32> {
            let rows: Vec<usize> = idx.iter().copied().filter(|&i| d.labels[i] == class).collect();
            (0..d.features()).map(|f| rows.iter().map(|&r| d.inputs[[r, f]]).sum::<f32>() / rows.len() as f32).collect()
        };
        let m0 = mean(&tasks[0].train, 0);
        let m2 = mean(&tasks[2].train, 4);
        let m1 = mean(&tasks[1].train, 2);
        let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        assert!(dist(&m0, &m2) < 0.5, "copied centers {}", dist(&m0, &m2));
        assert!(dist(&m0, &m1) > 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, pixels in proptest::collection::vec(any::<u8>(), 1..4)) {
            let count = pixels.len();
            let px: Vec<u8> = (0..count * rows * cols).map(|i| pixels[i % count].wrapping_add(i as u8)).collect();
            let labels: Vec<u8> = (0..count as u8).collect();
            let dir = tempfile::tempdir().unwrap();
            let (ip, lp) = fixture(dir.path(), &px, &labels, rows, cols);
            let d = load_idx(&ip, &lp).unwrap();
            prop_assert_eq!(d.inputs.dim(), (count, rows * cols));
            for (x, &p) in d.inputs.iter().zip(&px) {
                prop_assert_eq!(*x, p as f32 / 255.0);
            }
            prop_assert_eq!(d.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        }

        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(0.0f32..1.0, 1..50), mean in -1.0f32..1.0, std in 0.05f32..3.0) {
            let n = vals.len();
            let d = Dataset::new(Array2::from_shape_vec((n, 1), vals).unwrap(), vec![0; n], 1).unwrap();
            let back = denormalize(&normalize(&d, mean, std).unwrap(), mean, std).unwrap();
            for (a, b) in back.inputs.iter().zip(d.inputs.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
