//! Dataset sources: two seeded synthetic families, the classic big-endian
//! image/label container, and a plain CSV layout. All loaders produce the
//! core [`Dataset`] type with features already in [0, 1].
//!
//! The synthetic families draw a latent 2-d point (blob or spiral arm) and
//! observe it through `dims` noisy redundant coordinates, tiling x,y,x,y...
//! with independent jitter per coordinate. `dims = 2` is the plain planar
//! dataset; larger values emulate the redundancy of image data, where
//! per-pixel corruption averages out instead of destroying the signal.
//! Draws are balanced per class (counts differ by at most one) and fully
//! determined by the generator seed, so a config reproduces its data
//! exactly regardless of the run seed.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use splinter_core::continual::TaskData;
use splinter_core::data::Dataset;
use splinter_core::network::derive_seed;
use splinter_core::Error as CoreError;

use crate::config::{DataKind, DatasetConfig};
use crate::error::{CliError, Result};

/// Train/dev/test triple plus the source tag for reports.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub kind: &'static str,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Isotropic blobs with class means spread on a circle inside the unit
/// square. Sample i belongs to class i mod c, which keeps counts balanced.
pub fn gaussians(n: usize, classes: usize, noise: f64, dims: usize, seed: u64) -> Result<Dataset> {
    synthetic(n, classes, noise, dims, seed, false)
}

/// One spiral arm per class, radius growing with a uniform draw so samples
/// cover the arm instead of clustering at its tip. Each arm sweeps 0.4
/// turns; arms crossing the same ray sit 0.35/(0.4·classes) apart radially,
/// so class margins shrink only linearly in the class count.
pub fn spirals(n: usize, classes: usize, noise: f64, dims: usize, seed: u64) -> Result<Dataset> {
    synthetic(n, classes, noise, dims, seed, true)
}

fn synthetic(
    n: usize,
    classes: usize,
    noise: f64,
    dims: usize,
    seed: u64,
    spiral: bool,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(CoreError::invalid("synthetic", "need at least two classes").into());
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(CoreError::invalid("synthetic", format!("bad noise {noise}")).into());
    }
    if dims < 2 {
        return Err(CoreError::invalid("synthetic", "need at least two feature dims").into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise).expect("validated above");
    let tau = std::f64::consts::TAU;
    let mut features = Vec::with_capacity(dims * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let latent = if spiral {
            let t: f64 = rng.gen_range(0.0..1.0);
            let r = 0.12 + 0.35 * t;
            let theta = tau * (0.4 * t + k as f64 / classes as f64);
            [0.5 + r * theta.cos(), 0.5 + r * theta.sin()]
        } else {
            let theta = tau * k as f64 / classes as f64;
            [0.5 + 0.3 * theta.cos(), 0.5 + 0.3 * theta.sin()]
        };
        for j in 0..dims {
            features.push((latent[j % 2] + jitter.sample(&mut rng)).clamp(0.0, 1.0));
        }
        labels.push(k);
    }
    Ok(Dataset::new(features, labels, vec![dims], classes)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(CliError::format(
                self.path,
                self.buf.len() as u64,
                format!(
                    "file ends inside {what}: wanted {} bytes at byte {}, have {}",
                    n,
                    self.off,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Reads a big-endian image file (magic 0x00000803, dims n/rows/cols, one
/// byte per pixel) into row-major [0, 1] floats with sample shape
/// [1, rows, cols].
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut c = Cursor { buf: &buf, off: 0, path };
    let magic = c.u32_be("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(CliError::format(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x} for images"),
        ));
    }
    let n = c.u32_be("image count")? as usize;
    let rows = c.u32_be("row count")? as usize;
    let cols = c.u32_be("column count")? as usize;
    let pixels = c.take(n * rows * cols, "pixel data")?;
    if c.off != buf.len() {
        return Err(CliError::format(
            path,
            c.off as u64,
            format!("{} trailing bytes after pixel data", buf.len() - c.off),
        ));
    }
    let features = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((features, vec![1, rows, cols], n))
}

/// Reads a big-endian label file (magic 0x00000801, one byte per label).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut c = Cursor { buf: &buf, off: 0, path };
    let magic = c.u32_be("magic")?;
    if magic != LABEL_MAGIC {
        return Err(CliError::format(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x} for labels"),
        ));
    }
    let n = c.u32_be("label count")? as usize;
    let raw = c.take(n, "label data")?;
    if c.off != buf.len() {
        return Err(CliError::format(
            path,
            c.off as u64,
            format!("{} trailing bytes after label data", buf.len() - c.off),
        ));
    }
    Ok(raw.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (features, sample_shape, n) = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if y.len() != n {
        return Err(CliError::format(
            labels,
            4,
            format!("{} labels for {} images in {}", y.len(), n, images.display()),
        ));
    }
    Ok(Dataset::new(features, y, sample_shape, classes)?)
}

/// Reads `x0,...,xk,label` rows. The header fixes the feature count; every
/// row must parse as floats plus one integer label.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let mut offset = 0u64;
    let header = lines
        .next()
        .ok_or_else(|| CliError::format(path, 0, "empty file, expected a header row"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(CliError::format(path, 0, "header must be x0,...,xk,label"));
    }
    for (i, c) in cols[..cols.len() - 1].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(CliError::format(path, 0, format!("header column {i} is '{c}', expected 'x{i}'")));
        }
    }
    let d = cols.len() - 1;
    offset += header.len() as u64 + 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for line in lines {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(CliError::format(
                path,
                line_start,
                format!("row has {} fields, expected {}", fields.len(), d + 1),
            ));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| CliError::format(path, line_start, format!("'{f}' is not a number")))?;
            features.push(v);
        }
        let l: usize = fields[d]
            .parse()
            .map_err(|_| CliError::format(path, line_start, format!("'{}' is not a label", fields[d])))?;
        labels.push(l);
    }
    Ok(Dataset::new(features, labels, vec![d], classes)?)
}

/// Builds the train/dev/test triple a config describes. The dev split is
/// carved off the tail of the training set.
pub fn load(cfg: &DatasetConfig) -> Result<DataBundle> {
    let (train_full, test) = match cfg.kind {
        DataKind::Gaussians => (
            gaussians(cfg.train_n, cfg.classes, cfg.noise, cfg.dims, cfg.seed)?,
            gaussians(cfg.test_n, cfg.classes, cfg.noise, cfg.dims, derive_seed(cfg.seed, 1))?,
        ),
        DataKind::Spirals => (
            spirals(cfg.train_n, cfg.classes, cfg.noise, cfg.dims, cfg.seed)?,
            spirals(cfg.test_n, cfg.classes, cfg.noise, cfg.dims, derive_seed(cfg.seed, 1))?,
        ),
        DataKind::Idx => {
            let tr = load_idx_pair(
                cfg.train_images.as_deref().expect("validated"),
                cfg.train_labels.as_deref().expect("validated"),
                cfg.classes,
            )?;
            let te = load_idx_pair(
                cfg.test_images.as_deref().expect("validated"),
                cfg.test_labels.as_deref().expect("validated"),
                cfg.classes,
            )?;
            (tr, te)
        }
        DataKind::Csv => {
            let tr = load_csv(cfg.train_csv.as_deref().expect("validated"), cfg.classes)?;
            let te = load_csv(cfg.test_csv.as_deref().expect("validated"), cfg.classes)?;
            (tr, te)
        }
    };
    let (train, dev) = train_full.split_tail(cfg.dev_frac)?;
    if dev.is_empty() {
        return Err(CliError::Usage(format!(
            "dev split is empty ({} train samples at fraction {})",
            train.len(),
            cfg.dev_frac
        )));
    }
    Ok(DataBundle {
        kind: cfg.kind.as_str(),
        train,
        dev,
        test,
    })
}

/// Splits every part of the bundle into `tasks` label-contiguous pieces
/// with task-local labels: task k sees original classes
/// [k*c/tasks, (k+1)*c/tasks) renumbered from zero.
pub fn split_tasks(bundle: &DataBundle, tasks: usize) -> Result<Vec<TaskData>> {
    let classes = bundle.train.classes();
    if tasks == 0 || classes % tasks != 0 {
        return Err(CoreError::invalid(
            "split_tasks",
            format!("{classes} classes cannot split into {tasks} equal tasks"),
        )
        .into());
    }
    let per = classes / tasks;
    let mut out = Vec::with_capacity(tasks);
    for k in 0..tasks {
        let keep: Vec<usize> = (k * per..(k + 1) * per).collect();
        out.push(TaskData {
            train: bundle.train.filter_remap(&keep)?,
            dev: bundle.dev.filter_remap(&keep)?,
            test: bundle.test.filter_remap(&keep)?,
        });
    }
    Ok(out)
}
