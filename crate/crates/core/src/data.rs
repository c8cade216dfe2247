//! Phantom generation, grayscale image ingestion, standardization and mask sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::kspace::{RealGrid, SamplingMask};
use crate::tensor_io;

/// Seeded generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Below this standard deviation an image is treated as constant and only centred.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

/// One standardized image with the statistics that were removed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct DataItem {
    pub id: String,
    pub image: RealGrid,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub split: Split,
}

impl Dataset {
    pub fn new(items: Vec<DataItem>, split: Split) -> Result<Self> {
        if let Some(first) = items.first() {
            let n = first.image.size();
            if let Some(bad) = items.iter().find(|it| it.image.size() != n) {
                return Err(CoreError::SizeMismatch(format!(
                    "item {} is {1}x{1}, expected {n}x{n}",
                    bad.id,
                    bad.image.size()
                )));
            }
        }
        Ok(Self { items, split })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Image size, or `None` for an empty dataset.
    pub fn image_size(&self) -> Option<usize> {
        self.items.first().map(|it| it.image.size())
    }

    /// Splits off the last `ceil(len * val_fraction)` items (at least one, leaving at least one).
    pub fn split_train_val(&self, val_fraction: f64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(CoreError::Invalid(format!(
                "need at least 2 items to split, have {}",
                self.len()
            )));
        }
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(CoreError::Invalid(format!("val fraction {val_fraction} outside (0, 1)")));
        }
        let n_val = ((self.len() as f64 * val_fraction).ceil() as usize).clamp(1, self.len() - 1);
        let cut = self.len() - n_val;
        Ok((
            Dataset::new(self.items[..cut].to_vec(), Split::Train)?,
            Dataset::new(self.items[cut..].to_vec(), Split::Val)?,
        ))
    }
}

/// Per-image standardization to zero mean and unit standard deviation.
///
/// Returns the grid together with the removed mean and the divisor used; a (near-)constant
/// image keeps divisor 1 so it becomes all zeros.
pub fn standardize(raw: &RealGrid) -> (RealGrid, f64, f64) {
    let mean = raw.mean();
    let var = raw.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.data().len() as f64;
    let std = var.sqrt();
    let divisor = if std < STD_FLOOR { 1.0 } else { std };
    let mut out = raw.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / divisor);
    (out, mean, divisor)
}

fn item(id: String, raw: &RealGrid) -> DataItem {
    let (image, mean, std) = standardize(raw);
    DataItem { id, image, mean, std }
}

#[derive(Clone, Copy)]
struct Shape {
    ellipse: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    intensity: f64,
}

impl Shape {
    fn paint(&self, grid: &mut RealGrid) {
        let n = grid.size();
        let (sin, cos) = self.angle.sin_cos();
        for i in 0..n {
            for j in 0..n {
                let y = (i as f64 + 0.5) / n as f64 - self.cy;
                let x = (j as f64 + 0.5) / n as f64 - self.cx;
                let u = (cos * x + sin * y) / self.rx;
                let v = (-sin * x + cos * y) / self.ry;
                let inside = if self.ellipse {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    grid.data_mut()[i * n + j] += self.intensity;
                }
            }
        }
    }
}

/// One random phantom in `[0, 1]`, built from 3 to 8 shapes added onto a dark background:
/// a bright outer ellipse, a darker ellipse inside it, and 1 to 6 interior ellipses or
/// rectangles of random intensity.
pub fn phantom(rng: &mut SimRng, n: usize) -> Result<RealGrid> {
    let mut grid = RealGrid::zeros(n)?;
    let cy = 0.5 + rng.gen_range(-0.05..0.05);
    let cx = 0.5 + rng.gen_range(-0.05..0.05);
    let ry = rng.gen_range(0.3..0.45);
    let rx = rng.gen_range(0.25..0.42);
    let angle = rng.gen_range(-0.3..0.3);
    let outer = Shape { ellipse: true, cy, cx, ry, rx, angle, intensity: rng.gen_range(0.7..1.0) };
    let shell = rng.gen_range(0.04..0.09);
    let inner = Shape {
        ry: ry - shell,
        rx: rx - shell,
        intensity: -rng.gen_range(0.3..0.6),
        ..outer
    };
    outer.paint(&mut grid);
    inner.paint(&mut grid);
    for _ in 0..rng.gen_range(1..=6) {
        // interior feature, kept inside the inner ellipse's bounding region
        let ry_f = rng.gen_range(0.03..0.4) * inner.ry;
        let rx_f = rng.gen_range(0.03..0.4) * inner.rx;
        let oy = rng.gen_range(-0.6..0.6) * (inner.ry - ry_f);
        let ox = rng.gen_range(-0.6..0.6) * (inner.rx - rx_f);
        Shape {
            ellipse: rng.gen_bool(0.7),
            cy: cy + oy,
            cx: cx + ox,
            ry: ry_f.max(0.5 / n as f64),
            rx: rx_f.max(0.5 / n as f64),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(-0.25..0.35),
        }
        .paint(&mut grid);
    }
    grid.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(grid)
}

/// `count` standardized phantoms of size `n`, deterministic in `seed`.
pub fn generate_phantoms(seed: u64, count: usize, n: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(CoreError::Invalid("phantom count must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let width = count.to_string().len().max(4);
    let items = (0..count)
        .map(|k| Ok(item(format!("phantom_{k:0width$}"), &phantom(&mut rng, n)?)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, Split::All)
}

/// Parses a binary 8-bit PGM (P5) into values in `[0, 1]`, returning (height, width, data).
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(CoreError::format(path, "not a binary PGM (P5)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| CoreError::format(path, format!("bad PGM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(CoreError::format(path, "unsupported PGM geometry or depth"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + width * height)
        .ok_or_else(|| CoreError::format(path, "truncated PGM raster"))?;
    Ok((height, width, raster.iter().map(|&b| b as f64 / maxval as f64).collect()))
}

/// Encodes a `[0, 1]` grid as an 8-bit P5 PGM, clamping out-of-range values.
pub fn encode_pgm(height: usize, width: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Bilinear resampling with pixel-centre alignment; same-size input is copied unchanged.
pub fn resize_bilinear(height: usize, width: usize, data: &[f64], n: usize) -> Vec<f64> {
    if height == n && width == n {
        return data.to_vec();
    }
    let sample = |src: usize, dst: usize, k: usize| -> (usize, usize, f64) {
        let pos = ((k as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(src - 1), pos - lo as f64)
    };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (y0, y1, fy) = sample(height, n, i);
        for j in 0..n {
            let (x0, x1, fx) = sample(width, n, j);
            let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
            let bottom = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Loads every readable `.pgm` file in `dir` (sorted by name), resized to `n` and standardized.
pub fn load_image_dir(dir: &Path, n: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for path in paths {
        let parsed = fs::read(&path)
            .map_err(|e| CoreError::io(&path, e))
            .and_then(|bytes| parse_pgm(&bytes, &path));
        match parsed {
            Ok((h, w, data)) => {
                let grid = RealGrid::new(n, n, resize_bilinear(h, w, &data, n))?;
                let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                items.push(item(id, &grid));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if items.is_empty() {
        return Err(CoreError::Invalid(format!("no readable PGM images in {}", dir.display())));
    }
    Dataset::new(items, Split::All)
}

pub const INDEX_FILE: &str = "index.csv";

/// Writes each item as an AKT1 file plus `index.csv` (image_id,file,mean,std).
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index = csv::Writer::from_path(&index_path)
        .map_err(|e| CoreError::format(&index_path, e.to_string()))?;
    let csv_err = |e: csv::Error| CoreError::format(&index_path, e.to_string());
    index.write_record(["image_id", "file", "mean", "std"]).map_err(csv_err)?;
    for it in &dataset.items {
        let file = format!("{}.akt", it.id);
        tensor_io::write_grid(&dir.join(&file), &it.image)?;
        index
            .write_record([it.id.clone(), file, format!("{}", it.mean), format!("{}", it.std)])
            .map_err(csv_err)?;
    }
    index.flush().map_err(|e| CoreError::io(&index_path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.is_file() {
        return Err(CoreError::Invalid(format!("{} not found", index_path.display())));
    }
    let mut reader = csv::Reader::from_path(&index_path)
        .map_err(|e| CoreError::format(&index_path, e.to_string()))?;
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CoreError::format(&index_path, e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| CoreError::format(&index_path, "missing column"))
        };
        let number = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| CoreError::format(&index_path, "bad number"))
        };
        items.push(DataItem {
            id: field(0)?.to_string(),
            image: tensor_io::read_grid(&dir.join(field(1)?))?,
            mean: number(2)?,
            std: number(3)?,
        });
    }
    if items.is_empty() {
        return Err(CoreError::Invalid(format!("{} lists no images", index_path.display())));
    }
    Dataset::new(items, Split::All)
}

/// Training-mask sampler settings; counts other than `fixed_low_freq_rows` are in pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSamplerConfig {
    pub n_rows: usize,
    /// Lowest-frequency rows always observed; they form `fixed_low_freq_rows / 2` pairs.
    pub fixed_low_freq_rows: usize,
    pub min_measurements: usize,
    pub max_measurements: usize,
}

impl MaskSamplerConfig {
    /// Defaults for size `n`, scaled from 10 fixed rows and 13 to 47 pairs at `n = 128`.
    pub fn for_size(n: usize) -> Self {
        if n == 32 {
            return Self {
                n_rows: 32,
                fixed_low_freq_rows: 4,
                min_measurements: 4,
                max_measurements: 12,
            };
        }
        let scale = n as f64 / 128.0;
        let fixed = ((10.0 * scale / 2.0).round() as usize).max(1) * 2;
        Self {
            n_rows: n,
            fixed_low_freq_rows: fixed,
            min_measurements: ((13.0 * scale).round() as usize).max(fixed / 2),
            max_measurements: ((47.0 * scale).round() as usize).clamp(fixed / 2, n / 2),
        }
    }

    pub fn fixed_pairs(&self) -> usize {
        self.fixed_low_freq_rows / 2
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows;
        let problem = if n < 4 || n % 2 != 0 {
            Some(format!("mask size {n} must be even and at least 4"))
        } else if self.fixed_low_freq_rows > 2 * self.min_measurements {
            Some("fixed rows exceed twice the minimum measurement count".into())
        } else if self.fixed_pairs() == 0 {
            Some("at least two fixed low-frequency rows are required".into())
        } else if self.min_measurements > self.max_measurements {
            Some("minimum measurements exceed maximum".into())
        } else if self.max_measurements > n / 2 {
            Some(format!("maximum measurements exceed {}", n / 2))
        } else {
            None
        };
        match problem {
            Some(p) => Err(CoreError::Invalid(format!("infeasible mask sampler: {p}"))),
            None => Ok(()),
        }
    }
}

/// Symmetric mask with the lowest `fixed_pairs` pairs plus random extra pairs up to `pairs`.
pub fn random_mask_with_pairs(
    rng: &mut SimRng,
    n: usize,
    pairs: usize,
    fixed_pairs: usize,
) -> Result<SamplingMask> {
    let total = n / 2 + 1;
    if pairs > total || fixed_pairs > pairs {
        return Err(CoreError::Invalid(format!(
            "cannot draw {pairs} pairs with {fixed_pairs} fixed out of {total}"
        )));
    }
    let fixed: Vec<usize> = (0..fixed_pairs).collect();
    let mut mask = SamplingMask::from_pairs(n, &fixed)?;
    let pool: Vec<usize> = (fixed_pairs..total).collect();
    for k in sample(rng, pool.len(), pairs - fixed_pairs) {
        mask.observe_pair(pool[k])?;
    }
    Ok(mask)
}

/// One training mask: fixed low-frequency pairs plus a uniform number of random pairs.
pub fn sample_training_mask(rng: &mut SimRng, cfg: &MaskSamplerConfig) -> Result<SamplingMask> {
    cfg.validate()?;
    let pairs = rng.gen_range(cfg.min_measurements..=cfg.max_measurements);
    random_mask_with_pairs(rng, cfg.n_rows, pairs, cfg.fixed_pairs())
}

/// Number of pairs used to realise a target kMA: `round(kma * N/2)`, at least `fixed_pairs`.
pub fn pairs_for_kma(n: usize, kma: f64, fixed_pairs: usize) -> usize {
    ((kma * (n / 2) as f64).round() as usize).max(fixed_pairs)
}

/// Random symmetric evaluation mask at a target kMA; kMA of 1 observes every row.
pub fn mask_at_kma(rng: &mut SimRng, n: usize, kma: f64, fixed_pairs: usize) -> Result<SamplingMask> {
    if !(kma > 0.0 && kma <= 1.0) {
        return Err(CoreError::Invalid(format!("kMA {kma} outside (0, 1]")));
    }
    let pairs = pairs_for_kma(n, kma, fixed_pairs);
    if pairs >= n / 2 {
        return Ok(SamplingMask::full(n));
    }
    random_mask_with_pairs(rng, n, pairs, fixed_pairs)
}
