//! Paired-modality datasets: seeded synthetic generation, manifest and raster
//! I/O, per-band normalization, bicubic upsampling, and split assignment.
//!
//! A dataset is a list of [`MultiModalPair`]s: two co-registered images of the
//! same scene captured by different sensors (2-channel and 10-channel), one
//! shared multi-label set, and a train/validation/test tag. On disk a dataset
//! is a tab-separated manifest naming one raster file per modality per pair,
//! with per-band normalization statistics (computed from the training split at
//! ingest time) carried in `#bandstats` header lines.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Modality;
use crate::error::{Error, Result};
use crate::rngutil::{derive_seed, standard_normal, SeedDomain};

/// Channel counts fixed by the sensor configuration: 2 radar-like bands and
/// 10 multispectral-like bands.
pub const MODALITY_CHANNELS: (usize, usize) = (2, 10);

/// Magic bytes opening every raster file.
const RASTER_MAGIC: &[u8; 8] = b"CSMARAST";
const RASTER_VERSION: u32 = 1;
/// Upper bound on raster elements, so a corrupt header cannot trigger a huge
/// allocation.
const MAX_RASTER_ELEMS: u64 = 1 << 33;

/// Standard deviation floor used by [`normalize`] so constant bands map to
/// zero instead of dividing by zero.
const STD_FLOOR: f64 = 1e-6;

/// Train/validation/test fractions used when generating synthetic datasets.
pub const DEFAULT_SPLIT_FRACTIONS: (f64, f64, f64) = (0.52, 0.24, 0.24);

/// Which partition of the dataset a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// All splits in canonical order.
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    /// Lowercase tag used in manifests.
    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// One co-registered image pair with its shared label set and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalPair {
    pub id: String,
    /// First-modality image, `H×W×2`.
    pub img1: Array3<f64>,
    /// Second-modality image, `H×W×10`.
    pub img2: Array3<f64>,
    /// Class labels present in the scene. Both modalities share this set.
    pub labels: BTreeSet<u32>,
    pub split: Split,
    pub region: String,
    pub season: String,
}

impl MultiModalPair {
    /// Checks the structural invariants: matching spatial dims, the fixed
    /// channel counts, and a nonempty label set.
    pub fn validate(&self) -> Result<()> {
        let (h1, w1, c1) = self.img1.dim();
        let (h2, w2, c2) = self.img2.dim();
        if (h1, w1) != (h2, w2) {
            return Err(Error::shape(format!(
                "pair {}: modality images disagree on spatial size ({h1}x{w1} vs {h2}x{w2})",
                self.id
            )));
        }
        if (c1, c2) != MODALITY_CHANNELS {
            return Err(Error::shape(format!(
                "pair {}: expected channel counts {:?}, got ({c1}, {c2})",
                self.id, MODALITY_CHANNELS
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::data(format!("pair {} has no labels", self.id)));
        }
        Ok(())
    }
}

/// Mean and standard deviation of one band, used for normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandStat {
    pub mean: f64,
    pub std: f64,
}

/// One manifest line: where a pair's rasters live and what tags it carries.
/// Paths are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub path1: PathBuf,
    pub path2: PathBuf,
    pub labels: BTreeSet<u32>,
    pub split: Split,
    pub region: String,
    pub season: String,
}

/// A parsed dataset manifest: per-band normalization statistics followed by
/// one record per pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArchiveManifest {
    /// Per-band statistics for modality 1, empty when not yet computed.
    pub stats1: Vec<BandStat>,
    /// Per-band statistics for modality 2, empty when not yet computed.
    pub stats2: Vec<BandStat>,
    pub records: Vec<ManifestRecord>,
}

impl ArchiveManifest {
    /// Number of records per split, in `(train, validation, test)` order.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0usize, 0usize, 0usize);
        for r in &self.records {
            match r.split {
                Split::Train => counts.0 += 1,
                Split::Validation => counts.1 += 1,
                Split::Test => counts.2 += 1,
            }
        }
        counts
    }

    /// Fraction of records per split; `(0, 0, 0)` for an empty manifest.
    pub fn split_fractions(&self) -> (f64, f64, f64) {
        let n = self.records.len();
        if n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let (tr, va, te) = self.split_counts();
        let n = n as f64;
        (tr as f64 / n, va as f64 / n, te as f64 / n)
    }

    /// Records matching every given filter. `None` leaves a field
    /// unconstrained; string matches are exact.
    pub fn filtered(
        &self,
        region: Option<&str>,
        season: Option<&str>,
        split: Option<Split>,
    ) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| region.is_none_or(|v| r.region == v))
            .filter(|r| season.is_none_or(|v| r.season == v))
            .filter(|r| split.is_none_or(|v| r.split == v))
            .collect()
    }

    /// Writes the manifest as a tab-separated file: `#bandstats` header lines
    /// first, then `id path1 path2 label-csv split region season` per record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.clone()) {
                return Err(Error::data(format!("duplicate pair id `{}`", r.id)));
            }
            if r.labels.is_empty() {
                return Err(Error::data(format!("record {} has no labels", r.id)));
            }
        }

        let tmp = path.with_extension("tmp");
        let mut out = BufWriter::new(File::create(&tmp)?);
        for (modality, stats) in [(Modality::S1, &self.stats1), (Modality::S2, &self.stats2)] {
            for (band, s) in stats.iter().enumerate() {
                writeln!(
                    out,
                    "#bandstats\t{}\t{band}\t{}\t{}",
                    modality.key(),
                    s.mean,
                    s.std
                )?;
            }
        }
        for r in &self.records {
            let labels: Vec<String> = r.labels.iter().map(|l| l.to_string()).collect();
            let fields = [
                r.id.as_str(),
                path_field(&r.path1, &r.id)?,
                path_field(&r.path2, &r.id)?,
                &labels.join(","),
                r.split.key(),
                r.region.as_str(),
                r.season.as_str(),
            ];
            for f in fields {
                if f.is_empty() {
                    return Err(Error::data(format!("record {}: empty manifest field", r.id)));
                }
                if f.contains('\t') || f.contains('\n') {
                    return Err(Error::data(format!(
                        "record {}: manifest field contains a tab or newline",
                        r.id
                    )));
                }
            }
            writeln!(out, "{}", fields.join("\t"))?;
        }
        out.flush()?;
        drop(out);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses a manifest file, validating ids, split tags, label sets, and
    /// band-statistic ordering.
    pub fn load(path: &Path) -> Result<ArchiveManifest> {
        let file = File::open(path)
            .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
        let mut manifest = ArchiveManifest::default();
        let mut ids = BTreeSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                parse_bandstats_line(rest, lineno, &mut manifest)?;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::data(format!(
                    "manifest line {lineno}: expected 7 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if id.is_empty() {
                return Err(Error::data(format!("manifest line {lineno}: empty id")));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::data(format!(
                    "manifest line {lineno}: duplicate pair id `{id}`"
                )));
            }
            if fields[1].is_empty() || fields[2].is_empty() {
                return Err(Error::data(format!(
                    "manifest line {lineno}: missing raster path for pair `{id}`"
                )));
            }
            let labels = parse_label_csv(fields[3], lineno)?;
            let split = Split::from_str(fields[4])
                .map_err(|e| Error::data(format!("manifest line {lineno}: {e}")))?;
            if fields[5].is_empty() || fields[6].is_empty() {
                return Err(Error::data(format!(
                    "manifest line {lineno}: empty region or season for pair `{id}`"
                )));
            }
            manifest.records.push(ManifestRecord {
                id,
                path1: PathBuf::from(fields[1]),
                path2: PathBuf::from(fields[2]),
                labels,
                split,
                region: fields[5].to_string(),
                season: fields[6].to_string(),
            });
        }
        Ok(manifest)
    }
}

fn path_field<'a>(path: &'a Path, id: &str) -> Result<&'a str> {
    path.to_str()
        .ok_or_else(|| Error::data(format!("record {id}: raster path is not valid UTF-8")))
}

fn parse_label_csv(csv: &str, lineno: usize) -> Result<BTreeSet<u32>> {
    if csv.is_empty() {
        return Err(Error::data(format!("manifest line {lineno}: empty label set")));
    }
    let mut labels = BTreeSet::new();
    for part in csv.split(',') {
        let label: u32 = part.parse().map_err(|_| {
            Error::data(format!("manifest line {lineno}: bad label `{part}`"))
        })?;
        labels.insert(label);
    }
    Ok(labels)
}

fn parse_bandstats_line(rest: &str, lineno: usize, manifest: &mut ArchiveManifest) -> Result<()> {
    let fields: Vec<&str> = rest.split('\t').collect();
    if fields.len() != 5 || fields[0] != "bandstats" {
        return Err(Error::data(format!(
            "manifest line {lineno}: unrecognized header line (expected `#bandstats`)"
        )));
    }
    let stats = match fields[1] {
        "s1" => &mut manifest.stats1,
        "s2" => &mut manifest.stats2,
        other => {
            return Err(Error::data(format!(
                "manifest line {lineno}: unknown modality `{other}` in bandstats"
            )))
        }
    };
    let band: usize = fields[2].parse().map_err(|_| {
        Error::data(format!("manifest line {lineno}: bad band index `{}`", fields[2]))
    })?;
    if band != stats.len() {
        return Err(Error::data(format!(
            "manifest line {lineno}: band statistics out of order (expected band {}, found {band})",
            stats.len()
        )));
    }
    let mean: f64 = fields[3].parse().map_err(|_| {
        Error::data(format!("manifest line {lineno}: bad mean `{}`", fields[3]))
    })?;
    let std: f64 = fields[4].parse().map_err(|_| {
        Error::data(format!("manifest line {lineno}: bad std `{}`", fields[4]))
    })?;
    if !mean.is_finite() || !std.is_finite() || std < 0.0 {
        return Err(Error::data(format!(
            "manifest line {lineno}: band statistics must be finite with std >= 0"
        )));
    }
    stats.push(BandStat { mean, std });
    Ok(())
}

/// Writes `image` as a raster file: magic, version, `h w c` as little-endian
/// u32, then `h·w·c` f64 values little-endian in row-major channel-last order.
/// The write is atomic (temp file + rename) and bit-exact.
pub fn write_raster(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::shape("cannot write an empty raster".to_string()));
    }
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp)?);
    out.write_all(RASTER_MAGIC)?;
    out.write_all(&RASTER_VERSION.to_le_bytes())?;
    for dim in [h, w, c] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in image.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    drop(out);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a raster written by [`write_raster`], validating the header and the
/// exact payload length.
pub fn read_raster(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;

    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let end = off.checked_add(n).ok_or_else(|| {
            Error::data(format!("raster {} truncated", path.display()))
        })?;
        if end > bytes.len() {
            return Err(Error::data(format!("raster {} truncated", path.display())));
        }
        let slice = &bytes[*off..end];
        *off = end;
        Ok(slice)
    };

    if take(&mut off, 8)? != RASTER_MAGIC {
        return Err(Error::data(format!("{} is not a raster file", path.display())));
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        let b = take(off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = read_u32(&mut off)?;
    if version != RASTER_VERSION {
        return Err(Error::data(format!(
            "raster {}: unsupported version {version}",
            path.display()
        )));
    }
    let h = read_u32(&mut off)? as usize;
    let w = read_u32(&mut off)? as usize;
    let c = read_u32(&mut off)? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::data(format!(
            "raster {}: zero-sized dimension",
            path.display()
        )));
    }
    let elems = (h as u64)
        .checked_mul(w as u64)
        .and_then(|hw| hw.checked_mul(c as u64))
        .filter(|&n| n <= MAX_RASTER_ELEMS)
        .ok_or_else(|| {
            Error::data(format!("raster {}: implausible size {h}x{w}x{c}", path.display()))
        })?;
    let payload = elems as usize * 8;
    if bytes.len() - off != payload {
        let what = if bytes.len() - off < payload { "truncated" } else { "has trailing bytes" };
        return Err(Error::data(format!("raster {} {what}", path.display())));
    }
    let mut data = Vec::with_capacity(elems as usize);
    for chunk in bytes[off..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| Error::shape(format!("raster {}: {e}", path.display())))
}

/// Per-band mean and population standard deviation over a set of images. All
/// images must agree on channel count.
pub fn compute_band_stats(images: &[&Array3<f64>]) -> Result<Vec<BandStat>> {
    let first = images
        .first()
        .ok_or_else(|| Error::data("cannot compute band statistics of an empty image set"))?;
    let bands = first.dim().2;
    for img in images {
        if img.dim().2 != bands {
            return Err(Error::shape(format!(
                "band-count mismatch: expected {bands} bands, found {}",
                img.dim().2
            )));
        }
    }

    let mut counts = vec![0u64; bands];
    let mut means = vec![0.0f64; bands];
    for img in images {
        for ((_, _, b), &v) in img.indexed_iter() {
            counts[b] += 1;
            means[b] += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        *m /= n as f64;
    }
    let mut sq = vec![0.0f64; bands];
    for img in images {
        for ((_, _, b), &v) in img.indexed_iter() {
            let d = v - means[b];
            sq[b] += d * d;
        }
    }
    Ok(means
        .iter()
        .zip(&sq)
        .zip(&counts)
        .map(|((&mean, &s), &n)| BandStat { mean, std: (s / n as f64).sqrt() })
        .collect())
}

/// Standardizes each band: `(x − mean) / max(std, 1e-6)`. A constant band
/// therefore maps to all zeros.
pub fn normalize(image: &Array3<f64>, stats: &[BandStat]) -> Result<Array3<f64>> {
    let (_, _, bands) = image.dim();
    if bands != stats.len() {
        return Err(Error::shape(format!(
            "band-count mismatch: image has {bands} bands but statistics cover {}",
            stats.len()
        )));
    }
    let mut out = image.clone();
    for (b, s) in stats.iter().enumerate() {
        let denom = s.std.max(STD_FLOOR);
        out.index_axis_mut(ndarray::Axis(2), b)
            .mapv_inplace(|v| (v - s.mean) / denom);
    }
    Ok(out)
}

/// Catmull-Rom cubic kernel (the `a = −0.5` member of the bicubic family).
/// Weights of the four taps around any sample point sum to exactly 1.
fn catmull_rom(d: f64) -> f64 {
    let a = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        a * (((d - 5.0) * d + 8.0) * d - 4.0)
    } else {
        0.0
    }
}

/// Upsamples along axis 0 by `factor` with half-pixel-centered sampling and
/// edge clamping.
fn upsample_rows(src: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let out_h = h * factor;
    let mut out = Array2::zeros((out_h, w));
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
        let base = sy.floor();
        let t = sy - base;
        let base = base as isize;
        let mut row = out.row_mut(oy);
        for k in -1..=2isize {
            let weight = catmull_rom(t - k as f64);
            let tap = (base + k).clamp(0, h as isize - 1) as usize;
            row.scaled_add(weight, &src.row(tap));
        }
    }
    out
}

/// Upsamples a band by an integer factor using separable bicubic
/// (Catmull-Rom, `a = −0.5`) convolution with half-pixel-centered sampling
/// and edge clamping. Factor 1 returns the band unchanged.
pub fn resample_bicubic(band: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    if factor == 0 {
        return Err(Error::config("resample factor must be at least 1"));
    }
    let (h, w) = band.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot resample an empty band"));
    }
    if factor == 1 {
        return Ok(band.clone());
    }
    let rows = upsample_rows(band, factor);
    let cols = upsample_rows(&rows.t().to_owned(), factor);
    Ok(cols.t().to_owned())
}

/// Stacks the two radar-like bands into an `H×W×2` image.
pub fn assemble_s1(vv: &Array2<f64>, vh: &Array2<f64>) -> Result<Array3<f64>> {
    if vv.dim() != vh.dim() {
        return Err(Error::shape(format!(
            "band shapes disagree: {:?} vs {:?}",
            vv.dim(),
            vh.dim()
        )));
    }
    let (h, w) = vv.dim();
    let mut out = Array3::zeros((h, w, 2));
    out.index_axis_mut(ndarray::Axis(2), 0).assign(vv);
    out.index_axis_mut(ndarray::Axis(2), 1).assign(vh);
    Ok(out)
}

/// Stacks the multispectral-like bands into an `H×W×10` image: the four
/// full-resolution bands first, then the six half-resolution bands upsampled
/// ×2 with [`resample_bicubic`].
pub fn assemble_s2(
    bands_full: &[Array2<f64>],
    bands_half: &[Array2<f64>],
) -> Result<Array3<f64>> {
    if bands_full.len() != 4 || bands_half.len() != 6 {
        return Err(Error::shape(format!(
            "expected 4 full-resolution and 6 half-resolution bands, got {} and {}",
            bands_full.len(),
            bands_half.len()
        )));
    }
    let (h, w) = bands_full[0].dim();
    for b in bands_full {
        if b.dim() != (h, w) {
            return Err(Error::shape("full-resolution bands disagree on shape"));
        }
    }
    for b in bands_half {
        if (b.dim().0 * 2, b.dim().1 * 2) != (h, w) {
            return Err(Error::geometry(format!(
                "half-resolution band is {:?}, expected {:?}",
                b.dim(),
                (h / 2, w / 2)
            )));
        }
    }
    let mut out = Array3::zeros((h, w, 10));
    for (i, b) in bands_full.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(2), i).assign(b);
    }
    for (i, b) in bands_half.iter().enumerate() {
        let up = resample_bicubic(b, 2)?;
        out.index_axis_mut(ndarray::Axis(2), 4 + i).assign(&up);
    }
    Ok(out)
}

/// Assigns a split tag to each of `n` records: seeded shuffle, then a
/// contiguous partition whose sizes round the requested fractions to within
/// one record. The returned vector is indexed by original record position.
pub fn split_assignments(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (f_train, f_val, f_test) = fractions;
    for f in [f_train, f_val, f_test] {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::config(format!("split fractions must be >= 0, got {f}")));
        }
    }
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions must sum to 1, got {sum}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let n_train = (f_train * n as f64).round() as usize;
    let n_train_val = ((f_train + f_val) * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_train_val = n_train_val.clamp(n_train, n);

    let mut tags = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        tags[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(tags)
}

const MIN_SITES: usize = 2;
const MAX_SITES: usize = 4;
const NOISE_STD: f64 = 0.1;
const COVER_ATTEMPTS: u64 = 64;
const REGIONS: [&str; 4] = ["north", "south", "east", "west"];
const SEASONS: [&str; 2] = ["summer", "winter"];

/// Generates a seeded synthetic dataset of paired images.
///
/// Every pair shares one latent class map (nearest-site regions over 2–4
/// seeded sites). Modality 1 renders each class through a per-class 2-vector
/// signature plus seeded per-pixel noise; modality 2 renders the same map
/// through a distinct per-class 10-vector signature with no noise. Class
/// signatures are shared across the whole dataset, so the same class looks
/// the same in every pair. Labels are the classes present in the map.
///
/// The whole dataset is resampled (with a salted seed) until every class
/// appears in at least one pair, so retrieval over the generated labels is
/// never degenerate. Identical arguments produce bitwise-identical datasets.
pub fn generate_synthetic(
    n_pairs: usize,
    image_side: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<MultiModalPair>> {
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be positive"));
    }
    if image_side < 4 {
        return Err(Error::config(format!(
            "image_side must be at least 4, got {image_side}"
        )));
    }
    if n_classes < 2 {
        return Err(Error::config(format!("n_classes must be at least 2, got {n_classes}")));
    }
    if n_classes > n_pairs * MAX_SITES {
        return Err(Error::config(format!(
            "cannot cover {n_classes} classes: {n_pairs} pairs draw at most {} sites",
            n_pairs * MAX_SITES
        )));
    }

    let id_width = n_pairs.saturating_sub(1).to_string().len().max(4);
    let (c1, c2) = MODALITY_CHANNELS;
    let side = image_side as f64;

    for attempt in 0..COVER_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Synthetic, attempt));

        // Dataset-wide per-class signatures, one appearance per modality.
        let sig1: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| (0..c1).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let sig2: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| (0..c2).map(|_| standard_normal(&mut rng)).collect())
            .collect();

        let mut pairs = Vec::with_capacity(n_pairs);
        let mut covered = vec![false; n_classes];
        for i in 0..n_pairs {
            let n_sites = rng.random_range(MIN_SITES..=MAX_SITES);
            let sites: Vec<(f64, f64, usize)> = (0..n_sites)
                .map(|_| {
                    (
                        rng.random::<f64>() * side,
                        rng.random::<f64>() * side,
                        rng.random_range(0..n_classes),
                    )
                })
                .collect();

            // Latent map: class of the nearest site, earliest site on ties.
            let mut latent = Array2::<usize>::zeros((image_side, image_side));
            let mut labels = BTreeSet::new();
            for y in 0..image_side {
                for x in 0..image_side {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (s, &(sy, sx, _)) in sites.iter().enumerate() {
                        let d = (py - sy).powi(2) + (px - sx).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = s;
                        }
                    }
                    let class = sites[best].2;
                    latent[(y, x)] = class;
                    labels.insert(class as u32);
                    covered[class] = true;
                }
            }

            let mut img1 = Array3::zeros((image_side, image_side, c1));
            let mut img2 = Array3::zeros((image_side, image_side, c2));
            for y in 0..image_side {
                for x in 0..image_side {
                    let class = latent[(y, x)];
                    for ch in 0..c1 {
                        img1[(y, x, ch)] = sig1[class][ch] + NOISE_STD * standard_normal(&mut rng);
                    }
                    for ch in 0..c2 {
                        img2[(y, x, ch)] = sig2[class][ch];
                    }
                }
            }

            let region = REGIONS[rng.random_range(0..REGIONS.len())].to_string();
            let season = SEASONS[rng.random_range(0..SEASONS.len())].to_string();
            pairs.push(MultiModalPair {
                id: format!("pair_{i:0id_width$}"),
                img1,
                img2,
                labels,
                split: Split::Train,
                region,
                season,
            });
        }

        if covered.iter().all(|&c| c) {
            let split_seed = rng.random::<u64>();
            let tags = split_assignments(n_pairs, DEFAULT_SPLIT_FRACTIONS, split_seed)?;
            for (pair, tag) in pairs.iter_mut().zip(tags) {
                pair.split = tag;
            }
            return Ok(pairs);
        }
    }
    Err(Error::data(format!(
        "synthetic generator failed to cover all {n_classes} classes in {COVER_ATTEMPTS} attempts"
    )))
}

/// Writes a dataset to `dir` — one raster per modality per pair under `s1/`
/// and `s2/` — and a `manifest.tsv` whose band statistics are computed from
/// the raw training-split images. Returns the manifest path.
pub fn save_dataset(pairs: &[MultiModalPair], dir: &Path) -> Result<PathBuf> {
    if pairs.is_empty() {
        return Err(Error::data("cannot save an empty dataset"));
    }
    let mut ids = BTreeSet::new();
    for pair in pairs {
        pair.validate()?;
        if !ids.insert(pair.id.as_str()) {
            return Err(Error::data(format!("duplicate pair id `{}`", pair.id)));
        }
    }
    let train1: Vec<&Array3<f64>> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| &p.img1)
        .collect();
    let train2: Vec<&Array3<f64>> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| &p.img2)
        .collect();
    if train1.is_empty() {
        return Err(Error::data(
            "dataset has no training pairs to compute band statistics from",
        ));
    }

    fs::create_dir_all(dir.join("s1"))?;
    fs::create_dir_all(dir.join("s2"))?;
    let mut records = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let rel1 = PathBuf::from("s1").join(format!("{}.bin", pair.id));
        let rel2 = PathBuf::from("s2").join(format!("{}.bin", pair.id));
        write_raster(&dir.join(&rel1), &pair.img1)?;
        write_raster(&dir.join(&rel2), &pair.img2)?;
        records.push(ManifestRecord {
            id: pair.id.clone(),
            path1: rel1,
            path2: rel2,
            labels: pair.labels.clone(),
            split: pair.split,
            region: pair.region.clone(),
            season: pair.season.clone(),
        });
    }
    let manifest = ArchiveManifest {
        stats1: compute_band_stats(&train1)?,
        stats2: compute_band_stats(&train2)?,
        records,
    };
    let manifest_path = dir.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

/// Loads a dataset from its manifest: reads every raster (paths resolved
/// relative to the manifest), applies [`normalize`] with the manifest's band
/// statistics when present, and returns the pairs with the parsed manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(Vec<MultiModalPair>, ArchiveManifest)> {
    let manifest = ArchiveManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let mut img1 = read_raster(&base.join(&record.path1))?;
        let mut img2 = read_raster(&base.join(&record.path2))?;
        if !manifest.stats1.is_empty() {
            img1 = normalize(&img1, &manifest.stats1)?;
        }
        if !manifest.stats2.is_empty() {
            img2 = normalize(&img2, &manifest.stats2)?;
        }
        let pair = MultiModalPair {
            id: record.id.clone(),
            img1,
            img2,
            labels: record.labels.clone(),
            split: record.split,
            region: record.region.clone(),
            season: record.season.clone(),
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok((pairs, manifest))
}

/// Clones the image tuples of every pair in `split`, in dataset order — the
/// shape the trainer consumes.
pub fn split_images(pairs: &[MultiModalPair], split: Split) -> Vec<(Array3<f64>, Array3<f64>)> {
    pairs
        .iter()
        .filter(|p| p.split == split)
        .map(|p| (p.img1.clone(), p.img2.clone()))
        .collect()
}
