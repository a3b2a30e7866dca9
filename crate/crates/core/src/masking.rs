//! Patchification and masked-position plans for paired images.
//!
//! Both images of a pair are cut into the same non-overlapping square patch
//! grid. A [`MaskPlan`] fixes which patch indices are hidden from each
//! modality's encoder; the three [`CorrespondenceMode`]s control how the two
//! index sets relate:
//!
//! - `identical`: both modalities hide the same positions, so cross-modal
//!   reconstruction gets no view of the scored area in either modality,
//! - `random`: the sets are drawn independently and may overlap anywhere,
//! - `disjoint`: the sets never overlap, so every position scored for one
//!   modality was visible to the other (requires ratio ≤ 0.5).

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A square image cut into non-overlapping K×K patches, flattened row-major
/// (patch row-major over the grid; within a patch, pixels row-major with
/// channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Array2<f64>,
    grid_side: usize,
    patch_size: usize,
    channels: usize,
}

impl PatchGrid {
    /// Number of patches N = (H/K)².
    pub fn n_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Flattened patch length P = K²·C.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Patches per side of the grid.
    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The N×P patch matrix.
    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }
}

/// Cut a square H×W×C image (H = W, K | H) into its patch grid.
pub fn patchify(image: &Array3<f64>, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = image.dim();
    if h != w {
        return Err(Error::geometry(format!("image must be square, got {h}x{w}")));
    }
    if c == 0 {
        return Err(Error::geometry("image must have at least one channel"));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::geometry(format!(
            "patch size {patch_size} must divide image side {h}"
        )));
    }
    let g = h / patch_size;
    let n = g * g;
    let p = patch_size * patch_size * c;
    let mut patches = Array2::zeros((n, p));
    for py in 0..g {
        for px in 0..g {
            let patch = py * g + px;
            let mut at = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for ch in 0..c {
                        patches[[patch, at]] =
                            image[[py * patch_size + y, px * patch_size + x, ch]];
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patches, grid_side: g, patch_size, channels: c })
}

/// Reassemble a patch grid into the original H×W×C image. Exact inverse of
/// [`patchify`] (bitwise: values are only moved, never recomputed).
pub fn unpatchify(grid: &PatchGrid) -> Array3<f64> {
    let k = grid.patch_size;
    let g = grid.grid_side;
    let c = grid.channels;
    let side = g * k;
    let mut image = Array3::zeros((side, side, c));
    for py in 0..g {
        for px in 0..g {
            let patch = py * g + px;
            let mut at = 0;
            for y in 0..k {
                for x in 0..k {
                    for ch in 0..c {
                        image[[py * k + y, px * k + x, ch]] = grid.patches[[patch, at]];
                        at += 1;
                    }
                }
            }
        }
    }
    image
}

/// How the two modalities' masked index sets relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrespondenceMode {
    Identical,
    Random,
    Disjoint,
}

/// Masking knobs shared by training and the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingOptions {
    pub ratio: f64,
    pub mode: CorrespondenceMode,
}

impl Default for MaskingOptions {
    fn default() -> Self {
        MaskingOptions { ratio: 0.5, mode: CorrespondenceMode::Random }
    }
}

impl fmt::Display for CorrespondenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorrespondenceMode::Identical => "identical",
            CorrespondenceMode::Random => "random",
            CorrespondenceMode::Disjoint => "disjoint",
        };
        f.write_str(s)
    }
}

impl FromStr for CorrespondenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(CorrespondenceMode::Identical),
            "random" => Ok(CorrespondenceMode::Random),
            "disjoint" => Ok(CorrespondenceMode::Disjoint),
            other => Err(Error::config(format!(
                "unknown masking mode '{other}' (expected identical|random|disjoint)"
            ))),
        }
    }
}

/// Masked patch indices for one pair of images. Index lists are sorted
/// ascending and duplicate-free; both modalities hide the same *count* of
/// patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    n_patches: usize,
    ratio: f64,
    mode: CorrespondenceMode,
    masked_1: Vec<usize>,
    masked_2: Vec<usize>,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn mode(&self) -> CorrespondenceMode {
        self.mode
    }

    /// Masked indices for modality 1 (sorted ascending).
    pub fn masked_1(&self) -> &[usize] {
        &self.masked_1
    }

    /// Masked indices for modality 2 (sorted ascending).
    pub fn masked_2(&self) -> &[usize] {
        &self.masked_2
    }

    /// Complement of [`MaskPlan::masked_1`], sorted ascending.
    pub fn unmasked_1(&self) -> Vec<usize> {
        complement(&self.masked_1, self.n_patches)
    }

    /// Complement of [`MaskPlan::masked_2`], sorted ascending.
    pub fn unmasked_2(&self) -> Vec<usize> {
        complement(&self.masked_2, self.n_patches)
    }

    /// One-line record: `mode ratio N | masked_1 csv | masked_2 csv`.
    pub fn to_record(&self) -> String {
        format!(
            "{} {} {} | {} | {}",
            self.mode,
            self.ratio,
            self.n_patches,
            join_csv(&self.masked_1),
            join_csv(&self.masked_2)
        )
    }

    /// Parse a record produced by [`MaskPlan::to_record`], re-validating every
    /// invariant (sortedness, bounds, counts, mode consistency).
    pub fn parse_record(line: &str) -> Result<MaskPlan> {
        let mut parts = line.split('|');
        let head = parts.next().ok_or_else(|| bad_record("missing header"))?.trim();
        let m1 = parts.next().ok_or_else(|| bad_record("missing first index list"))?.trim();
        let m2 = parts.next().ok_or_else(|| bad_record("missing second index list"))?.trim();
        if parts.next().is_some() {
            return Err(bad_record("too many '|' sections"));
        }
        let mut fields = head.split_whitespace();
        let mode: CorrespondenceMode = fields
            .next()
            .ok_or_else(|| bad_record("missing mode"))?
            .parse()
            .map_err(|e| bad_record(format!("{e}")))?;
        let ratio: f64 = fields
            .next()
            .ok_or_else(|| bad_record("missing ratio"))?
            .parse()
            .map_err(|_| bad_record("ratio is not a number"))?;
        let n: usize = fields
            .next()
            .ok_or_else(|| bad_record("missing patch count"))?
            .parse()
            .map_err(|_| bad_record("patch count is not an integer"))?;
        if fields.next().is_some() {
            return Err(bad_record("trailing fields in header"));
        }
        let masked_1 = parse_csv(m1)?;
        let masked_2 = parse_csv(m2)?;
        let plan = MaskPlan { n_patches: n, ratio, mode, masked_1, masked_2 };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        let m = masked_count(self.ratio, self.n_patches)?;
        for (name, list) in [("masked_1", &self.masked_1), ("masked_2", &self.masked_2)] {
            if list.len() != m {
                return Err(bad_record(format!(
                    "{name} has {} indices, expected {m}",
                    list.len()
                )));
            }
            if !list.windows(2).all(|w| w[0] < w[1]) {
                return Err(bad_record(format!("{name} is not strictly ascending")));
            }
            if list.last().is_some_and(|&i| i >= self.n_patches) {
                return Err(bad_record(format!("{name} index out of range")));
            }
        }
        match self.mode {
            CorrespondenceMode::Identical => {
                if self.masked_1 != self.masked_2 {
                    return Err(bad_record("identical mode with differing index sets"));
                }
            }
            CorrespondenceMode::Disjoint => {
                if intersects(&self.masked_1, &self.masked_2) {
                    return Err(bad_record("disjoint mode with overlapping index sets"));
                }
            }
            CorrespondenceMode::Random => {}
        }
        Ok(())
    }
}

fn bad_record(msg: impl fmt::Display) -> Error {
    Error::data(format!("invalid mask plan record: {msg}"))
}

fn join_csv(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_csv(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Err(bad_record("empty index list"));
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| bad_record(format!("bad index '{t}'"))))
        .collect()
}

pub(crate) fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

fn intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Number of patches hidden per modality: round(ratio·N), ties to even.
/// Errors when the rounded count degenerates to 0 (nothing to reconstruct)
/// or N (nothing left to encode).
pub fn masked_count(ratio: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::config(format!("masking ratio {ratio} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::geometry("mask plan over zero patches"));
    }
    let m = (ratio * n as f64).round_ties_even() as usize;
    if m == 0 || m == n {
        return Err(Error::config(format!(
            "degenerate masking ratio {ratio}: round({ratio}*{n}) = {m} leaves nothing to \
             reconstruct or nothing to encode"
        )));
    }
    Ok(m)
}

/// Sample `m` distinct indices from `pool` without replacement (partial
/// Fisher–Yates), returned sorted ascending.
fn sample_sorted<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], m: usize) -> Vec<usize> {
    debug_assert!(m <= pool.len());
    let mut pool = pool.to_vec();
    for i in 0..m {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool.sort_unstable();
    pool
}

/// Draw a mask plan for one pair.
///
/// Both modalities hide round(ratio·N) patches (ties to even). `identical`
/// draws one index set and copies it; `random` draws two independent sets;
/// `disjoint` draws the second set from the complement of the first, which is
/// infeasible when 2·round(ratio·N) > N.
pub fn make_mask_plan<R: Rng + ?Sized>(
    n_patches: usize,
    ratio: f64,
    mode: CorrespondenceMode,
    rng: &mut R,
) -> Result<MaskPlan> {
    let m = masked_count(ratio, n_patches)?;
    let all: Vec<usize> = (0..n_patches).collect();
    let (masked_1, masked_2) = match mode {
        CorrespondenceMode::Identical => {
            let m1 = sample_sorted(rng, &all, m);
            (m1.clone(), m1)
        }
        CorrespondenceMode::Random => {
            let m1 = sample_sorted(rng, &all, m);
            let m2 = sample_sorted(rng, &all, m);
            (m1, m2)
        }
        CorrespondenceMode::Disjoint => {
            if 2 * m > n_patches {
                return Err(Error::infeasible(format!(
                    "disjoint masks need 2*round(ratio*N) <= N, got 2*{m} > {n_patches}"
                )));
            }
            let m1 = sample_sorted(rng, &all, m);
            let rest = complement(&m1, n_patches);
            let m2 = sample_sorted(rng, &rest, m);
            (m1, m2)
        }
    };
    Ok(MaskPlan { n_patches, ratio, mode, masked_1, masked_2 })
}
