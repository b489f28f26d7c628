//! Dense 3D volumes and their deterministic preprocessing: min-max
//! normalization, trilinear resizing, Z-axis slice extraction and
//! patchification into non-overlapping 3D patches.
//!
//! Layout is row-major `(depth, width, height, channels)` with channels
//! innermost. Patches are ordered row-major over the patch grid with depth
//! outermost, and each patch token is itself a row-major
//! `(p_d, p_w, p_h, channels)` block.

use std::fs;
use std::path::Path;

use crate::error::{Axis, Error, Result};
use crate::kv;

pub const VOLUME_FILE: &str = "volume.f32";
pub const VOLUME_META_FILE: &str = "volume.meta";
const VOLUME_FORMAT: &str = "hsenet-volume-v1";

/// Paper-scale resize target `(D, W, H)`.
pub const PAPER_VOLUME_DIMS: [usize; 3] = [32, 256, 256];
/// Paper-scale patch grid `(D̂, Ŵ, Ĥ)`.
pub const PAPER_GRID: [usize; 3] = [8, 16, 16];
pub const PAPER_N_SLICES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: [usize; 4],
    normalized: bool,
    provenance: String,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        dims: [usize; 4],
        normalized: bool,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "volume of dims {dims:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(
                "volume flagged normalized has elements outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            data,
            dims,
            normalized,
            provenance: provenance.into(),
        })
    }

    /// Builds a volume by evaluating `f(d, w, h, c)` at every element.
    pub fn from_fn(
        dims: [usize; 4],
        provenance: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [dd, ww, hh, cc] = dims;
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dd {
            for w in 0..ww {
                for h in 0..hh {
                    for c in 0..cc {
                        data.push(f(d, w, h, c));
                    }
                }
            }
        }
        Self::new(data, dims, false, provenance)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(D, W, H, C)`.
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    #[inline]
    pub fn index(&self, d: usize, w: usize, h: usize, c: usize) -> usize {
        let [_, ww, hh, cc] = self.dims;
        ((d * ww + w) * hh + h) * cc + c
    }

    #[inline]
    pub fn get(&self, d: usize, w: usize, h: usize, c: usize) -> f32 {
        self.data[self.index(d, w, h, c)]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let raw = dir.join(VOLUME_FILE);
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        let [d, w, h, c] = self.dims;
        let meta = kv::render([
            ("format", VOLUME_FORMAT.to_string()),
            ("depth", d.to_string()),
            ("width", w.to_string()),
            ("height", h.to_string()),
            ("channels", c.to_string()),
            ("normalized", self.normalized.to_string()),
            ("provenance", self.provenance.clone()),
        ]);
        let meta_path = dir.join(VOLUME_META_FILE);
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(VOLUME_META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = kv::parse(&text, &meta_path)?;
        let format: String = kv::take(&meta, "format", &meta_path)?;
        if format != VOLUME_FORMAT {
            return Err(Error::format(&meta_path, format!("unknown format {format:?}")));
        }
        let dims = [
            kv::take(&meta, "depth", &meta_path)?,
            kv::take(&meta, "width", &meta_path)?,
            kv::take(&meta, "height", &meta_path)?,
            kv::take(&meta, "channels", &meta_path)?,
        ];
        let normalized: bool = kv::take(&meta, "normalized", &meta_path)?;
        let provenance = meta.get("provenance").cloned().unwrap_or_default();
        let raw = dir.join(VOLUME_FILE);
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let expected: usize = dims.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &raw,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(data, dims, normalized, provenance)
    }
}

/// Min-max normalization to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_volume(raw: &Volume) -> Result<Volume> {
    if raw.normalized {
        return Err(Error::Input("volume is already normalized".into()));
    }
    let (lo, hi) = raw
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let data = if hi > lo {
        let span = (hi as f64) - (lo as f64);
        raw.data
            .iter()
            .map(|&v| ((((v as f64) - (lo as f64)) / span) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; raw.data.len()]
    };
    Volume::new(data, raw.dims, true, raw.provenance.clone())
}

/// Corner-aligned source coordinate for output index `i` when resampling an
/// axis of `src` samples to `dst` samples.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = source_coord(i, src, dst);
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Trilinear resize of the spatial axes with corner-aligned sampling.
/// Channels are interpolated independently.
pub fn resize_volume(vol: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::Dimension(format!(
            "resize target must be >= 1 on every axis, got {target:?}"
        )));
    }
    if vol.spatial_dims() == target {
        return Ok(vol.clone());
    }
    let [sd, sw, sh, c] = vol.dims;
    let [td, tw, th] = target;
    let (zd, zw, zh) = (axis_taps(sd, td), axis_taps(sw, tw), axis_taps(sh, th));
    let mut data = Vec::with_capacity(td * tw * th * c);
    for &(d0, d1, fd) in &zd {
        for &(w0, w1, fw) in &zw {
            for &(h0, h1, fh) in &zh {
                for ch in 0..c {
                    let g = |d, w, h| vol.get(d, w, h, ch) as f64;
                    let c00 = g(d0, w0, h0) * (1.0 - fh) + g(d0, w0, h1) * fh;
                    let c01 = g(d0, w1, h0) * (1.0 - fh) + g(d0, w1, h1) * fh;
                    let c10 = g(d1, w0, h0) * (1.0 - fh) + g(d1, w0, h1) * fh;
                    let c11 = g(d1, w1, h0) * (1.0 - fh) + g(d1, w1, h1) * fh;
                    let c0 = c00 * (1.0 - fw) + c01 * fw;
                    let c1 = c10 * (1.0 - fw) + c11 * fw;
                    data.push((c0 * (1.0 - fd) + c1 * fd) as f32);
                }
            }
        }
    }
    let mut out = Volume::new(data, [td, tw, th, c], false, vol.provenance.clone())?;
    if vol.normalized {
        // interpolation is convex, so values stay in range up to rounding
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out.normalized = true;
    }
    Ok(out)
}

/// `N_s` axial images taken along the depth axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    slices: Vec<Vec<f32>>,
    indices: Vec<usize>,
    /// `(W, H, C)` of every slice.
    slice_dims: [usize; 3],
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn slices(&self) -> &[Vec<f32>] {
        &self.slices
    }

    pub fn slice_dims(&self) -> [usize; 3] {
        self.slice_dims
    }

    /// Bilinear (corner-aligned) resample of every slice to `(w, h)`.
    pub fn resized(&self, w: usize, h: usize) -> Result<SliceStack> {
        let [sw, sh, c] = self.slice_dims;
        if (sw, sh) == (w, h) {
            return Ok(self.clone());
        }
        let slices = self
            .slices
            .iter()
            .map(|s| {
                let v = Volume::new(s.clone(), [1, sw, sh, c], false, "")?;
                Ok(resize_volume(&v, [1, w, h])?.data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SliceStack {
            slices,
            indices: self.indices.clone(),
            slice_dims: [w, h, c],
        })
    }

    /// Row-major concatenation of all slices: `N_s × W × H × C`.
    pub fn flat(&self) -> Vec<f32> {
        self.slices.iter().flatten().copied().collect()
    }
}

/// Depth indices for uniform slicing: `floor(linspace(0, D-1, n))`, with the
/// single-slice case pinned to `floor(D/2)`.
pub fn slice_indices(depth: usize, n_slices: usize) -> Result<Vec<usize>> {
    if n_slices == 0 {
        return Err(Error::Input("n_slices must be >= 1".into()));
    }
    if depth == 0 {
        return Err(Error::Dimension("depth must be >= 1".into()));
    }
    if n_slices == 1 {
        return Ok(vec![depth / 2]);
    }
    // exact rational evaluation avoids 2.9999.. style floors
    Ok((0..n_slices)
        .map(|i| i * (depth - 1) / (n_slices - 1))
        .collect())
}

pub fn extract_slices(vol: &Volume, n_slices: usize) -> Result<SliceStack> {
    let [d, w, h, c] = vol.dims;
    if n_slices > d {
        log::warn!(
            "extracting {n_slices} slices from depth {d}: slice indices will repeat"
        );
    }
    let indices = slice_indices(d, n_slices)?;
    let plane = w * h * c;
    let slices = indices
        .iter()
        .map(|&z| vol.data[z * plane..(z + 1) * plane].to_vec())
        .collect();
    Ok(SliceStack {
        slices,
        indices,
        slice_dims: [w, h, c],
    })
}

/// Non-overlapping 3D patches of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `N_p × token_len`, row-major.
    tokens: Vec<f32>,
    grid_dims: [usize; 3],
    patch_dims: [usize; 3],
    channels: usize,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn token_len(&self) -> usize {
        self.patch_dims.iter().product::<usize>() * self.channels
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        self.patch_dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let n = self.token_len();
        &self.tokens[i * n..(i + 1) * n]
    }
}

fn check_divisible(dims: [usize; 3], grid: [usize; 3]) -> Result<[usize; 3]> {
    let axes = [Axis::Depth, Axis::Width, Axis::Height];
    let mut out = [0; 3];
    for i in 0..3 {
        if grid[i] == 0 || dims[i] % grid[i] != 0 {
            return Err(Error::Partition {
                axis: axes[i],
                extent: dims[i],
                parts: grid[i],
            });
        }
        out[i] = dims[i] / grid[i];
    }
    Ok(out)
}

/// Splits the volume into a `grid = (D̂, Ŵ, Ĥ)` lattice of equal patches.
pub fn patchify(vol: &Volume, grid: [usize; 3]) -> Result<PatchSequence> {
    let patch = check_divisible(vol.spatial_dims(), grid)?;
    let c = vol.channels();
    let [gd, gw, gh] = grid;
    let [pd, pw, ph] = patch;
    let row = ph * c;
    let mut tokens = Vec::with_capacity(vol.data.len());
    for i in 0..gd {
        for j in 0..gw {
            for k in 0..gh {
                for a in 0..pd {
                    for b in 0..pw {
                        let start = vol.index(i * pd + a, j * pw + b, k * ph, 0);
                        tokens.extend_from_slice(&vol.data[start..start + row]);
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens,
        grid_dims: grid,
        patch_dims: patch,
        channels: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &PatchSequence, normalized: bool, provenance: &str) -> Result<Volume> {
    let [gd, gw, gh] = patches.grid_dims;
    let [pd, pw, ph] = patches.patch_dims;
    let c = patches.channels;
    let dims = [gd * pd, gw * pw, gh * ph, c];
    let mut data = vec![0f32; patches.tokens.len()];
    let row = ph * c;
    let mut src = 0;
    for i in 0..gd {
        for j in 0..gw {
            for k in 0..gh {
                for a in 0..pd {
                    for b in 0..pw {
                        let d = i * pd + a;
                        let w = j * pw + b;
                        let start = ((d * dims[1] + w) * dims[2] + k * ph) * c;
                        data[start..start + row].copy_from_slice(&patches.tokens[src..src + row]);
                        src += row;
                    }
                }
            }
        }
    }
    Volume::new(data, dims, normalized, provenance)
}
