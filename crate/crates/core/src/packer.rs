//! Spatial packer: patch tokens are laid back onto their 3D grid, cut into
//! `S_d·S_w·S_h` equal voxels, each voxel is pooled to a centroid point, and
//! the point attends to its own voxel's cells only (Voxel2Point
//! cross-attention) before a two-layer projection to decoder width.

use candle_core::{Tensor, D};

use crate::encoders::VisionTokens;
use crate::error::{Axis, Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;

/// `(B, D̂, Ŵ, Ĥ, d)` features in canonical row-major patch order.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub data: Tensor,
}

impl FeatureGrid {
    pub fn grid_dims(&self) -> Result<[usize; 3]> {
        let (_, d, w, h, _) = self.data.dims5()?;
        Ok([d, w, h])
    }
}

/// `(B, N_v, M, d)` with `N_v = S_d·S_w·S_h` voxels of `M = D'·W'·H'` cells.
#[derive(Debug, Clone)]
pub struct VoxelPartition {
    pub voxels: Tensor,
    pub strides: [usize; 3],
    pub voxel_dims: [usize; 3],
}

impl VoxelPartition {
    pub fn num_voxels(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn cells_per_voxel(&self) -> usize {
        self.voxel_dims.iter().product()
    }
}

/// One centroid per voxel, `(B, N_v, d)`.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub points: Tensor,
    pub strides: [usize; 3],
}

/// `(B, N_v, d_t)` decoder-width tokens.
#[derive(Debug, Clone)]
pub struct PackedTokens {
    pub tokens: Tensor,
}

impl PackedTokens {
    pub fn len(&self) -> Result<usize> {
        Ok(self.tokens.dims3()?.1)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn width(&self) -> Result<usize> {
        Ok(self.tokens.dims3()?.2)
    }
}

pub fn voxel_index(ijk: [usize; 3], strides: [usize; 3]) -> usize {
    ijk[0] * strides[1] * strides[2] + ijk[1] * strides[2] + ijk[2]
}

pub fn voxel_coords(index: usize, strides: [usize; 3]) -> [usize; 3] {
    let plane = strides[1] * strides[2];
    [index / plane, (index % plane) / strides[2], index % strides[2]]
}

/// `D' = D̂/S_d` etc.; non-divisible axes are reported by name.
pub fn voxel_dims(grid: [usize; 3], strides: [usize; 3]) -> Result<[usize; 3]> {
    let axes = [Axis::Depth, Axis::Width, Axis::Height];
    let mut out = [0; 3];
    for i in 0..3 {
        if strides[i] == 0 || grid[i] % strides[i] != 0 {
            return Err(Error::Partition {
                axis: axes[i],
                extent: grid[i],
                parts: strides[i],
            });
        }
        out[i] = grid[i] / strides[i];
    }
    Ok(out)
}

pub fn reshape_to_grid(tokens: &VisionTokens) -> Result<FeatureGrid> {
    let (b, n, d) = tokens.tokens.dims3()?;
    let [gd, gw, gh] = tokens.grid_dims;
    if n != gd * gw * gh {
        return Err(Error::Shape(format!(
            "{n} tokens cannot fill a {gd}x{gw}x{gh} grid"
        )));
    }
    Ok(FeatureGrid {
        data: tokens.tokens.reshape((b, gd, gw, gh, d))?,
    })
}

pub fn grid_to_tokens(grid: &FeatureGrid) -> Result<Tensor> {
    let (b, gd, gw, gh, d) = grid.data.dims5()?;
    Ok(grid.data.reshape((b, gd * gw * gh, d))?)
}

pub fn partition_voxels(grid: &FeatureGrid, strides: [usize; 3]) -> Result<VoxelPartition> {
    let (b, gd, gw, gh, d) = grid.data.dims5()?;
    let [vd, vw, vh] = voxel_dims([gd, gw, gh], strides)?;
    let [sd, sw, sh] = strides;
    let voxels = grid
        .data
        .reshape(vec![b, sd, vd, sw, vw, sh, vh, d])?
        .permute([0, 1, 3, 5, 2, 4, 6, 7])?
        .contiguous()?
        .reshape((b, sd * sw * sh, vd * vw * vh, d))?;
    Ok(VoxelPartition {
        voxels,
        strides,
        voxel_dims: [vd, vw, vh],
    })
}

/// Inverse of [`partition_voxels`].
pub fn merge_voxels(partition: &VoxelPartition) -> Result<FeatureGrid> {
    let (b, _, _, d) = partition.voxels.dims4()?;
    let [sd, sw, sh] = partition.strides;
    let [vd, vw, vh] = partition.voxel_dims;
    let data = partition
        .voxels
        .reshape(vec![b, sd, sw, sh, vd, vw, vh, d])?
        .permute([0, 1, 4, 2, 5, 3, 6, 7])?
        .contiguous()?
        .reshape((b, sd * vd, sw * vw, sh * vh, d))?;
    Ok(FeatureGrid { data })
}

/// Arithmetic mean over each voxel's cells.
pub fn centroid_pool(partition: &VoxelPartition) -> Result<PointSet> {
    Ok(PointSet {
        points: partition.voxels.mean(2)?,
        strides: partition.strides,
    })
}

/// Each centroid point queries only its own voxel's cells.
#[derive(Debug, Clone)]
pub struct V2pCrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct V2pOutput {
    /// `(B, N_v, d)` after the residual FFN.
    pub tokens: Tensor,
    /// `(B, N_v, d)` attention output before any residual.
    pub attended: Tensor,
    /// `(B·N_v, heads, 1, M)`.
    pub weights: Tensor,
}

impl V2pCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_v: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d_v)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d_v)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_v, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d_v)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_v, 4 * d_v)?,
        })
    }

    pub fn forward(&self, points: &PointSet, partition: &VoxelPartition) -> Result<V2pOutput> {
        if points.strides != partition.strides {
            return Err(Error::Config(format!(
                "points built with strides {:?}, partition with {:?}",
                points.strides, partition.strides
            )));
        }
        let (b, nv, m, d) = partition.voxels.dims4()?;
        let q = points.points.reshape((b * nv, 1, d))?;
        let kv = partition.voxels.reshape((b * nv, m, d))?;
        // one attention batch entry per voxel gives the block-diagonal structure
        let (attended, weights) =
            self.attn
                .forward_with_weights(&self.ln_q.forward(&q)?, &self.ln_kv.forward(&kv)?, None)?;
        let y = (q + &attended)?;
        let y = (&y + self.ffn.forward(&self.ln_ffn.forward(&y)?)?)?;
        Ok(V2pOutput {
            tokens: y.reshape((b, nv, d))?,
            attended: attended.reshape((b, nv, d))?,
            weights,
        })
    }
}

/// `Linear(d_v, d_t) → GELU → Linear(d_t, d_t)`.
#[derive(Debug, Clone)]
pub struct DecoderProjection {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DecoderProjection {
    pub fn new(store: &mut ParamStore, name: &str, d_v: usize, d_t: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_v, d_t, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_t, d_t, true)?,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<PackedTokens> {
        Ok(PackedTokens {
            tokens: self.fc2.forward(&self.fc1.forward(y)?.gelu_erf()?)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Global,
    Local,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Global => "packer_g",
            Stream::Local => "packer_l",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialPacker {
    pub v2p: V2pCrossAttention,
    pub projection: DecoderProjection,
    pub strides: [usize; 3],
}

impl SpatialPacker {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_v: usize,
        d_t: usize,
        heads: usize,
        strides: [usize; 3],
    ) -> Result<Self> {
        Ok(Self {
            v2p: V2pCrossAttention::new(store, &format!("{name}.v2p"), d_v, heads)?,
            projection: DecoderProjection::new(store, &format!("{name}.proj"), d_v, d_t)?,
            strides,
        })
    }

    pub fn pack(&self, tokens: &VisionTokens) -> Result<PackedTokens> {
        let partition = partition_voxels(&reshape_to_grid(tokens)?, self.strides)?;
        let points = centroid_pool(&partition)?;
        let y = self.v2p.forward(&points, &partition)?;
        self.projection.forward(&y.tokens)
    }
}

/// Independent packers for the global and local streams.
#[derive(Debug, Clone)]
pub struct TwinPackers {
    pub global: SpatialPacker,
    pub local: SpatialPacker,
}

impl TwinPackers {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &crate::config::Config) -> Result<Self> {
        let make = |store: &mut ParamStore, s: Stream| {
            SpatialPacker::new(
                store,
                &format!("{prefix}.{}", s.name()),
                cfg.d_v,
                cfg.d_t,
                cfg.packer_heads,
                cfg.strides,
            )
        };
        Ok(Self {
            global: make(store, Stream::Global)?,
            local: make(store, Stream::Local)?,
        })
    }

    pub fn get(&self, stream: Stream) -> &SpatialPacker {
        match stream {
            Stream::Global => &self.global,
            Stream::Local => &self.local,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub strides: [usize; 3],
    pub voxel_dims: [usize; 3],
    pub tokens: usize,
}

/// Geometry of packing `grid` under each stride triple.
pub fn stride_sweep(grid: [usize; 3], strides: &[[usize; 3]]) -> Result<Vec<SweepRow>> {
    strides
        .iter()
        .map(|&s| {
            Ok(SweepRow {
                strides: s,
                voxel_dims: voxel_dims(grid, s)?,
                tokens: s.iter().product(),
            })
        })
        .collect()
}

/// Per-token mean absolute difference, used by locality checks.
pub fn token_changes(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let diff = (a - b)?.abs()?.to_dtype(candle_core::DType::F64)?;
    let (bsz, n, _) = diff.dims3()?;
    Ok(diff.max(D::Minus1)?.reshape(bsz * n)?.to_vec1()?)
}
