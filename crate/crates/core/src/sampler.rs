//! Datasets of network inputs and the per-layer sample matrices `(X, Y)`.
//!
//! `X` holds im2col rows of a layer's input taken from the network being
//! pruned; `Y` holds the layer's output vectors at the same positions,
//! normally taken from the original network so each solve also absorbs
//! error accumulated upstream.
//!
//! Dataset files use the PKT layout:
//!
//! ```text
//! "PKT1" | u32 image_count | per image: u32 ndim | u32 dims[ndim] | f32 payload
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, TensorShape};
use crate::infer::{forward_partial, im2col_row, Activation};
use crate::tensor::Matrix;

pub const DATASET_MAGIC: &[u8; 4] = b"PKT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Activation>,
    pub source: PathBuf,
}

impl Dataset {
    /// Wraps batch-1 images that share one shape.
    pub fn new(images: Vec<Activation>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?
            .shape;
        for (i, img) in images.iter().enumerate() {
            if img.shape.n != 1 || img.shape != first.with_batch(1) {
                return Err(Error::Dataset(format!(
                    "image {i} has shape {}, expected {}",
                    img.shape,
                    first.with_batch(1)
                )));
            }
        }
        Ok(Self {
            images,
            source: PathBuf::new(),
        })
    }

    /// Standard-normal images, reproducible from `seed`.
    pub fn synthetic(count: usize, c: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("valid");
        let shape = TensorShape::new(1, c, h, w);
        let images = (0..count)
            .map(|_| Activation {
                shape,
                data: (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect();
        Self {
            images,
            source: PathBuf::from("<synthetic>"),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of one image (batch 1).
    pub fn image_shape(&self) -> TensorShape {
        self.images[0].shape
    }

    /// Keeps the first `n` images.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images[..n.min(self.len())].to_vec(),
            source: self.source.clone(),
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = crate::graph::io_read(path)?;
    let mut cur = crate::graph::BlobCursor::new(&bytes);
    if cur.take(4).ok() != Some(&DATASET_MAGIC[..]) {
        return Err(Error::Dataset("bad magic, expected PKT1".into()));
    }
    let count = cur.u32()? as usize;
    if count == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let dims = cur.dims()?;
        let shape = match dims[..] {
            [c, h, w] | [1, c, h, w] => TensorShape::new(1, c, h, w),
            _ => {
                return Err(Error::Dataset(format!(
                    "image {i} has dims {dims:?}, expected CxHxW"
                )))
            }
        };
        let data = cur.f32s(shape.numel())?;
        images.push(Activation { shape, data });
    }
    if !cur.at_end() {
        return Err(Error::Dataset("trailing bytes after last image".into()));
    }
    let mut ds = Dataset::new(images)?;
    ds.source = path.to_path_buf();
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(ds.len() as u32).to_le_bytes())?;
    for img in &ds.images {
        let s = img.shape;
        out.write_all(&4u32.to_le_bytes())?;
        for d in [s.n, s.c, s.h, s.w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &img.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Sampled positions plus the seed that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionSet {
    pub seed: u64,
    pub positions: Vec<Position>,
}

impl PositionSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Draws `per_image` distinct output positions per image (all of them when
/// the map is smaller), uniformly and reproducibly from `seed`. Positions of
/// one image are listed in raster order.
pub fn sample_positions(
    image_count: usize,
    out_shape: TensorShape,
    per_image: usize,
    seed: u64,
) -> PositionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = out_shape.h * out_shape.w;
    let k = per_image.min(plane);
    let mut positions = Vec::with_capacity(image_count * k);
    for image in 0..image_count {
        let mut idx = rand::seq::index::sample(&mut rng, plane, k).into_vec();
        idx.sort_unstable();
        positions.extend(idx.into_iter().map(|i| Position {
            image,
            y: i / out_shape.w,
            x: i % out_shape.w,
        }));
    }
    PositionSet { seed, positions }
}

/// Where reconstruction targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    #[default]
    Original,
    Current,
}

/// What to gather from a forward pass at each sampled position.
#[derive(Debug, Clone, Copy)]
pub enum RowRequest<'a> {
    /// Channel vector of a node's output.
    Pixels(&'a str),
    /// im2col row of a conv's input feeding that output position.
    Patches(&'a str),
}

/// Gathers one matrix per request, rows in `positions` order. Forward passes
/// run per image, in parallel; row order does not depend on scheduling.
pub fn gather_rows(
    g: &Graph,
    ds: &Dataset,
    positions: &[Position],
    requests: &[RowRequest],
) -> Result<Vec<Matrix>> {
    let shapes = infer_shapes(g, g.input_shape(1))?;
    let mut capture: Vec<&str> = Vec::new();
    let mut widths = Vec::new();
    for r in requests {
        match *r {
            RowRequest::Pixels(id) => {
                g.node(id)?;
                capture.push(id);
                widths.push(shapes[id].c);
            }
            RowRequest::Patches(id) => {
                let attrs = g.conv_attrs(id)?;
                capture.push(g.node(id)?.inputs[0].as_str());
                widths.push(attrs.in_channels * attrs.kernel_area());
            }
        }
    }
    // Bounds are checked against each request's own output grid.
    for r in requests {
        let id = match *r {
            RowRequest::Pixels(id) | RowRequest::Patches(id) => id,
        };
        let s = shapes[id];
        if let Some(p) = positions
            .iter()
            .find(|p| p.image >= ds.len() || p.y >= s.h || p.x >= s.w)
        {
            return Err(Error::Dataset(format!(
                "position {p:?} out of range for `{id}` ({s}) over {} images",
                ds.len()
            )));
        }
    }

    // Runs of consecutive positions on the same image share one forward pass.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=positions.len() {
        if i == positions.len() || positions[i].image != positions[start].image {
            runs.push((start, i));
            start = i;
        }
    }

    let chunks: Vec<Vec<Vec<f64>>> = runs
        .par_iter()
        .map(|&(lo, hi)| -> Result<Vec<Vec<f64>>> {
            let image = &ds.images[positions[lo].image];
            let acts = forward_partial(g, image, &capture)?;
            let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * (hi - lo))).collect();
            for p in &positions[lo..hi] {
                for (k, r) in requests.iter().enumerate() {
                    let act = &acts[capture[k]];
                    match *r {
                        RowRequest::Pixels(_) => {
                            out[k].extend(act.pixel(0, p.y, p.x).into_iter().map(f64::from));
                        }
                        RowRequest::Patches(id) => {
                            let attrs = g.conv_attrs(id)?;
                            let base = out[k].len();
                            out[k].resize(base + widths[k], 0.0);
                            im2col_row(act, attrs, 0, p.y, p.x, &mut out[k][base..]);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut mats = Vec::with_capacity(requests.len());
    for (k, &w) in widths.iter().enumerate() {
        let mut data = Vec::with_capacity(positions.len() * w);
        for chunk in &chunks {
            data.extend_from_slice(&chunk[k]);
        }
        mats.push(Matrix::new(positions.len(), w, data)?);
    }
    Ok(mats)
}

/// Paired design and target rows for one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub layer_id: String,
    /// `N × c·k_h·k_w`, column block `i` is input channel `i`.
    pub x: Matrix,
    /// `N × n`, the layer's output with `bias` removed.
    pub y: Matrix,
    /// Bias subtracted from `y`.
    pub bias: Vec<f64>,
    pub positions: Vec<Position>,
    pub rng_seed: u64,
    /// `k_h·k_w`, the width of one channel block of `x`.
    pub block: usize,
}

impl SampleSet {
    pub fn channels(&self) -> usize {
        self.x.cols() / self.block
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Keeps the listed rows.
    pub fn subset(&self, rows: &[usize]) -> SampleSet {
        SampleSet {
            layer_id: self.layer_id.clone(),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            bias: self.bias.clone(),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            rng_seed: self.rng_seed,
            block: self.block,
        }
    }
}

/// Builds `(X, Y)` for `layer_id`: `X` from `current`, `Y` from `original`
/// (or from `current` when `target` says so), bias removed from `Y`.
pub fn build_sampleset(
    current: &Graph,
    original: &Graph,
    layer_id: &str,
    ds: &Dataset,
    positions: &PositionSet,
    target: TargetSource,
) -> Result<SampleSet> {
    let cur_attrs = current.conv_attrs(layer_id)?;
    let target_graph = match target {
        TargetSource::Original => original,
        TargetSource::Current => current,
    };
    let tgt_attrs = target_graph.conv_attrs(layer_id)?;
    let cur_shape = infer_shapes(current, current.input_shape(1))?[layer_id];
    let tgt_shape = infer_shapes(target_graph, target_graph.input_shape(1))?[layer_id];
    if cur_shape != tgt_shape {
        return Err(Error::Shape {
            node: layer_id.to_string(),
            reason: format!("current output {cur_shape} differs from target output {tgt_shape}"),
        });
    }
    if cur_attrs.groups != 1 {
        return Err(Error::Unsupported {
            node: layer_id.to_string(),
            reason: "sampling grouped convolutions is not supported".into(),
        });
    }
    let pos = &positions.positions;
    let (x, y) = if target == TargetSource::Current {
        let mut m = gather_rows(
            current,
            ds,
            pos,
            &[RowRequest::Patches(layer_id), RowRequest::Pixels(layer_id)],
        )?;
        let y = m.pop().expect("two");
        (m.pop().expect("two"), y)
    } else {
        let x = gather_rows(current, ds, pos, &[RowRequest::Patches(layer_id)])?.remove(0);
        let y = gather_rows(original, ds, pos, &[RowRequest::Pixels(layer_id)])?.remove(0);
        (x, y)
    };
    let bias = target_graph.conv_bias(layer_id)?;
    let mut y = y;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(&bias) {
            *v -= b;
        }
    }
    debug_assert_eq!(tgt_attrs.out_channels, y.cols());
    Ok(SampleSet {
        layer_id: layer_id.to_string(),
        x,
        y,
        bias,
        positions: pos.clone(),
        rng_seed: positions.seed,
        block: cur_attrs.kernel_area(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::tensor::{matmul_nt, rel_error};

    fn net() -> Graph {
        let mut b = GraphBuilder::new(3, 8, 8, 21);
        let c1 = b.conv("c1", "input", 6, 3, 1, 1);
        let r1 = b.relu("r1", &c1);
        let c2 = b.conv("c2", &r1, 5, 3, 1, 1);
        b.output(&c2);
        b.build().unwrap()
    }

    #[test]
    fn dataset_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pkt");
        let ds = Dataset::synthetic(2, 3, 8, 8, 1);
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.images, ds.images);
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pkt");
        fs::write(&p, b"NOPE\0\0\0\0").unwrap();
        assert!(load_dataset(&p).unwrap_err().to_string().contains("magic"));
        let mut bytes = DATASET_MAGIC.to_vec();
        bytes.extend(0u32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(load_dataset(&p).unwrap_err().to_string().contains("empty dataset"));

        let a = Activation::zeros(TensorShape::new(1, 3, 4, 4));
        let b = Activation::zeros(TensorShape::new(1, 3, 5, 4));
        assert!(Dataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn positions_count_and_determinism() {
        let s = TensorShape::new(1, 8, 14, 14);
        let p = sample_positions(5000, s, 10, 3);
        assert_eq!(p.len(), 50_000);
        assert_eq!(p, sample_positions(5000, s, 10, 3));
        assert_ne!(p.positions, sample_positions(5000, s, 10, 4).positions);
        let per: Vec<_> = p.positions.iter().filter(|q| q.image == 7).collect();
        assert!(per.windows(2).all(|w| (w[0].y, w[0].x) < (w[1].y, w[1].x)));
    }

    #[test]
    fn tiny_map_is_exhausted() {
        let p = sample_positions(4, TensorShape::new(1, 2, 1, 1), 10, 0);
        assert_eq!(p.len(), 4);
        assert!(p.positions.iter().all(|q| q.x == 0 && q.y == 0));
    }

    #[test]
    fn sampleset_reproduces_layer() {
        let g = net();
        let ds = Dataset::synthetic(6, 3, 8, 8, 2);
        let out = infer_shapes(&g, g.input_shape(1)).unwrap()["c2"];
        let pos = sample_positions(ds.len(), out, 7, 9);
        let s = build_sampleset(&g, &g, "c2", &ds, &pos, TargetSource::Original).unwrap();
        assert_eq!(s.len(), 42);
        assert_eq!(s.channels(), 6);
        let w = g.conv_weight_matrix("c2").unwrap();
        let approx = matmul_nt(&s.x, &w).unwrap();
        assert!(rel_error(&approx, &s.y).unwrap() <= 1e-5);
    }

    #[test]
    fn single_position_1x1_row_is_pixel() {
        let mut b = GraphBuilder::new(4, 3, 3, 5);
        let c = b.conv("c", "input", 2, 1, 1, 0);
        b.output(&c);
        let g = b.build().unwrap();
        let ds = Dataset::synthetic(1, 4, 3, 3, 6);
        let pos = PositionSet {
            seed: 0,
            positions: vec![Position { image: 0, y: 2, x: 1 }],
        };
        let s = build_sampleset(&g, &g, "c", &ds, &pos, TargetSource::Original).unwrap();
        let px: Vec<f64> = ds.images[0].pixel(0, 2, 1).into_iter().map(f64::from).collect();
        assert_eq!(s.x.row(0), &px[..]);
    }

    #[test]
    fn zeroed_channel_zeroes_its_block() {
        let mut b = GraphBuilder::new(3, 6, 6, 5);
        let c = b.conv("c", "input", 2, 3, 1, 1);
        b.output(&c);
        let g = b.build().unwrap();
        let mut ds = Dataset::synthetic(3, 3, 6, 6, 8);
        for img in &mut ds.images {
            for v in &mut img.data[36..72] {
                *v = 0.0;
            }
        }
        let pos = sample_positions(3, TensorShape::new(1, 2, 6, 6), 5, 1);
        let s = build_sampleset(&g, &g, "c", &ds, &pos, TargetSource::Original).unwrap();
        for r in 0..s.len() {
            let row = s.x.row(r);
            assert!(row[9..18].iter().all(|&v| v == 0.0));
        }
        assert!(s.x.select_cols(&(0..9).collect::<Vec<_>>()).max_abs() > 0.0);
    }

    #[test]
    fn out_of_range_position_is_rejected() {
        let g = net();
        let ds = Dataset::synthetic(1, 3, 8, 8, 2);
        let pos = PositionSet {
            seed: 0,
            positions: vec![Position { image: 0, y: 8, x: 0 }],
        };
        assert!(build_sampleset(&g, &g, "c2", &ds, &pos, TargetSource::Original).is_err());
        assert!(build_sampleset(&g, &g, "r1", &ds, &pos, TargetSource::Original).is_err());
    }
}
