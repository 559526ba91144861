//! Graph files are pretty-printed JSON; weights go to a separate little-endian
//! blob:
//!
//! ```text
//! "PKW1"
//! repeated, in topo order (main tensor, then `<id>.bias`):
//!   u32 id_len | id bytes | u32 ndim | u32 dims[ndim] | f32 payload (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, LayerNode, Tensor};
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"PKW1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format_version: u32,
    nodes: Vec<LayerNode>,
    topo_order: Vec<String>,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Parses a graph file without weights: nodes and topological order.
pub fn read_graph_file(path: &Path) -> Result<(Vec<LayerNode>, Vec<String>)> {
    let bytes = read_file(path)?;
    let file: GraphFile = serde_json::from_slice(&bytes)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    Ok((file.nodes, file.topo_order))
}

pub fn load_graph(graph_path: &Path, weights_path: &Path) -> Result<Graph> {
    let (nodes, topo_order) = read_graph_file(graph_path)?;
    let weights = load_weights(weights_path)?;
    Graph::new(nodes, topo_order, weights)
}

pub fn save_graph(g: &Graph, graph_path: &Path, weights_path: &Path) -> Result<()> {
    let file = GraphFile {
        format_version: FORMAT_VERSION,
        nodes: g.nodes().cloned().collect(),
        topo_order: g.topo_order().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(graph_path, text)?;
    write_weights(g, weights_path)
}

pub fn write_weights(g: &Graph, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(WEIGHT_MAGIC)?;
    for key in g.weight_keys() {
        let t = &g.weights()[&key];
        out.write_all(&(key.len() as u32).to_le_bytes())?;
        out.write_all(key.as_bytes())?;
        out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Parse(format!("truncated blob at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Parse("payload size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn dims(&mut self) -> Result<Vec<usize>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Parse(format!("implausible ndim {ndim}")));
        }
        (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect()
    }
}

pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes);
    if cur.take(4).ok() != Some(&WEIGHT_MAGIC[..]) {
        return Err(Error::Parse("bad weight blob magic".into()));
    }
    let mut weights = BTreeMap::new();
    while !cur.at_end() {
        let len = cur.u32()? as usize;
        let key = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Parse("weight id is not UTF-8".into()))?
            .to_string();
        let dims = cur.dims()?;
        let numel = dims.iter().product();
        let data = cur.f32s(numel)?;
        if weights.insert(key.clone(), Tensor::new(dims, data)).is_some() {
            return Err(Error::Parse(format!("duplicate weight `{key}`")));
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn small() -> Graph {
        let mut b = GraphBuilder::new(3, 6, 6, 7);
        let c = b.conv("conv", "input", 4, 3, 1, 1);
        let r = b.relu("relu", &c);
        b.output(&r);
        b.build().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (gp, wp) = (dir.path().join("g.json"), dir.path().join("g.pkw"));
        let g = small();
        save_graph(&g, &gp, &wp).unwrap();
        let back = load_graph(&gp, &wp).unwrap();
        assert_eq!(back, g);
        for (k, t) in g.weights() {
            let bits: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u32> = back.weights()[k].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
    }

    #[test]
    fn weightless_graph_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (gp, wp) = (dir.path().join("g.json"), dir.path().join("g.pkw"));
        let mut b = GraphBuilder::new(2, 4, 4, 0);
        let r = b.relu("relu", "input");
        let a = b.add("sum", &r, "input");
        b.output(&a);
        save_graph(&b.build().unwrap(), &gp, &wp).unwrap();
        assert_eq!(fs::read(&wp).unwrap(), WEIGHT_MAGIC);
    }

    #[test]
    fn overwrite_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let (gp, wp) = (dir.path().join("g.json"), dir.path().join("g.pkw"));
        fs::write(&gp, "garbage that is much longer than nothing at all ...").unwrap();
        fs::write(&wp, vec![0u8; 100_000]).unwrap();
        let g = small();
        save_graph(&g, &gp, &wp).unwrap();
        assert_eq!(load_graph(&gp, &wp).unwrap(), g);
    }

    #[test]
    fn wrong_blob_length_is_a_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let (gp, wp) = (dir.path().join("g.json"), dir.path().join("g.pkw"));
        let g = small();
        save_graph(&g, &gp, &wp).unwrap();

        // Rewrite the conv tensor with one element missing.
        let mut blob = WEIGHT_MAGIC.to_vec();
        for key in g.weight_keys() {
            let t = &g.weights()[&key];
            let data = if key == "conv" { &t.data[1..] } else { &t.data[..] };
            blob.extend((key.len() as u32).to_le_bytes());
            blob.extend(key.as_bytes());
            blob.extend(1u32.to_le_bytes());
            blob.extend((data.len() as u32).to_le_bytes());
            for v in data {
                blob.extend(v.to_le_bytes());
            }
        }
        fs::write(&wp, blob).unwrap();
        let err = load_graph(&gp, &wp).unwrap_err();
        assert!(matches!(err, Error::WeightSize { ref key, .. } if key == "conv"), "{err}");
    }

    #[test]
    fn dangling_and_cycle_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("w.pkw");
        fs::write(&wp, WEIGHT_MAGIC).unwrap();

        let dangling = r#"{"format_version":1,"topo_order":["input","r","output"],"nodes":[
            {"id":"input","inputs":[],"kind":"Input","channels":1,"height":2,"width":2},
            {"id":"r","inputs":["nope"],"kind":"ReLU"},
            {"id":"output","inputs":["r"],"kind":"Output"}]}"#;
        let gp = dir.path().join("d.json");
        fs::write(&gp, dangling).unwrap();
        assert!(matches!(load_graph(&gp, &wp), Err(Error::DanglingInput { .. })));

        let cyclic = r#"{"format_version":1,"topo_order":["input","a","b","s","output"],"nodes":[
            {"id":"input","inputs":[],"kind":"Input","channels":1,"height":2,"width":2},
            {"id":"a","inputs":["b"],"kind":"ReLU"},
            {"id":"b","inputs":["a"],"kind":"ReLU"},
            {"id":"s","inputs":["input","b"],"kind":"Add"},
            {"id":"output","inputs":["s"],"kind":"Output"}]}"#;
        fs::write(&gp, cyclic).unwrap();
        assert!(matches!(load_graph(&gp, &wp), Err(Error::Cycle(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_graph(Path::new("/nonexistent/g.json"), Path::new("/nonexistent/w")).unwrap_err();
        assert!(err.to_string().contains("file not found"));
    }
}
