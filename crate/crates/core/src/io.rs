//! Readers and writers for clouds, flows, weights, grids and manifests.
//!
//! Clouds and flows are stored as `f32` on disk and widened to `f64` on
//! load. The format follows the file extension:
//!
//! * `.xyz`: UTF-8 text, one `x y z` triple per line.
//! * `.pcf`: `"PCF1"`, `u64` count, then `count * 3` little-endian `f32` (points).
//! * `.flw`: `"FLW1"`, same layout as `.pcf` (flow).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embed::PeatWeights;
use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point, PointCloud};
use crate::loss::DistanceTransformGrid;

const POINTS_MAGIC: &[u8; 4] = b"PCF1";
const FLOW_MAGIC: &[u8; 4] = b"FLW1";
const PEAT_MAGIC: &[u8; 4] = b"PEAT";
const GRID_MAGIC: &[u8; 4] = b"DTG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Text,
    Binary(&'static [u8; 4]),
}

fn format_for(path: &Path, binary_ext: &str, magic: &'static [u8; 4]) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("xyz") => Ok(Format::Text),
        Some(e) if e.eq_ignore_ascii_case(binary_ext) => Ok(Format::Binary(magic)),
        _ => Err(Error::InvalidConfig(format!(
            "{}: unsupported extension, expected .xyz or .{binary_ext}",
            path.display()
        ))),
    }
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let rows = read_triples(path, format_for(path, "pcf", POINTS_MAGIC)?)?;
    PointCloud::new(rows)
}

pub fn write_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    write_triples(path, format_for(path, "pcf", POINTS_MAGIC)?, cloud.points())
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let rows = read_triples(path, format_for(path, "flw", FLOW_MAGIC)?)?;
    FlowField::new(rows)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    write_triples(path, format_for(path, "flw", FLOW_MAGIC)?, flow.vectors())
}

fn read_triples(path: &Path, format: Format) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Text => parse_text(path, &bytes),
        Format::Binary(magic) => parse_binary(path, &bytes, magic),
    }
}

fn parse_text(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(path, format!("byte {}", e.valid_up_to()), "invalid UTF-8"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("line {}", i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                loc(),
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let mut p = Point::zeros();
        for (a, f) in fields.iter().enumerate() {
            p[a] = f
                .parse::<f64>()
                .map_err(|e| Error::parse(path, loc(), format!("field {}: {e}", a + 1)))?;
        }
        out.push(p);
    }
    Ok(out)
}

fn parse_binary(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<Vec<Point>> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(magic)?;
    let count = r.u64()?;
    let need = count.checked_mul(12).filter(|n| *n <= (bytes.len() - r.pos) as u64);
    if need.is_none() {
        return Err(Error::parse(
            path,
            format!("byte {}", r.pos),
            format!("truncated: header promises {count} triples"),
        ));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(Point::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64));
    }
    r.finish()?;
    Ok(out)
}

fn write_triples(path: &Path, format: Format, rows: &[Point]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        match format {
            Format::Text => {
                for p in rows {
                    writeln!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
                }
            }
            Format::Binary(magic) => {
                w.write_all(magic)?;
                w.write_all(&(rows.len() as u64).to_le_bytes())?;
                for p in rows {
                    for c in p.iter() {
                        w.write_all(&(*c as f32).to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::parse(self.path, format!("byte {}", self.pos), "unexpected end of file")
        })?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take::<4>()?;
        if &found != expected {
            return Err(Error::parse(
                self.path,
                "byte 0",
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(&found)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.path,
                format!("byte {}", self.pos),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Reads attention weights: `"PEAT"`, `u32` d_pe, d_k, d_v, then `W_Q`
/// (d_pe x d_k), `W_K` (d_pe x d_k), `W_V` (d_pe x d_v) as row-major
/// little-endian `f32`.
pub fn read_peat_weights(path: impl AsRef<Path>) -> Result<PeatWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes);
    r.magic(PEAT_MAGIC)?;
    let (d_pe, d_k, d_v) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut read = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let vals = (0..rows * cols)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    };
    let w_q = read(d_pe, d_k)?;
    let w_k = read(d_pe, d_k)?;
    let w_v = read(d_pe, d_v)?;
    r.finish()?;
    PeatWeights::new(w_q, w_k, w_v)
}

pub fn write_peat_weights(path: impl AsRef<Path>, weights: &PeatWeights) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(PEAT_MAGIC);
    for d in [weights.d_pe(), weights.d_k(), weights.d_v()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for m in [&weights.w_q, &weights.w_k, &weights.w_v] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                buf.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Debug dump: `"DTG1"`, 3 x `u32` dims, 3 x `f32` origin, `f32` spacing,
/// then the distances as `f32`, x fastest.
pub fn write_dt_grid(path: impl AsRef<Path>, grid: &DistanceTransformGrid) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        for d in grid.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for c in grid.origin().iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        w.write_all(&(grid.spacing() as f32).to_le_bytes())?;
        for v in grid.values() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Contents of a grid dump, at the stored `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DtGridDump {
    pub dims: [u32; 3],
    pub origin: [f32; 3],
    pub spacing: f32,
    pub values: Vec<f32>,
}

pub fn read_dt_grid(path: impl AsRef<Path>) -> Result<DtGridDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(path, &bytes);
    r.magic(GRID_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let spacing = r.f32()?;
    let n = dims.iter().map(|&d| d as usize).product::<usize>();
    let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(DtGridDump {
        dims,
        origin,
        spacing,
        values,
    })
}

/// ASCII PLY with one coloured vertex per point.
///
/// Colour encodes the flow projected onto the xy-plane: hue is
/// `atan2(f_y, f_x)` on the HSV wheel (0 rad is red, pi/2 yellow-green,
/// pi cyan), and strength `s = min(|f| / f95, 1)` blends from neutral gray
/// (128, 128, 128) at `s = 0` to the fully saturated hue at `s = 1`. `f95`
/// is the 95th-percentile flow magnitude of the field.
pub fn export_ply(cloud: &PointCloud, flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    flow.check_len(cloud.len(), "export_ply flow")?;
    let path = path.as_ref();
    let colors = flow_colors(flow);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "comment colour: hue = atan2(fy, fx) (0 rad red), strength = min(|f|/p95(|f|), 1), gray 128 at zero flow")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        for c in ["x", "y", "z"] {
            writeln!(w, "property float {c}")?;
        }
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}")?;
        }
        writeln!(w, "end_header")?;
        for (p, [r, g, b]) in cloud.points().iter().zip(&colors) {
            writeln!(w, "{} {} {} {r} {g} {b}", p.x as f32, p.y as f32, p.z as f32)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Per-vertex RGB used by [`export_ply`].
pub fn flow_colors(flow: &FlowField) -> Vec<[u8; 3]> {
    let mags: Vec<f64> = flow.vectors().iter().map(|f| f.norm()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let f95 = if sorted.is_empty() {
        0.0
    } else {
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1]
    };
    flow.vectors()
        .iter()
        .zip(&mags)
        .map(|(f, &m)| {
            let s = if m == 0.0 {
                0.0
            } else if f95 == 0.0 {
                1.0
            } else {
                (m / f95).min(1.0)
            };
            let hue = hue_rgb(f.y.atan2(f.x));
            let mut out = [0u8; 3];
            for c in 0..3 {
                out[c] = (128.0 + (hue[c] * 255.0 - 128.0) * s).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
        .collect()
}

/// Fully saturated, full-value HSV colour for an angle in radians.
fn hue_rgb(angle: f64) -> [f64; 3] {
    let h = angle.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Loads a JSON array of entries. Relative paths are resolved against the
    /// manifest's directory; every path must exist and ids must be unique.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| {
            Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut seen = std::collections::HashSet::new();
        for e in &mut entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::parse(path, format!("entry {:?}", e.id), "duplicate id"));
            }
            let resolve = |p: &mut PathBuf| -> Result<()> {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::parse(path, format!("entry {:?}", e.id), format!("missing file {}", p.display())));
                }
                Ok(())
            };
            let mut src = e.source.clone();
            resolve(&mut src)?;
            let mut tgt = e.target.clone();
            resolve(&mut tgt)?;
            let gt = match e.gt_flow.clone() {
                Some(mut g) => {
                    resolve(&mut g)?;
                    Some(g)
                }
                None => None,
            };
            e.source = src;
            e.target = tgt;
            e.gt_flow = gt;
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON document into `T`, reporting parse errors with line and column.
pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut s = GaussianStream::new(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point::new(s.next_normal() * 10.0, s.next_normal(), s.next_normal() * 3.0))
                .collect(),
        )
        .unwrap()
    }

    fn as_f32(p: &Point) -> Point {
        p.map(|c| c as f32 as f64)
    }

    #[test]
    fn binary_points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcf");
        let cloud = random_cloud(1000, 1);
        write_points(&path, &cloud).unwrap();
        let back = read_points(&path).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!(as_f32(a), *b);
        }
        write_points(&path, &back).unwrap();
        assert_eq!(read_points(&path).unwrap(), back);
    }

    #[test]
    fn text_points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xyz");
        let cloud = random_cloud(200, 2);
        write_points(&path, &cloud).unwrap();
        let back = read_points(&path).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!(as_f32(a), b.map(|c| c as f32 as f64));
        }
    }

    #[test]
    fn text_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.xyz");
        fs::write(&path, "1.0 2.0 3.0\n").unwrap();
        assert_eq!(read_points(&path).unwrap().points()[0], Point::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn two_fields_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.xyz");
        fs::write(&path, "1.0 2.0\n").unwrap();
        let err = read_points(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn zero_flow_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flw");
        let flow = FlowField::zeros(10);
        write_flow(&path, &flow).unwrap();
        assert_eq!(read_flow(&path).unwrap(), flow);

        let bad = dir.path().join("g.flw");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"PCF1");
        fs::write(&bad, bytes).unwrap();
        let err = read_flow(&bad).unwrap_err().to_string();
        assert!(err.contains("FLW1") && err.contains("PCF1"), "{err}");
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcf");
        write_points(&path, &random_cloud(5, 3)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_points(&path).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        fs::write(&path, longer).unwrap();
        assert!(read_points(&path).is_err());
    }

    #[test]
    fn unknown_extension_is_rejected() {
        assert!(matches!(read_points("x.bin"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn peat_weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.peat");
        let w = PeatWeights::random(8, 4, 5, 3).unwrap();
        write_peat_weights(&path, &w).unwrap();
        let back = read_peat_weights(&path).unwrap();
        assert_eq!((back.d_pe(), back.d_k(), back.d_v()), (8, 4, 5));
        assert_eq!(back.w_v[(7, 4)], w.w_v[(7, 4)] as f32 as f64);
        assert_eq!(back.w_q[(0, 3)], w.w_q[(0, 3)] as f32 as f64);
    }

    #[test]
    fn ply_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ply");
        let cloud = random_cloud(7, 4);
        export_ply(&cloud, &FlowField::zeros(7), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 7\n"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 7);
        assert!(body.iter().all(|l| l.ends_with(" 128 128 128")));

        let plus_x = FlowField::new(vec![Point::new(1.0, 0.0, 0.0); 7]).unwrap();
        assert!(flow_colors(&plus_x).iter().all(|c| *c == [255, 0, 0]));
        assert!(export_ply(&cloud, &FlowField::zeros(3), &path).is_err());
    }

    #[test]
    fn dt_dump_layout() {
        use crate::geometry::Aabb;
        use crate::loss::build_dt;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dtg");
        let t = PointCloud::from_rows(&[[0.5, 0.5, 0.5]]).unwrap();
        let g = build_dt(&t, &Aabb::new(Point::zeros(), Point::new(1.0, 0.5, 0.5)).unwrap(), 0.25).unwrap();
        write_dt_grid(&path, &g).unwrap();
        let d = read_dt_grid(&path).unwrap();
        assert_eq!(d.dims, [5, 3, 3]);
        assert_eq!(d.spacing, 0.25);
        assert_eq!(fs::metadata(&path).unwrap().len(), 4 + 12 + 12 + 4 + 4 * 45);
        assert_eq!(d.values[g.index(1, 2, 0)], g.value(1, 2, 0) as f32);
    }

    #[test]
    fn manifest_resolution_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(4, 5);
        write_points(dir.path().join("s.pcf"), &cloud).unwrap();
        write_points(dir.path().join("t.pcf"), &cloud).unwrap();
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                id: "a".into(),
                source: "s.pcf".into(),
                target: "t.pcf".into(),
                gt_flow: None,
            }],
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.entries[0].source, dir.path().join("s.pcf"));

        let mut dup = m.clone();
        dup.entries.push(dup.entries[0].clone());
        dup.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).is_err());

        let mut missing = m;
        missing.entries[0].target = "nope.pcf".into();
        missing.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
