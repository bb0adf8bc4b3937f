//! File formats: PPM images, PFM depth maps, view-pair index files, ASCII
//! PLY point clouds, and the on-disk dataset layout.
//!
//! A dataset directory holds `index.txt`, `images/<id>.ppm`,
//! `cams/<id>_cam.txt`, `depths/<id>.pfm` and `gt.ply`, with ids zero-padded
//! to eight digits. Invalid depth pixels are stored as 0.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mvstr_tensor::Tensor;
use nalgebra::Vector3;

use crate::camera::{unproject_depth, Camera, CameraView};
use crate::error::{Error, Result};
use crate::synth::RenderedView;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a Netpbm-style header into `count` whitespace-separated tokens and
/// returns them with the offset of the byte after the single separator that
/// ends the header.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    bytes.get(i)?.is_ascii_whitespace().then_some((tokens, i + 1))
}

/// Writes `[3, H, W]` values in `[0, 1]` as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Input(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = read(path)?;
    let bad = |m: &str| Error::format(path, m);
    let (tok, start) = header_tokens(&bytes, 4).ok_or_else(|| bad("truncated PPM header"))?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(bad("expected binary PPM with maxval 255"));
    }
    let w: usize = tok[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tok[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[start..];
    if body.len() != 3 * w * h {
        return Err(bad("pixel data length does not match the header"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = body[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Single-channel little-endian PFM, rows stored bottom-up.
pub fn write_pfm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let &[h, w] = map.shape() else {
        return Err(Error::Input(format!("PFM needs an [H, W] map, got {:?}", map.shape())));
    };
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for &v in &map.data()[row * w..(row + 1) * w] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = read(path)?;
    let bad = |m: &str| Error::format(path, m);
    let (tok, start) = header_tokens(&bytes, 4).ok_or_else(|| bad("truncated PFM header"))?;
    if tok[0] != "Pf" {
        return Err(bad("expected a single-channel 'Pf' file"));
    }
    let w: usize = tok[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tok[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tok[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 {
        return Err(bad("scale must be non-zero"));
    }
    let body = &bytes[start..];
    if body.len() != 4 * w * h {
        return Err(bad("pixel data length does not match the header"));
    }
    let mut data = vec![0.0; h * w];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - k / w, k % w);
        data[row * w + col] = v as f64;
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

/// One line of an index file: a reference view and its sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPair {
    pub reference: usize,
    pub sources: Vec<usize>,
}

pub fn format_index(pairs: &[ViewPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = write!(s, "ref {} srcs", p.reference);
        for id in &p.sources {
            let _ = write!(s, " {id}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_index(text: &str) -> Result<Vec<ViewPair>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Input(format!("index line {}: expected 'ref <id> srcs <id> ...', got '{line}'", n + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 3 || tok[0] != "ref" || tok[2] != "srcs" {
            return Err(bad());
        }
        let reference = tok[1].parse().map_err(|_| bad())?;
        let sources = tok[3..].iter().map(|t| t.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
        pairs.push(ViewPair { reference, sources });
    }
    Ok(pairs)
}

/// For each camera, the `n` others with the nearest centers (ties by id).
pub fn nearest_pairs(cameras: &[(usize, &Camera)], n: usize) -> Vec<ViewPair> {
    cameras
        .iter()
        .map(|&(id, cam)| {
            let c = cam.center();
            let mut others: Vec<(f64, usize)> = cameras
                .iter()
                .filter(|(other, _)| *other != id)
                .map(|(other, oc)| ((oc.center() - c).norm(), *other))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ViewPair {
                reference: id,
                sources: others.into_iter().take(n).map(|(_, id)| id).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_ply(&self) -> String {
        let mut s = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
            self.points.len()
        );
        if self.colors.is_some() {
            s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        s.push_str("end_header\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
            if let Some(c) = &self.colors {
                let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_ply(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Input(format!("PLY: {m}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing 'ply' magic".into()));
        }
        let (mut count, mut props, mut in_vertex) = (None, Vec::new(), false);
        for line in lines.by_ref() {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["format", "ascii", _] => {}
                ["format", f, ..] => return Err(bad(format!("unsupported format {f}"))),
                ["element", "vertex", n] => {
                    count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        let count = count.ok_or_else(|| bad("no vertex element".into()))?;
        let pos = |n: &str| props.iter().position(|p| p == n);
        let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(bad("vertex needs x, y, z".into())),
        };
        let rgb = match (pos("red"), pos("green"), pos("blue")) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        let mut points = Vec::with_capacity(count);
        let mut colors = rgb.map(|_| Vec::with_capacity(count));
        for n in 0..count {
            let line = lines.next().ok_or_else(|| bad(format!("expected {count} vertices, found {n}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number '{t}'"))))
                .collect::<Result<_>>()?;
            if vals.len() != props.len() {
                return Err(bad(format!("vertex {n} has {} values, expected {}", vals.len(), props.len())));
            }
            points.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some(cs), Some(idx)) = (colors.as_mut(), rgb) {
                cs.push(idx.map(|i| vals[i] as u8));
            }
        }
        Ok(Self { points, colors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.to_ply().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ply(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn view_name(id: usize) -> String {
    format!("{id:08}")
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{}.ppm", view_name(id)))
}

pub fn camera_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("cams").join(format!("{}_cam.txt", view_name(id)))
}

pub fn depth_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("depths").join(format!("{}.pfm", view_name(id)))
}

pub fn confidence_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("confidence").join(format!("{}.pfm", view_name(id)))
}

pub fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.txt")
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    write(path, camera.to_text().as_bytes())
}

pub fn write_index(path: &Path, pairs: &[ViewPair]) -> Result<()> {
    write(path, format_index(pairs).as_bytes())
}

pub fn read_index(path: &Path) -> Result<Vec<ViewPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_index(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes one rendered scene; each view lists its `num_sources` nearest
/// neighbours as sources.
pub fn export_dataset(views: &[RenderedView], dir: &Path, num_sources: usize) -> Result<()> {
    let mut gt = Vec::new();
    for v in views {
        write_ppm(&image_path(dir, v.view_id), &v.image)?;
        write_camera(&camera_path(dir, v.view_id), &v.camera)?;
        write_pfm(&depth_path(dir, v.view_id), &v.depth)?;
        let pts = unproject_depth(&v.camera, &v.depth)?;
        for (i, &ok) in v.valid.data().iter().enumerate() {
            if ok > 0.0 {
                let p = &pts.data()[3 * i..3 * i + 3];
                gt.push(Vector3::new(p[0], p[1], p[2]));
            }
        }
    }
    let cams: Vec<(usize, &Camera)> = views.iter().map(|v| (v.view_id, &v.camera)).collect();
    write_index(&index_path(dir), &nearest_pairs(&cams, num_sources))?;
    PointCloud::new(gt).save(&dir.join("gt.ply"))
}

/// One view loaded from disk.
#[derive(Debug, Clone)]
pub struct StoredView {
    pub view_id: usize,
    pub image: Tensor<f64>,
    pub camera: Camera,
    /// Ground-truth or estimated depth, 0 where invalid.
    pub depth: Option<Tensor<f64>>,
    pub confidence: Option<Tensor<f64>>,
}

impl StoredView {
    pub fn view<T: mvstr_tensor::Scalar>(&self) -> CameraView<T> {
        CameraView {
            image: self.image.cast(),
            camera: self.camera.clone(),
            view_id: self.view_id,
        }
    }
}

/// A scene directory: its index and every view it mentions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub pairs: Vec<ViewPair>,
    pub views: Vec<StoredView>,
}

impl Dataset {
    /// Loads the scene at `dir`. Images and depths are optional so that
    /// inference outputs (cameras and depths only) load the same way.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
        }
        let pairs = read_index(&index_path(dir))?;
        let mut ids: Vec<usize> = pairs
            .iter()
            .flat_map(|p| std::iter::once(p.reference).chain(p.sources.iter().copied()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let optional = |path: PathBuf, f: fn(&Path) -> Result<Tensor<f64>>| -> Result<Option<Tensor<f64>>> {
            if path.exists() {
                f(&path).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut views = Vec::with_capacity(ids.len());
        for id in ids {
            let camera = Camera::load(&camera_path(dir, id))?;
            let image = match optional(image_path(dir, id), read_ppm)? {
                Some(img) => img,
                None => Tensor::zeros(vec![3, 0, 0]),
            };
            views.push(StoredView {
                view_id: id,
                image,
                camera,
                depth: optional(depth_path(dir, id), read_pfm)?,
                confidence: optional(confidence_path(dir, id), read_pfm)?,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            pairs,
            views,
        })
    }

    pub fn view(&self, id: usize) -> Result<&StoredView> {
        self.views
            .iter()
            .find(|v| v.view_id == id)
            .ok_or_else(|| Error::Input(format!("{}: view {id} is not in the dataset", self.dir.display())))
    }

    /// Scene directories under `root`: `root` itself if it has an index,
    /// otherwise every immediate subdirectory that does, in name order.
    pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
        if index_path(root).exists() {
            return Ok(vec![root.to_path_buf()]);
        }
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.is_dir() && index_path(&path).exists() {
                dirs.push(path);
            }
        }
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Input(format!("{}: no index.txt here or in any subdirectory", root.display())));
        }
        Ok(dirs)
    }
}
