//! File formats: PFM images, Radiance HDR (RGBE) import, ASCII PLY and OBJ meshes.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{contract, Result};
use crate::{Error, Rgb, Vec3};

/// Row-major HDR image. `pixels[y * width + x]`, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Writes a color PFM (little-endian, scanlines bottom-up per the format spec).
pub fn write_pfm(path: &Path, img: &HdrImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    // PFM stores the bottom scanline first.
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let p = img.at(x, y);
            for c in p {
                f.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a PFM image (color "PF" or grayscale "Pf", either endianness).
pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    let data = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Io("truncated PFM header".into()));
        }
        let s = String::from_utf8_lossy(&data[start..pos]).into_owned();
        pos += 1; // single whitespace after each token
        Ok(s)
    };
    let magic = token()?;
    let color = match magic.as_str() {
        "PF" => true,
        "Pf" => false,
        _ => return Err(Error::Io(format!("not a PFM file (magic {magic:?})"))),
    };
    let width: usize = token()?.parse().map_err(|_| Error::Io("bad PFM width".into()))?;
    let height: usize = token()?.parse().map_err(|_| Error::Io("bad PFM height".into()))?;
    let scale: f64 = token()?.parse().map_err(|_| Error::Io("bad PFM scale".into()))?;
    let little_endian = scale < 0.0;
    let channels = if color { 3 } else { 1 };
    let need = width * height * channels * 4;
    if data.len() < pos + need {
        return Err(Error::Io("truncated PFM data".into()));
    }
    let mut img = HdrImage::new(width, height);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            let mut px = [0.0f64; 3];
            for c in 0..channels {
                let b: [u8; 4] = data[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                px[c] = v as f64;
                off += 4;
            }
            if !color {
                px[1] = px[0];
                px[2] = px[0];
            }
            img.set(x, y, px);
        }
    }
    Ok(img)
}

/// Reads a Radiance HDR (RGBE) file, returning linear radiance.
pub fn read_hdr(path: &Path) -> Result<HdrImage> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.starts_with("#?") {
        return Err(Error::Io("not a Radiance HDR file".into()));
    }
    // Header ends at a blank line; the resolution line follows.
    loop {
        line.clear();
        r.read_line(&mut line)?;
        if line.trim().is_empty() {
            break;
        }
    }
    line.clear();
    r.read_line(&mut line)?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(Error::Io(format!("unsupported HDR resolution line {line:?}")));
    }
    let height: usize = parts[1].parse().map_err(|_| Error::Io("bad HDR height".into()))?;
    let width: usize = parts[3].parse().map_err(|_| Error::Io("bad HDR width".into()))?;

    let mut img = HdrImage::new(width, height);
    let mut scanline = vec![[0u8; 4]; width];
    for y in 0..height {
        read_rgbe_scanline(&mut r, &mut scanline)?;
        for x in 0..width {
            img.set(x, y, rgbe_to_rgb(scanline[x]));
        }
    }
    Ok(img)
}

fn read_rgbe_scanline<R: Read>(r: &mut R, out: &mut [[u8; 4]]) -> Result<()> {
    let width = out.len();
    let mut head = [0u8; 4];
    r.read_exact(&mut head)?;
    let rle = head[0] == 2 && head[1] == 2 && ((head[2] as usize) << 8 | head[3] as usize) == width;
    if !rle {
        // Flat scanline; the first pixel was already consumed.
        out[0] = head;
        for px in out.iter_mut().skip(1) {
            r.read_exact(px)?;
        }
        return Ok(());
    }
    for c in 0..4 {
        let mut x = 0usize;
        while x < width {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            if b[0] > 128 {
                let count = (b[0] - 128) as usize;
                r.read_exact(&mut b)?;
                for _ in 0..count {
                    if x >= width {
                        return Err(Error::Io("RGBE run overflow".into()));
                    }
                    out[x][c] = b[0];
                    x += 1;
                }
            } else {
                let count = b[0] as usize;
                for _ in 0..count {
                    if x >= width {
                        return Err(Error::Io("RGBE run overflow".into()));
                    }
                    r.read_exact(&mut b)?;
                    out[x][c] = b[0];
                    x += 1;
                }
            }
        }
    }
    Ok(())
}

fn rgbe_to_rgb(p: [u8; 4]) -> Rgb {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = (2.0f64).powi(p[3] as i32 - 128 - 8);
    [p[0] as f64 * f, p[1] as f64 * f, p[2] as f64 * f]
}

/// Raw mesh data as read from disk, before validation.
#[derive(Debug, Clone, Default)]
pub struct MeshData {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Loads a mesh from ASCII PLY or OBJ, dispatched on extension.
pub fn read_mesh(path: &Path) -> Result<MeshData> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        Some("obj") => read_obj(path),
        other => Err(Error::Io(format!("unsupported mesh extension {other:?}"))),
    }
}

/// Reads an ASCII PLY file with vertex (x, y, z) and face elements.
/// Faces with more than 3 vertices are fan-triangulated.
pub fn read_ply(path: &Path) -> Result<MeshData> {
    let file = std::fs::read_to_string(path)?;
    let mut lines = file.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Io("missing ply magic".into()));
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element = String::new();
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] | ["comment", ..] | [] => {}
            ["format", ..] => return Err(Error::Io("only ascii PLY is supported".into())),
            ["element", "vertex", n] => {
                n_vertices = n.parse().map_err(|_| Error::Io("bad vertex count".into()))?;
                current_element = "vertex".into();
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| Error::Io("bad face count".into()))?;
                current_element = "face".into();
            }
            ["element", ..] => current_element = "other".into(),
            ["property", ..] if current_element == "vertex" => {
                vertex_props.push(toks.last().unwrap().to_string());
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => {}
        }
    }
    let ix = vertex_props.iter().position(|p| p == "x");
    let iy = vertex_props.iter().position(|p| p == "y");
    let iz = vertex_props.iter().position(|p| p == "z");
    let (ix, iy, iz) = match (ix, iy, iz) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Io("PLY vertex element lacks x/y/z".into())),
    };
    let mut mesh = MeshData::default();
    for _ in 0..n_vertices {
        let line = lines.next().ok_or_else(|| Error::Io("truncated PLY vertices".into()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Io("bad PLY vertex".into())))
            .collect::<Result<_>>()?;
        if vals.len() < vertex_props.len() {
            return Err(Error::Io("short PLY vertex line".into()));
        }
        mesh.vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
    }
    for _ in 0..n_faces {
        let line = lines.next().ok_or_else(|| Error::Io("truncated PLY faces".into()))?;
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Io("bad PLY face".into())))
            .collect::<Result<_>>()?;
        // Trailing per-face properties (e.g. colors) are allowed and ignored.
        if vals.is_empty() || vals.len() < vals[0] + 1 {
            return Err(Error::Io("bad PLY face list".into()));
        }
        for i in 2..vals[0] {
            mesh.triangles.push([vals[1], vals[i], vals[i + 1]]);
        }
    }
    Ok(mesh)
}

/// Reads an OBJ file (v/f records only; texture and normal indices ignored).
pub fn read_obj(path: &Path) -> Result<MeshData> {
    let file = std::fs::read_to_string(path)?;
    let mut mesh = MeshData::default();
    for line in file.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["v", x, y, z, ..] => {
                let p = |t: &str| t.parse::<f64>().map_err(|_| Error::Io("bad OBJ vertex".into()));
                mesh.vertices.push(Vec3::new(p(x)?, p(y)?, p(z)?));
            }
            ["f", rest @ ..] if rest.len() >= 3 => {
                let idx = |t: &str| -> Result<usize> {
                    let first = t.split('/').next().unwrap();
                    let i: i64 = first.parse().map_err(|_| Error::Io("bad OBJ face index".into()))?;
                    if i < 1 {
                        return Err(Error::Io("negative OBJ indices unsupported".into()));
                    }
                    Ok(i as usize - 1)
                };
                let base = idx(rest[0])?;
                for w in 1..rest.len() - 1 {
                    mesh.triangles.push([base, idx(rest[w])?, idx(rest[w + 1])?]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Writes an ASCII PLY with optional per-vertex colors (0-255) and optional
/// per-face colors; used for segmentation and texture inspection exports.
pub fn write_ply(
    path: &Path,
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    vertex_colors: Option<&[Rgb]>,
    face_colors: Option<&[Rgb]>,
) -> Result<()> {
    if let Some(c) = vertex_colors {
        if c.len() != vertices.len() {
            return Err(contract("vertex color count mismatch"));
        }
    }
    if let Some(c) = face_colors {
        if c.len() != triangles.len() {
            return Err(contract("face color count mismatch"));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply\nformat ascii 1.0")?;
    writeln!(f, "element vertex {}", vertices.len())?;
    writeln!(f, "property float x\nproperty float y\nproperty float z")?;
    if vertex_colors.is_some() {
        writeln!(f, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(f, "element face {}", triangles.len())?;
    writeln!(f, "property list uchar int vertex_indices")?;
    if face_colors.is_some() {
        writeln!(f, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(f, "end_header")?;
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, v) in vertices.iter().enumerate() {
        write!(f, "{} {} {}", v.x, v.y, v.z)?;
        if let Some(colors) = vertex_colors {
            let c = colors[i];
            write!(f, " {} {} {}", quant(c[0]), quant(c[1]), quant(c[2]))?;
        }
        writeln!(f)?;
    }
    for (i, t) in triangles.iter().enumerate() {
        write!(f, "3 {} {} {}", t[0], t[1], t[2])?;
        if let Some(colors) = face_colors {
            let c = colors[i];
            write!(f, " {} {} {}", quant(c[0]), quant(c[1]), quant(c[2]))?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = HdrImage::new(3, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [i as f64 * 0.5, i as f64, 100.0 + i as f64];
        }
        let path = dir.path().join("t.pfm");
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ply_round_trip_with_quad_triangulation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        let mesh = read_ply(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn obj_reader_parses_slashed_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n").unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn hdr_reader_flat_scanlines() {
        // Hand-built 2x1 non-RLE RGBE file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hdr");
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 2\n".to_vec();
        bytes.extend_from_slice(&[128, 128, 128, 129]); // (1,1,1)
        bytes.extend_from_slice(&[0, 0, 0, 0]); // black
        std::fs::write(&path, bytes).unwrap();
        let img = read_hdr(&path).unwrap();
        assert_eq!(img.width, 2);
        assert!((img.at(0, 0)[0] - 1.0).abs() < 1e-9);
        assert_eq!(img.at(1, 0), [0.0; 3]);
    }
}
