use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a raster holds; recorded in the on-disk sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Displacement,
    Tension,
    Albedo,
    Normal,
    Image,
    Mask,
    Other,
}

/// JSON sidecar stored next to a raw float raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_max: Option<f64>,
}

/// Row-major W×H×C grid of finite scalars, top row first.
///
/// Texel `(x, y)` has its center at `((x + 0.5) / W, (y + 0.5) / H)` in UV
/// space. Images and masks reuse the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct UvField {
    width: usize,
    height: usize,
    channels: usize,
    kind: FieldKind,
    data: Vec<f64>,
}

impl UvField {
    pub fn zeros(width: usize, height: usize, channels: usize, kind: FieldKind) -> Self {
        Self {
            width,
            height,
            channels,
            kind,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, kind: FieldKind, v: f64) -> Self {
        Self {
            width,
            height,
            channels,
            kind,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        kind: FieldKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty field {width}x{height}x{channels}"
            )));
        }
        crate::error::check_len("field data", width * height * channels, data.len())?;
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("field texel entry {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            kind,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn set_kind(&mut self, kind: FieldKind) {
        self.kind = kind;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &UvField) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &UvField, what: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument(format!(
                "{what}: resolution mismatch {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    /// Bilinear sample of channel `c` with clamp-to-edge addressing.
    pub fn sample_channel(&self, u: f64, v: f64, c: usize) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "uv ({u}, {v}) outside [0,1]"
            )));
        }
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {c} of {}", self.channels)));
        }
        Ok(self.bilinear(u, v, c))
    }

    /// Bilinear sample of all channels.
    pub fn sample_uv(&self, u: f64, v: f64) -> Result<Vec<f64>> {
        (0..self.channels)
            .map(|c| self.sample_channel(u, v, c))
            .collect()
    }

    fn bilinear(&self, u: f64, v: f64, c: usize) -> f64 {
        let x = u * self.width as f64 - 0.5;
        let y = v * self.height as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp_x = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |i: f64| (i.max(0.0) as usize).min(self.height - 1);
        let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
        let top = self.get(xa, ya, c) * (1.0 - fx) + self.get(xb, ya, c) * fx;
        let bottom = self.get(xa, yb, c) * (1.0 - fx) + self.get(xb, yb, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Writes `path` as little-endian f32 and `path.json` beside it.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        self.save_raw_with(path, None)
    }

    fn save_raw_with(&self, path: &Path, png_range: Option<(f64, f64)>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = FieldSidecar {
            width: self.width,
            height: self.height,
            channels: self.channels,
            kind: self.kind,
            png_min: png_range.map(|r| r.0),
            png_max: png_range.map(|r| r.1),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
        fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    /// Writes the raw raster plus a 16-bit PNG; the PNG's linear
    /// `[min, max]` mapping is recorded in the sidecar.
    pub fn save_with_png(&self, raw: &Path, png_path: &Path) -> Result<()> {
        let range = self.write_png16(png_path)?;
        self.save_raw_with(raw, Some(range))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: FieldSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = sidecar.width * sidecar.height * sidecar.channels * 4;
        if bytes.len() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_data(
            sidecar.width,
            sidecar.height,
            sidecar.channels,
            sidecar.kind,
            data,
        )
    }

    /// 16-bit PNG (gray for one channel, RGB for three) with values mapped
    /// linearly from `[min, max]`. Returns the range used.
    pub fn write_png16(&self, path: &Path) -> Result<(f64, f64)> {
        let (lo, hi) = self.min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let color = self.png_color()?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for &x in &self.data {
            let q = (((x - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        self.encode_png(path, color, png::BitDepth::Sixteen, &buf)?;
        Ok((lo, hi))
    }

    /// 8-bit PNG of linear values clamped to [0, 1].
    pub fn write_png8(&self, path: &Path) -> Result<()> {
        let color = self.png_color()?;
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        self.encode_png(path, color, png::BitDepth::Eight, &buf)
    }

    fn png_color(&self) -> Result<png::ColorType> {
        match self.channels {
            1 => Ok(png::ColorType::Grayscale),
            3 => Ok(png::ColorType::Rgb),
            c => Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        }
    }

    fn encode_png(
        &self,
        path: &Path,
        color: png::ColorType,
        depth: png::BitDepth,
        buf: &[u8],
    ) -> Result<()> {
        let png_err = |e: png::EncodingError| Error::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        {
            let mut enc = png::Encoder::new(&mut writer, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut w = enc.write_header().map_err(png_err)?;
            w.write_image_data(buf).map_err(png_err)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads an 8- or 16-bit gray/RGB PNG into a field scaled to [0, 1].
    pub fn load_png(path: &Path, kind: FieldKind) -> Result<Self> {
        let png_err = |m: String| Error::Png {
            path: path.to_path_buf(),
            message: m,
        };
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| png_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| png_err(e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(png_err(format!("unsupported color type {other:?}"))),
        };
        let data: Vec<f64> = match info.bit_depth {
            png::BitDepth::Eight => buf[..info.buffer_size()]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            png::BitDepth::Sixteen => buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
                .collect(),
            other => return Err(png_err(format!("unsupported bit depth {other:?}"))),
        };
        Self::from_data(info.width as usize, info.height as usize, channels, kind, data)
    }
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(w: usize, h: usize, data: Vec<f64>) -> UvField {
        UvField::from_data(w, h, 1, FieldKind::Other, data).unwrap()
    }

    // Straight-line bilinear evaluation with explicit clamping.
    fn oracle(f: &UvField, u: f64, v: f64) -> f64 {
        let (w, h) = (f.width() as i64, f.height() as i64);
        let px = u * w as f64 - 0.5;
        let py = v * h as f64 - 0.5;
        let ix = px.floor() as i64;
        let iy = py.floor() as i64;
        let tx = px - ix as f64;
        let ty = py - iy as f64;
        let at = |x: i64, y: i64| f.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize, 0);
        (1.0 - tx) * (1.0 - ty) * at(ix, iy)
            + tx * (1.0 - ty) * at(ix + 1, iy)
            + (1.0 - tx) * ty * at(ix, iy + 1)
            + tx * ty * at(ix + 1, iy + 1)
    }

    #[test]
    fn constant_field_samples_constant() {
        let f = UvField::filled(5, 7, 1, FieldKind::Other, 2.5);
        for &(u, v) in &[(0.0, 0.0), (1.0, 1.0), (0.3, 0.9), (0.5, 0.5)] {
            assert_eq!(f.sample_channel(u, v, 0).unwrap(), 2.5);
        }
    }

    #[test]
    fn midpoint_of_ramp() {
        let f = field(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(f.sample_channel(0.5, 0.5, 0).unwrap(), 0.5);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = field(8, 8, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
        for _ in 0..500 {
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let got = f.sample_channel(u, v, 0).unwrap();
            assert!((got - oracle(&f, u, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_on_texel_centers() {
        let f = field(4, 3, (0..12).map(|i| i as f64 * 0.25).collect());
        for y in 0..3 {
            for x in 0..4 {
                let u = (x as f64 + 0.5) / 4.0;
                let v = (y as f64 + 0.5) / 3.0;
                assert_eq!(f.sample_channel(u, v, 0).unwrap(), f.get(x, y, 0));
            }
        }
    }

    #[test]
    fn rejects_out_of_range_uv() {
        let f = field(2, 2, vec![0.0; 4]);
        assert!(f.sample_channel(1.01, 0.5, 0).is_err());
        assert!(f.sample_channel(0.5, -0.1, 0).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = UvField::from_data(3, 2, 1, FieldKind::Tension, vec![0.5, -1.0, 2.0, 0.0, 0.25, 8.0])
            .unwrap();
        let raw = dir.path().join("t.f32");
        f.save_with_png(&raw, &dir.path().join("t.png")).unwrap();
        let g = UvField::load_raw(&raw).unwrap();
        assert_eq!(f, g);
        let side: FieldSidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&raw)).unwrap()).unwrap();
        assert_eq!(side.png_min, Some(-1.0));
        assert_eq!(side.png_max, Some(8.0));
        let png = UvField::load_png(&dir.path().join("t.png"), FieldKind::Other).unwrap();
        assert_eq!(png.get(2, 1, 0), 1.0);
        assert_eq!(png.get(1, 0, 0), 0.0);
    }

    proptest! {
        #[test]
        fn sampling_is_lipschitz(seed in 0u64..1000, u in 0.0f64..0.99, v in 0.0f64..1.0, eps in 1e-6f64..0.01) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (6usize, 5usize);
            let f = field(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut max_diff = 0.0f64;
            for y in 0..h {
                for x in 0..w - 1 {
                    max_diff = max_diff.max((f.get(x + 1, y, 0) - f.get(x, y, 0)).abs());
                }
            }
            let a = f.sample_channel(u, v, 0).unwrap();
            let b = f.sample_channel(u + eps, v, 0).unwrap();
            prop_assert!((a - b).abs() <= max_diff * w as f64 * eps + 1e-12);
        }
    }
}
