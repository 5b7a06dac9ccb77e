//! RGB images and file I/O (binary PPM natively, PNG behind a feature).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved H x W x 3 image with channel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// 8-bit quantization: round(255 * v) with clamping.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(RgbImage { width, height, data })
    }
}

/// Write a binary PPM (P6, maxval 255).
pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let mut out = Vec::with_capacity(image.width * image.height * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.extend_from_slice(&image.to_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255). Other netpbm kinds (including the
/// single-channel P5) are rejected.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let bytes = fs::read(&path)?;
    parse_ppm(&bytes).map_err(|m| Error::Image(format!("{}: {m}", path.as_ref().display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        // skip whitespace and '#' comment lines
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = token(&mut pos)?;
    if magic != "P6" {
        return Err(format!("not a binary RGB PPM (magic {magic:?}, expected P6)"));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!("truncated pixel data: need {need} bytes, have {}", bytes.len() - pos));
    }
    RgbImage::from_bytes(width, height, &bytes[pos..pos + need]).map_err(|e| e.to_string())
}

/// Load an image by extension: `.ppm` natively, `.png` when the `png`
/// feature is enabled.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => read_png(path),
        other => Err(Error::Image(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<RgbImage> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported PNG color type {other:?} (need 3-channel RGB)",
                path.display()
            )))
        }
    };
    RgbImage::from_bytes(w, h, &rgb)
}
