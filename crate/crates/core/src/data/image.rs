//! 8-bit frames, floating-point images, binary PPM I/O and square cropping.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB frame, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Floating-point RGB image with values in `[0, 1]`, row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.pixels);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Frame> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&bytes).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        })
    }

    fn parse_ppm(bytes: &[u8]) -> std::result::Result<Frame, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(format!("unsupported magic `{}`", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(format!("raster truncated: need {need} bytes"));
        }
        Ok(Frame {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    /// Quantizes to 8 bits with rounding, clipping to `[0, 1]` first.
    pub fn to_frame(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            pixels: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    /// Square crop of side `side` (pixels, may be fractional) centered at
    /// `(cx, cy)`, bilinearly resampled to `out_size x out_size`. Samples
    /// falling outside the image take `pad`.
    pub fn crop_square(&self, cx: f64, cy: f64, side: f64, out_size: usize, pad: [f64; 3]) -> Image {
        let x0 = cx - 0.5 * side;
        let y0 = cy - 0.5 * side;
        let step = side / out_size as f64;
        let mut data = Vec::with_capacity(out_size * out_size * 3);
        for oy in 0..out_size {
            // sample at output pixel centers, image pixel centers at integer + 0.5
            let sy = y0 + (oy as f64 + 0.5) * step - 0.5;
            for ox in 0..out_size {
                let sx = x0 + (ox as f64 + 0.5) * step - 0.5;
                data.extend_from_slice(&self.bilinear(sx, sy, pad));
            }
        }
        Image {
            width: out_size,
            height: out_size,
            data,
        }
    }

    fn bilinear(&self, x: f64, y: f64, pad: [f64; 3]) -> [f64; 3] {
        let fx = x.floor();
        let fy = y.floor();
        let (tx, ty) = (x - fx, y - fy);
        let fetch = |xi: f64, yi: f64| -> [f64; 3] {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                pad
            } else {
                self.pixel(xi as usize, yi as usize)
            }
        };
        let p00 = fetch(fx, fy);
        let p10 = fetch(fx + 1.0, fy);
        let p01 = fetch(fx, fy + 1.0);
        let p11 = fetch(fx + 1.0, fy + 1.0);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - tx) + p10[c] * tx;
            let bottom = p01[c] * (1.0 - tx) + p11[c] * tx;
            out[c] = top * (1.0 - ty) + bottom * ty;
        }
        out
    }
}
