//! Image and tensor file IO.
//!
//! 8-bit PNG and PGM images are mapped to `[0,1]` by dividing by 255.
//! Measurements and backbone outputs produced by `prepare` are additionally
//! stored in a lossless little-endian `f64` container (`.ten`) so that
//! downstream consistency checks are exact rather than quantized.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Read an 8-bit PNG (grayscale or RGB; alpha is dropped).
pub fn read_png<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Decode {
        path: path_str(path),
        message: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode {
        path: path_str(path),
        message: e.to_string(),
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Decode {
            path: path_str(path),
            message: format!("only 8-bit PNG supported, got {:?}", info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, step) = match info.color_type {
        png::ColorType::Grayscale => (1usize, 1usize),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => {
            return Err(Error::Decode {
                path: path_str(path),
                message: format!("unsupported color type {other:?}"),
            })
        }
    };
    let mut data = Vec::with_capacity(h * w * channels);
    for px in 0..h * w {
        for c in 0..channels {
            data.push(T::from_f64_c(buf[px * step + c] as f64 / 255.0));
        }
    }
    ImageTensor::new(h, w, channels, data)
}

/// Write an image as an 8-bit PNG (1 channel -> grayscale, 3 -> RGB).
/// Values are clamped to `[0,1]` and rounded to the nearest level.
pub fn write_png<T: Scalar>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    let (h, w, c) = image.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(Error::dimension(format!(
                "PNG output supports 1 or 3 channels, got {other}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Decode {
        path: path_str(path),
        message: e.to_string(),
    })?;
    let bytes: Vec<u8> = image
        .as_slice()
        .iter()
        .map(|&v| {
            let v = v.to_f64_c().clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        })
        .collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Decode {
        path: path_str(path),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Read a binary (P5) or ASCII (P2) PGM file.
pub fn read_pgm<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    let mut tokens = Vec::new();
    // Header: magic, width, height, maxval, with # comments allowed.
    while tokens.len() < 4 {
        header.clear();
        reader
            .read_until(b'\n', &mut header)
            .map_err(|e| Error::io(path_str(path), e))?;
        if header.is_empty() {
            return Err(Error::Decode {
                path: path_str(path),
                message: "truncated PGM header".into(),
            });
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(|s| s.to_string()));
    }
    let magic = tokens[0].as_str();
    let w: usize = tokens[1].parse().map_err(|_| Error::Decode {
        path: path_str(path),
        message: "bad PGM width".into(),
    })?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Decode {
        path: path_str(path),
        message: "bad PGM height".into(),
    })?;
    let maxval: f64 = tokens[3].parse().map_err(|_| Error::Decode {
        path: path_str(path),
        message: "bad PGM maxval".into(),
    })?;
    let mut data = Vec::with_capacity(h * w);
    match magic {
        "P5" => {
            let mut raw = vec![0u8; h * w];
            reader
                .read_exact(&mut raw)
                .map_err(|e| Error::io(path_str(path), e))?;
            data.extend(raw.iter().map(|&b| T::from_f64_c(b as f64 / maxval)));
        }
        "P2" => {
            let mut text = String::new();
            reader
                .read_to_string(&mut text)
                .map_err(|e| Error::io(path_str(path), e))?;
            for tok in text.split_whitespace().take(h * w) {
                let v: f64 = tok.parse().map_err(|_| Error::Decode {
                    path: path_str(path),
                    message: "bad PGM sample".into(),
                })?;
                data.push(T::from_f64_c(v / maxval));
            }
        }
        other => {
            return Err(Error::Decode {
                path: path_str(path),
                message: format!("unsupported PGM magic `{other}`"),
            })
        }
    }
    if data.len() != h * w {
        return Err(Error::Decode {
            path: path_str(path),
            message: "truncated PGM data".into(),
        });
    }
    ImageTensor::new(h, w, 1, data)
}

/// Write a binary (P5) PGM file from a single-channel image.
pub fn write_pgm<T: Scalar>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::dimension("PGM output requires a single channel"));
    }
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut writer = BufWriter::new(file);
    write!(writer, "P5\n{} {}\n255\n", image.width(), image.height())
        .map_err(|e| Error::io(path_str(path), e))?;
    let bytes: Vec<u8> = image
        .as_slice()
        .iter()
        .map(|&v| (v.to_f64_c().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_all(&bytes)
        .map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

const TENSOR_MAGIC: &[u8; 8] = b"MCTEN01\n";

/// Write the lossless `f64` tensor container.
pub fn write_tensor<T: Scalar>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(TENSOR_MAGIC)
        .map_err(|e| Error::io(path_str(path), e))?;
    let (h, w, c) = image.shape();
    for dim in [h as u64, w as u64, c as u64] {
        writer
            .write_all(&dim.to_le_bytes())
            .map_err(|e| Error::io(path_str(path), e))?;
    }
    for &v in image.as_slice() {
        writer
            .write_all(&v.to_f64_c().to_le_bytes())
            .map_err(|e| Error::io(path_str(path), e))?;
    }
    Ok(())
}

/// Read the lossless `f64` tensor container.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path_str(path), e))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Decode {
            path: path_str(path),
            message: "bad tensor magic".into(),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 8];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path_str(path), e))?;
        *d = u64::from_le_bytes(buf) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut buf = [0u8; 8];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path_str(path), e))?;
        data.push(T::from_f64_c(f64::from_le_bytes(buf)));
    }
    ImageTensor::new(dims[0], dims[1], dims[2], data)
}

/// Load an image by extension: `.png`, `.pgm`, or `.ten`.
pub fn read_image_any<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("pgm") => read_pgm(path),
        Some("ten") => read_tensor(path),
        _ => Err(Error::Decode {
            path: path_str(path),
            message: "unknown image extension (expected png, pgm, or ten)".into(),
        }),
    }
}
