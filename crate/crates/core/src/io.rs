//! PNG and Middlebury `.flo` persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Frame, Grid, Sketch};

/// Magic number opening every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_from_image(img: DynamicImage) -> Result<Frame> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let g = Grid::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
    Frame::new(g)
}

fn gray_from_image(img: DynamicImage) -> Grid {
    let l = img.to_luma8();
    let (w, h) = (l.width() as usize, l.height() as usize);
    Grid::from_fn(1, h, w, |_, y, x| l.get_pixel(x as u32, y as u32)[0] as f32 / 255.0)
}

fn rgb_image(frame: &Frame) -> RgbImage {
    let g = frame.grid();
    RgbImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(g.get(c, y as usize, x as usize))))
    })
}

/// 8-bit grayscale image of a single-channel grid (values clamped to `[0, 1]`).
fn gray_image(grid: &Grid) -> GrayImage {
    GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        image::Luma([to_u8(grid.get(0, y as usize, x as usize))])
    })
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<Frame> {
    frame_from_image(image::open(path)?)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    frame_from_image(image::load_from_memory(bytes)?)
}

pub fn write_frame(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    rgb_image(frame).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn encode_frame_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    rgb_image(frame).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Reads any image as a sketch (luma, 0 = ink).
pub fn read_sketch(path: impl AsRef<Path>) -> Result<Sketch> {
    Sketch::new(gray_from_image(image::open(path)?))
}

pub fn decode_sketch(bytes: &[u8]) -> Result<Sketch> {
    Sketch::new(gray_from_image(image::load_from_memory(bytes)?))
}

/// Writes a single-channel grid in `[0, 1]` as 8-bit grayscale PNG.
pub fn write_gray(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    gray_image(grid).save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn encode_gray_png(grid: &Grid) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    gray_image(grid).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_sketch(path: impl AsRef<Path>, sketch: &Sketch) -> Result<()> {
    write_gray(path, sketch.grid())
}

/// Serializes a flow in the Middlebury layout: magic, i32 width, i32 height,
/// then row-major interleaved little-endian `f32` pairs `(dx, dy)`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            out.extend_from_slice(&dx.to_le_bytes());
            out.extend_from_slice(&dy.to_le_bytes());
        }
    }
    out
}

pub fn decode_flo(mut reader: impl Read) -> Result<FlowField> {
    let mut word = [0u8; 4];
    let mut next = |r: &mut dyn Read| -> Result<[u8; 4]> {
        r.read_exact(&mut word).map_err(|e| Error::FlowFormat(format!("truncated: {e}")))?;
        Ok(word)
    };
    let magic = f32::from_le_bytes(next(&mut reader)?);
    if magic != FLO_MAGIC {
        return Err(Error::FlowFormat(format!("bad magic {magic}")));
    }
    let w = i32::from_le_bytes(next(&mut reader)?);
    let h = i32::from_le_bytes(next(&mut reader)?);
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > 1 << 28 {
        return Err(Error::FlowFormat(format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut raw = vec![0u8; 8 * w * h];
    reader
        .read_exact(&mut raw)
        .map_err(|e| Error::FlowFormat(format!("truncated payload: {e}")))?;
    let mut data = vec![0f32; 2 * w * h];
    for (i, pair) in raw.chunks_exact(8).enumerate() {
        data[i] = f32::from_le_bytes(pair[0..4].try_into().expect("4 bytes"));
        data[w * h + i] = f32::from_le_bytes(pair[4..8].try_into().expect("4 bytes"));
    }
    FlowField::new(Grid::new(2, h, w, data)?)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_flo(flow))?;
    f.flush()?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_layout_is_bit_exact() {
        let flow = FlowField::from_fn(2, 3, |y, x| (x as f32 + 0.5, -(y as f32)));
        let bytes = encode_flo(&flow);
        assert_eq!(bytes.len(), 12 + 8 * 6);
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2i32.to_le_bytes());
        // pixel (row 1, col 2) is the 6th pair
        assert_eq!(&bytes[12 + 5 * 8..12 + 5 * 8 + 4], &2.5f32.to_le_bytes());
        assert_eq!(&bytes[12 + 5 * 8 + 4..12 + 6 * 8], &(-1.0f32).to_le_bytes());
        assert_eq!(decode_flo(&bytes[..]).unwrap(), flow);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(decode_flo(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] ^= 0xff;
        assert!(decode_flo(&bytes[..]).is_err());
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let frame = Frame::new(Grid::from_fn(3, 5, 7, |c, y, x| ((c + y * 7 + x) % 11) as f32 / 10.0)).unwrap();
        let back = decode_frame(&encode_frame_png(&frame).unwrap()).unwrap();
        for (a, b) in frame.grid().data().iter().zip(back.grid().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let sketch = Sketch::new(Grid::from_fn(1, 4, 4, |_, y, x| if x == y { 0.0 } else { 1.0 })).unwrap();
        let back = decode_sketch(&encode_gray_png(sketch.grid()).unwrap()).unwrap();
        assert_eq!(back, sketch);
    }
}
