//! Frame export: one 16-bit PNG per frame plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::write_atomic;
use crate::render::RenderedVideo;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub time: f32,
    /// Camera-to-world rotation and position, row-major 3×4.
    pub extrinsics: [f32; 12],
    pub fov_degrees: f32,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<FrameEntry>,
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Encodes an `[H, W, 3]` image in `[0, 1]` as a 16-bit RGB PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("encode_png", format!("{:?} is not [H, W, 3]", image.shape())));
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(png_error)?;
        let data: Vec<u8> = image
            .data()
            .iter()
            .flat_map(|&v| quantize(v).to_be_bytes())
            .collect();
        writer.write_image_data(&data).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
    }
    Ok(buf)
}

/// Decodes a PNG written by [`encode_png`].
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format("expected a 16-bit RGB png".into()));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
        .collect();
    Tensor::new(vec![info.height as usize, info.width as usize, 3], data)
}

fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn png_error(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("png: {other}")),
    }
}

/// Writes `frame_0000.png …` and `manifest.json` into `dir`, creating it if
/// needed. Returns the written paths, frames first.
pub fn export_frames(video: &RenderedVideo, dir: &Path) -> Result<Vec<PathBuf>> {
    if video.frames.len() != video.cameras.len() || video.frames.len() != video.times.len() {
        return Err(Error::shape(
            "export_frames",
            format!(
                "{} frames, {} cameras, {} times",
                video.frames.len(),
                video.cameras.len(),
                video.times.len()
            ),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.frames.len() + 1);
    let mut entries = Vec::with_capacity(video.frames.len());
    for (k, ((frame, camera), &time)) in video
        .frames
        .iter()
        .zip(&video.cameras)
        .zip(&video.times)
        .enumerate()
    {
        let name = frame_name(k);
        let path = dir.join(&name);
        write_atomic(&path, &encode_png(&frame.rgb)?)?;
        paths.push(path);
        entries.push(FrameEntry {
            file: name,
            time,
            extrinsics: camera.extrinsics(),
            fov_degrees: camera.fov_degrees,
            width: camera.width,
            height: camera.height,
        });
    }
    let manifest = Manifest { frames: entries };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, text.as_bytes())?;
    paths.push(path);
    Ok(paths)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}
