//! Deterministic placeholder renderer.
//!
//! The image is a grid of 8x8 color blocks derived from a hash of every
//! input, topped by a banner spelling the first 32 prompt characters.

use sha2::{Digest, Sha256};

use super::font::{glyph, GLYPH_H, GLYPH_W};
use super::BackendError;

pub const MIN_SIZE: u32 = 16;
pub const MAX_SIZE: u32 = 4096;

const BLOCK: u32 = 8;
const BANNER_CHARS: usize = 32;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn render_key(prompt: &str, seed: u64, width: u32, height: u32, parent_digest: Option<&str>) -> u64 {
    let mut h = Sha256::new();
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(width.to_le_bytes());
    h.update(height.to_le_bytes());
    match parent_digest {
        Some(d) => {
            h.update([1]);
            h.update(d.as_bytes());
        }
        None => h.update([0]),
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// PNG bytes (8-bit RGB) that depend only on the arguments.
pub fn mock_render(
    prompt: &str,
    seed: u64,
    width: u32,
    height: u32,
    parent_digest: Option<&str>,
) -> Result<Vec<u8>, BackendError> {
    let range = MIN_SIZE..=MAX_SIZE;
    if !range.contains(&width) || !range.contains(&height) {
        return Err(BackendError::SizeOutOfRange { width, height });
    }
    let key = render_key(prompt, seed, width, height, parent_digest);
    let (w, h) = (width as usize, height as usize);
    let mut pixels = vec![0u8; w * h * 3];

    let blocks_x = width.div_ceil(BLOCK) as u64;
    for by in 0..height.div_ceil(BLOCK) {
        for bx in 0..width.div_ceil(BLOCK) {
            let index = by as u64 * blocks_x + bx as u64;
            let color = splitmix64(key ^ splitmix64(index)).to_le_bytes();
            for y in by * BLOCK..((by + 1) * BLOCK).min(height) {
                for x in bx * BLOCK..((bx + 1) * BLOCK).min(width) {
                    let at = (y as usize * w + x as usize) * 3;
                    pixels[at..at + 3].copy_from_slice(&color[..3]);
                }
            }
        }
    }

    draw_banner(&mut pixels, width, height, prompt);

    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| BackendError::DecodeError(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| BackendError::DecodeError(e.to_string()))?;
    writer.finish().map_err(|e| BackendError::DecodeError(e.to_string()))?;
    Ok(out)
}

fn draw_banner(pixels: &mut [u8], width: u32, height: u32, prompt: &str) {
    let cell = GLYPH_W + 1;
    let row_h = GLYPH_H + 2;
    let scale = (width / (BANNER_CHARS as u32 * cell))
        .min(height / (4 * row_h))
        .max(1);
    let banner_h = (row_h * scale).min(height);
    for y in 0..banner_h {
        let start = (y * width) as usize * 3;
        pixels[start..start + width as usize * 3].fill(0);
    }
    let mut put = |x: u32, y: u32| {
        if x < width && y < banner_h {
            let at = ((y * width + x) * 3) as usize;
            pixels[at..at + 3].fill(255);
        }
    };
    for (i, c) in prompt.chars().take(BANNER_CHARS).enumerate() {
        let origin_x = (1 + i as u32 * cell) * scale;
        if origin_x >= width {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(origin_x + col * scale + dx, (1 + row as u32) * scale + dy);
                    }
                }
            }
        }
    }
}
