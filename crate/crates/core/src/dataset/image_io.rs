use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Reads a PNG or binary PGM as 8-bit grayscale: `(width, height, pixels)`.
pub fn read_gray(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

/// Writes 8-bit grayscale: PNG for a `.png` extension, binary PGM (P5) otherwise.
pub fn write_gray(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width as usize * height as usize {
        return Err(Error::Dimension(format!(
            "{} pixels for a {width}×{height} image",
            pixels.len()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        image::save_buffer_with_format(path, pixels, width, height, ExtendedColorType::L8, ImageFormat::Png)?;
    } else {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(pixels, width, height, ExtendedColorType::L8)?;
    }
    Ok(())
}
