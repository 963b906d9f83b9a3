//! Reader for binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::path::Path;

use attmask_core::Error;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Header fields in order, skipping whitespace and `#` comments. Returns the
/// fields and the offset of the first pixel byte.
fn header(bytes: &[u8]) -> Result<(Vec<String>, usize), Error> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
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
            return Err(format_err(i, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((fields, i + 1))
}

/// Reads an image of `side` x `side` pixels and returns interleaved samples
/// with `channels` values per pixel. Gray images are replicated to three
/// channels when needed, colour images averaged down to one.
pub fn read(path: &Path, side: usize, channels: usize) -> Result<Vec<u8>, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (f, start) = header(&bytes)?;
    let src_channels = match f[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(0, format!("`{other}` is not a binary PGM/PPM"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(0, format!("bad header number `{s}`")))
    };
    let (w, h, max) = (num(&f[1])?, num(&f[2])?, num(&f[3])?);
    if max != 255 {
        return Err(format_err(
            0,
            format!("maximum sample {max}, only 255 is supported"),
        ));
    }
    if w != side || h != side {
        return Err(Error::Unsupported(format!(
            "{} is {w}x{h}, the model expects {side}x{side}",
            path.display()
        )));
    }
    let raster = bytes
        .get(start..start + w * h * src_channels)
        .ok_or_else(|| format_err(bytes.len(), "truncated raster"))?;
    Ok(match (src_channels, channels) {
        (a, b) if a == b => raster.to_vec(),
        (1, 3) => raster.iter().flat_map(|&v| [v, v, v]).collect(),
        (3, 1) => raster
            .chunks_exact(3)
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
            .collect(),
        (_, c) => return Err(Error::Unsupported(format!("{c}-channel models"))),
    })
}
