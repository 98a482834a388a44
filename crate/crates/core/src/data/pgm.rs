//! 8-bit binary (P5) and ASCII (P2) greymaps.

use std::path::Path;

use crate::image::Image;

use super::DataError;

pub fn write_pgm(path: &Path, image: &Image) -> Result<(), DataError> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(
        image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |msg: &str| DataError::Pgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    // Header: magic, width, height, maxval, separated by whitespace/comments.
    let mut pos = 0;
    let mut fields: Vec<String> = Vec::new();
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
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: f64 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval <= 0.0 || maxval > 255.0 {
        return Err(bad("only 8-bit greymaps are supported"));
    }
    let n = width * height;
    let data: Vec<f64> = match fields[0].as_str() {
        "P5" => {
            pos += 1;
            let raw = bytes
                .get(pos..pos + n)
                .ok_or_else(|| bad("truncated raster"))?;
            raw.iter().map(|&b| b as f64 / maxval).collect()
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Result<Vec<f64>, _> = text
                .split_whitespace()
                .take(n)
                .map(|t| t.parse::<f64>())
                .collect();
            let vals = vals.map_err(|_| bad("non-numeric sample"))?;
            if vals.len() != n {
                return Err(bad("truncated raster"));
            }
            vals.into_iter().map(|v| v / maxval).collect()
        }
        _ => return Err(bad("unsupported magic")),
    };
    Ok(Image {
        width,
        height,
        data,
    })
}
