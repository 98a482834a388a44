use std::fmt::Write as _;

use base64::Engine as _;

use crate::geometry::OrientedBox;
use crate::image::Image;

/// 8-bit grayscale BMP (palettized, bottom-up rows padded to 4 bytes).
pub fn encode_bmp(image: &Image) -> Vec<u8> {
    let (w, h) = (image.width, image.height);
    let stride = (w + 3) & !3;
    let offset = 14 + 40 + 256 * 4;
    let size = offset + stride * h;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(offset as u32).to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&8u16.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&((stride * h) as u32).to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&256u32.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for i in 0..=255u8 {
        out.extend_from_slice(&[i, i, i, 0]);
    }
    for y in (0..h).rev() {
        for x in 0..w {
            out.push((image.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.resize(out.len() + stride - w, 0);
    }
    out
}

fn polygon(out: &mut String, b: &OrientedBox, style: &str) {
    let pts: Vec<String> = b
        .to_corners()
        .iter()
        .map(|[x, y]| format!("{x:.2},{y:.2}"))
        .collect();
    let _ = writeln!(out, r#"<polygon points="{}" {style}/>"#, pts.join(" "));
}

/// Image with ground truth (solid green), pseudo boxes (dashed red) and
/// points (yellow crosses).
pub fn render_svg(
    image: &Image,
    gt: &[OrientedBox],
    pseudo: &[OrientedBox],
    points: &[[f64; 2]],
) -> String {
    let (w, h) = (image.width, image.height);
    let data = base64::engine::general_purpose::STANDARD.encode(encode_bmp(image));
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"<image width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/bmp;base64,{data}"/>"#
    );
    for b in gt {
        polygon(
            &mut out,
            b,
            r##"fill="none" stroke="#3c3" stroke-width="1.5""##,
        );
    }
    for b in pseudo {
        polygon(
            &mut out,
            b,
            r##"fill="none" stroke="#e33" stroke-width="1.5" stroke-dasharray="4 2""##,
        );
    }
    for [x, y] in points {
        let _ = writeln!(
            out,
            r##"<path d="M{:.2} {y:.2}H{:.2}M{x:.2} {:.2}V{:.2}" stroke="#fd0" stroke-width="1.5"/>"##,
            x - 4.0,
            x + 4.0,
            y - 4.0,
            y + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}
