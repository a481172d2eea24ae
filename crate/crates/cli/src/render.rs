//! Schematic SVG renderings of synthetic tiles, so human annotators have
//! something to review and box. Coordinates are tile pixels.

use std::fmt::Write;

use alforge_core::corpus::{distractor_layout, Blur, ImageRecord, Occlusion};

pub fn render_tile(rec: &ImageRecord, world_seed: u64) -> String {
    let t = rec.tile.tile_size;
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{t}" height="{t}" viewBox="0 0 {t} {t}">
<defs>
<linearGradient id="bg" x1="0" y1="0" x2="0" y2="1"><stop offset="0" stop-color="#b9c9d6"/><stop offset="0.55" stop-color="#9aa39a"/><stop offset="1" stop-color="#5d5f61"/></linearGradient>
<filter id="blur"><feGaussianBlur stdDeviation="3"/></filter>
</defs>
<rect width="{t}" height="{t}" fill="url(#bg)"/>
<text x="12" y="28" font-family="monospace" font-size="20" fill="#333">pano {} tile {},{}</text>
"##,
        rec.tile.panorama_id, rec.tile.col, rec.tile.row
    );

    // Distractors: poles with round or square plates.
    for (k, d) in distractor_layout(world_seed, rec).iter().enumerate() {
        let cx = (d.x_min() + d.x_max()) / 2.0;
        let _ = writeln!(
            s,
            r##"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="#444" stroke-width="4"/>"##,
            d.y_max(),
            (d.y_max() + d.height() * 1.5).min(t as f64)
        );
        if k % 2 == 0 {
            let r = d.width().min(d.height()) / 2.0;
            let _ = writeln!(
                s,
                r##"<circle cx="{cx}" cy="{}" r="{r}" fill="#d8d2c4" stroke="#555" stroke-width="3"/>"##,
                (d.y_min() + d.y_max()) / 2.0
            );
        } else {
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#c98a2b" stroke="#555" stroke-width="3"/>"##,
                d.x_min(),
                d.y_min(),
                d.width(),
                d.height()
            );
        }
    }

    // Signs: white plates with a red border and a "P".
    for g in &rec.gt {
        let b = g.bbox;
        let filter = if g.stratum.blur == Blur::Yes {
            r#" filter="url(#blur)""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r##"<g{filter}><rect x="{}" y="{}" width="{}" height="{}" fill="#f4f4f0" stroke="#c0262d" stroke-width="{}"/><text x="{}" y="{}" font-family="sans-serif" font-weight="bold" font-size="{}" fill="#1c3f94" text-anchor="middle">P</text></g>"##,
            b.x_min(),
            b.y_min(),
            b.width(),
            b.height(),
            (b.width() / 12.0).max(1.5),
            (b.x_min() + b.x_max()) / 2.0,
            b.y_min() + b.height() * 0.7,
            b.height() * 0.6
        );
        if g.stratum.occlusion == Occlusion::Partial {
            let _ = writeln!(
                s,
                r##"<ellipse cx="{}" cy="{}" rx="{}" ry="{}" fill="#3f6b35" opacity="0.9"/>"##,
                b.x_max(),
                b.y_min() + b.height() * 0.4,
                b.width() * 0.45,
                b.height() * 0.4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
