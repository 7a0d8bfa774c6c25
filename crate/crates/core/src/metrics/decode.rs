//! Brute-force scene decoder over the closed template set.

use std::sync::OnceLock;

use ndarray::{ArrayView3, Axis};

use crate::prompt::{Cell, Color, Shape};
use crate::scene::{cell_center, color_rgb, covers, SIZE};

/// Greedy selection stops below this normalized correlation.
pub const MATCH_THRESHOLD: f64 = 0.5;
/// Most objects a frame can hold.
pub const MAX_DECODED: usize = 3;
/// Half-sizes searched: the default and the sizes reachable by a few frames of growth or shrinkage.
pub const TEMPLATE_HALF_SIZES: [f64; 4] = [3.0, 4.0, 5.0, 6.0];
const JITTERS: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedObject {
    pub color: Color,
    pub shape: Shape,
    pub cell: Cell,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDecodeResult {
    pub objects: Vec<DecodedObject>,
    /// Mean squared residual per pixel channel after subtracting accepted objects.
    pub residual_error: f64,
}

/// Geometry of one color-less template: its mask pixels and the window
/// (mask bounding box grown by one pixel) over which correlation is taken.
struct Footprint {
    shape: Shape,
    cell: Cell,
    pixels: Vec<(usize, usize)>,
    window: (usize, usize, usize, usize),
}

fn footprints() -> &'static [Footprint] {
    static CELL: OnceLock<Vec<Footprint>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for cell in Cell::all() {
                let (cx, cy) = cell_center(cell);
                for jy in JITTERS {
                    for jx in JITTERS {
                        for h in TEMPLATE_HALF_SIZES {
                            let c = (cx + jx, cy + jy);
                            let mut pixels = Vec::new();
                            for y in 0..SIZE {
                                for x in 0..SIZE {
                                    if covers(shape, c, h, x as f64, y as f64) {
                                        pixels.push((y, x));
                                    }
                                }
                            }
                            let y0 = pixels.iter().map(|p| p.0).min().unwrap_or(0).saturating_sub(1);
                            let x0 = pixels.iter().map(|p| p.1).min().unwrap_or(0).saturating_sub(1);
                            let y1 = (pixels.iter().map(|p| p.0).max().unwrap_or(0) + 2).min(SIZE);
                            let x1 = (pixels.iter().map(|p| p.1).max().unwrap_or(0) + 2).min(SIZE);
                            out.push(Footprint { shape, cell, pixels, window: (y0, y1, x0, x1) });
                        }
                    }
                }
            }
        }
        out
    })
}

/// Number of templates searched (footprints × colors).
pub fn template_count() -> usize {
    footprints().len() * Color::ALL.len()
}

/// Per-channel median, used as the background estimate.
pub fn background(frame: ArrayView3<f32>) -> [f64; 3] {
    let mut bg = [0.0; 3];
    for (c, b) in bg.iter_mut().enumerate() {
        let mut v: Vec<f64> = frame.index_axis(Axis(2), c).iter().map(|&x| x as f64).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        *b = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    }
    bg
}

/// Decodes up to three objects: each round scores every template by cosine
/// correlation with the background-subtracted residual inside the template's
/// window, accepts the best, and subtracts it.
pub fn decode_scene(frame: ArrayView3<f32>) -> SceneDecodeResult {
    let bg = background(frame);
    let mut res = vec![[0.0f64; 3]; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            for c in 0..3 {
                res[y * SIZE + x][c] = frame[[y, x, c]] as f64 - bg[c];
            }
        }
    }
    let colors: Vec<(Color, [f64; 3])> = Color::ALL
        .iter()
        .map(|&col| {
            let rgb = color_rgb(col);
            (col, [rgb[0] - bg[0], rgb[1] - bg[1], rgb[2] - bg[2]])
        })
        .collect();

    let mut objects = Vec::new();
    while objects.len() < MAX_DECODED {
        let mut best: Option<(f64, usize, usize)> = None;
        for (fi, fp) in footprints().iter().enumerate() {
            let (y0, y1, x0, x1) = fp.window;
            let mut win_sq = 0.0;
            for y in y0..y1 {
                for px in &res[y * SIZE + x0..y * SIZE + x1] {
                    win_sq += px[0] * px[0] + px[1] * px[1] + px[2] * px[2];
                }
            }
            if win_sq <= 1e-12 {
                continue;
            }
            let mut s = [0.0; 3];
            for &(y, x) in &fp.pixels {
                let px = &res[y * SIZE + x];
                s[0] += px[0];
                s[1] += px[1];
                s[2] += px[2];
            }
            let n = fp.pixels.len() as f64;
            for (ci, (_, d)) in colors.iter().enumerate() {
                let t_sq = n * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                if t_sq <= 1e-12 {
                    continue;
                }
                let score = (s[0] * d[0] + s[1] * d[1] + s[2] * d[2]) / (win_sq * t_sq).sqrt();
                if best.map_or(true, |b| score > b.0) {
                    best = Some((score, fi, ci));
                }
            }
        }
        let Some((score, fi, ci)) = best else { break };
        if score < MATCH_THRESHOLD {
            break;
        }
        let fp = &footprints()[fi];
        let (color, d) = colors[ci];
        for &(y, x) in &fp.pixels {
            let px = &mut res[y * SIZE + x];
            for c in 0..3 {
                px[c] -= d[c];
            }
        }
        objects.push(DecodedObject { color, shape: fp.shape, cell: fp.cell, score: score.clamp(0.0, 1.0) });
    }
    let residual_error = res.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>() / (SIZE * SIZE * 3) as f64;
    SceneDecodeResult { objects, residual_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_frame, Frame, SceneObject, SceneSpec};

    fn scene(objs: &[(Color, Shape, Cell, (f64, f64))], shade: f64) -> Frame {
        render_frame(&SceneSpec {
            objects: objs
                .iter()
                .map(|&(c, s, cell, j)| {
                    let (x, y) = cell_center(cell);
                    SceneObject { color_rgb: color_rgb(c), shape: s, center: (x + j.0, y + j.1), half_size: 4.0 }
                })
                .collect(),
            background_shade: shade,
        })
    }

    #[test]
    fn template_set_has_3888_entries() {
        assert_eq!(template_count(), 3888);
    }

    #[test]
    fn blank_frame_decodes_to_nothing() {
        let r = decode_scene(scene(&[], 1.0).view());
        assert!(r.objects.is_empty());
        assert!(r.residual_error < 1e-12);
    }

    #[test]
    fn jittered_two_object_scene() {
        let f = scene(
            &[
                (Color::Yellow, Shape::Triangle, Cell::new(0, 2), (1.0, -1.0)),
                (Color::Blue, Shape::Circle, Cell::new(2, 0), (-1.0, 0.0)),
            ],
            0.9,
        );
        let r = decode_scene(f.view());
        assert_eq!(r.objects.len(), 2);
        let mut got: Vec<_> = r.objects.iter().map(|o| (o.color, o.shape, o.cell)).collect();
        got.sort();
        assert_eq!(got, vec![(Color::Blue, Shape::Circle, Cell::new(2, 0)), (Color::Yellow, Shape::Triangle, Cell::new(0, 2))]);
        assert!(r.objects.iter().all(|o| o.score > 0.95));
    }

    #[test]
    fn same_color_neighbours_are_separated() {
        let f = scene(
            &[
                (Color::Red, Shape::Square, Cell::new(1, 0), (0.0, 0.0)),
                (Color::Red, Shape::Square, Cell::new(1, 1), (0.0, 0.0)),
                (Color::Red, Shape::Circle, Cell::new(1, 2), (0.0, 0.0)),
            ],
            1.0,
        );
        let r = decode_scene(f.view());
        let mut got: Vec<_> = r.objects.iter().map(|o| (o.shape, o.cell)).collect();
        got.sort();
        assert_eq!(got, vec![(Shape::Square, Cell::new(1, 0)), (Shape::Square, Cell::new(1, 1)), (Shape::Circle, Cell::new(1, 2))]);
    }
}
