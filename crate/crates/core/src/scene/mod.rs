//! Ground-truth shape world: anchor rendering and motion simulation.
//!
//! Pixel `(x, y)` has integer coordinates, `x` to the right and `y` down.
//! Frames and videos are stored `[y, x, channel]` / `[frame, y, x, channel]`.

mod dataset;

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::prompt::{reduce_to_first_frame, Cell, Color, Motion, ObjectClause, PromptAst, Shape};
use crate::rng;

/// A renderable, contact-free random prompt and its jitter seed.
pub fn dataset_draw(seed: u64) -> (PromptAst, u64) {
    dataset::draw_feasible(seed, 0)
}

pub use dataset::{gen_dataset, load_dataset, load_index, DatasetManifest, Dataset, DatasetEntry, DatasetIndex, Split, EVAL_PROMPTS};

pub const SIZE: usize = 32;
pub const FRAMES: usize = 8;
pub const HALF_SIZE: f64 = 4.0;
pub const MIN_HALF_SIZE: f64 = 2.0;
pub const MAX_HALF_SIZE: f64 = 8.0;
/// Pixels per frame for `moves`.
pub const MOVE_SPEED: f64 = 2.0;
/// Half-size change per frame for `grows` / `shrinks`.
pub const SIZE_RATE: f64 = 0.5;
/// Grid-cell centers along either axis.
pub const CELL_CENTERS: [f64; 3] = [6.0, 16.0, 26.0];

/// A single `[y, x, rgb]` frame, values in `[0, 1]`.
pub type Frame = Array3<f32>;
/// `[frame, y, x, rgb]`.
pub type Video = Array4<f32>;

/// Display color; channels are multiples of 1/255 so 8-bit exports are exact.
pub fn color_rgb(c: Color) -> [f64; 3] {
    let q = |v: u8| v as f64 / 255.0;
    match c {
        Color::Red => [q(230), q(25), q(25)],
        Color::Green => [q(25), q(190), q(25)],
        Color::Blue => [q(25), q(50), q(230)],
        Color::Yellow => [q(240), q(215), q(25)],
    }
}

pub fn cell_center(cell: Cell) -> (f64, f64) {
    (CELL_CENTERS[cell.col as usize], CELL_CENTERS[cell.row as usize])
}

/// Grid cell whose center is nearest to `(x, y)`.
pub fn nearest_cell(x: f64, y: f64) -> Cell {
    let idx = |v: f64| {
        (0..3)
            .min_by(|&a, &b| (CELL_CENTERS[a] - v).abs().total_cmp(&(CELL_CENTERS[b] - v).abs()))
            .unwrap_or(1) as u8
    };
    Cell::new(idx(y), idx(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub color_rgb: [f64; 3],
    pub shape: Shape,
    pub center: (f64, f64),
    pub half_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background_shade: f64,
}

impl SceneSpec {
    /// Object centers inside `[half_size, SIZE − half_size)` on both axes.
    pub fn check_geometry(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            let h = o.half_size;
            let inside = |v: f64| v >= h && v < SIZE as f64 - h;
            if !inside(o.center.0) || !inside(o.center.1) {
                return Err(Error::Geometry(format!(
                    "object {i} center ({}, {}) with half-size {h} leaves the frame",
                    o.center.0, o.center.1
                )));
            }
        }
        Ok(())
    }

    /// True when two objects touch or overlap (closed extents less than one pixel apart).
    pub fn has_contact(&self) -> bool {
        let objs = &self.objects;
        (0..objs.len()).any(|i| {
            (i + 1..objs.len()).any(|j| {
                let (a, b) = (&objs[i], &objs[j]);
                let reach = a.half_size + b.half_size + 2.0;
                (a.center.0 - b.center.0).abs() < reach && (a.center.1 - b.center.1).abs() < reach
            })
        })
    }
}

/// Does pixel `(x, y)` belong to the shape?
pub fn covers(shape: Shape, center: (f64, f64), half: f64, x: f64, y: f64) -> bool {
    let (cx, cy) = center;
    match shape {
        Shape::Square => x >= cx - half && x < cx + half && y >= cy - half && y < cy + half,
        Shape::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= half * half,
        Shape::Triangle => {
            let top = cy - half;
            y >= top && y < cy + half && (x - cx).abs() <= (y - top) / 2.0
        }
    }
}

/// Anchor scene: grid-cell centers with seeded ±1 px jitter and a seeded background shade.
pub fn scene_from_ast(ast: &PromptAst, jitter_seed: u64) -> SceneSpec {
    let mut r = rng::stream(jitter_seed, &[0x5ce]);
    let background_shade = r.gen_range(217u32..=255) as f64 / 255.0;
    let objects = ast
        .objects
        .iter()
        .map(|o| {
            let (cx, cy) = cell_center(o.position);
            let jx = r.gen_range(-1i32..=1) as f64;
            let jy = r.gen_range(-1i32..=1) as f64;
            SceneObject {
                color_rgb: color_rgb(o.color),
                shape: o.shape,
                center: (cx + jx, cy + jy),
                half_size: HALF_SIZE,
            }
        })
        .collect();
    SceneSpec { objects, background_shade }
}

/// The `f32` pixel value used for a real intensity: the nearest 8-bit level,
/// snapped so that `to_pixels(to_latent(p)) == p` holds bit for bit.
pub fn pixel_level(v: f64) -> f32 {
    let k = (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
    ((2.0 * k - 1.0 + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Rasterizes a scene; later objects paint over earlier ones; no anti-aliasing.
pub fn render_frame(scene: &SceneSpec) -> Frame {
    let mut f = Frame::from_elem((SIZE, SIZE, 3), pixel_level(scene.background_shade));
    for o in &scene.objects {
        let h = o.half_size;
        let x0 = (o.center.0 - h).floor().max(0.0) as usize;
        let y0 = (o.center.1 - h).floor().max(0.0) as usize;
        let x1 = ((o.center.0 + h).ceil() as usize + 1).min(SIZE);
        let y1 = ((o.center.1 + h).ceil() as usize + 1).min(SIZE);
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(o.shape, o.center, h, x as f64, y as f64) {
                    for c in 0..3 {
                        f[[y, x, c]] = pixel_level(o.color_rgb[c]);
                    }
                }
            }
        }
    }
    f
}

/// Frame range `[start, end)` of the `i`-th of `n` motions.
pub fn motion_segment(i: usize, n: usize) -> (usize, usize) {
    if n <= 1 {
        (0, FRAMES)
    } else {
        let len = FRAMES / n;
        (i * len, if i + 1 == n { FRAMES } else { (i + 1) * len })
    }
}

/// Frame at which a `turns` inside segment `[start, end)` takes effect.
pub fn turn_frame(seg: (usize, usize)) -> usize {
    seg.0 + (seg.1 - seg.0) / 2
}

/// Per-frame states of one object under its motion script.
fn track(clause: &ObjectClause, start: &SceneObject) -> Vec<SceneObject> {
    let n = clause.motions.len();
    let mut states = vec![start.clone()];
    let mut cur = start.clone();
    let mut color = clause.color;
    for f in 1..FRAMES {
        if n > 0 {
            let i = (0..n).find(|&i| {
                let (a, b) = motion_segment(i, n);
                f >= a && f < b
            });
            if let Some(i) = i {
                let seg = motion_segment(i, n);
                match clause.motions[i] {
                    Motion::Move(d) => {
                        let (dx, dy) = d.delta();
                        cur.center = (cur.center.0 + MOVE_SPEED * dx, cur.center.1 + MOVE_SPEED * dy);
                    }
                    Motion::Grow => cur.half_size = (cur.half_size + SIZE_RATE).clamp(MIN_HALF_SIZE, MAX_HALF_SIZE),
                    Motion::Shrink => {
                        cur.half_size = (cur.half_size - SIZE_RATE).clamp(MIN_HALF_SIZE, MAX_HALF_SIZE)
                    }
                    Motion::Turn(target) => {
                        if f == turn_frame(seg) {
                            color = target;
                        }
                    }
                }
            }
        }
        cur.color_rgb = color_rgb(color);
        states.push(cur.clone());
    }
    states
}

/// Scene states for all frames; frame 0 is the anchor scene of the reduced prompt.
pub fn simulate_scenes(ast: &PromptAst, jitter_seed: u64) -> Result<Vec<SceneSpec>> {
    let anchor = scene_from_ast(&reduce_to_first_frame(ast), jitter_seed);
    let tracks: Vec<Vec<SceneObject>> =
        ast.objects.iter().zip(&anchor.objects).map(|(c, o)| track(c, o)).collect();
    let scenes: Vec<SceneSpec> = (0..FRAMES)
        .map(|f| SceneSpec {
            objects: tracks.iter().map(|t| t[f].clone()).collect(),
            background_shade: anchor.background_shade,
        })
        .collect();
    for (f, sc) in scenes.iter().enumerate() {
        sc.check_geometry().map_err(|e| match e {
            Error::Geometry(m) => Error::Geometry(format!("frame {f}: {m}")),
            other => other,
        })?;
    }
    Ok(scenes)
}

/// Renders the motion script into an `F × 32 × 32 × 3` pixel-space video.
pub fn simulate(ast: &PromptAst, jitter_seed: u64) -> Result<Video> {
    let scenes = simulate_scenes(ast, jitter_seed)?;
    let mut v = Video::zeros((FRAMES, SIZE, SIZE, 3));
    for (f, sc) in scenes.iter().enumerate() {
        v.slice_mut(s![f, .., .., ..]).assign(&render_frame(sc));
    }
    Ok(v)
}

/// The scene after every motion has completed (the last simulated frame).
pub fn final_state_scene(ast: &PromptAst, jitter_seed: u64) -> Result<SceneSpec> {
    let mut scenes = simulate_scenes(ast, jitter_seed)?;
    Ok(scenes.pop().expect("at least one frame"))
}

/// Binary PPM (P6), `round(255 · pixel)` per channel.
pub fn frame_to_ppm(frame: ArrayView3<f32>) -> Vec<u8> {
    let (h, w, _) = frame.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Pixel `[0,1]` → latent `[-1,1]`.
pub fn to_latent(v: &Video) -> Video {
    v.mapv(|p| 2.0 * p - 1.0)
}

/// Latent → pixel with clamping to `[0,1]`.
pub fn to_pixels(z: &Video) -> Video {
    z.mapv(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_levels_survive_the_latent_round_trip() {
        for k in 0..=255u32 {
            let p = pixel_level(k as f64 / 255.0);
            let z = 2.0 * p - 1.0;
            assert_eq!(((z + 1.0) / 2.0).clamp(0.0, 1.0).to_bits(), p.to_bits(), "level {k}");
            assert_eq!((255.0 * p as f64).round() as u32, k);
        }
    }
    use crate::prompt::parse_prompt;

    fn count_color(f: &Frame, rgb: [f64; 3]) -> usize {
        f.outer_iter()
            .flat_map(|row| row.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>())
            .filter(|p| (0..3).all(|c| p[c] == pixel_level(rgb[c])))
            .count()
    }

    fn centroid_x(f: ArrayView3<f32>, rgb: [f64; 3]) -> f64 {
        let (mut sx, mut n) = (0.0, 0.0);
        for y in 0..SIZE {
            for x in 0..SIZE {
                if (0..3).all(|c| f[[y, x, c]] == pixel_level(rgb[c])) {
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        sx / n
    }

    fn zero_jitter_seed(ast: &PromptAst) -> u64 {
        (0..1000)
            .find(|&s| {
                let sc = scene_from_ast(ast, s);
                sc.objects.iter().zip(&ast.objects).all(|(o, c)| o.center == cell_center(c.position))
            })
            .expect("some seed draws zero jitter")
    }

    #[test]
    fn empty_white_scene() {
        let f = render_frame(&SceneSpec { objects: vec![], background_shade: 1.0 });
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_and_circle_pixel_counts() {
        let red = color_rgb(Color::Red);
        let mk = |shape| SceneSpec {
            objects: vec![SceneObject { color_rgb: red, shape, center: (16.0, 16.0), half_size: 4.0 }],
            background_shade: 1.0,
        };
        assert_eq!(count_color(&render_frame(&mk(Shape::Square)), red), 64);
        // brute-force lattice count over the whole image
        let lattice = (0..SIZE * SIZE)
            .filter(|i| {
                let (x, y) = ((i % SIZE) as f64, (i / SIZE) as f64);
                (x - 16.0).powi(2) + (y - 16.0).powi(2) <= 16.0
            })
            .count();
        assert_eq!(lattice, 49);
        assert_eq!(count_color(&render_frame(&mk(Shape::Circle)), red), lattice);
        assert_eq!(count_color(&render_frame(&mk(Shape::Triangle)), red), 32);
    }

    #[test]
    fn later_objects_occlude_earlier() {
        let (red, blue) = (color_rgb(Color::Red), color_rgb(Color::Blue));
        let sc = SceneSpec {
            objects: vec![
                SceneObject { color_rgb: red, shape: Shape::Square, center: (16.0, 16.0), half_size: 4.0 },
                SceneObject { color_rgb: blue, shape: Shape::Square, center: (18.0, 16.0), half_size: 4.0 },
            ],
            background_shade: 1.0,
        };
        let f = render_frame(&sc);
        assert_eq!(count_color(&f, blue), 64);
        assert_eq!(count_color(&f, red), 16);
    }

    #[test]
    fn scene_is_deterministic_and_zero_jitter_hits_grid() {
        let ast = parse_prompt("red square at center").unwrap();
        assert_eq!(scene_from_ast(&ast, 9), scene_from_ast(&ast, 9));
        let s = zero_jitter_seed(&ast);
        assert_eq!(scene_from_ast(&ast, s).objects[0].center, (16.0, 16.0));
    }

    #[test]
    fn seeds_change_only_jitter_and_background() {
        let ast = parse_prompt("red square at center; blue circle at top-left; yellow triangle at bottom-right").unwrap();
        let base = scene_from_ast(&ast, 0);
        for seed in 1..100 {
            let sc = scene_from_ast(&ast, seed);
            assert!((217.0 / 255.0..=1.0).contains(&sc.background_shade));
            for ((a, b), c) in sc.objects.iter().zip(&base.objects).zip(&ast.objects) {
                assert_eq!(a.color_rgb, b.color_rgb);
                assert_eq!(a.shape, b.shape);
                assert_eq!(nearest_cell(a.center.0, a.center.1), c.position);
                let (gx, gy) = cell_center(c.position);
                assert!((a.center.0 - gx).abs() <= 1.0 && (a.center.1 - gy).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn static_prompt_gives_static_video() {
        let ast = parse_prompt("green circle at middle-left; red square at top-right").unwrap();
        let v = simulate(&ast, 4).unwrap();
        for f in 1..FRAMES {
            assert_eq!(v.slice(s![f, .., .., ..]), v.slice(s![0, .., .., ..]));
        }
    }

    #[test]
    fn move_right_centroid_sequence() {
        let ast = parse_prompt("red square at middle-left moves right").unwrap();
        let seed = zero_jitter_seed(&ast);
        let v = simulate(&ast, seed).unwrap();
        let xs: Vec<f64> = (0..FRAMES).map(|f| centroid_x(v.slice(s![f, .., .., ..]), color_rgb(Color::Red))).collect();
        // square spans [c-4, c+4), so its pixel centroid sits half a pixel left of c
        let expected: Vec<f64> = (0..FRAMES).map(|f| 6.0 + 2.0 * f as f64 - 0.5).collect();
        assert_eq!(xs, expected);
        let fin = final_state_scene(&ast, seed).unwrap();
        assert_eq!(fin.objects[0].center.0, 20.0);
    }

    #[test]
    fn circle_centroid_is_exact() {
        let ast = parse_prompt("blue circle at middle-left moves right").unwrap();
        let seed = zero_jitter_seed(&ast);
        let v = simulate(&ast, seed).unwrap();
        let xs: Vec<f64> = (0..FRAMES).map(|f| centroid_x(v.slice(s![f, .., .., ..]), color_rgb(Color::Blue))).collect();
        assert_eq!(xs, vec![6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0]);
    }

    #[test]
    fn turn_switches_at_midpoint() {
        let ast = parse_prompt("blue circle at center turns green").unwrap();
        let v = simulate(&ast, 1).unwrap();
        let (blue, green) = (color_rgb(Color::Blue), color_rgb(Color::Green));
        for f in 0..FRAMES {
            let fr = v.slice(s![f, .., .., ..]).to_owned();
            let (nb, ng) = (count_color(&fr, blue), count_color(&fr, green));
            if f < 4 {
                assert!(nb > 0 && ng == 0, "frame {f}");
            } else {
                assert!(nb == 0 && ng > 0, "frame {f}");
            }
        }
        let fin = final_state_scene(&ast, 1).unwrap();
        assert_eq!(fin.objects[0].color_rgb, green);
    }

    #[test]
    fn frame_zero_is_reduced_anchor() {
        let ast = parse_prompt("yellow triangle at top-center moves down then turns red").unwrap();
        for seed in 0..10 {
            let v = simulate(&ast, seed).unwrap();
            let anchor = render_frame(&scene_from_ast(&reduce_to_first_frame(&ast), seed));
            assert_eq!(v.slice(s![0, .., .., ..]), anchor);
        }
    }

    #[test]
    fn no_motion_final_state_equals_anchor_scene() {
        let ast = parse_prompt("yellow triangle at top-center").unwrap();
        assert_eq!(final_state_scene(&ast, 3).unwrap(), scene_from_ast(&reduce_to_first_frame(&ast), 3));
    }

    #[test]
    fn leaving_the_frame_is_a_geometry_error() {
        let ast = parse_prompt("red square at middle-right moves right").unwrap();
        assert!(matches!(simulate(&ast, 0), Err(Error::Geometry(_))));
        assert!(matches!(final_state_scene(&ast, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn grow_is_clamped_and_two_motion_segments() {
        assert_eq!(motion_segment(0, 1), (0, 8));
        assert_eq!(motion_segment(0, 2), (0, 4));
        assert_eq!(motion_segment(1, 2), (4, 8));
        assert_eq!(turn_frame((0, 8)), 4);
        let ast = parse_prompt("red circle at center grows then shrinks").unwrap();
        let sc = simulate_scenes(&ast, 0).unwrap();
        let hs: Vec<f64> = sc.iter().map(|s| s.objects[0].half_size).collect();
        assert_eq!(hs, vec![4.0, 4.5, 5.0, 5.5, 5.0, 4.5, 4.0, 3.5]);
    }

    #[test]
    fn ppm_header_and_rounding() {
        let mut f = Frame::zeros((2, 3, 3));
        f[[0, 0, 0]] = 1.0;
        f[[1, 2, 2]] = 0.5;
        let bytes = frame_to_ppm(f.view());
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let px = &bytes[11..];
        assert_eq!(px.len(), 18);
        assert_eq!(px[0], 255);
        assert_eq!(px[17], 128);
    }
}
